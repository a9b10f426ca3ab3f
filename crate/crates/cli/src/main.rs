use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use rst_isp::candle_core::DType;
use rst_isp::data::{self, DatasetIndex, PairSet, Track};
use rst_isp::train::{self, evaluate, load_checkpoint, EvalReport, IdentityModel, IspOracle, TrainConfig};
use rst_isp::Error;

const MANIFEST: &str = "manifest.json";

#[derive(Parser, Debug)]
#[command(name = "rst-isp", version, about = "sRGB to RAW reconstruction toolkit")]
struct Cli {
    /// Run matrix kernels on one thread so results do not depend on the machine's core count.
    #[arg(long, global = true)]
    deterministic: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train the generator and critic on a dataset split.
    Train(TrainArgs),
    /// Report mean PSNR / SSIM of a model on a dataset split.
    Eval(EvalArgs),
    /// Reconstruct RAW from one sRGB image.
    Infer(InferArgs),
    /// Write synthetic sRGB/RAW pairs in the dataset layout.
    Synth(SynthArgs),
    /// Write a gamma-brightened preview of a stored RAW image.
    Viz(VizArgs),
}

#[derive(Args, Debug)]
struct DataArgs {
    /// Dataset root containing `<track>/<split>/{srgb,raw}`.
    #[arg(long, env = "RST_ISP_DATA_DIR")]
    data_dir: PathBuf,
    #[arg(long, value_enum, default_value_t = TrackArg::Synth)]
    track: TrackArg,
    #[arg(long, default_value = "train")]
    split: String,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum TrackArg {
    S7,
    P20,
    Synth,
}

impl From<TrackArg> for Track {
    fn from(t: TrackArg) -> Self {
        match t {
            TrackArg::S7 => Track::S7,
            TrackArg::P20 => Track::P20,
            TrackArg::Synth => Track::Synth,
        }
    }
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// TOML training config; missing keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    out: PathBuf,
    /// Overrides both the run seed and the model initialization seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr_g: Option<f64>,
    #[arg(long)]
    lr_d: Option<f64>,
    #[arg(long)]
    checkpoint_every: Option<u64>,
    /// Any config field by dotted path, e.g. `--set weights.lambda_adv=0.01`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Continue from this checkpoint; its config is used unless --config is given.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum ModelKind {
    /// The trained generator from --checkpoint.
    Generator,
    /// Output equals input.
    Identity,
    /// Analytic inverse of the synthetic ISP (synthetic data only).
    Oracle,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, value_enum, default_value_t = ModelKind::Generator)]
    model: ModelKind,
    /// Also write a manifest and `eval.json` here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct InferArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// 8-bit sRGB PNG.
    #[arg(long)]
    input: PathBuf,
    /// Directory receiving `<name>.png` (16-bit RAW) and `<name>_preview.png`.
    #[arg(long, alias = "out")]
    output: PathBuf,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 8)]
    count: usize,
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, default_value = "train")]
    split: String,
    /// Dataset root; pairs go to `<out>/synth/<split>`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct VizArgs {
    /// 16-bit RAW PNG.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
}

#[derive(Serialize)]
struct RunManifest<'a> {
    command: &'a str,
    argv: Vec<String>,
    config: serde_json::Value,
    code_version: &'static str,
    seed: Option<u64>,
    deterministic: bool,
    started_unix: u64,
    outputs: Vec<String>,
}

fn write_manifest(
    dir: &Path,
    command: &str,
    config: serde_json::Value,
    seed: Option<u64>,
    deterministic: bool,
    outputs: Vec<String>,
) -> Result<(), Error> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let manifest = RunManifest {
        command,
        argv: std::env::args().collect(),
        config,
        code_version: env!("CARGO_PKG_VERSION"),
        seed,
        deterministic,
        started_unix: SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0),
        outputs,
    };
    let path = dir.join(MANIFEST);
    fs::write(&path, serde_json::to_string_pretty(&manifest)? + "\n").map_err(|e| io_err(&path, e))
}

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn load_config(path: &Path) -> Result<TrainConfig, Error> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {}", path.display(), e.message())))
}

fn apply_overrides(cfg: TrainConfig, overrides: &[String]) -> Result<TrainConfig, Error> {
    if overrides.is_empty() {
        return Ok(cfg);
    }
    let mut root = serde_json::to_value(&cfg)?;
    for item in overrides {
        let (key, raw) = item
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{item}` is not KEY=VALUE")))?;
        let value = serde_json::from_str(raw).unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
        let mut slot = &mut root;
        for part in key.split('.') {
            slot = slot
                .as_object_mut()
                .and_then(|m| m.get_mut(part))
                .ok_or_else(|| Error::Config(format!("unknown config key `{key}`")))?;
        }
        *slot = value;
    }
    serde_json::from_value(root).map_err(|e| Error::Config(format!("override: {e}")))
}

fn load_split(args: &DataArgs) -> Result<PairSet, Error> {
    let index = DatasetIndex::open(&args.data_dir, args.track.into(), &args.split)?;
    if index.is_empty() {
        return Err(Error::EmptyDataset);
    }
    PairSet::load(&index)
}

fn run_train(a: TrainArgs, deterministic: bool) -> Result<(), Error> {
    let mut cfg = match (&a.config, &a.checkpoint) {
        (Some(p), _) => load_config(p)?,
        (None, Some(k)) => load_checkpoint(k)?.1,
        (None, None) => TrainConfig::default(),
    };
    if let Some(s) = a.seed {
        cfg.seed = s;
        cfg.model.seed = s;
    }
    if let Some(v) = a.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = a.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = a.lr_g {
        cfg.lr_g = v;
    }
    if let Some(v) = a.lr_d {
        cfg.lr_d = v;
    }
    if let Some(v) = a.checkpoint_every {
        cfg.checkpoint_every = v;
    }
    let cfg = apply_overrides(cfg, &a.overrides)?;
    cfg.validate()?;
    let outputs = vec![a.out.join(train::METRICS_FILE).display().to_string(), a.out.join("ckpt_<step>.bin").display().to_string()];
    write_manifest(&a.out, "train", serde_json::to_value(&cfg)?, Some(cfg.seed), deterministic, outputs)?;
    let data = load_split(&a.data)?;
    let outcome = train::train(&cfg, &data, &a.out, a.checkpoint.as_deref(), DType::F32)?;
    println!("checkpoint {}", outcome.final_checkpoint.display());
    if let Some((epoch, r)) = outcome.evals.last() {
        println!("epoch {epoch} psnr {:.4} ssim {:.6}", r.psnr, r.ssim);
    }
    Ok(())
}

#[derive(Serialize)]
struct EvalOutput {
    model: String,
    pairs: usize,
    psnr: f64,
    ssim: f64,
}

fn run_eval(a: EvalArgs, deterministic: bool) -> Result<(), Error> {
    if let Some(out) = &a.out {
        let config = serde_json::json!({
            "model": format!("{:?}", a.model).to_lowercase(),
            "checkpoint": a.checkpoint,
            "data_dir": a.data.data_dir,
            "track": Track::from(a.data.track),
            "split": a.data.split,
        });
        write_manifest(out, "eval", config, None, deterministic, vec![out.join("eval.json").display().to_string()])?;
    }
    let data = load_split(&a.data)?;
    let report: EvalReport = match a.model {
        ModelKind::Generator => {
            let path = a
                .checkpoint
                .as_ref()
                .ok_or_else(|| Error::Config("--checkpoint is required for the generator model".into()))?;
            evaluate(&load_checkpoint(path)?.0.generator, &data)?
        }
        ModelKind::Identity => evaluate(&IdentityModel, &data)?,
        ModelKind::Oracle => evaluate(&IspOracle, &data)?,
    };
    let out = EvalOutput {
        model: format!("{:?}", a.model).to_lowercase(),
        pairs: data.len(),
        psnr: report.psnr,
        ssim: report.ssim,
    };
    let line = serde_json::to_string(&out)?;
    println!("{line}");
    if let Some(dir) = &a.out {
        let path = dir.join("eval.json");
        fs::write(&path, line + "\n").map_err(|e| io_err(&path, e))?;
    }
    Ok(())
}

fn run_infer(a: InferArgs, deterministic: bool) -> Result<(), Error> {
    let stem = a
        .input
        .file_stem()
        .and_then(|s| s.to_str())
        .ok_or_else(|| Error::Config(format!("cannot name output for {}", a.input.display())))?
        .to_string();
    let raw_path = a.output.join(format!("{stem}.png"));
    let preview_path = a.output.join(format!("{stem}_preview.png"));
    let config = serde_json::json!({ "checkpoint": a.checkpoint, "input": a.input });
    let outputs = vec![raw_path.display().to_string(), preview_path.display().to_string()];
    write_manifest(&a.output, "infer", config, None, deterministic, outputs)?;
    let (state, _) = load_checkpoint(&a.checkpoint)?;
    let srgb = data::load_srgb(&a.input)?.unsqueeze(0)?;
    let raw = state.generator.forward(&srgb.to_dtype(state.generator.params().dtype())?)?;
    data::save_raw(&raw, &raw_path)?;
    data::save_raw_visualization(&raw, &preview_path)?;
    println!("raw {}", raw_path.display());
    println!("preview {}", preview_path.display());
    Ok(())
}

fn run_synth(a: SynthArgs, deterministic: bool) -> Result<(), Error> {
    let split_dir = data::split_dir(&a.out, Track::Synth, &a.split);
    let config = serde_json::json!({ "seed": a.seed, "count": a.count, "size": a.size, "split": a.split });
    write_manifest(&a.out, "synth", config, Some(a.seed), deterministic, vec![split_dir.display().to_string()])?;
    let index = data::write_synthetic_split(&a.out, &a.split, a.seed, a.count, a.size)?;
    println!("wrote {} pairs to {}", index.len(), split_dir.display());
    Ok(())
}

fn run_viz(a: VizArgs) -> Result<(), Error> {
    let raw = data::load_raw(&a.input)?;
    data::save_raw_visualization(&raw, &a.output)?;
    println!("preview {}", a.output.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if cli.deterministic {
        // Read by the matmul kernels when their thread pool is first built.
        std::env::set_var("RAYON_NUM_THREADS", "1");
    }
    let d = cli.deterministic;
    let result = match cli.command {
        Command::Train(a) => run_train(a, d),
        Command::Eval(a) => run_eval(a, d),
        Command::Infer(a) => run_infer(a, d),
        Command::Synth(a) => run_synth(a, d),
        Command::Viz(a) => run_viz(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error: {}: {msg}", e.kind());
            ExitCode::from(1)
        }
    }
}
