//! Alternating critic / generator training, checkpoints and evaluation.

mod adam;
mod checkpoint;
mod config;
mod evaluate;

use std::fs::{self, OpenOptions};
use std::path::{Path, PathBuf};

use candle_core::{DType, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::PairSet;
use crate::error::{Error, Result};
use crate::metrics::{
    adversarial_losses, composite_loss, gradient_penalty, Critic, LossReport, MsSsimParams, SsimParams, TERM_GP,
};
use crate::network::{Generator, WaveletDiscriminator};
use crate::ops::scalar_f64;

pub use adam::Adam;
pub use checkpoint::{checkpoint_name, list_checkpoints, load_checkpoint, save_checkpoint};
pub use config::{AdamConfig, TrainConfig};
pub use evaluate::{evaluate, EvalReport, IdentityModel, IspOracle, Reconstructor};

/// Critic objective value (Wasserstein estimate) in a step's report.
pub const TERM_D_LOSS: &str = "d_loss";
pub const METRICS_FILE: &str = "metrics.csv";

const GP_SALT: u64 = 0x6770_5f73_616d_706c;
const ORDER_SALT: u64 = 0x6f72_6465_725f_7368;

/// Everything that changes during training. Random draws are derived from
/// `(seed, step)` and `(seed, epoch)`, so the step counter is the whole RNG state.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub step: u64,
    pub generator: Generator,
    pub critic: WaveletDiscriminator,
    pub opt_g: Adam,
    pub opt_d: Adam,
}

impl TrainState {
    pub fn new(cfg: &TrainConfig, dtype: DType) -> Result<Self> {
        let generator = Generator::new(&cfg.model, dtype)?;
        let critic = WaveletDiscriminator::new(&cfg.model, dtype)?;
        let opt_g = Adam::new(generator.params(), cfg.lr_g, cfg.adam)?;
        let opt_d = Adam::new(critic.params(), cfg.lr_d, cfg.adam)?;
        Ok(Self {
            step: 0,
            generator,
            critic,
            opt_g,
            opt_d,
        })
    }
}

fn with_step(e: Error, step: u64) -> Error {
    match e {
        Error::NonFinite { term, .. } => Error::NonFinite { term, step: Some(step) },
        other => other,
    }
}

fn finite(t: &Tensor, term: &str, step: u64) -> Result<f64> {
    let v = scalar_f64(t)?;
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite {
            term: term.to_string(),
            step: Some(step),
        })
    }
}

/// Visiting order of the training pairs in `epoch`.
pub fn epoch_order(seed: u64, epoch: u64, n: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ORDER_SALT);
    rng.set_stream(epoch);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

/// Critic update(s) on `d_loss + λ_gp·GP`, then one generator update on the composite objective.
///
/// Returns the generator's objective with the unweighted term values plus
/// the last critic loss under [`TERM_D_LOSS`].
pub fn train_step(state: &mut TrainState, srgb: &Tensor, raw: &Tensor, cfg: &TrainConfig) -> Result<LossReport> {
    let step = state.step;
    let (_, _, h, w) = raw.dims4()?;
    let ms = MsSsimParams::fitted(SsimParams::default(), h, w)?;
    let fake = state.generator.forward(srgb)?;
    let fake_const = fake.detach();
    let raw = raw.detach();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ GP_SALT);
    rng.set_stream(step);
    let mut gp = None;
    let mut d_loss = 0.0;
    for _ in 0..cfg.critic_steps_per_gen_step {
        let adv = adversarial_losses(&state.critic.score(&raw)?, &state.critic.score(&fake_const)?)?;
        let penalty = gradient_penalty(&state.critic, &raw, &fake_const, &mut rng)?;
        d_loss = finite(&adv.d_loss, TERM_D_LOSS, step)?;
        finite(&penalty, TERM_GP, step)?;
        let total = (adv.d_loss + penalty.affine(cfg.weights.lambda_gp, 0.0)?)?;
        let grads = total.backward()?;
        state.opt_d.step(state.critic.params(), &grads)?;
        gp = Some(penalty.detach());
    }
    let gp = gp.expect("at least one critic step");

    let d_fake = state.critic.score(&fake)?;
    let loss = composite_loss(&fake, &raw, &d_fake, &gp, &cfg.weights, &ms).map_err(|e| with_step(e, step))?;
    let grads = loss.total.backward()?;
    state.opt_g.step(state.generator.params(), &grads)?;
    state.step += 1;

    let mut report = loss.report;
    report.per_term.insert(TERM_D_LOSS.to_string(), d_loss);
    Ok(report)
}

/// Column order of the metrics log.
pub const LOG_COLUMNS: [&str; 10] = [
    "step", "epoch", "total", "ssim", "tv", "adv", "gp", "d_loss", "eval_psnr", "eval_ssim",
];

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub final_checkpoint: PathBuf,
    /// Reports of the steps taken in this call, in order.
    pub history: Vec<LossReport>,
    /// `(epoch, report)` for every evaluation run in this call.
    pub evals: Vec<(usize, EvalReport)>,
}

fn fmt_f64(v: f64) -> String {
    format!("{v:e}")
}

/// Runs `cfg.epochs` epochs over `data` (resuming from `resume` if given),
/// appending one metrics row per step and writing `ckpt_<step>.bin` files to `out_dir`.
pub fn train(cfg: &TrainConfig, data: &PairSet, out_dir: &Path, resume: Option<&Path>, dtype: DType) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut state = match resume {
        Some(path) => {
            let (mut s, _) = load_checkpoint(path)?;
            s.opt_g.lr = cfg.lr_g;
            s.opt_d.lr = cfg.lr_d;
            s
        }
        None => TrainState::new(cfg, dtype)?,
    };

    let log_path = out_dir.join(METRICS_FILE);
    let fresh = state.step == 0 || !log_path.exists();
    let file = OpenOptions::new()
        .create(true)
        .write(true)
        .append(!fresh)
        .truncate(fresh)
        .open(&log_path)
        .map_err(|e| Error::io(&log_path, e))?;
    let mut log = csv::Writer::from_writer(file);
    let csv_err = |e: csv::Error| Error::io(&log_path, std::io::Error::other(e.to_string()));
    if fresh {
        log.write_record(LOG_COLUMNS).map_err(csv_err)?;
    }

    let n = data.len();
    let per_epoch = n.div_ceil(cfg.batch_size) as u64;
    let total_steps = cfg.epochs as u64 * per_epoch;
    let mut history = Vec::new();
    let mut evals = Vec::new();
    let mut last_saved = None;
    if state.step == 0 {
        let p = out_dir.join(checkpoint_name(0));
        save_checkpoint(&state, cfg, &p)?;
        last_saved = Some((0, p));
    }
    while state.step < total_steps {
        let epoch = state.step / per_epoch;
        let j = (state.step % per_epoch) as usize;
        let order = epoch_order(cfg.seed, epoch, n);
        let idx = &order[j * cfg.batch_size..((j + 1) * cfg.batch_size).min(n)];
        let (srgb, raw) = data.batch(idx, dtype)?;
        let report = train_step(&mut state, &srgb, &raw, cfg)?;

        let epoch_done = j as u64 + 1 == per_epoch;
        let last = state.step == total_steps;
        let eval = if epoch_done && cfg.eval_every > 0 && ((epoch as usize + 1) % cfg.eval_every == 0 || last) {
            let r = evaluate(&state.generator, data)?;
            evals.push((epoch as usize + 1, r.clone()));
            Some(r)
        } else {
            None
        };
        let mut row = vec![state.step.to_string(), epoch.to_string(), fmt_f64(report.total)];
        for term in &LOG_COLUMNS[3..8] {
            row.push(fmt_f64(report.term(term)));
        }
        match &eval {
            Some(r) => {
                row.push(fmt_f64(r.psnr));
                row.push(fmt_f64(r.ssim));
            }
            None => row.extend([String::new(), String::new()]),
        }
        log.write_record(&row).map_err(csv_err)?;
        log.flush().map_err(|e| Error::io(&log_path, e))?;
        history.push(report);

        if cfg.checkpoint_every > 0 && state.step % cfg.checkpoint_every == 0 {
            let p = out_dir.join(checkpoint_name(state.step));
            save_checkpoint(&state, cfg, &p)?;
            last_saved = Some((state.step, p));
        }
    }
    let final_checkpoint = match last_saved {
        Some((s, p)) if s == state.step => p,
        _ => {
            let p = out_dir.join(checkpoint_name(state.step));
            save_checkpoint(&state, cfg, &p)?;
            p
        }
    };
    Ok(TrainOutcome {
        final_checkpoint,
        history,
        evals,
    })
}
