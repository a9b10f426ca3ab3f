use proptest::prelude::*;
use rst_isp::isp::{IspParams, GAIN_RANGE, GAMMA_RANGE, KNEE_SAMPLE_RANGE};

fn params() -> impl Strategy<Value = IspParams> {
    any::<u64>().prop_map(IspParams::sample)
}

proptest! {
    #[test]
    fn forward_is_monotone_along_gray_ramps(p in params(), a in 0.0f64..1.0, b in 0.0f64..1.0) {
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        let (flo, _) = p.forward_pixel([lo; 3]);
        let (fhi, _) = p.forward_pixel([hi; 3]);
        for k in 0..3 {
            prop_assert!(flo[k] <= fhi[k] + 1e-12);
        }
    }

    #[test]
    fn unclipped_pixels_invert(p in params(), x in prop::array::uniform3(0.02f64..0.3)) {
        let (y, clipped) = p.forward_pixel(x);
        prop_assume!(!clipped);
        let back = p.inverse_pixel(y);
        for k in 0..3 {
            prop_assert!((back[k] - x[k]).abs() < 1e-9, "{:?} vs {:?}", back, x);
        }
    }

    #[test]
    fn outputs_stay_in_unit_range(p in params(), x in prop::array::uniform3(-0.5f64..2.0)) {
        let (y, _) = p.forward_pixel(x);
        prop_assert!(y.iter().all(|v| (0.0..=1.0).contains(v)));
    }
}

fn coverage(values: impl Iterator<Item = f64>, range: (f64, f64)) {
    let v: Vec<f64> = values.collect();
    let span = range.1 - range.0;
    let min = v.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    assert!(min >= range.0 && max <= range.1, "{min}..{max} outside {range:?}");
    assert!(min - range.0 < 0.05 * span, "low end {min} of {range:?}");
    assert!(range.1 - max < 0.05 * span, "high end {max} of {range:?}");
}

#[test]
fn sampling_covers_the_documented_ranges() {
    let draws: Vec<IspParams> = (0..1000).map(IspParams::sample).collect();
    for k in 0..3 {
        coverage(draws.iter().map(|p| p.wb_gains[k]), GAIN_RANGE);
    }
    coverage(draws.iter().map(|p| p.gamma), GAMMA_RANGE);
    coverage(draws.iter().map(|p| p.tone_knee), KNEE_SAMPLE_RANGE);
}

#[test]
fn distinct_seeds_give_distinct_parameters() {
    let draws: Vec<IspParams> = (0..100).map(IspParams::sample).collect();
    for i in 0..draws.len() {
        for j in i + 1..draws.len() {
            assert_ne!(draws[i], draws[j]);
        }
    }
    assert_eq!(IspParams::sample(42), IspParams::sample(42));
}
