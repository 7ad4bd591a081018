//! Finite-difference check of the whole micro model through the training loss.
//!
//! ```text
//! cargo run --release --example grad_check -- [sample_fraction] [step]
//! ```

use dualpath_se::loss::{total_loss_var, LossConfig};
use dualpath_se::training::{grad_check, GradCheckConfig};
use dualpath_se::{Model, ModelConfig, ParamStore};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> dualpath_se::Result<()> {
    let mut args = std::env::args().skip(1);
    let fraction: f64 = args.next().map_or(0.01, |s| s.parse().expect("fraction"));
    let step: f64 = args.next().map_or(GradCheckConfig::default().step, |s| s.parse().expect("step"));
    let cfg = ModelConfig::micro();
    let mut store = ParamStore::new();
    let model = Model::new(&cfg, &mut store, 0)?;
    // broadband signals: pure tones leave near-constant feature cells where
    // stacked layer norms amplify steeply enough to defeat finite differences
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let speech: Vec<f64> = (0..1024).map(|_| 0.3 * rng.gen_range(-1.0..1.0)).collect();
    let noise: Vec<f64> = (0..1024).map(|_| 0.1 * rng.gen_range(-1.0..1.0)).collect();
    let mixture: Vec<f64> = speech.iter().zip(&noise).map(|(a, b)| a + b).collect();
    let loss = LossConfig {
        stft: cfg.stft,
        ..LossConfig::default()
    };
    let plan = model.stft_plan().clone();
    let gc = GradCheckConfig {
        sample_fraction: fraction,
        step,
        ..GradCheckConfig::default()
    };
    let report = grad_check(
        &mut store,
        &[],
        |g, _| {
            let out = model.forward(g, &mixture)?;
            total_loss_var(g, out.speech, out.noise, &speech, &noise, &plan, &loss)
        },
        &gc,
    )?;
    println!("{}", report.summary());
    for w in report.worst.iter().take(5) {
        println!("  {} [{}]  rel err {:.2e}", w.group, w.index, w.rel_err);
    }
    Ok(())
}
