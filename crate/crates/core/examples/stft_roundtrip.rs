//! Analyses and resynthesizes random 1 s waveforms with the `paper` preset framing
//! (25 ms Hann window, 6.25 ms hop, 512-point FFT) and prints the
//! reconstruction error away from the edges.

use dualpath_se::signal::{istft, stft, StftConfig, Waveform};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> dualpath_se::Result<()> {
    let cfg = StftConfig::paper();
    println!("F = {}, T = {} for 1 s", cfg.n_bins(), cfg.n_frames(16_000));
    for seed in 0..5 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = Waveform::new((0..16_000).map(|_| rng.gen_range(-1.0..1.0)).collect(), 16_000)?;
        let spec = stft(&w, &cfg)?;
        let back = istft(&spec, &cfg, w.len())?;
        let inner = cfg.win_len..w.len() - cfg.win_len;
        let err: f64 = inner.clone().map(|i| (back.samples[i] - w.samples[i]).powi(2)).sum();
        let energy: f64 = inner.map(|i| w.samples[i].powi(2)).sum();
        println!("seed {seed}: relative L2 error {:.2e}", (err / energy).sqrt());
    }
    Ok(())
}
