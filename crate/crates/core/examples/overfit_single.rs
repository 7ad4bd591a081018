//! Overfits the micro model to one synthetic 1 s mixture at 0 dB and reports
//! the SI-SDR gain.
//!
//! ```text
//! cargo run --release --example overfit_single -- [steps] [lr]
//! ```

use dualpath_se::data::{scale_noise, synth_noise, synth_speech, NoiseKind};
use dualpath_se::loss::LossConfig;
use dualpath_se::metrics::si_sdr;
use dualpath_se::training::{train_step, AdamW, Example, TrainConfig};
use dualpath_se::{Model, ModelConfig, ParamStore, Waveform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> dualpath_se::Result<()> {
    let mut args = std::env::args().skip(1);
    let steps: usize = args.next().map_or(500, |s| s.parse().expect("steps"));
    let lr: f64 = args.next().map_or(5e-4, |s| s.parse().expect("lr"));

    let sr = 16_000;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let speech = synth_speech(sr as usize, sr, &mut rng);
    let raw_noise = synth_noise(NoiseKind::White, sr as usize, sr, &mut rng);
    let noise = scale_noise(&speech, &raw_noise, 0.0)?;
    let ex = Example { speech, noise };
    let mixture = ex.mixture();

    let cfg = ModelConfig::micro();
    let loss = LossConfig {
        stft: cfg.stft,
        ..LossConfig::default()
    };
    let mut store = ParamStore::new();
    let model = Model::new(&cfg, &mut store, 0)?;
    let mut opt = AdamW::new(&store, TrainConfig::default().adam());

    let before = si_sdr(&ex.speech, &mixture)?;
    let t0 = std::time::Instant::now();
    for step in 1..=steps {
        let l = train_step(&model, &mut store, &mut opt, std::slice::from_ref(&ex), &loss, lr, None)?;
        if step % 50 == 0 || step == 1 {
            let out = model.enhance(&store, &Waveform::new(mixture.clone(), sr)?)?;
            let s = si_sdr(&ex.speech, &out.speech.samples)?;
            println!("step {step:4}  loss {l:.5}  si-sdr {s}  ({:.0?})", t0.elapsed());
        }
    }
    let out = model.enhance(&store, &Waveform::new(mixture, sr)?)?;
    let after = si_sdr(&ex.speech, &out.speech.samples)?;
    println!("noisy {before}  enhanced {after}  gain {:.2} dB", after.0 - before.0);
    Ok(())
}
