//! Optimization: learning-rate schedule, AdamW steps, the epoch loop and a
//! finite-difference gradient checker.

mod gradcheck;
mod optim;
mod run;

pub use gradcheck::{analytic_gradients, compare, grad_check, Analytic, GradCheckConfig, GradCheckReport, GroupResult, Offender};
pub use optim::{AdamConfig, AdamW};
pub use run::{epoch_file, train_run, validation_set, EpochSummary, LogLine, TrainOutcome, BEST_FILE, LOG_FILE};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::loss::{total_loss_var, LossConfig};
use crate::model::Model;
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr0: f64,
    pub decay_factor: f64,
    pub decay_every: usize,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub grad_clip: Option<f64>,
    /// Training crop length in seconds.
    pub segment_secs: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 150,
            lr0: 5e-4,
            decay_factor: 0.95,
            decay_every: 4,
            weight_decay: 1e-2,
            batch_size: 2,
            seed: 0,
            grad_clip: None,
            segment_secs: 4.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 > 0.0) {
            return Err(Error::Config(format!("lr0 must be positive, got {}", self.lr0)));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return Err(Error::Config(format!("decay_factor {} outside (0, 1]", self.decay_factor)));
        }
        if self.decay_every == 0 || self.batch_size == 0 {
            return Err(Error::Config("decay_every and batch_size must be >= 1".into()));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config("weight_decay must be >= 0".into()));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(Error::Config("grad_clip must be positive".into()));
            }
        }
        if !(self.segment_secs > 0.0) {
            return Err(Error::Config("segment_secs must be positive".into()));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            weight_decay: self.weight_decay,
            ..AdamConfig::default()
        }
    }
}

/// Stepped decay: `lr0 · decay_factor^⌊epoch / decay_every⌋`.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> f64 {
    cfg.lr0 * cfg.decay_factor.powi((epoch / cfg.decay_every) as i32)
}

/// One training example: clean speech and the scaled noise it was mixed with.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub speech: Vec<f64>,
    pub noise: Vec<f64>,
}

impl Example {
    pub fn mixture(&self) -> Vec<f64> {
        self.speech.iter().zip(&self.noise).map(|(s, n)| s + n).collect()
    }

    /// Both sources scaled so the mixture has unit RMS. A silent mixture is
    /// returned unchanged.
    pub fn normalized(&self) -> Example {
        let mix = self.mixture();
        let ms = mix.iter().map(|v| v * v).sum::<f64>() / mix.len().max(1) as f64;
        if ms == 0.0 {
            return self.clone();
        }
        let k = 1.0 / ms.sqrt();
        Example {
            speech: self.speech.iter().map(|v| v * k).collect(),
            noise: self.noise.iter().map(|v| v * k).collect(),
        }
    }
}

/// Mean loss and parameter gradients over `batch`, summed in batch order.
/// Each example is first brought to unit mixture RMS.
pub fn batch_gradients(
    model: &Model,
    store: &ParamStore,
    batch: &[Example],
    loss: &LossConfig,
    dropout_seed: Option<u64>,
) -> Result<(f64, Vec<Option<Tensor>>)> {
    if batch.is_empty() {
        return Err(Error::Config("empty batch".into()));
    }
    let plan = crate::signal::StftPlan::new(loss.stft)?;
    let plan = std::sync::Arc::new(plan);
    let mut sum: Vec<Option<Tensor>> = vec![None; store.len()];
    let mut total = 0.0;
    for (i, ex) in batch.iter().enumerate() {
        let ex = &ex.normalized();
        let mut g = Graph::new(store);
        if let Some(seed) = dropout_seed {
            g = g.with_dropout_seed(seed.wrapping_add(i as u64));
        }
        let out = model.forward(&mut g, &ex.mixture())?;
        let l = total_loss_var(&mut g, out.speech, out.noise, &ex.speech, &ex.noise, &plan, loss)?;
        let lv = g.value(l).data()[0];
        if !lv.is_finite() {
            return Err(Error::NonFiniteTraining {
                what: "loss",
                param: "<loss>".into(),
            });
        }
        total += lv;
        let grads = g.backward(l)?;
        for (id, t) in grads.params() {
            match &mut sum[id.index()] {
                Some(acc) => acc.add_assign(t),
                slot => *slot = Some(t.clone()),
            }
        }
    }
    let inv = 1.0 / batch.len() as f64;
    for t in sum.iter_mut().flatten() {
        t.data_mut().iter_mut().for_each(|v| *v *= inv);
    }
    Ok((total * inv, sum))
}

/// Forward, backward and one AdamW update. Returns the mean batch loss.
pub fn train_step(
    model: &Model,
    store: &mut ParamStore,
    opt: &mut AdamW,
    batch: &[Example],
    loss: &LossConfig,
    lr: f64,
    grad_clip: Option<f64>,
) -> Result<f64> {
    let dropout_seed = (model.config.dropout > 0.0).then_some(opt.step);
    let (l, mut grads) = batch_gradients(model, store, batch, loss, dropout_seed)?;
    for (id, g) in store.ids().zip(&grads) {
        if let Some(g) = g {
            if !g.all_finite() {
                return Err(Error::NonFiniteTraining {
                    what: "gradient",
                    param: store.get(id).name.clone(),
                });
            }
        }
    }
    if let Some(max_norm) = grad_clip {
        let norm = grads
            .iter()
            .flatten()
            .map(|t| t.data().iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt();
        if norm > max_norm {
            let k = max_norm / norm;
            for t in grads.iter_mut().flatten() {
                t.data_mut().iter_mut().for_each(|v| *v *= k);
            }
        }
    }
    opt.update(store, &grads, lr)?;
    Ok(l)
}

/// Loss of the current parameters on `batch` (normalized as in
/// [`batch_gradients`]) without updating anything.
pub fn evaluate_loss(model: &Model, store: &ParamStore, batch: &[Example], loss: &LossConfig) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Config("empty batch".into()));
    }
    let plan = std::sync::Arc::new(crate::signal::StftPlan::new(loss.stft)?);
    let mut total = 0.0;
    for ex in batch {
        let ex = &ex.normalized();
        let mut g = Graph::new(store);
        let out = model.forward(&mut g, &ex.mixture())?;
        let l = total_loss_var(&mut g, out.speech, out.noise, &ex.speech, &ex.noise, &plan, loss)?;
        total += g.value(l).data()[0];
    }
    Ok(total / batch.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{scale_noise, synth_noise, synth_speech, NoiseKind};
    use crate::model::ModelConfig;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn schedule_examples() {
        let cfg = TrainConfig::default();
        assert_eq!(lr_at(0, &cfg), 5e-4);
        assert_eq!(lr_at(3, &cfg), 5e-4);
        assert!((lr_at(4, &cfg) - 5e-4 * 0.95).abs() < 1e-18);
        assert!((lr_at(9, &cfg) - 5e-4 * 0.95 * 0.95).abs() < 1e-18);
    }

    proptest! {
        #[test]
        fn schedule_never_increases(e in 0usize..500, f in 0.01f64..=1.0, every in 1usize..10) {
            let cfg = TrainConfig { decay_factor: f, decay_every: every, ..TrainConfig::default() };
            prop_assert!(lr_at(e + 1, &cfg) <= lr_at(e, &cfg));
        }
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = [
            TrainConfig { lr0: 0.0, ..TrainConfig::default() },
            TrainConfig { decay_factor: 1.5, ..TrainConfig::default() },
            TrainConfig { decay_factor: 0.0, ..TrainConfig::default() },
            TrainConfig { decay_every: 0, ..TrainConfig::default() },
            TrainConfig { grad_clip: Some(-1.0), ..TrainConfig::default() },
        ];
        for c in bad {
            assert!(c.validate().is_err(), "{c:?}");
        }
    }

    fn scalar_store(v: f64) -> (ParamStore, crate::params::ParamId) {
        let mut store = ParamStore::new();
        let id = store.insert("p", Tensor::scalar(v), true).unwrap();
        (store, id)
    }

    #[test]
    fn quadratic_toy_reaches_its_optimum() {
        let target = 0.5;
        let (mut store, id) = scalar_store(0.0);
        let mut opt = AdamW::new(&store, AdamConfig { weight_decay: 0.0, ..AdamConfig::default() });
        for step in 0..200 {
            let grads = {
                let mut g = Graph::new(&store);
                let p = g.param(id);
                let t = g.constant(Tensor::scalar(target));
                let d = g.sub(p, t).unwrap();
                let l = g.mul(d, d).unwrap();
                vec![g.backward(l).unwrap().param(id).cloned()]
            };
            opt.update(&mut store, &grads, 0.3 * 0.98f64.powi(step)).unwrap();
        }
        let p = store.value(id).data()[0];
        assert!((p - target).abs() < 1e-6, "{p}");
    }

    #[test]
    fn zero_gradients_only_decay_weights() {
        let (mut store, id) = scalar_store(2.0);
        let frozen = store.insert("f", Tensor::scalar(2.0), false).unwrap();
        let mut opt = AdamW::new(&store, AdamConfig::default());
        opt.update(&mut store, &[None, None], 0.1).unwrap();
        assert_eq!(store.value(id).data()[0], 2.0 * (1.0 - 0.1 * 1e-2));
        assert_eq!(store.value(frozen).data()[0], 2.0);
        let zero = Some(Tensor::scalar(0.0));
        opt.update(&mut store, &[zero.clone(), zero], 0.1).unwrap();
        assert_eq!(store.value(id).data()[0], 2.0 * (1.0 - 0.1 * 1e-2) * (1.0 - 0.1 * 1e-2));
        assert_eq!(opt.step, 2);
        assert!(opt.update(&mut store, &[None], 0.1).is_err());
    }

    #[test]
    fn normalization_gives_unit_mixture_rms() {
        let ex = Example { speech: vec![3.0, -1.0], noise: vec![1.0, -1.0] };
        let n = ex.normalized();
        let mix = n.mixture();
        assert!((mix.iter().map(|v| v * v).sum::<f64>() / 2.0 - 1.0).abs() < 1e-12);
        assert!((n.speech[0] / n.noise[0] - 3.0).abs() < 1e-12);
        let silent = Example { speech: vec![1.0], noise: vec![-1.0] };
        assert_eq!(silent.normalized(), silent);
    }

    fn micro_example() -> Example {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let speech = synth_speech(8000, 16_000, &mut rng);
        let noise = synth_noise(NoiseKind::White, 8000, 16_000, &mut rng);
        let noise = scale_noise(&speech, &noise, 5.0).unwrap();
        Example { speech, noise }
    }

    #[test]
    fn micro_loss_mostly_decreases_at_small_lr() {
        let cfg = ModelConfig::micro();
        let loss = LossConfig { stft: cfg.stft, ..LossConfig::default() };
        let mut store = ParamStore::new();
        let model = Model::new(&cfg, &mut store, 0).unwrap();
        let mut opt = AdamW::new(&store, TrainConfig::default().adam());
        let batch = [micro_example()];
        let mut losses = Vec::new();
        for _ in 0..50 {
            losses.push(train_step(&model, &mut store, &mut opt, &batch, &loss, 1e-4, None).unwrap());
        }
        losses.push(evaluate_loss(&model, &store, &batch, &loss).unwrap());
        let rises = losses.windows(2).filter(|w| w[1] > w[0]).count();
        assert!(rises <= 5, "{rises} rises: {losses:?}");
        assert!(losses[50] < losses[0]);
    }

    #[test]
    fn train_steps_are_reproducible() {
        let cfg = ModelConfig::micro();
        let loss = LossConfig { stft: cfg.stft, ..LossConfig::default() };
        let run = || {
            let mut store = ParamStore::new();
            let model = Model::new(&cfg, &mut store, 3).unwrap();
            let mut opt = AdamW::new(&store, TrainConfig::default().adam());
            for _ in 0..3 {
                train_step(&model, &mut store, &mut opt, &[micro_example()], &loss, 5e-4, Some(1.0)).unwrap();
            }
            (store, opt)
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn empty_batches_are_rejected() {
        let cfg = ModelConfig::micro();
        let loss = LossConfig { stft: cfg.stft, ..LossConfig::default() };
        let mut store = ParamStore::new();
        let model = Model::new(&cfg, &mut store, 0).unwrap();
        assert!(evaluate_loss(&model, &store, &[], &loss).is_err());
        assert!(batch_gradients(&model, &store, &[], &loss, None).is_err());
    }
}
