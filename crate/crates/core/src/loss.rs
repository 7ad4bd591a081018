//! Energy-weighted speech/noise objective.
//!
//! Each source is scored with a convex mix of a time-domain MSE and a
//! spectral magnitude L1 term; the two sources are weighted by the share of
//! clean-speech energy `α = ‖x‖² / (‖x‖² + ‖n‖²)`.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::signal::{StftConfig, StftPlan};
use crate::tensor::Tensor;

/// How the spectral term combines the real and imaginary magnitude differences.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TfL1Mode {
    /// `| (|X_r| − |X̂_r|) + (|X_i| − |X̂_i|) |` per cell.
    #[default]
    AsPrinted,
    /// `| |X_r| − |X̂_r| | + | |X_i| − |X̂_i| |` per cell.
    PerComponent,
}

impl TfL1Mode {
    pub fn name(self) -> &'static str {
        match self {
            TfL1Mode::AsPrinted => "as_printed",
            TfL1Mode::PerComponent => "per_component",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "as_printed" => Ok(Self::AsPrinted),
            "per_component" => Ok(Self::PerComponent),
            other => Err(Error::Config(format!("unknown tf_l1_mode `{other}`"))),
        }
    }
}

/// Units of the spectra compared by the spectral term.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SpectrumScale {
    /// Divided by the window sum, so a sinusoid of amplitude `a` peaks near `a/2`.
    #[default]
    Amplitude,
    /// The transform as computed.
    Raw,
}

impl SpectrumScale {
    pub fn name(self) -> &'static str {
        match self {
            SpectrumScale::Amplitude => "amplitude",
            SpectrumScale::Raw => "raw",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "amplitude" => Ok(Self::Amplitude),
            "raw" => Ok(Self::Raw),
            other => Err(Error::Config(format!("unknown spectrum scale `{other}`"))),
        }
    }

    /// Factor applied to spectra (and so to the spectral term) for `window`.
    pub fn factor(self, window: &[f64]) -> f64 {
        match self {
            SpectrumScale::Amplitude => 1.0 / window.iter().sum::<f64>(),
            SpectrumScale::Raw => 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub beta: f64,
    pub stft: StftConfig,
    pub tf_l1_mode: TfL1Mode,
    pub spectrum: SpectrumScale,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            beta: 0.4,
            stft: StftConfig::paper(),
            tf_l1_mode: TfL1Mode::AsPrinted,
            spectrum: SpectrumScale::Amplitude,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(Error::Config(format!("beta {} outside [0, 1]", self.beta)));
        }
        self.stft.validate()
    }
}

fn same_len(a: &[f64], b: &[f64], what: &str) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!(
            "{what}: lengths {} and {} differ",
            a.len(),
            b.len()
        )));
    }
    Ok(())
}

fn energy(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum()
}

/// Share of clean-speech energy in the clean pair.
pub fn alpha(x: &[f64], n: &[f64]) -> Result<f64> {
    same_len(x, n, "alpha")?;
    let (ex, en) = (energy(x), energy(n));
    if ex + en == 0.0 {
        return Err(Error::DegeneratePair(
            "speech and noise are both silent".into(),
        ));
    }
    Ok(ex / (ex + en))
}

pub fn loss_time(x: &[f64], x_hat: &[f64]) -> Result<f64> {
    same_len(x, x_hat, "time loss")?;
    if x.is_empty() {
        return Err(Error::Shape("time loss of empty signals".into()));
    }
    Ok(x.iter()
        .zip(x_hat)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / x.len() as f64)
}

/// Spectral term on two `[2, T, F]` spectrogram tensors, averaged over `T·F`.
pub fn tf_l1_tensors(reference: &Tensor, estimate: &Tensor, mode: TfL1Mode) -> Result<f64> {
    reference.same_shape(estimate, "tf loss")?;
    let (ch, t, f) = reference.dims3()?;
    if ch != 2 {
        return Err(Error::Shape(format!("tf loss needs 2 channels, got {ch}")));
    }
    let n = t * f;
    let (xr, xi) = reference.data().split_at(n);
    let (er, ei) = estimate.data().split_at(n);
    let mut sum = 0.0;
    for i in 0..n {
        let dr = xr[i].abs() - er[i].abs();
        let di = xi[i].abs() - ei[i].abs();
        sum += match mode {
            TfL1Mode::AsPrinted => (dr + di).abs(),
            TfL1Mode::PerComponent => dr.abs() + di.abs(),
        };
    }
    Ok(sum / n as f64)
}

pub fn loss_tf(x: &[f64], x_hat: &[f64], cfg: &LossConfig) -> Result<f64> {
    same_len(x, x_hat, "tf loss")?;
    let plan = StftPlan::new(cfg.stft)?;
    let k = cfg.spectrum.factor(plan.window());
    Ok(k * tf_l1_tensors(&plan.analyze(x)?, &plan.analyze(x_hat)?, cfg.tf_l1_mode)?)
}

pub fn loss_speech(x: &[f64], x_hat: &[f64], cfg: &LossConfig) -> Result<f64> {
    let t = loss_time(x, x_hat)?;
    let f = loss_tf(x, x_hat, cfg)?;
    Ok(cfg.beta * t + (1.0 - cfg.beta) * f)
}

pub fn loss_total(x: &[f64], n: &[f64], x_hat: &[f64], n_hat: &[f64], cfg: &LossConfig) -> Result<f64> {
    let a = alpha(x, n)?;
    Ok(a * loss_speech(x, x_hat, cfg)? + (1.0 - a) * loss_speech(n, n_hat, cfg)?)
}

/// Differentiable per-source loss of an estimated waveform against a fixed target.
pub fn source_loss_var(
    g: &mut Graph<'_>,
    estimate: Var,
    target: &[f64],
    plan: &Arc<StftPlan>,
    cfg: &LossConfig,
) -> Result<Var> {
    let target_t = Tensor::new(vec![target.len()], target.to_vec())?;
    let time = g.mse_const(estimate, &target_t)?;
    let spec_ref = plan.analyze(target)?;
    let spec_est = g.stft(estimate, plan.clone())?;
    let tf = g.tf_l1_const(spec_est, &spec_ref, cfg.tf_l1_mode)?;
    let time = g.scale(time, cfg.beta);
    let tf = g.scale(tf, (1.0 - cfg.beta) * cfg.spectrum.factor(plan.window()));
    g.add(time, tf)
}

/// Differentiable total loss; `α` comes from the clean pair.
pub fn total_loss_var(
    g: &mut Graph<'_>,
    speech_est: Var,
    noise_est: Var,
    speech: &[f64],
    noise: &[f64],
    plan: &Arc<StftPlan>,
    cfg: &LossConfig,
) -> Result<Var> {
    let a = alpha(speech, noise)?;
    let ls = source_loss_var(g, speech_est, speech, plan, cfg)?;
    let ln = source_loss_var(g, noise_est, noise, plan, cfg)?;
    let ls = g.scale(ls, a);
    let ln = g.scale(ln, 1.0 - a);
    g.add(ls, ln)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signal::Window;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small_cfg(beta: f64) -> LossConfig {
        LossConfig {
            beta,
            stft: StftConfig {
                win_len: 32,
                hop: 16,
                fft_len: 32,
                window: Window::Hann,
            },
            ..LossConfig::default()
        }
    }

    fn noise(len: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    #[test]
    fn alpha_examples() {
        assert_eq!(alpha(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.5);
        assert_eq!(alpha(&[0.3, -0.2], &[0.0, 0.0]).unwrap(), 1.0);
        assert!((alpha(&[1.0, 0.0], &[2.0, 0.0]).unwrap() - 0.2).abs() < 1e-15);
        assert!(matches!(alpha(&[0.0; 3], &[0.0; 3]), Err(Error::DegeneratePair(_))));
        assert!(alpha(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn time_examples() {
        assert_eq!(loss_time(&[0.0, 0.0], &[1.0, 1.0]).unwrap(), 1.0);
        let x = noise(50, 1);
        assert_eq!(loss_time(&x, &x).unwrap(), 0.0);
        let y = noise(50, 2);
        let oracle = x.iter().zip(&y).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / 50.0;
        assert!((loss_time(&x, &y).unwrap() - oracle).abs() < 1e-15);
        assert!(loss_time(&x, &y[..49]).is_err());
    }

    #[test]
    fn single_cell_worked_example() {
        let x = Tensor::new(vec![2, 1, 1], vec![3.0, 4.0]).unwrap();
        let xh = Tensor::new(vec![2, 1, 1], vec![1.0, 1.0]).unwrap();
        assert_eq!(tf_l1_tensors(&x, &xh, TfL1Mode::AsPrinted).unwrap(), 5.0);
        // the two modes differ once the component differences disagree in sign
        let xh = Tensor::new(vec![2, 1, 1], vec![5.0, 1.0]).unwrap();
        assert_eq!(tf_l1_tensors(&x, &xh, TfL1Mode::AsPrinted).unwrap(), 1.0);
        assert_eq!(tf_l1_tensors(&x, &xh, TfL1Mode::PerComponent).unwrap(), 5.0);
    }

    #[test]
    fn tf_term_matches_cellwise_oracle() {
        let cfg = small_cfg(0.4);
        let (x, y) = (noise(200, 3), noise(200, 4));
        let plan = StftPlan::new(cfg.stft).unwrap();
        let (sx, sy) = (plan.analyze(&x).unwrap(), plan.analyze(&y).unwrap());
        let n = sx.len() / 2;
        let mut oracle = 0.0;
        for i in 0..n {
            let (a, b) = (sx.data()[i].abs() - sy.data()[i].abs(), sx.data()[n + i].abs() - sy.data()[n + i].abs());
            oracle += (a + b).abs();
        }
        oracle /= n as f64;
        let raw = LossConfig {
            spectrum: SpectrumScale::Raw,
            ..cfg
        };
        assert!((loss_tf(&x, &y, &raw).unwrap() - oracle).abs() < 1e-12 * oracle);
        let wsum: f64 = plan.window().iter().sum();
        assert!((loss_tf(&x, &y, &cfg).unwrap() - oracle / wsum).abs() < 1e-12 * oracle);
        assert_eq!(loss_tf(&x, &x, &cfg).unwrap(), 0.0);
    }

    #[test]
    fn speech_and_total_compositions() {
        let (x, xh, n, nh) = (noise(160, 5), noise(160, 6), noise(160, 7), noise(160, 8));
        let cfg = small_cfg(0.4);
        let oracle = 0.4 * loss_time(&x, &xh).unwrap() + 0.6 * loss_tf(&x, &xh, &cfg).unwrap();
        assert!((loss_speech(&x, &xh, &cfg).unwrap() - oracle).abs() < 1e-14);
        assert_eq!(loss_speech(&x, &xh, &small_cfg(1.0)).unwrap(), loss_time(&x, &xh).unwrap());

        let a = alpha(&x, &n).unwrap();
        let oracle = a * loss_speech(&x, &xh, &cfg).unwrap() + (1.0 - a) * loss_speech(&n, &nh, &cfg).unwrap();
        assert!((loss_total(&x, &n, &xh, &nh, &cfg).unwrap() - oracle).abs() < 1e-14);
        assert_eq!(loss_total(&x, &n, &x, &n, &cfg).unwrap(), 0.0);
        let zero = vec![0.0; 160];
        assert_eq!(
            loss_total(&x, &zero, &xh, &nh, &cfg).unwrap(),
            loss_speech(&x, &xh, &cfg).unwrap()
        );
    }

    #[test]
    fn graph_loss_matches_plain_loss_and_finite_differences() {
        let cfg = small_cfg(0.4);
        let (x, n) = (noise(96, 9), noise(96, 10));
        let (xh, nh) = (noise(96, 11), noise(96, 12));
        let plan = Arc::new(StftPlan::new(cfg.stft).unwrap());
        let store = crate::params::ParamStore::new();
        let eval = |xh: &[f64]| {
            let mut g = Graph::new(&store);
            let xv = g.input(Tensor::new(vec![96], xh.to_vec()).unwrap());
            let nv = g.input(Tensor::new(vec![96], nh.clone()).unwrap());
            let l = total_loss_var(&mut g, xv, nv, &x, &n, &plan, &cfg).unwrap();
            let grad = g.backward(l).unwrap().get(xv).unwrap().data().to_vec();
            (g.value(l).data()[0], grad)
        };
        let (l, grad) = eval(&xh);
        assert!((l - loss_total(&x, &n, &xh, &nh, &cfg).unwrap()).abs() < 1e-12);
        let h = 1e-6;
        for i in (0..96).step_by(7) {
            let mut p = xh.clone();
            p[i] += h;
            let mut m = xh.clone();
            m[i] -= h;
            let fd = (eval(&p).0 - eval(&m).0) / (2.0 * h);
            let rel = (fd - grad[i]).abs() / fd.abs().max(grad[i].abs()).max(1e-8);
            assert!(rel < 1e-3, "sample {i}: analytic {} numeric {fd}", grad[i]);
        }
    }

    #[test]
    fn names_round_trip() {
        for m in [TfL1Mode::AsPrinted, TfL1Mode::PerComponent] {
            assert_eq!(TfL1Mode::parse(m.name()).unwrap(), m);
        }
        for s in [SpectrumScale::Amplitude, SpectrumScale::Raw] {
            assert_eq!(SpectrumScale::parse(s.name()).unwrap(), s);
        }
        assert!(TfL1Mode::parse("l2").is_err());
        assert!(small_cfg(1.5).validate().is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn alpha_is_scale_invariant(seed in any::<u64>(), c in prop_oneof![-100.0f64..-0.01, 0.01f64..100.0]) {
            let (x, n) = (noise(40, seed), noise(40, seed ^ 1));
            let a = alpha(&x, &n).unwrap();
            let xs: Vec<f64> = x.iter().map(|v| v * c).collect();
            let ns: Vec<f64> = n.iter().map(|v| v * c).collect();
            prop_assert!((alpha(&xs, &ns).unwrap() - a).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&a));
        }

        #[test]
        fn terms_are_non_negative(seed in any::<u64>(), beta in 0.0f64..=1.0) {
            let cfg = small_cfg(beta);
            let v: Vec<Vec<f64>> = (0..4).map(|i| noise(64, seed.wrapping_add(i))).collect();
            prop_assert!(loss_time(&v[0], &v[2]).unwrap() >= 0.0);
            prop_assert!(loss_tf(&v[0], &v[2], &cfg).unwrap() >= 0.0);
            prop_assert!(loss_total(&v[0], &v[1], &v[2], &v[3], &cfg).unwrap() >= 0.0);
        }
    }
}
