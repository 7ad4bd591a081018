//! STFT analysis and overlap-add ISTFT synthesis.
//!
//! Frames start at sample 0 with no centre padding. Synthesis divides the
//! overlap-added, re-windowed frames by the per-sample sum of squared
//! analysis windows, which inverts the analysis exactly wherever that sum is
//! bounded away from zero.

use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_SAMPLE_RATE: u32 = 16_000;

/// Relative floor applied to the synthesis normalizer at the signal edges.
const NORM_FLOOR: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::Config("sample rate must be positive".into()));
        }
        if let Some(i) = samples.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("waveform sample {i}")));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn energy(&self) -> f64 {
        self.samples.iter().map(|v| v * v).sum()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Window {
    /// Periodic Hann, `0.5 − 0.5·cos(2πn/N)`.
    Hann,
    Rectangular,
}

impl Window {
    pub fn coefficients(self, len: usize) -> Vec<f64> {
        match self {
            Window::Hann => (0..len)
                .map(|n| {
                    0.5 - 0.5 * (2.0 * std::f64::consts::PI * n as f64 / len as f64).cos()
                })
                .collect(),
            Window::Rectangular => vec![1.0; len],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Window::Hann => "hann",
            Window::Rectangular => "rectangular",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "hann" => Ok(Window::Hann),
            "rectangular" => Ok(Window::Rectangular),
            other => Err(Error::Config(format!("unknown window `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StftConfig {
    pub win_len: usize,
    pub hop: usize,
    pub fft_len: usize,
    pub window: Window,
}

impl StftConfig {
    /// 25 ms window, 6.25 ms hop and a 512-point FFT at 16 kHz.
    pub fn paper() -> Self {
        Self {
            win_len: 400,
            hop: 100,
            fft_len: 512,
            window: Window::Hann,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hop == 0 || self.hop > self.win_len || self.win_len > self.fft_len {
            return Err(Error::Config(format!(
                "stft needs 0 < hop <= win_len <= fft_len, got hop={} win_len={} fft_len={}",
                self.hop, self.win_len, self.fft_len
            )));
        }
        if self.win_len % self.hop != 0 {
            return Err(Error::Config(format!(
                "win_len {} must be divisible by hop {}",
                self.win_len, self.hop
            )));
        }
        if self.fft_len % 2 != 0 {
            return Err(Error::Config(format!("fft_len {} must be even", self.fft_len)));
        }
        Ok(())
    }

    pub fn n_bins(&self) -> usize {
        self.fft_len / 2 + 1
    }

    /// Number of full frames in a signal of `len` samples (0 if shorter than a window).
    pub fn n_frames(&self, len: usize) -> usize {
        if len < self.win_len {
            0
        } else {
            (len - self.win_len) / self.hop + 1
        }
    }

    /// Samples spanned by `frames` frames.
    pub fn covered_len(&self, frames: usize) -> usize {
        if frames == 0 {
            0
        } else {
            (frames - 1) * self.hop + self.win_len
        }
    }
}

/// One-sided complex spectrogram, row-major `[T][F]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Spectrogram {
    pub frames: usize,
    pub bins: usize,
    pub values: Vec<Complex64>,
    pub sample_rate: u32,
}

impl Spectrogram {
    pub fn zeros(frames: usize, bins: usize, sample_rate: u32) -> Self {
        Self {
            frames,
            bins,
            values: vec![Complex64::new(0.0, 0.0); frames * bins],
            sample_rate,
        }
    }

    pub fn at(&self, t: usize, f: usize) -> Complex64 {
        self.values[t * self.bins + f]
    }

    pub fn frame(&self, t: usize) -> &[Complex64] {
        &self.values[t * self.bins..(t + 1) * self.bins]
    }
}

/// Reusable FFT plans and window for one [`StftConfig`].
pub struct StftPlan {
    cfg: StftConfig,
    window: Vec<f64>,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl StftPlan {
    pub fn new(cfg: StftConfig) -> Result<Self> {
        cfg.validate()?;
        let mut planner = FftPlanner::new();
        Ok(Self {
            cfg,
            window: cfg.window.coefficients(cfg.win_len),
            forward: planner.plan_fft_forward(cfg.fft_len),
            inverse: planner.plan_fft_inverse(cfg.fft_len),
        })
    }

    pub fn config(&self) -> &StftConfig {
        &self.cfg
    }

    pub fn window(&self) -> &[f64] {
        &self.window
    }

    /// Analysis of raw samples into a `[2, T, F]` real/imaginary tensor.
    pub fn analyze(&self, samples: &[f64]) -> Result<Tensor> {
        let c = &self.cfg;
        if samples.len() < c.win_len {
            return Err(Error::SignalTooShort {
                len: samples.len(),
                needed: c.win_len,
            });
        }
        if let Some(i) = samples.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("stft input sample {i}")));
        }
        let (t_n, f_n) = (c.n_frames(samples.len()), c.n_bins());
        let mut out = vec![0.0; 2 * t_n * f_n];
        let (re, im) = out.split_at_mut(t_n * f_n);
        let mut buf = vec![Complex64::new(0.0, 0.0); c.fft_len];
        for t in 0..t_n {
            let seg = &samples[t * c.hop..t * c.hop + c.win_len];
            for (n, b) in buf.iter_mut().enumerate() {
                *b = if n < c.win_len {
                    Complex64::new(seg[n] * self.window[n], 0.0)
                } else {
                    Complex64::new(0.0, 0.0)
                };
            }
            self.forward.process(&mut buf);
            for f in 0..f_n {
                re[t * f_n + f] = buf[f].re;
                im[t * f_n + f] = buf[f].im;
            }
        }
        Tensor::new(vec![2, t_n, f_n], out)
    }

    /// Adjoint of [`StftPlan::analyze`]: maps a `[2, T, F]` gradient back to
    /// `len` time samples.
    pub fn analyze_adjoint(&self, grad: &Tensor, len: usize) -> Result<Vec<f64>> {
        let c = &self.cfg;
        let (_, t_n, f_n) = self.check_spec_tensor(grad)?;
        if c.covered_len(t_n) > len {
            return Err(Error::Shape(format!(
                "{t_n} frames do not fit in {len} samples"
            )));
        }
        let (re, im) = grad.data().split_at(t_n * f_n);
        let mut dx = vec![0.0; len];
        let mut buf = vec![Complex64::new(0.0, 0.0); c.fft_len];
        for t in 0..t_n {
            buf.iter_mut().for_each(|b| *b = Complex64::new(0.0, 0.0));
            for f in 0..f_n {
                buf[f] = Complex64::new(re[t * f_n + f], im[t * f_n + f]);
            }
            self.inverse.process(&mut buf);
            let dst = &mut dx[t * c.hop..t * c.hop + c.win_len];
            for n in 0..c.win_len {
                dst[n] += self.window[n] * buf[n].re;
            }
        }
        Ok(dx)
    }

    /// Per-sample reciprocal of the synthesis normalizer for `frames` frames
    /// rendered into `out_len` samples. Samples outside the frame coverage get 0.
    pub fn synthesis_gain(&self, frames: usize, out_len: usize) -> Result<Vec<f64>> {
        let c = &self.cfg;
        let covered = c.covered_len(frames);
        if out_len.abs_diff(covered) > c.win_len {
            return Err(Error::Shape(format!(
                "output length {out_len} inconsistent with {frames} frames ({covered} covered samples)"
            )));
        }
        let mut denom = vec![0.0; covered];
        for t in 0..frames {
            for (d, w) in denom[t * c.hop..t * c.hop + c.win_len]
                .iter_mut()
                .zip(&self.window)
            {
                *d += w * w;
            }
        }
        let peak = denom.iter().cloned().fold(0.0, f64::max);
        if peak <= 0.0 && covered > 0 {
            return Err(Error::WindowCoverage(0));
        }
        let floor = NORM_FLOOR * peak;
        let edge = c.win_len - c.hop;
        let mut gain = vec![0.0; out_len];
        for (n, g) in gain.iter_mut().enumerate().take(covered.min(out_len)) {
            let d = denom[n];
            if d < floor && n >= edge && n + edge < covered {
                return Err(Error::WindowCoverage(n));
            }
            *g = 1.0 / d.max(floor);
        }
        Ok(gain)
    }

    /// Overlap-add synthesis of a `[2, T, F]` tensor into `out_len` samples.
    pub fn synthesize(&self, spec: &Tensor, out_len: usize) -> Result<Vec<f64>> {
        let c = &self.cfg;
        let (_, t_n, f_n) = self.check_spec_tensor(spec)?;
        let gain = self.synthesis_gain(t_n, out_len)?;
        let (re, im) = spec.data().split_at(t_n * f_n);
        let covered = c.covered_len(t_n);
        let mut y = vec![0.0; covered.max(out_len)];
        let mut buf = vec![Complex64::new(0.0, 0.0); c.fft_len];
        let half = c.fft_len / 2;
        let inv_n = 1.0 / c.fft_len as f64;
        for t in 0..t_n {
            let row = t * f_n;
            buf[0] = Complex64::new(re[row], 0.0);
            buf[half] = Complex64::new(re[row + half], 0.0);
            for k in 1..half {
                let v = Complex64::new(re[row + k], im[row + k]);
                buf[k] = v;
                buf[c.fft_len - k] = v.conj();
            }
            self.inverse.process(&mut buf);
            let dst = &mut y[t * c.hop..t * c.hop + c.win_len];
            for n in 0..c.win_len {
                dst[n] += self.window[n] * buf[n].re * inv_n;
            }
        }
        y.truncate(out_len);
        for (v, g) in y.iter_mut().zip(&gain) {
            *v *= g;
        }
        Ok(y)
    }

    /// Adjoint of [`StftPlan::synthesize`].
    pub fn synthesize_adjoint(&self, grad: &[f64], frames: usize) -> Result<Tensor> {
        let c = &self.cfg;
        let f_n = c.n_bins();
        let gain = self.synthesis_gain(frames, grad.len())?;
        let covered = c.covered_len(frames);
        let mut u = vec![0.0; covered];
        for (n, v) in u.iter_mut().enumerate().take(grad.len()) {
            *v = grad[n] * gain[n];
        }
        let mut out = vec![0.0; 2 * frames * f_n];
        let (re, im) = out.split_at_mut(frames * f_n);
        let mut buf = vec![Complex64::new(0.0, 0.0); c.fft_len];
        let half = c.fft_len / 2;
        let inv_n = 1.0 / c.fft_len as f64;
        for t in 0..frames {
            for (n, b) in buf.iter_mut().enumerate() {
                *b = if n < c.win_len {
                    Complex64::new(self.window[n] * u[t * c.hop + n], 0.0)
                } else {
                    Complex64::new(0.0, 0.0)
                };
            }
            self.forward.process(&mut buf);
            for k in 0..f_n {
                let scale = if k == 0 || k == half { inv_n } else { 2.0 * inv_n };
                re[t * f_n + k] = buf[k].re * scale;
                im[t * f_n + k] = if k == 0 || k == half {
                    0.0
                } else {
                    buf[k].im * scale
                };
            }
        }
        Tensor::new(vec![2, frames, f_n], out)
    }

    fn check_spec_tensor(&self, spec: &Tensor) -> Result<(usize, usize, usize)> {
        let (ch, t_n, f_n) = spec.dims3()?;
        if ch != 2 || f_n != self.cfg.n_bins() {
            return Err(Error::Shape(format!(
                "spectrogram tensor must be [2, T, {}], got {:?}",
                self.cfg.n_bins(),
                spec.shape()
            )));
        }
        Ok((ch, t_n, f_n))
    }
}

pub fn stft(wave: &Waveform, cfg: &StftConfig) -> Result<Spectrogram> {
    let plan = StftPlan::new(*cfg)?;
    let fm = plan.analyze(&wave.samples)?;
    featuremap_to_spec(&fm, wave.sample_rate)
}

pub fn istft(spec: &Spectrogram, cfg: &StftConfig, out_len: usize) -> Result<Waveform> {
    let plan = StftPlan::new(*cfg)?;
    if spec.bins != cfg.n_bins() {
        return Err(Error::Shape(format!(
            "spectrogram has {} bins, config expects {}",
            spec.bins,
            cfg.n_bins()
        )));
    }
    let samples = plan.synthesize(&spec_to_featuremap(spec), out_len)?;
    Waveform::new(samples, spec.sample_rate)
}

/// Packs a spectrogram as a `[2, T, F]` map: channel 0 real, channel 1 imaginary.
pub fn spec_to_featuremap(spec: &Spectrogram) -> Tensor {
    let n = spec.frames * spec.bins;
    let mut data = vec![0.0; 2 * n];
    for (i, v) in spec.values.iter().enumerate() {
        data[i] = v.re;
        data[n + i] = v.im;
    }
    Tensor::new(vec![2, spec.frames, spec.bins], data).expect("consistent dims")
}

pub fn featuremap_to_spec(fm: &Tensor, sample_rate: u32) -> Result<Spectrogram> {
    let (c, t, f) = fm.dims3()?;
    if c != 2 {
        return Err(Error::Shape(format!(
            "spectrogram feature map needs 2 channels, got {c}"
        )));
    }
    let (re, im) = fm.data().split_at(t * f);
    Ok(Spectrogram {
        frames: t,
        bins: f,
        values: re
            .iter()
            .zip(im)
            .map(|(&a, &b)| Complex64::new(a, b))
            .collect(),
        sample_rate,
    })
}
