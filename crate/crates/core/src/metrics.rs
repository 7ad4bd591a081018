//! Objective scores: SNR, SI-SDR and STOI, plus the evaluation report.

use std::fmt;
use std::path::Path;

use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// A decibel or correlation score. Infinite values are sentinels: `+∞` means
/// a perfect estimate, `−∞` an estimate with no usable component.
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd)]
pub struct Score(pub f64);

impl Score {
    pub fn is_perfect(self) -> bool {
        self.0 == f64::INFINITY
    }

    pub fn finite(self) -> Option<f64> {
        self.0.is_finite().then_some(self.0)
    }
}

impl fmt::Display for Score {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.0 == f64::INFINITY {
            f.write_str("perfect")
        } else if self.0 == f64::NEG_INFINITY {
            f.write_str("-inf")
        } else {
            write!(f, "{:.4}", self.0)
        }
    }
}

impl Serialize for Score {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        if self.0.is_finite() {
            s.serialize_f64(self.0)
        } else {
            s.serialize_str(if self.0 > 0.0 { "perfect" } else { "-inf" })
        }
    }
}

impl<'de> Deserialize<'de> for Score {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Tag(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(Score(v)),
            Raw::Tag(t) if t == "perfect" => Ok(Score(f64::INFINITY)),
            Raw::Tag(t) if t == "-inf" => Ok(Score(f64::NEG_INFINITY)),
            Raw::Tag(t) => Err(serde::de::Error::custom(format!("unknown score `{t}`"))),
        }
    }
}

fn check_pair(reference: &[f64], estimate: &[f64], what: &str) -> Result<()> {
    if reference.len() != estimate.len() {
        return Err(Error::Shape(format!(
            "{what}: reference has {} samples, estimate {}",
            reference.len(),
            estimate.len()
        )));
    }
    if reference.iter().all(|v| *v == 0.0) {
        return Err(Error::DegeneratePair(format!("{what}: reference is silent")));
    }
    Ok(())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Energy ratio beyond which the smaller side is rounding noise (±240 dB,
/// past what `f64` signals can resolve).
const EXACT_RATIO: f64 = 1e-24;

fn ratio_db(num: f64, den: f64) -> Score {
    if num <= den * EXACT_RATIO {
        Score(f64::NEG_INFINITY)
    } else if den <= num * EXACT_RATIO {
        Score(f64::INFINITY)
    } else {
        Score(10.0 * (num / den).log10())
    }
}

/// `10·log10(‖ref‖² / ‖ref − est‖²)`.
pub fn snr(reference: &[f64], estimate: &[f64]) -> Result<Score> {
    check_pair(reference, estimate, "snr")?;
    let err: f64 = reference.iter().zip(estimate).map(|(r, e)| (r - e) * (r - e)).sum();
    Ok(ratio_db(dot(reference, reference), err))
}

/// Scale-invariant SDR: the estimate is projected onto the reference first.
pub fn si_sdr(reference: &[f64], estimate: &[f64]) -> Result<Score> {
    check_pair(reference, estimate, "si-sdr")?;
    let a = dot(estimate, reference) / dot(reference, reference);
    let target: Vec<f64> = reference.iter().map(|r| a * r).collect();
    let resid: f64 = estimate.iter().zip(&target).map(|(e, s)| (e - s) * (e - s)).sum();
    Ok(ratio_db(dot(&target, &target), resid))
}

// ---------------------------------------------------------------------------
// Resampling

fn bessel_i0(x: f64) -> f64 {
    let mut sum = 1.0;
    let mut term = 1.0;
    let q = x * x / 4.0;
    for k in 1..200 {
        term *= q / (k * k) as f64;
        sum += term;
        if term < sum * 1e-17 {
            break;
        }
    }
    sum
}

fn gcd(a: u32, b: u32) -> u32 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Rational-ratio windowed-sinc resampler with one precomputed filter per
/// output phase. Each phase spans `taps` input samples and has unit DC gain.
#[derive(Clone, Debug)]
pub struct Resampler {
    up: usize,
    down: usize,
    half: isize,
    phases: Vec<Vec<f64>>,
}

pub const RESAMPLE_TAPS: usize = 64;
pub const KAISER_BETA: f64 = 8.0;

impl Resampler {
    pub fn new(from: u32, to: u32) -> Result<Self> {
        if from == 0 || to == 0 {
            return Err(Error::Config("sample rates must be positive".into()));
        }
        let g = gcd(from, to);
        let (up, down) = ((to / g) as usize, (from / g) as usize);
        // cutoff relative to the input rate
        let fc = (to as f64 / from as f64).min(1.0);
        let half = (RESAMPLE_TAPS / 2) as isize;
        let norm = bessel_i0(KAISER_BETA);
        let phases = (0..up)
            .map(|p| {
                let frac = p as f64 / up as f64;
                let mut h: Vec<f64> = (-half + 1..=half)
                    .map(|k| {
                        let tau = k as f64 - frac;
                        let r = tau / half as f64;
                        let w = if r.abs() <= 1.0 {
                            bessel_i0(KAISER_BETA * (1.0 - r * r).sqrt()) / norm
                        } else {
                            0.0
                        };
                        let x = std::f64::consts::PI * fc * tau;
                        let sinc = if x == 0.0 { 1.0 } else { x.sin() / x };
                        fc * sinc * w
                    })
                    .collect();
                let s: f64 = h.iter().sum();
                h.iter_mut().for_each(|v| *v /= s);
                h
            })
            .collect();
        Ok(Self {
            up,
            down,
            half,
            phases,
        })
    }

    /// Output length is `ceil(len · up / down)`.
    pub fn process(&self, x: &[f64]) -> Vec<f64> {
        let out_len = (x.len() * self.up).div_ceil(self.down);
        (0..out_len)
            .map(|m| {
                // output m sits at input position m·down/up = base + phase/up
                let pos = m * self.down;
                let base = (pos / self.up) as isize;
                let h = &self.phases[pos % self.up];
                // tap j multiplies x[base + k] where k = j - half + 1 and tau = k - frac
                h.iter()
                    .enumerate()
                    .filter_map(|(j, w)| {
                        let i = base + j as isize - self.half + 1;
                        (i >= 0 && (i as usize) < x.len()).then(|| w * x[i as usize])
                    })
                    .sum()
            })
            .collect()
    }
}

// ---------------------------------------------------------------------------
// STOI

pub const STOI_RATE: u32 = 10_000;
const STOI_FRAME: usize = 256;
const STOI_FFT: usize = 512;
const STOI_BANDS: usize = 15;
const STOI_MIN_FREQ: f64 = 150.0;
/// Frames per short-time segment (384 ms).
pub const STOI_SEGMENT: usize = 30;
const STOI_BETA_DB: f64 = -15.0;
const STOI_DYN_RANGE: f64 = 40.0;

/// Hann window without its zero end points.
fn stoi_window() -> Vec<f64> {
    let n = STOI_FRAME + 2;
    (1..=STOI_FRAME)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / (n - 1) as f64).cos())
        .collect()
}

fn frame_starts(len: usize) -> impl Iterator<Item = usize> {
    (0..len.saturating_sub(STOI_FRAME)).step_by(STOI_FRAME / 2)
}

/// Drops frames more than 40 dB below the loudest reference frame and
/// overlap-adds what remains back into signals.
pub fn remove_silent_frames(x: &[f64], y: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let w = stoi_window();
    let hop = STOI_FRAME / 2;
    let starts: Vec<usize> = frame_starts(x.len()).collect();
    let frame = |s: &[f64], at: usize| -> Vec<f64> { w.iter().zip(&s[at..at + STOI_FRAME]).map(|(a, b)| a * b).collect() };
    let energies: Vec<f64> = starts
        .iter()
        .map(|&at| 20.0 * (frame(x, at).iter().map(|v| v * v).sum::<f64>().sqrt() + f64::EPSILON).log10())
        .collect();
    let top = energies.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let kept: Vec<usize> = starts
        .iter()
        .zip(&energies)
        .filter(|(_, e)| top - STOI_DYN_RANGE - **e < 0.0)
        .map(|(s, _)| *s)
        .collect();
    let out_len = if kept.is_empty() { 0 } else { (kept.len() - 1) * hop + STOI_FRAME };
    let mut xs = vec![0.0; out_len];
    let mut ys = vec![0.0; out_len];
    for (i, &at) in kept.iter().enumerate() {
        for (j, (a, b)) in frame(x, at).into_iter().zip(frame(y, at)).enumerate() {
            xs[i * hop + j] += a;
            ys[i * hop + j] += b;
        }
    }
    (xs, ys)
}

/// One-third-octave band matrix `[bands][bins]` over a 512-point FFT at 10 kHz.
fn third_octave_bands() -> Vec<Vec<f64>> {
    let bins = STOI_FFT / 2 + 1;
    let freqs: Vec<f64> = (0..bins).map(|k| k as f64 * STOI_RATE as f64 / STOI_FFT as f64).collect();
    let nearest = |f: f64| {
        freqs
            .iter()
            .enumerate()
            .min_by(|a, b| (a.1 - f).powi(2).total_cmp(&(b.1 - f).powi(2)))
            .map(|(i, _)| i)
            .unwrap_or(0)
    };
    (0..STOI_BANDS)
        .map(|k| {
            let k = k as f64;
            let lo = nearest(STOI_MIN_FREQ * 2f64.powf((2.0 * k - 1.0) / 6.0));
            let hi = nearest(STOI_MIN_FREQ * 2f64.powf((2.0 * k + 1.0) / 6.0));
            (0..bins).map(|b| if b >= lo && b < hi { 1.0 } else { 0.0 }).collect()
        })
        .collect()
}

/// Band envelopes `[bands][frames]` of a 10 kHz signal.
fn band_envelopes(x: &[f64], bands: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let w = stoi_window();
    let fft = FftPlanner::<f64>::new().plan_fft_forward(STOI_FFT);
    let bins = STOI_FFT / 2 + 1;
    let mut out = vec![Vec::new(); bands.len()];
    for at in frame_starts(x.len()) {
        let mut buf = vec![Complex64::new(0.0, 0.0); STOI_FFT];
        for (j, (a, b)) in w.iter().zip(&x[at..at + STOI_FRAME]).enumerate() {
            buf[j].re = a * b;
        }
        fft.process(&mut buf);
        let power: Vec<f64> = buf[..bins].iter().map(|c| c.norm_sqr()).collect();
        for (band, row) in bands.iter().zip(out.iter_mut()) {
            row.push(dot(band, &power).sqrt());
        }
    }
    out
}

/// Short-time objective intelligibility of `estimate` against `reference`.
pub fn stoi(reference: &[f64], estimate: &[f64], sample_rate: u32) -> Result<f64> {
    check_pair(reference, estimate, "stoi")?;
    let (x, y) = if sample_rate == STOI_RATE {
        (reference.to_vec(), estimate.to_vec())
    } else {
        let r = Resampler::new(sample_rate, STOI_RATE)?;
        (r.process(reference), r.process(estimate))
    };
    let (x, y) = remove_silent_frames(&x, &y);
    let bands = third_octave_bands();
    let xe = band_envelopes(&x, &bands);
    let ye = band_envelopes(&y, &bands);
    let frames = xe[0].len();
    if frames < STOI_SEGMENT {
        return Err(Error::SignalTooShort {
            len: frames,
            needed: STOI_SEGMENT,
        });
    }
    let clip = 10f64.powf(-STOI_BETA_DB / 20.0);
    let eps = f64::EPSILON;
    let mut total = 0.0;
    let mut count = 0usize;
    for m in STOI_SEGMENT..=frames {
        for (xb, yb) in xe.iter().zip(&ye) {
            let xs = &xb[m - STOI_SEGMENT..m];
            let ys = &yb[m - STOI_SEGMENT..m];
            let k = dot(xs, xs).sqrt() / (dot(ys, ys).sqrt() + eps);
            let yp: Vec<f64> = ys.iter().zip(xs).map(|(yv, xv)| (yv * k).min(xv * (1.0 + clip))).collect();
            let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
            let (mx, my) = (mean(xs), mean(&yp));
            let xc: Vec<f64> = xs.iter().map(|v| v - mx).collect();
            let yc: Vec<f64> = yp.iter().map(|v| v - my).collect();
            let nx = dot(&xc, &xc).sqrt() + eps;
            let ny = dot(&yc, &yc).sqrt() + eps;
            total += dot(&xc, &yc) / (nx * ny);
            count += 1;
        }
    }
    Ok(total / count as f64)
}

// ---------------------------------------------------------------------------
// Report

/// Scores of one utterance before (`_in`, the noisy mixture) and after (`_out`) enhancement.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UtteranceScores {
    pub id: String,
    pub snr_in: Score,
    pub snr_out: Score,
    pub si_sdr_in: Score,
    pub si_sdr_out: Score,
    pub stoi_in: f64,
    pub stoi_out: f64,
}

impl UtteranceScores {
    pub fn compute(id: &str, clean: &[f64], noisy: &[f64], enhanced: &[f64], sample_rate: u32) -> Result<Self> {
        Ok(Self {
            id: id.to_string(),
            snr_in: snr(clean, noisy)?,
            snr_out: snr(clean, enhanced)?,
            si_sdr_in: si_sdr(clean, noisy)?,
            si_sdr_out: si_sdr(clean, enhanced)?,
            stoi_in: stoi(clean, noisy, sample_rate)?,
            stoi_out: stoi(clean, enhanced, sample_rate)?,
        })
    }
}

/// Corpus means over finite per-utterance values; `None` when none are finite.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub count: usize,
    pub snr_in: Option<f64>,
    pub snr_out: Option<f64>,
    pub si_sdr_in: Option<f64>,
    pub si_sdr_out: Option<f64>,
    pub stoi_in: Option<f64>,
    pub stoi_out: Option<f64>,
    /// Metrics this tool does not compute.
    pub unavailable: Vec<String>,
}

pub const UNAVAILABLE_METRICS: [&str; 4] = ["pesq", "csig", "cbak", "covl"];

fn finite_mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.filter(|v| v.is_finite()).fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub rows: Vec<UtteranceScores>,
}

impl MetricReport {
    pub fn summary(&self) -> Summary {
        let m = |f: fn(&UtteranceScores) -> f64| finite_mean(self.rows.iter().map(f));
        Summary {
            count: self.rows.len(),
            snr_in: m(|r| r.snr_in.0),
            snr_out: m(|r| r.snr_out.0),
            si_sdr_in: m(|r| r.si_sdr_in.0),
            si_sdr_out: m(|r| r.si_sdr_out.0),
            stoi_in: m(|r| r.stoi_in),
            stoi_out: m(|r| r.stoi_out),
            unavailable: UNAVAILABLE_METRICS.iter().map(|s| s.to_string()).collect(),
        }
    }

    /// Mean SI-SDR gain over utterances where both scores are finite.
    pub fn si_sdr_improvement(&self) -> Option<f64> {
        finite_mean(self.rows.iter().map(|r| r.si_sdr_out.0 - r.si_sdr_in.0))
    }

    pub fn stoi_improvement(&self) -> Option<f64> {
        finite_mean(self.rows.iter().map(|r| r.stoi_out - r.stoi_in))
    }

    /// One JSON object per utterance followed by a summary line.
    pub fn to_jsonl(&self) -> Result<String> {
        #[derive(Serialize)]
        struct Tagged<'a, T: Serialize> {
            kind: &'a str,
            #[serde(flatten)]
            body: &'a T,
        }
        let mut out = String::new();
        let enc = |e: serde_json::Error| Error::Manifest(e.to_string());
        for r in &self.rows {
            out.push_str(&serde_json::to_string(&Tagged { kind: "utterance", body: r }).map_err(enc)?);
            out.push('\n');
        }
        let s = self.summary();
        out.push_str(&serde_json::to_string(&Tagged { kind: "summary", body: &s }).map_err(enc)?);
        out.push('\n');
        Ok(out)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_jsonl()?).map_err(|e| Error::io(path, e))
    }

    /// Parses a report written by [`MetricReport::write`], returning the rows
    /// and the stored summary.
    pub fn read(path: impl AsRef<Path>) -> Result<(Self, Summary)> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut rows = Vec::new();
        let mut summary = None;
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let v: serde_json::Value = serde_json::from_str(line).map_err(|e| Error::Manifest(e.to_string()))?;
            let parse_err = |e: serde_json::Error| Error::Manifest(format!("{}: {e}", path.display()));
            match v.get("kind").and_then(|k| k.as_str()) {
                Some("utterance") => rows.push(serde_json::from_value(v).map_err(parse_err)?),
                Some("summary") => summary = Some(serde_json::from_value(v).map_err(parse_err)?),
                _ => return Err(Error::Manifest(format!("{}: unknown report line", path.display()))),
            }
        }
        let summary = summary.ok_or_else(|| Error::Manifest(format!("{}: no summary line", path.display())))?;
        Ok((Self { rows }, summary))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_noise, synth_speech, NoiseKind};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn noise(len: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    fn speech(secs: f64, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        synth_speech((secs * 16_000.0) as usize, 16_000, &mut rng)
    }

    /// `e` made orthogonal to `r` and rescaled to `‖r‖`.
    fn orthogonal_to(r: &[f64], e: &[f64]) -> Vec<f64> {
        let k = dot(e, r) / dot(r, r);
        let o: Vec<f64> = e.iter().zip(r).map(|(a, b)| a - k * b).collect();
        let s = (dot(r, r) / dot(&o, &o)).sqrt();
        o.iter().map(|v| v * s).collect()
    }

    #[test]
    fn snr_examples() {
        let r = noise(500, 1);
        assert!(snr(&r, &r).unwrap().is_perfect());
        let e = noise(500, 2);
        let s = (dot(&r, &r) / dot(&e, &e)).sqrt();
        let est: Vec<f64> = r.iter().zip(&e).map(|(a, b)| a + s * b).collect();
        assert!(snr(&r, &est).unwrap().0.abs() < 1e-10);
        let oracle = 10.0 * (dot(&r, &r) / r.iter().zip(&e).map(|(a, b)| (a - b).powi(2)).sum::<f64>()).log10();
        assert!((snr(&r, &e).unwrap().0 - oracle).abs() < 1e-10);
        assert!(snr(&[0.0; 4], &[1.0; 4]).is_err());
        assert!(snr(&r, &e[..10]).is_err());
    }

    #[test]
    fn si_sdr_examples() {
        let r = noise(500, 3);
        for c in [2.0, 0.3, -1.7] {
            let est: Vec<f64> = r.iter().map(|v| c * v).collect();
            assert!(si_sdr(&r, &est).unwrap().is_perfect(), "c = {c}");
        }
        let o = orthogonal_to(&r, &noise(500, 4));
        let est: Vec<f64> = r.iter().zip(&o).map(|(a, b)| a + b).collect();
        assert!(si_sdr(&r, &est).unwrap().0.abs() < 1e-9);
        assert_eq!(si_sdr(&r, &o).unwrap(), Score(f64::NEG_INFINITY));
        assert_eq!(si_sdr(&r, &[0.0; 500]).unwrap(), Score(f64::NEG_INFINITY));
    }

    #[test]
    fn snr_is_not_scale_invariant_but_si_sdr_is() {
        let r = noise(400, 5);
        let e: Vec<f64> = r.iter().zip(noise(400, 6)).map(|(a, b)| a + 0.3 * b).collect();
        let e2: Vec<f64> = e.iter().map(|v| 0.5 * v).collect();
        assert!((snr(&r, &e).unwrap().0 - snr(&r, &e2).unwrap().0).abs() > 1.0);
        assert!((si_sdr(&r, &e).unwrap().0 - si_sdr(&r, &e2).unwrap().0).abs() < 1e-10);
    }

    #[test]
    fn score_serialization_uses_sentinels() {
        assert_eq!(serde_json::to_string(&Score(f64::INFINITY)).unwrap(), "\"perfect\"");
        assert_eq!(serde_json::to_string(&Score(f64::NEG_INFINITY)).unwrap(), "\"-inf\"");
        assert_eq!(serde_json::to_string(&Score(1.5)).unwrap(), "1.5");
        for s in [Score(f64::INFINITY), Score(f64::NEG_INFINITY), Score(-3.25)] {
            let back: Score = serde_json::from_str(&serde_json::to_string(&s).unwrap()).unwrap();
            assert_eq!(back, s);
        }
        assert!(serde_json::from_str::<Score>("\"great\"").is_err());
        assert_eq!(Score(f64::INFINITY).to_string(), "perfect");
    }

    #[test]
    fn resampler_keeps_dc_and_tones() {
        let r = Resampler::new(16_000, 10_000).unwrap();
        let y = r.process(&[0.7; 1600]);
        assert_eq!(y.len(), 1000);
        assert!(y[50..950].iter().all(|v| (v - 0.7).abs() < 1e-9));
        let x: Vec<f64> = (0..16_000).map(|n| (2.0 * std::f64::consts::PI * 1000.0 * n as f64 / 16_000.0).sin()).collect();
        let y = r.process(&x);
        for (m, v) in y.iter().enumerate().take(9_900).skip(100) {
            let want = (2.0 * std::f64::consts::PI * 1000.0 * m as f64 / 10_000.0).sin();
            assert!((v - want).abs() < 1e-3, "m={m}");
        }
        // a tone above the new Nyquist is suppressed
        let hi: Vec<f64> = (0..16_000).map(|n| (2.0 * std::f64::consts::PI * 7000.0 * n as f64 / 16_000.0).sin()).collect();
        let y = r.process(&hi);
        let rms = (y[100..9_900].iter().map(|v| v * v).sum::<f64>() / 9_800.0).sqrt();
        assert!(rms < 0.01, "{rms}");
    }

    #[test]
    fn stoi_identity_and_sign() {
        let x = speech(2.0, 7);
        let same = stoi(&x, &x, 16_000).unwrap();
        assert!(same >= 0.999, "{same}");
        let neg: Vec<f64> = x.iter().map(|v| -v).collect();
        assert!((stoi(&x, &neg, 16_000).unwrap() - same).abs() < 1e-12);
    }

    #[test]
    fn stoi_of_white_noise_against_speech_is_pinned() {
        let x = speech(2.0, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let n = synth_noise(NoiseKind::White, x.len(), 16_000, &mut rng);
        let v = stoi(&x, &n, 16_000).unwrap();
        assert!(v < 0.6, "{v}");
        assert!((v - PINNED_WHITE_STOI).abs() < 1e-9, "{v}");
    }

    const PINNED_WHITE_STOI: f64 = 0.18757924258772243;

    #[test]
    fn stoi_needs_enough_frames() {
        let x = speech(0.2, 10);
        assert!(matches!(stoi(&x, &x, 16_000), Err(Error::SignalTooShort { .. })));
    }

    #[test]
    fn report_summary_matches_rows_and_round_trips() {
        let rows: Vec<UtteranceScores> = (0..3)
            .map(|i| UtteranceScores {
                id: format!("u{i}"),
                snr_in: Score(i as f64),
                snr_out: Score(2.0 * i as f64 + 1.0),
                si_sdr_in: Score(-1.0 + i as f64),
                si_sdr_out: if i == 1 { Score(f64::INFINITY) } else { Score(5.0 + i as f64) },
                stoi_in: 0.5 + 0.1 * i as f64,
                stoi_out: 0.9,
            })
            .collect();
        let report = MetricReport { rows };
        let s = report.summary();
        assert_eq!(s.count, 3);
        assert_eq!(s.snr_in, Some(1.0));
        assert_eq!(s.si_sdr_out, Some(6.0));
        assert!((s.stoi_in.unwrap() - 0.6).abs() < 1e-15);
        assert_eq!(report.si_sdr_improvement(), Some(((6.0) + (6.0)) / 2.0));
        assert_eq!(s.unavailable, vec!["pesq", "csig", "cbak", "covl"]);

        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.jsonl");
        report.write(&p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert_eq!(text.lines().count(), 4);
        assert!(text.contains("\"perfect\""));
        let (back, summary) = MetricReport::read(&p).unwrap();
        assert_eq!(back, report);
        assert_eq!(summary, s);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn si_sdr_ignores_positive_gain(seed in any::<u64>(), c in 1e-3f64..1e3) {
            let r = noise(300, seed);
            let e: Vec<f64> = r.iter().zip(noise(300, seed ^ 7)).map(|(a, b)| a + b).collect();
            let scaled: Vec<f64> = e.iter().map(|v| c * v).collect();
            let (a, b) = (si_sdr(&r, &e).unwrap().0, si_sdr(&r, &scaled).unwrap().0);
            prop_assert!((a - b).abs() < 1e-9);
        }
    }
}
