//! WAV I/O, SNR-controlled mixing, segment slicing, corpus manifests and a
//! synthetic speech-plus-noise generator.

use std::collections::HashSet;
use std::f64::consts::PI;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::signal::{Waveform, DEFAULT_SAMPLE_RATE};
use crate::training::Example;

const PCM_SCALE: f64 = 32768.0;

// ---------------------------------------------------------------------------
// WAV

fn check_spec(spec: &hound::WavSpec) -> Result<()> {
    if spec.sample_format != hound::SampleFormat::Int {
        return Err(Error::WavFormat {
            field: "codec",
            detail: "only integer PCM is supported".into(),
        });
    }
    if spec.bits_per_sample != 16 {
        return Err(Error::WavFormat {
            field: "bits_per_sample",
            detail: format!("{} (need 16)", spec.bits_per_sample),
        });
    }
    if spec.channels != 1 {
        return Err(Error::WavFormat {
            field: "channels",
            detail: format!("{} (need mono)", spec.channels),
        });
    }
    if spec.sample_rate != DEFAULT_SAMPLE_RATE {
        return Err(Error::WavFormat {
            field: "sample_rate",
            detail: format!("{} Hz (need {DEFAULT_SAMPLE_RATE})", spec.sample_rate),
        });
    }
    Ok(())
}

/// Reads 16-bit mono 16 kHz PCM, scaled by 1/32768.
pub fn load_wav(path: impl AsRef<Path>) -> Result<Waveform> {
    let path = path.as_ref();
    let wav_err = |source| Error::Wav {
        path: path.to_path_buf(),
        source,
    };
    let reader = hound::WavReader::open(path).map_err(wav_err)?;
    check_spec(&reader.spec())?;
    let samples = reader
        .into_samples::<i16>()
        .map(|s| s.map(|v| v as f64 / PCM_SCALE))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(wav_err)?;
    if samples.is_empty() {
        return Err(Error::WavFormat {
            field: "length",
            detail: format!("{} holds no samples", path.display()),
        });
    }
    Waveform::new(samples, DEFAULT_SAMPLE_RATE)
}

pub fn quantize(v: f64) -> i16 {
    (v * PCM_SCALE).round().clamp(i16::MIN as f64, i16::MAX as f64) as i16
}

/// Writes 16-bit mono PCM with round-to-nearest and clamping.
pub fn save_wav(path: impl AsRef<Path>, wave: &Waveform) -> Result<()> {
    let path = path.as_ref();
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: wave.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    check_spec(&spec)?;
    let wav_err = |source| Error::Wav {
        path: path.to_path_buf(),
        source,
    };
    let mut w = hound::WavWriter::create(path, spec).map_err(wav_err)?;
    for &s in &wave.samples {
        w.write_sample(quantize(s)).map_err(wav_err)?;
    }
    w.finalize().map_err(wav_err)
}

// ---------------------------------------------------------------------------
// Mixing

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixSpec {
    pub snr_db: f64,
    pub seed: u64,
}

fn energy(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum()
}

/// Scales `noise` (already cropped to the clean length) to the requested SNR.
pub fn scale_noise(clean: &[f64], noise: &[f64], snr_db: f64) -> Result<Vec<f64>> {
    if !snr_db.is_finite() {
        return Err(Error::Config(format!("snr {snr_db} is not finite")));
    }
    if clean.len() != noise.len() {
        return Err(Error::Shape(format!(
            "clean has {} samples, noise crop {}",
            clean.len(),
            noise.len()
        )));
    }
    let (ec, en) = (energy(clean), energy(noise));
    if ec == 0.0 || en == 0.0 {
        return Err(Error::DegeneratePair(format!(
            "cannot mix at an SNR with a silent {}",
            if ec == 0.0 { "clean signal" } else { "noise" }
        )));
    }
    let gain = (ec / (en * 10f64.powf(snr_db / 10.0))).sqrt();
    Ok(noise.iter().map(|v| v * gain).collect())
}

/// Crops `noise` to the clean length at `offset`, scales it to the SNR and mixes.
pub fn mix_at_offset(clean: &Waveform, noise: &Waveform, snr_db: f64, offset: usize) -> Result<(Waveform, Waveform)> {
    if noise.len() < clean.len() {
        return Err(Error::Shape(format!(
            "noise ({} samples) shorter than clean ({})",
            noise.len(),
            clean.len()
        )));
    }
    if offset + clean.len() > noise.len() {
        return Err(Error::Shape(format!("noise offset {offset} runs past the noise end")));
    }
    let crop = &noise.samples[offset..offset + clean.len()];
    let scaled = scale_noise(&clean.samples, crop, snr_db)?;
    let mixture = clean.samples.iter().zip(&scaled).map(|(c, n)| c + n).collect();
    Ok((
        Waveform::new(mixture, clean.sample_rate)?,
        Waveform::new(scaled, clean.sample_rate)?,
    ))
}

/// Returns `(mixture, scaled_noise)`; the noise crop offset is drawn from `spec.seed`.
pub fn mix_at_snr(clean: &Waveform, noise: &Waveform, spec: MixSpec) -> Result<(Waveform, Waveform)> {
    if noise.len() < clean.len() {
        return mix_at_offset(clean, noise, spec.snr_db, 0);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let offset = rng.gen_range(0..=noise.len() - clean.len());
    mix_at_offset(clean, noise, spec.snr_db, offset)
}

// ---------------------------------------------------------------------------
// Segments

#[derive(Clone, Debug, PartialEq)]
pub struct Segment {
    pub wave: Waveform,
    /// Samples before any zero padding.
    pub valid_len: usize,
}

/// Start offsets for crops of `seg_len` out of `len` samples: one crop per
/// whole segment the signal holds (at least one), each at a seeded position.
pub fn segment_offsets(len: usize, seg_len: usize, rng: &mut impl Rng) -> Vec<usize> {
    if len <= seg_len {
        return vec![0];
    }
    let n = len / seg_len;
    (0..n).map(|_| rng.gen_range(0..=len - seg_len)).collect()
}

/// Seeded random crops of `seconds` each; shorter input gives one zero-padded segment.
pub fn slice_segments(wave: &Waveform, seconds: f64, seed: u64) -> Vec<Segment> {
    let seg_len = (seconds * wave.sample_rate as f64).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    segment_offsets(wave.len(), seg_len, &mut rng)
        .into_iter()
        .map(|off| {
            let end = (off + seg_len).min(wave.len());
            let mut samples = wave.samples[off..end].to_vec();
            let valid_len = samples.len();
            samples.resize(seg_len, 0.0);
            Segment {
                wave: Waveform {
                    samples,
                    sample_rate: wave.sample_rate,
                },
                valid_len,
            }
        })
        .collect()
}

/// Crops or pads an example to `seg_len` at a seeded offset.
pub fn crop_example(ex: &Example, seg_len: usize, rng: &mut impl Rng) -> Example {
    let len = ex.speech.len();
    let off = if len > seg_len { rng.gen_range(0..=len - seg_len) } else { 0 };
    let take = |x: &[f64]| {
        let mut v = x[off..(off + seg_len).min(len)].to_vec();
        v.resize(seg_len, 0.0);
        v
    };
    Example {
        speech: take(&ex.speech),
        noise: take(&ex.noise),
    }
}

// ---------------------------------------------------------------------------
// Manifest

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

/// One utterance. Either `noise_path` with `snr_db` (mixed on load) or a
/// pre-mixed `noisy_path` must be present. Paths are relative to the manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub utterance_id: String,
    pub clean_path: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise_path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub snr_db: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noisy_path: Option<PathBuf>,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    /// Directory that record paths are relative to.
    pub root: PathBuf,
    pub records: Vec<Record>,
}

pub const MANIFEST_FILE: &str = "manifest.jsonl";

impl Manifest {
    pub fn new(root: impl Into<PathBuf>, records: Vec<Record>) -> Result<Self> {
        let m = Self {
            root: root.into(),
            records,
        };
        m.check_ids()?;
        Ok(m)
    }

    fn check_ids(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for r in &self.records {
            if !seen.insert(r.utterance_id.as_str()) {
                return Err(Error::Manifest(format!("duplicate utterance id `{}`", r.utterance_id)));
            }
            if r.noisy_path.is_none() && (r.noise_path.is_none() || r.snr_db.is_none()) {
                return Err(Error::Manifest(format!(
                    "`{}` needs noisy_path or noise_path with snr_db",
                    r.utterance_id
                )));
            }
        }
        Ok(())
    }

    pub fn resolve(&self, rel: &Path) -> PathBuf {
        self.root.join(rel)
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &Record> {
        self.records.iter().filter(move |r| r.split == split)
    }

    /// Reads a JSON-lines manifest and checks that every referenced file exists.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut records = Vec::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let r: Record = serde_json::from_str(&line)
                .map_err(|e| Error::Manifest(format!("{}:{}: {e}", path.display(), i + 1)))?;
            records.push(r);
        }
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let m = Self::new(root, records)?;
        for r in &m.records {
            for p in [Some(&r.clean_path), r.noise_path.as_ref(), r.noisy_path.as_ref()].into_iter().flatten() {
                if !m.resolve(p).is_file() {
                    return Err(Error::Manifest(format!(
                        "`{}` references missing file {}",
                        r.utterance_id,
                        m.resolve(p).display()
                    )));
                }
            }
        }
        Ok(m)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut out = Vec::new();
        for r in &self.records {
            serde_json::to_writer(&mut out, r).map_err(|e| Error::Manifest(e.to_string()))?;
            out.push(b'\n');
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    /// Clean speech and scaled noise for a record. With a separate noise file
    /// the crop offset is seeded by the utterance id and `epoch` (`None` for
    /// the fixed evaluation crop).
    pub fn load_example(&self, r: &Record, epoch: Option<usize>) -> Result<Example> {
        let clean = load_wav(self.resolve(&r.clean_path))?;
        match (&r.noise_path, r.snr_db, &r.noisy_path) {
            (Some(np), Some(snr), _) => {
                let noise = load_wav(self.resolve(np))?;
                let seed = crop_seed(&r.utterance_id, epoch);
                let (_, scaled) = mix_at_snr(&clean, &noise, MixSpec { snr_db: snr, seed })?;
                Ok(Example {
                    speech: clean.samples,
                    noise: scaled.samples,
                })
            }
            (_, _, Some(noisy)) => {
                let noisy = load_wav(self.resolve(noisy))?;
                if noisy.len() != clean.len() {
                    return Err(Error::Manifest(format!(
                        "`{}`: noisy and clean lengths differ",
                        r.utterance_id
                    )));
                }
                let noise = noisy.samples.iter().zip(&clean.samples).map(|(y, x)| y - x).collect();
                Ok(Example {
                    speech: clean.samples,
                    noise,
                })
            }
            _ => Err(Error::Manifest(format!("`{}` has no noise source", r.utterance_id))),
        }
    }
}

/// Stable seed for the noise crop of one utterance in one epoch.
pub fn crop_seed(id: &str, epoch: Option<usize>) -> u64 {
    let h = crc32fast::hash(id.as_bytes()) as u64;
    match epoch {
        None => h,
        Some(e) => h ^ ((e as u64 + 1) << 32),
    }
}

// ---------------------------------------------------------------------------
// Synthetic corpus

pub const TRAIN_SNRS: [f64; 4] = [15.0, 10.0, 5.0, 0.0];
pub const TEST_SNRS: [f64; 4] = [17.5, 12.5, 7.5, 2.5];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKind {
    White,
    Pink,
    Babble,
}

impl NoiseKind {
    pub const ALL: [NoiseKind; 3] = [NoiseKind::White, NoiseKind::Pink, NoiseKind::Babble];
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_train: usize,
    pub n_test: usize,
    pub min_secs: f64,
    pub max_secs: f64,
    /// Extra noise beyond the clean length, so crops can move between epochs.
    pub noise_extra_secs: f64,
}

impl SynthConfig {
    /// `n` utterances with a fifth held out for testing.
    pub fn with_total(n: usize) -> Self {
        let n_test = (n as f64 * 0.2).round() as usize;
        Self {
            n_train: n - n_test,
            n_test,
            ..Self::default()
        }
    }
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_train: 64,
            n_test: 16,
            min_secs: 1.5,
            max_secs: 2.5,
            noise_extra_secs: 0.5,
        }
    }
}

fn raised_cosine(i: usize, n: usize, ramp: usize) -> f64 {
    let ramp = ramp.min(n / 2).max(1);
    let pos = if i < ramp {
        i
    } else if i >= n - ramp {
        n - 1 - i
    } else {
        return 1.0;
    };
    0.5 - 0.5 * (PI * pos as f64 / ramp as f64).cos()
}

/// Harmonic "speech": syllables with gliding pitch, 3–6 harmonics and
/// pauses, peak-normalized to 0.3.
pub fn synth_speech(len: usize, sr: u32, rng: &mut impl Rng) -> Vec<f64> {
    let sr_f = sr as f64;
    let f0_base = rng.gen_range(90.0..250.0);
    let n_harm = rng.gen_range(3..=6);
    let mut out = vec![0.0; len];
    let mut t = (rng.gen_range(0.02..0.1) * sr_f) as usize;
    while t < len {
        let syl = (rng.gen_range(0.15..0.4) * sr_f) as usize;
        let syl = syl.min(len - t);
        let f_start = f0_base * rng.gen_range(0.85..1.15);
        let f_end = f0_base * rng.gen_range(0.85..1.15);
        let amps: Vec<f64> = (1..=n_harm).map(|k| rng.gen_range(0.5..1.0) / k as f64).collect();
        let level = rng.gen_range(0.5..1.0);
        let mut phase = 0.0;
        for i in 0..syl {
            let frac = i as f64 / syl.max(1) as f64;
            let f0 = f_start + (f_end - f_start) * frac;
            phase += 2.0 * PI * f0 / sr_f;
            let env = raised_cosine(i, syl, (0.03 * sr_f) as usize) * level;
            let v: f64 = amps
                .iter()
                .enumerate()
                .filter(|(k, _)| (*k as f64 + 1.0) * f0 < 0.45 * sr_f)
                .map(|(k, a)| a * ((k as f64 + 1.0) * phase).sin())
                .sum();
            out[t + i] = env * v;
        }
        t += syl + (rng.gen_range(0.05..0.3) * sr_f) as usize;
    }
    normalize_peak(&mut out, 0.3);
    out
}

pub fn synth_noise(kind: NoiseKind, len: usize, sr: u32, rng: &mut impl Rng) -> Vec<f64> {
    let mut out = match kind {
        NoiseKind::White => (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        NoiseKind::Pink => pink(len, rng),
        NoiseKind::Babble => {
            let mut acc = vec![0.0; len];
            for _ in 0..rng.gen_range(4..=6) {
                let talker = synth_speech(len, sr, rng);
                let detune = rng.gen_range(0.97..1.03);
                // detuning by resampling the talker track
                for (i, a) in acc.iter_mut().enumerate() {
                    let pos = i as f64 * detune;
                    let j = pos.floor() as usize;
                    if j + 1 < len {
                        let w = pos - j as f64;
                        *a += (1.0 - w) * talker[j] + w * talker[j + 1];
                    }
                }
            }
            acc
        }
    };
    normalize_peak(&mut out, 0.3);
    out
}

/// White noise shaped by `1/√f` in the frequency domain.
fn pink(len: usize, rng: &mut impl Rng) -> Vec<f64> {
    let n = len.max(2);
    let mut buf: Vec<Complex64> = (0..n).map(|_| Complex64::new(rng.gen_range(-1.0..1.0), 0.0)).collect();
    let mut planner = FftPlanner::<f64>::new();
    planner.plan_fft_forward(n).process(&mut buf);
    for (k, c) in buf.iter_mut().enumerate() {
        let f = k.min(n - k).max(1) as f64;
        *c /= f.sqrt();
    }
    buf[0] = Complex64::new(0.0, 0.0);
    planner.plan_fft_inverse(n).process(&mut buf);
    buf.iter().take(len).map(|c| c.re).collect()
}

fn normalize_peak(x: &mut [f64], peak: f64) {
    let m = x.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    if m > 0.0 {
        x.iter_mut().for_each(|v| *v *= peak / m);
    }
}

/// Writes clean, noise and pre-mixed noisy WAVs plus `manifest.jsonl` under
/// `out_dir`. Training SNRs cycle through the training grid, test SNRs
/// through the test grid.
pub fn synth_corpus(cfg: &SynthConfig, seed: u64, out_dir: impl AsRef<Path>) -> Result<Manifest> {
    let out_dir = out_dir.as_ref();
    for sub in ["clean", "noise", "noisy"] {
        let d = out_dir.join(sub);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let sr = DEFAULT_SAMPLE_RATE;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut records = Vec::new();
    let total = cfg.n_train + cfg.n_test;
    for i in 0..total {
        let (split, snr) = if i < cfg.n_train {
            (Split::Train, TRAIN_SNRS[i % 4])
        } else {
            (Split::Test, TEST_SNRS[(i - cfg.n_train) % 4])
        };
        let id = format!("{}_{:04}", split.name(), i);
        let secs = rng.gen_range(cfg.min_secs..=cfg.max_secs);
        let len = (secs * sr as f64) as usize;
        let noise_len = len + (cfg.noise_extra_secs * sr as f64) as usize;
        let kind = NoiseKind::ALL[rng.gen_range(0..3)];
        let clean = Waveform::new(synth_speech(len, sr, &mut rng), sr)?;
        let noise = Waveform::new(synth_noise(kind, noise_len, sr, &mut rng), sr)?;
        let rel = |sub: &str| PathBuf::from(sub).join(format!("{id}.wav"));
        save_wav(out_dir.join(rel("clean")), &clean)?;
        save_wav(out_dir.join(rel("noise")), &noise)?;
        // mix from the quantized files so the stored mixture matches what loading reproduces
        let clean_q = load_wav(out_dir.join(rel("clean")))?;
        let noise_q = load_wav(out_dir.join(rel("noise")))?;
        let (mixture, _) = mix_at_snr(
            &clean_q,
            &noise_q,
            MixSpec {
                snr_db: snr,
                seed: crop_seed(&id, None),
            },
        )?;
        save_wav(out_dir.join(rel("noisy")), &mixture)?;
        records.push(Record {
            utterance_id: id.clone(),
            clean_path: rel("clean"),
            noise_path: Some(rel("noise")),
            snr_db: Some(snr),
            noisy_path: Some(rel("noisy")),
            split,
        });
    }
    let manifest = Manifest::new(out_dir, records)?;
    manifest.save(out_dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}

/// Writes one line of text, creating or appending to `path`.
pub(crate) fn append_line(path: &Path, line: &str) -> Result<()> {
    let mut f = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    writeln!(f, "{line}").map_err(|e| Error::io(path, e))
}
