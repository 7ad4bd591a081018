//! Run configuration: presets, a flat `key = value` text format and the
//! precedence rules between them.
//!
//! Resolution order, later wins: preset defaults, config file, overrides.
//! The preset itself comes from an override, else the file's `preset` key,
//! else `desk`.
//!
//! ```text
//! # comments and blank lines are ignored
//! preset = micro
//! model.enc_channels = 16
//! model.dcb_kernel = 3x3
//! stft.win_len = 256
//! train.grad_clip = none
//! loss.tf_l1_mode = per_component
//! paths.manifest = data/manifest.jsonl
//! ```
//!
//! `stft.*` keys set the transform used by both the model and the loss.

use std::collections::BTreeSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::checkpoint::RunSettings;
use crate::error::{Error, Result};
use crate::loss::{LossConfig, SpectrumScale, TfL1Mode};
use crate::model::{MaskMode, ModelConfig};
use crate::signal::Window;
use crate::training::TrainConfig;

/// Environment variable naming the config file used when none is given.
pub const CONFIG_ENV: &str = "DUALPATH_SE_CONFIG";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    Paper,
    Desk,
    Micro,
}

impl Preset {
    pub const ALL: [Preset; 3] = [Preset::Paper, Preset::Desk, Preset::Micro];

    pub fn name(self) -> &'static str {
        match self {
            Preset::Paper => "paper",
            Preset::Desk => "desk",
            Preset::Micro => "micro",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown preset `{s}` (paper, desk, micro)")))
    }

    pub fn model(self) -> ModelConfig {
        match self {
            Preset::Paper => ModelConfig::paper(),
            Preset::Desk => ModelConfig::desk(),
            Preset::Micro => ModelConfig::micro(),
        }
    }

    pub fn train(self) -> TrainConfig {
        let base = TrainConfig::default();
        match self {
            Preset::Paper => base,
            Preset::Desk => TrainConfig {
                epochs: 20,
                lr0: 1e-3,
                batch_size: 1,
                segment_secs: 0.5,
                ..base
            },
            Preset::Micro => TrainConfig {
                epochs: 2,
                segment_secs: 0.5,
                ..base
            },
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Paths {
    pub manifest: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub preset: Preset,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub loss: LossConfig,
    pub paths: Paths,
}

/// Every key the text format accepts, in echo order.
pub const KEYS: &[&str] = &[
    "preset",
    "stft.win_len",
    "stft.hop",
    "stft.fft_len",
    "stft.window",
    "model.enc_channels",
    "model.dpcf_channels",
    "model.n_dpcf",
    "model.heads",
    "model.ffn_expansion",
    "model.conv_kernel",
    "model.dropout",
    "model.dcb_stages",
    "model.dcb_kernel",
    "model.channel_attn_kernel",
    "model.spatial_attn_kernel",
    "model.mask_mode",
    "model.use_dcb",
    "model.use_attention",
    "model.tie_decoder",
    "train.epochs",
    "train.lr0",
    "train.decay_factor",
    "train.decay_every",
    "train.weight_decay",
    "train.batch_size",
    "train.seed",
    "train.grad_clip",
    "train.segment_secs",
    "loss.beta",
    "loss.tf_l1_mode",
    "loss.spectrum",
    "paths.manifest",
    "paths.checkpoint",
    "paths.out_dir",
];

fn num<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{v}`")))
}

fn flag(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(Error::Config(format!("`{key}`: expected true or false, got `{v}`"))),
    }
}

fn pair(key: &str, v: &str) -> Result<(usize, usize)> {
    let (a, b) = v
        .split_once('x')
        .ok_or_else(|| Error::Config(format!("`{key}`: expected HxW, got `{v}`")))?;
    Ok((num(key, a.trim())?, num(key, b.trim())?))
}

fn path(v: &str) -> Option<PathBuf> {
    (!v.is_empty()).then(|| PathBuf::from(v))
}

/// Parsed `key = value` lines, in file order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ConfigText {
    pub entries: Vec<(String, String)>,
}

impl ConfigText {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        let mut seen = BTreeSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", i + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            if !KEYS.contains(&k) {
                return Err(Error::Config(format!("line {}: unknown key `{k}`", i + 1)));
            }
            if !seen.insert(k.to_string()) {
                return Err(Error::Config(format!("line {}: duplicate key `{k}`", i + 1)));
            }
            entries.push((k.to_string(), v.to_string()));
        }
        Ok(Self { entries })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            e => e,
        })
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }
}

impl RunConfig {
    pub fn preset(preset: Preset) -> Self {
        let model = preset.model();
        Self {
            preset,
            model,
            train: preset.train(),
            loss: LossConfig {
                stft: model.stft,
                ..LossConfig::default()
            },
            paths: Paths::default(),
        }
    }

    /// Preset defaults, then `file`, then `overrides` (each `key=value`).
    pub fn resolve(preset: Option<Preset>, file: Option<&ConfigText>, overrides: &[(String, String)]) -> Result<Self> {
        let over_preset = overrides.iter().rev().find(|(k, _)| k == "preset").map(|(_, v)| v.as_str());
        let chosen = match (preset, over_preset, file.and_then(|f| f.get("preset"))) {
            (Some(p), _, _) => p,
            (None, Some(v), _) | (None, None, Some(v)) => Preset::parse(v)?,
            (None, None, None) => Preset::Desk,
        };
        let mut cfg = Self::preset(chosen);
        let file_entries = file.map(|f| f.entries.as_slice()).unwrap_or(&[]);
        for (k, v) in file_entries.iter().chain(overrides) {
            if k != "preset" {
                cfg.set(k, v)?;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let m = &mut self.model;
        let t = &mut self.train;
        match key {
            "preset" => self.preset = Preset::parse(v)?,
            "stft.win_len" => m.stft.win_len = num(key, v)?,
            "stft.hop" => m.stft.hop = num(key, v)?,
            "stft.fft_len" => m.stft.fft_len = num(key, v)?,
            "stft.window" => m.stft.window = Window::parse(v)?,
            "model.enc_channels" => m.enc_channels = num(key, v)?,
            "model.dpcf_channels" => m.dpcf_channels = num(key, v)?,
            "model.n_dpcf" => m.n_dpcf = num(key, v)?,
            "model.heads" => m.heads = num(key, v)?,
            "model.ffn_expansion" => m.ffn_expansion = num(key, v)?,
            "model.conv_kernel" => m.conv_kernel = num(key, v)?,
            "model.dropout" => m.dropout = num(key, v)?,
            "model.dcb_stages" => m.dcb_stages = num(key, v)?,
            "model.dcb_kernel" => m.dcb_kernel = pair(key, v)?,
            "model.channel_attn_kernel" => m.channel_attn_kernel = num(key, v)?,
            "model.spatial_attn_kernel" => m.spatial_attn_kernel = pair(key, v)?,
            "model.mask_mode" => m.mask_mode = MaskMode::parse(v)?,
            "model.use_dcb" => m.use_dcb = flag(key, v)?,
            "model.use_attention" => m.use_attention = flag(key, v)?,
            "model.tie_decoder" => m.tie_decoder = flag(key, v)?,
            "train.epochs" => t.epochs = num(key, v)?,
            "train.lr0" => t.lr0 = num(key, v)?,
            "train.decay_factor" => t.decay_factor = num(key, v)?,
            "train.decay_every" => t.decay_every = num(key, v)?,
            "train.weight_decay" => t.weight_decay = num(key, v)?,
            "train.batch_size" => t.batch_size = num(key, v)?,
            "train.seed" => t.seed = num(key, v)?,
            "train.grad_clip" => t.grad_clip = if v == "none" { None } else { Some(num(key, v)?) },
            "train.segment_secs" => t.segment_secs = num(key, v)?,
            "loss.beta" => self.loss.beta = num(key, v)?,
            "loss.tf_l1_mode" => self.loss.tf_l1_mode = TfL1Mode::parse(v)?,
            "loss.spectrum" => self.loss.spectrum = SpectrumScale::parse(v)?,
            "paths.manifest" => self.paths.manifest = path(v),
            "paths.checkpoint" => self.paths.checkpoint = path(v),
            "paths.out_dir" => self.paths.out_dir = path(v),
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        self.loss.stft = self.model.stft;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if !(self.loss.beta >= 0.0 && self.loss.beta <= 1.0) {
            return Err(Error::Config(format!("loss.beta {} outside [0, 1]", self.loss.beta)));
        }
        Ok(())
    }

    /// Value of every key as it would be written to a config file.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let m = &self.model;
        let t = &self.train;
        let p = |x: &Option<PathBuf>| x.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        KEYS.iter()
            .map(|&k| {
                let v = match k {
                    "preset" => self.preset.name().to_string(),
                    "stft.win_len" => m.stft.win_len.to_string(),
                    "stft.hop" => m.stft.hop.to_string(),
                    "stft.fft_len" => m.stft.fft_len.to_string(),
                    "stft.window" => m.stft.window.name().to_string(),
                    "model.enc_channels" => m.enc_channels.to_string(),
                    "model.dpcf_channels" => m.dpcf_channels.to_string(),
                    "model.n_dpcf" => m.n_dpcf.to_string(),
                    "model.heads" => m.heads.to_string(),
                    "model.ffn_expansion" => m.ffn_expansion.to_string(),
                    "model.conv_kernel" => m.conv_kernel.to_string(),
                    "model.dropout" => m.dropout.to_string(),
                    "model.dcb_stages" => m.dcb_stages.to_string(),
                    "model.dcb_kernel" => format!("{}x{}", m.dcb_kernel.0, m.dcb_kernel.1),
                    "model.channel_attn_kernel" => m.channel_attn_kernel.to_string(),
                    "model.spatial_attn_kernel" => format!("{}x{}", m.spatial_attn_kernel.0, m.spatial_attn_kernel.1),
                    "model.mask_mode" => m.mask_mode.name().to_string(),
                    "model.use_dcb" => m.use_dcb.to_string(),
                    "model.use_attention" => m.use_attention.to_string(),
                    "model.tie_decoder" => m.tie_decoder.to_string(),
                    "train.epochs" => t.epochs.to_string(),
                    "train.lr0" => t.lr0.to_string(),
                    "train.decay_factor" => t.decay_factor.to_string(),
                    "train.decay_every" => t.decay_every.to_string(),
                    "train.weight_decay" => t.weight_decay.to_string(),
                    "train.batch_size" => t.batch_size.to_string(),
                    "train.seed" => t.seed.to_string(),
                    "train.grad_clip" => t.grad_clip.map_or("none".to_string(), |c| c.to_string()),
                    "train.segment_secs" => t.segment_secs.to_string(),
                    "loss.beta" => self.loss.beta.to_string(),
                    "loss.tf_l1_mode" => self.loss.tf_l1_mode.name().to_string(),
                    "loss.spectrum" => self.loss.spectrum.name().to_string(),
                    "paths.manifest" => p(&self.paths.manifest),
                    "paths.checkpoint" => p(&self.paths.checkpoint),
                    "paths.out_dir" => p(&self.paths.out_dir),
                    _ => unreachable!("every key in KEYS is handled"),
                };
                (k, v)
            })
            .collect()
    }

    pub fn settings(&self) -> RunSettings {
        RunSettings {
            model: self.model,
            train: self.train,
            loss: self.loss,
        }
    }

    /// Rebuilds a config from a checkpoint's echo. Paths are left empty.
    pub fn from_settings(preset: Preset, s: &RunSettings) -> Self {
        Self {
            preset,
            model: s.model,
            train: s.train,
            loss: s.loss,
            paths: Paths::default(),
        }
    }
}

impl fmt::Display for RunConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (k, v) in self.entries() {
            writeln!(f, "{k} = {v}")?;
        }
        Ok(())
    }
}

/// Parses `key=value` override arguments.
pub fn parse_overrides<S: AsRef<str>>(args: &[S]) -> Result<Vec<(String, String)>> {
    args.iter()
        .map(|a| {
            let a = a.as_ref();
            let (k, v) = a
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{a}` is not key=value")))?;
            let k = k.trim();
            if !KEYS.contains(&k) {
                return Err(Error::Config(format!("unknown key `{k}`")));
            }
            Ok((k.to_string(), v.trim().to_string()))
        })
        .collect()
}

/// The explicit path if given, else the path in [`CONFIG_ENV`] if set.
pub fn default_config_path(explicit: Option<&Path>) -> Option<PathBuf> {
    explicit
        .map(Path::to_path_buf)
        .or_else(|| std::env::var_os(CONFIG_ENV).filter(|v| !v.is_empty()).map(PathBuf::from))
}
