//! The full enhancement network.
//!
//! ```text
//! mixture ─STFT─▶ [2,T,F] ─encoder─▶ [C,T,F] ─enhancement─▶ [C,T,F] ─decoder─▶ [m,T,F] masks
//!                                                                              │
//!           estimates ◀─ISTFT─ mask ⊙ STFT(mixture) ◀──────────────────────────┘
//! ```
//!
//! The encoder is a pointwise input conv, a deep connection block and the
//! two-dimensions attention module. The enhancement layer halves the
//! channels, runs the dual-path conformers, restores the channels and
//! smooths with a gated conv. The decoder mirrors the encoder and projects to
//! the complex mask channels.

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::attention2d::TwoDimAttention;
use crate::conformer::{ConformerConfig, DualPathConformer};
use crate::error::{Error, Result};
use crate::graph::{complex_mul, Graph, Var};
use crate::nn::{Backbone, Conv2d, ConvNormAct, DeepConnBlock, GatedConv2d, PlainConvStack};
use crate::params::{ParamBuilder, ParamStore};
use crate::signal::{StftConfig, StftPlan, Waveform, Window};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskMode {
    /// Decoder emits speech and noise complex masks (4 channels).
    TwoMasks,
    /// Decoder emits a speech mask only; the noise estimate is the residual.
    ResidualNoise,
}

impl MaskMode {
    pub fn channels(self) -> usize {
        match self {
            MaskMode::TwoMasks => 4,
            MaskMode::ResidualNoise => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            MaskMode::TwoMasks => "two_masks",
            MaskMode::ResidualNoise => "residual_noise",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "two_masks" => Ok(Self::TwoMasks),
            "residual_noise" => Ok(Self::ResidualNoise),
            other => Err(Error::Config(format!("unknown mask_mode `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub stft: StftConfig,
    pub enc_channels: usize,
    pub dpcf_channels: usize,
    pub n_dpcf: usize,
    pub heads: usize,
    pub ffn_expansion: usize,
    pub conv_kernel: usize,
    pub dropout: f64,
    pub dcb_stages: usize,
    pub dcb_kernel: (usize, usize),
    pub channel_attn_kernel: usize,
    pub spatial_attn_kernel: (usize, usize),
    pub mask_mode: MaskMode,
    pub use_dcb: bool,
    pub use_attention: bool,
    pub tie_decoder: bool,
}

impl ModelConfig {
    pub fn paper() -> Self {
        Self {
            stft: StftConfig::paper(),
            enc_channels: 128,
            dpcf_channels: 64,
            n_dpcf: 4,
            heads: 4,
            ffn_expansion: 4,
            conv_kernel: 31,
            dropout: 0.0,
            dcb_stages: 4,
            dcb_kernel: (3, 3),
            channel_attn_kernel: 3,
            spatial_attn_kernel: (7, 7),
            mask_mode: MaskMode::TwoMasks,
            use_dcb: true,
            use_attention: true,
            tie_decoder: false,
        }
    }

    pub fn desk() -> Self {
        Self {
            stft: StftConfig {
                win_len: 256,
                hop: 128,
                fft_len: 256,
                window: Window::Hann,
            },
            enc_channels: 32,
            dpcf_channels: 16,
            n_dpcf: 2,
            heads: 2,
            conv_kernel: 7,
            ..Self::paper()
        }
    }

    pub fn micro() -> Self {
        Self {
            enc_channels: 8,
            dpcf_channels: 4,
            n_dpcf: 1,
            heads: 1,
            ffn_expansion: 2,
            conv_kernel: 3,
            spatial_attn_kernel: (3, 3),
            ..Self::desk()
        }
    }

    pub fn conformer(&self) -> ConformerConfig {
        ConformerConfig {
            d_model: self.dpcf_channels,
            heads: self.heads,
            ffn_expansion: self.ffn_expansion,
            kernel: self.conv_kernel,
            dropout: self.dropout,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.stft.validate()?;
        if self.enc_channels == 0 || self.dpcf_channels == 0 {
            return Err(Error::Config("channel widths must be positive".into()));
        }
        if self.n_dpcf == 0 {
            return Err(Error::Config("n_dpcf must be >= 1".into()));
        }
        if self.dcb_stages == 0 {
            return Err(Error::Config("dcb_stages must be >= 1".into()));
        }
        if self.channel_attn_kernel % 2 == 0
            || self.spatial_attn_kernel.0 % 2 == 0
            || self.spatial_attn_kernel.1 % 2 == 0
            || self.dcb_kernel.0 % 2 == 0
            || self.dcb_kernel.1 % 2 == 0
        {
            return Err(Error::Config("attention and block kernels must be odd".into()));
        }
        self.conformer().validate()
    }
}

/// Complex speech and noise masks, each `[2, T, F]`.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskPair {
    pub speech: Tensor,
    pub noise: Tensor,
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub input: ConvNormAct,
    pub backbone: Backbone,
    pub attention: Option<TwoDimAttention>,
}

#[derive(Clone, Debug)]
pub struct Enhancement {
    pub down: ConvNormAct,
    pub dpcf: Vec<DualPathConformer>,
    pub up: ConvNormAct,
    pub smooth: GatedConv2d,
}

impl Enhancement {
    /// `n_dpcf` may be zero here, which leaves the pointwise conv sandwich.
    pub fn new(
        b: &mut ParamBuilder<'_>,
        name: &str,
        channels: usize,
        inner: &ConformerConfig,
        n_dpcf: usize,
    ) -> Result<Self> {
        let d = inner.d_model;
        b.scoped(name, |b| {
            Ok(Self {
                down: ConvNormAct::new(b, "down", channels, d, (1, 1), (1, 1))?,
                dpcf: (0..n_dpcf)
                    .map(|i| DualPathConformer::new(b, &format!("dpcf{}", i + 1), inner))
                    .collect::<Result<Vec<_>>>()?,
                up: ConvNormAct::new(b, "up", d, channels, (1, 1), (1, 1))?,
                smooth: GatedConv2d::new(b, "gated", channels, channels)?,
            })
        })
    }

    pub fn forward(&self, g: &mut Graph<'_>, u: Var) -> Result<Var> {
        let mut h = self.down.forward(g, u)?;
        for block in &self.dpcf {
            h = block.forward(g, h)?;
        }
        let h = self.up.forward(g, h)?;
        self.smooth.forward(g, h)
    }
}

#[derive(Clone, Debug)]
pub struct Decoder {
    /// `None` when tied to the encoder's backbone.
    pub backbone: Option<Backbone>,
    pub attention: Option<TwoDimAttention>,
    pub out: Conv2d,
}

fn build_backbone(b: &mut ParamBuilder<'_>, cfg: &ModelConfig) -> Result<Backbone> {
    Ok(if cfg.use_dcb {
        Backbone::Deep(DeepConnBlock::new(b, "dcb", cfg.enc_channels, cfg.dcb_stages, cfg.dcb_kernel)?)
    } else {
        Backbone::Plain(PlainConvStack::new(b, "convs", cfg.enc_channels, cfg.dcb_stages, cfg.dcb_kernel)?)
    })
}

fn build_attention(b: &mut ParamBuilder<'_>, cfg: &ModelConfig) -> Result<Option<TwoDimAttention>> {
    cfg.use_attention
        .then(|| TwoDimAttention::new(b, "attention", cfg.channel_attn_kernel, cfg.spatial_attn_kernel))
        .transpose()
}

/// Graph handles produced by [`Model::forward`].
#[derive(Clone, Copy, Debug)]
pub struct ForwardVars {
    pub speech: Var,
    pub noise: Var,
    pub mask: Var,
}

/// Concrete outputs of [`Model::enhance`].
#[derive(Clone, Debug)]
pub struct Enhanced {
    pub speech: Waveform,
    pub noise: Waveform,
    pub masks: MaskPair,
}

#[derive(Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub encoder: Encoder,
    pub enhancement: Enhancement,
    pub decoder: Decoder,
    plan: Arc<StftPlan>,
}

impl std::fmt::Debug for Model {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Model").field("config", &self.config).finish_non_exhaustive()
    }
}

impl Model {
    /// Builds the network, registering freshly initialized parameters in `store`.
    pub fn new(cfg: &ModelConfig, store: &mut ParamStore, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.enc_channels;
        let conf = cfg.conformer();
        let mut b = ParamBuilder::new(store, seed);
        let encoder = b.scoped("encoder", |b| {
            Ok(Encoder {
                input: ConvNormAct::new(b, "input", 2, c, (1, 1), (1, 1))?,
                backbone: build_backbone(b, cfg)?,
                attention: build_attention(b, cfg)?,
            })
        })?;
        let enhancement = Enhancement::new(&mut b, "enhancement", c, &conf, cfg.n_dpcf)?;
        let decoder = b.scoped("decoder", |b| {
            let (backbone, attention) = if cfg.tie_decoder {
                (None, None)
            } else {
                (Some(build_backbone(b, cfg)?), build_attention(b, cfg)?)
            };
            Ok(Decoder {
                backbone,
                attention,
                out: Conv2d::new(b, "out", c, cfg.mask_mode.channels(), (1, 1), (1, 1))?,
            })
        })?;
        init_mask_head(store, &decoder.out);
        Ok(Self {
            config: *cfg,
            encoder,
            enhancement,
            decoder,
            plan: Arc::new(StftPlan::new(cfg.stft)?),
        })
    }

    pub fn stft_plan(&self) -> &Arc<StftPlan> {
        &self.plan
    }

    /// `[2, T, F]` → `[C, T, F]`.
    pub fn encoder_forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let ch = g.value(x).dims3()?.0;
        if ch != 2 {
            return Err(Error::Shape(format!("encoder input needs 2 channels, got {ch}")));
        }
        let h = self.encoder.input.forward(g, x)?;
        let h = self.encoder.backbone.forward(g, h)?;
        match &self.encoder.attention {
            Some(a) => a.forward(g, h),
            None => Ok(h),
        }
    }

    /// `[C, T, F]` → `[C, T, F]`.
    pub fn enhancement_forward(&self, g: &mut Graph<'_>, u: Var) -> Result<Var> {
        self.enhancement.forward(g, u)
    }

    /// `[C, T, F]` → raw mask channels `[m, T, F]`.
    pub fn decoder_forward(&self, g: &mut Graph<'_>, d: Var) -> Result<Var> {
        let backbone = self.decoder.backbone.as_ref().unwrap_or(&self.encoder.backbone);
        let attention = if self.config.tie_decoder {
            self.encoder.attention.as_ref()
        } else {
            self.decoder.attention.as_ref()
        };
        let h = backbone.forward(g, d)?;
        let h = match attention {
            Some(a) => a.forward(g, h)?,
            None => h,
        };
        self.decoder.out.forward(g, h)
    }

    /// Normalized network input for a mixture: its spectrogram divided by the
    /// mixture RMS times the window's L2 norm, so white noise at the mixture
    /// level maps to unit-scale features.
    pub fn input_features(&self, spec: &Tensor, mixture: &[f64]) -> Tensor {
        let rms = (mixture.iter().map(|v| v * v).sum::<f64>() / mixture.len().max(1) as f64).sqrt();
        let wnorm = self.plan.window().iter().map(|w| w * w).sum::<f64>().sqrt();
        let scale = 1.0 / (rms * wnorm).max(1e-8);
        spec.map(|v| v * scale)
    }

    pub fn forward(&self, g: &mut Graph<'_>, mixture: &[f64]) -> Result<ForwardVars> {
        let spec = self.plan.analyze(mixture)?;
        let x = g.constant(self.input_features(&spec, mixture));
        let u = self.encoder_forward(g, x)?;
        let d = self.enhancement_forward(g, u)?;
        let mask = self.decoder_forward(g, d)?;
        let len = mixture.len();
        let speech_mask = g.slice0(mask, 0, 2)?;
        let speech_spec = g.complex_mul_const(speech_mask, &spec)?;
        let speech = g.istft(speech_spec, self.plan.clone(), len)?;
        let noise = match self.config.mask_mode {
            MaskMode::TwoMasks => {
                let noise_mask = g.slice0(mask, 2, 2)?;
                let noise_spec = g.complex_mul_const(noise_mask, &spec)?;
                g.istft(noise_spec, self.plan.clone(), len)?
            }
            MaskMode::ResidualNoise => {
                let mix = g.constant(Tensor::new(vec![len], mixture.to_vec())?);
                g.sub(mix, speech)?
            }
        };
        Ok(ForwardVars {
            speech,
            noise,
            mask,
        })
    }

    /// Inference on one mixture.
    pub fn enhance(&self, store: &ParamStore, mixture: &Waveform) -> Result<Enhanced> {
        let mut g = Graph::new(store);
        let out = self.forward(&mut g, &mixture.samples)?;
        let mask = g.value(out.mask);
        let (m, t, f) = mask.dims3()?;
        let plane = t * f;
        let speech_mask = Tensor::new(vec![2, t, f], mask.data()[..2 * plane].to_vec())?;
        let noise_mask = if m == 4 {
            Tensor::new(vec![2, t, f], mask.data()[2 * plane..].to_vec())?
        } else {
            // residual mode: the implied noise mask is 1 − speech mask
            let mut nm = speech_mask.map(|v| -v);
            nm.data_mut()[..plane].iter_mut().for_each(|v| *v += 1.0);
            nm
        };
        let sr = mixture.sample_rate;
        Ok(Enhanced {
            speech: Waveform::new(g.value(out.speech).data().to_vec(), sr)?,
            noise: Waveform::new(g.value(out.noise).data().to_vec(), sr)?,
            masks: MaskPair {
                speech: speech_mask,
                noise: noise_mask,
            },
        })
    }
}

/// Biases every mask toward the real value 1/2, so at initialization speech
/// and noise estimates split the mixture evenly with its phase intact.
fn init_mask_head(store: &mut ParamStore, out: &Conv2d) {
    for pair in store.value_mut(out.bias).data_mut().chunks_mut(2) {
        pair[0] = 0.5;
    }
}

/// Complex mask application on `[2, T, F]` spectrogram tensors.
pub fn apply_mask(spec: &Tensor, mask: &Tensor) -> Result<Tensor> {
    if spec.shape() != mask.shape() {
        return Err(Error::Shape(format!(
            "mask {:?} does not match spectrogram {:?}",
            mask.shape(),
            spec.shape()
        )));
    }
    complex_mul(mask, spec)
}

/// Trainable-parameter accounting for a configuration.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ParamReport {
    pub total: usize,
    /// Counts keyed by the first two name components, e.g. `encoder.dcb`.
    pub breakdown: BTreeMap<String, usize>,
}

pub fn count_params(cfg: &ModelConfig) -> Result<ParamReport> {
    let mut store = ParamStore::new();
    Model::new(cfg, &mut store, 0)?;
    Ok(param_report(&store))
}

pub fn param_report(store: &ParamStore) -> ParamReport {
    let mut breakdown = BTreeMap::new();
    for (_, p) in store.iter().filter(|(_, p)| p.trainable) {
        let key = p.name.split('.').take(2).collect::<Vec<_>>().join(".");
        *breakdown.entry(key).or_insert(0) += p.value.len();
    }
    ParamReport {
        total: store.num_trainable(),
        breakdown,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::loss::{total_loss_var, LossConfig};
    use crate::nn::{dcb_param_count, evaluate};
    use crate::training::{grad_check, GradCheckConfig};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_t(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    fn noise(len: usize, seed: u64) -> Vec<f64> {
        rand_t(&[len], seed).into_data().into_iter().map(|v| 0.3 * v).collect()
    }

    fn build(cfg: &ModelConfig, seed: u64) -> (ParamStore, Model) {
        let mut store = ParamStore::new();
        let m = Model::new(cfg, &mut store, seed).unwrap();
        (store, m)
    }

    fn block_params(d: usize, e: usize, k: usize) -> usize {
        let ffn = 2 * d + (d * e * d + e * d) + 1 + (e * d * d + d);
        let mhsa = 2 * d + 4 * (d * d + d);
        let conv = 2 * d + (d * 2 * d + 2 * d) + (d * k + d) + 2 * d + 1 + (d * d + d);
        2 * ffn + mhsa + conv + 2 * d
    }

    fn hand_count(cfg: &ModelConfig) -> usize {
        let (c, d) = (cfg.enc_channels, cfg.dpcf_channels);
        let cna = |i: usize, o: usize| o * i + o + 2 * o + 1;
        let backbone = dcb_param_count(c, cfg.dcb_kernel, cfg.dcb_stages);
        let (kt, kf) = cfg.spatial_attn_kernel;
        let attention = (cfg.channel_attn_kernel + 1) + (2 * kt * kf + 1);
        let encoder = cna(2, c) + backbone + attention;
        let enhancement = cna(c, d)
            + cfg.n_dpcf * 2 * block_params(d, cfg.ffn_expansion, cfg.conv_kernel)
            + cna(d, c)
            + 2 * (c * c + c);
        let m = cfg.mask_mode.channels();
        let decoder = backbone + attention + c * m + m;
        encoder + enhancement + decoder
    }

    #[test]
    fn counts_match_hand_enumeration() {
        for cfg in [ModelConfig::micro(), ModelConfig::desk(), ModelConfig::paper()] {
            assert_eq!(count_params(&cfg).unwrap().total, hand_count(&cfg));
        }
        let report = count_params(&ModelConfig::micro()).unwrap();
        assert_eq!(report.breakdown.values().sum::<usize>(), report.total);
        assert_eq!(report.breakdown["encoder.input"], 2 * 8 + 8 + 2 * 8 + 1);
        let paper = count_params(&ModelConfig::paper()).unwrap().total;
        assert!((2_300_000..=3_430_000).contains(&paper), "{paper}");
        assert_eq!(paper, count_params(&ModelConfig::paper()).unwrap().total);
    }

    #[test]
    fn ablation_toggles_change_structure() {
        let base = ModelConfig::micro();
        let plain = ModelConfig { use_dcb: false, ..base };
        let bare = ModelConfig { use_attention: false, ..base };
        let tied = ModelConfig { tie_decoder: true, ..base };
        let (_, m) = build(&plain, 0);
        assert!(matches!(m.encoder.backbone, Backbone::Plain(_)));
        let (_, m) = build(&bare, 0);
        assert!(m.encoder.attention.is_none() && m.decoder.attention.is_none());
        let (_, m) = build(&tied, 0);
        assert!(m.decoder.backbone.is_none());
        let n = |c: &ModelConfig| count_params(c).unwrap().total;
        assert!(n(&plain) < n(&base));
        assert!(n(&bare) < n(&base));
        assert_eq!(n(&base) - n(&tied), dcb_param_count(8, (3, 3), 4) + 4 + 19);
        let mixture = noise(2000, 1);
        for cfg in [plain, bare, tied] {
            let (store, m) = build(&cfg, 1);
            let out = m.enhance(&store, &Waveform::new(mixture.clone(), 16_000).unwrap()).unwrap();
            assert_eq!(out.speech.len(), 2000);
        }
    }

    #[test]
    fn paper_preset_trace() {
        let (store, m) = build(&ModelConfig::paper(), 0);
        if let Backbone::Deep(d) = &m.encoder.backbone {
            assert_eq!(d.up.dilations(), vec![1, 2, 4, 8]);
        } else {
            panic!("paper preset uses the deep block");
        }
        let x = rand_t(&[2, 3, 4], 2);
        let mut g = Graph::new(&store);
        let xv = g.input(x);
        let u = m.encoder_forward(&mut g, xv).unwrap();
        assert_eq!(g.value(u).shape(), &[128, 3, 4]);
        let p = m.enhancement.down.forward(&mut g, u).unwrap();
        assert_eq!(g.value(p).shape(), &[64, 3, 4]);
        let p = m.enhancement.dpcf.iter().try_fold(p, |h, b| b.forward(&mut g, h)).unwrap();
        assert_eq!(g.value(p).shape(), &[64, 3, 4]);
        let up = m.enhancement.up.forward(&mut g, p).unwrap();
        assert_eq!(g.value(up).shape(), &[128, 3, 4]);
        let d = m.enhancement.smooth.forward(&mut g, up).unwrap();
        assert_eq!(g.value(d).shape(), &[128, 3, 4]);
        let mask = m.decoder_forward(&mut g, d).unwrap();
        assert_eq!(g.value(mask).shape(), &[4, 3, 4]);
        let bad = g.input(rand_t(&[3, 3, 4], 3));
        assert!(m.encoder_forward(&mut g, bad).is_err());
    }

    #[test]
    fn without_conformers_the_enhancement_is_a_conv_sandwich() {
        let cfg = ModelConfig::micro();
        let mut store = ParamStore::new();
        let e = Enhancement::new(&mut ParamBuilder::new(&mut store, 4), "e", 8, &cfg.conformer(), 0).unwrap();
        let u = rand_t(&[8, 3, 5], 5);
        let got = evaluate(&store, |g| {
            let v = g.input(u.clone());
            e.forward(g, v)
        })
        .unwrap();
        let want = evaluate(&store, |g| {
            let v = g.input(u.clone());
            let h = e.down.forward(g, v)?;
            let h = e.up.forward(g, h)?;
            let lin = e.smooth.linear.forward(g, h)?;
            let gate = e.smooth.gate.forward(g, h)?;
            let gate = g.sigmoid(gate);
            g.mul(lin, gate)
        })
        .unwrap();
        assert_eq!(got, want);
        assert_eq!(got.shape(), u.shape());
    }

    #[test]
    fn mask_head_channels_and_initial_bias() {
        let (store, m) = build(&ModelConfig::micro(), 0);
        assert_eq!(store.value(m.decoder.out.bias).data(), &[0.5, 0.0, 0.5, 0.0]);
        let residual = ModelConfig { mask_mode: MaskMode::ResidualNoise, ..ModelConfig::micro() };
        let (store, m) = build(&residual, 0);
        assert_eq!(store.value(m.decoder.out.bias).data(), &[0.5, 0.0]);
        let mix = noise(3000, 6);
        let out = m.enhance(&store, &Waveform::new(mix.clone(), 16_000).unwrap()).unwrap();
        for i in 0..mix.len() {
            assert!((out.speech.samples[i] + out.noise.samples[i] - mix[i]).abs() < 1e-12);
        }
        let sum = Tensor::from_fn(out.masks.speech.shape(), |i| out.masks.speech.data()[i] + out.masks.noise.data()[i]);
        let plane = sum.len() / 2;
        assert!(sum.data()[..plane].iter().all(|v| (v - 1.0).abs() < 1e-12));
        assert!(sum.data()[plane..].iter().all(|v| v.abs() < 1e-12));
        for s in ["two_masks", "residual_noise"] {
            assert_eq!(MaskMode::parse(s).unwrap().name(), s);
        }
        assert!(MaskMode::parse("three").is_err());
    }

    #[test]
    fn zeroed_decoder_gives_silent_estimates() {
        let (mut store, m) = build(&ModelConfig::micro(), 7);
        store.value_mut(m.decoder.out.weight).data_mut().fill(0.0);
        store.value_mut(m.decoder.out.bias).data_mut().fill(0.0);
        let out = m.enhance(&store, &Waveform::new(noise(2500, 8), 16_000).unwrap()).unwrap();
        assert!(out.masks.speech.data().iter().chain(out.masks.noise.data()).all(|&v| v == 0.0));
        assert!(out.speech.samples.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_weight_network_is_finite() {
        let (mut store, m) = build(&ModelConfig::micro(), 9);
        store.map_values(|name, t| {
            if name.ends_with("weight") {
                t.data_mut().fill(0.0);
            }
        });
        let out = m.enhance(&store, &Waveform::new(noise(2500, 10), 16_000).unwrap()).unwrap();
        assert!(out.speech.samples.iter().chain(&out.noise.samples).all(|v| v.is_finite()));
    }

    #[test]
    fn apply_mask_is_complex_multiplication() {
        let spec = rand_t(&[2, 3, 4], 11);
        let ones = Tensor::from_fn(&[2, 3, 4], |i| if i < 12 { 1.0 } else { 0.0 });
        assert_eq!(apply_mask(&spec, &ones).unwrap(), spec);
        assert!(apply_mask(&spec, &Tensor::zeros(&[2, 3, 4])).unwrap().data().iter().all(|&v| v == 0.0));
        let j = Tensor::from_fn(&[2, 3, 4], |i| if i < 12 { 0.0 } else { 1.0 });
        let rot = apply_mask(&spec, &j).unwrap();
        for i in 0..12 {
            assert_eq!(rot.data()[i], -spec.data()[12 + i]);
            assert_eq!(rot.data()[12 + i], spec.data()[i]);
        }
        let (a, b) = (rand_t(&[2, 3, 4], 12), rand_t(&[2, 3, 4], 13));
        let twice = apply_mask(&apply_mask(&spec, &a).unwrap(), &b).unwrap();
        let once = apply_mask(&spec, &apply_mask(&a, &b).unwrap()).unwrap();
        assert!(twice.max_abs_diff(&once) < 1e-12);
        assert!(apply_mask(&spec, &rand_t(&[2, 3, 5], 1)).is_err());
    }

    #[test]
    fn identical_seeds_give_identical_models() {
        let mix = Waveform::new(noise(2200, 14), 16_000).unwrap();
        let (s1, m1) = build(&ModelConfig::micro(), 3);
        let (s2, m2) = build(&ModelConfig::micro(), 3);
        let (s3, _) = build(&ModelConfig::micro(), 4);
        assert_eq!(s1, s2);
        assert_ne!(s1, s3);
        let (a, b) = (m1.enhance(&s1, &mix).unwrap(), m2.enhance(&s2, &mix).unwrap());
        assert_eq!(a.speech, b.speech);
        assert_eq!(a.masks, b.masks);
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig::paper().validate().is_ok());
        let bad = [
            ModelConfig { n_dpcf: 0, ..ModelConfig::micro() },
            ModelConfig { dcb_kernel: (2, 3), ..ModelConfig::micro() },
            ModelConfig { heads: 3, ..ModelConfig::micro() },
            ModelConfig { spatial_attn_kernel: (4, 3), ..ModelConfig::micro() },
            ModelConfig { enc_channels: 0, ..ModelConfig::micro() },
        ];
        for c in bad {
            assert!(Model::new(&c, &mut ParamStore::new(), 0).is_err(), "{c:?}");
        }
        let short = build(&ModelConfig::micro(), 0);
        assert!(short.1.enhance(&short.0, &Waveform::new(vec![0.1; 100], 16_000).unwrap()).is_err());
    }

    #[test]
    fn end_to_end_gradients_on_sampled_parameters() {
        let cfg = ModelConfig::micro();
        let (mut store, m) = build(&cfg, 15);
        let speech = noise(1200, 16);
        let noise_part = noise(1200, 17);
        let mix: Vec<f64> = speech.iter().zip(&noise_part).map(|(a, b)| a + b).collect();
        let loss = LossConfig { stft: cfg.stft, ..LossConfig::default() };
        let plan = Arc::new(StftPlan::new(loss.stft).unwrap());
        let gc = GradCheckConfig { sample_fraction: 0.01, ..GradCheckConfig::default() };
        let report = grad_check(
            &mut store,
            &[],
            |g, _| {
                let out = m.forward(g, &mix)?;
                total_loss_var(g, out.speech, out.noise, &speech, &noise_part, &plan, &loss)
            },
            &gc,
        )
        .unwrap();
        assert!(report.passed(), "{}", report.summary());
        assert!(report.groups.len() > 50);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(8))]
        #[test]
        fn estimates_keep_length_and_rate(len in 300usize..3000, seed in 0u64..100) {
            let (store, m) = build(&ModelConfig::micro(), seed);
            let out = m.enhance(&store, &Waveform::new(noise(len, seed), 16_000).unwrap()).unwrap();
            prop_assert_eq!(out.speech.len(), len);
            prop_assert_eq!(out.noise.len(), len);
            prop_assert_eq!(out.speech.sample_rate, 16_000);
        }
    }
}
