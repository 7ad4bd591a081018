//! Conformer block and the dual-path conformer.
//!
//! Sequence batches are `[N, L, D]`. The dual-path conformer views a
//! `[C, T, F]` feature map as `F` sequences over time (intra, sub-band) and
//! then as `T` sequences over frequency (inter, full-band), with one set of
//! weights shared across the sequences of each path.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::kernels;
use crate::nn::{evaluate, LayerNorm, Linear, Smu};
use crate::params::{ParamBuilder, ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConformerConfig {
    pub d_model: usize,
    pub heads: usize,
    pub ffn_expansion: usize,
    pub kernel: usize,
    pub dropout: f64,
}

impl ConformerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.heads == 0 || self.d_model % self.heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} must be a positive multiple of heads {}",
                self.d_model, self.heads
            )));
        }
        if self.kernel % 2 == 0 {
            return Err(Error::Config(format!(
                "depthwise kernel must be odd, got {}",
                self.kernel
            )));
        }
        if self.ffn_expansion == 0 {
            return Err(Error::Config("ffn_expansion must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

const SEQ_AXIS: usize = 2;

/// Pre-norm feed-forward module with a half-step residual.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub norm: LayerNorm,
    pub up: Linear,
    pub act: Smu,
    pub down: Linear,
    pub dropout: f64,
}

impl FeedForward {
    pub fn new(b: &mut ParamBuilder<'_>, name: &str, cfg: &ConformerConfig) -> Result<Self> {
        let d = cfg.d_model;
        let h = d * cfg.ffn_expansion;
        b.scoped(name, |b| {
            Ok(Self {
                norm: LayerNorm::new(b, "norm", d, SEQ_AXIS)?,
                up: Linear::new(b, "up", d, h)?,
                act: Smu::new(b, "act")?,
                down: Linear::new(b, "down", h, d)?,
                dropout: cfg.dropout,
            })
        })
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let h = self.norm.forward(g, x)?;
        let h = self.up.forward(g, h)?;
        let h = self.act.forward(g, h)?;
        let h = self.down.forward(g, h)?;
        let h = g.dropout(h, self.dropout);
        let h = g.scale(h, 0.5);
        g.add(x, h)
    }
}

/// Pre-norm multi-head self-attention with a residual connection.
#[derive(Clone, Debug)]
pub struct SelfAttention {
    pub norm: LayerNorm,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
    pub heads: usize,
    pub dropout: f64,
}

impl SelfAttention {
    pub fn new(b: &mut ParamBuilder<'_>, name: &str, cfg: &ConformerConfig) -> Result<Self> {
        let d = cfg.d_model;
        b.scoped(name, |b| {
            Ok(Self {
                norm: LayerNorm::new(b, "norm", d, SEQ_AXIS)?,
                query: Linear::new(b, "query", d, d)?,
                key: Linear::new(b, "key", d, d)?,
                value: Linear::new(b, "value", d, d)?,
                out: Linear::new(b, "out", d, d)?,
                heads: cfg.heads,
                dropout: cfg.dropout,
            })
        })
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        check_d(g, x, self.norm.dim)?;
        let h = self.norm.forward(g, x)?;
        let q = self.query.forward(g, h)?;
        let k = self.key.forward(g, h)?;
        let v = self.value.forward(g, h)?;
        let a = g.attention(q, k, v, self.heads)?;
        let o = self.out.forward(g, a)?;
        let o = g.dropout(o, self.dropout);
        g.add(x, o)
    }

    /// Attention weights `[N, H, L, L]` for a concrete batch.
    pub fn weights(&self, store: &ParamStore, x: &Tensor) -> Result<Vec<f64>> {
        let mut g = Graph::new(store);
        let xv = g.constant(x.clone());
        check_d(&g, xv, self.norm.dim)?;
        let h = self.norm.forward(&mut g, xv)?;
        let q = self.query.forward(&mut g, h)?;
        let k = self.key.forward(&mut g, h)?;
        let v = self.value.forward(&mut g, h)?;
        let (_, probs) = kernels::attention(g.value(q), g.value(k), g.value(v), self.heads)?;
        Ok(probs)
    }
}

/// Pointwise conv → GLU → depthwise conv → norm → SMU → pointwise conv, with residual.
#[derive(Clone, Debug)]
pub struct ConvModule {
    pub norm: LayerNorm,
    pub expand: Linear,
    pub depthwise_weight: ParamId,
    pub depthwise_bias: ParamId,
    pub mid_norm: LayerNorm,
    pub act: Smu,
    pub project: Linear,
    pub dropout: f64,
}

impl ConvModule {
    pub fn new(b: &mut ParamBuilder<'_>, name: &str, cfg: &ConformerConfig) -> Result<Self> {
        let d = cfg.d_model;
        if cfg.kernel % 2 == 0 {
            return Err(Error::Config(format!(
                "depthwise kernel must be odd, got {}",
                cfg.kernel
            )));
        }
        b.scoped(name, |b| {
            Ok(Self {
                norm: LayerNorm::new(b, "norm", d, SEQ_AXIS)?,
                expand: Linear::new(b, "expand", d, 2 * d)?,
                depthwise_weight: b.fan_in_uniform("depthwise.weight", &[d, cfg.kernel], cfg.kernel)?,
                depthwise_bias: b.constant("depthwise.bias", &[d], 0.0)?,
                mid_norm: LayerNorm::new(b, "mid_norm", d, SEQ_AXIS)?,
                act: Smu::new(b, "act")?,
                project: Linear::new(b, "project", d, d)?,
                dropout: cfg.dropout,
            })
        })
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let h = self.norm.forward(g, x)?;
        let h = self.expand.forward(g, h)?;
        let h = g.glu(h)?;
        let (w, b) = (g.param(self.depthwise_weight), g.param(self.depthwise_bias));
        let h = g.depthwise_conv1d(h, w, b)?;
        let h = self.mid_norm.forward(g, h)?;
        let h = self.act.forward(g, h)?;
        let h = self.project.forward(g, h)?;
        let h = g.dropout(h, self.dropout);
        g.add(x, h)
    }
}

/// Macaron conformer: ½FFN → MHSA → conv → ½FFN → layer norm.
#[derive(Clone, Debug)]
pub struct ConformerBlock {
    pub ffn_in: FeedForward,
    pub attention: SelfAttention,
    pub conv: ConvModule,
    pub ffn_out: FeedForward,
    pub norm: LayerNorm,
}

impl ConformerBlock {
    pub fn new(b: &mut ParamBuilder<'_>, name: &str, cfg: &ConformerConfig) -> Result<Self> {
        cfg.validate()?;
        b.scoped(name, |b| {
            Ok(Self {
                ffn_in: FeedForward::new(b, "ffn_in", cfg)?,
                attention: SelfAttention::new(b, "mhsa", cfg)?,
                conv: ConvModule::new(b, "conv", cfg)?,
                ffn_out: FeedForward::new(b, "ffn_out", cfg)?,
                norm: LayerNorm::new(b, "norm", cfg.d_model, SEQ_AXIS)?,
            })
        })
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let h = self.ffn_in.forward(g, x)?;
        let h = self.attention.forward(g, h)?;
        let h = self.conv.forward(g, h)?;
        let h = self.ffn_out.forward(g, h)?;
        self.norm.forward(g, h)
    }

    pub fn apply(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        evaluate(store, |g| {
            let v = g.constant(x.clone());
            self.forward(g, v)
        })
    }
}

/// `[C, T, F]` → `[F, T, C]`: one time sequence per frequency bin.
const TO_INTRA: [usize; 3] = [2, 1, 0];
/// `[F, T, C]` → `[T, F, C]`: one frequency sequence per frame.
const INTRA_TO_INTER: [usize; 3] = [1, 0, 2];
/// `[T, F, C]` → `[C, T, F]`.
const INTER_TO_MAP: [usize; 3] = [2, 0, 1];

#[derive(Clone, Debug)]
pub struct DualPathConformer {
    pub intra: ConformerBlock,
    pub inter: ConformerBlock,
}

impl DualPathConformer {
    pub fn new(b: &mut ParamBuilder<'_>, name: &str, cfg: &ConformerConfig) -> Result<Self> {
        b.scoped(name, |b| {
            Ok(Self {
                intra: ConformerBlock::new(b, "intra", cfg)?,
                inter: ConformerBlock::new(b, "inter", cfg)?,
            })
        })
    }

    /// Sub-band stage alone, `[C, T, F]` in and out.
    pub fn intra_forward(&self, g: &mut Graph<'_>, p: Var) -> Result<Var> {
        let s = g.permute3(p, TO_INTRA)?;
        let s = self.intra.forward(g, s)?;
        g.permute3(s, TO_INTRA)
    }

    /// Full-band stage alone, `[C, T, F]` in and out.
    pub fn inter_forward(&self, g: &mut Graph<'_>, p: Var) -> Result<Var> {
        let s = g.permute3(p, [1, 2, 0])?;
        let s = self.inter.forward(g, s)?;
        g.permute3(s, INTER_TO_MAP)
    }

    pub fn forward(&self, g: &mut Graph<'_>, p: Var) -> Result<Var> {
        let c = g.value(p).dims3()?.0;
        if c != self.intra.norm.dim {
            return Err(Error::Shape(format!(
                "dual-path conformer expects {} channels, got {c}",
                self.intra.norm.dim
            )));
        }
        let s = g.permute3(p, TO_INTRA)?;
        let s = self.intra.forward(g, s)?;
        let s = g.permute3(s, INTRA_TO_INTER)?;
        let s = self.inter.forward(g, s)?;
        g.permute3(s, INTER_TO_MAP)
    }

    pub fn apply(&self, store: &ParamStore, p: &Tensor) -> Result<Tensor> {
        evaluate(store, |g| {
            let v = g.constant(p.clone());
            self.forward(g, v)
        })
    }
}

fn check_d(g: &Graph<'_>, x: Var, d: usize) -> Result<()> {
    let shape = g.value(x).shape();
    if shape.len() != 3 || shape[2] != d {
        return Err(Error::Shape(format!(
            "expected [N, L, {d}] sequences, got {shape:?}"
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{smu, SMU_ALPHA};
    use crate::training::{grad_check, GradCheckConfig};
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_t(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    fn cfg(d: usize, heads: usize, kernel: usize) -> ConformerConfig {
        ConformerConfig {
            d_model: d,
            heads,
            ffn_expansion: 2,
            kernel,
            dropout: 0.0,
        }
    }

    fn build<T>(seed: u64, f: impl FnOnce(&mut ParamBuilder<'_>) -> Result<T>) -> (ParamStore, T) {
        let mut store = ParamStore::new();
        let m = f(&mut ParamBuilder::new(&mut store, seed)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
        store.map_values(|name, t| {
            if !name.ends_with("weight") {
                t.data_mut().iter_mut().for_each(|v| *v += rng.gen_range(-0.3..0.3));
            }
        });
        (store, m)
    }

    fn zero_linear(store: &mut ParamStore) {
        store.map_values(|name, t| {
            if name.ends_with("weight") || name.ends_with("bias") {
                t.data_mut().fill(0.0);
            }
        });
    }

    fn run(store: &ParamStore, x: &Tensor, f: impl FnOnce(&mut Graph<'_>, Var) -> Result<Var>) -> Tensor {
        evaluate(store, |g| {
            let v = g.input(x.clone());
            f(g, v)
        })
        .unwrap()
    }

    /// Row-wise affine map `x Wᵀ + b` over the last axis.
    fn lin(store: &ParamStore, l: &Linear, x: &[f64]) -> Vec<f64> {
        let (w, b) = (store.value(l.weight).data(), store.value(l.bias).data());
        x.chunks(l.in_dim)
            .flat_map(|row| (0..l.out_dim).map(move |o| b[o] + (0..l.in_dim).map(|i| w[o * l.in_dim + i] * row[i]).sum::<f64>()))
            .collect()
    }

    fn ln(store: &ParamStore, n: &LayerNorm, x: &[f64]) -> Vec<f64> {
        let (g, b) = (store.value(n.gain).data(), store.value(n.bias).data());
        x.chunks(n.dim)
            .flat_map(|row| {
                let m = row.iter().sum::<f64>() / row.len() as f64;
                let v = row.iter().map(|x| (x - m).powi(2)).sum::<f64>() / row.len() as f64;
                let r = 1.0 / (v + crate::kernels::LAYER_NORM_EPS).sqrt();
                row.iter().enumerate().map(move |(i, x)| (x - m) * r * g[i] + b[i])
            })
            .collect()
    }

    fn act(store: &ParamStore, s: &Smu, x: &[f64]) -> Vec<f64> {
        let mu = store.value(s.mu).data()[0];
        x.iter().map(|&v| smu(v, SMU_ALPHA, mu)).collect()
    }

    fn close(a: &[f64], b: &[f64], tol: f64) {
        assert_eq!(a.len(), b.len());
        for (i, (x, y)) in a.iter().zip(b).enumerate() {
            assert!((x - y).abs() < tol, "[{i}] {x} vs {y}");
        }
    }

    #[test]
    fn config_validation() {
        assert!(cfg(64, 4, 31).validate().is_ok());
        assert!(cfg(6, 4, 3).validate().is_err());
        assert!(cfg(8, 4, 4).validate().is_err());
        assert!(ConformerConfig { dropout: 1.0, ..cfg(8, 4, 3) }.validate().is_err());
        assert!(ConformerConfig { ffn_expansion: 0, ..cfg(8, 4, 3) }.validate().is_err());
    }

    #[test]
    fn single_token_attention_is_a_value_projection() {
        let (store, m) = build(1, |b| SelfAttention::new(b, "a", &cfg(4, 2, 3)));
        let x = rand_t(&[3, 1, 4], 2);
        let h = ln(&store, &m.norm, x.data());
        let o = lin(&store, &m.out, &lin(&store, &m.value, &h));
        let want: Vec<f64> = x.data().iter().zip(&o).map(|(a, b)| a + b).collect();
        close(run(&store, &x, |g, v| m.forward(g, v)).data(), &want, 1e-12);
        assert!(m.weights(&store, &x).unwrap().iter().all(|&p| p == 1.0));
    }

    #[test]
    fn two_token_single_head_attention() {
        let (store, m) = build(3, |b| SelfAttention::new(b, "a", &cfg(2, 1, 3)));
        let x = rand_t(&[1, 2, 2], 4);
        let h = ln(&store, &m.norm, x.data());
        let (q, k, v) = (lin(&store, &m.query, &h), lin(&store, &m.key, &h), lin(&store, &m.value, &h));
        let mut att = vec![0.0; 4];
        for i in 0..2 {
            let s: Vec<f64> = (0..2).map(|j| (q[2 * i] * k[2 * j] + q[2 * i + 1] * k[2 * j + 1]) / 2f64.sqrt()).collect();
            let z = s[0].exp() + s[1].exp();
            for d in 0..2 {
                att[2 * i + d] = (s[0].exp() * v[d] + s[1].exp() * v[2 + d]) / z;
            }
        }
        let o = lin(&store, &m.out, &att);
        let want: Vec<f64> = x.data().iter().zip(&o).map(|(a, b)| a + b).collect();
        close(run(&store, &x, |g, v| m.forward(g, v)).data(), &want, 1e-12);
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let (store, m) = build(5, |b| SelfAttention::new(b, "a", &cfg(8, 4, 3)));
        let x = rand_t(&[3, 7, 8], 6);
        let w = m.weights(&store, &x).unwrap();
        assert_eq!(w.len(), 3 * 4 * 49);
        for row in w.chunks(7) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
        let mut g = Graph::new(&store);
        let bad = g.input(rand_t(&[3, 7, 6], 1));
        assert!(m.forward(&mut g, bad).is_err());
    }

    #[test]
    fn feed_forward_matches_two_matrix_oracle() {
        let (store, m) = build(7, |b| FeedForward::new(b, "f", &cfg(4, 2, 3)));
        let x = rand_t(&[2, 3, 4], 8);
        let h = lin(&store, &m.down, &act(&store, &m.act, &lin(&store, &m.up, &ln(&store, &m.norm, x.data()))));
        let want: Vec<f64> = x.data().iter().zip(&h).map(|(a, b)| a + 0.5 * b).collect();
        close(run(&store, &x, |g, v| m.forward(g, v)).data(), &want, 1e-12);
    }

    #[test]
    fn pointwise_conv_module_matches_composition() {
        let (store, m) = build(9, |b| ConvModule::new(b, "c", &cfg(4, 2, 1)));
        let x = rand_t(&[2, 3, 4], 10);
        let e = lin(&store, &m.expand, &ln(&store, &m.norm, x.data()));
        let glu: Vec<f64> = e.chunks(8).flat_map(|r| (0..4).map(move |i| r[i] / (1.0 + (-r[4 + i]).exp()))).collect();
        let (w, b) = (store.value(m.depthwise_weight).data(), store.value(m.depthwise_bias).data());
        let dw: Vec<f64> = glu.iter().enumerate().map(|(i, v)| w[i % 4] * v + b[i % 4]).collect();
        let h = lin(&store, &m.project, &act(&store, &m.act, &ln(&store, &m.mid_norm, &dw)));
        let want: Vec<f64> = x.data().iter().zip(&h).map(|(a, b)| a + b).collect();
        close(run(&store, &x, |g, v| m.forward(g, v)).data(), &want, 1e-12);
        assert!(ConvModule::new(&mut ParamBuilder::new(&mut ParamStore::new(), 0), "c", &cfg(4, 2, 2)).is_err());
    }

    #[test]
    fn zeroed_modules_are_residual_only() {
        let c = cfg(4, 2, 3);
        let x = rand_t(&[2, 5, 4], 11);
        let (mut s1, ffn) = build(12, |b| FeedForward::new(b, "f", &c));
        let (mut s2, att) = build(13, |b| SelfAttention::new(b, "a", &c));
        let (mut s3, conv) = build(14, |b| ConvModule::new(b, "c", &c));
        for s in [&mut s1, &mut s2, &mut s3] {
            zero_linear(s);
        }
        assert_eq!(run(&s1, &x, |g, v| ffn.forward(g, v)), x);
        assert_eq!(run(&s2, &x, |g, v| att.forward(g, v)), x);
        assert_eq!(run(&s3, &x, |g, v| conv.forward(g, v)), x);

        let mut store = ParamStore::new();
        let block = ConformerBlock::new(&mut ParamBuilder::new(&mut store, 15), "b", &c).unwrap();
        zero_linear(&mut store);
        close(block.apply(&store, &x).unwrap().data(), &ln(&store, &block.norm, x.data()), 1e-12);
    }

    #[test]
    fn block_chains_its_modules() {
        let (store, block) = build(16, |b| ConformerBlock::new(b, "b", &cfg(4, 2, 3)));
        let x = rand_t(&[3, 6, 4], 17);
        let chained = evaluate(&store, |g| {
            let v = g.input(x.clone());
            let h = block.ffn_in.forward(g, v)?;
            let h = block.attention.forward(g, h)?;
            let h = block.conv.forward(g, h)?;
            let h = block.ffn_out.forward(g, h)?;
            let h = g.value(h).data().to_vec();
            Ok(g.input(Tensor::new(x.shape().to_vec(), ln(&store, &block.norm, &h))?))
        })
        .unwrap();
        let got = block.apply(&store, &x).unwrap();
        assert_eq!(got.shape(), x.shape());
        close(got.data(), chained.data(), 1e-12);
    }

    fn permute_axis(x: &Tensor, axis: usize, perm: &[usize]) -> Tensor {
        let (_, t, f) = x.dims3().unwrap();
        Tensor::from_fn(x.shape(), |i| {
            let (a, b, d) = (i / (t * f), (i / f) % t, i % f);
            let (b, d) = if axis == 1 { (perm[b], d) } else { (b, perm[d]) };
            x.data()[(a * t + b) * f + d]
        })
    }

    #[test]
    fn dual_path_stages_are_permutation_equivariant() {
        let (store, m) = build(18, |b| DualPathConformer::new(b, "dp", &cfg(4, 2, 3)));
        let p = rand_t(&[4, 5, 6], 19);
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        for _ in 0..3 {
            let mut pf: Vec<usize> = (0..6).collect();
            pf.shuffle(&mut rng);
            let a = run(&store, &permute_axis(&p, 2, &pf), |g, v| m.intra_forward(g, v));
            let b = permute_axis(&run(&store, &p, |g, v| m.intra_forward(g, v)), 2, &pf);
            assert_eq!(a, b);
            let mut pt: Vec<usize> = (0..5).collect();
            pt.shuffle(&mut rng);
            let a = run(&store, &permute_axis(&p, 1, &pt), |g, v| m.inter_forward(g, v));
            let b = permute_axis(&run(&store, &p, |g, v| m.inter_forward(g, v)), 1, &pt);
            assert_eq!(a, b);
        }
        let full = m.apply(&store, &p).unwrap();
        let staged = run(&store, &p, |g, v| {
            let h = m.intra_forward(g, v)?;
            m.inter_forward(g, h)
        });
        assert!(full.max_abs_diff(&staged) < 1e-12);
    }

    #[test]
    fn zeroed_dual_path_normalizes_channels_twice() {
        let mut store = ParamStore::new();
        let m = DualPathConformer::new(&mut ParamBuilder::new(&mut store, 21), "dp", &cfg(4, 2, 3)).unwrap();
        zero_linear(&mut store);
        let p = rand_t(&[4, 3, 5], 22);
        let out = m.apply(&store, &p).unwrap();
        assert_eq!(out.shape(), p.shape());
        let (once, _) = crate::kernels::layer_norm(&p, &Tensor::full(&[4], 1.0), &Tensor::zeros(&[4]), 0).unwrap();
        let (twice, _) = crate::kernels::layer_norm(&once, &Tensor::full(&[4], 1.0), &Tensor::zeros(&[4]), 0).unwrap();
        assert!(out.max_abs_diff(&twice) < 1e-12);
        let mut g = Graph::new(&store);
        let bad = g.input(rand_t(&[3, 3, 5], 1));
        assert!(m.forward(&mut g, bad).is_err());
    }

    #[test]
    fn gradients() {
        let c = cfg(4, 2, 3);
        let x = rand_t(&[2, 4, 4], 23);
        let check = |store: &mut ParamStore, x: &Tensor, f: &dyn Fn(&mut Graph<'_>, Var) -> Result<Var>| {
            let r = grad_check(store, &[x.clone()], |g, v| f(g, v[0]), &GradCheckConfig::default()).unwrap();
            assert!(r.passed(), "{}", r.summary());
        };
        let (mut s, ffn) = build(24, |b| FeedForward::new(b, "f", &c));
        check(&mut s, &x, &|g, v| ffn.forward(g, v));
        let (mut s, att) = build(25, |b| SelfAttention::new(b, "a", &c));
        check(&mut s, &x, &|g, v| att.forward(g, v));
        let (mut s, conv) = build(26, |b| ConvModule::new(b, "c", &c));
        check(&mut s, &x, &|g, v| conv.forward(g, v));
        let (mut s, blk) = build(27, |b| ConformerBlock::new(b, "b", &c));
        check(&mut s, &x, &|g, v| blk.forward(g, v));
        let (mut s, dp) = build(28, |b| DualPathConformer::new(b, "dp", &c));
        check(&mut s, &rand_t(&[4, 3, 3], 29), &|g, v| dp.forward(g, v));
    }
}
