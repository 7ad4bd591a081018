//! Trainable layers and the connection blocks built from them.

mod blocks;

pub use blocks::{dcb_param_count, lwcb_param_count, Backbone, DeepConnBlock, LightConnBlock, PlainConvStack};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{ParamBuilder, ParamId, ParamStore};
use crate::tensor::Tensor;

pub use crate::kernels::{conv2d, layer_norm, smu, LAYER_NORM_EPS};

/// Fixed SMU `α`; `μ` is trainable per activation site.
pub const SMU_ALPHA: f64 = 0.25;
pub const SMU_MU_INIT: f64 = 1.0;

/// Runs `f` on a fresh graph over `store` and returns the resulting value.
pub fn evaluate(
    store: &ParamStore,
    f: impl FnOnce(&mut Graph<'_>) -> Result<Var>,
) -> Result<Tensor> {
    let mut g = Graph::new(store);
    let v = f(&mut g)?;
    Ok(g.value(v).clone())
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: (usize, usize),
    pub dilation: (usize, usize),
}

impl Conv2d {
    pub fn new(
        b: &mut ParamBuilder<'_>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: (usize, usize),
        dilation: (usize, usize),
    ) -> Result<Self> {
        if kernel.0 % 2 == 0 || kernel.1 % 2 == 0 {
            return Err(Error::Config(format!(
                "conv `{name}` kernel must be odd, got {}x{}",
                kernel.0, kernel.1
            )));
        }
        let fan_in = in_ch * kernel.0 * kernel.1;
        b.scoped(name, |b| {
            Ok(Self {
                weight: b.fan_in_uniform("weight", &[out_ch, in_ch, kernel.0, kernel.1], fan_in)?,
                bias: b.constant("bias", &[out_ch], 0.0)?,
                in_ch,
                out_ch,
                kernel,
                dilation,
            })
        })
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let (w, b) = (g.param(self.weight), g.param(self.bias));
        g.conv2d(x, w, b, self.dilation)
    }

    pub fn param_count(in_ch: usize, out_ch: usize, kernel: (usize, usize)) -> usize {
        out_ch * in_ch * kernel.0 * kernel.1 + out_ch
    }
}

/// Layer normalization over one axis (channels for feature maps, the model
/// dimension for sequence batches).
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
    pub dim: usize,
    pub axis: usize,
}

impl LayerNorm {
    pub fn new(b: &mut ParamBuilder<'_>, name: &str, dim: usize, axis: usize) -> Result<Self> {
        b.scoped(name, |b| {
            Ok(Self {
                gain: b.constant("gain", &[dim], 1.0)?,
                bias: b.constant("bias", &[dim], 0.0)?,
                dim,
                axis,
            })
        })
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let (gain, bias) = (g.param(self.gain), g.param(self.bias));
        g.layer_norm(x, gain, bias, self.axis)
    }
}

#[derive(Clone, Debug)]
pub struct Smu {
    pub mu: ParamId,
}

impl Smu {
    pub fn new(b: &mut ParamBuilder<'_>, name: &str) -> Result<Self> {
        Ok(Self {
            mu: b.scoped(name, |b| b.constant("mu", &[1], SMU_MU_INIT))?,
        })
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let mu = g.param(self.mu);
        g.smu(x, mu, SMU_ALPHA)
    }
}

/// Convolution followed by channel layer norm and SMU.
#[derive(Clone, Debug)]
pub struct ConvNormAct {
    pub conv: Conv2d,
    pub norm: LayerNorm,
    pub act: Smu,
}

impl ConvNormAct {
    pub fn new(
        b: &mut ParamBuilder<'_>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: (usize, usize),
        dilation: (usize, usize),
    ) -> Result<Self> {
        b.scoped(name, |b| {
            Ok(Self {
                conv: Conv2d::new(b, "conv", in_ch, out_ch, kernel, dilation)?,
                norm: LayerNorm::new(b, "norm", out_ch, 0)?,
                act: Smu::new(b, "act")?,
            })
        })
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let y = self.conv.forward(g, x)?;
        let y = self.norm.forward(g, y)?;
        self.act.forward(g, y)
    }

    pub fn param_count(in_ch: usize, out_ch: usize, kernel: (usize, usize)) -> usize {
        Conv2d::param_count(in_ch, out_ch, kernel) + 2 * out_ch + 1
    }
}

/// `conv(x; lin) ⊙ sigmoid(conv(x; gate))`.
#[derive(Clone, Debug)]
pub struct GatedConv2d {
    pub linear: Conv2d,
    pub gate: Conv2d,
}

impl GatedConv2d {
    pub fn new(b: &mut ParamBuilder<'_>, name: &str, in_ch: usize, out_ch: usize) -> Result<Self> {
        b.scoped(name, |b| {
            Ok(Self {
                linear: Conv2d::new(b, "linear", in_ch, out_ch, (1, 1), (1, 1))?,
                gate: Conv2d::new(b, "gate", in_ch, out_ch, (1, 1), (1, 1))?,
            })
        })
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        gated_conv2d(g, x, &self.linear, &self.gate)
    }
}

pub fn gated_conv2d(g: &mut Graph<'_>, x: Var, linear: &Conv2d, gate: &Conv2d) -> Result<Var> {
    if linear.out_ch != gate.out_ch {
        return Err(Error::Shape(format!(
            "gated conv branches disagree: {} vs {} output channels",
            linear.out_ch, gate.out_ch
        )));
    }
    let lin = linear.forward(g, x)?;
    let gt = gate.forward(g, x)?;
    let gt = g.sigmoid(gt);
    g.mul(lin, gt)
}

/// Affine map over the last axis.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(b: &mut ParamBuilder<'_>, name: &str, in_dim: usize, out_dim: usize) -> Result<Self> {
        b.scoped(name, |b| {
            Ok(Self {
                weight: b.fan_in_uniform("weight", &[out_dim, in_dim], in_dim)?,
                bias: b.constant("bias", &[out_dim], 0.0)?,
                in_dim,
                out_dim,
            })
        })
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let (w, b) = (g.param(self.weight), g.param(self.bias));
        g.linear(x, w, b)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels;
    use crate::training::{grad_check, GradCheckConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_t(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    fn zero_weights_and_biases(store: &mut ParamStore) {
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

    fn assert_grads(store: &mut ParamStore, x: Tensor, f: impl Fn(&mut Graph<'_>, Var) -> Result<Var>) {
        let report = grad_check(store, &[x], |g, v| f(g, v[0]), &GradCheckConfig::default()).unwrap();
        assert!(report.passed(), "{}", report.summary());
    }

    fn conv_oracle(store: &ParamStore, c: &Conv2d, x: &Tensor) -> Tensor {
        kernels::conv2d(x, store.value(c.weight), store.value(c.bias), c.dilation).unwrap()
    }

    fn cna_oracle(store: &ParamStore, l: &ConvNormAct, x: &Tensor) -> Tensor {
        let y = conv_oracle(store, &l.conv, x);
        let (y, _) = kernels::layer_norm(&y, store.value(l.norm.gain), store.value(l.norm.bias), 0).unwrap();
        let mu = store.value(l.act.mu).data()[0];
        Tensor::from_fn(y.shape(), |i| smu(y.data()[i], SMU_ALPHA, mu))
    }

    fn cat(a: &Tensor, b: &Tensor) -> Tensor {
        let mut shape = a.shape().to_vec();
        shape[0] += b.shape()[0];
        Tensor::new(shape, [a.data(), b.data()].concat()).unwrap()
    }

    #[test]
    fn conv_layer_names_counts_and_odd_kernels() {
        let mut store = ParamStore::new();
        let mut b = ParamBuilder::new(&mut store, 0);
        let c = Conv2d::new(&mut b, "in", 2, 128, (1, 1), (1, 1)).unwrap();
        assert!(Conv2d::new(&mut b, "even", 2, 2, (2, 3), (1, 1)).is_err());
        assert_eq!(store.num_trainable(), 384);
        assert_eq!(Conv2d::param_count(2, 128, (1, 1)), 384);
        assert_eq!(store.get(c.weight).name, "in.weight");
        assert!(store.value(c.bias).data().iter().all(|&v| v == 0.0));
        let bound = 1.0 / 2f64.sqrt();
        assert!(store.value(c.weight).data().iter().all(|v| v.abs() <= bound));
    }

    #[test]
    fn identity_pointwise_conv() {
        let mut store = ParamStore::new();
        let c = Conv2d::new(&mut ParamBuilder::new(&mut store, 0), "c", 3, 3, (1, 1), (1, 1)).unwrap();
        let w = store.value_mut(c.weight).data_mut();
        w.fill(0.0);
        for i in 0..3 {
            w[i * 3 + i] = 1.0;
        }
        let x = rand_t(&[3, 4, 2], 1);
        assert_eq!(run(&store, &x, |g, v| c.forward(g, v)), x);
    }

    #[test]
    fn gated_conv_cases() {
        let mut store = ParamStore::new();
        let gc = GatedConv2d::new(&mut ParamBuilder::new(&mut store, 3), "g", 3, 2).unwrap();
        store.map_values(|_, t| {
            let mut rng = ChaCha8Rng::seed_from_u64(t.len() as u64);
            t.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-1.0..1.0));
        });
        let x = rand_t(&[3, 4, 5], 2);
        let lin = conv_oracle(&store, &gc.linear, &x);
        let gate = conv_oracle(&store, &gc.gate, &x);
        let want = Tensor::from_fn(lin.shape(), |i| lin.data()[i] / (1.0 + (-gate.data()[i]).exp()));
        assert!(run(&store, &x, |g, v| gc.forward(g, v)).max_abs_diff(&want) < 1e-12);

        store.value_mut(gc.gate.weight).data_mut().fill(0.0);
        store.value_mut(gc.gate.bias).data_mut().fill(0.0);
        let half = Tensor::from_fn(lin.shape(), |i| 0.5 * lin.data()[i]);
        assert!(run(&store, &x, |g, v| gc.forward(g, v)).max_abs_diff(&half) < 1e-15);
        store.value_mut(gc.gate.bias).data_mut().fill(50.0);
        assert!(run(&store, &x, |g, v| gc.forward(g, v)).max_abs_diff(&lin) < 1e-12);

        assert_grads(&mut store, x.clone(), |g, v| gc.forward(g, v));

        let mut other = ParamStore::new();
        let mut b = ParamBuilder::new(&mut other, 0);
        let l = Conv2d::new(&mut b, "l", 3, 2, (1, 1), (1, 1)).unwrap();
        let gt = Conv2d::new(&mut b, "gt", 3, 4, (1, 1), (1, 1)).unwrap();
        let mut g = Graph::new(&other);
        let v = g.input(x);
        assert!(gated_conv2d(&mut g, v, &l, &gt).is_err());
    }

    #[test]
    fn conv_norm_act_gradients() {
        let mut store = ParamStore::new();
        let l = ConvNormAct::new(&mut ParamBuilder::new(&mut store, 4), "cna", 2, 3, (3, 3), (2, 1)).unwrap();
        store.map_values(|name, t| {
            if name.ends_with("gain") || name.ends_with("norm.bias") {
                let mut rng = ChaCha8Rng::seed_from_u64(7);
                t.data_mut().iter_mut().for_each(|v| *v += rng.gen_range(-0.5..0.5));
            }
        });
        assert_eq!(store.num_trainable(), ConvNormAct::param_count(2, 3, (3, 3)));
        let x = rand_t(&[2, 6, 4], 5);
        assert!(run(&store, &x, |g, v| l.forward(g, v)).max_abs_diff(&cna_oracle(&store, &l, &x)) < 1e-12);
        assert_grads(&mut store, x, |g, v| l.forward(g, v));
    }

    #[test]
    fn lwcb_stage_wiring_and_zero_weights() {
        let mut store = ParamStore::new();
        let blk = LightConnBlock::new(&mut ParamBuilder::new(&mut store, 1), "lw", 3, 4, (3, 3)).unwrap();
        assert_eq!(blk.dilations(), vec![1, 2, 4, 8]);
        assert_eq!(store.num_trainable(), lwcb_param_count(3, (3, 3), 4));
        let x = rand_t(&[3, 10, 4], 6);
        let outs = evaluate_all(&store, &x, |g, v| blk.forward(g, v));
        let mut prev: Option<Tensor> = None;
        for (s, stage) in blk.stages.iter().enumerate() {
            let input = prev.as_ref().map_or(x.clone(), |p| cat(&x, p));
            let want = cna_oracle(&store, stage, &input);
            assert!(outs[s].max_abs_diff(&want) < 1e-12, "stage {s}");
            prev = Some(want);
        }

        zero_weights_and_biases(&mut store);
        let bias = [0.3, -0.7, 1.1];
        for stage in &blk.stages {
            store.value_mut(stage.norm.bias).data_mut().copy_from_slice(&bias);
        }
        for y in evaluate_all(&store, &x, |g, v| blk.forward(g, v)) {
            for (c, b) in bias.iter().enumerate() {
                let want = smu(*b, SMU_ALPHA, SMU_MU_INIT);
                assert!(y.data()[c * 40..(c + 1) * 40].iter().all(|v| (v - want).abs() < 1e-15));
            }
        }
        assert!(LightConnBlock::new(&mut ParamBuilder::new(&mut ParamStore::new(), 0), "x", 3, 0, (3, 3)).is_err());
        let mut g = Graph::new(&store);
        let wrong = g.input(rand_t(&[2, 10, 4], 1));
        assert!(blk.forward(&mut g, wrong).is_err());
    }

    fn evaluate_all(store: &ParamStore, x: &Tensor, f: impl FnOnce(&mut Graph<'_>, Var) -> Result<Vec<Var>>) -> Vec<Tensor> {
        let mut g = Graph::new(store);
        let v = g.input(x.clone());
        f(&mut g, v).unwrap().into_iter().map(|o| g.value(o).clone()).collect()
    }

    #[test]
    fn dcb_zero_weights_is_the_skip_path() {
        let mut store = ParamStore::new();
        let blk = DeepConnBlock::new(&mut ParamBuilder::new(&mut store, 2), "dcb", 4, 4, (3, 3)).unwrap();
        assert_eq!(store.num_trainable(), dcb_param_count(4, (3, 3), 4));
        zero_weights_and_biases(&mut store);
        let x = rand_t(&[4, 9, 3], 7);
        assert_eq!(run(&store, &x, |g, v| blk.forward(g, v)), x);
    }

    #[test]
    fn two_stage_dcb_matches_hand_composition() {
        let mut store = ParamStore::new();
        let blk = DeepConnBlock::new(&mut ParamBuilder::new(&mut store, 3), "dcb", 2, 2, (3, 3)).unwrap();
        store.map_values(|name, t| {
            if name.ends_with("bias") || name.ends_with("gain") || name.ends_with("mu") {
                let mut rng = ChaCha8Rng::seed_from_u64(name.len() as u64);
                t.data_mut().iter_mut().for_each(|v| *v += rng.gen_range(-0.5..0.5));
            }
        });
        let x = rand_t(&[2, 3, 3], 8);
        let y1 = cna_oracle(&store, &blk.up.stages[0], &x);
        let y2 = cna_oracle(&store, &blk.up.stages[1], &cat(&x, &y1));
        let z1 = cna_oracle(&store, &blk.fuse[0], &cat(&y1, &y2));
        let want = Tensor::from_fn(x.shape(), |i| z1.data()[i] + x.data()[i]);
        assert!(run(&store, &x, |g, v| blk.forward(g, v)).max_abs_diff(&want) < 1e-12);
        assert_grads(&mut store, x, |g, v| blk.forward(g, v));
    }

    #[test]
    fn block_shapes_and_plain_stack() {
        for (c, s, t, f) in [(1, 1, 1, 1), (3, 3, 5, 2), (2, 4, 17, 6)] {
            let mut store = ParamStore::new();
            let mut b = ParamBuilder::new(&mut store, 9);
            let deep = Backbone::Deep(DeepConnBlock::new(&mut b, "d", c, s, (3, 3)).unwrap());
            let plain = Backbone::Plain(PlainConvStack::new(&mut b, "p", c, s, (3, 3)).unwrap());
            let x = rand_t(&[c, t, f], 10);
            for net in [&deep, &plain] {
                assert_eq!(run(&store, &x, |g, v| net.forward(g, v)).shape(), x.shape());
            }
            if let Backbone::Plain(p) = &plain {
                let dil: Vec<usize> = p.layers.iter().map(|l| l.conv.dilation.0).collect();
                assert_eq!(dil, (0..s).map(|i| 1 << i).collect::<Vec<_>>());
            }
        }
    }

    #[test]
    fn lwcb_gradients() {
        let mut store = ParamStore::new();
        let blk = LightConnBlock::new(&mut ParamBuilder::new(&mut store, 5), "lw", 2, 3, (3, 3)).unwrap();
        assert_grads(&mut store, rand_t(&[2, 7, 3], 11), |g, v| {
            let outs = blk.forward(g, v)?;
            let a = g.add(outs[0], outs[1])?;
            g.add(a, outs[2])
        });
    }

    /// Trainables of a classical dense block: stage `s` (from 1) sees the
    /// concatenation of the input and all `s − 1` earlier stage outputs.
    fn dense_block_params(c: usize, (kt, kf): (usize, usize), stages: usize) -> usize {
        (1..=stages).map(|s| c * s * c * kt * kf + c + 2 * c + 1).sum()
    }

    #[test]
    fn light_block_counts_are_affine_and_beat_dense_blocks() {
        let k = (2, 3);
        assert_eq!(
            lwcb_param_count(64, k, 4),
            (64 * 64 * 6 + 64 + 129) + 3 * (64 * 128 * 6 + 64 + 129)
        );
        let counts: Vec<usize> = (1..=8).map(|s| lwcb_param_count(64, k, s)).collect();
        for w in counts[1..].windows(3) {
            assert_eq!(w[2] - w[1], w[1] - w[0]);
        }
        let dense: Vec<usize> = (1..=8).map(|s| dense_block_params(64, k, s)).collect();
        assert!(dense[1..].windows(3).all(|w| (w[2] - w[1]) > (w[1] - w[0])));
        assert_eq!(counts[..2], dense[..2]);
        for s in 3..=8 {
            assert!(counts[s - 1] < dense[s - 1], "S = {s}");
        }
    }
}
