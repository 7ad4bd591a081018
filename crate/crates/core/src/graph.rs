//! A small reverse-mode autodiff tape over [`Tensor`] values.
//!
//! Ops are coarse (a whole convolution, a whole attention layer) so the tape
//! stays short; each op records a closure mapping the output gradient back to
//! its inputs. Parameters are bound once per graph from a [`ParamStore`].

use std::collections::HashMap;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::kernels::{self, sigmoid};
use crate::loss::TfL1Mode;
use crate::params::{ParamId, ParamStore};
use crate::signal::StftPlan;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

struct BackCtx<'a> {
    grad: &'a Tensor,
    out: &'a Tensor,
    inputs: Vec<&'a Tensor>,
    needs: Vec<bool>,
}

type BackwardFn = Box<dyn Fn(&BackCtx<'_>) -> Result<Vec<Option<Tensor>>>>;

struct Node {
    value: Tensor,
    parents: Vec<usize>,
    requires_grad: bool,
    backward: Option<BackwardFn>,
}

pub struct Graph<'p> {
    store: &'p ParamStore,
    nodes: Vec<Node>,
    bound: HashMap<ParamId, Var>,
    dropout_rng: Option<ChaCha8Rng>,
}

/// Result of [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<(ParamId, Var)>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params
            .iter()
            .find(|(p, _)| *p == id)
            .and_then(|(_, v)| self.get(*v))
    }

    /// Gradients of every bound trainable parameter, in binding order.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.params
            .iter()
            .filter_map(|(p, v)| self.grads[v.0].as_ref().map(|g| (*p, g)))
    }
}

fn ones_like(t: &Tensor) -> Tensor {
    Tensor::full(t.shape(), 1.0)
}

impl<'p> Graph<'p> {
    pub fn new(store: &'p ParamStore) -> Self {
        Self {
            store,
            nodes: Vec::new(),
            bound: HashMap::new(),
            dropout_rng: None,
        }
    }

    /// Enables dropout, drawing masks from a stream seeded with `seed`.
    pub fn with_dropout_seed(mut self, seed: u64) -> Self {
        self.dropout_rng = Some(ChaCha8Rng::seed_from_u64(seed));
        self
    }

    pub fn store(&self) -> &'p ParamStore {
        self.store
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            parents: Vec::new(),
            requires_grad,
            backward: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(
        &mut self,
        value: Tensor,
        parents: &[Var],
        backward: impl Fn(&BackCtx<'_>) -> Result<Vec<Option<Tensor>>> + 'static,
    ) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            parents: parents.iter().map(|p| p.0).collect(),
            requires_grad,
            backward: requires_grad.then(|| Box::new(backward) as BackwardFn),
        });
        Var(self.nodes.len() - 1)
    }

    /// A value that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// A leaf whose gradient is tracked.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound.get(&id) {
            return *v;
        }
        let p = self.store.get(id);
        let v = self.leaf(p.value.clone(), p.trainable);
        self.bound.insert(id, v);
        v
    }

    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar, got {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(ones_like(&self.nodes[loss.0].value));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            let Some(back) = node.backward.as_ref() else {
                continue;
            };
            let Some(g) = grads[i].take() else {
                continue;
            };
            let ctx = BackCtx {
                grad: &g,
                out: &node.value,
                inputs: node.parents.iter().map(|&p| &self.nodes[p].value).collect(),
                needs: node
                    .parents
                    .iter()
                    .map(|&p| self.nodes[p].requires_grad)
                    .collect(),
            };
            let pg = back(&ctx)?;
            for (&p, gp) in node.parents.iter().zip(pg) {
                if !self.nodes[p].requires_grad {
                    continue;
                }
                let Some(gp) = gp else { continue };
                match grads[p].as_mut() {
                    Some(acc) => acc.add_assign(&gp),
                    None => grads[p] = Some(gp),
                }
            }
        }
        // leaves keep their gradients; interior ones were consumed above
        let mut params: Vec<(ParamId, Var)> = self.bound.iter().map(|(p, v)| (*p, *v)).collect();
        params.sort();
        Ok(Gradients { grads, params })
    }

    // -- elementwise -------------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        va.same_shape(vb, "add")?;
        let mut out = va.clone();
        out.add_assign(vb);
        Ok(self.push(out, &[a, b], |c| {
            Ok(vec![Some(c.grad.clone()), Some(c.grad.clone())])
        }))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        va.same_shape(vb, "sub")?;
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x - y).collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        Ok(self.push(out, &[a, b], |c| {
            Ok(vec![Some(c.grad.clone()), Some(c.grad.map(|v| -v))])
        }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        va.same_shape(vb, "mul")?;
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        Ok(self.push(out, &[a, b], |c| {
            let g = c.grad.data();
            let ga = g.iter().zip(c.inputs[1].data()).map(|(g, y)| g * y).collect();
            let gb = g.iter().zip(c.inputs[0].data()).map(|(g, x)| g * x).collect();
            Ok(vec![
                Some(Tensor::new(c.grad.shape().to_vec(), ga)?),
                Some(Tensor::new(c.grad.shape().to_vec(), gb)?),
            ])
        }))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let out = self.value(a).map(|v| v * k);
        self.push(out, &[a], move |c| Ok(vec![Some(c.grad.map(|g| g * k))]))
    }

    /// Inverted dropout; the identity unless dropout was enabled on this graph.
    pub fn dropout(&mut self, a: Var, p: f64) -> Var {
        let Some(rng) = self.dropout_rng.as_mut().filter(|_| p > 0.0) else {
            return a;
        };
        let keep = 1.0 / (1.0 - p);
        let n = self.nodes[a.0].value.len();
        let mask: Vec<f64> = (0..n)
            .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep })
            .collect();
        let v = self.value(a);
        let out = Tensor::new(
            v.shape().to_vec(),
            v.data().iter().zip(&mask).map(|(x, m)| x * m).collect(),
        )
        .expect("shape preserved");
        self.push(out, &[a], move |c| {
            let d = c.grad.data().iter().zip(&mask).map(|(g, m)| g * m).collect();
            Ok(vec![Some(Tensor::new(c.grad.shape().to_vec(), d)?)])
        })
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        self.push(out, &[a], |c| {
            let d = c
                .grad
                .data()
                .iter()
                .zip(c.out.data())
                .map(|(g, s)| g * s * (1.0 - s))
                .collect();
            Ok(vec![Some(Tensor::new(c.grad.shape().to_vec(), d)?)])
        })
    }

    /// SMU activation with fixed `alpha` and the scalar parameter `mu` (`[1]`).
    pub fn smu(&mut self, x: Var, mu: Var, alpha: f64) -> Result<Var> {
        if self.value(mu).len() != 1 {
            return Err(Error::Shape("smu mu must be a scalar".into()));
        }
        let m = self.value(mu).data()[0];
        let out = self.value(x).map(|v| kernels::smu(v, alpha, m));
        Ok(self.push(out, &[x, mu], move |c| {
            let m = c.inputs[1].data()[0];
            let mut dx = Vec::with_capacity(c.grad.len());
            let mut dmu = 0.0;
            for (g, &v) in c.grad.data().iter().zip(c.inputs[0].data()) {
                let (gx, gm) = kernels::smu_grad(v, alpha, m);
                dx.push(g * gx);
                dmu += g * gm;
            }
            Ok(vec![
                Some(Tensor::new(c.grad.shape().to_vec(), dx)?),
                c.needs[1].then(|| Tensor::scalar(dmu)),
            ])
        }))
    }

    // -- layers ------------------------------------------------------------

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, dilation: (usize, usize)) -> Result<Var> {
        let out = kernels::conv2d(self.value(x), self.value(w), self.value(b), dilation)?;
        Ok(self.push(out, &[x, w, b], move |c| {
            let (dx, dw, db) = kernels::conv2d_backward(
                c.inputs[0],
                c.inputs[1],
                c.inputs[2],
                dilation,
                c.grad,
                c.needs[0],
            )?;
            Ok(vec![dx, Some(dw), Some(db)])
        }))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, axis: usize) -> Result<Var> {
        let (out, cache) =
            kernels::layer_norm(self.value(x), self.value(gain), self.value(bias), axis)?;
        Ok(self.push(out, &[x, gain, bias], move |c| {
            let (dx, dg, db) =
                kernels::layer_norm_backward(c.inputs[0].shape(), c.inputs[1], &cache, axis, c.grad);
            Ok(vec![Some(dx), Some(dg), Some(db)])
        }))
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let out = kernels::linear(self.value(x), self.value(w), self.value(b))?;
        Ok(self.push(out, &[x, w, b], |c| {
            let (dx, dw, db) = kernels::linear_backward(c.inputs[0], c.inputs[1], c.grad, c.needs[0]);
            Ok(vec![dx, Some(dw), Some(db)])
        }))
    }

    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        let (out, probs) = kernels::attention(self.value(q), self.value(k), self.value(v), heads)?;
        Ok(self.push(out, &[q, k, v], move |c| {
            let (dq, dk, dv) =
                kernels::attention_backward(c.inputs[0], c.inputs[1], c.inputs[2], &probs, heads, c.grad);
            Ok(vec![Some(dq), Some(dk), Some(dv)])
        }))
    }

    pub fn depthwise_conv1d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let out = kernels::depthwise_conv1d(self.value(x), self.value(w), self.value(b))?;
        Ok(self.push(out, &[x, w, b], |c| {
            let (dx, dw, db) =
                kernels::depthwise_conv1d_backward(c.inputs[0], c.inputs[1], c.grad, c.needs[0]);
            Ok(vec![dx, Some(dw), Some(db)])
        }))
    }

    /// Gated linear unit over the last axis: first half times sigmoid of the second.
    pub fn glu(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let last = *xv.shape().last().unwrap_or(&0);
        if last % 2 != 0 {
            return Err(Error::Shape(format!("glu needs an even last axis, got {last}")));
        }
        let h = last / 2;
        let mut out = Vec::with_capacity(xv.len() / 2);
        for row in xv.data().chunks(last) {
            out.extend((0..h).map(|i| row[i] * sigmoid(row[h + i])));
        }
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().expect("rank >= 1") = h;
        let out = Tensor::new(shape, out)?;
        Ok(self.push(out, &[x], move |c| {
            let mut dx = vec![0.0; c.inputs[0].len()];
            for ((row, drow), grow) in c.inputs[0]
                .data()
                .chunks(2 * h)
                .zip(dx.chunks_mut(2 * h))
                .zip(c.grad.data().chunks(h))
            {
                for i in 0..h {
                    let s = sigmoid(row[h + i]);
                    drow[i] = grow[i] * s;
                    drow[h + i] = grow[i] * row[i] * s * (1.0 - s);
                }
            }
            Ok(vec![Some(Tensor::new(c.inputs[0].shape().to_vec(), dx)?)])
        }))
    }

    // -- layout ------------------------------------------------------------

    /// Concatenates along axis 0.
    pub fn concat0(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape()[1..] != vb.shape()[1..] {
            return Err(Error::Shape(format!(
                "concat {:?} with {:?}",
                va.shape(),
                vb.shape()
            )));
        }
        let mut shape = va.shape().to_vec();
        shape[0] += vb.shape()[0];
        let mut data = va.data().to_vec();
        data.extend_from_slice(vb.data());
        let split = va.len();
        let (sa, sb) = (va.shape().to_vec(), vb.shape().to_vec());
        Ok(self.push(Tensor::new(shape, data)?, &[a, b], move |c| {
            let (ga, gb) = c.grad.data().split_at(split);
            Ok(vec![
                Some(Tensor::new(sa.clone(), ga.to_vec())?),
                Some(Tensor::new(sb.clone(), gb.to_vec())?),
            ])
        }))
    }

    /// Rows `start..start+len` of axis 0.
    pub fn slice0(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        let n0 = xv.shape()[0];
        if start + len > n0 {
            return Err(Error::Shape(format!(
                "slice {start}..{} of axis with {n0} entries",
                start + len
            )));
        }
        let stride = xv.len() / n0;
        let mut shape = xv.shape().to_vec();
        shape[0] = len;
        let data = xv.data()[start * stride..(start + len) * stride].to_vec();
        let in_shape = xv.shape().to_vec();
        Ok(self.push(Tensor::new(shape, data)?, &[x], move |c| {
            let mut g = Tensor::zeros(&in_shape);
            g.data_mut()[start * stride..(start + len) * stride].copy_from_slice(c.grad.data());
            Ok(vec![Some(g)])
        }))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshaped(shape)?;
        let in_shape = self.value(x).shape().to_vec();
        Ok(self.push(out, &[x], move |c| {
            Ok(vec![Some(c.grad.clone().reshaped(&in_shape)?)])
        }))
    }

    pub fn permute3(&mut self, x: Var, perm: [usize; 3]) -> Result<Var> {
        let out = kernels::permute3(self.value(x), perm)?;
        let inv = kernels::inverse_perm(perm);
        Ok(self.push(out, &[x], move |c| {
            Ok(vec![Some(kernels::permute3(c.grad, inv)?)])
        }))
    }

    // -- pooling and gating for the attention module -----------------------

    /// Max over all `(t, f)` of each channel of `[C, T, F]`, giving `[C]`.
    pub fn global_max_pool(&mut self, x: Var) -> Result<Var> {
        let (mx, _, arg) = kernels::global_pool(self.value(x))?;
        let shape = self.value(x).shape().to_vec();
        let p = shape[1] * shape[2];
        Ok(self.push(mx, &[x], move |c| {
            let mut g = Tensor::zeros(&shape);
            for (ch, (&a, gv)) in arg.iter().zip(c.grad.data()).enumerate() {
                g.data_mut()[ch * p + a] = *gv;
            }
            Ok(vec![Some(g)])
        }))
    }

    /// Mean over all `(t, f)` of each channel of `[C, T, F]`, giving `[C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let (_, av, _) = kernels::global_pool(self.value(x))?;
        let shape = self.value(x).shape().to_vec();
        let p = shape[1] * shape[2];
        Ok(self.push(av, &[x], move |c| {
            let mut g = Tensor::zeros(&shape);
            for (row, gv) in g.data_mut().chunks_mut(p).zip(c.grad.data()) {
                row.fill(gv / p as f64);
            }
            Ok(vec![Some(g)])
        }))
    }

    /// Max across channels at each position of `[C, T, F]`, giving `[1, T, F]`.
    pub fn channel_max_pool(&mut self, x: Var) -> Result<Var> {
        let (mx, _, arg) = kernels::channel_pool(self.value(x))?;
        let shape = self.value(x).shape().to_vec();
        let p = shape[1] * shape[2];
        Ok(self.push(mx, &[x], move |c| {
            let mut g = Tensor::zeros(&shape);
            for (i, (&a, gv)) in arg.iter().zip(c.grad.data()).enumerate() {
                g.data_mut()[a * p + i] = *gv;
            }
            Ok(vec![Some(g)])
        }))
    }

    /// Mean across channels at each position of `[C, T, F]`, giving `[1, T, F]`.
    pub fn channel_avg_pool(&mut self, x: Var) -> Result<Var> {
        let (_, av, _) = kernels::channel_pool(self.value(x))?;
        let shape = self.value(x).shape().to_vec();
        let inv = 1.0 / shape[0] as f64;
        Ok(self.push(av, &[x], move |c| {
            let mut g = Tensor::zeros(&shape);
            for row in g.data_mut().chunks_mut(c.grad.len()) {
                for (d, gv) in row.iter_mut().zip(c.grad.data()) {
                    *d = gv * inv;
                }
            }
            Ok(vec![Some(g)])
        }))
    }

    /// `x[c, t, f] · gate[c]`.
    pub fn mul_channel(&mut self, x: Var, gate: Var) -> Result<Var> {
        let (xv, gv) = (self.value(x), self.value(gate));
        let (ch, t, f) = xv.dims3()?;
        if gv.len() != ch {
            return Err(Error::Shape(format!(
                "channel gate has {} entries for {ch} channels",
                gv.len()
            )));
        }
        let p = t * f;
        let mut out = xv.clone();
        for (row, g) in out.data_mut().chunks_mut(p).zip(gv.data()) {
            row.iter_mut().for_each(|v| *v *= g);
        }
        Ok(self.push(out, &[x, gate], move |c| {
            let mut dx = c.grad.clone();
            let mut dg = vec![0.0; ch];
            for ((drow, xrow), (gate, dgv)) in dx
                .data_mut()
                .chunks_mut(p)
                .zip(c.inputs[0].data().chunks(p))
                .zip(c.inputs[1].data().iter().zip(dg.iter_mut()))
            {
                *dgv = drow.iter().zip(xrow).map(|(a, b)| a * b).sum();
                drow.iter_mut().for_each(|v| *v *= gate);
            }
            Ok(vec![Some(dx), Some(Tensor::new(c.inputs[1].shape().to_vec(), dg)?)])
        }))
    }

    /// `x[c, t, f] · gate[0, t, f]`.
    pub fn mul_spatial(&mut self, x: Var, gate: Var) -> Result<Var> {
        let (xv, gv) = (self.value(x), self.value(gate));
        let (_, t, f) = xv.dims3()?;
        if gv.shape() != [1, t, f] {
            return Err(Error::Shape(format!(
                "spatial gate {:?} for map {:?}",
                gv.shape(),
                xv.shape()
            )));
        }
        let p = t * f;
        let mut out = xv.clone();
        for row in out.data_mut().chunks_mut(p) {
            for (v, g) in row.iter_mut().zip(gv.data()) {
                *v *= g;
            }
        }
        Ok(self.push(out, &[x, gate], move |c| {
            let mut dx = c.grad.clone();
            let mut dg = vec![0.0; p];
            for (drow, xrow) in dx.data_mut().chunks_mut(p).zip(c.inputs[0].data().chunks(p)) {
                for i in 0..p {
                    dg[i] += drow[i] * xrow[i];
                    drow[i] *= c.inputs[1].data()[i];
                }
            }
            Ok(vec![Some(dx), Some(Tensor::new(vec![1, t, f], dg)?)])
        }))
    }

    // -- spectral ops ------------------------------------------------------

    /// Complex product of a `[2, T, F]` mask with a fixed `[2, T, F]` spectrogram.
    pub fn complex_mul_const(&mut self, mask: Var, spec: &Tensor) -> Result<Var> {
        let mv = self.value(mask);
        mv.same_shape(spec, "complex mask")?;
        let out = complex_mul(mv, spec)?;
        let spec = spec.clone();
        Ok(self.push(out, &[mask], move |c| {
            let n = spec.len() / 2;
            let (yr, yi) = spec.data().split_at(n);
            let (gr, gi) = c.grad.data().split_at(n);
            let mut d = vec![0.0; 2 * n];
            for i in 0..n {
                d[i] = gr[i] * yr[i] + gi[i] * yi[i];
                d[n + i] = -gr[i] * yi[i] + gi[i] * yr[i];
            }
            Ok(vec![Some(Tensor::new(spec.shape().to_vec(), d)?)])
        }))
    }

    pub fn stft(&mut self, wave: Var, plan: Arc<StftPlan>) -> Result<Var> {
        let out = plan.analyze(self.value(wave).data())?;
        let len = self.value(wave).len();
        Ok(self.push(out, &[wave], move |c| {
            let d = plan.analyze_adjoint(c.grad, len)?;
            Ok(vec![Some(Tensor::new(vec![len], d)?)])
        }))
    }

    pub fn istft(&mut self, spec: Var, plan: Arc<StftPlan>, out_len: usize) -> Result<Var> {
        let frames = self.value(spec).shape().get(1).copied().unwrap_or(0);
        let out = plan.synthesize(self.value(spec), out_len)?;
        Ok(self.push(Tensor::new(vec![out_len], out)?, &[spec], move |c| {
            Ok(vec![Some(plan.synthesize_adjoint(c.grad.data(), frames)?)])
        }))
    }

    // -- reductions --------------------------------------------------------

    /// Mean squared error against a fixed target.
    pub fn mse_const(&mut self, x: Var, target: &Tensor) -> Result<Var> {
        let xv = self.value(x);
        xv.same_shape(target, "mse")?;
        let m = xv.len() as f64;
        let loss = xv
            .data()
            .iter()
            .zip(target.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / m;
        let target = target.clone();
        Ok(self.push(Tensor::scalar(loss), &[x], move |c| {
            let g = c.grad.data()[0] * 2.0 / m;
            let d = c.inputs[0]
                .data()
                .iter()
                .zip(target.data())
                .map(|(a, b)| g * (a - b))
                .collect();
            Ok(vec![Some(Tensor::new(target.shape().to_vec(), d)?)])
        }))
    }

    /// Magnitude-difference L1 between a `[2, T, F]` estimate and a fixed reference.
    pub fn tf_l1_const(&mut self, est: Var, reference: &Tensor, mode: TfL1Mode) -> Result<Var> {
        let ev = self.value(est);
        ev.same_shape(reference, "tf l1")?;
        let loss = crate::loss::tf_l1_tensors(reference, ev, mode)?;
        let reference = reference.clone();
        Ok(self.push(Tensor::scalar(loss), &[est], move |c| {
            let n = reference.len() / 2;
            let scale = c.grad.data()[0] / n as f64;
            let (xr, xi) = reference.data().split_at(n);
            let (er, ei) = c.inputs[0].data().split_at(n);
            let sgn = |v: f64| {
                if v > 0.0 {
                    1.0
                } else if v < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            };
            let mut d = vec![0.0; 2 * n];
            for i in 0..n {
                let dr = xr[i].abs() - er[i].abs();
                let di = xi[i].abs() - ei[i].abs();
                let (sr, si) = match mode {
                    TfL1Mode::AsPrinted => {
                        let s = sgn(dr + di);
                        (s, s)
                    }
                    TfL1Mode::PerComponent => (sgn(dr), sgn(di)),
                };
                d[i] = -scale * sr * sgn(er[i]);
                d[n + i] = -scale * si * sgn(ei[i]);
            }
            Ok(vec![Some(Tensor::new(reference.shape().to_vec(), d)?)])
        }))
    }

    /// `Σ x ⊙ r` against a fixed tensor, used to reduce block outputs to a scalar.
    pub fn dot_const(&mut self, x: Var, r: &Tensor) -> Result<Var> {
        let xv = self.value(x);
        xv.same_shape(r, "dot")?;
        let s = xv.data().iter().zip(r.data()).map(|(a, b)| a * b).sum();
        let r = r.clone();
        Ok(self.push(Tensor::scalar(s), &[x], move |c| {
            let g = c.grad.data()[0];
            Ok(vec![Some(r.map(|v| v * g))])
        }))
    }
}

/// Cellwise complex product of two `[2, T, F]` tensors.
pub fn complex_mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    a.same_shape(b, "complex product")?;
    let (ch, _, _) = a.dims3()?;
    if ch != 2 {
        return Err(Error::Shape(format!("complex map needs 2 channels, got {ch}")));
    }
    let n = a.len() / 2;
    let (ar, ai) = a.data().split_at(n);
    let (br, bi) = b.data().split_at(n);
    let mut out = vec![0.0; 2 * n];
    for i in 0..n {
        out[i] = ar[i] * br[i] - ai[i] * bi[i];
        out[n + i] = ar[i] * bi[i] + ai[i] * br[i];
    }
    Tensor::new(a.shape().to_vec(), out)
}
