//! Two-dimensions attention: a channel gate from globally pooled statistics,
//! then a spatial gate from channel-pooled maps, each applied multiplicatively.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{evaluate, Conv2d};
use crate::params::{ParamBuilder, ParamStore};
use crate::tensor::Tensor;

/// Channel gate `σ(conv1d(maxpool(E)) + conv1d(avgpool(E)))` with one shared
/// 1-D convolution along the channel axis.
#[derive(Clone, Debug)]
pub struct ChannelAttention {
    /// Stored as a `1×k` 2-D kernel over a `[1, 1, C]` view of the pooled vector.
    pub conv: Conv2d,
}

impl ChannelAttention {
    pub fn new(b: &mut ParamBuilder<'_>, name: &str, kernel: usize) -> Result<Self> {
        Ok(Self {
            conv: Conv2d::new(b, name, 1, 1, (1, kernel), (1, 1))?,
        })
    }

    pub fn gate(&self, g: &mut Graph<'_>, e: Var) -> Result<Var> {
        let c = g.value(e).dims3()?.0;
        let mx = g.global_max_pool(e)?;
        let av = g.global_avg_pool(e)?;
        let mx = g.reshape(mx, &[1, 1, c])?;
        let av = g.reshape(av, &[1, 1, c])?;
        let a = self.conv.forward(g, mx)?;
        let b = self.conv.forward(g, av)?;
        let s = g.add(a, b)?;
        let s = g.reshape(s, &[c])?;
        Ok(g.sigmoid(s))
    }
}

/// Spatial gate `σ(conv2d([maxpool_c(E′); avgpool_c(E′)]))`.
#[derive(Clone, Debug)]
pub struct SpatialAttention {
    pub conv: Conv2d,
}

impl SpatialAttention {
    pub fn new(b: &mut ParamBuilder<'_>, name: &str, kernel: (usize, usize)) -> Result<Self> {
        Ok(Self {
            conv: Conv2d::new(b, name, 2, 1, kernel, (1, 1))?,
        })
    }

    pub fn gate(&self, g: &mut Graph<'_>, e: Var) -> Result<Var> {
        let mx = g.channel_max_pool(e)?;
        let av = g.channel_avg_pool(e)?;
        let stacked = g.concat0(mx, av)?;
        let s = self.conv.forward(g, stacked)?;
        Ok(g.sigmoid(s))
    }
}

#[derive(Clone, Debug)]
pub struct TwoDimAttention {
    pub channel: ChannelAttention,
    pub spatial: SpatialAttention,
}

impl TwoDimAttention {
    pub fn new(
        b: &mut ParamBuilder<'_>,
        name: &str,
        channel_kernel: usize,
        spatial_kernel: (usize, usize),
    ) -> Result<Self> {
        b.scoped(name, |b| {
            Ok(Self {
                channel: ChannelAttention::new(b, "channel", channel_kernel)?,
                spatial: SpatialAttention::new(b, "spatial", spatial_kernel)?,
            })
        })
    }

    pub fn forward(&self, g: &mut Graph<'_>, e: Var) -> Result<Var> {
        let gc = self.channel.gate(g, e)?;
        let e1 = g.mul_channel(e, gc)?;
        let gs = self.spatial.gate(g, e1)?;
        g.mul_spatial(e1, gs)
    }

    /// Channel gate `[C]` for a concrete feature map.
    pub fn channel_gate(&self, store: &ParamStore, e: &Tensor) -> Result<Tensor> {
        evaluate(store, |g| {
            let x = g.constant(e.clone());
            self.channel.gate(g, x)
        })
    }

    /// Spatial gate `[1, T, F]` for a concrete (already channel-gated) map.
    pub fn spatial_gate(&self, store: &ParamStore, e: &Tensor) -> Result<Tensor> {
        evaluate(store, |g| {
            let x = g.constant(e.clone());
            self.spatial.gate(g, x)
        })
    }

    pub fn apply(&self, store: &ParamStore, e: &Tensor) -> Result<Tensor> {
        evaluate(store, |g| {
            let x = g.constant(e.clone());
            self.forward(g, x)
        })
    }
}

/// `E′[c, t, f] = E[c, t, f] · gate[c]`.
pub fn apply_channel_gate(e: &Tensor, gate: &[f64]) -> Result<Tensor> {
    let (c, t, f) = e.dims3()?;
    if gate.len() != c {
        return Err(Error::Shape(format!(
            "channel gate of length {} for {c} channels",
            gate.len()
        )));
    }
    let mut out = e.clone();
    for (row, g) in out.data_mut().chunks_mut(t * f).zip(gate) {
        row.iter_mut().for_each(|v| *v *= g);
    }
    Ok(out)
}

/// `E′′[c, t, f] = E′[c, t, f] · gate[t, f]`.
pub fn apply_spatial_gate(e: &Tensor, gate: &[f64]) -> Result<Tensor> {
    let (_, t, f) = e.dims3()?;
    if gate.len() != t * f {
        return Err(Error::Shape(format!(
            "spatial gate of length {} for a {t}x{f} grid",
            gate.len()
        )));
    }
    let mut out = e.clone();
    for row in out.data_mut().chunks_mut(t * f) {
        for (v, g) in row.iter_mut().zip(gate) {
            *v *= g;
        }
    }
    Ok(out)
}
