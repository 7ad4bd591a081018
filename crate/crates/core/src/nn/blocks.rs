//! Light-weighted and deep connection blocks.
//!
//! A light-weighted connection block (LWCB) is a chain of dilated conv
//! stages where every stage after the first sees the block input concatenated
//! with the previous stage's output. The deep connection block (DCB) runs the
//! LWCB upward, fuses adjacent stages on the way back down, and adds the
//! block input at the bottom.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::ParamBuilder;

use super::ConvNormAct;

fn stage_dilation(stage: usize) -> (usize, usize) {
    (1 << stage, 1)
}

#[derive(Clone, Debug)]
pub struct LightConnBlock {
    pub channels: usize,
    pub stages: Vec<ConvNormAct>,
}

impl LightConnBlock {
    pub fn new(
        b: &mut ParamBuilder<'_>,
        name: &str,
        channels: usize,
        n_stages: usize,
        kernel: (usize, usize),
    ) -> Result<Self> {
        if n_stages == 0 {
            return Err(Error::Config("connection block needs at least one stage".into()));
        }
        b.scoped(name, |b| {
            let stages = (0..n_stages)
                .map(|s| {
                    let in_ch = if s == 0 { channels } else { 2 * channels };
                    ConvNormAct::new(b, &format!("stage{}", s + 1), in_ch, channels, kernel, stage_dilation(s))
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(Self { channels, stages })
        })
    }

    /// Time-axis dilation of each stage.
    pub fn dilations(&self) -> Vec<usize> {
        self.stages.iter().map(|s| s.conv.dilation.0).collect()
    }

    /// Returns every stage output, bottom first; the last one is the top.
    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Vec<Var>> {
        check_channels(g, x, self.channels)?;
        let mut outs = Vec::with_capacity(self.stages.len());
        for (s, stage) in self.stages.iter().enumerate() {
            let input = if s == 0 {
                x
            } else {
                g.concat0(x, outs[s - 1])?
            };
            outs.push(stage.forward(g, input)?);
        }
        Ok(outs)
    }
}

#[derive(Clone, Debug)]
pub struct DeepConnBlock {
    pub up: LightConnBlock,
    /// `fuse[s]` merges stage `s` with the fused result from above it.
    pub fuse: Vec<ConvNormAct>,
}

impl DeepConnBlock {
    pub fn new(
        b: &mut ParamBuilder<'_>,
        name: &str,
        channels: usize,
        n_stages: usize,
        kernel: (usize, usize),
    ) -> Result<Self> {
        b.scoped(name, |b| {
            let up = LightConnBlock::new(b, "lwcb", channels, n_stages, kernel)?;
            let fuse = (0..n_stages - 1)
                .map(|s| ConvNormAct::new(b, &format!("fuse{}", s + 1), 2 * channels, channels, (1, 1), (1, 1)))
                .collect::<Result<Vec<_>>>()?;
            Ok(Self { up, fuse })
        })
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let ys = self.up.forward(g, x)?;
        let mut z = *ys.last().expect("at least one stage");
        for s in (0..ys.len() - 1).rev() {
            let cat = g.concat0(ys[s], z)?;
            z = self.fuse[s].forward(g, cat)?;
        }
        g.add(z, x)
    }
}

/// Sequential dilated conv stages with no cross connections; stands in for
/// the DCB in ablations.
#[derive(Clone, Debug)]
pub struct PlainConvStack {
    pub layers: Vec<ConvNormAct>,
}

impl PlainConvStack {
    pub fn new(
        b: &mut ParamBuilder<'_>,
        name: &str,
        channels: usize,
        n_stages: usize,
        kernel: (usize, usize),
    ) -> Result<Self> {
        b.scoped(name, |b| {
            let layers = (0..n_stages)
                .map(|s| ConvNormAct::new(b, &format!("stage{}", s + 1), channels, channels, kernel, stage_dilation(s)))
                .collect::<Result<Vec<_>>>()?;
            Ok(Self { layers })
        })
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        self.layers.iter().try_fold(x, |h, l| l.forward(g, h))
    }
}

/// Feature extractor used by the encoder and decoder.
#[derive(Clone, Debug)]
pub enum Backbone {
    Deep(DeepConnBlock),
    Plain(PlainConvStack),
}

impl Backbone {
    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        match self {
            Backbone::Deep(b) => b.forward(g, x),
            Backbone::Plain(b) => b.forward(g, x),
        }
    }
}

fn check_channels(g: &Graph<'_>, x: Var, channels: usize) -> Result<()> {
    let c = g.value(x).shape().first().copied().unwrap_or(0);
    if c != channels {
        return Err(Error::Shape(format!(
            "block expects {channels} channels, got {c}"
        )));
    }
    Ok(())
}

/// Trainable scalars of an LWCB: first stage `C→C`, later stages `2C→C`, each
/// with layer-norm affine and one SMU `μ`.
pub fn lwcb_param_count(channels: usize, kernel: (usize, usize), stages: usize) -> usize {
    (0..stages)
        .map(|s| {
            let in_ch = if s == 0 { channels } else { 2 * channels };
            ConvNormAct::param_count(in_ch, channels, kernel)
        })
        .sum()
}

/// Trainable scalars of a DCB: its LWCB plus `S − 1` pointwise fusions.
pub fn dcb_param_count(channels: usize, kernel: (usize, usize), stages: usize) -> usize {
    lwcb_param_count(channels, kernel, stages)
        + stages.saturating_sub(1) * ConvNormAct::param_count(2 * channels, channels, (1, 1))
}
