//! Central finite-difference check of reverse-mode gradients.

use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheckConfig {
    pub step: f64,
    pub tolerance: f64,
    /// Fraction of each array's entries to probe; at least one per array.
    pub sample_fraction: f64,
    /// Below this magnitude errors are measured against the floor instead.
    pub abs_floor: f64,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tolerance: 1e-3,
            sample_fraction: 1.0,
            abs_floor: 1e-6,
            seed: 0,
        }
    }
}

/// Largest error seen within one parameter array (or input).
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GroupResult {
    pub group: String,
    pub checked: usize,
    pub max_rel_err: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Offender {
    pub group: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub groups: Vec<GroupResult>,
    /// The worst probes overall, largest error first.
    pub worst: Vec<Offender>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.groups.iter().map(|g| g.max_rel_err).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_err() < self.tolerance
    }

    pub fn summary(&self) -> String {
        let mut s = format!(
            "max rel err {:.3e} (tolerance {:.0e}) over {} groups",
            self.max_rel_err(),
            self.tolerance,
            self.groups.len()
        );
        for o in self.worst.iter().take(3) {
            s.push_str(&format!(
                "\n  {}[{}]: analytic {:.6e} numeric {:.6e} rel {:.3e}",
                o.group, o.index, o.analytic, o.numeric, o.rel_err
            ));
        }
        s
    }
}

const WORST_KEPT: usize = 8;

/// Analytic gradients of a scalarized function: one entry per store array
/// (absent when frozen or unused) followed by one per input.
pub struct Analytic {
    pub params: BTreeMap<usize, Tensor>,
    pub inputs: Vec<Tensor>,
}

/// Evaluates `f` and reduces its output to a scalar with a fixed random
/// projection so every output element contributes.
fn scalarize<'s, F>(store: &'s ParamStore, inputs: &[Tensor], f: &F, proj_seed: u64) -> Result<(Graph<'s>, Vec<Var>, Var)>
where
    F: Fn(&mut Graph<'_>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new(store);
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let out = if g.value(out).len() == 1 {
        out
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(proj_seed);
        let r = Tensor::from_fn(g.value(out).shape(), |_| rng.gen_range(-1.0..1.0));
        g.dot_const(out, &r)?
    };
    Ok((g, vars, out))
}

fn scalar_value<F>(store: &ParamStore, inputs: &[Tensor], f: &F, proj_seed: u64) -> Result<f64>
where
    F: Fn(&mut Graph<'_>, &[Var]) -> Result<Var>,
{
    let (g, _, out) = scalarize(store, inputs, f, proj_seed)?;
    Ok(g.value(out).data()[0])
}

pub fn analytic_gradients<F>(store: &ParamStore, inputs: &[Tensor], f: &F, cfg: &GradCheckConfig) -> Result<Analytic>
where
    F: Fn(&mut Graph<'_>, &[Var]) -> Result<Var>,
{
    let (g, vars, out) = scalarize(store, inputs, f, cfg.seed ^ 0x9e37_79b9)?;
    let grads = g.backward(out)?;
    let params = grads.params().map(|(id, t)| (id.index(), t.clone())).collect();
    let inputs = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| grads.get(*v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();
    Ok(Analytic { params, inputs })
}

/// Compares `analytic` against central differences of `f`. Frozen arrays are
/// skipped; trainable arrays the function never touches must have zero
/// numeric gradient.
pub fn compare<F>(
    store: &mut ParamStore,
    inputs: &[Tensor],
    f: &F,
    analytic: &Analytic,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<'_>, &[Var]) -> Result<Var>,
{
    let proj = cfg.seed ^ 0x9e37_79b9;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut groups = Vec::new();
    let mut worst: Vec<Offender> = Vec::new();
    let h = cfg.step;

    let mut record = |group: &str, probes: Vec<(usize, f64, f64)>, groups: &mut Vec<GroupResult>| {
        let mut max_err: f64 = 0.0;
        for (index, a, n) in &probes {
            let denom = a.abs().max(n.abs()).max(cfg.abs_floor);
            let rel = (a - n).abs() / denom;
            let rel = if rel.is_nan() { f64::INFINITY } else { rel };
            max_err = max_err.max(rel);
            worst.push(Offender {
                group: group.to_string(),
                index: *index,
                analytic: *a,
                numeric: *n,
                rel_err: rel,
            });
        }
        worst.sort_by(|x, y| y.rel_err.total_cmp(&x.rel_err));
        worst.truncate(WORST_KEPT);
        groups.push(GroupResult {
            group: group.to_string(),
            checked: probes.len(),
            max_rel_err: max_err,
        });
    };

    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        if !store.get(id).trainable {
            continue;
        }
        let name = store.get(id).name.clone();
        let len = store.value(id).len();
        let picks = pick(&mut rng, len, cfg.sample_fraction);
        let mut probes = Vec::with_capacity(picks.len());
        for j in picks {
            let orig = store.value(id).data()[j];
            store.value_mut(id).data_mut()[j] = orig + h;
            let up = scalar_value(store, inputs, f, proj)?;
            store.value_mut(id).data_mut()[j] = orig - h;
            let down = scalar_value(store, inputs, f, proj)?;
            store.value_mut(id).data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic.params.get(&id.index()).map_or(0.0, |t| t.data()[j]);
            probes.push((j, a, numeric));
        }
        record(&name, probes, &mut groups);
    }

    let mut shifted = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        let picks = pick(&mut rng, input.len(), cfg.sample_fraction);
        let mut probes = Vec::with_capacity(picks.len());
        for j in picks {
            let orig = input.data()[j];
            shifted[i].data_mut()[j] = orig + h;
            let up = scalar_value(store, &shifted, f, proj)?;
            shifted[i].data_mut()[j] = orig - h;
            let down = scalar_value(store, &shifted, f, proj)?;
            shifted[i].data_mut()[j] = orig;
            probes.push((j, analytic.inputs[i].data()[j], (up - down) / (2.0 * h)));
        }
        record(&format!("input{i}"), probes, &mut groups);
    }

    Ok(GradCheckReport {
        tolerance: cfg.tolerance,
        groups,
        worst,
    })
}

fn pick(rng: &mut ChaCha8Rng, len: usize, fraction: f64) -> Vec<usize> {
    if len == 0 {
        return Vec::new();
    }
    if fraction >= 1.0 {
        return (0..len).collect();
    }
    let k = ((len as f64 * fraction).ceil() as usize).clamp(1, len);
    let mut v = sample(rng, len, k).into_vec();
    v.sort_unstable();
    v
}

/// Runs the full check: analytic gradients, then central differences.
pub fn grad_check<F>(store: &mut ParamStore, inputs: &[Tensor], f: F, cfg: &GradCheckConfig) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<'_>, &[Var]) -> Result<Var>,
{
    if !(cfg.step > 0.0) || !(cfg.tolerance > 0.0) {
        return Err(Error::Config("grad check step and tolerance must be positive".into()));
    }
    let analytic = analytic_gradients(store, inputs, &f, cfg)?;
    compare(store, inputs, &f, &analytic, cfg)
}
