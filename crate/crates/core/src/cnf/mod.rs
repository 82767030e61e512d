//! Continuous normalizing flows over sets.
//!
//! The set state `z` (`n * d` entries) and a per-set log-density accumulator
//! are integrated jointly from flow time 0 to 1, with the accumulator's
//! derivative equal to the Jacobian trace. The stored quantity is
//!
//! ```text
//! log p(x) = log N(z(1); 0, I) + int_0^1 Tr(df/dz) dt
//! ```
//!
//! The base density is i.i.d. standard normal over elements, so with
//! equivariant dynamics the likelihood is exchangeable.

mod train;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Bindings, Graph, Var};
use crate::equivariant::{Conditioned, EquivariantNet, SetBatch};
use crate::error::{Error, Result};
use crate::ode::{integrate, Dynamics, Neural, NeuralDynamics, SolverConfig, STATE};
use crate::rng::Rng;
use crate::tensor::DenseArray;

pub use train::{batch_loss, build_log_likelihood, train_cnf, CnfEpoch, CnfReport, CnfTrainConfig};

pub const LOG_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TraceMode {
    Exact,
    Hutchinson,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProbeKind {
    #[default]
    Rademacher,
    Gaussian,
}

fn one() -> usize {
    1
}

fn default_cap() -> usize {
    256
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceConfig {
    pub mode: TraceMode,
    #[serde(default)]
    pub probe: ProbeKind,
    #[serde(default = "one")]
    pub probes: usize,
    /// Largest `n * d` for which the exact trace is allowed.
    #[serde(default = "default_cap")]
    pub exact_cap: usize,
}

impl TraceConfig {
    pub fn exact() -> Self {
        Self {
            mode: TraceMode::Exact,
            probe: ProbeKind::Rademacher,
            probes: 1,
            exact_cap: default_cap(),
        }
    }

    pub fn hutchinson(probes: usize) -> Self {
        Self {
            mode: TraceMode::Hutchinson,
            probe: ProbeKind::Rademacher,
            probes,
            exact_cap: default_cap(),
        }
    }

    /// Exact trace for `n * d <= 256`, otherwise 100 Rademacher probes.
    pub fn for_eval(n: usize, d: usize) -> Self {
        if n * d <= default_cap() {
            Self::exact()
        } else {
            Self::hutchinson(100)
        }
    }

    pub fn validate(&self, n: usize, d: usize) -> Result<()> {
        match self.mode {
            TraceMode::Exact if n * d > self.exact_cap => Err(Error::TraceBudget {
                size: n * d,
                cap: self.exact_cap,
            }),
            TraceMode::Hutchinson if self.probes == 0 => {
                Err(Error::InvalidArgument("hutchinson trace needs at least one probe".into()))
            }
            _ => Ok(()),
        }
    }

    /// Probe stack `(P, batch, n, d)` and the factor that turns
    /// `sum_p v_p^T J v_p` into the trace estimate.
    pub fn probes(&self, shape: [usize; 3], rng: &mut Rng) -> Result<(DenseArray, f64)> {
        self.validate(shape[1], shape[2])?;
        Ok(match self.mode {
            TraceMode::Exact => (basis_probes(shape), 1.0),
            TraceMode::Hutchinson => (
                random_probes(self.probe, self.probes, shape, rng),
                1.0 / self.probes as f64,
            ),
        })
    }
}

/// One-hot probes over the flattened `(n, d)` state, shared by every set.
pub fn basis_probes(shape: [usize; 3]) -> DenseArray {
    let [b, n, d] = shape;
    let m = n * d;
    let mut v = DenseArray::zeros(&[m, b, n, d]);
    let data = v.data_mut();
    for k in 0..m {
        for bi in 0..b {
            data[(k * b + bi) * m + k] = 1.0;
        }
    }
    v
}

pub fn random_probes(kind: ProbeKind, count: usize, shape: [usize; 3], rng: &mut Rng) -> DenseArray {
    let s = [count, shape[0], shape[1], shape[2]];
    match kind {
        ProbeKind::Rademacher => rng.rademacher_array(&s),
        ProbeKind::Gaussian => rng.normal_array(&s),
    }
}

/// `sum_i log N(z_i; 0, I)` per set.
pub fn base_log_density(z: &SetBatch) -> Vec<f64> {
    let m = z.n() * z.d();
    z.values()
        .data()
        .chunks(m)
        .map(|c| -0.5 * c.iter().map(|v| v * v).sum::<f64>() - 0.5 * m as f64 * LOG_2PI)
        .collect()
}

/// Condition vectors `(batch, c)` and the time input of a conditional flow.
#[derive(Clone, Copy, Debug)]
pub struct Condition<'a> {
    pub cond: &'a DenseArray,
    pub t: f64,
}

impl<'a> Condition<'a> {
    fn row(&self, b: usize) -> DenseArray {
        let c = self.cond.shape()[1];
        DenseArray::from_parts(vec![1, c], self.cond.data()[b * c..(b + 1) * c].to_vec())
    }
}

/// Dynamics output `dz` and the per-set sum `sum_p v_p^T (df/dz) v_p`.
#[allow(clippy::too_many_arguments)]
pub fn build_flow_jvp(
    g: &mut Graph,
    net: &EquivariantNet,
    z: Var,
    probes: Var,
    shape: [usize; 3],
    count: usize,
    s: f64,
    cond: Option<(Var, f64)>,
) -> Result<(Var, Var)> {
    let (t, c) = match cond {
        Some((c, t)) => (t, Some(c)),
        None => (s, None),
    };
    let (dz, jv) = net.build_jvp(g, z, probes, shape, count, t, c)?;
    let vjv = g.mul(jv, probes);
    let r = g.sum(vjv, -1, false);
    let r = g.sum(r, -1, false);
    let tr = g.sum(r, 0, false);
    Ok((dz, tr))
}

/// `sum_p v_p^T J v_p` per set, computed with forward-mode tangents.
pub fn trace_jvp(
    net: &EquivariantNet,
    s: &SetBatch,
    t: f64,
    cond: Option<Condition>,
    probes: &DenseArray,
) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let z = g.input("z");
    let v = g.input("v");
    let c = cond.map(|c| (g.input("cond"), c.t));
    let (_, tr) = build_flow_jvp(&mut g, net, z, v, s.shape(), probes.shape()[0], t, c)?;
    let mut b = Bindings::new().bind_store(net.params()).bind("z", s.values()).bind("v", probes);
    if let Some(c) = &cond {
        b.insert("cond", c.cond);
    }
    g.forward(&b)?;
    Ok(g.value(tr).data().to_vec())
}

fn vjp_graph<N: NeuralDynamics + ?Sized>(dynamics: &N, s: &SetBatch, t: f64) -> Result<(Graph, Var)> {
    let mut g = Graph::new();
    let y = g.input(STATE);
    let out = dynamics.build(&mut g, y, &s.shape(), t);
    g.forward(&Bindings::new().bind_store(dynamics.params()).bind(STATE, s.values()))?;
    Ok((g, out))
}

/// Exact trace per set from `n * d` reverse-mode passes, one Jacobian row
/// each.
pub fn trace_exact<N: NeuralDynamics + ?Sized>(dynamics: &N, s: &SetBatch, t: f64, cap: usize) -> Result<Vec<f64>> {
    let [b, n, d] = s.shape();
    let m = n * d;
    if m > cap {
        return Err(Error::TraceBudget { size: m, cap });
    }
    let (g, out) = vjp_graph(dynamics, s, t)?;
    let y = *g.inputs().get(STATE).expect("state input");
    let mut tr = vec![0.0; b];
    for k in 0..m {
        let seed = DenseArray::from_fn(&[b, n, d], |i| if i % m == k { 1.0 } else { 0.0 });
        let grads = g.backward_from(&[(out, seed)])?;
        let row = g.grad_or_zeros(&grads, y);
        for (bi, acc) in tr.iter_mut().enumerate() {
            *acc += row.data()[bi * m + k];
        }
    }
    Ok(tr)
}

#[derive(Clone, Debug)]
pub struct TraceEstimate {
    pub mean: Vec<f64>,
    pub std_err: Vec<f64>,
}

/// Hutchinson estimate `mean_p v_p^T J v_p` per set, one reverse-mode pass
/// per probe.
pub fn trace_hutchinson<N: NeuralDynamics + ?Sized>(
    dynamics: &N,
    s: &SetBatch,
    t: f64,
    cfg: &TraceConfig,
    rng: &mut Rng,
) -> Result<TraceEstimate> {
    if cfg.mode != TraceMode::Hutchinson {
        return Err(Error::InvalidArgument("trace_hutchinson needs a hutchinson config".into()));
    }
    cfg.validate(s.n(), s.d())?;
    let [b, n, d] = s.shape();
    let m = n * d;
    let (g, out) = vjp_graph(dynamics, s, t)?;
    let y = *g.inputs().get(STATE).expect("state input");
    let mut sum = vec![0.0; b];
    let mut sq = vec![0.0; b];
    for _ in 0..cfg.probes {
        let v = random_probes(cfg.probe, 1, [b, n, d], rng).reshape(&[b, n, d])?;
        let grads = g.backward_from(&[(out, v.clone())])?;
        let vj = g.grad_or_zeros(&grads, y);
        for bi in 0..b {
            let r = bi * m..(bi + 1) * m;
            let e: f64 = vj.data()[r.clone()].iter().zip(&v.data()[r]).map(|(a, b)| a * b).sum();
            sum[bi] += e;
            sq[bi] += e * e;
        }
    }
    let p = cfg.probes as f64;
    let mean: Vec<f64> = sum.iter().map(|s| s / p).collect();
    let std_err = sq
        .iter()
        .zip(&mean)
        .map(|(q, mu)| {
            if cfg.probes < 2 {
                f64::NAN
            } else {
                ((q / p - mu * mu).max(0.0) * p / (p - 1.0) / p).sqrt()
            }
        })
        .collect();
    Ok(TraceEstimate { mean, std_err })
}

/// Augmented single-set dynamics over `[z (n*d), accumulator]`.
struct FlowAug<'a> {
    net: &'a EquivariantNet,
    n: usize,
    d: usize,
    probes: DenseArray,
    scale: f64,
    cond: Option<(DenseArray, f64)>,
}

impl Dynamics for FlowAug<'_> {
    fn eval(&self, s: f64, y: &DenseArray) -> Result<DenseArray> {
        let m = self.n * self.d;
        let z = DenseArray::from_parts(vec![1, self.n, self.d], y.data()[..m].to_vec());
        let mut g = Graph::new();
        let zv = g.input("z");
        let pv = g.input("v");
        let c = self.cond.as_ref().map(|(_, t)| (g.input("cond"), *t));
        let (dz, tr) = build_flow_jvp(&mut g, self.net, zv, pv, [1, self.n, self.d], self.probes.shape()[0], s, c)?;
        let mut b = Bindings::new()
            .bind_store(self.net.params())
            .bind("z", &z)
            .bind("v", &self.probes);
        if let Some((cv, _)) = &self.cond {
            b.insert("cond", cv);
        }
        g.forward(&b)?;
        let mut out = Vec::with_capacity(m + 1);
        out.extend_from_slice(g.value(dz).data());
        out.push(self.scale * g.value(tr).data()[0]);
        Ok(DenseArray::from_parts(vec![m + 1], out))
    }
}

#[derive(Clone, Debug)]
pub struct Likelihood {
    /// `log p(x)` per set.
    pub logp: Vec<f64>,
    /// Per-point log-likelihood: total log-density over total point count.
    pub ppll: f64,
    /// Final flow states.
    pub z1: SetBatch,
}

/// Log-likelihood of every set, each solved independently so results do not
/// depend on batch composition. Hutchinson probes for set `b` come from
/// stream `b` of `seed`.
pub fn log_likelihood(
    net: &EquivariantNet,
    sets: &SetBatch,
    solver: &SolverConfig,
    trace: &TraceConfig,
    cond: Option<Condition>,
    seed: u64,
) -> Result<Likelihood> {
    let [batch, n, d] = sets.shape();
    trace.validate(n, d)?;
    if let Some(c) = &cond {
        if c.cond.ndim() != 2 || c.cond.shape()[0] != batch {
            return Err(Error::Shape(format!(
                "condition shape {:?} does not fit a batch of {batch}",
                c.cond.shape()
            )));
        }
    }
    let m = n * d;
    let per_set = (0..batch)
        .into_par_iter()
        .map(|b| -> Result<(f64, Vec<f64>)> {
            let mut rng = Rng::with_stream(seed, b as u64);
            let (probes, scale) = trace.probes([1, n, d], &mut rng)?;
            let aug = FlowAug {
                net,
                n,
                d,
                probes,
                scale,
                cond: cond.map(|c| (c.row(b), c.t)),
            };
            let mut y0 = sets.set(b).into_data();
            y0.push(0.0);
            let r = integrate(&aug, &DenseArray::from_parts(vec![m + 1], y0), 0.0, 1.0, solver)?;
            let z1 = r.y1.data()[..m].to_vec();
            let acc = r.y1.data()[m];
            let base = -0.5 * z1.iter().map(|v| v * v).sum::<f64>() - 0.5 * m as f64 * LOG_2PI;
            let lp = base + acc;
            if !lp.is_finite() {
                return Err(Error::NonFinite(format!("log-likelihood of set {b}")));
            }
            Ok((lp, z1))
        })
        .collect::<Result<Vec<_>>>()?;
    let logp: Vec<f64> = per_set.iter().map(|p| p.0).collect();
    let z: Vec<f64> = per_set.into_iter().flat_map(|p| p.1).collect();
    let ppll = logp.iter().sum::<f64>() / (batch * n) as f64;
    Ok(Likelihood {
        logp,
        ppll,
        z1: SetBatch::new(DenseArray::from_parts(vec![batch, n, d], z))?,
    })
}

/// Draws `count` sets of `n` standard-normal elements and integrates them
/// from flow time 1 back to 0.
pub fn sample(
    net: &EquivariantNet,
    n: usize,
    count: usize,
    rng: &mut Rng,
    solver: &SolverConfig,
    cond: Option<Condition>,
) -> Result<SetBatch> {
    let d = net.spec.dim;
    if n == 0 || count == 0 {
        return Err(Error::InvalidArgument("sample needs n >= 1 and count >= 1".into()));
    }
    let base = rng.normal_array(&[count, n, d]);
    let base = SetBatch::new(base)?;
    invert(net, &base, solver, cond)
}

/// Maps base states back to data space, one set at a time.
pub fn invert(net: &EquivariantNet, base: &SetBatch, solver: &SolverConfig, cond: Option<Condition>) -> Result<SetBatch> {
    let [count, n, d] = base.shape();
    let sets = (0..count)
        .into_par_iter()
        .map(|b| -> Result<Vec<f64>> {
            let y1 = base.set(b).reshape(&[1, n, d])?;
            let r = match cond {
                Some(c) => {
                    let row = c.row(b);
                    let dyn_c = Conditioned { net, cond: &row, t: c.t };
                    integrate(&Neural(&dyn_c), &y1, 1.0, 0.0, solver)?
                }
                None => integrate(&Neural(net), &y1, 1.0, 0.0, solver)?,
            };
            Ok(r.y1.into_data())
        })
        .collect::<Result<Vec<_>>>()?;
    SetBatch::new(DenseArray::from_parts(vec![count, n, d], sets.concat()))
}

#[cfg(test)]
mod tests;
