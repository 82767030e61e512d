//! Property batteries over freshly drawn random models.
//!
//! Each battery returns its worst-case metric; a [`CheckOutcome`] passes when
//! the metric is at most its tolerance. Sabotage swaps every equivariant net
//! for one that adds element-index features to its input.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::{check_primitive, rel_err, Bindings, Graph, PRIMITIVES};
use crate::classifier::{ClassifierModel, ClassifierSpec, Expansion};
use crate::cnf::{basis_probes, log_likelihood, trace_exact, trace_hutchinson, trace_jvp, TraceConfig, LOG_2PI};
use crate::equivariant::{EquivariantNet, LayerSpec, NetSpec, Pool, SetBatch, TimeInjection};
use crate::error::{Error, Result};
use crate::nn::Activation;
use crate::ode::{adjoint_grad, integrate, rk4_graph, roundtrip, Neural, NeuralDynamics, SolverConfig};
use crate::rng::Rng;
use crate::tensor::DenseArray;
use crate::tvae::{TemporalSetSeries, TvaeModel, TvaeSpec};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Flavor {
    DeepsetMean,
    DeepsetMax,
    Attention,
    Concatsquash,
}

impl Flavor {
    pub const ALL: [Flavor; 4] = [Flavor::DeepsetMean, Flavor::DeepsetMax, Flavor::Attention, Flavor::Concatsquash];

    pub fn name(self) -> &'static str {
        match self {
            Flavor::DeepsetMean => "deepset-mean",
            Flavor::DeepsetMax => "deepset-max",
            Flavor::Attention => "attention",
            Flavor::Concatsquash => "concatsquash",
        }
    }

    /// Smooth in the state. Max pooling is not, so it has no forward-mode
    /// tangent and adjoint gradients only agree with backprop away from
    /// argmax switches.
    pub fn is_smooth(self) -> bool {
        self != Flavor::DeepsetMax
    }
}

/// Two-layer net of one flavor with every parameter random.
pub fn random_net(flavor: Flavor, d: usize, rng: &mut Rng, sabotage: bool) -> Result<EquivariantNet> {
    let tanh = Activation::Tanh;
    let id = Activation::Identity;
    let layers = match flavor {
        Flavor::DeepsetMean | Flavor::DeepsetMax => {
            let pool = if flavor == Flavor::DeepsetMax { Pool::Max } else { Pool::Mean };
            vec![
                LayerSpec::DeepSet { width: 8, pool, activation: tanh },
                LayerSpec::DeepSet { width: d, pool, activation: id },
            ]
        }
        Flavor::Attention => vec![
            LayerSpec::Attention { width: 8, hidden: Some(8), heads: 2, activation: tanh },
            LayerSpec::Attention { width: d, hidden: Some(4), heads: 1, activation: id },
        ],
        Flavor::Concatsquash => vec![
            LayerSpec::ConcatSquash { width: 8, activation: tanh },
            LayerSpec::ConcatSquash { width: d, activation: id },
        ],
    };
    let net = EquivariantNet::new("f", NetSpec::new(d, layers).random_last(), rng)?;
    Ok(if sabotage { net.sabotaged() } else { net })
}

fn random_sets(rng: &mut Rng, b: usize, n: usize, d: usize) -> Result<SetBatch> {
    SetBatch::new(rng.normal_array(&[b, n, d]))
}

/// Largest `|solve(P x) - P solve(x)|` over `nets` random nets and `perms`
/// permutations each, with an 8-step RK4 solve over `[0, 1]`.
pub fn ode_equivariance(flavor: Flavor, nets: usize, perms: usize, seed: u64, sabotage: bool) -> Result<f64> {
    let mut rng = Rng::with_stream(seed, 101);
    let solver = SolverConfig::rk4(8);
    let mut worst: f64 = 0.0;
    for _ in 0..nets {
        let net = random_net(flavor, 2, &mut rng, sabotage)?;
        let s = random_sets(&mut rng, 2, 8, 2)?;
        let y1 = SetBatch::new(integrate(&Neural(&net), s.values(), 0.0, 1.0, &solver)?.y1)?;
        for _ in 0..perms {
            let p = rng.permutation(8);
            let yp = integrate(&Neural(&net), s.permute(&p)?.values(), 0.0, 1.0, &solver)?.y1;
            worst = worst.max(yp.max_abs_diff(y1.permute(&p)?.values()));
        }
    }
    Ok(worst)
}

/// Largest change in any set log-likelihood under permutation, over
/// `models` random flows cycling through the flavors with forward-mode
/// traces.
pub fn cnf_invariance(models: usize, perms: usize, seed: u64, sabotage: bool) -> Result<f64> {
    let mut rng = Rng::with_stream(seed, 102);
    let flavors: Vec<Flavor> = Flavor::ALL.into_iter().filter(|f| f.is_smooth()).collect();
    let solver = SolverConfig::dopri5(1e-6, 1e-6);
    let trace = TraceConfig::exact();
    let mut worst: f64 = 0.0;
    for k in 0..models {
        let net = random_net(flavors[k % flavors.len()], 2, &mut rng, sabotage)?;
        let s = random_sets(&mut rng, 2, 6, 2)?;
        let base = log_likelihood(&net, &s, &solver, &trace, None, 0)?;
        for _ in 0..perms {
            let p = rng.permutation(6);
            let lik = log_likelihood(&net, &s.permute(&p)?, &solver, &trace, None, 0)?;
            for (a, b) in lik.logp.iter().zip(&base.logp) {
                worst = worst.max((a - b).abs());
            }
        }
    }
    Ok(worst)
}

/// Largest change in classifier logits under per-set permutations.
pub fn classifier_invariance(models: usize, perms: usize, seed: u64, sabotage: bool) -> Result<f64> {
    let mut rng = Rng::with_stream(seed, 103);
    let mut worst: f64 = 0.0;
    for k in 0..models {
        let spec = ClassifierSpec {
            dim: 2,
            hidden: 6,
            classes: 3,
            expansion: if k % 2 == 0 { Expansion::Stacked } else { Expansion::Affine },
            dynamics: vec![
                LayerSpec::DeepSet { width: 8, pool: Pool::Max, activation: Activation::Tanh },
                LayerSpec::DeepSet { width: 6, pool: Pool::Mean, activation: Activation::Identity },
            ],
            head: vec![5],
            steps: 4,
        };
        let mut m = ClassifierModel::new(spec, &mut rng)?;
        for (_, p) in m.params.iter_mut().chain(m.dynamics.params_mut().iter_mut()) {
            *p = rng.uniform_array(p.shape(), -0.8, 0.8);
        }
        if sabotage {
            m = m.sabotaged();
        }
        let s = random_sets(&mut rng, 3, 9, 2)?;
        let base = m.logits(&s)?;
        for _ in 0..perms {
            let ps: Vec<Vec<usize>> = (0..3).map(|_| rng.permutation(9)).collect();
            worst = worst.max(m.logits(&s.permute_each(&ps)?)?.max_abs_diff(&base));
        }
    }
    Ok(worst)
}

/// Largest change in the temporal VAE's posterior and decoder likelihood
/// when every set of a series is shuffled.
pub fn tvae_invariance(models: usize, seed: u64, sabotage: bool) -> Result<f64> {
    let mut rng = Rng::with_stream(seed, 104);
    let spec = TvaeSpec {
        dim: 2,
        latent: 3,
        embed: 4,
        gru_hidden: 5,
        ode_hidden: 4,
        decoder: vec![
            LayerSpec::ConcatSquash { width: 5, activation: Activation::Tanh },
            LayerSpec::ConcatSquash { width: 2, activation: Activation::Identity },
        ],
        t0: 0.0,
        latent_steps: 4,
        flow_steps: 3,
        decoder_time: true,
        latent_activation: Activation::Tanh,
    };
    let times = [0.0, 0.5, 1.0];
    let solver = SolverConfig::dopri5(1e-6, 1e-6);
    let mut worst: f64 = 0.0;
    for _ in 0..models {
        let mut m = TvaeModel::new(spec.clone(), &mut rng)?;
        for (_, p) in m.params.iter_mut().chain(m.decoder.params_mut().iter_mut()) {
            *p = rng.uniform_array(p.shape(), -0.8, 0.8);
        }
        if sabotage {
            m.decoder = m.decoder.sabotaged();
        }
        let series = TemporalSetSeries::new(times.to_vec(), times.iter().map(|_| rng.normal_array(&[5, 2])).collect())?;
        let perms: Vec<Vec<usize>> = times.iter().map(|_| rng.permutation(5)).collect();
        let shuffled = series.permute_each(&perms)?;
        let (a, b) = (m.encode_series(&series)?, m.encode_series(&shuffled)?);
        for (x, y) in a.mean.iter().chain(&a.std).zip(b.mean.iter().chain(&b.std)) {
            worst = worst.max((x - y).abs());
        }
        let x = SetBatch::new(series.sets[1].clone().reshape(&[1, 5, 2])?)?;
        let xp = SetBatch::new(shuffled.sets[1].clone().reshape(&[1, 5, 2])?)?;
        let la = m.decode_loglik(&x, &a.mean, 0.5, &solver, &TraceConfig::exact(), 0)?;
        let lb = m.decode_loglik(&xp, &a.mean, 0.5, &solver, &TraceConfig::exact(), 0)?;
        worst = worst.max((la[0] - lb[0]).abs());
    }
    Ok(worst)
}

/// Error of a one-dimensional linear set flow against the discrete
/// change of variables. With `dz_i/dt = lambda z_i + gamma mean(z)` the flow
/// map is `z = e^lambda (x - mean x) + e^(lambda + gamma) mean x`, whose
/// log-determinant is `n lambda + gamma`.
pub fn linear_flow_oracle(seed: u64) -> Result<f64> {
    let mut rng = Rng::with_stream(seed, 105);
    let mut worst: f64 = 0.0;
    for _ in 0..5 {
        let (lam, gam) = (rng.uniform_range(-0.8, 0.8), rng.uniform_range(-0.8, 0.8));
        let spec = NetSpec::new(1, vec![LayerSpec::DeepSet { width: 1, pool: Pool::Mean, activation: Activation::Identity }])
            .with_time(TimeInjection::None);
        let mut net = EquivariantNet::new("f", spec, &mut rng)?;
        for (name, v) in [("f.0.lambda", lam), ("f.0.gamma", gam), ("f.0.bias", 0.0)] {
            if let Some(p) = net.params_mut().get_mut(name) {
                *p = DenseArray::from_fn(p.shape(), |_| v);
            }
        }
        let n = 7;
        let s = random_sets(&mut rng, 3, n, 1)?;
        let lik = log_likelihood(&net, &s, &SolverConfig::dopri5(1e-9, 1e-9), &TraceConfig::exact(), None, 0)?;
        for b in 0..3 {
            let x = s.set(b);
            let mean = x.data().iter().sum::<f64>() / n as f64;
            let logdet = n as f64 * lam + gam;
            let lp: f64 = x
                .data()
                .iter()
                .map(|xi| {
                    let z = lam.exp() * (xi - mean) + (lam + gam).exp() * mean;
                    -0.5 * z * z - 0.5 * LOG_2PI
                })
                .sum::<f64>()
                + logdet;
            worst = worst.max((lik.logp[b] - lp).abs());
        }
    }
    Ok(worst)
}

/// Largest forward-then-backward reconstruction error of `net` on `sets`.
pub fn invertibility<N: NeuralDynamics + ?Sized>(net: &N, sets: &SetBatch, solver: &SolverConfig) -> Result<f64> {
    Ok(roundtrip(&Neural(net), sets.values(), 0.0, 1.0, solver)?.max_abs_error)
}

/// Worst roundtrip error at dopri5 tolerance `tol` over random nets of
/// every flavor.
pub fn random_invertibility(nets: usize, tol: f64, seed: u64, sabotage: bool) -> Result<f64> {
    let mut rng = Rng::with_stream(seed, 106);
    let solver = SolverConfig::dopri5(tol, tol);
    let mut worst: f64 = 0.0;
    for k in 0..nets {
        let net = random_net(Flavor::ALL[k % 4], 2, &mut rng, sabotage)?;
        let s = random_sets(&mut rng, 2, 8, 2)?;
        worst = worst.max(invertibility(&net, &s, &solver)?);
    }
    Ok(worst)
}

/// Worst relative error between adjoint gradients (tight dopri5) and
/// backpropagation through an unrolled RK4 solve, for the loss
/// `sum(w * y(1))` on an 8 x 2 set.
pub fn adjoint_vs_backprop(flavor: Flavor, seed: u64, sabotage: bool) -> Result<f64> {
    let mut rng = Rng::with_stream(seed, 107);
    let net = random_net(flavor, 2, &mut rng, sabotage)?;
    let y0 = rng.normal_array(&[1, 8, 2]);
    let w = rng.normal_array(&[1, 8, 2]);
    let mut g = Graph::new();
    let yv = g.input("y");
    let y1 = rk4_graph(&mut g, yv, 0.0, 1.0, 32, |g, y, t| NeuralDynamics::build(&net, g, y, &[1, 8, 2], t));
    let wv = g.constant(w.clone());
    let l = g.mul(y1, wv);
    g.sum_all(l);
    g.forward(&Bindings::new().bind_store(net.params()).bind("y", &y0))?;
    let grads = g.backward(&DenseArray::scalar(1.0))?;
    let bp = g.param_grads(&grads);
    let bp_y0 = g.grad_or_zeros(&grads, yv);
    let adj = adjoint_grad(&net, &y0, 0.0, 1.0, &SolverConfig::dopri5(1e-9, 1e-9), &w)?;
    let mut worst: f64 = 0.0;
    for (name, a) in adj.grad_params.iter() {
        let b = bp.get(name).cloned().unwrap_or_else(|| DenseArray::zeros(a.shape()));
        for (x, y) in a.data().iter().zip(b.data()) {
            worst = worst.max(rel_err(*x, *y));
        }
    }
    for (x, y) in adj.grad_y0.data().iter().zip(bp_y0.data()) {
        worst = worst.max(rel_err(*x, *y));
    }
    Ok(worst)
}

/// Worst relative finite-difference error over every primitive and
/// `seeds` draws each.
pub fn primitive_gradients(seeds: u64, seed: u64) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for prim in PRIMITIVES {
        for k in 0..seeds {
            worst = worst.max(check_primitive(prim, seed.wrapping_mul(1000) + k, f64::INFINITY)?.max_rel_err());
        }
    }
    Ok(worst)
}

/// `|estimate - exact|` for one rademacher probe on `f(z) = a z`, whose
/// Jacobian is diagonal.
pub fn hutchinson_diagonal(seed: u64) -> Result<f64> {
    let mut rng = Rng::with_stream(seed, 108);
    let a = rng.uniform_range(-2.0, 2.0);
    let net = {
        let spec = NetSpec::new(3, vec![LayerSpec::DeepSet { width: 3, pool: Pool::Mean, activation: Activation::Identity }])
            .with_time(TimeInjection::None);
        let mut net = EquivariantNet::new("f", spec, &mut rng)?;
        let p = net.params_mut();
        *p.get_mut("f.0.lambda").expect("lambda") = DenseArray::from_fn(&[3, 3], |k| if k % 4 == 0 { a } else { 0.0 });
        *p.get_mut("f.0.gamma").expect("gamma") = DenseArray::zeros(&[3, 3]);
        net
    };
    let s = random_sets(&mut rng, 2, 4, 3)?;
    let est = trace_hutchinson(&net, &s, 0.0, &TraceConfig::hutchinson(1), &mut rng)?;
    Ok(est.mean.iter().map(|m| (m - 12.0 * a).abs()).fold(0.0, f64::max))
}

/// Distance between a `probes`-sample Hutchinson estimate and the exact
/// trace, in standard errors, for dense random linear set dynamics.
pub fn hutchinson_dense(probes: usize, seed: u64) -> Result<f64> {
    let mut rng = Rng::with_stream(seed, 109);
    let d = 2;
    let spec = NetSpec::new(d, vec![LayerSpec::DeepSet { width: d, pool: Pool::Mean, activation: Activation::Identity }])
        .with_time(TimeInjection::None);
    let mut net = EquivariantNet::new("f", spec, &mut rng)?;
    *net.params_mut().get_mut("f.0.lambda").expect("lambda") = rng.normal_array(&[d, d]);
    *net.params_mut().get_mut("f.0.gamma").expect("gamma") = rng.normal_array(&[d, d]);
    let s = random_sets(&mut rng, 1, 6, d)?;
    let exact = trace_exact(&net, &s, 0.0, 256)?[0];
    let est = trace_hutchinson(&net, &s, 0.0, &TraceConfig::hutchinson(probes), &mut rng)?;
    Ok((est.mean[0] - exact).abs() / est.std_err[0])
}

/// Largest gap between forward-mode and reverse-mode exact traces.
pub fn trace_modes_agree(nets: usize, seed: u64, sabotage: bool) -> Result<f64> {
    let mut rng = Rng::with_stream(seed, 110);
    let flavors: Vec<Flavor> = Flavor::ALL.into_iter().filter(|f| f.is_smooth()).collect();
    let mut worst: f64 = 0.0;
    for k in 0..nets {
        let net = random_net(flavors[k % flavors.len()], 2, &mut rng, sabotage)?;
        let s = random_sets(&mut rng, 2, 6, 2)?;
        let rev = trace_exact(&net, &s, 0.4, 256)?;
        let fwd = trace_jvp(&net, &s, 0.4, None, &basis_probes(s.shape()))?;
        for (a, b) in rev.iter().zip(&fwd) {
            worst = worst.max((a - b).abs());
        }
    }
    Ok(worst)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Suite {
    Equivariance,
    Invariance,
    Invertibility,
    Gradients,
    Trace,
}

impl Suite {
    pub const ALL: [Suite; 5] = [Suite::Equivariance, Suite::Invariance, Suite::Invertibility, Suite::Gradients, Suite::Trace];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Equivariance => "equivariance",
            Suite::Invariance => "invariance",
            Suite::Invertibility => "invertibility",
            Suite::Gradients => "gradients",
            Suite::Trace => "trace",
        }
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Suite::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown suite {s:?}; expected one of equivariance, invariance, invertibility, gradients, trace")))
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct CheckOutcome {
    pub name: String,
    pub metric: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl CheckOutcome {
    pub fn new(name: impl Into<String>, metric: f64, tolerance: f64) -> Self {
        Self { name: name.into(), metric, tolerance, passed: metric <= tolerance }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct SuiteReport {
    pub suite: Suite,
    pub seed: u64,
    pub sabotage: bool,
    pub passed: bool,
    pub checks: Vec<CheckOutcome>,
}

pub fn run_suite(suite: Suite, seed: u64, sabotage: bool) -> Result<SuiteReport> {
    let mut checks = Vec::new();
    match suite {
        Suite::Equivariance => {
            for f in Flavor::ALL {
                checks.push(CheckOutcome::new(format!("ode-solve/{}", f.name()), ode_equivariance(f, 20, 50, seed, sabotage)?, 1e-9));
            }
        }
        Suite::Invariance => {
            checks.push(CheckOutcome::new("cnf-likelihood", cnf_invariance(20, 5, seed, sabotage)?, 1e-9));
            checks.push(CheckOutcome::new("classifier-logits", classifier_invariance(10, 20, seed, sabotage)?, 1e-9));
            checks.push(CheckOutcome::new("tvae-encoder-decoder", tvae_invariance(5, seed, sabotage)?, 1e-9));
        }
        Suite::Invertibility => {
            checks.push(CheckOutcome::new("roundtrip-dopri5-1e-5", random_invertibility(20, 1e-5, seed, sabotage)?, 1e-4));
        }
        Suite::Gradients => {
            checks.push(CheckOutcome::new("primitives-finite-difference", primitive_gradients(5, seed)?, 1e-4));
            for f in Flavor::ALL.into_iter().filter(|f| f.is_smooth()) {
                checks.push(CheckOutcome::new(format!("adjoint-vs-backprop/{}", f.name()), adjoint_vs_backprop(f, seed, sabotage)?, 1e-3));
            }
        }
        Suite::Trace => {
            checks.push(CheckOutcome::new("hutchinson-diagonal-one-probe", hutchinson_diagonal(seed)?, 1e-12));
            checks.push(CheckOutcome::new("hutchinson-1e4-probes-in-std-errs", hutchinson_dense(10_000, seed)?, 3.0));
            checks.push(CheckOutcome::new("forward-vs-reverse-exact", trace_modes_agree(9, seed, sabotage)?, 1e-10));
        }
    }
    let passed = checks.iter().all(|c| c.passed);
    Ok(SuiteReport { suite, seed, sabotage, passed, checks })
}

#[cfg(test)]
mod tests;
