//! Continuous-time VAE for sequences of sets.
//!
//! An invariant encoder reads the series backwards in time into a Gaussian
//! posterior over the initial latent state, a latent ODE carries that state
//! to every requested time, and a conditional set flow scores or samples
//! the set at each time given the latent state there.

mod train;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Bindings, Graph, ParamStore, Var};
use crate::cnf::{invert, log_likelihood, Condition, TraceConfig};
use crate::equivariant::{EquivariantNet, LayerSpec, NetSpec, SetBatch, TimeInjection};
use crate::error::{Error, Result};
use crate::nn::{Activation, Gru, Linear, Mlp};
use crate::ode::{integrate, Neural, NeuralDynamics, SolverConfig};
use crate::rng::Rng;
use crate::tensor::DenseArray;

pub use train::{elbo, elbo_with_noise, train_tvae, ElboParts, Noise, TvaeEpoch, TvaeReport, TvaeTrainConfig};

/// Sets observed at strictly increasing times.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TemporalSetSeries {
    pub times: Vec<f64>,
    /// One `(n_i, d)` array per time.
    pub sets: Vec<DenseArray>,
}

impl TemporalSetSeries {
    pub fn new(times: Vec<f64>, sets: Vec<DenseArray>) -> Result<Self> {
        if times.is_empty() {
            return Err(Error::InvalidArgument("empty series".into()));
        }
        if times.len() != sets.len() {
            return Err(Error::Shape(format!("{} times for {} sets", times.len(), sets.len())));
        }
        if times.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidArgument("series times must be strictly increasing".into()));
        }
        let d = sets[0].shape().get(1).copied().unwrap_or(0);
        if sets.iter().any(|s| s.ndim() != 2 || s.shape()[1] != d || s.shape()[0] == 0) {
            return Err(Error::Shape("every set in a series needs shape (n, d) with a shared d".into()));
        }
        Ok(Self { times, sets })
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn d(&self) -> usize {
        self.sets[0].shape()[1]
    }

    /// Same series with each set's elements reordered by `perms[i]`.
    pub fn permute_each(&self, perms: &[Vec<usize>]) -> Result<Self> {
        let sets = self
            .sets
            .iter()
            .zip(perms)
            .map(|(s, p)| {
                let n = s.shape()[0];
                s.clone().reshape(&[1, n, self.d()])?.permute_axis1(p)?.reshape(&[n, self.d()])
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(self.times.clone(), sets)
    }
}

fn four() -> usize {
    4
}

fn six() -> usize {
    6
}

fn yes() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TvaeSpec {
    pub dim: usize,
    pub latent: usize,
    /// Width of the per-element encoder net and of the pooled embedding.
    pub embed: usize,
    pub gru_hidden: usize,
    pub ode_hidden: usize,
    /// Concatsquash decoder layers; the last must have width `dim`.
    pub decoder: Vec<LayerSpec>,
    /// Time of the initial latent state.
    #[serde(default)]
    pub t0: f64,
    /// RK4 steps per unit time for the latent ODE during training.
    #[serde(default = "four")]
    pub latent_steps: usize,
    /// RK4 steps of the decoder flow during training.
    #[serde(default = "six")]
    pub flow_steps: usize,
    /// Feed physical time to the decoder layers alongside the latent state.
    #[serde(default = "yes")]
    pub decoder_time: bool,
    #[serde(default)]
    pub latent_activation: Activation,
}

#[derive(Clone, Debug)]
pub struct TvaeModel {
    pub spec: TvaeSpec,
    /// Encoder and latent ODE parameters.
    pub params: ParamStore,
    pub decoder: EquivariantNet,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PosteriorParams {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LatentTrajectory {
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
}

const DEC: &str = "dec";

impl TvaeModel {
    pub fn new(spec: TvaeSpec, rng: &mut Rng) -> Result<Self> {
        if spec.dim == 0 || spec.latent == 0 || spec.embed == 0 || spec.gru_hidden == 0 || spec.ode_hidden == 0 {
            return Err(Error::InvalidArgument("tvae widths must be positive".into()));
        }
        if spec.latent_steps == 0 || spec.flow_steps == 0 {
            return Err(Error::InvalidArgument("tvae step counts must be positive".into()));
        }
        if !matches!(spec.decoder.first(), Some(LayerSpec::ConcatSquash { .. })) {
            return Err(Error::InvalidArgument("the decoder must start with a concatsquash layer".into()));
        }
        let net = NetSpec::new(spec.dim, spec.decoder.clone())
            .with_cond(spec.latent)
            .with_time(TimeInjection::None);
        if net.out_dim() != spec.dim {
            return Err(Error::Shape(format!("decoder ends at width {}, expected {}", net.out_dim(), spec.dim)));
        }
        let decoder = EquivariantNet::new(DEC, net, rng)?;
        if !decoder.supports_jvp() {
            return Err(Error::Unsupported("decoder layers need forward-mode tangents".into()));
        }
        let mut params = ParamStore::new();
        element_net(&spec).init(&mut params, rng, false);
        gru(&spec).init(&mut params, rng);
        posterior_head(&spec).init(&mut params, rng);
        latent_net(&spec).init(&mut params, rng, true);
        Ok(Self { spec, params, decoder })
    }

    pub fn all_params(&self) -> ParamStore {
        let mut all = self.params.clone();
        all.extend(self.decoder.params().clone()).expect("disjoint names");
        all
    }

    pub fn from_params(spec: TvaeSpec, all: ParamStore) -> Result<Self> {
        let mut model = Self::new(spec, &mut Rng::new(0))?;
        let mut own = ParamStore::new();
        let mut dec = ParamStore::new();
        for (k, v) in all.iter() {
            if k.starts_with(&format!("{DEC}.")) {
                dec.insert(k.clone(), v.clone());
            } else {
                own.insert(k.clone(), v.clone());
            }
        }
        for (k, v) in model.params.iter() {
            match own.get(k) {
                Some(p) if p.shape() == v.shape() => {}
                _ => return Err(Error::Checkpoint(format!("missing or misshapen parameter {k}"))),
            }
        }
        model.params = own;
        model.decoder = model.decoder.with_params(dec)?;
        Ok(model)
    }

    /// Decoder time input for physical time `t`.
    pub fn decoder_t(&self, t: f64) -> f64 {
        if self.spec.decoder_time {
            t
        } else {
            0.0
        }
    }

    /// Posterior mean and log-std nodes, each `(batch, latent)`, for sets
    /// given per time as `(batch, n_i, d)` inputs.
    pub(crate) fn build_encoder(&self, g: &mut Graph, xs: &[(Var, [usize; 3])], times: &[f64]) -> (Var, Var) {
        let b = xs[0].1[0];
        let phi = element_net(&self.spec);
        let cell = gru(&self.spec);
        let mut h = g.constant(DenseArray::zeros(&[b, self.spec.gru_hidden]));
        for i in (0..xs.len()).rev() {
            let e = phi.build(g, xs[i].0);
            let e = g.tanh(e);
            let e = g.max(e, 1, false);
            let dt = if i + 1 < times.len() { times[i + 1] - times[i] } else { 0.0 };
            let dtc = g.constant(DenseArray::full(&[b, 1], dt));
            let inp = g.concat(&[e, dtc], -1);
            h = cell.step(g, inp, h);
        }
        let out = posterior_head(&self.spec).build(g, h);
        let l = self.spec.latent;
        (g.slice(out, -1, 0, l), g.slice(out, -1, l, l))
    }

    /// Latent ODE right-hand side.
    pub(crate) fn build_latent_rhs(&self, g: &mut Graph, z: Var) -> Var {
        latent_net(&self.spec).build(g, z)
    }

    pub fn encode_series(&self, series: &TemporalSetSeries) -> Result<PosteriorParams> {
        if series.d() != self.spec.dim {
            return Err(Error::Shape(format!("series d {} vs model d {}", series.d(), self.spec.dim)));
        }
        let mut g = Graph::new();
        let names: Vec<String> = (0..series.len()).map(|i| format!("x{i}")).collect();
        let xs: Vec<(Var, [usize; 3])> = series
            .sets
            .iter()
            .zip(&names)
            .map(|(s, nm)| (g.input(nm), [1, s.shape()[0], s.shape()[1]]))
            .collect();
        let (mean, logstd) = self.build_encoder(&mut g, &xs, &series.times);
        let std = g.exp(logstd);
        let arrays: Vec<DenseArray> = series.sets.iter().map(|s| s.clone().reshape(&[1, s.shape()[0], s.shape()[1]])).collect::<Result<_>>()?;
        let mut b = Bindings::new().bind_store(&self.params);
        for (nm, a) in names.iter().zip(&arrays) {
            b.insert(nm, a);
        }
        g.forward(&b)?;
        let post = PosteriorParams { mean: g.value(mean).data().to_vec(), std: g.value(std).data().to_vec() };
        if post.mean.iter().chain(&post.std).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("posterior parameters".into()));
        }
        Ok(post)
    }

    /// Latent states at `times`, each integrated from the initial state at
    /// `spec.t0`.
    pub fn latent_transition(&self, z0: &[f64], times: &[f64], solver: &SolverConfig) -> Result<LatentTrajectory> {
        if z0.len() != self.spec.latent {
            return Err(Error::Shape(format!("latent state of length {}, expected {}", z0.len(), self.spec.latent)));
        }
        let y0 = DenseArray::new(vec![1, z0.len()], z0.to_vec())?;
        let rhs = LatentOde(self);
        let states = times
            .iter()
            .map(|&t| {
                if t == self.spec.t0 {
                    Ok(z0.to_vec())
                } else {
                    Ok(integrate(&Neural(&rhs), &y0, self.spec.t0, t, solver)?.y1.into_data())
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(LatentTrajectory { times: times.to_vec(), states })
    }

    /// `log p(x | z_t)` for each set of a `(batch, n, d)` batch sharing one
    /// latent state.
    pub fn decode_loglik(
        &self,
        sets: &SetBatch,
        z_t: &[f64],
        t: f64,
        solver: &SolverConfig,
        trace: &TraceConfig,
        seed: u64,
    ) -> Result<Vec<f64>> {
        let cond = DenseArray::from_fn(&[sets.batch(), self.spec.latent], |k| z_t[k % self.spec.latent]);
        let c = Condition { cond: &cond, t: self.decoder_t(t) };
        Ok(log_likelihood(&self.decoder, sets, solver, trace, Some(c), seed)?.logp)
    }

    /// Draws a prior latent state, carries it to every time and decodes a
    /// fresh base sample of `n` points there.
    pub fn sample_series(&self, times: &[f64], n: usize, rng: &mut Rng, solver: &SolverConfig) -> Result<TemporalSetSeries> {
        if times.is_empty() || n == 0 {
            return Err(Error::InvalidArgument("sampling needs times and n >= 1".into()));
        }
        let z0: Vec<f64> = (0..self.spec.latent).map(|_| rng.normal()).collect();
        let traj = self.latent_transition(&z0, times, solver)?;
        let bases: Vec<DenseArray> = times.iter().map(|_| rng.normal_array(&[1, n, self.spec.dim])).collect();
        let sets = times
            .par_iter()
            .zip(&traj.states)
            .zip(&bases)
            .map(|((&t, z), base)| {
                let cond = DenseArray::new(vec![1, self.spec.latent], z.clone())?;
                let c = Condition { cond: &cond, t: self.decoder_t(t) };
                let x = invert(&self.decoder, &SetBatch::new(base.clone())?, solver, Some(c))?;
                x.into_values().reshape(&[n, self.spec.dim])
            })
            .collect::<Result<Vec<_>>>()?;
        let mut order: Vec<usize> = (0..times.len()).collect();
        order.sort_by(|&a, &b| times[a].total_cmp(&times[b]));
        TemporalSetSeries::new(order.iter().map(|&i| times[i]).collect(), order.iter().map(|&i| sets[i].clone()).collect())
    }
}

struct LatentOde<'a>(&'a TvaeModel);

impl NeuralDynamics for LatentOde<'_> {
    fn params(&self) -> &ParamStore {
        &self.0.params
    }

    fn build(&self, g: &mut Graph, y: Var, _shape: &[usize], _t: f64) -> Var {
        self.0.build_latent_rhs(g, y)
    }
}

fn element_net(spec: &TvaeSpec) -> Mlp {
    Mlp::new("enc.phi", &[spec.dim, spec.embed, spec.embed])
}

fn gru(spec: &TvaeSpec) -> Gru {
    Gru::new("enc.gru", spec.embed + 1, spec.gru_hidden)
}

fn posterior_head(spec: &TvaeSpec) -> Linear {
    Linear::new("enc.out", spec.gru_hidden, 2 * spec.latent)
}

fn latent_net(spec: &TvaeSpec) -> Mlp {
    Mlp::new("lat", &[spec.latent, spec.ode_hidden, spec.ode_hidden, spec.latent]).with_activation(spec.latent_activation)
}

/// `KL(N(mean, std^2) || N(0, I))` summed over dimensions.
pub fn kl_standard_normal(mean: &[f64], std: &[f64]) -> f64 {
    mean.iter()
        .zip(std)
        .map(|(m, s)| 0.5 * (m * m + s * s - 1.0) - s.ln())
        .sum()
}
