use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{TemporalSetSeries, TvaeModel};
use crate::autodiff::{Bindings, Graph, Var};
use crate::cnf::{build_log_likelihood, TraceConfig};
use crate::error::{Error, Result};
use crate::ode::{rk4_graph, NeuralDynamics};
use crate::optim::{clip_grad_norm, Adam, StepDecay};
use crate::rng::Rng;
use crate::tensor::DenseArray;

/// Frozen randomness of one ELBO evaluation over a batch of series.
#[derive(Clone, Debug)]
pub struct Noise {
    /// Reparameterization draws `(batch, latent)`.
    pub eps: DenseArray,
    /// Trace probes `(P, batch, n_i, d)` per time.
    pub probes: Vec<DenseArray>,
    pub scale: f64,
}

impl Noise {
    pub fn draw(batch: &[&TemporalSetSeries], latent: usize, trace: &TraceConfig, rng: &mut Rng) -> Result<Self> {
        let b = batch.len();
        let eps = rng.normal_array(&[b, latent]);
        let mut scale = 1.0;
        let probes = batch[0]
            .sets
            .iter()
            .map(|s| {
                let (p, sc) = trace.probes([b, s.shape()[0], s.shape()[1]], rng)?;
                scale = sc;
                Ok(p)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { eps, probes, scale })
    }
}

/// Batch means of one ELBO estimate; `elbo = recon - kl_weight * kl`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ElboParts {
    pub elbo: f64,
    pub recon: f64,
    pub kl: f64,
}

fn check_batch(model: &TvaeModel, batch: &[&TemporalSetSeries]) -> Result<()> {
    let first = batch.first().ok_or_else(|| Error::InvalidArgument("empty batch of series".into()))?;
    for s in batch {
        if s.times != first.times || s.sets.iter().zip(&first.sets).any(|(a, b)| a.shape() != b.shape()) {
            return Err(Error::Shape("series in one batch must share times and set sizes".into()));
        }
        if s.d() != model.spec.dim {
            return Err(Error::Shape(format!("series d {} vs model d {}", s.d(), model.spec.dim)));
        }
    }
    Ok(())
}

/// ELBO parts with the randomness fixed, plus gradients of the mean
/// negative ELBO per point when `grads` is set.
pub fn elbo_with_noise(
    model: &TvaeModel,
    batch: &[&TemporalSetSeries],
    noise: &Noise,
    kl_weight: f64,
    grads: bool,
) -> Result<(ElboParts, Option<BTreeMap<String, DenseArray>>)> {
    check_batch(model, batch)?;
    let b = batch.len();
    let times = &batch[0].times;
    let spec = &model.spec;
    let mut g = Graph::new();
    let names: Vec<String> = (0..times.len()).map(|i| format!("x{i}")).collect();
    let xs: Vec<(Var, [usize; 3])> = batch[0]
        .sets
        .iter()
        .zip(&names)
        .map(|(s, nm)| (g.input(nm), [b, s.shape()[0], spec.dim]))
        .collect();
    let (mean, logstd) = model.build_encoder(&mut g, &xs, times);
    let std = g.exp(logstd);
    let eps = g.input("eps");
    let se = g.mul(std, eps);
    let mut z = g.add(mean, se);

    // KL(N(mean, std^2) || N(0, I)) per series
    let m2 = g.square(mean);
    let s2 = g.square(std);
    let k = g.add(m2, s2);
    let k = g.add_scalar(k, -1.0);
    let k = g.scale(k, 0.5);
    let k = g.sub(k, logstd);
    let kl = g.sum(k, -1, false);

    let mut t_prev = spec.t0;
    let mut lps = Vec::with_capacity(times.len());
    for (i, &t) in times.iter().enumerate() {
        if t != t_prev {
            let steps = ((t - t_prev).abs() * spec.latent_steps as f64).ceil().max(1.0) as usize;
            z = rk4_graph(&mut g, z, t_prev, t, steps, |g, y, _| model.build_latent_rhs(g, y));
            t_prev = t;
        }
        let (x, shape) = xs[i];
        lps.push(build_log_likelihood(
            &mut g,
            &model.decoder,
            x,
            shape,
            &noise.probes[i],
            noise.scale,
            spec.flow_steps,
            Some((z, model.decoder_t(t))),
        )?);
    }
    let mut recon = lps[0];
    for &lp in &lps[1..] {
        recon = g.add(recon, lp);
    }
    let wkl = g.scale(kl, kl_weight);
    let elbo = g.sub(recon, wkl);
    let points: usize = batch[0].sets.iter().map(|s| s.shape()[0]).sum();
    let total = g.sum_all(elbo);
    let loss = g.scale(total, -1.0 / (b * points) as f64);

    let arrays: Vec<DenseArray> = (0..times.len())
        .map(|i| {
            let parts: Vec<DenseArray> = batch
                .iter()
                .map(|s| {
                    let a = &s.sets[i];
                    a.clone().reshape(&[1, a.shape()[0], a.shape()[1]])
                })
                .collect::<Result<_>>()?;
            DenseArray::stack_leading(&parts)
        })
        .collect::<Result<_>>()?;
    let mut bind = Bindings::new()
        .bind_store(&model.params)
        .bind_store(model.decoder.params())
        .bind("eps", &noise.eps);
    for (nm, a) in names.iter().zip(&arrays) {
        bind.insert(nm, a);
    }
    g.forward(&bind)?;
    let mean_of = |v: Var| g.value(v).data().iter().sum::<f64>() / b as f64;
    let parts = ElboParts { elbo: mean_of(elbo), recon: mean_of(recon), kl: mean_of(kl) };
    for (i, &lp) in lps.iter().enumerate() {
        if !g.value(lp).is_finite() {
            return Err(Error::NonFinite(format!("reconstruction term at time index {i}")));
        }
    }
    if !parts.kl.is_finite() {
        return Err(Error::NonFinite("kl term".into()));
    }
    let grads = if grads {
        let gm = g.backward_from(&[(loss, DenseArray::scalar(1.0))])?;
        Some(g.param_grads(&gm))
    } else {
        None
    };
    Ok((parts, grads))
}

/// Single-sample ELBO of one series.
pub fn elbo(
    model: &TvaeModel,
    series: &TemporalSetSeries,
    rng: &mut Rng,
    kl_weight: f64,
    trace: &TraceConfig,
) -> Result<ElboParts> {
    let batch = [series];
    let noise = Noise::draw(&batch, model.spec.latent, trace, rng)?;
    Ok(elbo_with_noise(model, &batch, &noise, kl_weight, false)?.0)
}

fn one() -> f64 {
    1.0
}

fn default_trace() -> TraceConfig {
    TraceConfig::hutchinson(1)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TvaeTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    #[serde(default)]
    pub decay: Option<StepDecay>,
    #[serde(default)]
    pub clip: Option<f64>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "one")]
    pub kl_weight: f64,
    /// Linear KL warm-up over this many epochs; off by default.
    #[serde(default)]
    pub kl_anneal: Option<usize>,
    #[serde(default = "default_trace")]
    pub trace: TraceConfig,
}

impl TvaeTrainConfig {
    pub fn new(epochs: usize, batch_size: usize, lr: f64) -> Self {
        Self {
            epochs,
            batch_size,
            lr,
            decay: None,
            clip: None,
            seed: 0,
            kl_weight: 1.0,
            kl_anneal: None,
            trace: default_trace(),
        }
    }

    pub fn kl_weight_at(&self, epoch: usize) -> f64 {
        match self.kl_anneal {
            Some(e) if e > 0 => self.kl_weight * ((epoch + 1) as f64 / e as f64).min(1.0),
            _ => self.kl_weight,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct TvaeEpoch {
    pub epoch: usize,
    pub lr: f64,
    pub kl_weight: f64,
    /// Means over the epoch's series.
    pub elbo: f64,
    pub recon: f64,
    pub kl: f64,
    /// Smallest batch KL seen this epoch.
    pub kl_min: f64,
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct TvaeReport {
    pub epochs: Vec<TvaeEpoch>,
}

/// Maximizes the ELBO with Adam, one reparameterized sample per series.
pub fn train_tvae(
    model: &mut TvaeModel,
    train: &[TemporalSetSeries],
    cfg: &TvaeTrainConfig,
    mut on_epoch: impl FnMut(&TvaeEpoch),
) -> Result<TvaeReport> {
    if cfg.batch_size == 0 || cfg.epochs == 0 || train.is_empty() {
        return Err(Error::InvalidArgument("epochs, batch_size and the training set must be non-empty".into()));
    }
    let all: Vec<&TemporalSetSeries> = train.iter().collect();
    check_batch(model, &all)?;
    let points: usize = train[0].sets.iter().map(|s| s.shape()[0]).sum();
    let mut rng = Rng::with_stream(cfg.seed, 17);
    let mut adam = Adam::new(cfg.lr);
    let mut report = TvaeReport::default();
    let mut prev: Option<f64> = None;
    for epoch in 0..cfg.epochs {
        let lr = cfg.decay.map_or(cfg.lr, |d| d.lr_at(cfg.lr, epoch));
        adam.lr = lr;
        let w = cfg.kl_weight_at(epoch);
        let order = rng.permutation(train.len());
        let (mut e_sum, mut r_sum, mut k_sum, mut k_min) = (0.0, 0.0, 0.0, f64::INFINITY);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&TemporalSetSeries> = chunk.iter().map(|&i| &train[i]).collect();
            let noise = Noise::draw(&batch, model.spec.latent, &cfg.trace, &mut rng)?;
            let (parts, grads) = elbo_with_noise(model, &batch, &noise, w, true)?;
            let mut grads = grads.expect("gradients requested");
            if !parts.elbo.is_finite() || grads.values().any(|g| !g.is_finite()) {
                return Err(Error::NonFiniteLoss { epoch, lr, detail: format!("batch elbo {}", parts.elbo) });
            }
            if let Some(c) = cfg.clip {
                clip_grad_norm(&mut grads, c);
            }
            adam.step_all(&mut [&mut model.params, model.decoder.params_mut()], &grads);
            let nb = chunk.len() as f64;
            e_sum += parts.elbo * nb;
            r_sum += parts.recon * nb;
            k_sum += parts.kl * nb;
            k_min = k_min.min(parts.kl);
        }
        let n = train.len() as f64;
        let e = TvaeEpoch { epoch, lr, kl_weight: w, elbo: e_sum / n, recon: r_sum / n, kl: k_sum / n, kl_min: k_min };
        let per_point = e.elbo / points as f64;
        if let Some(p) = prev {
            if per_point < p - 10.0 {
                return Err(Error::Diverged {
                    epoch,
                    detail: format!("per-point elbo fell from {p:.3} to {per_point:.3}"),
                });
            }
        }
        prev = Some(per_point);
        on_epoch(&e);
        report.epochs.push(e);
    }
    Ok(report)
}
