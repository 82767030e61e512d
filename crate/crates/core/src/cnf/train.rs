use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{build_flow_jvp, log_likelihood, TraceConfig, LOG_2PI};
use crate::autodiff::{Bindings, Graph, Var};
use crate::equivariant::{EquivariantNet, SetBatch};
use crate::error::{Error, Result};
use crate::ode::{rk4_graph_multi, NeuralDynamics, SolverConfig};
use crate::optim::{clip_grad_norm, Adam, StepDecay};
use crate::rng::Rng;
use crate::tensor::DenseArray;

fn default_steps() -> usize {
    8
}

fn default_trace() -> TraceConfig {
    TraceConfig::hutchinson(1)
}

fn default_val_solver() -> SolverConfig {
    SolverConfig::rk4(8)
}

fn one() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CnfTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    #[serde(default)]
    pub decay: Option<StepDecay>,
    /// RK4 steps of the unrolled training solve.
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default = "default_trace")]
    pub trace: TraceConfig,
    /// Global gradient-norm cap.
    #[serde(default)]
    pub clip: Option<f64>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_val_solver")]
    pub val_solver: SolverConfig,
    /// Defaults to exact for `n * d <= 256`, else 100 probes.
    #[serde(default)]
    pub val_trace: Option<TraceConfig>,
    #[serde(default = "one")]
    pub val_every: usize,
}

impl CnfTrainConfig {
    pub fn new(epochs: usize, batch_size: usize, lr: f64) -> Self {
        Self {
            epochs,
            batch_size,
            lr,
            decay: None,
            steps: default_steps(),
            trace: default_trace(),
            clip: None,
            seed: 0,
            val_solver: default_val_solver(),
            val_trace: None,
            val_every: 1,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct CnfEpoch {
    pub epoch: usize,
    pub lr: f64,
    pub train_ppll: f64,
    pub val_ppll: Option<f64>,
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct CnfReport {
    pub epochs: Vec<CnfEpoch>,
}

/// Graph of `log p(x)` per set under an unrolled RK4 solve; returns the
/// `(batch,)` node.
#[allow(clippy::too_many_arguments)]
pub fn build_log_likelihood(
    g: &mut Graph,
    net: &EquivariantNet,
    x: Var,
    shape: [usize; 3],
    probes: &DenseArray,
    scale: f64,
    steps: usize,
    cond: Option<(Var, f64)>,
) -> Result<Var> {
    let [b, n, d] = shape;
    let count = probes.shape()[0];
    let v = g.constant(probes.clone());
    let acc0 = g.constant(DenseArray::zeros(&[b]));
    let mut err = None;
    let ys = rk4_graph_multi(g, &[x, acc0], 0.0, 1.0, steps, |g, ys, s| {
        match build_flow_jvp(g, net, ys[0], v, shape, count, s, cond) {
            Ok((dz, tr)) => vec![dz, g.scale(tr, scale)],
            Err(e) => {
                err.get_or_insert(e);
                vec![ys[0], ys[1]]
            }
        }
    });
    if let Some(e) = err {
        return Err(e);
    }
    let sq = g.square(ys[0]);
    let s = g.sum(sq, -1, false);
    let s = g.sum(s, -1, false);
    let base = g.scale(s, -0.5);
    let base = g.add_scalar(base, -0.5 * (n * d) as f64 * LOG_2PI);
    Ok(g.add(base, ys[1]))
}

/// Mean per-point log-likelihood of a batch and the gradient of its
/// negation.
pub fn batch_loss(
    net: &EquivariantNet,
    batch: &SetBatch,
    steps: usize,
    trace: &TraceConfig,
    rng: &mut Rng,
) -> Result<(f64, BTreeMap<String, DenseArray>)> {
    let shape = batch.shape();
    let (probes, scale) = trace.probes(shape, rng)?;
    let mut g = Graph::new();
    let x = g.input("x");
    let logp = build_log_likelihood(&mut g, net, x, shape, &probes, scale, steps, None)?;
    let total = g.sum_all(logp);
    let loss = g.scale(total, -1.0 / (shape[0] * shape[1]) as f64);
    let b = Bindings::new().bind_store(net.params()).bind("x", batch.values());
    let l = g.forward(&b)?.item();
    let grads = g.backward_from(&[(loss, DenseArray::scalar(1.0))])?;
    Ok((-l, g.param_grads(&grads)))
}

/// Maximizes the mean log-likelihood with Adam.
pub fn train_cnf(
    net: &mut EquivariantNet,
    train: &SetBatch,
    val: Option<&SetBatch>,
    cfg: &CnfTrainConfig,
    mut on_epoch: impl FnMut(&CnfEpoch),
) -> Result<CnfReport> {
    if cfg.batch_size == 0 || cfg.epochs == 0 {
        return Err(Error::InvalidArgument("epochs and batch_size must be positive".into()));
    }
    let mut rng = Rng::with_stream(cfg.seed, 11);
    let mut adam = Adam::new(cfg.lr);
    let mut report = CnfReport::default();
    let mut prev: Option<f64> = None;
    for epoch in 0..cfg.epochs {
        let lr = cfg.decay.map_or(cfg.lr, |d| d.lr_at(cfg.lr, epoch));
        adam.lr = lr;
        let order = rng.permutation(train.batch());
        let mut total = 0.0;
        let mut count = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let batch = train.select(chunk)?;
            let (ppll, mut grads) = batch_loss(net, &batch, cfg.steps, &cfg.trace, &mut rng)?;
            if !ppll.is_finite() || grads.values().any(|g| !g.is_finite()) {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    lr,
                    detail: format!("batch per-point log-likelihood {ppll}"),
                });
            }
            if let Some(c) = cfg.clip {
                clip_grad_norm(&mut grads, c);
            }
            adam.step(net.params_mut(), &grads);
            total += ppll * chunk.len() as f64;
            count += chunk.len();
        }
        let train_ppll = total / count as f64;
        let val_ppll = match val {
            Some(v) if (epoch + 1) % cfg.val_every == 0 || epoch + 1 == cfg.epochs => {
                let tc = cfg.val_trace.unwrap_or_else(|| TraceConfig::for_eval(v.n(), v.d()));
                Some(log_likelihood(net, v, &cfg.val_solver, &tc, None, cfg.seed ^ 0x5eed)?.ppll)
            }
            _ => None,
        };
        if let Some(p) = prev {
            if train_ppll < p - 10.0 {
                return Err(Error::Diverged {
                    epoch,
                    detail: format!("per-point log-likelihood fell from {p:.3} to {train_ppll:.3}"),
                });
            }
        }
        prev = Some(train_ppll);
        let e = CnfEpoch { epoch, lr, train_ppll, val_ppll };
        on_epoch(&e);
        report.epochs.push(e);
    }
    Ok(report)
}
