use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use exnode::classifier::{evaluate, ClassifierModel, ClassifierSpec, LabeledSetBatch};
use exnode::cnf::{log_likelihood, TraceConfig, TraceMode};
use exnode::equivariant::{EquivariantNet, NetSpec, SetBatch};
use exnode::ode::{NeuralDynamics, SolverConfig};
use exnode::tvae::{TemporalSetSeries, TvaeModel, TvaeSpec};
use exnode::{Checkpoint, Rng};

use crate::config::Task;
use crate::CliError;

pub const FLOW_PREFIX: &str = "flow";

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "task", rename_all = "lowercase", deny_unknown_fields)]
pub enum ModelMeta {
    Classify { spec: ClassifierSpec },
    Cnf { spec: NetSpec, solver: SolverConfig },
    Tvae { spec: TvaeSpec, solver: SolverConfig },
}

pub enum Model {
    Classify(ClassifierModel),
    Cnf { net: EquivariantNet, solver: SolverConfig },
    Tvae { model: TvaeModel, solver: SolverConfig },
}

impl Model {
    pub fn task(&self) -> Task {
        match self {
            Model::Classify(_) => Task::Classify,
            Model::Cnf { .. } => Task::Cnf,
            Model::Tvae { .. } => Task::Tvae,
        }
    }

    pub fn save(&self, path: &Path) -> Result<(), CliError> {
        let (meta, params) = match self {
            Model::Classify(m) => (ModelMeta::Classify { spec: m.spec.clone() }, m.all_params()),
            Model::Cnf { net, solver } => (
                ModelMeta::Cnf { spec: net.spec.clone(), solver: solver.clone() },
                net.params().clone(),
            ),
            Model::Tvae { model, solver } => (
                ModelMeta::Tvae { spec: model.spec.clone(), solver: solver.clone() },
                model.all_params(),
            ),
        };
        params.to_checkpoint(Some(serde_json::to_value(meta)?)).save(path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let bad = |e: String| CliError::config(format!("checkpoint {}: {e}", path.display()));
        let ck = Checkpoint::load(path).map_err(|e| bad(e.to_string()))?;
        let meta = ck.model.clone().ok_or_else(|| bad("no model description".into()))?;
        let meta: ModelMeta = serde_json::from_value(meta).map_err(|e| bad(e.to_string()))?;
        let store = ck.into_store().map_err(|e| bad(e.to_string()))?;
        Ok(match meta {
            ModelMeta::Classify { spec } => {
                Model::Classify(ClassifierModel::from_params(spec, store).map_err(|e| bad(e.to_string()))?)
            }
            ModelMeta::Cnf { spec, solver } => {
                let net = EquivariantNet::new(FLOW_PREFIX, spec, &mut Rng::new(0))
                    .and_then(|n| n.with_params(store))
                    .map_err(|e| bad(e.to_string()))?;
                Model::Cnf { net, solver }
            }
            ModelMeta::Tvae { spec, solver } => Model::Tvae {
                model: TvaeModel::from_params(spec, store).map_err(|e| bad(e.to_string()))?,
                solver,
            },
        })
    }
}

/// Rows of every set in lexicographic order. Hutchinson probes are tied to
/// element positions, so a fixed order makes the estimate independent of
/// how the input was listed.
pub fn canonical(sets: &SetBatch) -> Result<SetBatch, CliError> {
    let [batch, n, d] = sets.shape();
    let data = sets.values().data();
    let perms: Vec<Vec<usize>> = (0..batch)
        .map(|b| {
            let row = |i: usize| &data[(b * n + i) * d..(b * n + i + 1) * d];
            let mut p: Vec<usize> = (0..n).collect();
            p.sort_by(|&i, &j| {
                row(i).iter().zip(row(j)).map(|(a, c)| a.total_cmp(c)).find(|o| o.is_ne()).unwrap_or(std::cmp::Ordering::Equal)
            });
            p
        })
        .collect();
    Ok(sets.permute_each(&perms)?)
}

fn eval_trace(n: usize, d: usize) -> TraceConfig {
    TraceConfig::for_eval(n, d)
}

fn trace_name(t: &TraceConfig) -> Value {
    match t.mode {
        TraceMode::Exact => json!("exact"),
        TraceMode::Hutchinson => json!(format!("hutchinson({})", t.probes)),
    }
}

pub fn classify_metrics(model: &ClassifierModel, data: &LabeledSetBatch) -> Result<Value, CliError> {
    let e = evaluate(model, data)?;
    Ok(json!({
        "task": "classify",
        "sets": data.len(),
        "loss": e.loss,
        "accuracy": e.accuracy,
        "confusion": e.confusion,
    }))
}

pub fn cnf_metrics(net: &EquivariantNet, sets: &SetBatch, solver: &SolverConfig, seed: u64) -> Result<Value, CliError> {
    let [batch, n, d] = sets.shape();
    let trace = eval_trace(n, d);
    let sets = if trace.mode == TraceMode::Exact { sets.clone() } else { canonical(sets)? };
    let lik = log_likelihood(net, &sets, solver, &trace, None, seed)?;
    Ok(json!({
        "task": "cnf",
        "sets": batch,
        "points": batch * n,
        "ppll": lik.ppll,
        "trace": trace_name(&trace),
    }))
}

/// Reconstruction log-likelihood per point, decoding every set from the
/// posterior mean carried to its time.
pub fn tvae_metrics(
    model: &TvaeModel,
    series: &[TemporalSetSeries],
    solver: &SolverConfig,
    seed: u64,
) -> Result<Value, CliError> {
    let (mut total, mut points) = (0.0, 0usize);
    let mut trace_used = None;
    for (i, s) in series.iter().enumerate() {
        let post = model.encode_series(s)?;
        let traj = model.latent_transition(&post.mean, &s.times, solver)?;
        for (k, (set, &t)) in s.sets.iter().zip(&s.times).enumerate() {
            let [n, d] = [set.shape()[0], set.shape()[1]];
            let trace = eval_trace(n, d);
            let mut batch = SetBatch::new(set.clone().reshape(&[1, n, d])?)?;
            if trace.mode != TraceMode::Exact {
                batch = canonical(&batch)?;
            }
            let lp = model.decode_loglik(&batch, &traj.states[k], t, solver, &trace, seed ^ ((i as u64) << 20 | k as u64))?;
            total += lp[0];
            points += n;
            trace_used.get_or_insert(trace);
        }
    }
    Ok(json!({
        "task": "tvae",
        "series": series.len(),
        "points": points,
        "recon_ppll": total / points as f64,
        "trace": trace_used.as_ref().map_or(Value::Null, trace_name),
    }))
}
