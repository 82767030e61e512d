//! Set classification: a per-element feature expansion, an equivariant ODE
//! solve, max pooling over elements and a fully connected head.

mod train;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Bindings, Graph, ParamStore, Var};
use crate::equivariant::{EquivariantNet, LayerSpec, NetSpec, SetBatch};
use crate::error::{Error, Result};
use crate::nn::{LayerNorm, Linear, Mlp};
use crate::ode::{rk4_graph, NeuralDynamics};
use crate::rng::Rng;
use crate::tensor::DenseArray;

pub use train::{
    confusion_matrix, evaluate, train_classifier, ClassifierEpoch, ClassifierReport, ClassifierTrainConfig,
    Evaluation,
};

/// Sets with integer class labels in `[0, classes)`.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSetBatch {
    pub sets: SetBatch,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl LabeledSetBatch {
    pub fn new(sets: SetBatch, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if labels.len() != sets.batch() {
            return Err(Error::Shape(format!("{} labels for {} sets", labels.len(), sets.batch())));
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::InvalidArgument(format!("label {bad} outside [0, {classes})")));
        }
        Ok(Self { sets, labels, classes })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn select(&self, idx: &[usize]) -> Result<Self> {
        Ok(Self {
            sets: self.sets.select(idx)?,
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
        })
    }
}

/// Per-element map from the input dimension to the hidden width.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Expansion {
    /// A single affine map.
    Affine,
    /// Two rounds of affine map, layer normalization and tanh.
    #[default]
    Stacked,
}

fn default_steps() -> usize {
    8
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassifierSpec {
    pub dim: usize,
    pub hidden: usize,
    pub classes: usize,
    #[serde(default)]
    pub expansion: Expansion,
    /// Dynamics layers; the last must have width `hidden`.
    pub dynamics: Vec<LayerSpec>,
    /// Hidden widths of the head.
    #[serde(default)]
    pub head: Vec<usize>,
    /// Fixed RK4 steps over `[0, 1]`.
    #[serde(default = "default_steps")]
    pub steps: usize,
}

#[derive(Clone, Debug)]
pub struct ClassifierModel {
    pub spec: ClassifierSpec,
    /// Expansion and head parameters.
    pub params: ParamStore,
    pub dynamics: EquivariantNet,
}

const DYN: &str = "dyn";

impl ClassifierModel {
    pub fn new(spec: ClassifierSpec, rng: &mut Rng) -> Result<Self> {
        if spec.dim == 0 || spec.hidden == 0 || spec.classes < 2 || spec.steps == 0 {
            return Err(Error::InvalidArgument(
                "classifier needs positive dim, hidden and steps and at least two classes".into(),
            ));
        }
        let net_spec = NetSpec::new(spec.hidden, spec.dynamics.clone());
        if net_spec.out_dim() != spec.hidden {
            return Err(Error::Shape(format!(
                "dynamics end at width {}, expected hidden width {}",
                net_spec.out_dim(),
                spec.hidden
            )));
        }
        let dynamics = EquivariantNet::new(DYN, net_spec, rng)?;
        let mut params = ParamStore::new();
        for (i, l) in expansion_layers(&spec).iter().enumerate() {
            l.init(&mut params, rng);
            if spec.expansion == Expansion::Stacked {
                LayerNorm::new(format!("phi.ln{i}"), spec.hidden).init(&mut params);
            }
        }
        head(&spec).init(&mut params, rng, true);
        Ok(Self { spec, params, dynamics })
    }

    /// Every parameter in one store.
    pub fn all_params(&self) -> ParamStore {
        let mut all = self.params.clone();
        all.extend(self.dynamics.params().clone()).expect("disjoint names");
        all
    }

    /// Rebuilds a model from [`ClassifierModel::all_params`] output.
    pub fn from_params(spec: ClassifierSpec, all: ParamStore) -> Result<Self> {
        let mut model = Self::new(spec, &mut Rng::new(0))?;
        let mut own = ParamStore::new();
        let mut dynp = ParamStore::new();
        for (k, v) in all.iter() {
            if k.starts_with(&format!("{DYN}.")) {
                dynp.insert(k.clone(), v.clone());
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
        model.dynamics = model.dynamics.with_params(dynp)?;
        Ok(model)
    }

    pub fn sabotaged(mut self) -> Self {
        self.dynamics = self.dynamics.sabotaged();
        self
    }

    /// Pooled features `(batch, hidden)` for a `(batch, n, dim)` input.
    pub fn build_pooled(&self, g: &mut Graph, x: Var, shape: [usize; 3]) -> Var {
        let [b, n, _] = shape;
        let mut h = x;
        for (i, l) in expansion_layers(&self.spec).iter().enumerate() {
            h = l.build(g, h);
            if self.spec.expansion == Expansion::Stacked {
                h = LayerNorm::new(format!("phi.ln{i}"), self.spec.hidden).build(g, h);
                h = g.tanh(h);
            }
        }
        let hs = [b, n, self.spec.hidden];
        let net = &self.dynamics;
        let h = rk4_graph(g, h, 0.0, 1.0, self.spec.steps, |g, y, t| net.build(g, y, hs, t, None));
        g.max(h, 1, false)
    }

    /// Logits `(batch, classes)`.
    pub fn build_logits(&self, g: &mut Graph, x: Var, shape: [usize; 3]) -> Var {
        let v = self.build_pooled(g, x, shape);
        head(&self.spec).build(g, v)
    }

    fn check(&self, sets: &SetBatch) -> Result<()> {
        if sets.d() != self.spec.dim {
            return Err(Error::Shape(format!(
                "sets have d = {}, the classifier expects {}",
                sets.d(),
                self.spec.dim
            )));
        }
        Ok(())
    }

    fn run(&self, sets: &SetBatch, pooled: bool) -> Result<DenseArray> {
        self.check(sets)?;
        let chunk = 64;
        let starts: Vec<usize> = (0..sets.batch()).step_by(chunk).collect();
        let parts = starts
            .par_iter()
            .map(|&s| {
                let part = sets.slice(s, chunk.min(sets.batch() - s))?;
                let mut g = Graph::new();
                let x = g.input("x");
                if pooled {
                    self.build_pooled(&mut g, x, part.shape());
                } else {
                    self.build_logits(&mut g, x, part.shape());
                }
                let b = Bindings::new()
                    .bind_store(&self.params)
                    .bind_store(self.dynamics.params())
                    .bind("x", part.values());
                let out = g.forward(&b)?.clone();
                if !out.is_finite() {
                    return Err(Error::NonFinite("classifier output".into()));
                }
                Ok(out)
            })
            .collect::<Result<Vec<_>>>()?;
        DenseArray::stack_leading(&parts)
    }

    /// Logits `(batch, classes)`, evaluated in chunks of 64 sets.
    pub fn logits(&self, sets: &SetBatch) -> Result<DenseArray> {
        self.run(sets, false)
    }

    /// Max-pooled solve output `(batch, hidden)`.
    pub fn pooled(&self, sets: &SetBatch) -> Result<DenseArray> {
        self.run(sets, true)
    }

    pub fn predict(&self, sets: &SetBatch) -> Result<Prediction> {
        let logits = self.logits(sets)?;
        let c = self.spec.classes;
        let mut probs = Vec::with_capacity(logits.len());
        let mut classes = Vec::with_capacity(sets.batch());
        for row in logits.data().chunks(c) {
            let top = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = row.iter().map(|v| (v - top).exp()).collect();
            let z: f64 = e.iter().sum();
            probs.extend(e.iter().map(|v| v / z));
            classes.push(argmax(row));
        }
        Ok(Prediction {
            classes,
            probs: DenseArray::new(vec![sets.batch(), c], probs)?,
        })
    }
}

#[derive(Clone, Debug)]
pub struct Prediction {
    pub classes: Vec<usize>,
    /// Softmax probabilities `(batch, classes)`.
    pub probs: DenseArray,
}

pub(crate) fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

fn expansion_layers(spec: &ClassifierSpec) -> Vec<Linear> {
    match spec.expansion {
        Expansion::Affine => vec![Linear::new("phi.0", spec.dim, spec.hidden)],
        Expansion::Stacked => vec![
            Linear::new("phi.0", spec.dim, spec.hidden),
            Linear::new("phi.1", spec.hidden, spec.hidden),
        ],
    }
}

fn head(spec: &ClassifierSpec) -> Mlp {
    let mut widths = vec![spec.hidden];
    widths.extend(&spec.head);
    widths.push(spec.classes);
    Mlp::new("head", &widths)
}
