//! Central finite-difference verification of reverse-mode gradients.

use std::collections::BTreeMap;

use serde::Serialize;

use super::graph::{Bindings, Graph};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::DenseArray;

/// Finite-difference step used throughout the crate.
pub const FD_STEP: f64 = 1e-5;

/// Denominator floor for relative errors, so gradients that are
/// numerically zero are compared absolutely.
pub const REL_ERR_FLOOR: f64 = 1e-3;

/// `|a - b| / max(|a|, |b|, REL_ERR_FLOOR)`.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_ERR_FLOOR)
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckEntry {
    pub name: String,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    /// Flat index of the worst entry.
    pub worst_index: usize,
    pub passed: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub entries: Vec<GradCheckEntry>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.entries.iter().all(|e| e.passed)
    }

    pub fn max_rel_err(&self) -> f64 {
        self.entries.iter().map(|e| e.max_rel_err).fold(0.0, f64::max)
    }

    pub fn failures(&self) -> Vec<&str> {
        self.entries
            .iter()
            .filter(|e| !e.passed)
            .map(|e| e.name.as_str())
            .collect()
    }
}

/// Central finite differences of a scalar graph output with respect to every
/// bound leaf (parameters and inputs).
pub fn numeric_grads(graph: &mut Graph, bindings: &Bindings<'_>) -> Result<BTreeMap<String, DenseArray>> {
    let mut owned: BTreeMap<String, DenseArray> = BTreeMap::new();
    for name in graph.params().keys().chain(graph.inputs().keys()) {
        let v = bindings
            .get(name)
            .ok_or_else(|| Error::UnboundInput(name.clone()))?;
        owned.insert(name.clone(), v.clone());
    }
    let out = graph.forward(bindings)?;
    if out.len() != 1 {
        return Err(Error::NonScalarOutput(out.shape().to_vec()));
    }
    let names: Vec<String> = owned.keys().cloned().collect();
    let mut result = BTreeMap::new();
    for name in &names {
        let len = owned[name].len();
        let mut grad = vec![0.0; len];
        for (k, slot) in grad.iter_mut().enumerate() {
            let base = owned[name].data()[k];
            let mut eval = |x: f64, owned: &mut BTreeMap<String, DenseArray>| -> Result<f64> {
                owned.get_mut(name).unwrap().data_mut()[k] = x;
                let mut b = Bindings::new();
                for (n, v) in owned.iter() {
                    b.insert(n.as_str(), v);
                }
                Ok(graph.forward(&b)?.item())
            };
            let plus = eval(base + FD_STEP, &mut owned)?;
            let minus = eval(base - FD_STEP, &mut owned)?;
            owned.get_mut(name).unwrap().data_mut()[k] = base;
            *slot = (plus - minus) / (2.0 * FD_STEP);
        }
        result.insert(name.clone(), DenseArray::from_parts(owned[name].shape().to_vec(), grad));
    }
    // leave the graph evaluated at the unperturbed point
    graph.forward(bindings)?;
    Ok(result)
}

/// Compares [`Graph::backward`] with central differences for every leaf.
pub fn grad_check(graph: &mut Graph, bindings: &Bindings<'_>, tolerance: f64) -> Result<GradCheckReport> {
    let out = graph.forward(bindings)?;
    if out.len() != 1 {
        return Err(Error::NonScalarOutput(out.shape().to_vec()));
    }
    let seed = DenseArray::from_parts(out.shape().to_vec(), vec![1.0]);
    let grads = graph.backward(&seed)?;
    let leaves: Vec<(String, super::Var)> = graph
        .params()
        .iter()
        .chain(graph.inputs().iter())
        .map(|(k, v)| (k.clone(), *v))
        .collect();
    let analytic: BTreeMap<String, DenseArray> = leaves
        .iter()
        .map(|(k, v)| (k.clone(), graph.grad_or_zeros(&grads, *v)))
        .collect();
    let numeric = numeric_grads(graph, bindings)?;
    let entries = analytic
        .iter()
        .map(|(name, a)| {
            let n = &numeric[name];
            let mut worst = (0.0, 0.0, 0);
            for (k, (x, y)) in a.data().iter().zip(n.data()).enumerate() {
                let r = rel_err(*x, *y);
                if r > worst.0 || k == 0 {
                    worst = (r, (x - y).abs(), k);
                }
            }
            GradCheckEntry {
                name: name.clone(),
                max_rel_err: worst.0,
                max_abs_err: worst.1,
                worst_index: worst.2,
                passed: worst.0 <= tolerance,
            }
        })
        .collect();
    Ok(GradCheckReport { tolerance, entries })
}

/// Every differentiable graph operation, by name.
pub const PRIMITIVES: &[&str] = &[
    "matmul",
    "batched_matmul",
    "transpose",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "scale",
    "add_scalar",
    "powf",
    "square",
    "tanh",
    "sigmoid",
    "exp",
    "log",
    "relu",
    "softmax",
    "log_softmax",
    "sum",
    "mean",
    "max",
    "sum_all",
    "concat",
    "slice",
    "reshape",
    "broadcast",
];

/// Builds `sum(w * op(x, ..))` with random inputs and readout weights, so
/// every output entry reaches the loss. `faulty_tanh` is accepted as a
/// negative control.
pub fn primitive_case(name: &str, rng: &mut Rng) -> Result<(Graph, Vec<(String, DenseArray)>)> {
    let mut g = Graph::new();
    let x = g.input("x");
    let mut binds = vec![];
    let positive = matches!(name, "log" | "powf" | "div");
    let lo = if positive { 0.5 } else { -2.0 };
    binds.push(("x".to_string(), rng.uniform_array(&[2, 3, 4], lo, 2.0)));
    let out = match name {
        "matmul" => {
            let w = g.input("w");
            binds.push(("w".into(), rng.uniform_array(&[4, 5], -2.0, 2.0)));
            g.matmul(x, w)
        }
        "batched_matmul" => {
            let w = g.input("w");
            binds.push(("w".into(), rng.uniform_array(&[2, 4, 5], -2.0, 2.0)));
            g.matmul(x, w)
        }
        "transpose" => g.transpose(x),
        "add" | "sub" | "mul" | "div" => {
            let y = g.input("y");
            binds.push(("y".into(), rng.uniform_array(&[4], 0.5, 2.0)));
            match name {
                "add" => g.add(x, y),
                "sub" => g.sub(y, x),
                "mul" => g.mul(x, y),
                _ => g.div(y, x),
            }
        }
        "neg" => g.neg(x),
        "scale" => g.scale(x, -1.3),
        "add_scalar" => g.add_scalar(x, 0.7),
        "powf" => g.powf(x, 1.7),
        "square" => g.square(x),
        "tanh" => g.tanh(x),
        "faulty_tanh" => g.faulty_tanh(x),
        "sigmoid" => g.sigmoid(x),
        "exp" => g.exp(x),
        "log" => g.log(x),
        "relu" => g.relu(x),
        "softmax" => g.softmax(x),
        "log_softmax" => g.log_softmax(x),
        "sum" => g.sum(x, 1, false),
        "mean" => g.mean(x, -1, true),
        "max" => g.max(x, 1, true),
        "sum_all" => g.sum_all(x),
        "concat" => {
            let y = g.input("y");
            binds.push(("y".into(), rng.uniform_array(&[2, 1, 4], -2.0, 2.0)));
            g.concat(&[x, y], 1)
        }
        "slice" => g.slice(x, 2, 1, 2),
        "reshape" => g.reshape(x, &[6, -1]),
        "broadcast" => {
            let m = g.mean(x, 1, true);
            g.broadcast(m, 1, 5)
        }
        other => return Err(Error::InvalidArgument(format!("unknown primitive {other}"))),
    };
    let shape = {
        let mut b = Bindings::new();
        for (k, v) in &binds {
            b.insert(k.as_str(), v);
        }
        g.forward(&b)?;
        g.value(out).shape().to_vec()
    };
    let w = g.constant(rng.uniform_array(&shape, -1.0, 1.0));
    let prod = g.mul(out, w);
    g.sum_all(prod);
    Ok((g, binds))
}

/// [`grad_check`] of one primitive case drawn from `seed`.
pub fn check_primitive(name: &str, seed: u64, tolerance: f64) -> Result<GradCheckReport> {
    let (mut g, binds) = primitive_case(name, &mut Rng::new(seed))?;
    let mut b = Bindings::new();
    for (k, v) in &binds {
        b.insert(k.as_str(), v);
    }
    grad_check(&mut g, &b, tolerance)
}
