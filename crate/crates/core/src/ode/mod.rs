//! Initial value problem solvers: fixed-step RK4, adaptive Dormand–Prince
//! 5(4), time-reversal roundtrips and adjoint gradients.

mod adjoint;
mod config;
mod dopri5;
mod unrolled;

use crate::autodiff::{Bindings, Graph, ParamStore, Var};
use crate::error::{Error, Result};
use crate::tensor::DenseArray;

pub use adjoint::{adjoint_grad, vjp, AdjointResult};
pub use config::{Method, SolverConfig};
pub use unrolled::{rk4_graph, rk4_graph_multi};

/// Right-hand side of `dy/dt = f(y, t)`.
pub trait Dynamics {
    fn eval(&self, t: f64, y: &DenseArray) -> Result<DenseArray>;

    fn num_params(&self) -> usize {
        0
    }
}

/// Closure dynamics.
pub struct FnDynamics<F>(pub F);

impl<F> Dynamics for FnDynamics<F>
where
    F: Fn(f64, &DenseArray) -> DenseArray,
{
    fn eval(&self, t: f64, y: &DenseArray) -> Result<DenseArray> {
        Ok((self.0)(t, y))
    }
}

/// Dynamics expressed as a differentiable graph over named parameters.
pub trait NeuralDynamics {
    fn params(&self) -> &ParamStore;

    /// Appends `f(y, t)` to `g`. Parameters must be created with
    /// [`Graph::param`] under their store names.
    fn build(&self, g: &mut Graph, y: Var, shape: &[usize], t: f64) -> Var;
}

pub(crate) const STATE: &str = "__state";

/// Evaluates a [`NeuralDynamics`] at a point.
pub fn eval_neural<N: NeuralDynamics + ?Sized>(dynamics: &N, t: f64, y: &DenseArray) -> Result<DenseArray> {
    let mut g = Graph::new();
    let yv = g.input(STATE);
    dynamics.build(&mut g, yv, y.shape(), t);
    let b = Bindings::new().bind_store(dynamics.params()).bind(STATE, y);
    Ok(g.forward(&b)?.clone())
}

/// Adapts any [`NeuralDynamics`] to the solver interface.
pub struct Neural<'a, N: ?Sized>(pub &'a N);

impl<N: NeuralDynamics + ?Sized> Dynamics for Neural<'_, N> {
    fn eval(&self, t: f64, y: &DenseArray) -> Result<DenseArray> {
        eval_neural(self.0, t, y)
    }

    fn num_params(&self) -> usize {
        self.0.params().numel()
    }
}

#[derive(Clone, Debug)]
pub struct OdeResult {
    pub y1: DenseArray,
    pub nfe: usize,
    pub accepted: usize,
    pub rejected: usize,
}

pub(crate) fn checked_eval(d: &(impl Dynamics + ?Sized), t: f64, y: &DenseArray) -> Result<DenseArray> {
    let out = d.eval(t, y)?;
    if out.shape() != y.shape() {
        return Err(Error::Shape(format!(
            "dynamics returned shape {:?} for state {:?}",
            out.shape(),
            y.shape()
        )));
    }
    if let Some(index) = out.first_non_finite() {
        return Err(Error::NonFiniteDynamics {
            t,
            index,
            value: out.data()[index],
        });
    }
    Ok(out)
}

/// Integrates from `t0` to `t1` (either direction).
pub fn integrate(
    dynamics: &(impl Dynamics + ?Sized),
    y0: &DenseArray,
    t0: f64,
    t1: f64,
    cfg: &SolverConfig,
) -> Result<OdeResult> {
    cfg.validate()?;
    if let Some(i) = y0.first_non_finite() {
        return Err(Error::InvalidArgument(format!("initial state entry {i} is not finite")));
    }
    match cfg.method {
        Method::Rk4 => rk4(dynamics, y0, t0, t1, cfg.steps),
        Method::Dopri5 => dopri5::solve(dynamics, y0, t0, t1, cfg),
    }
}

fn rk4(dynamics: &(impl Dynamics + ?Sized), y0: &DenseArray, t0: f64, t1: f64, steps: usize) -> Result<OdeResult> {
    let h = (t1 - t0) / steps as f64;
    let mut y = y0.clone();
    let mut nfe = 0;
    if t0 == t1 {
        return Ok(OdeResult { y1: y, nfe, accepted: 0, rejected: 0 });
    }
    for s in 0..steps {
        let t = t0 + s as f64 * h;
        let k1 = checked_eval(dynamics, t, &y)?;
        let k2 = checked_eval(dynamics, t + 0.5 * h, &offset(&y, 0.5 * h, &k1))?;
        let k3 = checked_eval(dynamics, t + 0.5 * h, &offset(&y, 0.5 * h, &k2))?;
        let k4 = checked_eval(dynamics, t + h, &offset(&y, h, &k3))?;
        nfe += 4;
        for (i, v) in y.data_mut().iter_mut().enumerate() {
            *v += h / 6.0 * (k1.data()[i] + 2.0 * k2.data()[i] + 2.0 * k3.data()[i] + k4.data()[i]);
        }
    }
    Ok(OdeResult { y1: y, nfe, accepted: steps, rejected: 0 })
}

fn offset(y: &DenseArray, h: f64, k: &DenseArray) -> DenseArray {
    let mut out = y.clone();
    for (o, d) in out.data_mut().iter_mut().zip(k.data()) {
        *o += h * d;
    }
    out
}

#[derive(Clone, Debug)]
pub struct Roundtrip {
    pub y1: DenseArray,
    pub y0_recovered: DenseArray,
    pub max_abs_error: f64,
}

/// Integrates `t0 -> t1 -> t0` and reports the reconstruction error.
pub fn roundtrip(
    dynamics: &(impl Dynamics + ?Sized),
    y0: &DenseArray,
    t0: f64,
    t1: f64,
    cfg: &SolverConfig,
) -> Result<Roundtrip> {
    let fwd = integrate(dynamics, y0, t0, t1, cfg)?;
    let back = integrate(dynamics, &fwd.y1, t1, t0, cfg)?;
    let max_abs_error = y0.max_abs_diff(&back.y1);
    Ok(Roundtrip {
        y1: fwd.y1,
        y0_recovered: back.y1,
        max_abs_error,
    })
}

#[cfg(test)]
mod tests;
