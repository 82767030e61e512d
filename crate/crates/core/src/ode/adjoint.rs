//! Adjoint sensitivities: the augmented state `[y, a, a_theta]` is integrated
//! backward from `t1` to `t0`, re-evaluating the dynamics instead of storing
//! the forward trajectory.

use super::{integrate, Dynamics, NeuralDynamics, SolverConfig, STATE};
use crate::autodiff::{Bindings, Graph, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::DenseArray;

/// `f(y, t)` together with `a^T df/dy` and `a^T df/dtheta` (flattened in
/// parameter-store order).
pub fn vjp<N: NeuralDynamics + ?Sized>(
    dynamics: &N,
    t: f64,
    y: &DenseArray,
    a: &DenseArray,
) -> Result<(DenseArray, DenseArray, Vec<f64>)> {
    let mut g = Graph::new();
    let yv = g.input(STATE);
    let out = dynamics.build(&mut g, yv, y.shape(), t);
    let b = Bindings::new().bind_store(dynamics.params()).bind(STATE, y);
    let f = g.forward(&b)?.clone();
    let grads = g.backward_from(&[(out, a.clone())])?;
    let ay = g.grad_or_zeros(&grads, yv);
    let pg = g.param_grads(&grads);
    let mut at = Vec::with_capacity(dynamics.params().numel());
    for (name, p) in dynamics.params().iter() {
        match pg.get(name) {
            Some(d) => at.extend_from_slice(d.data()),
            None => at.extend(std::iter::repeat_n(0.0, p.len())),
        }
    }
    Ok((f, ay, at))
}

struct Augmented<'a, N: ?Sized> {
    dynamics: &'a N,
    shape: Vec<usize>,
    m: usize,
}

impl<N: NeuralDynamics + ?Sized> Dynamics for Augmented<'_, N> {
    fn eval(&self, t: f64, s: &DenseArray) -> Result<DenseArray> {
        let m = self.m;
        let y = DenseArray::from_parts(self.shape.clone(), s.data()[..m].to_vec());
        let a = DenseArray::from_parts(self.shape.clone(), s.data()[m..2 * m].to_vec());
        let (f, ay, at) = vjp(self.dynamics, t, &y, &a)?;
        let mut out = Vec::with_capacity(s.len());
        out.extend_from_slice(f.data());
        out.extend(ay.data().iter().map(|v| -v));
        out.extend(at.iter().map(|v| -v));
        Ok(DenseArray::from_parts(vec![out.len()], out))
    }
}

#[derive(Clone, Debug)]
pub struct AdjointResult {
    pub y1: DenseArray,
    pub grad_y0: DenseArray,
    pub grad_params: ParamStore,
    pub nfe_forward: usize,
    pub nfe_backward: usize,
}

/// Gradients of a loss `L(y(t1))` given `dL/dy(t1)`.
pub fn adjoint_grad<N: NeuralDynamics + ?Sized>(
    dynamics: &N,
    y0: &DenseArray,
    t0: f64,
    t1: f64,
    cfg: &SolverConfig,
    loss_grad: &DenseArray,
) -> Result<AdjointResult> {
    if loss_grad.shape() != y0.shape() {
        return Err(Error::Shape(format!(
            "loss gradient shape {:?} does not match state {:?}",
            loss_grad.shape(),
            y0.shape()
        )));
    }
    let fwd = integrate(&super::Neural(dynamics), y0, t0, t1, cfg)?;
    let m = y0.len();
    let p = dynamics.params().numel();
    let mut s = Vec::with_capacity(2 * m + p);
    s.extend_from_slice(fwd.y1.data());
    s.extend_from_slice(loss_grad.data());
    s.extend(std::iter::repeat_n(0.0, p));
    let aug = Augmented {
        dynamics,
        shape: y0.shape().to_vec(),
        m,
    };
    let back = integrate(&aug, &DenseArray::from_parts(vec![s.len()], s), t1, t0, cfg)?;
    let d = back.y1.data();
    let grad_y0 = DenseArray::from_parts(y0.shape().to_vec(), d[m..2 * m].to_vec());
    let grad_params = dynamics.params().unflatten_like(&d[2 * m..])?;
    Ok(AdjointResult {
        y1: fwd.y1,
        grad_y0,
        grad_params,
        nfe_forward: fwd.nfe,
        nfe_backward: back.nfe,
    })
}
