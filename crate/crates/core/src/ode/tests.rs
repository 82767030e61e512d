use std::f64::consts::{E, FRAC_PI_2};

use super::*;
use crate::autodiff::rel_err;

fn exp_growth() -> FnDynamics<impl Fn(f64, &DenseArray) -> DenseArray> {
    FnDynamics(|_t: f64, y: &DenseArray| y.clone())
}

#[test]
fn zero_dynamics_is_exact() {
    let zero = FnDynamics(|_t: f64, y: &DenseArray| DenseArray::zeros(y.shape()));
    let y0 = DenseArray::vector(vec![0.3, -1.7, 2.5]);
    for cfg in [SolverConfig::rk4(5), SolverConfig::dopri5(1e-6, 1e-6)] {
        let r = integrate(&zero, &y0, 0.0, 1.0, &cfg).unwrap();
        assert_eq!(r.y1, y0);
        assert_eq!(roundtrip(&zero, &y0, 0.0, 1.0, &cfg).unwrap().max_abs_error, 0.0);
    }
}

#[test]
fn exponential_matches_closed_form() {
    let r = integrate(&exp_growth(), &DenseArray::vector(vec![1.0]), 0.0, 1.0, &SolverConfig::dopri5(1e-8, 1e-8)).unwrap();
    assert!((r.y1.data()[0] - E).abs() < 1e-6, "{}", r.y1.data()[0]);
    assert!(r.accepted > 0);
}

#[test]
fn rotation_quarter_turn() {
    let rot = FnDynamics(|_t: f64, y: &DenseArray| DenseArray::vector(vec![-y.data()[1], y.data()[0]]));
    let y0 = DenseArray::vector(vec![1.0, 0.0]);
    for cfg in [SolverConfig::dopri5(1e-8, 1e-8), SolverConfig::rk4(64)] {
        let r = integrate(&rot, &y0, 0.0, FRAC_PI_2, &cfg).unwrap();
        assert!(r.y1.max_abs_diff(&DenseArray::vector(vec![0.0, 1.0])) < 1e-6);
    }
}

#[test]
fn backward_integration_inverts_exponential() {
    let r = integrate(&exp_growth(), &DenseArray::vector(vec![E]), 1.0, 0.0, &SolverConfig::dopri5(1e-9, 1e-9)).unwrap();
    assert!((r.y1.data()[0] - 1.0).abs() < 1e-7);
}

#[test]
fn rk4_is_fourth_order() {
    let err = |steps| {
        let r = integrate(&exp_growth(), &DenseArray::vector(vec![1.0]), 0.0, 1.0, &SolverConfig::rk4(steps)).unwrap();
        (r.y1.data()[0] - E).abs()
    };
    let errs: Vec<f64> = [8, 16, 32].iter().map(|&s| err(s)).collect();
    for w in errs.windows(2) {
        assert!(w[0] / w[1] >= 12.0, "{errs:?}");
    }
}

#[test]
fn rk4_counts_evaluations() {
    let r = integrate(&exp_growth(), &DenseArray::vector(vec![1.0]), 0.0, 1.0, &SolverConfig::rk4(3)).unwrap();
    assert_eq!(r.nfe, 12);
}

#[test]
fn linear_decay_roundtrip() {
    let decay = FnDynamics(|_t: f64, y: &DenseArray| y.scale(-0.5));
    let y0 = DenseArray::vector(vec![1.0, -2.0, 0.5]);
    let rt = roundtrip(&decay, &y0, 0.0, 1.0, &SolverConfig::dopri5(1e-7, 1e-7)).unwrap();
    assert!(rt.max_abs_error < 1e-5);
    let expected = y0.scale((-0.5f64).exp());
    assert!(rt.y1.max_abs_diff(&expected) < 1e-6);
}

#[test]
fn roundtrip_error_shrinks_with_tolerance() {
    let dynamics = FnDynamics(|t: f64, y: &DenseArray| {
        y.map(|v| (v * 1.3).sin() + 0.5 * t * v.cos())
    });
    let y0 = DenseArray::vector(vec![0.4, -1.1, 2.0, 0.1]);
    let errs: Vec<f64> = [1e-3, 1e-5, 1e-7]
        .iter()
        .map(|&tol| roundtrip(&dynamics, &y0, 0.0, 1.0, &SolverConfig::dopri5(tol, tol)).unwrap().max_abs_error)
        .collect();
    for w in errs.windows(2) {
        assert!(w[1] <= w[0], "{errs:?}");
    }
}

#[test]
fn dopri5_respects_step_budget() {
    let stiff = FnDynamics(|_t: f64, y: &DenseArray| y.scale(-500.0));
    let cfg = SolverConfig::dopri5(1e-10, 1e-10).with_max_steps(20);
    match integrate(&stiff, &DenseArray::vector(vec![1.0]), 0.0, 1.0, &cfg) {
        Err(Error::MaxStepsExceeded { max_steps, .. }) => assert_eq!(max_steps, 20),
        other => panic!("unexpected {other:?}"),
    }
    let ok = integrate(&exp_growth(), &DenseArray::vector(vec![1.0]), 0.0, 1.0, &SolverConfig::dopri5(1e-6, 1e-6).with_max_steps(200)).unwrap();
    assert!(ok.accepted + ok.rejected <= 200);
}

#[test]
fn non_finite_dynamics_reports_entry() {
    let bad = FnDynamics(|t: f64, y: &DenseArray| {
        let mut out = y.clone();
        if t > 0.3 {
            out.data_mut()[1] = f64::NAN;
        }
        out
    });
    match integrate(&bad, &DenseArray::vector(vec![1.0, 1.0]), 0.0, 1.0, &SolverConfig::rk4(10)) {
        Err(Error::NonFiniteDynamics { t, index, .. }) => {
            assert_eq!(index, 1);
            assert!(t > 0.3);
        }
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn invalid_configs_are_rejected() {
    let y0 = DenseArray::vector(vec![1.0]);
    for cfg in [
        SolverConfig::rk4(0),
        SolverConfig::dopri5(0.0, 1e-5),
        SolverConfig::dopri5(1e-5, 1.5),
        SolverConfig::dopri5(1e-5, 1e-5).with_max_steps(0),
    ] {
        assert!(matches!(integrate(&exp_growth(), &y0, 0.0, 1.0, &cfg), Err(Error::SolverConfig(_))));
    }
}

/// `dy/dt = theta * y`.
struct Scaled {
    params: ParamStore,
}

impl Scaled {
    fn new(theta: f64) -> Self {
        let mut params = ParamStore::new();
        params.insert("theta", DenseArray::vector(vec![theta]));
        Self { params }
    }
}

impl NeuralDynamics for Scaled {
    fn params(&self) -> &ParamStore {
        &self.params
    }

    fn build(&self, g: &mut Graph, y: Var, _shape: &[usize], _t: f64) -> Var {
        let th = g.param("theta");
        g.mul(y, th)
    }
}

struct Zero {
    params: ParamStore,
}

impl NeuralDynamics for Zero {
    fn params(&self) -> &ParamStore {
        &self.params
    }

    fn build(&self, g: &mut Graph, y: Var, _shape: &[usize], _t: f64) -> Var {
        let w = g.param("w");
        let p = g.mul(y, w);
        g.scale(p, 0.0)
    }
}

#[test]
fn adjoint_of_zero_dynamics_passes_gradient_through() {
    let mut params = ParamStore::new();
    params.insert("w", DenseArray::vector(vec![0.7, -0.2]));
    let z = Zero { params };
    let y0 = DenseArray::vector(vec![1.0, 2.0]);
    let lg = DenseArray::vector(vec![0.3, -4.0]);
    let r = adjoint_grad(&z, &y0, 0.0, 1.0, &SolverConfig::dopri5(1e-7, 1e-7), &lg).unwrap();
    assert_eq!(r.grad_y0, lg);
    assert_eq!(r.grad_params.get("w").unwrap().max_abs(), 0.0);
}

#[test]
fn adjoint_scalar_linear_closed_form() {
    // y1 = y0 e^theta, so at theta = 0 both derivatives equal 1
    let d = Scaled::new(0.0);
    let y0 = DenseArray::vector(vec![1.0]);
    let lg = DenseArray::vector(vec![1.0]);
    let r = adjoint_grad(&d, &y0, 0.0, 1.0, &SolverConfig::dopri5(1e-9, 1e-9), &lg).unwrap();
    assert!((r.grad_y0.item() - 1.0).abs() < 1e-6);
    assert!((r.grad_params.get("theta").unwrap().item() - 1.0).abs() < 1e-6);

    // away from zero, compare against central differences of the solve
    let theta = 0.4;
    let d = Scaled::new(theta);
    let r = adjoint_grad(&d, &y0, 0.0, 1.0, &SolverConfig::dopri5(1e-10, 1e-10), &lg).unwrap();
    let solve = |th: f64| {
        integrate(&Neural(&Scaled::new(th)), &y0, 0.0, 1.0, &SolverConfig::dopri5(1e-10, 1e-10))
            .unwrap()
            .y1
            .item()
    };
    let fd = (solve(theta + 1e-5) - solve(theta - 1e-5)) / 2e-5;
    assert!(rel_err(r.grad_params.get("theta").unwrap().item(), fd) < 1e-6);
    assert!(rel_err(r.grad_y0.item(), theta.exp()) < 1e-7);
}

#[test]
fn unrolled_rk4_matches_solver() {
    let d = Scaled::new(0.3);
    let y0 = DenseArray::vector(vec![1.5, -0.5]);
    let mut g = Graph::new();
    let yv = g.input("y");
    rk4_graph(&mut g, yv, 0.0, 1.0, 7, |g, y, t| d.build(g, y, &[2], t));
    let b = Bindings::new().bind_store(&d.params).bind("y", &y0);
    let unrolled = g.forward(&b).unwrap().clone();
    let direct = integrate(&Neural(&d), &y0, 0.0, 1.0, &SolverConfig::rk4(7)).unwrap().y1;
    assert!(unrolled.max_abs_diff(&direct) < 1e-14);
}

#[test]
fn adjoint_agrees_with_unrolled_backprop() {
    let d = Scaled::new(-0.7);
    let y0 = DenseArray::vector(vec![0.8, 1.2, -0.4]);
    let mut g = Graph::new();
    let yv = g.input("y");
    let y1 = rk4_graph(&mut g, yv, 0.0, 1.0, 64, |g, y, t| d.build(g, y, &[3], t));
    g.sum_all(y1);
    let b = Bindings::new().bind_store(&d.params).bind("y", &y0);
    g.forward(&b).unwrap();
    let grads = g.backward(&DenseArray::scalar(1.0)).unwrap();
    let bp_theta = g.param_grads(&grads)["theta"].item();
    let bp_y0 = g.grad_or_zeros(&grads, yv);
    let r = adjoint_grad(&d, &y0, 0.0, 1.0, &SolverConfig::rk4(64), &DenseArray::ones(&[3])).unwrap();
    assert!(rel_err(r.grad_params.get("theta").unwrap().item(), bp_theta) < 1e-3);
    for (a, b) in r.grad_y0.data().iter().zip(bp_y0.data()) {
        assert!(rel_err(*a, *b) < 1e-3);
    }
}
