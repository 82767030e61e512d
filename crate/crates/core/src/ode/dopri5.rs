//! Dormand–Prince 5(4) with a PI step-size controller.

use super::{checked_eval, Dynamics, OdeResult, SolverConfig};
use crate::error::{Error, Result};
use crate::tensor::DenseArray;

const C: [f64; 7] = [0.0, 1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0, 1.0];

const A: [[f64; 6]; 7] = [
    [0.0; 6],
    [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0, 0.0, 0.0],
    [9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0, 0.0],
    [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
];

// fifth-order weights minus embedded fourth-order weights
const E: [f64; 7] = [
    35.0 / 384.0 - 5179.0 / 57600.0,
    0.0,
    500.0 / 1113.0 - 7571.0 / 16695.0,
    125.0 / 192.0 - 393.0 / 640.0,
    -2187.0 / 6784.0 + 92097.0 / 339200.0,
    11.0 / 84.0 - 187.0 / 2100.0,
    -1.0 / 40.0,
];

const SAFETY: f64 = 0.9;
const MIN_FACTOR: f64 = 0.2;
const MAX_FACTOR: f64 = 10.0;
const BETA: f64 = 0.04;
const ALPHA: f64 = 0.2 - 0.75 * BETA;

pub(super) fn solve(
    dynamics: &(impl Dynamics + ?Sized),
    y0: &DenseArray,
    t0: f64,
    t1: f64,
    cfg: &SolverConfig,
) -> Result<OdeResult> {
    let mut y = y0.clone();
    if t0 == t1 {
        return Ok(OdeResult { y1: y, nfe: 0, accepted: 0, rejected: 0 });
    }
    let dir = (t1 - t0).signum();
    let span = (t1 - t0).abs();
    let mut h = span / 100.0;
    let mut t = t0;
    let mut k1 = checked_eval(dynamics, t, &y)?;
    let mut nfe = 1;
    let (mut accepted, mut rejected) = (0, 0);
    let mut err_prev = 1e-4_f64;
    let n = y.len();
    let mut ks: Vec<DenseArray> = Vec::with_capacity(7);
    let mut stage = y.clone();

    loop {
        let remaining = (t1 - t) * dir;
        if remaining <= span * 1e-14 {
            break;
        }
        if accepted + rejected >= cfg.max_steps {
            return Err(Error::MaxStepsExceeded { max_steps: cfg.max_steps, t });
        }
        let last = h >= remaining;
        if last {
            h = remaining;
        }
        let hs = h * dir;

        ks.clear();
        ks.push(k1.clone());
        for s in 1..7 {
            let sd = stage.data_mut();
            sd.copy_from_slice(y.data());
            for (j, k) in ks.iter().enumerate() {
                let a = A[s][j];
                if a != 0.0 {
                    for (o, kv) in sd.iter_mut().zip(k.data()) {
                        *o += hs * a * kv;
                    }
                }
            }
            ks.push(checked_eval(dynamics, t + C[s] * hs, &stage)?);
            nfe += 1;
        }
        // stage 7 is evaluated at y_new (first-same-as-last)
        let y_new = stage.clone();

        let mut acc = 0.0;
        for i in 0..n {
            let mut e = 0.0;
            for (j, k) in ks.iter().enumerate() {
                e += E[j] * k.data()[i];
            }
            e *= hs;
            let scale = cfg.atol + cfg.rtol * y.data()[i].abs().max(y_new.data()[i].abs());
            acc += (e / scale).powi(2);
        }
        let err = (acc / n.max(1) as f64).sqrt();

        if err <= 1.0 {
            t = if last { t1 } else { t + hs };
            y = y_new;
            k1 = ks[6].clone();
            accepted += 1;
            let factor = if err == 0.0 {
                MAX_FACTOR
            } else {
                (SAFETY * err.powf(-ALPHA) * err_prev.powf(BETA)).clamp(MIN_FACTOR, MAX_FACTOR)
            };
            h *= factor;
            err_prev = err.max(1e-4);
            if last {
                break;
            }
        } else {
            rejected += 1;
            h *= (SAFETY * err.powf(-ALPHA)).clamp(MIN_FACTOR, 1.0);
        }
        if h.is_nan() || h < span * 1e-14 {
            return Err(Error::SolverConfig(format!("step size underflow at t = {t}")));
        }
    }
    Ok(OdeResult { y1: y, nfe, accepted, rejected })
}
