//! RK4 unrolled onto a graph, for backpropagation through the solver.

use crate::autodiff::{Graph, Var};

/// Unrolls `steps` RK4 steps of `f` over a single state variable.
pub fn rk4_graph(
    g: &mut Graph,
    y0: Var,
    t0: f64,
    t1: f64,
    steps: usize,
    mut f: impl FnMut(&mut Graph, Var, f64) -> Var,
) -> Var {
    rk4_graph_multi(g, &[y0], t0, t1, steps, |g, ys, t| vec![f(g, ys[0], t)])[0]
}

/// Unrolls RK4 over a tuple of state variables that evolve jointly.
pub fn rk4_graph_multi(
    g: &mut Graph,
    y0: &[Var],
    t0: f64,
    t1: f64,
    steps: usize,
    mut f: impl FnMut(&mut Graph, &[Var], f64) -> Vec<Var>,
) -> Vec<Var> {
    let h = (t1 - t0) / steps as f64;
    let mut y = y0.to_vec();
    for s in 0..steps {
        let t = t0 + s as f64 * h;
        let k1 = f(g, &y, t);
        let y2 = axpy(g, &y, 0.5 * h, &k1);
        let k2 = f(g, &y2, t + 0.5 * h);
        let y3 = axpy(g, &y, 0.5 * h, &k2);
        let k3 = f(g, &y3, t + 0.5 * h);
        let y4 = axpy(g, &y, h, &k3);
        let k4 = f(g, &y4, t + h);
        y = (0..y.len())
            .map(|i| {
                let a = g.add(k2[i], k3[i]);
                let a = g.scale(a, 2.0);
                let b = g.add(k1[i], k4[i]);
                let sum = g.add(a, b);
                let inc = g.scale(sum, h / 6.0);
                g.add(y[i], inc)
            })
            .collect();
    }
    y
}

fn axpy(g: &mut Graph, y: &[Var], h: f64, k: &[Var]) -> Vec<Var> {
    y.iter()
        .zip(k)
        .map(|(&yi, &ki)| {
            let s = g.scale(ki, h);
            g.add(yi, s)
        })
        .collect()
}
