use super::*;
use crate::autodiff::ParamStore;
use crate::equivariant::{LayerSpec, NetSpec, Pool, TimeInjection};
use crate::nn::Activation;

/// `f(z) = a z`.
struct Scaled {
    params: ParamStore,
}

impl Scaled {
    fn new(a: f64) -> Self {
        let mut params = ParamStore::new();
        params.insert("a", DenseArray::scalar(a));
        Self { params }
    }
}

impl NeuralDynamics for Scaled {
    fn params(&self) -> &ParamStore {
        &self.params
    }

    fn build(&self, g: &mut Graph, y: Var, _shape: &[usize], _t: f64) -> Var {
        let a = g.param("a");
        g.mul(y, a)
    }
}

fn linear_deepset(d: usize, lambda: DenseArray, gamma: DenseArray) -> EquivariantNet {
    let spec = NetSpec::new(d, vec![LayerSpec::DeepSet { width: d, pool: Pool::Mean, activation: Activation::Identity }])
        .with_time(TimeInjection::None);
    let mut net = EquivariantNet::new("f", spec, &mut Rng::new(0)).unwrap();
    *net.params_mut().get_mut("f.0.lambda").unwrap() = lambda;
    *net.params_mut().get_mut("f.0.gamma").unwrap() = gamma;
    net
}

fn random_net(kind: usize, d: usize, rng: &mut Rng) -> EquivariantNet {
    let layers = match kind {
        0 => vec![
            LayerSpec::DeepSet { width: 8, pool: Pool::Mean, activation: Activation::Tanh },
            LayerSpec::DeepSet { width: d, pool: Pool::Mean, activation: Activation::Identity },
        ],
        1 => vec![
            LayerSpec::Attention { width: 8, hidden: Some(8), heads: 2, activation: Activation::Tanh },
            LayerSpec::DeepSet { width: d, pool: Pool::Mean, activation: Activation::Identity },
        ],
        _ => vec![
            LayerSpec::ConcatSquash { width: 8, activation: Activation::Tanh },
            LayerSpec::DeepSet { width: 8, pool: Pool::Mean, activation: Activation::Tanh },
            LayerSpec::ConcatSquash { width: d, activation: Activation::Identity },
        ],
    };
    EquivariantNet::new("f", NetSpec::new(d, layers).random_last(), rng).unwrap()
}

fn sets(rng: &mut Rng, b: usize, n: usize, d: usize) -> SetBatch {
    SetBatch::new(rng.normal_array(&[b, n, d])).unwrap()
}

#[test]
fn exact_trace_of_scaling() {
    let mut rng = Rng::new(1);
    let s = sets(&mut rng, 3, 4, 2);
    let tr = trace_exact(&Scaled::new(0.7), &s, 0.0, 256).unwrap();
    for t in tr {
        assert!((t - 0.7 * 8.0).abs() < 1e-12);
    }
    let tr = trace_exact(&Scaled::new(0.0), &s, 0.0, 256).unwrap();
    assert!(tr.iter().all(|&t| t == 0.0));
}

#[test]
fn exact_trace_budget() {
    let mut rng = Rng::new(1);
    let s = sets(&mut rng, 1, 20, 2);
    assert!(matches!(trace_exact(&Scaled::new(1.0), &s, 0.0, 32), Err(Error::TraceBudget { size: 40, cap: 32 })));
    assert!(TraceConfig::exact().validate(200, 2).is_err());
    assert_eq!(TraceConfig::for_eval(64, 2).mode, TraceMode::Exact);
    assert_eq!(TraceConfig::for_eval(512, 2).probes, 100);
}

#[test]
fn linear_deepset_trace_closed_form() {
    let mut rng = Rng::new(2);
    let (n, d) = (5, 3);
    let lam = rng.normal_array(&[d, d]);
    let gam = rng.normal_array(&[d, d]);
    let expected = n as f64 * (0..d).map(|j| lam.data()[j * d + j]).sum::<f64>()
        + (0..d).map(|j| gam.data()[j * d + j]).sum::<f64>();
    let net = linear_deepset(d, lam, gam);
    let s = sets(&mut rng, 2, n, d);
    for t in trace_exact(&net, &s, 0.0, 256).unwrap() {
        assert!((t - expected).abs() < 1e-12);
    }
    for t in trace_jvp(&net, &s, 0.0, None, &basis_probes(s.shape())).unwrap() {
        assert!((t - expected).abs() < 1e-12);
    }
}

#[test]
fn forward_and_reverse_traces_agree() {
    let mut rng = Rng::new(3);
    for kind in 0..3 {
        let net = random_net(kind, 2, &mut rng);
        let s = sets(&mut rng, 2, 6, 2);
        let rev = trace_exact(&net, &s, 0.4, 256).unwrap();
        let fwd = trace_jvp(&net, &s, 0.4, None, &basis_probes(s.shape())).unwrap();
        for (a, b) in rev.iter().zip(&fwd) {
            assert!((a - b).abs() < 1e-12, "{kind}: {a} vs {b}");
        }
        // a single shared probe gives the same v^T J v either way
        let v = random_probes(ProbeKind::Gaussian, 1, s.shape(), &mut rng);
        let fwd1 = trace_jvp(&net, &s, 0.4, None, &v).unwrap();
        let (g, out) = vjp_graph(&net, &s, 0.4).unwrap();
        let y = *g.inputs().get(STATE).unwrap();
        let v3 = v.clone().reshape(&s.shape()).unwrap();
        let vj = g.grad_or_zeros(&g.backward_from(&[(out, v3.clone())]).unwrap(), y);
        for (bi, f) in fwd1.iter().enumerate() {
            let r = bi * 12..(bi + 1) * 12;
            let e: f64 = vj.data()[r.clone()].iter().zip(&v3.data()[r]).map(|(a, b)| a * b).sum();
            assert!((e - f).abs() < 1e-12);
        }
    }
}

#[test]
fn hutchinson_exact_on_diagonal_with_one_probe() {
    let mut rng = Rng::new(4);
    let s = sets(&mut rng, 2, 4, 3);
    let est = trace_hutchinson(&Scaled::new(-1.3), &s, 0.0, &TraceConfig::hutchinson(1), &mut rng).unwrap();
    for m in est.mean {
        assert!((m + 1.3 * 12.0).abs() < 1e-12);
    }
    let zero = trace_hutchinson(&Scaled::new(0.0), &s, 0.0, &TraceConfig::hutchinson(7), &mut rng).unwrap();
    assert!(zero.mean.iter().all(|&m| m == 0.0));
}

#[test]
fn hutchinson_converges_at_monte_carlo_rate() {
    let mut rng = Rng::new(5);
    let d = 2;
    let net = linear_deepset(d, rng.normal_array(&[d, d]), rng.normal_array(&[d, d]));
    let s = sets(&mut rng, 1, 6, d);
    let exact = trace_exact(&net, &s, 0.0, 256).unwrap()[0];
    let mut prev_se = f64::INFINITY;
    for probes in [100, 1000, 10_000] {
        let est = trace_hutchinson(&net, &s, 0.0, &TraceConfig::hutchinson(probes), &mut rng).unwrap();
        let (m, se) = (est.mean[0], est.std_err[0]);
        assert!((m - exact).abs() <= 3.0 * se, "{probes}: {m} vs {exact} (se {se})");
        if prev_se.is_finite() {
            let ratio = prev_se / se;
            assert!((2.4..4.2).contains(&ratio), "{ratio}");
        }
        prev_se = se;
    }
}

#[test]
fn zero_flow_likelihood_is_base_density() {
    let mut rng = Rng::new(6);
    let net = EquivariantNet::new("f", NetSpec::new(2, vec![LayerSpec::DeepSet { width: 2, pool: Pool::Mean, activation: Activation::Tanh }]), &mut rng).unwrap();
    let s = sets(&mut rng, 3, 5, 2);
    let lik = log_likelihood(&net, &s, &SolverConfig::dopri5(1e-5, 1e-5), &TraceConfig::exact(), None, 0).unwrap();
    assert_eq!(lik.logp, base_log_density(&s));
    let expect = base_log_density(&s).iter().sum::<f64>() / 15.0;
    assert!((lik.ppll - expect).abs() < 1e-14);
}

#[test]
fn one_dimensional_linear_flow_closed_form() {
    let a = 0.6;
    let net = linear_deepset(1, DenseArray::new(vec![1, 1], vec![a]).unwrap(), DenseArray::zeros(&[1, 1]));
    let xs = [0.3, -1.2, 2.0];
    let s = SetBatch::new(DenseArray::new(vec![1, 3, 1], xs.to_vec()).unwrap()).unwrap();
    let lik = log_likelihood(&net, &s, &SolverConfig::dopri5(1e-9, 1e-9), &TraceConfig::exact(), None, 0).unwrap();
    let expected: f64 = xs
        .iter()
        .map(|x| {
            let z = x * a.exp();
            -0.5 * z * z - 0.5 * LOG_2PI + a
        })
        .sum();
    assert!((lik.logp[0] - expected).abs() < 1e-6, "{} vs {expected}", lik.logp[0]);
}

fn expm(a: &[f64; 4]) -> [f64; 4] {
    let mut out = [1.0, 0.0, 0.0, 1.0];
    let mut term = [1.0, 0.0, 0.0, 1.0];
    for k in 1..40 {
        let t = [
            (term[0] * a[0] + term[1] * a[2]) / k as f64,
            (term[0] * a[1] + term[1] * a[3]) / k as f64,
            (term[2] * a[0] + term[3] * a[2]) / k as f64,
            (term[2] * a[1] + term[3] * a[3]) / k as f64,
        ];
        term = t;
        for i in 0..4 {
            out[i] += term[i];
        }
    }
    out
}

#[test]
fn two_dimensional_linear_flow_matches_discrete_change_of_variables() {
    let mut rng = Rng::new(7);
    let lam = rng.uniform_array(&[2, 2], -0.8, 0.8);
    let net = linear_deepset(2, lam.clone(), DenseArray::zeros(&[2, 2]));
    let s = sets(&mut rng, 2, 4, 2);
    let lik = log_likelihood(&net, &s, &SolverConfig::dopri5(1e-9, 1e-9), &TraceConfig::exact(), None, 0).unwrap();
    // element dynamics dz/dt = lambda^T z, so the flow map is expm(lambda^T)
    let l = lam.data();
    let m = expm(&[l[0], l[2], l[1], l[3]]);
    let logdet = (m[0] * m[3] - m[1] * m[2]).abs().ln();
    for b in 0..2 {
        let x = s.set(b);
        let mut lp = 0.0;
        for i in 0..4 {
            let (x0, x1) = (x.data()[2 * i], x.data()[2 * i + 1]);
            let z0 = m[0] * x0 + m[1] * x1;
            let z1 = m[2] * x0 + m[3] * x1;
            lp += -0.5 * (z0 * z0 + z1 * z1) - LOG_2PI + logdet;
        }
        assert!((lik.logp[b] - lp).abs() < 1e-5, "{} vs {lp}", lik.logp[b]);
    }
}

#[test]
fn likelihood_is_exchangeable() {
    let mut rng = Rng::new(8);
    for kind in 0..3 {
        let net = random_net(kind, 2, &mut rng);
        let s = sets(&mut rng, 2, 6, 2);
        let cfg = SolverConfig::dopri5(1e-6, 1e-6);
        let base = log_likelihood(&net, &s, &cfg, &TraceConfig::exact(), None, 0).unwrap();
        for _ in 0..5 {
            let p = rng.permutation(6);
            let lik = log_likelihood(&net, &s.permute(&p).unwrap(), &cfg, &TraceConfig::exact(), None, 0).unwrap();
            for (a, b) in lik.logp.iter().zip(&base.logp) {
                assert!((a - b).abs() < 1e-9, "{kind}: {a} vs {b}");
            }
        }
    }
}

#[test]
fn likelihood_is_batch_invariant() {
    let mut rng = Rng::new(9);
    let net = random_net(0, 2, &mut rng);
    let s = sets(&mut rng, 3, 5, 2);
    let cfg = SolverConfig::dopri5(1e-5, 1e-5);
    let all = log_likelihood(&net, &s, &cfg, &TraceConfig::exact(), None, 0).unwrap();
    let one = log_likelihood(&net, &s.slice(1, 1).unwrap(), &cfg, &TraceConfig::exact(), None, 0).unwrap();
    assert_eq!(all.logp[1], one.logp[0]);
}

#[test]
fn zero_flow_samples_are_standard_normal() {
    let mut rng = Rng::new(10);
    let net = EquivariantNet::new("f", NetSpec::new(2, vec![LayerSpec::DeepSet { width: 2, pool: Pool::Mean, activation: Activation::Tanh }]), &mut rng).unwrap();
    let s = sample(&net, 100, 50, &mut rng, &SolverConfig::dopri5(1e-5, 1e-5), None).unwrap();
    let xs = s.values().data();
    let count = (xs.len() / 2) as f64;
    let mean0 = xs.iter().step_by(2).sum::<f64>() / count;
    let mean1 = xs.iter().skip(1).step_by(2).sum::<f64>() / count;
    let var0 = xs.iter().step_by(2).map(|v| (v - mean0).powi(2)).sum::<f64>() / count;
    let cov = xs.chunks(2).map(|p| (p[0] - mean0) * (p[1] - mean1)).sum::<f64>() / count;
    let se = 1.0 / count.sqrt();
    assert!(mean0.abs() < 4.0 * se && mean1.abs() < 4.0 * se);
    assert!((var0 - 1.0).abs() < 4.0 * 2f64.sqrt() * se);
    assert!(cov.abs() < 4.0 * se);
}

#[test]
fn sample_then_likelihood_round_trip() {
    let mut rng = Rng::new(11);
    let net = random_net(2, 2, &mut rng);
    let cfg = SolverConfig::dopri5(1e-5, 1e-5);
    let mut draw = Rng::new(99);
    let base = SetBatch::new(draw.normal_array(&[2, 16, 2])).unwrap();
    let x = invert(&net, &base, &cfg, None).unwrap();
    let lik = log_likelihood(&net, &x, &cfg, &TraceConfig::exact(), None, 0).unwrap();
    assert!(lik.logp.iter().all(|v| v.is_finite()));
    assert!(lik.z1.values().max_abs_diff(base.values()) < 1e-4);
    // larger sets than any training size still integrate
    let big = sample(&net, 64, 1, &mut rng, &cfg, None).unwrap();
    assert!(big.values().is_finite());
}

#[test]
fn conditional_zero_flow_ignores_condition() {
    let mut rng = Rng::new(12);
    let spec = NetSpec::new(2, vec![LayerSpec::ConcatSquash { width: 6, activation: Activation::Tanh }, LayerSpec::ConcatSquash { width: 2, activation: Activation::Identity }])
        .with_cond(3);
    let net = EquivariantNet::new("dec", spec, &mut rng).unwrap();
    let s = sets(&mut rng, 2, 5, 2);
    let c1 = rng.normal_array(&[2, 3]);
    let c2 = c1.scale(10.0);
    let cfg = SolverConfig::dopri5(1e-5, 1e-5);
    for c in [&c1, &c2] {
        let lik = log_likelihood(&net, &s, &cfg, &TraceConfig::exact(), Some(Condition { cond: c, t: 0.5 }), 0).unwrap();
        assert_eq!(lik.logp, base_log_density(&s));
    }
}

#[test]
fn unrolled_likelihood_matches_solver() {
    let mut rng = Rng::new(13);
    let net = random_net(1, 2, &mut rng);
    let s = sets(&mut rng, 2, 5, 2);
    let mut g = Graph::new();
    let x = g.input("x");
    let lp = build_log_likelihood(&mut g, &net, x, s.shape(), &basis_probes(s.shape()), 1.0, 6, None).unwrap();
    g.forward(&Bindings::new().bind_store(net.params()).bind("x", s.values())).unwrap();
    let graph_lp = g.value(lp).data().to_vec();
    let direct = log_likelihood(&net, &s, &SolverConfig::rk4(6), &TraceConfig::exact(), None, 0).unwrap();
    for (a, b) in graph_lp.iter().zip(&direct.logp) {
        assert!((a - b).abs() < 1e-10);
    }
}

#[test]
fn batch_loss_gradient_matches_finite_differences() {
    let mut rng = Rng::new(14);
    let net = random_net(0, 2, &mut rng);
    let s = sets(&mut rng, 2, 3, 2);
    let tc = TraceConfig::exact();
    let (_, grads) = batch_loss(&net, &s, 3, &tc, &mut rng).unwrap();
    let name = "f.0.lambda";
    let h = 1e-5;
    for k in [0, 3, 7] {
        let eval = |delta: f64| {
            let mut n2 = net.clone();
            n2.params_mut().get_mut(name).unwrap().data_mut()[k] += delta;
            batch_loss(&n2, &s, 3, &tc, &mut Rng::new(0)).unwrap().0
        };
        let fd = -(eval(h) - eval(-h)) / (2.0 * h);
        let an = grads[name].data()[k];
        assert!(crate::autodiff::rel_err(an, fd) < 1e-5, "{an} vs {fd}");
    }
}

#[test]
fn zero_learning_rate_keeps_ppll_constant() {
    let mut rng = Rng::new(15);
    let mut net = random_net(0, 2, &mut rng);
    let train = sets(&mut rng, 8, 4, 2);
    let mut cfg = CnfTrainConfig::new(3, 4, 0.0);
    cfg.trace = TraceConfig::exact();
    let before = net.params().clone();
    let report = train_cnf(&mut net, &train, Some(&train), &cfg, |_| {}).unwrap();
    assert_eq!(net.params(), &before);
    let v: Vec<f64> = report.epochs.iter().map(|e| e.val_ppll.unwrap()).collect();
    assert!(v.windows(2).all(|w| w[0] == w[1]));
    let t: Vec<f64> = report.epochs.iter().map(|e| e.train_ppll).collect();
    assert!(t.windows(2).all(|w| (w[0] - w[1]).abs() < 1e-12));
}
