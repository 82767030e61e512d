use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use exnode::autodiff::{Bindings, Graph};
use exnode::cnf::{log_likelihood, trace_exact, trace_hutchinson, TraceConfig};
use exnode::ode::{integrate, rk4_graph, Neural, NeuralDynamics, SolverConfig};
use exnode::{DenseArray, Rng};
use exnode_bench::{eval_trace, flow_net, normal_sets};

fn forward_backward(c: &mut Criterion) {
    let net = flow_net(32, 1);
    let mut group = c.benchmark_group("rk4_unrolled_grad");
    for n in [16, 64, 256] {
        let sets = normal_sets(8, n, 2);
        group.bench_with_input(BenchmarkId::from_parameter(n), &sets, |b, sets| {
            b.iter(|| {
                let mut g = Graph::new();
                let x = g.input("x");
                let shape = sets.shape();
                let y = rk4_graph(&mut g, x, 0.0, 1.0, 8, |g, y, t| NeuralDynamics::build(&net, g, y, &shape, t));
                let loss = g.sum_all(y);
                g.forward(&Bindings::new().bind_store(net.params()).bind("x", sets.values())).unwrap();
                g.backward_from(&[(loss, DenseArray::scalar(1.0))]).unwrap()
            })
        });
    }
    group.finish();
}

fn solvers(c: &mut Criterion) {
    let net = flow_net(32, 3);
    let y0 = normal_sets(4, 64, 4).into_values();
    let mut group = c.benchmark_group("integrate");
    let configs = [
        ("rk4_8", SolverConfig::rk4(8)),
        ("dopri5_1e-5", SolverConfig::dopri5(1e-5, 1e-5)),
        ("dopri5_1e-8", SolverConfig::dopri5(1e-8, 1e-8)),
    ];
    for (name, cfg) in configs {
        group.bench_function(name, |b| b.iter(|| integrate(&Neural(&net), &y0, 0.0, 1.0, &cfg).unwrap()));
    }
    group.finish();
}

fn traces(c: &mut Criterion) {
    let net = flow_net(32, 5);
    let sets = normal_sets(1, 64, 6);
    let mut group = c.benchmark_group("trace");
    group.bench_function("exact_n64", |b| b.iter(|| trace_exact(&net, &sets, 0.5, 256).unwrap()));
    for probes in [1, 10, 100] {
        let cfg = TraceConfig::hutchinson(probes);
        group.bench_with_input(BenchmarkId::new("hutchinson_n64", probes), &cfg, |b, cfg| {
            b.iter(|| trace_hutchinson(&net, &sets, 0.5, cfg, &mut Rng::new(7)).unwrap())
        });
    }
    group.finish();
}

fn likelihood(c: &mut Criterion) {
    let net = flow_net(16, 8);
    let solver = SolverConfig::dopri5(1e-5, 1e-5);
    let mut group = c.benchmark_group("log_likelihood");
    group.sample_size(10);
    for n in [64, 256] {
        let sets = normal_sets(2, n, 9);
        let trace = eval_trace(n);
        group.bench_with_input(BenchmarkId::from_parameter(n), &sets, |b, sets| {
            b.iter(|| log_likelihood(&net, sets, &solver, &trace, None, 0).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, forward_backward, solvers, traces, likelihood);
criterion_main!(benches);
