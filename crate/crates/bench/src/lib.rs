//! Shared fixtures for the benchmarks.

use exnode::cnf::TraceConfig;
use exnode::equivariant::{EquivariantNet, LayerSpec, NetSpec, Pool, SetBatch};
use exnode::nn::Activation;
use exnode::Rng;

/// A three-layer mean-pooled flow net with random weights throughout.
pub fn flow_net(width: usize, seed: u64) -> EquivariantNet {
    let spec = NetSpec::new(
        2,
        vec![
            LayerSpec::DeepSet { width, pool: Pool::Mean, activation: Activation::Tanh },
            LayerSpec::DeepSet { width, pool: Pool::Mean, activation: Activation::Tanh },
            LayerSpec::DeepSet { width: 2, pool: Pool::Mean, activation: Activation::Identity },
        ],
    )
    .random_last();
    EquivariantNet::new("flow", spec, &mut Rng::new(seed)).expect("valid spec")
}

pub fn normal_sets(batch: usize, n: usize, seed: u64) -> SetBatch {
    SetBatch::new(Rng::new(seed).normal_array(&[batch, n, 2])).expect("rank-3 batch")
}

/// The trace used at evaluation time for sets of `n` points in the plane.
pub fn eval_trace(n: usize) -> TraceConfig {
    TraceConfig::for_eval(n, 2)
}
