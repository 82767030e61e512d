//! Per-element building blocks: affine maps, layer normalization, tanh MLPs
//! and a gated recurrent cell.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParamStore, Var};
use crate::rng::Rng;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Tanh,
    Identity,
}

impl Activation {
    pub fn apply(self, g: &mut Graph, x: Var) -> Var {
        match self {
            Activation::Tanh => g.tanh(x),
            Activation::Identity => x,
        }
    }

    /// Tangent of the activation given its output `y`.
    pub fn apply_tangent(self, g: &mut Graph, y: Var, xd: Var) -> Var {
        match self {
            Activation::Tanh => {
                let y2 = g.square(y);
                let neg = g.neg(y2);
                let d = g.add_scalar(neg, 1.0);
                g.mul(xd, d)
            }
            Activation::Identity => xd,
        }
    }
}

/// `x W + b` over the last axis.
#[derive(Clone, Debug)]
pub struct Linear {
    pub name: String,
    pub din: usize,
    pub dout: usize,
}

impl Linear {
    pub fn new(name: impl Into<String>, din: usize, dout: usize) -> Self {
        Self { name: name.into(), din, dout }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut Rng) {
        store.init_uniform(format!("{}.w", self.name), &[self.din, self.dout], self.din, rng);
        store.init_uniform(format!("{}.b", self.name), &[self.dout], self.din, rng);
    }

    pub fn init_zeros(&self, store: &mut ParamStore) {
        store.init_zeros(format!("{}.w", self.name), &[self.din, self.dout]);
        store.init_zeros(format!("{}.b", self.name), &[self.dout]);
    }

    pub fn build(&self, g: &mut Graph, x: Var) -> Var {
        let w = g.param(&format!("{}.w", self.name));
        let b = g.param(&format!("{}.b", self.name));
        let h = g.matmul(x, w);
        g.add(h, b)
    }
}

/// Normalization over the last axis with learned gain and bias.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub name: String,
    pub dim: usize,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

impl LayerNorm {
    pub fn new(name: impl Into<String>, dim: usize) -> Self {
        Self { name: name.into(), dim }
    }

    pub fn init(&self, store: &mut ParamStore) {
        store.insert(format!("{}.gain", self.name), crate::DenseArray::ones(&[self.dim]));
        store.init_zeros(format!("{}.bias", self.name), &[self.dim]);
    }

    pub fn build(&self, g: &mut Graph, x: Var) -> Var {
        let mu = g.mean(x, -1, true);
        let mu = g.broadcast(mu, -1, self.dim);
        let xc = g.sub(x, mu);
        let sq = g.square(xc);
        let var = g.mean(sq, -1, true);
        let var = g.add_scalar(var, LAYER_NORM_EPS);
        let inv = g.powf(var, -0.5);
        let inv = g.broadcast(inv, -1, self.dim);
        let xn = g.mul(xc, inv);
        let gain = g.param(&format!("{}.gain", self.name));
        let bias = g.param(&format!("{}.bias", self.name));
        let y = g.mul(xn, gain);
        g.add(y, bias)
    }
}

/// MLP with tanh (by default) between layers; the last layer is linear.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub activation: Activation,
}

impl Mlp {
    pub fn new(name: &str, widths: &[usize]) -> Self {
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(format!("{name}.{i}"), w[0], w[1]))
            .collect();
        Self { layers, activation: Activation::Tanh }
    }

    pub fn with_activation(mut self, activation: Activation) -> Self {
        self.activation = activation;
        self
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut Rng, zero_last: bool) {
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            if zero_last && i == last {
                l.init_zeros(store);
            } else {
                l.init(store, rng);
            }
        }
    }

    pub fn build(&self, g: &mut Graph, x: Var) -> Var {
        let mut h = x;
        for (i, l) in self.layers.iter().enumerate() {
            h = l.build(g, h);
            if i + 1 < self.layers.len() {
                h = self.activation.apply(g, h);
            }
        }
        h
    }
}

/// Gated recurrent unit over `(batch, din)` inputs.
#[derive(Clone, Debug)]
pub struct Gru {
    pub name: String,
    pub din: usize,
    pub hidden: usize,
}

impl Gru {
    pub fn new(name: impl Into<String>, din: usize, hidden: usize) -> Self {
        Self { name: name.into(), din, hidden }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut Rng) {
        for gate in ["r", "z", "n"] {
            store.init_uniform(format!("{}.wi{gate}", self.name), &[self.din, self.hidden], self.hidden, rng);
            store.init_uniform(format!("{}.wh{gate}", self.name), &[self.hidden, self.hidden], self.hidden, rng);
            store.init_uniform(format!("{}.bi{gate}", self.name), &[self.hidden], self.hidden, rng);
            store.init_uniform(format!("{}.bh{gate}", self.name), &[self.hidden], self.hidden, rng);
        }
    }

    fn affine(&self, g: &mut Graph, x: Var, h: Var, gate: &str) -> (Var, Var) {
        let wi = g.param(&format!("{}.wi{gate}", self.name));
        let wh = g.param(&format!("{}.wh{gate}", self.name));
        let bi = g.param(&format!("{}.bi{gate}", self.name));
        let bh = g.param(&format!("{}.bh{gate}", self.name));
        let a = g.matmul(x, wi);
        let a = g.add(a, bi);
        let b = g.matmul(h, wh);
        let b = g.add(b, bh);
        (a, b)
    }

    /// One step; returns the new hidden state.
    pub fn step(&self, g: &mut Graph, x: Var, h: Var) -> Var {
        let (ri, rh) = self.affine(g, x, h, "r");
        let r = g.add(ri, rh);
        let r = g.sigmoid(r);
        let (zi, zh) = self.affine(g, x, h, "z");
        let z = g.add(zi, zh);
        let z = g.sigmoid(z);
        let (ni, nh) = self.affine(g, x, h, "n");
        let gated = g.mul(r, nh);
        let n = g.add(ni, gated);
        let n = g.tanh(n);
        // h' = n + z (h - n)
        let diff = g.sub(h, n);
        let zd = g.mul(z, diff);
        g.add(n, zd)
    }
}
