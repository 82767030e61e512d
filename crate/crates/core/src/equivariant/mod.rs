//! Permutation-equivariant, time-conditioned set dynamics.

mod layers;
mod set;

use serde::{Deserialize, Serialize};

pub use layers::{Ctx, Layer, LayerSpec, Pool};
pub use set::SetBatch;

use crate::autodiff::{Bindings, Graph, ParamStore, Var};
use crate::error::{Error, Result};
use crate::ode::NeuralDynamics;
use crate::rng::Rng;
use crate::tensor::DenseArray;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TimeInjection {
    /// `t` is appended to every element's features before the first layer.
    #[default]
    Concat,
    None,
}

fn yes() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetSpec {
    /// Element dimension of the input.
    pub dim: usize,
    pub layers: Vec<LayerSpec>,
    #[serde(default)]
    pub time: TimeInjection,
    /// Width of the per-set condition vector (concatsquash layers only).
    #[serde(default)]
    pub cond_dim: usize,
    #[serde(default = "yes")]
    pub zero_last: bool,
}

impl NetSpec {
    pub fn new(dim: usize, layers: Vec<LayerSpec>) -> Self {
        Self {
            dim,
            layers,
            time: TimeInjection::Concat,
            cond_dim: 0,
            zero_last: true,
        }
    }

    pub fn with_time(mut self, time: TimeInjection) -> Self {
        self.time = time;
        self
    }

    pub fn with_cond(mut self, cond_dim: usize) -> Self {
        self.cond_dim = cond_dim;
        self
    }

    pub fn random_last(mut self) -> Self {
        self.zero_last = false;
        self
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().map_or(self.dim, |l| l.width())
    }

    fn time_column(&self) -> bool {
        self.time == TimeInjection::Concat
            && !matches!(self.layers.first(), Some(LayerSpec::ConcatSquash { .. }))
    }
}

/// A stack of equivariant layers.
#[derive(Clone, Debug)]
pub struct EquivariantNet {
    pub spec: NetSpec,
    layers: Vec<Layer>,
    params: ParamStore,
    /// Adds element-index features to the input, which breaks equivariance.
    /// Only for negative controls.
    sabotage: bool,
}

impl EquivariantNet {
    pub fn new(prefix: &str, spec: NetSpec, rng: &mut Rng) -> Result<Self> {
        if spec.layers.is_empty() {
            return Err(Error::InvalidArgument("a net needs at least one layer".into()));
        }
        let mut din = spec.dim + spec.time_column() as usize;
        let mut layers = Vec::with_capacity(spec.layers.len());
        for (i, ls) in spec.layers.iter().enumerate() {
            let l = Layer::new(ls.clone(), format!("{prefix}.{i}"), din, spec.cond_dim)?;
            din = l.dout;
            layers.push(l);
        }
        let mut params = ParamStore::new();
        let last = layers.len() - 1;
        for (i, l) in layers.iter().enumerate() {
            if i == last && spec.zero_last {
                l.init_zero_output(&mut params, rng);
            } else {
                l.init(&mut params, rng);
            }
        }
        Ok(Self { spec, layers, params, sabotage: false })
    }

    /// Same architecture around an existing parameter store.
    pub fn with_params(mut self, params: ParamStore) -> Result<Self> {
        for (name, p) in self.params.iter() {
            let q = params
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))?;
            if q.shape() != p.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter {name} has shape {:?}, expected {:?}",
                    q.shape(),
                    p.shape()
                )));
            }
        }
        self.params = params;
        Ok(self)
    }

    pub fn sabotaged(mut self) -> Self {
        self.sabotage = true;
        self
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn into_params(self) -> ParamStore {
        self.params
    }

    /// Whether [`EquivariantNet::build_jvp`] is available.
    pub fn supports_jvp(&self) -> bool {
        !self
            .layers
            .iter()
            .any(|l| matches!(l.spec, LayerSpec::DeepSet { pool: Pool::Max, .. }))
    }

    fn input(&self, g: &mut Graph, x: Var, ctx: &Ctx) -> Var {
        let mut h = x;
        if self.sabotage {
            let d = self.spec.dim;
            let idx = DenseArray::from_fn(&[ctx.batch, ctx.n, d], |k| 0.1 * ((k / d) % ctx.n) as f64);
            let c = g.constant(idx);
            h = g.add(h, c);
        }
        if self.spec.time_column() {
            let tc = g.constant(DenseArray::full(&[ctx.batch, ctx.n, 1], ctx.t));
            h = g.concat(&[h, tc], -1);
        }
        h
    }

    /// Output of the stack for a `(batch, n, dim)` input.
    pub fn build(&self, g: &mut Graph, x: Var, shape: [usize; 3], t: f64, cond: Option<Var>) -> Var {
        let ctx = Ctx { batch: shape[0], n: shape[1], t, cond };
        let mut h = self.input(g, x, &ctx);
        for l in &self.layers {
            h = l.build(g, h, &ctx);
        }
        h
    }

    /// Output and Jacobian-vector products for `probes` tangents stacked as
    /// `(probes, batch, n, dim)`.
    #[allow(clippy::too_many_arguments)]
    pub fn build_jvp(
        &self,
        g: &mut Graph,
        x: Var,
        xd: Var,
        shape: [usize; 3],
        probes: usize,
        t: f64,
        cond: Option<Var>,
    ) -> Result<(Var, Var)> {
        let ctx = Ctx { batch: shape[0], n: shape[1], t, cond };
        let mut h = self.input(g, x, &ctx);
        let mut hd = xd;
        if self.spec.time_column() {
            let z = g.constant(DenseArray::zeros(&[probes, shape[0], shape[1], 1]));
            hd = g.concat(&[hd, z], -1);
        }
        for l in &self.layers {
            (h, hd) = l.build_jvp(g, h, hd, &ctx)?;
        }
        Ok((h, hd))
    }

    /// Evaluates the net on a batch of sets.
    pub fn forward(&self, s: &SetBatch, t: f64, cond: Option<&DenseArray>) -> Result<SetBatch> {
        let mut g = Graph::new();
        let x = g.input("x");
        let c = cond.map(|_| g.input("cond"));
        self.build(&mut g, x, s.shape(), t, c);
        let mut b = Bindings::new().bind_store(&self.params).bind("x", s.values());
        if let Some(cv) = cond {
            b.insert("cond", cv);
        }
        SetBatch::new(g.forward(&b)?.clone())
    }

    fn check_dynamics(&self, shape: &[usize]) {
        debug_assert_eq!(shape.len(), 3, "set dynamics need a (batch, n, d) state");
        debug_assert_eq!(self.spec.out_dim(), self.spec.dim, "dynamics must preserve the element dimension");
    }
}

impl NeuralDynamics for EquivariantNet {
    fn params(&self) -> &ParamStore {
        &self.params
    }

    fn build(&self, g: &mut Graph, y: Var, shape: &[usize], t: f64) -> Var {
        self.check_dynamics(shape);
        EquivariantNet::build(self, g, y, [shape[0], shape[1], shape[2]], t, None)
    }
}

/// Dynamics with a fixed condition and a fixed time input, autonomous in the
/// integration variable.
pub struct Conditioned<'a> {
    pub net: &'a EquivariantNet,
    pub cond: &'a DenseArray,
    pub t: f64,
}

impl NeuralDynamics for Conditioned<'_> {
    fn params(&self) -> &ParamStore {
        &self.net.params
    }

    fn build(&self, g: &mut Graph, y: Var, shape: &[usize], _s: f64) -> Var {
        let c = g.constant(self.cond.clone());
        self.net.build(g, y, [shape[0], shape[1], shape[2]], self.t, Some(c))
    }
}
