//! Equivariant layers over `(batch, n, d)` sets.
//!
//! Every layer has a primal build and a tangent (forward-mode) build. The
//! tangent input carries an extra leading probe axis, `(P, batch, n, d)`, and
//! the tangent output is the Jacobian-vector product for each probe.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParamStore, Var};
use crate::error::{Error, Result};
use crate::nn::Activation;
use crate::rng::Rng;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pool {
    #[default]
    Mean,
    Max,
}

fn one() -> usize {
    1
}

/// Configuration of one layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LayerSpec {
    /// `act(x lambda + pool(x) gamma + bias)`.
    DeepSet {
        width: usize,
        #[serde(default)]
        pool: Pool,
        #[serde(default)]
        activation: Activation,
    },
    /// Scaled dot-product self-attention across elements, then an output
    /// projection.
    Attention {
        width: usize,
        /// Projection width; defaults to `width`.
        #[serde(default)]
        hidden: Option<usize>,
        #[serde(default = "one")]
        heads: usize,
        #[serde(default)]
        activation: Activation,
    },
    /// `act((x Wx + bx) * sigmoid(t Wtt + c Wtz + bt) + t Wbt + c Wbz + bb)`.
    ConcatSquash {
        width: usize,
        #[serde(default)]
        activation: Activation,
    },
}

impl LayerSpec {
    pub fn width(&self) -> usize {
        match self {
            LayerSpec::DeepSet { width, .. }
            | LayerSpec::Attention { width, .. }
            | LayerSpec::ConcatSquash { width, .. } => *width,
        }
    }

    pub fn activation(&self) -> Activation {
        match self {
            LayerSpec::DeepSet { activation, .. }
            | LayerSpec::Attention { activation, .. }
            | LayerSpec::ConcatSquash { activation, .. } => *activation,
        }
    }
}

/// Evaluation context shared by every layer of a net.
#[derive(Clone, Copy, Debug)]
pub struct Ctx {
    pub batch: usize,
    pub n: usize,
    pub t: f64,
    /// Per-set condition vector, `(batch, cond_dim)`.
    pub cond: Option<Var>,
}

#[derive(Clone, Debug)]
pub struct Layer {
    pub spec: LayerSpec,
    pub name: String,
    pub din: usize,
    pub dout: usize,
    pub cond_dim: usize,
}

impl Layer {
    pub fn new(spec: LayerSpec, name: String, din: usize, cond_dim: usize) -> Result<Self> {
        let dout = spec.width();
        if dout == 0 || din == 0 {
            return Err(Error::InvalidArgument(format!("layer {name} has a zero width")));
        }
        if let LayerSpec::Attention { hidden, heads, .. } = &spec {
            let h = hidden.unwrap_or(dout);
            if *heads == 0 || h % heads != 0 {
                return Err(Error::InvalidArgument(format!(
                    "layer {name}: projection width {h} is not divisible by {heads} heads"
                )));
            }
        }
        Ok(Self { spec, name, din, dout, cond_dim })
    }

    fn p(&self, field: &str) -> String {
        format!("{}.{field}", self.name)
    }

    /// Parameter names and shapes with their fan-in.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>, usize)> {
        let (din, dout, c) = (self.din, self.dout, self.cond_dim);
        let mut v = vec![];
        match &self.spec {
            LayerSpec::DeepSet { .. } => {
                v.push((self.p("lambda"), vec![din, dout], din));
                v.push((self.p("gamma"), vec![din, dout], din));
                v.push((self.p("bias"), vec![dout], din));
            }
            LayerSpec::Attention { hidden, .. } => {
                let h = hidden.unwrap_or(dout);
                for w in ["wq", "wk", "wv"] {
                    v.push((self.p(w), vec![din, h], din));
                }
                v.push((self.p("wo"), vec![h, dout], h));
                v.push((self.p("bo"), vec![dout], h));
            }
            LayerSpec::ConcatSquash { .. } => {
                v.push((self.p("wx"), vec![din, dout], din));
                v.push((self.p("bx"), vec![dout], din));
                v.push((self.p("wtt"), vec![dout], 1 + c));
                v.push((self.p("bt"), vec![dout], 1 + c));
                v.push((self.p("wbt"), vec![dout], 1 + c));
                v.push((self.p("bb"), vec![dout], 1 + c));
                if c > 0 {
                    v.push((self.p("wtz"), vec![c, dout], 1 + c));
                    v.push((self.p("wbz"), vec![c, dout], 1 + c));
                }
            }
        }
        v
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut Rng) {
        for (name, shape, fan_in) in self.param_shapes() {
            store.init_uniform(name, &shape, fan_in, rng);
        }
    }

    /// Zeroes the parameters that feed the output, so the layer emits zero.
    pub fn init_zero_output(&self, store: &mut ParamStore, rng: &mut Rng) {
        self.init(store, rng);
        let zero: &[&str] = match self.spec {
            LayerSpec::DeepSet { .. } => &["lambda", "gamma", "bias"],
            LayerSpec::Attention { .. } => &["wo", "bo"],
            LayerSpec::ConcatSquash { .. } => &["wx", "bx", "wbt", "bb", "wbz"],
        };
        for f in zero {
            if let Some(p) = store.get_mut(&self.p(f)) {
                p.data_mut().fill(0.0);
            }
        }
    }

    pub fn build(&self, g: &mut Graph, x: Var, ctx: &Ctx) -> Var {
        let (pre, _) = self.primal(g, x, ctx);
        self.spec.activation().apply(g, pre)
    }

    fn primal(&self, g: &mut Graph, x: Var, ctx: &Ctx) -> (Var, Saved) {
        match &self.spec {
            LayerSpec::DeepSet { pool, .. } => {
                let lam = g.param(&self.p("lambda"));
                let gam = g.param(&self.p("gamma"));
                let bias = g.param(&self.p("bias"));
                let a = g.matmul(x, lam);
                let pooled = match pool {
                    Pool::Mean => g.mean(x, -2, true),
                    Pool::Max => g.max(x, -2, true),
                };
                let pg = g.matmul(pooled, gam);
                let pg = g.broadcast(pg, -2, ctx.n);
                let s = g.add(a, pg);
                (g.add(s, bias), Saved::None)
            }
            LayerSpec::Attention { hidden, heads, .. } => {
                let h = hidden.unwrap_or(self.dout);
                let hd = h / heads;
                let scale = 1.0 / (hd as f64).sqrt();
                let (q, k, v) = self.qkv(g, x);
                let mut outs = Vec::with_capacity(*heads);
                let mut saved = Vec::with_capacity(*heads);
                for head in 0..*heads {
                    let (qh, kh, vh) = head_slices(g, q, k, v, head, hd, *heads);
                    let kt = g.transpose(kh);
                    let s = g.matmul(qh, kt);
                    let s = g.scale(s, scale);
                    let a = g.softmax(s);
                    outs.push(g.matmul(a, vh));
                    saved.push(Head { q: qh, kt, v: vh, a });
                }
                let hcat = if outs.len() == 1 { outs[0] } else { g.concat(&outs, -1) };
                let wo = g.param(&self.p("wo"));
                let bo = g.param(&self.p("bo"));
                let o = g.matmul(hcat, wo);
                (g.add(o, bo), Saved::Heads(saved))
            }
            LayerSpec::ConcatSquash { .. } => {
                let wx = g.param(&self.p("wx"));
                let bx = g.param(&self.p("bx"));
                let main = g.matmul(x, wx);
                let main = g.add(main, bx);
                let gate = self.cs_affine(g, "wtt", "wtz", "bt", ctx);
                let gate = g.sigmoid(gate);
                let bias = self.cs_affine(g, "wbt", "wbz", "bb", ctx);
                let m = g.mul(main, gate);
                (g.add(m, bias), Saved::Gate(gate))
            }
        }
    }

    fn qkv(&self, g: &mut Graph, x: Var) -> (Var, Var, Var) {
        let wq = g.param(&self.p("wq"));
        let wk = g.param(&self.p("wk"));
        let wv = g.param(&self.p("wv"));
        (g.matmul(x, wq), g.matmul(x, wk), g.matmul(x, wv))
    }

    /// `t W_t + b (+ cond W_z)`, shaped to broadcast against `(batch, n, dout)`.
    fn cs_affine(&self, g: &mut Graph, wt: &str, wz: &str, b: &str, ctx: &Ctx) -> Var {
        let wt = g.param(&self.p(wt));
        let b = g.param(&self.p(b));
        let tw = g.scale(wt, ctx.t);
        let base = g.add(tw, b);
        match (ctx.cond, self.cond_dim) {
            (Some(c), d) if d > 0 => {
                let wz = g.param(&self.p(wz));
                let cz = g.matmul(c, wz);
                let s = g.add(cz, base);
                let s = g.reshape(s, &[ctx.batch as isize, 1, self.dout as isize]);
                g.broadcast(s, -2, ctx.n)
            }
            _ => base,
        }
    }

    /// Primal output and its Jacobian-vector products for tangents `xd`.
    pub fn build_jvp(&self, g: &mut Graph, x: Var, xd: Var, ctx: &Ctx) -> Result<(Var, Var)> {
        if let LayerSpec::DeepSet { pool: Pool::Max, .. } = self.spec {
            return Err(Error::Unsupported(format!(
                "layer {}: forward-mode tangents through max pooling",
                self.name
            )));
        }
        let (pre, saved) = self.primal(g, x, ctx);
        let out = self.spec.activation().apply(g, pre);
        let pre_d = match (&self.spec, saved) {
            (LayerSpec::DeepSet { .. }, _) => {
                let lam = g.param(&self.p("lambda"));
                let gam = g.param(&self.p("gamma"));
                let a = g.matmul(xd, lam);
                let m = g.mean(xd, -2, true);
                let pg = g.matmul(m, gam);
                let pg = g.broadcast(pg, -2, ctx.n);
                g.add(a, pg)
            }
            (LayerSpec::Attention { hidden, heads, .. }, Saved::Heads(saved)) => {
                let h = hidden.unwrap_or(self.dout);
                let hd = h / heads;
                let scale = 1.0 / (hd as f64).sqrt();
                let (qd, kd, vd) = self.qkv(g, xd);
                let mut outs = Vec::with_capacity(*heads);
                for (head, p) in saved.iter().enumerate() {
                    let (qdh, kdh, vdh) = head_slices(g, qd, kd, vd, head, hd, *heads);
                    let kdt = g.transpose(kdh);
                    let s1 = g.matmul(qdh, p.kt);
                    let s2 = g.matmul(p.q, kdt);
                    let sd = g.add(s1, s2);
                    let sd = g.scale(sd, scale);
                    // softmax tangent: a * (sd - sum(a * sd))
                    let asd = g.mul(sd, p.a);
                    let rs = g.sum(asd, -1, true);
                    let rs = g.broadcast(rs, -1, ctx.n);
                    let cen = g.sub(sd, rs);
                    let ad = g.mul(cen, p.a);
                    let h1 = g.matmul(ad, p.v);
                    let h2 = g.matmul(p.a, vdh);
                    outs.push(g.add(h1, h2));
                }
                let hcat = if outs.len() == 1 { outs[0] } else { g.concat(&outs, -1) };
                let wo = g.param(&self.p("wo"));
                g.matmul(hcat, wo)
            }
            (LayerSpec::ConcatSquash { .. }, Saved::Gate(gate)) => {
                let wx = g.param(&self.p("wx"));
                let m = g.matmul(xd, wx);
                g.mul(m, gate)
            }
            _ => unreachable!("saved intermediates match the layer kind"),
        };
        let out_d = self.spec.activation().apply_tangent(g, out, pre_d);
        Ok((out, out_d))
    }
}

struct Head {
    q: Var,
    kt: Var,
    v: Var,
    a: Var,
}

enum Saved {
    None,
    Heads(Vec<Head>),
    Gate(Var),
}

fn head_slices(g: &mut Graph, q: Var, k: Var, v: Var, head: usize, hd: usize, heads: usize) -> (Var, Var, Var) {
    if heads == 1 {
        return (q, k, v);
    }
    let s = head * hd;
    (g.slice(q, -1, s, hd), g.slice(k, -1, s, hd), g.slice(v, -1, s, hd))
}
