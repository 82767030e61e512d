use serde::{Deserialize, Serialize};

use crate::cnf::LOG_2PI;
use crate::equivariant::SetBatch;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::DenseArray;

/// Mixture of isotropic Gaussians.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Mixture {
    pub weights: Vec<f64>,
    pub means: Vec<Vec<f64>>,
    pub stds: Vec<f64>,
}

impl Mixture {
    pub fn standard_normal(d: usize) -> Self {
        Self { weights: vec![1.0], means: vec![vec![0.0; d]], stds: vec![1.0] }
    }

    /// Four equal modes at `(+-1, +-1)`.
    pub fn four_mode(std: f64) -> Self {
        Self {
            weights: vec![0.25; 4],
            means: vec![vec![1.0, 1.0], vec![-1.0, 1.0], vec![-1.0, -1.0], vec![1.0, -1.0]],
            stds: vec![std; 4],
        }
    }

    pub fn dim(&self) -> usize {
        self.means.first().map_or(0, Vec::len)
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.weights.len();
        if k == 0 || self.means.len() != k || self.stds.len() != k {
            return Err(Error::InvalidArgument("mixture needs matching weights, means and stds".into()));
        }
        if self.weights.iter().any(|w| !(0.0..=1.0).contains(w)) || (self.weights.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!(
                "mixture weights must be in [0, 1] and sum to 1, got {:?}",
                self.weights
            )));
        }
        if self.stds.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
            return Err(Error::InvalidArgument("mixture stds must be positive".into()));
        }
        let d = self.dim();
        if d == 0 || self.means.iter().any(|m| m.len() != d) {
            return Err(Error::InvalidArgument("mixture means must share one positive dimension".into()));
        }
        Ok(())
    }

    pub fn log_density(&self, x: &[f64]) -> f64 {
        let d = x.len() as f64;
        let terms: Vec<f64> = self
            .weights
            .iter()
            .zip(&self.means)
            .zip(&self.stds)
            .filter(|((w, _), _)| **w > 0.0)
            .map(|((w, m), s)| {
                let sq: f64 = x.iter().zip(m).map(|(a, b)| (a - b) * (a - b)).sum();
                w.ln() - 0.5 * sq / (s * s) - d * s.ln() - 0.5 * d * LOG_2PI
            })
            .collect();
        let top = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        top + terms.iter().map(|t| (t - top).exp()).sum::<f64>().ln()
    }

    pub fn sample_point(&self, rng: &mut Rng, out: &mut Vec<f64>) {
        let u = rng.uniform();
        let mut acc = 0.0;
        let mut k = self.weights.iter().rposition(|w| *w > 0.0).unwrap_or(0);
        for (i, w) in self.weights.iter().enumerate() {
            acc += w;
            if u < acc && *w > 0.0 {
                k = i;
                break;
            }
        }
        for m in &self.means[k] {
            out.push(m + self.stds[k] * rng.normal());
        }
    }
}

#[derive(Clone, Debug)]
pub struct DensitySets {
    pub sets: SetBatch,
    /// Mean log-density of the drawn points under the generating mixture.
    pub analytic_ppll: f64,
}

/// `count` sets of `n` i.i.d. mixture points; set `i` uses stream `i`.
pub fn gen_density_sets(mix: &Mixture, count: usize, n: usize, seed: u64) -> Result<DensitySets> {
    mix.validate()?;
    if count == 0 || n == 0 {
        return Err(Error::InvalidArgument("count and n must be positive".into()));
    }
    let d = mix.dim();
    let mut data = Vec::with_capacity(count * n * d);
    for i in 0..count {
        let mut rng = Rng::with_stream(seed, i as u64);
        for _ in 0..n {
            mix.sample_point(&mut rng, &mut data);
        }
    }
    let analytic_ppll = data.chunks(d).map(|p| mix.log_density(p)).sum::<f64>() / (count * n) as f64;
    Ok(DensitySets {
        sets: SetBatch::new(DenseArray::from_parts(vec![count, n, d], data))?,
        analytic_ppll,
    })
}

/// Full-covariance Gaussian fitted by maximum likelihood to every point in
/// `train`, scored as mean log-density over the points of `test`.
pub fn gaussian_mle_ppll(train: &SetBatch, test: &SetBatch) -> Result<f64> {
    let d = train.d();
    if test.d() != d {
        return Err(Error::Shape(format!("train d {d} vs test d {}", test.d())));
    }
    let pts: Vec<&[f64]> = train.values().data().chunks(d).collect();
    let m = pts.len() as f64;
    let mut mean = vec![0.0; d];
    for p in &pts {
        for (a, b) in mean.iter_mut().zip(*p) {
            *a += b / m;
        }
    }
    let mut cov = vec![0.0; d * d];
    for p in &pts {
        for i in 0..d {
            for j in 0..d {
                cov[i * d + j] += (p[i] - mean[i]) * (p[j] - mean[j]) / m;
            }
        }
    }
    let l = cholesky(&cov, d).ok_or_else(|| Error::InvalidArgument("degenerate training covariance".into()))?;
    let logdet: f64 = (0..d).map(|i| 2.0 * l[i * d + i].ln()).sum();
    let tpts: Vec<&[f64]> = test.values().data().chunks(d).collect();
    let mut total = 0.0;
    for p in &tpts {
        // solve L y = (p - mean)
        let mut y = vec![0.0; d];
        for i in 0..d {
            let s: f64 = (0..i).map(|k| l[i * d + k] * y[k]).sum();
            y[i] = (p[i] - mean[i] - s) / l[i * d + i];
        }
        let q: f64 = y.iter().map(|v| v * v).sum();
        total += -0.5 * q - 0.5 * logdet - 0.5 * d as f64 * LOG_2PI;
    }
    Ok(total / tpts.len() as f64)
}

fn cholesky(a: &[f64], d: usize) -> Option<Vec<f64>> {
    let mut l = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..=i {
            let s: f64 = (0..j).map(|k| l[i * d + k] * l[j * d + k]).sum();
            if i == j {
                let v = a[i * d + i] - s;
                if v <= 0.0 {
                    return None;
                }
                l[i * d + i] = v.sqrt();
            } else {
                l[i * d + j] = (a[i * d + j] - s) / l[j * d + j];
            }
        }
    }
    Some(l)
}
