use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::classifier::LabeledSetBatch;
use crate::equivariant::SetBatch;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::DenseArray;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ShapeKind {
    /// Evenly spaced points on the unit circle with a random phase.
    Ring,
    /// Two perpendicular unit-length arms through the origin, randomly
    /// oriented.
    Cross,
    TwoMoons,
    /// Four equal-weight modes at `(+-0.7, +-0.7)`.
    GaussianBlobs,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 4] = [ShapeKind::Ring, ShapeKind::Cross, ShapeKind::TwoMoons, ShapeKind::GaussianBlobs];

    pub fn name(self) -> &'static str {
        match self {
            ShapeKind::Ring => "ring",
            ShapeKind::Cross => "cross",
            ShapeKind::TwoMoons => "two-moons",
            ShapeKind::GaussianBlobs => "gaussian-blobs",
        }
    }
}

impl fmt::Display for ShapeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ShapeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ring" => Ok(ShapeKind::Ring),
            "cross" => Ok(ShapeKind::Cross),
            "two-moons" | "moons" => Ok(ShapeKind::TwoMoons),
            "gaussian-blobs" | "blobs" => Ok(ShapeKind::GaussianBlobs),
            other => Err(Error::InvalidArgument(format!(
                "unknown shape family {other:?} (expected ring, cross, two-moons or gaussian-blobs)"
            ))),
        }
    }
}

pub const BLOB_CENTERS: [[f64; 2]; 4] = [[0.7, 0.7], [-0.7, 0.7], [-0.7, -0.7], [0.7, -0.7]];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShapeFamily {
    pub kind: ShapeKind,
    /// Standard deviation of isotropic Gaussian jitter added to every point.
    pub noise: f64,
    pub label: usize,
}

impl ShapeFamily {
    pub fn new(kind: ShapeKind, noise: f64, label: usize) -> Self {
        Self { kind, noise, label }
    }

    /// One `(n, 2)` set.
    pub fn sample(&self, n: usize, rng: &mut Rng) -> DenseArray {
        let mut pts = Vec::with_capacity(2 * n);
        match self.kind {
            ShapeKind::Ring => {
                let phase = rng.uniform_range(0.0, 2.0 * PI);
                for k in 0..n {
                    let a = phase + 2.0 * PI * k as f64 / n as f64;
                    pts.extend([a.cos(), a.sin()]);
                }
            }
            ShapeKind::Cross => {
                let rot = rng.uniform_range(0.0, PI / 2.0);
                let (c, s) = (rot.cos(), rot.sin());
                for k in 0..n {
                    let r = rng.uniform_range(-1.0, 1.0);
                    let (x, y) = if k % 2 == 0 { (r, 0.0) } else { (0.0, r) };
                    pts.extend([c * x - s * y, s * x + c * y]);
                }
            }
            ShapeKind::TwoMoons => {
                for k in 0..n {
                    let a = rng.uniform_range(0.0, PI);
                    let (x, y) = if k % 2 == 0 {
                        (a.cos(), a.sin())
                    } else {
                        (1.0 - a.cos(), 0.5 - a.sin())
                    };
                    pts.extend([(x - 0.5) / 1.5, (y - 0.25) / 1.5]);
                }
            }
            ShapeKind::GaussianBlobs => {
                for _ in 0..n {
                    let c = BLOB_CENTERS[rng.below(4)];
                    pts.extend(c);
                }
            }
        }
        if self.noise > 0.0 {
            for p in pts.iter_mut() {
                *p += self.noise * rng.normal();
            }
        }
        let order = rng.permutation(n);
        let shuffled: Vec<f64> = order.iter().flat_map(|&i| [pts[2 * i], pts[2 * i + 1]]).collect();
        DenseArray::from_parts(vec![n, 2], shuffled)
    }
}

/// `count` labeled sets, cycling through `families` so classes stay
/// balanced. Set `i` draws from stream `i` of `seed`.
pub fn gen_class_sets(families: &[ShapeFamily], count: usize, n: usize, seed: u64) -> Result<LabeledSetBatch> {
    if families.is_empty() {
        return Err(Error::InvalidArgument("no shape families given".into()));
    }
    if n < 4 {
        return Err(Error::InvalidArgument(format!("sets need at least 4 points, got {n}")));
    }
    let mut sets = Vec::with_capacity(count);
    let mut labels = Vec::with_capacity(count);
    for i in 0..count {
        let fam = &families[i % families.len()];
        let mut rng = Rng::with_stream(seed, i as u64);
        sets.push(fam.sample(n, &mut rng));
        labels.push(fam.label);
    }
    let classes = families.iter().map(|f| f.label).max().unwrap_or(0) + 1;
    LabeledSetBatch::new(SetBatch::from_sets(&sets)?, labels, classes)
}

/// Lloyd's k-means with k-means++ seeding; returns cluster ids per point.
pub fn kmeans(points: &[[f64; 2]], k: usize, iters: usize, rng: &mut Rng) -> Vec<usize> {
    let d2 = |a: &[f64; 2], b: &[f64; 2]| (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2);
    let mut centers = vec![points[rng.below(points.len())]];
    while centers.len() < k {
        let w: Vec<f64> = points
            .iter()
            .map(|p| centers.iter().map(|c| d2(p, c)).fold(f64::INFINITY, f64::min))
            .collect();
        let total: f64 = w.iter().sum();
        let mut u = rng.uniform() * total;
        let mut pick = points.len() - 1;
        for (i, wi) in w.iter().enumerate() {
            if u < *wi {
                pick = i;
                break;
            }
            u -= wi;
        }
        centers.push(points[pick]);
    }
    let mut assign = vec![0; points.len()];
    for _ in 0..iters {
        for (a, p) in assign.iter_mut().zip(points) {
            *a = (0..k)
                .min_by(|&i, &j| d2(p, &centers[i]).total_cmp(&d2(p, &centers[j])))
                .unwrap_or(0);
        }
        let mut sums = vec![[0.0; 3]; k];
        for (a, p) in assign.iter().zip(points) {
            sums[*a][0] += p[0];
            sums[*a][1] += p[1];
            sums[*a][2] += 1.0;
        }
        for (c, s) in centers.iter_mut().zip(&sums) {
            if s[2] > 0.0 {
                *c = [s[0] / s[2], s[1] / s[2]];
            }
        }
    }
    assign
}
