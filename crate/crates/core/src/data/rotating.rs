use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::DenseArray;
use crate::tvae::TemporalSetSeries;

/// Rasterized stroke glyphs used as rotating templates.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BaseShape {
    #[default]
    Seven,
    Ell,
}

const PIXEL: f64 = 0.05;
const STROKE: f64 = 0.09;

impl BaseShape {
    fn strokes(self) -> &'static [[f64; 4]] {
        match self {
            BaseShape::Seven => &[[-0.5, 0.7, 0.55, 0.7], [0.55, 0.7, -0.1, -0.8], [-0.05, 0.0, 0.45, 0.0]],
            BaseShape::Ell => &[[-0.35, 0.8, -0.35, -0.6], [-0.35, -0.6, 0.55, -0.6]],
        }
    }

    /// Grid points within the stroke width of the glyph, centered on their
    /// centroid.
    pub fn template(self) -> Vec<[f64; 2]> {
        let dist = |p: [f64; 2], s: &[f64; 4]| {
            let (ax, ay, bx, by) = (s[0], s[1], s[2], s[3]);
            let (dx, dy) = (bx - ax, by - ay);
            let u = (((p[0] - ax) * dx + (p[1] - ay) * dy) / (dx * dx + dy * dy)).clamp(0.0, 1.0);
            ((p[0] - ax - u * dx).powi(2) + (p[1] - ay - u * dy).powi(2)).sqrt()
        };
        let steps = (2.0 / PIXEL) as i64;
        let mut pts = Vec::new();
        for i in -steps..=steps {
            for j in -steps..=steps {
                let p = [i as f64 * PIXEL, j as f64 * PIXEL];
                if self.strokes().iter().any(|s| dist(p, s) <= STROKE) {
                    pts.push(p);
                }
            }
        }
        let m = pts.len() as f64;
        let cx = pts.iter().map(|p| p[0]).sum::<f64>() / m;
        let cy = pts.iter().map(|p| p[1]).sum::<f64>() / m;
        pts.iter().map(|p| [p[0] - cx, p[1] - cy]).collect()
    }
}

fn default_omega() -> f64 {
    PI / 2.0
}

fn default_times() -> Vec<f64> {
    vec![0.0, 0.25, 0.5, 0.75, 1.0]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RotatingSeriesSpec {
    #[serde(default)]
    pub shape: BaseShape,
    /// Clockwise angular speed in radians per unit time.
    #[serde(default = "default_omega")]
    pub omega: f64,
    #[serde(default = "default_times")]
    pub times: Vec<f64>,
    pub n: usize,
    /// Standard deviation of Gaussian jitter on each sampled pixel.
    #[serde(default)]
    pub noise: f64,
    /// Start each series at a uniform random orientation instead of
    /// upright; the rotation relative to `t = 0` is still `angle(t)`.
    #[serde(default)]
    pub random_phase: bool,
}

impl RotatingSeriesSpec {
    pub fn new(n: usize, noise: f64) -> Self {
        Self { shape: BaseShape::Seven, omega: default_omega(), times: default_times(), n, noise, random_phase: false }
    }

    /// Signed rotation angle at time `t`; negative is clockwise.
    pub fn angle(&self, t: f64) -> f64 {
        -self.omega * t
    }
}

pub fn rotate(points: &[[f64; 2]], angle: f64) -> Vec<[f64; 2]> {
    let (c, s) = (angle.cos(), angle.sin());
    points.iter().map(|p| [c * p[0] - s * p[1], s * p[0] + c * p[1]]).collect()
}

/// `count` series; each step subsamples `n` template pixels afresh (without
/// replacement while the template is large enough), jitters them and
/// rotates by `angle(t)`, after the series' initial phase when
/// `random_phase` is set. Series `i` uses stream `i`.
pub fn gen_rotating_series(spec: &RotatingSeriesSpec, count: usize, seed: u64) -> Result<Vec<TemporalSetSeries>> {
    if spec.times.is_empty() {
        return Err(Error::InvalidArgument("empty time grid".into()));
    }
    if spec.times.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidArgument("times must be strictly increasing".into()));
    }
    if spec.n == 0 {
        return Err(Error::InvalidArgument("n must be positive".into()));
    }
    let template = spec.shape.template();
    let m = template.len();
    (0..count)
        .map(|i| {
            let mut rng = Rng::with_stream(seed, i as u64);
            let phase = if spec.random_phase { rng.uniform_range(-PI, PI) } else { 0.0 };
            let sets = spec
                .times
                .iter()
                .map(|&t| {
                    let idx: Vec<usize> = if spec.n <= m {
                        rng.permutation(m)[..spec.n].to_vec()
                    } else {
                        (0..spec.n).map(|_| rng.below(m)).collect()
                    };
                    let pts: Vec<[f64; 2]> = idx
                        .iter()
                        .map(|&k| {
                            let p = template[k];
                            if spec.noise > 0.0 {
                                [p[0] + spec.noise * rng.normal(), p[1] + spec.noise * rng.normal()]
                            } else {
                                p
                            }
                        })
                        .collect();
                    let rot = rotate(&pts, phase + spec.angle(t));
                    DenseArray::from_parts(vec![spec.n, 2], rot.into_iter().flatten().collect())
                })
                .collect();
            TemporalSetSeries::new(spec.times.clone(), sets)
        })
        .collect()
}

/// Least-squares rotation taking `a` onto `b` for paired, origin-centered
/// points.
pub fn procrustes_angle(a: &[[f64; 2]], b: &[[f64; 2]]) -> f64 {
    let (mut cross, mut dot) = (0.0, 0.0);
    for (p, q) in a.iter().zip(b) {
        dot += p[0] * q[0] + p[1] * q[1];
        cross += p[0] * q[1] - p[1] * q[0];
    }
    cross.atan2(dot)
}

/// Mean squared distance from each point of `set`, rotated back by
/// `angle`, to its nearest template point.
pub fn chamfer(template: &[[f64; 2]], set: &[[f64; 2]], angle: f64) -> f64 {
    let back = rotate(set, -angle);
    back.iter()
        .map(|p| {
            template
                .iter()
                .map(|q| (p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2))
                .fold(f64::INFINITY, f64::min)
        })
        .sum::<f64>()
        / set.len() as f64
}

/// Rotation in `(-pi, pi]` that best aligns an unpaired `set` with
/// `template`: a 720-point grid search on the one-sided chamfer distance,
/// refined by golden-section search around the best cell.
pub fn fit_rotation(template: &[[f64; 2]], set: &[[f64; 2]]) -> f64 {
    let grid = 720;
    let h = 2.0 * PI / grid as f64;
    let best = (0..grid)
        .map(|k| -PI + (k + 1) as f64 * h)
        .map(|a| (a, chamfer(template, set, a)))
        .min_by(|x, y| x.1.total_cmp(&y.1))
        .map_or(0.0, |x| x.0);
    let (mut lo, mut hi) = (best - h, best + h);
    let phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut x1 = hi - phi * (hi - lo);
    let mut x2 = lo + phi * (hi - lo);
    let mut f1 = chamfer(template, set, x1);
    let mut f2 = chamfer(template, set, x2);
    for _ in 0..60 {
        if f1 <= f2 {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - phi * (hi - lo);
            f1 = chamfer(template, set, x1);
        } else {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + phi * (hi - lo);
            f2 = chamfer(template, set, x2);
        }
    }
    wrap_angle(0.5 * (lo + hi))
}

/// Maps an angle into `(-pi, pi]`.
pub fn wrap_angle(a: f64) -> f64 {
    let mut r = a.rem_euclid(2.0 * PI);
    if r > PI {
        r -= 2.0 * PI;
    }
    r
}

/// `(n, 2)` array as point pairs.
pub fn points(set: &DenseArray) -> Vec<[f64; 2]> {
    set.data().chunks(2).map(|c| [c[0], c[1]]).collect()
}
