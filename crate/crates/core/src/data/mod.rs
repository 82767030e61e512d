//! Seeded synthetic datasets: labeled 2D shape families, Gaussian-mixture
//! density sets with their exact log-likelihood, and rotating glyph series.

mod jsonl;
mod mixture;
mod rotating;
mod shapes;

pub use jsonl::{read_labeled, read_series, read_sets, write_labeled, write_series, write_sets};
pub use mixture::{gaussian_mle_ppll, gen_density_sets, DensitySets, Mixture};
pub use rotating::{
    chamfer, fit_rotation, gen_rotating_series, points, procrustes_angle, rotate, wrap_angle, BaseShape,
    RotatingSeriesSpec,
};
pub use shapes::{gen_class_sets, kmeans, ShapeFamily, ShapeKind, BLOB_CENTERS};

#[cfg(test)]
mod tests;
