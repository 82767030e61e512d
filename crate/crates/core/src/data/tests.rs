use std::f64::consts::PI;

use super::*;
use crate::cnf::LOG_2PI;
use crate::rng::Rng;

#[test]
fn noiseless_ring_is_on_unit_circle() {
    let b = gen_class_sets(&[ShapeFamily::new(ShapeKind::Ring, 0.0, 0)], 5, 37, 3).unwrap();
    for i in 0..5 {
        let p = points(&b.sets.set(i));
        let cx = p.iter().map(|q| q[0]).sum::<f64>() / 37.0;
        let cy = p.iter().map(|q| q[1]).sum::<f64>() / 37.0;
        for q in &p {
            assert!((((q[0] - cx).powi(2) + (q[1] - cy).powi(2)).sqrt() - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn generators_are_deterministic_and_balanced() {
    let fams: Vec<ShapeFamily> = ShapeKind::ALL.iter().enumerate().map(|(i, k)| ShapeFamily::new(*k, 0.1, i)).collect();
    let a = gen_class_sets(&fams, 40, 16, 9).unwrap();
    let b = gen_class_sets(&fams, 40, 16, 9).unwrap();
    let c = gen_class_sets(&fams, 40, 16, 10).unwrap();
    assert_eq!(a.sets, b.sets);
    assert_eq!(a.labels, b.labels);
    assert_ne!(a.sets, c.sets);
    assert_eq!(a.classes, 4);
    for k in 0..4 {
        assert_eq!(a.labels.iter().filter(|&&l| l == k).count(), 10);
    }
    assert!(gen_class_sets(&fams, 4, 3, 0).is_err());
}

#[test]
fn unknown_family_is_rejected() {
    assert!("hexagon".parse::<ShapeKind>().is_err());
    assert_eq!("blobs".parse::<ShapeKind>().unwrap(), ShapeKind::GaussianBlobs);
    assert_eq!("two-moons".parse::<ShapeKind>().unwrap(), ShapeKind::TwoMoons);
}

#[test]
fn blobs_recover_four_clusters() {
    let b = gen_class_sets(&[ShapeFamily::new(ShapeKind::GaussianBlobs, 0.05, 0)], 10, 100, 1).unwrap();
    let pts = points(b.sets.values());
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p[0]).sum::<f64>() / n;
    let my = pts.iter().map(|p| p[1]).sum::<f64>() / n;
    // mode spread 0.7 per axis over 1000 points
    assert!(mx.abs() < 0.1 && my.abs() < 0.1, "{mx} {my}");
    let truth: Vec<usize> = pts
        .iter()
        .map(|p| {
            (0..4)
                .min_by(|&i, &j| {
                    let di = (p[0] - BLOB_CENTERS[i][0]).powi(2) + (p[1] - BLOB_CENTERS[i][1]).powi(2);
                    let dj = (p[0] - BLOB_CENTERS[j][0]).powi(2) + (p[1] - BLOB_CENTERS[j][1]).powi(2);
                    di.total_cmp(&dj)
                })
                .unwrap()
        })
        .collect();
    let assign = kmeans(&pts, 4, 50, &mut Rng::new(2));
    let mut pure = 0;
    for c in 0..4 {
        let mut counts = [0usize; 4];
        for (a, t) in assign.iter().zip(&truth) {
            if *a == c {
                counts[*t] += 1;
            }
        }
        pure += counts.iter().max().unwrap();
    }
    assert!(pure as f64 / n >= 0.99, "purity {}", pure as f64 / n);
}

#[test]
fn standard_normal_ppll_matches_formula() {
    let d = 2;
    let out = gen_density_sets(&Mixture::standard_normal(d), 50, 100, 4).unwrap();
    let lp: Vec<f64> = out.sets.values().data().chunks(d).map(|p| Mixture::standard_normal(d).log_density(p)).collect();
    let m = lp.len() as f64;
    let mean = lp.iter().sum::<f64>() / m;
    let sd = (lp.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (m - 1.0)).sqrt();
    let expect = -(d as f64) / 2.0 * LOG_2PI - d as f64 / 2.0;
    assert!((mean - expect).abs() < 3.0 * sd / m.sqrt());
    assert_eq!(mean, out.analytic_ppll);
}

#[test]
fn zero_weight_component_is_never_used() {
    let single = Mixture { weights: vec![1.0], means: vec![vec![2.0, -1.0]], stds: vec![0.5] };
    let two = Mixture { weights: vec![1.0, 0.0], means: vec![vec![2.0, -1.0], vec![-9.0, 9.0]], stds: vec![0.5, 3.0] };
    let a = gen_density_sets(&single, 3, 20, 5).unwrap();
    let b = gen_density_sets(&two, 3, 20, 5).unwrap();
    assert_eq!(a.sets, b.sets);
    assert_eq!(a.analytic_ppll, b.analytic_ppll);
}

#[test]
fn invalid_mixtures_are_rejected() {
    let mut m = Mixture::four_mode(0.4);
    m.weights[0] = 0.5;
    assert!(gen_density_sets(&m, 1, 1, 0).is_err());
    let mut m = Mixture::four_mode(0.4);
    m.stds[1] = 0.0;
    assert!(m.validate().is_err());
    let mut m = Mixture::four_mode(0.4);
    m.means[2] = vec![1.0];
    assert!(m.validate().is_err());
}

#[test]
fn four_mode_monte_carlo_matches_quadrature() {
    let mix = Mixture::four_mode(0.4);
    let out = gen_density_sets(&mix, 100, 100, 6).unwrap();
    let lp: Vec<f64> = out.sets.values().data().chunks(2).map(|p| mix.log_density(p)).collect();
    let m = lp.len() as f64;
    let mean = lp.iter().sum::<f64>() / m;
    let se = (lp.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (m - 1.0)).sqrt() / m.sqrt();
    // E[log p] by midpoint quadrature on [-4, 4]^2
    let h = 0.01;
    let k = (8.0 / h) as usize;
    let mut expect = 0.0;
    for i in 0..k {
        for j in 0..k {
            let p = [-4.0 + (i as f64 + 0.5) * h, -4.0 + (j as f64 + 0.5) * h];
            let l = mix.log_density(&p);
            expect += l.exp() * l * h * h;
        }
    }
    assert!((mean - expect).abs() < 3.0 * se, "{mean} vs {expect} (se {se})");
}

#[test]
fn gaussian_mle_on_normal_data() {
    let train = gen_density_sets(&Mixture::standard_normal(2), 100, 100, 7).unwrap();
    let test = gen_density_sets(&Mixture::standard_normal(2), 100, 100, 8).unwrap();
    let mle = gaussian_mle_ppll(&train.sets, &test.sets).unwrap();
    assert!((mle - test.analytic_ppll).abs() < 0.01, "{mle} vs {}", test.analytic_ppll);
    let four = gen_density_sets(&Mixture::four_mode(0.4), 100, 100, 9).unwrap();
    assert!(gaussian_mle_ppll(&four.sets, &four.sets).unwrap() < four.analytic_ppll);
}

fn in_template(template: &[[f64; 2]], p: &[f64; 2]) -> bool {
    template.iter().any(|q| (q[0] - p[0]).abs() < 1e-12 && (q[1] - p[1]).abs() < 1e-12)
}

#[test]
fn rotating_series_at_zero_is_unrotated() {
    let spec = RotatingSeriesSpec::new(32, 0.0);
    let tpl = spec.shape.template();
    assert!(tpl.len() > 100);
    let s = gen_rotating_series(&spec, 3, 1).unwrap();
    for series in &s {
        assert_eq!(series.times, vec![0.0, 0.25, 0.5, 0.75, 1.0]);
        assert!(points(&series.sets[0]).iter().all(|p| in_template(&tpl, p)));
    }
    let mut full = spec.clone();
    full.omega = 2.0 * PI;
    let s = gen_rotating_series(&full, 2, 1).unwrap();
    for series in &s {
        let last = points(&series.sets[4]);
        assert!(last.iter().all(|p| tpl.iter().any(|q| (q[0] - p[0]).abs() < 1e-12 && (q[1] - p[1]).abs() < 1e-12)));
    }
}

#[test]
fn rotating_series_errors_and_determinism() {
    let mut spec = RotatingSeriesSpec::new(16, 0.02);
    assert_eq!(gen_rotating_series(&spec, 2, 3).unwrap(), gen_rotating_series(&spec, 2, 3).unwrap());
    spec.times.clear();
    assert!(gen_rotating_series(&spec, 1, 0).is_err());
    spec.times = vec![0.0, 0.5, 0.5];
    assert!(gen_rotating_series(&spec, 1, 0).is_err());
}

#[test]
fn fitted_rotation_steps_match_angular_speed() {
    let spec = RotatingSeriesSpec::new(32, 0.0);
    let tpl = spec.shape.template();
    for series in gen_rotating_series(&spec, 4, 2).unwrap() {
        let angles: Vec<f64> = series.sets.iter().map(|s| fit_rotation(&tpl, &points(s))).collect();
        for (w, t) in angles.windows(2).zip(series.times.windows(2)) {
            let step = wrap_angle(w[1] - w[0]);
            assert!((step - spec.angle(t[1] - t[0])).abs() < 1e-3, "{step}");
        }
        assert!(angles[0].abs() < 1e-3);
    }
}

#[test]
fn random_phase_keeps_relative_rotation() {
    let mut spec = RotatingSeriesSpec::new(32, 0.0);
    spec.random_phase = true;
    let tpl = spec.shape.template();
    let mut starts = vec![];
    for series in gen_rotating_series(&spec, 6, 4).unwrap() {
        let angles: Vec<f64> = series.sets.iter().map(|s| fit_rotation(&tpl, &points(s))).collect();
        for (k, t) in series.times.iter().enumerate() {
            assert!((wrap_angle(angles[k] - angles[0]) - spec.angle(*t)).abs() < 1e-3);
        }
        starts.push(angles[0]);
    }
    assert!(starts.iter().any(|a| a.abs() > 0.5));
}

#[test]
fn fit_rotation_agrees_with_paired_procrustes() {
    let tpl = BaseShape::Ell.template();
    let mut rng = Rng::new(3);
    for _ in 0..5 {
        let a = rng.uniform_range(-3.0, 3.0);
        let idx = &rng.permutation(tpl.len())[..40];
        let src: Vec<[f64; 2]> = idx.iter().map(|&k| tpl[k]).collect();
        let dst = rotate(&src, a);
        assert!((procrustes_angle(&src, &dst) - a).abs() < 1e-12);
        assert!(wrap_angle(fit_rotation(&tpl, &dst) - a).abs() < 1e-4);
    }
}

#[test]
fn jsonl_round_trips() {
    let fams = [ShapeFamily::new(ShapeKind::Ring, 0.1, 0), ShapeFamily::new(ShapeKind::Cross, 0.1, 1)];
    let data = gen_class_sets(&fams, 5, 7, 1).unwrap();
    let mut buf = vec![];
    write_labeled(&mut buf, &data).unwrap();
    let back = read_labeled(&buf[..], Some(2)).unwrap();
    assert_eq!(back.sets, data.sets);
    assert_eq!(back.labels, data.labels);

    let mut buf = vec![];
    write_sets(&mut buf, &data.sets, Some(0.5)).unwrap();
    assert!(String::from_utf8(buf.clone()).unwrap().starts_with("{\"t\":0.5,\"points\":[["));
    let (sets, ts) = read_sets(&buf[..]).unwrap();
    assert_eq!(sets, data.sets);
    assert!(ts.iter().all(|t| *t == Some(0.5)));

    let series = gen_rotating_series(&RotatingSeriesSpec::new(6, 0.02), 3, 2).unwrap();
    let mut buf = vec![];
    write_series(&mut buf, &series).unwrap();
    assert_eq!(read_series(&buf[..]).unwrap(), series);
}

#[test]
fn jsonl_rejects_bad_records() {
    assert!(read_sets(&b""[..]).is_err());
    assert!(read_sets(&b"{\"t\":null,\"points\":[[1,2],[3]]}\n"[..]).is_err());
    assert!(read_sets(&b"{\"t\":null,\"pts\":[[1,2]]}\n"[..]).is_err());
    assert!(read_labeled(&b"{\"label\":3,\"points\":[[1,2]]}\n"[..], Some(2)).is_err());
}
