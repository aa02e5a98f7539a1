mod common;

use common::{cdf_by_quadrature, cdf_by_quadrature_tol, pdf, simpson};
use fdi_mdp::numerics::{bvn_cdf, mvn_rect_prob, solve_dare, std_normal_cdf, std_normal_quantile, GaussianSpec, Rect};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

#[test]
fn cdf_matches_quadrature_on_a_thousand_points() {
    let mut worst: f64 = 0.0;
    for k in 0..1000 {
        let x = -9.0 + 18.0 * k as f64 / 999.0;
        worst = worst.max((std_normal_cdf(x) - cdf_by_quadrature(x)).abs());
    }
    assert!(worst < 1e-10, "worst error {worst:e}");
}

/// `Φ₂(x, y; ρ) = ∫_{−∞}^x φ(s) Φ((y − ρs)/√(1−ρ²)) ds`.
fn bvn_by_quadrature(x: f64, y: f64, rho: f64) -> f64 {
    let s = (1.0 - rho * rho).sqrt();
    let f = |t: f64| pdf(t) * cdf_by_quadrature_tol((y - rho * t) / s, 1e-12);
    simpson(&f, -12.0, x, 1e-11)
}

#[test]
fn bivariate_cdf_matches_quadrature() {
    for &rho in &[-0.95, -0.6, -0.2, 0.0, 0.3, 0.7, 0.93] {
        for &x in &[-2.5, -0.7, 0.0, 1.1, 3.0] {
            for &y in &[-1.9, -0.2, 0.4, 2.2] {
                let got = bvn_cdf(x, y, rho);
                let want = bvn_by_quadrature(x, y, rho);
                assert!((got - want).abs() < 1e-9, "rho={rho} x={x} y={y}: {got} vs {want}");
            }
        }
    }
}

#[test]
fn riccati_closed_form() {
    let s = |v: f64| DMatrix::from_element(1, 1, v);
    let p = solve_dare(&s(1.0), &s(1.0), &s(1.0), &s(10.0)).unwrap();
    assert!((p[(0, 0)] - (1.0 + 41f64.sqrt()) / 2.0).abs() < 1e-9);
    // Root of P² − 0.25P − 1 = 0.
    let p = solve_dare(&s(0.5), &s(1.0), &s(1.0), &s(1.0)).unwrap();
    assert!((p[(0, 0)] - (0.25 + (0.0625f64 + 4.0).sqrt()) / 2.0).abs() < 1e-9);
}

fn partition_sum(g: &GaussianSpec, edges: &[f64]) -> f64 {
    let d = g.dim();
    let cells = edges.len() - 1;
    let mut total = 0.0;
    for idx in 0..cells.pow(d as u32) {
        let mut lower = Vec::with_capacity(d);
        let mut upper = Vec::with_capacity(d);
        let mut rest = idx;
        for _ in 0..d {
            lower.push(edges[rest % cells]);
            upper.push(edges[rest % cells + 1]);
            rest /= cells;
        }
        total += mvn_rect_prob(g, &Rect::new(lower, upper).unwrap()).unwrap().value;
    }
    total
}

#[test]
fn rectangle_partitions_sum_to_one() {
    let edges = [f64::NEG_INFINITY, -1.5, -0.25, 0.0, 0.8, 2.0, f64::INFINITY];
    let g2 = GaussianSpec::new(
        DVector::from_vec(vec![0.3, -0.4]),
        DMatrix::from_row_slice(2, 2, &[2.0, -0.9, -0.9, 1.0]),
    )
    .unwrap();
    assert!((partition_sum(&g2, &edges) - 1.0).abs() < 1e-6);

    let g3 = GaussianSpec::new(
        DVector::from_vec(vec![0.1, 0.0, -0.2]),
        DMatrix::from_row_slice(3, 3, &[1.0, 0.4, 0.2, 0.4, 1.5, -0.3, 0.2, -0.3, 0.8]),
    )
    .unwrap();
    let coarse = [f64::NEG_INFINITY, -0.5, 0.5, f64::INFINITY];
    assert!((partition_sum(&g3, &coarse) - 1.0).abs() < 1e-6);
}

proptest! {
    #[test]
    fn cdf_symmetry(x in -30.0f64..30.0) {
        prop_assert!((std_normal_cdf(-x) - (1.0 - std_normal_cdf(x))).abs() < 1e-15);
    }

    #[test]
    fn quantile_is_inverse(p in 1e-12f64..(1.0 - 1e-12)) {
        let x = std_normal_quantile(p);
        prop_assert!((std_normal_cdf(x) - p).abs() <= 1e-13 + 1e-10 * p.min(1.0 - p));
    }

    #[test]
    fn bivariate_cdf_is_a_cdf(x in -6.0f64..6.0, y in -6.0f64..6.0, dx in 0.0f64..2.0, dy in 0.0f64..2.0, rho in -0.99f64..0.99) {
        let f = |a: f64, b: f64| bvn_cdf(a, b, rho);
        prop_assert!((f(x, y) - f(y, x)).abs() < 1e-14);
        let mass = f(x + dx, y + dy) - f(x, y + dy) - f(x + dx, y) + f(x, y);
        prop_assert!(mass >= -1e-14);
        prop_assert!(f(x, y) <= std_normal_cdf(x).min(std_normal_cdf(y)) + 1e-14);
        prop_assert!(f(x, y) >= (std_normal_cdf(x) + std_normal_cdf(y) - 1.0).max(0.0) - 1e-14);
    }
}
