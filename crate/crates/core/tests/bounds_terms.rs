use degm_core::bounds::{
    discrepancy_slack, empirical_discrepancy, rademacher_estimate, risk, squared_loss, Affine, HypothesisPool, IdentityMap,
    Reference,
};
use degm_core::rng::SeedStreams;
use degm_core::Tensor;

fn affine_pool(params: &[(f64, f64)]) -> HypothesisPool<Affine> {
    params
        .iter()
        .enumerate()
        .map(|(i, &(scale, shift))| (format!("h{i}"), Affine { scale, shift }))
        .collect()
}

/// Loss between two affine maps on one sample, summed over coordinates.
fn pair_loss(x: &[f64], a: (f64, f64), b: (f64, f64)) -> f64 {
    x.iter().map(|v| ((a.0 - b.0) * v + (a.1 - b.1)).powi(2)).sum()
}

fn expected(rows: &[Vec<f64>], a: (f64, f64), b: (f64, f64)) -> f64 {
    rows.iter().map(|r| pair_loss(r, a, b)).sum::<f64>() / rows.len() as f64
}

#[test]
fn discrepancy_matches_enumeration() {
    let p_rows = vec![vec![0.0, 1.0], vec![0.5, 0.5], vec![1.0, 1.0]];
    let q_rows = vec![vec![2.0, -1.0], vec![0.0, 0.0]];
    let params = [(1.0, 0.0), (0.5, 0.2), (-1.0, 1.0), (2.0, -0.5)];
    let to_t = |r: &[Vec<f64>]| Tensor::matrix(r.len(), 2, r.concat()).unwrap();
    let got = empirical_discrepancy(&to_t(&p_rows), &to_t(&q_rows), &affine_pool(&params), false).unwrap();
    let mut want: f64 = 0.0;
    for &a in &params {
        for &b in &params {
            want = want.max((expected(&p_rows, a, b) - expected(&q_rows, a, b)).abs());
        }
    }
    assert!((got - want).abs() < 1e-12, "{got} vs {want}");
    let normalized = empirical_discrepancy(&to_t(&p_rows), &to_t(&q_rows), &affine_pool(&params), true).unwrap();
    assert!((normalized - want / 2.0).abs() < 1e-12);
}

#[test]
fn discrepancy_of_identical_sets_is_zero() {
    let x = Tensor::matrix(2, 3, vec![0.1, 0.2, 0.3, 0.9, 0.8, 0.7]).unwrap();
    let d = empirical_discrepancy(&x, &x, &affine_pool(&[(1.0, 0.0), (0.3, 0.1)]), true).unwrap();
    assert_eq!(d, 0.0);
    assert!(empirical_discrepancy(&x, &x, &affine_pool(&[(1.0, 0.0)]), true).is_err());
}

#[test]
fn slack_closed_form() {
    let s = discrepancy_slack(2000, 2000, 1.0, 0.05, 0.01, 0.02).unwrap();
    let want = 8.0 * 0.03 + 6.0 * ((80.0f64).ln() / 4000.0).sqrt();
    assert!((s - want).abs() < 1e-12);
    assert!(discrepancy_slack(10, 10, 1.0, 1.0, 0.0, 0.0).is_err());
    assert!(discrepancy_slack(0, 10, 1.0, 0.5, 0.0, 0.0).is_err());
}

#[test]
fn risk_against_identity() {
    let x = Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let h = Affine { scale: 1.0, shift: 1.0 };
    assert_eq!(risk(&h, &x, Reference::Identity, false).unwrap(), 2.0);
    assert_eq!(risk(&h, &x, Reference::Identity, true).unwrap(), 1.0);
    assert_eq!(risk(&IdentityMap, &x, Reference::Hypothesis(&h), false).unwrap(), 2.0);
    assert_eq!(squared_loss(&[0.0, 3.0], &[4.0, 0.0]).unwrap(), 25.0);
}

#[test]
fn rademacher_is_bounded_by_max_loss() {
    let x = Tensor::matrix(3, 2, vec![0.0, 1.0, 1.0, 0.0, 0.5, 0.5]).unwrap();
    let pool = affine_pool(&[(1.0, 0.0), (0.0, 0.0), (0.5, 0.5)]);
    let r = rademacher_estimate(&x, &pool, 50, false, &mut SeedStreams::new(1).stream("sign")).unwrap();
    assert!(r >= 0.0);
    assert!(r <= 2.0, "{r}");
}
