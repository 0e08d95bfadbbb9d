//! The moment oracle against values frozen from an independent computation.

mod common;

use common::{OuOracle, OuParams};

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-12
}

#[test]
fn stationary_moments() {
    let o = OuOracle::new(&OuParams::default());
    assert!(close(o.p_star[0], 0.5) && close(o.p_star[1], 0.5));
    assert!(close(o.m_star[0], 0.052631578947368));
    assert!(close(o.m_star[1], 0.368421052631579));
    assert!(close(o.s_star[0], 0.072681704260652));
    assert!(close(o.s_star[1], 0.338345864661654));
    assert!(close(o.y_bar, 0.4210526315789473));
}

#[test]
fn corrector_coefficients() {
    let o = OuOracle::new(&OuParams::default());
    assert!(close(o.slope[0], 0.6315789473684211));
    assert!(close(o.slope[1], 0.42105263157894735));
    assert!(close(o.intercept[0], -0.6094182825484764));
    assert!(close(o.intercept[1], 0.23268698060941828));
}

#[test]
fn asymptotic_variance() {
    let o = OuOracle::new(&OuParams::default());
    assert!(close(o.sigma2, 0.4840355736987898), "{}", o.sigma2);
}

#[test]
fn corrector_is_centered_under_stationary_law() {
    let o = OuOracle::new(&OuParams::default());
    let c: f64 = (0..2)
        .map(|i| o.slope[i] * o.m_star[i] + o.intercept[i] * o.p_star[i])
        .sum();
    assert!(c.abs() <= 1e-12);
}

#[test]
fn symmetric_routing_gives_uniform_regimes() {
    let o = OuOracle::new(&OuParams {
        p: 0.2,
        q: 0.6,
        ..OuParams::default()
    });
    assert!(close(o.p_star[0], 0.75) && close(o.p_star[1], 0.25));
}
