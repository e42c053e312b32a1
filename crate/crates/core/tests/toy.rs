use fpsi::study::{toy_naive_study, toy_two_scale_study};
use fpsi::toy::{hyperbolic_estimate_check, two_scale_scheme, ToyEnergy};

#[test]
fn two_scale_converges_for_both_energies() {
    let hs = [0.1, 0.05, 0.025, 0.0125];
    for e in [ToyEnergy::Quadratic, ToyEnergy::DoubleWell] {
        let rows = toy_two_scale_study(e, &[1.0, 0.0], &[0.0, 0.5], &hs, 2.0, 1e-11).unwrap();
        for r in &rows[1..] {
            assert!(r.order >= 0.5, "{e:?} {rows:?}");
            assert!(r.cauchy.is_finite());
        }
        assert!(rows.windows(2).skip(1).all(|w| w[1].cauchy < w[0].cauchy), "{rows:?}");
    }
}

#[test]
fn naive_scheme_is_first_order_against_the_reference() {
    let rows = toy_naive_study(
        ToyEnergy::Quadratic,
        &[1.0, 0.0],
        &[0.0, 1.0],
        &[0.02, 0.01, 0.005],
        2.0,
        1e-11,
    )
    .unwrap();
    for r in &rows[1..] {
        assert!((r.order - 1.0).abs() < 0.2, "{rows:?}");
    }
}

#[test]
fn quadratic_window_estimate_tightens_with_h() {
    let worst = |h: f64| {
        let tau = h * h;
        let traj = two_scale_scheme(ToyEnergy::Quadratic, &[1.0, 0.0], &[0.0, 0.0], tau, h, 2.0).unwrap();
        let checks = hyperbolic_estimate_check(&traj, ToyEnergy::Quadratic, tau, h).unwrap();
        assert!(checks.iter().all(|c| c.holds()));
        checks
            .iter()
            .filter(|c| c.b == c.a + 1)
            .map(|c| c.excess.abs())
            .fold(0.0, f64::max)
    };
    let (coarse, fine) = (worst(0.05), worst(0.0125));
    assert!(fine < 0.5 * coarse, "{coarse} {fine}");
}
