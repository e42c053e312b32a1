use fpsi::config::{ForceConfig, RateInit, RunConfig};
use fpsi::minimizer::MinimizeStatus;
use fpsi::scheme::{solve_horizon, HaltReason};

fn small() -> RunConfig {
    let mut c = RunConfig::default();
    c.domain.solid_nodes = [7, 7];
    c.domain.container_nodes = [13, 13];
    c.scheme.tau = 0.01;
    c.scheme.h = 0.05;
    c
}

#[test]
fn body_pushed_into_the_wall_halts_mid_run() {
    let mut c = small();
    // the right edge starts moving toward a wall 0.1 away
    c.domain.container = [-0.5, -0.5, 1.1, 1.5];
    c.initial.b = RateInit::Compression { rate: -3.0 };
    c.force = ForceConfig::Zero;
    c.scheme.horizon = 1.0;
    let (p, init) = c.build_problem().unwrap();
    let t = solve_horizon(&p, &init, c.scheme.horizon).unwrap();
    let HaltReason::CollisionDetected { time, reason } = &t.halt else {
        panic!("expected a collision, final time {}", t.final_time());
    };
    println!("halted at {time}: {reason}");
    assert!(*time > 0.0 && *time < c.scheme.horizon);
    // the offending state is not accepted: the ledger stops one step earlier
    assert!((t.ledger.last().unwrap().time + c.scheme.tau - time).abs() < 1e-12);
    assert!(t
        .ledger
        .iter()
        .all(|r| r.status == MinimizeStatus::Converged && r.gap <= 1e-6));
    // every completed window before the halt satisfies the energy inequality
    assert!(t.windows.iter().all(|w| w.holds()));
}

#[test]
fn window_inequality_and_certificate_on_a_small_run() {
    let mut c = small();
    c.scheme.horizon = 0.2;
    let (p, init) = c.build_problem().unwrap();
    let t = solve_horizon(&p, &init, c.scheme.horizon).unwrap();
    assert_eq!(t.halt, HaltReason::HorizonReached);
    assert_eq!(t.windows.len(), 4);
    assert!(t.windows.iter().all(|w| w.holds()));
    assert!(t
        .ledger
        .iter()
        .all(|r| r.certificate_gap <= fpsi::minimizer::certificate_tolerance(r.value_at_rest)));
    assert_eq!(
        t.ledger_csv().lines().next().unwrap(),
        fpsi::scheme::LEDGER_COLUMNS.join(",")
    );
}

#[test]
fn non_integer_window_count_is_rejected() {
    let c = small();
    let (p, init) = c.build_problem().unwrap();
    assert!(matches!(solve_horizon(&p, &init, 0.12), Err(fpsi::Error::Config(_))));
}
