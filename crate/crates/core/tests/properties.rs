use proptest::prelude::*;

use fpsi::config::{parse_config, RunConfig};
use fpsi::grid::{
    discrete_divergence, stream_to_velocity, DeformationField, FluidGrid, Lattice, Rect, SolidGrid, StreamVelocity,
};
use fpsi::injectivity::ciarlet_necas_gap;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn curl_velocities_are_discretely_divergence_free(seed in prop::collection::vec(-1.0f64..1.0, 11 * 11), nx in 5usize..12) {
        let fluid = FluidGrid::new(Lattice::new(nx, 7, Rect::new(-1.0, 0.0, 2.0, 1.5)).unwrap());
        let psi = StreamVelocity { psi: seed.iter().cycle().take(fluid.num_dofs()).copied().collect() };
        let v = stream_to_velocity(&fluid, &psi).unwrap();
        let vmax = v.iter().fold(0.0f64, |m, x| m.max(x[0].abs()).max(x[1].abs()));
        let div = discrete_divergence(&fluid.lattice, &v).unwrap();
        let worst = div.iter().fold(0.0f64, |m, d| m.max(d.abs())) * fluid.lattice.dx / vmax.max(1e-300);
        prop_assert!(worst <= 1e-13, "scaled divergence {worst}");
    }

    #[test]
    fn injective_affine_maps_have_no_gap(a in 0.3f64..2.0, d in 0.3f64..2.0, b in -0.5f64..0.5, c in -0.5f64..0.5, tx in -2.0f64..2.0) {
        prop_assume!(a * d - b * c > 0.05);
        let grid = SolidGrid::new(Lattice::new(6, 6, Rect::new(0.0, 0.0, 1.0, 1.0)).unwrap(), vec![]).unwrap();
        let eta = DeformationField::from_fn(&grid, |x| [a * x[0] + b * x[1] + tx, c * x[0] + d * x[1]]);
        let rep = ciarlet_necas_gap(&grid, &eta, None).unwrap();
        prop_assert!(rep.gap <= 1e-10 && rep.boundary_simple);
    }

    #[test]
    fn config_echo_round_trips(m in 1usize..10, windows in 1usize..8, a in 4.5f64..20.0, seed in 0..=i64::MAX as u64) {
        let mut c = RunConfig::default();
        c.scheme.tau = 0.001 * m as f64;
        c.scheme.h = c.scheme.tau * 4.0;
        c.scheme.horizon = c.scheme.h * windows as f64;
        c.physics.a = a;
        c.seed = seed;
        prop_assert!(c.validate().is_ok());
        prop_assert_eq!(parse_config(&c.echo()).unwrap(), c);
    }
}
