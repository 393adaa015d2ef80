use std::f64::consts::PI;

use congesta_core::equilibrium::{EquilibriumOptions, EquilibriumState, GridSpec, PTable};
use congesta_core::fields::{FieldSpec, Potential, Volume};
use congesta_core::levelset::LevelCurve;
use congesta_core::oned::{endpoint_speed_1d, solve_domain_1d, velocity_1d};
use congesta_core::tangential::{minimality_gap, solve_theta_on_curve, tangential_velocity};
use proptest::prelude::*;

fn ellipse(n: usize, a: f64, b: f64, bump: f64) -> LevelCurve {
    let vertices: Vec<[f64; 2]> = (0..n)
        .map(|i| {
            let s = 2.0 * PI * i as f64 / n as f64;
            [a * s.cos(), b * s.sin()]
        })
        .collect();
    let tau_inv = vertices.iter().map(|x| 1.0 + bump * x[0] / a).collect();
    let grad = vertices.iter().map(|x| 2.0 + bump * x[1] / b).collect();
    let normal = vertices.iter().map(|x| [x[0] / a, x[1] / b]).collect();
    LevelCurve::from_parts(1.0, 0.0, 1.0, vertices, tau_inv, grad, normal, [0.0, 0.0])
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn harmonic_table_is_increasing(tau0 in 0.2f64..3.0, n in 0.5f64..8.0) {
        let spec = FieldSpec::planar(Potential::Harmonic, Volume::Constant(tau0)).unwrap();
        let state = EquilibriumState::solve(&spec, n, 0.0, &GridSpec::square(4.0, 64), &EquilibriumOptions::default()).unwrap();
        prop_assert!(state.table().is_strictly_increasing());
        let exact = n * tau0 / (2.0 * PI);
        prop_assert!((state.fermi_level() - exact).abs() < 1e-3 * exact);
    }

    #[test]
    fn table_interpolates_monotone_data(slope in 0.1f64..10.0, curvature in 0.0f64..5.0, x in 0.0f64..1.0) {
        let levels = congesta_core::equilibrium::table_levels(2.0, 128);
        let values: Vec<f64> = levels.iter().map(|u| slope * u + curvature * u * u).collect();
        let table = PTable::new(2.0, values);
        let u = 2.0 * x;
        let range = 2.0 * slope + 4.0 * curvature;
        prop_assert!((table.value(u) - (slope * u + curvature * u * u)).abs() < 1e-5 * range);
        prop_assert!(table.derivative(u) > 0.0);
    }

    #[test]
    fn tangential_solution_is_minimal(n in 64usize..256, a in 0.5f64..2.0, b in 0.5f64..2.0, bump in -0.4f64..0.4, k in 1usize..5) {
        let curve = ellipse(n, a, b, bump);
        let raw: Vec<f64> = curve.arclength.iter().map(|s| (2.0 * PI * k as f64 * s / curve.length).sin()).collect();
        let sol = solve_theta_on_curve(&curve, &raw, 1e10).unwrap();
        prop_assert!(sol.system.weighted_mean(&sol.theta).abs() < 1e-10 * (1.0 + sol.theta.iter().map(|t| t.abs()).fold(0.0, f64::max)));
        let v = tangential_velocity(&curve, &sol.theta);
        for c in [-1.0, -0.1, 0.1, 1.0] {
            prop_assert!(minimality_gap(&curve, &v, c) >= -1e-12);
        }
    }

    #[test]
    fn drifting_well_moves_rigidly(speed in -1.0f64..1.0, n in 0.5f64..4.0, t in 0.0f64..2.0) {
        let spec = FieldSpec::line(Potential::DriftingHarmonic { speed }, Volume::Constant(1.0)).unwrap();
        let d = solve_domain_1d(&spec, n, t).unwrap();
        let (da, db) = endpoint_speed_1d(&spec, n, t).unwrap();
        prop_assert!((da - speed).abs() < 1e-8 && (db - speed).abs() < 1e-8);
        let mid = 0.5 * (d.a + d.b);
        prop_assert!((velocity_1d(&spec, n, mid, t).unwrap() - speed).abs() < 1e-8);
    }
}
