use proptest::prelude::*;
use qac_core::flows::{FiniteDataset, FlowFamily, FlowSpec};
use qac_core::metrics::wasserstein2;
use qac_core::model::OracleVelocity;
use qac_core::samplers::{conditional_sample, SolverConfig, TimeSchedule};
use qac_core::toy::{self, ToyKind, ToySpec};

const FAMILIES: [FlowFamily; 4] = [
    FlowFamily::RectifiedFlow,
    FlowFamily::Vp,
    FlowFamily::LinearEdm,
    FlowFamily::Ve,
];

proptest! {
    #[test]
    fn endpoints(x0 in prop::collection::vec(-5f64..5.0, 3), eps in prop::collection::vec(-3f64..3.0, 3)) {
        for family in FAMILIES {
            let flow = FlowSpec::for_family(family);
            prop_assert_eq!(flow.interpolate(&x0, &eps, flow.t_min).unwrap(), x0.clone());
            let end = flow.interpolate(&x0, &eps, flow.t_max).unwrap();
            let c = flow.coefficients(flow.t_max).unwrap();
            for k in 0..3 {
                let prior_side = match family {
                    FlowFamily::RectifiedFlow | FlowFamily::Vp => c.s * eps[k],
                    FlowFamily::LinearEdm | FlowFamily::Ve => x0[k] + c.s * eps[k],
                };
                prop_assert!((end[k] - prior_side).abs() < 1e-12 * (1.0 + prior_side.abs()), "{:?}", family);
            }
        }
    }

    #[test]
    fn velocity_is_time_derivative(x0 in prop::collection::vec(-5f64..5.0, 2), eps in prop::collection::vec(-3f64..3.0, 2)) {
        for family in FAMILIES {
            let flow = FlowSpec::for_family(family);
            let mut prev_err = None;
            for k in 1..=20 {
                let t = flow.t_max * k as f64 / 21.0;
                let v = flow.velocity(&x0, &eps, t).unwrap();
                // Central differences at h and h/2: second-order error shrinks ~4x.
                let fd = |h: f64| -> Vec<f64> {
                    let up = flow.interpolate(&x0, &eps, t + h).unwrap();
                    let dn = flow.interpolate(&x0, &eps, t - h).unwrap();
                    up.iter().zip(&dn).map(|(a, b)| (a - b) / (2.0 * h)).collect()
                };
                let h = 1e-3 * flow.t_max;
                let err = |d: Vec<f64>| d.iter().zip(&v).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
                let (e1, e2) = (err(fd(h)), err(fd(h / 2.0)));
                let scale = 1.0 + v.iter().map(|a| a.abs()).fold(0.0, f64::max);
                prop_assert!(e1 < 1e-4 * scale, "{:?} t={} err={}", family, t, e1);
                if e1 > 1e-9 * scale {
                    prop_assert!(e2 < e1 / 3.0, "{:?} t={} {} -> {}", family, t, e1, e2);
                }
                prev_err = Some(e1);
            }
            prop_assert!(prev_err.is_some());
        }
    }
}

#[test]
fn oracle_simulation_approaches_data() {
    let data = toy::generate(&ToySpec {
        kind: ToyKind::RING8,
        count: 64,
        seed: 3,
    })
    .unwrap();
    for family in FAMILIES {
        let flow = FlowSpec::for_family(family);
        let oracle = OracleVelocity {
            flow,
            data: &data,
            conditional: false,
        };
        let reference: Vec<f64> = (0..4).flat_map(|_| data.points().to_vec()).collect();
        let (mut dists, mut nearest) = (Vec::new(), Vec::new());
        for steps in [2, 8, 64] {
            let schedule = match family {
                FlowFamily::LinearEdm | FlowFamily::Ve => {
                    TimeSchedule::polynomial(steps + 1, flow.oracle_floor(), flow.t_max, 7.0)
                }
                _ => TimeSchedule::uniform(steps + 1, flow.oracle_floor(), flow.t_max),
            };
            let s = conditional_sample(&oracle, None, &flow, &SolverConfig::Euler(schedule), 256, 9).unwrap();
            dists.push(wasserstein2(&s.x, &reference, 2).unwrap());
            // Mean distance to the closest data point.
            let near =
                s.x.chunks(2)
                    .map(|p| {
                        data.rows()
                            .map(|q| ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt())
                            .fold(f64::INFINITY, f64::min)
                    })
                    .sum::<f64>()
                    / 256.0;
            nearest.push(near);
        }
        // Finite-sample W2 keeps a multinomial floor; collapse onto the
        // support is what must vanish.
        assert!(dists[2] < dists[0], "{family:?}: {dists:?}");
        assert!(
            nearest[2] < nearest[1] && nearest[1] < nearest[0],
            "{family:?}: {nearest:?}"
        );
        // The oracle stops at its time floor, leaving noise of scale s(floor).
        let residual = flow.coefficients(flow.oracle_floor()).unwrap().s;
        assert!(nearest[2] < 0.02 + 2.0 * residual, "{family:?}: {nearest:?}");
    }
}

#[test]
fn one_point_dataset_samples_collapse() {
    let data = FiniteDataset::new(2, vec![0.5, -0.25]).unwrap();
    let flow = FlowSpec::rectified();
    let oracle = OracleVelocity {
        flow,
        data: &data,
        conditional: false,
    };
    let solver = SolverConfig::with_nfe("euler", 16, &flow).unwrap();
    let s = conditional_sample(&oracle, None, &flow, &solver, 32, 1).unwrap();
    for row in s.x.chunks(2) {
        assert!((row[0] - 0.5).abs() < 0.01 && (row[1] + 0.25).abs() < 0.01);
    }
}
