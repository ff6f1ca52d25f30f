use proptest::prelude::*;
use qac_core::denoiser::{denoised_from_velocity, velocity_from_denoised, DenoiserConfig, DenoiserNet};
use qac_core::flows::{posterior_spread, FiniteDataset, FlowFamily, FlowSpec};
use qac_core::fsq::{CodebookConfig, EncoderArch, EncoderNet};
use qac_core::model::{Model, VelocityPredictor, ZeroVelocity};
use qac_core::rng;
use qac_core::training::{collect_weights_online, decompose_loss, McConfig, SamplingWeights};

fn conditional_model(seed: u64) -> Model {
    let cb = CodebookConfig::new(2, 4).unwrap();
    let mut r = rng::seeded(seed);
    let mut den = DenoiserNet::new(DenoiserConfig::toy_velocity(2, Some(cb)), &mut r).unwrap();
    // Give the output layer weight so the code path is visible.
    for t in den.params_mut().tensors_mut() {
        for v in t.data_mut() {
            *v += 0.1 * rng::normal(&mut r);
        }
    }
    let enc = EncoderNet::new(
        EncoderArch::Mlp {
            input_dim: 2,
            hidden: 8,
        },
        cb,
        &mut r,
    )
    .unwrap();
    Model::new(FlowSpec::rectified(), den, Some(enc)).unwrap()
}

fn sixteen_points() -> FiniteDataset {
    let mut r = rng::seeded(77);
    FiniteDataset::new(2, rng::normals(&mut r, 32)).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn zeroed_condition_embedding_ignores_codes(seed in any::<u64>(), a in 0u64..16, b in 0u64..16) {
        let mut m = conditional_model(seed);
        let x = [0.3, -0.7, 1.1, 0.2];
        let t = [0.4, 0.8];
        prop_assume!(a != b);
        let before_a = m.predict(&x, &t, Some(&[a, a])).unwrap();
        let before_b = m.predict(&x, &t, Some(&[b, b])).unwrap();
        prop_assert_ne!(before_a, before_b);
        m.denoiser.zero_condition_embedding();
        let pa = m.predict(&x, &t, Some(&[a, a])).unwrap();
        let pb = m.predict(&x, &t, Some(&[b, b])).unwrap();
        prop_assert_eq!(pa, pb);
    }

    #[test]
    fn velocity_denoised_round_trip(
        family in prop::sample::select(vec![FlowFamily::RectifiedFlow, FlowFamily::Vp, FlowFamily::LinearEdm, FlowFamily::Ve]),
        frac in 0.01f64..0.99,
        x in prop::collection::vec(-3f64..3.0, 3),
        d in prop::collection::vec(-3f64..3.0, 3),
    ) {
        let flow = FlowSpec::for_family(family);
        let t = frac * flow.t_max;
        let v = velocity_from_denoised(&flow, &x, t, &d).unwrap();
        let back = denoised_from_velocity(&flow, &x, t, &v).unwrap();
        for (a, b) in back.iter().zip(&d) {
            prop_assert!((a - b).abs() < 1e-9 * (1.0 + b.abs()));
        }
    }

    #[test]
    fn refining_codes_never_raises_spread(
        x in prop::collection::vec(-3f64..3.0, 2),
        t in 0.05f64..0.95,
        coarse in prop::collection::vec(0u64..3, 16),
        split in prop::collection::vec(any::<bool>(), 16),
    ) {
        // Refinement: each coarse code c splits into 2c and 2c+1.
        let fine: Vec<u64> = coarse.iter().zip(&split).map(|(&c, &s)| 2 * c + s as u64).collect();
        let flow = FlowSpec::rectified();
        let base = sixteen_points();
        let a = posterior_spread(&flow, &base.clone().with_codes(coarse).unwrap(), &x, t, true).unwrap();
        let b = posterior_spread(&flow, &base.clone().with_codes(fine).unwrap(), &x, t, true).unwrap();
        let none = posterior_spread(&flow, &base, &x, t, false).unwrap();
        prop_assert!(b <= a + 1e-12 * (1.0 + a));
        prop_assert!(a <= none + 1e-12 * (1.0 + none));
    }

    #[test]
    fn online_weights_stay_normalized(
        batches in prop::collection::vec(prop::collection::vec(0u64..64, 1..20), 1..30),
        mu in 0.0f64..0.999,
    ) {
        let mut w = SamplingWeights::new(64, mu).unwrap();
        for b in &batches {
            collect_weights_online(&mut w, b).unwrap();
            let n = w.normalized().unwrap();
            prop_assert!(n.iter().all(|&(_, p)| p >= 0.0));
            prop_assert!((n.iter().map(|&(_, p)| p).sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }
}

#[test]
fn intersection_term_is_net_independent() {
    let data = sixteen_points().with_codes((0..16).map(|i| i % 4).collect()).unwrap();
    let flow = FlowSpec::rectified();
    let mut mc = McConfig::new(&flow, 2000, 5);
    for conditional in [false, true] {
        mc.conditional = conditional;
        let m = conditional_model(1);
        let net: &dyn VelocityPredictor = if conditional { &m } else { &ZeroVelocity { dim: 2 } };
        let a = decompose_loss(net, &flow, &data, &mc).unwrap();
        let b = decompose_loss(&ZeroVelocity { dim: 2 }, &flow, &data, &mc).unwrap();
        assert_eq!(a.v, b.v);
    }
}
