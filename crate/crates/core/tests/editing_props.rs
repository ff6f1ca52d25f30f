use proptest::prelude::*;
use qac_core::denoiser::{DenoiserConfig, DenoiserNet, ImageShape};
use qac_core::editing::{zero_shot_edit_with, DegradationKind, DegradationOp, EditTask};
use qac_core::flows::FlowSpec;
use qac_core::fsq::{CodebookConfig, EncoderArch, EncoderNet};
use qac_core::model::Model;
use qac_core::rng;

const SHAPE: ImageShape = ImageShape {
    channels: 2,
    height: 8,
    width: 8,
};

fn kinds() -> impl Strategy<Value = DegradationKind> {
    prop::sample::select(vec![
        DegradationKind::Mask,
        DegradationKind::Downsample { factor: 2 },
        DegradationKind::Downsample { factor: 4 },
        DegradationKind::ChannelAverage,
    ])
}

fn model() -> Model {
    let cb = CodebookConfig::new(2, 4).unwrap();
    let mut r = rng::seeded(2);
    let den = DenoiserNet::new(DenoiserConfig::image_edm(SHAPE, Some(cb), 0.5), &mut r).unwrap();
    let enc = EncoderNet::new(
        EncoderArch::Mlp {
            input_dim: SHAPE.numel(),
            hidden: 8,
        },
        cb,
        &mut r,
    )
    .unwrap();
    Model::new(FlowSpec::edm(), den, Some(enc)).unwrap()
}

proptest! {
    #[test]
    fn pseudo_inverse_consistency(kind in kinds(), seed in any::<u64>(), rows in 1usize..4) {
        let op = DegradationOp::preserve_all(kind, SHAPE).unwrap();
        let mut r = rng::seeded(seed);
        let x: Vec<f64> = rng::normals(&mut r, rows * SHAPE.numel()).iter().map(|v| v * 1e3).collect();
        let ax = op.apply(&x).unwrap();
        prop_assert_eq!(op.apply(&op.pseudo_invert(&ax).unwrap()).unwrap(), ax);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn preserved_region_is_exact_after_every_step(kind in kinds(), seed in any::<u64>()) {
        let m = model();
        let mut r = rng::seeded(seed);
        let probe = DegradationOp::preserve_all(kind, SHAPE).unwrap();
        let omega: Vec<f64> = (0..probe.degraded_len()).map(|_| (rng::index(&mut r, 2)) as f64).collect();
        let op = DegradationOp::new(kind, SHAPE, omega.clone()).unwrap();
        let z = rng::normals(&mut r, 2 * SHAPE.numel());
        let az = op.apply(&z).unwrap();
        let task = EditTask::new(&m, z, op.clone(), 5, seed).unwrap();
        let mut checked = 0;
        let out = zero_shot_edit_with(&m, &task, |_, x| {
            let ax = op.apply(x).unwrap();
            for (i, (a, b)) in ax.iter().zip(&az).enumerate() {
                if omega[i % omega.len()] == 0.0 {
                    assert_eq!(a.to_bits(), b.to_bits());
                }
            }
            checked += 1;
        })
        .unwrap();
        prop_assert_eq!(checked, 5);
        let again = zero_shot_edit_with(&m, &task, |_, _| {}).unwrap();
        prop_assert_eq!(out, again);
    }
}
