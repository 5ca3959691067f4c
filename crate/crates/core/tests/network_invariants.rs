use iqt_core::autodiff::Tensor;
use iqt_core::network::{build_aniso_unet, forward, MasksemblesSpec, ModelSpec, ModelWeights, ParamKind};
use iqt_core::pipeline::{build_dataset, DatasetConfig};
use iqt_core::training::{train, TrainConfig};
use iqt_core::volume::PhantomConfig;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn masks_survive_training_unchanged() {
    let spec = ModelSpec {
        masksembles: Some(MasksemblesSpec { m: 2, s: 1.5 }),
        ..ModelSpec::toy(4)
    };
    let cfg = DatasetConfig {
        subjects: 2,
        phantom: PhantomConfig {
            dims: [32, 32, 32],
            ..Default::default()
        },
        ..Default::default()
    };
    let ds = build_dataset(&cfg).unwrap();
    let tc = TrainConfig {
        epochs: 2,
        batch_size: 4,
        seed: 3,
        ..Default::default()
    };
    let before: ModelWeights<f32> = build_aniso_unet(&spec, tc.seed).unwrap();
    let out = train(&spec, &ds.patches, &tc).unwrap();
    assert!(out.weights.params().iter().any(|p| p.kind == ParamKind::Mask));
    assert_eq!(out.weights.mask_digest(), before.mask_digest());
}

#[test]
fn single_all_ones_mask_matches_plain_network() {
    let plain_spec = ModelSpec::toy(4);
    let masked_spec = ModelSpec {
        masksembles: Some(MasksemblesSpec { m: 1, s: 1.0 }),
        ..plain_spec.clone()
    };
    let masked: ModelWeights<f64> = build_aniso_unet(&masked_spec, 9).unwrap();
    let mut plain: ModelWeights<f64> = build_aniso_unet(&plain_spec, 1).unwrap();
    for p in plain.params_mut() {
        p.tensor = masked.get(&p.name).unwrap().clone();
    }
    let x = Tensor::random([1, 1, 16, 16, 4], &mut ChaCha8Rng::seed_from_u64(4));
    assert_eq!(forward(&masked, &masked_spec, &x).unwrap(), forward(&plain, &plain_spec, &x).unwrap());
}
