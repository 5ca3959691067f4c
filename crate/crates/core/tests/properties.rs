use iqt_core::autodiff::{Graph, Tensor};
use iqt_core::metrics::{psnr, rve_from_volumes, ssim, ssim_with_range};
use iqt_core::network::{MasksemblesSpec, ModelSpec};
use iqt_core::normalizer::{LandmarkTable, DEFAULT_PERCENTILES};
use iqt_core::patching::{blend_clip, extract_hf_patches, PatchGrid};
use iqt_core::simulator::blur_downsample_z;
use iqt_core::volume::{Geometry, Volume3D};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tensor(shape: [usize; 5], seed: u64) -> Tensor<f64> {
    Tensor::random(shape, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn volume(dims: [usize; 3], seed: u64) -> Volume3D<f64> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    Volume3D::from_fn(dims, Geometry::isotropic(1.0), |_, _, _| r.random::<f64>()).unwrap()
}

fn with_noise(v: &Volume3D<f64>, sigma: f64, seed: u64) -> Volume3D<f64> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    v.map(|x| x + sigma * (r.random::<f64>() - 0.5)).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn conv_is_linear_in_its_input(seed in 0u64..1000, a in -2.0f64..2.0, b in -2.0f64..2.0, k in prop::sample::select(vec![1usize, 3])) {
        let x = tensor([1, 2, 4, 3, 3], seed);
        let y = tensor([1, 2, 4, 3, 3], seed + 1);
        let w = tensor([3, 2, k, k, k], seed + 2);
        let mut g = Graph::new(false);
        let combo: Vec<f64> = x.data().iter().zip(y.data()).map(|(p, q)| a * p + b * q).collect();
        let (xv, yv, cv, wv) = (
            g.constant(x.clone()),
            g.constant(y.clone()),
            g.constant(Tensor::new(x.shape(), combo).unwrap()),
            g.constant(w),
        );
        let (fx, fy, fc) = (g.conv(xv, wv, None).unwrap(), g.conv(yv, wv, None).unwrap(), g.conv(cv, wv, None).unwrap());
        for i in 0..g.value(fc).len() {
            let lin = a * g.value(fx).data()[i] + b * g.value(fy).data()[i];
            prop_assert!((g.value(fc).data()[i] - lin).abs() < 1e-10);
        }
    }

    #[test]
    fn concat_keeps_both_inputs_and_add_commutes(seed in 0u64..1000, ca in 1usize..4, cb in 1usize..4) {
        let a = tensor([2, ca, 2, 3, 2], seed);
        let b = tensor([2, cb, 2, 3, 2], seed + 1);
        let mut g = Graph::new(false);
        let (av, bv) = (g.constant(a.clone()), g.constant(b.clone()));
        let c = g.concat_channels(av, bv).unwrap();
        let s = 12;
        for n in 0..2 {
            let item = g.value(c).item(n);
            prop_assert_eq!(&item[..ca * s], a.item(n));
            prop_assert_eq!(&item[ca * s..], b.item(n));
        }
        let b2 = g.constant(tensor([2, ca, 2, 3, 2], seed + 2));
        let (p, q) = (g.add(av, b2).unwrap(), g.add(b2, av).unwrap());
        prop_assert_eq!(g.value(p), g.value(q));
    }

    #[test]
    fn training_batchnorm_output_has_beta_mean_and_gamma_spread(seed in 0u64..1000) {
        let x = tensor([3, 2, 3, 3, 2], seed).cast::<f64>();
        let gamma = Tensor::new([1, 2, 1, 1, 1], vec![1.5, 0.5]).unwrap();
        let beta = Tensor::new([1, 2, 1, 1, 1], vec![-0.25, 2.0]).unwrap();
        let mut g = Graph::new(true);
        let (xv, gv, bv) = (g.constant(x), g.constant(gamma), g.constant(beta));
        let y = g.batchnorm(xv, gv, bv, None).unwrap();
        let out = g.value(y);
        for (c, (gm, bt)) in [(1.5, -0.25), (0.5, 2.0)].into_iter().enumerate() {
            let vals: Vec<f64> = (0..3).flat_map(|n| out.item(n)[c * 18..(c + 1) * 18].to_vec()).collect();
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            let v = vals.iter().map(|q| (q - m).powi(2)).sum::<f64>() / vals.len() as f64;
            prop_assert!((m - bt).abs() < 1e-9);
            // population variance of x-hat is var / (var + eps)
            prop_assert!((v.sqrt() - gm).abs() < 1e-3 * gm);
        }
    }

    #[test]
    fn psnr_falls_as_noise_grows(seed in 0u64..1000) {
        let reference = volume([12, 12, 12], seed);
        let p: Vec<f64> = [1.0, 2.0, 4.0].iter().map(|&s| psnr(&with_noise(&reference, 0.05 * s, seed + 7), &reference).unwrap()).collect();
        prop_assert!(p[0] > p[1] && p[1] > p[2]);
    }

    #[test]
    fn ssim_is_symmetric_at_a_shared_range(seed in 0u64..1000, l in 0.5f64..3.0) {
        let a = volume([12, 12, 12], seed);
        let b = with_noise(&a, 0.3, seed + 1);
        let ab = ssim_with_range(&a, &b, l).unwrap();
        let ba = ssim_with_range(&b, &a, l).unwrap();
        prop_assert!((ab - ba).abs() < 1e-12);
        prop_assert!((-1.0..=1.0).contains(&ab));
        prop_assert_eq!(ssim(&a, &a).unwrap(), 1.0);
    }

    #[test]
    fn rve_is_bounded_and_symmetric(v in 0.0f64..1e4, w in 0.0f64..1e4) {
        prop_assume!(v + w > 0.0);
        let r = rve_from_volumes(v, w).unwrap();
        prop_assert!((0.0..=2.0).contains(&r));
        prop_assert_eq!(r, rve_from_volumes(w, v).unwrap());
    }

    #[test]
    fn landmark_map_is_monotone(seed in 0u64..1000, probes in prop::collection::vec(-10.0f64..30.0, 2..64)) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let mut pick = |scale: f64| {
            let mut v: Vec<f64> = (0..DEFAULT_PERCENTILES.len()).map(|_| scale * r.random::<f64>()).collect();
            v.sort_by(f64::total_cmp);
            v
        };
        let (s, t) = (pick(20.0), pick(5.0));
        let table = LandmarkTable::new(DEFAULT_PERCENTILES.to_vec(), s, t).unwrap();
        let mut sorted = probes.clone();
        sorted.sort_by(f64::total_cmp);
        for w in sorted.windows(2) {
            prop_assert!(table.map(w[0]) <= table.map(w[1]));
        }
    }

    #[test]
    fn extract_then_blend_round_trips(seed in 0u64..1000, r in prop::sample::select(vec![2usize, 4, 8]), nx in 9usize..30, ny in 9usize..30, nz in 1usize..7) {
        let hf = volume([nx, ny, nz * r], seed);
        let grid = PatchGrid::new([nx, ny, nz], [8, 8, (8 / r).max(1)], [4, 4, (4 / r).max(1)], r).unwrap();
        let back = blend_clip(&extract_hf_patches(&hf, &grid).unwrap(), &grid, *hf.geometry()).unwrap();
        prop_assert_eq!(back, hf);
    }

    #[test]
    fn output_z_extent_is_r_times_input(r in prop::sample::select(vec![2usize, 4, 8]), kx in 1usize..5, kz in 1usize..5) {
        let spec = ModelSpec { levels: 4, ..ModelSpec::toy(r) };
        let xy = 8 * kx;
        let zdiv = 1 << (3 - spec.anisotropic_levels());
        prop_assert_eq!(spec.output_dims([xy, xy, zdiv * kz]).unwrap(), [xy, xy, zdiv * kz * r]);
    }

    #[test]
    fn blur_keeps_constants(c in -5.0f64..5.0, r in prop::sample::select(vec![1usize, 2, 4]), nz in 4usize..20) {
        let v = Volume3D::filled([3, 2, nz * r], Geometry::isotropic(1.0), c).unwrap();
        let d = blur_downsample_z(&v, r).unwrap();
        for x in d.data() {
            prop_assert!((x - c).abs() <= 1e-12 * c.abs().max(1.0));
        }
    }

    #[test]
    fn masks_cover_every_channel(m in 1usize..8, s in 1.0f64..3.0, c in 2usize..20) {
        let spec = MasksemblesSpec { m, s };
        if let Ok(masks) = spec.build_masks(c) {
            let k = spec.active_channels(c);
            for row in masks.chunks(c) {
                prop_assert_eq!(row.iter().filter(|v| **v == 1.0).count(), k);
            }
            for ch in 0..c {
                prop_assert!((0..m).any(|i| masks[i * c + ch] == 1.0));
            }
        } else {
            prop_assert!(spec.active_channels(c) * m < c);
        }
    }
}
