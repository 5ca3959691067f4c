//! End-to-end acceptance checks. Each criterion returns a [`Report`] with a
//! pass flag and the measured numbers; nothing here panics on a miss.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{gradient_check_params, Graph, Tensor, Var};
use crate::error::{IqtError, Result};
use crate::metrics::{psnr, rve, rve_from_volumes, ssim, ssim_with_range, LabelVolume};
use crate::network::{
    build_aniso_unet, enhance_volume, forward, forward_graph, predict_with_uncertainty, EnhanceOptions,
    MasksemblesSpec, ModelSpec, ModelWeights,
};
use crate::normalizer::{compute_landmarks, fit_normalizer, normalize, LandmarkTable, DEFAULT_PERCENTILES};
use crate::oracles::{psnr_direct, ssim_direct};
use crate::patching::{apply_foreground, blend_clip, cubic_upsample_z, extract_hf_patches, extract_pairs, upsampled_foreground, PatchGrid};
use crate::pipeline::{build_dataset, synth_subject, DatasetConfig};
use crate::simulator::{
    blur_downsample_z, estimate_background_sigma, simulate, tissue_mean, SigmaPolicy, SnrDistribution,
};
use crate::training::{train, TrainConfig};
use crate::volume::{generate_phantom, Geometry, PhantomConfig, TissueMasks, Volume3D};

pub const CRITERIA: [(usize, &str); 11] = [
    (1, "simulator contrast fidelity"),
    (2, "simulator identity"),
    (3, "distribution sampling"),
    (4, "patch round trip"),
    (5, "gradient correctness"),
    (6, "shape contract"),
    (7, "learning beats cubic"),
    (8, "normalisation"),
    (9, "uncertainty degeneracy"),
    (10, "metric oracles"),
    (11, "determinism"),
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub id: usize,
    pub title: String,
    pub passed: bool,
    pub detail: String,
}

impl std::fmt::Display for Report {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let verdict = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "{verdict} criterion {:>2} ({}): {}", self.id, self.title, self.detail)
    }
}

/// Settings of the training run behind criterion 7.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LearningConfig {
    pub dataset: DatasetConfig,
    pub train: TrainConfig,
    /// Seed index of the held-out test phantom.
    pub test_subject: usize,
    pub budget_secs: f64,
}

impl Default for LearningConfig {
    fn default() -> Self {
        LearningConfig {
            dataset: DatasetConfig {
                contrast: SnrDistribution::fixed([64.50, 54.14]),
                ..Default::default()
            },
            train: TrainConfig {
                learning_rate: 4e-3,
                decay: 1e-3,
                batch_size: 4,
                epochs: 100,
                seed: 1,
                ..Default::default()
            },
            test_subject: 99,
            budget_secs: 600.0,
        }
    }
}

type Check = Result<(bool, String)>;

/// Run one criterion; errors become failed reports.
pub fn run_criterion(id: usize, learning: &LearningConfig) -> Report {
    let title = CRITERIA
        .iter()
        .find(|c| c.0 == id)
        .map_or("unknown criterion", |c| c.1)
        .to_string();
    let outcome = match id {
        1 => contrast_fidelity(),
        2 => simulator_identity(),
        3 => distribution_sampling(),
        4 => patch_round_trip(),
        5 => gradient_correctness(),
        6 => shape_contract(),
        7 => learning_beats_cubic(learning),
        8 => normalisation(),
        9 => uncertainty_degeneracy(),
        10 => metric_oracles(),
        11 => determinism(),
        _ => Err(IqtError::Argument(format!("no criterion {id}"))),
    };
    let (passed, detail) = outcome.unwrap_or_else(|e| (false, format!("error: {e}")));
    Report {
        id,
        title,
        passed,
        detail,
    }
}

pub fn run_all(ids: &[usize], learning: &LearningConfig) -> Vec<Report> {
    ids.iter().map(|&id| run_criterion(id, learning)).collect()
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_volume(dims: [usize; 3], seed: u64) -> Volume3D<f64> {
    let mut r = rng(seed);
    Volume3D::from_fn(dims, Geometry::isotropic(1.0), |_, _, _| r.random::<f64>()).expect("valid dims")
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs()
}

fn contrast_fidelity() -> Check {
    let p = SnrDistribution::fixed([64.50, 54.14]);
    let (mut worst_snr, mut worst_var) = (0.0f64, 0.0f64);
    for i in 0..20u64 {
        let cfg = PhantomConfig {
            seed: 100 + i,
            ..Default::default()
        };
        let (hf, masks) = generate_phantom(&cfg)?;
        let sim = simulate(&hf, &masks, 4, &p, SigmaPolicy::Default, 500 + i)?;
        let sigma = estimate_background_sigma(&sim.image, &sim.background)?;
        let wm = tissue_mean(&sim.image, &sim.masks.wm)? / sigma;
        let gm = tissue_mean(&sim.image, &sim.masks.gm)? / sigma;
        worst_snr = worst_snr
            .max(rel(wm, sim.sample.snr_wm))
            .max(rel(gm, sim.sample.snr_gm));
        worst_var = worst_var.max(rel(sigma * sigma, sim.sample.noise_variance()));
    }
    Ok((
        worst_snr <= 0.05 && worst_var <= 0.10,
        format!("20 runs, worst SNR error {:.2}% (limit 5%), worst noise variance error {:.2}% (limit 10%)", 100.0 * worst_snr, 100.0 * worst_var),
    ))
}

fn simulator_identity() -> Check {
    let mut exact = 0;
    for seed in 0..5u64 {
        let dims = [6 + seed as usize, 5, 12];
        let v = random_volume(dims, seed);
        let masks = TissueMasks::all_other(dims, *v.geometry())?;
        let policy = SigmaPolicy::Fixed {
            sigma_x: 0.5 + seed as f64,
            sigma_y: 0.5 + seed as f64,
        };
        let sim = simulate(&v, &masks, 1, &SnrDistribution::t1w(), policy, seed)?;
        if sim.image == blur_downsample_z(&v, 1)? {
            exact += 1;
        }
    }
    Ok((exact == 5, format!("{exact}/5 volumes bit-identical to the plain blur")))
}

fn distribution_sampling() -> Check {
    let n = 100_000;
    let mut ok = true;
    let mut parts = Vec::new();
    for (k, name) in ["t1w", "t2w", "flair"].into_iter().enumerate() {
        let p = SnrDistribution::preset(name).ok_or_else(|| IqtError::Argument(format!("no preset {name}")))?;
        let mut r = rng(7 + k as u64);
        let draws: Vec<[f64; 2]> = (0..n).map(|_| p.sample(&mut r)).collect::<Result<_>>()?;
        let mean = [0, 1].map(|a| draws.iter().map(|d| d[a]).sum::<f64>() / n as f64);
        let mut cov = [[0.0; 2]; 2];
        for d in &draws {
            for a in 0..2 {
                for b in 0..2 {
                    cov[a][b] += (d[a] - mean[a]) * (d[b] - mean[b]);
                }
            }
        }
        let (mut num, mut den) = (0.0, 0.0);
        for a in 0..2 {
            for b in 0..2 {
                let c = cov[a][b] / (n - 1) as f64;
                num += (c - p.covariance[a][b]).powi(2);
                den += p.covariance[a][b].powi(2);
            }
        }
        let mean_err = rel(mean[0], p.mean[0]).max(rel(mean[1], p.mean[1]));
        let cov_err = if den > 0.0 { (num / den).sqrt() } else { num.sqrt() };
        ok &= mean_err <= 0.01 && cov_err <= 0.05;
        parts.push(format!("{name} mean {:.3}% cov {:.2}%", 100.0 * mean_err, 100.0 * cov_err));
    }
    Ok((ok, parts.join(", ")))
}

/// Patches along one axis by closed form.
fn axis_count(n: usize, patch: usize, step: usize) -> usize {
    if n <= patch {
        1
    } else {
        1 + (n - patch).div_ceil(step)
    }
}

fn patch_round_trip() -> Check {
    let mut exact = 0;
    let mut counted = 0;
    let mut total = 0;
    for r in [2usize, 4, 8] {
        for i in 0..5usize {
            let lf_dims = [20 + 3 * i, 17 + 5 * i, 3 + i];
            let hf = random_volume([lf_dims[0], lf_dims[1], lf_dims[2] * r], (r * 10 + i) as u64);
            let patch = [16, 16, (16 / r).max(1)];
            let step = [8, 8, (8 / r).max(1)];
            let grid = PatchGrid::new(lf_dims, patch, step, r)?;
            let patches = extract_hf_patches(&hf, &grid)?;
            if blend_clip(&patches, &grid, *hf.geometry())? == hf {
                exact += 1;
            }
            let expected: usize = (0..3).map(|a| axis_count(lf_dims[a], patch[a], step[a])).product();
            if patches.len() == expected {
                counted += 1;
            }
            total += 1;
        }
    }
    let lf = random_volume([64, 64, 16], 1);
    let hf = random_volume([64, 64, 64], 2);
    let (set, _) = extract_pairs(&lf, &hf, 4, [32, 32, 8], [16, 16, 4], 1.0, 0)?;
    Ok((
        exact == total && counted == total && set.len() == 27,
        format!("{exact}/{total} bit-exact round trips, {counted}/{total} closed-form counts, 64³/step-16 grid gives {} patches", set.len()),
    ))
}

const FD_EPSILON: f64 = 1e-5;
const MODEL_FD_EPSILON: f64 = 1e-3;

/// Largest relative error of `loss` over every entry of every parameter.
fn max_error(
    training: bool,
    params: &[Tensor<f64>],
    loss: impl FnMut(&mut Graph<f64>, &[Var]) -> Result<Var>,
) -> Result<f64> {
    let which: Vec<usize> = (0..params.len()).collect();
    Ok(gradient_check_params(training, params, &which, FD_EPSILON, loss)?
        .into_iter()
        .fold(0.0, f64::max))
}

/// MSE against a fixed random target of `shape`.
fn against(g: &mut Graph<f64>, y: Var, seed: u64) -> Result<Var> {
    let t = g.constant(Tensor::random(g.shape(y), &mut rng(seed)));
    g.mse(y, t)
}

fn per_op_errors(seed: u64) -> Result<Vec<(&'static str, f64)>> {
    let mut r = rng(seed);
    let mut rt = |s: [usize; 5]| Tensor::<f64>::random(s, &mut r);
    let t = seed + 1000;
    let mut out = Vec::new();
    let p = vec![rt([2, 2, 3, 4, 3]), rt([3, 2, 3, 3, 3]), rt([1, 3, 1, 1, 1])];
    out.push(("conv3", max_error(true, &p, |g, v| {
        let y = g.conv(v[0], v[1], Some(v[2]))?;
        against(g, y, t)
    })?));
    let p = vec![rt([2, 3, 2, 3, 2]), rt([2, 3, 1, 1, 1])];
    out.push(("conv1", max_error(true, &p, |g, v| {
        let y = g.conv(v[0], v[1], None)?;
        against(g, y, t)
    })?));
    let p = vec![rt([2, 2, 2, 2, 2]), rt([2, 3, 2, 2, 2]), rt([1, 3, 1, 1, 1])];
    out.push(("conv_transpose", max_error(true, &p, |g, v| {
        let y = g.conv_transpose(v[0], v[1], Some(v[2]))?;
        against(g, y, t)
    })?));
    let p = vec![rt([2, 2, 4, 4, 2])];
    out.push(("maxpool", max_error(true, &p, |g, v| {
        let y = g.maxpool(v[0], [2, 2, 1])?;
        against(g, y, t)
    })?));
    let p = vec![rt([1, 2, 3, 3, 3])];
    out.push(("relu", max_error(true, &p, |g, v| {
        let y = g.relu(v[0]);
        against(g, y, t)
    })?));
    let p = vec![rt([3, 2, 2, 3, 2]), rt([1, 2, 1, 1, 1]), rt([1, 2, 1, 1, 1])];
    out.push(("batchnorm", max_error(true, &p, |g, v| {
        let y = g.batchnorm(v[0], v[1], v[2], None)?;
        against(g, y, t)
    })?));
    let (m, var) = (vec![0.1, -0.2], vec![0.5, 2.0]);
    out.push(("batchnorm_inference", max_error(false, &p, |g, v| {
        let y = g.batchnorm(v[0], v[1], v[2], Some((&m, &var)))?;
        against(g, y, t)
    })?));
    let p = vec![rt([2, 2, 2, 2, 2]), rt([2, 3, 2, 2, 2])];
    out.push(("concat", max_error(true, &p, |g, v| {
        let y = g.concat_channels(v[0], v[1])?;
        against(g, y, t)
    })?));
    let p = vec![rt([2, 2, 2, 2, 2]), rt([2, 2, 2, 2, 2])];
    out.push(("add", max_error(true, &p, |g, v| {
        let y = g.add(v[0], v[1])?;
        against(g, y, t)
    })?));
    out.push(("mse", max_error(true, &p, |g, v| g.mse(v[0], v[1]))?));
    let mask = Tensor::new([2, 3, 1, 1, 1], vec![1.0, 0.0, 1.0, 0.0, 1.0, 1.0])?;
    let p = vec![rt([4, 3, 2, 1, 2])];
    out.push(("masksemble", max_error(true, &p, |g, v| {
        let y = g.masksemble(v[0], &mask)?;
        against(g, y, t)
    })?));
    Ok(out)
}

/// Whole toy network: every trainable parameter and the input.
pub fn whole_model_error(spec: &ModelSpec, input: [usize; 5], seed: u64) -> Result<f64> {
    let weights: ModelWeights<f64> = build_aniso_unet(spec, seed)?;
    let mut params: Vec<Tensor<f64>> = weights
        .trainable_indices()
        .into_iter()
        .map(|i| weights.params()[i].tensor.clone())
        .collect();
    let n = params.len();
    params.push(Tensor::random(input, &mut rng(seed + 500)));
    let which: Vec<usize> = (0..params.len()).collect();
    let errors = gradient_check_params(true, &params, &which, MODEL_FD_EPSILON, |g, v| {
        let net = forward_graph(g, spec, &weights, v[n], Some(&v[..n]))?;
        against(g, net.output, seed + 900)
    })?;
    Ok(errors.into_iter().fold(0.0, f64::max))
}

fn gradient_correctness() -> Check {
    let mut worst_op: (&str, f64) = ("", 0.0);
    for seed in 0..5 {
        for (name, e) in per_op_errors(seed)? {
            if e > worst_op.1 {
                worst_op = (name, e);
            }
        }
    }
    let spec = ModelSpec::toy(4);
    let mut worst_model = 0.0f64;
    for seed in 0..5 {
        worst_model = worst_model.max(whole_model_error(&spec, [2, 1, 4, 4, 2], seed)?);
    }
    Ok((
        worst_op.1 <= 1e-5 && worst_model <= 1e-4,
        format!(
            "11 op checks x 5 seeds, worst {:.2e} ({}; limit 1e-5); toy model x 5 seeds, worst {:.2e} (limit 1e-4)",
            worst_op.1, worst_op.0, worst_model
        ),
    ))
}

/// Toy spec for `r`, with the extra level `r = 8` needs.
pub fn toy_spec(r: usize) -> ModelSpec {
    let spec = ModelSpec::toy(r);
    let levels = spec.levels.max(spec.anisotropic_levels() + 1);
    ModelSpec { levels, ..spec }
}

fn shape_contract() -> Check {
    let mut ok = true;
    let mut parts = Vec::new();
    for r in [2usize, 4, 8] {
        let spec = toy_spec(r);
        let w: ModelWeights<f32> = build_aniso_unet(&spec, r as u64)?;
        let y = forward(&w, &spec, &Tensor::random([1, 1, 32, 32, 32 / r], &mut rng(r as u64)))?;
        let lf = random_volume([40, 36, 7], r as u64);
        let e = enhance_volume(&w, &spec, &lf, None, &EnhanceOptions::for_r(r))?;
        let good = y.shape() == [1, 1, 32, 32, 32] && e.volume.dims() == [40, 36, 7 * r];
        ok &= good;
        parts.push(format!("r={r}: {:?} -> {:?}, 7 slices -> {}", [32, 32, 32 / r], y.spatial(), e.volume.dims()[2]));
    }
    Ok((ok, parts.join("; ")))
}

/// Outcome of the criterion-7 training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearningOutcome {
    pub patches: usize,
    pub epochs: usize,
    pub best_epoch: usize,
    pub first_val_mse: f64,
    pub best_val_mse: f64,
    pub network_psnr: f64,
    pub network_ssim: f64,
    pub cubic_psnr: f64,
    pub cubic_ssim: f64,
    pub seconds: f64,
}

pub fn learning_run(cfg: &LearningConfig) -> Result<LearningOutcome> {
    let t0 = Instant::now();
    let spec = ModelSpec::toy(cfg.dataset.r);
    let ds = build_dataset(&cfg.dataset)?;
    let out = train(&spec, &ds.patches, &cfg.train)?;
    let test = synth_subject(&cfg.dataset, cfg.test_subject)?;
    let r = cfg.dataset.r;
    let p = cfg.dataset.lf_patch;
    let opts = EnhanceOptions {
        patch: p,
        step: [p[0] / 2, p[1] / 2, (p[2] / 2).max(1)],
        batch: 8,
        mask_background: true,
    };
    let net = enhance_volume(&out.weights, &spec, &test.lf, ds.table.as_ref(), &opts)?.volume;
    let cubic = apply_foreground(&cubic_upsample_z(&test.lf, r)?, &upsampled_foreground(&test.lf, r)?)?;
    let best = out.history.iter().map(|h| h.val_mse).fold(f64::INFINITY, f64::min);
    Ok(LearningOutcome {
        patches: ds.patches.len(),
        epochs: out.history.len(),
        best_epoch: out.best_epoch,
        first_val_mse: out.history[0].val_mse,
        best_val_mse: best,
        network_psnr: psnr(&net, &test.hf)?,
        network_ssim: ssim(&net, &test.hf)?,
        cubic_psnr: psnr(&cubic, &test.hf)?,
        cubic_ssim: ssim(&cubic, &test.hf)?,
        seconds: t0.elapsed().as_secs_f64(),
    })
}

fn learning_beats_cubic(cfg: &LearningConfig) -> Check {
    let o = learning_run(cfg)?;
    let gain = o.network_psnr - o.cubic_psnr;
    let checks = [
        o.patches >= 200,
        gain >= 1.0,
        o.network_ssim > o.cubic_ssim,
        o.best_val_mse <= 0.5 * o.first_val_mse,
        o.seconds <= cfg.budget_secs,
    ];
    Ok((
        checks.iter().all(|&c| c),
        format!(
            "{} patches, {} epochs; PSNR {:.2} vs cubic {:.2} dB (gain {:+.2}, need +1.00); SSIM {:.4} vs cubic {:.4}; val MSE epoch 1 {:.3e}, best {:.3e} at epoch {}; {:.0} s (budget {:.0} s)",
            o.patches, o.epochs, o.network_psnr, o.cubic_psnr, gain, o.network_ssim, o.cubic_ssim,
            o.first_val_mse, o.best_val_mse, o.best_epoch, o.seconds, cfg.budget_secs
        ),
    ))
}

/// Random foreground of `n` voxels padded with exact zeros to `dims`.
fn sparse_volume(dims: [usize; 3], n: usize, scale: f64, seed: u64) -> Volume3D<f64> {
    let mut r = rng(seed);
    let total: usize = dims.iter().product();
    let data = (0..total)
        .map(|i| if i < total - n { 0.0 } else { scale * (0.05 + r.random::<f64>()).powi(2) })
        .collect();
    Volume3D::new(dims, Geometry::isotropic(1.0), data).expect("valid dims")
}

fn normalisation() -> Check {
    // 100k + 1 foreground voxels put every percentile on an order statistic
    let dims = [21, 21, 21];
    let n = 9201;
    let refs: Vec<Volume3D<f64>> = (0..3).map(|i| sparse_volume(dims, n, 1.0 + i as f64, i)).collect();
    let table = fit_normalizer(&refs, &DEFAULT_PERCENTILES)?;
    let (mut exact, mut worst_idem) = (0, 0.0f64);
    for seed in 10..15 {
        let v = sparse_volume(dims, n, 3.0 + seed as f64, seed);
        let once = normalize(&v, &table)?;
        if compute_landmarks(&once, &table.percentiles)? == table.target_landmarks {
            exact += 1;
        }
        let twice = normalize(&once, &table)?;
        for (a, b) in once.data().iter().zip(twice.data()) {
            worst_idem = worst_idem.max((a - b).abs());
        }
    }
    let mut r = rng(77);
    let mut src: Vec<f64> = (0..DEFAULT_PERCENTILES.len()).map(|_| r.random::<f64>() * 10.0).collect();
    src.sort_by(f64::total_cmp);
    let probe = LandmarkTable::new(DEFAULT_PERCENTILES.to_vec(), src, table.target_landmarks.clone())?;
    let mut violations = 0;
    for _ in 0..10_000 {
        let (a, b) = (r.random_range(-5.0..15.0), r.random_range(-5.0..15.0));
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        if probe.map(lo) > probe.map(hi) {
            violations += 1;
        }
    }
    Ok((
        exact == 5 && worst_idem <= 1e-6 && violations == 0,
        format!("landmarks exact on {exact}/5 volumes; idempotence error {worst_idem:.1e} (limit 1e-6); {violations} monotonicity violations in 10000 probe pairs"),
    ))
}

fn uncertainty_degeneracy() -> Check {
    let patch = Tensor::random([1, 1, 16, 16, 4], &mut rng(3));
    let same = ModelSpec {
        masksembles: Some(MasksemblesSpec { m: 4, s: 1.0 }),
        ..ModelSpec::toy(4)
    };
    let w: ModelWeights<f64> = build_aniso_unet(&same, 4)?;
    let (_, var) = predict_with_uncertainty(&w, &same, &patch)?;
    let zeros = var.data().iter().all(|v| *v == 0.0);

    // m = 2, s = 2 keeps channels {0, 1} and {2, 3} of the last block; a zero
    // gain makes that block emit its bias, so the two members are constants
    let pair = ModelSpec {
        masksembles: Some(MasksemblesSpec { m: 2, s: 2.0 }),
        ..ModelSpec::toy(4)
    };
    let mut w: ModelWeights<f64> = build_aniso_unet(&pair, 5)?;
    let beta = [1.0, 2.0, 3.0, 4.0];
    let gain = [0.5, 1.0, 0.25, 2.0];
    w.get_mut("dec1.bn_out.gamma").ok_or_else(|| IqtError::arg("missing gamma"))?.data_mut().fill(0.0);
    w.get_mut("dec1.bn_out.beta").ok_or_else(|| IqtError::arg("missing beta"))?.data_mut().copy_from_slice(&beta);
    w.get_mut("final.w").ok_or_else(|| IqtError::arg("missing final.w"))?.data_mut().copy_from_slice(&gain);
    let a = beta[0] * gain[0] + beta[1] * gain[1];
    let b = beta[2] * gain[2] + beta[3] * gain[3];
    let (mean, var) = predict_with_uncertainty(&w, &pair, &patch)?;
    let closed = mean.data().iter().all(|m| *m == (a + b) / 2.0)
        && var.data().iter().all(|v| *v == ((a - b) / 2.0).powi(2));
    Ok((
        zeros && closed,
        format!(
            "s=1 variance all zero: {zeros}; m=2 outputs {a} and {b} give mean {} and variance {} at every voxel: {closed}",
            (a + b) / 2.0,
            ((a - b) / 2.0).powi(2)
        ),
    ))
}

fn metric_oracles() -> Check {
    let (mut psnr_err, mut ssim_err) = (0.0f64, 0.0f64);
    for seed in 0..5 {
        let a = random_volume([16, 16, 16], 2 * seed);
        let b = random_volume([16, 16, 16], 2 * seed + 1);
        psnr_err = psnr_err.max((psnr(&a, &b)? - psnr_direct(a.data(), b.data())).abs());
        let (lo, hi) = b.min_max();
        ssim_err = ssim_err.max((ssim(&a, &b)? - ssim_direct(&a, &b, hi - lo)).abs());
        ssim_err = ssim_err.max((ssim_with_range(&a, &b, 2.0)? - ssim_direct(&a, &b, 2.0)).abs());
    }
    let reference = random_volume([12, 12, 12], 9).map(|v| v * 0.5)?;
    let peak = reference.min_max().1;
    let reference = reference.map(|v| v / peak)?;
    let shifted = reference.map(|v| v + 0.1)?;
    let twenty = psnr(&shifted, &reference)?;
    let same = psnr(&reference, &reference)?;

    let g = Geometry::isotropic(1.0);
    let labels = |count: usize| {
        let l = (0..4096).map(|i| u32::from(i < count)).collect();
        LabelVolume::new([16, 16, 16], g, l)
    };
    let r_equal = rve(&labels(100)?, &labels(100)?, 1)?;
    let r_mid = rve(&labels(150)?, &labels(100)?, 1)?;
    let r_max = rve(&labels(0)?, &labels(100)?, 1)?;
    let degenerate = rve_from_volumes(0.0, 0.0).is_err();
    let ok = psnr_err <= 1e-9
        && ssim_err <= 1e-6
        && (twenty - 20.0).abs() <= 1e-9
        && same.is_infinite()
        && r_equal == 0.0
        && (r_mid - 0.4).abs() <= 1e-15
        && r_max == 2.0
        && degenerate;
    Ok((
        ok,
        format!(
            "PSNR vs oracle {psnr_err:.1e} dB (limit 1e-9); SSIM vs oracle {ssim_err:.1e} (limit 1e-6); offset 0.1 gives {twenty:.12} dB; identical gives {same}; RVE {r_equal}, {r_mid}, {r_max}; empty structure rejected: {degenerate}"
        ),
    ))
}

fn digest_f64(h: &mut Sha256, values: impl IntoIterator<Item = f64>) {
    for v in values {
        h.update(v.to_le_bytes());
    }
}

/// Digest of a small phantom-to-enhancement run.
pub fn pipeline_digest() -> Result<String> {
    let cfg = DatasetConfig {
        subjects: 3,
        phantom: PhantomConfig {
            dims: [32, 32, 32],
            ..Default::default()
        },
        seed: 5,
        ..Default::default()
    };
    let ds = build_dataset(&cfg)?;
    let spec = ModelSpec::toy(cfg.r);
    let tc = TrainConfig {
        epochs: 2,
        batch_size: 4,
        seed: 2,
        ..Default::default()
    };
    let out = train::<f32>(&spec, &ds.patches, &tc)?;
    let e = enhance_volume(&out.weights, &spec, &ds.subjects[0].lf, ds.table.as_ref(), &EnhanceOptions::for_r(cfg.r))?;
    let mut h = Sha256::new();
    for s in &ds.subjects {
        digest_f64(&mut h, s.hf.data().iter().copied());
        digest_f64(&mut h, s.lf.data().iter().copied());
    }
    for p in &ds.patches.pairs {
        digest_f64(&mut h, p.lf.iter().chain(&p.hf).map(|v| *v as f64));
    }
    for r in &out.history {
        digest_f64(&mut h, [r.train_mse, r.val_mse, r.lr]);
    }
    for p in out.weights.params() {
        digest_f64(&mut h, p.tensor.data().iter().map(|v| *v as f64));
    }
    digest_f64(&mut h, e.volume.data().iter().copied());
    Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

fn determinism() -> Check {
    let a = pipeline_digest()?;
    let b = pipeline_digest()?;
    let tag = &a[..16];
    Ok((a == b, format!("phantom, simulate, normalise, patch, train, enhance twice: {tag} {} {}", if a == b { "==" } else { "!=" }, &b[..16])))
}
