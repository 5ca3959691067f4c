//! Stochastic low-field image simulator.
//!
//! Degrades a high-field volume along z (Gaussian slice profile + slice
//! resampling), draws a random WM/GM SNR pair, rescales each tissue class so
//! the low-field image has those SNRs, and adds Gaussian noise.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{IqtError, Result};
use crate::scalar::Scalar;
use crate::volume::{background_mask, Geometry, TissueMasks, Volume3D};

/// Lower clamp applied to sampled SNRs.
pub const SNR_FLOOR: f64 = 1.0;

/// Kernel support in units of the Gaussian standard deviation.
const KERNEL_HALF_WIDTH_SIGMAS: f64 = 4.0;

/// Minimum number of background voxels for a noise estimate.
pub const MIN_BACKGROUND_VOXELS: usize = 1000;

/// Bivariate Gaussian over (SNR_WM, SNR_GM).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SnrDistribution {
    pub mean: [f64; 2],
    pub covariance: [[f64; 2]; 2],
}

impl SnrDistribution {
    /// Fitted T1w distribution (0.36T clinical data).
    pub fn t1w() -> Self {
        SnrDistribution {
            mean: [64.50, 54.14],
            covariance: [[78.47, 71.50], [71.50, 73.91]],
        }
    }

    pub fn t2w() -> Self {
        SnrDistribution {
            mean: [35.20, 48.46],
            covariance: [[84.15, 104.89], [104.89, 138.70]],
        }
    }

    pub fn flair() -> Self {
        SnrDistribution {
            mean: [35.99, 40.92],
            covariance: [[100.99, 74.34], [74.34, 129.56]],
        }
    }

    /// Dirac distribution at `mean`.
    pub fn fixed(mean: [f64; 2]) -> Self {
        SnrDistribution {
            mean,
            covariance: [[0.0; 2]; 2],
        }
    }

    /// Shipped distribution by contrast name (`t1w`, `t2w`, `flair`).
    pub fn preset(name: &str) -> Option<Self> {
        match name.to_ascii_lowercase().as_str() {
            "t1w" => Some(Self::t1w()),
            "t2w" => Some(Self::t2w()),
            "flair" => Some(Self::flair()),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.mean.iter().any(|m| !(m.is_finite() && *m > 0.0)) {
            return Err(IqtError::Distribution(format!("mean SNRs must be positive: {:?}", self.mean)));
        }
        let c = self.covariance;
        if c.iter().flatten().any(|v| !v.is_finite()) {
            return Err(IqtError::Distribution("covariance has non-finite entries".into()));
        }
        if c[0][1] != c[1][0] {
            return Err(IqtError::Distribution(format!("covariance not symmetric: {c:?}")));
        }
        self.cholesky().map(|_| ())
    }

    /// Lower-triangular factor `L` with `L L^T = covariance`; handles the
    /// semi-definite case.
    pub fn cholesky(&self) -> Result<[[f64; 2]; 2]> {
        let c = self.covariance;
        let scale = c[0][0].abs().max(c[1][1].abs()).max(1.0);
        let tol = 1e-12 * scale;
        if c[0][0] < -tol || c[1][1] < -tol {
            return Err(IqtError::Distribution(format!("negative variance in {c:?}")));
        }
        let l11 = c[0][0].max(0.0).sqrt();
        let l21 = if l11 > 0.0 {
            c[1][0] / l11
        } else if c[1][0].abs() <= tol {
            0.0
        } else {
            return Err(IqtError::Distribution(format!("covariance not positive semi-definite: {c:?}")));
        };
        let rem = c[1][1] - l21 * l21;
        if rem < -tol {
            return Err(IqtError::Distribution(format!("covariance not positive semi-definite: {c:?}")));
        }
        Ok([[l11, 0.0], [l21, rem.max(0.0).sqrt()]])
    }

    /// One draw of (SNR_WM, SNR_GM), clamped to [`SNR_FLOOR`].
    pub fn sample<R: rand::Rng + ?Sized>(&self, rng: &mut R) -> Result<[f64; 2]> {
        let l = self.cholesky()?;
        let z0: f64 = StandardNormal.sample(rng);
        let z1: f64 = StandardNormal.sample(rng);
        let a = self.mean[0] + l[0][0] * z0;
        let b = self.mean[1] + (l[1][0] * z0 + l[1][1] * z1);
        Ok([a.max(SNR_FLOOR), b.max(SNR_FLOOR)])
    }
}

/// How the low- and high-field noise levels are chosen.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SigmaPolicy {
    /// sigma_x = mu_Y^WM / SNR_WM (low-field WM mean pinned to high field), sigma_y = 0.
    #[default]
    Default,
    /// As `Default` but with a known high-field noise level.
    HighFieldNoise { sigma_y: f64 },
    /// Explicit noise levels.
    Fixed { sigma_x: f64, sigma_y: f64 },
}

/// The contrast drawn for one simulation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContrastSample {
    pub snr_wm: f64,
    pub snr_gm: f64,
    pub sigma_x: f64,
    pub sigma_y: f64,
    /// High-field WM mean the low-field WM mean was pinned to, if any.
    #[serde(default)]
    pub pinned_mu_wm: Option<f64>,
}

impl ContrastSample {
    pub fn noise_variance(&self) -> f64 {
        self.sigma_x * self.sigma_x - self.sigma_y * self.sigma_y
    }
}

/// Intensity ratios low-field / high-field per tissue class.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Multipliers {
    pub l_wm: f64,
    pub l_gm: f64,
    pub l_oth: f64,
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Draw SNRs and resolve noise levels. `mu_y_wm` is only used by the
/// policies that pin the WM mean.
pub fn sample_contrast(p: &SnrDistribution, policy: SigmaPolicy, mu_y_wm: f64, seed: u64) -> Result<ContrastSample> {
    p.validate()?;
    let mut rng = stream_rng(seed, 0);
    let [snr_wm, snr_gm] = p.sample(&mut rng)?;
    let pinned = |sigma_y: f64| -> Result<ContrastSample> {
        if !(mu_y_wm.is_finite() && mu_y_wm > 0.0) {
            return Err(IqtError::arg(format!("high-field WM mean must be positive, got {mu_y_wm}")));
        }
        Ok(ContrastSample {
            snr_wm,
            snr_gm,
            sigma_x: mu_y_wm / snr_wm,
            sigma_y,
            pinned_mu_wm: Some(mu_y_wm),
        })
    };
    let sample = match policy {
        SigmaPolicy::Default => pinned(0.0)?,
        SigmaPolicy::HighFieldNoise { sigma_y } => pinned(sigma_y)?,
        SigmaPolicy::Fixed { sigma_x, sigma_y } => ContrastSample {
            snr_wm,
            snr_gm,
            sigma_x,
            sigma_y,
            pinned_mu_wm: None,
        },
    };
    if !(sample.sigma_y >= 0.0 && sample.sigma_x >= sample.sigma_y) {
        return Err(IqtError::Distribution(format!(
            "noise levels must satisfy sigma_x >= sigma_y >= 0 (sigma_x = {}, sigma_y = {})",
            sample.sigma_x, sample.sigma_y
        )));
    }
    Ok(sample)
}

/// Multipliers l^j = SNR_X^j * sigma_x / mu_Y^j for WM and GM; l_oth = 1.
pub fn compute_multipliers(sample: &ContrastSample, mu_y_wm: f64, mu_y_gm: f64) -> Result<Multipliers> {
    for (name, mu) in [("WM", mu_y_wm), ("GM", mu_y_gm)] {
        if !(mu.is_finite() && mu > 0.0) {
            return Err(IqtError::arg(format!("high-field {name} mean must be positive, got {mu}")));
        }
    }
    let mu_x_wm = match sample.pinned_mu_wm {
        Some(m) if m == mu_y_wm => m,
        _ => sample.snr_wm * sample.sigma_x,
    };
    let mu_x_gm = sample.snr_gm * sample.sigma_x;
    Ok(Multipliers {
        l_wm: mu_x_wm / mu_y_wm,
        l_gm: mu_x_gm / mu_y_gm,
        l_oth: 1.0,
    })
}

/// Gaussian slice-profile taps, unnormalised, at offsets `-h..=h` input slices.
fn slice_kernel(r: usize, geometry: &Geometry) -> Vec<f64> {
    let fwhm = r as f64 * geometry.slice_thickness_z;
    let sigma = fwhm / (8.0 * std::f64::consts::LN_2).sqrt();
    let pitch = geometry.slice_pitch();
    let half = (KERNEL_HALF_WIDTH_SIGMAS * sigma / pitch).floor() as isize;
    (-half..=half)
        .map(|t| {
            let d = t as f64 * pitch;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect()
}

/// Output slice count for downsampling factor `r`.
pub fn downsampled_slices(nz: usize, r: usize) -> usize {
    // (nz-1)*dz / D_r with D_r = r*dz
    (nz - 1) / r + 1
}

/// Blur each z-column with the slice profile (FWHM = r * thickness) and keep
/// every r-th slice.
///
/// Output slice k is the blurred signal at `k * D_r`, `D_r = r * pitch`,
/// which always lands on input slice `k * r`.
pub fn blur_downsample_z<T: Scalar>(vol: &Volume3D<T>, r: usize) -> Result<Volume3D<T>> {
    let [nx, ny, nz] = vol.dims();
    if r == 0 {
        return Err(IqtError::arg("downsampling factor must be >= 1"));
    }
    if r > nz {
        return Err(IqtError::arg(format!("downsampling factor {r} exceeds slice count {nz}")));
    }
    let g = *vol.geometry();
    let taps = slice_kernel(r, &g);
    let half = (taps.len() / 2) as isize;
    let nz_out = downsampled_slices(nz, r);

    // Per output slice: normalised weights over in-range taps.
    let plans: Vec<(usize, Vec<T>)> = (0..nz_out)
        .map(|k| {
            let c = (k * r) as isize;
            let lo = (c - half).max(0);
            let hi = (c + half).min(nz as isize - 1);
            let w: Vec<f64> = (lo..=hi).map(|z| taps[(z - c + half) as usize]).collect();
            let total: f64 = w.iter().sum();
            (lo as usize, w.iter().map(|v| T::lit(v / total)).collect())
        })
        .collect();

    let src = vol.data();
    let mut out = Vec::with_capacity(nx * ny * nz_out);
    for col in src.chunks_exact(nz) {
        for (lo, w) in &plans {
            let mut acc = T::zero();
            for (wi, &v) in w.iter().zip(&col[*lo..*lo + w.len()]) {
                acc += *wi * v;
            }
            out.push(acc);
        }
    }
    let geometry = Geometry::new(
        g.voxel_x,
        g.voxel_y,
        r as f64 * g.slice_thickness_z,
        r as f64 * g.slice_gap_z,
    )?;
    Volume3D::new([nx, ny, nz_out], geometry, out)
}

/// Downsample each mask with the image kernel, then renormalise to sum 1.
pub fn blur_downsample_masks<T: Scalar>(masks: &TissueMasks<T>, r: usize) -> Result<TissueMasks<T>> {
    TissueMasks {
        wm: blur_downsample_z(&masks.wm, r)?,
        gm: blur_downsample_z(&masks.gm, r)?,
        oth: blur_downsample_z(&masks.oth, r)?,
    }
    .renormalized()
}

/// Mask-weighted mean intensity.
pub fn tissue_mean<T: Scalar>(vol: &Volume3D<T>, mask: &Volume3D<T>) -> Result<f64> {
    if vol.dims() != mask.dims() {
        return Err(IqtError::shape("tissue_mean", &vol.dims(), &mask.dims()));
    }
    let (mut num, mut den) = (0.0f64, 0.0f64);
    for (&v, &m) in vol.data().iter().zip(mask.data()) {
        num += m.as_f64() * v.as_f64();
        den += m.as_f64();
    }
    if den <= 0.0 {
        return Err(IqtError::DegenerateMask("mask has zero total weight".into()));
    }
    Ok(num / den)
}

/// Sample standard deviation of `vol` over `region`.
pub fn estimate_background_sigma<T: Scalar>(vol: &Volume3D<T>, region: &[bool]) -> Result<f64> {
    if region.len() != vol.len() {
        return Err(IqtError::arg(format!(
            "region has {} entries for a volume of {} voxels",
            region.len(),
            vol.len()
        )));
    }
    let values: Vec<f64> = vol
        .data()
        .iter()
        .zip(region)
        .filter(|(_, &b)| b)
        .map(|(v, _)| v.as_f64())
        .collect();
    if values.len() < MIN_BACKGROUND_VOXELS {
        return Err(IqtError::Estimation(format!(
            "{} background voxels, need at least {MIN_BACKGROUND_VOXELS}",
            values.len()
        )));
    }
    if values.iter().all(|&v| v == 0.0) {
        return Ok(0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let ss: f64 = values.iter().map(|v| (v - mean) * (v - mean)).sum();
    Ok((ss / (n - 1.0)).sqrt())
}

/// Noise estimate over the volume's own exact-zero voxels.
pub fn estimate_zero_background_sigma<T: Scalar>(vol: &Volume3D<T>) -> Result<f64> {
    estimate_background_sigma(vol, &vol.zero_mask())
}

/// Everything produced by one simulation run.
#[derive(Debug, Clone)]
pub struct Simulation<T> {
    /// Noisy synthetic low-field image.
    pub image: Volume3D<T>,
    pub sample: ContrastSample,
    pub multipliers: Multipliers,
    /// Blurred and resampled high-field image.
    pub downsampled: Volume3D<T>,
    pub masks: TissueMasks<T>,
    /// Background of the downsampled grid (all `oth`, zero signal).
    pub background: Vec<bool>,
}

/// Full simulator. Deterministic given `seed`; contrast draw uses the same
/// stream as [`sample_contrast`] with that seed.
///
/// A tissue class with no mask weight keeps multiplier 1.
pub fn simulate<T: Scalar>(
    vol: &Volume3D<T>,
    masks: &TissueMasks<T>,
    r: usize,
    p: &SnrDistribution,
    policy: SigmaPolicy,
    seed: u64,
) -> Result<Simulation<T>> {
    if vol.dims() != masks.dims() {
        return Err(IqtError::shape("simulate", &vol.dims(), &masks.dims()));
    }
    let yd = blur_downsample_z(vol, r)?;
    let md = blur_downsample_masks(masks, r)?;

    let mean_or_none = |m: &Volume3D<T>| match tissue_mean(&yd, m) {
        Ok(v) => Ok(Some(v)),
        Err(IqtError::DegenerateMask(_)) => Ok(None),
        Err(e) => Err(e),
    };
    let mu_wm = mean_or_none(&md.wm)?;
    let mu_gm = mean_or_none(&md.gm)?;

    let pin = match policy {
        SigmaPolicy::Fixed { .. } => mu_wm.unwrap_or(f64::NAN),
        _ => mu_wm.ok_or_else(|| {
            IqtError::DegenerateMask("WM mask is empty; the default noise policy needs a WM mean".into())
        })?,
    };
    let sample = sample_contrast(p, policy, pin, seed)?;

    let sx = sample.sigma_x;
    let mu_x_wm = match sample.pinned_mu_wm {
        Some(m) => m,
        None => sample.snr_wm * sx,
    };
    let multipliers = Multipliers {
        l_wm: mu_wm.map_or(1.0, |m| mu_x_wm / m),
        l_gm: mu_gm.map_or(1.0, |m| sample.snr_gm * sx / m),
        l_oth: 1.0,
    };

    let (lw, lg, lo) = (
        T::lit(multipliers.l_wm),
        T::lit(multipliers.l_gm),
        T::lit(multipliers.l_oth),
    );
    let mut data: Vec<T> = yd
        .data()
        .iter()
        .zip(md.wm.data().iter().zip(md.gm.data()).zip(md.oth.data()))
        .map(|(&y, ((&w, &g), &o))| y * (lw * w + lg * g + lo * o))
        .collect();

    let var = sample.noise_variance();
    if var > 0.0 {
        let sd = var.sqrt();
        let mut rng = stream_rng(seed, 1);
        for v in data.iter_mut() {
            let n: f64 = StandardNormal.sample(&mut rng);
            *v += T::lit(sd * n);
        }
    }
    let background = background_mask(&yd, &md)?;
    Ok(Simulation {
        image: yd.with_data(data)?,
        sample,
        multipliers,
        downsampled: yd,
        masks: md,
        background,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::{generate_phantom, PhantomConfig};

    fn brute_force_blur(col: &[f64], r: usize, g: &Geometry, k: usize) -> f64 {
        // direct evaluation of the truncated, boundary-renormalised Gaussian
        let sigma = r as f64 * g.slice_thickness_z / (8.0 * 2f64.ln()).sqrt();
        let centre = (k * r) as f64 * g.slice_pitch();
        let (mut num, mut den) = (0.0, 0.0);
        for (z, v) in col.iter().enumerate() {
            let d = z as f64 * g.slice_pitch() - centre;
            if d.abs() <= 4.0 * sigma + 1e-12 {
                let w = (-d * d / (2.0 * sigma * sigma)).exp() / (2.0 * std::f64::consts::PI * sigma * sigma).sqrt();
                num += w * v;
                den += w;
            }
        }
        num / den
    }

    #[test]
    fn constant_volume_stays_constant() {
        for r in 1..=5 {
            let v = Volume3D::<f64>::filled([3, 2, 23], Geometry::new(1.0, 1.0, 0.7, 0.3).unwrap(), 4.25).unwrap();
            let d = blur_downsample_z(&v, r).unwrap();
            assert_eq!(d.dims()[2], (23 - 1) / r + 1);
            for x in d.data() {
                assert!((x - 4.25).abs() < 1e-12, "r={r}: {x}");
            }
        }
    }

    #[test]
    fn hcp_geometry_at_r4() {
        let g = Geometry::isotropic(0.7);
        let v = Volume3D::<f64>::zeros([2, 2, 32], g).unwrap();
        let d = blur_downsample_z(&v, 4).unwrap();
        let out = d.geometry();
        assert!((out.slice_pitch() - 2.8).abs() < 1e-12);
        let split = out.with_thickness_gap_ratio(3, 1).unwrap();
        assert!((split.slice_thickness_z - 2.1).abs() < 1e-12);
        assert!((split.slice_gap_z - 0.7).abs() < 1e-12);
        // (32-1)*0.7/2.8 = 7.75 -> 8 slices
        assert_eq!(d.dims()[2], 8);
    }

    #[test]
    fn impulse_matches_direct_summation() {
        let g = Geometry::new(1.0, 1.0, 1.3, 0.2).unwrap();
        for (r, z0) in [(1usize, 9usize), (2, 10), (3, 0), (4, 19)] {
            let nz = 20;
            let v = Volume3D::from_fn([1, 1, nz], g, |_, _, z| if z == z0 { 1.0 } else { 0.0 }).unwrap();
            let d = blur_downsample_z(&v, r).unwrap();
            for k in 0..d.dims()[2] {
                let want = brute_force_blur(v.data(), r, &g, k);
                assert!((d.data()[k] - want).abs() < 1e-14, "r={r} k={k}");
            }
        }
    }

    #[test]
    fn r_larger_than_slices_is_rejected() {
        let v = Volume3D::<f64>::zeros([1, 1, 3], Geometry::isotropic(1.0)).unwrap();
        assert!(matches!(blur_downsample_z(&v, 4), Err(IqtError::Argument(_))));
    }

    #[test]
    fn tissue_mean_examples() {
        let g = Geometry::isotropic(1.0);
        let v = Volume3D::filled([2, 2, 2], g, 5.0).unwrap();
        let m = Volume3D::from_fn([2, 2, 2], g, |x, y, z| (x + y + z) as f64 * 0.1).unwrap();
        assert!((tissue_mean(&v, &m).unwrap() - 5.0).abs() < 1e-15);

        let v = Volume3D::new([1, 1, 5], g, vec![1.0, 2.0, 10.0, 3.0, 20.0]).unwrap();
        let m = Volume3D::new([1, 1, 5], g, vec![0.0, 0.0, 1.0, 0.0, 1.0]).unwrap();
        assert_eq!(tissue_mean(&v, &m).unwrap(), 15.0);

        let z = Volume3D::zeros([1, 1, 5], g).unwrap();
        assert!(matches!(tissue_mean(&v, &z), Err(IqtError::DegenerateMask(_))));
    }

    #[test]
    fn background_sigma_cases() {
        let cfg = PhantomConfig {
            dims: [32, 32, 32],
            seed: 4,
            ..Default::default()
        };
        let (v, _) = generate_phantom(&cfg).unwrap();
        assert_eq!(estimate_zero_background_sigma(&v).unwrap(), 0.0);

        let region = v.zero_mask();
        let mut rng = stream_rng(99, 0);
        let noisy = v
            .map(|x| {
                let n: f64 = StandardNormal.sample(&mut rng);
                x + 2.0 * n
            })
            .unwrap();
        let s = estimate_background_sigma(&noisy, &region).unwrap();
        assert!((s - 2.0).abs() < 0.1, "{s}");

        assert!(matches!(estimate_zero_background_sigma(&noisy), Err(IqtError::Estimation(_))));
    }

    #[test]
    fn degenerate_distribution_returns_mean() {
        let p = SnrDistribution::fixed([64.50, 54.14]);
        for seed in 0..20 {
            let s = sample_contrast(&p, SigmaPolicy::Default, 100.0, seed).unwrap();
            assert_eq!((s.snr_wm, s.snr_gm), (64.50, 54.14));
        }
    }

    #[test]
    fn same_seed_same_sample() {
        let p = SnrDistribution::t2w();
        let a = sample_contrast(&p, SigmaPolicy::Default, 50.0, 7).unwrap();
        let b = sample_contrast(&p, SigmaPolicy::Default, 50.0, 7).unwrap();
        assert_eq!(a, b);
        let c = sample_contrast(&p, SigmaPolicy::Default, 50.0, 8).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn indefinite_covariance_rejected() {
        let p = SnrDistribution {
            mean: [10.0, 10.0],
            covariance: [[1.0, 2.0], [2.0, 1.0]],
        };
        assert!(matches!(p.validate(), Err(IqtError::Distribution(_))));
        let asym = SnrDistribution {
            mean: [10.0, 10.0],
            covariance: [[1.0, 0.2], [0.1, 1.0]],
        };
        assert!(asym.validate().is_err());
    }

    #[test]
    fn snr_floor_clamps_wide_distribution() {
        let p = SnrDistribution {
            mean: [2.0, 2.0],
            covariance: [[100.0, 0.0], [0.0, 100.0]],
        };
        let mut rng = stream_rng(1, 0);
        for _ in 0..1000 {
            let s = p.sample(&mut rng).unwrap();
            assert!(s[0] >= SNR_FLOOR && s[1] >= SNR_FLOOR);
        }
    }

    #[test]
    fn multiplier_examples() {
        let s = sample_contrast(&SnrDistribution::fixed([61.3, 40.0]), SigmaPolicy::Default, 97.1, 0).unwrap();
        let m = compute_multipliers(&s, 97.1, 80.0).unwrap();
        assert_eq!(m.l_wm, 1.0);
        assert_eq!(m.l_oth, 1.0);

        let hand = ContrastSample {
            snr_wm: 60.0,
            snr_gm: 40.0,
            sigma_x: 2.0,
            sigma_y: 0.0,
            pinned_mu_wm: None,
        };
        let m = compute_multipliers(&hand, 100.0, 80.0).unwrap();
        assert!((m.l_wm - 1.2).abs() < 1e-15);
        assert!((m.l_gm - 1.0).abs() < 1e-15);

        let doubled = ContrastSample {
            snr_wm: 120.0,
            snr_gm: 80.0,
            ..hand
        };
        let d = compute_multipliers(&doubled, 100.0, 80.0).unwrap();
        assert!((d.l_wm - 2.0 * m.l_wm).abs() < 1e-15);
        assert!((d.l_gm - 2.0 * m.l_gm).abs() < 1e-15);

        assert!(matches!(compute_multipliers(&hand, 0.0, 80.0), Err(IqtError::Argument(_))));
    }

    #[test]
    fn identity_contrast_reduces_to_blur() {
        let g = Geometry::isotropic(1.0);
        let v = Volume3D::from_fn([4, 4, 12], g, |x, y, z| (x * 7 + y * 3 + z) as f64 * 0.37).unwrap();
        let masks = TissueMasks::all_other([4, 4, 12], g).unwrap();
        let sim = simulate(
            &v,
            &masks,
            1,
            &SnrDistribution::t1w(),
            SigmaPolicy::Fixed {
                sigma_x: 1.5,
                sigma_y: 1.5,
            },
            3,
        )
        .unwrap();
        let blur = blur_downsample_z(&v, 1).unwrap();
        assert_eq!(sim.image, blur);
    }

    #[test]
    fn simulate_is_deterministic() {
        let cfg = PhantomConfig {
            dims: [24, 24, 24],
            seed: 2,
            ..Default::default()
        };
        let (v, m) = generate_phantom(&cfg).unwrap();
        let a = simulate(&v, &m, 2, &SnrDistribution::t1w(), SigmaPolicy::Default, 42).unwrap();
        let b = simulate(&v, &m, 2, &SnrDistribution::t1w(), SigmaPolicy::Default, 42).unwrap();
        assert_eq!(a.image, b.image);
        assert_eq!(a.sample, b.sample);
        assert_eq!(a.multipliers.l_wm, 1.0);
        for i in 0..a.masks.wm.len() {
            let s = a.masks.wm.data()[i] + a.masks.gm.data()[i] + a.masks.oth.data()[i];
            assert!((s - 1.0).abs() <= 1e-4);
        }
    }
}
