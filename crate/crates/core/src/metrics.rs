//! PSNR, 3-D SSIM and relative volumetric error.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{IqtError, Result};
use crate::scalar::Scalar;
use crate::volume::{Geometry, Volume3D};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

fn check_dims<T: Scalar>(op: &str, a: &Volume3D<T>, b: &Volume3D<T>) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(IqtError::Argument(format!(
            "{op}: dims differ, {:?} vs {:?}",
            a.dims(),
            b.dims()
        )));
    }
    Ok(())
}

/// Mean squared error accumulated in f64.
pub fn mse<T: Scalar>(estimate: &Volume3D<T>, reference: &Volume3D<T>) -> Result<f64> {
    check_dims("mse", estimate, reference)?;
    let sum: f64 = estimate
        .data()
        .iter()
        .zip(reference.data())
        .map(|(a, b)| {
            let d = a.as_f64() - b.as_f64();
            d * d
        })
        .sum();
    Ok(sum / estimate.len() as f64)
}

/// `10 log10(peak² / MSE)` with the peak taken from the reference.
/// Identical inputs give `f64::INFINITY`.
pub fn psnr<T: Scalar>(estimate: &Volume3D<T>, reference: &Volume3D<T>) -> Result<f64> {
    let m = mse(estimate, reference)?;
    if m == 0.0 {
        return Ok(f64::INFINITY);
    }
    let peak = reference.data().iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
    Ok(10.0 * (peak * peak / m).log10())
}

/// Normalised 1-D Gaussian taps; the 3-D window is their outer product.
pub fn gaussian_taps(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let w: Vec<f64> = (0..size)
        .map(|i| (-(i as f64 - c).powi(2) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Valid-mode separable filtering of a flat volume.
fn filter_valid(data: &[f64], dims: [usize; 3], taps: &[f64]) -> (Vec<f64>, [usize; 3]) {
    let w = taps.len();
    let mut cur = data.to_vec();
    let mut d = dims;
    for axis in 0..3 {
        let mut od = d;
        od[axis] = d[axis] + 1 - w;
        let stride = match axis {
            0 => d[1] * d[2],
            1 => d[2],
            _ => 1,
        };
        let mut out = vec![0.0; od.iter().product()];
        let mut o = 0;
        for x in 0..od[0] {
            for y in 0..od[1] {
                for z in 0..od[2] {
                    let base = (x * d[1] + y) * d[2] + z;
                    let mut acc = 0.0;
                    for (t, tw) in taps.iter().enumerate() {
                        acc += tw * cur[base + t * stride];
                    }
                    out[o] = acc;
                    o += 1;
                }
            }
        }
        cur = out;
        d = od;
    }
    (cur, d)
}

/// Mean 3-D SSIM over every valid window centre with dynamic range `l`.
pub fn ssim_with_range<T: Scalar>(estimate: &Volume3D<T>, reference: &Volume3D<T>, l: f64) -> Result<f64> {
    check_dims("ssim", estimate, reference)?;
    let dims = reference.dims();
    if dims.iter().any(|&d| d < SSIM_WINDOW) {
        return Err(IqtError::Argument(format!(
            "ssim needs every dim >= {SSIM_WINDOW}, got {dims:?}"
        )));
    }
    let x: Vec<f64> = estimate.data().iter().map(|v| v.as_f64()).collect();
    let y: Vec<f64> = reference.data().iter().map(|v| v.as_f64()).collect();
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(&y).map(|(a, b)| a * b).collect();
    let taps = gaussian_taps(SSIM_WINDOW, SSIM_SIGMA);
    let (mx, _) = filter_valid(&x, dims, &taps);
    let (my, _) = filter_valid(&y, dims, &taps);
    let (sxx, _) = filter_valid(&xx, dims, &taps);
    let (syy, _) = filter_valid(&yy, dims, &taps);
    let (sxy, _) = filter_valid(&xy, dims, &taps);
    let c1 = (SSIM_K1 * l).powi(2);
    let c2 = (SSIM_K2 * l).powi(2);
    let n = mx.len();
    let mut total = 0.0;
    for i in 0..n {
        total += ssim_local(mx[i], my[i], sxx[i], syy[i], sxy[i], c1, c2);
    }
    Ok(total / n as f64)
}

#[inline]
pub(crate) fn ssim_local(mx: f64, my: f64, exx: f64, eyy: f64, exy: f64, c1: f64, c2: f64) -> f64 {
    let vx = exx - mx * mx;
    let vy = eyy - my * my;
    let cov = exy - mx * my;
    ((2.0 * mx * my + c1) * (2.0 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))
}

/// SSIM with `L = max(reference) - min(reference)`.
/// Identical inputs give exactly 1.
pub fn ssim<T: Scalar>(estimate: &Volume3D<T>, reference: &Volume3D<T>) -> Result<f64> {
    check_dims("ssim", estimate, reference)?;
    if estimate.data() == reference.data() {
        if reference.dims().iter().any(|&d| d < SSIM_WINDOW) {
            return Err(IqtError::Argument(format!(
                "ssim needs every dim >= {SSIM_WINDOW}, got {:?}",
                reference.dims()
            )));
        }
        return Ok(1.0);
    }
    let (lo, hi) = reference.min_max();
    ssim_with_range(estimate, reference, hi.as_f64() - lo.as_f64())
}

/// Integer segmentation with voxel geometry and an optional legend.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelVolume {
    dims: [usize; 3],
    geometry: Geometry,
    labels: Vec<u32>,
    pub legend: BTreeMap<u32, String>,
}

impl LabelVolume {
    pub fn new(dims: [usize; 3], geometry: Geometry, labels: Vec<u32>) -> Result<Self> {
        if labels.len() != dims.iter().product::<usize>() {
            return Err(IqtError::arg(format!(
                "label count {} does not match dims {dims:?}",
                labels.len()
            )));
        }
        geometry.validate()?;
        Ok(LabelVolume {
            dims,
            geometry,
            labels,
            legend: BTreeMap::new(),
        })
    }

    /// Labels stored as floating point (e.g. read from NIfTI); every value
    /// must be a non-negative integer.
    pub fn from_volume<T: Scalar>(vol: &Volume3D<T>) -> Result<Self> {
        let labels = vol
            .data()
            .iter()
            .map(|v| {
                let f = v.as_f64();
                if f < 0.0 || f.fract() != 0.0 || f > u32::MAX as f64 {
                    Err(IqtError::arg(format!("label value {f} is not a non-negative integer")))
                } else {
                    Ok(f as u32)
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(vol.dims(), *vol.geometry(), labels)
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn voxel_count(&self, id: u32) -> usize {
        self.labels.iter().filter(|&&l| l == id).count()
    }

    /// Structure volume in mm³.
    pub fn structure_volume(&self, id: u32) -> f64 {
        self.voxel_count(id) as f64 * self.geometry.voxel_volume()
    }
}

/// `2|V - V*| / (V + V*)`.
pub fn rve_from_volumes(v: f64, v_gold: f64) -> Result<f64> {
    if !(v >= 0.0 && v_gold >= 0.0) {
        return Err(IqtError::arg(format!("volumes must be non-negative: {v}, {v_gold}")));
    }
    if v + v_gold == 0.0 {
        return Err(IqtError::DegenerateMask("structure absent from both label volumes".into()));
    }
    Ok(2.0 * (v - v_gold).abs() / (v + v_gold))
}

pub fn rve(labels_est: &LabelVolume, labels_gold: &LabelVolume, structure_id: u32) -> Result<f64> {
    if labels_est.dims != labels_gold.dims {
        return Err(IqtError::Argument(format!(
            "rve: label dims differ, {:?} vs {:?}",
            labels_est.dims, labels_gold.dims
        )));
    }
    rve_from_volumes(
        labels_est.structure_volume(structure_id),
        labels_gold.structure_volume(structure_id),
    )
    .map_err(|e| match e {
        IqtError::DegenerateMask(_) => {
            IqtError::DegenerateMask(format!("structure {structure_id} absent from both label volumes"))
        }
        other => other,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vol(dims: [usize; 3], f: impl FnMut(usize, usize, usize) -> f64) -> Volume3D<f64> {
        Volume3D::from_fn(dims, Geometry::isotropic(1.0), f).unwrap()
    }

    #[test]
    fn psnr_closed_forms() {
        let r = vol([4, 4, 4], |x, y, z| ((x + y + z) % 2) as f64);
        assert_eq!(psnr(&r, &r).unwrap(), f64::INFINITY);
        let e = r.map(|v| v + 0.1).unwrap();
        assert!((psnr(&e, &r).unwrap() - 20.0).abs() < 1e-9);
        let other = vol([4, 4, 3], |_, _, _| 0.0);
        assert!(matches!(psnr(&other, &r), Err(IqtError::Argument(_))));
    }

    #[test]
    fn ssim_identity_and_negation() {
        let r = vol([12, 12, 12], |x, y, z| ((x * 7 + y * 3 + z * 5) % 11) as f64 - 5.0);
        assert_eq!(ssim(&r, &r).unwrap(), 1.0);
        let mean: f64 = r.data().iter().sum::<f64>() / r.len() as f64;
        let neg = r.map(|v| 2.0 * mean - v).unwrap();
        assert!(ssim(&neg, &r).unwrap() < 0.0);
        let small = vol([10, 12, 12], |_, _, _| 1.0);
        assert!(matches!(ssim(&small, &small), Err(IqtError::Argument(_))));
    }

    #[test]
    fn gaussian_taps_sum_to_one_and_are_symmetric() {
        let t = gaussian_taps(11, 1.5);
        assert!((t.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        for i in 0..11 {
            assert_eq!(t[i], t[10 - i]);
        }
    }

    #[test]
    fn rve_arithmetic() {
        assert_eq!(rve_from_volumes(100.0, 100.0).unwrap(), 0.0);
        assert!((rve_from_volumes(150.0, 100.0).unwrap() - 0.4).abs() < 1e-15);
        assert_eq!(rve_from_volumes(0.0, 50.0).unwrap(), 2.0);
        assert!(matches!(rve_from_volumes(0.0, 0.0), Err(IqtError::DegenerateMask(_))));
    }

    #[test]
    fn rve_on_label_volumes_uses_voxel_volume() {
        let g = Geometry::new(1.0, 1.0, 2.0, 0.5).unwrap();
        let gold = LabelVolume::new([2, 2, 2], g, vec![1, 1, 0, 0, 2, 2, 2, 0]).unwrap();
        let est = LabelVolume::new([2, 2, 2], g, vec![1, 1, 1, 0, 2, 2, 0, 0]).unwrap();
        assert_eq!(gold.structure_volume(1), 2.0 * 2.5);
        assert!((rve(&est, &gold, 1).unwrap() - 0.4).abs() < 1e-15);
        assert!((rve(&est, &gold, 2).unwrap() - 0.4).abs() < 1e-15);
        assert!(matches!(rve(&est, &gold, 9), Err(IqtError::DegenerateMask(_))));
    }

    #[test]
    fn labels_from_float_volume() {
        let v = vol([2, 1, 1], |x, _, _| x as f64 * 3.0);
        assert_eq!(LabelVolume::from_volume(&v).unwrap().labels(), &[0, 3]);
        let bad = vol([2, 1, 1], |x, _, _| x as f64 * 0.5);
        assert!(LabelVolume::from_volume(&bad).is_err());
    }
}
