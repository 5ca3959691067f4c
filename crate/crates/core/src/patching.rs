//! Sliding-window patch pairs, clip-overlap blending and the cubic B-spline
//! z-interpolation baseline.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{IqtError, Result};
use crate::scalar::Scalar;
use crate::volume::{Geometry, Volume3D};

/// Default fraction of background above which a patch pair is dropped.
pub const DEFAULT_BACKGROUND_THRESHOLD: f64 = 0.8;

/// Regular grid of patch positions over a zero-padded low-field volume and
/// the matching high-field grid (z scaled by `r`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchGrid {
    /// Unpadded low-field dims.
    pub lf_dims: [usize; 3],
    /// Low-field dims after padding.
    pub padded_dims: [usize; 3],
    /// Low-field patch size.
    pub patch: [usize; 3],
    /// Low-field step.
    pub step: [usize; 3],
    pub r: usize,
}

impl PatchGrid {
    pub fn new(lf_dims: [usize; 3], patch: [usize; 3], step: [usize; 3], r: usize) -> Result<Self> {
        if r == 0 {
            return Err(IqtError::arg("upsampling factor must be >= 1"));
        }
        let mut padded = [0; 3];
        for a in 0..3 {
            if patch[a] == 0 || step[a] == 0 || step[a] > patch[a] {
                return Err(IqtError::arg(format!(
                    "axis {a}: need 1 <= step <= patch (patch {:?}, step {:?})",
                    patch, step
                )));
            }
            padded[a] = if lf_dims[a] <= patch[a] {
                patch[a]
            } else {
                patch[a] + (lf_dims[a] - patch[a]).div_ceil(step[a]) * step[a]
            };
        }
        Ok(PatchGrid {
            lf_dims,
            padded_dims: padded,
            patch,
            step,
            r,
        })
    }

    pub fn counts(&self) -> [usize; 3] {
        let mut c = [0; 3];
        for (a, slot) in c.iter_mut().enumerate() {
            *slot = (self.padded_dims[a] - self.patch[a]) / self.step[a] + 1;
        }
        c
    }

    pub fn len(&self) -> usize {
        self.counts().iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn hf_dims(&self) -> [usize; 3] {
        [self.lf_dims[0], self.lf_dims[1], self.lf_dims[2] * self.r]
    }

    pub fn hf_patch(&self) -> [usize; 3] {
        [self.patch[0], self.patch[1], self.patch[2] * self.r]
    }

    pub fn hf_step(&self) -> [usize; 3] {
        [self.step[0], self.step[1], self.step[2] * self.r]
    }

    fn hf_padded(&self) -> [usize; 3] {
        [self.padded_dims[0], self.padded_dims[1], self.padded_dims[2] * self.r]
    }

    /// Grid indices in x-major order.
    pub fn positions(&self) -> impl Iterator<Item = [usize; 3]> {
        let c = self.counts();
        (0..c[0]).flat_map(move |i| (0..c[1]).flat_map(move |j| (0..c[2]).map(move |k| [i, j, k])))
    }

    pub fn flat_index(&self, idx: [usize; 3]) -> usize {
        let c = self.counts();
        (idx[0] * c[1] + idx[1]) * c[2] + idx[2]
    }
}

/// One training example with its provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchPair<T> {
    pub lf: Vec<T>,
    pub hf: Vec<T>,
    pub grid_index: [usize; 3],
    pub subject: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatchSet<T> {
    pub lf_patch: [usize; 3],
    pub hf_patch: [usize; 3],
    pub r: usize,
    pub pairs: Vec<PatchPair<T>>,
}

impl<T: Scalar> PatchSet<T> {
    pub fn empty(lf_patch: [usize; 3], r: usize) -> Self {
        PatchSet {
            lf_patch,
            hf_patch: [lf_patch[0], lf_patch[1], lf_patch[2] * r],
            r,
            pairs: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Append another set with matching shapes.
    pub fn extend(&mut self, other: PatchSet<T>) -> Result<()> {
        if other.lf_patch != self.lf_patch || other.r != self.r {
            return Err(IqtError::shape("PatchSet::extend", &self.lf_patch, &other.lf_patch));
        }
        self.pairs.extend(other.pairs);
        Ok(())
    }

    pub fn subjects(&self) -> Vec<usize> {
        let mut s: Vec<usize> = self.pairs.iter().map(|p| p.subject).collect();
        s.sort_unstable();
        s.dedup();
        s
    }

    const MAGIC: &'static [u8; 8] = b"IQTPATCH";

    /// Flat binary cache: magic, version, count, patch dims, r; then per pair
    /// subject and grid index (u32) followed by float32 LF and HF data.
    pub fn write_cache(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(Self::MAGIC)?;
        w.write_all(&1u32.to_le_bytes())?;
        w.write_all(&(self.pairs.len() as u64).to_le_bytes())?;
        for d in self.lf_patch.iter().chain(&self.hf_patch) {
            w.write_all(&(*d as u32).to_le_bytes())?;
        }
        w.write_all(&(self.r as u32).to_le_bytes())?;
        for p in &self.pairs {
            w.write_all(&(p.subject as u32).to_le_bytes())?;
            for i in p.grid_index {
                w.write_all(&(i as u32).to_le_bytes())?;
            }
            for v in p.lf.iter().chain(&p.hf) {
                w.write_all(&(v.as_f64() as f32).to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_cache(path: impl AsRef<Path>) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != Self::MAGIC {
            return Err(IqtError::Format("not a patch cache".into()));
        }
        let mut b4 = [0u8; 4];
        let mut b8 = [0u8; 8];
        let mut u32_ = |r: &mut BufReader<File>| -> Result<usize> {
            r.read_exact(&mut b4)?;
            Ok(u32::from_le_bytes(b4) as usize)
        };
        let version = u32_(&mut r)?;
        if version != 1 {
            return Err(IqtError::UnsupportedFormat(format!("patch cache version {version}")));
        }
        r.read_exact(&mut b8)?;
        let count = u64::from_le_bytes(b8) as usize;
        let lf_patch = [u32_(&mut r)?, u32_(&mut r)?, u32_(&mut r)?];
        let hf_patch = [u32_(&mut r)?, u32_(&mut r)?, u32_(&mut r)?];
        let rr = u32_(&mut r)?;
        let (nl, nh) = (lf_patch.iter().product::<usize>(), hf_patch.iter().product::<usize>());
        let mut pairs = Vec::with_capacity(count);
        let mut buf = vec![0u8; 4 * (nl + nh)];
        for _ in 0..count {
            let subject = u32_(&mut r)?;
            let grid_index = [u32_(&mut r)?, u32_(&mut r)?, u32_(&mut r)?];
            r.read_exact(&mut buf)?;
            let vals: Vec<T> = buf
                .chunks_exact(4)
                .map(|c| T::lit(f32::from_le_bytes(c.try_into().unwrap()) as f64))
                .collect();
            pairs.push(PatchPair {
                lf: vals[..nl].to_vec(),
                hf: vals[nl..].to_vec(),
                grid_index,
                subject,
            });
        }
        Ok(PatchSet {
            lf_patch,
            hf_patch,
            r: rr,
            pairs,
        })
    }
}

/// Copy a `patch`-sized block at `origin` from a volume, zero outside it.
fn crop<T: Scalar>(data: &[T], dims: [usize; 3], origin: [usize; 3], patch: [usize; 3]) -> Vec<T> {
    let mut out = vec![T::zero(); patch.iter().product()];
    for i in 0..patch[0] {
        let x = origin[0] + i;
        if x >= dims[0] {
            break;
        }
        for j in 0..patch[1] {
            let y = origin[1] + j;
            if y >= dims[1] {
                break;
            }
            let z0 = origin[2];
            if z0 >= dims[2] {
                continue;
            }
            let len = patch[2].min(dims[2] - z0);
            let src = (x * dims[1] + y) * dims[2] + z0;
            let dst = (i * patch[1] + j) * patch[2];
            out[dst..dst + len].copy_from_slice(&data[src..src + len]);
        }
    }
    out
}

/// Cut every low-field patch of `lf` on `grid` (zero padded).
pub fn extract_lf_patches<T: Scalar>(lf: &Volume3D<T>, grid: &PatchGrid) -> Result<Vec<Vec<T>>> {
    if lf.dims() != grid.lf_dims {
        return Err(IqtError::shape("extract_lf_patches", &lf.dims(), &grid.lf_dims));
    }
    Ok(grid
        .positions()
        .map(|idx| {
            let o = [idx[0] * grid.step[0], idx[1] * grid.step[1], idx[2] * grid.step[2]];
            crop(lf.data(), lf.dims(), o, grid.patch)
        })
        .collect())
}

/// Cut every high-field patch of `hf` on the grid's high-field positions.
pub fn extract_hf_patches<T: Scalar>(hf: &Volume3D<T>, grid: &PatchGrid) -> Result<Vec<Vec<T>>> {
    if hf.dims() != grid.hf_dims() {
        return Err(IqtError::shape("extract_hf_patches", &hf.dims(), &grid.hf_dims()));
    }
    let (step, patch) = (grid.hf_step(), grid.hf_patch());
    Ok(grid
        .positions()
        .map(|idx| crop(hf.data(), hf.dims(), [idx[0] * step[0], idx[1] * step[1], idx[2] * step[2]], patch))
        .collect())
}

/// Matched LF/HF patches on a regular grid; pairs whose LF patch has more
/// than `bg_threshold` background (exact zero, padding included) are dropped.
#[allow(clippy::too_many_arguments)]
pub fn extract_pairs<T: Scalar>(
    lf: &Volume3D<T>,
    hf: &Volume3D<T>,
    r: usize,
    patch: [usize; 3],
    step: [usize; 3],
    bg_threshold: f64,
    subject: usize,
) -> Result<(PatchSet<T>, PatchGrid)> {
    let grid = PatchGrid::new(lf.dims(), patch, step, r)?;
    if hf.dims() != grid.hf_dims() {
        return Err(IqtError::Argument(format!(
            "high-field dims {:?} must equal low-field dims {:?} with z scaled by r = {r}",
            hf.dims(),
            lf.dims()
        )));
    }
    let lfp = extract_lf_patches(lf, &grid)?;
    let hfp = extract_hf_patches(hf, &grid)?;
    let mut set = PatchSet::empty(patch, r);
    for ((l, h), idx) in lfp.into_iter().zip(hfp).zip(grid.positions()) {
        let bg = l.iter().filter(|v| **v == T::zero()).count() as f64 / l.len() as f64;
        if bg > bg_threshold {
            continue;
        }
        set.pairs.push(PatchPair {
            lf: l,
            hf: h,
            grid_index: idx,
            subject,
        });
    }
    Ok((set, grid))
}

/// For each coordinate along one axis, the index of the patch whose centre
/// is nearest (ties go to the later patch).
fn owners(len: usize, patch: usize, step: usize, count: usize) -> Vec<(usize, usize)> {
    (0..len)
        .map(|c| {
            // compare doubled distances to stay in integers: centre_i*2 = 2*i*step + patch - 1
            let c2 = 2 * c as i64;
            let mut best = 0usize;
            let mut best_d = i64::MAX;
            for i in 0..count {
                let centre2 = 2 * (i * step) as i64 + patch as i64 - 1;
                let d = (c2 - centre2).abs();
                if d <= best_d {
                    best = i;
                    best_d = d;
                }
            }
            (best, c - best * step)
        })
        .collect()
}

/// Reassemble a high-field volume from one patch per grid position, each
/// voxel taken from the patch whose centre is nearest per axis; padding is
/// cropped away.
pub fn blend_clip<T: Scalar>(patches: &[Vec<T>], grid: &PatchGrid, geometry: Geometry) -> Result<Volume3D<T>> {
    if patches.len() != grid.len() {
        return Err(IqtError::arg(format!(
            "blend_clip needs one patch per grid position: got {}, grid has {}",
            patches.len(),
            grid.len()
        )));
    }
    let (patch, step, padded, counts) = (grid.hf_patch(), grid.hf_step(), grid.hf_padded(), grid.counts());
    let plen: usize = patch.iter().product();
    if let Some(bad) = patches.iter().position(|p| p.len() != plen) {
        return Err(IqtError::arg(format!("patch {bad} has {} voxels, expected {plen}", patches[bad].len())));
    }
    let out_dims = grid.hf_dims();
    let ox = owners(padded[0], patch[0], step[0], counts[0]);
    let oy = owners(padded[1], patch[1], step[1], counts[1]);
    let oz = owners(padded[2], patch[2], step[2], counts[2]);
    let mut data = Vec::with_capacity(out_dims.iter().product());
    for &(px, lx) in &ox[..out_dims[0]] {
        for &(py, ly) in &oy[..out_dims[1]] {
            for &(pz, lz) in &oz[..out_dims[2]] {
                let p = &patches[(px * counts[1] + py) * counts[2] + pz];
                data.push(p[(lx * patch[1] + ly) * patch[2] + lz]);
            }
        }
    }
    Volume3D::new(out_dims, geometry, data)
}

/// Ownership map: each voxel labelled with the flat index of the patch it
/// is taken from.
pub fn ownership_map(grid: &PatchGrid) -> Vec<usize> {
    let patch = grid.hf_patch();
    let plen: usize = patch.iter().product();
    let patches: Vec<Vec<f64>> = (0..grid.len()).map(|i| vec![i as f64; plen]).collect();
    blend_clip(&patches, grid, Geometry::isotropic(1.0))
        .map(|v| v.data().iter().map(|x| *x as usize).collect())
        .unwrap_or_default()
}

/// Solve `c[i-1] + 4 c[i] + c[i+1] = 6 f[i]` with linear end conditions
/// (`c[-1] = 2c[0] - c[1]`, `c[n] = 2c[n-1] - c[n-2]`).
///
/// With those end conditions the first and last equations reduce to
/// `c[0] = f[0]` and `c[n-1] = f[n-1]`; the interior is tridiagonal.
fn bspline_coefficients(f: &[f64]) -> Vec<f64> {
    let n = f.len();
    let mut c = vec![0.0; n];
    c[0] = f[0];
    c[n - 1] = f[n - 1];
    let m = n - 2;
    if m == 0 {
        return c;
    }
    // Thomas algorithm on the interior unknowns c[1..n-1]
    let mut cp = vec![0.0; m];
    let mut dp = vec![0.0; m];
    for i in 0..m {
        let mut rhs = 6.0 * f[i + 1];
        if i == 0 {
            rhs -= c[0];
        }
        if i == m - 1 {
            rhs -= c[n - 1];
        }
        let denom = 4.0 - if i > 0 { cp[i - 1] } else { 0.0 };
        cp[i] = 1.0 / denom;
        dp[i] = (rhs - if i > 0 { dp[i - 1] } else { 0.0 }) / denom;
    }
    for i in (0..m).rev() {
        let next = if i + 1 < m { c[i + 2] } else { 0.0 };
        c[i + 1] = dp[i] - cp[i] * next;
        if i + 1 == m {
            c[i + 1] = dp[i];
        }
    }
    c
}

#[inline]
fn cubic_basis(t: f64) -> [f64; 4] {
    let t2 = t * t;
    let t3 = t2 * t;
    let u = 1.0 - t;
    [
        u * u * u / 6.0,
        (3.0 * t3 - 6.0 * t2 + 4.0) / 6.0,
        (-3.0 * t3 + 3.0 * t2 + 3.0 * t + 1.0) / 6.0,
        t3 / 6.0,
    ]
}

/// Evaluate the interpolating cubic B-spline of `f` at `x` (sample units).
/// Coefficients beyond the ends are extended linearly, so constants and
/// linear ramps are reproduced exactly, including when extrapolating.
pub fn bspline_eval(coeffs: &[f64], x: f64) -> f64 {
    let n = coeffs.len() as isize;
    let coef = |i: isize| -> f64 {
        if i < 0 {
            coeffs[0] + i as f64 * (coeffs[1] - coeffs[0])
        } else if i >= n {
            coeffs[(n - 1) as usize] + (i - n + 1) as f64 * (coeffs[(n - 1) as usize] - coeffs[(n - 2) as usize])
        } else {
            coeffs[i as usize]
        }
    };
    let i = x.floor() as isize;
    let b = cubic_basis(x - i as f64);
    b[0] * coef(i - 1) + b[1] * coef(i) + b[2] * coef(i + 1) + b[3] * coef(i + 2)
}

/// Cubic B-spline interpolation along z to `r` times the slice count.
/// Output slice j sits at input slice coordinate `j / r`.
pub fn cubic_upsample_z<T: Scalar>(vol: &Volume3D<T>, r: usize) -> Result<Volume3D<T>> {
    let [nx, ny, nz] = vol.dims();
    if nz < 4 {
        return Err(IqtError::arg(format!("cubic interpolation needs >= 4 slices, got {nz}")));
    }
    if r == 0 {
        return Err(IqtError::arg("upsampling factor must be >= 1"));
    }
    let nz_out = nz * r;
    let mut out = Vec::with_capacity(nx * ny * nz_out);
    let mut col = vec![0.0; nz];
    for c in vol.data().chunks_exact(nz) {
        for (d, s) in col.iter_mut().zip(c) {
            *d = s.as_f64();
        }
        let coeffs = bspline_coefficients(&col);
        for j in 0..nz_out {
            out.push(T::lit(bspline_eval(&coeffs, j as f64 / r as f64)));
        }
    }
    let g = vol.geometry();
    let geometry = Geometry::new(
        g.voxel_x,
        g.voxel_y,
        g.slice_thickness_z / r as f64,
        g.slice_gap_z / r as f64,
    )?;
    Volume3D::new([nx, ny, nz_out], geometry, out)
}

/// Foreground of a volume upsampled `r` times along z: output slice `j`
/// is foreground when either input slice bracketing `j / r` is non-zero.
pub fn upsampled_foreground<T: Scalar>(vol: &Volume3D<T>, r: usize) -> Result<Vec<bool>> {
    if r == 0 {
        return Err(IqtError::arg("upsampling factor must be >= 1"));
    }
    let [nx, ny, nz] = vol.dims();
    let d = vol.data();
    let mut out = Vec::with_capacity(nx * ny * nz * r);
    for c in d.chunks_exact(nz) {
        for j in 0..nz * r {
            let lo = j / r;
            let hi = (lo + usize::from(j % r != 0)).min(nz - 1);
            out.push(c[lo] != T::zero() || c[hi] != T::zero());
        }
    }
    Ok(out)
}

/// Set every voxel outside `foreground` to zero.
pub fn apply_foreground<T: Scalar>(vol: &Volume3D<T>, foreground: &[bool]) -> Result<Volume3D<T>> {
    if foreground.len() != vol.len() {
        return Err(IqtError::shape("apply_foreground", &[vol.len()], &[foreground.len()]));
    }
    let data = vol
        .data()
        .iter()
        .zip(foreground)
        .map(|(&v, &f)| if f { v } else { T::zero() })
        .collect();
    vol.with_data(data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_volume(dims: [usize; 3], seed: u64) -> Volume3D<f64> {
        let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        Volume3D::from_fn(dims, Geometry::isotropic(1.0), |_, _, _| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 11) as f64 / (1u64 << 53) as f64) + 0.5
        })
        .unwrap()
    }

    #[test]
    fn upsampled_foreground_brackets_nonzero_slices() {
        let g = Geometry::isotropic(1.0);
        let v = Volume3D::<f64>::from_fn([1, 1, 4], g, |_, _, z| if z == 2 { 1.0 } else { 0.0 }).unwrap();
        let f = upsampled_foreground(&v, 2).unwrap();
        assert_eq!(f, vec![false, false, false, true, true, true, false, false]);
        let m = apply_foreground(&cubic_upsample_z(&v, 2).unwrap(), &f).unwrap();
        assert_eq!(m.get(0, 0, 0), 0.0);
        assert_eq!(m.get(0, 0, 4), 1.0);
    }

    #[test]
    fn grid_count_for_64_cube_case() {
        let lf = random_volume([64, 64, 16], 1);
        let hf = random_volume([64, 64, 64], 2);
        let (set, grid) = extract_pairs(&lf, &hf, 4, [32, 32, 8], [16, 16, 4], 0.8, 0).unwrap();
        assert_eq!(grid.counts(), [3, 3, 3]);
        assert_eq!(set.len(), 27);
        assert_eq!(set.pairs[0].hf.len(), 32 * 32 * 32);
        assert_eq!(set.pairs[0].lf.len(), 32 * 32 * 8);
    }

    #[test]
    fn all_zero_lf_yields_no_pairs_unless_filter_disabled() {
        let g = Geometry::isotropic(1.0);
        let lf = Volume3D::<f64>::zeros([32, 32, 8], g).unwrap();
        let hf = Volume3D::<f64>::zeros([32, 32, 16], g).unwrap();
        let (set, _) = extract_pairs(&lf, &hf, 2, [16, 16, 4], [8, 8, 2], 0.8, 0).unwrap();
        assert!(set.is_empty());
        let (set, grid) = extract_pairs(&lf, &hf, 2, [16, 16, 4], [8, 8, 2], 1.0, 0).unwrap();
        assert_eq!(set.len(), grid.len());
        assert_eq!(grid.len(), 3 * 3 * 3);
    }

    #[test]
    fn incompatible_dims_rejected() {
        let lf = random_volume([16, 16, 4], 1);
        let hf = random_volume([16, 16, 12], 2);
        assert!(matches!(
            extract_pairs(&lf, &hf, 4, [8, 8, 2], [4, 4, 1], 0.8, 0),
            Err(IqtError::Argument(_))
        ));
    }

    #[test]
    fn padding_reaches_next_grid_aligned_size() {
        let g = PatchGrid::new([50, 40, 9], [32, 32, 8], [16, 16, 4], 4).unwrap();
        assert_eq!(g.padded_dims, [64, 48, 12]);
        assert_eq!(g.counts(), [3, 2, 2]);
        let small = PatchGrid::new([10, 10, 3], [32, 32, 8], [16, 16, 4], 4).unwrap();
        assert_eq!(small.padded_dims, [32, 32, 8]);
        assert_eq!(small.len(), 1);
    }

    #[test]
    fn extract_then_blend_is_identity() {
        for (r, lf_dims) in [(2, [37, 29, 11]), (4, [40, 33, 9]), (8, [20, 20, 5])] {
            let hf = random_volume([lf_dims[0], lf_dims[1], lf_dims[2] * r], r as u64);
            let grid = PatchGrid::new(lf_dims, [16, 16, 16 / r], [8, 8, 8 / r], r).unwrap();
            let patches = extract_hf_patches(&hf, &grid).unwrap();
            let back = blend_clip(&patches, &grid, *hf.geometry()).unwrap();
            assert_eq!(back, hf);
        }
    }

    #[test]
    fn single_patch_grid_crops() {
        let grid = PatchGrid::new([5, 6, 2], [8, 8, 4], [4, 4, 2], 2).unwrap();
        assert_eq!(grid.len(), 1);
        let patch: Vec<f64> = (0..8 * 8 * 8).map(|i| i as f64).collect();
        let v = blend_clip(&[patch.clone()], &grid, Geometry::isotropic(1.0)).unwrap();
        assert_eq!(v.dims(), [5, 6, 4]);
        assert_eq!(v.get(4, 5, 3), patch[(4 * 8 + 5) * 8 + 3]);
    }

    #[test]
    fn two_patch_step_at_overlap_midline() {
        // x: patches at 0 and 16, size 32, overlap [16, 32) with midline 24
        let grid = PatchGrid::new([48, 1, 1], [32, 1, 1], [16, 1, 1], 1).unwrap();
        assert_eq!(grid.len(), 2);
        let v = blend_clip(&[vec![0.0; 32], vec![1.0; 32]], &grid, Geometry::isotropic(1.0)).unwrap();
        for x in 0..48 {
            assert_eq!(v.data()[x], if x < 24 { 0.0 } else { 1.0 }, "x={x}");
        }
    }

    #[test]
    fn odd_overlap_tie_goes_to_later_patch() {
        // patches size 5 step 2: centres 2 and 4; voxel 3 ties
        let o = owners(7, 5, 2, 2);
        assert_eq!(o[2].0, 0);
        assert_eq!(o[3].0, 1);
    }

    #[test]
    fn ownership_tiles_the_volume() {
        let grid = PatchGrid::new([40, 24, 6], [16, 16, 4], [8, 8, 2], 2).unwrap();
        let map = ownership_map(&grid);
        let counts = grid.counts();
        let hf = grid.hf_dims();
        for (i, &owner) in map.iter().enumerate() {
            let z = i % hf[2];
            let y = (i / hf[2]) % hf[1];
            let x = i / (hf[1] * hf[2]);
            let (px, rest) = (owner / (counts[1] * counts[2]), owner % (counts[1] * counts[2]));
            let (py, pz) = (rest / counts[2], rest % counts[2]);
            let (hp, hs) = (grid.hf_patch(), grid.hf_step());
            assert!(x >= px * hs[0] && x < px * hs[0] + hp[0]);
            assert!(y >= py * hs[1] && y < py * hs[1] + hp[1]);
            assert!(z >= pz * hs[2] && z < pz * hs[2] + hp[2]);
        }
    }

    #[test]
    fn missing_patches_rejected() {
        let grid = PatchGrid::new([32, 16, 4], [16, 16, 4], [8, 8, 2], 1).unwrap();
        assert!(matches!(
            blend_clip::<f64>(&[vec![0.0; 1024]], &grid, Geometry::isotropic(1.0)),
            Err(IqtError::Argument(_))
        ));
    }

    #[test]
    fn cubic_reproduces_constants_and_ramps() {
        let g = Geometry::isotropic(1.0);
        let c = Volume3D::<f64>::filled([2, 2, 6], g, 3.25).unwrap();
        for v in cubic_upsample_z(&c, 3).unwrap().data() {
            assert!((v - 3.25).abs() < 1e-12);
        }
        let ramp = Volume3D::<f64>::from_fn([1, 2, 7], g, |_, y, z| 2.0 * z as f64 - 1.0 + y as f64).unwrap();
        let up = cubic_upsample_z(&ramp, 4).unwrap();
        assert_eq!(up.dims(), [1, 2, 28]);
        for y in 0..2 {
            for j in 0..28 {
                let want = 2.0 * (j as f64 / 4.0) - 1.0 + y as f64;
                assert!((up.get(0, y, j) - want).abs() < 1e-9);
            }
        }
        let short = Volume3D::<f64>::zeros([1, 1, 3], g).unwrap();
        assert!(cubic_upsample_z(&short, 2).is_err());
    }

    #[test]
    fn cubic_interpolates_samples() {
        let v = random_volume([1, 1, 9], 4);
        let up = cubic_upsample_z(&v, 2).unwrap();
        for k in 0..9 {
            assert!((up.data()[2 * k] - v.data()[k]).abs() < 1e-12);
        }
    }

    #[test]
    fn patch_cache_round_trip() {
        let lf = random_volume([16, 16, 4], 5);
        let hf = random_volume([16, 16, 8], 6);
        let (set, _) = extract_pairs(&lf, &hf, 2, [8, 8, 2], [4, 4, 1], 1.0, 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("p.bin");
        set.write_cache(&p).unwrap();
        let back: PatchSet<f64> = PatchSet::read_cache(&p).unwrap();
        assert_eq!(back.len(), set.len());
        assert_eq!(back.pairs[5].grid_index, set.pairs[5].grid_index);
        assert_eq!(back.pairs[5].subject, 3);
        for (a, b) in back.pairs[7].hf.iter().zip(&set.pairs[7].hf) {
            assert_eq!(*a, (*b as f32) as f64);
        }
    }
}
