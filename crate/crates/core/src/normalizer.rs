//! Landmark-based histogram normalisation (Nyul) and per-slice histogram
//! matching.
//!
//! Landmarks are percentiles of the foreground intensities (non-zero
//! voxels). A [`LandmarkTable`] holds the map `source_i -> target_i`; the
//! piecewise-linear transform through those points is [`apply_normalization`].
//! [`normalize`] first binds the table's source to a volume's own landmarks.

use std::cmp::Ordering;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{IqtError, Result};
use crate::scalar::Scalar;
use crate::volume::Volume3D;

/// Minimum foreground voxels for landmark estimation.
pub const MIN_FOREGROUND_VOXELS: usize = 100;

/// Deciles plus the 1st and 99th percentiles.
pub const DEFAULT_PERCENTILES: [f64; 11] = [1.0, 10.0, 20.0, 30.0, 40.0, 50.0, 60.0, 70.0, 80.0, 90.0, 99.0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LandmarkTable {
    pub percentiles: Vec<f64>,
    pub source_landmarks: Vec<f64>,
    pub target_landmarks: Vec<f64>,
}

impl LandmarkTable {
    pub fn new(percentiles: Vec<f64>, source_landmarks: Vec<f64>, target_landmarks: Vec<f64>) -> Result<Self> {
        let t = LandmarkTable {
            percentiles,
            source_landmarks,
            target_landmarks,
        };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.percentiles.len();
        if n < 2 || self.source_landmarks.len() != n || self.target_landmarks.len() != n {
            return Err(IqtError::arg(format!(
                "landmark table needs >= 2 entries of equal length (percentiles {}, source {}, target {})",
                n,
                self.source_landmarks.len(),
                self.target_landmarks.len()
            )));
        }
        validate_percentiles(&self.percentiles)?;
        for (name, l) in [("source", &self.source_landmarks), ("target", &self.target_landmarks)] {
            if l.iter().any(|v| !v.is_finite()) || l.windows(2).any(|w| w[1] < w[0]) {
                return Err(IqtError::arg(format!("{name} landmarks must be finite and non-decreasing")));
            }
        }
        Ok(())
    }

    /// Same percentiles and target, new source landmarks.
    pub fn with_source(&self, source_landmarks: Vec<f64>) -> Result<Self> {
        LandmarkTable::new(self.percentiles.clone(), source_landmarks, self.target_landmarks.clone())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let t: LandmarkTable = serde_json::from_slice(&std::fs::read(path)?)?;
        t.validate()?;
        Ok(t)
    }

    /// Evaluate the piecewise-linear map at `x`.
    ///
    /// Runs of equal source landmarks map to the midpoint of their targets.
    /// Outside the end landmarks the nearest non-degenerate segment is
    /// extended; if every segment is degenerate the map is a shift.
    pub fn map(&self, x: f64) -> f64 {
        let s = &self.source_landmarks;
        let t = &self.target_landmarks;
        let n = s.len();

        // degenerate run containing x
        if let Some(first) = s.iter().position(|&v| v == x) {
            let last = first + s[first..].iter().take_while(|&&v| v == x).count() - 1;
            return if first == last { t[first] } else { 0.5 * (t[first] + t[last]) };
        }

        let seg = |i: usize| -> Option<f64> {
            let ds = s[i + 1] - s[i];
            (ds > 0.0).then(|| (t[i + 1] - t[i]) / ds)
        };

        if x < s[0] {
            let slope = (0..n - 1).find_map(seg).unwrap_or(1.0);
            return t[0] + (x - s[0]) * slope;
        }
        if x > s[n - 1] {
            let slope = (0..n - 1).rev().find_map(seg).unwrap_or(1.0);
            return t[n - 1] + (x - s[n - 1]) * slope;
        }
        // last i with s[i] < x; then s[i] < x < s[i + 1]
        let i = s.partition_point(|&v| v < x) - 1;
        t[i] + (x - s[i]) * (t[i + 1] - t[i]) / (s[i + 1] - s[i])
    }
}

fn validate_percentiles(p: &[f64]) -> Result<()> {
    if p.iter().any(|v| !(v.is_finite() && *v > 0.0 && *v < 100.0)) {
        return Err(IqtError::arg(format!("percentiles must lie in (0, 100): {p:?}")));
    }
    if p.windows(2).any(|w| w[1] <= w[0]) {
        return Err(IqtError::arg(format!("percentiles must be strictly ascending: {p:?}")));
    }
    Ok(())
}

fn sort_floats(v: &mut [f64]) {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap_or(Ordering::Equal));
}

/// Percentile of a sorted sample by linear interpolation between order
/// statistics at position `p * (n - 1) / 100`.
pub fn percentile_sorted(sorted: &[f64], p: f64) -> f64 {
    let pos = p * (sorted.len() - 1) as f64 / 100.0;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

/// Foreground percentiles of `vol`.
pub fn compute_landmarks<T: Scalar>(vol: &Volume3D<T>, percentiles: &[f64]) -> Result<Vec<f64>> {
    validate_percentiles(percentiles)?;
    let mut fg: Vec<f64> = vol.foreground_values().iter().map(|v| v.as_f64()).collect();
    if fg.len() < MIN_FOREGROUND_VOXELS {
        return Err(IqtError::Estimation(format!(
            "{} foreground voxels, need at least {MIN_FOREGROUND_VOXELS}",
            fg.len()
        )));
    }
    sort_floats(&mut fg);
    Ok(percentiles.iter().map(|&p| percentile_sorted(&fg, p)).collect())
}

/// Average landmarks over a set of volumes. The returned table has
/// `source == target`.
pub fn fit_normalizer<T: Scalar>(volumes: &[Volume3D<T>], percentiles: &[f64]) -> Result<LandmarkTable> {
    if volumes.is_empty() {
        return Err(IqtError::arg("fit_normalizer needs at least one volume"));
    }
    let mut acc = vec![0.0; percentiles.len()];
    for v in volumes {
        for (a, l) in acc.iter_mut().zip(compute_landmarks(v, percentiles)?) {
            *a += l;
        }
    }
    let target: Vec<f64> = acc.iter().map(|a| a / volumes.len() as f64).collect();
    LandmarkTable::new(percentiles.to_vec(), target.clone(), target)
}

/// Map foreground intensities through the table; exact zeros stay zero.
pub fn apply_normalization<T: Scalar>(vol: &Volume3D<T>, table: &LandmarkTable) -> Result<Volume3D<T>> {
    table.validate()?;
    vol.map(|v| if v == T::zero() { v } else { T::lit(table.map(v.as_f64())) })
}

/// Bind the table's source to `vol`'s own landmarks, then map.
pub fn normalize<T: Scalar>(vol: &Volume3D<T>, table: &LandmarkTable) -> Result<Volume3D<T>> {
    let own = compute_landmarks(vol, &table.percentiles)?;
    apply_normalization(vol, &table.with_source(own)?)
}

/// Match each slice's foreground histogram to that of `reference_slice`.
///
/// Each foreground voxel's mid-rank quantile within its slice is looked up
/// in the reference slice's quantile function. Background stays zero and the
/// reference slice is returned unchanged.
pub fn slice_intensity_correct<T: Scalar>(vol: &Volume3D<T>, reference_slice: usize) -> Result<Volume3D<T>> {
    let [nx, ny, nz] = vol.dims();
    if reference_slice >= nz {
        return Err(IqtError::arg(format!("reference slice {reference_slice} out of range 0..{nz}")));
    }
    let mut reference: Vec<f64> = vol
        .slice_z(reference_slice)
        .into_iter()
        .filter(|v| *v != T::zero())
        .map(|v| v.as_f64())
        .collect();
    if reference.len() < MIN_FOREGROUND_VOXELS {
        return Err(IqtError::arg(format!(
            "reference slice has {} foreground voxels, need at least {MIN_FOREGROUND_VOXELS}",
            reference.len()
        )));
    }
    sort_floats(&mut reference);

    let mut out = vol.data().to_vec();
    for z in (0..nz).filter(|&z| z != reference_slice) {
        let idx: Vec<usize> = (0..nx * ny)
            .map(|p| p * nz + z)
            .filter(|&i| out[i] != T::zero())
            .collect();
        if idx.is_empty() {
            continue;
        }
        let mut order: Vec<usize> = (0..idx.len()).collect();
        order.sort_by(|&a, &b| out[idx[a]].partial_cmp(&out[idx[b]]).unwrap_or(Ordering::Equal));
        let n = idx.len();
        let mut mapped = vec![T::zero(); n];
        let mut start = 0;
        while start < n {
            let v = out[idx[order[start]]];
            let mut end = start;
            while end + 1 < n && out[idx[order[end + 1]]] == v {
                end += 1;
            }
            let rank = 0.5 * (start + end) as f64;
            let q = if n > 1 { rank / (n - 1) as f64 } else { 0.5 };
            let m = T::lit(percentile_sorted(&reference, 100.0 * q));
            for &o in &order[start..=end] {
                mapped[o] = m;
            }
            start = end + 1;
        }
        for (k, &i) in idx.iter().enumerate() {
            out[i] = mapped[k];
        }
    }
    vol.with_data(out)
}
