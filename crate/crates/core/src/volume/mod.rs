//! Volumetric data model: geometry, scalar volumes and tissue probability masks.

mod nifti;
mod phantom;

pub use nifti::{
    load_volume, read_geometry_sidecar, read_nifti, save_volume, sidecar_path, write_geometry_sidecar,
    write_nifti, GeometrySidecar, NiftiHeader,
};
pub use phantom::{generate_phantom, Lesion, PhantomConfig, TissueMeans};

use serde::{Deserialize, Serialize};

use crate::error::{IqtError, Result};
use crate::scalar::Scalar;

/// Tolerance on the per-voxel sum of tissue probabilities.
pub const MASK_SUM_TOLERANCE: f64 = 1e-4;

/// Acquisition geometry in millimetres.
///
/// The slice pitch along z is `slice_thickness_z + slice_gap_z`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Geometry {
    pub voxel_x: f64,
    pub voxel_y: f64,
    pub slice_thickness_z: f64,
    pub slice_gap_z: f64,
}

impl Geometry {
    pub fn new(voxel_x: f64, voxel_y: f64, slice_thickness_z: f64, slice_gap_z: f64) -> Result<Self> {
        let g = Geometry {
            voxel_x,
            voxel_y,
            slice_thickness_z,
            slice_gap_z,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn isotropic(size: f64) -> Self {
        Geometry {
            voxel_x: size,
            voxel_y: size,
            slice_thickness_z: size,
            slice_gap_z: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [self.voxel_x, self.voxel_y, self.slice_thickness_z];
        if positive.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(IqtError::arg(format!("voxel sizes must be positive and finite: {self:?}")));
        }
        if !(self.slice_gap_z.is_finite() && self.slice_gap_z >= 0.0) {
            return Err(IqtError::arg(format!("slice gap must be >= 0: {}", self.slice_gap_z)));
        }
        Ok(())
    }

    /// Centre-to-centre distance between adjacent slices.
    pub fn slice_pitch(&self) -> f64 {
        self.slice_thickness_z + self.slice_gap_z
    }

    pub fn voxel_volume(&self) -> f64 {
        self.voxel_x * self.voxel_y * self.slice_pitch()
    }

    /// Re-split the slice pitch into thickness and gap with the given ratio,
    /// e.g. `(3, 1)` turns a 2.8 mm pitch into 2.1 mm slices with 0.7 mm gaps.
    pub fn with_thickness_gap_ratio(&self, thickness: u32, gap: u32) -> Result<Self> {
        if thickness == 0 {
            return Err(IqtError::arg("thickness share must be positive"));
        }
        let pitch = self.slice_pitch();
        let total = (thickness + gap) as f64;
        Geometry::new(
            self.voxel_x,
            self.voxel_y,
            pitch * thickness as f64 / total,
            pitch * gap as f64 / total,
        )
    }
}

/// A 3-D scalar field stored row-major with z varying fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume3D<T> {
    dims: [usize; 3],
    geometry: Geometry,
    data: Vec<T>,
}

impl<T: Scalar> Volume3D<T> {
    pub fn new(dims: [usize; 3], geometry: Geometry, data: Vec<T>) -> Result<Self> {
        if dims.contains(&0) {
            return Err(IqtError::arg(format!("volume dims must be positive: {dims:?}")));
        }
        geometry.validate()?;
        let n = dims[0] * dims[1] * dims[2];
        if data.len() != n {
            return Err(IqtError::arg(format!(
                "data length {} does not match dims {:?} ({} voxels)",
                data.len(),
                dims,
                n
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(IqtError::arg(format!("non-finite value at voxel index {i}")));
        }
        Ok(Volume3D { dims, geometry, data })
    }

    pub fn filled(dims: [usize; 3], geometry: Geometry, value: T) -> Result<Self> {
        Self::new(dims, geometry, vec![value; dims.iter().product()])
    }

    pub fn zeros(dims: [usize; 3], geometry: Geometry) -> Result<Self> {
        Self::filled(dims, geometry, T::zero())
    }

    /// Build from a closure over voxel coordinates.
    pub fn from_fn(dims: [usize; 3], geometry: Geometry, mut f: impl FnMut(usize, usize, usize) -> T) -> Result<Self> {
        let mut data = Vec::with_capacity(dims.iter().product());
        for x in 0..dims[0] {
            for y in 0..dims[1] {
                for z in 0..dims[2] {
                    data.push(f(x, y, z));
                }
            }
        }
        Self::new(dims, geometry, data)
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geometry
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        (x * self.dims[1] + y) * self.dims[2] + z
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> T {
        self.data[self.index(x, y, z)]
    }

    /// Same dims and geometry, new data. Validates length and finiteness.
    pub fn with_data(&self, data: Vec<T>) -> Result<Self> {
        Self::new(self.dims, self.geometry, data)
    }

    pub fn with_geometry(&self, geometry: Geometry) -> Result<Self> {
        Self::new(self.dims, geometry, self.data.clone())
    }

    pub fn map(&self, mut f: impl FnMut(T) -> T) -> Result<Self> {
        self.with_data(self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn cast<U: Scalar>(&self) -> Volume3D<U> {
        Volume3D {
            dims: self.dims,
            geometry: self.geometry,
            data: self.data.iter().map(|v| U::lit(v.as_f64())).collect(),
        }
    }

    /// Voxels whose intensity is exactly zero.
    pub fn zero_mask(&self) -> Vec<bool> {
        self.data.iter().map(|v| *v == T::zero()).collect()
    }

    /// Intensities of non-background voxels (background = exact zero).
    pub fn foreground_values(&self) -> Vec<T> {
        self.data.iter().copied().filter(|v| *v != T::zero()).collect()
    }

    pub fn same_shape<U>(&self, other: &Volume3D<U>) -> bool {
        self.dims == other.dims
    }

    /// Extract slice `z` as an `nx * ny` buffer in (x, y) order.
    pub fn slice_z(&self, z: usize) -> Vec<T> {
        let mut out = Vec::with_capacity(self.dims[0] * self.dims[1]);
        for x in 0..self.dims[0] {
            for y in 0..self.dims[1] {
                out.push(self.get(x, y, z));
            }
        }
        out
    }

    pub fn min_max(&self) -> (T, T) {
        self.data
            .iter()
            .fold((T::infinity(), T::neg_infinity()), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }
}

/// Per-voxel probabilities for white matter, grey matter and everything else.
#[derive(Debug, Clone, PartialEq)]
pub struct TissueMasks<T> {
    pub wm: Volume3D<T>,
    pub gm: Volume3D<T>,
    pub oth: Volume3D<T>,
}

impl<T: Scalar> TissueMasks<T> {
    pub fn new(wm: Volume3D<T>, gm: Volume3D<T>, oth: Volume3D<T>) -> Result<Self> {
        let masks = TissueMasks { wm, gm, oth };
        masks.validate()?;
        Ok(masks)
    }

    pub fn validate(&self) -> Result<()> {
        if self.wm.dims != self.gm.dims || self.wm.dims != self.oth.dims {
            return Err(IqtError::shape("tissue masks", &self.wm.dims, &self.gm.dims));
        }
        let tol = T::lit(MASK_SUM_TOLERANCE);
        for i in 0..self.wm.len() {
            let (a, b, c) = (self.wm.data[i], self.gm.data[i], self.oth.data[i]);
            for v in [a, b, c] {
                if v < T::zero() || v > T::one() {
                    return Err(IqtError::arg(format!("mask value {v} outside [0,1] at voxel {i}")));
                }
            }
            if ((a + b + c) - T::one()).abs() > tol {
                return Err(IqtError::arg(format!("mask components sum to {} at voxel {i}", a + b + c)));
            }
        }
        Ok(())
    }

    /// Every voxel assigned entirely to `oth`.
    pub fn all_other(dims: [usize; 3], geometry: Geometry) -> Result<Self> {
        Ok(TissueMasks {
            wm: Volume3D::zeros(dims, geometry)?,
            gm: Volume3D::zeros(dims, geometry)?,
            oth: Volume3D::filled(dims, geometry, T::one())?,
        })
    }

    pub fn dims(&self) -> [usize; 3] {
        self.wm.dims
    }

    /// Rescale each voxel so the three probabilities sum to one.
    /// Voxels with zero total are assigned to `oth`.
    pub fn renormalized(&self) -> Result<Self> {
        let n = self.wm.len();
        let (mut wm, mut gm, mut oth) = (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
        for i in 0..n {
            let (a, b, c) = (
                self.wm.data[i].max(T::zero()),
                self.gm.data[i].max(T::zero()),
                self.oth.data[i].max(T::zero()),
            );
            let s = a + b + c;
            if s > T::zero() {
                wm.push((a / s).min(T::one()));
                gm.push((b / s).min(T::one()));
                oth.push((c / s).min(T::one()));
            } else {
                wm.push(T::zero());
                gm.push(T::zero());
                oth.push(T::one());
            }
        }
        TissueMasks::new(self.wm.with_data(wm)?, self.gm.with_data(gm)?, self.oth.with_data(oth)?)
    }
}

/// Background voxels: entirely `oth` and exactly zero intensity.
pub fn background_mask<T: Scalar>(vol: &Volume3D<T>, masks: &TissueMasks<T>) -> Result<Vec<bool>> {
    if vol.dims != masks.dims() {
        return Err(IqtError::shape("background_mask", &vol.dims, &masks.dims()));
    }
    let tol = T::lit(MASK_SUM_TOLERANCE);
    Ok(vol
        .data
        .iter()
        .zip(&masks.oth.data)
        .map(|(&v, &o)| v == T::zero() && o >= T::one() - tol)
        .collect())
}
