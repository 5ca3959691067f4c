use serde::{Deserialize, Serialize};

use super::{forward, predict_with_uncertainty, ModelSpec, ModelWeights};
use crate::autodiff::Tensor;
use crate::error::{IqtError, Result};
use crate::normalizer::{normalize, LandmarkTable};
use crate::patching::{apply_foreground, blend_clip, extract_lf_patches, upsampled_foreground, PatchGrid};
use crate::scalar::Scalar;
use crate::volume::{Geometry, Volume3D};

/// Low-field patch size, step and inference batch size.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnhanceOptions {
    pub patch: [usize; 3],
    pub step: [usize; 3],
    pub batch: usize,
    /// Zero the output wherever the (skull-stripped) input is background.
    pub mask_background: bool,
}

impl EnhanceOptions {
    /// `32×32×(32/r)` patches with half-patch steps.
    pub fn for_r(r: usize) -> Self {
        let pz = (32 / r).max(1);
        EnhanceOptions {
            patch: [32, 32, pz],
            step: [16, 16, (pz / 2).max(1)],
            batch: 4,
            mask_background: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Enhanced {
    pub volume: Volume3D<f64>,
    /// Ensemble variance when the model has Masksembles layers.
    pub variance: Option<Volume3D<f64>>,
}

/// Normalise, cut into patches, run the network, and blend back into a
/// volume with `r` times as many slices.
pub fn enhance_volume<T: Scalar>(
    weights: &ModelWeights<T>,
    spec: &ModelSpec,
    lf: &Volume3D<f64>,
    table: Option<&LandmarkTable>,
    opts: &EnhanceOptions,
) -> Result<Enhanced> {
    if opts.batch == 0 {
        return Err(IqtError::arg("batch size must be >= 1"));
    }
    let out_patch = spec.output_dims(opts.patch)?;
    let vol = match table {
        Some(t) => normalize(lf, t)?,
        None => lf.clone(),
    };
    let r = spec.r;
    let grid = PatchGrid::new(vol.dims(), opts.patch, opts.step, r)?;
    let patches: Vec<Vec<T>> = extract_lf_patches(&vol.cast::<T>(), &grid)?;
    let item = [1, opts.patch[0], opts.patch[1], opts.patch[2]];
    let out_len: usize = out_patch.iter().product();
    let mut est: Vec<Vec<f64>> = Vec::with_capacity(patches.len());
    let mut var: Vec<Vec<f64>> = Vec::new();
    if spec.masksembles.is_some() {
        for p in &patches {
            let t = Tensor::new([1, 1, opts.patch[0], opts.patch[1], opts.patch[2]], p.clone())?;
            let (m, v) = predict_with_uncertainty(weights, spec, &t)?;
            est.push(m.data().iter().map(|x| x.as_f64()).collect());
            var.push(v.data().iter().map(|x| x.as_f64()).collect());
        }
    } else {
        for chunk in patches.chunks(opts.batch) {
            let refs: Vec<&[T]> = chunk.iter().map(|p| p.as_slice()).collect();
            let out = forward(weights, spec, &Tensor::stack(&refs, item)?)?;
            for k in 0..chunk.len() {
                est.push(out.data()[k * out_len..(k + 1) * out_len].iter().map(|x| x.as_f64()).collect());
            }
        }
    }
    let g = lf.geometry();
    let geometry = Geometry::new(g.voxel_x, g.voxel_y, g.slice_thickness_z / r as f64, g.slice_gap_z / r as f64)?;
    let mut volume = blend_clip(&est, &grid, geometry)?;
    let mut variance = if var.is_empty() {
        None
    } else {
        Some(blend_clip(&var, &grid, geometry)?)
    };
    if opts.mask_background {
        let fg = upsampled_foreground(lf, r)?;
        volume = apply_foreground(&volume, &fg)?;
        variance = variance.map(|v| apply_foreground(&v, &fg)).transpose()?;
    }
    Ok(Enhanced { volume, variance })
}
