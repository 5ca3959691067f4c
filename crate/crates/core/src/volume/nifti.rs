//! Minimal single-file NIfTI-1 reader/writer plus the JSON geometry sidecar.
//!
//! Only uncompressed `.nii` files with magic `n+1` are handled. Orientation
//! is treated as identity; the slice gap lives in `<name>.geom.json`.

use std::fs;
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Geometry, Volume3D};
use crate::error::{IqtError, Result};

const HEADER_SIZE: usize = 348;
const VOX_OFFSET: usize = 352;
const DT_INT16: i16 = 4;
const DT_FLOAT32: i16 = 16;

/// Parsed subset of the 348-byte header, plus the raw bytes.
#[derive(Debug, Clone)]
pub struct NiftiHeader {
    pub dim: [i16; 8],
    pub datatype: i16,
    pub bitpix: i16,
    pub pixdim: [f32; 8],
    pub vox_offset: f32,
    pub scl_slope: f32,
    pub scl_inter: f32,
    pub descrip: String,
    pub little_endian: bool,
    pub raw: Vec<u8>,
}

struct Reader<'a> {
    bytes: &'a [u8],
    le: bool,
}

impl Reader<'_> {
    fn i16(&self, off: usize) -> i16 {
        let b = [self.bytes[off], self.bytes[off + 1]];
        if self.le {
            i16::from_le_bytes(b)
        } else {
            i16::from_be_bytes(b)
        }
    }

    fn i32(&self, off: usize) -> i32 {
        let b: [u8; 4] = self.bytes[off..off + 4].try_into().unwrap();
        if self.le {
            i32::from_le_bytes(b)
        } else {
            i32::from_be_bytes(b)
        }
    }

    fn f32(&self, off: usize) -> f32 {
        f32::from_bits(self.i32(off) as u32)
    }
}

fn parse_header(bytes: &[u8]) -> Result<NiftiHeader> {
    if bytes.len() < HEADER_SIZE {
        return Err(IqtError::Io(io::Error::new(
            io::ErrorKind::UnexpectedEof,
            format!("header truncated: {} of {HEADER_SIZE} bytes", bytes.len()),
        )));
    }
    let le = if i32::from_le_bytes(bytes[0..4].try_into().unwrap()) == HEADER_SIZE as i32 {
        true
    } else if i32::from_be_bytes(bytes[0..4].try_into().unwrap()) == HEADER_SIZE as i32 {
        false
    } else {
        return Err(IqtError::Format("sizeof_hdr is not 348".into()));
    };
    if &bytes[344..348] != b"n+1\0" {
        return Err(IqtError::Format(format!(
            "magic {:?} is not single-file NIfTI-1 \"n+1\"",
            String::from_utf8_lossy(&bytes[344..348])
        )));
    }
    let r = Reader { bytes, le };
    let mut dim = [0i16; 8];
    let mut pixdim = [0f32; 8];
    for i in 0..8 {
        dim[i] = r.i16(40 + 2 * i);
        pixdim[i] = r.f32(76 + 4 * i);
    }
    let descrip = String::from_utf8_lossy(&bytes[148..228])
        .trim_end_matches('\0')
        .to_string();
    Ok(NiftiHeader {
        dim,
        datatype: r.i16(70),
        bitpix: r.i16(72),
        pixdim,
        vox_offset: r.f32(108),
        scl_slope: r.f32(112),
        scl_inter: r.f32(116),
        descrip,
        little_endian: le,
        raw: bytes[..HEADER_SIZE].to_vec(),
    })
}

/// Read a NIfTI-1 volume. Voxel sizes come from `pixdim[1..3]`; the slice
/// gap is zero (callers may override it, e.g. from the sidecar).
pub fn read_nifti(path: impl AsRef<Path>) -> Result<(Volume3D<f64>, NiftiHeader)> {
    let mut file = fs::File::open(path.as_ref())?;
    let mut bytes = Vec::new();
    file.read_to_end(&mut bytes)?;
    let header = parse_header(&bytes)?;

    if header.dim[0] < 3 || header.dim[0] > 7 {
        return Err(IqtError::UnsupportedFormat(format!(
            "dim[0] = {} (need a 3-D volume)",
            header.dim[0]
        )));
    }
    let dims = [header.dim[1], header.dim[2], header.dim[3]];
    if dims.iter().any(|&d| d <= 0) {
        return Err(IqtError::Format(format!("non-positive dims {dims:?}")));
    }
    let dims = dims.map(|d| d as usize);
    let width = match header.datatype {
        DT_FLOAT32 => 4,
        DT_INT16 => 2,
        other => {
            return Err(IqtError::UnsupportedFormat(format!(
                "datatype code {other} (only float32 and int16 are supported)"
            )))
        }
    };
    let n = dims[0] * dims[1] * dims[2];
    let offset = header.vox_offset.max(HEADER_SIZE as f32) as usize;
    let end = offset + n * width;
    if bytes.len() < end {
        return Err(IqtError::Io(io::Error::new(
            io::ErrorKind::UnexpectedEof,
            format!("data section truncated: need {end} bytes, file has {}", bytes.len()),
        )));
    }
    let body = &bytes[offset..end];
    let r = Reader {
        bytes: body,
        le: header.little_endian,
    };
    let scale = header.scl_slope != 0.0
        && header.scl_slope.is_finite()
        && !(header.scl_slope == 1.0 && header.scl_inter == 0.0);
    let (slope, inter) = (header.scl_slope as f64, header.scl_inter as f64);

    // NIfTI stores x fastest; the in-memory layout has z fastest.
    let mut data = vec![0.0f64; n];
    for k in 0..dims[2] {
        for j in 0..dims[1] {
            for i in 0..dims[0] {
                let src = i + dims[0] * (j + dims[1] * k);
                let raw = if width == 4 {
                    r.f32(src * 4) as f64
                } else {
                    r.i16(src * 2) as f64
                };
                let v = if scale { raw * slope + inter } else { raw };
                data[(i * dims[1] + j) * dims[2] + k] = v;
            }
        }
    }
    let pd = |i: usize| {
        let v = header.pixdim[i].abs() as f64;
        if v > 0.0 && v.is_finite() {
            v
        } else {
            1.0
        }
    };
    let geometry = Geometry::new(pd(1), pd(2), pd(3), 0.0)?;
    let vol = Volume3D::new(dims, geometry, data)
        .map_err(|e| IqtError::Format(format!("invalid voxel data: {e}")))?;
    Ok((vol, header))
}

/// Write a little-endian float32 NIfTI-1 file with `vox_offset` 352.
/// `pixdim[3]` holds the slice pitch (thickness + gap).
pub fn write_nifti(vol: &Volume3D<f64>, path: impl AsRef<Path>) -> Result<()> {
    let dims = vol.dims();
    if dims.iter().any(|&d| d > i16::MAX as usize) {
        return Err(IqtError::arg(format!("dims {dims:?} exceed NIfTI-1 limits")));
    }
    let g = vol.geometry();
    let mut h = vec![0u8; VOX_OFFSET];
    let put_i16 = |h: &mut [u8], off: usize, v: i16| h[off..off + 2].copy_from_slice(&v.to_le_bytes());
    let put_i32 = |h: &mut [u8], off: usize, v: i32| h[off..off + 4].copy_from_slice(&v.to_le_bytes());
    let put_f32 = |h: &mut [u8], off: usize, v: f32| h[off..off + 4].copy_from_slice(&v.to_le_bytes());

    put_i32(&mut h, 0, HEADER_SIZE as i32);
    h[38] = b'r';
    let dim: [i16; 8] = [3, dims[0] as i16, dims[1] as i16, dims[2] as i16, 1, 1, 1, 1];
    let pixdim: [f32; 8] = [
        1.0,
        g.voxel_x as f32,
        g.voxel_y as f32,
        g.slice_pitch() as f32,
        0.0,
        0.0,
        0.0,
        0.0,
    ];
    for i in 0..8 {
        put_i16(&mut h, 40 + 2 * i, dim[i]);
        put_f32(&mut h, 76 + 4 * i, pixdim[i]);
    }
    put_i16(&mut h, 70, DT_FLOAT32);
    put_i16(&mut h, 72, 32);
    put_f32(&mut h, 108, VOX_OFFSET as f32);
    put_f32(&mut h, 112, 1.0);
    put_f32(&mut h, 116, 0.0);
    h[123] = 2; // mm
    let descrip = b"iqt float32 volume";
    h[148..148 + descrip.len()].copy_from_slice(descrip);
    // sform: scaled identity
    put_i16(&mut h, 254, 1);
    put_f32(&mut h, 280, pixdim[1]);
    put_f32(&mut h, 296 + 4, pixdim[2]);
    put_f32(&mut h, 312 + 8, pixdim[3]);
    h[344..348].copy_from_slice(b"n+1\0");

    let mut out = Vec::with_capacity(VOX_OFFSET + 4 * vol.len());
    out.extend_from_slice(&h);
    for k in 0..dims[2] {
        for j in 0..dims[1] {
            for i in 0..dims[0] {
                out.extend_from_slice(&(vol.get(i, j, k) as f32).to_le_bytes());
            }
        }
    }
    let mut file = fs::File::create(path.as_ref())?;
    file.write_all(&out)?;
    Ok(())
}

/// Slice thickness and gap that NIfTI-1 `pixdim` cannot carry.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeometrySidecar {
    pub slice_thickness_mm: f64,
    pub slice_gap_mm: f64,
}

/// `dir/name.nii` -> `dir/name.geom.json`.
pub fn sidecar_path(nifti_path: impl AsRef<Path>) -> PathBuf {
    let p = nifti_path.as_ref();
    let stem = p
        .file_name()
        .map(|s| s.to_string_lossy().to_string())
        .unwrap_or_default();
    let stem = stem.strip_suffix(".nii").unwrap_or(&stem).to_string();
    p.with_file_name(format!("{stem}.geom.json"))
}

pub fn write_geometry_sidecar(nifti_path: impl AsRef<Path>, geometry: &Geometry) -> Result<()> {
    let side = GeometrySidecar {
        slice_thickness_mm: geometry.slice_thickness_z,
        slice_gap_mm: geometry.slice_gap_z,
    };
    fs::write(sidecar_path(nifti_path), serde_json::to_vec_pretty(&side)?)?;
    Ok(())
}

pub fn read_geometry_sidecar(nifti_path: impl AsRef<Path>) -> Result<Option<GeometrySidecar>> {
    let p = sidecar_path(nifti_path);
    if !p.exists() {
        return Ok(None);
    }
    Ok(Some(serde_json::from_slice(&fs::read(p)?)?))
}

/// Write the volume and its geometry sidecar.
pub fn save_volume(vol: &Volume3D<f64>, path: impl AsRef<Path>) -> Result<()> {
    write_nifti(vol, path.as_ref())?;
    write_geometry_sidecar(path, vol.geometry())
}

/// Read a volume, taking thickness/gap from the sidecar when present,
/// otherwise from `fallback` (e.g. CLI flags), otherwise from `pixdim[3]`.
pub fn load_volume(path: impl AsRef<Path>, fallback: Option<GeometrySidecar>) -> Result<Volume3D<f64>> {
    let (vol, _) = read_nifti(path.as_ref())?;
    let side = read_geometry_sidecar(path.as_ref())?.or(fallback);
    match side {
        Some(s) => {
            let g = vol.geometry();
            vol.with_geometry(Geometry::new(g.voxel_x, g.voxel_y, s.slice_thickness_mm, s.slice_gap_mm)?)
        }
        None => Ok(vol),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(dims: [usize; 3], g: Geometry) -> Volume3D<f64> {
        Volume3D::from_fn(dims, g, |x, y, z| (x as f32 * 1.5 - y as f32 * 0.25 + z as f32 * 3.0) as f64).unwrap()
    }

    #[test]
    fn round_trip_constant_volume() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.nii");
        let v = Volume3D::filled([8, 8, 8], Geometry::isotropic(1.0), 3.5).unwrap();
        write_nifti(&v, &p).unwrap();
        let (w, h) = read_nifti(&p).unwrap();
        assert_eq!(w.dims(), [8, 8, 8]);
        assert_eq!(w.data(), v.data());
        assert_eq!(h.datatype, 16);
    }

    #[test]
    fn round_trip_is_bit_exact_for_f32_values_with_anisotropic_dims() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.nii");
        let g = Geometry::new(0.7, 0.8, 2.1, 0.0).unwrap();
        let v = ramp([5, 3, 4], g);
        write_nifti(&v, &p).unwrap();
        let (w, _) = read_nifti(&p).unwrap();
        assert_eq!(w.dims(), [5, 3, 4]);
        for (a, b) in v.data().iter().zip(w.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        assert_eq!(w.geometry().voxel_x, 0.7f32 as f64);
        assert_eq!(w.geometry().voxel_y, 0.8f32 as f64);
        assert_eq!(w.geometry().slice_thickness_z, 2.1f32 as f64);
    }

    #[test]
    fn hcp_pixdim_gives_point_seven_mm_voxels() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("hcp.nii");
        let v = Volume3D::<f64>::zeros([4, 4, 4], Geometry::isotropic(0.7)).unwrap();
        write_nifti(&v, &p).unwrap();
        let (w, _) = read_nifti(&p).unwrap();
        let g = w.geometry();
        for s in [g.voxel_x, g.voxel_y, g.slice_thickness_z] {
            assert!((s - 0.7).abs() < 1e-6);
        }
        assert_eq!(g.slice_gap_z, 0.0);
    }

    #[test]
    fn zero_volume_file_size() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("z.nii");
        write_nifti(&Volume3D::zeros([4, 4, 4], Geometry::isotropic(1.0)).unwrap(), &p).unwrap();
        assert_eq!(fs::metadata(&p).unwrap().len(), 352 + 4 * 64);
    }

    #[test]
    fn wrong_magic_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.nii");
        write_nifti(&Volume3D::zeros([2, 2, 2], Geometry::isotropic(1.0)).unwrap(), &p).unwrap();
        let mut b = fs::read(&p).unwrap();
        b[344..348].copy_from_slice(b"nii\0");
        fs::write(&p, b).unwrap();
        assert!(matches!(read_nifti(&p), Err(IqtError::Format(_))));
    }

    #[test]
    fn unsupported_datatype_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("u.nii");
        write_nifti(&Volume3D::zeros([2, 2, 2], Geometry::isotropic(1.0)).unwrap(), &p).unwrap();
        let good = fs::read(&p).unwrap();

        let mut b = good.clone();
        b[70..72].copy_from_slice(&64i16.to_le_bytes());
        fs::write(&p, &b).unwrap();
        assert!(matches!(read_nifti(&p), Err(IqtError::UnsupportedFormat(_))));

        fs::write(&p, &good[..good.len() - 3]).unwrap();
        assert!(matches!(read_nifti(&p), Err(IqtError::Io(_))));
    }

    #[test]
    fn int16_with_scaling() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("i.nii");
        write_nifti(&Volume3D::zeros([2, 1, 1], Geometry::isotropic(1.0)).unwrap(), &p).unwrap();
        let mut b = fs::read(&p).unwrap();
        b[70..72].copy_from_slice(&4i16.to_le_bytes());
        b[72..74].copy_from_slice(&16i16.to_le_bytes());
        b[112..116].copy_from_slice(&2.0f32.to_le_bytes());
        b[116..120].copy_from_slice(&(-1.0f32).to_le_bytes());
        b.truncate(352);
        b.extend_from_slice(&7i16.to_le_bytes());
        b.extend_from_slice(&(-3i16).to_le_bytes());
        fs::write(&p, &b).unwrap();
        let (v, _) = read_nifti(&p).unwrap();
        assert_eq!(v.data(), &[13.0, -7.0]);
    }

    #[test]
    fn sidecar_carries_slice_gap() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("lf.nii");
        let g = Geometry::new(0.7, 0.7, 2.1, 0.7).unwrap();
        let v = ramp([3, 3, 3], g);
        save_volume(&v, &p).unwrap();
        assert!(dir.path().join("lf.geom.json").exists());
        let w = load_volume(&p, None).unwrap();
        assert_eq!(w.geometry().slice_gap_z, 0.7);
        assert_eq!(w.geometry().slice_thickness_z, 2.1);
        let (raw, _) = read_nifti(&p).unwrap();
        assert!((raw.geometry().slice_thickness_z - 2.8).abs() < 1e-6);
    }
}
