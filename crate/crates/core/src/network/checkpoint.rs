use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{build_aniso_unet, ModelSpec, ModelWeights, ParamKind};
use crate::autodiff::Tensor;
use crate::error::{IqtError, Result};
use crate::scalar::Scalar;

const MAGIC: &[u8; 8] = b"IQTMODEL";
const VERSION: u32 = 1;

/// Binary container: magic, version, spec JSON, then per parameter its
/// name, kind, 5-D shape and little-endian float32 values.
pub fn save_checkpoint<T: Scalar>(path: impl AsRef<Path>, spec: &ModelSpec, weights: &ModelWeights<T>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    let json = serde_json::to_vec(spec)?;
    w.write_all(&(json.len() as u32).to_le_bytes())?;
    w.write_all(&json)?;
    w.write_all(&(weights.len() as u32).to_le_bytes())?;
    for p in weights.params() {
        w.write_all(&(p.name.len() as u32).to_le_bytes())?;
        w.write_all(p.name.as_bytes())?;
        w.write_all(&[p.kind.code()])?;
        for d in p.tensor.shape() {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for v in p.tensor.data() {
            w.write_all(&(v.as_f64() as f32).to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

/// Load a checkpoint and verify that its parameters match the architecture
/// of the stored spec.
pub fn load_checkpoint<T: Scalar>(path: impl AsRef<Path>) -> Result<(ModelSpec, ModelWeights<T>)> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(IqtError::Format("not a model checkpoint".into()));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(IqtError::UnsupportedFormat(format!("checkpoint version {version}")));
    }
    let len = read_u32(&mut r)? as usize;
    let mut json = vec![0u8; len];
    r.read_exact(&mut json)?;
    let spec: ModelSpec = serde_json::from_slice(&json)?;
    spec.validate()?;
    let count = read_u32(&mut r)? as usize;
    let mut weights = ModelWeights::new();
    for _ in 0..count {
        let nlen = read_u32(&mut r)? as usize;
        let mut name = vec![0u8; nlen];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|e| IqtError::Format(e.to_string()))?;
        let mut kind = [0u8; 1];
        r.read_exact(&mut kind)?;
        let kind = ParamKind::from_code(kind[0])?;
        let mut shape = [0usize; 5];
        for s in &mut shape {
            *s = read_u32(&mut r)? as usize;
        }
        let n: usize = shape.iter().product();
        let mut buf = vec![0u8; 4 * n];
        r.read_exact(&mut buf)?;
        let data = buf
            .chunks_exact(4)
            .map(|c| T::lit(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
            .collect();
        weights.push(name, kind, Tensor::new(shape, data)?)?;
    }
    let reference: ModelWeights<T> = build_aniso_unet(&spec, 0)?;
    if reference.len() != weights.len() {
        return Err(IqtError::Format(format!(
            "checkpoint has {} parameters, spec implies {}",
            weights.len(),
            reference.len()
        )));
    }
    for (a, b) in reference.params().iter().zip(weights.params()) {
        if a.name != b.name || a.kind != b.kind || a.tensor.shape() != b.tensor.shape() {
            return Err(IqtError::Format(format!(
                "checkpoint parameter `{}` {:?} does not match expected `{}` {:?}",
                b.name,
                b.tensor.shape(),
                a.name,
                a.tensor.shape()
            )));
        }
        if a.kind == ParamKind::Mask && a.tensor != b.tensor {
            return Err(IqtError::Format(format!("mask `{}` differs from its construction", a.name)));
        }
    }
    Ok((spec, weights))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::MasksemblesSpec;

    #[test]
    fn round_trip_preserves_f32_weights() {
        let spec = ModelSpec {
            masksembles: Some(MasksemblesSpec { m: 2, s: 2.0 }),
            ..ModelSpec::toy(2)
        };
        let w: ModelWeights<f32> = build_aniso_unet(&spec, 9).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        save_checkpoint(&p, &spec, &w).unwrap();
        let (s2, w2) = load_checkpoint::<f32>(&p).unwrap();
        assert_eq!(s2, spec);
        assert_eq!(w2, w);
        assert_eq!(w2.mask_digest(), w.mask_digest());
    }

    #[test]
    fn corrupt_files_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.ckpt");
        std::fs::write(&p, b"IQTMODEX\x01\0\0\0").unwrap();
        assert!(matches!(load_checkpoint::<f32>(&p), Err(IqtError::Format(_))));
        let spec = ModelSpec::toy(2);
        let w: ModelWeights<f32> = build_aniso_unet(&spec, 1).unwrap();
        save_checkpoint(&p, &spec, &w).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        std::fs::write(&p, &bytes[..bytes.len() - 10]).unwrap();
        assert!(matches!(load_checkpoint::<f32>(&p), Err(IqtError::Io(_))));
    }
}
