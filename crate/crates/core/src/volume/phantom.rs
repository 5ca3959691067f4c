//! Deterministic synthetic brain phantoms with soft tissue masks.
//!
//! Concentric, smoothly deformed ellipsoidal shells: a WM core with folded
//! boundary and two ventricles, a GM shell, a thin CSF rim, and an exact
//! zero background outside the brain.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Geometry, TissueMasks, Volume3D};
use crate::error::{IqtError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TissueMeans {
    pub wm: f64,
    pub gm: f64,
    pub oth: f64,
}

impl Default for TissueMeans {
    fn default() -> Self {
        TissueMeans {
            wm: 1.0,
            gm: 0.75,
            oth: 0.3,
        }
    }
}

/// Spherical intensity inclusion; centre and radius in voxel units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Lesion {
    pub center: [f64; 3],
    pub radius: f64,
    pub intensity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomConfig {
    pub dims: [usize; 3],
    pub geometry: Geometry,
    pub seed: u64,
    pub means: TissueMeans,
    /// Relative amplitude of the random low-order shape deformation.
    pub deformation: f64,
    /// Relative amplitude of the smooth multiplicative intensity modulation.
    pub modulation: f64,
    pub lesions: Vec<Lesion>,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        PhantomConfig {
            dims: [48, 48, 48],
            geometry: Geometry::isotropic(0.7),
            seed: 0,
            means: TissueMeans::default(),
            deformation: 0.08,
            modulation: 0.02,
            lesions: Vec::new(),
        }
    }
}

impl PhantomConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dims.iter().any(|&d| d < 16) {
            return Err(IqtError::arg(format!("phantom dims must be >= 16 per axis: {:?}", self.dims)));
        }
        let m = self.means;
        if [m.wm, m.gm, m.oth].iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(IqtError::arg(format!("tissue means must be positive: {m:?}")));
        }
        if !(0.0..0.5).contains(&self.deformation) || !(0.0..0.5).contains(&self.modulation) {
            return Err(IqtError::arg("deformation and modulation must lie in [0, 0.5)"));
        }
        self.geometry.validate()
    }
}

/// Sum of random plane waves evaluated on a direction or position.
struct Waves {
    k: Vec<[f64; 3]>,
    phase: Vec<f64>,
    amp: Vec<f64>,
}

impl Waves {
    fn random(rng: &mut ChaCha8Rng, count: usize, freq: f64) -> Self {
        let mut k = Vec::with_capacity(count);
        let mut phase = Vec::with_capacity(count);
        let mut amp = Vec::with_capacity(count);
        for _ in 0..count {
            k.push([
                rng.random_range(-freq..freq),
                rng.random_range(-freq..freq),
                rng.random_range(-freq..freq),
            ]);
            phase.push(rng.random_range(0.0..std::f64::consts::TAU));
            amp.push(rng.random_range(0.5..1.0) / count as f64);
        }
        Waves { k, phase, amp }
    }

    fn eval(&self, p: [f64; 3]) -> f64 {
        self.k
            .iter()
            .zip(&self.phase)
            .zip(&self.amp)
            .map(|((k, ph), a)| a * (k[0] * p[0] + k[1] * p[1] + k[2] * p[2] + ph).sin())
            .sum()
    }
}

#[inline]
fn logistic(t: f64) -> f64 {
    1.0 / (1.0 + (-t).exp())
}

/// Generate a phantom volume and its tissue masks. Pure function of `cfg`.
pub fn generate_phantom(cfg: &PhantomConfig) -> Result<(Volume3D<f64>, TissueMasks<f64>)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let [nx, ny, nz] = cfg.dims;

    let jitter = |rng: &mut ChaCha8Rng| 1.0 + rng.random_range(-0.05..0.05);
    let axes = [0.82 * jitter(&mut rng), 0.78 * jitter(&mut rng), 0.74 * jitter(&mut rng)];
    let shape = Waves::random(&mut rng, 6, 2.5);
    let folds = Waves::random(&mut rng, 8, 9.0);
    let shading = Waves::random(&mut rng, 4, 2.0);
    let vent_offset = [rng.random_range(-0.03..0.03), rng.random_range(-0.03..0.03)];

    // Transition width: about half a voxel along the finest axis.
    let width = 0.5 * 2.0 / (nx.min(ny).min(nz) as f64);

    let n = nx * ny * nz;
    let (mut wm, mut gm, mut oth, mut img) = (vec![0.0; n], vec![0.0; n], vec![1.0; n], vec![0.0; n]);
    let coord = |i: usize, len: usize| (2.0 * i as f64 + 1.0) / len as f64 - 1.0;

    for x in 0..nx {
        for y in 0..ny {
            for z in 0..nz {
                let i = (x * ny + y) * nz + z;
                let p = [coord(x, nx), coord(y, ny), coord(z, nz)];
                let q = [p[0] / axes[0], p[1] / axes[1], p[2] / axes[2]];
                let s0 = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2]).sqrt();
                let dir = if s0 > 0.0 { [q[0] / s0, q[1] / s0, q[2] / s0] } else { [0.0, 0.0, 1.0] };
                let s = s0 / (1.0 + cfg.deformation * shape.eval(dir));
                if s > 1.0 {
                    continue;
                }

                let wm_edge = 0.6 * (1.0 + 0.9 * folds.eval(dir));
                let wm_raw = logistic((wm_edge - s) / width);
                let csf_rim = logistic((s - 0.9) / width);
                let vent = [-1.0, 1.0]
                    .iter()
                    .map(|side| {
                        let v = [
                            (p[0] - side * 0.14 - vent_offset[0]) / 0.07,
                            (p[1] - 0.05 - vent_offset[1]) / 0.22,
                            (p[2] - 0.05) / 0.12,
                        ];
                        let sv = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
                        logistic((1.0 - sv) / (width / 0.07))
                    })
                    .fold(0.0f64, f64::max);

                let w = wm_raw * (1.0 - vent);
                let g = (1.0 - wm_raw) * (1.0 - csf_rim) * (1.0 - vent);
                let o = 1.0 - w - g;
                wm[i] = w;
                gm[i] = g;
                oth[i] = o.clamp(0.0, 1.0);

                let base = cfg.means.wm * w + cfg.means.gm * g + cfg.means.oth * oth[i];
                let mut v = base * (1.0 + cfg.modulation * shading.eval(p) * 2.0);
                for l in &cfg.lesions {
                    let d = ((x as f64 - l.center[0]).powi(2)
                        + (y as f64 - l.center[1]).powi(2)
                        + (z as f64 - l.center[2]).powi(2))
                    .sqrt();
                    let lam = logistic((l.radius - d) / 0.5);
                    v = (1.0 - lam) * v + lam * l.intensity;
                }
                // keep the brain strictly non-zero so background stays well defined
                img[i] = if v == 0.0 { f64::MIN_POSITIVE } else { v };
            }
        }
    }

    let g = cfg.geometry;
    let masks = TissueMasks::new(
        Volume3D::new(cfg.dims, g, wm)?,
        Volume3D::new(cfg.dims, g, gm)?,
        Volume3D::new(cfg.dims, g, oth)?,
    )?;
    Ok((Volume3D::new(cfg.dims, g, img)?, masks))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_given_seed() {
        let cfg = PhantomConfig {
            dims: [20, 20, 20],
            seed: 11,
            ..Default::default()
        };
        let (a, ma) = generate_phantom(&cfg).unwrap();
        let (b, mb) = generate_phantom(&cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(ma, mb);
        let (c, _) = generate_phantom(&PhantomConfig { seed: 12, ..cfg }).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn dims_too_small_rejected() {
        let cfg = PhantomConfig {
            dims: [16, 15, 16],
            ..Default::default()
        };
        assert!(matches!(generate_phantom(&cfg), Err(IqtError::Argument(_))));
    }

    #[test]
    fn masks_sum_to_one_and_background_is_exact_zero() {
        let cfg = PhantomConfig {
            dims: [24, 24, 20],
            seed: 3,
            ..Default::default()
        };
        let (v, m) = generate_phantom(&cfg).unwrap();
        let mut background = 0;
        for i in 0..v.len() {
            let s = m.wm.data()[i] + m.gm.data()[i] + m.oth.data()[i];
            assert!((s - 1.0).abs() <= 1e-4);
            if v.data()[i] == 0.0 {
                background += 1;
                assert_eq!(m.oth.data()[i], 1.0);
            }
        }
        assert!(background > v.len() / 5);
        // corners are outside the brain
        assert_eq!(v.get(0, 0, 0), 0.0);
    }

    #[test]
    fn lesion_raises_local_intensity() {
        let base = PhantomConfig {
            dims: [32, 32, 32],
            seed: 5,
            ..Default::default()
        };
        let with = PhantomConfig {
            lesions: vec![Lesion {
                center: [16.0, 16.0, 16.0],
                radius: 3.0,
                intensity: 3.0,
            }],
            ..base.clone()
        };
        let (a, _) = generate_phantom(&base).unwrap();
        let (b, _) = generate_phantom(&with).unwrap();
        assert!(b.get(16, 16, 16) > a.get(16, 16, 16) + 1.0);
        assert_eq!(a.get(0, 0, 0), b.get(0, 0, 0));
    }
}
