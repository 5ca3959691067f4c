use serde::{Deserialize, Serialize};

use crate::error::{IqtError, Result};

/// Fixed channel masks for ensemble inference.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MasksemblesSpec {
    /// Number of masks.
    pub m: usize,
    /// Overlap scale; each mask keeps `round(c / s)` of `c` channels.
    pub s: f64,
}

impl MasksemblesSpec {
    pub fn validate(&self) -> Result<()> {
        if self.m == 0 {
            return Err(IqtError::Spec("masksembles needs m >= 1".into()));
        }
        if !(self.s.is_finite() && self.s >= 1.0) {
            return Err(IqtError::Spec(format!("masksembles scale must be >= 1, got {}", self.s)));
        }
        Ok(())
    }

    pub fn active_channels(&self, c: usize) -> usize {
        ((c as f64 / self.s).round() as usize).clamp(1, c)
    }

    /// `m x c` binary masks, row-major. Mask `i` keeps channels
    /// `(i*k + j) mod c` for `j < k`, so consecutive masks overlap as little as
    /// the counts allow.
    pub fn build_masks(&self, c: usize) -> Result<Vec<f64>> {
        self.validate()?;
        let k = self.active_channels(c);
        if k * self.m < c {
            return Err(IqtError::Spec(format!(
                "masksembles with m = {}, s = {} leaves channels unused in a {c}-channel layer (k = {k})",
                self.m, self.s
            )));
        }
        let mut out = vec![0.0; self.m * c];
        for i in 0..self.m {
            for j in 0..k {
                out[i * c + (i * k + j) % c] = 1.0;
            }
        }
        Ok(out)
    }
}

/// Anisotropic U-Net hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelSpec {
    /// Slice upsampling factor.
    pub r: usize,
    pub levels: usize,
    /// 3×3×3 convolutions per residual block.
    pub convs_per_level: usize,
    /// Filters on the first level; doubled per level.
    pub f0: usize,
    /// Middle 3×3×3 convolutions in each bottleneck block.
    pub bottleneck_depth: usize,
    pub masksembles: Option<MasksemblesSpec>,
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec {
            r: 4,
            levels: 5,
            convs_per_level: 2,
            f0: 16,
            bottleneck_depth: 2,
            masksembles: None,
        }
    }
}

impl ModelSpec {
    /// Three levels with four first-level filters.
    pub fn toy(r: usize) -> Self {
        ModelSpec {
            r,
            levels: 3,
            f0: 4,
            ..Default::default()
        }
    }

    /// Number of in-plane-only pooling stages, `log2(r)`.
    pub fn anisotropic_levels(&self) -> usize {
        self.r.trailing_zeros() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if ![2, 4, 8].contains(&self.r) {
            return Err(IqtError::Spec(format!("r must be 2, 4 or 8, got {}", self.r)));
        }
        if self.levels < self.anisotropic_levels() + 1 {
            return Err(IqtError::Spec(format!(
                "r = {} needs at least {} levels, got {}",
                self.r,
                self.anisotropic_levels() + 1,
                self.levels
            )));
        }
        if self.convs_per_level == 0 {
            return Err(IqtError::Spec("convs_per_level must be >= 1".into()));
        }
        if self.f0 < 2 || self.f0 % 2 != 0 {
            return Err(IqtError::Spec(format!("f0 must be even and >= 2, got {}", self.f0)));
        }
        if let Some(m) = &self.masksembles {
            m.validate()?;
            for level in 1..=self.levels {
                m.build_masks(self.filters(level))?;
            }
        }
        Ok(())
    }

    /// Filters at 1-based `level`.
    pub fn filters(&self, level: usize) -> usize {
        self.f0 << (level - 1)
    }

    /// Pooling window between `level` and `level + 1`.
    pub fn pool_window(&self, level: usize) -> [usize; 3] {
        if level <= self.anisotropic_levels() {
            [2, 2, 1]
        } else {
            [2, 2, 2]
        }
    }

    /// Slice upscale of the bottleneck block on the skip path of `level`.
    pub fn skip_upscale(&self, level: usize) -> usize {
        let a = self.anisotropic_levels();
        if level <= a {
            self.r >> (level - 1)
        } else {
            1
        }
    }

    /// Check an input patch `(x, y, z)` and return the output patch size.
    pub fn output_dims(&self, input: [usize; 3]) -> Result<[usize; 3]> {
        self.validate()?;
        let xy = 1usize << (self.levels - 1);
        let zdiv = 1usize << (self.levels - 1 - self.anisotropic_levels());
        if input[0] % xy != 0 || input[1] % xy != 0 || input[0] == 0 || input[1] == 0 {
            return Err(IqtError::Spec(format!(
                "patch x/y {:?} must be positive multiples of {xy} for {} levels",
                &input[..2],
                self.levels
            )));
        }
        if input[2] == 0 || input[2] % zdiv != 0 {
            return Err(IqtError::Spec(format!(
                "patch z {} must be a positive multiple of {zdiv} for {} levels at r = {}",
                input[2], self.levels, self.r
            )));
        }
        Ok([input[0], input[1], input[2] * self.r])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn skip_upscale_per_level() {
        let s = ModelSpec { r: 8, ..Default::default() };
        assert_eq!((1..=5).map(|l| s.skip_upscale(l)).collect::<Vec<_>>(), vec![8, 4, 2, 1, 1]);
        assert_eq!(s.pool_window(3), [2, 2, 1]);
        assert_eq!(s.pool_window(4), [2, 2, 2]);
        let t = ModelSpec::toy(4);
        assert_eq!((1..=3).map(|l| t.skip_upscale(l)).collect::<Vec<_>>(), vec![4, 2, 1]);
    }

    #[test]
    fn patch_constraints() {
        let s = ModelSpec::toy(4);
        assert_eq!(s.output_dims([16, 16, 4]).unwrap(), [16, 16, 16]);
        assert!(s.output_dims([18, 16, 4]).is_err());
        let d = ModelSpec { r: 2, ..Default::default() };
        assert_eq!(d.output_dims([32, 32, 16]).unwrap(), [32, 32, 32]);
        assert!(d.output_dims([32, 32, 4]).is_err());
        assert!(ModelSpec { levels: 2, ..ModelSpec::toy(8) }.validate().is_err());
        assert!(ModelSpec { r: 3, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn masks_round_robin() {
        let m = MasksemblesSpec { m: 4, s: 2.0 };
        let masks = m.build_masks(8).unwrap();
        for i in 0..4 {
            assert_eq!(masks[i * 8..(i + 1) * 8].iter().sum::<f64>(), 4.0);
        }
        assert_eq!(&masks[8..16], &[0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0]);
        let ones = MasksemblesSpec { m: 3, s: 1.0 }.build_masks(5).unwrap();
        assert!(ones.iter().all(|v| *v == 1.0));
        assert!(MasksemblesSpec { m: 2, s: 4.0 }.build_masks(16).is_err());
        assert!(MasksemblesSpec { m: 2, s: 0.5 }.validate().is_err());
    }
}
