//! Anisotropic U-Net: in-plane-only pooling until voxels are isotropic,
//! residual blocks per level, bottleneck blocks that upsample the slice axis
//! on each skip path, and optional Masksembles channel masks.

mod checkpoint;
mod enhance;
mod spec;
mod weights;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use enhance::{enhance_volume, EnhanceOptions, Enhanced};
pub use spec::{MasksemblesSpec, ModelSpec};
pub use weights::{ModelWeights, Param, ParamKind};

use crate::autodiff::{Graph, Tensor, Var, BN_MOMENTUM};
use crate::error::{IqtError, Result};
use crate::scalar::Scalar;
use crate::training::glorot_init;

enum Init {
    Glorot,
    Zeros,
    Ones,
}

enum Source<'a, T> {
    Declare { weights: ModelWeights<T>, seed: u64 },
    Use(&'a ModelWeights<T>),
}

/// Batch-norm node with the indices of its running statistics.
#[derive(Debug, Clone, Copy)]
pub struct BnRecord {
    pub mean: usize,
    pub var: usize,
    pub node: Var,
}

/// Result of laying the network onto a graph.
pub struct NetworkGraph {
    pub output: Var,
    /// Graph handle per weight index for trainable parameters.
    pub param_vars: Vec<Option<Var>>,
    pub batchnorms: Vec<BnRecord>,
}

struct Ctx<'a, 'g, T> {
    g: &'g mut Graph<T>,
    src: Source<'a, T>,
    spec: &'a ModelSpec,
    external: Option<&'a [Var]>,
    trainable_ordinal: Vec<Option<usize>>,
    param_vars: Vec<Option<Var>>,
    batchnorms: Vec<BnRecord>,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl<T: Scalar> Ctx<'_, '_, T> {
    fn weights(&self) -> &ModelWeights<T> {
        match &self.src {
            Source::Declare { weights, .. } => weights,
            Source::Use(w) => w,
        }
    }

    fn ensure(&mut self, name: &str, kind: ParamKind, shape: [usize; 5], init: Init) -> Result<usize> {
        if let Source::Declare { weights, seed } = &mut self.src {
            if weights.index_of(name).is_none() {
                let t = match init {
                    Init::Glorot => glorot_init(shape, splitmix(*seed ^ splitmix(weights.len() as u64))),
                    Init::Zeros => Tensor::zeros(shape),
                    Init::Ones => Tensor::filled(shape, T::one()),
                };
                weights.push(name, kind, t)?;
            }
        }
        let w = self.weights();
        let i = w
            .index_of(name)
            .ok_or_else(|| IqtError::Spec(format!("weights lack parameter `{name}`")))?;
        let p = &w.params()[i];
        if p.tensor.shape() != shape || p.kind != kind {
            return Err(IqtError::Spec(format!(
                "parameter `{name}` has shape {:?} ({:?}), architecture expects {shape:?} ({kind:?})",
                p.tensor.shape(),
                p.kind
            )));
        }
        Ok(i)
    }

    fn trainable(&mut self, name: &str, shape: [usize; 5], init: Init) -> Result<Var> {
        let i = self.ensure(name, ParamKind::Trainable, shape, init)?;
        if self.param_vars.len() <= i {
            self.param_vars.resize(i + 1, None);
        }
        if let Some(v) = self.param_vars[i] {
            return Ok(v);
        }
        let v = match (self.external, self.trainable_ordinal.get(i).copied().flatten()) {
            (Some(ext), Some(o)) => ext[o],
            _ => {
                let t = self.weights().params()[i].tensor.clone();
                let training = self.g.is_training();
                self.g.leaf(t, training)
            }
        };
        self.param_vars[i] = Some(v);
        Ok(v)
    }

    fn conv(&mut self, name: &str, x: Var, cout: usize, k: usize) -> Result<Var> {
        let cin = self.g.shape(x)[1];
        let w = self.trainable(name, [cout, cin, k, k, k], Init::Glorot)?;
        self.g.conv(x, w, None)
    }

    fn up(&mut self, name: &str, x: Var, cout: usize, stride: [usize; 3]) -> Result<Var> {
        let cin = self.g.shape(x)[1];
        let w = self.trainable(name, [cin, cout, stride[0], stride[1], stride[2]], Init::Glorot)?;
        self.g.conv_transpose(x, w, None)
    }

    fn bn(&mut self, prefix: &str, x: Var) -> Result<Var> {
        let c = self.g.shape(x)[1];
        let shape = [1, c, 1, 1, 1];
        let gamma = self.trainable(&format!("{prefix}.gamma"), shape, Init::Ones)?;
        let beta = self.trainable(&format!("{prefix}.beta"), shape, Init::Zeros)?;
        let mi = self.ensure(&format!("{prefix}.mean"), ParamKind::RunningMean, shape, Init::Zeros)?;
        let vi = self.ensure(&format!("{prefix}.var"), ParamKind::RunningVar, shape, Init::Ones)?;
        let node = if self.g.is_training() {
            self.g.batchnorm(x, gamma, beta, None)?
        } else {
            let (m, v) = match &self.src {
                Source::Declare { weights, .. } => (weights.params()[mi].tensor.clone(), weights.params()[vi].tensor.clone()),
                Source::Use(w) => (w.params()[mi].tensor.clone(), w.params()[vi].tensor.clone()),
            };
            self.g.batchnorm(x, gamma, beta, Some((m.data(), v.data())))?
        };
        self.batchnorms.push(BnRecord { mean: mi, var: vi, node });
        Ok(node)
    }

    fn bn_relu(&mut self, prefix: &str, x: Var) -> Result<Var> {
        let y = self.bn(prefix, x)?;
        Ok(self.g.relu(y))
    }

    fn mask(&mut self, prefix: &str, x: Var) -> Result<Var> {
        let Some(ms) = self.spec.masksembles else {
            return Ok(x);
        };
        let c = self.g.shape(x)[1];
        let data: Vec<T> = ms.build_masks(c)?.into_iter().map(T::lit).collect();
        let shape = [ms.m, c, 1, 1, 1];
        if let Source::Declare { weights, .. } = &mut self.src {
            if weights.index_of(&format!("{prefix}.mask")).is_none() {
                weights.push(format!("{prefix}.mask"), ParamKind::Mask, Tensor::new(shape, data)?)?;
            }
        }
        let i = self.ensure(&format!("{prefix}.mask"), ParamKind::Mask, shape, Init::Zeros)?;
        let t = self.weights().params()[i].tensor.clone();
        self.g.masksemble(x, &t)
    }

    /// Residual block: (conv3, BN, ReLU) repeated, a last conv3, a 1×1×1 skip
    /// conv, their sum, BN, ReLU, then the optional channel mask.
    fn residual(&mut self, prefix: &str, x: Var, cout: usize) -> Result<Var> {
        let n = self.spec.convs_per_level;
        let mut h = x;
        for i in 0..n {
            h = self.conv(&format!("{prefix}.conv{i}.w"), h, cout, 3)?;
            if i + 1 < n {
                h = self.bn_relu(&format!("{prefix}.bn{i}"), h)?;
            }
        }
        let s = self.conv(&format!("{prefix}.skip.w"), x, cout, 1)?;
        let sum = self.g.add(h, s)?;
        let out = self.bn_relu(&format!("{prefix}.bn_out"), sum)?;
        self.mask(prefix, out)
    }

    /// Bottleneck block BB(b, u): slice transpose conv, then 1×1×1 at f,
    /// b 3×3×3 at f/2, 1×1×1 back to f, added to the transpose conv output.
    fn bottleneck(&mut self, prefix: &str, x: Var, u: usize) -> Result<Var> {
        let f = self.g.shape(x)[1];
        let t = self.up(&format!("{prefix}.up.w"), x, f, [1, 1, u])?;
        let mut h = self.conv(&format!("{prefix}.in.w"), t, f, 1)?;
        h = self.bn_relu(&format!("{prefix}.bn_in"), h)?;
        let b = self.spec.bottleneck_depth;
        let mid = if b > 0 { f / 2 } else { f };
        for j in 0..b {
            h = self.conv(&format!("{prefix}.mid{j}.w"), h, mid, 3)?;
            h = self.bn_relu(&format!("{prefix}.bn_mid{j}"), h)?;
        }
        h = self.conv(&format!("{prefix}.out.w"), h, f, 1)?;
        h = self.bn_relu(&format!("{prefix}.bn_out"), h)?;
        self.g.add(t, h)
    }

    fn unet(&mut self, input: Var) -> Result<Var> {
        let spec = self.spec;
        let levels = spec.levels;
        let mut enc = Vec::with_capacity(levels);
        let mut h = self.residual("enc1", input, spec.filters(1))?;
        enc.push(h);
        for k in 2..=levels {
            let p = self.g.maxpool(h, spec.pool_window(k - 1))?;
            h = self.residual(&format!("enc{k}"), p, spec.filters(k))?;
            enc.push(h);
        }
        for k in (1..levels).rev() {
            let f = spec.filters(k);
            let up = self.up(&format!("dec{k}.up.w"), h, f, [2, 2, 2])?;
            let skip = self.bottleneck(&format!("skip{k}"), enc[k - 1], spec.skip_upscale(k))?;
            let cat = self.g.concat_channels(up, skip)?;
            h = self.residual(&format!("dec{k}"), cat, f)?;
        }
        let cin = self.g.shape(h)[1];
        let w = self.trainable("final.w", [1, cin, 1, 1, 1], Init::Glorot)?;
        let b = self.trainable("final.b", [1, 1, 1, 1, 1], Init::Zeros)?;
        self.g.conv(h, w, Some(b))
    }
}

fn check_input(spec: &ModelSpec, shape: [usize; 5]) -> Result<[usize; 3]> {
    if shape[1] != 1 {
        return Err(IqtError::shape("network input (channels)", &shape, &[shape[0], 1, shape[2], shape[3], shape[4]]));
    }
    if let Some(m) = spec.masksembles {
        if shape[0] % m.m != 0 {
            return Err(IqtError::Argument(format!(
                "batch size {} must be divisible by the {} masks",
                shape[0], m.m
            )));
        }
    }
    spec.output_dims([shape[2], shape[3], shape[4]])
}

/// Create Glorot-initialised weights for `spec`.
pub fn build_aniso_unet<T: Scalar>(spec: &ModelSpec, seed: u64) -> Result<ModelWeights<T>> {
    spec.validate()?;
    let xy = 1usize << (spec.levels - 1);
    let z = 1usize << (spec.levels - 1 - spec.anisotropic_levels());
    let n = spec.masksembles.map_or(1, |m| m.m);
    let mut g = Graph::<T>::new(true);
    let x = g.constant(Tensor::zeros([n, 1, xy, xy, z]));
    let mut ctx = Ctx {
        g: &mut g,
        src: Source::Declare {
            weights: ModelWeights::new(),
            seed,
        },
        spec,
        external: None,
        trainable_ordinal: Vec::new(),
        param_vars: Vec::new(),
        batchnorms: Vec::new(),
    };
    ctx.unet(x)?;
    match ctx.src {
        Source::Declare { weights, .. } => Ok(weights),
        Source::Use(_) => unreachable!(),
    }
}

/// Lay the network onto `g`. When `external` is given, trainable
/// parameters use those handles (in [`ModelWeights::trainable_indices`]
/// order) instead of fresh leaves.
pub fn forward_graph<T: Scalar>(
    g: &mut Graph<T>,
    spec: &ModelSpec,
    weights: &ModelWeights<T>,
    input: Var,
    external: Option<&[Var]>,
) -> Result<NetworkGraph> {
    check_input(spec, g.shape(input))?;
    let mut ordinal = vec![None; weights.len()];
    let trainable = weights.trainable_indices();
    if let Some(ext) = external {
        if ext.len() != trainable.len() {
            return Err(IqtError::arg(format!(
                "expected {} parameter handles, got {}",
                trainable.len(),
                ext.len()
            )));
        }
    }
    for (o, &i) in trainable.iter().enumerate() {
        ordinal[i] = Some(o);
    }
    let mut ctx = Ctx {
        g,
        src: Source::Use(weights),
        spec,
        external,
        trainable_ordinal: ordinal,
        param_vars: Vec::new(),
        batchnorms: Vec::new(),
    };
    let output = ctx.unet(input)?;
    let mut param_vars = ctx.param_vars;
    param_vars.resize(weights.len(), None);
    Ok(NetworkGraph {
        output,
        param_vars,
        batchnorms: ctx.batchnorms,
    })
}

/// Inference-mode forward pass (running batch-norm statistics).
pub fn forward<T: Scalar>(weights: &ModelWeights<T>, spec: &ModelSpec, batch: &Tensor<T>) -> Result<Tensor<T>> {
    let mut g = Graph::new(false);
    let x = g.constant(batch.clone());
    let net = forward_graph(&mut g, spec, weights, x, None)?;
    Ok(g.value(net.output).clone())
}

/// Fold the batch statistics recorded on a training graph into the running
/// statistics: `running = momentum * running + (1 - momentum) * batch`.
pub fn update_running_stats<T: Scalar>(g: &Graph<T>, net: &NetworkGraph, weights: &mut ModelWeights<T>) {
    let mom = T::lit(BN_MOMENTUM);
    let one = T::one();
    for bn in &net.batchnorms {
        if let Some((m, v)) = g.batch_stats(bn.node) {
            let params = weights.params_mut();
            for (r, b) in params[bn.mean].tensor.data_mut().iter_mut().zip(m) {
                *r = mom * *r + (one - mom) * *b;
            }
            for (r, b) in params[bn.var].tensor.data_mut().iter_mut().zip(v) {
                *r = mom * *r + (one - mom) * *b;
            }
        }
    }
}

/// Per-voxel mean and population variance over the `m` mask members.
/// Returns tensors shaped like one output patch.
pub fn predict_with_uncertainty<T: Scalar>(
    weights: &ModelWeights<T>,
    spec: &ModelSpec,
    patch: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let m = spec
        .masksembles
        .ok_or_else(|| IqtError::Capability("model has no Masksembles layers".into()))?
        .m;
    let ps = patch.shape();
    if ps[0] != 1 {
        return Err(IqtError::shape("predict_with_uncertainty (single patch)", &ps, &[1, ps[1], ps[2], ps[3], ps[4]]));
    }
    let copies: Vec<&[T]> = (0..m).map(|_| patch.data()).collect();
    let batch = Tensor::stack(&copies, [ps[1], ps[2], ps[3], ps[4]])?;
    let out = forward(weights, spec, &batch)?;
    let os = out.shape();
    let len = out.len() / m;
    let mut mean = Vec::with_capacity(len);
    let mut var = Vec::with_capacity(len);
    for i in 0..len {
        let mu = (0..m).map(|k| out.data()[k * len + i].as_f64()).sum::<f64>() / m as f64;
        let v = (0..m)
            .map(|k| {
                let d = out.data()[k * len + i].as_f64() - mu;
                d * d
            })
            .sum::<f64>()
            / m as f64;
        mean.push(T::lit(mu));
        var.push(T::lit(v));
    }
    let shape = [1, os[1], os[2], os[3], os[4]];
    Ok((Tensor::new(shape, mean)?, Tensor::new(shape, var)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Trainable scalar count derived layer by layer.
    fn expected_params(spec: &ModelSpec) -> usize {
        let n = spec.convs_per_level;
        let rb = |cin: usize, cout: usize| {
            let convs = cin * cout * 27 + (n - 1) * cout * cout * 27;
            let bns = 2 * cout * n; // n-1 inner BN + output BN, 2 params each
            convs + cin * cout + bns
        };
        let bb = |f: usize, u: usize| {
            let b = spec.bottleneck_depth;
            let mid = f / 2;
            let mut p = f * f * u + f * f + 2 * f;
            for j in 0..b {
                let cin = if j == 0 { f } else { mid };
                p += cin * mid * 27 + 2 * mid;
            }
            p + mid * f + 2 * f
        };
        let mut total = rb(1, spec.filters(1));
        for k in 2..=spec.levels {
            total += rb(spec.filters(k - 1), spec.filters(k));
        }
        for k in 1..spec.levels {
            let f = spec.filters(k);
            total += spec.filters(k + 1) * f * 8;
            total += bb(f, spec.skip_upscale(k));
            total += rb(2 * f, f);
        }
        total + spec.filters(1) + 1
    }

    #[test]
    fn toy_parameter_count_matches_closed_form() {
        let spec = ModelSpec::toy(4);
        let w: ModelWeights<f32> = build_aniso_unet(&spec, 0).unwrap();
        assert_eq!(w.trainable_count(), expected_params(&spec));
        let spec8 = ModelSpec {
            levels: 4,
            ..ModelSpec::toy(8)
        };
        let w8: ModelWeights<f32> = build_aniso_unet(&spec8, 0).unwrap();
        assert_eq!(w8.trainable_count(), expected_params(&spec8));
    }

    #[test]
    fn toy_shapes() {
        let spec = ModelSpec::toy(4);
        let w: ModelWeights<f32> = build_aniso_unet(&spec, 1).unwrap();
        let y = forward(&w, &spec, &Tensor::zeros([2, 1, 16, 16, 4])).unwrap();
        assert_eq!(y.shape(), [2, 1, 16, 16, 16]);
        assert!(forward(&w, &spec, &Tensor::zeros([1, 1, 14, 16, 4])).is_err());
        assert_eq!(forward(&w, &spec, &Tensor::zeros([1, 1, 8, 4, 3])).unwrap().shape(), [1, 1, 8, 4, 12]);
    }

    #[test]
    fn zero_final_layer_gives_zero_output() {
        let spec = ModelSpec::toy(2);
        let mut w: ModelWeights<f64> = build_aniso_unet(&spec, 2).unwrap();
        w.get_mut("final.w").unwrap().data_mut().fill(0.0);
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(3);
        let x = Tensor::random([1, 1, 8, 8, 4], &mut rng);
        let y = forward(&w, &spec, &x).unwrap();
        assert!(y.data().iter().all(|v| *v == 0.0));
        assert_eq!(forward(&w, &spec, &x).unwrap(), y);
    }

    #[test]
    fn uncertainty_needs_masksembles() {
        let spec = ModelSpec::toy(2);
        let w: ModelWeights<f32> = build_aniso_unet(&spec, 0).unwrap();
        assert!(matches!(
            predict_with_uncertainty(&w, &spec, &Tensor::zeros([1, 1, 8, 8, 4])),
            Err(IqtError::Capability(_))
        ));
    }

    #[test]
    fn running_stats_follow_momentum() {
        let spec = ModelSpec::toy(2);
        let mut w: ModelWeights<f64> = build_aniso_unet(&spec, 5).unwrap();
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(6);
        let mut g = Graph::new(true);
        let x = g.constant(Tensor::random([2, 1, 8, 8, 4], &mut rng));
        let net = forward_graph(&mut g, &spec, &w, x, None).unwrap();
        let first = net.batchnorms[0];
        let (bm, bv) = g.batch_stats(first.node).unwrap();
        let (bm, bv) = (bm.to_vec(), bv.to_vec());
        update_running_stats(&g, &net, &mut w);
        let rm = w.params()[first.mean].tensor.data();
        let rv = w.params()[first.var].tensor.data();
        for c in 0..bm.len() {
            assert!((rm[c] - 0.01 * bm[c]).abs() < 1e-15);
            assert!((rv[c] - (0.99 + 0.01 * bv[c])).abs() < 1e-15);
        }
    }
}
