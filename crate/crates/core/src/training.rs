//! Glorot initialisation, Adam, and the mini-batch training loop.

use std::collections::BTreeSet;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor};
use crate::error::{IqtError, Result};
use crate::network::{build_aniso_unet, forward, forward_graph, update_running_stats, ModelSpec, ModelWeights};
use crate::patching::PatchSet;
use crate::scalar::Scalar;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPSILON: f64 = 1e-8;

/// `sqrt(2 / (fan_in + fan_out))` for a conv kernel `(out, in, kx, ky, kz)`.
pub fn glorot_std(shape: [usize; 5]) -> f64 {
    let rf = (shape[2] * shape[3] * shape[4]) as f64;
    let fan_in = shape[1] as f64 * rf;
    let fan_out = shape[0] as f64 * rf;
    (2.0 / (fan_in + fan_out)).sqrt()
}

/// Glorot-normal tensor, deterministic per seed.
pub fn glorot_init<T: Scalar>(shape: [usize; 5], seed: u64) -> Tensor<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, glorot_std(shape)).expect("finite std");
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| T::lit(normal.sample(&mut rng))).collect()).expect("glorot shape")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// Per-step learning-rate decay: `lr_t = lr / (1 + decay * t)`.
    pub decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Fraction of subjects held out for validation.
    pub val_fraction: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            decay: 1e-6,
            batch_size: 32,
            epochs: 100,
            val_fraction: 0.2,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, spec: &ModelSpec) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) || !(self.decay >= 0.0) {
            return Err(IqtError::arg("learning rate and decay must be non-negative"));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(IqtError::arg(format!(
                "validation fraction must lie in (0, 1), got {}",
                self.val_fraction
            )));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(IqtError::arg("batch size and epochs must be >= 1"));
        }
        if let Some(m) = spec.masksembles {
            if self.batch_size % m.m != 0 {
                return Err(IqtError::arg(format!(
                    "batch size {} must be divisible by the {} masks",
                    self.batch_size, m.m
                )));
            }
        }
        Ok(())
    }

    /// Learning rate after `t` completed steps.
    pub fn lr_at(&self, t: u64) -> f64 {
        self.learning_rate / (1.0 + self.decay * t as f64)
    }
}

/// First and second moment estimates per trainable parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
    /// Completed steps.
    pub step: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(weights: &ModelWeights<T>) -> Self {
        let sizes: Vec<usize> = weights
            .trainable_indices()
            .iter()
            .map(|&i| weights.params()[i].tensor.len())
            .collect();
        AdamState {
            m: sizes.iter().map(|&n| vec![T::zero(); n]).collect(),
            v: sizes.iter().map(|&n| vec![T::zero(); n]).collect(),
            step: 0,
        }
    }
}

/// One Adam update with bias correction. `grads` follows
/// [`ModelWeights::trainable_indices`]; `None` means a zero gradient.
pub fn adam_step<T: Scalar>(
    weights: &mut ModelWeights<T>,
    grads: &[Option<Vec<T>>],
    state: &mut AdamState<T>,
    config: &TrainConfig,
) -> Result<()> {
    let idx = weights.trainable_indices();
    if grads.len() != idx.len() {
        return Err(IqtError::arg(format!("expected {} gradients, got {}", idx.len(), grads.len())));
    }
    for (o, g) in grads.iter().enumerate() {
        if let Some(g) = g {
            if g.iter().any(|v| !v.is_finite()) {
                return Err(IqtError::NonFiniteGradient {
                    param: weights.params()[idx[o]].name.clone(),
                    step: state.step,
                });
            }
        }
    }
    let lr = config.lr_at(state.step);
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - ADAM_BETA1.powi(t);
    let c2 = 1.0 - ADAM_BETA2.powi(t);
    let (b1, b2) = (T::lit(ADAM_BETA1), T::lit(ADAM_BETA2));
    let one = T::one();
    for (o, &i) in idx.iter().enumerate() {
        let w = weights.params_mut()[i].tensor.data_mut();
        let (m, v) = (&mut state.m[o], &mut state.v[o]);
        for j in 0..w.len() {
            let g = grads[o].as_ref().map_or(T::zero(), |g| g[j]);
            m[j] = b1 * m[j] + (one - b1) * g;
            v[j] = b2 * v[j] + (one - b2) * g * g;
            let mhat = m[j].as_f64() / c1;
            let vhat = v[j].as_f64() / c2;
            w[j] -= T::lit(lr * mhat / (vhat.sqrt() + ADAM_EPSILON));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_mse: f64,
    pub val_mse: f64,
    pub lr: f64,
}

pub fn write_history_csv(history: &[EpochRecord], path: impl AsRef<Path>) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "epoch,train_mse,val_mse,lr")?;
    for h in history {
        writeln!(f, "{},{:e},{:e},{:e}", h.epoch, h.train_mse, h.val_mse, h.lr)?;
    }
    f.flush()?;
    Ok(())
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    /// Weights at the epoch with the lowest validation MSE.
    pub weights: ModelWeights<T>,
    pub history: Vec<EpochRecord>,
    /// 1-based epoch of the returned weights.
    pub best_epoch: usize,
    pub train_subjects: Vec<usize>,
    pub val_subjects: Vec<usize>,
    /// Subjects of every patch that contributed to a gradient step.
    pub stepped_subjects: BTreeSet<usize>,
}

/// Split subject ids into (train, validation) with a seeded shuffle.
pub fn split_subjects(subjects: &[usize], val_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    let mut s: Vec<usize> = subjects.to_vec();
    s.sort_unstable();
    s.dedup();
    if s.len() < 2 {
        return Err(IqtError::arg(format!(
            "a subject-level split needs at least 2 subjects, got {}",
            s.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    s.shuffle(&mut rng);
    let n_val = ((s.len() as f64 * val_fraction).round() as usize).clamp(1, s.len() - 1);
    let val = s[..n_val].to_vec();
    let mut train = s[n_val..].to_vec();
    train.sort_unstable();
    let mut val_sorted = val;
    val_sorted.sort_unstable();
    Ok((train, val_sorted))
}

fn batch_tensors<T: Scalar>(set: &PatchSet<T>, idx: &[usize]) -> Result<(Tensor<T>, Tensor<T>)> {
    let lf: Vec<&[T]> = idx.iter().map(|&i| set.pairs[i].lf.as_slice()).collect();
    let hf: Vec<&[T]> = idx.iter().map(|&i| set.pairs[i].hf.as_slice()).collect();
    let l = set.lf_patch;
    let h = set.hf_patch;
    Ok((Tensor::stack(&lf, [1, l[0], l[1], l[2]])?, Tensor::stack(&hf, [1, h[0], h[1], h[2]])?))
}

/// Inference-mode MSE over the given patches, averaged over all voxels.
pub fn evaluate_mse<T: Scalar>(
    weights: &ModelWeights<T>,
    spec: &ModelSpec,
    set: &PatchSet<T>,
    idx: &[usize],
    batch: usize,
) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    let step = match spec.masksembles {
        Some(m) => (batch / m.m).max(1) * m.m,
        None => batch.max(1),
    };
    for chunk in idx.chunks(step) {
        let (x, y) = batch_tensors(set, chunk)?;
        let (x, y, n) = pad_batch(spec, x, y)?;
        let out = forward(weights, spec, &x)?;
        let len = n * out.len() / out.batch();
        for (a, b) in out.data()[..len].iter().zip(&y.data()[..len]) {
            let d = a.as_f64() - b.as_f64();
            total += d * d;
        }
        count += len;
    }
    Ok(total / count as f64)
}

/// Repeat the last item until the batch divides into the mask groups.
fn pad_batch<T: Scalar>(spec: &ModelSpec, x: Tensor<T>, y: Tensor<T>) -> Result<(Tensor<T>, Tensor<T>, usize)> {
    let n = x.batch();
    let m = spec.masksembles.map_or(1, |m| m.m);
    if n % m == 0 {
        return Ok((x, y, n));
    }
    let target = n.div_ceil(m) * m;
    let grow = |t: Tensor<T>| -> Result<Tensor<T>> {
        let s = t.shape();
        let last = t.item(n - 1).to_vec();
        let mut d = t.into_data();
        for _ in n..target {
            d.extend_from_slice(&last);
        }
        Tensor::new([target, s[1], s[2], s[3], s[4]], d)
    };
    Ok((grow(x)?, grow(y)?, n))
}

/// Minimise the mean squared patch error with Adam.
pub fn train<T: Scalar>(spec: &ModelSpec, set: &PatchSet<T>, config: &TrainConfig) -> Result<TrainOutcome<T>> {
    train_with_observer(spec, set, config, |_| {})
}

pub fn train_with_observer<T: Scalar>(
    spec: &ModelSpec,
    set: &PatchSet<T>,
    config: &TrainConfig,
    mut observer: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome<T>> {
    config.validate(spec)?;
    if set.r != spec.r {
        return Err(IqtError::arg(format!("patch set r = {} but model r = {}", set.r, spec.r)));
    }
    let out = spec.output_dims(set.lf_patch)?;
    if out != set.hf_patch {
        return Err(IqtError::shape("train (patch sizes)", &out, &set.hf_patch));
    }
    let (train_subjects, val_subjects) = split_subjects(&set.subjects(), config.val_fraction, config.seed)?;
    let train_idx: Vec<usize> = (0..set.len())
        .filter(|&i| train_subjects.binary_search(&set.pairs[i].subject).is_ok())
        .collect();
    let val_idx: Vec<usize> = (0..set.len())
        .filter(|&i| val_subjects.binary_search(&set.pairs[i].subject).is_ok())
        .collect();
    if train_idx.is_empty() || val_idx.is_empty() {
        return Err(IqtError::arg("subject split left the training or validation set empty"));
    }
    let m = spec.masksembles.map_or(1, |m| m.m);

    let mut weights: ModelWeights<T> = build_aniso_unet(spec, config.seed)?;
    let mut state = AdamState::new(&weights);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(1);
    let mut order = train_idx.clone();
    let mut history = Vec::with_capacity(config.epochs);
    let mut best = (f64::INFINITY, 0usize, weights.clone());
    let mut stepped = BTreeSet::new();
    let trainable = weights.trainable_indices();

    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let lr_epoch = config.lr_at(state.step);
        let mut sum = 0.0;
        let mut seen = 0usize;
        for chunk in order.chunks(config.batch_size) {
            let usable = chunk.len() / m * m;
            if usable == 0 {
                continue;
            }
            let chunk = &chunk[..usable];
            let (x, y) = batch_tensors(set, chunk)?;
            let mut g = Graph::new(true);
            let xv = g.constant(x);
            let yv = g.constant(y);
            let net = forward_graph(&mut g, spec, &weights, xv, None)?;
            let loss = g.mse(net.output, yv)?;
            let lv = g.value(loss).data()[0].as_f64();
            if !lv.is_finite() {
                return Err(IqtError::NonFiniteGradient {
                    param: "loss".into(),
                    step: state.step,
                });
            }
            sum += lv * chunk.len() as f64;
            seen += chunk.len();
            if config.lr_at(state.step) == 0.0 {
                continue;
            }
            g.backward(loss)?;
            let grads: Vec<Option<Vec<T>>> = trainable
                .iter()
                .map(|&i| net.param_vars[i].and_then(|v| g.grad(v)).map(|t| t.into_data()))
                .collect();
            adam_step(&mut weights, &grads, &mut state, config)?;
            update_running_stats(&g, &net, &mut weights);
            stepped.extend(chunk.iter().map(|&i| set.pairs[i].subject));
        }
        let val = evaluate_mse(&weights, spec, set, &val_idx, config.batch_size)?;
        let rec = EpochRecord {
            epoch,
            train_mse: if seen > 0 { sum / seen as f64 } else { f64::NAN },
            val_mse: val,
            lr: lr_epoch,
        };
        observer(&rec);
        history.push(rec);
        if val < best.0 {
            best = (val, epoch, weights.clone());
        }
    }
    let (_, best_epoch, best_weights) = best;
    Ok(TrainOutcome {
        weights: if best_epoch == 0 { weights } else { best_weights },
        history,
        best_epoch: best_epoch.max(1),
        train_subjects,
        val_subjects,
        stepped_subjects: stepped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn glorot_formula_and_determinism() {
        let shape = [8, 4, 3, 3, 3];
        assert!((glorot_std(shape) - (2.0f64 / 324.0).sqrt()).abs() < 1e-15);
        let a: Tensor<f64> = glorot_init(shape, 5);
        assert_eq!(a, glorot_init(shape, 5));
        assert_ne!(a, glorot_init(shape, 6));
    }

    #[test]
    fn glorot_sample_std() {
        let shape = [100, 1000, 1, 1, 1];
        let t: Tensor<f64> = glorot_init(shape, 1);
        let n = t.len() as f64;
        let mean = t.data().iter().sum::<f64>() / n;
        let sd = (t.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        assert!((sd / glorot_std(shape) - 1.0).abs() < 0.03);
    }

    fn scalar_weights(w: f64) -> ModelWeights<f64> {
        let mut m = ModelWeights::new();
        m.push("w", crate::network::ParamKind::Trainable, Tensor::scalar(w)).unwrap();
        m
    }

    #[test]
    fn adam_zero_gradient_is_fixed_point() {
        let mut w = scalar_weights(0.3);
        let mut s = AdamState::new(&w);
        adam_step(&mut w, &[Some(vec![0.0])], &mut s, &TrainConfig::default()).unwrap();
        assert_eq!(w.get("w").unwrap().data()[0], 0.3);
    }

    #[test]
    fn adam_first_step_is_learning_rate() {
        let mut w = scalar_weights(1.0);
        let mut s = AdamState::new(&w);
        let cfg = TrainConfig::default();
        adam_step(&mut w, &[Some(vec![1.0])], &mut s, &cfg).unwrap();
        let step = 1.0 - w.get("w").unwrap().data()[0];
        assert!((step - cfg.learning_rate).abs() < 1e-10);
    }

    #[test]
    fn adam_descends_quadratic() {
        let mut w = scalar_weights(1.0);
        let mut s = AdamState::new(&w);
        let cfg = TrainConfig {
            learning_rate: 0.02,
            ..Default::default()
        };
        let mut seq = Vec::new();
        for _ in 0..100 {
            let x = w.get("w").unwrap().data()[0];
            adam_step(&mut w, &[Some(vec![2.0 * x])], &mut s, &cfg).unwrap();
            seq.push(w.get("w").unwrap().data()[0]);
        }
        let reached = seq.iter().position(|x: &f64| x.abs() < 0.1).expect("reaches 0.1");
        for k in 5..reached {
            assert!(seq[k + 1].abs() < seq[k].abs(), "step {k}");
        }
        assert!(seq[reached..].iter().all(|x| x.abs() < 0.1));
    }

    #[test]
    fn adam_rejects_nan_with_parameter_name() {
        let mut w = scalar_weights(1.0);
        let mut s = AdamState::new(&w);
        match adam_step(&mut w, &[Some(vec![f64::NAN])], &mut s, &TrainConfig::default()) {
            Err(IqtError::NonFiniteGradient { param, step }) => {
                assert_eq!(param, "w");
                assert_eq!(step, 0);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn decay_schedule() {
        let cfg = TrainConfig {
            decay: 0.5,
            ..Default::default()
        };
        assert_eq!(cfg.lr_at(0), 1e-3);
        assert!((cfg.lr_at(2) - 5e-4).abs() < 1e-18);
    }

    #[test]
    fn subject_split() {
        let (t, v) = split_subjects(&[0, 1, 2, 3, 4, 4, 0], 0.2, 1).unwrap();
        assert_eq!(v.len(), 1);
        assert_eq!(t.len(), 4);
        assert!(t.iter().all(|s| !v.contains(s)));
        assert!(split_subjects(&[3, 3], 0.2, 0).is_err());
    }
}
