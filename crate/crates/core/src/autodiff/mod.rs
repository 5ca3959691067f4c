//! Reverse-mode automatic differentiation over 5-D tensors.
//!
//! A [`Graph`] is a define-by-run tape: every op appends a node holding its
//! forward value, and [`Graph::backward`] walks the tape in reverse.

mod check;
mod kernels;
mod tensor;

pub use check::{gradient_check, gradient_check_params, relative_error};
pub use tensor::Tensor;

use kernels::{BnStats, ConvShape, TransposeShape};

use crate::error::{IqtError, Result};
use crate::scalar::Scalar;

pub const BN_EPSILON: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.99;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OpKind {
    Leaf,
    Conv3,
    Conv1,
    ConvTranspose,
    MaxPool,
    Relu,
    BatchNorm,
    ConcatChannels,
    Add,
    Mse,
    MasksembleMask,
}

enum Op<T> {
    Leaf,
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        k: usize,
    },
    ConvTranspose {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: [usize; 3],
    },
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    Relu {
        x: Var,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        batch: Option<BnStats<T>>,
    },
    Concat {
        a: Var,
        b: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mse {
        a: Var,
        b: Var,
    },
    Mask {
        x: Var,
        mask: Vec<T>,
        groups: usize,
    },
}

struct Node<T> {
    value: Tensor<T>,
    grad: Option<Vec<T>>,
    requires_grad: bool,
    op: Op<T>,
}

/// Tape of op nodes in creation (topological) order.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    training: bool,
}

impl<T: Scalar> Graph<T> {
    /// `training` selects batch statistics in batch norm.
    pub fn new(training: bool) -> Self {
        Graph {
            nodes: Vec::new(),
            training,
        }
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Leaf tensor; gradients are accumulated for it when `requires_grad`.
    pub fn leaf(&mut self, t: Tensor<T>, requires_grad: bool) -> Var {
        self.push(t, Op::Leaf, requires_grad)
    }

    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.leaf(t, true)
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.leaf(t, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> [usize; 5] {
        self.nodes[v.0].value.shape()
    }

    pub fn kind(&self, v: Var) -> OpKind {
        match &self.nodes[v.0].op {
            Op::Leaf => OpKind::Leaf,
            Op::Conv { k: 1, .. } => OpKind::Conv1,
            Op::Conv { .. } => OpKind::Conv3,
            Op::ConvTranspose { .. } => OpKind::ConvTranspose,
            Op::MaxPool { .. } => OpKind::MaxPool,
            Op::Relu { .. } => OpKind::Relu,
            Op::BatchNorm { .. } => OpKind::BatchNorm,
            Op::Concat { .. } => OpKind::ConcatChannels,
            Op::Add { .. } => OpKind::Add,
            Op::Mse { .. } => OpKind::Mse,
            Op::Mask { .. } => OpKind::MasksembleMask,
        }
    }

    /// Accumulated gradient after [`Graph::backward`], shaped like the value.
    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        let n = &self.nodes[v.0];
        n.grad.as_ref().map(|g| Tensor::new(n.value.shape(), g.clone()).expect("grad shape"))
    }

    /// Batch mean and biased variance used by a training-mode batch-norm node.
    pub fn batch_stats(&self, v: Var) -> Option<(&[T], &[T])> {
        match &self.nodes[v.0].op {
            Op::BatchNorm { batch: Some(s), .. } => Some((&s.mean, &s.var)),
            _ => None,
        }
    }

    /// Which side of every kink the tape sits on: the sign of each ReLU
    /// input and the winner of each max-pool window.
    pub fn switch_pattern(&self) -> Vec<usize> {
        let mut out = Vec::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu { x } => out.extend(self.nodes[x.0].value.data().iter().map(|&a| usize::from(a > T::zero()))),
                Op::MaxPool { argmax, .. } => out.extend_from_slice(argmax),
                _ => {}
            }
        }
        out
    }

    /// Same-padded stride-1 convolution with a cubic kernel of size 1 or 3.
    /// `w` is `(Cout, Cin, k, k, k)`, `b` is `(1, Cout, 1, 1, 1)`.
    pub fn conv(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x);
        let ws = self.shape(w);
        let k = ws[2];
        if !(k == 1 || k == 3) || ws[3] != k || ws[4] != k {
            return Err(IqtError::shape("conv (kernel must be 1³ or 3³)", &ws, &[ws[0], ws[1], 3, 3, 3]));
        }
        if ws[1] != xs[1] {
            return Err(IqtError::shape("conv (input channels)", &xs, &ws));
        }
        if let Some(b) = b {
            let bs = self.shape(b);
            if bs != [1, ws[0], 1, 1, 1] {
                return Err(IqtError::shape("conv (bias)", &bs, &[1, ws[0], 1, 1, 1]));
            }
        }
        let s = ConvShape {
            n: xs[0],
            cin: xs[1],
            cout: ws[0],
            dims: [xs[2], xs[3], xs[4]],
            k,
        };
        let out = kernels::conv_forward(
            &s,
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
        );
        let t = Tensor::new([xs[0], ws[0], xs[2], xs[3], xs[4]], out)?;
        let rg = self.rg(&[x, w]) || b.is_some_and(|b| self.rg(&[b]));
        Ok(self.push(t, Op::Conv { x, w, b, k }, rg))
    }

    /// Transposed convolution with kernel equal to stride.
    /// `w` is `(Cin, Cout, sx, sy, sz)`, `b` is `(1, Cout, 1, 1, 1)`.
    pub fn conv_transpose(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x);
        let ws = self.shape(w);
        if ws[0] != xs[1] {
            return Err(IqtError::shape("conv_transpose (input channels)", &xs, &ws));
        }
        if let Some(b) = b {
            let bs = self.shape(b);
            if bs != [1, ws[1], 1, 1, 1] {
                return Err(IqtError::shape("conv_transpose (bias)", &bs, &[1, ws[1], 1, 1, 1]));
            }
        }
        let stride = [ws[2], ws[3], ws[4]];
        let s = TransposeShape {
            n: xs[0],
            cin: xs[1],
            cout: ws[1],
            dims: [xs[2], xs[3], xs[4]],
            stride,
        };
        let od = s.out_dims();
        let out = kernels::transpose_forward(
            &s,
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
        );
        let t = Tensor::new([xs[0], ws[1], od[0], od[1], od[2]], out)?;
        let rg = self.rg(&[x, w]) || b.is_some_and(|b| self.rg(&[b]));
        Ok(self.push(t, Op::ConvTranspose { x, w, b, stride }, rg))
    }

    /// Max pooling with window = stride; every pooled axis must divide evenly.
    pub fn maxpool(&mut self, x: Var, window: [usize; 3]) -> Result<Var> {
        let xs = self.shape(x);
        if (0..3).any(|a| window[a] == 0 || xs[a + 2] % window[a] != 0) {
            return Err(IqtError::shape("maxpool", &xs, &window));
        }
        let (out, argmax) = kernels::maxpool_forward(self.value(x).data(), xs[0] * xs[1], [xs[2], xs[3], xs[4]], window);
        let t = Tensor::new(
            [xs[0], xs[1], xs[2] / window[0], xs[3] / window[1], xs[4] / window[2]],
            out,
        )?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::MaxPool { x, argmax }, rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let data = v.data().iter().map(|&a| if a > T::zero() { a } else { T::zero() }).collect();
        let t = Tensor::new(v.shape(), data).expect("relu shape");
        let rg = self.rg(&[x]);
        self.push(t, Op::Relu { x }, rg)
    }

    /// Per-channel batch norm. Training graphs normalise with batch
    /// statistics; inference graphs need `running` = (mean, var).
    pub fn batchnorm(&mut self, x: Var, gamma: Var, beta: Var, running: Option<(&[T], &[T])>) -> Result<Var> {
        let xs = self.shape(x);
        let c = xs[1];
        for v in [gamma, beta] {
            if self.shape(v) != [1, c, 1, 1, 1] {
                return Err(IqtError::shape("batchnorm (scale/shift)", &self.shape(v), &[1, c, 1, 1, 1]));
            }
        }
        let n = xs[0];
        let p = xs[2] * xs[3] * xs[4];
        let (mean, var, batch) = if self.training {
            let s = kernels::channel_stats(self.value(x).data(), n, c, p);
            (s.mean.clone(), s.var.clone(), Some(s))
        } else {
            let (m, v) = running.ok_or_else(|| IqtError::arg("inference batch norm needs running statistics"))?;
            if m.len() != c || v.len() != c {
                return Err(IqtError::shape("batchnorm (running stats)", &[m.len(), v.len()], &[c, c]));
            }
            (m.to_vec(), v.to_vec(), None)
        };
        let eps = T::lit(BN_EPSILON);
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let xv = self.value(x).data();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut xhat = Vec::with_capacity(xv.len());
        let mut out = Vec::with_capacity(xv.len());
        for i in 0..n {
            for ch in 0..c {
                let o = (i * c + ch) * p;
                for &v in &xv[o..o + p] {
                    let h = (v - mean[ch]) * inv_std[ch];
                    xhat.push(h);
                    out.push(g[ch] * h + bt[ch]);
                }
            }
        }
        let t = Tensor::new(xs, out)?;
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(
            t,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch,
            },
            rg,
        ))
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa[0] != sb[0] || sa[2..] != sb[2..] {
            return Err(IqtError::shape("concat_channels", &sa, &sb));
        }
        let (la, lb) = (sa[1] * sa[2] * sa[3] * sa[4], sb[1] * sb[2] * sb[3] * sb[4]);
        let mut out = Vec::with_capacity((la + lb) * sa[0]);
        for i in 0..sa[0] {
            out.extend_from_slice(&self.value(a).data()[i * la..(i + 1) * la]);
            out.extend_from_slice(&self.value(b).data()[i * lb..(i + 1) * lb]);
        }
        let t = Tensor::new([sa[0], sa[1] + sb[1], sa[2], sa[3], sa[4]], out)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Concat { a, b }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(IqtError::shape("add", &sa, &sb));
        }
        let out = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| *x + *y).collect();
        let t = Tensor::new(sa, out)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Add { a, b }, rg))
    }

    /// Mean squared difference over all elements; a scalar node.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(IqtError::shape("mse", &sa, &sb));
        }
        let n = self.value(a).len();
        let s: f64 = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| {
                let d = x.as_f64() - y.as_f64();
                d * d
            })
            .sum();
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::scalar(T::lit(s / n as f64)), Op::Mse { a, b }, rg))
    }

    /// Multiply channels by fixed binary masks; `mask` is `(m, C, 1, 1, 1)`
    /// and batch item `n` uses mask `n / (N / m)`.
    pub fn masksemble(&mut self, x: Var, mask: &Tensor<T>) -> Result<Var> {
        let xs = self.shape(x);
        let ms = mask.shape();
        if ms[1] != xs[1] || ms[2..] != [1, 1, 1] || ms[0] == 0 || xs[0] % ms[0] != 0 {
            return Err(IqtError::shape("masksemble_mask", &xs, &ms));
        }
        let groups = ms[0];
        let per = xs[0] / groups;
        let p = xs[2] * xs[3] * xs[4];
        let c = xs[1];
        let mut out = self.value(x).data().to_vec();
        for i in 0..xs[0] {
            let g = i / per;
            for ch in 0..c {
                let m = mask.data()[g * c + ch];
                let o = (i * c + ch) * p;
                out[o..o + p].iter_mut().for_each(|v| *v *= m);
            }
        }
        let t = Tensor::new(xs, out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(
            t,
            Op::Mask {
                x,
                mask: mask.data().to_vec(),
                groups,
            },
            rg,
        ))
    }

    fn accumulate(&mut self, v: Var, g: Vec<T>) {
        let node = &mut self.nodes[v.0];
        if !node.requires_grad {
            return;
        }
        match node.grad.as_mut() {
            None => node.grad = Some(g),
            Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += *b),
        }
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Reverse accumulation from a scalar loss. Gradients from earlier
    /// backward calls are cleared first.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(IqtError::Argument(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        for n in &mut self.nodes {
            n.grad = None;
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.nodes[loss.0].grad = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = self.nodes[i].grad.take() else {
                continue;
            };
            let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
            self.backward_node(&op, &g);
            self.nodes[i].op = op;
            self.nodes[i].grad = Some(g);
        }
        Ok(())
    }

    fn backward_node(&mut self, op: &Op<T>, g: &[T]) {
        match op {
            Op::Leaf => {}
            Op::Conv { x, w, b, k } => {
                let xs = self.shape(*x);
                let ws = self.shape(*w);
                let s = ConvShape {
                    n: xs[0],
                    cin: xs[1],
                    cout: ws[0],
                    dims: [xs[2], xs[3], xs[4]],
                    k: *k,
                };
                let (gi, gw, gb) = kernels::conv_backward(
                    &s,
                    self.value(*x).data(),
                    self.value(*w).data(),
                    g,
                    self.needs(*x),
                    self.needs(*w),
                );
                if let Some(gi) = gi {
                    self.accumulate(*x, gi);
                }
                if let Some(gw) = gw {
                    self.accumulate(*w, gw);
                }
                if let Some(b) = b {
                    self.accumulate(*b, gb);
                }
            }
            Op::ConvTranspose { x, w, b, stride } => {
                let xs = self.shape(*x);
                let ws = self.shape(*w);
                let s = TransposeShape {
                    n: xs[0],
                    cin: xs[1],
                    cout: ws[1],
                    dims: [xs[2], xs[3], xs[4]],
                    stride: *stride,
                };
                let (gi, gw, gb) = kernels::transpose_backward(
                    &s,
                    self.value(*x).data(),
                    self.value(*w).data(),
                    g,
                    self.needs(*x),
                    self.needs(*w),
                );
                if let Some(gi) = gi {
                    self.accumulate(*x, gi);
                }
                if let Some(gw) = gw {
                    self.accumulate(*w, gw);
                }
                if let Some(b) = b {
                    self.accumulate(*b, gb);
                }
            }
            Op::MaxPool { x, argmax } => {
                if self.needs(*x) {
                    let mut gi = vec![T::zero(); self.value(*x).len()];
                    for (gv, &a) in g.iter().zip(argmax) {
                        gi[a] += *gv;
                    }
                    self.accumulate(*x, gi);
                }
            }
            Op::Relu { x } => {
                if self.needs(*x) {
                    let gi = self
                        .value(*x)
                        .data()
                        .iter()
                        .zip(g)
                        .map(|(v, gv)| if *v > T::zero() { *gv } else { T::zero() })
                        .collect();
                    self.accumulate(*x, gi);
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch,
            } => {
                let xs = self.shape(*x);
                let (n, c, p) = (xs[0], xs[1], xs[2] * xs[3] * xs[4]);
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for i in 0..n {
                    for ch in 0..c {
                        let o = (i * c + ch) * p;
                        for j in o..o + p {
                            dgamma[ch] += g[j] * xhat[j];
                            dbeta[ch] += g[j];
                        }
                    }
                }
                if self.needs(*x) {
                    let gam = self.value(*gamma).data().to_vec();
                    let mut gi = vec![T::zero(); g.len()];
                    if batch.is_some() {
                        let m = T::lit((n * p) as f64);
                        for i in 0..n {
                            for ch in 0..c {
                                let o = (i * c + ch) * p;
                                let k = gam[ch] * inv_std[ch] / m;
                                for j in o..o + p {
                                    gi[j] = k * (m * g[j] - dbeta[ch] - xhat[j] * dgamma[ch]);
                                }
                            }
                        }
                    } else {
                        for i in 0..n {
                            for ch in 0..c {
                                let o = (i * c + ch) * p;
                                let k = gam[ch] * inv_std[ch];
                                for j in o..o + p {
                                    gi[j] = k * g[j];
                                }
                            }
                        }
                    }
                    self.accumulate(*x, gi);
                }
                self.accumulate(*gamma, dgamma);
                self.accumulate(*beta, dbeta);
            }
            Op::Concat { a, b } => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (la, lb) = (sa[1] * sa[2] * sa[3] * sa[4], sb[1] * sb[2] * sb[3] * sb[4]);
                let mut ga = Vec::with_capacity(la * sa[0]);
                let mut gb = Vec::with_capacity(lb * sa[0]);
                for it in 0..sa[0] {
                    let o = it * (la + lb);
                    ga.extend_from_slice(&g[o..o + la]);
                    gb.extend_from_slice(&g[o + la..o + la + lb]);
                }
                self.accumulate(*a, ga);
                self.accumulate(*b, gb);
            }
            Op::Add { a, b } => {
                self.accumulate(*a, g.to_vec());
                self.accumulate(*b, g.to_vec());
            }
            Op::Mse { a, b } => {
                let n = T::lit(self.value(*a).len() as f64);
                let k = T::lit(2.0) * g[0] / n;
                let ga: Vec<T> = self
                    .value(*a)
                    .data()
                    .iter()
                    .zip(self.value(*b).data())
                    .map(|(x, y)| k * (*x - *y))
                    .collect();
                let gb = ga.iter().map(|v| -*v).collect();
                self.accumulate(*a, ga);
                self.accumulate(*b, gb);
            }
            Op::Mask { x, mask, groups } => {
                let xs = self.shape(*x);
                let (c, p) = (xs[1], xs[2] * xs[3] * xs[4]);
                let per = xs[0] / groups;
                let mut gi = g.to_vec();
                for it in 0..xs[0] {
                    for ch in 0..c {
                        let m = mask[(it / per) * c + ch];
                        let o = (it * c + ch) * p;
                        gi[o..o + p].iter_mut().for_each(|v| *v *= m);
                    }
                }
                self.accumulate(*x, gi);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn relu_definition() {
        let mut g = Graph::<f64>::new(true);
        let x = g.leaf(Tensor::new([1, 1, 3, 1, 1], vec![-1.0, 0.0, 2.0]).unwrap(), true);
        let y = g.relu(x);
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn conv3_identity_kernel() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut g = Graph::<f64>::new(true);
        let x = g.constant(Tensor::random([2, 1, 4, 5, 3], &mut rng));
        let mut k = Tensor::zeros([1, 1, 3, 3, 3]);
        k.data_mut()[13] = 1.0;
        let w = g.param(k);
        let y = g.conv(x, w, None).unwrap();
        assert_eq!(g.value(y), g.value(x));
    }

    #[test]
    fn shape_errors_report_both_shapes() {
        let mut g = Graph::<f64>::new(true);
        let a = g.constant(Tensor::zeros([1, 2, 4, 4, 4]));
        let b = g.constant(Tensor::zeros([1, 2, 4, 4, 2]));
        match g.add(a, b) {
            Err(IqtError::Shape { lhs, rhs, .. }) => {
                assert_eq!(lhs, vec![1, 2, 4, 4, 4]);
                assert_eq!(rhs, vec![1, 2, 4, 4, 2]);
            }
            other => panic!("expected shape error, got {:?}", other.map(|v| v.index())),
        }
        assert!(g.maxpool(b, [2, 2, 4]).is_err());
        let w = g.param(Tensor::zeros([1, 3, 3, 3, 3]));
        assert!(g.conv(a, w, None).is_err());
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::<f64>::new(true);
        let a = g.param(Tensor::zeros([1, 1, 2, 1, 1]));
        assert!(matches!(g.backward(a), Err(IqtError::Argument(_))));
    }

    #[test]
    fn mse_of_self_has_zero_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut g = Graph::<f64>::new(true);
        let x = g.param(Tensor::random([1, 1, 3, 3, 3], &mut rng));
        let l = g.mse(x, x).unwrap();
        g.backward(l).unwrap();
        assert!(g.grad(x).unwrap().data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn linear_mse_gradient_closed_form() {
        let xs = [0.5, -1.0, 2.0, 3.0];
        let ys = [1.0, 0.0, -2.0, 5.0];
        let w0 = 0.7;
        let mut g = Graph::<f64>::new(true);
        let x = g.constant(Tensor::new([1, 1, 4, 1, 1], xs.to_vec()).unwrap());
        let y = g.constant(Tensor::new([1, 1, 4, 1, 1], ys.to_vec()).unwrap());
        let w = g.param(Tensor::scalar(w0));
        let wx = g.conv(x, w, None).unwrap();
        let l = g.mse(wx, y).unwrap();
        g.backward(l).unwrap();
        let want: f64 = xs.iter().zip(&ys).map(|(x, y)| 2.0 * x * (w0 * x - y) / 4.0).sum();
        assert!((g.grad(w).unwrap().data()[0] - want).abs() < 1e-14);
    }

    #[test]
    fn transpose_and_pool_shapes() {
        let mut g = Graph::<f32>::new(true);
        let x = g.constant(Tensor::zeros([2, 3, 4, 4, 2]));
        let w = g.param(Tensor::zeros([3, 5, 1, 1, 4]));
        let y = g.conv_transpose(x, w, None).unwrap();
        assert_eq!(g.shape(y), [2, 5, 4, 4, 8]);
        let p = g.maxpool(y, [2, 2, 1]).unwrap();
        assert_eq!(g.shape(p), [2, 5, 2, 2, 8]);
    }

    #[test]
    fn batchnorm_normalises_per_channel() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut g = Graph::<f64>::new(true);
        let mut t = Tensor::random([3, 2, 4, 4, 4], &mut rng);
        t.data_mut().iter_mut().for_each(|v| *v = 5.0 + 3.0 * *v);
        let x = g.constant(t);
        let gm = g.param(Tensor::filled([1, 2, 1, 1, 1], 1.0));
        let bt = g.param(Tensor::zeros([1, 2, 1, 1, 1]));
        let y = g.batchnorm(x, gm, bt, None).unwrap();
        let s = kernels::channel_stats(g.value(y).data(), 3, 2, 64);
        for c in 0..2 {
            assert!(s.mean[c].abs() < 1e-4);
            assert!((s.var[c] - 1.0).abs() < 1e-3);
        }
        assert!(g.batch_stats(y).is_some());
        let mut inf = Graph::<f64>::new(false);
        let x2 = inf.constant(Tensor::zeros([1, 2, 1, 1, 1]));
        let (a, b) = (inf.param(Tensor::filled([1, 2, 1, 1, 1], 1.0)), inf.param(Tensor::zeros([1, 2, 1, 1, 1])));
        assert!(inf.batchnorm(x2, a, b, None).is_err());
    }
}
