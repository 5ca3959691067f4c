//! Raw forward/backward kernels on flat buffers.
//!
//! 1×1×1 convolutions are a GEMM; larger kernels run as direct convolution
//! over a zero-haloed copy of the input. Work is split per
//! batch item and partial weight gradients are summed in item order, so
//! results do not depend on the thread count.

use rayon::prelude::*;

use crate::scalar::Scalar;

/// Zero-halo layout for direct convolution with an odd cubic kernel.
///
/// In the padded volume a kernel tap is a constant flat offset, so each
/// (output channel, input channel, tap) term is one contiguous axpy over
/// the span `[start, start + len)` that covers every interior voxel.
struct Halo {
    dims: [usize; 3],
    padded: [usize; 3],
    h: usize,
    start: usize,
    len: usize,
    offsets: Vec<isize>,
}

impl Halo {
    fn new(dims: [usize; 3], k: usize) -> Self {
        let h = k / 2;
        let padded = [dims[0] + 2 * h, dims[1] + 2 * h, dims[2] + 2 * h];
        let flat = |x: usize, y: usize, z: usize| (x * padded[1] + y) * padded[2] + z;
        let start = flat(h, h, h);
        let end = flat(h + dims[0] - 1, h + dims[1] - 1, h + dims[2] - 1) + 1;
        let hi = h as isize;
        let mut offsets = Vec::with_capacity(k * k * k);
        for dx in -hi..=hi {
            for dy in -hi..=hi {
                for dz in -hi..=hi {
                    offsets.push((dx * padded[1] as isize + dy) * padded[2] as isize + dz);
                }
            }
        }
        Halo {
            dims,
            padded,
            h,
            start,
            len: end - start,
            offsets,
        }
    }

    fn padded_len(&self) -> usize {
        self.padded.iter().product()
    }

    /// Copy `channels` unpadded volumes into zero-haloed ones.
    fn pad<T: Scalar>(&self, src: &[T], channels: usize) -> Vec<T> {
        let [nx, ny, nz] = self.dims;
        let pl = self.padded_len();
        let mut out = vec![T::zero(); channels * pl];
        for c in 0..channels {
            for x in 0..nx {
                for y in 0..ny {
                    let s = ((c * nx + x) * ny + y) * nz;
                    let d = c * pl + ((x + self.h) * self.padded[1] + y + self.h) * self.padded[2] + self.h;
                    out[d..d + nz].copy_from_slice(&src[s..s + nz]);
                }
            }
        }
        out
    }

    /// Interior of one span-relative buffer, added to `dst`.
    fn add_interior<T: Scalar>(&self, span: &[T], dst: &mut [T]) {
        let [nx, ny, nz] = self.dims;
        for x in 0..nx {
            for y in 0..ny {
                let q = ((x + self.h) * self.padded[1] + y + self.h) * self.padded[2] + self.h - self.start;
                let d = (x * ny + y) * nz;
                for (o, v) in dst[d..d + nz].iter_mut().zip(&span[q..q + nz]) {
                    *o += *v;
                }
            }
        }
    }

    /// `acc[i] += Σ_c Σ_t w(c, t) · src_c[start + sign·offset_t + i]`.
    fn accumulate<T: Scalar>(&self, acc: &mut [T], src: &[T], channels: usize, sign: isize, w: impl Fn(usize, usize) -> T) {
        let pl = self.padded_len();
        let mut terms = Vec::with_capacity(channels * self.offsets.len());
        for c in 0..channels {
            for (t, &off) in self.offsets.iter().enumerate() {
                let wt = w(c, t);
                if wt != T::zero() {
                    terms.push((((c * pl) as isize + self.start as isize + sign * off) as usize, wt));
                }
            }
        }
        axpy_terms(acc, src, &terms);
    }
}

const BLOCK: usize = 32;

#[inline(always)]
fn axpy_terms_inline<T: Scalar>(acc: &mut [T], src: &[T], terms: &[(usize, T)]) {
    let len = acc.len();
    let mut b = 0;
    while b + BLOCK <= len {
        let mut r = [T::zero(); BLOCK];
        r.copy_from_slice(&acc[b..b + BLOCK]);
        for &(s0, wt) in terms {
            let v: &[T; BLOCK] = src[s0 + b..s0 + b + BLOCK].try_into().unwrap();
            for l in 0..BLOCK {
                r[l] += wt * v[l];
            }
        }
        acc[b..b + BLOCK].copy_from_slice(&r);
        b += BLOCK;
    }
    for &(s0, wt) in terms {
        for (a, v) in acc[b..].iter_mut().zip(&src[s0 + b..s0 + len]) {
            *a += wt * *v;
        }
    }
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn axpy_terms_avx2<T: Scalar>(acc: &mut [T], src: &[T], terms: &[(usize, T)]) {
    axpy_terms_inline(acc, src, terms)
}

/// `acc[i] += Σ w · src[s0 + i]` over `terms = [(s0, w)]`, in term order.
fn axpy_terms<T: Scalar>(acc: &mut [T], src: &[T], terms: &[(usize, T)]) {
    #[cfg(target_arch = "x86_64")]
    if std::is_x86_feature_detected!("avx2") {
        // SAFETY: the CPU supports AVX2.
        return unsafe { axpy_terms_avx2(acc, src, terms) };
    }
    axpy_terms_inline(acc, src, terms)
}

#[inline(always)]
fn dot_inline<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut lanes = [T::zero(); 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        let x: &[T; 8] = x.try_into().unwrap();
        let y: &[T; 8] = y.try_into().unwrap();
        for l in 0..8 {
            lanes[l] += x[l] * y[l];
        }
    }
    let mut total = T::zero();
    for v in lanes {
        total += v;
    }
    for (x, y) in ra.iter().zip(rb) {
        total += *x * *y;
    }
    total
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn dot_avx2<T: Scalar>(a: &[T], b: &[T]) -> T {
    dot_inline(a, b)
}

/// Dot product with eight partial sums (fixed order).
fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    #[cfg(target_arch = "x86_64")]
    if std::is_x86_feature_detected!("avx2") {
        // SAFETY: the CPU supports AVX2.
        return unsafe { dot_avx2(a, b) };
    }
    dot_inline(a, b)
}

pub(crate) struct ConvShape {
    pub n: usize,
    pub cin: usize,
    pub cout: usize,
    pub dims: [usize; 3],
    pub k: usize,
}

impl ConvShape {
    fn p(&self) -> usize {
        self.dims.iter().product()
    }
    fn kk(&self) -> usize {
        self.cin * self.k * self.k * self.k
    }
}

pub(crate) fn conv_forward<T: Scalar>(s: &ConvShape, input: &[T], weight: &[T], bias: Option<&[T]>) -> Vec<T> {
    let (p, kk) = (s.p(), s.kk());
    let in_len = s.cin * p;
    let out_len = s.cout * p;
    let items: Vec<Vec<T>> = (0..s.n)
        .into_par_iter()
        .map(|i| {
            let x = &input[i * in_len..(i + 1) * in_len];
            let mut out = vec![T::zero(); out_len];
            if let Some(b) = bias {
                for (c, chunk) in out.chunks_exact_mut(p).enumerate() {
                    chunk.fill(b[c]);
                }
            }
            let beta = if bias.is_some() { T::one() } else { T::zero() };
            if s.k == 1 {
                T::gemm(s.cout, kk, p, T::one(), weight, (kk as isize, 1), x, (p as isize, 1), beta, &mut out, (p as isize, 1));
            } else {
                let halo = Halo::new(s.dims, s.k);
                let xp = halo.pad(x, s.cin);
                let k3 = s.k * s.k * s.k;
                let mut acc = vec![T::zero(); halo.len];
                for co in 0..s.cout {
                    acc.fill(T::zero());
                    halo.accumulate(&mut acc, &xp, s.cin, 1, |ci, t| weight[(co * s.cin + ci) * k3 + t]);
                    halo.add_interior(&acc, &mut out[co * p..(co + 1) * p]);
                }
            }
            out
        })
        .collect();
    items.concat()
}

/// Returns (grad_input, grad_weight, grad_bias) for the requested parts.
pub(crate) fn conv_backward<T: Scalar>(
    s: &ConvShape,
    input: &[T],
    weight: &[T],
    grad_out: &[T],
    need_input: bool,
    need_weight: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>, Vec<T>) {
    let (p, kk) = (s.p(), s.kk());
    let in_len = s.cin * p;
    let out_len = s.cout * p;
    let k3 = s.k * s.k * s.k;
    let halo = (s.k > 1).then(|| Halo::new(s.dims, s.k));
    let parts: Vec<(Option<Vec<T>>, Option<Vec<T>>)> = (0..s.n)
        .into_par_iter()
        .map(|i| {
            let x = &input[i * in_len..(i + 1) * in_len];
            let g = &grad_out[i * out_len..(i + 1) * out_len];
            let Some(halo) = &halo else {
                let gw = need_weight.then(|| {
                    let mut gw = vec![T::zero(); s.cout * kk];
                    T::gemm(s.cout, p, kk, T::one(), g, (p as isize, 1), x, (1, p as isize), T::zero(), &mut gw, (kk as isize, 1));
                    gw
                });
                let gi = need_input.then(|| {
                    let mut gi = vec![T::zero(); in_len];
                    T::gemm(s.cin, s.cout, p, T::one(), weight, (1, s.cin as isize), g, (p as isize, 1), T::zero(), &mut gi, (p as isize, 1));
                    gi
                });
                return (gi, gw);
            };
            let gp = halo.pad(g, s.cout);
            let pl = halo.padded_len();
            let gw = need_weight.then(|| {
                let xp = halo.pad(x, s.cin);
                let mut gw = vec![T::zero(); s.cout * kk];
                for co in 0..s.cout {
                    let gs = &gp[co * pl + halo.start..co * pl + halo.start + halo.len];
                    for ci in 0..s.cin {
                        for (t, &off) in halo.offsets.iter().enumerate() {
                            let s0 = (ci * pl) as isize + halo.start as isize + off;
                            let xs = &xp[s0 as usize..s0 as usize + halo.len];
                            gw[(co * s.cin + ci) * k3 + t] = dot(gs, xs);
                        }
                    }
                }
                gw
            });
            let gi = need_input.then(|| {
                let mut gi = vec![T::zero(); in_len];
                let mut acc = vec![T::zero(); halo.len];
                for ci in 0..s.cin {
                    acc.fill(T::zero());
                    halo.accumulate(&mut acc, &gp, s.cout, -1, |co, t| weight[(co * s.cin + ci) * k3 + t]);
                    halo.add_interior(&acc, &mut gi[ci * p..(ci + 1) * p]);
                }
                gi
            });
            (gi, gw)
        })
        .collect();
    let mut grad_bias = vec![T::zero(); s.cout];
    for i in 0..s.n {
        for (c, gb) in grad_bias.iter_mut().enumerate() {
            let o = i * out_len + c * p;
            *gb += grad_out[o..o + p].iter().copied().sum::<T>();
        }
    }
    let mut gi_all = need_input.then(|| Vec::with_capacity(s.n * in_len));
    let mut gw_all: Option<Vec<T>> = None;
    for (gi, gw) in parts {
        if let (Some(all), Some(gi)) = (gi_all.as_mut(), gi) {
            all.extend_from_slice(&gi);
        }
        if let Some(gw) = gw {
            match gw_all.as_mut() {
                None => gw_all = Some(gw),
                Some(acc) => acc.iter_mut().zip(&gw).for_each(|(a, b)| *a += *b),
            }
        }
    }
    (gi_all, gw_all, grad_bias)
}

pub(crate) struct TransposeShape {
    pub n: usize,
    pub cin: usize,
    pub cout: usize,
    pub dims: [usize; 3],
    pub stride: [usize; 3],
}

impl TransposeShape {
    pub fn out_dims(&self) -> [usize; 3] {
        [self.dims[0] * self.stride[0], self.dims[1] * self.stride[1], self.dims[2] * self.stride[2]]
    }
    fn taps(&self) -> usize {
        self.stride.iter().product()
    }
}

/// Map (co, tap, p_in) of the GEMM product to the flat output offset within one item.
fn scatter_index(s: &TransposeShape, co: usize, tap: usize, x: usize, y: usize, z: usize) -> usize {
    let [sx, sy, sz] = s.stride;
    let [ox, oy, oz] = s.out_dims();
    let (a, b, c) = (tap / (sy * sz), (tap / sz) % sy, tap % sz);
    ((co * ox + x * sx + a) * oy + y * sy + b) * oz + z * sz + c
}

/// Transposed convolution with kernel equal to stride; weight is `(Cin, Cout, sx, sy, sz)`.
pub(crate) fn transpose_forward<T: Scalar>(s: &TransposeShape, input: &[T], weight: &[T], bias: Option<&[T]>) -> Vec<T> {
    let p: usize = s.dims.iter().product();
    let cs = s.cout * s.taps();
    let in_len = s.cin * p;
    let out_len = cs * p;
    let [nx, ny, nz] = s.dims;
    let items: Vec<Vec<T>> = (0..s.n)
        .into_par_iter()
        .map(|i| {
            let x = &input[i * in_len..(i + 1) * in_len];
            let mut tmp = vec![T::zero(); cs * p];
            T::gemm(cs, s.cin, p, T::one(), weight, (1, cs as isize), x, (p as isize, 1), T::zero(), &mut tmp, (p as isize, 1));
            let mut out = vec![T::zero(); out_len];
            for co in 0..s.cout {
                let b = bias.map_or(T::zero(), |b| b[co]);
                for tap in 0..s.taps() {
                    let row = &tmp[(co * s.taps() + tap) * p..(co * s.taps() + tap + 1) * p];
                    let mut q = 0;
                    for xx in 0..nx {
                        for yy in 0..ny {
                            for zz in 0..nz {
                                out[scatter_index(s, co, tap, xx, yy, zz)] = row[q] + b;
                                q += 1;
                            }
                        }
                    }
                }
            }
            out
        })
        .collect();
    items.concat()
}

pub(crate) fn transpose_backward<T: Scalar>(
    s: &TransposeShape,
    input: &[T],
    weight: &[T],
    grad_out: &[T],
    need_input: bool,
    need_weight: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>, Vec<T>) {
    let p: usize = s.dims.iter().product();
    let taps = s.taps();
    let cs = s.cout * taps;
    let in_len = s.cin * p;
    let out_len = cs * p;
    let [nx, ny, nz] = s.dims;
    let parts: Vec<(Option<Vec<T>>, Option<Vec<T>>, Vec<T>)> = (0..s.n)
        .into_par_iter()
        .map(|i| {
            let x = &input[i * in_len..(i + 1) * in_len];
            let g = &grad_out[i * out_len..(i + 1) * out_len];
            let mut gtmp = vec![T::zero(); cs * p];
            for co in 0..s.cout {
                for tap in 0..taps {
                    let row = &mut gtmp[(co * taps + tap) * p..(co * taps + tap + 1) * p];
                    let mut q = 0;
                    for xx in 0..nx {
                        for yy in 0..ny {
                            for zz in 0..nz {
                                row[q] = g[scatter_index(s, co, tap, xx, yy, zz)];
                                q += 1;
                            }
                        }
                    }
                }
            }
            let gb: Vec<T> = (0..s.cout)
                .map(|co| gtmp[co * taps * p..(co + 1) * taps * p].iter().copied().sum())
                .collect();
            let gw = need_weight.then(|| {
                let mut gw = vec![T::zero(); s.cin * cs];
                T::gemm(s.cin, p, cs, T::one(), x, (p as isize, 1), &gtmp, (1, p as isize), T::zero(), &mut gw, (cs as isize, 1));
                gw
            });
            let gi = need_input.then(|| {
                let mut gi = vec![T::zero(); in_len];
                T::gemm(s.cin, cs, p, T::one(), weight, (cs as isize, 1), &gtmp, (p as isize, 1), T::zero(), &mut gi, (p as isize, 1));
                gi
            });
            (gi, gw, gb)
        })
        .collect();
    let mut gi_all = need_input.then(|| Vec::with_capacity(s.n * in_len));
    let mut gw_all: Option<Vec<T>> = None;
    let mut gb_all = vec![T::zero(); s.cout];
    for (gi, gw, gb) in parts {
        if let (Some(all), Some(gi)) = (gi_all.as_mut(), gi) {
            all.extend_from_slice(&gi);
        }
        if let Some(gw) = gw {
            match gw_all.as_mut() {
                None => gw_all = Some(gw),
                Some(acc) => acc.iter_mut().zip(&gw).for_each(|(a, b)| *a += *b),
            }
        }
        gb_all.iter_mut().zip(&gb).for_each(|(a, b)| *a += *b);
    }
    (gi_all, gw_all, gb_all)
}

/// Non-overlapping max pooling; returns values and argmax offsets into `input`.
pub(crate) fn maxpool_forward<T: Scalar>(input: &[T], nc: usize, dims: [usize; 3], w: [usize; 3]) -> (Vec<T>, Vec<usize>) {
    let [nx, ny, nz] = dims;
    let od = [nx / w[0], ny / w[1], nz / w[2]];
    let p = nx * ny * nz;
    let op: usize = od.iter().product();
    let mut out = Vec::with_capacity(nc * op);
    let mut arg = Vec::with_capacity(nc * op);
    for c in 0..nc {
        let base = c * p;
        for x in 0..od[0] {
            for y in 0..od[1] {
                for z in 0..od[2] {
                    let mut best = T::neg_infinity();
                    let mut bi = 0;
                    for a in 0..w[0] {
                        for b in 0..w[1] {
                            for cc in 0..w[2] {
                                let i = base + ((x * w[0] + a) * ny + y * w[1] + b) * nz + z * w[2] + cc;
                                if input[i] > best {
                                    best = input[i];
                                    bi = i;
                                }
                            }
                        }
                    }
                    out.push(best);
                    arg.push(bi);
                }
            }
        }
    }
    (out, arg)
}

pub(crate) struct BnStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

/// Per-channel mean and biased variance over (N, X, Y, Z), accumulated in f64.
pub(crate) fn channel_stats<T: Scalar>(x: &[T], n: usize, c: usize, p: usize) -> BnStats<T> {
    let m = (n * p) as f64;
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    for ch in 0..c {
        let mut s = 0.0;
        for i in 0..n {
            let o = (i * c + ch) * p;
            s += x[o..o + p].iter().map(|v| v.as_f64()).sum::<f64>();
        }
        let mu = s / m;
        let mut v = 0.0;
        for i in 0..n {
            let o = (i * c + ch) * p;
            v += x[o..o + p].iter().map(|q| (q.as_f64() - mu).powi(2)).sum::<f64>();
        }
        mean[ch] = T::lit(mu);
        var[ch] = T::lit(v / m);
    }
    BnStats { mean, var }
}
