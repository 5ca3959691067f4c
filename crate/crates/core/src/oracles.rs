//! Slow direct reference implementations used to cross-check the fast paths.

use crate::autodiff::Tensor;
use crate::error::Result;
use crate::metrics::{gaussian_taps, SSIM_K1, SSIM_K2, SSIM_SIGMA, SSIM_WINDOW};
use crate::volume::Volume3D;

/// Seven nested loops; zero padding, odd cubic kernel `(Cout, Cin, k, k, k)`.
pub fn conv3d_direct(input: &Tensor<f64>, weight: &Tensor<f64>, bias: Option<&[f64]>) -> Tensor<f64> {
    let [n, cin, nx, ny, nz] = input.shape();
    let [cout, _, k, _, _] = weight.shape();
    let h = (k / 2) as isize;
    let at = |b: usize, c: usize, x: isize, y: isize, z: isize| -> f64 {
        if x < 0 || y < 0 || z < 0 || x >= nx as isize || y >= ny as isize || z >= nz as isize {
            0.0
        } else {
            input.data()[(((b * cin + c) * nx + x as usize) * ny + y as usize) * nz + z as usize]
        }
    };
    let mut out = Tensor::zeros([n, cout, nx, ny, nz]);
    for b in 0..n {
        for co in 0..cout {
            for x in 0..nx {
                for y in 0..ny {
                    for z in 0..nz {
                        let mut acc = bias.map_or(0.0, |bb| bb[co]);
                        for ci in 0..cin {
                            for a in 0..k {
                                for bb in 0..k {
                                    for c in 0..k {
                                        let w = weight.data()[(((co * cin + ci) * k + a) * k + bb) * k + c];
                                        acc += w * at(
                                            b,
                                            ci,
                                            x as isize + a as isize - h,
                                            y as isize + bb as isize - h,
                                            z as isize + c as isize - h,
                                        );
                                    }
                                }
                            }
                        }
                        out.data_mut()[(((b * cout + co) * nx + x) * ny + y) * nz + z] = acc;
                    }
                }
            }
        }
    }
    out
}

/// Direct transposed convolution with kernel = stride, weight `(Cin, Cout, sx, sy, sz)`.
pub fn conv_transpose_direct(input: &Tensor<f64>, weight: &Tensor<f64>, bias: Option<&[f64]>) -> Tensor<f64> {
    let [n, cin, nx, ny, nz] = input.shape();
    let [_, cout, sx, sy, sz] = weight.shape();
    let (ox, oy, oz) = (nx * sx, ny * sy, nz * sz);
    let mut out = Tensor::zeros([n, cout, ox, oy, oz]);
    for b in 0..n {
        for co in 0..cout {
            for x in 0..ox {
                for y in 0..oy {
                    for z in 0..oz {
                        let mut acc = bias.map_or(0.0, |bb| bb[co]);
                        for ci in 0..cin {
                            let v = input.data()[(((b * cin + ci) * nx + x / sx) * ny + y / sy) * nz + z / sz];
                            let w = weight.data()[(((ci * cout + co) * sx + x % sx) * sy + y % sy) * sz + z % sz];
                            acc += v * w;
                        }
                        out.data_mut()[(((b * cout + co) * ox + x) * oy + y) * oz + z] = acc;
                    }
                }
            }
        }
    }
    out
}

/// Two-pass PSNR: squared errors collected first, then averaged.
pub fn psnr_direct(estimate: &[f64], reference: &[f64]) -> f64 {
    let sq: Vec<f64> = estimate.iter().zip(reference).map(|(a, b)| (a - b) * (a - b)).collect();
    let mut total = 0.0;
    for v in &sq {
        total += v;
    }
    let mse = total / sq.len() as f64;
    let mut peak = f64::NEG_INFINITY;
    for v in reference {
        if *v > peak {
            peak = *v;
        }
    }
    10.0 * (peak * peak / mse).log10()
}

/// SSIM computed window by window with the full 11³ weight cube.
pub fn ssim_direct(estimate: &Volume3D<f64>, reference: &Volume3D<f64>, l: f64) -> f64 {
    let [nx, ny, nz] = reference.dims();
    let w = SSIM_WINDOW;
    let t = gaussian_taps(w, SSIM_SIGMA);
    let mut cube = vec![0.0; w * w * w];
    for a in 0..w {
        for b in 0..w {
            for c in 0..w {
                cube[(a * w + b) * w + c] = t[a] * t[b] * t[c];
            }
        }
    }
    let c1 = (SSIM_K1 * l).powi(2);
    let c2 = (SSIM_K2 * l).powi(2);
    let mut total = 0.0;
    let mut count = 0usize;
    for x in 0..=nx - w {
        for y in 0..=ny - w {
            for z in 0..=nz - w {
                let (mut mx, mut my) = (0.0, 0.0);
                for a in 0..w {
                    for b in 0..w {
                        for c in 0..w {
                            let k = cube[(a * w + b) * w + c];
                            mx += k * estimate.get(x + a, y + b, z + c);
                            my += k * reference.get(x + a, y + b, z + c);
                        }
                    }
                }
                let (mut vx, mut vy, mut cov) = (0.0, 0.0, 0.0);
                for a in 0..w {
                    for b in 0..w {
                        for c in 0..w {
                            let k = cube[(a * w + b) * w + c];
                            let dx = estimate.get(x + a, y + b, z + c) - mx;
                            let dy = reference.get(x + a, y + b, z + c) - my;
                            vx += k * dx * dx;
                            vy += k * dy * dy;
                            cov += k * dx * dy;
                        }
                    }
                }
                total += ((2.0 * mx * my + c1) * (2.0 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
                count += 1;
            }
        }
    }
    total / count as f64
}

/// Cardinal cubic B-spline via the Cox–de Boor recursion on knots -2..=2.
pub fn cardinal_cubic(t: f64) -> f64 {
    fn n(i: i32, p: u32, t: f64) -> f64 {
        let ti = i as f64 - 2.0;
        if p == 0 {
            return if t >= ti && t < ti + 1.0 { 1.0 } else { 0.0 };
        }
        let pf = p as f64;
        (t - ti) / pf * n(i, p - 1, t) + (ti + pf + 1.0 - t) / pf * n(i + 1, p - 1, t)
    }
    n(0, 3, t)
}

/// Dense Gaussian elimination with partial pivoting.
pub fn solve_dense(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
    let n = b.len();
    for col in 0..n {
        let piv = (col..n).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs())).unwrap();
        a.swap(col, piv);
        b.swap(col, piv);
        for r in col + 1..n {
            let f = a[r][col] / a[col][col];
            for c in col..n {
                a[r][c] -= f * a[col][c];
            }
            b[r] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for r in (0..n).rev() {
        let s: f64 = (r + 1..n).map(|c| a[r][c] * x[c]).sum();
        x[r] = (b[r] - s) / a[r][r];
    }
    x
}

/// Interpolating cubic spline of `f` sampled at integers, evaluated at
/// `xs`; coefficients beyond the ends are extended linearly.
pub fn bspline_direct(f: &[f64], xs: &[f64]) -> Vec<f64> {
    let n = f.len();
    let ext = |c: &[f64], i: isize| -> f64 {
        let n = c.len() as isize;
        if i < 0 {
            c[0] + i as f64 * (c[1] - c[0])
        } else if i >= n {
            c[(n - 1) as usize] + (i - n + 1) as f64 * (c[(n - 1) as usize] - c[(n - 2) as usize])
        } else {
            c[i as usize]
        }
    };
    // column j of the system = response to a unit coefficient vector e_j
    let mut a = vec![vec![0.0; n]; n];
    for j in 0..n {
        let mut e = vec![0.0; n];
        e[j] = 1.0;
        for (row, ar) in a.iter_mut().enumerate() {
            ar[j] = (row as isize - 2..=row as isize + 2)
                .map(|i| ext(&e, i) * cardinal_cubic(row as f64 - i as f64))
                .sum();
        }
    }
    let c = solve_dense(a, f.to_vec());
    xs.iter()
        .map(|&x| {
            let i0 = x.floor() as isize;
            (i0 - 2..=i0 + 2).map(|i| ext(&c, i) * cardinal_cubic(x - i as f64)).sum()
        })
        .collect()
}

/// Oracle for `cubic_upsample_z`: every z column through [`bspline_direct`].
pub fn cubic_upsample_direct(vol: &Volume3D<f64>, r: usize) -> Result<Vec<f64>> {
    let [nx, ny, nz] = vol.dims();
    let xs: Vec<f64> = (0..nz * r).map(|j| j as f64 / r as f64).collect();
    let mut out = Vec::with_capacity(nx * ny * nz * r);
    for x in 0..nx {
        for y in 0..ny {
            let col: Vec<f64> = (0..nz).map(|z| vol.get(x, y, z)).collect();
            out.extend(bspline_direct(&col, &xs));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cardinal_cubic_values() {
        assert!((cardinal_cubic(0.0) - 2.0 / 3.0).abs() < 1e-15);
        assert!((cardinal_cubic(1.0) - 1.0 / 6.0).abs() < 1e-15);
        assert!((cardinal_cubic(-1.0) - 1.0 / 6.0).abs() < 1e-15);
        assert_eq!(cardinal_cubic(2.0), 0.0);
        let s: f64 = (-3..=3).map(|i| cardinal_cubic(0.3 - i as f64)).sum();
        assert!((s - 1.0).abs() < 1e-14);
    }

    #[test]
    fn dense_solve() {
        let x = solve_dense(vec![vec![0.0, 2.0], vec![1.0, 1.0]], vec![4.0, 3.0]);
        assert!((x[0] - 1.0).abs() < 1e-15 && (x[1] - 2.0).abs() < 1e-15);
    }
}
