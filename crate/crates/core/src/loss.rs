//! Reconstruction and classification losses: 3D SSIM, anisotropic total
//! variation, L1/MSE and cross-entropy.
//!
//! SSIM uses a uniform cubic window over "valid" positions only (no padding),
//! with `C1 = (0.01·L)²` and `C2 = (0.03·L)²`. Statistics are population
//! moments of each window. The score is the mean of the per-window index.

use crate::error::{dim_err, param_err, Result};
use crate::kernels;
use crate::tensor::Tensor;

pub const SSIM_WINDOW: usize = 7;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;
pub const PROB_FLOOR: f64 = 1e-12;

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let ex: Vec<f64> = logits.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = ex.iter().sum();
    ex.into_iter().map(|e| e / s).collect()
}

pub fn log_softmax_at(logits: &[f64], k: usize) -> f64 {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    logits[k] - lse
}

pub fn mse(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64
}

pub fn l1(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64
}

fn volume_dims(t: &Tensor) -> Result<[usize; 3]> {
    let s = t.shape();
    let r = s.len();
    if r < 3 || s[..r - 3].iter().any(|&d| d != 1) {
        return dim_err(format!("expected a single-channel volume, got {:?}", s));
    }
    Ok([s[r - 3], s[r - 2], s[r - 1]])
}

/// Mean 3D SSIM of two volumes with a uniform `window³` kernel and dynamic
/// range `range`.
pub fn ssim3d(a: &Tensor, b: &Tensor, window: usize, range: f64) -> Result<f64> {
    let dims = volume_dims(a)?;
    if volume_dims(b)? != dims {
        return dim_err(format!("ssim3d: {:?} vs {:?}", a.shape(), b.shape()));
    }
    if window % 2 == 0 || window == 0 {
        return param_err(format!("ssim window must be odd, got {window}"));
    }
    if dims.iter().any(|&d| d < window) {
        return param_err(format!("ssim window {window} exceeds volume {:?}", dims));
    }
    Ok(ssim3d_raw(a.data(), b.data(), dims, window, range, false).0)
}

/// SSIM value and, optionally, its gradient with respect to `x`.
pub(crate) fn ssim3d_raw(x: &[f64], y: &[f64], dims: [usize; 3], w: usize, range: f64, grad: bool) -> (f64, Option<Vec<f64>>) {
    let c1 = (SSIM_K1 * range).powi(2);
    let c2 = (SSIM_K2 * range).powi(2);
    let n = (w * w * w) as f64;
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(y).map(|(a, b)| a * b).collect();
    let (sx, _) = kernels::box_sum3(x, dims, w);
    let (sy, _) = kernels::box_sum3(y, dims, w);
    let (sxx, _) = kernels::box_sum3(&xx, dims, w);
    let (syy, _) = kernels::box_sum3(&yy, dims, w);
    let (sxy, _) = kernels::box_sum3(&xy, dims, w);
    let nw = sx.len();
    let mut total = 0.0;
    let (mut pa, mut pb, mut pc) = if grad { (vec![0.0; nw], vec![0.0; nw], vec![0.0; nw]) } else { (vec![], vec![], vec![]) };
    for i in 0..nw {
        let mx = sx[i] / n;
        let my = sy[i] / n;
        let vx = sxx[i] / n - mx * mx;
        let vy = syy[i] / n - my * my;
        let cxy = sxy[i] / n - mx * my;
        let num1 = 2.0 * mx * my + c1;
        let num2 = 2.0 * cxy + c2;
        let den1 = mx * mx + my * my + c1;
        let den2 = vx + vy + c2;
        let s = num1 * num2 / (den1 * den2);
        total += s;
        if grad {
            let d_mx = 2.0 * my * num2 / (den1 * den2) - s * 2.0 * mx / den1;
            let d_vx = -s / den2;
            let d_cxy = 2.0 * num1 / (den1 * den2);
            pa[i] = d_mx - 2.0 * mx * d_vx - my * d_cxy;
            pb[i] = d_vx;
            pc[i] = d_cxy;
        }
    }
    let value = total / nw as f64;
    if !grad {
        return (value, None);
    }
    let aa = kernels::box_sum3_adjoint(&pa, dims, w);
    let ab = kernels::box_sum3_adjoint(&pb, dims, w);
    let ac = kernels::box_sum3_adjoint(&pc, dims, w);
    let k = 1.0 / (n * nw as f64);
    let g = (0..x.len()).map(|p| k * (aa[p] + 2.0 * x[p] * ab[p] + y[p] * ac[p])).collect();
    (value, Some(g))
}

/// Anisotropic total variation: sum of absolute forward differences along the
/// three axes, divided by the voxel count.
pub fn tv3d(x: &Tensor) -> Result<f64> {
    Ok(tv3d_raw(x.data(), volume_dims(x)?))
}

pub(crate) fn tv3d_raw(x: &[f64], dims: [usize; 3]) -> f64 {
    let [a, b, c] = dims;
    let idx = |i: usize, j: usize, k: usize| (i * b + j) * c + k;
    let mut s = 0.0;
    for i in 0..a {
        for j in 0..b {
            for k in 0..c {
                let v = x[idx(i, j, k)];
                if i + 1 < a {
                    s += (x[idx(i + 1, j, k)] - v).abs();
                }
                if j + 1 < b {
                    s += (x[idx(i, j + 1, k)] - v).abs();
                }
                if k + 1 < c {
                    s += (x[idx(i, j, k + 1)] - v).abs();
                }
            }
        }
    }
    s / x.len() as f64
}

pub(crate) fn tv3d_grad_raw(x: &[f64], dims: [usize; 3]) -> Vec<f64> {
    let [a, b, c] = dims;
    let idx = |i: usize, j: usize, k: usize| (i * b + j) * c + k;
    let inv = 1.0 / x.len() as f64;
    let mut g = vec![0.0; x.len()];
    let sgn = |d: f64| if d > 0.0 { inv } else if d < 0.0 { -inv } else { 0.0 };
    for i in 0..a {
        for j in 0..b {
            for k in 0..c {
                let p = idx(i, j, k);
                let v = x[p];
                let mut push = |q: usize| {
                    let s = sgn(x[q] - v);
                    g[q] += s;
                    g[p] -= s;
                };
                if i + 1 < a {
                    push(idx(i + 1, j, k));
                }
                if j + 1 < b {
                    push(idx(i, j + 1, k));
                }
                if k + 1 < c {
                    push(idx(i, j, k + 1));
                }
            }
        }
    }
    g
}

/// `−ln p(label)` with the probability floored at [`PROB_FLOOR`].
pub fn cross_entropy(probs: &[f64], label: usize) -> Result<f64> {
    if label >= probs.len() {
        return param_err(format!("label {label} out of range for {} classes", probs.len()));
    }
    let total: f64 = probs.iter().sum();
    if probs.iter().any(|&p| !(0.0..=1.0).contains(&p)) || (total - 1.0).abs() > 1e-6 {
        return param_err(format!("not a probability distribution: {:?}", probs));
    }
    Ok(-probs[label].max(PROB_FLOOR).ln())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn vol(dims: [usize; 3], vals: Vec<f64>) -> Tensor {
        Tensor::from_vec(&dims, vals).unwrap()
    }

    /// Straight-line per-window SSIM, independent of the box-sum path.
    fn ssim_oracle(a: &Tensor, b: &Tensor, w: usize) -> f64 {
        let [d0, d1, d2] = [a.shape()[0], a.shape()[1], a.shape()[2]];
        let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
        let at = |t: &Tensor, i: usize, j: usize, k: usize| t.data()[(i * d1 + j) * d2 + k];
        let mut total = 0.0;
        let mut count = 0;
        for i in 0..=d0 - w {
            for j in 0..=d1 - w {
                for k in 0..=d2 - w {
                    let mut xs = vec![];
                    let mut ys = vec![];
                    for p in 0..w {
                        for q in 0..w {
                            for r in 0..w {
                                xs.push(at(a, i + p, j + q, k + r));
                                ys.push(at(b, i + p, j + q, k + r));
                            }
                        }
                    }
                    let n = xs.len() as f64;
                    let mx = xs.iter().sum::<f64>() / n;
                    let my = ys.iter().sum::<f64>() / n;
                    let vx = xs.iter().map(|v| (v - mx).powi(2)).sum::<f64>() / n;
                    let vy = ys.iter().map(|v| (v - my).powi(2)).sum::<f64>() / n;
                    let cxy = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum::<f64>() / n;
                    total += (2.0 * mx * my + c1) * (2.0 * cxy + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2));
                    count += 1;
                }
            }
        }
        total / count as f64
    }

    fn tv_oracle(x: &Tensor) -> f64 {
        let s = x.shape();
        let at = |i: usize, j: usize, k: usize| x.data()[(i * s[1] + j) * s[2] + k];
        let mut t = 0.0;
        for i in 0..s[0] {
            for j in 0..s[1] {
                for k in 0..s[2] {
                    if i + 1 < s[0] {
                        t += (at(i + 1, j, k) - at(i, j, k)).abs();
                    }
                    if j + 1 < s[1] {
                        t += (at(i, j + 1, k) - at(i, j, k)).abs();
                    }
                    if k + 1 < s[2] {
                        t += (at(i, j, k + 1) - at(i, j, k)).abs();
                    }
                }
            }
        }
        t / x.len() as f64
    }

    fn pseudo(n: usize, seed: u64) -> Vec<f64> {
        let mut s = seed;
        (0..n)
            .map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                (s >> 11) as f64 / (1u64 << 53) as f64
            })
            .collect()
    }

    #[test]
    fn ssim_identity_is_exactly_one() {
        let x = vol([9, 8, 10], pseudo(720, 3));
        assert_eq!(ssim3d(&x, &x, 7, 1.0).unwrap(), 1.0);
    }

    #[test]
    fn ssim_constant_volumes_match_closed_form() {
        let l = 1.0;
        let a = Tensor::zeros(&[8, 8, 8]);
        let b = Tensor::full(&[8, 8, 8], l);
        let (c1, c2) = ((0.01 * l) * (0.01 * l), (0.03 * l) * (0.03 * l));
        let expected = (2.0 * 0.0 * l + c1) * c2 / ((0.0 + l * l + c1) * c2);
        let got = ssim3d(&a, &b, 7, l).unwrap();
        assert!((got - expected).abs() < 1e-15, "{got} vs {expected}");
    }

    #[test]
    fn ssim_matches_window_oracle() {
        let a = vol([9, 8, 10], pseudo(720, 5));
        let b = vol([9, 8, 10], pseudo(720, 6));
        let got = ssim3d(&a, &b, 7, 1.0).unwrap();
        assert!((got - ssim_oracle(&a, &b, 7)).abs() < 1e-6);
        let got = ssim3d(&a, &b, 3, 1.0).unwrap();
        assert!((got - ssim_oracle(&a, &b, 3)).abs() < 1e-6);
    }

    #[test]
    fn ssim_rejects_bad_inputs() {
        let a = Tensor::zeros(&[8, 8, 8]);
        let b = Tensor::zeros(&[8, 8, 9]);
        assert!(ssim3d(&a, &b, 7, 1.0).is_err());
        assert!(ssim3d(&a, &a, 4, 1.0).is_err());
        assert!(ssim3d(&a, &a, 9, 1.0).is_err());
    }

    #[test]
    fn tv_examples() {
        assert_eq!(tv3d(&Tensor::full(&[4, 4, 4], 0.3)).unwrap(), 0.0);
        let x = vol([2, 1, 1], vec![0.0, 1.0]);
        assert_eq!(tv3d(&x).unwrap() * 2.0, 1.0);
        assert_eq!(tv3d(&x).unwrap(), 0.5);
        let r = vol([5, 6, 7], pseudo(210, 9));
        assert!((tv3d(&r).unwrap() - tv_oracle(&r)).abs() < 1e-9);
    }

    #[test]
    fn cross_entropy_examples() {
        assert_eq!(cross_entropy(&[0.0, 1.0], 1).unwrap(), 0.0);
        assert!((cross_entropy(&[0.5, 0.5], 0).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
        assert!((cross_entropy(&[1.0 - 1e-20, 1e-20], 1).unwrap() + (1e-12f64).ln()).abs() < 1e-12);
        assert!(cross_entropy(&[0.7, 0.7], 0).is_err());
        assert!(cross_entropy(&[0.5, 0.5], 2).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn ssim_symmetric_and_bounded(seed_a in 0u64..1000, seed_b in 0u64..1000) {
            let a = vol([8, 8, 8], pseudo(512, seed_a));
            let b = vol([8, 8, 8], pseudo(512, seed_b + 7919));
            let ab = ssim3d(&a, &b, 7, 1.0).unwrap();
            let ba = ssim3d(&b, &a, 7, 1.0).unwrap();
            prop_assert!((ab - ba).abs() < 1e-12);
            prop_assert!((-1.0..=1.0).contains(&ab));
        }

        #[test]
        fn tv_shift_and_scale(seed in 0u64..1000, shift in -2.0f64..2.0, alpha in 0.0f64..3.0) {
            let x = vol([4, 5, 3], pseudo(60, seed));
            let base = tv3d(&x).unwrap();
            prop_assert!(base >= 0.0);
            let shifted = tv3d(&x.map(|v| v + shift)).unwrap();
            prop_assert!((shifted - base).abs() < 1e-9);
            let scaled = tv3d(&x.map(|v| v * alpha)).unwrap();
            prop_assert!((scaled - alpha * base).abs() < 1e-9);
        }
    }
}
