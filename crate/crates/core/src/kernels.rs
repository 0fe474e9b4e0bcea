//! Low-level numeric kernels: GEMM, im2col/col2im for 3D convolution,
//! transposed 2x upsampling, pooling and separable box sums.

/// `C = A·B + beta·C` with optional transposition of the stored operands.
///
/// `A` is logically `m×k` and `B` is `k×n`; when `ta` (resp. `tb`) is set the
/// buffer holds the row-major transpose.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    ta: bool,
    b: &[f64],
    tb: bool,
    c: &mut [f64],
    beta: f64,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above bound every index the kernel touches, and the
    // output buffer does not alias the inputs (distinct borrows).
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Geometry of a cubic-kernel 3D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub channels: usize,
    pub dims: [usize; 3],
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_dims(&self) -> [usize; 3] {
        let f = |d: usize| (d + 2 * self.pad - self.kernel) / self.stride + 1;
        [f(self.dims[0]), f(self.dims[1]), f(self.dims[2])]
    }

    pub fn col_rows(&self) -> usize {
        self.channels * self.kernel.pow(3)
    }

    pub fn col_cols(&self) -> usize {
        self.out_dims().iter().product()
    }
}

// Calls f(row, out_x, out_y, input_line_offset, kz) for every in-bounds
// (row, output line) pair; the caller walks the innermost axis itself.
fn for_each_tap(g: &ConvGeom, mut f: impl FnMut(usize, usize, usize, usize, usize)) {
    let [d0, d1, d2] = g.dims;
    let [o0, o1, _] = g.out_dims();
    let k = g.kernel;
    for c in 0..g.channels {
        for kx in 0..k {
            for ky in 0..k {
                for kz in 0..k {
                    let row = ((c * k + kx) * k + ky) * k + kz;
                    for ox in 0..o0 {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix < 0 || ix >= d0 as isize {
                            continue;
                        }
                        for oy in 0..o1 {
                            let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                            if iy < 0 || iy >= d1 as isize {
                                continue;
                            }
                            let base = (c * d0 + ix as usize) * d1 + iy as usize;
                            f(row, ox, oy, base * d2, kz);
                        }
                    }
                }
            }
        }
    }
}

/// Unfold `x` (`C×D0×D1×D2`) into a `(C·k³) × (O0·O1·O2)` patch matrix.
pub fn im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let [_, _, d2] = g.dims;
    let [o0, o1, o2] = g.out_dims();
    let cols = o0 * o1 * o2;
    let mut col = vec![0.0; g.col_rows() * cols];
    let (s, p) = (g.stride, g.pad as isize);
    for_each_tap(g, |row, ox, oy, src, kz| {
        let dst = row * cols + (ox * o1 + oy) * o2;
        for oz in 0..o2 {
            let iz = (oz * s + kz) as isize - p;
            if iz >= 0 && (iz as usize) < d2 {
                col[dst + oz] = x[src + iz as usize];
            }
        }
    });
    col
}

/// Adjoint of [`im2col`]: scatter-add a patch matrix back onto the input grid.
pub fn col2im(col: &[f64], g: &ConvGeom) -> Vec<f64> {
    let [d0, d1, d2] = g.dims;
    let [o0, o1, o2] = g.out_dims();
    let cols = o0 * o1 * o2;
    let mut x = vec![0.0; g.channels * d0 * d1 * d2];
    let (s, p) = (g.stride, g.pad as isize);
    for_each_tap(g, |row, ox, oy, dst, kz| {
        let src = row * cols + (ox * o1 + oy) * o2;
        for oz in 0..o2 {
            let iz = (oz * s + kz) as isize - p;
            if iz >= 0 && (iz as usize) < d2 {
                x[dst + iz as usize] += col[src + oz];
            }
        }
    });
    x
}

/// Scatter a `(Co·8) × P` matrix of per-offset values into a `Co × 2D0 × 2D1 × 2D2`
/// grid (the layout produced by a kernel-2 stride-2 transposed convolution).
pub fn scatter_up2(cols: &[f64], co: usize, dims: [usize; 3]) -> Vec<f64> {
    let [d0, d1, d2] = dims;
    let p = d0 * d1 * d2;
    let (u0, u1, u2) = (2 * d0, 2 * d1, 2 * d2);
    let mut out = vec![0.0; co * u0 * u1 * u2];
    for c in 0..co {
        for off in 0..8 {
            let (a, b, e) = (off >> 2, (off >> 1) & 1, off & 1);
            let src = &cols[(c * 8 + off) * p..(c * 8 + off + 1) * p];
            for i in 0..d0 {
                for j in 0..d1 {
                    let s = (i * d1 + j) * d2;
                    let t = ((c * u0 + 2 * i + a) * u1 + 2 * j + b) * u2 + e;
                    for l in 0..d2 {
                        out[t + 2 * l] = src[s + l];
                    }
                }
            }
        }
    }
    out
}

/// Adjoint of [`scatter_up2`].
pub fn gather_up2(grid: &[f64], co: usize, dims: [usize; 3]) -> Vec<f64> {
    let [d0, d1, d2] = dims;
    let p = d0 * d1 * d2;
    let (u0, u1, u2) = (2 * d0, 2 * d1, 2 * d2);
    let mut cols = vec![0.0; co * 8 * p];
    for c in 0..co {
        for off in 0..8 {
            let (a, b, e) = (off >> 2, (off >> 1) & 1, off & 1);
            let dst = &mut cols[(c * 8 + off) * p..(c * 8 + off + 1) * p];
            for i in 0..d0 {
                for j in 0..d1 {
                    let s = (i * d1 + j) * d2;
                    let t = ((c * u0 + 2 * i + a) * u1 + 2 * j + b) * u2 + e;
                    for l in 0..d2 {
                        dst[s + l] = grid[t + 2 * l];
                    }
                }
            }
        }
    }
    cols
}

/// 2x2x2 average pooling of a `C×D0×D1×D2` grid (dims must be even).
pub fn avg_pool2(x: &[f64], c: usize, dims: [usize; 3]) -> Vec<f64> {
    let [d0, d1, d2] = dims;
    let (h0, h1, h2) = (d0 / 2, d1 / 2, d2 / 2);
    let mut out = vec![0.0; c * h0 * h1 * h2];
    for ch in 0..c {
        for i in 0..d0 {
            for j in 0..d1 {
                let src = ((ch * d0 + i) * d1 + j) * d2;
                let dst = ((ch * h0 + i / 2) * h1 + j / 2) * h2;
                for l in 0..d2 {
                    out[dst + l / 2] += 0.125 * x[src + l];
                }
            }
        }
    }
    out
}

/// Adjoint of [`avg_pool2`].
pub fn avg_pool2_adjoint(g: &[f64], c: usize, dims: [usize; 3]) -> Vec<f64> {
    let [d0, d1, d2] = dims;
    let (h0, h1, h2) = (d0 / 2, d1 / 2, d2 / 2);
    let mut out = vec![0.0; c * d0 * d1 * d2];
    for ch in 0..c {
        for i in 0..d0 {
            for j in 0..d1 {
                let dst = ((ch * d0 + i) * d1 + j) * d2;
                let src = ((ch * h0 + i / 2) * h1 + j / 2) * h2;
                for l in 0..d2 {
                    out[dst + l] = 0.125 * g[src + l / 2];
                }
            }
        }
    }
    out
}

/// Sliding-window sum of width `w` along one axis of a rank-3 grid.
///
/// Forward maps length `n` to `n - w + 1` ("valid" windows). The adjoint maps
/// back from `n - w + 1` to `n`, summing every window that covers a position.
fn box_axis(src: &[f64], dims: [usize; 3], axis: usize, w: usize, adjoint: bool) -> (Vec<f64>, [usize; 3]) {
    let n = dims[axis];
    let mut out_dims = dims;
    let (n_in, n_out) = if adjoint { (n - w + 1, n) } else { (n, n - w + 1) };
    out_dims[axis] = n_out;
    let mut in_dims = dims;
    in_dims[axis] = n_in;
    let stride_of = |d: [usize; 3], a: usize| -> usize { d[a + 1..].iter().product() };
    let si = stride_of(in_dims, axis);
    let so = stride_of(out_dims, axis);
    let mut out = vec![0.0; out_dims.iter().product()];
    let outer: usize = dims[..axis].iter().product();
    let inner = si;
    for o in 0..outer {
        for r in 0..inner {
            let ib = o * n_in * si + r;
            let ob = o * n_out * so + r;
            let mut run = 0.0;
            if !adjoint {
                for t in 0..n_in {
                    run += src[ib + t * si];
                    if t >= w {
                        run -= src[ib + (t - w) * si];
                    }
                    if t + 1 >= w {
                        out[ob + (t + 1 - w) * so] = run;
                    }
                }
            } else {
                // out[p] = sum of g[i] for i in [p-w+1, p] ∩ [0, n_in)
                for p in 0..n_out {
                    if p < n_in {
                        run += src[ib + p * si];
                    }
                    if p >= w {
                        run -= src[ib + (p - w) * si];
                    }
                    out[ob + p * so] = run;
                }
            }
        }
    }
    (out, out_dims)
}

/// Sum over every valid `w³` window of a rank-3 grid.
pub fn box_sum3(x: &[f64], dims: [usize; 3], w: usize) -> (Vec<f64>, [usize; 3]) {
    let (a, d) = box_axis(x, dims, 0, w, false);
    let (b, d) = box_axis(&a, d, 1, w, false);
    box_axis(&b, d, 2, w, false)
}

/// Adjoint of [`box_sum3`]; `dims` is the shape of the original (un-windowed) grid.
pub fn box_sum3_adjoint(g: &[f64], dims: [usize; 3], w: usize) -> Vec<f64> {
    let mut d = dims.map(|n| n - w + 1);
    // Walk axes in reverse; each step restores one axis to full length.
    let mut cur = g.to_vec();
    for axis in (0..3).rev() {
        let mut full = d;
        full[axis] = dims[axis];
        let (next, nd) = box_axis(&cur, full, axis, w, true);
        cur = next;
        d = nd;
    }
    cur
}
