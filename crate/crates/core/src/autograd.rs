//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Tape`] records every operation applied to its [`Var`]s. Calling
//! [`Tape::backward`] walks the record in reverse and accumulates gradients
//! for every node that (transitively) depends on a leaf created with
//! [`Tape::leaf`]. Nodes created with [`Tape::constant`] never receive
//! gradients, and operations whose inputs are all constant store no backward
//! closure at all, which is how frozen sub-networks skip weight gradients.

use std::cell::RefCell;
use std::rc::Rc;

use crate::kernels::{self, ConvGeom};
use crate::loss;
use crate::tensor::Tensor;

type BackwardFn = Box<dyn Fn(&Tensor, &mut GradSink)>;

struct Node {
    value: Rc<Tensor>,
    requires_grad: bool,
    backward: Option<BackwardFn>,
}

#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Accumulator handed to backward closures.
pub struct GradSink<'a> {
    grads: &'a mut [Option<Tensor>],
    requires: &'a [bool],
}

impl GradSink<'_> {
    pub fn wants(&self, id: usize) -> bool {
        self.requires[id]
    }

    /// Add the gradient produced by `f` to node `id`, evaluating `f` only if
    /// that node needs a gradient.
    pub fn add_with(&mut self, id: usize, f: impl FnOnce() -> Tensor) {
        if !self.requires[id] {
            return;
        }
        let g = f();
        match &mut self.grads[id] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }
}

/// Gradients produced by a backward pass, indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var<'_>) -> Option<&Tensor> {
        self.grads.get(v.id).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros shaped like `v` when nothing flowed into it.
    pub fn get_or_zeros(&self, v: Var<'_>) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(v.value().shape()))
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    /// A differentiable input (typically a parameter).
    pub fn leaf(&self, t: Tensor) -> Var<'_> {
        self.push(t, true, None)
    }

    /// A non-differentiable input.
    pub fn constant(&self, t: Tensor) -> Var<'_> {
        self.push(t, false, None)
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, requires_grad: bool, backward: Option<BackwardFn>) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value: Rc::new(value), requires_grad, backward });
        Var { tape: self, id: nodes.len() - 1 }
    }

    fn op(&self, value: Tensor, inputs: &[Var<'_>], backward: impl Fn(&Tensor, &mut GradSink) + 'static) -> Var<'_> {
        let requires = inputs.iter().any(|v| v.requires_grad());
        if requires {
            self.push(value, true, Some(Box::new(backward)))
        } else {
            self.push(value, false, None)
        }
    }

    /// Backpropagate from a scalar root seeded with 1.
    pub fn backward(&self, root: Var<'_>) -> Gradients {
        let seed = Tensor::full(root.value().shape(), 1.0);
        self.backward_with(&[(root, seed)])
    }

    /// Backpropagate from arbitrary seed gradients (vector-Jacobian product).
    pub fn backward_with(&self, seeds: &[(Var<'_>, Tensor)]) -> Gradients {
        let nodes = self.nodes.borrow();
        let requires: Vec<bool> = nodes.iter().map(|n| n.requires_grad).collect();
        let mut grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
        for (v, s) in seeds {
            assert_eq!(v.value().shape(), s.shape(), "seed shape mismatch");
            match &mut grads[v.id] {
                Some(acc) => acc.add_assign(s),
                slot @ None => *slot = Some(s.clone()),
            }
        }
        for i in (0..nodes.len()).rev() {
            let Some(bw) = &nodes[i].backward else { continue };
            let Some(g) = grads[i].take() else { continue };
            let mut sink = GradSink { grads: &mut grads, requires: &requires };
            bw(&g, &mut sink);
        }
        Gradients { grads }
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape(), data)
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    pub fn item(&self) -> f64 {
        self.value().item()
    }

    pub fn add(self, other: Var<'t>) -> Var<'t> {
        let (a, b) = (self.value(), other.value());
        assert_eq!(a.shape(), b.shape(), "add shape mismatch");
        let out = zip_map(&a, &b, |x, y| x + y);
        let (ia, ib) = (self.id, other.id);
        self.tape.op(out, &[self, other], move |g, s| {
            s.add_with(ia, || g.clone());
            s.add_with(ib, || g.clone());
        })
    }

    pub fn sub(self, other: Var<'t>) -> Var<'t> {
        let (a, b) = (self.value(), other.value());
        assert_eq!(a.shape(), b.shape(), "sub shape mismatch");
        let out = zip_map(&a, &b, |x, y| x - y);
        let (ia, ib) = (self.id, other.id);
        self.tape.op(out, &[self, other], move |g, s| {
            s.add_with(ia, || g.clone());
            s.add_with(ib, || g.map(|v| -v));
        })
    }

    pub fn mul(self, other: Var<'t>) -> Var<'t> {
        let (a, b) = (self.value(), other.value());
        assert_eq!(a.shape(), b.shape(), "mul shape mismatch");
        let out = zip_map(&a, &b, |x, y| x * y);
        let (ia, ib) = (self.id, other.id);
        self.tape.op(out, &[self, other], move |g, s| {
            s.add_with(ia, || zip_map(g, &b, |x, y| x * y));
            s.add_with(ib, || zip_map(g, &a, |x, y| x * y));
        })
    }

    pub fn scale(self, k: f64) -> Var<'t> {
        let out = self.value().map(|v| v * k);
        let ia = self.id;
        self.tape.op(out, &[self], move |g, s| s.add_with(ia, || g.map(|v| v * k)))
    }

    pub fn add_scalar(self, k: f64) -> Var<'t> {
        let out = self.value().map(|v| v + k);
        let ia = self.id;
        self.tape.op(out, &[self], move |g, s| s.add_with(ia, || g.clone()))
    }

    pub fn reshape(self, shape: &[usize]) -> Var<'t> {
        let a = self.value();
        let old = a.shape().to_vec();
        let out = (*a).clone().reshape(shape).expect("reshape size mismatch");
        let ia = self.id;
        self.tape.op(out, &[self], move |g, s| {
            s.add_with(ia, || g.clone().reshape(&old).unwrap());
        })
    }

    pub fn sum(self) -> Var<'t> {
        let a = self.value();
        let shape = a.shape().to_vec();
        let out = Tensor::scalar(a.sum());
        let ia = self.id;
        self.tape.op(out, &[self], move |g, s| s.add_with(ia, || Tensor::full(&shape, g.item())))
    }

    pub fn mean(self) -> Var<'t> {
        let n = self.value().len() as f64;
        self.sum().scale(1.0 / n)
    }

    fn unary(self, f: impl Fn(f64) -> f64, df: impl Fn(f64, f64) -> f64 + 'static) -> Var<'t> {
        // df(input, output) is the local derivative.
        let a = self.value();
        let out = a.map(f);
        let y = Rc::new(out.clone());
        let ia = self.id;
        self.tape.op(out, &[self], move |g, s| {
            s.add_with(ia, || {
                let data = g.data().iter().zip(a.data()).zip(y.data()).map(|((&gv, &x), &yv)| gv * df(x, yv)).collect();
                Tensor::new(g.shape(), data)
            });
        })
    }

    pub fn relu(self) -> Var<'t> {
        self.unary(|x| x.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn leaky_relu(self, slope: f64) -> Var<'t> {
        self.unary(move |x| if x > 0.0 { x } else { slope * x }, move |x, _| if x > 0.0 { 1.0 } else { slope })
    }

    pub fn elu(self) -> Var<'t> {
        self.unary(|x| if x > 0.0 { x } else { x.exp_m1() }, |x, y| if x > 0.0 { 1.0 } else { y + 1.0 })
    }

    pub fn sigmoid(self) -> Var<'t> {
        self.unary(loss::sigmoid, |_, y| y * (1.0 - y))
    }

    /// `[m,k] · [k,n] → [m,n]`.
    pub fn matmul(self, other: Var<'t>) -> Var<'t> {
        let (a, b) = (self.value(), other.value());
        let (sa, sb) = (a.shape(), b.shape());
        assert!(sa.len() == 2 && sb.len() == 2 && sa[1] == sb[0], "matmul {:?}·{:?}", sa, sb);
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        kernels::gemm(m, k, n, a.data(), false, b.data(), false, &mut out, 0.0);
        let (ia, ib) = (self.id, other.id);
        self.tape.op(Tensor::new(&[m, n], out), &[self, other], move |g, s| {
            s.add_with(ia, || {
                let mut ga = vec![0.0; m * k];
                kernels::gemm(m, n, k, g.data(), false, b.data(), true, &mut ga, 0.0);
                Tensor::new(&[m, k], ga)
            });
            s.add_with(ib, || {
                let mut gb = vec![0.0; k * n];
                kernels::gemm(k, m, n, a.data(), true, g.data(), false, &mut gb, 0.0);
                Tensor::new(&[k, n], gb)
            });
        })
    }

    /// `[m,n] + [n]` broadcast over rows.
    pub fn add_row(self, bias: Var<'t>) -> Var<'t> {
        let (a, b) = (self.value(), bias.value());
        let n = b.len();
        assert_eq!(a.shape().last(), Some(&n), "add_row width mismatch");
        let mut out = (*a).clone();
        for row in out.data_mut().chunks_mut(n) {
            for (v, bv) in row.iter_mut().zip(b.data()) {
                *v += bv;
            }
        }
        let (ia, ib) = (self.id, bias.id);
        self.tape.op(out, &[self, bias], move |g, s| {
            s.add_with(ia, || g.clone());
            s.add_with(ib, || {
                let mut gb = vec![0.0; n];
                for row in g.data().chunks(n) {
                    for (acc, v) in gb.iter_mut().zip(row) {
                        *acc += v;
                    }
                }
                Tensor::new(&[n], gb)
            });
        })
    }

    /// Cubic convolution of a `[Ci,D0,D1,D2]` grid with `[Co,Ci,k,k,k]` weights.
    pub fn conv3d(self, w: Var<'t>, b: Var<'t>, stride: usize, pad: usize) -> Var<'t> {
        let (x, wv) = (self.value(), w.value());
        let (xs, ws) = (x.shape(), wv.shape());
        assert!(xs.len() == 4 && ws.len() == 5 && ws[1] == xs[0], "conv3d {:?} with {:?}", xs, ws);
        let geom = ConvGeom { channels: xs[0], dims: [xs[1], xs[2], xs[3]], kernel: ws[2], stride, pad };
        let co = ws[0];
        let (rows, p) = (geom.col_rows(), geom.col_cols());
        let col = kernels::im2col(x.data(), &geom);
        let mut out = vec![0.0; co * p];
        kernels::gemm(co, rows, p, wv.data(), false, &col, false, &mut out, 0.0);
        let bv = b.value();
        for (c, chunk) in out.chunks_mut(p).enumerate() {
            let bias = bv.data()[c];
            chunk.iter_mut().for_each(|v| *v += bias);
        }
        let od = geom.out_dims();
        let shape = [co, od[0], od[1], od[2]];
        let (ix, iw, ib) = (self.id, w.id, b.id);
        let col = if w.requires_grad() { Some(col) } else { None };
        self.tape.op(Tensor::new(&shape, out), &[self, w, b], move |g, s| {
            s.add_with(ix, || {
                let mut gcol = vec![0.0; rows * p];
                kernels::gemm(rows, co, p, wv.data(), true, g.data(), false, &mut gcol, 0.0);
                let d = geom.dims;
                Tensor::new(&[geom.channels, d[0], d[1], d[2]], kernels::col2im(&gcol, &geom))
            });
            if let Some(col) = &col {
                s.add_with(iw, || {
                    let mut gw = vec![0.0; co * rows];
                    kernels::gemm(co, p, rows, g.data(), false, col, true, &mut gw, 0.0);
                    Tensor::new(wv.shape(), gw)
                });
            }
            s.add_with(ib, || Tensor::vector(g.data().chunks(p).map(|c| c.iter().sum()).collect()));
        })
    }

    /// Kernel-2 stride-2 transposed convolution: `[Ci,D]` with `[Ci,Co,2,2,2]`
    /// weights to `[Co,2D]`.
    pub fn conv_transpose_up2(self, w: Var<'t>, b: Var<'t>) -> Var<'t> {
        let (x, wv) = (self.value(), w.value());
        let (xs, ws) = (x.shape(), wv.shape());
        assert!(xs.len() == 4 && ws.len() == 5 && ws[0] == xs[0], "up2 {:?} with {:?}", xs, ws);
        let (ci, co) = (ws[0], ws[1]);
        let dims = [xs[1], xs[2], xs[3]];
        let p: usize = dims.iter().product();
        let mut cols = vec![0.0; co * 8 * p];
        kernels::gemm(co * 8, ci, p, wv.data(), true, x.data(), false, &mut cols, 0.0);
        let mut out = kernels::scatter_up2(&cols, co, dims);
        let bv = b.value();
        let up = 8 * p;
        for (c, chunk) in out.chunks_mut(up).enumerate() {
            let bias = bv.data()[c];
            chunk.iter_mut().for_each(|v| *v += bias);
        }
        let shape = [co, 2 * dims[0], 2 * dims[1], 2 * dims[2]];
        let (ix, iw, ib) = (self.id, w.id, b.id);
        self.tape.op(Tensor::new(&shape, out), &[self, w, b], move |g, s| {
            let gcols = kernels::gather_up2(g.data(), co, dims);
            s.add_with(ix, || {
                let mut gx = vec![0.0; ci * p];
                kernels::gemm(ci, co * 8, p, wv.data(), false, &gcols, false, &mut gx, 0.0);
                Tensor::new(x.shape(), gx)
            });
            s.add_with(iw, || {
                let mut gw = vec![0.0; ci * co * 8];
                kernels::gemm(ci, p, co * 8, x.data(), false, &gcols, true, &mut gw, 0.0);
                Tensor::new(wv.shape(), gw)
            });
            s.add_with(ib, || Tensor::vector(g.data().chunks(up).map(|c| c.iter().sum()).collect()));
        })
    }

    /// 2x2x2 average pooling of a `[C,D0,D1,D2]` grid.
    pub fn avg_pool2(self) -> Var<'t> {
        let x = self.value();
        let xs = x.shape().to_vec();
        let (c, dims) = (xs[0], [xs[1], xs[2], xs[3]]);
        let out = kernels::avg_pool2(x.data(), c, dims);
        let ia = self.id;
        self.tape.op(Tensor::new(&[c, dims[0] / 2, dims[1] / 2, dims[2] / 2], out), &[self], move |g, s| {
            s.add_with(ia, || Tensor::new(&xs, kernels::avg_pool2_adjoint(g.data(), c, dims)));
        })
    }

    /// Mean over all axes but the first: `[C, ...] → [C]`.
    pub fn global_avg_pool(self) -> Var<'t> {
        let x = self.value();
        let xs = x.shape().to_vec();
        let c = xs[0];
        let per = x.len() / c;
        let out: Vec<f64> = x.data().chunks(per).map(|ch| ch.iter().sum::<f64>() / per as f64).collect();
        let ia = self.id;
        self.tape.op(Tensor::vector(out), &[self], move |g, s| {
            s.add_with(ia, || {
                let mut data = Vec::with_capacity(c * per);
                for &gv in g.data() {
                    data.extend(std::iter::repeat_n(gv / per as f64, per));
                }
                Tensor::new(&xs, data)
            });
        })
    }

    /// Concatenate along the leading axis.
    pub fn concat0(self, other: Var<'t>) -> Var<'t> {
        let (a, b) = (self.value(), other.value());
        assert_eq!(a.shape()[1..], b.shape()[1..], "concat0 trailing shape mismatch");
        let mut shape = a.shape().to_vec();
        shape[0] += b.shape()[0];
        let mut data = a.data().to_vec();
        data.extend_from_slice(b.data());
        let (na, ia, ib) = (a.len(), self.id, other.id);
        let (sa, sb) = (a.shape().to_vec(), b.shape().to_vec());
        self.tape.op(Tensor::new(&shape, data), &[self, other], move |g, s| {
            s.add_with(ia, || Tensor::new(&sa, g.data()[..na].to_vec()));
            s.add_with(ib, || Tensor::new(&sb, g.data()[na..].to_vec()));
        })
    }

    /// Rows `idx` of a `[n,d]` matrix, as an `[idx.len(), d]` matrix.
    pub fn gather_rows(self, idx: Rc<Vec<usize>>) -> Var<'t> {
        let x = self.value();
        let (n, d) = (x.shape()[0], x.shape()[1]);
        let mut data = Vec::with_capacity(idx.len() * d);
        for &i in idx.iter() {
            data.extend_from_slice(x.row(i));
        }
        let ia = self.id;
        self.tape.op(Tensor::new(&[idx.len(), d], data), &[self], move |g, s| {
            s.add_with(ia, || {
                let mut gx = vec![0.0; n * d];
                for (e, &i) in idx.iter().enumerate() {
                    for (acc, v) in gx[i * d..(i + 1) * d].iter_mut().zip(g.row(e)) {
                        *acc += v;
                    }
                }
                Tensor::new(&[n, d], gx)
            });
        })
    }

    /// Sum rows of an `[e,d]` matrix into `n` buckets given by `idx`.
    pub fn scatter_add_rows(self, idx: Rc<Vec<usize>>, n: usize) -> Var<'t> {
        let x = self.value();
        let d = x.shape()[1];
        let mut out = vec![0.0; n * d];
        for (e, &i) in idx.iter().enumerate() {
            for (acc, v) in out[i * d..(i + 1) * d].iter_mut().zip(x.row(e)) {
                *acc += v;
            }
        }
        let ia = self.id;
        let e_count = idx.len();
        self.tape.op(Tensor::new(&[n, d], out), &[self], move |g, s| {
            s.add_with(ia, || {
                let mut gx = Vec::with_capacity(e_count * d);
                for &i in idx.iter() {
                    gx.extend_from_slice(g.row(i));
                }
                Tensor::new(&[e_count, d], gx)
            });
        })
    }

    /// Softmax of a score vector within each segment `seg[e] ∈ 0..n`.
    pub fn segment_softmax(self, seg: Rc<Vec<usize>>, n: usize) -> Var<'t> {
        let x = self.value();
        let out = Rc::new(segment_softmax(x.data(), &seg, n));
        let ia = self.id;
        let y = out.clone();
        self.tape.op(Tensor::vector((*out).clone()), &[self], move |g, s| {
            s.add_with(ia, || {
                // d softmax: y_e (g_e − Σ_{f∈seg} g_f y_f)
                let mut dot = vec![0.0; n];
                for (e, &k) in seg.iter().enumerate() {
                    dot[k] += g.data()[e] * y[e];
                }
                let data = seg.iter().enumerate().map(|(e, &k)| y[e] * (g.data()[e] - dot[k])).collect();
                Tensor::vector(data)
            });
        })
    }

    /// Multiply row `e` of an `[e,d]` matrix by `w[e]`.
    pub fn scale_rows(self, w: Var<'t>) -> Var<'t> {
        let (x, wv) = (self.value(), w.value());
        let d = x.shape()[1];
        assert_eq!(x.shape()[0], wv.len(), "scale_rows length mismatch");
        let mut out = (*x).clone();
        for (row, &k) in out.data_mut().chunks_mut(d).zip(wv.data()) {
            row.iter_mut().for_each(|v| *v *= k);
        }
        let (ix, iw) = (self.id, w.id);
        self.tape.op(out, &[self, w], move |g, s| {
            s.add_with(ix, || {
                let mut gx = g.clone();
                for (row, &k) in gx.data_mut().chunks_mut(d).zip(wv.data()) {
                    row.iter_mut().for_each(|v| *v *= k);
                }
                gx
            });
            s.add_with(iw, || {
                let data = g.data().chunks(d).zip(x.data().chunks(d)).map(|(a, b)| a.iter().zip(b).map(|(p, q)| p * q).sum()).collect();
                Tensor::vector(data)
            });
        })
    }

    /// Mean squared difference to a constant target.
    pub fn mse(self, target: Rc<Tensor>) -> Var<'t> {
        let x = self.value();
        assert_eq!(x.len(), target.len(), "mse size mismatch");
        let out = Tensor::scalar(loss::mse(x.data(), target.data()));
        let ia = self.id;
        let n = x.len() as f64;
        self.tape.op(out, &[self], move |g, s| {
            let k = 2.0 * g.item() / n;
            s.add_with(ia, || zip_map(&x, &Tensor::new(x.shape(), target.data().to_vec()), |a, b| k * (a - b)));
        })
    }

    /// Mean absolute difference to a constant target.
    pub fn l1(self, target: Rc<Tensor>) -> Var<'t> {
        let x = self.value();
        assert_eq!(x.len(), target.len(), "l1 size mismatch");
        let out = Tensor::scalar(loss::l1(x.data(), target.data()));
        let ia = self.id;
        let n = x.len() as f64;
        self.tape.op(out, &[self], move |g, s| {
            let k = g.item() / n;
            s.add_with(ia, || {
                let data = x.data().iter().zip(target.data()).map(|(a, b)| k * sign(a - b)).collect();
                Tensor::new(x.shape(), data)
            });
        })
    }

    /// Mean local SSIM against a constant volume of the same shape; the last
    /// three axes are spatial.
    pub fn ssim3d(self, target: Rc<Tensor>, window: usize) -> Var<'t> {
        let x = self.value();
        let dims = spatial_dims(x.shape());
        let (value, _) = loss::ssim3d_raw(x.data(), target.data(), dims, window, 1.0, false);
        let ia = self.id;
        self.tape.op(Tensor::scalar(value), &[self], move |g, s| {
            s.add_with(ia, || {
                let (_, grad) = loss::ssim3d_raw(x.data(), target.data(), dims, window, 1.0, true);
                let k = g.item();
                Tensor::new(x.shape(), grad.unwrap().into_iter().map(|v| v * k).collect())
            });
        })
    }

    /// Anisotropic total variation over the last three axes, normalized by
    /// voxel count.
    pub fn tv3d(self) -> Var<'t> {
        let x = self.value();
        let dims = spatial_dims(x.shape());
        let out = Tensor::scalar(loss::tv3d_raw(x.data(), dims));
        let ia = self.id;
        self.tape.op(out, &[self], move |g, s| {
            s.add_with(ia, || {
                let k = g.item();
                let grad = loss::tv3d_grad_raw(x.data(), dims);
                Tensor::new(x.shape(), grad.into_iter().map(|v| v * k).collect())
            });
        })
    }

    /// Mean softmax cross-entropy of `[n, classes]` logits against labels.
    pub fn softmax_cross_entropy(self, labels: Rc<Vec<usize>>) -> Var<'t> {
        let x = self.value();
        let (n, c) = (x.shape()[0], x.shape()[1]);
        assert_eq!(labels.len(), n, "label count mismatch");
        let probs: Vec<f64> = x.data().chunks(c).flat_map(loss::softmax).collect();
        let total: f64 = labels.iter().enumerate().map(|(i, &y)| -loss::log_softmax_at(x.row(i), y)).sum();
        let ia = self.id;
        self.tape.op(Tensor::scalar(total / n as f64), &[self], move |g, s| {
            s.add_with(ia, || {
                let k = g.item() / n as f64;
                let mut data = probs.clone();
                for (i, &y) in labels.iter().enumerate() {
                    data[i * c + y] -= 1.0;
                }
                data.iter_mut().for_each(|v| *v *= k);
                Tensor::new(&[n, c], data)
            });
        })
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn spatial_dims(shape: &[usize]) -> [usize; 3] {
    let r = shape.len();
    assert!(r >= 3, "expected a volume, got shape {:?}", shape);
    assert!(shape[..r - 3].iter().all(|&d| d == 1), "expected a single-channel volume, got {:?}", shape);
    [shape[r - 3], shape[r - 2], shape[r - 1]]
}

pub(crate) fn segment_softmax(x: &[f64], seg: &[usize], n: usize) -> Vec<f64> {
    let mut max = vec![f64::NEG_INFINITY; n];
    for (&v, &k) in x.iter().zip(seg) {
        max[k] = max[k].max(v);
    }
    let mut denom = vec![0.0; n];
    let ex: Vec<f64> = x
        .iter()
        .zip(seg)
        .map(|(&v, &k)| {
            let e = (v - max[k]).exp();
            denom[k] += e;
            e
        })
        .collect();
    ex.iter().zip(seg).map(|(e, &k)| e / denom[k]).collect()
}

/// Central finite-difference gradient check helpers shared by the test suites.
pub mod gradcheck {
    use super::*;

    /// Largest relative error between the analytic gradient of `f` at `x` and a
    /// central finite difference, over every coordinate (or the first `limit`
    /// coordinates visited with stride `stride`).
    pub fn max_rel_error(x: &Tensor, f: impl for<'a> Fn(Var<'a>) -> Var<'a>, eps: f64, stride: usize) -> f64 {
        let tape = Tape::new();
        let v = tape.leaf(x.clone());
        let out = f(v);
        let grads = tape.backward(out);
        let analytic = grads.get_or_zeros(v);
        let eval = |t: Tensor| -> f64 {
            let tape = Tape::new();
            let v = tape.constant(t);
            f(v).item()
        };
        let mut worst: f64 = 0.0;
        for i in (0..x.len()).step_by(stride.max(1)) {
            let mut plus = x.clone();
            plus.data_mut()[i] += eps;
            let mut minus = x.clone();
            minus.data_mut()[i] -= eps;
            let numeric = (eval(plus) - eval(minus)) / (2.0 * eps);
            worst = worst.max(rel_error(analytic.data()[i], numeric));
        }
        worst
    }

    /// Symmetric relative error with an absolute floor so that near-zero
    /// gradients compare on an absolute scale.
    pub fn rel_error(a: f64, b: f64) -> f64 {
        (a - b).abs() / (a.abs().max(b.abs()).max(1e-6))
    }
}

#[cfg(test)]
mod tests {
    use super::gradcheck::max_rel_error;
    use super::*;

    fn probe(shape: &[usize], seed: u64) -> Tensor {
        let n: usize = shape.iter().product();
        let mut state = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        let data = (0..n)
            .map(|_| {
                state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((state >> 11) as f64 / (1u64 << 53) as f64) - 0.5
            })
            .collect();
        Tensor::new(shape, data)
    }

    fn konst<'a>(v: Var<'a>, t: Tensor) -> Var<'a> {
        v.tape.constant(t)
    }

    #[test]
    fn elementwise_and_dense_ops_match_finite_differences() {
        let x = probe(&[3, 4], 1);
        let w = probe(&[4, 5], 2);
        let b = probe(&[5], 3);
        let err = max_rel_error(
            &x,
            |v| {
                let w = konst(v, w.clone());
                let b = konst(v, b.clone());
                let h = v.matmul(w).add_row(b);
                h.elu().mul(h.sigmoid()).add(h.leaky_relu(0.2)).sum()
            },
            1e-6,
            1,
        );
        assert!(err < 1e-6, "{err}");
        let err = max_rel_error(
            &w,
            |v| {
                let x = konst(v, x.clone());
                x.matmul(v).relu().scale(0.3).add_scalar(1.0).mean()
            },
            1e-6,
            1,
        );
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn conv_ops_match_finite_differences() {
        let x = probe(&[2, 4, 4, 4], 4);
        let w = probe(&[3, 2, 3, 3, 3], 5);
        let b = probe(&[3], 6);
        let wt = probe(&[3, 2, 2, 2, 2], 7);
        let bt = probe(&[2], 8);
        fn net<'a>(x: Var<'a>, w: Var<'a>, b: Var<'a>, wt: Var<'a>, bt: Var<'a>) -> Var<'a> {
            let h = x.conv3d(w, b, 2, 1).elu();
            let u = h.conv_transpose_up2(wt, bt);
            let p = u.concat0(x).avg_pool2();
            p.global_avg_pool().sum().add(u.mul(u).mean())
        }
        let err = max_rel_error(
            &x,
            |v| {
                let t = v.tape;
                net(v, t.constant(w.clone()), t.constant(b.clone()), t.constant(wt.clone()), t.constant(bt.clone()))
            },
            1e-5,
            1,
        );
        assert!(err < 1e-5, "x: {err}");
        let err = max_rel_error(
            &w,
            |v| {
                let t = v.tape;
                net(t.constant(x.clone()), v, t.constant(b.clone()), t.constant(wt.clone()), t.constant(bt.clone()))
            },
            1e-5,
            1,
        );
        assert!(err < 1e-5, "w: {err}");
        let err = max_rel_error(
            &wt,
            |v| {
                let t = v.tape;
                net(t.constant(x.clone()), t.constant(w.clone()), t.constant(b.clone()), v, t.constant(bt.clone()))
            },
            1e-5,
            1,
        );
        assert!(err < 1e-5, "wt: {err}");
    }

    #[test]
    fn graph_ops_match_finite_differences() {
        let x = probe(&[4, 3], 9);
        let src = Rc::new(vec![0, 1, 2, 3, 1, 2, 0]);
        let dst = Rc::new(vec![0, 0, 1, 1, 2, 3, 3]);
        let err = max_rel_error(
            &x,
            |v| {
                let e = v.gather_rows(src.clone());
                let a = konst(v, probe(&[3, 1], 10));
                let score = e.matmul(a).reshape(&[7]);
                let alpha = score.segment_softmax(dst.clone(), 4);
                e.scale_rows(alpha).scatter_add_rows(dst.clone(), 4).elu().sum()
            },
            1e-6,
            1,
        );
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn losses_match_finite_differences() {
        let x = probe(&[1, 8, 8, 8], 11).map(|v| v + 0.5);
        let t = Rc::new(probe(&[8, 8, 8], 12).map(|v| v + 0.5));
        let err = max_rel_error(&x, |v| v.ssim3d(t.clone(), 7), 1e-6, 7);
        assert!(err < 1e-5, "ssim {err}");
        let err = max_rel_error(&x, |v| v.tv3d().add(v.l1(t.clone())).add(v.mse(t.clone())), 1e-5, 5);
        assert!(err < 1e-5, "tv/l1/mse {err}");
        let logits = probe(&[3, 2], 13);
        let labels = Rc::new(vec![1, 0, 1]);
        let err = max_rel_error(&logits, |v| v.softmax_cross_entropy(labels.clone()), 1e-6, 1);
        assert!(err < 1e-6, "ce {err}");
    }

    #[test]
    fn constants_do_not_record_backward() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::scalar(2.0));
        let b = tape.leaf(Tensor::scalar(3.0));
        let c = a.mul(a);
        assert!(!c.requires_grad());
        let d = c.mul(b);
        let g = tape.backward(d);
        assert!(g.get(a).is_none());
        assert_eq!(g.get(b).unwrap().item(), 4.0);
    }
}
