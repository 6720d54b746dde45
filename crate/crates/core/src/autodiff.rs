//! Reverse-mode automatic differentiation over dynamically shaped `f64` arrays.
//!
//! A [`Graph`] is a tape of operations built during a forward pass. Every op
//! returns a [`Var`] handle; [`Graph::backward`] walks the tape in reverse and
//! accumulates gradients for every node, including leaves registered with
//! [`Graph::input`]. All arithmetic is sequential `f64`, so results are
//! bit-reproducible for a given op order.

use ndarray::{Array2, ArrayD, Axis, Ix2, IxDyn};
use std::rc::Rc;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

type Sink<'a> = &'a mut dyn FnMut(usize, ArrayD<f64>);
type BackFn = Box<dyn Fn(&Graph, &ArrayD<f64>, Sink)>;

struct Node {
    value: ArrayD<f64>,
    back: Option<BackFn>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<ArrayD<f64>>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. `v`, if any path reached it.
    pub fn get(&self, v: Var) -> Option<&ArrayD<f64>> {
        self.grads[v.0].as_ref()
    }

    /// Gradient of `v`, or a zero array of the given shape when unreached.
    pub fn get_or_zero(&self, v: Var, shape: &[usize]) -> ArrayD<f64> {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => ArrayD::zeros(IxDyn(shape)),
        }
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn as2(a: &ArrayD<f64>) -> ndarray::ArrayView2<'_, f64> {
    a.view()
        .into_dimensionality::<Ix2>()
        .expect("expected rank-2 array")
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Value stored at `v`.
    pub fn value(&self, v: Var) -> &ArrayD<f64> {
        &self.nodes[v.0].value
    }

    /// Scalar value of a 0-d node.
    pub fn scalar_value(&self, v: Var) -> f64 {
        *self.nodes[v.0]
            .value
            .first()
            .expect("scalar node has one element")
    }

    fn push(&mut self, value: ArrayD<f64>, back: Option<BackFn>) -> Var {
        self.nodes.push(Node { value, back });
        Var(self.nodes.len() - 1)
    }

    /// Register a leaf. Gradients accumulate here and can be read after
    /// `backward`; use this for parameters and anything else that needs a grad.
    pub fn input(&mut self, value: ArrayD<f64>) -> Var {
        self.push(value, None)
    }

    /// Leaf that never needs a gradient (same as `input`; named for intent).
    pub fn constant(&mut self, value: ArrayD<f64>) -> Var {
        self.push(value, None)
    }

    /// 0-d constant.
    pub fn scalar(&mut self, v: f64) -> Var {
        self.constant(ArrayD::from_elem(IxDyn(&[]), v))
    }

    // ---- elementwise ----

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "add: shape mismatch");
        let out = va + vb;
        self.push(
            out,
            Some(Box::new(move |_g, dy, sink| {
                sink(a.0, dy.clone());
                sink(b.0, dy.clone());
            })),
        )
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "sub: shape mismatch");
        let out = va - vb;
        self.push(
            out,
            Some(Box::new(move |_g, dy, sink| {
                sink(a.0, dy.clone());
                sink(b.0, dy.mapv(|x| -x));
            })),
        )
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "mul: shape mismatch");
        let out = va * vb;
        self.push(
            out,
            Some(Box::new(move |g, dy, sink| {
                sink(a.0, dy * g.value(b));
                sink(b.0, dy * g.value(a));
            })),
        )
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).mapv(|x| x + c);
        self.push(
            out,
            Some(Box::new(move |_g, dy, sink| sink(a.0, dy.clone()))),
        )
    }

    pub fn mul_scalar(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).mapv(|x| x * c);
        self.push(
            out,
            Some(Box::new(move |_g, dy, sink| sink(a.0, dy.mapv(|x| x * c)))),
        )
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.mul(a, a)
    }

    // ---- activations ----

    pub fn silu(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(|x| x * sigmoid(x));
        self.push(
            out,
            Some(Box::new(move |g, dy, sink| {
                let x = g.value(a);
                let d = x.mapv(|x| {
                    let s = sigmoid(x);
                    s + x * s * (1.0 - s)
                });
                sink(a.0, dy * &d);
            })),
        )
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(|x| x.max(0.0));
        self.push(
            out,
            Some(Box::new(move |g, dy, sink| {
                let d = g.value(a).mapv(|x| if x > 0.0 { 1.0 } else { 0.0 });
                sink(a.0, dy * &d);
            })),
        )
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(sigmoid);
        let v = self.push(out, None);
        let own = v.0;
        self.nodes[v.0].back = Some(Box::new(move |g, dy, sink| {
            let y = &g.nodes[own].value;
            let d = y.mapv(|y| y * (1.0 - y));
            sink(a.0, dy * &d);
        }));
        v
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(softplus);
        self.push(
            out,
            Some(Box::new(move |g, dy, sink| {
                let d = g.value(a).mapv(sigmoid);
                sink(a.0, dy * &d);
            })),
        )
    }

    // ---- matrix ops (rank 2) ----

    /// `a (m,k) · b (k,n) -> (m,n)`
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = as2(self.value(a)).dot(&as2(self.value(b))).into_dyn();
        self.push(
            out,
            Some(Box::new(move |g, dy, sink| {
                let dy2 = as2(dy);
                let da = dy2.dot(&as2(g.value(b)).t());
                let db = as2(g.value(a)).t().dot(&dy2);
                sink(a.0, da.into_dyn());
                sink(b.0, db.into_dyn());
            })),
        )
    }

    /// `a (m,k) · b (n,k)ᵀ -> (m,n)`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let out = as2(self.value(a)).dot(&as2(self.value(b)).t()).into_dyn();
        self.push(
            out,
            Some(Box::new(move |g, dy, sink| {
                let dy2 = as2(dy);
                let da = dy2.dot(&as2(g.value(b)));
                let db = dy2.t().dot(&as2(g.value(a)));
                sink(a.0, da.into_dyn());
                sink(b.0, db.into_dyn());
            })),
        )
    }

    /// Broadcast-add a `(1,n)` row to every row of `a (m,n)`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let va = as2(self.value(a));
        let vr = as2(self.value(row));
        assert_eq!(vr.nrows(), 1, "add_row: row must be (1,n)");
        assert_eq!(va.ncols(), vr.ncols(), "add_row: width mismatch");
        let out = (&va + &vr.row(0)).into_dyn();
        self.push(
            out,
            Some(Box::new(move |_g, dy, sink| {
                sink(a.0, dy.clone());
                let dr = as2(dy).sum_axis(Axis(0)).insert_axis(Axis(0));
                sink(row.0, dr.into_dyn());
            })),
        )
    }

    /// Broadcast-multiply every row of `a (m,n)` by a `(1,n)` row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let va = as2(self.value(a));
        let vr = as2(self.value(row));
        assert_eq!(vr.nrows(), 1, "mul_row: row must be (1,n)");
        assert_eq!(va.ncols(), vr.ncols(), "mul_row: width mismatch");
        let out = (&va * &vr.row(0)).into_dyn();
        self.push(
            out,
            Some(Box::new(move |g, dy, sink| {
                let dy2 = as2(dy);
                let da = (&dy2 * &as2(g.value(row)).row(0)).into_dyn();
                sink(a.0, da);
                let prod = &dy2 * &as2(g.value(a));
                let dr = prod.sum_axis(Axis(0)).insert_axis(Axis(0));
                sink(row.0, dr.into_dyn());
            })),
        )
    }

    /// Row-wise layer normalization without affine parameters.
    pub fn layernorm_rows(&mut self, a: Var, eps: f64) -> Var {
        let va = as2(self.value(a));
        let n = va.ncols() as f64;
        let mut out = Array2::<f64>::zeros(va.raw_dim());
        for (i, r) in va.outer_iter().enumerate() {
            let mean = r.sum() / n;
            let var = r.fold(0.0, |acc, &x| acc + (x - mean) * (x - mean)) / n;
            let inv = 1.0 / (var + eps).sqrt();
            for (j, &x) in r.iter().enumerate() {
                out[[i, j]] = (x - mean) * inv;
            }
        }
        self.push(
            out.into_dyn(),
            Some(Box::new(move |g, dy, sink| {
                let x = as2(g.value(a));
                let dy2 = as2(dy);
                let n = x.ncols() as f64;
                let mut dx = Array2::<f64>::zeros(x.raw_dim());
                for i in 0..x.nrows() {
                    let r = x.row(i);
                    let mean = r.sum() / n;
                    let var = r.fold(0.0, |acc, &v| acc + (v - mean) * (v - mean)) / n;
                    let inv = 1.0 / (var + eps).sqrt();
                    let xhat: Vec<f64> = r.iter().map(|&v| (v - mean) * inv).collect();
                    let gy = dy2.row(i);
                    let mean_gy = gy.sum() / n;
                    let mean_gy_xhat =
                        gy.iter().zip(&xhat).map(|(&g, &h)| g * h).sum::<f64>() / n;
                    for j in 0..x.ncols() {
                        dx[[i, j]] = inv * (gy[j] - mean_gy - xhat[j] * mean_gy_xhat);
                    }
                }
                sink(a.0, dx.into_dyn());
            })),
        )
    }

    /// Row-wise softmax over the last axis of a rank-2 array.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let va = as2(self.value(a));
        let mut out = Array2::<f64>::zeros(va.raw_dim());
        for (i, r) in va.outer_iter().enumerate() {
            let max = r.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
            let mut denom = 0.0;
            for (j, &x) in r.iter().enumerate() {
                let e = (x - max).exp();
                out[[i, j]] = e;
                denom += e;
            }
            for j in 0..r.len() {
                out[[i, j]] /= denom;
            }
        }
        let v = self.push(out.into_dyn(), None);
        let own = v.0;
        self.nodes[v.0].back = Some(Box::new(move |g, dy, sink| {
            let y = as2(&g.nodes[own].value);
            let dy2 = as2(dy);
            let mut dx = Array2::<f64>::zeros(y.raw_dim());
            for i in 0..y.nrows() {
                let dot: f64 = y.row(i).iter().zip(dy2.row(i)).map(|(&a, &b)| a * b).sum();
                for j in 0..y.ncols() {
                    dx[[i, j]] = y[[i, j]] * (dy2[[i, j]] - dot);
                }
            }
            sink(a.0, dx.into_dyn());
        }));
        v
    }

    // ---- reductions ----

    /// Mean over every element, producing a 0-d scalar. Sequential
    /// row-major accumulation, bit-matching the plain loss oracles.
    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let out = ArrayD::from_elem(IxDyn(&[]), self.value(a).iter().sum::<f64>() / n);
        self.push(
            out,
            Some(Box::new(move |g, dy, sink| {
                let d = *dy.first().unwrap() / g.value(a).len() as f64;
                sink(a.0, ArrayD::from_elem(g.value(a).raw_dim(), d));
            })),
        )
    }

    /// Sum over every element, producing a 0-d scalar. Sequential
    /// row-major accumulation, bit-matching the plain loss oracles.
    pub fn sum_all(&mut self, a: Var) -> Var {
        let out = ArrayD::from_elem(IxDyn(&[]), self.value(a).iter().sum::<f64>());
        self.push(
            out,
            Some(Box::new(move |g, dy, sink| {
                let d = *dy.first().unwrap();
                sink(a.0, ArrayD::from_elem(g.value(a).raw_dim(), d));
            })),
        )
    }

    /// Mean over rows of `a (m,n)`, producing `(1,n)`.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let va = as2(self.value(a));
        let m = va.nrows() as f64;
        let out = (va.sum_axis(Axis(0)) / m).insert_axis(Axis(0));
        self.push(
            out.into_dyn(),
            Some(Box::new(move |g, dy, sink| {
                let va = as2(g.value(a));
                let m = va.nrows() as f64;
                let row = as2(dy).row(0).mapv(|x| x / m);
                let mut da = Array2::<f64>::zeros(va.raw_dim());
                for mut r in da.outer_iter_mut() {
                    r.assign(&row);
                }
                sink(a.0, da.into_dyn());
            })),
        )
    }

    // ---- structure ops ----

    /// Columns `[from, to)` of a rank-2 array.
    pub fn slice_cols(&mut self, a: Var, from: usize, to: usize) -> Var {
        let va = as2(self.value(a));
        assert!(from < to && to <= va.ncols(), "slice_cols: bad range");
        let out = va.slice(ndarray::s![.., from..to]).to_owned().into_dyn();
        self.push(
            out,
            Some(Box::new(move |g, dy, sink| {
                let va = as2(g.value(a));
                let mut da = Array2::<f64>::zeros(va.raw_dim());
                da.slice_mut(ndarray::s![.., from..to]).assign(&as2(dy));
                sink(a.0, da.into_dyn());
            })),
        )
    }

    /// Concatenate rank-2 arrays along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let rows = as2(self.value(parts[0])).nrows();
        let widths: Vec<usize> = parts.iter().map(|&p| as2(self.value(p)).ncols()).collect();
        let total: usize = widths.iter().sum();
        let mut out = Array2::<f64>::zeros((rows, total));
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            out.slice_mut(ndarray::s![.., off..off + w])
                .assign(&as2(self.value(p)));
            off += w;
        }
        let parts: Vec<usize> = parts.iter().map(|p| p.0).collect();
        self.push(
            out.into_dyn(),
            Some(Box::new(move |_g, dy, sink| {
                let dy2 = as2(dy);
                let mut off = 0;
                for (&p, &w) in parts.iter().zip(&widths) {
                    let slice = dy2.slice(ndarray::s![.., off..off + w]).to_owned();
                    sink(p, slice.into_dyn());
                    off += w;
                }
            })),
        )
    }

    /// Concatenate arrays of identical trailing shape along axis 0.
    pub fn concat_first(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let out = ndarray::concatenate(Axis(0), &views).expect("concat_first: shape mismatch");
        let lens: Vec<usize> = parts.iter().map(|&p| self.value(p).shape()[0]).collect();
        let parts: Vec<usize> = parts.iter().map(|p| p.0).collect();
        self.push(
            out,
            Some(Box::new(move |_g, dy, sink| {
                let mut off = 0;
                for (&p, &l) in parts.iter().zip(&lens) {
                    let piece = dy
                        .slice_axis(Axis(0), ndarray::Slice::from(off..off + l))
                        .to_owned();
                    sink(p, piece);
                    off += l;
                }
            })),
        )
    }

    /// Reshape preserving element order.
    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let old_shape: Vec<usize> = self.value(a).shape().to_vec();
        let out = self
            .value(a)
            .clone()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape: element count mismatch");
        self.push(
            out,
            Some(Box::new(move |_g, dy, sink| {
                let back = dy
                    .clone()
                    .into_shape_with_order(IxDyn(&old_shape))
                    .expect("reshape back");
                sink(a.0, back);
            })),
        )
    }

    /// Permute axes; gradient applies the inverse permutation.
    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Var {
        let out = self
            .value(a)
            .view()
            .permuted_axes(IxDyn(perm))
            .as_standard_layout()
            .to_owned();
        let mut inverse = vec![0usize; perm.len()];
        for (i, &p) in perm.iter().enumerate() {
            inverse[p] = i;
        }
        self.push(
            out,
            Some(Box::new(move |_g, dy, sink| {
                let back = dy
                    .view()
                    .permuted_axes(IxDyn(&inverse))
                    .as_standard_layout()
                    .to_owned();
                sink(a.0, back);
            })),
        )
    }

    /// Gather rows of `table (V,C)` by index, producing `(ids.len(), C)`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Var {
        let vt = as2(self.value(table));
        let c = vt.ncols();
        let mut out = Array2::<f64>::zeros((ids.len(), c));
        for (i, &id) in ids.iter().enumerate() {
            out.row_mut(i).assign(&vt.row(id));
        }
        let ids: Rc<Vec<usize>> = Rc::new(ids.to_vec());
        self.push(
            out.into_dyn(),
            Some(Box::new(move |g, dy, sink| {
                let vt = as2(g.value(table));
                let mut dt = Array2::<f64>::zeros(vt.raw_dim());
                let dy2 = as2(dy);
                for (i, &id) in ids.iter().enumerate() {
                    let mut row = dt.row_mut(id);
                    row += &dy2.row(i);
                }
                sink(table.0, dt.into_dyn());
            })),
        )
    }

    /// Unfold a `(c,h,w)` array into convolution columns `(c*k*k, oh*ow)`
    /// using replicate (edge-clamp) padding and the given stride.
    pub fn im2col(&mut self, a: Var, k: usize, stride: usize) -> Var {
        let shape = self.value(a).shape().to_vec();
        assert_eq!(shape.len(), 3, "im2col expects (c,h,w)");
        let (c, h, w) = (shape[0], shape[1], shape[2]);
        let pad = k / 2;
        let oh = h.div_ceil(stride);
        let ow = w.div_ceil(stride);
        // index map from column entries to flat source indices
        let mut idx = Vec::with_capacity(c * k * k * oh * ow);
        for ci in 0..c {
            for ky in 0..k {
                for kx in 0..k {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let sy = (oy * stride + ky).saturating_sub(pad).min(h - 1);
                            let sx = (ox * stride + kx).saturating_sub(pad).min(w - 1);
                            idx.push(ci * h * w + sy * w + sx);
                        }
                    }
                }
            }
        }
        let src = self.value(a).as_slice().expect("im2col: standard layout");
        let data: Vec<f64> = idx.iter().map(|&i| src[i]).collect();
        let out = ArrayD::from_shape_vec(IxDyn(&[c * k * k, oh * ow]), data).unwrap();
        let idx = Rc::new(idx);
        let numel = c * h * w;
        self.push(
            out,
            Some(Box::new(move |_g, dy, sink| {
                let dys = dy.as_slice().expect("grad standard layout");
                let mut da = vec![0.0f64; numel];
                for (e, &i) in idx.iter().enumerate() {
                    da[i] += dys[e];
                }
                let da = ArrayD::from_shape_vec(IxDyn(&[c, h, w]), da).unwrap();
                sink(a.0, da);
            })),
        )
    }

    /// Nearest-neighbor 2x upsample of a `(c,h,w)` array.
    pub fn upsample2(&mut self, a: Var) -> Var {
        let shape = self.value(a).shape().to_vec();
        assert_eq!(shape.len(), 3, "upsample2 expects (c,h,w)");
        let (c, h, w) = (shape[0], shape[1], shape[2]);
        let va = self.value(a);
        let mut out = ArrayD::<f64>::zeros(IxDyn(&[c, 2 * h, 2 * w]));
        for ci in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let v = va[[ci, y, x]];
                    out[[ci, 2 * y, 2 * x]] = v;
                    out[[ci, 2 * y, 2 * x + 1]] = v;
                    out[[ci, 2 * y + 1, 2 * x]] = v;
                    out[[ci, 2 * y + 1, 2 * x + 1]] = v;
                }
            }
        }
        self.push(
            out,
            Some(Box::new(move |_g, dy, sink| {
                let mut da = ArrayD::<f64>::zeros(IxDyn(&[c, h, w]));
                for ci in 0..c {
                    for y in 0..h {
                        for x in 0..w {
                            da[[ci, y, x]] = dy[[ci, 2 * y, 2 * x]]
                                + dy[[ci, 2 * y, 2 * x + 1]]
                                + dy[[ci, 2 * y + 1, 2 * x]]
                                + dy[[ci, 2 * y + 1, 2 * x + 1]];
                        }
                    }
                }
                sink(a.0, da);
            })),
        )
    }

    /// Rearrange `(r*r, h, w)` channel blocks into a `(1, h*r, w*r)` map.
    pub fn depth_to_space(&mut self, a: Var, r: usize) -> Var {
        let shape = self.value(a).shape().to_vec();
        assert_eq!(shape.len(), 3);
        assert_eq!(shape[0], r * r, "depth_to_space: channel count must be r*r");
        let (h, w) = (shape[1], shape[2]);
        let va = self.value(a);
        let mut out = ArrayD::<f64>::zeros(IxDyn(&[1, h * r, w * r]));
        for dy_ in 0..r {
            for dx in 0..r {
                let ch = dy_ * r + dx;
                for y in 0..h {
                    for x in 0..w {
                        out[[0, y * r + dy_, x * r + dx]] = va[[ch, y, x]];
                    }
                }
            }
        }
        self.push(
            out,
            Some(Box::new(move |_g, dyn_grad, sink| {
                let mut da = ArrayD::<f64>::zeros(IxDyn(&[r * r, h, w]));
                for dy_ in 0..r {
                    for dx in 0..r {
                        let ch = dy_ * r + dx;
                        for y in 0..h {
                            for x in 0..w {
                                da[[ch, y, x]] = dyn_grad[[0, y * r + dy_, x * r + dx]];
                            }
                        }
                    }
                }
                sink(a.0, da);
            })),
        )
    }

    /// Backpropagate from a scalar `loss` node through the whole tape.
    pub fn backward(&self, loss: Var) -> Gradients {
        let mut grads: Vec<Option<ArrayD<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(ArrayD::from_elem(self.nodes[loss.0].value.raw_dim(), 1.0));
        for i in (0..=loss.0).rev() {
            let Some(gy) = grads[i].take() else { continue };
            if let Some(back) = &self.nodes[i].back {
                // split borrow: parents always precede children on the tape
                let (head, _) = grads.split_at_mut(i);
                let mut sink = |pid: usize, delta: ArrayD<f64>| {
                    debug_assert!(pid < i, "tape order violated");
                    match &mut head[pid] {
                        Some(acc) => *acc += &delta,
                        slot @ None => *slot = Some(delta),
                    }
                };
                back(self, &gy, &mut sink);
            } else {
                grads[i] = Some(gy); // leaf: keep accumulated gradient
            }
        }
        Gradients { grads }
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        (1.0 + x.exp()).ln()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::IxDyn;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_arr(rng: &mut ChaCha8Rng, shape: &[usize]) -> ArrayD<f64> {
        ArrayD::from_shape_fn(IxDyn(shape), |_| rng.random::<f64>() * 2.0 - 1.0)
    }

    /// Central finite differences on every input, compared to tape gradients.
    fn check_grads(
        shapes: &[&[usize]],
        f: impl Fn(&mut Graph, &[Var]) -> Var,
        seed: u64,
        tol: f64,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs: Vec<ArrayD<f64>> = shapes.iter().map(|s| rand_arr(&mut rng, s)).collect();

        let eval = |inputs: &[ArrayD<f64>]| -> f64 {
            let mut g = Graph::new();
            let vars: Vec<Var> = inputs.iter().map(|a| g.input(a.clone())).collect();
            let out = f(&mut g, &vars);
            g.scalar_value(out)
        };

        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|a| g.input(a.clone())).collect();
        let out = f(&mut g, &vars);
        let grads = g.backward(out);

        let h = 1e-5;
        for (k, base) in inputs.iter().enumerate() {
            let ad = grads.get_or_zero(vars[k], base.shape());
            for flat in 0..base.len() {
                let mut plus = inputs.to_vec();
                let mut minus = inputs.to_vec();
                plus[k].as_slice_mut().unwrap()[flat] += h;
                minus[k].as_slice_mut().unwrap()[flat] -= h;
                let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let a = ad.as_slice().unwrap()[flat];
                let denom = a.abs().max(fd.abs()).max(1e-6);
                assert!(
                    (a - fd).abs() / denom < tol,
                    "input {k} flat {flat}: ad={a} fd={fd}"
                );
            }
        }
    }

    #[test]
    fn elementwise_grads() {
        check_grads(
            &[&[3, 4], &[3, 4]],
            |g, v| {
                let s = g.add(v[0], v[1]);
                let p = g.mul(s, v[0]);
                let d = g.sub(p, v[1]);
                let sc = g.mul_scalar(d, 1.7);
                let sc = g.add_scalar(sc, 0.3);
                g.mean_all(sc)
            },
            1,
            1e-5,
        );
    }

    #[test]
    fn activation_grads() {
        check_grads(
            &[&[5, 3]],
            |g, v| {
                let a = g.silu(v[0]);
                let b = g.relu(a);
                let c = g.sigmoid(b);
                let d = g.softplus(c);
                g.sum_all(d)
            },
            2,
            1e-4,
        );
    }

    #[test]
    fn matmul_grads() {
        check_grads(
            &[&[3, 4], &[4, 2], &[5, 4]],
            |g, v| {
                let ab = g.matmul(v[0], v[1]); // 3x2
                let an = g.matmul_nt(v[0], v[2]); // 3x5
                let m1 = g.mean_all(ab);
                let m2 = g.mean_all(an);
                g.add(m1, m2)
            },
            3,
            1e-5,
        );
    }

    #[test]
    fn row_broadcast_grads() {
        check_grads(
            &[&[4, 3], &[1, 3], &[1, 3]],
            |g, v| {
                let a = g.add_row(v[0], v[1]);
                let b = g.mul_row(a, v[2]);
                g.mean_all(b)
            },
            4,
            1e-5,
        );
    }

    #[test]
    fn norm_softmax_grads() {
        check_grads(
            &[&[4, 6]],
            |g, v| {
                let n = g.layernorm_rows(v[0], 1e-5);
                let s = g.softmax_rows(n);
                let sq = g.square(s);
                g.sum_all(sq)
            },
            5,
            1e-4,
        );
    }

    #[test]
    fn structure_grads() {
        check_grads(
            &[&[4, 6], &[4, 2]],
            |g, v| {
                let s = g.slice_cols(v[0], 1, 4);
                let c = g.concat_cols(&[s, v[1]]);
                let r = g.reshape(c, &[2, 10]);
                let p = g.permute(r, &[1, 0]);
                let m = g.mean_rows(p);
                g.sum_all(m)
            },
            6,
            1e-5,
        );
    }

    #[test]
    fn conv_ops_grads() {
        check_grads(
            &[&[2, 4, 4], &[3, 2 * 9]],
            |g, v| {
                let cols = g.im2col(v[0], 3, 1); // (2*9, 16)
                let conv = g.matmul(v[1], cols); // (3, 16)
                let img = g.reshape(conv, &[3, 4, 4]);
                let up = g.upsample2(img);
                g.mean_all(up)
            },
            7,
            1e-5,
        );
    }

    #[test]
    fn strided_im2col_grads() {
        check_grads(
            &[&[2, 6, 6], &[4, 2 * 9]],
            |g, v| {
                let cols = g.im2col(v[0], 3, 2); // (18, 9)
                let conv = g.matmul(v[1], cols);
                g.mean_all(conv)
            },
            8,
            1e-5,
        );
    }

    #[test]
    fn depth_to_space_grads() {
        check_grads(
            &[&[4, 3, 3]],
            |g, v| {
                let d = g.depth_to_space(v[0], 2);
                let sq = g.square(d);
                g.sum_all(sq)
            },
            9,
            1e-5,
        );
    }

    #[test]
    fn embedding_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let table = rand_arr(&mut rng, &[5, 3]);
        let ids = vec![1usize, 4, 1];

        let eval = |t: &ArrayD<f64>| -> f64 {
            let mut g = Graph::new();
            let tv = g.input(t.clone());
            let e = g.embedding(tv, &ids);
            let sq = g.square(e);
            let out = g.sum_all(sq);
            g.scalar_value(out)
        };
        let mut g = Graph::new();
        let tv = g.input(table.clone());
        let e = g.embedding(tv, &ids);
        let sq = g.square(e);
        let out = g.sum_all(sq);
        let grads = g.backward(out);
        let ad = grads.get(tv).unwrap().clone();

        let h = 1e-5;
        for flat in 0..table.len() {
            let mut plus = table.clone();
            let mut minus = table.clone();
            plus.as_slice_mut().unwrap()[flat] += h;
            minus.as_slice_mut().unwrap()[flat] -= h;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let a = ad.as_slice().unwrap()[flat];
            assert!((a - fd).abs() < 1e-6, "flat {flat}: ad={a} fd={fd}");
        }
    }

    #[test]
    fn concat_first_grads() {
        check_grads(
            &[&[2, 3, 3], &[1, 3, 3]],
            |g, v| {
                let c = g.concat_first(&[v[0], v[1]]);
                let sq = g.square(c);
                g.mean_all(sq)
            },
            11,
            1e-5,
        );
    }

    #[test]
    fn fan_out_accumulates() {
        // y = x*x + x used twice: dy/dx = 2x + 1
        let mut g = Graph::new();
        let x = g.input(ArrayD::from_elem(IxDyn(&[1]), 3.0));
        let sq = g.mul(x, x);
        let y = g.add(sq, x);
        let s = g.sum_all(y);
        let grads = g.backward(s);
        let got = grads.get(x).unwrap().as_slice().unwrap()[0];
        assert!((got - 7.0).abs() < 1e-12);
    }

    #[test]
    fn forward_is_deterministic() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(42);
            let a = rand_arr(&mut rng, &[8, 8]);
            let b = rand_arr(&mut rng, &[8, 8]);
            let mut g = Graph::new();
            let av = g.input(a);
            let bv = g.input(b);
            let mm = g.matmul(av, bv);
            let sm = g.softmax_rows(mm);
            let out = g.mean_all(sm);
            g.scalar_value(out)
        };
        assert_eq!(run().to_bits(), run().to_bits());
    }
}
