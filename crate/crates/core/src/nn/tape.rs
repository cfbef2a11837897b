//! Reverse-mode differentiation over a linear tape.
//!
//! Spatial activations live in channel-major `[C, N, H, W]` layout so a
//! convolution is one im2col followed by one gemm with no transposes, and
//! channel concatenation is a contiguous append.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, ArrayD, ArrayView2, Axis, IxDyn};

use crate::scalar::Scalar;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op<T> {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeom,
        cols: Option<Array2<T>>,
    },
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    Add(Var, Var),
    AddChannel {
        x: Var,
        e: Var,
    },
    Film {
        x: Var,
        e: Var,
    },
    Silu(Var),
    Concat(Var, Var),
    Upsample2(Var),
    Scale(Var, T),
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    Reshape(Var),
    Mse {
        pred: Var,
        diff: ArrayD<T>,
        weight: Option<ArrayD<T>>,
        denom: T,
    },
    CrossEntropy {
        logits: Var,
        probs: ArrayD<T>,
        labels: Vec<usize>,
    },
}

struct Node<T> {
    value: ArrayD<T>,
    op: Op<T>,
    requires_grad: bool,
}

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    c_in: usize,
    n: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn new(shape: &[usize], k: usize, stride: usize, pad: usize) -> Self {
        let (c_in, n, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        assert!(
            h + 2 * pad >= k && w + 2 * pad >= k,
            "kernel larger than padded input"
        );
        ConvGeom {
            c_in,
            n,
            h,
            w,
            k,
            stride,
            pad,
            ho: (h + 2 * pad - k) / stride + 1,
            wo: (w + 2 * pad - k) / stride + 1,
        }
    }

    fn rows(&self) -> usize {
        self.c_in * self.k * self.k
    }

    fn cols(&self) -> usize {
        self.n * self.ho * self.wo
    }
}

fn im2col<T: Scalar>(x: &[T], g: &ConvGeom) -> Array2<T> {
    let mut cols = Array2::<T>::zeros((g.rows(), g.cols()));
    let out = cols.as_slice_mut().unwrap();
    let plane = g.h * g.w;
    let ncols = g.cols();
    for c in 0..g.c_in {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let dst = &mut out[row * ncols..(row + 1) * ncols];
                for n in 0..g.n {
                    let src = &x[(c * g.n + n) * plane..(c * g.n + n + 1) * plane];
                    for oy in 0..g.ho {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        let base = (n * g.ho + oy) * g.wo;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let srow = &src[iy as usize * g.w..(iy as usize + 1) * g.w];
                        for ox in 0..g.wo {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.w as isize {
                                dst[base + ox] = srow[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im<T: Scalar>(cols: &Array2<T>, g: &ConvGeom) -> Vec<T> {
    let mut x = vec![T::zero(); g.c_in * g.n * g.h * g.w];
    let src = cols.as_slice().unwrap();
    let plane = g.h * g.w;
    let ncols = g.cols();
    for c in 0..g.c_in {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let s = &src[row * ncols..(row + 1) * ncols];
                for n in 0..g.n {
                    let dst = &mut x[(c * g.n + n) * plane..(c * g.n + n + 1) * plane];
                    for oy in 0..g.ho {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let base = (n * g.ho + oy) * g.wo;
                        for ox in 0..g.wo {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.w as isize {
                                dst[iy as usize * g.w + ix as usize] =
                                    dst[iy as usize * g.w + ix as usize] + s[base + ox];
                            }
                        }
                    }
                }
            }
        }
    }
    x
}

#[inline]
fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

fn as_2d<T: Scalar>(a: &ArrayD<T>, rows: usize, cols: usize) -> ArrayView2<'_, T> {
    a.view()
        .into_shape_with_order((rows, cols))
        .expect("contiguous tensor")
}

/// Records operations and replays them backwards for gradients.
pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    fn push(&mut self, value: ArrayD<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &ArrayD<T> {
        &self.nodes[v.0].value
    }

    pub fn leaf(&mut self, value: ArrayD<T>, requires_grad: bool) -> Var {
        let value = value.as_standard_layout().into_owned();
        self.push(value, Op::Leaf, requires_grad)
    }

    /// `x: [C, N, H, W]`, `w: [O, C, k, k]`, `b: [O]` → `[O, N, Ho, Wo]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Var {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        assert_eq!(xs.len(), 4, "conv2d input must be rank 4");
        assert_eq!(ws[1], xs[0], "conv2d channel mismatch");
        let g = ConvGeom::new(&xs, ws[2], stride, pad);
        let o = ws[0];
        let cols = im2col(self.value(x).as_slice().unwrap(), &g);
        let w2 = as_2d(self.value(w), o, g.rows());
        let mut y = Array2::<T>::zeros((o, g.cols()));
        general_mat_mul(T::one(), &w2, &cols, T::zero(), &mut y);
        let bias = self.value(b).as_slice().unwrap();
        for (mut row, &bv) in y.axis_iter_mut(Axis(0)).zip(bias) {
            row.mapv_inplace(|v| v + bv);
        }
        let y = y
            .into_shape_with_order(IxDyn(&[o, g.n, g.ho, g.wo]))
            .unwrap();
        let needs = self.rg(x) || self.rg(w) || self.rg(b);
        let cols = if self.rg(w) { Some(cols) } else { None };
        self.push(
            y,
            Op::Conv2d {
                x,
                w,
                b,
                geom: g,
                cols,
            },
            needs,
        )
    }

    /// `x: [N, I]`, `w: [O, I]`, `b: [O]` → `[N, O]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        assert_eq!(xs[1], ws[1], "linear width mismatch");
        let x2 = as_2d(self.value(x), xs[0], xs[1]);
        let w2 = as_2d(self.value(w), ws[0], ws[1]);
        let mut y = x2.dot(&w2.t());
        let bias = self.value(b).as_slice().unwrap();
        for mut row in y.axis_iter_mut(Axis(0)) {
            for (v, &bv) in row.iter_mut().zip(bias) {
                *v = *v + bv;
            }
        }
        let needs = self.rg(x) || self.rg(w) || self.rg(b);
        self.push(y.into_dyn(), Op::Linear { x, w, b }, needs)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(
            self.value(a).shape(),
            self.value(b).shape(),
            "add shape mismatch"
        );
        let y = self.value(a) + self.value(b);
        let needs = self.rg(a) || self.rg(b);
        self.push(y, Op::Add(a, b), needs)
    }

    /// Adds a per-(sample, channel) bias `e: [N, C]` to `x: [C, N, H, W]`.
    pub fn add_channel(&mut self, x: Var, e: Var) -> Var {
        let xs = self.value(x).shape().to_vec();
        let es = self.value(e).shape().to_vec();
        assert_eq!(
            (es[0], es[1]),
            (xs[1], xs[0]),
            "channel bias shape mismatch"
        );
        let plane = xs[2] * xs[3];
        let mut y = self.value(x).clone();
        {
            let ev = self.value(e).as_slice().unwrap();
            let ys = y.as_slice_mut().unwrap();
            for c in 0..xs[0] {
                for n in 0..xs[1] {
                    let bv = ev[n * xs[0] + c];
                    for v in &mut ys[(c * xs[1] + n) * plane..(c * xs[1] + n + 1) * plane] {
                        *v = *v + bv;
                    }
                }
            }
        }
        let needs = self.rg(x) || self.rg(e);
        self.push(y, Op::AddChannel { x, e }, needs)
    }

    /// `x · (1 + s) + b` per sample and channel, with `e = [s | b]` of shape
    /// `[N, 2C]`.
    pub fn film(&mut self, x: Var, e: Var) -> Var {
        let xs = self.value(x).shape().to_vec();
        let es = self.value(e).shape().to_vec();
        assert_eq!((es[0], es[1]), (xs[1], 2 * xs[0]), "film shape mismatch");
        let (c, n, plane) = (xs[0], xs[1], xs[2] * xs[3]);
        let mut y = self.value(x).clone();
        {
            let ev = self.value(e).as_slice().unwrap();
            let ys = y.as_slice_mut().unwrap();
            for ci in 0..c {
                for ni in 0..n {
                    let g = T::one() + ev[ni * 2 * c + ci];
                    let b = ev[ni * 2 * c + c + ci];
                    for v in &mut ys[(ci * n + ni) * plane..(ci * n + ni + 1) * plane] {
                        *v = *v * g + b;
                    }
                }
            }
        }
        let needs = self.rg(x) || self.rg(e);
        self.push(y, Op::Film { x, e }, needs)
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let y = self.value(x).mapv(|v| v * sigmoid(v));
        let needs = self.rg(x);
        self.push(y, Op::Silu(x), needs)
    }

    /// Concatenates along the leading (channel) axis.
    pub fn concat(&mut self, a: Var, b: Var) -> Var {
        let y = ndarray::concatenate(Axis(0), &[self.value(a).view(), self.value(b).view()])
            .expect("concat shape mismatch")
            .as_standard_layout()
            .into_owned();
        let needs = self.rg(a) || self.rg(b);
        self.push(y, Op::Concat(a, b), needs)
    }

    /// Nearest-neighbour ×2 upsampling of `[C, N, H, W]`.
    pub fn upsample2(&mut self, x: Var) -> Var {
        let xs = self.value(x).shape().to_vec();
        let (h, w) = (xs[2], xs[3]);
        let planes = xs[0] * xs[1];
        let src = self.value(x).as_slice().unwrap();
        let mut out = vec![T::zero(); planes * 4 * h * w];
        for p in 0..planes {
            let s = &src[p * h * w..(p + 1) * h * w];
            let d = &mut out[p * 4 * h * w..(p + 1) * 4 * h * w];
            for y in 0..2 * h {
                for x in 0..2 * w {
                    d[y * 2 * w + x] = s[(y / 2) * w + x / 2];
                }
            }
        }
        let y = ArrayD::from_shape_vec(IxDyn(&[xs[0], xs[1], 2 * h, 2 * w]), out).unwrap();
        let needs = self.rg(x);
        self.push(y, Op::Upsample2(x), needs)
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let y = self.value(x).mapv(|v| v * c);
        let needs = self.rg(x);
        self.push(y, Op::Scale(x, c), needs)
    }

    /// Row lookup `table: [V, E]` → `[ids.len(), E]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Var {
        let t = self.value(table);
        let e = t.shape()[1];
        let mut y = ArrayD::<T>::zeros(IxDyn(&[ids.len(), e]));
        for (n, &id) in ids.iter().enumerate() {
            y.index_axis_mut(Axis(0), n)
                .assign(&t.index_axis(Axis(0), id));
        }
        let needs = self.rg(table);
        self.push(
            y,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            needs,
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let y = self
            .value(x)
            .clone()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape size mismatch");
        let needs = self.rg(x);
        self.push(y, Op::Reshape(x), needs)
    }

    /// Mean squared error against a constant target, optionally weighted
    /// per element. The weighted form divides by the weight sum.
    pub fn mse(&mut self, pred: Var, target: &ArrayD<T>, weight: Option<&ArrayD<T>>) -> Var {
        assert_eq!(
            self.value(pred).shape(),
            target.shape(),
            "mse shape mismatch"
        );
        let diff = self.value(pred) - target;
        let (sum, denom) = match weight {
            Some(wt) => {
                let s: T = diff.iter().zip(wt.iter()).map(|(&d, &w)| w * d * d).sum();
                let ws: T = wt.iter().copied().sum();
                (s, ws.max(T::one()))
            }
            None => (diff.iter().map(|&d| d * d).sum(), T::lit(diff.len() as f64)),
        };
        let y = ArrayD::from_elem(IxDyn(&[1]), sum / denom);
        let needs = self.rg(pred);
        self.push(
            y,
            Op::Mse {
                pred,
                diff,
                weight: weight.cloned(),
                denom,
            },
            needs,
        )
    }

    /// Mean pixel cross-entropy of `logits: [K, N, H, W]` against class
    /// indices laid out `[N, H, W]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Var {
        let ls = self.value(logits).shape().to_vec();
        let k = ls[0];
        let m = ls[1] * ls[2] * ls[3];
        assert_eq!(labels.len(), m, "label count mismatch");
        let lv = as_2d(self.value(logits), k, m);
        let mut probs = Array2::<T>::zeros((k, m));
        let mut total = T::zero();
        for j in 0..m {
            let col = lv.column(j);
            let mx = col.iter().copied().fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for c in 0..k {
                let e = (col[c] - mx).exp();
                probs[[c, j]] = e;
                z = z + e;
            }
            for c in 0..k {
                probs[[c, j]] = probs[[c, j]] / z;
            }
            total = total + (z.ln() + mx - col[labels[j]]);
        }
        let y = ArrayD::from_elem(IxDyn(&[1]), total / T::lit(m as f64));
        let needs = self.rg(logits);
        self.push(
            y,
            Op::CrossEntropy {
                logits,
                probs: probs.into_dyn(),
                labels: labels.to_vec(),
            },
            needs,
        )
    }

    /// Back-propagates from scalar `loss`; returns gradients per node.
    pub fn backward(&self, loss: Var) -> Gradients<T> {
        let mut grads: Vec<Option<ArrayD<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(ArrayD::from_elem(self.value(loss).raw_dim(), T::one()));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            self.propagate(&node.op, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    fn propagate(&self, op: &Op<T>, g: &ArrayD<T>, grads: &mut [Option<ArrayD<T>>]) {
        let mut acc = |v: Var, d: ArrayD<T>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => *existing += &d,
                slot => *slot = Some(d),
            }
        };
        match op {
            Op::Leaf => {}
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                cols,
            } => {
                let o = self.value(*w).shape()[0];
                let dy = as_2d(g, o, geom.cols());
                if self.rg(*b) {
                    acc(*b, dy.sum_axis(Axis(1)).into_dyn());
                }
                if self.rg(*w) {
                    let cols = cols.as_ref().expect("cols retained for weight grad");
                    let mut dw = Array2::<T>::zeros((o, geom.rows()));
                    general_mat_mul(T::one(), &dy, &cols.t(), T::zero(), &mut dw);
                    let shape = self.value(*w).raw_dim();
                    acc(*w, dw.into_shape_with_order(shape).unwrap());
                }
                if self.rg(*x) {
                    let w2 = as_2d(self.value(*w), o, geom.rows());
                    let mut dcols = Array2::<T>::zeros((geom.rows(), geom.cols()));
                    general_mat_mul(T::one(), &w2.t(), &dy, T::zero(), &mut dcols);
                    let dx = col2im(&dcols, geom);
                    acc(
                        *x,
                        ArrayD::from_shape_vec(self.value(*x).raw_dim(), dx).unwrap(),
                    );
                }
            }
            Op::Linear { x, w, b } => {
                let gs = g.shape();
                let dy = as_2d(g, gs[0], gs[1]);
                if self.rg(*b) {
                    acc(*b, dy.sum_axis(Axis(0)).into_dyn());
                }
                if self.rg(*w) {
                    let xs = self.value(*x).shape();
                    let x2 = as_2d(self.value(*x), xs[0], xs[1]);
                    acc(*w, dy.t().dot(&x2).into_dyn());
                }
                if self.rg(*x) {
                    let ws = self.value(*w).shape();
                    let w2 = as_2d(self.value(*w), ws[0], ws[1]);
                    acc(*x, dy.dot(&w2).into_dyn());
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::AddChannel { x, e } => {
                acc(*x, g.clone());
                if self.rg(*e) {
                    let s = g.shape();
                    let (c, n, plane) = (s[0], s[1], s[2] * s[3]);
                    let gv = g.as_slice().unwrap();
                    let mut de = Array2::<T>::zeros((n, c));
                    for ci in 0..c {
                        for ni in 0..n {
                            let start = (ci * n + ni) * plane;
                            de[[ni, ci]] = gv[start..start + plane].iter().copied().sum();
                        }
                    }
                    acc(*e, de.into_dyn());
                }
            }
            Op::Film { x, e } => {
                let s = g.shape();
                let (c, n, plane) = (s[0], s[1], s[2] * s[3]);
                let gv = g.as_slice().unwrap();
                let ev = self.value(*e).as_slice().unwrap();
                if self.rg(*x) {
                    let mut dx = g.clone();
                    let dv = dx.as_slice_mut().unwrap();
                    for ci in 0..c {
                        for ni in 0..n {
                            let k = T::one() + ev[ni * 2 * c + ci];
                            for v in &mut dv[(ci * n + ni) * plane..(ci * n + ni + 1) * plane] {
                                *v = *v * k;
                            }
                        }
                    }
                    acc(*x, dx);
                }
                if self.rg(*e) {
                    let xv = self.value(*x).as_slice().unwrap();
                    let mut de = Array2::<T>::zeros((n, 2 * c));
                    for ci in 0..c {
                        for ni in 0..n {
                            let r = (ci * n + ni) * plane..(ci * n + ni + 1) * plane;
                            let (mut ds, mut db) = (T::zero(), T::zero());
                            for (&gi, &xi) in gv[r.clone()].iter().zip(&xv[r]) {
                                ds += gi * xi;
                                db += gi;
                            }
                            de[[ni, ci]] = ds;
                            de[[ni, c + ci]] = db;
                        }
                    }
                    acc(*e, de.into_dyn());
                }
            }
            Op::Silu(x) => {
                let xv = self.value(*x);
                let mut d = g.clone();
                ndarray::Zip::from(&mut d).and(xv).for_each(|d, &v| {
                    let s = sigmoid(v);
                    *d = *d * s * (T::one() + v * (T::one() - s));
                });
                acc(*x, d);
            }
            Op::Concat(a, b) => {
                let ca = self.value(*a).shape()[0];
                acc(*a, g.slice_axis(Axis(0), (0..ca).into()).to_owned());
                acc(
                    *b,
                    g.slice_axis(Axis(0), (ca..g.shape()[0]).into()).to_owned(),
                );
            }
            Op::Upsample2(x) => {
                let xs = self.value(*x).shape().to_vec();
                let (h, w) = (xs[2], xs[3]);
                let planes = xs[0] * xs[1];
                let gv = g.as_slice().unwrap();
                let mut dx = vec![T::zero(); planes * h * w];
                for p in 0..planes {
                    let s = &gv[p * 4 * h * w..(p + 1) * 4 * h * w];
                    let d = &mut dx[p * h * w..(p + 1) * h * w];
                    for y in 0..2 * h {
                        for x in 0..2 * w {
                            d[(y / 2) * w + x / 2] = d[(y / 2) * w + x / 2] + s[y * 2 * w + x];
                        }
                    }
                }
                acc(*x, ArrayD::from_shape_vec(IxDyn(&xs), dx).unwrap());
            }
            Op::Scale(x, c) => acc(*x, g.mapv(|v| v * *c)),
            Op::Embedding { table, ids } => {
                let mut dt = ArrayD::<T>::zeros(self.value(*table).raw_dim());
                for (n, &id) in ids.iter().enumerate() {
                    let mut row = dt.index_axis_mut(Axis(0), id);
                    row += &g.index_axis(Axis(0), n);
                }
                acc(*table, dt);
            }
            Op::Reshape(x) => {
                let shape = self.value(*x).raw_dim();
                acc(*x, g.clone().into_shape_with_order(shape).unwrap());
            }
            Op::Mse {
                pred,
                diff,
                weight,
                denom,
            } => {
                let scale = g.first().copied().unwrap() * T::lit(2.0) / *denom;
                let d = match weight {
                    Some(wt) => {
                        let mut d = diff * wt;
                        d.mapv_inplace(|v| v * scale);
                        d
                    }
                    None => diff.mapv(|v| v * scale),
                };
                acc(*pred, d);
            }
            Op::CrossEntropy {
                logits,
                probs,
                labels,
            } => {
                let scale = g.first().copied().unwrap() / T::lit(labels.len() as f64);
                let k = probs.shape()[0];
                let m = labels.len();
                let mut d = probs.clone().into_shape_with_order((k, m)).unwrap();
                for (j, &l) in labels.iter().enumerate() {
                    d[[l, j]] = d[[l, j]] - T::one();
                }
                d.mapv_inplace(|v| v * scale);
                let shape = self.value(*logits).raw_dim();
                acc(*logits, d.into_shape_with_order(shape).unwrap());
            }
        }
    }
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<ArrayD<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of `v`, or zeros shaped like `like` when `v` received none.
    pub fn get_or_zeros(&self, v: Var, like: &ArrayD<T>) -> ArrayD<T> {
        self.grads[v.0]
            .clone()
            .unwrap_or_else(|| ArrayD::zeros(like.raw_dim()))
    }

    pub fn get(&self, v: Var) -> Option<&ArrayD<T>> {
        self.grads[v.0].as_ref()
    }
}

/// Converts `[N, C, H, W]` to the tape's `[C, N, H, W]` layout.
pub fn to_cnhw<T: Scalar>(x: &ndarray::Array4<T>) -> ArrayD<T> {
    x.view()
        .permuted_axes([1, 0, 2, 3])
        .as_standard_layout()
        .into_owned()
        .into_dyn()
}

/// Converts `[C, N, H, W]` back to `[N, C, H, W]`.
pub fn to_nchw<T: Scalar>(x: &ArrayD<T>) -> ndarray::Array4<T> {
    x.view()
        .into_dimensionality::<ndarray::Ix4>()
        .expect("rank-4 tensor")
        .permuted_axes([1, 0, 2, 3])
        .as_standard_layout()
        .into_owned()
}
