//! A small reverse-mode differentiation tape over dense `f64` tensors.
//!
//! Every trained network in the crate (denoiser, voxel decoders, diffusion
//! prior) and every guidance objective records its forward pass here and
//! pulls gradients back with [`Tape::backward`] or, for vector-Jacobian
//! products of non-scalar outputs, [`Tape::backward_with`].
//!
//! Nodes are appended in evaluation order, so the node list is already a
//! topological order and the backward sweep is a single reverse scan.
//! Parameter tensors are borrowed rather than copied for the lifetime of
//! the tape.

use std::borrow::Cow;

use ndarray::{Array2, ArrayD, Axis, Ix2, IxDyn};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Stride and zero padding for square-kernel convolutions.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub const fn new(stride: usize, pad: usize) -> Self {
        Self { stride, pad }
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    AddChannelBias(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    ScaleRows(Var, Vec<f64>),
    Tanh(Var),
    Silu(Var),
    Abs(Var),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    RepeatRows(Var, usize),
    TileRows(Var, usize),
    BroadcastSpatial(Var),
    ConcatCols(Var, Var),
    LogSoftmaxRows(Var),
    NormalizeRows(Var, Vec<f64>),
    Conv2d {
        x: Var,
        w: Var,
        geom: ConvGeom,
        cols: Array2<f64>,
    },
    ConvTranspose2d {
        x: Var,
        w: Var,
        geom: ConvGeom,
    },
}

struct Node<'a> {
    value: Cow<'a, ArrayD<f64>>,
    op: Op,
    needs_grad: bool,
}

/// Gradients produced by a backward sweep, indexed by [`Var`].
pub struct Grads {
    slots: Vec<Option<ArrayD<f64>>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&ArrayD<f64>> {
        self.slots.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<ArrayD<f64>> {
        self.slots.get_mut(v.0).and_then(Option::take)
    }
}

#[derive(Default)]
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
}

fn as2(a: &ArrayD<f64>) -> ndarray::ArrayView2<'_, f64> {
    a.view()
        .into_dimensionality::<Ix2>()
        .expect("operand must be two-dimensional")
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: ArrayD<f64>, op: Op, parents: &[Var]) -> Var {
        let needs_grad = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn leaf(&mut self, value: Cow<'a, ArrayD<f64>>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Owned value that does not receive a gradient.
    pub fn constant(&mut self, value: ArrayD<f64>) -> Var {
        self.leaf(Cow::Owned(value), false)
    }

    /// Borrowed value that does not receive a gradient.
    pub fn constant_ref(&mut self, value: &'a ArrayD<f64>) -> Var {
        self.leaf(Cow::Borrowed(value), false)
    }

    /// Owned value that receives a gradient.
    pub fn input(&mut self, value: ArrayD<f64>) -> Var {
        self.leaf(Cow::Owned(value), true)
    }

    /// Borrowed trainable parameter.
    pub fn param(&mut self, value: &'a ArrayD<f64>) -> Var {
        self.leaf(Cow::Borrowed(value), true)
    }

    pub fn value(&self, v: Var) -> &ArrayD<f64> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Value of a single-element node.
    pub fn scalar(&self, v: Var) -> f64 {
        let val = self.value(v);
        assert_eq!(val.len(), 1, "scalar() on a node with {} elements", val.len());
        *val.iter().next().unwrap()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = as2(self.value(a)).dot(&as2(self.value(b))).into_dyn();
        self.push(out, Op::MatMul(a, b), &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add: shape mismatch");
        let out = self.value(a) + self.value(b);
        self.push(out, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "sub: shape mismatch");
        let out = self.value(a) - self.value(b);
        self.push(out, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "mul: shape mismatch");
        let out = self.value(a) * self.value(b);
        self.push(out, Op::Mul(a, b), &[a, b])
    }

    /// Adds a bias vector along the last axis.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Var {
        let out = self.value(x) + self.value(bias);
        self.push(out, Op::AddRow(x, bias), &[x, bias])
    }

    /// Adds a per-channel bias to an `[n, c, h, w]` tensor.
    pub fn add_channel_bias(&mut self, x: Var, bias: Var) -> Var {
        let c = self.shape(x)[1];
        assert_eq!(self.shape(bias), &[c], "channel bias length");
        let b = self
            .value(bias)
            .view()
            .into_shape_with_order(IxDyn(&[1, c, 1, 1]))
            .unwrap()
            .to_owned();
        let out = self.value(x) + &b;
        self.push(out, Op::AddChannelBias(x, bias), &[x, bias])
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let out = self.value(x) * s;
        self.push(out, Op::Scale(x, s), &[x])
    }

    /// Adds a constant to every element.
    pub fn offset(&mut self, x: Var, c: f64) -> Var {
        let out = self.value(x) + c;
        self.push(out, Op::Offset(x), &[x])
    }

    /// Multiplies sample `i` (leading axis) by `s[i]`.
    pub fn scale_rows(&mut self, x: Var, s: Vec<f64>) -> Var {
        let mut out = self.value(x).clone();
        assert_eq!(out.shape()[0], s.len(), "scale_rows length");
        for (mut row, &k) in out.axis_iter_mut(Axis(0)).zip(&s) {
            row *= k;
        }
        self.push(out, Op::ScaleRows(x, s), &[x])
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = self.value(x).mapv(f64::tanh);
        self.push(out, Op::Tanh(x), &[x])
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let out = self.value(x).mapv(|v| v * sigmoid(v));
        self.push(out, Op::Silu(x), &[x])
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let out = self.value(x).mapv(f64::abs);
        self.push(out, Op::Abs(x), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = ArrayD::from_elem(IxDyn(&[]), self.value(x).sum());
        self.push(out, Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let out = ArrayD::from_elem(IxDyn(&[]), v.sum() / v.len() as f64);
        self.push(out, Op::Mean(x), &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let out = self
            .value(x)
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape: element count mismatch");
        self.push(out, Op::Reshape(x), &[x])
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Var {
        let out = self
            .value(x)
            .view()
            .permuted_axes(IxDyn(axes))
            .as_standard_layout()
            .into_owned();
        self.push(out, Op::Permute(x, axes.to_vec()), &[x])
    }

    /// Swaps the two inner axes of a `[n * a, b]` matrix viewed as `[n, a, b]`,
    /// returning `[n * b, a]`.
    pub fn swap_inner(&mut self, x: Var, n: usize, a: usize, b: usize) -> Var {
        let r = self.reshape(x, &[n, a, b]);
        let p = self.permute(r, &[0, 2, 1]);
        self.reshape(p, &[n * b, a])
    }

    /// `[n, d] -> [n * k, d]`, each row repeated `k` times consecutively.
    pub fn repeat_rows(&mut self, x: Var, k: usize) -> Var {
        let v = as2(self.value(x));
        let (n, d) = v.dim();
        let out = Array2::from_shape_fn((n * k, d), |(r, c)| v[[r / k, c]]).into_dyn();
        self.push(out, Op::RepeatRows(x, k), &[x])
    }

    /// `[t, d] -> [n * t, d]`, the whole block stacked `n` times.
    pub fn tile_rows(&mut self, x: Var, n: usize) -> Var {
        let v = as2(self.value(x));
        let (t, d) = v.dim();
        let out = Array2::from_shape_fn((n * t, d), |(r, c)| v[[r % t, c]]).into_dyn();
        self.push(out, Op::TileRows(x, n), &[x])
    }

    /// `[n, c] -> [n, c, h, w]`, constant over space.
    pub fn broadcast_spatial(&mut self, x: Var, h: usize, w: usize) -> Var {
        let v = as2(self.value(x));
        let (n, c) = v.dim();
        let out = ndarray::Array4::from_shape_fn((n, c, h, w), |(i, j, _, _)| v[[i, j]]).into_dyn();
        self.push(out, Op::BroadcastSpatial(x), &[x])
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let out = ndarray::concatenate(Axis(1), &[as2(self.value(a)), as2(self.value(b))])
            .expect("concat_cols: row count mismatch")
            .into_dyn();
        self.push(out, Op::ConcatCols(a, b), &[a, b])
    }

    pub fn log_softmax_rows(&mut self, x: Var) -> Var {
        let mut out = as2(self.value(x)).to_owned();
        for mut row in out.rows_mut() {
            let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<f64>().ln();
            row -= lse;
        }
        self.push(out.into_dyn(), Op::LogSoftmaxRows(x), &[x])
    }

    /// L2-normalizes each row of a matrix.
    pub fn normalize_rows(&mut self, x: Var) -> Var {
        let mut out = as2(self.value(x)).to_owned();
        let mut norms = Vec::with_capacity(out.nrows());
        for mut row in out.rows_mut() {
            let n = row.dot(&row).sqrt().max(1e-12);
            row /= n;
            norms.push(n);
        }
        self.push(out.into_dyn(), Op::NormalizeRows(x, norms), &[x])
    }

    /// Cross-correlation of `x: [n, c, h, w]` with `w: [o, c, k, k]`.
    pub fn conv2d(&mut self, x: Var, w: Var, geom: ConvGeom) -> Var {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        assert_eq!(xs[1], ws[1], "conv2d: channel mismatch");
        let k = ws[2];
        let xv = self.value(x).as_standard_layout();
        let (cols, ho, wo) = im2col(
            xv.as_slice().unwrap(),
            [xs[0], xs[1], xs[2], xs[3]],
            k,
            geom,
        );
        let wmat = self
            .value(w)
            .view()
            .into_shape_with_order((ws[0], ws[1] * k * k))
            .unwrap()
            .to_owned();
        let out2 = cols.dot(&wmat.t());
        let out = out2
            .into_shape_with_order(IxDyn(&[xs[0], ho, wo, ws[0]]))
            .unwrap()
            .permuted_axes(IxDyn(&[0, 3, 1, 2]))
            .as_standard_layout()
            .into_owned();
        self.push(out, Op::Conv2d { x, w, geom, cols }, &[x, w])
    }

    /// Transposed convolution of `x: [n, ci, h, w]` with `w: [ci, co, k, k]`;
    /// the adjoint of [`Tape::conv2d`] with the same weights.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, geom: ConvGeom) -> Var {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        assert_eq!(xs[1], ws[0], "conv_transpose2d: channel mismatch");
        let (n, ci, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (co, k) = (ws[1], ws[2]);
        let ho = (h - 1) * geom.stride + k - 2 * geom.pad;
        let wo = (wd - 1) * geom.stride + k - 2 * geom.pad;
        let x2 = nchw_to_rows(self.value(x));
        let wmat = self
            .value(w)
            .view()
            .into_shape_with_order((ci, co * k * k))
            .unwrap()
            .to_owned();
        let cols = x2.dot(&wmat);
        let out = col2im(&cols, [n, co, ho, wo], k, geom, (h, wd));
        let out = ArrayD::from_shape_vec(IxDyn(&[n, co, ho, wo]), out).unwrap();
        self.push(out, Op::ConvTranspose2d { x, w, geom }, &[x, w])
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: Var) -> Grads {
        let seed = ArrayD::from_elem(self.value(loss).raw_dim(), 1.0);
        self.backward_with(loss, seed)
    }

    /// Vector-Jacobian product: pulls `seed` (shaped like `out`) back to
    /// every node that needs a gradient.
    pub fn backward_with(&self, out: Var, seed: ArrayD<f64>) -> Grads {
        assert_eq!(seed.shape(), self.shape(out), "seed shape");
        let mut slots: Vec<Option<ArrayD<f64>>> = vec![None; self.nodes.len()];
        slots[out.0] = Some(seed);
        for i in (0..=out.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = slots[i].take() else { continue };
            if matches!(self.nodes[i].op, Op::Leaf) {
                slots[i] = Some(g);
                continue;
            }
            self.propagate(i, g, &mut slots);
        }
        Grads { slots }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn propagate(&self, i: usize, g: ArrayD<f64>, slots: &mut [Option<ArrayD<f64>>]) {
        let node = &self.nodes[i];
        let acc = |slots: &mut [Option<ArrayD<f64>>], v: Var, delta: ArrayD<f64>| {
            match &mut slots[v.0] {
                Some(existing) => *existing += &delta,
                slot @ None => *slot = Some(delta),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let g2 = as2(&g);
                if self.wants(*a) {
                    acc(slots, *a, g2.dot(&as2(self.value(*b)).t()).into_dyn());
                }
                if self.wants(*b) {
                    acc(slots, *b, as2(self.value(*a)).t().dot(&g2).into_dyn());
                }
            }
            Op::Add(a, b) => {
                if self.wants(*a) {
                    acc(slots, *a, g.clone());
                }
                if self.wants(*b) {
                    acc(slots, *b, g);
                }
            }
            Op::Sub(a, b) => {
                if self.wants(*a) {
                    acc(slots, *a, g.clone());
                }
                if self.wants(*b) {
                    acc(slots, *b, -g);
                }
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    acc(slots, *a, &g * self.value(*b));
                }
                if self.wants(*b) {
                    acc(slots, *b, &g * self.value(*a));
                }
            }
            Op::AddRow(x, b) => {
                if self.wants(*b) {
                    let d = *g.shape().last().unwrap();
                    let flat = g
                        .view()
                        .into_shape_with_order((g.len() / d, d))
                        .unwrap()
                        .sum_axis(Axis(0));
                    acc(slots, *b, flat.into_dyn());
                }
                if self.wants(*x) {
                    acc(slots, *x, g);
                }
            }
            Op::AddChannelBias(x, b) => {
                if self.wants(*b) {
                    let s = g.sum_axis(Axis(3)).sum_axis(Axis(2)).sum_axis(Axis(0));
                    acc(slots, *b, s);
                }
                if self.wants(*x) {
                    acc(slots, *x, g);
                }
            }
            Op::Scale(x, s) => acc(slots, *x, g * *s),
            Op::Offset(x) => acc(slots, *x, g),
            Op::ScaleRows(x, s) => {
                let mut g = g;
                for (mut row, &k) in g.axis_iter_mut(Axis(0)).zip(s) {
                    row *= k;
                }
                acc(slots, *x, g);
            }
            Op::Tanh(x) => {
                let y = &node.value;
                let mut d = g;
                d.zip_mut_with(y, |gi, &yi| *gi *= 1.0 - yi * yi);
                acc(slots, *x, d);
            }
            Op::Silu(x) => {
                let mut d = g;
                d.zip_mut_with(self.value(*x), |gi, &xi| {
                    let s = sigmoid(xi);
                    *gi *= s * (1.0 + xi * (1.0 - s));
                });
                acc(slots, *x, d);
            }
            Op::Abs(x) => {
                let mut d = g;
                d.zip_mut_with(self.value(*x), |gi, &xi| {
                    *gi *= if xi > 0.0 {
                        1.0
                    } else if xi < 0.0 {
                        -1.0
                    } else {
                        0.0
                    }
                });
                acc(slots, *x, d);
            }
            Op::Sum(x) => {
                let s = *g.iter().next().unwrap();
                acc(slots, *x, ArrayD::from_elem(self.value(*x).raw_dim(), s));
            }
            Op::Mean(x) => {
                let n = self.value(*x).len() as f64;
                let s = *g.iter().next().unwrap() / n;
                acc(slots, *x, ArrayD::from_elem(self.value(*x).raw_dim(), s));
            }
            Op::Reshape(x) => {
                let shape = self.value(*x).raw_dim();
                acc(slots, *x, g.into_shape_with_order(shape).unwrap());
            }
            Op::Permute(x, axes) => {
                let mut inv = vec![0; axes.len()];
                for (i, &a) in axes.iter().enumerate() {
                    inv[a] = i;
                }
                let d = g
                    .permuted_axes(IxDyn(&inv))
                    .as_standard_layout()
                    .into_owned();
                acc(slots, *x, d);
            }
            Op::RepeatRows(x, k) => {
                let (n, d) = as2(self.value(*x)).dim();
                let s = g
                    .into_shape_with_order((n, *k, d))
                    .unwrap()
                    .sum_axis(Axis(1));
                acc(slots, *x, s.into_dyn());
            }
            Op::TileRows(x, n) => {
                let (t, d) = as2(self.value(*x)).dim();
                let s = g
                    .into_shape_with_order((*n, t, d))
                    .unwrap()
                    .sum_axis(Axis(0));
                acc(slots, *x, s.into_dyn());
            }
            Op::BroadcastSpatial(x) => {
                let s = g.sum_axis(Axis(3)).sum_axis(Axis(2));
                acc(slots, *x, s);
            }
            Op::ConcatCols(a, b) => {
                let da = self.shape(*a)[1];
                let g2 = as2(&g);
                if self.wants(*a) {
                    acc(slots, *a, g2.slice(ndarray::s![.., ..da]).to_owned().into_dyn());
                }
                if self.wants(*b) {
                    acc(slots, *b, g2.slice(ndarray::s![.., da..]).to_owned().into_dyn());
                }
            }
            Op::LogSoftmaxRows(x) => {
                let y = as2(&node.value);
                let mut d = as2(&g).to_owned();
                for (mut drow, yrow) in d.rows_mut().into_iter().zip(y.rows()) {
                    let s: f64 = drow.sum();
                    drow.zip_mut_with(&yrow, |gi, &yi| *gi -= yi.exp() * s);
                }
                acc(slots, *x, d.into_dyn());
            }
            Op::NormalizeRows(x, norms) => {
                let y = as2(&node.value);
                let mut d = as2(&g).to_owned();
                for ((mut drow, yrow), &n) in d.rows_mut().into_iter().zip(y.rows()).zip(norms) {
                    let proj = drow.dot(&yrow);
                    drow.zip_mut_with(&yrow, |gi, &yi| *gi = (*gi - yi * proj) / n);
                }
                acc(slots, *x, d.into_dyn());
            }
            Op::Conv2d { x, w, geom, cols } => {
                let xs = self.shape(*x).to_vec();
                let ws = self.shape(*w).to_vec();
                let k = ws[2];
                let gr = nchw_to_rows(&g);
                let wmat = self
                    .value(*w)
                    .view()
                    .into_shape_with_order((ws[0], ws[1] * k * k))
                    .unwrap()
                    .to_owned();
                if self.wants(*w) {
                    let gw = gr.t().dot(cols);
                    acc(slots, *w, gw.into_shape_with_order(IxDyn(&ws)).unwrap());
                }
                if self.wants(*x) {
                    let gcols = gr.dot(&wmat);
                    let (ho, wo) = (g.shape()[2], g.shape()[3]);
                    let gx = col2im(&gcols, [xs[0], xs[1], xs[2], xs[3]], k, *geom, (ho, wo));
                    acc(slots, *x, ArrayD::from_shape_vec(IxDyn(&xs), gx).unwrap());
                }
            }
            Op::ConvTranspose2d { x, w, geom } => {
                let xs = self.shape(*x).to_vec();
                let ws = self.shape(*w).to_vec();
                let (ci, co, k) = (ws[0], ws[1], ws[2]);
                let gs = g.shape().to_vec();
                let gstd = g.as_standard_layout();
                let (gcols, h, wd) = im2col(gstd.as_slice().unwrap(), [gs[0], gs[1], gs[2], gs[3]], k, *geom);
                debug_assert_eq!((h, wd), (xs[2], xs[3]));
                if self.wants(*x) {
                    let wmat = self
                        .value(*w)
                        .view()
                        .into_shape_with_order((ci, co * k * k))
                        .unwrap()
                        .to_owned();
                    let gx2 = gcols.dot(&wmat.t());
                    acc(slots, *x, rows_to_nchw(gx2, [xs[0], xs[1], xs[2], xs[3]]));
                }
                if self.wants(*w) {
                    let x2 = nchw_to_rows(self.value(*x));
                    let gw = x2.t().dot(&gcols);
                    acc(slots, *w, gw.into_shape_with_order(IxDyn(&ws)).unwrap());
                }
            }
        }
    }
}

/// `[n, c, h, w] -> [n * h * w, c]`.
fn nchw_to_rows(a: &ArrayD<f64>) -> Array2<f64> {
    let s = a.shape();
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    a.view()
        .permuted_axes(IxDyn(&[0, 2, 3, 1]))
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order((n * h * w, c))
        .unwrap()
}

/// `[n * h * w, c] -> [n, c, h, w]`.
fn rows_to_nchw(a: Array2<f64>, shape: [usize; 4]) -> ArrayD<f64> {
    let [n, c, h, w] = shape;
    a.into_shape_with_order(IxDyn(&[n, h, w, c]))
        .unwrap()
        .permuted_axes(IxDyn(&[0, 3, 1, 2]))
        .as_standard_layout()
        .into_owned()
}

/// Unfolds `x` into one row per output position, columns ordered
/// `(channel, ky, kx)`.
fn im2col(x: &[f64], shape: [usize; 4], k: usize, geom: ConvGeom) -> (Array2<f64>, usize, usize) {
    let [n, c, h, w] = shape;
    let ConvGeom { stride: s, pad: p } = geom;
    let ho = (h + 2 * p - k) / s + 1;
    let wo = (w + 2 * p - k) / s + 1;
    let kk = k * k;
    let mut cols = Array2::<f64>::zeros((n * ho * wo, c * kk));
    let buf = cols.as_slice_mut().unwrap();
    let width = c * kk;
    for ni in 0..n {
        for oy in 0..ho {
            for ox in 0..wo {
                let row = &mut buf[((ni * ho + oy) * wo + ox) * width..][..width];
                for ci in 0..c {
                    let plane = &x[(ni * c + ci) * h * w..][..h * w];
                    for ky in 0..k {
                        let iy = (oy * s + ky) as isize - p as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox * s + kx) as isize - p as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            row[ci * kk + ky * k + kx] = plane[iy as usize * w + ix as usize];
                        }
                    }
                }
            }
        }
    }
    (cols, ho, wo)
}

/// Adjoint of [`im2col`]: scatters rows back onto an `[n, c, h, w]` buffer.
fn col2im(
    cols: &Array2<f64>,
    shape: [usize; 4],
    k: usize,
    geom: ConvGeom,
    grid: (usize, usize),
) -> Vec<f64> {
    let [n, c, h, w] = shape;
    let (ho, wo) = grid;
    let ConvGeom { stride: s, pad: p } = geom;
    let kk = k * k;
    let width = c * kk;
    let mut out = vec![0.0; n * c * h * w];
    let cols = cols.as_standard_layout();
    let buf = cols.as_slice().unwrap();
    for ni in 0..n {
        for oy in 0..ho {
            for ox in 0..wo {
                let row = &buf[((ni * ho + oy) * wo + ox) * width..][..width];
                for ci in 0..c {
                    let plane = &mut out[(ni * c + ci) * h * w..][..h * w];
                    for ky in 0..k {
                        let iy = (oy * s + ky) as isize - p as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox * s + kx) as isize - p as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            plane[iy as usize * w + ix as usize] += row[ci * kk + ky * k + kx];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Central finite-difference gradient checking, shared by the unit tests of
/// every differentiable component.
pub mod gradcheck {
    use ndarray::{ArrayD, IxDyn};
    use rand::seq::index::sample;
    use rand::Rng;

    /// Compares an analytic gradient with central differences of `f` at
    /// `n` random coordinates. Returns the worst relative error, measured
    /// against `max(|fd|, |analytic|, floor)`.
    pub fn max_rel_error<R: Rng>(
        x: &ArrayD<f64>,
        analytic: &ArrayD<f64>,
        mut f: impl FnMut(&ArrayD<f64>) -> f64,
        n: usize,
        h: f64,
        floor: f64,
        rng: &mut R,
    ) -> f64 {
        let n = n.min(x.len());
        let mut worst: f64 = 0.0;
        let mut probe = x.clone();
        for idx in sample(rng, x.len(), n).into_iter() {
            let orig = probe.as_slice_memory_order().unwrap()[idx];
            probe.as_slice_memory_order_mut().unwrap()[idx] = orig + h;
            let fp = f(&probe);
            probe.as_slice_memory_order_mut().unwrap()[idx] = orig - h;
            let fm = f(&probe);
            probe.as_slice_memory_order_mut().unwrap()[idx] = orig;
            let fd = (fp - fm) / (2.0 * h);
            let an = analytic.as_slice_memory_order().unwrap()[idx];
            let denom = fd.abs().max(an.abs()).max(floor);
            worst = worst.max((fd - an).abs() / denom);
        }
        worst
    }

    /// [`max_rel_error`] over every scalar of a parameter set, with
    /// `analytic` listing one gradient per tensor in set order.
    pub fn param_rel_error<R: Rng>(
        params: &crate::nn::ParamSet,
        analytic: &[ArrayD<f64>],
        mut loss: impl FnMut(&crate::nn::ParamSet) -> f64,
        n: usize,
        h: f64,
        floor: f64,
        rng: &mut R,
    ) -> f64 {
        let shapes: Vec<Vec<usize>> = params.iter().map(|(_, v)| v.shape().to_vec()).collect();
        let flat: Vec<f64> = params.iter().flat_map(|(_, v)| v.iter().copied()).collect();
        let gflat: Vec<f64> = analytic.iter().flat_map(|g| g.iter().copied()).collect();
        assert_eq!(flat.len(), gflat.len(), "one gradient per parameter");
        let len = flat.len();
        let mut scratch = params.clone();
        let f = |x: &ArrayD<f64>| {
            let mut off = 0;
            for (v, sh) in scratch.values_mut().zip(&shapes) {
                let k: usize = sh.iter().product();
                *v = ArrayD::from_shape_vec(IxDyn(sh), x.as_slice().unwrap()[off..off + k].to_vec()).unwrap();
                off += k;
            }
            loss(&scratch)
        };
        max_rel_error(
            &ArrayD::from_shape_vec(IxDyn(&[len]), flat).unwrap(),
            &ArrayD::from_shape_vec(IxDyn(&[len]), gflat).unwrap(),
            f,
            n,
            h,
            floor,
            rng,
        )
    }
}
