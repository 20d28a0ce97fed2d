//! Tensor-level reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every operation as it is evaluated. Values are dense
//! `f64` buffers with a `[channels, height, width]` shape; vectors are
//! `[n, 1, 1]` and scalars `[1, 1, 1]`. [`Tape::backward`] walks the records
//! once in reverse creation order and accumulates gradients into every node
//! that (transitively) depends on a parameter leaf.
//!
//! Shape errors are contract violations and panic.

use maskdet_core::map::FieldMap;
use maskdet_core::triplet::CellRect;

pub type Shape = [usize; 3];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Gradient rule of an operation defined outside this module.
pub trait Function {
    /// Given the input values, the output value and the gradient of the
    /// output, return one gradient buffer per input (`None` to skip).
    fn backward(&self, inputs: &[&[f64]], output: &[f64], grad: &[f64]) -> Vec<Option<Vec<f64>>>;
}

enum Op {
    Leaf,
    Affine { x: Var, scale: f64 },
    Add(Var, Var),
    Mul(Var, Var),
    Relu(Var),
    Sigmoid(Var),
    Softplus(Var),
    Conv2d { x: Var, w: Var, b: Var, stride: usize, pad: usize, k: usize, cols: Vec<f64> },
    Dense { x: Var, w: Var, b: Var },
    GlobalAvgPool(Var),
    GlobalMaxPool { x: Var, argmax: Vec<usize> },
    ChannelAvgPool(Var),
    ChannelMaxPool { x: Var, argmax: Vec<usize> },
    ScaleChannels { x: Var, s: Var },
    ScaleSpatial { x: Var, s: Var },
    Concat(Vec<Var>),
    NormalizeChannels { x: Var, norms: Vec<f64> },
    Mirror(Var),
    RegionMean { x: Var, rect: CellRect },
    WeightedSum(Vec<(Var, f64)>),
    Custom { inputs: Vec<Var>, function: Box<dyn Function> },
}

struct Node {
    shape: Shape,
    value: Vec<f64>,
    requires_grad: bool,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

fn numel(s: Shape) -> usize {
    s[0] * s[1] * s[2]
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// `c[m×n] = alpha·a[m×k]·b[k×n] + beta·c` with explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], rsa: isize, csa: isize, b: &[f64], rsb: isize, csb: isize, beta: f64, c: &mut [f64]) {
    assert!(c.len() >= m * n);
    // SAFETY: the caller guarantees `a` and `b` cover the strided extents
    // and `c` is a dense row-major m×n block; lengths are checked above and
    // at each call site.
    unsafe {
        matrixmultiply::dgemm(m, k, n, 1.0, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, beta, c.as_mut_ptr(), n as isize, 1);
    }
}

fn im2col(x: &[f64], [c, h, w]: Shape, k: usize, stride: usize, pad: usize, oh: usize, ow: usize) -> Vec<f64> {
    let p = oh * ow;
    let mut cols = vec![0.0; c * k * k * p];
    for ch in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = ((ch * k + ki) * k + kj) * p;
                for y in 0..oh {
                    let iy = (y * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = (ch * h + iy as usize) * w;
                    let dst = row + y * ow;
                    for xo in 0..ow {
                        let ix = (xo * stride + kj) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            cols[dst + xo] = x[src + ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &[f64], [c, h, w]: Shape, k: usize, stride: usize, pad: usize, oh: usize, ow: usize, dx: &mut [f64]) {
    let p = oh * ow;
    for ch in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = ((ch * k + ki) * k + kj) * p;
                for y in 0..oh {
                    let iy = (y * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = (ch * h + iy as usize) * w;
                    let src = row + y * ow;
                    for xo in 0..ow {
                        let ix = (xo * stride + kj) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dx[dst + ix as usize] += cols[src + xo];
                        }
                    }
                }
            }
        }
    }
}

/// Add `f`'s contribution into the gradient buffer of `v`.
fn accumulate(grads: &mut [Option<Vec<f64>>], nodes: &[Node], v: Var, f: impl FnOnce(&mut [f64])) {
    let node = &nodes[v.0];
    if !node.requires_grad {
        return;
    }
    let g = grads[v.0].get_or_insert_with(|| vec![0.0; node.value.len()]);
    f(g);
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Shape, value: Vec<f64>, inputs: &[Var], op: Op) -> Var {
        debug_assert_eq!(value.len(), numel(shape));
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { shape, value, requires_grad, op });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf; receives a gradient on [`Tape::backward`].
    pub fn parameter(&mut self, shape: Shape, value: Vec<f64>) -> Var {
        assert_eq!(value.len(), numel(shape), "parameter buffer does not match shape {shape:?}");
        self.nodes.push(Node { shape, value, requires_grad: true, op: Op::Leaf });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, shape: Shape, value: Vec<f64>) -> Var {
        assert_eq!(value.len(), numel(shape), "constant buffer does not match shape {shape:?}");
        self.nodes.push(Node { shape, value, requires_grad: false, op: Op::Leaf });
        Var(self.nodes.len() - 1)
    }

    pub fn constant_map(&mut self, map: &FieldMap) -> Var {
        self.constant([map.channels, map.height, map.width], map.data.clone())
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        assert_eq!(self.shape(v), [1, 1, 1], "not a scalar");
        self.nodes[v.0].value[0]
    }

    pub fn to_map(&self, v: Var) -> FieldMap {
        let [c, h, w] = self.shape(v);
        FieldMap { channels: c, height: h, width: w, data: self.nodes[v.0].value.clone() }
    }

    /// Gradient accumulated by the last [`Tape::backward`], if any reached `v`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// `scale·x`.
    pub fn scale(&mut self, x: Var, scale: f64) -> Var {
        let value = self.value(x).iter().map(|v| v * scale).collect();
        self.push(self.shape(x), value, &[x], Op::Affine { x, scale })
    }

    /// `scale·x + shift`.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let value = self.value(x).iter().map(|v| v * scale + shift).collect();
        self.push(self.shape(x), value, &[x], Op::Affine { x, scale })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add: shape mismatch");
        let value = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        self.push(self.shape(a), value, &[a, b], Op::Add(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "mul: shape mismatch");
        let value = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).collect();
        self.push(self.shape(a), value, &[a, b], Op::Mul(a, b))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).iter().map(|v| v.max(0.0)).collect();
        self.push(self.shape(x), value, &[x], Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).iter().map(|&v| sigmoid(v)).collect();
        self.push(self.shape(x), value, &[x], Op::Sigmoid(x))
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        let value = self.value(x).iter().map(|&v| softplus(v)).collect();
        self.push(self.shape(x), value, &[x], Op::Softplus(x))
    }

    /// 2-D convolution of `x: [C,H,W]` with `w: [O, C·k·k, 1]` (stored as
    /// `O × C × k × k`) plus bias `b: [O,1,1]`, zero padding `pad`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, k: usize, stride: usize, pad: usize) -> Var {
        let [c, h, wd] = self.shape(x);
        let [o, r, one] = self.shape(w);
        assert!(one == 1 && r == c * k * k, "conv2d: weight shape {:?} does not fit {c} channels, kernel {k}", self.shape(w));
        assert_eq!(self.shape(b), [o, 1, 1], "conv2d: bias shape");
        assert!(stride >= 1 && h + 2 * pad >= k && wd + 2 * pad >= k, "conv2d: kernel larger than padded input");
        let oh = (h + 2 * pad - k) / stride + 1;
        let ow = (wd + 2 * pad - k) / stride + 1;
        let p = oh * ow;
        let cols = im2col(self.value(x), [c, h, wd], k, stride, pad, oh, ow);
        let mut out = vec![0.0; o * p];
        for (oc, &bias) in self.value(b).iter().enumerate() {
            out[oc * p..(oc + 1) * p].fill(bias);
        }
        gemm(o, r, p, self.value(w), r as isize, 1, &cols, p as isize, 1, 1.0, &mut out);
        self.push([o, oh, ow], out, &[x, w, b], Op::Conv2d { x, w, b, stride, pad, k, cols })
    }

    /// `w·x + b` for a vector `x: [n,1,1]`, `w: [m,n,1]`, `b: [m,1,1]`.
    pub fn dense(&mut self, x: Var, w: Var, b: Var) -> Var {
        let n = self.shape(x)[0];
        let [m, wn, one] = self.shape(w);
        assert!(wn == n && one == 1 && self.shape(x)[1] * self.shape(x)[2] == 1, "dense: shape mismatch");
        assert_eq!(self.shape(b), [m, 1, 1], "dense: bias shape");
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        let value = (0..m).map(|r| bv[r] + wv[r * n..(r + 1) * n].iter().zip(xv).map(|(a, b)| a * b).sum::<f64>()).collect();
        self.push([m, 1, 1], value, &[x, w, b], Op::Dense { x, w, b })
    }

    /// Mean over the spatial plane: `[C,H,W] → [C,1,1]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let [c, h, w] = self.shape(x);
        let n = (h * w) as f64;
        let value = self.value(x).chunks(h * w).map(|p| p.iter().sum::<f64>() / n).collect();
        self.push([c, 1, 1], value, &[x], Op::GlobalAvgPool(x))
    }

    /// Max over the spatial plane: `[C,H,W] → [C,1,1]`.
    pub fn global_max_pool(&mut self, x: Var) -> Var {
        let [c, h, w] = self.shape(x);
        let mut argmax = Vec::with_capacity(c);
        let mut value = Vec::with_capacity(c);
        for (ch, plane) in self.value(x).chunks(h * w).enumerate() {
            let (best, v) = plane.iter().enumerate().fold((0, f64::NEG_INFINITY), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc });
            argmax.push(ch * h * w + best);
            value.push(v);
        }
        self.push([c, 1, 1], value, &[x], Op::GlobalMaxPool { x, argmax })
    }

    /// Mean across channels: `[C,H,W] → [1,H,W]`.
    pub fn channel_avg_pool(&mut self, x: Var) -> Var {
        let [c, h, w] = self.shape(x);
        let n = h * w;
        let mut value = vec![0.0; n];
        for plane in self.value(x).chunks(n) {
            add_into(&mut value, plane);
        }
        value.iter_mut().for_each(|v| *v /= c as f64);
        self.push([1, h, w], value, &[x], Op::ChannelAvgPool(x))
    }

    /// Max across channels: `[C,H,W] → [1,H,W]`.
    pub fn channel_max_pool(&mut self, x: Var) -> Var {
        let [_, h, w] = self.shape(x);
        let n = h * w;
        let xv = self.value(x);
        let mut value = xv[..n].to_vec();
        let mut argmax: Vec<usize> = (0..n).collect();
        for (ch, plane) in xv.chunks(n).enumerate().skip(1) {
            for (cell, &v) in plane.iter().enumerate() {
                if v > value[cell] {
                    value[cell] = v;
                    argmax[cell] = ch * n + cell;
                }
            }
        }
        self.push([1, h, w], value, &[x], Op::ChannelMaxPool { x, argmax })
    }

    /// Multiply channel `k` of `x: [C,H,W]` by `s[k]`, `s: [C,1,1]`.
    pub fn scale_channels(&mut self, x: Var, s: Var) -> Var {
        let [c, h, w] = self.shape(x);
        assert_eq!(self.shape(s), [c, 1, 1], "scale_channels: shape mismatch");
        let sv = self.value(s);
        let value = self.value(x).chunks(h * w).zip(sv).flat_map(|(p, &k)| p.iter().map(move |v| v * k)).collect();
        self.push([c, h, w], value, &[x, s], Op::ScaleChannels { x, s })
    }

    /// Multiply every channel of `x: [C,H,W]` cellwise by `s: [1,H,W]`.
    pub fn scale_spatial(&mut self, x: Var, s: Var) -> Var {
        let [c, h, w] = self.shape(x);
        assert_eq!(self.shape(s), [1, h, w], "scale_spatial: shape mismatch");
        let sv = self.value(s);
        let value = self.value(x).chunks(h * w).flat_map(|p| p.iter().zip(sv).map(|(a, b)| a * b)).collect();
        self.push([c, h, w], value, &[x, s], Op::ScaleSpatial { x, s })
    }

    /// Stack along the channel axis.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let [_, h, w] = self.shape(parts[0]);
        let mut c = 0;
        let mut value = Vec::new();
        for &p in parts {
            let [pc, ph, pw] = self.shape(p);
            assert_eq!((ph, pw), (h, w), "concat: spatial shape mismatch");
            c += pc;
            value.extend_from_slice(self.value(p));
        }
        self.push([c, h, w], value, parts, Op::Concat(parts.to_vec()))
    }

    /// Scale the channel vector at every cell to unit L2 norm.
    pub fn normalize_channels(&mut self, x: Var) -> Var {
        let [c, h, w] = self.shape(x);
        let n = h * w;
        let xv = self.value(x);
        let norms: Vec<f64> = (0..n)
            .map(|cell| (0..c).map(|k| xv[k * n + cell].powi(2)).sum::<f64>().sqrt().max(1e-12))
            .collect();
        let value = xv.iter().enumerate().map(|(idx, v)| v / norms[idx % n]).collect();
        self.push([c, h, w], value, &[x], Op::NormalizeChannels { x, norms })
    }

    /// Reverse the column order of every row.
    pub fn mirror(&mut self, x: Var) -> Var {
        let [c, h, w] = self.shape(x);
        let mut value = self.value(x).to_vec();
        value.chunks_mut(w).for_each(|row| row.reverse());
        self.push([c, h, w], value, &[x], Op::Mirror(x))
    }

    /// Mean of `x` over a rectangle of cells: `[C,H,W] → [C,1,1]`.
    pub fn region_mean(&mut self, x: Var, rect: CellRect) -> Var {
        let [c, h, w] = self.shape(x);
        assert!(rect.i1 <= h && rect.j1 <= w && rect.area() > 0, "region_mean: bad rectangle {rect:?}");
        let xv = self.value(x);
        let count = rect.area() as f64;
        let value = (0..c).map(|k| rect.cells().map(|(i, j)| xv[(k * h + i) * w + j]).sum::<f64>() / count).collect();
        self.push([c, 1, 1], value, &[x], Op::RegionMean { x, rect })
    }

    /// `Σ coeff·term` over scalar terms.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Var {
        let mut total = 0.0;
        for &(v, c) in terms {
            assert_eq!(self.shape(v), [1, 1, 1], "weighted_sum: terms must be scalars");
            total += c * self.scalar(v);
        }
        let inputs: Vec<Var> = terms.iter().map(|t| t.0).collect();
        self.push([1, 1, 1], vec![total], &inputs, Op::WeightedSum(terms.to_vec()))
    }

    /// Record an operation whose value was computed by the caller.
    pub fn custom(&mut self, inputs: &[Var], shape: Shape, value: Vec<f64>, function: Box<dyn Function>) -> Var {
        assert_eq!(value.len(), numel(shape), "custom op: value does not match shape");
        self.push(shape, value, inputs, Op::Custom { inputs: inputs.to_vec(), function })
    }

    /// Reverse pass from a scalar `root`. Gradients of earlier calls are
    /// discarded.
    pub fn backward(&mut self, root: Var) {
        assert_eq!(self.shape(root), [1, 1, 1], "backward needs a scalar root");
        let nodes = &self.nodes;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        if nodes[root.0].requires_grad {
            grads[root.0] = Some(vec![1.0]);
        }
        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &nodes[idx];
            let out = &node.value;
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                }
                Op::Affine { x, scale } => accumulate(&mut grads, nodes, *x, |d| d.iter_mut().zip(&g).for_each(|(d, g)| *d += scale * g)),
                Op::Add(a, b) => {
                    accumulate(&mut grads, nodes, *a, |d| add_into(d, &g));
                    accumulate(&mut grads, nodes, *b, |d| add_into(d, &g));
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                    accumulate(&mut grads, nodes, *a, |d| d.iter_mut().zip(&g).zip(bv).for_each(|((d, g), b)| *d += g * b));
                    accumulate(&mut grads, nodes, *b, |d| d.iter_mut().zip(&g).zip(av).for_each(|((d, g), a)| *d += g * a));
                }
                Op::Relu(x) => {
                    let xv = &nodes[x.0].value;
                    accumulate(&mut grads, nodes, *x, |d| {
                        d.iter_mut().zip(&g).zip(xv).for_each(|((d, g), &x)| {
                            if x > 0.0 {
                                *d += g
                            }
                        })
                    });
                }
                Op::Sigmoid(x) => accumulate(&mut grads, nodes, *x, |d| d.iter_mut().zip(&g).zip(out).for_each(|((d, g), y)| *d += g * y * (1.0 - y))),
                Op::Softplus(x) => {
                    let xv = &nodes[x.0].value;
                    accumulate(&mut grads, nodes, *x, |d| d.iter_mut().zip(&g).zip(xv).for_each(|((d, g), &x)| *d += g * sigmoid(x)));
                }
                Op::Conv2d { x, w, b, stride, pad, k, cols } => {
                    let xs = nodes[x.0].shape;
                    let [o, oh, ow] = node.shape;
                    let p = oh * ow;
                    let r = xs[0] * k * k;
                    accumulate(&mut grads, nodes, *b, |d| {
                        for (oc, db) in d.iter_mut().enumerate() {
                            *db += g[oc * p..(oc + 1) * p].iter().sum::<f64>();
                        }
                    });
                    // dW[o×r] += dY[o×p] · colsᵀ[p×r]
                    accumulate(&mut grads, nodes, *w, |d| gemm(o, p, r, &g, p as isize, 1, cols, 1, p as isize, 1.0, d));
                    let wv = &nodes[w.0].value;
                    accumulate(&mut grads, nodes, *x, |d| {
                        // dcols[r×p] = Wᵀ[r×o] · dY[o×p]
                        let mut dcols = vec![0.0; r * p];
                        gemm(r, o, p, wv, 1, r as isize, &g, p as isize, 1, 0.0, &mut dcols);
                        col2im(&dcols, xs, *k, *stride, *pad, oh, ow, d);
                    });
                }
                Op::Dense { x, w, b } => {
                    let (xv, wv) = (&nodes[x.0].value, &nodes[w.0].value);
                    let n = xv.len();
                    accumulate(&mut grads, nodes, *b, |d| add_into(d, &g));
                    accumulate(&mut grads, nodes, *w, |d| {
                        for (r, gr) in g.iter().enumerate() {
                            d[r * n..(r + 1) * n].iter_mut().zip(xv).for_each(|(d, x)| *d += gr * x);
                        }
                    });
                    accumulate(&mut grads, nodes, *x, |d| {
                        for (r, gr) in g.iter().enumerate() {
                            d.iter_mut().zip(&wv[r * n..(r + 1) * n]).for_each(|(d, w)| *d += gr * w);
                        }
                    });
                }
                Op::GlobalAvgPool(x) => {
                    let [_, h, w] = nodes[x.0].shape;
                    let n = h * w;
                    accumulate(&mut grads, nodes, *x, |d| {
                        for (plane, gc) in d.chunks_mut(n).zip(&g) {
                            plane.iter_mut().for_each(|v| *v += gc / n as f64);
                        }
                    });
                }
                Op::GlobalMaxPool { x, argmax } | Op::ChannelMaxPool { x, argmax } => accumulate(&mut grads, nodes, *x, |d| {
                    for (&at, gv) in argmax.iter().zip(&g) {
                        d[at] += gv;
                    }
                }),
                Op::ChannelAvgPool(x) => {
                    let c = nodes[x.0].shape[0] as f64;
                    accumulate(&mut grads, nodes, *x, |d| {
                        for plane in d.chunks_mut(g.len()) {
                            plane.iter_mut().zip(&g).for_each(|(d, g)| *d += g / c);
                        }
                    });
                }
                Op::ScaleChannels { x, s } => {
                    let (xv, sv) = (&nodes[x.0].value, &nodes[s.0].value);
                    let n = xv.len() / sv.len();
                    accumulate(&mut grads, nodes, *x, |d| {
                        for ((dp, gp), k) in d.chunks_mut(n).zip(g.chunks(n)).zip(sv) {
                            dp.iter_mut().zip(gp).for_each(|(d, g)| *d += g * k);
                        }
                    });
                    accumulate(&mut grads, nodes, *s, |d| {
                        for ((ds, gp), xp) in d.iter_mut().zip(g.chunks(n)).zip(xv.chunks(n)) {
                            *ds += gp.iter().zip(xp).map(|(g, x)| g * x).sum::<f64>();
                        }
                    });
                }
                Op::ScaleSpatial { x, s } => {
                    let (xv, sv) = (&nodes[x.0].value, &nodes[s.0].value);
                    let n = sv.len();
                    accumulate(&mut grads, nodes, *x, |d| {
                        for (dp, gp) in d.chunks_mut(n).zip(g.chunks(n)) {
                            dp.iter_mut().zip(gp).zip(sv).for_each(|((d, g), s)| *d += g * s);
                        }
                    });
                    accumulate(&mut grads, nodes, *s, |d| {
                        for (gp, xp) in g.chunks(n).zip(xv.chunks(n)) {
                            d.iter_mut().zip(gp).zip(xp).for_each(|((d, g), x)| *d += g * x);
                        }
                    });
                }
                Op::Concat(parts) => {
                    let mut at = 0;
                    for &p in parts {
                        let len = nodes[p.0].value.len();
                        accumulate(&mut grads, nodes, p, |d| add_into(d, &g[at..at + len]));
                        at += len;
                    }
                }
                Op::NormalizeChannels { x, norms } => {
                    let [c, h, w] = node.shape;
                    let n = h * w;
                    accumulate(&mut grads, nodes, *x, |d| {
                        for cell in 0..n {
                            let dot: f64 = (0..c).map(|k| out[k * n + cell] * g[k * n + cell]).sum();
                            for k in 0..c {
                                let at = k * n + cell;
                                d[at] += (g[at] - out[at] * dot) / norms[cell];
                            }
                        }
                    });
                }
                Op::Mirror(x) => {
                    let w = node.shape[2];
                    accumulate(&mut grads, nodes, *x, |d| {
                        for (dr, gr) in d.chunks_mut(w).zip(g.chunks(w)) {
                            dr.iter_mut().zip(gr.iter().rev()).for_each(|(d, g)| *d += g);
                        }
                    });
                }
                Op::RegionMean { x, rect } => {
                    let [_, h, w] = nodes[x.0].shape;
                    let count = rect.area() as f64;
                    accumulate(&mut grads, nodes, *x, |d| {
                        for (k, gk) in g.iter().enumerate() {
                            for (i, j) in rect.cells() {
                                d[(k * h + i) * w + j] += gk / count;
                            }
                        }
                    });
                }
                Op::WeightedSum(terms) => {
                    for &(v, c) in terms {
                        accumulate(&mut grads, nodes, v, |d| d[0] += c * g[0]);
                    }
                }
                Op::Custom { inputs, function } => {
                    let values: Vec<&[f64]> = inputs.iter().map(|v| nodes[v.0].value.as_slice()).collect();
                    let contributions = function.backward(&values, out, &g);
                    for (v, contribution) in inputs.iter().zip(contributions) {
                        if let Some(c) = contribution {
                            accumulate(&mut grads, nodes, *v, |d| add_into(d, &c));
                        }
                    }
                }
            }
        }
        self.grads = grads;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    /// Central-difference gradient of `f` at `x`.
    fn numeric_grad(x: &[f64], f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
        let h = 1e-6;
        (0..x.len())
            .map(|i| {
                let mut p = x.to_vec();
                p[i] += h;
                let up = f(&p);
                p[i] -= 2.0 * h;
                (up - f(&p)) / (2.0 * h)
            })
            .collect()
    }

    fn assert_close(a: &[f64], b: &[f64], tol: f64) {
        let scale = b.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-8);
        for (x, y) in a.iter().zip(b) {
            let rel = (x - y).abs() / x.abs().max(y.abs()).max(1e-3 * scale);
            assert!(rel <= tol, "autodiff {x} vs numeric {y} (rel {rel})");
        }
    }

    /// Direct nested-loop convolution, independent of im2col/gemm.
    fn naive_conv(x: &[f64], [c, h, w]: Shape, wt: &[f64], b: &[f64], o: usize, k: usize, s: usize, p: usize) -> Vec<f64> {
        let oh = (h + 2 * p - k) / s + 1;
        let ow = (w + 2 * p - k) / s + 1;
        let mut out = vec![0.0; o * oh * ow];
        for oc in 0..o {
            for y in 0..oh {
                for xo in 0..ow {
                    let mut acc = b[oc];
                    for ch in 0..c {
                        for ki in 0..k {
                            for kj in 0..k {
                                let iy = (y * s + ki) as isize - p as isize;
                                let ix = (xo * s + kj) as isize - p as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                    acc += wt[((oc * c + ch) * k + ki) * k + kj] * x[(ch * h + iy as usize) * w + ix as usize];
                                }
                            }
                        }
                    }
                    out[(oc * oh + y) * ow + xo] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn sigmoid_gradient_at_zero() {
        let mut t = Tape::new();
        let x = t.parameter([1, 1, 1], vec![0.0]);
        let y = t.sigmoid(x);
        t.backward(y);
        assert_eq!(t.value(y)[0], 0.5);
        assert_eq!(t.grad(x).unwrap()[0], 0.25);
    }

    #[test]
    fn relu_blocks_negative_inputs() {
        let mut t = Tape::new();
        let x = t.parameter([2, 1, 1], vec![-0.5, 0.7]);
        let y = t.relu(x);
        let w = t.parameter([1, 2, 1], vec![1.0, 1.0]);
        let b = t.parameter([1, 1, 1], vec![0.0]);
        let out = t.dense(y, w, b);
        t.backward(out);
        assert_eq!(t.grad(x).unwrap(), &[0.0, 1.0]);
    }

    #[test]
    fn conv_forward_matches_direct_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for &(c, h, w, o, k, s, p) in &[(1, 4, 4, 1, 3, 1, 1), (3, 8, 6, 4, 3, 2, 1), (2, 5, 5, 3, 1, 1, 0), (2, 9, 9, 1, 7, 1, 3)] {
            let xv = random(&mut rng, c * h * w);
            let wv = random(&mut rng, o * c * k * k);
            let bv = random(&mut rng, o);
            let mut t = Tape::new();
            let x = t.constant([c, h, w], xv.clone());
            let wt = t.parameter([o, c * k * k, 1], wv.clone());
            let b = t.parameter([o, 1, 1], bv.clone());
            let y = t.conv2d(x, wt, b, k, s, p);
            let expect = naive_conv(&xv, [c, h, w], &wv, &bv, o, k, s, p);
            for (a, e) in t.value(y).iter().zip(&expect) {
                assert!((a - e).abs() < 1e-12);
            }
        }
    }

    /// Weighted sum of all outputs with fixed random weights, so every
    /// output element contributes to the scalar.
    fn probe(t: &mut Tape, y: Var, weights: &[f64]) -> Var {
        let shape = t.shape(y);
        let wv = t.constant(shape, weights.to_vec());
        let prod = t.mul(y, wv);
        let total = t.value(prod).iter().sum();
        t.custom(&[prod], [1, 1, 1], vec![total], Box::new(SumAll(numel(shape))))
    }

    struct SumAll(usize);
    impl Function for SumAll {
        fn backward(&self, _: &[&[f64]], _: &[f64], grad: &[f64]) -> Vec<Option<Vec<f64>>> {
            vec![Some(vec![grad[0]; self.0])]
        }
    }

    #[test]
    fn conv_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (c, h, w, o, k, s, p) = (1, 4, 4, 1, 3, 1, 1);
        let xv = random(&mut rng, c * h * w);
        let wv = random(&mut rng, o * c * k * k);
        let bv = random(&mut rng, o);
        let probe_w = random(&mut rng, o * h * w);
        let f = |xv: &[f64], wv: &[f64]| naive_conv(xv, [c, h, w], wv, &bv, o, k, s, p).iter().zip(&probe_w).map(|(a, b)| a * b).sum::<f64>();

        let mut t = Tape::new();
        let x = t.parameter([c, h, w], xv.clone());
        let wt = t.parameter([o, c * k * k, 1], wv.clone());
        let b = t.parameter([o, 1, 1], bv.clone());
        let y = t.conv2d(x, wt, b, k, s, p);
        let l = probe(&mut t, y, &probe_w);
        t.backward(l);
        assert_close(t.grad(x).unwrap(), &numeric_grad(&xv, |v| f(v, &wv)), 1e-6);
        assert_close(t.grad(wt).unwrap(), &numeric_grad(&wv, |v| f(&xv, v)), 1e-6);
        assert!((t.grad(b).unwrap()[0] - probe_w.iter().sum::<f64>()).abs() < 1e-12);
    }

    #[test]
    fn strided_conv_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (c, h, w, o, k, s, p) = (2, 6, 6, 3, 3, 2, 1);
        let xv = random(&mut rng, c * h * w);
        let wv = random(&mut rng, o * c * k * k);
        let bv = random(&mut rng, o);
        let probe_w = random(&mut rng, o * 9);
        let f = |xv: &[f64], wv: &[f64]| naive_conv(xv, [c, h, w], wv, &bv, o, k, s, p).iter().zip(&probe_w).map(|(a, b)| a * b).sum::<f64>();
        let mut t = Tape::new();
        let x = t.parameter([c, h, w], xv.clone());
        let wt = t.parameter([o, c * k * k, 1], wv.clone());
        let b = t.parameter([o, 1, 1], bv.clone());
        let y = t.conv2d(x, wt, b, k, s, p);
        let l = probe(&mut t, y, &probe_w);
        t.backward(l);
        assert_close(t.grad(x).unwrap(), &numeric_grad(&xv, |v| f(v, &wv)), 1e-6);
        assert_close(t.grad(wt).unwrap(), &numeric_grad(&wv, |v| f(&xv, v)), 1e-6);
    }

    /// Every elementwise and pooling op, checked by rebuilding the tape for
    /// each finite-difference probe.
    #[test]
    fn primitive_gradients_match_finite_differences() {
        type Build = fn(&mut Tape, Var) -> Var;
        let cases: Vec<(&str, Build)> = vec![
            ("sigmoid", |t, x| t.sigmoid(x)),
            ("softplus", |t, x| t.softplus(x)),
            ("affine", |t, x| t.affine(x, -1.5, 0.25)),
            ("mul_self", |t, x| t.mul(x, x)),
            ("add_self", |t, x| t.add(x, x)),
            ("global_avg", |t, x| t.global_avg_pool(x)),
            ("global_max", |t, x| t.global_max_pool(x)),
            ("channel_avg", |t, x| t.channel_avg_pool(x)),
            ("channel_max", |t, x| t.channel_max_pool(x)),
            ("normalize", |t, x| t.normalize_channels(x)),
            ("mirror", |t, x| t.mirror(x)),
            ("region", |t, x| t.region_mean(x, CellRect { i0: 1, i1: 3, j0: 0, j1: 2 })),
            ("scale_channels", |t, x| {
                let s = t.global_avg_pool(x);
                let s = t.sigmoid(s);
                t.scale_channels(x, s)
            }),
            ("scale_spatial", |t, x| {
                let s = t.channel_max_pool(x);
                t.scale_spatial(x, s)
            }),
            ("concat", |t, x| {
                let a = t.channel_avg_pool(x);
                t.concat(&[x, a])
            }),
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let shape = [3, 3, 4];
        let xv = random(&mut rng, numel(shape));
        for (name, build) in cases {
            let out_len = {
                let mut t = Tape::new();
                let x = t.constant(shape, xv.clone());
                let y = build(&mut t, x);
                t.value(y).len()
            };
            let pw = random(&mut rng, out_len);
            let eval = |v: &[f64]| {
                let mut t = Tape::new();
                let x = t.constant(shape, v.to_vec());
                let y = build(&mut t, x);
                t.value(y).iter().zip(&pw).map(|(a, b)| a * b).sum::<f64>()
            };
            let mut t = Tape::new();
            let x = t.parameter(shape, xv.clone());
            let y = build(&mut t, x);
            let l = probe(&mut t, y, &pw);
            t.backward(l);
            let num = numeric_grad(&xv, eval);
            let got = t.grad(x).unwrap();
            for (a, b) in got.iter().zip(&num) {
                assert!((a - b).abs() < 1e-6, "{name}: autodiff {a} vs numeric {b}");
            }
        }
    }

    #[test]
    fn dense_gradient() {
        let mut t = Tape::new();
        let x = t.parameter([2, 1, 1], vec![0.5, -1.0]);
        let w = t.parameter([1, 2, 1], vec![2.0, 3.0]);
        let b = t.parameter([1, 1, 1], vec![0.25]);
        let y = t.dense(x, w, b);
        assert_eq!(t.scalar(y), 1.0 - 3.0 + 0.25);
        t.backward(y);
        assert_eq!(t.grad(x).unwrap(), &[2.0, 3.0]);
        assert_eq!(t.grad(w).unwrap(), &[0.5, -1.0]);
        assert_eq!(t.grad(b).unwrap(), &[1.0]);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut t = Tape::new();
        let c = t.constant([1, 1, 1], vec![2.0]);
        let p = t.parameter([1, 1, 1], vec![3.0]);
        let y = t.mul(c, p);
        t.backward(y);
        assert!(t.grad(c).is_none());
        assert_eq!(t.grad(p).unwrap(), &[2.0]);
    }

    #[test]
    #[should_panic(expected = "shape mismatch")]
    fn shape_mismatch_is_a_contract_violation() {
        let mut t = Tape::new();
        let a = t.constant([1, 2, 2], vec![0.0; 4]);
        let b = t.constant([1, 1, 4], vec![0.0; 4]);
        t.add(a, b);
    }
}
