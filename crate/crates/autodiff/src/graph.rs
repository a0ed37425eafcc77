//! Tape-based computation graph.
//!
//! Nodes are appended in evaluation order, so node ids are already a
//! topological order and backward is a single reverse sweep.

use std::cell::{Ref, RefCell};
use std::collections::{BTreeMap, HashMap};
use std::rc::Rc;

use crate::error::{shape_err, Result, TensorError};
use crate::kernels::{self, ConvGeom};
use crate::tensor::{axis_split, broadcast_map, broadcast_shape, numel};
use crate::{Gradients, Scalar, Tensor};

/// Handle to a node of a [`Graph`]. Only meaningful for the graph that issued it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Abs(Var),
    Exp(Var),
    Relu(Var),
    Sigmoid(Var),
    Recip(Var),
    Sqrt(Var),
    Clamp(Var, T, T),
    MatMul(Var, Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    Upsample2x(Var),
    Softmax(Var, usize),
    SumAxis(Var, usize),
    SumAll(Var),
    Concat(Vec<Var>, usize),
    Narrow(Var, usize, usize),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Bilinear {
        src: Var,
        coords: Var,
        mask: Rc<Tensor<T>>,
    },
    AvgPool3(Var),
    Rodrigues(Var),
}

#[derive(Debug)]
struct Node<T> {
    value: Rc<Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
}

#[derive(Debug, Default)]
struct Inner<T> {
    nodes: Vec<Node<T>>,
    params: HashMap<String, Var>,
    param_order: Vec<String>,
    grads: Option<Vec<Option<Vec<T>>>>,
}

/// Reverse-mode differentiation tape. Single-context: share parameters across
/// threads, never graphs.
#[derive(Debug)]
pub struct Graph<T: Scalar> {
    inner: RefCell<Inner<T>>,
    checked: bool,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

const DIV_EPS: f64 = 1e-12;

impl<T: Scalar> Graph<T> {
    /// A graph in checked mode: every forward value is verified finite.
    pub fn new() -> Self {
        Self {
            inner: RefCell::new(Inner {
                nodes: Vec::new(),
                params: HashMap::new(),
                param_order: Vec::new(),
                grads: None,
            }),
            checked: true,
        }
    }

    pub fn unchecked() -> Self {
        let mut g = Self::new();
        g.checked = false;
        g
    }

    pub fn is_checked(&self) -> bool {
        self.checked
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Result<Var> {
        if self.checked && !value.all_finite() {
            return Err(TensorError::NumericFault(format!(
                "non-finite value produced by {}",
                op_name(&op)
            )));
        }
        let mut inner = self.inner.borrow_mut();
        inner.nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
        });
        Ok(Var(inner.nodes.len() - 1))
    }

    fn rg(&self, v: Var) -> bool {
        self.inner.borrow().nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> Rc<Tensor<T>> {
        Rc::clone(&self.inner.borrow().nodes[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.inner.borrow().nodes[v.0].value.shape().to_vec()
    }

    pub fn item(&self, v: Var) -> T {
        self.inner.borrow().nodes[v.0].value.item()
    }

    /// Differentiable leaf.
    pub fn leaf(&self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true).expect("leaf values are not checked")
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false).expect("leaf values are not checked")
    }

    /// Registers a named parameter, reusing the leaf if the name was seen before.
    pub fn param(&self, name: &str, t: &Tensor<T>) -> Var {
        if let Some(&v) = self.inner.borrow().params.get(name) {
            return v;
        }
        let v = self.leaf(t.clone());
        let mut inner = self.inner.borrow_mut();
        inner.params.insert(name.to_string(), v);
        inner.param_order.push(name.to_string());
        v
    }

    /// Names an existing leaf as a parameter, so later [`Graph::param`] calls
    /// with that name resolve to it.
    pub fn bind_param(&self, name: &str, v: Var) {
        let mut inner = self.inner.borrow_mut();
        if inner.params.insert(name.to_string(), v).is_none() {
            inner.param_order.push(name.to_string());
        }
    }

    pub fn param_var(&self, name: &str) -> Option<Var> {
        self.inner.borrow().params.get(name).copied()
    }

    // ---------------------------------------------------------------- elementwise

    fn binary(&self, a: Var, b: Var, kind: u8) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let out_shape = broadcast_shape(av.shape(), bv.shape())?;
        let f = |x: T, y: T| match kind {
            0 => x + y,
            1 => x - y,
            2 => x * y,
            _ => x / y,
        };
        if kind == 3 && self.checked {
            if let Some(bad) = bv.data().iter().find(|y| y.abs().as_f64() < DIV_EPS) {
                return Err(TensorError::NumericFault(format!(
                    "division by {bad} (|x| < {DIV_EPS})"
                )));
            }
        }
        let data: Vec<T> = if av.shape() == bv.shape() {
            av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let ma = broadcast_map(&out_shape, av.shape());
            let mb = broadcast_map(&out_shape, bv.shape());
            ma.iter()
                .zip(&mb)
                .map(|(&i, &j)| f(av.data()[i], bv.data()[j]))
                .collect()
        };
        let op = match kind {
            0 => Op::Add(a, b),
            1 => Op::Sub(a, b),
            2 => Op::Mul(a, b),
            _ => Op::Div(a, b),
        };
        self.push(Tensor::new(&out_shape, data)?, op, self.rg(a) || self.rg(b))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, 0)
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, 1)
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, 2)
    }

    pub fn div(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, 3)
    }

    fn unary(&self, a: Var, op: Op<T>, f: impl Fn(T) -> T) -> Result<Var> {
        let v = self.value(a).map(f);
        self.push(v, op, self.rg(a))
    }

    pub fn scale(&self, a: Var, c: f64) -> Result<Var> {
        let c = T::from_f64(c);
        self.unary(a, Op::Scale(a, c), |x| x * c)
    }

    pub fn add_scalar(&self, a: Var, c: f64) -> Result<Var> {
        let c = T::from_f64(c);
        self.unary(a, Op::AddScalar(a), |x| x + c)
    }

    pub fn neg(&self, a: Var) -> Result<Var> {
        self.scale(a, -1.0)
    }

    pub fn abs(&self, a: Var) -> Result<Var> {
        self.unary(a, Op::Abs(a), |x| x.abs())
    }

    pub fn exp(&self, a: Var) -> Result<Var> {
        self.unary(a, Op::Exp(a), |x| x.exp())
    }

    pub fn relu(&self, a: Var) -> Result<Var> {
        self.unary(a, Op::Relu(a), |x| if x > T::zero() { x } else { T::zero() })
    }

    pub fn sigmoid(&self, a: Var) -> Result<Var> {
        self.unary(a, Op::Sigmoid(a), |x| T::one() / (T::one() + (-x).exp()))
    }

    pub fn recip(&self, a: Var) -> Result<Var> {
        if self.checked && self.value(a).data().iter().any(|x| x.abs().as_f64() < DIV_EPS) {
            return Err(TensorError::NumericFault("reciprocal of ~0".into()));
        }
        self.unary(a, Op::Recip(a), |x| T::one() / x)
    }

    pub fn sqrt(&self, a: Var) -> Result<Var> {
        self.unary(a, Op::Sqrt(a), |x| x.sqrt())
    }

    pub fn clamp(&self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        let (lo, hi) = (T::from_f64(lo), T::from_f64(hi));
        self.unary(a, Op::Clamp(a, lo, hi), |x| x.max(lo).min(hi))
    }

    pub fn square(&self, a: Var) -> Result<Var> {
        self.mul(a, a)
    }

    // ---------------------------------------------------------------- linear algebra

    /// Batched matrix product `[.., m, k] x [.., k, n]`. Either operand may be
    /// a plain 2-d matrix shared across the other's batch.
    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (sa, sb) = (av.shape(), bv.shape());
        if sa.len() < 2 || sb.len() < 2 {
            return shape_err(format!("matmul needs rank >= 2, got {sa:?} x {sb:?}"));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != k2 {
            return shape_err(format!("matmul inner dims differ: {sa:?} x {sb:?}"));
        }
        let (ba, bb) = (&sa[..sa.len() - 2], &sb[..sb.len() - 2]);
        let batch_shape = if ba == bb || bb.is_empty() {
            ba.to_vec()
        } else if ba.is_empty() {
            bb.to_vec()
        } else {
            return shape_err(format!("matmul batch dims differ: {sa:?} x {sb:?}"));
        };
        let nb = numel(&batch_shape);
        let (sta, stb) = (if ba.is_empty() { 0 } else { m * k }, if bb.is_empty() { 0 } else { k * n });
        let mut out = vec![T::zero(); nb * m * n];
        for i in 0..nb {
            T::gemm(
                m,
                k,
                n,
                &av.data()[i * sta..],
                false,
                &bv.data()[i * stb..],
                false,
                &mut out[i * m * n..(i + 1) * m * n],
                false,
            );
        }
        let mut shape = batch_shape;
        shape.extend([m, n]);
        self.push(Tensor::new(&shape, out)?, Op::MatMul(a, b), self.rg(a) || self.rg(b))
    }

    /// 2-d convolution (cross-correlation) of `[b, c, h, w]` with `[o, c, kh, kw]`
    /// weights, symmetric zero padding and an optional `[o]` bias.
    pub fn conv2d(&self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        let (sx, sw) = (xv.shape(), wv.shape());
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] || stride == 0 {
            return shape_err(format!("conv2d: input {sx:?}, weight {sw:?}, stride {stride}"));
        }
        let (bn, c, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
        let (o, kh, kw) = (sw[0], sw[2], sw[3]);
        if h + 2 * pad < kh || wd + 2 * pad < kw {
            return shape_err(format!("conv2d: kernel {kh}x{kw} larger than padded input {sx:?}"));
        }
        let geom = ConvGeom {
            c,
            h,
            w: wd,
            kh,
            kw,
            stride,
            pad,
            ho: (h + 2 * pad - kh) / stride + 1,
            wo: (wd + 2 * pad - kw) / stride + 1,
        };
        let bias = match b {
            Some(bv) => {
                let t = self.value(bv);
                if t.shape() != [o] {
                    return shape_err(format!("conv2d bias shape {:?}, expected [{o}]", t.shape()));
                }
                Some(t)
            }
            None => None,
        };
        let (rows, cols_n) = (geom.col_rows(), geom.col_cols());
        let plane = c * h * wd;
        let chunk = kernels::conv_chunk(&geom, bn);
        let mut out = vec![T::zero(); bn * o * cols_n];
        let mut cols = vec![T::zero(); rows * chunk * cols_n];
        let mut prod = vec![T::zero(); o * chunk * cols_n];
        for i0 in (0..bn).step_by(chunk) {
            let nb = chunk.min(bn - i0);
            let ld = nb * cols_n;
            for j in 0..nb {
                let i = i0 + j;
                kernels::im2col(&xv.data()[i * plane..(i + 1) * plane], &geom, &mut cols, ld, j * cols_n);
            }
            T::gemm(o, rows, ld, wv.data(), false, &cols, false, &mut prod, false);
            for j in 0..nb {
                let dst = &mut out[(i0 + j) * o * cols_n..(i0 + j + 1) * o * cols_n];
                for (oc, row) in dst.chunks_mut(cols_n).enumerate() {
                    let src = &prod[oc * ld + j * cols_n..oc * ld + (j + 1) * cols_n];
                    match &bias {
                        Some(bt) => {
                            let bval = bt.data()[oc];
                            for (d, &v) in row.iter_mut().zip(src) {
                                *d = v + bval;
                            }
                        }
                        None => row.copy_from_slice(src),
                    }
                }
            }
        }
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        self.push(
            Tensor::new(&[bn, o, geom.ho, geom.wo], out)?,
            Op::Conv2d { x, w, b, geom },
            rg,
        )
    }

    /// Nearest-neighbour 2x upsampling of the last two axes.
    pub fn upsample2x(&self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let s = av.shape();
        if s.len() < 2 {
            return shape_err("upsample2x needs rank >= 2");
        }
        let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
        let planes = numel(&s[..s.len() - 2]);
        let mut out = vec![T::zero(); planes * 4 * h * w];
        for p in 0..planes {
            let src = &av.data()[p * h * w..(p + 1) * h * w];
            let dst = &mut out[p * 4 * h * w..(p + 1) * 4 * h * w];
            for y in 0..2 * h {
                for x in 0..2 * w {
                    dst[y * 2 * w + x] = src[(y / 2) * w + x / 2];
                }
            }
        }
        let mut shape = s.to_vec();
        let r = shape.len();
        shape[r - 2] *= 2;
        shape[r - 1] *= 2;
        self.push(Tensor::new(&shape, out)?, Op::Upsample2x(a), self.rg(a))
    }

    pub fn softmax(&self, a: Var, axis: usize) -> Result<Var> {
        let av = self.value(a);
        if axis >= av.shape().len() {
            return shape_err(format!("softmax axis {axis} out of range for {:?}", av.shape()));
        }
        let (outer, n, inner) = axis_split(av.shape(), axis);
        let mut out = vec![T::zero(); av.numel()];
        let d = av.data();
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * n * inner + j * inner + i;
                let m = (0..n).map(|j| d[at(j)]).fold(T::neg_infinity(), T::max);
                let mut z = T::zero();
                for j in 0..n {
                    let e = (d[at(j)] - m).exp();
                    out[at(j)] = e;
                    z = z + e;
                }
                for j in 0..n {
                    out[at(j)] = out[at(j)] / z;
                }
            }
        }
        self.push(Tensor::new(av.shape(), out)?, Op::Softmax(a, axis), self.rg(a))
    }

    // ---------------------------------------------------------------- reductions

    /// Sum along `axis`, keeping it with extent 1.
    pub fn sum_axis(&self, a: Var, axis: usize) -> Result<Var> {
        let av = self.value(a);
        if axis >= av.shape().len() {
            return shape_err(format!("sum axis {axis} out of range for {:?}", av.shape()));
        }
        let (outer, n, inner) = axis_split(av.shape(), axis);
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for j in 0..n {
                let src = &av.data()[(o * n + j) * inner..(o * n + j + 1) * inner];
                let dst = &mut out[o * inner..(o + 1) * inner];
                dst.iter_mut().zip(src).for_each(|(d, &s)| *d = *d + s);
            }
        }
        let mut shape = av.shape().to_vec();
        shape[axis] = 1;
        self.push(Tensor::new(&shape, out)?, Op::SumAxis(a, axis), self.rg(a))
    }

    pub fn mean_axis(&self, a: Var, axis: usize) -> Result<Var> {
        let n = self.shape(a).get(axis).copied().unwrap_or(1);
        let s = self.sum_axis(a, axis)?;
        self.scale(s, 1.0 / n as f64)
    }

    pub fn sum(&self, a: Var) -> Result<Var> {
        let v = self.value(a).sum();
        self.push(Tensor::scalar(v), Op::SumAll(a), self.rg(a))
    }

    pub fn mean(&self, a: Var) -> Result<Var> {
        let n = self.value(a).numel();
        if n == 0 {
            return shape_err("mean of empty tensor");
        }
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n as f64)
    }

    // ---------------------------------------------------------------- shape

    pub fn concat(&self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() {
            return shape_err("concat of nothing");
        }
        let vals: Vec<_> = parts.iter().map(|&p| self.value(p)).collect();
        let base = vals[0].shape().to_vec();
        if axis >= base.len() {
            return shape_err(format!("concat axis {axis} out of range for {base:?}"));
        }
        let mut total = 0;
        for v in &vals {
            let s = v.shape();
            if s.len() != base.len()
                || s.iter().zip(&base).enumerate().any(|(d, (x, y))| d != axis && x != y)
            {
                return shape_err(format!("concat shapes {base:?} and {s:?} disagree"));
            }
            total += s[axis];
        }
        let (outer, _, inner) = axis_split(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for v in &vals {
                let n = v.shape()[axis] * inner;
                out.extend_from_slice(&v.data()[o * n..(o + 1) * n]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(Tensor::new(&shape, out)?, Op::Concat(parts.to_vec(), axis), rg)
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let av = self.value(a);
        let s = av.shape();
        if axis >= s.len() || start + len > s[axis] {
            return shape_err(format!("narrow({axis}, {start}, {len}) out of range for {s:?}"));
        }
        let (outer, n, inner) = axis_split(s, axis);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * n + start) * inner;
            out.extend_from_slice(&av.data()[base..base + len * inner]);
        }
        let mut shape = s.to_vec();
        shape[axis] = len;
        self.push(Tensor::new(&shape, out)?, Op::Narrow(a, axis, start), self.rg(a))
    }

    pub fn split(&self, a: Var, axis: usize, sizes: &[usize]) -> Result<Vec<Var>> {
        let mut start = 0;
        let mut out = Vec::with_capacity(sizes.len());
        for &len in sizes {
            out.push(self.narrow(a, axis, start, len)?);
            start += len;
        }
        if start != self.shape(a)[axis] {
            return shape_err("split sizes do not cover the axis");
        }
        Ok(out)
    }

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = (*self.value(a)).clone().reshape(shape)?;
        self.push(t, Op::Reshape(a), self.rg(a))
    }

    pub fn permute(&self, a: Var, perm: &[usize]) -> Result<Var> {
        let av = self.value(a);
        let s = av.shape();
        let mut seen = vec![false; s.len()];
        if perm.len() != s.len() || perm.iter().any(|&p| p >= s.len() || std::mem::replace(&mut seen[p], true)) {
            return shape_err(format!("invalid permutation {perm:?} for {s:?}"));
        }
        let out = permute_data(av.data(), s, perm);
        let shape: Vec<usize> = perm.iter().map(|&p| s[p]).collect();
        self.push(Tensor::new(&shape, out)?, Op::Permute(a, perm.to_vec()), self.rg(a))
    }

    /// Swap the last two axes.
    pub fn transpose(&self, a: Var) -> Result<Var> {
        let r = self.shape(a).len();
        if r < 2 {
            return shape_err("transpose needs rank >= 2");
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.permute(a, &perm)
    }

    // ---------------------------------------------------------------- imaging

    /// Bilinear sampling of `src` `[b, c, h, w]` at pixel coordinates `coords`
    /// `[b, 2, ho, wo]` (x then y). A target pixel is valid when its coordinate
    /// lies in `[0, w-1] x [0, h-1]` and `keep` (if given, `[b, 1, ho, wo]`) is
    /// nonzero. Invalid pixels sample to 0. Returns the samples and the
    /// `[b, 1, ho, wo]` validity mask (not differentiable).
    pub fn bilinear_sample(
        &self,
        src: Var,
        coords: Var,
        keep: Option<&Tensor<T>>,
    ) -> Result<(Var, Tensor<T>)> {
        let (sv, cv) = (self.value(src), self.value(coords));
        let (ss, cs) = (sv.shape(), cv.shape());
        if ss.len() != 4 || cs.len() != 4 || cs[1] != 2 || ss[0] != cs[0] || ss[2] < 2 || ss[3] < 2 {
            return shape_err(format!("bilinear_sample: src {ss:?}, coords {cs:?}"));
        }
        let (bn, c, h, w) = (ss[0], ss[1], ss[2], ss[3]);
        let (ho, wo) = (cs[2], cs[3]);
        let np = ho * wo;
        if let Some(k) = keep {
            if k.shape() != [bn, 1, ho, wo] {
                return shape_err(format!("bilinear_sample keep mask {:?}", k.shape()));
            }
        }
        let mut out = vec![T::zero(); bn * c * np];
        let mut mask = vec![T::zero(); bn * np];
        for b in 0..bn {
            for p in 0..np {
                if keep.is_some_and(|k| k.data()[b * np + p] == T::zero()) {
                    continue;
                }
                let x = cv.data()[(b * 2) * np + p].as_f64();
                let y = cv.data()[(b * 2 + 1) * np + p].as_f64();
                let Some(tap) = kernels::bilinear_tap(x, y, w, h) else {
                    continue;
                };
                mask[b * np + p] = T::one();
                let (fx, fy) = (T::from_f64(tap.fx), T::from_f64(tap.fy));
                let one = T::one();
                for ch in 0..c {
                    let plane = &sv.data()[(b * c + ch) * h * w..(b * c + ch + 1) * h * w];
                    let i00 = plane[tap.y0 * w + tap.x0];
                    let i01 = plane[tap.y0 * w + tap.x0 + 1];
                    let i10 = plane[(tap.y0 + 1) * w + tap.x0];
                    let i11 = plane[(tap.y0 + 1) * w + tap.x0 + 1];
                    out[(b * c + ch) * np + p] = (one - fy) * ((one - fx) * i00 + fx * i01)
                        + fy * ((one - fx) * i10 + fx * i11);
                }
            }
        }
        let mask = Rc::new(Tensor::new(&[bn, 1, ho, wo], mask)?);
        let rg = self.rg(src) || self.rg(coords);
        let v = self.push(
            Tensor::new(&[bn, c, ho, wo], out)?,
            Op::Bilinear {
                src,
                coords,
                mask: Rc::clone(&mask),
            },
            rg,
        )?;
        Ok((v, (*mask).clone()))
    }

    /// 3x3 box mean over the last two axes with reflection padding.
    pub fn avg_pool3(&self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let s = av.shape();
        if s.len() < 2 || s[s.len() - 1] < 2 || s[s.len() - 2] < 2 {
            return shape_err(format!("avg_pool3 needs trailing dims >= 2, got {s:?}"));
        }
        let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
        let planes = numel(&s[..s.len() - 2]);
        let ninth = T::from_f64(1.0 / 9.0);
        let mut out = vec![T::zero(); av.numel()];
        for p in 0..planes {
            let src = &av.data()[p * h * w..(p + 1) * h * w];
            let dst = &mut out[p * h * w..(p + 1) * h * w];
            for y in 0..h {
                for x in 0..w {
                    let mut acc = T::zero();
                    for dy in -1..=1isize {
                        let yy = kernels::reflect(y as isize + dy, h);
                        for dx in -1..=1isize {
                            acc = acc + src[yy * w + kernels::reflect(x as isize + dx, w)];
                        }
                    }
                    dst[y * w + x] = acc * ninth;
                }
            }
        }
        self.push(Tensor::new(s, out)?, Op::AvgPool3(a), self.rg(a))
    }

    /// Axis-angle `[b, 3]` to rotation matrices `[b, 3, 3]`.
    pub fn rodrigues(&self, a: Var) -> Result<Var> {
        let av = self.value(a);
        if av.shape().len() != 2 || av.shape()[1] != 3 {
            return shape_err(format!("rodrigues expects [b, 3], got {:?}", av.shape()));
        }
        let bn = av.shape()[0];
        let mut out = Vec::with_capacity(bn * 9);
        for r in av.data().chunks(3) {
            let m = kernels::rodrigues([r[0].as_f64(), r[1].as_f64(), r[2].as_f64()]);
            out.extend(m.iter().map(|&x| T::from_f64(x)));
        }
        self.push(Tensor::new(&[bn, 3, 3], out)?, Op::Rodrigues(a), self.rg(a))
    }

    // ---------------------------------------------------------------- backward

    /// Reverse sweep from a scalar loss. Leaves that the loss does not reach
    /// get zero gradients.
    pub fn backward(&self, loss: Var) -> Result<()> {
        let mut inner = self.inner.borrow_mut();
        if inner.grads.is_some() {
            return Err(TensorError::StaleGraph);
        }
        let ls = inner.nodes[loss.0].value.shape().to_vec();
        if numel(&ls) != 1 {
            return Err(TensorError::NonScalarLoss(ls));
        }
        let nodes = &inner.nodes;
        let mut grads: Vec<Option<Vec<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for id in (0..=loss.0).rev() {
            let node = &nodes[id];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            backward_node(nodes, node, &g, &mut grads)?;
            // Intermediate gradients are not retained.
        }
        inner.grads = Some(grads);
        Ok(())
    }

    /// Clears accumulated gradients so backward may run again.
    pub fn zero_grad(&self) {
        self.inner.borrow_mut().grads = None;
    }

    /// Gradient of the last backward pass with respect to a leaf.
    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        let inner = self.inner.borrow();
        let grads = inner.grads.as_ref()?;
        let node = &inner.nodes[v.0];
        if !node.requires_grad {
            return None;
        }
        let shape = node.value.shape();
        Some(match &grads[v.0] {
            Some(g) => Tensor::new(shape, g.clone()).expect("gradient matches value shape"),
            None => Tensor::zeros(shape),
        })
    }

    /// Gradients of every registered parameter, zero where unreached.
    pub fn gradients(&self) -> Result<Gradients<T>> {
        let names: Vec<(String, Var)> = {
            let inner = self.inner.borrow();
            if inner.grads.is_none() {
                return Err(TensorError::InvalidArgument("backward has not run".into()));
            }
            inner
                .param_order
                .iter()
                .map(|n| (n.clone(), inner.params[n]))
                .collect()
        };
        let mut map = BTreeMap::new();
        for (name, v) in names {
            map.insert(name, self.grad(v).expect("parameters require grad"));
        }
        Ok(Gradients::from_map(map))
    }

    /// Read access to a node value without cloning the `Rc`.
    pub fn with_value<R>(&self, v: Var, f: impl FnOnce(&Tensor<T>) -> R) -> R {
        let inner: Ref<'_, Inner<T>> = self.inner.borrow();
        f(&inner.nodes[v.0].value)
    }
}

fn op_name<T>(op: &Op<T>) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::Mul(..) => "mul",
        Op::Div(..) => "div",
        Op::Scale(..) => "scale",
        Op::AddScalar(..) => "add_scalar",
        Op::Abs(..) => "abs",
        Op::Exp(..) => "exp",
        Op::Relu(..) => "relu",
        Op::Sigmoid(..) => "sigmoid",
        Op::Recip(..) => "recip",
        Op::Sqrt(..) => "sqrt",
        Op::Clamp(..) => "clamp",
        Op::MatMul(..) => "matmul",
        Op::Conv2d { .. } => "conv2d",
        Op::Upsample2x(..) => "upsample2x",
        Op::Softmax(..) => "softmax",
        Op::SumAxis(..) => "sum_axis",
        Op::SumAll(..) => "sum",
        Op::Concat(..) => "concat",
        Op::Narrow(..) => "narrow",
        Op::Reshape(..) => "reshape",
        Op::Permute(..) => "permute",
        Op::Bilinear { .. } => "bilinear_sample",
        Op::AvgPool3(..) => "avg_pool3",
        Op::Rodrigues(..) => "rodrigues",
    }
}

fn permute_data<T: Copy + Default>(data: &[T], shape: &[usize], perm: &[usize]) -> Vec<T> {
    let rank = shape.len();
    let mut in_strides = vec![1usize; rank];
    for d in (0..rank.saturating_sub(1)).rev() {
        in_strides[d] = in_strides[d + 1] * shape[d + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let n = data.len();
    let mut out = Vec::with_capacity(n);
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..n {
        out.push(data[off]);
        for d in (0..rank).rev() {
            idx[d] += 1;
            off += strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            off -= strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    out
}

fn accumulate<T: Scalar>(nodes: &[Node<T>], grads: &mut [Option<Vec<T>>], v: Var, g: Vec<T>) {
    if !nodes[v.0].requires_grad {
        return;
    }
    match &mut grads[v.0] {
        Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a = *a + b),
        slot @ None => *slot = Some(g),
    }
}

/// Sums a broadcast gradient back down to `src` shape.
fn unbroadcast<T: Scalar>(g: &[T], out: &[usize], src: &[usize], f: impl Fn(usize, T) -> T) -> Vec<T> {
    if out == src {
        return g.iter().enumerate().map(|(i, &x)| f(i, x)).collect();
    }
    let map = broadcast_map(out, src);
    let mut acc = vec![T::zero(); numel(src)];
    for (i, (&x, &j)) in g.iter().zip(&map).enumerate() {
        acc[j] = acc[j] + f(i, x);
    }
    acc
}

fn backward_node<T: Scalar>(
    nodes: &[Node<T>],
    node: &Node<T>,
    g: &[T],
    grads: &mut [Option<Vec<T>>],
) -> Result<()> {
    let val = |v: Var| -> &Tensor<T> { &nodes[v.0].value };
    let rg = |v: Var| nodes[v.0].requires_grad;
    let y = node.value.data();
    let out_shape = node.value.shape();
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) | Op::Sub(a, b) => {
            let sign = if matches!(node.op, Op::Sub(..)) { -T::one() } else { T::one() };
            if rg(*a) {
                let ga = unbroadcast(g, out_shape, val(*a).shape(), |_, x| x);
                accumulate(nodes, grads, *a, ga);
            }
            if rg(*b) {
                let gb = unbroadcast(g, out_shape, val(*b).shape(), |_, x| x * sign);
                accumulate(nodes, grads, *b, gb);
            }
        }
        Op::Mul(a, b) | Op::Div(a, b) => {
            let is_div = matches!(node.op, Op::Div(..));
            let (av, bv) = (val(*a), val(*b));
            let ma = (av.shape() != out_shape).then(|| broadcast_map(out_shape, av.shape()));
            let mb = (bv.shape() != out_shape).then(|| broadcast_map(out_shape, bv.shape()));
            let at = |i: usize| av.data()[ma.as_ref().map_or(i, |m| m[i])];
            let bt = |i: usize| bv.data()[mb.as_ref().map_or(i, |m| m[i])];
            if rg(*a) {
                let ga = unbroadcast(g, out_shape, av.shape(), |i, x| {
                    if is_div {
                        x / bt(i)
                    } else {
                        x * bt(i)
                    }
                });
                accumulate(nodes, grads, *a, ga);
            }
            if rg(*b) {
                let gb = unbroadcast(g, out_shape, bv.shape(), |i, x| {
                    if is_div {
                        -x * at(i) / (bt(i) * bt(i))
                    } else {
                        x * at(i)
                    }
                });
                accumulate(nodes, grads, *b, gb);
            }
        }
        Op::Scale(a, c) => accumulate(nodes, grads, *a, g.iter().map(|&x| x * *c).collect()),
        Op::AddScalar(a) | Op::Reshape(a) => accumulate(nodes, grads, *a, g.to_vec()),
        Op::Abs(a) => {
            let d = val(*a).data();
            let ga = g
                .iter()
                .zip(d)
                .map(|(&x, &v)| if v > T::zero() { x } else if v < T::zero() { -x } else { T::zero() })
                .collect();
            accumulate(nodes, grads, *a, ga);
        }
        Op::Exp(a) => accumulate(nodes, grads, *a, g.iter().zip(y).map(|(&x, &e)| x * e).collect()),
        Op::Relu(a) => {
            let d = val(*a).data();
            let ga = g.iter().zip(d).map(|(&x, &v)| if v > T::zero() { x } else { T::zero() }).collect();
            accumulate(nodes, grads, *a, ga);
        }
        Op::Sigmoid(a) => {
            let ga = g.iter().zip(y).map(|(&x, &s)| x * s * (T::one() - s)).collect();
            accumulate(nodes, grads, *a, ga);
        }
        Op::Recip(a) => {
            let ga = g.iter().zip(y).map(|(&x, &r)| -x * r * r).collect();
            accumulate(nodes, grads, *a, ga);
        }
        Op::Sqrt(a) => {
            let half = T::from_f64(0.5);
            let ga = g.iter().zip(y).map(|(&x, &r)| x * half / r).collect();
            accumulate(nodes, grads, *a, ga);
        }
        Op::Clamp(a, lo, hi) => {
            let d = val(*a).data();
            let ga = g
                .iter()
                .zip(d)
                .map(|(&x, &v)| if v >= *lo && v <= *hi { x } else { T::zero() })
                .collect();
            accumulate(nodes, grads, *a, ga);
        }
        Op::MatMul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let (sa, sb) = (av.shape(), bv.shape());
            let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
            let n = sb[sb.len() - 1];
            let a_shared = sa.len() == 2 && sb.len() > 2;
            let b_shared = sb.len() == 2 && sa.len() > 2;
            let nb = numel(&out_shape[..out_shape.len() - 2]);
            if rg(*a) {
                let mut ga = vec![T::zero(); av.numel()];
                for i in 0..nb {
                    let bo = if b_shared { 0 } else { i * k * n };
                    let ao = if a_shared { 0 } else { i * m * k };
                    T::gemm(m, n, k, &g[i * m * n..], false, &bv.data()[bo..], true, &mut ga[ao..ao + m * k], true);
                }
                accumulate(nodes, grads, *a, ga);
            }
            if rg(*b) {
                let mut gb = vec![T::zero(); bv.numel()];
                for i in 0..nb {
                    let ao = if a_shared { 0 } else { i * m * k };
                    let bo = if b_shared { 0 } else { i * k * n };
                    T::gemm(k, m, n, &av.data()[ao..], true, &g[i * m * n..], false, &mut gb[bo..bo + k * n], true);
                }
                accumulate(nodes, grads, *b, gb);
            }
        }
        Op::Conv2d { x, w, b, geom } => {
            let (xv, wv) = (val(*x), val(*w));
            let bn = xv.shape()[0];
            let o = wv.shape()[0];
            let (rows, ncols) = (geom.col_rows(), geom.col_cols());
            let plane = geom.c * geom.h * geom.w;
            let chunk = kernels::conv_chunk(geom, bn);
            let mut gw = rg(*w).then(|| vec![T::zero(); wv.numel()]);
            let mut gx = rg(*x).then(|| vec![T::zero(); xv.numel()]);
            let mut cols = vec![T::zero(); if gw.is_some() { rows * chunk * ncols } else { 0 }];
            let mut dcols = vec![T::zero(); if gx.is_some() { rows * chunk * ncols } else { 0 }];
            let mut go = vec![T::zero(); o * chunk * ncols];
            for i0 in (0..bn).step_by(chunk) {
                let nb = chunk.min(bn - i0);
                let ld = nb * ncols;
                for j in 0..nb {
                    let src = &g[(i0 + j) * o * ncols..(i0 + j + 1) * o * ncols];
                    for (oc, row) in src.chunks(ncols).enumerate() {
                        go[oc * ld + j * ncols..oc * ld + (j + 1) * ncols].copy_from_slice(row);
                    }
                }
                if let Some(gw) = gw.as_mut() {
                    for j in 0..nb {
                        let i = i0 + j;
                        kernels::im2col(&xv.data()[i * plane..(i + 1) * plane], geom, &mut cols, ld, j * ncols);
                    }
                    T::gemm(o, ld, rows, &go, false, &cols, true, gw, true);
                }
                if let Some(gx) = gx.as_mut() {
                    T::gemm(rows, o, ld, wv.data(), true, &go, false, &mut dcols, false);
                    for j in 0..nb {
                        let i = i0 + j;
                        kernels::col2im(&dcols, geom, &mut gx[i * plane..(i + 1) * plane], ld, j * ncols);
                    }
                }
            }
            if let Some(gw) = gw {
                accumulate(nodes, grads, *w, gw);
            }
            if let Some(gx) = gx {
                accumulate(nodes, grads, *x, gx);
            }
            if let Some(b) = b.filter(|b| rg(*b)) {
                let mut gb = vec![T::zero(); o];
                for i in 0..bn {
                    for (oc, acc) in gb.iter_mut().enumerate() {
                        let s: T = g[(i * o + oc) * ncols..(i * o + oc + 1) * ncols].iter().copied().sum();
                        *acc = *acc + s;
                    }
                }
                accumulate(nodes, grads, b, gb);
            }
        }
        Op::Upsample2x(a) => {
            let s = val(*a).shape();
            let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
            let planes = numel(&s[..s.len() - 2]);
            let mut ga = vec![T::zero(); planes * h * w];
            for p in 0..planes {
                let src = &g[p * 4 * h * w..(p + 1) * 4 * h * w];
                let dst = &mut ga[p * h * w..(p + 1) * h * w];
                for yy in 0..2 * h {
                    for xx in 0..2 * w {
                        let d = &mut dst[(yy / 2) * w + xx / 2];
                        *d = *d + src[yy * 2 * w + xx];
                    }
                }
            }
            accumulate(nodes, grads, *a, ga);
        }
        Op::Softmax(a, axis) => {
            let (outer, n, inner) = axis_split(out_shape, *axis);
            let mut ga = vec![T::zero(); y.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |j: usize| o * n * inner + j * inner + i;
                    let dot: T = (0..n).map(|j| g[at(j)] * y[at(j)]).sum();
                    for j in 0..n {
                        ga[at(j)] = y[at(j)] * (g[at(j)] - dot);
                    }
                }
            }
            accumulate(nodes, grads, *a, ga);
        }
        Op::SumAxis(a, axis) => {
            let (outer, n, inner) = axis_split(val(*a).shape(), *axis);
            let mut ga = Vec::with_capacity(outer * n * inner);
            for o in 0..outer {
                for _ in 0..n {
                    ga.extend_from_slice(&g[o * inner..(o + 1) * inner]);
                }
            }
            accumulate(nodes, grads, *a, ga);
        }
        Op::SumAll(a) => accumulate(nodes, grads, *a, vec![g[0]; val(*a).numel()]),
        Op::Concat(parts, axis) => {
            let (outer, total, inner) = axis_split(out_shape, *axis);
            let mut offset = 0;
            for &p in parts {
                let len = val(p).shape()[*axis];
                if rg(p) {
                    let mut gp = Vec::with_capacity(outer * len * inner);
                    for o in 0..outer {
                        let base = (o * total + offset) * inner;
                        gp.extend_from_slice(&g[base..base + len * inner]);
                    }
                    accumulate(nodes, grads, p, gp);
                }
                offset += len;
            }
        }
        Op::Narrow(a, axis, start) => {
            let s = val(*a).shape();
            let (outer, n, inner) = axis_split(s, *axis);
            let len = out_shape[*axis];
            let mut ga = vec![T::zero(); numel(s)];
            for o in 0..outer {
                let base = (o * n + start) * inner;
                ga[base..base + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
            }
            accumulate(nodes, grads, *a, ga);
        }
        Op::Permute(a, perm) => {
            let mut inv = vec![0; perm.len()];
            for (i, &p) in perm.iter().enumerate() {
                inv[p] = i;
            }
            accumulate(nodes, grads, *a, permute_data(g, out_shape, &inv));
        }
        Op::Bilinear { src, coords, mask } => {
            let (sv, cv) = (val(*src), val(*coords));
            let ss = sv.shape();
            let (bn, c, h, w) = (ss[0], ss[1], ss[2], ss[3]);
            let np = out_shape[2] * out_shape[3];
            let mut gs = rg(*src).then(|| vec![T::zero(); sv.numel()]);
            let mut gc = rg(*coords).then(|| vec![T::zero(); cv.numel()]);
            for b in 0..bn {
                for p in 0..np {
                    if mask.data()[b * np + p] == T::zero() {
                        continue;
                    }
                    let x = cv.data()[(b * 2) * np + p].as_f64();
                    let yy = cv.data()[(b * 2 + 1) * np + p].as_f64();
                    let tap = kernels::bilinear_tap(x, yy, w, h).expect("mask marks valid taps");
                    let (fx, fy) = (T::from_f64(tap.fx), T::from_f64(tap.fy));
                    let one = T::one();
                    let idx = [
                        tap.y0 * w + tap.x0,
                        tap.y0 * w + tap.x0 + 1,
                        (tap.y0 + 1) * w + tap.x0,
                        (tap.y0 + 1) * w + tap.x0 + 1,
                    ];
                    let wts = [(one - fx) * (one - fy), fx * (one - fy), (one - fx) * fy, fx * fy];
                    let (mut gx, mut gy) = (T::zero(), T::zero());
                    for ch in 0..c {
                        let go = g[(b * c + ch) * np + p];
                        let base = (b * c + ch) * h * w;
                        if let Some(gs) = gs.as_mut() {
                            for (k, &i) in idx.iter().enumerate() {
                                gs[base + i] = gs[base + i] + go * wts[k];
                            }
                        }
                        if gc.is_some() {
                            let pl = &sv.data()[base..base + h * w];
                            let (i00, i01, i10, i11) = (pl[idx[0]], pl[idx[1]], pl[idx[2]], pl[idx[3]]);
                            gx = gx + go * ((one - fy) * (i01 - i00) + fy * (i11 - i10));
                            gy = gy + go * ((one - fx) * (i10 - i00) + fx * (i11 - i01));
                        }
                    }
                    if let Some(gc) = gc.as_mut() {
                        gc[(b * 2) * np + p] = gx;
                        gc[(b * 2 + 1) * np + p] = gy;
                    }
                }
            }
            if let Some(gs) = gs {
                accumulate(nodes, grads, *src, gs);
            }
            if let Some(gc) = gc {
                accumulate(nodes, grads, *coords, gc);
            }
        }
        Op::AvgPool3(a) => {
            let (h, w) = (out_shape[out_shape.len() - 2], out_shape[out_shape.len() - 1]);
            let planes = numel(&out_shape[..out_shape.len() - 2]);
            let ninth = T::from_f64(1.0 / 9.0);
            let mut ga = vec![T::zero(); g.len()];
            for p in 0..planes {
                let src = &g[p * h * w..(p + 1) * h * w];
                let dst = &mut ga[p * h * w..(p + 1) * h * w];
                for yy in 0..h {
                    for xx in 0..w {
                        let v = src[yy * w + xx] * ninth;
                        for dy in -1..=1isize {
                            let ry = kernels::reflect(yy as isize + dy, h);
                            for dx in -1..=1isize {
                                let i = ry * w + kernels::reflect(xx as isize + dx, w);
                                dst[i] = dst[i] + v;
                            }
                        }
                    }
                }
            }
            accumulate(nodes, grads, *a, ga);
        }
        Op::Rodrigues(a) => {
            let av = val(*a);
            let mut ga = Vec::with_capacity(av.numel());
            for (bi, r) in av.data().chunks(3).enumerate() {
                let jac = kernels::rodrigues_jacobian([r[0].as_f64(), r[1].as_f64(), r[2].as_f64()]);
                let go = &g[bi * 9..(bi + 1) * 9];
                for d in jac.iter() {
                    let s: f64 = d.iter().zip(go).map(|(&j, &x)| j * x.as_f64()).sum();
                    ga.push(T::from_f64(s));
                }
            }
            accumulate(nodes, grads, *a, ga);
        }
    }
    Ok(())
}
