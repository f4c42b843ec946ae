use std::collections::{BTreeMap, HashMap};
use std::rc::Rc;

use super::real::{gemm, View};
use super::tensor::numel;
use super::{NumericsError, ParamStore, Real, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PadMode {
    Zero,
    /// Replicate border pixels.
    Edge,
}

/// Precomputed sparse interpolation stencil: output row `m` is
/// `sum_j weight[m*k+j] * input[index[m*k+j]]`. Invalid taps use `u32::MAX`.
#[derive(Clone, Debug)]
pub struct GatherTable<T> {
    pub taps: usize,
    pub rows_in: usize,
    pub index: Vec<u32>,
    pub weight: Vec<T>,
}

impl<T: Real> GatherTable<T> {
    pub const INVALID: u32 = u32::MAX;

    pub fn rows_out(&self) -> usize {
        if self.taps == 0 {
            0
        } else {
            self.index.len() / self.taps
        }
    }

    pub fn cast<U: Real>(&self) -> GatherTable<U> {
        GatherTable {
            taps: self.taps,
            rows_in: self.rows_in,
            index: self.index.clone(),
            weight: self.weight.iter().map(|w| U::of(w.as_f64())).collect(),
        }
    }
}

#[derive(Clone, Copy, Debug)]
enum BinKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug)]
enum UnKind {
    Neg,
    Exp,
    Log,
    Sigmoid,
    Tanh,
    Gelu,
    Relu,
    LeakyRelu(f64),
    Softplus,
    Abs,
    Square,
    Sqrt,
    Affine(f64, f64),
}

enum Op<T> {
    Leaf,
    Binary {
        kind: BinKind,
        a: usize,
        b: usize,
    },
    Unary {
        kind: UnKind,
        a: usize,
    },
    Sum {
        a: usize,
    },
    SumAxis {
        a: usize,
        axis: usize,
    },
    MatMul {
        a: usize,
        b: usize,
        tb: bool,
        shared_b: bool,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Reshape {
        a: usize,
    },
    Permute {
        a: usize,
        perm: Vec<usize>,
    },
    Concat {
        parts: Vec<usize>,
        axis: usize,
    },
    Narrow {
        a: usize,
        axis: usize,
        start: usize,
    },
    GatherRows {
        a: usize,
        index: Rc<Vec<usize>>,
    },
    WeightedGather {
        a: usize,
        table: Rc<GatherTable<T>>,
    },
    Softmax {
        a: usize,
    },
    LayerNorm {
        a: usize,
        rstd: Vec<T>,
    },
    Conv2d {
        x: usize,
        w: usize,
        stride: usize,
        pad: usize,
        mode: PadMode,
    },
    Upsample2x {
        a: usize,
    },
    Composite {
        a: usize,
    },
    SegmentMax {
        a: usize,
        argmax: Vec<usize>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    name: Option<String>,
    requires_grad: bool,
}

/// Named gradients of a backward pass.
#[derive(Clone, Debug, Default)]
pub struct Gradients<T> {
    map: BTreeMap<String, Tensor<T>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.map.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.map.iter()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

/// Eagerly evaluated computation graph with reverse-mode differentiation.
///
/// Every operation computes its value when recorded; the tape order is a
/// topological order, so [`Graph::backward`] is a single reverse sweep.
pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
    params: HashMap<String, Var>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(op: &'static str, detail: String) -> NumericsError {
    NumericsError::Shape { op, detail }
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank {
            a[i + a.len() - rank]
        } else {
            1
        };
        let db = if i + b.len() >= rank {
            b[i + b.len() - rank]
        } else {
            1
        };
        out[i] = if da == db {
            da
        } else if da == 1 {
            db
        } else if db == 1 {
            da
        } else {
            return None;
        };
    }
    Some(out)
}

/// Element strides of `shape` when broadcast into `out` (zero on broadcast axes).
fn bcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let rank = out.len();
    let mut strides = vec![0; rank];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        let oi = i + rank - shape.len();
        strides[oi] = if shape[i] == 1 && out[oi] != 1 {
            0
        } else {
            acc
        };
        acc *= shape[i];
    }
    strides
}

/// Visit every output index with the matching flat offsets of both operands.
fn for_each_bcast(
    out: &[usize],
    sa: &[usize],
    sb: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let total = numel(out);
    if total == 0 {
        return;
    }
    if out.is_empty() {
        f(0, 0, 0);
        return;
    }
    let rank = out.len();
    let inner = out[rank - 1];
    let (ia_step, ib_step) = (sa[rank - 1], sb[rank - 1]);
    let mut idx = vec![0usize; rank];
    let (mut base_a, mut base_b) = (0usize, 0usize);
    let mut i = 0;
    while i < total {
        let (mut ia, mut ib) = (base_a, base_b);
        for _ in 0..inner {
            f(i, ia, ib);
            i += 1;
            ia += ia_step;
            ib += ib_step;
        }
        let mut d = rank - 1;
        loop {
            if d == 0 {
                return;
            }
            d -= 1;
            idx[d] += 1;
            base_a += sa[d];
            base_b += sb[d];
            if idx[d] < out[d] {
                break;
            }
            base_a -= sa[d] * out[d];
            base_b -= sb[d] * out[d];
            idx[d] = 0;
        }
    }
}

fn row_strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

fn permute_data<T: Real>(data: &[T], shape: &[usize], perm: &[usize]) -> (Vec<usize>, Vec<T>) {
    let in_strides = row_strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(data.len());
    let zeros = vec![0; out_shape.len()];
    for_each_bcast(&out_shape, &strides, &zeros, |_, ia, _| out.push(data[ia]));
    if out_shape.is_empty() {
        out = data.to_vec();
    }
    (out_shape, out)
}

fn gelu_parts(x: f64) -> (f64, f64) {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    let inner = C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    let y = 0.5 * x * (1.0 + t);
    let dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * 0.044715 * x * x);
    (y, dy)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

struct ConvGeom {
    b: usize,
    h: usize,
    w: usize,
    ci: usize,
    kh: usize,
    kw: usize,
    co: usize,
    ho: usize,
    wo: usize,
    stride: usize,
    pad: usize,
    mode: PadMode,
}

impl ConvGeom {
    /// Source pixel for output (oy, ox) and kernel tap (ky, kx), if any.
    #[inline]
    fn source(&self, oy: usize, ox: usize, ky: usize, kx: usize) -> Option<(usize, usize)> {
        let y = (oy * self.stride + ky) as isize - self.pad as isize;
        let x = (ox * self.stride + kx) as isize - self.pad as isize;
        match self.mode {
            PadMode::Zero => {
                if y < 0 || x < 0 || y >= self.h as isize || x >= self.w as isize {
                    None
                } else {
                    Some((y as usize, x as usize))
                }
            }
            PadMode::Edge => Some((
                y.clamp(0, self.h as isize - 1) as usize,
                x.clamp(0, self.w as isize - 1) as usize,
            )),
        }
    }

    fn im2col<T: Real>(&self, x: &[T]) -> Vec<T> {
        let kcols = self.kh * self.kw * self.ci;
        let mut cols = vec![T::zero(); self.b * self.ho * self.wo * kcols];
        let mut row = 0;
        for bi in 0..self.b {
            for oy in 0..self.ho {
                for ox in 0..self.wo {
                    let dst = &mut cols[row * kcols..(row + 1) * kcols];
                    for ky in 0..self.kh {
                        for kx in 0..self.kw {
                            if let Some((y, xx)) = self.source(oy, ox, ky, kx) {
                                let src = ((bi * self.h + y) * self.w + xx) * self.ci;
                                let d = (ky * self.kw + kx) * self.ci;
                                dst[d..d + self.ci].copy_from_slice(&x[src..src + self.ci]);
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
        cols
    }

    fn col2im<T: Real>(&self, cols: &[T], dx: &mut [T]) {
        let kcols = self.kh * self.kw * self.ci;
        let mut row = 0;
        for bi in 0..self.b {
            for oy in 0..self.ho {
                for ox in 0..self.wo {
                    let src = &cols[row * kcols..(row + 1) * kcols];
                    for ky in 0..self.kh {
                        for kx in 0..self.kw {
                            if let Some((y, xx)) = self.source(oy, ox, ky, kx) {
                                let dst = ((bi * self.h + y) * self.w + xx) * self.ci;
                                let s = (ky * self.kw + kx) * self.ci;
                                for c in 0..self.ci {
                                    dx[dst + c] += src[s + c];
                                }
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            params: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(
        &mut self,
        value: Tensor<T>,
        op: Op<T>,
        opname: &'static str,
    ) -> Result<Var, NumericsError> {
        if !value.is_finite() {
            return Err(NumericsError::NonFinite {
                op: opname,
                node: self.nodes.len(),
            });
        }
        let requires_grad = match &op {
            Op::Leaf => false,
            Op::Binary { a, b, .. } => self.rg(*a) || self.rg(*b),
            Op::Unary { a, .. }
            | Op::Sum { a }
            | Op::SumAxis { a, .. }
            | Op::Reshape { a }
            | Op::Permute { a, .. }
            | Op::Narrow { a, .. }
            | Op::GatherRows { a, .. }
            | Op::WeightedGather { a, .. }
            | Op::Softmax { a }
            | Op::LayerNorm { a, .. }
            | Op::Upsample2x { a }
            | Op::Composite { a }
            | Op::SegmentMax { a, .. } => self.rg(*a),
            Op::MatMul { a, b, .. } => self.rg(*a) || self.rg(*b),
            Op::Concat { parts, .. } => parts.iter().any(|&p| self.rg(p)),
            Op::Conv2d { x, w, .. } => self.rg(*x) || self.rg(*w),
        };
        self.nodes.push(Node {
            value,
            op,
            name: None,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, id: usize) -> bool {
        self.nodes[id].requires_grad
    }

    fn node(&self, v: Var) -> Result<&Node<T>, NumericsError> {
        self.nodes.get(v.0).ok_or(NumericsError::UnknownNode(v.0))
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Non-differentiable leaf.
    pub fn constant(&mut self, t: Tensor<T>) -> Result<Var, NumericsError> {
        self.push(t, Op::Leaf, "constant")
    }

    /// Differentiable named leaf; its gradient is reported by [`Graph::backward`].
    pub fn input(&mut self, name: &str, t: Tensor<T>) -> Result<Var, NumericsError> {
        let v = self.push(t, Op::Leaf, "input")?;
        self.nodes[v.0].name = Some(name.to_string());
        self.nodes[v.0].requires_grad = true;
        Ok(v)
    }

    /// Leaf bound to a stored parameter. Repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore<T>, name: &str) -> Result<Var, NumericsError> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let t = store
            .value(name)
            .ok_or_else(|| NumericsError::MissingParam(name.to_string()))?
            .clone();
        let v = self.input(name, t)?;
        if !store.is_trainable(name) {
            self.nodes[v.0].requires_grad = false;
        }
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    /// Same value, cut from the gradient tape.
    pub fn detach(&mut self, a: Var) -> Result<Var, NumericsError> {
        let t = self.node(a)?.value.clone();
        self.constant(t)
    }

    fn binary(&mut self, kind: BinKind, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (ta, tb) = (&self.node(a)?.value, &self.node(b)?.value);
        let out_shape = broadcast_shape(ta.shape(), tb.shape()).ok_or_else(|| {
            shape_err("broadcast", format!("{:?} vs {:?}", ta.shape(), tb.shape()))
        })?;
        let (da, db) = (ta.data(), tb.data());
        let mut out = vec![T::zero(); numel(&out_shape)];
        if ta.shape() == tb.shape() {
            for i in 0..out.len() {
                out[i] = apply_bin(kind, da[i], db[i]);
            }
        } else {
            let sa = bcast_strides(ta.shape(), &out_shape);
            let sb = bcast_strides(tb.shape(), &out_shape);
            for_each_bcast(&out_shape, &sa, &sb, |i, ia, ib| {
                out[i] = apply_bin(kind, da[ia], db[ib])
            });
        }
        let name = match kind {
            BinKind::Add => "add",
            BinKind::Sub => "sub",
            BinKind::Mul => "mul",
            BinKind::Div => "div",
        };
        self.push(
            Tensor::from_vec(&out_shape, out),
            Op::Binary {
                kind,
                a: a.0,
                b: b.0,
            },
            name,
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.binary(BinKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.binary(BinKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.binary(BinKind::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.binary(BinKind::Div, a, b)
    }

    fn unary(&mut self, kind: UnKind, a: Var, name: &'static str) -> Result<Var, NumericsError> {
        let t = &self.node(a)?.value;
        let out = t.map(|x| T::of(unary_fwd(kind, x.as_f64())));
        self.push(out, Op::Unary { kind, a: a.0 }, name)
    }

    pub fn neg(&mut self, a: Var) -> Result<Var, NumericsError> {
        self.unary(UnKind::Neg, a, "neg")
    }
    pub fn exp(&mut self, a: Var) -> Result<Var, NumericsError> {
        self.unary(UnKind::Exp, a, "exp")
    }
    pub fn log(&mut self, a: Var) -> Result<Var, NumericsError> {
        self.unary(UnKind::Log, a, "log")
    }
    pub fn sigmoid(&mut self, a: Var) -> Result<Var, NumericsError> {
        self.unary(UnKind::Sigmoid, a, "sigmoid")
    }
    pub fn tanh(&mut self, a: Var) -> Result<Var, NumericsError> {
        self.unary(UnKind::Tanh, a, "tanh")
    }
    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Result<Var, NumericsError> {
        self.unary(UnKind::Gelu, a, "gelu")
    }
    pub fn relu(&mut self, a: Var) -> Result<Var, NumericsError> {
        self.unary(UnKind::Relu, a, "relu")
    }
    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Result<Var, NumericsError> {
        self.unary(UnKind::LeakyRelu(slope), a, "leaky_relu")
    }
    pub fn softplus(&mut self, a: Var) -> Result<Var, NumericsError> {
        self.unary(UnKind::Softplus, a, "softplus")
    }
    /// |x|; the derivative at zero is taken as zero.
    pub fn abs(&mut self, a: Var) -> Result<Var, NumericsError> {
        self.unary(UnKind::Abs, a, "abs")
    }
    pub fn square(&mut self, a: Var) -> Result<Var, NumericsError> {
        self.unary(UnKind::Square, a, "square")
    }
    pub fn sqrt(&mut self, a: Var) -> Result<Var, NumericsError> {
        self.unary(UnKind::Sqrt, a, "sqrt")
    }
    /// `a * mul + add` with scalar constants.
    pub fn affine(&mut self, a: Var, mul: f64, add: f64) -> Result<Var, NumericsError> {
        self.unary(UnKind::Affine(mul, add), a, "affine")
    }
    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var, NumericsError> {
        self.affine(a, s, 0.0)
    }

    /// Sum of all elements, as a rank-0 tensor.
    pub fn sum(&mut self, a: Var) -> Result<Var, NumericsError> {
        let s = self.node(a)?.value.data().iter().copied().sum::<T>();
        self.push(Tensor::scalar(s), Op::Sum { a: a.0 }, "sum")
    }

    pub fn mean(&mut self, a: Var) -> Result<Var, NumericsError> {
        let n = self.node(a)?.value.numel().max(1);
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n as f64)
    }

    /// Sum over one axis, which is removed from the shape.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var, NumericsError> {
        let t = &self.node(a)?.value;
        if axis >= t.rank() {
            return Err(shape_err(
                "sum_axis",
                format!("axis {axis} of {:?}", t.shape()),
            ));
        }
        let shape = t.shape();
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out = vec![T::zero(); outer * inner];
        let d = t.data();
        for o in 0..outer {
            for l in 0..len {
                let src = &d[(o * len + l) * inner..(o * len + l + 1) * inner];
                let dst = &mut out[o * inner..(o + 1) * inner];
                for (x, &y) in dst.iter_mut().zip(src) {
                    *x += y;
                }
            }
        }
        let mut oshape = shape.to_vec();
        oshape.remove(axis);
        self.push(
            Tensor::from_vec(&oshape, out),
            Op::SumAxis { a: a.0, axis },
            "sum_axis",
        )
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var, NumericsError> {
        let len = *self.node(a)?.value.shape().get(axis).unwrap_or(&1);
        let s = self.sum_axis(a, axis)?;
        self.scale(s, 1.0 / len.max(1) as f64)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, tb: bool) -> Result<Var, NumericsError> {
        let (ta, tbv) = (&self.node(a)?.value, &self.node(b)?.value);
        let (sa, sb) = (ta.shape(), tbv.shape());
        if sa.len() < 2 || sb.len() < 2 {
            return Err(shape_err("matmul", format!("{sa:?} x {sb:?}")));
        }
        let m = sa[sa.len() - 2];
        let k = sa[sa.len() - 1];
        let (kb, n) = if tb {
            (sb[sb.len() - 1], sb[sb.len() - 2])
        } else {
            (sb[sb.len() - 2], sb[sb.len() - 1])
        };
        let shared_b = sb.len() == 2;
        if k != kb || (!shared_b && sb[..sb.len() - 2] != sa[..sa.len() - 2]) {
            return Err(shape_err(
                "matmul",
                format!("{sa:?} x {sb:?} (transpose_b={tb})"),
            ));
        }
        let lead: usize = sa[..sa.len() - 2].iter().product();
        let (batch, m_eff) = if shared_b { (1, lead * m) } else { (lead, m) };
        let mut out = vec![T::zero(); lead * m * n];
        for g in 0..batch {
            let bv = b_view(g, k, n, tb, shared_b);
            gemm(
                m_eff,
                k,
                n,
                ta.data(),
                View::row_major(g * m_eff * k, k),
                tbv.data(),
                bv,
                T::zero(),
                &mut out,
                View::row_major(g * m_eff * n, n),
            );
        }
        let mut oshape = sa[..sa.len() - 2].to_vec();
        oshape.extend_from_slice(&[m, n]);
        self.push(
            Tensor::from_vec(&oshape, out),
            Op::MatMul {
                a: a.0,
                b: b.0,
                tb,
                shared_b,
                batch,
                m: m_eff,
                k,
                n,
            },
            "matmul",
        )
    }

    /// `a[..., M, K] · b[..., K, N]`; a rank-2 `b` is shared across the batch.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.matmul_impl(a, b, false)
    }

    /// `a[..., M, K] · b[..., N, K]ᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.matmul_impl(a, b, true)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, NumericsError> {
        let t = self.node(a)?.value.clone().reshape(shape)?;
        self.push(t, Op::Reshape { a: a.0 }, "reshape")
    }

    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var, NumericsError> {
        let t = &self.node(a)?.value;
        let mut seen = vec![false; t.rank()];
        if perm.len() != t.rank()
            || perm
                .iter()
                .any(|&p| p >= t.rank() || std::mem::replace(&mut seen[p], true))
        {
            return Err(shape_err("permute", format!("{perm:?} on {:?}", t.shape())));
        }
        let (shape, data) = permute_data(t.data(), t.shape(), perm);
        self.push(
            Tensor::from_vec(&shape, data),
            Op::Permute {
                a: a.0,
                perm: perm.to_vec(),
            },
            "permute",
        )
    }

    pub fn transpose(&mut self, a: Var, i: usize, j: usize) -> Result<Var, NumericsError> {
        let rank = self.node(a)?.value.rank();
        let mut perm: Vec<usize> = (0..rank).collect();
        if i >= rank || j >= rank {
            return Err(shape_err(
                "transpose",
                format!("axes {i},{j} of rank {rank}"),
            ));
        }
        perm.swap(i, j);
        self.permute(a, &perm)
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var, NumericsError> {
        let first = self
            .node(
                *parts
                    .first()
                    .ok_or_else(|| shape_err("concat", "no inputs".into()))?,
            )?
            .value
            .shape()
            .to_vec();
        if axis >= first.len() {
            return Err(shape_err("concat", format!("axis {axis} of {first:?}")));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.node(p)?.value.shape();
            if s.len() != first.len()
                || s.iter()
                    .enumerate()
                    .any(|(i, &d)| i != axis && d != first[i])
            {
                return Err(shape_err(
                    "concat",
                    format!("{s:?} vs {first:?} on axis {axis}"),
                ));
            }
            total += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let t = &self.nodes[p.0].value;
                let len = t.shape()[axis] * inner;
                out.extend_from_slice(&t.data()[o * len..(o + 1) * len]);
            }
        }
        let mut shape = first.clone();
        shape[axis] = total;
        self.push(
            Tensor::from_vec(&shape, out),
            Op::Concat {
                parts: parts.iter().map(|p| p.0).collect(),
                axis,
            },
            "concat",
        )
    }

    /// Slice `[start, start+len)` along `axis`.
    pub fn narrow(
        &mut self,
        a: Var,
        axis: usize,
        start: usize,
        len: usize,
    ) -> Result<Var, NumericsError> {
        let t = &self.node(a)?.value;
        let shape = t.shape();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(shape_err(
                "narrow",
                format!("[{start}, {}) on axis {axis} of {shape:?}", start + len),
            ));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let full = shape[axis];
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * full + start) * inner;
            out.extend_from_slice(&t.data()[base..base + len * inner]);
        }
        let mut oshape = shape.to_vec();
        oshape[axis] = len;
        self.push(
            Tensor::from_vec(&oshape, out),
            Op::Narrow {
                a: a.0,
                axis,
                start,
            },
            "narrow",
        )
    }

    /// Select rows along axis 0 (repeats allowed).
    pub fn gather_rows(&mut self, a: Var, index: Rc<Vec<usize>>) -> Result<Var, NumericsError> {
        let t = &self.node(a)?.value;
        if t.rank() == 0 {
            return Err(shape_err("gather_rows", "rank-0 input".into()));
        }
        let rows = t.shape()[0];
        let inner: usize = t.shape()[1..].iter().product();
        let mut out = Vec::with_capacity(index.len() * inner);
        for &r in index.iter() {
            if r >= rows {
                return Err(shape_err("gather_rows", format!("row {r} of {rows}")));
            }
            out.extend_from_slice(&t.data()[r * inner..(r + 1) * inner]);
        }
        let mut shape = t.shape().to_vec();
        shape[0] = index.len();
        self.push(
            Tensor::from_vec(&shape, out),
            Op::GatherRows { a: a.0, index },
            "gather_rows",
        )
    }

    /// Interpolating gather from `a[R, C]` with a precomputed stencil.
    pub fn weighted_gather(
        &mut self,
        a: Var,
        table: Rc<GatherTable<T>>,
    ) -> Result<Var, NumericsError> {
        let t = &self.node(a)?.value;
        if t.rank() != 2 || t.shape()[0] != table.rows_in {
            return Err(shape_err(
                "weighted_gather",
                format!(
                    "input {:?}, table expects {} rows",
                    t.shape(),
                    table.rows_in
                ),
            ));
        }
        let c = t.shape()[1];
        let m = table.rows_out();
        let mut out = vec![T::zero(); m * c];
        let d = t.data();
        for r in 0..m {
            let dst = &mut out[r * c..(r + 1) * c];
            for j in 0..table.taps {
                let idx = table.index[r * table.taps + j];
                if idx == GatherTable::<T>::INVALID {
                    continue;
                }
                let w = table.weight[r * table.taps + j];
                let src = &d[idx as usize * c..(idx as usize + 1) * c];
                for (o, &s) in dst.iter_mut().zip(src) {
                    *o += w * s;
                }
            }
        }
        self.push(
            Tensor::from_vec(&[m, c], out),
            Op::WeightedGather { a: a.0, table },
            "weighted_gather",
        )
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var, NumericsError> {
        let t = &self.node(a)?.value;
        let n = *t
            .shape()
            .last()
            .ok_or_else(|| shape_err("softmax", "rank-0 input".into()))?;
        let mut out = t.data().to_vec();
        for row in out.chunks_mut(n.max(1)) {
            let mx = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let mut s = T::zero();
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        let shape = t.shape().to_vec();
        self.push(
            Tensor::from_vec(&shape, out),
            Op::Softmax { a: a.0 },
            "softmax",
        )
    }

    /// Normalization over the last axis to zero mean and unit (biased) variance.
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Result<Var, NumericsError> {
        let t = &self.node(a)?.value;
        let n = *t
            .shape()
            .last()
            .ok_or_else(|| shape_err("layer_norm", "rank-0 input".into()))?;
        let mut out = t.data().to_vec();
        let mut rstds = Vec::with_capacity(out.len() / n.max(1));
        let inv_n = T::of(1.0 / n as f64);
        for row in out.chunks_mut(n.max(1)) {
            let mean = row.iter().copied().sum::<T>() * inv_n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_n;
            let rstd = T::one() / (var + T::of(eps)).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * rstd;
            }
            rstds.push(rstd);
        }
        let shape = t.shape().to_vec();
        self.push(
            Tensor::from_vec(&shape, out),
            Op::LayerNorm {
                a: a.0,
                rstd: rstds,
            },
            "layer_norm",
        )
    }

    /// 2-D convolution, channel-last: `x[B,H,W,Ci] * w[kh,kw,Ci,Co] -> [B,Ho,Wo,Co]`.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        stride: usize,
        pad: usize,
        mode: PadMode,
    ) -> Result<Var, NumericsError> {
        let g = self.conv_geom(x, w, stride, pad, mode)?;
        let cols = g.im2col(self.nodes[x.0].value.data());
        let kcols = g.kh * g.kw * g.ci;
        let rows = g.b * g.ho * g.wo;
        let mut out = vec![T::zero(); rows * g.co];
        gemm(
            rows,
            kcols,
            g.co,
            &cols,
            View::row_major(0, kcols),
            self.nodes[w.0].value.data(),
            View::row_major(0, g.co),
            T::zero(),
            &mut out,
            View::row_major(0, g.co),
        );
        self.push(
            Tensor::from_vec(&[g.b, g.ho, g.wo, g.co], out),
            Op::Conv2d {
                x: x.0,
                w: w.0,
                stride,
                pad,
                mode,
            },
            "conv2d",
        )
    }

    fn conv_geom(
        &self,
        x: Var,
        w: Var,
        stride: usize,
        pad: usize,
        mode: PadMode,
    ) -> Result<ConvGeom, NumericsError> {
        let (sx, sw) = (self.node(x)?.value.shape(), self.node(w)?.value.shape());
        if sx.len() != 4 || sw.len() != 4 || sx[3] != sw[2] || stride == 0 {
            return Err(shape_err(
                "conv2d",
                format!("x {sx:?}, w {sw:?}, stride {stride}"),
            ));
        }
        let (h, wd, kh, kw) = (sx[1], sx[2], sw[0], sw[1]);
        if h + 2 * pad < kh || wd + 2 * pad < kw {
            return Err(shape_err(
                "conv2d",
                format!("kernel {kh}x{kw} larger than padded input {h}x{wd}"),
            ));
        }
        Ok(ConvGeom {
            b: sx[0],
            h,
            w: wd,
            ci: sx[3],
            kh,
            kw,
            co: sw[3],
            ho: (h + 2 * pad - kh) / stride + 1,
            wo: (wd + 2 * pad - kw) / stride + 1,
            stride,
            pad,
            mode,
        })
    }

    /// Nearest-neighbour 2x upsampling of `[B,H,W,C]`.
    pub fn upsample2x(&mut self, a: Var) -> Result<Var, NumericsError> {
        let t = &self.node(a)?.value;
        let s = t.shape();
        if s.len() != 4 {
            return Err(shape_err("upsample2x", format!("{s:?}")));
        }
        let (b, h, w, c) = (s[0], s[1], s[2], s[3]);
        let mut out = Vec::with_capacity(b * 4 * h * w * c);
        let d = t.data();
        for bi in 0..b {
            for y in 0..2 * h {
                for x in 0..2 * w {
                    let src = ((bi * h + y / 2) * w + x / 2) * c;
                    out.extend_from_slice(&d[src..src + c]);
                }
            }
        }
        self.push(
            Tensor::from_vec(&[b, 2 * h, 2 * w, c], out),
            Op::Upsample2x { a: a.0 },
            "upsample2x",
        )
    }

    /// Front-to-back compositing weights along the last axis:
    /// `w_i = alpha_i * prod_{j<i} (1 - alpha_j)`.
    pub fn composite_weights(&mut self, alpha: Var) -> Result<Var, NumericsError> {
        let t = &self.node(alpha)?.value;
        let n = *t
            .shape()
            .last()
            .ok_or_else(|| shape_err("composite", "rank-0 input".into()))?;
        let mut out = t.data().to_vec();
        for row in out.chunks_mut(n.max(1)) {
            let mut trans = T::one();
            for v in row.iter_mut() {
                let a = *v;
                *v = a * trans;
                trans *= T::one() - a;
            }
        }
        let shape = t.shape().to_vec();
        self.push(
            Tensor::from_vec(&shape, out),
            Op::Composite { a: alpha.0 },
            "composite",
        )
    }

    /// Per-segment elementwise maximum of rows of `a[P, C]`; empty segments are zero.
    pub fn segment_max(
        &mut self,
        a: Var,
        segment: &[usize],
        segments: usize,
    ) -> Result<Var, NumericsError> {
        let t = &self.node(a)?.value;
        if t.rank() != 2 || t.shape()[0] != segment.len() {
            return Err(shape_err(
                "segment_max",
                format!("input {:?}, {} segment ids", t.shape(), segment.len()),
            ));
        }
        let c = t.shape()[1];
        let mut out = vec![T::zero(); segments * c];
        let mut argmax = vec![usize::MAX; segments * c];
        let d = t.data();
        for (p, &s) in segment.iter().enumerate() {
            if s >= segments {
                return Err(shape_err(
                    "segment_max",
                    format!("segment {s} of {segments}"),
                ));
            }
            for ch in 0..c {
                let v = d[p * c + ch];
                let o = s * c + ch;
                if argmax[o] == usize::MAX || v > out[o] {
                    out[o] = v;
                    argmax[o] = p;
                }
            }
        }
        self.push(
            Tensor::from_vec(&[segments, c], out),
            Op::SegmentMax { a: a.0, argmax },
            "segment_max",
        )
    }

    /// Reverse sweep from a scalar `loss`. Returns gradients for every named
    /// leaf in the graph; leaves the loss does not depend on get zeros.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>, NumericsError> {
        let lt = &self.node(loss)?.value;
        if lt.numel() != 1 {
            return Err(NumericsError::NotScalar {
                shape: lt.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        let mut result = BTreeMap::new();
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            let Some(g) = grads[id].take() else {
                continue;
            };
            if !node.requires_grad {
                continue;
            }
            if let Some(name) = &node.name {
                result.insert(name.clone(), Tensor::from_vec(node.value.shape(), g));
                continue;
            }
            self.backprop_node(id, &g, &mut grads);
        }
        for node in &self.nodes {
            if let Some(name) = &node.name {
                result
                    .entry(name.clone())
                    .or_insert_with(|| Tensor::zeros(node.value.shape()));
            }
        }
        Ok(Gradients { map: result })
    }

    fn acc(&self, grads: &mut [Option<Vec<T>>], id: usize, f: impl FnOnce(&mut [T])) {
        if !self.nodes[id].requires_grad {
            return;
        }
        let slot = grads[id].get_or_insert_with(|| vec![T::zero(); self.nodes[id].value.numel()]);
        f(slot);
    }

    fn backprop_node(&self, id: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[id];
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Binary { kind, a, b } => {
                let (ta, tb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                let (da, db) = (ta.data(), tb.data());
                let same = ta.shape() == tb.shape();
                let sa = bcast_strides(ta.shape(), out.shape());
                let sb = bcast_strides(tb.shape(), out.shape());
                let kind = *kind;
                let visit = |f: &mut dyn FnMut(usize, usize, usize)| {
                    if same {
                        for i in 0..g.len() {
                            f(i, i, i);
                        }
                    } else {
                        for_each_bcast(out.shape(), &sa, &sb, f);
                    }
                };
                self.acc(grads, *a, |ga| {
                    visit(&mut |i, ia, ib| {
                        ga[ia] += match kind {
                            BinKind::Add | BinKind::Sub => g[i],
                            BinKind::Mul => g[i] * db[ib],
                            BinKind::Div => g[i] / db[ib],
                        }
                    })
                });
                self.acc(grads, *b, |gb| {
                    visit(&mut |i, ia, ib| {
                        gb[ib] += match kind {
                            BinKind::Add => g[i],
                            BinKind::Sub => -g[i],
                            BinKind::Mul => g[i] * da[ia],
                            BinKind::Div => -g[i] * da[ia] / (db[ib] * db[ib]),
                        }
                    })
                });
            }
            Op::Unary { kind, a } => {
                let x = self.nodes[*a].value.data();
                let y = out.data();
                let kind = *kind;
                self.acc(grads, *a, |ga| {
                    for i in 0..g.len() {
                        ga[i] += g[i] * T::of(unary_deriv(kind, x[i].as_f64(), y[i].as_f64()));
                    }
                });
            }
            Op::Sum { a } => {
                self.acc(grads, *a, |ga| {
                    for v in ga.iter_mut() {
                        *v += g[0];
                    }
                });
            }
            Op::SumAxis { a, axis } => {
                let shape = self.nodes[*a].value.shape();
                let outer: usize = shape[..*axis].iter().product();
                let len = shape[*axis];
                let inner: usize = shape[axis + 1..].iter().product();
                self.acc(grads, *a, |ga| {
                    for o in 0..outer {
                        for l in 0..len {
                            let dst = &mut ga[(o * len + l) * inner..(o * len + l + 1) * inner];
                            for (d, &s) in dst.iter_mut().zip(&g[o * inner..(o + 1) * inner]) {
                                *d += s;
                            }
                        }
                    }
                });
            }
            Op::MatMul {
                a,
                b,
                tb,
                shared_b,
                batch,
                m,
                k,
                n,
            } => {
                let (m, k, n, tb, shared_b) = (*m, *k, *n, *tb, *shared_b);
                let (ad, bd) = (self.nodes[*a].value.data(), self.nodes[*b].value.data());
                self.acc(grads, *a, |ga| {
                    for bi in 0..*batch {
                        // dA = dC · B'ᵀ
                        let bv = b_view(bi, k, n, tb, shared_b).transposed();
                        gemm(
                            m,
                            n,
                            k,
                            g,
                            View::row_major(bi * m * n, n),
                            bd,
                            bv,
                            T::one(),
                            ga,
                            View::row_major(bi * m * k, k),
                        );
                    }
                });
                self.acc(grads, *b, |gb| {
                    for bi in 0..*batch {
                        let av = View::row_major(bi * m * k, k);
                        let gv = View::row_major(bi * m * n, n);
                        if tb {
                            // dB [N,K] = dCᵀ · A
                            gemm(
                                n,
                                m,
                                k,
                                g,
                                gv.transposed(),
                                ad,
                                av,
                                T::one(),
                                gb,
                                View::row_major(bi * n * k, k),
                            );
                        } else {
                            let off = if shared_b { 0 } else { bi * k * n };
                            gemm(
                                k,
                                m,
                                n,
                                ad,
                                av.transposed(),
                                g,
                                gv,
                                T::one(),
                                gb,
                                View::row_major(off, n),
                            );
                        }
                    }
                });
            }
            Op::Reshape { a } => {
                self.acc(grads, *a, |ga| {
                    for (d, &s) in ga.iter_mut().zip(g) {
                        *d += s;
                    }
                });
            }
            Op::Permute { a, perm } => {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                let (_, back) = permute_data(g, out.shape(), &inv);
                self.acc(grads, *a, |ga| {
                    for (d, s) in ga.iter_mut().zip(back) {
                        *d += s;
                    }
                });
            }
            Op::Concat { parts, axis } => {
                let shape = out.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let total = shape[*axis] * inner;
                let mut offset = 0;
                for &p in parts {
                    let len = self.nodes[p].value.shape()[*axis] * inner;
                    self.acc(grads, p, |gp| {
                        for o in 0..outer {
                            let src = &g[o * total + offset..o * total + offset + len];
                            for (d, &s) in gp[o * len..(o + 1) * len].iter_mut().zip(src) {
                                *d += s;
                            }
                        }
                    });
                    offset += len;
                }
            }
            Op::Narrow { a, axis, start } => {
                let shape = self.nodes[*a].value.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let full = shape[*axis];
                let len = out.shape()[*axis];
                self.acc(grads, *a, |ga| {
                    for o in 0..outer {
                        let base = (o * full + start) * inner;
                        for (d, &s) in ga[base..base + len * inner]
                            .iter_mut()
                            .zip(&g[o * len * inner..(o + 1) * len * inner])
                        {
                            *d += s;
                        }
                    }
                });
            }
            Op::GatherRows { a, index } => {
                let inner: usize = out.shape()[1..].iter().product();
                self.acc(grads, *a, |ga| {
                    for (i, &r) in index.iter().enumerate() {
                        for (d, &s) in ga[r * inner..(r + 1) * inner]
                            .iter_mut()
                            .zip(&g[i * inner..(i + 1) * inner])
                        {
                            *d += s;
                        }
                    }
                });
            }
            Op::WeightedGather { a, table } => {
                let c = out.shape()[1];
                self.acc(grads, *a, |ga| {
                    for r in 0..table.rows_out() {
                        let src = &g[r * c..(r + 1) * c];
                        for j in 0..table.taps {
                            let idx = table.index[r * table.taps + j];
                            if idx == GatherTable::<T>::INVALID {
                                continue;
                            }
                            let w = table.weight[r * table.taps + j];
                            for (d, &s) in ga[idx as usize * c..(idx as usize + 1) * c]
                                .iter_mut()
                                .zip(src)
                            {
                                *d += w * s;
                            }
                        }
                    }
                });
            }
            Op::Softmax { a } => {
                let n = *out.shape().last().unwrap();
                let y = out.data();
                self.acc(grads, *a, |ga| {
                    for r in 0..y.len() / n.max(1) {
                        let (yr, gr) = (&y[r * n..(r + 1) * n], &g[r * n..(r + 1) * n]);
                        let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        for i in 0..n {
                            ga[r * n + i] += yr[i] * (gr[i] - dot);
                        }
                    }
                });
            }
            Op::LayerNorm { a, rstd } => {
                let n = *out.shape().last().unwrap();
                let y = out.data();
                let inv_n = T::of(1.0 / n as f64);
                self.acc(grads, *a, |ga| {
                    for (r, &rs) in rstd.iter().enumerate() {
                        let (yr, gr) = (&y[r * n..(r + 1) * n], &g[r * n..(r + 1) * n]);
                        let mg = gr.iter().copied().sum::<T>() * inv_n;
                        let mgy = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum::<T>() * inv_n;
                        for i in 0..n {
                            ga[r * n + i] += rs * (gr[i] - mg - yr[i] * mgy);
                        }
                    }
                });
            }
            Op::Conv2d {
                x,
                w,
                stride,
                pad,
                mode,
            } => {
                let geo = self
                    .conv_geom(Var(*x), Var(*w), *stride, *pad, *mode)
                    .expect("conv geometry validated in forward");
                let kcols = geo.kh * geo.kw * geo.ci;
                let rows = geo.b * geo.ho * geo.wo;
                let wd = self.nodes[*w].value.data();
                if self.nodes[*x].requires_grad {
                    let mut dcols = vec![T::zero(); rows * kcols];
                    gemm(
                        rows,
                        geo.co,
                        kcols,
                        g,
                        View::row_major(0, geo.co),
                        wd,
                        View::row_major(0, geo.co).transposed(),
                        T::zero(),
                        &mut dcols,
                        View::row_major(0, kcols),
                    );
                    self.acc(grads, *x, |gx| geo.col2im(&dcols, gx));
                }
                if self.nodes[*w].requires_grad {
                    let cols = geo.im2col(self.nodes[*x].value.data());
                    self.acc(grads, *w, |gw| {
                        gemm(
                            kcols,
                            rows,
                            geo.co,
                            &cols,
                            View::row_major(0, kcols).transposed(),
                            g,
                            View::row_major(0, geo.co),
                            T::one(),
                            gw,
                            View::row_major(0, geo.co),
                        )
                    });
                }
            }
            Op::Upsample2x { a } => {
                let s = self.nodes[*a].value.shape();
                let (b, h, w, c) = (s[0], s[1], s[2], s[3]);
                self.acc(grads, *a, |ga| {
                    let mut o = 0;
                    for bi in 0..b {
                        for y in 0..2 * h {
                            for x in 0..2 * w {
                                let dst = ((bi * h + y / 2) * w + x / 2) * c;
                                for ch in 0..c {
                                    ga[dst + ch] += g[o + ch];
                                }
                                o += c;
                            }
                        }
                    }
                });
            }
            Op::Composite { a } => {
                let n = *out.shape().last().unwrap();
                let alpha = self.nodes[*a].value.data();
                self.acc(grads, *a, |ga| {
                    for r in 0..alpha.len() / n.max(1) {
                        let al = &alpha[r * n..(r + 1) * n];
                        let gr = &g[r * n..(r + 1) * n];
                        // trans[i] = prod_{j<i} (1 - alpha_j)
                        let mut trans = vec![T::one(); n];
                        for i in 1..n {
                            trans[i] = trans[i - 1] * (T::one() - al[i - 1]);
                        }
                        // tail = sum_{i>k} g_i alpha_i prod_{k<j<i} (1 - alpha_j)
                        let mut tail = T::zero();
                        for kk in (0..n).rev() {
                            ga[r * n + kk] += trans[kk] * (gr[kk] - tail);
                            tail = gr[kk] * al[kk] + (T::one() - al[kk]) * tail;
                        }
                    }
                });
            }
            Op::SegmentMax { a, argmax } => {
                let c = out.shape()[1];
                self.acc(grads, *a, |ga| {
                    for (o, &p) in argmax.iter().enumerate() {
                        if p != usize::MAX {
                            ga[p * c + o % c] += g[o];
                        }
                    }
                });
            }
        }
    }
}

fn b_view(batch: usize, k: usize, n: usize, tb: bool, shared: bool) -> View {
    let off = if shared { 0 } else { batch * k * n };
    if tb {
        // B stored [N, K]; element (kk, j) lives at j*K + kk
        View {
            off,
            rs: 1,
            cs: k as isize,
        }
    } else {
        View::row_major(off, n)
    }
}

#[inline]
fn apply_bin<T: Real>(kind: BinKind, a: T, b: T) -> T {
    match kind {
        BinKind::Add => a + b,
        BinKind::Sub => a - b,
        BinKind::Mul => a * b,
        BinKind::Div => a / b,
    }
}

fn unary_fwd(kind: UnKind, x: f64) -> f64 {
    match kind {
        UnKind::Neg => -x,
        UnKind::Exp => x.exp(),
        UnKind::Log => x.ln(),
        UnKind::Sigmoid => sigmoid(x),
        UnKind::Tanh => x.tanh(),
        UnKind::Gelu => gelu_parts(x).0,
        UnKind::Relu => x.max(0.0),
        UnKind::LeakyRelu(s) => {
            if x > 0.0 {
                x
            } else {
                s * x
            }
        }
        UnKind::Softplus => x.max(0.0) + (-x.abs()).exp().ln_1p(),
        UnKind::Abs => x.abs(),
        UnKind::Square => x * x,
        UnKind::Sqrt => x.sqrt(),
        UnKind::Affine(m, a) => x * m + a,
    }
}

fn unary_deriv(kind: UnKind, x: f64, y: f64) -> f64 {
    match kind {
        UnKind::Neg => -1.0,
        UnKind::Exp => y,
        UnKind::Log => 1.0 / x,
        UnKind::Sigmoid => y * (1.0 - y),
        UnKind::Tanh => 1.0 - y * y,
        UnKind::Gelu => gelu_parts(x).1,
        UnKind::Relu => {
            if x > 0.0 {
                1.0
            } else {
                0.0
            }
        }
        UnKind::LeakyRelu(s) => {
            if x > 0.0 {
                1.0
            } else {
                s
            }
        }
        UnKind::Softplus => sigmoid(x),
        UnKind::Abs => {
            if x > 0.0 {
                1.0
            } else if x < 0.0 {
                -1.0
            } else {
                0.0
            }
        }
        UnKind::Square => 2.0 * x,
        UnKind::Sqrt => 0.5 / y,
        UnKind::Affine(m, _) => m,
    }
}
