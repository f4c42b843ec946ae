//! Layer building blocks expressed through [`Graph`] primitives.

use super::{Graph, Init, NumericsError, ParamStore, Real, Tensor, Var};

/// Additive logit for masked attention entries.
pub const MASK_NEG: f64 = -1e9;

pub const INIT_STD: f64 = 0.02;

pub fn init_linear<T: Real>(
    store: &mut ParamStore<T>,
    seed: u64,
    prefix: &str,
    din: usize,
    dout: usize,
) {
    store.init(
        seed,
        &format!("{prefix}.w"),
        &[din, dout],
        Init::TruncNormal(INIT_STD),
    );
    store.init(seed, &format!("{prefix}.b"), &[dout], Init::Zeros);
}

pub fn init_linear_nobias<T: Real>(
    store: &mut ParamStore<T>,
    seed: u64,
    prefix: &str,
    din: usize,
    dout: usize,
) {
    store.init(
        seed,
        &format!("{prefix}.w"),
        &[din, dout],
        Init::TruncNormal(INIT_STD),
    );
}

pub fn init_layer_norm<T: Real>(store: &mut ParamStore<T>, seed: u64, prefix: &str, dim: usize) {
    store.init(seed, &format!("{prefix}.g"), &[dim], Init::Ones);
    store.init(seed, &format!("{prefix}.b"), &[dim], Init::Zeros);
}

/// `x[..., din] · w + b`; the bias is skipped if the store has none.
pub fn linear<T: Real>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    prefix: &str,
    x: Var,
) -> Result<Var, NumericsError> {
    let w = g.param(store, &format!("{prefix}.w"))?;
    let y = g.matmul_any(x, w)?;
    let bname = format!("{prefix}.b");
    if store.contains(&bname) {
        let b = g.param(store, &bname)?;
        g.add(y, b)
    } else {
        Ok(y)
    }
}

pub fn layer_norm<T: Real>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    prefix: &str,
    x: Var,
) -> Result<Var, NumericsError> {
    let n = g.layer_norm(x, 1e-5)?;
    let gamma = g.param(store, &format!("{prefix}.g"))?;
    let beta = g.param(store, &format!("{prefix}.b"))?;
    let y = g.mul(n, gamma)?;
    g.add(y, beta)
}

pub fn init_mlp<T: Real>(store: &mut ParamStore<T>, seed: u64, prefix: &str, dims: &[usize]) {
    for (i, w) in dims.windows(2).enumerate() {
        init_linear(store, seed, &format!("{prefix}.{i}"), w[0], w[1]);
    }
}

/// Linear layers with GELU between them (none after the last).
pub fn mlp<T: Real>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    prefix: &str,
    layers: usize,
    x: Var,
) -> Result<Var, NumericsError> {
    let mut h = x;
    for i in 0..layers {
        h = linear(g, store, &format!("{prefix}.{i}"), h)?;
        if i + 1 < layers {
            h = g.gelu(h)?;
        }
    }
    Ok(h)
}

/// Scaled dot-product attention `softmax(q kᵀ / sqrt(d) + mask) v`.
///
/// `q[..., L, d]`, `k[..., S, d]`, `v[..., S, dv]`; `mask` is additive and
/// must broadcast against the `[..., L, S]` logits.
pub fn attention<T: Real>(
    g: &mut Graph<T>,
    q: Var,
    k: Var,
    v: Var,
    mask: Option<Var>,
) -> Result<Var, NumericsError> {
    let d = *g.shape(q).last().unwrap_or(&1);
    let s = g.matmul_nt(q, k)?;
    let mut s = g.scale(s, 1.0 / (d as f64).sqrt())?;
    if let Some(m) = mask {
        s = g.add(s, m)?;
    }
    let p = g.softmax(s)?;
    g.matmul(p, v)
}

/// `[L, L]` additive mask allowing position `i` to see `j <= i` only.
pub fn causal_mask<T: Real>(len: usize) -> Tensor<T> {
    Tensor::from_fn(&[len, len], |i| {
        let (r, c) = (i / len, i % len);
        if c <= r {
            T::zero()
        } else {
            T::of(MASK_NEG)
        }
    })
}

pub fn init_mhsa<T: Real>(store: &mut ParamStore<T>, seed: u64, prefix: &str, dim: usize) {
    init_linear(store, seed, &format!("{prefix}.qkv"), dim, 3 * dim);
    init_linear(store, seed, &format!("{prefix}.proj"), dim, dim);
}

/// Multi-head self-attention over `x[G, L, D]`; `mask` broadcasts against `[G, heads, L, L]`.
pub fn mhsa<T: Real>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    prefix: &str,
    x: Var,
    heads: usize,
    mask: Option<Var>,
) -> Result<Var, NumericsError> {
    let shape = g.shape(x).to_vec();
    let (gr, l, d) = (shape[0], shape[1], shape[2]);
    if heads == 0 || d % heads != 0 {
        return Err(NumericsError::Shape {
            op: "mhsa",
            detail: format!("width {d} not divisible by {heads} heads"),
        });
    }
    let dh = d / heads;
    let qkv = linear(g, store, &format!("{prefix}.qkv"), x)?;
    let qkv = g.reshape(qkv, &[gr, l, 3, heads, dh])?;
    let qkv = g.permute(qkv, &[2, 0, 3, 1, 4])?;
    let q = g.narrow(qkv, 0, 0, 1)?;
    let k = g.narrow(qkv, 0, 1, 1)?;
    let v = g.narrow(qkv, 0, 2, 1)?;
    let q = g.reshape(q, &[gr, heads, l, dh])?;
    let k = g.reshape(k, &[gr, heads, l, dh])?;
    let v = g.reshape(v, &[gr, heads, l, dh])?;
    let o = attention(g, q, k, v, mask)?;
    let o = g.permute(o, &[0, 2, 1, 3])?;
    let o = g.reshape(o, &[gr, l, d])?;
    linear(g, store, &format!("{prefix}.proj"), o)
}

impl<T: Real> Graph<T> {
    /// Matmul against a rank-2 weight for inputs of any rank ≥ 1.
    pub fn matmul_any(&mut self, x: Var, w: Var) -> Result<Var, NumericsError> {
        let shape = self.shape(x).to_vec();
        if shape.len() >= 2 {
            return self.matmul(x, w);
        }
        let x2 = self.reshape(x, &[1, shape.iter().product()])?;
        let y = self.matmul(x2, w)?;
        let n = self.shape(y)[1];
        self.reshape(y, &[n])
    }
}
