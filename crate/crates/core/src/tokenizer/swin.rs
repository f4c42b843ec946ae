//! Windowed self-attention blocks over a row-major `[B·H·W, C]` feature grid,
//! with patch merging (2× down) and patch expanding (2× up).

use std::rc::Rc;

use crate::numerics::nn::{self, MASK_NEG};
use crate::numerics::{Graph, Init, NumericsError, ParamStore, Real, Tensor, Var};

/// Batch and spatial layout of a row-major feature grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Grid {
    pub b: usize,
    pub h: usize,
    pub w: usize,
}

impl Grid {
    pub fn rows(&self) -> usize {
        self.b * self.h * self.w
    }
}

/// Largest window not exceeding `win` that tiles both sides.
pub fn fit_window(grid: Grid, win: usize) -> usize {
    let mut w = win.min(grid.h).min(grid.w).max(1);
    while grid.h % w != 0 || grid.w % w != 0 {
        w -= 1;
    }
    w
}

struct WindowPlan<T> {
    forward: Rc<Vec<usize>>,
    inverse: Rc<Vec<usize>>,
    mask: Option<Tensor<T>>,
    windows: usize,
    len: usize,
}

fn region(coord: usize, size: usize, win: usize, shift: usize) -> usize {
    if coord < size - win {
        0
    } else if coord < size - shift {
        1
    } else {
        2
    }
}

/// Row permutation that rolls the grid by `-shift` and groups rows by window,
/// plus the additive mask that keeps wrapped-around regions apart.
fn window_plan<T: Real>(grid: Grid, win: usize, shift: usize) -> WindowPlan<T> {
    let (nh, nw) = (grid.h / win, grid.w / win);
    let len = win * win;
    let windows = grid.b * nh * nw;
    let mut forward = Vec::with_capacity(grid.rows());
    let mut labels = Vec::with_capacity(nh * nw * len);
    for b in 0..grid.b {
        for wi in 0..nh {
            for wj in 0..nw {
                for a in 0..win {
                    for c in 0..win {
                        let (ys, xs) = (wi * win + a, wj * win + c);
                        let y = (ys + shift) % grid.h;
                        let x = (xs + shift) % grid.w;
                        forward.push((b * grid.h + y) * grid.w + x);
                        if b == 0 {
                            labels.push(
                                region(ys, grid.h, win, shift) * 3 + region(xs, grid.w, win, shift),
                            );
                        }
                    }
                }
            }
        }
    }
    let mut inverse = vec![0; forward.len()];
    for (i, &r) in forward.iter().enumerate() {
        inverse[r] = i;
    }
    let mask = (shift > 0).then(|| {
        let per = nh * nw;
        Tensor::from_fn(&[windows, 1, len, len], |i| {
            let wdw = (i / (len * len)) % per;
            let (p, q) = ((i / len) % len, i % len);
            if labels[wdw * len + p] == labels[wdw * len + q] {
                T::zero()
            } else {
                T::of(MASK_NEG)
            }
        })
    });
    WindowPlan {
        forward: Rc::new(forward),
        inverse: Rc::new(inverse),
        mask,
        windows,
        len,
    }
}

pub fn init_block<T: Real>(
    store: &mut ParamStore<T>,
    seed: u64,
    prefix: &str,
    dim: usize,
    mlp_ratio: usize,
) {
    nn::init_layer_norm(store, seed, &format!("{prefix}.ln1"), dim);
    nn::init_mhsa(store, seed, &format!("{prefix}.attn"), dim);
    nn::init_layer_norm(store, seed, &format!("{prefix}.ln2"), dim);
    nn::init_mlp(
        store,
        seed,
        &format!("{prefix}.mlp"),
        &[dim, dim * mlp_ratio, dim],
    );
}

/// Multi-head self-attention inside (optionally shifted) windows of a
/// `[grid.rows(), C]` feature grid; output rows in input order.
#[allow(clippy::too_many_arguments)]
pub fn window_attention<T: Real>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    prefix: &str,
    x: Var,
    grid: Grid,
    window: usize,
    shifted: bool,
    heads: usize,
) -> Result<Var, NumericsError> {
    let c = g.shape(x)[1];
    let win = fit_window(grid, window);
    let shift = if shifted && win < grid.h.min(grid.w) {
        win / 2
    } else {
        0
    };
    let plan = window_plan::<T>(grid, win, shift);
    let h = g.gather_rows(x, plan.forward.clone())?;
    let h = g.reshape(h, &[plan.windows, plan.len, c])?;
    let mask = match plan.mask {
        Some(m) => Some(g.constant(m)?),
        None => None,
    };
    let a = nn::mhsa(g, store, prefix, h, heads, mask)?;
    let a = g.reshape(a, &[grid.rows(), c])?;
    g.gather_rows(a, plan.inverse.clone())
}

/// Pre-norm block: windowed attention then MLP, both residual.
#[allow(clippy::too_many_arguments)]
pub fn block<T: Real>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    prefix: &str,
    x: Var,
    grid: Grid,
    window: usize,
    shifted: bool,
    heads: usize,
) -> Result<Var, NumericsError> {
    let h = nn::layer_norm(g, store, &format!("{prefix}.ln1"), x)?;
    let a = window_attention(
        g,
        store,
        &format!("{prefix}.attn"),
        h,
        grid,
        window,
        shifted,
        heads,
    )?;
    let x = g.add(x, a)?;
    let h = nn::layer_norm(g, store, &format!("{prefix}.ln2"), x)?;
    let h = nn::mlp(g, store, &format!("{prefix}.mlp"), 2, h)?;
    g.add(x, h)
}

pub fn init_stage<T: Real>(
    store: &mut ParamStore<T>,
    seed: u64,
    prefix: &str,
    dim: usize,
    blocks: usize,
    mlp_ratio: usize,
) {
    for i in 0..blocks {
        init_block(store, seed, &format!("{prefix}.{i}"), dim, mlp_ratio);
    }
}

/// `blocks` blocks with the window shift alternating off/on.
#[allow(clippy::too_many_arguments)]
pub fn stage<T: Real>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    prefix: &str,
    mut x: Var,
    grid: Grid,
    blocks: usize,
    window: usize,
    heads: usize,
) -> Result<Var, NumericsError> {
    for i in 0..blocks {
        x = block(
            g,
            store,
            &format!("{prefix}.{i}"),
            x,
            grid,
            window,
            i % 2 == 1,
            heads,
        )?;
    }
    Ok(x)
}

pub fn init_pos<T: Real>(
    store: &mut ParamStore<T>,
    seed: u64,
    name: &str,
    cells: usize,
    dim: usize,
) {
    store.init(seed, name, &[cells, dim], Init::TruncNormal(nn::INIT_STD));
}

/// Add a learned per-cell embedding, shared across the batch.
pub fn add_pos<T: Real>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    name: &str,
    x: Var,
    grid: Grid,
) -> Result<Var, NumericsError> {
    let c = g.shape(x)[1];
    let p = g.param(store, name)?;
    let x3 = g.reshape(x, &[grid.b, grid.h * grid.w, c])?;
    let y = g.add(x3, p)?;
    g.reshape(y, &[grid.rows(), c])
}

pub fn init_merge<T: Real>(store: &mut ParamStore<T>, seed: u64, prefix: &str, dim: usize) {
    nn::init_layer_norm(store, seed, &format!("{prefix}.ln"), 4 * dim);
    nn::init_linear_nobias(store, seed, &format!("{prefix}.lin"), 4 * dim, 2 * dim);
}

/// Concatenate each 2×2 neighbourhood, normalize, project `4C → 2C`.
pub fn merge<T: Real>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    prefix: &str,
    x: Var,
    grid: Grid,
) -> Result<(Var, Grid), NumericsError> {
    let c = g.shape(x)[1];
    let out = Grid {
        b: grid.b,
        h: grid.h / 2,
        w: grid.w / 2,
    };
    let mut idx = Vec::with_capacity(grid.rows());
    for b in 0..grid.b {
        for i in 0..out.h {
            for j in 0..out.w {
                for di in 0..2 {
                    for dj in 0..2 {
                        idx.push((b * grid.h + 2 * i + di) * grid.w + 2 * j + dj);
                    }
                }
            }
        }
    }
    let y = g.gather_rows(x, Rc::new(idx))?;
    let y = g.reshape(y, &[out.rows(), 4 * c])?;
    let y = nn::layer_norm(g, store, &format!("{prefix}.ln"), y)?;
    Ok((nn::linear(g, store, &format!("{prefix}.lin"), y)?, out))
}

pub fn init_expand<T: Real>(store: &mut ParamStore<T>, seed: u64, prefix: &str, dim: usize) {
    nn::init_linear_nobias(store, seed, &format!("{prefix}.lin"), dim, 2 * dim);
    nn::init_layer_norm(store, seed, &format!("{prefix}.ln"), dim / 2);
}

/// Project `C → 2C`, redistribute as a 2×2 block of `C/2` features, normalize.
pub fn expand<T: Real>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    prefix: &str,
    x: Var,
    grid: Grid,
) -> Result<(Var, Grid), NumericsError> {
    let c = g.shape(x)[1];
    let out = Grid {
        b: grid.b,
        h: grid.h * 2,
        w: grid.w * 2,
    };
    let y = nn::linear(g, store, &format!("{prefix}.lin"), x)?;
    // each input row now holds its four children (di, dj) in order
    let y = g.reshape(y, &[grid.rows() * 4, c / 2])?;
    let mut idx = Vec::with_capacity(out.rows());
    for b in 0..out.b {
        for i in 0..out.h {
            for j in 0..out.w {
                let parent = (b * grid.h + i / 2) * grid.w + j / 2;
                idx.push(parent * 4 + (i % 2) * 2 + j % 2);
            }
        }
    }
    let y = g.gather_rows(y, Rc::new(idx))?;
    Ok((nn::layer_norm(g, store, &format!("{prefix}.ln"), y)?, out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_diff_check, project_to_scalar, GradCheckOptions};

    #[test]
    fn window_plan_is_a_permutation() {
        let grid = Grid { b: 2, h: 8, w: 12 };
        for shift in [0, 2] {
            let p = window_plan::<f64>(grid, 4, shift);
            let mut seen = vec![false; grid.rows()];
            for &r in p.forward.iter() {
                assert!(!seen[r]);
                seen[r] = true;
            }
            for (i, &r) in p.forward.iter().enumerate() {
                assert_eq!(p.inverse[r], i);
            }
        }
    }

    #[test]
    fn shifted_mask_separates_wrapped_regions() {
        let grid = Grid { b: 1, h: 8, w: 8 };
        let p = window_plan::<f64>(grid, 4, 2);
        let m = p.mask.unwrap();
        // window 0 holds no wrapped rows: nothing masked
        assert!(m.data()[..16 * 16].iter().all(|&v| v == 0.0));
        // last window mixes four regions: the first and last rows differ in both axes
        let last = &m.data()[3 * 256..4 * 256];
        assert_eq!(last[15], MASK_NEG);
        assert_eq!(last[0], 0.0);
    }

    #[test]
    fn merge_then_shapes() {
        let mut store = ParamStore::<f64>::new();
        init_merge(&mut store, 1, "m", 3);
        init_expand(&mut store, 1, "e", 6);
        let mut g = Graph::new();
        let grid = Grid { b: 2, h: 4, w: 6 };
        let x = g
            .constant(Tensor::from_fn(&[grid.rows(), 3], |i| {
                (i as f64 * 0.37).sin()
            }))
            .unwrap();
        let (y, gy) = merge(&mut g, &store, "m", x, grid).unwrap();
        assert_eq!(g.shape(y), &[12, 6]);
        let (z, gz) = expand(&mut g, &store, "e", y, gy).unwrap();
        assert_eq!(g.shape(z), &[48, 3]);
        assert_eq!(gz, grid);
    }

    #[test]
    fn expand_places_children() {
        // identity-like projection: child (di,dj) of a parent gets channels [2k, 2k+1] of its row
        let mut store = ParamStore::<f64>::new();
        store.insert(
            "e.lin.w",
            Tensor::from_fn(&[2, 4], |i| if i % 4 == (i / 4) { 1.0 } else { 0.0 }),
        );
        store.insert("e.ln.g", Tensor::full(&[1], 1.0));
        store.insert("e.ln.b", Tensor::zeros(&[1]));
        let mut g = Graph::new();
        let x = g
            .constant(Tensor::from_vec(&[1, 2], vec![3.0, 5.0]))
            .unwrap();
        let y = nn::linear(&mut g, &store, "e.lin", x).unwrap();
        assert_eq!(g.value(y).data(), &[3.0, 5.0, 0.0, 0.0]);
        let (z, _) = expand(&mut g, &store, "e", x, Grid { b: 1, h: 1, w: 1 }).unwrap();
        // width-1 layer norm maps every child to zero; only the shape is informative here
        assert_eq!(g.shape(z), &[4, 1]);
    }

    #[test]
    fn shifted_stage_gradients() {
        let mut store = ParamStore::<f64>::new();
        init_stage(&mut store, 3, "s", 4, 2, 2);
        let grid = Grid { b: 1, h: 4, w: 4 };
        store.insert(
            "x",
            Tensor::from_vec(&[16, 4], crate::numerics::trunc_normal(9, "x", 64, 1.0)),
        );
        let r = finite_diff_check(
            "swin stage",
            &store,
            &GradCheckOptions::default(),
            |g, s| {
                let x = g.param(s, "x")?;
                let y = stage(g, s, "s", x, grid, 2, 2, 2)?;
                project_to_scalar(g, y, 4)
            },
        )
        .unwrap();
        assert!(r.pass, "{r}");
    }
}
