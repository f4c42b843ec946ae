//! Finite-difference verification of every differentiable op and of the
//! composed tokenizer and world-model chains, in 64-bit.

use std::rc::Rc;

use crate::numerics::nn::{self, causal_mask};
use crate::numerics::{
    finite_diff_check, project_to_scalar, trunc_normal, GatherTable, GradCheckOptions,
    GradCheckReport, Graph, NumericsError, PadMode, ParamStore, Tensor, Var,
};
use crate::tokenizer::{render, RayBatch, TokenizerConfig};
use crate::worldmodel::{self, Conditioning, WorldModelConfig};

fn rand_t(seed: u64, shape: &[usize], std: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, trunc_normal(seed, "t", n, std))
}

fn store_of(items: Vec<(&str, Tensor<f64>)>) -> ParamStore<f64> {
    let mut s = ParamStore::new();
    for (n, v) in items {
        s.insert(n, v);
    }
    s
}

/// Add O(1) noise to every tensor so no gradient sits at roundoff level.
fn perturb(store: &mut ParamStore<f64>, seed: u64, std: f64) {
    let names: Vec<String> = store.names().cloned().collect();
    for n in names {
        let v = store.value_mut(&n).unwrap();
        let noise = trunc_normal::<f64>(seed, &n, v.numel(), std);
        v.data_mut()
            .iter_mut()
            .zip(noise)
            .for_each(|(x, e)| *x += e);
    }
}

type Check = Box<dyn Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var, NumericsError>>;

fn cases() -> Vec<(&'static str, ParamStore<f64>, Check)> {
    let mut v: Vec<(&'static str, ParamStore<f64>, Check)> = Vec::new();
    v.push((
        "matmul",
        store_of(vec![
            ("a", rand_t(1, &[2, 3, 4], 1.0)),
            ("b", rand_t(2, &[4, 5], 1.0)),
        ]),
        Box::new(|g, s| {
            let (a, b) = (g.param(s, "a")?, g.param(s, "b")?);
            let y = g.matmul(a, b)?;
            project_to_scalar(g, y, 9)
        }),
    ));
    v.push((
        "matmul_nt (batched)",
        store_of(vec![
            ("a", rand_t(3, &[2, 3, 4], 1.0)),
            ("b", rand_t(4, &[2, 5, 4], 1.0)),
        ]),
        Box::new(|g, s| {
            let (a, b) = (g.param(s, "a")?, g.param(s, "b")?);
            let y = g.matmul_nt(a, b)?;
            project_to_scalar(g, y, 9)
        }),
    ));
    v.push((
        "broadcast add/sub/mul/div",
        store_of(vec![
            ("a", rand_t(5, &[2, 3, 4], 1.0)),
            ("b", rand_t(6, &[3, 1], 1.0)),
            ("c", rand_t(7, &[4], 1.0)),
        ]),
        Box::new(|g, s| {
            let (a, b, c) = (g.param(s, "a")?, g.param(s, "b")?, g.param(s, "c")?);
            let y = g.mul(a, b)?;
            let y = g.add(y, c)?;
            let d = g.affine(c, 0.5, 2.0)?;
            let y = g.div(y, d)?;
            let y = g.sub(y, b)?;
            project_to_scalar(g, y, 9)
        }),
    ));
    v.push((
        "exp/log/sigmoid/gelu/tanh",
        store_of(vec![("x", rand_t(8, &[3, 4], 1.0))]),
        Box::new(|g, s| {
            let x = g.param(s, "x")?;
            let e = g.exp(x)?;
            let l = g.affine(e, 1.0, 1.0)?;
            let l = g.log(l)?;
            let parts = [g.sigmoid(x)?, g.gelu(x)?, g.tanh(x)?, g.softplus(x)?];
            let mut y = l;
            for p in parts {
                y = g.add(y, p)?;
            }
            project_to_scalar(g, y, 4)
        }),
    ));
    v.push((
        "softmax",
        store_of(vec![("x", rand_t(9, &[3, 5], 2.0))]),
        Box::new(|g, s| {
            let x = g.param(s, "x")?;
            let y = g.softmax(x)?;
            project_to_scalar(g, y, 1)
        }),
    ));
    v.push((
        "layer_norm",
        store_of(vec![("x", rand_t(10, &[3, 6], 2.0))]),
        Box::new(|g, s| {
            let x = g.param(s, "x")?;
            let y = g.layer_norm(x, 1e-5)?;
            project_to_scalar(g, y, 1)
        }),
    ));
    v.push((
        "l1 + squared-l2 reductions",
        store_of(vec![
            ("x", rand_t(11, &[4, 3], 1.0)),
            ("y", rand_t(12, &[4, 3], 1.0)),
        ]),
        Box::new(|g, s| {
            let (x, y) = (g.param(s, "x")?, g.param(s, "y")?);
            let d = g.sub(x, y)?;
            let a = g.abs(d)?;
            let l1 = g.mean(a)?;
            let q = g.square(d)?;
            let l2 = g.sum_axis(q, 1)?;
            let l2 = g.mean(l2)?;
            g.add(l1, l2)
        }),
    ));
    v.push((
        "permute/concat/narrow/gather",
        store_of(vec![
            ("x", rand_t(13, &[2, 3, 4], 1.0)),
            ("y", rand_t(14, &[2, 2, 4], 1.0)),
        ]),
        Box::new(|g, s| {
            let (x, y) = (g.param(s, "x")?, g.param(s, "y")?);
            let c = g.concat(&[x, y], 1)?;
            let p = g.permute(c, &[2, 0, 1])?;
            let n = g.narrow(p, 2, 1, 3)?;
            let r = g.reshape(n, &[8, 3])?;
            let gr = g.gather_rows(r, Rc::new(vec![7, 0, 0, 3]))?;
            project_to_scalar(g, gr, 2)
        }),
    ));
    for (name, mode) in [
        ("conv2d (zero pad)", PadMode::Zero),
        ("conv2d (edge pad)", PadMode::Edge),
    ] {
        v.push((
            name,
            store_of(vec![
                ("x", rand_t(15, &[2, 5, 4, 3], 1.0)),
                ("w", rand_t(16, &[3, 3, 3, 2], 0.5)),
            ]),
            Box::new(move |g, s| {
                let (x, w) = (g.param(s, "x")?, g.param(s, "w")?);
                let y = g.conv2d(x, w, 1, 1, mode)?;
                project_to_scalar(g, y, 3)
            }),
        ));
    }
    v.push((
        "conv2d stride 2",
        store_of(vec![
            ("x", rand_t(17, &[1, 6, 6, 2], 1.0)),
            ("w", rand_t(18, &[3, 3, 2, 4], 0.5)),
        ]),
        Box::new(|g, s| {
            let (x, w) = (g.param(s, "x")?, g.param(s, "w")?);
            let y = g.conv2d(x, w, 2, 1, PadMode::Zero)?;
            project_to_scalar(g, y, 3)
        }),
    ));
    v.push((
        "upsample2x",
        store_of(vec![("x", rand_t(19, &[1, 2, 3, 2], 1.0))]),
        Box::new(|g, s| {
            let x = g.param(s, "x")?;
            let y = g.upsample2x(x)?;
            project_to_scalar(g, y, 3)
        }),
    ));
    let table = Rc::new(GatherTable {
        taps: 2,
        rows_in: 3,
        index: vec![0, 1, 2, GatherTable::<f64>::INVALID, 1, 1],
        weight: vec![0.25, 0.75, 0.5, 0.9, 0.3, 0.2],
    });
    v.push((
        "weighted_gather (bi/trilinear)",
        store_of(vec![("x", rand_t(20, &[3, 4], 1.0))]),
        Box::new(move |g, s| {
            let x = g.param(s, "x")?;
            let y = g.weighted_gather(x, table.clone())?;
            project_to_scalar(g, y, 5)
        }),
    ));
    v.push((
        "composite_weights",
        store_of(vec![("a", rand_t(21, &[3, 6], 1.5))]),
        Box::new(|g, s| {
            let a = g.param(s, "a")?;
            let alpha = g.sigmoid(a)?;
            let w = g.composite_weights(alpha)?;
            project_to_scalar(g, w, 5)
        }),
    ));
    v.push((
        "segment_max",
        store_of(vec![("x", rand_t(22, &[5, 3], 1.0))]),
        Box::new(|g, s| {
            let x = g.param(s, "x")?;
            let y = g.segment_max(x, &[0, 2, 0, 2, 2], 4)?;
            project_to_scalar(g, y, 6)
        }),
    ));
    v.push((
        "masked attention",
        store_of(vec![
            ("q", rand_t(23, &[2, 4, 3], 1.0)),
            ("k", rand_t(24, &[2, 4, 3], 1.0)),
            ("v", rand_t(25, &[2, 4, 2], 1.0)),
        ]),
        Box::new(|g, s| {
            let (q, k, v) = (g.param(s, "q")?, g.param(s, "k")?, g.param(s, "v")?);
            let m = g.constant(causal_mask(4))?;
            let y = nn::attention(g, q, k, v, Some(m))?;
            project_to_scalar(g, y, 7)
        }),
    ));
    v.push(token_to_depth_case());
    v.push((
        "AdaLN",
        store_of(vec![
            ("x", rand_t(26, &[2, 3, 4], 1.0)),
            ("gamma", rand_t(27, &[2, 1, 4], 0.5)),
            ("beta", rand_t(28, &[2, 1, 4], 0.5)),
        ]),
        Box::new(|g, s| {
            let x = g.param(s, "x")?;
            let gm = g.param(s, "gamma")?;
            let b = g.param(s, "beta")?;
            let y = worldmodel::adaln(g, x, gm, b)?;
            project_to_scalar(g, y, 4)
        }),
    ));
    v.push(st_block_case());
    v
}

fn token_to_depth_case() -> (&'static str, ParamStore<f64>, Check) {
    let cfg = TokenizerConfig::toy();
    let spec = cfg.voxel_spec();
    let mut full = ParamStore::<f64>::new();
    render::init_decoder(&mut full, &cfg);
    let mut store = ParamStore::<f64>::new();
    store.extend_prefixed("dec.", &full.sub_store("dec."));
    store.extend_prefixed("render.alpha.", &full.sub_store("render.alpha."));
    perturb(&mut store, 11, 0.3);
    let (c, h, w) = cfg.token_shape();
    store.insert(
        "token",
        Tensor::from_vec(&[h * w, c], trunc_normal(7, "token", h * w * c, 1.0)),
    );
    let rays = [
        ([-3.0, -1.3, 0.4], [1.0, 0.2, -0.1]),
        ([0.5, 0.5, 5.0], [0.05, 0.1, -1.0]),
        ([-1.0, 3.0, 1.0], [0.3, -1.0, -0.2]),
    ];
    let batch = RayBatch::<f64>::new(&spec, &rays, cfg.ray_samples);
    let target = Tensor::from_vec(&[3], vec![0.3, 1.1, 2.3]);
    (
        "token→voxel→composite→depth L1",
        store,
        Box::new(move |g, s| {
            let t = g.param(s, "token")?;
            let v = render::decode_to_voxel(g, s, &cfg, t)?;
            let c = render::composite_ray(g, s, v, &batch)?;
            let tg = g.constant(target.clone())?;
            let d = g.sub(c.depth, tg)?;
            let d = g.abs(d)?;
            g.mean(d)
        }),
    )
}

fn st_block_case() -> (&'static str, ParamStore<f64>, Check) {
    let cfg = WorldModelConfig {
        seed: 3,
        width: 8,
        blocks: 2,
        heads: 2,
        spatial_window: 2,
        mlp_ratio: 2,
        max_frames: 3,
        action_scale: [1.0, 1.0, 5.0],
        schedule: Default::default(),
    };
    let (grid, ch) = ((2, 2), 3);
    let mut store = ParamStore::<f64>::new();
    worldmodel::model::init_model(&mut store, &cfg, ch, 4);
    perturb(&mut store, 8, 0.3);
    // the key third of each qkv bias has an identically zero gradient
    // (softmax is shift-invariant per query): nothing to check but roundoff
    for b in 0..cfg.blocks {
        for a in ["tattn", "sattn"] {
            store.set_trainable(&format!("wm.b{b}.{a}.qkv.b"), false);
        }
    }
    store.insert(
        "x",
        Tensor::from_vec(&[1, 3, 4, ch], trunc_normal(9, "x", 12 * ch, 1.0)),
    );
    let cond = Conditioning {
        actions: vec![vec![[0.0; 3], [0.8, -0.1, 0.05], [1.1, 0.2, -0.1]]],
        timesteps: vec![vec![0.0, 20.0, 20.0]],
    };
    let eps = Tensor::from_vec(&[1, 2, 4, ch], trunc_normal(10, "eps", 8 * ch, 1.0));
    (
        "spatial-temporal blocks",
        store,
        Box::new(move |g, s| {
            let x = g.param(s, "x")?;
            let out = worldmodel::forward(g, s, &cfg, grid, x, &cond)?;
            let d = g.narrow(out, 1, 1, 2)?;
            let e = g.constant(eps.clone())?;
            let d = g.sub(d, e)?;
            // squared error: the L1 kink would spoil central differences
            let d = g.square(d)?;
            g.mean(d)
        }),
    )
}

/// Run every check with default tolerances.
pub fn run_suite() -> Result<Vec<GradCheckReport>, NumericsError> {
    let opts = GradCheckOptions {
        max_coords: 24,
        ..Default::default()
    };
    cases()
        .into_iter()
        .map(|(name, store, f)| finite_diff_check(name, &store, &opts, f))
        .collect()
}
