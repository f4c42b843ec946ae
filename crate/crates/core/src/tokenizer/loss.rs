//! Reconstruction objective: RGB L1, perceptual distance on a frozen random
//! feature stack, optional adversarial term, and lidar depth L1.

use serde::{Deserialize, Serialize};

use super::config::{LossConfig, PerceptualConfig};
use crate::numerics::{Graph, Init, NumericsError, PadMode, ParamStore, Real, Tensor, Var};

/// Frozen, seeded 3-stage convolutional feature extractor.
#[derive(Clone, Debug)]
pub struct PerceptualNet<T> {
    pub store: ParamStore<T>,
    pub layers: Vec<usize>,
}

impl<T: Real> PerceptualNet<T> {
    pub fn new(cfg: &PerceptualConfig) -> Self {
        let mut init = ParamStore::<T>::new();
        let mut cin = 3;
        for (i, &co) in cfg.channels.iter().enumerate() {
            let std = (2.0 / (9.0 * cin as f64)).sqrt();
            init.init(
                cfg.seed,
                &format!("perc.{i}.w"),
                &[3, 3, cin, co],
                Init::TruncNormal(std),
            );
            cin = co;
        }
        let mut store = ParamStore::new();
        for (name, v) in init.iter() {
            store.insert_frozen(name, v.clone());
        }
        PerceptualNet {
            store,
            layers: cfg.layers.clone(),
        }
    }

    /// Activations of every stage for `x[B, H, W, 3]`.
    pub fn features(&self, g: &mut Graph<T>, x: Var) -> Result<Vec<Var>, NumericsError> {
        let mut out = Vec::new();
        let mut h = x;
        for i in 0..3 {
            let w = g.param(&self.store, &format!("perc.{i}.w"))?;
            let stride = if i == 0 { 1 } else { 2 };
            h = g.conv2d(h, w, stride, 1, PadMode::Edge)?;
            h = g.relu(h)?;
            out.push(h);
        }
        Ok(out)
    }
}

/// 3-layer convolutional patch discriminator producing one logit per patch.
pub fn init_discriminator<T: Real>(store: &mut ParamStore<T>, seed: u64) {
    let dims = [(4, 3, 16), (4, 16, 32), (3, 32, 1)];
    for (i, (k, ci, co)) in dims.iter().enumerate() {
        store.init(
            seed,
            &format!("disc.{i}.w"),
            &[*k, *k, *ci, *co],
            Init::TruncNormal(0.02),
        );
        store.init(seed, &format!("disc.{i}.b"), &[*co], Init::Zeros);
    }
}

pub fn discriminator<T: Real>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    x: Var,
) -> Result<Var, NumericsError> {
    let mut h = x;
    for i in 0..3 {
        let w = g.param(store, &format!("disc.{i}.w"))?;
        h = if i < 2 {
            g.conv2d(h, w, 2, 1, PadMode::Zero)?
        } else {
            g.conv2d(h, w, 1, 1, PadMode::Zero)?
        };
        let b = g.param(store, &format!("disc.{i}.b"))?;
        h = g.add(h, b)?;
        if i < 2 {
            h = g.leaky_relu(h, 0.2)?;
        }
    }
    Ok(h)
}

/// Non-saturating discriminator loss `softplus(-D(real)) + softplus(D(fake))`.
pub fn discriminator_loss<T: Real>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    real: Var,
    fake: Var,
) -> Result<Var, NumericsError> {
    let dr = discriminator(g, store, real)?;
    let nr = g.neg(dr)?;
    let lr = g.softplus(nr)?;
    let lr = g.mean(lr)?;
    let df = discriminator(g, store, fake)?;
    let lf = g.softplus(df)?;
    let lf = g.mean(lf)?;
    g.add(lr, lf)
}

/// Scalar values of the loss terms for logging.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub total: f64,
    pub rgb_l1: f64,
    pub perceptual: f64,
    pub gan: f64,
    pub lidar_l1: f64,
}

/// Graph nodes of the objective; `total` is what training differentiates.
#[derive(Clone, Copy, Debug)]
pub struct LossNodes {
    pub total: Var,
    pub rgb_l1: Var,
    pub perceptual: Var,
    pub gan: Option<Var>,
    pub lidar_l1: Option<Var>,
}

impl LossNodes {
    pub fn values<T: Real>(&self, g: &Graph<T>) -> LossTerms {
        let v = |x: Var| g.value(x).item().as_f64();
        LossTerms {
            total: v(self.total),
            rgb_l1: v(self.rgb_l1),
            perceptual: v(self.perceptual),
            gan: self.gan.map(v).unwrap_or(0.0),
            lidar_l1: self.lidar_l1.map(v).unwrap_or(0.0),
        }
    }
}

fn mean_abs_diff<T: Real>(g: &mut Graph<T>, a: Var, b: Var) -> Result<Var, NumericsError> {
    let d = g.sub(a, b)?;
    let d = g.abs(d)?;
    g.mean(d)
}

/// `L_total = λ_lidar·L_lidar + L_rgb` with
/// `L_rgb = λ_rgb·mean|I_g − I_t| + λ_perc·Σ_j mean|φʲ(I_g) − φʲ(I_t)| + λ_gan·L_gan`.
///
/// `pred_depth`/`target_depth` cover only rays with a ground-truth return;
/// pass `None` when the frame has none. The adversarial term is included
/// only when `discriminator` is given, the GAN is enabled and `iteration`
/// has reached the warm-up.
#[allow(clippy::too_many_arguments)]
pub fn tokenizer_loss<T: Real>(
    g: &mut Graph<T>,
    cfg: &LossConfig,
    perceptual: &PerceptualNet<T>,
    pred_images: Var,
    target_images: &Tensor<T>,
    depth: Option<(Var, &Tensor<T>)>,
    iteration: usize,
    discriminator_store: Option<&ParamStore<T>>,
) -> Result<LossNodes, NumericsError> {
    let target = g.constant(target_images.clone())?;
    let rgb_l1 = mean_abs_diff(g, pred_images, target)?;
    let fp = perceptual.features(g, pred_images)?;
    let ft = perceptual.features(g, target)?;
    let mut perc = g.constant(Tensor::scalar(T::zero()))?;
    for &j in &perceptual.layers {
        let d = mean_abs_diff(g, fp[j], ft[j])?;
        perc = g.add(perc, d)?;
    }
    let a = g.scale(rgb_l1, cfg.rgb)?;
    let b = g.scale(perc, cfg.perceptual)?;
    let mut total = g.add(a, b)?;
    let mut gan = None;
    if let Some(ds) = discriminator_store {
        if cfg.gan_enabled && iteration >= cfg.gan_warmup {
            let logits = discriminator(g, ds, pred_images)?;
            let nl = g.neg(logits)?;
            let l = g.softplus(nl)?;
            let l = g.mean(l)?;
            let s = g.scale(l, cfg.gan_generator)?;
            total = g.add(total, s)?;
            gan = Some(l);
        }
    }
    let mut lidar_l1 = None;
    if let Some((pd, td)) = depth {
        let tdv = g.constant(td.clone())?;
        let l = mean_abs_diff(g, pd, tdv)?;
        let s = g.scale(l, cfg.lidar)?;
        total = g.add(total, s)?;
        lidar_l1 = Some(l);
    }
    Ok(LossNodes {
        total,
        rgb_l1,
        perceptual: perc,
        gan,
        lidar_l1,
    })
}
