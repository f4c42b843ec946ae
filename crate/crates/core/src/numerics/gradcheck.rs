use serde::Serialize;

use super::{trunc_normal, Graph, NumericsError, ParamStore, Real, Tensor, Var};

/// Outcome of comparing reverse-mode gradients against central differences.
#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub op: String,
    pub max_rel_error: f64,
    /// Tensor name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    pub coords_checked: usize,
    pub tol: f64,
    pub pass: bool,
}

impl std::fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let worst = self
            .worst
            .as_ref()
            .map(|(n, i)| format!("{n}[{i}]"))
            .unwrap_or_else(|| "-".into());
        write!(
            f,
            "{:<28} {:>10.3e} {:>6} coords  worst {:<20} {}",
            self.op,
            self.max_rel_error,
            self.coords_checked,
            worst,
            if self.pass { "PASS" } else { "FAIL" }
        )
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub eps: f64,
    pub tol: f64,
    /// Upper bound on coordinates probed per tensor (evenly strided).
    pub max_coords: usize,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            eps: 1e-5,
            tol: 1e-4,
            max_coords: 48,
        }
    }
}

/// Check every trainable tensor of `store` through the scalar function `f`.
///
/// Runs in 64-bit; relative error uses `max(|analytic|, |numeric|, 1e-8)`.
pub fn finite_diff_check<F>(
    op: &str,
    store: &ParamStore<f64>,
    opts: &GradCheckOptions,
    f: F,
) -> Result<GradCheckReport, NumericsError>
where
    F: Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var, NumericsError>,
{
    if !(opts.eps > 0.0) || opts.eps < f64::EPSILON.sqrt() * 1e-2 {
        return Err(NumericsError::EpsilonTooSmall {
            eps: opts.eps,
            dtype: f64::DTYPE,
        });
    }
    for (name, t) in store.iter() {
        if !t.is_finite() {
            return Err(NumericsError::NonFinite {
                op: "finite_diff_check input",
                node: name.len(),
            });
        }
    }
    let mut g = Graph::new();
    let loss = f(&mut g, store)?;
    let analytic = g.backward(loss)?;

    let eval = |s: &ParamStore<f64>| -> Result<f64, NumericsError> {
        let mut g = Graph::new();
        let l = f(&mut g, s)?;
        Ok(g.value(l).item())
    };

    let mut work = store.clone();
    let mut max_rel = 0.0f64;
    let mut worst = None;
    let mut checked = 0;
    let names: Vec<String> = store
        .names()
        .filter(|n| store.is_trainable(n))
        .cloned()
        .collect();
    for name in names {
        let n = store.value(&name).unwrap().numel();
        let zero = Tensor::zeros(store.value(&name).unwrap().shape());
        let grad = analytic.get(&name).unwrap_or(&zero);
        let stride = n.div_ceil(opts.max_coords.max(1)).max(1);
        for idx in (0..n).step_by(stride) {
            let orig = store.value(&name).unwrap().data()[idx];
            work.value_mut(&name).unwrap().data_mut()[idx] = orig + opts.eps;
            let fp = eval(&work)?;
            work.value_mut(&name).unwrap().data_mut()[idx] = orig - opts.eps;
            let fm = eval(&work)?;
            work.value_mut(&name).unwrap().data_mut()[idx] = orig;
            let numeric = (fp - fm) / (2.0 * opts.eps);
            let a = grad.data()[idx];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            checked += 1;
            if worst.is_none() || rel > max_rel {
                max_rel = rel;
                worst = Some((name.clone(), idx));
            }
        }
    }
    Ok(GradCheckReport {
        op: op.to_string(),
        max_rel_error: max_rel,
        worst,
        coords_checked: checked,
        tol: opts.tol,
        pass: max_rel < opts.tol,
    })
}

/// Reduce a tensor-valued node to a scalar by a fixed random projection,
/// so every output coordinate influences the checked gradient.
pub fn project_to_scalar<T: Real>(
    g: &mut Graph<T>,
    out: Var,
    seed: u64,
) -> Result<Var, NumericsError> {
    let shape = g.shape(out).to_vec();
    let n = shape.iter().product();
    let r = g.constant(Tensor::from_vec(
        &shape,
        trunc_normal(seed, "projection", n, 1.0),
    ))?;
    let p = g.mul(out, r)?;
    g.sum(p)
}
