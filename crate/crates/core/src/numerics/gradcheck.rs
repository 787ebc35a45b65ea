//! Central finite-difference verification of analytic gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, Mode, NodeId};
use super::param::ParamStore;
use crate::error::Result;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    pub tolerance: f64,
    /// Finite-difference step.
    pub step: f64,
    /// Check at most this many coordinates per parameter, chosen at random; `None` checks all.
    pub max_coords: Option<usize>,
    pub seed: u64,
    /// Forward mode; must be deterministic (no dropout).
    pub mode: Mode,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            tolerance: 1e-4,
            step: 1e-5,
            max_coords: None,
            seed: 0,
            mode: Mode::Eval,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ParamCheck {
    pub name: String,
    pub coords_checked: usize,
    pub max_rel_error: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.params
            .iter()
            .map(|p| p.max_rel_error)
            .fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_error() <= self.tolerance
    }
}

/// `|a - n| / max(1, |a|, |n|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / 1f64.max(analytic.abs()).max(numeric.abs())
}

/// Compares the gradient of the scalar built by `forward` against central differences for
/// every trainable parameter in `store`. Frozen parameters are left out of the report.
pub fn grad_check<F>(
    store: &mut ParamStore,
    forward: F,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<'_>) -> Result<NodeId>,
{
    let eval = |store: &ParamStore| -> Result<f64> {
        let mut g = Graph::new(store, opts.mode);
        let out = forward(&mut g)?;
        Ok(g.value(out).data()[0])
    };

    let analytic = {
        let mut g = Graph::new(store, opts.mode);
        let out = forward(&mut g)?;
        g.backward(out)?
    };

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let ids: Vec<_> = store.ids().collect();
    let mut params = Vec::new();
    for id in ids {
        if !store.get(id).requires_grad {
            continue;
        }
        let n = store.value(id).len();
        let coords: Vec<usize> = match opts.max_coords {
            Some(k) if k < n => sample(&mut rng, n, k).into_vec(),
            _ => (0..n).collect(),
        };
        let grad = analytic.param(id).map(|t| t.data().to_vec());
        let mut worst = 0.0_f64;
        for &c in &coords {
            let orig = store.value(id).data()[c];
            store.get_mut(id).value.data_mut()[c] = orig + opts.step;
            let plus = eval(store)?;
            store.get_mut(id).value.data_mut()[c] = orig - opts.step;
            let minus = eval(store)?;
            store.get_mut(id).value.data_mut()[c] = orig;
            let numeric = (plus - minus) / (2.0 * opts.step);
            let a = grad.as_ref().map_or(0.0, |g| g[c]);
            worst = worst.max(relative_error(a, numeric));
        }
        params.push(ParamCheck {
            name: store.get(id).name.clone(),
            coords_checked: coords.len(),
            max_rel_error: worst,
        });
    }
    Ok(GradCheckReport {
        tolerance: opts.tolerance,
        params,
    })
}
