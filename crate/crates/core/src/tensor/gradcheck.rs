//! Central finite-difference checking of reverse-mode gradients.
//!
//! The numeric side only ever evaluates the forward function, so it is an
//! independent oracle for whatever backward rules the graph applies.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Graph, ParamStore, Var};
use crate::Result;

#[derive(Clone, Copy, Debug)]
pub struct GradCheckConfig {
    pub step: f64,
    pub rel_tol: f64,
    pub abs_tol: f64,
    /// Check at most this many coordinates per parameter (chosen at random).
    pub max_coords: usize,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            step: 1e-6,
            rel_tol: 1e-4,
            abs_tol: 1e-7,
            max_coords: 48,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub checked: usize,
    pub failures: Vec<String>,
    pub max_rel_err: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.checked > 0 && self.failures.is_empty()
    }
}

/// Compare analytic and numeric gradients of `loss_fn` for every parameter
/// of every store in `stores`.
pub fn check<F>(
    stores: &mut [&mut ParamStore<f64>],
    cfg: GradCheckConfig,
    loss_fn: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[&ParamStore<f64>]) -> Result<Var>,
{
    let eval = |stores: &[&mut ParamStore<f64>]| -> Result<f64> {
        let views: Vec<&ParamStore<f64>> = stores.iter().map(|s| &**s).collect();
        let mut g = Graph::new();
        let l = loss_fn(&mut g, &views)?;
        Ok(g.scalar_value(l))
    };

    let analytic = {
        let views: Vec<&ParamStore<f64>> = stores.iter().map(|s| &**s).collect();
        let mut g = Graph::new();
        let l = loss_fn(&mut g, &views)?;
        let grads = g.backward(l)?;
        stores
            .iter()
            .map(|s| {
                s.ids()
                    .map(|id| grads.get(s, id))
                    .collect::<Vec<_>>()
            })
            .collect::<Vec<_>>()
    };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut report = GradCheckReport::default();
    for si in 0..stores.len() {
        let ids: Vec<_> = stores[si].ids().collect();
        for id in ids {
            let n = stores[si].value(id).numel();
            let coords: Vec<usize> = if n <= cfg.max_coords {
                (0..n).collect()
            } else {
                sample(&mut rng, n, cfg.max_coords).into_vec()
            };
            for c in coords {
                let orig = stores[si].value(id).data()[c];
                stores[si].value_mut(id).data_mut()[c] = orig + cfg.step;
                let plus = eval(stores)?;
                stores[si].value_mut(id).data_mut()[c] = orig - cfg.step;
                let minus = eval(stores)?;
                stores[si].value_mut(id).data_mut()[c] = orig;

                let numeric = (plus - minus) / (2.0 * cfg.step);
                let a = analytic[si][id.0]
                    .as_ref()
                    .map(|t| t.data()[c])
                    .unwrap_or(0.0);
                let diff = (a - numeric).abs();
                let scale = a.abs().max(numeric.abs());
                let rel = if scale > 0.0 { diff / scale } else { 0.0 };
                report.checked += 1;
                if diff > cfg.abs_tol && rel > cfg.rel_tol {
                    report.max_rel_err = report.max_rel_err.max(rel);
                    report.failures.push(format!(
                        "{}[{c}]: analytic {a:.6e} numeric {numeric:.6e}",
                        stores[si].get(id).name
                    ));
                } else if diff > cfg.abs_tol {
                    report.max_rel_err = report.max_rel_err.max(rel);
                }
            }
        }
    }
    Ok(report)
}
