//! Central finite-difference verification of analytic gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::ParamStore;
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct GradcheckConfig {
    pub epsilon: f64,
    pub tolerance: f64,
    /// Coordinates probed per slot; `None` checks every coordinate.
    pub max_coords: Option<usize>,
    /// Seeds the coordinate subsample.
    pub seed: u64,
    /// Further step sizes tried, in order, on coordinates that miss the
    /// tolerance at `epsilon`. Small gradients drown in round-off at small
    /// steps while large steps may cross a ReLU or max-pool kink, so no single
    /// step suits every coordinate of a deep network. The best agreement is
    /// reported.
    pub fallback_steps: Vec<f64>,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            epsilon: 1e-6,
            tolerance: 1e-4,
            max_coords: None,
            seed: 0,
            fallback_steps: Vec::new(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SlotReport {
    pub name: String,
    pub coords_checked: usize,
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone)]
pub struct GradcheckReport {
    pub tolerance: f64,
    pub slots: Vec<SlotReport>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.slots.iter().all(|s| s.max_rel_err < self.tolerance)
    }

    pub fn failing(&self) -> impl Iterator<Item = &SlotReport> {
        self.slots.iter().filter(|s| !(s.max_rel_err < self.tolerance))
    }
}

impl std::fmt::Display for GradcheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for s in &self.slots {
            let verdict = if s.max_rel_err < self.tolerance { "ok" } else { "FAIL" };
            writeln!(
                f,
                "{verdict:4} {:<28} coords={:<6} max_rel_err={:.3e} (at {}: analytic {:.6e}, numeric {:.6e})",
                s.name, s.coords_checked, s.max_rel_err, s.worst_index, s.analytic, s.numeric
            )?;
        }
        Ok(())
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-12)
}

/// Compares the gradients already accumulated in `params` against central
/// differences of `loss`. Every slot must carry a populated gradient.
///
/// `loss` has to be a pure function of the parameter values: dropout off or
/// seed-pinned, and no state carried between calls.
pub fn finite_diff_check<F>(params: &mut ParamStore<f64>, mut loss: F, cfg: &GradcheckConfig) -> Result<GradcheckReport>
where
    F: FnMut(&ParamStore<f64>) -> Result<f64>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let names: Vec<String> = params.names().map(str::to_string).collect();
    let mut slots = Vec::with_capacity(names.len());

    for name in names {
        let analytic = params
            .grad(&name)
            .cloned()
            .ok_or_else(|| Error::Consistency(format!("no analytic gradient for slot {name:?}")))?;
        let n = analytic.len();
        let coords: Vec<usize> = match cfg.max_coords {
            Some(k) if k < n => {
                let mut c = sample(&mut rng, n, k).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..n).collect(),
        };

        let mut report = SlotReport {
            name: name.clone(),
            coords_checked: coords.len(),
            max_rel_err: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for &i in &coords {
            let a = analytic.data()[i];
            let mut best: Option<(f64, f64)> = None;
            for &eps in std::iter::once(&cfg.epsilon).chain(&cfg.fallback_steps) {
                let original = params.get(&name)?.data()[i];
                params.get_mut(&name)?.data_mut()[i] = original + eps;
                let plus = loss(params)?;
                params.get_mut(&name)?.data_mut()[i] = original - eps;
                let minus = loss(params)?;
                params.get_mut(&name)?.data_mut()[i] = original;
                let numeric = (plus - minus) / (2.0 * eps);
                let err = relative_error(a, numeric);
                if best.is_none_or(|(e, _)| err < e) {
                    best = Some((err, numeric));
                }
                if err < cfg.tolerance {
                    break;
                }
            }
            let (err, numeric) = best.expect("at least one step");
            if err > report.max_rel_err || err.is_nan() {
                report.max_rel_err = err;
                report.worst_index = i;
                report.analytic = a;
                report.numeric = numeric;
            }
        }
        slots.push(report);
    }
    Ok(GradcheckReport {
        tolerance: cfg.tolerance,
        slots,
    })
}
