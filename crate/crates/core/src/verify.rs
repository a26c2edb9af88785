//! Named verification suites, each producing one [`Check`] per property.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{primitive_gradcheck, PRIMITIVE_TOLERANCE};
use crate::error::Result;
use crate::metaloop::{check_phi_gradient, check_theta_gradient, MetaState};
use crate::par::Executor;
use crate::preconditioners::{GapMeta, LayerSelection, PrecondKind};
use crate::rng;
use crate::tasks::eval_episode;
use crate::tensor::Tensor;
use crate::theory::{
    check_chebyshev_lemma, check_preconditioner_properties, check_theorem2, check_variance_lemma,
    cosine_decay_sweep, singular_value_row_norm_gap, strictly_decreasing, Check,
    MIN_LEMMA_TRIALS,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Suite {
    Pd,
    Similarity,
    Variance,
    Chebyshev,
    Cosine,
    Approx,
    Gradcheck,
    All,
}

impl Suite {
    pub const EACH: [Suite; 7] = [
        Suite::Pd,
        Suite::Similarity,
        Suite::Variance,
        Suite::Chebyshev,
        Suite::Cosine,
        Suite::Approx,
        Suite::Gradcheck,
    ];
}

#[derive(Clone, Debug, Default)]
pub struct VerifyOptions {
    pub trials: Option<usize>,
    pub n_grid: Option<Vec<usize>>,
    pub seed: u64,
}

pub const DEFAULT_PAIRS: usize = 1000;
pub const DEFAULT_SWEEP_TRIALS: usize = 100;
pub const APPROX_GRID: [usize; 4] = [32, 128, 512, 1024];
pub const COSINE_GRID: [usize; 6] = [16, 64, 256, 400, 1024, 4096];
pub const COSINE_TOLERANCE: f64 = 0.2;
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

pub fn run_suite(suite: Suite, opts: &VerifyOptions, exec: &Executor) -> Result<Vec<Check>> {
    match suite {
        Suite::All => {
            let mut out = Vec::new();
            for s in Suite::EACH {
                out.extend(run_suite(s, opts, exec)?);
            }
            Ok(out)
        }
        Suite::Pd | Suite::Similarity => {
            let report = check_preconditioner_properties(opts.trials.unwrap_or(DEFAULT_PAIRS), opts.seed, exec)?;
            let prefix = if suite == Suite::Pd { "pd/" } else { "similarity/" };
            Ok(report.checks().into_iter().filter(|c| c.name.starts_with(prefix)).collect())
        }
        Suite::Variance => {
            let trials = opts.trials.unwrap_or(MIN_LEMMA_TRIALS);
            let grid = opts.n_grid.clone().unwrap_or_else(|| vec![2, 10, 100]);
            grid.iter()
                .map(|&n| {
                    let r = check_variance_lemma(n, trials, opts.seed, exec)?;
                    Ok(Check::new(
                        format!("variance/n={n} |Var-1/n|"),
                        (r.variance - r.expected).abs(),
                        format!("<= 5 SE = {:.3e}", 5.0 * r.std_error),
                        r.passed,
                    ))
                })
                .collect()
        }
        Suite::Chebyshev => {
            let trials = opts.trials.unwrap_or(MIN_LEMMA_TRIALS);
            [(64, 0.3), (256, 0.25)]
                .iter()
                .map(|&(n, eps)| {
                    let r = check_chebyshev_lemma(n, eps, trials, opts.seed, exec)?;
                    Ok(Check::new(
                        format!("chebyshev/n={n} eps={eps} P"),
                        r.probability,
                        format!("<= {:.4} + 3 SE", r.bound),
                        r.passed,
                    ))
                })
                .collect()
        }
        Suite::Cosine => {
            let grid = opts.n_grid.clone().unwrap_or_else(|| COSINE_GRID.to_vec());
            let trials = opts.trials.unwrap_or(DEFAULT_SWEEP_TRIALS);
            let points = cosine_decay_sweep(8, &grid, trials, opts.seed, exec)?;
            let values: Vec<f64> = points.iter().map(|p| p.mean_abs_cos).collect();
            let mut checks = vec![Check::new(
                "cosine/mean |cos| decreasing in n",
                *values.last().unwrap_or(&f64::NAN),
                "strictly decreasing",
                strictly_decreasing(&values),
            )];
            for p in &points {
                let rel = (p.mean_abs_cos - p.analytic_ref).abs() / p.analytic_ref;
                checks.push(Check::new(
                    format!("cosine/n={} rel. dev. from sqrt(2/(pi n))", p.n),
                    rel,
                    format!("< {COSINE_TOLERANCE}"),
                    rel < COSINE_TOLERANCE,
                ));
            }
            Ok(checks)
        }
        Suite::Approx => {
            let grid = opts.n_grid.clone().unwrap_or_else(|| APPROX_GRID.to_vec());
            let trials = opts.trials.unwrap_or(DEFAULT_SWEEP_TRIALS);
            let meta = approx_meta(opts.seed);
            let points = check_theorem2(8, &grid, &meta, trials, opts.seed, exec)?;
            let errors: Vec<f64> = points.iter().map(|p| p.rel_error).collect();
            let gaps = singular_value_row_norm_gap(8, &grid, trials, opts.seed, exec)?;
            let gap_values: Vec<f64> = gaps.iter().map(|g| g.1).collect();
            let mut checks: Vec<Check> = points
                .iter()
                .map(|p| Check::new(format!("approx/n={} rel. error", p.n), p.rel_error, "(reported)", true))
                .collect();
            checks.push(Check::new(
                "approx/rel. error decreasing in n",
                *errors.last().unwrap_or(&f64::NAN),
                "strictly decreasing",
                strictly_decreasing(&errors),
            ));
            checks.push(Check::new(
                "approx/sigma vs row norms decreasing",
                *gap_values.last().unwrap_or(&f64::NAN),
                "strictly decreasing",
                strictly_decreasing(&gap_values),
            ));
            Ok(checks)
        }
        Suite::Gradcheck => {
            let (phi_err, theta_err) = gradcheck_errors(opts.seed)?;
            let seeds = opts.seed..opts.seed + 10;
            let mut checks: Vec<Check> = primitive_gradcheck(seeds)?
                .into_iter()
                .map(|c| {
                    Check::new(
                        format!("gradcheck/primitive {}", c.name),
                        c.max_rel_error,
                        format!("< {PRIMITIVE_TOLERANCE:e}"),
                        c.max_rel_error < PRIMITIVE_TOLERANCE,
                    )
                })
                .collect();
            checks.extend([
                Check::new(
                    "gradcheck/K=1 dphi vs central diff.",
                    phi_err,
                    format!("< {GRADCHECK_TOLERANCE:e}"),
                    phi_err < GRADCHECK_TOLERANCE,
                ),
                Check::new(
                    "gradcheck/K=1 dtheta vs central diff.",
                    theta_err,
                    format!("< {GRADCHECK_TOLERANCE:e}"),
                    theta_err < GRADCHECK_TOLERANCE,
                ),
            ]);
            Ok(checks)
        }
    }
}

/// Fixed meta-parameters with distinct scales for the approximation sweep.
pub fn approx_meta(seed: u64) -> GapMeta {
    let mut r = rng::substream(seed, 7, 0);
    GapMeta::new((0..8).map(|_| r.random_range(-1.0..1.0)).collect())
}

/// Relative errors of the one-step meta-gradient on a 1-40-40-1 network:
/// `∇φ` at perturbed meta-parameters, `∇θ` (directional) at the identity
/// preconditioner.
pub fn gradcheck_errors(seed: u64) -> Result<(f64, f64)> {
    let identity = MetaState::init(&[1, 40, 40, 1], PrecondKind::Gap, LayerSelection::Hidden, seed)?;
    let (_, episode) = eval_episode(seed, 0, 5, 10)?;
    let mut perturbed = identity.clone();
    let mut r = rng::substream(seed, 9, 0);
    for p in perturbed.phi.iter_mut().flatten() {
        *p = p.add(&Tensor::uniform(p.shape(), -0.5, 0.5, &mut r))?;
    }
    let phi_err = check_phi_gradient(&perturbed, &episode, 0.01, 1e-5)?;
    let theta_err = check_theta_gradient(&identity, &episode, 0.01, 1, 10, seed, 1e-6)?;
    Ok((phi_err, theta_err))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cheap_suites_pass() {
        let exec = Executor::new(1);
        let opts = VerifyOptions { trials: Some(40), ..Default::default() };
        for suite in [Suite::Pd, Suite::Similarity, Suite::Gradcheck] {
            let checks = run_suite(suite, &opts, &exec).unwrap();
            assert!(!checks.is_empty());
            assert!(checks.iter().all(|c| c.passed), "{checks:?}");
        }
    }

    #[test]
    fn lemma_suites_reject_small_trial_counts() {
        let opts = VerifyOptions { trials: Some(100), ..Default::default() };
        assert!(run_suite(Suite::Variance, &opts, &Executor::new(1)).is_err());
    }
}
