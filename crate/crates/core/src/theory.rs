//! Monte-Carlo and algebraic checks of the preconditioner's properties:
//! positive definiteness and similarity of `D`, the two unit-sphere lemmas,
//! the decay of row cosines in Gaussian matrices, and the agreement between
//! the SVD transform and plain row scaling.
//!
//! Trials are independent and draw from per-trial streams
//! ([`crate::rng::stream`]), so every statistic is identical for any worker
//! count.

use std::fmt;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{GapError, Result};
use crate::linalg::{orient_min_rows, svd, symmetric_eigen};
use crate::par::Executor;
use crate::preconditioners::{approx_gap_transform, build_p_gap, gap_transform_with, vec_columns, GapMeta};
use crate::rng;
use crate::tensor::Tensor;

pub const MIN_LEMMA_TRIALS: usize = 10_000;
pub const VARIANCE_SLACK_SE: f64 = 5.0;
pub const CHEBYSHEV_SLACK_SE: f64 = 3.0;

/// One line of a verification report.
#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: String,
    pub statistic: f64,
    pub threshold: String,
    pub passed: bool,
}

impl Check {
    pub fn new(name: impl Into<String>, statistic: f64, threshold: impl Into<String>, passed: bool) -> Self {
        Self { name: name.into(), statistic, threshold: threshold.into(), passed }
    }
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:<36} {:>14.6e}  {:<28} {}",
            self.name,
            self.statistic,
            self.threshold,
            if self.passed { "PASS" } else { "FAIL" }
        )
    }
}

/// A point on the unit sphere in `R^n`.
#[derive(Clone, Debug)]
pub struct SphereSample {
    pub v: Tensor,
}

/// Uniform sample from the unit sphere: a standard normal vector divided by
/// its norm.
pub fn sample_unit_sphere(n: usize, rng: &mut impl Rng) -> Result<SphereSample> {
    if n < 1 {
        return Err(GapError::Domain("sphere dimension must be at least 1".into()));
    }
    loop {
        let raw: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        let norm = raw.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            return Ok(SphereSample { v: Tensor::vector(raw.into_iter().map(|x| x / norm).collect()) });
        }
    }
}

#[derive(Clone, Debug)]
pub struct VarianceReport {
    pub n: usize,
    pub trials: usize,
    pub variance: f64,
    pub expected: f64,
    pub std_error: f64,
    pub passed: bool,
}

/// Empirical variance of the first coordinate of a uniform unit vector,
/// compared with `1/n`. The mean is known to be zero, so the variance is
/// `E[X²]` and its standard error comes from the fourth moment.
pub fn check_variance_lemma(n: usize, trials: usize, seed: u64, exec: &Executor) -> Result<VarianceReport> {
    if trials < MIN_LEMMA_TRIALS {
        return Err(GapError::Domain(format!("need at least {MIN_LEMMA_TRIALS} trials, got {trials}")));
    }
    let squares = exec.try_map(trials, |t| {
        let x = sample_unit_sphere(n, &mut rng::stream(seed, t as u64))?.v.data()[0];
        Ok::<_, GapError>(x * x)
    })?;
    let count = trials as f64;
    let variance = squares.iter().sum::<f64>() / count;
    let fourth = squares.iter().map(|s| s * s).sum::<f64>() / count;
    let std_error = ((fourth - variance * variance).max(0.0) / count).sqrt();
    let expected = 1.0 / n as f64;
    let passed = (variance - expected).abs() <= VARIANCE_SLACK_SE * std_error;
    Ok(VarianceReport { n, trials, variance, expected, std_error, passed })
}

#[derive(Clone, Debug)]
pub struct ChebyshevReport {
    pub n: usize,
    pub eps: f64,
    pub trials: usize,
    pub probability: f64,
    pub bound: f64,
    pub std_error: f64,
    pub passed: bool,
}

/// Fraction of independent unit-vector pairs with `|<x, y>| > eps`, against
/// the bound `1/(n·eps²)` plus three binomial standard errors.
pub fn check_chebyshev_lemma(n: usize, eps: f64, trials: usize, seed: u64, exec: &Executor) -> Result<ChebyshevReport> {
    if !(eps > 0.0) {
        return Err(GapError::Domain(format!("eps must be positive, got {eps}")));
    }
    if trials == 0 {
        return Err(GapError::Domain("need at least one trial".into()));
    }
    let hits = exec.try_map(trials, |t| {
        let mut r = rng::stream(seed, t as u64);
        let x = sample_unit_sphere(n, &mut r)?;
        let y = sample_unit_sphere(n, &mut r)?;
        Ok::<_, GapError>(x.v.dot(&y.v).abs() > eps)
    })?;
    let count = trials as f64;
    let probability = hits.iter().filter(|&&h| h).count() as f64 / count;
    let std_error = (probability * (1.0 - probability) / count).sqrt();
    let bound = 1.0 / (n as f64 * eps * eps);
    let passed = probability <= bound + CHEBYSHEV_SLACK_SE * std_error;
    Ok(ChebyshevReport { n, eps, trials, probability, bound, std_error, passed })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CosinePoint {
    pub n: usize,
    pub mean_abs_cos: f64,
    pub analytic_ref: f64,
}

/// `√(2/(πn))`, the large-`n` mean of `|cos|` between independent Gaussian
/// vectors.
pub fn cosine_reference(n: usize) -> f64 {
    (2.0 / (std::f64::consts::PI * n as f64)).sqrt()
}

fn abs_cos(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    (dot.abs() / (na * nb)).min(1.0)
}

/// Mean over trials and row pairs of `|cos(g_i, g_j)|` for Gaussian `m x n`
/// matrices, for each `n` in the grid.
pub fn cosine_decay_sweep(m: usize, n_grid: &[usize], trials: usize, seed: u64, exec: &Executor) -> Result<Vec<CosinePoint>> {
    if m < 2 {
        return Err(GapError::Domain(format!("need at least two rows, got {m}")));
    }
    if trials == 0 || n_grid.contains(&0) {
        return Err(GapError::Domain("trials and every n must be positive".into()));
    }
    let pairs = (m * (m - 1) / 2) as f64;
    n_grid
        .iter()
        .enumerate()
        .map(|(gi, &n)| {
            let per_trial = exec.map(trials, |t| {
                let g = Tensor::standard_normal(&[m, n], &mut rng::substream(seed, gi as u64, t as u64));
                let mut total = 0.0;
                for i in 0..m {
                    for j in i + 1..m {
                        total += abs_cos(g.row(i), g.row(j));
                    }
                }
                total / pairs
            });
            Ok(CosinePoint {
                n,
                mean_abs_cos: per_trial.iter().sum::<f64>() / trials as f64,
                analytic_ref: cosine_reference(n),
            })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ApproxPoint {
    pub n: usize,
    pub rel_error: f64,
}

/// Mean of `‖gap(G) − approx(G)‖ / ‖gap(G)‖` over Gaussian `m x n`
/// matrices, for each `n` in the grid.
pub fn check_theorem2(
    m: usize,
    n_grid: &[usize],
    meta: &GapMeta,
    trials: usize,
    seed: u64,
    exec: &Executor,
) -> Result<Vec<ApproxPoint>> {
    if meta.len() != m {
        return Err(GapError::Dimension(format!("{} meta-parameters for {m} rows", meta.len())));
    }
    if trials == 0 {
        return Err(GapError::Domain("need at least one trial".into()));
    }
    if let Some(&n) = n_grid.iter().find(|&&n| n < m) {
        return Err(GapError::Domain(format!("n = {n} is smaller than m = {m}")));
    }
    n_grid
        .iter()
        .enumerate()
        .map(|(gi, &n)| {
            let errors = exec.try_map(trials, |t| {
                let g = Tensor::standard_normal(&[m, n], &mut rng::substream(seed, gi as u64, t as u64));
                let res = svd(&g)?;
                let exact = gap_transform_with(&res, meta);
                let approx = approx_gap_transform(&g, meta)?;
                Ok::<_, GapError>(exact.distance(&approx) / exact.frobenius_norm())
            })?;
            Ok(ApproxPoint { n, rel_error: errors.iter().sum::<f64>() / trials as f64 })
        })
        .collect()
}

/// Mean relative gap `‖sort(σ) − sort(‖g_i‖)‖ / ‖sort(‖g_i‖)‖` for Gaussian
/// `m x n` matrices, for each `n` in the grid.
pub fn singular_value_row_norm_gap(
    m: usize,
    n_grid: &[usize],
    trials: usize,
    seed: u64,
    exec: &Executor,
) -> Result<Vec<(usize, f64)>> {
    n_grid
        .iter()
        .enumerate()
        .map(|(gi, &n)| {
            let gaps = exec.try_map(trials, |t| {
                let g = Tensor::standard_normal(&[m, n], &mut rng::substream(seed, gi as u64, t as u64));
                let oriented = orient_min_rows(&g)?;
                let sigma = svd(&oriented.matrix)?.sigma.into_data();
                let mut norms: Vec<f64> = (0..oriented.matrix.rows())
                    .map(|i| oriented.matrix.row(i).iter().map(|x| x * x).sum::<f64>().sqrt())
                    .collect();
                norms.sort_by(|a, b| b.total_cmp(a));
                let diff: f64 = sigma.iter().zip(&norms).map(|(s, r)| (s - r).powi(2)).sum();
                let scale: f64 = norms.iter().map(|r| r * r).sum();
                Ok::<_, GapError>((diff / scale).sqrt())
            })?;
            Ok((n, gaps.iter().sum::<f64>() / trials as f64))
        })
        .collect()
}

pub fn strictly_decreasing(values: &[f64]) -> bool {
    values.windows(2).all(|w| w[1] < w[0])
}

/// Worst cases of the algebraic properties of `D = U·diag(Sp(m))·Uᵀ` over
/// random `(G, m)` pairs.
#[derive(Clone, Debug, Default)]
pub struct PreconditionerReport {
    pub pairs: usize,
    pub max_asymmetry: f64,
    pub min_eigenvalue: f64,
    pub max_eigenvalue_error: f64,
    pub max_transform_error: f64,
    pub min_quadratic_form: f64,
    pub min_descent_inner: f64,
    pub min_task_distance: f64,
}

impl PreconditionerReport {
    pub fn checks(&self) -> Vec<Check> {
        vec![
            Check::new("pd/symmetry ||D-D^T||_F", self.max_asymmetry, "< 1e-12", self.max_asymmetry < 1e-12),
            Check::new("pd/min eigenvalue", self.min_eigenvalue, "> 0", self.min_eigenvalue > 0.0),
            Check::new("pd/min x^T D x", self.min_quadratic_form, "> 0", self.min_quadratic_form > 0.0),
            Check::new("pd/min <g, P g>", self.min_descent_inner, "> 0", self.min_descent_inner > 0.0),
            Check::new("pd/min ||D1-D2||_F", self.min_task_distance, "> 0", self.min_task_distance > 0.0),
            Check::new(
                "similarity/eigenvalues vs Sp(m)",
                self.max_eigenvalue_error,
                "< 1e-9",
                self.max_eigenvalue_error < 1e-9,
            ),
            Check::new("similarity/gap(G) vs D*G", self.max_transform_error, "< 1e-10", self.max_transform_error < 1e-10),
        ]
    }
}

struct PairStats {
    asymmetry: f64,
    min_eigenvalue: f64,
    eigenvalue_error: f64,
    transform_error: f64,
    quadratic_form: f64,
    descent_inner: f64,
    task_distance: f64,
}

fn preconditioner_pair(seed: u64, index: u64) -> Result<PairStats> {
    let mut r = rng::stream(seed, index);
    let m = r.random_range(2..=8);
    let n = r.random_range(m..=16);
    let meta = GapMeta::new((0..m).map(|_| r.random_range(-3.0..3.0)).collect());
    let g = Tensor::standard_normal(&[m, n], &mut r);
    let res = svd(&g)?;
    let p = build_p_gap(&res.u, &meta, n)?;
    let d = &p.d;

    let asymmetry = d.distance(&d.transpose()?);
    let (eigenvalues, _) = symmetric_eigen(d)?;
    let mut scales = meta.scales();
    scales.sort_by(f64::total_cmp);
    let eigenvalue_error = eigenvalues.iter().zip(&scales).fold(0.0f64, |acc, (a, b)| acc.max((a - b).abs()));
    let transform_error = gap_transform_with(&res, &meta).max_abs_diff(&d.matmul(&g)?);

    let mut quadratic_form = f64::INFINITY;
    for _ in 0..100 {
        let x = Tensor::standard_normal(&[m, 1], &mut r);
        let q = x.transpose()?.matmul(&d.matmul(&x)?)?.item() / x.dot(&x);
        quadratic_form = quadratic_form.min(q);
    }

    let vg = vec_columns(&g);
    let pg = p.apply(&vg)?;
    let descent_inner = vg.iter().zip(&pg).map(|(a, b)| a * b).sum::<f64>() / vg.iter().map(|a| a * a).sum::<f64>();

    let other = Tensor::standard_normal(&[m, n], &mut r);
    let d_other = build_p_gap(&svd(&other)?.u, &meta, n)?.d;
    let task_distance = d.distance(&d_other);

    Ok(PairStats {
        asymmetry,
        min_eigenvalue: eigenvalues[0],
        eigenvalue_error,
        transform_error,
        quadratic_form,
        descent_inner,
        task_distance,
    })
}

/// Symmetry, positive definiteness, similarity to `diag(Sp(m))`, agreement
/// with the SVD transform and dependence on the gradient, over `pairs`
/// random Gaussian gradients and meta-parameters.
pub fn check_preconditioner_properties(pairs: usize, seed: u64, exec: &Executor) -> Result<PreconditionerReport> {
    if pairs == 0 {
        return Err(GapError::Domain("need at least one pair".into()));
    }
    let stats = exec.try_map(pairs, |i| preconditioner_pair(seed, i as u64))?;
    let mut report = PreconditionerReport {
        pairs,
        min_eigenvalue: f64::INFINITY,
        min_quadratic_form: f64::INFINITY,
        min_descent_inner: f64::INFINITY,
        min_task_distance: f64::INFINITY,
        ..Default::default()
    };
    for s in stats {
        report.max_asymmetry = report.max_asymmetry.max(s.asymmetry);
        report.min_eigenvalue = report.min_eigenvalue.min(s.min_eigenvalue);
        report.max_eigenvalue_error = report.max_eigenvalue_error.max(s.eigenvalue_error);
        report.max_transform_error = report.max_transform_error.max(s.transform_error);
        report.min_quadratic_form = report.min_quadratic_form.min(s.quadratic_form);
        report.min_descent_inner = report.min_descent_inner.min(s.descent_inner);
        report.min_task_distance = report.min_task_distance.min(s.task_distance);
    }
    Ok(report)
}
