//! Sinusoid few-shot regression: the task family, episode sampling and the
//! many-task evaluation protocol.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{GapError, Result};
use crate::metaloop::{meta_test_episode, MetaState};
use crate::par::Executor;
use crate::preconditioners::PrecondKind;
use crate::rng;
use crate::tensor::Tensor;

pub const AMPLITUDE_RANGE: (f64, f64) = (0.1, 5.0);
pub const FREQUENCY_RANGE: (f64, f64) = (0.8, 1.2);
pub const PHASE_RANGE: (f64, f64) = (0.0, std::f64::consts::PI);
pub const INPUT_RANGE: (f64, f64) = (-5.0, 5.0);

/// Normal-approximation factor for a 95% confidence interval.
pub const CI_Z: f64 = 1.96;

/// `y(x) = A·sin(ωx + b)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SinusoidTask {
    pub amplitude: f64,
    pub omega: f64,
    pub phase: f64,
}

impl SinusoidTask {
    pub fn eval(&self, x: f64) -> f64 {
        self.amplitude * (self.omega * x + self.phase).sin()
    }
}

pub fn sample_task(rng: &mut impl Rng) -> SinusoidTask {
    SinusoidTask {
        amplitude: rng.random_range(AMPLITUDE_RANGE.0..=AMPLITUDE_RANGE.1),
        omega: rng.random_range(FREQUENCY_RANGE.0..=FREQUENCY_RANGE.1),
        phase: rng.random_range(PHASE_RANGE.0..=PHASE_RANGE.1),
    }
}

/// Support and query sets of one task; every tensor is a column (`n x 1`).
#[derive(Clone, Debug)]
pub struct Episode {
    pub support_x: Tensor,
    pub support_y: Tensor,
    pub query_x: Tensor,
    pub query_y: Tensor,
}

fn draw(task: &SinusoidTask, count: usize, rng: &mut impl Rng) -> (Tensor, Tensor) {
    let x = Tensor::uniform(&[count, 1], INPUT_RANGE.0, INPUT_RANGE.1, rng);
    let y = x.map(|v| task.eval(v));
    (x, y)
}

/// Support points first, then query points, all uniform on the input range.
pub fn make_episode(task: &SinusoidTask, shots: usize, query_size: usize, rng: &mut impl Rng) -> Result<Episode> {
    if shots == 0 || query_size == 0 {
        return Err(GapError::Domain(format!(
            "shots ({shots}) and query size ({query_size}) must be positive"
        )));
    }
    let (support_x, support_y) = draw(task, shots, rng);
    let (query_x, query_y) = draw(task, query_size, rng);
    Ok(Episode { support_x, support_y, query_x, query_y })
}

/// Episode of evaluation task `index`; a pure function of its arguments.
pub fn eval_episode(seed: u64, index: usize, shots: usize, query_size: usize) -> Result<(SinusoidTask, Episode)> {
    let mut r = rng::stream(seed, index as u64);
    let task = sample_task(&mut r);
    let episode = make_episode(&task, shots, query_size, &mut r)?;
    Ok((task, episode))
}

/// Mean and `1.96·s/√n` half-width, with `s` the sample standard deviation.
pub fn mean_ci95(values: &[f64]) -> Result<(f64, f64)> {
    if values.len() < 2 {
        return Err(GapError::Domain(format!("need at least two values, got {}", values.len())));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Ok((mean, CI_Z * var.sqrt() / n.sqrt()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSettings {
    pub n_tasks: usize,
    pub shots: usize,
    pub query_size: usize,
    pub alpha: f64,
    pub k_steps: usize,
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TaskResult {
    pub index: usize,
    pub task: SinusoidTask,
    pub mse: f64,
}

#[derive(Clone, Debug)]
pub struct EvalSummary {
    pub results: Vec<TaskResult>,
    pub mean: f64,
    pub ci95: f64,
}

/// Adapts `state` to each of `n_tasks` fresh tasks and reports the query
/// MSE. `kind_override` swaps the preconditioner while keeping the learned
/// initialisation.
pub fn evaluate_protocol(
    state: &MetaState,
    settings: &EvalSettings,
    kind_override: Option<PrecondKind>,
    exec: &Executor,
) -> Result<EvalSummary> {
    if settings.n_tasks < 2 {
        return Err(GapError::Domain(format!("need at least two tasks, got {}", settings.n_tasks)));
    }
    let results = exec.try_map(settings.n_tasks, |index| {
        let (task, episode) = eval_episode(settings.seed, index, settings.shots, settings.query_size)?;
        let mse = meta_test_episode(state, &episode, settings.alpha, settings.k_steps, kind_override)?;
        Ok::<_, GapError>(TaskResult { index, task, mse })
    })?;
    let mses: Vec<f64> = results.iter().map(|r| r.mse).collect();
    let (mean, ci95) = mean_ci95(&mses)?;
    Ok(EvalSummary { results, mean, ci95 })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sampled_tasks_stay_in_range() {
        let mut r = rng::seeded(0);
        let n = 100_000;
        let mut sum = 0.0;
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for _ in 0..n {
            let t = sample_task(&mut r);
            assert!((FREQUENCY_RANGE.0..=FREQUENCY_RANGE.1).contains(&t.omega));
            assert!((PHASE_RANGE.0..=PHASE_RANGE.1).contains(&t.phase));
            lo = lo.min(t.amplitude);
            hi = hi.max(t.amplitude);
            sum += t.amplitude;
        }
        assert!(lo >= 0.1 && hi <= 5.0);
        assert!((sum / n as f64 - 2.55).abs() < 0.0255);
    }

    #[test]
    fn seeded_sampling_is_reproducible() {
        assert_eq!(sample_task(&mut rng::seeded(7)), sample_task(&mut rng::seeded(7)));
        let t = sample_task(&mut rng::seeded(7));
        assert_eq!(t.eval(0.0), t.amplitude * t.phase.sin());
    }

    #[test]
    fn episodes_match_closed_form() {
        let mut r = rng::seeded(1);
        let t = sample_task(&mut r);
        let e = make_episode(&t, 5, 30, &mut r).unwrap();
        assert_eq!(e.support_x.shape(), &[5, 1]);
        assert_eq!(e.query_x.shape(), &[30, 1]);
        for (xs, ys) in [(&e.support_x, &e.support_y), (&e.query_x, &e.query_y)] {
            for (x, y) in xs.data().iter().zip(ys.data()) {
                assert!(x.abs() <= 5.0);
                let expected = t.amplitude * (t.omega * x + t.phase).sin();
                assert!((y - expected).abs() < 1e-12);
            }
        }
        assert!(make_episode(&t, 0, 3, &mut r).is_err());
    }

    #[test]
    fn eval_episodes_are_pure() {
        let (t1, e1) = eval_episode(3, 17, 5, 10).unwrap();
        let (t2, e2) = eval_episode(3, 17, 5, 10).unwrap();
        assert_eq!(t1, t2);
        assert_eq!(e1.query_x, e2.query_x);
        let (t3, _) = eval_episode(3, 18, 5, 10).unwrap();
        assert_ne!(t1, t3);
    }

    #[test]
    fn ci_by_hand() {
        let (mean, ci) = mean_ci95(&[1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        assert_eq!(mean, 3.0);
        let expected = 1.96 * 2.5f64.sqrt() / 5f64.sqrt();
        assert!((ci - expected).abs() < 1e-15);
        assert_eq!(mean_ci95(&[0.25; 4]).unwrap(), (0.25, 0.0));
        assert!(mean_ci95(&[1.0]).is_err());
    }
}
