//! Probability-flow sampling from a scalar field.
//!
//! The reverse ODE is integrated on a uniform grid from `t = 1` down to
//! `t_min` in the variables `y = a / alpha`, `rho = sigma / alpha`, where it
//! reads `dy/drho = eps_hat(a, t)`. An Euler step in those variables is the
//! deterministic DDIM update; Heun adds a trapezoidal correction.

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::field::ScalarField;
use crate::rng::{self, Rng};
use crate::schedule::DiffusionSchedule;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplerMethod {
    Ddim,
    Heun,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    pub steps: usize,
    pub method: SamplerMethod,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            steps: 25,
            method: SamplerMethod::Ddim,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps < 2 {
            return Err(Error::Config(format!(
                "sampler needs at least 2 steps, got {}",
                self.steps
            )));
        }
        Ok(())
    }

    /// Strictly decreasing times `1 = t_0 > ... > t_N = t_min`.
    pub fn grid(&self, schedule: &DiffusionSchedule) -> Vec<f64> {
        let n = self.steps;
        (0..=n)
            .map(|i| {
                if i == n {
                    schedule.t_min
                } else {
                    1.0 - (1.0 - schedule.t_min) * i as f64 / n as f64
                }
            })
            .collect()
    }
}

/// Predicted noise `-sigma_t * grad f` for every row.
fn predict_noise(
    field: &ScalarField,
    x: &Array2<f64>,
    states: ArrayView2<f64>,
    t: f64,
    sigma: f64,
) -> Result<Array2<f64>> {
    let ts = vec![t; x.nrows()];
    let (_, grad) = field.evaluate_batch(x.view(), states, &ts)?;
    Ok(grad * -sigma)
}

fn first_bad_row(x: &Array2<f64>) -> Option<usize> {
    x.rows()
        .into_iter()
        .position(|r| r.iter().any(|v| !v.is_finite()))
}

/// Integrates from the given terminal noise; row `i` is conditioned on state row `i`.
pub fn integrate(
    field: &ScalarField,
    states: ArrayView2<f64>,
    noise: Array2<f64>,
    config: &SamplerConfig,
    schedule: &DiffusionSchedule,
) -> Result<Array2<f64>> {
    config.validate()?;
    check_dim(field.config().action_dim, noise.ncols())?;
    check_dim(noise.nrows(), states.nrows())?;
    let grid = config.grid(schedule);
    let mut x = noise;
    for step in 0..config.steps {
        let (t, s) = (grid[step], grid[step + 1]);
        let (at, st) = schedule.alpha_sigma(t)?;
        let (as_, ss) = schedule.alpha_sigma(s)?;
        let eps = predict_noise(field, &x, states, t, st).map_err(|e| match e {
            Error::Numeric(reason) => Error::Sampler { step, reason },
            other => other,
        })?;
        let drho = ss / as_ - st / at;
        // y_s = y_t + drho * eps, with y = x / alpha
        let mut next = &x * (as_ / at) + &eps * (as_ * drho);
        if config.method == SamplerMethod::Heun {
            if let Some(row) = first_bad_row(&next) {
                return Err(Error::Sampler {
                    step,
                    reason: format!("non-finite action in row {row}"),
                });
            }
            let eps2 = predict_noise(field, &next, states, s, ss).map_err(|e| match e {
                Error::Numeric(reason) => Error::Sampler { step, reason },
                other => other,
            })?;
            next = &x * (as_ / at) + (&eps + &eps2) * (0.5 * as_ * drho);
        }
        if let Some(row) = first_bad_row(&next) {
            return Err(Error::Sampler {
                step,
                reason: format!("non-finite action in row {row}"),
            });
        }
        x = next;
    }
    Ok(x)
}

/// Draws one action per state row. Noise is consumed row by row, so row `i`
/// of a batch equals the `i`-th of consecutive single draws from the same rng.
pub fn sample_batch(
    field: &ScalarField,
    states: ArrayView2<f64>,
    config: &SamplerConfig,
    schedule: &DiffusionSchedule,
    rng: &mut Rng,
) -> Result<Array2<f64>> {
    check_dim(field.config().state_dim, states.ncols())?;
    let (n, d) = (states.nrows(), field.config().action_dim);
    let noise = Array2::from_shape_vec((n, d), rng::normal_vec(rng, n * d)).unwrap();
    integrate(field, states, noise, config, schedule)
}

/// `n` draws for a stateless field.
pub fn sample_n(
    field: &ScalarField,
    n: usize,
    config: &SamplerConfig,
    schedule: &DiffusionSchedule,
    rng: &mut Rng,
) -> Result<Array2<f64>> {
    let states = Array2::zeros((n, field.config().state_dim));
    if field.config().state_dim != 0 {
        return Err(Error::Input("sample_n needs a stateless field".into()));
    }
    sample_batch(field, states.view(), config, schedule, rng)
}

pub fn sample(
    field: &ScalarField,
    s: &[f64],
    config: &SamplerConfig,
    schedule: &DiffusionSchedule,
    rng: &mut Rng,
) -> Result<Vec<f64>> {
    let states = ArrayView2::from_shape((1, s.len()), s).map_err(|_| Error::Shape {
        expected: field.config().state_dim,
        got: s.len(),
    })?;
    Ok(sample_batch(field, states, config, schedule, rng)?.row(0).to_vec())
}

fn argmax_first(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Best of `n_candidates` draws under `q_fn(s, a)`; the lowest index wins ties.
pub fn rejection_sample<F>(
    field: &ScalarField,
    s: &[f64],
    q_fn: F,
    n_candidates: usize,
    config: &SamplerConfig,
    schedule: &DiffusionSchedule,
    rng: &mut Rng,
) -> Result<Vec<f64>>
where
    F: Fn(&[f64], &[f64]) -> f64,
{
    let states = ArrayView2::from_shape((1, s.len()), s).map_err(|_| Error::Shape {
        expected: field.config().state_dim,
        got: s.len(),
    })?;
    Ok(rejection_sample_batch(field, states, q_fn, n_candidates, config, schedule, rng)?
        .row(0)
        .to_vec())
}

/// Rejection sampling for every state row. Candidates of state `i` occupy
/// consecutive noise draws, matching repeated calls to [`rejection_sample`].
pub fn rejection_sample_batch<F>(
    field: &ScalarField,
    states: ArrayView2<f64>,
    q_fn: F,
    n_candidates: usize,
    config: &SamplerConfig,
    schedule: &DiffusionSchedule,
    rng: &mut Rng,
) -> Result<Array2<f64>>
where
    F: Fn(&[f64], &[f64]) -> f64,
{
    if n_candidates == 0 {
        return Err(Error::Config("n_candidates must be >= 1".into()));
    }
    let (n, m) = states.dim();
    let mut expanded = Array2::zeros((n * n_candidates, m));
    for i in 0..n {
        for c in 0..n_candidates {
            expanded.row_mut(i * n_candidates + c).assign(&states.row(i));
        }
    }
    let cands = sample_batch(field, expanded.view(), config, schedule, rng)?;
    let mut out = Array2::zeros((n, cands.ncols()));
    for i in 0..n {
        let s = states.row(i).to_vec();
        let q: Vec<f64> = (0..n_candidates)
            .map(|c| q_fn(&s, cands.row(i * n_candidates + c).as_slice().unwrap()))
            .collect();
        out.row_mut(i)
            .assign(&cands.row(i * n_candidates + argmax_first(&q)));
    }
    Ok(out)
}
