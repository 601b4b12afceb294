//! Linear-β DDPM schedule, closed-form forward sampling and the reverse
//! update.

use pointfuse_tensor::Real;

use crate::error::{Error, Result};

pub const DEFAULT_T: usize = 1000;
pub const DEFAULT_BETA_MIN: f64 = 1e-4;
pub const DEFAULT_BETA_MAX: f64 = 0.02;

/// Per-step constants, index `t − 1` for step `t ∈ 1..=T`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    pub beta: Vec<f64>,
    pub alpha: Vec<f64>,
    pub alpha_bar: Vec<f64>,
    pub sigma: Vec<f64>,
}

pub fn make_schedule(t_steps: usize, beta_min: f64, beta_max: f64) -> Result<NoiseSchedule> {
    if t_steps == 0 {
        return Err(Error::invalid("make_schedule", "T must be at least 1"));
    }
    if !(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0) {
        return Err(Error::invalid(
            "make_schedule",
            format!("need 0 < beta_min ≤ beta_max < 1, got [{beta_min}, {beta_max}]"),
        ));
    }
    let beta: Vec<f64> = (0..t_steps)
        .map(|i| {
            if t_steps == 1 {
                beta_min
            } else {
                beta_min + (beta_max - beta_min) * i as f64 / (t_steps - 1) as f64
            }
        })
        .collect();
    Ok(NoiseSchedule::from_betas(beta))
}

impl NoiseSchedule {
    pub fn from_betas(beta: Vec<f64>) -> Self {
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let alpha_bar = alpha
            .iter()
            .scan(1.0, |acc, a| {
                *acc *= a;
                Some(*acc)
            })
            .collect();
        let sigma = beta.iter().map(|b| b.sqrt()).collect();
        Self {
            beta,
            alpha,
            alpha_bar,
            sigma,
        }
    }

    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    fn check_t(&self, op: &'static str, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::invalid(
                op,
                format!("t = {t} outside 1..={}", self.steps()),
            ));
        }
        Ok(())
    }

    pub fn alpha_bar_at(&self, t: usize) -> f64 {
        self.alpha_bar[t - 1]
    }

    /// Reverse-process plan over `steps` evenly strided steps of this
    /// schedule. With `steps == T` the plan is this schedule verbatim.
    pub fn plan(&self, steps: usize) -> Result<SamplingPlan> {
        let t_max = self.steps();
        if steps == 0 || steps > t_max {
            return Err(Error::invalid(
                "sample",
                format!("steps = {steps} must be in 1..={t_max}"),
            ));
        }
        if steps == t_max {
            return Ok(SamplingPlan {
                t_max,
                timesteps: (1..=t_max).collect(),
                beta: self.beta.clone(),
                alpha: self.alpha.clone(),
                alpha_bar: self.alpha_bar.clone(),
                sigma: self.sigma.clone(),
            });
        }
        let timesteps: Vec<usize> = (1..=steps)
            .map(|i| ((i * t_max) as f64 / steps as f64).round() as usize)
            .collect();
        let mut beta = Vec::with_capacity(steps);
        let mut prev = 1.0;
        for &t in &timesteps {
            let ab = self.alpha_bar_at(t);
            beta.push(1.0 - ab / prev);
            prev = ab;
        }
        let sub = NoiseSchedule::from_betas(beta);
        let alpha_bar = timesteps.iter().map(|&t| self.alpha_bar_at(t)).collect();
        Ok(SamplingPlan {
            t_max,
            timesteps,
            beta: sub.beta,
            alpha: sub.alpha,
            alpha_bar,
            sigma: sub.sigma,
        })
    }
}

/// Reverse steps to run; entry `i` is the step that maps the state at
/// `timesteps[i]` to the state at `timesteps[i − 1]` (or to `x_0`).
#[derive(Clone, Debug, PartialEq)]
pub struct SamplingPlan {
    pub t_max: usize,
    pub timesteps: Vec<usize>,
    pub beta: Vec<f64>,
    pub alpha: Vec<f64>,
    pub alpha_bar: Vec<f64>,
    pub sigma: Vec<f64>,
}

impl SamplingPlan {
    pub fn len(&self) -> usize {
        self.timesteps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timesteps.is_empty()
    }
}

/// `x_t = √ᾱ_t·x_0 + √(1−ᾱ_t)·ε`.
pub fn q_sample<R: Real>(
    x0: &[R],
    t: usize,
    eps: &[R],
    schedule: &NoiseSchedule,
) -> Result<Vec<R>> {
    schedule.check_t("q_sample", t)?;
    if x0.len() != eps.len() {
        return Err(Error::invalid(
            "q_sample",
            format!("x0 has {} entries, ε has {}", x0.len(), eps.len()),
        ));
    }
    let ab = schedule.alpha_bar_at(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(x0
        .iter()
        .zip(eps)
        .map(|(&x, &e)| R::of(a * x.as_f64() + b * e.as_f64()))
        .collect())
}

/// Constants of one reverse step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepCoefficients {
    pub alpha: f64,
    pub alpha_bar: f64,
    pub beta: f64,
    pub sigma: f64,
}

impl SamplingPlan {
    pub fn coefficients(&self, i: usize) -> StepCoefficients {
        StepCoefficients {
            alpha: self.alpha[i],
            alpha_bar: self.alpha_bar[i],
            beta: self.beta[i],
            sigma: self.sigma[i],
        }
    }
}

/// `μ = (x_t − β/√(1−ᾱ)·ε̂)/√α`, then `x_{t−1} = μ + σ·z`. Pass `z = None`
/// on the final step.
pub fn reverse_update(
    x: &[f32],
    eps_hat: &[f32],
    c: StepCoefficients,
    z: Option<&[f32]>,
) -> Result<Vec<f32>> {
    if x.len() != eps_hat.len() || z.is_some_and(|z| z.len() != x.len()) {
        return Err(Error::invalid(
            "reverse_step",
            "x, ε̂ and z must have equal length",
        ));
    }
    let k = c.beta / (1.0 - c.alpha_bar).sqrt();
    let inv = 1.0 / c.alpha.sqrt();
    Ok(x.iter()
        .zip(eps_hat)
        .enumerate()
        .map(|(i, (&x, &e))| {
            let mu = inv * (x as f64 - k * e as f64);
            let noise = z.map_or(0.0, |z| c.sigma * z[i] as f64);
            (mu + noise) as f32
        })
        .collect())
}
