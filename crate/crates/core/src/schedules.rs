//! Noise schedule and the closed-form algebra of v-parameterized DDIM.
//!
//! `alpha_bar[t]` is the cumulative signal level, `alpha_bar[0] = 1`.
//! With `a = alpha_bar[t]`:
//!
//! ```text
//! z_t = √a·z0 + √(1−a)·ε
//! v   = √a·ε  − √(1−a)·z0
//! x̂0  = √a·z_t − √(1−a)·v
//! ε̂   = √a·v  + √(1−a)·z_t
//! ```

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::video::VideoTensor;

pub const DEFAULT_TRAIN_STEPS: usize = 1000;
pub const DEFAULT_BETA_START: f64 = 1e-4;
pub const DEFAULT_BETA_END: f64 = 0.02;
pub const DEFAULT_SAMPLING_STEPS: usize = 50;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    /// Cumulative product of `1 − β_s` over the given per-step betas.
    pub fn from_betas(betas: &[f64]) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::Invalid("schedule needs at least one step".into()));
        }
        if let Some(b) = betas.iter().find(|b| !(**b > 0.0 && **b < 1.0)) {
            return Err(Error::Invalid(format!("beta {b} outside (0, 1)")));
        }
        let mut alpha_bar = Vec::with_capacity(betas.len() + 1);
        alpha_bar.push(1.0);
        let mut acc = 1.0;
        for b in betas {
            acc *= 1.0 - b;
            alpha_bar.push(acc);
        }
        Ok(Self { alpha_bar })
    }

    pub fn train_steps(&self) -> usize {
        self.alpha_bar.len() - 1
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t > self.train_steps() {
            return Err(Error::Invalid(format!(
                "timestep {t} outside [0, {}]",
                self.train_steps()
            )));
        }
        Ok(())
    }

    /// (√ᾱ_t, √(1−ᾱ_t)).
    fn coefficients(&self, t: usize) -> Result<(f64, f64)> {
        self.check_t(t)?;
        let a = self.alpha_bar[t];
        Ok((a.sqrt(), (1.0 - a).sqrt()))
    }
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        make_linear_schedule(DEFAULT_TRAIN_STEPS, DEFAULT_BETA_START, DEFAULT_BETA_END)
            .expect("default schedule is valid")
    }
}

/// β ramps linearly from `beta_start` (step 1) to `beta_end` (step T).
pub fn make_linear_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if steps == 0 {
        return Err(Error::Invalid("schedule needs T ≥ 1".into()));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::Invalid(format!(
            "need 0 < beta_start ≤ beta_end < 1, got {beta_start}, {beta_end}"
        )));
    }
    let betas: Vec<f64> = (0..steps)
        .map(|i| {
            if steps == 1 {
                beta_start
            } else {
                beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
            }
        })
        .collect();
    NoiseSchedule::from_betas(&betas)
}

fn combine(a: &VideoTensor, ca: f64, b: &VideoTensor, cb: f64, what: &str) -> Result<VideoTensor> {
    a.zip_with(b, what, |x, y| ca * x + cb * y)
}

/// Forward noising: √ᾱ_t·z0 + √(1−ᾱ_t)·ε.
pub fn add_noise(z0: &VideoTensor, eps: &VideoTensor, t: usize, sched: &NoiseSchedule) -> Result<VideoTensor> {
    let (s, n) = sched.coefficients(t)?;
    combine(z0, s, eps, n, "add_noise")
}

/// Velocity target: √ᾱ_t·ε − √(1−ᾱ_t)·z0.
pub fn v_target(z0: &VideoTensor, eps: &VideoTensor, t: usize, sched: &NoiseSchedule) -> Result<VideoTensor> {
    let (s, n) = sched.coefficients(t)?;
    combine(eps, s, z0, -n, "v_target")
}

/// Clean-signal and noise estimates implied by a velocity prediction.
pub fn recover_x0_eps(
    z_t: &VideoTensor,
    v: &VideoTensor,
    t: usize,
    sched: &NoiseSchedule,
) -> Result<(VideoTensor, VideoTensor)> {
    let (s, n) = sched.coefficients(t)?;
    let x0 = combine(z_t, s, v, -n, "recover_x0_eps")?;
    let eps = combine(v, s, z_t, n, "recover_x0_eps")?;
    Ok((x0, eps))
}

/// Re-noises the (x̂0, ε̂) pair implied by `v` at level `t_to`.
fn renoise(z_t: &VideoTensor, v: &VideoTensor, t: usize, t_to: usize, sched: &NoiseSchedule) -> Result<VideoTensor> {
    let (x0, eps) = recover_x0_eps(z_t, v, t, sched)?;
    add_noise(&x0, &eps, t_to, sched)
}

/// Deterministic DDIM update from `t` down to `t_prev`.
pub fn ddim_step(
    z_t: &VideoTensor,
    v: &VideoTensor,
    t: usize,
    t_prev: usize,
    sched: &NoiseSchedule,
) -> Result<VideoTensor> {
    if t_prev >= t {
        return Err(Error::Invalid(format!("ddim_step needs t_prev < t, got {t_prev} ≥ {t}")));
    }
    renoise(z_t, v, t, t_prev, sched)
}

/// DDIM inversion update from `t` up to `t_next`.
pub fn ddim_inverse_step(
    z_t: &VideoTensor,
    v: &VideoTensor,
    t: usize,
    t_next: usize,
    sched: &NoiseSchedule,
) -> Result<VideoTensor> {
    if t_next <= t {
        return Err(Error::Invalid(format!(
            "ddim_inverse_step needs t_next > t, got {t_next} ≤ {t}"
        )));
    }
    renoise(z_t, v, t, t_next, sched)
}

/// Sampling-order timesteps, strictly decreasing within [1, T].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimestepLadder {
    steps: Vec<usize>,
}

impl TimestepLadder {
    pub fn steps(&self) -> &[usize] {
        &self.steps
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// (t, t_prev) pairs in sampling order, ending at t_prev = 0.
    pub fn sampling_pairs(&self) -> Vec<(usize, usize)> {
        self.steps
            .iter()
            .enumerate()
            .map(|(i, &t)| (t, self.steps.get(i + 1).copied().unwrap_or(0)))
            .collect()
    }

    /// (t, t_next) pairs in inversion order, starting at t = 0.
    pub fn inversion_pairs(&self) -> Vec<(usize, usize)> {
        let mut pairs = self.sampling_pairs();
        pairs.reverse();
        pairs.into_iter().map(|(t, t_prev)| (t_prev, t)).collect()
    }
}

/// `t_i = round(T·i/n)` for `i = n..1`.
pub fn make_ladder(sched: &NoiseSchedule, n_steps: usize) -> Result<TimestepLadder> {
    let t_max = sched.train_steps();
    if n_steps == 0 || n_steps > t_max {
        return Err(Error::Invalid(format!("n_steps {n_steps} outside [1, {t_max}]")));
    }
    let steps = (1..=n_steps)
        .rev()
        .map(|i| (t_max as f64 * i as f64 / n_steps as f64).round() as usize)
        .collect();
    Ok(TimestepLadder { steps })
}
