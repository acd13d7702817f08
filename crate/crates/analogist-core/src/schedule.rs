//! Noise schedule construction for the forward diffusion process and the
//! subsampled inference trajectory.

use alloc::{format, vec::Vec};

use crate::error::{Error, Result};

/// Linear-beta noise schedule plus a descending list of inference timesteps.
///
/// All schedule quantities are kept in f64; the accumulated products get
/// small enough (around 4e-5 at t = 999) that f32 would waste most of its
/// precision exactly where the sampler divides by them.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    /// Number of training timesteps T.
    pub t_train: usize,
    pub betas: Vec<f64>,
    pub alphas: Vec<f64>,
    /// Cumulative products of alphas, strictly decreasing.
    pub alpha_bars: Vec<f64>,
    /// Subsampled timesteps, strictly descending, starting at T - 1.
    pub inference_steps: Vec<usize>,
}

pub const BETA_START: f64 = 1e-4;
pub const BETA_END: f64 = 2e-2;

/// Builds a linear schedule over `t_train` steps with `steps` evenly spaced
/// inference timesteps.
pub fn build_schedule(t_train: usize, steps: usize) -> Result<NoiseSchedule> {
    if t_train == 0 {
        return Err(Error::InvalidConfig("training steps T must be positive".into()));
    }
    if steps == 0 || steps > t_train {
        return Err(Error::InvalidConfig(format!(
            "inference steps must be in 1..={t_train}, got {steps}"
        )));
    }
    let mut betas = Vec::with_capacity(t_train);
    for t in 0..t_train {
        let frac = if t_train == 1 { 0.0 } else { t as f64 / (t_train - 1) as f64 };
        betas.push(BETA_START + (BETA_END - BETA_START) * frac);
    }
    let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
    let mut alpha_bars = Vec::with_capacity(t_train);
    let mut prod = 1.0;
    for &a in &alphas {
        prod *= a;
        alpha_bars.push(prod);
    }
    let ratio = t_train / steps;
    let inference_steps: Vec<usize> = (0..steps).map(|j| t_train - 1 - j * ratio).collect();
    let schedule = NoiseSchedule { t_train, betas, alphas, alpha_bars, inference_steps };
    schedule.validate()?;
    Ok(schedule)
}

impl NoiseSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.betas.iter().any(|&b| !(0.0 < b && b < 1.0)) {
            return Err(Error::InvalidConfig("betas must lie in (0, 1)".into()));
        }
        for pair in self.alpha_bars.windows(2) {
            if pair[1] >= pair[0] {
                return Err(Error::InvalidConfig("alpha_bar must be strictly decreasing".into()));
            }
        }
        for pair in self.inference_steps.windows(2) {
            if pair[1] >= pair[0] {
                return Err(Error::InvalidConfig(
                    "inference steps must be strictly descending".into(),
                ));
            }
        }
        match (self.inference_steps.first(), self.inference_steps.last()) {
            (Some(&first), Some(&last)) if first < self.t_train && last < self.t_train => Ok(()),
            (Some(_), Some(_)) => {
                Err(Error::InvalidConfig("inference steps out of range".into()))
            }
            _ => Err(Error::InvalidConfig("inference steps empty".into())),
        }
    }

    #[inline]
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t]
    }

    /// alpha_bar of the inference step preceding position `pos` in the
    /// trajectory (1.0 once the trajectory is exhausted).
    pub fn alpha_bar_prev(&self, pos: usize) -> f64 {
        match self.inference_steps.get(pos + 1) {
            Some(&t) => self.alpha_bars[t],
            None => 1.0,
        }
    }

    /// Position of timestep `t` within the inference trajectory.
    pub fn position_of(&self, t: usize) -> Option<usize> {
        self.inference_steps.iter().position(|&s| s == t)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fifty_of_a_thousand_descend_from_999() {
        let s = build_schedule(1000, 50).unwrap();
        assert_eq!(s.inference_steps.len(), 50);
        assert_eq!(s.inference_steps[0], 999);
        assert_eq!(s.inference_steps[1], 979);
        assert_eq!(*s.inference_steps.last().unwrap(), 19);
        assert!(s.inference_steps.windows(2).all(|p| p[0] > p[1]));
    }

    #[test]
    fn first_alpha_bar_is_one_minus_beta_start() {
        let s = build_schedule(1000, 50).unwrap();
        assert!((s.alpha_bars[0] - 0.9999).abs() < 1e-12);
    }

    #[test]
    fn alpha_bar_is_strictly_decreasing_and_positive() {
        let s = build_schedule(1000, 50).unwrap();
        assert!(s.alpha_bars.windows(2).all(|p| p[1] < p[0]));
        assert!(s.alpha_bars.iter().all(|&a| a > 0.0));
        // Terminal signal level is tiny but nonzero.
        assert!(s.alpha_bars[999] < 1e-4);
    }

    #[test]
    fn too_many_steps_is_rejected() {
        assert!(matches!(build_schedule(10, 11), Err(Error::InvalidConfig(_))));
        assert!(build_schedule(10, 10).is_ok());
    }

    #[test]
    fn single_step_schedule_is_valid() {
        let s = build_schedule(1000, 1).unwrap();
        assert_eq!(s.inference_steps, alloc::vec![999]);
        assert_eq!(s.alpha_bar_prev(0), 1.0);
    }
}
