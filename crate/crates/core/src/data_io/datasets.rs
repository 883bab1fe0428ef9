//! Synthetic 2-D spiral datasets.
//!
//! Arm `k` of an `A`-armed family is the curve
//! `p(t) = (t cos(t + 2πk/A), t sin(t + 2πk/A)) / (3π)` for
//! `t ∈ [0.25, t_max]`. The two-spiral set uses two arms with `t_max = 3π`;
//! the four-spin set uses four shorter arms with `t_max = 1.5π`. These
//! parameterizations are this crate's own choice, picked so the data lies in
//! roughly `[-1, 1]²`.

use std::f64::consts::PI;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use super::Dataset;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const TWO_SPIRAL: &str = "two_spiral";
pub const FOUR_SPIN: &str = "four_spin";

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SpiralFamily {
    pub arms: usize,
    pub t_min: f64,
    pub t_max: f64,
}

impl SpiralFamily {
    pub const SCALE: f64 = 1.0 / (3.0 * PI);

    pub fn two_spiral() -> Self {
        Self {
            arms: 2,
            t_min: 0.25,
            t_max: 3.0 * PI,
        }
    }

    pub fn four_spin() -> Self {
        Self {
            arms: 4,
            t_min: 0.25,
            t_max: 1.5 * PI,
        }
    }

    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            TWO_SPIRAL => Ok(Self::two_spiral()),
            FOUR_SPIN => Ok(Self::four_spin()),
            other => Err(Error::Usage(format!("unknown dataset `{other}`"))),
        }
    }

    pub fn arm_offset(&self, arm: usize) -> f64 {
        2.0 * PI * arm as f64 / self.arms as f64
    }

    /// Noise-free point on `arm` at parameter `t`.
    pub fn point(&self, arm: usize, t: f64) -> [f64; 2] {
        let angle = t + self.arm_offset(arm);
        [
            t * angle.cos() * Self::SCALE,
            t * angle.sin() * Self::SCALE,
        ]
    }

    /// Midpoint of an arm in parameter space.
    pub fn arm_center(&self, arm: usize) -> [f64; 2] {
        self.point(arm, 0.5 * (self.t_min + self.t_max))
    }

    /// Draws `n` points, assigning arms round-robin so arm counts differ by at most one.
    pub fn sample(&self, name: &str, n: usize, noise_sd: f64, rng: &mut Rng) -> Result<Dataset> {
        if n < self.arms {
            return Err(Error::Usage(format!(
                "{name} needs at least {} points, got {n}",
                self.arms
            )));
        }
        if !(noise_sd >= 0.0) {
            return Err(Error::Usage(format!("noise sd must be non-negative, got {noise_sd}")));
        }
        let noise = Normal::new(0.0, noise_sd).map_err(|e| Error::Usage(e.to_string()))?;
        let mut data = Vec::with_capacity(2 * n);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let arm = i % self.arms;
            let t = rng.random_range(self.t_min..self.t_max);
            let [x, y] = self.point(arm, t);
            if noise_sd > 0.0 {
                data.push(x + noise.sample(rng));
                data.push(y + noise.sample(rng));
            } else {
                data.push(x);
                data.push(y);
            }
            labels.push(arm);
        }
        Ok(Dataset {
            points: Tensor::new(vec![n, 2], data)?,
            name: name.to_string(),
            normalization: format!("spiral scale 1/(3π), noise_sd={noise_sd}"),
            labels: Some(labels),
        })
    }
}

pub fn gen_two_spiral(n: usize, noise_sd: f64, rng: &mut Rng) -> Result<Dataset> {
    SpiralFamily::two_spiral().sample(TWO_SPIRAL, n, noise_sd, rng)
}

pub fn gen_four_spin(n: usize, noise_sd: f64, rng: &mut Rng) -> Result<Dataset> {
    SpiralFamily::four_spin().sample(FOUR_SPIN, n, noise_sd, rng)
}
