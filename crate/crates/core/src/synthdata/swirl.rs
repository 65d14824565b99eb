use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{generalized_gaussian, render_frame, sequence_rng, FrameSpec, SequenceData};
use crate::diffcore::Tensor;
use crate::error::{LdmError, Result};

pub const SWIRL_K: usize = 4;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TrajectoryNoise {
    #[default]
    Gaussian,
    /// Unit-variance generalized Gaussian; `shape < 2` has long tails,
    /// `shape > 2` short ones.
    GeneralizedGaussian { shape: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SwirlTask {
    #[serde(default = "d_k")]
    pub k: usize,
    #[serde(default = "d_a")]
    pub a: f64,
    pub noise_scale: f64,
    /// Per-coordinate multipliers of `noise_scale`.
    #[serde(default = "d_aniso")]
    pub noise_axes: [f64; 2],
    #[serde(default)]
    pub noise: TrajectoryNoise,
    pub dt: f64,
    #[serde(default = "d_rmin")]
    pub radius_min: f64,
    #[serde(default = "d_rmax")]
    pub radius_max: f64,
    #[serde(default)]
    pub frame: FrameSpec,
    pub t_len: usize,
    pub n_sequences: usize,
}

fn d_k() -> usize {
    SWIRL_K
}
fn d_a() -> f64 {
    0.1
}
fn d_aniso() -> [f64; 2] {
    [1.0, 1.0]
}
fn d_rmin() -> f64 {
    0.5
}
fn d_rmax() -> f64 {
    1.0
}

impl SwirlTask {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, reason: &str| {
            Err(LdmError::ConfigInvalid {
                field: format!("data.{field}"),
                reason: reason.into(),
            })
        };
        if self.k == 0 {
            return bad("k", "must be >= 1");
        }
        if !(self.dt > 0.0) {
            return bad("dt", "must be > 0");
        }
        if !(self.noise_scale >= 0.0) || self.noise_axes.iter().any(|v| !(*v >= 0.0)) {
            return bad("noise_scale", "must be >= 0");
        }
        if let TrajectoryNoise::GeneralizedGaussian { shape } = self.noise {
            if !(shape > 0.0) {
                return bad("noise.shape", "must be > 0");
            }
        }
        if !(self.radius_min > 0.0 && self.radius_max >= self.radius_min) {
            return bad("radius_min", "need 0 < radius_min <= radius_max");
        }
        if self.t_len < 2 || self.n_sequences == 0 {
            return bad("t_len", "need at least 2 steps and 1 sequence");
        }
        Ok(())
    }
}

/// `(ẋ, ẏ) = (ak cos θ cos k(θ−θ₀) − r sin θ, ak sin θ cos k(θ−θ₀) + r cos θ)`.
pub fn swirl_drift_k(x: f64, y: f64, theta0: f64, a: f64, k: usize) -> Result<(f64, f64)> {
    let r = x.hypot(y);
    if r < 1e-9 {
        return Err(LdmError::OriginSingularity(r));
    }
    let th = y.atan2(x);
    let kf = k as f64;
    let radial = a * kf * (kf * (th - theta0)).cos();
    Ok((radial * th.cos() - r * th.sin(), radial * th.sin() + r * th.cos()))
}

pub fn swirl_drift(x: f64, y: f64, theta0: f64, a: f64) -> Result<(f64, f64)> {
    swirl_drift_k(x, y, theta0, a, SWIRL_K)
}

/// Euler step with Gaussian noise of variance `σ²·dt` per coordinate.
pub fn swirl_step(xy: [f64; 2], theta0: f64, a: f64, sigma: f64, dt: f64, rng: &mut crate::Rng) -> Result<[f64; 2]> {
    let (dx, dy) = swirl_drift(xy[0], xy[1], theta0, a)?;
    let s = sigma * dt.sqrt();
    let (nx, ny) = if sigma > 0.0 {
        (StandardNormal.sample(rng), StandardNormal.sample(rng))
    } else {
        (0.0, 0.0)
    };
    Ok([xy[0] + dt * dx + s * nx, xy[1] + dt * dy + s * ny])
}

/// Swirl-flower trajectories rendered through the swirl image warp.
/// Each sequence draws its own `θ₀`, start radius and start angle.
pub fn gen_swirl(task: &SwirlTask, seed: u64) -> Result<SequenceData> {
    task.validate()?;
    let (n, t_len) = (task.n_sequences, task.t_len);
    let px = task.frame.res * task.frame.res;
    let mut frames = vec![Tensor::zeros(&[n, px]); t_len];
    let mut positions = vec![Tensor::zeros(&[n, 2]); t_len];
    let s = task.noise_scale * task.dt.sqrt();
    for i in 0..n {
        let mut rng = sequence_rng(seed, i);
        let theta0 = rng.random_range(0.0..std::f64::consts::TAU);
        let r0 = rng.random_range(task.radius_min..=task.radius_max);
        let a0 = rng.random_range(0.0..std::f64::consts::TAU);
        let (mut x, mut y) = (r0 * a0.cos(), r0 * a0.sin());
        for t in 0..t_len {
            positions[t].set(i, 0, x);
            positions[t].set(i, 1, y);
            let img = render_frame(&task.frame, x, y, task.frame.pixel_noise, &mut rng);
            frames[t].data_mut()[i * px..(i + 1) * px].copy_from_slice(img.data());
            let (dx, dy) = swirl_drift_k(x, y, theta0, task.a, task.k)?;
            let mut draw = || match task.noise {
                TrajectoryNoise::Gaussian => StandardNormal.sample(&mut rng),
                TrajectoryNoise::GeneralizedGaussian { shape } => generalized_gaussian(shape, &mut rng),
            };
            let (nx, ny) = if s > 0.0 { (draw(), draw()) } else { (0.0, 0.0) };
            x += task.dt * dx + s * task.noise_axes[0] * nx;
            y += task.dt * dy + s * task.noise_axes[1] * ny;
        }
    }
    Ok(SequenceData {
        frames,
        positions,
        noise_levels: None,
    })
}
