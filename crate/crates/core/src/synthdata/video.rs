use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{render_frame, sequence_rng, FrameSpec, SequenceData};
use crate::diffcore::{linalg, Tensor};
use crate::error::{LdmError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Trajectory {
    /// Block-diagonal damped rotations `ρ·R(ω)`; the dot sits at the first
    /// two latent coordinates.
    Linear {
        #[serde(default = "d_omega")]
        omega: f64,
        #[serde(default = "one")]
        damping: f64,
        #[serde(default)]
        process_noise: f64,
        #[serde(default = "d_rmin")]
        radius_min: f64,
        #[serde(default = "d_rmax")]
        radius_max: f64,
    },
    /// Constant-speed motion around a square of side `side`, `period` steps
    /// per lap.
    Square {
        #[serde(default = "d_side")]
        side: f64,
        #[serde(default = "d_period")]
        period: f64,
    },
}

fn d_omega() -> f64 {
    std::f64::consts::TAU / 20.0
}
fn one() -> f64 {
    1.0
}
fn d_rmin() -> f64 {
    0.3
}
fn d_rmax() -> f64 {
    1.0
}
fn d_side() -> f64 {
    1.6
}
fn d_period() -> f64 {
    24.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VideoTask {
    #[serde(default = "two")]
    pub latent_dim: usize,
    pub trajectory: Trajectory,
    #[serde(default)]
    pub frame: FrameSpec,
    /// Draw a fresh pixel-noise level uniformly from this range every step.
    #[serde(default)]
    pub noise_level_range: Option<[f64; 2]>,
    pub t_len: usize,
    pub n_sequences: usize,
}

fn two() -> usize {
    2
}

impl VideoTask {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, reason: &str| {
            Err(LdmError::ConfigInvalid {
                field: format!("data.{field}"),
                reason: reason.into(),
            })
        };
        if self.latent_dim < 2 {
            return bad("latent_dim", "must be >= 2");
        }
        if self.t_len < 2 || self.n_sequences == 0 {
            return bad("t_len", "need at least 2 steps and 1 sequence");
        }
        if self.frame.res == 0 || !(self.frame.half_width > 0.0) || !(self.frame.blob_sigma > 0.0) {
            return bad("frame", "res, half_width and blob_sigma must be > 0");
        }
        if let Trajectory::Linear {
            damping,
            radius_min,
            radius_max,
            process_noise,
            ..
        } = self.trajectory
        {
            if !(damping > 0.0 && damping <= 1.0) {
                return bad("trajectory.damping", "must lie in (0, 1] for stable dynamics");
            }
            if !(radius_min >= 0.0 && radius_max >= radius_min) || process_noise < 0.0 {
                return bad("trajectory", "radii must satisfy 0 <= radius_min <= radius_max");
            }
        }
        if let Some([lo, hi]) = self.noise_level_range {
            if !(lo >= 0.0 && hi >= lo) {
                return bad("noise_level_range", "must satisfy 0 <= lo <= hi");
            }
        }
        Ok(())
    }

    /// The true transition matrix for linear trajectories.
    pub fn f_true(&self) -> Option<Tensor> {
        let Trajectory::Linear { omega, damping, .. } = self.trajectory else {
            return None;
        };
        let d = self.latent_dim;
        let mut f = Tensor::zeros(&[d, d]);
        let (s, c) = omega.sin_cos();
        let mut i = 0;
        while i + 1 < d {
            f.set(i, i, damping * c);
            f.set(i, i + 1, -damping * s);
            f.set(i + 1, i, damping * s);
            f.set(i + 1, i + 1, damping * c);
            i += 2;
        }
        if d % 2 == 1 {
            f.set(d - 1, d - 1, damping);
        }
        Some(f)
    }
}

fn square_point(side: f64, phase: f64) -> (f64, f64) {
    let p = phase.rem_euclid(1.0) * 4.0;
    let h = side / 2.0;
    let frac = p.fract();
    match p as usize {
        0 => (-h + side * frac, -h),
        1 => (h, -h + side * frac),
        2 => (h - side * frac, h),
        _ => (-h, h - side * frac),
    }
}

/// Renders videos of a dot following `task.trajectory`.
pub fn gen_video(task: &VideoTask, seed: u64) -> Result<SequenceData> {
    task.validate()?;
    let (n, t_len, d) = (task.n_sequences, task.t_len, task.latent_dim);
    let px = task.frame.res * task.frame.res;
    let mut frames = vec![Tensor::zeros(&[n, px]); t_len];
    let mut positions = vec![Tensor::zeros(&[n, 2]); t_len];
    let mut levels = task.noise_level_range.map(|_| vec![Tensor::zeros(&[n, 1]); t_len]);
    let f = task.f_true();
    if let Some(f) = &f {
        let sv = linalg::singular_values(f)?;
        debug_assert!(sv[0] <= 1.0 + 1e-12);
    }
    for i in 0..n {
        let mut rng = sequence_rng(seed, i);
        let mut path = Vec::with_capacity(t_len);
        match &task.trajectory {
            Trajectory::Linear {
                process_noise,
                radius_min,
                radius_max,
                ..
            } => {
                let f = f.as_ref().expect("linear dynamics");
                let mut s = vec![0.0; d];
                let mut k = 0;
                while k < d {
                    let r = rng.random_range(*radius_min..=*radius_max);
                    let a = rng.random_range(0.0..std::f64::consts::TAU);
                    s[k] = r * a.cos();
                    if k + 1 < d {
                        s[k + 1] = r * a.sin();
                    }
                    k += 2;
                }
                for _ in 0..t_len {
                    path.push((s[0], s[1]));
                    let mut next = vec![0.0; d];
                    for (a, nx) in next.iter_mut().enumerate() {
                        *nx = (0..d).map(|b| f.get(a, b) * s[b]).sum::<f64>()
                            + process_noise * super::normal(&mut rng);
                    }
                    s = next;
                }
            }
            Trajectory::Square { side, period } => {
                let phase0: f64 = rng.random();
                for t in 0..t_len {
                    path.push(square_point(*side, phase0 + t as f64 / period));
                }
            }
        }
        for (t, &(x, y)) in path.iter().enumerate() {
            let level = match task.noise_level_range {
                Some([lo, hi]) => {
                    let l = if hi > lo { rng.random_range(lo..hi) } else { lo };
                    levels.as_mut().expect("levels")[t].set(i, 0, l);
                    l
                }
                None => task.frame.pixel_noise,
            };
            let img = render_frame(&task.frame, x, y, level, &mut rng);
            frames[t].data_mut()[i * px..(i + 1) * px].copy_from_slice(img.data());
            positions[t].set(i, 0, x);
            positions[t].set(i, 1, y);
        }
    }
    Ok(SequenceData {
        frames,
        positions,
        noise_levels: levels,
    })
}
