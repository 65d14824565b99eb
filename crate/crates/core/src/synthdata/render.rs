use serde::{Deserialize, Serialize};

use crate::diffcore::Tensor;

/// Fixed world-to-frame mapping and rendering constants.
///
/// World `[−half_width, half_width]²` maps onto a `res × res` frame with `y`
/// pointing up. `blob_sigma` and `warp_radius` are in pixels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrameSpec {
    #[serde(default = "d_res")]
    pub res: usize,
    #[serde(default = "d_half")]
    pub half_width: f64,
    #[serde(default = "d_blob")]
    pub blob_sigma: f64,
    #[serde(default)]
    pub pixel_noise: f64,
    #[serde(default)]
    pub warp_strength: f64,
    #[serde(default = "d_radius")]
    pub warp_radius: f64,
}

fn d_res() -> usize {
    10
}
fn d_half() -> f64 {
    1.5
}
fn d_blob() -> f64 {
    1.2
}
fn d_radius() -> f64 {
    4.0
}

impl Default for FrameSpec {
    fn default() -> Self {
        FrameSpec {
            res: d_res(),
            half_width: d_half(),
            blob_sigma: d_blob(),
            pixel_noise: 0.0,
            warp_strength: 0.0,
            warp_radius: d_radius(),
        }
    }
}

impl FrameSpec {
    /// World position to continuous frame coordinates `(u, v)`; pixel
    /// `(row i, col j)` has its centre at `(j + ½, i + ½)`.
    pub fn to_frame(&self, x: f64, y: f64) -> (f64, f64) {
        let s = self.res as f64 / (2.0 * self.half_width);
        ((x + self.half_width) * s, (self.half_width - y) * s)
    }
}

fn rotate_about_centre(spec: &FrameSpec, u: f64, v: f64, sign: f64) -> (f64, f64) {
    if spec.warp_strength == 0.0 {
        return (u, v);
    }
    let c = spec.res as f64 / 2.0;
    let (du, dv) = (u - c, v - c);
    let r = du.hypot(dv);
    let ang = sign * spec.warp_strength * (-r / spec.warp_radius).exp();
    let (s, co) = ang.sin_cos();
    (c + co * du - s * dv, c + s * du + co * dv)
}

/// Swirl deformation of frame coordinates: a rotation about the frame
/// centre by `strength·exp(−r/radius)`. The radius is preserved, so the map
/// is inverted by rotating back.
pub fn swirl_warp(spec: &FrameSpec, u: f64, v: f64) -> (f64, f64) {
    rotate_about_centre(spec, u, v, -1.0)
}

pub fn swirl_unwarp(spec: &FrameSpec, u: f64, v: f64) -> (f64, f64) {
    rotate_about_centre(spec, u, v, 1.0)
}

/// A Gaussian blob at world position `(x, y)`, deformed by the swirl warp,
/// plus i.i.d. pixel noise of standard deviation `noise`. Row-major
/// `[res, res]`.
pub fn render_frame(spec: &FrameSpec, x: f64, y: f64, noise: f64, rng: &mut crate::Rng) -> Tensor {
    let res = spec.res;
    let (pu, pv) = spec.to_frame(x, y);
    let inv = 1.0 / (2.0 * spec.blob_sigma * spec.blob_sigma);
    let mut out = Tensor::zeros(&[res, res]);
    for i in 0..res {
        for j in 0..res {
            let (u, v) = swirl_unwarp(spec, j as f64 + 0.5, i as f64 + 0.5);
            let d2 = (u - pu).powi(2) + (v - pv).powi(2);
            let mut val = (-d2 * inv).exp();
            if noise > 0.0 {
                val += noise * super::normal(rng);
            }
            out.set(i, j, val);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn centred_blob_is_rotation_symmetric() {
        let spec = FrameSpec::default();
        let f = render_frame(&spec, 0.0, 0.0, 0.0, &mut crate::rng(0));
        let n = spec.res;
        for i in 0..n {
            for j in 0..n {
                // 90° rotation: (i, j) -> (j, n − 1 − i)
                assert!((f.get(i, j) - f.get(j, n - 1 - i)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_warp_is_bit_identical() {
        let plain = FrameSpec::default();
        let warped = FrameSpec {
            warp_strength: 0.0,
            warp_radius: 2.0,
            ..plain
        };
        let a = render_frame(&plain, 0.4, -0.3, 0.0, &mut crate::rng(0));
        let b = render_frame(&warped, 0.4, -0.3, 0.0, &mut crate::rng(0));
        assert_eq!(a, b);
    }

    #[test]
    fn warp_is_invertible() {
        let spec = FrameSpec {
            warp_strength: 2.0,
            ..FrameSpec::default()
        };
        for k in 0..20 {
            let (u, v) = (0.3 + 0.47 * k as f64, 9.7 - 0.41 * k as f64);
            let (a, b) = swirl_warp(&spec, u, v);
            let (u2, v2) = swirl_unwarp(&spec, a, b);
            assert!((u - u2).abs() < 1e-12 && (v - v2).abs() < 1e-12);
        }
    }

    #[test]
    fn frame_mass_is_stable_away_from_borders() {
        let spec = FrameSpec::default();
        let mass = |x: f64, y: f64| render_frame(&spec, x, y, 0.0, &mut crate::rng(0)).sum();
        let m0 = mass(0.0, 0.0);
        for k in 0..25 {
            let (x, y) = (-0.5 + 0.25 * (k % 5) as f64, -0.5 + 0.25 * (k / 5) as f64);
            let m = mass(x, y);
            assert!((m / m0 - 1.0).abs() < 0.02, "({x}, {y}): {m} vs {m0}");
        }
    }
}
