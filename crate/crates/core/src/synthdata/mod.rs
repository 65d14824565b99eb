//! Seeded generators for the desk-scale experiments.
//!
//! Every generator is a pure function of its task description and seed.
//! Sequence data is time-major: `frames[t]` is `[n_sequences, features]`.

mod blobs;
mod cache;
mod ica;
mod render;
mod swirl;
mod video;

pub use blobs::{gen_blobs, BlobData, BlobsTask};
pub use cache::{cache_key, load_cached, save_cached, CACHE_VERSION};
pub use ica::{gen_ica, IcaData, IcaTask, SourceFamily};
pub use render::{render_frame, swirl_unwarp, swirl_warp, FrameSpec};
pub use swirl::{gen_swirl, swirl_drift, swirl_step, SwirlTask, TrajectoryNoise};
pub use video::{gen_video, Trajectory, VideoTask};

use rand::SeedableRng;
use rand_distr::{Distribution, Gamma, StandardNormal};

use crate::diffcore::Tensor;

/// Time-major sequences with their ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceData {
    /// Per step, `[n_sequences, res·res]`.
    pub frames: Vec<Tensor>,
    /// Per step, `[n_sequences, 2]`.
    pub positions: Vec<Tensor>,
    /// Per step pixel-noise level, `[n_sequences, 1]`, when it varies.
    pub noise_levels: Option<Vec<Tensor>>,
}

impl SequenceData {
    pub fn n_sequences(&self) -> usize {
        self.frames.first().map_or(0, Tensor::rows)
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// The same steps for a subset of sequences.
    pub fn select(&self, idx: &[usize]) -> SequenceData {
        let pick = |v: &Vec<Tensor>| v.iter().map(|t| t.select_rows(idx)).collect();
        SequenceData {
            frames: pick(&self.frames),
            positions: pick(&self.positions),
            noise_levels: self.noise_levels.as_ref().map(pick),
        }
    }

    /// All steps stacked, `[T·n, ·]` for frames and positions.
    pub fn flatten(&self) -> (Tensor, Tensor) {
        let f: Vec<&Tensor> = self.frames.iter().collect();
        let p: Vec<&Tensor> = self.positions.iter().collect();
        (
            Tensor::vcat(&f).expect("equal widths"),
            Tensor::vcat(&p).expect("equal widths"),
        )
    }
}

/// Generator for sequence `i` of a dataset seeded with `seed`.
pub(crate) fn sequence_rng(seed: u64, i: usize) -> crate::Rng {
    let mut r = crate::Rng::seed_from_u64(seed);
    r.set_stream(i as u64 + 1);
    r
}

pub(crate) fn normal(rng: &mut crate::Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Zero-mean generalized-Gaussian draw with density `∝ exp(−|x/α|^β)`,
/// scaled to unit variance. `β = 2` is Gaussian, `β = 1` Laplace.
pub fn generalized_gaussian(shape: f64, rng: &mut crate::Rng) -> f64 {
    if shape == 2.0 {
        return StandardNormal.sample(rng);
    }
    let g = Gamma::new(1.0 / shape, 1.0).expect("positive shape");
    let mag: f64 = g.sample(rng).powf(1.0 / shape);
    let sign = if rand::Rng::random::<bool>(rng) { 1.0 } else { -1.0 };
    // Var = Γ(3/β)/Γ(1/β) for unit scale
    let var = (statrs::function::gamma::ln_gamma(3.0 / shape) - statrs::function::gamma::ln_gamma(1.0 / shape)).exp();
    sign * mag / var.sqrt()
}
