use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::entropy::{EntropyEstimator, LogDetMode};
use crate::error::{LdmError, Result};
use crate::kalman::ObservationMode;
use crate::latentmodels::{Family, LatentModel};
use crate::nets::{Activation, InitScheme, OutputMap};
use crate::objectives::{Flavor, Objective, SourceLogPdf};
use crate::synthdata::{BlobsTask, IcaTask, SourceFamily, SwirlTask, Trajectory, VideoTask};

use super::bench::BenchSpec;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    Ica,
    KalmanVideo,
    KalmanNoiseAware,
    Square,
    Swirl,
    EntropyBench,
    CategoricalBlobs,
}

impl ExperimentKind {
    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::Ica => "ica",
            ExperimentKind::KalmanVideo => "kalman_video",
            ExperimentKind::KalmanNoiseAware => "kalman_noise_aware",
            ExperimentKind::Square => "square",
            ExperimentKind::Swirl => "swirl",
            ExperimentKind::EntropyBench => "entropy_bench",
            ExperimentKind::CategoricalBlobs => "categorical_blobs",
        }
    }

    fn default_flavor(self) -> Flavor {
        match self {
            ExperimentKind::Ica => Flavor::LinearIca,
            ExperimentKind::CategoricalBlobs => Flavor::PairMi,
            _ => Flavor::TemporalMi,
        }
    }
}

/// One experiment: data generator, model, optimizer and output location.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentKind,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    /// Task description, typed by `experiment`.
    pub data: toml::Table,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub optim: OptimSection,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderKind {
    Linear,
    #[default]
    Mlp,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderSpec {
    pub kind: EncoderKind,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub output_map: OutputMap,
    pub init: InitScheme,
}

impl Default for EncoderSpec {
    fn default() -> Self {
        EncoderSpec {
            kind: EncoderKind::Mlp,
            hidden: vec![100],
            activation: Activation::Relu,
            output_map: OutputMap::Identity,
            init: InitScheme::UniformFanIn,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MeanKind {
    Linear,
    ResidualMlp,
    #[default]
    Recurrent,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PredictorSpec {
    Kalman {
        #[serde(default = "two")]
        hidden_dim: usize,
        #[serde(default = "d_obs")]
        observation: ObservationMode,
        /// Hidden width of the per-step noise network; off when absent.
        #[serde(default)]
        noise_net_hidden: Option<usize>,
        /// Fixed predictive variance `σ²`; the filter's own innovation
        /// covariance scores the steps when absent.
        #[serde(default)]
        predictive_sigma2: Option<f64>,
    },
    Gaussian {
        #[serde(default)]
        mean: MeanKind,
        #[serde(default = "d_sigma2")]
        sigma2: f64,
        #[serde(default = "d_head")]
        hidden: Vec<usize>,
        #[serde(default = "d_rnn")]
        rnn_hidden: usize,
    },
}

fn two() -> usize {
    2
}
fn d_obs() -> ObservationMode {
    ObservationMode::Selector
}
fn d_sigma2() -> f64 {
    0.1
}
fn d_head() -> Vec<usize> {
    vec![20, 20]
}
fn d_rnn() -> usize {
    10
}

impl Default for PredictorSpec {
    fn default() -> Self {
        PredictorSpec::Kalman {
            hidden_dim: 2,
            observation: ObservationMode::Selector,
            noise_net_hidden: None,
            predictive_sigma2: None,
        }
    }
}

/// Linear schedule of the categorical matching probability.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnnealSpec {
    pub p_start: f64,
    pub p_end: f64,
    /// Fraction of the run over which `p` moves from start to end.
    pub fraction: f64,
}

impl Default for AnnealSpec {
    fn default() -> Self {
        AnnealSpec {
            p_start: 0.8,
            p_end: 0.99,
            fraction: 0.5,
        }
    }
}

impl AnnealSpec {
    pub fn at(&self, step: usize, steps: usize) -> f64 {
        let span = (self.fraction * steps as f64).max(1.0);
        let u = (step as f64 / span).min(1.0);
        self.p_start + (self.p_end - self.p_start) * u
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub latent_dim: usize,
    pub flavor: Option<Flavor>,
    pub encoder: EncoderSpec,
    pub latent: Family,
    pub estimator: EntropyEstimator,
    pub predictor: PredictorSpec,
    /// Source density for linear ICA.
    pub source: SourceLogPdf,
    /// Keep `|det W| = 1` for linear ICA.
    pub volume_preserving: bool,
    pub anneal: Option<AnnealSpec>,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            latent_dim: 2,
            flavor: None,
            encoder: EncoderSpec::default(),
            latent: Family::PlaneGaussian { sigma2: 1.0 },
            estimator: EntropyEstimator::default(),
            predictor: PredictorSpec::default(),
            source: SourceLogPdf::Laplace,
            volume_preserving: false,
            anneal: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimSection {
    pub lr: f64,
    /// Predictor learning rate; defaults to `lr`.
    pub predictor_lr: Option<f64>,
    pub batch: usize,
    pub steps: usize,
    /// Predictor updates per encoder update.
    pub n_inner: usize,
    pub clip: Option<f64>,
    pub log_every: usize,
    pub checkpoint_every: usize,
    /// Record the entropy-gradient cosine every this many steps; 0 is off.
    pub grad_cosine_every: usize,
    /// Held-out sequences (or samples) for evaluation.
    pub eval_size: usize,
}

impl Default for OptimSection {
    fn default() -> Self {
        OptimSection {
            lr: 1e-3,
            predictor_lr: None,
            batch: 32,
            steps: 500,
            n_inner: 1,
            clip: None,
            log_every: 50,
            checkpoint_every: 1000,
            grad_cosine_every: 0,
            eval_size: 200,
        }
    }
}

/// The typed `data` section.
#[derive(Clone, Debug, PartialEq)]
pub enum DataSpec {
    Ica(IcaTask),
    Video(VideoTask),
    Swirl(SwirlTask),
    Bench(BenchSpec),
    Blobs(BlobsTask),
}

/// A failed check: the offending field path and the reason.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Violation {
    pub field: String,
    pub reason: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {}", self.field, self.reason)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct Validation {
    pub violations: Vec<Violation>,
    pub warnings: Vec<String>,
}

impl Validation {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }

    fn push(&mut self, field: impl Into<String>, reason: impl Into<String>) {
        self.violations.push(Violation {
            field: field.into(),
            reason: reason.into(),
        });
    }

    fn push_err(&mut self, prefix: &str, e: LdmError) {
        match e {
            LdmError::ConfigInvalid { field, reason } => self.push(field, reason),
            LdmError::OutOfRange { what, reason, .. } => self.push(format!("{prefix}.{what}"), reason),
            other => self.push(prefix, other.to_string()),
        }
    }
}

fn parse_err(e: toml::de::Error) -> LdmError {
    LdmError::ConfigInvalid {
        field: "<root>".into(),
        reason: e.message().to_string(),
    }
}

/// Parses and validates config text; parse failures become violations.
pub fn validate_str(text: &str) -> Validation {
    match ExperimentConfig::from_toml(text) {
        Ok(c) => c.validate(),
        Err(e) => {
            let mut v = Validation::default();
            v.push_err("<root>", e);
            v
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(parse_err)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// SHA-256 of the canonical serialization.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn flavor(&self) -> Flavor {
        self.model.flavor.unwrap_or(self.experiment.default_flavor())
    }

    pub fn objective(&self) -> Objective {
        Objective::new(self.flavor(), LatentModel::new(self.model.latent), self.model.estimator)
    }

    pub fn predictor_lr(&self) -> f64 {
        self.optim.predictor_lr.unwrap_or(self.optim.lr)
    }

    pub fn data_spec(&self) -> Result<DataSpec> {
        let table = toml::Value::Table(self.data.clone());
        let typed = |e: toml::de::Error| LdmError::ConfigInvalid {
            field: "data".into(),
            reason: e.message().to_string(),
        };
        Ok(match self.experiment {
            ExperimentKind::Ica => DataSpec::Ica(table.try_into().map_err(typed)?),
            ExperimentKind::KalmanVideo | ExperimentKind::KalmanNoiseAware | ExperimentKind::Square => {
                DataSpec::Video(table.try_into().map_err(typed)?)
            }
            ExperimentKind::Swirl => DataSpec::Swirl(table.try_into().map_err(typed)?),
            ExperimentKind::EntropyBench => DataSpec::Bench(table.try_into().map_err(typed)?),
            ExperimentKind::CategoricalBlobs => DataSpec::Blobs(table.try_into().map_err(typed)?),
        })
    }

    /// Output directory: the explicit override, then `output_dir`, then
    /// `$LDM_OUT_DIR/<experiment>-<hash>`, then `runs/<experiment>-<hash>`.
    pub fn resolve_output(&self, explicit: Option<&Path>) -> PathBuf {
        if let Some(p) = explicit {
            return p.to_path_buf();
        }
        if let Some(p) = &self.output_dir {
            return p.clone();
        }
        let root = std::env::var_os("LDM_OUT_DIR").map_or_else(|| PathBuf::from("runs"), PathBuf::from);
        root.join(format!("{}-{}", self.experiment.name(), &self.hash()[..12]))
    }

    /// Schema and cross-module checks. An empty violation list means the
    /// run's preconditions hold.
    pub fn validate(&self) -> Validation {
        let mut v = Validation::default();
        let o = &self.optim;
        if !(o.lr > 0.0 && o.lr.is_finite()) {
            v.push("optim.lr", "must be > 0");
        }
        if let Some(p) = o.predictor_lr {
            if !(p > 0.0 && p.is_finite()) {
                v.push("optim.predictor_lr", "must be > 0");
            }
        }
        if o.batch < 2 {
            v.push("optim.batch", "must be >= 2");
        }
        if o.n_inner < 1 {
            v.push("optim.n_inner", "must be >= 1");
        }
        if let Some(c) = o.clip {
            if !(c > 0.0) {
                v.push("optim.clip", "must be > 0");
            }
        }
        if o.log_every == 0 || o.checkpoint_every == 0 {
            v.push("optim.log_every", "log_every and checkpoint_every must be >= 1");
        }
        let m = &self.model;
        if m.latent_dim == 0 {
            v.push("model.latent_dim", "must be >= 1");
        }
        if m.encoder.hidden.contains(&0) {
            v.push("model.encoder.hidden", "layer widths must be >= 1");
        }
        if let Err(e) = LatentModel::new(m.latent).validate() {
            v.push_err("model.latent", e);
        }
        if let Err(e) = m.estimator.validate() {
            v.push_err("model.estimator", e);
        }
        match &m.predictor {
            PredictorSpec::Kalman {
                hidden_dim,
                noise_net_hidden,
                predictive_sigma2,
                ..
            } => {
                if *hidden_dim == 0 {
                    v.push("model.predictor.hidden_dim", "must be >= 1");
                }
                if *noise_net_hidden == Some(0) {
                    v.push("model.predictor.noise_net_hidden", "must be >= 1");
                }
                if predictive_sigma2.is_some_and(|s| !(s > 0.0 && s.is_finite())) {
                    v.push("model.predictor.predictive_sigma2", "must be > 0");
                }
            }
            PredictorSpec::Gaussian {
                sigma2,
                hidden,
                rnn_hidden,
                ..
            } => {
                if !(*sigma2 > 0.0) {
                    v.push("model.predictor.sigma2", "must be > 0");
                }
                if hidden.contains(&0) || *rnn_hidden == 0 {
                    v.push("model.predictor.hidden", "layer widths must be >= 1");
                }
            }
        }
        if let Some(a) = m.anneal {
            if !(0.0 < a.p_start && a.p_start <= a.p_end && a.p_end < 1.0) {
                v.push("model.anneal", "need 0 < p_start <= p_end < 1");
            }
            if !(a.fraction > 0.0 && a.fraction <= 1.0) {
                v.push("model.anneal.fraction", "must lie in (0, 1]");
            }
        }
        if matches!(m.latent, Family::SphereVmf { .. } | Family::EmpiricalPriorVmf { .. })
            && matches!(
                m.estimator,
                EntropyEstimator::LogDet {
                    mode: LogDetMode::Exact,
                    ..
                }
            )
        {
            v.warnings.push(
                "model.estimator: exact LogDet is not a valid entropy estimator for spherical latents".into(),
            );
        }
        let data = match self.data_spec() {
            Ok(d) => d,
            Err(e) => {
                v.push_err("data", e);
                return v;
            }
        };
        self.validate_pairing(&data, &mut v);
        v
    }

    fn validate_pairing(&self, data: &DataSpec, v: &mut Validation) {
        let m = &self.model;
        let flavor = self.flavor();
        let task_check = match data {
            DataSpec::Ica(t) => t.validate(),
            DataSpec::Video(t) => t.validate(),
            DataSpec::Swirl(t) => t.validate(),
            DataSpec::Bench(t) => t.validate(),
            DataSpec::Blobs(t) => t.validate(),
        };
        if let Err(e) = task_check {
            v.push_err("data", e);
        }
        let want_temporal = matches!(data, DataSpec::Video(_) | DataSpec::Swirl(_));
        match data {
            DataSpec::Ica(t) => {
                if flavor != Flavor::LinearIca {
                    v.push("model.flavor", "ica runs use linear_ica");
                }
                if matches!(t.source_family, SourceFamily::OuProcess { .. }) && !m.volume_preserving {
                    v.warnings.push("model.volume_preserving: temporal ICA is only identifiable with volume-preserving W".into());
                }
            }
            DataSpec::Blobs(t) => {
                if flavor != Flavor::PairMi && flavor != Flavor::PairLdm {
                    v.push("model.flavor", "categorical_blobs uses a pairwise flavor");
                }
                match m.latent {
                    Family::Categorical { n, .. } if n == m.latent_dim => {}
                    Family::Categorical { .. } => v.push("model.latent.n", "must equal model.latent_dim"),
                    _ => v.push("model.latent.family", "categorical_blobs needs the categorical family"),
                }
                if m.encoder.output_map != OutputMap::Softmax {
                    v.push("model.encoder.output_map", "categorical latents need softmax");
                }
                if m.latent_dim < t.n_clusters {
                    v.warnings.push("model.latent_dim: fewer categories than clusters".into());
                }
            }
            _ => {}
        }
        if want_temporal {
            if !flavor.is_temporal() {
                v.push("model.flavor", "sequence experiments need a temporal flavor");
            } else if let Err(e) = self.objective().validate() {
                v.push_err("model", e);
            }
            if let PredictorSpec::Kalman { noise_net_hidden, .. } = &m.predictor {
                let noise_aware = self.experiment == ExperimentKind::KalmanNoiseAware;
                if noise_aware && noise_net_hidden.is_none() {
                    v.push("model.predictor.noise_net_hidden", "kalman_noise_aware needs a noise network");
                }
                if !noise_aware && noise_net_hidden.is_some() {
                    v.push("model.predictor.noise_net_hidden", "only kalman_noise_aware supplies noise levels");
                }
            }
            if self.experiment == ExperimentKind::Swirl && !matches!(m.predictor, PredictorSpec::Gaussian { .. }) {
                v.push("model.predictor.kind", "swirl uses a gaussian predictor");
            }
            if let DataSpec::Video(t) = data {
                let noise = self.experiment == ExperimentKind::KalmanNoiseAware;
                if noise != t.noise_level_range.is_some() {
                    v.push("data.noise_level_range", "required for kalman_noise_aware and only there");
                }
                let square = self.experiment == ExperimentKind::Square;
                if square != matches!(t.trajectory, Trajectory::Square { .. }) {
                    v.push("data.trajectory.kind", "square runs need the square trajectory and vice versa");
                }
            }
            if self.optim.eval_size < 2 {
                v.push("optim.eval_size", "must be >= 2");
            }
        }
    }
}
