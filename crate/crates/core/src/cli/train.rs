use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::Serialize;

use super::bench::bench_entropy;
use super::config::{DataSpec, EncoderKind, ExperimentConfig, MeanKind, PredictorSpec};
use super::plot;
use crate::diffcore::{Tape, Tensor, Var};
use crate::entropy::EntropyEstimator;
use crate::error::{LdmError, Result};
use crate::kalman::{KalmanParams, NoiseSource};
use crate::latentmodels::{matching_prob_to_beta, Family, LatentModel};
use crate::metrics::{affine_probe, eigenspectrum, grad_cosine, hungarian, jacobian_rank, source_recovery_score};
use crate::nets::{
    collect_grads, flatten, init_params, save_checkpoint, Activation, Adam, Encoder, InitScheme, LinearEncoder, Mlp,
    Module, OutputMap, Rnn,
};
use crate::objectives::{
    loss_linear_ica, loss_linear_ica_temporal, Flavor, GaussianPredictor, LossBreakdown, MeanMap, Objective, Predictor,
};
use crate::synthdata::{gen_blobs, gen_ica, gen_swirl, gen_video, BlobsTask, IcaTask, SequenceData, SwirlTask, VideoTask};

// Stream offsets so that data, initialization and batching draw from
// unrelated generators.
const EVAL_SEED: u64 = 0x5eed_0001;
const INIT_SEED: u64 = 0x5eed_0002;
const BATCH_SEED: u64 = 0x5eed_0003;

/// Rank tolerance relative to the largest singular value.
pub const JACOBIAN_TOL: f64 = 1e-6;
const JACOBIAN_SAMPLES: usize = 1000;

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Overrides the configured output directory.
    pub out: Option<PathBuf>,
    /// Suppresses progress lines on stderr.
    pub quiet: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct RunReport {
    pub experiment: String,
    pub config_hash: String,
    pub seed: u64,
    pub steps: usize,
    pub metrics: BTreeMap<String, f64>,
    pub metrics_csv: PathBuf,
    pub plots: Vec<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub wall_time_s: f64,
    pub warnings: Vec<String>,
}

impl RunReport {
    pub fn metric(&self, name: &str) -> Option<f64> {
        self.metrics.get(name).copied()
    }
}

#[derive(Clone, Debug, Default)]
struct StepRecord {
    step: usize,
    loss: f64,
    alignment: f64,
    entropy_term: f64,
    grad_norm: f64,
    grad_cosine: Option<f64>,
}

struct Run<'a> {
    cfg: &'a ExperimentConfig,
    out: PathBuf,
    quiet: bool,
    records: Vec<StepRecord>,
    plots: Vec<PathBuf>,
    metrics: BTreeMap<String, f64>,
    last_checkpoint: Option<PathBuf>,
}

impl<'a> Run<'a> {
    fn new(cfg: &'a ExperimentConfig, opts: &RunOptions) -> Result<Self> {
        let out = cfg.resolve_output(opts.out.as_deref());
        std::fs::create_dir_all(out.join("plots"))?;
        std::fs::create_dir_all(out.join("checkpoints"))?;
        std::fs::write(out.join("config.toml"), cfg.to_toml())?;
        Ok(Run {
            cfg,
            out,
            quiet: opts.quiet,
            records: Vec::new(),
            plots: Vec::new(),
            metrics: BTreeMap::new(),
            last_checkpoint: None,
        })
    }

    fn log(&self, msg: &str) {
        if !self.quiet {
            eprintln!("[{}] {msg}", self.cfg.experiment.name());
        }
    }

    fn record(&mut self, r: StepRecord) {
        if r.step.is_multiple_of(self.cfg.optim.log_every) {
            self.log(&format!(
                "step {}/{} loss {:.5} alignment {:.5} entropy {:.5} |g| {:.3e}",
                r.step, self.cfg.optim.steps, r.loss, r.alignment, r.entropy_term, r.grad_norm
            ));
        }
        self.records.push(r);
    }

    fn checkpoint(&mut self, name: &str, modules: &[(&str, &dyn Module)]) -> Result<PathBuf> {
        let owned: Vec<(String, Tensor)> = modules
            .iter()
            .flat_map(|(prefix, m)| {
                m.named_params()
                    .into_iter()
                    .map(move |(n, t)| (format!("{prefix}.{n}"), t.clone()))
            })
            .collect();
        let refs: Vec<(String, &Tensor)> = owned.iter().map(|(n, t)| (n.clone(), t)).collect();
        let path = self.out.join("checkpoints").join(name);
        save_checkpoint(&path, &refs)?;
        self.last_checkpoint = Some(path.clone());
        Ok(path)
    }

    fn maybe_checkpoint(&mut self, step: usize, modules: &[(&str, &dyn Module)]) -> Result<()> {
        if step > 0 && step.is_multiple_of(self.cfg.optim.checkpoint_every) {
            self.checkpoint(&format!("step_{step:07}.ckpt"), modules)?;
        }
        Ok(())
    }

    /// Saves the pre-step parameters and reports the failing step.
    fn blowup(&mut self, step: usize, what: &str, modules: &[(&str, &dyn Module)]) -> LdmError {
        match self.checkpoint("last_good.ckpt", modules) {
            Ok(p) => LdmError::NumericalBlowup(format!(
                "non-finite {what} at step {step}; last good checkpoint {}",
                p.display()
            )),
            Err(e) => LdmError::NumericalBlowup(format!("non-finite {what} at step {step}; checkpoint failed: {e}")),
        }
    }

    fn plot(&mut self, name: &str, svg: String) -> Result<()> {
        let path = self.out.join("plots").join(name);
        std::fs::write(&path, svg)?;
        self.plots.push(path);
        Ok(())
    }

    fn set(&mut self, name: &str, v: f64) {
        self.metrics.insert(name.into(), v);
    }

    fn metrics_csv(&self) -> String {
        let mut s = String::from("step,loss,alignment,entropy_term,grad_norm,grad_cosine\n");
        for r in &self.records {
            let gc = r.grad_cosine.map_or(String::new(), |v| v.to_string());
            s.push_str(&format!(
                "{},{},{},{},{},{gc}\n",
                r.step, r.loss, r.alignment, r.entropy_term, r.grad_norm
            ));
        }
        s
    }

    fn finish(mut self, t0: Instant, warnings: Vec<String>) -> Result<RunReport> {
        let csv = self.out.join("metrics.csv");
        std::fs::write(&csv, self.metrics_csv())?;
        if !self.records.is_empty() {
            let series = |f: fn(&StepRecord) -> f64| self.records.iter().map(|r| (r.step as f64, f(r))).collect();
            let svg = plot::line_plot(
                "training",
                "step",
                "value",
                &[
                    ("loss", series(|r| r.loss)),
                    ("alignment", series(|r| r.alignment)),
                    ("entropy term", series(|r| r.entropy_term)),
                ],
            );
            self.plot("loss.svg", svg)?;
        }
        let cosines: Vec<(usize, f64)> =
            self.records.iter().filter_map(|r| r.grad_cosine.map(|c| (r.step, c))).collect();
        if !cosines.is_empty() {
            let steps = self.cfg.optim.steps.max(1);
            let tenth = (steps as f64 * 0.1).ceil() as usize;
            let mean_in = |lo: usize, hi: usize| {
                let v: Vec<f64> = cosines.iter().filter(|(s, _)| *s >= lo && *s < hi).map(|c| c.1).collect();
                v.iter().sum::<f64>() / v.len().max(1) as f64
            };
            self.set("grad_cosine_first10", mean_in(0, tenth));
            self.set("grad_cosine_last10", mean_in(steps - tenth, steps));
            let pts = cosines.iter().map(|&(s, c)| (s as f64, c)).collect();
            self.plot("grad_cosine.svg", plot::line_plot("entropy-gradient cosine", "step", "cosine", &[("cosine", pts)]))?;
        }
        let report = RunReport {
            experiment: self.cfg.experiment.name().into(),
            config_hash: self.cfg.hash(),
            seed: self.cfg.seed,
            steps: self.cfg.optim.steps,
            metrics: self.metrics,
            metrics_csv: csv,
            plots: self.plots,
            checkpoint: self.last_checkpoint,
            wall_time_s: t0.elapsed().as_secs_f64(),
            warnings,
        };
        let json = serde_json::to_string_pretty(&report).map_err(|e| LdmError::Format(e.to_string()))?;
        std::fs::write(self.out.join("report.json"), json)?;
        Ok(report)
    }
}

/// Validates, trains and evaluates one experiment, writing `metrics.csv`,
/// `report.json`, `plots/*.svg` and checkpoints under the output directory.
pub fn run(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<RunReport> {
    let v = cfg.validate();
    if let Some(first) = v.violations.first() {
        return Err(LdmError::ConfigInvalid {
            field: first.field.clone(),
            reason: first.reason.clone(),
        });
    }
    let t0 = Instant::now();
    let mut run = Run::new(cfg, opts)?;
    for w in &v.warnings {
        run.log(&format!("warning: {w}"));
    }
    match cfg.data_spec()? {
        DataSpec::Ica(task) => train_ica(&mut run, &task)?,
        DataSpec::Video(task) => train_video(&mut run, &task)?,
        DataSpec::Swirl(task) => train_swirl(&mut run, &task)?,
        DataSpec::Blobs(task) => train_blobs(&mut run, &task)?,
        DataSpec::Bench(spec) => {
            let res = bench_entropy(&spec, cfg.seed)?;
            std::fs::write(run.out.join("bench.csv"), res.to_csv())?;
            for r in &res.rows {
                run.set(&format!("{}_n{}_{}_error", r.distribution, r.n, r.estimator), r.error);
            }
            run.set("folding_gap_estimate", res.folding_gap_estimate);
            run.set("folding_gap_numeric", res.folding_gap_numeric);
        }
    }
    run.finish(t0, v.warnings)
}

fn batch_indices(n: usize, b: usize, rng: &mut crate::Rng) -> Vec<usize> {
    if b >= n {
        return (0..n).collect();
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.partial_shuffle(rng, b);
    idx.truncate(b);
    idx
}

/// Epoch-wise sampling without replacement.
struct Batcher {
    order: Vec<usize>,
    pos: usize,
    rng: crate::Rng,
}

impl Batcher {
    fn new(n: usize, seed: u64) -> Self {
        Batcher {
            order: (0..n).collect(),
            pos: n,
            rng: crate::rng(seed),
        }
    }

    fn next(&mut self, b: usize) -> Vec<usize> {
        let b = b.min(self.order.len());
        if self.pos + b > self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
        }
        let out = self.order[self.pos..self.pos + b].to_vec();
        self.pos += b;
        out
    }
}

fn train_ica(run: &mut Run, task: &IcaTask) -> Result<()> {
    let cfg = run.cfg;
    let data = gen_ica(task, cfg.seed)?;
    let d = task.n_sources;
    let mut enc = LinearEncoder::new(d, d, false);
    enc.volume_preserving = cfg.model.volume_preserving;
    init_params(&mut enc, cfg.seed ^ INIT_SEED, cfg.model.encoder.init);
    if enc.volume_preserving {
        enc.renormalize()?;
    }
    let rho = task.ou_rho();
    let score = |enc: &LinearEncoder| source_recovery_score(&data.x.matmul(&enc.w.transpose()?)?, &data.s_true);
    run.set("recovery_score_init", score(&enc)?);
    let mut opt = Adam::new(cfg.optim.lr).with_clip(cfg.optim.clip);
    let mut rng = crate::rng(cfg.seed ^ BATCH_SEED);
    let n = task.n_samples;
    for step in 0..cfg.optim.steps {
        let tape = Tape::new();
        let p = enc.bind(&tape);
        let lb = match &rho {
            Some(rho) => {
                let idx = batch_indices(n - 1, cfg.optim.batch, &mut rng);
                let next: Vec<usize> = idx.iter().map(|i| i + 1).collect();
                let x = tape.constant(data.x.select_rows(&idx));
                let xn = tape.constant(data.x.select_rows(&next));
                loss_linear_ica_temporal(&p[0], &x, &xn, rho)?
            }
            None => {
                let idx = batch_indices(n, cfg.optim.batch, &mut rng);
                loss_linear_ica(&p[0], &tape.constant(data.x.select_rows(&idx)), cfg.model.source)?
            }
        };
        let (loss, al, ent) = lb.values();
        if !loss.is_finite() {
            return Err(run.blowup(step, "loss", &[("encoder", &enc)]));
        }
        tape.backward(&lb.loss)?;
        let g = collect_grads(&p);
        let grad_norm = opt.step(enc.params_mut(), &g);
        if enc.volume_preserving {
            enc.renormalize()?;
        }
        run.record(StepRecord {
            step,
            loss,
            alignment: al,
            entropy_term: ent,
            grad_norm,
            grad_cosine: None,
        });
        run.maybe_checkpoint(step + 1, &[("encoder", &enc)])?;
    }
    let s_hat = data.x.matmul(&enc.w.transpose()?)?;
    run.set("recovery_score", source_recovery_score(&s_hat, &data.s_true)?);
    run.checkpoint("final.ckpt", &[("encoder", &enc)])?;
    let m = s_hat.rows().min(2000);
    let pts: Vec<(f64, f64)> = (0..m).map(|i| (s_hat.get(i, 0), s_hat.get(i, 1.min(d - 1)))).collect();
    let colour: Vec<f64> = (0..m).map(|i| data.s_true.get(i, 0)).collect();
    run.plot(
        "sources.svg",
        plot::scatter("recovered sources (colour: true source 1)", "ŝ1", "ŝ2", &pts, &colour),
    )?;
    Ok(())
}

fn build_encoder(cfg: &ExperimentConfig, d_in: usize) -> Encoder {
    let m = &cfg.model;
    let mut enc = match m.encoder.kind {
        EncoderKind::Linear => Encoder::Linear(LinearEncoder::new(d_in, m.latent_dim, true)),
        EncoderKind::Mlp => {
            let mut dims = vec![d_in];
            dims.extend(&m.encoder.hidden);
            dims.push(m.latent_dim);
            Encoder::Mlp(Mlp::new(&dims, m.encoder.activation, m.encoder.output_map))
        }
    };
    init_params(&mut enc, cfg.seed ^ INIT_SEED, m.encoder.init);
    enc
}

fn build_predictor(cfg: &ExperimentConfig) -> Predictor {
    let d = cfg.model.latent_dim;
    let mut pred = match &cfg.model.predictor {
        PredictorSpec::Kalman {
            hidden_dim,
            observation,
            noise_net_hidden,
            predictive_sigma2,
        } => {
            let mut k = KalmanParams::new(*hidden_dim, d, *observation);
            k.predictive_sigma2 = *predictive_sigma2;
            Predictor::Kalman(match noise_net_hidden {
                Some(h) => k.with_noise_net(1, *h),
                None => k,
            })
        }
        PredictorSpec::Gaussian {
            mean,
            sigma2,
            hidden,
            rnn_hidden,
        } => {
            let mlp = |input: usize| {
                let mut dims = vec![input];
                dims.extend(hidden);
                dims.push(d);
                Mlp::new(&dims, Activation::Relu, OutputMap::Identity)
            };
            let map = match mean {
                MeanKind::Linear => MeanMap::Linear(Tensor::eye(d)),
                MeanKind::ResidualMlp => MeanMap::ResidualMlp(mlp(d)),
                MeanKind::Recurrent => MeanMap::Recurrent(Rnn::new(d, *rnn_hidden, mlp(*rnn_hidden))),
            };
            Predictor::Gaussian(GaussianPredictor::new(map, d, *sigma2))
        }
    };
    init_params(&mut pred, cfg.seed ^ INIT_SEED ^ 1, InitScheme::UniformFanIn);
    if let Predictor::Gaussian(GaussianPredictor {
        mean: MeanMap::Linear(w),
        ..
    }) = &mut pred
    {
        *w = Tensor::eye(d);
    }
    pred
}

/// Encodes `T` frame batches with one forward pass; returns `T` latents.
fn encode_sequence(enc: &Encoder, p: &[Var], tape: &Tape, frames: &[Tensor]) -> Result<Vec<Var>> {
    let b = frames[0].rows();
    let refs: Vec<&Tensor> = frames.iter().collect();
    let z = enc.forward(p, &tape.constant(Tensor::vcat(&refs)?))?;
    (0..frames.len())
        .map(|t| z.gather_rows(&(t * b..(t + 1) * b).collect::<Vec<_>>()))
        .collect()
}

struct Batch {
    frames: Vec<Tensor>,
    noise: Option<Vec<Tensor>>,
}

impl Batch {
    fn of(data: &SequenceData, idx: &[usize]) -> Batch {
        Batch {
            frames: data.frames.iter().map(|f| f.select_rows(idx)).collect(),
            noise: data
                .noise_levels
                .as_ref()
                .map(|v| v.iter().map(|t| t.select_rows(idx)).collect()),
        }
    }

    fn noise_vars(&self, tape: &Tape) -> Option<Vec<Var>> {
        self.noise
            .as_ref()
            .map(|v| v.iter().map(|t| tape.constant(t.clone())).collect())
    }
}

/// Encoder gradient of the stopgrad plugin conditional entropy.
fn plugin_entropy_gradient(obj: &Objective, enc: &Encoder, pred: &Predictor, batch: &Batch) -> Result<Vec<f64>> {
    let tape = Tape::new();
    let pe = enc.bind(&tape);
    let pp = pred.bind_frozen(&tape);
    let z = encode_sequence(enc, &pe, &tape, &batch.frames)?;
    let noise = batch.noise_vars(&tape);
    let lb = obj.loss_temporal(&z, pred, &pp, noise.as_deref())?;
    tape.backward(&lb.entropy_term)?;
    Ok(flatten(&collect_grads(&pe)))
}

/// Encoder gradient of `Σ_t Ĥ[z_t]` over the predicted steps, each step
/// estimated on its own.
fn marginal_entropy_gradient(est: &EntropyEstimator, enc: &Encoder, pred: &Predictor, batch: &Batch) -> Result<Vec<f64>> {
    let tape = Tape::new();
    let pe = enc.bind(&tape);
    let z = encode_sequence(enc, &pe, &tape, &batch.frames)?;
    let first = pred.first_predicted_step();
    let mut acc = est.estimate(&z[first])?;
    for zt in &z[first + 1..] {
        acc = acc.add(&est.estimate(zt)?)?;
    }
    tape.backward(&acc)?;
    Ok(flatten(&collect_grads(&pe)))
}

/// Shared loop of the sequence experiments: encoder and predictor trained
/// jointly, the predictor optionally on a faster timescale (`predictor_lr`,
/// `n_inner`).
fn train_sequences(run: &mut Run, enc: &mut Encoder, pred: &mut Predictor, data: &SequenceData) -> Result<()> {
    let cfg = run.cfg;
    let o = &cfg.optim;
    let objective = cfg.objective();
    let knn = match cfg.model.estimator {
        e @ EntropyEstimator::Knn { .. } => e,
        _ => EntropyEstimator::default(),
    };
    let latent = LatentModel::new(cfg.model.latent);
    let plugin = Objective::new(Flavor::TemporalStopGrad, latent, EntropyEstimator::StopGradPlugin);
    let mut opt_e = Adam::new(o.lr).with_clip(o.clip);
    let mut opt_p = Adam::new(cfg.predictor_lr()).with_clip(o.clip);
    let mut batcher = Batcher::new(data.n_sequences(), cfg.seed ^ BATCH_SEED);
    let probe: Vec<usize> = (0..o.eval_size.min(data.n_sequences())).collect();
    let probe = Batch::of(data, &probe);
    for step in 0..o.steps {
        let batch = Batch::of(data, &batcher.next(o.batch));
        let grad_cos = if o.grad_cosine_every > 0 && step % o.grad_cosine_every == 0 {
            let a = marginal_entropy_gradient(&knn, enc, pred, &probe)?;
            let b = plugin_entropy_gradient(&plugin, enc, pred, &probe)?;
            Some(grad_cosine(&a, &b))
        } else {
            None
        };
        let tape = Tape::new();
        let pe = enc.bind(&tape);
        let pp = pred.bind(&tape);
        let z = encode_sequence(enc, &pe, &tape, &batch.frames)?;
        let noise = batch.noise_vars(&tape);
        let lb: LossBreakdown = objective.loss_temporal(&z, pred, &pp, noise.as_deref())?;
        let (loss, al, ent) = lb.values();
        if !loss.is_finite() {
            return Err(run.blowup(step, "loss", &[("encoder", &*enc), ("predictor", &*pred)]));
        }
        tape.backward(&lb.loss)?;
        let (ge, gp) = (collect_grads(&pe), collect_grads(&pp));
        if ge.iter().chain(&gp).any(|g| !g.is_finite()) {
            return Err(run.blowup(step, "gradient", &[("encoder", &*enc), ("predictor", &*pred)]));
        }
        let grad_norm = opt_e.step(enc.params_mut(), &ge);
        opt_p.step(pred.params_mut(), &gp);
        let z_fixed: Vec<Tensor> = if o.n_inner > 1 {
            let tape = Tape::new();
            let pe = enc.bind_frozen(&tape);
            encode_sequence(enc, &pe, &tape, &batch.frames)?.iter().map(Var::value).collect()
        } else {
            Vec::new()
        };
        for _ in 1..o.n_inner {
            let tape = Tape::new();
            let pp = pred.bind(&tape);
            let z: Vec<Var> = z_fixed.iter().map(|t| tape.constant(t.clone())).collect();
            let noise = batch.noise_vars(&tape);
            let lb = objective.loss_temporal(&z, pred, &pp, noise.as_deref())?;
            if !lb.loss.item().is_finite() {
                return Err(run.blowup(step, "inner loss", &[("encoder", &*enc), ("predictor", &*pred)]));
            }
            tape.backward(&lb.loss)?;
            opt_p.step(pred.params_mut(), &collect_grads(&pp));
        }
        run.record(StepRecord {
            step,
            loss,
            alignment: al,
            entropy_term: ent,
            grad_norm,
            grad_cosine: grad_cos,
        });
        run.maybe_checkpoint(step + 1, &[("encoder", &*enc), ("predictor", &*pred)])?;
    }
    run.checkpoint("final.ckpt", &[("encoder", &*enc), ("predictor", &*pred)])?;
    Ok(())
}

/// Per-step latents and, for Kalman predictors, filtered hidden means.
fn evaluate_sequences(enc: &Encoder, pred: &Predictor, data: &SequenceData) -> Result<(Vec<Tensor>, Option<Vec<Tensor>>, f64)> {
    let z: Vec<Tensor> = data.frames.iter().map(|f| enc.eval(f)).collect::<Result<_>>()?;
    let tape = Tape::new();
    let pp = pred.bind_frozen(&tape);
    let zv: Vec<Var> = z.iter().map(|t| tape.constant(t.clone())).collect();
    let noise: Option<Vec<Var>> = data
        .noise_levels
        .as_ref()
        .map(|v| v.iter().map(|t| tape.constant(t.clone())).collect());
    let (loglik, hidden) = match pred {
        Predictor::Kalman(k) => {
            let src = match &noise {
                Some(v) => NoiseSource::PerStep(v),
                None => NoiseSource::Fixed,
            };
            let out = k.filter(&pp, &zv, src)?;
            let ll = out.total_mean_loglik()?.item() / out.loglik.len() as f64;
            (ll, Some(out.hidden.iter().map(Var::value).collect()))
        }
        Predictor::Gaussian(_) => {
            let lp = pred.log_probs(&pp, &zv, None, false)?;
            let ll = lp.iter().map(|l| l.mean().item()).sum::<f64>() / lp.len() as f64;
            (ll, None)
        }
    };
    Ok((z, hidden, loglik))
}

fn stack(v: &[Tensor]) -> Result<Tensor> {
    let refs: Vec<&Tensor> = v.iter().collect();
    Tensor::vcat(&refs)
}

/// Probe, spectrum and scatter plots shared by the sequence experiments.
fn report_sequences(run: &mut Run, enc: &Encoder, pred: &Predictor, eval: &SequenceData) -> Result<()> {
    let seed = run.cfg.seed;
    let (z, hidden, loglik) = evaluate_sequences(enc, pred, eval)?;
    let (zf, pos) = (stack(&z)?, stack(&eval.positions)?);
    run.set("eval_loglik_per_step", loglik);
    let probe = affine_probe(&zf, &pos, seed)?;
    run.set("r2_latent", probe.r2_overall);
    run.set("probe_ridge_used", probe.ridge_used as u8 as f64);
    if let Some(h) = &hidden {
        let hp = affine_probe(&stack(h)?, &pos, seed)?;
        run.set("r2_hidden", hp.r2_overall);
        for (i, r) in hp.r2_per_dim.iter().enumerate() {
            run.set(&format!("r2_hidden_dim{i}"), *r);
        }
        // true and decoded paths of a few held-out sequences
        let mut series: Vec<(String, Vec<(f64, f64)>)> = Vec::new();
        for i in 0..eval.n_sequences().min(3) {
            let rows: Vec<Tensor> = h.iter().map(|t| t.select_rows(&[i])).collect();
            let dec = hp.predict(&stack(&rows)?)?;
            series.push((format!("true {i}"), eval.positions.iter().map(|p| (p.get(i, 0), p.get(i, 1))).collect()));
            series.push((format!("decoded {i}"), (0..dec.rows()).map(|t| (dec.get(t, 0), dec.get(t, 1))).collect()));
        }
        let named: Vec<(&str, Vec<(f64, f64)>)> = series.iter().map(|(n, p)| (n.as_str(), p.clone())).collect();
        run.plot("trajectories.svg", plot::line_plot("held-out trajectories", "x", "y", &named))?;
    }
    let spec = eigenspectrum(&zf)?;
    run.plot("eigenspectrum.svg", plot::bars("latent eigenspectrum", "component", "eigenvalue", &spec))?;
    let m = zf.rows().min(3000);
    let pts: Vec<(f64, f64)> = (0..m).map(|i| (zf.get(i, 0), zf.get(i, 1.min(zf.cols() - 1)))).collect();
    let xs: Vec<f64> = (0..m).map(|i| pos.get(i, 0)).collect();
    let ys: Vec<f64> = (0..m).map(|i| pos.get(i, 1)).collect();
    run.plot("latent_by_x.svg", plot::scatter("latents coloured by true x", "z1", "z2", &pts, &xs))?;
    run.plot("latent_by_y.svg", plot::scatter("latents coloured by true y", "z1", "z2", &pts, &ys))?;
    Ok(())
}

fn eval_task<T: Clone>(task: &T, set_n: impl Fn(&mut T)) -> T {
    let mut t = task.clone();
    set_n(&mut t);
    t
}

fn train_video(run: &mut Run, task: &VideoTask) -> Result<()> {
    let cfg = run.cfg;
    let data = gen_video(task, cfg.seed)?;
    let eval = gen_video(&eval_task(task, |t| t.n_sequences = cfg.optim.eval_size), cfg.seed ^ EVAL_SEED)?;
    let mut enc = build_encoder(cfg, task.frame.res * task.frame.res);
    let mut pred = build_predictor(cfg);
    train_sequences(run, &mut enc, &mut pred, &data)?;
    report_sequences(run, &enc, &pred, &eval)
}

fn jacobian_stats(enc: &Encoder, frames: &Tensor) -> Result<(f64, f64)> {
    let n = frames.rows().min(JACOBIAN_SAMPLES);
    let x = frames.select_rows(&(0..n).collect::<Vec<_>>());
    let (ranks, mean) = jacobian_rank(enc, &x, JACOBIAN_TOL)?;
    let full = enc.out_dim().min(enc.in_dim());
    let frac = ranks.iter().filter(|&&r| r >= full).count() as f64 / n as f64;
    Ok((mean, frac))
}

fn train_swirl(run: &mut Run, task: &SwirlTask) -> Result<()> {
    let cfg = run.cfg;
    let data = gen_swirl(task, cfg.seed)?;
    let eval = gen_swirl(&eval_task(task, |t| t.n_sequences = cfg.optim.eval_size), cfg.seed ^ EVAL_SEED)?;
    let eval_frames = stack(&eval.frames)?;
    let mut enc = build_encoder(cfg, task.frame.res * task.frame.res);
    let (mean0, frac0) = jacobian_stats(&enc, &eval_frames)?;
    run.set("jacobian_rank_mean_init", mean0);
    run.set("jacobian_full_rank_frac_init", frac0);
    let mut pred = build_predictor(cfg);
    train_sequences(run, &mut enc, &mut pred, &data)?;
    let (mean, frac) = jacobian_stats(&enc, &eval_frames)?;
    run.set("jacobian_rank_mean", mean);
    run.set("jacobian_full_rank_frac", frac);
    report_sequences(run, &enc, &pred, &eval)
}

/// Accuracy of the best one-to-one matching between predicted categories
/// and labels.
pub fn cluster_accuracy(pred: &[usize], labels: &[usize], n_pred: usize, n_true: usize) -> f64 {
    let k = n_pred.max(n_true);
    let mut counts = vec![vec![0.0; k]; k];
    for (&p, &l) in pred.iter().zip(labels) {
        counts[p][l] += 1.0;
    }
    let cost: Vec<Vec<f64>> = counts.iter().map(|r| r.iter().map(|c| -c).collect()).collect();
    let assign = hungarian(&cost);
    let hit: f64 = assign.iter().enumerate().map(|(i, &j)| counts[i][j]).sum();
    hit / pred.len().max(1) as f64
}

fn argmax(row: &[f64]) -> usize {
    row.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
        .0
}

fn train_blobs(run: &mut Run, task: &BlobsTask) -> Result<()> {
    let cfg = run.cfg;
    let data = gen_blobs(task, cfg.seed)?;
    let mut enc = build_encoder(cfg, task.dim);
    let Family::Categorical { n, beta } = cfg.model.latent else {
        return Err(LdmError::ConfigInvalid {
            field: "model.latent.family".into(),
            reason: "categorical_blobs needs the categorical family".into(),
        });
    };
    let mut opt = Adam::new(cfg.optim.lr).with_clip(cfg.optim.clip);
    let mut rng = crate::rng(cfg.seed ^ BATCH_SEED);
    let mut beta_now = beta;
    for step in 0..cfg.optim.steps {
        if let Some(a) = cfg.model.anneal {
            beta_now = matching_prob_to_beta(a.at(step, cfg.optim.steps), n)?;
        }
        let obj = Objective::new(
            cfg.flavor(),
            LatentModel::new(Family::Categorical { n, beta: beta_now }),
            cfg.model.estimator,
        );
        let idx = batch_indices(task.n_samples, cfg.optim.batch, &mut rng);
        let tape = Tape::new();
        let p = enc.bind(&tape);
        let za = enc.forward(&p, &tape.constant(data.view_a.select_rows(&idx)))?;
        let zb = enc.forward(&p, &tape.constant(data.view_b.select_rows(&idx)))?;
        let lb = obj.loss_pair(&za, &zb)?;
        let (loss, al, ent) = lb.values();
        if !loss.is_finite() {
            return Err(run.blowup(step, "loss", &[("encoder", &enc)]));
        }
        tape.backward(&lb.loss)?;
        let grad_norm = opt.step(enc.params_mut(), &collect_grads(&p));
        run.record(StepRecord {
            step,
            loss,
            alignment: al,
            entropy_term: ent,
            grad_norm,
            grad_cosine: None,
        });
        run.maybe_checkpoint(step + 1, &[("encoder", &enc)])?;
    }
    run.checkpoint("final.ckpt", &[("encoder", &enc)])?;
    let probs = enc.eval(&data.view_a)?;
    let assigned: Vec<usize> = (0..probs.rows()).map(|i| argmax(probs.row(i))).collect();
    run.set("cluster_accuracy", cluster_accuracy(&assigned, &data.labels, n, task.n_clusters));
    let conf = (0..probs.rows()).map(|i| probs.row(i)[assigned[i]]).sum::<f64>() / probs.rows() as f64;
    run.set("mean_max_prob", conf);
    run.set("final_beta", beta_now);
    let m = probs.rows().min(3000);
    let pts: Vec<(f64, f64)> = (0..m).map(|i| (data.view_a.get(i, 0), data.view_a.get(i, 1.min(task.dim - 1)))).collect();
    let col: Vec<f64> = assigned[..m].iter().map(|&a| a as f64).collect();
    run.plot("assignments.svg", plot::scatter("category assignments", "x1", "x2", &pts, &col))?;
    Ok(())
}

/// The violations and warnings of the config at `path`.
pub fn validate_file(path: &Path) -> Result<super::config::Validation> {
    Ok(super::config::validate_str(&std::fs::read_to_string(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cluster_accuracy_is_label_permutation_invariant() {
        let labels = [0, 0, 1, 1, 2, 2];
        assert_eq!(cluster_accuracy(&[2, 2, 0, 0, 1, 1], &labels, 3, 3), 1.0);
        assert!((cluster_accuracy(&[0, 0, 0, 0, 1, 1], &labels, 3, 3) - 4.0 / 6.0).abs() < 1e-12);
    }

    #[test]
    fn batcher_covers_every_index_each_epoch() {
        let mut b = Batcher::new(10, 1);
        let mut seen: Vec<usize> = (0..5).flat_map(|_| b.next(2)).collect();
        seen.sort();
        assert_eq!(seen, (0..10).collect::<Vec<_>>());
    }
}
