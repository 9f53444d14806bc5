//! Alternating min-max optimization of the segmentation network against the
//! global and semantic discriminators.
//!
//! Every iteration runs one [`TrainState::generator_step`] (SGD with Nesterov
//! momentum on G and CH) followed by one [`TrainState::discriminator_step`]
//! (Adam on D_g and D_s). The discriminator step consumes the maps the
//! generator step produced, detached, so neither player's update can leak
//! into the other's parameters.

mod optim;
mod schedule;

use std::collections::hash_map::DefaultHasher;
use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::hash::Hasher;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::{downsample_labels, DatasetBundle, Image, LabelMap, Sample};
use crate::diffcore::{Real, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::losses::{self, DomainFlag, LossNorm};
use crate::metrics::{ConfusionMatrix, IouReport};
use crate::models::{
    bind, collect_grads, Checkpoint, GeneratorG, GlobalDiscriminator, HeadCh, ModelConfig, Parameterized,
    SemanticDiscriminator, SemanticDiscriminatorConv, SemanticDiscriminatorFc,
};

pub use optim::{Adam, AdamConfig, Sgd, SgdConfig};
pub use schedule::poly_lr;

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CHECKPOINT_LAST: &str = "checkpoint_last.bin";
pub const CHECKPOINT_BEST: &str = "checkpoint_best.bin";
pub const CHECKPOINT_FINAL: &str = "checkpoint_final.bin";

/// Which objectives are optimized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Segmentation loss on source images only.
    SourceOnly,
    /// Segmentation loss on the labeled target images only.
    Oracle,
    /// Global output-space adaptation.
    Ga,
    /// Global plus class-averaged (fully connected) semantic adaptation.
    GaFcsa,
    /// Global plus pixel-wise (1x1 convolution) semantic adaptation.
    GaCsa,
}

impl Mode {
    pub const ALL: [Mode; 5] = [Mode::SourceOnly, Mode::Oracle, Mode::Ga, Mode::GaFcsa, Mode::GaCsa];

    pub fn name(self) -> &'static str {
        match self {
            Mode::SourceOnly => "source_only",
            Mode::Oracle => "oracle",
            Mode::Ga => "ga",
            Mode::GaFcsa => "ga_fcsa",
            Mode::GaCsa => "ga_csa",
        }
    }

    pub fn parse(name: &str) -> Option<Mode> {
        let norm = name.to_ascii_lowercase().replace(['-', '+'], "_");
        Mode::ALL.into_iter().find(|m| m.name() == norm)
    }

    pub fn uses_source(self) -> bool {
        self != Mode::Oracle
    }

    pub fn adversarial(self) -> bool {
        matches!(self, Mode::Ga | Mode::GaFcsa | Mode::GaCsa)
    }

    pub fn semantic(self) -> bool {
        matches!(self, Mode::GaFcsa | Mode::GaCsa)
    }

    /// Modes that cannot run without labeled target images.
    pub fn needs_labeled_target(self) -> bool {
        matches!(self, Mode::Oracle | Mode::GaFcsa | Mode::GaCsa)
    }

    /// Default semantic adversarial weight for this mode.
    pub fn default_lambda_sadv(self) -> f64 {
        match self {
            Mode::GaCsa => 0.01,
            _ => 1.0,
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda_seg: f64,
    pub lambda_gadv: f64,
    /// `None` picks [`Mode::default_lambda_sadv`].
    pub lambda_sadv: Option<f64>,
    pub lambda_gd: f64,
    pub lambda_sd: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { lambda_seg: 1.0, lambda_gadv: 0.001, lambda_sadv: None, lambda_gd: 1.0, lambda_sd: 1.0 }
    }
}

impl LossWeights {
    pub fn sadv(&self, mode: Mode) -> f64 {
        self.lambda_sadv.unwrap_or_else(|| mode.default_lambda_sadv())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub mode: Mode,
    pub weights: LossWeights,
    pub generator_optimizer: SgdConfig,
    pub discriminator_optimizer: AdamConfig,
    /// Exponent of the polynomial learning-rate decay.
    pub lr_power: f64,
    pub max_iterations: usize,
    /// Seeds parameter initialization and sample order.
    pub seed: u64,
    /// Iterations between validation passes; `None` means `max_iterations / 20`.
    pub eval_every: Option<usize>,
    pub loss_norm: LossNorm,
    /// Hash parameters around every step to prove update isolation.
    pub audit: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: Mode::GaCsa,
            weights: LossWeights::default(),
            generator_optimizer: SgdConfig { lr: 0.01, ..SgdConfig::default() },
            discriminator_optimizer: AdamConfig::default(),
            lr_power: 0.9,
            max_iterations: 3000,
            seed: 0,
            eval_every: None,
            loss_norm: LossNorm::Mean,
            audit: false,
        }
    }
}

impl TrainConfig {
    /// Copy with every implicit default written out.
    pub fn resolved(&self) -> TrainConfig {
        let mut c = self.clone();
        c.weights.lambda_sadv = Some(self.weights.sadv(self.mode));
        c.eval_every = Some(self.eval_interval());
        c
    }

    pub fn eval_interval(&self) -> usize {
        self.eval_every.unwrap_or(self.max_iterations / 20).max(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_iterations == 0 {
            return Err(Error::Config("max_iterations must be positive".into()));
        }
        let w = &self.weights;
        let lambdas = [w.lambda_seg, w.lambda_gadv, w.sadv(self.mode), w.lambda_gd, w.lambda_sd];
        if lambdas.iter().any(|&l| !(l >= 0.0) || !l.is_finite()) {
            return Err(Error::Config(format!("loss weights must be finite and >= 0, got {lambdas:?}")));
        }
        let g = &self.generator_optimizer;
        let d = &self.discriminator_optimizer;
        if !(g.lr >= 0.0 && d.lr >= 0.0 && g.weight_decay >= 0.0 && (0.0..1.0).contains(&g.momentum)) {
            return Err(Error::Config("invalid optimizer settings".into()));
        }
        if !((0.0..1.0).contains(&d.beta1) && (0.0..1.0).contains(&d.beta2) && d.eps > 0.0) {
            return Err(Error::Config("invalid Adam settings".into()));
        }
        if self.eval_every == Some(0) {
            return Err(Error::Config("eval_every must be positive".into()));
        }
        Ok(())
    }

    /// Rejects mode / labeled-budget combinations that cannot be trained.
    pub fn check_budget(&self, labeled: usize) -> Result<()> {
        if labeled == 0 && self.mode.needs_labeled_target() {
            return Err(Error::Config(format!(
                "mode {} needs labeled target images but the labeled budget is 0",
                self.mode
            )));
        }
        Ok(())
    }
}

/// An image with visible ground truth.
pub type Labeled<'a> = (&'a Image, &'a LabelMap);

/// Inputs of one generator step; which parts are used depends on the mode.
#[derive(Debug, Clone, Copy, Default)]
pub struct GeneratorBatch<'a> {
    pub source: Option<Labeled<'a>>,
    pub labeled_target: Option<Labeled<'a>>,
    pub unlabeled_target: Option<&'a Image>,
}

/// Detached generator outputs handed to the discriminator step.
#[derive(Debug, Clone, Default)]
pub struct DiscriminatorBatch<T> {
    pub p_source: Option<Tensor<T>>,
    pub p_target_unlabeled: Option<Tensor<T>>,
    pub f_source: Option<(Tensor<T>, LabelMap)>,
    pub f_target_labeled: Option<(Tensor<T>, LabelMap)>,
}

/// Unweighted value of each evaluated loss term and the weighted total.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StepLosses {
    pub terms: Vec<(String, f64)>,
    pub total: f64,
}

impl StepLosses {
    pub fn term(&self, name: &str) -> Option<f64> {
        self.terms.iter().find(|(n, _)| n == name).map(|&(_, v)| v)
    }
}

/// Evidence collected when [`TrainConfig::audit`] is set.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditReport {
    pub generator_steps: usize,
    pub discriminator_steps: usize,
    /// Discriminator parameters that changed during a generator step.
    pub discriminator_changed_in_generator_step: usize,
    /// Generator or head parameters that changed during a discriminator step.
    pub generator_changed_in_discriminator_step: usize,
    pub max_generator_terms: usize,
    pub max_discriminator_terms: usize,
}

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub iteration: usize,
    pub lr_generator: f64,
    pub lr_discriminator: f64,
    /// Mean of each loss term over the iterations since the previous record.
    pub losses: BTreeMap<String, f64>,
    pub val_miou: Option<f64>,
    pub per_class_iou: BTreeMap<usize, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub records: Vec<MetricsRecord>,
    pub final_miou: Option<f64>,
    pub best_miou: Option<f64>,
    pub audit: AuditReport,
}

fn hash_params<T: Real, M: Parameterized<T>>(h: &mut DefaultHasher, m: &M) {
    for (_, t) in m.params() {
        for v in t.data() {
            h.write_u64(v.as_f64().to_bits());
        }
    }
}

fn to_f64_terms(terms: Vec<(&'static str, f64)>) -> Vec<(String, f64)> {
    terms.into_iter().map(|(n, v)| (n.to_string(), v)).collect()
}

/// Weights, optimizer state and progress of one training run.
#[derive(Debug, Clone)]
pub struct TrainState<T> {
    pub iteration: usize,
    pub config: TrainConfig,
    pub model_config: ModelConfig,
    pub generator: GeneratorG<T>,
    pub head: HeadCh<T>,
    pub global_disc: GlobalDiscriminator<T>,
    pub semantic_disc: Option<SemanticDiscriminator<T>>,
    gen_opt: Sgd<T>,
    disc_opt: Adam<T>,
    pub best_miou: Option<f64>,
    pub audit: AuditReport,
}

impl<T: Real> TrainState<T> {
    pub fn new(config: &TrainConfig, model_config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        model_config.validate()?;
        let config = config.resolved();
        let seed = config.seed;
        let semantic_disc = match config.mode {
            Mode::GaFcsa => Some(SemanticDiscriminator::Fc(SemanticDiscriminatorFc::new(model_config, seed))),
            Mode::GaCsa => Some(SemanticDiscriminator::Conv(SemanticDiscriminatorConv::new(model_config, seed))),
            _ => None,
        };
        Ok(TrainState {
            iteration: 0,
            generator: GeneratorG::new(model_config, seed),
            head: HeadCh::new(model_config, seed),
            global_disc: GlobalDiscriminator::new(model_config, seed),
            semantic_disc,
            gen_opt: Sgd::new(config.generator_optimizer),
            disc_opt: Adam::new(config.discriminator_optimizer),
            best_miou: None,
            audit: AuditReport::default(),
            model_config: model_config.clone(),
            config,
        })
    }

    fn classes(&self) -> usize {
        self.model_config.classes
    }

    fn generator_hash(&self) -> u64 {
        let mut h = DefaultHasher::new();
        hash_params(&mut h, &self.generator);
        hash_params(&mut h, &self.head);
        h.finish()
    }

    fn discriminator_hash(&self) -> u64 {
        let mut h = DefaultHasher::new();
        hash_params(&mut h, &self.global_disc);
        if let Some(d) = &self.semantic_disc {
            hash_params(&mut h, d);
        }
        h.finish()
    }

    /// Learning rates of both optimizers at the current iteration.
    pub fn learning_rates(&self) -> Result<(f64, f64)> {
        let c = &self.config;
        Ok((
            poly_lr(c.generator_optimizer.lr, self.iteration, c.max_iterations, c.lr_power)?,
            poly_lr(c.discriminator_optimizer.lr, self.iteration, c.max_iterations, c.lr_power)?,
        ))
    }

    /// One SGD update of G and CH on
    /// `l_seg (L_seg(I_s) + L_seg(I_tl)) + l_gadv L_gadv(I_s) + l_sadv L_sadv(I_s)`.
    ///
    /// Returns the loss terms and the detached maps for the discriminator step.
    pub fn generator_step(&mut self, batch: &GeneratorBatch<'_>, lr: f64) -> Result<(StepLosses, DiscriminatorBatch<T>)> {
        let before = self.config.audit.then(|| self.discriminator_hash());
        let mode = self.config.mode;
        let norm = self.config.loss_norm;
        let w = self.config.weights;
        let c = self.classes();
        let mut tape = Tape::<T>::new();
        let g = bind(&self.generator, &mut tape, true);
        let head = bind(&self.head, &mut tape, true);
        let mut weighted: Vec<Var> = Vec::new();
        let mut terms: Vec<(&'static str, Var)> = Vec::new();
        let mut out = DiscriminatorBatch::default();

        let forward = |tape: &mut Tape<T>, img: &Image| -> Result<(Var, Var)> {
            let x = tape.constant(img.to_tensor());
            let f = g.forward(tape, x)?;
            let p = head.forward(tape, f, img.height(), img.width())?;
            Ok((f, p))
        };

        if mode.uses_source() {
            let (img, y) = batch
                .source
                .ok_or_else(|| Error::InvalidArgument(format!("mode {mode} needs a source sample")))?;
            let (f, p) = forward(&mut tape, img)?;
            let seg = losses::seg_loss(&mut tape, p, y, norm)?;
            terms.push(("seg_source", seg));
            weighted.push(tape.scale(seg, T::lit(w.lambda_seg)));
            if mode.adversarial() {
                let gadv = losses::gadv_loss(&mut tape, &self.global_disc, p, norm)?;
                terms.push(("gadv", gadv));
                weighted.push(tape.scale(gadv, T::lit(w.lambda_gadv)));
                out.p_source = Some(tape.value(p).clone());
                let fs = tape.shape(f).to_vec();
                let y_small = downsample_labels(y, fs[1], fs[2])?;
                let sadv = match &self.semantic_disc {
                    Some(SemanticDiscriminator::Fc(ds)) => {
                        let vset = losses::class_average(&mut tape, f, &y_small, c)?;
                        Some(losses::sadv_fc_loss(&mut tape, ds, &vset, norm)?)
                    }
                    Some(SemanticDiscriminator::Conv(ds)) => {
                        Some(losses::sadv_conv_loss(&mut tape, ds, f, &y_small, norm)?)
                    }
                    None => None,
                };
                if let Some(sadv) = sadv {
                    terms.push(("sadv", sadv));
                    weighted.push(tape.scale(sadv, T::lit(w.sadv(mode))));
                    out.f_source = Some((tape.value(f).clone(), y_small));
                }
            }
        }

        let wants_target_seg = mode != Mode::SourceOnly;
        if let (true, Some((img, y))) = (wants_target_seg, batch.labeled_target) {
            let (f, p) = forward(&mut tape, img)?;
            let seg = losses::seg_loss(&mut tape, p, y, norm)?;
            terms.push(("seg_target", seg));
            weighted.push(tape.scale(seg, T::lit(w.lambda_seg)));
            if mode.semantic() {
                let fs = tape.shape(f).to_vec();
                out.f_target_labeled = Some((tape.value(f).clone(), downsample_labels(y, fs[1], fs[2])?));
            }
        } else if mode == Mode::Oracle {
            return Err(Error::InvalidArgument("oracle mode needs a labeled target sample".into()));
        }

        if mode.adversarial() {
            let img = batch
                .unlabeled_target
                .ok_or_else(|| Error::InvalidArgument(format!("mode {mode} needs an unlabeled target image")))?;
            let (_, p) = forward(&mut tape, img)?;
            out.p_target_unlabeled = Some(tape.value(p).clone());
        }

        let total = tape.add_all(&weighted)?;
        let total_value = tape.value(total).item().as_f64();
        let values: Vec<(&'static str, f64)> =
            terms.iter().map(|&(n, v)| (n, tape.value(v).item().as_f64())).collect();
        if !total_value.is_finite() {
            return Err(Error::NonFinite {
                iteration: self.iteration,
                detail: format!("generator loss {total_value}; terms {values:?}; lr {lr}"),
            });
        }
        if tape.requires_grad(total) {
            tape.backward(total)?;
        }
        let mut grads = collect_grads(&tape, &g);
        grads.extend(collect_grads(&tape, &head));
        drop(tape);
        let mut params = self.generator.params_mut();
        params.extend(self.head.params_mut());
        self.gen_opt.step(&mut params, &grads, lr)?;

        if let Some(h) = before {
            self.audit.generator_steps += 1;
            self.audit.max_generator_terms = self.audit.max_generator_terms.max(values.len());
            if self.discriminator_hash() != h {
                self.audit.discriminator_changed_in_generator_step += 1;
            }
        }
        Ok((StepLosses { terms: to_f64_terms(values), total: total_value }, out))
    }

    /// One Adam update of D_g and D_s on
    /// `l_gd (L_gd(P_s) + L_gd(P_tu)) + l_sd (L_sd(F_s) + L_sd(F_tl))`.
    pub fn discriminator_step(&mut self, batch: &DiscriminatorBatch<T>, lr: f64) -> Result<StepLosses> {
        let mode = self.config.mode;
        if !mode.adversarial() {
            return Ok(StepLosses::default());
        }
        let before = self.config.audit.then(|| self.generator_hash());
        let norm = self.config.loss_norm;
        let w = self.config.weights;
        let c = self.classes();
        let missing = |what: &str| Error::InvalidArgument(format!("discriminator step is missing {what}"));
        let mut tape = Tape::<T>::new();
        let dg = bind(&self.global_disc, &mut tape, true);
        let mut terms: Vec<(&'static str, Var)> = Vec::new();
        let mut weighted = Vec::new();

        let p_s = tape.constant(batch.p_source.clone().ok_or_else(|| missing("P_s"))?);
        let p_t = tape.constant(batch.p_target_unlabeled.clone().ok_or_else(|| missing("P_tu"))?);
        let gd_s = losses::gd_loss(&mut tape, &dg, p_s, DomainFlag::Source, norm)?;
        let gd_t = losses::gd_loss(&mut tape, &dg, p_t, DomainFlag::Target, norm)?;
        terms.push(("gd_source", gd_s));
        terms.push(("gd_target", gd_t));
        let gd = tape.add(gd_s, gd_t)?;
        weighted.push(tape.scale(gd, T::lit(w.lambda_gd)));

        let mut semantic_grads = None;
        if let Some(sd) = &self.semantic_disc {
            let (fs, ys) = batch.f_source.as_ref().ok_or_else(|| missing("F_s"))?;
            let (ft, yt) = batch.f_target_labeled.as_ref().ok_or_else(|| missing("F_tl"))?;
            let fs = tape.constant(fs.clone());
            let ft = tape.constant(ft.clone());
            let (sd_s, sd_t, vars) = match sd {
                SemanticDiscriminator::Fc(ds) => {
                    let b = bind(ds, &mut tape, true);
                    let vs = losses::class_average(&mut tape, fs, ys, c)?;
                    let vt = losses::class_average(&mut tape, ft, yt, c)?;
                    let s = losses::sd_fc_loss(&mut tape, &b, &vs, DomainFlag::Source, norm)?;
                    let t = losses::sd_fc_loss(&mut tape, &b, &vt, DomainFlag::Target, norm)?;
                    (s, t, b.vars().to_vec())
                }
                SemanticDiscriminator::Conv(ds) => {
                    let b = bind(ds, &mut tape, true);
                    let s = losses::sd_conv_loss(&mut tape, &b, fs, ys, DomainFlag::Source, norm)?;
                    let t = losses::sd_conv_loss(&mut tape, &b, ft, yt, DomainFlag::Target, norm)?;
                    (s, t, b.vars().to_vec())
                }
            };
            terms.push(("sd_source", sd_s));
            terms.push(("sd_target", sd_t));
            let sdl = tape.add(sd_s, sd_t)?;
            weighted.push(tape.scale(sdl, T::lit(w.lambda_sd)));
            semantic_grads = Some(vars);
        }

        let total = tape.add_all(&weighted)?;
        let total_value = tape.value(total).item().as_f64();
        let values: Vec<(&'static str, f64)> =
            terms.iter().map(|&(n, v)| (n, tape.value(v).item().as_f64())).collect();
        if !total_value.is_finite() {
            return Err(Error::NonFinite {
                iteration: self.iteration,
                detail: format!("discriminator loss {total_value}; terms {values:?}; lr {lr}"),
            });
        }
        tape.backward(total)?;
        let mut grads = collect_grads(&tape, &dg);
        if let (Some(vars), Some(sd)) = (semantic_grads, &self.semantic_disc) {
            for ((_, p), v) in sd.params().iter().zip(vars) {
                grads.push(tape.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(p.shape().to_vec())));
            }
        }
        drop(tape);
        let mut params = self.global_disc.params_mut();
        if let Some(sd) = &mut self.semantic_disc {
            params.extend(sd.params_mut());
        }
        self.disc_opt.step(&mut params, &grads, lr)?;

        if let Some(h) = before {
            self.audit.discriminator_steps += 1;
            self.audit.max_discriminator_terms = self.audit.max_discriminator_terms.max(values.len());
            if self.generator_hash() != h {
                self.audit.generator_changed_in_discriminator_step += 1;
            }
        }
        Ok(StepLosses { terms: to_f64_terms(values), total: total_value })
    }

    /// Per-pixel argmax of the segmentation network at input resolution.
    pub fn predict(&self, image: &Image) -> Result<LabelMap> {
        predict(&self.generator, &self.head, image)
    }

    /// Confusion matrix of the segmentation network over labeled samples.
    pub fn evaluate(&self, samples: &[Sample]) -> Result<ConfusionMatrix> {
        evaluate(&self.generator, &self.head, self.classes(), samples)
    }

    /// Serializes weights, optimizer state and progress.
    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new(self.model_config.fingerprint());
        ck.meta = serde_json::json!({
            "iteration": self.iteration,
            "best_miou": self.best_miou,
            "train_config": self.config,
            "model_config": self.model_config,
        });
        ck.insert_module(&self.generator);
        ck.insert_module(&self.head);
        ck.insert_module(&self.global_disc);
        if let Some(d) = &self.semantic_disc {
            ck.insert_module(d);
        }
        self.gen_opt.save(&mut ck, "optim.generator");
        self.disc_opt.save(&mut ck, "optim.discriminator");
        ck
    }

    /// Restores a state written by [`TrainState::to_checkpoint`]. The stored
    /// training config must equal `config` once resolved.
    pub fn from_checkpoint(ck: &Checkpoint, config: &TrainConfig, model_config: &ModelConfig) -> Result<Self> {
        ck.check_fingerprint(&model_config.fingerprint())?;
        let mut state = Self::new(config, model_config)?;
        let stored: TrainConfig = serde_json::from_value(ck.meta["train_config"].clone())
            .map_err(|e| Error::Checkpoint(format!("checkpoint lacks a training config: {e}")))?;
        if stored != state.config {
            return Err(Error::Checkpoint("checkpoint was written with a different training config".into()));
        }
        state.iteration = ck.meta["iteration"]
            .as_u64()
            .ok_or_else(|| Error::Checkpoint("checkpoint lacks an iteration count".into()))?
            as usize;
        state.best_miou = ck.meta["best_miou"].as_f64();
        ck.load_module(&mut state.generator)?;
        ck.load_module(&mut state.head)?;
        ck.load_module(&mut state.global_disc)?;
        if let Some(d) = &mut state.semantic_disc {
            ck.load_module(d)?;
        }
        let gen_params = state.generator.params().len() + state.head.params().len();
        let disc_params =
            state.global_disc.params().len() + state.semantic_disc.as_ref().map_or(0, |d| d.params().len());
        state.gen_opt.load(ck, "optim.generator", gen_params)?;
        state.disc_opt.load(ck, "optim.discriminator", disc_params)?;
        Ok(state)
    }

    /// Runs the remaining iterations.
    ///
    /// With `out_dir` set, metrics records are appended to
    /// [`METRICS_FILE`] and checkpoints written after every evaluation.
    pub fn run(&mut self, data: &DatasetBundle, out_dir: Option<&Path>) -> Result<TrainReport> {
        self.run_until(data, out_dir, self.config.max_iterations)
    }

    /// Like [`TrainState::run`], but stops once `stop` iterations are done.
    /// The learning-rate schedule still spans the full configured length.
    pub fn run_until(&mut self, data: &DatasetBundle, out_dir: Option<&Path>, stop: usize) -> Result<TrainReport> {
        let cfg = self.config.clone();
        cfg.check_budget(data.target_labeled.len())?;
        if data.classes != self.classes() {
            return Err(Error::Config(format!(
                "dataset has {} classes, model {}",
                data.classes,
                self.classes()
            )));
        }
        let (h, w) = data.resolution;
        if h % self.model_config.stride != 0 || w % self.model_config.stride != 0 {
            return Err(Error::Config(format!(
                "resolution {h}x{w} is not divisible by stride {}",
                self.model_config.stride
            )));
        }
        if cfg.mode.uses_source() && data.source_train.is_empty() {
            return Err(Error::Config("no source training images".into()));
        }
        let target_images: Vec<&Image> = if data.target_unlabeled.is_empty() {
            data.target_labeled.iter().map(|s| &s.image).collect()
        } else {
            data.target_unlabeled.iter().map(|s| &s.image).collect()
        };
        if cfg.mode.adversarial() && target_images.is_empty() {
            return Err(Error::Config("adversarial modes need target images".into()));
        }
        let labeled: Vec<Labeled<'_>> = data
            .target_labeled
            .iter()
            .map(|s| s.label().map(|l| (&s.image, l)).ok_or_else(|| Error::Dataset("labeled sample without label".into())))
            .collect::<Result<_>>()?;
        let source: Vec<Labeled<'_>> = data
            .source_train
            .iter()
            .map(|s| s.label().map(|l| (&s.image, l)).ok_or_else(|| Error::Dataset("source sample without label".into())))
            .collect::<Result<_>>()?;

        if let Some(dir) = out_dir {
            fs::create_dir_all(dir)?;
        }
        let interval = cfg.eval_interval();
        let mut records = Vec::new();
        let mut sums: BTreeMap<String, f64> = BTreeMap::new();
        let mut steps_in_interval = 0usize;
        let mut last_miou = None;

        let stop = stop.min(cfg.max_iterations);
        while self.iteration < stop {
            let i = self.iteration;
            let (lr_g, lr_d) = self.learning_rates()?;
            let batch = GeneratorBatch {
                source: cfg.mode.uses_source().then(|| source[sample_index(cfg.seed, 0, source.len(), i)]),
                labeled_target: (!labeled.is_empty()).then(|| labeled[sample_index(cfg.seed, 1, labeled.len(), i)]),
                unlabeled_target: cfg
                    .mode
                    .adversarial()
                    .then(|| target_images[sample_index(cfg.seed, 2, target_images.len(), i)]),
            };
            let (gl, disc_batch) = self.generator_step(&batch, lr_g)?;
            let dl = self.discriminator_step(&disc_batch, lr_d)?;
            for (name, v) in gl.terms.iter().chain(&dl.terms) {
                *sums.entry(name.clone()).or_default() += v;
            }
            steps_in_interval += 1;
            self.iteration += 1;

            if self.iteration % interval == 0 || self.iteration == cfg.max_iterations {
                let report = if data.target_val.is_empty() {
                    None
                } else {
                    Some(self.evaluate(&data.target_val)?.miou_all()?)
                };
                let record = self.record(lr_g, lr_d, &sums, steps_in_interval, report.as_ref());
                sums.clear();
                steps_in_interval = 0;
                last_miou = record.val_miou;
                let improved = match (record.val_miou, self.best_miou) {
                    (Some(m), Some(b)) => m > b,
                    (Some(_), None) => true,
                    _ => false,
                };
                if improved {
                    self.best_miou = record.val_miou;
                }
                if let Some(dir) = out_dir {
                    append_record(&dir.join(METRICS_FILE), &record)?;
                    let ck = self.to_checkpoint();
                    ck.save(&dir.join(CHECKPOINT_LAST))?;
                    if improved {
                        ck.save(&dir.join(CHECKPOINT_BEST))?;
                    }
                    if self.iteration == cfg.max_iterations {
                        ck.save(&dir.join(CHECKPOINT_FINAL))?;
                    }
                }
                records.push(record);
            }
        }
        Ok(TrainReport { records, final_miou: last_miou, best_miou: self.best_miou, audit: self.audit.clone() })
    }

    fn record(
        &self,
        lr_g: f64,
        lr_d: f64,
        sums: &BTreeMap<String, f64>,
        steps: usize,
        report: Option<&IouReport>,
    ) -> MetricsRecord {
        MetricsRecord {
            iteration: self.iteration,
            lr_generator: lr_g,
            lr_discriminator: lr_d,
            losses: sums.iter().map(|(k, v)| (k.clone(), v / steps.max(1) as f64)).collect(),
            val_miou: report.map(|r| r.mean),
            per_class_iou: report.map(|r| r.per_class.clone()).unwrap_or_default(),
        }
    }
}

/// Index into a pool of `n` items at iteration `i`: the pool is walked in a
/// fresh seeded permutation every epoch, so the order is a pure function of
/// `(seed, stream, i)` and resuming needs no RNG state.
pub fn sample_index(seed: u64, stream: u64, n: usize, i: usize) -> usize {
    assert!(n > 0, "empty sample pool");
    let epoch = (i / n) as u64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((stream << 48) | epoch);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order[i % n]
}

fn append_record(path: &Path, record: &MetricsRecord) -> Result<()> {
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    let mut line = serde_json::to_vec(record)?;
    line.push(b'\n');
    f.write_all(&line)?;
    Ok(())
}

/// Reads every record of a metrics log.
pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    fs::read_to_string(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

/// Per-pixel argmax of `CH(G(image))` at input resolution.
pub fn predict<T: Real>(generator: &GeneratorG<T>, head: &HeadCh<T>, image: &Image) -> Result<LabelMap> {
    let mut tape = Tape::<T>::new();
    let g = bind(generator, &mut tape, false);
    let ch = bind(head, &mut tape, false);
    let x = tape.constant(image.to_tensor());
    let f = g.forward(&mut tape, x)?;
    let logits = ch.logits(&mut tape, f, image.height(), image.width())?;
    let scores = tape.value(logits);
    let c = scores.shape()[0];
    let l = image.height() * image.width();
    let d = scores.data();
    let labels = (0..l)
        .map(|loc| {
            let mut best = 0;
            for k in 1..c {
                if d[k * l + loc] > d[best * l + loc] {
                    best = k;
                }
            }
            best as u8
        })
        .collect();
    LabelMap::new(image.height(), image.width(), labels)
}

pub fn evaluate<T: Real>(
    generator: &GeneratorG<T>,
    head: &HeadCh<T>,
    classes: usize,
    samples: &[Sample],
) -> Result<ConfusionMatrix> {
    let mut cm = ConfusionMatrix::new(classes);
    for s in samples {
        let gt = s
            .label()
            .ok_or_else(|| Error::Dataset(format!("sample {:#x} has no visible label to evaluate", s.id)))?;
        cm.accumulate(&predict(generator, head, &s.image)?, gt)?;
    }
    Ok(cm)
}

/// Trains from scratch. See [`TrainState::run`].
pub fn train<T: Real>(
    config: &TrainConfig,
    model_config: &ModelConfig,
    data: &DatasetBundle,
    out_dir: Option<&Path>,
) -> Result<(TrainState<T>, TrainReport)> {
    config.check_budget(data.target_labeled.len())?;
    let mut state = TrainState::new(config, model_config)?;
    let report = state.run(data, out_dir)?;
    Ok((state, report))
}

/// Continues a run from its last checkpoint in `run_dir`.
pub fn resume<T: Real>(
    run_dir: &Path,
    config: &TrainConfig,
    model_config: &ModelConfig,
    data: &DatasetBundle,
) -> Result<(TrainState<T>, TrainReport)> {
    let ck = Checkpoint::load(&run_dir.join(CHECKPOINT_LAST))?;
    let mut state = TrainState::from_checkpoint(&ck, config, model_config)?;
    let log = run_dir.join(METRICS_FILE);
    let mut records = Vec::new();
    if log.exists() {
        let mut kept = String::new();
        for line in fs::read_to_string(&log)?.lines().filter(|l| !l.trim().is_empty()) {
            let r: MetricsRecord = serde_json::from_str(line)?;
            if r.iteration <= state.iteration {
                kept.push_str(line);
                kept.push('\n');
                records.push(r);
            }
        }
        fs::write(&log, kept)?;
    }
    let mut report = state.run(data, Some(run_dir))?;
    records.append(&mut report.records);
    report.final_miou = records.last().and_then(|r| r.val_miou);
    report.records = records;
    Ok((state, report))
}

/// Path of a named checkpoint inside a run directory.
pub fn checkpoint_path(run_dir: &Path, name: &str) -> PathBuf {
    run_dir.join(name)
}

#[cfg(test)]
mod tests;
