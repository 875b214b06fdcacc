//! Curriculum training loop.
//!
//! A run is a list of stages of non-decreasing difficulty. Each stage trains
//! on its own scene family for a fixed number of epochs with its own
//! optimizer, starting from the previous stage's weights according to its
//! init policy. Every epoch ends with an evaluation on held-out scenes, a
//! metrics line and a `latest` checkpoint; every stage ends with a named
//! checkpoint. Resuming from any of these reproduces the uninterrupted run
//! bit for bit.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{NormMode, Tape};
use crate::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, Progress};
use crate::data::{generate_scenes, load_dataset, split_dir, LabeledScene, Placement, SceneSpec, TrainSample};
use crate::error::{Error, Result};
use crate::eval::{encode_targets, evaluate, stack_images, EvalReport};
use crate::model::{ModelConfig, StnOcr};
use crate::optim::{OptimizerConfig, OptimizerState};

/// First scene index of held-out evaluation sets.
pub const EVAL_OFFSET: u64 = 1 << 40;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitPolicy {
    Fresh,
    CarryAll,
    CarryLocalizationReinitRecognition,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StageConfig {
    pub name: String,
    pub scene: SceneSpec,
    pub optimizer: OptimizerConfig,
    pub epochs: usize,
    pub init: InitPolicy,
    /// Training samples per epoch.
    pub train_size: usize,
    /// Held-out samples evaluated after every epoch.
    pub eval_size: usize,
    /// Draw fresh synthetic scenes every epoch instead of repeating one set.
    pub resample: bool,
    /// Dataset directory with `train` and `val` splits; replaces synthesis.
    pub data: Option<PathBuf>,
}

impl Default for StageConfig {
    fn default() -> Self {
        Self {
            name: "stage".into(),
            scene: SceneSpec::default(),
            optimizer: OptimizerConfig::default(),
            epochs: 1,
            init: InitPolicy::Fresh,
            train_size: 1024,
            eval_size: 200,
            resample: true,
            data: None,
        }
    }
}

impl StageConfig {
    fn difficulty(&self) -> (usize, u8) {
        let rank = match self.scene.placement {
            Placement::Centered => 0,
            Placement::Grid => 1,
            Placement::Random => 2,
        };
        (self.scene.n_regions, rank)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub seed: u64,
    pub batch_size: usize,
    pub model: ModelConfig,
    pub stages: Vec<StageConfig>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { seed: 0, batch_size: 32, model: ModelConfig::default(), stages: vec![StageConfig::default()] }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let first = self.stages.first().ok_or_else(|| Error::Config("at least one stage is required".into()))?;
        if first.init != InitPolicy::Fresh {
            return Err(Error::Config(format!("stage `{}` is first and must use init = \"fresh\"", first.name)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        for (i, s) in self.stages.iter().enumerate() {
            s.optimizer.validate()?;
            s.scene.validate()?;
            if s.epochs == 0 || s.train_size == 0 || s.eval_size == 0 {
                return Err(Error::Config(format!("stage `{}` needs positive epochs, train_size and eval_size", s.name)));
            }
            if s.data.is_none() && s.scene.canvas != self.model.input_size {
                return Err(Error::Config(format!(
                    "stage `{}` canvas {:?} differs from model input {:?}",
                    s.name, s.scene.canvas, self.model.input_size
                )));
            }
            self.stage_model_config(i).validate()?;
            if i > 0 && s.difficulty() < self.stages[i - 1].difficulty() {
                return Err(Error::Config(format!("stage `{}` is easier than the stage before it", s.name)));
            }
        }
        Ok(())
    }

    /// Model configuration used during stage `i`.
    pub fn stage_model_config(&self, i: usize) -> ModelConfig {
        ModelConfig { n_regions: self.stages[i].scene.n_regions, ..self.model.clone() }
    }
}

/// One metrics line, written after every epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub stage: usize,
    pub stage_name: String,
    pub epoch: usize,
    /// Mean training loss over the epoch.
    pub loss: f64,
    pub eval_loss: f64,
    pub seq_acc: f64,
    pub char_acc: f64,
    pub mean_iou: Option<f64>,
    pub lr: f64,
    pub step: u64,
    /// Zero in deterministic mode.
    pub wall_ms: u64,
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// Output directory for `metrics.jsonl` and `checkpoints/`; nothing is
    /// written when absent.
    pub out_dir: Option<PathBuf>,
    pub resume: Option<PathBuf>,
    pub deterministic: bool,
    /// Stop after this many epochs of this invocation.
    pub stop_after: Option<usize>,
}

#[derive(Clone, Debug)]
pub struct StageReport {
    pub name: String,
    pub epochs: Vec<EpochMetrics>,
    /// Evaluation of the final weights of the stage.
    pub final_eval: Option<EvalReport>,
}

#[derive(Clone, Debug)]
pub struct CurriculumResult {
    pub checkpoint: Checkpoint,
    pub stages: Vec<StageReport>,
    /// Every stage ran to completion.
    pub complete: bool,
}

/// Independent sub-seed for `(seed, tag)`.
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(tag);
    rng.next_u64()
}

fn stage_tag(stage: usize, salt: u64) -> u64 {
    ((stage as u64) << 32) | salt
}

const TAG_INIT: u64 = 1;
const TAG_REINIT: u64 = 2;
const TAG_DATA: u64 = 3;
const TAG_SHUFFLE: u64 = 1 << 16;

/// Held-out scenes of a stage: the dataset's `val` split, or synthetic
/// scenes from an index range training never reaches.
pub fn eval_scenes(cfg: &TrainConfig, stage: usize, count: usize) -> Result<Vec<LabeledScene>> {
    let s = &cfg.stages[stage];
    match &s.data {
        Some(dir) => {
            let mut v = load_dataset(&split_dir(dir, "val"), None, Some(cfg.model.input_size))?;
            v.truncate(count);
            Ok(v)
        }
        None => generate_scenes(&stage_spec(cfg, stage), EVAL_OFFSET, count),
    }
}

fn stage_spec(cfg: &TrainConfig, stage: usize) -> SceneSpec {
    let s = &cfg.stages[stage].scene;
    SceneSpec { seed: derive_seed(cfg.seed ^ s.seed, stage_tag(stage, TAG_DATA)), ..s.clone() }
}

enum Source {
    Synthetic(SceneSpec),
    Loaded(Vec<TrainSample>),
}

impl Source {
    fn open(cfg: &TrainConfig, stage: usize) -> Result<Self> {
        Ok(match &cfg.stages[stage].data {
            Some(dir) => {
                let scenes = load_dataset(&split_dir(dir, "train"), None, Some(cfg.model.input_size))?;
                Source::Loaded(scenes.iter().map(LabeledScene::training_sample).collect())
            }
            None => Source::Synthetic(stage_spec(cfg, stage)),
        })
    }

    /// Training samples of `epoch` in presentation order.
    fn epoch(&self, cfg: &TrainConfig, stage: usize, epoch: usize) -> Result<Vec<TrainSample>> {
        let s = &cfg.stages[stage];
        let mut samples = match self {
            Source::Synthetic(spec) => {
                let start = if s.resample { (epoch * s.train_size) as u64 } else { 0 };
                generate_scenes(spec, start, s.train_size)?.iter().map(LabeledScene::training_sample).collect()
            }
            Source::Loaded(all) => all.clone(),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, stage_tag(stage, TAG_SHUFFLE + epoch as u64)));
        samples.shuffle(&mut rng);
        Ok(samples)
    }
}

/// One optimizer step on a batch; returns the batch loss.
pub fn train_step(model: &mut StnOcr<f32>, opt: &mut OptimizerState<f32>, batch: &[&TrainSample]) -> Result<f64> {
    let targets = encode_targets(model, batch)?;
    let images = stack_images(&batch.iter().map(|s| &s.image).collect::<Vec<_>>())?;
    let mut tape = Tape::new();
    let bound = model.params.bind(&mut tape, true);
    let x = tape.constant(images);
    let mut stats = std::mem::take(&mut model.stats);
    let fwd = model.forward_with(&mut tape, &bound, &mut stats, x, NormMode::Train);
    model.stats = stats;
    let fwd = fwd?;
    let loss = model.loss(&mut tape, &fwd, &targets)?;
    let value = tape.value(loss).item() as f64;
    if !value.is_finite() {
        return Err(Error::NonFiniteGradient("loss".into()));
    }
    let grads = tape.backward(loss)?;
    let mut g = bound.gradients(&tape, &grads);
    opt.apply(&mut model.params, &mut g)?;
    Ok(value)
}

struct Outputs {
    dir: Option<PathBuf>,
}

impl Outputs {
    fn checkpoint(&self, name: &str) -> Option<PathBuf> {
        self.dir.as_ref().map(|d| d.join("checkpoints").join(name))
    }

    fn save(&self, name: &str, ck: &Checkpoint) -> Result<()> {
        match self.checkpoint(name) {
            Some(p) => save_checkpoint(ck, &p),
            None => Ok(()),
        }
    }

    fn metrics(&self, m: &EpochMetrics) -> Result<()> {
        let Some(dir) = &self.dir else { return Ok(()) };
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("metrics.jsonl");
        let mut f = OpenOptions::new().create(true).append(true).open(&path).map_err(|e| Error::io(&path, e))?;
        let line = serde_json::to_string(m).expect("metrics serialize");
        writeln!(f, "{line}").map_err(|e| Error::io(&path, e))
    }
}

/// File name of the checkpoint written at the end of stage `i`.
pub fn stage_checkpoint_name(i: usize, name: &str) -> String {
    format!("stage-{i:02}-{name}.stnocr")
}

pub const LATEST: &str = "latest.stnocr";

/// Stage-start model: the init policy applied to the previous weights.
fn stage_start(cfg: &TrainConfig, stage: usize, prev: Option<StnOcr<f32>>) -> Result<StnOcr<f32>> {
    let mc = cfg.stage_model_config(stage);
    let init = cfg.stages[stage].init;
    match (init, prev) {
        (InitPolicy::Fresh, _) | (_, None) => StnOcr::new(mc, derive_seed(cfg.seed, stage_tag(stage, TAG_INIT))),
        (InitPolicy::CarryAll, Some(mut m)) => {
            m.config = mc;
            Ok(m)
        }
        (InitPolicy::CarryLocalizationReinitRecognition, Some(mut m)) => {
            m.config = mc;
            m.reinit_recognition(derive_seed(cfg.seed, stage_tag(stage, TAG_REINIT)))?;
            Ok(m)
        }
    }
}

struct Resumed {
    stage: usize,
    epoch: usize,
    step: u64,
    retried: bool,
    model: StnOcr<f32>,
    optimizer: OptimizerState<f32>,
}

fn resume_state(cfg: &TrainConfig, path: &Path) -> Result<Option<Resumed>> {
    let ck = load_checkpoint(path)?;
    let p = ck.progress.ok_or_else(|| Error::Config(format!("{} holds no training progress", path.display())))?;
    if p.stage >= cfg.stages.len() {
        return Err(Error::Config(format!("checkpoint stage {} is beyond the configured curriculum", p.stage)));
    }
    if ck.model.config != cfg.stage_model_config(p.stage) {
        return Err(Error::Config("checkpoint model configuration differs from the training configuration".into()));
    }
    let optimizer = ck.optimizer.ok_or_else(|| Error::Config("checkpoint holds no optimizer state".into()))?;
    Ok(Some(Resumed { stage: p.stage, epoch: p.epoch, step: p.global_step, retried: p.retried, model: ck.model, optimizer }))
}

/// Runs the curriculum. `observer` sees every metrics line as it is produced.
pub fn run_curriculum(
    cfg: &TrainConfig,
    opts: &TrainOptions,
    observer: &mut dyn FnMut(&EpochMetrics),
) -> Result<CurriculumResult> {
    cfg.validate()?;
    let out = Outputs { dir: opts.out_dir.clone() };
    let mut resumed = match &opts.resume {
        Some(p) => resume_state(cfg, p)?,
        None => None,
    };
    let first_stage = resumed.as_ref().map_or(0, |r| r.stage);
    let mut step = resumed.as_ref().map_or(0, |r| r.step);
    let mut budget = opts.stop_after.unwrap_or(usize::MAX);
    let mut reports = Vec::new();
    let mut prev: Option<StnOcr<f32>> = None;
    let mut last: Option<Checkpoint> = None;

    for (si, stage) in cfg.stages.iter().enumerate().skip(first_stage) {
        let source = Source::open(cfg, si)?;
        let eval_set = eval_scenes(cfg, si, stage.eval_size)?;
        let (mut model, mut opt, mut epoch, mut retried) = match resumed.take() {
            Some(r) => (r.model, r.optimizer, r.epoch, r.retried),
            None => {
                let m = stage_start(cfg, si, prev.take())?;
                let o = OptimizerState::new(stage.optimizer, &m.params)?;
                (m, o, 0, false)
            }
        };
        let mut snapshot = (model.clone(), opt.clone(), epoch, step);
        let mut report = StageReport { name: stage.name.clone(), epochs: Vec::new(), final_eval: None };

        while epoch < stage.epochs {
            if budget == 0 {
                reports.push(report);
                let progress = Progress { stage: si, epoch, global_step: step, retried };
                let ck = Checkpoint { model, optimizer: Some(opt), progress: Some(progress) };
                return Ok(CurriculumResult { checkpoint: ck, stages: reports, complete: false });
            }
            let started = Instant::now();
            let samples = source.epoch(cfg, si, epoch)?;
            let mut loss_sum = 0.0;
            let mut failed = None;
            for batch in samples.chunks(cfg.batch_size) {
                let refs: Vec<&TrainSample> = batch.iter().collect();
                match train_step(&mut model, &mut opt, &refs) {
                    Ok(l) => {
                        loss_sum += l * batch.len() as f64;
                        step += 1;
                    }
                    Err(Error::NonFiniteGradient(_)) => {
                        failed = Some(epoch);
                        break;
                    }
                    Err(e) => return Err(e),
                }
            }
            if let Some(at) = failed {
                if retried {
                    return Err(Error::Diverged { stage: si, name: stage.name.clone(), epoch: at });
                }
                retried = true;
                let (m, o, e, s) = snapshot.clone();
                model = m;
                epoch = e;
                step = s;
                let lowered = OptimizerConfig { lr: o.config.lr / 10.0, ..o.config };
                opt = OptimizerState { config: lowered, ..o };
                snapshot.1 = opt.clone();
                report.epochs.clear();
                continue;
            }
            epoch += 1;
            budget -= 1;
            let ev = evaluate(&model, &eval_set, cfg.batch_size)?;
            let metrics = EpochMetrics {
                stage: si,
                stage_name: stage.name.clone(),
                epoch,
                loss: loss_sum / samples.len() as f64,
                eval_loss: ev.loss,
                seq_acc: ev.seq_acc,
                char_acc: ev.char_acc,
                mean_iou: ev.mean_iou,
                lr: opt.config.lr,
                step,
                wall_ms: if opts.deterministic { 0 } else { started.elapsed().as_millis() as u64 },
            };
            out.metrics(&metrics)?;
            observer(&metrics);
            report.epochs.push(metrics);
            let progress = Progress { stage: si, epoch, global_step: step, retried };
            let ck = Checkpoint { model: model.clone(), optimizer: Some(opt.clone()), progress: Some(progress) };
            out.save(LATEST, &ck)?;
            if epoch == stage.epochs {
                out.save(&stage_checkpoint_name(si, &stage.name), &ck)?;
                report.final_eval = Some(ev);
                last = Some(ck);
            }
        }
        if report.final_eval.is_none() {
            // resumed exactly at a stage boundary
            report.final_eval = Some(evaluate(&model, &eval_set, cfg.batch_size)?);
            let progress = Progress { stage: si, epoch, global_step: step, retried };
            last = Some(Checkpoint { model: model.clone(), optimizer: Some(opt), progress: Some(progress) });
        }
        reports.push(report);
        prev = Some(model);
    }
    let checkpoint = last.expect("at least one stage ran");
    Ok(CurriculumResult { checkpoint, stages: reports, complete: true })
}
