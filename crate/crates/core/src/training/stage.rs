use std::collections::BTreeSet;
use std::io::Write;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use super::checkpoint::{Checkpoint, CheckpointMeta};
use super::loss::{loss_stage1, loss_stage2, loss_stage3, LossBreakdown, LossTerms, Stage1Inputs, Stage3Weights};
use super::schedule::{LrSchedule, ScheduleKind};
use crate::data::{make_batch, Example};
use crate::error::{Error, Result};
use crate::features::SourceKind;
use crate::model::{
    length_regulate_batch, AccentModel, BatchTensors, ForwardCtx, GroupSet, ModelConfig, ParamGroup, ParamStore,
    Prosody,
};

/// The three training stages.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Stage {
    /// Text-to-speech training on native speech.
    Tts = 1,
    /// Speech encoder aligned to the frozen text encoder.
    Alignment = 2,
    /// Speech encoder fine-tuned on accented speech.
    FineTune = 3,
}

impl Stage {
    pub fn number(self) -> u8 {
        self as u8
    }
}

impl TryFrom<u8> for Stage {
    type Error = String;
    fn try_from(v: u8) -> std::result::Result<Self, String> {
        match v {
            1 => Ok(Stage::Tts),
            2 => Ok(Stage::Alignment),
            3 => Ok(Stage::FineTune),
            _ => Err(format!("stage must be 1, 2 or 3, got {v}")),
        }
    }
}

impl From<Stage> for u8 {
    fn from(s: Stage) -> u8 {
        s.number()
    }
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.number())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetSelector {
    Native,
    Accented,
    All,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub stage: Stage,
    pub trainable_groups: BTreeSet<ParamGroup>,
    pub max_steps: usize,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub schedule: ScheduleKind,
    pub warmup_steps: usize,
    pub constant_lr: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    /// Include the decoded-mel term in the fine-tuning loss.
    pub use_mel_star: bool,
    pub dataset: DatasetSelector,
    /// Input representation for the speech encoder (stages 2 and 3).
    pub feature_kind: SourceKind,
    pub validation_interval: usize,
    /// Training-loss log cadence in steps.
    pub log_interval: usize,
}

impl StageConfig {
    pub fn for_stage(stage: Stage) -> Self {
        let speech: BTreeSet<_> = [ParamGroup::SpeechEncoder].into_iter().collect();
        let base = Self {
            stage,
            trainable_groups: speech,
            max_steps: 100_000,
            batch_size: 16,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
            schedule: ScheduleKind::Warmup,
            warmup_steps: 4000,
            constant_lr: 1e-5,
            lambda1: 1.0,
            lambda2: 1.0,
            use_mel_star: true,
            dataset: DatasetSelector::Native,
            feature_kind: SourceKind::Mel,
            validation_interval: 1000,
            log_interval: 100,
        };
        match stage {
            Stage::Tts => Self {
                trainable_groups: ParamGroup::ALL
                    .into_iter()
                    .filter(|g| *g != ParamGroup::SpeechEncoder)
                    .collect(),
                ..base
            },
            Stage::Alignment => Self {
                max_steps: 200_000,
                ..base
            },
            Stage::FineTune => Self {
                max_steps: 20_000,
                schedule: ScheduleKind::Constant,
                dataset: DatasetSelector::Accented,
                ..base
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(format!("stage {}: {m}", self.stage)));
        let speech_only: BTreeSet<_> = [ParamGroup::SpeechEncoder].into_iter().collect();
        match self.stage {
            Stage::Tts if self.trainable_groups.contains(&ParamGroup::SpeechEncoder) => {
                return bad("stage 1 must not train the speech encoder".into())
            }
            Stage::Alignment | Stage::FineTune if self.trainable_groups != speech_only => {
                return bad("only the speech encoder may be trainable".into())
            }
            _ => {}
        }
        if self.trainable_groups.is_empty() {
            return bad("no trainable groups".into());
        }
        if self.stage == Stage::FineTune && !(self.lambda1 > 0.0 && self.lambda2 > 0.0) {
            return bad("lambda1 and lambda2 must be positive".into());
        }
        if self.batch_size == 0 || self.validation_interval == 0 || self.log_interval == 0 {
            return bad("batch_size, validation_interval and log_interval must be positive".into());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return bad("invalid Adam parameters".into());
        }
        if self.schedule == ScheduleKind::Warmup && self.warmup_steps == 0 {
            return bad("warmup_steps must be positive".into());
        }
        if self.schedule == ScheduleKind::Constant && !(self.constant_lr > 0.0) {
            return bad("constant_lr must be positive".into());
        }
        Ok(())
    }

    pub fn weights(&self) -> Stage3Weights {
        Stage3Weights {
            lambda1: self.lambda1,
            lambda2: self.lambda2,
            use_mel_star: self.use_mel_star,
        }
    }

    pub fn lr(&self, d_model: usize) -> LrSchedule {
        LrSchedule {
            kind: self.schedule,
            warmup_steps: self.warmup_steps,
            d_model,
            constant_lr: self.constant_lr,
        }
    }
}

/// Length-regulated text-encoder states used as the alignment target.
/// Computed in evaluation mode; never differentiated.
pub fn teacher_states(model: &AccentModel, batch: &BatchTensors) -> Result<candle_core::Tensor> {
    let encoded = model
        .text_encoder
        .forward(&batch.phone_ids, &batch.phone_mask, &mut ForwardCtx::eval())?;
    let (regulated, lengths) = length_regulate_batch(&encoded, &batch.durations, &batch.phone_lengths)?;
    if lengths != batch.frame_mask.lengths {
        return Err(Error::Shape(format!(
            "teacher lengths {lengths:?} differ from frame lengths {:?}",
            batch.frame_mask.lengths
        )));
    }
    Ok(regulated.detach())
}

/// The stage objective on one batch. `ctx` drives the trained branch; teacher
/// computations always run in evaluation mode.
pub fn stage_loss(model: &AccentModel, cfg: &StageConfig, batch: &BatchTensors, ctx: &mut ForwardCtx) -> Result<LossTerms> {
    let speaker = model.speakers.forward(&batch.speaker_ids)?;
    match cfg.stage {
        Stage::Tts => {
            let prosody = Prosody::Targets {
                pitch: &batch.pitch,
                energy: &batch.energy,
            };
            let out = model.text_branch(batch, &speaker, prosody, ctx)?;
            loss_stage1(&Stage1Inputs::from_branch(&out, batch))
        }
        Stage::Alignment => {
            let h_t = teacher_states(model, batch)?;
            let h_s = model
                .speech_encoder
                .forward(&batch.features, cfg.feature_kind, &batch.frame_mask, ctx)?;
            loss_stage2(&h_s, &h_t, &batch.frame_mask)
        }
        Stage::FineTune => {
            let teacher = model.text_branch(batch, &speaker, Prosody::Predicted, &mut ForwardCtx::eval())?;
            let student = model.speech_branch(
                &batch.features,
                cfg.feature_kind,
                &batch.frame_mask,
                &speaker,
                Prosody::Predicted,
                ctx,
            )?;
            loss_stage3(
                &student.hidden,
                &teacher.regulated.detach(),
                &student.mel.frames,
                &teacher.mel.frames.detach(),
                cfg.weights(),
                &batch.frame_mask,
            )
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LogKind {
    Train,
    Val,
}

/// One line of the JSON-lines training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub step: usize,
    pub stage: Stage,
    pub kind: LogKind,
    pub lr: f64,
    pub loss: LossBreakdown,
}

pub struct StageData<'a> {
    pub train: &'a [Example],
    pub val: &'a [Example],
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Where `last.ckpt`, `best.ckpt`, `log.jsonl` and `stage_config.json` go.
    pub out_dir: Option<PathBuf>,
    pub seed: u64,
    /// Lets stage 3 start from a stage-1 checkpoint.
    pub allow_skip_stage2: bool,
    /// Speaker names by table row; taken from the input checkpoint when empty.
    pub speakers: Vec<String>,
}

pub struct StageOutcome {
    pub last: Checkpoint,
    /// Parameters with the lowest validation total (the last ones when no validation data).
    pub best: Checkpoint,
    pub log: Vec<LogEntry>,
}

impl StageOutcome {
    pub fn val_log(&self) -> impl Iterator<Item = &LogEntry> {
        self.log.iter().filter(|e| e.kind == LogKind::Val)
    }

    pub fn train_log(&self) -> impl Iterator<Item = &LogEntry> {
        self.log.iter().filter(|e| e.kind == LogKind::Train)
    }
}

fn check_prerequisite(cfg: &StageConfig, init: Option<&Checkpoint>, allow_skip_stage2: bool) -> Result<()> {
    let missing = |requirement: &str| {
        Err(Error::MissingPrerequisite {
            stage: cfg.stage.number(),
            requirement: requirement.into(),
        })
    };
    let from = init.map(|c| c.meta.stage);
    match (cfg.stage, from) {
        (Stage::Tts, None | Some(Stage::Tts)) => Ok(()),
        (Stage::Tts, Some(s)) => missing(&format!("a fresh start or a stage-1 checkpoint, got stage {s}")),
        (Stage::Alignment, Some(Stage::Tts | Stage::Alignment)) => Ok(()),
        (Stage::Alignment, _) => missing("a stage-1 checkpoint"),
        (Stage::FineTune, Some(Stage::Alignment | Stage::FineTune)) => Ok(()),
        (Stage::FineTune, Some(Stage::Tts)) if allow_skip_stage2 => Ok(()),
        (Stage::FineTune, Some(Stage::Tts)) => {
            missing("a stage-2 checkpoint (pass --allow-skip-stage2 to fine-tune a stage-1 checkpoint)")
        }
        (Stage::FineTune, None) => missing("a stage-2 checkpoint"),
    }
}

/// Cycles through shuffled example indices, reshuffling every epoch.
struct Sampler {
    order: Vec<usize>,
    pos: usize,
    rng: rand_chacha::ChaCha8Rng,
}

impl Sampler {
    fn new(n: usize, seed: u64) -> Self {
        let mut s = Self {
            order: (0..n).collect(),
            pos: n,
            rng: rand_chacha::ChaCha8Rng::seed_from_u64(seed),
        };
        s.reshuffle_if_needed();
        s
    }

    fn reshuffle_if_needed(&mut self) {
        if self.pos >= self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
        }
    }

    fn next(&mut self, k: usize) -> Vec<usize> {
        let k = k.min(self.order.len());
        let mut out = Vec::with_capacity(k);
        while out.len() < k {
            self.reshuffle_if_needed();
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

fn to_tensors(examples: &[&Example], dtype: DType, device: &Device) -> Result<BatchTensors> {
    BatchTensors::new(&make_batch(examples, 0.0)?, dtype, device)
}

/// Mean stage loss over `examples` in evaluation mode, weighted by batch size.
pub fn evaluate_loss(model: &AccentModel, cfg: &StageConfig, examples: &[Example]) -> Result<LossBreakdown> {
    let mut parts = Vec::new();
    for chunk in examples.chunks(cfg.batch_size.max(1)) {
        let refs: Vec<&Example> = chunk.iter().collect();
        let bt = to_tensors(&refs, model.dtype(), model.device())?;
        let terms = stage_loss(model, cfg, &bt, &mut ForwardCtx::eval())?;
        parts.push((terms.breakdown()?, chunk.len() as f64));
    }
    Ok(LossBreakdown::weighted_mean(&parts))
}

fn step_seed(seed: u64, stage: Stage, step: usize) -> u64 {
    seed ^ (stage.number() as u64).rotate_left(56) ^ (step as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Runs one training stage and returns its checkpoints and log.
///
/// Parameters come from `init` when given, otherwise from a fresh seeded
/// initialization of `model_cfg`. Only `cfg.trainable_groups` are handed to
/// the optimizer; all other groups are read through detached views.
pub fn run_stage(
    cfg: &StageConfig,
    model_cfg: &ModelConfig,
    data: StageData,
    init: Option<&Checkpoint>,
    opts: &RunOptions,
) -> Result<StageOutcome> {
    cfg.validate()?;
    check_prerequisite(cfg, init, opts.allow_skip_stage2)?;
    if data.train.is_empty() {
        return Err(Error::InvalidConfig(format!("stage {}: no training examples", cfg.stage)));
    }
    let device = Device::Cpu;
    let dtype = DType::F32;
    let (model_cfg, store, mut lineage, feature_kind, speakers) = match init {
        Some(c) => {
            if cfg.stage != Stage::Tts {
                if let Some(kind) = c.meta.feature_kind {
                    if kind != cfg.feature_kind {
                        return Err(Error::InvalidConfig(format!(
                            "checkpoint speech encoder was trained on {kind} features, stage {} asks for {}",
                            cfg.stage, cfg.feature_kind
                        )));
                    }
                }
            }
            let store = c.params.duplicate()?;
            let speakers = if opts.speakers.is_empty() {
                c.meta.speakers.clone()
            } else {
                opts.speakers.clone()
            };
            (c.model.clone(), store, c.meta.lineage.clone(), c.meta.feature_kind, speakers)
        }
        None => {
            let (_, store) = AccentModel::init(model_cfg, opts.seed, dtype, &device)?;
            (model_cfg.clone(), store, Vec::new(), None, opts.speakers.clone())
        }
    };
    if lineage.last() != Some(&cfg.stage) {
        lineage.push(cfg.stage);
    }
    let feature_kind = if cfg.stage == Stage::Tts {
        feature_kind
    } else {
        Some(cfg.feature_kind)
    };

    let trainable: GroupSet = cfg.trainable_groups.clone();
    let model = AccentModel::view(&model_cfg, &store, &trainable)?;
    let mut opt = AdamW::new(
        store.vars_in(&trainable),
        ParamsAdamW {
            lr: 0.0,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            weight_decay: 0.0,
        },
    )?;
    let schedule = cfg.lr(model_cfg.hidden_dim);

    let meta_at = |step: usize, val_total: Option<f64>| CheckpointMeta {
        stage: cfg.stage,
        step,
        lineage: lineage.clone(),
        feature_kind,
        speakers: speakers.clone(),
        val_total,
    };
    let mut sink = LogSink::open(opts.out_dir.as_deref(), cfg)?;
    let mut best: Option<(f64, usize, ParamStore)> = None;
    let mut validate = |step: usize, lr: f64, sink: &mut LogSink| -> Result<()> {
        if data.val.is_empty() {
            return Ok(());
        }
        let loss = evaluate_loss(&model, cfg, data.val)?;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                step,
                report: format!("validation {loss:?}"),
            });
        }
        log::info!("stage {} step {step}: validation total {:.6}", cfg.stage, loss.total);
        if best.as_ref().map_or(true, |(b, _, _)| loss.total < *b) {
            best = Some((loss.total, step, store.duplicate()?));
        }
        sink.push(LogEntry {
            step,
            stage: cfg.stage,
            kind: LogKind::Val,
            lr,
            loss,
        })
    };

    validate(0, 0.0, &mut sink)?;
    let mut sampler = Sampler::new(data.train.len(), step_seed(opts.seed, cfg.stage, usize::MAX));
    for step in 1..=cfg.max_steps {
        let lr = schedule.at(step)?;
        opt.set_learning_rate(lr);
        let picked: Vec<&Example> = sampler.next(cfg.batch_size).into_iter().map(|i| &data.train[i]).collect();
        let bt = to_tensors(&picked, dtype, &device)?;
        let mut ctx = ForwardCtx::train(step_seed(opts.seed, cfg.stage, step));
        let terms = stage_loss(&model, cfg, &bt, &mut ctx)?;
        let loss = terms.breakdown()?;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                step,
                report: format!("{loss:?}"),
            });
        }
        opt.backward_step(&terms.total)?;
        if step % cfg.log_interval == 0 || step == cfg.max_steps {
            sink.push(LogEntry {
                step,
                stage: cfg.stage,
                kind: LogKind::Train,
                lr,
                loss,
            })?;
        }
        if step % cfg.validation_interval == 0 || step == cfg.max_steps {
            validate(step, lr, &mut sink)?;
        }
    }
    drop(validate);
    let log = sink.entries;

    let last_val = log.iter().rev().find(|e| e.kind == LogKind::Val).map(|e| e.loss.total);
    let last = Checkpoint {
        model: model_cfg.clone(),
        meta: meta_at(cfg.max_steps, last_val),
        params: store,
    };
    let best = match best {
        Some((total, step, params)) => Checkpoint {
            model: model_cfg.clone(),
            meta: meta_at(step, Some(total)),
            params,
        },
        None => last.clone(),
    };
    if let Some(dir) = &opts.out_dir {
        last.save(&dir.join("last.ckpt"))?;
        best.save(&dir.join("best.ckpt"))?;
    }
    Ok(StageOutcome { last, best, log })
}

struct LogSink {
    file: Option<std::io::BufWriter<std::fs::File>>,
    entries: Vec<LogEntry>,
}

impl LogSink {
    fn open(dir: Option<&Path>, cfg: &StageConfig) -> Result<Self> {
        let file = match dir {
            Some(dir) => {
                std::fs::create_dir_all(dir)?;
                std::fs::write(dir.join("stage_config.json"), serde_json::to_vec_pretty(cfg)?)?;
                Some(std::io::BufWriter::new(std::fs::File::create(dir.join("log.jsonl"))?))
            }
            None => None,
        };
        Ok(Self {
            file,
            entries: Vec::new(),
        })
    }

    fn push(&mut self, entry: LogEntry) -> Result<()> {
        if let Some(f) = self.file.as_mut() {
            serde_json::to_writer(&mut *f, &entry)?;
            f.write_all(b"\n")?;
            f.flush()?;
        }
        self.entries.push(entry);
        Ok(())
    }
}

/// Reads a JSON-lines training log.
pub fn read_log(path: &Path) -> Result<Vec<LogEntry>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}
