//! Stage orchestration over a preprocessed corpus: splits, the 1 -> 2 -> 3
//! chain (or 1 -> 3), and the final evaluation.

use std::path::{Path, PathBuf};

use crate::config::{FinetuneMode, RunConfig};
use crate::data::{split_manifest, write_manifest, AccentTag, Split, UtteranceRecord};
use crate::error::{Error, Result};
use crate::eval::{aggregate, evaluate_corpus, EvalReport, EvalSettings};
use crate::features::SourceKind;
use crate::preprocess::{load_eval_items, load_examples};
use crate::training::{run_stage, Checkpoint, DatasetSelector, LogEntry, RunOptions, Stage, StageData, StageOutcome};

/// Text-disjoint splits of both corpora, seeded by the run seed.
#[derive(Debug, Clone)]
pub struct Splits {
    pub native: Split,
    pub accented: Split,
}

impl Splits {
    pub fn new(cfg: &RunConfig, records: &[UtteranceRecord]) -> Result<Self> {
        let of = |tag: AccentTag| -> Vec<UtteranceRecord> {
            records.iter().filter(|r| r.accent_tag == tag).cloned().collect()
        };
        let split = |recs: Vec<UtteranceRecord>, sizes| {
            if recs.is_empty() {
                Ok(Split::default())
            } else {
                split_manifest(&recs, sizes, cfg.seed)
            }
        };
        Ok(Self {
            native: split(of(AccentTag::Native), cfg.data.native_split)?,
            accented: split(of(AccentTag::Accented), cfg.data.accented_split)?,
        })
    }

    pub fn select(&self, which: DatasetSelector) -> Split {
        match which {
            DatasetSelector::Native => self.native.clone(),
            DatasetSelector::Accented => self.accented.clone(),
            DatasetSelector::All => Split {
                train: [self.native.train.clone(), self.accented.train.clone()].concat(),
                val: [self.native.val.clone(), self.accented.val.clone()].concat(),
                test: [self.native.test.clone(), self.accented.test.clone()].concat(),
            },
        }
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        for (name, split) in [("native", &self.native), ("accented", &self.accented)] {
            write_manifest(&dir.join(format!("{name}_train.jsonl")), &split.train)?;
            write_manifest(&dir.join(format!("{name}_val.jsonl")), &split.val)?;
            write_manifest(&dir.join(format!("{name}_test.jsonl")), &split.test)?;
        }
        Ok(())
    }
}

fn only_speaker(split: &Split, speaker: &str) -> Split {
    let keep = |v: &[UtteranceRecord]| v.iter().filter(|r| r.speaker == speaker).cloned().collect();
    Split {
        train: keep(&split.train),
        val: keep(&split.val),
        test: keep(&split.test),
    }
}

/// Trains one stage on its configured dataset. A fresh stage 1 sizes the
/// speaker table from `speakers`.
pub fn train_stage(
    cfg: &RunConfig,
    stage: Stage,
    split: &Split,
    speakers: &[String],
    init: Option<&Checkpoint>,
    out_dir: &Path,
    allow_skip_stage2: bool,
) -> Result<StageOutcome> {
    let scfg = cfg.stage(stage);
    let kind = if stage == Stage::Tts { SourceKind::Mel } else { scfg.feature_kind };
    let train = load_examples(&split.train, kind)?;
    let val = load_examples(&split.val, kind)?;
    let mut model = cfg.model.clone();
    model.n_speakers = speakers.len().max(1);
    log::info!(
        "stage {stage}: {} training / {} validation utterances, {kind} input",
        train.len(),
        val.len()
    );
    run_stage(
        scfg,
        &model,
        StageData {
            train: &train,
            val: &val,
        },
        init,
        &RunOptions {
            out_dir: Some(out_dir.to_path_buf()),
            seed: cfg.seed,
            allow_skip_stage2,
            speakers: speakers.to_vec(),
        },
    )
}

/// Runs the evaluation harness for `ckpt` over test records.
pub fn evaluate_records(cfg: &RunConfig, test: &[UtteranceRecord], ckpt: &Checkpoint, work_dir: &Path) -> Result<EvalReport> {
    let asr_cmd = cfg
        .adapters
        .asr_cmd
        .clone()
        .ok_or_else(|| Error::InvalidConfig("adapters.asr_cmd is required for evaluation".into()))?;
    let kind = ckpt
        .meta
        .feature_kind
        .ok_or(Error::NoAlignedSpeechEncoder(ckpt.meta.stage.number()))?;
    let items = load_eval_items(test, kind, cfg.mel.frame_rate_hz())?;
    evaluate_corpus(
        &items,
        ckpt,
        &EvalSettings {
            asr_cmd,
            vocoder_cmd: cfg.adapters.vocoder_cmd.clone(),
            work_dir: work_dir.to_path_buf(),
            workers: cfg.adapters.workers,
        },
    )
}

/// What one stage run produced.
#[derive(Debug, Clone)]
pub struct StageSummary {
    pub stage: Stage,
    /// Accented speaker for per-speaker fine-tuning.
    pub speaker: Option<String>,
    pub dir: PathBuf,
    pub lineage: Vec<Stage>,
    pub log: Vec<LogEntry>,
}

#[derive(Debug, Clone)]
pub struct PipelineOutcome {
    pub stages: Vec<StageSummary>,
    /// Best stage-3 checkpoint(s).
    pub final_checkpoints: Vec<PathBuf>,
    pub report: Option<EvalReport>,
    pub report_path: Option<PathBuf>,
}

fn summary(stage: Stage, speaker: Option<String>, dir: &Path, out: &StageOutcome) -> StageSummary {
    StageSummary {
        stage,
        speaker,
        dir: dir.to_path_buf(),
        lineage: out.best.meta.lineage.clone(),
        log: out.log.clone(),
    }
}

/// Merges per-speaker reports into one corpus-level report.
fn merge_reports(reports: Vec<EvalReport>) -> Option<EvalReport> {
    let first = reports.first()?.clone();
    let mut utterances = Vec::new();
    let mut failures = Vec::new();
    let (mut dist_sum, mut dist_n) = (0.0, 0usize);
    for r in reports {
        let n = r.utterances.len() + r.failures.len();
        if let Some(d) = r.alignment_distance_mean {
            dist_sum += d * n as f64;
            dist_n += n;
        }
        utterances.extend(r.utterances);
        failures.extend(r.failures);
    }
    let (corpus_wer, per_speaker) = aggregate(&utterances);
    Some(EvalReport {
        corpus_wer,
        per_speaker,
        failures,
        alignment_distance_mean: (dist_n > 0).then(|| dist_sum / dist_n as f64),
        utterances,
        ..first
    })
}

/// Runs stages 1, 2 (unless skipped) and 3, then evaluates on the accented
/// test split. Every artifact lands under `run_dir`.
pub fn run_pipeline(cfg: &RunConfig, records: &[UtteranceRecord], speakers: &[String], run_dir: &Path) -> Result<PipelineOutcome> {
    let splits = Splits::new(cfg, records)?;
    splits.write(&run_dir.join("splits"))?;
    let mut stages = Vec::new();

    let stage1 = match &cfg.pipeline.stage1_checkpoint {
        Some(path) => {
            log::info!("stage 1: reusing {}", path.display());
            Checkpoint::load(path)?
        }
        None => {
            let dir = run_dir.join("stage1");
            let split = splits.select(cfg.stage1.dataset);
            let out = train_stage(cfg, Stage::Tts, &split, speakers, None, &dir, false)?;
            stages.push(summary(Stage::Tts, None, &dir, &out));
            out.best
        }
    };
    if stage1.meta.stage != Stage::Tts {
        return Err(Error::MissingPrerequisite {
            stage: 1,
            requirement: format!("a stage-1 checkpoint, got stage {}", stage1.meta.stage),
        });
    }
    let speakers: Vec<String> = stage1.meta.speakers.clone();

    let before_finetune = if cfg.pipeline.skip_stage2 {
        stage1
    } else {
        let dir = run_dir.join("stage2");
        let split = splits.select(cfg.stage2.dataset);
        let out = train_stage(cfg, Stage::Alignment, &split, &speakers, Some(&stage1), &dir, false)?;
        stages.push(summary(Stage::Alignment, None, &dir, &out));
        out.best
    };

    let split3 = splits.select(cfg.stage3.dataset);
    let runs: Vec<(Option<String>, Split)> = match cfg.pipeline.finetune {
        FinetuneMode::Joint => vec![(None, split3)],
        FinetuneMode::PerSpeaker => {
            let mut names: Vec<String> = split3.train.iter().map(|r| r.speaker.clone()).collect();
            names.sort();
            names.dedup();
            names
                .into_iter()
                .map(|s| {
                    let part = only_speaker(&split3, &s);
                    (Some(s), part)
                })
                .collect()
        }
    };
    let mut final_checkpoints = Vec::new();
    let mut reports = Vec::new();
    for (speaker, split) in runs {
        let dir = match &speaker {
            Some(s) => run_dir.join("stage3").join(s),
            None => run_dir.join("stage3"),
        };
        let out = train_stage(
            cfg,
            Stage::FineTune,
            &split,
            &speakers,
            Some(&before_finetune),
            &dir,
            cfg.pipeline.skip_stage2,
        )?;
        stages.push(summary(Stage::FineTune, speaker.clone(), &dir, &out));
        final_checkpoints.push(dir.join("best.ckpt"));
        if cfg.pipeline.evaluate {
            let report = evaluate_records(cfg, &split.test, &out.best, &dir.join("eval"))?;
            report.write(&dir.join("eval_report.json"))?;
            reports.push(report);
        }
    }

    let (report, report_path) = match merge_reports(reports) {
        Some(r) => {
            let path = run_dir.join("eval_report.json");
            r.write(&path)?;
            (Some(r), Some(path))
        }
        None => (None, None),
    };
    Ok(PipelineOutcome {
        stages,
        final_checkpoints,
        report,
        report_path,
    })
}
