mod common;

use accent_core::features::SourceKind;
use accent_core::model::ModelConfig;
use accent_core::training::{run_stage, Checkpoint, LogEntry, LogKind, RunOptions, Stage, StageConfig, StageData};
use accent_core::Error;

fn quick(stage: Stage, steps: usize) -> StageConfig {
    StageConfig {
        max_steps: steps,
        batch_size: 3,
        warmup_steps: 10,
        validation_interval: 2,
        log_interval: 1,
        ..StageConfig::for_stage(stage)
    }
}

fn opts() -> RunOptions {
    RunOptions {
        seed: 1,
        speakers: vec!["a".into(), "b".into()],
        ..Default::default()
    }
}

struct Fixture {
    cfg: ModelConfig,
    train: Vec<accent_core::data::Example>,
    val: Vec<accent_core::data::Example>,
}

impl Fixture {
    fn new() -> Self {
        let cfg = ModelConfig::micro();
        Self {
            train: common::random_examples(&cfg, 6, 1),
            val: common::random_examples(&cfg, 2, 2),
            cfg,
        }
    }

    fn data(&self) -> StageData<'_> {
        StageData {
            train: &self.train,
            val: &self.val,
        }
    }

    fn run(&self, sc: &StageConfig, init: Option<&Checkpoint>, o: &RunOptions) -> accent_core::Result<accent_core::training::StageOutcome> {
        run_stage(sc, &self.cfg, self.data(), init, o)
    }
}

fn requirement(e: Error) -> (u8, String) {
    match e {
        Error::MissingPrerequisite { stage, requirement } => (stage, requirement),
        other => panic!("expected a prerequisite error, got {other}"),
    }
}

#[test]
fn stages_require_their_predecessor() {
    let f = Fixture::new();
    let (stage, _) = requirement(f.run(&quick(Stage::Alignment, 1), None, &opts()).err().unwrap());
    assert_eq!(stage, 2);
    requirement(f.run(&quick(Stage::FineTune, 1), None, &opts()).err().unwrap());

    let s1 = f.run(&quick(Stage::Tts, 2), None, &opts()).unwrap().best;
    let (_, req) = requirement(f.run(&quick(Stage::FineTune, 1), Some(&s1), &opts()).err().unwrap());
    assert!(req.contains("stage-2"), "{req}");
    let skip = RunOptions {
        allow_skip_stage2: true,
        ..opts()
    };
    let s3 = f.run(&quick(Stage::FineTune, 2), Some(&s1), &skip).unwrap().best;
    assert_eq!(s3.meta.lineage, [Stage::Tts, Stage::FineTune]);

    // a later-stage checkpoint cannot restart text-to-speech training
    requirement(f.run(&quick(Stage::Tts, 1), Some(&s3), &opts()).err().unwrap());
}

#[test]
fn lineage_and_feature_kind_accumulate() {
    let f = Fixture::new();
    let s1 = f.run(&quick(Stage::Tts, 2), None, &opts()).unwrap();
    assert_eq!(s1.best.meta.lineage, [Stage::Tts]);
    assert_eq!(s1.best.meta.feature_kind, None);
    assert_eq!(s1.best.meta.speakers, ["a", "b"]);

    let s2_cfg = StageConfig {
        feature_kind: SourceKind::Pretrained,
        ..quick(Stage::Alignment, 2)
    };
    let s2 = f.run(&s2_cfg, Some(&s1.best), &opts()).unwrap();
    assert_eq!(s2.best.meta.lineage, [Stage::Tts, Stage::Alignment]);
    assert_eq!(s2.best.meta.feature_kind, Some(SourceKind::Pretrained));

    // resuming the same stage does not repeat it in the lineage
    let again = f.run(&s2_cfg, Some(&s2.last), &opts()).unwrap();
    assert_eq!(again.best.meta.lineage, [Stage::Tts, Stage::Alignment]);

    // the speech encoder cannot switch input kinds between stages
    let mismatch = f.run(&quick(Stage::FineTune, 1), Some(&s2.best), &opts()).err().unwrap();
    assert!(matches!(mismatch, Error::InvalidConfig(ref m) if m.contains("pretrained")), "{mismatch}");

    let s3_cfg = StageConfig {
        feature_kind: SourceKind::Pretrained,
        ..quick(Stage::FineTune, 2)
    };
    let s3 = f.run(&s3_cfg, Some(&s2.best), &opts()).unwrap();
    assert_eq!(s3.best.meta.lineage, [Stage::Tts, Stage::Alignment, Stage::FineTune]);
}

#[test]
fn outputs_land_in_the_stage_directory() {
    let f = Fixture::new();
    let dir = tempfile::tempdir().unwrap();
    let o = RunOptions {
        out_dir: Some(dir.path().join("stage1")),
        ..opts()
    };
    let out = f.run(&quick(Stage::Tts, 5), None, &o).unwrap();
    let stage_dir = dir.path().join("stage1");
    for name in ["best.ckpt", "last.ckpt", "log.jsonl", "stage_config.json"] {
        assert!(stage_dir.join(name).exists(), "{name}");
    }
    let logged: Vec<LogEntry> = std::fs::read_to_string(stage_dir.join("log.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(logged, out.log);

    // validation at step 0, every 2 steps, and at the end
    let val_steps: Vec<usize> = out.val_log().map(|e| e.step).collect();
    assert_eq!(val_steps, [0, 2, 4, 5]);
    assert_eq!(out.train_log().count(), 5);
    assert!(out.log.iter().all(|e| e.loss.is_finite() && e.stage == Stage::Tts));
    assert!(out.train_log().all(|e| e.lr > 0.0));

    let best_val = out.val_log().map(|e| e.loss.total).fold(f64::INFINITY, f64::min);
    assert_eq!(out.best.meta.val_total, Some(best_val));
    let reloaded = Checkpoint::load(&stage_dir.join("best.ckpt")).unwrap();
    assert_eq!(reloaded.meta, out.best.meta);
    assert_eq!(out.last.meta.step, 5);
    assert!(out.val_log().any(|e| e.step == out.best.meta.step));

    let saved: StageConfig = serde_json::from_slice(&std::fs::read(stage_dir.join("stage_config.json")).unwrap()).unwrap();
    assert_eq!(saved, quick(Stage::Tts, 5));
}

#[test]
fn without_validation_data_best_is_last() {
    let f = Fixture::new();
    let out = run_stage(
        &quick(Stage::Tts, 3),
        &f.cfg,
        StageData {
            train: &f.train,
            val: &[],
        },
        None,
        &opts(),
    )
    .unwrap();
    assert_eq!(out.val_log().count(), 0);
    assert_eq!(out.best.meta, out.last.meta);
    assert!(out.log.iter().all(|e| e.kind == LogKind::Train));
}

#[test]
fn non_finite_loss_aborts_with_the_step() {
    let mut f = Fixture::new();
    for ex in &mut f.train {
        ex.mel[[0, 0]] = f32::NAN;
    }
    match f.run(&quick(Stage::Tts, 3), None, &opts()) {
        Err(Error::NonFiniteLoss { step, report }) => {
            assert_eq!(step, 1);
            assert!(report.contains("NaN"), "{report}");
        }
        other => panic!("expected a non-finite loss error, got {:?}", other.map(|o| o.log)),
    }
}

#[test]
fn empty_training_set_is_rejected() {
    let f = Fixture::new();
    let err = run_stage(&quick(Stage::Tts, 1), &f.cfg, StageData { train: &[], val: &[] }, None, &opts());
    assert!(matches!(err, Err(Error::InvalidConfig(_))));
}
