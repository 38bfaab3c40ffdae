//! Run configuration: one nested document covering features, model, data,
//! the three training stages, pipeline switches and external adapters.
//!
//! Layers are applied in increasing precedence: built-in defaults, a TOML
//! file, `ACCONV_` environment variables, then explicit `key.path=value`
//! overrides. Unknown keys are rejected at every level.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::data::SplitSizes;
use crate::error::{Error, Result};
use crate::features::{MelConfig, SourceKind};
use crate::model::ModelConfig;
use crate::training::{Stage, StageConfig};

pub const ENV_PREFIX: &str = "ACCONV_";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub native_corpus: Option<PathBuf>,
    pub accented_corpus: Option<PathBuf>,
    /// `word<TAB>PHONES` pronunciation dictionary.
    pub lexicon: Option<PathBuf>,
    /// Defaults to `<run dir>/cache` when unset.
    pub cache_dir: Option<PathBuf>,
    pub native_split: SplitSizes,
    pub accented_split: SplitSizes,
    pub workers: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            native_corpus: None,
            accented_corpus: None,
            lexicon: None,
            cache_dir: None,
            native_split: SplitSizes {
                n_train: 1,
                n_val: 5,
                n_test: 5,
            },
            accented_split: SplitSizes {
                n_train: 1032,
                n_val: 50,
                n_test: 50,
            },
            workers: 4,
        }
    }
}

/// How stage 3 treats several accented speakers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinetuneMode {
    /// One model over all accented speakers.
    Joint,
    /// A separate stage-3 run per accented speaker.
    PerSpeaker,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    /// Go from stage 1 straight to stage 3.
    pub skip_stage2: bool,
    pub finetune: FinetuneMode,
    /// Reuse this stage-1 checkpoint instead of training stage 1.
    pub stage1_checkpoint: Option<PathBuf>,
    /// Run the evaluation harness on the accented test split at the end.
    pub evaluate: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            skip_stage2: false,
            finetune: FinetuneMode::Joint,
            stage1_checkpoint: None,
            evaluate: true,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdapterConfig {
    /// Shell command invoked as `<cmd> MEL_PATH WAV_PATH`.
    pub vocoder_cmd: Option<String>,
    /// Shell command invoked as `<cmd> WAV_PATH`, transcript on stdout.
    pub asr_cmd: Option<String>,
    pub workers: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub mel: MelConfig,
    pub model: ModelConfig,
    pub data: DataConfig,
    pub stage1: StageConfig,
    pub stage2: StageConfig,
    pub stage3: StageConfig,
    pub pipeline: PipelineConfig,
    pub adapters: AdapterConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            mel: MelConfig::default(),
            model: ModelConfig::default(),
            data: DataConfig::default(),
            stage1: StageConfig::for_stage(Stage::Tts),
            stage2: StageConfig::for_stage(Stage::Alignment),
            stage3: StageConfig::for_stage(Stage::FineTune),
            pipeline: PipelineConfig::default(),
            adapters: AdapterConfig {
                workers: 4,
                ..AdapterConfig::default()
            },
        }
    }
}

/// The four rows of the ablation table, as config presets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    /// Mel input, no mel* loss, no stage 2.
    Baseline,
    /// Adds the mel* loss.
    MelStar,
    /// Adds pretrained-encoder input features.
    Pretrained,
    /// Adds stage-2 pretraining of the speech encoder.
    Full,
}

impl Ablation {
    pub const ALL: [Ablation; 4] = [Ablation::Baseline, Ablation::MelStar, Ablation::Pretrained, Ablation::Full];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::Baseline => "baseline",
            Ablation::MelStar => "mel_star",
            Ablation::Pretrained => "pretrained",
            Ablation::Full => "full",
        }
    }

    pub fn apply(self, cfg: &mut RunConfig) {
        let (mel_star, kind, stage2) = match self {
            Ablation::Baseline => (false, SourceKind::Mel, false),
            Ablation::MelStar => (true, SourceKind::Mel, false),
            Ablation::Pretrained => (true, SourceKind::Pretrained, false),
            Ablation::Full => (true, SourceKind::Pretrained, true),
        };
        cfg.stage3.use_mel_star = mel_star;
        cfg.stage2.feature_kind = kind;
        cfg.stage3.feature_kind = kind;
        cfg.pipeline.skip_stage2 = !stage2;
    }
}

impl std::str::FromStr for Ablation {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| format!("unknown ablation {s:?} (baseline|mel_star|pretrained|full)"))
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.mel.validate()?;
        self.model.validate()?;
        if self.model.n_mels != self.mel.n_mels {
            return Err(Error::InvalidConfig(format!(
                "model.n_mels = {} but mel.n_mels = {}",
                self.model.n_mels, self.mel.n_mels
            )));
        }
        for (want, s) in [(Stage::Tts, &self.stage1), (Stage::Alignment, &self.stage2), (Stage::FineTune, &self.stage3)] {
            if s.stage != want {
                return Err(Error::InvalidConfig(format!(
                    "stage{} section has stage = {}",
                    want.number(),
                    s.stage
                )));
            }
            s.validate()?;
        }
        Ok(())
    }

    pub fn stage(&self, stage: Stage) -> &StageConfig {
        match stage {
            Stage::Tts => &self.stage1,
            Stage::Alignment => &self.stage2,
            Stage::FineTune => &self.stage3,
        }
    }

    /// Short digest of the canonical JSON form, used to name run directories.
    pub fn digest(&self) -> Result<String> {
        let bytes = serde_json::to_vec(&serde_json::to_value(self)?)?;
        Ok(hex::encode(&Sha256::digest(&bytes)[..6]))
    }

    pub fn to_toml(&self) -> Result<String> {
        // TOML has no null: unset optional fields are simply left out
        let mut v = serde_json::to_value(self)?;
        strip_nulls(&mut v);
        toml::to_string_pretty(&v).map_err(|e| Error::InvalidConfig(e.to_string()))
    }
}

fn strip_nulls(v: &mut Value) {
    match v {
        Value::Object(map) => {
            map.retain(|_, x| !x.is_null());
            map.values_mut().for_each(strip_nulls);
        }
        Value::Array(items) => items.iter_mut().for_each(strip_nulls),
        _ => {}
    }
}

/// One applied override, for the effective-config log.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Override {
    pub source: String,
    pub key: String,
    pub value: Value,
}

/// Builder for the layered configuration.
#[derive(Debug, Clone)]
pub struct ConfigLayers {
    doc: Value,
    applied: Vec<Override>,
}

impl ConfigLayers {
    pub fn new(base: &RunConfig) -> Result<Self> {
        Ok(Self {
            doc: serde_json::to_value(base)?,
            applied: Vec::new(),
        })
    }

    pub fn file(mut self, path: &Path) -> Result<Self> {
        let src = std::fs::read_to_string(path)?;
        let parsed: toml::Table =
            toml::from_str(&src).map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))?;
        let layer = serde_json::to_value(parsed)?;
        merge(&mut self.doc, &layer);
        self.applied.push(Override {
            source: "file".into(),
            key: path.display().to_string(),
            value: layer,
        });
        Ok(self)
    }

    /// `ACCONV_STAGE1__MAX_STEPS=200` sets `stage1.max_steps`.
    pub fn env<I>(mut self, vars: I) -> Result<Self>
    where
        I: IntoIterator<Item = (String, String)>,
    {
        let mut vars: Vec<_> = vars
            .into_iter()
            .filter_map(|(k, v)| k.strip_prefix(ENV_PREFIX).map(|rest| (rest.to_lowercase().replace("__", "."), v)))
            .collect();
        vars.sort();
        for (key, raw) in vars {
            self.set("env", &key, &raw)?;
        }
        Ok(self)
    }

    /// `key.path=value` assignments, e.g. from `--set`.
    pub fn assignments(mut self, items: &[String]) -> Result<Self> {
        for item in items {
            let (key, raw) = item
                .split_once('=')
                .ok_or_else(|| Error::InvalidConfig(format!("override {item:?} is not key=value")))?;
            self.set("flag", key.trim(), raw.trim())?;
        }
        Ok(self)
    }

    /// Sets one dotted key. The value is read as a TOML value when it parses
    /// as one, else taken as a string.
    pub fn set(&mut self, source: &str, key: &str, raw: &str) -> Result<()> {
        let value = parse_scalar(raw);
        let mut node = &mut self.doc;
        let parts: Vec<&str> = key.split('.').collect();
        if parts.iter().any(|p| p.is_empty()) {
            return Err(Error::InvalidConfig(format!("bad config key {key:?}")));
        }
        for part in &parts[..parts.len() - 1] {
            let map = node
                .as_object_mut()
                .ok_or_else(|| Error::InvalidConfig(format!("{key}: {part} is not a table")))?;
            node = map.entry(part.to_string()).or_insert_with(|| Value::Object(Default::default()));
        }
        let map = node
            .as_object_mut()
            .ok_or_else(|| Error::InvalidConfig(format!("{key}: parent is not a table")))?;
        map.insert(parts[parts.len() - 1].to_owned(), value.clone());
        self.applied.push(Override {
            source: source.into(),
            key: key.into(),
            value,
        });
        Ok(())
    }

    pub fn build(self) -> Result<(RunConfig, Vec<Override>)> {
        let cfg: RunConfig = serde_json::from_value(self.doc).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok((cfg, self.applied))
    }
}

fn parse_scalar(raw: &str) -> Value {
    #[derive(Deserialize)]
    struct Probe {
        v: toml::Value,
    }
    match toml::from_str::<Probe>(&format!("v = {raw}")) {
        Ok(p) => serde_json::to_value(p.v).unwrap_or_else(|_| Value::String(raw.to_owned())),
        Err(_) => Value::String(raw.to_owned()),
    }
}

/// Recursive merge: tables merge key by key, anything else is replaced.
fn merge(base: &mut Value, layer: &Value) {
    match (base, layer) {
        (Value::Object(b), Value::Object(l)) => {
            for (k, v) in l {
                match b.get_mut(k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k.clone(), v.clone());
                    }
                }
            }
        }
        (slot, v) => *slot = v.clone(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn layers() -> ConfigLayers {
        ConfigLayers::new(&RunConfig::default()).unwrap()
    }

    #[test]
    fn defaults_validate_and_round_trip_through_toml() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        std::fs::write(&path, cfg.to_toml().unwrap()).unwrap();
        let (back, _) = layers().file(&path).unwrap().build().unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn precedence_is_file_then_env_then_flags() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        std::fs::write(&path, "seed = 1\n[stage1]\nmax_steps = 10\nbatch_size = 4\n").unwrap();
        let env = vec![
            ("ACCONV_STAGE1__MAX_STEPS".to_string(), "20".to_string()),
            ("ACCONV_SEED".to_string(), "2".to_string()),
            ("UNRELATED".to_string(), "x".to_string()),
        ];
        let (cfg, applied) = layers()
            .file(&path)
            .unwrap()
            .env(env)
            .unwrap()
            .assignments(&["seed=3".into()])
            .unwrap()
            .build()
            .unwrap();
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.stage1.max_steps, 20);
        assert_eq!(cfg.stage1.batch_size, 4);
        assert_eq!(applied.len(), 4);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = layers().assignments(&["stage1.max_stepz=3".into()]).unwrap().build().unwrap_err();
        assert!(err.to_string().contains("max_stepz"), "{err}");
    }

    #[test]
    fn strings_and_enums_parse_from_overrides() {
        let (cfg, _) = layers()
            .assignments(&[
                "stage3.feature_kind=pretrained".into(),
                "adapters.asr_cmd=whisper-cli --model tiny".into(),
                "pipeline.finetune=\"per_speaker\"".into(),
            ])
            .unwrap()
            .build()
            .unwrap();
        assert_eq!(cfg.stage3.feature_kind, SourceKind::Pretrained);
        assert_eq!(cfg.adapters.asr_cmd.as_deref(), Some("whisper-cli --model tiny"));
        assert_eq!(cfg.pipeline.finetune, FinetuneMode::PerSpeaker);
    }

    #[test]
    fn ablation_presets_differ_as_intended() {
        let rows: Vec<RunConfig> = Ablation::ALL
            .iter()
            .map(|a| {
                let mut c = RunConfig::default();
                a.apply(&mut c);
                c
            })
            .collect();
        assert!(!rows[0].stage3.use_mel_star && rows[1].stage3.use_mel_star);
        assert_eq!(rows[1].stage3.feature_kind, SourceKind::Mel);
        assert_eq!(rows[2].stage3.feature_kind, SourceKind::Pretrained);
        assert!(rows[2].pipeline.skip_stage2 && !rows[3].pipeline.skip_stage2);
        let digests: std::collections::BTreeSet<_> = rows.iter().map(|c| c.digest().unwrap()).collect();
        assert_eq!(digests.len(), 4);
    }

    #[test]
    fn mismatched_mel_width_is_invalid() {
        let err = layers().assignments(&["mel.n_mels=40".into()]).unwrap().build().unwrap_err();
        assert!(matches!(err, Error::InvalidConfig(_)));
    }
}
