//! Word error rate, the external ASR adapter, and corpus-level evaluation of
//! a conversion checkpoint.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::AcousticFeatures;
use crate::inference::{alignment_distance, invoke_vocoder_adapter, run_adapter, Converter, ProsodySource};
use crate::model::{length_regulate, tensor_item_to_array, ForwardCtx, SeqMask, SpeakerCondition};
use crate::text;
use crate::training::{Checkpoint, Stage};

/// Edit operations of a minimal alignment.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorCounts {
    pub substitutions: usize,
    pub insertions: usize,
    pub deletions: usize,
    pub reference_words: usize,
}

impl ErrorCounts {
    pub fn errors(&self) -> usize {
        self.substitutions + self.insertions + self.deletions
    }

    fn add(&mut self, other: &ErrorCounts) {
        self.substitutions += other.substitutions;
        self.insertions += other.insertions;
        self.deletions += other.deletions;
        self.reference_words += other.reference_words;
    }
}

/// Levenshtein alignment of `hypothesis` against `reference`, with the
/// operation mix of one minimal path (ties prefer substitution, then
/// deletion).
pub fn edit_counts<T: PartialEq>(reference: &[T], hypothesis: &[T]) -> ErrorCounts {
    let (n, m) = (reference.len(), hypothesis.len());
    // cost[i][j] aligns reference[..i] with hypothesis[..j]
    let mut cost = vec![vec![0usize; m + 1]; n + 1];
    for (i, row) in cost.iter_mut().enumerate() {
        row[0] = i;
    }
    for j in 0..=m {
        cost[0][j] = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let sub = cost[i - 1][j - 1] + usize::from(reference[i - 1] != hypothesis[j - 1]);
            cost[i][j] = sub.min(cost[i - 1][j] + 1).min(cost[i][j - 1] + 1);
        }
    }
    let mut counts = ErrorCounts {
        reference_words: n,
        ..Default::default()
    };
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        if i > 0 && j > 0 {
            let same = reference[i - 1] == hypothesis[j - 1];
            if cost[i][j] == cost[i - 1][j - 1] + usize::from(!same) {
                counts.substitutions += usize::from(!same);
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if i > 0 && cost[i][j] == cost[i - 1][j] + 1 {
            counts.deletions += 1;
            i -= 1;
        } else {
            counts.insertions += 1;
            j -= 1;
        }
    }
    counts
}

/// (substitutions + insertions + deletions) / reference length.
/// An empty reference gives 0 for an empty hypothesis and an error otherwise.
pub fn wer<T: PartialEq>(reference: &[T], hypothesis: &[T]) -> Result<f64> {
    if reference.is_empty() {
        return if hypothesis.is_empty() {
            Ok(0.0)
        } else {
            Err(Error::UndefinedWer(hypothesis.len()))
        };
    }
    Ok(edit_counts(reference, hypothesis).errors() as f64 / reference.len() as f64)
}

/// Runs `<cmd> <audio>` and returns its stdout with whitespace collapsed.
pub fn transcribe_adapter(audio: &Path, adapter_cmd: &str) -> Result<String> {
    let out = run_adapter(adapter_cmd, &[audio])?;
    let transcript = String::from_utf8(out.stdout).map_err(|_| Error::Adapter {
        cmd: adapter_cmd.to_owned(),
        status: "exit 0".into(),
        stderr: "transcript is not valid UTF-8".into(),
    })?;
    let transcript = transcript.split_whitespace().collect::<Vec<_>>().join(" ");
    if transcript.is_empty() {
        return Err(Error::Adapter {
            cmd: adapter_cmd.to_owned(),
            status: "exit 0".into(),
            stderr: "empty transcript".into(),
        });
    }
    Ok(transcript)
}

/// One test utterance for corpus evaluation.
#[derive(Debug, Clone)]
pub struct EvalItem {
    pub utt_id: String,
    pub speaker: String,
    pub speaker_id: u32,
    pub text: String,
    pub features: AcousticFeatures,
    /// Phones and aligner durations, used for the alignment diagnostic.
    pub phone_ids: Option<Vec<u32>>,
    pub durations: Option<Vec<u32>>,
}

#[derive(Debug, Clone)]
pub struct EvalSettings {
    pub asr_cmd: String,
    pub vocoder_cmd: Option<String>,
    /// Converted mels, waveforms and per-utterance outputs go here.
    pub work_dir: PathBuf,
    pub workers: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeakerScore {
    pub wer: f64,
    pub errors: usize,
    pub reference_words: usize,
    pub utterances: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtteranceFailure {
    pub utt_id: String,
    pub step: String,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtteranceResult {
    pub utt_id: String,
    pub speaker: String,
    pub reference: String,
    pub hypothesis: String,
    pub counts: ErrorCounts,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Total errors over total reference words of scored utterances.
    pub corpus_wer: Option<f64>,
    pub per_speaker: BTreeMap<String, SpeakerScore>,
    pub failures: Vec<UtteranceFailure>,
    /// Mean per-frame distance between speech-encoder states and the text
    /// teacher's regulated states, over utterances with alignments.
    pub alignment_distance_mean: Option<f64>,
    pub normalizer_version: String,
    pub checkpoint_stage: Stage,
    pub checkpoint_lineage: Vec<Stage>,
    pub utterances: Vec<UtteranceResult>,
}

impl EvalReport {
    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }
}

/// Corpus WER and per-speaker scores from per-utterance results.
pub fn aggregate(results: &[UtteranceResult]) -> (Option<f64>, BTreeMap<String, SpeakerScore>) {
    let mut total = ErrorCounts::default();
    let mut by_speaker: BTreeMap<String, (ErrorCounts, usize)> = BTreeMap::new();
    for r in results {
        total.add(&r.counts);
        let slot = by_speaker.entry(r.speaker.clone()).or_default();
        slot.0.add(&r.counts);
        slot.1 += 1;
    }
    let rate = |c: &ErrorCounts| (c.reference_words > 0).then(|| c.errors() as f64 / c.reference_words as f64);
    let per_speaker = by_speaker
        .into_iter()
        .map(|(s, (c, n))| {
            (
                s,
                SpeakerScore {
                    wer: rate(&c).unwrap_or(0.0),
                    errors: c.errors(),
                    reference_words: c.reference_words,
                    utterances: n,
                },
            )
        })
        .collect();
    (rate(&total), per_speaker)
}

fn teacher_states(conv: &Converter, phone_ids: &[u32], durations: &[u32]) -> Result<Array2<f32>> {
    let model = conv.model();
    let n = phone_ids.len();
    let ids = candle_core::Tensor::from_vec(phone_ids.to_vec(), (1, n), model.device())?;
    let mask = SeqMask::from_lengths(&[n], n, model.dtype(), model.device())?;
    let encoded = model.text_encoder.forward(&ids, &mask, &mut ForwardCtx::eval())?;
    let regulated = length_regulate(&encoded.get(0)?, durations)?;
    let t = regulated.dims()[0];
    tensor_item_to_array(&regulated.unsqueeze(0)?, 0, t)
}

fn file_stem(utt_id: &str) -> String {
    utt_id
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

enum Outcome {
    Scored(UtteranceResult, Option<f64>),
    Failed(UtteranceFailure, Option<f64>),
}

fn evaluate_one(conv: &Converter, item: &EvalItem, settings: &EvalSettings) -> Outcome {
    let fail = |step: &str, e: Error, dist: Option<f64>| {
        Outcome::Failed(
            UtteranceFailure {
                utt_id: item.utt_id.clone(),
                step: step.into(),
                error: e.to_string(),
            },
            dist,
        )
    };
    let dist = match (&item.phone_ids, &item.durations) {
        (Some(p), Some(d)) => conv
            .encode(&item.features)
            .and_then(|h| Ok((h, teacher_states(conv, p, d)?)))
            .and_then(|(h, t)| alignment_distance(&h.states, &t))
            .ok(),
        _ => None,
    };
    let mel = match conv.convert(
        &item.features,
        &SpeakerCondition::Id(item.speaker_id),
        &ProsodySource::Predicted,
    ) {
        Ok(m) => m,
        Err(e) => return fail("convert", e, dist),
    };
    let wav = settings.work_dir.join(format!("{}.wav", file_stem(&item.utt_id)));
    if let Err(e) = invoke_vocoder_adapter(&mel.frames, settings.vocoder_cmd.as_deref(), &wav) {
        return fail("vocoder", e, dist);
    }
    let hypothesis = match transcribe_adapter(&wav, &settings.asr_cmd) {
        Ok(h) => h,
        Err(e) => return fail("asr", e, dist),
    };
    let reference = text::words(&item.text);
    let hyp_words = text::words(&hypothesis);
    if reference.is_empty() {
        return fail("score", Error::UndefinedWer(hyp_words.len()), dist);
    }
    Outcome::Scored(
        UtteranceResult {
            utt_id: item.utt_id.clone(),
            speaker: item.speaker.clone(),
            reference: reference.join(" "),
            hypothesis: hyp_words.join(" "),
            counts: edit_counts(&reference, &hyp_words),
        },
        dist,
    )
}

/// Converts, vocodes and transcribes every item, then aggregates. Failures
/// of individual utterances are recorded and do not stop the run.
pub fn evaluate_corpus(items: &[EvalItem], ckpt: &Checkpoint, settings: &EvalSettings) -> Result<EvalReport> {
    let conv = Converter::new(ckpt)?;
    std::fs::create_dir_all(&settings.work_dir)?;
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Outcome>>> = Mutex::new((0..items.len()).map(|_| None).collect());
    let workers = settings.workers.clamp(1, items.len().max(1));
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= items.len() {
                    break;
                }
                let outcome = evaluate_one(&conv, &items[i], settings);
                slots.lock().unwrap()[i] = Some(outcome);
            });
        }
    });

    let mut results = Vec::new();
    let mut failures = Vec::new();
    let mut distances = Vec::new();
    for outcome in slots.into_inner().unwrap().into_iter().flatten() {
        let dist = match outcome {
            Outcome::Scored(r, d) => {
                results.push(r);
                d
            }
            Outcome::Failed(f, d) => {
                failures.push(f);
                d
            }
        };
        distances.extend(dist);
    }
    let (corpus_wer, per_speaker) = aggregate(&results);
    Ok(EvalReport {
        corpus_wer,
        per_speaker,
        failures,
        alignment_distance_mean: (!distances.is_empty())
            .then(|| distances.iter().sum::<f64>() / distances.len() as f64),
        normalizer_version: text::NORMALIZER_VERSION.to_owned(),
        checkpoint_stage: ckpt.meta.stage,
        checkpoint_lineage: ckpt.meta.lineage.clone(),
        utterances: results,
    })
}
