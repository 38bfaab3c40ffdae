//! Corpus preprocessing into a content-addressed feature cache, and loading
//! of cached utterances back into training examples.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{build_manifest, renumber_speakers, write_manifest, AccentTag, Example, UtteranceRecord};
use crate::error::{Error, Result};
use crate::eval::EvalItem;
use crate::features::{
    align_durations, compute_mel, extract_prosody, load_pretrained_features, read_durations, text_to_phones,
    AcousticFeatures, Lexicon, MelConfig, SourceKind, Waveform,
};
use crate::tensor_file;

/// Bumped whenever the cached artifact layout or feature code changes meaning.
const CACHE_VERSION: &str = "acconv-cache-1";
const ENTRY_FILE: &str = "entry.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusSource {
    pub root: PathBuf,
    pub accent: AccentTag,
}

#[derive(Debug, Clone)]
pub struct PreprocessSettings {
    pub mel: MelConfig,
    /// Width of the pretrained-encoder sidecars.
    pub pretrained_dim: usize,
    pub cache_dir: PathBuf,
    pub workers: usize,
}

#[derive(Debug, Clone)]
pub struct PreprocessOutcome {
    pub records: Vec<UtteranceRecord>,
    pub speakers: Vec<String>,
    /// Utterances whose artifacts were (re)computed on this run.
    pub computed: Vec<String>,
    pub reused: usize,
    pub manifest_path: PathBuf,
}

/// Stored next to the artifacts of one utterance.
#[derive(Debug, Serialize, Deserialize)]
struct CacheEntry {
    input_hash: String,
    /// File name -> sha256 of its bytes.
    outputs: Vec<(String, String)>,
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn input_hash(record: &UtteranceRecord, phone_ids: &[u32], settings: &PreprocessSettings) -> Result<String> {
    let mut h = Sha256::new();
    h.update(CACHE_VERSION.as_bytes());
    h.update(serde_json::to_vec(&settings.mel)?);
    h.update(settings.pretrained_dim.to_le_bytes());
    for p in phone_ids {
        h.update(p.to_le_bytes());
    }
    let mut file = |tag: &[u8], path: Option<&Path>| -> Result<()> {
        h.update(tag);
        match path {
            Some(p) => {
                let bytes = std::fs::read(p)?;
                h.update((bytes.len() as u64).to_le_bytes());
                h.update(&bytes);
            }
            None => h.update(b"-"),
        }
        Ok(())
    };
    file(b"wav", Some(&record.wav_path))?;
    file(b"dur", record.aligner_durations_path.as_deref())?;
    file(b"feat", record.pretrained_source_path.as_deref())?;
    Ok(hex::encode(h.finalize()))
}

fn entry_is_fresh(dir: &Path, hash: &str) -> bool {
    let Ok(bytes) = std::fs::read(dir.join(ENTRY_FILE)) else {
        return false;
    };
    let Ok(entry) = serde_json::from_slice::<CacheEntry>(&bytes) else {
        return false;
    };
    entry.input_hash == hash
        && entry
            .outputs
            .iter()
            .all(|(name, digest)| std::fs::read(dir.join(name)).is_ok_and(|b| &sha256_hex(&b) == digest))
}

fn write_durations(path: &Path, d: &[u32]) -> Result<()> {
    let line: Vec<String> = d.iter().map(u32::to_string).collect();
    std::fs::write(path, line.join(" ") + "\n")?;
    Ok(())
}

/// Computes every artifact of one utterance into `dir` and records the entry.
fn compute_entry(record: &UtteranceRecord, phone_ids: &[u32], hash: &str, dir: &Path, s: &PreprocessSettings) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let wave = Waveform::load(&record.wav_path)?;
    if wave.sample_rate_hz() != s.mel.sample_rate_hz {
        return Err(Error::InvalidWaveform(format!(
            "sample rate {} Hz, config expects {} Hz",
            wave.sample_rate_hz(),
            s.mel.sample_rate_hz
        )));
    }
    let mel = compute_mel(&wave, &s.mel)?;
    let t = mel.num_frames();
    let prosody = extract_prosody(&wave, &s.mel)?;
    let mut pe = Array2::<f32>::zeros((t, 2));
    for i in 0..t {
        pe[[i, 0]] = prosody.pitch[i];
        pe[[i, 1]] = prosody.energy[i];
    }
    let mut outputs = Vec::new();
    let mut keep = |name: &str| -> Result<()> {
        outputs.push((name.to_owned(), sha256_hex(&std::fs::read(dir.join(name))?)));
        Ok(())
    };
    tensor_file::write_matrix(&dir.join("mel.acft"), &mel.frames)?;
    keep("mel.acft")?;
    tensor_file::write_matrix(&dir.join("prosody.acft"), &pe)?;
    keep("prosody.acft")?;
    if let Some(src) = &record.aligner_durations_path {
        let d = align_durations(&record.utt_id, phone_ids, &read_durations(src)?, t)?;
        write_durations(&dir.join("durations.txt"), &d)?;
        keep("durations.txt")?;
    }
    if let Some(src) = &record.pretrained_source_path {
        let feats = load_pretrained_features(src, t, s.pretrained_dim, s.mel.frame_rate_hz())?;
        tensor_file::write_matrix(&dir.join("pretrained.acft"), &feats.frames)?;
        keep("pretrained.acft")?;
    }
    let entry = CacheEntry {
        input_hash: hash.to_owned(),
        outputs,
    };
    // the entry goes last, so an interrupted run leaves a stale entry behind
    std::fs::write(dir.join(ENTRY_FILE), serde_json::to_vec_pretty(&entry)?)?;
    Ok(())
}

fn fill_paths(record: &mut UtteranceRecord, dir: &Path) {
    let existing = |name: &str| Some(dir.join(name)).filter(|p| p.is_file());
    record.mel_path = existing("mel.acft");
    record.prosody_path = existing("prosody.acft");
    record.durations_path = existing("durations.txt");
    record.pretrained_path = existing("pretrained.acft");
}

/// Scans the corpora, converts texts to phones and fills the feature cache.
///
/// Speaker IDs are assigned jointly over all corpora. Words missing from the
/// lexicon abort the run before any audio is touched. Utterances whose inputs
/// and cached outputs hash as recorded are skipped.
pub fn preprocess(corpora: &[CorpusSource], lexicon: &Lexicon, settings: &PreprocessSettings) -> Result<PreprocessOutcome> {
    settings.mel.validate()?;
    let mut records = Vec::new();
    for c in corpora {
        records.extend(build_manifest(&c.root, c.accent)?);
    }
    let mut seen = std::collections::BTreeSet::new();
    let dupes: Vec<String> = records
        .iter()
        .filter(|r| !seen.insert(r.utt_id.clone()))
        .map(|r| format!("duplicate utt_id {}", r.utt_id))
        .collect();
    if !dupes.is_empty() {
        return Err(Error::Corpus(dupes));
    }
    let speakers = renumber_speakers(&mut records);

    let mut missing: Vec<String> = Vec::new();
    for r in &records {
        for w in lexicon.missing_words(&r.text) {
            if !missing.contains(&w) {
                missing.push(w);
            }
        }
    }
    if !missing.is_empty() {
        return Err(Error::OutOfVocabularyWords(missing));
    }
    for r in records.iter_mut() {
        r.phone_ids = Some(text_to_phones(&r.text, lexicon)?.phone_ids);
    }

    let next = AtomicUsize::new(0);
    let computed = Mutex::new(Vec::new());
    let failures = Mutex::new(Vec::new());
    let workers = settings.workers.clamp(1, records.len().max(1));
    let jobs = &records;
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(r) = jobs.get(i) else { break };
                let dir = settings.cache_dir.join(&r.utt_id);
                let phones = r.phone_ids.as_deref().unwrap_or_default();
                let run = || -> Result<bool> {
                    let hash = input_hash(r, phones, settings)?;
                    if entry_is_fresh(&dir, &hash) {
                        return Ok(false);
                    }
                    compute_entry(r, phones, &hash, &dir, settings)?;
                    Ok(true)
                };
                match run() {
                    Ok(true) => computed.lock().unwrap().push(r.utt_id.clone()),
                    Ok(false) => {}
                    Err(e) => failures.lock().unwrap().push((i, r.utt_id.clone(), e)),
                }
            });
        }
    });
    let mut failures = failures.into_inner().unwrap();
    if !failures.is_empty() {
        failures.sort_by_key(|f| f.0);
        let (_, utt, source) = failures.remove(0);
        if failures.is_empty() {
            return Err(Error::Utterance {
                utt,
                source: Box::new(source),
            });
        }
        let mut msgs = vec![format!("{utt}: {source}")];
        msgs.extend(failures.into_iter().map(|(_, u, e)| format!("{u}: {e}")));
        return Err(Error::Corpus(msgs));
    }
    let mut computed = computed.into_inner().unwrap();
    computed.sort();
    for r in records.iter_mut() {
        let dir = settings.cache_dir.join(&r.utt_id);
        fill_paths(r, &dir);
    }
    let manifest_path = settings.cache_dir.join("manifest.jsonl");
    write_manifest(&manifest_path, &records)?;
    Ok(PreprocessOutcome {
        reused: records.len() - computed.len(),
        records,
        speakers,
        computed,
        manifest_path,
    })
}

fn need<'a>(record: &UtteranceRecord, path: &'a Option<PathBuf>, what: &str) -> Result<&'a Path> {
    path.as_deref().ok_or_else(|| Error::Corpus(vec![format!("{}: no cached {what}", record.utt_id)]))
}

/// Speech-encoder input of the requested kind for a preprocessed record.
pub fn load_features(record: &UtteranceRecord, kind: SourceKind, frame_rate_hz: f32) -> Result<AcousticFeatures> {
    let path = match kind {
        SourceKind::Mel => need(record, &record.mel_path, "mel")?,
        SourceKind::Pretrained => need(record, &record.pretrained_path, "pretrained features")?,
    };
    AcousticFeatures::new(tensor_file::read_matrix(path)?, kind, frame_rate_hz)
}

/// Loads a preprocessed record as a training example with `kind` inputs.
pub fn load_example(record: &UtteranceRecord, kind: SourceKind) -> Result<Example> {
    let ctx = |e: Error| Error::Utterance {
        utt: record.utt_id.clone(),
        source: Box::new(e),
    };
    let mel = tensor_file::read_matrix(need(record, &record.mel_path, "mel")?).map_err(ctx)?;
    let features = match kind {
        SourceKind::Mel => mel.clone(),
        SourceKind::Pretrained => {
            tensor_file::read_matrix(need(record, &record.pretrained_path, "pretrained features")?).map_err(ctx)?
        }
    };
    let prosody = tensor_file::read_matrix(need(record, &record.prosody_path, "prosody")?).map_err(ctx)?;
    let durations = read_durations(need(record, &record.durations_path, "durations")?).map_err(ctx)?;
    let phone_ids = record
        .phone_ids
        .clone()
        .ok_or_else(|| Error::Corpus(vec![format!("{}: no phone ids", record.utt_id)]))?;
    let t = mel.nrows();
    if features.nrows() != t || prosody.nrows() != t || prosody.ncols() != 2 {
        return Err(ctx(Error::Shape(format!(
            "cached artifacts disagree on frame count ({t} mel, {} features, {} prosody)",
            features.nrows(),
            prosody.nrows()
        ))));
    }
    Ok(Example {
        utt_id: record.utt_id.clone(),
        speaker_id: record.speaker_id,
        features,
        mel,
        phone_ids,
        durations,
        pitch: prosody.column(0).to_vec(),
        energy: prosody.column(1).to_vec(),
    })
}

pub fn load_examples(records: &[UtteranceRecord], kind: SourceKind) -> Result<Vec<Example>> {
    records.iter().map(|r| load_example(r, kind)).collect()
}

/// Evaluation items carry the reference durations when the cache has them,
/// so that alignment distance can be reported.
pub fn load_eval_items(records: &[UtteranceRecord], kind: SourceKind, frame_rate_hz: f32) -> Result<Vec<EvalItem>> {
    records
        .iter()
        .map(|r| {
            let durations = match &r.durations_path {
                Some(p) => Some(read_durations(p)?),
                None => None,
            };
            Ok(EvalItem {
                utt_id: r.utt_id.clone(),
                speaker: r.speaker.clone(),
                speaker_id: r.speaker_id,
                text: r.text.clone(),
                features: load_features(r, kind, frame_rate_hz)?,
                phone_ids: r.phone_ids.clone(),
                durations,
            })
        })
        .collect()
}
