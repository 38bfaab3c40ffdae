use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AccentTag {
    Native,
    Accented,
}

/// One utterance of a corpus plus the cached artifacts derived from it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtteranceRecord {
    /// `speaker/stem`, unique within a manifest.
    pub utt_id: String,
    pub speaker: String,
    pub speaker_id: u32,
    pub accent_tag: AccentTag,
    pub text: String,
    pub wav_path: PathBuf,
    /// Raw aligner durations shipped with the corpus.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub aligner_durations_path: Option<PathBuf>,
    /// Offline pretrained-encoder output shipped with the corpus.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pretrained_source_path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phone_ids: Option<Vec<u32>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mel_path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pretrained_path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub durations_path: Option<PathBuf>,
    /// `T x 2` tensor: pitch (Hz) and energy columns.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prosody_path: Option<PathBuf>,
}

impl UtteranceRecord {
    pub fn stem(&self) -> &str {
        self.utt_id.rsplit('/').next().unwrap_or(&self.utt_id)
    }
}

/// Scans `corpus_root/<speaker>/<stem>.{wav,txt}` pairs.
///
/// Optional `<stem>.dur` (aligner durations) and `<stem>.feat.acft`
/// (pretrained-encoder features) sidecars are picked up when present.
/// Speaker IDs follow sorted speaker-directory order.
pub fn build_manifest(corpus_root: &Path, accent: AccentTag) -> Result<Vec<UtteranceRecord>> {
    let mut speakers: Vec<PathBuf> = std::fs::read_dir(corpus_root)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    speakers.sort();

    let mut records = Vec::new();
    let mut problems = Vec::new();
    for (speaker_id, dir) in speakers.iter().enumerate() {
        let speaker = dir.file_name().unwrap().to_string_lossy().into_owned();
        let mut wavs = BTreeSet::new();
        let mut txts = BTreeSet::new();
        for entry in std::fs::read_dir(dir)? {
            let path = entry?.path();
            let name = path.file_name().unwrap().to_string_lossy().into_owned();
            if let Some(stem) = name.strip_suffix(".wav") {
                wavs.insert(stem.to_owned());
            } else if let Some(stem) = name.strip_suffix(".txt") {
                txts.insert(stem.to_owned());
            }
        }
        for stem in wavs.symmetric_difference(&txts) {
            let missing = if wavs.contains(stem) { "txt" } else { "wav" };
            problems.push(format!("{speaker}/{stem}: missing .{missing}"));
        }
        for stem in wavs.intersection(&txts) {
            let text = std::fs::read_to_string(dir.join(format!("{stem}.txt")))?
                .trim()
                .to_owned();
            let sidecar = |ext: &str| Some(dir.join(format!("{stem}{ext}"))).filter(|p| p.is_file());
            records.push(UtteranceRecord {
                utt_id: format!("{speaker}/{stem}"),
                speaker: speaker.clone(),
                speaker_id: speaker_id as u32,
                accent_tag: accent,
                text,
                wav_path: dir.join(format!("{stem}.wav")),
                aligner_durations_path: sidecar(".dur"),
                pretrained_source_path: sidecar(".feat.acft"),
                phone_ids: None,
                mel_path: None,
                pretrained_path: None,
                durations_path: None,
                prosody_path: None,
            });
        }
    }
    if !problems.is_empty() {
        return Err(Error::Corpus(problems));
    }
    records.sort_by(|a, b| a.utt_id.cmp(&b.utt_id));
    Ok(records)
}

/// Reassigns speaker IDs over a merged manifest by sorted speaker name, and
/// returns the name table.
pub fn renumber_speakers(records: &mut [UtteranceRecord]) -> Vec<String> {
    let names: BTreeSet<String> = records.iter().map(|r| r.speaker.clone()).collect();
    let table: BTreeMap<&str, u32> = names
        .iter()
        .enumerate()
        .map(|(i, n)| (n.as_str(), i as u32))
        .collect();
    for r in records.iter_mut() {
        r.speaker_id = table[r.speaker.as_str()];
    }
    names.into_iter().collect()
}

pub fn write_manifest(path: &Path, records: &[UtteranceRecord]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut f, r)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<Vec<UtteranceRecord>> {
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    let mut seen = BTreeSet::new();
    for line in f.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let r: UtteranceRecord = serde_json::from_str(&line)?;
        if !seen.insert(r.utt_id.clone()) {
            return Err(Error::Corpus(vec![format!("duplicate utt_id {}", r.utt_id)]));
        }
        out.push(r);
    }
    Ok(out)
}
