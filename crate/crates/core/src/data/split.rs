use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use super::UtteranceRecord;
use crate::error::{Error, Result};
use crate::text;

/// Per-speaker subset sizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSizes {
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
}

impl SplitSizes {
    pub fn total(&self) -> usize {
        self.n_train + self.n_val + self.n_test
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Split {
    pub train: Vec<UtteranceRecord>,
    pub val: Vec<UtteranceRecord>,
    pub test: Vec<UtteranceRecord>,
}

/// Partitions records so that no normalized text occurs in two subsets.
///
/// Distinct texts are shuffled with a seeded generator and handed out whole:
/// a text goes to validation, else test, if every speaker reading it still has
/// room there; everything else goes to training. Texts with more readers are
/// placed first. Validation and test sizes
/// are exact per speaker; training takes the remainder (at least `n_train`).
pub fn split_manifest(records: &[UtteranceRecord], sizes: SplitSizes, seed: u64) -> Result<Split> {
    let mut per_speaker: BTreeMap<&str, usize> = BTreeMap::new();
    for r in records {
        *per_speaker.entry(r.speaker.as_str()).or_default() += 1;
    }
    let short: Vec<String> = per_speaker
        .iter()
        .filter(|(_, &n)| n < sizes.total())
        .map(|(s, n)| format!("{s}: {n} < {}", sizes.total()))
        .collect();
    if !short.is_empty() {
        return Err(Error::InsufficientUtterances(short));
    }

    let mut sorted: Vec<&UtteranceRecord> = records.iter().collect();
    sorted.sort_by(|a, b| a.utt_id.cmp(&b.utt_id));
    let mut by_text: BTreeMap<String, Vec<&UtteranceRecord>> = BTreeMap::new();
    for r in sorted {
        by_text.entry(text::normalize(&r.text)).or_default().push(r);
    }
    let mut texts: Vec<&String> = by_text.keys().collect();
    texts.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
    // Widely shared texts first, so single-reader texts cannot use up a
    // speaker's slots that a shared text would need.
    let readers = |t: &String| by_text[t].iter().map(|r| r.speaker.as_str()).collect::<BTreeSet<_>>().len();
    texts.sort_by_key(|t| std::cmp::Reverse(readers(t)));

    let mut room_val: BTreeMap<&str, usize> = per_speaker.keys().map(|&s| (s, sizes.n_val)).collect();
    let mut room_test = room_val.iter().map(|(&s, _)| (s, sizes.n_test)).collect::<BTreeMap<_, _>>();
    let mut split = Split::default();
    for t in texts {
        let group = &by_text[t];
        let mut need: BTreeMap<&str, usize> = BTreeMap::new();
        for r in group {
            *need.entry(r.speaker.as_str()).or_default() += 1;
        }
        let fits = |room: &BTreeMap<&str, usize>| need.iter().all(|(s, n)| room[s] >= *n);
        let target = if fits(&room_val) {
            need.iter().for_each(|(s, n)| *room_val.get_mut(s).unwrap() -= n);
            &mut split.val
        } else if fits(&room_test) {
            need.iter().for_each(|(s, n)| *room_test.get_mut(s).unwrap() -= n);
            &mut split.test
        } else {
            &mut split.train
        };
        target.extend(group.iter().map(|&r| r.clone()));
    }

    let unfilled: BTreeSet<String> = room_val
        .iter()
        .filter(|(_, &n)| n > 0)
        .map(|(s, n)| format!("{s}: {n} validation slots unfilled"))
        .chain(
            room_test
                .iter()
                .filter(|(_, &n)| n > 0)
                .map(|(s, n)| format!("{s}: {n} test slots unfilled")),
        )
        .collect();
    if !unfilled.is_empty() {
        return Err(Error::Split(format!(
            "shared texts prevent exact subset sizes ({})",
            unfilled.into_iter().collect::<Vec<_>>().join(", ")
        )));
    }
    for subset in [&mut split.train, &mut split.val, &mut split.test] {
        subset.sort_by(|a, b| a.utt_id.cmp(&b.utt_id));
    }
    Ok(split)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::AccentTag;
    use std::collections::HashSet;

    fn rec(speaker: &str, i: usize, text: &str) -> UtteranceRecord {
        UtteranceRecord {
            utt_id: format!("{speaker}/u{i:04}"),
            speaker: speaker.into(),
            speaker_id: 0,
            accent_tag: AccentTag::Accented,
            text: text.into(),
            wav_path: "x.wav".into(),
            aligner_durations_path: None,
            pretrained_source_path: None,
            phone_ids: None,
            mel_path: None,
            pretrained_path: None,
            durations_path: None,
            prosody_path: None,
        }
    }

    /// Four speakers reading the same prompt list, as in an ARCTIC-style corpus.
    fn shared_corpus(n: usize) -> Vec<UtteranceRecord> {
        ["ASI", "RRBI", "SVBI", "TNI"]
            .iter()
            .flat_map(|s| (0..n).map(move |i| rec(s, i, &format!("Prompt number {i}."))))
            .collect()
    }

    fn texts(v: &[UtteranceRecord]) -> HashSet<String> {
        v.iter().map(|r| text::normalize(&r.text)).collect()
    }

    fn count(v: &[UtteranceRecord], s: &str) -> usize {
        v.iter().filter(|r| r.speaker == s).count()
    }

    #[test]
    fn arctic_sized_split() {
        let records = shared_corpus(1132);
        let sizes = SplitSizes {
            n_train: 1032,
            n_val: 50,
            n_test: 50,
        };
        let split = split_manifest(&records, sizes, 3).unwrap();
        for s in ["ASI", "RRBI", "SVBI", "TNI"] {
            assert_eq!(count(&split.train, s), 1032);
            assert_eq!(count(&split.val, s), 50);
            assert_eq!(count(&split.test, s), 50);
        }
        let (a, b, c) = (texts(&split.train), texts(&split.val), texts(&split.test));
        assert!(a.is_disjoint(&b) && a.is_disjoint(&c) && b.is_disjoint(&c));
    }

    #[test]
    fn zero_val_and_test_puts_everything_in_train() {
        let records = shared_corpus(5);
        let split = split_manifest(
            &records,
            SplitSizes {
                n_train: 5,
                n_val: 0,
                n_test: 0,
            },
            0,
        )
        .unwrap();
        assert_eq!(split.train.len(), 20);
        assert!(split.val.is_empty() && split.test.is_empty());
    }

    #[test]
    fn shared_sentences_land_together() {
        let records: Vec<_> = ["a", "b"]
            .iter()
            .flat_map(|s| (0..12).map(move |i| rec(s, i, &format!("Sentence {i}"))))
            .collect();
        let sizes = SplitSizes {
            n_train: 8,
            n_val: 2,
            n_test: 2,
        };
        for seed in 0..20 {
            let split = split_manifest(&records, sizes, seed).unwrap();
            let subset_of = |utt: &str| {
                [&split.train, &split.val, &split.test]
                    .iter()
                    .position(|v| v.iter().any(|r| r.utt_id == utt))
                    .unwrap()
            };
            // exhaustive check over every text
            for i in 0..12 {
                assert_eq!(subset_of(&format!("a/u{i:04}")), subset_of(&format!("b/u{i:04}")));
            }
        }
    }

    #[test]
    fn partition_and_determinism() {
        let mut records = shared_corpus(20);
        records.push(rec("ASI", 999, "an extra line"));
        let sizes = SplitSizes {
            n_train: 10,
            n_val: 3,
            n_test: 4,
        };
        let a = split_manifest(&records, sizes, 42).unwrap();
        let mut shuffled = records.clone();
        shuffled.reverse();
        let b = split_manifest(&shuffled, sizes, 42).unwrap();
        assert_eq!(a, b);
        let mut all: Vec<String> = a
            .train
            .iter()
            .chain(&a.val)
            .chain(&a.test)
            .map(|r| r.utt_id.clone())
            .collect();
        all.sort();
        let mut want: Vec<String> = records.iter().map(|r| r.utt_id.clone()).collect();
        want.sort();
        assert_eq!(all, want);
        assert_eq!(count(&a.train, "ASI"), 14);
        assert_ne!(a, split_manifest(&records, sizes, 43).unwrap());
    }

    #[test]
    fn insufficient_reports_counts() {
        let records = shared_corpus(3);
        let err = split_manifest(
            &records,
            SplitSizes {
                n_train: 2,
                n_val: 1,
                n_test: 1,
            },
            0,
        )
        .unwrap_err()
        .to_string();
        assert!(err.contains("ASI: 3 < 4"), "{err}");
    }
}
