use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::text;

pub const ARPABET: [&str; 39] = [
    "AA", "AE", "AH", "AO", "AW", "AY", "B", "CH", "D", "DH", "EH", "ER", "EY", "F", "G", "HH", "IH", "IY",
    "JH", "K", "L", "M", "N", "NG", "OW", "OY", "P", "R", "S", "SH", "T", "TH", "UH", "UW", "V", "W", "Y",
    "Z", "ZH",
];

/// Phone IDs: padding, word boundary and silence first, then ARPAbet.
#[derive(Debug, Clone)]
pub struct PhoneInventory {
    symbols: Vec<String>,
    index: HashMap<String, u32>,
}

impl Default for PhoneInventory {
    fn default() -> Self {
        let symbols: Vec<String> = ["<pad>", "<wb>", "sil"]
            .into_iter()
            .chain(ARPABET)
            .map(str::to_owned)
            .collect();
        let index = symbols
            .iter()
            .enumerate()
            .map(|(i, s)| (s.clone(), i as u32))
            .collect();
        Self { symbols, index }
    }
}

impl PhoneInventory {
    pub const PAD: u32 = 0;
    pub const BOUNDARY: u32 = 1;
    pub const SILENCE: u32 = 2;

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    /// Looks a symbol up, ignoring ARPAbet stress digits (`AE1` -> `AE`).
    pub fn id(&self, symbol: &str) -> Option<u32> {
        let base = symbol.trim_end_matches(|c: char| c.is_ascii_digit());
        self.index.get(base).copied()
    }

    pub fn symbol(&self, id: u32) -> Option<&str> {
        self.symbols.get(id as usize).map(String::as_str)
    }
}

#[derive(Debug, Clone, Default)]
pub struct Lexicon {
    entries: HashMap<String, Vec<u32>>,
}

impl Lexicon {
    /// Parses `word<TAB>PH PH ...` lines. Blank lines and `#` comments are skipped.
    pub fn parse(src: &str, inventory: &PhoneInventory) -> Result<Self> {
        let mut entries = HashMap::new();
        for (i, line) in src.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let (word, phones) = line.split_once('\t').ok_or_else(|| Error::BadLexicon {
                line: i + 1,
                reason: "missing TAB separator".into(),
            })?;
            let word = text::normalize(word);
            if word.is_empty() {
                return Err(Error::BadLexicon {
                    line: i + 1,
                    reason: "empty word".into(),
                });
            }
            let ids = phones
                .split_whitespace()
                .map(|p| {
                    inventory.id(p).ok_or_else(|| Error::UnknownPhone {
                        word: word.clone(),
                        symbol: p.to_owned(),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            if ids.is_empty() {
                return Err(Error::BadLexicon {
                    line: i + 1,
                    reason: format!("no phones for {word:?}"),
                });
            }
            // first pronunciation wins
            entries.entry(word).or_insert(ids);
        }
        Ok(Self { entries })
    }

    pub fn load(path: &Path, inventory: &PhoneInventory) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?, inventory)
    }

    pub fn get(&self, word: &str) -> Option<&[u32]> {
        self.entries.get(word).map(Vec::as_slice)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Every normalized word of `text` missing from the lexicon, in order, deduplicated.
    pub fn missing_words(&self, text: &str) -> Vec<String> {
        let mut missing: Vec<String> = Vec::new();
        for w in text::words(text) {
            if !self.entries.contains_key(&w) && !missing.contains(&w) {
                missing.push(w);
            }
        }
        missing
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhoneSequence {
    pub phone_ids: Vec<u32>,
    /// Frames per phone; empty until alignments are ingested.
    pub durations: Vec<u32>,
    pub speaker_id: u32,
}

impl PhoneSequence {
    pub fn len(&self) -> usize {
        self.phone_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.phone_ids.is_empty()
    }

    pub fn total_frames(&self) -> usize {
        self.durations.iter().map(|&d| d as usize).sum()
    }
}

/// Lexicon lookup with a boundary marker between consecutive words.
pub fn text_to_phones(text: &str, lexicon: &Lexicon) -> Result<PhoneSequence> {
    let mut phone_ids = Vec::new();
    for (i, word) in text::words(text).into_iter().enumerate() {
        let phones = lexicon.get(&word).ok_or(Error::OutOfVocabulary(word.clone()))?;
        if i > 0 {
            phone_ids.push(PhoneInventory::BOUNDARY);
        }
        phone_ids.extend_from_slice(phones);
    }
    Ok(PhoneSequence {
        phone_ids,
        durations: Vec::new(),
        speaker_id: 0,
    })
}
