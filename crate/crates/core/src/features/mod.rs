//! Waveform and text front end: log-mel spectrograms, pitch/energy contours,
//! externally produced encoder features and phone sequences.

mod durations;
mod mel;
mod phones;
mod pretrained;
mod prosody;

use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use durations::{align_durations, read_durations, MAX_FINAL_PHONE_ADJUST};
pub use mel::{compute_mel, frame_count, stft_magnitude, MelFilterbank};
pub use phones::{text_to_phones, Lexicon, PhoneInventory, PhoneSequence, ARPABET};
pub use pretrained::{load_pretrained_features, resample_time};
pub use prosody::{extract_prosody, ProsodyContours, F0_MAX_HZ, F0_MIN_HZ};

#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    samples: Vec<f32>,
    sample_rate_hz: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f32>, sample_rate_hz: u32) -> Result<Self> {
        if sample_rate_hz == 0 {
            return Err(Error::InvalidWaveform("sample rate must be positive".into()));
        }
        if samples.is_empty() {
            return Err(Error::InvalidWaveform("no samples".into()));
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(Error::InvalidWaveform(format!("non-finite sample at {i}")));
        }
        Ok(Self {
            samples,
            sample_rate_hz,
        })
    }

    /// Reads a WAV file, mixing all channels down to mono.
    pub fn load(path: &Path) -> Result<Self> {
        let mut reader = hound::WavReader::open(path)?;
        let spec = reader.spec();
        let channels = spec.channels.max(1) as usize;
        let interleaved: Vec<f32> = match spec.sample_format {
            hound::SampleFormat::Float => reader.samples::<f32>().collect::<std::result::Result<_, _>>()?,
            hound::SampleFormat::Int => {
                let scale = 1.0 / (1u64 << (spec.bits_per_sample - 1)) as f32;
                reader
                    .samples::<i32>()
                    .map(|s| s.map(|v| v as f32 * scale))
                    .collect::<std::result::Result<_, _>>()?
            }
        };
        let mono = interleaved
            .chunks(channels)
            .map(|c| c.iter().sum::<f32>() / channels as f32)
            .collect();
        Self::new(mono, spec.sample_rate)
    }

    /// Writes 16-bit PCM mono.
    pub fn save(&self, path: &Path) -> Result<()> {
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: self.sample_rate_hz,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut w = hound::WavWriter::create(path, spec)?;
        for &s in &self.samples {
            w.write_sample((s.clamp(-1.0, 1.0) * i16::MAX as f32).round() as i16)?;
        }
        w.finalize()?;
        Ok(())
    }

    pub fn samples(&self) -> &[f32] {
        &self.samples
    }

    pub fn sample_rate_hz(&self) -> u32 {
        self.sample_rate_hz
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn scaled(&self, gain: f32) -> Self {
        Self {
            samples: self.samples.iter().map(|s| s * gain).collect(),
            sample_rate_hz: self.sample_rate_hz,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MelConfig {
    pub sample_rate_hz: u32,
    pub n_fft: usize,
    pub hop_length: usize,
    pub win_length: usize,
    pub n_mels: usize,
    pub fmin: f32,
    pub fmax: f32,
    pub log_floor: f32,
}

impl Default for MelConfig {
    fn default() -> Self {
        Self {
            sample_rate_hz: 24_000,
            n_fft: 2048,
            hop_length: 300,
            win_length: 1200,
            n_mels: 80,
            fmin: 0.0,
            fmax: 8000.0,
            log_floor: 1e-5,
        }
    }
}

impl MelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.sample_rate_hz == 0 || self.n_mels == 0 || self.hop_length == 0 {
            return bad("sample rate, n_mels and hop_length must be positive".into());
        }
        if !(self.hop_length <= self.win_length && self.win_length <= self.n_fft) {
            return bad(format!(
                "need hop_length <= win_length <= n_fft, got {} / {} / {}",
                self.hop_length, self.win_length, self.n_fft
            ));
        }
        let nyquist = self.sample_rate_hz as f32 / 2.0;
        if !(0.0 <= self.fmin && self.fmin < self.fmax && self.fmax <= nyquist) {
            return bad(format!(
                "need 0 <= fmin < fmax <= {nyquist}, got fmin {} fmax {}",
                self.fmin, self.fmax
            ));
        }
        if !(self.log_floor > 0.0) {
            return bad("log_floor must be positive".into());
        }
        Ok(())
    }

    pub fn frame_rate_hz(&self) -> f32 {
        self.sample_rate_hz as f32 / self.hop_length as f32
    }

    /// Frame count for `n` samples under centered framing.
    pub fn frames_for(&self, n: usize) -> usize {
        frame_count(n, self.hop_length)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SourceKind {
    Mel,
    Pretrained,
}

impl std::fmt::Display for SourceKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SourceKind::Mel => "mel",
            SourceKind::Pretrained => "pretrained",
        })
    }
}

impl std::str::FromStr for SourceKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "mel" => Ok(SourceKind::Mel),
            "pretrained" => Ok(SourceKind::Pretrained),
            other => Err(format!("unknown feature kind {other:?} (mel|pretrained)")),
        }
    }
}

/// Time-major source features, `T x D`.
#[derive(Debug, Clone, PartialEq)]
pub struct AcousticFeatures {
    pub frames: Array2<f32>,
    pub source_kind: SourceKind,
    pub frame_rate_hz: f32,
}

impl AcousticFeatures {
    pub fn new(frames: Array2<f32>, source_kind: SourceKind, frame_rate_hz: f32) -> Result<Self> {
        if frames.nrows() == 0 {
            return Err(Error::Shape("acoustic features need at least one frame".into()));
        }
        if frames.iter().any(|v| !v.is_finite()) {
            return Err(Error::Shape("acoustic features contain non-finite values".into()));
        }
        Ok(Self {
            frames,
            source_kind,
            frame_rate_hz,
        })
    }

    pub fn num_frames(&self) -> usize {
        self.frames.nrows()
    }

    pub fn dim(&self) -> usize {
        self.frames.ncols()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid() {
        MelConfig::default().validate().unwrap();
        assert_eq!(MelConfig::default().frame_rate_hz(), 80.0);
    }

    #[test]
    fn config_ordering_rules() {
        let mut c = MelConfig {
            hop_length: 1300,
            ..MelConfig::default()
        };
        assert!(c.validate().is_err());
        c = MelConfig {
            fmax: 13_000.0,
            ..MelConfig::default()
        };
        assert!(c.validate().is_err());
        c = MelConfig {
            log_floor: 0.0,
            ..MelConfig::default()
        };
        assert!(c.validate().is_err());
    }

    #[test]
    fn waveform_invariants() {
        assert!(Waveform::new(vec![], 24_000).is_err());
        assert!(Waveform::new(vec![0.0], 0).is_err());
        assert!(Waveform::new(vec![f32::NAN], 24_000).is_err());
    }

    #[test]
    fn wav_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.wav");
        let w = Waveform::new((0..100).map(|i| (i as f32 / 50.0) - 1.0).collect(), 16_000).unwrap();
        w.save(&p).unwrap();
        let back = Waveform::load(&p).unwrap();
        assert_eq!(back.sample_rate_hz(), 16_000);
        for (a, b) in w.samples().iter().zip(back.samples()) {
            assert!((a - b).abs() < 1e-4);
        }
    }
}
