use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{PhoneInventory, F0_MAX_HZ, F0_MIN_HZ};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden_dim: usize,
    pub n_heads: usize,
    pub text_encoder_blocks: usize,
    pub speech_encoder_blocks: usize,
    pub decoder_blocks: usize,
    pub ffn_dim: usize,
    pub ffn_kernel: usize,
    pub dropout: f64,
    pub n_phones: usize,
    pub n_speakers: usize,
    pub n_mels: usize,
    /// Width of the externally produced pretrained-encoder features.
    pub pretrained_dim: usize,
    pub variance_dim: usize,
    pub variance_kernel: usize,
    pub n_bins: usize,
    pub pitch_min_hz: f32,
    pub pitch_max_hz: f32,
    /// Upper end of the energy quantization range (linear STFT-norm units).
    pub energy_max: f32,
    pub postnet_dim: usize,
    pub postnet_kernel: usize,
    pub postnet_layers: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden_dim: 256,
            n_heads: 4,
            text_encoder_blocks: 4,
            speech_encoder_blocks: 4,
            decoder_blocks: 4,
            ffn_dim: 1024,
            ffn_kernel: 9,
            dropout: 0.1,
            n_phones: PhoneInventory::default().len(),
            n_speakers: 1,
            n_mels: 80,
            pretrained_dim: 512,
            variance_dim: 256,
            variance_kernel: 3,
            n_bins: 256,
            pitch_min_hz: F0_MIN_HZ,
            pitch_max_hz: F0_MAX_HZ,
            energy_max: 1000.0,
            postnet_dim: 512,
            postnet_kernel: 5,
            postnet_layers: 5,
        }
    }
}

impl ModelConfig {
    /// Tiny configuration for finite-difference gradient checks.
    pub fn micro() -> Self {
        Self {
            hidden_dim: 4,
            n_heads: 2,
            text_encoder_blocks: 1,
            speech_encoder_blocks: 1,
            decoder_blocks: 1,
            ffn_dim: 2,
            ffn_kernel: 3,
            dropout: 0.0,
            n_phones: 6,
            n_speakers: 2,
            n_mels: 3,
            pretrained_dim: 3,
            variance_dim: 3,
            variance_kernel: 3,
            n_bins: 4,
            postnet_dim: 2,
            postnet_kernel: 3,
            postnet_layers: 5,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("hidden_dim", self.hidden_dim),
            ("n_heads", self.n_heads),
            ("text_encoder_blocks", self.text_encoder_blocks),
            ("speech_encoder_blocks", self.speech_encoder_blocks),
            ("decoder_blocks", self.decoder_blocks),
            ("ffn_dim", self.ffn_dim),
            ("ffn_kernel", self.ffn_kernel),
            ("n_phones", self.n_phones),
            ("n_speakers", self.n_speakers),
            ("n_mels", self.n_mels),
            ("pretrained_dim", self.pretrained_dim),
            ("variance_dim", self.variance_dim),
            ("variance_kernel", self.variance_kernel),
            ("postnet_dim", self.postnet_dim),
            ("postnet_kernel", self.postnet_kernel),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::InvalidConfig(format!("model.{name} must be at least 1")));
        }
        if self.hidden_dim % self.n_heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "hidden_dim {} is not divisible by n_heads {}",
                self.hidden_dim, self.n_heads
            )));
        }
        for (name, k) in [
            ("ffn_kernel", self.ffn_kernel),
            ("variance_kernel", self.variance_kernel),
            ("postnet_kernel", self.postnet_kernel),
        ] {
            if k % 2 == 0 {
                return Err(Error::InvalidConfig(format!("model.{name} must be odd, got {k}")));
            }
        }
        if self.n_bins < 3 {
            return Err(Error::InvalidConfig("model.n_bins must be at least 3".into()));
        }
        if self.postnet_layers < 2 {
            return Err(Error::InvalidConfig("model.postnet_layers must be at least 2".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::InvalidConfig("model.dropout must lie in [0, 1)".into()));
        }
        if !(0.0 < self.pitch_min_hz && self.pitch_min_hz < self.pitch_max_hz) || !(self.energy_max > 0.0) {
            return Err(Error::InvalidConfig("bad pitch/energy quantization range".into()));
        }
        Ok(())
    }
}
