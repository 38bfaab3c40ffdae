//! Conversion of accented speech features into native-accent mel frames:
//! speech encoder, speaker and prosody enrichment, decoder. Text is never
//! consulted.

use std::path::Path;
use std::process::Command;

use candle_core::Tensor;
use ndarray::Array2;

use crate::error::{Error, Result};
use crate::features::{AcousticFeatures, ProsodyContours};
use crate::model::{
    energy_feature, pitch_feature, tensor_item_to_array, AccentModel, ForwardCtx, GroupSet, HiddenSequence,
    MelSpectrogram, Prosody, SeqMask, SpeakerCondition,
};
use crate::tensor_file;
use crate::training::{Checkpoint, Stage};

/// Where pitch and energy come from at conversion time.
#[derive(Debug, Clone, Default)]
pub enum ProsodySource {
    /// The model's own predictors (the default pipeline).
    #[default]
    Predicted,
    /// Contours measured on the source utterance (Hz and linear energy).
    CopyFromSource(ProsodyContours),
}

/// A loaded checkpoint ready for conversion. Holds no mutable state.
pub struct Converter {
    model: AccentModel,
    stage: Stage,
    feature_kind: crate::features::SourceKind,
}

impl Converter {
    pub fn new(ckpt: &Checkpoint) -> Result<Self> {
        if ckpt.meta.stage == Stage::Tts {
            return Err(Error::NoAlignedSpeechEncoder(ckpt.meta.stage.number()));
        }
        let feature_kind = ckpt.meta.feature_kind.ok_or_else(|| {
            Error::Checkpoint("checkpoint does not record the speech encoder's feature kind".into())
        })?;
        let model = AccentModel::view(&ckpt.model, &ckpt.params, &GroupSet::new())?;
        Ok(Self {
            model,
            stage: ckpt.meta.stage,
            feature_kind,
        })
    }

    pub fn stage(&self) -> Stage {
        self.stage
    }

    pub fn model(&self) -> &AccentModel {
        &self.model
    }

    pub fn feature_kind(&self) -> crate::features::SourceKind {
        self.feature_kind
    }

    fn input(&self, features: &AcousticFeatures) -> Result<(Tensor, SeqMask)> {
        if features.source_kind != self.feature_kind {
            return Err(Error::InvalidConfig(format!(
                "checkpoint expects {} features, got {}",
                self.feature_kind, features.source_kind
            )));
        }
        let (t, d) = features.frames.dim();
        let data: Vec<f32> = features.frames.iter().copied().collect();
        let x = Tensor::from_vec(data, (1, t, d), self.model.device())?.to_dtype(self.model.dtype())?;
        let mask = SeqMask::from_lengths(&[t], t, self.model.dtype(), self.model.device())?;
        Ok((x, mask))
    }

    /// Speech-encoder states `H^s` for the given features.
    pub fn encode(&self, features: &AcousticFeatures) -> Result<HiddenSequence> {
        let (x, mask) = self.input(features)?;
        let h = self
            .model
            .speech_encoder
            .forward(&x, features.source_kind, &mask, &mut ForwardCtx::eval())?;
        let t = features.num_frames();
        Ok(HiddenSequence {
            states: tensor_item_to_array(&h, 0, t)?,
            mask: vec![true; t],
        })
    }

    /// Converts one utterance; the output has exactly as many frames as the input.
    pub fn convert(
        &self,
        features: &AcousticFeatures,
        speaker: &SpeakerCondition,
        prosody: &ProsodySource,
    ) -> Result<MelSpectrogram> {
        let (x, mask) = self.input(features)?;
        let t = features.num_frames();
        let speaker = self.model.speaker_vectors(std::slice::from_ref(speaker))?;
        let targets = match prosody {
            ProsodySource::Predicted => None,
            ProsodySource::CopyFromSource(c) => {
                if c.pitch.len() != t || c.energy.len() != t {
                    return Err(Error::Shape(format!(
                        "prosody contours have {}/{} frames, features have {t}",
                        c.pitch.len(),
                        c.energy.len()
                    )));
                }
                let row = |v: Vec<f32>| -> Result<Tensor> {
                    Ok(Tensor::from_vec(v, (1, t), self.model.device())?.to_dtype(self.model.dtype())?)
                };
                Some((
                    row(c.pitch.iter().map(|&p| pitch_feature(p)).collect())?,
                    row(c.energy.iter().map(|&e| energy_feature(e)).collect())?,
                ))
            }
        };
        let prosody = match &targets {
            None => Prosody::Predicted,
            Some((pitch, energy)) => Prosody::Targets { pitch, energy },
        };
        let out = self.model.speech_branch(
            &x,
            features.source_kind,
            &mask,
            &speaker,
            prosody,
            &mut ForwardCtx::eval(),
        )?;
        let mel = MelSpectrogram {
            frames: tensor_item_to_array(&out.mel.frames, 0, t)?,
            before_postnet: tensor_item_to_array(&out.mel.before_postnet, 0, t)?,
        };
        if mel.frames.iter().any(|v| !v.is_finite()) {
            return Err(Error::Shape("conversion produced non-finite mel values".into()));
        }
        Ok(mel)
    }
}

/// One-shot conversion with the checkpoint's lookup-table speaker `speaker_id`.
pub fn convert(features: &AcousticFeatures, speaker_id: u32, ckpt: &Checkpoint) -> Result<MelSpectrogram> {
    Converter::new(ckpt)?.convert(features, &SpeakerCondition::Id(speaker_id), &ProsodySource::Predicted)
}

/// Writes mel frames as an ACFT matrix.
pub fn export_mel(mel: &Array2<f32>, path: &Path) -> Result<()> {
    if mel.nrows() == 0 || mel.ncols() == 0 {
        return Err(Error::Shape("refusing to export an empty mel-spectrogram".into()));
    }
    if mel.iter().any(|v| !v.is_finite()) {
        return Err(Error::Shape("refusing to export a mel-spectrogram with non-finite values".into()));
    }
    tensor_file::write_matrix(path, mel)
}

/// Keeps the tail of an adapter's stderr for error messages.
pub(crate) fn stderr_excerpt(bytes: &[u8]) -> String {
    let text = String::from_utf8_lossy(bytes);
    let text = text.trim();
    let chars: Vec<char> = text.chars().collect();
    if chars.len() > 400 {
        format!("...{}", chars[chars.len() - 400..].iter().collect::<String>())
    } else {
        text.to_owned()
    }
}

/// Runs a shell command with positional arguments appended as `"$1" "$2" ...`.
pub(crate) fn run_adapter(cmd: &str, args: &[&Path]) -> Result<std::process::Output> {
    let quoted: Vec<String> = (1..=args.len()).map(|i| format!("\"${i}\"")).collect();
    let script = format!("{cmd} {}", quoted.join(" "));
    let output = Command::new("sh")
        .arg("-c")
        .arg(script)
        .arg("adapter")
        .args(args)
        .output()?;
    if !output.status.success() {
        return Err(Error::Adapter {
            cmd: cmd.to_owned(),
            status: output.status.to_string(),
            stderr: stderr_excerpt(&output.stderr),
        });
    }
    Ok(output)
}

/// Exports `mel` next to `wav_out` and calls the vocoder command as
/// `<cmd> <mel.acft> <out.wav>`. The command must write the wav file.
pub fn invoke_vocoder_adapter(mel: &Array2<f32>, adapter_cmd: Option<&str>, wav_out: &Path) -> Result<()> {
    let cmd = adapter_cmd.filter(|c| !c.trim().is_empty()).ok_or(Error::NoVocoder)?;
    let mel_path = wav_out.with_extension("mel.acft");
    export_mel(mel, &mel_path)?;
    run_adapter(cmd, &[&mel_path, wav_out])?;
    if !wav_out.exists() {
        return Err(Error::Adapter {
            cmd: cmd.to_owned(),
            status: "exit 0".into(),
            stderr: format!("no file written at {}", wav_out.display()),
        });
    }
    Ok(())
}

/// Mean per-frame Euclidean distance between two `T x d` state sequences.
pub fn alignment_distance(a: &Array2<f32>, b: &Array2<f32>) -> Result<f64> {
    if a.dim() != b.dim() || a.nrows() == 0 {
        return Err(Error::Shape(format!("cannot compare states {:?} and {:?}", a.dim(), b.dim())));
    }
    let total: f64 = a
        .rows()
        .into_iter()
        .zip(b.rows())
        .map(|(x, y)| x.iter().zip(y).map(|(p, q)| ((p - q) as f64).powi(2)).sum::<f64>().sqrt())
        .sum();
    Ok(total / a.nrows() as f64)
}

/// Mean absolute difference between two mel matrices of equal shape.
pub fn mel_l1(a: &Array2<f32>, b: &Array2<f32>) -> Result<f64> {
    if a.dim() != b.dim() || a.is_empty() {
        return Err(Error::Shape(format!("cannot compare mels {:?} and {:?}", a.dim(), b.dim())));
    }
    Ok(a.iter().zip(b).map(|(p, q)| (p - q).abs() as f64).sum::<f64>() / a.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::SourceKind;
    use crate::model::{ModelConfig, ParamStore};
    use crate::training::CheckpointMeta;
    use candle_core::{DType, Device};

    fn ckpt(stage: Stage) -> Checkpoint {
        let cfg = ModelConfig::micro();
        let (_, params): (_, ParamStore) = AccentModel::init(&cfg, 2, DType::F32, &Device::Cpu).unwrap();
        Checkpoint {
            model: cfg,
            meta: CheckpointMeta {
                stage,
                step: 0,
                lineage: vec![stage],
                feature_kind: (stage != Stage::Tts).then_some(SourceKind::Mel),
                speakers: vec!["a".into(), "b".into()],
                val_total: None,
            },
            params,
        }
    }

    fn feats(t: usize) -> AcousticFeatures {
        AcousticFeatures::new(
            Array2::from_shape_fn((t, 3), |(i, j)| ((i * 3 + j) as f32 * 0.3).sin()),
            SourceKind::Mel,
            80.0,
        )
        .unwrap()
    }

    #[test]
    fn preserves_length_and_is_deterministic() {
        let c = ckpt(Stage::FineTune);
        for t in [1, 5, 17] {
            let a = convert(&feats(t), 1, &c).unwrap();
            let b = convert(&feats(t), 1, &c).unwrap();
            assert_eq!(a.frames.dim(), (t, 3));
            assert_eq!(a, b);
            assert!(a.frames.iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn rejects_stage1_and_unknown_speaker() {
        assert!(matches!(
            convert(&feats(4), 0, &ckpt(Stage::Tts)),
            Err(Error::NoAlignedSpeechEncoder(1))
        ));
        assert!(matches!(
            convert(&feats(4), 7, &ckpt(Stage::Alignment)),
            Err(Error::UnknownSpeaker { id: 7, .. })
        ));
        let wrong_kind = AcousticFeatures::new(Array2::zeros((4, 3)), SourceKind::Pretrained, 80.0).unwrap();
        assert!(convert(&wrong_kind, 0, &ckpt(Stage::FineTune)).is_err());
    }

    #[test]
    fn copied_prosody_changes_output() {
        let c = Converter::new(&ckpt(Stage::FineTune)).unwrap();
        let f = feats(6);
        let spk = SpeakerCondition::Id(0);
        let a = c.convert(&f, &spk, &ProsodySource::Predicted).unwrap();
        let contours = ProsodyContours {
            pitch: vec![300.0; 6],
            energy: vec![900.0; 6],
        };
        let b = c.convert(&f, &spk, &ProsodySource::CopyFromSource(contours)).unwrap();
        assert_eq!(b.frames.dim(), a.frames.dim());
        assert_ne!(a, b);
        let short = ProsodyContours {
            pitch: vec![1.0; 2],
            energy: vec![1.0; 2],
        };
        assert!(c.convert(&f, &spk, &ProsodySource::CopyFromSource(short)).is_err());
    }

    #[test]
    fn export_round_trip_and_rejections() {
        let dir = tempfile::tempdir().unwrap();
        let mel = Array2::from_shape_fn((4, 3), |(i, j)| i as f32 - j as f32 * 0.5);
        let p = dir.path().join("m.acft");
        export_mel(&mel, &p).unwrap();
        assert_eq!(tensor_file::read_matrix(&p).unwrap(), mel);
        assert!(export_mel(&Array2::zeros((0, 3)), &p).is_err());
        assert!(matches!(
            invoke_vocoder_adapter(&mel, None, &dir.path().join("o.wav")),
            Err(Error::NoVocoder)
        ));
    }

    #[test]
    fn adapter_failures_carry_stderr() {
        let dir = tempfile::tempdir().unwrap();
        let mel = Array2::ones((2, 3));
        let err = invoke_vocoder_adapter(&mel, Some("sh -c 'echo broken >&2; exit 3'"), &dir.path().join("o.wav")).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("broken"), "{msg}");
        invoke_vocoder_adapter(&mel, Some("cp"), &dir.path().join("o.wav")).unwrap();
        assert!(dir.path().join("o.wav").exists());
    }

    #[test]
    fn distances() {
        let a = Array2::from_shape_vec((2, 2), vec![0.0, 0.0, 1.0, 1.0]).unwrap();
        let b = Array2::from_shape_vec((2, 2), vec![3.0, 4.0, 1.0, 1.0]).unwrap();
        assert_eq!(alignment_distance(&a, &b).unwrap(), 2.5);
        assert_eq!(mel_l1(&a, &b).unwrap(), 7.0 / 4.0);
    }
}
