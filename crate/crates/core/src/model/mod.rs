//! Network components: text encoder, length regulator, variance adaptor,
//! speech encoder, speaker table and mel decoder with PostNet.
//!
//! Parameters live in a [`ParamStore`] partitioned into [`ParamGroup`]s. A
//! model is a view over the store in which only the requested groups are
//! attached to their variables; frozen groups are detached, so gradients of
//! any loss with respect to them are identically zero.

mod config;
mod fft;
mod layers;
mod params;
mod variance;

use candle_core::{DType, Device, Tensor};
use ndarray::{Array2, Array3};

pub use config::ModelConfig;
pub use fft::{FftBlock, FftStack};
pub use layers::{positional_encoding, softmax_last, Conv1d, Embedding, ForwardCtx, LayerNorm, Linear, SeqMask};
pub use params::{
    all_groups, GroupSet, Init, InitSource, ParamGroup, ParamSource, ParamStore, Scope, ViewSource,
};
pub use variance::{
    duration_feature, duration_from_prediction, energy_feature, pitch_feature, Quantizer, VarianceAdaptor,
    VarianceOutput, VariancePredictor,
};

use crate::data::Batch;
use crate::error::{Error, Result};
use crate::features::SourceKind;

/// Frame- or phone-level hidden states of one utterance, `T x d`.
#[derive(Debug, Clone)]
pub struct HiddenSequence {
    pub states: Array2<f32>,
    pub mask: Vec<bool>,
}

/// Decoder output of one utterance, both `T x n_mels`.
#[derive(Debug, Clone, PartialEq)]
pub struct MelSpectrogram {
    pub frames: Array2<f32>,
    pub before_postnet: Array2<f32>,
}

#[derive(Debug, Clone)]
pub struct MelOutput {
    /// `B x T x n_mels` projection of the decoder states.
    pub before_postnet: Tensor,
    /// `before_postnet` plus the PostNet residual.
    pub frames: Tensor,
}

#[derive(Debug, Clone)]
pub struct TextEncoder {
    embedding: Embedding,
    stack: FftStack,
    n_phones: usize,
}

impl TextEncoder {
    pub fn new(s: &mut Scope, cfg: &ModelConfig) -> Result<Self> {
        let d = cfg.hidden_dim;
        Ok(Self {
            embedding: Embedding::new(&mut s.sub("phone_embedding"), cfg.n_phones, d, Init::Normal((d as f64).powf(-0.5)))?,
            stack: FftStack::new(
                &mut s.sub("fft"),
                cfg.text_encoder_blocks,
                d,
                cfg.n_heads,
                cfg.ffn_dim,
                cfg.ffn_kernel,
                cfg.dropout,
            )?,
            n_phones: cfg.n_phones,
        })
    }

    /// `B x N` phone IDs -> `B x N x d` (E^l).
    pub fn forward(&self, phone_ids: &Tensor, mask: &SeqMask, ctx: &mut ForwardCtx) -> Result<Tensor> {
        let ids: Vec<u32> = phone_ids.flatten_all()?.to_vec1()?;
        if let Some(&bad) = ids.iter().find(|&&id| id as usize >= self.n_phones) {
            return Err(Error::PhoneOutOfRange {
                id: bad,
                size: self.n_phones,
            });
        }
        let x = self.embedding.forward(phone_ids)?;
        let (_, n, d) = x.dims3()?;
        let x = x.broadcast_add(&positional_encoding(n, d, x.dtype(), x.device())?)?;
        self.stack.forward(&x, mask, ctx)
    }
}

#[derive(Debug, Clone)]
pub struct SpeechEncoder {
    prenet_mel: Linear,
    prenet_pretrained: Linear,
    stack: FftStack,
    mel_dim: usize,
    pretrained_dim: usize,
}

impl SpeechEncoder {
    pub fn new(s: &mut Scope, cfg: &ModelConfig) -> Result<Self> {
        let d = cfg.hidden_dim;
        Ok(Self {
            prenet_mel: Linear::new(&mut s.sub("prenet_mel"), cfg.n_mels, d)?,
            prenet_pretrained: Linear::new(&mut s.sub("prenet_pretrained"), cfg.pretrained_dim, d)?,
            stack: FftStack::new(
                &mut s.sub("fft"),
                cfg.speech_encoder_blocks,
                d,
                cfg.n_heads,
                cfg.ffn_dim,
                cfg.ffn_kernel,
                cfg.dropout,
            )?,
            mel_dim: cfg.n_mels,
            pretrained_dim: cfg.pretrained_dim,
        })
    }

    pub fn input_dim(&self, kind: SourceKind) -> usize {
        match kind {
            SourceKind::Mel => self.mel_dim,
            SourceKind::Pretrained => self.pretrained_dim,
        }
    }

    /// `B x T x D` features -> `B x T x d` (H^s).
    pub fn forward(&self, features: &Tensor, kind: SourceKind, mask: &SeqMask, ctx: &mut ForwardCtx) -> Result<Tensor> {
        let (_, t, dim) = features.dims3()?;
        if dim != self.input_dim(kind) {
            return Err(Error::FeatureDimMismatch {
                expected: self.input_dim(kind),
                got: dim,
            });
        }
        let prenet = match kind {
            SourceKind::Mel => &self.prenet_mel,
            SourceKind::Pretrained => &self.prenet_pretrained,
        };
        let x = prenet.forward(&mask.apply(features)?)?;
        let d = x.dims3()?.2;
        let x = x.broadcast_add(&positional_encoding(t, d, x.dtype(), x.device())?)?;
        self.stack.forward(&x, mask, ctx)
    }
}

#[derive(Debug, Clone)]
pub struct Decoder {
    stack: FftStack,
    mel_proj: Linear,
    postnet: Vec<Conv1d>,
    dropout: f64,
}

impl Decoder {
    pub fn new(s: &mut Scope, cfg: &ModelConfig) -> Result<Self> {
        let d = cfg.hidden_dim;
        let mut postnet = Vec::with_capacity(cfg.postnet_layers);
        for i in 0..cfg.postnet_layers {
            let in_ch = if i == 0 { cfg.n_mels } else { cfg.postnet_dim };
            let out_ch = if i + 1 == cfg.postnet_layers { cfg.n_mels } else { cfg.postnet_dim };
            postnet.push(Conv1d::new(&mut s.sub(&format!("postnet.conv{i}")), in_ch, out_ch, cfg.postnet_kernel)?);
        }
        Ok(Self {
            stack: FftStack::new(
                &mut s.sub("fft"),
                cfg.decoder_blocks,
                d,
                cfg.n_heads,
                cfg.ffn_dim,
                cfg.ffn_kernel,
                cfg.dropout,
            )?,
            mel_proj: Linear::new(&mut s.sub("mel_proj"), d, cfg.n_mels)?,
            postnet,
            dropout: cfg.dropout,
        })
    }

    pub fn forward(&self, h: &Tensor, mask: &SeqMask, ctx: &mut ForwardCtx) -> Result<MelOutput> {
        let (_, t, d) = h.dims3()?;
        let x = h.broadcast_add(&positional_encoding(t, d, h.dtype(), h.device())?)?;
        let x = self.stack.forward(&x, mask, ctx)?;
        let before = mask.apply(&self.mel_proj.forward(&x)?)?;
        let frames = (&before + self.postnet_residual(&before, mask, ctx)?)?;
        Ok(MelOutput {
            before_postnet: before,
            frames,
        })
    }

    /// Convolutional refinement added on top of the projected mel.
    pub fn postnet_residual(&self, before: &Tensor, mask: &SeqMask, ctx: &mut ForwardCtx) -> Result<Tensor> {
        let mut r = before.clone();
        let last = self.postnet.len() - 1;
        for (i, conv) in self.postnet.iter().enumerate() {
            r = conv.forward(&mask.apply(&r)?)?;
            if i < last {
                r = ctx.dropout(&r.tanh()?, self.dropout)?;
            }
        }
        mask.apply(&r)
    }
}

/// Speaker identity: a row of the trained table, or an externally computed vector.
#[derive(Debug, Clone, PartialEq)]
pub enum SpeakerCondition {
    Id(u32),
    Vector(Vec<f32>),
}

#[derive(Debug, Clone)]
pub struct SpeakerTable {
    table: Embedding,
}

impl SpeakerTable {
    pub fn new(s: &mut Scope, cfg: &ModelConfig) -> Result<Self> {
        Ok(Self {
            table: Embedding::new(s, cfg.n_speakers, cfg.hidden_dim, Init::Normal(0.1))?,
        })
    }

    pub fn n_speakers(&self) -> usize {
        self.table.rows()
    }

    /// IDs -> `B x d`.
    pub fn forward(&self, ids: &[u32]) -> Result<Tensor> {
        if let Some(&id) = ids.iter().find(|&&id| id as usize >= self.n_speakers()) {
            return Err(Error::UnknownSpeaker {
                id,
                n_speakers: self.n_speakers(),
            });
        }
        let ids = Tensor::new(ids, self.table.table().device())?;
        self.table.forward(&ids)
    }

    pub fn table(&self) -> &Tensor {
        self.table.table()
    }
}

/// Repeats row `i` of `encoded` (`N x d`) `durations[i]` times.
pub fn length_regulate(encoded: &Tensor, durations: &[u32]) -> Result<Tensor> {
    let (n, _) = encoded.dims2()?;
    if durations.len() != n {
        return Err(Error::Shape(format!("{} durations for {n} phones", durations.len())));
    }
    let idx: Vec<u32> = durations
        .iter()
        .enumerate()
        .flat_map(|(i, &d)| std::iter::repeat(i as u32).take(d as usize))
        .collect();
    if idx.is_empty() {
        return Err(Error::EmptyRegulatedSequence);
    }
    let idx = Tensor::new(idx.as_slice(), encoded.device())?;
    Ok(encoded.index_select(&idx, 0)?)
}

/// Batched length regulation of `B x N x d` states; returns `B x T_max x d`
/// (zero-padded) and the per-item frame counts.
pub fn length_regulate_batch(
    encoded: &Tensor,
    durations: &Array2<u32>,
    phone_lengths: &[usize],
) -> Result<(Tensor, Vec<usize>)> {
    let (b, n, d) = encoded.dims3()?;
    if durations.dim() != (b, n) || phone_lengths.len() != b {
        return Err(Error::Shape(format!(
            "durations {:?} do not match encoded states [{b}, {n}, {d}]",
            durations.dim()
        )));
    }
    let lengths: Vec<usize> = (0..b)
        .map(|i| durations.row(i).iter().take(phone_lengths[i]).map(|&x| x as usize).sum())
        .collect();
    if lengths.iter().any(|&l| l == 0) {
        return Err(Error::EmptyRegulatedSequence);
    }
    let t_max = *lengths.iter().max().unwrap();
    let mut idx = Vec::with_capacity(b * t_max);
    for i in 0..b {
        let start = idx.len();
        for (p, &dur) in durations.row(i).iter().take(phone_lengths[i]).enumerate() {
            idx.extend(std::iter::repeat((i * n + p) as u32).take(dur as usize));
        }
        idx.resize(start + t_max, (i * n) as u32);
    }
    let flat = encoded.reshape((b * n, d))?;
    let idx = Tensor::new(idx.as_slice(), encoded.device())?;
    let out = flat.index_select(&idx, 0)?.reshape((b, t_max, d))?;
    let mask = SeqMask::from_lengths(&lengths, t_max, encoded.dtype(), encoded.device())?;
    Ok((mask.apply(&out)?, lengths))
}

/// A batch moved onto the model's device and dtype, with predictor targets
/// already transformed into their training domains.
pub struct BatchTensors {
    pub features: Tensor,
    pub frame_mask: SeqMask,
    pub mel: Tensor,
    pub pitch: Tensor,
    pub energy: Tensor,
    pub phone_ids: Tensor,
    pub phone_mask: SeqMask,
    pub log_durations: Tensor,
    pub durations: Array2<u32>,
    pub phone_lengths: Vec<usize>,
    pub speaker_ids: Vec<u32>,
}

impl BatchTensors {
    pub fn new(batch: &Batch, dtype: DType, device: &Device) -> Result<Self> {
        let to = |a: Array3<f32>| -> Result<Tensor> {
            let shape = a.dim();
            Ok(Tensor::from_vec(a.into_raw_vec_and_offset().0, shape, device)?.to_dtype(dtype)?)
        };
        let to2 = |a: Array2<f32>| -> Result<Tensor> {
            let shape = a.dim();
            Ok(Tensor::from_vec(a.into_raw_vec_and_offset().0, shape, device)?.to_dtype(dtype)?)
        };
        let frame_mask = SeqMask::from_lengths(&batch.feature_lengths, batch.max_frames(), dtype, device)?;
        let phone_mask = SeqMask::from_lengths(&batch.phone_lengths, batch.max_phones(), dtype, device)?;
        let pitch = frame_mask.apply_2d(&to2(batch.pitch.mapv(pitch_feature))?)?;
        let energy = frame_mask.apply_2d(&to2(batch.energy.mapv(energy_feature))?)?;
        let log_durations = phone_mask.apply_2d(&to2(batch.durations.mapv(duration_feature))?)?;
        let ids = batch.phone_ids.as_standard_layout().to_owned();
        Ok(Self {
            features: to(batch.features.as_standard_layout().to_owned())?,
            frame_mask,
            mel: to(batch.mel_targets.as_standard_layout().to_owned())?,
            pitch,
            energy,
            phone_ids: Tensor::from_vec(ids.into_raw_vec_and_offset().0, batch.phone_ids.dim(), device)?,
            phone_mask,
            log_durations,
            durations: batch.durations.clone(),
            phone_lengths: batch.phone_lengths.clone(),
            speaker_ids: batch.speaker_ids.to_vec(),
        })
    }
}

/// Outputs of the text (teacher) branch.
pub struct TextBranchOutput {
    /// Phone-level E^l, `B x N x d`.
    pub encoded: Tensor,
    /// Predicted `ln(d + 1)`, `B x N`.
    pub log_duration: Tensor,
    /// Length-regulated H^l (the alignment target H^t), `B x T x d`.
    pub regulated: Tensor,
    pub pitch_pred: Tensor,
    pub energy_pred: Tensor,
    pub mel: MelOutput,
}

/// Outputs of the speech branch.
pub struct SpeechBranchOutput {
    /// H^s, `B x T x d`.
    pub hidden: Tensor,
    pub pitch_pred: Tensor,
    pub energy_pred: Tensor,
    pub mel: MelOutput,
}

/// Prosody source for the variance adaptor.
#[derive(Clone, Copy)]
pub enum Prosody<'a> {
    Predicted,
    Targets { pitch: &'a Tensor, energy: &'a Tensor },
}

impl<'a> Prosody<'a> {
    fn parts(self) -> (Option<&'a Tensor>, Option<&'a Tensor>) {
        match self {
            Prosody::Predicted => (None, None),
            Prosody::Targets { pitch, energy } => (Some(pitch), Some(energy)),
        }
    }
}

#[derive(Debug, Clone)]
pub struct AccentModel {
    cfg: ModelConfig,
    pub text_encoder: TextEncoder,
    pub duration_predictor: VariancePredictor,
    pub variance: VarianceAdaptor,
    pub speakers: SpeakerTable,
    pub speech_encoder: SpeechEncoder,
    pub decoder: Decoder,
    dtype: DType,
    device: Device,
}

impl AccentModel {
    pub fn build(cfg: &ModelConfig, src: &mut dyn ParamSource) -> Result<Self> {
        cfg.validate()?;
        let (dtype, device) = (src.dtype(), src.device().clone());
        let mut root = Scope::new(src, ParamGroup::TextEncoder);
        let text_encoder = TextEncoder::new(&mut root.group(ParamGroup::TextEncoder), cfg)?;
        let duration_predictor = VariancePredictor::new(
            &mut root.group(ParamGroup::DurationPredictor),
            cfg.hidden_dim,
            cfg.variance_dim,
            cfg.variance_kernel,
            cfg.dropout,
        )?;
        let variance = VarianceAdaptor::new(&mut root.group(ParamGroup::PitchEnergyPredictor), cfg)?;
        let speakers = SpeakerTable::new(&mut root.group(ParamGroup::SpeakerEmbedding), cfg)?;
        let speech_encoder = SpeechEncoder::new(&mut root.group(ParamGroup::SpeechEncoder), cfg)?;
        let decoder = Decoder::new(&mut root.group(ParamGroup::Decoder), cfg)?;
        Ok(Self {
            cfg: cfg.clone(),
            text_encoder,
            duration_predictor,
            variance,
            speakers,
            speech_encoder,
            decoder,
            dtype,
            device,
        })
    }

    /// Fresh parameters from `seed`, with every group trainable.
    pub fn init(cfg: &ModelConfig, seed: u64, dtype: DType, device: &Device) -> Result<(Self, ParamStore)> {
        let mut src = InitSource::new(seed, dtype, device.clone());
        let model = Self::build(cfg, &mut src)?;
        Ok((model, src.finish()))
    }

    /// A model over existing parameters in which only `trainable` groups carry gradients.
    pub fn view(cfg: &ModelConfig, store: &ParamStore, trainable: &GroupSet) -> Result<Self> {
        Self::build(cfg, &mut ViewSource::new(store, trainable))
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn speaker_vectors(&self, speakers: &[SpeakerCondition]) -> Result<Tensor> {
        let rows = speakers
            .iter()
            .map(|s| match s {
                SpeakerCondition::Id(id) => self.speakers.forward(&[*id]),
                SpeakerCondition::Vector(v) => {
                    if v.len() != self.cfg.hidden_dim {
                        return Err(Error::Shape(format!(
                            "speaker vector has {} entries, model width is {}",
                            v.len(),
                            self.cfg.hidden_dim
                        )));
                    }
                    Ok(Tensor::from_vec(v.clone(), (1, v.len()), &self.device)?.to_dtype(self.dtype)?)
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Tensor::cat(&rows, 0)?)
    }

    /// Text encoder -> duration predictor -> length regulation with the
    /// given (teacher) durations -> variance adaptor -> decoder.
    pub fn text_branch(
        &self,
        batch: &BatchTensors,
        speaker: &Tensor,
        prosody: Prosody,
        ctx: &mut ForwardCtx,
    ) -> Result<TextBranchOutput> {
        let encoded = self.text_encoder.forward(&batch.phone_ids, &batch.phone_mask, ctx)?;
        let log_duration = self.duration_predictor.forward(&encoded, &batch.phone_mask, ctx)?;
        let (regulated, lengths) = length_regulate_batch(&encoded, &batch.durations, &batch.phone_lengths)?;
        if lengths != batch.frame_mask.lengths || regulated.dims()[1] != batch.frame_mask.max_len() {
            return Err(Error::Shape(format!(
                "regulated lengths {lengths:?} differ from frame lengths {:?}",
                batch.frame_mask.lengths
            )));
        }
        let (pitch, energy) = prosody.parts();
        let var = self
            .variance
            .forward(&regulated, speaker, &batch.frame_mask, pitch, energy, ctx)?;
        let mel = self.decoder.forward(&var.hidden, &batch.frame_mask, ctx)?;
        Ok(TextBranchOutput {
            encoded,
            log_duration,
            regulated,
            pitch_pred: var.pitch_pred,
            energy_pred: var.energy_pred,
            mel,
        })
    }

    /// Speech encoder -> variance adaptor -> decoder.
    pub fn speech_branch(
        &self,
        features: &Tensor,
        kind: SourceKind,
        mask: &SeqMask,
        speaker: &Tensor,
        prosody: Prosody,
        ctx: &mut ForwardCtx,
    ) -> Result<SpeechBranchOutput> {
        let hidden = self.speech_encoder.forward(features, kind, mask, ctx)?;
        let (pitch, energy) = prosody.parts();
        let var = self.variance.forward(&hidden, speaker, mask, pitch, energy, ctx)?;
        let mel = self.decoder.forward(&var.hidden, mask, ctx)?;
        Ok(SpeechBranchOutput {
            hidden,
            pitch_pred: var.pitch_pred,
            energy_pred: var.energy_pred,
            mel,
        })
    }
}

/// Copies item `i` of a `B x T x C` tensor, truncated to `len` rows, into an array.
pub fn tensor_item_to_array(t: &Tensor, i: usize, len: usize) -> Result<Array2<f32>> {
    let item = t.get(i)?.narrow(0, 0, len)?.to_dtype(DType::F32)?;
    let (rows, cols) = item.dims2()?;
    Ok(Array2::from_shape_vec((rows, cols), item.flatten_all()?.to_vec1()?)
        .map_err(|e| Error::Shape(e.to_string()))?)
}
