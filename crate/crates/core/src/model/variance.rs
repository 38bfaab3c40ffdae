use candle_core::{DType, Tensor};

use super::config::ModelConfig;
use super::layers::{Conv1d, Embedding, ForwardCtx, LayerNorm, Linear, SeqMask};
use super::params::{Init, Scope};
use crate::error::{Error, Result};

/// Predictor target for pitch: `ln(f0)` on voiced frames, 0 on unvoiced.
pub fn pitch_feature(f0_hz: f32) -> f32 {
    if f0_hz > 0.0 {
        f0_hz.ln()
    } else {
        0.0
    }
}

/// Predictor target for energy: `ln(1 + energy)`.
pub fn energy_feature(energy: f32) -> f32 {
    energy.max(0.0).ln_1p()
}

/// Predictor target for durations: `ln(d + 1)`, so zero durations are representable.
pub fn duration_feature(frames: u32) -> f32 {
    (frames as f32).ln_1p()
}

/// Inverse of [`duration_feature`], rounded and clamped at zero.
pub fn duration_from_prediction(log_pred: f32) -> u32 {
    (log_pred.exp() - 1.0).round().max(0.0) as u32
}

/// Maps scalars to bins by sorted edges. A value equal to an edge falls in
/// the lower bin: `bin(v) = #{edges e : e < v}`.
#[derive(Debug, Clone, PartialEq)]
pub struct Quantizer {
    edges: Vec<f32>,
}

impl Quantizer {
    pub fn new(edges: Vec<f32>) -> Self {
        debug_assert!(edges.windows(2).all(|w| w[0] <= w[1]));
        Self { edges }
    }

    /// Bin 0 holds unvoiced frames; the remaining bins split
    /// `[ln fmin, ln fmax]` evenly in log-Hz.
    pub fn pitch(cfg: &ModelConfig) -> Self {
        let (lo, hi) = (cfg.pitch_min_hz.ln(), cfg.pitch_max_hz.ln());
        let n = cfg.n_bins - 2;
        let mut edges = vec![0.5 * lo];
        edges.extend((0..n).map(|i| lo + (hi - lo) * i as f32 / (n - 1).max(1) as f32));
        Self::new(edges)
    }

    pub fn energy(cfg: &ModelConfig) -> Self {
        let hi = energy_feature(cfg.energy_max);
        let n = cfg.n_bins - 1;
        Self::new((0..n).map(|i| hi * i as f32 / (n - 1).max(1) as f32).collect())
    }

    pub fn n_bins(&self) -> usize {
        self.edges.len() + 1
    }

    pub fn bin(&self, v: f32) -> u32 {
        self.edges.partition_point(|&e| e < v) as u32
    }

    pub fn bins(&self, values: &Tensor) -> Result<Tensor> {
        let shape = values.shape().clone();
        let flat: Vec<f32> = values.flatten_all()?.to_dtype(DType::F32)?.to_vec1()?;
        let ids: Vec<u32> = flat.into_iter().map(|v| self.bin(v)).collect();
        Ok(Tensor::from_vec(ids, shape, values.device())?)
    }
}

/// Conv -> ReLU -> LayerNorm -> dropout (twice), then a scalar projection.
#[derive(Debug, Clone)]
pub struct VariancePredictor {
    conv1: Conv1d,
    norm1: LayerNorm,
    conv2: Conv1d,
    norm2: LayerNorm,
    proj: Linear,
    dropout: f64,
}

impl VariancePredictor {
    pub fn new(s: &mut Scope, in_dim: usize, width: usize, kernel: usize, dropout: f64) -> Result<Self> {
        Ok(Self {
            conv1: Conv1d::new(&mut s.sub("conv1"), in_dim, width, kernel)?,
            norm1: LayerNorm::new(&mut s.sub("norm1"), width)?,
            conv2: Conv1d::new(&mut s.sub("conv2"), width, width, kernel)?,
            norm2: LayerNorm::new(&mut s.sub("norm2"), width)?,
            proj: Linear::new(&mut s.sub("proj"), width, 1)?,
            dropout,
        })
    }

    /// `B x L x d` -> `B x L`, zero on padded positions.
    pub fn forward(&self, x: &Tensor, mask: &SeqMask, ctx: &mut ForwardCtx) -> Result<Tensor> {
        let h = self.conv1.forward(&mask.apply(x)?)?.relu()?;
        let h = ctx.dropout(&self.norm1.forward(&h)?, self.dropout)?;
        let h = self.conv2.forward(&mask.apply(&h)?)?.relu()?;
        let h = ctx.dropout(&self.norm2.forward(&h)?, self.dropout)?;
        mask.apply_2d(&self.proj.forward(&h)?.squeeze(2)?)
    }
}

pub struct VarianceOutput {
    pub hidden: Tensor,
    pub pitch_pred: Tensor,
    pub energy_pred: Tensor,
}

/// Speaker conditioning followed by pitch and energy enrichment.
#[derive(Debug, Clone)]
pub struct VarianceAdaptor {
    pitch: VariancePredictor,
    energy: VariancePredictor,
    pitch_embedding: Embedding,
    energy_embedding: Embedding,
    pitch_bins: Quantizer,
    energy_bins: Quantizer,
}

impl VarianceAdaptor {
    pub fn new(s: &mut Scope, cfg: &ModelConfig) -> Result<Self> {
        let d = cfg.hidden_dim;
        Ok(Self {
            pitch: VariancePredictor::new(&mut s.sub("pitch"), d, cfg.variance_dim, cfg.variance_kernel, cfg.dropout)?,
            energy: VariancePredictor::new(&mut s.sub("energy"), d, cfg.variance_dim, cfg.variance_kernel, cfg.dropout)?,
            pitch_embedding: Embedding::new(&mut s.sub("pitch_embedding"), cfg.n_bins, d, Init::Normal(0.1))?,
            energy_embedding: Embedding::new(&mut s.sub("energy_embedding"), cfg.n_bins, d, Init::Normal(0.1))?,
            pitch_bins: Quantizer::pitch(cfg),
            energy_bins: Quantizer::energy(cfg),
        })
    }

    /// `h`: `B x T x d` frame-level states; `speaker`: `B x d`.
    /// Targets (feature domain, `B x T`) drive the embeddings when given,
    /// otherwise the predictions do.
    pub fn forward(
        &self,
        h: &Tensor,
        speaker: &Tensor,
        mask: &SeqMask,
        pitch_target: Option<&Tensor>,
        energy_target: Option<&Tensor>,
        ctx: &mut ForwardCtx,
    ) -> Result<VarianceOutput> {
        let (b, t, _) = h.dims3()?;
        for (name, target) in [("pitch", pitch_target), ("energy", energy_target)] {
            if let Some(target) = target {
                if target.dims() != [b, t] {
                    return Err(Error::Shape(format!(
                        "{name} target has shape {:?}, expected [{b}, {t}]",
                        target.dims()
                    )));
                }
            }
        }
        let conditioned = mask.apply(&h.broadcast_add(&speaker.unsqueeze(1)?)?)?;
        let pitch_pred = self.pitch.forward(&conditioned, mask, ctx)?;
        let energy_pred = self.energy.forward(&conditioned, mask, ctx)?;
        let pitch_ids = self.pitch_bins.bins(pitch_target.unwrap_or(&pitch_pred))?;
        let energy_ids = self.energy_bins.bins(energy_target.unwrap_or(&energy_pred))?;
        let enriched = (conditioned
            + self.pitch_embedding.forward(&pitch_ids)?
            + self.energy_embedding.forward(&energy_ids)?)?;
        Ok(VarianceOutput {
            hidden: mask.apply(&enriched)?,
            pitch_pred,
            energy_pred,
        })
    }

    pub fn pitch_quantizer(&self) -> &Quantizer {
        &self.pitch_bins
    }

    pub fn energy_quantizer(&self) -> &Quantizer {
        &self.energy_bins
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn edge_values_go_to_lower_bin() {
        let q = Quantizer::new(vec![0.0, 1.0, 2.0]);
        assert_eq!(q.n_bins(), 4);
        assert_eq!(q.bin(-5.0), 0);
        assert_eq!(q.bin(0.0), 0);
        assert_eq!(q.bin(0.5), 1);
        assert_eq!(q.bin(1.0), 1);
        assert_eq!(q.bin(1.0001), 2);
        assert_eq!(q.bin(2.0), 2);
        assert_eq!(q.bin(9.0), 3);
    }

    #[test]
    fn pitch_bins_reserve_zero_for_unvoiced() {
        let cfg = ModelConfig::default();
        let q = Quantizer::pitch(&cfg);
        assert_eq!(q.n_bins(), cfg.n_bins);
        assert_eq!(q.bin(pitch_feature(0.0)), 0);
        assert_eq!(q.bin(pitch_feature(60.0)), 1);
        assert!(q.bin(pitch_feature(100.0)) > 1);
        assert_eq!(q.bin(pitch_feature(1000.0)) as usize, cfg.n_bins - 1);
        let e = Quantizer::energy(&cfg);
        assert_eq!(e.n_bins(), cfg.n_bins);
        assert_eq!(e.bin(energy_feature(0.0)), 0);
    }

    #[test]
    fn duration_transform_inverts() {
        assert_eq!(duration_feature(0), 0.0);
        for d in 0..500u32 {
            assert_eq!(duration_from_prediction(duration_feature(d)), d);
        }
        assert_eq!(duration_from_prediction(-3.0), 0);
    }
}
