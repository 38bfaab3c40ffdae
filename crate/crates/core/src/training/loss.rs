use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{BatchTensors, SeqMask, TextBranchOutput};

/// Scalar values of every loss term. Terms that do not apply to a stage are 0.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub mel: f64,
    pub duration: f64,
    pub pitch: f64,
    pub energy: f64,
    pub emb: f64,
    pub mel_star: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        [self.total, self.mel, self.duration, self.pitch, self.energy, self.emb, self.mel_star]
            .iter()
            .all(|v| v.is_finite())
    }

    /// Weighted average of breakdowns, e.g. over validation batches.
    pub fn weighted_mean(items: &[(LossBreakdown, f64)]) -> LossBreakdown {
        let w: f64 = items.iter().map(|(_, w)| w).sum();
        let mut out = LossBreakdown::default();
        if w == 0.0 {
            return out;
        }
        for (b, wi) in items {
            let f = wi / w;
            out.total += f * b.total;
            out.mel += f * b.mel;
            out.duration += f * b.duration;
            out.pitch += f * b.pitch;
            out.energy += f * b.energy;
            out.emb += f * b.emb;
            out.mel_star += f * b.mel_star;
        }
        out
    }
}

/// Loss terms as scalar tensors, so any of them can be differentiated.
#[derive(Debug, Clone)]
pub struct LossTerms {
    pub total: Tensor,
    pub mel: Tensor,
    pub duration: Tensor,
    pub pitch: Tensor,
    pub energy: Tensor,
    pub emb: Tensor,
    pub mel_star: Tensor,
}

impl LossTerms {
    fn zeros_like(reference: &Tensor) -> Result<Self> {
        let z = Tensor::zeros((), reference.dtype(), reference.device())?;
        Ok(Self {
            total: z.clone(),
            mel: z.clone(),
            duration: z.clone(),
            pitch: z.clone(),
            energy: z.clone(),
            emb: z.clone(),
            mel_star: z,
        })
    }

    pub fn breakdown(&self) -> Result<LossBreakdown> {
        let v = |t: &Tensor| -> Result<f64> { Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?) };
        Ok(LossBreakdown {
            total: v(&self.total)?,
            mel: v(&self.mel)?,
            duration: v(&self.duration)?,
            pitch: v(&self.pitch)?,
            energy: v(&self.energy)?,
            emb: v(&self.emb)?,
            mel_star: v(&self.mel_star)?,
        })
    }

    /// Looks a term up by its log name.
    pub fn term(&self, name: &str) -> Option<&Tensor> {
        Some(match name {
            "total" => &self.total,
            "mel" => &self.mel,
            "duration" => &self.duration,
            "pitch" => &self.pitch,
            "energy" => &self.energy,
            "emb" => &self.emb,
            "mel_star" => &self.mel_star,
            _ => return None,
        })
    }
}

pub const TERM_NAMES: [&str; 7] = ["total", "mel", "duration", "pitch", "energy", "emb", "mel_star"];

fn same_dims(what: &str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::Shape(format!(
            "{what}: prediction {:?} and target {:?} differ",
            a.dims(),
            b.dims()
        )));
    }
    Ok(())
}

fn check_mask(what: &str, x: &Tensor, mask: &SeqMask) -> Result<()> {
    let d = x.dims();
    if d.len() < 2 || d[0] != mask.batch() || d[1] != mask.max_len() {
        return Err(Error::Shape(format!(
            "{what}: shape {d:?} does not match mask [{}, {}]",
            mask.batch(),
            mask.max_len()
        )));
    }
    if mask.valid_count() == 0 {
        return Err(Error::Shape(format!("{what}: mask has no valid positions")));
    }
    Ok(())
}

/// Mean absolute error over valid frames and all channels of `B x T x C` inputs.
pub fn masked_l1(pred: &Tensor, target: &Tensor, mask: &SeqMask) -> Result<Tensor> {
    same_dims("l1", pred, target)?;
    check_mask("l1", pred, mask)?;
    let channels = pred.dims()[2];
    let diff = mask.apply(&(pred - target)?)?.abs()?;
    Ok((diff.sum_all()? / (mask.valid_count() * channels) as f64)?)
}

/// Mean squared error over valid positions of `B x L` inputs.
pub fn masked_mse(pred: &Tensor, target: &Tensor, mask: &SeqMask) -> Result<Tensor> {
    same_dims("mse", pred, target)?;
    check_mask("mse", pred, mask)?;
    let diff = mask.apply_2d(&(pred - target)?)?;
    Ok((diff.sqr()?.sum_all()? / mask.valid_count() as f64)?)
}

/// Mean over valid frames of the per-frame Euclidean distance between
/// `B x T x d` sequences. `target` is treated as a constant.
///
/// The norm is computed as `s / sqrt(max(s, tiny))` with `s` the squared
/// distance: identical to `sqrt(s)` away from zero, exactly zero at zero, and
/// with a finite gradient there.
pub fn masked_frame_distance(pred: &Tensor, target: &Tensor, mask: &SeqMask) -> Result<Tensor> {
    same_dims("embedding distance", pred, target)?;
    check_mask("embedding distance", pred, mask)?;
    let diff = mask.apply(&(pred - target.detach())?)?;
    let sq = diff.sqr()?.sum_keepdim(2)?;
    let tiny = Tensor::full(1e-24f64, sq.shape(), sq.device())?.to_dtype(sq.dtype())?;
    let norm = (&sq / sq.maximum(&tiny)?.sqrt()?)?;
    Ok((norm.sum_all()? / mask.valid_count() as f64)?)
}

/// Everything the text-to-speech objective compares.
pub struct Stage1Inputs<'a> {
    pub mel_before: &'a Tensor,
    pub mel_after: &'a Tensor,
    pub mel_target: &'a Tensor,
    pub frame_mask: &'a SeqMask,
    pub log_duration: &'a Tensor,
    pub log_duration_target: &'a Tensor,
    pub phone_mask: &'a SeqMask,
    pub pitch: &'a Tensor,
    pub pitch_target: &'a Tensor,
    pub energy: &'a Tensor,
    pub energy_target: &'a Tensor,
}

impl<'a> Stage1Inputs<'a> {
    pub fn from_branch(out: &'a TextBranchOutput, batch: &'a BatchTensors) -> Self {
        Self {
            mel_before: &out.mel.before_postnet,
            mel_after: &out.mel.frames,
            mel_target: &batch.mel,
            frame_mask: &batch.frame_mask,
            log_duration: &out.log_duration,
            log_duration_target: &batch.log_durations,
            phone_mask: &batch.phone_mask,
            pitch: &out.pitch_pred,
            pitch_target: &batch.pitch,
            energy: &out.energy_pred,
            energy_target: &batch.energy,
        }
    }
}

/// Text-to-speech training: mel reconstruction (before and after the
/// PostNet) plus the three predictor losses, all unweighted.
pub fn loss_stage1(x: &Stage1Inputs) -> Result<LossTerms> {
    let mel = (masked_l1(x.mel_before, x.mel_target, x.frame_mask)?
        + masked_l1(x.mel_after, x.mel_target, x.frame_mask)?)?;
    let duration = masked_mse(x.log_duration, x.log_duration_target, x.phone_mask)?;
    let pitch = masked_mse(x.pitch, x.pitch_target, x.frame_mask)?;
    let energy = masked_mse(x.energy, x.energy_target, x.frame_mask)?;
    let total = (((&mel + &duration)? + &pitch)? + &energy)?;
    Ok(LossTerms {
        total,
        mel,
        duration,
        pitch,
        energy,
        ..LossTerms::zeros_like(x.mel_target)?
    })
}

/// Alignment of speech-encoder states `h_s` to teacher states `h_t`.
pub fn loss_stage2(h_s: &Tensor, h_t: &Tensor, frame_mask: &SeqMask) -> Result<LossTerms> {
    let emb = masked_frame_distance(h_s, h_t, frame_mask)?;
    Ok(LossTerms {
        total: emb.clone(),
        emb,
        ..LossTerms::zeros_like(h_s)?
    })
}

/// Weights and switches of the fine-tuning objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stage3Weights {
    pub lambda1: f64,
    pub lambda2: f64,
    /// When false the decoded-mel term is dropped (reported as 0).
    pub use_mel_star: bool,
}

/// Fine-tuning: weighted alignment distance plus L1 between the speech
/// branch's mel `m_s` and the teacher mel `m_t` (a constant).
pub fn loss_stage3(
    h_s: &Tensor,
    h_t: &Tensor,
    m_s: &Tensor,
    m_t: &Tensor,
    weights: Stage3Weights,
    frame_mask: &SeqMask,
) -> Result<LossTerms> {
    let emb = masked_frame_distance(h_s, h_t, frame_mask)?;
    let zeros = LossTerms::zeros_like(h_s)?;
    let mel_star = if weights.use_mel_star {
        masked_l1(m_s, &m_t.detach(), frame_mask)?
    } else {
        same_dims("mel*", m_s, m_t)?;
        zeros.mel_star.clone()
    };
    let total = ((&emb * weights.lambda1)? + (&mel_star * weights.lambda2)?)?;
    Ok(LossTerms {
        total,
        emb,
        mel_star,
        ..zeros
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    fn t3(v: &[f64], shape: (usize, usize, usize)) -> Tensor {
        Tensor::from_vec(v.to_vec(), shape, &Device::Cpu).unwrap()
    }

    fn mask(lengths: &[usize], t: usize) -> SeqMask {
        SeqMask::from_lengths(lengths, t, DType::F64, &Device::Cpu).unwrap()
    }

    fn scalar(t: &Tensor) -> f64 {
        t.to_scalar::<f64>().unwrap()
    }

    #[test]
    fn pythagorean_frame() {
        let m = mask(&[1], 1);
        let d = loss_stage2(&t3(&[0.0, 0.0], (1, 1, 2)), &t3(&[3.0, 4.0], (1, 1, 2)), &m).unwrap();
        assert_eq!(scalar(&d.emb), 5.0);
        assert_eq!(scalar(&d.total), 5.0);
    }

    #[test]
    fn mean_of_frame_norms() {
        let m = mask(&[2], 2);
        let hs = t3(&[0.0, 0.0, 1.0, 1.0], (1, 2, 2));
        let ht = t3(&[3.0, 4.0, 1.0, 1.0], (1, 2, 2));
        assert_eq!(scalar(&loss_stage2(&hs, &ht, &m).unwrap().emb), 2.5);
    }

    #[test]
    fn padded_frames_do_not_count() {
        let m = mask(&[1], 2);
        let hs = t3(&[0.0, 0.0, 100.0, 7.0], (1, 2, 2));
        let ht = t3(&[3.0, 4.0, -9.0, 2.0], (1, 2, 2));
        assert_eq!(scalar(&loss_stage2(&hs, &ht, &m).unwrap().emb), 5.0);
    }

    #[test]
    fn equal_sequences_have_zero_loss_and_finite_gradient() {
        let m = mask(&[3], 3);
        let v = candle_core::Var::from_tensor(&t3(&[0.5; 6], (1, 3, 2))).unwrap();
        let l = loss_stage2(v.as_tensor(), &t3(&[0.5; 6], (1, 3, 2)), &m).unwrap();
        assert_eq!(scalar(&l.total), 0.0);
        let g = l.total.backward().unwrap();
        let g: Vec<f64> = g.get(&v).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        assert!(g.iter().all(|x| *x == 0.0));
    }

    #[test]
    fn duration_mse_cases() {
        let m = SeqMask::from_lengths(&[2], 2, DType::F64, &Device::Cpu).unwrap();
        let p = Tensor::new(&[[0.0f64, 0.0]], &Device::Cpu).unwrap();
        assert_eq!(scalar(&masked_mse(&p, &p, &m).unwrap()), 0.0);
        let t = Tensor::new(&[[1.0f64, 1.0]], &Device::Cpu).unwrap();
        assert_eq!(scalar(&masked_mse(&p, &t, &m).unwrap()), 1.0);
    }

    #[test]
    fn stage3_weighting() {
        let m = mask(&[1], 1);
        // emb = 2 (distance of (0,2) from 0), mel* = 3 (L1 of a single channel)
        let hs = t3(&[0.0, 0.0], (1, 1, 2));
        let ht = t3(&[0.0, 2.0], (1, 1, 2));
        let ms = t3(&[0.0], (1, 1, 1));
        let mt = t3(&[3.0], (1, 1, 1));
        let w = Stage3Weights {
            lambda1: 1.0,
            lambda2: 1.0,
            use_mel_star: true,
        };
        let l = loss_stage3(&hs, &ht, &ms, &mt, w, &m).unwrap();
        assert_eq!((scalar(&l.emb), scalar(&l.mel_star), scalar(&l.total)), (2.0, 3.0, 5.0));
        let l0 = loss_stage3(&hs, &ht, &ms, &mt, Stage3Weights { lambda1: 0.0, ..w }, &m).unwrap();
        assert_eq!(scalar(&l0.total), scalar(&l0.mel_star) * w.lambda2);
        let off = loss_stage3(&hs, &ht, &ms, &mt, Stage3Weights { use_mel_star: false, ..w }, &m).unwrap();
        assert_eq!((scalar(&off.mel_star), scalar(&off.total)), (0.0, 2.0));
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let m = mask(&[2], 2);
        let a = t3(&[0.0; 4], (1, 2, 2));
        let b = t3(&[0.0; 6], (1, 3, 2));
        assert!(loss_stage2(&a, &b, &m).is_err());
        assert!(masked_l1(&b, &b, &m).is_err());
    }
}
