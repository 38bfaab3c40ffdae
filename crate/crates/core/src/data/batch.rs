use ndarray::{s, Array1, Array2, Array3};

use crate::error::{Error, Result};

/// A fully loaded training/evaluation utterance.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub utt_id: String,
    pub speaker_id: u32,
    /// Speech-encoder input, `T x D`.
    pub features: Array2<f32>,
    /// Ground-truth log-mel, `T x n_mels`.
    pub mel: Array2<f32>,
    pub phone_ids: Vec<u32>,
    pub durations: Vec<u32>,
    pub pitch: Vec<f32>,
    pub energy: Vec<f32>,
}

impl Example {
    pub fn num_frames(&self) -> usize {
        self.features.nrows()
    }
}

/// Right-padded batch. Masks are true on valid positions.
#[derive(Debug, Clone)]
pub struct Batch {
    pub utt_ids: Vec<String>,
    pub features: Array3<f32>,
    pub feature_lengths: Vec<usize>,
    pub phone_ids: Array2<u32>,
    pub phone_lengths: Vec<usize>,
    pub durations: Array2<u32>,
    pub mel_targets: Array3<f32>,
    pub pitch: Array2<f32>,
    pub energy: Array2<f32>,
    pub speaker_ids: Array1<u32>,
    pub frame_mask: Array2<bool>,
    pub phone_mask: Array2<bool>,
}

impl Batch {
    pub fn size(&self) -> usize {
        self.feature_lengths.len()
    }

    pub fn max_frames(&self) -> usize {
        self.features.dim().1
    }

    pub fn max_phones(&self) -> usize {
        self.phone_ids.dim().1
    }
}

pub fn make_batch(examples: &[&Example], pad_value: f32) -> Result<Batch> {
    let first = examples.first().ok_or_else(|| Error::Batch("empty batch".into()))?;
    let d = first.features.ncols();
    let n_mels = first.mel.ncols();
    for e in examples {
        if e.features.ncols() != d {
            return Err(Error::Batch(format!(
                "{}: feature dim {} differs from {d}",
                e.utt_id,
                e.features.ncols()
            )));
        }
        if e.mel.ncols() != n_mels {
            return Err(Error::Batch(format!("{}: mel dim differs", e.utt_id)));
        }
        let t = e.num_frames();
        if e.mel.nrows() != t || e.pitch.len() != t || e.energy.len() != t {
            return Err(Error::Batch(format!(
                "{}: features/mel/pitch/energy lengths {}/{}/{}/{} disagree",
                e.utt_id,
                t,
                e.mel.nrows(),
                e.pitch.len(),
                e.energy.len()
            )));
        }
        if e.durations.len() != e.phone_ids.len() {
            return Err(Error::Batch(format!("{}: durations do not match phones", e.utt_id)));
        }
    }
    let b = examples.len();
    let t_max = examples.iter().map(|e| e.num_frames()).max().unwrap();
    let n_max = examples.iter().map(|e| e.phone_ids.len()).max().unwrap();

    let mut batch = Batch {
        utt_ids: examples.iter().map(|e| e.utt_id.clone()).collect(),
        features: Array3::from_elem((b, t_max, d), pad_value),
        feature_lengths: examples.iter().map(|e| e.num_frames()).collect(),
        phone_ids: Array2::zeros((b, n_max)),
        phone_lengths: examples.iter().map(|e| e.phone_ids.len()).collect(),
        durations: Array2::zeros((b, n_max)),
        mel_targets: Array3::from_elem((b, t_max, n_mels), pad_value),
        pitch: Array2::from_elem((b, t_max), pad_value),
        energy: Array2::from_elem((b, t_max), pad_value),
        speaker_ids: examples.iter().map(|e| e.speaker_id).collect(),
        frame_mask: Array2::from_elem((b, t_max), false),
        phone_mask: Array2::from_elem((b, n_max), false),
    };
    for (i, e) in examples.iter().enumerate() {
        let t = e.num_frames();
        let n = e.phone_ids.len();
        batch.features.slice_mut(s![i, ..t, ..]).assign(&e.features);
        batch.mel_targets.slice_mut(s![i, ..t, ..]).assign(&e.mel);
        batch.pitch.slice_mut(s![i, ..t]).assign(&Array1::from(e.pitch.clone()));
        batch.energy.slice_mut(s![i, ..t]).assign(&Array1::from(e.energy.clone()));
        batch.frame_mask.slice_mut(s![i, ..t]).fill(true);
        batch.phone_ids.slice_mut(s![i, ..n]).assign(&Array1::from(e.phone_ids.clone()));
        batch.durations.slice_mut(s![i, ..n]).assign(&Array1::from(e.durations.clone()));
        batch.phone_mask.slice_mut(s![i, ..n]).fill(true);
    }
    Ok(batch)
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn example(id: &str, t: usize, n: usize) -> Example {
        Example {
            utt_id: id.into(),
            speaker_id: 1,
            features: Array2::from_elem((t, 3), 1.0),
            mel: Array2::from_elem((t, 4), -1.0),
            phone_ids: (0..n as u32).map(|i| i + 3).collect(),
            durations: vec![1; n],
            pitch: vec![100.0; t],
            energy: vec![2.0; t],
        }
    }

    #[test]
    fn single_record() {
        let e = example("a", 4, 2);
        let b = make_batch(&[&e], 0.0).unwrap();
        assert_eq!(b.max_frames(), 4);
        assert!(b.frame_mask.iter().all(|&m| m));
        assert!(b.phone_mask.iter().all(|&m| m));
    }

    #[test]
    fn padding_and_masks() {
        let (a, c) = (example("a", 3, 2), example("c", 5, 4));
        let b = make_batch(&[&a, &c], 0.0).unwrap();
        assert_eq!(b.max_frames(), 5);
        assert_eq!(b.frame_mask.row(0).to_vec(), [true, true, true, false, false]);
        assert_eq!(b.phone_mask.row(0).to_vec(), [true, true, false, false]);
        assert_eq!(b.features[[0, 4, 1]], 0.0);
        assert_eq!(b.mel_targets[[0, 3, 0]], 0.0);
        assert_eq!(b.pitch[[0, 3]], 0.0);
        assert_eq!(b.phone_ids[[0, 2]], 0);
        assert_eq!(b.frame_mask.iter().filter(|&&m| m).count(), b.feature_lengths.iter().sum::<usize>());
    }

    #[test]
    fn rejects_mismatched_dims() {
        let a = example("a", 3, 2);
        let mut c = example("c", 3, 2);
        c.features = Array2::zeros((3, 5));
        assert!(make_batch(&[&a, &c], 0.0).is_err());
        let mut d = example("d", 3, 2);
        d.pitch.pop();
        assert!(make_batch(&[&d], 0.0).is_err());
        assert!(make_batch(&[], 0.0).is_err());
    }
}
