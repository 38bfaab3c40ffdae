use std::path::Path;

use ndarray::Array2;

use super::{AcousticFeatures, SourceKind};
use crate::error::{Error, Result};
use crate::tensor_file;

/// Linear interpolation along time to exactly `target_t` rows.
///
/// Uses half-sample alignment (row `i` of the output sits at source position
/// `(i + 0.5) * T'/target_t - 0.5`, clamped to the ends), so that integer
/// up- and downsampling factors pass through the original rows exactly.
pub fn resample_time(frames: &Array2<f32>, target_t: usize) -> Array2<f32> {
    let (src_t, dim) = frames.dim();
    assert!(src_t > 0 && target_t > 0, "resample_time needs non-empty input and target");
    if src_t == target_t {
        return frames.clone();
    }
    let scale = src_t as f64 / target_t as f64;
    let mut out = Array2::<f32>::zeros((target_t, dim));
    for (i, mut row) in out.outer_iter_mut().enumerate() {
        let pos = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (src_t - 1) as f64);
        let lo = pos.floor() as usize;
        let hi = (lo + 1).min(src_t - 1);
        let w = pos - lo as f64;
        for (d, v) in row.iter_mut().enumerate() {
            let a = frames[[lo, d]] as f64;
            let b = frames[[hi, d]] as f64;
            *v = (a + (b - a) * w) as f32;
        }
    }
    out
}

/// Loads a `T' x D` matrix written by an external pretrained encoder and
/// resamples it onto the mel frame grid.
pub fn load_pretrained_features(
    path: &Path,
    target_t: usize,
    expected_dim: usize,
    mel_frame_rate_hz: f32,
) -> Result<AcousticFeatures> {
    if target_t == 0 {
        return Err(Error::Shape("target frame count must be at least 1".into()));
    }
    let stored = tensor_file::read_matrix(path)?;
    if stored.nrows() == 0 {
        return Err(Error::BadFeatureFile {
            path: path.to_path_buf(),
            reason: "no frames".into(),
        });
    }
    if stored.ncols() != expected_dim {
        return Err(Error::FeatureDimMismatch {
            expected: expected_dim,
            got: stored.ncols(),
        });
    }
    if stored.iter().any(|v| !v.is_finite()) {
        return Err(Error::BadFeatureFile {
            path: path.to_path_buf(),
            reason: "non-finite values".into(),
        });
    }
    AcousticFeatures::new(resample_time(&stored, target_t), SourceKind::Pretrained, mel_frame_rate_hz)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};

    #[test]
    fn identity_when_lengths_match() {
        let m = array![[1.0f32, 2.0], [3.0, 4.0], [5.0, 6.0]];
        assert_eq!(resample_time(&m, 3), m);
    }

    #[test]
    fn midpoint() {
        let m = array![[0.0f32], [10.0]];
        assert_eq!(resample_time(&m, 3), array![[0.0f32], [5.0], [10.0]]);
    }

    #[test]
    fn up_then_down_passes_through_knots() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let m = Array2::from_shape_fn((7, 4), |_| rng.gen_range(-1.0f32..1.0));
        let back = resample_time(&resample_time(&m, 21), 7);
        let dev = (&back - &m).iter().fold(0f32, |a, v| a.max(v.abs()));
        assert!(dev < 1e-6, "max deviation {dev}");
    }

    #[test]
    fn file_loading_checks() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.acft");
        tensor_file::write_matrix(&p, &array![[0.0f32, 1.0], [10.0, 11.0]]).unwrap();
        let f = load_pretrained_features(&p, 3, 2, 80.0).unwrap();
        assert_eq!(f.source_kind, SourceKind::Pretrained);
        assert_eq!(f.frames, array![[0.0f32, 1.0], [5.0, 6.0], [10.0, 11.0]]);
        assert!(matches!(
            load_pretrained_features(&p, 3, 5, 80.0),
            Err(Error::FeatureDimMismatch { expected: 5, got: 2 })
        ));
        std::fs::write(&p, b"garbage").unwrap();
        let err = load_pretrained_features(&p, 3, 2, 80.0).unwrap_err();
        assert!(err.to_string().contains("bad feature file"));
    }
}
