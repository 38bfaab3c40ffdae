use std::path::Path;

use super::PhoneInventory;
use crate::error::{Error, Result};

/// Largest correction applied to the final phone to reconcile aligner output
/// with the mel frame count.
pub const MAX_FINAL_PHONE_ADJUST: usize = 2;

/// Reads whitespace-separated non-negative integers, one per phone.
pub fn read_durations(path: &Path) -> Result<Vec<u32>> {
    let src = std::fs::read_to_string(path)?;
    src.split_whitespace()
        .map(|tok| {
            tok.parse::<u32>().map_err(|e| Error::BadDurations {
                path: path.to_path_buf(),
                reason: format!("{tok:?}: {e}"),
            })
        })
        .collect()
}

/// Fits aligner durations to a phone sequence and a mel frame count.
///
/// Aligners usually do not emit entries for word-boundary markers; when the
/// list is exactly that much shorter, zeros are inserted at the boundaries.
/// The last phone absorbs a mismatch of up to [`MAX_FINAL_PHONE_ADJUST`] frames.
pub fn align_durations(utt: &str, phone_ids: &[u32], raw: &[u32], mel_frames: usize) -> Result<Vec<u32>> {
    let boundaries = phone_ids.iter().filter(|&&p| p == PhoneInventory::BOUNDARY).count();
    let mut durations = if raw.len() == phone_ids.len() {
        raw.to_vec()
    } else if boundaries > 0 && raw.len() + boundaries == phone_ids.len() {
        let mut it = raw.iter();
        phone_ids
            .iter()
            .map(|&p| if p == PhoneInventory::BOUNDARY { 0 } else { *it.next().unwrap() })
            .collect()
    } else {
        return Err(Error::Shape(format!(
            "{utt}: {} durations for {} phones",
            raw.len(),
            phone_ids.len()
        )));
    };
    let sum: usize = durations.iter().map(|&d| d as usize).sum();
    let mismatch = sum.abs_diff(mel_frames);
    let Some(last) = durations.last_mut() else {
        return Err(Error::Shape(format!("{utt}: no phones to align")));
    };
    if mismatch > MAX_FINAL_PHONE_ADJUST || (sum > mel_frames && (*last as usize) < mismatch) {
        return Err(Error::DurationMismatch {
            utt: utt.to_owned(),
            sum,
            frames: mel_frames,
        });
    }
    if sum > mel_frames {
        *last -= mismatch as u32;
    } else {
        *last += mismatch as u32;
    }
    Ok(durations)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_match_is_untouched() {
        assert_eq!(align_durations("u", &[5, 6, 7], &[2, 3, 4], 9).unwrap(), vec![2, 3, 4]);
    }

    #[test]
    fn final_phone_absorbs_small_mismatch() {
        assert_eq!(align_durations("u", &[5, 6], &[2, 3], 7).unwrap(), vec![2, 5]);
        assert_eq!(align_durations("u", &[5, 6], &[2, 3], 3).unwrap(), vec![2, 1]);
        assert!(matches!(
            align_durations("u", &[5, 6], &[2, 3], 8),
            Err(Error::DurationMismatch { sum: 5, frames: 8, .. })
        ));
    }

    #[test]
    fn boundary_zeros_are_inserted() {
        let ids = [5, PhoneInventory::BOUNDARY, 6];
        assert_eq!(align_durations("u", &ids, &[4, 4], 8).unwrap(), vec![4, 0, 4]);
        assert!(align_durations("u", &ids, &[4], 8).is_err());
    }

    #[test]
    fn reads_integer_lists() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.txt");
        std::fs::write(&p, "3 0\n 7\n").unwrap();
        assert_eq!(read_durations(&p).unwrap(), vec![3, 0, 7]);
        std::fs::write(&p, "3 -1").unwrap();
        assert!(matches!(read_durations(&p), Err(Error::BadDurations { .. })));
    }
}
