use super::mel::{centered_signal, check_length, frame_count, stft_magnitude};
use super::{MelConfig, Waveform};
use crate::error::Result;

pub const F0_MIN_HZ: f32 = 60.0;
pub const F0_MAX_HZ: f32 = 400.0;

/// Normalized autocorrelation peak needed to call a frame voiced.
const VOICING_THRESHOLD: f64 = 0.3;

/// Frame-level pitch (Hz, 0 = unvoiced) and energy, aligned with the mel frames.
#[derive(Debug, Clone, PartialEq)]
pub struct ProsodyContours {
    pub pitch: Vec<f32>,
    pub energy: Vec<f32>,
}

impl ProsodyContours {
    pub fn len(&self) -> usize {
        self.pitch.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pitch.is_empty()
    }
}

pub fn extract_prosody(wave: &Waveform, cfg: &MelConfig) -> Result<ProsodyContours> {
    let mag = stft_magnitude(wave, cfg)?;
    let energy = mag
        .outer_iter()
        .map(|row| row.iter().map(|m| m * m).sum::<f32>().sqrt())
        .collect();
    let pitch = pitch_track(wave, cfg)?;
    debug_assert_eq!(pitch.len(), mag.nrows());
    Ok(ProsodyContours { pitch, energy })
}

fn pitch_track(wave: &Waveform, cfg: &MelConfig) -> Result<Vec<f32>> {
    check_length(wave, cfg)?;
    let padded = centered_signal(wave, cfg);
    let sr = wave.sample_rate_hz() as f64;
    let n = cfg.win_length;
    let min_lag = ((sr / F0_MAX_HZ as f64).floor() as usize).max(2);
    let max_lag = ((sr / F0_MIN_HZ as f64).ceil() as usize).min(n - 2);
    let offset = cfg.n_fft / 2 - n / 2;
    let frames = frame_count(wave.len(), cfg.hop_length);

    let mut out = Vec::with_capacity(frames);
    let mut seg = vec![0f64; n];
    let mut acf = vec![0f64; max_lag + 2];
    for t in 0..frames {
        let start = t * cfg.hop_length + offset;
        let mean = padded[start..start + n].iter().map(|&v| v as f64).sum::<f64>() / n as f64;
        for (s, &v) in seg.iter_mut().zip(&padded[start..start + n]) {
            *s = v as f64 - mean;
        }
        let r0: f64 = seg.iter().map(|v| v * v).sum();
        if r0 <= 1e-9 * n as f64 || min_lag + 1 >= max_lag {
            out.push(0.0);
            continue;
        }
        for lag in (min_lag - 1)..=(max_lag + 1).min(n - 1) {
            acf[lag] = seg[..n - lag].iter().zip(&seg[lag..]).map(|(a, b)| a * b).sum::<f64>() / r0;
        }
        // best interior local maximum of the biased autocorrelation
        let best = (min_lag..=max_lag)
            .filter(|&l| acf[l] >= acf[l - 1] && acf[l] >= acf[l + 1])
            .max_by(|&a, &b| acf[a].total_cmp(&acf[b]));
        let Some(lag) = best else {
            out.push(0.0);
            continue;
        };
        if acf[lag] < VOICING_THRESHOLD {
            out.push(0.0);
            continue;
        }
        let (a, b, c) = (acf[lag - 1], acf[lag], acf[lag + 1]);
        let denom = a - 2.0 * b + c;
        let shift = if denom.abs() > 1e-12 { 0.5 * (a - c) / denom } else { 0.0 };
        let f0 = (sr / (lag as f64 + shift.clamp(-0.5, 0.5))) as f32;
        out.push(if (F0_MIN_HZ..=F0_MAX_HZ).contains(&f0) { f0 } else { 0.0 });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::compute_mel;

    fn sawtooth(freq: f64, secs: f64, sr: u32) -> Waveform {
        let n = (secs * sr as f64) as usize;
        let s = (0..n)
            .map(|i| {
                let phase = (freq * i as f64 / sr as f64).fract();
                (0.6 * (2.0 * phase - 1.0)) as f32
            })
            .collect();
        Waveform::new(s, sr).unwrap()
    }

    fn median(mut v: Vec<f32>) -> f32 {
        v.sort_by(f32::total_cmp);
        v[v.len() / 2]
    }

    #[test]
    fn sawtooth_pitch_is_recovered() {
        let cfg = MelConfig::default();
        for f in [200.0, 110.0, 330.0] {
            let p = extract_prosody(&sawtooth(f, 1.0, 24_000), &cfg).unwrap();
            let voiced: Vec<f32> = p.pitch.iter().copied().filter(|&v| v > 0.0).collect();
            assert!(voiced.len() > p.len() / 2);
            let med = median(voiced);
            assert!((med - f as f32).abs() <= 5.0, "{f} Hz sawtooth gave median {med}");
        }
    }

    #[test]
    fn silence_is_unvoiced_with_zero_energy() {
        let cfg = MelConfig::default();
        let p = extract_prosody(&Waveform::new(vec![0.0; 12_000], 24_000).unwrap(), &cfg).unwrap();
        assert!(p.pitch.iter().all(|&v| v == 0.0));
        assert!(p.energy.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn doubling_amplitude_doubles_energy_only() {
        let cfg = MelConfig::default();
        let w = sawtooth(200.0, 0.5, 24_000);
        let a = extract_prosody(&w, &cfg).unwrap();
        let b = extract_prosody(&w.scaled(2.0), &cfg).unwrap();
        for (x, y) in a.energy.iter().zip(&b.energy) {
            assert!((2.0 * x - y).abs() <= 1e-5 * y.abs().max(1.0));
        }
        for (x, y) in a.pitch.iter().zip(&b.pitch) {
            if *x > 0.0 {
                assert_eq!(x, y);
            }
        }
    }

    #[test]
    fn lengths_match_mel() {
        let cfg = MelConfig::default();
        for secs in [0.1, 0.37, 1.01] {
            let w = sawtooth(150.0, secs, 24_000);
            let p = extract_prosody(&w, &cfg).unwrap();
            let m = compute_mel(&w, &cfg).unwrap();
            assert_eq!(p.pitch.len(), m.num_frames());
            assert_eq!(p.energy.len(), m.num_frames());
        }
    }
}
