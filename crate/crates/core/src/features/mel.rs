use ndarray::{Array2, Axis};
use rustfft::{num_complex::Complex, FftPlanner};

use super::{AcousticFeatures, MelConfig, SourceKind, Waveform};
use crate::error::{Error, Result};

/// Number of STFT frames for `len` samples with centered (reflect-padded)
/// framing: `1 + floor(len / hop)`.
pub fn frame_count(len: usize, hop: usize) -> usize {
    1 + len / hop
}

fn hz_to_mel(hz: f64) -> f64 {
    // Slaney scale: linear below 1 kHz, logarithmic above
    const F_SP: f64 = 200.0 / 3.0;
    const MIN_LOG_HZ: f64 = 1000.0;
    let min_log_mel = MIN_LOG_HZ / F_SP;
    let logstep = 6.4f64.ln() / 27.0;
    if hz >= MIN_LOG_HZ {
        min_log_mel + (hz / MIN_LOG_HZ).ln() / logstep
    } else {
        hz / F_SP
    }
}

fn mel_to_hz(mel: f64) -> f64 {
    const F_SP: f64 = 200.0 / 3.0;
    const MIN_LOG_HZ: f64 = 1000.0;
    let min_log_mel = MIN_LOG_HZ / F_SP;
    let logstep = 6.4f64.ln() / 27.0;
    if mel >= min_log_mel {
        MIN_LOG_HZ * (logstep * (mel - min_log_mel)).exp()
    } else {
        F_SP * mel
    }
}

/// Slaney-normalized triangular filterbank, `n_mels x (n_fft/2 + 1)`.
#[derive(Debug, Clone)]
pub struct MelFilterbank {
    weights: Array2<f32>,
    edges_hz: Vec<f64>,
}

impl MelFilterbank {
    pub fn new(cfg: &MelConfig) -> Self {
        let n_freqs = cfg.n_fft / 2 + 1;
        let (lo, hi) = (hz_to_mel(cfg.fmin as f64), hz_to_mel(cfg.fmax as f64));
        let edges_hz: Vec<f64> = (0..cfg.n_mels + 2)
            .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (cfg.n_mels + 1) as f64))
            .collect();
        let bin_hz = |k: usize| k as f64 * cfg.sample_rate_hz as f64 / cfg.n_fft as f64;
        let mut weights = Array2::<f32>::zeros((cfg.n_mels, n_freqs));
        for m in 0..cfg.n_mels {
            let (left, center, right) = (edges_hz[m], edges_hz[m + 1], edges_hz[m + 2]);
            let norm = 2.0 / (right - left);
            for k in 0..n_freqs {
                let f = bin_hz(k);
                let rise = (f - left) / (center - left);
                let fall = (right - f) / (right - center);
                let w = rise.min(fall).max(0.0);
                weights[[m, k]] = (w * norm) as f32;
            }
        }
        Self { weights, edges_hz }
    }

    pub fn weights(&self) -> &Array2<f32> {
        &self.weights
    }

    /// Peak frequency of band `m`.
    pub fn center_hz(&self, m: usize) -> f64 {
        self.edges_hz[m + 1]
    }

    pub fn n_mels(&self) -> usize {
        self.weights.nrows()
    }
}

fn hann(win: usize) -> Vec<f32> {
    // periodic Hann, matching the usual STFT convention
    (0..win)
        .map(|i| {
            let x = std::f64::consts::PI * 2.0 * i as f64 / win as f64;
            (0.5 - 0.5 * x.cos()) as f32
        })
        .collect()
}

fn reflect_pad(x: &[f32], pad: usize) -> Vec<f32> {
    let n = x.len();
    let mut out = Vec::with_capacity(n + 2 * pad);
    out.extend((0..pad).map(|i| x[pad - i]));
    out.extend_from_slice(x);
    out.extend((0..pad).map(|i| x[n - 2 - i]));
    out
}

pub(crate) fn check_length(wave: &Waveform, cfg: &MelConfig) -> Result<()> {
    // reflect padding also needs more than n_fft/2 samples
    let needed = cfg.win_length.max(cfg.n_fft / 2 + 1);
    if wave.len() < needed {
        return Err(Error::InputTooShort {
            len: wave.len(),
            needed,
        });
    }
    Ok(())
}

/// Reflect-padded signal used for centered framing; frame `t` starts at
/// `t * hop` and spans `n_fft` samples.
pub(crate) fn centered_signal(wave: &Waveform, cfg: &MelConfig) -> Vec<f32> {
    reflect_pad(wave.samples(), cfg.n_fft / 2)
}

/// `T x (n_fft/2 + 1)` STFT magnitudes with a centered Hann window.
pub fn stft_magnitude(wave: &Waveform, cfg: &MelConfig) -> Result<Array2<f32>> {
    cfg.validate()?;
    check_length(wave, cfg)?;
    let padded = centered_signal(wave, cfg);
    let n_frames = frame_count(wave.len(), cfg.hop_length);
    let n_freqs = cfg.n_fft / 2 + 1;
    let window = hann(cfg.win_length);
    let offset = (cfg.n_fft - cfg.win_length) / 2;

    let fft = FftPlanner::<f32>::new().plan_fft_forward(cfg.n_fft);
    let mut buf = vec![Complex::new(0.0f32, 0.0); cfg.n_fft];
    let mut scratch = vec![Complex::new(0.0f32, 0.0); fft.get_inplace_scratch_len()];
    let mut out = Array2::<f32>::zeros((n_frames, n_freqs));
    for (t, mut row) in out.axis_iter_mut(Axis(0)).enumerate() {
        let start = t * cfg.hop_length;
        buf.iter_mut().for_each(|c| *c = Complex::new(0.0, 0.0));
        for (i, w) in window.iter().enumerate() {
            buf[offset + i] = Complex::new(padded[start + offset + i] * w, 0.0);
        }
        fft.process_with_scratch(&mut buf, &mut scratch);
        for (k, v) in row.iter_mut().enumerate() {
            *v = buf[k].norm();
        }
    }
    Ok(out)
}

/// Log-mel spectrogram: `ln(max(filterbank . |STFT|, log_floor))`, `T x n_mels`.
pub fn compute_mel(wave: &Waveform, cfg: &MelConfig) -> Result<AcousticFeatures> {
    if wave.sample_rate_hz() != cfg.sample_rate_hz {
        return Err(Error::InvalidWaveform(format!(
            "sample rate {} does not match configured {}",
            wave.sample_rate_hz(),
            cfg.sample_rate_hz
        )));
    }
    let mag = stft_magnitude(wave, cfg)?;
    let fb = MelFilterbank::new(cfg);
    let floor = cfg.log_floor;
    let mel = mag.dot(&fb.weights().t()).mapv(|v| v.max(floor).ln());
    AcousticFeatures::new(mel, SourceKind::Mel, cfg.frame_rate_hz())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sine(freq: f64, secs: f64, sr: u32) -> Waveform {
        let n = (secs * sr as f64) as usize;
        let s = (0..n)
            .map(|i| (0.5 * (2.0 * std::f64::consts::PI * freq * i as f64 / sr as f64).sin()) as f32)
            .collect();
        Waveform::new(s, sr).unwrap()
    }

    #[test]
    fn silence_hits_the_floor() {
        let cfg = MelConfig::default();
        let w = Waveform::new(vec![0.0; 24_000], 24_000).unwrap();
        let mel = compute_mel(&w, &cfg).unwrap();
        let floor = cfg.log_floor.ln();
        assert!(mel.frames.iter().all(|&v| v == floor));
    }

    #[test]
    fn one_second_at_default_hop_gives_81_frames() {
        let w = sine(440.0, 1.0, 24_000);
        let mel = compute_mel(&w, &MelConfig::default()).unwrap();
        assert_eq!(mel.num_frames(), 81);
        assert_eq!(mel.dim(), 80);
        assert_eq!(mel.source_kind, SourceKind::Mel);
    }

    #[test]
    fn too_short_is_rejected() {
        let w = Waveform::new(vec![0.1; 1000], 24_000).unwrap();
        assert!(matches!(
            compute_mel(&w, &MelConfig::default()),
            Err(Error::InputTooShort { .. })
        ));
    }

    #[test]
    fn sample_rate_mismatch_is_rejected() {
        let w = sine(440.0, 1.0, 16_000);
        assert!(compute_mel(&w, &MelConfig::default()).is_err());
    }

    /// Triangle response of band `m` at `f`, written out from the slaney
    /// definition independently of `MelFilterbank`.
    fn analytic_response(cfg: &MelConfig, m: usize, f: f64) -> f64 {
        let mel = |hz: f64| {
            if hz < 1000.0 {
                3.0 * hz / 200.0
            } else {
                15.0 + 27.0 * (hz / 1000.0).ln() / 6.4f64.ln()
            }
        };
        let hz = |mel: f64| {
            if mel < 15.0 {
                200.0 * mel / 3.0
            } else {
                1000.0 * (6.4f64.ln() * (mel - 15.0) / 27.0).exp()
            }
        };
        let (lo, hi) = (mel(cfg.fmin as f64), mel(cfg.fmax as f64));
        let step = (hi - lo) / (cfg.n_mels + 1) as f64;
        let (l, c, r) = (hz(lo + step * m as f64), hz(lo + step * (m + 1) as f64), hz(lo + step * (m + 2) as f64));
        let tri = if f <= l || f >= r {
            0.0
        } else if f <= c {
            (f - l) / (c - l)
        } else {
            (r - f) / (r - c)
        };
        tri * 2.0 / (r - l)
    }

    #[test]
    fn sine_at_band_center_peaks_in_that_band() {
        let cfg = MelConfig::default();
        let fb = MelFilterbank::new(&cfg);
        for m in [20usize, 40, 55, 70] {
            let f = fb.center_hz(m);
            // the oracle agrees that band m is the only band responding at f
            let responses: Vec<f64> = (0..cfg.n_mels).map(|b| analytic_response(&cfg, b, f)).collect();
            let best = responses
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .unwrap()
                .0;
            assert_eq!(best, m);
            let mel = compute_mel(&sine(f, 0.5, cfg.sample_rate_hz), &cfg).unwrap();
            let t = mel.num_frames();
            for row in mel.frames.outer_iter().skip(3).take(t - 6) {
                let arg = row
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.total_cmp(b.1))
                    .unwrap()
                    .0;
                assert_eq!(arg, m, "band {m} at {f:.1} Hz");
            }
        }
    }

    #[test]
    fn filterbank_matches_analytic_triangles() {
        let cfg = MelConfig::default();
        let fb = MelFilterbank::new(&cfg);
        for m in [0usize, 10, 79] {
            for k in (0..cfg.n_fft / 2 + 1).step_by(37) {
                let f = k as f64 * cfg.sample_rate_hz as f64 / cfg.n_fft as f64;
                let want = analytic_response(&cfg, m, f);
                assert!((fb.weights()[[m, k]] as f64 - want).abs() < 1e-6 * want.abs().max(1e-3));
            }
        }
    }

    #[test]
    fn deterministic() {
        let cfg = MelConfig::default();
        let w = sine(321.0, 0.3, 24_000);
        let a = compute_mel(&w, &cfg).unwrap();
        let b = compute_mel(&w, &cfg).unwrap();
        assert!(a.frames.iter().zip(b.frames.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn frame_count_law_holds_for_random_lengths() {
        use rand::{Rng, SeedableRng};
        let cfg = MelConfig {
            sample_rate_hz: 8000,
            n_fft: 256,
            hop_length: 64,
            win_length: 200,
            n_mels: 20,
            fmin: 0.0,
            fmax: 4000.0,
            log_floor: 1e-5,
        };
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for _ in 0..1000 {
            let len = rng.gen_range(200..3000);
            let w = Waveform::new((0..len).map(|i| ((i * 7919) % 13) as f32 / 13.0 - 0.5).collect(), 8000).unwrap();
            let mel = compute_mel(&w, &cfg).unwrap();
            // padded length len + 2*(n_fft/2), windows of n_fft every hop
            let padded = len + 2 * (cfg.n_fft / 2);
            let expect = (padded - cfg.n_fft) / cfg.hop_length + 1;
            assert_eq!(mel.num_frames(), expect);
        }
    }
}
