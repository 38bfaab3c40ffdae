//! Small synthetic corpus for smoke runs and end-to-end tests.
//!
//! Every phone is rendered as a harmonic tone with a phone-specific spectral
//! peak, held for a scripted number of frames. The "accented" speakers shift
//! vowel peaks and stretch durations, so the two corpora differ in a way a
//! speech encoder has to learn to ignore. Synthesis is a pure function of the
//! spec and the text, so regenerated corpora are bit-identical.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::data::{AccentTag, SplitSizes};
use crate::error::Result;
use crate::features::{compute_mel, text_to_phones, Lexicon, MelConfig, PhoneInventory, Waveform};
use crate::model::ModelConfig;
use crate::preprocess::CorpusSource;
use crate::tensor_file;

const LEXICON: &str = "\
the\tDH AH
red\tR EH D
blue\tB L UW
green\tG R IY N
cat\tK AE T
dog\tD AO G
sees\tS IY Z
big\tB IH G
small\tS M AO L
fish\tF IH SH
runs\tR AH N Z
home\tHH OW M
";

const ADJECTIVES: [&str; 5] = ["red", "blue", "green", "big", "small"];
const NOUNS: [&str; 3] = ["cat", "dog", "fish"];
const ENDINGS: [&str; 3] = ["runs", "runs home", "sees the"];

/// 45 distinct sentences from a tiny grammar; native and accented
/// speakers read disjoint halves.
fn sentences(accented: bool, n: usize) -> Vec<String> {
    let mut all: Vec<String> = Vec::new();
    for (i, adj) in ADJECTIVES.iter().enumerate() {
        for (j, noun) in NOUNS.iter().enumerate() {
            for (k, end) in ENDINGS.iter().enumerate() {
                let mut s = format!("the {adj} {noun} {end}");
                if *end == "sees the" {
                    let other = NOUNS[(j + 1 + i) % NOUNS.len()];
                    s = format!("{s} {} {other}", ADJECTIVES[(i + k + 2) % ADJECTIVES.len()]);
                }
                all.push(s);
            }
        }
    }
    // interleave so each half covers every adjective and noun
    all.into_iter()
        .enumerate()
        .filter(|(i, _)| (i % 2 == 1) == accented)
        .map(|(_, s)| s)
        .take(n)
        .collect()
}

const VOWELS: [&str; 9] = ["AH", "EH", "UW", "IY", "AE", "AO", "IH", "OW", "ER"];
const UNVOICED: [&str; 7] = ["K", "T", "S", "F", "SH", "HH", "P"];

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ToySpec {
    pub native_speakers: usize,
    pub accented_speakers: usize,
    /// Utterances per speaker, at most 22.
    pub utterances_per_speaker: usize,
    /// Width of the fake pretrained-encoder features.
    pub pretrained_dim: usize,
    /// Pretrained features are written at `mel rate / pretrained_stride`.
    pub pretrained_stride: usize,
}

impl Default for ToySpec {
    fn default() -> Self {
        Self {
            native_speakers: 2,
            accented_speakers: 2,
            utterances_per_speaker: 16,
            pretrained_dim: 16,
            pretrained_stride: 2,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ToyCorpus {
    pub native: PathBuf,
    pub accented: PathBuf,
    pub lexicon: PathBuf,
}

impl ToyCorpus {
    pub fn sources(&self) -> Vec<CorpusSource> {
        vec![
            CorpusSource {
                root: self.native.clone(),
                accent: AccentTag::Native,
            },
            CorpusSource {
                root: self.accented.clone(),
                accent: AccentTag::Accented,
            },
        ]
    }
}

/// 8 kHz, 10 ms hop, 20 mel channels.
pub fn mel_config() -> MelConfig {
    MelConfig {
        sample_rate_hz: 8000,
        n_fft: 256,
        hop_length: 80,
        win_length: 256,
        n_mels: 20,
        fmin: 0.0,
        fmax: 4000.0,
        log_floor: 1e-5,
    }
}

/// A model small enough to train on the toy corpus in minutes.
pub fn model_config(spec: &ToySpec) -> ModelConfig {
    ModelConfig {
        hidden_dim: 32,
        n_heads: 2,
        text_encoder_blocks: 1,
        speech_encoder_blocks: 2,
        decoder_blocks: 1,
        ffn_dim: 64,
        ffn_kernel: 3,
        dropout: 0.0,
        n_speakers: spec.native_speakers + spec.accented_speakers,
        n_mels: mel_config().n_mels,
        pretrained_dim: spec.pretrained_dim,
        variance_dim: 32,
        variance_kernel: 3,
        n_bins: 32,
        energy_max: 100.0,
        postnet_dim: 32,
        postnet_kernel: 5,
        postnet_layers: 3,
        ..ModelConfig::default()
    }
}

/// Two validation and two test texts per speaker; the rest train.
pub fn split_sizes(spec: &ToySpec) -> SplitSizes {
    SplitSizes {
        n_train: spec.utterances_per_speaker.saturating_sub(4),
        n_val: 2,
        n_test: 2,
    }
}

fn speaker_names(prefix: &str, n: usize) -> Vec<String> {
    (0..n).map(|i| format!("{prefix}{}", (b'a' + i as u8) as char)).collect()
}

struct Voice {
    f0: f64,
    accented: bool,
}

/// Scripted frames for a phone.
fn phone_frames(id: u32, accented: bool) -> u32 {
    let base = 3 + (id * 7) % 5;
    if accented {
        (base as f64 * 1.4).round() as u32
    } else {
        base
    }
}

fn phone_peak_hz(symbol: &str, id: u32, accented: bool) -> f64 {
    let peak = 300.0 + ((id as f64 * 397.0) % 3000.0);
    if accented && VOWELS.contains(&symbol) {
        (peak + 450.0).min(3600.0)
    } else {
        peak
    }
}

fn synthesize(phones: &[u32], durations: &[u32], voice: &Voice, mel: &MelConfig, seed: u64) -> Result<Waveform> {
    let inv = PhoneInventory::default();
    let hop = mel.hop_length;
    let sr = mel.sample_rate_hz as f64;
    let total: usize = durations.iter().map(|&d| d as usize).sum();
    let n = (total - 1) * hop + hop / 2;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut out = vec![0f32; n];
    let mut phase = 0.0f64;
    let mut frame = 0usize;
    for (&p, &d) in phones.iter().zip(durations) {
        let symbol = inv.symbol(p).unwrap_or("sil");
        let peak = phone_peak_hz(symbol, p, voice.accented);
        let unvoiced = UNVOICED.contains(&symbol);
        let amp = if VOWELS.contains(&symbol) { 0.5 } else { 0.25 };
        let start = frame * hop;
        let end = ((frame + d as usize) * hop).min(n);
        for (i, s) in out.iter_mut().enumerate().take(end).skip(start) {
            // gentle declination over the utterance
            let f0 = voice.f0 * (1.1 - 0.2 * i as f64 / n as f64);
            phase += 2.0 * PI * f0 / sr;
            let v = if unvoiced {
                // noise plus a tone at the phone's peak
                let noise: f64 = rng.gen_range(-1.0..1.0);
                noise * 0.5 + (2.0 * PI * peak * i as f64 / sr).sin() * 0.5
            } else {
                let mut acc = 0.0;
                let mut k = 1.0;
                while k * f0 < sr / 2.0 - 200.0 {
                    let g = (-((k * f0 - peak) / 350.0).powi(2)).exp() + 0.05 / k;
                    acc += g * (k * phase).sin();
                    k += 1.0;
                }
                acc
            };
            *s = (amp * v) as f32;
        }
        frame += d as usize;
    }
    let peak = out.iter().fold(0f32, |m, v| m.max(v.abs())).max(1e-6);
    if peak > 0.9 {
        out.iter_mut().for_each(|v| *v *= 0.9 / peak);
    }
    Waveform::new(out, mel.sample_rate_hz)
}

/// Fixed random projection of frame-pooled mels: stands in for an external
/// self-supervised encoder running at a coarser frame rate.
fn fake_pretrained(wave: &Waveform, mel: &MelConfig, spec: &ToySpec) -> Result<Array2<f32>> {
    let m = compute_mel(wave, mel)?.frames;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0x5eed);
    let scale = 1.0 / (mel.n_mels as f64).sqrt();
    let proj = Array2::from_shape_fn((mel.n_mels, spec.pretrained_dim), |_| {
        (rng.gen_range(-1.0..1.0f64) * scale * 1.7) as f32
    });
    let stride = spec.pretrained_stride.max(1);
    let rows = m.nrows().div_ceil(stride);
    let mut pooled = Array2::<f32>::zeros((rows, mel.n_mels));
    for r in 0..rows {
        let chunk = m.slice(ndarray::s![r * stride..((r + 1) * stride).min(m.nrows()), ..]);
        // log-mels sit around -5..2; centre them before the projection
        pooled.row_mut(r).assign(&(chunk.mean_axis(ndarray::Axis(0)).unwrap() / 4.0 + 0.5));
    }
    Ok(pooled.dot(&proj).mapv(f32::tanh))
}

fn write_speaker(dir: &Path, texts: &[String], voice: &Voice, lexicon: &Lexicon, spec: &ToySpec, seed: u64) -> Result<()> {
    let mel = mel_config();
    std::fs::create_dir_all(dir)?;
    let inv = PhoneInventory::default();
    for (i, text) in texts.iter().enumerate() {
        let stem = format!("utt{:03}", i + 1);
        let phones = text_to_phones(&text, lexicon)?.phone_ids;
        let durations: Vec<u32> = phones
            .iter()
            .map(|&p| if p == PhoneInventory::BOUNDARY { 0 } else { phone_frames(p, voice.accented) })
            .collect();
        let wave = synthesize(&phones, &durations, voice, &mel, seed ^ (i as u64 * 7919))?;
        wave.save(&dir.join(format!("{stem}.wav")))?;
        std::fs::write(dir.join(format!("{stem}.txt")), format!("{text}\n"))?;
        // aligners skip word boundaries
        let dur: Vec<String> = phones
            .iter()
            .zip(&durations)
            .filter(|(&p, _)| p != PhoneInventory::BOUNDARY)
            .map(|(_, d)| d.to_string())
            .collect();
        std::fs::write(dir.join(format!("{stem}.dur")), dur.join(" ") + "\n")?;
        // features are computed from the 16-bit file as an external tool would see it
        let stored = Waveform::load(&dir.join(format!("{stem}.wav")))?;
        let feats = fake_pretrained(&stored, &mel, spec)?;
        tensor_file::write_matrix(&dir.join(format!("{stem}.feat.acft")), &feats)?;
        debug_assert!(phones.iter().all(|&p| (p as usize) < inv.len()));
    }
    Ok(())
}

/// Writes `root/{native,accented}/<speaker>/uttNNN.{wav,txt,dur,feat.acft}`
/// and `root/lexicon.txt`.
pub fn generate(root: &Path, spec: &ToySpec) -> Result<ToyCorpus> {
    let inv = PhoneInventory::default();
    let lexicon = Lexicon::parse(LEXICON, &inv)?;
    std::fs::create_dir_all(root)?;
    let lex_path = root.join("lexicon.txt");
    std::fs::write(&lex_path, LEXICON)?;
    let corpus = ToyCorpus {
        native: root.join("native"),
        accented: root.join("accented"),
        lexicon: lex_path,
    };
    let native_texts = sentences(false, spec.utterances_per_speaker);
    let accented_texts = sentences(true, spec.utterances_per_speaker);
    let native_f0 = [110.0, 190.0, 150.0, 230.0];
    let accented_f0 = [130.0, 170.0, 210.0, 100.0];
    for (i, name) in speaker_names("nat_", spec.native_speakers).iter().enumerate() {
        let voice = Voice {
            f0: native_f0[i % native_f0.len()],
            accented: false,
        };
        write_speaker(&corpus.native.join(name), &native_texts, &voice, &lexicon, spec, 100 + i as u64)?;
    }
    for (i, name) in speaker_names("acc_", spec.accented_speakers).iter().enumerate() {
        let voice = Voice {
            f0: accented_f0[i % accented_f0.len()],
            accented: true,
        };
        write_speaker(&corpus.accented.join(name), &accented_texts, &voice, &lexicon, spec, 200 + i as u64)?;
    }
    Ok(corpus)
}

/// Shell adapters that only exercise the plumbing: the "vocoder" copies the
/// mel file to the wav path and the "recognizer" prints a fixed sentence.
pub const STUB_VOCODER: &str = "cp";
pub const STUB_ASR: &str = "printf 'the red cat runs\\n'; :";

/// A complete run configuration for the toy corpus at `corpus`, with step
/// budgets sized for a few minutes of CPU time.
pub fn run_config(corpus: &ToyCorpus, spec: &ToySpec) -> RunConfig {
    let mut cfg = RunConfig {
        mel: mel_config(),
        model: model_config(spec),
        ..RunConfig::default()
    };
    cfg.data.native_corpus = Some(corpus.native.clone());
    cfg.data.accented_corpus = Some(corpus.accented.clone());
    cfg.data.lexicon = Some(corpus.lexicon.clone());
    cfg.data.native_split = split_sizes(spec);
    cfg.data.accented_split = split_sizes(spec);
    for (s, steps, val_every) in [(&mut cfg.stage1, 1000, 200), (&mut cfg.stage2, 800, 100), (&mut cfg.stage3, 300, 50)] {
        s.max_steps = steps;
        s.batch_size = 8;
        s.warmup_steps = 400;
        s.validation_interval = val_every;
        s.log_interval = 50;
    }
    cfg.stage3.constant_lr = 3e-4;
    cfg.adapters.vocoder_cmd = Some(STUB_VOCODER.into());
    cfg.adapters.asr_cmd = Some(STUB_ASR.into());
    cfg
}
