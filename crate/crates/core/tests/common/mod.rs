#![allow(dead_code)]

use accent_core::data::{make_batch, Example};
use accent_core::model::{BatchTensors, ModelConfig};
use candle_core::{DType, Device};
use ndarray::Array2;
use rand::{Rng, SeedableRng};

/// Random examples shaped for `cfg`: 2-4 phones with 0-3 frames each (at
/// least one frame overall), features of the mel width.
pub fn random_examples(cfg: &ModelConfig, n: usize, seed: u64) -> Vec<Example> {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let n_phones = rng.gen_range(2..=4);
            let phone_ids: Vec<u32> = (0..n_phones).map(|_| rng.gen_range(1..cfg.n_phones as u32)).collect();
            let mut durations: Vec<u32> = (0..n_phones).map(|_| rng.gen_range(0..=3)).collect();
            if durations.iter().sum::<u32>() == 0 {
                durations[0] = 1;
            }
            let t = durations.iter().sum::<u32>() as usize;
            let mel = Array2::from_shape_fn((t, cfg.n_mels), |_| rng.gen_range(-2.0f32..1.0));
            let features = Array2::from_shape_fn((t, cfg.n_mels), |_| rng.gen_range(-2.0f32..1.0));
            Example {
                utt_id: format!("spk/u{i}"),
                speaker_id: rng.gen_range(0..cfg.n_speakers as u32),
                features,
                mel,
                phone_ids,
                durations,
                pitch: (0..t)
                    .map(|_| if rng.gen_bool(0.3) { 0.0 } else { rng.gen_range(80.0f32..300.0) })
                    .collect(),
                energy: (0..t).map(|_| rng.gen_range(0.0f32..50.0)).collect(),
            }
        })
        .collect()
}

pub fn tensors(examples: &[Example], dtype: DType) -> BatchTensors {
    let refs: Vec<&Example> = examples.iter().collect();
    BatchTensors::new(&make_batch(&refs, 0.0).unwrap(), dtype, &Device::Cpu).unwrap()
}
