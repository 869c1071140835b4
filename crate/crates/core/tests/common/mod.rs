//! Synthetic corpora shared by the integration tests.

#![allow(dead_code)]

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stepback_core::dataset::{FeatureEntry, FeatureStore, Gender, SpeakerId};
use stepback_core::features::Spectrogram;
use stepback_core::trainer::TrainingConfig;

pub fn speakers(n: usize) -> Vec<SpeakerId> {
    (0..n)
        .map(|i| SpeakerId {
            index: i,
            code: format!("p{}", 225 + i),
            gender: if i % 2 == 0 { Gender::Female } else { Gender::Male },
        })
        .collect()
}

/// Speaker `s` has a temporal ripple of period `3 + 2s` frames, so speakers
/// stay separable after per-speaker normalization.
pub fn utterance(speaker: usize, n_frames: usize, n_bins: usize, rng: &mut impl Rng) -> Spectrogram {
    let period = 3.0 + 2.0 * speaker as f64;
    let phase: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let values = Array2::from_shape_fn((n_frames, n_bins), |(t, f)| {
        let ripple = (std::f64::consts::TAU * t as f64 / period + phase + 0.3 * f as f64).sin();
        -2.0 - 0.1 * f as f64 + ripple + 0.2 * rng.random_range(-1.0..1.0)
    });
    Spectrogram::new(values, 256).unwrap()
}

pub fn store(n_speakers: usize, per_speaker: usize, n_frames: usize, n_bins: usize, seed: u64) -> FeatureStore {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spk = speakers(n_speakers);
    let raw = spk
        .iter()
        .flat_map(|s| (0..per_speaker).map(move |_| s.clone()))
        .map(|s| FeatureEntry {
            spectrogram: utterance(s.index, n_frames, n_bins, &mut rng),
            speaker: s,
        })
        .collect();
    FeatureStore::from_spectrograms(spk, raw).unwrap()
}

/// Tiny networks and a short schedule touching every objective.
pub fn tiny_config() -> TrainingConfig {
    TrainingConfig {
        model: "tiny".into(),
        batch_size: 2,
        segment_frames: 16,
        pre_recon_steps: 3,
        pre_clf_steps: 2,
        stepback_cycles: 3,
        ministage1_per_cycle: 4,
        ministage2_per_cycle: 1,
        gan_gen_steps: 2,
        disc_per_gen: 5,
        lambda_ramp_steps: 2,
        learning_rate: 1e-3,
        checkpoint_every: 0,
        seed: 11,
        ..TrainingConfig::paper()
    }
}
