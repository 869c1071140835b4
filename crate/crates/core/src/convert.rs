//! Conversion inference.
//!
//! A whole utterance goes through the networks at once: its spectrogram is
//! normalized with the source speaker's statistics (or the pooled ones when the
//! source speaker is unknown), trimmed to a multiple of the encoder's time
//! reduction, encoded, decoded with the target speaker's embeddings,
//! denormalized with the target speaker's statistics and inverted with
//! Griffin–Lim.
//!
//! A [`Converter`] only reads its checkpoint and can be shared between threads.

use std::path::{Path, PathBuf};

use crate::dataset::SpeakerId;
use crate::error::{Error, Result};
use crate::features::{compute_spectrogram, invert_spectrogram, load_waveform, write_wav, Spectrogram};
use crate::model::{batch_input, Mode, TIME_REDUCTION};
use crate::trainer::Checkpoint;

pub const DEFAULT_GRIFFIN_LIM_ITERS: usize = 100;

#[derive(Clone, Debug)]
pub struct ConversionRequest {
    pub source_path: PathBuf,
    pub target_speaker: String,
    pub checkpoint: PathBuf,
    pub output_path: PathBuf,
    pub griffin_lim_iters: usize,
    /// Selects the normalization statistics of the input; pooled statistics when unset.
    pub source_speaker: Option<String>,
}

/// Loads the checkpoint named in `req`, converts, writes the waveform and
/// returns the converted log-magnitude spectrogram.
pub fn convert(req: &ConversionRequest) -> Result<Spectrogram> {
    Converter::load(&req.checkpoint)?.convert_file(req)
}

pub struct Converter {
    ckpt: Checkpoint,
}

impl Converter {
    pub fn new(ckpt: Checkpoint) -> Self {
        Converter { ckpt }
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(Self::new(Checkpoint::load(path)?))
    }

    pub fn checkpoint(&self) -> &Checkpoint {
        &self.ckpt
    }

    pub fn speakers(&self) -> &[SpeakerId] {
        &self.ckpt.speakers
    }

    pub fn convert_file(&self, req: &ConversionRequest) -> Result<Spectrogram> {
        // Resolve the speaker before touching audio so a bad code fails fast.
        self.ckpt.speaker(&req.target_speaker)?;
        let stft = &self.ckpt.stft;
        let w = load_waveform(&req.source_path, stft.sample_rate)?;
        let spec = compute_spectrogram(&w, stft)?;
        let out = self.convert_spectrogram(&spec, &req.target_speaker, req.source_speaker.as_deref())?;
        let wav = invert_spectrogram(&out, stft, req.griffin_lim_iters)?;
        write_wav(&req.output_path, &wav)?;
        Ok(out)
    }

    /// Converts an unnormalized log-magnitude spectrogram. The result has the
    /// input's frame count rounded down to a multiple of eight.
    pub fn convert_spectrogram(
        &self,
        source: &Spectrogram,
        target_speaker: &str,
        source_speaker: Option<&str>,
    ) -> Result<Spectrogram> {
        let target = self.ckpt.speaker(target_speaker)?;
        let model = &self.ckpt.state.model;
        if source.n_bins() != model.n_bins {
            return Err(Error::Validation(format!(
                "spectrogram has {} bins, the model expects {}",
                source.n_bins(),
                model.n_bins
            )));
        }
        let frames = source.n_frames() / TIME_REDUCTION * TIME_REDUCTION;
        if frames == 0 {
            return Err(Error::Validation(format!(
                "utterance has {} frames, at least {TIME_REDUCTION} are needed",
                source.n_frames()
            )));
        }
        let src_stats = self.ckpt.stats.for_speaker(source_speaker)?;
        let dst_stats = self.ckpt.stats.for_speaker(Some(target_speaker))?;
        let x = src_stats.normalize(&source.frames(0, frames));

        let _guard = stepback_autodiff::no_grad();
        let p = self.ckpt.state.params.bind(&[]);
        let input = x.values.t().to_owned().insert_axis(ndarray::Axis(0));
        let z = model.encode(&p, &batch_input(input), &mut Mode::Eval)?;
        let y = model.decode(&p, &z, &[target.index], &mut Mode::Eval)?;
        let values = y
            .value()
            .index_axis(ndarray::Axis(0), 0)
            .t()
            .to_owned()
            .into_dimensionality::<ndarray::Ix2>()
            .map_err(|e| Error::Shape(e.to_string()))?;
        let out = Spectrogram::new(values, source.hop_length)?;
        Ok(dst_stats.denormalize(&out))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{FeatureEntry, FeatureStore, Gender};
    use crate::trainer::{TrainingConfig, Trainer};
    use ndarray::Array2;

    fn converter(n_bins: usize) -> (Converter, Spectrogram) {
        let speakers: Vec<SpeakerId> = (0..2)
            .map(|i| SpeakerId {
                index: i,
                code: format!("s{i}"),
                gender: Gender::Male,
            })
            .collect();
        let spec = |k: f64| {
            Spectrogram::new(
                Array2::from_shape_fn((24, n_bins), |(t, f)| ((t * 7 + f * 3) as f64 * k).sin() - 3.0),
                256,
            )
            .unwrap()
        };
        let raw = vec![
            FeatureEntry { speaker: speakers[0].clone(), spectrogram: spec(0.1) },
            FeatureEntry { speaker: speakers[1].clone(), spectrogram: spec(0.2) },
        ];
        let store = FeatureStore::from_spectrograms(speakers, raw).unwrap();
        let cfg = TrainingConfig {
            model: "tiny".into(),
            batch_size: 2,
            segment_frames: 16,
            lambda_ramp_steps: 1,
            ..TrainingConfig::paper()
        };
        let ckpt = Trainer::new(cfg, &store).unwrap().checkpoint();
        (Converter::new(ckpt), spec(0.3))
    }

    #[test]
    fn output_keeps_trimmed_frame_count_and_is_deterministic() {
        let (c, src) = converter(16);
        let a = c.convert_spectrogram(&src.frames(0, 21), "s1", Some("s0")).unwrap();
        assert_eq!(a.n_frames(), 16);
        assert_eq!(a.n_bins(), 16);
        let b = c.convert_spectrogram(&src.frames(0, 21), "s1", Some("s0")).unwrap();
        assert_eq!(a, b);
        let pooled = c.convert_spectrogram(&src, "s0", None).unwrap();
        assert_eq!(pooled.n_frames(), 24);
    }

    #[test]
    fn request_errors() {
        let (c, src) = converter(16);
        assert!(matches!(c.convert_spectrogram(&src, "nobody", None), Err(Error::Lookup(_))));
        assert!(matches!(
            c.convert_spectrogram(&src.frames(0, 7), "s0", None),
            Err(Error::Validation(_))
        ));
        assert!(matches!(
            c.convert_spectrogram(&src, "s0", Some("nobody")),
            Err(Error::Lookup(_))
        ));
    }
}
