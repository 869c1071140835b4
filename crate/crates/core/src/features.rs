//! Waveform I/O, log-magnitude spectrograms, training segments and
//! Griffin–Lim inversion.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;
use std::sync::Arc;

use ndarray::{s, Array2};
use rand::Rng;
use rubato::{FftFixedInOut, Resampler};
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Mono audio at a known sample rate.
#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::Validation("sample rate must be positive".into()));
        }
        if samples.iter().any(|s| !s.is_finite()) {
            return Err(Error::Validation("waveform contains non-finite samples".into()));
        }
        Ok(Waveform {
            samples,
            sample_rate,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

/// Short-time Fourier analysis settings shared by a whole run.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StftConfig {
    pub n_fft: usize,
    pub hop: usize,
    pub sample_rate: u32,
    /// Magnitudes are clamped to at least this value before the log.
    pub log_floor: f64,
}

impl Default for StftConfig {
    fn default() -> Self {
        StftConfig {
            n_fft: 1024,
            hop: 256,
            sample_rate: 16_000,
            log_floor: 1e-10,
        }
    }
}

impl StftConfig {
    pub fn n_bins(&self) -> usize {
        self.n_fft / 2 + 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_fft < 2 || self.hop == 0 || self.hop > self.n_fft {
            return Err(Error::Config(format!(
                "need 0 < hop <= n_fft (hop {}, n_fft {})",
                self.hop, self.n_fft
            )));
        }
        if self.sample_rate == 0 {
            return Err(Error::Config("sample rate must be positive".into()));
        }
        if !(self.log_floor > 0.0 && self.log_floor.is_finite()) {
            return Err(Error::Config("log_floor must be positive".into()));
        }
        Ok(())
    }

    /// Frames produced from `len` samples without padding.
    pub fn frame_count(&self, len: usize) -> usize {
        if len < self.n_fft {
            0
        } else {
            (len - self.n_fft) / self.hop + 1
        }
    }

    /// Samples produced when inverting `frames` frames.
    pub fn signal_len(&self, frames: usize) -> usize {
        if frames == 0 {
            0
        } else {
            (frames - 1) * self.hop + self.n_fft
        }
    }
}

/// Log-magnitude spectrogram, `values[frame][bin]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Spectrogram {
    pub values: Array2<f64>,
    pub hop_length: usize,
}

impl Spectrogram {
    pub fn new(values: Array2<f64>, hop_length: usize) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation("spectrogram contains non-finite values".into()));
        }
        Ok(Spectrogram { values, hop_length })
    }

    pub fn n_frames(&self) -> usize {
        self.values.nrows()
    }

    pub fn n_bins(&self) -> usize {
        self.values.ncols()
    }

    /// Contiguous frame range `start..start + len`.
    pub fn frames(&self, start: usize, len: usize) -> Spectrogram {
        Spectrogram {
            values: self.values.slice(s![start..start + len, ..]).to_owned(),
            hop_length: self.hop_length,
        }
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        serde_json::to_writer(BufWriter::new(f), self)?;
        Ok(())
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        let s: Spectrogram = serde_json::from_reader(BufReader::new(f))?;
        Spectrogram::new(s.values, s.hop_length)
    }
}

/// Periodic Hann window.
pub fn hann_window(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos())
        .collect()
}

/// Reads a WAV or FLAC file, mixes it to mono and resamples to `target_rate`.
pub fn load_waveform(path: &Path, target_rate: u32) -> Result<Waveform> {
    if !path.exists() {
        return Err(Error::io(
            path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "no such file"),
        ));
    }
    let (channels, rate) = match extension(path).as_str() {
        "flac" => read_flac(path)?,
        _ => read_wav(path)?,
    };
    let mono = mix_to_mono(&channels);
    if mono.is_empty() {
        return Err(Error::Validation(format!(
            "{} contains no audio",
            path.display()
        )));
    }
    let samples = if rate == target_rate {
        mono
    } else {
        resample(&mono, rate, target_rate)?
    };
    Waveform::new(samples, target_rate)
}

fn extension(path: &Path) -> String {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| e.to_ascii_lowercase())
        .unwrap_or_default()
}

fn audio_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Audio {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

fn read_wav(path: &Path) -> Result<(Vec<Vec<f32>>, u32)> {
    let mut reader = hound::WavReader::open(path).map_err(|e| audio_err(path, e))?;
    let spec = reader.spec();
    let n_ch = spec.channels.max(1) as usize;
    let interleaved: Vec<f32> = match spec.sample_format {
        hound::SampleFormat::Float => reader
            .samples::<f32>()
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| audio_err(path, e))?,
        hound::SampleFormat::Int => {
            let scale = 1.0 / (1u64 << (spec.bits_per_sample - 1)) as f32;
            reader
                .samples::<i32>()
                .map(|s| s.map(|v| v as f32 * scale))
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| audio_err(path, e))?
        }
    };
    Ok((deinterleave(&interleaved, n_ch), spec.sample_rate))
}

fn read_flac(path: &Path) -> Result<(Vec<Vec<f32>>, u32)> {
    let mut reader = claxon::FlacReader::open(path).map_err(|e| audio_err(path, e))?;
    let info = reader.streaminfo();
    let n_ch = info.channels.max(1) as usize;
    let scale = 1.0 / (1u64 << (info.bits_per_sample - 1)) as f32;
    let interleaved: Vec<f32> = reader
        .samples()
        .map(|s| s.map(|v| v as f32 * scale))
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| audio_err(path, e))?;
    Ok((deinterleave(&interleaved, n_ch), info.sample_rate))
}

fn deinterleave(samples: &[f32], n_ch: usize) -> Vec<Vec<f32>> {
    (0..n_ch)
        .map(|c| samples.iter().skip(c).step_by(n_ch).copied().collect())
        .collect()
}

fn mix_to_mono(channels: &[Vec<f32>]) -> Vec<f32> {
    let len = channels.iter().map(Vec::len).min().unwrap_or(0);
    let n = channels.len() as f32;
    (0..len)
        .map(|i| channels.iter().map(|c| c[i]).sum::<f32>() / n)
        .collect()
}

/// Number of samples `len` input samples become at the new rate.
pub fn resampled_len(len: usize, from: u32, to: u32) -> usize {
    (len as u64 * to as u64).div_ceil(from as u64) as usize
}

/// Band-limited resampling of a whole signal, delay compensated.
pub fn resample(samples: &[f32], from: u32, to: u32) -> Result<Vec<f32>> {
    let target_len = resampled_len(samples.len(), from, to);
    let mut rs = FftFixedInOut::<f64>::new(from as usize, to as usize, 1024, 1)
        .map_err(|e| Error::Validation(format!("resampler: {e}")))?;
    let delay = rs.output_delay();
    let input: Vec<f64> = samples.iter().map(|&s| s as f64).collect();
    let mut out: Vec<f64> = Vec::with_capacity(target_len + delay + 2048);
    let mut pos = 0;
    while out.len() < target_len + delay {
        let need = rs.input_frames_next();
        let chunk = if pos + need <= input.len() {
            let c = rs.process(&[&input[pos..pos + need]], None);
            pos += need;
            c
        } else if pos < input.len() {
            let c = rs.process_partial(Some(&[&input[pos..]]), None);
            pos = input.len();
            c
        } else {
            rs.process_partial::<&[f64]>(None, None)
        }
        .map_err(|e| Error::Validation(format!("resampler: {e}")))?;
        out.extend_from_slice(&chunk[0]);
    }
    Ok(out[delay..delay + target_len]
        .iter()
        .map(|&v| v as f32)
        .collect())
}

/// Writes 16-bit PCM, clipping to [-1, 1].
pub fn write_wav(path: &Path, w: &Waveform) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: w.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(|e| audio_err(path, e))?;
    for &s in &w.samples {
        let v = (s.clamp(-1.0, 1.0) * i16::MAX as f32).round() as i16;
        writer.write_sample(v).map_err(|e| audio_err(path, e))?;
    }
    writer.finalize().map_err(|e| audio_err(path, e))
}

struct StftPlan {
    cfg: StftConfig,
    window: Vec<f64>,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl StftPlan {
    fn new(cfg: StftConfig) -> Self {
        let mut planner = FftPlanner::new();
        StftPlan {
            cfg,
            window: hann_window(cfg.n_fft),
            forward: planner.plan_fft_forward(cfg.n_fft),
            inverse: planner.plan_fft_inverse(cfg.n_fft),
        }
    }

    /// Complex STFT, `[frame][bin]` over the non-negative frequencies.
    fn analyze(&self, signal: &[f64]) -> Vec<Vec<Complex<f64>>> {
        let n = self.cfg.n_fft;
        let bins = self.cfg.n_bins();
        let frames = self.cfg.frame_count(signal.len());
        let mut buf = vec![Complex::new(0.0, 0.0); n];
        (0..frames)
            .map(|t| {
                let start = t * self.cfg.hop;
                for (i, b) in buf.iter_mut().enumerate() {
                    *b = Complex::new(signal[start + i] * self.window[i], 0.0);
                }
                self.forward.process(&mut buf);
                buf[..bins].to_vec()
            })
            .collect()
    }

    /// Weighted overlap-add inverse of [`StftPlan::analyze`].
    fn synthesize(&self, spec: &[Vec<Complex<f64>>]) -> Vec<f64> {
        let n = self.cfg.n_fft;
        let len = self.cfg.signal_len(spec.len());
        let mut out = vec![0.0; len];
        let mut norm = vec![0.0; len];
        let mut buf = vec![Complex::new(0.0, 0.0); n];
        for (t, frame) in spec.iter().enumerate() {
            for (k, b) in buf.iter_mut().enumerate() {
                *b = if k < frame.len() {
                    frame[k]
                } else {
                    frame[n - k].conj()
                };
            }
            // DC and Nyquist must be real for a real signal.
            buf[0].im = 0.0;
            if n % 2 == 0 {
                buf[n / 2].im = 0.0;
            }
            self.inverse.process(&mut buf);
            let start = t * self.cfg.hop;
            for i in 0..n {
                let w = self.window[i];
                out[start + i] += buf[i].re / n as f64 * w;
                norm[start + i] += w * w;
            }
        }
        for (o, w) in out.iter_mut().zip(&norm) {
            if *w > 1e-10 {
                *o /= w;
            }
        }
        out
    }
}

fn to_f64(w: &Waveform) -> Vec<f64> {
    w.samples.iter().map(|&s| s as f64).collect()
}

/// Linear STFT magnitudes, `[frame][bin]`.
pub fn stft_magnitudes(w: &Waveform, cfg: &StftConfig) -> Result<Array2<f64>> {
    cfg.validate()?;
    if w.len() < cfg.n_fft {
        return Err(Error::Validation(format!(
            "waveform has {} samples, fewer than n_fft = {}",
            w.len(),
            cfg.n_fft
        )));
    }
    let plan = StftPlan::new(*cfg);
    let spec = plan.analyze(&to_f64(w));
    let mut mag = Array2::zeros((spec.len(), cfg.n_bins()));
    for (t, frame) in spec.iter().enumerate() {
        for (k, c) in frame.iter().enumerate() {
            mag[[t, k]] = c.norm();
        }
    }
    Ok(mag)
}

/// `log(max(|STFT|, log_floor))`, no padding.
pub fn compute_spectrogram(w: &Waveform, cfg: &StftConfig) -> Result<Spectrogram> {
    let mag = stft_magnitudes(w, cfg)?;
    let floor = cfg.log_floor;
    Spectrogram::new(mag.mapv(|m| m.max(floor).ln()), cfg.hop)
}

/// A uniformly placed window of `n_frames` consecutive frames.
pub fn sample_segment<R: Rng + ?Sized>(
    s: &Spectrogram,
    n_frames: usize,
    rng: &mut R,
) -> Result<Spectrogram> {
    if s.n_frames() < n_frames {
        return Err(Error::TooShort {
            frames: s.n_frames(),
            needed: n_frames,
        });
    }
    let start = rng.random_range(0..=s.n_frames() - n_frames);
    Ok(s.frames(start, n_frames))
}

/// Griffin–Lim phase reconstruction starting from zero phase.
///
/// `n_iters = 0` returns the zero-phase inverse.
pub fn invert_spectrogram(s: &Spectrogram, cfg: &StftConfig, n_iters: usize) -> Result<Waveform> {
    cfg.validate()?;
    if s.n_bins() != cfg.n_bins() || s.hop_length != cfg.hop {
        return Err(Error::Shape(format!(
            "spectrogram ({} bins, hop {}) does not match STFT config ({} bins, hop {})",
            s.n_bins(),
            s.hop_length,
            cfg.n_bins(),
            cfg.hop
        )));
    }
    if s.n_frames() == 0 {
        return Err(Error::Validation("cannot invert an empty spectrogram".into()));
    }
    let plan = StftPlan::new(*cfg);
    let mag = s.values.mapv(f64::exp);
    let with_phase = |phase_src: Option<&[Vec<Complex<f64>>]>| -> Vec<Vec<Complex<f64>>> {
        (0..mag.nrows())
            .map(|t| {
                (0..mag.ncols())
                    .map(|k| {
                        let m = mag[[t, k]];
                        match phase_src {
                            Some(p) => {
                                let c = p[t][k];
                                let r = c.norm();
                                if r > 1e-12 {
                                    c * (m / r)
                                } else {
                                    Complex::new(m, 0.0)
                                }
                            }
                            None => Complex::new(m, 0.0),
                        }
                    })
                    .collect()
            })
            .collect()
    };
    let mut signal = plan.synthesize(&with_phase(None));
    for _ in 0..n_iters {
        let estimate = plan.analyze(&signal);
        signal = plan.synthesize(&with_phase(Some(&estimate)));
    }
    Waveform::new(signal.iter().map(|&v| v as f32).collect(), cfg.sample_rate)
}

/// `‖|STFT(w)| − exp(s)‖_F / ‖exp(s)‖_F` over the overlapping frames.
pub fn spectral_convergence(s: &Spectrogram, w: &Waveform, cfg: &StftConfig) -> Result<f64> {
    // Evaluated in f64 so the metric is not limited by the f32 waveform.
    let plan = StftPlan::new(*cfg);
    let est = plan.analyze(&to_f64(w));
    let frames = est.len().min(s.n_frames());
    let (mut num, mut den) = (0.0, 0.0);
    for (t, frame) in est.iter().enumerate().take(frames) {
        for (k, c) in frame.iter().enumerate() {
            let target = s.values[[t, k]].exp();
            num += (c.norm() - target).powi(2);
            den += target * target;
        }
    }
    if den == 0.0 {
        return Err(Error::Validation("reference spectrogram has zero energy".into()));
    }
    Ok((num / den).sqrt())
}

/// Mean and standard deviation per frequency bin.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Smallest standard deviation used when normalizing (constant bins).
const MIN_STD: f64 = 1e-3;

impl BinStats {
    pub fn fit<'a>(specs: impl IntoIterator<Item = &'a Spectrogram>) -> Result<Self> {
        let mut sum: Vec<f64> = Vec::new();
        let mut count = 0usize;
        let specs: Vec<&Spectrogram> = specs.into_iter().collect();
        for s in &specs {
            if sum.is_empty() {
                sum = vec![0.0; s.n_bins()];
            } else if sum.len() != s.n_bins() {
                return Err(Error::Validation("ragged bin counts".into()));
            }
            for row in s.values.rows() {
                for (acc, v) in sum.iter_mut().zip(row) {
                    *acc += v;
                }
            }
            count += s.n_frames();
        }
        if count == 0 {
            return Err(Error::Validation("no frames to fit statistics on".into()));
        }
        let mean: Vec<f64> = sum.iter().map(|v| v / count as f64).collect();
        let mut var = vec![0.0; mean.len()];
        for s in &specs {
            for row in s.values.rows() {
                for ((acc, v), m) in var.iter_mut().zip(row).zip(&mean) {
                    *acc += (v - m).powi(2);
                }
            }
        }
        let std = var.iter().map(|v| (v / count as f64).sqrt()).collect();
        Ok(BinStats { mean, std })
    }

    pub fn normalize(&self, s: &Spectrogram) -> Spectrogram {
        let mut values = s.values.clone();
        for mut row in values.rows_mut() {
            for ((v, m), sd) in row.iter_mut().zip(&self.mean).zip(&self.std) {
                *v = (*v - m) / sd.max(MIN_STD);
            }
        }
        Spectrogram {
            values,
            hop_length: s.hop_length,
        }
    }

    pub fn denormalize(&self, s: &Spectrogram) -> Spectrogram {
        let mut values = s.values.clone();
        for mut row in values.rows_mut() {
            for ((v, m), sd) in row.iter_mut().zip(&self.mean).zip(&self.std) {
                *v = *v * sd.max(MIN_STD) + m;
            }
        }
        Spectrogram {
            values,
            hop_length: s.hop_length,
        }
    }
}

/// Per-speaker z-score statistics fitted on the training split, plus the
/// pooled statistics used when a source speaker is not known.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub speakers: BTreeMap<String, BinStats>,
    pub global: BinStats,
}

impl NormStats {
    pub fn fit<'a>(by_speaker: impl IntoIterator<Item = (&'a str, &'a Spectrogram)>) -> Result<Self> {
        let mut groups: BTreeMap<String, Vec<&Spectrogram>> = BTreeMap::new();
        for (code, s) in by_speaker {
            groups.entry(code.to_string()).or_default().push(s);
        }
        let global = BinStats::fit(groups.values().flatten().copied())?;
        let speakers = groups
            .into_iter()
            .map(|(code, specs)| Ok((code, BinStats::fit(specs)?)))
            .collect::<Result<_>>()?;
        Ok(NormStats { speakers, global })
    }

    /// Statistics for `speaker`, or the pooled ones for `None`.
    pub fn for_speaker(&self, speaker: Option<&str>) -> Result<&BinStats> {
        match speaker {
            None => Ok(&self.global),
            Some(code) => self
                .speakers
                .get(code)
                .ok_or_else(|| Error::Lookup(format!("no normalization statistics for {code}"))),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        serde_json::to_writer_pretty(BufWriter::new(f), self)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_reader(BufReader::new(f))?)
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn sine(freq: f64, rate: u32, len: usize, amp: f64) -> Waveform {
        let samples = (0..len)
            .map(|i| (amp * (2.0 * PI * freq * i as f64 / rate as f64).sin()) as f32)
            .collect();
        Waveform::new(samples, rate).unwrap()
    }

    fn small_cfg() -> StftConfig {
        StftConfig {
            n_fft: 256,
            hop: 64,
            sample_rate: 8000,
            log_floor: 1e-10,
        }
    }

    #[test]
    fn frame_count_matches_formula() {
        let cfg = StftConfig::default();
        assert_eq!(cfg.n_bins(), 513);
        assert_eq!(cfg.frame_count(16_000), 59);
        let s = compute_spectrogram(&Waveform::new(vec![0.0; 16_000], 16_000).unwrap(), &cfg)
            .unwrap();
        assert_eq!(s.n_frames(), 59);
        assert_eq!(s.n_bins(), 513);
    }

    #[test]
    fn silence_floors_out() {
        let cfg = StftConfig::default();
        let s = compute_spectrogram(&Waveform::new(vec![0.0; 4000], 16_000).unwrap(), &cfg)
            .unwrap();
        let expected = 1e-10f64.ln();
        assert!(s.values.iter().all(|&v| v == expected));
    }

    #[test]
    fn short_waveform_is_rejected() {
        let cfg = StftConfig::default();
        let err = compute_spectrogram(&Waveform::new(vec![0.0; 1000], 16_000).unwrap(), &cfg);
        assert!(matches!(err, Err(Error::Validation(_))));
    }

    /// The peak bin is checked against a direct O(N²) DFT of the windowed frame.
    #[test]
    fn sine_peaks_at_its_bin() {
        let cfg = small_cfg();
        let bin = 20;
        let freq = bin as f64 * cfg.sample_rate as f64 / cfg.n_fft as f64;
        let w = sine(freq, cfg.sample_rate, 4000, 0.5);
        let s = compute_spectrogram(&w, &cfg).unwrap();

        let win = hann_window(cfg.n_fft);
        let frame: Vec<f64> = (0..cfg.n_fft)
            .map(|i| w.samples[i] as f64 * win[i])
            .collect();
        let dft_mag = |k: usize| {
            let (mut re, mut im) = (0.0, 0.0);
            for (n, x) in frame.iter().enumerate() {
                let a = -2.0 * PI * (k * n) as f64 / cfg.n_fft as f64;
                re += x * a.cos();
                im += x * a.sin();
            }
            (re * re + im * im).sqrt()
        };
        let oracle_peak = (0..cfg.n_bins())
            .max_by(|&a, &b| dft_mag(a).total_cmp(&dft_mag(b)))
            .unwrap();
        assert_eq!(oracle_peak, bin);
        assert!((s.values[[0, bin]] - dft_mag(bin).ln()).abs() < 1e-4);
        for row in s.values.rows() {
            let peak = row.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
            assert_eq!(peak, bin);
        }
    }

    #[test]
    fn segment_of_exact_length_is_whole_spectrogram() {
        let s = Spectrogram::new(Array2::from_shape_fn((128, 4), |(t, k)| (t * k) as f64), 256)
            .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(sample_segment(&s, 128, &mut rng).unwrap(), s);
    }

    #[test]
    fn segment_is_seeded() {
        let s = Spectrogram::new(Array2::from_shape_fn((200, 3), |(t, _)| t as f64), 256).unwrap();
        let a = sample_segment(&s, 128, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = sample_segment(&s, 128, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.n_frames(), 128);
    }

    #[test]
    fn too_short_segment_source_has_distinct_error() {
        let s = Spectrogram::new(Array2::zeros((50, 3)), 256).unwrap();
        let err = sample_segment(&s, 128, &mut ChaCha8Rng::seed_from_u64(0)).unwrap_err();
        assert!(matches!(err, Error::TooShort { frames: 50, needed: 128 }));
    }

    /// Chi-square over the 129 possible offsets; the 0.999 quantile of
    /// chi2(128) is about 188.
    #[test]
    fn segment_offsets_are_uniform() {
        let s = Spectrogram::new(Array2::from_shape_fn((256, 1), |(t, _)| t as f64), 256).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut hist = [0usize; 129];
        let draws = 10_000;
        for _ in 0..draws {
            let seg = sample_segment(&s, 128, &mut rng).unwrap();
            hist[seg.values[[0, 0]] as usize] += 1;
        }
        let expected = draws as f64 / 129.0;
        let chi2: f64 = hist.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
        assert!(chi2 < 188.0, "chi2 = {chi2}");
        assert!(hist.iter().all(|&c| c > 0));
    }

    #[test]
    fn floor_spectrogram_inverts_to_silence() {
        let cfg = small_cfg();
        let s = Spectrogram::new(
            Array2::from_elem((20, cfg.n_bins()), cfg.log_floor.ln()),
            cfg.hop,
        )
        .unwrap();
        let w = invert_spectrogram(&s, &cfg, 10).unwrap();
        assert_eq!(w.len(), cfg.signal_len(20));
        assert!(w.samples.iter().all(|v| v.abs() < 1e-3));
    }

    fn test_clip(cfg: &StftConfig) -> Waveform {
        // Two gliding partials with an amplitude envelope.
        let n = cfg.sample_rate as usize;
        let samples = (0..n)
            .map(|i| {
                let t = i as f64 / cfg.sample_rate as f64;
                let env = (PI * t).sin();
                let f1 = 220.0 + 80.0 * t;
                let f2 = 660.0 - 120.0 * t;
                (env * (0.4 * (2.0 * PI * f1 * t).sin() + 0.2 * (2.0 * PI * f2 * t).sin())) as f32
            })
            .collect();
        Waveform::new(samples, cfg.sample_rate).unwrap()
    }

    #[test]
    fn griffin_lim_error_does_not_increase_with_iterations() {
        let cfg = small_cfg();
        let s = compute_spectrogram(&test_clip(&cfg), &cfg).unwrap();
        let errs: Vec<f64> = [0, 10, 50, 100]
            .iter()
            .map(|&n| spectral_convergence(&s, &invert_spectrogram(&s, &cfg, n).unwrap(), &cfg).unwrap())
            .collect();
        for pair in errs.windows(2) {
            assert!(pair[1] <= pair[0], "errors {errs:?}");
        }
        assert!(errs[3] < errs[1], "errors {errs:?}");
    }

    #[test]
    fn round_trip_keeps_sine_peak() {
        let cfg = small_cfg();
        let bin = 31;
        let freq = bin as f64 * cfg.sample_rate as f64 / cfg.n_fft as f64;
        let s = compute_spectrogram(&sine(freq, cfg.sample_rate, 3000, 0.5), &cfg).unwrap();
        let back = compute_spectrogram(&invert_spectrogram(&s, &cfg, 100).unwrap(), &cfg).unwrap();
        for row in back.values.rows() {
            let peak = row.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
            assert_eq!(peak, bin);
        }
    }

    #[test]
    fn invert_rejects_mismatched_geometry() {
        let cfg = small_cfg();
        let s = Spectrogram::new(Array2::zeros((4, 10)), cfg.hop).unwrap();
        assert!(matches!(invert_spectrogram(&s, &cfg, 1), Err(Error::Shape(_))));
    }

    #[test]
    fn stats_normalize_round_trip() {
        let a = Spectrogram::new(Array2::from_shape_fn((10, 3), |(t, k)| (t + k) as f64), 4).unwrap();
        let b = Spectrogram::new(Array2::from_shape_fn((6, 3), |(t, k)| (t * k) as f64), 4).unwrap();
        let stats = NormStats::fit([("p1", &a), ("p2", &b)]).unwrap();
        let st = stats.for_speaker(Some("p1")).unwrap();
        let n = st.normalize(&a);
        for col in n.values.columns() {
            let mean = col.mean().unwrap();
            let var = col.mapv(|v| (v - mean).powi(2)).mean().unwrap();
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-9);
        }
        let back = st.denormalize(&n);
        for (x, y) in back.values.iter().zip(a.values.iter()) {
            assert!((x - y).abs() < 1e-12);
        }
        assert!(matches!(stats.for_speaker(Some("nobody")), Err(Error::Lookup(_))));
    }

    proptest! {
        #[test]
        fn frame_count_formula_holds(n_fft in 8usize..300, hop_frac in 0.05f64..1.0, extra in 0usize..2000) {
            let hop = ((n_fft as f64 * hop_frac) as usize).max(1);
            let cfg = StftConfig { n_fft, hop, sample_rate: 8000, log_floor: 1e-10 };
            let len = n_fft + extra;
            let w = Waveform::new((0..len).map(|i| ((i * 7919) % 13) as f32 / 13.0 - 0.5).collect(), 8000).unwrap();
            let s = compute_spectrogram(&w, &cfg).unwrap();
            prop_assert_eq!(s.n_frames(), (len - n_fft) / hop + 1);
            prop_assert!(s.values.iter().all(|v| v.is_finite()));
        }
    }
}
