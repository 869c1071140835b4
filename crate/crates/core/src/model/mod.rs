//! The four networks: content encoder, speaker-conditioned decoder, speech
//! speaker classifier and patch discriminator.
//!
//! Spectrogram batches enter as `[batch, bins, frames]`. The encoder and
//! decoder are 1-D (bins are channels); the classifier and discriminator treat
//! the batch as single-channel images of `bins × frames`. No layer spans time
//! with a fully connected map, so every network accepts variable lengths.
//!
//! There is exactly one set of decoder parameters. Decoding the same latent
//! for two speakers (the reconstruction and the conversion branch) is two
//! calls of [`Model::decode`] on the same [`Bound`], so both branches share
//! weights and their gradients accumulate into the same leaves.

mod layers;
mod params;

use std::collections::BTreeMap;

use ndarray::Array3;
use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};
use stepback_autodiff::Var;

use crate::error::{Error, Result};
use layers::*;
pub use layers::IN_EPS;
pub use params::{Bound, ParamStore};
use params::Init;

/// Total time compression of the encoder (three stride-2 blocks).
pub const TIME_REDUCTION: usize = 8;
const ENC_CONV_BLOCKS: usize = 3;

/// Architecture hyper-parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Encoder/decoder channel width; also the latent width.
    pub width: usize,
    /// Conv-bank kernel sizes run from 1 to this value.
    pub bank_kernels: usize,
    /// Output channels of each conv-bank kernel.
    pub bank_channels: usize,
    pub dense_blocks: usize,
    /// Hidden width of the decoder's bidirectional GRU (the encoder's equals `width`).
    pub decoder_gru: usize,
    /// Output channels of each strided 2-D block of the classifier and discriminator.
    pub patch_channels: Vec<usize>,
    /// Channels of the 1×1 convolution after the strided blocks.
    pub patch_out_channels: usize,
    pub encoder_dropout: f64,
    pub patch_dropout: f64,
    pub leaky_slope: f64,
}

impl ModelConfig {
    /// Full-size networks.
    pub fn paper() -> Self {
        ModelConfig {
            width: 512,
            bank_kernels: 8,
            bank_channels: 128,
            dense_blocks: 4,
            decoder_gru: 256,
            patch_channels: vec![64, 128, 256, 512, 512],
            patch_out_channels: 32,
            encoder_dropout: 0.5,
            patch_dropout: 0.1,
            leaky_slope: 0.01,
        }
    }

    /// Same topology with narrow layers, for CPU runs.
    pub fn desk() -> Self {
        ModelConfig {
            width: 64,
            bank_channels: 16,
            decoder_gru: 32,
            patch_channels: vec![8, 16, 16, 32, 32],
            patch_out_channels: 8,
            ..Self::paper()
        }
    }

    /// Width-16 networks with two patch blocks, for gradient checks on 16-frame inputs.
    pub fn tiny() -> Self {
        ModelConfig {
            width: 16,
            bank_channels: 2,
            decoder_gru: 8,
            patch_channels: vec![4, 8],
            patch_out_channels: 4,
            ..Self::paper()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.width,
            self.bank_kernels,
            self.bank_channels,
            self.decoder_gru,
            self.patch_out_channels,
        ];
        if positive.contains(&0) || self.patch_channels.is_empty() || self.patch_channels.contains(&0) {
            return Err(Error::Config("model widths must be positive".into()));
        }
        for p in [self.encoder_dropout, self.patch_dropout] {
            if !(0.0..1.0).contains(&p) {
                return Err(Error::Config(format!("dropout rate {p} outside [0, 1)")));
            }
        }
        Ok(())
    }

    /// Shortest input the classifier and discriminator accept.
    pub fn min_patch_frames(&self) -> usize {
        1 << self.patch_channels.len()
    }
}

/// Forward-pass behaviour. Training mode draws dropout masks from the given source.
pub enum Mode<'r> {
    Eval,
    Train(&'r mut dyn RngCore),
}

/// Output of the discriminator's shared trunk and its two heads.
pub struct Critique {
    /// `[B]`
    pub realness: Var,
    /// `[B, n_speakers]`, unnormalized.
    pub speaker_logits: Var,
}

/// Network topology for a given bin and speaker count. Holds no parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub config: ModelConfig,
    pub n_bins: usize,
    pub n_speakers: usize,
}

impl Model {
    pub fn new(config: ModelConfig, n_bins: usize, n_speakers: usize) -> Result<Self> {
        config.validate()?;
        if n_bins == 0 || n_speakers == 0 {
            return Err(Error::Config("need at least one bin and one speaker".into()));
        }
        Ok(Model {
            config,
            n_bins,
            n_speakers,
        })
    }

    /// Freshly initialized parameters for all four networks.
    pub fn init_params<R: Rng>(&self, rng: &mut R) -> ParamStore {
        let mut store = ParamStore::new();
        self.run_init(&mut Init {
            store: &mut store,
            rng: Some(rng),
            shapes: BTreeMap::new(),
        });
        store
    }

    /// Name → shape of every parameter, without allocating them.
    pub fn param_shapes(&self) -> BTreeMap<String, Vec<usize>> {
        let mut store = ParamStore::new();
        let mut init = Init::<crate::rng::StreamRng> {
            store: &mut store,
            rng: None,
            shapes: BTreeMap::new(),
        };
        self.run_init(&mut init);
        init.shapes
    }

    fn run_init<R: Rng>(&self, init: &mut Init<R>) {
        self.init_encoder(init);
        self.init_decoder(init);
        self.init_patch("clf", init);
        self.init_patch("disc", init);
    }

    fn init_encoder<R: Rng>(&self, init: &mut Init<R>) {
        let c = &self.config;
        let w = c.width;
        for k in 1..=c.bank_kernels {
            init_conv1d(init, &format!("enc.bank.k{k}"), self.n_bins, c.bank_channels, k);
        }
        init_conv1d(init, "enc.bank.proj", c.bank_kernels * c.bank_channels, w, 1);
        for i in 0..ENC_CONV_BLOCKS {
            init_conv1d(init, &format!("enc.conv{i}.a"), w, w, 5);
            init_conv1d(init, &format!("enc.conv{i}.b"), w, w, 5);
        }
        for i in 0..c.dense_blocks {
            init_conv1d(init, &format!("enc.dense{i}"), w, w, 1);
        }
        init_bigru(init, "enc.gru", w, w);
    }

    fn init_decoder<R: Rng>(&self, init: &mut Init<R>) {
        let c = &self.config;
        let w = c.width;
        let n = self.n_speakers;
        for i in 0..ENC_CONV_BLOCKS {
            init.uniform(format!("dec.conv{i}.emb"), &[n, w], 1.0);
            init_conv1d(init, &format!("dec.conv{i}.a"), w, 2 * w, 3);
            init_conv1d(init, &format!("dec.conv{i}.b"), w, w, 3);
        }
        for i in 0..c.dense_blocks {
            init.uniform(format!("dec.dense{i}.emb"), &[n, w], 1.0);
            init_conv1d(init, &format!("dec.dense{i}"), w, w, 1);
        }
        init.uniform("dec.gru.emb".into(), &[n, w], 1.0);
        init_bigru(init, "dec.gru", w, c.decoder_gru);
        init_conv1d(init, "dec.align", c.decoder_gru, w, 1);
        init_conv1d(init, "dec.out", w, self.n_bins, 1);
    }

    fn init_patch<R: Rng>(&self, net: &str, init: &mut Init<R>) {
        let c = &self.config;
        let mut c_in = 1;
        for (i, &c_out) in c.patch_channels.iter().enumerate() {
            init_conv2d(init, &format!("{net}.conv{i}"), c_in, c_out, 5);
            c_in = c_out;
        }
        init_conv1d(init, &format!("{net}.proj"), c_in, c.patch_out_channels, 1);
        let feat = c.patch_out_channels * self.patch_freq_bins();
        if net == "disc" {
            init_conv1d(init, "disc.real", feat, 1, 1);
            init_conv1d(init, "disc.spk", feat, self.n_speakers, 1);
        } else {
            init_conv1d(init, &format!("{net}.fc"), feat, self.n_speakers, 1);
        }
    }

    /// Frequency rows left after the strided 2-D blocks.
    pub fn patch_freq_bins(&self) -> usize {
        self.config
            .patch_channels
            .iter()
            .fold(self.n_bins, |f, _| f.div_ceil(2))
    }

    fn check_input(&self, x: &Var) -> Result<(usize, usize)> {
        match *x.shape() {
            [b, f, t] if f == self.n_bins && b > 0 => Ok((b, t)),
            _ => Err(Error::Shape(format!(
                "expected [batch, {}, frames], got {:?}",
                self.n_bins,
                x.shape()
            ))),
        }
    }

    fn check_speakers(&self, ids: &[usize], batch: usize) -> Result<()> {
        if ids.len() != batch {
            return Err(Error::Shape(format!(
                "{} speaker ids for a batch of {batch}",
                ids.len()
            )));
        }
        match ids.iter().find(|&&i| i >= self.n_speakers) {
            Some(i) => Err(Error::Lookup(format!(
                "speaker index {i} outside [0, {})",
                self.n_speakers
            ))),
            None => Ok(()),
        }
    }

    /// `[B, bins, T]` → latent `[B, width, T/8]`.
    pub fn encode(&self, p: &Bound, x: &Var, mode: &mut Mode) -> Result<Var> {
        let (_, t) = self.check_input(x)?;
        if t == 0 || t % TIME_REDUCTION != 0 {
            return Err(Error::Shape(format!(
                "encoder input needs a positive multiple of {TIME_REDUCTION} frames, got {t}"
            )));
        }
        let c = &self.config;
        let slope = c.leaky_slope;

        let bank: Vec<Var> = (1..=c.bank_kernels)
            .map(|k| conv1d(p, &format!("enc.bank.k{k}"), x, k, 1, same_pad(k)))
            .collect::<Result<_>>()?;
        let h = instance_norm(&Var::concat(&bank, 1).leaky_relu(slope));
        let mut h = pointwise(p, "enc.bank.proj", &h)?;

        for i in 0..ENC_CONV_BLOCKS {
            let a = conv1d(p, &format!("enc.conv{i}.a"), &h, 5, 1, (2, 2))?.leaky_relu(slope);
            let b = conv1d(p, &format!("enc.conv{i}.b"), &a, 5, 2, (2, 2))?.leaky_relu(slope);
            h = instance_norm(&b).add(&avg_pool2(&h));
            h = dropout(&h, c.encoder_dropout, mode);
        }
        for i in 0..c.dense_blocks {
            let d = instance_norm(&pointwise(p, &format!("enc.dense{i}"), &h)?);
            h = dropout(&h.add(&d), c.encoder_dropout, mode);
        }
        Ok(h.add(&bigru(p, "enc.gru", &h)?))
    }

    /// Latent `[B, width, T']` and one speaker index per item → `[B, bins, 8·T']`.
    pub fn decode(&self, p: &Bound, z: &Var, speakers: &[usize], _mode: &mut Mode) -> Result<Var> {
        let c = &self.config;
        let [b, w, _] = match *z.shape() {
            [b, w, t] if w == c.width && t > 0 => [b, w, t],
            _ => {
                return Err(Error::Shape(format!(
                    "expected latent [batch, {}, steps], got {:?}",
                    c.width,
                    z.shape()
                )))
            }
        };
        self.check_speakers(speakers, b)?;
        let slope = c.leaky_slope;

        let mut h = z.clone();
        for i in 0..ENC_CONV_BLOCKS {
            let he = add_embedding(p, &format!("dec.conv{i}.emb"), &h, speakers)?;
            let a = conv1d(p, &format!("dec.conv{i}.a"), &he, 3, 1, (1, 1))?.leaky_relu(slope);
            let a = pixel_shuffle(&a, 2);
            let a = conv1d(p, &format!("dec.conv{i}.b"), &a, 3, 1, (1, 1))?.leaky_relu(slope);
            debug_assert_eq!(a.shape()[1], w);
            h = instance_norm(&a).add(&upsample2(&he));
        }
        for i in 0..c.dense_blocks {
            let he = add_embedding(p, &format!("dec.dense{i}.emb"), &h, speakers)?;
            h = he.add(&instance_norm(&pointwise(p, &format!("dec.dense{i}"), &he)?));
        }
        let he = add_embedding(p, "dec.gru.emb", &h, speakers)?;
        let rec = pointwise(p, "dec.align", &bigru(p, "dec.gru", &he)?)?;
        pointwise(p, "dec.out", &h.add(&rec))
    }

    /// Shared conv trunk: `[B, bins, T]` → per-frame features `[B·T', C·F']` and `T'`.
    fn patch_trunk(&self, net: &str, p: &Bound, x: &Var, mode: &mut Mode) -> Result<(Var, usize)> {
        let (b, t) = self.check_input(x)?;
        let c = &self.config;
        if t < c.min_patch_frames() {
            return Err(Error::Shape(format!(
                "{net} needs at least {} frames, got {t}",
                c.min_patch_frames()
            )));
        }
        let mut h = x.reshape(&[b, 1, self.n_bins, t]);
        for i in 0..c.patch_channels.len() {
            h = conv2d(p, &format!("{net}.conv{i}"), &h, 5, 2, 2)?.leaky_relu(c.leaky_slope);
            h = dropout(&instance_norm(&h), c.patch_dropout, mode);
        }
        let [_, ch, f, tt] = dims4(&h);
        let h = conv1d(p, &format!("{net}.proj"), &h.reshape(&[b, ch, f * tt]), 1, 1, (0, 0))?;
        let feats = h
            .reshape(&[b, c.patch_out_channels * f, tt])
            .permute(&[0, 2, 1])
            .reshape(&[b * tt, c.patch_out_channels * f]);
        Ok((feats, tt))
    }

    /// Frame-wise fully connected head averaged over time: `[B, out]`.
    fn head(p: &Bound, name: &str, feats: &Var, b: usize, tt: usize) -> Result<Var> {
        let w = p.get(&format!("{name}.w"))?;
        let bias = p.get(&format!("{name}.b"))?;
        let out = w.shape()[0];
        Ok(feats
            .matmul(&w.t())
            .add(bias)
            .reshape(&[b, tt, out])
            .mean_keepdim(&[1])
            .reshape(&[b, out]))
    }

    /// Speaker log-probabilities `[B, n_speakers]`.
    pub fn classify(&self, p: &Bound, x: &Var, mode: &mut Mode) -> Result<Var> {
        let (feats, tt) = self.patch_trunk("clf", p, x, mode)?;
        let b = x.shape()[0];
        Ok(Self::head(p, "clf.fc", &feats, b, tt)?.log_softmax(1))
    }

    /// Realness score and auxiliary speaker logits from one trunk pass.
    pub fn discriminate(&self, p: &Bound, x: &Var, mode: &mut Mode) -> Result<Critique> {
        let (feats, tt) = self.patch_trunk("disc", p, x, mode)?;
        let b = x.shape()[0];
        Ok(Critique {
            realness: Self::head(p, "disc.real", &feats, b, tt)?.reshape(&[b]),
            speaker_logits: Self::head(p, "disc.spk", &feats, b, tt)?,
        })
    }
}

/// Parameters plus topology and the classifier freeze flag.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelState {
    pub model: Model,
    pub params: ParamStore,
    pub classifier_frozen: bool,
}

impl ModelState {
    pub fn new<R: Rng>(model: Model, rng: &mut R) -> Self {
        let params = model.init_params(rng);
        ModelState {
            model,
            params,
            classifier_frozen: false,
        }
    }

    pub fn classifier_checksum(&self) -> String {
        self.params.checksum("clf")
    }
}

/// A `[B, bins, T]` batch as a graph constant.
pub fn batch_input(x: Array3<f64>) -> Var {
    Var::constant(x.into_dyn())
}
