//! Three-stage training.
//!
//! The whole run is one fixed sequence of mini-batch updates:
//!
//! 1. preparatory: `pre_recon_steps` reconstruction updates of encoder and
//!    decoder, then `pre_clf_steps` classifier updates; the classifier is then frozen;
//! 2. stepback: `stepback_cycles` cycles of `ministage1_per_cycle` reconstruction
//!    updates followed by `ministage2_per_cycle` stepback updates;
//! 3. GAN: `gan_gen_steps` rounds of `disc_per_gen` critic updates followed by
//!    one generator (decoder) update.
//!
//! Position in that sequence is fully described by [`Counters`], and every
//! random draw of an update comes from a stream keyed by its objective and
//! index. A run resumed from a checkpoint therefore replays exactly the
//! updates an uninterrupted run would have made.

mod checkpoint;
mod config;
mod metrics;

use std::collections::BTreeMap;
use std::path::PathBuf;

use log::info;
use rand::Rng;
use serde::{Deserialize, Serialize};
use stepback_autodiff::grad;

pub use checkpoint::{Checkpoint, MAGIC, VERSION};
pub use config::{lambda_schedule, training_budget, TrainingConfig};
pub use metrics::{MetricLog, MetricRecord};

use crate::dataset::{BatchSampler, FeatureStore, Stage};
use crate::error::{Error, Result};
use crate::losses::{
    classifier_loss, conversion_identity_loss, discriminator_loss, generator_loss,
    reconstruction_loss, stepback_loss, Loss, ModelCritic,
};
use crate::model::{batch_input, Bound, Mode, Model, ModelState};
use crate::optim::Adam;
use crate::rng::stream;

/// Completed updates per objective.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counters {
    pub pre_recon: u64,
    pub pre_clf: u64,
    pub ministage1: u64,
    pub ministage2: u64,
    pub disc: u64,
    pub gen: u64,
}

impl Counters {
    pub fn total(&self) -> u64 {
        self.pre_recon + self.pre_clf + self.ministage1 + self.ministage2 + self.disc + self.gen
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainStage {
    Preparatory,
    Stepback,
    Gan,
}

impl TrainStage {
    pub fn name(self) -> &'static str {
        match self {
            TrainStage::Preparatory => "preparatory",
            TrainStage::Stepback => "stepback",
            TrainStage::Gan => "gan",
        }
    }
}

/// One kind of update.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Action {
    PreReconstruction,
    PreClassifier,
    MiniStage1,
    MiniStage2,
    Discriminator,
    Generator,
}

impl Action {
    pub fn stage(self) -> TrainStage {
        match self {
            Action::PreReconstruction | Action::PreClassifier => TrainStage::Preparatory,
            Action::MiniStage1 | Action::MiniStage2 => TrainStage::Stepback,
            Action::Discriminator | Action::Generator => TrainStage::Gan,
        }
    }

    /// Name in the metric log.
    pub fn objective(self) -> &'static str {
        match self {
            Action::PreReconstruction | Action::MiniStage1 => "l_pre",
            Action::PreClassifier => "l_clf",
            Action::MiniStage2 => "l_back",
            Action::Discriminator => "d_loss",
            Action::Generator => "g_loss",
        }
    }

    /// Key of the random streams and of the optimizer state.
    fn tag(self) -> &'static str {
        match self {
            Action::PreReconstruction => "prep/l_pre",
            Action::PreClassifier => "prep/l_clf",
            Action::MiniStage1 => "stepback/l_pre",
            Action::MiniStage2 => "stepback/l_back",
            Action::Discriminator => "gan/disc",
            Action::Generator => "gan/gen",
        }
    }

    fn optimizer(self) -> &'static str {
        match self {
            Action::PreReconstruction | Action::MiniStage1 => "pre",
            Action::PreClassifier => "clf",
            Action::MiniStage2 => "back",
            Action::Discriminator => "disc",
            Action::Generator => "gen",
        }
    }

    /// Parameter groups the update changes.
    fn trainable(self) -> &'static [&'static str] {
        match self {
            Action::PreReconstruction | Action::MiniStage1 | Action::MiniStage2 => &["enc", "dec"],
            Action::PreClassifier => &["clf"],
            Action::Discriminator => &["disc"],
            Action::Generator => &["dec"],
        }
    }
}

/// The update that follows `done` completed updates under `cfg`, or `None`
/// once the whole budget is spent.
pub fn scheduled_action(done: &Counters, cfg: &TrainingConfig) -> Option<Action> {
    if done.pre_recon < cfg.pre_recon_steps {
        return Some(Action::PreReconstruction);
    }
    if done.pre_clf < cfg.pre_clf_steps {
        return Some(Action::PreClassifier);
    }
    let cycle = cfg.ministage1_per_cycle + cfg.ministage2_per_cycle;
    let n = done.ministage1 + done.ministage2;
    if n < cfg.stepback_cycles * cycle {
        return Some(if n % cycle < cfg.ministage1_per_cycle {
            Action::MiniStage1
        } else {
            Action::MiniStage2
        });
    }
    let round = cfg.disc_per_gen + 1;
    let n = done.disc + done.gen;
    if n < cfg.gan_gen_steps * round {
        return Some(if n % round < cfg.disc_per_gen {
            Action::Discriminator
        } else {
            Action::Generator
        });
    }
    None
}

impl Counters {
    /// Counts `action` as done.
    pub fn record(&mut self, action: Action) {
        *self.slot(action) += 1;
    }

    /// Completed updates of `action`'s kind.
    pub fn count(&self, action: Action) -> u64 {
        match action {
            Action::PreReconstruction => self.pre_recon,
            Action::PreClassifier => self.pre_clf,
            Action::MiniStage1 => self.ministage1,
            Action::MiniStage2 => self.ministage2,
            Action::Discriminator => self.disc,
            Action::Generator => self.gen,
        }
    }

    fn slot(&mut self, action: Action) -> &mut u64 {
        match action {
            Action::PreReconstruction => &mut self.pre_recon,
            Action::PreClassifier => &mut self.pre_clf,
            Action::MiniStage1 => &mut self.ministage1,
            Action::MiniStage2 => &mut self.ministage2,
            Action::Discriminator => &mut self.disc,
            Action::Generator => &mut self.gen,
        }
    }
}

const OPTIMIZER_SLOTS: [&str; 5] = ["pre", "clf", "back", "disc", "gen"];

/// Drives training over a [`FeatureStore`].
pub struct Trainer<'a> {
    pub config: TrainingConfig,
    pub state: ModelState,
    pub counters: Counters,
    pub optimizers: BTreeMap<String, Adam>,
    pub log: MetricLog,
    store: &'a FeatureStore,
    sampler: BatchSampler<'a>,
}

impl<'a> Trainer<'a> {
    /// Fresh parameters, seeded from `config.seed`.
    pub fn new(config: TrainingConfig, store: &'a FeatureStore) -> Result<Self> {
        config.validate()?;
        let n_bins = store
            .entries
            .first()
            .map(|e| e.spectrogram.n_bins())
            .ok_or_else(|| Error::Data("no training utterances".into()))?;
        let model = Model::new(config.model_config()?, n_bins, store.speakers.len())?;
        let state = ModelState::new(model, &mut stream(config.seed, "init", 0));
        let optimizers = OPTIMIZER_SLOTS
            .iter()
            .map(|s| (s.to_string(), Adam::new(config.adam())))
            .collect();
        Self::assemble(config, state, Counters::default(), optimizers, store)
    }

    /// Continues from a checkpoint. The checkpoint's config wins over any other.
    pub fn resume(ckpt: Checkpoint, store: &'a FeatureStore) -> Result<Self> {
        if ckpt.speakers != store.speakers {
            return Err(Error::Config(
                "checkpoint speakers differ from the training data".into(),
            ));
        }
        let mut optimizers = ckpt.optimizers;
        for s in OPTIMIZER_SLOTS {
            optimizers
                .entry(s.to_string())
                .or_insert_with(|| Adam::new(ckpt.config.adam()));
        }
        Self::assemble(ckpt.config, ckpt.state, ckpt.counters, optimizers, store)
    }

    fn assemble(
        config: TrainingConfig,
        state: ModelState,
        counters: Counters,
        optimizers: BTreeMap<String, Adam>,
        store: &'a FeatureStore,
    ) -> Result<Self> {
        let sampler = BatchSampler::new(store, config.batch_size, config.segment_frames)?;
        let log = match &config.run_dir {
            Some(dir) => {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                MetricLog::append_to(&dir.join("metrics.jsonl"))?
            }
            None => MetricLog::in_memory(),
        };
        Ok(Trainer {
            config,
            state,
            counters,
            optimizers,
            log,
            store,
            sampler,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            state: self.state.clone(),
            config: self.config.clone(),
            speakers: self.store.speakers.clone(),
            stft: self.config.stft(),
            stats: self.store.stats.clone(),
            counters: self.counters.clone(),
            optimizers: self.optimizers.clone(),
        }
    }

    /// The update that comes next, or `None` when training is complete.
    pub fn next_action(&self) -> Option<Action> {
        scheduled_action(&self.counters, &self.config)
    }

    /// Runs every remaining update of `stage`. Earlier stages must be complete.
    pub fn run_stage(&mut self, stage: TrainStage) -> Result<()> {
        while let Some(action) = self.next_action() {
            let s = action.stage();
            if s == stage {
                self.step()?;
            } else if (s as u8) < (stage as u8) {
                return Err(Error::Config(format!(
                    "cannot run the {} stage before the {} stage is complete",
                    stage.name(),
                    s.name()
                )));
            } else {
                break;
            }
        }
        self.save_named(stage.name())?;
        Ok(())
    }

    /// Runs all remaining updates.
    pub fn run_all(&mut self) -> Result<()> {
        for stage in [TrainStage::Preparatory, TrainStage::Stepback, TrainStage::Gan] {
            self.run_stage(stage)?;
        }
        Ok(())
    }

    fn save_named(&self, name: &str) -> Result<()> {
        if let Some(dir) = &self.config.run_dir {
            let ckpt = self.checkpoint();
            ckpt.save(&dir.join(format!("{name}.ckpt")))?;
            ckpt.save(&dir.join("checkpoint.ckpt"))?;
        }
        Ok(())
    }

    fn run_dir_file(&self, name: &str) -> Option<PathBuf> {
        self.config.run_dir.as_ref().map(|d| d.join(name))
    }

    /// Performs the next update and returns its log record.
    pub fn step(&mut self) -> Result<Option<MetricRecord>> {
        let Some(action) = self.next_action() else {
            return Ok(None);
        };
        let index = self.action_count(action);
        let (loss, lambda) = match action {
            Action::PreReconstruction | Action::MiniStage1 => (self.reconstruction_update(action, index)?, None),
            Action::PreClassifier => (self.classifier_update(index)?, None),
            Action::MiniStage2 => {
                // The ramp is indexed by the 1-based stepback update number, so
                // it reaches its maximum at update `lambda_ramp_steps`.
                let lambda = lambda_schedule(index + 1, &self.config);
                (self.stepback_update(index, lambda)?, Some(lambda))
            }
            Action::Discriminator => (self.discriminator_update(index)?, None),
            Action::Generator => (self.generator_update(index)?, None),
        };
        self.counters.record(action);
        if action == Action::PreClassifier && self.counters.pre_clf == self.config.pre_clf_steps {
            self.state.classifier_frozen = true;
            info!("classifier frozen after {} updates", self.counters.pre_clf);
        }
        let record = MetricRecord {
            iteration: self.counters.total(),
            stage: action.stage().name().into(),
            objective: action.objective().into(),
            step: index + 1,
            loss: loss.value.value,
            components: loss.value.components,
            lambda,
        };
        self.log.push(&record)?;
        let every = self.config.checkpoint_every;
        if every > 0 && self.counters.total() % every == 0 {
            if let Some(path) = self.run_dir_file("checkpoint.ckpt") {
                self.checkpoint().save(&path)?;
            }
        }
        Ok(Some(record))
    }

    fn action_count(&self, action: Action) -> u64 {
        self.counters.count(action)
    }

    fn rng(&self, action: Action, purpose: &str, index: u64) -> crate::rng::StreamRng {
        stream(self.config.seed, &format!("{}/{purpose}", action.tag()), index)
    }

    fn batch(&self, action: Action, stage: Stage, index: u64) -> Result<crate::dataset::Batch> {
        self.sampler
            .next_batch(stage, &mut self.rng(action, "batch", index))
    }

    /// Differentiates `loss` with respect to the trainable leaves of `p` and
    /// applies the action's optimizer. Non-finite values abort the run.
    fn apply(&mut self, action: Action, loss: Loss, p: &Bound) -> Result<Loss> {
        let (names, vars) = p.trainable();
        let grads = grad(&loss.total, &vars, false);
        let finite = loss.value.is_finite()
            && grads.iter().all(|g| g.value().iter().all(|v| v.is_finite()));
        if !finite {
            return Err(self.diverged(action));
        }
        let pairs: Vec<_> = names
            .into_iter()
            .zip(grads.into_iter().map(|g| g.value().clone()))
            .collect();
        self.optimizers
            .get_mut(action.optimizer())
            .expect("all optimizer slots exist")
            .step(&mut self.state.params, &pairs)?;
        Ok(loss)
    }

    fn diverged(&self, action: Action) -> Error {
        if let Some(path) = self.run_dir_file("diverged.ckpt") {
            match self.checkpoint().save(&path) {
                Ok(()) => log::error!("wrote diagnostic checkpoint {}", path.display()),
                Err(e) => log::error!("could not write diagnostic checkpoint: {e}"),
            }
        }
        Error::Divergence {
            stage: action.stage().name().into(),
            objective: action.objective().into(),
            step: self.action_count(action) + 1,
        }
    }

    fn reconstruction_update(&mut self, action: Action, index: u64) -> Result<Loss> {
        let batch = self.batch(action, Stage::Reconstruction, index)?;
        let x = batch_input(batch.to_array());
        let p = self.state.params.bind(action.trainable());
        let mut drop = self.rng(action, "dropout", index);
        let mut mode = Mode::Train(&mut drop);
        let model = &self.state.model;
        let z = model.encode(&p, &x, &mut mode)?;
        let y = model.decode(&p, &z, &batch.speaker_indices(), &mut mode)?;
        let loss = reconstruction_loss(&y, &x)?;
        self.apply(action, loss, &p)
    }

    fn classifier_update(&mut self, index: u64) -> Result<Loss> {
        let action = Action::PreClassifier;
        let batch = self.batch(action, Stage::Classifier, index)?;
        let x = batch_input(batch.to_array());
        let p = self.state.params.bind(action.trainable());
        let mut drop = self.rng(action, "dropout", index);
        let lp = self
            .state
            .model
            .classify(&p, &x, &mut Mode::Train(&mut drop))?;
        let loss = classifier_loss(&lp, &batch.speaker_indices())?;
        self.apply(action, loss, &p)
    }

    /// `z = enc(x)`, `y = dec(z, i)`, `y′ = dec(z, i′)` through the one shared
    /// decoder; `−λ·MAE(y, x) + NLL(clf(y′), i′)` with the classifier held fixed.
    fn stepback_update(&mut self, index: u64, lambda: f64) -> Result<Loss> {
        let action = Action::MiniStage2;
        if !self.state.classifier_frozen {
            return Err(Error::Config("stepback updates need a frozen classifier".into()));
        }
        let batch = self.batch(action, Stage::Stepback, index)?;
        let others = batch
            .other_indices()
            .ok_or_else(|| Error::Data("stepback batch without conversion targets".into()))?;
        let x = batch_input(batch.to_array());
        let p = self.state.params.bind(action.trainable());
        let mut drop = self.rng(action, "dropout", index);
        let mut mode = Mode::Train(&mut drop);
        let model = &self.state.model;
        let z = model.encode(&p, &x, &mut mode)?;
        let y = model.decode(&p, &z, &batch.speaker_indices(), &mut mode)?;
        let y_conv = model.decode(&p, &z, &others, &mut mode)?;
        let l_upp = reconstruction_loss(&y, &x)?;
        let lp = model.classify(&p, &y_conv, &mut Mode::Eval)?;
        let l_low = conversion_identity_loss(&lp, &others)?;
        let loss = stepback_loss(&l_upp, &l_low, lambda)?;
        self.apply(action, loss, &p)
    }

    /// Conversion targets for the GAN stage: uniform over all speakers.
    fn gan_targets(&self, action: Action, index: u64, n: usize) -> Vec<usize> {
        let mut rng = self.rng(action, "target", index);
        (0..n)
            .map(|_| rng.random_range(0..self.state.model.n_speakers))
            .collect()
    }

    fn discriminator_update(&mut self, index: u64) -> Result<Loss> {
        let action = Action::Discriminator;
        let batch = self.batch(action, Stage::Gan, index)?;
        let targets = self.gan_targets(action, index, batch.len());
        let x = batch_input(batch.to_array());
        let p = self.state.params.bind(action.trainable());
        let model = &self.state.model;
        let z = model.encode(&p, &x, &mut Mode::Eval)?;
        let fake = model.decode(&p, &z, &targets, &mut Mode::Eval)?;
        let mut drop = self.rng(action, "dropout", index);
        let mut gp_rng = self.rng(action, "interpolate", index);
        let mut critic = ModelCritic {
            model,
            params: &p,
            mode: Mode::Train(&mut drop),
        };
        let labels = batch.speaker_indices();
        let loss = discriminator_loss(
            &mut critic,
            &x,
            &fake,
            Some(&labels),
            self.config.gp_weight,
            &mut gp_rng,
        )?;
        self.apply(action, loss, &p)
    }

    fn generator_update(&mut self, index: u64) -> Result<Loss> {
        let action = Action::Generator;
        let batch = self.batch(action, Stage::Gan, index)?;
        let targets = self.gan_targets(action, index, batch.len());
        let x = batch_input(batch.to_array());
        let p = self.state.params.bind(action.trainable());
        let model = &self.state.model;
        let z = model.encode(&p, &x, &mut Mode::Eval)?;
        let fake = model.decode(&p, &z, &targets, &mut Mode::Eval)?;
        let mut drop = self.rng(action, "dropout", index);
        let mut critic = ModelCritic {
            model,
            params: &p,
            mode: Mode::Train(&mut drop),
        };
        let loss = generator_loss(&mut critic, &fake, Some(&targets))?;
        self.apply(action, loss, &p)
    }
}
