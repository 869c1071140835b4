//! `stepback` command-line interface.

use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use log::info;
use stepback_core::convert::{convert, ConversionRequest, DEFAULT_GRIFFIN_LIM_ITERS};
use stepback_core::dataset::{build_manifest, FeatureStore, Manifest, ManifestOptions};
use stepback_core::evaluation::api::{serve, AppState};
use stepback_core::evaluation::{
    aggregate_results, build_ab_sessions, global_variance_of_files, read_converted_samples,
    render_heatmap, ConversionKind, ResponseStore, SampleManifest, SessionSet,
};
use stepback_core::features::{compute_spectrogram, load_waveform, Spectrogram, StftConfig};
use stepback_core::trainer::{training_budget, Checkpoint, TrainStage, Trainer, TrainingConfig};

#[derive(Parser)]
#[command(name = "stepback", version, about = "Stepback voice conversion toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Corpus manifests.
    Dataset {
        #[command(subcommand)]
        command: DatasetCommand,
    },
    /// Print a training config preset as TOML.
    Config {
        #[arg(long, value_enum, default_value_t = Preset::Paper)]
        preset: Preset,
    },
    /// Train, or continue training from a checkpoint.
    Train {
        /// TOML training config. Ignored with --resume (the checkpoint's config is used).
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = StageArg::All)]
        stage: StageArg,
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Overrides the config's manifest.
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Overrides the config's run directory.
        #[arg(long)]
        run_dir: Option<PathBuf>,
    },
    /// Convert one utterance to a target speaker.
    Convert {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        src: PathBuf,
        /// Target speaker code, e.g. p225.
        #[arg(long)]
        target: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = DEFAULT_GRIFFIN_LIM_ITERS)]
        gl_iters: usize,
        /// Source speaker code; pooled normalization statistics are used when omitted.
        #[arg(long)]
        source_speaker: Option<String>,
    },
    /// Objective metrics and the listening test.
    Eval {
        #[command(subcommand)]
        command: EvalCommand,
    },
}

#[derive(Subcommand)]
enum DatasetCommand {
    /// Select the speaker subset and split utterances into train/test.
    Build {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 10)]
        per_gender: usize,
    },
}

#[derive(Subcommand)]
enum EvalCommand {
    /// Per-bin global variance of converted utterances of one gender pairing.
    Gv {
        /// JSONL lines of `{path, source_gender, target_gender}`.
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        kind: ConversionKind,
        #[arg(long)]
        out: PathBuf,
    },
    /// Draw a spectrogram heatmap from a WAV file or a spectrogram JSON file.
    Heatmap {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// A/B listening sessions.
    Sessions {
        #[command(subcommand)]
        command: SessionsCommand,
    },
    /// Serve the listening-test HTTP API.
    Serve {
        #[arg(long)]
        sessions: PathBuf,
        #[arg(long)]
        responses: PathBuf,
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: SocketAddr,
        #[arg(long, env = "STEPBACK_ADMIN_TOKEN")]
        admin_token: String,
    },
}

#[derive(Subcommand)]
enum SessionsCommand {
    /// Build blinded sessions from a sample manifest.
    Build {
        #[arg(long)]
        samples: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 20)]
        sections: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Unblind and tabulate recorded responses.
    Aggregate {
        #[arg(long)]
        sessions: PathBuf,
        #[arg(long)]
        responses: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Paper,
    Desk,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum StageArg {
    All,
    Prep,
    Stepback,
    Gan,
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Dataset {
            command:
                DatasetCommand::Build {
                    corpus,
                    out,
                    seed,
                    per_gender,
                },
        } => {
            let opts = ManifestOptions {
                seed,
                per_gender,
                ..ManifestOptions::default()
            };
            let report = build_manifest(&corpus, &opts)?;
            report.manifest.save(&out)?;
            info!(
                "{} speakers, {} utterances; {} unreadable, {} too short",
                report.manifest.speakers.len(),
                report.manifest.records.len(),
                report.skipped_unreadable,
                report.excluded_short
            );
        }
        Command::Config { preset } => {
            let cfg = match preset {
                Preset::Paper => TrainingConfig::paper(),
                Preset::Desk => TrainingConfig::desk(),
            };
            print!("{}", cfg.to_toml_string()?);
        }
        Command::Train {
            config,
            stage,
            resume,
            manifest,
            run_dir,
        } => train(config, stage, resume, manifest, run_dir)?,
        Command::Convert {
            ckpt,
            src,
            target,
            out,
            gl_iters,
            source_speaker,
        } => {
            let spec = convert(&ConversionRequest {
                source_path: src,
                target_speaker: target,
                checkpoint: ckpt,
                output_path: out.clone(),
                griffin_lim_iters: gl_iters,
                source_speaker,
            })?;
            info!("wrote {} ({} frames)", out.display(), spec.n_frames());
        }
        Command::Eval { command } => eval(command)?,
    }
    Ok(())
}

fn train(
    config: Option<PathBuf>,
    stage: StageArg,
    resume: Option<PathBuf>,
    manifest: Option<PathBuf>,
    run_dir: Option<PathBuf>,
) -> Result<()> {
    let mut ckpt = resume
        .as_deref()
        .map(Checkpoint::load)
        .transpose()
        .context("loading checkpoint")?;
    let mut cfg = match (&ckpt, &config) {
        (Some(c), _) => c.config.clone(),
        (None, Some(path)) => TrainingConfig::load(path)?,
        (None, None) => bail!("either --config or --resume is required"),
    };
    if let Some(m) = manifest {
        cfg.manifest = Some(m);
    }
    if let Some(d) = run_dir {
        cfg.run_dir = Some(d);
    }
    let manifest_path = cfg
        .manifest
        .clone()
        .context("no manifest given in the config or with --manifest")?;
    let manifest = Manifest::load(&manifest_path)?;
    let store = FeatureStore::from_manifest(&manifest, &cfg.stft())?;
    info!(
        "{} training utterances, {} mini-batches in the full schedule",
        store.entries.len(),
        training_budget(&cfg)
    );
    let mut trainer = match ckpt.take() {
        Some(mut c) => {
            c.config = cfg;
            Trainer::resume(c, &store)?
        }
        None => Trainer::new(cfg, &store)?,
    };
    match stage {
        StageArg::All => trainer.run_all()?,
        StageArg::Prep => trainer.run_stage(TrainStage::Preparatory)?,
        StageArg::Stepback => trainer.run_stage(TrainStage::Stepback)?,
        StageArg::Gan => trainer.run_stage(TrainStage::Gan)?,
    }
    info!("finished at mini-batch {}", trainer.counters.total());
    Ok(())
}

fn load_spectrogram(path: &Path) -> Result<Spectrogram> {
    let is_json = path
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("json"));
    if is_json {
        return Ok(Spectrogram::load_json(path)?);
    }
    let stft = StftConfig::default();
    Ok(compute_spectrogram(&load_waveform(path, stft.sample_rate)?, &stft)?)
}

fn eval(command: EvalCommand) -> Result<()> {
    match command {
        EvalCommand::Gv {
            manifest,
            kind,
            out,
        } => {
            let samples = read_converted_samples(&manifest)?;
            let profile = global_variance_of_files(&samples, kind, &StftConfig::default())?;
            profile.write_csv(&out)?;
            info!("{} utterances, {} bins", profile.n_utterances, profile.variances.len());
        }
        EvalCommand::Heatmap { input, out } => render_heatmap(&load_spectrogram(&input)?, &out)?,
        EvalCommand::Sessions {
            command:
                SessionsCommand::Build {
                    samples,
                    out,
                    sections,
                    seed,
                },
        } => {
            let set = build_ab_sessions(&SampleManifest::load(&samples)?, sections, seed)?;
            set.save(&out)?;
            info!("{} sessions written to {}", set.sessions.len(), out.display());
        }
        EvalCommand::Sessions {
            command: SessionsCommand::Aggregate {
                sessions,
                responses,
            },
        } => {
            let set = SessionSet::load(&sessions)?;
            let store = ResponseStore::open(&responses)?;
            let table = aggregate_results(&set, &store.records())?;
            println!("{}", serde_json::to_string_pretty(&table)?);
        }
        EvalCommand::Serve {
            sessions,
            responses,
            addr,
            admin_token,
        } => {
            let state = AppState {
                sessions: Arc::new(SessionSet::load(&sessions)?),
                store: Arc::new(ResponseStore::open(&responses)?),
                admin_token: Arc::new(admin_token),
            };
            info!("listening on http://{addr}");
            tokio::runtime::Runtime::new()?.block_on(serve(addr, state))?;
        }
    }
    Ok(())
}
