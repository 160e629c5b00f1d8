use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;

use repsense::dataset::split_sessions;
use repsense::error::{Error, Result};
use repsense::eval::evaluate;
use repsense::models::{load_weights, save_weights, ClsModel, ModelConfig, ModelWeights};
use repsense::service::{serve, AppState, Ingest};
use repsense::session::{list_sessions, read_session, write_session, RawSample, Session};
use repsense::signal::{preprocess, PreprocessOptions};
use repsense::streaming::{bench_latency, LivePipeline};
use repsense::synth::{generate_session, write_corpus, SyntheticProfile};
use repsense::training::{train_classification, train_segmentation, write_history, PreparedSession, TrainConfig};
use repsense::{MAX_WINDOWS, SAMPLE_RATE_HZ};

#[derive(Parser, Debug)]
#[command(name = "repsense", version, about = "Rep segmentation and near-failure detection from wrist IMU data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic corpus of labelled sets.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 50)]
        sets: usize,
        /// Override the number of reps per set.
        #[arg(long)]
        reps: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Fixed synthetic profile (TOML) instead of randomized ones.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Resample and smooth every session in a directory.
    Preprocess {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the segmentation network.
    TrainSeg {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Run config (TOML with [model] and [train] tables).
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Train the near-failure classifier on a frozen segmentation model.
    TrainCls {
        #[arg(long)]
        data: PathBuf,
        /// Segmentation weights from train-seg.
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Score a classifier on a directory of sessions under real-time simulation.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        model: PathBuf,
        /// Also write the report as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Replay a recorded session through the live pipeline, one JSON event per line.
    Stream {
        /// Session base path (without extension).
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        model: PathBuf,
    },
    /// Measure inference latency against window count.
    Bench {
        /// Classifier weights; a freshly initialized compact model when absent.
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long, default_value_t = 20)]
        reps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Accept live recordings over WebSocket.
    Serve {
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long)]
        model: Option<PathBuf>,
        /// Directory for stopped recordings.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Contents of a `--config` file. Both tables are optional.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RunConfig {
    #[serde(default = "ModelConfig::compact")]
    model: ModelConfig,
    #[serde(default = "TrainConfig::desk")]
    train: TrainConfig,
}

impl RunConfig {
    fn load(path: Option<&Path>) -> Result<Self> {
        let cfg = match path {
            Some(p) => toml::from_str(&fs::read_to_string(p)?).map_err(|e| Error::Format(format!("{}: {e}", p.display())))?,
            None => RunConfig { model: ModelConfig::compact(), train: TrainConfig::desk() },
        };
        cfg.model.validate()?;
        cfg.train.validate()?;
        Ok(cfg)
    }
}

fn load_prepared(dir: &Path) -> Result<Vec<(String, PreparedSession)>> {
    let bases = list_sessions(dir)?;
    if bases.is_empty() {
        return Err(Error::Validation(format!("no sessions in {}", dir.display())));
    }
    bases
        .iter()
        .enumerate()
        .map(|(i, base)| {
            let name = base.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
            let session = read_session(base)?;
            Ok((name, PreparedSession::from_session(i, &session)?))
        })
        .collect()
}

fn split(prepared: Vec<(String, PreparedSession)>, cfg: &TrainConfig) -> Result<(Vec<PreparedSession>, Vec<PreparedSession>)> {
    let (tr, va) = split_sessions(prepared.len(), cfg.train_fraction, cfg.seed)?;
    let train = tr.iter().map(|&i| prepared[i].1.clone()).collect();
    let val = va.iter().map(|&i| prepared[i].1.clone()).collect();
    Ok((train, val))
}

fn save_history(out: &Path, history: &[repsense::training::HistoryRecord]) -> Result<()> {
    let path = out.with_extension("history.jsonl");
    write_history(history, BufWriter::new(File::create(&path)?))?;
    log::info!("history written to {}", path.display());
    Ok(())
}

fn load_cls(path: &Path) -> Result<ClsModel<f32>> {
    load_weights(path)?.to_cls()
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Synth { out, sets, reps, seed, config } => {
            let fixed = match &config {
                Some(p) => Some(SyntheticProfile::from_toml_str(&fs::read_to_string(p)?)?),
                None => None,
            };
            let mut sessions = Vec::with_capacity(sets);
            for i in 0..sets {
                let mut profile = match &fixed {
                    Some(p) => SyntheticProfile { seed: p.seed.wrapping_add(i as u64), ..p.clone() },
                    None => SyntheticProfile::sample(seed, i as u64),
                };
                if let Some(r) = reps {
                    profile.reps = r;
                }
                sessions.push(generate_session(&profile)?);
            }
            write_corpus(&out, &sessions)?;
            println!("wrote {sets} sets to {}", out.display());
        }
        Command::Preprocess { data, out } => {
            let bases = list_sessions(&data)?;
            for base in &bases {
                let session = read_session(base)?;
                let series = preprocess(&session, PreprocessOptions::for_session(&session))?;
                let samples = (0..series.len())
                    .map(|i| RawSample::new(series.start_t + i as f64 / SAMPLE_RATE_HZ, series.row(i)))
                    .collect();
                let markers =
                    series.marker_indices.iter().map(|&m| series.start_t + m as f64 / SAMPLE_RATE_HZ).collect();
                let cleaned = Session { samples, markers, meta: session.meta.clone() };
                let name = base.file_name().expect("listed sessions have names");
                write_session(&out.join(name), &cleaned)?;
            }
            println!("preprocessed {} sessions into {}", bases.len(), out.display());
        }
        Command::TrainSeg { data, out, seed, config } => {
            let mut cfg = RunConfig::load(config.as_deref())?;
            cfg.train.seed = seed;
            let (train, val) = split(load_prepared(&data)?, &cfg.train)?;
            log::info!("training segmentation on {} sessions, validating on {}", train.len(), val.len());
            let outcome = train_segmentation(&train, &val, &cfg.model.seg, &cfg.train)?;
            save_weights(&out, &ModelWeights::from_seg(&outcome.model, &cfg.model))?;
            save_history(&out, &outcome.history)?;
            println!("best validation F1 {:.4} at epoch {}; saved {}", outcome.best_f1, outcome.best_epoch, out.display());
        }
        Command::TrainCls { data, model, out, seed, config } => {
            let mut cfg = RunConfig::load(config.as_deref())?;
            cfg.train.seed = seed;
            let weights = load_weights(&model)?;
            let seg = weights.to_seg()?;
            let cls_cfg = if config.is_some() { cfg.model.cls.clone() } else { weights.meta()?.config.cls };
            let (train, val) = split(load_prepared(&data)?, &cfg.train)?;
            let outcome = train_classification(&train, &val, &seg, &cls_cfg, &cfg.train)?;
            save_weights(&out, &ModelWeights::from_cls(&outcome.model))?;
            save_history(&out, &outcome.history)?;
            println!("best validation F1 {:.4} at epoch {}; saved {}", outcome.best_f1, outcome.best_epoch, out.display());
        }
        Command::Eval { data, model, out } => {
            let cls = load_cls(&model)?;
            let named: Vec<_> = load_prepared(&data)?.into_iter().map(|(n, p)| (n, p.series)).collect();
            let report = evaluate(&named, &cls)?;
            print!("{}", report.to_text());
            if let Some(path) = out {
                let json = serde_json::to_string_pretty(&report).map_err(|e| Error::Format(e.to_string()))?;
                fs::write(path, json)?;
            }
        }
        Command::Stream { data, model } => {
            let cls = Arc::new(load_cls(&model)?);
            let session = read_session(&data)?;
            let mut live = LivePipeline::new(cls, PreprocessOptions::for_session(&session))?;
            let stdout = std::io::stdout();
            let mut w = BufWriter::new(stdout.lock());
            let mut emit = |events: Vec<repsense::streaming::PredictionEvent>| -> Result<()> {
                for e in events {
                    let line = serde_json::to_string(&e).map_err(|e| Error::Format(e.to_string()))?;
                    writeln!(w, "{line}")?;
                }
                Ok(())
            };
            for s in &session.samples {
                emit(live.push(s)?)?;
            }
            emit(live.finish()?)?;
        }
        Command::Bench { model, reps, seed, config } => {
            let cls = match model {
                Some(p) => load_cls(&p)?,
                None => {
                    let cfg = RunConfig::load(config.as_deref())?;
                    let mut rng = ChaCha8Rng::seed_from_u64(seed);
                    let seg = repsense::models::SegModel::new(cfg.model.seg, &mut rng)?;
                    ClsModel::new(cfg.model.cls, seg, &mut rng)?
                }
            };
            let report = bench_latency(&cls, MAX_WINDOWS, reps, seed)?;
            print!("{}", report.to_table());
        }
        Command::Serve { port, model, out } => {
            let model = match model {
                Some(p) => Some(Arc::new(load_cls(&p)?)),
                None => {
                    log::warn!("no model given; recordings are stored without predictions");
                    None
                }
            };
            let state = AppState::new(Ingest::new(model, out));
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(async move {
                let listener = tokio::net::TcpListener::bind(("0.0.0.0", port)).await?;
                serve(listener, state).await
            })?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).target(env_logger::Target::Stderr).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
