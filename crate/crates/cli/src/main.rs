//! `asc`: synthesize a corpus, cache features, train, evaluate, inspect
//! attention alignments, check gradients and sweep hyperparameters.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;

use asc_core::config::{parse_override, RunConfig};
use asc_core::data::{load_split, synth_corpus, FeatureStore, Split};
use asc_core::eval::{alignment_purity, evaluate, export_alignments, ground_truth, landing_rate, SnippetSelection};
use asc_core::features::cache_features;
use asc_core::model::{check_model_gradients, shape_trace, ModelGradcheck};
use asc_core::numerics::{DType, Scalar};
use asc_core::training::{
    hyper_sweep, read_checkpoint, resume, train, write_sweep, CheckpointContents, SweepGrid, TrainData, TrainState,
};
use asc_core::{Error, Result};

#[derive(Parser)]
#[command(name = "asc", version, about = "Multi-head attention pooling for acoustic scene classification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct ConfigArgs {
    /// Config file of `section.key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key, e.g. `--set model.heads=4`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl ConfigArgs {
    fn resolve(&self, extra: &[(String, String)]) -> Result<RunConfig> {
        let base = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        let mut overrides = self.set.iter().map(|s| parse_override(s)).collect::<Result<Vec<_>>>()?;
        overrides.extend_from_slice(extra);
        let cfg = base.with_overrides(&overrides)?;
        info!("resolved config:\n{}", cfg.render().trim_end());
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic scene corpus.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Precompute log-Mel features for every manifest row.
    Cache {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Train a model; writes metrics.csv, last.ckpt and best.ckpt.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Continue from a checkpoint; its embedded config is used.
        #[arg(long, value_name = "CKPT")]
        resume: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Per-class and macro F1 of a checkpoint on one split.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "eval")]
        split: String,
        /// Also write the table as CSV.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Export per-head attention alignments.
    Attend {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "eval")]
        split: String,
        /// Write a 1 s WAV around every argmax timestamp.
        #[arg(long)]
        snippets: bool,
        /// Only the highest-scoring K clips per head get snippets.
        #[arg(long, value_name = "K")]
        top_k: Option<usize>,
    },
    /// Finite-difference check of every parameter slot.
    Gradcheck {
        #[arg(long)]
        seed: Option<u64>,
        /// Coordinates probed per slot.
        #[arg(long, default_value_t = 24)]
        coords: usize,
        #[arg(long, hide = true, value_name = "SLOT")]
        corrupt_grad: Option<String>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Train one model per grid cell: M sweep at the configured sigma, sigma
    /// sweep at the configured M.
    Sweep {
        #[arg(long, value_name = "M=..;sigma=..")]
        grid: String,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Print the layer-by-layer shapes for an input of FRAMES frames.
    Shapes {
        #[arg(long, default_value_t = 1250)]
        frames: usize,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
}

fn seed_override(key: &str, seed: Option<u64>) -> Vec<(String, String)> {
    seed.map(|s| (key.to_string(), s.to_string())).into_iter().collect()
}

fn parse_split(s: &str) -> Result<Split> {
    Split::parse(s).ok_or_else(|| Error::Config(format!("unknown split {s:?}; use train, dev or eval")))
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Io { .. } | Error::Format { .. } | Error::Integrity(_) | Error::Version { .. } | Error::Data(_) => 3,
        Error::NonFinite(_) => 4,
        _ => 2,
    }
}

fn run_eval<S: Scalar>(ckpt: CheckpointContents, data: &Path, split: Split, out: Option<&Path>) -> Result<()> {
    let state: TrainState<S> = ckpt.into_state()?;
    let index = load_split(data, split, state.model.config.n_classes)?;
    let store = FeatureStore::<S>::new(state.config.features.clone())?;
    let report = evaluate(&state.model, &index, &store)?;
    print!("{}", report.scores.to_table());
    println!("clips: {}  accuracy: {:.4}", report.confusion.total(), report.confusion.accuracy());
    if let Some(path) = out {
        report.scores.write_csv(path)?;
    }
    Ok(())
}

fn run_attend<S: Scalar>(
    ckpt: CheckpointContents,
    data: &Path,
    split: Split,
    out: &Path,
    snippets: Option<SnippetSelection>,
) -> Result<()> {
    let state: TrainState<S> = ckpt.into_state()?;
    let index = load_split(data, split, state.model.config.n_classes)?;
    let store = FeatureStore::<S>::new(state.config.features.clone())?;
    let summary = export_alignments(&state.model, &index, &store, out, snippets)?;
    let rows: usize = summary.records.iter().map(|r| r.heads.len()).sum();
    println!("{rows} alignment rows, {} snippets written to {}", summary.snippets, out.display());
    if let Ok(truth) = ground_truth(&index) {
        let rate = landing_rate(&summary.records, &truth)?;
        let purity = alignment_purity(&summary.records, &truth, state.config.synth.n_event_types)?;
        println!("landing rate {rate:.4}  mean head purity {:.4}", purity.mean_purity);
        for (h, p) in purity.heads.iter().enumerate() {
            let shown = p.purity.map_or_else(|| "-".into(), |v| format!("{v:.3}"));
            println!("  head {h}: purity {shown}  landings by event type {:?}", p.histogram);
        }
    }
    Ok(())
}

fn run_train<S: Scalar>(cfg: Option<RunConfig>, resume_from: Option<CheckpointContents>, data: &Path, out: &Path) -> Result<()> {
    let outcome = match resume_from {
        Some(ckpt) => {
            let state: TrainState<S> = ckpt.into_state()?;
            info!("resuming at epoch {}", state.epoch);
            resume(state, data, Some(out))?
        }
        None => train::<S>(cfg.as_ref().expect("config for a fresh run"), data, Some(out))?,
    };
    println!(
        "trained {} epochs ({:?}); best dev macro F1 {} at epoch {}",
        outcome.epochs,
        outcome.stop,
        outcome.best_f1.map_or_else(|| "-".into(), |f| format!("{f:.4}")),
        outcome.best_epoch.map_or_else(|| "-".into(), |e| e.to_string()),
    );
    Ok(())
}

fn run_sweep<S: Scalar>(cfg: &RunConfig, grid: &SweepGrid, data: &Path, out: &Path) -> Result<()> {
    let train_data = TrainData::<S>::load(data, cfg)?;
    let result = hyper_sweep(cfg, grid, &train_data)?;
    write_sweep(&result, out)?;
    print!("{}", result.to_csv());
    for (cell, e) in &result.failures {
        eprintln!("cell M={} sigma={} failed: {e}", cell.heads, cell.sigma);
    }
    Ok(())
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Synth { out, seed, cfg } => {
            let cfg = cfg.resolve(&seed_override("synth.seed", seed))?;
            let summary = synth_corpus(&cfg.synth, &out)?;
            println!("wrote {} clips to {}", summary.clips(), out.display());
        }
        Command::Cache { data, out, cfg } => {
            let cfg = cfg.resolve(&[])?;
            let s = cache_features(&data, &out, &cfg.features)?;
            println!("cached {} feature matrices ({} rows skipped) in {}", s.written, s.skipped, out.display());
        }
        Command::Train {
            data,
            out,
            seed,
            resume: from,
            cfg,
        } => match from {
            Some(path) => {
                if cfg.config.is_some() || !cfg.set.is_empty() || seed.is_some() {
                    return Err(Error::Config("--resume takes its config from the checkpoint".into()));
                }
                let ckpt = read_checkpoint(&path)?;
                info!("resolved config:\n{}", ckpt.config.render().trim_end());
                match ckpt.precision() {
                    DType::F32 => run_train::<f32>(None, Some(ckpt), &data, &out)?,
                    DType::F64 => run_train::<f64>(None, Some(ckpt), &data, &out)?,
                }
            }
            None => {
                let cfg = cfg.resolve(&seed_override("train.seed", seed))?;
                match cfg.train.precision {
                    DType::F32 => run_train::<f32>(Some(cfg), None, &data, &out)?,
                    DType::F64 => run_train::<f64>(Some(cfg), None, &data, &out)?,
                }
            }
        },
        Command::Eval { ckpt, data, split, out } => {
            let split = parse_split(&split)?;
            let ckpt = read_checkpoint(&ckpt)?;
            match ckpt.precision() {
                DType::F32 => run_eval::<f32>(ckpt, &data, split, out.as_deref())?,
                DType::F64 => run_eval::<f64>(ckpt, &data, split, out.as_deref())?,
            }
        }
        Command::Attend {
            ckpt,
            data,
            out,
            split,
            snippets,
            top_k,
        } => {
            let split = parse_split(&split)?;
            let selection = match (snippets, top_k) {
                (false, None) => None,
                (_, Some(k)) => Some(SnippetSelection::TopK(k)),
                (true, None) => Some(SnippetSelection::All),
            };
            let ckpt = read_checkpoint(&ckpt)?;
            match ckpt.precision() {
                DType::F32 => run_attend::<f32>(ckpt, &data, split, &out, selection)?,
                DType::F64 => run_attend::<f64>(ckpt, &data, split, &out, selection)?,
            }
        }
        Command::Gradcheck {
            seed,
            coords,
            corrupt_grad,
            cfg,
        } => {
            let cfg = cfg.resolve(&[])?;
            let mut opts = ModelGradcheck {
                seed: seed.unwrap_or(cfg.train.seed),
                corrupt: corrupt_grad,
                ..ModelGradcheck::default()
            };
            opts.check.max_coords = Some(coords);
            let report = check_model_gradients(&cfg.model, &opts)?;
            print!("{report}");
            if !report.passed() {
                eprintln!(
                    "gradient check failed for {} slot(s)",
                    report.failing().count()
                );
                return Ok(ExitCode::from(4));
            }
            println!("all {} slots within {:e}", report.slots.len(), report.tolerance);
        }
        Command::Sweep {
            grid,
            data,
            out,
            seed,
            cfg,
        } => {
            let cfg = cfg.resolve(&seed_override("train.seed", seed))?;
            let grid = SweepGrid::parse(&grid)?;
            match cfg.train.precision {
                DType::F32 => run_sweep::<f32>(&cfg, &grid, &data, &out)?,
                DType::F64 => run_sweep::<f64>(&cfg, &grid, &data, &out)?,
            }
        }
        Command::Shapes { frames, cfg } => {
            let cfg = cfg.resolve(&[])?;
            println!("input {:?}", [cfg.model.n_mels, frames]);
            for row in shape_trace(&cfg.model, frames)? {
                println!("{:<12} {:?}", row.layer, row.shape);
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn init_threads() -> Result<()> {
    let Ok(v) = std::env::var("ASC_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Config(format!("ASC_THREADS must be a positive integer, got {v:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Config(format!("cannot size the worker pool: {e}")))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match init_threads().and_then(|()| run(cli)) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
