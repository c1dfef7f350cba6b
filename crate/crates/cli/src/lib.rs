//! Command-line front end: one subcommand per pipeline stage, plus `e2e` and
//! `serve`.
//!
//! Exit codes: 0 success, 2 configuration or argument error, 3 missing
//! prerequisite artifact, 4 numeric failure, 1 anything else.

pub mod config;
pub mod pipeline;
pub mod summary;

use std::net::{IpAddr, SocketAddr};
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use patternlens::Error;

use config::{ClientKind, PipelineConfig, TargetSource};
use pipeline::Pipeline;

#[derive(Debug, Parser)]
#[command(
    name = "patternlens",
    version,
    about = "Pattern discovery and transparent heads over multimodal embeddings"
)]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// Pipeline store directory.
    #[arg(long, global = true, default_value = "store")]
    pub store: PathBuf,
    /// Pipeline config (JSON). Defaults to the store's config.json, then built-in defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides every seed in the config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Read JSONL records into the store.
    Ingest {
        #[arg(long)]
        input: PathBuf,
    },
    /// Generate a synthetic benchmark with planted factors.
    Synth {
        /// Synthetic spec (JSON); defaults to `synth` in the config.
        #[arg(long)]
        spec: Option<PathBuf>,
    },
    /// Assign patient-level train/val/test splits.
    Split {
        #[arg(long, num_args = 3, value_names = ["TRAIN", "VAL", "TEST"])]
        ratios: Option<Vec<f64>>,
    },
    TrainClassifier {
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Write transcoder targets.
    Extract {
        #[arg(long, value_enum)]
        source: Option<TargetSource>,
    },
    TrainTranscoders {
        #[arg(long)]
        members: Option<usize>,
        #[arg(long)]
        latent: Option<usize>,
        #[arg(long)]
        topk: Option<usize>,
    },
    /// Build the pattern registry from the ensemble.
    Discover {
        /// Probe size.
        #[arg(long)]
        probe: Option<usize>,
        /// Replace an existing registry and its audit log.
        #[arg(long)]
        force: bool,
    },
    /// Describe and verify pending patterns.
    Annotate {
        #[arg(long, value_enum)]
        client: Option<ClientKind>,
        /// Accept patterns that pass verification.
        #[arg(long)]
        auto_accept: bool,
    },
    /// Per-pattern activation thresholds from the train split.
    Thresholds,
    /// Sparse pattern features for every record.
    Encode {
        #[arg(long)]
        k_active: Option<usize>,
    },
    TrainHead {
        #[arg(long)]
        alpha: Option<f64>,
    },
    /// Print the attribution report for one record.
    Explain {
        #[arg(long)]
        record: String,
        /// Target name or index.
        #[arg(long)]
        target: String,
    },
    /// Serve the HTTP API.
    Serve {
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: IpAddr,
        /// Directory of record thumbnails named `<record_id>.<ext>`.
        #[arg(long)]
        assets: Option<PathBuf>,
    },
    /// Run every stage and write summary.json.
    E2e {
        #[arg(long)]
        spec: Option<PathBuf>,
        /// Use real records instead of a synthetic benchmark.
        #[arg(long, conflicts_with = "spec")]
        input: Option<PathBuf>,
    },
    /// Export the curated pattern index and audit log.
    CurateExport {
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] Error),
    #[error("{0}")]
    Other(#[from] anyhow::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Core(e) => exit_code(e),
            CliError::Other(e) => match e.downcast_ref::<Error>() {
                Some(core) => exit_code(core),
                None => 1,
            },
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::InvalidArgument(_) => 2,
        Error::NotFound(_) => 3,
        Error::Numeric(_) => 4,
        _ => 1,
    }
}

/// Config precedence: `--config`, else the store's config.json, else defaults;
/// then command-line overrides.
pub fn resolve_config(global: &GlobalArgs, command: &Command) -> Result<PipelineConfig, Error> {
    let stored = global.store.join("config.json");
    let mut cfg = match &global.config {
        Some(p) => PipelineConfig::load(p)?,
        None if stored.exists() => PipelineConfig::load(&stored)?,
        None => PipelineConfig::default(),
    };
    match command {
        Command::Synth { spec: Some(p) } | Command::E2e { spec: Some(p), .. } => {
            let bytes = std::fs::read(p)
                .map_err(|e| Error::InvalidArgument(format!("cannot read spec {}: {e}", p.display())))?;
            cfg.synth = Some(serde_json::from_slice(&bytes).map_err(|e| Error::InvalidArgument(format!("spec: {e}")))?);
        }
        Command::Split { ratios: Some(r) } => cfg.split.ratios = [r[0], r[1], r[2]],
        Command::TrainClassifier { epochs: Some(e) } => cfg.classifier.epochs = *e,
        Command::Extract { source: Some(s) } => cfg.targets.source = *s,
        Command::TrainTranscoders { members, latent, topk } => {
            if let Some(m) = members {
                cfg.transcoders.members = *m;
            }
            if let Some(l) = latent {
                cfg.transcoders.model.latent = *l;
            }
            if let Some(k) = topk {
                cfg.transcoders.model.k = *k;
            }
        }
        Command::Discover { probe: Some(n), .. } => cfg.discover.probe_size = *n,
        Command::Annotate { client, auto_accept } => {
            if let Some(c) = client {
                cfg.annotate.client = *c;
            }
            cfg.annotate.auto_accept |= *auto_accept;
        }
        Command::Encode { k_active: Some(k) } => cfg.features.k_active = *k,
        Command::TrainHead { alpha: Some(a) } => cfg.head.alpha = *a,
        _ => {}
    }
    if let Some(s) = global.seed {
        cfg.set_seed(s);
    }
    cfg.validate()?;
    Ok(cfg)
}

fn print_json<T: serde::Serialize>(v: &T) -> Result<(), Error> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    let cfg = resolve_config(&cli.global, &cli.command)?;
    let p = Pipeline::new(cli.global.store.clone(), cfg);
    let mutates = !matches!(
        cli.command,
        Command::Explain { .. } | Command::Serve { .. } | Command::CurateExport { .. }
    );
    if mutates {
        p.write_config()?;
    }
    match cli.command {
        Command::Ingest { input } => print_json(&p.ingest(&input)?.manifest)?,
        Command::Synth { .. } => print_json(&p.synth()?.manifest)?,
        Command::Split { .. } => print_json(&p.split()?.manifest.counts)?,
        Command::TrainClassifier { .. } => print_json(&serde_json::json!({ "test_accuracy": p.train_classifier()? }))?,
        Command::Extract { .. } => {
            let (rows, dim) = p.extract()?;
            print_json(&serde_json::json!({ "rows": rows, "dim": dim }))?
        }
        Command::TrainTranscoders { .. } => print_json(&p.train_transcoders()?)?,
        Command::Discover { force, .. } => print_json(&p.discover(force)?)?,
        Command::Annotate { .. } => print_json(&p.annotate()?)?,
        Command::Thresholds => {
            let t = p.thresholds()?;
            print_json(&serde_json::json!({ "mode": t.mode, "patterns": t.thresholds.len() }))?
        }
        Command::Encode { .. } => print_json(&p.encode()?)?,
        Command::TrainHead { .. } => print_json(&p.train_head()?)?,
        Command::Explain { record, target } => println!("{}", p.explain(&record, &target)?),
        Command::Serve { port, host, assets } => {
            let opts = patternlens_service::ServeOptions {
                store: p.layout.root.clone(),
                addr: SocketAddr::new(host, port),
                assets,
            };
            tokio::runtime::Runtime::new()
                .map_err(anyhow::Error::from)?
                .block_on(patternlens_service::serve(opts))?;
        }
        Command::E2e { input, .. } => print_json(&summary::run_e2e(&p, input.as_deref())?)?,
        Command::CurateExport { out } => {
            let n = p.curate_export(&out)?;
            eprintln!("exported {n} patterns to {}", out.display());
        }
    }
    Ok(())
}
