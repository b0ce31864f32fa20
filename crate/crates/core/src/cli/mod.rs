//! Command-line entry point. Exit codes: 0 success, 1 user or configuration
//! error, 2 internal or numeric failure.

mod commands;
mod config;
mod prepare;
mod synth;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub use commands::{
    cmd_eval, cmd_prepare, cmd_preview, cmd_search, cmd_train, encode_pgm, write_resolved, TrainSummary,
    RESOLVED_CONFIG,
};
pub use config::{default_space, Paths, RunConfig, SearchConfig, SCHEMA_VERSION};
pub use prepare::{cache_path, load_dataset, prepare, read_manifest, PrepareReport};
pub use synth::{synth, synth_clip, SynthConfig};

use crate::error::Result;
use crate::models::Arch;
use crate::sampling::Split;

#[derive(Parser, Debug)]
#[command(name = "melformer", version, about = "Mel-spectrogram audio classification workbench")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Options shared by every config-driven subcommand; flags override the
/// config file.
#[derive(Args, Debug, Clone)]
struct Common {
    /// TOML run configuration (defaults apply when omitted)
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    arch: Option<Arch>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Output directory
    #[arg(long)]
    out: Option<PathBuf>,
    /// Manifest CSV (`path,label,split`)
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Spectrogram cache directory
    #[arg(long)]
    cache: Option<PathBuf>,
}

impl Common {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(a) = self.arch {
            cfg.model.arch = a;
        }
        if let Some(s) = self.seed {
            cfg.train.seed = s;
        }
        if let Some(e) = self.epochs {
            cfg.train.epochs = e;
        }
        if let Some(o) = &self.out {
            cfg.paths.out_dir = o.clone();
        }
        if let Some(m) = &self.manifest {
            cfg.paths.manifest = Some(m.clone());
        }
        if let Some(c) = &self.cache {
            cfg.paths.cache_dir = c.clone();
        }
        Ok(cfg)
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Compute and cache spectrograms for every manifest row
    Prepare(Common),
    /// Generate a synthetic WAV dataset and manifest
    Synth {
        #[arg(long, default_value_t = 20)]
        n_per_class: usize,
        #[arg(long, default_value_t = 2)]
        n_classes: usize,
        /// Largest-to-smallest train class ratio
        #[arg(long, default_value_t = 3.0)]
        imbalance: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train with devel-UAR model selection
    Train {
        #[command(flatten)]
        common: Common,
        /// Draw epochs from the natural class distribution (diagnostic)
        #[arg(long)]
        no_oversample: bool,
    },
    /// Evaluate a checkpoint on one split
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "devel")]
        split: Split,
    },
    /// Hyper-parameter search over the configured space
    Search {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        budget: Option<usize>,
    },
    /// Write before/after augmentation images
    Preview {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 4)]
        k: usize,
    },
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Prepare(common) => {
            let r = cmd_prepare(&common.resolve()?)?;
            println!("prepared: {} written, {} up to date", r.written, r.skipped);
        }
        Command::Synth {
            n_per_class,
            n_classes,
            imbalance,
            seed,
            out,
        } => {
            let cfg = SynthConfig {
                n_per_class,
                n_classes,
                imbalance,
                seed,
                ..SynthConfig::default()
            };
            println!("{}", synth(&cfg, &out)?.display());
        }
        Command::Train { common, no_oversample } => {
            let mut cfg = common.resolve()?;
            if no_oversample {
                cfg.train.oversample = false;
            }
            let s = cmd_train(&cfg)?;
            match (s.best_epoch, s.best_uar) {
                (Some(e), Some(u)) => println!("best devel uar {u:.4} at epoch {e}; outputs in {}", s.out_dir.display()),
                _ => println!("no epochs run; outputs in {}", s.out_dir.display()),
            }
        }
        Command::Eval {
            common,
            checkpoint,
            split,
        } => {
            let e = cmd_eval(&common.resolve()?, &checkpoint, split)?;
            println!("{split} uar {:.4}", e.uar);
        }
        Command::Search { common, budget } => {
            let mut cfg = common.resolve()?;
            if let Some(b) = budget {
                cfg.search.budget = b;
            }
            let trials = cmd_search(&cfg)?;
            match trials.first().and_then(|t| t.objective.map(|o| (t.id, o))) {
                Some((id, o)) => println!("best trial {id}: devel uar {o:.4}"),
                None => println!("no trial completed"),
            }
        }
        Command::Preview { common, k } => {
            for (b, a) in cmd_preview(&common.resolve()?, k)? {
                println!("{} {}", b.display(), a.display());
            }
        }
    }
    Ok(())
}

/// Parse `args` (including the program name), run, and return the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_user_error() {
                1
            } else {
                2
            }
        }
    }
}
