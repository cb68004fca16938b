//! `ccm`: build, compress, query and evaluate compressed change maps.

mod commands;
mod config;

use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use ccm_core::classifier::{ClassifierKind, KernelKind};
use ccm_core::mining::MiningStrategy;
use ccm_core::registration::{TransformModel, VisibilityMode};
use clap::{Args, Parser, Subcommand};

use config::RunConfig;

#[derive(Debug)]
pub struct CliError {
    pub kind: &'static str,
    pub message: String,
}

impl CliError {
    pub fn new(kind: &'static str, message: impl Into<String>) -> Self {
        CliError { kind, message: message.into() }
    }

    pub fn io(path: &Path, e: std::io::Error) -> Self {
        CliError::new("io", format!("{}: {e}", path.display()))
    }

    pub fn missing(flag: &str, command: &str) -> Self {
        CliError::new("config", format!("{command} requires --{flag}"))
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.kind, self.message)
    }
}

impl From<ccm_core::Error> for CliError {
    fn from(e: ccm_core::Error) -> Self {
        CliError::new(e.kind(), e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::new("io", e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::new("json", e.to_string())
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::new("csv", e.to_string())
    }
}

fn parse_switch(s: &str) -> Result<bool, String> {
    match s {
        "on" | "true" | "1" => Ok(true),
        "off" | "false" | "0" => Ok(false),
        other => Err(format!("expected on or off, got '{other}'")),
    }
}

#[derive(Parser, Debug)]
#[command(name = "ccm", version, about = "Compressed place-specific change classifiers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Settings shared by every subcommand. Flags override `--config`.
#[derive(Args, Debug, Default, Clone)]
struct Common {
    /// Run settings: TOML, or a JSON sidecar of an earlier run
    #[arg(long)]
    config: Option<PathBuf>,
    /// Feature file (JSON Lines); repeatable
    #[arg(long)]
    features: Vec<PathBuf>,
    /// Query feature file
    #[arg(long)]
    queries: Option<PathBuf>,
    /// Proposal file for the images of --features
    #[arg(long)]
    proposals: Option<PathBuf>,
    /// Proposal file for the images of --queries
    #[arg(long)]
    query_proposals: Option<PathBuf>,
    #[arg(long)]
    annotations: Option<PathBuf>,
    #[arg(long)]
    vocab: Option<PathBuf>,
    #[arg(long)]
    map: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    vocab_bits: Option<u32>,
    #[arg(long)]
    place_len: Option<usize>,
    #[arg(long)]
    window: Option<usize>,
    /// Percentile trim of the common visible region
    #[arg(long)]
    delta: Option<f64>,
    /// Box expansion as a fraction of the query width
    #[arg(long)]
    margin_frac: Option<f64>,
    /// linear | affine
    #[arg(long)]
    transform: Option<TransformModel>,
    /// nn | svm
    #[arg(long)]
    classifier: Option<ClassifierKind>,
    /// linear | sigmoid | poly | rbf
    #[arg(long)]
    kernel: Option<KernelKind>,
    /// uniform | farthest | nearest
    #[arg(long)]
    mining: Option<MiningStrategy>,
    #[arg(long)]
    mining_min_bits: Option<u32>,
    #[arg(long)]
    sigma_d: Option<f64>,
    #[arg(long)]
    svm_c: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (default: all cores)
    #[arg(long)]
    jobs: Option<usize>,
    /// hv | h | none
    #[arg(long)]
    visibility: Option<VisibilityMode>,
    /// on | off
    #[arg(long, value_parser = parse_switch)]
    suppression: Option<bool>,
    /// on | off
    #[arg(long, value_parser = parse_switch)]
    object_level: Option<bool>,
    #[arg(long)]
    collection_size: Option<usize>,
    /// Number of collections (default: one per change pair)
    #[arg(long)]
    collections: Option<usize>,
}

impl Common {
    fn resolve(&self) -> Result<RunConfig, CliError> {
        let mut c = match &self.config {
            Some(p) => RunConfig::from_file(p)?,
            None => RunConfig::default(),
        };
        if !self.features.is_empty() {
            c.paths.features = self.features.clone();
        }
        macro_rules! set {
            ($($src:ident => $dst:expr),* $(,)?) => {$(
                if let Some(v) = self.$src.clone() { $dst = v.into(); }
            )*};
        }
        set! {
            queries => c.paths.queries,
            proposals => c.paths.proposals,
            query_proposals => c.paths.query_proposals,
            annotations => c.paths.annotations,
            vocab => c.paths.vocab,
            map => c.paths.map,
            out => c.paths.out,
            vocab_bits => c.vocab_bits,
            place_len => c.place_len,
            window => c.window,
            delta => c.delta,
            margin_frac => c.margin_frac,
            transform => c.transform,
            classifier => c.classifier,
            kernel => c.kernel,
            mining => c.mining,
            mining_min_bits => c.mining_min_bits,
            sigma_d => c.sigma_d,
            svm_c => c.svm_c,
            seed => c.seed,
            visibility => c.visibility,
            suppression => c.suppression,
            object_level => c.object_level,
            collection_size => c.collection_size,
            collections => c.collections,
        }
        c.validate()?;
        Ok(c)
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Sample a vocabulary from feature files
    VocabBuild(Common),
    /// Build a compressed map from reference features
    MapBuild(Common),
    /// Decompress and re-compress every place of a map
    Compress(Common),
    /// Retrain every classifier of a map and dump a JSON summary
    Decompress(Common),
    /// Rank the features of one query against its reference image
    Detect {
        #[command(flatten)]
        common: Common,
        /// Query image id (default: the only image of --queries)
        #[arg(long)]
        query_id: Option<String>,
        #[arg(long)]
        ref_id: String,
    },
    /// Success-ratio curve over collections
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Also emit the brute-force distance oracle curve
        #[arg(long)]
        oracle: bool,
    },
    /// Success curves for every ablation variant
    Ablate(Common),
    /// Replay a place trajectory through the decompression scheduler
    Simulate {
        #[command(flatten)]
        common: Common,
        /// Comma separated place ids, or a file of them
        #[arg(long)]
        trajectory: Option<String>,
    },
    /// Generate a synthetic dataset directory
    Synth {
        #[command(flatten)]
        common: Common,
        /// Start from the noise-free preset
        #[arg(long)]
        noiseless: bool,
        #[arg(long)]
        noise_bits: Option<u32>,
        #[arg(long)]
        separation: Option<u32>,
        #[arg(long)]
        scenes: Option<usize>,
        #[arg(long)]
        change_pairs: Option<usize>,
        #[arg(long)]
        nochange_pairs: Option<usize>,
    },
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::VocabBuild(c)
            | Command::MapBuild(c)
            | Command::Compress(c)
            | Command::Decompress(c)
            | Command::Ablate(c) => c,
            Command::Detect { common, .. }
            | Command::Evaluate { common, .. }
            | Command::Simulate { common, .. }
            | Command::Synth { common, .. } => common,
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let common = cli.command.common();
    if let Some(j) = common.jobs {
        rayon::ThreadPoolBuilder::new()
            .num_threads(j)
            .build_global()
            .map_err(|e| CliError::new("config", e.to_string()))?;
    }
    let mut cfg = common.resolve()?;
    match &cli.command {
        Command::VocabBuild(_) => commands::vocab_build(&cfg),
        Command::MapBuild(_) => commands::map_build(&cfg),
        Command::Compress(_) => commands::compress(&cfg),
        Command::Decompress(_) => commands::decompress(&cfg),
        Command::Detect { query_id, ref_id, .. } => commands::detect(&cfg, query_id.as_deref(), ref_id),
        Command::Evaluate { oracle, .. } => commands::evaluate(&cfg, *oracle),
        Command::Ablate(_) => commands::ablate(&cfg),
        Command::Simulate { trajectory, .. } => {
            if let Some(t) = trajectory {
                cfg.paths.trajectory = Some(t.clone());
            }
            commands::simulate(&cfg)
        }
        Command::Synth { noiseless, noise_bits, separation, scenes, change_pairs, nochange_pairs, .. } => {
            if *noiseless {
                cfg.synth.noise_bits = 0;
            }
            let s = &mut cfg.synth;
            if let Some(v) = noise_bits {
                s.noise_bits = *v;
            }
            if let Some(v) = separation {
                s.change_separation = *v;
            }
            if let Some(v) = scenes {
                s.n_scenes = *v;
            }
            if let Some(v) = change_pairs {
                s.n_change = *v;
            }
            if let Some(v) = nochange_pairs {
                s.n_nochange = *v;
            }
            s.vocab_bits = cfg.vocab_bits;
            s.seed = cfg.seed;
            commands::synth(&cfg)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("{}", serde_json::json!({ "error": "usage", "message": first }));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", serde_json::json!({ "error": e.kind, "message": e.message }));
            ExitCode::FAILURE
        }
    }
}
