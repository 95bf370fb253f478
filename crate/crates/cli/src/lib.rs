//! Command-line driver: benchmark sweeps, ablation grids, attention analysis
//! and fixture plumbing on top of the `globalmerge` core.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 runtime error.

use std::ffi::OsString;
use std::fmt;
use std::fs;
use std::path::PathBuf;

use clap::{Parser, Subcommand};
use globalmerge::synth;
use globalmerge::TokenSequence;

pub mod ablate;
pub mod analyze;
pub mod bench;
pub mod fixture;
pub mod settings;

pub use settings::Settings;

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Runtime(anyhow::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) => 1,
            Self::Runtime(_) => 2,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Config(m) => write!(f, "{m}"),
            Self::Runtime(e) => write!(f, "{e:#}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<globalmerge::Error> for CliError {
    fn from(e: globalmerge::Error) -> Self {
        match e {
            globalmerge::Error::Config(m) => Self::Config(m),
            other => Self::Runtime(other.into()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::Runtime(e.into())
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "globalmerge",
    version,
    about = "Token merging for multi-frame global attention"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SubcommandKind {
    Bench,
    Ablate,
    Analyze,
    GenFixture,
    VizPartition,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Dense vs merged timing over a ladder of frame counts.
    Bench(Flags),
    /// Strategy × ratio × start-block grid of output error against dense.
    Ablate(Flags),
    /// Redundancy statistics of captured dense attention maps.
    Analyze(Flags),
    /// Write a synthetic token sequence in the binary fixture format.
    GenFixture(Flags),
    /// Partition, merge map and per-frame role masks for one sequence.
    VizPartition(Flags),
}

/// Flags shared by every subcommand. Each shortcut sets the config key of
/// the same name (dashes become underscores) and overrides the file.
#[derive(Debug, Clone, clap::Args)]
struct Flags {
    /// Flat `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Parent directory of run directories.
    #[arg(long, default_value = "runs")]
    out: PathBuf,
    /// Generic override, repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    seed: Option<String>,
    /// Frame-count ladder (bench).
    #[arg(long)]
    frames: Option<String>,
    /// Frames of a single sequence.
    #[arg(long)]
    n_frames: Option<String>,
    #[arg(long)]
    tokens_per_frame: Option<String>,
    #[arg(long)]
    dim: Option<String>,
    #[arg(long)]
    heads: Option<String>,
    #[arg(long)]
    n_blocks: Option<String>,
    #[arg(long)]
    keep_layers: Option<String>,
    #[arg(long)]
    strategy: Option<String>,
    #[arg(long)]
    ratio: Option<String>,
    #[arg(long)]
    start_block: Option<String>,
    #[arg(long)]
    stride: Option<String>,
    #[arg(long)]
    region_stride: Option<String>,
    #[arg(long)]
    repeats: Option<String>,
    #[arg(long)]
    warmup: Option<String>,
    /// Multi-threaded attention kernel.
    #[arg(long)]
    parallel: bool,
    /// Strategy axis of the ablation grid.
    #[arg(long)]
    strategies: Option<String>,
    #[arg(long)]
    ratios: Option<String>,
    #[arg(long)]
    start_blocks: Option<String>,
    /// Number of consecutive seeds per ablation cell.
    #[arg(long)]
    seeds: Option<String>,
    /// Blocks whose attention maps are analyzed.
    #[arg(long)]
    blocks: Option<String>,
    /// Sampled row pairs per head, or `auto`.
    #[arg(long)]
    pairs: Option<String>,
    /// Also write N×N PGM heat maps.
    #[arg(long)]
    heatmaps: bool,
    /// scene, random or rank1.
    #[arg(long)]
    fixture: Option<String>,
    /// Binary fixture to use instead of a generated one.
    #[arg(long)]
    input: Option<String>,
}

impl Flags {
    fn overrides(&self) -> Result<Vec<(String, String)>, CliError> {
        let mut out = Vec::new();
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("--set '{kv}': expected KEY=VALUE")))?;
            out.push((k.trim().to_string(), v.trim().to_string()));
        }
        let shortcuts = [
            ("seed", &self.seed),
            ("frames", &self.frames),
            ("n_frames", &self.n_frames),
            ("tokens_per_frame", &self.tokens_per_frame),
            ("dim", &self.dim),
            ("heads", &self.heads),
            ("n_blocks", &self.n_blocks),
            ("keep_layers", &self.keep_layers),
            ("strategy", &self.strategy),
            ("ratio", &self.ratio),
            ("start_block", &self.start_block),
            ("stride", &self.stride),
            ("region_stride", &self.region_stride),
            ("repeats", &self.repeats),
            ("warmup", &self.warmup),
            ("strategies", &self.strategies),
            ("ratios", &self.ratios),
            ("start_blocks", &self.start_blocks),
            ("seeds", &self.seeds),
            ("capture_blocks", &self.blocks),
            ("pairs", &self.pairs),
            ("fixture", &self.fixture),
            ("input", &self.input),
        ];
        for (k, v) in shortcuts {
            if let Some(v) = v {
                out.push((k.to_string(), v.clone()));
            }
        }
        if self.parallel {
            out.push(("parallel".into(), "true".into()));
        }
        if self.heatmaps {
            out.push(("heatmaps".into(), "true".into()));
        }
        Ok(out)
    }
}

/// Everything a subcommand needs: effective settings and where to write.
#[derive(Debug, Clone)]
pub struct RunSpec {
    pub subcommand: SubcommandKind,
    pub config: Option<PathBuf>,
    pub out: PathBuf,
    pub settings: Settings,
}

impl RunSpec {
    pub fn new(subcommand: SubcommandKind, settings: Settings, out: impl Into<PathBuf>) -> Self {
        Self {
            subcommand,
            config: None,
            out: out.into(),
            settings,
        }
    }

    /// `<out>/<config hash>-s<seed>`.
    pub fn run_dir(&self) -> PathBuf {
        self.out.join(format!(
            "{}-s{}",
            self.settings.config_hash(),
            self.settings.seed
        ))
    }

    /// Creates the run directory and writes the config echo into it.
    pub fn prepare(&self) -> Result<RunDir, CliError> {
        let dir = RunDir {
            path: self.run_dir(),
        };
        fs::create_dir_all(&dir.path)?;
        dir.write("config.txt", self.settings.echo())?;
        Ok(dir)
    }
}

pub struct RunDir {
    pub path: PathBuf,
}

impl RunDir {
    pub fn write(&self, name: &str, contents: impl AsRef<[u8]>) -> Result<PathBuf, CliError> {
        let p = self.path.join(name);
        fs::write(&p, contents)?;
        Ok(p)
    }

    pub fn file(&self, name: &str) -> Result<fs::File, CliError> {
        Ok(fs::File::create(self.path.join(name))?)
    }
}

/// The input sequence of single-sequence commands: the `input` fixture when
/// set, otherwise a generated one.
pub fn load_sequence(s: &Settings, seed: u64) -> Result<TokenSequence, CliError> {
    let seq = match &s.input {
        Some(path) => {
            let f = fs::File::open(path)
                .map_err(|e| CliError::Config(format!("cannot open input {path}: {e}")))?;
            TokenSequence::read_from(std::io::BufReader::new(f))
                .map_err(|e| CliError::Runtime(anyhow::anyhow!("reading {path}: {e}")))?
        }
        None => synth::generate(s.fixture, s.layout()?, s.n_frames, s.dim, seed),
    };
    if seq.dim() != s.dim {
        return Err(CliError::Config(format!(
            "input width {} differs from dim = {}",
            seq.dim(),
            s.dim
        )));
    }
    Ok(seq)
}

fn build_spec(kind: SubcommandKind, flags: &Flags) -> Result<RunSpec, CliError> {
    let mut settings = match &flags.config {
        Some(p) => Settings::load(p)?,
        None => Settings::default(),
    };
    for (k, v) in flags.overrides()? {
        settings
            .apply(&k, &v)
            .map_err(|e| CliError::Config(format!("flag --{}: {e}", k.replace('_', "-"))))?;
    }
    settings.validate()?;
    Ok(RunSpec {
        subcommand: kind,
        config: flags.config.clone(),
        out: flags.out.clone(),
        settings,
    })
}

/// Runs the subcommand described by `spec`, returning the run directory.
pub fn dispatch(spec: &RunSpec) -> Result<PathBuf, CliError> {
    match spec.subcommand {
        SubcommandKind::Bench => bench::cmd_bench(spec),
        SubcommandKind::Ablate => ablate::cmd_ablate(spec),
        SubcommandKind::Analyze => analyze::cmd_analyze(spec),
        SubcommandKind::GenFixture => fixture::cmd_gen_fixture(spec),
        SubcommandKind::VizPartition => fixture::cmd_viz_partition(spec),
    }
}

/// Full command-line entry point; returns the process exit code.
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
    let (kind, flags) = match &cli.command {
        Command::Bench(f) => (SubcommandKind::Bench, f),
        Command::Ablate(f) => (SubcommandKind::Ablate, f),
        Command::Analyze(f) => (SubcommandKind::Analyze, f),
        Command::GenFixture(f) => (SubcommandKind::GenFixture, f),
        Command::VizPartition(f) => (SubcommandKind::VizPartition, f),
    };
    match build_spec(kind, flags).and_then(|spec| dispatch(&spec)) {
        Ok(dir) => {
            println!("wrote {}", dir.display());
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub(crate) fn csv_float(v: f64) -> String {
    format!("{v:.9e}")
}
