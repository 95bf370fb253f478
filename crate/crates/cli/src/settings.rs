//! Flat `key = value` run configuration.
//!
//! One setting per line, `#` starts a comment, blank lines are ignored.
//! Lists are comma separated. Flags given on the command line are applied
//! after the file, so they win. The effective settings are echoed back in
//! the same format, which makes every echo a valid config file.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use globalmerge::synth::FixtureKind;
use globalmerge::{FrameLayout, MergeConfig, MergeRule, ModelConfig, SalientMode, StrategyVariant};
use sha2::{Digest, Sha256};

use crate::CliError;

/// Layers kept by default in a 24-block model.
const DEFAULT_KEEP: [usize; 4] = [4, 11, 17, 23];

#[derive(Debug, Clone, PartialEq)]
pub enum Keep {
    /// [`DEFAULT_KEEP`] restricted to the model, plus its last block.
    Auto,
    Layers(Vec<usize>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Settings {
    // Single-sequence inputs (ablate, analyze, gen-fixture, viz-partition).
    pub fixture: FixtureKind,
    pub input: Option<String>,
    pub n_frames: usize,
    pub n_camera: usize,
    pub n_register: usize,
    pub grid_h: usize,
    pub grid_w: usize,

    // Benchmark ladder (patch-only frames).
    pub frames: Vec<usize>,
    pub tokens_per_frame: usize,

    // Model.
    pub dim: usize,
    pub heads: usize,
    pub n_blocks: usize,
    pub keep_layers: Keep,
    pub weight_seed: u64,

    // Merging.
    pub strategy: StrategyVariant,
    pub ratio: f64,
    pub start_block: usize,
    pub stride: Option<usize>,
    pub region_stride: Option<usize>,
    pub salient_fraction: f64,
    pub salient_mode: SalientMode,
    pub merge_rule: MergeRule,
    pub reuse_partition: bool,

    pub seed: u64,

    // Timing.
    pub repeats: usize,
    pub warmup: usize,
    pub parallel: bool,
    pub max_bytes: u128,

    // Ablation grid.
    pub strategies: Vec<StrategyVariant>,
    pub ratios: Vec<f64>,
    pub start_blocks: Vec<usize>,
    pub seeds: usize,

    // Analysis.
    pub capture_blocks: Vec<usize>,
    /// `None`: every pair for small maps, a fixed sample otherwise.
    pub pairs: Option<usize>,
    pub heatmaps: bool,
}

impl Default for Settings {
    fn default() -> Self {
        Self {
            fixture: FixtureKind::Scene,
            input: None,
            n_frames: 8,
            n_camera: 1,
            n_register: 4,
            grid_h: 8,
            grid_w: 8,
            frames: vec![8, 16, 32, 64],
            tokens_per_frame: 128,
            dim: 64,
            heads: 4,
            n_blocks: 24,
            keep_layers: Keep::Auto,
            weight_seed: 0,
            strategy: StrategyVariant::FastVggt,
            ratio: 0.9,
            start_block: 0,
            stride: None,
            region_stride: None,
            salient_fraction: 0.10,
            salient_mode: SalientMode::FixedStride,
            merge_rule: MergeRule::Uniform,
            reuse_partition: false,
            seed: 0,
            repeats: 5,
            warmup: 1,
            parallel: false,
            max_bytes: 8 << 30,
            strategies: vec![
                StrategyVariant::Random,
                StrategyVariant::FixedStride,
                StrategyVariant::FastVggt,
            ],
            ratios: vec![0.3, 0.6, 0.9],
            start_blocks: vec![0, 10, 20],
            seeds: 5,
            capture_blocks: vec![0, 11, 23],
            pairs: None,
            heatmaps: false,
        }
    }
}

fn bad(key: &str, value: &str, what: &str) -> CliError {
    CliError::Config(format!("{key} = '{value}': expected {what}"))
}

fn num<T: std::str::FromStr>(key: &str, v: &str, what: &str) -> Result<T, CliError> {
    v.parse().map_err(|_| bad(key, v, what))
}

fn list<T: std::str::FromStr>(key: &str, v: &str, what: &str) -> Result<Vec<T>, CliError> {
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| num(key, s, what))
        .collect()
}

fn flag(key: &str, v: &str) -> Result<bool, CliError> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(bad(key, v, "true or false")),
    }
}

fn auto_or<T: std::str::FromStr>(key: &str, v: &str, what: &str) -> Result<Option<T>, CliError> {
    if v == "auto" {
        Ok(None)
    } else {
        num(key, v, what).map(Some)
    }
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

fn show<T: ToString>(v: &Option<T>) -> String {
    v.as_ref().map_or_else(|| "auto".to_string(), T::to_string)
}

impl Settings {
    /// Applies one `key = value` assignment.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        let v = value.trim();
        match key.trim() {
            "fixture" => {
                self.fixture =
                    FixtureKind::parse(v).ok_or_else(|| bad(key, v, "scene, random or rank1"))?
            }
            "input" => self.input = (!v.is_empty()).then(|| v.to_string()),
            "n_frames" => self.n_frames = num(key, v, "a frame count")?,
            "n_camera" => self.n_camera = num(key, v, "a token count")?,
            "n_register" => self.n_register = num(key, v, "a token count")?,
            "grid_h" => self.grid_h = num(key, v, "a grid height")?,
            "grid_w" => self.grid_w = num(key, v, "a grid width")?,
            "frames" => self.frames = list(key, v, "frame counts")?,
            "tokens_per_frame" => self.tokens_per_frame = num(key, v, "a token count")?,
            "dim" => self.dim = num(key, v, "a width")?,
            "heads" => self.heads = num(key, v, "a head count")?,
            "n_blocks" => self.n_blocks = num(key, v, "a block count")?,
            "keep_layers" => {
                self.keep_layers = if v == "auto" {
                    Keep::Auto
                } else {
                    Keep::Layers(list(key, v, "block indices")?)
                }
            }
            "weight_seed" => self.weight_seed = num(key, v, "an integer seed")?,
            "strategy" => self.strategy = variant(key, v)?,
            "ratio" => self.ratio = num(key, v, "a ratio")?,
            "start_block" => self.start_block = num(key, v, "a block index")?,
            "stride" => self.stride = auto_or(key, v, "a stride or auto")?,
            "region_stride" => self.region_stride = auto_or(key, v, "a cell side or auto")?,
            "salient_fraction" => self.salient_fraction = num(key, v, "a fraction")?,
            "salient_mode" => {
                self.salient_mode = match v {
                    "fixed_stride" => SalientMode::FixedStride,
                    "topk_norm" => SalientMode::TopkNorm,
                    _ => return Err(bad(key, v, "fixed_stride or topk_norm")),
                }
            }
            "merge_rule" => {
                self.merge_rule = match v {
                    "uniform" => MergeRule::Uniform,
                    "sequential" => MergeRule::Sequential,
                    _ => return Err(bad(key, v, "uniform or sequential")),
                }
            }
            "reuse_partition" => self.reuse_partition = flag(key, v)?,
            "seed" => self.seed = num(key, v, "an integer seed")?,
            "repeats" => self.repeats = num(key, v, "a repeat count")?,
            "warmup" => self.warmup = num(key, v, "a warmup count")?,
            "parallel" => self.parallel = flag(key, v)?,
            "max_bytes" => self.max_bytes = num(key, v, "a byte count")?,
            "strategies" => {
                self.strategies = v
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(|s| variant(key, s))
                    .collect::<Result<_, _>>()?
            }
            "ratios" => self.ratios = list(key, v, "ratios")?,
            "start_blocks" => self.start_blocks = list(key, v, "block indices")?,
            "seeds" => self.seeds = num(key, v, "a seed count")?,
            "capture_blocks" => self.capture_blocks = list(key, v, "block indices")?,
            "pairs" => self.pairs = auto_or(key, v, "a pair count or auto")?,
            "heatmaps" => self.heatmaps = flag(key, v)?,
            other => return Err(CliError::Config(format!("unknown setting '{other}'"))),
        }
        Ok(())
    }

    /// Applies every assignment of a config file's text.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<(), CliError> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                CliError::Config(format!("{origin}:{}: expected key = value", i + 1))
            })?;
            self.apply(k, v)
                .map_err(|e| CliError::Config(format!("{origin}:{}: {e}", i + 1)))?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        let mut s = Self::default();
        s.apply_text(&text, &path.display().to_string())?;
        Ok(s)
    }

    /// All settings in file order.
    pub fn pairs_list(&self) -> Vec<(&'static str, String)> {
        let keep = match &self.keep_layers {
            Keep::Auto => "auto".to_string(),
            Keep::Layers(l) => join(l),
        };
        vec![
            ("fixture", self.fixture.name().to_string()),
            ("input", self.input.clone().unwrap_or_default()),
            ("n_frames", self.n_frames.to_string()),
            ("n_camera", self.n_camera.to_string()),
            ("n_register", self.n_register.to_string()),
            ("grid_h", self.grid_h.to_string()),
            ("grid_w", self.grid_w.to_string()),
            ("frames", join(&self.frames)),
            ("tokens_per_frame", self.tokens_per_frame.to_string()),
            ("dim", self.dim.to_string()),
            ("heads", self.heads.to_string()),
            ("n_blocks", self.n_blocks.to_string()),
            ("keep_layers", keep),
            ("weight_seed", self.weight_seed.to_string()),
            ("strategy", self.strategy.name().to_string()),
            ("ratio", self.ratio.to_string()),
            ("start_block", self.start_block.to_string()),
            ("stride", show(&self.stride)),
            ("region_stride", show(&self.region_stride)),
            ("salient_fraction", self.salient_fraction.to_string()),
            (
                "salient_mode",
                match self.salient_mode {
                    SalientMode::FixedStride => "fixed_stride",
                    SalientMode::TopkNorm => "topk_norm",
                }
                .to_string(),
            ),
            (
                "merge_rule",
                match self.merge_rule {
                    MergeRule::Uniform => "uniform",
                    MergeRule::Sequential => "sequential",
                }
                .to_string(),
            ),
            ("reuse_partition", self.reuse_partition.to_string()),
            ("seed", self.seed.to_string()),
            ("repeats", self.repeats.to_string()),
            ("warmup", self.warmup.to_string()),
            ("parallel", self.parallel.to_string()),
            ("max_bytes", self.max_bytes.to_string()),
            (
                "strategies",
                self.strategies
                    .iter()
                    .map(|s| s.name())
                    .collect::<Vec<_>>()
                    .join(","),
            ),
            ("ratios", join(&self.ratios)),
            ("start_blocks", join(&self.start_blocks)),
            ("seeds", self.seeds.to_string()),
            ("capture_blocks", join(&self.capture_blocks)),
            ("pairs", show(&self.pairs)),
            ("heatmaps", self.heatmaps.to_string()),
        ]
    }

    /// Config-file rendering of the effective settings.
    pub fn echo(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.pairs_list() {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    /// First 12 hex digits of the SHA-256 of the echo without the seed line.
    pub fn config_hash(&self) -> String {
        let body: BTreeMap<_, _> = self
            .pairs_list()
            .into_iter()
            .filter(|(k, _)| *k != "seed")
            .collect();
        let mut h = Sha256::new();
        for (k, v) in body {
            h.update(k.as_bytes());
            h.update(b"=");
            h.update(v.as_bytes());
            h.update(b"\n");
        }
        h.finalize()
            .iter()
            .take(6)
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    /// Checks everything that does not depend on the subcommand.
    pub fn validate(&self) -> Result<(), CliError> {
        self.model()?;
        self.merge(None)?;
        self.layout()?;
        for &ratio in &self.ratios {
            Settings {
                ratio,
                ..self.clone()
            }
            .merge(None)?;
        }
        Ok(())
    }

    pub fn model(&self) -> Result<ModelConfig, CliError> {
        let keep_layers = match &self.keep_layers {
            Keep::Layers(l) => l.clone(),
            Keep::Auto => {
                let mut l: Vec<usize> = DEFAULT_KEEP
                    .iter()
                    .copied()
                    .filter(|&b| b < self.n_blocks)
                    .collect();
                if self.n_blocks > 0 && !l.contains(&(self.n_blocks - 1)) {
                    l.push(self.n_blocks - 1);
                }
                l
            }
        };
        let m = ModelConfig {
            n_blocks: self.n_blocks,
            dim: self.dim,
            n_heads: self.heads,
            keep_layers,
            weight_seed: self.weight_seed,
        };
        m.validate().map_err(|e| CliError::Config(e.to_string()))?;
        Ok(m)
    }

    /// Merge policy for `variant` (defaults to `strategy`).
    pub fn merge(&self, variant: Option<StrategyVariant>) -> Result<MergeConfig, CliError> {
        let base = MergeConfig {
            merge_ratio: self.ratio,
            stride: self.stride,
            region_stride: self.region_stride,
            salient_fraction: self.salient_fraction,
            salient_mode: self.salient_mode,
            start_block: self.start_block,
            seed: self.seed,
            merge_rule: self.merge_rule,
            reuse_partition: self.reuse_partition,
            ..MergeConfig::default()
        };
        let cfg = variant.unwrap_or(self.strategy).configure(&base);
        cfg.validate()
            .map_err(|e| CliError::Config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn layout(&self) -> Result<FrameLayout, CliError> {
        FrameLayout::new(self.n_camera, self.n_register, self.grid_h, self.grid_w)
            .map_err(|e| CliError::Config(e.to_string()))
    }
}

fn variant(key: &str, v: &str) -> Result<StrategyVariant, CliError> {
    StrategyVariant::parse(v).map_err(|_| {
        let names: Vec<_> = StrategyVariant::ALL.iter().map(|s| s.name()).collect();
        bad(key, v, &names.join(", "))
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn echo_round_trips() {
        let mut s = Settings::default();
        s.apply_text(
            "ratio = 0.6\nstrategies = random, fastvggt # two\n\nstride = 3\n",
            "t",
        )
        .unwrap();
        let mut back = Settings::default();
        back.apply_text(&s.echo(), "echo").unwrap();
        assert_eq!(back, s);
        assert_eq!(back.stride, Some(3));
    }

    #[test]
    fn hash_ignores_seed_only() {
        let a = Settings::default();
        let mut b = a.clone();
        b.seed = 99;
        assert_eq!(a.config_hash(), b.config_hash());
        b.ratio = 0.5;
        assert_ne!(a.config_hash(), b.config_hash());
        assert_eq!(a.config_hash().len(), 12);
    }

    #[test]
    fn errors_name_the_line() {
        let mut s = Settings::default();
        let e = s.apply_text("dim = 64\nratio = lots\n", "cfg").unwrap_err();
        assert!(e.to_string().contains("cfg:2"), "{e}");
        assert!(s.apply("colour", "red").is_err());
        assert!(s.apply_text("no equals sign", "cfg").is_err());
    }

    #[test]
    fn auto_keep_fits_the_model() {
        let mut s = Settings::default();
        assert_eq!(s.model().unwrap().keep_layers, vec![4, 11, 17, 23]);
        s.n_blocks = 8;
        assert_eq!(s.model().unwrap().keep_layers, vec![4, 7]);
        s.keep_layers = Keep::Layers(vec![9]);
        assert!(s.model().is_err());
    }
}
