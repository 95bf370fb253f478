//! `ablate`: strategy × ratio × start-block grid.
//!
//! Error is the relative L2 distance between merged and dense outputs over
//! all kept layers stacked together. Besides the grid itself the command
//! writes start_block = L control runs (no merging, error must be 0) and a
//! matched comparison: for every fastvggt cell and seed, the random baseline
//! rerun at exactly the effective merge fraction fastvggt produced.

use std::fmt::Write as _;
use std::path::PathBuf;

use globalmerge::{
    forward, ForwardOptions, ForwardOutput, MergeConfig, Mode, ModelConfig, ModelWeights,
    StrategyVariant, TokenSequence,
};
use serde::Serialize;

use crate::{csv_float, load_sequence, CliError, RunSpec, Settings};

#[derive(Debug, Clone, Serialize)]
pub struct SeedRow {
    pub strategy: StrategyVariant,
    pub ratio: f64,
    pub start_block: usize,
    pub seed: u64,
    pub merge_fraction: f64,
    pub rel_l2_error: f64,
    pub time_ns: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct CellRow {
    pub strategy: StrategyVariant,
    pub ratio: f64,
    pub start_block: usize,
    pub seeds: usize,
    pub merge_fraction: f64,
    pub rel_l2_error: f64,
    pub rel_l2_error_min: f64,
    pub rel_l2_error_max: f64,
    pub time_ns: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct MatchedRow {
    pub ratio: f64,
    pub start_block: usize,
    pub seed: u64,
    pub fastvggt_fraction: f64,
    pub fastvggt_error: f64,
    pub random_fraction: f64,
    pub random_error: f64,
}

impl MatchedRow {
    pub fn fastvggt_not_worse(&self) -> bool {
        self.fastvggt_error <= self.random_error
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct AblationOutcome {
    pub n_blocks: usize,
    pub n_tokens: usize,
    pub seeds: Vec<u64>,
    pub cells: Vec<CellRow>,
    pub per_seed: Vec<SeedRow>,
    pub controls: Vec<SeedRow>,
    pub matched: Vec<MatchedRow>,
}

impl AblationOutcome {
    /// Seeds on which fastvggt is not worse than matched random, and the
    /// number of seeds compared, for one cell.
    pub fn matched_wins(&self, ratio: f64, start_block: usize) -> (usize, usize) {
        let rows: Vec<_> = self
            .matched
            .iter()
            .filter(|m| m.ratio == ratio && m.start_block == start_block)
            .collect();
        (
            rows.iter().filter(|m| m.fastvggt_not_worse()).count(),
            rows.len(),
        )
    }
}

/// Relative L2 distance over all kept outputs stacked.
pub fn kept_error(merged: &ForwardOutput, dense: &ForwardOutput) -> f64 {
    let (mut diff, mut base) = (0.0f64, 0.0f64);
    for ((_, m), (_, d)) in merged.retained.iter().zip(&dense.retained) {
        for (&x, &y) in m.data().iter().zip(d.data()) {
            let e = x as f64 - y as f64;
            diff += e * e;
            base += y as f64 * y as f64;
        }
    }
    if base == 0.0 {
        if diff == 0.0 {
            0.0
        } else {
            f64::INFINITY
        }
    } else {
        (diff / base).sqrt()
    }
}

fn first_fraction(out: &ForwardOutput) -> f64 {
    out.partitions
        .first()
        .map_or(0.0, |(_, p)| p.effective_merge_fraction())
}

struct Runner<'a> {
    model: &'a ModelConfig,
    weights: &'a ModelWeights,
    seq: &'a TokenSequence,
    dense: &'a ForwardOutput,
    opts: ForwardOptions,
}

impl Runner<'_> {
    fn run(
        &self,
        strategy: StrategyVariant,
        cfg: &MergeConfig,
        seed: u64,
    ) -> Result<SeedRow, CliError> {
        let out = forward(
            self.seq,
            self.model,
            self.weights,
            cfg,
            Mode::Merged,
            &self.opts,
        )?;
        Ok(SeedRow {
            strategy,
            ratio: cfg.merge_ratio,
            start_block: cfg.start_block,
            seed,
            merge_fraction: first_fraction(&out),
            rel_l2_error: kept_error(&out, self.dense),
            time_ns: out.profile.total_time_ns(),
        })
    }
}

fn validate(s: &Settings) -> Result<(), CliError> {
    if s.strategies.is_empty() || s.ratios.is_empty() || s.start_blocks.is_empty() {
        return Err(CliError::Config("ablation axes must not be empty".into()));
    }
    if s.seeds == 0 {
        return Err(CliError::Config("seeds must be at least 1".into()));
    }
    if let Some(&b) = s.start_blocks.iter().find(|&&b| b > s.n_blocks) {
        return Err(CliError::Config(format!(
            "start block {b} beyond the model's {} blocks",
            s.n_blocks
        )));
    }
    Ok(())
}

/// Runs the full grid without writing anything.
pub fn run_ablation(s: &Settings) -> Result<AblationOutcome, CliError> {
    validate(s)?;
    s.validate()?;
    let model = s.model()?;
    let weights = ModelWeights::generate(&model);
    let opts = ForwardOptions {
        parallel: s.parallel,
        ..Default::default()
    };
    let seeds: Vec<u64> = (0..s.seeds as u64)
        .map(|i| s.seed.wrapping_add(i))
        .collect();

    let mut per_seed = Vec::new();
    let mut controls = Vec::new();
    let mut matched = Vec::new();
    let mut n_tokens = 0;
    for &seed in &seeds {
        let seq = load_sequence(s, seed)?;
        n_tokens = seq.n_tokens();
        let dense = forward(
            &seq,
            &model,
            &weights,
            &MergeConfig::default(),
            Mode::Dense,
            &opts,
        )?;
        let runner = Runner {
            model: &model,
            weights: &weights,
            seq: &seq,
            dense: &dense,
            opts: opts.clone(),
        };
        let settings_for = |ratio: f64, start_block: usize| Settings {
            ratio,
            start_block,
            seed,
            ..s.clone()
        };
        for &strategy in &s.strategies {
            for &ratio in &s.ratios {
                for &start_block in &s.start_blocks {
                    let cfg = settings_for(ratio, start_block).merge(Some(strategy))?;
                    let row = runner.run(strategy, &cfg, seed)?;
                    if strategy == StrategyVariant::FastVggt {
                        let rcfg = settings_for(row.merge_fraction, start_block)
                            .merge(Some(StrategyVariant::Random))?;
                        let random = runner.run(StrategyVariant::Random, &rcfg, seed)?;
                        matched.push(MatchedRow {
                            ratio,
                            start_block,
                            seed,
                            fastvggt_fraction: row.merge_fraction,
                            fastvggt_error: row.rel_l2_error,
                            random_fraction: random.merge_fraction,
                            random_error: random.rel_l2_error,
                        });
                    }
                    per_seed.push(row);
                }
                let cfg = settings_for(ratio, model.n_blocks).merge(Some(strategy))?;
                controls.push(runner.run(strategy, &cfg, seed)?);
            }
        }
    }

    let mut cells = Vec::new();
    for &strategy in &s.strategies {
        for &ratio in &s.ratios {
            for &start_block in &s.start_blocks {
                let rows: Vec<_> = per_seed
                    .iter()
                    .filter(|r| {
                        r.strategy == strategy && r.ratio == ratio && r.start_block == start_block
                    })
                    .collect();
                let k = rows.len() as f64;
                let errs = rows.iter().map(|r| r.rel_l2_error);
                let mut times: Vec<u64> = rows.iter().map(|r| r.time_ns).collect();
                times.sort_unstable();
                cells.push(CellRow {
                    strategy,
                    ratio,
                    start_block,
                    seeds: rows.len(),
                    merge_fraction: rows.iter().map(|r| r.merge_fraction).sum::<f64>() / k,
                    rel_l2_error: errs.clone().sum::<f64>() / k,
                    rel_l2_error_min: errs.clone().fold(f64::INFINITY, f64::min),
                    rel_l2_error_max: errs.fold(f64::NEG_INFINITY, f64::max),
                    time_ns: times[times.len() / 2],
                });
            }
        }
    }

    Ok(AblationOutcome {
        n_blocks: model.n_blocks,
        n_tokens,
        seeds,
        cells,
        per_seed,
        controls,
        matched,
    })
}

pub const CELL_HEADER: &str = "strategy,ratio,start_block,seeds,merge_fraction,rel_l2_error,rel_l2_error_min,rel_l2_error_max,time_ns";
pub const SEED_HEADER: &str = "strategy,ratio,start_block,seed,merge_fraction,rel_l2_error,time_ns";
pub const MATCHED_HEADER: &str = "ratio,start_block,seed,fastvggt_fraction,fastvggt_error,random_fraction,random_error,fastvggt_not_worse";

fn seed_csv(rows: &[SeedRow]) -> String {
    let mut out = format!("{SEED_HEADER}\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.strategy.name(),
            r.ratio,
            r.start_block,
            r.seed,
            csv_float(r.merge_fraction),
            csv_float(r.rel_l2_error),
            r.time_ns
        );
    }
    out
}

pub fn write_csvs(o: &AblationOutcome) -> [(&'static str, String); 4] {
    let mut cells = format!("{CELL_HEADER}\n");
    for c in &o.cells {
        let _ = writeln!(
            cells,
            "{},{},{},{},{},{},{},{},{}",
            c.strategy.name(),
            c.ratio,
            c.start_block,
            c.seeds,
            csv_float(c.merge_fraction),
            csv_float(c.rel_l2_error),
            csv_float(c.rel_l2_error_min),
            csv_float(c.rel_l2_error_max),
            c.time_ns
        );
    }
    let mut matched = format!("{MATCHED_HEADER}\n");
    for m in &o.matched {
        let _ = writeln!(
            matched,
            "{},{},{},{},{},{},{},{}",
            m.ratio,
            m.start_block,
            m.seed,
            csv_float(m.fastvggt_fraction),
            csv_float(m.fastvggt_error),
            csv_float(m.random_fraction),
            csv_float(m.random_error),
            m.fastvggt_not_worse()
        );
    }
    [
        ("ablation.csv", cells),
        ("ablation_seeds.csv", seed_csv(&o.per_seed)),
        ("controls.csv", seed_csv(&o.controls)),
        ("matched.csv", matched),
    ]
}

pub fn cmd_ablate(spec: &RunSpec) -> Result<PathBuf, CliError> {
    validate(&spec.settings)?;
    spec.settings.validate()?;
    let dir = spec.prepare()?;
    let o = run_ablation(&spec.settings)?;
    for (name, body) in write_csvs(&o) {
        dir.write(name, body)?;
    }
    dir.write(
        "ablation.json",
        serde_json::to_string_pretty(&o).expect("plain data"),
    )?;

    println!(
        "{:>13} {:>6} {:>6} {:>9} {:>10}",
        "strategy", "ratio", "start", "fraction", "rel-L2"
    );
    for c in &o.cells {
        println!(
            "{:>13} {:>6} {:>6} {:>9.3} {:>10.4}",
            c.strategy.name(),
            c.ratio,
            c.start_block,
            c.merge_fraction,
            c.rel_l2_error
        );
    }
    let worst_control = o
        .controls
        .iter()
        .map(|r| r.rel_l2_error)
        .fold(0.0, f64::max);
    println!(
        "control runs (start_block = {}): max error {worst_control}",
        o.n_blocks
    );
    if !o.matched.is_empty() {
        println!("fastvggt not worse than random at matched fraction:");
        for &ratio in &spec.settings.ratios {
            for &sb in &spec.settings.start_blocks {
                let (w, n) = o.matched_wins(ratio, sb);
                println!("  ratio {ratio} start {sb}: {w}/{n} seeds");
            }
        }
    }
    Ok(dir.path)
}
