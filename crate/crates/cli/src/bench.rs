//! `bench`: dense and merged forwards over a ladder of frame counts.

use std::fmt::Write as _;
use std::path::PathBuf;

use globalmerge::profiler::{global_speedup, reports_to_csv, run_benchmark, BenchOutcome};
use globalmerge::{speedup, BenchOptions, BenchSize, Component, ProfileReport};
use serde::Serialize;

use crate::{csv_float, CliError, RunSpec};

/// One dense/merged pair of the ladder.
#[derive(Debug, Clone, Serialize)]
pub struct SpeedupRow {
    pub n_frames: usize,
    pub n_tokens: usize,
    /// Rows entering global attention at the first merged block.
    pub merged_tokens: usize,
    pub merge_fraction: f64,
    pub dense_ns: u64,
    pub merged_ns: u64,
    pub speedup: f64,
    pub global_speedup: f64,
    pub dense_global_share: f64,
    pub dense_attention_flops: u64,
    pub merged_attention_flops: u64,
}

pub const SUMMARY_HEADER: &str = "n_frames,n_tokens,merged_tokens,merge_fraction,dense_ns,merged_ns,speedup,global_speedup,dense_global_share,dense_attention_flops,merged_attention_flops";

/// Tokens seen by global attention in the first merged block of `merged`.
pub fn merged_tokens(merged: &ProfileReport) -> usize {
    merged
        .blocks
        .iter()
        .find(|b| b.block >= merged.merge.start_block)
        .and_then(|b| b.component(Component::GlobalAttn))
        .map_or(merged.n_tokens, |c| c.tokens_in)
}

pub fn summarize(outcome: &BenchOutcome) -> Result<Vec<SpeedupRow>, CliError> {
    outcome
        .pairs()
        .into_iter()
        .map(|(d, m)| {
            let mt = merged_tokens(m);
            Ok(SpeedupRow {
                n_frames: d.n_frames,
                n_tokens: d.n_tokens,
                merged_tokens: mt,
                merge_fraction: 1.0 - mt as f64 / d.n_tokens as f64,
                dense_ns: d.total_time_ns(),
                merged_ns: m.total_time_ns(),
                speedup: speedup(d, m)?,
                global_speedup: global_speedup(d, m)?,
                dense_global_share: d.global_share(),
                dense_attention_flops: d.component_attention_flops(Component::GlobalAttn),
                merged_attention_flops: m.component_attention_flops(Component::GlobalAttn),
            })
        })
        .collect()
}

fn summary_csv(rows: &[SpeedupRow]) -> String {
    let mut out = format!("{SUMMARY_HEADER}\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{}",
            r.n_frames,
            r.n_tokens,
            r.merged_tokens,
            csv_float(r.merge_fraction),
            r.dense_ns,
            r.merged_ns,
            csv_float(r.speedup),
            csv_float(r.global_speedup),
            csv_float(r.dense_global_share),
            r.dense_attention_flops,
            r.merged_attention_flops
        );
    }
    out
}

fn table(rows: &[SpeedupRow]) -> String {
    let mut out = format!(
        "{:>8} {:>8} {:>8} {:>12} {:>12} {:>9} {:>9} {:>8}\n",
        "frames", "tokens", "merged", "dense ms", "merged ms", "speedup", "global", "g-share"
    );
    for r in rows {
        let _ = writeln!(
            out,
            "{:>8} {:>8} {:>8} {:>12.1} {:>12.1} {:>8.2}x {:>8.2}x {:>8.3}",
            r.n_frames,
            r.n_tokens,
            r.merged_tokens,
            r.dense_ns as f64 / 1e6,
            r.merged_ns as f64 / 1e6,
            r.speedup,
            r.global_speedup,
            r.dense_global_share
        );
    }
    out
}

pub fn cmd_bench(spec: &RunSpec) -> Result<PathBuf, CliError> {
    let s = &spec.settings;
    let model = s.model()?;
    let cfg = s.merge(None)?;
    if s.frames.is_empty() {
        return Err(CliError::Config(
            "frames: at least one frame count is required".into(),
        ));
    }
    let sizes = s
        .frames
        .iter()
        .map(|&f| BenchSize::new(f, s.tokens_per_frame, s.dim))
        .collect::<globalmerge::Result<Vec<_>>>()?;
    let opts = BenchOptions {
        repeats: s.repeats,
        warmup: s.warmup,
        parallel: s.parallel,
        max_bytes: s.max_bytes,
    };
    if opts.repeats == 0 {
        return Err(CliError::Config("repeats must be at least 1".into()));
    }

    let dir = spec.prepare()?;
    let outcome = run_benchmark(&model, &cfg, &sizes, &opts, s.seed)?;
    let rows = summarize(&outcome)?;

    dir.write("profiles.csv", reports_to_csv(&outcome.reports))?;
    dir.write("summary.csv", summary_csv(&rows))?;
    let skipped: Vec<_> = outcome
        .skipped
        .iter()
        .map(|(size, why)| serde_json::json!({ "n_frames": size.n_frames, "reason": why }))
        .collect();
    let json = serde_json::json!({
        "reports": outcome.reports,
        "summary": rows,
        "skipped": skipped,
        "wall_time_ns": outcome.wall_time_ns as u64,
    });
    dir.write(
        "profiles.json",
        serde_json::to_string_pretty(&json).expect("plain data"),
    )?;

    print!("{}", table(&rows));
    for (size, why) in &outcome.skipped {
        println!("skipped {} frames: {why}", size.n_frames);
    }
    Ok(dir.path)
}
