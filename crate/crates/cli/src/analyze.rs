//! `analyze`: redundancy statistics of dense global attention.

use std::io::BufWriter;
use std::path::PathBuf;

use globalmerge::analyzer::{analyze_block, RedundancyReport};
use globalmerge::viz::heatmap_pgm;
use globalmerge::{forward, ForwardOptions, Matrix, MergeConfig, Mode, ModelWeights, Real};

use crate::{load_sequence, CliError, RunSpec, Settings};

/// Head-averaged attention map.
pub fn mean_map(heads: &[Matrix]) -> Matrix {
    let (r, c) = heads[0].shape();
    let mut acc = vec![0.0f64; r * c];
    for h in heads {
        for (a, &v) in acc.iter_mut().zip(h.data()) {
            *a += v as f64;
        }
    }
    let k = heads.len() as f64;
    Matrix::from_vec(r, c, acc.into_iter().map(|v| (v / k) as Real).collect())
        .expect("shape preserved")
}

/// Dense forward with capture, analyzed. Returns the report and the
/// head-averaged maps in capture order.
pub fn run_analysis(s: &Settings) -> Result<(RedundancyReport, Vec<(usize, Matrix)>), CliError> {
    let model = s.model()?;
    if s.capture_blocks.is_empty() {
        return Err(CliError::Config(
            "capture_blocks must name at least one block".into(),
        ));
    }
    if let Some(&b) = s.capture_blocks.iter().find(|&&b| b >= model.n_blocks) {
        return Err(CliError::Config(format!(
            "block {b} does not exist in a {}-block model",
            model.n_blocks
        )));
    }
    let seq = load_sequence(s, s.seed)?;
    let weights = ModelWeights::generate(&model);
    let opts = ForwardOptions {
        parallel: s.parallel,
        capture_blocks: s.capture_blocks.clone(),
    };
    let out = forward(
        &seq,
        &model,
        &weights,
        &MergeConfig::default(),
        Mode::Dense,
        &opts,
    )?;
    let blocks = out
        .captured
        .iter()
        .map(|c| analyze_block(c, seq.layout(), seq.n_frames(), s.pairs, s.seed))
        .collect::<globalmerge::Result<Vec<_>>>()?;
    let maps = out
        .captured
        .iter()
        .map(|c| (c.block, mean_map(&c.heads)))
        .collect();
    Ok((
        RedundancyReport {
            n_frames: seq.n_frames(),
            layout: *seq.layout(),
            blocks,
        },
        maps,
    ))
}

pub fn cmd_analyze(spec: &RunSpec) -> Result<PathBuf, CliError> {
    let s = &spec.settings;
    s.model()?;
    if s.input.is_none() {
        s.layout()?;
    }
    let dir = spec.prepare()?;
    let (report, maps) = run_analysis(s)?;
    dir.write("redundancy.json", report.to_json())?;
    if s.heatmaps {
        for (block, m) in &maps {
            heatmap_pgm(
                BufWriter::new(dir.file(&format!("attention_b{block:02}.pgm"))?),
                m,
            )?;
        }
    }
    println!(
        "{:>6} {:>8} {:>9} {:>9} {:>9} {:>11} {:>9}",
        "block", "pairs", "sim mean", "sim p10", "sim p90", "frame0 mass", "uniform"
    );
    for b in &report.blocks {
        println!(
            "{:>6} {:>8} {:>9.4} {:>9.4} {:>9.4} {:>11.4} {:>9.4}",
            b.block,
            b.similarity.pairs,
            b.similarity.mean,
            b.similarity.p10,
            b.similarity.p90,
            b.frame0_mass.mean,
            b.frame0_mass.uniform
        );
    }
    Ok(dir.path)
}
