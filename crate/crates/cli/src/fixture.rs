//! `gen-fixture` and `viz-partition`.

use std::io::BufWriter;
use std::path::PathBuf;

use globalmerge::viz::partition_mask_pgm;
use globalmerge::{build_partition, match_tokens, MergeConfig};

use crate::{load_sequence, CliError, RunSpec};

pub fn cmd_gen_fixture(spec: &RunSpec) -> Result<PathBuf, CliError> {
    let s = &spec.settings;
    if s.input.is_some() {
        return Err(CliError::Config(
            "gen-fixture generates its own input; unset input".into(),
        ));
    }
    s.layout()?;
    let dir = spec.prepare()?;
    let seq = load_sequence(s, s.seed)?;
    seq.write_to(BufWriter::new(dir.file("fixture.bin")?))?;
    println!(
        "{} fixture: {} frames x {} tokens, width {}",
        s.fixture.name(),
        seq.n_frames(),
        seq.layout().tokens_per_frame(),
        seq.dim()
    );
    Ok(dir.path)
}

/// Partition of the input tokens as the first merged block would draw it
/// (same per-block seed), its merge map, and one role mask per frame.
pub fn cmd_viz_partition(spec: &RunSpec) -> Result<PathBuf, CliError> {
    let s = &spec.settings;
    let base = s.merge(None)?;
    if s.input.is_none() {
        s.layout()?;
    }
    let dir = spec.prepare()?;
    let seq = load_sequence(s, s.seed)?;
    let cfg = MergeConfig {
        seed: base.block_seed(base.start_block),
        ..base
    };
    let partition = build_partition(&seq, &cfg)?;
    let map = match_tokens(&seq, &partition)?;
    dir.write(
        "partition.json",
        serde_json::to_string_pretty(&partition).expect("plain data"),
    )?;
    dir.write("merge_map.json", map.to_json())?;
    for f in 0..seq.n_frames() {
        partition_mask_pgm(
            BufWriter::new(dir.file(&format!("mask_f{f:03}.pgm"))?),
            &partition,
            seq.layout(),
            seq.n_frames(),
            f,
        )?;
    }
    println!(
        "{}: {} salient, {} dst, {} src of {} tokens (merge fraction {:.4})",
        s.strategy.name(),
        partition.salient.len(),
        partition.dst.len(),
        partition.src.len(),
        partition.n_tokens(),
        partition.effective_merge_fraction()
    );
    Ok(dir.path)
}
