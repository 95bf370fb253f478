use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::{Mutex, MutexGuard};

use globalmerge::viz::parse_pgm_header;

// Every test spawns CPU-heavy processes and one of them measures wall time,
// so they run one at a time.
static SERIAL: Mutex<()> = Mutex::new(());

fn serial() -> MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|e| e.into_inner())
}

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_globalmerge"))
}

fn run_in(dir: &Path, args: &[&str]) -> Output {
    bin().current_dir(dir).args(args).output().unwrap()
}

/// The single run directory under `out`.
fn run_dir(out: &Path) -> PathBuf {
    let dirs: Vec<_> = fs::read_dir(out)
        .unwrap()
        .map(|e| e.unwrap().path())
        .collect();
    assert_eq!(dirs.len(), 1, "{dirs:?}");
    dirs.into_iter().next().unwrap()
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

const TINY: [&str; 10] = [
    "--dim",
    "16",
    "--heads",
    "2",
    "--n-blocks",
    "3",
    "--n-frames",
    "3",
    "--seeds",
    "2",
];

#[test]
fn exit_codes() {
    let _serial = serial();
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(run_in(tmp.path(), &["--help"]).status.code(), Some(0));
    assert_eq!(run_in(tmp.path(), &["--version"]).status.code(), Some(0));
    assert_eq!(run_in(tmp.path(), &[]).status.code(), Some(1));
    assert_eq!(
        run_in(tmp.path(), &["bench", "--no-such-flag"])
            .status
            .code(),
        Some(1)
    );
    assert_eq!(
        run_in(tmp.path(), &["bench", "--ratio", "lots"])
            .status
            .code(),
        Some(1)
    );
    assert_eq!(
        run_in(tmp.path(), &["ablate", "--ratio", "1.5"])
            .status
            .code(),
        Some(1)
    );
    assert_eq!(
        run_in(tmp.path(), &["analyze", "--blocks", "99"])
            .status
            .code(),
        Some(1)
    );
    let o = run_in(tmp.path(), &["viz-partition", "--input", "absent.bin"]);
    assert_eq!(o.status.code(), Some(1));
    // A fixture that does not parse is a runtime error.
    fs::write(tmp.path().join("junk.bin"), b"not a fixture").unwrap();
    let o = run_in(
        tmp.path(),
        &["viz-partition", "--input", "junk.bin", "--out", "j"],
    );
    assert_eq!(
        o.status.code(),
        Some(2),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
}

#[test]
fn missing_config_writes_nothing() {
    let _serial = serial();
    let tmp = tempfile::tempdir().unwrap();
    let o = run_in(
        tmp.path(),
        &["bench", "--config", "nope.cfg", "--out", "out"],
    );
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("nope.cfg"));
    assert!(!tmp.path().join("out").exists());
}

#[test]
fn bench_ladder_writes_two_reports_per_size() {
    let _serial = serial();
    let tmp = tempfile::tempdir().unwrap();
    let o = run_in(
        tmp.path(),
        &[
            "bench",
            "--frames",
            "8,16,32,64",
            "--ratio",
            "0.9",
            "--start-block",
            "0",
            "--tokens-per-frame",
            "8",
            "--dim",
            "16",
            "--heads",
            "2",
            "--n-blocks",
            "2",
            "--repeats",
            "1",
            "--warmup",
            "0",
            "--out",
            "out",
        ],
    );
    assert_eq!(
        o.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    let dir = run_dir(&tmp.path().join("out"));
    let j = json(&dir.join("profiles.json"));
    let reports = j["reports"].as_array().unwrap();
    assert_eq!(reports.len(), 8);
    let modes: Vec<_> = reports
        .iter()
        .map(|r| r["mode"].as_str().unwrap())
        .collect();
    assert_eq!(modes, ["dense", "merged"].repeat(4));
    let csv = fs::read_to_string(dir.join("profiles.csv")).unwrap();
    assert!(csv.starts_with(globalmerge::profiler::CSV_HEADER));
    // 8 reports × 2 blocks × 3 components.
    assert_eq!(csv.lines().count(), 1 + 8 * 2 * 3);
    assert_eq!(
        fs::read_to_string(dir.join("summary.csv"))
            .unwrap()
            .lines()
            .count(),
        5
    );
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.contains("speedup"), "{stdout}");
}

#[test]
fn zero_ratio_speedup_is_one() {
    let _serial = serial();
    // Timing-based, so allow a couple of attempts on a busy machine.
    let mut last = Vec::new();
    for _ in 0..3 {
        let tmp = tempfile::tempdir().unwrap();
        let o = run_in(
            tmp.path(),
            &[
                "bench",
                "--frames",
                "8,16",
                "--ratio",
                "0",
                "--tokens-per-frame",
                "64",
                "--dim",
                "32",
                "--heads",
                "2",
                "--n-blocks",
                "2",
                "--repeats",
                "5",
                "--out",
                "out",
            ],
        );
        assert_eq!(o.status.code(), Some(0));
        let j = json(&run_dir(&tmp.path().join("out")).join("profiles.json"));
        last = j["summary"]
            .as_array()
            .unwrap()
            .iter()
            .map(|r| r["speedup"].as_f64().unwrap())
            .collect();
        let merged: Vec<_> = j["summary"]
            .as_array()
            .unwrap()
            .iter()
            .map(|r| r["merge_fraction"].as_f64().unwrap())
            .collect();
        assert!(merged.iter().all(|&f| f == 0.0));
        if last.iter().all(|s| (s - 1.0).abs() <= 0.1) {
            return;
        }
    }
    panic!("speedups {last:?}");
}

#[test]
fn config_file_with_flag_override() {
    let _serial = serial();
    let tmp = tempfile::tempdir().unwrap();
    fs::write(
        tmp.path().join("run.cfg"),
        "# tiny grid\nratio = 0.6\nstrategies = random, fastvggt\nratios = 0.5\nstart_blocks = 0, 3\n",
    )
    .unwrap();
    let mut args = vec![
        "ablate", "--config", "run.cfg", "--ratio", "0.3", "--out", "out",
    ];
    args.extend(TINY);
    let o = run_in(tmp.path(), &args);
    assert_eq!(
        o.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    let dir = run_dir(&tmp.path().join("out"));
    let echo = fs::read_to_string(dir.join("config.txt")).unwrap();
    assert!(echo.contains("ratio = 0.3\n"));
    assert!(echo.contains("strategies = random,fastvggt\n"));
    assert!(dir.file_name().unwrap().to_str().unwrap().ends_with("-s0"));

    let cells = fs::read_to_string(dir.join("ablation.csv")).unwrap();
    assert_eq!(cells.lines().count(), 1 + 2 * 2);
    let controls = fs::read_to_string(dir.join("controls.csv")).unwrap();
    for row in controls.lines().skip(1) {
        let f: Vec<&str> = row.split(',').collect();
        assert_eq!(f[2], "3");
        assert_eq!(f[5].parse::<f64>().unwrap(), 0.0);
    }
    // One matched row per fastvggt cell and seed, at the same fraction.
    let matched = fs::read_to_string(dir.join("matched.csv")).unwrap();
    assert_eq!(matched.lines().count(), 1 + 2 * 2);
    for row in matched.lines().skip(1) {
        let f: Vec<&str> = row.split(',').collect();
        assert_eq!(f[3], f[5], "{row}");
    }
}

#[test]
fn ablation_is_reproducible_apart_from_timing() {
    let _serial = serial();
    let strip = |csv: String| -> Vec<String> {
        csv.lines()
            .map(|l| l.rsplit_once(',').unwrap().0.to_string())
            .collect()
    };
    let mut outputs = Vec::new();
    for _ in 0..2 {
        let tmp = tempfile::tempdir().unwrap();
        let mut args = vec![
            "ablate",
            "--ratios",
            "0.3,0.9",
            "--start-blocks",
            "0,2",
            "--seed",
            "7",
            "--out",
            "o",
        ];
        args.extend(TINY);
        assert_eq!(run_in(tmp.path(), &args).status.code(), Some(0));
        let dir = run_dir(&tmp.path().join("o"));
        assert!(dir.ends_with(dir.file_name().unwrap()));
        outputs.push((
            dir.file_name().unwrap().to_owned(),
            strip(fs::read_to_string(dir.join("ablation_seeds.csv")).unwrap()),
            fs::read_to_string(dir.join("matched.csv")).unwrap(),
        ));
    }
    assert_eq!(outputs[0], outputs[1]);
    assert!(outputs[0].0.to_str().unwrap().ends_with("-s7"));
}

#[test]
fn analyze_sections_and_heatmaps() {
    let _serial = serial();
    let tmp = tempfile::tempdir().unwrap();
    let o = run_in(
        tmp.path(),
        &[
            "analyze",
            "--blocks",
            "0,11,23",
            "--heatmaps",
            "--n-frames",
            "2",
            "--fixture",
            "random",
            "--out",
            "out",
        ],
    );
    assert_eq!(
        o.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    let dir = run_dir(&tmp.path().join("out"));
    let j = json(&dir.join("redundancy.json"));
    let blocks: Vec<u64> = j["blocks"]
        .as_array()
        .unwrap()
        .iter()
        .map(|b| b["block"].as_u64().unwrap())
        .collect();
    assert_eq!(blocks, [0, 11, 23]);
    let n = 2 * 69;
    for b in [0, 11, 23] {
        let bytes = fs::read(dir.join(format!("attention_b{b:02}.pgm"))).unwrap();
        let (w, h, off) = parse_pgm_header(&bytes).unwrap();
        assert_eq!((w, h), (n, n));
        assert_eq!(bytes.len() - off, n * n);
    }
}

#[test]
fn rank1_fixture_has_unit_similarity() {
    let _serial = serial();
    let tmp = tempfile::tempdir().unwrap();
    let o = run_in(
        tmp.path(),
        &[
            "analyze",
            "--fixture",
            "rank1",
            "--blocks",
            "5",
            "--out",
            "out",
        ],
    );
    assert_eq!(o.status.code(), Some(0));
    let j = json(&run_dir(&tmp.path().join("out")).join("redundancy.json"));
    let mean = j["blocks"][0]["similarity"]["mean"].as_f64().unwrap();
    assert!((mean - 1.0).abs() < 1e-6, "{mean}");
}

#[test]
fn fixture_feeds_viz_partition() {
    let _serial = serial();
    let tmp = tempfile::tempdir().unwrap();
    let o = run_in(
        tmp.path(),
        &[
            "gen-fixture",
            "--n-frames",
            "3",
            "--dim",
            "16",
            "--seed",
            "4",
            "--out",
            "fx",
        ],
    );
    assert_eq!(o.status.code(), Some(0));
    let fixture = run_dir(&tmp.path().join("fx")).join("fixture.bin");
    let seq = globalmerge::TokenSequence::read_from(fs::File::open(&fixture).unwrap()).unwrap();
    assert_eq!(
        (seq.n_frames(), seq.dim(), seq.layout().tokens_per_frame()),
        (3, 16, 69)
    );

    let o = run_in(
        tmp.path(),
        &[
            "viz-partition",
            "--input",
            fixture.to_str().unwrap(),
            "--dim",
            "16",
            "--out",
            "viz",
        ],
    );
    assert_eq!(
        o.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    let dir = run_dir(&tmp.path().join("viz"));
    let p: globalmerge::Partition =
        serde_json::from_str(&fs::read_to_string(dir.join("partition.json")).unwrap()).unwrap();
    p.validate(seq.n_tokens()).unwrap();
    let map = json(&dir.join("merge_map.json"));
    assert_eq!(map["assignment"].as_array().unwrap().len(), p.src.len());
    for f in 0..3 {
        let bytes = fs::read(dir.join(format!("mask_f{f:03}.pgm"))).unwrap();
        let (w, h, off) = parse_pgm_header(&bytes).unwrap();
        assert_eq!((w, h), (8, 8));
        // Reference frame: every patch is dst.
        if f == 0 {
            assert!(bytes[off..].iter().all(|&g| g == 170));
        }
    }
}
