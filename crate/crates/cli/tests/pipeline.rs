//! End-to-end behavior of the `hypolift` binary on a small configuration.

use std::path::Path;
use std::process::{Command, Output};

use hypolift_cli::RunConfig;
use hypolift_core::checkpoint::Checkpoint;
use hypolift_core::dataset::Dataset;
use hypolift_core::diffusion::Model;
use hypolift_core::hypotheses::{HypothesesFile, RecordHypotheses};
use hypolift_core::metrics::MetricReport;
use hypolift_core::rng;

const SMALL: &str = r#"
seed = 3
train_records = 40
test_records = 6
bins = 8
embed_dim = 8
layers = 1
heads = 2
ff_dim = 16
hidden = 32
samples = 8
iterations = 20
batch = 8
eval_every = 10
eval_records = 3
eval_hypotheses = 4
hypotheses = 5
m_sweep = [1, 2, 5]
"#;

fn hypolift(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hypolift"))
        .args(args)
        .current_dir(dir)
        .env_remove("HYPOLIFT_CONFIG")
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) {
    let out = hypolift(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("small.toml"), SMALL).unwrap();
    dir
}

fn run(dir: &Path, sub: &str, extra: &[&str]) {
    let mut args = vec![sub, "--config", "small.toml"];
    args.extend_from_slice(extra);
    ok(dir, &args);
}

#[test]
fn gen_data_is_deterministic_with_disjoint_splits() {
    let dir = setup();
    let d = dir.path();
    run(d, "gen-data", &[]);
    let train = std::fs::read(d.join("data/train.hlds")).unwrap();
    let test = std::fs::read(d.join("data/test.hlds")).unwrap();
    run(d, "gen-data", &[]);
    assert_eq!(train, std::fs::read(d.join("data/train.hlds")).unwrap());
    assert_eq!(test, std::fs::read(d.join("data/test.hlds")).unwrap());
    let (a, b) = (Dataset::decode(&train).unwrap(), Dataset::decode(&test).unwrap());
    assert_eq!((a.records.len(), b.records.len()), (40, 6));
    for r in &b.records {
        assert!(a.records.iter().all(|q| q.index != r.index && q.pose != r.pose));
    }
}

#[test]
fn zero_iterations_save_the_initialization() {
    let dir = setup();
    let d = dir.path();
    run(d, "gen-data", &[]);
    run(d, "train", &["--iterations", "0"]);
    let ck = Checkpoint::load(&d.join("run/model.hlck")).unwrap();
    let cfg = RunConfig::from_toml(SMALL).unwrap();
    let init = Model::new(cfg.model(16), &mut rng::named(cfg.seed, "train/init")).unwrap();
    let loaded = Model::from_checkpoint(&ck).unwrap();
    for p in init.store.iter() {
        let id = loaded.store.id(p.name()).unwrap();
        assert_eq!(loaded.store.value(id), p.value(), "{}", p.name());
    }
}

#[test]
fn training_and_sampling_repeat_exactly() {
    let dir = setup();
    let d = dir.path();
    run(d, "gen-data", &[]);
    run(d, "train", &[]);
    let first = std::fs::read(d.join("run/model.hlck")).unwrap();
    let curve = std::fs::read_to_string(d.join("run/loss.csv")).unwrap();
    assert_eq!(curve.lines().count(), 21);
    let snaps = std::fs::read_to_string(d.join("run/snapshots.csv")).unwrap();
    assert_eq!(snaps.lines().count(), 3);
    run(d, "train", &[]);
    assert_eq!(first, std::fs::read(d.join("run/model.hlck")).unwrap());

    run(d, "sample", &[]);
    let hyps = std::fs::read(d.join("run/hypotheses.hlhy")).unwrap();
    run(d, "sample", &[]);
    assert_eq!(hyps, std::fs::read(d.join("run/hypotheses.hlhy")).unwrap());

    run(d, "sample", &["--deterministic", "--hypotheses-file", "run/z0.hlhy"]);
    let z0 = HypothesesFile::read(&d.join("run/z0.hlhy")).unwrap();
    assert!(z0.deterministic);
    for r in &z0.records {
        assert!(r.poses.iter().all(|p| *p == r.poses[0]));
    }

    run(d, "eval", &[]);
    let report: MetricReport =
        serde_json::from_str(&std::fs::read_to_string(d.join("run/report.json")).unwrap()).unwrap();
    assert!(report.is_finite());
    assert_eq!((report.records, report.hypotheses), (6, 5));
    let sweep = std::fs::read_to_string(d.join("run/sweep.csv")).unwrap();
    let mpjpe: Vec<f64> = sweep.lines().skip(1).map(|l| l.split(',').nth(5).unwrap().parse().unwrap()).collect();
    assert_eq!(mpjpe.len(), 3);
    assert!(mpjpe.windows(2).all(|w| w[1] <= w[0]), "{mpjpe:?}");

    run(d, "plot", &[]);
    let svg = std::fs::read(d.join("run/sweep.svg")).unwrap();
    run(d, "plot", &[]);
    assert_eq!(svg, std::fs::read(d.join("run/sweep.svg")).unwrap());
}

#[test]
fn ground_truth_hypotheses_score_perfectly() {
    let dir = setup();
    let d = dir.path();
    run(d, "gen-data", &[]);
    let data = Dataset::read(&d.join("data/test.hlds")).unwrap();
    let file = HypothesesFile {
        joints: 16,
        hypotheses: 3,
        deterministic: false,
        seed: 0,
        timesteps: 25,
        samples: 8,
        records: data
            .records
            .iter()
            .map(|r| RecordHypotheses { index: r.index, poses: vec![r.pose.to_vector(); 3] })
            .collect(),
    };
    file.write(&d.join("gt.hlhy")).unwrap();
    run(d, "eval", &["--hypotheses-file", "gt.hlhy"]);
    let report: MetricReport =
        serde_json::from_str(&std::fs::read_to_string(d.join("run/report.json")).unwrap()).unwrap();
    assert!(report.mpjpe_mm.abs() < 1e-9 && report.pa_mpjpe_mm.abs() < 1e-6);
    assert_eq!((report.pck_percent, report.cps), (100.0, 300.0));
    assert!(report.symmetry_mm < 1e-9);

    let short = HypothesesFile { records: file.records[..4].to_vec(), ..file };
    short.write(&d.join("short.hlhy")).unwrap();
    let out = hypolift(d, &["eval", "--config", "small.toml", "--hypotheses-file", "short.hlhy"]);
    assert_eq!(out.status.code(), Some(1));
    let msg = stderr(&out);
    assert!(msg.contains("4 records") && msg.contains("6"), "{msg}");
}

#[test]
fn divergence_reports_step_rate_and_batch() {
    let dir = setup();
    let d = dir.path();
    run(d, "gen-data", &[]);
    let out = hypolift(d, &["train", "--config", "small.toml", "--lr", "1e300"]);
    assert_eq!(out.status.code(), Some(1));
    let msg = stderr(&out);
    assert!(msg.starts_with("hypolift: error[diverged]:"), "{msg}");
    assert!(msg.contains("step ") && msg.contains("lr 1e300") && msg.contains("batch hash"), "{msg}");
    assert!(d.join("run/loss.csv").exists());
}

#[test]
fn usage_errors_exit_with_two() {
    let dir = setup();
    let d = dir.path();
    let out = hypolift(d, &["sample", "--hypotheses", "0"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).starts_with("hypolift: error[usage]:"));
    let out = hypolift(d, &["train", "--no-such-key", "1"]);
    assert_eq!(out.status.code(), Some(2));
    let out = hypolift(d, &["train", "--iterations", "many"]);
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
    let out = hypolift(d, &["eval", "--test-data", "missing.hlds"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).starts_with("hypolift: error[io]:"), "{}", stderr(&out));
    assert!(hypolift(d, &["--help"]).status.success());
}

#[test]
fn config_file_flags_and_environment() {
    let dir = setup();
    let d = dir.path();
    let out = hypolift(d, &["config", "--config", "small.toml", "--seed", "9"]);
    let cfg = RunConfig::from_toml(&String::from_utf8(out.stdout).unwrap()).unwrap();
    assert_eq!((cfg.seed, cfg.train_records), (9, 40));
    let out = Command::new(env!("CARGO_BIN_EXE_hypolift"))
        .args(["config"])
        .current_dir(d)
        .env("HYPOLIFT_CONFIG", "small.toml")
        .output()
        .unwrap();
    let cfg = RunConfig::from_toml(&String::from_utf8(out.stdout).unwrap()).unwrap();
    assert_eq!((cfg.seed, cfg.hidden), (3, 32));
    std::fs::write(d.join("bad.toml"), "seed = \"x\"\n").unwrap();
    let out = hypolift(d, &["config", "--config", "bad.toml"]);
    assert!(stderr(&out).starts_with("hypolift: error[config]:"), "{}", stderr(&out));
}

#[test]
fn plot_edge_cases() {
    let dir = setup();
    let d = dir.path();
    std::fs::write(d.join("empty.csv"), "").unwrap();
    ok(d, &["plot", "--plot-input", "empty.csv", "--plot-output", "empty.svg"]);
    let svg = std::fs::read_to_string(d.join("empty.svg")).unwrap();
    assert!(svg.contains("<path") && !svg.contains("<polyline"));

    std::fs::write(d.join("mono.csv"), "x,y\n1,1\n2,4\n3,9\n4,16\n").unwrap();
    ok(d, &["plot", "--plot-input", "mono.csv", "--plot-output", "mono.svg", "--plot-x", "x", "--plot-y", "y", "--plot-group", ""]);
    let svg = std::fs::read_to_string(d.join("mono.svg")).unwrap();
    let line = svg.lines().find(|l| l.starts_with("<polyline")).unwrap();
    let points = line.split('"').nth(1).unwrap();
    let ys: Vec<f64> = points.split(' ').map(|p| p.split(',').nth(1).unwrap().parse().unwrap()).collect();
    // SVG y grows downwards.
    assert!(ys.windows(2).all(|w| w[1] < w[0]), "{ys:?}");

    std::fs::write(d.join("bad.csv"), "x,y\n1,2\n3,oops\n").unwrap();
    let out = hypolift(d, &["plot", "--plot-input", "bad.csv", "--plot-x", "x", "--plot-y", "y"]);
    assert_eq!(out.status.code(), Some(1));
    let msg = stderr(&out);
    assert!(msg.starts_with("hypolift: error[data]:") && msg.contains("line 3"), "{msg}");
}
