//! Subcommand implementations. All randomness derives from the master
//! seed through the named substreams `data`, `train/init`, `train/steps`,
//! `train/snapshot` and `sample`.

use std::fmt::Write as _;
use std::path::Path;

use anyhow::{ensure, Context};

use hypolift_core::dataset::{Dataset, Record};
use hypolift_core::diffusion::{Example, Model, Trainer};
use hypolift_core::hypotheses::{HypothesesFile, RecordHypotheses};
use hypolift_core::metrics::{score, MetricReport, Protocol, Scores};
use hypolift_core::pose::{Pose3D, Skeleton};
use hypolift_core::synth::Generator;
use hypolift_core::{rng, write_atomic, Error};

use crate::{RunConfig, UsageError};

/// Loss values are averaged over this many trailing steps in the curve.
pub const LOSS_WINDOW: usize = 100;
/// Training progress is printed to stderr every this many steps.
const PROGRESS_EVERY: u64 = 1000;

pub const SWEEP_HEADER: [&str; 10] = [
    "input",
    "timesteps",
    "samples",
    "hypotheses",
    "records",
    "mpjpe_mm",
    "pa_mpjpe_mm",
    "pck_percent",
    "cps",
    "symmetry_mm",
];

/// Atomic write that creates missing parent directories.
pub fn write_output(path: &Path, bytes: &[u8]) -> anyhow::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    write_atomic(path, bytes)?;
    Ok(())
}

pub fn gen_data(cfg: &RunConfig) -> anyhow::Result<()> {
    let skeleton = cfg.skeleton()?;
    let generator = Generator::new(skeleton.clone(), cfg.generator()?)?;
    let seed = rng::derive_seed(cfg.seed, "data");
    let split = cfg.train_records;
    let end = split
        .checked_add(cfg.test_records)
        .ok_or_else(|| Error::Config("record counts overflow".into()))?;
    for (path, range) in [(&cfg.train_data, 0..split), (&cfg.test_data, split..end)] {
        let ds = Dataset {
            skeleton: skeleton.clone(),
            seed: cfg.seed,
            heatmap_size: cfg.heatmap_size,
            records: generator.records(seed, range)?,
        };
        write_output(path, &ds.encode()?)?;
    }
    Ok(())
}

fn read_dataset(path: &Path) -> anyhow::Result<Dataset> {
    Dataset::read(path).with_context(|| format!("loading dataset {}", path.display()))
}

fn check_joints(model: &Model, skel: &Skeleton, what: &str) -> anyhow::Result<()> {
    let expected = model.config().joints;
    if skel.joint_count() != expected {
        return Err(Error::Config(format!(
            "skeleton mismatch: model has {expected} joints, {what} skeleton has {}",
            skel.joint_count()
        ))
        .into());
    }
    Ok(())
}

/// Trailing moving average of `values` with window [`LOSS_WINDOW`].
pub fn moving_average(values: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(values.len());
    let mut sum = 0.0;
    for (i, v) in values.iter().enumerate() {
        sum += v;
        if i >= LOSS_WINDOW {
            sum -= values[i - LOSS_WINDOW];
        }
        out.push(sum / (i + 1).min(LOSS_WINDOW) as f64);
    }
    out
}

fn loss_csv(losses: &[f64]) -> String {
    let mut out = String::from("step,loss,loss_avg\n");
    for (i, (l, a)) in losses.iter().zip(moving_average(losses)).enumerate() {
        writeln!(out, "{},{l},{a}", i + 1).expect("string write");
    }
    out
}

pub const SNAPSHOT_HEADER: &str = "step,records,hypotheses,mpjpe_mm,pa_mpjpe_mm,pck_percent,cps,symmetry_mm";

fn snapshot_row(model: &Model, step: u64, records: &[Record], skel: &Skeleton, cfg: &RunConfig) -> anyhow::Result<String> {
    let seed = rng::derive_seed(cfg.seed, "train/snapshot");
    let mut hyps = Vec::with_capacity(records.len());
    for r in records {
        let set = model.generate(&r.heatmaps, cfg.eval_hypotheses, rng::derive_seed(seed, &r.index.to_string()), false)?;
        hyps.push(set.to_poses()?);
    }
    let gts: Vec<&Pose3D> = records.iter().map(|r| &r.pose).collect();
    let scores = score_all(&hyps, &gts, skel, &cfg.protocol())?;
    let indices: Vec<u64> = records.iter().map(|r| r.index).collect();
    let rep = MetricReport::from_scores(&indices, &scores, None, cfg.protocol())?;
    Ok(format!(
        "{step},{},{},{},{},{},{},{}\n",
        rep.records, rep.hypotheses, rep.mpjpe_mm, rep.pa_mpjpe_mm, rep.pck_percent, rep.cps, rep.symmetry_mm
    ))
}

pub fn train(cfg: &RunConfig) -> anyhow::Result<()> {
    let data = read_dataset(&cfg.train_data)?;
    ensure!(!data.records.is_empty(), Error::Config("training dataset has no records".into()));
    let model = Model::new(cfg.model(data.skeleton.joint_count()), &mut rng::named(cfg.seed, "train/init"))?;
    check_joints(&model, &data.skeleton, "training dataset")?;
    let snapshot_data = if cfg.eval_every > 0 && cfg.iterations > 0 {
        let mut test = read_dataset(&cfg.test_data)?;
        test.records.truncate(cfg.eval_records);
        (!test.records.is_empty()).then_some(test)
    } else {
        None
    };
    let examples: Vec<Example<'_>> = data
        .records
        .iter()
        .map(|r| Example {
            pose: &r.pose,
            heatmaps: &r.heatmaps,
        })
        .collect();
    let mut trainer = Trainer::new(model, cfg.training(), rng::derive_seed(cfg.seed, "train/steps"))?;
    let mut losses = Vec::with_capacity(cfg.iterations as usize);
    let mut snapshots = format!("{SNAPSHOT_HEADER}\n");
    for step in 1..=cfg.iterations {
        match trainer.step(&examples) {
            Ok(loss) => losses.push(loss),
            Err(e) => {
                write_output(&cfg.loss_curve, loss_csv(&losses).as_bytes())?;
                return Err(e.into());
            }
        }
        if step % PROGRESS_EVERY == 0 {
            let avg = moving_average(&losses[losses.len().saturating_sub(LOSS_WINDOW)..]);
            eprintln!("step {step} loss {:.4}", avg.last().copied().unwrap_or(f64::NAN));
        }
        if let Some(test) = &snapshot_data {
            if step % cfg.eval_every == 0 || step == cfg.iterations {
                snapshots.push_str(&snapshot_row(&trainer.model, step, &test.records, &test.skeleton, cfg)?);
            }
        }
    }
    write_output(&cfg.loss_curve, loss_csv(&losses).as_bytes())?;
    if snapshot_data.is_some() {
        write_output(&cfg.snapshots, snapshots.as_bytes())?;
    }
    let ck = trainer.model.to_checkpoint(Some(&trainer.adam));
    write_output(&cfg.checkpoint, &ck.encode())?;
    Ok(())
}

fn load_model(path: &Path) -> anyhow::Result<Model> {
    let ck = hypolift_core::checkpoint::Checkpoint::load(path)
        .with_context(|| format!("loading checkpoint {}", path.display()))?;
    Ok(Model::from_checkpoint(&ck)?)
}

/// Hypotheses for every record. Each record uses its own seed derived from
/// `seed` and its dataset index.
pub fn sample_records(model: &Model, records: &[Record], m: usize, seed: u64, deterministic: bool) -> anyhow::Result<Vec<RecordHypotheses>> {
    records
        .iter()
        .map(|r| {
            let record_seed = rng::derive_seed(seed, &r.index.to_string());
            let poses = if deterministic {
                let one = model.generate(&r.heatmaps, 1, record_seed, true)?;
                vec![one.poses[0].clone(); m]
            } else {
                model.generate(&r.heatmaps, m, record_seed, false)?.poses
            };
            Ok(RecordHypotheses { index: r.index, poses })
        })
        .collect()
}

pub fn sample(cfg: &RunConfig) -> anyhow::Result<()> {
    if cfg.hypotheses == 0 {
        return Err(UsageError("hypotheses must be at least 1".into()).into());
    }
    let model = load_model(&cfg.checkpoint)?;
    let data = read_dataset(&cfg.test_data)?;
    check_joints(&model, &data.skeleton, "test dataset")?;
    let seed = rng::derive_seed(cfg.seed, "sample");
    let file = HypothesesFile {
        joints: model.config().joints,
        hypotheses: cfg.hypotheses,
        deterministic: cfg.deterministic,
        seed,
        timesteps: model.schedule().steps(),
        samples: model.config().samples,
        records: sample_records(&model, &data.records, cfg.hypotheses, seed, cfg.deterministic)?,
    };
    write_output(&cfg.hypotheses_file, &file.encode()?)?;
    Ok(())
}

/// Scores of every hypothesis of every record.
pub fn score_all(hyps: &[Vec<Pose3D>], gts: &[&Pose3D], skel: &Skeleton, protocol: &Protocol) -> anyhow::Result<Vec<Vec<Scores>>> {
    hyps.iter()
        .zip(gts)
        .map(|(hs, gt)| {
            hs.iter()
                .map(|h| Ok(score(h, gt, skel, protocol)?))
                .collect::<anyhow::Result<Vec<_>>>()
        })
        .collect()
}

/// Checks that `file` covers exactly the records of `data`, in order.
pub fn match_records(file: &HypothesesFile, data: &Dataset) -> anyhow::Result<()> {
    if file.records.len() != data.records.len() {
        return Err(Error::Config(format!(
            "record mismatch: hypotheses file has {} records, dataset has {}",
            file.records.len(),
            data.records.len()
        ))
        .into());
    }
    if let Some((h, r)) = file.records.iter().zip(&data.records).find(|(h, r)| h.index != r.index) {
        return Err(Error::Config(format!(
            "record mismatch: hypotheses for record {} where the dataset has record {} ({} records each)",
            h.index,
            r.index,
            data.records.len()
        ))
        .into());
    }
    if file.joints != data.skeleton.joint_count() {
        return Err(Error::Config(format!(
            "skeleton mismatch: hypotheses have {} joints, dataset skeleton has {}",
            file.joints,
            data.skeleton.joint_count()
        ))
        .into());
    }
    Ok(())
}

fn score_file(file: &HypothesesFile, data: &Dataset, protocol: &Protocol) -> anyhow::Result<Vec<Vec<Scores>>> {
    match_records(file, data)?;
    let hyps = file
        .records
        .iter()
        .map(|r| r.to_poses())
        .collect::<hypolift_core::Result<Vec<_>>>()?;
    let gts: Vec<&Pose3D> = data.records.iter().map(|r| &r.pose).collect();
    score_all(&hyps, &gts, &data.skeleton, protocol)
}

pub fn eval(cfg: &RunConfig) -> anyhow::Result<()> {
    let data = read_dataset(&cfg.test_data)?;
    let protocol = cfg.protocol();
    let indices: Vec<u64> = data.records.iter().map(|r| r.index).collect();
    let mut inputs = vec![cfg.hypotheses_file.to_string_lossy().into_owned()];
    inputs.extend(cfg.sweep_inputs.iter().cloned());
    let mut sweep = csv::Writer::from_writer(Vec::new());
    sweep.write_record(SWEEP_HEADER)?;
    for (k, input) in inputs.iter().enumerate() {
        let file = HypothesesFile::read(input.as_ref()).with_context(|| format!("loading hypotheses {input}"))?;
        let scores = score_file(&file, &data, &protocol)?;
        if k == 0 {
            let report = MetricReport::from_scores(&indices, &scores, None, protocol)?;
            ensure!(report.is_finite(), Error::Degenerate("report has non-finite fields".into()));
            write_output(&cfg.report, (serde_json::to_string_pretty(&report)? + "\n").as_bytes())?;
            write_output(&cfg.record_table, report.records_csv().as_bytes())?;
        }
        let mut ms: Vec<usize> = cfg.m_sweep.iter().copied().filter(|&m| m >= 1 && m <= file.hypotheses).collect();
        if ms.is_empty() {
            ms.push(file.hypotheses);
        }
        for m in ms {
            let rep = MetricReport::from_scores(&indices, &scores, Some(m), protocol)?;
            sweep.write_record([
                input.clone(),
                file.timesteps.to_string(),
                file.samples.to_string(),
                m.to_string(),
                rep.records.to_string(),
                rep.mpjpe_mm.to_string(),
                rep.pa_mpjpe_mm.to_string(),
                rep.pck_percent.to_string(),
                rep.cps.to_string(),
                rep.symmetry_mm.to_string(),
            ])?;
        }
    }
    let bytes = sweep.into_inner().map_err(|e| anyhow::anyhow!("writing sweep table: {e}"))?;
    write_output(&cfg.sweep_table, &bytes)?;
    Ok(())
}

pub fn plot(cfg: &RunConfig) -> anyhow::Result<()> {
    let text = std::fs::read_to_string(&cfg.plot_input)
        .with_context(|| format!("reading {}", cfg.plot_input.display()))?;
    let x = (!cfg.plot_x.is_empty()).then_some(cfg.plot_x.as_str());
    let group = (!cfg.plot_group.is_empty()).then_some(cfg.plot_group.as_str());
    let ys: Vec<&str> = cfg.plot_y.iter().map(String::as_str).collect();
    let series = crate::plot::read_series(&text, x, &ys, group)
        .with_context(|| format!("reading {}", cfg.plot_input.display()))?;
    let svg = crate::plot::render_svg(&series, x.unwrap_or("x"));
    write_output(&cfg.plot_output, svg.as_bytes())
}
