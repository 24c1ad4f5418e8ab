//! Commands behind the `cat` binary, usable as a library.

pub mod config;

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;
use thiserror::Error;

use cat_core::bench::{
    count_params, measure_fps, run_ablation, write_ablation_csv, AblationAxis, AblationPlan, AblationRow, BenchReport,
};
use cat_core::cat::{focus_ratio, response_map, write_map_csv, write_pgm};
use cat_core::data::{
    evaluation_protocol, generate_dataset, load_dataset, workers_from_env, write_dataset, Dataset, EvalReport,
    OneShotSample, SampleSplit,
};
use cat_core::detector::{write_detections_jsonl, BBox, OneShotDetector, BACKBONE_STRIDE};
use cat_core::numerics::{seeded_rng, Tensor};
use cat_core::train::{load_checkpoint, save_checkpoint, train, training_samples, EpochStats, TrainState};
use cat_core::CatError;

pub use config::{BenchSection, EvalSection, Overrides, RunConfig, SeedTarget};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] CatError),
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(CatError::from(e))
    }
}

impl CliError {
    /// 2 usage, 3 data, 4 contract.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Core(e) => match e {
                CatError::Config(_) => 2,
                CatError::Data(_) | CatError::Io(_) | CatError::Input(_) => 3,
                CatError::Contract(_) | CatError::Dimension { .. } => 4,
            },
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const CONFIG_FILE: &str = "config.toml";

/// Create `dir`, refusing to reuse a non-empty one unless `force` is set.
pub fn prepare_out_dir(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() {
        let non_empty = fs::read_dir(dir)?.next().is_some();
        if non_empty && !force {
            return Err(CliError::Usage(format!(
                "output directory {} is not empty; pass --force to overwrite",
                dir.display()
            )));
        }
    }
    fs::create_dir_all(dir)?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value).map_err(CatError::from)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

/// Config stored beside a checkpoint, or `fallback` when there is none.
pub fn config_for_checkpoint(checkpoint: &Path, fallback: Option<&RunConfig>) -> Result<RunConfig> {
    if let Some(cfg) = fallback {
        return Ok(cfg.clone());
    }
    let path = checkpoint.parent().unwrap_or(Path::new(".")).join(CONFIG_FILE);
    if path.exists() {
        RunConfig::load(&path)
    } else {
        Err(CliError::Usage(format!(
            "no {CONFIG_FILE} next to {}; pass --config",
            checkpoint.display()
        )))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GenDataSummary {
    pub config_hash: String,
    pub manifest_sha256: String,
    pub samples: usize,
    pub seen_classes: Vec<usize>,
    pub unseen_classes: Vec<usize>,
}

pub fn cmd_gen_data(cfg: &RunConfig, out: &Path, force: bool) -> Result<GenDataSummary> {
    prepare_out_dir(out, force)?;
    let ds = generate_dataset(&cfg.dataset)?;
    let manifest_sha256 = write_dataset(&ds, out)?;
    Ok(GenDataSummary {
        config_hash: cat_core::bench::config_hash(&cfg.dataset)?,
        manifest_sha256,
        samples: ds.samples.len(),
        seen_classes: ds.class_ids(cat_core::data::ClassSplit::Seen),
        unseen_classes: ds.class_ids(cat_core::data::ClassSplit::Unseen),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrainSummary {
    pub config_hash: String,
    pub seed: u64,
    pub params: usize,
    pub epochs: Vec<EpochStats>,
    pub checkpoint: PathBuf,
}

fn write_epoch_log(path: &Path, log: &[(EpochStats, Option<(f64, f64)>)]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "epoch,lr,loss,objectness,matching,regression,unseen_AP,unseen_AP50")?;
    for (s, ap) in log {
        let (a, b) = match ap {
            Some((a, b)) => (format!("{a:.6}"), format!("{b:.6}")),
            None => (String::new(), String::new()),
        };
        writeln!(
            w,
            "{},{},{:.10},{:.10},{:.10},{:.10},{a},{b}",
            s.epoch, s.learning_rate, s.loss, s.objectness, s.matching, s.regression
        )?;
    }
    w.flush()?;
    Ok(())
}

pub fn evaluate_split(det: &OneShotDetector, ds: &Dataset, split: SampleSplit, queries: usize) -> Result<EvalReport> {
    let samples: Vec<&OneShotSample> = ds.split(split).collect();
    let workers = workers_from_env()?;
    Ok(evaluation_protocol(
        |t, q| det.detect(t, q),
        &samples,
        queries,
        workers,
    )?)
}

/// Train on the seen-class training split, writing the checkpoint, resolved
/// config and per-epoch log into `out`. `resume` continues from a checkpoint
/// that carries optimizer state.
pub fn cmd_train(cfg: &RunConfig, data: &Path, out: &Path, force: bool, resume: Option<&Path>) -> Result<TrainSummary> {
    let ds = load_dataset(data)?;
    if ds.config.image_size != cfg.detector.image_size {
        return Err(CliError::Usage(format!(
            "dataset images are {} px but the detector expects {}",
            ds.config.image_size, cfg.detector.image_size
        )));
    }
    let samples = training_samples(&ds)?;
    if resume.is_none() {
        prepare_out_dir(out, force)?;
    } else {
        fs::create_dir_all(out)?;
    }
    fs::write(out.join(CONFIG_FILE), cfg.to_toml())?;
    let mut det = OneShotDetector::new(cfg.detector.clone(), cfg.seed)?;
    let mut state = match resume {
        Some(p) => load_checkpoint(p, &mut det, &cfg.train)?
            .ok_or_else(|| CliError::Core(CatError::data("checkpoint has no optimizer state to resume from")))?,
        None => TrainState::new(&det, &cfg.train)?,
    };
    let ckpt = out.join(CHECKPOINT_FILE);
    let log_path = out.join("loss.csv");
    let mut log: Vec<(EpochStats, Option<(f64, f64)>)> = Vec::new();
    let epochs = train(
        &mut det,
        &samples,
        &cfg.train,
        cfg.seed,
        &mut state,
        |stats, det, st| {
            let ap = if cfg.eval.log_epoch_ap {
                let r = evaluate_split(det, &ds, SampleSplit::Unseen, cfg.eval.queries_per_target)
                    .map_err(|e| CatError::contract(e.to_string()))?;
                Some((r.mean_ap, r.mean_ap50))
            } else {
                None
            };
            log.push((*stats, ap));
            write_epoch_log(&log_path, &log).map_err(|e| CatError::contract(e.to_string()))?;
            save_checkpoint(&ckpt, det, Some(st))
        },
    )?;
    let summary = TrainSummary {
        config_hash: cfg.hash(),
        seed: cfg.seed,
        params: count_params(&det).total,
        epochs,
        checkpoint: ckpt,
    };
    write_json(&out.join("train.json"), &summary)?;
    Ok(summary)
}

pub fn load_detector(cfg: &RunConfig, checkpoint: &Path) -> Result<OneShotDetector> {
    let mut det = OneShotDetector::new(cfg.detector.clone(), cfg.seed)?;
    load_checkpoint(checkpoint, &mut det, &cfg.train)?;
    Ok(det)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalSummary {
    pub config_hash: String,
    pub split: String,
    pub checkpoint_sha256: String,
    pub classes: Vec<usize>,
    #[serde(flatten)]
    pub report: EvalReport,
}

pub fn cmd_eval(
    cfg: &RunConfig,
    checkpoint: &Path,
    data: &Path,
    split: SampleSplit,
    out: &Path,
) -> Result<EvalSummary> {
    if split == SampleSplit::Train {
        return Err(CliError::Usage("evaluation split must be seen or unseen".into()));
    }
    let ds = load_dataset(data)?;
    let det = load_detector(cfg, checkpoint)?;
    let report = evaluate_split(&det, &ds, split, cfg.eval.queries_per_target)?;
    fs::create_dir_all(out)?;
    let name = split.name();
    let mut w = BufWriter::new(File::create(out.join(format!("detections_{name}.jsonl")))?);
    write_detections_jsonl(&mut w, &report.detections)?;
    w.flush()?;
    let summary = EvalSummary {
        config_hash: cfg.hash(),
        split: name.to_string(),
        checkpoint_sha256: cat_core::data::dataset::file_sha256(checkpoint)?,
        classes: report.per_class.iter().map(|c| c.class).collect(),
        report,
    };
    write_json(&out.join(format!("metrics_{name}.json")), &summary)?;
    Ok(summary)
}

/// Feature cells whose centers fall inside any box.
pub fn cells_inside(boxes: &[BBox], height: usize, width: usize, stride: usize) -> Vec<bool> {
    let s = stride as f64;
    let mut out = Vec::with_capacity(height * width);
    for r in 0..height {
        for c in 0..width {
            let (x, y) = ((c as f64 + 0.5) * s, (r as f64 + 0.5) * s);
            out.push(boxes.iter().any(|b| b.contains_point(x, y)));
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FocusRow {
    pub sample: String,
    /// Focus ratio of the CAT input followed by each layer output.
    pub ratios: Vec<f64>,
}

impl FocusRow {
    pub fn improved(&self) -> bool {
        self.ratios.last() > self.ratios.first()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AttnSummary {
    pub config_hash: String,
    pub split: String,
    pub maps_for: String,
    pub maps_written: usize,
    pub evaluated: usize,
    pub skipped: Vec<String>,
    pub improved: usize,
    pub improved_fraction: f64,
    pub rows: Vec<FocusRow>,
}

/// Response maps of the CAT input and every layer output for one sample,
/// plus focus ratios for every sample of the split.
pub fn cmd_attn_map(
    cfg: &RunConfig,
    checkpoint: &Path,
    data: &Path,
    split: SampleSplit,
    sample: Option<&str>,
    out: &Path,
) -> Result<AttnSummary> {
    let ds = load_dataset(data)?;
    let det = load_detector(cfg, checkpoint)?;
    let mut samples: Vec<&OneShotSample> = ds.split(split).collect();
    samples.sort_by(|a, b| a.id.cmp(&b.id));
    let chosen = match sample {
        Some(id) => ds
            .samples
            .iter()
            .find(|s| s.id == id)
            .ok_or_else(|| CliError::Usage(format!("no sample named {id}")))?,
        None => *samples
            .first()
            .ok_or_else(|| CliError::Core(CatError::data(format!("split {} is empty", split.name()))))?,
    };
    fs::create_dir_all(out)?;
    let trace = det.target_trace(&chosen.target.to_tensor(), &chosen.query.to_tensor())?;
    for (l, feat) in trace.iter().enumerate() {
        let map = response_map(feat)?;
        let stem = format!("{}_layer{l}", chosen.id);
        let mut w = BufWriter::new(File::create(out.join(format!("{stem}.pgm")))?);
        write_pgm(&mut w, &map)?;
        w.flush()?;
        let mut w = BufWriter::new(File::create(out.join(format!("{stem}.csv")))?);
        write_map_csv(&mut w, &map)?;
        w.flush()?;
    }

    let mut rows = Vec::new();
    let mut skipped = Vec::new();
    for s in &samples {
        let trace = det.target_trace(&s.target.to_tensor(), &s.query.to_tensor())?;
        let (h, w) = (trace[0].shape()[1], trace[0].shape()[2]);
        let inside = cells_inside(&s.boxes, h, w, BACKBONE_STRIDE);
        if inside.iter().all(|&b| b) || !inside.iter().any(|&b| b) {
            skipped.push(s.id.clone());
            continue;
        }
        let ratios = trace
            .iter()
            .map(|f| focus_ratio(&response_map(f)?, &inside))
            .collect::<cat_core::Result<Vec<f64>>>()?;
        rows.push(FocusRow {
            sample: s.id.clone(),
            ratios,
        });
    }
    let mut w = BufWriter::new(File::create(out.join("focus.csv"))?);
    let header: Vec<String> = (0..trace.len()).map(|l| format!("layer{l}")).collect();
    writeln!(w, "sample,{},improved", header.join(","))?;
    for r in &rows {
        let vals: Vec<String> = r.ratios.iter().map(|v| format!("{v:.6}")).collect();
        writeln!(w, "{},{},{}", r.sample, vals.join(","), r.improved())?;
    }
    w.flush()?;
    let improved = rows.iter().filter(|r| r.improved()).count();
    let summary = AttnSummary {
        config_hash: cfg.hash(),
        split: split.name().to_string(),
        maps_for: chosen.id.clone(),
        maps_written: trace.len(),
        evaluated: rows.len(),
        skipped,
        improved,
        improved_fraction: if rows.is_empty() {
            0.0
        } else {
            improved as f64 / rows.len() as f64
        },
        rows,
    };
    write_json(&out.join("focus_summary.json"), &summary)?;
    Ok(summary)
}

/// Fixed synthetic target/query pair for timing.
pub fn synthetic_pair(cfg: &RunConfig) -> (Tensor, Tensor) {
    let d = &cfg.detector;
    let mut rng = seeded_rng(cfg.seed);
    (
        Tensor::uniform(&[3, d.image_size, d.image_size], 0.0, 1.0, &mut rng),
        Tensor::uniform(&[3, d.query_size, d.query_size], 0.0, 1.0, &mut rng),
    )
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FpsRow {
    pub config_hash: String,
    pub axis: String,
    pub value: String,
    #[serde(flatten)]
    pub report: BenchReport,
}

pub const FPS_HEADER: &str =
    "config_hash,axis,value,d_model,heads,layers,mode,target_len,query_len,params,cat_params,warmup,iters,elapsed_secs,fps";

/// Throughput of untrained models along one axis; no dataset needed.
pub fn bench_fps(cfg: &RunConfig, axis: AblationAxis, values: &[String]) -> Result<Vec<FpsRow>> {
    let (t, q) = synthetic_pair(cfg);
    let mut rows = Vec::new();
    for v in values {
        let det_cfg = axis.apply(&cfg.detector, v)?;
        let mut run = cfg.clone();
        run.detector = det_cfg.clone();
        let det = OneShotDetector::new(det_cfg, cfg.seed)?;
        let report = measure_fps(&det, &t, &q, cfg.bench.warmup, cfg.bench.iters)?;
        log::info!("{}={v}: {:.3} fps, {} params", axis.name(), report.fps, report.params);
        rows.push(FpsRow {
            config_hash: run.hash(),
            axis: axis.name().to_string(),
            value: v.clone(),
            report,
        });
    }
    Ok(rows)
}

pub fn write_fps_csv<W: Write>(mut w: W, rows: &[FpsRow]) -> Result<()> {
    writeln!(w, "{FPS_HEADER}")?;
    for r in rows {
        let b = &r.report;
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{:.6},{:.4}",
            r.config_hash,
            r.axis,
            r.value,
            b.d_model,
            b.heads,
            b.layers,
            b.mode,
            b.target_len,
            b.query_len,
            b.params,
            b.cat_params,
            b.warmup,
            b.iters,
            b.elapsed_secs,
            b.fps
        )?;
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchSummary {
    pub axis: String,
    pub fps: Vec<FpsRow>,
    pub ablation: Vec<AblationRow>,
}

/// Sweep `axis`. With `data`, every value is trained and evaluated per seed
/// and split (`bench_<axis>.csv`); timing runs always (`fps_<axis>.csv`).
pub fn cmd_bench(
    cfg: &RunConfig,
    axis: AblationAxis,
    values: Option<Vec<String>>,
    data: Option<&Path>,
    out: &Path,
    force: bool,
) -> Result<BenchSummary> {
    let values = values.unwrap_or_else(|| axis.default_values());
    prepare_out_dir(out, force)?;
    let fps = bench_fps(cfg, axis, &values)?;
    let mut w = BufWriter::new(File::create(out.join(format!("fps_{}.csv", axis.name())))?);
    write_fps_csv(&mut w, &fps)?;
    w.flush()?;
    let mut ablation = Vec::new();
    if let Some(dir) = data {
        let ds = load_dataset(dir)?;
        let plan = AblationPlan {
            axis,
            values: values.clone(),
            seeds: cfg.bench.seeds.clone(),
            splits: cfg.bench.splits.clone(),
            queries_per_target: cfg.eval.queries_per_target,
            fps_warmup: cfg.bench.warmup,
            fps_iters: cfg.bench.iters,
            workers: workers_from_env()?,
        };
        ablation = run_ablation(&ds, &cfg.detector, &cfg.train, &plan)?;
        let mut w = BufWriter::new(File::create(out.join(format!("bench_{}.csv", axis.name())))?);
        write_ablation_csv(&mut w, &ablation)?;
        w.flush()?;
    }
    let summary = BenchSummary {
        axis: axis.name().to_string(),
        fps,
        ablation,
    };
    write_json(&out.join(format!("bench_{}.json", axis.name())), &summary)?;
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes() {
        assert_eq!(CliError::Usage("x".into()).exit_code(), 2);
        assert_eq!(CliError::from(CatError::config("x")).exit_code(), 2);
        assert_eq!(CliError::from(CatError::data("x")).exit_code(), 3);
        assert_eq!(CliError::from(CatError::contract("x")).exit_code(), 4);
    }

    #[test]
    fn refuses_non_empty_dir_without_force() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("x"), b"1").unwrap();
        assert_eq!(prepare_out_dir(dir.path(), false).unwrap_err().exit_code(), 2);
        prepare_out_dir(dir.path(), true).unwrap();
        prepare_out_dir(&dir.path().join("fresh"), false).unwrap();
    }

    #[test]
    fn cell_centers_inside_boxes() {
        let inside = cells_inside(&[BBox::new(0.0, 0.0, 20.0, 20.0)], 2, 2, 16);
        assert_eq!(inside, vec![true, false, false, false]);
    }
}
