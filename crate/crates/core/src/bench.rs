//! Parameter counts, inference throughput and ablation sweeps.

use std::io::Write;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cat::{CatConfig, StreamMode};
use crate::data::{evaluation_protocol, Dataset, OneShotSample, SampleSplit};
use crate::detector::{DetectorConfig, OneShotDetector};
use crate::error::{CatError, Result};
use crate::numerics::Tensor;
use crate::train::{train, training_samples, TrainConfig, TrainState};

pub const DEFAULT_WARMUP: usize = 10;
pub const DEFAULT_ITERS: usize = 100;
pub const MIN_ITERS: usize = 30;
pub const MIN_WARMUP: usize = 5;

/// Hex SHA-256 of the value's JSON serialization.
pub fn config_hash<T: Serialize>(value: &T) -> Result<String> {
    let bytes = serde_json::to_vec(value)?;
    Ok(hex::encode(Sha256::digest(bytes)))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCount {
    pub total: usize,
    /// Elements in the CAT stack alone.
    pub cat: usize,
}

/// Sum of element counts over every registered parameter tensor. Tied
/// streams share tensors and are counted once.
pub fn count_params(det: &OneShotDetector) -> ParamCount {
    let mut total = 0;
    let mut cat = 0;
    for (_, name, t) in det.store.iter() {
        total += t.numel();
        if name.starts_with("cat.") {
            cat += t.numel();
        }
    }
    ParamCount { total, cat }
}

/// CAT-stack size from the configuration alone. Per stream and layer:
/// `4·d²` projections, `2·d·d_ff + d_ff + d` FFN, `4·d` for the two norms,
/// plus `4·d` projection biases when enabled.
pub fn closed_form_cat_params(cfg: &CatConfig) -> usize {
    let d = cfg.d_model;
    let mut per_stream = 4 * d * d + 2 * d * cfg.d_ff + cfg.d_ff + d + 4 * d;
    if cfg.projection_bias {
        per_stream += 4 * d;
    }
    let streams = match (cfg.mode, cfg.tie_streams) {
        (StreamMode::TwoStream, false) => 2,
        _ => 1,
    };
    cfg.layers * streams * per_stream
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub d_model: usize,
    pub heads: usize,
    pub layers: usize,
    pub mode: StreamMode,
    pub target_len: usize,
    pub query_len: usize,
    pub params: usize,
    pub cat_params: usize,
    pub warmup: usize,
    pub iters: usize,
    pub elapsed_secs: f64,
    pub fps: f64,
    pub started_unix: f64,
    pub finished_unix: f64,
    pub environment: String,
}

fn unix_now() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0)
}

fn environment_note() -> String {
    let cores = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    format!(
        "single-threaded detect() on {} {} ({cores} logical cores available)",
        std::env::consts::OS,
        std::env::consts::ARCH
    )
}

/// Time `iters` calls to `detect` on one fixed pair after `warmup` untimed calls.
pub fn measure_fps(
    det: &OneShotDetector,
    target: &Tensor,
    query: &Tensor,
    warmup: usize,
    iters: usize,
) -> Result<BenchReport> {
    if iters < MIN_ITERS {
        return Err(CatError::config(format!(
            "at least {MIN_ITERS} timed iterations are required, got {iters}"
        )));
    }
    if warmup < MIN_WARMUP {
        return Err(CatError::config(format!(
            "at least {MIN_WARMUP} warmup iterations are required, got {warmup}"
        )));
    }
    for _ in 0..warmup {
        det.detect(target, query)?;
    }
    let started_unix = unix_now();
    let start = Instant::now();
    for _ in 0..iters {
        det.detect(target, query)?;
    }
    let elapsed = start.elapsed().as_secs_f64();
    let finished_unix = unix_now();
    let counts = count_params(det);
    let cfg = &det.config;
    let cells = |n: usize| (n / 16) * (n / 16);
    Ok(BenchReport {
        d_model: cfg.cat.d_model,
        heads: cfg.cat.heads,
        layers: cfg.cat.layers,
        mode: cfg.cat.mode,
        target_len: target.shape()[1] / 16 * (target.shape()[2] / 16),
        query_len: cells(cfg.query_size),
        params: counts.total,
        cat_params: counts.cat,
        warmup,
        iters,
        elapsed_secs: elapsed,
        fps: iters as f64 / elapsed.max(f64::MIN_POSITIVE),
        started_unix,
        finished_unix,
        environment: environment_note(),
    })
}

/// Coefficient of variation (sample standard deviation over mean).
pub fn coefficient_of_variation(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    if xs.len() < 2 {
        return 0.0;
    }
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    var.sqrt() / mean
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationAxis {
    Layers,
    DModel,
    Stream,
}

impl AblationAxis {
    pub fn name(self) -> &'static str {
        match self {
            AblationAxis::Layers => "layers",
            AblationAxis::DModel => "d_m",
            AblationAxis::Stream => "stream",
        }
    }

    /// The sweep of the matching ablation table.
    pub fn default_values(self) -> Vec<String> {
        let v: &[&str] = match self {
            AblationAxis::Layers => &["3", "4", "5", "6"],
            AblationAxis::DModel => &["128", "256", "512"],
            AblationAxis::Stream => &["one_stream", "two_stream"],
        };
        v.iter().map(|s| s.to_string()).collect()
    }

    /// `base` with this axis set to `value`. Changing `d_m` keeps the FFN
    /// at four times the model width.
    pub fn apply(self, base: &DetectorConfig, value: &str) -> Result<DetectorConfig> {
        let mut cfg = base.clone();
        let num = || -> Result<usize> {
            value
                .parse()
                .map_err(|_| CatError::config(format!("{} value {value:?} is not an integer", self.name())))
        };
        match self {
            AblationAxis::Layers => {
                let n = num()?;
                if !(1..=12).contains(&n) {
                    return Err(CatError::config(format!("layer count {n} is out of range")));
                }
                cfg.cat.layers = n;
            }
            AblationAxis::DModel => {
                let d = num()?;
                cfg.cat.d_model = d;
                cfg.cat.d_ff = 4 * d;
            }
            AblationAxis::Stream => {
                cfg.cat.mode = value.parse()?;
                if cfg.cat.mode == StreamMode::OneStream {
                    cfg.cat.tie_streams = false;
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

impl std::str::FromStr for AblationAxis {
    type Err = CatError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "layers" => Ok(AblationAxis::Layers),
            "d_m" | "dm" | "d_model" => Ok(AblationAxis::DModel),
            "stream" => Ok(AblationAxis::Stream),
            other => Err(CatError::config(format!("unknown ablation axis {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub config_hash: String,
    pub axis: String,
    pub value: String,
    pub seed: u64,
    pub split: String,
    #[serde(rename = "AP")]
    pub ap: f64,
    #[serde(rename = "AP50")]
    pub ap50: f64,
    pub fps: f64,
    pub params: usize,
}

pub const CSV_HEADER: &str = "config_hash,axis,value,seed,split,AP,AP50,fps,params";

pub fn write_ablation_csv<W: Write>(mut w: W, rows: &[AblationRow]) -> Result<()> {
    writeln!(w, "{CSV_HEADER}")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{},{:.6},{:.6},{:.4},{}",
            r.config_hash, r.axis, r.value, r.seed, r.split, r.ap, r.ap50, r.fps, r.params
        )?;
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationPlan {
    pub axis: AblationAxis,
    pub values: Vec<String>,
    pub seeds: Vec<u64>,
    pub splits: Vec<SampleSplit>,
    pub queries_per_target: usize,
    pub fps_warmup: usize,
    pub fps_iters: usize,
    pub workers: usize,
}

/// Train and evaluate one model per `(value, seed)`. Emits one row per
/// `(value, seed, split)`; FPS and parameter counts are per model.
pub fn run_ablation(
    ds: &Dataset,
    base: &DetectorConfig,
    train_cfg: &TrainConfig,
    plan: &AblationPlan,
) -> Result<Vec<AblationRow>> {
    if plan.values.is_empty() || plan.seeds.is_empty() || plan.splits.is_empty() {
        return Err(CatError::config("ablation needs values, seeds and splits"));
    }
    let train_set = training_samples(ds)?;
    let probe = ds
        .samples
        .iter()
        .find(|s| s.split != SampleSplit::Train)
        .or(ds.samples.first())
        .ok_or_else(|| CatError::data("empty dataset"))?;
    let (probe_t, probe_q) = (probe.target.to_tensor(), probe.query.to_tensor());
    let mut rows = Vec::new();
    for value in &plan.values {
        let cfg = plan.axis.apply(base, value)?;
        let hash = config_hash(&(&cfg, train_cfg, &ds.config))?;
        for &seed in &plan.seeds {
            let mut det = OneShotDetector::new(cfg.clone(), seed)?;
            let mut state = TrainState::new(&det, train_cfg)?;
            train(&mut det, &train_set, train_cfg, seed, &mut state, |_, _, _| Ok(()))?;
            let fps = measure_fps(&det, &probe_t, &probe_q, plan.fps_warmup, plan.fps_iters)?.fps;
            let params = count_params(&det).total;
            for &split in &plan.splits {
                let samples: Vec<&OneShotSample> = ds.split(split).collect();
                let report =
                    evaluation_protocol(|t, q| det.detect(t, q), &samples, plan.queries_per_target, plan.workers)?;
                log::info!(
                    "{}={value} seed {seed} {}: AP {:.4} AP50 {:.4}",
                    plan.axis.name(),
                    split.name(),
                    report.mean_ap,
                    report.mean_ap50
                );
                rows.push(AblationRow {
                    config_hash: hash.clone(),
                    axis: plan.axis.name().to_string(),
                    value: value.clone(),
                    seed,
                    split: split.name().to_string(),
                    ap: report.mean_ap,
                    ap50: report.mean_ap50,
                    fps,
                    params,
                });
            }
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cat(d: usize, heads: usize, d_ff: usize, layers: usize) -> CatConfig {
        CatConfig {
            d_model: d,
            heads,
            layers,
            d_ff,
            ..CatConfig::paper()
        }
    }

    #[test]
    fn closed_form_small_case() {
        // per stream: 4·64 + (256 + 32 + 256 + 8) + 32
        assert_eq!(closed_form_cat_params(&cat(8, 2, 32, 1)), 2 * (256 + 552 + 32));
    }

    #[test]
    fn tying_halves_and_one_stream_halves() {
        let c = cat(16, 4, 64, 3);
        let tied = CatConfig {
            tie_streams: true,
            ..c.clone()
        };
        let one = CatConfig {
            mode: StreamMode::OneStream,
            ..c.clone()
        };
        assert_eq!(2 * closed_form_cat_params(&tied), closed_form_cat_params(&c));
        assert_eq!(closed_form_cat_params(&one), closed_form_cat_params(&tied));
    }

    #[test]
    fn doubling_width_roughly_quadruples() {
        let a = closed_form_cat_params(&cat(128, 8, 512, 4)) as f64;
        let b = closed_form_cat_params(&cat(256, 8, 1024, 4)) as f64;
        assert!((b / a - 4.0).abs() < 0.05, "{}", b / a);
    }

    #[test]
    fn csv_header_and_hash() {
        let mut buf = Vec::new();
        write_ablation_csv(&mut buf, &[]).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().trim_end(), CSV_HEADER);
        let h = config_hash(&CatConfig::paper()).unwrap();
        assert_eq!(h.len(), 64);
        assert_eq!(h, config_hash(&CatConfig::paper()).unwrap());
        assert_ne!(h, config_hash(&cat(8, 2, 32, 1)).unwrap());
    }

    #[test]
    fn axis_values_apply() {
        let base = DetectorConfig::default();
        assert_eq!(AblationAxis::Layers.apply(&base, "6").unwrap().cat.layers, 6);
        let d = AblationAxis::DModel.apply(&base, "128").unwrap();
        assert_eq!((d.cat.d_model, d.cat.d_ff), (128, 512));
        assert_eq!(
            AblationAxis::Stream.apply(&base, "one_stream").unwrap().cat.mode,
            StreamMode::OneStream
        );
        assert!(AblationAxis::Layers.apply(&base, "x").is_err());
    }

    #[test]
    fn cv_of_constant_is_zero() {
        assert_eq!(coefficient_of_variation(&[2.0, 2.0, 2.0]), 0.0);
        assert!((coefficient_of_variation(&[1.0, 3.0]) - 2f64.sqrt() / 2.0).abs() < 1e-12);
    }
}
