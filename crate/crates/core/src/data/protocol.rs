//! The one-shot evaluation protocol.
//!
//! For every target, the query patches of its class are shuffled with a
//! generator seeded by the target's index and the first `n` are used, one
//! per evaluation round. AP is computed per class and round over all targets
//! of that class, averaged over rounds, then over classes.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::dataset::OneShotSample;
use super::metrics::{ap_and_ap50, ScoredBox};
use crate::detector::{BBox, Detection, DetectionRecord};
use crate::error::{CatError, Result};
use crate::numerics::{seeded_rng, Tensor};

pub const DEFAULT_QUERIES_PER_TARGET: usize = 5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class: usize,
    pub targets: usize,
    pub rounds: usize,
    pub ap: f64,
    pub ap50: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_class: Vec<ClassMetrics>,
    pub mean_ap: f64,
    pub mean_ap50: f64,
    pub notes: Vec<String>,
    /// Detections of the first round for every target.
    #[serde(skip)]
    pub detections: Vec<DetectionRecord>,
}

/// Indices into a class pool of length `pool_len` for the target with index
/// `target_index`.
pub fn select_queries(pool_len: usize, target_index: usize, n: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..pool_len).collect();
    idx.shuffle(&mut seeded_rng(target_index as u64));
    idx.truncate(n);
    idx
}

/// Number of worker threads from `CAT_NUM_WORKERS`, defaulting to 1.
pub fn workers_from_env() -> Result<usize> {
    match std::env::var("CAT_NUM_WORKERS") {
        Err(_) => Ok(1),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => Err(CatError::config(format!(
                "CAT_NUM_WORKERS must be a positive integer, got {v:?}"
            ))),
        },
    }
}

pub fn evaluation_protocol<F>(
    detect: F,
    samples: &[&OneShotSample],
    queries_per_target: usize,
    workers: usize,
) -> Result<EvalReport>
where
    F: Fn(&Tensor, &Tensor) -> Result<Vec<Detection>> + Sync,
{
    if queries_per_target == 0 {
        return Err(CatError::config("at least one query per target is required"));
    }
    if samples.is_empty() {
        return Err(CatError::contract("evaluation needs at least one target"));
    }
    let mut sorted: Vec<&OneShotSample> = samples.to_vec();
    sorted.sort_by(|a, b| a.id.cmp(&b.id));
    let mut pools: BTreeMap<usize, Vec<&OneShotSample>> = BTreeMap::new();
    for s in &sorted {
        pools.entry(s.query_class).or_default().push(s);
    }
    let mut notes = Vec::new();
    for (class, pool) in &pools {
        if pool.len() < queries_per_target {
            notes.push(format!(
                "class {class}: only {} query patches available, using all",
                pool.len()
            ));
        }
    }
    // one job per (target, round)
    let mut jobs: Vec<(usize, usize, usize)> = Vec::new();
    for (t, s) in sorted.iter().enumerate() {
        let pool = &pools[&s.query_class];
        for (round, q) in select_queries(pool.len(), s.index, queries_per_target)
            .into_iter()
            .enumerate()
        {
            jobs.push((t, round, q));
        }
    }
    let run = || -> Result<Vec<Vec<Detection>>> {
        jobs.par_iter()
            .map(|&(t, _, q)| {
                let target = sorted[t];
                let query = pools[&target.query_class][q];
                detect(&target.target.to_tensor(), &query.query.to_tensor())
            })
            .collect()
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| CatError::config(format!("cannot start workers: {e}")))?;
    let outputs = pool.install(run)?;

    let mut per_class = Vec::new();
    let mut detections = Vec::new();
    for (&class, pool_members) in &pools {
        let targets: Vec<usize> = (0..sorted.len()).filter(|&t| sorted[t].query_class == class).collect();
        let rounds = queries_per_target.min(pool_members.len());
        let gt: Vec<Vec<BBox>> = targets.iter().map(|&t| sorted[t].boxes.clone()).collect();
        let (mut ap_sum, mut ap50_sum) = (0.0, 0.0);
        for round in 0..rounds {
            let mut dets = Vec::new();
            for (local, &t) in targets.iter().enumerate() {
                let j = jobs
                    .iter()
                    .position(|&(jt, jr, _)| jt == t && jr == round)
                    .expect("job for every target and round");
                for d in &outputs[j] {
                    dets.push(ScoredBox {
                        image: local,
                        bbox: d.bbox,
                        score: d.score,
                    });
                    if round == 0 {
                        detections.push(DetectionRecord {
                            image_id: sorted[t].id.clone(),
                            bbox: d.bbox,
                            score: d.score,
                            query_class: class,
                        });
                    }
                }
            }
            let (ap, ap50) = ap_and_ap50(&dets, &gt)?;
            ap_sum += ap;
            ap50_sum += ap50;
        }
        per_class.push(ClassMetrics {
            class,
            targets: targets.len(),
            rounds,
            ap: ap_sum / rounds as f64,
            ap50: ap50_sum / rounds as f64,
        });
    }
    let n = per_class.len() as f64;
    Ok(EvalReport {
        mean_ap: per_class.iter().map(|c| c.ap).sum::<f64>() / n,
        mean_ap50: per_class.iter().map(|c| c.ap50).sum::<f64>() / n,
        per_class,
        notes,
        detections,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::dataset::{generate_dataset, DatasetConfig, SampleSplit};

    fn small() -> DatasetConfig {
        DatasetConfig {
            seed: 2,
            train_samples: 0,
            eval_samples: 10,
            image_size: 96,
            query_size: 48,
            min_glyph: 16.0,
            max_glyph: 24.0,
            ..DatasetConfig::default()
        }
    }

    /// Emits every ground-truth box of the target, identified by its pixels.
    fn oracle(ds: &crate::data::dataset::Dataset) -> impl Fn(&Tensor, &Tensor) -> Result<Vec<Detection>> + Sync + '_ {
        move |t: &Tensor, _q: &Tensor| {
            let s = ds.samples.iter().find(|s| s.target.to_tensor() == *t).unwrap();
            Ok(s.boxes.iter().map(|&b| Detection { bbox: b, score: 0.9 }).collect())
        }
    }

    #[test]
    fn query_selection_is_seeded_by_target() {
        assert_eq!(select_queries(9, 4, 5), select_queries(9, 4, 5));
        assert_eq!(select_queries(3, 4, 5).len(), 3);
        let s = select_queries(9, 4, 9);
        let mut sorted = s.clone();
        sorted.sort();
        assert_eq!(sorted, (0..9).collect::<Vec<_>>());
    }

    #[test]
    fn perfect_detector_scores_one_and_ignores_order() {
        let ds = generate_dataset(&small()).unwrap();
        let unseen: Vec<&OneShotSample> = ds.split(SampleSplit::Unseen).collect();
        let r = evaluation_protocol(oracle(&ds), &unseen, 5, 1).unwrap();
        assert_eq!(r.mean_ap50, 1.0);
        assert_eq!(r.per_class.len(), 4);
        assert!(r.notes.len() == 4, "pools of 2-3 patches trigger notes");
        let mut rev = unseen.clone();
        rev.reverse();
        assert_eq!(evaluation_protocol(oracle(&ds), &rev, 5, 2).unwrap(), r);
    }
}
