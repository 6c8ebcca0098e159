//! Recall@K for predcls and sgcls, per-predicate recall, attention
//! alignment, heatmap export and the ablation runner.

pub mod ablation;
pub mod alignment;
pub mod heatmap;
pub mod recall;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{forward, ModelOutput, ModelParams};
use crate::scenegen::Scene;

pub use ablation::{run_ablation, AblationCell, AblationGrid, AblationRow, AblationTable, CellSummary};
pub use alignment::{attention_alignment, fold_symmetric};
pub use heatmap::export_heatmap;
pub use recall::{gt_triplets, matched_at_k, predict_triplets, recall_at_k, Task, Triplet};

pub const DEFAULT_KS: [usize; 3] = [20, 50, 100];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecallAt {
    pub k: usize,
    pub recall: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: Task,
    /// Ascending in `k`.
    pub recall: Vec<RecallAt>,
    /// Recall at the largest `k`, pooled per predicate over all scenes.
    /// Predicates without ground truth are omitted.
    pub per_predicate_recall: BTreeMap<usize, f64>,
    pub per_predicate_count: BTreeMap<usize, usize>,
    /// Mean over scenes where it is defined, from the last object-stage
    /// REM. Absent for a REM-free model.
    pub attention_alignment: Option<f64>,
    pub n_scenes: usize,
    /// Scenes with at least one ground-truth relation.
    pub n_scored: usize,
}

impl EvalReport {
    pub fn recall_at(&self, k: usize) -> Option<f64> {
        self.recall.iter().find(|r| r.k == k).map(|r| r.recall)
    }

    /// Unweighted mean of `per_predicate_recall` over `predicates` that
    /// have ground truth.
    pub fn mean_predicate_recall(&self, predicates: &[usize]) -> Option<f64> {
        let vals: Vec<f64> = predicates
            .iter()
            .filter_map(|p| self.per_predicate_recall.get(p).copied())
            .collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    }

    pub fn summary_line(&self) -> String {
        let parts: Vec<String> = self
            .recall
            .iter()
            .map(|r| format!("R@{}={:.4}", r.k, r.recall))
            .collect();
        let align = self
            .attention_alignment
            .map_or("n/a".to_string(), |a| format!("{a:.4}"));
        format!(
            "{} {} scenes={} alignment={}",
            self.task,
            parts.join(" "),
            self.n_scenes,
            align
        )
    }
}

/// Sorted, de-duplicated `ks`; rejects an empty list and `k = 0`.
pub fn normalize_ks(ks: &[usize]) -> Result<Vec<usize>> {
    let mut ks = ks.to_vec();
    ks.sort_unstable();
    ks.dedup();
    if ks.is_empty() || ks[0] == 0 {
        return Err(Error::config("k", "need at least one k, each >= 1"));
    }
    Ok(ks)
}

/// Attention matrix used for the alignment diagnostic.
pub fn alignment_source(output: &ModelOutput) -> Option<&crate::tensor::Tensor> {
    output.object_attention.last()
}

struct SceneEval {
    hits: Vec<usize>,
    n_gt: usize,
    per_pred: Vec<(usize, bool)>,
    alignment: Option<f64>,
}

fn eval_scene(scene: &Scene, params: &ModelParams, task: Task, ks: &[usize]) -> Result<SceneEval> {
    let out = forward(scene, params)?;
    let ranked = predict_triplets(&out, scene, task);
    let gt = gt_triplets(scene);
    let mut hits = Vec::with_capacity(ks.len());
    let mut last = Vec::new();
    for &k in ks {
        last = matched_at_k(&ranked, &gt, k)?;
        hits.push(last.iter().filter(|&&h| h).count());
    }
    let alignment = match alignment_source(&out) {
        Some(r) => attention_alignment(r, &scene.adjacency())?,
        None => None,
    };
    Ok(SceneEval {
        hits,
        n_gt: gt.len(),
        per_pred: gt.iter().zip(last).map(|(g, h)| (g.predicate, h)).collect(),
        alignment,
    })
}

fn worker_count(jobs: usize) -> usize {
    std::thread::available_parallelism()
        .map_or(1, |n| n.get())
        .min(jobs)
        .max(1)
}

/// Maps `f` over `items` on scoped threads; results come back in input
/// order, so anything folded from them is independent of thread count.
pub(crate) fn par_map<T: Sync, R: Send>(
    items: &[T],
    f: impl Fn(&T) -> R + Sync,
) -> Vec<R> {
    let workers = worker_count(items.len());
    if workers <= 1 {
        return items.iter().map(f).collect();
    }
    let chunk = items.len().div_ceil(workers);
    std::thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|c| {
                let f = &f;
                s.spawn(move || c.iter().map(f).collect::<Vec<R>>())
            })
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("evaluation worker panicked"))
            .collect()
    })
}

/// Recall@K over a dataset. Scenes without relations count toward
/// `n_scenes` but not toward the recall means.
pub fn evaluate(params: &ModelParams, scenes: &[Scene], task: Task, ks: &[usize]) -> Result<EvalReport> {
    let ks = normalize_ks(ks)?;
    let results = par_map(scenes, |s| eval_scene(s, params, task, &ks));

    let mut recall_sum = vec![0.0; ks.len()];
    let mut n_scored = 0usize;
    let mut pred_hits: BTreeMap<usize, usize> = BTreeMap::new();
    let mut pred_count: BTreeMap<usize, usize> = BTreeMap::new();
    let (mut align_sum, mut n_align) = (0.0, 0usize);
    for r in results {
        let r = r?;
        if r.n_gt > 0 {
            n_scored += 1;
            for (acc, h) in recall_sum.iter_mut().zip(&r.hits) {
                *acc += *h as f64 / r.n_gt as f64;
            }
        }
        for (p, hit) in r.per_pred {
            *pred_count.entry(p).or_default() += 1;
            *pred_hits.entry(p).or_default() += usize::from(hit);
        }
        if let Some(a) = r.alignment {
            align_sum += a;
            n_align += 1;
        }
    }
    let denom = n_scored.max(1) as f64;
    Ok(EvalReport {
        task,
        recall: ks
            .iter()
            .zip(recall_sum)
            .map(|(&k, s)| RecallAt { k, recall: s / denom })
            .collect(),
        per_predicate_recall: pred_count
            .iter()
            .map(|(&p, &n)| (p, pred_hits[&p] as f64 / n as f64))
            .collect(),
        per_predicate_count: pred_count,
        attention_alignment: (n_align > 0).then(|| align_sum / n_align as f64),
        n_scenes: scenes.len(),
        n_scored,
    })
}
