use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelOutput;
use crate::scenegen::Scene;
use crate::tensor::softmax;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    /// Predicates given ground-truth boxes and classes.
    Predcls,
    /// Predicates and object classes given ground-truth boxes.
    Sgcls,
}

impl std::str::FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "predcls" => Ok(Task::Predcls),
            "sgcls" => Ok(Task::Sgcls),
            other => Err(Error::config("task", format!("unknown task `{other}`"))),
        }
    }
}

impl std::fmt::Display for Task {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Task::Predcls => "predcls",
            Task::Sgcls => "sgcls",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Triplet {
    pub subj_idx: usize,
    pub subj_class: usize,
    pub predicate: usize,
    pub obj_idx: usize,
    pub obj_class: usize,
    pub score: f64,
}

impl Triplet {
    fn key(&self) -> (usize, usize, usize, usize, usize) {
        (self.subj_idx, self.obj_idx, self.predicate, self.subj_class, self.obj_class)
    }
}

/// Ground-truth triplets of a scene, with ground-truth classes.
pub fn gt_triplets(scene: &Scene) -> Vec<Triplet> {
    scene
        .relations
        .iter()
        .map(|r| Triplet {
            subj_idx: r.subj,
            subj_class: scene.objects[r.subj].class_id,
            predicate: r.predicate,
            obj_idx: r.obj,
            obj_class: scene.objects[r.obj].class_id,
            score: 1.0,
        })
        .collect()
}

/// Descending score, then ascending `(subj_idx, obj_idx, predicate)`.
pub fn triplet_order(a: &Triplet, b: &Triplet) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.subj_idx.cmp(&b.subj_idx))
        .then(a.obj_idx.cmp(&b.obj_idx))
        .then(a.predicate.cmp(&b.predicate))
}

/// Index and probability of the largest entry from `start` on; ties keep
/// the lowest index.
fn best_from(probs: &[f64], start: usize) -> (usize, f64) {
    let mut best = (start, probs[start]);
    for (k, &p) in probs.iter().enumerate().skip(start + 1) {
        if p > best.1 {
            best = (k, p);
        }
    }
    best
}

/// One triplet per ordered pair carrying its best non-background predicate,
/// scored `P(pred) · P(subj class) · P(obj class)` and ranked by
/// [`triplet_order`]. Under predcls the classes are the ground truth with
/// probability 1; under sgcls they are the argmax of the object logits.
pub fn predict_triplets(output: &ModelOutput, scene: &Scene, task: Task) -> Vec<Triplet> {
    let objects: Vec<(usize, f64)> = match task {
        Task::Predcls => scene.objects.iter().map(|o| (o.class_id, 1.0)).collect(),
        Task::Sgcls => (0..output.o4.rows())
            .map(|i| best_from(&softmax(output.o4.row(i)), 0))
            .collect(),
    };
    let mut out: Vec<Triplet> = output
        .pairs
        .iter()
        .enumerate()
        .map(|(row, &(i, j))| {
            let (predicate, p) = best_from(&softmax(output.g2.row(row)), 1);
            Triplet {
                subj_idx: i,
                subj_class: objects[i].0,
                predicate,
                obj_idx: j,
                obj_class: objects[j].0,
                score: p * objects[i].1 * objects[j].1,
            }
        })
        .collect();
    out.sort_by(triplet_order);
    out
}

/// Ground-truth triplets matched within the top `k` of `ranked`, as one
/// flag per entry of `gt`. A match needs equal indices, predicate and both
/// classes, and each ranked triplet is consumed by at most one GT.
pub fn matched_at_k(ranked: &[Triplet], gt: &[Triplet], k: usize) -> Result<Vec<bool>> {
    if k == 0 {
        return Err(Error::config("k", "must be at least 1"));
    }
    let mut used = vec![false; ranked.len().min(k)];
    Ok(gt
        .iter()
        .map(|g| {
            let hit = ranked
                .iter()
                .take(k)
                .enumerate()
                .find(|(n, t)| !used[*n] && t.key() == g.key());
            if let Some((n, _)) = hit {
                used[n] = true;
            }
            hit.is_some()
        })
        .collect())
}

/// Fraction of `gt` recovered in the top `k`; `None` when `gt` is empty,
/// so such scenes drop out of dataset means.
pub fn recall_at_k(ranked: &[Triplet], gt: &[Triplet], k: usize) -> Result<Option<f64>> {
    let hits = matched_at_k(ranked, gt, k)?;
    if gt.is_empty() {
        return Ok(None);
    }
    Ok(Some(hits.iter().filter(|&&h| h).count() as f64 / gt.len() as f64))
}
