//! Test oracles shared by the integration suites: a loop-level
//! reimplementation of the model, an exhaustive recall matcher and the
//! randomized cases fed to both.

#![allow(dead_code)]

use linknet::eval::Task;
use linknet::model::{forward, EdgeInput, ModelConfig, ModelOutput, ModelParams, RowOp, Similarity};
use linknet::scenegen::{BBox, GenConfig, Generator, Relation, Scene};
use linknet::tensor::softmax;
use linknet::train::init_params;
use linknet::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Mat = Vec<Vec<f64>>;

pub fn mat(t: &Tensor) -> Mat {
    (0..t.rows()).map(|i| t.row(i).to_vec()).collect()
}

pub fn max_diff(a: &Mat, b: &Tensor) -> f64 {
    assert_eq!(a.len(), b.rows(), "row count");
    let mut worst = 0.0f64;
    for (i, row) in a.iter().enumerate() {
        assert_eq!(row.len(), b.cols(), "column count");
        for (j, &v) in row.iter().enumerate() {
            worst = worst.max((v - b.get(i, j)).abs());
        }
    }
    worst
}

fn p(params: &ModelParams, name: &str) -> Mat {
    mat(params.get(name).unwrap_or_else(|| panic!("no parameter {name}")))
}

fn mm(a: &Mat, b: &Mat) -> Mat {
    let inner = b.len();
    let cols = b.first().map_or(0, Vec::len);
    a.iter()
        .map(|row| {
            assert_eq!(row.len(), inner);
            (0..cols)
                .map(|j| (0..inner).map(|k| row[k] * b[k][j]).sum())
                .collect()
        })
        .collect()
}

fn affine(x: &Mat, params: &ModelParams, prefix: &str) -> Mat {
    let w = p(params, &format!("{prefix}.w"));
    let b = p(params, &format!("{prefix}.b"));
    mm(x, &w)
        .into_iter()
        .map(|row| row.iter().zip(&b[0]).map(|(v, c)| v + c).collect())
        .collect()
}

fn relu(x: Mat) -> Mat {
    x.into_iter().map(|r| r.into_iter().map(|v| v.max(0.0)).collect()).collect()
}

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

fn softmax_row(row: &[f64]) -> Vec<f64> {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

fn concat(parts: &[&Mat]) -> Mat {
    let n = parts[0].len();
    (0..n)
        .map(|i| parts.iter().flat_map(|m| m[i].iter().copied()).collect())
        .collect()
}

pub struct RefRem {
    pub attention: Mat,
    pub output: Mat,
}

pub fn rem(x: &Mat, params: &ModelParams, prefix: &str, cfg: &ModelConfig) -> RefRem {
    let q = mm(x, &p(params, &format!("{prefix}.w")));
    let k = mm(x, &p(params, &format!("{prefix}.u")));
    let v = mm(x, &p(params, &format!("{prefix}.h")));
    let n = x.len();
    let mut s = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            s[i][j] = match cfg.similarity {
                Similarity::Dot => q[i].iter().zip(&k[j]).map(|(a, b)| a * b).sum(),
                Similarity::Euclidean => -q[i].iter().zip(&k[j]).map(|(a, b)| (a - b).powi(2)).sum::<f64>(),
            };
        }
    }
    let attention: Mat = match cfg.row_op {
        RowOp::Softmax => s.iter().map(|r| softmax_row(r)).collect(),
        RowOp::Sigmoid => s.iter().map(|r| r.iter().map(|&v| sigmoid(v)).collect()).collect(),
    };
    let lifted = relu(affine(&mm(&attention, &v), params, &format!("{prefix}.fc")));
    let output = x
        .iter()
        .zip(&lifted)
        .map(|(a, b)| a.iter().zip(b).map(|(u, w)| u + w).collect())
        .collect();
    RefRem { attention, output }
}

/// Relative offset and log-scale of `o` in the frame of `s`.
pub fn layout(s: &BBox, o: &BBox) -> [f64; 4] {
    [
        (o.x - s.x) / s.w,
        (o.y - s.y) / s.h,
        o.w.ln() - s.w.ln(),
        o.h.ln() - s.h.ln(),
    ]
}

fn union_row(scene: &Scene, i: usize, j: usize) -> Vec<f64> {
    let (a, b) = (&scene.objects[i], &scene.objects[j]);
    let mut row: Vec<f64> = a.feature.iter().zip(&b.feature).map(|(x, y)| (x + y) / 2.0).collect();
    let (ab, bb) = (a.bbox, b.bbox);
    let left = (ab.x - ab.w / 2.0).min(bb.x - bb.w / 2.0);
    let right = (ab.x + ab.w / 2.0).max(bb.x + bb.w / 2.0);
    let top = (ab.y - ab.h / 2.0).min(bb.y - bb.h / 2.0);
    let bottom = (ab.y + ab.h / 2.0).max(bb.y + bb.h / 2.0);
    row.extend([(left + right) / 2.0, (top + bottom) / 2.0, right - left, bottom - top]);
    row
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (k, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = k;
        }
    }
    best
}

pub struct Reference {
    pub context: Mat,
    pub presence: Option<Mat>,
    pub o0: Mat,
    pub o1: Option<Mat>,
    pub o2: Mat,
    pub o3: Mat,
    pub o4: Mat,
    pub object_attention: Vec<Mat>,
    pub e0: Mat,
    pub e1: Mat,
    pub edge_attention: Vec<Mat>,
    pub g0: Mat,
    pub g1: Mat,
    pub g2: Mat,
    pub obj_loss: f64,
    pub rel_loss: f64,
    pub gce_loss: f64,
    pub total_loss: f64,
}

fn mean_ce(logits: &Mat, targets: &[usize]) -> f64 {
    let total: f64 = logits
        .iter()
        .zip(targets)
        .map(|(row, &t)| -softmax_row(row)[t].ln())
        .sum();
    total / logits.len() as f64
}

/// The whole model written out with plain loops.
pub fn reference_forward(scene: &Scene, params: &ModelParams) -> Reference {
    let cfg = &params.config;
    let n = scene.len();

    let (context, presence) = if cfg.enable_gce {
        let shape = scene.grid.shape();
        let cells = shape[1] * shape[2];
        let pooled: Vec<f64> = (0..shape[0])
            .map(|ch| scene.grid.data()[ch * cells..(ch + 1) * cells].iter().sum::<f64>() / cells as f64)
            .collect();
        let c = affine(&vec![pooled], params, "gce.ctx");
        let m: Mat = affine(&c, params, "gce.head")
            .into_iter()
            .map(|r| r.into_iter().map(sigmoid).collect())
            .collect();
        (c, Some(m))
    } else {
        (vec![vec![0.0; cfg.context_dim]], None)
    };

    let feats: Mat = scene.objects.iter().map(|o| o.feature.clone()).collect();
    let labels: Mat = scene.objects.iter().map(|o| o.label_dist.clone()).collect();
    let emb = mm(&labels, &p(params, "k0"));
    let ctx_rows: Mat = vec![context[0].clone(); n];
    let o0 = concat(&[&feats, &emb, &ctx_rows]);

    let mut object_attention = Vec::new();
    let mut x = o0.clone();
    let mut o1 = None;
    if cfg.rem_count > 0 {
        let r = rem(&x, params, "obj.rem0", cfg);
        object_attention.push(r.attention);
        o1 = Some(r.output.clone());
        x = r.output;
    }
    let o2 = relu(affine(&x, params, "obj.fc1"));
    x = o2.clone();
    for k in 1..cfg.rem_count {
        let r = rem(&x, params, &format!("obj.rem{k}"), cfg);
        object_attention.push(r.attention);
        x = r.output;
    }
    let o3 = x;
    let o4 = affine(&o3, params, "obj.fc3");

    let k1 = p(params, "k1");
    let picked: Mat = o4.iter().map(|row| k1[argmax(row)].clone()).collect();
    let e0 = match cfg.edge_input {
        EdgeInput::Both => concat(&[&picked, &o3]),
        EdgeInput::ArgmaxOnly => picked,
        EdgeInput::ContextOnly => o3.clone(),
    };
    let mut edge_attention = Vec::new();
    let mut x = e0.clone();
    for k in 0..cfg.rem_count {
        let r = rem(&x, params, &format!("edge.rem{k}"), cfg);
        edge_attention.push(r.attention);
        x = r.output;
    }
    let e1 = relu(affine(&x, params, "edge.fc"));

    let d = cfg.edge_dim;
    let k2 = p(params, "k2");
    let (mut g0, mut g1) = (Vec::new(), Vec::new());
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let f = relu(affine(&vec![union_row(scene, i, j)], params, "union")).remove(0);
            let row: Vec<f64> = (0..d).map(|c| e1[i][c] * e1[j][d + c] * f[c]).collect();
            let geo: Vec<f64> = if cfg.enable_glem {
                let b = layout(&scene.objects[i].bbox, &scene.objects[j].bbox);
                (0..cfg.geo_dim).map(|c| (0..4).map(|t| b[t] * k2[t][c]).sum()).collect()
            } else {
                vec![0.0; cfg.geo_dim]
            };
            let mut full = row.clone();
            full.extend(geo);
            g0.push(row);
            g1.push(full);
        }
    }
    let g2 = affine(&g1, params, "fc4");

    let classes: Vec<usize> = scene.objects.iter().map(|o| o.class_id).collect();
    let obj_loss = mean_ce(&o4, &classes);
    let mut dense = vec![0usize; n * n];
    for r in &scene.relations {
        dense[r.subj * n + r.obj] = r.predicate;
    }
    let pair_labels: Vec<usize> = (0..n)
        .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
        .map(|(i, j)| dense[i * n + j])
        .collect();
    let rel_loss = mean_ce(&g2, &pair_labels);
    let gce_loss = match &presence {
        Some(m) => {
            let mut present = vec![false; cfg.num_obj_classes];
            for &c in &classes {
                present[c] = true;
            }
            m[0].iter()
                .zip(&present)
                .map(|(&q, &y)| if y { -q.ln() } else { -(1.0 - q).ln() })
                .sum()
        }
        None => 0.0,
    };
    let total_loss = obj_loss + cfg.lambda_rel * rel_loss + cfg.lambda_gce * gce_loss;

    Reference {
        context,
        presence,
        o0,
        o1,
        o2,
        o3,
        o4,
        object_attention,
        e0,
        e1,
        edge_attention,
        g0,
        g1,
        g2,
        obj_loss,
        rel_loss,
        gce_loss,
        total_loss,
    }
}

/// Xavier-initialized parameters with every bias replaced by small random
/// values, so bias paths are exercised too.
pub fn random_params(cfg: &ModelConfig, seed: u64) -> ModelParams {
    let mut params = init_params(cfg, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xB1A5);
    let names: Vec<String> = params.names().filter(|n| n.ends_with(".b")).cloned().collect();
    for name in names {
        for v in params.get_mut(&name).unwrap().data_mut() {
            *v = rng.random_range(-0.1..0.1);
        }
    }
    params
}

pub fn gen_for(cfg: &ModelConfig, min_objects: usize, max_objects: usize) -> Generator {
    Generator::new(GenConfig {
        num_obj_classes: cfg.num_obj_classes,
        num_rel_classes: cfg.num_rel_classes,
        roi_dim: cfg.roi_dim,
        image_dim: cfg.image_dim,
        min_objects,
        max_objects,
        ..GenConfig::default()
    })
    .unwrap()
}

/// Logits on a coarse grid so exact score ties show up often.
fn coarse(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols).map(|_| f64::from(rng.random_range(0..4u8))).collect();
    Tensor::new(vec![rows, cols], data).unwrap()
}

/// A scene with random ground truth (several predicates per pair allowed)
/// and an output whose logits are overwritten with tie-prone values.
pub fn random_case(seed: u64) -> (Scene, ModelOutput) {
    let cfg = ModelConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(2..=5);
    let mut scene = gen_for(&cfg, n, n).scene(seed);
    let mut out = forward(&scene, &random_params(&cfg, seed)).unwrap();
    let mut rels = Vec::new();
    for i in 0..n {
        for j in 0..n {
            for p in 1..cfg.num_rel_classes {
                if i != j && rng.random_bool(0.12) {
                    rels.push(Relation { subj: i, obj: j, predicate: p });
                }
            }
        }
    }
    scene.relations = rels;
    out.o4 = coarse(&mut rng, n, cfg.num_obj_classes);
    out.g2 = coarse(&mut rng, n * (n - 1), cfg.num_rel_classes);
    (scene, out)
}

fn argmax_with_prob(probs: &[f64]) -> (usize, f64) {
    let mut best = 0;
    for k in 1..probs.len() {
        if probs[k] > probs[best] {
            best = k;
        }
    }
    (best, probs[best])
}

pub fn brute_candidates(scene: &Scene, out: &ModelOutput, task: Task) -> Vec<brute::Cand> {
    let classes: Vec<(usize, f64)> = match task {
        Task::Predcls => scene.objects.iter().map(|o| (o.class_id, 1.0)).collect(),
        Task::Sgcls => (0..scene.len()).map(|i| argmax_with_prob(&softmax(out.o4.row(i)))).collect(),
    };
    let pair_probs: Vec<_> = out
        .pairs
        .iter()
        .enumerate()
        .map(|(row, &ij)| (ij, softmax(out.g2.row(row))))
        .collect();
    brute::candidates(&pair_probs, &classes)
}

pub fn gt_tuples(scene: &Scene) -> Vec<(usize, usize, usize, usize, usize)> {
    scene
        .relations
        .iter()
        .map(|r| (r.subj, r.obj, r.predicate, scene.objects[r.subj].class_id, scene.objects[r.obj].class_id))
        .collect()
}

/// Objects reordered by `perm`: new object `k` is old object `perm[k]`.
pub fn permute(scene: &Scene, perm: &[usize]) -> Scene {
    let mut inv = vec![0; perm.len()];
    for (k, &old) in perm.iter().enumerate() {
        inv[old] = k;
    }
    Scene {
        scene_id: scene.scene_id.clone(),
        objects: perm.iter().map(|&old| scene.objects[old].clone()).collect(),
        relations: scene
            .relations
            .iter()
            .map(|r| Relation {
                subj: inv[r.subj],
                obj: inv[r.obj],
                predicate: r.predicate,
            })
            .collect(),
        grid: scene.grid.clone(),
    }
}

pub fn pair_row(n: usize, i: usize, j: usize) -> usize {
    i * (n - 1) + if j > i { j - 1 } else { j }
}

/// A comparison-free ranking oracle for recall@K: every candidate's rank is
/// the number of candidates strictly ahead of it, and the GT-to-prediction
/// assignment is the maximum matching found by exhaustive search.
pub mod brute {
    /// `(subj, obj, predicate, subj_class, obj_class, score)`
    pub type Cand = (usize, usize, usize, usize, usize, f64);

    fn ahead(a: &Cand, b: &Cand) -> bool {
        if a.5 != b.5 {
            return a.5 > b.5;
        }
        (a.0, a.1, a.2) < (b.0, b.1, b.2)
    }

    fn same(a: &Cand, g: &(usize, usize, usize, usize, usize)) -> bool {
        (a.0, a.1, a.2, a.3, a.4) == *g
    }

    fn best_matching(gt: &[(usize, usize, usize, usize, usize)], top: &[Cand], used: &mut Vec<bool>) -> usize {
        let Some((g, rest)) = gt.split_first() else {
            return 0;
        };
        let mut best = best_matching(rest, top, used);
        for k in 0..top.len() {
            if !used[k] && same(&top[k], g) {
                used[k] = true;
                best = best.max(1 + best_matching(rest, top, used));
                used[k] = false;
            }
        }
        best
    }

    /// Number of GT tuples recovered in the top `k` candidates.
    pub fn hits(cands: &[Cand], gt: &[(usize, usize, usize, usize, usize)], k: usize) -> usize {
        let top: Vec<Cand> = cands
            .iter()
            .filter(|c| cands.iter().filter(|d| ahead(d, c)).count() < k)
            .copied()
            .collect();
        let mut used = vec![false; top.len()];
        best_matching(gt, &top, &mut used)
    }

    /// Graph-constrained candidates: one per ordered pair, carrying the
    /// predicate with the highest probability among non-background
    /// classes and scored by the product with both class probabilities.
    pub fn candidates(pair_probs: &[((usize, usize), Vec<f64>)], classes: &[(usize, f64)]) -> Vec<Cand> {
        pair_probs
            .iter()
            .map(|((i, j), probs)| {
                let mut best = 1;
                for p in 2..probs.len() {
                    if probs[p] > probs[best] {
                        best = p;
                    }
                }
                (*i, *j, best, classes[*i].0, classes[*j].0, probs[best] * classes[*i].1 * classes[*j].1)
            })
            .collect()
    }
}
