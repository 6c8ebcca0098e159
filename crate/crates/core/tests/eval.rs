mod common;

use common::brute;
use common::{brute_candidates, gen_for, gt_tuples, random_case, random_params};
use linknet::eval::heatmap::{parse_csv, to_pgm};
use linknet::eval::{
    attention_alignment, evaluate, export_heatmap, gt_triplets, predict_triplets, recall_at_k, Task,
};
use linknet::model::{forward, ModelConfig};
use linknet::scenegen::Scene;
use linknet::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn recall_matches_exhaustive_matching() {
    let mut checked = 0;
    for seed in 0..1000u64 {
        let (scene, out) = random_case(seed);
        let gt = gt_triplets(&scene);
        let tuples = gt_tuples(&scene);
        for task in [Task::Predcls, Task::Sgcls] {
            let ranked = predict_triplets(&out, &scene, task);
            let cands = brute_candidates(&scene, &out, task);
            for k in 1..=ranked.len() + 1 {
                let got = recall_at_k(&ranked, &gt, k).unwrap();
                if gt.is_empty() {
                    assert_eq!(got, None);
                    continue;
                }
                let want = brute::hits(&cands, &tuples, k) as f64 / gt.len() as f64;
                assert_eq!(got, Some(want), "seed {seed} {task} k={k}");
                checked += 1;
            }
        }
    }
    assert!(checked > 10_000, "{checked}");
}

#[test]
fn ranking_is_a_strict_total_order() {
    for seed in 0..200u64 {
        let (scene, out) = random_case(seed);
        for task in [Task::Predcls, Task::Sgcls] {
            let ranked = predict_triplets(&out, &scene, task);
            let n = scene.len();
            assert_eq!(ranked.len(), n * (n - 1));
            for w in ranked.windows(2) {
                let (a, b) = (&w[0], &w[1]);
                assert!(a.score > b.score || (a.score == b.score && (a.subj_idx, a.obj_idx) < (b.subj_idx, b.obj_idx)));
            }
            assert!(ranked.iter().all(|t| t.predicate != 0 && t.score > 0.0 && t.score <= 1.0));
        }
    }
}

#[test]
fn evaluation_skips_scenes_without_relations() {
    let cfg = ModelConfig::default();
    let gen = gen_for(&cfg, 4, 6);
    let params = random_params(&cfg, 3);
    let mut scenes: Vec<Scene> = (0..6).map(|s| gen.scene(s)).collect();
    let with_gt = evaluate(&params, &scenes, Task::Sgcls, &[5, 50]).unwrap();
    scenes[0].relations.clear();
    scenes[3].relations.clear();
    let report = evaluate(&params, &scenes, Task::Sgcls, &[50, 5, 5]).unwrap();
    assert_eq!((report.n_scenes, report.n_scored), (6, 4));
    assert_eq!(report.recall.iter().map(|r| r.k).collect::<Vec<_>>(), [5, 50]);

    let kept: Vec<Scene> = scenes.iter().filter(|s| !s.relations.is_empty()).cloned().collect();
    let only = evaluate(&params, &kept, Task::Sgcls, &[5, 50]).unwrap();
    assert_eq!(only.recall, report.recall);
    assert_eq!(with_gt.n_scored, 6);
    assert!(evaluate(&params, &scenes, Task::Sgcls, &[]).is_err());
    assert!(evaluate(&params, &scenes, Task::Sgcls, &[0, 3]).is_err());
}

#[test]
fn per_predicate_recall_is_pooled_over_instances() {
    let cfg = ModelConfig::default();
    let gen = gen_for(&cfg, 5, 8);
    let params = random_params(&cfg, 8);
    let scenes: Vec<Scene> = (0..20).map(|s| gen.scene(s)).collect();
    let report = evaluate(&params, &scenes, Task::Predcls, &[10]).unwrap();
    let mut hits = std::collections::BTreeMap::<usize, (usize, usize)>::new();
    for s in &scenes {
        let out = forward(s, &params).unwrap();
        let ranked = predict_triplets(&out, s, Task::Predcls);
        let gt = gt_triplets(s);
        let cands = brute_candidates(s, &out, Task::Predcls);
        for (g, tuple) in gt.iter().zip(gt_tuples(s)) {
            let e = hits.entry(g.predicate).or_default();
            e.1 += 1;
            // Single-relation pairs: a hit is the tuple itself landing in the top 10.
            e.0 += brute::hits(&cands, &[tuple], 10);
        }
        assert_eq!(ranked.len(), cands.len());
    }
    for (p, (h, n)) in hits {
        assert_eq!(report.per_predicate_count[&p], n);
        assert_eq!(report.per_predicate_recall[&p], h as f64 / n as f64, "predicate {p}");
    }
}

fn row_normalized(adj: &[Vec<u8>]) -> Tensor {
    let rows: Vec<Vec<f64>> = adj
        .iter()
        .map(|r| {
            let d: f64 = r.iter().map(|&v| f64::from(v)).sum();
            r.iter().map(|&v| f64::from(v) / d).collect()
        })
        .collect();
    Tensor::from_rows(&rows)
}

#[test]
#[allow(clippy::needless_range_loop)]
fn attention_on_the_graph_maximizes_alignment() {
    let mut rng = ChaCha8Rng::seed_from_u64(44);
    for _ in 0..100 {
        let n = rng.random_range(3..=8);
        let mut adj = vec![vec![0u8; n]; n];
        // A path keeps every object related; extra random edges on top.
        for i in 0..n - 1 {
            adj[i][i + 1] = 1;
            adj[i + 1][i] = 1;
        }
        for i in 0..n {
            for j in i + 2..n {
                if rng.random_bool(0.2) {
                    adj[i][j] = 1;
                    adj[j][i] = 1;
                }
            }
        }
        let Some(best) = attention_alignment(&row_normalized(&adj), &adj).unwrap() else {
            continue;
        };
        assert!(best > 0.0);
        let uniform = Tensor::from_rows(&vec![vec![1.0 / n as f64; n]; n]);
        assert!(attention_alignment(&uniform, &adj).unwrap().unwrap().abs() < 1e-15);
        for _ in 0..50 {
            let rows: Vec<Vec<f64>> = (0..n)
                .map(|_| {
                    let r: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0f64).powi(4)).collect();
                    let s: f64 = r.iter().sum();
                    r.into_iter().map(|v| v / s).collect()
                })
                .collect();
            let a = attention_alignment(&Tensor::from_rows(&rows), &adj).unwrap().unwrap();
            assert!(a <= best + 1e-12, "{a} > {best}");
        }
        let mut complement = adj.clone();
        for (i, row) in complement.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = u8::from(i != j && *v == 0);
            }
        }
        if complement.iter().all(|r| r.contains(&1)) {
            let worst = attention_alignment(&row_normalized(&complement), &adj).unwrap().unwrap();
            assert!(worst < 0.0);
        }
    }
}

#[test]
fn heatmap_files_hold_the_matrix() {
    let cfg = ModelConfig::default();
    let scene = gen_for(&cfg, 6, 6).scene(2);
    let out = forward(&scene, &random_params(&cfg, 2)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    for (k, r) in out.attention().enumerate() {
        let (csv, pgm) = export_heatmap(r, &dir.path().join(format!("rem{k}"))).unwrap();
        assert_eq!(&parse_csv(&std::fs::read_to_string(csv).unwrap()).unwrap(), r);
        let bytes = std::fs::read(pgm).unwrap();
        assert!(bytes.starts_with(b"P5\n6 6\n255\n"));
        assert_eq!(bytes.len(), "P5\n6 6\n255\n".len() + 36);
        assert_eq!(bytes, to_pgm(r).unwrap());
        let pixels = &bytes[bytes.len() - 36..];
        assert_eq!(pixels.iter().max(), Some(&255));
        assert_eq!(pixels.iter().min(), Some(&0));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn recall_is_monotone_in_k(seed in any::<u64>()) {
        let (scene, out) = random_case(seed);
        let gt = gt_triplets(&scene);
        prop_assume!(!gt.is_empty());
        for task in [Task::Predcls, Task::Sgcls] {
            let ranked = predict_triplets(&out, &scene, task);
            let mut prev = 0.0;
            for k in 1..=ranked.len() + 2 {
                let r = recall_at_k(&ranked, &gt, k).unwrap().unwrap();
                prop_assert!(r >= prev && (0.0..=1.0).contains(&r));
                prev = r;
            }
        }
    }

    #[test]
    fn predcls_never_trails_sgcls_on_the_same_output(seed in any::<u64>()) {
        let (scene, out) = random_case(seed);
        let gt = gt_triplets(&scene);
        prop_assume!(!gt.is_empty());
        let pred = predict_triplets(&out, &scene, Task::Predcls);
        let sg = predict_triplets(&out, &scene, Task::Sgcls);
        // With full K both rank every pair, and predcls classes are exact.
        let k = pred.len();
        prop_assert!(recall_at_k(&pred, &gt, k).unwrap() >= recall_at_k(&sg, &gt, k).unwrap());
    }
}
