use std::io::Write as _;

use linknet::scenegen::dataset::{scene_from_line, scene_to_line};
use linknet::scenegen::generator::PairKind;
use linknet::scenegen::{read_dataset, union_feature, write_dataset, GenConfig, Generator, Scene};
use linknet::Error;
use proptest::prelude::*;

fn generator() -> Generator {
    Generator::new(GenConfig::default()).unwrap()
}

#[test]
fn ten_thousand_scenes_satisfy_every_invariant() {
    let gen = generator();
    let cfg = gen.config();
    for seed in 0..10_000u64 {
        let s = gen.scene(seed);
        s.validate(Some(cfg.num_rel_classes)).unwrap_or_else(|e| panic!("seed {seed}: {e}"));
        assert!((cfg.min_objects..=cfg.max_objects).contains(&s.len()));
        assert_eq!(s.grid.shape(), [cfg.image_dim, cfg.grid_h, cfg.grid_w]);
        assert!(s.relations.iter().all(|r| r.predicate != 0));
    }
}

#[test]
fn desk_scale_defaults() {
    let cfg = GenConfig::default();
    assert_eq!((cfg.num_obj_classes, cfg.num_rel_classes), (10, 6));
    assert_eq!((cfg.min_objects, cfg.max_objects), (3, 12));
    assert_eq!((cfg.roi_dim, cfg.image_dim, cfg.grid_h, cfg.grid_w), (32, 16, 8, 8));
}

#[test]
fn relations_follow_the_rule_tables() {
    let gen = generator();
    let world = gen.world();
    let (mut geometric, mut agree) = (0usize, 0usize);
    for seed in 0..1000u64 {
        let s = gen.scene(seed);
        for r in &s.relations {
            let (cs, co) = (s.objects[r.subj].class_id, s.objects[r.obj].class_id);
            let kinds: Vec<PairKind> = world
                .pair_rules
                .iter()
                .filter(|p| p.subj_class == cs && p.obj_class == co)
                .map(|p| p.kind)
                .collect();
            assert!(!kinds.is_empty(), "seed {seed}: no rule for ({cs}, {co})");
            if kinds.contains(&PairKind::Geometric) && gen.config().geometric_predicates().contains(&r.predicate) {
                geometric += 1;
                let from_boxes = world.geometric_predicate(&s.objects[r.subj].bbox, &s.objects[r.obj].bbox);
                agree += usize::from(from_boxes == Some(r.predicate));
            } else {
                assert!(kinds.contains(&PairKind::Semantic { predicate: r.predicate }));
            }
        }
    }
    assert!(geometric > 1000);
    assert!(agree as f64 / geometric as f64 > 0.95, "{agree}/{geometric}");
}

#[test]
fn zero_noise_gives_prototypes_and_one_hot_labels() {
    let cfg = GenConfig {
        feature_noise_sigma: 0.0,
        feature_scale: 1.0,
        label_noise: 0.0,
        ..GenConfig::default()
    };
    let gen = Generator::new(cfg).unwrap();
    for seed in 0..50 {
        for o in &gen.scene(seed).objects {
            assert_eq!(o.feature, gen.world().roi_prototypes[o.class_id]);
            for (k, &p) in o.label_dist.iter().enumerate() {
                assert_eq!(p, if k == o.class_id { 1.0 } else { 0.0 });
            }
        }
    }
}

#[test]
fn invalid_configs_name_the_field() {
    let cases = [
        r#"{"num_rel_classes": 1}"#,
        r#"{"roi_dim": 0}"#,
        r#"{"min_objects": 1}"#,
        r#"{"min_objects": 5, "max_objects": 4}"#,
        r#"{"label_noise": 1.5}"#,
        r#"{"feature_scale": 0}"#,
    ];
    let fields = ["num_rel_classes", "roi_dim", "min_objects", "max_objects", "label_noise", "feature_scale"];
    for (json, field) in cases.iter().zip(fields) {
        let cfg: GenConfig = serde_json::from_str(json).unwrap();
        match Generator::new(cfg) {
            Err(Error::Config { field: f, .. }) => assert_eq!(f, field),
            other => panic!("{json}: {other:?}"),
        }
    }
}

#[test]
fn dataset_round_trip_is_lossless() {
    let gen = generator();
    let scenes = gen.dataset(100, 11);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.jsonl");
    write_dataset(&scenes, &path).unwrap();
    assert_eq!(read_dataset(&path).unwrap(), scenes);

    let empty = dir.path().join("empty.jsonl");
    std::fs::File::create(&empty).unwrap();
    assert!(read_dataset(&empty).unwrap().is_empty());
}

#[test]
fn malformed_lines_report_their_number() {
    let gen = generator();
    let good = scene_to_line(&gen.scene(1)).unwrap();
    let mut bad_scene: Scene = gen.scene(2);
    bad_scene.relations[0].obj = bad_scene.relations[0].subj;
    let bad = scene_to_line(&bad_scene).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.jsonl");
    let mut f = std::fs::File::create(&path).unwrap();
    writeln!(f, "{good}\n{good}\n{bad}").unwrap();
    drop(f);
    match read_dataset(&path) {
        Err(Error::Dataset { line, reason, .. }) => {
            assert_eq!(line, 3);
            assert!(reason.contains("subj == obj"), "{reason}");
        }
        other => panic!("{other:?}"),
    }

    std::fs::write(&path, format!("{good}\nnot json\n")).unwrap();
    assert!(matches!(read_dataset(&path), Err(Error::Dataset { line: 2, .. })));
    assert!(scene_from_line(&good.replace("\"v\":1", "\"v\":9")).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn generation_is_deterministic(seed in any::<u64>()) {
        let gen = generator();
        prop_assert_eq!(gen.scene(seed), gen.scene(seed));
        let other = Generator::new(GenConfig::default()).unwrap();
        prop_assert_eq!(scene_to_line(&gen.scene(seed)).unwrap(), scene_to_line(&other.scene(seed)).unwrap());
    }

    #[test]
    fn scene_lines_round_trip(seed in any::<u64>()) {
        let s = generator().scene(seed);
        prop_assert_eq!(scene_from_line(&scene_to_line(&s).unwrap()).unwrap(), s);
    }

    #[test]
    fn union_feature_is_symmetric_in_content(seed in any::<u64>()) {
        let s = generator().scene(seed);
        let d = s.roi_dim();
        let (a, b) = (union_feature(&s, 0, 1).unwrap(), union_feature(&s, 1, 0).unwrap());
        prop_assert_eq!(a.len(), d + 4);
        prop_assert_eq!(&a[..d], &b[..d]);
        prop_assert_eq!(&a[d..], &b[d..]);
    }

    #[test]
    fn union_of_identical_objects_is_their_feature(seed in any::<u64>()) {
        let mut s = generator().scene(seed);
        s.objects[1] = s.objects[0].clone();
        let u = union_feature(&s, 0, 1).unwrap();
        let o = &s.objects[0];
        prop_assert_eq!(&u[..o.feature.len()], o.feature.as_slice());
        let b = [o.bbox.x, o.bbox.y, o.bbox.w, o.bbox.h];
        for (got, want) in u[o.feature.len()..].iter().zip(b) {
            prop_assert!((got - want).abs() < 1e-15);
        }
    }
}
