//! Synthetic detector front end.
//!
//! A scene is built from subject/object *groups*. Each group instantiates
//! one entry of the pair rule table, which fixes the two classes and says
//! whether the predicate comes from the class pair or from the boxes'
//! relative layout. Members of a group share part of their feature noise,
//! and sibling classes (`2k`, `2k + 1`) have look-alike prototypes whose
//! partner classes differ, so a confusable object can be resolved by looking
//! at the object it is grouped with.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::layout::geometric_layout;
use crate::scenegen::scene::{BBox, Relation, Scene, SceneObject};
use crate::tensor::Tensor;

/// Half-open interval `[min, max)` on the relative layout coordinates.
/// Missing bounds are unbounded.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub min: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max: Option<f64>,
}

impl Interval {
    pub fn contains(&self, v: f64) -> bool {
        self.min.is_none_or(|lo| v >= lo) && self.max.is_none_or(|hi| v < hi)
    }
}

/// A predicate that holds whenever the subject→object layout falls in a
/// region of `(dx, dy) = ((x_o − x_s)/w_s, (y_o − y_s)/h_s)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeometricRule {
    pub predicate: usize,
    #[serde(default)]
    pub dx: Interval,
    #[serde(default)]
    pub dy: Interval,
}

impl GeometricRule {
    pub fn matches(&self, subj: &BBox, obj: &BBox) -> bool {
        let b = geometric_layout(subj, obj).expect("generated boxes are valid");
        self.dx.contains(b[0]) && self.dy.contains(b[1])
    }
}

/// How a related class pair gets its predicate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairKind {
    /// Predicate read off the boxes through the geometric rule table.
    Geometric,
    /// Fixed predicate for this class pair.
    Semantic { predicate: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairRule {
    pub subj_class: usize,
    pub obj_class: usize,
    pub kind: PairKind,
}

fn d_classes() -> usize {
    10
}
fn d_rel() -> usize {
    6
}
fn d_min_objects() -> usize {
    3
}
fn d_max_objects() -> usize {
    12
}
fn d_roi() -> usize {
    32
}
fn d_img() -> usize {
    16
}
fn d_grid() -> usize {
    8
}
fn d_feature_noise() -> f64 {
    1.5
}
fn d_feature_scale() -> f64 {
    0.2
}
fn d_label_noise() -> f64 {
    0.3
}
fn d_grid_noise() -> f64 {
    0.3
}
fn d_group_corr() -> f64 {
    0.9
}
fn d_lookalike() -> f64 {
    1.0
}
fn d_partners() -> usize {
    2
}
fn d_geo_fraction() -> f64 {
    0.6
}
fn d_rng_seed() -> u64 {
    7
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenConfig {
    #[serde(default = "d_classes")]
    pub num_obj_classes: usize,
    /// Predicate classes including background (class 0).
    #[serde(default = "d_rel")]
    pub num_rel_classes: usize,
    #[serde(default = "d_min_objects")]
    pub min_objects: usize,
    #[serde(default = "d_max_objects")]
    pub max_objects: usize,
    #[serde(default = "d_roi")]
    pub roi_dim: usize,
    #[serde(default = "d_img")]
    pub image_dim: usize,
    #[serde(default = "d_grid")]
    pub grid_h: usize,
    #[serde(default = "d_grid")]
    pub grid_w: usize,
    #[serde(default = "d_feature_noise")]
    pub feature_noise_sigma: f64,
    /// Overall multiplier on ROI features, prototype and noise alike.
    #[serde(default = "d_feature_scale")]
    pub feature_scale: f64,
    /// Detector confusion strength in `[0, 1]`.
    #[serde(default = "d_label_noise")]
    pub label_noise: f64,
    #[serde(default = "d_grid_noise")]
    pub grid_noise_sigma: f64,
    /// Fraction of feature-noise variance shared by the members of a group.
    #[serde(default = "d_group_corr")]
    pub group_noise_correlation: f64,
    /// Fraction of prototype variance shared by sibling classes.
    #[serde(default = "d_lookalike")]
    pub lookalike_similarity: f64,
    /// Partner classes per subject class when the pair table is derived.
    #[serde(default = "d_partners")]
    pub partners_per_class: usize,
    /// Fraction of derived pair rules whose predicate is geometric.
    #[serde(default = "d_geo_fraction")]
    pub geometric_fraction: f64,
    /// Defaults to above/below/beside on `dy` when absent.
    #[serde(default)]
    pub geometric_rule_table: Option<Vec<GeometricRule>>,
    /// Derived from `rng_seed` when absent.
    #[serde(default)]
    pub pair_rule_table: Option<Vec<PairRule>>,
    /// Seeds the world: prototypes and the derived rule tables.
    #[serde(default = "d_rng_seed")]
    pub rng_seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults deserialize")
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_rel_classes < 2 {
            return Err(Error::config(
                "num_rel_classes",
                "need background plus at least one predicate (>= 2)",
            ));
        }
        for (field, v) in [
            ("num_obj_classes", self.num_obj_classes),
            ("roi_dim", self.roi_dim),
            ("image_dim", self.image_dim),
            ("grid_h", self.grid_h),
            ("grid_w", self.grid_w),
        ] {
            if v == 0 {
                return Err(Error::config(field, "must be positive"));
            }
        }
        if self.num_obj_classes < 2 {
            return Err(Error::config("num_obj_classes", "must be at least 2"));
        }
        if self.min_objects < 2 {
            return Err(Error::config("min_objects", "must be at least 2"));
        }
        if self.max_objects < self.min_objects {
            return Err(Error::config("max_objects", "must be >= min_objects"));
        }
        for (field, v) in [
            ("label_noise", self.label_noise),
            ("group_noise_correlation", self.group_noise_correlation),
            ("lookalike_similarity", self.lookalike_similarity),
            ("geometric_fraction", self.geometric_fraction),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::config(field, "must lie in [0, 1]"));
            }
        }
        for (field, v) in [
            ("feature_noise_sigma", self.feature_noise_sigma),
            ("grid_noise_sigma", self.grid_noise_sigma),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(field, "must be finite and >= 0"));
            }
        }
        if !(self.feature_scale > 0.0 && self.feature_scale.is_finite()) {
            return Err(Error::config("feature_scale", "must be finite and > 0"));
        }
        if self.partners_per_class == 0 || self.partners_per_class >= self.num_obj_classes {
            return Err(Error::config(
                "partners_per_class",
                "must be in [1, num_obj_classes)",
            ));
        }
        for rule in self.geometric_rules() {
            if rule.predicate == 0 || rule.predicate >= self.num_rel_classes {
                return Err(Error::config(
                    "geometric_rule_table",
                    format!("predicate {} out of range", rule.predicate),
                ));
            }
        }
        if let Some(rules) = &self.pair_rule_table {
            if rules.is_empty() {
                return Err(Error::config("pair_rule_table", "must not be empty"));
            }
            for r in rules {
                if r.subj_class >= self.num_obj_classes || r.obj_class >= self.num_obj_classes {
                    return Err(Error::config("pair_rule_table", "class out of range"));
                }
                if let PairKind::Semantic { predicate } = r.kind {
                    if predicate == 0 || predicate >= self.num_rel_classes {
                        return Err(Error::config(
                            "pair_rule_table",
                            format!("predicate {predicate} out of range"),
                        ));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn geometric_rules(&self) -> Vec<GeometricRule> {
        match &self.geometric_rule_table {
            Some(rules) => rules.clone(),
            None => default_geometric_rules(self.num_rel_classes),
        }
    }

    /// Predicates that some geometric rule can emit.
    pub fn geometric_predicates(&self) -> Vec<usize> {
        let mut preds: Vec<usize> = self.geometric_rules().iter().map(|r| r.predicate).collect();
        preds.sort_unstable();
        preds.dedup();
        preds
    }

    pub fn semantic_predicates(&self) -> Vec<usize> {
        let geo = self.geometric_predicates();
        (1..self.num_rel_classes).filter(|p| !geo.contains(p)).collect()
    }
}

/// above (`dy < −½`), below (`dy ≥ ½`), beside otherwise; fewer when there
/// are not enough predicate classes.
pub fn default_geometric_rules(num_rel_classes: usize) -> Vec<GeometricRule> {
    let iv = |min: Option<f64>, max: Option<f64>| Interval { min, max };
    let rule = |predicate, dy| GeometricRule {
        predicate,
        dx: Interval::default(),
        dy,
    };
    match num_rel_classes {
        0 | 1 => Vec::new(),
        2 => vec![rule(1, Interval::default())],
        3 => vec![rule(1, iv(None, Some(0.0))), rule(2, iv(Some(0.0), None))],
        _ => vec![
            rule(1, iv(None, Some(-0.5))),
            rule(2, iv(Some(0.5), None)),
            rule(3, iv(Some(-0.5), Some(0.5))),
        ],
    }
}

/// Everything a scene generator derives from `GenConfig::rng_seed`.
#[derive(Clone, Debug)]
pub struct World {
    pub roi_prototypes: Vec<Vec<f64>>,
    pub grid_prototypes: Vec<Vec<f64>>,
    pub pair_rules: Vec<PairRule>,
    pub geometric_rules: Vec<GeometricRule>,
}

/// Splitmix64 finalizer, used to derive independent stream seeds.
pub fn mix_seed(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn normal_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

fn sibling(class: usize, num_classes: usize) -> usize {
    let s = class ^ 1;
    if s < num_classes {
        s
    } else {
        class
    }
}

/// One standard-normal vector per class, where classes `2k` and `2k + 1`
/// share a fraction `s` of their variance.
fn lookalike_prototypes(rng: &mut ChaCha8Rng, classes: usize, dim: usize, s: f64) -> Vec<Vec<f64>> {
    let bases: Vec<Vec<f64>> = (0..classes.div_ceil(2)).map(|_| normal_vec(rng, dim)).collect();
    (0..classes)
        .map(|k| {
            let own = normal_vec(rng, dim);
            bases[k / 2]
                .iter()
                .zip(own)
                .map(|(b, o)| s.sqrt() * b + (1.0 - s).sqrt() * o)
                .collect()
        })
        .collect()
}

impl World {
    pub fn new(cfg: &GenConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.rng_seed, 0x5EED));
        let c = cfg.num_obj_classes;
        let s = cfg.lookalike_similarity;
        let roi_prototypes = lookalike_prototypes(&mut rng, c, cfg.roi_dim, s);
        let grid_prototypes = lookalike_prototypes(&mut rng, c, cfg.image_dim, s);
        let pair_rules = match &cfg.pair_rule_table {
            Some(rules) => rules.clone(),
            None => derive_pair_rules(cfg, &mut rng),
        };
        Self {
            roi_prototypes,
            grid_prototypes,
            pair_rules,
            geometric_rules: cfg.geometric_rules(),
        }
    }

    /// First geometric rule matching the layout, if any.
    pub fn geometric_predicate(&self, subj: &BBox, obj: &BBox) -> Option<usize> {
        self.geometric_rules
            .iter()
            .find(|r| r.matches(subj, obj))
            .map(|r| r.predicate)
    }
}

/// Classes `2k` and `2k + 1` form look-alike family `k`. Every pair of
/// families is joined by at most one rule, attached to one class on each
/// side, so siblings never share a partner family and an object's partner
/// identifies which sibling it is. `partners_per_class` caps the rules per
/// class; subject and object roles are assigned at random.
fn derive_pair_rules(cfg: &GenConfig, rng: &mut ChaCha8Rng) -> Vec<PairRule> {
    let c = cfg.num_obj_classes;
    let families = c.div_ceil(2);
    let mut edges: Vec<(usize, usize)> = (0..families)
        .flat_map(|f| (f + 1..families).map(move |g| (f, g)))
        .collect();
    edges.shuffle(rng);
    let mut degree = vec![0usize; c];
    let pick = |family: usize, degree: &[usize], rng: &mut ChaCha8Rng| -> Option<usize> {
        let mut members: Vec<usize> = [2 * family, 2 * family + 1]
            .into_iter()
            .filter(|&k| k < c && degree[k] < cfg.partners_per_class)
            .collect();
        members.shuffle(rng);
        members.sort_by_key(|&k| degree[k]);
        members.first().copied()
    };
    let mut rules = Vec::new();
    for (f, g) in edges {
        let (Some(a), Some(b)) = (pick(f, &degree, rng), pick(g, &degree, rng)) else {
            continue;
        };
        degree[a] += 1;
        degree[b] += 1;
        let (subj_class, obj_class) = if rng.random_bool(0.5) { (a, b) } else { (b, a) };
        rules.push(PairRule {
            subj_class,
            obj_class,
            kind: PairKind::Geometric,
        });
    }

    let semantic = cfg.semantic_predicates();
    let mut order: Vec<usize> = (0..rules.len()).collect();
    order.shuffle(rng);
    let n_geo = if semantic.is_empty() {
        rules.len()
    } else {
        (cfg.geometric_fraction * rules.len() as f64).round() as usize
    };
    for (rank, &idx) in order.iter().enumerate() {
        if rank >= n_geo {
            let predicate = semantic[rng.random_range(0..semantic.len())];
            rules[idx].kind = PairKind::Semantic { predicate };
        }
    }
    rules
}

/// Validated config plus its derived world; reusable across many scenes.
#[derive(Clone, Debug)]
pub struct Generator {
    cfg: GenConfig,
    world: World,
}

impl Generator {
    pub fn new(cfg: GenConfig) -> Result<Self> {
        cfg.validate()?;
        let world = World::new(&cfg);
        Ok(Self { cfg, world })
    }

    pub fn config(&self) -> &GenConfig {
        &self.cfg
    }

    pub fn world(&self) -> &World {
        &self.world
    }

    pub fn scene(&self, seed: u64) -> Scene {
        let cfg = &self.cfg;
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.rng_seed, seed));
        let n = rng.random_range(cfg.min_objects..=cfg.max_objects);

        struct Draft {
            class_id: usize,
            group: usize,
            subject: bool,
        }
        let mut drafts = Vec::with_capacity(n);
        let mut group_rules = Vec::new();
        while drafts.len() + 2 <= n {
            let rule = &self.world.pair_rules[rng.random_range(0..self.world.pair_rules.len())];
            let g = group_rules.len();
            drafts.push(Draft { class_id: rule.subj_class, group: g, subject: true });
            drafts.push(Draft { class_id: rule.obj_class, group: g, subject: false });
            group_rules.push(rule.kind);
        }
        // (subject index, object index) per group, filled after shuffling.
        let mut group_members = vec![(0, 0); group_rules.len()];
        if drafts.len() < n {
            let class_id = rng.random_range(0..cfg.num_obj_classes);
            drafts.push(Draft {
                class_id,
                group: usize::MAX,
                subject: false,
            });
        }
        drafts.shuffle(&mut rng);
        for (idx, d) in drafts.iter().enumerate() {
            if d.group != usize::MAX {
                if d.subject {
                    group_members[d.group].0 = idx;
                } else {
                    group_members[d.group].1 = idx;
                }
            }
        }

        let boxes: Vec<BBox> = (0..n)
            .map(|_| {
                BBox::new(
                    rng.random_range(0.1..0.9),
                    rng.random_range(0.1..0.9),
                    rng.random_range(0.05..0.25),
                    rng.random_range(0.05..0.25),
                )
            })
            .collect();

        let sigma = cfg.feature_noise_sigma;
        let rho = cfg.group_noise_correlation;
        let group_noise: Vec<Vec<f64>> = (0..group_rules.len())
            .map(|_| normal_vec(&mut rng, cfg.roi_dim))
            .collect();

        let c = cfg.num_obj_classes;
        let eta = cfg.label_noise;
        let mut objects = Vec::with_capacity(n);
        for (idx, d) in drafts.iter().enumerate() {
            let own = normal_vec(&mut rng, cfg.roi_dim);
            let shared = if d.group == usize::MAX {
                normal_vec(&mut rng, cfg.roi_dim)
            } else {
                group_noise[d.group].clone()
            };
            let feature = self.world.roi_prototypes[d.class_id]
                .iter()
                .zip(own.iter().zip(&shared))
                .map(|(p, (o, s))| {
                    cfg.feature_scale * (p + sigma * (rho.sqrt() * s + (1.0 - rho).sqrt() * o))
                })
                .collect();

            let detected = if rng.random_bool(eta) {
                sibling(d.class_id, c)
            } else {
                d.class_id
            };
            let raw: Vec<f64> = (0..c).map(|_| Exp1.sample(&mut rng)).collect();
            let total: f64 = raw.iter().sum();
            let mut label_dist: Vec<f64> = raw.iter().map(|r| eta * r / total).collect();
            label_dist[detected] += 1.0 - eta;
            if eta == 0.0 {
                label_dist.iter_mut().for_each(|p| *p = 0.0);
                label_dist[detected] = 1.0;
            }
            objects.push(SceneObject {
                bbox: boxes[idx],
                class_id: d.class_id,
                feature,
                label_dist,
            });
        }

        let mut relations = Vec::new();
        for (g, kind) in group_rules.iter().enumerate() {
            let (subj, obj) = group_members[g];
            let predicate = match kind {
                PairKind::Semantic { predicate } => Some(*predicate),
                PairKind::Geometric => self
                    .world
                    .geometric_predicate(&objects[subj].bbox, &objects[obj].bbox),
            };
            if let Some(predicate) = predicate {
                relations.push(Relation {
                    subj,
                    obj,
                    predicate,
                });
            }
        }
        relations.sort_by_key(|r| (r.subj, r.obj));

        let (h, w, d_img) = (cfg.grid_h, cfg.grid_w, cfg.image_dim);
        let mut grid = vec![0.0; d_img * h * w];
        for o in &objects {
            let row = ((o.bbox.y * h as f64).floor().max(0.0) as usize).min(h - 1);
            let col = ((o.bbox.x * w as f64).floor().max(0.0) as usize).min(w - 1);
            for (ch, v) in self.world.grid_prototypes[o.class_id].iter().enumerate() {
                grid[ch * h * w + row * w + col] += v;
            }
        }
        if cfg.grid_noise_sigma > 0.0 {
            for g in grid.iter_mut() {
                let z: f64 = StandardNormal.sample(&mut rng);
                *g += cfg.grid_noise_sigma * z;
            }
        }

        Scene {
            scene_id: format!("scene-{seed}"),
            objects,
            relations,
            grid: Tensor::new(vec![d_img, h, w], grid).expect("grid shape"),
        }
    }

    /// `count` scenes with seeds derived from `seed`.
    pub fn dataset(&self, count: usize, seed: u64) -> Vec<Scene> {
        (0..count as u64)
            .map(|k| self.scene(mix_seed(seed, k)))
            .collect()
    }
}

/// One scene for `(cfg, seed)`.
pub fn generate_scene(cfg: &GenConfig, seed: u64) -> Result<Scene> {
    Ok(Generator::new(cfg.clone())?.scene(seed))
}

/// Stand-in for the union-region feature of an ordered pair: the mean of
/// the two object features followed by the union box `(x, y, w, h)`.
/// Width is `d_roi + 4`.
pub fn union_feature(scene: &Scene, i: usize, j: usize) -> Result<Vec<f64>> {
    if i == j {
        return Err(Error::Invalid(format!("union_feature needs i != j, got {i}")));
    }
    let n = scene.len();
    if i >= n || j >= n {
        return Err(Error::Invalid(format!("union_feature index out of range for {n} objects")));
    }
    let (a, b) = (&scene.objects[i], &scene.objects[j]);
    let mut out: Vec<f64> = a
        .feature
        .iter()
        .zip(&b.feature)
        .map(|(x, y)| 0.5 * (x + y))
        .collect();
    let u = a.bbox.union(&b.bbox);
    out.extend([u.x, u.y, u.w, u.h]);
    Ok(out)
}

/// Width of [`union_feature`] for a given ROI width.
pub fn union_dim(roi_dim: usize) -> usize {
    roi_dim + 4
}
