//! Synthetic scenes standing in for detector outputs: boxes, classes,
//! per-object features and label distributions, an image feature grid, and
//! ground-truth predicate triplets.

pub mod dataset;
pub mod generator;
pub mod scene;

pub use dataset::{read_dataset, write_dataset};
pub use generator::{
    generate_scene, union_dim, union_feature, GenConfig, Generator, GeometricRule, Interval,
    PairKind, PairRule, World,
};
pub use scene::{ordered_pairs, BBox, Relation, Scene, SceneObject};
