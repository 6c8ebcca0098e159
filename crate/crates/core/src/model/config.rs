use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scenegen::union_dim;

/// Row normalization applied to the similarity matrix inside a REM.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RowOp {
    #[default]
    Softmax,
    Sigmoid,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Similarity {
    /// `(XW)(XU)ᵀ`
    #[default]
    Dot,
    /// `−‖(XW)ᵢ − (XU)ⱼ‖²`
    Euclidean,
}

/// Which branches feed the edge stage input `E0`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EdgeInput {
    /// One-hot argmax of the object logits embedded by `K1`, then `O3`.
    #[default]
    Both,
    ArgmaxOnly,
    ContextOnly,
}

fn d_classes() -> usize {
    10
}
fn d_rel() -> usize {
    6
}
fn d_roi() -> usize {
    32
}
fn d_img() -> usize {
    16
}
fn d_label() -> usize {
    16
}
fn d_ctx() -> usize {
    16
}
fn d_obj() -> usize {
    32
}
fn d_edge() -> usize {
    32
}
fn d_geo() -> usize {
    8
}
fn d_ratio() -> usize {
    2
}
fn d_rem() -> usize {
    2
}
fn d_true() -> bool {
    true
}
fn d_one() -> f64 {
    1.0
}

/// Model hyper-parameters. Every field has a desk-scale default, so `{}`
/// is a complete config.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default = "d_classes")]
    pub num_obj_classes: usize,
    /// Predicate classes including background.
    #[serde(default = "d_rel")]
    pub num_rel_classes: usize,
    #[serde(default = "d_roi")]
    pub roi_dim: usize,
    #[serde(default = "d_img")]
    pub image_dim: usize,
    #[serde(default = "d_label")]
    pub label_embed_dim: usize,
    #[serde(default = "d_ctx")]
    pub context_dim: usize,
    /// Width of `O2`/`O3`.
    #[serde(default = "d_obj")]
    pub object_dim: usize,
    /// Width of each half (subject, object) of `E1`.
    #[serde(default = "d_edge")]
    pub edge_dim: usize,
    #[serde(default = "d_geo")]
    pub geo_dim: usize,
    #[serde(default = "d_ratio")]
    pub reduction_ratio: usize,
    /// REM blocks per stage. Zero gives the degenerate fc-only model.
    #[serde(default = "d_rem")]
    pub rem_count: usize,
    #[serde(default)]
    pub row_op: RowOp,
    #[serde(default)]
    pub similarity: Similarity,
    #[serde(default = "d_true")]
    pub enable_glem: bool,
    #[serde(default = "d_true")]
    pub enable_gce: bool,
    #[serde(default)]
    pub edge_input: EdgeInput,
    #[serde(default = "d_one")]
    pub lambda_rel: f64,
    #[serde(default = "d_one")]
    pub lambda_gce: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults deserialize")
    }
}

pub const MAX_REM_COUNT: usize = 4;

impl ModelConfig {
    /// Widths used in the original detector-backed setting: 4096-d ROI
    /// features, 200-d label embeddings, 512-d context, 256-d object
    /// features, 4096-d edge halves and 128-d layout embeddings.
    pub fn detector_scale(num_obj_classes: usize, num_rel_classes: usize) -> Self {
        Self {
            num_obj_classes,
            num_rel_classes,
            roi_dim: 4096,
            image_dim: 512,
            label_embed_dim: 200,
            context_dim: 512,
            object_dim: 256,
            edge_dim: 4096,
            geo_dim: 128,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (field, v) in [
            ("num_obj_classes", self.num_obj_classes),
            ("roi_dim", self.roi_dim),
            ("image_dim", self.image_dim),
            ("label_embed_dim", self.label_embed_dim),
            ("context_dim", self.context_dim),
            ("object_dim", self.object_dim),
            ("edge_dim", self.edge_dim),
            ("geo_dim", self.geo_dim),
            ("reduction_ratio", self.reduction_ratio),
        ] {
            if v == 0 {
                return Err(Error::config(field, "must be positive"));
            }
        }
        if self.num_rel_classes < 2 {
            return Err(Error::config(
                "num_rel_classes",
                "need background plus at least one predicate (>= 2)",
            ));
        }
        if self.rem_count > MAX_REM_COUNT {
            return Err(Error::config(
                "rem_count",
                format!("must be at most {MAX_REM_COUNT}"),
            ));
        }
        for (field, v) in [("lambda_rel", self.lambda_rel), ("lambda_gce", self.lambda_gce)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(field, "must be finite and >= 0"));
            }
        }
        Ok(())
    }

    /// Width of `O0`: ROI feature, label embedding, global context.
    pub fn object_input_dim(&self) -> usize {
        self.roi_dim + self.label_embed_dim + self.context_dim
    }

    /// Width of `E0` for the configured branches.
    pub fn edge_input_dim(&self) -> usize {
        match self.edge_input {
            EdgeInput::Both => self.label_embed_dim + self.object_dim,
            EdgeInput::ArgmaxOnly => self.label_embed_dim,
            EdgeInput::ContextOnly => self.object_dim,
        }
    }

    pub fn union_dim(&self) -> usize {
        union_dim(self.roi_dim)
    }

    /// Width of the W/U/H projections for a block of width `d`.
    pub fn projected_dim(&self, d: usize) -> usize {
        d.div_ceil(self.reduction_ratio)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_is_two_rems_ratio_two() {
        let cfg = ModelConfig::default();
        assert_eq!((cfg.rem_count, cfg.reduction_ratio), (2, 2));
        assert_eq!((cfg.lambda_rel, cfg.lambda_gce), (1.0, 1.0));
        assert!(cfg.enable_gce && cfg.enable_glem);
        cfg.validate().unwrap();
    }

    #[test]
    fn projection_rounds_up() {
        let cfg = ModelConfig {
            reduction_ratio: 4,
            ..ModelConfig::default()
        };
        assert_eq!(cfg.projected_dim(64), 16);
        assert_eq!(cfg.projected_dim(10), 3);
        let full = ModelConfig::detector_scale(150, 51);
        assert_eq!(full.object_input_dim(), 4808);
        assert_eq!(full.projected_dim(4808), 2404);
        assert_eq!(full.edge_input_dim(), 456);
    }

    #[test]
    fn rejects_out_of_range_fields() {
        let bad = ModelConfig {
            rem_count: 5,
            ..ModelConfig::default()
        };
        assert!(bad.validate().unwrap_err().to_string().contains("rem_count"));
        let bad = ModelConfig {
            reduction_ratio: 0,
            ..ModelConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn json_fields_are_snake_case() {
        let cfg: ModelConfig =
            serde_json::from_str(r#"{"row_op":"sigmoid","similarity":"euclidean","edge_input":"argmax_only"}"#)
                .unwrap();
        assert_eq!(cfg.row_op, RowOp::Sigmoid);
        assert_eq!(cfg.similarity, Similarity::Euclidean);
        assert_eq!(cfg.edge_input, EdgeInput::ArgmaxOnly);
    }
}
