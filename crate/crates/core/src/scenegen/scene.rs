use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;

/// Axis-aligned box given by its center and extents, in image units.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Self {
        Self { x, y, w, h }
    }

    pub fn is_valid(&self) -> bool {
        self.w > 0.0 && self.h > 0.0 && self.x.is_finite() && self.y.is_finite()
    }

    /// Smallest box covering both.
    pub fn union(&self, other: &BBox) -> BBox {
        let x0 = (self.x - self.w / 2.0).min(other.x - other.w / 2.0);
        let x1 = (self.x + self.w / 2.0).max(other.x + other.w / 2.0);
        let y0 = (self.y - self.h / 2.0).min(other.y - other.h / 2.0);
        let y1 = (self.y + self.h / 2.0).max(other.y + other.h / 2.0);
        BBox::new((x0 + x1) / 2.0, (y0 + y1) / 2.0, x1 - x0, y1 - y0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub class_id: usize,
    pub feature: Vec<f64>,
    /// Simulated detector class distribution.
    pub label_dist: Vec<f64>,
}

/// A directed, labelled edge. Predicate 0 is background and never stored.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Relation {
    pub subj: usize,
    pub obj: usize,
    pub predicate: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub scene_id: String,
    pub objects: Vec<SceneObject>,
    pub relations: Vec<Relation>,
    /// Image feature grid, shape `[d_img, H, W]`.
    pub grid: Tensor,
}

impl Scene {
    pub fn len(&self) -> usize {
        self.objects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.objects.is_empty()
    }

    pub fn classes(&self) -> Vec<usize> {
        self.objects.iter().map(|o| o.class_id).collect()
    }

    pub fn roi_dim(&self) -> usize {
        self.objects.first().map_or(0, |o| o.feature.len())
    }

    pub fn num_obj_classes(&self) -> usize {
        self.objects.first().map_or(0, |o| o.label_dist.len())
    }

    pub fn image_dim(&self) -> usize {
        self.grid.shape()[0]
    }

    /// Ordered pairs `(i, j)`, `i != j`, row-major.
    pub fn pairs(&self) -> Vec<(usize, usize)> {
        ordered_pairs(self.len())
    }

    /// Ground-truth predicate for every ordered pair, background included.
    pub fn pair_labels(&self) -> Vec<usize> {
        let n = self.len();
        let mut dense = vec![0; n * n];
        for r in &self.relations {
            dense[r.subj * n + r.obj] = r.predicate;
        }
        self.pairs().into_iter().map(|(i, j)| dense[i * n + j]).collect()
    }

    /// Undirected binary adjacency: 1 where a relation exists in either
    /// direction.
    pub fn adjacency(&self) -> Vec<Vec<u8>> {
        let n = self.len();
        let mut adj = vec![vec![0u8; n]; n];
        for r in &self.relations {
            adj[r.subj][r.obj] = 1;
            adj[r.obj][r.subj] = 1;
        }
        adj
    }

    /// Multi-hot presence vector of object classes.
    pub fn class_presence(&self, num_classes: usize) -> Vec<f64> {
        let mut m = vec![0.0; num_classes];
        for o in &self.objects {
            m[o.class_id] = 1.0;
        }
        m
    }

    /// Checks every structural invariant. `num_rel_classes`, when known,
    /// bounds predicate ids.
    pub fn validate(&self, num_rel_classes: Option<usize>) -> Result<(), String> {
        let n = self.len();
        if n < 2 {
            return Err(format!("scene has {n} objects, need at least 2"));
        }
        let d_roi = self.roi_dim();
        let c_obj = self.num_obj_classes();
        if d_roi == 0 || c_obj == 0 {
            return Err("empty feature or label distribution".into());
        }
        for (i, o) in self.objects.iter().enumerate() {
            if !o.bbox.is_valid() {
                return Err(format!("object {i}: box extents must be positive"));
            }
            if o.feature.len() != d_roi || o.label_dist.len() != c_obj {
                return Err(format!("object {i}: inconsistent vector lengths"));
            }
            if o.class_id >= c_obj {
                return Err(format!("object {i}: class {} out of range", o.class_id));
            }
            let total: f64 = o.label_dist.iter().sum();
            if (total - 1.0).abs() > 1e-9 || o.label_dist.iter().any(|&p| p < 0.0) {
                return Err(format!("object {i}: label_dist is not a distribution"));
            }
            if o.feature.iter().any(|v| !v.is_finite()) {
                return Err(format!("object {i}: non-finite feature"));
            }
        }
        let mut seen = vec![false; n * n];
        for (k, r) in self.relations.iter().enumerate() {
            if r.subj >= n || r.obj >= n {
                return Err(format!("relation {k}: index out of range"));
            }
            if r.subj == r.obj {
                return Err(format!("relation {k}: subj == obj ({})", r.subj));
            }
            if r.predicate == 0 {
                return Err(format!("relation {k}: predicate 0 is background"));
            }
            if let Some(c_rel) = num_rel_classes {
                if r.predicate >= c_rel {
                    return Err(format!("relation {k}: predicate {} out of range", r.predicate));
                }
            }
            if std::mem::replace(&mut seen[r.subj * n + r.obj], true) {
                return Err(format!(
                    "relation {k}: duplicate pair ({}, {})",
                    r.subj, r.obj
                ));
            }
        }
        if self.grid.shape().len() != 3 {
            return Err(format!("grid must be 3-D, got {:?}", self.grid.shape()));
        }
        Ok(())
    }
}

pub fn ordered_pairs(n: usize) -> Vec<(usize, usize)> {
    let mut pairs = Vec::with_capacity(n * n.saturating_sub(1));
    for i in 0..n {
        for j in 0..n {
            if i != j {
                pairs.push((i, j));
            }
        }
    }
    pairs
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pair_order_is_row_major() {
        assert_eq!(ordered_pairs(2), vec![(0, 1), (1, 0)]);
        assert_eq!(ordered_pairs(3).len(), 6);
        assert_eq!(ordered_pairs(3)[2], (1, 0));
    }

    #[test]
    fn union_box_covers_both() {
        let a = BBox::new(0.0, 0.0, 2.0, 2.0);
        let b = BBox::new(2.0, 2.0, 4.0, 1.0);
        let u = a.union(&b);
        // x spans [-1, 4], y spans [-1, 2.5]
        assert_eq!(u, BBox::new(1.5, 0.75, 5.0, 3.5));
        assert_eq!(b.union(&a), u);
    }
}
