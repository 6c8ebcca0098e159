//! Named parameter tensors.
//!
//! Names are dotted paths, e.g. `obj.rem0.w` or `fc4.b`. The set of names
//! and their shapes is a pure function of [`ModelConfig`]; see [`layout`].

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::model::config::ModelConfig;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub kind: ParamKind,
}

fn push_fc(out: &mut Vec<ParamSpec>, prefix: &str, d_in: usize, d_out: usize) {
    out.push(ParamSpec {
        name: format!("{prefix}.w"),
        shape: vec![d_in, d_out],
        kind: ParamKind::Weight,
    });
    out.push(ParamSpec {
        name: format!("{prefix}.b"),
        shape: vec![1, d_out],
        kind: ParamKind::Bias,
    });
}

fn push_matrix(out: &mut Vec<ParamSpec>, name: String, rows: usize, cols: usize) {
    out.push(ParamSpec {
        name,
        shape: vec![rows, cols],
        kind: ParamKind::Weight,
    });
}

fn push_rem(out: &mut Vec<ParamSpec>, cfg: &ModelConfig, prefix: &str, d: usize) {
    let p = cfg.projected_dim(d);
    for m in ["w", "u", "h"] {
        push_matrix(out, format!("{prefix}.{m}"), d, p);
    }
    push_fc(out, &format!("{prefix}.fc"), p, d);
}

/// Every parameter the model with this config owns, in name order.
pub fn layout(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let c_obj = cfg.num_obj_classes;
    let d0 = cfg.object_input_dim();
    let e0 = cfg.edge_input_dim();
    let mut out = Vec::new();

    push_matrix(&mut out, "k0".into(), c_obj, cfg.label_embed_dim);
    push_fc(&mut out, "gce.ctx", cfg.image_dim, cfg.context_dim);
    push_fc(&mut out, "gce.head", cfg.context_dim, c_obj);

    for k in 0..cfg.rem_count {
        let width = if k == 0 { d0 } else { cfg.object_dim };
        push_rem(&mut out, cfg, &format!("obj.rem{k}"), width);
    }
    push_fc(&mut out, "obj.fc1", d0, cfg.object_dim);
    push_fc(&mut out, "obj.fc3", cfg.object_dim, c_obj);

    push_matrix(&mut out, "k1".into(), c_obj, cfg.label_embed_dim);
    for k in 0..cfg.rem_count {
        push_rem(&mut out, cfg, &format!("edge.rem{k}"), e0);
    }
    push_fc(&mut out, "edge.fc", e0, 2 * cfg.edge_dim);
    push_fc(&mut out, "union", cfg.union_dim(), cfg.edge_dim);
    push_matrix(&mut out, "k2".into(), 4, cfg.geo_dim);
    push_fc(&mut out, "fc4", cfg.edge_dim + cfg.geo_dim, cfg.num_rel_classes);

    out.sort_by(|a, b| a.name.cmp(&b.name));
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    tensors: BTreeMap<String, Tensor>,
}

impl ModelParams {
    /// Checks that `tensors` holds exactly the names and shapes `config`
    /// calls for, and that every value is finite.
    pub fn new(config: ModelConfig, tensors: BTreeMap<String, Tensor>) -> Result<Self> {
        config.validate()?;
        let specs = layout(&config);
        for spec in &specs {
            let t = tensors
                .get(&spec.name)
                .ok_or_else(|| Error::MissingTensor(spec.name.clone()))?;
            if t.shape() != spec.shape.as_slice() {
                return Err(Error::TensorShape {
                    name: spec.name.clone(),
                    found: t.shape().to_vec(),
                    expected: spec.shape.clone(),
                });
            }
            if !t.is_finite() {
                return Err(Error::NonFinite(format!("parameter `{}`", spec.name)));
            }
        }
        if tensors.len() != specs.len() {
            let extra = tensors
                .keys()
                .find(|k| !specs.iter().any(|s| &s.name == *k))
                .cloned()
                .unwrap_or_default();
            return Err(Error::Invalid(format!("unexpected tensor `{extra}`")));
        }
        Ok(Self { config, tensors })
    }

    pub fn zeros(config: ModelConfig) -> Result<Self> {
        let tensors = layout(&config)
            .into_iter()
            .map(|s| (s.name, Tensor::zeros(&s.shape)))
            .collect();
        Self::new(config, tensors)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    /// Mutable access for optimizers and tests. Shapes must not change.
    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn into_tensors(self) -> BTreeMap<String, Tensor> {
        self.tensors
    }

    /// Records every tensor on `tape` as a trainable leaf (or as a constant
    /// when `trainable` is false).
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundParams {
        let vars = self
            .tensors
            .iter()
            .map(|(name, t)| (name.clone(), tape.leaf(t.clone(), trainable)))
            .collect();
        BoundParams { vars }
    }
}

/// Parameter handles on one tape.
#[derive(Clone, Debug)]
pub struct BoundParams {
    vars: BTreeMap<String, Var>,
}

impl BoundParams {
    pub fn from_vars(vars: BTreeMap<String, Var>) -> Self {
        Self { vars }
    }

    /// Panics on unknown names; [`ModelParams::new`] guarantees the layout.
    pub fn var(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("no parameter named `{name}`"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_names_are_unique_and_sorted() {
        for rem_count in 0..=4 {
            let cfg = ModelConfig {
                rem_count,
                ..ModelConfig::default()
            };
            let specs = layout(&cfg);
            for w in specs.windows(2) {
                assert!(w[0].name < w[1].name);
            }
            let rems = specs.iter().filter(|s| s.name.ends_with(".u")).count();
            assert_eq!(rems, 2 * rem_count);
        }
    }

    #[test]
    fn default_shapes() {
        let specs = layout(&ModelConfig::default());
        let shape = |n: &str| specs.iter().find(|s| s.name == n).unwrap().shape.clone();
        assert_eq!(shape("obj.rem0.w"), vec![64, 32]);
        assert_eq!(shape("obj.rem0.fc.w"), vec![32, 64]);
        assert_eq!(shape("obj.rem1.u"), vec![32, 16]);
        assert_eq!(shape("edge.rem0.h"), vec![48, 24]);
        assert_eq!(shape("edge.fc.w"), vec![48, 64]);
        assert_eq!(shape("union.w"), vec![36, 32]);
        assert_eq!(shape("k2"), vec![4, 8]);
        assert_eq!(shape("fc4.w"), vec![40, 6]);
    }

    #[test]
    fn new_reports_missing_and_misshapen_tensors() {
        let cfg = ModelConfig::default();
        let mut tensors = ModelParams::zeros(cfg.clone()).unwrap().into_tensors();
        tensors.insert("k2".into(), Tensor::zeros(&[3, 8]));
        match ModelParams::new(cfg.clone(), tensors.clone()) {
            Err(Error::TensorShape { name, .. }) => assert_eq!(name, "k2"),
            other => panic!("{other:?}"),
        }
        tensors.remove("k2");
        assert!(matches!(
            ModelParams::new(cfg, tensors),
            Err(Error::MissingTensor(n)) if n == "k2"
        ));
    }
}
