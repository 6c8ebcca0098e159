use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::gradcheck::{compare_gradients, numerical_gradient, GradCheckReport};
use crate::model::config::ModelConfig;
use crate::model::graph::{
    build_o0, edge_stage, global_context_encode, object_stage, relation_head,
};
use crate::model::loss::{gce_loss, obj_cls_loss, rel_cls_loss, total_loss};
use crate::model::params::{BoundParams, ModelParams};
use crate::scenegen::Scene;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Every node of one forward pass, as handles on the tape that built it.
#[derive(Clone, Debug)]
pub struct GraphVars {
    pub context: Var,
    pub presence: Option<Var>,
    pub o0: Var,
    pub o1: Option<Var>,
    pub o2: Var,
    pub o3: Var,
    pub o4: Var,
    pub object_attention: Vec<Var>,
    pub e0: Var,
    pub e1: Var,
    pub edge_attention: Vec<Var>,
    pub g0: Var,
    pub g1: Var,
    pub g2: Var,
    pub layouts: Vec<[f64; 4]>,
    pub obj_loss: Var,
    pub rel_loss: Var,
    pub gce_loss: Option<Var>,
    pub total_loss: Var,
}

/// Checks that a scene fits the model's input widths and label ranges.
pub fn check_scene(scene: &Scene, cfg: &ModelConfig) -> Result<()> {
    scene
        .validate(Some(cfg.num_rel_classes))
        .map_err(|e| Error::Mismatch(format!("scene {}: {e}", scene.scene_id)))?;
    let checks = [
        ("num_obj_classes", scene.num_obj_classes(), cfg.num_obj_classes),
        ("roi_dim", scene.roi_dim(), cfg.roi_dim),
        ("image_dim", scene.image_dim(), cfg.image_dim),
    ];
    for (field, data, model) in checks {
        if data != model {
            return Err(Error::Mismatch(format!(
                "scene {} has {field} = {data}, model expects {model}",
                scene.scene_id
            )));
        }
    }
    Ok(())
}

/// Records the full model and its losses on `tape`.
pub fn build_graph(
    tape: &mut Tape,
    scene: &Scene,
    params: &BoundParams,
    cfg: &ModelConfig,
) -> Result<GraphVars> {
    check_scene(scene, cfg)?;
    let (context, presence) = if cfg.enable_gce {
        let (c, m) = global_context_encode(tape, &scene.grid, params)?;
        (c, Some(m))
    } else {
        (tape.constant(Tensor::zeros(&[1, cfg.context_dim])), None)
    };
    let o0 = build_o0(tape, scene, context, params.var("k0"))?;
    let obj = object_stage(tape, o0, params, cfg)?;
    let edge = edge_stage(tape, obj.o4, obj.o3, params, cfg)?;
    let head = relation_head(tape, edge.e1, scene, params, cfg)?;

    let obj_loss = obj_cls_loss(tape, obj.o4, &scene.classes())?;
    let rel_loss = rel_cls_loss(tape, head.g2, &scene.pair_labels())?;
    let gce = match presence {
        Some(m) => Some(gce_loss(tape, m, &scene.class_presence(cfg.num_obj_classes))?),
        None => None,
    };
    let total = total_loss(tape, obj_loss, rel_loss, gce, cfg.lambda_rel, cfg.lambda_gce)?;

    Ok(GraphVars {
        context,
        presence,
        o0,
        o1: obj.o1,
        o2: obj.o2,
        o3: obj.o3,
        o4: obj.o4,
        object_attention: obj.attention,
        e0: edge.e0,
        e1: edge.e1,
        edge_attention: edge.attention,
        g0: head.g0,
        g1: head.g1,
        g2: head.g2,
        layouts: head.layouts,
        obj_loss,
        rel_loss,
        gce_loss: gce,
        total_loss: total,
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossTerms {
    pub obj: f64,
    pub rel: f64,
    /// Zero when the global context module is disabled.
    pub gce: f64,
    pub total: f64,
}

impl LossTerms {
    fn read(tape: &Tape, g: &GraphVars) -> Self {
        Self {
            obj: tape.value(g.obj_loss).item(),
            rel: tape.value(g.rel_loss).item(),
            gce: g.gce_loss.map_or(0.0, |v| tape.value(v).item()),
            total: tape.value(g.total_loss).item(),
        }
    }

    /// Name of the first non-finite term, if any.
    pub fn non_finite_term(&self) -> Option<&'static str> {
        [("obj", self.obj), ("rel", self.rel), ("gce", self.gce), ("total", self.total)]
            .into_iter()
            .find(|(_, v)| !v.is_finite())
            .map(|(n, _)| n)
    }
}

/// Values of every named intermediate of one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelOutput {
    /// Global context `c`, `[1 × d_ctx]`; zeros when GCE is off.
    pub context: Tensor,
    /// Multi-label presence probabilities `M̂`, when GCE is on.
    pub presence: Option<Tensor>,
    pub o0: Tensor,
    pub o1: Option<Tensor>,
    pub o2: Tensor,
    pub o3: Tensor,
    pub o4: Tensor,
    /// One `N × N` matrix per object-stage REM.
    pub object_attention: Vec<Tensor>,
    pub e0: Tensor,
    pub e1: Tensor,
    pub edge_attention: Vec<Tensor>,
    pub g0: Tensor,
    pub g1: Tensor,
    /// Predicate logits, one row per ordered pair.
    pub g2: Tensor,
    pub pairs: Vec<(usize, usize)>,
    pub layouts: Vec<[f64; 4]>,
    pub losses: LossTerms,
}

impl ModelOutput {
    /// All REM matrices, object stage first.
    pub fn attention(&self) -> impl Iterator<Item = &Tensor> {
        self.object_attention.iter().chain(&self.edge_attention)
    }
}

pub fn forward(scene: &Scene, params: &ModelParams) -> Result<ModelOutput> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, false);
    let g = build_graph(&mut tape, scene, &bound, &params.config)?;
    let val = |v: Var| tape.value(v).clone();
    Ok(ModelOutput {
        context: val(g.context),
        presence: g.presence.map(val),
        o0: val(g.o0),
        o1: g.o1.map(val),
        o2: val(g.o2),
        o3: val(g.o3),
        o4: val(g.o4),
        object_attention: g.object_attention.iter().map(|&v| val(v)).collect(),
        e0: val(g.e0),
        e1: val(g.e1),
        edge_attention: g.edge_attention.iter().map(|&v| val(v)).collect(),
        g0: val(g.g0),
        g1: val(g.g1),
        g2: val(g.g2),
        pairs: scene.pairs(),
        layouts: g.layouts.clone(),
        losses: LossTerms::read(&tape, &g),
    })
}

pub type Gradients = BTreeMap<String, Tensor>;

/// Loss terms and the gradient of the total loss for every parameter.
pub fn loss_and_gradients(scene: &Scene, params: &ModelParams) -> Result<(LossTerms, Gradients)> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, true);
    let g = build_graph(&mut tape, scene, &bound, &params.config)?;
    let terms = LossTerms::read(&tape, &g);
    if let Some(term) = terms.non_finite_term() {
        return Err(Error::NonFinite(format!(
            "{term} loss on scene {}",
            scene.scene_id
        )));
    }
    tape.backward(g.total_loss)?;
    let grads = bound
        .iter()
        .map(|(name, &v)| (name.clone(), tape.grad(v).cloned().expect("trainable")))
        .collect();
    Ok((terms, grads))
}

/// Compares reverse-mode gradients of the total loss with central finite
/// differences over every parameter coordinate. Returns the report and the
/// name of the parameter holding the worst coordinate.
pub fn check_model_gradients(
    scene: &Scene,
    params: &ModelParams,
    eps: f64,
) -> Result<(GradCheckReport, String)> {
    let (_, analytic) = loss_and_gradients(scene, params)?;
    let names: Vec<String> = params.names().cloned().collect();
    let values: Vec<Tensor> = params.iter().map(|(_, t)| t.clone()).collect();
    let analytic: Vec<Tensor> = names.iter().map(|n| analytic[n].clone()).collect();
    let f = model_loss_fn(scene, &params.config, &names);
    let numeric = numerical_gradient(&f, &values, eps)?;
    let report = compare_gradients(&analytic, &numeric);
    let worst = names[report.worst_param].clone();
    Ok((report, worst))
}

/// The total loss as a function of parameter handles given in `names`
/// order, for use with the finite-difference oracle.
pub fn model_loss_fn<'a>(
    scene: &'a Scene,
    cfg: &'a ModelConfig,
    names: &'a [String],
) -> impl Fn(&mut Tape, &[Var]) -> Result<Var> + 'a {
    move |tape: &mut Tape, vars: &[Var]| {
        let bound = BoundParams::from_vars(names.iter().cloned().zip(vars.iter().copied()).collect());
        Ok(build_graph(tape, scene, &bound, cfg)?.total_loss)
    }
}
