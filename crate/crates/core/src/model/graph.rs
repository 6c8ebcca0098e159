//! The forward computation, stage by stage.
//!
//! Conventions shared by every stage:
//! - `fc` blocks are affine (`xW + b`) followed by ReLU, except the logit
//!   layers `obj.fc3` and `fc4`.
//! - The REM projections `W`, `U`, `H` and the embeddings `K0`, `K1`, `K2`
//!   are bare linear maps.
//! - The argmax one-hot in the edge stage is recorded as a constant, so no
//!   gradient flows back through it.

use crate::error::{Error, Result};
use crate::model::config::{EdgeInput, ModelConfig, RowOp, Similarity};
use crate::model::layout::geometric_layout;
use crate::model::params::BoundParams;
use crate::scenegen::{union_feature, Scene};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// `x · W + b` for the `{prefix}.w` / `{prefix}.b` pair.
pub fn affine(tape: &mut Tape, x: Var, params: &BoundParams, prefix: &str) -> Result<Var> {
    let y = tape.matmul(x, params.var(&format!("{prefix}.w")))?;
    tape.add_row_bias(y, params.var(&format!("{prefix}.b")))
}

fn fc_relu(tape: &mut Tape, x: Var, params: &BoundParams, prefix: &str) -> Result<Var> {
    let y = affine(tape, x, params, prefix)?;
    Ok(tape.relu(y))
}

#[derive(Clone, Copy, Debug)]
pub struct RemOutput {
    /// Row-normalized `N × N` relational embedding matrix.
    pub attention: Var,
    pub output: Var,
}

/// One relational embedding block:
///
/// ```text
/// S   = (X W)(X U)ᵀ          or  S[i,j] = −‖(XW)ᵢ − (XU)ⱼ‖²
/// R   = row_op(S)
/// out = X + relu(fc(R (X H)))
/// ```
pub fn relational_embedding(
    tape: &mut Tape,
    x: Var,
    params: &BoundParams,
    prefix: &str,
    row_op: RowOp,
    similarity: Similarity,
) -> Result<RemOutput> {
    let q = tape.matmul(x, params.var(&format!("{prefix}.w")))?;
    let k = tape.matmul(x, params.var(&format!("{prefix}.u")))?;
    let v = tape.matmul(x, params.var(&format!("{prefix}.h")))?;
    let scores = match similarity {
        Similarity::Dot => tape.matmul_t(q, k)?,
        Similarity::Euclidean => tape.neg_sq_dist(q, k)?,
    };
    let attention = match row_op {
        RowOp::Softmax => tape.row_softmax(scores),
        RowOp::Sigmoid => tape.sigmoid(scores),
    };
    let mixed = tape.matmul(attention, v)?;
    let lifted = fc_relu(tape, mixed, params, &format!("{prefix}.fc"))?;
    let output = tape.add(x, lifted)?;
    Ok(RemOutput { attention, output })
}

/// Global average pool of the `[d_img, H, W]` grid, then `c = pooled·W + b`
/// and the presence head `M̂ = σ(c·W' + b')`. Returns `(c, M̂)`, both as
/// row vectors.
pub fn global_context_encode(
    tape: &mut Tape,
    grid: &Tensor,
    params: &BoundParams,
) -> Result<(Var, Var)> {
    let shape = grid.shape();
    if shape.len() != 3 {
        return Err(Error::Invalid(format!("grid must be 3-D, got {shape:?}")));
    }
    let g = tape.constant(grid.reshape(&[shape[0], shape[1] * shape[2]])?);
    let pooled = tape.mean_cols(g);
    let pooled = tape.transpose(pooled);
    let c = affine(tape, pooled, params, "gce.ctx")?;
    let logits = affine(tape, c, params, "gce.head")?;
    let presence = tape.sigmoid(logits);
    Ok((c, presence))
}

/// `O0`: row `i` is `(feature_i, l_i · K0, c)`, the same `c` on every row.
pub fn build_o0(tape: &mut Tape, scene: &Scene, context: Var, k0: Var) -> Result<Var> {
    let features: Vec<&[f64]> = scene.objects.iter().map(|o| o.feature.as_slice()).collect();
    let labels: Vec<&[f64]> = scene.objects.iter().map(|o| o.label_dist.as_slice()).collect();
    let f = tape.constant(Tensor::from_rows(&features));
    let l = tape.constant(Tensor::from_rows(&labels));
    let embedded = tape.matmul(l, k0)?;
    let ctx = tape.gather_rows(context, &vec![0; scene.len()])?;
    tape.concat_cols(&[f, embedded, ctx])
}

#[derive(Clone, Debug)]
pub struct ObjectStage {
    pub o1: Option<Var>,
    pub o2: Var,
    pub o3: Var,
    pub o4: Var,
    pub attention: Vec<Var>,
}

/// REM at the input width, `fc1` down to `object_dim`, then the remaining
/// REMs at `object_dim` and the logit layer `fc3`.
pub fn object_stage(
    tape: &mut Tape,
    o0: Var,
    params: &BoundParams,
    cfg: &ModelConfig,
) -> Result<ObjectStage> {
    let mut attention = Vec::with_capacity(cfg.rem_count);
    let mut o1 = None;
    let mut x = o0;
    if cfg.rem_count > 0 {
        let rem = relational_embedding(tape, x, params, "obj.rem0", cfg.row_op, cfg.similarity)?;
        attention.push(rem.attention);
        o1 = Some(rem.output);
        x = rem.output;
    }
    let o2 = fc_relu(tape, x, params, "obj.fc1")?;
    x = o2;
    for k in 1..cfg.rem_count {
        let prefix = format!("obj.rem{k}");
        let rem = relational_embedding(tape, x, params, &prefix, cfg.row_op, cfg.similarity)?;
        attention.push(rem.attention);
        x = rem.output;
    }
    let o3 = x;
    let o4 = affine(tape, o3, params, "obj.fc3")?;
    Ok(ObjectStage {
        o1,
        o2,
        o3,
        o4,
        attention,
    })
}

#[derive(Clone, Debug)]
pub struct EdgeStage {
    pub e0: Var,
    pub e1: Var,
    pub attention: Vec<Var>,
}

/// `E0 = (onehot(argmax O4) · K1, O3)`, REM blocks at the `E0` width, and an
/// fc lift to `E1 = [subject half | object half]`.
pub fn edge_stage(
    tape: &mut Tape,
    o4: Var,
    o3: Var,
    params: &BoundParams,
    cfg: &ModelConfig,
) -> Result<EdgeStage> {
    let mut parts = Vec::with_capacity(2);
    if cfg.edge_input != EdgeInput::ContextOnly {
        let logits = tape.value(o4);
        let one_hot = Tensor::one_hot(&logits.argmax_rows(), logits.cols());
        let one_hot = tape.constant(one_hot);
        parts.push(tape.matmul(one_hot, params.var("k1"))?);
    }
    if cfg.edge_input != EdgeInput::ArgmaxOnly {
        parts.push(o3);
    }
    let e0 = tape.concat_cols(&parts)?;
    let mut x = e0;
    let mut attention = Vec::with_capacity(cfg.rem_count);
    for k in 0..cfg.rem_count {
        let prefix = format!("edge.rem{k}");
        let rem = relational_embedding(tape, x, params, &prefix, cfg.row_op, cfg.similarity)?;
        attention.push(rem.attention);
        x = rem.output;
    }
    let e1 = fc_relu(tape, x, params, "edge.fc")?;
    Ok(EdgeStage { e0, e1, attention })
}

#[derive(Clone, Debug)]
pub struct RelationHead {
    pub g0: Var,
    pub g1: Var,
    pub g2: Var,
    /// Subject-relative layout `b_{o|s}` per ordered pair.
    pub layouts: Vec<[f64; 4]>,
}

/// Per ordered pair `(i, j)`, row-major with `i != j`:
///
/// ```text
/// G0 = E1_subj[i] ⊙ E1_obj[j] ⊙ relu(F_ij · W_F + b_F)
/// G1 = (G0, b_{o|s} · K2)      geo block zero when GLEM is off
/// G2 = G1 · W4 + b4            predicate logits
/// ```
pub fn relation_head(
    tape: &mut Tape,
    e1: Var,
    scene: &Scene,
    params: &BoundParams,
    cfg: &ModelConfig,
) -> Result<RelationHead> {
    let n = scene.len();
    if n < 2 {
        return Err(Error::Invalid(format!("relation head needs at least 2 objects, got {n}")));
    }
    let pairs = scene.pairs();
    let subj_idx: Vec<usize> = pairs.iter().map(|p| p.0).collect();
    let obj_idx: Vec<usize> = pairs.iter().map(|p| p.1).collect();
    let d = cfg.edge_dim;

    let subj_half = tape.slice_cols(e1, 0, d)?;
    let obj_half = tape.slice_cols(e1, d, 2 * d)?;
    let subj = tape.gather_rows(subj_half, &subj_idx)?;
    let obj = tape.gather_rows(obj_half, &obj_idx)?;

    let unions = pairs
        .iter()
        .map(|&(i, j)| union_feature(scene, i, j))
        .collect::<Result<Vec<_>>>()?;
    let f = tape.constant(Tensor::from_rows(&unions));
    let f = fc_relu(tape, f, params, "union")?;

    let so = tape.mul(subj, obj)?;
    let g0 = tape.mul(so, f)?;

    let layouts = pairs
        .iter()
        .map(|&(i, j)| geometric_layout(&scene.objects[i].bbox, &scene.objects[j].bbox))
        .collect::<Result<Vec<_>>>()?;
    let geo = if cfg.enable_glem {
        let b = tape.constant(Tensor::from_rows(&layouts));
        tape.matmul(b, params.var("k2"))?
    } else {
        tape.constant(Tensor::zeros(&[pairs.len(), cfg.geo_dim]))
    };
    let g1 = tape.concat_cols(&[g0, geo])?;
    let g2 = affine(tape, g1, params, "fc4")?;
    Ok(RelationHead {
        g0,
        g1,
        g2,
        layouts,
    })
}
