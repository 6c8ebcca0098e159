use crate::error::{Error, Result};
use crate::tape::{Tape, Var};

/// Mean softmax cross-entropy of object logits against class ids.
pub fn obj_cls_loss(tape: &mut Tape, o4: Var, gt_classes: &[usize]) -> Result<Var> {
    tape.cross_entropy(o4, gt_classes)
}

/// Mean softmax cross-entropy over all ordered pairs; background is 0.
pub fn rel_cls_loss(tape: &mut Tape, g2: Var, gt_pair_labels: &[usize]) -> Result<Var> {
    tape.cross_entropy(g2, gt_pair_labels)
}

/// Summed binary cross-entropy of presence probabilities against the 0/1
/// multi-hot set of classes in the scene.
pub fn gce_loss(tape: &mut Tape, presence: Var, gt_presence: &[f64]) -> Result<Var> {
    if gt_presence.iter().any(|&m| m != 0.0 && m != 1.0) {
        return Err(Error::Invalid("gce_loss: presence labels must be 0 or 1".into()));
    }
    tape.binary_cross_entropy(presence, gt_presence)
}

/// `l_obj + λ1·l_rel + λ2·l_gce`; a missing GCE term contributes zero.
pub fn total_loss(
    tape: &mut Tape,
    obj: Var,
    rel: Var,
    gce: Option<Var>,
    lambda_rel: f64,
    lambda_gce: f64,
) -> Result<Var> {
    let rel = tape.scale(rel, lambda_rel);
    let mut total = tape.add(obj, rel)?;
    if let Some(gce) = gce {
        let gce = tape.scale(gce, lambda_gce);
        total = tape.add(total, gce)?;
    }
    Ok(total)
}

/// Scalar form of [`total_loss`].
pub fn combine_losses(obj: f64, rel: f64, gce: f64, lambda_rel: f64, lambda_gce: f64) -> f64 {
    obj + lambda_rel * rel + lambda_gce * gce
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn scalar(tape: &mut Tape, v: f64) -> Var {
        tape.constant(Tensor::scalar(v))
    }

    #[test]
    fn equal_weighting_by_default() {
        let mut tape = Tape::new();
        let (o, r, g) = (scalar(&mut tape, 1.0), scalar(&mut tape, 2.0), scalar(&mut tape, 3.0));
        let t = total_loss(&mut tape, o, r, Some(g), 1.0, 1.0).unwrap();
        assert_eq!(tape.value(t).item(), 6.0);
        let t = total_loss(&mut tape, o, r, Some(g), 1.0, 0.0).unwrap();
        assert_eq!(tape.value(t).item(), 3.0);
        let t = total_loss(&mut tape, o, r, Some(g), 0.0, 0.0).unwrap();
        assert_eq!(tape.value(t).item(), 1.0);
        assert_eq!(combine_losses(1.0, 2.0, 3.0, 1.0, 1.0), 6.0);
    }

    #[test]
    fn uniform_logits_give_log_class_count() {
        let mut tape = Tape::new();
        let o4 = tape.constant(Tensor::zeros(&[4, 10]));
        let l = obj_cls_loss(&mut tape, o4, &[0, 3, 7, 9]).unwrap();
        assert!((tape.value(l).item() - std::f64::consts::LN_10).abs() < 1e-12);
        let g2 = tape.constant(Tensor::zeros(&[6, 6]));
        let l = rel_cls_loss(&mut tape, g2, &[0, 0, 1, 5, 0, 2]).unwrap();
        assert!((tape.value(l).item() - 6f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn peaked_logits_drive_loss_to_zero() {
        let mut tape = Tape::new();
        let mut logits = Tensor::zeros(&[3, 6]);
        for i in 0..3 {
            logits.data_mut()[i * 6] = 60.0;
        }
        let g2 = tape.constant(logits);
        let l = rel_cls_loss(&mut tape, g2, &[0, 0, 0]).unwrap();
        assert!(tape.value(l).item() < 1e-20);
    }

    #[test]
    fn out_of_range_labels_error() {
        let mut tape = Tape::new();
        let o4 = tape.constant(Tensor::zeros(&[2, 3]));
        assert!(obj_cls_loss(&mut tape, o4, &[0, 3]).is_err());
        assert!(rel_cls_loss(&mut tape, o4, &[0]).is_err());
        let m = tape.constant(Tensor::full(&[1, 3], 0.5));
        assert!(gce_loss(&mut tape, m, &[0.0, 0.5, 1.0]).is_err());
    }

    #[test]
    fn gce_exact_and_half() {
        let mut tape = Tape::new();
        let m = tape.constant(Tensor::row_vector(&[1.0, 0.0, 0.0, 1.0]));
        let l = gce_loss(&mut tape, m, &[1.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(tape.value(l).item(), 0.0);
        let m = tape.constant(Tensor::full(&[1, 10], 0.5));
        let gt = [1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0];
        let l = gce_loss(&mut tape, m, &gt).unwrap();
        assert!((tape.value(l).item() - 10.0 * 2f64.ln()).abs() < 1e-12);
    }
}
