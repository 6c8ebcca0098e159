use crate::error::{Error, Result};
use crate::scenegen::BBox;

/// Relative location and log-scale of `obj` with respect to `subj`:
/// `((x_o − x_s)/w_s, (y_o − y_s)/h_s, ln(w_o/w_s), ln(h_o/h_s))`.
pub fn geometric_layout(subj: &BBox, obj: &BBox) -> Result<[f64; 4]> {
    if !(subj.w > 0.0 && subj.h > 0.0 && obj.w > 0.0 && obj.h > 0.0) {
        return Err(Error::Invalid(format!(
            "box extents must be positive: subj {subj:?}, obj {obj:?}"
        )));
    }
    Ok([
        (obj.x - subj.x) / subj.w,
        (obj.y - subj.y) / subj.h,
        (obj.w / subj.w).ln(),
        (obj.h / subj.h).ln(),
    ])
}
