use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Upper-triangular fold of a square matrix: entry `(i, j)` with `i < j`
/// is `(R[i,j] + R[j,i]) / 2`; the diagonal and lower triangle are zero.
pub fn fold_symmetric(r: &Tensor) -> Result<Tensor> {
    let n = square(r)?;
    let mut out = Tensor::zeros(&[n, n]);
    for i in 0..n {
        for j in i + 1..n {
            out.data_mut()[i * n + j] = 0.5 * (r.get(i, j) + r.get(j, i));
        }
    }
    Ok(out)
}

fn square(r: &Tensor) -> Result<usize> {
    match r.shape() {
        [n, m] if n == m => Ok(*n),
        s => Err(Error::Invalid(format!("expected a square matrix, got {s:?}"))),
    }
}

/// Mean folded weight over related pairs minus the mean over unrelated
/// pairs, taken over `i < j`. `None` when either set is empty.
#[allow(clippy::needless_range_loop)]
pub fn attention_alignment(r: &Tensor, adjacency: &[Vec<u8>]) -> Result<Option<f64>> {
    let n = square(r)?;
    if adjacency.len() != n || adjacency.iter().any(|row| row.len() != n) {
        return Err(Error::shape("attention_alignment", r.shape(), &[adjacency.len()]));
    }
    let folded = fold_symmetric(r)?;
    let (mut rel, mut n_rel, mut unrel, mut n_unrel) = (0.0, 0usize, 0.0, 0usize);
    for i in 0..n {
        for j in i + 1..n {
            let w = folded.get(i, j);
            if adjacency[i][j] != 0 || adjacency[j][i] != 0 {
                rel += w;
                n_rel += 1;
            } else {
                unrel += w;
                n_unrel += 1;
            }
        }
    }
    if n_rel == 0 || n_unrel == 0 {
        return Ok(None);
    }
    Ok(Some(rel / n_rel as f64 - unrel / n_unrel as f64))
}
