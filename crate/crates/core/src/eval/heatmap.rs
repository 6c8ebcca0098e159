use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::train::checkpoint::write_atomic;

/// Row-major 8-bit gray levels, min-max scaled to `0..=255`. A matrix with
/// zero range maps to all zeros.
pub fn gray_levels(m: &Tensor) -> Result<Vec<u8>> {
    if !m.is_finite() {
        return Err(Error::NonFinite("heatmap input".into()));
    }
    let lo = m.data().iter().copied().fold(f64::INFINITY, f64::min);
    let hi = m.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = hi - lo;
    Ok(m
        .data()
        .iter()
        .map(|&v| {
            if range > 0.0 {
                ((v - lo) / range * 255.0).round() as u8
            } else {
                0
            }
        })
        .collect())
}

/// Binary PGM (`P5`) bytes for a 2-D matrix.
pub fn to_pgm(m: &Tensor) -> Result<Vec<u8>> {
    let [rows, cols] = *m.shape() else {
        return Err(Error::Invalid(format!("heatmap needs a 2-D matrix, got {:?}", m.shape())));
    };
    let mut out = format!("P5\n{cols} {rows}\n255\n").into_bytes();
    out.extend(gray_levels(m)?);
    Ok(out)
}

/// Comma-separated rows; values print in shortest round-trip form.
pub fn to_csv(m: &Tensor) -> String {
    let mut s = String::new();
    for i in 0..m.rows() {
        let row: Vec<String> = m.row(i).iter().map(|v| v.to_string()).collect();
        let _ = writeln!(s, "{}", row.join(","));
    }
    s
}

pub fn parse_csv(text: &str) -> Result<Tensor> {
    let rows = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            l.split(',')
                .map(|v| v.trim().parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::Invalid(format!("bad matrix CSV: {e}")))
        })
        .collect::<Result<Vec<_>>>()?;
    if rows.iter().any(|r| r.len() != rows[0].len()) {
        return Err(Error::Invalid("ragged matrix CSV".into()));
    }
    Ok(Tensor::from_rows(&rows))
}

/// Writes `{stem}.csv` and `{stem}.pgm`, returning both paths.
pub fn export_heatmap(m: &Tensor, stem: &Path) -> Result<(PathBuf, PathBuf)> {
    let csv = stem.with_extension("csv");
    let pgm = stem.with_extension("pgm");
    let image = to_pgm(m)?;
    write_atomic(&csv, to_csv(m).as_bytes())?;
    write_atomic(&pgm, &image)?;
    Ok((csv, pgm))
}
