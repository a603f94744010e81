//! File export: binary PGM score maps and the loss-curve CSV.

use std::io::Write;

use crate::grid::ScoreField;
use crate::train::LossRow;

/// 8-bit binary PGM (P5, maxval 255) of the min–max-normalized field.
/// A constant field exports as all zeros.
pub fn write_pgm<W: Write>(mut out: W, field: &ScoreField) -> std::io::Result<()> {
    write!(out, "P5\n{} {}\n255\n", field.width(), field.height())?;
    let bytes: Vec<u8> = field
        .normalized()
        .iter()
        .map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
        .collect();
    out.write_all(&bytes)
}

pub const LOSS_CSV_HEADER: &str = "step,ce,uce,var,out,total";

/// One row per optimization step: `step,ce,uce,var,out,total`.
pub fn write_loss_csv<W: Write>(mut out: W, rows: &[LossRow]) -> std::io::Result<()> {
    writeln!(out, "{LOSS_CSV_HEADER}")?;
    for r in rows {
        writeln!(
            out,
            "{},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e}",
            r.step, r.ce, r.uce, r.var, r.out, r.total
        )?;
    }
    Ok(())
}
