use crate::error::{Error, Result};

/// Block-averages a fine binary water mask into fractional cover.
///
/// `mask` is `rows × cols` row-major; each output cell is the mean of a
/// `factor × factor` block. Dimensions must divide evenly.
pub fn fractional_upscale(mask: &[bool], rows: usize, cols: usize, factor: usize) -> Result<Vec<f64>> {
    if factor == 0 || rows % factor != 0 || cols % factor != 0 {
        return Err(Error::invalid(format!("{rows}×{cols} mask is not divisible by factor {factor}")));
    }
    if mask.len() != rows * cols {
        return Err(Error::shape("fractional_upscale", format!("mask has {} cells, expected {}", mask.len(), rows * cols)));
    }
    let (cr, cc) = (rows / factor, cols / factor);
    let mut counts = vec![0u32; cr * cc];
    for (r, row) in mask.chunks_exact(cols).enumerate() {
        let out_row = &mut counts[(r / factor) * cc..(r / factor + 1) * cc];
        for (c, &wet) in row.iter().enumerate() {
            out_row[c / factor] += wet as u32;
        }
    }
    let area = (factor * factor) as f64;
    Ok(counts.into_iter().map(|n| n as f64 / area).collect())
}
