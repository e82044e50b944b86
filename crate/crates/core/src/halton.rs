//! Low-discrepancy decode orders built from the Halton sequence.

use crate::error::{Error, Result};

/// Digit reversal of `i` in base `b`, placed after the radix point.
pub fn radical_inverse(i: u64, b: u64) -> Result<f64> {
    if i == 0 || b < 2 {
        return Err(Error::RadicalInverseDomain { index: i, base: b });
    }
    let mut n = i;
    let mut inv_base = 1.0 / b as f64;
    let mut out = 0.0;
    while n > 0 {
        out += (n % b) as f64 * inv_base;
        n /= b;
        inv_base /= b as f64;
    }
    Ok(out)
}

/// Cells `(row, col)` of an `h × h` grid in Halton order, each exactly once.
pub fn halton_schedule(h: usize) -> Result<Vec<(usize, usize)>> {
    if h == 0 {
        return Err(Error::Argument("grid side must be at least 1".into()));
    }
    let mut seen = vec![false; h * h];
    let mut out = Vec::with_capacity(h * h);
    let mut i = 1u64;
    while out.len() < h * h {
        let r = ((radical_inverse(i, 2)? * h as f64) as usize).min(h - 1);
        let c = ((radical_inverse(i, 3)? * h as f64) as usize).min(h - 1);
        if !seen[r * h + c] {
            seen[r * h + c] = true;
            out.push((r, c));
        }
        i += 1;
    }
    Ok(out)
}

/// Decode order for a 1-D sequence: a `⌈√len⌉` grid traversed in Halton
/// order, read row-major, with cells past the end skipped.
pub fn halton_sequence_order(len: usize) -> Result<Vec<usize>> {
    if len == 0 {
        return Err(Error::Argument("sequence length must be at least 1".into()));
    }
    let h = (len as f64).sqrt().ceil() as usize;
    let h = if h * h < len { h + 1 } else { h };
    Ok(halton_schedule(h)?
        .into_iter()
        .map(|(r, c)| r * h + c)
        .filter(|&p| p < len)
        .collect())
}
