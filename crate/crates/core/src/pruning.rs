//! Magnitude pruning masks, sparsity, and the check that a dead-zone quantizer
//! prunes exactly the weights a magnitude mask at `τ = d/2` removes.

use crate::autodiff::Tape;
use crate::error::{CodeqError, Result};
use crate::quantizers::deadzone_quantize;

/// Binary keep-mask for a weight tensor. `bits[i]` is set iff `|w_i| > τ`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    pub bits: Vec<bool>,
    pub threshold: f64,
}

impl Mask {
    pub fn kept(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// Element-wise `w ⊙ m`.
    pub fn apply(&self, w: &[f64]) -> Vec<f64> {
        w.iter()
            .zip(&self.bits)
            .map(|(&v, &keep)| if keep { v } else { 0.0 })
            .collect()
    }
}

/// Keep-rule `|w_i| > τ`. The boundary `|w_i| = τ` is pruned, matching the
/// dead-zone quantizer.
pub fn magnitude_mask(w: &[f64], tau: f64) -> Result<Mask> {
    if !(tau >= 0.0) {
        return Err(CodeqError::Domain(format!("pruning threshold {tau} must be >= 0")));
    }
    Ok(Mask {
        bits: w.iter().map(|v| v.abs() > tau).collect(),
        threshold: tau,
    })
}

/// Fraction of exactly-zero entries.
pub fn sparsity(x: &[f64]) -> Result<f64> {
    if x.is_empty() {
        return Err(CodeqError::Empty("sparsity of an empty tensor"));
    }
    Ok(x.iter().filter(|&&v| v == 0.0).count() as f64 / x.len() as f64)
}

/// First index where the dead-zone quantizer and the magnitude mask disagree.
#[derive(Debug, Clone, PartialEq)]
pub struct Mismatch {
    pub index: usize,
    pub weight: f64,
    pub reconstruction: f64,
    pub mask_keeps: bool,
}

/// Compare the zero set of `deadzone_quantize(w, s, d, b)` with the complement
/// of `magnitude_mask(w, d/2)`. Returns the first disagreement, if any.
pub fn equivalence_mismatch(w: &[f64], s: f64, d: f64, bits: u32) -> Result<Option<Mismatch>> {
    let mut tape = Tape::new();
    let wn = tape.constant(w.to_vec(), &[w.len()])?;
    let sn = tape.scalar(s, false);
    let dn = tape.scalar(d, false);
    let out = deadzone_quantize(&mut tape, wn, sn, dn, bits)?;
    let w_hat = tape.value(out.w_hat);
    let mask = magnitude_mask(w, d / 2.0)?;
    Ok(w
        .iter()
        .zip(w_hat)
        .zip(&mask.bits)
        .enumerate()
        .find(|(_, ((_, &q), &keep))| (q == 0.0) == keep)
        .map(|(index, ((&weight, &reconstruction), &mask_keeps))| Mismatch {
            index,
            weight,
            reconstruction,
            mask_keeps,
        }))
}

/// `true` iff the dead-zone quantizer zeroes exactly the weights the magnitude
/// mask at `τ = d/2` removes. Invalid quantizer inputs yield `false`.
pub fn equivalence_oracle(w: &[f64], s: f64, d: f64, bits: u32) -> bool {
    matches!(equivalence_mismatch(w, s, d, bits), Ok(None))
}
