//! Uniform and dead-zone scalar quantizers, their scale factors, and the
//! learnable parameterisations of dead-zone width and bit-width.
//!
//! All quantizers are built from tape nodes so that one forward pass yields
//! gradients for the weights, the dead-zone parameter and the bit parameter.
//! The dead-zone quantizer with width `d`, step `s` and `Q = 2^(b-1) - 1` is
//!
//! ```text
//! δ  = d/2 - s/2
//! w̄  = clip(round(sign(w) · relu(|w| - δ) / s), -Q, Q)
//! ŵ  = sign(w̄) · δ + s · w̄
//! ```
//!
//! with straight-through rules on `round`, `relu` and `clip` and no gradient
//! through either `sign`. Every weight with `|w| ≤ d/2` reconstructs to exactly
//! zero; the remaining levels are `±(δ + s·k)` for `k = 1..=Q`.

use serde::{Deserialize, Serialize};

use crate::autodiff::{NodeId, Tape};
use crate::error::{CodeqError, Result};

/// Default scale offset guarding against a fully pruned layer.
pub const DEFAULT_EPSILON: f64 = 1e-8;
/// Default quantile of `|w|` used as the range statistic.
pub const DEFAULT_QUANTILE: f64 = 0.99;

/// Largest quantization index `Q_b = 2^(b-1) - 1` of a signed `b`-bit grid.
pub fn qmax(bits: u32) -> Result<f64> {
    if !(2..=31).contains(&bits) {
        return Err(CodeqError::Domain(format!("bit-width {bits} outside [2, 31]")));
    }
    Ok(((1u64 << (bits - 1)) - 1) as f64)
}

/// Nearest-rank quantile of `|values|`: the element at index `ceil(q·n) - 1`
/// of the ascending-sorted magnitudes. `q = 1` is the absolute maximum.
pub fn quantile_abs(values: &[f64], q: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(CodeqError::Empty("range statistic of an empty tensor"));
    }
    if !(q > 0.0 && q <= 1.0) {
        return Err(CodeqError::Domain(format!("quantile {q} outside (0, 1]")));
    }
    let n = values.len();
    let x = q * n as f64;
    // q·n lands a hair above an integer for e.g. 0.99·100; treat that as exact.
    let rank = if (x - x.round()).abs() <= 1e-9 * x.max(1.0) {
        x.round()
    } else {
        x.ceil()
    };
    let index = (rank as usize).clamp(1, n) - 1;
    let mut mags: Vec<f64> = values.iter().map(|v| v.abs()).collect();
    let (_, v, _) = mags.select_nth_unstable_by(index, f64::total_cmp);
    Ok(*v)
}

/// Range statistic `R` of a weight tensor as a gradient-free scalar node.
pub fn range_stat(tape: &mut Tape, w: NodeId, quantile: f64) -> Result<NodeId> {
    let r = quantile_abs(tape.value(w), quantile)?;
    let node = tape.scalar(r, false);
    Ok(tape.stop_gradient(node))
}

/// Absmax scale `R / Q_b`.
pub fn absmax_scale(range: f64, bits: u32) -> Result<f64> {
    if range < 0.0 {
        return Err(CodeqError::Domain(format!("negative range statistic {range}")));
    }
    Ok(range / qmax(bits)?)
}

/// Pruning-aware scale `(R - d/2) / (Q_b - 1/2) + eps`: the step that spreads
/// the `2·Q_b` non-zero levels over the range left once the dead-zone is
/// carved out.
pub fn pruning_aware_scale(range: f64, deadzone: f64, bits: u32, eps: f64) -> Result<f64> {
    check_deadzone(range, deadzone)?;
    let q = qmax(bits)?;
    Ok((range - deadzone / 2.0) / (q - 0.5) + eps)
}

fn check_deadzone(range: f64, deadzone: f64) -> Result<()> {
    if !(deadzone >= 0.0 && deadzone <= 2.0 * range) {
        return Err(CodeqError::Domain(format!(
            "dead-zone width {deadzone} outside [0, 2R] with R = {range}"
        )));
    }
    Ok(())
}

/// Solves `d = pruning_aware_scale(R, d, b, 0)` by bisection on `[0, 2R]`.
/// Analytically the root is the absmax scale `R / Q_b`.
pub fn absmax_recovery_fixed_point(range: f64, bits: u32) -> Result<f64> {
    if !(range > 0.0 && range.is_finite()) {
        return Err(CodeqError::Domain(format!("range statistic {range} must be positive")));
    }
    let q = qmax(bits)?;
    let residual = |d: f64| d - (range - d / 2.0) / (q - 0.5);
    let (mut lo, mut hi) = (0.0, 2.0 * range);
    for _ in 0..4096 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if residual(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(if residual(lo).abs() <= residual(hi).abs() { lo } else { hi })
}

/// Gradient rule for the clip inside the plain uniform quantizer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClipGradient {
    /// Gradient only where `|w/s| ≤ Q_b` (classic QAT).
    Masked,
    /// Gradient everywhere.
    Straight,
}

/// Result of quantizing one tensor.
#[derive(Debug, Clone)]
pub struct QuantOutcome {
    /// Reconstructed weights `ŵ`.
    pub w_hat: NodeId,
    /// Integer indices `w̄`, each in `[-Q_b, Q_b]`.
    pub w_bar: Vec<i32>,
    pub scale: f64,
    pub deadzone: f64,
    pub bits: u32,
    pub range_stat: f64,
    /// Dead-zone parameter leaf, when the outcome came from [`quantize_layer`].
    pub theta_dz: Option<NodeId>,
    /// Bit parameter leaf in mixed-precision mode.
    pub theta_bit: Option<NodeId>,
}

impl QuantOutcome {
    /// Offset `δ = d/2 - s/2` of the non-zero grid.
    pub fn delta(&self) -> f64 {
        self.deadzone / 2.0 - self.scale / 2.0
    }

    pub fn sparsity(&self) -> f64 {
        let zeros = self.w_bar.iter().filter(|&&k| k == 0).count();
        zeros as f64 / self.w_bar.len() as f64
    }
}

fn indices(tape: &Tape, w_bar: NodeId) -> Vec<i32> {
    tape.value(w_bar).iter().map(|&v| v as i32).collect()
}

/// Mid-tread uniform symmetric quantizer `ŵ = s · clip(round(w/s), -Q_b, Q_b)`.
pub fn uniform_quantize(
    tape: &mut Tape,
    w: NodeId,
    scale: f64,
    bits: u32,
    clip: ClipGradient,
) -> Result<QuantOutcome> {
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(CodeqError::Domain(format!("scale {scale} must be positive")));
    }
    let q = qmax(bits)?;
    let s = tape.scalar(scale, false);
    let ratio = tape.div(w, s)?;
    let w_bar = match clip {
        ClipGradient::Straight => {
            let k = tape.ste_round(ratio);
            tape.ste_clip(k, -q, q)?
        }
        // Same forward value (the bounds are integers); the mask is decided on
        // the unrounded ratio.
        ClipGradient::Masked => {
            let c = tape.masked_clip(ratio, -q, q)?;
            tape.ste_round(c)
        }
    };
    let w_hat = tape.mul(s, w_bar)?;
    let range_stat = quantile_abs(tape.value(w), 1.0)?;
    Ok(QuantOutcome {
        w_hat,
        w_bar: indices(tape, w_bar),
        scale,
        deadzone: scale,
        bits,
        range_stat,
        theta_dz: None,
        theta_bit: None,
    })
}

/// Dead-zone quantizer with step `s` and dead-zone width `d`, both scalar nodes.
///
/// `|w| - δ` is evaluated as `(|w| - d/2) + s/2`, which is the same quantity but
/// lands on exactly `s/2` when `|w| = d/2`, so the tie rounds to zero without
/// floating-point drift.
pub fn deadzone_quantize(
    tape: &mut Tape,
    w: NodeId,
    s: NodeId,
    d: NodeId,
    bits: u32,
) -> Result<QuantOutcome> {
    let (scale, deadzone) = (tape.item(s), tape.item(d));
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(CodeqError::Domain(format!("scale {scale} must be positive")));
    }
    if !(deadzone >= 0.0 && deadzone.is_finite()) {
        return Err(CodeqError::Domain(format!("dead-zone width {deadzone} must be non-negative")));
    }
    let q = qmax(bits)?;

    let half_d = tape.scale(d, 0.5);
    let half_s = tape.scale(s, 0.5);
    let delta = tape.sub(half_d, half_s)?;

    let mag = tape.abs(w);
    let past_zone = tape.sub(mag, half_d)?;
    let shifted = tape.add(past_zone, half_s)?;
    let kept = tape.ste_relu(shifted);
    let sign_w = tape.zero_grad_sign(w);
    let signed = tape.mul(sign_w, kept)?;
    let ratio = tape.div(signed, s)?;
    let rounded = tape.ste_round(ratio);
    let w_bar = tape.ste_clip(rounded, -q, q)?;

    let sign_bar = tape.zero_grad_sign(w_bar);
    let offset = tape.mul(sign_bar, delta)?;
    let grid = tape.mul(s, w_bar)?;
    let w_hat = tape.add(offset, grid)?;

    let range_stat = quantile_abs(tape.value(w), 1.0)?;
    Ok(QuantOutcome {
        w_hat,
        w_bar: indices(tape, w_bar),
        scale,
        deadzone,
        bits,
        range_stat,
        theta_dz: None,
        theta_bit: None,
    })
}

/// Dead-zone width `d = 2R · (1 - tanh|θ_dz|)`, always inside `[0, 2R]`.
pub fn deadzone_width(tape: &mut Tape, theta_dz: NodeId, range: f64) -> NodeId {
    let mag = tape.abs(theta_dz);
    let t = tape.tanh(mag);
    let keep = tape.neg(t);
    let keep = tape.add_scalar(keep, 1.0);
    tape.scale(keep, 2.0 * range)
}

/// Bit-width chosen by a learnable parameter.
#[derive(Debug, Clone, Copy)]
pub struct LearnedBits {
    /// Integer bit-width used in the forward pass.
    pub bits: u32,
    /// `tanh|θ_bit| · (b_max - b_min) + b_min`
    pub continuous: NodeId,
    /// Straight-through rounding of `continuous`.
    pub rounded: NodeId,
}

pub fn learnable_bit(tape: &mut Tape, theta_bit: NodeId, b_min: u32, b_max: u32) -> Result<LearnedBits> {
    if b_min < 2 || b_min > b_max {
        return Err(CodeqError::Domain(format!("bit bounds [{b_min}, {b_max}] invalid")));
    }
    let mag = tape.abs(theta_bit);
    let t = tape.tanh(mag);
    let span = tape.scale(t, f64::from(b_max - b_min));
    let continuous = tape.add_scalar(span, f64::from(b_min));
    let rounded = tape.ste_round(continuous);
    let bits = (tape.item(rounded) as u32).clamp(b_min, b_max);
    Ok(LearnedBits {
        bits,
        continuous,
        rounded,
    })
}

/// Pruning-aware scale as a node, for a fixed bit-width.
pub fn pruning_aware_scale_node(tape: &mut Tape, range: f64, d: NodeId, bits: u32, eps: f64) -> Result<NodeId> {
    check_deadzone(range, tape.item(d))?;
    let q = qmax(bits)?;
    let half_d = tape.scale(d, -0.5);
    let usable = tape.add_scalar(half_d, range);
    let s = tape.scale(usable, 1.0 / (q - 0.5));
    Ok(tape.add_scalar(s, eps))
}

/// Pruning-aware scale with a learnable bit-width. Differentiable in `θ_bit`
/// through the straight-through rounding of the continuous bit-width and in
/// `d`.
pub fn learnable_scale(
    tape: &mut Tape,
    theta_bit: NodeId,
    d: NodeId,
    range: f64,
    eps: f64,
    b_min: u32,
    b_max: u32,
) -> Result<(NodeId, LearnedBits)> {
    check_deadzone(range, tape.item(d))?;
    let learned = learnable_bit(tape, theta_bit, b_min, b_max)?;
    let exponent = tape.add_scalar(learned.rounded, -1.0);
    let levels = tape.exp2(exponent);
    let denom = tape.add_scalar(levels, -1.5);
    let half_d = tape.scale(d, -0.5);
    let usable = tape.add_scalar(half_d, range);
    let s = tape.div(usable, denom)?;
    Ok((tape.add_scalar(s, eps), learned))
}

/// Fixed bit-width or learnable bit-width.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum BitMode {
    Fixed(u32),
    Learned { theta_bit: f64 },
}

/// Per-layer learnable compression state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerQuantState {
    pub theta_dz: f64,
    pub bits: BitMode,
    pub b_min: u32,
    pub b_max: u32,
    pub quantile: f64,
    pub epsilon: f64,
    /// Block the gradient from `d` into the scale factor.
    pub detach_scale_from_d: bool,
}

impl LayerQuantState {
    pub fn fixed(bits: u32, theta_dz: f64) -> Self {
        Self {
            theta_dz,
            bits: BitMode::Fixed(bits),
            b_min: 2,
            b_max: 8,
            quantile: DEFAULT_QUANTILE,
            epsilon: DEFAULT_EPSILON,
            detach_scale_from_d: false,
        }
    }

    pub fn mixed(theta_bit: f64, theta_dz: f64, b_min: u32, b_max: u32) -> Self {
        Self {
            theta_dz,
            bits: BitMode::Learned { theta_bit },
            b_min,
            b_max,
            quantile: DEFAULT_QUANTILE,
            epsilon: DEFAULT_EPSILON,
            detach_scale_from_d: false,
        }
    }

    pub fn with_quantile(mut self, quantile: f64) -> Self {
        self.quantile = quantile;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0) {
            return Err(CodeqError::Config(format!("epsilon {} must be > 0", self.epsilon)));
        }
        if !(self.quantile > 0.0 && self.quantile <= 1.0) {
            return Err(CodeqError::Config(format!("quantile {} outside (0, 1]", self.quantile)));
        }
        if self.b_min < 2 || self.b_max > 16 || self.b_min > self.b_max {
            return Err(CodeqError::Config(format!(
                "bit bounds [{}, {}] must satisfy 2 <= b_min <= b_max <= 16",
                self.b_min, self.b_max
            )));
        }
        if let BitMode::Fixed(b) = self.bits {
            if !(2..=16).contains(&b) {
                return Err(CodeqError::Config(format!("fixed bit-width {b} outside [2, 16]")));
            }
        }
        if !self.theta_dz.is_finite() {
            return Err(CodeqError::Config("theta_dz is not finite".into()));
        }
        Ok(())
    }

    pub fn theta_bit(&self) -> Option<f64> {
        match self.bits {
            BitMode::Learned { theta_bit } => Some(theta_bit),
            BitMode::Fixed(_) => None,
        }
    }

    /// Integer bit-width the forward pass would use.
    pub fn effective_bits(&self) -> u32 {
        match self.bits {
            BitMode::Fixed(b) => b,
            BitMode::Learned { theta_bit } => {
                let cont = theta_bit.abs().tanh() * f64::from(self.b_max - self.b_min) + f64::from(self.b_min);
                (crate::autodiff::kernels::round_half_even(cont) as u32).clamp(self.b_min, self.b_max)
            }
        }
    }
}

/// Quantize one layer: range statistic, dead-zone width, scale, then the
/// dead-zone quantizer. The `θ` parameters are created as trainable leaves on
/// the tape and returned in the outcome.
pub fn quantize_layer(tape: &mut Tape, w: NodeId, state: &LayerQuantState) -> Result<QuantOutcome> {
    state.validate()?;
    let range = quantile_abs(tape.value(w), state.quantile)?;
    let theta_dz = tape.scalar(state.theta_dz, true);
    let d = deadzone_width(tape, theta_dz, range);
    let d_for_scale = if state.detach_scale_from_d {
        tape.stop_gradient(d)
    } else {
        d
    };
    let (s, bits, theta_bit) = match state.bits {
        BitMode::Fixed(b) => (
            pruning_aware_scale_node(tape, range, d_for_scale, b, state.epsilon)?,
            b,
            None,
        ),
        BitMode::Learned { theta_bit } => {
            let tb = tape.scalar(theta_bit, true);
            let (s, learned) = learnable_scale(tape, tb, d_for_scale, range, state.epsilon, state.b_min, state.b_max)?;
            (s, learned.bits, Some(tb))
        }
    };
    let mut out = deadzone_quantize(tape, w, s, d, bits)?;
    out.range_stat = range;
    out.theta_dz = Some(theta_dz);
    out.theta_bit = theta_bit;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn quantize_dz(w: &[f64], s: f64, d: f64, b: u32) -> (Vec<f64>, QuantOutcome) {
        let mut t = Tape::new();
        let wn = t.param(w.to_vec(), &[w.len()]).unwrap();
        let sn = t.scalar(s, false);
        let dn = t.scalar(d, false);
        let out = deadzone_quantize(&mut t, wn, sn, dn, b).unwrap();
        (t.value(out.w_hat).to_vec(), out)
    }

    #[test]
    fn quantile_nearest_rank() {
        assert_eq!(quantile_abs(&[0.1, -0.3, 0.9, -1.2], 1.0).unwrap(), 1.2);
        let v: Vec<f64> = (1..=100).map(|i| i as f64 / 100.0).collect();
        assert_eq!(quantile_abs(&v, 0.99).unwrap(), 0.99);
        assert!(quantile_abs(&[], 0.5).is_err());
        assert!(quantile_abs(&[1.0], 0.0).is_err());
    }

    #[test]
    fn range_stat_carries_no_gradient() {
        let mut t = Tape::new();
        let w = t.param(vec![0.1, -0.7, 0.4], &[3]).unwrap();
        let r = range_stat(&mut t, w, 1.0).unwrap();
        assert_eq!(t.item(r), 0.7);
        let y = t.mul(w, r).unwrap();
        let l = t.sum(y);
        t.backward(l).unwrap();
        // Only the explicit w factor contributes.
        assert_eq!(t.grad(w).unwrap(), &[0.7, 0.7, 0.7]);
    }

    #[test]
    fn absmax_scale_examples() {
        assert_relative_eq!(absmax_scale(1.2, 3).unwrap(), 0.4, max_relative = 1e-15);
        assert_eq!(absmax_scale(0.0, 5).unwrap(), 0.0);
        assert_eq!(absmax_scale(127.0, 8).unwrap(), 1.0);
        assert!(absmax_scale(1.0, 1).is_err());
    }

    #[test]
    fn uniform_examples() {
        let mut t = Tape::new();
        let w = t.param(vec![0.9, -0.3, 0.1, -1.2], &[4]).unwrap();
        let out = uniform_quantize(&mut t, w, 0.4, 3, ClipGradient::Straight).unwrap();
        let got = t.value(out.w_hat).to_vec();
        for (g, e) in got.iter().zip([0.8, -0.4, 0.0, -1.2]) {
            assert_relative_eq!(*g, e, max_relative = 1e-12);
        }
        assert_eq!(out.w_bar, vec![2, -1, 0, -3]);

        let w = t.param(vec![0.5], &[1]).unwrap();
        let out = uniform_quantize(&mut t, w, 1.0, 3, ClipGradient::Masked).unwrap();
        assert_eq!(t.value(out.w_hat), &[0.0]);

        let grid = vec![-0.75, -0.25, 0.0, 0.5, 0.75];
        let w = t.param(grid.clone(), &[5]).unwrap();
        let out = uniform_quantize(&mut t, w, 0.25, 4, ClipGradient::Straight).unwrap();
        assert_eq!(t.value(out.w_hat), grid.as_slice());

        assert!(uniform_quantize(&mut t, w, 0.0, 4, ClipGradient::Straight).is_err());
    }

    #[test]
    fn masked_uniform_blocks_saturated_gradient() {
        let mut t = Tape::new();
        let w = t.param(vec![5.0, 0.3], &[2]).unwrap();
        let out = uniform_quantize(&mut t, w, 1.0, 3, ClipGradient::Masked).unwrap();
        let l = t.sum(out.w_hat);
        t.backward(l).unwrap();
        assert_eq!(t.grad(w).unwrap(), &[0.0, 1.0]);
    }

    #[test]
    fn pruning_aware_scale_examples() {
        let eps = 1e-8;
        assert_relative_eq!(pruning_aware_scale(1.0, 0.5, 3, eps).unwrap(), 0.3 + eps, max_relative = 1e-14);
        assert_relative_eq!(pruning_aware_scale(1.2, 0.7, 3, eps).unwrap(), 0.34 + eps, max_relative = 1e-14);
        assert_eq!(pruning_aware_scale(1.2, 2.4, 3, eps).unwrap(), eps);
        assert!(pruning_aware_scale(1.0, 2.1, 3, eps).is_err());
        assert!(pruning_aware_scale(1.0, -0.1, 3, eps).is_err());
    }

    #[test]
    fn fixed_point_recovers_absmax() {
        assert_relative_eq!(absmax_recovery_fixed_point(1.2, 3).unwrap(), 0.4, max_relative = 1e-12);
        assert_relative_eq!(absmax_recovery_fixed_point(1.0, 8).unwrap(), 1.0 / 127.0, max_relative = 1e-12);
        assert!(absmax_recovery_fixed_point(0.0, 4).is_err());
    }

    #[test]
    fn deadzone_worked_example() {
        let s = pruning_aware_scale(1.2, 0.7, 3, 0.0).unwrap();
        let (w_hat, out) = quantize_dz(&[0.9, -0.3, 0.1, -1.2], s, 0.7, 3);
        assert_relative_eq!(out.delta(), 0.18, max_relative = 1e-12);
        for (g, e) in w_hat.iter().zip([0.86, 0.0, 0.0, -1.2]) {
            assert_relative_eq!(*g, e, max_relative = 1e-12);
        }
        assert_eq!(w_hat[1], 0.0);
        assert_eq!(w_hat[2], 0.0);
        assert_eq!(out.sparsity(), 0.5);
        // extreme level equals R
        assert_relative_eq!(out.delta() + s * 3.0, 1.2, max_relative = 1e-14);
    }

    #[test]
    fn boundary_weight_is_pruned() {
        for &(d, s) in &[(0.7, 0.34), (0.2, 0.5), (1.3, 0.01), (0.123456789, 0.0777)] {
            let (w_hat, _) = quantize_dz(&[d / 2.0, -d / 2.0], s, d, 4);
            assert_eq!(w_hat, vec![0.0, 0.0], "d = {d}, s = {s}");
        }
    }

    #[test]
    fn deadzone_equal_to_step_is_uniform() {
        let w = [0.9, -0.3, 0.1, -1.2, 0.61, -0.2];
        let (dz, _) = quantize_dz(&w, 0.4, 0.4, 3);
        let mut t = Tape::new();
        let wn = t.param(w.to_vec(), &[w.len()]).unwrap();
        let u = uniform_quantize(&mut t, wn, 0.4, 3, ClipGradient::Straight).unwrap();
        assert_eq!(dz, t.value(u.w_hat));
    }

    #[test]
    fn deadzone_width_examples() {
        let mut t = Tape::new();
        for (theta, range, expected) in [(0.0, 1.0, 2.0), (3.0, 1.0, 2.0 * (1.0 - 3f64.tanh())), (-3.0, 1.0, 2.0 * (1.0 - 3f64.tanh()))] {
            let th = t.scalar(theta, true);
            let d = deadzone_width(&mut t, th, range);
            assert_relative_eq!(t.item(d), expected, max_relative = 1e-14);
        }
        let th = t.scalar(3.0, true);
        let d = deadzone_width(&mut t, th, 1.0);
        assert_relative_eq!(t.item(d), 0.0098904926265, max_relative = 1e-10);
    }

    #[test]
    fn learnable_bit_examples() {
        let mut t = Tape::new();
        let th = t.scalar(0.0, true);
        assert_eq!(learnable_bit(&mut t, th, 2, 8).unwrap().bits, 2);
        let th = t.scalar(3.0, true);
        let lb = learnable_bit(&mut t, th, 2, 8).unwrap();
        assert_relative_eq!(t.item(lb.continuous), 7.9703, max_relative = 1e-4);
        assert_eq!(lb.bits, 8);
        let th = t.scalar(1e6, true);
        assert_eq!(learnable_bit(&mut t, th, 2, 8).unwrap().bits, 8);
        assert!(learnable_bit(&mut t, th, 5, 4).is_err());
    }

    #[test]
    fn learnable_scale_examples() {
        let mut t = Tape::new();
        let d = t.scalar(0.0, false);
        let th = t.scalar(50.0, true);
        let (s, lb) = learnable_scale(&mut t, th, d, 1.0, 1e-8, 2, 8).unwrap();
        assert_eq!(lb.bits, 8);
        assert_relative_eq!(t.item(s), 1.0 / 126.5 + 1e-8, max_relative = 1e-14);
        let th = t.scalar(0.0, true);
        let (s, lb) = learnable_scale(&mut t, th, d, 1.0, 1e-8, 2, 8).unwrap();
        assert_eq!(lb.bits, 2);
        assert_relative_eq!(t.item(s), 2.0 + 1e-8, max_relative = 1e-14);
    }

    #[test]
    fn quantize_layer_extremes() {
        let w: Vec<f64> = (0..200).map(|i| ((i as f64) * 0.37).sin()).collect();
        let mut t = Tape::new();
        let wn = t.param(w.clone(), &[200]).unwrap();
        let out = quantize_layer(&mut t, wn, &LayerQuantState::fixed(4, 3.0)).unwrap();
        assert!(out.sparsity() < 0.05);

        let state = LayerQuantState::fixed(4, 0.0).with_quantile(1.0);
        let out = quantize_layer(&mut t, wn, &state).unwrap();
        assert_eq!(out.sparsity(), 1.0);
        assert!(t.value(out.w_hat).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn state_validation() {
        assert!(LayerQuantState::fixed(4, 3.0).validate().is_ok());
        assert!(LayerQuantState::fixed(1, 3.0).validate().is_err());
        assert!(LayerQuantState::mixed(3.0, 3.0, 6, 4).validate().is_err());
        assert!(LayerQuantState::fixed(4, 3.0).with_quantile(0.0).validate().is_err());
        let mut s = LayerQuantState::fixed(4, 3.0);
        s.epsilon = 0.0;
        assert!(s.validate().is_err());
    }
}
