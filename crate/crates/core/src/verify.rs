//! Randomized property suites for the quantizer stack.
//!
//! Each suite draws its own instances from a seeded generator and stops at the
//! first failure, which is reported as a counterexample reduced to the
//! smallest reproducing input where possible.

use std::fmt::Write as _;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::Tape;
use crate::error::Result;
use crate::pruning::{equivalence_mismatch, Mismatch};
use crate::quantizers::{
    absmax_recovery_fixed_point, deadzone_quantize, pruning_aware_scale, qmax, quantile_abs, quantize_layer,
    uniform_quantize, BitMode, ClipGradient, LayerQuantState,
};

pub const DEFAULT_TRIALS: usize = 10_000;
/// Finite-difference step and tolerance of the `θ` gradient suite.
pub const FD_STEP: f64 = 1e-6;
pub const FD_TOLERANCE: f64 = 1e-5;
pub const FIXED_POINT_TOLERANCE: f64 = 1e-12;
pub const GRID_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SuiteResult {
    pub name: &'static str,
    pub trials: usize,
    /// Trials that ran to completion, including the failing one.
    pub checked: usize,
    /// Instances redrawn because they hit a rounding discontinuity.
    pub resampled: usize,
    pub counterexample: Option<String>,
    pub seconds: f64,
}

impl SuiteResult {
    pub fn passed(&self) -> bool {
        self.counterexample.is_none()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VerifyReport {
    pub seed: u64,
    pub trials: usize,
    pub suites: Vec<SuiteResult>,
    pub warnings: Vec<String>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.suites.iter().all(SuiteResult::passed)
    }

    pub fn to_table(&self) -> String {
        let mut out = format!("{:<22} {:>8} {:>9} {:>9} {:>6}\n", "property", "trials", "resampled", "seconds", "result");
        for s in &self.suites {
            let _ = writeln!(
                out,
                "{:<22} {:>8} {:>9} {:>9.2} {:>6}",
                s.name,
                s.checked,
                s.resampled,
                s.seconds,
                if s.passed() { "PASS" } else { "FAIL" }
            );
        }
        for w in &self.warnings {
            let _ = writeln!(out, "warning: {w}");
        }
        for s in self.suites.iter().filter(|s| !s.passed()) {
            let _ = writeln!(out, "counterexample for {}:\n{}", s.name, s.counterexample.as_deref().unwrap_or(""));
        }
        out
    }
}

/// Run every suite. `trials` sets the equivalence count; the other suites use
/// fixed fractions of it (1/10 reduction, 1/100 fixed point, grid extremum
/// and STE identity, 1/20 `θ` gradients).
pub fn run_all(seed: u64, trials: usize) -> Result<VerifyReport> {
    let frac = |d: usize| trials.div_ceil(d);
    let mut warnings = Vec::new();
    if trials == 0 {
        warnings.push("trials = 0: every property passes vacuously".to_string());
    }
    let suites = vec![
        equivalence_suite(seed, trials)?,
        reduction_suite(seed, frac(10))?,
        fixed_point_suite(seed, frac(100))?,
        grid_extremum_suite(seed, frac(100))?,
        ste_identity_suite(seed, frac(100))?,
        theta_gradient_suite(seed, frac(20))?,
    ];
    Ok(VerifyReport {
        seed,
        trials,
        suites,
        warnings,
    })
}

fn suite_rng(seed: u64, salt: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ salt.wrapping_mul(0xA076_1D64_78BD_642F))
}

fn log_uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    (rng.random_range(lo.ln()..hi.ln())).exp()
}

fn random_len(rng: &mut ChaCha8Rng, max: usize) -> usize {
    (log_uniform(rng, 1.0, max as f64 + 1.0) as usize).clamp(1, max)
}

/// Gaussian-ish weights: sum of uniforms, scaled, no exact zeros.
fn random_weights(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let sigma = log_uniform(rng, 1e-3, 10.0);
    (0..n)
        .map(|_| {
            let g: f64 = (0..4).map(|_| rng.random_range(-1.0..1.0)).sum::<f64>() * 0.866;
            if g == 0.0 {
                sigma
            } else {
                g * sigma
            }
        })
        .collect()
}

const EQUIV_BITS: [u32; 4] = [2, 3, 4, 8];

/// A random equivalence instance with `|w_i| = d/2` planted at random indices.
#[derive(Debug, Clone)]
pub struct EquivalenceInstance {
    pub w: Vec<f64>,
    pub s: f64,
    pub d: f64,
    pub bits: u32,
    pub planted: Vec<usize>,
}

pub fn equivalence_instance(rng: &mut ChaCha8Rng) -> Result<EquivalenceInstance> {
    let n = random_len(rng, 4096);
    let bits = EQUIV_BITS[rng.random_range(0..EQUIV_BITS.len())];
    let mut w = random_weights(rng, n);
    let r = quantile_abs(&w, 0.99)?;
    let d = match rng.random_range(0..20) {
        0 => 0.0,
        1 => 2.0 * r,
        _ => rng.random_range(0.0..=2.0 * r),
    };
    let s = pruning_aware_scale(r, d, bits, 1e-8)?;
    let plants = 1 + n / 64;
    let planted: Vec<usize> = (0..plants).map(|_| rng.random_range(0..n)).collect();
    for &i in &planted {
        w[i] = if rng.random_bool(0.5) { d / 2.0 } else { -d / 2.0 };
    }
    Ok(EquivalenceInstance { w, s, d, bits, planted })
}

fn describe_mismatch(m: &Mismatch, s: f64, d: f64, bits: u32, n: usize) -> Result<String> {
    let minimal = equivalence_mismatch(&[m.weight], s, d, bits)?.is_some();
    Ok(format!(
        "  w[{}] = {:e} (|w| {} d/2 = {:e}) of {n} elements\n  s = {:e}, d = {:e}, b = {bits}\n  \
         reconstruction = {:e}, mask keeps = {}\n  reproduces as a 1-element tensor: {minimal}",
        m.index,
        m.weight,
        if m.weight.abs() == d / 2.0 {
            "=="
        } else if m.weight.abs() < d / 2.0 {
            "<"
        } else {
            ">"
        },
        d / 2.0,
        s,
        d,
        m.reconstruction,
        m.mask_keeps
    ))
}

/// Zero set of the dead-zone quantizer equals the pruned set of the magnitude
/// mask at `τ = d/2`, exactly.
pub fn equivalence_suite(seed: u64, trials: usize) -> Result<SuiteResult> {
    let start = Instant::now();
    let mut rng = suite_rng(seed, 1);
    let mut counterexample = None;
    let mut checked = 0;
    for _ in 0..trials {
        let inst = equivalence_instance(&mut rng)?;
        checked += 1;
        if let Some(m) = equivalence_mismatch(&inst.w, inst.s, inst.d, inst.bits)? {
            counterexample = Some(describe_mismatch(&m, inst.s, inst.d, inst.bits, inst.w.len())?);
            break;
        }
    }
    Ok(SuiteResult {
        name: "deadzone-equivalence",
        trials,
        checked,
        resampled: 0,
        counterexample,
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// With `d = s`, the dead-zone quantizer is bit-identical to the uniform one.
pub fn reduction_suite(seed: u64, trials: usize) -> Result<SuiteResult> {
    let start = Instant::now();
    let mut rng = suite_rng(seed, 2);
    let mut counterexample = None;
    let mut checked = 0;
    for _ in 0..trials {
        let n = random_len(&mut rng, 1024);
        let bits = rng.random_range(2..=8);
        let w = random_weights(&mut rng, n);
        let r = quantile_abs(&w, 1.0)?;
        let s = r / qmax(bits)? * rng.random_range(0.25..4.0);
        let mut tape = Tape::new();
        let wn = tape.constant(w.clone(), &[n])?;
        let (sn, dn) = (tape.scalar(s, false), tape.scalar(s, false));
        let dz = deadzone_quantize(&mut tape, wn, sn, dn, bits)?;
        let un = uniform_quantize(&mut tape, wn, s, bits, ClipGradient::Straight)?;
        checked += 1;
        let (a, b) = (tape.value(dz.w_hat), tape.value(un.w_hat));
        if let Some(i) = (0..n).find(|&i| a[i].to_bits() != b[i].to_bits()) {
            counterexample = Some(format!(
                "  w[{i}] = {:e}, s = d = {s:e}, b = {bits}\n  dead-zone {:e} vs uniform {:e}",
                w[i], a[i], b[i]
            ));
            break;
        }
    }
    Ok(SuiteResult {
        name: "uniform-reduction",
        trials,
        checked,
        resampled: 0,
        counterexample,
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// The fixed point of `d = s̃(d)` is the absmax scale `R / Q_b`.
pub fn fixed_point_suite(seed: u64, trials: usize) -> Result<SuiteResult> {
    let start = Instant::now();
    let mut rng = suite_rng(seed, 3);
    let mut counterexample = None;
    let mut checked = 0;
    for _ in 0..trials {
        let r = log_uniform(&mut rng, 1e-3, 1e3);
        let bits = rng.random_range(2..=16);
        let d = absmax_recovery_fixed_point(r, bits)?;
        let expected = r / qmax(bits)?;
        checked += 1;
        let rel = (d - expected).abs() / expected;
        if rel > FIXED_POINT_TOLERANCE {
            counterexample = Some(format!(
                "  R = {r:e}, b = {bits}: fixed point {d:e} vs R/Q = {expected:e} (relative {rel:e})"
            ));
            break;
        }
    }
    Ok(SuiteResult {
        name: "absmax-fixed-point",
        trials,
        checked,
        resampled: 0,
        counterexample,
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// With the range taken as `max |w|`, the outermost reconstruction level is
/// `R` itself: `δ + s·Q = R` for `ε = 0`, and `R + ε(Q - 1/2)` for `ε > 0`
/// while `ε` stays small against the step.
pub fn grid_extremum_suite(seed: u64, trials: usize) -> Result<SuiteResult> {
    let start = Instant::now();
    let mut rng = suite_rng(seed, 4);
    let mut counterexample = None;
    let mut checked = 0;
    for _ in 0..trials {
        let n = random_len(&mut rng, 512);
        let bits = rng.random_range(2..=8);
        let w = random_weights(&mut rng, n);
        let r = quantile_abs(&w, 1.0)?;
        let d = rng.random_range(0.0..2.0 * r);
        let q = qmax(bits)?;
        checked += 1;
        for eps in [0.0, 1e-8] {
            let s = pruning_aware_scale(r, d, bits, eps)?;
            // Once ε is comparable to the step, the top weight lands on level Q - 1.
            if !(s > 0.0) || s - eps <= 2.0 * eps * (q - 1.0) {
                continue;
            }
            let mut tape = Tape::new();
            let wn = tape.constant(w.clone(), &[n])?;
            let (sn, dn) = (tape.scalar(s, false), tape.scalar(d, false));
            let out = deadzone_quantize(&mut tape, wn, sn, dn, bits)?;
            let top = tape.value(out.w_hat).iter().fold(0.0f64, |m, v| m.max(v.abs()));
            let expected = r + eps * (q - 0.5);
            let rel = (top - expected).abs() / expected;
            if rel > GRID_TOLERANCE {
                counterexample = Some(format!(
                    "  R = {r:e}, d = {d:e}, b = {bits}, eps = {eps:e}: max |ŵ| = {top:e}, expected {expected:e} (relative {rel:e})"
                ));
                break;
            }
        }
        if counterexample.is_some() {
            break;
        }
    }
    Ok(SuiteResult {
        name: "grid-extremum",
        trials,
        checked,
        resampled: 0,
        counterexample,
        seconds: start.elapsed().as_secs_f64(),
    })
}

fn random_state(rng: &mut ChaCha8Rng) -> LayerQuantState {
    let sign = |rng: &mut ChaCha8Rng| if rng.random_bool(0.5) { 1.0 } else { -1.0 };
    let theta_dz = sign(rng) * rng.random_range(0.1..2.5);
    if rng.random_bool(0.5) {
        LayerQuantState::fixed(rng.random_range(2..=8), theta_dz)
    } else {
        let theta_bit = sign(rng) * rng.random_range(0.1..2.5);
        LayerQuantState::mixed(theta_bit, theta_dz, 2, 8)
    }
}

/// Backward through `sum(ŵ)` gives exactly one for every (non-zero) weight.
pub fn ste_identity_suite(seed: u64, trials: usize) -> Result<SuiteResult> {
    let start = Instant::now();
    let mut rng = suite_rng(seed, 5);
    let mut counterexample = None;
    let mut checked = 0;
    for _ in 0..trials {
        let n = random_len(&mut rng, 1024);
        let w = random_weights(&mut rng, n);
        let state = random_state(&mut rng);
        let mut tape = Tape::new();
        let wn = tape.param(w.clone(), &[n])?;
        let out = quantize_layer(&mut tape, wn, &state)?;
        let total = tape.sum(out.w_hat);
        tape.backward(total)?;
        let g = tape.grad_or_zeros(wn);
        checked += 1;
        if let Some(i) = g.iter().position(|&v| v != 1.0) {
            counterexample = Some(format!("  w[{i}] = {:e} under {state:?}: dŵ/dw = {:e}", w[i], g[i]));
            break;
        }
    }
    Ok(SuiteResult {
        name: "ste-identity",
        trials,
        checked,
        resampled: 0,
        counterexample,
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// Frozen discrete state of one forward pass, used to evaluate the smooth
/// surrogate the straight-through rules differentiate: every `round`, `relu`
/// and `clip` becomes `x + (f(x₀) - x₀)` and every `sign` a constant.
struct Surrogate<'a> {
    w: &'a [f64],
    c: &'a [f64],
    range: f64,
    state: &'a LayerQuantState,
    sign_bar: Vec<f64>,
    grid_offset: Vec<f64>,
    bit_offset: f64,
}

fn sgn(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

impl<'a> Surrogate<'a> {
    fn continuous_bits(&self, theta_bit: f64) -> f64 {
        theta_bit.abs().tanh() * f64::from(self.state.b_max - self.state.b_min) + f64::from(self.state.b_min)
    }

    fn width_and_step(&self, theta_dz: f64, theta_bit: f64, bit_offset: f64) -> (f64, f64) {
        let d = 2.0 * self.range * (1.0 - theta_dz.abs().tanh());
        let denom = match self.state.bits {
            BitMode::Fixed(b) => 2f64.powi(b as i32 - 1) - 1.5,
            BitMode::Learned { .. } => 2f64.powf(self.continuous_bits(theta_bit) + bit_offset - 1.0) - 1.5,
        };
        (d, (self.range - d / 2.0) / denom + self.state.epsilon)
    }

    fn new(w: &'a [f64], c: &'a [f64], state: &'a LayerQuantState, w_bar: &[i32]) -> Result<Self> {
        let range = quantile_abs(w, state.quantile)?;
        let theta_bit = state.theta_bit().unwrap_or(0.0);
        let mut sur = Surrogate {
            w,
            c,
            range,
            state,
            sign_bar: w_bar.iter().map(|&k| sgn(f64::from(k))).collect(),
            grid_offset: Vec::new(),
            bit_offset: 0.0,
        };
        if state.theta_bit().is_some() {
            let cont = sur.continuous_bits(theta_bit);
            sur.bit_offset = cont.round() - cont;
        }
        let (d, s) = sur.width_and_step(state.theta_dz, theta_bit, sur.bit_offset);
        for (&wi, &k) in w.iter().zip(w_bar) {
            let kept = ((wi.abs() - d / 2.0) + s / 2.0).max(0.0);
            sur.grid_offset.push(f64::from(k) - sgn(wi) * kept / s);
        }
        Ok(sur)
    }

    /// Under the surrogate `Σ c_i ŵ_i = A·δ + B·s + const` with
    /// `A = Σ c_i (sign(w̄_i) - sign(w_i))` and `B = Σ c_i (w̄_i - ratio_i)`, so
    /// the central difference is taken on `δ` and `s` directly, keeping the
    /// large `θ`-independent part out of the subtraction.
    fn central_difference(&self, theta_dz: f64, theta_bit: f64, d_dz: f64, d_bit: f64, h: f64) -> f64 {
        let a: f64 = (0..self.w.len())
            .map(|i| self.c[i] * (self.sign_bar[i] - sgn(self.w[i])))
            .sum();
        let b: f64 = (0..self.w.len()).map(|i| self.c[i] * self.grid_offset[i]).sum();
        let eval = |t: f64| {
            let (d, s) = self.width_and_step(theta_dz + t * d_dz, theta_bit + t * d_bit, self.bit_offset);
            (d / 2.0 - s / 2.0, s)
        };
        let (dp, sp) = eval(h);
        let (dm, sm) = eval(-h);
        (a * (dp - dm) + b * (sp - sm)) / (2.0 * h)
    }
}

struct TapeEval {
    w_bar: Vec<i32>,
    bits: u32,
    grad_dz: f64,
    grad_bit: Option<f64>,
}

fn tape_eval(w: &[f64], c: &[f64], state: &LayerQuantState) -> Result<TapeEval> {
    let mut tape = Tape::new();
    let wn = tape.param(w.to_vec(), &[w.len()])?;
    let cn = tape.constant(c.to_vec(), &[c.len()])?;
    let out = quantize_layer(&mut tape, wn, state)?;
    let weighted = tape.mul(cn, out.w_hat)?;
    let loss = tape.sum(weighted);
    tape.backward(loss)?;
    let grad = |id: Option<crate::autodiff::NodeId>| id.map(|n| tape.grad_or_zeros(n)[0]);
    Ok(TapeEval {
        w_bar: out.w_bar.clone(),
        bits: out.bits,
        grad_dz: grad(out.theta_dz).unwrap_or(0.0),
        grad_bit: grad(out.theta_bit),
    })
}

fn relative_error(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale == 0.0 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}

/// Tape gradients with respect to `θ_dz` and `θ_bit` agree with central
/// differences of the straight-through surrogate.
pub fn theta_gradient_suite(seed: u64, trials: usize) -> Result<SuiteResult> {
    let start = Instant::now();
    let mut rng = suite_rng(seed, 6);
    let mut counterexample = None;
    let mut checked = 0;
    let mut resampled = 0;
    let h = FD_STEP;
    while checked < trials {
        let n = rng.random_range(4..=64);
        let sigma = log_uniform(&mut rng, 0.1, 1.0);
        let w: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0) * sigma).collect();
        let c: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let state = random_state(&mut rng);
        let center = tape_eval(&w, &c, &state)?;

        let mut perturbed = Vec::new();
        for (dz, db) in [(h, 0.0), (-h, 0.0), (0.0, h), (0.0, -h)] {
            let mut p = state.clone();
            p.theta_dz += dz;
            if let BitMode::Learned { theta_bit } = &mut p.bits {
                *theta_bit += db;
            }
            perturbed.push(p);
        }
        let mut crosses = false;
        for p in &perturbed {
            let e = tape_eval(&w, &c, p)?;
            crosses |= e.w_bar != center.w_bar || e.bits != center.bits;
        }
        if crosses {
            resampled += 1;
            continue;
        }
        checked += 1;

        let sur = Surrogate::new(&w, &c, &state, &center.w_bar)?;
        let tb = state.theta_bit().unwrap_or(0.0);
        let fd_dz = sur.central_difference(state.theta_dz, tb, 1.0, 0.0, h);
        let mut checks = vec![("θ_dz", center.grad_dz, fd_dz)];
        if let Some(g) = center.grad_bit {
            let fd_bit = sur.central_difference(state.theta_dz, tb, 0.0, 1.0, h);
            checks.push(("θ_bit", g, fd_bit));
        }
        if let Some((name, g, fd)) = checks.into_iter().find(|&(_, g, fd)| relative_error(g, fd) >= FD_TOLERANCE) {
            counterexample = Some(format!(
                "  {name}: tape {g:e} vs central difference {fd:e} (relative {:e})\n  n = {n}, state {state:?}",
                relative_error(g, fd)
            ));
            break;
        }
    }
    Ok(SuiteResult {
        name: "theta-gradients",
        trials,
        checked,
        resampled,
        counterexample,
        seconds: start.elapsed().as_secs_f64(),
    })
}
