//! MAC and bit-operation accounting.
//!
//! Dense MACs of a layer are scaled by its weight density to model idealised
//! unstructured sparsity, then by weight and activation precision:
//! `BOPs = density · MACs_dense · w_bits · a_bits`. The baseline is the dense
//! layer at 32-bit weights. Biases are excluded everywhere.

use serde::{Deserialize, Serialize};

use crate::error::{CodeqError, Result};
use crate::models::{LayerSpec, Model};

/// Activation precision; activations are never quantized.
pub const A_BITS: u32 = 32;
/// Weight precision of the uncompressed baseline.
pub const BASELINE_W_BITS: u32 = 32;

pub fn macs_dense(spec: &LayerSpec) -> u64 {
    match *spec {
        LayerSpec::Linear {
            in_features,
            out_features,
            ..
        } => (in_features * out_features) as u64,
        LayerSpec::Conv2d(c) => (c.in_channels * c.out_channels * c.kernel_h * c.kernel_w * c.out_h * c.out_w) as u64,
    }
}

pub fn bops_layer(spec: &LayerSpec, density: f64, w_bits: u32, a_bits: u32) -> Result<f64> {
    if !(0.0..=1.0).contains(&density) {
        return Err(CodeqError::Domain(format!("density {density} outside [0, 1]")));
    }
    if w_bits == 0 || a_bits == 0 {
        return Err(CodeqError::Domain("bit-widths must be >= 1".into()));
    }
    Ok(density * macs_dense(spec) as f64 * f64::from(w_bits) * f64::from(a_bits))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerReport {
    pub name: String,
    pub kind: String,
    pub params: usize,
    pub density: f64,
    pub w_bits: u32,
    /// Dead-zone width; `None` for an unquantized layer.
    pub deadzone: Option<f64>,
    pub scale: Option<f64>,
    pub theta_dz: Option<f64>,
    pub theta_bit: Option<f64>,
    pub macs_dense: u64,
    pub macs_unstructured: f64,
    pub bops: f64,
    pub baseline_bops: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompressionReport {
    pub layers: Vec<LayerReport>,
    pub total_bops: f64,
    pub baseline_bops: f64,
    /// `total_bops / baseline_bops`
    pub relative_bops: f64,
    pub overall_sparsity: f64,
    pub mean_bits: f64,
    pub accuracy: Option<f64>,
}

impl CompressionReport {
    pub fn relative_bops_percent(&self) -> f64 {
        100.0 * self.relative_bops
    }

    pub fn to_table(&self) -> String {
        let mut out = format!(
            "{:<10} {:<7} {:>9} {:>8} {:>5} {:>12} {:>16} {:>9}\n",
            "layer", "kind", "params", "density", "bits", "deadzone", "BOPs", "rel %"
        );
        for l in &self.layers {
            out.push_str(&format!(
                "{:<10} {:<7} {:>9} {:>8.4} {:>5} {:>12} {:>16.0} {:>9.4}\n",
                l.name,
                l.kind,
                l.params,
                l.density,
                l.w_bits,
                l.deadzone.map_or("-".to_string(), |d| format!("{d:.6}")),
                l.bops,
                100.0 * l.bops / l.baseline_bops
            ));
        }
        out.push_str(&format!(
            "total BOPs {:.0} / baseline {:.0} = {:.4}%  sparsity {:.4}  mean bits {:.3}",
            self.total_bops,
            self.baseline_bops,
            self.relative_bops_percent(),
            self.overall_sparsity,
            self.mean_bits
        ));
        if let Some(acc) = self.accuracy {
            out.push_str(&format!("  accuracy {acc:.4}"));
        }
        out.push('\n');
        out
    }
}

/// Per-layer inputs for [`report_from_parts`].
#[derive(Debug, Clone)]
pub struct LayerStats {
    pub spec: LayerSpec,
    pub nonzero: usize,
    pub total: usize,
    pub w_bits: u32,
    pub deadzone: Option<f64>,
    pub scale: Option<f64>,
    pub theta_dz: Option<f64>,
    pub theta_bit: Option<f64>,
}

pub fn report_from_parts(stats: &[LayerStats], accuracy: Option<f64>) -> Result<CompressionReport> {
    if stats.is_empty() {
        return Err(CodeqError::Domain("cannot report on a model without layers".into()));
    }
    let mut layers = Vec::with_capacity(stats.len());
    for (i, s) in stats.iter().enumerate() {
        if s.total == 0 {
            return Err(CodeqError::Empty("layer without weights"));
        }
        let density = s.nonzero as f64 / s.total as f64;
        let macs = macs_dense(&s.spec);
        layers.push(LayerReport {
            name: format!("layer{i}"),
            kind: s.spec.kind().to_string(),
            params: s.total,
            density,
            w_bits: s.w_bits,
            deadzone: s.deadzone,
            scale: s.scale,
            theta_dz: s.theta_dz,
            theta_bit: s.theta_bit,
            macs_dense: macs,
            macs_unstructured: density * macs as f64,
            bops: bops_layer(&s.spec, density, s.w_bits, A_BITS)?,
            baseline_bops: bops_layer(&s.spec, 1.0, BASELINE_W_BITS, A_BITS)?,
        });
    }
    let total_bops: f64 = layers.iter().map(|l| l.bops).sum();
    let baseline_bops: f64 = layers.iter().map(|l| l.baseline_bops).sum();
    let total: usize = stats.iter().map(|s| s.total).sum();
    let nonzero: usize = stats.iter().map(|s| s.nonzero).sum();
    Ok(CompressionReport {
        total_bops,
        baseline_bops,
        relative_bops: total_bops / baseline_bops,
        overall_sparsity: 1.0 - nonzero as f64 / total as f64,
        mean_bits: layers.iter().map(|l| f64::from(l.w_bits)).sum::<f64>() / layers.len() as f64,
        accuracy,
        layers,
    })
}

/// Report on a model as it would run in the compressed forward pass: density
/// from the zeros of the reconstructed weights, bits from the quant state
/// (32 for unquantized layers).
pub fn build_report(model: &Model, accuracy: Option<f64>) -> Result<CompressionReport> {
    let weights = model.quantized_weights()?;
    let stats: Vec<LayerStats> = model
        .spec
        .layers
        .iter()
        .zip(&model.layers)
        .zip(&weights)
        .map(|((spec, params), (w_hat, outcome))| LayerStats {
            spec: *spec,
            nonzero: w_hat.iter().filter(|&&v| v != 0.0).count(),
            total: w_hat.len(),
            w_bits: outcome.as_ref().map_or(BASELINE_W_BITS, |o| o.bits),
            deadzone: outcome.as_ref().map(|o| o.deadzone),
            scale: outcome.as_ref().map(|o| o.scale),
            theta_dz: params.quant.as_ref().map(|q| q.theta_dz),
            theta_bit: params.quant.as_ref().and_then(|q| q.theta_bit()),
        })
        .collect();
    report_from_parts(&stats, accuracy)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{build_mlp, ConvSpec};

    pub(crate) fn conv_16_16_8x8() -> LayerSpec {
        LayerSpec::Conv2d(ConvSpec {
            in_channels: 16,
            out_channels: 16,
            kernel_h: 3,
            kernel_w: 3,
            stride: 1,
            padding: 1,
            in_h: 8,
            in_w: 8,
            out_h: 8,
            out_w: 8,
            pool: 1,
            has_bias: false,
        })
    }

    #[test]
    fn mac_counts() {
        assert_eq!(macs_dense(&conv_16_16_8x8()), 147_456);
        let lin = LayerSpec::Linear {
            in_features: 784,
            out_features: 256,
            has_bias: true,
        };
        assert_eq!(macs_dense(&lin), 200_704);
        let tiny = LayerSpec::Conv2d(ConvSpec {
            in_channels: 1,
            out_channels: 1,
            kernel_h: 1,
            kernel_w: 1,
            stride: 1,
            padding: 0,
            in_h: 1,
            in_w: 1,
            out_h: 1,
            out_w: 1,
            pool: 1,
            has_bias: false,
        });
        assert_eq!(macs_dense(&tiny), 1);
    }

    #[test]
    fn bops_examples() {
        let conv = conv_16_16_8x8();
        let b = bops_layer(&conv, 0.25, 4, 32).unwrap();
        assert_eq!(b, 4_718_592.0);
        let dense = bops_layer(&conv, 1.0, 32, 32).unwrap();
        assert_eq!(dense, 150_994_944.0);
        assert_eq!(b / dense, 0.03125);
        assert!(bops_layer(&conv, 1.5, 4, 32).is_err());
        assert!(bops_layer(&conv, 0.5, 0, 32).is_err());
    }

    #[test]
    fn dense_fp_model_is_full_cost() {
        let m = build_mlp(10, &[6], 3, 0).unwrap();
        let r = build_report(&m, Some(0.5)).unwrap();
        assert_eq!(r.relative_bops, 1.0);
        assert_eq!(r.overall_sparsity, 0.0);
        assert_eq!(r.total_bops, r.layers.iter().map(|l| l.bops).sum::<f64>());
    }

    #[test]
    fn uniform_density_and_bits() {
        let spec = conv_16_16_8x8();
        let lin = LayerSpec::Linear {
            in_features: 100,
            out_features: 10,
            has_bias: true,
        };
        let stats = [spec, lin].map(|s| LayerStats {
            spec: s,
            nonzero: s.weight_len() / 2,
            total: s.weight_len(),
            w_bits: 4,
            deadzone: None,
            scale: None,
            theta_dz: None,
            theta_bit: None,
        });
        let r = report_from_parts(&stats, None).unwrap();
        assert_eq!(r.relative_bops, 0.0625);
    }

    #[test]
    fn fully_pruned_layer_costs_nothing() {
        let stats = [LayerStats {
            spec: conv_16_16_8x8(),
            nonzero: 0,
            total: 2304,
            w_bits: 4,
            deadzone: None,
            scale: None,
            theta_dz: None,
            theta_bit: None,
        }];
        let r = report_from_parts(&stats, None).unwrap();
        assert_eq!(r.layers[0].bops, 0.0);
        assert!(report_from_parts(&[], None).is_err());
    }
}
