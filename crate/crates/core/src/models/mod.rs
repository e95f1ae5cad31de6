//! Desk-scale architectures whose weight layers route through the dead-zone
//! quantizer.

mod checkpoint;

pub use checkpoint::{from_bytes, load_checkpoint, save_checkpoint, to_bytes, CHECKPOINT_MAGIC};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::kernels::ConvGeom;
use crate::autodiff::{NodeId, Tape};
use crate::error::{CodeqError, Result};
use crate::quantizers::{quantize_layer, LayerQuantState, QuantOutcome};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
    pub in_h: usize,
    pub in_w: usize,
    /// Spatial output of the convolution itself (before pooling).
    pub out_h: usize,
    pub out_w: usize,
    /// Max-pool window applied after the activation; 1 means none.
    pub pool: usize,
    pub has_bias: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayerSpec {
    Linear {
        in_features: usize,
        out_features: usize,
        has_bias: bool,
    },
    Conv2d(ConvSpec),
}

impl LayerSpec {
    pub fn kind(&self) -> &'static str {
        match self {
            LayerSpec::Linear { .. } => "linear",
            LayerSpec::Conv2d(_) => "conv2d",
        }
    }

    pub fn weight_shape(&self) -> Vec<usize> {
        match *self {
            LayerSpec::Linear {
                in_features,
                out_features,
                ..
            } => vec![in_features, out_features],
            LayerSpec::Conv2d(c) => vec![c.out_channels, c.in_channels, c.kernel_h, c.kernel_w],
        }
    }

    pub fn weight_len(&self) -> usize {
        self.weight_shape().iter().product()
    }

    pub fn bias_len(&self) -> usize {
        match *self {
            LayerSpec::Linear {
                out_features,
                has_bias,
                ..
            } => has_bias as usize * out_features,
            LayerSpec::Conv2d(c) => c.has_bias as usize * c.out_channels,
        }
    }

    pub fn fan_in(&self) -> usize {
        match *self {
            LayerSpec::Linear { in_features, .. } => in_features,
            LayerSpec::Conv2d(c) => c.in_channels * c.kernel_h * c.kernel_w,
        }
    }

    /// Per-sample input shape this layer expects.
    pub fn input_shape(&self) -> Vec<usize> {
        match *self {
            LayerSpec::Linear { in_features, .. } => vec![in_features],
            LayerSpec::Conv2d(c) => vec![c.in_channels, c.in_h, c.in_w],
        }
    }

    /// Per-sample output shape, after pooling for convolutions.
    pub fn output_shape(&self) -> Vec<usize> {
        match *self {
            LayerSpec::Linear { out_features, .. } => vec![out_features],
            LayerSpec::Conv2d(c) => vec![c.out_channels, c.out_h / c.pool, c.out_w / c.pool],
        }
    }

    fn validate(&self) -> Result<()> {
        match *self {
            LayerSpec::Linear {
                in_features,
                out_features,
                ..
            } => {
                if in_features == 0 || out_features == 0 {
                    return Err(CodeqError::Config("linear layer with a zero dimension".into()));
                }
            }
            LayerSpec::Conv2d(c) => {
                if c.in_channels == 0 || c.out_channels == 0 || c.kernel_h == 0 || c.kernel_w == 0 || c.pool == 0 {
                    return Err(CodeqError::Config("conv layer with a zero dimension".into()));
                }
                let oh = ConvGeom::output_size(c.in_h, c.kernel_h, c.stride, c.padding);
                let ow = ConvGeom::output_size(c.in_w, c.kernel_w, c.stride, c.padding);
                if oh != Some(c.out_h) || ow != Some(c.out_w) {
                    return Err(CodeqError::Config(format!(
                        "conv output {}x{} inconsistent with input {}x{}, kernel {}x{}, stride {}, padding {}",
                        c.out_h, c.out_w, c.in_h, c.in_w, c.kernel_h, c.kernel_w, c.stride, c.padding
                    )));
                }
                if c.out_h < c.pool || c.out_w < c.pool {
                    return Err(CodeqError::Config("pool window larger than conv output".into()));
                }
            }
        }
        Ok(())
    }
}

/// Architecture: weight layers in order with ReLU between them. A convolution
/// followed by a linear layer is flattened in between.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub input_shape: Vec<usize>,
    pub layers: Vec<LayerSpec>,
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(CodeqError::Config("model has no layers".into()));
        }
        let mut shape = self.input_shape.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            layer.validate()?;
            let expected = layer.input_shape();
            let compatible = match layer {
                LayerSpec::Linear { in_features, .. } => shape.iter().product::<usize>() == *in_features,
                LayerSpec::Conv2d(_) => shape == expected,
            };
            if !compatible {
                return Err(CodeqError::Config(format!(
                    "layer {i} expects input {expected:?}, previous output is {shape:?}"
                )));
            }
            shape = layer.output_shape();
        }
        Ok(())
    }

    pub fn input_len(&self) -> usize {
        self.input_shape.iter().product()
    }

    pub fn num_classes(&self) -> usize {
        self.layers.last().map_or(0, |l| l.output_shape().iter().product())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
    /// `None` keeps the layer at full precision.
    pub quant: Option<LayerQuantState>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub spec: ModelSpec,
    pub layers: Vec<LayerParams>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ForwardMode {
    /// Unquantized weights.
    Fp32,
    /// Every layer with a quant state uses its dead-zone reconstruction.
    Codeq,
}

/// Tape handles for one layer of a forward pass.
#[derive(Debug, Clone)]
pub struct LayerTrace {
    pub weight: NodeId,
    pub bias: Option<NodeId>,
    pub quant: Option<QuantOutcome>,
}

#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub logits: NodeId,
    pub layers: Vec<LayerTrace>,
}

fn kaiming_uniform(rng: &mut ChaCha8Rng, n: usize, fan_in: usize) -> Vec<f64> {
    let bound = (6.0 / fan_in as f64).sqrt();
    (0..n).map(|_| rng.random_range(-bound..bound)).collect()
}

impl Model {
    /// Kaiming-uniform weights and zero biases, deterministic in `seed`.
    pub fn init(spec: ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = spec
            .layers
            .iter()
            .map(|l| LayerParams {
                weight: kaiming_uniform(&mut rng, l.weight_len(), l.fan_in()),
                bias: vec![0.0; l.bias_len()],
                quant: None,
            })
            .collect();
        Ok(Self { spec, layers })
    }

    pub fn num_weights(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len()).sum()
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    /// Apply `f(layer index)` as every layer's quant state.
    pub fn set_quant(&mut self, mut f: impl FnMut(usize) -> Option<LayerQuantState>) {
        for (i, layer) in self.layers.iter_mut().enumerate() {
            layer.quant = f(i);
        }
    }

    pub fn summary(&self) -> String {
        let mut out = format!("input {:?}\n", self.spec.input_shape);
        for (i, (spec, p)) in self.spec.layers.iter().zip(&self.layers).enumerate() {
            out.push_str(&format!(
                "  [{i}] {:<7} weight {:?} bias {} -> {:?}\n",
                spec.kind(),
                spec.weight_shape(),
                p.bias.len(),
                spec.output_shape()
            ));
        }
        out.push_str(&format!("parameters: {}\n", self.num_params()));
        out
    }

    /// Record a forward pass of `input` (shape `[N, ..input_shape]`) on `tape`.
    /// Weights and biases become trainable leaves.
    pub fn forward_on_tape(&self, tape: &mut Tape, input: NodeId, mode: ForwardMode) -> Result<ForwardTrace> {
        let batch = tape.shape(input)[0];
        if tape.value(input).len() != batch * self.spec.input_len() {
            return Err(CodeqError::Shape(format!(
                "batch shape {:?} does not match model input {:?}",
                tape.shape(input),
                self.spec.input_shape
            )));
        }
        let mut x = input;
        let mut traces = Vec::with_capacity(self.layers.len());
        let last = self.layers.len() - 1;
        for (i, (spec, params)) in self.spec.layers.iter().zip(&self.layers).enumerate() {
            let weight = tape.param(params.weight.clone(), &spec.weight_shape())?;
            let quant = match (mode, &params.quant) {
                (ForwardMode::Codeq, Some(state)) => Some(quantize_layer(tape, weight, state)?),
                _ => None,
            };
            let effective = quant.as_ref().map_or(weight, |q| q.w_hat);
            let bias = if params.bias.is_empty() {
                None
            } else {
                Some(tape.param(params.bias.clone(), &[params.bias.len()])?)
            };
            x = match *spec {
                LayerSpec::Linear { in_features, .. } => {
                    let flat = tape.reshape(x, &[batch, in_features])?;
                    let y = tape.matmul(flat, effective)?;
                    match bias {
                        Some(b) => tape.add_bias(y, b)?,
                        None => y,
                    }
                }
                LayerSpec::Conv2d(c) => {
                    let img = tape.reshape(x, &[batch, c.in_channels, c.in_h, c.in_w])?;
                    let y = tape.conv2d(img, effective, c.stride, c.padding)?;
                    match bias {
                        Some(b) => tape.add_channel_bias(y, b)?,
                        None => y,
                    }
                }
            };
            if i != last {
                x = tape.relu(x);
                if let LayerSpec::Conv2d(c) = spec {
                    if c.pool > 1 {
                        x = tape.max_pool2d(x, c.pool)?;
                    }
                }
            }
            traces.push(LayerTrace { weight, bias, quant });
        }
        let classes = self.spec.num_classes();
        let logits = tape.reshape(x, &[batch, classes])?;
        Ok(ForwardTrace { logits, layers: traces })
    }

    /// Logits `[N, classes]` for a flat batch of `n` samples.
    pub fn forward(&self, batch: &[f64], n: usize, mode: ForwardMode) -> Result<Vec<f64>> {
        let mut shape = vec![n];
        shape.extend(&self.spec.input_shape);
        let mut tape = Tape::new();
        let input = tape.constant(batch.to_vec(), &shape)?;
        let trace = self.forward_on_tape(&mut tape, input, mode)?;
        Ok(tape.value(trace.logits).to_vec())
    }

    /// Reconstructed weights of every layer under its quant state (or the raw
    /// weights when the layer is unquantized), with the quantizer outcome.
    pub fn quantized_weights(&self) -> Result<Vec<(Vec<f64>, Option<QuantOutcome>)>> {
        let mut tape = Tape::new();
        self.spec
            .layers
            .iter()
            .zip(&self.layers)
            .map(|(spec, p)| {
                let w = tape.constant(p.weight.clone(), &spec.weight_shape())?;
                Ok(match &p.quant {
                    Some(state) => {
                        let q = quantize_layer(&mut tape, w, state)?;
                        (tape.value(q.w_hat).to_vec(), Some(q))
                    }
                    None => (p.weight.clone(), None),
                })
            })
            .collect()
    }
}

/// MLP `input_dim -> hidden.. -> num_classes` with ReLU activations.
pub fn build_mlp(input_dim: usize, hidden: &[usize], num_classes: usize, seed: u64) -> Result<Model> {
    if input_dim == 0 || num_classes == 0 || hidden.contains(&0) {
        return Err(CodeqError::Config("MLP dimensions must be positive".into()));
    }
    let mut dims = vec![input_dim];
    dims.extend_from_slice(hidden);
    dims.push(num_classes);
    let layers = dims
        .windows(2)
        .map(|w| LayerSpec::Linear {
            in_features: w[0],
            out_features: w[1],
            has_bias: true,
        })
        .collect();
    Model::init(
        ModelSpec {
            input_shape: vec![input_dim],
            layers,
        },
        seed,
    )
}

/// `conv(16, 3×3) → ReLU → pool2 → conv(32, 3×3) → ReLU → pool2 → linear`,
/// stride 1 and no padding.
pub fn build_mini_cnn(input_shape: [usize; 3], num_classes: usize, seed: u64) -> Result<Model> {
    let [c, h, w] = input_shape;
    if c == 0 || num_classes == 0 {
        return Err(CodeqError::Config("mini-CNN dimensions must be positive".into()));
    }
    let conv = |in_channels, out_channels, in_h, in_w| -> Result<ConvSpec> {
        let out_h = ConvGeom::output_size(in_h, 3, 1, 0)
            .ok_or_else(|| CodeqError::Config(format!("input {in_h}x{in_w} too small for mini-CNN")))?;
        let out_w = ConvGeom::output_size(in_w, 3, 1, 0)
            .ok_or_else(|| CodeqError::Config(format!("input {in_h}x{in_w} too small for mini-CNN")))?;
        Ok(ConvSpec {
            in_channels,
            out_channels,
            kernel_h: 3,
            kernel_w: 3,
            stride: 1,
            padding: 0,
            in_h,
            in_w,
            out_h,
            out_w,
            pool: 2,
            has_bias: true,
        })
    };
    let c1 = conv(c, 16, h, w)?;
    let c2 = conv(16, 32, c1.out_h / 2, c1.out_w / 2)?;
    let flat = 32 * (c2.out_h / 2) * (c2.out_w / 2);
    let spec = ModelSpec {
        input_shape: input_shape.to_vec(),
        layers: vec![
            LayerSpec::Conv2d(c1),
            LayerSpec::Conv2d(c2),
            LayerSpec::Linear {
                in_features: flat,
                out_features: num_classes,
                has_bias: true,
            },
        ],
    };
    Model::init(spec, seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mlp_parameter_count() {
        let m = build_mlp(784, &[256], 10, 0).unwrap();
        assert_eq!(m.layers.len(), 2);
        assert_eq!(m.num_weights(), 784 * 256 + 256 * 10);
        assert_eq!(m.num_params(), 784 * 256 + 256 * 10 + 256 + 10);
    }

    #[test]
    fn same_seed_same_weights() {
        let a = build_mlp(20, &[8], 3, 11).unwrap();
        let b = build_mlp(20, &[8], 3, 11).unwrap();
        let c = build_mlp(20, &[8], 3, 12).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_eq!(build_mini_cnn([1, 28, 28], 10, 5).unwrap(), build_mini_cnn([1, 28, 28], 10, 5).unwrap());
    }

    #[test]
    fn kaiming_bound_respected() {
        let m = build_mlp(50, &[], 4, 0).unwrap();
        let bound = (6.0f64 / 50.0).sqrt();
        assert!(m.layers[0].weight.iter().all(|w| w.abs() < bound));
    }

    #[test]
    fn zero_image_gives_biases() {
        let mut m = build_mlp(6, &[5], 3, 0).unwrap();
        m.layers[1].bias = vec![0.1, -0.2, 0.3];
        let logits = m.forward(&[0.0; 12], 2, ForwardMode::Fp32).unwrap();
        assert_eq!(logits, vec![0.1, -0.2, 0.3, 0.1, -0.2, 0.3]);
    }

    #[test]
    fn mini_cnn_shapes() {
        let m = build_mini_cnn([1, 28, 28], 10, 0).unwrap();
        let LayerSpec::Conv2d(c1) = m.spec.layers[0] else { panic!() };
        let LayerSpec::Conv2d(c2) = m.spec.layers[1] else { panic!() };
        assert_eq!((c1.out_h, c1.out_w), (26, 26));
        assert_eq!((c2.out_h, c2.out_w), (11, 11));
        // 16·1·9 + 16, 32·16·9 + 32, 32·5·5·10 + 10
        assert_eq!(m.num_params(), 160 + 4640 + 8010);
        let logits = m.forward(&vec![0.5; 2 * 784], 2, ForwardMode::Fp32).unwrap();
        assert_eq!(logits.len(), 20);

        let m = build_mini_cnn([3, 32, 32], 10, 0).unwrap();
        assert_eq!(m.spec.layers[2].input_shape(), vec![32 * 6 * 6]);
    }

    #[test]
    fn bad_batch_shape_is_rejected() {
        let m = build_mlp(4, &[3], 2, 0).unwrap();
        assert!(m.forward(&[0.0; 7], 2, ForwardMode::Fp32).is_err());
    }

    #[test]
    fn inconsistent_spec_is_rejected() {
        let spec = ModelSpec {
            input_shape: vec![4],
            layers: vec![
                LayerSpec::Linear { in_features: 4, out_features: 3, has_bias: true },
                LayerSpec::Linear { in_features: 5, out_features: 2, has_bias: true },
            ],
        };
        assert!(Model::init(spec, 0).is_err());
    }

    #[test]
    fn fully_pruned_codeq_model_depends_only_on_biases() {
        let mut m = build_mlp(6, &[4], 3, 1).unwrap();
        m.layers[1].bias = vec![0.5, -0.5, 0.25];
        m.set_quant(|_| Some(LayerQuantState::fixed(4, 0.0).with_quantile(1.0)));
        let a = m.forward(&[0.3, -1.0, 2.0, 0.1, 0.0, 1.0], 1, ForwardMode::Codeq).unwrap();
        let b = m.forward(&[-5.0, 1.0, 0.2, 3.0, 1.0, -1.0], 1, ForwardMode::Codeq).unwrap();
        assert_eq!(a, vec![0.5, -0.5, 0.25]);
        assert_eq!(a, b);
    }
}
