//! Binary checkpoint container, little-endian throughout.
//!
//! ```text
//! "CDQ1"                      magic (format version 1)
//! u32  layer count
//! u32  input rank, then u64 per input dimension
//! per layer:
//!   u8   kind                 0 = linear, 1 = conv2d
//!   linear: u64 in_features, u64 out_features
//!   conv2d: u64 × 11          in_ch, out_ch, kh, kw, stride, padding,
//!                             in_h, in_w, out_h, out_w, pool
//!   u8   has_bias
//!   u64  weight count, f64 × count
//!   u64  bias count,   f64 × count
//!   u8   quant            0 = none, 1 = fixed bits, 2 = learned bits
//!   if quant != 0:
//!     f64 theta_dz
//!     fixed:   u32 bits      learned: f64 theta_bit
//!     u32 b_min, u32 b_max, f64 quantile, f64 epsilon, u8 detach_scale_from_d
//! ```

use std::fs;
use std::path::Path;

use super::{ConvSpec, LayerParams, LayerSpec, Model, ModelSpec};
use crate::error::{CodeqError, Result};
use crate::quantizers::{BitMode, LayerQuantState};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CDQ1";

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn usize(&mut self, v: usize) {
        self.u64(v as u64);
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64s(&mut self, vs: &[f64]) {
        self.usize(vs.len());
        for &v in vs {
            self.f64(v);
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            format!("truncated: need {n} bytes at offset {}, file has {}", self.pos, self.buf.len())
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self) -> std::result::Result<u8, String> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn usize(&mut self) -> std::result::Result<usize, String> {
        usize::try_from(self.u64()?).map_err(|e| e.to_string())
    }
    fn f64(&mut self) -> std::result::Result<f64, String> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64s(&mut self) -> std::result::Result<Vec<f64>, String> {
        let n = self.usize()?;
        if n > (self.buf.len() - self.pos) / 8 {
            return Err(format!("array of {n} values exceeds remaining file size"));
        }
        (0..n).map(|_| self.f64()).collect()
    }
}

pub fn to_bytes(model: &Model) -> Vec<u8> {
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(CHECKPOINT_MAGIC);
    w.u32(model.layers.len() as u32);
    w.u32(model.spec.input_shape.len() as u32);
    for &d in &model.spec.input_shape {
        w.usize(d);
    }
    for (spec, p) in model.spec.layers.iter().zip(&model.layers) {
        let has_bias = match *spec {
            LayerSpec::Linear {
                in_features,
                out_features,
                has_bias,
            } => {
                w.u8(0);
                w.usize(in_features);
                w.usize(out_features);
                has_bias
            }
            LayerSpec::Conv2d(c) => {
                w.u8(1);
                for v in [
                    c.in_channels,
                    c.out_channels,
                    c.kernel_h,
                    c.kernel_w,
                    c.stride,
                    c.padding,
                    c.in_h,
                    c.in_w,
                    c.out_h,
                    c.out_w,
                    c.pool,
                ] {
                    w.usize(v);
                }
                c.has_bias
            }
        };
        w.u8(has_bias as u8);
        w.f64s(&p.weight);
        w.f64s(&p.bias);
        match &p.quant {
            None => w.u8(0),
            Some(q) => {
                match q.bits {
                    BitMode::Fixed(b) => {
                        w.u8(1);
                        w.f64(q.theta_dz);
                        w.u32(b);
                    }
                    BitMode::Learned { theta_bit } => {
                        w.u8(2);
                        w.f64(q.theta_dz);
                        w.f64(theta_bit);
                    }
                }
                w.u32(q.b_min);
                w.u32(q.b_max);
                w.f64(q.quantile);
                w.f64(q.epsilon);
                w.u8(q.detach_scale_from_d as u8);
            }
        }
    }
    w.0
}

fn parse(buf: &[u8]) -> std::result::Result<Model, String> {
    let mut r = Reader { buf, pos: 0 };
    let magic = r.take(4).map_err(|_| "file shorter than the 4-byte magic".to_string())?;
    if magic != CHECKPOINT_MAGIC {
        return Err(format!(
            "bad magic {:?} (0x{}), expected \"CDQ1\"",
            String::from_utf8_lossy(magic),
            hex::encode(magic)
        ));
    }
    let n_layers = r.u32()? as usize;
    let rank = r.u32()? as usize;
    if rank > 8 {
        return Err(format!("implausible input rank {rank}"));
    }
    let input_shape = (0..rank).map(|_| r.usize()).collect::<std::result::Result<Vec<_>, _>>()?;
    let mut specs = Vec::with_capacity(n_layers.min(1024));
    let mut layers = Vec::with_capacity(n_layers.min(1024));
    for i in 0..n_layers {
        let kind = r.u8()?;
        let mut spec = match kind {
            0 => LayerSpec::Linear {
                in_features: r.usize()?,
                out_features: r.usize()?,
                has_bias: false,
            },
            1 => {
                let mut v = [0usize; 11];
                for slot in &mut v {
                    *slot = r.usize()?;
                }
                LayerSpec::Conv2d(ConvSpec {
                    in_channels: v[0],
                    out_channels: v[1],
                    kernel_h: v[2],
                    kernel_w: v[3],
                    stride: v[4],
                    padding: v[5],
                    in_h: v[6],
                    in_w: v[7],
                    out_h: v[8],
                    out_w: v[9],
                    pool: v[10],
                    has_bias: false,
                })
            }
            other => return Err(format!("layer {i}: unknown kind tag {other}")),
        };
        let has_bias = r.u8()? != 0;
        match &mut spec {
            LayerSpec::Linear { has_bias: hb, .. } => *hb = has_bias,
            LayerSpec::Conv2d(c) => c.has_bias = has_bias,
        }
        let weight = r.f64s()?;
        let bias = r.f64s()?;
        if weight.len() != spec.weight_len() || bias.len() != spec.bias_len() {
            return Err(format!(
                "layer {i}: {} weights / {} biases do not match spec ({} / {})",
                weight.len(),
                bias.len(),
                spec.weight_len(),
                spec.bias_len()
            ));
        }
        let quant = match r.u8()? {
            0 => None,
            tag @ (1 | 2) => {
                let theta_dz = r.f64()?;
                let bits = if tag == 1 {
                    BitMode::Fixed(r.u32()?)
                } else {
                    BitMode::Learned { theta_bit: r.f64()? }
                };
                Some(LayerQuantState {
                    theta_dz,
                    bits,
                    b_min: r.u32()?,
                    b_max: r.u32()?,
                    quantile: r.f64()?,
                    epsilon: r.f64()?,
                    detach_scale_from_d: r.u8()? != 0,
                })
            }
            other => return Err(format!("layer {i}: unknown quant tag {other}")),
        };
        if let Some(q) = &quant {
            q.validate().map_err(|e| format!("layer {i}: {e}"))?;
        }
        specs.push(spec);
        layers.push(LayerParams { weight, bias, quant });
    }
    if r.pos != buf.len() {
        return Err(format!("{} trailing bytes", buf.len() - r.pos));
    }
    let spec = ModelSpec {
        input_shape,
        layers: specs,
    };
    spec.validate().map_err(|e| e.to_string())?;
    Ok(Model { spec, layers })
}

pub fn from_bytes(buf: &[u8], path: &Path) -> Result<Model> {
    parse(buf).map_err(|message| CodeqError::Format {
        path: path.to_path_buf(),
        message,
    })
}

pub fn save_checkpoint(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, to_bytes(model)).map_err(|e| CodeqError::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Model> {
    let path = path.as_ref();
    let buf = fs::read(path).map_err(|e| CodeqError::io(path, e))?;
    from_bytes(&buf, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{build_mini_cnn, build_mlp};

    #[test]
    fn round_trip_is_bit_exact() {
        let mut m = build_mini_cnn([1, 12, 12], 3, 4).unwrap();
        m.set_quant(|i| match i {
            0 => Some(LayerQuantState::fixed(4, 2.5)),
            1 => Some(LayerQuantState::mixed(-1.25, 0.75, 2, 8)),
            _ => None,
        });
        m.layers[2].bias[1] = f64::from_bits(0x3ff0_0000_0000_0001);
        let bytes = to_bytes(&m);
        let back = from_bytes(&bytes, Path::new("mem")).unwrap();
        assert_eq!(back, m);
        assert_eq!(to_bytes(&back), bytes);
    }

    #[test]
    fn bad_magic_names_the_value() {
        let mut bytes = to_bytes(&build_mlp(3, &[], 2, 0).unwrap());
        bytes[..4].copy_from_slice(b"XXXX");
        let err = from_bytes(&bytes, Path::new("x.cdq")).unwrap_err().to_string();
        assert!(err.contains("XXXX"), "{err}");
    }

    #[test]
    fn truncation_is_reported() {
        let bytes = to_bytes(&build_mlp(3, &[2], 2, 0).unwrap());
        for cut in [2, 10, bytes.len() - 1] {
            assert!(from_bytes(&bytes[..cut], Path::new("t")).is_err());
        }
    }

    #[test]
    fn empty_model_is_rejected() {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(CHECKPOINT_MAGIC);
        bytes.extend_from_slice(&0u32.to_le_bytes());
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.extend_from_slice(&4u64.to_le_bytes());
        let err = from_bytes(&bytes, Path::new("empty")).unwrap_err().to_string();
        assert!(err.contains("no layers"), "{err}");
    }
}
