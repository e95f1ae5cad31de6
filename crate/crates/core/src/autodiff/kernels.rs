//! Dense row-major kernels used by the tape. All loops run in a fixed order so
//! results are bit-reproducible.

/// Round to nearest, ties to even. Negative zero is folded into `+0.0` so that
/// downstream reconstructions compare bit-identically.
#[inline]
pub fn round_half_even(x: f64) -> f64 {
    #[cfg(not(feature = "fault-round-half-away"))]
    let r = x.round_ties_even();
    #[cfg(feature = "fault-round-half-away")]
    let r = x.round();
    if r == 0.0 {
        0.0
    } else {
        r
    }
}

#[inline]
pub fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// `C[m,n] = A[m,k] · B[k,n]`
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cj, bj) in row.iter_mut().zip(brow) {
                *cj += aip * bj;
            }
        }
    }
    c
}

/// `C[m,k] = A[m,n] · B[k,n]ᵀ`
pub fn matmul_a_bt(a: &[f64], b: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * k];
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            c[i * k + p] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    c
}

/// `C[k,n] = A[m,k]ᵀ · B[m,n]`
pub fn matmul_at_b(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; k * n];
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let crow = &mut c[p * n..(p + 1) * n];
            for (cj, bj) in crow.iter_mut().zip(brow) {
                *cj += aip * bj;
            }
        }
    }
    c
}

/// Geometry of a 2-D convolution over `[N, C, H, W]` inputs with `[O, C, KH, KW]`
/// kernels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub in_ch: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_ch: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn output_size(input: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
        let padded = input + 2 * padding;
        if stride == 0 || padded < kernel {
            return None;
        }
        Some((padded - kernel) / stride + 1)
    }

    fn patch_len(&self) -> usize {
        self.in_ch * self.kh * self.kw
    }

    fn spatial_out(&self) -> usize {
        self.out_h * self.out_w
    }
}

/// Unfold one image `[C, H, W]` into columns `[C·KH·KW, OH·OW]`.
pub fn im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let cols_n = g.spatial_out();
    let mut cols = vec![0.0; g.patch_len() * cols_n];
    for c in 0..g.in_ch {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                for oi in 0..g.out_h {
                    let ii = (oi * g.stride + ki) as isize - g.padding as isize;
                    if ii < 0 || ii >= g.in_h as isize {
                        continue;
                    }
                    for oj in 0..g.out_w {
                        let jj = (oj * g.stride + kj) as isize - g.padding as isize;
                        if jj < 0 || jj >= g.in_w as isize {
                            continue;
                        }
                        cols[row * cols_n + oi * g.out_w + oj] =
                            x[(c * g.in_h + ii as usize) * g.in_w + jj as usize];
                    }
                }
            }
        }
    }
    cols
}

/// Fold columns back into an image, summing overlapping contributions.
pub fn col2im_add(cols: &[f64], g: &ConvGeom, out: &mut [f64]) {
    let cols_n = g.spatial_out();
    for c in 0..g.in_ch {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                for oi in 0..g.out_h {
                    let ii = (oi * g.stride + ki) as isize - g.padding as isize;
                    if ii < 0 || ii >= g.in_h as isize {
                        continue;
                    }
                    for oj in 0..g.out_w {
                        let jj = (oj * g.stride + kj) as isize - g.padding as isize;
                        if jj < 0 || jj >= g.in_w as isize {
                            continue;
                        }
                        out[(c * g.in_h + ii as usize) * g.in_w + jj as usize] +=
                            cols[row * cols_n + oi * g.out_w + oj];
                    }
                }
            }
        }
    }
}

pub fn conv2d_forward(x: &[f64], w: &[f64], g: &ConvGeom) -> Vec<f64> {
    let img = g.in_ch * g.in_h * g.in_w;
    let out_img = g.out_ch * g.spatial_out();
    let mut out = Vec::with_capacity(g.batch * out_img);
    for n in 0..g.batch {
        let cols = im2col(&x[n * img..(n + 1) * img], g);
        out.extend(matmul(w, &cols, g.out_ch, g.patch_len(), g.spatial_out()));
    }
    out
}

/// Returns `(grad_x, grad_w)` for an upstream gradient `gy` of shape `[N, O, OH, OW]`.
pub fn conv2d_backward(x: &[f64], w: &[f64], gy: &[f64], g: &ConvGeom) -> (Vec<f64>, Vec<f64>) {
    let img = g.in_ch * g.in_h * g.in_w;
    let out_img = g.out_ch * g.spatial_out();
    let mut gx = vec![0.0; x.len()];
    let mut gw = vec![0.0; w.len()];
    for n in 0..g.batch {
        let cols = im2col(&x[n * img..(n + 1) * img], g);
        let gy_n = &gy[n * out_img..(n + 1) * out_img];
        let gw_n = matmul_a_bt(gy_n, &cols, g.out_ch, g.spatial_out(), g.patch_len());
        for (acc, v) in gw.iter_mut().zip(&gw_n) {
            *acc += v;
        }
        let gcols = matmul_at_b(w, gy_n, g.out_ch, g.patch_len(), g.spatial_out());
        col2im_add(&gcols, g, &mut gx[n * img..(n + 1) * img]);
    }
    (gx, gw)
}
