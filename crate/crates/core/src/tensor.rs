//! Dense row-major `f64` tensors and the numeric kernels behind the
//! autodiff graph (GEMM, im2col convolution, nearest upsampling).

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::invalid(format!(
                "tensor shape {shape:?} needs {numel} elements, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// First element; the value of a scalar tensor.
    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn dims4(&self) -> [usize; 4] {
        assert_eq!(self.shape.len(), 4, "expected rank-4 tensor, got {:?}", self.shape);
        [self.shape[0], self.shape[1], self.shape[2], self.shape[3]]
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        Self::new(shape.to_vec(), self.data.clone())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self::from_parts(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Self {
        debug_assert_eq!(self.shape, other.shape);
        Self::from_parts(
            self.shape.clone(),
            self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        )
    }

    pub(crate) fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn permute(&self, perm: &[usize]) -> Self {
        let rank = self.shape.len();
        assert_eq!(perm.len(), rank);
        let out_shape: Vec<usize> = perm.iter().map(|&p| self.shape[p]).collect();
        let mut in_strides = vec![1usize; rank];
        for i in (0..rank.saturating_sub(1)).rev() {
            in_strides[i] = in_strides[i + 1] * self.shape[i + 1];
        }
        let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
        let mut out = Vec::with_capacity(self.data.len());
        let mut index = vec![0usize; rank];
        let mut offset = 0usize;
        for _ in 0..self.data.len() {
            out.push(self.data[offset]);
            for d in (0..rank).rev() {
                index[d] += 1;
                offset += strides[d];
                if index[d] < out_shape[d] {
                    break;
                }
                offset -= strides[d] * out_shape[d];
                index[d] = 0;
            }
        }
        Self::from_parts(out_shape, out)
    }

    /// SHA-256 over the shape and the little-endian bytes of every value.
    pub fn content_hash(&self) -> String {
        let mut hasher = Sha256::new();
        self.feed_hash(&mut hasher);
        hex::encode(hasher.finalize())
    }

    pub(crate) fn feed_hash(&self, hasher: &mut Sha256) {
        hasher.update((self.shape.len() as u64).to_le_bytes());
        for &d in &self.shape {
            hasher.update((d as u64).to_le_bytes());
        }
        for v in &self.data {
            hasher.update(v.to_le_bytes());
        }
    }
}

pub(crate) fn inverse_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

/// `c = op(a) * op(b) + beta * c` with `op(a)` of shape `m x k` and `op(b)` of
/// shape `k x n`; all buffers row-major.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    c: &mut [f64],
    beta: f64,
) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: bounds are checked above and the strides describe the row-major
    // layouts of the borrowed slices; `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_height: usize,
    pub out_width: usize,
}

impl ConvGeometry {
    pub fn new(channels: usize, height: usize, width: usize, kernel: usize, stride: usize, pad: usize) -> Option<Self> {
        if height + 2 * pad < kernel || width + 2 * pad < kernel || stride == 0 {
            return None;
        }
        Some(Self {
            channels,
            height,
            width,
            kernel,
            stride,
            pad,
            out_height: (height + 2 * pad - kernel) / stride + 1,
            out_width: (width + 2 * pad - kernel) / stride + 1,
        })
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }

    fn col_rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    fn col_cols(&self) -> usize {
        self.out_height * self.out_width
    }
}

fn im2col(x: &[f64], g: &ConvGeometry, cols: &mut [f64]) {
    let hw = g.col_cols();
    for c in 0..g.channels {
        let plane = &x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..g.kernel {
            for kx in 0..g.kernel {
                let row = (c * g.kernel + ky) * g.kernel + kx;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                for oy in 0..g.out_height {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.out_width..(oy + 1) * g.out_width];
                    if iy < 0 || iy >= g.height as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= g.width as isize { 0.0 } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

fn col2im(cols: &[f64], g: &ConvGeometry, x: &mut [f64]) {
    let hw = g.col_cols();
    for c in 0..g.channels {
        let plane = &mut x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..g.kernel {
            for kx in 0..g.kernel {
                let row = (c * g.kernel + ky) * g.kernel + kx;
                let src = &cols[row * hw..(row + 1) * hw];
                for oy in 0..g.out_height {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let line = &src[oy * g.out_width..(oy + 1) * g.out_width];
                    let dst = &mut plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for (ox, v) in line.iter().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.width as isize {
                            dst[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

/// 2-D convolution, `x: [B, Ci, H, W]`, `w: [Co, Ci, k, k]`, `bias: [Co]`.
pub(crate) fn conv2d_forward(x: &Tensor, w: &Tensor, bias: Option<&Tensor>, g: &ConvGeometry) -> Tensor {
    let batch = x.shape[0];
    let out_c = w.shape[0];
    let (kk, hw) = (g.col_rows(), g.col_cols());
    let in_len = g.channels * g.height * g.width;
    let mut out = vec![0.0; batch * out_c * hw];
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![0.0; kk * hw] };
    for b in 0..batch {
        let xb = &x.data[b * in_len..(b + 1) * in_len];
        let ob = &mut out[b * out_c * hw..(b + 1) * out_c * hw];
        let rhs: &[f64] = if g.is_pointwise() {
            xb
        } else {
            im2col(xb, g, &mut cols);
            &cols
        };
        gemm(out_c, kk, hw, &w.data, false, rhs, false, ob, 0.0);
        if let Some(bias) = bias {
            for (o, &bv) in bias.data.iter().enumerate() {
                for v in &mut ob[o * hw..(o + 1) * hw] {
                    *v += bv;
                }
            }
        }
    }
    Tensor::from_parts(vec![batch, out_c, g.out_height, g.out_width], out)
}

pub(crate) struct ConvGrads {
    pub input: Option<Tensor>,
    pub weight: Option<Tensor>,
    pub bias: Option<Tensor>,
}

pub(crate) fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    grad_out: &Tensor,
    g: &ConvGeometry,
    need_input: bool,
    need_weight: bool,
    need_bias: bool,
) -> ConvGrads {
    let batch = x.shape[0];
    let out_c = w.shape[0];
    let (kk, hw) = (g.col_rows(), g.col_cols());
    let in_len = g.channels * g.height * g.width;
    let mut gx = need_input.then(|| vec![0.0; x.data.len()]);
    let mut gw = need_weight.then(|| vec![0.0; w.data.len()]);
    let mut gb = need_bias.then(|| vec![0.0; out_c]);
    let mut cols = vec![0.0; kk * hw];
    let mut dcols = if need_input && !g.is_pointwise() { vec![0.0; kk * hw] } else { Vec::new() };
    for b in 0..batch {
        let xb = &x.data[b * in_len..(b + 1) * in_len];
        let gob = &grad_out.data[b * out_c * hw..(b + 1) * out_c * hw];
        if let Some(gw) = gw.as_mut() {
            let rhs: &[f64] = if g.is_pointwise() {
                xb
            } else {
                im2col(xb, g, &mut cols);
                &cols
            };
            gemm(out_c, hw, kk, gob, false, rhs, true, gw, 1.0);
        }
        if let Some(gb) = gb.as_mut() {
            for (o, acc) in gb.iter_mut().enumerate() {
                *acc += gob[o * hw..(o + 1) * hw].iter().sum::<f64>();
            }
        }
        if let Some(gx) = gx.as_mut() {
            let gxb = &mut gx[b * in_len..(b + 1) * in_len];
            if g.is_pointwise() {
                gemm(kk, out_c, hw, &w.data, true, gob, false, gxb, 0.0);
            } else {
                gemm(kk, out_c, hw, &w.data, true, gob, false, &mut dcols, 0.0);
                col2im(&dcols, g, gxb);
            }
        }
    }
    ConvGrads {
        input: gx.map(|d| Tensor::from_parts(x.shape.clone(), d)),
        weight: gw.map(|d| Tensor::from_parts(w.shape.clone(), d)),
        bias: gb.map(|d| Tensor::from_parts(vec![out_c], d)),
    }
}

/// Nearest-neighbour 2x upsampling of `[B, C, H, W]`.
pub(crate) fn upsample2x(x: &Tensor) -> Tensor {
    let [b, c, h, w] = x.dims4();
    let mut out = vec![0.0; b * c * h * w * 4];
    for plane in 0..b * c {
        let src = &x.data[plane * h * w..(plane + 1) * h * w];
        let dst = &mut out[plane * h * w * 4..(plane + 1) * h * w * 4];
        for y in 0..2 * h {
            for xx in 0..2 * w {
                dst[y * 2 * w + xx] = src[(y / 2) * w + xx / 2];
            }
        }
    }
    Tensor::from_parts(vec![b, c, 2 * h, 2 * w], out)
}

pub(crate) fn upsample2x_backward(grad: &Tensor) -> Tensor {
    let [b, c, h2, w2] = grad.dims4();
    let (h, w) = (h2 / 2, w2 / 2);
    let mut out = vec![0.0; b * c * h * w];
    for plane in 0..b * c {
        let src = &grad.data[plane * h2 * w2..(plane + 1) * h2 * w2];
        let dst = &mut out[plane * h * w..(plane + 1) * h * w];
        for y in 0..h2 {
            for x in 0..w2 {
                dst[(y / 2) * w + x / 2] += src[y * w2 + x];
            }
        }
    }
    Tensor::from_parts(vec![b, c, h, w], out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(x: &Tensor, w: &Tensor, bias: &Tensor, stride: usize, pad: usize) -> Tensor {
        let [b, ci, h, wd] = x.dims4();
        let [co, _, k, _] = w.dims4();
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (wd + 2 * pad - k) / stride + 1;
        let mut out = Tensor::zeros(&[b, co, ho, wo]);
        for n in 0..b {
            for o in 0..co {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = bias.data[o];
                        for c in 0..ci {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (oy * stride + ky) as isize - pad as isize;
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                        continue;
                                    }
                                    acc += x.data[((n * ci + c) * h + iy as usize) * wd + ix as usize]
                                        * w.data[((o * ci + c) * k + ky) * k + kx];
                                }
                            }
                        }
                        out.data[((n * co + o) * ho + oy) * wo + ox] = acc;
                    }
                }
            }
        }
        out
    }

    fn ramp(shape: &[usize], scale: f64) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::from_parts(shape.to_vec(), (0..n).map(|i| ((i * 37 % 17) as f64 - 8.0) * scale).collect())
    }

    #[test]
    fn conv_matches_direct_loops() {
        let x = ramp(&[2, 3, 7, 6], 0.1);
        let w = ramp(&[4, 3, 3, 3], 0.05);
        let b = ramp(&[4], 0.3);
        for (stride, pad) in [(1, 1), (2, 1), (1, 0), (2, 0)] {
            let g = ConvGeometry::new(3, 7, 6, 3, stride, pad).unwrap();
            let fast = conv2d_forward(&x, &w, Some(&b), &g);
            let slow = naive_conv(&x, &w, &b, stride, pad);
            assert_eq!(fast.shape(), slow.shape());
            for (a, e) in fast.data().iter().zip(slow.data()) {
                assert!((a - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn permute_round_trip() {
        let x = ramp(&[2, 3, 4, 5], 1.0);
        let perm = [0, 2, 3, 1];
        let y = x.permute(&perm);
        assert_eq!(y.shape(), &[2, 4, 5, 3]);
        assert_eq!(y.data()[1], x.data()[20]);
        assert_eq!(y.permute(&inverse_permutation(&perm)), x);
    }

    #[test]
    fn upsample_backward_sums_blocks() {
        let g = Tensor::full(&[1, 1, 4, 4], 1.0);
        assert_eq!(upsample2x_backward(&g), Tensor::full(&[1, 1, 2, 2], 4.0));
    }
}
