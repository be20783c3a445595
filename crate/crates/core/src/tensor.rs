//! Dense row-major tensors and the handful of kernels the framework needs.
//!
//! All arithmetic is carried out in `f64`. Variances are population
//! variances: the divisor is the element count, never `count - 1`.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};

/// Dense N-dimensional array in row-major order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

/// Activation layout `(N, C, H, W)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Shape4 {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape4 {
    pub fn new(n: usize, c: usize, h: usize, w: usize) -> Result<Self> {
        if n == 0 || c == 0 || h == 0 || w == 0 {
            return Err(shape_err!("all extents must be >= 1, got ({n}, {c}, {h}, {w})"));
        }
        Ok(Shape4 { n, c, h, w })
    }

    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    pub fn to_vec(self) -> Vec<usize> {
        vec![self.n, self.c, self.h, self.w]
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(shape_err!(
                "shape {:?} needs {} elements, got {}",
                shape,
                expected,
                data.len()
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let len = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; len],
        }
    }

    /// Rank-0 tensor holding one value.
    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let len: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: (0..len).map(&mut f).collect(),
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

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1 && self.shape.iter().all(|&d| d == 1)
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() != 1 {
            return Err(shape_err!("item() on tensor of shape {:?}", self.shape));
        }
        Ok(self.data[0])
    }

    pub fn dims4(&self) -> Result<Shape4> {
        match self.shape.as_slice() {
            &[n, c, h, w] => Shape4::new(n, c, h, w),
            other => Err(shape_err!("expected an (N, C, H, W) tensor, got shape {other:?}")),
        }
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let len: usize = shape.iter().product();
        if len != self.data.len() {
            return Err(shape_err!(
                "cannot reshape {:?} ({} elements) into {:?}",
                self.shape,
                self.data.len(),
                shape
            ));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.expect_same_shape(other)?;
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn scale(&self, s: f64) -> Tensor {
        self.map(|v| v * s)
    }

    /// `self += alpha * other`.
    pub fn axpy(&mut self, alpha: f64, other: &Tensor) -> Result<()> {
        self.expect_same_shape(other)?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
        Ok(())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    pub fn norm_l2(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        self.expect_same_shape(other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn expect_same_shape(&self, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(shape_err!(
                "shape mismatch: {:?} vs {:?}",
                self.shape,
                other.shape
            ));
        }
        Ok(())
    }

    /// Copies sample `index` out of an `(N, ...)` tensor, keeping a leading extent of 1.
    pub fn sample(&self, index: usize) -> Result<Tensor> {
        self.select_rows(&[index])
    }

    /// Gathers samples along the leading axis.
    pub fn select_rows(&self, indices: &[usize]) -> Result<Tensor> {
        let (&n, rest) = self
            .shape
            .split_first()
            .ok_or_else(|| shape_err!("select_rows on a rank-0 tensor"))?;
        let stride: usize = rest.iter().product();
        let mut data = Vec::with_capacity(indices.len() * stride);
        for &i in indices {
            if i >= n {
                return Err(shape_err!("row {i} out of range for leading extent {n}"));
            }
            data.extend_from_slice(&self.data[i * stride..(i + 1) * stride]);
        }
        let mut shape = self.shape.clone();
        shape[0] = indices.len();
        Tensor::new(shape, data)
    }

    /// Concatenates tensors along the leading axis.
    pub fn concat_rows(parts: &[Tensor]) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| shape_err!("concat of zero tensors"))?;
        let tail = &first.shape[1..];
        let mut n = 0;
        let mut data = Vec::new();
        for p in parts {
            if p.shape.is_empty() || &p.shape[1..] != tail {
                return Err(shape_err!("concat: {:?} vs {:?}", p.shape, first.shape));
            }
            n += p.shape[0];
            data.extend_from_slice(&p.data);
        }
        let mut shape = first.shape.clone();
        shape[0] = n;
        Tensor::new(shape, data)
    }

    /// Matrix transpose of a rank-2 tensor.
    pub fn transpose2(&self) -> Result<Tensor> {
        let (r, c) = self.dims2()?;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor::new(vec![c, r], out)
    }

    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            &[r, c] => Ok((r, c)),
            other => Err(shape_err!("expected a matrix, got shape {other:?}")),
        }
    }
}

/// General matrix multiply `c = alpha * op(a) * op(b) + beta * c` on raw row/column strides.
///
/// `a` is `m x k`, `b` is `k x n`, `c` is `m x n`, each addressed by its own
/// row stride and column stride so transposed operands cost nothing.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    a_strides: (usize, usize),
    b: &[f64],
    b_strides: (usize, usize),
    beta: f64,
    c: &mut [f64],
    c_strides: (usize, usize),
) {
    if m == 0 || n == 0 {
        return;
    }
    let span = |rows: usize, cols: usize, (rs, cs): (usize, usize)| {
        if rows == 0 || cols == 0 {
            0
        } else {
            (rows - 1) * rs + (cols - 1) * cs + 1
        }
    };
    assert!(a.len() >= span(m, k, a_strides), "gemm: lhs buffer too small");
    assert!(b.len() >= span(k, n, b_strides), "gemm: rhs buffer too small");
    assert!(c.len() >= span(m, n, c_strides), "gemm: output buffer too small");
    // SAFETY: the asserts above bound every index the kernel can touch.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            a_strides.0 as isize,
            a_strides.1 as isize,
            b.as_ptr(),
            b_strides.0 as isize,
            b_strides.1 as isize,
            beta,
            c.as_mut_ptr(),
            c_strides.0 as isize,
            c_strides.1 as isize,
        );
    }
}

/// Standard matrix product of `[m, k]` and `[k, n]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 {
        return Err(shape_err!(
            "matmul inner extents differ: {:?} x {:?}",
            a.shape(),
            b.shape()
        ));
    }
    let mut out = vec![0.0; m * n];
    gemm(m, k, n, 1.0, a.data(), (k, 1), b.data(), (n, 1), 0.0, &mut out, (n, 1));
    Tensor::new(vec![m, n], out)
}

/// Mean and population variance over `axes`, keeping reduced axes with extent 1.
pub fn reduce_stats(x: &Tensor, axes: &[usize]) -> Result<(Tensor, Tensor)> {
    if axes.is_empty() {
        return Err(shape_err!("reduce_stats needs at least one axis"));
    }
    let rank = x.shape().len();
    let mut reduced = vec![false; rank];
    for &a in axes {
        if a >= rank {
            return Err(shape_err!("axis {a} out of range for rank {rank}"));
        }
        reduced[a] = true;
    }
    let out_shape: Vec<usize> = x
        .shape()
        .iter()
        .zip(&reduced)
        .map(|(&d, &r)| if r { 1 } else { d })
        .collect();
    let out_len: usize = out_shape.iter().product();
    let count = (x.len() / out_len.max(1)) as f64;

    // Row-major strides of the output, with reduced axes contributing nothing.
    let mut out_strides = vec![0usize; rank];
    let mut acc = 1;
    for i in (0..rank).rev() {
        if !reduced[i] {
            out_strides[i] = acc;
        }
        acc *= out_shape[i];
    }
    let target = |mut flat: usize| {
        let mut idx = 0;
        for i in (0..rank).rev() {
            let d = x.shape()[i];
            idx += (flat % d) * out_strides[i];
            flat /= d;
        }
        idx
    };

    let mut sum = vec![0.0; out_len];
    for (i, &v) in x.data().iter().enumerate() {
        sum[target(i)] += v;
    }
    let mean: Vec<f64> = sum.iter().map(|s| s / count).collect();
    let mut sq = vec![0.0; out_len];
    for (i, &v) in x.data().iter().enumerate() {
        let t = target(i);
        let d = v - mean[t];
        sq[t] += d * d;
    }
    let var = sq.iter().map(|s| s / count).collect();
    Ok((
        Tensor::new(out_shape.clone(), mean)?,
        Tensor::new(out_shape, var)?,
    ))
}

/// Output extent of a strided window, rejecting windows that do not tile exactly.
pub fn conv_output_extent(input: usize, kernel: usize, stride: usize, padding: usize) -> Result<usize> {
    if stride == 0 {
        return Err(shape_err!("stride must be >= 1"));
    }
    let padded = input + 2 * padding;
    if kernel == 0 || kernel > padded {
        return Err(shape_err!(
            "kernel {kernel} does not fit padded extent {padded}"
        ));
    }
    if (padded - kernel) % stride != 0 {
        return Err(shape_err!(
            "output extent ({input} + 2*{padding} - {kernel})/{stride} + 1 is not an integer"
        ));
    }
    Ok((padded - kernel) / stride + 1)
}

/// Geometry of one convolution call.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub input: Shape4,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn new(input: Shape4, weight_shape: &[usize], stride: usize, padding: usize) -> Result<Self> {
        let &[cout, cin, kh, kw] = weight_shape else {
            return Err(shape_err!(
                "conv weights must be (C_out, C, k, k), got {weight_shape:?}"
            ));
        };
        if cin != input.c {
            return Err(shape_err!(
                "conv expects {cin} input channels, input has {}",
                input.c
            ));
        }
        let out_h = conv_output_extent(input.h, kh, stride, padding)?;
        let out_w = conv_output_extent(input.w, kw, stride, padding)?;
        Ok(ConvGeometry {
            input,
            out_channels: cout,
            kernel_h: kh,
            kernel_w: kw,
            stride,
            padding,
            out_h,
            out_w,
        })
    }

    /// Patch length `n = k*k*c`.
    pub fn patch_len(&self) -> usize {
        self.input.c * self.kernel_h * self.kernel_w
    }

    pub fn out_plane(&self) -> usize {
        self.out_h * self.out_w
    }

    pub fn output_shape(&self) -> Vec<usize> {
        vec![self.input.n, self.out_channels, self.out_h, self.out_w]
    }
}

/// Unfolds every receptive field into a column: result is `[k*k*c, N*H'*W']`.
pub fn im2col(input: &[f64], geo: &ConvGeometry) -> Vec<f64> {
    let Shape4 { n, c, h, w } = geo.input;
    let (kh, kw, s, p) = (geo.kernel_h, geo.kernel_w, geo.stride, geo.padding);
    let plane = geo.out_plane();
    let cols_n = n * plane;
    let mut cols = vec![0.0; geo.patch_len() * cols_n];
    for ch in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ch * kh + ki) * kw + kj;
                let dst_row = &mut cols[row * cols_n..(row + 1) * cols_n];
                for b in 0..n {
                    let src = &input[(b * c + ch) * h * w..(b * c + ch + 1) * h * w];
                    let dst = &mut dst_row[b * plane..(b + 1) * plane];
                    for oy in 0..geo.out_h {
                        let iy = (oy * s + ki) as isize - p as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let src_row = &src[iy as usize * w..(iy as usize + 1) * w];
                        for ox in 0..geo.out_w {
                            let ix = (ox * s + kj) as isize - p as isize;
                            if ix >= 0 && ix < w as isize {
                                dst[oy * geo.out_w + ox] = src_row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the input grid.
pub fn col2im(cols: &[f64], geo: &ConvGeometry) -> Vec<f64> {
    let Shape4 { n, c, h, w } = geo.input;
    let (kh, kw, s, p) = (geo.kernel_h, geo.kernel_w, geo.stride, geo.padding);
    let plane = geo.out_plane();
    let cols_n = n * plane;
    let mut out = vec![0.0; n * c * h * w];
    for ch in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ch * kh + ki) * kw + kj;
                let src_row = &cols[row * cols_n..(row + 1) * cols_n];
                for b in 0..n {
                    let dst = &mut out[(b * c + ch) * h * w..(b * c + ch + 1) * h * w];
                    let src = &src_row[b * plane..(b + 1) * plane];
                    for oy in 0..geo.out_h {
                        let iy = (oy * s + ki) as isize - p as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for ox in 0..geo.out_w {
                            let ix = (ox * s + kj) as isize - p as isize;
                            if ix >= 0 && ix < w as isize {
                                dst[iy as usize * w + ix as usize] += src[oy * geo.out_w + ox];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Convolution from already-unfolded patches; returns the `(N, C_out, H', W')` buffer.
pub(crate) fn conv_from_cols(cols: &[f64], weights: &[f64], bias: Option<&[f64]>, geo: &ConvGeometry) -> Vec<f64> {
    let plane = geo.out_plane();
    let cols_n = geo.input.n * plane;
    let cout = geo.out_channels;
    let k = geo.patch_len();
    // [C_out, N*P] laid out directly as (N, C_out, P): row stride P, column (n, p) needs a
    // permutation, so multiply per sample into the strided destination.
    let mut out = vec![0.0; geo.input.n * cout * plane];
    for b in 0..geo.input.n {
        gemm(
            cout,
            k,
            plane,
            1.0,
            weights,
            (k, 1),
            &cols[b * plane..],
            (cols_n, 1),
            0.0,
            &mut out[b * cout * plane..],
            (plane, 1),
        );
    }
    if let Some(bias) = bias {
        for (i, chunk) in out.chunks_mut(plane).enumerate() {
            let bval = bias[i % cout];
            chunk.iter_mut().for_each(|v| *v += bval);
        }
    }
    out
}

/// Gradients of a convolution with respect to weights and (optionally) input.
pub(crate) fn conv_backward(
    grad_out: &[f64],
    cols: &[f64],
    weights: &[f64],
    geo: &ConvGeometry,
    need_input: bool,
) -> (Vec<f64>, Option<Vec<f64>>) {
    let plane = geo.out_plane();
    let cols_n = geo.input.n * plane;
    let cout = geo.out_channels;
    let k = geo.patch_len();
    let mut grad_w = vec![0.0; cout * k];
    for b in 0..geo.input.n {
        // dW += dY_b [cout, P] * cols_b^T [P, k]
        gemm(
            cout,
            plane,
            k,
            1.0,
            &grad_out[b * cout * plane..],
            (plane, 1),
            &cols[b * plane..],
            (1, cols_n),
            1.0,
            &mut grad_w,
            (k, 1),
        );
    }
    let grad_in = need_input.then(|| {
        let mut grad_cols = vec![0.0; k * cols_n];
        for b in 0..geo.input.n {
            // dcols_b [k, P] = W^T [k, cout] * dY_b [cout, P]
            gemm(
                k,
                cout,
                plane,
                1.0,
                weights,
                (1, k),
                &grad_out[b * cout * plane..],
                (plane, 1),
                0.0,
                &mut grad_cols[b * plane..],
                (cols_n, 1),
            );
        }
        col2im(&grad_cols, geo)
    });
    (grad_w, grad_in)
}

/// 2-D convolution of `(N, C, H, W)` input with `(C_out, C, k, k)` weights.
///
/// Each output element is the dot product of one filter with the co-located
/// patch of the input, plus the filter's bias.
pub fn conv2d_forward(
    input: &Tensor,
    weights: &Tensor,
    bias: Option<&[f64]>,
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    let geo = ConvGeometry::new(input.dims4()?, weights.shape(), stride, padding)?;
    if let Some(b) = bias {
        if b.len() != geo.out_channels {
            return Err(Error::Shape(format!(
                "bias has {} entries for {} filters",
                b.len(),
                geo.out_channels
            )));
        }
    }
    let cols = im2col(input.data(), &geo);
    let out = conv_from_cols(&cols, weights.data(), bias, &geo);
    Tensor::new(geo.output_shape(), out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    fn conv_oracle(x: &Tensor, w: &Tensor, b: Option<&[f64]>, stride: usize, pad: usize) -> Tensor {
        let [n, c, h, wd] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
        let [co, _, k, _] = [w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]];
        let oh = (h + 2 * pad - k) / stride + 1;
        let ow = (wd + 2 * pad - k) / stride + 1;
        let mut out = Tensor::zeros(&[n, co, oh, ow]);
        for bi in 0..n {
            for o in 0..co {
                for y in 0..oh {
                    for xx in 0..ow {
                        let mut acc = b.map_or(0.0, |b| b[o]);
                        for ci in 0..c {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (y * stride + ky) as isize - pad as isize;
                                    let ix = (xx * stride + kx) as isize - pad as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                        continue;
                                    }
                                    acc += w.data()[((o * c + ci) * k + ky) * k + kx]
                                        * x.data()[((bi * c + ci) * h + iy as usize) * wd + ix as usize];
                                }
                            }
                        }
                        out.data_mut()[((bi * co + o) * oh + y) * ow + xx] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_scalar_filter() {
        let x = Tensor::new(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let w = Tensor::new(vec![1, 1, 1, 1], vec![2.0]).unwrap();
        let y = conv2d_forward(&x, &w, Some(&[0.0]), 1, 0).unwrap();
        assert_eq!(y.data(), &[2.0, 4.0, 6.0, 8.0]);
    }

    #[test]
    fn conv_all_ones() {
        let x = Tensor::full(&[1, 1, 3, 3], 1.0);
        let w = Tensor::full(&[1, 1, 3, 3], 1.0);
        let y = conv2d_forward(&x, &w, None, 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.data(), &[9.0]);
    }

    #[test]
    fn conv_matches_nested_loops() {
        let x = random(&[1, 3, 8, 8], 1);
        let w = random(&[4, 3, 3, 3], 2);
        let b = [0.1, -0.2, 0.3, 0.0];
        let fast = conv2d_forward(&x, &w, Some(&b), 1, 1).unwrap();
        let slow = conv_oracle(&x, &w, Some(&b), 1, 1);
        assert!(fast.max_abs_diff(&slow).unwrap() < 1e-12);

        let x = random(&[3, 2, 9, 9], 3);
        let w = random(&[5, 2, 3, 3], 4);
        let fast = conv2d_forward(&x, &w, None, 2, 1).unwrap();
        let slow = conv_oracle(&x, &w, None, 2, 1);
        assert!(fast.max_abs_diff(&slow).unwrap() < 1e-12);
    }

    #[test]
    fn conv_identity_filter_passes_channel_through() {
        let x = random(&[2, 1, 5, 4], 5);
        let w = Tensor::full(&[1, 1, 1, 1], 1.0);
        let y = conv2d_forward(&x, &w, None, 1, 0).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn conv_rejects_bad_geometry() {
        let x = Tensor::zeros(&[1, 2, 4, 4]);
        assert!(conv2d_forward(&x, &Tensor::zeros(&[1, 3, 3, 3]), None, 1, 0).is_err());
        assert!(conv2d_forward(&x, &Tensor::zeros(&[1, 2, 5, 5]), None, 1, 0).is_err());
        // (4 - 3) / 2 is not an integer
        assert!(conv2d_forward(&x, &Tensor::zeros(&[1, 2, 3, 3]), None, 2, 0).is_err());
        assert!(conv2d_forward(&x, &Tensor::zeros(&[1, 2, 3, 3]), None, 0, 0).is_err());
    }

    #[test]
    fn matmul_examples() {
        let eye = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let m = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(matmul(&eye, &m).unwrap(), m);
        let a = Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap();
        let b = Tensor::new(vec![2, 1], vec![3.0, 4.0]).unwrap();
        assert_eq!(matmul(&a, &b).unwrap().data(), &[11.0]);
        assert!(matmul(&a, &a).is_err());
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let a = random(&[5, 7], 10);
        let b = random(&[7, 3], 11);
        let fast = matmul(&a, &b).unwrap();
        for i in 0..5 {
            for j in 0..3 {
                let mut acc = 0.0;
                for k in 0..7 {
                    acc += a.data()[i * 7 + k] * b.data()[k * 3 + j];
                }
                assert!((fast.data()[i * 3 + j] - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn reduce_stats_examples() {
        let x = Tensor::new(vec![2], vec![1.0, 3.0]).unwrap();
        let (m, v) = reduce_stats(&x, &[0]).unwrap();
        assert_eq!((m.data()[0], v.data()[0]), (2.0, 1.0));

        let c = Tensor::full(&[3, 4], 2.5);
        let (m, v) = reduce_stats(&c, &[0, 1]).unwrap();
        assert_eq!((m.data()[0], v.data()[0]), (2.5, 0.0));

        assert!(reduce_stats(&c, &[]).is_err());
        assert!(reduce_stats(&c, &[2]).is_err());
    }

    #[test]
    fn reduce_stats_rows_match_two_pass() {
        let x = random(&[4, 5], 12);
        let (m, v) = reduce_stats(&x, &[1]).unwrap();
        assert_eq!(m.shape(), &[4, 1]);
        for r in 0..4 {
            let row = &x.data()[r * 5..(r + 1) * 5];
            let mean = row.iter().sum::<f64>() / 5.0;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 5.0;
            assert!((m.data()[r] - mean).abs() < 1e-12);
            assert!((v.data()[r] - var).abs() < 1e-12);
        }
    }

    #[test]
    fn reduce_stats_inner_axes_of_4d() {
        let x = random(&[2, 3, 2, 2], 13);
        let (m, v) = reduce_stats(&x, &[0, 2, 3]).unwrap();
        assert_eq!(m.shape(), &[1, 3, 1, 1]);
        for ch in 0..3 {
            let vals: Vec<f64> = (0..2)
                .flat_map(|b| x.data()[(b * 3 + ch) * 4..(b * 3 + ch + 1) * 4].to_vec())
                .collect();
            let mean = vals.iter().sum::<f64>() / 8.0;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0;
            assert!((m.data()[ch] - mean).abs() < 1e-12);
            assert!((v.data()[ch] - var).abs() < 1e-12);
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(32))]

            #[test]
            fn conv_is_linear(seed in 0u64..1000, a in -3.0f64..3.0, b in -3.0f64..3.0) {
                let x = random(&[2, 2, 6, 6], seed);
                let y = random(&[2, 2, 6, 6], seed + 7919);
                let w = random(&[3, 2, 3, 3], seed + 104729);
                let mix = x.scale(a).add(&y.scale(b)).unwrap();
                let lhs = conv2d_forward(&mix, &w, None, 1, 1).unwrap();
                let rhs = conv2d_forward(&x, &w, None, 1, 1).unwrap().scale(a)
                    .add(&conv2d_forward(&y, &w, None, 1, 1).unwrap().scale(b)).unwrap();
                let scale = rhs.data().iter().fold(1.0f64, |m, v| m.max(v.abs()));
                prop_assert!(lhs.max_abs_diff(&rhs).unwrap() <= 1e-6 * scale);
            }

            #[test]
            fn variance_is_second_moment_minus_mean_squared(seed in 0u64..1000) {
                let x = random(&[3, 17], seed).map(|v| 4.0 * v + 1.5);
                let (m, v) = reduce_stats(&x, &[1]).unwrap();
                let (m2, _) = reduce_stats(&x.map(|v| v * v), &[1]).unwrap();
                for r in 0..3 {
                    let alt = m2.data()[r] - m.data()[r].powi(2);
                    prop_assert!((v.data()[r] - alt).abs() < 1e-10);
                }
            }
        }
    }
}
