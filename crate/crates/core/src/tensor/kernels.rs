//! Forward kernels and the adjoint helpers the tape uses for backward.
//!
//! Kernels validate shapes and return fresh tensors. Finiteness is checked
//! by the tape when a result is recorded, not here.

use super::{Element, Tensor};
use crate::error::{Error, Result};

fn expect_rank<T: Element>(op: &'static str, t: &Tensor<T>, rank: usize) -> Result<()> {
    if t.rank() != rank {
        return Err(Error::dim(
            op,
            format!("expected rank {rank}, got shape {:?}", t.shape()),
        ));
    }
    Ok(())
}

fn same_shape<T: Element>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dim(
            op,
            format!("shapes {:?} and {:?} differ", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

/// Matrix product of `a: m×k` and `b: k×n`.
pub fn matmul<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    matmul_t(a, false, b, false)
}

/// Matrix product with optional transposition of either operand, done via
/// strides rather than copies.
pub fn matmul_t<T: Element>(
    a: &Tensor<T>,
    trans_a: bool,
    b: &Tensor<T>,
    trans_b: bool,
) -> Result<Tensor<T>> {
    if a.rank() != 2 || b.rank() != 2 {
        return Err(Error::dim(
            "matmul",
            format!("operands must be rank 2, got {:?} and {:?}", a.shape(), b.shape()),
        ));
    }
    let (ar, ac) = (a.shape()[0], a.shape()[1]);
    let (br, bc) = (b.shape()[0], b.shape()[1]);
    let (m, k, a_strides) = if trans_a {
        (ac, ar, (1, ac as isize))
    } else {
        (ar, ac, (ac as isize, 1))
    };
    let (k2, n, b_strides) = if trans_b {
        (bc, br, (1, bc as isize))
    } else {
        (br, bc, (bc as isize, 1))
    };
    if k != k2 {
        return Err(Error::dim(
            "matmul",
            format!(
                "inner extents differ: {:?}{} x {:?}{}",
                a.shape(),
                if trans_a { "ᵀ" } else { "" },
                b.shape(),
                if trans_b { "ᵀ" } else { "" }
            ),
        ));
    }
    let mut out = vec![T::zero(); m * n];
    T::gemm(
        m,
        k,
        n,
        T::one(),
        a.data(),
        a_strides,
        b.data(),
        b_strides,
        T::zero(),
        &mut out,
    );
    Ok(Tensor::from_parts(vec![m, n], out))
}

pub fn transpose<T: Element>(x: &Tensor<T>) -> Result<Tensor<T>> {
    expect_rank("transpose", x, 2)?;
    let (r, c) = (x.shape()[0], x.shape()[1]);
    let src = x.data();
    let mut out = Vec::with_capacity(r * c);
    for j in 0..c {
        out.extend((0..r).map(|i| src[i * c + j]));
    }
    Ok(Tensor::from_parts(vec![c, r], out))
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows<T: Element>(x: &Tensor<T>) -> Result<Tensor<T>> {
    expect_rank("softmax_rows", x, 2)?;
    let c = x.shape()[1];
    let mut out = x.data().to_vec();
    for row in out.chunks_mut(c) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut total = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v = *v / total;
        }
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}

/// Adjoint of [`softmax_rows`] given its output `y`.
pub(crate) fn softmax_rows_backward<T: Element>(y: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    let c = y.shape()[1];
    let mut dx = vec![T::zero(); y.len()];
    for ((yr, dyr), dxr) in y
        .data()
        .chunks(c)
        .zip(dy.data().chunks(c))
        .zip(dx.chunks_mut(c))
    {
        let dot: T = yr.iter().zip(dyr).map(|(&a, &b)| a * b).sum();
        for ((d, &yv), &g) in dxr.iter_mut().zip(yr).zip(dyr) {
            *d = yv * (g - dot);
        }
    }
    Tensor::from_parts(y.shape().to_vec(), dx)
}

/// Normalized rows and reciprocal standard deviations, shared by the
/// forward and backward passes of [`layer_norm`].
pub(crate) fn layer_norm_stats<T: Element>(x: &Tensor<T>, eps: T) -> (Vec<T>, Vec<T>) {
    let c = x.shape()[1];
    let cf = T::from_f64(c as f64);
    let mut xhat = Vec::with_capacity(x.len());
    let mut inv_std = Vec::with_capacity(x.shape()[0]);
    for row in x.data().chunks(c) {
        let mean = row.iter().copied().sum::<T>() / cf;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / cf;
        let inv = T::one() / (var + eps).sqrt();
        xhat.extend(row.iter().map(|&v| (v - mean) * inv));
        inv_std.push(inv);
    }
    (xhat, inv_std)
}

/// Per-row normalization over the last axis followed by a `gamma`/`beta`
/// affine map. Variance is the population variance; `eps` sits inside the
/// square root.
pub fn layer_norm<T: Element>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: T,
) -> Result<Tensor<T>> {
    expect_rank("layer_norm", x, 2)?;
    let c = x.shape()[1];
    if gamma.len() != c || beta.len() != c {
        return Err(Error::dim(
            "layer_norm",
            format!(
                "gamma {:?} / beta {:?} do not match {c} columns",
                gamma.shape(),
                beta.shape()
            ),
        ));
    }
    if !(eps > T::zero()) {
        return Err(Error::contract("layer_norm eps must be positive"));
    }
    let (mut xhat, _) = layer_norm_stats(x, eps);
    for row in xhat.chunks_mut(c) {
        for ((v, &g), &b) in row.iter_mut().zip(gamma.data()).zip(beta.data()) {
            *v = *v * g + b;
        }
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), xhat))
}

pub(crate) struct LayerNormGrads<T> {
    pub dx: Tensor<T>,
    pub dgamma: Tensor<T>,
    pub dbeta: Tensor<T>,
}

pub(crate) fn layer_norm_backward<T: Element>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    eps: T,
    dy: &Tensor<T>,
) -> LayerNormGrads<T> {
    let c = x.shape()[1];
    let cf = T::from_f64(c as f64);
    let (xhat, inv_std) = layer_norm_stats(x, eps);
    let mut dx = vec![T::zero(); x.len()];
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    let mut dxhat = vec![T::zero(); c];
    for (r, inv) in inv_std.iter().enumerate() {
        let span = r * c..(r + 1) * c;
        let xh = &xhat[span.clone()];
        let g = &dy.data()[span.clone()];
        for j in 0..c {
            dgamma[j] += g[j] * xh[j];
            dbeta[j] += g[j];
            dxhat[j] = g[j] * gamma.data()[j];
        }
        let sum_d: T = dxhat.iter().copied().sum();
        let sum_dx: T = dxhat.iter().zip(xh).map(|(&a, &b)| a * b).sum();
        for (j, out) in dx[span].iter_mut().enumerate() {
            *out = *inv / cf * (cf * dxhat[j] - sum_d - xh[j] * sum_dx);
        }
    }
    LayerNormGrads {
        dx: Tensor::from_parts(x.shape().to_vec(), dx),
        dgamma: Tensor::from_parts(gamma.shape().to_vec(), dgamma),
        dbeta: Tensor::from_parts(gamma.shape().to_vec(), dbeta),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeometry {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeometry {
    pub(crate) fn new<T: Element>(
        input: &Tensor<T>,
        kernel: &Tensor<T>,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        expect_rank("conv2d", input, 3)?;
        expect_rank("conv2d", kernel, 4)?;
        let (c_in, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
        let (c_out, kc, kh, kw) = (
            kernel.shape()[0],
            kernel.shape()[1],
            kernel.shape()[2],
            kernel.shape()[3],
        );
        if kc != c_in {
            return Err(Error::dim(
                "conv2d",
                format!("kernel {:?} expects {kc} input channels, input {:?}", kernel.shape(), input.shape()),
            ));
        }
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::dim("conv2d", format!("kernel extents must be odd, got {kh}x{kw}")));
        }
        if stride == 0 {
            return Err(Error::contract("conv2d stride must be at least 1"));
        }
        let (ph, pw) = (h + 2 * padding, w + 2 * padding);
        if ph < kh || pw < kw {
            return Err(Error::dim(
                "conv2d",
                format!("padded input {ph}x{pw} smaller than kernel {kh}x{kw}"),
            ));
        }
        let oh = (ph - kh) / stride + 1;
        let ow = (pw - kw) / stride + 1;
        Ok(Self {
            c_in,
            h,
            w,
            c_out,
            kh,
            kw,
            stride,
            padding,
            oh,
            ow,
        })
    }

    fn patch_len(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    fn positions(&self) -> usize {
        self.oh * self.ow
    }

    /// Source pixel for output position `o` and kernel tap `k` along one axis.
    #[inline]
    fn source(&self, o: usize, k: usize, extent: usize) -> Option<usize> {
        let p = (o * self.stride + k) as isize - self.padding as isize;
        (p >= 0 && (p as usize) < extent).then_some(p as usize)
    }
}

/// Unfolds `input` into a `(c_in·kh·kw) × (oh·ow)` patch matrix.
fn im2col<T: Element>(input: &[T], g: &ConvGeometry) -> Vec<T> {
    let p = g.positions();
    let mut cols = vec![T::zero(); g.patch_len() * p];
    for c in 0..g.c_in {
        let plane = &input[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..g.oh {
                    let Some(iy) = g.source(oy, ky, g.h) else { continue };
                    for ox in 0..g.ow {
                        if let Some(ix) = g.source(ox, kx, g.w) {
                            dst[oy * g.ow + ox] = plane[iy * g.w + ix];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im<T: Element>(cols: &[T], g: &ConvGeometry) -> Vec<T> {
    let p = g.positions();
    let mut out = vec![T::zero(); g.c_in * g.h * g.w];
    for c in 0..g.c_in {
        let plane = &mut out[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..g.oh {
                    let Some(iy) = g.source(oy, ky, g.h) else { continue };
                    for ox in 0..g.ow {
                        if let Some(ix) = g.source(ox, kx, g.w) {
                            plane[iy * g.w + ix] += src[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Cross-correlation of a `c_in×h×w` input with a `c_out×c_in×kh×kw` kernel.
///
/// Output extents use floor division, `(h + 2·padding − kh) / stride + 1`,
/// so stride-2 downsampling of even extents is well-defined.
pub fn conv2d<T: Element>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let g = ConvGeometry::new(input, kernel, stride, padding)?;
    let cols = im2col(input.data(), &g);
    let p = g.positions();
    let k = g.patch_len();
    let mut out = vec![T::zero(); g.c_out * p];
    T::gemm(
        g.c_out,
        k,
        p,
        T::one(),
        kernel.data(),
        (k as isize, 1),
        &cols,
        (p as isize, 1),
        T::zero(),
        &mut out,
    );
    Ok(Tensor::from_parts(vec![g.c_out, g.oh, g.ow], out))
}

pub(crate) fn conv2d_backward<T: Element>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    g: &ConvGeometry,
    dy: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>) {
    let cols = im2col(input.data(), g);
    let p = g.positions();
    let k = g.patch_len();
    // dK = dY · colsᵀ
    let mut dk = vec![T::zero(); g.c_out * k];
    T::gemm(
        g.c_out,
        p,
        k,
        T::one(),
        dy.data(),
        (p as isize, 1),
        &cols,
        (1, p as isize),
        T::zero(),
        &mut dk,
    );
    // dcols = Kᵀ · dY
    let mut dcols = vec![T::zero(); k * p];
    T::gemm(
        k,
        g.c_out,
        p,
        T::one(),
        kernel.data(),
        (1, k as isize),
        dy.data(),
        (p as isize, 1),
        T::zero(),
        &mut dcols,
    );
    let dx = col2im(&dcols, g);
    (
        Tensor::from_parts(input.shape().to_vec(), dx),
        Tensor::from_parts(kernel.shape().to_vec(), dk),
    )
}

/// Adds `bias[c]` to every element of channel `c` of a `c×h×w` tensor.
pub fn add_channel_bias<T: Element>(x: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    expect_rank("add_channel_bias", x, 3)?;
    let c = x.shape()[0];
    if bias.len() != c {
        return Err(Error::dim(
            "add_channel_bias",
            format!("bias {:?} for {c} channels", bias.shape()),
        ));
    }
    let plane = x.shape()[1] * x.shape()[2];
    let mut out = x.data().to_vec();
    for (chunk, &b) in out.chunks_mut(plane).zip(bias.data()) {
        chunk.iter_mut().for_each(|v| *v += b);
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}

/// Per-axis interpolation taps: (lower index, upper index, upper weight).
pub(crate) fn bilinear_taps(input: usize, output: usize) -> Vec<(usize, usize, f64)> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|i| {
            let src = ((i as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(input - 1);
            let hi = (lo + 1).min(input - 1);
            (lo, hi, src - lo as f64)
        })
        .collect()
}

/// Half-pixel-center (align-corners-false) bilinear resampling of a
/// `c×h×w` tensor. Source coordinates below zero clamp to the first pixel.
pub fn bilinear_resize<T: Element>(
    x: &Tensor<T>,
    out_h: usize,
    out_w: usize,
) -> Result<Tensor<T>> {
    expect_rank("bilinear_resize", x, 3)?;
    if out_h == 0 || out_w == 0 {
        return Err(Error::dim("bilinear_resize", "output extents must be positive"));
    }
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let ty = bilinear_taps(h, out_h);
    let tx = bilinear_taps(w, out_w);
    let mut out = Vec::with_capacity(c * out_h * out_w);
    for plane in x.data().chunks(h * w) {
        for &(y0, y1, fy) in &ty {
            let fy = T::from_f64(fy);
            for &(x0, x1, fx) in &tx {
                let fx = T::from_f64(fx);
                let top = plane[y0 * w + x0] * (T::one() - fx) + plane[y0 * w + x1] * fx;
                let bot = plane[y1 * w + x0] * (T::one() - fx) + plane[y1 * w + x1] * fx;
                out.push(top * (T::one() - fy) + bot * fy);
            }
        }
    }
    Ok(Tensor::from_parts(vec![c, out_h, out_w], out))
}

pub(crate) fn bilinear_resize_backward<T: Element>(
    in_shape: &[usize],
    dy: &Tensor<T>,
) -> Tensor<T> {
    let (c, h, w) = (in_shape[0], in_shape[1], in_shape[2]);
    let (out_h, out_w) = (dy.shape()[1], dy.shape()[2]);
    let ty = bilinear_taps(h, out_h);
    let tx = bilinear_taps(w, out_w);
    let mut dx = vec![T::zero(); c * h * w];
    for (plane, gplane) in dx.chunks_mut(h * w).zip(dy.data().chunks(out_h * out_w)) {
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            let fy = T::from_f64(fy);
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let fx = T::from_f64(fx);
                let g = gplane[oy * out_w + ox];
                plane[y0 * w + x0] += g * (T::one() - fy) * (T::one() - fx);
                plane[y0 * w + x1] += g * (T::one() - fy) * fx;
                plane[y1 * w + x0] += g * fy * (T::one() - fx);
                plane[y1 * w + x1] += g * fy * fx;
            }
        }
    }
    Tensor::from_parts(in_shape.to_vec(), dx)
}

/// Elementwise operation selector for [`pointwise`].
#[derive(Debug)]
pub enum Pointwise<'a, T> {
    Add(&'a Tensor<T>),
    Mul(&'a Tensor<T>),
    Relu,
    Scale(T),
}

pub fn pointwise<T: Element>(op: Pointwise<'_, T>, a: &Tensor<T>) -> Result<Tensor<T>> {
    match op {
        Pointwise::Add(b) => zip_with("add", a, b, |x, y| x + y),
        Pointwise::Mul(b) => zip_with("mul", a, b, |x, y| x * y),
        Pointwise::Relu => Ok(a.map(|v| v.max(T::zero()))),
        Pointwise::Scale(s) => Ok(a.map(|v| v * s)),
    }
}

pub(crate) fn zip_with<T: Element>(
    op: &'static str,
    a: &Tensor<T>,
    b: &Tensor<T>,
    f: impl Fn(T, T) -> T,
) -> Result<Tensor<T>> {
    same_shape(op, a, b)?;
    Ok(Tensor::from_parts(
        a.shape().to_vec(),
        a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
    ))
}

/// Stacks rank-2 tensors with equal column counts along the row axis.
pub fn concat_rows<T: Element>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::contract("concat_rows needs at least one tensor"))?;
    let c = first.shape()[first.rank() - 1];
    let mut rows = 0;
    let mut data = Vec::new();
    for p in parts {
        expect_rank("concat_rows", p, 2)?;
        if p.shape()[1] != c {
            return Err(Error::dim(
                "concat_rows",
                format!("column counts {c} and {} differ", p.shape()[1]),
            ));
        }
        rows += p.shape()[0];
        data.extend_from_slice(p.data());
    }
    Ok(Tensor::from_parts(vec![rows, c], data))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape.to_vec(), v).unwrap()
    }

    /// Independent triple-loop product.
    fn naive_matmul(a: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        Tensor::from_fn([m, n], |idx| {
            let (i, j) = (idx / n, idx % n);
            (0..k).map(|p| a.data()[i * k + p] * b.data()[p * n + j]).sum()
        })
    }

    #[test]
    fn matmul_examples() {
        let a = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let b = t(&[2, 2], &[5.0, 6.0, 7.0, 8.0]);
        let expect = naive_matmul(&a, &b);
        assert_eq!(expect.data(), &[19.0, 22.0, 43.0, 50.0]);
        assert_eq!(matmul(&a, &b).unwrap(), expect);

        let eye = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        assert_eq!(matmul(&eye, &b).unwrap(), b);
        let z = matmul(&a, &Tensor::zeros([2, 3])).unwrap();
        assert_eq!(z, Tensor::zeros([2, 3]));
    }

    #[test]
    fn matmul_reports_both_shapes() {
        let err = matmul(&Tensor::<f32>::zeros([2, 3]), &Tensor::zeros([2, 3])).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn matmul_transposed_operands() {
        let a = Tensor::<f64>::from_fn([3, 2], |i| i as f64 - 1.5);
        let b = Tensor::<f64>::from_fn([3, 4], |i| (i as f64).sin());
        let at = transpose(&a).unwrap();
        let direct = naive_matmul(&at, &b);
        assert!(matmul_t(&a, true, &b, false).unwrap().max_abs_diff(&direct).unwrap() < 1e-12);
        let bt = transpose(&b).unwrap();
        let direct = naive_matmul(&at, &b);
        assert!(matmul_t(&at, false, &bt, true).unwrap().max_abs_diff(&direct).unwrap() < 1e-12);
    }

    #[test]
    fn softmax_examples() {
        let y = softmax_rows(&t(&[1, 4], &[2.0; 4])).unwrap();
        assert!(y.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));

        let y = softmax_rows(&t(&[1, 2], &[0.0, 1000.0])).unwrap();
        assert!(y.data()[0] < 1e-300 && (y.data()[1] - 1.0).abs() < 1e-15);

        // exp/sum oracle
        let e: Vec<f64> = [1.0f64, 2.0, 3.0].iter().map(|v| v.exp()).collect();
        let s: f64 = e.iter().sum();
        let y = softmax_rows(&t(&[1, 3], &[1.0, 2.0, 3.0])).unwrap();
        for (got, want) in y.data().iter().zip(e.iter().map(|v| v / s)) {
            assert!((got - want).abs() < 1e-15);
        }
        for (got, want) in y.data().iter().zip([0.09003, 0.24473, 0.66524]) {
            assert!((got - want).abs() < 5e-6);
        }
    }

    #[test]
    fn layer_norm_examples() {
        let ones = Tensor::<f64>::ones([4]);
        let zeros = Tensor::<f64>::zeros([4]);
        let y = layer_norm(&t(&[1, 4], &[3.0; 4]), &ones, &zeros, 1e-5).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));

        // (x - mean) / sqrt(var + eps) oracle
        let x = [1.0f64, 2.0, 3.0, 4.0];
        let mean = 2.5;
        let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 4.0;
        let y = layer_norm(&t(&[1, 4], &x), &ones, &zeros, 1e-5).unwrap();
        for (got, &xv) in y.data().iter().zip(&x) {
            assert!((got - (xv - mean) / (var + 1e-5).sqrt()).abs() < 1e-12);
        }
        for (got, want) in y.data().iter().zip([-1.3416, -0.4472, 0.4472, 1.3416]) {
            assert!((got - want).abs() < 1e-4);
        }

        let z = t(&[1, 4], &[-1.0, -1.0, 1.0, 1.0]);
        let g = t(&[4], &[2.0, 3.0, 4.0, 5.0]);
        let b = t(&[4], &[0.5, -0.5, 1.0, 0.0]);
        let y = layer_norm(&z, &g, &b, 1e-5).unwrap();
        for i in 0..4 {
            let want = g.data()[i] * z.data()[i] + b.data()[i];
            assert!((y.data()[i] - want).abs() < 1e-4);
        }
        assert!(layer_norm(&z, &g, &b, 0.0).is_err());
    }

    #[test]
    fn conv2d_examples() {
        let x = Tensor::<f64>::from_fn([1, 5, 4], |i| i as f64 * 0.3 - 2.0);
        let one = t(&[1, 1, 1, 1], &[1.0]);
        assert_eq!(conv2d(&x, &one, 1, 0).unwrap(), x);

        let mut delta = vec![0.0; 9];
        delta[4] = 1.0;
        let delta = t(&[1, 1, 3, 3], &delta);
        assert_eq!(conv2d(&x, &delta, 1, 1).unwrap(), x);

        let y = conv2d(&Tensor::<f64>::ones([1, 4, 4]), &Tensor::ones([1, 1, 3, 3]), 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 2, 2]);
        assert!(y.data().iter().all(|&v| v == 9.0));
    }

    #[test]
    fn conv2d_matches_direct_summation() {
        let x = Tensor::<f64>::from_fn([2, 6, 7], |i| ((i * 7919) % 13) as f64 - 6.0);
        let k = Tensor::<f64>::from_fn([3, 2, 3, 3], |i| ((i * 31) % 7) as f64 - 3.0);
        for (stride, pad) in [(1, 1), (2, 1), (2, 0), (1, 0)] {
            let y = conv2d(&x, &k, stride, pad).unwrap();
            let (oh, ow) = (y.shape()[1], y.shape()[2]);
            for o in 0..3 {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = 0.0;
                        for c in 0..2 {
                            for ky in 0..3 {
                                for kx in 0..3 {
                                    let iy = (oy * stride + ky) as isize - pad as isize;
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if iy < 0 || ix < 0 || iy >= 6 || ix >= 7 {
                                        continue;
                                    }
                                    acc += x.data()[(c * 6 + iy as usize) * 7 + ix as usize]
                                        * k.data()[((o * 2 + c) * 3 + ky) * 3 + kx];
                                }
                            }
                        }
                        assert_eq!(y.data()[(o * oh + oy) * ow + ox], acc);
                    }
                }
            }
        }
    }

    #[test]
    fn conv2d_shape_errors() {
        let x = Tensor::<f32>::zeros([2, 4, 4]);
        assert!(conv2d(&x, &Tensor::zeros([1, 3, 3, 3]), 1, 1).is_err());
        assert!(conv2d(&x, &Tensor::zeros([1, 2, 2, 2]), 1, 1).is_err());
        assert!(conv2d(&x, &Tensor::zeros([1, 2, 7, 7]), 1, 0).is_err());
        let y = conv2d(&Tensor::<f32>::zeros([1, 64, 64]), &Tensor::zeros([4, 1, 3, 3]), 2, 1).unwrap();
        assert_eq!(y.shape(), &[4, 32, 32]);
    }

    #[test]
    fn bilinear_examples() {
        let x = Tensor::<f64>::from_fn([2, 3, 5], |i| i as f64);
        assert_eq!(bilinear_resize(&x, 3, 5).unwrap(), x);

        let c = Tensor::<f64>::full([1, 3, 3], 0.7);
        let y = bilinear_resize(&c, 7, 2).unwrap();
        assert!(y.data().iter().all(|&v| (v - 0.7).abs() < 1e-15));

        // pointwise sampling oracle for [[0,1],[2,3]] -> 4x4
        let x = t(&[1, 2, 2], &[0.0, 1.0, 2.0, 3.0]);
        let y = bilinear_resize(&x, 4, 4).unwrap();
        let sample = |i: usize| ((i as f64 + 0.5) * 0.5 - 0.5).clamp(0.0, 1.0);
        for i in 0..4 {
            for j in 0..4 {
                let (sy, sx) = (sample(i), sample(j));
                // f(y, x) = 2y + x is affine, so bilinear reproduces it exactly.
                let want = 2.0 * sy + sx;
                assert!((y.data()[i * 4 + j] - want).abs() < 1e-15);
            }
        }
        assert_eq!(
            y.data(),
            &[0.0, 0.25, 0.75, 1.0, 0.5, 0.75, 1.25, 1.5, 1.5, 1.75, 2.25, 2.5, 2.0, 2.25, 2.75, 3.0]
        );
    }

    #[test]
    fn pointwise_examples() {
        let x = t(&[2], &[1.0, 2.0]);
        assert_eq!(pointwise(Pointwise::Mul(&Tensor::ones([2])), &x).unwrap(), x);
        assert_eq!(
            pointwise(Pointwise::Relu, &t(&[2], &[-1.0, 2.0])).unwrap().data(),
            &[0.0, 2.0]
        );
        assert_eq!(
            pointwise(Pointwise::Add(&t(&[2], &[3.0, 4.0])), &x).unwrap().data(),
            &[4.0, 6.0]
        );
        assert_eq!(pointwise(Pointwise::Scale(3.0), &x).unwrap().data(), &[3.0, 6.0]);
        assert!(pointwise(Pointwise::Add(&Tensor::ones([3])), &x).is_err());
    }

    #[test]
    fn concat_rows_stacks() {
        let a = Tensor::<f32>::ones([2, 3]);
        let b = Tensor::<f32>::full([1, 3], 2.0);
        let c = concat_rows(&[&a, &b]).unwrap();
        assert_eq!(c.shape(), &[3, 3]);
        assert_eq!(c.row(2), &[2.0, 2.0, 2.0]);
        assert!(concat_rows(&[&a, &Tensor::ones([1, 2])]).is_err());
        assert!(concat_rows::<f32>(&[]).is_err());
    }
}
