//! Numeric kernels behind the tape ops.
//!
//! Batched kernels treat the leading axis as the batch `N` and the second as
//! channels `C`; any remaining axes are flattened into `P` positions. Every
//! kernel walks its loops in a fixed order, so results are bit-reproducible.

use crate::{Error, Result, Tensor};

fn shape_err(msg: String) -> Error {
    Error::Shape(msg)
}

/// `(N, C, P)` view of a tensor of rank >= 2.
pub(crate) fn ncp(shape: &[usize]) -> Result<(usize, usize, usize)> {
    if shape.len() < 2 {
        return Err(shape_err(format!(
            "expected (batch, channels, ...) tensor, got {shape:?}"
        )));
    }
    Ok((shape[0], shape[1], shape[2..].iter().product()))
}

pub(crate) fn nchw(shape: &[usize]) -> Result<(usize, usize, usize, usize)> {
    match *shape {
        [n, c, h, w] => Ok((n, c, h, w)),
        _ => Err(shape_err(format!(
            "expected (batch, channels, height, width) tensor, got {shape:?}"
        ))),
    }
}

/// `y[n, o, p] = sum_i W[o, i] x[n, i, p]`, or with `W` read transposed when
/// `transpose` is set (`W` then has shape `(I, O)`).
pub fn channel_combine(x: &Tensor, w: &Tensor, transpose: bool) -> Result<Tensor> {
    let (n, ci, p) = ncp(x.shape())?;
    let (wo, wi) = match *w.shape() {
        [a, b] if !transpose => (a, b),
        [a, b] => (b, a),
        _ => return Err(shape_err(format!("combine weights must be rank 2, got {:?}", w.shape()))),
    };
    if wi != ci {
        return Err(shape_err(format!(
            "combine weights {:?} (transpose={transpose}) do not match input channels {ci}",
            w.shape()
        )));
    }
    let mut shape = x.shape().to_vec();
    shape[1] = wo;
    let mut out = vec![0.0; n * wo * p];
    // W as an (O, I) matrix, possibly through transposed strides.
    let ws = if transpose { (1, wo as isize) } else { (ci as isize, 1) };
    if p == 1 {
        // (N, I) x (I, O): W^T swaps the strides.
        gemm(n, ci, wo, x.data(), (ci as isize, 1), w.data(), (ws.1, ws.0), 0.0, &mut out);
    } else {
        for (xs, ys) in x.data().chunks_exact(ci * p).zip(out.chunks_exact_mut(wo * p)) {
            gemm(wo, ci, p, w.data(), ws, xs, (p as isize, 1), 0.0, ys);
        }
    }
    Tensor::new(shape, out)
}

/// `out[i, j] = sum_{n, p} a[n, i, p] b[n, j, p]`.
pub fn channel_outer(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (n, ca, p) = ncp(a.shape())?;
    let (nb, cb, pb) = ncp(b.shape())?;
    if n != nb || p != pb {
        return Err(shape_err(format!(
            "channel outer operands {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mut out = vec![0.0; ca * cb];
    for (s, (ar, br)) in a.data().chunks_exact(ca * p).zip(b.data().chunks_exact(cb * p)).enumerate() {
        let beta = if s == 0 { 0.0 } else { 1.0 };
        gemm(ca, p, cb, ar, (p as isize, 1), br, (1, p as isize), beta, &mut out);
    }
    Tensor::new(vec![ca, cb], out)
}

/// Geometry of a 2-D cross-correlation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    /// Output extent; errors when the window does not tile the padded input exactly.
    pub fn out_extent(&self, input: usize, kernel: usize) -> Result<usize> {
        let padded = input + 2 * self.pad;
        if self.stride == 0 || padded < kernel || (padded - kernel) % self.stride != 0 {
            return Err(shape_err(format!(
                "non-integral conv output extent: input {input}, kernel {kernel}, stride {}, pad {}",
                self.stride, self.pad
            )));
        }
        Ok((padded - kernel) / self.stride + 1)
    }

    /// Output columns `[lo, hi)` whose tap at kernel offset `k` lands inside `0..input`.
    fn valid_range(&self, k: usize, input: usize, out: usize) -> (usize, usize) {
        let s = self.stride as isize;
        let off = k as isize - self.pad as isize;
        // o*s + off >= 0  and  o*s + off <= input - 1
        let lo = if off >= 0 { 0 } else { ((-off) + s - 1) / s };
        let hi_incl = (input as isize - 1 - off).div_euclid(s);
        let hi = (hi_incl + 1).clamp(0, out as isize);
        (lo.min(out as isize) as usize, hi.max(lo.min(out as isize)) as usize)
    }
}

fn conv_shapes(x: &[usize], k: &[usize]) -> Result<(usize, usize, usize, usize, usize, usize)> {
    let (n, c, h, w) = nchw(x)?;
    match *k {
        [q, kc, kh, kw] if kc == c && kh == kw => Ok((n, c, h, w, q, kh)),
        _ => Err(shape_err(format!("conv kernel {k:?} does not match input {x:?}"))),
    }
}

/// `c = a * b + beta * c` for row-major `c (m, n)`; `a` and `b` are read
/// through the given row and column strides.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], a_strides: (isize, isize), b: &[f64], b_strides: (isize, isize), beta: f64, c: &mut [f64]) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(c.len() >= m * n);
    if k == 0 {
        c[..m * n].iter_mut().for_each(|v| *v *= beta);
        return;
    }
    let last = |rows: usize, cols: usize, (rs, cs): (isize, isize)| (rows - 1) as isize * rs + (cols - 1) as isize * cs;
    assert!((last(m, k, a_strides) as usize) < a.len() && (last(k, n, b_strides) as usize) < b.len());
    // SAFETY: the asserts above keep every strided access inside the slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0,
            a_strides.1,
            b.as_ptr(),
            b_strides.0,
            b_strides.1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Patch matrix `(C * ks * ks, N * Ho * Wo)`; taps falling in the padding are zero.
fn im2col(x: &Tensor, ks: usize, g: ConvGeom, ho: usize, wo: usize) -> Vec<f64> {
    let (n, c, h, w) = nchw(x.shape()).expect("checked by caller");
    let xd = x.data();
    // Filled strictly in order, so the buffer never needs zeroing up front.
    let mut out = Vec::with_capacity(c * ks * ks * n * ho * wo);
    for ic in 0..c {
        for kh in 0..ks {
            let (oh_lo, oh_hi) = g.valid_range(kh, h, ho);
            for kw in 0..ks {
                let (ow_lo, ow_hi) = g.valid_range(kw, w, wo);
                for b in 0..n {
                    let src = &xd[(b * c + ic) * h * w..][..h * w];
                    for oh in 0..ho {
                        if !(oh_lo..oh_hi).contains(&oh) {
                            out.resize(out.len() + wo, 0.0);
                            continue;
                        }
                        let ih = oh * g.stride + kh - g.pad;
                        out.resize(out.len() + ow_lo, 0.0);
                        if g.stride == 1 {
                            let iw0 = ih * w + ow_lo + kw - g.pad;
                            out.extend_from_slice(&src[iw0..iw0 + (ow_hi - ow_lo)]);
                        } else {
                            out.extend((ow_lo..ow_hi).map(|ow| src[ih * w + ow * g.stride + kw - g.pad]));
                        }
                        out.resize(out.len() + (wo - ow_hi), 0.0);
                    }
                }
            }
        }
    }
    out
}

/// Adjoint of [`im2col`]: scatter-add patch columns back into `(N, C, H, W)`.
fn col2im(cols_data: &[f64], shape: (usize, usize, usize, usize), ks: usize, g: ConvGeom, ho: usize, wo: usize) -> Vec<f64> {
    let (n, c, h, w) = shape;
    let cols = n * ho * wo;
    let mut out = vec![0.0; n * c * h * w];
    for ic in 0..c {
        for kh in 0..ks {
            let (oh_lo, oh_hi) = g.valid_range(kh, h, ho);
            for kw in 0..ks {
                let (ow_lo, ow_hi) = g.valid_range(kw, w, wo);
                let row = &cols_data[((ic * ks + kh) * ks + kw) * cols..][..cols];
                for b in 0..n {
                    let dst = &mut out[(b * c + ic) * h * w..][..h * w];
                    for oh in oh_lo..oh_hi {
                        let ih = oh * g.stride + kh - g.pad;
                        let src = &row[(b * ho + oh) * wo..][..wo];
                        if g.stride == 1 {
                            let iw0 = ih * w + ow_lo + kw - g.pad;
                            for (d, &v) in dst[iw0..iw0 + (ow_hi - ow_lo)].iter_mut().zip(&src[ow_lo..ow_hi]) {
                                *d += v;
                            }
                        } else {
                            for ow in ow_lo..ow_hi {
                                dst[ih * w + ow * g.stride + kw - g.pad] += src[ow];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// `(N, Q, P)` to `(Q, N * P)`.
fn batch_to_columns(t: &[f64], n: usize, q: usize, p: usize) -> Vec<f64> {
    let mut out = vec![0.0; t.len()];
    for b in 0..n {
        for o in 0..q {
            out[(o * n + b) * p..][..p].copy_from_slice(&t[(b * q + o) * p..][..p]);
        }
    }
    out
}

/// `(Q, N * P)` to `(N, Q, P)`.
fn columns_to_batch(t: &[f64], n: usize, q: usize, p: usize) -> Vec<f64> {
    let mut out = vec![0.0; t.len()];
    for o in 0..q {
        for b in 0..n {
            out[(b * q + o) * p..][..p].copy_from_slice(&t[(o * n + b) * p..][..p]);
        }
    }
    out
}

pub fn conv2d(x: &Tensor, k: &Tensor, g: ConvGeom) -> Result<Tensor> {
    let (n, c, h, w, q, ks) = conv_shapes(x.shape(), k.shape())?;
    let ho = g.out_extent(h, ks)?;
    let wo = g.out_extent(w, ks)?;
    let taps = c * ks * ks;
    let cols = n * ho * wo;
    let patches = im2col(x, ks, g, ho, wo);
    let mut y = vec![0.0; q * cols];
    gemm(q, taps, cols, k.data(), (taps as isize, 1), &patches, (cols as isize, 1), 0.0, &mut y);
    Tensor::new(vec![n, q, ho, wo], columns_to_batch(&y, n, q, ho * wo))
}

/// Adjoint of [`conv2d`] with respect to its input: maps an output-shaped
/// tensor back to `(N, C, h, w)`.
pub fn conv2d_input_grad(
    gy: &Tensor,
    k: &Tensor,
    g: ConvGeom,
    in_hw: (usize, usize),
) -> Result<Tensor> {
    let (n, q, ho, wo) = nchw(gy.shape())?;
    let (h, w) = in_hw;
    let (kq, c, ks) = match *k.shape() {
        [kq, c, kh, kw] if kh == kw => (kq, c, kh),
        _ => return Err(shape_err(format!("conv kernel {:?}", k.shape()))),
    };
    if kq != q || g.out_extent(h, ks)? != ho || g.out_extent(w, ks)? != wo {
        return Err(shape_err(format!(
            "conv input-grad operand {:?} does not match kernel {:?} and input {in_hw:?}",
            gy.shape(),
            k.shape()
        )));
    }
    let taps = c * ks * ks;
    let cols = n * ho * wo;
    let gcols = batch_to_columns(gy.data(), n, q, ho * wo);
    let mut patches = vec![0.0; taps * cols];
    gemm(taps, q, cols, k.data(), (1, taps as isize), &gcols, (cols as isize, 1), 0.0, &mut patches);
    Tensor::new(vec![n, c, h, w], col2im(&patches, (n, c, h, w), ks, g, ho, wo))
}

/// Adjoint of [`conv2d`] with respect to its kernel.
pub fn conv2d_weight_grad(x: &Tensor, gy: &Tensor, g: ConvGeom, ks: usize) -> Result<Tensor> {
    let (n, c, h, w) = nchw(x.shape())?;
    let (gn, q, ho, wo) = nchw(gy.shape())?;
    if gn != n || g.out_extent(h, ks)? != ho || g.out_extent(w, ks)? != wo {
        return Err(shape_err(format!(
            "conv weight-grad operands {:?} and {:?} with kernel {ks}",
            x.shape(),
            gy.shape()
        )));
    }
    let taps = c * ks * ks;
    let cols = n * ho * wo;
    let patches = im2col(x, ks, g, ho, wo);
    let gcols = batch_to_columns(gy.data(), n, q, ho * wo);
    let mut out = vec![0.0; q * taps];
    gemm(q, cols, taps, &gcols, (cols as isize, 1), &patches, (1, cols as isize), 0.0, &mut out);
    Tensor::new(vec![q, c, ks, ks], out)
}

/// Nearest-neighbour 2x upsampling: output `(i, j)` reads source `(i / 2, j / 2)`.
pub fn upsample_nearest(x: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = nchw(x.shape())?;
    let (oh, ow) = (2 * h, 2 * w);
    let xd = x.data();
    let mut out = vec![0.0; n * c * oh * ow];
    for (src, dst) in xd.chunks_exact(h * w).zip(out.chunks_exact_mut(oh * ow)) {
        for (i, drow) in dst.chunks_exact_mut(ow).enumerate() {
            let srow = &src[(i / 2) * w..][..w];
            for (pair, &v) in drow.chunks_exact_mut(2).zip(srow) {
                pair[0] = v;
                pair[1] = v;
            }
        }
    }
    Tensor::new(vec![n, c, oh, ow], out)
}

/// Mean over non-overlapping 2x2 windows.
pub fn avg_pool2(x: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = nchw(x.shape())?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(shape_err(format!("avg-pool needs even extents, got {:?}", x.shape())));
    }
    let (oh, ow) = (h / 2, w / 2);
    let xd = x.data();
    let mut out = vec![0.0; n * c * oh * ow];
    for plane in 0..n * c {
        let src = &xd[plane * h * w..(plane + 1) * h * w];
        let dst = &mut out[plane * oh * ow..(plane + 1) * oh * ow];
        for i in 0..oh {
            for j in 0..ow {
                let a = src[2 * i * w + 2 * j];
                let b = src[2 * i * w + 2 * j + 1];
                let cc = src[(2 * i + 1) * w + 2 * j];
                let d = src[(2 * i + 1) * w + 2 * j + 1];
                dst[i * ow + j] = 0.25 * (a + b + cc + d);
            }
        }
    }
    Tensor::new(vec![n, c, oh, ow], out)
}

/// Interpolation taps for one axis of a 2x bilinear upsample: for each output
/// index, `(i0, i1, w0, w1)`.
///
/// Half-pixel centres: output `o` samples source coordinate `(o + 0.5) / 2 - 0.5`,
/// clamped to `[0, len - 1]`.
pub fn bilinear_taps(len: usize) -> Vec<(usize, usize, f64, f64)> {
    (0..2 * len)
        .map(|o| {
            let src = ((o as f64 + 0.5) / 2.0 - 0.5).clamp(0.0, (len - 1) as f64);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(len - 1);
            let t = src - i0 as f64;
            (i0, i1, 1.0 - t, t)
        })
        .collect()
}

pub fn upsample_bilinear(x: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = nchw(x.shape())?;
    if h == 0 || w == 0 {
        return Err(shape_err("bilinear upsample of an empty plane".into()));
    }
    let ty = bilinear_taps(h);
    let tx = bilinear_taps(w);
    let (oh, ow) = (2 * h, 2 * w);
    let xd = x.data();
    let mut out = vec![0.0; n * c * oh * ow];
    let mut rowbuf = vec![0.0; ow];
    for plane in 0..n * c {
        let src = &xd[plane * h * w..(plane + 1) * h * w];
        let dst = &mut out[plane * oh * ow..(plane + 1) * oh * ow];
        for (i, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
            let r0 = &src[y0 * w..(y0 + 1) * w];
            let r1 = &src[y1 * w..(y1 + 1) * w];
            for (j, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                rowbuf[j] = wy0 * (wx0 * r0[x0] + wx1 * r0[x1]) + wy1 * (wx0 * r1[x0] + wx1 * r1[x1]);
            }
            dst[i * ow..(i + 1) * ow].copy_from_slice(&rowbuf);
        }
    }
    Tensor::new(vec![n, c, oh, ow], out)
}

/// Transpose of [`upsample_bilinear`]: maps `(N, C, 2H, 2W)` to `(N, C, H, W)`.
pub fn bilinear_adjoint(g: &Tensor) -> Result<Tensor> {
    let (n, c, oh, ow) = nchw(g.shape())?;
    if oh % 2 != 0 || ow % 2 != 0 || oh == 0 || ow == 0 {
        return Err(shape_err(format!("bilinear adjoint needs even extents, got {:?}", g.shape())));
    }
    let (h, w) = (oh / 2, ow / 2);
    let ty = bilinear_taps(h);
    let tx = bilinear_taps(w);
    let gd = g.data();
    let mut out = vec![0.0; n * c * h * w];
    for plane in 0..n * c {
        let src = &gd[plane * oh * ow..(plane + 1) * oh * ow];
        let dst = &mut out[plane * h * w..(plane + 1) * h * w];
        for (i, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
            for (j, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                let v = src[i * ow + j];
                dst[y0 * w + x0] += wy0 * wx0 * v;
                dst[y0 * w + x1] += wy0 * wx1 * v;
                dst[y1 * w + x0] += wy1 * wx0 * v;
                dst[y1 * w + x1] += wy1 * wx1 * v;
            }
        }
    }
    Tensor::new(vec![n, c, h, w], out)
}

/// Sum over everything but the leading axis: `(N, ...) -> (N)`.
pub fn sum_per_sample(x: &Tensor) -> Result<Tensor> {
    if x.rank() == 0 {
        return Err(shape_err("per-sample sum of a scalar".into()));
    }
    let n = x.batch();
    let per = x.len() / n.max(1);
    let data = (0..n)
        .map(|b| x.data()[b * per..(b + 1) * per].iter().sum())
        .collect();
    Tensor::new(vec![n], data)
}

pub fn broadcast_per_sample(v: &Tensor, shape: &[usize]) -> Result<Tensor> {
    if v.rank() != 1 || shape.first() != Some(&v.len()) {
        return Err(shape_err(format!("broadcast {:?} per sample to {shape:?}", v.shape())));
    }
    let n = v.len();
    let per: usize = shape[1..].iter().product();
    let mut out = Vec::with_capacity(n * per);
    for &val in v.data() {
        out.extend(std::iter::repeat(val).take(per));
    }
    Tensor::new(shape.to_vec(), out)
}

/// L2 norm of each sample: `(N, ...) -> (N)`.
pub fn sample_norm(x: &Tensor) -> Result<Tensor> {
    if x.rank() == 0 {
        return Err(shape_err("per-sample norm of a scalar".into()));
    }
    let n = x.batch();
    let per = x.len() / n.max(1);
    let data = (0..n)
        .map(|b| {
            x.data()[b * per..(b + 1) * per]
                .iter()
                .map(|v| v * v)
                .sum::<f64>()
                .sqrt()
        })
        .collect();
    Tensor::new(vec![n], data)
}

/// Sum over batch and positions: `(N, C, ...) -> (C)`.
pub fn sum_per_channel(x: &Tensor) -> Result<Tensor> {
    let (n, c, p) = ncp(x.shape())?;
    let mut out = vec![0.0; c];
    for b in 0..n {
        for (ch, o) in out.iter_mut().enumerate() {
            *o += x.data()[(b * c + ch) * p..(b * c + ch + 1) * p].iter().sum::<f64>();
        }
    }
    Tensor::new(vec![c], out)
}

pub fn broadcast_per_channel(v: &Tensor, shape: &[usize]) -> Result<Tensor> {
    let (n, c, p) = ncp(shape)?;
    if v.rank() != 1 || v.len() != c {
        return Err(shape_err(format!("broadcast {:?} per channel to {shape:?}", v.shape())));
    }
    let mut out = Vec::with_capacity(n * c * p);
    for _ in 0..n {
        for &val in v.data() {
            out.extend(std::iter::repeat(val).take(p));
        }
    }
    Tensor::new(shape.to_vec(), out)
}

/// Sum over the leading axis: `(N, rest) -> (rest)`.
pub fn sum_batch(x: &Tensor) -> Result<Tensor> {
    if x.rank() == 0 {
        return Err(shape_err("batch sum of a scalar".into()));
    }
    let n = x.batch();
    let per = x.len() / n.max(1);
    let mut out = vec![0.0; per];
    for b in 0..n {
        for (o, &v) in out.iter_mut().zip(&x.data()[b * per..(b + 1) * per]) {
            *o += v;
        }
    }
    Tensor::new(x.shape()[1..].to_vec(), out)
}

pub fn broadcast_batch(x: &Tensor, n: usize) -> Tensor {
    let mut shape = vec![n];
    shape.extend_from_slice(x.shape());
    let mut out = Vec::with_capacity(n * x.len());
    for _ in 0..n {
        out.extend_from_slice(x.data());
    }
    Tensor::new(shape, out).expect("broadcast shape is consistent")
}

/// Sum over positions: `(N, C, ...) -> (N, C)`.
pub fn spatial_sum(x: &Tensor) -> Result<Tensor> {
    let (n, c, p) = ncp(x.shape())?;
    let data = (0..n * c)
        .map(|i| x.data()[i * p..(i + 1) * p].iter().sum())
        .collect();
    Tensor::new(vec![n, c], data)
}

pub fn spatial_broadcast(v: &Tensor, shape: &[usize]) -> Result<Tensor> {
    let (n, c, p) = ncp(shape)?;
    if v.shape() != [n, c] {
        return Err(shape_err(format!("spatial broadcast {:?} to {shape:?}", v.shape())));
    }
    let mut out = Vec::with_capacity(n * c * p);
    for &val in v.data() {
        out.extend(std::iter::repeat(val).take(p));
    }
    Tensor::new(shape.to_vec(), out)
}

/// Row-wise log-softmax of an `(N, C)` tensor.
pub fn log_softmax(x: &Tensor) -> Result<Tensor> {
    let (n, c) = match *x.shape() {
        [n, c] if c > 0 => (n, c),
        _ => return Err(shape_err(format!("log-softmax expects (N, C), got {:?}", x.shape()))),
    };
    let mut out = vec![0.0; n * c];
    for b in 0..n {
        let row = &x.data()[b * c..(b + 1) * c];
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        for (o, v) in out[b * c..(b + 1) * c].iter_mut().zip(row) {
            *o = v - lse;
        }
    }
    Tensor::new(vec![n, c], out)
}

/// Per-channel batch statistics `(mean, biased variance)` over batch and positions.
pub fn channel_moments(x: &Tensor) -> Result<(Vec<f64>, Vec<f64>)> {
    let (n, c, p) = ncp(x.shape())?;
    let count = (n * p) as f64;
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for ch in 0..c {
        let mut s = 0.0;
        for b in 0..n {
            s += x.data()[(b * c + ch) * p..(b * c + ch + 1) * p].iter().sum::<f64>();
        }
        let m = s / count;
        let mut v = 0.0;
        for b in 0..n {
            v += x.data()[(b * c + ch) * p..(b * c + ch + 1) * p]
                .iter()
                .map(|x| (x - m) * (x - m))
                .sum::<f64>();
        }
        mean[ch] = m;
        var[ch] = v / count;
    }
    Ok((mean, var))
}

/// Training-mode batch normalization without affine parameters.
pub fn batch_norm(x: &Tensor, eps: f64) -> Result<Tensor> {
    let (n, c, p) = ncp(x.shape())?;
    let (mean, var) = channel_moments(x)?;
    let mut out = x.data().to_vec();
    for ch in 0..c {
        let inv = 1.0 / (var[ch] + eps).sqrt();
        for b in 0..n {
            for v in &mut out[(b * c + ch) * p..(b * c + ch + 1) * p] {
                *v = (*v - mean[ch]) * inv;
            }
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// Input gradient of [`batch_norm`]:
/// `gx = inv_std * (g - mean(g) - xhat * mean(g * xhat))` per channel.
pub fn batch_norm_backward(g: &Tensor, x: &Tensor, eps: f64) -> Result<Tensor> {
    if g.shape() != x.shape() {
        return Err(shape_err(format!(
            "batch-norm backward operands {:?} and {:?}",
            g.shape(),
            x.shape()
        )));
    }
    let (n, c, p) = ncp(x.shape())?;
    let (mean, var) = channel_moments(x)?;
    let count = (n * p) as f64;
    let mut out = vec![0.0; x.len()];
    for ch in 0..c {
        let inv = 1.0 / (var[ch] + eps).sqrt();
        let mut sg = 0.0;
        let mut sgx = 0.0;
        for b in 0..n {
            let r = (b * c + ch) * p..(b * c + ch + 1) * p;
            for (gv, xv) in g.data()[r.clone()].iter().zip(&x.data()[r]) {
                sg += gv;
                sgx += gv * (xv - mean[ch]) * inv;
            }
        }
        let mg = sg / count;
        let mgx = sgx / count;
        for b in 0..n {
            let r = (b * c + ch) * p..(b * c + ch + 1) * p;
            for ((o, gv), xv) in out[r.clone()].iter_mut().zip(&g.data()[r.clone()]).zip(&x.data()[r]) {
                let xhat = (xv - mean[ch]) * inv;
                *o = inv * (gv - mg - xhat * mgx);
            }
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn nearest_replicates_blocks() {
        let x = t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let y = upsample_nearest(&x).unwrap();
        assert_eq!(
            y.data(),
            &[1., 1., 2., 2., 1., 1., 2., 2., 3., 3., 4., 4., 3., 3., 4., 4.]
        );
    }

    #[test]
    fn bilinear_row_uses_half_pixel_centres() {
        let x = t(&[1, 1, 1, 2], &[0.0, 2.0]);
        let y = upsample_bilinear(&x).unwrap();
        assert_eq!(y.shape(), &[1, 1, 2, 4]);
        assert_eq!(&y.data()[..4], &[0.0, 0.5, 1.5, 2.0]);
        assert_eq!(&y.data()[4..], &[0.0, 0.5, 1.5, 2.0]);
    }

    #[test]
    fn bilinear_2x2_matches_separable_hand_values() {
        let x = t(&[1, 1, 2, 2], &[0.0, 2.0, 2.0, 4.0]);
        let y = upsample_bilinear(&x).unwrap();
        let expected = [
            0.0, 0.5, 1.5, 2.0, //
            0.5, 1.0, 2.0, 2.5, //
            1.5, 2.0, 3.0, 3.5, //
            2.0, 2.5, 3.5, 4.0,
        ];
        assert_eq!(y.data(), &expected);
    }

    #[test]
    fn avg_pool_and_odd_extent() {
        let x = t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(avg_pool2(&x).unwrap().data(), &[2.5]);
        assert!(avg_pool2(&Tensor::zeros(&[1, 1, 3, 2])).is_err());
    }

    #[test]
    fn conv_delta_with_ones_kernel_gives_ones() {
        let mut x = Tensor::zeros(&[1, 1, 3, 3]);
        x.data_mut()[4] = 1.0;
        let k = Tensor::ones(&[1, 1, 3, 3]);
        let y = conv2d(&x, &k, ConvGeom { stride: 1, pad: 1 }).unwrap();
        assert_eq!(y.shape(), &[1, 1, 3, 3]);
        assert!(y.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn conv_identity_and_extents() {
        let x = Tensor::from_fn(&[2, 1, 4, 4], |i| i as f64 * 0.5 - 3.0);
        let k = Tensor::ones(&[1, 1, 1, 1]);
        let y = conv2d(&x, &k, ConvGeom { stride: 1, pad: 0 }).unwrap();
        assert!(y.bit_eq(&x));
        let g = ConvGeom { stride: 2, pad: 1 };
        assert_eq!(g.out_extent(32, 4).unwrap(), 16);
        assert!(g.out_extent(32, 3).is_err());
    }

    #[test]
    fn conv_strided_matches_naive() {
        let x = Tensor::from_fn(&[1, 2, 6, 6], |i| ((i * 37 % 11) as f64) - 5.0);
        let k = Tensor::from_fn(&[3, 2, 4, 4], |i| ((i * 13 % 7) as f64) * 0.25 - 0.5);
        let g = ConvGeom { stride: 2, pad: 1 };
        let y = conv2d(&x, &k, g).unwrap();
        assert_eq!(y.shape(), &[1, 3, 3, 3]);
        for q in 0..3 {
            for oh in 0..3 {
                for ow in 0..3 {
                    let mut acc = 0.0;
                    for c in 0..2 {
                        for kh in 0..4 {
                            for kw in 0..4 {
                                let ih = (oh * 2 + kh) as isize - 1;
                                let iw = (ow * 2 + kw) as isize - 1;
                                if (0..6).contains(&ih) && (0..6).contains(&iw) {
                                    acc += k.data()[((q * 2 + c) * 4 + kh) * 4 + kw]
                                        * x.data()[(c * 6 + ih as usize) * 6 + iw as usize];
                                }
                            }
                        }
                    }
                    assert!((y.data()[(q * 3 + oh) * 3 + ow] - acc).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn log_softmax_rows_normalize() {
        let x = t(&[2, 3], &[1.0, 2.0, 3.0, -1.0, 0.0, 1000.0]);
        let y = log_softmax(&x).unwrap();
        for b in 0..2 {
            let s: f64 = y.data()[b * 3..b * 3 + 3].iter().map(|v| v.exp()).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn batch_norm_zero_input_stays_zero() {
        let y = batch_norm(&Tensor::zeros(&[4, 2, 2, 2]), 1e-5).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }
}
