//! Dense numeric kernels shared by the taped and untaped graphs.
//!
//! Convolutions lower to im2col followed by a GEMM. Boundaries use
//! symmetric reflection (`d c b | a b c d | c b a`), so every output keeps
//! the spatial size of its input.

use super::{NnError, Tensor};

/// `c = a * b + beta * c` over strided row/column layouts.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(k == 0 || (m - 1) * rsa + (k - 1) * csa < a.len());
    assert!(k == 0 || (k - 1) * rsb + (n - 1) * csb < b.len());
    assert!(c.len() >= m * n);
    // SAFETY: the asserts above bound every strided access inside the slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Maps a possibly out-of-range index onto `0..n` by symmetric reflection.
pub fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut j = i.rem_euclid(period);
    if j >= n as isize {
        j = period - j;
    }
    j as usize
}

#[derive(Clone, Copy, Debug)]
struct ConvDims {
    c_in: usize,
    c_out: usize,
    h: usize,
    w: usize,
    k: usize,
}

fn conv_dims(x: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<ConvDims, NnError> {
    let (xs, ws) = (x.shape(), weight.shape());
    if xs.len() != 3 {
        return Err(NnError::Shape(format!("conv2d input must be C x H x W, got {xs:?}")));
    }
    if ws.len() != 4 || ws[2] != ws[3] || ws[2] % 2 == 0 {
        return Err(NnError::Shape(format!("conv2d kernel must be square and odd, got {ws:?}")));
    }
    if ws[1] != xs[0] {
        return Err(NnError::Shape(format!(
            "conv2d input has {} channels, kernel expects {}",
            xs[0], ws[1]
        )));
    }
    if bias.len() != ws[0] {
        return Err(NnError::Shape(format!("conv2d bias has {} entries, need {}", bias.len(), ws[0])));
    }
    Ok(ConvDims { c_in: xs[0], c_out: ws[0], h: xs[1], w: xs[2], k: ws[2] })
}

fn reflect_table(len: usize, k: usize) -> Vec<usize> {
    // entry [off * len + i] is the source index for output i and tap offset off
    let pad = (k / 2) as isize;
    let mut table = Vec::with_capacity(len * k);
    for off in 0..k as isize {
        for i in 0..len as isize {
            table.push(reflect(i + off - pad, len));
        }
    }
    table
}

fn im2col(x: &[f64], d: ConvDims) -> Vec<f64> {
    let hw = d.h * d.w;
    let rows = reflect_table(d.h, d.k);
    let cols_t = reflect_table(d.w, d.k);
    let mut cols = vec![0.0; d.c_in * d.k * d.k * hw];
    let mut r = 0;
    for ci in 0..d.c_in {
        let plane = &x[ci * hw..(ci + 1) * hw];
        for ky in 0..d.k {
            for kx in 0..d.k {
                let dst = &mut cols[r * hw..(r + 1) * hw];
                for y in 0..d.h {
                    let src_row = &plane[rows[ky * d.h + y] * d.w..][..d.w];
                    let xmap = &cols_t[kx * d.w..(kx + 1) * d.w];
                    for (o, &sx) in dst[y * d.w..(y + 1) * d.w].iter_mut().zip(xmap) {
                        *o = src_row[sx];
                    }
                }
                r += 1;
            }
        }
    }
    cols
}

fn col2im(cols: &[f64], d: ConvDims) -> Vec<f64> {
    let hw = d.h * d.w;
    let rows = reflect_table(d.h, d.k);
    let cols_t = reflect_table(d.w, d.k);
    let mut x = vec![0.0; d.c_in * hw];
    let mut r = 0;
    for ci in 0..d.c_in {
        let plane = &mut x[ci * hw..(ci + 1) * hw];
        for ky in 0..d.k {
            for kx in 0..d.k {
                let src = &cols[r * hw..(r + 1) * hw];
                for y in 0..d.h {
                    let base = rows[ky * d.h + y] * d.w;
                    let xmap = &cols_t[kx * d.w..(kx + 1) * d.w];
                    for (&g, &sx) in src[y * d.w..(y + 1) * d.w].iter().zip(xmap) {
                        plane[base + sx] += g;
                    }
                }
                r += 1;
            }
        }
    }
    x
}

/// Same-size 2-D convolution with reflect padding.
///
/// `x` is `C_in x H x W`, `weight` is `C_out x C_in x k x k`, `bias` has
/// `C_out` entries.
pub fn conv2d(x: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor, NnError> {
    let d = conv_dims(x, weight, bias)?;
    let hw = d.h * d.w;
    let ckk = d.c_in * d.k * d.k;
    let mut out = vec![0.0; d.c_out * hw];
    for (co, row) in out.chunks_mut(hw.max(1)).enumerate().take(d.c_out) {
        row.fill(bias.data()[co]);
    }
    if hw > 0 {
        let cols = im2col(x.data(), d);
        gemm(d.c_out, ckk, hw, weight.data(), (ckk, 1), &cols, (hw, 1), 1.0, &mut out);
    }
    Tensor::new(vec![d.c_out, d.h, d.w], out)
}

/// Vector-Jacobian products of [`conv2d`]: `(d_input, d_weight, d_bias)`.
///
/// `need_input` skips the input gradient when the caller does not want it.
pub fn conv2d_backward(
    x: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
    d_out: &Tensor,
    need_input: bool,
) -> Result<(Option<Tensor>, Tensor, Tensor), NnError> {
    let d = conv_dims(x, weight, bias)?;
    let hw = d.h * d.w;
    let ckk = d.c_in * d.k * d.k;
    let g = d_out.data();
    let db: Vec<f64> = (0..d.c_out).map(|co| g[co * hw..(co + 1) * hw].iter().sum()).collect();
    let cols = im2col(x.data(), d);
    let mut dw = vec![0.0; d.c_out * ckk];
    gemm(d.c_out, hw, ckk, g, (hw, 1), &cols, (1, hw), 0.0, &mut dw);
    let dx = if need_input {
        let mut dcols = vec![0.0; ckk * hw];
        gemm(ckk, d.c_out, hw, weight.data(), (1, ckk), g, (hw, 1), 0.0, &mut dcols);
        Some(Tensor::new(x.shape().to_vec(), col2im(&dcols, d))?)
    } else {
        None
    };
    Ok((
        dx,
        Tensor::new(weight.shape().to_vec(), dw)?,
        Tensor::new(bias.shape().to_vec(), db)?,
    ))
}

fn linear_dims(x: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<(usize, usize, usize), NnError> {
    let (xs, ws) = (x.shape(), weight.shape());
    if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] || bias.len() != ws[0] {
        return Err(NnError::Shape(format!(
            "affine layer: input {xs:?}, weight {ws:?}, bias {:?}",
            bias.shape()
        )));
    }
    Ok((xs[0], xs[1], ws[0]))
}

/// Affine map `x * weight^T + bias` for `x: N x D`, `weight: O x D`.
pub fn linear(x: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor, NnError> {
    let (n, d, o) = linear_dims(x, weight, bias)?;
    let mut out = Vec::with_capacity(n * o);
    for _ in 0..n {
        out.extend_from_slice(bias.data());
    }
    gemm(n, d, o, x.data(), (d, 1), weight.data(), (1, d), 1.0, &mut out);
    Tensor::new(vec![n, o], out)
}

pub fn linear_backward(
    x: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
    d_out: &Tensor,
    need_input: bool,
) -> Result<(Option<Tensor>, Tensor, Tensor), NnError> {
    let (n, d, o) = linear_dims(x, weight, bias)?;
    let g = d_out.data();
    let mut db = vec![0.0; o];
    for row in g.chunks(o) {
        for (acc, v) in db.iter_mut().zip(row) {
            *acc += v;
        }
    }
    let mut dw = vec![0.0; o * d];
    gemm(o, n, d, g, (1, o), x.data(), (d, 1), 0.0, &mut dw);
    let dx = if need_input {
        let mut dx = vec![0.0; n * d];
        gemm(n, o, d, g, (o, 1), weight.data(), (d, 1), 0.0, &mut dx);
        Some(Tensor::new(vec![n, d], dx)?)
    } else {
        None
    };
    Ok((
        dx,
        Tensor::new(weight.shape().to_vec(), dw)?,
        Tensor::new(bias.shape().to_vec(), db)?,
    ))
}

pub fn softplus(v: f64) -> f64 {
    if v > 30.0 {
        v
    } else if v < -30.0 {
        v.exp()
    } else {
        v.exp().ln_1p()
    }
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}
