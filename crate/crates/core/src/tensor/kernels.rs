//! Forward kernels shared by the traced and untraced paths.
//!
//! Binary kernels accept identical shapes, or a one-element operand that is
//! broadcast against the other side.

use super::Tensor;
use crate::error::{Error, Result};

/// Boundary rule for [`shift`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pad {
    Zero,
    /// Repeat the nearest edge value.
    Replicate,
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::ShapeMismatch {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

/// Output shape of a broadcasting binary op.
pub(crate) fn broadcast_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<Vec<usize>> {
    if a.shape() == b.shape() || b.numel() == 1 {
        Ok(a.shape().to_vec())
    } else if a.numel() == 1 {
        Ok(b.shape().to_vec())
    } else {
        Err(mismatch(op, a, b))
    }
}

pub fn binary(op: &'static str, a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    let shape = broadcast_shape(op, a, b)?;
    let (ad, bd) = (a.data(), b.data());
    let data = if ad.len() == bd.len() && a.shape() == b.shape() {
        ad.iter().zip(bd).map(|(&x, &y)| f(x, y)).collect()
    } else if bd.len() == 1 {
        let y = bd[0];
        ad.iter().map(|&x| f(x, y)).collect()
    } else {
        let x = ad[0];
        bd.iter().map(|&y| f(x, y)).collect()
    };
    Ok(Tensor::from_parts(shape, data))
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    binary("add", a, b, |x, y| x + y)
}

pub fn sub(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    binary("sub", a, b, |x, y| x - y)
}

pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    binary("mul", a, b, |x, y| x * y)
}

pub fn div(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    binary("div", a, b, |x, y| x / y)
}

pub fn scale(a: &Tensor, c: f64) -> Tensor {
    a.map(|x| x * c)
}

pub fn add_scalar(a: &Tensor, c: f64) -> Tensor {
    a.map(|x| x + c)
}

pub fn square(a: &Tensor) -> Tensor {
    a.map(|x| x * x)
}

pub fn sqrt(a: &Tensor) -> Tensor {
    a.map(f64::sqrt)
}

pub fn exp(a: &Tensor) -> Tensor {
    a.map(f64::exp)
}

pub fn ln(a: &Tensor) -> Tensor {
    a.map(f64::ln)
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn silu(a: &Tensor) -> Tensor {
    a.map(|x| x * sigmoid(x))
}

pub fn clamp(a: &Tensor, lo: f64, hi: f64) -> Tensor {
    a.map(|x| x.clamp(lo, hi))
}

/// Sum of all entries as a rank-0 tensor; the empty sum is 0.
pub fn sum(a: &Tensor) -> Tensor {
    Tensor::scalar(a.data().iter().sum())
}

pub fn mean(a: &Tensor) -> Result<Tensor> {
    if a.numel() == 0 {
        return Err(Error::invalid("mean", "mean of an empty tensor"));
    }
    Ok(Tensor::scalar(a.data().iter().sum::<f64>() / a.numel() as f64))
}

pub fn norm2(a: &Tensor) -> Tensor {
    Tensor::scalar(a.norm2())
}

/// `(outer, n, inner)` extents around `axis`.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn check_axis(op: &'static str, a: &Tensor, axis: usize) -> Result<()> {
    if axis >= a.ndim() {
        return Err(Error::invalid(
            op,
            format!("axis {axis} out of range for shape {:?}", a.shape()),
        ));
    }
    Ok(())
}

/// Numerically stable `log Σ exp` along `axis`; the axis is removed.
pub fn logsumexp(a: &Tensor, axis: usize) -> Result<Tensor> {
    check_axis("logsumexp", a, axis)?;
    let (outer, n, inner) = axis_split(a.shape(), axis);
    if n == 0 {
        return Err(Error::invalid("logsumexp", "reduction over an empty axis"));
    }
    let x = a.data();
    let mut out = Vec::with_capacity(outer * inner);
    for o in 0..outer {
        for i in 0..inner {
            let at = |k: usize| x[(o * n + k) * inner + i];
            let m = (0..n).map(at).fold(f64::NEG_INFINITY, f64::max);
            let s: f64 = (0..n).map(|k| (at(k) - m).exp()).sum();
            out.push(m + s.ln());
        }
    }
    let mut shape = a.shape().to_vec();
    shape.remove(axis);
    Ok(Tensor::from_parts(shape, out))
}

/// Moves values along `axis`: `y[i] = x[i + offset]`, with out-of-range
/// sources filled according to `pad`.
pub fn shift(a: &Tensor, axis: usize, offset: isize, pad: Pad) -> Result<Tensor> {
    check_axis("shift", a, axis)?;
    let (outer, n, inner) = axis_split(a.shape(), axis);
    let x = a.data();
    let mut out = vec![0.0; x.len()];
    for o in 0..outer {
        for k in 0..n {
            if let Some(src) = shift_source(k, n, offset, pad) {
                let dst = (o * n + k) * inner;
                let from = (o * n + src) * inner;
                out[dst..dst + inner].copy_from_slice(&x[from..from + inner]);
            }
        }
    }
    Ok(Tensor::from_parts(a.shape().to_vec(), out))
}

pub(crate) fn shift_source(k: usize, n: usize, offset: isize, pad: Pad) -> Option<usize> {
    let src = k as isize + offset;
    if (0..n as isize).contains(&src) {
        Some(src as usize)
    } else {
        match pad {
            Pad::Zero => None,
            Pad::Replicate => Some(src.clamp(0, n as isize - 1) as usize),
        }
    }
}

pub fn reshape(a: &Tensor, shape: &[usize]) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    if n != a.numel() {
        return Err(Error::ShapeMismatch {
            op: "reshape",
            left: a.shape().to_vec(),
            right: shape.to_vec(),
        });
    }
    Ok(Tensor::from_parts(shape.to_vec(), a.data().to_vec()))
}

pub fn broadcast_to(a: &Tensor, shape: &[usize]) -> Result<Tensor> {
    if a.shape() == shape {
        return Ok(a.clone());
    }
    let v = a.item().map_err(|_| Error::ShapeMismatch {
        op: "broadcast_to",
        left: a.shape().to_vec(),
        right: shape.to_vec(),
    })?;
    Ok(Tensor::full(shape, v))
}

/// Stacks same-shaped tensors along a new leading axis.
pub fn stack(parts: &[&Tensor]) -> Result<Tensor> {
    let Some(first) = parts.first() else {
        return Err(Error::invalid("stack", "nothing to stack"));
    };
    let mut data = Vec::with_capacity(first.numel() * parts.len());
    for p in parts {
        if p.shape() != first.shape() {
            return Err(mismatch("stack", first, p));
        }
        data.extend_from_slice(p.data());
    }
    let mut shape = vec![parts.len()];
    shape.extend_from_slice(first.shape());
    Ok(Tensor::from_parts(shape, data))
}

/// `mask[i] ? a[i] : b[i]`.
pub fn select(mask: &[bool], a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(mismatch("select", a, b));
    }
    if mask.len() != a.numel() {
        return Err(Error::invalid(
            "select",
            format!("mask has {} entries, tensors have {}", mask.len(), a.numel()),
        ));
    }
    let data = mask
        .iter()
        .zip(a.data().iter().zip(b.data()))
        .map(|(&m, (&x, &y))| if m { x } else { y })
        .collect();
    Ok(Tensor::from_parts(a.shape().to_vec(), data))
}

/// Per-entry unit vectors of the 2-vector field `(dx, dy)`; entries whose
/// norm does not exceed `tau` map to `(0, 0)`.
pub fn unit_vectors(dx: &Tensor, dy: &Tensor, tau: f64) -> Result<(Tensor, Tensor)> {
    if dx.shape() != dy.shape() {
        return Err(mismatch("unit_vectors", dx, dy));
    }
    let mut ux = Vec::with_capacity(dx.numel());
    let mut uy = Vec::with_capacity(dx.numel());
    for (&a, &b) in dx.data().iter().zip(dy.data()) {
        let n = (a * a + b * b).sqrt();
        if n > tau {
            ux.push(a / n);
            uy.push(b / n);
        } else {
            ux.push(0.0);
            uy.push(0.0);
        }
    }
    Ok((
        Tensor::from_parts(dx.shape().to_vec(), ux),
        Tensor::from_parts(dx.shape().to_vec(), uy),
    ))
}

/// Same-size 2D convolution, stride 1, zero padding.
///
/// `x` is `[H, W, Cin]`, `w` is `[kh, kw, Cin, Cout]` with odd kernel
/// extents; the result is `[H, W, Cout]`.
pub fn conv2d(x: &Tensor, w: &Tensor) -> Result<Tensor> {
    let g = ConvGeometry::new(x, w)?;
    let (xd, wd) = (x.data(), w.data());
    let mut out = vec![0.0; g.h * g.w * g.co];
    for i in 0..g.h {
        for j in 0..g.w {
            let y = &mut out[(i * g.w + j) * g.co..][..g.co];
            for a in 0..g.kh {
                let Some(ii) = (i + a).checked_sub(g.kh / 2).filter(|&v| v < g.h) else {
                    continue;
                };
                for b in 0..g.kw {
                    let Some(jj) = (j + b).checked_sub(g.kw / 2).filter(|&v| v < g.w) else {
                        continue;
                    };
                    let xs = &xd[(ii * g.w + jj) * g.ci..][..g.ci];
                    let wblock = &wd[(a * g.kw + b) * g.ci * g.co..][..g.ci * g.co];
                    for (c, &xv) in xs.iter().enumerate() {
                        let wrow = &wblock[c * g.co..][..g.co];
                        for (yo, &wv) in y.iter_mut().zip(wrow) {
                            *yo += xv * wv;
                        }
                    }
                }
            }
        }
    }
    Ok(Tensor::from_parts(vec![g.h, g.w, g.co], out))
}

pub(crate) struct ConvGeometry {
    pub h: usize,
    pub w: usize,
    pub ci: usize,
    pub co: usize,
    pub kh: usize,
    pub kw: usize,
}

impl ConvGeometry {
    pub fn new(x: &Tensor, w: &Tensor) -> Result<Self> {
        let (&[h, wd, ci], &[kh, kw, wci, co]) = (x.shape(), w.shape()) else {
            return Err(mismatch("conv2d", x, w));
        };
        if wci != ci {
            return Err(mismatch("conv2d", x, w));
        }
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::invalid("conv2d", "kernel extents must be odd"));
        }
        Ok(Self {
            h,
            w: wd,
            ci,
            co,
            kh,
            kw,
        })
    }
}

/// Adds `b[c]` to every entry whose last index is `c`.
pub fn add_channel_bias(x: &Tensor, b: &Tensor) -> Result<Tensor> {
    let c = b.numel();
    if b.ndim() != 1 || x.shape().last() != Some(&c) {
        return Err(mismatch("add_channel_bias", x, b));
    }
    let bd = b.data();
    let data = x
        .data()
        .chunks_exact(c.max(1))
        .flat_map(|row| row.iter().zip(bd).map(|(v, bv)| v + bv))
        .collect();
    Ok(Tensor::from_parts(x.shape().to_vec(), data))
}

/// Matrix-vector product `m[r, c] · v[c] -> [r]`.
pub fn matvec(m: &Tensor, v: &Tensor) -> Result<Tensor> {
    let (&[_, cols], &[n]) = (m.shape(), v.shape()) else {
        return Err(mismatch("matvec", m, v));
    };
    if cols != n {
        return Err(mismatch("matvec", m, v));
    }
    let vd = v.data();
    let out = m
        .data()
        .chunks_exact(cols.max(1))
        .map(|row| row.iter().zip(vd).map(|(a, b)| a * b).sum())
        .collect::<Vec<f64>>();
    let rows = m.shape()[0];
    let out = if cols == 0 { vec![0.0; rows] } else { out };
    Ok(Tensor::from_parts(vec![rows], out))
}
