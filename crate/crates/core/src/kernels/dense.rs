use super::params::{LinearParams, NormKind, NormParams};
use crate::error::{shape_err, Result};
use crate::meter::ByteSize;
use crate::tensor::{Real, Tensor};

pub fn linear<T: Real>(x: &Tensor<T>, p: &LinearParams<T>) -> Result<Tensor<T>> {
    if x.cols() != p.d_in() || p.bias.cols() != p.d_out() {
        return Err(shape_err(
            "linear",
            format!("input {:?} vs weight {:?}", x.shape(), p.weight.shape()),
        ));
    }
    let mut out = x.matmul(&p.weight)?;
    let b = p.bias.as_slice();
    for r in 0..out.rows() {
        for (o, &bv) in out.row_mut(r).iter_mut().zip(b) {
            *o += bv;
        }
    }
    debug_assert!(out.all_finite(), "linear produced non-finite output");
    Ok(out)
}

/// Returns `(∂x, ∂params)` for `linear(x, p)` with upstream `gy`.
pub fn linear_vjp<T: Real>(
    x: &Tensor<T>,
    p: &LinearParams<T>,
    gy: &Tensor<T>,
) -> Result<(Tensor<T>, LinearParams<T>)> {
    let gx = gy.matmul_nt(&p.weight)?;
    let gp = linear_param_vjp(x, gy)?;
    Ok((gx, gp))
}

/// Parameter half of [`linear_vjp`], for inputs that need no gradient.
pub fn linear_param_vjp<T: Real>(x: &Tensor<T>, gy: &Tensor<T>) -> Result<LinearParams<T>> {
    Ok(LinearParams {
        weight: x.matmul_tn(gy)?,
        bias: gy.sum_rows(),
    })
}

pub fn relu<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| v.max(T::zero()))
}

/// Gates `gy` by the sign of the relu input (or output; both work).
pub fn relu_vjp<T: Real>(x: &Tensor<T>, gy: &Tensor<T>) -> Result<Tensor<T>> {
    x.zip_map(gy, |xv, g| if xv > T::zero() { g } else { T::zero() })
}

/// Saved state of a normalisation layer: normalised input and the
/// reciprocal standard deviation per statistic group.
#[derive(Debug, Clone)]
pub struct NormCache<T> {
    pub xhat: Tensor<T>,
    pub rstd: Vec<T>,
}

impl<T: Real> ByteSize for NormCache<T> {
    fn byte_size(&self) -> usize {
        self.xhat.byte_size() + self.rstd.byte_size()
    }
}

impl<T: Real> NormCache<T> {
    /// Affine output `xhat·scale + shift`, recomputed from the cache.
    pub fn output(&self, p: &NormParams<T>) -> Tensor<T> {
        let mut y = self.xhat.clone();
        affine_rows(&mut y, p);
        y
    }
}

fn affine_rows<T: Real>(y: &mut Tensor<T>, p: &NormParams<T>) {
    let (s, b) = (p.scale.as_slice(), p.shift.as_slice());
    for r in 0..y.rows() {
        for ((v, &sv), &bv) in y.row_mut(r).iter_mut().zip(s).zip(b) {
            *v = *v * sv + bv;
        }
    }
}

fn check_norm<T: Real>(x: &Tensor<T>, p: &NormParams<T>, op: &'static str) -> Result<()> {
    if x.cols() != p.dim() || p.shift.cols() != p.dim() {
        return Err(shape_err(op, format!("input {:?} vs norm width {}", x.shape(), p.dim())));
    }
    if p.epsilon.is_nan() || p.epsilon <= 0.0 {
        return Err(crate::Error::Input("norm epsilon must be positive".into()));
    }
    Ok(())
}

/// Per-row normalisation over channels using the population variance.
pub fn layer_norm<T: Real>(x: &Tensor<T>, p: &NormParams<T>) -> Result<(Tensor<T>, NormCache<T>)> {
    check_norm(x, p, "layer_norm")?;
    let d = x.cols();
    let inv_d = T::of(1.0 / d as f64);
    let eps = T::of(p.epsilon);
    let mut xhat = Tensor::zeros(x.rows(), d);
    let mut rstd = Vec::with_capacity(x.rows());
    for r in 0..x.rows() {
        let row = x.row(r);
        let mean = row.iter().copied().sum::<T>() * inv_d;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
        let rs = (var + eps).sqrt().recip();
        for (o, &v) in xhat.row_mut(r).iter_mut().zip(row) {
            *o = (v - mean) * rs;
        }
        rstd.push(rs);
    }
    let cache = NormCache { xhat, rstd };
    let y = cache.output(p);
    debug_assert!(y.all_finite(), "layer_norm produced non-finite output");
    Ok((y, cache))
}

pub fn layer_norm_vjp<T: Real>(
    cache: &NormCache<T>,
    p: &NormParams<T>,
    gy: &Tensor<T>,
) -> Result<(Tensor<T>, NormParams<T>)> {
    let xhat = &cache.xhat;
    if !xhat.same_shape(gy) {
        return Err(shape_err("layer_norm_vjp", "upstream shape differs from cache"));
    }
    let d = xhat.cols();
    let inv_d = T::of(1.0 / d as f64);
    let scale = p.scale.as_slice();
    let mut gx = Tensor::zeros(xhat.rows(), d);
    let mut gscale = Tensor::zeros(1, d);
    let mut gshift = Tensor::zeros(1, d);
    let mut gxhat = vec![T::zero(); d];
    for r in 0..xhat.rows() {
        let (xh, g) = (xhat.row(r), gy.row(r));
        let mut m1 = T::zero();
        let mut m2 = T::zero();
        for c in 0..d {
            gxhat[c] = g[c] * scale[c];
            m1 += gxhat[c];
            m2 += gxhat[c] * xh[c];
            gscale.as_mut_slice()[c] += g[c] * xh[c];
            gshift.as_mut_slice()[c] += g[c];
        }
        m1 *= inv_d;
        m2 *= inv_d;
        let rs = cache.rstd[r];
        for (c, o) in gx.row_mut(r).iter_mut().enumerate() {
            *o = rs * (gxhat[c] - m1 - xh[c] * m2);
        }
    }
    Ok((
        gx,
        NormParams {
            scale: gscale,
            shift: gshift,
            epsilon: p.epsilon,
        },
    ))
}

/// Per-channel normalisation over rows with statistics recomputed from the
/// current batch (no running averages).
pub fn batch_norm<T: Real>(x: &Tensor<T>, p: &NormParams<T>) -> Result<(Tensor<T>, NormCache<T>)> {
    check_norm(x, p, "batch_norm")?;
    let (n, d) = x.shape();
    if n == 0 {
        return Ok((x.clone(), NormCache { xhat: x.clone(), rstd: vec![T::zero(); d] }));
    }
    let inv_n = T::of(1.0 / n as f64);
    let eps = T::of(p.epsilon);
    let mean = x.sum_rows().scale(inv_n);
    let mut var = vec![T::zero(); d];
    for r in 0..n {
        for (c, (&v, &m)) in x.row(r).iter().zip(mean.as_slice()).enumerate() {
            var[c] += (v - m) * (v - m);
        }
    }
    let rstd: Vec<T> = var.iter().map(|&v| (v * inv_n + eps).sqrt().recip()).collect();
    let mut xhat = Tensor::zeros(n, d);
    for r in 0..n {
        let src = x.row(r);
        for (c, o) in xhat.row_mut(r).iter_mut().enumerate() {
            *o = (src[c] - mean.as_slice()[c]) * rstd[c];
        }
    }
    let cache = NormCache { xhat, rstd };
    let y = cache.output(p);
    Ok((y, cache))
}

pub fn batch_norm_vjp<T: Real>(
    cache: &NormCache<T>,
    p: &NormParams<T>,
    gy: &Tensor<T>,
) -> Result<(Tensor<T>, NormParams<T>)> {
    let xhat = &cache.xhat;
    if !xhat.same_shape(gy) {
        return Err(shape_err("batch_norm_vjp", "upstream shape differs from cache"));
    }
    let (n, d) = xhat.shape();
    let inv_n = T::of(1.0 / n.max(1) as f64);
    let scale = p.scale.as_slice();
    let mut gscale = vec![T::zero(); d];
    let mut gshift = vec![T::zero(); d];
    for r in 0..n {
        for c in 0..d {
            gscale[c] += gy.get(r, c) * xhat.get(r, c);
            gshift[c] += gy.get(r, c);
        }
    }
    let mut gx = Tensor::zeros(n, d);
    for r in 0..n {
        for c in 0..d {
            let gxh = gy.get(r, c) * scale[c];
            let m1 = gshift[c] * scale[c] * inv_n;
            let m2 = gscale[c] * scale[c] * inv_n;
            gx.set(r, c, cache.rstd[c] * (gxh - m1 - xhat.get(r, c) * m2));
        }
    }
    Ok((
        gx,
        NormParams {
            scale: Tensor::from_vec(1, d, gscale)?,
            shift: Tensor::from_vec(1, d, gshift)?,
            epsilon: p.epsilon,
        },
    ))
}

pub fn norm<T: Real>(
    kind: NormKind,
    x: &Tensor<T>,
    p: &NormParams<T>,
) -> Result<(Tensor<T>, NormCache<T>)> {
    match kind {
        NormKind::Layer => layer_norm(x, p),
        NormKind::Batch => batch_norm(x, p),
    }
}

pub fn norm_vjp<T: Real>(
    kind: NormKind,
    cache: &NormCache<T>,
    p: &NormParams<T>,
    gy: &Tensor<T>,
) -> Result<(Tensor<T>, NormParams<T>)> {
    match kind {
        NormKind::Layer => layer_norm_vjp(cache, p, gy),
        NormKind::Batch => batch_norm_vjp(cache, p, gy),
    }
}
