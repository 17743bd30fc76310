//! Central finite differences, used as a gradient oracle.

use crate::error::{Error, Result};

/// `(f(θ + h·e_k) − f(θ − h·e_k)) / 2h` for every coordinate `k`.
pub fn finite_diff_grad<F>(mut f: F, theta: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::Input(format!("finite-difference step {h} must be positive")));
    }
    let mut probe = theta.to_vec();
    let mut grad = Vec::with_capacity(theta.len());
    for k in 0..theta.len() {
        probe[k] = theta[k] + h;
        let up = eval(&mut f, &probe, k)?;
        probe[k] = theta[k] - h;
        let down = eval(&mut f, &probe, k)?;
        probe[k] = theta[k];
        grad.push((up - down) / (2.0 * h));
    }
    Ok(grad)
}

/// Central difference of `f` along `dir`: `(f(θ + h·d) − f(θ − h·d)) / 2h`.
pub fn directional_diff<F>(mut f: F, theta: &[f64], dir: &[f64], h: f64) -> Result<f64>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    let shifted = |s: f64| theta.iter().zip(dir).map(|(t, d)| t + s * d).collect::<Vec<_>>();
    let up = eval(&mut f, &shifted(h), usize::MAX)?;
    let down = eval(&mut f, &shifted(-h), usize::MAX)?;
    Ok((up - down) / (2.0 * h))
}

fn eval<F>(f: &mut F, x: &[f64], k: usize) -> Result<f64>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    let v = f(x)?;
    if v.is_finite() {
        Ok(v)
    } else if k == usize::MAX {
        Err(Error::Oracle("objective is not finite along the probe direction".into()))
    } else {
        Err(Error::Oracle(format!("objective is not finite when perturbing coordinate {k}")))
    }
}

/// `|a − b| / max(|a|, |b|)`, zero when both vanish.
pub fn rel_err(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale == 0.0 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}

/// Relative error between two vectors in the 2-norm.
pub fn rel_err_vec(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = na.max(nb);
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn examples() {
        let g = finite_diff_grad(|t| Ok(t[0] * t[0]), &[3.0], 1e-5).unwrap();
        assert!((g[0] - 6.0).abs() < 1e-6);
        let g = finite_diff_grad(|_| Ok(4.0), &[1.0, -2.0, 0.5], 1e-5).unwrap();
        assert_eq!(g, vec![0.0; 3]);
        let g = finite_diff_grad(|t| Ok(t[0].sin()), &[0.0], 1e-5).unwrap();
        assert!((g[0] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn non_finite_objective_is_an_oracle_error() {
        let r = finite_diff_grad(|t| Ok(1.0 / (t[0] - 1e-5)), &[0.0], 1e-5);
        assert!(matches!(r, Err(Error::Oracle(_))));
    }

    #[test]
    fn directional_matches_gradient_projection() {
        let f = |t: &[f64]| Ok(t[0] * t[1] + t[1].exp());
        let theta = [0.3, -0.7];
        let dir = [0.6, 0.8];
        let g = finite_diff_grad(f, &theta, 1e-5).unwrap();
        let dd = directional_diff(f, &theta, &dir, 1e-5).unwrap();
        assert!(rel_err(dd, g[0] * dir[0] + g[1] * dir[1]) < 1e-8);
    }
}
