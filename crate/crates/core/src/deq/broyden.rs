//! Good Broyden root finding with a low-rank inverse-Jacobian estimate.
//!
//! The estimate starts at `-I`, which suits residuals of the form
//! `g(z) = f(z) - z` with a small `∂f/∂z`: the first step is then a plain
//! fixed-point update `z ← f(z)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::meter::{MemoryMeter, Tag, Tracked};
use crate::tensor::Real;

/// Iteration cap and stopping tolerances.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    pub max_iter: usize,
    /// Absolute forward tolerance; `None` applies `1e-6·√(B·D)`.
    pub tol_forward: Option<f64>,
    /// Absolute adjoint tolerance; `None` applies `2e-10·√(B·D)`.
    pub tol_backward: Option<f64>,
}

pub const FORWARD_TOL_SCALE: f64 = 1e-6;
pub const BACKWARD_TOL_SCALE: f64 = 2e-10;

impl SolverConfig {
    pub fn new(max_iter: usize) -> Self {
        Self {
            max_iter,
            tol_forward: None,
            tol_backward: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_iter == 0 {
            return Err(Error::Input("solver max_iter must be at least 1".into()));
        }
        for t in [self.tol_forward, self.tol_backward].into_iter().flatten() {
            if !(t > 0.0 && t.is_finite()) {
                return Err(Error::Input(format!("solver tolerance {t} must be positive")));
            }
        }
        Ok(())
    }

    /// `(forward, backward)` tolerances for a `b × d` state.
    pub fn tolerances(&self, b: usize, d: usize) -> (f64, f64) {
        let root = ((b * d) as f64).sqrt();
        (
            self.tol_forward.unwrap_or(FORWARD_TOL_SCALE * root),
            self.tol_backward.unwrap_or(BACKWARD_TOL_SCALE * root),
        )
    }
}

fn dot<T: Real>(a: &[T], b: &[T]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x.f64() * y.f64()).sum()
}

fn norm<T: Real>(a: &[T]) -> f64 {
    dot(a, a).sqrt()
}

/// Iterate, residual and the rank-one factors `H = -I + Σ u_k v_kᵀ`.
#[derive(Debug)]
pub struct BroydenState<T> {
    pub z: Vec<T>,
    pub residual: Vec<T>,
    pub us: Vec<Vec<T>>,
    pub vs: Vec<Vec<T>>,
    pub iter: usize,
    tokens: Vec<Tracked>,
}

impl<T: Real> BroydenState<T> {
    fn new(z: Vec<T>, residual: Vec<T>) -> Self {
        Self {
            z,
            residual,
            us: Vec::new(),
            vs: Vec::new(),
            iter: 0,
            tokens: Vec::new(),
        }
    }

    /// `H·x`
    pub fn apply(&self, x: &[T]) -> Vec<T> {
        let mut out: Vec<T> = x.iter().map(|&v| -v).collect();
        for (u, v) in self.us.iter().zip(&self.vs) {
            let c = T::of(dot(v, x));
            out.iter_mut().zip(u).for_each(|(o, &ui)| *o += ui * c);
        }
        out
    }

    /// `Hᵀ·x`
    pub fn apply_t(&self, x: &[T]) -> Vec<T> {
        let mut out: Vec<T> = x.iter().map(|&v| -v).collect();
        for (u, v) in self.us.iter().zip(&self.vs) {
            let c = T::of(dot(u, x));
            out.iter_mut().zip(v).for_each(|(o, &vi)| *o += vi * c);
        }
        out
    }

    pub fn rank(&self) -> usize {
        self.us.len()
    }

    fn restart(&mut self) {
        self.us.clear();
        self.vs.clear();
        self.tokens.clear();
    }

    /// Good Broyden update `H ← H + (Δz − HΔg)·(Δzᵀ H) / (Δzᵀ H Δg)`.
    /// Returns false when the denominator is too small to trust.
    fn update(&mut self, dz: &[T], dg: &[T], meter: &MemoryMeter) -> bool {
        let hdg = self.apply(dg);
        let denom = dot(dz, &hdg);
        if !denom.is_finite() || denom.abs() <= 1e-12 * norm(dz) * norm(&hdg) || denom == 0.0 {
            return false;
        }
        let inv = T::of(1.0 / denom);
        let u: Vec<T> = dz.iter().zip(&hdg).map(|(&a, &b)| (a - b) * inv).collect();
        let v = self.apply_t(dz);
        self.tokens.push(meter.register(
            (u.len() + v.len()) * std::mem::size_of::<T>(),
            Tag::Workspace,
        ));
        self.us.push(u);
        self.vs.push(v);
        true
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BroydenOutcome<T> {
    /// Lowest-residual iterate seen.
    pub z: Vec<T>,
    pub residual_norm: f64,
    pub iters: usize,
    pub converged: bool,
}

/// Finds a root of `g` starting at `z0`. Stops once `‖g(z)‖₂ < tol` or after
/// `max_iter` steps and returns the best iterate. At most `max_iter`
/// rank-one factors are kept; the estimate restarts from `-I` when full.
pub fn broyden_solve<T, F>(
    mut g: F,
    z0: Vec<T>,
    tol: f64,
    max_iter: usize,
    meter: &MemoryMeter,
) -> Result<BroydenOutcome<T>>
where
    T: Real,
    F: FnMut(&[T]) -> Result<Vec<T>>,
{
    let check = |r: &[T], z: &[T], iters: usize| -> Result<()> {
        if r.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::Solver {
                message: "residual is not finite".into(),
                iters,
                iterate: z.iter().map(|v| v.f64()).collect(),
            })
        }
    };
    let r0 = g(&z0)?;
    if r0.len() != z0.len() {
        return Err(Error::Input("residual function changed the dimension".into()));
    }
    check(&r0, &z0, 0)?;
    let mut st = BroydenState::new(z0, r0);
    let mut rnorm = norm(&st.residual);
    let mut best = (rnorm, st.z.clone());
    while rnorm >= tol && st.iter < max_iter {
        let step: Vec<T> = st.apply(&st.residual).into_iter().map(|v| -v).collect();
        let z_new: Vec<T> = st.z.iter().zip(&step).map(|(&a, &b)| a + b).collect();
        let r_new = g(&z_new)?;
        st.iter += 1;
        check(&r_new, &z_new, st.iter)?;
        let dg: Vec<T> = r_new.iter().zip(&st.residual).map(|(&a, &b)| a - b).collect();
        if st.rank() >= max_iter {
            st.restart();
        }
        st.update(&step, &dg, meter);
        st.z = z_new;
        st.residual = r_new;
        rnorm = norm(&st.residual);
        if rnorm < best.0 {
            best = (rnorm, st.z.clone());
        }
    }
    Ok(BroydenOutcome {
        z: best.1,
        residual_norm: best.0,
        iters: st.iter,
        converged: best.0 < tol,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn solve(g: impl FnMut(&[f64]) -> Result<Vec<f64>>, z0: Vec<f64>, tol: f64, k: usize) -> BroydenOutcome<f64> {
        broyden_solve(g, z0, tol, k, &MemoryMeter::disabled()).unwrap()
    }

    #[test]
    fn identity_residual_in_two_steps() {
        let c = [3.0, -1.0, 0.5];
        let out = solve(|z| Ok(z.iter().zip(&c).map(|(a, b)| a - b).collect()), vec![0.0; 3], 1e-12, 10);
        assert!(out.converged);
        assert!(out.iters <= 2);
        for (a, b) in out.z.iter().zip(&c) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn scalar_affine_root() {
        let out = solve(|z| Ok(vec![0.5 * z[0] - 1.0]), vec![0.0], 1e-10, 20);
        assert!(out.converged);
        assert!((out.z[0] - 2.0).abs() < 1e-9);
    }

    #[test]
    fn diagonal_system() {
        let out = solve(|z| Ok(vec![z[0] - 1.0, 2.0 * z[1] - 2.0]), vec![0.0, 0.0], 1e-10, 20);
        assert!(out.converged && out.residual_norm < 1e-10);
        assert!((out.z[0] - 1.0).abs() < 1e-9 && (out.z[1] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn non_finite_residual_dumps_the_iterate() {
        let g = |z: &[f64]| Ok(vec![if z[0] == 0.0 { 1.0 } else { f64::NAN }]);
        match broyden_solve(g, vec![0.0], 1e-9, 5, &MemoryMeter::disabled()) {
            Err(Error::Solver { iterate, iters, .. }) => {
                assert_eq!(iters, 1);
                assert_eq!(iterate, vec![1.0]);
            }
            other => panic!("expected solver error, got {other:?}"),
        }
    }

    #[test]
    fn returns_best_iterate_when_capped() {
        // rotation-like map: slow to converge, so the cap is hit
        let out = solve(|z| Ok(vec![z[1] - 1.0, -z[0] + z[1] * 0.999]), vec![5.0, -3.0], 1e-14, 3);
        assert_eq!(out.iters, 3);
        assert!(!out.converged || out.residual_norm < 1e-14);
    }

    #[test]
    fn tolerance_rule() {
        let cfg = SolverConfig::new(30);
        let (f1, b1) = cfg.tolerances(100, 64);
        let (f2, b2) = cfg.tolerances(200, 64);
        assert!((f1 - 1e-6 * 80.0).abs() < 1e-18);
        assert!((b1 - 2e-10 * 80.0).abs() < 1e-22);
        assert!((f2 / f1 - 2f64.sqrt()).abs() < 1e-12);
        assert!((b2 / b1 - 2f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn workspace_is_released_after_solve() {
        let meter = MemoryMeter::new();
        let c = [1.0, 2.0];
        broyden_solve(|z: &[f64]| Ok(vec![0.3 * z[0] + z[1] - c[0], z[1] * 1.5 - c[1]]), vec![0.0; 2], 1e-12, 20, &meter)
            .unwrap();
        meter.check_balanced().unwrap();
        assert!(meter.report().peak_of(Tag::Workspace) > 0);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn spd_affine_systems(dim in 1usize..=64, seed: u64) {
            // g(z) = (A - I) z + b with symmetric A, spectrum in [-0.5, 0.5]
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let mut a = vec![0.0; dim * dim];
            let q = crate::gradcheck::rand_tensor(&mut rng, dim, dim, 1.0);
            for i in 0..dim {
                for j in 0..dim {
                    let s: f64 = (0..dim).map(|k| q.get(i, k) * q.get(j, k)).sum();
                    a[i * dim + j] = s;
                }
            }
            let scale = 0.5 / (0..dim).map(|i| (0..dim).map(|j| a[i * dim + j].abs()).sum::<f64>()).fold(0.0, f64::max);
            a.iter_mut().for_each(|v| *v *= scale);
            let b: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let g = |z: &[f64]| -> Result<Vec<f64>> {
                Ok((0..dim).map(|i| (0..dim).map(|j| a[i * dim + j] * z[j]).sum::<f64>() - z[i] + b[i]).collect())
            };
            let out = solve(g, vec![0.0; dim], 1e-10, 50);
            prop_assert!(out.converged, "dim {dim}: residual {:e} after {}", out.residual_norm, out.iters);
        }
    }
}
