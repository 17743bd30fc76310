//! Implicit (equilibrium) graph network: the output is the fixed point
//! `z* = f(z*; x)` of a single cell, and gradients come from the implicit
//! function theorem instead of unrolling the solver.

mod block;
mod broyden;

pub use block::{deq_cell, deq_cell_taped, deq_cell_vjp, DeqParams, DeqTape};
pub use broyden::{broyden_solve, BroydenOutcome, BroydenState, SolverConfig, BACKWARD_TOL_SCALE, FORWARD_TOL_SCALE};

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::kernels::DropoutMask;
use crate::meter::Tag;
use crate::rev::BlockEnv;
use crate::tensor::{Real, Tensor};

/// Outcome of one root solve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolveStats {
    pub iters: usize,
    pub residual: f64,
    pub tol: f64,
    pub converged: bool,
}

impl<T> From<(&BroydenOutcome<T>, f64)> for SolveStats {
    fn from((o, tol): (&BroydenOutcome<T>, f64)) -> Self {
        Self {
            iters: o.iters,
            residual: o.residual_norm,
            tol,
            converged: o.converged,
        }
    }
}

/// Solves `f(z; x) − z = 0` from `z = 0`. The solver keeps no tape; only its
/// low-rank factors live while it runs.
pub fn deq_forward<T: Real>(
    x: &Tensor<T>,
    p: &DeqParams<T>,
    env: BlockEnv<'_, '_, T>,
    mask: Option<&DropoutMask>,
    cfg: &SolverConfig,
) -> Result<(Tensor<T>, SolveStats)> {
    cfg.validate()?;
    let (n, d) = x.shape();
    let (tol, _) = cfg.tolerances(n, d);
    let out = broyden_solve(
        |z: &[T]| {
            let z = Tensor::from_vec(n, d, z.to_vec())?;
            Ok(deq_cell(&z, x, p, env, mask)?.sub(&z)?.into_vec())
        },
        vec![T::zero(); n * d],
        tol,
        cfg.max_iter,
        env.meter,
    )?;
    let stats = SolveStats::from((&out, tol));
    Ok((Tensor::from_vec(n, d, out.z)?, stats))
}

/// Solves the adjoint system `u = g + Jᵀu` given a `Jᵀ`-product, starting
/// from `u = g`.
pub fn solve_adjoint<T, F>(
    g: &[T],
    mut jt: F,
    tol: f64,
    max_iter: usize,
    meter: &crate::meter::MemoryMeter,
) -> Result<BroydenOutcome<T>>
where
    T: Real,
    F: FnMut(&[T]) -> Result<Vec<T>>,
{
    broyden_solve(
        |u: &[T]| {
            let ju = jt(u)?;
            Ok(ju.iter().zip(g).zip(u).map(|((&j, &g), &u)| g + j - u).collect())
        },
        g.to_vec(),
        tol,
        max_iter,
        meter,
    )
}

/// Implicit backward. Solves `u = g + (∂f/∂z)ᵀ u` at `z*` with Broyden,
/// then pulls `u` back through one cell evaluation. Returns
/// `(∂x, ∂params, adjoint stats)`.
pub fn deq_backward<T: Real>(
    z_star: &Tensor<T>,
    x: &Tensor<T>,
    p: &DeqParams<T>,
    env: BlockEnv<'_, '_, T>,
    mask: Option<&DropoutMask>,
    gy: &Tensor<T>,
    cfg: &SolverConfig,
) -> Result<(Tensor<T>, DeqParams<T>, SolveStats)> {
    cfg.validate()?;
    let (n, d) = z_star.shape();
    let (_, tol) = cfg.tolerances(n, d);
    let (_, tape) = deq_cell_taped(z_star, x, p, env, mask)?;
    let tape = env.meter.retain(tape, Tag::Activation);
    let out = solve_adjoint(
        gy.as_slice(),
        |u: &[T]| {
            let u = Tensor::from_vec(n, d, u.to_vec())?;
            Ok(deq_cell_vjp(p, env, mask, &tape, &u)?.0.into_vec())
        },
        tol,
        cfg.max_iter,
        env.meter,
    )?;
    let stats = SolveStats::from((&out, tol));
    let u = Tensor::from_vec(n, d, out.z)?;
    let (_, gx, grads) = deq_cell_vjp(p, env, mask, &tape, &u)?;
    Ok((gx, grads, stats))
}

/// Runs the cell `steps` times from zero, keeping every tape, and
/// backpropagates through the chain. A slow oracle for the implicit
/// gradient on contractive cells.
pub fn deq_unrolled<T: Real>(
    x: &Tensor<T>,
    p: &DeqParams<T>,
    env: BlockEnv<'_, '_, T>,
    mask: Option<&DropoutMask>,
    gy: &Tensor<T>,
    steps: usize,
) -> Result<(Tensor<T>, Tensor<T>, DeqParams<T>)> {
    let (n, d) = x.shape();
    let mut z = Tensor::zeros(n, d);
    let mut tapes = Vec::with_capacity(steps);
    for _ in 0..steps {
        let (next, tape) = deq_cell_taped(&z, x, p, env, mask)?;
        tapes.push(tape);
        z = next;
    }
    let mut gz = gy.clone();
    let mut gx = Tensor::zeros(n, d);
    let mut grads = crate::kernels::ParamSet::zeros_like(p);
    for tape in tapes.iter().rev() {
        let (g_prev, g_x, g_p) = deq_cell_vjp(p, env, mask, tape, &gz)?;
        gx.add_assign(&g_x)?;
        crate::kernels::ParamSet::accumulate(&mut grads, &g_p)?;
        gz = g_prev;
    }
    Ok((z, gx, grads))
}
