use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use revgnn_core::deq::*;
use revgnn_core::gradcheck::{deq_checks, deq_instance, deq_oracle_error, rand_tensor, tight_solver};
use revgnn_core::graph::{add_self_loops, build_csr};
use revgnn_core::kernels::{AggKind, AggSpec, ConvKind, ConvParams, LinearParams, NormKind, NormParams, ParamSet, Topology};
use revgnn_core::meter::{MemoryMeter, Tag};
use revgnn_core::rev::{BlockEnv, BlockSpec};
use revgnn_core::Tensor;

fn spec(agg: AggKind) -> BlockSpec {
    BlockSpec {
        agg: AggSpec::new(agg),
        conv: ConvKind::Plain,
        norm: NormKind::Layer,
    }
}

fn conv(w: &[&[f64]], b: &[f64]) -> ConvParams<f64> {
    ConvParams {
        lin: LinearParams {
            weight: Tensor::from_rows(w),
            bias: Tensor::from_rows(&[b]),
        },
        edge_proj: None,
    }
}

fn ln(v: &[f64]) -> Vec<f64> {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    v.iter().map(|x| (x - mean) / (var + 1e-5).sqrt()).collect()
}

#[test]
fn zero_convs_give_a_constant_cell() {
    let g = add_self_loops(&build_csr(&[(0, 1), (1, 2), (2, 0)], 3, None).unwrap()).unwrap();
    let topo = Topology::new(&g);
    let meter = MemoryMeter::disabled();
    let spec = spec(AggKind::Sum);
    let env = BlockEnv { topo: &topo, spec: &spec, meter: &meter };
    let b1 = [0.5, -1.0, 2.0];
    let b2 = [1.0, 1.0, -3.0];
    let zero = [&[0.0; 3][..], &[0.0; 3], &[0.0; 3]];
    let p = DeqParams {
        conv1: conv(&zero, &b1),
        norm1: NormParams::identity(3),
        conv2: conv(&zero, &b2),
        norm2: NormParams::identity(3),
        drop: 0.0,
    };
    // relu(b2 + b1) = [1.5, 0, 0], then layer norm
    let want = ln(&[1.5, 0.0, 0.0]);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = rand_tensor(&mut rng, 3, 3, 2.0);
    let z = rand_tensor(&mut rng, 3, 3, 2.0);
    let out = deq_cell(&z, &x, &p, env, None).unwrap();
    for r in 0..3 {
        for c in 0..3 {
            assert!((out.get(r, c) - want[c]).abs() < 1e-12);
        }
    }
    let (z_star, stats) = deq_forward(&x, &p, env, None, &SolverConfig::new(30)).unwrap();
    assert!(stats.converged && stats.iters <= 3, "{stats:?}");
    assert!(z_star.max_abs_diff(&out).unwrap() < 1e-12);
}

#[test]
fn one_node_pencil_arithmetic() {
    let g = add_self_loops(&build_csr(&[], 1, None).unwrap()).unwrap();
    let topo = Topology::new(&g);
    let meter = MemoryMeter::disabled();
    let spec = spec(AggKind::Sum);
    let env = BlockEnv { topo: &topo, spec: &spec, meter: &meter };
    let p = DeqParams {
        conv1: conv(&[&[1.0, 0.0], &[0.0, 1.0]], &[0.0, 0.0]),
        norm1: NormParams::identity(2),
        conv2: conv(&[&[0.0, 2.0], &[1.0, 0.0]], &[0.5, 0.0]),
        norm2: NormParams::identity(2),
        drop: 0.0,
    };
    let z = Tensor::from_rows(&[&[1.0, 0.0]]);
    let x = Tensor::from_rows(&[&[0.5, -0.5]]);
    // z1 = [1, 0]; z1 + x = [1.5, -0.5] → ±1/√(1+ε); relu keeps [s, 0]
    let s = 1.0 / (1.0_f64 + 1e-5).sqrt();
    // conv2: [s, 0]·W2 + b2 = [0.5, 2s]; plus z1 → [1.5, 2s]
    let want = ln(&[1.5, 2.0 * s]);
    let out = deq_cell(&z, &x, &p, env, None).unwrap();
    assert!((out.get(0, 0) - want[0]).abs() < 1e-12);
    assert!((out.get(0, 1) - want[1]).abs() < 1e-12);
}

#[test]
fn first_iterate_is_the_cell_at_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let inst = deq_instance(8, 4, 0.5, 0.0, &mut rng).unwrap();
    let topo = Topology::new(&inst.graph);
    let meter = MemoryMeter::disabled();
    let env = BlockEnv { topo: &topo, spec: &inst.spec, meter: &meter };
    let f0 = deq_cell(&Tensor::zeros(8, 4), &inst.x, &inst.params, env, None).unwrap();
    let (z1, stats) = deq_forward(&inst.x, &inst.params, env, None, &SolverConfig::new(1)).unwrap();
    assert_eq!(stats.iters, 1);
    assert_eq!(z1, f0);
}

#[test]
fn converged_solves_certify_the_fixed_point() {
    for seed in 0..6 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inst = deq_instance(20, 8, 0.5, if seed % 2 == 0 { 0.0 } else { 0.3 }, &mut rng).unwrap();
        let topo = Topology::new(&inst.graph);
        let meter = MemoryMeter::disabled();
        let env = BlockEnv { topo: &topo, spec: &inst.spec, meter: &meter };
        let mask = inst.mask.as_ref();
        let cfg = SolverConfig::new(40);
        let (z, stats) = deq_forward(&inst.x, &inst.params, env, mask, &cfg).unwrap();
        assert!(stats.converged, "seed {seed}: {stats:?}");
        assert_eq!(stats.tol, 1e-6 * (160.0_f64).sqrt());
        let r = deq_cell(&z, &inst.x, &inst.params, env, mask).unwrap().sub(&z).unwrap().norm();
        assert!(r < stats.tol, "seed {seed}: {r:e}");

        // single precision converges as well at the default tolerance
        let topo32 = Topology::<f32>::new(&inst.graph);
        let env32 = BlockEnv { topo: &topo32, spec: &inst.spec, meter: &meter };
        let p32 = DeqParams {
            conv1: cast_conv(&inst.params.conv1),
            norm1: cast_norm(&inst.params.norm1),
            conv2: cast_conv(&inst.params.conv2),
            norm2: cast_norm(&inst.params.norm2),
            drop: inst.params.drop,
        };
        let x32 = inst.x.cast::<f32>();
        let (z32, stats32) = deq_forward(&x32, &p32, env32, mask, &cfg).unwrap();
        assert!(stats32.converged, "seed {seed}: {stats32:?}");
        let r32 = deq_cell(&z32, &x32, &p32, env32, mask).unwrap().sub(&z32).unwrap().norm();
        assert!((r32 as f64) < stats32.tol);
    }
}

fn cast_conv(c: &ConvParams<f64>) -> ConvParams<f32> {
    ConvParams {
        lin: LinearParams {
            weight: c.lin.weight.cast(),
            bias: c.lin.bias.cast(),
        },
        edge_proj: None,
    }
}

fn cast_norm(n: &NormParams<f64>) -> NormParams<f32> {
    NormParams {
        scale: n.scale.cast(),
        shift: n.shift.cast(),
        epsilon: n.epsilon,
    }
}

#[test]
fn tolerance_scales_with_root_of_size() {
    let cfg = SolverConfig::new(10);
    let (f1, _) = cfg.tolerances(50, 64);
    let (f2, _) = cfg.tolerances(100, 64);
    assert!((f2 - f1 * 2f64.sqrt()).abs() < 1e-15);
}

#[test]
fn zero_jacobian_adjoint_is_the_upstream_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut inst = deq_instance(9, 4, 0.5, 0.0, &mut rng).unwrap();
    inst.params.conv1.lin.weight.fill(0.0);
    inst.params.conv2.lin.weight.fill(0.0);
    let topo = Topology::new(&inst.graph);
    let meter = MemoryMeter::disabled();
    let env = BlockEnv { topo: &topo, spec: &inst.spec, meter: &meter };
    let cfg = SolverConfig::new(20);
    let (z, _) = deq_forward(&inst.x, &inst.params, env, None, &cfg).unwrap();
    let (gx, gp, stats) = deq_backward(&z, &inst.x, &inst.params, env, None, &inst.gy, &cfg).unwrap();
    assert_eq!(stats.iters, 0);
    let (_, tape) = deq_cell_taped(&z, &inst.x, &inst.params, env, None).unwrap();
    let (_, gx_once, gp_once) = deq_cell_vjp(&inst.params, env, None, &tape, &inst.gy).unwrap();
    assert_eq!(gx, gx_once);
    assert_eq!(gp, gp_once);
}

#[test]
fn scalar_toy_implicit_derivative() {
    // f(z; x) = 0.5 z + x, so z* = 2x and dz*/dx = 1/(1 − 0.5) = 2
    let meter = MemoryMeter::disabled();
    let x = 0.7;
    let fwd = broyden_solve(|z: &[f64]| Ok(vec![0.5 * z[0] + x - z[0]]), vec![0.0], 1e-12, 20, &meter).unwrap();
    assert!((fwd.z[0] - 2.0 * x).abs() < 1e-10);
    let adj = solve_adjoint(&[1.0], |u: &[f64]| Ok(vec![0.5 * u[0]]), 1e-12, 20, &meter).unwrap();
    // ∂f/∂x = 1, so dz*/dx = u
    assert!(adj.converged);
    assert!((adj.z[0] - 2.0).abs() < 1e-8);
}

#[test]
fn implicit_gradients_match_unrolled_iteration() {
    for seed in 0..4 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let spectral = [0.5, 0.6][seed as usize % 2];
        let inst = deq_instance(12, 6, spectral, if seed < 2 { 0.0 } else { 0.25 }, &mut rng).unwrap();
        let err = deq_oracle_error(&inst, 60).unwrap();
        assert!(err <= 1e-3, "seed {seed}: {err:e}");
    }
}

#[test]
fn implicit_gradients_match_finite_differences() {
    for seed in 1..=3 {
        for check in deq_checks(seed).unwrap() {
            assert!(check.passed(), "{check}");
        }
    }
}

#[test]
fn tight_solver_reaches_its_tolerances() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let inst = deq_instance(10, 6, 0.5, 0.0, &mut rng).unwrap();
    let topo = Topology::new(&inst.graph);
    let meter = MemoryMeter::disabled();
    let env = BlockEnv { topo: &topo, spec: &inst.spec, meter: &meter };
    let cfg = tight_solver();
    let (z, fs) = deq_forward(&inst.x, &inst.params, env, None, &cfg).unwrap();
    let (_, _, bs) = deq_backward(&z, &inst.x, &inst.params, env, None, &inst.gy, &cfg).unwrap();
    assert!(fs.converged && bs.converged, "{fs:?} {bs:?}");
}

#[test]
fn retained_memory_is_flat_in_iteration_count() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let inst = deq_instance(64, 16, 0.5, 0.2, &mut rng).unwrap();
    let topo = Topology::<f32>::new(&inst.graph);
    let p = DeqParams {
        conv1: cast_conv(&inst.params.conv1),
        norm1: cast_norm(&inst.params.norm1),
        conv2: cast_conv(&inst.params.conv2),
        norm2: cast_norm(&inst.params.norm2),
        drop: inst.params.drop,
    };
    let mut act = Vec::new();
    let mut work = Vec::new();
    for k in [8, 32, 128] {
        let meter = MemoryMeter::new();
        let env = BlockEnv { topo: &topo, spec: &inst.spec, meter: &meter };
        // tolerances no solve can meet, so every run uses all K iterations
        let cfg = SolverConfig {
            max_iter: k,
            tol_forward: Some(1e-30),
            tol_backward: Some(1e-30),
        };
        let x = meter.retain(inst.x.cast::<f32>(), Tag::Activation);
        let mask = inst.mask.clone().map(|m| meter.retain(m, Tag::Mask));
        let (z, fs) = deq_forward(&x, &p, env, mask.as_deref(), &cfg).unwrap();
        assert_eq!(fs.iters, k);
        let z = meter.retain(z, Tag::Activation);
        let (_, grads, bs) = deq_backward(&z, &x, &p, env, mask.as_deref(), &inst.gy.cast(), &cfg).unwrap();
        assert_eq!(bs.iters, k);
        assert!(grads.all_finite());
        drop((x, z, mask));
        meter.check_balanced().unwrap();
        let r = meter.report();
        act.push(r.peak_activation_bytes);
        work.push(r.peak_of(Tag::Workspace));
    }
    assert_eq!(act[0], act[1]);
    assert_eq!(act[1], act[2]);
    assert!(work[2] > work[0]);
}
