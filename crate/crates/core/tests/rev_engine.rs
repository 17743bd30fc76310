use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use revgnn_core::gradcheck::{
    rand_graph, rand_tensor, rev_block_checks, rev_instance, rev_oracle_error, rev_roundtrip_error, RevShape,
};
use revgnn_core::kernels::{AggKind, AggSpec, ConvKind, NormKind, ParamSet, Topology};
use revgnn_core::meter::{MemoryMeter, Tag};
use revgnn_core::rev::*;
use revgnn_core::{Error, Tensor};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn spec() -> BlockSpec {
    BlockSpec {
        agg: AggSpec::new(AggKind::Sum),
        conv: ConvKind::Plain,
        norm: NormKind::Layer,
    }
}

#[test]
fn zero_subblocks_make_the_block_an_identity() {
    let mut r = rng(1);
    let g = rand_graph(&mut r, 6, 2, None);
    let topo = Topology::new(&g);
    let meter = MemoryMeter::disabled();
    let env = BlockEnv { topo: &topo, spec: &spec(), meter: &meter };
    let mut block = RevBlockParams::<f64>::init(6, 3, ConvKind::Plain, None, &mut r).unwrap();
    block.zero_conv();
    let xs = group_split(&rand_tensor(&mut r, 6, 6, 1.0), 3).unwrap();
    let ys = rev_forward(&block, &xs, env, None).unwrap();
    assert_eq!(ys, xs);
    assert_eq!(rev_inverse(&block, &ys, env, None).unwrap(), xs);

    let gys = group_split(&rand_tensor(&mut r, 6, 6, 1.0), 3).unwrap();
    let (_, gxs, grads) = rev_backward(&block, &ys, &gys, env, None).unwrap();
    assert_eq!(gxs.groups, gys.groups);
    assert!(grads.flatten().iter().any(|&v| v != 0.0), "zero conv still has bias/weight gradients");
}

#[test]
fn constant_second_subblock_shifts_second_group() {
    let mut r = rng(2);
    let g = rand_graph(&mut r, 5, 2, None);
    let topo = Topology::new(&g);
    let meter = MemoryMeter::disabled();
    let env = BlockEnv { topo: &topo, spec: &spec(), meter: &meter };
    let mut block = RevBlockParams::<f64>::init(4, 2, ConvKind::Plain, None, &mut r).unwrap();
    block.zero_conv();
    block.sub_blocks[1].conv.lin.bias = Tensor::from_rows(&[&[0.5, -2.0]]);
    let xs = group_split(&rand_tensor(&mut r, 5, 4, 1.0), 2).unwrap();
    let ys = rev_forward(&block, &xs, env, None).unwrap();
    assert_eq!(ys.groups[0], xs.groups[0]);
    for n in 0..5 {
        assert_eq!(ys.groups[1].get(n, 0), xs.groups[1].get(n, 0) + 0.5);
        assert_eq!(ys.groups[1].get(n, 1), xs.groups[1].get(n, 1) - 2.0);
    }
    let back = rev_inverse(&block, &ys, env, None).unwrap();
    for n in 0..5 {
        assert_eq!(back.groups[1].get(n, 0), ys.groups[1].get(n, 0) - 0.5);
    }
}

#[test]
fn three_groups_match_straight_line_evaluation() {
    let mut r = rng(3);
    let inst = rev_instance(
        RevShape {
            groups: 3,
            channels: 9,
            layers: 1,
            ..RevShape::default()
        },
        &mut r,
    )
    .unwrap();
    let topo = Topology::new(&inst.graph);
    let meter = MemoryMeter::disabled();
    let env = BlockEnv { topo: &topo, spec: &inst.spec, meter: &meter };
    let drop = inst.drop.as_ref();
    let mask = drop.map(|d| d.mask());
    let b = &inst.blocks[0];
    let [x1, x2, x3] = [&inst.xs.groups[0], &inst.xs.groups[1], &inst.xs.groups[2]];
    let f = |i: usize, x: &Tensor<f64>| sub_block_forward(&topo, x, &b.sub_blocks[i], &inst.spec, mask).unwrap();
    let x0 = x2.add(x3).unwrap();
    let y1 = f(0, &x0).add(x1).unwrap();
    let y2 = f(1, &y1).add(x2).unwrap();
    let y3 = f(2, &y2).add(x3).unwrap();
    let ys = rev_forward(b, &inst.xs, env, drop).unwrap();
    assert_eq!(ys.groups, vec![y1, y2, y3]);
}

#[test]
fn sixteen_layer_round_trip() {
    let mut r = rng(4);
    let inst = rev_instance(
        RevShape {
            layers: 16,
            nodes: 40,
            channels: 16,
            ..RevShape::default()
        },
        &mut r,
    )
    .unwrap();
    assert!(rev_roundtrip_error(&inst).unwrap() <= 1e-9);
}

#[test]
fn random_round_trips_across_group_counts() {
    let mut r = rng(5);
    for case in 0..24 {
        let groups = [2, 3, 4][case % 3];
        let shape = RevShape {
            nodes: r.gen_range(4..48),
            channels: groups * r.gen_range(1..6),
            groups,
            layers: r.gen_range(1..=64),
            drop_prob: [0.0, 0.1, 0.5][case % 3],
            agg: [AggSpec::new(AggKind::Max), AggSpec::new(AggKind::Mean), AggSpec::softmax(1.0)][case % 3],
            conv: if case % 2 == 0 { ConvKind::Plain } else { ConvKind::Sage },
            edge_dim: (case % 4 == 0).then_some(2),
        };
        let inst = rev_instance(shape, &mut r).unwrap();
        let err = rev_roundtrip_error(&inst).unwrap();
        assert!(err <= 1e-9, "case {case} {shape:?}: drift {err:e}");
    }
}

#[test]
fn inverse_refuses_a_foreign_dropout_pattern() {
    let mut r = rng(6);
    let inst = rev_instance(RevShape::default(), &mut r).unwrap();
    let topo = Topology::new(&inst.graph);
    let meter = MemoryMeter::disabled();
    let env = BlockEnv { topo: &topo, spec: &inst.spec, meter: &meter };
    let drop = inst.drop.as_ref().unwrap();
    let ys = rev_forward(&inst.blocks[0], &inst.xs, env, Some(drop)).unwrap();
    let other = make_shared_mask(12, 4, 0.2, drop.step_seed() + 1).unwrap();
    let wrong_size = make_shared_mask(13, 4, 0.2, drop.step_seed()).unwrap();
    for bad in [None, Some(&other), Some(&wrong_size)] {
        let e = rev_inverse(&inst.blocks[0], &ys, env, bad).unwrap_err();
        assert!(matches!(e, Error::Contract(_)), "{e}");
    }
    assert!(rev_inverse(&inst.blocks[0], &ys, env, Some(drop)).is_ok());
}

#[test]
fn group_count_must_match_block() {
    let mut r = rng(7);
    let inst = rev_instance(RevShape::default(), &mut r).unwrap();
    let topo = Topology::new(&inst.graph);
    let meter = MemoryMeter::disabled();
    let env = BlockEnv { topo: &topo, spec: &inst.spec, meter: &meter };
    let xs = group_split(&inst.xs.concat(), 4).unwrap();
    assert!(matches!(rev_forward(&inst.blocks[0], &xs, env, None), Err(Error::Input(_))));
    assert!(check_groups(8, 1).is_err());
    assert!(check_groups(9, 2).is_err());
}

#[test]
fn single_block_gradients_match_finite_differences() {
    for (seed, shape) in [
        (10, RevShape::default()),
        (11, RevShape { groups: 3, channels: 9, agg: AggSpec::softmax(0.8), ..RevShape::default() }),
        (12, RevShape { conv: ConvKind::Sage, agg: AggSpec::new(AggKind::Mean), edge_dim: Some(3), ..RevShape::default() }),
    ] {
        for c in rev_block_checks(shape, seed).unwrap() {
            assert!(c.passed(), "{c}");
        }
    }
}

#[test]
fn stack_gradients_match_cached_reference() {
    let mut r = rng(13);
    for (groups, tied) in [(2, false), (3, false), (2, true), (4, true)] {
        let inst = rev_instance(
            RevShape {
                layers: 8,
                groups,
                channels: 4 * groups,
                nodes: 30,
                ..RevShape::default()
            },
            &mut r,
        )
        .unwrap();
        let err = rev_oracle_error(&inst, tied).unwrap();
        assert!(err <= 1e-8, "C={groups} tied={tied}: rel err {err:e}");
    }
}

#[test]
fn single_layer_stack_is_one_block_backward() {
    let mut r = rng(14);
    let inst = rev_instance(RevShape { layers: 1, ..RevShape::default() }, &mut r).unwrap();
    let topo = Topology::new(&inst.graph);
    let meter = MemoryMeter::disabled();
    let env = BlockEnv { topo: &topo, spec: &inst.spec, meter: &meter };
    let drop = inst.drop.as_ref();
    let ys = rev_forward(&inst.blocks[0], &inst.xs, env, drop).unwrap();
    let (xs, gxs, gp) = rev_backward(&inst.blocks[0], &ys, &inst.gys, env, drop).unwrap();
    let layers = Layers::Distinct(&inst.blocks);
    let out = stack_forward(layers, inst.xs.clone(), env, drop, None).unwrap();
    let mut grads = vec![inst.blocks[0].zeros_like()];
    let res = stack_backward(layers, out, inst.gys.clone(), env, drop, &mut grads).unwrap();
    assert_eq!(res.xs.groups, xs.groups);
    assert_eq!(res.gxs.groups, gxs.groups);
    assert_eq!(grads[0], gp);
}

fn rev_step_peak(layers: usize, nodes: usize, channels: usize) -> (usize, usize) {
    let mut r = rng(15);
    let g = rand_graph(&mut r, nodes, 4, None);
    let topo = Topology::<f32>::new(&g);
    let meter = MemoryMeter::new();
    let spec = BlockSpec { agg: AggSpec::new(AggKind::Max), ..spec() };
    let env = BlockEnv { topo: &topo, spec: &spec, meter: &meter };
    let blocks: Vec<RevBlockParams<f32>> = (0..layers)
        .map(|_| RevBlockParams::init(channels, 2, ConvKind::Plain, None, &mut r).unwrap())
        .collect();
    let x: Tensor<f32> = rand_tensor(&mut r, nodes, channels, 1.0).cast();
    let drop = meter.retain(make_shared_mask(nodes, channels / 2, 0.1, 9).unwrap(), Tag::Mask);
    let stack = Layers::Distinct(&blocks);
    let out = stack_forward(stack, group_split(&x, 2).unwrap(), env, Some(&drop), Some(layers / 2)).unwrap();
    let gys = out.ys.zeros_like();
    let mut grads: Vec<_> = blocks.iter().map(|b| b.zeros_like()).collect();
    let res = stack_backward(stack, out, gys, env, Some(&drop), &mut grads).unwrap();
    assert!(res.drift.unwrap() < 1e-3);
    drop_all(res, drop);
    meter.check_balanced().unwrap();
    let rep = meter.report();
    (rep.peak_activation_bytes, rep.registrations_of(Tag::Mask))
}

fn drop_all<A, B>(_: A, _: B) {}

#[test]
fn retained_memory_is_flat_in_depth() {
    let (p4, m4) = rev_step_peak(4, 300, 32);
    let (p32, m32) = rev_step_peak(32, 300, 32);
    assert!(p32 as f64 / p4 as f64 <= 1.2, "peak(32)/peak(4) = {p32}/{p4}");
    assert_eq!((m4, m32), (1, 1));
}

#[test]
fn checkpointing_matches_full_caching() {
    let mut r = rng(16);
    let n = 24;
    let d = 6;
    let g = rand_graph(&mut r, n, 3, None);
    let topo = Topology::new(&g);
    for norm in [NormKind::Layer, NormKind::Batch] {
        let spec = BlockSpec { norm, agg: AggSpec::new(AggKind::Max), conv: ConvKind::Plain };
        let blocks: Vec<SubBlockParams<f64>> = (0..16)
            .map(|_| {
                let mut b = SubBlockParams::init(d, ConvKind::Plain, None, &mut r);
                revgnn_core::gradcheck::jitter(&mut b, &mut r, 0.3);
                b
            })
            .collect();
        let layers = Layers::Distinct(&blocks);
        let x = rand_tensor(&mut r, n, d, 1.0);
        let gy = rand_tensor(&mut r, n, d, 1.0);
        let drop = LayerDropout { drop_prob: 0.25, step_seed: 99 };

        let full_meter = MemoryMeter::new();
        let env = BlockEnv { topo: &topo, spec: &spec, meter: &full_meter };
        let (y_full, cache) = res_forward_cached(layers, x.clone(), env, Some(&drop)).unwrap();
        let mut g_full: Vec<_> = blocks.iter().map(|b| b.zeros_like()).collect();
        let gx_full = res_backward_cached(layers, cache, gy.clone(), env, &mut g_full).unwrap();
        full_meter.check_balanced().unwrap();

        for every in [1, 4, 16] {
            let meter = MemoryMeter::new();
            let env = BlockEnv { topo: &topo, spec: &spec, meter: &meter };
            let (y, ckpts) = checkpointed_forward(layers, x.clone(), env, Some(&drop), every).unwrap();
            assert_eq!(ckpts.num_saved(), 16 / every);
            assert_eq!(y, y_full);
            let mut grads: Vec<_> = blocks.iter().map(|b| b.zeros_like()).collect();
            let gx = checkpointed_backward(layers, ckpts, gy.clone(), env, Some(&drop), &mut grads).unwrap();
            meter.check_balanced().unwrap();
            assert!(gx.max_abs_diff(&gx_full).unwrap() <= 1e-10);
            for (a, b) in grads.iter().zip(&g_full) {
                let err = revgnn_core::kernels::rel_err_vec(&a.flatten(), &b.flatten());
                assert!(err <= 1e-10, "every={every}: {err:e}");
            }
            if every == 4 {
                assert!(
                    meter.report().peak_activation_bytes * 2 < full_meter.report().peak_activation_bytes,
                    "checkpointing should at least halve retained bytes at L=16"
                );
            }
        }
    }
}

#[test]
fn doubling_groups_halves_conv_weights() {
    let d = 64;
    let conv = |c: usize| c * (d / c) * (d / c);
    assert_eq!(conv(2), d * d / 2);
    assert_eq!(conv(4), d * d / 4);
    let count = |c| RevBlockParams::<f32>::count(d, c, ConvKind::Plain, None);
    // count = C·(2w + w² + w) with w = D/C
    assert_eq!(count(2), 2 * (3 * 32 + 32 * 32));
    assert_eq!(count(4), 4 * (3 * 16 + 16 * 16));
    let mut r = rng(17);
    let b = RevBlockParams::<f32>::init(d, 4, ConvKind::Plain, None, &mut r).unwrap();
    assert_eq!(b.num_params(), count(4));
}
