//! Finite-difference checks of every hand-written vector-Jacobian product.
//!
//! Each check draws a random input, a random upstream gradient `g` and a
//! random direction `d`, then compares `⟨vjp(g), d⟩` against the central
//! difference of `θ ↦ ⟨g, K(θ)⟩` along `d`. Everything runs in `f64`.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::deq::{deq_backward, deq_forward, deq_unrolled, DeqParams, SolverConfig};
use crate::error::Result;
use crate::graph::{add_self_loops, build_csr, CsrGraph, Labels};
use crate::kernels::*;
use crate::meter::MemoryMeter;
use crate::models::{
    backward, build_model, forward, Arch, Batch, Mode, ModelConfig, ModelDims, ModelParams, Operator, StackParams,
    StepOptions, Targets,
};
use crate::rev::{
    group_split, make_shared_mask, reference_stack, rev_backward, rev_forward, rev_inverse, stack_backward,
    stack_forward, BlockEnv, BlockSpec, GroupedFeatures, Layers, RevBlockParams, SharedDropoutState,
};
use crate::tensor::Tensor;
use crate::train::{loss_and_grad, LossKind};

pub const KERNEL_TOL: f64 = 1e-6;
pub const FD_STEP: f64 = 1e-5;
/// Implicit gradients carry solver error, so they get a looser bound.
pub const DEQ_TOL: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub name: String,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
    pub tol: f64,
}

impl GradCheck {
    pub fn passed(&self) -> bool {
        self.rel_err.is_finite() && self.rel_err <= self.tol
    }
}

impl std::fmt::Display for GradCheck {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{:<36} analytic {:+.10e}  numeric {:+.10e}  rel {:.2e} (tol {:.0e}) {}",
            self.name,
            self.analytic,
            self.numeric,
            self.rel_err,
            self.tol,
            if self.passed() { "ok" } else { "FAIL" }
        )
    }
}

pub fn rand_tensor(rng: &mut impl Rng, rows: usize, cols: usize, amp: f64) -> Tensor<f64> {
    let data = (0..rows * cols).map(|_| rng.gen_range(-amp..amp)).collect();
    Tensor::from_vec(rows, cols, data).expect("sized above")
}

/// Random directed graph with self-loops and `edge_dim` edge features.
pub fn rand_graph(rng: &mut impl Rng, n: usize, avg_deg: usize, edge_dim: Option<usize>) -> CsrGraph {
    let m = n * avg_deg;
    let edges: Vec<_> = (0..m).map(|_| (rng.gen_range(0..n), rng.gen_range(0..n))).collect();
    let feat = edge_dim.map(|f| rand_tensor(rng, m, f, 1.0));
    let g = build_csr(&edges, n, feat.as_ref()).expect("valid random edges");
    add_self_loops(&g).expect("valid graph")
}

/// Random perturbation with the same layout as `p`.
pub fn rand_like<P: ParamSet<f64>>(rng: &mut impl Rng, p: &P) -> P {
    let mut d = p.zeros_like();
    for t in d.tensors_mut() {
        t.as_mut_slice().iter_mut().for_each(|v| *v = rng.gen_range(-1.0..1.0));
    }
    d
}

fn inner<P: ParamSet<f64>>(a: &P, b: &P) -> f64 {
    a.tensors()
        .iter()
        .zip(b.tensors())
        .map(|(x, y)| x.dot(y).expect("matching layouts"))
        .sum()
}

/// Compares `⟨grad, d⟩` with the directional difference of
/// `θ ↦ ⟨g, f(θ)⟩` at `at` for a random direction `d`.
pub fn probe<P, F>(name: &str, at: &P, grad: &P, upstream: &Tensor<f64>, f: F, rng: &mut impl Rng) -> Result<GradCheck>
where
    P: ParamSet<f64>,
    F: Fn(&P) -> Result<Tensor<f64>>,
{
    let dir = rand_like(rng, at);
    probe_along(name, at, grad, &dir, |p| f(p)?.dot(upstream), KERNEL_TOL)
}

/// Directional check of a scalar objective.
pub fn probe_along<P, F>(name: &str, at: &P, grad: &P, dir: &P, f: F, tol: f64) -> Result<GradCheck>
where
    P: ParamSet<f64>,
    F: Fn(&P) -> Result<f64>,
{
    let analytic = inner(grad, dir);
    let mut scratch = at.clone();
    let numeric = directional_diff(
        |flat| {
            scratch.assign_flat(flat)?;
            f(&scratch)
        },
        &at.flatten(),
        &dir.flatten(),
        FD_STEP,
    )?;
    Ok(GradCheck {
        name: name.to_string(),
        analytic,
        numeric,
        rel_err: rel_err(analytic, numeric),
        tol,
    })
}

/// Moves entries away from zero so relu kinks sit outside the probe radius.
fn off_kink(mut x: Tensor<f64>) -> Tensor<f64> {
    x.as_mut_slice().iter_mut().for_each(|v| {
        if v.abs() < 0.05 {
            *v += 0.1_f64.copysign(*v);
        }
    });
    x
}

fn edge_inputs<'a>(msg: &'a Tensor<f64>, w: &'a [f64], with_msg: bool, with_w: bool) -> EdgeInputs<'a, f64> {
    EdgeInputs {
        msg: with_msg.then_some(msg),
        weight: with_w.then_some(w),
    }
}

/// Runs the vjp check of every kernel.
pub fn kernel_checks(seed: u64) -> Result<Vec<GradCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rng = &mut rng;
    let mut out = Vec::new();
    let (n, din, dout) = (9, 5, 4);

    // linear
    let x = rand_tensor(rng, n, din, 1.0);
    let p = LinearParams::glorot(din, dout, rng);
    let p = LinearParams { bias: rand_tensor(rng, 1, dout, 1.0), ..p };
    let g = rand_tensor(rng, n, dout, 1.0);
    let (gx, gp) = linear_vjp(&x, &p, &g)?;
    out.push(probe("linear/x", &x, &gx, &g, |x| linear(x, &p), rng)?);
    out.push(probe("linear/params", &p, &gp, &g, |p| linear(&x, p), rng)?);

    // relu
    let x = off_kink(rand_tensor(rng, n, din, 1.0));
    let g = rand_tensor(rng, n, din, 1.0);
    let gx = relu_vjp(&x, &g)?;
    out.push(probe("relu/x", &x, &gx, &g, |x| Ok(relu(x)), rng)?);

    // normalisation
    for (kind, label) in [(NormKind::Layer, "layer_norm"), (NormKind::Batch, "batch_norm")] {
        let x = rand_tensor(rng, n, din, 2.0);
        let mut p = NormParams::identity(din);
        p.scale = rand_tensor(rng, 1, din, 1.5);
        p.shift = rand_tensor(rng, 1, din, 1.0);
        let g = rand_tensor(rng, n, din, 1.0);
        let (_, cache) = norm(kind, &x, &p)?;
        let (gx, gp) = norm_vjp(kind, &cache, &p, &g)?;
        out.push(probe(&format!("{label}/x"), &x, &gx, &g, |x| Ok(norm(kind, x, &p)?.0), rng)?);
        out.push(probe(&format!("{label}/params"), &p, &gp, &g, |p| Ok(norm(kind, &x, p)?.0), rng)?);
    }

    // dropout
    let x = rand_tensor(rng, n, din, 1.0);
    let m = DropoutMask::sample(n, din, 0.3, rng.gen())?;
    let g = rand_tensor(rng, n, din, 1.0);
    let gx = dropout_apply(&g, &m)?;
    out.push(probe("dropout/x", &x, &gx, &g, |x| dropout_apply(x, &m), rng)?);

    // aggregation, with and without edge messages and weights
    let graph = rand_graph(rng, n, 3, None);
    let weights: Vec<f64> = (0..graph.num_edges()).map(|_| rng.gen_range(0.2..1.5)).collect();
    let specs = [
        ("sum", AggSpec::new(AggKind::Sum)),
        ("mean", AggSpec::new(AggKind::Mean)),
        ("max", AggSpec::new(AggKind::Max)),
        ("softmax", AggSpec::softmax(0.7)),
        ("softmax_hot", AggSpec::softmax(4.0)),
    ];
    for (label, spec) in specs {
        for (with_msg, with_w) in [(false, false), (true, false), (true, true)] {
            let x = rand_tensor(rng, n, din, 1.0);
            let msg = rand_tensor(rng, graph.num_edges(), din, 0.5);
            let g = rand_tensor(rng, n, din, 1.0);
            let (y, cache) = aggregate(&graph, &x, edge_inputs(&msg, &weights, with_msg, with_w), &spec)?;
            let (gx, gmsg) = aggregate_vjp(&graph, &x, edge_inputs(&msg, &weights, with_msg, with_w), &spec, &y, &cache, &g)?;
            let tag = format!("aggregate_{label}{}{}", if with_msg { "+msg" } else { "" }, if with_w { "+w" } else { "" });
            out.push(probe(
                &format!("{tag}/x"),
                &x,
                &gx,
                &g,
                |x| Ok(aggregate(&graph, x, edge_inputs(&msg, &weights, with_msg, with_w), &spec)?.0),
                rng,
            )?);
            if let Some(gmsg) = gmsg {
                out.push(probe(
                    &format!("{tag}/msg"),
                    &msg,
                    &gmsg,
                    &g,
                    |m| Ok(aggregate(&graph, &x, edge_inputs(m, &weights, with_msg, with_w), &spec)?.0),
                    rng,
                )?);
            }
        }
    }

    // graph convolution
    let fe = 3;
    let graph = rand_graph(rng, n, 3, Some(fe));
    for kind in [ConvKind::Plain, ConvKind::Sage] {
        for (label, spec, gcn) in [
            ("gcn", AggSpec::new(AggKind::Sum), true),
            ("max", AggSpec::new(AggKind::Max), false),
            ("softmax", AggSpec::softmax(1.3), false),
        ] {
            let mut topo = Topology::new(&graph);
            if gcn {
                topo = topo.with_gcn_weights()?;
            }
            let x = rand_tensor(rng, n, din, 1.0);
            let mut p = ConvParams {
                lin: LinearParams::glorot(kind.input_width(din), din, rng),
                edge_proj: Some(LinearParams::glorot(fe, din, rng)),
            };
            p.lin.bias = rand_tensor(rng, 1, din, 0.5);
            let g = rand_tensor(rng, n, din, 1.0);
            let (_, cache) = graph_conv(&topo, &x, &p, &spec, kind)?;
            let (gx, gp) = graph_conv_vjp(&topo, &x, &p, &spec, kind, &cache, &g)?;
            let tag = format!("graph_conv_{kind:?}_{label}").to_lowercase();
            out.push(probe(&format!("{tag}/x"), &x, &gx, &g, |x| Ok(graph_conv(&topo, x, &p, &spec, kind)?.0), rng)?);
            out.push(probe(&format!("{tag}/params"), &p, &gp, &g, |p| Ok(graph_conv(&topo, &x, p, &spec, kind)?.0), rng)?);
        }
    }
    Ok(out)
}

/// A random reversible-stack problem in double precision.
#[derive(Debug, Clone)]
pub struct RevInstance {
    pub graph: CsrGraph,
    pub spec: BlockSpec,
    pub blocks: Vec<RevBlockParams<f64>>,
    pub xs: GroupedFeatures<f64>,
    pub gys: GroupedFeatures<f64>,
    pub drop: Option<SharedDropoutState>,
}

/// Shape of a [`RevInstance`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RevShape {
    pub nodes: usize,
    pub channels: usize,
    pub groups: usize,
    pub layers: usize,
    pub drop_prob: f64,
    pub agg: AggSpec,
    pub conv: ConvKind,
    pub edge_dim: Option<usize>,
}

impl Default for RevShape {
    fn default() -> Self {
        Self {
            nodes: 12,
            channels: 8,
            groups: 2,
            layers: 3,
            drop_prob: 0.2,
            agg: AggSpec::new(AggKind::Max),
            conv: ConvKind::Plain,
            edge_dim: None,
        }
    }
}

/// Jitters norm and bias parameters so that no sub-block sits at its
/// identity initialisation.
pub fn jitter<P: ParamSet<f64>>(p: &mut P, rng: &mut impl Rng, amp: f64) {
    for t in p.tensors_mut() {
        t.as_mut_slice().iter_mut().for_each(|v| *v += rng.gen_range(-amp..amp));
    }
}

pub fn rev_instance(shape: RevShape, rng: &mut impl Rng) -> Result<RevInstance> {
    let graph = rand_graph(rng, shape.nodes, 3, shape.edge_dim);
    let spec = BlockSpec {
        agg: shape.agg,
        conv: shape.conv,
        norm: NormKind::Layer,
    };
    let blocks = (0..shape.layers)
        .map(|_| {
            let mut b = RevBlockParams::init(shape.channels, shape.groups, shape.conv, shape.edge_dim, rng)?;
            jitter(&mut b, rng, 0.3);
            Ok(b)
        })
        .collect::<Result<Vec<_>>>()?;
    let x = rand_tensor(rng, shape.nodes, shape.channels, 1.0);
    let g = rand_tensor(rng, shape.nodes, shape.channels, 1.0);
    let w = shape.channels / shape.groups;
    let drop = if shape.drop_prob > 0.0 {
        Some(make_shared_mask(shape.nodes, w, shape.drop_prob, rng.gen())?)
    } else {
        None
    };
    Ok(RevInstance {
        graph,
        spec,
        blocks,
        xs: group_split(&x, shape.groups)?,
        gys: group_split(&g, shape.groups)?,
        drop,
    })
}

/// Reconstruction error `‖inverse(forward(x)) − x‖∞` of a whole stack.
pub fn rev_roundtrip_error(inst: &RevInstance) -> Result<f64> {
    let topo = Topology::new(&inst.graph);
    let meter = MemoryMeter::disabled();
    let env = BlockEnv { topo: &topo, spec: &inst.spec, meter: &meter };
    let drop = inst.drop.as_ref();
    let mut state = inst.xs.clone();
    for b in &inst.blocks {
        state = rev_forward(b, &state, env, drop)?;
    }
    for b in inst.blocks.iter().rev() {
        state = rev_inverse(b, &state, env, drop)?;
    }
    state.max_abs_diff(&inst.xs)
}

/// Relative error between the reconstruction-based stack backward and the
/// cached-activation reference: the maximum over the input gradient and
/// every layer's parameter gradient.
pub fn rev_oracle_error(inst: &RevInstance, tied: bool) -> Result<f64> {
    let topo = Topology::new(&inst.graph);
    let meter = MemoryMeter::disabled();
    let env = BlockEnv { topo: &topo, spec: &inst.spec, meter: &meter };
    let drop = inst.drop.as_ref();
    let layers = if tied {
        Layers::Tied { params: &inst.blocks[0], depth: inst.blocks.len() }
    } else {
        Layers::Distinct(&inst.blocks)
    };
    let (ref_ys, ref_gx, ref_grads) = reference_stack(layers, &inst.xs, &inst.gys, env, drop)?;
    let out = stack_forward(layers, inst.xs.clone(), env, drop, None)?;
    if out.ys.max_abs_diff(&ref_ys)? != 0.0 {
        return Err(crate::Error::Oracle("stack forward differs from reference forward".into()));
    }
    let mut grads: Vec<_> = (0..layers.num_bundles()).map(|b| layers.get(b).zeros_like()).collect();
    let res = stack_backward(layers, out, inst.gys.clone(), env, drop, &mut grads)?;
    let mut worst = rel_err_vec(&res.gxs.concat().to_f64(), &ref_gx.concat().to_f64());
    for (a, b) in grads.iter().zip(&ref_grads) {
        worst = worst.max(rel_err_vec(&a.flatten(), &b.flatten()));
    }
    Ok(worst)
}

/// Finite-difference checks of a single reversible block: input and
/// parameter directions.
pub fn rev_block_checks(shape: RevShape, seed: u64) -> Result<Vec<GradCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rng = &mut rng;
    let inst = rev_instance(RevShape { layers: 1, ..shape }, rng)?;
    let topo = Topology::new(&inst.graph);
    let meter = MemoryMeter::disabled();
    let env = BlockEnv { topo: &topo, spec: &inst.spec, meter: &meter };
    let drop = inst.drop.as_ref();
    let block = &inst.blocks[0];
    let x = inst.xs.concat();
    let g = inst.gys.concat();
    let c = shape.groups;
    let ys = rev_forward(block, &inst.xs, env, drop)?;
    let (_, gxs, gp) = rev_backward(block, &ys, &inst.gys, env, drop)?;
    let fwd = |x: &Tensor<f64>, b: &RevBlockParams<f64>| -> Result<Tensor<f64>> {
        Ok(rev_forward(b, &group_split(x, c)?, env, drop)?.concat())
    };
    Ok(vec![
        probe("rev_block/x", &x, &gxs.concat(), &g, |x| fwd(x, block), rng)?,
        probe("rev_block/params", block, &gp, &g, |b| fwd(&x, b), rng)?,
    ])
}

/// Largest singular value by power iteration on `WᵀW`.
pub fn spectral_norm(w: &Tensor<f64>) -> f64 {
    let c = w.cols();
    let mut v = Tensor::filled(c, 1, 1.0 / (c as f64).sqrt());
    let mut sigma = 0.0;
    for _ in 0..200 {
        let wv = w.matmul(&v).expect("conformal");
        let u = w.matmul_tn(&wv).expect("conformal");
        let n = u.norm();
        if n == 0.0 {
            return 0.0;
        }
        v = u.scale(1.0 / n);
        sigma = n.sqrt();
    }
    sigma
}

/// Rescales conv weights to spectral norm `spectral`, spreads the conv
/// biases and halves the output norm's scale.
pub fn make_contractive(params: &mut DeqParams<f64>, spectral: f64, rng: &mut impl Rng) -> Result<()> {
    let width = params.width();
    jitter(&mut params.norm1, rng, 0.1);
    jitter(&mut params.norm2, rng, 0.1);
    params.norm2.scale = params.norm2.scale.scale(0.5);
    for conv in [&mut params.conv1, &mut params.conv2] {
        // biases spread evenly over [-2, 2] keep every row of the relu
        // output well away from constant, which bounds the norm's gain
        let mut spread: Vec<f64> = (0..width).map(|c| -2.0 + 4.0 * c as f64 / (width - 1).max(1) as f64).collect();
        spread.shuffle(rng);
        conv.lin.bias = Tensor::from_vec(1, width, spread)?;
        jitter(&mut conv.lin.bias, rng, 0.2);
        let s = spectral_norm(&conv.lin.weight);
        conv.lin.weight = conv.lin.weight.scale(spectral / s);
    }
    Ok(())
}

/// A random equilibrium problem in double precision.
#[derive(Debug, Clone)]
pub struct DeqInstance {
    pub graph: CsrGraph,
    pub spec: BlockSpec,
    pub params: DeqParams<f64>,
    pub x: Tensor<f64>,
    pub gy: Tensor<f64>,
    pub mask: Option<DropoutMask>,
}

/// Conv weights are rescaled to spectral norm `spectral` and the output
/// norm's scale is halved; the mean aggregator keeps the graph part
/// non-expansive.
pub fn deq_instance(nodes: usize, width: usize, spectral: f64, drop_prob: f64, rng: &mut impl Rng) -> Result<DeqInstance> {
    let graph = rand_graph(rng, nodes, 3, None);
    let spec = BlockSpec {
        agg: AggSpec::new(AggKind::Mean),
        conv: ConvKind::Plain,
        norm: NormKind::Layer,
    };
    let mut params = DeqParams::init(width, ConvKind::Plain, None, drop_prob, rng);
    make_contractive(&mut params, spectral, rng)?;
    let mask = if drop_prob > 0.0 {
        Some(DropoutMask::sample(nodes, width, drop_prob, rng.gen())?)
    } else {
        None
    };
    Ok(DeqInstance {
        graph,
        spec,
        x: rand_tensor(rng, nodes, width, 1.0),
        gy: rand_tensor(rng, nodes, width, 1.0),
        params,
        mask,
    })
}

/// Solver settings tight enough that solver error sits far below the
/// gradient tolerances.
pub fn tight_solver() -> SolverConfig {
    SolverConfig {
        max_iter: 200,
        tol_forward: Some(1e-12),
        tol_backward: Some(1e-12),
    }
}

/// Relative error of the implicit gradients against backprop through
/// `steps` unrolled iterations, maximised over `∂x` and `∂params`.
pub fn deq_oracle_error(inst: &DeqInstance, steps: usize) -> Result<f64> {
    let topo = Topology::new(&inst.graph);
    let meter = MemoryMeter::disabled();
    let env = BlockEnv { topo: &topo, spec: &inst.spec, meter: &meter };
    let mask = inst.mask.as_ref();
    let cfg = tight_solver();
    let (z, _) = deq_forward(&inst.x, &inst.params, env, mask, &cfg)?;
    let (gx, gp, _) = deq_backward(&z, &inst.x, &inst.params, env, mask, &inst.gy, &cfg)?;
    let (_, ux, up) = deq_unrolled(&inst.x, &inst.params, env, mask, &inst.gy, steps)?;
    Ok(rel_err_vec(&gx.to_f64(), &ux.to_f64()).max(rel_err_vec(&gp.flatten(), &up.flatten())))
}

/// Finite-difference checks of the implicit backward against the
/// post-fixed-point objective `⟨g, z*(x, θ)⟩`.
pub fn deq_checks(seed: u64) -> Result<Vec<GradCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rng = &mut rng;
    let inst = deq_instance(10, 6, 0.5, 0.2, rng)?;
    let topo = Topology::new(&inst.graph);
    let meter = MemoryMeter::disabled();
    let env = BlockEnv { topo: &topo, spec: &inst.spec, meter: &meter };
    let mask = inst.mask.as_ref();
    let cfg = tight_solver();
    let (z, _) = deq_forward(&inst.x, &inst.params, env, mask, &cfg)?;
    let (gx, gp, _) = deq_backward(&z, &inst.x, &inst.params, env, mask, &inst.gy, &cfg)?;
    let objective = |x: &Tensor<f64>, p: &DeqParams<f64>| -> Result<f64> {
        deq_forward(x, p, env, mask, &cfg)?.0.dot(&inst.gy)
    };
    let dx = rand_like(rng, &inst.x);
    let dp = rand_like(rng, &inst.params);
    Ok(vec![
        probe_along("deq/x", &inst.x, &gx, &dx, |x| objective(x, &inst.params), DEQ_TOL)?,
        probe_along("deq/params", &inst.params, &gp, &dp, |p| objective(&inst.x, p), DEQ_TOL)?,
    ])
}

/// A small end-to-end training problem in double precision.
#[derive(Debug, Clone)]
pub struct ModelToy {
    pub cfg: ModelConfig,
    pub dims: ModelDims,
    pub graph: CsrGraph,
    pub x: Tensor<f64>,
    pub labels: Labels,
    pub active: Vec<bool>,
    pub loss: LossKind,
    pub params: ModelParams<f64>,
}

impl ModelToy {
    pub fn batch(&self) -> Batch<'_, f64> {
        Batch { graph: &self.graph, x: &self.x }
    }

    pub fn targets(&self) -> Targets<'_> {
        Targets {
            labels: &self.labels,
            active: &self.active,
            loss: self.loss,
        }
    }

    /// Training-mode loss with the dropout pattern of `drop_seed`.
    pub fn loss_at(&self, params: &ModelParams<f64>, drop_seed: u64) -> Result<f64> {
        let logits = forward(params, &self.cfg, self.batch(), Mode::Train { drop_seed })?;
        Ok(loss_and_grad(&logits, &self.labels, &self.active, self.loss)?.0)
    }
}

/// `arch` over a 14-node random graph with 2-dim edge features. Biases and
/// norms are jittered so that no gradient is structurally zero; `deq`
/// stacks are made contractive and use the `gcn` operator.
pub fn model_toy(arch: Arch, loss: LossKind, seed: u64) -> Result<ModelToy> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rng = &mut rng;
    let (n, f, t) = (14, 5, 3);
    let graph = rand_graph(rng, n, 3, Some(2));
    let cfg = ModelConfig {
        arch,
        operator: if arch == Arch::Deq { Operator::Gcn } else { Operator::Gen },
        layers: 3,
        channels: 8,
        groups: 2,
        agg: AggSpec { kind: AggKind::Softmax, beta: 1.5 },
        dropout: 0.25,
        norm: NormKind::Layer,
        solver: (arch == Arch::Deq).then(tight_solver),
        checkpoint_every: None,
    };
    let dims = ModelDims { features: f, outputs: t, edge_dim: Some(2) };
    let mut params = build_model::<f64>(&cfg, &dims, rng.gen())?;
    match &mut params.stack {
        StackParams::Deq(p) => make_contractive(p, 0.5, rng)?,
        stack => jitter(stack, rng, 0.2),
    }
    jitter(&mut params.head_norm, rng, 0.2);
    jitter(&mut params.encoder.bias, rng, 0.2);
    let labels = match loss {
        LossKind::SoftmaxCe => Labels::Class((0..n).map(|_| rng.gen_range(0..t)).collect()),
        LossKind::BceLogits => Labels::Multi(Tensor::from_vec(
            n,
            t,
            (0..n * t).map(|_| f64::from(u8::from(rng.gen_bool(0.5)))).collect(),
        )?),
    };
    Ok(ModelToy {
        cfg,
        dims,
        x: rand_tensor(rng, n, f, 1.0),
        active: (0..n).map(|i| i % 4 != 3).collect(),
        labels,
        loss,
        graph,
        params,
    })
}

/// Directional finite-difference check of the full training gradient of
/// every architecture, and of the loss gradients themselves.
pub fn model_checks(seed: u64) -> Result<Vec<GradCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for kind in [LossKind::SoftmaxCe, LossKind::BceLogits] {
        let logits = rand_tensor(&mut rng, 6, 4, 3.0);
        let labels = match kind {
            LossKind::SoftmaxCe => Labels::Class((0..6).map(|i| i % 4).collect()),
            LossKind::BceLogits => Labels::Multi(Tensor::from_vec(6, 4, (0..24).map(|i| (i % 3 == 0) as u8 as f64).collect())?),
        };
        let active = [true, false, true, true, false, true];
        let (_, g) = loss_and_grad(&logits, &labels, &active, kind)?;
        let dir = rand_like(&mut rng, &logits);
        out.push(probe_along(
            &format!("loss/{kind:?}"),
            &logits,
            &g,
            &dir,
            |l| Ok(loss_and_grad(l, &labels, &active, kind)?.0),
            KERNEL_TOL,
        )?);
    }
    for arch in Arch::ALL {
        let toy = model_toy(arch, LossKind::SoftmaxCe, rng.gen())?;
        let drop_seed = rng.gen();
        let step = backward(
            &toy.params,
            &toy.cfg,
            toy.batch(),
            toy.targets(),
            StepOptions { drop_seed, probe_layer: None },
            &MemoryMeter::disabled(),
        )?;
        let dir = rand_like(&mut rng, &toy.params);
        let tol = if arch == Arch::Deq { DEQ_TOL } else { KERNEL_TOL };
        out.push(probe_along(
            &format!("model/{arch}"),
            &toy.params,
            &step.grads,
            &dir,
            |p| toy.loss_at(p, drop_seed),
            tol,
        )?);
    }
    Ok(out)
}
