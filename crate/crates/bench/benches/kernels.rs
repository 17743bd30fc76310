use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};

use revgnn_core::deq::broyden_solve;
use revgnn_core::kernels::{aggregate, AggKind, AggSpec, EdgeInputs};
use revgnn_core::meter::MemoryMeter;
use revgnn_core::train::{roc_auc, BenchSpec};
use revgnn_core::Tensor;

fn aggregation(c: &mut Criterion) {
    let data = BenchSpec::default().dataset().unwrap();
    let x = Tensor::<f32>::from_vec(data.num_nodes(), 64, (0..data.num_nodes() * 64).map(|i| (i % 97) as f32 / 97.0).collect())
        .unwrap();
    let mut group = c.benchmark_group("aggregate");
    for (name, spec) in [
        ("sum", AggSpec::new(AggKind::Sum)),
        ("mean", AggSpec::new(AggKind::Mean)),
        ("max", AggSpec::new(AggKind::Max)),
        ("softmax", AggSpec::softmax(1.0)),
    ] {
        group.bench_function(BenchmarkId::new(name, "n1024_d64"), |b| {
            b.iter(|| aggregate(&data.graph, black_box(&x), EdgeInputs { msg: None, weight: None }, &spec).unwrap())
        });
    }
    group.finish();
}

fn broyden(c: &mut Criterion) {
    let dim = 64;
    // g(z) = 0.4·tanh(Pz) − z + b with a fixed permutation P
    let b: Vec<f64> = (0..dim).map(|i| (i as f64 * 0.37).sin()).collect();
    let meter = MemoryMeter::disabled();
    c.bench_function("broyden/tanh_map_dim64", |bench| {
        bench.iter(|| {
            let g = |z: &[f64]| Ok((0..dim).map(|i| 0.4 * z[(i * 7 + 3) % dim].tanh() - z[i] + b[i]).collect());
            broyden_solve(g, vec![0.0; dim], 1e-10, 100, &meter).unwrap()
        })
    });
}

fn auc(c: &mut Criterion) {
    let n = 10_000;
    let scores = Tensor::from_vec(n, 4, (0..4 * n).map(|i| ((i * 7919) % 1000) as f64).collect()).unwrap();
    let labels = Tensor::from_vec(n, 4, (0..4 * n).map(|i| ((i * 31) % 3 == 0) as u8 as f64).collect()).unwrap();
    c.bench_function("roc_auc/n10000_t4", |b| b.iter(|| roc_auc(black_box(&scores), &labels).unwrap()));
}

criterion_group!(benches, aggregation, broyden, auc);
criterion_main!(benches);
