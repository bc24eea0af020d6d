//! Parallel vs sequential comparison of the hot kernels.
//!
//! The sequential path is the `parallel` feature's runtime fallback; both
//! produce bitwise identical results, so this suite only measures the
//! speedup. Run with `cargo bench -p lmreg-core`.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use lmreg_core::diff::Graph;
use lmreg_core::exec;
use lmreg_core::model::{ModelConfig, RegModel};
use lmreg_core::volume::{ScalarVolume, VolumeGeometry};
use lmreg_core::warp;
use lmreg_core::volume::DisplacementField;

fn rand_vec(n: usize, seed: u64) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

fn modes() -> Vec<(&'static str, bool)> {
    if cfg!(feature = "parallel") {
        vec![("sequential", true), ("parallel", false)]
    } else {
        vec![("sequential", true)]
    }
}

fn bench_conv3d(c: &mut Criterion) {
    let mut group = c.benchmark_group("conv3d_forward_16c_32cube");
    group.sample_size(10);
    let (ci, co, d) = (16, 16, 32);
    let x = rand_vec(ci * d * d * d, 1);
    let w = rand_vec(co * ci * 27, 2);
    let b = rand_vec(co, 3);
    for (name, seq) in modes() {
        group.bench_function(BenchmarkId::from_parameter(name), |bench| {
            exec::set_sequential(seq);
            bench.iter(|| {
                let mut g: Graph<f32> = Graph::new();
                let xv = g.leaf(&[ci, d, d, d], x.clone(), false).unwrap();
                let wv = g.leaf(&[co, ci, 3, 3, 3], w.clone(), false).unwrap();
                let bv = g.leaf(&[co], b.clone(), false).unwrap();
                g.conv3d(xv, wv, bv, 1).unwrap()
            });
            exec::set_sequential(false);
        });
    }
    group.finish();
}

fn bench_conv3d_backward(c: &mut Criterion) {
    let mut group = c.benchmark_group("conv3d_train_step_8c_16cube");
    group.sample_size(10);
    let (ci, co, d) = (8, 8, 16);
    let x = rand_vec(ci * d * d * d, 4);
    let w = rand_vec(co * ci * 27, 5);
    let b = rand_vec(co, 6);
    for (name, seq) in modes() {
        group.bench_function(BenchmarkId::from_parameter(name), |bench| {
            exec::set_sequential(seq);
            bench.iter(|| {
                let mut g: Graph<f32> = Graph::new();
                let xv = g.leaf(&[ci, d, d, d], x.clone(), true).unwrap();
                let wv = g.leaf(&[co, ci, 3, 3, 3], w.clone(), true).unwrap();
                let bv = g.leaf(&[co], b.clone(), true).unwrap();
                let y = g.conv3d(xv, wv, bv, 1).unwrap();
                let sq = g.square(y).unwrap();
                let loss = g.mean(sq).unwrap();
                g.backward(loss).unwrap();
            });
            exec::set_sequential(false);
        });
    }
    group.finish();
}

fn bench_warp(c: &mut Criterion) {
    let mut group = c.benchmark_group("apply_field_64cube");
    group.sample_size(20);
    let geom = VolumeGeometry::new(64, 64, 64);
    let vol = ScalarVolume::new(geom, rand_vec(geom.voxels(), 7)).unwrap();
    let field = DisplacementField::new(
        geom,
        rand_vec(3 * geom.voxels(), 8).iter().map(|v| v * 2.0).collect(),
    )
    .unwrap();
    for (name, seq) in modes() {
        group.bench_function(BenchmarkId::from_parameter(name), |bench| {
            exec::set_sequential(seq);
            bench.iter(|| warp::apply_field(&vol, &field).unwrap());
            exec::set_sequential(false);
        });
    }
    group.finish();
}

fn bench_model_forward(c: &mut Criterion) {
    let mut group = c.benchmark_group("model_forward_16cube");
    group.sample_size(10);
    let cfg = ModelConfig {
        input_dims: [16, 16, 16],
        cascade_steps: 1,
        ..ModelConfig::default()
    };
    let model = RegModel::new(cfg, 1).unwrap();
    let geom = VolumeGeometry::new(16, 16, 16);
    let m = ScalarVolume::new(geom, rand_vec(geom.voxels(), 9)).unwrap();
    let f = ScalarVolume::new(geom, rand_vec(geom.voxels(), 10)).unwrap();
    for (name, seq) in modes() {
        group.bench_function(BenchmarkId::from_parameter(name), |bench| {
            exec::set_sequential(seq);
            bench.iter(|| {
                let mut g: Graph<f32> = Graph::new();
                let mask = model.inference_mask();
                model.forward(&mut g, &mask, &m, &f, 1).unwrap()
            });
            exec::set_sequential(false);
        });
    }
    group.finish();
}

criterion_group!(
    benches,
    bench_conv3d,
    bench_conv3d_backward,
    bench_warp,
    bench_model_forward
);
criterion_main!(benches);
