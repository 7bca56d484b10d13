//! Sequential vs parallel execution of the hot paths. Both variants run
//! the same code; `exec::set_parallel` toggles rayon fan-out at runtime.

use std::time::Duration;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use gaitset::dataio::{SequenceKey, SilhouetteSet};
use gaitset::exec;
use gaitset::metric::{sample_batch, train_step, Adam, BatchSpec};
use gaitset::network::{GaitSet, NetworkConfig};
use gaitset::tensor::{kernels, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const MODES: [(&str, bool); 2] = [("sequential", false), ("parallel", true)];

fn frames(n: usize, seed: u64) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut t = Tensor::<f32>::uniform(&[n, 1, 64, 44], 1.0, &mut rng);
    t.data_mut().iter_mut().for_each(|v| *v = if *v > 0.0 { 1.0 } else { 0.0 });
    t
}

fn conv(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x = Tensor::<f32>::uniform(&[30, 16, 64, 44], 1.0, &mut rng);
    let k = Tensor::<f32>::uniform(&[16, 16, 3, 3], 0.3, &mut rng);
    let mut g = c.benchmark_group("conv2d_30x16x64x44");
    for (name, par) in MODES {
        exec::set_parallel(par);
        g.bench_function(BenchmarkId::from_parameter(name), |b| b.iter(|| kernels::conv2d(&x, &k, (1, 1)).unwrap()));
    }
    g.finish();

    let mut g = c.benchmark_group("max_pool2d_30x16x64x44");
    for (name, par) in MODES {
        exec::set_parallel(par);
        g.bench_function(BenchmarkId::from_parameter(name), |b| b.iter(|| kernels::max_pool2d(&x, 2).unwrap()));
    }
    g.finish();
    exec::set_parallel(true);
}

fn network(c: &mut Criterion) {
    let model = GaitSet::<f32>::new(NetworkConfig::desk(), 0).unwrap();
    let x = frames(30, 1);
    let mut g = c.benchmark_group("embed_set_30_frames");
    for (name, par) in MODES {
        exec::set_parallel(par);
        g.bench_function(BenchmarkId::from_parameter(name), |b| b.iter(|| model.embed_set(&x).unwrap()));
    }
    g.finish();

    let data: Vec<SilhouetteSet> = (0..4)
        .flat_map(|i| {
            (0..2).map(move |s| {
                let key = SequenceKey { identity: format!("{i:03}"), condition: "NM".into(), seq: s + 1, view: 0 };
                SilhouetteSet::new(key, frames(8, (i * 2 + s) as u64)).unwrap()
            })
        })
        .collect();
    let batch = sample_batch(&data, BatchSpec::new(2, 2, 8).unwrap(), 0).unwrap();
    let mut g = c.benchmark_group("train_step_p2k2m8");
    for (name, par) in MODES {
        exec::set_parallel(par);
        let mut m = GaitSet::<f32>::new(NetworkConfig::desk(), 0).unwrap();
        let mut opt = Adam::new(1e-4);
        g.bench_function(BenchmarkId::from_parameter(name), |b| b.iter(|| train_step(&mut m, &batch, &mut opt, 0.2).unwrap()));
    }
    g.finish();
    exec::set_parallel(true);
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10).measurement_time(Duration::from_secs(5)).warm_up_time(Duration::from_secs(1));
    targets = conv, network
}
criterion_main!(benches);
