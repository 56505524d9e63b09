//! Rayon data-parallel paths against the sequential fallback.
//!
//! `cargo bench` measures the global pool (`rayon_pool`) and a one-thread
//! pool (`rayon_single`); `cargo bench --no-default-features` measures the
//! plain loops under `sequential`, so the reports line up across builds.

use brainvis_core::freq::fft_magnitude;
use brainvis_core::par;
use brainvis_core::Tensor;
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn workloads() -> (Tensor<f32>, Tensor<f32>, Vec<Vec<f32>>) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let a = Tensor::<f32>::randn([256, 256], 1.0, &mut rng);
    let b = Tensor::<f32>::randn([256, 256], 1.0, &mut rng);
    let records = (0..64).map(|_| Tensor::<f32>::randn([128 * 440], 1.0, &mut rng).data().to_vec()).collect();
    (a, b, records)
}

fn run(c: &mut Criterion, mode: &str, wrap: &dyn Fn(&mut (dyn FnMut() + Send))) {
    let (a, b, records) = workloads();
    c.bench_with_input(BenchmarkId::new("matmul_256", mode), &(), |bench, _| {
        bench.iter(|| {
            let mut out = None;
            wrap(&mut || out = Some(a.matmul(&b).unwrap()));
            out
        })
    });
    c.bench_with_input(BenchmarkId::new("spectra_64x128x440", mode), &(), |bench, _| {
        bench.iter(|| {
            let mut out = Vec::new();
            wrap(&mut || out = par::map_indexed(records.len(), |i| fft_magnitude(&records[i], 128, 440, 1000.0).unwrap()));
            out
        })
    });
}

#[cfg(feature = "parallel")]
fn bench(c: &mut Criterion) {
    let threads = par::init_threads(None);
    eprintln!("rayon pool: {threads} threads");
    run(c, "rayon_pool", &|f| f());
    let single = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    run(c, "rayon_single", &|f| single.install(|| f()));
}

#[cfg(not(feature = "parallel"))]
fn bench(c: &mut Criterion) {
    run(c, "sequential", &|f| f());
}

criterion_group!(benches, bench);
criterion_main!(benches);
