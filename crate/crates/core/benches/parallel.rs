//! Sequential vs rayon execution of the same per-chunk denoising work.
//!
//! `cargo bench -p ldul --bench parallel`; build with
//! `--no-default-features` to see the sequential-only baseline.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use ldul::diffusion::{denoise, gaussian_rows, SamplerConfig};
use ldul::nets::{Denoiser, DenoiserSpec, NoiseModel, TokenTable};
use ldul::par;
use ldul::schedule::NoiseSchedule;
use ldul::tensor::{ParamStore, Tensor};

fn setup() -> (Denoiser, ParamStore, NoiseSchedule) {
    let model = Denoiser::new(DenoiserSpec::points());
    let mut p = ParamStore::new();
    model.init(&mut p, 0);
    TokenTable::init(&mut p, model.spec().cond_dim, &[], 0);
    (model, p, NoiseSchedule::linear(200).unwrap())
}

fn bench(c: &mut Criterion) {
    let (model, params, schedule) = setup();
    let sampler = SamplerConfig::with_k(20);
    let mut group = c.benchmark_group("denoise_chunks");
    group.sample_size(10);
    for chunks in [4usize, 16] {
        let batches: Vec<Tensor> = (0..chunks)
            .map(|i| gaussian_rows(model.shape(), 64, i as u64))
            .collect();
        let work = |_: usize, z: &Tensor| denoise(&model, &params, z, None, &sampler, &schedule).unwrap();
        group.bench_with_input(BenchmarkId::new("sequential", chunks), &batches, |b, xs| {
            b.iter(|| par::map_seq(xs, work))
        });
        #[cfg(feature = "parallel")]
        group.bench_with_input(BenchmarkId::new("rayon", chunks), &batches, |b, xs| {
            b.iter(|| par::map_par(xs, work))
        });
    }
    group.finish();
}

criterion_group!(benches, bench);
criterion_main!(benches);
