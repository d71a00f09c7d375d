use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use lines_bench::{synthetic, task_vectors};
use lines_core::merge::{self, ConsensusConfig, TiesConfig};
use lines_core::scaling::{self, ScalingSchedule};
use lines_core::tensor_store::{self, DtypePolicy, LoadOptions};
use lines_core::topology::infer_depths;
use lines_core::TopologyConfig;

const BLOCKS: usize = 12;
const WIDTH: usize = 128;

fn scale(c: &mut Criterion) {
    let tv = &task_vectors(1, BLOCKS, WIDTH)[0];
    let keys: Vec<&str> = tv.keys().collect();
    let depths = infer_depths(&keys, &TopologyConfig::new(".layer{d}.", BLOCKS)).unwrap();
    let sched = ScalingSchedule::new(0.5, 0.5, lines_core::Shape::Linear);
    let mut g = c.benchmark_group("scale");
    g.throughput(Throughput::Elements(tv.entries().numel() as u64));
    g.bench_function("linear", |b| b.iter(|| scaling::scale(tv, &depths, &sched).unwrap()));
    g.finish();
}

fn merges(c: &mut Criterion) {
    let mut g = c.benchmark_group("merge");
    for n in [2, 8] {
        let tvs = task_vectors(n, BLOCKS, WIDTH);
        g.throughput(Throughput::Elements((tvs[0].entries().numel() * n) as u64));
        g.bench_with_input(BenchmarkId::new("task_arithmetic", n), &tvs, |b, t| {
            b.iter(|| merge::task_arithmetic_merge(t).unwrap())
        });
        g.bench_with_input(BenchmarkId::new("ties", n), &tvs, |b, t| {
            b.iter(|| merge::ties_merge(t, &TiesConfig::default()).unwrap())
        });
        g.bench_with_input(BenchmarkId::new("consensus", n), &tvs, |b, t| {
            b.iter(|| merge::consensus_merge(t, &ConsensusConfig::default()).unwrap())
        });
    }
    g.finish();
}

fn storage(c: &mut Criterion) {
    let map = synthetic(BLOCKS, WIDTH, 7);
    let bytes = tensor_store::to_bytes(&map, DtypePolicy::ForceF32).unwrap();
    let mut g = c.benchmark_group("safetensors");
    g.throughput(Throughput::Bytes(bytes.len() as u64));
    g.bench_function("write", |b| b.iter(|| tensor_store::to_bytes(&map, DtypePolicy::ForceF32).unwrap()));
    g.bench_function("read", |b| b.iter(|| tensor_store::from_bytes(&bytes, LoadOptions::default()).unwrap()));
    g.bench_function("hash", |b| b.iter(|| map.content_hash()));
    g.finish();
}

criterion_group!(benches, scale, merges, storage);
criterion_main!(benches);
