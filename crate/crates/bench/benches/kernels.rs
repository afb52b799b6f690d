use arithlm::amnesic::{fit_probe, Embeddings};
use arithlm::tasks::generate_all;
use arithlm::train::{train_step, AdamState};
use arithlm::{AttentionShape, Model, ModelConfig, RngState, Sample, Tape, TaskSpec, Tensor, TrainConfig};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

fn random(shape: &[usize], rng: &mut RngState) -> Tensor<f32> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.normal() as f32).collect()).unwrap()
}

fn matmul(c: &mut Criterion) {
    let mut rng = RngState::new(1);
    let mut g = c.benchmark_group("matmul");
    for (m, k, n) in [(1920, 64, 64), (1920, 64, 256), (1920, 256, 64)] {
        let a = random(&[m, k], &mut rng);
        let b = random(&[k, n], &mut rng);
        g.bench_function(BenchmarkId::from_parameter(format!("{m}x{k}x{n}")), |bench| {
            bench.iter(|| {
                let mut t = Tape::new();
                let (x, y) = (t.leaf(&a), t.leaf(&b));
                black_box(t.matmul(x, y).unwrap());
            })
        });
    }
    g.finish();
}

fn attention(c: &mut Criterion) {
    let mut rng = RngState::new(2);
    let (batch, len, d) = (128, 15, 64);
    let q = random(&[batch * len, d], &mut rng);
    let k = random(&[batch * len, d], &mut rng);
    let v = random(&[batch * len, d], &mut rng);
    for causal in [false, true] {
        c.bench_function(&format!("attention/b128_l15_h8_causal={causal}"), |bench| {
            bench.iter(|| {
                let mut t = Tape::new();
                let (qv, kv, vv) = (t.leaf(&q), t.leaf(&k), t.leaf(&v));
                let shape = AttentionShape {
                    batch,
                    q_len: len,
                    k_len: len,
                    heads: 8,
                    causal,
                };
                black_box(t.attention(qv, kv, vv, shape).unwrap());
            })
        });
    }
}

fn training_step(c: &mut Criterion) {
    let task = TaskSpec::addition();
    let samples = generate_all(&task).unwrap();
    let batch: Vec<&Sample> = samples.iter().step_by(97).take(32).collect();
    let mut g = c.benchmark_group("train_step");
    g.sample_size(10);
    for (name, config, train) in [
        ("encoder_decoder_b32", ModelConfig::encoder_decoder(), TrainConfig::default()),
        ("decoder_only_b32", ModelConfig::decoder_only(), TrainConfig::decoder_only()),
    ] {
        let mut model: Model = Model::build(config, &mut RngState::new(3)).unwrap();
        let mut state = AdamState::new(model.params());
        let mut dropout = RngState::new(4);
        g.bench_function(name, |bench| {
            bench.iter(|| black_box(train_step(&mut model, &mut state, &train, &batch, Some(&mut dropout)).unwrap()))
        });
    }
    g.finish();
}

fn generation(c: &mut Criterion) {
    let task = TaskSpec::addition();
    let samples = generate_all(&task).unwrap();
    let prompts: Vec<&[u8]> = samples.iter().take(256).map(|s| s.prompt.as_slice()).collect();
    let model: Model = Model::build(ModelConfig::encoder_decoder(), &mut RngState::new(5)).unwrap();
    let mut g = c.benchmark_group("generate");
    g.sample_size(10);
    g.bench_function("encoder_decoder_256x8", |bench| {
        bench.iter(|| black_box(model.greedy_generate_batch(&prompts, 8).unwrap()))
    });
    g.finish();
}

fn probe(c: &mut Criterion) {
    let mut g = c.benchmark_group("fit_probe");
    g.sample_size(10);
    for (n, d) in [(1024, 256), (4096, 256), (4096, 576), (16384, 576)] {
        let mut rng = RngState::new(6);
        let x = Embeddings::new(n, d, (0..n * d).map(|_| rng.normal()).collect()).unwrap();
        let y: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
        g.bench_function(BenchmarkId::new(format!("d{d}"), n), |bench| bench.iter(|| black_box(fit_probe(&x, &y).unwrap())));
    }
    g.finish();
}

criterion_group!(benches, matmul, attention, training_step, generation, probe);
criterion_main!(benches);
