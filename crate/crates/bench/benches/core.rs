use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use nmt_core::decode::{beam_search, BeamConfig};
use nmt_core::eval::bleu;
use nmt_core::model::{init_parameters, ModelConfig};
use nmt_core::subword::learn_bpe;
use nmt_core::tensor::{Graph, Tensor};
use rand::Rng;

fn matrix(rng: &mut impl Rng, n: usize) -> Tensor<f32> {
    Tensor::from_fn(&[n, n], |_| rng.gen_range(-1.0..1.0))
}

fn matmul(c: &mut Criterion) {
    let mut group = c.benchmark_group("matmul");
    let mut rng = nmt_core::seed::rng(&[1]);
    for n in [32, 128, 256] {
        let (a, b) = (matrix(&mut rng, n), matrix(&mut rng, n));
        group.throughput(Throughput::Elements((2 * n * n * n) as u64));
        group.bench_with_input(BenchmarkId::new("forward", n), &n, |bench, _| {
            bench.iter(|| {
                let g = Graph::<f32>::new();
                g.constant(a.clone()).matmul(&g.constant(b.clone())).unwrap().value()
            })
        });
        group.bench_with_input(BenchmarkId::new("forward_backward", n), &n, |bench, _| {
            bench.iter(|| {
                let g = Graph::<f32>::new();
                let x = g.param(a.clone());
                let loss = x.matmul(&g.param(b.clone())).unwrap().sum();
                g.backward(loss).unwrap()
            })
        });
    }
    group.finish();
}

fn bpe(c: &mut Criterion) {
    let mut rng = nmt_core::seed::rng(&[2]);
    let letters: Vec<char> = "abcdefghijklmnopqrstuvwxyz".chars().collect();
    let words: Vec<(String, u64)> = (0..3000)
        .map(|_| {
            let len = rng.gen_range(2..10);
            let w: String = (0..len).map(|_| letters[rng.gen_range(0..letters.len())]).collect();
            (w, rng.gen_range(1..50))
        })
        .collect();
    let mut group = c.benchmark_group("bpe_learn");
    group.sample_size(10);
    for merges in [200, 1000] {
        group.bench_with_input(BenchmarkId::from_parameter(merges), &merges, |bench, &m| {
            bench.iter(|| learn_bpe(black_box(&words), m).unwrap())
        });
    }
    group.finish();
}

fn beam(c: &mut Criterion) {
    let cfg = ModelConfig {
        enc_layers: 2,
        dec_layers: 2,
        d_model: 64,
        heads: 4,
        rel_clip: 8,
        dropout: 0.0,
        src_vocab: 64,
        tgt_vocab: 64,
        max_len: 64,
        ..ModelConfig::default()
    };
    let params = init_parameters::<f32>(&cfg, 3).unwrap();
    let src: Vec<u32> = (0..12).map(|i| 4 + (i * 7) % 60).collect();
    let mut group = c.benchmark_group("beam_search");
    for beam in [1, 4, 8] {
        let bc = BeamConfig {
            beam,
            alpha: 1.0,
            max_len: Some(20),
        };
        group.bench_with_input(BenchmarkId::from_parameter(beam), &bc, |bench, bc| {
            bench.iter(|| beam_search(&params, &cfg, black_box(&src), bc).unwrap())
        });
    }
    group.finish();
}

fn char_bleu(c: &mut Criterion) {
    let mut rng = nmt_core::seed::rng(&[4]);
    let han: Vec<char> = ('\u{4E00}'..'\u{4E40}').collect();
    let mut line = |n: usize| -> String { (0..n).map(|_| han[rng.gen_range(0..han.len())]).collect() };
    let refs: Vec<String> = (0..1000).map(|_| line(30)).collect();
    let hyps: Vec<String> = (0..1000).map(|_| line(28)).collect();
    let mut group = c.benchmark_group("bleu");
    group.throughput(Throughput::Elements(refs.len() as u64));
    for max_n in [4, 5] {
        group.bench_with_input(BenchmarkId::from_parameter(max_n), &max_n, |bench, &n| {
            bench.iter(|| bleu(black_box(&hyps), black_box(&refs), n).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, matmul, bpe, beam, char_bleu);
criterion_main!(benches);
