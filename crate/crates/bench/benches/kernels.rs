use criterion::{criterion_group, criterion_main, Criterion};
use crossfi::autodiff::Graph;
use crossfi::encoder::Encoder;
use crossfi::losses::{mk_mmd, LossConfig};
use crossfi::params::ParamStore;
use crossfi::similarity::{attention_similarity, AttentionHeadParams};
use crossfi::{Embedding, EncoderConfig};
use crossfi_bench::{desk_samples, filled};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn conv(c: &mut Criterion) {
    let x = filled(&[32, 16, 32, 16], 0.0, 1.0);
    let w = filled(&[16, 16, 3, 3], 1.0, 1.0);
    c.bench_function("conv2d 3x3 16->16 fwd+bwd", |b| {
        b.iter(|| {
            let mut g = Graph::new();
            let xv = g.input(x.clone());
            let wv = g.input(w.clone());
            let y = g.conv2d(xv, wv, 1, 1).unwrap();
            let s = g.sum(y);
            g.backward(s).unwrap()
        })
    });
}

fn encoder(c: &mut Criterion) {
    let samples = desk_samples(40);
    let batch = &samples[..32];
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let enc = Encoder::build(&EncoderConfig::default(), batch[0].shape, &mut store, &mut rng).unwrap();
    c.bench_function("tiny encoder forward, batch 32", |b| b.iter(|| enc.encode(&store, batch).unwrap()));
}

fn similarity(c: &mut Criterion) {
    let (d1, h, d2) = (64, 4, 64);
    let q = Embedding::new(filled(&[64, d1], 0.0, 1.0)).unwrap();
    let k = Embedding::new(filled(&[64, d1], 2.0, 1.0)).unwrap();
    let p = AttentionHeadParams {
        heads: h,
        temperature: 8.0,
        wq: filled(&[d1, h * d2], 3.0, 0.1),
        bq: filled(&[h * d2], 4.0, 1.0),
        wk: filled(&[d1, h * d2], 5.0, 0.1),
        bk: filled(&[h * d2], 6.0, 1.0),
    };
    c.bench_function("attention similarity 64x64", |b| b.iter(|| attention_similarity(&q, &k, &p).unwrap()));
}

fn mmd(c: &mut Criterion) {
    let s = Embedding::new(filled(&[32, 64], 0.0, 1.0)).unwrap();
    let t = Embedding::new(filled(&[32, 64], 0.5, 1.0)).unwrap();
    let cfg = LossConfig::default();
    c.bench_function("mk_mmd 32 vs 32, 5 kernels", |b| {
        b.iter(|| mk_mmd(&s, &t, &cfg).unwrap())
    });
}

criterion_group!(kernels, conv, encoder, similarity, mmd);
criterion_main!(kernels);
