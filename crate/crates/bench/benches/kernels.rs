use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use mmckd_core::datamodel::{collate, Batch, MultimodalSample, SyntheticConfig};
use mmckd_core::losses::{
    contrastive_on_tape, mvsc_loss, total_loss, ContrastiveConfig, LossMode, RepresentationSet,
};
use mmckd_core::nn::{FusionNet, ModelConfig};
use mmckd_core::protocols::{Head, ModalityMask};
use mmckd_core::train::predict_routed;
use mmckd_core::{Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn views(b: usize, d: usize) -> RepresentationSet<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let views = std::array::from_fn(|_| {
        Tensor::new(vec![b, d], (0..b * d).map(|_| rng.gen_range(-1.0..1.0)).collect())
    });
    let labels = (0..b).map(|_| rng.gen_range(-3.0..3.0)).collect();
    RepresentationSet { views, labels }
}

fn samples(n: usize) -> Vec<MultimodalSample> {
    SyntheticConfig { n_samples: n, ..SyntheticConfig::default() }
        .generate()
        .unwrap()
        .samples()
        .to_vec()
}

fn batch(samples: &[MultimodalSample]) -> Batch<f32> {
    let refs: Vec<_> = samples.iter().collect();
    collate(&refs).unwrap()
}

fn contrastive(c: &mut Criterion) {
    let cfg = ContrastiveConfig::default();
    let set = views(64, 32);
    c.bench_function("mvsc_loss/b64", |b| b.iter(|| mvsc_loss(black_box(&set), &cfg).unwrap()));
    let (m, y) = set.to_matrix();
    c.bench_function("mvsc_grad/b64", |b| {
        b.iter(|| {
            let mut tape = Tape::new();
            let x = tape.input(m.clone());
            let l = contrastive_on_tape(&mut tape, x, &y, &cfg).unwrap();
            tape.backward(l)
        })
    });
}

fn model(c: &mut Criterion) {
    let net = FusionNet::<f32>::new(ModelConfig::default(), 0).unwrap();
    let data = samples(128);
    let b16 = batch(&data[..16]);
    c.bench_function("forward_all/b16", |b| {
        b.iter(|| {
            let mut tape = Tape::new();
            net.forward_all(&mut tape, black_box(&b16)).unwrap();
        })
    });
    let b64 = batch(&data[..64]);
    let cfg = ContrastiveConfig::default();
    c.bench_function("train_step/b64", |b| {
        b.iter_batched(
            || Tape::training(1),
            |mut tape| {
                let out = net.forward_all(&mut tape, &b64).unwrap();
                let (l, _) = total_loss(&mut tape, LossMode::Mvsc, &out, &b64.labels, &cfg, 1.0).unwrap();
                tape.backward(l)
            },
            BatchSize::SmallInput,
        )
    });
    let refs: Vec<_> = data.iter().collect();
    for head in [Head::T, Head::La, Head::V] {
        let masks: Vec<ModalityMask> = vec![head.mask(); refs.len()];
        c.bench_function(&format!("predict_routed/{head}/128"), |b| {
            b.iter(|| predict_routed(&net, black_box(&refs), &masks).unwrap())
        });
    }
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(20);
    targets = contrastive, model
}
criterion_main!(benches);
