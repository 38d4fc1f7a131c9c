//! Feature extraction, aggregation and head throughput on the mock backbone.

use std::hint::black_box;
use std::sync::Arc;

use criterion::{criterion_group, criterion_main, Criterion};
use difscil::autograd::Graph;
use difscil::backbone::mock::MockBackbone;
use difscil::features::seeded_noise;
use difscil::heads::dr_loss_graph;
use difscil::{
    Aggregator, AugSchedule, BackboneHandle, ConvNeck, EtfPrototypes, Extractor, FeatureKind,
    HeadConfig, LatentTensor, MlpHead, PromptEmbedding, PromptKind,
};

fn setup() -> (Extractor, Aggregator, LatentTensor, PromptEmbedding) {
    let h = BackboneHandle::new(Arc::new(MockBackbone::new(0)));
    let agg = Aggregator::new(&h.taps_in_range(), 32, 0).expect("aggregator");
    let z = LatentTensor::new(seeded_noise(&h.latent_shape(), 1), 0);
    let p = PromptEmbedding {
        tokens: seeded_noise(&[4, h.text_dim()], 2),
        kind: PromptKind::ClassSpecific,
    };
    (Extractor::new(h, 10), agg, z, p)
}

fn extraction(c: &mut Criterion) {
    let (x, agg, z, p) = setup();
    let mut group = c.benchmark_group("extract");
    group.bench_function("inv", |b| {
        b.iter(|| x.extract_inv(black_box(&z), &agg).expect("inv"))
    });
    group.bench_function("aug_grid", |b| {
        let sched = AugSchedule::Single(x.t_max() / 2);
        b.iter(|| {
            x.extract_aug(black_box(&z), &p, &sched, 3, &agg)
                .expect("aug")
        })
    });
    group.bench_function("gen_10_steps", |b| {
        b.iter(|| x.extract_gen(black_box(&p), 4, &agg).expect("gen"))
    });
    group.finish();
}

fn aggregation(c: &mut Criterion) {
    let (x, agg, z, _) = setup();
    let zs: Vec<&LatentTensor> = vec![&z; 32];
    let taps = x.inv_taps(&zs, &x.backbone.null_prompt()).expect("taps");
    c.bench_function("aggregate_batch_32", |b| {
        b.iter(|| {
            agg.aggregate_batch(black_box(&taps), FeatureKind::Inv)
                .expect("aggregate")
        })
    });
}

fn head_step(c: &mut Criterion) {
    let (x, agg, z, _) = setup();
    let zs: Vec<&LatentTensor> = vec![&z; 32];
    let taps = x.inv_taps(&zs, &x.backbone.null_prompt()).expect("taps");
    let cfg = HeadConfig::default();
    let neck = ConvNeck::new(agg.channels, &cfg, 0);
    let head = MlpHead::new(&cfg, 0);
    let etf = EtfPrototypes::new(10, cfg.d_cls, 0).expect("etf");
    let labels: Vec<usize> = (0..32).map(|i| i % 10).collect();
    c.bench_function("forward_backward_batch_32", |b| {
        b.iter(|| {
            let mut g = Graph::new();
            g.train(&agg.store);
            g.train(&neck.store);
            g.train(&head.store);
            let f = agg.forward(&mut g, &taps).expect("forward");
            let (v, _) = neck.forward(&mut g, f, difscil::heads::Mode::Train);
            let h = head.forward(&mut g, v);
            let l = dr_loss_graph(&mut g, h, &labels, &etf).expect("loss");
            black_box(g.backward(l))
        })
    });
}

criterion_group!(benches, extraction, aggregation, head_step);
criterion_main!(benches);
