use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use structgen_core::backbone::{backward, forward, forward_with_cache, init_backbone, BackboneConfig};
use structgen_core::flow::{draw_prior, fm_loss_grad, sample_path};
use structgen_core::lora::{init_adapter_set, Stage};
use structgen_core::structure::{canny, remap_edges, CannyParams};

fn bench_backbone(c: &mut Criterion) {
    let cfg = BackboneConfig::default();
    let side = cfg.image_size;
    let weights = init_backbone(&cfg, 0).unwrap();
    let adapter = init_adapter_set(&cfg, 16, Stage::Stage2, 0).unwrap();
    let src = draw_prior((side, side, 3), 1).clamped();
    let edges = remap_edges(&canny(&src, &CannyParams::default()).unwrap());
    let conds = vec![
        weights.encode_image(&src).unwrap(),
        weights.encode_text(&[1, 2, 3, 4]).unwrap(),
        weights.encode_canny(&edges).unwrap(),
    ];
    let x0 = draw_prior((side, side, 3), 2);
    let x1 = draw_prior((side, side, 3), 3).clamped();
    let xt = sample_path(&x0, &x1, 0.4).unwrap();

    let mut group = c.benchmark_group("backbone default config");
    group.sample_size(10);
    group.bench_function("forward", |b| {
        b.iter(|| forward(&weights, black_box(&xt), 0.4, &conds, Some(&adapter)).unwrap())
    });
    group.bench_function("forward + backward", |b| {
        b.iter(|| {
            let (v, cache) = forward_with_cache(&weights, black_box(&xt), 0.4, &conds, Some(&adapter)).unwrap();
            let (_, dv) = fm_loss_grad(&v, &x0, &x1).unwrap();
            let mut grads = adapter.zeros_like();
            backward(&weights, &cache, &dv, Some(&adapter), Some(&mut grads)).unwrap();
            grads
        })
    });
    group.finish();
}

criterion_group!(benches, bench_backbone);
criterion_main!(benches);
