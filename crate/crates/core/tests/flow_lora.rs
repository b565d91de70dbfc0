mod common;

use ndarray::Array2;
use proptest::prelude::*;
use rand::Rng;
use structgen_core::backbone::BackboneConfig;
use structgen_core::flow::{
    draw_prior, fm_loss, fm_loss_grad, sample_ode, sample_path, target_velocity, SamplerConfig,
};
use structgen_core::lora::{apply_site, init_adapter_set, AdapterSet, LoraPair, Projection, Stage};
use structgen_core::{rng, ImageGrid};

fn dense(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
    let mut r = rng::seeded(seed);
    Array2::from_shape_fn((rows, cols), |_| r.random_range(-1.0..1.0))
}

#[test]
fn lora_site_matches_dense_update() {
    for seed in 0..8u64 {
        let (n, d_in, d_out, rank) = (5, 12, 20, 1 + seed as usize % 4);
        let x = dense(n, d_in, seed);
        let w = dense(d_in, d_out, seed + 10);
        let pair = LoraPair {
            a: dense(d_in, rank, seed + 20),
            b: dense(rank, d_out, seed + 30),
            alpha: 3.0,
        };
        let fast = apply_site(x.view(), x.dot(&w).view(), &pair).unwrap();
        let xm = common::to_mat(&x);
        let merged = common::to_mat(&(&w + &pair.dense_delta()));
        let slow = common::matmul(&xm, &merged);
        let err = slow
            .iter()
            .flatten()
            .zip(fast.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(err < 1e-10, "max error {err:e}");
    }
}

#[test]
fn adapter_covers_every_projection_of_every_block() {
    let cfg = BackboneConfig::default();
    let a = init_adapter_set(&cfg, 16, Stage::Stage1, 0).unwrap();
    assert_eq!(a.num_sites(), cfg.depth * Projection::ALL.len());
    for (site, pair) in a.sites() {
        let (d_in, d_out) = site.projection.dims(cfg.width);
        assert_eq!((pair.a.dim(), pair.b.dim()), ((d_in, 16), (16, d_out)));
        assert!(pair.b.iter().all(|&v| v == 0.0));
    }
}

#[test]
fn adapter_blob_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = BackboneConfig::default();
    let mut a = init_adapter_set(&cfg, 4, Stage::Stage2, 9).unwrap();
    let flat: Vec<f64> = (0..a.parameter_count()).map(|i| (i as f64 * 0.37).sin()).collect();
    a.set_trainable_parameters(&flat).unwrap();
    let path = dir.path().join("adapter.bin");
    a.save(&path).unwrap();
    let b = AdapterSet::load(&path).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.checksum(), b.checksum());
}

#[test]
fn fm_loss_trivial_cases_are_exact() {
    let x0 = ImageGrid::filled(4, 4, 3, 0.25);
    let x1 = ImageGrid::filled(4, 4, 3, 0.75);
    let exact = target_velocity(&x0, &x1).unwrap();
    assert_eq!(fm_loss(&exact, &x0, &x1).unwrap(), 0.0);
    let off = ImageGrid::from_array(exact.values() + 0.1);
    assert!((fm_loss(&off, &x0, &x1).unwrap() - 0.01).abs() < 1e-12);
}

#[test]
fn constant_field_euler_recovers_endpoint() {
    let shape = (8, 8, 3);
    let x1 = common::random_image(8, 8, 5);
    for steps in [1usize, 2, 7, 32, 100] {
        let cfg = SamplerConfig {
            steps,
            seed: 3,
            ..SamplerConfig::default()
        };
        let x0 = draw_prior(shape, cfg.seed);
        let v = target_velocity(&x0, &x1).unwrap();
        let out = sample_ode(|_, _| Ok(v.clone()), shape, &cfg).unwrap();
        let err = (out.values() - x1.values()).iter().fold(0.0f64, |m, e| m.max(e.abs()));
        assert!(err < 1e-10, "{steps} steps: error {err:e}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn path_endpoints_are_exact(seed in any::<u64>()) {
        let a = common::random_image(4, 4, seed);
        let b = common::random_image(4, 4, seed ^ 1);
        prop_assert_eq!(sample_path(&a, &b, 0.0).unwrap(), a.clone());
        prop_assert_eq!(sample_path(&a, &b, 1.0).unwrap(), b);
    }

    #[test]
    fn path_is_linear_in_t(seed in any::<u64>(), t in 0.0f64..1.0) {
        let a = common::random_image(4, 4, seed);
        let b = common::random_image(4, 4, seed ^ 2);
        let xt = sample_path(&a, &b, t).unwrap();
        for ((x, p), q) in xt.as_slice().iter().zip(a.as_slice()).zip(b.as_slice()) {
            prop_assert!((x - ((1.0 - t) * p + t * q)).abs() < 1e-12);
        }
    }

    #[test]
    fn loss_gradient_matches_finite_difference(seed in any::<u64>(), idx in 0usize..48) {
        let v = common::random_image(4, 4, seed);
        let x0 = common::random_image(4, 4, seed ^ 3);
        let x1 = common::random_image(4, 4, seed ^ 4);
        let (_, g) = fm_loss_grad(&v, &x0, &x1).unwrap();
        let h = 1e-6;
        let bump = |d: f64| {
            let mut p = v.clone();
            p.values_mut().as_slice_mut().unwrap()[idx] += d;
            fm_loss(&p, &x0, &x1).unwrap()
        };
        let fd = (bump(h) - bump(-h)) / (2.0 * h);
        prop_assert!((fd - g.as_slice()[idx]).abs() < 1e-7);
    }

    #[test]
    fn prior_is_reproducible(seed in any::<u64>()) {
        prop_assert_eq!(draw_prior((4, 4, 3), seed), draw_prior((4, 4, 3), seed));
    }
}
