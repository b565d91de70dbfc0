mod common;

use ndarray::Array2;
use proptest::prelude::*;
use structgen_core::datagen::dataset::sample_spec;
use structgen_core::datagen::{render_scene, GlyphAlphabet, SourceDataset};
use structgen_core::rng;
use structgen_core::structure::{canny, remap, remap_edges, unremap, CannyParams};
use structgen_core::ImageGrid;

fn as_rows(edges: &Array2<bool>) -> Vec<Vec<bool>> {
    edges.rows().into_iter().map(|r| r.to_vec()).collect()
}

fn scene(seed: u64) -> ImageGrid {
    let alphabet = GlyphAlphabet::standard();
    let mut r = rng::seeded(seed);
    let kind = if seed.is_multiple_of(2) {
        SourceDataset::Texting
    } else {
        SourceDataset::Generic
    };
    let spec = sample_spec(&mut r, kind, 64, &alphabet);
    render_scene(&spec, 64, &alphabet).unwrap()
}

#[test]
fn canny_matches_naive_reference_on_noise_and_scenes() {
    let p = CannyParams::default();
    for seed in 0..20u64 {
        let img = if seed < 10 {
            common::random_image(64, 64, seed)
        } else {
            scene(seed)
        };
        let fast = as_rows(&canny(&img, &p).unwrap());
        let slow = common::naive_canny(&img, p.sigma, p.low, p.high);
        let diff = fast
            .iter()
            .flatten()
            .zip(slow.iter().flatten())
            .filter(|(a, b)| a != b)
            .count();
        assert_eq!(diff, 0, "image {seed}: {diff} pixels differ");
        assert!(fast.iter().flatten().any(|&e| e), "image {seed} has no edges");
    }
}

#[test]
fn canny_matches_reference_at_other_parameters() {
    let p = CannyParams {
        sigma: 1.6,
        low: 0.05,
        high: 0.3,
    };
    for seed in 100..104u64 {
        let img = scene(seed);
        assert_eq!(
            as_rows(&canny(&img, &p).unwrap()),
            common::naive_canny(&img, p.sigma, p.low, p.high)
        );
    }
}

fn square(lo: usize, hi: usize) -> ImageGrid {
    ImageGrid::from_fn(64, 64, 3, |(y, x, _)| {
        if (lo..hi).contains(&y) && (lo..hi).contains(&x) {
            1.0
        } else {
            0.0
        }
    })
}

#[test]
fn square_edges_hug_its_boundary() {
    let (lo, hi) = (16usize, 48usize);
    let edges = canny(&square(lo, hi), &CannyParams::default()).unwrap();
    let dist = |y: usize, x: usize| {
        let inside = (lo..hi).contains(&y) && (lo..hi).contains(&x);
        let dy = (y as i64 - lo as i64).abs().min((y as i64 - hi as i64 + 1).abs());
        let dx = (x as i64 - lo as i64).abs().min((x as i64 - hi as i64 + 1).abs());
        if inside {
            dy.min(dx)
        } else {
            let oy = if y < lo {
                lo - y
            } else if y >= hi {
                y - hi + 1
            } else {
                0
            };
            let ox = if x < lo {
                lo - x
            } else if x >= hi {
                x - hi + 1
            } else {
                0
            };
            oy.max(ox) as i64
        }
    };
    let mut count = 0;
    for ((y, x), &e) in edges.indexed_iter() {
        if e {
            count += 1;
            assert!(dist(y, x) <= 1, "edge pixel ({y}, {x}) is far from the boundary");
        }
    }
    // every side of the square is traced
    assert!(count >= 4 * (hi - lo - 4));
    for k in lo + 2..hi - 2 {
        assert!((lo - 1..=lo).any(|y| edges[[y, k]]), "top side gap at column {k}");
        assert!((hi - 1..=hi).any(|y| edges[[y, k]]), "bottom side gap at column {k}");
        assert!((lo - 1..=lo).any(|x| edges[[k, x]]), "left side gap at row {k}");
        assert!((hi - 1..=hi).any(|x| edges[[k, x]]), "right side gap at row {k}");
    }
}

#[test]
fn uniform_image_has_no_edges() {
    let img = ImageGrid::filled(32, 32, 3, 0.4);
    assert!(!canny(&img, &CannyParams::default()).unwrap().iter().any(|&e| e));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn brightness_scale_does_not_change_edges(seed in 0u64..1000, scale in 0.05f64..1.0) {
        let img = scene(seed);
        let p = CannyParams::default();
        prop_assert_eq!(canny(&img, &p).unwrap(), canny(&img.scaled(scale), &p).unwrap());
    }

    #[test]
    fn remap_round_trips(seed in any::<u64>(), h in 1usize..24, w in 1usize..24) {
        use rand::Rng;
        let mut r = rng::seeded(seed);
        let binary = Array2::from_shape_fn((h, w), |_| if r.random::<bool>() { 1.0 } else { 0.0 });
        let map = remap(&binary).unwrap();
        prop_assert!(map.values().as_slice().iter().all(|&v| v == 0.2 || v == 0.8));
        prop_assert_eq!(unremap(&map), binary);
    }

    #[test]
    fn remap_edges_is_three_identical_channels(seed in any::<u64>()) {
        use rand::Rng;
        let mut r = rng::seeded(seed);
        let edges = Array2::from_shape_fn((9, 11), |_| r.random::<bool>());
        let map = remap_edges(&edges);
        for ((y, x), &e) in edges.indexed_iter() {
            for c in 0..3 {
                prop_assert_eq!(map.values().get(y, x, c), if e { 0.8 } else { 0.2 });
            }
        }
    }
}
