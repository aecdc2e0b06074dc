use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::numerics::Tensor;

#[test]
fn same_seed_gives_identical_scene() {
    assert_eq!(generate_scene(7, 6, 64).unwrap(), generate_scene(7, 6, 64).unwrap());
    assert_ne!(generate_scene(7, 6, 64).unwrap().labels, generate_scene(8, 6, 64).unwrap().labels);
}

#[test]
fn two_classes_place_one_primitive_over_ground() {
    for seed in 0..20 {
        let s = generate_scene(seed, 2, 32).unwrap();
        assert!(s.labels.iter().all(|&l| l < 2));
        assert!(s.labels.contains(&0) && s.labels.contains(&1));
    }
}

#[test]
fn every_class_is_visible_and_primitives_are_flat() {
    for seed in 0..30 {
        let s = generate_scene(seed, 6, 64).unwrap();
        assert!(s.depth.iter().all(|&z| z > 0.0 && z <= 1.0));
        assert!(s.albedo.iter().all(|&a| (0.0..=1.0).contains(&a)));
        for class in 0..6u8 {
            let depths: Vec<f64> = s
                .labels
                .iter()
                .zip(&s.depth)
                .filter(|(&l, _)| l == class)
                .map(|(_, &z)| z)
                .collect();
            assert!(!depths.is_empty(), "class {class} missing for seed {seed}");
            if class > 0 {
                assert!(depths.iter().all(|&z| z == depths[0]));
            }
        }
    }
}

#[test]
fn ground_runs_from_near_bottom_to_far_top() {
    assert_eq!(ground_depth(0, 64), GROUND_FAR);
    assert_eq!(ground_depth(63, 64), GROUND_NEAR);
}

#[test]
fn primitives_follow_the_cell_grid() {
    let spec = SceneSpec {
        image_side: 32,
        cell_size: 4,
        ..Default::default()
    };
    let s = generate_scene_with(3, &spec).unwrap();
    for y in 0..32 {
        for x in 0..32 {
            let anchor = s.labels[(y / 4 * 4) * 32 + x / 4 * 4];
            assert_eq!(s.labels[y * 32 + x], anchor);
        }
    }
}

/// Palette index worn by each class in a texture-free scene.
fn worn_palettes(spec: &SceneSpec, seed: u64) -> Vec<usize> {
    let s = generate_scene_with(seed, spec).unwrap();
    (0..spec.num_classes)
        .map(|k| {
            let px = s.labels.iter().position(|&l| l as usize == k).unwrap();
            let rgb = &s.albedo[3 * px..3 * px + 3];
            (0..spec.num_classes)
                .find(|&p| class_color(p, spec.num_classes).iter().zip(rgb).all(|(a, b)| a == b))
                .unwrap()
        })
        .collect()
}

#[test]
fn palettes_are_distinct_per_scene_and_shuffled_across_scenes() {
    let spec = SceneSpec {
        image_side: 32,
        texture: 0.0,
        ..Default::default()
    };
    let mut assignments = std::collections::HashSet::new();
    for seed in 0..20 {
        let worn = worn_palettes(&spec, seed);
        assert_eq!(worn[0], 0);
        let mut sorted = worn.clone();
        sorted.sort();
        assert_eq!(sorted, (0..6).collect::<Vec<_>>());
        assignments.insert(worn);
    }
    assert!(assignments.len() > 10);

    let fixed = SceneSpec {
        shuffle_palettes: false,
        ..spec
    };
    for seed in 0..5 {
        assert_eq!(worn_palettes(&fixed, seed), (0..6).collect::<Vec<_>>());
    }
}

#[test]
fn crowded_grids_are_rejected() {
    let spec = SceneSpec {
        num_classes: 6,
        image_side: 4,
        cell_size: 2,
        ..Default::default()
    };
    assert!(generate_scene_with(0, &spec).is_err());
}

#[test]
fn identity_domain_is_bitwise_noop() {
    let s = generate_scene(11, 6, 32).unwrap();
    let d = apply_domain(&s, &DomainSpec::identity(), 99).unwrap();
    assert_eq!(d.visual.data(), &s.albedo[..]);
    assert_eq!(d.depth_input.data(), &s.depth[..]);
    assert_eq!(d.labels, s.labels);
}

fn flat_scene(albedo: f64, z: f64) -> Scene {
    Scene {
        image_side: 1,
        num_classes: 2,
        depth: vec![z],
        albedo: vec![albedo; 3],
        labels: vec![0],
        seed: 0,
    }
}

#[test]
fn mid_fog_matches_scalar_formula() {
    let spec = DomainSpec {
        fog_density: 2.0,
        fog_color: [1.0; 3],
        ..DomainSpec::identity()
    };
    let d = apply_domain(&flat_scene(0.8, 0.5), &spec, 0).unwrap();
    let e = (-1.0f64).exp();
    for &v in d.visual.data() {
        assert!((v - 0.9264).abs() < 1e-4);
        assert!((v - (0.8 * e + 1.0 - e)).abs() < 1e-15);
    }
}

#[test]
fn dense_fog_converges_to_fog_color() {
    let s = generate_scene(5, 6, 32).unwrap();
    let spec = DomainSpec {
        fog_density: 50.0,
        fog_color: [0.3, 0.6, 0.9],
        ..DomainSpec::identity()
    };
    let d = apply_domain(&s, &spec, 0).unwrap();
    for p in 0..32 * 32 {
        if s.depth[p] >= 0.2 {
            for ch in 0..3 {
                assert!((d.visual.data()[p * 3 + ch] - spec.fog_color[ch]).abs() < 1e-3);
            }
        }
    }
}

#[test]
fn depth_noise_is_bounded_and_labels_untouched() {
    let s = generate_scene(2, 6, 32).unwrap();
    let spec = DomainSpec {
        depth_noise: 0.01,
        visual_noise: 0.3,
        gain: 0.3,
        ..DomainSpec::identity()
    };
    let d = apply_domain(&s, &spec, 4).unwrap();
    assert_eq!(d.labels, s.labels);
    let worst = d
        .depth_input
        .data()
        .iter()
        .zip(&s.depth)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    assert!(worst > 0.0 && worst < 0.06, "{worst}");
    assert!(d.depth_input.data().iter().all(|&z| z >= MIN_DEPTH && z <= 1.0));
    assert!(d.visual.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
}

#[test]
fn blackout_noise_ignores_the_scene() {
    let a = generate_scene(1, 6, 32).unwrap();
    let b = generate_scene(2, 6, 32).unwrap();
    let spec = DomainSpec::blackout();
    let da = apply_domain(&a, &spec, 17).unwrap();
    let db = apply_domain(&b, &spec, 17).unwrap();
    assert_eq!(da.visual, db.visual);
    assert_ne!(da.labels, db.labels);
    let other = apply_domain(&a, &spec, 18).unwrap();
    assert_ne!(other.visual, da.visual);
    assert_eq!(other.labels, da.labels);
}

#[test]
fn presets_resolve_by_name() {
    for p in DomainSpec::presets() {
        assert_eq!(DomainSpec::preset(&p.name).unwrap(), p);
    }
    assert!(DomainSpec::preset("sandstorm").is_err());
    assert!(DomainSpec::identity().is_identity());
}

#[test]
fn perfect_and_inverted_predictions() {
    let truth = vec![vec![0u8, 1, 1, 0], vec![1, 1, 0, 0]];
    let r = evaluate_miou(&truth, &truth, 2).unwrap();
    assert_eq!(r.miou, 1.0);
    assert_eq!(r.pixel_accuracy, 1.0);
    let flipped: Vec<Vec<u8>> = truth.iter().map(|t| t.iter().map(|&v| 1 - v).collect()).collect();
    assert_eq!(evaluate_miou(&flipped, &truth, 2).unwrap().miou, 0.0);
}

#[test]
fn zero_union_classes_are_excluded_and_all_empty_is_rejected() {
    let r = evaluate_miou(&[vec![0u8, 0]], &[vec![0u8, 0]], 3).unwrap();
    assert_eq!(r.per_class_iou, vec![Some(1.0), None, None]);
    assert_eq!(r.miou, 1.0);
    assert!(evaluate_miou(&[vec![0u8, 0]], &[vec![255u8, 255]], 3).is_err());
}

#[test]
fn chance_is_the_best_constant_predictor() {
    assert_eq!(chance_miou(&[50, 30, 20]), Some(0.5 / 3.0));
    assert_eq!(chance_miou(&[0, 10, 0]), Some(1.0));
    assert_eq!(chance_miou(&[0, 0]), None);
    // Equals evaluating every constant prediction directly.
    let truth = vec![vec![0u8, 0, 0, 1, 1, 2, 2, 2, 2, 2]];
    let best = (0..3u8)
        .map(|c| evaluate_miou(&[vec![c; 10]], &truth, 3).unwrap().miou)
        .fold(0.0, f64::max);
    assert_eq!(evaluate_miou(&truth, &truth, 3).unwrap().chance_miou, best);
}

fn brute_force_miou(preds: &[Vec<u8>], truths: &[Vec<u8>], k: usize) -> f64 {
    let mut ious = Vec::new();
    for c in 0..k as u8 {
        let (mut inter, mut union) = (0usize, 0usize);
        for (p, t) in preds.iter().zip(truths) {
            for (&a, &b) in p.iter().zip(t) {
                if b == 255 {
                    continue;
                }
                inter += usize::from(a == c && b == c);
                union += usize::from(a == c || b == c);
            }
        }
        if union > 0 {
            ious.push(inter as f64 / union as f64);
        }
    }
    ious.iter().sum::<f64>() / ious.len() as f64
}

#[test]
fn matches_brute_force_counting_on_random_grids() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for _ in 0..100 {
        let p = vec![(0..64).map(|_| rng.gen_range(0..3u8)).collect::<Vec<_>>()];
        let t = vec![(0..64).map(|_| rng.gen_range(0..3u8)).collect::<Vec<_>>()];
        assert_eq!(evaluate_miou(&p, &t, 3).unwrap().miou, brute_force_miou(&p, &t, 3));
    }
}

#[test]
fn report_serializes_to_json_and_csv() {
    let t = vec![vec![0u8, 1, 2, 2]];
    let r = evaluate_miou(&t, &t, 4).unwrap();
    let back: EvalReport = serde_json::from_str(&r.to_json().unwrap()).unwrap();
    assert_eq!(back, r);
    let csv = r.to_csv();
    assert!(csv.starts_with("metric,class,value\n"));
    assert!(csv.contains("iou,3,\n"));
    assert!(csv.contains("miou,,1.000000"));
}

#[test]
fn pfm_stores_rows_bottom_up_and_round_trips() {
    let img = Tensor::new(&[2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let bytes = encode_pfm(&img, 2, 1).unwrap();
    let header = b"Pf\n2 2\n-1.0\n";
    assert_eq!(&bytes[..header.len()], header);
    assert_eq!(&bytes[header.len()..header.len() + 4], &3.0f32.to_le_bytes());
    assert_eq!(decode_pfm(&bytes, 2, 1).unwrap(), img);
    assert!(decode_pfm(&bytes, 2, 3).is_err());
    assert!(decode_pfm(&bytes[..bytes.len() - 1], 2, 1).is_err());
}

#[test]
fn pgm_round_trips() {
    let labels = vec![0, 5, 255, 2];
    let bytes = encode_pgm(&labels, 2).unwrap();
    assert!(bytes.starts_with(b"P5\n2 2\n255\n"));
    assert_eq!(decode_pgm(&bytes, 2).unwrap(), labels);
    assert!(decode_pgm(&bytes, 3).is_err());
}

#[test]
fn dataset_round_trip_and_determinism() {
    let spec = DatasetSpec {
        scene: SceneSpec {
            image_side: 16,
            ..Default::default()
        },
        num_samples: 3,
        domain: DomainSpec::noise(),
        ..Default::default()
    };
    let a = generate_samples(&spec).unwrap();
    assert_eq!(a, generate_samples(&spec).unwrap());
    let (d1, d2) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    write_dataset(d1.path(), &spec, &a).unwrap();
    write_dataset(d2.path(), &spec, &a).unwrap();
    for name in ["dataset.json", "samples/0002.visual.pfm", "samples/0001.labels.pgm"] {
        assert_eq!(
            std::fs::read(d1.path().join(name)).unwrap(),
            std::fs::read(d2.path().join(name)).unwrap()
        );
    }
    let (back_spec, back) = read_dataset(d1.path()).unwrap();
    assert_eq!(back_spec, spec);
    assert_eq!(back.len(), 3);
    for (x, y) in back.iter().zip(&a) {
        assert_eq!(x.labels, y.labels);
        assert!(x.visual.max_abs_diff(&y.visual) < 1e-6);
    }
}

fn relabel(maps: &[Vec<u8>], perm: &[u8]) -> Vec<Vec<u8>> {
    maps.iter().map(|m| m.iter().map(|&v| perm[v as usize]).collect()).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn evaluator_is_order_invariant_and_relabel_symmetric(
        seed in any::<u64>(),
        count in 1usize..5,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut grid = || (0..64).map(|_| rng.gen_range(0..4u8)).collect::<Vec<_>>();
        let preds: Vec<Vec<u8>> = (0..count).map(|_| grid()).collect();
        let truths: Vec<Vec<u8>> = (0..count).map(|_| grid()).collect();
        let base = evaluate_miou(&preds, &truths, 4).unwrap();
        let (mut rp, mut rt) = (preds.clone(), truths.clone());
        rp.reverse();
        rt.reverse();
        prop_assert_eq!(evaluate_miou(&rp, &rt, 4).unwrap().miou, base.miou);
        let perm = [2u8, 0, 3, 1];
        let relabeled = evaluate_miou(&relabel(&preds, &perm), &relabel(&truths, &perm), 4).unwrap();
        prop_assert!((relabeled.miou - base.miou).abs() < 1e-12);
    }
}
