use gcm_core::descriptor::builtin_pyramid;
use gcm_core::eval::{
    corner_error, discover_dataset, evaluate_pair, homography_accuracy, mma, procedural_texture, random_corner_homography,
    synthetic_pair, EvalReport, PairResult, SyntheticMode,
};
use gcm_core::geometry::{traceback_matches, write_homography, Homography, PointPair};
use gcm_core::pipeline::{refine_only, warp_into_frame_of_a, PipelineConfig};
use gcm_core::Image;
use nalgebra::{Matrix3, Point2, Vector3};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn apply(m: &Matrix3<f64>, x: f64, y: f64) -> (f64, f64) {
    let v = m * Vector3::new(x, y, 1.0);
    (v.x / v.z, v.y / v.z)
}

fn corners(h: usize, w: usize) -> [(f64, f64); 4] {
    let (h, w) = (h as f64 - 1.0, w as f64 - 1.0);
    [(0.0, 0.0), (w, 0.0), (0.0, h), (w, h)]
}

fn near_identity() -> impl Strategy<Value = Matrix3<f64>> {
    prop::array::uniform8(-1.0f64..1.0).prop_map(|e| {
        Matrix3::new(
            1.0 + 0.05 * e[0],
            0.05 * e[1],
            10.0 * e[2],
            0.05 * e[3],
            1.0 + 0.05 * e[4],
            10.0 * e[5],
            2e-4 * e[6],
            2e-4 * e[7],
            1.0,
        )
    })
}

fn pair_result(mma: Vec<f64>, correct: Vec<bool>, matches: usize) -> PairResult {
    PairResult {
        name: String::new(),
        homography_correct: correct,
        corner_error: None,
        matches,
        pre_ratio_matches: matches,
        fallback: false,
        error: None,
        mma,
    }
}

#[test]
fn small_vp_corner_displacement_is_bounded() {
    let base = Image::from_fn(64, 96, |r, c| ((r * 7 + c * 3) % 11) as f32 / 10.0).unwrap();
    for seed in 0..1000u64 {
        let pair = synthetic_pair(&base, SyntheticMode::SmallViewpoint, seed).unwrap();
        let m = pair.gt.matrix();
        for (x, y) in corners(64, 96) {
            let (u, v) = apply(m, x, y);
            let d = ((u - x).powi(2) + (v - y).powi(2)).sqrt();
            assert!(d <= 0.05 * 64.0 + 1e-9, "seed {seed}: corner moved {d}");
        }
    }
}

#[test]
fn large_vp_corner_displacement_is_bounded() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut largest: f64 = 0.0;
    for _ in 0..500 {
        let h = random_corner_homography((200, 120), 0.15, &mut rng).unwrap();
        for (x, y) in corners(200, 120) {
            let (u, v) = apply(h.matrix(), x, y);
            largest = largest.max(((u - x).powi(2) + (v - y).powi(2)).sqrt());
        }
    }
    assert!(largest <= 0.15 * 120.0 + 1e-9);
    assert!(largest > 0.10 * 120.0, "jitter never approaches the bound: {largest}");
}

#[test]
fn identity_pair_scores_perfectly() {
    let img = procedural_texture(96, 96, 12);
    let r = evaluate_pair("self", &img, &img, &Homography::identity(), &PipelineConfig::default(), &[1.0, 3.0, 5.0]).unwrap();
    assert_eq!(r.mma, vec![1.0, 1.0, 1.0]);
    assert_eq!(r.homography_correct, vec![true, true, true]);
    assert!(r.matches > 0 && r.error.is_none());
}

#[test]
fn refinement_with_true_homography_traces_back_exactly() {
    let img = procedural_texture(128, 128, 21);
    let cfg = PipelineConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for _ in 0..3 {
        let h = random_corner_homography((128, 128), 0.05, &mut rng).unwrap();
        let b = gcm_core::geometry::warp_image(&img, &h, (128, 128)).unwrap();
        let c = warp_into_frame_of_a(&b, &h, (128, 128)).unwrap();
        let pa = builtin_pyramid(&img, &cfg.descriptor).unwrap();
        let pc = builtin_pyramid(&c, &cfg.descriptor).unwrap();
        let matches = refine_only(&pa, &pc, &cfg.fhr).unwrap();
        let pairs = traceback_matches(&matches, &h, (128, 128));
        assert!(pairs.len() >= 50);
        let good = pairs
            .iter()
            .filter(|p| {
                let (u, v) = apply(h.matrix(), p.a.x, p.a.y);
                ((u - p.b.x).powi(2) + (v - p.b.y).powi(2)).sqrt() <= 1.0
            })
            .count();
        assert!(good * 10 >= pairs.len() * 9, "{good} of {}", pairs.len());
    }
}

#[test]
fn hpatches_layout_is_discovered() {
    let dir = tempfile::tempdir().unwrap();
    let img = procedural_texture(64, 64, 1);
    for scene in ["v_boat", "i_ajuntament"] {
        let sd = dir.path().join(scene);
        std::fs::create_dir(&sd).unwrap();
        for i in 1..=6 {
            gcm_core::feature_io::save_image(sd.join(format!("{i}.ppm")), &img).unwrap();
            if i > 1 {
                write_homography(sd.join(format!("H_1_{i}")), &Homography::identity()).unwrap();
            }
        }
    }
    std::fs::create_dir(dir.path().join("notes")).unwrap();
    let pairs = discover_dataset(dir.path()).unwrap();
    let names: Vec<&str> = pairs.iter().map(|p| p.name.as_str()).collect();
    assert_eq!(names.len(), 10);
    assert_eq!(names[0], "i_ajuntament/1-2");
    assert_eq!(names[9], "v_boat/1-6");
    assert_eq!(pairs[0].split(), Some("illumination"));
    assert_eq!(pairs[9].split(), Some("viewpoint"));
    assert!(pairs[9].homography.ends_with("v_boat/H_1_6"));
}

#[test]
fn report_splits_follow_scene_prefix() {
    let mut a = pair_result(vec![1.0], vec![true], 10);
    a.name = "i_x/1-2".into();
    let mut b = pair_result(vec![0.0], vec![false], 30);
    b.name = "v_y/1-2".into();
    let report = EvalReport::from_pairs(vec![1.0], vec![a, b], |n| match n.as_bytes()[0] {
        b'i' => Some("i"),
        b'v' => Some("v"),
        _ => None,
    });
    assert_eq!(report.mma, vec![0.5]);
    assert_eq!(report.match_count_mean, 20.0);
    let text = report.to_text();
    assert!(text.contains("mma_i@1px=1.000000"), "{text}");
    assert!(text.contains("mma_v@1px=0.000000"), "{text}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn corner_error_matches_direct_projection(e in near_identity(), g in near_identity(), h in 16usize..400, w in 16usize..400) {
        let est = Homography::new(e).unwrap();
        let gt = Homography::new(g).unwrap();
        let oracle = corners(h, w)
            .iter()
            .map(|&(x, y)| {
                let (a, b) = apply(&e, x, y);
                let (c, d) = apply(&g, x, y);
                ((a - c).powi(2) + (b - d).powi(2)).sqrt()
            })
            .sum::<f64>() / 4.0;
        let got = corner_error(&est, &gt, (h, w));
        prop_assert!((got - oracle).abs() < 1e-6 * (1.0 + oracle), "{got} vs {oracle}");
        let ts = [oracle * 0.5, oracle * 1.5 + 1e-3, 1.0, 3.0, 5.0];
        let flags = homography_accuracy(&est, &gt, (h, w), &ts);
        for (t, f) in ts.iter().zip(flags) {
            if (oracle - t).abs() > 1e-6 {
                prop_assert_eq!(f, oracle < *t);
            }
        }
    }

    #[test]
    fn homography_accuracy_ignores_matrix_scale(e in near_identity(), g in near_identity(), k in 0.01f64..100.0, neg in any::<bool>()) {
        let k = if neg { -k } else { k };
        let ts = [0.5, 1.0, 3.0, 5.0, 20.0];
        let base = homography_accuracy(&Homography::new(e).unwrap(), &Homography::new(g).unwrap(), (240, 320), &ts);
        let scaled = homography_accuracy(&Homography::new(e * k).unwrap(), &Homography::new(g * (1.0 / k)).unwrap(), (240, 320), &ts);
        prop_assert_eq!(base, scaled);
    }

    #[test]
    fn mma_is_monotone_in_threshold(
        g in near_identity(),
        pts in prop::collection::vec((0.0f64..200.0, 0.0f64..200.0, -6.0f64..6.0, -6.0f64..6.0), 1..60),
        mut ts in prop::collection::vec(0.01f64..10.0, 1..8),
    ) {
        ts.sort_by(f64::total_cmp);
        let gt = Homography::new(g).unwrap();
        let pairs: Vec<PointPair> = pts
            .iter()
            .map(|&(x, y, dx, dy)| {
                let (u, v) = apply(&g, x, y);
                PointPair { a: Point2::new(x, y), b: Point2::new(u + dx, v + dy), distance: 0.0 }
            })
            .collect();
        let r = mma(&pairs, &gt, &ts);
        prop_assert!(!r.empty);
        for w in r.accuracy.windows(2) {
            prop_assert!(w[0] <= w[1]);
        }
        for (t, acc) in ts.iter().zip(&r.accuracy) {
            let oracle = pts.iter().filter(|p| (p.2 * p.2 + p.3 * p.3).sqrt() < *t).count() as f64 / pts.len() as f64;
            prop_assert!((acc - oracle).abs() < 1e-9 || pts.iter().any(|p| ((p.2 * p.2 + p.3 * p.3).sqrt() - t).abs() < 1e-6));
        }
    }

    #[test]
    fn report_is_the_mean_of_pairs(rows in prop::collection::vec((prop::array::uniform3(0.0f64..1.0), prop::array::uniform3(any::<bool>()), 0usize..5000), 1..30)) {
        let pairs: Vec<PairResult> = rows.iter().map(|(m, c, n)| pair_result(m.to_vec(), c.to_vec(), *n)).collect();
        let report = EvalReport::from_pairs(vec![1.0, 3.0, 5.0], pairs, |_| None);
        let n = rows.len() as f64;
        for i in 0..3 {
            let mma_mean = rows.iter().map(|r| r.0[i]).sum::<f64>() / n;
            let acc_mean = rows.iter().filter(|r| r.1[i]).count() as f64 / n;
            prop_assert!((report.mma[i] - mma_mean).abs() < 1e-9);
            prop_assert!((report.homography_accuracy[i] - acc_mean).abs() < 1e-9);
        }
        let count_mean = rows.iter().map(|r| r.2 as f64).sum::<f64>() / n;
        prop_assert!((report.match_count_mean - count_mean).abs() < 1e-9);
        prop_assert!(report.splits.is_empty());
    }
}
