use featrep::geometry::BBox;
use featrep::svm_bbox::{
    apply_bbox_regression, decode_box, encode_box, hinge_sum, load_bbox, load_svm, save_bbox, save_svm,
    select_box_pairs, svm_objective, svm_score, train_bbox_regressors, train_svm, BBoxRegressor, BoxPair, FeatureRow,
    SvmConfig, SvmModel,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Two square clusters far apart on the diagonal.
fn separable(seed: u64, weight: f64) -> Vec<FeatureRow> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..60)
        .map(|i| {
            let y: i8 = if i % 3 == 0 { 1 } else { -1 };
            let c = 100.0 * y as f32;
            let x = vec![c + rng.gen_range(-10.0..10.0), c + rng.gen_range(-10.0..10.0)];
            FeatureRow::new(x, y, weight).unwrap()
        })
        .collect()
}

#[test]
fn separable_toy_set() {
    let rows = separable(1, 1.0);
    let cfg = SvmConfig::default();
    let (model, report) = train_svm(&rows, &cfg).unwrap();
    let correct = rows.iter().filter(|r| svm_score(&model, &r.x).unwrap() * r.y as f64 > 0.0).count();
    assert_eq!(correct, rows.len());
    let hinge = hinge_sum(&model, &rows, &cfg).unwrap();
    println!("hinge {hinge:.2e} after {} epochs", report.epochs);
    assert!(hinge < 1e-6);
    for w in report.objectives.windows(2) {
        assert!(w[1] <= w[0], "objective rose: {} -> {}", w[0], w[1]);
    }
    let zero = SvmModel { w: vec![0.0; 2], b: 0.0, c: cfg.c };
    assert!(svm_objective(&model, &rows, &cfg).unwrap() <= svm_objective(&zero, &rows, &cfg).unwrap());
    assert!((report.final_objective() - svm_objective(&model, &rows, &cfg).unwrap()).abs() < 1e-9);

    // the closest point of each class sits on its margin
    let margin = |y: i8| {
        rows.iter().filter(|r| r.y == y).map(|r| y as f64 * svm_score(&model, &r.x).unwrap()).fold(f64::INFINITY, f64::min)
    };
    assert!((margin(1) - 1.0).abs() < 1e-2, "{}", margin(1));
    assert!((margin(-1) - 1.0).abs() < 1e-2, "{}", margin(-1));
}

#[test]
fn doubling_c_and_halving_costs_keeps_minimizer() {
    let base = SvmConfig::default();
    let (a, _) = train_svm(&separable(2, 1.0), &base).unwrap();
    let (b, _) = train_svm(&separable(2, 0.5), &SvmConfig { c: 2.0, ..base }).unwrap();
    for (x, y) in a.w.iter().zip(&b.w) {
        assert!((x - y).abs() <= 1e-9 * x.abs().max(1.0));
    }
    assert!((a.b - b.b).abs() <= 1e-9 * a.b.abs().max(1.0));
}

#[test]
fn svm_argument_errors() {
    let rows: Vec<FeatureRow> = separable(3, 1.0).into_iter().filter(|r| r.y > 0).collect();
    assert!(train_svm(&rows, &SvmConfig::default()).is_err());
    assert!(FeatureRow::new(vec![1.0], 0, 1.0).is_err());
    assert!(FeatureRow::new(vec![1.0], 1, 0.0).is_err());
    let m = SvmModel { w: vec![0.0; 3], b: 0.0, c: 1.0 };
    assert_eq!(svm_score(&m, &[1.0, 2.0, 3.0]).unwrap(), 0.0);
    assert!(svm_score(&m, &[1.0]).is_err());
    let m = SvmModel { w: vec![1.0, -1.0], b: 0.0, c: 1.0 };
    assert_eq!(svm_score(&m, &[0.7, 0.7]).unwrap(), 0.0);
}

#[test]
fn model_files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let (model, _) = train_svm(&separable(4, 1.0), &SvmConfig::default()).unwrap();
    save_svm(&dir.path().join("svm.frnc"), &model).unwrap();
    // the container stores 32-bit values
    let rounded = SvmModel { w: model.w.iter().map(|&v| v as f32 as f64).collect(), b: model.b as f32 as f64, c: model.c };
    assert_eq!(load_svm(&dir.path().join("svm.frnc"), model.c).unwrap(), rounded);

    let mut reg = BBoxRegressor::zero(5, 10.0);
    reg.w[1][3] = 0.25;
    reg.b[2] = -0.5;
    save_bbox(&dir.path().join("bbox.frnc"), &reg).unwrap();
    assert_eq!(load_bbox(&dir.path().join("bbox.frnc"), 10.0).unwrap(), reg);
}

fn random_box<R: Rng>(rng: &mut R) -> BBox {
    BBox::new(rng.gen_range(-50.0..200.0), rng.gen_range(-50.0..200.0), rng.gen_range(4.0..150.0), rng.gen_range(4.0..300.0))
}

fn max_box_diff(a: &BBox, b: &BBox) -> f64 {
    [a.x - b.x, a.y - b.y, a.w - b.w, a.h - b.h].iter().fold(0.0f64, |m, v| m.max(v.abs()))
}

#[test]
fn encode_decode_inverse() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let (p, g) = (random_box(&mut rng), random_box(&mut rng));
        worst = worst.max(max_box_diff(&decode_box(&p, &encode_box(&p, &g)), &g));
    }
    assert!(worst <= 1e-6, "{worst}");
    let p = BBox::scored(10.0, 20.0, 30.0, 60.0, 0.7);
    let doubled = decode_box(&p, &[0.0, 0.0, 2f64.ln(), 0.0]);
    assert!(max_box_diff(&doubled, &BBox::new(-5.0, 20.0, 60.0, 60.0)) < 1e-12);
    assert_eq!(doubled.score, Some(0.7));
    let same = apply_bbox_regression(&BBoxRegressor::zero(3, 1.0), &[1.0, 2.0, 3.0], &p).unwrap();
    assert!(max_box_diff(&same, &p) < 1e-12);
    assert_eq!(same.score, p.score);
}

fn random_features<R: Rng>(rng: &mut R, d: usize) -> Vec<f32> {
    (0..d).map(|_| rng.gen_range(0.0..1.0)).collect()
}

#[test]
fn identity_pairs_predict_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let pairs: Vec<BoxPair> = (0..40)
        .map(|_| {
            let p = random_box(&mut rng);
            BoxPair { features: random_features(&mut rng, 20), proposal: p, truth: p }
        })
        .collect();
    let reg = train_bbox_regressors(&pairs, 1000.0).unwrap();
    for pair in &pairs {
        let t = reg.predict(&pair.features).unwrap();
        assert!(t.iter().map(|v| v * v).sum::<f64>().sqrt() <= 1e-3);
    }
}

#[test]
fn single_pair_is_interpolated() {
    let p = BBox::new(10.0, 10.0, 40.0, 80.0);
    let g = BBox::new(14.0, 6.0, 44.0, 76.0);
    let pair = BoxPair { features: vec![0.3, 0.9, 0.1], proposal: p, truth: g };
    let reg = train_bbox_regressors(std::slice::from_ref(&pair), 1e-9).unwrap();
    let t = reg.predict(&pair.features).unwrap();
    let want = encode_box(&p, &g);
    for k in 0..4 {
        assert!((t[k] - want[k]).abs() < 1e-9);
    }
    assert!(max_box_diff(&apply_bbox_regression(&reg, &pair.features, &p).unwrap(), &g) < 1e-6);
}

fn shifted_pairs(seed: u64, n: usize) -> Vec<BoxPair> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let p = random_box(&mut rng);
            let g = BBox::new(p.x + 0.1 * p.w, p.y, p.w, p.h);
            BoxPair { features: random_features(&mut rng, 30), proposal: p, truth: g }
        })
        .collect()
}

#[test]
fn constant_shift_is_learned() {
    let reg = train_bbox_regressors(&shifted_pairs(7, 200), 1000.0).unwrap();
    for pair in shifted_pairs(8, 50) {
        let t = reg.predict(&pair.features).unwrap();
        assert!((t[0] - 0.1).abs() < 1e-6, "{t:?}");
        assert!(t[1..].iter().all(|v| v.abs() < 1e-6));
    }
}

#[test]
fn regression_errors() {
    assert!(train_bbox_regressors(&[], 1.0).is_err());
    let mut reg = BBoxRegressor::zero(2, 1.0);
    reg.b[2] = 1000.0;
    assert!(apply_bbox_regression(&reg, &[0.0, 0.0], &BBox::new(0.0, 0.0, 10.0, 20.0)).is_err());
    assert!(reg.predict(&[0.0]).is_err());
}

#[test]
fn pair_selection_filters() {
    let g = BBox::new(0.0, 0.0, 40.0, 80.0);
    let dets = vec![
        (vec![1.0], g.translated(2.0, 0.0).with_score(0.9)),
        (vec![2.0], g.translated(2.0, 0.0).with_score(0.2)),
        (vec![3.0], g.translated(30.0, 0.0).with_score(0.9)),
    ];
    let pairs = select_box_pairs(&dets, &[g], 0.5, 0.6);
    assert_eq!(pairs.len(), 1);
    assert_eq!(pairs[0].features, vec![1.0]);
    assert_eq!(pairs[0].truth, g);
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 128, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn margins_survive_feature_rescaling(seed in any::<u64>(), a in 0.01f64..100.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let m = SvmModel { w: w.clone(), b: rng.gen_range(-1.0..1.0), c: 1.0 };
        let scaled = SvmModel { w: w.iter().map(|v| v / a).collect(), ..m.clone() };
        let x: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        // dot products computed in f64 on f32-representable inputs
        let x32: Vec<f32> = x.iter().map(|&v| v as f32).collect();
        let xa: Vec<f32> = x32.iter().map(|&v| (v as f64 * a) as f32).collect();
        let direct = svm_score(&m, &x32).unwrap();
        let rescaled = svm_score(&scaled, &xa).unwrap();
        prop_assert!((direct - rescaled).abs() < 1e-5 * (1.0 + direct.abs()));
    }

    #[test]
    fn encode_decode_round_trip(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (p, g) = (random_box(&mut rng), random_box(&mut rng));
        prop_assert!(max_box_diff(&decode_box(&p, &encode_box(&p, &g)), &g) <= 1e-6);
    }
}
