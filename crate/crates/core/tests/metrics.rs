mod common;

use common::oracles::*;
use gcdlab::image::LabeledMask;
use gcdlab::metrics::*;
use gcdlab::rng;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::Rng as _;

#[test]
fn fid_matches_jacobi_reference_on_random_4d() {
    let mut r = rng::rng(1);
    for _ in 0..50 {
        let (m1, c1) = random_gaussian(&mut r, 4);
        let (m2, c2) = random_gaussian(&mut r, 4);
        let (a, b) = (as_na(&m1, &c1, 4), as_na(&m2, &c2, 4));
        let got = fid(&a.0, &a.1, &b.0, &b.1).unwrap();
        let want = fid_oracle(&m1, &c1, &m2, &c2, 4);
        assert!((got - want).abs() < 1e-6, "{got} vs {want}");
        let back = fid(&b.0, &b.1, &a.0, &a.1).unwrap();
        assert!((got - back).abs() < 1e-8);
        assert!(fid(&a.0, &a.1, &a.0, &a.1).unwrap().abs() < 1e-8);
        assert!(got >= 0.0);
    }
}

#[test]
fn fid_rejects_indefinite_covariance() {
    let mu = DVector::from_element(2, 0.0);
    let bad = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -0.5]);
    let ok = DMatrix::identity(2, 2);
    assert!(fid(&mu, &bad, &mu, &ok).is_err());
    assert!(fid(&mu, &ok, &DVector::from_element(3, 0.0), &ok).is_err());
}

#[test]
fn stats_edge_cases() {
    let same = FeatureSet::from_rows(&vec![vec![1.0, -2.0, 3.0]; 5], FeatureSource::Real).unwrap();
    let (_, c) = gaussian_stats(&same).unwrap();
    assert!(c.iter().all(|&v| v == 0.0));
    let one = FeatureSet::from_rows(&[vec![1.0]], FeatureSource::Real).unwrap();
    assert!(gaussian_stats(&one).is_err());

    let mut r = rng::rng(2);
    let rows: Vec<Vec<f64>> = (0..10).map(|_| (0..3).map(|_| r.random_range(-1.0..1.0)).collect()).collect();
    let shifted: Vec<Vec<f64>> = rows.iter().map(|x| x.iter().map(|v| v + 5.0).collect()).collect();
    let (m0, c0) = gaussian_stats(&FeatureSet::from_rows(&rows, FeatureSource::Real).unwrap()).unwrap();
    let (m1, c1) = gaussian_stats(&FeatureSet::from_rows(&shifted, FeatureSource::Real).unwrap()).unwrap();
    assert!((m1 - m0.add_scalar(5.0)).amax() < 1e-12);
    assert!((c1 - c0).amax() < 1e-12);
}

#[test]
fn precision_recall_match_brute_force() {
    let mut r = rng::rng(3);
    for trial in 0..20 {
        let real = cloud(&mut r, 50, 2, 0.0);
        let gen = cloud(&mut r, 50, 2, 0.05 * trial as f64);
        let got = improved_precision_recall(
            &FeatureSet::from_rows(&real, FeatureSource::Real).unwrap(),
            &FeatureSet::from_rows(&gen, FeatureSource::Generated).unwrap(),
            3,
        )
        .unwrap();
        assert_eq!(got, brute_pr(&real, &gen, 3));
    }
}

#[test]
fn precision_recall_extremes() {
    let mut r = rng::rng(4);
    let a = cloud(&mut r, 20, 3, 0.0);
    let fa = FeatureSet::from_rows(&a, FeatureSource::Real).unwrap();
    assert_eq!(improved_precision_recall(&fa, &fa, 3).unwrap(), (1.0, 1.0));
    let far = FeatureSet::from_rows(&cloud(&mut r, 20, 3, 1e6 * 2.0), FeatureSource::Generated).unwrap();
    assert_eq!(improved_precision_recall(&fa, &far, 3).unwrap(), (0.0, 0.0));
    let tiny = FeatureSet::from_rows(&a[..3], FeatureSource::Real).unwrap();
    assert!(improved_precision_recall(&tiny, &fa, 3).is_err());
    let dup = FeatureSet::from_rows(&vec![vec![0.5; 3]; 6], FeatureSource::Real).unwrap();
    assert_eq!(improved_precision_recall(&dup, &dup, 3).unwrap(), (1.0, 1.0));
}

proptest! {
    #[test]
    fn duplicating_a_real_point_never_lowers_precision(seed in any::<u64>(), pick in 0usize..30) {
        let mut r = rng::rng(seed);
        let real = cloud(&mut r, 30, 2, 0.0);
        let gen = cloud(&mut r, 30, 2, 0.3);
        let fr = FeatureSet::from_rows(&real, FeatureSource::Real).unwrap();
        let (p0, _) = improved_precision_recall(&fr, &FeatureSet::from_rows(&gen, FeatureSource::Generated).unwrap(), 3).unwrap();
        let mut more = gen.clone();
        more.push(real[pick].clone());
        let (p1, _) = improved_precision_recall(&fr, &FeatureSet::from_rows(&more, FeatureSource::Generated).unwrap(), 3).unwrap();
        prop_assert!(p1 >= p0);
    }
}

#[test]
fn aji_hand_cases() {
    // two 4-px GT objects; each prediction covers 3 of them plus 1 outside px
    #[rustfmt::skip]
    let gt = inst(&[
        1, 1, 0, 2, 2,
        1, 1, 0, 2, 2,
        0, 0, 0, 0, 0,
    ], &[(1, 1), (2, 1)], 5);
    #[rustfmt::skip]
    let pred = inst(&[
        1, 1, 0, 2, 2,
        1, 0, 0, 2, 0,
        1, 0, 0, 0, 2,
    ], &[(1, 1), (2, 1)], 5);
    assert!((aji(&pred, &gt).unwrap() - 60.0).abs() < 1e-12);
    assert_eq!(aji(&gt, &gt).unwrap(), 100.0);
    let five = inst(&[1, 1, 1, 1, 1, 0], &[(1, 2)], 6);
    let none = LabeledMask::empty(1, 6);
    assert_eq!(aji(&none, &five).unwrap(), 0.0);
    assert!(aji(&none, &LabeledMask::empty(2, 3)).is_err());
    assert!(dice(&none, &LabeledMask::empty(2, 3)).is_err());
}

#[test]
fn dice_disjoint_is_zero() {
    let a = LabeledMask::from_semantic(1, 4, &[1, 1, 0, 0]).unwrap();
    let b = LabeledMask::from_semantic(1, 4, &[0, 0, 1, 1]).unwrap();
    assert_eq!(dice(&a, &b).unwrap(), 0.0);
}

#[test]
fn aji_and_dice_match_oracles_on_random_masks() {
    let mut r = rng::rng(5);
    for _ in 0..300 {
        let (a, b) = (random_mask(&mut r, 10, 10), random_mask(&mut r, 10, 10));
        let v = aji(&a, &b).unwrap();
        assert_eq!(v, brute_aji(&a, &b));
        assert!((0.0..=100.0).contains(&v));
        let d = dice(&a, &b).unwrap();
        assert!((d - dice(&b, &a).unwrap()).abs() < 1e-12);
        assert!((0.0..=100.0).contains(&d));
    }
}

#[test]
fn report_json_fields() {
    let r = MetricsReport { ip: Some(0.5), ir: Some(0.25), fid: Some(1.0), dice: Some(80.0), aji: Some(60.0) };
    let v: serde_json::Value = serde_json::to_value(&r).unwrap();
    let keys: Vec<&str> = v.as_object().unwrap().keys().map(|k| k.as_str()).collect();
    assert_eq!(keys, ["aji", "dice", "fid", "ip", "ir"]);
    r.validate().unwrap();
    assert!(MetricsReport { ip: Some(1.5), ..Default::default() }.validate().is_err());
}
