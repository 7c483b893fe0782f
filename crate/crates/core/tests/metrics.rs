mod common;

use common::{random_image, rng};
use pccnn_core::data::{Image, Signature};
use pccnn_core::maskgen::Mask;
use pccnn_core::metrics::{evaluate, evaluate_with, l1, l2, psnr, ImageScores, Scores};
use pccnn_core::model::ModelParams;
use proptest::prelude::*;

fn grey(levels: usize, values: Vec<u8>) -> Image {
    Image::new(Signature::new(1, values.len(), 1, levels).unwrap(), values).unwrap()
}

#[test]
fn closed_form_cases() {
    let truth = grey(2, vec![0, 1, 0, 1]);
    let half = grey(2, vec![1, 1, 1, 1]);
    assert!((l1(&half, &truth).unwrap() - 50.0).abs() < 1e-6);
    assert!((l2(&half, &truth).unwrap() - 100.0 * 0.5f64.sqrt()).abs() < 1e-6);
    assert!((psnr(&half, &truth).unwrap() - 10.0 * 2f64.log10()).abs() < 1e-6);
    // Differences of 0.1 everywhere: MSE 0.01, 20 dB.
    let a = grey(11, vec![0, 5, 9]);
    let b = grey(11, vec![1, 4, 10]);
    assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-6);
    assert!((l1(&a, &b).unwrap() - 10.0).abs() < 1e-6);
    assert!((l2(&a, &b).unwrap() - 10.0).abs() < 1e-6);
}

#[test]
fn oracle_sampler_scores_zero_and_single_sample_mean_is_best() {
    let s = Signature::new(4, 4, 1, 2).unwrap();
    let mut r = rng(1);
    let images: Vec<Image> = (0..5).map(|_| random_image(s, &mut r)).collect();
    let masks = vec![Mask::all_hidden(4, 4); 5];
    let report = evaluate_with(&images, &masks, 3, 0, 2, |t, _, seeds| Ok(vec![t.clone(); seeds.len()])).unwrap();
    assert_eq!(report.mean.l1, 0.0);
    assert_eq!(report.mean.l2, 0.0);
    assert!(report.mean.psnr_infinite);
    let p = ModelParams::init(&common::small_config(s, None), 0).unwrap();
    let one = evaluate(&p, &images, &masks, 1, 7, 2).unwrap();
    for i in &one.images {
        assert_eq!(i.mean, i.best);
    }
}

#[test]
fn evaluation_is_deterministic_across_thread_counts() {
    let s = Signature::new(4, 4, 1, 2).unwrap();
    let p = ModelParams::init(&common::small_config(s, None), 2).unwrap();
    let mut r = rng(3);
    let images: Vec<Image> = (0..4).map(|_| random_image(s, &mut r)).collect();
    let masks: Vec<Mask> = (0..4).map(|_| common::random_mask(4, 4, 0.3, &mut r)).collect();
    let a = evaluate(&p, &images, &masks, 3, 11, 1).unwrap();
    let b = evaluate(&p, &images, &masks, 3, 11, 3).unwrap();
    assert_eq!(a, b);
    assert!(evaluate(&p, &images, &masks[..3], 3, 11, 1).is_err());
    assert!(evaluate(&p, &images, &masks, 0, 11, 1).is_err());
    let json: serde_json::Value = serde_json::from_str(&serde_json::to_string(&a).unwrap()).unwrap();
    assert!(json["mean"]["l1"].is_number());
}

proptest! {
    #[test]
    fn metrics_symmetric_bounded_zero_iff_equal(levels in 2usize..9, seed in any::<u64>()) {
        let s = Signature::new(3, 4, 2, levels).unwrap();
        let mut r = rng(seed);
        let a = random_image(s, &mut r);
        let b = random_image(s, &mut r);
        for f in [l1, l2] {
            let v = f(&a, &b).unwrap();
            prop_assert_eq!(v, f(&b, &a).unwrap());
            prop_assert!((0.0..=100.0).contains(&v));
            prop_assert_eq!(v == 0.0, a == b);
            prop_assert_eq!(f(&a, &a).unwrap(), 0.0);
        }
        let p = psnr(&a, &b).unwrap();
        prop_assert_eq!(p, psnr(&b, &a).unwrap());
        prop_assert!(p >= 0.0);
        prop_assert_eq!(p.is_infinite(), a == b);
    }

    #[test]
    fn best_never_worse_than_mean(scores in proptest::collection::vec((0.0f64..100.0, 0.0f64..100.0, 0.0f64..99.0), 1..9)) {
        let s: Vec<Scores> = scores.iter().map(|&(l1, l2, psnr)| Scores { l1, l2, psnr, psnr_infinite: false }).collect();
        let i = ImageScores::from_samples(0, 1, &s).unwrap();
        prop_assert!(i.best.l1 <= i.mean.l1 + 1e-12);
        prop_assert!(i.best.l2 <= i.mean.l2 + 1e-12);
        prop_assert!(i.best.psnr >= i.mean.psnr - 1e-12);
    }
}
