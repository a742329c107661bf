//! Metric oracles: Fréchet distance against closed forms, faithfulness
//! range/locality/separation, and the attribute classifier bar.

use geoflow::eval::{
    crop_box, faithfulness_score, frechet_distance, frechet_from_features, stack_images, train_attribute_classifier,
    AttributeClassifier, FixedEmbedder,
};
use geoflow::synthdata::{generate_dataset, render_face, Attribute, FaceSpec, Split};
use geoflow::{Error, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn gaussian(n: usize, mean: &[f64], rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| mean.iter().map(|m| m + rng.sample::<f64, _>(StandardNormal)).collect())
        .collect()
}

/// Unit-covariance Gaussians whose means differ by a norm-3 vector: the
/// closed form is ‖Δμ‖² = 9.
#[test]
fn frechet_matches_closed_form_mean_shift() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let d = 8;
    let shift: Vec<f64> = (0..d).map(|k| if k < 4 { 1.5 } else { 0.0 }).collect();
    let x = gaussian(4000, &vec![0.0; d], &mut rng);
    let y = gaussian(4000, &shift, &mut rng);
    let v = frechet_from_features(&x, &y).unwrap();
    assert!((v - 9.0).abs() <= 0.05 * 9.0, "distance {v}");
    assert!(frechet_from_features(&x, &x).unwrap() <= 1e-6);
}

/// Same spherical covariance up to scale: d² = d·(σx − σy)² for equal means.
#[test]
fn frechet_matches_closed_form_scale_change() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let d = 6;
    let x = gaussian(6000, &vec![0.0; d], &mut rng);
    let y: Vec<Vec<f64>> = gaussian(6000, &vec![0.0; d], &mut rng)
        .into_iter()
        .map(|f| f.into_iter().map(|v| 2.0 * v).collect())
        .collect();
    let v = frechet_from_features(&x, &y).unwrap();
    assert!((v - d as f64).abs() <= 0.05 * d as f64, "distance {v}");
}

#[test]
fn frechet_grows_with_pixel_noise() {
    let d = generate_dataset(5, 500, 64);
    let x = stack_images(&d.a).unwrap();
    let e = FixedEmbedder::default();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let noise: Vec<f32> = (0..x.len()).map(|_| rng.sample::<f32, _>(StandardNormal)).collect();
    let dist = |sigma: f32| {
        let data = x.data().iter().zip(&noise).map(|(v, n)| v + sigma * n).collect();
        frechet_distance(&e, &x, &Tensor::from_vec(x.shape(), data).unwrap()).unwrap()
    };
    let ds: Vec<f64> = [0.05, 0.1, 0.2].into_iter().map(dist).collect();
    assert!(ds[0] < ds[1] && ds[1] < ds[2], "{ds:?}");
}

fn random_face(rng: &mut ChaCha8Rng) -> FaceSpec {
    FaceSpec::sample(rng, true, Attribute::Mustache)
}

#[test]
fn faithfulness_separates_matched_from_mismatched_styles() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let e = FixedEmbedder::default();
    let (mut matched, mut mismatched) = (0.0, 0.0);
    let pairs = 200;
    for _ in 0..pairs {
        let base = random_face(&mut rng);
        let mut same = random_face(&mut rng);
        same.style = base.style;
        let other = random_face(&mut rng);
        let (s0, s1, s2) = (render_face(&base, 64), render_face(&same, 64), render_face(&other, 64));
        let score = |x: &geoflow::synthdata::Sample| {
            faithfulness_score(&e, &x.image, &s0.image, &x.landmarks, &s0.landmarks, Attribute::Mustache).unwrap()
        };
        matched += score(&s1);
        mismatched += score(&s2);
    }
    assert!(matched < mismatched, "matched {} mismatched {}", matched / pairs as f64, mismatched / pairs as f64);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn faithfulness_in_range_and_blind_outside_crops(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (fa, fb) = (render_face(&random_face(&mut rng), 64), render_face(&random_face(&mut rng), 64));
        let e = FixedEmbedder::default();
        let noise = |rng: &mut ChaCha8Rng| Tensor::from_fn(fa.image.shape(), |_| rng.gen_range(-1.0f32..1.0));
        let (x, y) = (noise(&mut rng), noise(&mut rng));
        let tinted = Tensor::from_fn(x.shape(), |[b, c, i, j]| 0.1 + 0.7 * (c as f32 + 1.0) / 3.0 * x.at(b, c, i, j));
        let s_tinted = faithfulness_score(&e, &tinted, &y, &fa.landmarks, &fb.landmarks, Attribute::Mustache).unwrap();
        let s = faithfulness_score(&e, &x, &y, &fa.landmarks, &fb.landmarks, Attribute::Mustache).unwrap();
        prop_assert!((0.0..=2.0).contains(&s));
        // per-channel affine colour changes (skin tint, brightness) are ignored
        prop_assert!((s - s_tinted).abs() <= 1e-4, "{} vs {}", s, s_tinted);

        // repaint everything farther than one pixel from either crop box
        let boxes = [crop_box(&fa.landmarks, Attribute::Mustache).unwrap(), crop_box(&fb.landmarks, Attribute::Mustache).unwrap()];
        let near = |i: usize, j: usize| {
            boxes.iter().any(|&(x0, y0, x1, y1)| {
                (j as f64) >= x0.floor() - 1.0 && (j as f64) <= x1.ceil() + 1.0 && (i as f64) >= y0.floor() - 1.0 && (i as f64) <= y1.ceil() + 1.0
            })
        };
        let repaint = |t: &Tensor<f32>| Tensor::from_fn(t.shape(), |[b, c, i, j]| if near(i, j) { t.at(b, c, i, j) } else { 0.3 });
        let s2 = faithfulness_score(&e, &repaint(&x), &repaint(&y), &fa.landmarks, &fb.landmarks, Attribute::Mustache).unwrap();
        prop_assert_eq!(s, s2);
    }
}

#[test]
fn classifier_oracles_and_qualification_bar() {
    let d = generate_dataset(0, 2000, 64);
    let clf = train_attribute_classifier(&d, 800, 0).unwrap();
    assert!(clf.val_accuracy >= 0.99, "validation accuracy {}", clf.val_accuracy);
    let (ta, tb) = (d.split(0, Split::Test), d.split(1, Split::Test));
    let b = stack_images(tb).unwrap();
    let truth = clf.accuracy(&b, &vec![1; tb.len()]).unwrap();
    let flipped = clf.accuracy(&b, &vec![0; tb.len()]).unwrap();
    assert!(truth >= 0.99, "ground truth accuracy {truth}");
    assert!(flipped <= 0.01, "flipped accuracy {flipped}");

    let a = stack_images(ta).unwrap();
    let blend = Tensor::from_vec(a.shape(), a.data().iter().zip(b.data()).map(|(x, y)| 0.5 * x + 0.5 * y).collect()).unwrap();
    let baseline = clf.accuracy(&blend, &vec![1; tb.len()]).unwrap();
    println!("untrained-generator baseline accuracy {baseline:.3}");
    assert!(flipped < baseline && baseline < truth, "baseline {baseline}");

    let weak = AttributeClassifier {
        val_accuracy: 0.9,
        ..clf
    };
    assert!(matches!(weak.accuracy(&b, &vec![1; tb.len()]), Err(Error::Metric(_))));
}
