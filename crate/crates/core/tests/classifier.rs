mod common;

use common::{param_names, probe, random_tensor, substitute, tensors_of};
use halluface_autograd::{gradcheck, no_grad, Tensor, Var};
use halluface_core::classifier::{Classifier, ClassifierConfig};
use halluface_core::image::images_to_tensor;
use halluface_core::losses::{classifier_loss, BCE_EPS};
use halluface_core::optim::{gradients, Adam, AdamConfig};
use halluface_core::synthetic::brightness_samples;
use halluface_core::{AttributeVector, Error, Image};
use ndarray::{ArrayD, IxDyn};
use proptest::prelude::*;

fn tiny() -> ClassifierConfig {
    ClassifierConfig { width: 4 }
}

fn rows(values: &[f64], n: usize) -> Var {
    Var::constant(ArrayD::from_shape_vec(IxDyn(&[n, 12]), values.to_vec()).unwrap())
}

fn binary_truth(n: usize, seed: u64) -> Vec<f64> {
    random_tensor(&[n * 12], seed).iter().map(|v| if *v > 0.5 { 1.0 } else { 0.0 }).collect()
}

fn lr_images(n: usize, seed: u64) -> Vec<Image> {
    (0..n).map(|i| Image::new(common::random_pixels(16, 16, seed + i as u64)).unwrap()).collect()
}

#[test]
fn outputs_are_twelve_probabilities() {
    let c = Classifier::new(&tiny(), 0).unwrap();
    let p = c.forward(&Var::constant(random_tensor(&[3, 3, 16, 16], 1))).unwrap();
    assert_eq!(p.shape(), [3, 12]);
    assert!(p.value().iter().all(|v| *v > 0.0 && *v < 1.0));
    let imgs = lr_images(2, 5);
    let a = c.classify(&imgs[0]).unwrap();
    assert_eq!(a, c.classify(&imgs[0]).unwrap());
    assert_eq!(c.classify_batch(&imgs).unwrap()[0], a);
    assert!(c.classify_batch(&[]).unwrap().is_empty());
}

#[test]
fn wrong_sizes_are_rejected() {
    let c = Classifier::new(&tiny(), 0).unwrap();
    assert!(matches!(c.forward(&Var::constant(random_tensor(&[1, 3, 32, 32], 1))), Err(Error::Shape(_))));
    assert!(c.forward(&Var::constant(random_tensor(&[1, 1, 16, 16], 1))).is_err());
    assert!(c.classify(&Image::constant(32, 32, 0.5)).is_err());
    assert!(matches!(Classifier::new(&ClassifierConfig { width: 0 }, 0), Err(Error::Config(_))));
}

#[test]
fn loss_closed_forms() {
    let n = 3;
    let truth = binary_truth(n, 1);
    let half = classifier_loss(&rows(&[0.5; 36], n), &rows(&truth, n)).unwrap().item();
    assert!((half - 12.0 * 2f64.ln()).abs() < 1e-12, "{half}");
    assert!((half - 8.3178).abs() < 1e-4);

    let exact = classifier_loss(&rows(&truth, n), &rows(&truth, n)).unwrap().item();
    assert!(exact >= 0.0 && exact <= -12.0 * (1.0 - BCE_EPS).ln() + 1e-15, "{exact}");

    let flipped: Vec<f64> = truth.iter().map(|t| 1.0 - t).collect();
    let worst = classifier_loss(&rows(&flipped, n), &rows(&truth, n)).unwrap().item();
    // 1 - (1 - eps) is not exactly eps in binary
    assert!((worst / (12.0 * (1.0 / BCE_EPS).ln()) - 1.0).abs() < 1e-8, "{worst}");
    for p in [0.0, 0.3, 0.9, 1.0] {
        let other = classifier_loss(&rows(&[p; 36], n), &rows(&truth, n)).unwrap().item();
        assert!(other <= worst + 1e-12);
    }
}

#[test]
fn out_of_range_inputs_are_errors() {
    let truth = rows(&binary_truth(1, 2), 1);
    let mut bad = [0.5; 12];
    bad[3] = 1.2;
    assert!(matches!(classifier_loss(&rows(&bad, 1), &truth), Err(Error::InvalidAttributes(_))));
    bad[3] = -0.01;
    assert!(classifier_loss(&rows(&bad, 1), &truth).is_err());
    let mut t = [0.0; 12];
    t[0] = 2.0;
    assert!(classifier_loss(&rows(&[0.5; 12], 1), &rows(&t, 1)).is_err());
    assert!(classifier_loss(&rows(&[0.5; 24], 2), &truth).is_err());
}

#[test]
fn loss_gradient_matches_finite_differences() {
    let truth = rows(&binary_truth(2, 3), 2);
    let pred = random_tensor(&[2, 12], 4).mapv(|v| 0.1 + 0.8 * v);
    let check = gradcheck::check(|v| classifier_loss(&v[0], &truth).unwrap(), &[pred], 1e-3, 24);
    assert!(check.max_relative_error() < 1e-3, "{check:?}");
}

#[test]
fn network_gradients_match_finite_differences() {
    for seed in 0..6 {
        let c = Classifier::new(&tiny(), seed).unwrap();
        let names = param_names(&c);
        let names: Vec<&str> = names.iter().map(String::as_str).collect();
        let x = Var::constant(random_tensor(&[2, 3, 16, 16], seed + 10));
        let truth = rows(&binary_truth(2, seed + 20), 2);
        let check = gradcheck::check(
            |v| classifier_loss(&substitute(&c, &names, v).forward(&x).unwrap(), &truth).unwrap(),
            &tensors_of(&c, &names),
            1e-6,
            16,
        );
        assert!(check.max_relative_error() < 1e-5, "seed {seed}: {check:?}");
        let w = probe(&[2, 12], seed + 30);
        let input = gradcheck::check(|v| (&c.forward(&v[0]).unwrap() * &w).sum_all(), &[x.value().clone()], 1e-6, 32);
        assert!(input.max_relative_error() < 1e-5, "seed {seed}: {input:?}");
    }
}

fn to_batch(samples: &[(Image, AttributeVector)]) -> (Var, Var) {
    let imgs: Vec<Image> = samples.iter().map(|(i, _)| i.clone()).collect();
    let labels: Vec<f64> = samples.iter().flat_map(|(_, a)| a.values().to_vec()).collect();
    (Var::constant(images_to_tensor(&imgs)), rows(&labels, samples.len()))
}

#[test]
fn learns_brightness_within_five_hundred_steps() {
    let k = 7;
    let train = brightness_samples(1024, k, 11);
    let test = brightness_samples(500, k, 12);
    let mut clf = Classifier::new(&ClassifierConfig { width: 16 }, 13).unwrap();
    let mut opt = Adam::new(AdamConfig { lr: 1e-3, ..AdamConfig::default() });
    for step in 0..500 {
        let start = (step * 32) % train.len();
        let (x, a) = to_batch(&train[start..start + 32]);
        let loss = classifier_loss(&clf.forward(&x).unwrap(), &a).unwrap();
        let g = gradients(&loss, &clf);
        opt.step(&mut clf, &g).unwrap();
    }
    let (x, a) = to_batch(&test);
    let p: Tensor = no_grad(|| clf.forward(&x).unwrap().into_value());
    let correct = (0..test.len()).filter(|&i| (p[[i, k]] > 0.5) == (a.value()[[i, k]] > 0.5)).count();
    assert!(correct as f64 / test.len() as f64 > 0.95, "{correct}/{}", test.len());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn loss_is_invariant_to_batch_order(seed in any::<u64>(), n in 2usize..6, shift in 1usize..5) {
        let pred: Vec<f64> = random_tensor(&[n * 12], seed).iter().copied().collect();
        let truth = binary_truth(n, seed ^ 1);
        let rot = |v: &[f64]| -> Vec<f64> { let mut v = v.to_vec(); v.rotate_left((shift % n) * 12); v };
        let a = classifier_loss(&rows(&pred, n), &rows(&truth, n)).unwrap().item();
        let b = classifier_loss(&rows(&rot(&pred), n), &rows(&rot(&truth), n)).unwrap().item();
        prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
    }

    #[test]
    fn loss_is_non_negative_and_zero_only_at_the_truth(seed in any::<u64>(), n in 1usize..4) {
        let pred: Vec<f64> = random_tensor(&[n * 12], seed).iter().copied().collect();
        let truth = binary_truth(n, seed ^ 2);
        let loss = classifier_loss(&rows(&pred, n), &rows(&truth, n)).unwrap().item();
        prop_assert!(loss >= 0.0);
        let at_truth = classifier_loss(&rows(&truth, n), &rows(&truth, n)).unwrap().item();
        prop_assert!(at_truth < 1e-5 && at_truth < loss);
    }
}
