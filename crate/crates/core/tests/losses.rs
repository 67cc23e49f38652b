use candle_core::{DType, Device, Tensor};
use chargan_core::losses::{
    discriminator_adversarial_loss, feature_matching_loss, generator_adversarial_loss, mask_bce_loss,
    perceptual_loss, total_generator_loss, LossWeights, RandomConvExtractor,
};
use chargan_core::nn::scalar;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

const TOL: f64 = 1e-6;

fn t(v: Vec<f64>, shape: &[usize]) -> Tensor {
    Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
}

fn randn(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    let d = Normal::new(0.0, 1.0).unwrap();
    t((0..n).map(|_| d.sample(&mut rng)).collect(), shape)
}

fn val(x: Tensor) -> f64 {
    scalar(&x).unwrap()
}

#[test]
fn zero_logits_give_two_log_two() {
    let z = || vec![Tensor::zeros((1, 1, 5, 5), DType::F64, &Device::Cpu).unwrap(); 2];
    let d = val(discriminator_adversarial_loss(&z(), &z()).unwrap());
    assert!((d - 2.0 * 2f64.ln()).abs() < TOL, "{d}");
}

#[test]
fn three_to_one_odds_give_0_5754() {
    let real = vec![t(vec![3f64.ln()], &[1, 1, 1, 1])];
    let fake = vec![t(vec![-(3f64.ln())], &[1, 1, 1, 1])];
    let d = val(discriminator_adversarial_loss(&real, &fake).unwrap());
    let expected = -(0.75f64.ln() + 0.75f64.ln());
    assert!((d - expected).abs() < TOL, "{d}");
    assert!((d - 0.5754).abs() < 5e-5);
    let g = val(generator_adversarial_loss(&fake).unwrap());
    assert!((g - -(0.25f64.ln())).abs() < TOL);
}

#[test]
fn confident_discriminator_loss_vanishes() {
    let real = vec![t(vec![40.0; 4], &[1, 1, 2, 2])];
    let fake = vec![t(vec![-40.0; 4], &[1, 1, 2, 2])];
    assert!(val(discriminator_adversarial_loss(&real, &fake).unwrap()) < 1e-12);
}

#[test]
fn non_finite_logits_are_an_error() {
    let real = vec![t(vec![f64::NAN], &[1, 1, 1, 1])];
    let fake = vec![t(vec![0.0], &[1, 1, 1, 1])];
    assert!(discriminator_adversarial_loss(&real, &fake).is_err());
}

#[test]
fn feature_matching_hand_example() {
    let a = t(vec![1.0, 2.0, 3.0, 4.0], &[1, 1, 2, 2]);
    let b = (&a + 0.5).unwrap();
    let fm = val(feature_matching_loss(&[vec![a.clone()]], &[vec![b]]).unwrap());
    assert!((fm - 0.5).abs() < TOL);
    assert_eq!(val(feature_matching_loss(&[vec![a.clone()]], &[vec![a]]).unwrap()), 0.0);
}

#[test]
fn feature_matching_rejects_misaligned_lists() {
    let a = randn(&[1, 2, 4, 4], 0);
    let b = randn(&[1, 2, 2, 2], 1);
    assert!(feature_matching_loss(&[vec![a.clone()]], &[vec![b]]).is_err());
    assert!(feature_matching_loss(&[vec![a.clone()]], &[vec![a.clone(), a]]).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn feature_matching_is_a_homogeneous_distance(seed in 0u64..10_000) {
        let real: Vec<Vec<Tensor>> = (0..2).map(|s| vec![randn(&[1, 3, 4, 4], seed + 10 * s), randn(&[1, 5, 2, 2], seed + 10 * s + 1)]).collect();
        let fake: Vec<Vec<Tensor>> = (0..2).map(|s| vec![randn(&[1, 3, 4, 4], seed + 10 * s + 100), randn(&[1, 5, 2, 2], seed + 10 * s + 101)]).collect();
        prop_assert_eq!(val(feature_matching_loss(&real, &real).unwrap()), 0.0);
        let l = val(feature_matching_loss(&real, &fake).unwrap());
        prop_assert!(l > 0.0);
        let dbl = |v: &Vec<Vec<Tensor>>| v.iter().map(|s| s.iter().map(|x| (x * 2.0).unwrap()).collect()).collect::<Vec<Vec<Tensor>>>();
        let l2 = val(feature_matching_loss(&dbl(&real), &dbl(&fake)).unwrap());
        prop_assert!((l2 - 2.0 * l).abs() < 1e-9 * l.max(1.0));
    }

    #[test]
    fn total_loss_is_linear(a in -5.0..5.0f64, b in 0.0..5.0f64, c in 0.0..5.0f64, k in 0.1..4.0f64) {
        let w = LossWeights::default();
        let base = total_generator_loss(a, b, c, &w);
        let scaled = total_generator_loss(k * a, k * b, k * c, &w);
        prop_assert!((scaled - k * base).abs() < 1e-9 * (1.0 + base.abs() * k));
    }
}

#[test]
fn total_loss_examples() {
    let unit = LossWeights::unit();
    assert_eq!(total_generator_loss(0.0, 0.0, 0.0, &LossWeights::default()), 0.0);
    assert_eq!(total_generator_loss(1.0, 2.0, 3.0, &unit), 6.0);
    let w = LossWeights::default();
    assert!((total_generator_loss(0.5, 0.1, 0.2, &w) - 3.5).abs() < 1e-12);
}

#[test]
fn feature_matching_gradient_matches_finite_differences() {
    let real_var = candle_core::Var::from_tensor(&randn(&[1, 2, 3, 3], 7)).unwrap();
    let real = real_var.as_tensor().clone();
    let fake_vals: Vec<f64> = randn(&[1, 2, 3, 3], 8).flatten_all().unwrap().to_vec1().unwrap();
    let var = candle_core::Var::from_tensor(&t(fake_vals.clone(), &[1, 2, 3, 3])).unwrap();
    let loss = feature_matching_loss(&[vec![real.clone()]], &[vec![var.as_tensor().clone()]]).unwrap();
    let grads = loss.backward().unwrap();
    let analytic: Vec<f64> = grads.get(var.as_tensor()).unwrap().flatten_all().unwrap().to_vec1().unwrap();
    let eval = |v: Vec<f64>| val(feature_matching_loss(&[vec![real.clone()]], &[vec![t(v, &[1, 2, 3, 3])]]).unwrap());
    let eps = 1e-6;
    for i in 0..fake_vals.len() {
        let mut up = fake_vals.clone();
        let mut dn = fake_vals.clone();
        up[i] += eps;
        dn[i] -= eps;
        let fd = (eval(up) - eval(dn)) / (2.0 * eps);
        let rel = (fd - analytic[i]).abs() / fd.abs().max(analytic[i].abs()).max(1e-12);
        assert!(rel < 1e-3, "element {i}: fd {fd} vs {}", analytic[i]);
    }
    // real features are constants even when they come from a tracked graph
    assert!(grads.get(&real).is_none());
}

#[test]
fn mask_bce_closed_form() {
    let logits = t(vec![0.0, 2.0, -1.0, 3.0], &[1, 1, 2, 2]);
    let target = t(vec![1.0, 0.0, 0.0, 1.0], &[1, 1, 2, 2]);
    let sig = |z: f64| 1.0 / (1.0 + (-z).exp());
    let expected = -(sig(0.0).ln() + (1.0 - sig(2.0)).ln() + (1.0 - sig(-1.0)).ln() + sig(3.0).ln()) / 4.0;
    assert!((val(mask_bce_loss(&logits, &target).unwrap()) - expected).abs() < 1e-12);
}

fn image_batch(seed: u64) -> Tensor {
    randn(&[1, 3, 32, 32], seed).tanh().unwrap().to_dtype(DType::F32).unwrap()
}

#[test]
fn perceptual_identity_and_symmetry() {
    let ex = RandomConvExtractor::new(0, DType::F32, &Device::Cpu).unwrap();
    let x = image_batch(1);
    let y = image_batch(2);
    assert_eq!(val(perceptual_loss(&x, &x, &ex).unwrap()), 0.0);
    let xy = val(perceptual_loss(&x, &y, &ex).unwrap());
    let yx = val(perceptual_loss(&y, &x, &ex).unwrap());
    assert!(xy > 0.0);
    assert!((xy - yx).abs() < 1e-6 * xy);
}

#[test]
fn perceptual_grows_with_noise() {
    let ex = RandomConvExtractor::new(3, DType::F32, &Device::Cpu).unwrap();
    for seed in 0..20 {
        let x = image_batch(100 + seed);
        let noise = randn(&[1, 3, 32, 32], 200 + seed).to_dtype(DType::F32).unwrap();
        let at = |eps: f64| {
            let y = (&x + (&noise * eps).unwrap()).unwrap();
            val(perceptual_loss(&x, &y, &ex).unwrap())
        };
        assert!(at(0.1) > at(0.01), "seed {seed}");
    }
}
