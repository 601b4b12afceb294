mod common;

use common::*;
use pointfuse_core::degrade::{DegradationSpec, SceneKind};
use pointfuse_core::diffusion::{make_schedule, q_sample, reverse_update, StepCoefficients};
use pointfuse_core::model::Ablation;
use pointfuse_tensor::rng::standard_normal;
use pointfuse_tensor::Tape;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let s = (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    (m, s)
}

#[test]
fn forward_marginals_match_closed_form() {
    let s = make_schedule(1000, 1e-4, 0.02).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let n = 10_000;
    for (t, x0) in [(250, 0.8), (500, -0.3), (1000, 1.5)] {
        let eps: Vec<f64> = standard_normal(&mut rng, n);
        let xt = q_sample(&vec![x0; n], t, &eps, &s).unwrap();
        let (m, sd) = mean_std(&xt);
        let ab = s.alpha_bar_at(t);
        let (want_m, want_sd) = (ab.sqrt() * x0, (1.0 - ab).sqrt());
        let se_m = want_sd / (n as f64).sqrt();
        let se_sd = want_sd / (2.0 * (n as f64 - 1.0)).sqrt();
        assert!(
            (m - want_m).abs() < 3.0 * se_m,
            "t={t} mean {m} vs {want_m}"
        );
        assert!(
            (sd - want_sd).abs() < 3.0 * se_sd,
            "t={t} std {sd} vs {want_sd}"
        );
    }
}

#[test]
fn one_step_with_true_noise_recovers_x0() {
    let s = make_schedule(1, 0.02, 0.02).unwrap();
    let plan = s.plan(1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..10 {
        let x0: Vec<f32> = standard_normal(&mut rng, 3 * 200);
        let eps: Vec<f32> = standard_normal(&mut rng, 3 * 200);
        let x1 = q_sample(&x0, 1, &eps, &s).unwrap();
        let c = StepCoefficients {
            sigma: 0.0,
            ..plan.coefficients(0)
        };
        let back = reverse_update(&x1, &eps, c, None).unwrap();
        for (a, b) in back.iter().zip(&x0) {
            assert!((a - b).abs() < 1e-5);
        }
    }
}

#[test]
fn strided_plan_telescopes_to_the_schedule() {
    let s = make_schedule(1000, 1e-4, 0.02).unwrap();
    for steps in [1, 7, 50, 100, 333, 999] {
        let plan = s.plan(steps).unwrap();
        assert_eq!(plan.len(), steps);
        assert_eq!(*plan.timesteps.last().unwrap(), 1000);
        assert!(plan.timesteps.windows(2).all(|w| w[0] < w[1]));
        let mut prod = 1.0;
        for i in 0..steps {
            prod *= plan.alpha[i];
            assert!((prod - s.alpha_bar_at(plan.timesteps[i])).abs() < 1e-12);
            assert!((plan.sigma[i] * plan.sigma[i] - plan.beta[i]).abs() < 1e-15);
        }
    }
    assert!(s.plan(0).is_err() && s.plan(1001).is_err());
}

#[test]
fn full_plan_is_the_schedule_itself() {
    let s = make_schedule(200, 1e-4, 0.02).unwrap();
    let plan = s.plan(200).unwrap();
    assert_eq!(plan.beta, s.beta);
    assert_eq!(plan.alpha, s.alpha);
    assert_eq!(plan.alpha_bar, s.alpha_bar);
    assert_eq!(plan.sigma, s.sigma);
    assert_eq!(plan.timesteps, (1..=200).collect::<Vec<_>>());
}

#[test]
fn strided_sampler_with_all_steps_equals_plain_sampler() {
    let cfg = toy_config();
    let pair = scene_pair(
        SceneKind::Cube,
        128,
        16,
        &DegradationSpec {
            keep_ratio: 0.25,
            ..Default::default()
        },
    );
    let prep = prepared(&cfg, &pair);
    let (model, mut store) = toy_model(&cfg, 3);
    randomize(&mut store, 4);
    let s = make_schedule(60, 1e-4, 0.05).unwrap();
    let n = 40;

    let strided = model
        .sample_normalized(
            &store,
            &prep,
            n,
            &s.plan(60).unwrap(),
            &mut ChaCha8Rng::seed_from_u64(5),
            Ablation::NONE,
        )
        .unwrap();

    // The textbook loop over t = T..1 straight from the schedule arrays.
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut x: Vec<f32> = standard_normal(&mut rng, n * 3);
    for t in (1..=60).rev() {
        let mut tape = Tape::no_grad();
        let conds = model.conditions(&mut tape, &store, &prep).unwrap();
        let eps = model
            .predict_noise(&mut tape, &store, &prep, &conds, &x, t, 60, Ablation::NONE)
            .unwrap();
        let eps = tape.value(eps).to_vec();
        let z: Option<Vec<f32>> = (t > 1).then(|| standard_normal(&mut rng, n * 3));
        let c = StepCoefficients {
            alpha: s.alpha[t - 1],
            alpha_bar: s.alpha_bar[t - 1],
            beta: s.beta[t - 1],
            sigma: s.sigma[t - 1],
        };
        x = reverse_update(&x, &eps, c, z.as_deref()).unwrap();
    }
    assert_eq!(strided, x);
}

#[test]
fn untrained_model_loss_is_about_one() {
    // The zero-initialized head predicts ε̂ = 0, so the loss is mean(ε²).
    let cfg = toy_config();
    let pair = scene_pair(SceneKind::SphereShell, 512, 16, &DegradationSpec::default());
    let prep = prepared(&cfg, &pair);
    let (model, store) = toy_model(&cfg, 6);
    let s = make_schedule(1000, 1e-4, 0.02).unwrap();
    let x0 = prep.encode_target(&pair.target, 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let eps: Vec<f32> = standard_normal(&mut rng, x0.len());
    let mut tape = Tape::no_grad();
    let conds = model.conditions(&mut tape, &store, &prep).unwrap();
    let loss = model
        .training_loss(&mut tape, &store, &prep, &conds, &x0, 500, &eps, &s)
        .unwrap();
    let loss = tape.scalar_value(loss).unwrap();
    // Standard error of a mean of 1536 χ²₁ draws is √(2/1536) ≈ 0.036.
    assert!((loss - 1.0).abs() < 0.11, "{loss}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn loss_ignores_point_order(seed in any::<u64>(), t in 1usize..100) {
        let cfg = toy_config();
        let pair = scene_pair(SceneKind::TwoRoom, 128, 16, &DegradationSpec { keep_ratio: 0.25, ..Default::default() });
        let prep = prepared(&cfg, &pair);
        let (model, mut store) = toy_model(&cfg, 8);
        randomize(&mut store, seed);
        let s = make_schedule(100, 1e-4, 0.02).unwrap();
        let n = 48;
        let x0 = prep.encode_target(&pair.target, 3).unwrap()[..n * 3].to_vec();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let eps: Vec<f32> = standard_normal(&mut rng, n * 3);
        let perm: Vec<usize> = rand::seq::index::sample(&mut rng, n, n).into_vec();
        let permute = |v: &[f32]| -> Vec<f32> { perm.iter().flat_map(|&i| v[3 * i..3 * i + 3].to_vec()).collect() };

        let loss = |x0: &[f32], eps: &[f32]| {
            let mut tape = Tape::no_grad();
            let conds = model.conditions(&mut tape, &store, &prep).unwrap();
            let l = model.training_loss(&mut tape, &store, &prep, &conds, x0, t, eps, &s).unwrap();
            tape.scalar_value(l).unwrap()
        };
        let a = loss(&x0, &eps);
        let b = loss(&permute(&x0), &permute(&eps));
        prop_assert!((a - b).abs() < 1e-5, "{} vs {}", a, b);
    }
}
