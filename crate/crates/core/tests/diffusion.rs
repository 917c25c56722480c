use proptest::prelude::*;
use videobooth::diffusion::*;
use videobooth::{Graph, Result, RngStream, Tensor};

fn loss_of(pred: &Tensor<f64>, target: &Tensor<f64>) -> f64 {
    let g = Graph::new();
    let l = epsilon_loss(&g, g.constant(pred.clone()), g.constant(target.clone())).unwrap();
    g.value(l).item().unwrap()
}

#[test]
fn epsilon_loss_cases() {
    let mut rng = RngStream::new(1);
    let t = rng.normal_tensor::<f64>(vec![2, 3, 4]);
    assert_eq!(loss_of(&t, &t), 0.0);
    assert!((loss_of(&t.map(|v| v + 0.7), &t) - 0.49).abs() < 1e-12);
    let p = rng.normal_tensor::<f64>(vec![2, 3, 4]);
    let want = p.data().iter().zip(t.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / 24.0;
    assert!((loss_of(&p, &t) - want).abs() < 1e-12);
    let g = Graph::<f64>::new();
    let r = epsilon_loss(&g, g.constant(p), g.constant(Tensor::zeros(vec![3])));
    assert!(matches!(r, Err(videobooth::Error::Dimension(_))));
}

#[test]
fn noising_limits() {
    let s = NoiseSchedule::from_config(&ScheduleConfig::default()).unwrap();
    let mut rng = RngStream::new(2);
    let x0 = rng.normal_tensor::<f64>(vec![10]);
    let eps = rng.normal_tensor::<f64>(vec![10]);
    // t = 0 is not a noising step; ᾱ = 1 lives there
    assert_eq!(s.alpha_bar_at(0).unwrap(), 1.0);
    assert!(forward_noise(&s, &x0, 0, &eps).is_err());
    assert!(forward_noise(&s, &x0, s.steps() + 1, &eps).is_err());
    let t = 40;
    let ab = s.alpha_bar_at(t).unwrap();
    let pure = forward_noise(&s, &Tensor::zeros(vec![10]), t, &eps).unwrap();
    assert!(pure.max_abs_diff(&eps.scale((1.0 - ab).sqrt())).unwrap() < 1e-15);
    let tiny = build_schedule(1, 1e-300, 1e-300).unwrap();
    assert!(forward_noise(&tiny, &x0, 1, &eps).unwrap().max_abs_diff(&x0).unwrap() < 1e-12);
}

#[test]
fn forward_noise_moments_within_three_standard_errors() {
    let s = NoiseSchedule::from_config(&ScheduleConfig::default()).unwrap();
    let x0 = Tensor::<f64>::from_f64([3], &[1.5, -0.5, 0.0]).unwrap();
    let n = 10_000;
    let mut rng = RngStream::new(3);
    for t in [1, 50, 100] {
        let ab = s.alpha_bar_at(t).unwrap();
        let mut draws = vec![Vec::new(); 3];
        for _ in 0..n {
            let eps = rng.normal_tensor::<f64>(vec![3]);
            let xt = forward_noise(&s, &x0, t, &eps).unwrap();
            for (d, v) in draws.iter_mut().zip(xt.data()) {
                d.push(*v);
            }
        }
        for (i, d) in draws.iter().enumerate() {
            let mean = d.iter().sum::<f64>() / n as f64;
            let var = d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            let sigma2 = 1.0 - ab;
            let se_mean = (sigma2 / n as f64).sqrt();
            let se_var = sigma2 * (2.0 / (n - 1) as f64).sqrt();
            assert!((mean - ab.sqrt() * x0.data()[i]).abs() < 3.0 * se_mean, "t={t} mean {mean}");
            assert!((var - sigma2).abs() < 3.0 * se_var, "t={t} var {var}");
        }
    }
}

#[test]
fn sampler_is_deterministic_and_zero_steps_is_initial_noise() {
    let s = NoiseSchedule::from_config(&ScheduleConfig::default()).unwrap();
    let model = |x: &Tensor<f32>, _t: usize, _p: Option<&Tensor<f32>>| -> Result<Tensor<f32>> { Ok(x.scale(0.3)) };
    let shape = [1, 4, 2, 4, 4];
    let a = sample_video(&model, &s, &shape, None, 11, 8, SamplerOptions::default()).unwrap();
    let b = sample_video(&model, &s, &shape, None, 11, 8, SamplerOptions::default()).unwrap();
    assert!(a.bitwise_eq(&b));
    let c = sample_video(&model, &s, &shape, None, 12, 8, SamplerOptions::default()).unwrap();
    assert!(!a.bitwise_eq(&c));
    let init = RngStream::new(11).split(0).normal_tensor::<f32>(shape.to_vec());
    let zero = sample_video(&model, &s, &shape, None, 11, 0, SamplerOptions::default()).unwrap();
    assert!(zero.bitwise_eq(&init));
}

#[test]
fn prompt_noise_is_fixed_unless_fresh_is_requested() {
    use std::cell::RefCell;
    let s = NoiseSchedule::from_config(&ScheduleConfig::default()).unwrap();
    let prompt = Tensor::<f64>::full(vec![1, 4, 1, 2, 2], 0.5);
    for fresh in [false, true] {
        let seen = RefCell::new(Vec::new());
        let model = |x: &Tensor<f64>, t: usize, p: Option<&Tensor<f64>>| -> Result<Tensor<f64>> {
            // recover the ε used for the prompt at this step
            let ab = s.alpha_bar_at(t)?;
            let p = p.expect("prompt passed");
            seen.borrow_mut().push(p.zip_map(&prompt, |pt, p0| (pt - ab.sqrt() * p0) / (1.0 - ab).sqrt())?);
            Ok(x.scale(0.0))
        };
        sample_video(&model, &s, &[1, 4, 2, 2, 2], Some(&prompt), 5, 4, SamplerOptions { fresh_prompt_noise: fresh }).unwrap();
        let eps = seen.into_inner();
        let all_same = eps.windows(2).all(|w| w[0].max_abs_diff(&w[1]).unwrap() < 1e-9);
        assert_eq!(all_same, !fresh);
    }
}

#[test]
fn one_step_with_true_noise_recovers_x0() {
    let s = NoiseSchedule::from_config(&ScheduleConfig::default()).unwrap();
    let mut rng = RngStream::new(4);
    let x0 = rng.normal_tensor::<f64>(vec![16]);
    let eps = rng.normal_tensor::<f64>(vec![16]);
    for t in [1, 30, 100] {
        let xt = forward_noise(&s, &x0, t, &eps).unwrap();
        let out = ddpm_step(&xt, &eps, s.alpha_bar_at(t).unwrap(), 1.0, None).unwrap();
        assert!(out.max_abs_diff(&x0).unwrap() < 1e-6);
    }
}

proptest! {
    #[test]
    fn forward_noise_is_affine(seed in 0u64..500, t in 1usize..=100, a in -2.0f64..2.0) {
        let s = NoiseSchedule::from_config(&ScheduleConfig::default()).unwrap();
        let mut rng = RngStream::new(seed);
        let (x1, x2) = (rng.normal_tensor::<f64>(vec![6]), rng.normal_tensor::<f64>(vec![6]));
        let (e1, e2) = (rng.normal_tensor::<f64>(vec![6]), rng.normal_tensor::<f64>(vec![6]));
        let mixed = forward_noise(&s, &x1.scale(a).add(&x2).unwrap(), t, &e1.scale(a).add(&e2).unwrap()).unwrap();
        let sum = forward_noise(&s, &x1, t, &e1).unwrap().scale(a).add(&forward_noise(&s, &x2, t, &e2).unwrap()).unwrap();
        prop_assert!(mixed.max_abs_diff(&sum).unwrap() < 1e-12);
    }

    #[test]
    fn schedule_invariants(steps in 1usize..300, b0 in 1e-5f64..0.05, span in 0.0f64..0.2) {
        let s = build_schedule(steps, b0, (b0 + span).min(0.5)).unwrap();
        prop_assert!(s.alpha_bar.windows(2).all(|w| w[1] < w[0]));
        for t in 1..=steps {
            let ab = s.alpha_bar_at(t).unwrap();
            prop_assert!((ab.sqrt().powi(2) + (1.0 - ab).sqrt().powi(2) - 1.0).abs() < 1e-12);
        }
    }
}
