use flowfilter::diffcore::Tensor;
use flowfilter::dynamics::{
    make_windows, sir_ensemble, sir_simulate, Direction, SirParams, SirState, Standardizer, WindowSpec,
};
use flowfilter::encoders::{EncoderConfig, EncoderKind};
use flowfilter::flow::FlowConfig;
use flowfilter::inference::{
    estimate_state, joint_state_param_estimate, kl_knn, mape, mean_nll, rollout, rollout_bands_csv,
    silverman_bandwidth, EstimateOptions, Kde1d, NllOptions, RolloutConfig,
};
use flowfilter::{Error, Model, ModelSpec};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

fn gaussian(n: usize, mean: f64, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dist = Normal::new(mean, 1.0).unwrap();
    Tensor::new(vec![n, 1], (0..n).map(|_| dist.sample(&mut rng)).collect()).unwrap()
}

fn kl_trials(n: usize, shift: f64, trials: u64, seed: u64) -> Vec<f64> {
    (0..trials)
        .map(|t| {
            let p_hat = gaussian(n, 0.0, seed + 2 * t);
            let p = gaussian(n, shift, seed + 2 * t + 1);
            kl_knn(&p_hat, &p, 1).unwrap()
        })
        .collect()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

#[test]
fn kl_gaussian_oracles() {
    let same = mean(&kl_trials(10_000, 0.0, 10, 1));
    assert!(same.abs() < 0.1, "same-distribution estimate {same}");
    let shifted = mean(&kl_trials(10_000, 1.0, 10, 100));
    assert!((shifted - 0.5).abs() < 0.15, "shifted estimate {shifted}");
}

#[test]
fn kl_error_shrinks_with_sample_size() {
    let err = |n| mean(&kl_trials(n, 1.0, 20, 500).iter().map(|k| (k - 0.5).abs()).collect::<Vec<_>>());
    assert!(err(10_000) < err(1000));
}

#[test]
fn kl_is_scale_invariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let dist = Normal::new(0.0, 1.0).unwrap();
    let mut draw = |n: usize, shift: f64| {
        Tensor::new(vec![n, 3], (0..3 * n).map(|_| dist.sample(&mut rng) + shift).collect()).unwrap()
    };
    let a = draw(500, 0.0);
    let b = draw(400, 0.5);
    let base = kl_knn(&a, &b, 2).unwrap();
    let scaled = kl_knn(&a.map(|v| 7.3 * v), &b.map(|v| 7.3 * v), 2).unwrap();
    assert!((base - scaled).abs() < 1e-9);
}

#[test]
fn kl_rejects_bad_inputs_and_survives_duplicates() {
    let a = gaussian(5, 0.0, 4);
    assert!(matches!(kl_knn(&a, &a, 5), Err(Error::InsufficientSamples(_))));
    assert!(matches!(
        kl_knn(&a, &Tensor::zeros(vec![5, 2]), 1),
        Err(Error::Dimension { .. })
    ));
    let dup = Tensor::new(vec![4, 1], vec![0.5, 0.5, 1.0, -2.0]).unwrap();
    assert!(kl_knn(&dup, &gaussian(50, 0.0, 5), 1).unwrap().is_finite());
}

fn identity_model(d: usize) -> Model {
    Model::new(ModelSpec {
        flow: FlowConfig {
            n_layers: 0,
            data_dim: d,
            context_features: 0,
            base_hidden: 0,
            ..Default::default()
        },
        encoder: None,
        window: WindowSpec {
            r: 0,
            ..Default::default()
        },
        obs_norm: Standardizer::identity(0),
        target_norm: Standardizer::identity(d),
    })
    .unwrap()
}

#[test]
fn mean_nll_examples() {
    let model = identity_model(1);
    let pairs = vec![(vec![], vec![0.0]); 3];
    let r = mean_nll(&model, &pairs, &NllOptions { kde_samples: 0, seed: 0 }).unwrap();
    assert!((r.total - 0.5 * (2.0 * std::f64::consts::PI).ln()).abs() < 1e-12);

    // stretching the target scale by c lowers every density by log c
    let mut wide = identity_model(1);
    wide.spec.target_norm.std = vec![3.0];
    let r3 = mean_nll(&wide, &pairs, &NllOptions { kde_samples: 0, seed: 0 }).unwrap();
    assert!((r3.total - r.total - 3f64.ln()).abs() < 1e-12);
}

#[test]
fn kde_marginals_of_a_product_density_sum_to_the_joint() {
    let model = identity_model(2);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let dist = Normal::new(0.0, 1.0).unwrap();
    let pairs: Vec<_> = (0..40)
        .map(|_| (vec![], vec![dist.sample(&mut rng), dist.sample(&mut rng)]))
        .collect();
    let r = mean_nll(&model, &pairs, &NllOptions { kde_samples: 4000, seed: 7 }).unwrap();
    assert_eq!(r.per_dim.len(), 2);
    assert!((r.per_dim.iter().sum::<f64>() - r.total).abs() < 0.1, "{r:?}");
}

#[test]
fn silverman_bandwidth_of_a_known_sample() {
    let pts: Vec<f64> = (0..100).map(|i| i as f64 / 99.0).collect();
    let h = silverman_bandwidth(&pts);
    let sd = (pts.iter().map(|x| (x - 0.5f64).powi(2)).sum::<f64>() / 99.0).sqrt();
    assert!((h - 0.9 * sd.min(0.5 / 1.34) * 100f64.powf(-0.2)).abs() < 1e-12);
    let kde = Kde1d::new(vec![0.0]);
    assert!(kde.log_density(0.0).is_finite());
}

fn sir_model(direction: Direction, include_params: bool) -> (Model, Vec<flowfilter::dynamics::Trajectory>) {
    let trajs = if include_params {
        sir_ensemble(&SirParams::default(), (0.02, 0.04), (0.005, 0.025), 4, SirState::default(), 60, 8).unwrap()
    } else {
        vec![sir_simulate(&SirParams::default(), SirState::default(), 60, 8).unwrap()]
    };
    let spec = WindowSpec {
        r: 5,
        direction,
        include_params,
        context_noise_sigma: 0.0,
        ..Default::default()
    };
    let data = make_windows(&trajs, &spec, None).unwrap();
    let enc = EncoderConfig {
        kind: EncoderKind::Mlp,
        mlp_hidden: 8,
        ..Default::default()
    };
    let flow = FlowConfig {
        n_layers: 2,
        ..Default::default()
    };
    (Model::for_dataset(&data, &flow, &enc).unwrap(), trajs)
}

#[test]
fn estimate_report_bookkeeping_and_determinism() {
    let (model, trajs) = sir_model(Direction::Forward, false);
    let ctx = trajs[0].observations[10..15].to_vec();
    let opts = EstimateOptions {
        n_samples: 1000,
        seed: 9,
        ..Default::default()
    };
    let a = estimate_state(&model, &ctx, &opts).unwrap();
    assert_eq!(a.samples.len(), 1000);
    for j in 0..3 {
        let m = a.samples.iter().map(|s| s[j]).sum::<f64>() / 1000.0;
        assert!((m - a.mean[j]).abs() < 1e-12);
    }
    let b = estimate_state(&model, &ctx, &opts).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.summary_json().unwrap(), b.summary_json().unwrap());
    assert!(a.contours.is_empty());
    assert!(matches!(
        estimate_state(&model, &ctx[..4], &opts),
        Err(Error::Dimension { .. })
    ));
}

#[test]
fn contours_accompany_planar_estimates() {
    let model = identity_model(2);
    let r = estimate_state(&model, &[], &EstimateOptions::default()).unwrap();
    assert_eq!(r.contours.len(), 2);
    let p = r.contours[1].points[17];
    assert!(((p[0] * p[0] + p[1] * p[1]).sqrt() - 2.0).abs() < 1e-9);
    assert!(String::from_utf8(r.contours_csv().unwrap()).unwrap().starts_with("level,point,x,y\n"));
}

#[test]
fn single_step_rollout_is_an_estimate() {
    let (model, trajs) = sir_model(Direction::Forward, false);
    let ctx = trajs[0].observations[20..25].to_vec();
    let cfg = RolloutConfig {
        n_steps: 1,
        n_samples: 200,
        ..Default::default()
    };
    let steps = rollout(&model, &ctx, &cfg, 11).unwrap();
    let est = estimate_state(
        &model,
        &ctx,
        &EstimateOptions {
            n_samples: 200,
            seed: 11,
            contour_levels: vec![],
        },
    )
    .unwrap();
    assert_eq!(steps.len(), 1);
    assert_eq!(steps[0].report.samples, est.samples);
    assert_eq!(steps[0].report.mean, est.mean);
}

#[test]
fn rollout_window_shifts() {
    for direction in [Direction::Forward, Direction::Backward] {
        let (model, trajs) = sir_model(direction, false);
        let obs = &trajs[0].observations;
        let ctx: Vec<Vec<f64>> = match direction {
            Direction::Forward => obs[30..35].to_vec(),
            Direction::Backward => (0..5).map(|j| obs[40 - j].clone()).collect(),
        };
        let cfg = RolloutConfig {
            direction,
            n_steps: 4,
            n_samples: 50,
            ..Default::default()
        };
        let steps = rollout(&model, &ctx, &cfg, 12).unwrap();
        let mut expect = ctx[1..].to_vec();
        expect.push(steps[0].fed_back.clone());
        assert_eq!(steps[1].context, expect);
        assert!(steps.iter().all(|s| s.context.len() == 5));
        assert_eq!(steps[0].fed_back, steps[0].report.mean);
        let bands = String::from_utf8(rollout_bands_csv(&steps).unwrap()).unwrap();
        assert!(bands.starts_with("step,dim,mean,lo2sigma,hi2sigma\n"));
        assert_eq!(bands.lines().count(), 1 + 4 * 3);
    }
    let (model, trajs) = sir_model(Direction::Forward, false);
    let cfg = RolloutConfig {
        direction: Direction::Backward,
        ..Default::default()
    };
    assert!(rollout(&model, &trajs[0].observations[..5], &cfg, 0).is_err());
}

#[test]
fn joint_estimation_requires_parameter_targets() {
    let (plain, trajs) = sir_model(Direction::Forward, false);
    let ctx = trajs[0].observations[..5].to_vec();
    assert!(matches!(
        joint_state_param_estimate(&plain, &ctx, &EstimateOptions::default(), SirState::default(), 10),
        Err(Error::Dimension { .. })
    ));
    let (joint, trajs) = sir_model(Direction::Forward, true);
    let ctx = trajs[0].observations[..5].to_vec();
    let opts = EstimateOptions {
        n_samples: 300,
        ..Default::default()
    };
    let r = joint_state_param_estimate(&joint, &ctx, &opts, SirState::default(), 100).unwrap();
    assert_eq!(r.report.dim(), 5);
    assert_eq!(r.overlay.len(), 100);
    assert!(r.overlay.iter().all(|s| (s.iter().sum::<f64>() - 1.0).abs() < 1e-9));
}

#[test]
fn mape_examples() {
    let a = [1.0, 2.0, -4.0];
    assert_eq!(mape(&a, &a).unwrap(), 0.0);
    let p: Vec<f64> = a.iter().map(|v| 1.1 * v).collect();
    assert!((mape(&p, &a).unwrap() - 10.0).abs() < 1e-12);
    assert!((mape(&[3.0], &[2.0]).unwrap() - 50.0).abs() < 1e-12);
    match mape(&[1.0, 1.0, 1.0], &[1.0, 0.0, 1e-12]) {
        Err(Error::ZeroDenominator { indices }) => assert_eq!(indices, vec![1, 2]),
        other => panic!("{other:?}"),
    }
    assert!(matches!(mape(&[1.0], &[1.0, 2.0]), Err(Error::Dimension { .. })));
}
