use partfield::condition::{ConditionConfig, LiftedSources, Observation, Toggles};
use partfield::geometry::{Point3, RigidTransform};
use partfield::linalg::Matrix;
use partfield::policy::diffusion::{draw_noise, PlantedNoiseOracle, ZeroPredictor};
use partfield::policy::*;
use partfield::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn tiny_config(seed: u64) -> PolicyConfig {
    PolicyConfig {
        condition: ConditionConfig {
            feature_dim: 2,
            robot_dim: 2,
            point_hidden: 16,
            scene_dim: 8,
            robot_hidden: 16,
            robot_embed_dim: 8,
            part_dim: 8,
            attn_dim: 8,
            heads: 2,
            ..Default::default()
        },
        denoiser: DenoiserConfig {
            horizon: 4,
            action_dim: 2,
            channels: 32,
            step_embed_dim: 16,
            zero_init_output: false,
        },
        diffusion: DiffusionConfig {
            steps: 20,
            ..Default::default()
        },
        toggles: Toggles::ALL,
        init_seed: seed,
    }
}

fn observation(seed: u64) -> Observation {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pts: Vec<Point3> = (0..12).map(|_| Point3::new(rng.random(), rng.random(), rng.random())).collect();
    let a = Matrix::from_fn(12, 2, |_, _| rng.random_range(-1.0..1.0));
    let b = Matrix::from_fn(12, 2, |_, _| rng.random_range(-1.0..1.0));
    Observation {
        scene: LiftedSources::new(pts, a, b).unwrap(),
        part_indices: vec![(0..6).collect(), (6..12).collect()],
        part_pose: RigidTransform::planar(0.0, 0.0, rng.random_range(-3.0..3.0)),
        robot: vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)],
    }
}

fn trajectory() -> Matrix {
    Matrix::from_fn(8, 4, |i, j| ((i * 4 + j) as f64 * 0.37).sin() * 0.8)
}

fn exact() -> SamplerOptions {
    SamplerOptions {
        deterministic: true,
        clip_x0: false,
        output_bound: None,
    }
}

#[test]
fn schedule_matches_direct_product() {
    let s = make_schedule(100, 1e-4, 2e-2).unwrap();
    let mut prod = 1.0;
    for t in 1..=100 {
        let beta = 1e-4 + (2e-2 - 1e-4) * (t - 1) as f64 / 99.0;
        assert!((s.beta(t) - beta).abs() < 1e-15);
        prod *= 1.0 - beta;
        assert!((s.alpha_bar(t) - prod).abs() < 1e-14);
    }
    assert!(s.betas().windows(2).all(|w| w[0] <= w[1]));
    assert_eq!(make_schedule(1, 0.3, 0.5).unwrap().betas(), &[0.3]);
    assert!(matches!(make_schedule(10, 0.2, 0.1), Err(Error::InvalidArgument(_))));
    assert!(matches!(make_schedule(0, 0.1, 0.2), Err(Error::InvalidArgument(_))));
}

#[test]
fn forward_noise_has_the_expected_moments() {
    let s = make_schedule(100, 1e-4, 2e-2).unwrap();
    let a0 = Matrix::row_vector(&[0.7]);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for t in [1, 30, 100] {
        let n = 100_000;
        let xs: Vec<f64> = (0..n)
            .map(|_| {
                let eps = Matrix::row_vector(&[StandardNormal.sample(&mut rng)]);
                add_noise(&a0, t, &eps, &s).unwrap()[(0, 0)]
            })
            .collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let want = 1.0 - s.alpha_bar(t);
        assert!((var - want).abs() <= 0.05 * want, "t={t}: var {var} vs {want}");
        assert!((mean - 0.7 * s.alpha_bar(t).sqrt()).abs() < 5.0 * (want / n as f64).sqrt() + 1e-12);
    }
}

#[test]
fn zero_predictor_loss_is_the_noise_energy() {
    let s = make_schedule(100, 1e-4, 2e-2).unwrap();
    let a0 = trajectory();
    let batch: Vec<(Matrix, ConditionBundle)> = (0..100_000)
        .map(|_| (a0.clone(), ConditionBundle::global_only(vec![])))
        .collect();
    let loss = training_loss(&ZeroPredictor, &batch, &s, 1).unwrap();
    let want = 32.0;
    assert!((loss - want).abs() <= 0.03 * want, "loss {loss}");
    let oracle = PlantedNoiseOracle { a0: &a0, schedule: &s };
    assert!(training_loss(&oracle, &batch[..100], &s, 2).unwrap() < 1e-18);
}

#[test]
fn planted_noise_chain_recovers_the_clean_trajectory() {
    let s = make_schedule(100, 1e-4, 2e-2).unwrap();
    let a0 = trajectory();
    let oracle = PlantedNoiseOracle { a0: &a0, schedule: &s };
    for seed in 0..5 {
        let out = sample(&oracle, &ConditionBundle::global_only(vec![]), &s, (8, 4), seed, exact()).unwrap();
        assert!(out.max_abs_diff(&a0) < 1e-5);
    }
}

/// The chain written out directly: `a_T` from the seed, then per step the
/// posterior mean with zero predicted noise plus `σ_t z` for `t > 1`.
fn zero_predictor_reference(s: &NoiseSchedule, shape: (usize, usize), seed: u64) -> Matrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let draw = |rng: &mut ChaCha8Rng| -> Vec<f64> { (0..shape.0 * shape.1).map(|_| StandardNormal.sample(rng)).collect() };
    let mut a = draw(&mut rng);
    for t in (1..=s.num_steps()).rev() {
        let z = (t > 1).then(|| draw(&mut rng));
        let ab_prev = if t == 1 { 1.0 } else { s.alpha_bar(t - 1) };
        let sigma = (s.beta(t) * (1.0 - ab_prev) / (1.0 - s.alpha_bar(t))).sqrt();
        for (i, x) in a.iter_mut().enumerate() {
            *x /= s.alpha(t).sqrt();
            if let Some(z) = &z {
                *x += sigma * z[i];
            }
        }
    }
    Matrix::new(shape.0, shape.1, a)
}

#[test]
fn zero_predictor_sampling_matches_a_reference_chain() {
    let s = make_schedule(30, 1e-3, 5e-2).unwrap();
    let opts = SamplerOptions { deterministic: false, clip_x0: false, output_bound: None };
    for seed in [0, 9, 123] {
        let got = sample(&ZeroPredictor, &ConditionBundle::global_only(vec![]), &s, (6, 3), seed, opts).unwrap();
        assert!(got.max_abs_diff(&zero_predictor_reference(&s, (6, 3), seed)) < 1e-12);
    }
}

#[test]
fn denoiser_rejects_bad_shapes_and_reacts_to_the_condition() {
    let policy = Policy::new(tiny_config(1)).unwrap();
    let c = policy.condition(&observation(3)).unwrap();
    let a = Matrix::from_fn(4, 2, |i, j| (i + j) as f64 * 0.1);
    let out = policy.denoiser.denoiser_forward(&policy.store, &a, 4, &c).unwrap();
    assert_eq!(out.shape(), (4, 2));
    let doubled = ConditionBundle {
        global: c.global.iter().map(|x| 2.0 * x).collect(),
        parts: c.parts.clone(),
    };
    let out2 = policy.denoiser.denoiser_forward(&policy.store, &a, 4, &doubled).unwrap();
    assert!(out.max_abs_diff(&out2) > 1e-8);
    assert!(matches!(
        policy.denoiser.denoiser_forward(&policy.store, &Matrix::zeros(3, 2), 4, &c),
        Err(Error::InvalidArgument(_))
    ));
    let short = ConditionBundle { global: vec![0.0; 3], parts: None };
    assert!(policy.denoiser.denoiser_forward(&policy.store, &a, 4, &short).is_err());
}

#[test]
fn checkpoints_round_trip_and_reject_mismatches() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("p.pfck");
    let mut policy = Policy::new(tiny_config(4)).unwrap();
    policy.normalizer = ActionNormalizer { min: vec![-0.5, 0.0], max: vec![0.5, 2.0] };
    save_checkpoint(&policy, &path).unwrap();
    let back = load_checkpoint(&path, Some(&policy.config)).unwrap();
    assert_eq!(back.normalizer, policy.normalizer);
    for id in policy.store.ids() {
        assert_eq!(back.store.get(id), policy.store.get(id));
    }
    let obs = observation(5);
    assert_eq!(back.act(&obs, 3).unwrap(), policy.act(&obs, 3).unwrap());

    let other = PolicyConfig { init_seed: 99, ..policy.config.clone() };
    assert!(matches!(load_checkpoint(&path, Some(&other)), Err(Error::Load(_))));
    let mut bytes = std::fs::read(&path).unwrap();
    bytes.truncate(bytes.len() - 16);
    std::fs::write(&path, &bytes).unwrap();
    assert!(load_checkpoint(&path, None).is_err());
    assert!(load_checkpoint(&dir.path().join("missing"), None).unwrap_err().is_io());
}

#[test]
fn single_sample_training_converges() {
    // A coarser schedule keeps the smallest noise scale near 0.03, so the
    // required output gain stays moderate for this small network.
    let mut pc = tiny_config(7);
    pc.diffusion.beta_start = 1e-3;
    pc.diffusion.beta_end = 0.1;
    let mut policy = Policy::new(pc).unwrap();
    let data = vec![(observation(1), Matrix::from_fn(4, 2, |i, j| 0.1 * i as f64 - 0.3 * j as f64))];
    let cfg = TrainConfig { iterations: 9000, batch_size: 16, lr: 4e-3, warmup: 100, log_every: 500, ..Default::default() };
    let report = train(&mut policy, &data, &cfg, |_| Ok(())).unwrap();
    assert!(report.final_loss < 1e-3, "final loss {}", report.final_loss);
}

#[test]
fn two_conditions_map_to_their_own_trajectories() {
    let mut policy = Policy::new(tiny_config(8)).unwrap();
    let modes = [
        (observation(10), Matrix::from_rows(&[[0.3, -0.2]; 4])),
        (observation(11), Matrix::from_rows(&[[-0.4, 0.6]; 4])),
    ];
    let cfg = TrainConfig { iterations: 1500, batch_size: 16, lr: 2e-3, warmup: 50, log_every: 100, ..Default::default() };
    train(&mut policy, &modes, &cfg, |_| Ok(())).unwrap();
    for (obs, want) in &modes {
        for seed in 0..5 {
            let got = policy.act(obs, seed).unwrap();
            assert!(got.max_abs_diff(want) <= 0.05, "seed {seed}: {got:?}");
        }
    }
}

#[test]
fn training_logs_and_is_deterministic() {
    let data: Vec<_> = (0..3).map(|i| (observation(20 + i), Matrix::filled(4, 2, i as f64))).collect();
    let cfg = TrainConfig { iterations: 20, batch_size: 4, log_every: 5, ..Default::default() };
    let run = || {
        let mut p = Policy::new(tiny_config(2)).unwrap();
        let mut logs = Vec::new();
        train(&mut p, &data, &cfg, |r| {
            logs.push(r.clone());
            Ok(())
        })
        .unwrap();
        (p, logs)
    };
    let (a, la) = run();
    let (b, lb) = run();
    assert_eq!(la, lb);
    assert_eq!(la.iter().map(|r| r.step).collect::<Vec<_>>(), vec![5, 10, 15, 20]);
    for id in a.store.ids() {
        assert_eq!(a.store.get(id), b.store.get(id));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let d = draw_noise((4, 2), &a.schedule, &mut rng);
    assert!((1..=20).contains(&d.t));
}
