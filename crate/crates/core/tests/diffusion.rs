use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use volrecon_core::acquisition::{project, AcquisitionConfig};
use volrecon_core::conditioning::ConditionConfig;
use volrecon_core::diffusion::*;
use volrecon_core::encoding::EncodingConfig;
use volrecon_core::inr::{InrArch, InrField, PriorMode, PriorOptions};
use volrecon_core::volume::{Plane, Volume};
use volrecon_grad::{Graph, ParamStore};

fn micro(mode: PriorMode, gamma: f64) -> DiffusionConfig {
    DiffusionConfig {
        schedule: ScheduleConfig { train_steps: 50, inference_steps: 10, ..Default::default() },
        unet: UNetConfig { base_channels: 4, channel_mult: vec![1, 2], time_dim: 8 },
        condition: ConditionConfig {
            c_img: 4,
            c_pos: 4,
            img_channels: [2, 2, 4],
            pos_encoding: EncodingConfig::Gaussian { features: 8, sigma: 1.0 },
            prior_block: false,
        },
        prior: PriorOptions { mode, centered_offsets: false },
        guidance: GuidanceConfig { gamma, ..Default::default() },
        ..Default::default()
    }
}

fn tiny_inr(seed: u64) -> InrField<f32> {
    let arch = InrArch { encoding: EncodingConfig::Gaussian { features: 8, sigma: 1.0 }, hidden: vec![8] };
    InrField::new(&arch, seed).unwrap()
}

fn blob_volume() -> Volume {
    Volume::from_fn("blob", [8, 16, 16], |d, h, w| {
        let r2 = (h as f32 - 7.5).powi(2) + (w as f32 - 7.5).powi(2) + 4.0 * (d as f32 - 3.5).powi(2);
        (-r2 / 20.0).exp()
    })
    .unwrap()
}

fn perturb(store: &mut ParamStore<f64>, seed: u64, std: f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for id in store.ids().collect::<Vec<_>>() {
        for v in store.get_mut(id).data_mut() {
            *v += std * rng.sample::<f64, _>(StandardNormal);
        }
    }
}

fn batch(seed: u64, b: usize) -> TrainBatch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let plane = |rng: &mut ChaCha8Rng| Plane::new(16, 16, (0..256).map(|_| rng.gen::<f32>()).collect()).unwrap();
    TrainBatch {
        x0: (0..b).map(|_| plane(&mut rng)).collect(),
        projections: (0..b).map(|_| plane(&mut rng)).collect(),
        z: (0..b).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        priors: None,
        t: (0..b).map(|_| rng.gen_range(1..=50)).collect(),
        eps: (0..b * 256).map(|_| rng.sample(StandardNormal)).collect(),
        drop: (0..b).map(|i| i % 2 == 1).collect(),
    }
}

/// Central differences on every `stride`-th scalar against backprop.
fn worst_relative_error(model: &mut DiffusionModel<f64>, batch: &TrainBatch, stride: usize) -> f64 {
    let loss = |m: &DiffusionModel<f64>| {
        let mut g = Graph::new();
        let l = m.loss_graph(&mut g, true, batch, &PriorSource::None);
        (g.value(l).item(), g, l)
    };
    let (_, g, l) = loss(model);
    let analytic = g.backward(l).flat_for(&model.params);
    let h = 1e-6;
    let mut worst = 0.0f64;
    for i in (0..model.params.num_scalars()).step_by(stride) {
        let orig = model.params.scalar(i);
        model.params.set_scalar(i, orig + h);
        let fp = loss(model).0;
        model.params.set_scalar(i, orig - h);
        let fm = loss(model).0;
        model.params.set_scalar(i, orig);
        let numeric = (fp - fm) / (2.0 * h);
        let err = (numeric - analytic[i]).abs() / (numeric.abs() + analytic[i].abs()).max(1e-4);
        worst = worst.max(err);
    }
    worst
}

#[test]
fn denoiser_gradients_match_finite_differences() {
    for fusion in [FusionMode::Addition, FusionMode::CrossAttention] {
        let cfg = DiffusionConfig { fusion, ..micro(PriorMode::Off, 0.0) };
        let mut model = DiffusionModel::<f64>::new(&cfg, 11).unwrap();
        perturb(&mut model.params, 12, 0.05);
        let err = worst_relative_error(&mut model, &batch(13, 2), 7);
        assert!(err < 1e-3, "{fusion:?}: relative error {err}");
    }
}

#[test]
fn x0_target_gradients_match_finite_differences() {
    let mut cfg = micro(PriorMode::Off, 0.0);
    cfg.guidance.prediction_target = PredictionTarget::X0;
    let mut model = DiffusionModel::<f64>::new(&cfg, 21).unwrap();
    perturb(&mut model.params, 22, 0.05);
    let err = worst_relative_error(&mut model, &batch(23, 2), 11);
    assert!(err < 1e-3, "relative error {err}");
}

#[test]
fn frozen_inr_is_untouched_by_diffusion_training() {
    let truth = blob_volume();
    let stack = project(&truth, &AcquisitionConfig::new(2)).unwrap();
    let mut inr = tiny_inr(1);
    let before = inr.fingerprint();
    let mut model = DiffusionModel::<f32>::new(&micro(PriorMode::Neighboring, 0.2), 2).unwrap();
    let tc = DiffusionTrainConfig { epochs: 3, batch: 4, learning_rate: 1e-3, seed: 3, inr_regime: InrRegime::Freeze, ..Default::default() };
    train_diffusion(&mut model, Some(&mut inr), &truth, &stack, &tc, 1e-3).unwrap();
    assert_eq!(inr.fingerprint(), before);
}

#[test]
fn trainable_and_joint_regimes_update_the_inr() {
    let truth = blob_volume();
    let stack = project(&truth, &AcquisitionConfig::new(2)).unwrap();
    for regime in [InrRegime::Trainable, InrRegime::Joint] {
        let mut inr = tiny_inr(1);
        let before = inr.fingerprint();
        let mut model = DiffusionModel::<f32>::new(&micro(PriorMode::Neighboring, 0.2), 2).unwrap();
        let tc = DiffusionTrainConfig { epochs: 2, batch: 4, learning_rate: 1e-3, seed: 3, inr_regime: regime, ..Default::default() };
        let out = train_diffusion(&mut model, Some(&mut inr), &truth, &stack, &tc, 1e-3).unwrap();
        assert!(out.loss_history.iter().all(|l| l.is_finite()));
        assert_ne!(inr.fingerprint(), before, "{regime:?}");
    }
}

#[test]
fn prior_modes_require_an_inr() {
    let truth = blob_volume();
    let stack = project(&truth, &AcquisitionConfig::new(2)).unwrap();
    let mut model = DiffusionModel::<f32>::new(&micro(PriorMode::Neighboring, 0.1), 0).unwrap();
    let tc = DiffusionTrainConfig { epochs: 1, ..Default::default() };
    assert!(train_diffusion(&mut model, None, &truth, &stack, &tc, 1e-3).is_err());
    assert!(reconstruct_volume(&model, None, &stack, 8, 0, 4).is_err());
}

#[test]
fn reconstruction_is_seeded_per_slice() {
    let truth = blob_volume();
    let stack = project(&truth, &AcquisitionConfig::new(2)).unwrap();
    let inr = tiny_inr(4);
    let model = DiffusionModel::<f32>::new(&micro(PriorMode::Neighboring, 0.3), 5).unwrap();
    let a = reconstruct_volume(&model, Some(&inr), &stack, 8, 9, 3).unwrap();
    let b = reconstruct_volume(&model, Some(&inr), &stack, 8, 9, 8).unwrap();
    assert_eq!(a.data(), b.data());
    assert_eq!(a.dims(), [8, 16, 16]);
    let c = reconstruct_volume(&model, Some(&inr), &stack, 8, 10, 8).unwrap();
    assert_ne!(a.data(), c.data());
}

#[test]
fn condition_concat_mode_feeds_prior_to_encoder() {
    let truth = blob_volume();
    let stack = project(&truth, &AcquisitionConfig::new(2)).unwrap();
    let inr = tiny_inr(4);
    let model = DiffusionModel::<f32>::new(&micro(PriorMode::ConditionConcat, 0.0), 5).unwrap();
    assert_eq!(model.encoders.dim(), 12);
    let v = reconstruct_volume(&model, Some(&inr), &stack, 4, 1, 4).unwrap();
    assert!(v.data().iter().all(|x| (0.0..=1.0).contains(x)));
}

#[test]
fn monte_carlo_forward_moments() {
    let sched = NoiseSchedule::from_config(&ScheduleConfig::default()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x0 = Plane::filled(1, 1, 0.6);
    for t in [1, 250, 1000] {
        let n = 20_000;
        let samples: Vec<f64> = (0..n)
            .map(|_| {
                let eps = Plane::filled(1, 1, rng.sample(StandardNormal));
                forward_noise(&x0, t, &sched, &eps).unwrap().data[0] as f64
            })
            .collect();
        let mean = samples.iter().sum::<f64>() / n as f64;
        let var = samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let ab = sched.alpha_bar(t);
        assert!((mean - ab.sqrt() * 0.6).abs() < 0.03, "t={t} mean {mean}");
        assert!((var - (1.0 - ab)).abs() < 0.05 * (1.0 - ab).max(0.01) + 1e-4, "t={t} var {var}");
    }
}
