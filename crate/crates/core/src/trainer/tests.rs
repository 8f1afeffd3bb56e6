use super::*;

fn tiny(variant: Variant) -> TrainConfig {
    TrainConfig {
        variant,
        n: 2,
        m: 4,
        latent_dim: 4,
        hidden_dim: 6,
        image_size: 16,
        generator_width: 2,
        discriminator_width: 2,
        encoder_width: 2,
        gamma_d: 1e-3,
        gamma_g: 2e-3,
        gamma_g_gan: 2e-3,
        gamma_g_vae: 1e-3,
        gamma_e: 1e-3,
        alpha_weight: variant.has_alpha_loss().then_some(0.05),
        iterations: 4,
        seed: 7,
        checkpoint_every: 0,
        ..TrainConfig::default()
    }
}

fn dataset(count: usize, size: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(&[count, 3, size, size], |_| rng.random_range(0.0..1.0))
}

fn fingerprints(bundle: &ModelBundle) -> Vec<(ParamGroup, u64)> {
    bundle
        .groups()
        .into_iter()
        .map(|g| (g, bundle.params(g).fingerprint()))
        .collect()
}

fn changed(before: &[(ParamGroup, u64)], after: &[(ParamGroup, u64)]) -> Vec<ParamGroup> {
    before
        .iter()
        .zip(after)
        .filter(|(a, b)| a.1 != b.1)
        .map(|(a, _)| a.0)
        .collect()
}

/// The noise set the next step will draw.
fn next_noise(trainer: &Trainer, batch: usize) -> Vec<Tensor> {
    let mut rng = trainer.state.rng.clone();
    trainer.bundle.sample_latents(batch, &mut rng).unwrap()
}

#[test]
fn config_toml_round_trip_and_validation() {
    let cfg = tiny(Variant::CganA);
    assert_eq!(TrainConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);

    let err = TrainConfig::from_toml("n = 2\nbogus = 1\n").unwrap_err();
    assert!(matches!(err, CganError::Config(ref m) if m.contains("bogus")), "{err}");
    assert!(TrainConfig::from_toml("variant = \"cgan\"\nalpha_weight = 0.1\n").is_err());
    assert!(TrainConfig::from_toml("gamma_d = -0.1\n").is_err());
    assert!(TrainConfig::from_toml("m = 0\n").is_err());
    assert!(TrainConfig::from_toml("variant = \"cgan-a\"\nimage_size = 16\nalpha_u = 300.0\n").is_err());

    let a = TrainConfig::from_toml("variant = \"cgan-a\"\nimage_size = 32\n").unwrap();
    let alpha = a.alpha().unwrap().unwrap();
    assert_eq!(alpha.u, 0.4 * 1024.0);
    assert_eq!(alpha.weight, TrainConfig::DEFAULT_ALPHA_WEIGHT);
    assert!(TrainConfig::default().alpha().unwrap().is_none());
}

#[test]
fn zero_learning_rates_leave_parameters_unchanged() {
    for variant in [Variant::CganA, Variant::CganVaeA] {
        let cfg = TrainConfig {
            gamma_d: 0.0,
            gamma_g: 0.0,
            gamma_g_gan: 0.0,
            gamma_g_vae: 0.0,
            gamma_e: 0.0,
            ..tiny(variant)
        };
        let mut t = Trainer::new(cfg).unwrap();
        let before = fingerprints(&t.bundle);
        let report = t.step(&dataset(8, 16, 1)).unwrap();
        assert_eq!(fingerprints(&t.bundle), before, "{variant}");
        assert!(report.non_finite_term().is_none());
        assert!(report.gan < 0.0);
        assert_eq!(t.iteration(), 1);
    }
}

#[test]
fn fresh_runs_are_bitwise_identical() {
    for variant in [Variant::Cgan, Variant::CganVaeA] {
        let data = dataset(8, 16, 2);
        let run = || {
            let mut t = Trainer::new(tiny(variant)).unwrap();
            let reports: Vec<_> = (0..2).map(|_| t.step(&data).unwrap()).collect();
            (reports, fingerprints(&t.bundle))
        };
        let (r1, f1) = run();
        let (r2, f2) = run();
        assert_eq!(r1, r2);
        assert_eq!(f1, f2);
    }
}

#[test]
fn discriminator_step_increases_the_adversarial_value() {
    let cfg = TrainConfig {
        gamma_g: 0.0,
        gamma_d: 1e-3,
        ..tiny(Variant::Cgan)
    };
    let mut t = Trainer::new(cfg).unwrap();
    let batch = dataset(4, 16, 3);
    let z = next_noise(&t, 4);
    let before = gan_value(&t.bundle, &batch, &z).unwrap();
    let report = t.step_on_batch(&batch).unwrap();
    assert!((report.gan - before).abs() < 1e-12);
    let after = gan_value(&t.bundle, &batch, &z).unwrap();
    assert!(after > before, "{before} -> {after}");
}

#[test]
fn each_sub_step_touches_only_its_groups() {
    let cfg = tiny(Variant::CganVaeA);
    let alpha = cfg.alpha().unwrap();
    let mut t = Trainer::new(cfg.clone()).unwrap();
    let batch = dataset(4, 16, 4);
    let z = t.bundle.sample_latents(4, &mut t.state.rng).unwrap();
    let eps: Vec<Tensor> = (0..cfg.n).map(|_| standard_normal(&[4, cfg.latent_dim], &mut t.state.rng)).collect();
    let mut report = LossReport::default();

    let before = fingerprints(&t.bundle);
    discriminator_step(&cfg, alpha.as_ref(), &mut t.bundle, &mut t.state, &batch, &z, &mut report).unwrap();
    let after = fingerprints(&t.bundle);
    assert_eq!(changed(&before, &after), vec![ParamGroup::Discriminator]);

    let weights = GeneratorWeights::combined(cfg.gamma_g_gan, cfg.gamma_g_vae);
    for i in 0..cfg.n {
        let groups = [ParamGroup::Conditioner, ParamGroup::Generator(i)];
        let before = fingerprints(&t.bundle);
        generator_update(&cfg, alpha.as_ref(), weights, &mut t.bundle, &mut t.state, &batch, &z, Some(&eps), &groups, 1)
            .unwrap();
        let after = fingerprints(&t.bundle);
        assert_eq!(changed(&before, &after), groups.to_vec());
    }

    let before = fingerprints(&t.bundle);
    encoder_loop(&cfg, &mut t.bundle, &mut t.state, &batch, &eps, &mut report).unwrap();
    let after = fingerprints(&t.bundle);
    assert_eq!(changed(&before, &after), vec![ParamGroup::Encoder(0), ParamGroup::Encoder(1)]);
}

fn flat(bundle: &ModelBundle, g: ParamGroup) -> Vec<f64> {
    bundle.params(g).tensors().iter().flat_map(|t| t.data().to_vec()).collect()
}

/// Runs one update of `group` at a tiny rate and compares the observed change
/// of the adversarial value with its first-order prediction.
fn first_order_check(group: ParamGroup) {
    let cfg = tiny(Variant::Cgan);
    let mut t = Trainer::new(cfg.clone()).unwrap();
    let batch = dataset(4, 16, 5);
    let z = t.bundle.sample_latents(4, &mut t.state.rng).unwrap();

    let mut tape = Tape::new();
    let bound = t.bundle.bind(&mut tape, &[group]);
    let zs = constants(&mut tape, &z);
    let gen = t.bundle.generate_graph(&mut tape, &bound, &zs);
    let xr = tape.constant(batch.clone());
    let dr = t.bundle.discriminate_graph(&mut tape, &bound, xr);
    let df = t.bundle.discriminate_graph(&mut tape, &bound, gen.final_image());
    let value = losses::graph::gan_value(&mut tape, dr.prob, df.prob);
    let before = tape.value(value).data()[0];
    let mut grads = tape.backward(value);
    let g = collect_grads(&t.bundle, &bound, &mut grads, &[group]);

    let theta0 = flat(&t.bundle, group);
    let direction = match group {
        ParamGroup::Discriminator => Direction::Ascend,
        _ => Direction::Descend,
    };
    t.state.optim.update(group, t.bundle.params_mut(group), &g[0], 1e-6, 1.0, direction).unwrap();
    let theta1 = flat(&t.bundle, group);
    let grad: Vec<f64> = g[0].iter().flat_map(|t| t.data().to_vec()).collect();
    let predicted: f64 = grad.iter().zip(theta0.iter().zip(&theta1)).map(|(g, (a, b))| g * (b - a)).sum();
    let observed = gan_value(&t.bundle, &batch, &z).unwrap() - before;

    match direction {
        Direction::Ascend => assert!(observed > 0.0, "{group}: {observed}"),
        Direction::Descend => assert!(observed < 0.0, "{group}: {observed}"),
    }
    assert!(
        (observed - predicted).abs() <= 0.1 * predicted.abs(),
        "{group}: observed {observed:e}, predicted {predicted:e}"
    );
}

#[test]
fn update_directions_match_first_order_prediction() {
    first_order_check(ParamGroup::Discriminator);
    first_order_check(ParamGroup::Generator(0));
    first_order_check(ParamGroup::Generator(1));
}

#[test]
fn zero_encoder_rate_freezes_encoders() {
    let cfg = TrainConfig {
        gamma_e: 0.0,
        ..tiny(Variant::CganVae)
    };
    let mut t = Trainer::new(cfg).unwrap();
    let enc = |t: &Trainer| (0..2).map(|i| t.bundle.params(ParamGroup::Encoder(i)).fingerprint()).collect::<Vec<_>>();
    let before = enc(&t);
    let gen_before = t.bundle.params(ParamGroup::Generator(0)).fingerprint();
    t.step(&dataset(8, 16, 6)).unwrap();
    assert_eq!(enc(&t), before);
    assert_ne!(t.bundle.params(ParamGroup::Generator(0)).fingerprint(), gen_before);
}

#[test]
fn variational_step_without_vae_weight_matches_adversarial_step() {
    let base = tiny(Variant::Cgan);
    let vae = TrainConfig {
        variant: Variant::CganVae,
        gamma_g_gan: base.gamma_g,
        gamma_g_vae: 0.0,
        ..base.clone()
    };
    let batch = dataset(4, 16, 8);
    let mut a = Trainer::new(base).unwrap();
    let mut b = Trainer::new(vae).unwrap();
    let shared = [ParamGroup::Conditioner, ParamGroup::Generator(0), ParamGroup::Generator(1), ParamGroup::Discriminator];
    for &g in &shared {
        assert_eq!(a.bundle.params(g), b.bundle.params(g));
    }
    let ra = a.step_on_batch(&batch).unwrap();
    let rb = b.step_on_batch(&batch).unwrap();
    for &g in &shared {
        assert_eq!(a.bundle.params(g), b.bundle.params(g), "{g}");
    }
    assert_eq!(ra.gan, rb.gan);
    assert_eq!(ra.gan_generator, rb.gan_generator);
}

#[test]
fn pure_autoencoding_lowers_the_kl_term() {
    let cfg = TrainConfig {
        gamma_g_gan: 0.0,
        gamma_g_vae: 1e-3,
        gamma_e: 2e-3,
        iterations: 200,
        ..tiny(Variant::CganVae)
    };
    let mut t = Trainer::new(cfg).unwrap();
    // Start the encoders far from the prior so the KL term has room to fall.
    for i in 0..2 {
        let params = t.bundle.params_mut(ParamGroup::Encoder(i));
        for (name, tensor) in params.names().to_vec().iter().zip(params.tensors_mut()) {
            if name.starts_with("head") {
                *tensor = tensor.map(|v| 50.0 * v + 0.5);
            }
        }
    }
    t.fit(&dataset(1, 16, 9), &mut ()).unwrap();
    let h = t.history();
    assert_eq!(h.len(), 200);
    let first = h[0].vae_kl;
    let last = h[199].vae_kl;
    assert!(last < first, "kl {first} -> {last}");
}

#[test]
fn resumed_training_matches_uninterrupted_training() {
    for variant in [Variant::CganA, Variant::CganVaeA] {
        let data = dataset(10, 16, 10);
        let cfg = TrainConfig {
            iterations: 6,
            ..tiny(variant)
        };
        let mut full = Trainer::new(cfg.clone()).unwrap();
        full.fit(&data, &mut ()).unwrap();

        let mut first = Trainer::new(TrainConfig { iterations: 3, ..cfg.clone() }).unwrap();
        first.fit(&data, &mut ()).unwrap();
        let bytes = first.to_checkpoint().unwrap().to_bytes().unwrap();
        let mut resumed = Trainer::from_checkpoint(&Checkpoint::from_bytes(&bytes).unwrap()).unwrap();
        resumed.set_iterations(6);
        resumed.fit(&data, &mut ()).unwrap();

        assert_eq!(resumed.history(), full.history(), "{variant}");
        assert_eq!(fingerprints(&resumed.bundle), fingerprints(&full.bundle));
        assert_eq!(resumed.state.optim, full.state.optim);
    }
}

#[test]
fn zero_iterations_returns_the_initial_model() {
    let cfg = TrainConfig {
        iterations: 0,
        ..tiny(Variant::Cgan)
    };
    let (bundle, state) = fit(cfg.clone(), &dataset(2, 16, 11), &mut ()).unwrap();
    let fresh = ModelBundle::new(cfg.architecture(), cfg.seed).unwrap();
    assert_eq!(fingerprints(&bundle), fingerprints(&fresh));
    assert_eq!(state.iteration, 0);
    assert!(matches!(
        fit(cfg, &Tensor::zeros(&[0, 3, 16, 16]), &mut ()),
        Err(CganError::Argument(_))
    ));
}

#[test]
fn non_finite_loss_aborts_with_the_term_named() {
    let mut t = Trainer::new(tiny(Variant::Cgan)).unwrap();
    for v in t.bundle.params_mut(ParamGroup::Discriminator).tensors_mut()[0].data_mut() {
        *v = f64::NAN;
    }
    let before = fingerprints(&t.bundle);
    let err = t.step(&dataset(4, 16, 12)).unwrap_err();
    assert!(matches!(err, CganError::NonFinite { ref term, iteration: 1 } if term == "gan"), "{err}");
    assert_eq!(fingerprints(&t.bundle), before);
    assert_eq!(t.iteration(), 0);
}

#[test]
fn variant_and_batch_checks() {
    let cfg = tiny(Variant::Cgan);
    let mut t = Trainer::new(cfg.clone()).unwrap();
    let (bundle, state) = (&mut t.bundle, &mut t.state);
    assert!(matches!(
        train_step_cgan_vae(&cfg, bundle, state, &dataset(4, 16, 0)),
        Err(CganError::Config(_))
    ));
    assert!(matches!(
        train_step_cgan(&cfg, bundle, state, &dataset(4, 32, 0)),
        Err(CganError::Dimension(_))
    ));
}

#[test]
fn single_backward_mode_trains() {
    let cfg = TrainConfig {
        single_backward: true,
        ..tiny(Variant::CganVaeA)
    };
    let mut a = Trainer::new(cfg.clone()).unwrap();
    let mut b = Trainer::new(TrainConfig { single_backward: false, ..cfg }).unwrap();
    let data = dataset(8, 16, 13);
    let ra = a.step(&data).unwrap();
    let rb = b.step(&data).unwrap();
    assert!(ra.non_finite_term().is_none());
    assert_eq!(ra.gan, rb.gan);
    assert_ne!(fingerprints(&a.bundle), fingerprints(&b.bundle));
}

struct Recorder {
    reports: Vec<u64>,
    checkpoints: Vec<u64>,
}

impl TrainObserver for Recorder {
    fn on_report(&mut self, report: &LossReport) -> Result<()> {
        self.reports.push(report.iteration);
        Ok(())
    }

    fn on_checkpoint(&mut self, trainer: &Trainer) -> Result<()> {
        self.checkpoints.push(trainer.iteration());
        Ok(())
    }
}

#[test]
fn observer_schedule() {
    let cfg = TrainConfig {
        iterations: 7,
        checkpoint_every: 3,
        ..tiny(Variant::Cgan)
    };
    let mut rec = Recorder {
        reports: Vec::new(),
        checkpoints: Vec::new(),
    };
    fit(cfg, &dataset(3, 16, 14), &mut rec).unwrap();
    assert_eq!(rec.reports, (1..=7).collect::<Vec<_>>());
    assert_eq!(rec.checkpoints, vec![3, 6, 7]);
}
