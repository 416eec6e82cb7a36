use humansense::autodiff::Tape;
use humansense::config::RunConfig;
use humansense::losses::{total_loss, LossConfig};
use humansense::network::{exclusive_branch, Branch, Model, NetworkConfig};
use humansense::skeleton::Taxonomy;
use humansense::syndata::*;
use humansense::trainer::*;
use humansense::Error;
use std::collections::HashMap;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn syn() -> SynConfig {
    SynConfig {
        height: 32,
        width: 32,
        taxonomy: Taxonomy::Coarse,
        ..SynConfig::default()
    }
}

fn net(syn: &SynConfig) -> NetworkConfig {
    let skel = syn.skeleton();
    NetworkConfig {
        joints: skel.num_joints(),
        parts: skel.num_parts(),
        joints3d: skel.num_joints(),
        init_gain: 6f64.sqrt(),
        input_offset: 0.5,
        ..NetworkConfig::tiny()
    }
}

fn train_cfg() -> TrainConfig {
    TrainConfig {
        initial_lr: 1e-3,
        batch_size: 2,
        epochs: 2,
        augmentation: AugmentConfig::disabled(),
        seed: 7,
        loss: LossConfig {
            weight_pose: 1e-3,
            ..LossConfig::default()
        },
        ..TrainConfig::default()
    }
}

fn trainer(data_cfg: &SynConfig, cfg: TrainConfig) -> Trainer {
    let model = Model::new(net(data_cfg), 3).unwrap();
    Trainer::new(model, cfg, Some(data_cfg.skeleton())).unwrap()
}

fn run(tr: &mut Trainer, data: &[FigureInstance], epochs: usize) -> Vec<StepReport> {
    let mut log = Vec::new();
    for _ in 0..epochs {
        tr.run_epoch(data, &mut |r, _| {
            log.push(r.clone());
            Ok(())
        })
        .unwrap();
    }
    log
}

fn lr(initial_lr: f64, gamma: f64, period: usize) -> TrainConfig {
    TrainConfig {
        initial_lr,
        gamma,
        decay_period_epochs: period,
        ..TrainConfig::default()
    }
}

#[test]
fn step_decay_reproduces_reference_values_exactly() {
    let a = lr(1e-10, 0.33, 5);
    for e in 0..5 {
        assert_eq!(lr_at_epoch(&a, e), 1e-10);
    }
    assert_eq!(lr_at_epoch(&a, 5), 3.3e-11);
    assert_eq!(lr_at_epoch(&a, 9), 3.3e-11);

    let b = lr(1e-7, 0.66, 5);
    assert_eq!(lr_at_epoch(&b, 4), 1e-7);
    assert_eq!(lr_at_epoch(&b, 5), 6.6e-8);
    assert_eq!(lr_at_epoch(&b, 10), 1e-7 * 0.66f64.powi(2));

    let flat = lr(0.01, 1.0, 3);
    for e in [0, 3, 7, 100] {
        assert_eq!(lr_at_epoch(&flat, e), 0.01);
    }
}

#[test]
fn invalid_train_configs_are_rejected() {
    let bad = [
        TrainConfig { gamma: 0.0, ..TrainConfig::default() },
        TrainConfig { gamma: 1.5, ..TrainConfig::default() },
        TrainConfig { decay_period_epochs: 0, ..TrainConfig::default() },
        TrainConfig { batch_size: 0, ..TrainConfig::default() },
        TrainConfig { momentum: 1.0, ..TrainConfig::default() },
        TrainConfig { initial_lr: f64::NAN, ..TrainConfig::default() },
    ];
    for cfg in bad {
        assert!(cfg.validate().is_err(), "{cfg:?}");
    }
    let asym = TrainConfig {
        augmentation: AugmentConfig {
            rotation_deg: [-10.0, 20.0],
            ..AugmentConfig::default()
        },
        ..TrainConfig::default()
    };
    assert!(asym.validate().is_err());
}

#[test]
fn zero_learning_rate_leaves_parameters_bit_identical() {
    let c = syn();
    let data = generate_dataset(&c, 4, CoverageProfile::Full, 1).unwrap();
    let mut tr = trainer(&c, TrainConfig { initial_lr: 0.0, ..train_cfg() });
    let before = tr.model.params().clone();
    run(&mut tr, &data, 1);
    for (name, t) in before.iter() {
        assert_eq!(t, tr.model.params().get(name).unwrap(), "{name}");
    }
    assert!(tr.velocity().iter().any(|(_, v)| v.data().iter().any(|&x| x != 0.0)));
}

#[test]
fn momentum_update_matches_the_sgd_rule() {
    let c = syn();
    let data = generate_dataset(&c, 2, CoverageProfile::Full, 2).unwrap();
    let cfg = TrainConfig { initial_lr: 0.01, momentum: 0.9, ..train_cfg() };
    let mut tr = trainer(&c, cfg);
    let netc = tr.model.config().clone();
    let batch: Vec<TrainingExample> = data.iter().map(|d| prepare_example(d, &netc, cfg_sigma()).unwrap()).collect();

    // mean gradient, computed independently of the trainer
    let grad = |model: &Model| {
        let mut sum: HashMap<String, Vec<f64>> = HashMap::new();
        for ex in &batch {
            let mut tape = Tape::new();
            let fwd = model.forward(&mut tape, &ex.image, true).unwrap();
            let loss = total_loss(&mut tape, &fwd.stages, &ex.gt, &ex.mask, &train_cfg().loss).unwrap();
            let g = tape.backward(loss.total).unwrap();
            for (name, var) in fwd.bound.iter() {
                let acc = sum.entry(name.to_string()).or_insert_with(|| vec![0.0; tape.value(var).len()]);
                if let Some(gv) = g.get(var) {
                    for (a, b) in acc.iter_mut().zip(gv.data()) {
                        *a += b;
                    }
                }
            }
        }
        sum
    };

    let p0 = tr.model.params().clone();
    let g0 = grad(&tr.model);
    tr.train_step(&batch, 0).unwrap();
    let p1 = tr.model.params().clone();
    let g1 = grad(&tr.model);
    tr.train_step(&batch, 0).unwrap();
    for (name, w0) in p0.iter() {
        let (a, b) = (&g0[name], &g1[name]);
        for i in 0..w0.len() {
            let v1 = a[i] / 2.0;
            let v2 = 0.9 * v1 + b[i] / 2.0;
            let want1 = w0.data()[i] - 0.01 * v1;
            let want2 = p1.get(name).unwrap().data()[i] - 0.01 * v2;
            assert!((p1.get(name).unwrap().data()[i] - want1).abs() <= 1e-12 * (1.0 + want1.abs()), "{name}");
            assert!((tr.model.params().get(name).unwrap().data()[i] - want2).abs() <= 1e-12 * (1.0 + want2.abs()), "{name}");
            assert!((tr.velocity().get(name).unwrap().data()[i] - v2).abs() <= 1e-12 * (1.0 + v2.abs()), "{name}");
        }
    }
}

fn cfg_sigma() -> f64 {
    train_cfg().heatmap_sigma
}

#[test]
fn freeze_and_mask_agree_on_a_2d_only_batch() {
    let c = syn();
    let data = generate_dataset(&c, 4, CoverageProfile::TwoD, 5).unwrap();
    let mut mask = trainer(&c, train_cfg());
    let mut freeze = trainer(
        &c,
        TrainConfig {
            coverage_strategy: CoverageStrategy::FreezeUncovered,
            ..train_cfg()
        },
    );
    let before = mask.model.params().clone();
    let netc = mask.model.config().clone();
    let batch: Vec<TrainingExample> = data[..2].iter().map(|d| prepare_example(d, &netc, cfg_sigma()).unwrap()).collect();
    let rm = mask.train_step(&batch, 0).unwrap();
    let rf = freeze.train_step(&batch, 0).unwrap();
    assert!(rm.frozen.is_empty());
    assert_eq!(rf.frozen, vec![Branch::Reconstruction]);
    assert_eq!(rm.total, rf.total);

    let mut r_params = 0;
    for (name, p0) in before.iter() {
        let (pm, pf) = (mask.model.params().get(name).unwrap(), freeze.model.params().get(name).unwrap());
        assert_eq!(pm, pf, "{name}");
        if exclusive_branch(name) == Some(Branch::Reconstruction) {
            r_params += 1;
            assert_eq!(pm, p0, "{name} moved");
            assert!(freeze.velocity().get(name).unwrap().data().iter().all(|&v| v == 0.0));
        }
    }
    assert!(r_params > 0);
    assert!(rm.terms.iter().all(|row| row[2] == 0.0));
}

#[test]
fn freezing_only_skips_branches_nobody_in_the_batch_covers() {
    let c = syn();
    let full = generate_dataset(&c, 1, CoverageProfile::Full, 6).unwrap();
    let two_d = generate_dataset(&c, 1, CoverageProfile::TwoD, 7).unwrap();
    let mut tr = trainer(
        &c,
        TrainConfig {
            coverage_strategy: CoverageStrategy::FreezeUncovered,
            ..train_cfg()
        },
    );
    let netc = tr.model.config().clone();
    let batch: Vec<TrainingExample> =
        [&full[0], &two_d[0]].iter().map(|d| prepare_example(d, &netc, cfg_sigma()).unwrap()).collect();
    let before = tr.model.params().clone();
    let r = tr.train_step(&batch, 0).unwrap();
    assert!(r.frozen.is_empty());
    let moved = before
        .iter()
        .filter(|(n, _)| exclusive_branch(n) == Some(Branch::Reconstruction))
        .any(|(n, p)| tr.model.params().get(n).unwrap() != p);
    assert!(moved);
}

#[test]
fn identical_seeds_reproduce_log_and_parameters() {
    let c = syn();
    let data = generate_dataset(&c, 5, CoverageProfile::Full, 8).unwrap();
    let cfg = TrainConfig {
        augmentation: AugmentConfig::default(),
        ..train_cfg()
    };
    let mut a = trainer(&c, cfg.clone());
    let mut b = trainer(&c, cfg.clone());
    let la = run(&mut a, &data, 2);
    let lb = run(&mut b, &data, 2);
    assert_eq!(la, lb);
    assert_eq!(a.model.params(), b.model.params());
    assert_eq!(la.len(), 6);

    let mut other = trainer(&c, TrainConfig { seed: 8, ..cfg });
    let lo = run(&mut other, &data, 2);
    assert_ne!(la, lo);
}

#[test]
fn resuming_from_optimizer_state_matches_an_uninterrupted_run() {
    let c = syn();
    let data = generate_dataset(&c, 4, CoverageProfile::Full, 9).unwrap();
    let cfg = TrainConfig {
        augmentation: AugmentConfig::default(),
        ..train_cfg()
    };
    let mut whole = trainer(&c, cfg.clone());
    let full_log = run(&mut whole, &data, 4);

    let mut first = trainer(&c, cfg.clone());
    let mut log = run(&mut first, &data, 2);
    let state = first.optimizer_state();
    let model = Model::from_params(first.model.config().clone(), first.model.params().clone()).unwrap();
    let mut second = Trainer::resume(model, cfg, Some(c.skeleton()), state).unwrap();
    assert_eq!(second.epochs_completed, 2);
    log.extend(run(&mut second, &data, 2));

    assert_eq!(log, full_log);
    assert_eq!(second.model.params(), whole.model.params());
    assert_eq!(second.velocity(), whole.velocity());
    assert_eq!(second.global_step, whole.global_step);
}

#[test]
fn epoch_order_is_a_permutation_that_changes_between_epochs() {
    let c = syn();
    let tr = trainer(&c, train_cfg());
    let orders: Vec<Vec<usize>> = (0..4).map(|e| tr.epoch_order(20, e)).collect();
    for o in &orders {
        let mut s = o.clone();
        s.sort_unstable();
        assert_eq!(s, (0..20).collect::<Vec<_>>());
    }
    assert!(orders.windows(2).any(|w| w[0] != w[1]));
    assert_eq!(tr.epoch_order(20, 2), orders[2]);
}

#[test]
fn log_records_cover_every_stage_and_term() {
    let c = syn();
    let data = generate_dataset(&c, 2, CoverageProfile::Full, 10).unwrap();
    let mut tr = trainer(&c, train_cfg());
    let log = run(&mut tr, &data, 1);
    let recs = log[0].records(0);
    assert_eq!(recs.len(), 2 * 3 + 1);
    assert_eq!(recs.last().unwrap().term, "total");
    assert_eq!(recs.last().unwrap().stage, 0);
    assert!(recs.iter().all(|r| r.value.is_finite() && r.value >= 0.0));
    let sum: f64 = log[0]
        .terms
        .iter()
        .flat_map(|row| {
            let w = &train_cfg().loss;
            [row[0] * w.weight_joints, row[1] * w.weight_parts, row[2] * w.weight_pose]
        })
        .sum();
    assert!((sum - log[0].total).abs() <= 1e-9 * log[0].total);
}

#[test]
fn total_loss_strictly_decreases_over_the_first_overfit_epoch() {
    let mut cfg = RunConfig::overfit();
    cfg.train.batch_size = 2;
    let data = generate_dataset(&cfg.data, 8, CoverageProfile::Full, 11).unwrap();
    let model = Model::new(cfg.network.clone(), 5).unwrap();
    let mut tr = Trainer::new(model, cfg.train.clone(), Some(cfg.data.skeleton())).unwrap();
    // the full-set loss after every update of the first epoch
    let examples: Vec<TrainingExample> = data
        .iter()
        .map(|d| prepare_example(d, &cfg.network, cfg.train.heatmap_sigma).unwrap())
        .collect();
    let set_loss = |m: &Model| -> f64 {
        examples
            .iter()
            .map(|ex| {
                let mut tape = Tape::new();
                let fwd = m.forward(&mut tape, &ex.image, false).unwrap();
                let l = total_loss(&mut tape, &fwd.stages, &ex.gt, &ex.mask, &cfg.train.loss).unwrap();
                tape.value(l.total).item().unwrap()
            })
            .sum()
    };
    let mut losses = vec![set_loss(&tr.model)];
    let order = tr.epoch_order(data.len(), 0);
    for chunk in order.chunks(cfg.train.batch_size) {
        let batch: Vec<TrainingExample> = chunk.iter().map(|&i| examples[i].clone()).collect();
        tr.train_step(&batch, 0).unwrap();
        losses.push(set_loss(&tr.model));
    }
    assert_eq!(losses.len(), 5);
    for w in losses.windows(2) {
        assert!(w[1] < w[0], "loss went up: {losses:?}");
    }
}

#[test]
fn identity_draws_leave_the_sample_unchanged() {
    let c = syn();
    let skel = c.skeleton();
    let data = generate_dataset(&c, 3, CoverageProfile::Full, 12).unwrap();
    let ident = AugmentConfig {
        enabled: true,
        rotation_deg: [0.0, 0.0],
        scale: [1.0, 1.0],
        flip_prob: 0.0,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for s in &data {
        let a = augment_sample(s, &skel, &mut rng, &ident).unwrap();
        assert_eq!(a.image, s.image);
        assert_eq!(a.labels, s.labels);
        assert_eq!(a.pose3d, s.pose3d);
        for (p, q) in a.joints2d.unwrap().iter().zip(s.joints2d.as_ref().unwrap()) {
            assert!((p[0] - q[0]).abs() < 1e-9 && (p[1] - q[1]).abs() < 1e-9);
        }
        let off = augment_sample(s, &skel, &mut rng, &AugmentConfig::disabled()).unwrap();
        assert_eq!(off.image, s.image);
    }
}

#[test]
fn rotation_moves_joints_about_the_principal_point() {
    let c = syn();
    let skel = c.skeleton();
    let s = &generate_dataset(&c, 1, CoverageProfile::Full, 13).unwrap()[0];
    let center = [(c.width as f64 - 1.0) / 2.0, (c.height as f64 - 1.0) / 2.0];
    for deg in [-30.0f64, 15.0, 90.0] {
        let t = Similarity { angle_deg: deg, ..Similarity::IDENTITY };
        let a = transform_instance(s, &skel, &t).unwrap();
        let (sn, cs) = deg.to_radians().sin_cos();
        for (p, q) in a.joints2d.unwrap().iter().zip(s.joints2d.as_ref().unwrap()) {
            let (dx, dy) = (q[0] - center[0], q[1] - center[1]);
            let want = [center[0] + cs * dx - sn * dy, center[1] + sn * dx + cs * dy];
            assert!((p[0] - want[0]).abs() < 1e-9 && (p[1] - want[1]).abs() < 1e-9, "{deg}: {p:?} vs {want:?}");
        }
    }
}

#[test]
fn augmented_training_samples_pass_the_invariants() {
    let c = syn();
    let skel = c.skeleton();
    let data = generate_dataset(&c, 40, CoverageProfile::Full, 14).unwrap();
    let cfg = AugmentConfig::default();
    for (i, s) in data.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(i as u64);
        let a = augment_sample(s, &skel, &mut rng, &cfg).unwrap();
        check_invariants(&skel, &a).unwrap_or_else(|e| panic!("sample {i}: {e}"));
    }
}

#[test]
fn preflight_catches_mismatched_samples_before_training() {
    let c = syn();
    let data = generate_dataset(&c, 2, CoverageProfile::Full, 15).unwrap();
    let mut wrong = net(&c);
    wrong.parts = 7;
    assert!(preflight(&data, &wrong, &train_cfg()).is_err());
    let big = NetworkConfig {
        input_height: 64,
        input_width: 64,
        ..net(&c)
    };
    assert!(preflight(&data, &big, &train_cfg()).is_err());
    assert!(preflight(&data, &net(&c), &train_cfg()).is_ok());
    assert!(preflight(&[], &net(&c), &train_cfg()).is_err());
}

#[test]
fn non_finite_loss_aborts_the_step() {
    let c = syn();
    let data = generate_dataset(&c, 2, CoverageProfile::Full, 16).unwrap();
    let mut tr = trainer(&c, train_cfg());
    let name = tr.model.params().names().find(|n| n.starts_with("stage1.x")).unwrap().to_string();
    let t = tr.model.params().get(&name).unwrap().map(|_| f64::NAN);
    tr.model.params_mut().set(&name, t).unwrap();
    let before = tr.model.params().clone();
    let err = tr.run_epoch(&data, &mut |_, _| Ok(())).unwrap_err();
    assert!(matches!(err, Error::NonFinite { .. }), "{err:?}");
    assert_eq!(tr.global_step, 0);
    for (n, p) in before.iter() {
        let q = tr.model.params().get(n).unwrap();
        assert!(p.data().iter().zip(q.data()).all(|(a, b)| a.to_bits() == b.to_bits()), "{n}");
    }
}

#[test]
fn masked_terms_log_zero_and_empty_batches_error() {
    let c = syn();
    let data = generate_dataset(&c, 2, CoverageProfile::ThreeD, 17).unwrap();
    let mut tr = trainer(&c, train_cfg());
    let log = run(&mut tr, &data, 1);
    assert!(log[0].terms.iter().all(|row| row[0] == 0.0 && row[1] == 0.0 && row[2] > 0.0));
    assert!(tr.train_step(&[], 0).is_err());
    assert!(tr.run_epoch(&[], &mut |_, _| Ok(())).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn lr_is_piecewise_constant_and_nonincreasing(lr0 in 1e-12f64..1.0, gamma in 0.01f64..=1.0, period in 1usize..10, e in 0usize..60) {
        let cfg = lr(lr0, gamma, period);
        let a = lr_at_epoch(&cfg, e);
        let b = lr_at_epoch(&cfg, e + 1);
        prop_assert!(b <= a);
        if (e + 1) % period != 0 {
            prop_assert_eq!(a, b);
        }
        let want = lr0 * gamma.powi((e / period) as i32);
        prop_assert!((a - want).abs() <= 1e-15 * want.abs());
    }

    #[test]
    fn random_augmentations_keep_the_annotations_consistent(seed in 0u64..1000) {
        let c = syn();
        let skel = c.skeleton();
        let s = generate_sample(&c, &skel, CoverageProfile::Full, seed, 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = augment_sample(&s, &skel, &mut rng, &AugmentConfig::default()).unwrap();
        prop_assert!(check_invariants(&skel, &a).is_ok());
    }
}
