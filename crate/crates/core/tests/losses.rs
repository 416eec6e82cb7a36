use humansense::autodiff::gradcheck::check_gradients;
use humansense::autodiff::{Tape, Tensor, Var};
use humansense::losses::{loss_b, loss_j, loss_r, total_loss, CoverageMask, GroundTruth, LossConfig, LOG_CLAMP};
use humansense::network::{exclusive_branch, Branch, InputSet, Model, NetworkConfig};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn value(tape: &Tape, v: Var) -> f64 {
    tape.value(v).item().unwrap()
}

fn random(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(lo..hi))
}

/// Rows of `[h, w, c]` normalized to sum to one.
fn random_probs(h: usize, w: usize, c: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let mut data = Vec::with_capacity(h * w * c);
    for _ in 0..h * w {
        let row: Vec<f64> = (0..c).map(|_| rng.random_range(0.01..1.0)).collect();
        let s: f64 = row.iter().sum();
        data.extend(row.iter().map(|v| v / s));
    }
    Tensor::new([h, w, c], data).unwrap()
}

#[test]
fn loss_j_identities_and_loop_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut tape = Tape::new();
    let a = random(&[5, 7, 3], -1.0, 1.0, &mut rng);
    let va = tape.constant(a.clone());
    let zero = loss_j(&mut tape, va, va).unwrap();
    assert_eq!(value(&tape, zero), 0.0);

    let plus = tape.constant(a.map(|v| v + 1.0));
    let l = loss_j(&mut tape, plus, va).unwrap();
    assert!((value(&tape, l) - 105.0).abs() < 1e-10);

    let b = random(&[5, 7, 3], -1.0, 1.0, &mut rng);
    let vb = tape.constant(b.clone());
    let l = loss_j(&mut tape, va, vb).unwrap();
    let mut oracle = 0.0;
    for y in 0..5 {
        for x in 0..7 {
            for k in 0..3 {
                let i = (y * 7 + x) * 3 + k;
                oracle += (a.data()[i] - b.data()[i]).powi(2);
            }
        }
    }
    assert!((value(&tape, l) - oracle).abs() < 1e-10);

    let other = tape.constant(Tensor::zeros([5, 7, 4]));
    assert!(loss_j(&mut tape, va, other).is_err());
}

#[test]
fn loss_b_identities_and_loop_oracle() {
    let mut tape = Tape::new();
    let uniform = tape.constant(Tensor::full([6, 5, 25], 1.0 / 25.0));
    let labels: Vec<usize> = (0..30).map(|i| (i * 7) % 25).collect();
    let l = loss_b(&mut tape, uniform, &labels).unwrap();
    assert!((value(&tape, l) - 25f64.ln()).abs() < 1e-9);

    let one_hot = Tensor::from_fn([6, 5, 25], |i| if i % 25 == labels[i / 25] { 1.0 } else { 0.0 });
    let v = tape.constant(one_hot);
    let l = loss_b(&mut tape, v, &labels).unwrap();
    assert_eq!(value(&tape, l), 0.0);

    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..10 {
        let p = random_probs(4, 4, 3, &mut rng);
        let labels: Vec<usize> = (0..16).map(|_| rng.random_range(0..3)).collect();
        let v = tape.constant(p.clone());
        let l = loss_b(&mut tape, v, &labels).unwrap();
        let mut oracle = 0.0;
        for z in 0..16 {
            oracle -= p.data()[z * 3 + labels[z]].ln();
        }
        oracle /= 16.0;
        assert!((value(&tape, l) - oracle).abs() < 1e-12);
    }
}

#[test]
fn loss_b_clamps_and_counts_zero_probabilities() {
    let mut tape = Tape::new();
    let p = Tensor::from_fn([1, 2, 2], |i| if i % 2 == 0 { 1.0 } else { 0.0 });
    let v = tape.constant(p);
    let l = loss_b(&mut tape, v, &[1, 0]).unwrap();
    assert!((value(&tape, l) - (-LOG_CLAMP.ln() / 2.0)).abs() < 1e-12);
    assert_eq!(tape.clamped_log_terms(), 1);
    assert!(loss_b(&mut tape, v, &[0, 2]).is_err());
    assert!(loss_b(&mut tape, v, &[0]).is_err());
}

#[test]
fn loss_r_identities_and_loop_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for n in [1usize, 4, 15, 17] {
        let mut tape = Tape::new();
        let pose = random(&[n, 3], -800.0, 800.0, &mut rng);
        let p = tape.leaf(pose.clone());
        let l = loss_r(&mut tape, p, p, 1e-3).unwrap();
        assert_eq!(value(&tape, l), n as f64 * 1e-3);

        // Stationary at the target.
        let target = tape.constant(pose.clone());
        let l = loss_r(&mut tape, p, target, 1e-3).unwrap();
        let g = tape.backward(l).unwrap();
        assert!(g.get(p).unwrap().data().iter().all(|&v| v == 0.0));

        let other = random(&[n, 3], -800.0, 800.0, &mut rng);
        let o = tape.constant(other.clone());
        let l = loss_r(&mut tape, p, o, 0.5).unwrap();
        let oracle: f64 = (0..n)
            .map(|i| {
                let sq: f64 = (0..3).map(|j| (pose.data()[i * 3 + j] - other.data()[i * 3 + j]).powi(2)).sum();
                (sq + 0.25).sqrt()
            })
            .sum();
        assert!((value(&tape, l) - oracle).abs() < 1e-9 * oracle.max(1.0));
    }

    let mut tape = Tape::new();
    let p = tape.constant(Tensor::new([2, 3], vec![3.0, 4.0, 0.0, 1.0, 1.0, 1.0]).unwrap());
    let q = tape.constant(Tensor::new([2, 3], vec![0.0, 0.0, 0.0, 1.0, 1.0, 1.0]).unwrap());
    let l = loss_r(&mut tape, p, q, 1e-9).unwrap();
    assert!((value(&tape, l) - 5.0).abs() < 1e-8);
    assert!(loss_r(&mut tape, p, q, 0.0).is_err());
    assert!(loss_r(&mut tape, p, q, -1.0).is_err());
    let flat = tape.constant(Tensor::zeros([6]));
    assert!(loss_r(&mut tape, flat, flat, 1e-3).is_err());
}

#[test]
fn loss_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for case in 0..20 {
        let a = random(&[3, 4, 2], -1.0, 1.0, &mut rng);
        let b = random(&[3, 4, 2], -1.0, 1.0, &mut rng);
        let r = check_gradients(
            &[a, b],
            |t: &mut Tape, v: &[Var]| Ok(loss_j(t, v[0], v[1]).unwrap()),
            1e-5,
            None,
        )
        .unwrap();
        assert!(r.passes(1e-4), "loss_J case {case}: {:?}", r.worst);

        let p = random_probs(3, 3, 4, &mut rng);
        let labels: Vec<usize> = (0..9).map(|_| rng.random_range(0..4)).collect();
        let r = check_gradients(
            &[p],
            |t: &mut Tape, v: &[Var]| Ok(loss_b(t, v[0], &labels).unwrap()),
            1e-5,
            None,
        )
        .unwrap();
        assert!(r.passes(1e-4), "loss_B case {case}: {:?}", r.worst);

        let x = random(&[5, 3], -2.0, 2.0, &mut rng);
        let y = random(&[5, 3], -2.0, 2.0, &mut rng);
        let r = check_gradients(
            &[x, y],
            |t: &mut Tape, v: &[Var]| Ok(loss_r(t, v[0], v[1], 1e-3).unwrap()),
            1e-5,
            None,
        )
        .unwrap();
        assert!(r.passes(1e-4), "loss_R case {case}: {:?}", r.worst);
    }
}

fn ground_truth(cfg: &NetworkConfig, mask: CoverageMask, rng: &mut ChaCha8Rng) -> GroundTruth {
    GroundTruth {
        joints: mask
            .joints2d
            .then(|| random(&[cfg.feature_height(), cfg.feature_width(), cfg.joints], 0.0, 1.0, rng)),
        labels: mask
            .part_labels
            .then(|| (0..cfg.input_height * cfg.input_width).map(|_| rng.random_range(0..cfg.parts)).collect()),
        pose: mask.pose3d.then(|| random(&[cfg.joints3d, 3], -500.0, 500.0, rng)),
    }
}

fn image(cfg: &NetworkConfig, rng: &mut ChaCha8Rng) -> Tensor {
    random(&[cfg.input_height, cfg.input_width, 3], 0.0, 1.0, rng)
}

#[test]
fn total_is_the_sum_of_eighteen_terms_at_six_stages() {
    let cfg = NetworkConfig {
        stages: 6,
        ..NetworkConfig::tiny()
    };
    let model = Model::new(cfg.clone(), 7).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let gt = ground_truth(&cfg, CoverageMask::FULL, &mut rng);
    let img = image(&cfg, &mut rng);
    let mut tape = Tape::new();
    let fwd = model.forward(&mut tape, &img, false).unwrap();
    let loss = total_loss(&mut tape, &fwd.stages, &gt, &CoverageMask::FULL, &LossConfig::default()).unwrap();
    assert_eq!(loss.stages.len(), 6);

    let jt = tape.constant(gt.joints.clone().unwrap());
    let rt = tape.constant(gt.pose.clone().unwrap());
    let mut terms = Vec::new();
    for (s, row) in fwd.stages.iter().zip(&loss.stages) {
        let j = loss_j(&mut tape, s.joints, jt).unwrap();
        let b = loss_b(&mut tape, s.parts, gt.labels.as_ref().unwrap()).unwrap();
        let r = loss_r(&mut tape, s.pose, rt, 1e-3).unwrap();
        let (j, b, r) = (value(&tape, j), value(&tape, b), value(&tape, r));
        assert_eq!(row.joints, Some(j));
        assert_eq!(row.parts, Some(b));
        assert_eq!(row.pose, Some(r));
        terms.extend([j, b, r]);
    }
    assert_eq!(terms.len(), 18);
    let oracle: f64 = terms.iter().sum();
    assert!((value(&tape, loss.total) - oracle).abs() < 1e-10);
}

#[test]
fn single_stage_total_is_three_terms() {
    let cfg = NetworkConfig {
        stages: 1,
        ..NetworkConfig::tiny()
    };
    let model = Model::new(cfg.clone(), 9).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let gt = ground_truth(&cfg, CoverageMask::FULL, &mut rng);
    let mut tape = Tape::new();
    let fwd = model.forward(&mut tape, &image(&cfg, &mut rng), false).unwrap();
    let loss = total_loss(&mut tape, &fwd.stages, &gt, &CoverageMask::FULL, &LossConfig::default()).unwrap();
    let row = &loss.stages[0];
    let sum = row.joints.unwrap() + row.parts.unwrap() + row.pose.unwrap();
    assert!((value(&tape, loss.total) - sum).abs() < 1e-12);
}

#[test]
fn weights_scale_their_terms() {
    let cfg = NetworkConfig::tiny();
    let model = Model::new(cfg.clone(), 11).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let gt = ground_truth(&cfg, CoverageMask::FULL, &mut rng);
    let mut tape = Tape::new();
    let fwd = model.forward(&mut tape, &image(&cfg, &mut rng), false).unwrap();
    let w = LossConfig {
        weight_joints: 2.0,
        weight_parts: 0.5,
        weight_pose: 0.25,
        ..LossConfig::default()
    };
    let loss = total_loss(&mut tape, &fwd.stages, &gt, &CoverageMask::FULL, &w).unwrap();
    let oracle: f64 = loss
        .stages
        .iter()
        .map(|s| 2.0 * s.joints.unwrap() + 0.5 * s.parts.unwrap() + 0.25 * s.pose.unwrap())
        .sum();
    assert!((value(&tape, loss.total) - oracle).abs() < 1e-10);
}

#[test]
fn mask_and_targets_must_agree() {
    let cfg = NetworkConfig::tiny();
    let model = Model::new(cfg.clone(), 13).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let mut tape = Tape::new();
    let fwd = model.forward(&mut tape, &image(&cfg, &mut rng), false).unwrap();
    let gt = ground_truth(&cfg, CoverageMask::TWO_D, &mut rng);
    assert!(total_loss(&mut tape, &fwd.stages, &gt, &CoverageMask::FULL, &LossConfig::default()).is_err());
    let none = CoverageMask {
        joints2d: false,
        part_labels: false,
        pose3d: false,
    };
    let empty = GroundTruth {
        joints: None,
        labels: None,
        pose: None,
    };
    assert!(total_loss(&mut tape, &fwd.stages, &empty, &none, &LossConfig::default()).is_err());
    assert!(total_loss(&mut tape, &[], &gt, &CoverageMask::TWO_D, &LossConfig::default()).is_err());
}

fn gradients_under(
    model: &Model,
    img: &Tensor,
    gt: &GroundTruth,
    mask: CoverageMask,
) -> Vec<(String, Option<Tensor>)> {
    let mut tape = Tape::new();
    let fwd = model.forward(&mut tape, img, true).unwrap();
    let loss = total_loss(&mut tape, &fwd.stages, gt, &mask, &LossConfig::default()).unwrap();
    let grads = tape.backward(loss.total).unwrap();
    fwd.bound.iter().map(|(n, v)| (n.to_string(), grads.get(v).cloned())).collect()
}

fn is_zero(g: &Option<Tensor>) -> bool {
    g.as_ref().is_none_or(|t| t.data().iter().all(|&v| v == 0.0))
}

fn restrict(gt: &GroundTruth, mask: CoverageMask) -> GroundTruth {
    GroundTruth {
        joints: gt.joints.clone().filter(|_| mask.joints2d),
        labels: gt.labels.clone().filter(|_| mask.part_labels),
        pose: gt.pose.clone().filter(|_| mask.pose3d),
    }
}

#[test]
fn two_d_only_samples_leave_reconstruction_untouched() {
    let cfg = NetworkConfig {
        stages: 3,
        ..NetworkConfig::tiny()
    };
    let model = Model::new(cfg.clone(), 15).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let full = ground_truth(&cfg, CoverageMask::FULL, &mut rng);
    let img = image(&cfg, &mut rng);
    let grads = gradients_under(&model, &img, &restrict(&full, CoverageMask::TWO_D), CoverageMask::TWO_D);
    let mut exclusive = 0;
    for (name, g) in &grads {
        if exclusive_branch(name) == Some(Branch::Reconstruction) {
            exclusive += 1;
            assert!(is_zero(g), "{name} got a gradient from a 2D-only sample");
        }
    }
    assert!(exclusive > 0);
    // Everything else that the 2D losses reach does get a signal.
    for name in ["stage1.x.conv1.weight", "stage3.J.conv5.weight", "stage3.B.deconv.weight"] {
        let g = &grads.iter().find(|(n, _)| n == name).unwrap().1;
        assert!(!is_zero(g), "{name} got no gradient");
    }
}

#[test]
fn masked_terms_contribute_nothing() {
    // Without B in the reconstruction input the part branch only serves its
    // own loss, so it is isolated like R.
    let cfg = NetworkConfig {
        stages: 2,
        r_inputs: "J,D".parse::<InputSet>().unwrap(),
        ..NetworkConfig::tiny()
    };
    let model = Model::new(cfg.clone(), 17).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    let full = ground_truth(&cfg, CoverageMask::FULL, &mut rng);
    let img = image(&cfg, &mut rng);
    let no_parts = CoverageMask {
        part_labels: false,
        ..CoverageMask::FULL
    };
    let grads = gradients_under(&model, &img, &restrict(&full, no_parts), no_parts);
    for (name, g) in &grads {
        if name.contains(".B.") {
            assert!(is_zero(g), "{name} got a gradient with part labels masked");
        }
    }

    // The masked gradient equals the gradient of the covered terms alone.
    let masks = [CoverageMask::TWO_D, CoverageMask::THREE_D, no_parts];
    for mask in masks {
        let masked = gradients_under(&model, &img, &restrict(&full, mask), mask);
        let mut tape = Tape::new();
        let fwd = model.forward(&mut tape, &img, true).unwrap();
        let mut parts = Vec::new();
        for s in &fwd.stages {
            if mask.joints2d {
                let t = tape.constant(full.joints.clone().unwrap());
                parts.push(loss_j(&mut tape, s.joints, t).unwrap());
            }
            if mask.part_labels {
                parts.push(loss_b(&mut tape, s.parts, full.labels.as_ref().unwrap()).unwrap());
            }
            if mask.pose3d {
                let t = tape.constant(full.pose.clone().unwrap());
                parts.push(loss_r(&mut tape, s.pose, t, 1e-3).unwrap());
            }
        }
        let mut total = parts[0];
        for &p in &parts[1..] {
            total = tape.add(total, p).unwrap();
        }
        let grads = tape.backward(total).unwrap();
        for ((name, g), (_, v)) in masked.iter().zip(fwd.bound.iter()) {
            let oracle = grads.get(v);
            match (g, oracle) {
                (Some(a), Some(b)) => {
                    for (x, y) in a.data().iter().zip(b.data()) {
                        assert!((x - y).abs() <= 1e-12 * y.abs().max(1.0), "{name}: {x} vs {y}");
                    }
                }
                (a, b) => assert!(is_zero(a) && is_zero(&b.cloned()), "{name}: reachability differs"),
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn losses_are_nonnegative_and_bounded_below(seed in 0u64..1_000_000, n in 1usize..20, eps in 1e-6f64..1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tape = Tape::new();
        let a = tape.constant(random(&[3, 3, 2], -5.0, 5.0, &mut rng));
        let b = tape.constant(random(&[3, 3, 2], -5.0, 5.0, &mut rng));
        let lj = loss_j(&mut tape, a, b).unwrap();
        prop_assert!(value(&tape, lj) >= 0.0);
        let p = tape.constant(random_probs(2, 3, 4, &mut rng));
        let labels: Vec<usize> = (0..6).map(|_| rng.random_range(0..4)).collect();
        let lb = loss_b(&mut tape, p, &labels).unwrap();
        prop_assert!(value(&tape, lb) >= 0.0);
        let x = tape.constant(random(&[n, 3], -100.0, 100.0, &mut rng));
        let y = tape.constant(random(&[n, 3], -100.0, 100.0, &mut rng));
        let lr = loss_r(&mut tape, x, y, eps).unwrap();
        prop_assert!(value(&tape, lr) >= n as f64 * eps * (1.0 - 1e-15));
    }

    #[test]
    fn total_loss_is_additive_over_stages(seed in 0u64..1_000) {
        let cfg = NetworkConfig { stages: 3, ..NetworkConfig::tiny() };
        let model = Model::new(cfg.clone(), seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
        let gt = ground_truth(&cfg, CoverageMask::FULL, &mut rng);
        let mut tape = Tape::new();
        let fwd = model.forward(&mut tape, &image(&cfg, &mut rng), false).unwrap();
        let lc = LossConfig::default();
        let joint = total_loss(&mut tape, &fwd.stages, &gt, &CoverageMask::FULL, &lc).unwrap();
        let mut sum = 0.0;
        for s in &fwd.stages {
            let l = total_loss(&mut tape, std::slice::from_ref(s), &gt, &CoverageMask::FULL, &lc).unwrap();
            sum += value(&tape, l.total);
        }
        prop_assert!((value(&tape, joint.total) - sum).abs() < 1e-10 * sum.abs().max(1.0));
    }
}
