//! Acceptance suite. Each test prints one `acceptance N [name]: PASS/FAIL`
//! line per criterion (run with `--nocapture` to see them) and asserts the
//! criterion at its stated tolerance.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use dcm::config::{ExperimentConfig, LossKind};
use dcm::gradcheck::finite_difference_check;
use dcm::heads::HeadKind;
use dcm::instrument::{gradient_error, last_k_mean};
use dcm::masking::{
    apply_mask, build_mask_node_wise, mask_quota, ImportanceScores, MaskMatrix,
};
use dcm::matrix::Matrix;
use dcm::model::Model;
use dcm::noise::{corrupt_asymmetric_circular, corrupt_asymmetric_pairs, corrupt_symmetric};
use dcm::ops::{one_hot, softmax_ce_backward, softmax_ce_forward};
use dcm::train::{run_train, train_step};
use dcm::Real;

fn report(id: &str, name: &str, pass: bool) {
    println!("acceptance {id} [{name}]: {}", if pass { "PASS" } else { "FAIL" });
}

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Matrix<Real> {
    Matrix::from_vec(
        rows,
        cols,
        (0..rows * cols).map(|_| rng.gen_range(-scale..scale)).collect(),
    )
    .unwrap()
}

/// Criterion 1: softmax cross-entropy backward equals (p - y)/B and matches
/// the finite-difference oracle within 1e-6 relative on 100 randomized
/// instances with B <= 8, C <= 16.
#[test]
fn criterion_1_softmax_ce_gradient_fidelity() {
    let mut rng = ChaCha8Rng::seed_from_u64(1001);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let batch = rng.gen_range(1..=8);
        let classes = rng.gen_range(2..=16);
        let z = random_matrix(&mut rng, batch, classes, 3.0);
        let labels: Vec<usize> = (0..batch).map(|_| rng.gen_range(0..classes)).collect();
        let y = one_hot::<Real>(&labels, classes).unwrap();

        let (_, p) = softmax_ce_forward(&z, &y).unwrap();
        let analytic = softmax_ce_backward(&p, &y);

        // Closed form: (p - y) / B, elementwise.
        for i in 0..batch {
            for j in 0..classes {
                let expected = (p[(i, j)] - y[(i, j)]) / batch as f64;
                assert_eq!(analytic[(i, j)], expected);
            }
        }

        let err = finite_difference_check(
            |flat| {
                let zm = Matrix::from_vec(batch, classes, flat.to_vec()).unwrap();
                softmax_ce_forward(&zm, &y).unwrap().0
            },
            z.data(),
            analytic.data(),
            1e-5,
        )
        .unwrap();
        worst = worst.max(err);
    }
    let pass = worst < 1e-6;
    report("1", "softmax-CE gradient fidelity", pass);
    assert!(pass, "worst relative error {worst}");
}

/// Criterion 2: full DMLP and DKAN losses (including the backbone) match
/// finite differences within 1e-6 (MLP) / 1e-4 (KAN) relative on 20 random
/// tiny instances each, with and without masks.
#[test]
fn criterion_2_full_model_gradient_fidelity() {
    let mut worst_mlp: f64 = 0.0;
    let mut worst_kan: f64 = 0.0;
    for (kind, worst) in [(HeadKind::Mlp, &mut worst_mlp), (HeadKind::Kan, &mut worst_kan)] {
        let mut rng = ChaCha8Rng::seed_from_u64(2002 + kind as u64);
        for instance in 0..20 {
            let (d_in, hidden, feat, classes, batch) = (3, 4, 5, 3, 4);
            let model = Model::init(d_in, hidden, feat, classes, kind, 7000 + instance);
            let x = random_matrix(&mut rng, batch, d_in, 1.5);
            let labels: Vec<usize> = (0..batch).map(|_| rng.gen_range(0..classes)).collect();
            let y = one_hot::<Real>(&labels, classes).unwrap();

            // Alternate between the unmasked head and a random mask.
            let mask = if instance % 2 == 0 {
                None
            } else {
                let mut m = MaskMatrix::all_ones(feat, classes);
                for k in 0..feat {
                    for j in 0..classes {
                        if rng.gen_bool(0.5) {
                            m.set_masked(k, j);
                        }
                    }
                }
                Some(m)
            };

            let step =
                train_step(&model, &x, &y, None, mask.as_ref(), LossKind::Ce).unwrap();
            let analytic = model.flat_grads(&step.grads).unwrap();
            let params = model.flat_params();
            let err = finite_difference_check(
                |flat| {
                    let mut m2 = model.clone();
                    m2.set_flat_params(flat).unwrap();
                    let z = m2.forward(&x, mask.as_ref(), None).unwrap();
                    softmax_ce_forward(&z, &y).unwrap().0
                },
                &params,
                &analytic,
                1e-5,
            )
            .unwrap();
            *worst = worst.max(err);
        }
    }
    let pass = worst_mlp < 1e-6 && worst_kan < 1e-4;
    report("2", "full DMLP/DKAN gradient fidelity", pass);
    assert!(
        pass,
        "worst relative error: mlp {worst_mlp}, kan {worst_kan}"
    );
}

/// Brute-force node-wise oracle: for each node, enumerate (score, class)
/// pairs and pick the q lowest under the declared tie rule.
fn oracle_node_wise(scores: &ImportanceScores<Real>, ratio: f64) -> MaskMatrix {
    let (classes, features) = (scores.classes(), scores.features());
    let q = (ratio * classes as f64).floor() as usize;
    let mut mask = MaskMatrix::all_ones(features, classes);
    for k in 0..features {
        let mut pairs: Vec<(f64, usize)> = (0..classes).map(|j| (scores.get(j, k), j)).collect();
        pairs.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
        for &(_, j) in pairs.iter().take(q) {
            mask.set_masked(k, j);
        }
    }
    mask
}

/// Criterion 3: node-wise cardinality over the (p, C) grid, bottom-q
/// selection against the brute-force oracle, and invariance to positive
/// per-node score scaling.
#[test]
fn criterion_3_mask_correctness() {
    let mut rng = ChaCha8Rng::seed_from_u64(3003);
    let mut pass = true;
    for &classes in &[3usize, 10, 100] {
        for step in 1..=9 {
            let p = step as f64 / 10.0;
            let features = 7;
            let mut scores = Matrix::zeros(classes, features);
            for v in scores.data_mut() {
                *v = rng.gen_range(0.0..5.0);
            }
            let scores = ImportanceScores::from_matrix(scores).unwrap();
            let mask = build_mask_node_wise(&scores, p);
            let q = mask_quota(p, classes);
            // Exact per-node cardinality.
            for k in 0..features {
                if mask.zeros_in_node(k) != q {
                    pass = false;
                }
            }
            // Brute-force selection oracle.
            if mask != oracle_node_wise(&scores, p) {
                pass = false;
            }
            // Scaling one node's whole score column by c > 0 changes nothing.
            let mut scaled = scores.matrix().clone();
            for j in 0..classes {
                scaled[(j, 3)] *= 17.5;
            }
            let scaled = ImportanceScores::from_matrix(scaled).unwrap();
            if build_mask_node_wise(&scaled, p) != mask {
                pass = false;
            }
        }
    }
    report("3", "node-wise mask correctness", pass);
    assert!(pass);
}

/// Criterion 4: Frobenius norm never grows under masking, on 1000 random
/// (W, M) pairs, with no tolerance.
#[test]
fn criterion_4_norm_monotonicity() {
    let mut rng = ChaCha8Rng::seed_from_u64(4004);
    let mut pass = true;
    for _ in 0..1000 {
        let classes = rng.gen_range(1..=12);
        let features = rng.gen_range(1..=12);
        let w = random_matrix(&mut rng, classes, features, 4.0);
        let mut mask = MaskMatrix::all_ones(features, classes);
        for k in 0..features {
            for j in 0..classes {
                if rng.gen_bool(0.4) {
                    mask.set_masked(k, j);
                }
            }
        }
        let masked = apply_mask(&w, &mask).unwrap();
        if !(masked.frobenius_norm() <= w.frobenius_norm()) {
            pass = false;
        }
    }
    report("4", "masked Frobenius norm monotonicity", pass);
    assert!(pass);
}

/// Criterion 5: epsilon is exactly zero when observed labels equal true
/// labels, and enabling instrumentation leaves a 50-step parameter
/// trajectory bitwise identical.
#[test]
fn criterion_5_instrumentation_is_observation_only() {
    // Degenerate case: clean labels give epsilon == 0 bitwise.
    let model = Model::init(3, 4, 5, 3, HeadKind::Mlp, 55);
    let mut rng = ChaCha8Rng::seed_from_u64(5005);
    let x = random_matrix(&mut rng, 6, 3, 1.0);
    let labels: Vec<usize> = (0..6).map(|_| rng.gen_range(0..3)).collect();
    let y = one_hot::<Real>(&labels, 3).unwrap();
    let step = train_step(&model, &x, &y, Some(&y), None, LossKind::Ce).unwrap();
    let eps_zero = step.epsilon == Some(0.0);

    // Hand Jacobian on a two-sample single-affine toy: the designated-layer
    // gradient difference is Delta^T x (weights) and column sums of Delta
    // (bias), with Delta = (y - y_noisy)/B.
    let xt = Matrix::from_vec(2, 1, vec![2.0, -3.0]).unwrap();
    let w = Matrix::from_vec(2, 1, vec![0.4, -0.2]).unwrap();
    let b = vec![0.1, -0.1];
    let y_clean = one_hot::<Real>(&[0, 1], 2).unwrap();
    let y_noisy = one_hot::<Real>(&[1, 1], 2).unwrap();
    let mut tape = dcm::tape::GradTape::new();
    let z = dcm::ops::linear_forward(&xt, &w, &b).unwrap();
    tape.record(dcm::tape::TapeOp::Linear {
        x: xt.clone(),
        weight: w.clone(),
        mask: None,
        slot: dcm::tape::SLOT_BACKBONE_FC2,
    });
    let (_, p) = softmax_ce_forward(&z, &y_clean).unwrap();
    let (g_clean, _) = tape.backward(softmax_ce_backward(&p, &y_clean)).unwrap();
    let (g_noisy, _) = tape.backward(softmax_ce_backward(&p, &y_noisy)).unwrap();
    let flat_c = dcm::instrument::designated_layer_grads(&g_clean).unwrap();
    let flat_n = dcm::instrument::designated_layer_grads(&g_noisy).unwrap();
    let measured = gradient_error(&flat_c, &flat_n).unwrap();
    // Delta = (y_noisy - y_clean)/B differs only in sample 0: (-1, +1)/2.
    // dW difference = Delta^T xt = [[-1], [+1]] * 2.0 / 2 = [[-1.0], [1.0]];
    // db difference = (-0.5, 0.5). Norm = sqrt(1 + 1 + 0.25 + 0.25).
    let hand = (1.0f64 + 1.0 + 0.25 + 0.25).sqrt();
    let hand_ok = (measured - hand).abs() < 1e-12;

    // Bitwise trajectory equivalence over 50 steps (10 epochs x 5 batches).
    let dir = tempfile::tempdir().unwrap();
    let mut base = ExperimentConfig::default();
    base.classes = 4;
    base.samples_per_class = 100;
    base.input_dim = 5;
    base.hidden_dim = 8;
    base.feature_dim = 6;
    base.epochs = 10;
    base.batch_size = 64;
    base.noise_rate = 0.4;
    let mut with = base.clone();
    with.instrument = true;
    with.out_dir = dir.path().join("with").to_string_lossy().into_owned();
    let mut without = base;
    without.instrument = false;
    without.out_dir = dir.path().join("without").to_string_lossy().into_owned();
    run_train(&with).unwrap();
    run_train(&without).unwrap();
    let ck_with = std::fs::read(dir.path().join("with").join("checkpoint.bin")).unwrap();
    let ck_without = std::fs::read(dir.path().join("without").join("checkpoint.bin")).unwrap();
    let trajectory_ok = ck_with == ck_without;

    let pass = eps_zero && hand_ok && trajectory_ok;
    report("5", "gradient-error degenerate case and observation-only", pass);
    assert!(
        pass,
        "eps_zero={eps_zero}, hand_ok={hand_ok} (measured {measured} vs {hand}), trajectory_ok={trajectory_ok}"
    );
}

/// Criterion 6: symmetric noise statistics and asymmetric targeting.
#[test]
fn criterion_6_noise_generator_statistics() {
    let labels: Vec<usize> = (0..10_000).map(|i| i % 10).collect();
    let (noisy, flipped) = corrupt_symmetric(&labels, 10, 0.4, 99).unwrap();
    let flips = flipped.iter().filter(|&&f| f).count();
    let fraction = flips as f64 / labels.len() as f64;
    let rate_ok = (fraction - 0.40).abs() <= 0.02;
    let no_self = labels
        .iter()
        .zip(&noisy)
        .zip(&flipped)
        .all(|((&y, &n), &f)| if f { n != y } else { n == y });

    // Pair flips land only on designated targets.
    let map = BTreeMap::from([(3usize, 5usize), (9, 1)]);
    let (pn, pf) = corrupt_asymmetric_pairs(&labels, 10, &map, 0.4, 7).unwrap();
    let pairs_ok = labels.iter().zip(&pn).zip(&pf).all(|((&y, &n), &f)| {
        if f {
            map.get(&y) == Some(&n)
        } else {
            n == y
        }
    });

    // Circular flips go to the in-group successor.
    let groups: Vec<Vec<usize>> = vec![vec![0, 1, 2, 3, 4], vec![5, 6, 7, 8, 9]];
    let (cn, cf) = corrupt_asymmetric_circular(&labels, 10, &groups, 0.4, 7).unwrap();
    let circ_ok = labels.iter().zip(&cn).zip(&cf).all(|((&y, &n), &f)| {
        let succ = if y == 4 {
            0
        } else if y == 9 {
            5
        } else {
            y + 1
        };
        if f {
            n == succ
        } else {
            n == y
        }
    });

    let pass = rate_ok && no_self && pairs_ok && circ_ok;
    report("6", "noise generator statistics", pass);
    assert!(
        pass,
        "rate_ok={rate_ok} (fraction {fraction}), no_self={no_self}, pairs_ok={pairs_ok}, circ_ok={circ_ok}"
    );
}

/// Criterion 12: identical (config, seed) produce byte-identical metrics
/// CSVs and SVGs across two invocations.
#[test]
fn criterion_12_reproducibility() {
    let dir = tempfile::tempdir().unwrap();
    let make = |out: &Path| {
        let mut cfg = ExperimentConfig::default();
        cfg.classes = 4;
        cfg.samples_per_class = 50;
        cfg.input_dim = 5;
        cfg.hidden_dim = 8;
        cfg.feature_dim = 6;
        cfg.epochs = 12;
        cfg.batch_size = 32;
        cfg.noise_rate = 0.4;
        cfg.seed = 3;
        cfg.out_dir = out.to_string_lossy().into_owned();
        cfg
    };
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    run_train(&make(&a)).unwrap();
    run_train(&make(&b)).unwrap();
    let csv_a = std::fs::read(a.join("metrics.csv")).unwrap();
    let csv_b = std::fs::read(b.join("metrics.csv")).unwrap();
    let csv_ok = csv_a == csv_b;

    let svg_a = dir.path().join("a.svg");
    let svg_b = dir.path().join("b.svg");
    dcm::plot::emit_plot(
        dcm::plot::PlotKind::AccuracyCurve,
        &[a.join("metrics.csv")],
        &svg_a,
    )
    .unwrap();
    dcm::plot::emit_plot(
        dcm::plot::PlotKind::AccuracyCurve,
        &[b.join("metrics.csv")],
        &svg_b,
    )
    .unwrap();
    let svg_ok = std::fs::read(svg_a).unwrap() == std::fs::read(svg_b).unwrap();

    let mask_a = std::fs::read(a.join("final_mask.txt")).unwrap();
    let mask_b = std::fs::read(b.join("final_mask.txt")).unwrap();
    let mask_ok = mask_a == mask_b;

    let pass = csv_ok && svg_ok && mask_ok;
    report("12", "byte-identical reproducibility", pass);
    assert!(pass, "csv_ok={csv_ok}, svg_ok={svg_ok}, mask_ok={mask_ok}");
}

/// Supporting check for the criteria above: the default experiment's clean
/// baseline must be healthy before any noisy comparison means anything.
#[test]
fn clean_baseline_sanity() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = ExperimentConfig::default();
    cfg.noise_kind = None;
    cfg.mask_enabled = false;
    cfg.epochs = 40;
    cfg.out_dir = dir.path().join("clean").to_string_lossy().into_owned();
    let metrics = run_train(&cfg).unwrap();
    let acc = last_k_mean(&metrics.test_acc_series(), 10).unwrap();
    assert!(acc > 0.95, "clean last-10 accuracy {acc}");
}
