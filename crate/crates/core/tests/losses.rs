use mmckd_core::datamodel::{collate, generate_synthetic, ModalityDims};
use mmckd_core::losses::{
    contrastive_loss, contrastive_on_tape, mae_on_tape, mse_kd_loss, mse_kd_on_tape, mvsc_loss,
    positive_counts, regression_loss, total_loss, uniview_sc_loss, ContrastiveConfig, KdInputs,
    KdNodes, KdVariant, LossMode, RepresentationSet,
};
use mmckd_core::nn::{FusionNet, ModelConfig};
use mmckd_core::protocols::Head;
use mmckd_core::{Tape, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Double loop over anchors and positives, no stabilisation.
fn brute_force(v: &[Vec<f64>], y: &[f64], lambda: f64, tau: f64, normalize: bool) -> f64 {
    let h: Vec<Vec<f64>> = if normalize {
        v.iter()
            .map(|r| {
                let n = r.iter().map(|x| x * x).sum::<f64>().sqrt();
                r.iter().map(|x| x / n).collect()
            })
            .collect()
    } else {
        v.to_vec()
    };
    let dotp = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let mut total = 0.0;
    for j in 0..h.len() {
        let positives: Vec<usize> = (0..h.len())
            .filter(|&p| p != j && (y[p] - y[j]).abs() <= lambda)
            .collect();
        if positives.is_empty() {
            continue;
        }
        let mut denom = 0.0;
        for a in 0..h.len() {
            if a != j {
                denom += (dotp(&h[j], &h[a]) / tau).exp();
            }
        }
        let mut s = 0.0;
        for &p in &positives {
            s += ((dotp(&h[j], &h[p]) / tau).exp() / denom).ln();
        }
        total += -s / positives.len() as f64;
    }
    total
}

fn random_set(rng: &mut ChaCha8Rng, b: usize, d: usize) -> RepresentationSet<f64> {
    let views = std::array::from_fn(|_| {
        Tensor::new(vec![b, d], (0..b * d).map(|_| rng.gen_range(-1.0..1.0)).collect())
    });
    let labels = (0..b).map(|_| rng.gen_range(-3.0..3.0)).collect();
    RepresentationSet { views, labels }
}

fn as_rows(t: &Tensor<f64>) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|i| t.row(i).to_vec()).collect()
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-12)
}

#[test]
fn mvsc_matches_brute_force_on_fourteen_views() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let set = random_set(&mut rng, 2, 8);
    let cfg = ContrastiveConfig::default();
    let (m, y) = set.to_matrix();
    assert_eq!(m.rows(), 14);
    let got = mvsc_loss(&set, &cfg).unwrap();
    let want = brute_force(&as_rows(&m), &y, 0.9, 0.1, true);
    assert!(rel_err(got, want) < 1e-6, "{got} vs {want}");
}

#[test]
fn all_positive_regime_matches_all_pairs_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let set = random_set(&mut rng, 3, 4);
    let cfg = ContrastiveConfig {
        lambda: 100.0,
        ..ContrastiveConfig::default()
    };
    let (m, y) = set.to_matrix();
    let same = vec![0.0; y.len()];
    let want = brute_force(&as_rows(&m), &same, 0.0, 0.1, true);
    let got = mvsc_loss(&set, &cfg).unwrap();
    assert!(rel_err(got, want) < 1e-6, "{got} vs {want}");
    assert!(positive_counts(&y, 100.0).iter().all(|&c| c == y.len() - 1));
}

#[test]
fn uniview_is_mvsc_restricted_to_teacher() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let set = random_set(&mut rng, 4, 8);
    let cfg = ContrastiveConfig::default();
    let h_t = &set.views[Head::T.index()];
    let got = uniview_sc_loss(h_t, &set.labels, &cfg).unwrap();
    let want = brute_force(&as_rows(h_t), &set.labels, 0.9, 0.1, true);
    assert!(rel_err(got, want) < 1e-6);
    assert_eq!(got, contrastive_loss(h_t, &set.labels, &cfg).unwrap());
    assert!(got >= 0.0);
}

#[test]
fn raw_dot_products_match_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let set = random_set(&mut rng, 2, 4);
    let cfg = ContrastiveConfig {
        normalize: false,
        tau: 1.0,
        ..ContrastiveConfig::default()
    };
    let (m, y) = set.to_matrix();
    let got = mvsc_loss(&set, &cfg).unwrap();
    let want = brute_force(&as_rows(&m), &y, 0.9, 1.0, false);
    assert!(rel_err(got, want) < 1e-6);
}

#[test]
fn mvsc_rejects_bad_inputs() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut set = random_set(&mut rng, 2, 4);
    let neg_tau = ContrastiveConfig {
        tau: -0.1,
        ..ContrastiveConfig::default()
    };
    assert!(mvsc_loss(&set, &neg_tau).is_err());
    set.views[3].data_mut()[0] = f64::NAN;
    assert!(mvsc_loss(&set, &ContrastiveConfig::default()).is_err());
    let single = random_set(&mut rng, 1, 4);
    assert!(mvsc_loss(&single, &ContrastiveConfig::default()).is_err());
}

fn check_contrastive_gradient(seed: u64, normalize: bool) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let set = random_set(&mut rng, 3, 4);
    let (m, y) = set.to_matrix();
    let cfg = ContrastiveConfig {
        normalize,
        tau: if normalize { 0.1 } else { 1.0 },
        ..ContrastiveConfig::default()
    };
    let mut tape = Tape::new();
    let x = tape.input(m.clone());
    let l = contrastive_on_tape(&mut tape, x, &y, &cfg).unwrap();
    let grads = tape.backward(l);
    let analytic = grads.input(x).unwrap().clone();
    let eps = 1e-6;
    let mut max_err = 0.0f64;
    for i in 0..m.len() {
        let mut plus = m.clone();
        plus.data_mut()[i] += eps;
        let mut minus = m.clone();
        minus.data_mut()[i] -= eps;
        let numeric = (contrastive_loss(&plus, &y, &cfg).unwrap()
            - contrastive_loss(&minus, &y, &cfg).unwrap())
            / (2.0 * eps);
        let a = analytic.data()[i];
        let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-3);
        max_err = max_err.max(err);
    }
    assert!(max_err < 1e-4, "seed {seed}: rel err {max_err}");
}

#[test]
fn contrastive_gradient_matches_central_differences() {
    for seed in [1, 2, 3] {
        check_contrastive_gradient(seed, true);
        check_contrastive_gradient(seed, false);
    }
}

#[test]
fn mae_gradient_matches_central_differences() {
    for seed in [11u64, 12, 13] {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p: Vec<f64> = (0..6).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let y: Vec<f64> = (0..6).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let value = |p: &[f64]| {
            let mut tape = Tape::new();
            let x = tape.constant(Tensor::new(vec![6, 1], p.to_vec()));
            let l = mae_on_tape(&mut tape, x, &y).unwrap();
            tape.value(l).item()
        };
        let mut tape = Tape::new();
        let x = tape.input(Tensor::new(vec![6, 1], p.clone()));
        let l = mae_on_tape(&mut tape, x, &y).unwrap();
        let g = tape.backward(l).input(x).unwrap().clone();
        for i in 0..6 {
            let eps = 1e-6;
            let mut a = p.clone();
            a[i] += eps;
            let mut b = p.clone();
            b[i] -= eps;
            let numeric = (value(&a) - value(&b)) / (2.0 * eps);
            assert!((g.data()[i] - numeric).abs() < 1e-6);
        }
    }
}

fn random_kd(rng: &mut ChaCha8Rng, b: usize, d: usize) -> KdInputs<f64> {
    let mut t = || Tensor::new(vec![b, d], (0..b * d).map(|_| rng.gen_range(-1.0..1.0)).collect());
    KdInputs {
        h_v: t(),
        h_a: t(),
        f_v: t(),
        f_a: t(),
        h_la: t(),
        h_lv: t(),
        h_av: t(),
        h_t: t(),
    }
}

fn mse(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64
}

#[test]
fn mse_kd_matches_elementwise_recomputation() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let x = random_kd(&mut rng, 3, 5);
    let va = mse(&x.h_v, &x.f_v) + mse(&x.h_a, &x.f_a);
    let pairs = mse(&x.h_lv, &x.h_t) + mse(&x.h_la, &x.h_t) + mse(&x.h_av, &x.h_t);
    let got_va = mse_kd_loss(KdVariant::Va, &x).unwrap();
    let got_pairs = mse_kd_loss(KdVariant::Pairs, &x).unwrap();
    let got_all = mse_kd_loss(KdVariant::All, &x).unwrap();
    assert!((got_va - va).abs() < 1e-12);
    assert!((got_pairs - pairs).abs() < 1e-12);
    assert_eq!(got_all, got_va + got_pairs);

    let mut zero = x.clone();
    zero.h_v = x.f_v.clone();
    zero.h_a = x.f_a.clone();
    zero.h_la = x.h_t.clone();
    zero.h_lv = x.h_t.clone();
    zero.h_av = x.h_t.clone();
    assert_eq!(mse_kd_loss(KdVariant::All, &zero).unwrap(), 0.0);

    let mut bad = x;
    bad.h_v = Tensor::zeros(vec![2, 5]);
    assert!(mse_kd_loss(KdVariant::Va, &bad).is_err());
}

#[test]
fn mse_kd_gradient_matches_central_differences() {
    for seed in [31u64, 32, 33] {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random_kd(&mut rng, 2, 3);
        let mut tape = Tape::new();
        let h_v = tape.input(x.h_v.clone());
        let c = |tape: &mut Tape<f64>, t: &Tensor<f64>| tape.constant(t.clone());
        let nodes = KdNodes {
            h_v,
            h_a: c(&mut tape, &x.h_a),
            f_v: c(&mut tape, &x.f_v),
            f_a: c(&mut tape, &x.f_a),
            h_la: c(&mut tape, &x.h_la),
            h_lv: c(&mut tape, &x.h_lv),
            h_av: c(&mut tape, &x.h_av),
            h_t: c(&mut tape, &x.h_t),
        };
        let l = mse_kd_on_tape(&mut tape, KdVariant::All, &nodes);
        let g = tape.backward(l).input(h_v).unwrap().clone();
        for i in 0..x.h_v.len() {
            let eps = 1e-6;
            let mut a = x.clone();
            a.h_v.data_mut()[i] += eps;
            let mut b = x.clone();
            b.h_v.data_mut()[i] -= eps;
            let numeric = (mse_kd_loss(KdVariant::All, &a).unwrap()
                - mse_kd_loss(KdVariant::All, &b).unwrap())
                / (2.0 * eps);
            assert!(rel_err(g.data()[i], numeric) < 1e-4 || (g.data()[i] - numeric).abs() < 1e-8);
        }
    }
}

#[test]
fn regression_loss_matches_direct_recomputation() {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let y: Vec<f64> = (0..5).map(|_| rng.gen_range(-3.0..3.0)).collect();
    let preds: Vec<(Head, Vec<f64>)> = Head::ALL
        .iter()
        .map(|&h| (h, (0..5).map(|_| rng.gen_range(-3.0..3.0)).collect()))
        .collect();
    let r = regression_loss(&preds, &y).unwrap();
    let mut want = 0.0;
    for (h, p) in &preds {
        let mae = p.iter().zip(&y).map(|(a, b)| (a - b).abs()).sum::<f64>() / 5.0;
        assert_eq!(r.get(*h), mae);
        want += mae;
    }
    assert!((r.total() - want).abs() < 1e-12);
}

fn tiny_model() -> FusionNet<f64> {
    let config = ModelConfig {
        d_model: 8,
        n_heads: 2,
        depth: 1,
        d_hid: 8,
        d_ff: 16,
        input_dims: ModalityDims { l: 6, v: 4, a: 4 },
        dropout: 0.0,
        ..ModelConfig::default()
    };
    FusionNet::new(config, 3).unwrap()
}

#[test]
fn kd_gradients_skip_teacher_parameters() {
    let model = tiny_model();
    let data = generate_synthetic(4, model.config().input_dims, (2, 4), 1, 20.0).unwrap();
    let refs: Vec<_> = data.samples().iter().collect();
    let batch = collate::<f64>(&refs).unwrap();
    for variant in [KdVariant::Va, KdVariant::Pairs, KdVariant::All] {
        let mut tape = Tape::new();
        let out = model.forward_all(&mut tape, &batch).unwrap();
        let l = mse_kd_on_tape(&mut tape, variant, &KdNodes::from_forward(&out));
        let grads = tape.backward(l);
        let mut student_signal = 0.0;
        for (id, name, _) in model.params.iter() {
            let norm = grads
                .param(id)
                .map_or(0.0, |g| g.data().iter().map(|x| x * x).sum::<f64>());
            if FusionNet::<f64>::is_teacher_param(name) || name.starts_with("proj.") {
                if FusionNet::<f64>::is_teacher_param(name) {
                    assert_eq!(norm, 0.0, "{variant:?}: teacher param {name} got gradient");
                }
            } else {
                student_signal += norm;
            }
        }
        assert!(student_signal > 0.0);
    }
}

#[test]
fn total_loss_composition() {
    let model = tiny_model();
    let data = generate_synthetic(4, model.config().input_dims, (2, 4), 2, 20.0).unwrap();
    let refs: Vec<_> = data.samples().iter().collect();
    let batch = collate::<f64>(&refs).unwrap();
    let cfg = ContrastiveConfig::default();
    let mut reports = Vec::new();
    for mode in LossMode::ALL {
        let mut tape = Tape::new();
        let out = model.forward_all(&mut tape, &batch).unwrap();
        let (total, report) = total_loss(&mut tape, mode, &out, &batch.labels, &cfg, 1.0).unwrap();
        assert_eq!(tape.value(total).item(), report.l_total);
        assert!(report.is_finite());
        match mode {
            LossMode::None => {
                assert_eq!(report.l_total, report.l_regression);
                assert!(report.l_mvsc.is_none() && report.l_mse.is_none());
            }
            LossMode::Mvsc | LossMode::Uniview => {
                let aux = report.l_mvsc.unwrap();
                assert!((report.l_total - report.l_regression - aux).abs() < 1e-9);
            }
            _ => {
                let aux = report.l_mse.unwrap();
                assert!((report.l_total - report.l_regression - aux).abs() < 1e-9);
            }
        }
        let json = serde_json::to_string(&report).unwrap();
        assert!(json.contains("\"l_regression\""));
        reports.push(report);
    }
    let reg = reports[0].l_regression;
    assert!(reports.iter().all(|r| r.l_regression == reg));

    // pure value agrees with the taped one
    let mut tape = Tape::new();
    let out = model.forward_all(&mut tape, &batch).unwrap();
    let set = RepresentationSet::from_forward(&tape, &out, &batch.labels);
    assert!((mvsc_loss(&set, &cfg).unwrap() - reports[0].l_mvsc.unwrap()).abs() < 1e-9);
}

#[test]
fn zero_distance_reps_leave_only_regression() {
    let mut tape = Tape::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut t = |tape: &mut Tape<f64>| {
        tape.constant(Tensor::new(vec![3, 2], (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect()))
    };
    let target = t(&mut tape);
    let f_v = t(&mut tape);
    let f_a = t(&mut tape);
    let preds = std::array::from_fn(|_| {
        tape.constant(Tensor::new(vec![3, 1], vec![0.1, 0.2, -0.3]))
    });
    let mut reps = [target; 7];
    reps[Head::V.index()] = f_v;
    reps[Head::A.index()] = f_a;
    let out = mmckd_core::nn::ForwardOutput { reps, preds, f_v, f_a };
    let (_, report) = total_loss(
        &mut tape,
        LossMode::MseAll,
        &out,
        &[0.0, 0.0, 0.0],
        &ContrastiveConfig::default(),
        1.0,
    )
    .unwrap();
    assert_eq!(report.l_mse, Some(0.0));
    assert_eq!(report.l_total, report.l_regression);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn mvsc_is_nonnegative(seed in any::<u64>(), b in 2usize..5, d in 2usize..6,
                           lambda in 0.0f64..4.0, tau in 0.05f64..2.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let set = random_set(&mut rng, b, d);
        let cfg = ContrastiveConfig { lambda, tau, normalize: true };
        prop_assert!(mvsc_loss(&set, &cfg).unwrap() >= -1e-9);
    }

    #[test]
    fn mvsc_is_permutation_invariant(seed in any::<u64>(), b in 2usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let set = random_set(&mut rng, b, 4);
        let (m, y) = set.to_matrix();
        let n = y.len();
        let mut order: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            order.swap(i, rng.gen_range(0..=i));
        }
        let mut data = Vec::new();
        for &i in &order {
            data.extend_from_slice(m.row(i));
        }
        let permuted = Tensor::new(vec![n, 4], data);
        let py: Vec<f64> = order.iter().map(|&i| y[i]).collect();
        let cfg = ContrastiveConfig::default();
        let a = contrastive_loss(&m, &y, &cfg).unwrap();
        let b = contrastive_loss(&permuted, &py, &cfg).unwrap();
        prop_assert!(rel_err(a, b) < 1e-9);
    }

    #[test]
    fn zero_threshold_distinct_labels_gives_six_positives(seed in any::<u64>(), b in 2usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut set = random_set(&mut rng, b, 3);
        set.labels = (0..b).map(|i| i as f64 * 0.37 - 1.0).collect();
        let (_, y) = set.to_matrix();
        prop_assert!(positive_counts(&y, 0.0).iter().all(|&c| c == 6));
    }

    #[test]
    fn oracle_agreement_random(seed in any::<u64>(), b in 2usize..5, d in prop::sample::select(vec![4usize, 8]),
                               lambda in prop::sample::select(vec![0.0, 0.9, 10.0]),
                               tau in prop::sample::select(vec![0.1, 1.0])) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let set = random_set(&mut rng, b, d);
        let cfg = ContrastiveConfig { lambda, tau, normalize: true };
        let (m, y) = set.to_matrix();
        let want = brute_force(&as_rows(&m), &y, lambda, tau, true);
        let got = mvsc_loss(&set, &cfg).unwrap();
        prop_assert!(rel_err(got, want) < 1e-6 || (got - want).abs() < 1e-12);
    }
}
