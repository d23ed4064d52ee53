mod common;

use ccup::classify::{classify_with, LOGIT_SCALE};
use ccup::eval::{ablation_grid, sweep, Evaluator, SweepAxis};
use ccup::oracle::{self, MinimizeOptions};
use ccup::projection::{
    ablation_matrix, ccup_matrix, nullspace_projector, partial_projector, Components,
    RegularizationConfig,
};
use ccup::store::{EmbeddingMatrix, LabeledDataset};
use ccup::synthetic::{generate, oracle_retention_bound, SyntheticSpec};
use ccup::Exec;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use common::{randn, unit_columns};

fn perturbation_probe(
    w: &DMatrix<f64>,
    f: impl Fn(&DMatrix<f64>) -> f64,
    seed: u64,
) -> (f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base = f(w);
    let d = w.nrows();
    let mut lowest = f64::INFINITY;
    for _ in 0..1000 {
        let delta = randn(d, d, &mut rng);
        let delta = &delta / delta.norm();
        lowest = lowest.min(f(&(w + delta * 1e-3)));
    }
    (base, lowest)
}

#[test]
fn forget_retain_variant_is_a_local_minimum() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let (t_f, t_r) = (unit_columns(16, 3, &mut rng), unit_columns(16, 5, &mut rng));
    let cfg = RegularizationConfig::default();
    let w = ablation_matrix(&t_f, &t_r, cfg, Components::FORGET_RETAIN).unwrap();
    // Objective without the identity term.
    let f = |m: &DMatrix<f64>| {
        let v = oracle::objective(m, &t_f, &t_r, cfg).unwrap();
        v.forget_term + v.retain_term
    };
    let (base, lowest) = perturbation_probe(w.values(), f, 22);
    assert!(base <= lowest, "{base} > {lowest}");
}

#[test]
fn descent_minimizer_beats_perturbations() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let (t_f, t_r) = (unit_columns(8, 2, &mut rng), unit_columns(8, 3, &mut rng));
    let cfg = RegularizationConfig::default();
    let w = oracle::minimize(&t_f, &t_r, cfg, MinimizeOptions::default()).unwrap();
    let f = |m: &DMatrix<f64>| oracle::objective(m, &t_f, &t_r, cfg).unwrap().total;
    let (base, lowest) = perturbation_probe(w.values(), f, 24);
    assert!(base <= lowest, "{base} > {lowest}");
}

#[test]
fn objective_terms_sum_to_total() {
    let mut rng = ChaCha8Rng::seed_from_u64(25);
    let (t_f, t_r) = (unit_columns(7, 2, &mut rng), unit_columns(7, 4, &mut rng));
    for _ in 0..20 {
        let w = randn(7, 7, &mut rng);
        let v = oracle::objective(&w, &t_f, &t_r, RegularizationConfig::new(3.0, 0.5).unwrap()).unwrap();
        let sum = v.identity_term + v.forget_term + v.retain_term;
        assert!((v.total - sum).abs() <= 1e-10 * v.total);
        assert!(v.identity_term >= 0.0 && v.forget_term >= 0.0 && v.retain_term >= 0.0);
    }
}

fn fixture(overlap: f64) -> (SyntheticSpec, ccup::synthetic::SyntheticData) {
    let spec = SyntheticSpec { overlap, ..SyntheticSpec::default() };
    let data = generate(&spec).unwrap();
    (spec, data)
}

#[test]
fn bf_is_independent_of_the_projection() {
    let (_, data) = fixture(0.9);
    let (t_f, t_r) = data.manifest.split_texts(&data.texts).unwrap();
    let ev = Evaluator::new(&data.dataset, &data.manifest, &data.texts).unwrap();
    let mut reports = Vec::new();
    for axis in [SweepAxis::Lambda, SweepAxis::Mu, SweepAxis::Alpha] {
        let values = if axis == SweepAxis::Alpha { vec![0.0, 0.5, 1.0] } else { vec![0.0, 1.0, 100.0] };
        reports.extend(sweep(&ev, &t_f, &t_r, axis, &values, RegularizationConfig::default()).unwrap().reports());
    }
    reports.extend(ablation_grid(&ev, &t_f, &t_r, RegularizationConfig::default()).unwrap().into_iter().map(|(_, r)| r));
    for r in &reports {
        assert_eq!((r.bf_forget, r.bf_retain), (ev.bf_forget(), ev.bf_retain()));
        assert_eq!(r.mia, (r.bf_forget - r.af_forget) - (r.bf_retain - r.af_retain));
        for a in [r.bf_forget, r.af_forget, r.bf_retain, r.af_retain] {
            assert!((0.0..=100.0).contains(&a));
        }
    }
}

#[test]
fn nullspace_is_identity_on_the_orthogonal_complement() {
    // Retain features exactly orthogonal to span(T_f).
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let frame = randn(12, 12, &mut rng).qr().q();
    let t_f = EmbeddingMatrix::new(frame.columns(0, 3).into_owned()).unwrap();
    let t_r = EmbeddingMatrix::new(frame.columns(3, 4).into_owned()).unwrap();
    let mut texts = t_f.values().clone().insert_columns(3, 4, 0.0);
    texts.columns_mut(3, 4).copy_from(t_r.values());
    let texts = EmbeddingMatrix::new(texts).unwrap();
    let manifest = ccup::eval::split_classes(
        &ccup::store::ClassManifest::from_names(&["f0", "f1", "f2", "r0", "r1", "r2", "r3"]).unwrap(),
        &ccup::eval::Split::Named(vec!["f0".into(), "f1".into(), "f2".into()]),
        0,
    )
    .unwrap();
    let mut feats = Vec::new();
    let mut labels = Vec::new();
    for c in 0..7 {
        for _ in 0..5 {
            let mut x = texts.column(c) * 2.0 + frame.columns(7, 5) * DVector::from_fn(5, |_, _| rand::Rng::random_range(&mut rng, -0.3..0.3));
            if c >= 3 {
                // keep retain features inside the complement of span(T_f)
                x = &x - t_f.values() * (t_f.values().transpose() * &x);
            }
            feats.push(x.as_slice().to_vec());
            labels.push(c);
        }
    }
    let ds = LabeledDataset::new(EmbeddingMatrix::from_columns(12, &feats).unwrap(), labels, 7).unwrap();
    let ev = Evaluator::new(&ds, &manifest, &texts).unwrap();
    let r = ev.evaluate(&nullspace_projector(&t_f).unwrap()).unwrap();
    assert_eq!(r.af_retain, r.bf_retain);
    assert_eq!(r.af_forget, 0.0);
}

#[test]
fn nullspace_drives_forget_accuracy_to_chance() {
    let (spec, data) = fixture(0.0);
    let (t_f, _) = data.manifest.split_texts(&data.texts).unwrap();
    let ev = Evaluator::new(&data.dataset, &data.manifest, &data.texts).unwrap();
    let r = ev.evaluate(&nullspace_projector(&t_f).unwrap()).unwrap();
    assert!(r.af_forget <= 100.0 / spec.n_classes as f64 + 5.0);
}

#[test]
fn retention_bound_holds_on_fixtures() {
    for (seed, concentration, text_noise) in [(0, 0.15, 0.05), (1, 0.3, 0.3), (2, 0.4, 0.5), (3, 0.0, 0.0)] {
        let spec = SyntheticSpec { seed, concentration, text_noise, ..SyntheticSpec::default() };
        let data = generate(&spec).unwrap();
        let bound = oracle_retention_bound(&spec, &data.manifest).unwrap();
        let (t_f, _) = data.manifest.split_texts(&data.texts).unwrap();
        let ev = Evaluator::new(&data.dataset, &data.manifest, &data.texts).unwrap();
        let af = ev.evaluate(&nullspace_projector(&t_f).unwrap()).unwrap().af_retain;
        assert!(bound >= af, "seed {seed}: bound {bound} < AF retain {af}");
    }
}

#[test]
fn overlap_hurts_nullspace_more_than_ccup() {
    let overlaps = [0.7, 0.8, 0.9, 0.95];
    let mut null_retain = Vec::new();
    let mut ccup_retain = Vec::new();
    for &overlap in &overlaps {
        let (_, data) = fixture(overlap);
        let (t_f, t_r) = data.manifest.split_texts(&data.texts).unwrap();
        let ev = Evaluator::new(&data.dataset, &data.manifest, &data.texts).unwrap();
        null_retain.push(ev.evaluate(&nullspace_projector(&t_f).unwrap()).unwrap().af_retain);
        ccup_retain.push(
            ev.evaluate(&ccup_matrix(&t_f, &t_r, RegularizationConfig::default()).unwrap())
                .unwrap()
                .af_retain,
        );
    }
    assert!(null_retain.windows(2).all(|w| w[1] < w[0]), "{null_retain:?}");
    for (i, &overlap) in overlaps.iter().enumerate() {
        if overlap >= 0.5 {
            assert!(ccup_retain[i] >= null_retain[i], "{ccup_retain:?} vs {null_retain:?}");
        }
    }
    let null_drop = null_retain[0] - null_retain[3];
    let ccup_drop = ccup_retain[0] - ccup_retain[3];
    assert!(ccup_drop <= null_drop, "ccup drop {ccup_drop} > nullspace drop {null_drop}");
}

#[test]
fn ablation_forget_accuracy_is_low() {
    for overlap in [0.0, 0.9] {
        let (_, data) = fixture(overlap);
        let (t_f, t_r) = data.manifest.split_texts(&data.texts).unwrap();
        let ev = Evaluator::new(&data.dataset, &data.manifest, &data.texts).unwrap();
        for (c, r) in ablation_grid(&ev, &t_f, &t_r, RegularizationConfig::default()).unwrap() {
            assert!(r.af_forget <= 5.0, "{c}: forget AF {}", r.af_forget);
        }
    }
}

#[test]
fn results_do_not_depend_on_execution_policy() {
    let (_, data) = fixture(0.9);
    let (t_f, t_r) = data.manifest.split_texts(&data.texts).unwrap();
    let seq = Evaluator::with_exec(&data.dataset, &data.manifest, &data.texts, Exec::Sequential).unwrap();
    let par = Evaluator::with_exec(&data.dataset, &data.manifest, &data.texts, Exec::Parallel).unwrap();
    let cfg = RegularizationConfig::default();
    let a = sweep(&seq, &t_f, &t_r, SweepAxis::Lambda, &[1.0, 10.0, 100.0], cfg).unwrap();
    let b = sweep(&par, &t_f, &t_r, SweepAxis::Lambda, &[1.0, 10.0, 100.0], cfg).unwrap();
    assert_eq!(a, b);
    let s1 = classify_with(data.dataset.features(), &data.texts, None, Exec::Sequential).unwrap();
    let s2 = classify_with(data.dataset.features(), &data.texts, None, Exec::Parallel).unwrap();
    assert_eq!(s1, s2);
}

#[test]
fn partial_projection_shrinks_span_directions() {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let t_f = unit_columns(9, 3, &mut rng);
    let u = t_f.column(1);
    for alpha in [0.0, 0.25, 0.5, 0.9, 1.0] {
        let p = partial_projector(&t_f, alpha).unwrap();
        assert!(((p.values() * &u).norm() - (1.0 - alpha)).abs() < 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn argmax_ignores_the_logit_scale(seed in any::<u64>(), scale in 0.01f64..1e4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = unit_columns(10, 30, &mut rng);
        let texts = unit_columns(10, 6, &mut rng);
        let s = classify_with(&x, &texts, None, Exec::Sequential).unwrap();
        let rescaled = &s.scores * (scale / LOGIT_SCALE);
        for (j, row) in rescaled.row_iter().enumerate() {
            prop_assert_eq!(row.transpose().argmax().0, s.predictions[j]);
        }
    }

    #[test]
    fn gradient_check_over_parameter_grid(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (t_f, t_r) = (unit_columns(5, 2, &mut rng), unit_columns(5, 2, &mut rng));
        let w = randn(5, 5, &mut rng);
        for lambda in [0.0, 1.0, 100.0] {
            for mu in [0.0, 1.0, 100.0] {
                let cfg = RegularizationConfig::new(lambda, mu).unwrap();
                let g = oracle::gradient(&w, &t_f, &t_r, cfg).unwrap();
                let f = |m: &DMatrix<f64>| oracle::objective(m, &t_f, &t_r, cfg).unwrap().total;
                for i in 0..5 {
                    for j in 0..5 {
                        let (mut wp, mut wm) = (w.clone(), w.clone());
                        wp[(i, j)] += 1e-6;
                        wm[(i, j)] -= 1e-6;
                        let fd = (f(&wp) - f(&wm)) / 2e-6;
                        prop_assert!((fd - g[(i, j)]).abs() <= 1e-4 * g[(i, j)].abs().max(1.0));
                    }
                }
            }
        }
    }

    #[test]
    fn gram_and_basis_agree_when_conditioned(seed in any::<u64>(), d in 3usize..30) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t = unit_columns(d, (d / 3).max(1), &mut rng);
        prop_assume!(common::condition_of_gram(t.values()) <= 1e6);
        let a = ccup::projection::nullspace_from_gram(t.values()).unwrap();
        let b = ccup::projection::nullspace_from_basis(t.values());
        prop_assert!((a - b).norm() <= 1e-8);
    }
}
