mod common;

use proptest::prelude::*;
use typogen::modeling::{backward_stepwise, fit_mlogit, fitted_probabilities, lrt, ModelSpec, Outcome};
use typogen::psychometrics::PredictorTable;

fn spec(predictors: &[&str]) -> ModelSpec {
    ModelSpec {
        reference_class: Some("A".into()),
        predictors: predictors.iter().map(|p| p.to_string()).collect(),
    }
}

fn argmax(row: &[f64]) -> usize {
    row.iter().enumerate().fold(0, |b, (i, &v)| if v > row[b] { i } else { b })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn fitted_probabilities_are_a_distribution(seed in 0u64..10_000) {
        let d = common::logit_data(seed, 150);
        let fit = fit_mlogit(&d.table, &d.outcome, &spec(&["x1", "x2", "z1"])).unwrap();
        prop_assert!(fit.converged);
        prop_assert!(fit.ll_trace.windows(2).all(|w| w[1] >= w[0] - 1e-9));
        let p = fitted_probabilities(&fit, &d.table, &d.outcome).unwrap();
        for i in 0..p.nrows() {
            let row: Vec<f64> = p.row(i).iter().copied().collect();
            prop_assert!(row.iter().all(|&v| v > 0.0 && v < 1.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn affine_predictor_changes_leave_the_fit_unchanged(
        seed in 0u64..10_000,
        a in prop_oneof![-50.0f64..-0.05, 0.05f64..50.0],
        b in -100.0f64..100.0,
    ) {
        let d = common::logit_data(seed, 150);
        let s = spec(&["x1", "x2"]);
        let base = fit_mlogit(&d.table, &d.outcome, &s).unwrap();
        let mut moved = PredictorTable::new(d.table.ids.clone());
        moved.push("x1", d.table.column("x1").unwrap().iter().map(|v| a * v + b).collect()).unwrap();
        moved.push("x2", d.table.column("x2").unwrap().to_vec()).unwrap();
        let other = fit_mlogit(&moved, &d.outcome, &s).unwrap();
        prop_assert!((base.log_likelihood - other.log_likelihood).abs() < 1e-6);
        // slope rescales by 1/a
        for c in &base.classes {
            let (b0, b1) = (base.coefficient(c, "x1").unwrap(), other.coefficient(c, "x1").unwrap());
            prop_assert!((b0 - a * b1).abs() < 1e-5 * (1.0 + b0.abs()));
        }
        let p = fitted_probabilities(&base, &d.table, &d.outcome).unwrap();
        let q = fitted_probabilities(&other, &moved, &d.outcome).unwrap();
        prop_assert!((&p - &q).amax() < 1e-6);
        for i in 0..p.nrows() {
            let (pr, qr): (Vec<f64>, Vec<f64>) = (p.row(i).iter().copied().collect(), q.row(i).iter().copied().collect());
            let gap = {
                let mut s = pr.clone();
                s.sort_by(|x, y| y.total_cmp(x));
                s[0] - s[1]
            };
            if gap > 1e-6 {
                prop_assert_eq!(argmax(&pr), argmax(&qr));
            }
        }
    }

    #[test]
    fn lrt_deviance_is_nonnegative(seed in 0u64..10_000) {
        let d = common::logit_data(seed, 150);
        let s = spec(&["x1", "z1"]);
        for p in ["x1", "z1"] {
            let r = lrt(&d.table, &d.outcome, &s, p).unwrap();
            prop_assert!(r.deviance >= -1e-8);
            prop_assert!((0.0..=1.0).contains(&r.p_value));
            prop_assert_eq!(r.df, 2);
        }
    }
}

#[test]
fn stepwise_is_locally_optimal_and_monotone() {
    for seed in 0..4 {
        let d = common::logit_data(500 + seed, 300);
        let all: Vec<&str> = ["x1", "x2", "x3", "x4", "x5", "z1", "z2", "z3", "z4", "z5"].to_vec();
        let res = backward_stepwise(&d.table, &d.outcome, &spec(&all)).unwrap();
        let aics: Vec<f64> = res.trace.iter().map(|s| s.current_aic).collect();
        assert!(aics.windows(2).all(|w| w[1] <= w[0]), "{aics:?}");
        assert!(res.fit.aic <= res.initial_aic);
        let mut kept = res.spec.predictors.clone();
        kept.extend(res.removed());
        kept.sort();
        let mut initial = res.initial_predictors.clone();
        initial.sort();
        assert_eq!(kept, initial);
        for p in &res.spec.predictors {
            let refit = fit_mlogit(&d.table, &d.outcome, &res.spec.without(p)).unwrap();
            assert!(refit.aic > res.fit.aic, "removing {p} would not raise AIC");
        }
        // strong effects survive
        for p in ["x1", "x2", "x3"] {
            assert!(res.spec.predictors.iter().any(|q| q == p), "seed {seed} dropped {p}");
        }
    }
}

#[test]
fn duplicated_predictor_is_rank_deficient() {
    let d = common::logit_data(9, 120);
    let mut t = d.table.clone();
    t.push("x1_copy", d.table.column("x1").unwrap().to_vec()).unwrap();
    assert!(fit_mlogit(&t, &d.outcome, &spec(&["x1", "x1_copy"])).is_err());
}

#[test]
fn perfectly_separated_classes_are_flagged() {
    let n = 40;
    let mut t = PredictorTable::new((0..n).map(|i| format!("r{i}")).collect());
    t.push("x", (0..n).map(|i| i as f64).collect()).unwrap();
    let labels: Vec<Option<&str>> = (0..n).map(|i| Some(if i < 20 { "A" } else { "B" })).collect();
    let o = Outcome::new("y", vec!["A".into(), "B".into()], &labels).unwrap();
    let r = fit_mlogit(&t, &o, &spec(&["x"]));
    assert!(r.is_err() || !r.unwrap().converged);
}

#[test]
fn excluded_respondents_are_left_out() {
    let d = common::logit_data(11, 200);
    let mut labels: Vec<Option<&str>> = d.outcome.labels.iter().map(|l| l.map(|i| ["A", "B", "C"][i])).collect();
    for l in labels.iter_mut().step_by(4) {
        *l = None;
    }
    let o = Outcome::new("cls", d.outcome.levels.clone(), &labels).unwrap();
    let fit = fit_mlogit(&d.table, &o, &spec(&["x1"])).unwrap();
    assert_eq!(fit.n_used, 150);
}
