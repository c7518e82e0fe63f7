//! Multinomial logistic regression of typology class on predictors:
//! maximum-likelihood fits, likelihood-ratio tests, odds ratios and
//! backward stepwise selection by AIC.

mod mlogit;
mod stepwise;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::error::{Error, Result};
use crate::pattern::Assignment;
use crate::psychometrics::PredictorTable;

pub use mlogit::{
    fit_mlogit, fit_mlogit_with, fitted_probabilities, mlogit_log_likelihood, odds_ratios, MlogitFit, MlogitOptions,
    SEPARATION_LIMIT,
};
pub use stepwise::{backward_stepwise, StepCandidate, StepRecord, StepwiseResult};

/// Class membership per respondent, aligned with a predictor table.
#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    pub name: String,
    /// Class labels in typology order.
    pub levels: Vec<String>,
    /// Index into `levels`, `None` for excluded respondents.
    pub labels: Vec<Option<usize>>,
}

impl Outcome {
    pub fn new(name: &str, levels: Vec<String>, labels: &[Option<&str>]) -> Result<Self> {
        let labels = labels
            .iter()
            .map(|l| match l {
                None => Ok(None),
                Some(l) => levels
                    .iter()
                    .position(|x| x == l)
                    .map(Some)
                    .ok_or_else(|| Error::InvalidInput(format!("class `{l}` is not a level of `{name}`"))),
            })
            .collect::<Result<_>>()?;
        Ok(Outcome {
            name: name.to_string(),
            levels,
            labels,
        })
    }

    pub fn from_assignments(name: &str, levels: Vec<String>, rows: &[(String, Assignment)]) -> Result<Self> {
        let labels: Vec<Option<&str>> = rows.iter().map(|(_, a)| a.label()).collect();
        Outcome::new(name, levels, &labels)
    }

    pub fn from_leaves(name: &str, levels: Vec<String>, rows: &[(String, String)]) -> Result<Self> {
        let labels: Vec<Option<&str>> = rows.iter().map(|(_, l)| Some(l.as_str())).collect();
        Outcome::new(name, levels, &labels)
    }

    pub fn counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.levels.len()];
        for l in self.labels.iter().flatten() {
            c[*l] += 1;
        }
        c
    }

    /// Most populous level, earliest on ties.
    pub fn most_populous(&self) -> Option<String> {
        let c = self.counts();
        let best = c.iter().copied().max()?;
        if best == 0 {
            return None;
        }
        c.iter().position(|&v| v == best).map(|i| self.levels[i].clone())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    /// Defaults to the most populous class.
    #[serde(default)]
    pub reference_class: Option<String>,
    pub predictors: Vec<String>,
}

impl ModelSpec {
    pub fn without(&self, predictor: &str) -> ModelSpec {
        ModelSpec {
            reference_class: self.reference_class.clone(),
            predictors: self.predictors.iter().filter(|p| *p != predictor).cloned().collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LrtResult {
    pub predictor: String,
    pub deviance: f64,
    pub df: usize,
    pub p_value: f64,
    pub stars: String,
}

pub fn significance_stars(p: f64) -> &'static str {
    if p < 0.001 {
        "***"
    } else if p < 0.01 {
        "**"
    } else if p < 0.05 {
        "*"
    } else {
        ""
    }
}

fn lrt_against(full: &MlogitFit, reduced: &MlogitFit, predictor: &str) -> LrtResult {
    let deviance = 2.0 * (full.log_likelihood - reduced.log_likelihood);
    let df = full.classes.len();
    let chi = ChiSquared::new(df as f64).expect("positive df");
    let p_value = (1.0 - chi.cdf(deviance.max(0.0))).clamp(0.0, 1.0);
    LrtResult {
        predictor: predictor.to_string(),
        deviance,
        df,
        p_value,
        stars: significance_stars(p_value).to_string(),
    }
}

/// Likelihood-ratio test dropping all class coefficients of `predictor`
/// jointly.
pub fn lrt(table: &PredictorTable, outcome: &Outcome, spec: &ModelSpec, predictor: &str) -> Result<LrtResult> {
    if !spec.predictors.iter().any(|p| p == predictor) {
        return Err(Error::InvalidInput(format!("predictor `{predictor}` is not in the model")));
    }
    let full = fit_mlogit(table, outcome, spec)?;
    lrt_for_fit(table, outcome, &full, predictor)
}

/// LRT for one predictor of an existing fit.
pub fn lrt_for_fit(table: &PredictorTable, outcome: &Outcome, full: &MlogitFit, predictor: &str) -> Result<LrtResult> {
    let spec = ModelSpec {
        reference_class: Some(full.reference_class.clone()),
        predictors: full.predictors.clone(),
    };
    let d = mlogit::Design::build(table, outcome, &spec.without(predictor))?;
    let reduced = mlogit::fit_design(&d, &outcome.name, &MlogitOptions::default(), Some(full))?;
    Ok(lrt_against(full, &reduced, predictor))
}

/// Odds ratios as CSV: one row per predictor, one column per non-reference
/// class, then the LRT significance marker when supplied.
pub fn odds_ratio_csv(fit: &MlogitFit, lrts: Option<&[LrtResult]>) -> String {
    let or = odds_ratios(fit);
    let mut out = String::from("predictor");
    for c in &fit.classes {
        out.push(',');
        out.push_str(c);
    }
    if lrts.is_some() {
        out.push_str(",significance");
    }
    out.push('\n');
    for (j, p) in fit.predictors.iter().enumerate() {
        out.push_str(p);
        for c in 0..fit.classes.len() {
            out.push_str(&format!(",{:.6}", or[(c, j)]));
        }
        if let Some(l) = lrts {
            let stars = l.iter().find(|r| r.predictor == *p).map_or("", |r| r.stars.as_str());
            out.push(',');
            out.push_str(stars);
        }
        out.push('\n');
    }
    out
}

/// model_fit.json body.
pub fn model_report(fit: &MlogitFit, lrts: &[LrtResult], stepwise: Option<&StepwiseResult>) -> serde_json::Value {
    let or = odds_ratios(fit);
    let coefficients: Vec<serde_json::Value> = fit
        .classes
        .iter()
        .enumerate()
        .map(|(c, class)| {
            let mut m = serde_json::Map::new();
            m.insert("(intercept)".into(), fit.coefficients[(c, 0)].into());
            for (j, p) in fit.predictors.iter().enumerate() {
                m.insert(p.clone(), fit.coefficients[(c, j + 1)].into());
            }
            serde_json::json!({"class": class, "coefficients": m})
        })
        .collect();
    let odds: Vec<serde_json::Value> = fit
        .predictors
        .iter()
        .enumerate()
        .map(|(j, p)| {
            let mut m = serde_json::Map::new();
            for (c, class) in fit.classes.iter().enumerate() {
                m.insert(class.clone(), or[(c, j)].into());
            }
            serde_json::json!({"predictor": p, "odds_ratios": m})
        })
        .collect();
    serde_json::json!({
        "outcome": fit.outcome,
        "spec": {"reference_class": fit.reference_class, "predictors": fit.predictors},
        "classes": fit.classes,
        "n_used": fit.n_used,
        "log_likelihood": fit.log_likelihood,
        "aic": fit.aic,
        "iterations": fit.iterations,
        "converged": fit.converged,
        "coefficients": coefficients,
        "odds_ratios": odds,
        "lrt": lrts,
        "stepwise": stepwise.map(|s| serde_json::json!({
            "initial_predictors": s.initial_predictors,
            "initial_aic": s.initial_aic,
            "removed": s.removed(),
            "trace": s.trace,
        })),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn table(cols: &[(&str, Vec<f64>)]) -> PredictorTable {
        let n = cols[0].1.len();
        let mut t = PredictorTable::new((0..n).map(|i| format!("r{i}")).collect());
        for (name, v) in cols {
            t.push(name, v.clone()).unwrap();
        }
        t
    }

    fn outcome(levels: &[&str], y: &[usize]) -> Outcome {
        Outcome {
            name: "y".into(),
            levels: levels.iter().map(|s| s.to_string()).collect(),
            labels: y.iter().map(|&v| Some(v)).collect(),
        }
    }

    fn saturated() -> (PredictorTable, Outcome) {
        // x=1: 30 of 40 in B; x=0: 10 of 40 in B
        let mut x = Vec::new();
        let mut y = Vec::new();
        for (xv, yes) in [(1.0, 30), (0.0, 10)] {
            for i in 0..40 {
                x.push(xv);
                y.push(usize::from(i < yes));
            }
        }
        (table(&[("x", x)]), outcome(&["A", "B"], &y))
    }

    fn spec(preds: &[&str]) -> ModelSpec {
        ModelSpec {
            reference_class: None,
            predictors: preds.iter().map(|s| s.to_string()).collect(),
        }
    }

    #[test]
    fn closed_form_two_by_two() {
        let (t, o) = saturated();
        let mut o = o;
        o.levels = vec!["A".into(), "B".into()];
        let s = ModelSpec {
            reference_class: Some("A".into()),
            predictors: vec!["x".into()],
        };
        let fit = fit_mlogit(&t, &o, &s).unwrap();
        assert!((fit.coefficients[(0, 1)] - 9f64.ln()).abs() < 1e-6);
        assert!((fit.coefficients[(0, 0)] - (10.0f64 / 30.0).ln()).abs() < 1e-6);
        assert!((odds_ratios(&fit)[(0, 0)] - 9.0).abs() < 1e-5);
        assert!((fit.aic - (4.0 - 2.0 * fit.log_likelihood)).abs() < 1e-12);
        assert!(fit.ll_trace.windows(2).all(|w| w[1] >= w[0]));
    }

    #[test]
    fn intercept_only_matches_shares() {
        let y = [0, 0, 0, 1, 1, 2, 2, 2, 2, 0];
        let o = outcome(&["a", "b", "c"], &y);
        let t = PredictorTable::new((0..10).map(|i| i.to_string()).collect());
        let fit = fit_mlogit(&t, &o, &spec(&[])).unwrap();
        // ties on the most populous class go to the earliest level
        assert_eq!(fit.reference_class, "a");
        let p = fit.probabilities(&[]);
        for (got, want) in p.iter().zip([0.4, 0.2, 0.4]) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn separation_and_rank_errors() {
        let t = table(&[("x", vec![0., 0., 0., 1., 1., 1.]), ("w", vec![1., 2., 1., 2., 1., 2.])]);
        let o = outcome(&["a", "b"], &[0, 0, 0, 1, 1, 1]);
        match fit_mlogit(&t, &o, &spec(&["x"])) {
            Err(Error::Separation { predictor, class }) => assert_eq!((predictor.as_str(), class.as_str()), ("x", "b")),
            other => panic!("{other:?}"),
        }
        let t = table(&[
            ("x", vec![0., 1., 0., 1., 2., 1., 3., 0.]),
            ("x2", vec![1., 3., 1., 3., 5., 3., 7., 1.]),
        ]);
        let o = outcome(&["a", "b"], &[0, 1, 1, 0, 1, 0, 1, 0]);
        match fit_mlogit(&t, &o, &spec(&["x", "x2"])) {
            Err(Error::RankDeficient(cols)) => assert_eq!(cols, ["x", "x2"]),
            other => panic!("{other:?}"),
        }
        let t = table(&[("k", vec![2.0; 8])]);
        assert!(matches!(fit_mlogit(&t, &o, &spec(&["k"])), Err(Error::ConstantPredictor(_))));
    }

    #[test]
    fn excluded_respondents_are_omitted() {
        let (t, mut o) = saturated();
        o.labels[0] = None;
        let fit = fit_mlogit(&t, &o, &spec(&["x"])).unwrap();
        assert_eq!(fit.n_used, 79);
    }

    fn simulate(seed: u64, n: usize, beta: &[f64]) -> (PredictorTable, Outcome) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut cols = vec![Vec::with_capacity(n); beta.len()];
        let mut y = Vec::with_capacity(n);
        for _ in 0..n {
            let x: Vec<f64> = beta.iter().map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
            let eta: f64 = x.iter().zip(beta).map(|(a, b)| a * b).sum();
            let p = 1.0 / (1.0 + (-eta).exp());
            y.push(usize::from(rng.random::<f64>() < p));
            for (c, v) in cols.iter_mut().zip(x) {
                c.push(v);
            }
        }
        let names: Vec<String> = (0..beta.len()).map(|j| format!("x{j}")).collect();
        let t = table(&names.iter().map(|s| s.as_str()).zip(cols).collect::<Vec<_>>());
        (t, outcome(&["a", "b"], &y))
    }

    #[test]
    fn informative_predictor_is_significant() {
        let (t, o) = simulate(3, 1000, &[2.0, 0.0]);
        let s = spec(&["x0", "x1"]);
        let r = lrt(&t, &o, &s, "x0").unwrap();
        assert!(r.p_value < 0.001 && r.stars == "***");
        assert_eq!(r.df, 1);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for seed in 0..3 {
            let (t, o) = simulate(seed, 60, &[1.0, -0.5]);
            let s = spec(&["x0", "x1"]);
            let coef = DMatrix::from_fn(1, 3, |_, _| rng.random::<f64>() - 0.5);
            let (_, g) = mlogit_log_likelihood(&t, &o, &s, &coef).unwrap();
            for j in 0..3 {
                let h = 1e-6;
                let mut up = coef.clone();
                let mut dn = coef.clone();
                up[(0, j)] += h;
                dn[(0, j)] -= h;
                let fd = (mlogit_log_likelihood(&t, &o, &s, &up).unwrap().0
                    - mlogit_log_likelihood(&t, &o, &s, &dn).unwrap().0)
                    / (2.0 * h);
                assert!((fd - g[(0, j)]).abs() <= 1e-5 * g[(0, j)].abs().max(1.0));
            }
        }
    }

    #[test]
    fn odds_ratio_csv_layout() {
        let (t, o) = saturated();
        let fit = fit_mlogit(&t, &o, &spec(&["x"])).unwrap();
        let csv = odds_ratio_csv(&fit, None);
        assert!(csv.starts_with("predictor,B\nx,"));
    }
}
