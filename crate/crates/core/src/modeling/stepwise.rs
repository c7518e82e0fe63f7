use rayon::prelude::*;
use serde::Serialize;

use super::{mlogit::Design, ModelSpec, Outcome};
use super::{MlogitFit, MlogitOptions};
use crate::error::Result;
use crate::psychometrics::PredictorTable;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepCandidate {
    pub removed: String,
    /// `None` when the refit failed.
    pub aic: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepRecord {
    pub step: usize,
    pub current_aic: f64,
    pub candidates: Vec<StepCandidate>,
    pub removed: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepwiseResult {
    pub initial_predictors: Vec<String>,
    pub initial_aic: f64,
    pub spec: ModelSpec,
    pub fit: MlogitFit,
    pub trace: Vec<StepRecord>,
}

impl StepwiseResult {
    pub fn removed(&self) -> Vec<String> {
        self.trace.iter().filter_map(|s| s.removed.clone()).collect()
    }
}

/// Backward elimination: drop the predictor whose removal gives the lowest
/// AIC while that AIC does not exceed the current one. Ties go to the
/// predictor declared first. Candidate refits run in parallel; failed ones
/// are logged and skipped.
pub fn backward_stepwise(table: &PredictorTable, outcome: &Outcome, spec: &ModelSpec) -> Result<StepwiseResult> {
    let opts = MlogitOptions::default();
    let fit_spec = |s: &ModelSpec, warm: Option<&MlogitFit>| -> Result<MlogitFit> {
        let d = Design::build(table, outcome, s)?;
        super::mlogit::fit_design(&d, &outcome.name, &opts, warm)
    };
    let mut current_fit = fit_spec(spec, None)?;
    // pin the reference so every candidate shares it
    let mut current = ModelSpec {
        reference_class: Some(current_fit.reference_class.clone()),
        predictors: spec.predictors.clone(),
    };
    let initial_aic = current_fit.aic;
    let mut trace = Vec::new();

    while !current.predictors.is_empty() {
        let results: Vec<(String, Result<MlogitFit>)> = current
            .predictors
            .par_iter()
            .map(|p| (p.clone(), fit_spec(&current.without(p), Some(&current_fit))))
            .collect();
        let mut candidates = Vec::with_capacity(results.len());
        let mut best: Option<(usize, f64)> = None;
        for (i, (p, r)) in results.iter().enumerate() {
            match r {
                Ok(f) => {
                    candidates.push(StepCandidate {
                        removed: p.clone(),
                        aic: Some(f.aic),
                        error: None,
                    });
                    if best.is_none_or(|(_, a)| f.aic < a) {
                        best = Some((i, f.aic));
                    }
                }
                Err(e) => {
                    log::warn!("stepwise: refit without `{p}` failed: {e}");
                    candidates.push(StepCandidate {
                        removed: p.clone(),
                        aic: None,
                        error: Some(e.to_string()),
                    });
                }
            }
        }
        let step = trace.len() + 1;
        match best {
            Some((i, aic)) if aic <= current_fit.aic => {
                let removed = current.predictors[i].clone();
                trace.push(StepRecord {
                    step,
                    current_aic: current_fit.aic,
                    candidates,
                    removed: Some(removed.clone()),
                });
                current = current.without(&removed);
                current_fit = results.into_iter().nth(i).unwrap().1?;
            }
            _ => {
                trace.push(StepRecord {
                    step,
                    current_aic: current_fit.aic,
                    candidates,
                    removed: None,
                });
                break;
            }
        }
    }

    Ok(StepwiseResult {
        initial_predictors: spec.predictors.clone(),
        initial_aic,
        spec: current,
        fit: current_fit,
        trace,
    })
}
