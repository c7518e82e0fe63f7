//! Regression predictors from Likert scales: principal-axis factoring with
//! varimax rotation, Cronbach's alpha, loading-weighted factor scores and
//! fixed-key scale scores.

mod efa;
mod scoring;
mod varimax;

use std::collections::{BTreeSet, HashSet};

use serde::{Deserialize, Serialize};

use crate::dataset::{pearson_correlation_matrix, CorrelationMatrix, SurveyDataset};
use crate::error::{Error, Result};

pub use efa::{efa, EfaOptions, FactorModel, DEFAULT_DISPLAY_THRESHOLD};
pub(crate) use efa::serialize_matrix;
pub use scoring::{
    cronbach_alpha, cronbach_alpha_columns, factor_alphas, score_factor, score_fixed_scale, FixedKey, KeyedDimension,
    KeyedItem,
};
pub use varimax::{varimax, varimax_criterion, VarimaxOptions};

/// Rotate a fitted model and rebuild its summaries.
pub fn rotate(model: &FactorModel, opts: &VarimaxOptions) -> FactorModel {
    let loadings = varimax(&model.loadings, opts);
    let mut out = FactorModel::from_loadings(model.items.clone(), loadings);
    out.iterations = model.iterations;
    out.converged = model.converged;
    out.max_change = model.max_change;
    out.heywood = model.heywood;
    out.residual_trace = model.residual_trace.clone();
    out.rotated = true;
    out.assign(model.assignment_threshold);
    out
}

/// Factor-analysed scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EfaScale {
    pub name: String,
    pub items: Vec<String>,
    pub n_factors: usize,
    /// Predictor names, one per factor.
    pub factor_names: Vec<String>,
    /// Optional anchor item per factor name: the name goes to the factor on
    /// which its anchor loads most strongly. Without anchors names follow
    /// factor order.
    #[serde(default)]
    pub anchors: Vec<String>,
    #[serde(default = "default_threshold")]
    pub threshold: f64,
    /// Overrides the PAF iteration cap.
    #[serde(default)]
    pub max_iterations: Option<usize>,
    /// Keep the last PAF iterate, with a warning, when the cap is reached.
    #[serde(default)]
    pub accept_unconverged: bool,
}

fn default_threshold() -> f64 {
    DEFAULT_DISPLAY_THRESHOLD
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixedScale {
    pub name: String,
    #[serde(flatten)]
    pub key: FixedKey,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "lowercase")]
pub enum ScaleSpec {
    Efa(EfaScale),
    Fixed(FixedScale),
}

impl ScaleSpec {
    pub fn name(&self) -> &str {
        match self {
            ScaleSpec::Efa(s) => &s.name,
            ScaleSpec::Fixed(s) => &s.name,
        }
    }

    pub fn items(&self) -> Vec<String> {
        match self {
            ScaleSpec::Efa(s) => s.items.clone(),
            ScaleSpec::Fixed(s) => s.key.dimensions.iter().flat_map(|d| d.items.iter().map(|i| i.item.clone())).collect(),
        }
    }
}

/// Result of analysing one EFA scale.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScaleAnalysis {
    pub scale: String,
    pub model: FactorModel,
    /// `factor_names[j]` names rotated factor `j`.
    pub factor_names: Vec<String>,
}

impl ScaleAnalysis {
    /// efa_report.json body.
    pub fn report_json(&self) -> serde_json::Value {
        let m = &self.model;
        let full: Vec<Vec<f64>> = (0..m.loadings.nrows()).map(|i| m.loadings.row(i).iter().copied().collect()).collect();
        serde_json::json!({
            "scale": self.scale,
            "items": m.items,
            "factors": self.factor_names,
            "loadings": full,
            "loadings_masked": m.masked_loadings(),
            "display_threshold": m.assignment_threshold,
            "communalities": m.communalities,
            "uniquenesses": m.uniquenesses,
            "variance_explained": m.variance_explained,
            "cumulative_variance": m.cumulative_variance,
            "alphas": m.alphas,
            "assignment": m.items.iter().zip(&m.assignment).map(|(item, a)| {
                serde_json::json!({"item": item, "factor": a.map(|j| self.factor_names[j].clone())})
            }).collect::<Vec<_>>(),
            "iterations": m.iterations,
            "converged": m.converged,
            "max_change": m.max_change,
            "heywood": m.heywood,
        })
    }
}

fn name_factors(spec: &EfaScale, model: &FactorModel) -> Result<Vec<String>> {
    if spec.factor_names.len() != spec.n_factors {
        return Err(Error::Config(format!(
            "scale `{}`: {} factor names for {} factors",
            spec.name,
            spec.factor_names.len(),
            spec.n_factors
        )));
    }
    if spec.anchors.is_empty() {
        return Ok(spec.factor_names.clone());
    }
    if spec.anchors.len() != spec.n_factors {
        return Err(Error::Config(format!("scale `{}`: anchors must match factor names", spec.name)));
    }
    let mut names = vec![String::new(); spec.n_factors];
    let mut claimed = vec![false; spec.n_factors];
    for (name, anchor) in spec.factor_names.iter().zip(&spec.anchors) {
        let i = model
            .items
            .iter()
            .position(|x| x == anchor)
            .ok_or_else(|| Error::Config(format!("anchor `{anchor}` is not an item of `{}`", spec.name)))?;
        let j = (0..spec.n_factors)
            .filter(|&j| !claimed[j])
            .max_by(|&a, &b| model.loadings[(i, a)].abs().total_cmp(&model.loadings[(i, b)].abs()))
            .unwrap();
        claimed[j] = true;
        names[j] = name.clone();
    }
    Ok(names)
}

/// Correlate, factor, rotate, assign, and compute alphas for one scale.
pub fn analyze_scale(ds: &SurveyDataset, spec: &EfaScale, opts: &EfaOptions) -> Result<ScaleAnalysis> {
    let corr: CorrelationMatrix = pearson_correlation_matrix(ds, &spec.items)?;
    let opts = EfaOptions {
        max_iterations: spec.max_iterations.unwrap_or(opts.max_iterations),
        ..opts.clone()
    };
    let unrotated = match efa(&corr, spec.n_factors, &opts) {
        Err(Error::EfaNotConverged { last, iterations, max_change }) if spec.accept_unconverged => {
            log::warn!(
                "scale `{}`: factor analysis stopped after {iterations} iterations (max change {max_change:.2e}); using last iterate",
                spec.name
            );
            *last
        }
        r => r?,
    };
    let mut model = rotate(&unrotated, &VarimaxOptions::default());
    model.assign(spec.threshold);
    model.alphas = factor_alphas(ds, &model)?;
    let factor_names = name_factors(spec, &model)?;
    Ok(ScaleAnalysis {
        scale: spec.name.clone(),
        model,
        factor_names,
    })
}

/// Per-respondent predictor values.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PredictorTable {
    pub ids: Vec<String>,
    pub names: Vec<String>,
    pub columns: Vec<Vec<f64>>,
}

impl PredictorTable {
    pub fn new(ids: Vec<String>) -> Self {
        PredictorTable {
            ids,
            names: Vec::new(),
            columns: Vec::new(),
        }
    }

    pub fn push(&mut self, name: &str, values: Vec<f64>) -> Result<()> {
        if self.names.iter().any(|n| n == name) {
            return Err(Error::InvalidInput(format!("duplicate predictor `{name}`")));
        }
        if values.len() != self.ids.len() {
            return Err(Error::InvalidInput(format!("predictor `{name}` has wrong length")));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!("predictor `{name}` has missing or non-finite cells")));
        }
        self.names.push(name.to_string());
        self.columns.push(values);
        Ok(())
    }

    pub fn column(&self, name: &str) -> Option<&[f64]> {
        self.names.iter().position(|n| n == name).map(|i| self.columns[i].as_slice())
    }

    pub fn n(&self) -> usize {
        self.ids.len()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("respondent_id");
        for n in &self.names {
            out.push(',');
            out.push_str(n);
        }
        out.push('\n');
        for (r, id) in self.ids.iter().enumerate() {
            out.push_str(id);
            for c in &self.columns {
                out.push_str(&format!(",{}", c[r]));
            }
            out.push('\n');
        }
        out
    }
}

/// A dataset column passed straight through as a predictor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DirectItem {
    pub column: String,
    #[serde(default)]
    pub name: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum DemographicSpec {
    Numeric {
        column: String,
        #[serde(default)]
        name: Option<String>,
    },
    /// One-hot indicators for every level except `reference`.
    Categorical { column: String, reference: String },
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PredictorConfig {
    #[serde(default)]
    pub scales: Vec<ScaleSpec>,
    #[serde(default)]
    pub direct_items: Vec<DirectItem>,
    #[serde(default)]
    pub demographics: Vec<DemographicSpec>,
}

/// Assembled predictors plus the factor solutions behind them.
#[derive(Debug, Clone)]
pub struct PredictorBuild {
    pub table: PredictorTable,
    pub analyses: Vec<ScaleAnalysis>,
}

/// Factor scores, fixed-key scores, direct items and demographics, in that
/// order.
pub fn build_predictor_table(ds: &SurveyDataset, cfg: &PredictorConfig, opts: &EfaOptions) -> Result<PredictorBuild> {
    for scale in &cfg.scales {
        for item in scale.items() {
            if ds.question(&item).is_none() {
                return Err(Error::Config(format!("scale `{}`: missing item `{item}`", scale.name())));
            }
        }
    }
    let mut table = PredictorTable::new(ds.ids().to_vec());
    let mut analyses = Vec::new();
    for scale in &cfg.scales {
        match scale {
            ScaleSpec::Efa(spec) => {
                let analysis = analyze_scale(ds, spec, opts)?;
                for (j, name) in analysis.factor_names.iter().enumerate() {
                    table.push(name, score_factor(ds, &analysis.model, j, spec.threshold)?)?;
                }
                analyses.push(analysis);
            }
            ScaleSpec::Fixed(spec) => {
                for (name, values) in score_fixed_scale(ds, &spec.key)? {
                    table.push(&name, values)?;
                }
            }
        }
    }
    for d in &cfg.direct_items {
        let values = ds.numeric_column(&d.column)?;
        table.push(d.name.as_deref().unwrap_or(&d.column), values)?;
    }
    for d in &cfg.demographics {
        match d {
            DemographicSpec::Numeric { column, name } => {
                table.push(name.as_deref().unwrap_or(column), ds.numeric_column(column)?)?;
            }
            DemographicSpec::Categorical { column, reference } => {
                let values = ds.categorical_column(column)?;
                let levels: BTreeSet<&str> = values.iter().map(String::as_str).collect();
                if !levels.contains(reference.as_str()) {
                    return Err(Error::Config(format!(
                        "reference level `{reference}` not observed in `{column}`"
                    )));
                }
                for level in levels.into_iter().filter(|l| *l != reference) {
                    let ind = values.iter().map(|v| if v == level { 1.0 } else { 0.0 }).collect();
                    table.push(&format!("{column}={level}"), ind)?;
                }
            }
        }
    }
    let unique: HashSet<&String> = table.names.iter().collect();
    debug_assert_eq!(unique.len(), table.names.len());
    Ok(PredictorBuild { table, analyses })
}
