use serde::{Deserialize, Serialize};

use super::FactorModel;
use crate::dataset::{QuestionKind, SurveyDataset};
use crate::error::{Error, Result};
use crate::stats::sample_variance;

/// Cronbach's alpha of item columns, sample variances (n - 1).
pub fn cronbach_alpha_columns(cols: &[Vec<f64>]) -> Result<f64> {
    let k = cols.len();
    if k < 2 {
        return Err(Error::InvalidInput("alpha needs at least two items".into()));
    }
    let n = cols[0].len();
    if n < 2 || cols.iter().any(|c| c.len() != n) {
        return Err(Error::InvalidInput("alpha needs equal-length item columns with n >= 2".into()));
    }
    let item_var: f64 = cols.iter().map(|c| sample_variance(c)).sum();
    let totals: Vec<f64> = (0..n).map(|r| cols.iter().map(|c| c[r]).sum()).collect();
    let total_var = sample_variance(&totals);
    if total_var == 0.0 {
        return Err(Error::ZeroVariance("item sum is constant".into()));
    }
    let k = k as f64;
    Ok(k / (k - 1.0) * (1.0 - item_var / total_var))
}

pub fn cronbach_alpha(ds: &SurveyDataset, items: &[String]) -> Result<f64> {
    let cols: Vec<Vec<f64>> = items.iter().map(|i| ds.numeric_column(i)).collect::<Result<_>>()?;
    cronbach_alpha_columns(&cols)
}

fn likert_range(ds: &SurveyDataset, item: &str) -> Result<(f64, f64)> {
    match ds.question(item).map(|q| &q.kind) {
        Some(QuestionKind::Likert { min, max }) => Ok((*min as f64, *max as f64)),
        Some(_) => Err(Error::InvalidInput(format!("item `{item}` is not a likert item"))),
        None => Err(Error::UnknownQuestion(item.to_string())),
    }
}

/// Item responses, reversed (`min + max - value`) when `reverse`.
fn item_responses(ds: &SurveyDataset, item: &str, reverse: bool) -> Result<Vec<f64>> {
    let col = ds.numeric_column(item)?;
    if !reverse {
        return Ok(col);
    }
    let (lo, hi) = likert_range(ds, item)?;
    Ok(col.into_iter().map(|v| lo + hi - v).collect())
}

/// Alpha for each factor over its assigned items; items with negative
/// loadings are reversed first. `None` where fewer than two items load.
pub fn factor_alphas(ds: &SurveyDataset, model: &FactorModel) -> Result<Vec<Option<f64>>> {
    (0..model.n_factors())
        .map(|j| {
            let items: Vec<(usize, f64)> = (0..model.items.len())
                .filter(|&i| model.assignment[i] == Some(j))
                .map(|i| (i, model.loadings[(i, j)]))
                .collect();
            if items.len() < 2 {
                return Ok(None);
            }
            let cols: Vec<Vec<f64>> = items
                .iter()
                .map(|&(i, l)| item_responses(ds, &model.items[i], l < 0.0))
                .collect::<Result<_>>()?;
            match cronbach_alpha_columns(&cols) {
                Ok(a) => Ok(Some(a)),
                Err(Error::ZeroVariance(_)) => Ok(None),
                Err(e) => Err(e),
            }
        })
        .collect()
}

/// Loading-weighted mean of the items whose |loading| on `factor` reaches
/// `threshold`. Negatively loading items are reversed and weighted by
/// |loading|.
pub fn score_factor(ds: &SurveyDataset, model: &FactorModel, factor: usize, threshold: f64) -> Result<Vec<f64>> {
    if factor >= model.n_factors() {
        return Err(Error::InvalidInput(format!("factor index {factor} out of range")));
    }
    let items = model.items_loading_on(factor, threshold);
    if items.is_empty() {
        return Err(Error::NoAssignedItems(factor));
    }
    let mut num = vec![0.0; ds.n()];
    let mut weight = 0.0;
    for (i, l) in items {
        let responses = item_responses(ds, &model.items[i], l < 0.0)?;
        let w = l.abs();
        weight += w;
        for (acc, r) in num.iter_mut().zip(responses) {
            *acc += w * r;
        }
    }
    Ok(num.into_iter().map(|v| v / weight).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeyedItem {
    pub item: String,
    #[serde(default)]
    pub reverse: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeyedDimension {
    pub name: String,
    pub items: Vec<KeyedItem>,
}

/// Fixed scoring key: each dimension is the mean of its keyed items after
/// reversal, on a declared `min..=max` response scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixedKey {
    pub min: f64,
    pub max: f64,
    pub dimensions: Vec<KeyedDimension>,
}

pub fn score_fixed_scale(ds: &SurveyDataset, key: &FixedKey) -> Result<Vec<(String, Vec<f64>)>> {
    if key.min >= key.max {
        return Err(Error::Config("fixed key min must be below max".into()));
    }
    key.dimensions
        .iter()
        .map(|dim| {
            if dim.items.is_empty() {
                return Err(Error::Config(format!("dimension `{}` has no items", dim.name)));
            }
            let mut sum = vec![0.0; ds.n()];
            for ki in &dim.items {
                let col = ds.numeric_column(&ki.item)?;
                for (acc, v) in sum.iter_mut().zip(col) {
                    if v < key.min || v > key.max {
                        return Err(Error::OutOfRange {
                            item: ki.item.clone(),
                            value: v,
                            min: key.min,
                            max: key.max,
                        });
                    }
                    *acc += if ki.reverse { key.min + key.max - v } else { v };
                }
            }
            let k = dim.items.len() as f64;
            Ok((dim.name.clone(), sum.into_iter().map(|s| s / k).collect()))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{Answer, QuestionDef};
    use nalgebra::DMatrix;

    fn likert_ds(cols: &[(&str, i64, i64, Vec<i64>)]) -> SurveyDataset {
        let questions = cols.iter().map(|(id, lo, hi, _)| QuestionDef::likert(id, *lo, *hi)).collect();
        let n = cols[0].3.len();
        let rows = (0..n)
            .map(|r| (format!("r{r}"), cols.iter().map(|c| Answer::Int(c.3[r])).collect()))
            .collect();
        SurveyDataset::from_rows(questions, rows).unwrap()
    }

    #[test]
    fn alpha_perfect_correlation() {
        let ds = likert_ds(&[("a", 1, 5, vec![1, 2, 3, 4, 5]), ("b", 1, 5, vec![1, 2, 3, 4, 5])]);
        assert_eq!(cronbach_alpha(&ds, &["a".into(), "b".into()]).unwrap(), 1.0);
    }

    #[test]
    fn alpha_matches_hand_covariance() {
        // sample covariance has trace 7/2 and grand sum 6
        let ds = likert_ds(&[
            ("a", 1, 5, vec![1, 4, 3, 3, 4]),
            ("b", 1, 5, vec![2, 2, 1, 1, 4]),
            ("c", 1, 5, vec![2, 4, 3, 3, 3]),
        ]);
        let alpha = cronbach_alpha(&ds, &["a".into(), "b".into(), "c".into()]).unwrap();
        let (trace, total) = (3.5_f64, 6.0_f64);
        assert_eq!(alpha, 3.0 / 2.0 * (1.0 - trace / total));
        assert!((alpha - 0.625).abs() < 1e-15);
    }

    #[test]
    fn alpha_errors() {
        let ds = likert_ds(&[("a", 1, 5, vec![2, 2, 2]), ("b", 1, 5, vec![3, 3, 3])]);
        assert!(matches!(cronbach_alpha(&ds, &["a".into(), "b".into()]), Err(Error::ZeroVariance(_))));
        assert!(cronbach_alpha(&ds, &["a".into()]).is_err());
    }

    fn model(items: &[&str], loadings: &[f64]) -> FactorModel {
        FactorModel::from_loadings(
            items.iter().map(|s| s.to_string()).collect(),
            DMatrix::from_column_slice(items.len(), 1, loadings),
        )
    }

    #[test]
    fn factor_score_weighted_average() {
        let ds = likert_ds(&[("a", 1, 7, vec![5, 3]), ("b", 1, 7, vec![2, 3]), ("c", 1, 7, vec![7, 1])]);
        let m = model(&["a", "b", "c"], &[0.6, 0.3, 0.1]);
        let s = score_factor(&ds, &m, 0, 0.3).unwrap();
        assert!((s[0] - 4.0).abs() < 1e-12);
        assert!((s[1] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn factor_score_single_item_and_errors() {
        let ds = likert_ds(&[("a", 1, 7, vec![5, 3]), ("b", 1, 7, vec![2, 3])]);
        let m = model(&["a", "b"], &[0.9, 0.1]);
        assert_eq!(score_factor(&ds, &m, 0, 0.3).unwrap(), vec![5.0, 3.0]);
        assert!(matches!(score_factor(&ds, &m, 0, 0.95), Err(Error::NoAssignedItems(0))));
    }

    #[test]
    fn negative_loading_reverses_item() {
        let ds = likert_ds(&[("a", 1, 7, vec![6]), ("b", 1, 7, vec![2])]);
        let m = model(&["a", "b"], &[0.5, -0.5]);
        // (6 + (8 - 2)) / 2
        assert_eq!(score_factor(&ds, &m, 0, 0.3).unwrap(), vec![6.0]);
    }

    #[test]
    fn fixed_scale_reversal_and_range() {
        let ds = likert_ds(&[("x", 1, 9, vec![6, 4, 9]), ("y", 1, 9, vec![2, 4, 4])]);
        let key = FixedKey {
            min: 1.0,
            max: 7.0,
            dimensions: vec![KeyedDimension {
                name: "D".into(),
                items: vec![
                    KeyedItem { item: "x".into(), reverse: false },
                    KeyedItem { item: "y".into(), reverse: true },
                ],
            }],
        };
        let err = score_fixed_scale(&ds, &key).unwrap_err();
        assert!(matches!(err, Error::OutOfRange { value, .. } if value == 9.0));

        let ds = likert_ds(&[("x", 1, 7, vec![6, 4]), ("y", 1, 7, vec![2, 4])]);
        let scores = score_fixed_scale(&ds, &key).unwrap();
        assert_eq!(scores[0].1, vec![6.0, 4.0]);
    }
}
