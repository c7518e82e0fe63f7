use nalgebra::{DMatrix, SymmetricEigen};
use serde::Serialize;

use crate::dataset::CorrelationMatrix;
use crate::error::{Error, Result};

pub const DEFAULT_DISPLAY_THRESHOLD: f64 = 0.3;

/// Options for principal-axis factoring.
#[derive(Debug, Clone)]
pub struct EfaOptions {
    pub max_iterations: usize,
    pub tolerance: f64,
}

impl Default for EfaOptions {
    fn default() -> Self {
        EfaOptions {
            max_iterations: 200,
            tolerance: 1e-6,
        }
    }
}

/// Loadings and derived summaries of a factor solution.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FactorModel {
    pub items: Vec<String>,
    #[serde(serialize_with = "serialize_matrix")]
    pub loadings: DMatrix<f64>,
    pub communalities: Vec<f64>,
    pub uniquenesses: Vec<f64>,
    pub variance_explained: Vec<f64>,
    pub cumulative_variance: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// Largest communality change in the final iteration.
    pub max_change: f64,
    /// Some communality exceeded 1 and was clamped.
    pub heywood: bool,
    pub rotated: bool,
    /// Max-norm reconstruction residual after each iteration.
    #[serde(skip)]
    pub residual_trace: Vec<f64>,
    /// Item -> factor index with the largest |loading|, when that loading
    /// reaches the assignment threshold.
    pub assignment: Vec<Option<usize>>,
    pub assignment_threshold: f64,
    pub alphas: Vec<Option<f64>>,
}

pub(crate) fn serialize_matrix<S: serde::Serializer>(m: &DMatrix<f64>, s: S) -> std::result::Result<S::Ok, S::Error> {
    let rows: Vec<Vec<f64>> = (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect();
    serde::Serialize::serialize(&rows, s)
}

impl FactorModel {
    pub fn n_factors(&self) -> usize {
        self.loadings.ncols()
    }

    /// Rebuild summaries from a (possibly rotated) loadings matrix.
    pub(crate) fn from_loadings(items: Vec<String>, loadings: DMatrix<f64>) -> Self {
        let p = loadings.nrows();
        let m = loadings.ncols();
        let communalities: Vec<f64> = (0..p).map(|i| loadings.row(i).iter().map(|x| x * x).sum()).collect();
        let uniquenesses = communalities.iter().map(|h| (1.0 - h).clamp(0.0, 1.0)).collect();
        let variance_explained: Vec<f64> = (0..m)
            .map(|j| loadings.column(j).iter().map(|x| x * x).sum::<f64>() / p as f64)
            .collect();
        let cumulative_variance = variance_explained
            .iter()
            .scan(0.0, |acc, v| {
                *acc += v;
                Some(*acc)
            })
            .collect();
        let mut model = FactorModel {
            items,
            loadings,
            communalities,
            uniquenesses,
            variance_explained,
            cumulative_variance,
            iterations: 0,
            converged: true,
            max_change: 0.0,
            heywood: false,
            rotated: false,
            residual_trace: Vec::new(),
            assignment: vec![None; p],
            assignment_threshold: DEFAULT_DISPLAY_THRESHOLD,
            alphas: vec![None; m],
        };
        model.assign(DEFAULT_DISPLAY_THRESHOLD);
        model
    }

    /// Recompute the item -> factor assignment at `threshold`.
    pub fn assign(&mut self, threshold: f64) {
        self.assignment_threshold = threshold;
        self.assignment = (0..self.loadings.nrows())
            .map(|i| {
                let row = self.loadings.row(i);
                let (j, v) = row
                    .iter()
                    .enumerate()
                    .fold((0, 0.0f64), |acc, (j, &v)| if v.abs() > acc.1 { (j, v.abs()) } else { acc });
                (v >= threshold).then_some(j)
            })
            .collect();
    }

    /// Loadings with entries below the display threshold set to `None`.
    pub fn masked_loadings(&self) -> Vec<Vec<Option<f64>>> {
        (0..self.loadings.nrows())
            .map(|i| {
                self.loadings
                    .row(i)
                    .iter()
                    .map(|&v| (v.abs() >= self.assignment_threshold).then_some(v))
                    .collect()
            })
            .collect()
    }

    /// Items whose |loading| on `factor` reaches `threshold`, with loadings.
    pub fn items_loading_on(&self, factor: usize, threshold: f64) -> Vec<(usize, f64)> {
        (0..self.loadings.nrows())
            .filter_map(|i| {
                let l = self.loadings[(i, factor)];
                (l.abs() >= threshold).then_some((i, l))
            })
            .collect()
    }

    /// max |R - (L L^T + diag(uniquenesses))|
    pub fn reconstruction_error(&self, corr: &DMatrix<f64>) -> f64 {
        let mut fitted = &self.loadings * self.loadings.transpose();
        for i in 0..fitted.nrows() {
            fitted[(i, i)] += self.uniquenesses[i];
        }
        (corr - fitted).amax()
    }
}

fn check_correlation(corr: &DMatrix<f64>) -> Result<()> {
    let p = corr.nrows();
    if p != corr.ncols() || p == 0 {
        return Err(Error::InvalidInput("correlation matrix must be square and non-empty".into()));
    }
    for i in 0..p {
        if (corr[(i, i)] - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidInput(format!("diagonal entry {i} is not 1")));
        }
        for j in 0..i {
            if (corr[(i, j)] - corr[(j, i)]).abs() > 1e-9 {
                return Err(Error::InvalidInput("correlation matrix is not symmetric".into()));
            }
        }
    }
    let min_eig = SymmetricEigen::new(corr.clone()).eigenvalues.min();
    if min_eig < -1e-8 {
        return Err(Error::InvalidInput(format!(
            "correlation matrix is not positive semidefinite (smallest eigenvalue {min_eig:e})"
        )));
    }
    Ok(())
}

/// Squared multiple correlations `1 - 1/(R^-1)_ii`; falls back to the
/// largest absolute off-diagonal correlation when `R` is singular.
fn initial_communalities(corr: &DMatrix<f64>) -> Vec<f64> {
    let p = corr.nrows();
    match corr.clone().cholesky() {
        Some(ch) => {
            let inv = ch.inverse();
            (0..p).map(|i| (1.0 - 1.0 / inv[(i, i)]).clamp(0.0, 1.0)).collect()
        }
        None => (0..p)
            .map(|i| (0..p).filter(|&j| j != i).map(|j| corr[(i, j)].abs()).fold(0.0, f64::max))
            .collect(),
    }
}

/// Top `m` eigenpairs, eigenvalues descending, negative values floored at 0.
fn top_loadings(reduced: DMatrix<f64>, m: usize) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(reduced);
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let p = eig.eigenvectors.nrows();
    let mut l = DMatrix::zeros(p, m);
    for (j, &k) in order.iter().take(m).enumerate() {
        let scale = eig.eigenvalues[k].max(0.0).sqrt();
        for i in 0..p {
            l[(i, j)] = eig.eigenvectors[(i, k)] * scale;
        }
    }
    l
}

/// Flip each column so its largest-|value| entry is positive.
pub(crate) fn normalize_signs(l: &mut DMatrix<f64>) {
    for j in 0..l.ncols() {
        let (mut best, mut val) = (0.0f64, 0.0);
        for i in 0..l.nrows() {
            if l[(i, j)].abs() > best {
                best = l[(i, j)].abs();
                val = l[(i, j)];
            }
        }
        if val < 0.0 {
            l.column_mut(j).neg_mut();
        }
    }
}

/// Principal-axis factoring of a correlation matrix.
pub fn efa(corr: &CorrelationMatrix, n_factors: usize, opts: &EfaOptions) -> Result<FactorModel> {
    let r = &corr.values;
    check_correlation(r)?;
    let p = r.nrows();
    if n_factors < 1 || n_factors >= p {
        return Err(Error::InvalidInput(format!("n_factors {n_factors} outside 1..{p}")));
    }

    let mut h = initial_communalities(r);
    let mut heywood = false;
    let mut trace = Vec::new();
    let mut loadings = DMatrix::zeros(p, n_factors);
    let mut converged = false;
    let mut iterations = 0;
    let mut max_change = f64::INFINITY;

    while iterations < opts.max_iterations {
        iterations += 1;
        let mut reduced = r.clone();
        for i in 0..p {
            reduced[(i, i)] = h[i];
        }
        loadings = top_loadings(reduced, n_factors);
        let mut next: Vec<f64> = (0..p).map(|i| loadings.row(i).iter().map(|x| x * x).sum()).collect();
        for v in next.iter_mut() {
            if *v > 1.0 {
                *v = 1.0 - 1e-6;
                heywood = true;
            }
        }
        max_change = next.iter().zip(&h).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        h = next;

        // off-diagonal residual sum of squares: the least-squares objective
        // this alternation descends on
        let fitted = &loadings * loadings.transpose();
        let mut ss = 0.0;
        for i in 0..p {
            for j in 0..p {
                if i != j {
                    ss += (r[(i, j)] - fitted[(i, j)]).powi(2);
                }
            }
        }
        trace.push(ss);
        if max_change < opts.tolerance {
            converged = true;
            break;
        }
    }

    normalize_signs(&mut loadings);
    let mut model = FactorModel::from_loadings(corr.ids.clone(), loadings);
    model.iterations = iterations;
    model.converged = converged;
    model.max_change = max_change;
    model.heywood = heywood;
    model.residual_trace = trace;
    if heywood {
        log::warn!("Heywood case: communality clamped to 1 - 1e-6");
        for (i, hv) in h.iter().enumerate() {
            if *hv >= 1.0 - 1e-6 {
                model.communalities[i] = *hv;
                model.uniquenesses[i] = 1.0 - hv;
            }
        }
    }
    if !converged {
        return Err(Error::EfaNotConverged {
            iterations,
            max_change,
            last: Box::new(model),
        });
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn corr(values: DMatrix<f64>) -> CorrelationMatrix {
        let ids = (0..values.nrows()).map(|i| format!("i{i}")).collect();
        CorrelationMatrix { ids, values }
    }

    /// R = L L^T + Psi built analytically.
    fn implied(l: &DMatrix<f64>) -> DMatrix<f64> {
        let mut r = l * l.transpose();
        for i in 0..r.nrows() {
            r[(i, i)] = 1.0;
        }
        r
    }

    #[test]
    fn one_factor_recovery() {
        let l = DMatrix::from_element(6, 1, 0.8);
        let m = efa(&corr(implied(&l)), 1, &Default::default()).unwrap();
        for i in 0..6 {
            assert!((m.loadings[(i, 0)] - 0.8).abs() < 0.01);
            assert!((m.uniquenesses[i] - 0.36).abs() < 0.01);
        }
        assert!(m.converged);
    }

    #[test]
    fn identity_has_no_common_variance() {
        let m = efa(&corr(DMatrix::identity(5, 5)), 2, &Default::default()).unwrap();
        assert!(m.communalities.iter().all(|h| h.abs() < 1e-12));
        assert!(m.cumulative_variance.last().unwrap().abs() < 1e-12);
    }

    #[test]
    fn communality_plus_uniqueness_is_one() {
        let l = DMatrix::from_row_slice(6, 2, &[0.7, 0.1, 0.8, 0.0, 0.6, 0.2, 0.1, 0.7, 0.0, 0.8, 0.2, 0.6]);
        let m = efa(&corr(implied(&l)), 2, &Default::default()).unwrap();
        for i in 0..6 {
            assert!((m.communalities[i] + m.uniquenesses[i] - 1.0).abs() < 1e-12);
        }
        assert!(*m.cumulative_variance.last().unwrap() <= 1.0);
    }

    #[test]
    fn residual_decreases_across_iterations() {
        let l = DMatrix::from_row_slice(6, 2, &[0.7, 0.1, 0.8, 0.0, 0.6, 0.2, 0.1, 0.7, 0.0, 0.8, 0.2, 0.6]);
        let mut r = implied(&l);
        // perturb so the model is not exact
        r[(0, 5)] += 0.05;
        r[(5, 0)] += 0.05;
        let m = efa(&corr(r), 2, &Default::default()).unwrap();
        let t = &m.residual_trace;
        assert!(t.windows(2).all(|w| w[1] <= w[0] + 1e-12), "{t:?}");
    }

    #[test]
    fn rejects_bad_input() {
        let mut r = DMatrix::identity(3, 3);
        assert!(efa(&corr(r.clone()), 3, &Default::default()).is_err());
        r[(0, 1)] = 0.5;
        assert!(efa(&corr(r), 1, &Default::default()).is_err());
    }

    #[test]
    fn iteration_cap_errors_with_last_iterate() {
        let l = DMatrix::from_row_slice(4, 1, &[0.9, 0.5, 0.4, 0.3]);
        let opts = EfaOptions {
            max_iterations: 1,
            tolerance: 1e-12,
        };
        match efa(&corr(implied(&l)), 1, &opts) {
            Err(Error::EfaNotConverged { last, iterations, .. }) => {
                assert_eq!(iterations, 1);
                assert_eq!(last.items.len(), 4);
            }
            other => panic!("{other:?}"),
        }
    }
}
