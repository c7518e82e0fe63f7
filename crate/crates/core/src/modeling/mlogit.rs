use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::Serialize;

use super::{ModelSpec, Outcome};
use crate::error::{Error, Result};
use crate::psychometrics::{serialize_matrix, PredictorTable};

/// Absolute standardized coefficient beyond which the fit is treated as
/// quasi-separated.
pub const SEPARATION_LIMIT: f64 = 30.0;

#[derive(Debug, Clone)]
pub struct MlogitOptions {
    pub grad_tol: f64,
    pub max_iterations: usize,
}

impl Default for MlogitOptions {
    fn default() -> Self {
        MlogitOptions {
            grad_tol: 1e-6,
            max_iterations: 2000,
        }
    }
}

/// Fitted multinomial logit. `coefficients` has one row per non-reference
/// class and columns `[intercept, predictors...]` on the original predictor
/// scale.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MlogitFit {
    pub outcome: String,
    pub reference_class: String,
    /// Non-reference classes, in row order of `coefficients`.
    pub classes: Vec<String>,
    pub predictors: Vec<String>,
    #[serde(serialize_with = "serialize_matrix")]
    pub coefficients: DMatrix<f64>,
    pub log_likelihood: f64,
    pub aic: f64,
    pub n_used: usize,
    pub converged: bool,
    pub iterations: usize,
    pub grad_norm: f64,
    #[serde(skip)]
    pub ll_trace: Vec<f64>,
}

impl MlogitFit {
    pub fn n_parameters(&self) -> usize {
        self.coefficients.len()
    }

    pub fn coefficient(&self, class: &str, predictor: &str) -> Option<f64> {
        let r = self.classes.iter().position(|c| c == class)?;
        let c = self.predictors.iter().position(|p| p == predictor)?;
        Some(self.coefficients[(r, c + 1)])
    }

    /// Class probabilities `[reference, classes...]` for one predictor row
    /// (values in `predictors` order).
    pub fn probabilities(&self, x: &[f64]) -> Vec<f64> {
        let k = self.classes.len();
        let mut eta = vec![0.0; k + 1];
        for c in 0..k {
            eta[c + 1] = self.coefficients[(c, 0)] + x.iter().enumerate().map(|(j, v)| self.coefficients[(c, j + 1)] * v).sum::<f64>();
        }
        softmax(&eta)
    }
}

fn softmax(eta: &[f64]) -> Vec<f64> {
    let m = eta.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = eta.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Rows used by a fit: respondents with an outcome, plus the class index
/// (0 = reference) and predictor values.
pub(crate) struct Design {
    pub predictors: Vec<String>,
    pub reference: String,
    pub classes: Vec<String>,
    /// n x p predictor values on the original scale.
    pub x: DMatrix<f64>,
    pub y: Vec<usize>,
}

impl Design {
    pub fn build(table: &PredictorTable, outcome: &Outcome, spec: &ModelSpec) -> Result<Design> {
        if outcome.labels.len() != table.n() {
            return Err(Error::InvalidInput("outcome and predictor table differ in length".into()));
        }
        let reference = match &spec.reference_class {
            Some(r) => r.clone(),
            None => outcome
                .most_populous()
                .ok_or_else(|| Error::InvalidInput("outcome has no classified respondents".into()))?,
        };
        let ref_idx = outcome
            .levels
            .iter()
            .position(|l| *l == reference)
            .ok_or_else(|| Error::InvalidInput(format!("reference class `{reference}` not in outcome")))?;
        let mut cols = Vec::with_capacity(spec.predictors.len());
        for (i, p) in spec.predictors.iter().enumerate() {
            if spec.predictors[..i].contains(p) {
                return Err(Error::InvalidInput(format!("predictor `{p}` listed twice")));
            }
            cols.push(table.column(p).ok_or_else(|| Error::InvalidInput(format!("unknown predictor `{p}`")))?);
        }
        let rows: Vec<usize> = (0..table.n()).filter(|&r| outcome.labels[r].is_some()).collect();
        let mut counts = vec![0usize; outcome.levels.len()];
        for &r in &rows {
            counts[outcome.labels[r].unwrap()] += 1;
        }
        if counts[ref_idx] == 0 {
            return Err(Error::InvalidInput(format!("reference class `{reference}` has no respondents")));
        }
        // empty levels carry no information and would diverge
        let mut level_map = vec![usize::MAX; outcome.levels.len()];
        level_map[ref_idx] = 0;
        let mut classes = Vec::new();
        for (l, name) in outcome.levels.iter().enumerate() {
            if l != ref_idx && counts[l] > 0 {
                classes.push(name.clone());
                level_map[l] = classes.len();
            }
        }
        if classes.is_empty() {
            return Err(Error::InvalidInput("outcome needs at least two observed classes".into()));
        }
        let n = rows.len();
        let p = cols.len();
        let free = classes.len() * (p + 1);
        if n <= free {
            return Err(Error::InvalidInput(format!("{n} respondents for {free} free parameters")));
        }
        let x = DMatrix::from_fn(n, p, |i, j| cols[j][rows[i]]);
        let y = rows.iter().map(|&r| level_map[outcome.labels[r].unwrap()]).collect();
        Ok(Design {
            predictors: spec.predictors.clone(),
            reference,
            classes,
            x,
            y,
        })
    }
}

/// Standardized copy of a design: unit intercept column, then z-scores.
struct Standardized {
    z: DMatrix<f64>,
    mean: Vec<f64>,
    sd: Vec<f64>,
}

fn standardize(d: &Design) -> Result<Standardized> {
    let (n, p) = d.x.shape();
    let mut z = DMatrix::from_element(n, p + 1, 1.0);
    let mut mean = Vec::with_capacity(p);
    let mut sd = Vec::with_capacity(p);
    for j in 0..p {
        let col = d.x.column(j);
        let m = col.mean();
        let s = (col.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n as f64).sqrt();
        if s <= 1e-12 * m.abs().max(1.0) {
            return Err(Error::ConstantPredictor(d.predictors[j].clone()));
        }
        for i in 0..n {
            z[(i, j + 1)] = (col[i] - m) / s;
        }
        mean.push(m);
        sd.push(s);
    }
    check_rank(&z, &d.predictors)?;
    Ok(Standardized { z, mean, sd })
}

fn check_rank(z: &DMatrix<f64>, names: &[String]) -> Result<()> {
    let p = names.len();
    if p < 2 {
        return Ok(());
    }
    let n = z.nrows() as f64;
    let zs = z.columns(1, p);
    let corr = zs.transpose() * zs / n;
    let eig = SymmetricEigen::new(corr);
    let (imin, &lmin) = eig
        .eigenvalues
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .unwrap();
    if lmin < 1e-10 * p as f64 {
        let v = eig.eigenvectors.column(imin);
        let cols = (0..p).filter(|&j| v[j].abs() > 1e-3).map(|j| names[j].clone()).collect();
        return Err(Error::RankDeficient(cols));
    }
    Ok(())
}

/// Log-likelihood and gradient for a coefficient matrix `beta`
/// ((p + 1) x K, one column per non-reference class) on design `z`.
fn ll_grad(z: &DMatrix<f64>, y: &[usize], beta: &DMatrix<f64>) -> (f64, DMatrix<f64>, DMatrix<f64>) {
    let n = z.nrows();
    let k = beta.ncols();
    let eta = z * beta;
    let mut resid = DMatrix::zeros(n, k);
    let mut prob = DMatrix::zeros(n, k + 1);
    let mut ll = 0.0;
    let mut row = vec![0.0; k + 1];
    for i in 0..n {
        row[0] = 0.0;
        for c in 0..k {
            row[c + 1] = eta[(i, c)];
        }
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        ll += row[y[i]] - lse;
        for c in 0..=k {
            prob[(i, c)] = (row[c] - lse).exp();
        }
        for c in 0..k {
            resid[(i, c)] = if y[i] == c + 1 { 1.0 } else { 0.0 } - prob[(i, c + 1)];
        }
    }
    (ll, z.transpose() * resid, prob)
}

/// Negative Hessian of the log-likelihood in column-major parameter order.
fn information(z: &DMatrix<f64>, prob: &DMatrix<f64>) -> DMatrix<f64> {
    let (n, q) = z.shape();
    let k = prob.ncols() - 1;
    let mut h = DMatrix::zeros(q * k, q * k);
    for a in 0..k {
        for b in a..k {
            let w: Vec<f64> = (0..n)
                .map(|i| {
                    let pa = prob[(i, a + 1)];
                    let pb = prob[(i, b + 1)];
                    if a == b {
                        pa * (1.0 - pa)
                    } else {
                        -pa * pb
                    }
                })
                .collect();
            let mut zw = z.clone();
            for (i, wi) in w.iter().enumerate() {
                zw.row_mut(i).scale_mut(*wi);
            }
            let block = zw.tr_mul(z);
            for r in 0..q {
                for c in r..q {
                    let v = block[(r, c)];
                    h[(a * q + r, b * q + c)] = v;
                    h[(a * q + c, b * q + r)] = v;
                    h[(b * q + r, a * q + c)] = v;
                    h[(b * q + c, a * q + r)] = v;
                }
            }
        }
    }
    h
}

fn as_matrix(v: &DVector<f64>, q: usize, k: usize) -> DMatrix<f64> {
    DMatrix::from_column_slice(q, k, v.as_slice())
}

struct Optimum {
    beta: DMatrix<f64>,
    ll: f64,
    grad_norm: f64,
    iterations: usize,
    converged: bool,
    trace: Vec<f64>,
}

/// BFGS ascent with Armijo backtracking; when the line search stalls short
/// of the gradient tolerance, damped Newton steps finish the job.
fn maximize(z: &DMatrix<f64>, y: &[usize], k: usize, opts: &MlogitOptions, start: Option<DMatrix<f64>>) -> Optimum {
    let q = z.ncols();
    let m = q * k;
    let n = y.len() as f64;
    // intercept-only MLE as the start
    let mut counts = vec![0.0f64; k + 1];
    for &c in y {
        counts[c] += 1.0;
    }
    let mut beta = DMatrix::zeros(q, k);
    for c in 0..k {
        beta[(0, c)] = (counts[c + 1] / counts[0]).ln();
    }
    if let Some(b) = start.filter(|b| b.shape() == (q, k) && b.iter().all(|v| v.is_finite())) {
        if ll_grad(z, y, &b).0 > ll_grad(z, y, &beta).0 {
            beta = b;
        }
    }
    let (mut ll, g, mut prob) = ll_grad(z, y, &beta);
    let mut g = DVector::from_column_slice(g.as_slice());
    let mut trace = vec![ll];
    let mut hinv = DMatrix::identity(m, m) / n;
    let mut iterations = 0;
    // Newton first; BFGS takes over once if a Newton line search stalls
    let mut newton = true;
    let mut fell_back = false;
    let mut stationary = false;

    while iterations < opts.max_iterations {
        if g.amax() < opts.grad_tol {
            break;
        }
        iterations += 1;
        let dir = if newton {
            let info = information(z, &prob);
            match info.clone().cholesky() {
                Some(ch) => ch.solve(&g),
                None => &hinv * &g,
            }
        } else {
            &hinv * &g
        };
        let slope = g.dot(&dir);
        let dir = if slope > 0.0 { dir } else { g.clone() / n };
        let slope = g.dot(&dir);
        let x0 = DVector::from_column_slice(beta.as_slice());
        let mut t = 1.0;
        let mut accepted = None;
        if newton && slope < 1e-10 {
            // Newton decrement below what ll can resolve: the full step is
            // inside the quadratic region, no line search needed
            let bn = as_matrix(&(&x0 + &dir), q, k);
            let (lln, gn, pn) = ll_grad(z, y, &bn);
            if lln.is_finite() && lln >= ll {
                accepted = Some((bn, lln, DVector::from_column_slice(gn.as_slice()), pn, 1.0));
            } else {
                stationary = true;
                break;
            }
        }
        for _ in 0..if accepted.is_some() { 0 } else { 60 } {
            let xn = &x0 + &dir * t;
            let bn = as_matrix(&xn, q, k);
            let (lln, gn, pn) = ll_grad(z, y, &bn);
            if lln.is_finite() && lln >= ll + 1e-4 * t * slope {
                accepted = Some((bn, lln, DVector::from_column_slice(gn.as_slice()), pn, t));
                break;
            }
            t *= 0.5;
        }
        let Some((bn, lln, gn, pn, t)) = accepted else {
            if newton && !fell_back {
                newton = false;
                fell_back = true;
                continue;
            }
            if newton {
                break;
            }
            newton = true;
            continue;
        };
        let s = &dir * t;
        // ascent on ll is descent on -ll: curvature pair uses -(gn - g)
        let yv = -(&gn - &g);
        let sy = s.dot(&yv);
        if sy > 1e-12 * s.norm() * yv.norm() {
            let rho = 1.0 / sy;
            let hy = &hinv * &yv;
            let yhy = yv.dot(&hy);
            hinv += (&s * s.transpose()) * (rho * rho * yhy + rho) - (&hy * s.transpose() + &s * hy.transpose()) * rho;
        }
        let gain = lln - ll;
        beta = bn;
        ll = lln;
        g = gn;
        prob = pn;
        trace.push(ll);
        if !newton && gain.abs() < 1e-14 * ll.abs().max(1.0) {
            newton = true;
        }
    }
    if g.amax() < opts.grad_tol || stationary {
        // Newton tail: converges in a step or two on a finite optimum, but
        // keeps walking out along a separating direction, which exposes
        // separation that the gradient test alone would accept
        for _ in 0..100 {
            let Some(ch) = information(z, &prob).cholesky() else { break };
            let dir = ch.solve(&g);
            if dir.amax() < 1e-6 {
                break;
            }
            let x0 = DVector::from_column_slice(beta.as_slice());
            let mut t = 1.0;
            let mut moved = false;
            for _ in 0..30 {
                let bn = as_matrix(&(&x0 + &dir * t), q, k);
                let (lln, gn, pn) = ll_grad(z, y, &bn);
                if lln.is_finite() && lln > ll {
                    beta = bn;
                    ll = lln;
                    g = DVector::from_column_slice(gn.as_slice());
                    prob = pn;
                    trace.push(ll);
                    moved = true;
                    break;
                }
                t *= 0.5;
            }
            if !moved || beta.rows(1, q - 1).amax() > SEPARATION_LIMIT {
                break;
            }
        }
    }
    let grad_norm = g.amax();
    Optimum {
        beta,
        ll,
        grad_norm,
        iterations,
        converged: grad_norm < opts.grad_tol || stationary,
        trace,
    }
}

/// `warm` seeds the optimizer with a related fit's coefficients (matched
/// by predictor name, absent ones at zero) when it shares the class layout.
pub(crate) fn fit_design(d: &Design, outcome_name: &str, opts: &MlogitOptions, warm: Option<&MlogitFit>) -> Result<MlogitFit> {
    let st = standardize(d)?;
    let k = d.classes.len();
    let p = d.predictors.len();
    let start = warm
        .filter(|w| w.classes == d.classes && w.reference_class == d.reference)
        .map(|w| {
            let mut b = DMatrix::zeros(p + 1, k);
            for c in 0..k {
                b[(0, c)] = w.coefficients[(c, 0)];
                for (j, name) in d.predictors.iter().enumerate() {
                    if let Some(wj) = w.predictors.iter().position(|x| x == name) {
                        let coef = w.coefficients[(c, wj + 1)];
                        b[(0, c)] += coef * st.mean[j];
                        b[(j + 1, c)] = coef * st.sd[j];
                    }
                }
            }
            b
        });
    let opt = maximize(&st.z, &d.y, k, opts, start);
    for c in 0..k {
        for j in 0..p {
            if opt.beta[(j + 1, c)].abs() > SEPARATION_LIMIT {
                return Err(Error::Separation {
                    predictor: d.predictors[j].clone(),
                    class: d.classes[c].clone(),
                });
            }
        }
    }
    if !opt.converged {
        return Err(Error::NotConverged {
            iterations: opt.iterations,
            grad_norm: opt.grad_norm,
        });
    }
    let mut coefficients = DMatrix::zeros(k, p + 1);
    for c in 0..k {
        let mut intercept = opt.beta[(0, c)];
        for j in 0..p {
            let b = opt.beta[(j + 1, c)] / st.sd[j];
            coefficients[(c, j + 1)] = b;
            intercept -= b * st.mean[j];
        }
        coefficients[(c, 0)] = intercept;
    }
    let n_params = coefficients.len();
    Ok(MlogitFit {
        outcome: outcome_name.to_string(),
        reference_class: d.reference.clone(),
        classes: d.classes.clone(),
        predictors: d.predictors.clone(),
        coefficients,
        log_likelihood: opt.ll,
        aic: 2.0 * n_params as f64 - 2.0 * opt.ll,
        n_used: d.y.len(),
        converged: true,
        iterations: opt.iterations,
        grad_norm: opt.grad_norm,
        ll_trace: opt.trace,
    })
}

/// Maximum-likelihood multinomial logit of `outcome` on `spec.predictors`.
/// Respondents without an outcome class are omitted.
pub fn fit_mlogit(table: &PredictorTable, outcome: &Outcome, spec: &ModelSpec) -> Result<MlogitFit> {
    fit_mlogit_with(table, outcome, spec, &MlogitOptions::default())
}

pub fn fit_mlogit_with(table: &PredictorTable, outcome: &Outcome, spec: &ModelSpec, opts: &MlogitOptions) -> Result<MlogitFit> {
    let d = Design::build(table, outcome, spec)?;
    fit_design(&d, &outcome.name, opts, None)
}

/// Log-likelihood and its gradient at `coefficients` (layout as in
/// [`MlogitFit::coefficients`], original predictor scale).
pub fn mlogit_log_likelihood(
    table: &PredictorTable,
    outcome: &Outcome,
    spec: &ModelSpec,
    coefficients: &DMatrix<f64>,
) -> Result<(f64, DMatrix<f64>)> {
    let d = Design::build(table, outcome, spec)?;
    let (n, p) = d.x.shape();
    if coefficients.shape() != (d.classes.len(), p + 1) {
        return Err(Error::InvalidInput("coefficient matrix has the wrong shape".into()));
    }
    let mut z = DMatrix::from_element(n, p + 1, 1.0);
    z.columns_mut(1, p).copy_from(&d.x);
    let (ll, g, _) = ll_grad(&z, &d.y, &coefficients.transpose());
    Ok((ll, g.transpose()))
}

/// Fitted probabilities for the respondents used by `fit`, columns
/// `[reference, classes...]`.
pub fn fitted_probabilities(fit: &MlogitFit, table: &PredictorTable, outcome: &Outcome) -> Result<DMatrix<f64>> {
    let spec = ModelSpec {
        reference_class: Some(fit.reference_class.clone()),
        predictors: fit.predictors.clone(),
    };
    let d = Design::build(table, outcome, &spec)?;
    let n = d.x.nrows();
    let k = fit.classes.len();
    let mut out = DMatrix::zeros(n, k + 1);
    for i in 0..n {
        let x: Vec<f64> = d.x.row(i).iter().copied().collect();
        for (c, v) in fit.probabilities(&x).into_iter().enumerate() {
            out[(i, c)] = v;
        }
    }
    Ok(out)
}

/// `exp` of the non-intercept coefficients: rows = non-reference classes,
/// columns = predictors.
pub fn odds_ratios(fit: &MlogitFit) -> DMatrix<f64> {
    let p = fit.predictors.len();
    fit.coefficients.columns(1, p).map(f64::exp)
}
