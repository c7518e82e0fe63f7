//! Small descriptive-statistics helpers shared across modules.

use nalgebra::DMatrix;

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample variance with denominator `n - 1`.
pub fn sample_variance(xs: &[f64]) -> f64 {
    let m = mean(xs);
    xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() as f64 - 1.0)
}

/// Population variance with denominator `n`.
pub fn population_variance(xs: &[f64]) -> f64 {
    let m = mean(xs);
    xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / xs.len() as f64
}

/// Pearson correlation matrix of equally long columns. On a constant
/// column, returns its index as the error.
pub fn correlation_of_columns(cols: &[Vec<f64>]) -> std::result::Result<DMatrix<f64>, usize> {
    let k = cols.len();
    let centered: Vec<Vec<f64>> = cols
        .iter()
        .map(|c| {
            let m = mean(c);
            c.iter().map(|x| x - m).collect()
        })
        .collect();
    let norms: Vec<f64> = centered.iter().map(|c| c.iter().map(|x| x * x).sum::<f64>().sqrt()).collect();
    if let Some(i) = norms.iter().position(|&s| s == 0.0) {
        return Err(i);
    }
    let mut m = DMatrix::identity(k, k);
    for i in 0..k {
        for j in (i + 1)..k {
            let dot: f64 = centered[i].iter().zip(&centered[j]).map(|(a, b)| a * b).sum();
            let r = (dot / (norms[i] * norms[j])).clamp(-1.0, 1.0);
            m[(i, j)] = r;
            m[(j, i)] = r;
        }
    }
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variances() {
        let xs = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(mean(&xs), 2.5);
        assert!((sample_variance(&xs) - 5.0 / 3.0).abs() < 1e-15);
        assert!((population_variance(&xs) - 1.25).abs() < 1e-15);
    }

    #[test]
    fn correlation_basic() {
        let m = correlation_of_columns(&[vec![1.0, 2.0, 3.0], vec![3.0, 2.0, 1.0]]).unwrap();
        assert!((m[(0, 1)] + 1.0).abs() < 1e-15);
        assert_eq!(correlation_of_columns(&[vec![1.0, 2.0], vec![5.0, 5.0]]), Err(1));
    }
}
