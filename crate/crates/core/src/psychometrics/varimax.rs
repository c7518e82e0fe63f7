use nalgebra::DMatrix;

use super::efa::normalize_signs;

#[derive(Debug, Clone)]
pub struct VarimaxOptions {
    /// Row-normalize by communality before rotating (Kaiser).
    pub kaiser_normalize: bool,
    pub tolerance: f64,
    pub max_sweeps: usize,
}

impl Default for VarimaxOptions {
    fn default() -> Self {
        VarimaxOptions {
            kaiser_normalize: true,
            tolerance: 1e-8,
            max_sweeps: 1000,
        }
    }
}

/// Raw varimax criterion: sum over factors of the variance of squared
/// loadings.
pub fn varimax_criterion(l: &DMatrix<f64>) -> f64 {
    let p = l.nrows() as f64;
    (0..l.ncols())
        .map(|j| {
            let sq: Vec<f64> = l.column(j).iter().map(|x| x * x).collect();
            let s2: f64 = sq.iter().sum();
            let s4: f64 = sq.iter().map(|x| x * x).sum();
            (p * s4 - s2 * s2) / (p * p)
        })
        .sum()
}

/// Orthogonal varimax rotation by pairwise planar rotations. Output
/// columns are ordered by descending sum of squared loadings, and each
/// column's largest-|value| entry is positive.
pub fn varimax(loadings: &DMatrix<f64>, opts: &VarimaxOptions) -> DMatrix<f64> {
    let (p, m) = loadings.shape();
    let mut l = loadings.clone();
    if m >= 2 {
        let norms: Vec<f64> = (0..p)
            .map(|i| {
                let h = l.row(i).norm();
                if opts.kaiser_normalize && h > 1e-12 {
                    h
                } else {
                    1.0
                }
            })
            .collect();
        for i in 0..p {
            l.row_mut(i).unscale_mut(norms[i]);
        }

        let mut crit = varimax_criterion(&l);
        for _ in 0..opts.max_sweeps {
            let mut max_angle = 0.0f64;
            for a in 0..m - 1 {
                for b in a + 1..m {
                    let (mut sa, mut sb, mut sc, mut sd) = (0.0, 0.0, 0.0, 0.0);
                    for i in 0..p {
                        let (x, y) = (l[(i, a)], l[(i, b)]);
                        let u = x * x - y * y;
                        let v = 2.0 * x * y;
                        sa += u;
                        sb += v;
                        sc += u * u - v * v;
                        sd += 2.0 * u * v;
                    }
                    let num = sd - 2.0 * sa * sb / p as f64;
                    let den = sc - (sa * sa - sb * sb) / p as f64;
                    let phi = 0.25 * num.atan2(den);
                    max_angle = max_angle.max(phi.abs());
                    let (s, c) = phi.sin_cos();
                    for i in 0..p {
                        let (x, y) = (l[(i, a)], l[(i, b)]);
                        l[(i, a)] = c * x + s * y;
                        l[(i, b)] = -s * x + c * y;
                    }
                }
            }
            let next = varimax_criterion(&l);
            let change = (next - crit).abs();
            crit = next;
            if change < opts.tolerance && max_angle < opts.tolerance {
                break;
            }
        }

        for i in 0..p {
            l.row_mut(i).scale_mut(norms[i]);
        }
    }
    reorder_columns(&mut l);
    normalize_signs(&mut l);
    l
}

/// Sort columns by descending sum of squared loadings.
pub(crate) fn reorder_columns(l: &mut DMatrix<f64>) {
    let m = l.ncols();
    let ss: Vec<f64> = (0..m).map(|j| l.column(j).norm_squared()).collect();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| ss[b].total_cmp(&ss[a]));
    let src = l.clone();
    for (dst, &j) in order.iter().enumerate() {
        l.set_column(dst, &src.column(j));
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_factor_only_sign_changes() {
        let l = DMatrix::from_column_slice(3, 1, &[-0.5, -0.7, 0.2]);
        let r = varimax(&l, &Default::default());
        assert_eq!(r, -l);
    }

    #[test]
    fn communalities_preserved() {
        let l = DMatrix::from_row_slice(5, 3, &[
            0.6, 0.4, 0.1, 0.5, 0.5, 0.2, 0.3, -0.6, 0.3, 0.7, 0.1, -0.4, 0.2, 0.2, 0.6,
        ]);
        let r = varimax(&l, &Default::default());
        for i in 0..5 {
            assert!((l.row(i).norm_squared() - r.row(i).norm_squared()).abs() < 1e-8);
        }
        assert!((l.norm_squared() - r.norm_squared()).abs() < 1e-8);
        let ss: Vec<f64> = (0..3).map(|j| r.column(j).norm_squared()).collect();
        assert!(ss.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn criterion_does_not_decrease() {
        let l = DMatrix::from_row_slice(4, 2, &[0.7, 0.5, 0.6, 0.5, 0.5, -0.6, 0.4, -0.5]);
        let opts = VarimaxOptions {
            kaiser_normalize: false,
            ..Default::default()
        };
        let r = varimax(&l, &opts);
        assert!(varimax_criterion(&r) >= varimax_criterion(&l) - 1e-12);
    }
}
