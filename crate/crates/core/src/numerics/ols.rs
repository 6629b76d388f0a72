//! Ordinary least squares with per-coefficient two-sided t-tests.

use nalgebra::{DMatrix, DVector};

use super::matrix::Matrix;
use super::stats::t_two_sided_p;
use crate::error::{dim_err, Error, Result};

/// Relative pivot size below which a column is treated as dependent.
const RANK_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Coefficient {
    pub estimate: f64,
    pub std_error: f64,
    pub t_stat: f64,
    pub p_value: f64,
}

#[derive(Debug, Clone)]
pub struct OlsFit {
    pub coefficients: Vec<Coefficient>,
    pub residual_ss: f64,
    pub df: usize,
}

/// Fit `y ~ covariates` (the caller supplies any intercept column).
pub fn ols_ttest(y: &[f64], covariates: &Matrix) -> Result<OlsFit> {
    let (n, p) = covariates.shape();
    if y.len() != n {
        return Err(dim_err(format!("{} responses for {n} design rows", y.len())));
    }
    if n <= p {
        return Err(dim_err(format!("need more rows than columns, got {n}x{p}")));
    }
    let x = DMatrix::from_row_slice(n, p, covariates.as_slice());
    let col_norms: Vec<f64> = (0..p).map(|j| x.column(j).norm()).collect();
    let qr = x.clone().qr();
    let r = qr.r();
    for j in 0..p {
        if col_norms[j] == 0.0 || r[(j, j)].abs() <= RANK_TOL * col_norms[j] {
            return Err(Error::Singular { column: j });
        }
    }
    let yv = DVector::from_column_slice(y);
    let qty = qr.q().transpose() * &yv;
    let beta = r
        .solve_upper_triangular(&qty)
        .ok_or(Error::Singular { column: p - 1 })?;
    let resid = &yv - &x * &beta;
    let rss = resid.norm_squared();
    let df = n - p;
    let sigma2 = rss / df as f64;
    let r_inv = r
        .solve_upper_triangular(&DMatrix::identity(p, p))
        .ok_or(Error::Singular { column: p - 1 })?;
    let coefficients = (0..p)
        .map(|j| {
            let se = (sigma2 * r_inv.row(j).norm_squared()).sqrt();
            let est = beta[j];
            let (t, pv) = if se > 0.0 {
                let t = est / se;
                (t, t_two_sided_p(t, df as f64))
            } else if est != 0.0 {
                (f64::INFINITY.copysign(est), 0.0)
            } else {
                (0.0, 1.0)
            };
            Coefficient { estimate: est, std_error: se, t_stat: t, p_value: pv }
        })
        .collect();
    Ok(OlsFit { coefficients, residual_ss: rss, df })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::rng::RngStream;
    use crate::numerics::stats::ks_uniform;

    /// Gauss–Jordan inverse, used only as an independent oracle.
    fn invert(a: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let n = a.len();
        let mut m: Vec<Vec<f64>> = a
            .iter()
            .enumerate()
            .map(|(i, r)| {
                let mut row = r.clone();
                row.extend((0..n).map(|j| if i == j { 1.0 } else { 0.0 }));
                row
            })
            .collect();
        for c in 0..n {
            let piv = (c..n).max_by(|&i, &j| m[i][c].abs().total_cmp(&m[j][c].abs())).unwrap();
            m.swap(c, piv);
            let d = m[c][c];
            m[c].iter_mut().for_each(|v| *v /= d);
            for r in 0..n {
                if r != c {
                    let f = m[r][c];
                    let src = m[c].clone();
                    m[r].iter_mut().zip(&src).for_each(|(v, s)| *v -= f * s);
                }
            }
        }
        m.into_iter().map(|r| r[n..].to_vec()).collect()
    }

    #[test]
    fn matches_normal_equations_oracle() {
        let xs = [0.5, 1.0, 1.7, 2.2, 3.1, 3.9, 4.4, 5.0, 6.3, 7.1];
        let zs = [1.0, -1.0, 0.3, 0.8, -0.2, 1.5, -0.7, 0.1, 0.9, -1.2];
        let y: Vec<f64> = (0..10).map(|i| 1.0 + 0.7 * xs[i] - 0.4 * zs[i] + 0.3 * ((i * 7 % 5) as f64 - 2.0)).collect();
        let rows: Vec<Vec<f64>> = (0..10).map(|i| vec![1.0, xs[i], zs[i]]).collect();
        let design = Matrix::from_rows(&rows).unwrap();
        let fit = ols_ttest(&y, &design).unwrap();

        let mut xtx = vec![vec![0.0; 3]; 3];
        let mut xty = vec![0.0; 3];
        for i in 0..10 {
            for a in 0..3 {
                xty[a] += rows[i][a] * y[i];
                for b in 0..3 {
                    xtx[a][b] += rows[i][a] * rows[i][b];
                }
            }
        }
        let inv = invert(&xtx);
        let beta: Vec<f64> = (0..3).map(|a| (0..3).map(|b| inv[a][b] * xty[b]).sum()).collect();
        let rss: f64 = (0..10)
            .map(|i| (y[i] - (0..3).map(|a| rows[i][a] * beta[a]).sum::<f64>()).powi(2))
            .sum();
        let s2 = rss / 7.0;
        for a in 0..3 {
            assert!((fit.coefficients[a].estimate - beta[a]).abs() < 1e-10);
            assert!((fit.coefficients[a].std_error - (s2 * inv[a][a]).sqrt()).abs() < 1e-10);
        }
    }

    #[test]
    fn perfect_fit() {
        let rows: Vec<Vec<f64>> = (0..8).map(|i| vec![1.0, i as f64]).collect();
        let y: Vec<f64> = (0..8).map(|i| 3.0 * i as f64).collect();
        let fit = ols_ttest(&y, &Matrix::from_rows(&rows).unwrap()).unwrap();
        assert!((fit.coefficients[1].estimate - 3.0).abs() < 1e-12);
        assert!(fit.coefficients[1].p_value < 1e-12);
    }

    #[test]
    fn rank_deficiency_names_column() {
        let rows: Vec<Vec<f64>> = (0..6).map(|i| vec![1.0, i as f64, 2.0 * i as f64 + 1.0]).collect();
        let r = ols_ttest(&[1.0, 2.0, 0.0, 1.0, 3.0, 2.0], &Matrix::from_rows(&rows).unwrap());
        assert!(matches!(r, Err(Error::Singular { column: 2 })));
    }

    #[test]
    fn null_p_values_uniform() {
        let mut rng = RngStream::new(77);
        let n = 50;
        let mut ps = Vec::new();
        for _ in 0..1000 {
            let design = Matrix::from_fn(n, 2, |_, j| if j == 0 { 1.0 } else { rng.normal() });
            let y: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
            ps.push(ols_ttest(&y, &design).unwrap().coefficients[1].p_value);
        }
        assert!(ks_uniform(&ps) < 0.05);
    }

    proptest::proptest! {
        #[test]
        fn p_values_valid_and_scale_invariant(seed in 0u64..1000, scale in 0.01f64..100.0, shift in -50.0f64..50.0) {
            let mut rng = RngStream::new(seed);
            let n = 20;
            let design = Matrix::from_fn(n, 3, |_, j| if j == 0 { 1.0 } else { rng.normal() });
            let y: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
            let a = ols_ttest(&y, &design).unwrap();
            let mut rescaled = design.clone();
            for i in 0..n {
                rescaled[(i, 2)] = scale * design[(i, 2)] + shift;
            }
            let b = ols_ttest(&y, &rescaled).unwrap();
            for c in &a.coefficients {
                proptest::prop_assert!((0.0..=1.0).contains(&c.p_value));
            }
            proptest::prop_assert!((a.coefficients[1].t_stat - b.coefficients[1].t_stat).abs() < 1e-8);
            proptest::prop_assert!((a.coefficients[2].t_stat - b.coefficients[2].t_stat).abs() < 1e-8);
        }
    }
}
