//! Principal components of a column-centered matrix.
//!
//! Small problems (`min(rows, cols) ≤ 512`) use an exact symmetric
//! eigendecomposition of the smaller Gram matrix. Larger ones use randomized
//! subspace iteration with oversampling 8 and 4 power iterations.

use nalgebra::{DMatrix, SymmetricEigen};

use super::matrix::{dot, gemm, Matrix, Op};
use super::rng::RngStream;
use crate::error::{dim_err, Result};

pub const EXACT_LIMIT: usize = 512;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PcaMethod {
    Auto,
    Exact,
    Randomized { oversample: usize, power_iters: usize, seed: u64 },
}

impl PcaMethod {
    pub const RANDOMIZED_DEFAULT: PcaMethod = PcaMethod::Randomized { oversample: 8, power_iters: 4, seed: 0 };
}

#[derive(Debug, Clone)]
pub struct Pca {
    /// `K × cols`, orthonormal rows.
    pub components: Matrix,
    /// `rows × K` projections of the centered rows.
    pub scores: Matrix,
    pub singular_values: Vec<f64>,
    pub means: Vec<f64>,
}

impl Pca {
    /// Frobenius norm of `centered − scores·components`.
    pub fn residual_norm(&self, x: &Matrix) -> Result<f64> {
        let (xc, _) = x.center_columns();
        let recon = gemm(Op::N, &self.scores, Op::N, &self.components)?;
        Ok(xc.as_slice().iter().zip(recon.as_slice()).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt())
    }
}

pub fn top_principal_components(x: &Matrix, k: usize) -> Result<Pca> {
    top_principal_components_with(x, k, PcaMethod::Auto)
}

pub fn top_principal_components_with(x: &Matrix, k: usize, method: PcaMethod) -> Result<Pca> {
    let (rows, cols) = x.shape();
    if k > rows.min(cols) {
        return Err(dim_err(format!("{k} components requested from a {rows}x{cols} matrix")));
    }
    let (xc, means) = x.center_columns();
    if k == 0 {
        return Ok(Pca { components: Matrix::zeros(0, cols), scores: Matrix::zeros(rows, 0), singular_values: vec![], means });
    }
    let method = match method {
        PcaMethod::Auto if rows.min(cols) <= EXACT_LIMIT => PcaMethod::Exact,
        PcaMethod::Auto => PcaMethod::RANDOMIZED_DEFAULT,
        m => m,
    };
    let (mut components, singular_values) = match method {
        PcaMethod::Exact => exact(&xc, k)?,
        PcaMethod::Randomized { oversample, power_iters, seed } => randomized(&xc, k, oversample, power_iters, seed)?,
        PcaMethod::Auto => unreachable!(),
    };
    for i in 0..k {
        let row = components.row_mut(i);
        let pivot = row.iter().cloned().fold(0.0f64, |acc, v| if v.abs() > acc.abs() { v } else { acc });
        if pivot < 0.0 {
            row.iter_mut().for_each(|v| *v = -*v);
        }
    }
    let scores = gemm(Op::N, &xc, Op::T, &components)?;
    Ok(Pca { components, scores, singular_values, means })
}

fn to_nalgebra(m: &Matrix) -> DMatrix<f64> {
    DMatrix::from_row_slice(m.rows(), m.cols(), m.as_slice())
}

/// Top-`k` eigenpairs of a symmetric matrix, descending.
fn top_eigen(g: &Matrix, k: usize) -> (Vec<f64>, Vec<Vec<f64>>) {
    let eig = SymmetricEigen::new(to_nalgebra(g));
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let vals = order[..k].iter().map(|&i| eig.eigenvalues[i].max(0.0)).collect();
    let vecs = order[..k].iter().map(|&i| eig.eigenvectors.column(i).iter().cloned().collect()).collect();
    (vals, vecs)
}

fn exact(xc: &Matrix, k: usize) -> Result<(Matrix, Vec<f64>)> {
    let (rows, cols) = xc.shape();
    let mut comps = Matrix::zeros(k, cols);
    let mut svals = Vec::with_capacity(k);
    if cols <= rows {
        let cov = gemm(Op::T, xc, Op::N, xc)?;
        let (vals, vecs) = top_eigen(&cov, k);
        for (i, v) in vecs.iter().enumerate() {
            comps.row_mut(i).copy_from_slice(v);
            svals.push(vals[i].sqrt());
        }
    } else {
        let gram = gemm(Op::N, xc, Op::T, xc)?;
        let (vals, vecs) = top_eigen(&gram, k);
        for (i, u) in vecs.iter().enumerate() {
            let s = vals[i].sqrt();
            svals.push(s);
            let um = Matrix::from_vec(rows, 1, u.clone())?;
            let v = gemm(Op::T, &um, Op::N, xc)?;
            comps.row_mut(i).copy_from_slice(v.as_slice());
        }
        complete_orthonormal_rows(&mut comps);
    }
    Ok((comps, svals))
}

/// Gram–Schmidt over the rows; rows that collapse (zero singular values)
/// are replaced by a fresh orthogonal unit direction.
fn complete_orthonormal_rows(m: &mut Matrix) {
    let (k, n) = m.shape();
    for i in 0..k {
        let mut attempt = 0;
        loop {
            let mut v = m.row(i).to_vec();
            for j in 0..i {
                let proj = dot(&v, m.row(j));
                for (a, b) in v.iter_mut().zip(m.row(j)) {
                    *a -= proj * b;
                }
            }
            let norm = dot(&v, &v).sqrt();
            if norm > 1e-10 {
                m.row_mut(i).iter_mut().zip(&v).for_each(|(d, s)| *d = s / norm);
                break;
            }
            let row = m.row_mut(i);
            row.iter_mut().for_each(|x| *x = 0.0);
            row[(i + attempt) % n] = 1.0;
            attempt += 1;
        }
    }
}

/// Orthonormalize the columns of `m` in place (modified Gram–Schmidt).
fn orthonormalize_columns(m: &Matrix) -> Matrix {
    let mut t = m.transpose();
    complete_orthonormal_rows(&mut t);
    t.transpose()
}

fn randomized(xc: &Matrix, k: usize, oversample: usize, power_iters: usize, seed: u64) -> Result<(Matrix, Vec<f64>)> {
    let (rows, cols) = xc.shape();
    let l = (k + oversample).min(rows.min(cols));
    let mut rng = RngStream::new(seed);
    let omega = Matrix::from_fn(cols, l, |_, _| rng.normal());
    let mut q = orthonormalize_columns(&gemm(Op::N, xc, Op::N, &omega)?);
    for _ in 0..power_iters {
        let z = orthonormalize_columns(&gemm(Op::T, xc, Op::N, &q)?);
        q = orthonormalize_columns(&gemm(Op::N, xc, Op::N, &z)?);
    }
    // B = Qᵀ·Xc is l × cols; its small Gram B·Bᵀ gives the right singular vectors.
    let b = gemm(Op::T, &q, Op::N, xc)?;
    let bbt = gemm(Op::N, &b, Op::T, &b)?;
    let (vals, vecs) = top_eigen(&bbt, k);
    let mut comps = Matrix::zeros(k, cols);
    let mut svals = Vec::with_capacity(k);
    for (i, u) in vecs.iter().enumerate() {
        let um = Matrix::from_vec(l, 1, u.clone())?;
        let v = gemm(Op::T, &um, Op::N, &b)?;
        comps.row_mut(i).copy_from_slice(v.as_slice());
        svals.push(vals[i].sqrt());
    }
    complete_orthonormal_rows(&mut comps);
    Ok((comps, svals))
}

/// Largest principal angle (radians) between the row spaces of two matrices
/// with orthonormal rows.
pub fn max_principal_angle(a: &Matrix, b: &Matrix) -> Result<f64> {
    let m = gemm(Op::N, a, Op::T, b)?;
    let svd = to_nalgebra(&m).svd(false, false);
    let smin = svd.singular_values.iter().cloned().fold(f64::INFINITY, f64::min);
    Ok(smin.clamp(-1.0, 1.0).acos())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = RngStream::new(seed);
        Matrix::from_fn(rows, cols, |_, _| rng.normal())
    }

    /// Independent oracle: full SVD of the centered matrix.
    fn svd_oracle(x: &Matrix, k: usize) -> Matrix {
        let (xc, _) = x.center_columns();
        let svd = to_nalgebra(&xc).svd(false, true);
        let vt = svd.v_t.unwrap();
        let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
        order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
        Matrix::from_fn(k, x.cols(), |i, j| vt[(order[i], j)])
    }

    #[test]
    fn rank_one_recovery() {
        let u: Vec<f64> = (0..20).map(|i| (i as f64 * 0.37).sin() + 0.1 * i as f64).collect();
        let v: Vec<f64> = (0..12).map(|j| (j as f64 * 0.9).cos()).collect();
        let x = Matrix::from_fn(20, 12, |i, j| u[i] * v[j]);
        let pca = top_principal_components(&x, 1).unwrap();
        let vn = dot(&v, &v).sqrt();
        let cos = dot(pca.components.row(0), &v).abs() / vn;
        assert!((cos - 1.0).abs() < 1e-10);
        assert!(pca.residual_norm(&x).unwrap() < 1e-8);
    }

    #[test]
    fn two_block_structure() {
        // Rows 0..10 load on columns 0..5, rows 10..20 on columns 5..10.
        let x = Matrix::from_fn(20, 10, |i, j| {
            let a = if i < 10 { 3.0 } else { -1.0 };
            let b = if i < 10 { -1.0 } else { 2.0 };
            if j < 5 { a * (1.0 + j as f64 * 0.1) } else { b * (1.0 + j as f64 * 0.05) }
        });
        let pca = top_principal_components(&x, 1).unwrap();
        assert!(pca.residual_norm(&x).unwrap() < 1e-8);
        let oracle = svd_oracle(&x, 1);
        assert!(max_principal_angle(&pca.components, &oracle).unwrap() < 1e-6);
    }

    #[test]
    fn matches_full_svd_oracle() {
        let x = random(50, 30, 17);
        for k in [1, 3, 5] {
            let oracle = svd_oracle(&x, k);
            let exact = top_principal_components_with(&x, k, PcaMethod::Exact).unwrap();
            assert!(max_principal_angle(&exact.components, &oracle).unwrap() < 1e-6);
            let xt = x.transpose();
            let oracle_t = svd_oracle(&xt, k);
            let exact_t = top_principal_components_with(&xt, k, PcaMethod::Exact).unwrap();
            assert!(max_principal_angle(&exact_t.components, &oracle_t).unwrap() < 1e-6);
        }
    }

    #[test]
    fn randomized_agrees_with_oracle_on_low_rank_signal() {
        let mut rng = RngStream::new(3);
        let u = Matrix::from_fn(200, 4, |_, _| rng.normal());
        let v = Matrix::from_fn(4, 120, |_, _| rng.normal());
        let mut x = gemm(Op::N, &u, Op::N, &v).unwrap();
        for e in x.as_mut_slice() {
            *e += 0.01 * rng.normal();
        }
        let oracle = svd_oracle(&x, 3);
        let r = top_principal_components_with(&x, 3, PcaMethod::RANDOMIZED_DEFAULT).unwrap();
        assert!(max_principal_angle(&r.components, &oracle).unwrap() < 1e-6);
    }

    #[test]
    fn sign_convention() {
        let pca = top_principal_components(&random(30, 8, 1), 3).unwrap();
        for i in 0..3 {
            let row = pca.components.row(i);
            let big = row.iter().cloned().fold(0.0f64, |a, v| if v.abs() > a.abs() { v } else { a });
            assert!(big > 0.0);
        }
    }

    #[test]
    fn reconstruction_error_non_increasing() {
        let x = random(25, 15, 9);
        let mut prev = f64::INFINITY;
        for k in 0..=15 {
            let e = top_principal_components(&x, k).unwrap().residual_norm(&x).unwrap();
            assert!(e <= prev + 1e-9, "k={k}");
            prev = e;
        }
    }

    #[test]
    fn k_out_of_range() {
        assert!(top_principal_components(&random(5, 3, 0), 4).is_err());
    }
}
