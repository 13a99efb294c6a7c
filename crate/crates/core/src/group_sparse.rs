//! Per-group PCA dictionaries and residual shrinkage.
//!
//! Each group gets an orthonormal basis from the eigenvectors of its
//! (uncentered) scatter matrix. Noisy codes are pulled toward the codes of
//! the first-pass estimate by soft-thresholding their difference, one
//! threshold per atom.

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};
use crate::patch::PatchGroup;

/// Floor on per-atom residual scale; keeps thresholds finite.
pub const RESIDUAL_STD_FLOOR: f64 = 1e-6;

/// Components below this magnitude are skipped when fixing eigenvector
/// signs.
const SIGN_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct Dictionary {
    /// `bc x bc`, columns are principal directions by descending eigenvalue.
    pub basis: DMatrix<f64>,
    pub eigenvalues: Vec<f64>,
}

impl Dictionary {
    pub fn identity(dim: usize) -> Self {
        Self {
            basis: DMatrix::identity(dim, dim),
            eigenvalues: vec![0.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.basis.nrows()
    }

    /// `max |(B^T B - I)_ij|`.
    pub fn orthonormality_error(&self) -> f64 {
        let gram = self.basis.tr_mul(&self.basis);
        let n = gram.nrows();
        let mut worst = 0.0_f64;
        for j in 0..n {
            for i in 0..n {
                let target = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((gram[(i, j)] - target).abs());
            }
        }
        worst
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CodeMatrix {
    pub coefficients: DMatrix<f64>,
}

impl CodeMatrix {
    pub fn new(coefficients: DMatrix<f64>) -> Result<Self> {
        if coefficients.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("code matrix"));
        }
        Ok(Self { coefficients })
    }

    pub fn shape(&self) -> (usize, usize) {
        self.coefficients.shape()
    }

    fn check_same_shape(&self, other: &CodeMatrix, what: &str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::dims(what, self.shape(), other.shape()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LambdaSchedule {
    pub per_atom_lambda: Vec<f64>,
    pub c: f64,
    pub sigma_n: f64,
}

/// Orthonormal eigenbasis of `G G^T / k`.
///
/// Columns are sorted by descending eigenvalue (stable on ties) and each
/// column's first non-negligible component is made positive.
pub fn pca_dictionary(group: &PatchGroup) -> Result<Dictionary> {
    let g = &group.matrix;
    if g.ncols() == 0 {
        return Err(Error::InvalidParameter("group has no columns".into()));
    }
    if g.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("patch group"));
    }
    let k = g.ncols() as f64;
    let mut scatter = g * g.transpose();
    scatter /= k;
    // Exact symmetry for the solver.
    scatter = (&scatter + scatter.transpose()) * 0.5;

    let eig = SymmetricEigen::new(scatter);
    let n = eig.eigenvalues.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));

    let mut basis = DMatrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        basis.set_column(dst, &eig.eigenvectors.column(src));
    }
    orthonormalize(&mut basis);
    for j in 0..n {
        let mut col = basis.column_mut(j);
        if let Some(first) = col.iter().copied().find(|v| v.abs() > SIGN_EPS) {
            if first < 0.0 {
                col.neg_mut();
            }
        }
    }
    let eigenvalues = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    Ok(Dictionary { basis, eigenvalues })
}

/// Two passes of modified Gram-Schmidt. The solver's vectors are already
/// orthonormal to rounding; this pins the error well under 1e-10.
fn orthonormalize(basis: &mut DMatrix<f64>) {
    let n = basis.ncols();
    for _ in 0..2 {
        for j in 0..n {
            for i in 0..j {
                let proj = basis.column(i).dot(&basis.column(j));
                let qi = basis.column(i).clone_owned();
                basis.column_mut(j).axpy(-proj, &qi, 1.0);
            }
            let norm = basis.column(j).norm();
            basis.column_mut(j).unscale_mut(norm);
        }
    }
}

/// `basis^T * group`.
pub fn encode(dictionary: &Dictionary, group: &PatchGroup) -> Result<CodeMatrix> {
    if dictionary.dim() != group.matrix.nrows() {
        return Err(Error::dims(
            "encode",
            dictionary.basis.shape(),
            group.matrix.shape(),
        ));
    }
    Ok(CodeMatrix {
        coefficients: dictionary.basis.tr_mul(&group.matrix),
    })
}

/// `basis * code`.
pub fn reconstruct(dictionary: &Dictionary, code: &CodeMatrix, patch_side: usize) -> Result<PatchGroup> {
    if dictionary.dim() != code.coefficients.nrows() {
        return Err(Error::dims(
            "reconstruct",
            dictionary.basis.shape(),
            code.shape(),
        ));
    }
    PatchGroup::new(patch_side, &dictionary.basis * &code.coefficients)
}

/// Per-atom RMS of `noisy - estimate` across the group, floored at
/// [`RESIDUAL_STD_FLOOR`].
pub fn estimate_residual_std(code_noisy: &CodeMatrix, code_estimate: &CodeMatrix) -> Result<Vec<f64>> {
    code_noisy.check_same_shape(code_estimate, "estimate_residual_std")?;
    let (rows, cols) = code_noisy.shape();
    let a = &code_noisy.coefficients;
    let b = &code_estimate.coefficients;
    Ok((0..rows)
        .map(|j| {
            let ms = (0..cols).map(|l| (a[(j, l)] - b[(j, l)]).powi(2)).sum::<f64>() / cols as f64;
            ms.sqrt().max(RESIDUAL_STD_FLOOR)
        })
        .collect())
}

/// `lambda_j = c * 2 * sqrt(2) * sigma_n^2 / residual_std_j`.
pub fn lambda_schedule(sigma_n: f64, residual_std: &[f64], c: f64) -> LambdaSchedule {
    let scale = c * 2.0 * std::f64::consts::SQRT_2 * sigma_n * sigma_n;
    LambdaSchedule {
        per_atom_lambda: residual_std
            .iter()
            .map(|&s| scale / s.max(RESIDUAL_STD_FLOOR))
            .collect(),
        c,
        sigma_n,
    }
}

#[inline]
pub fn soft_threshold(value: f64, lambda: f64) -> f64 {
    value.signum() * (value.abs() - lambda).max(0.0)
}

/// `S_lambda_j(noisy - estimate) + estimate`, entrywise with the row's
/// threshold.
///
/// With an orthonormal dictionary this is the exact per-column minimizer of
/// `||y - D a||^2 + sum_j 2 lambda_j |a_j - b_j|`.
pub fn shrink_group(
    code_noisy: &CodeMatrix,
    code_estimate: &CodeMatrix,
    schedule: &LambdaSchedule,
) -> Result<CodeMatrix> {
    code_noisy.check_same_shape(code_estimate, "shrink_group")?;
    let (rows, _) = code_noisy.shape();
    if schedule.per_atom_lambda.len() != rows {
        return Err(Error::DimensionMismatch(format!(
            "schedule has {} thresholds for {rows} atoms",
            schedule.per_atom_lambda.len()
        )));
    }
    let b = &code_estimate.coefficients;
    // Written as `a - lambda * sign(a - b)` so a zero threshold returns the
    // noisy code bit-for-bit.
    let out = DMatrix::from_fn(rows, code_noisy.shape().1, |j, l| {
        let (alpha, beta) = (code_noisy.coefficients[(j, l)], b[(j, l)]);
        let lambda = schedule.per_atom_lambda[j];
        let r = alpha - beta;
        if r.abs() > lambda {
            alpha - lambda * r.signum()
        } else {
            beta
        }
    });
    Ok(CodeMatrix { coefficients: out })
}
