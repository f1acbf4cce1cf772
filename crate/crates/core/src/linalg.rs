//! Small dense numerics shared by the rest of the crate.
//!
//! The 3×3 symmetric eigensolver is a cyclic Jacobi iteration; it is used for
//! voting tensors and PCA covariances, both of which are tiny and need stable,
//! deterministic eigenvectors. General SVD is delegated to `faer`.

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};

use crate::error::{Error, Result};

/// Symmetric 3×3 tensor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SymTensor3(Matrix3<f64>);

impl SymTensor3 {
    pub fn zero() -> Self {
        SymTensor3(Matrix3::zeros())
    }

    /// Builds `n nᵀ`.
    pub fn outer(n: &Vector3<f64>) -> Self {
        SymTensor3(n * n.transpose())
    }

    /// Symmetrizes `m` by averaging it with its transpose.
    pub fn from_matrix(m: Matrix3<f64>) -> Self {
        SymTensor3((m + m.transpose()) * 0.5)
    }

    /// Adds `weight · n nᵀ`, writing both triangles from the same products.
    pub fn add_outer(&mut self, n: &Vector3<f64>, weight: f64) {
        for a in 0..3 {
            for b in a..3 {
                let v = weight * n[a] * n[b];
                self.0[(a, b)] += v;
                if a != b {
                    self.0[(b, a)] += v;
                }
            }
        }
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    pub fn is_zero(&self) -> bool {
        self.0.iter().all(|v| *v == 0.0)
    }
}

impl std::ops::Add for SymTensor3 {
    type Output = SymTensor3;
    fn add(self, rhs: SymTensor3) -> SymTensor3 {
        SymTensor3(self.0 + rhs.0)
    }
}

/// Eigenpairs of a [`SymTensor3`], eigenvalues non-ascending.
#[derive(Debug, Clone, Copy)]
pub struct EigenDecomp3 {
    pub values: [f64; 3],
    pub vectors: [Vector3<f64>; 3],
}

impl EigenDecomp3 {
    pub fn reconstruct(&self) -> Matrix3<f64> {
        let mut m = Matrix3::zeros();
        for k in 0..3 {
            m += self.values[k] * self.vectors[k] * self.vectors[k].transpose();
        }
        m
    }
}

/// Flips `v` so its largest-magnitude component is non-negative (first index wins ties).
pub fn canonical_sign(v: Vector3<f64>) -> Vector3<f64> {
    let mut best = 0;
    for k in 1..3 {
        if v[k].abs() > v[best].abs() {
            best = k;
        }
    }
    if v[best] < 0.0 {
        -v
    } else {
        v
    }
}

/// Eigendecomposition of a symmetric 3×3 tensor by cyclic Jacobi rotations.
pub fn eigen_sym3(t: &SymTensor3) -> EigenDecomp3 {
    let mut a = *t.matrix();
    let mut v = Matrix3::<f64>::identity();
    let scale = a.iter().fold(0.0f64, |m, x| m.max(x.abs()));

    if scale > 0.0 {
        for _sweep in 0..50 {
            let off = a[(0, 1)].powi(2) + a[(0, 2)].powi(2) + a[(1, 2)].powi(2);
            if off.sqrt() <= 1e-300_f64.max(f64::EPSILON * 1e-3 * scale) {
                break;
            }
            for (p, q) in [(0usize, 1usize), (0, 2), (1, 2)] {
                let apq = a[(p, q)];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                // A <- Jᵀ A J with J the (p, q) rotation.
                for k in 0..3 {
                    let akp = a[(k, p)];
                    let akq = a[(k, q)];
                    a[(k, p)] = c * akp - s * akq;
                    a[(k, q)] = s * akp + c * akq;
                }
                for k in 0..3 {
                    let apk = a[(p, k)];
                    let aqk = a[(q, k)];
                    a[(p, k)] = c * apk - s * aqk;
                    a[(q, k)] = s * apk + c * aqk;
                }
                a[(p, q)] = 0.0;
                a[(q, p)] = 0.0;
                for k in 0..3 {
                    let vkp = v[(k, p)];
                    let vkq = v[(k, q)];
                    v[(k, p)] = c * vkp - s * vkq;
                    v[(k, q)] = s * vkp + c * vkq;
                }
            }
        }
    }

    let mut order = [0usize, 1, 2];
    order.sort_by(|&x, &y| a[(y, y)].total_cmp(&a[(x, x)]));
    let values = order.map(|k| a[(k, k)]);
    let vectors = order.map(|k| canonical_sign(v.column(k).into_owned()));
    EigenDecomp3 { values, vectors }
}

/// Thin SVD `A = U diag(s) Vᵀ` with `k = min(rows, cols)`.
#[derive(Debug, Clone)]
pub struct SvdResult {
    pub u: DMatrix<f64>,
    pub singular_values: DVector<f64>,
    pub v: DMatrix<f64>,
}

impl SvdResult {
    /// `U diag(f(s)) Vᵀ` for an arbitrary per-value map.
    pub fn recompose_with(&self, mut f: impl FnMut(usize, f64) -> f64) -> DMatrix<f64> {
        let mut us = self.u.clone();
        for (m, mut col) in us.column_iter_mut().enumerate() {
            col *= f(m, self.singular_values[m]);
        }
        us * self.v.transpose()
    }

    pub fn reconstruct(&self) -> DMatrix<f64> {
        self.recompose_with(|_, s| s)
    }
}

pub(crate) fn to_faer(a: &DMatrix<f64>) -> faer::Mat<f64> {
    faer::Mat::from_fn(a.nrows(), a.ncols(), |i, j| a[(i, j)])
}

/// Thin singular value decomposition, singular values non-ascending.
pub fn svd(a: &DMatrix<f64>) -> Result<SvdResult> {
    if a.iter().any(|x| !x.is_finite()) {
        return Err(Error::invalid("svd: non-finite matrix entry"));
    }
    let k = a.nrows().min(a.ncols());
    if k == 0 {
        return Ok(SvdResult {
            u: DMatrix::zeros(a.nrows(), 0),
            singular_values: DVector::zeros(0),
            v: DMatrix::zeros(a.ncols(), 0),
        });
    }
    let dec = to_faer(a)
        .thin_svd()
        .map_err(|e| Error::Internal(format!("svd did not converge: {e:?}")))?;
    let s = dec.S().column_vector();
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&x, &y| s[y].total_cmp(&s[x]));
    let u_f = dec.U();
    let v_f = dec.V();
    let u = DMatrix::from_fn(a.nrows(), k, |i, j| u_f[(i, order[j])]);
    let v = DMatrix::from_fn(a.ncols(), k, |i, j| v_f[(i, order[j])]);
    let singular_values = DVector::from_iterator(k, order.iter().map(|&j| s[j].max(0.0)));
    Ok(SvdResult {
        u,
        singular_values,
        v,
    })
}

/// `max(0, s - w)`.
pub fn soft_threshold(s: f64, w: f64) -> Result<f64> {
    if !(s >= 0.0) || !(w >= 0.0) {
        return Err(Error::invalid(format!(
            "soft_threshold expects non-negative inputs, got ({s}, {w})"
        )));
    }
    Ok((s - w).max(0.0))
}
