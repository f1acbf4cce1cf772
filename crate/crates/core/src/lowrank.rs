//! Low-rank recovery of stacked normals.
//!
//! Normals of a similar set are stacked into an `r̂ × 3` matrix `M`, which is
//! then reshaped into a near-square `Z′` by reading `M` column-major (all x,
//! then all y, then all z) and writing column-major. Nuclear-norm shrinkage
//! of `Z′` is followed by the inverse reshape.

use nalgebra::{DMatrix, Vector3};

use crate::error::{Error, Result};
use crate::linalg::{soft_threshold, svd, SvdResult};
use crate::structures::{IsotropicStructure, SimilarSet};

/// Default regularization coefficient for the singular-value weights.
pub const DEFAULT_BETA: f64 = 1.0;

/// Rows are only dropped while the best factor pair is at least this lopsided.
pub const MAX_SIDE_DIFFERENCE: usize = 6;

/// Where a stacked row came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Provenance {
    pub sample: usize,
    pub structure: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StackedNormals {
    pub rows: Vec<Vector3<f64>>,
    pub provenance: Vec<Provenance>,
}

impl StackedNormals {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

/// Concatenates member normals of every similar structure, in structure order then member order.
pub fn stack_normals(
    similar: &SimilarSet,
    structures: &[IsotropicStructure],
    normals: &[Vector3<f64>],
) -> StackedNormals {
    let total: usize = similar
        .similars
        .iter()
        .map(|&s| structures[s].members.len())
        .sum();
    let mut rows = Vec::with_capacity(total);
    let mut provenance = Vec::with_capacity(total);
    for &s in &similar.similars {
        for &m in &structures[s].members {
            rows.push(normals[m]);
            provenance.push(Provenance {
                sample: m,
                structure: s,
            });
        }
    }
    StackedNormals { rows, provenance }
}

/// Target shape of `Z′` and the rows dropped to reach it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReshapeSpec {
    pub rows: usize,
    pub cols: usize,
    /// Indices into the stack, in the order they were removed (always from the end).
    pub dropped: Vec<usize>,
}

impl ReshapeSpec {
    pub fn kept(&self) -> usize {
        self.rows * self.cols / 3
    }
}

/// Most square factor pair `(r, c)` of `n` with `r ≥ c`.
pub fn squarest_factors(n: usize) -> (usize, usize) {
    let mut c = (n as f64).sqrt() as usize;
    while c * c > n {
        c -= 1;
    }
    while (c + 1) * (c + 1) <= n {
        c += 1;
    }
    while c > 1 && n % c != 0 {
        c -= 1;
    }
    let c = c.max(1);
    (n / c, c)
}

/// Chooses `r × c = 3 r̂′` with `|r − c| < 6`, dropping trailing rows as needed.
pub fn plan_reshape(r_hat: usize) -> Result<ReshapeSpec> {
    let mut kept = r_hat;
    let mut dropped = Vec::new();
    loop {
        if kept < 2 {
            return Err(Error::TooFewNormals(kept));
        }
        let (r, c) = squarest_factors(3 * kept);
        if r - c < MAX_SIDE_DIFFERENCE {
            return Ok(ReshapeSpec {
                rows: r,
                cols: c,
                dropped,
            });
        }
        kept -= 1;
        dropped.push(kept);
    }
}

/// Reshaped stack, ready for shrinkage.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalMatrix {
    pub z: DMatrix<f64>,
    pub spec: ReshapeSpec,
    /// Provenance of the surviving rows, in stack order.
    pub provenance: Vec<Provenance>,
}

/// Writes the surviving rows of `stack` into `Z′`.
pub fn reshape_to_square(stack: &StackedNormals, spec: &ReshapeSpec) -> Result<NormalMatrix> {
    let kept = spec.kept();
    if spec.rows * spec.cols != 3 * kept || kept + spec.dropped.len() != stack.len() {
        return Err(Error::Internal(format!(
            "reshape {}x{} with {} dropped does not fit a stack of {}",
            spec.rows,
            spec.cols,
            spec.dropped.len(),
            stack.len()
        )));
    }
    let mut flat = Vec::with_capacity(3 * kept);
    for axis in 0..3 {
        flat.extend(stack.rows[..kept].iter().map(|n| n[axis]));
    }
    Ok(NormalMatrix {
        z: DMatrix::from_vec(spec.rows, spec.cols, flat),
        spec: spec.clone(),
        provenance: stack.provenance[..kept].to_vec(),
    })
}

/// Inverse of [`reshape_to_square`]: one `(sample, row)` pair per surviving stack row.
pub fn unreshape_to_normals(nm: &NormalMatrix) -> Vec<(Provenance, Vector3<f64>)> {
    let kept = nm.provenance.len();
    let flat = nm.z.as_slice();
    nm.provenance
        .iter()
        .enumerate()
        .map(|(k, &p)| (p, Vector3::new(flat[k], flat[kept + k], flat[2 * kept + k])))
        .collect()
}

/// Sum of singular values.
pub fn nuclear_norm(a: &DMatrix<f64>) -> Result<f64> {
    Ok(svd(a)?.singular_values.sum())
}

/// Uniform singular-value soft-thresholding `U ψ(S, α) Vᵀ`.
pub fn nnm_solve(z: &DMatrix<f64>, alpha: f64) -> Result<DMatrix<f64>> {
    if !(alpha >= 0.0) {
        return Err(Error::invalid(format!("alpha must be non-negative, got {alpha}")));
    }
    let dec = svd(z)?;
    Ok(dec.recompose_with(|_, s| (s - alpha).max(0.0)))
}

/// Per-singular-value shrinkage weights `w_m = β exp(−(2δ_m/δ_1)²)`.
#[derive(Debug, Clone, PartialEq)]
pub struct WnnmWeights {
    pub beta: f64,
    pub weights: Vec<f64>,
}

/// Weights for singular values sorted non-ascending. A zero spectrum gets `β` everywhere.
pub fn wnnm_weights(singular_values: &[f64], beta: f64) -> WnnmWeights {
    let d1 = singular_values.first().copied().unwrap_or(0.0);
    let weights = singular_values
        .iter()
        .map(|&d| {
            if d1 > 0.0 {
                beta * (-(2.0 * d / d1).powi(2)).exp()
            } else {
                beta
            }
        })
        .collect();
    WnnmWeights { beta, weights }
}

/// `U ψ(S, w) Vᵀ` for a decomposition and matching weights.
pub fn weighted_shrink(dec: &SvdResult, weights: &WnnmWeights) -> DMatrix<f64> {
    dec.recompose_with(|m, s| soft_threshold(s, weights.weights[m]).unwrap_or(0.0))
}

/// Weighted nuclear-norm shrinkage of `Z′`; shape and provenance are kept.
pub fn wnnm_solve(nm: &NormalMatrix, beta: f64) -> Result<NormalMatrix> {
    if !(beta >= 0.0) {
        return Err(Error::config(format!("beta must be non-negative, got {beta}")));
    }
    let dec = svd(&nm.z)?;
    let w = wnnm_weights(dec.singular_values.as_slice(), beta);
    Ok(NormalMatrix {
        z: weighted_shrink(&dec, &w),
        spec: nm.spec.clone(),
        provenance: nm.provenance.clone(),
    })
}

/// Same shrinkage as [`wnnm_solve`], computed from the eigendecomposition of
/// the smaller Gram matrix instead of a full SVD.
///
/// With `Z′ᵀZ′ = V diag(δ²) Vᵀ`, the result is `Z′ V_K diag(1 − w/δ) V_Kᵀ` where
/// `K` holds the components that survive thresholding. Only the right (or left)
/// singular vectors are needed, which roughly halves the cost on the
/// near-square matrices built from normal stacks.
pub fn wnnm_solve_gram(nm: &NormalMatrix, beta: f64) -> Result<NormalMatrix> {
    if !(beta >= 0.0) {
        return Err(Error::config(format!("beta must be non-negative, got {beta}")));
    }
    let z = &nm.z;
    if z.iter().any(|x| !x.is_finite()) {
        return Err(Error::invalid("wnnm: non-finite matrix entry"));
    }
    let (r, c) = z.shape();
    let zf = faer::MatRef::from_column_major_slice(z.as_slice(), r, c);
    let tall = r >= c;
    let gram = if tall { zf.transpose() * zf } else { zf * zf.transpose() };
    let eig = gram
        .self_adjoint_eigen(faer::Side::Lower)
        .map_err(|e| Error::Internal(format!("eigendecomposition did not converge: {e:?}")))?;
    let lambda = eig.S().column_vector();
    let basis = eig.U();
    let k = lambda.nrows();
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&x, &y| lambda[y].total_cmp(&lambda[x]));
    let sv: Vec<f64> = order.iter().map(|&m| lambda[m].max(0.0).sqrt()).collect();
    let w = wnnm_weights(&sv, beta);
    let kept: Vec<(usize, f64)> = order
        .iter()
        .zip(sv.iter().zip(&w.weights))
        .filter(|(_, (s, w))| *s > *w)
        .map(|(&m, (s, w))| (m, (s - w) / s))
        .collect();
    let side = if tall { c } else { r };
    let vk = faer::Mat::<f64>::from_fn(side, kept.len(), |i, j| basis[(i, kept[j].0)]);
    let scaled = faer::Mat::<f64>::from_fn(side, kept.len(), |i, j| vk[(i, j)] * kept[j].1);
    let out = if tall {
        (zf * &vk) * scaled.transpose()
    } else {
        &vk * (scaled.transpose() * zf)
    };
    Ok(NormalMatrix {
        z: DMatrix::from_fn(r, c, |i, j| out[(i, j)]),
        spec: nm.spec.clone(),
        provenance: nm.provenance.clone(),
    })
}

/// Number of singular values above `tol · δ_1`.
pub fn numerical_rank(a: &DMatrix<f64>, tol: f64) -> Result<usize> {
    let s = svd(a)?.singular_values;
    let d1 = s.iter().copied().fold(0.0, f64::max);
    Ok(s.iter().filter(|&&x| x > tol * d1).count())
}
