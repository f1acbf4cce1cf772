//! Tensor voting, local isotropic structures and the non-local similarity search.
//!
//! Every angle here is orientation-insensitive: `n` and `-n` are the same
//! direction, so comparisons go through `|a·b|`.

use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::geometry::PointCloud;
use crate::linalg::{eigen_sym3, SymTensor3};

/// Angular scale of the vote falloff.
pub const DEFAULT_SIGMA_THETA_DEG: f64 = 30.0;

/// Angle in radians between two unit directions, ignoring sign.
pub fn unsigned_angle(a: &Vector3<f64>, b: &Vector3<f64>) -> f64 {
    a.dot(b).abs().min(1.0).acos()
}

/// Scales for the spatial and angular vote weights.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VoteWeights {
    pub sigma_p: f64,
    pub sigma_theta_deg: f64,
}

impl VoteWeights {
    pub fn new(sigma_p: f64, sigma_theta_deg: f64) -> Result<Self> {
        if !(sigma_p > 0.0) || !sigma_p.is_finite() {
            return Err(Error::config(format!("sigma_p must be positive, got {sigma_p}")));
        }
        if !(sigma_theta_deg > 0.0 && sigma_theta_deg < 90.0) {
            return Err(Error::config(format!(
                "sigma_theta must lie in (0, 90) degrees, got {sigma_theta_deg}"
            )));
        }
        Ok(VoteWeights {
            sigma_p,
            sigma_theta_deg,
        })
    }

    /// Weights for one local structure: `sigma_p` is twice the largest pairwise
    /// distance among the neighbors. Falls back to 1 for coincident neighbors.
    pub fn for_neighborhood(cloud: &PointCloud, neighbors: &[usize]) -> Self {
        let mut max_d2 = 0.0f64;
        for (a, &j) in neighbors.iter().enumerate() {
            let pj = cloud.position(j);
            for &k in &neighbors[a + 1..] {
                max_d2 = max_d2.max((pj - cloud.position(k)).norm_squared());
            }
        }
        let sigma_p = 2.0 * max_d2.sqrt();
        VoteWeights {
            sigma_p: if sigma_p > 0.0 { sigma_p } else { 1.0 },
            sigma_theta_deg: DEFAULT_SIGMA_THETA_DEG,
        }
    }

    /// `η(x) = exp(−(x/σ_p)²)`
    pub fn eta(&self, distance: f64) -> f64 {
        (-(distance / self.sigma_p).powi(2)).exp()
    }

    /// `φ(θ) = exp(−((1 − cos θ)/(1 − cos σ_θ))²)`, θ in radians.
    pub fn phi(&self, theta: f64) -> f64 {
        self.phi_from_cos(theta.cos())
    }

    fn phi_from_cos(&self, cos_theta: f64) -> f64 {
        let denom = 1.0 - self.sigma_theta_deg.to_radians().cos();
        (-((1.0 - cos_theta) / denom).powi(2)).exp()
    }
}

/// Accumulated tensor `Σ_j η(‖p_i − p_j‖) φ(θ_ij) n_j n_jᵀ` over the neighbors of `i`.
pub fn vote_tensor(
    cloud: &PointCloud,
    i: usize,
    neighbors: &[usize],
    weights: &VoteWeights,
) -> Result<SymTensor3> {
    if neighbors.is_empty() {
        return Err(Error::EmptyNeighborhood(i));
    }
    let pi = cloud.position(i);
    let ni = cloud.normal(i);
    let mut t = SymTensor3::zero();
    for &j in neighbors {
        let nj = cloud.normal(j);
        let w = weights.eta((pi - cloud.position(j)).norm())
            * weights.phi_from_cos(ni.dot(nj).abs().min(1.0));
        t.add_outer(nj, w);
    }
    Ok(t)
}

/// Dominant eigenvector of a voting tensor, sign-normalized.
pub fn representative_orientation(t: &SymTensor3) -> Result<Vector3<f64>> {
    if t.is_zero() {
        return Err(Error::DegenerateTensor);
    }
    let e = eigen_sym3(t);
    if !(e.values[0] > 0.0) {
        return Err(Error::DegenerateTensor);
    }
    Ok(e.vectors[0])
}

/// Neighborhood subset that agrees with the representative orientation.
#[derive(Debug, Clone, PartialEq)]
pub struct IsotropicStructure {
    pub center: usize,
    /// Center first (when it qualifies), then qualifying neighbors in table order.
    pub members: Vec<usize>,
    pub orientation: Vector3<f64>,
}

/// Builds the isotropic structure of sample `i` at threshold `theta_deg`.
pub fn extract_isotropic(
    cloud: &PointCloud,
    i: usize,
    neighbors: &[usize],
    weights: &VoteWeights,
    theta_deg: f64,
) -> Result<IsotropicStructure> {
    let t = vote_tensor(cloud, i, neighbors, weights)?;
    let orientation = representative_orientation(&t)?;
    let theta = theta_deg.to_radians();
    let mut members: Vec<usize> = std::iter::once(i)
        .chain(neighbors.iter().copied())
        .filter(|&j| unsigned_angle(cloud.normal(j), &orientation) <= theta)
        .collect();
    if members.is_empty() {
        // threshold rejected every normal, the center included
        members.push(i);
    }
    Ok(IsotropicStructure {
        center: i,
        members,
        orientation,
    })
}

/// Anchor structure plus the candidate structures that point the same way.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarSet {
    pub anchor: usize,
    /// Structure indices; the anchor is always first.
    pub similars: Vec<usize>,
}

/// Filters `candidates` (typically the spatial k_non nearest samples of the anchor)
/// to those whose representative orientation lies within `theta_deg` of the anchor's.
pub fn find_similar(
    structures: &[IsotropicStructure],
    anchor: usize,
    candidates: &[usize],
    theta_deg: f64,
) -> SimilarSet {
    let theta = theta_deg.to_radians();
    let reference = &structures[anchor].orientation;
    let mut similars = Vec::with_capacity(candidates.len() + 1);
    similars.push(anchor);
    similars.extend(
        candidates
            .iter()
            .copied()
            .filter(|&c| c != anchor)
            .filter(|&c| unsigned_angle(&structures[c].orientation, reference) <= theta),
    );
    SimilarSet { anchor, similars }
}
