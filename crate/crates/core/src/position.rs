//! Moving samples onto the tangent planes of their estimated normals.
//!
//! The point update is plain gradient descent on
//! `E = Σ_i Σ_{j∈N(i)} ((p_i − p_j)·n_j)² + ((p_i − p_j)·n_i)²`
//! with step `1/(3|N(i)|)` over a ball neighborhood frozen at the start.
//! With a symmetric table that step makes `E` non-increasing; the matrix
//! helpers at the bottom of the module expose the quantities behind that
//! guarantee so tests can check it directly.

use nalgebra::{DMatrix, Matrix3, Vector3};
use tracing::{debug, warn};

use crate::error::{Error, Result};
use crate::geometry::{
    build_ball_table, map_indices, mean_kth_neighbor_distance, NeighborTable, PointCloud,
    TriangleMesh,
};
use crate::normals::{FilterConfig, NormalField};

/// Per-iteration energy trace of a position filter run.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct EnergyReport {
    /// Energy before the first step, then after each step.
    pub per_iteration_energy: Vec<f64>,
    pub converged: bool,
}

/// Positions being filtered against frozen normals and neighborhoods.
#[derive(Debug, Clone)]
pub struct UpdateState {
    pub positions: Vec<Vector3<f64>>,
    pub neighbors: NeighborTable,
    pub normals: Vec<Vector3<f64>>,
    pub step_sizes: Vec<f64>,
}

impl UpdateState {
    pub fn new(
        positions: Vec<Vector3<f64>>,
        normals: Vec<Vector3<f64>>,
        neighbors: NeighborTable,
    ) -> Result<Self> {
        if positions.len() != normals.len() || positions.len() != neighbors.len() {
            return Err(Error::invalid(format!(
                "{} positions, {} normals, {} neighbor lists",
                positions.len(),
                normals.len(),
                neighbors.len()
            )));
        }
        let step_sizes = neighbors
            .iter()
            .map(|l| {
                if l.is_empty() {
                    0.0
                } else {
                    1.0 / (3.0 * l.len() as f64)
                }
            })
            .collect();
        Ok(UpdateState {
            positions,
            neighbors,
            normals,
            step_sizes,
        })
    }
}

fn projector(n: &Vector3<f64>) -> Matrix3<f64> {
    n * n.transpose()
}

/// One simultaneous update of every position from the current iterate.
pub fn point_update_step(state: &UpdateState) -> Vec<Vector3<f64>> {
    let p = &state.positions;
    let n = &state.normals;
    map_indices(p.len(), |i| {
        let nb = state.neighbors.get(i);
        if nb.is_empty() {
            return p[i];
        }
        let ni = n[i];
        let mut delta = Vector3::zeros();
        for &j in nb {
            let d = p[j] - p[i];
            // (n_j n_jᵀ + n_i n_iᵀ) d without forming the matrices
            delta += n[j] * n[j].dot(&d) + ni * ni.dot(&d);
        }
        p[i] + delta * state.step_sizes[i]
    })
}

/// Sum of squared distances to neighbors' and own tangent planes.
pub fn total_energy(
    positions: &[Vector3<f64>],
    normals: &[Vector3<f64>],
    neighbors: &NeighborTable,
) -> f64 {
    let mut e = 0.0;
    for (i, nb) in neighbors.iter().enumerate() {
        for &j in nb {
            let d = positions[i] - positions[j];
            e += d.dot(&normals[j]).powi(2) + d.dot(&normals[i]).powi(2);
        }
    }
    e
}

/// Ball radius used when none is configured: mean distance to the k_local-th neighbor.
pub fn default_ball_radius(cloud: &PointCloud, k_local: usize) -> Result<f64> {
    mean_kth_neighbor_distance(cloud, k_local.min(cloud.len().saturating_sub(1)).max(1))
}

/// Runs `cfg.n_pos` point-update steps with a ball table built once from the input.
pub fn filter_positions(
    cloud: &PointCloud,
    normals: &NormalField,
    cfg: &FilterConfig,
) -> Result<(PointCloud, EnergyReport)> {
    if normals.normals.len() != cloud.len() {
        return Err(Error::invalid("normal field does not match the cloud"));
    }
    if cfg.n_pos == 0 {
        let out = cloud.with_normals(normals.normals.clone())?;
        return Ok((out, EnergyReport::default()));
    }
    if cloud.len() < 2 {
        let out = cloud.with_normals(normals.normals.clone())?;
        return Ok((out, EnergyReport { per_iteration_energy: vec![0.0], converged: true }));
    }
    let radius = match cfg.ball_radius {
        Some(r) => r,
        None => default_ball_radius(cloud, cfg.k_local)?,
    };
    let table = build_ball_table(cloud, radius)?;
    let isolated = table.iter().filter(|l| l.is_empty()).count();
    if isolated > 0 {
        warn!(isolated, radius, "samples with empty balls stay fixed");
    }
    let mut state = UpdateState::new(cloud.positions().to_vec(), normals.normals.clone(), table)?;
    let e0 = total_energy(&state.positions, &state.normals, &state.neighbors);
    let mut energies = vec![e0];
    for step in 1..=cfg.n_pos {
        state.positions = point_update_step(&state);
        let e = total_energy(&state.positions, &state.normals, &state.neighbors);
        let before = *energies.last().unwrap();
        if e > before + 1e-9 * e0 {
            return Err(Error::ConvergenceViolation {
                step,
                before,
                after: e,
            });
        }
        debug!(step, energy = e);
        energies.push(e);
    }
    let out = PointCloud::new(state.positions, state.normals)?;
    Ok((
        out,
        EnergyReport {
            per_iteration_energy: energies,
            converged: true,
        },
    ))
}

/// Block matrix `Q` with `E = P Q Pᵀ` for a symmetric table, and that energy.
///
/// `Q_ii = 2 Σ_j (n_i n_iᵀ + n_j n_jᵀ)`, `Q_ij = −2 (n_i n_iᵀ + n_j n_jᵀ)` for `j ∈ N(i)`.
pub fn energy_matrix_oracle(
    positions: &[Vector3<f64>],
    normals: &[Vector3<f64>],
    neighbors: &NeighborTable,
) -> (DMatrix<f64>, f64) {
    let n = positions.len();
    let mut q = DMatrix::zeros(3 * n, 3 * n);
    for (i, nb) in neighbors.iter().enumerate() {
        for &j in nb {
            let a = projector(&normals[i]) + projector(&normals[j]);
            for r in 0..3 {
                for c in 0..3 {
                    q[(3 * i + r, 3 * i + c)] += 2.0 * a[(r, c)];
                    q[(3 * i + r, 3 * j + c)] -= 2.0 * a[(r, c)];
                }
            }
        }
    }
    let p = nalgebra::DVector::from_iterator(3 * n, positions.iter().flat_map(|v| [v.x, v.y, v.z]));
    let e = p.dot(&(&q * &p));
    (q, e)
}

/// `2G⁻¹ − O` with `O = Q/2` and `G = diag(γ_i)`, restricted to samples with neighbors.
pub fn convergence_matrix(
    normals: &[Vector3<f64>],
    neighbors: &NeighborTable,
) -> DMatrix<f64> {
    let active: Vec<usize> = (0..neighbors.len())
        .filter(|&i| !neighbors.get(i).is_empty())
        .collect();
    let mut slot = vec![usize::MAX; neighbors.len()];
    for (k, &i) in active.iter().enumerate() {
        slot[i] = k;
    }
    let m = active.len();
    let mut out = DMatrix::zeros(3 * m, 3 * m);
    for (k, &i) in active.iter().enumerate() {
        let nb = neighbors.get(i);
        let inv_gamma = 3.0 * nb.len() as f64;
        for r in 0..3 {
            out[(3 * k + r, 3 * k + r)] += 2.0 * inv_gamma;
        }
        for &j in nb {
            let a = projector(&normals[i]) + projector(&normals[j]);
            let l = slot[j];
            for r in 0..3 {
                for c in 0..3 {
                    out[(3 * k + r, 3 * k + c)] -= a[(r, c)];
                    out[(3 * k + r, 3 * l + c)] += a[(r, c)];
                }
            }
        }
    }
    out
}

/// Largest absolute row sum of `n nᵀ`; at most `(1 + √3)/2` for unit `n`.
pub fn rowsum_bound_check(n: &Vector3<f64>) -> f64 {
    let p = projector(n);
    (0..3)
        .map(|r| (0..3).map(|c| p[(r, c)].abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// `(1 + √3)/2`
pub fn rowsum_bound() -> f64 {
    (1.0 + 3f64.sqrt()) / 2.0
}

/// Moves vertices toward the planes of the filtered face normals.
///
/// Each round sets `v ← v + (1/|F_v|) Σ_f n_f n_fᵀ (c_f − v)` with centroids from
/// the current iterate and the target normals held fixed.
pub fn mesh_vertex_update(
    mesh: &TriangleMesh,
    face_normals: &NormalField,
    n_pos: usize,
) -> Result<TriangleMesh> {
    if face_normals.normals.len() != mesh.num_faces() {
        return Err(Error::invalid("normal field does not match the face count"));
    }
    let targets = &face_normals.normals;
    let mut vertices = mesh.vertices().to_vec();
    for _ in 0..n_pos {
        let centers: Vec<Vector3<f64>> = mesh
            .faces()
            .iter()
            .map(|t| (vertices[t[0]] + vertices[t[1]] + vertices[t[2]]) / 3.0)
            .collect();
        vertices = mesh
            .vertex_faces()
            .iter()
            .enumerate()
            .map(|(v, faces)| {
                if faces.is_empty() {
                    return vertices[v];
                }
                let mut delta = Vector3::zeros();
                for &f in faces {
                    let n = targets[f];
                    delta += n * n.dot(&(centers[f] - vertices[v]));
                }
                vertices[v] + delta / faces.len() as f64
            })
            .collect();
    }
    mesh.with_vertices(vertices)
}
