//! Iterative normal estimation over non-local similar structures.
//!
//! One iteration builds an isotropic structure for every sample, gathers the
//! similar structures around every anchor, shrinks the stacked normals and
//! averages each sample's recovered rows. Iterations feed into each other with
//! a decaying similarity threshold.

use nalgebra::Vector3;
use tracing::{debug, warn};

use crate::error::{Error, Result};
use crate::geometry::{
    build_knn_table, build_ring2_table, map_indices, mesh_to_samples, NeighborTable, PointCloud,
    TriangleMesh,
};
use crate::lowrank::{
    plan_reshape, reshape_to_square, stack_normals, unreshape_to_normals, wnnm_solve_gram, DEFAULT_BETA,
};
use crate::structures::{extract_isotropic, find_similar, IsotropicStructure, VoteWeights};

/// Anchors whose contributions are held in memory at once.
const ANCHOR_CHUNK: usize = 128;

/// Averages shorter than this fall back to the previous normal.
const MIN_AVERAGE_NORM: f64 = 1e-8;

/// Threshold decay base per iteration.
const THETA_DECAY: f64 = 1.1;

/// How each stacked matrix is turned into recovered normals.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MatrixSolver {
    /// Weighted nuclear-norm shrinkage with coefficient `beta`.
    Wnnm,
    /// Every row replaced by the mean of the stack (baseline).
    RowAverage,
}

/// Angle thresholds suited to a kind of model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureProfile {
    Sharp,
    LowDihedral,
}

/// All tunables of the normal and position filters.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterConfig {
    pub k_local: usize,
    pub k_non: usize,
    pub theta_init: f64,
    pub theta_low: f64,
    pub beta: f64,
    pub n_nor: usize,
    pub n_pos: usize,
    pub ball_radius: Option<f64>,
    pub solver: MatrixSolver,
}

impl Default for FilterConfig {
    fn default() -> Self {
        FilterConfig::for_profile(FeatureProfile::Sharp)
    }
}

impl FilterConfig {
    pub fn for_profile(profile: FeatureProfile) -> Self {
        let (theta_init, theta_low) = match profile {
            FeatureProfile::Sharp => (30.0, 15.0),
            FeatureProfile::LowDihedral => (20.0, 8.0),
        };
        FilterConfig {
            k_local: 60,
            k_non: 150,
            theta_init,
            theta_low,
            beta: DEFAULT_BETA,
            n_nor: 6,
            n_pos: 15,
            ball_radius: None,
            solver: MatrixSolver::Wnnm,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k_local == 0 || self.k_non == 0 {
            return Err(Error::config("k_local and k_non must be at least 1"));
        }
        if !(self.theta_low >= 0.0 && self.theta_low <= self.theta_init && self.theta_init <= 90.0)
        {
            return Err(Error::config(format!(
                "need 0 <= theta_low ({}) <= theta_init ({}) <= 90",
                self.theta_low, self.theta_init
            )));
        }
        if !(self.beta >= 0.0) || !self.beta.is_finite() {
            return Err(Error::config(format!("beta must be non-negative, got {}", self.beta)));
        }
        if let Some(r) = self.ball_radius {
            if !(r > 0.0) || !r.is_finite() {
                return Err(Error::config(format!("ball radius must be positive, got {r}")));
            }
        }
        Ok(())
    }
}

/// `θ(n) = max(θ_low, θ_init / 1.1ⁿ)` in degrees.
pub fn theta_schedule(cfg: &FilterConfig, n: usize) -> f64 {
    (cfg.theta_init / THETA_DECAY.powi(n as i32)).max(cfg.theta_low)
}

/// Per-sample unit normals after some number of iterations.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalField {
    pub normals: Vec<Vector3<f64>>,
    pub iteration: usize,
}

/// Neighborhoods shared by every iteration.
#[derive(Debug, Clone)]
pub struct EstimationContext {
    local: NeighborTable,
    candidates: NeighborTable,
}

impl EstimationContext {
    /// kNN local structures and kNN similarity candidates.
    pub fn for_cloud(cloud: &PointCloud, cfg: &FilterConfig) -> Result<Self> {
        cfg.validate()?;
        if cloud.len() < 2 {
            return Err(Error::invalid("need at least two samples"));
        }
        let cap = cloud.len() - 1;
        Ok(EstimationContext {
            local: build_knn_table(cloud, cfg.k_local.min(cap))?,
            candidates: build_knn_table(cloud, cfg.k_non.min(cap))?,
        })
    }

    /// 2-ring face neighborhoods, kNN candidates over face centers.
    pub fn for_mesh(mesh: &TriangleMesh, samples: &PointCloud, cfg: &FilterConfig) -> Result<Self> {
        cfg.validate()?;
        let candidates = if samples.len() < 2 {
            NeighborTable::new(vec![Vec::new(); samples.len()], crate::geometry::NeighborKind::Knn(0))
        } else {
            build_knn_table(samples, cfg.k_non.min(samples.len() - 1))?
        };
        Ok(EstimationContext {
            local: build_ring2_table(mesh),
            candidates,
        })
    }

    pub fn local(&self) -> &NeighborTable {
        &self.local
    }

    pub fn candidates(&self) -> &NeighborTable {
        &self.candidates
    }
}

/// Isotropic structures of every sample at the given threshold.
///
/// Samples whose neighborhood is empty or whose tensor vanishes get a
/// singleton structure oriented along their own normal.
pub fn build_structures(
    cloud: &PointCloud,
    local: &NeighborTable,
    theta_deg: f64,
) -> Vec<IsotropicStructure> {
    map_indices(cloud.len(), |i| {
        let nb = local.get(i);
        let weights = VoteWeights::for_neighborhood(cloud, nb);
        extract_isotropic(cloud, i, nb, &weights, theta_deg).unwrap_or_else(|e| {
            debug!(sample = i, error = %e, "singleton structure");
            IsotropicStructure {
                center: i,
                members: vec![i],
                orientation: *cloud.normal(i),
            }
        })
    })
}

/// Recovered (sample, normal) rows for one anchor.
fn anchor_contributions(
    cloud: &PointCloud,
    structures: &[IsotropicStructure],
    candidates: &NeighborTable,
    anchor: usize,
    theta_deg: f64,
    cfg: &FilterConfig,
) -> Result<Vec<(usize, Vector3<f64>)>> {
    let similar = find_similar(structures, anchor, candidates.get(anchor), theta_deg);
    let stack = stack_normals(&similar, structures, cloud.normals());
    match cfg.solver {
        MatrixSolver::Wnnm => {
            let spec = plan_reshape(stack.len())?;
            let nm = reshape_to_square(&stack, &spec)?;
            let solved = wnnm_solve_gram(&nm, cfg.beta)?;
            Ok(unreshape_to_normals(&solved)
                .into_iter()
                .map(|(p, v)| (p.sample, v))
                .collect())
        }
        MatrixSolver::RowAverage => {
            if stack.len() < 2 {
                return Err(Error::TooFewNormals(stack.len()));
            }
            let reference = structures[anchor].orientation;
            let mean = stack
                .rows
                .iter()
                .map(|n| if n.dot(&reference) < 0.0 { -n } else { *n })
                .sum::<Vector3<f64>>()
                / stack.len() as f64;
            Ok(stack.provenance.iter().map(|p| (p.sample, mean)).collect())
        }
    }
}

/// One estimation pass, processing anchors in `order`.
pub(crate) fn iterate_in_order(
    cloud: &PointCloud,
    ctx: &EstimationContext,
    cfg: &FilterConfig,
    n: usize,
    order: &[usize],
) -> Result<NormalField> {
    let theta = theta_schedule(cfg, n);
    let structures = build_structures(cloud, &ctx.local, theta);
    let previous = cloud.normals();
    let mut sums = vec![Vector3::<f64>::zeros(); cloud.len()];
    let mut counts = vec![0usize; cloud.len()];
    let mut failed = 0usize;

    for chunk in order.chunks(ANCHOR_CHUNK) {
        let results = map_indices(chunk.len(), |k| {
            anchor_contributions(cloud, &structures, &ctx.candidates, chunk[k], theta, cfg)
        });
        for (anchor, res) in chunk.iter().zip(results) {
            match res {
                Ok(rows) => {
                    for (s, v) in rows {
                        // orientation of recovered rows is arbitrary; align with the previous normal
                        let v = if v.dot(&previous[s]) < 0.0 { -v } else { v };
                        sums[s] += v;
                        counts[s] += 1;
                    }
                }
                Err(Error::TooFewNormals(_)) => {
                    failed += 1;
                    debug!(anchor, "anchor skipped: too few normals");
                }
                Err(e) => return Err(e),
            }
        }
    }
    if failed > 0 {
        warn!(iteration = n, anchors = failed, "anchors without a usable matrix kept their normals");
    }

    let normals = (0..cloud.len())
        .map(|s| {
            if counts[s] == 0 {
                return previous[s];
            }
            let avg = sums[s] / counts[s] as f64;
            let len = avg.norm();
            if len < MIN_AVERAGE_NORM {
                previous[s]
            } else {
                avg / len
            }
        })
        .collect();
    Ok(NormalField {
        normals,
        iteration: n,
    })
}

/// One iteration of the estimator at iteration index `n` (1-based).
pub fn estimate_iteration(
    cloud: &PointCloud,
    ctx: &EstimationContext,
    cfg: &FilterConfig,
    n: usize,
) -> Result<NormalField> {
    let order: Vec<usize> = (0..cloud.len()).collect();
    iterate_in_order(cloud, ctx, cfg, n, &order)
}

fn run_iterations(
    cloud: &PointCloud,
    ctx: &EstimationContext,
    cfg: &FilterConfig,
    mut observe: impl FnMut(&NormalField),
) -> Result<NormalField> {
    let mut current = cloud.clone();
    let mut field = NormalField {
        normals: cloud.normals().to_vec(),
        iteration: 0,
    };
    for n in 1..=cfg.n_nor {
        field = estimate_iteration(&current, ctx, cfg, n)?;
        observe(&field);
        current = current.with_normals(field.normals.clone())?;
    }
    Ok(field)
}

/// Runs `cfg.n_nor` iterations starting from the cloud's normals.
pub fn estimate_normals(cloud: &PointCloud, cfg: &FilterConfig) -> Result<NormalField> {
    estimate_normals_observed(cloud, cfg, |_| {})
}

/// [`estimate_normals`] with a callback after every iteration.
pub fn estimate_normals_observed(
    cloud: &PointCloud,
    cfg: &FilterConfig,
    observe: impl FnMut(&NormalField),
) -> Result<NormalField> {
    let ctx = EstimationContext::for_cloud(cloud, cfg)?;
    run_iterations(cloud, &ctx, cfg, observe)
}

/// Face normals of a mesh, estimated on face-center samples with 2-ring structures.
pub fn estimate_mesh_normals(mesh: &TriangleMesh, cfg: &FilterConfig) -> Result<NormalField> {
    let samples = mesh_to_samples(mesh);
    let ctx = EstimationContext::for_mesh(mesh, &samples, cfg)?;
    if ctx.local.iter().all(|l| l.is_empty()) {
        warn!("mesh faces have no neighbors; normals unchanged");
    }
    run_iterations(&samples, &ctx, cfg, |_| {})
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::structures::unsigned_angle;
    use rand::{Rng, SeedableRng};

    fn plane(n: usize, seed: u64) -> PointCloud {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let pts = (0..n)
            .map(|_| Vector3::new(rng.random::<f64>(), rng.random::<f64>(), 0.0))
            .collect();
        PointCloud::new(pts, vec![Vector3::z(); n]).unwrap()
    }

    fn small_cfg() -> FilterConfig {
        FilterConfig {
            k_local: 12,
            k_non: 20,
            n_nor: 2,
            ..FilterConfig::default()
        }
    }

    #[test]
    fn schedule_examples() {
        let cfg = FilterConfig::default();
        assert!((theta_schedule(&cfg, 1) - 30.0 / 1.1).abs() < 1e-12);
        assert_eq!(theta_schedule(&cfg, 100), 15.0);
        let flat = FilterConfig {
            theta_init: 15.0,
            ..cfg
        };
        assert!((1..20).all(|n| theta_schedule(&flat, n) == 15.0));
    }

    #[test]
    fn config_validation() {
        let mut cfg = FilterConfig::default();
        assert!(cfg.validate().is_ok());
        cfg.theta_low = 40.0;
        assert!(cfg.validate().is_err());
        let cfg = FilterConfig {
            k_local: 0,
            ..FilterConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn clean_plane_is_a_fixed_point() {
        let cloud = plane(300, 1);
        let cfg = small_cfg();
        let ctx = EstimationContext::for_cloud(&cloud, &cfg).unwrap();
        let out = estimate_iteration(&cloud, &ctx, &cfg, 1).unwrap();
        for n in &out.normals {
            assert!(unsigned_angle(n, &Vector3::z()) < 1e-6);
            assert!((n.norm() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn zero_iterations_returns_input() {
        let cloud = plane(50, 2);
        let cfg = FilterConfig {
            n_nor: 0,
            ..small_cfg()
        };
        let out = estimate_normals(&cloud, &cfg).unwrap();
        assert_eq!(out.normals, cloud.normals());
        assert_eq!(out.iteration, 0);
    }

    #[test]
    fn anchor_order_does_not_matter() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let base = plane(250, 3);
        let noisy: Vec<_> = base
            .normals()
            .iter()
            .map(|n| (n + Vector3::new(rng.random_range(-0.2..0.2), rng.random_range(-0.2..0.2), 0.0)).normalize())
            .collect();
        let cloud = base.with_normals(noisy).unwrap();
        let cfg = small_cfg();
        let ctx = EstimationContext::for_cloud(&cloud, &cfg).unwrap();
        let forward: Vec<usize> = (0..cloud.len()).collect();
        let mut shuffled = forward.clone();
        for k in (1..shuffled.len()).rev() {
            shuffled.swap(k, rng.random_range(0..=k));
        }
        let a = iterate_in_order(&cloud, &ctx, &cfg, 1, &forward).unwrap();
        let b = iterate_in_order(&cloud, &ctx, &cfg, 1, &shuffled).unwrap();
        for (x, y) in a.normals.iter().zip(&b.normals) {
            assert!((x - y).norm() <= 1e-12);
        }
    }

    #[test]
    fn row_average_solver_runs() {
        let cloud = plane(120, 5);
        let cfg = FilterConfig {
            solver: MatrixSolver::RowAverage,
            ..small_cfg()
        };
        let out = estimate_normals(&cloud, &cfg).unwrap();
        assert!(out.normals.iter().all(|n| unsigned_angle(n, &Vector3::z()) < 1e-9));
    }

    #[test]
    fn flat_grid_mesh_unchanged() {
        let mut verts = Vec::new();
        for y in 0..6 {
            for x in 0..6 {
                verts.push(Vector3::new(x as f64, y as f64, 0.0));
            }
        }
        let mut faces = Vec::new();
        for y in 0..5 {
            for x in 0..5 {
                let v = y * 6 + x;
                faces.push([v, v + 1, v + 7]);
                faces.push([v, v + 7, v + 6]);
            }
        }
        let mesh = TriangleMesh::new(verts, faces).unwrap();
        let out = estimate_mesh_normals(&mesh, &small_cfg()).unwrap();
        // Stacks whose length is not a multiple of the column height mix coordinate
        // blocks inside one column, so shrinkage leaks a little into x and y.
        for (n, f) in out.normals.iter().zip(mesh.face_normals()) {
            assert!(unsigned_angle(n, f) < 0.5f64.to_radians(), "{n:?} {f:?}");
        }
    }

    #[test]
    fn lone_triangle_keeps_its_normal() {
        let mesh = TriangleMesh::new(
            vec![Vector3::zeros(), Vector3::x(), Vector3::y()],
            vec![[0, 1, 2]],
        )
        .unwrap();
        let out = estimate_mesh_normals(&mesh, &small_cfg()).unwrap();
        assert_eq!(out.normals, vec![Vector3::z()]);
    }
}
