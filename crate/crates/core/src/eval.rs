//! Metrics, the PCA baseline, synthetic shapes and noise.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::error::{Error, Result};
use crate::geometry::{map_indices, KdTree, PointCloud, TriangleMesh};
use crate::linalg::{eigen_sym3, SymTensor3};
use crate::normals::NormalField;

/// Neighbor count used when a file arrives without normals.
pub const BOOTSTRAP_PCA_K: usize = 18;

fn unsigned_cos(a: &Vector3<f64>, b: &Vector3<f64>) -> f64 {
    a.dot(b).abs().clamp(0.0, 1.0)
}

/// Angle between unit vectors up to sign; exact zero for parallel inputs.
fn unsigned_angle_rad(a: &Vector3<f64>, b: &Vector3<f64>) -> f64 {
    if a == b || *a == -b {
        0.0
    } else {
        unsigned_cos(a, b).acos()
    }
}

/// Mean squared orientation-insensitive angle between two normal sets, in rad².
pub fn msae(estimated: &[Vector3<f64>], truth: &[Vector3<f64>]) -> Result<f64> {
    if estimated.len() != truth.len() {
        return Err(Error::invalid(format!(
            "msae: {} estimated normals vs {} reference normals",
            estimated.len(),
            truth.len()
        )));
    }
    if estimated.is_empty() {
        return Ok(0.0);
    }
    let sum: f64 = estimated
        .iter()
        .zip(truth)
        .map(|(a, b)| unsigned_angle_rad(a, b).powi(2))
        .sum();
    Ok(sum / estimated.len() as f64)
}

/// Per-sample unsigned angles in radians.
pub fn angular_errors(estimated: &[Vector3<f64>], truth: &[Vector3<f64>]) -> Vec<f64> {
    estimated
        .iter()
        .zip(truth)
        .map(|(a, b)| unsigned_angle_rad(a, b))
        .collect()
}

/// RMS distance from each truth point to its nearest result point.
pub fn closest_point_rmse(result: &[Vector3<f64>], truth: &[Vector3<f64>]) -> Result<f64> {
    if result.is_empty() || truth.is_empty() {
        return Err(Error::invalid("closest_point_rmse needs two non-empty point sets"));
    }
    let tree = KdTree::new(result);
    let d2 = map_indices(truth.len(), |i| tree.knn_with_distances(&truth[i], 1, None)[0].1);
    Ok((d2.iter().sum::<f64>() / truth.len() as f64).sqrt())
}

/// PCA normals plus a flag for neighborhoods whose covariance has rank ≤ 1.
#[derive(Debug, Clone)]
pub struct PcaEstimate {
    pub field: NormalField,
    pub degenerate: Vec<bool>,
}

/// Smallest-eigenvector normals from the k nearest neighbors plus the point itself.
pub fn estimate_normals_pca(cloud: &PointCloud, k: usize) -> Result<PcaEstimate> {
    pca_normals(cloud.positions(), k, Some(cloud.normals()), Some(cloud.index()))
}

/// PCA on bare positions; `hint` orients each result into its hemisphere.
pub fn pca_normals(
    positions: &[Vector3<f64>],
    k: usize,
    hint: Option<&[Vector3<f64>]>,
    tree: Option<&KdTree>,
) -> Result<PcaEstimate> {
    if k < 3 {
        return Err(Error::config(format!("PCA needs k >= 3, got {k}")));
    }
    if positions.is_empty() {
        return Err(Error::invalid("PCA on an empty point set"));
    }
    let owned;
    let tree = match tree {
        Some(t) => t,
        None => {
            owned = KdTree::new(positions);
            &owned
        }
    };
    let k = k.min(positions.len() - 1);
    let out = map_indices(positions.len(), |i| {
        let mut members = tree.knn(&positions[i], k, Some(i));
        members.push(i);
        let centroid = members.iter().map(|&j| positions[j]).sum::<Vector3<f64>>() / members.len() as f64;
        let mut cov = SymTensor3::zero();
        for &j in &members {
            cov.add_outer(&(positions[j] - centroid), 1.0);
        }
        let dec = eigen_sym3(&cov);
        let degenerate = dec.values[1] <= 1e-12 * dec.values[0].max(f64::MIN_POSITIVE);
        let mut n = dec.vectors[2];
        if let Some(h) = hint {
            if n.dot(&h[i]) < 0.0 {
                n = -n;
            }
        }
        (n, degenerate)
    });
    let (normals, degenerate) = out.into_iter().unzip();
    Ok(PcaEstimate {
        field: NormalField {
            normals,
            iteration: 0,
        },
        degenerate,
    })
}

/// Synthetic test surfaces.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ShapeKind {
    /// Unit cube centered at the origin.
    Cube,
    /// Regular dodecahedron with circumradius √3.
    Dodecahedron,
    /// Unit sphere centered at the origin.
    Sphere,
    /// Two unit squares sharing the x axis; the angle is the interior dihedral in degrees.
    Wedge(f64),
    /// Unit square in the z = 0 plane.
    Plane,
    /// 90° wedge sampled four times more densely on one side.
    TwoDensityWedge,
}

impl fmt::Display for ShapeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ShapeKind::Cube => write!(f, "cube"),
            ShapeKind::Dodecahedron => write!(f, "dodecahedron"),
            ShapeKind::Sphere => write!(f, "sphere"),
            ShapeKind::Wedge(a) => write!(f, "wedge:{a}"),
            ShapeKind::Plane => write!(f, "plane"),
            ShapeKind::TwoDensityWedge => write!(f, "two-density-wedge"),
        }
    }
}

impl FromStr for ShapeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "cube" => ShapeKind::Cube,
            "dodecahedron" => ShapeKind::Dodecahedron,
            "sphere" => ShapeKind::Sphere,
            "plane" => ShapeKind::Plane,
            "wedge" => ShapeKind::Wedge(90.0),
            "two-density-wedge" | "two_density_wedge" => ShapeKind::TwoDensityWedge,
            other => {
                let angle = other
                    .strip_prefix("wedge:")
                    .and_then(|a| a.parse::<f64>().ok())
                    .filter(|a| *a > 0.0 && *a < 180.0)
                    .ok_or_else(|| Error::config(format!("unknown shape kind '{other}'")))?;
                ShapeKind::Wedge(angle)
            }
        })
    }
}

/// A planar convex polygon with its outward normal, vertices in order.
struct Facet {
    corners: Vec<Vector3<f64>>,
    normal: Vector3<f64>,
}

impl Facet {
    fn triangles(&self) -> impl Iterator<Item = [Vector3<f64>; 3]> + '_ {
        (1..self.corners.len() - 1).map(|t| [self.corners[0], self.corners[t], self.corners[t + 1]])
    }

    fn area(&self) -> f64 {
        self.triangles().map(triangle_area).sum()
    }
}

fn triangle_area(t: [Vector3<f64>; 3]) -> f64 {
    0.5 * (t[1] - t[0]).cross(&(t[2] - t[0])).norm()
}

fn cube_facets() -> Vec<Facet> {
    let mut out = Vec::new();
    for axis in 0..3 {
        for sign in [1.0, -1.0] {
            let mut n = Vector3::zeros();
            n[axis] = sign;
            let u = Vector3::ith((axis + 1) % 3, 1.0);
            let v = n.cross(&u);
            let c = n * 0.5;
            out.push(Facet {
                corners: vec![
                    c - u * 0.5 - v * 0.5,
                    c + u * 0.5 - v * 0.5,
                    c + u * 0.5 + v * 0.5,
                    c - u * 0.5 + v * 0.5,
                ],
                normal: n,
            });
        }
    }
    out
}

fn dodecahedron_facets() -> Vec<Facet> {
    let phi = (1.0 + 5f64.sqrt()) / 2.0;
    let ip = 1.0 / phi;
    let mut verts = Vec::new();
    for sx in [-1.0, 1.0] {
        for sy in [-1.0, 1.0] {
            for sz in [-1.0, 1.0] {
                verts.push(Vector3::new(sx, sy, sz));
            }
        }
    }
    for a in [-1.0, 1.0] {
        for b in [-1.0, 1.0] {
            verts.push(Vector3::new(0.0, a * ip, b * phi));
            verts.push(Vector3::new(a * ip, b * phi, 0.0));
            verts.push(Vector3::new(a * phi, 0.0, b * ip));
        }
    }
    let mut normals = Vec::new();
    for a in [-1.0, 1.0] {
        for b in [-1.0, 1.0] {
            normals.push(Vector3::new(0.0, a * phi, b).normalize());
            normals.push(Vector3::new(a * phi, b, 0.0).normalize());
            normals.push(Vector3::new(a, 0.0, b * phi).normalize());
        }
    }
    normals
        .into_iter()
        .map(|n| {
            let top = verts.iter().map(|v| v.dot(&n)).fold(f64::MIN, f64::max);
            let mut corners: Vec<_> = verts.iter().copied().filter(|v| v.dot(&n) > top - 1e-9).collect();
            let c = corners.iter().sum::<Vector3<f64>>() / corners.len() as f64;
            let u = (corners[0] - c).normalize();
            let w = n.cross(&u);
            corners.sort_by(|a, b| {
                let ta = (a - c).dot(&w).atan2((a - c).dot(&u));
                let tb = (b - c).dot(&w).atan2((b - c).dot(&u));
                ta.total_cmp(&tb)
            });
            Facet { corners, normal: n }
        })
        .collect()
}

fn wedge_facets(dihedral_deg: f64) -> Vec<Facet> {
    let a = dihedral_deg.to_radians();
    let db = Vector3::new(0.0, a.cos(), a.sin());
    vec![
        Facet {
            corners: vec![Vector3::zeros(), Vector3::x(), Vector3::new(1.0, 1.0, 0.0), Vector3::y()],
            normal: Vector3::z(),
        },
        Facet {
            corners: vec![Vector3::zeros(), db, db + Vector3::x(), Vector3::x()],
            normal: Vector3::new(0.0, a.sin(), -a.cos()),
        },
    ]
}

fn plane_facets() -> Vec<Facet> {
    vec![Facet {
        corners: vec![Vector3::zeros(), Vector3::x(), Vector3::new(1.0, 1.0, 0.0), Vector3::y()],
        normal: Vector3::z(),
    }]
}

/// Splits `total` proportionally to `weights`, handing leftovers to the largest remainders.
fn apportion(total: usize, weights: &[f64]) -> Vec<usize> {
    let sum: f64 = weights.iter().sum();
    let exact: Vec<f64> = weights.iter().map(|w| total as f64 * w / sum).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())).then(a.cmp(&b)));
    let missing = total.saturating_sub(counts.iter().sum::<usize>());
    for &i in order.iter().take(missing) {
        counts[i] += 1;
    }
    counts
}

fn sample_facets(facets: &[Facet], density: &[f64], samples: usize, rng: &mut ChaCha8Rng) -> PointCloud {
    let weights: Vec<f64> = facets.iter().zip(density).map(|(f, d)| f.area() * d).collect();
    let counts = apportion(samples, &weights);
    let mut positions = Vec::with_capacity(samples);
    let mut normals = Vec::with_capacity(samples);
    for (facet, &count) in facets.iter().zip(&counts) {
        let tris: Vec<_> = facet.triangles().collect();
        let areas: Vec<f64> = tris.iter().map(|t| triangle_area(*t)).collect();
        let total: f64 = areas.iter().sum();
        for _ in 0..count {
            let mut pick = rng.random::<f64>() * total;
            let mut t = tris.len() - 1;
            for (k, a) in areas.iter().enumerate() {
                if pick < *a {
                    t = k;
                    break;
                }
                pick -= a;
            }
            let [a, b, c] = tris[t];
            let r1 = rng.random::<f64>().sqrt();
            let r2 = rng.random::<f64>();
            positions.push(a * (1.0 - r1) + b * (r1 * (1.0 - r2)) + c * (r1 * r2));
            normals.push(facet.normal);
        }
    }
    PointCloud::new(positions, normals).expect("facet samples are finite with unit normals")
}

fn facets_for(kind: ShapeKind) -> Option<(Vec<Facet>, Vec<f64>)> {
    match kind {
        ShapeKind::Cube => Some((cube_facets(), vec![1.0; 6])),
        ShapeKind::Dodecahedron => Some((dodecahedron_facets(), vec![1.0; 12])),
        ShapeKind::Wedge(a) => Some((wedge_facets(a), vec![1.0, 1.0])),
        ShapeKind::TwoDensityWedge => Some((wedge_facets(90.0), vec![4.0, 1.0])),
        ShapeKind::Plane => Some((plane_facets(), vec![1.0])),
        ShapeKind::Sphere => None,
    }
}

/// Samples a shape uniformly by area with its analytic normals.
pub fn make_shape(kind: ShapeKind, samples: usize, seed: u64) -> Result<PointCloud> {
    if samples < 100 {
        return Err(Error::config(format!("make_shape needs at least 100 samples, got {samples}")));
    }
    if let ShapeKind::Wedge(a) = kind {
        if !(a > 0.0 && a < 180.0) {
            return Err(Error::config(format!("wedge angle must lie in (0, 180), got {a}")));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(match facets_for(kind) {
        Some((facets, density)) => sample_facets(&facets, &density, samples, &mut rng),
        None => {
            let pts: Vec<Vector3<f64>> = (0..samples)
                .map(|_| loop {
                    let v = Vector3::new(
                        StandardNormal.sample(&mut rng),
                        StandardNormal.sample(&mut rng),
                        StandardNormal.sample(&mut rng),
                    );
                    let l: f64 = v.norm();
                    if l > 1e-9 {
                        break v / l;
                    }
                })
                .collect();
            PointCloud::new(pts.clone(), pts)?
        }
    })
}

/// Plane normals of a polyhedral shape; `None` for the sphere.
pub fn shape_face_normals(kind: ShapeKind) -> Option<Vec<Vector3<f64>>> {
    facets_for(kind).map(|(f, _)| f.into_iter().map(|f| f.normal).collect())
}

/// Which convention the reference normals follow at sharp edges.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GroundTruthVariant {
    Original,
    EdgeAdapted,
}

#[derive(Debug, Clone)]
pub struct GroundTruthPair {
    pub reference: PointCloud,
    pub variant: GroundTruthVariant,
}

impl GroundTruthPair {
    pub fn original(reference: PointCloud) -> Self {
        GroundTruthPair {
            reference,
            variant: GroundTruthVariant::Original,
        }
    }
}

/// Snaps every reference normal to the closest candidate plane normal.
pub fn adapt_ground_truth_edges(
    reference: &PointCloud,
    candidates: &[Vector3<f64>],
) -> Result<GroundTruthPair> {
    if candidates.is_empty() {
        return Err(Error::invalid("edge adaptation needs at least one candidate normal"));
    }
    let normals = reference
        .normals()
        .iter()
        .map(|n| {
            let mut best = 0;
            let mut best_angle = f64::INFINITY;
            for (c, cand) in candidates.iter().enumerate() {
                let angle = unsigned_cos(n, cand).acos();
                if angle < best_angle {
                    best_angle = angle;
                    best = c;
                }
            }
            if best_angle <= 1e-6 {
                return *n;
            }
            let c = candidates[best].normalize();
            if c.dot(n) < 0.0 {
                -c
            } else {
                c
            }
        })
        .collect();
    Ok(GroundTruthPair {
        reference: reference.with_normals(normals)?,
        variant: GroundTruthVariant::EdgeAdapted,
    })
}

/// How noise displaces each sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NoiseDirection {
    Isotropic,
    AlongNormal,
}

/// Gaussian noise with standard deviation `sigma` times the bounding-box diagonal.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseSpec {
    pub sigma: f64,
    pub seed: u64,
    pub direction: NoiseDirection,
}

impl NoiseSpec {
    pub fn isotropic(sigma: f64, seed: u64) -> Self {
        NoiseSpec {
            sigma,
            seed,
            direction: NoiseDirection::Isotropic,
        }
    }
}

/// Perturbs positions; normals are carried over untouched.
pub fn add_noise(cloud: &PointCloud, spec: &NoiseSpec) -> Result<PointCloud> {
    if !(spec.sigma >= 0.0 && spec.sigma.is_finite()) {
        return Err(Error::config(format!("noise sigma must be >= 0, got {}", spec.sigma)));
    }
    if spec.sigma == 0.0 {
        return Ok(cloud.clone());
    }
    let std = spec.sigma * cloud.bounding_box_diagonal();
    let dist = Normal::new(0.0, std).map_err(|e| Error::config(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let positions = cloud
        .positions()
        .iter()
        .zip(cloud.normals())
        .map(|(p, n)| match spec.direction {
            NoiseDirection::Isotropic => {
                p + Vector3::new(dist.sample(&mut rng), dist.sample(&mut rng), dist.sample(&mut rng))
            }
            NoiseDirection::AlongNormal => p + n * dist.sample(&mut rng),
        })
        .collect();
    PointCloud::new(positions, cloud.normals().to_vec())
}

/// Closed triangulated cube `[-0.5, 0.5]³` with `subdivisions²` quads per side.
pub fn make_cube_mesh(subdivisions: usize) -> Result<TriangleMesh> {
    if subdivisions == 0 {
        return Err(Error::config("cube mesh needs at least one subdivision"));
    }
    let s = subdivisions as i64;
    let mut index: HashMap<[i64; 3], usize> = HashMap::new();
    let mut vertices = Vec::new();
    let mut faces = Vec::new();
    let mut vertex = |c: [i64; 3]| -> usize {
        *index.entry(c).or_insert_with(|| {
            vertices.push(Vector3::new(c[0] as f64, c[1] as f64, c[2] as f64) / s as f64 - Vector3::repeat(0.5));
            vertices.len() - 1
        })
    };
    for axis in 0..3 {
        for side in [0, s] {
            let (a, b) = ((axis + 1) % 3, (axis + 2) % 3);
            for i in 0..s {
                for j in 0..s {
                    let corner = |di: i64, dj: i64| {
                        let mut c = [0i64; 3];
                        c[axis] = side;
                        c[a] = i + di;
                        c[b] = j + dj;
                        c
                    };
                    let q = [
                        vertex(corner(0, 0)),
                        vertex(corner(1, 0)),
                        vertex(corner(1, 1)),
                        vertex(corner(0, 1)),
                    ];
                    // (a, b, axis) is right-handed, so this winding faces +axis
                    if side == s {
                        faces.push([q[0], q[1], q[2]]);
                        faces.push([q[0], q[2], q[3]]);
                    } else {
                        faces.push([q[0], q[2], q[1]]);
                        faces.push([q[0], q[3], q[2]]);
                    }
                }
            }
        }
    }
    TriangleMesh::new(vertices, faces)
}

/// Gaussian vertex noise with std `sigma_edge` times the mean edge length.
///
/// Along-normal noise moves each vertex along its area-weighted vertex normal.
pub fn add_vertex_noise(
    mesh: &TriangleMesh,
    sigma_edge: f64,
    seed: u64,
    direction: NoiseDirection,
) -> Result<TriangleMesh> {
    let std = sigma_edge * mesh.mean_edge_length();
    let dist = Normal::new(0.0, std).map_err(|e| Error::config(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vertex_normals = match direction {
        NoiseDirection::Isotropic => Vec::new(),
        NoiseDirection::AlongNormal => area_weighted_vertex_normals(mesh),
    };
    let vertices = mesh
        .vertices()
        .iter()
        .enumerate()
        .map(|(i, v)| match direction {
            NoiseDirection::Isotropic => {
                v + Vector3::new(dist.sample(&mut rng), dist.sample(&mut rng), dist.sample(&mut rng))
            }
            NoiseDirection::AlongNormal => v + vertex_normals[i] * dist.sample(&mut rng),
        })
        .collect();
    mesh.with_vertices(vertices)
}

/// Unit vertex normals from the summed, area-weighted normals of incident faces.
pub fn area_weighted_vertex_normals(mesh: &TriangleMesh) -> Vec<Vector3<f64>> {
    let v = mesh.vertices();
    let mut acc = vec![Vector3::zeros(); v.len()];
    for f in mesh.faces() {
        let n = (v[f[1]] - v[f[0]]).cross(&(v[f[2]] - v[f[0]]));
        for &i in f {
            acc[i] += n;
        }
    }
    acc.into_iter()
        .map(|n| n.try_normalize(0.0).unwrap_or_else(Vector3::zeros))
        .collect()
}

/// Mean oriented angle between face normals, in radians. Flipped faces count up to π.
pub fn mean_face_normal_deviation(normals: &[Vector3<f64>], truth: &[Vector3<f64>]) -> Result<f64> {
    if normals.len() != truth.len() || normals.is_empty() {
        return Err(Error::invalid("face normal sets differ in size or are empty"));
    }
    Ok(normals
        .iter()
        .zip(truth)
        .map(|(a, b)| a.dot(b).clamp(-1.0, 1.0).acos())
        .sum::<f64>()
        / normals.len() as f64)
}

/// Signed enclosed volume of a closed mesh.
pub fn mesh_volume(mesh: &TriangleMesh) -> f64 {
    let v = mesh.vertices();
    mesh.faces()
        .iter()
        .map(|f| v[f[0]].dot(&v[f[1]].cross(&v[f[2]])))
        .sum::<f64>()
        / 6.0
}
