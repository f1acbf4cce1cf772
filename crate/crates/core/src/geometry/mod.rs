//! Point clouds, triangle meshes and neighborhood tables.

mod kdtree;

use std::collections::BTreeSet;
use std::sync::OnceLock;

use nalgebra::Vector3;

pub use kdtree::KdTree;

use crate::error::{Error, Result};

/// Positions with unit normals.
#[derive(Debug, Clone)]
pub struct PointCloud {
    positions: Vec<Vector3<f64>>,
    normals: Vec<Vector3<f64>>,
    diagonal: f64,
    index: OnceLock<KdTree>,
}

fn bbox_diagonal(points: &[Vector3<f64>]) -> f64 {
    let mut lo = Vector3::repeat(f64::INFINITY);
    let mut hi = Vector3::repeat(f64::NEG_INFINITY);
    for p in points {
        lo = lo.inf(p);
        hi = hi.sup(p);
    }
    (hi - lo).norm()
}

impl PointCloud {
    /// Builds a cloud, normalizing every normal. Zero or non-finite normals are rejected.
    pub fn new(positions: Vec<Vector3<f64>>, normals: Vec<Vector3<f64>>) -> Result<Self> {
        if positions.is_empty() {
            return Err(Error::invalid("point cloud is empty"));
        }
        if positions.len() != normals.len() {
            return Err(Error::invalid(format!(
                "{} positions but {} normals",
                positions.len(),
                normals.len()
            )));
        }
        if let Some(i) = positions.iter().position(|p| !p.iter().all(|x| x.is_finite())) {
            return Err(Error::invalid(format!("point {i} has a non-finite coordinate")));
        }
        let normals = normals
            .into_iter()
            .enumerate()
            .map(|(i, n)| {
                let len = n.norm();
                if !len.is_finite() || len < 1e-300 {
                    Err(Error::invalid(format!("point {i} has a zero or non-finite normal")))
                } else if (len - 1.0).abs() <= 2.0 * f64::EPSILON {
                    // already unit; dividing again could perturb the last bit
                    Ok(n)
                } else {
                    Ok(n / len)
                }
            })
            .collect::<Result<Vec<_>>>()?;
        let diagonal = bbox_diagonal(&positions);
        Ok(PointCloud {
            positions,
            normals,
            diagonal,
            index: OnceLock::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn positions(&self) -> &[Vector3<f64>] {
        &self.positions
    }

    pub fn normals(&self) -> &[Vector3<f64>] {
        &self.normals
    }

    pub fn position(&self, i: usize) -> &Vector3<f64> {
        &self.positions[i]
    }

    pub fn normal(&self, i: usize) -> &Vector3<f64> {
        &self.normals[i]
    }

    /// Length of the axis-aligned bounding box diagonal.
    pub fn bounding_box_diagonal(&self) -> f64 {
        self.diagonal
    }

    /// Spatial index over the positions, built on first use.
    pub fn index(&self) -> &KdTree {
        self.index.get_or_init(|| KdTree::new(&self.positions))
    }

    /// Same positions (and index) with new normals.
    pub fn with_normals(&self, normals: Vec<Vector3<f64>>) -> Result<Self> {
        let mut out = PointCloud::new(self.positions.clone(), normals)?;
        if let Some(tree) = self.index.get() {
            let _ = out.index.set(tree.clone());
        }
        out.diagonal = self.diagonal;
        Ok(out)
    }

    /// Same normals with new positions.
    pub fn with_positions(&self, positions: Vec<Vector3<f64>>) -> Result<Self> {
        PointCloud::new(positions, self.normals.clone())
    }
}

/// How a [`NeighborTable`] was built.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NeighborKind {
    Knn(usize),
    Ball(f64),
    Ring2,
}

/// Per-sample neighbor lists. A sample never lists itself.
#[derive(Debug, Clone)]
pub struct NeighborTable {
    neighbors: Vec<Vec<usize>>,
    kind: NeighborKind,
}

impl NeighborTable {
    pub fn new(neighbors: Vec<Vec<usize>>, kind: NeighborKind) -> Self {
        NeighborTable { neighbors, kind }
    }

    pub fn kind(&self) -> NeighborKind {
        self.kind
    }

    pub fn len(&self) -> usize {
        self.neighbors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.neighbors.is_empty()
    }

    pub fn get(&self, i: usize) -> &[usize] {
        &self.neighbors[i]
    }

    pub fn iter(&self) -> impl Iterator<Item = &[usize]> {
        self.neighbors.iter().map(Vec::as_slice)
    }

    /// True when `j ∈ N(i) ⇔ i ∈ N(j)` for every pair.
    pub fn is_symmetric(&self) -> bool {
        let sets: Vec<BTreeSet<usize>> = self
            .neighbors
            .iter()
            .map(|l| l.iter().copied().collect())
            .collect();
        sets.iter()
            .enumerate()
            .all(|(i, s)| s.iter().all(|&j| sets[j].contains(&i)))
    }
}

/// k nearest neighbors of every point, excluding the point itself.
pub fn build_knn_table(cloud: &PointCloud, k: usize) -> Result<NeighborTable> {
    if k == 0 || k >= cloud.len() {
        return Err(Error::config(format!(
            "k = {k} must be in 1..{} for a cloud of {} points",
            cloud.len(),
            cloud.len()
        )));
    }
    let tree = cloud.index();
    let neighbors = map_indices(cloud.len(), |i| tree.knn(cloud.position(i), k, Some(i)));
    Ok(NeighborTable::new(neighbors, NeighborKind::Knn(k)))
}

/// All other points within `radius` (inclusive).
pub fn build_ball_table(cloud: &PointCloud, radius: f64) -> Result<NeighborTable> {
    if !(radius > 0.0) || !radius.is_finite() {
        return Err(Error::config(format!("ball radius must be positive, got {radius}")));
    }
    let tree = cloud.index();
    let neighbors = map_indices(cloud.len(), |i| {
        let mut l = tree.within_radius(cloud.position(i), radius);
        l.retain(|&j| j != i);
        l
    });
    Ok(NeighborTable::new(neighbors, NeighborKind::Ball(radius)))
}

/// Mean distance from each point to its k-th nearest neighbor.
pub fn mean_kth_neighbor_distance(cloud: &PointCloud, k: usize) -> Result<f64> {
    if k == 0 || k >= cloud.len() {
        return Err(Error::config(format!(
            "k = {k} must be in 1..{} for a cloud of {} points",
            cloud.len(),
            cloud.len()
        )));
    }
    let tree = cloud.index();
    let d = map_indices(cloud.len(), |i| {
        tree.knn_with_distances(cloud.position(i), k, Some(i))
            .last()
            .map(|&(_, d2)| d2.sqrt())
            .unwrap_or(0.0)
    });
    Ok(d.iter().sum::<f64>() / d.len() as f64)
}

#[cfg(feature = "parallel")]
pub(crate) fn map_indices<T: Send>(n: usize, f: impl Fn(usize) -> T + Sync + Send) -> Vec<T> {
    use rayon::prelude::*;
    (0..n).into_par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub(crate) fn map_indices<T: Send>(n: usize, f: impl Fn(usize) -> T + Sync + Send) -> Vec<T> {
    (0..n).map(f).collect()
}

/// Triangle mesh with cached per-face data.
#[derive(Debug, Clone)]
pub struct TriangleMesh {
    vertices: Vec<Vector3<f64>>,
    faces: Vec<[usize; 3]>,
    face_normals: Vec<Vector3<f64>>,
    face_centers: Vec<Vector3<f64>>,
    vertex_faces: Vec<Vec<usize>>,
    face_adjacency: Vec<Vec<usize>>,
}

impl TriangleMesh {
    pub fn new(vertices: Vec<Vector3<f64>>, faces: Vec<[usize; 3]>) -> Result<Self> {
        if faces.is_empty() {
            return Err(Error::invalid("mesh has no faces"));
        }
        if let Some(i) = vertices.iter().position(|p| !p.iter().all(|x| x.is_finite())) {
            return Err(Error::invalid(format!("vertex {i} has a non-finite coordinate")));
        }
        let diag = bbox_diagonal(&vertices);
        let min_area = 1e-12 * diag * diag;
        let mut face_normals = Vec::with_capacity(faces.len());
        let mut face_centers = Vec::with_capacity(faces.len());
        let mut vertex_faces = vec![Vec::new(); vertices.len()];
        for (f, tri) in faces.iter().enumerate() {
            if let Some(&bad) = tri.iter().find(|&&v| v >= vertices.len()) {
                return Err(Error::invalid(format!(
                    "face {f} references vertex {bad} but the mesh has {} vertices",
                    vertices.len()
                )));
            }
            if tri[0] == tri[1] || tri[1] == tri[2] || tri[0] == tri[2] {
                return Err(Error::invalid(format!("face {f} repeats a vertex: {tri:?}")));
            }
            let [a, b, c] = tri.map(|v| vertices[v]);
            let cross = (b - a).cross(&(c - a));
            let area = 0.5 * cross.norm();
            if !(area >= min_area) || area == 0.0 {
                return Err(Error::invalid(format!(
                    "face {f} is degenerate (area {area:e})"
                )));
            }
            face_normals.push(cross / cross.norm());
            face_centers.push((a + b + c) / 3.0);
            for &v in tri {
                vertex_faces[v].push(f);
            }
        }
        let face_adjacency = faces
            .iter()
            .enumerate()
            .map(|(f, tri)| {
                let set: BTreeSet<usize> = tri
                    .iter()
                    .flat_map(|&v| vertex_faces[v].iter().copied())
                    .filter(|&g| g != f)
                    .collect();
                set.into_iter().collect()
            })
            .collect();
        Ok(TriangleMesh {
            vertices,
            faces,
            face_normals,
            face_centers,
            vertex_faces,
            face_adjacency,
        })
    }

    pub fn vertices(&self) -> &[Vector3<f64>] {
        &self.vertices
    }

    pub fn faces(&self) -> &[[usize; 3]] {
        &self.faces
    }

    pub fn face_normals(&self) -> &[Vector3<f64>] {
        &self.face_normals
    }

    pub fn face_centers(&self) -> &[Vector3<f64>] {
        &self.face_centers
    }

    /// Faces sharing at least one vertex with each face.
    pub fn face_adjacency(&self) -> &[Vec<usize>] {
        &self.face_adjacency
    }

    /// Faces incident to each vertex.
    pub fn vertex_faces(&self) -> &[Vec<usize>] {
        &self.vertex_faces
    }

    pub fn num_faces(&self) -> usize {
        self.faces.len()
    }

    pub fn with_vertices(&self, vertices: Vec<Vector3<f64>>) -> Result<Self> {
        TriangleMesh::new(vertices, self.faces.clone())
    }

    pub fn mean_edge_length(&self) -> f64 {
        let mut total = 0.0;
        for tri in &self.faces {
            for k in 0..3 {
                total += (self.vertices[tri[k]] - self.vertices[tri[(k + 1) % 3]]).norm();
            }
        }
        total / (3 * self.faces.len()) as f64
    }
}

/// Faces within two vertex-sharing hops of each face.
pub fn build_ring2_table(mesh: &TriangleMesh) -> NeighborTable {
    let adj = mesh.face_adjacency();
    let neighbors = adj
        .iter()
        .enumerate()
        .map(|(f, ring1)| {
            let mut set: BTreeSet<usize> = ring1.iter().copied().collect();
            for &g in ring1 {
                set.extend(adj[g].iter().copied());
            }
            set.remove(&f);
            set.into_iter().collect()
        })
        .collect();
    NeighborTable::new(neighbors, NeighborKind::Ring2)
}

/// One sample per face at its centroid, carrying the face normal.
pub fn mesh_to_samples(mesh: &TriangleMesh) -> PointCloud {
    PointCloud::new(mesh.face_centers().to_vec(), mesh.face_normals().to_vec())
        .expect("mesh faces are validated non-degenerate")
}
