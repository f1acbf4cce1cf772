//! ASCII point cloud and mesh files, plus run manifests.
//!
//! Reals are written in scientific notation with ten significant digits.
//! Manifests are flat `key=value` lines.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Duration;

use nalgebra::Vector3;
use tracing::warn;

use crate::error::{Error, Result};
use crate::eval::{pca_normals, BOOTSTRAP_PCA_K};
use crate::geometry::{PointCloud, TriangleMesh};
use crate::normals::{FilterConfig, MatrixSolver};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CloudFormat {
    PlyAscii,
    Xyz,
    Obj,
}

impl CloudFormat {
    /// Picks the format from the file extension.
    pub fn from_path(path: &Path) -> Result<Self> {
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .map(|e| e.to_ascii_lowercase());
        match ext.as_deref() {
            Some("ply") => Ok(CloudFormat::PlyAscii),
            Some("xyz") | Some("txt") | Some("pts") => Ok(CloudFormat::Xyz),
            Some("obj") => Ok(CloudFormat::Obj),
            _ => Err(Error::config(format!(
                "{}: unknown point cloud extension (expected .ply, .xyz or .obj)",
                path.display()
            ))),
        }
    }
}

fn fmt_real(out: &mut String, v: f64) {
    let _ = write!(out, "{v:.9e}");
}

fn fmt_vec(out: &mut String, v: &Vector3<f64>) {
    fmt_real(out, v.x);
    out.push(' ');
    fmt_real(out, v.y);
    out.push(' ');
    fmt_real(out, v.z);
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

struct LineError<'a> {
    path: &'a Path,
}

impl LineError<'_> {
    fn at(&self, line: usize, msg: impl Into<String>) -> Error {
        Error::Parse {
            path: self.path.to_path_buf(),
            line,
            msg: msg.into(),
        }
    }

    fn reals(&self, line: usize, fields: &[&str]) -> Result<Vec<f64>> {
        fields
            .iter()
            .map(|f| {
                f.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| self.at(line, format!("'{f}' is not a finite number")))
            })
            .collect()
    }
}

/// Positions with optional normals, as parsed before any bootstrap.
#[derive(Debug, Clone, Default)]
pub struct RawCloud {
    pub positions: Vec<Vector3<f64>>,
    pub normals: Option<Vec<Vector3<f64>>>,
}

/// Reads a point cloud; files without normals get PCA normals from 18 neighbors.
pub fn read_cloud(path: &Path) -> Result<PointCloud> {
    let raw = read_raw_cloud(path)?;
    let normals = match raw.normals {
        Some(n) => n,
        None => {
            warn!(path = %path.display(), k = BOOTSTRAP_PCA_K, "no normals in file, estimating them by PCA");
            pca_normals(&raw.positions, BOOTSTRAP_PCA_K, None, None)?.field.normals
        }
    };
    PointCloud::new(raw.positions, normals).map_err(|e| match e {
        Error::InvalidInput(msg) => Error::InvalidInput(format!("{}: {msg}", path.display())),
        other => other,
    })
}

/// Parses a cloud file without touching missing normals.
pub fn read_raw_cloud(path: &Path) -> Result<RawCloud> {
    let text = read_text(path)?;
    let raw = match CloudFormat::from_path(path)? {
        CloudFormat::Xyz => parse_xyz(&text, path)?,
        CloudFormat::PlyAscii => parse_ply(&text, path)?,
        CloudFormat::Obj => parse_obj_cloud(&text, path)?,
    };
    if raw.positions.is_empty() {
        return Err(Error::EmptyFile(path.to_path_buf()));
    }
    Ok(raw)
}

fn content_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'))
}

fn parse_xyz(text: &str, path: &Path) -> Result<RawCloud> {
    let err = LineError { path };
    let mut positions = Vec::new();
    let mut normals = Vec::new();
    let mut with_normals = None;
    for (line, l) in content_lines(text) {
        let fields: Vec<&str> = l.split_whitespace().collect();
        let has = match fields.len() {
            3 => false,
            6 => true,
            n => return Err(err.at(line, format!("expected 3 or 6 values, found {n}"))),
        };
        if *with_normals.get_or_insert(has) != has {
            return Err(err.at(line, "mixed lines with and without normals"));
        }
        let v = err.reals(line, &fields)?;
        positions.push(Vector3::new(v[0], v[1], v[2]));
        if has {
            normals.push(Vector3::new(v[3], v[4], v[5]));
        }
    }
    Ok(RawCloud {
        positions,
        normals: with_normals.unwrap_or(false).then_some(normals),
    })
}

fn parse_ply(text: &str, path: &Path) -> Result<RawCloud> {
    let err = LineError { path };
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim()));
    match lines.next() {
        Some((_, "ply")) => {}
        _ => return Err(err.at(1, "missing 'ply' magic")),
    }
    // (name, count, property names)
    let mut elements: Vec<(String, usize, Vec<String>)> = Vec::new();
    let mut header_done = false;
    for (line, l) in lines.by_ref() {
        let fields: Vec<&str> = l.split_whitespace().collect();
        match fields.as_slice() {
            [] => {}
            ["format", "ascii", _] => {}
            ["format", other, ..] => return Err(err.at(line, format!("unsupported format '{other}', only ascii is read"))),
            ["comment", ..] | ["obj_info", ..] => {}
            ["element", name, count] => {
                let n = count
                    .parse::<usize>()
                    .map_err(|_| err.at(line, format!("bad element count '{count}'")))?;
                elements.push((name.to_string(), n, Vec::new()));
            }
            ["property", "list", ..] => match elements.last_mut() {
                Some(e) if e.0 != "vertex" => e.2.push("list".into()),
                _ => return Err(err.at(line, "list properties are not supported on vertices")),
            },
            ["property", _ty, name] => match elements.last_mut() {
                Some(e) => e.2.push(name.to_string()),
                None => return Err(err.at(line, "property before any element")),
            },
            ["end_header"] => {
                header_done = true;
                break;
            }
            _ => return Err(err.at(line, format!("unexpected header line '{l}'"))),
        }
    }
    if !header_done {
        return Err(err.at(text.lines().count(), "missing end_header"));
    }
    let mut out = RawCloud::default();
    let mut body = lines.filter(|(_, l)| !l.is_empty());
    for (name, count, props) in &elements {
        if name != "vertex" {
            for _ in 0..*count {
                body.next();
            }
            continue;
        }
        let find = |p: &str| props.iter().position(|q| q == p);
        let (x, y, z) = match (find("x"), find("y"), find("z")) {
            (Some(x), Some(y), Some(z)) => (x, y, z),
            _ => return Err(err.at(1, "vertex element lacks x, y or z")),
        };
        let normal_idx = match (find("nx"), find("ny"), find("nz")) {
            (Some(a), Some(b), Some(c)) => Some((a, b, c)),
            _ => None,
        };
        let mut normals = Vec::with_capacity(*count);
        for _ in 0..*count {
            let (line, l) = body
                .next()
                .ok_or_else(|| err.at(text.lines().count(), format!("expected {count} vertices")))?;
            let fields: Vec<&str> = l.split_whitespace().collect();
            if fields.len() != props.len() {
                return Err(err.at(line, format!("expected {} values, found {}", props.len(), fields.len())));
            }
            let v = err.reals(line, &fields)?;
            out.positions.push(Vector3::new(v[x], v[y], v[z]));
            if let Some((a, b, c)) = normal_idx {
                normals.push(Vector3::new(v[a], v[b], v[c]));
            }
        }
        if normal_idx.is_some() {
            out.normals = Some(normals);
        }
    }
    Ok(out)
}

fn parse_obj_cloud(text: &str, path: &Path) -> Result<RawCloud> {
    let err = LineError { path };
    let mut positions = Vec::new();
    let mut normals = Vec::new();
    for (line, l) in content_lines(text) {
        let mut fields = l.split_whitespace();
        let tag = fields.next().unwrap_or_default();
        let rest: Vec<&str> = fields.collect();
        match tag {
            "v" | "vn" => {
                if rest.len() < 3 {
                    return Err(err.at(line, format!("'{tag}' needs 3 coordinates")));
                }
                let v = err.reals(line, &rest[..3])?;
                let v = Vector3::new(v[0], v[1], v[2]);
                if tag == "v" {
                    positions.push(v);
                } else {
                    normals.push(v);
                }
            }
            _ => {}
        }
    }
    let normals = if normals.is_empty() {
        None
    } else if normals.len() == positions.len() {
        Some(normals)
    } else {
        warn!(path = %path.display(), "vn count differs from v count, ignoring normals");
        None
    };
    Ok(RawCloud { positions, normals })
}

/// Writes positions and normals in the format implied by the extension.
pub fn write_cloud(path: &Path, cloud: &PointCloud) -> Result<()> {
    write_points(path, cloud.positions(), Some(cloud.normals()))
}

/// Writes positions, with normals when given. Readers bootstrap missing normals.
pub fn write_points(
    path: &Path,
    positions: &[Vector3<f64>],
    normals: Option<&[Vector3<f64>]>,
) -> Result<()> {
    if let Some(n) = normals {
        if n.len() != positions.len() {
            return Err(Error::invalid("normal count does not match position count"));
        }
    }
    let mut out = String::with_capacity(positions.len() * 100);
    let row = |out: &mut String, i: usize| {
        fmt_vec(out, &positions[i]);
        if let Some(n) = normals {
            out.push(' ');
            fmt_vec(out, &n[i]);
        }
        out.push('\n');
    };
    match CloudFormat::from_path(path)? {
        CloudFormat::PlyAscii => {
            out.push_str("ply\nformat ascii 1.0\n");
            let _ = writeln!(out, "element vertex {}", positions.len());
            let props: &[&str] = if normals.is_some() {
                &["x", "y", "z", "nx", "ny", "nz"]
            } else {
                &["x", "y", "z"]
            };
            for p in props {
                let _ = writeln!(out, "property double {p}");
            }
            out.push_str("end_header\n");
            (0..positions.len()).for_each(|i| row(&mut out, i));
        }
        CloudFormat::Xyz => (0..positions.len()).for_each(|i| row(&mut out, i)),
        CloudFormat::Obj => {
            for p in positions {
                out.push_str("v ");
                fmt_vec(&mut out, p);
                out.push('\n');
            }
            for n in normals.unwrap_or_default() {
                out.push_str("vn ");
                fmt_vec(&mut out, n);
                out.push('\n');
            }
        }
    }
    write_text(path, &out)
}

fn parse_face_index(token: &str, n_vertices: usize) -> Option<usize> {
    let head = token.split('/').next()?;
    let i: i64 = head.parse().ok()?;
    let idx = if i > 0 {
        i - 1
    } else if i < 0 {
        n_vertices as i64 + i
    } else {
        return None;
    };
    (0..n_vertices as i64).contains(&idx).then_some(idx as usize)
}

/// Reads an OBJ triangle mesh. Polygons are fanned from their first corner when
/// `triangulate_fan` is set and rejected otherwise.
pub fn read_mesh(path: &Path, triangulate_fan: bool) -> Result<TriangleMesh> {
    let text = read_text(path)?;
    let err = LineError { path };
    let mut vertices = Vec::new();
    let mut faces = Vec::new();
    for (line, l) in content_lines(&text) {
        let mut fields = l.split_whitespace();
        match fields.next().unwrap_or_default() {
            "v" => {
                let rest: Vec<&str> = fields.collect();
                if rest.len() < 3 {
                    return Err(err.at(line, "'v' needs 3 coordinates"));
                }
                let v = err.reals(line, &rest[..3])?;
                vertices.push(Vector3::new(v[0], v[1], v[2]));
            }
            "f" => {
                let corners = fields
                    .map(|t| {
                        parse_face_index(t, vertices.len())
                            .ok_or_else(|| err.at(line, format!("face index '{t}' is out of range")))
                    })
                    .collect::<Result<Vec<usize>>>()?;
                if corners.len() < 3 {
                    return Err(err.at(line, "face with fewer than 3 vertices"));
                }
                if corners.len() > 3 && !triangulate_fan {
                    return Err(err.at(
                        line,
                        format!("face has {} vertices; pass --triangulate-fan to split polygons", corners.len()),
                    ));
                }
                for t in 1..corners.len() - 1 {
                    faces.push([corners[0], corners[t], corners[t + 1]]);
                }
            }
            _ => {}
        }
    }
    if vertices.is_empty() || faces.is_empty() {
        return Err(Error::EmptyFile(path.to_path_buf()));
    }
    TriangleMesh::new(vertices, faces).map_err(|e| match e {
        Error::InvalidInput(msg) => Error::InvalidInput(format!("{}: {msg}", path.display())),
        other => other,
    })
}

pub fn write_mesh(path: &Path, mesh: &TriangleMesh) -> Result<()> {
    let mut out = String::with_capacity(mesh.vertices().len() * 50 + mesh.num_faces() * 20);
    for v in mesh.vertices() {
        out.push_str("v ");
        fmt_vec(&mut out, v);
        out.push('\n');
    }
    for f in mesh.faces() {
        let _ = writeln!(out, "f {} {} {}", f[0] + 1, f[1] + 1, f[2] + 1);
    }
    write_text(path, &out)
}

/// Flat `key=value` record of one run. Timings go to a separate file so the
/// manifest itself stays byte-identical across reruns.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunManifest {
    entries: Vec<(String, String)>,
    timings: Vec<(String, Duration)>,
}

impl RunManifest {
    pub fn new(command: &str) -> Self {
        let mut m = RunManifest::default();
        m.set("command", command);
        m.set("version", env!("CARGO_PKG_VERSION"));
        m
    }

    /// Sets a key, replacing an earlier value in place.
    pub fn set(&mut self, key: &str, value: impl ToString) {
        let value = value.to_string();
        match self.entries.iter_mut().find(|(k, _)| k == key) {
            Some(e) => e.1 = value,
            None => self.entries.push((key.to_string(), value)),
        }
    }

    pub fn set_real(&mut self, key: &str, value: f64) {
        self.set(key, format!("{value:.9e}"));
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn entries(&self) -> &[(String, String)] {
        &self.entries
    }

    pub fn record_config(&mut self, cfg: &FilterConfig) {
        self.set("k_local", cfg.k_local);
        self.set("k_non", cfg.k_non);
        self.set("theta_init", cfg.theta_init);
        self.set("theta_low", cfg.theta_low);
        self.set("beta", cfg.beta);
        self.set("n_nor", cfg.n_nor);
        self.set("n_pos", cfg.n_pos);
        self.set(
            "ball_radius",
            cfg.ball_radius.map_or_else(|| "auto".to_string(), |r| r.to_string()),
        );
        self.set(
            "solver",
            match cfg.solver {
                MatrixSolver::Wnnm => "wnnm",
                MatrixSolver::RowAverage => "row-average",
            },
        );
    }

    pub fn record_timing(&mut self, stage: &str, elapsed: Duration) {
        self.timings.push((stage.to_string(), elapsed));
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.entries {
            let _ = writeln!(out, "{k}={v}");
        }
        out
    }

    pub fn timings_text(&self) -> String {
        let mut out = String::new();
        for (k, d) in &self.timings {
            let _ = writeln!(out, "{k}_seconds={:.6}", d.as_secs_f64());
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut m = RunManifest::default();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                path: PathBuf::from("<manifest>"),
                line: i + 1,
                msg: "expected key=value".into(),
            })?;
            m.entries.push((k.to_string(), v.to_string()));
        }
        Ok(m)
    }

    /// Manifest path that sits next to an output file.
    pub fn path_for(output: &Path) -> PathBuf {
        let mut s = output.as_os_str().to_owned();
        s.push(".manifest");
        PathBuf::from(s)
    }

    pub fn timings_path_for(output: &Path) -> PathBuf {
        let mut s = output.as_os_str().to_owned();
        s.push(".timings");
        PathBuf::from(s)
    }

    /// Writes `<output>.manifest` and `<output>.timings`.
    pub fn write_next_to(&self, output: &Path) -> Result<PathBuf> {
        let path = Self::path_for(output);
        write_text(&path, &self.to_text())?;
        write_text(&Self::timings_path_for(output), &self.timings_text())?;
        Ok(path)
    }
}
