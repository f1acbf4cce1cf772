//! Browser demo bindings. The page in `www/` drives three operations: build a
//! noisy synthetic shape, run the normal filter on it, and filter positions.
//! A small spectrum explorer shows how the weighted shrinkage treats a list of
//! singular values.
//!
//! The wasm wrappers are thin; [`Scene`] and [`shrink_spectrum`] hold the logic
//! and are usable from native code.

use wasm_bindgen::prelude::*;
use wnnm_normals::eval::{
    adapt_ground_truth_edges, add_noise, angular_errors, closest_point_rmse, estimate_normals_pca, make_shape, msae,
    shape_face_normals, NoiseDirection, NoiseSpec, ShapeKind, BOOTSTRAP_PCA_K,
};
use wnnm_normals::lowrank::wnnm_weights;
use wnnm_normals::normals::estimate_normals;
use wnnm_normals::position::filter_positions;
use wnnm_normals::{FilterConfig, NormalField, PointCloud};

/// Parameters of one normal-filter run.
#[derive(Debug, Clone, Copy)]
pub struct EstimateParams {
    pub k_local: usize,
    pub k_non: usize,
    pub iterations: usize,
    pub beta: f64,
}

/// A noisy shape with its reference normals and the latest results.
pub struct Scene {
    clean: PointCloud,
    reference: PointCloud,
    input: PointCloud,
    estimated: Option<NormalField>,
    filtered: Option<PointCloud>,
    last_k_local: usize,
}

impl Scene {
    /// Samples `kind`, displaces points along the true normal by `sigma` times
    /// the box diagonal and re-derives input normals by PCA.
    pub fn generate(kind: &str, samples: usize, sigma: f64, seed: u64) -> Result<Self, String> {
        let kind: ShapeKind = kind.parse().map_err(|e| format!("{e}"))?;
        let clean = make_shape(kind, samples, seed).map_err(|e| e.to_string())?;
        let reference = match shape_face_normals(kind) {
            Some(faces) => adapt_ground_truth_edges(&clean, &faces).map_err(|e| e.to_string())?.reference,
            None => clean.clone(),
        };
        let spec = NoiseSpec {
            sigma,
            seed: seed.wrapping_add(1),
            direction: NoiseDirection::AlongNormal,
        };
        let noisy = add_noise(&clean, &spec).map_err(|e| e.to_string())?;
        let pca = estimate_normals_pca(&noisy, BOOTSTRAP_PCA_K).map_err(|e| e.to_string())?;
        let input = noisy.with_normals(pca.field.normals).map_err(|e| e.to_string())?;
        Ok(Scene {
            clean,
            reference,
            input,
            estimated: None,
            filtered: None,
            last_k_local: FilterConfig::default().k_local,
        })
    }

    pub fn len(&self) -> usize {
        self.input.len()
    }

    pub fn is_empty(&self) -> bool {
        self.input.is_empty()
    }

    /// MSAE of the PCA input normals against the reference.
    pub fn input_msae(&self) -> f64 {
        msae(self.input.normals(), self.reference.normals()).unwrap_or(f64::NAN)
    }

    /// MSAE of PCA normals with a `k`-neighborhood, as a baseline.
    pub fn pca_msae(&self, k: usize) -> Result<f64, String> {
        let pca = estimate_normals_pca(&self.input, k).map_err(|e| e.to_string())?;
        msae(&pca.field.normals, self.reference.normals()).map_err(|e| e.to_string())
    }

    /// Runs the normal filter and returns its MSAE. Clears any filtered positions.
    pub fn estimate(&mut self, p: EstimateParams) -> Result<f64, String> {
        let cfg = FilterConfig {
            k_local: p.k_local,
            k_non: p.k_non,
            n_nor: p.iterations,
            beta: p.beta,
            ..FilterConfig::default()
        };
        let field = estimate_normals(&self.input, &cfg).map_err(|e| e.to_string())?;
        let e = msae(&field.normals, self.reference.normals()).map_err(|e| e.to_string())?;
        self.estimated = Some(field);
        self.filtered = None;
        self.last_k_local = p.k_local;
        Ok(e)
    }

    /// Moves points onto the estimated tangent planes. Returns `(noisy, filtered)`
    /// closest-point RMSE against the clean samples.
    pub fn filter(&mut self, steps: usize) -> Result<(f64, f64), String> {
        let field = self.estimated.as_ref().ok_or("estimate normals first")?;
        let cfg = FilterConfig {
            k_local: self.last_k_local,
            n_pos: steps,
            ..FilterConfig::default()
        };
        let (out, _) = filter_positions(&self.input, field, &cfg).map_err(|e| e.to_string())?;
        let before = closest_point_rmse(self.input.positions(), self.clean.positions()).map_err(|e| e.to_string())?;
        let after = closest_point_rmse(out.positions(), self.clean.positions()).map_err(|e| e.to_string())?;
        self.filtered = Some(out);
        Ok((before, after))
    }

    /// Current positions, filtered if available, as `x0 y0 z0 x1 ...`.
    pub fn positions(&self) -> Vec<f64> {
        let cloud = self.filtered.as_ref().unwrap_or(&self.input);
        flatten(cloud.positions())
    }

    /// Latest normals: filtered estimate if available, PCA input otherwise.
    pub fn normals(&self) -> Vec<f64> {
        flatten(self.current_normals())
    }

    /// Per-point angular error of the latest normals, in degrees.
    pub fn errors_deg(&self) -> Vec<f64> {
        angular_errors(self.current_normals(), self.reference.normals())
            .into_iter()
            .map(f64::to_degrees)
            .collect()
    }

    fn current_normals(&self) -> &[nalgebra::Vector3<f64>] {
        match &self.estimated {
            Some(f) => &f.normals,
            None => self.input.normals(),
        }
    }
}

fn flatten(v: &[nalgebra::Vector3<f64>]) -> Vec<f64> {
    v.iter().flat_map(|p| [p.x, p.y, p.z]).collect()
}

/// Weights and shrunk values for a spectrum, as `[w_0, s_0, w_1, s_1, ...]` in
/// descending order of the input.
pub fn shrink_spectrum(values: &[f64], beta: f64) -> Vec<f64> {
    let mut sorted: Vec<f64> = values.iter().copied().filter(|v| v.is_finite()).map(f64::abs).collect();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let w = wnnm_weights(&sorted, beta).weights;
    sorted
        .iter()
        .zip(&w)
        .flat_map(|(s, w)| [*w, (s - w).max(0.0)])
        .collect()
}

// ---------------------------------------------------------------------------
// wasm surface

#[wasm_bindgen]
pub struct Demo(Scene);

#[wasm_bindgen]
impl Demo {
    #[wasm_bindgen(constructor)]
    pub fn new(kind: &str, samples: u32, sigma: f64, seed: u32) -> Result<Demo, JsError> {
        Scene::generate(kind, samples as usize, sigma, seed as u64)
            .map(Demo)
            .map_err(|e| JsError::new(&e))
    }

    #[wasm_bindgen(js_name = len)]
    pub fn count(&self) -> u32 {
        self.0.len() as u32
    }

    #[wasm_bindgen(js_name = inputMsae)]
    pub fn input_msae(&self) -> f64 {
        self.0.input_msae()
    }

    #[wasm_bindgen(js_name = pcaMsae)]
    pub fn pca_msae(&self, k: u32) -> Result<f64, JsError> {
        self.0.pca_msae(k as usize).map_err(|e| JsError::new(&e))
    }

    pub fn estimate(&mut self, k_local: u32, k_non: u32, iterations: u32, beta: f64) -> Result<f64, JsError> {
        self.0
            .estimate(EstimateParams {
                k_local: k_local as usize,
                k_non: k_non as usize,
                iterations: iterations as usize,
                beta,
            })
            .map_err(|e| JsError::new(&e))
    }

    /// Returns `[rmse_noisy, rmse_filtered]`.
    pub fn filter(&mut self, steps: u32) -> Result<Vec<f64>, JsError> {
        self.0
            .filter(steps as usize)
            .map(|(a, b)| vec![a, b])
            .map_err(|e| JsError::new(&e))
    }

    pub fn positions(&self) -> Vec<f64> {
        self.0.positions()
    }

    pub fn normals(&self) -> Vec<f64> {
        self.0.normals()
    }

    #[wasm_bindgen(js_name = errorsDeg)]
    pub fn errors_deg(&self) -> Vec<f64> {
        self.0.errors_deg()
    }
}

#[wasm_bindgen(js_name = shrinkSpectrum)]
pub fn shrink_spectrum_js(values: &[f64], beta: f64) -> Vec<f64> {
    shrink_spectrum(values, beta)
}
