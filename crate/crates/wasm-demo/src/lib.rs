//! Browser bindings for a few interactive views of `ebmeta`.
//!
//! The plain functions return Rust types and are tested natively. The
//! `#[wasm_bindgen]` wrappers only translate errors into JS exceptions.

use ebmeta::asymptotics::eb_point;
use ebmeta::combiners::simplex_qp;
use ebmeta::sim::{run_scenario, Scenario, ScenarioId};
use ebmeta::Error;
use nalgebra::{DMatrix, DVector};
use wasm_bindgen::prelude::*;

/// Scalar shrinkage curve: for each discrepancy `z` on an even grid over
/// `[-z_max, z_max]`, the offset of the EB estimate from the constrained one.
///
/// Output is interleaved `[z0, off0, z1, off1, ...]`.
pub fn shrinkage_curve(variance: f64, z_max: f64, points: usize) -> Result<Vec<f64>, Error> {
    if !(variance > 0.0) || !(z_max > 0.0) || points < 2 {
        return Err(Error::InvalidArgument("need variance > 0, z_max > 0 and at least 2 points".into()));
    }
    let v = DMatrix::from_element(1, 1, variance);
    let cml = DVector::zeros(1);
    let mut out = Vec::with_capacity(2 * points);
    for i in 0..points {
        let z = -z_max + 2.0 * z_max * i as f64 / (points - 1) as f64;
        let eb = eb_point(&DVector::from_element(1, z), &cml, &v)?;
        out.extend([z, eb[0]]);
    }
    Ok(out)
}

/// Simplex-constrained minimiser of `wᵀ Q w` for a row-major square `Q`.
/// Returns the weights followed by the attained objective.
pub fn simplex_weights(q: &[f64]) -> Result<Vec<f64>, Error> {
    let k = (q.len() as f64).sqrt().round() as usize;
    if k == 0 || k * k != q.len() {
        return Err(Error::InvalidArgument(format!("{} entries do not form a square matrix", q.len())));
    }
    let q = DMatrix::from_row_slice(k, k, q);
    if (&q - q.transpose()).amax() > 1e-12 * (1.0 + q.amax()) {
        return Err(Error::InvalidArgument("matrix is not symmetric".into()));
    }
    let w = simplex_qp(&q)?;
    let objective = (w.transpose() * &q * &w)[0];
    Ok(w.iter().copied().chain([objective]).collect())
}

/// Runs a small replication study and returns its summary as JSON.
pub fn scenario_summary(scenario: &str, reps: usize, seed: u64, mc_draws: usize) -> Result<String, Error> {
    let id: ScenarioId = scenario.parse()?;
    let summary = run_scenario(&Scenario::new(id), reps, seed, mc_draws)?;
    serde_json::to_string(&summary).map_err(|e| Error::InvalidArgument(e.to_string()))
}

fn js_err(e: Error) -> JsError {
    JsError::new(&e.to_string())
}

#[wasm_bindgen(js_name = shrinkageCurve)]
pub fn shrinkage_curve_js(variance: f64, z_max: f64, points: usize) -> Result<Vec<f64>, JsError> {
    shrinkage_curve(variance, z_max, points).map_err(js_err)
}

#[wasm_bindgen(js_name = simplexWeights)]
pub fn simplex_weights_js(q: &[f64]) -> Result<Vec<f64>, JsError> {
    simplex_weights(q).map_err(js_err)
}

#[wasm_bindgen(js_name = scenarioSummary)]
pub fn scenario_summary_js(scenario: &str, reps: usize, seed: u32, mc_draws: usize) -> Result<String, JsError> {
    scenario_summary(scenario, reps, u64::from(seed), mc_draws).map_err(js_err)
}
