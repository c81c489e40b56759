//! Occlusion estimate and the align-vs-fallback routing decision.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::img::Patch;

/// Per-pixel absolute intensity difference; pixels invalid in either patch are excluded.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffMap {
    pub values: Vec<f64>,
    pub valid: Vec<bool>,
}

/// Counting half of an [`OcclusionReport`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OcclusionCount {
    pub op_percent: f64,
    pub diff_exceed_count: usize,
    pub valid_pixel_count: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OcclusionReport {
    pub op_percent: f64,
    pub ncc_score: f64,
    pub diff_exceed_count: usize,
    pub valid_pixel_count: usize,
}

impl OcclusionReport {
    pub fn new(count: OcclusionCount, ncc_score: f64) -> Self {
        Self {
            op_percent: count.op_percent,
            ncc_score,
            diff_exceed_count: count.diff_exceed_count,
            valid_pixel_count: count.valid_pixel_count,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Route {
    Align,
    Fallback,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RouteDecision {
    pub route: Route,
    pub report: OcclusionReport,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GateConfig {
    /// Occlusion percentage at or above which the frame falls back.
    pub op_threshold: f64,
    /// NCC peak score at or below which the frame falls back.
    pub ncc_threshold: f64,
    /// Intensity difference above which a pixel counts as occluded.
    pub tau_pix: f64,
}

impl Default for GateConfig {
    fn default() -> Self {
        Self {
            op_threshold: 40.0,
            ncc_threshold: 0.6,
            tau_pix: 30.0,
        }
    }
}

pub fn pixel_diff(patch: &Patch, template: &Patch) -> Result<DiffMap> {
    if patch.width() != template.width() || patch.height() != template.height() {
        return Err(Error::InvalidInput(format!(
            "patch {}x{} does not match template {}x{}",
            patch.width(),
            patch.height(),
            template.width(),
            template.height()
        )));
    }
    let values = patch
        .pixels()
        .data()
        .iter()
        .zip(template.pixels().data())
        .map(|(p, t)| (p - t).abs())
        .collect();
    let valid = patch
        .valid()
        .iter()
        .zip(template.valid())
        .map(|(a, b)| *a && *b)
        .collect();
    Ok(DiffMap { values, valid })
}

/// Share of valid pixels whose difference strictly exceeds `tau_pix`, in percent.
pub fn occlusion_percentage(diff: &DiffMap, tau_pix: f64) -> Result<OcclusionCount> {
    let (mut valid, mut exceed) = (0usize, 0usize);
    for (d, ok) in diff.values.iter().zip(&diff.valid) {
        if *ok {
            valid += 1;
            if *d > tau_pix {
                exceed += 1;
            }
        }
    }
    if valid == 0 {
        return Err(Error::UndefinedOcclusion);
    }
    Ok(OcclusionCount {
        op_percent: 100.0 * exceed as f64 / valid as f64,
        diff_exceed_count: exceed,
        valid_pixel_count: valid,
    })
}

/// ALIGN iff `op_percent < op_threshold` and `ncc_score > ncc_threshold`.
pub fn route(op_percent: f64, ncc_score: f64, cfg: &GateConfig) -> Route {
    if op_percent < cfg.op_threshold && ncc_score > cfg.ncc_threshold {
        Route::Align
    } else {
        Route::Fallback
    }
}

/// Runs the full gate on a candidate patch.
pub fn evaluate(patch: &Patch, template: &Patch, ncc_score: f64, cfg: &GateConfig) -> Result<RouteDecision> {
    let diff = pixel_diff(patch, template)?;
    let count = occlusion_percentage(&diff, cfg.tau_pix)?;
    let report = OcclusionReport::new(count, ncc_score);
    Ok(RouteDecision {
        route: route(report.op_percent, ncc_score, cfg),
        report,
    })
}
