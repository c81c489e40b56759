//! Inverse-compositional Lucas–Kanade over multi-channel feature maps.
//!
//! The warp acts on coordinates relative to the map center
//! `((W-1)/2, (H-1)/2)`. Steepest-descent images are built once from the
//! template; every iteration only resamples the patch features.

use nalgebra::{Matrix4, SymmetricEigen, Vector4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FeatureMap;
use crate::img::{BilinearTap, WarpParams};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AlignConfig {
    pub max_iterations: usize,
    /// Convergence threshold on ‖Δp‖ in feature units.
    pub epsilon_dp: f64,
    /// Levenberg term added to the normal-equation diagonal.
    pub damping: f64,
    /// Patch pixels per feature pixel.
    pub feature_stride: usize,
}

impl Default for AlignConfig {
    fn default() -> Self {
        Self {
            max_iterations: 20,
            epsilon_dp: 1e-3,
            damping: 1e-3,
            feature_stride: 4,
        }
    }
}

impl AlignConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iterations == 0 {
            return Err(Error::Config("align.max_iterations must be at least 1".into()));
        }
        if !(self.damping >= 0.0 && self.damping.is_finite()) {
            return Err(Error::Config("align.damping must be finite and non-negative".into()));
        }
        if !(self.epsilon_dp >= 0.0) {
            return Err(Error::Config("align.epsilon_dp must be non-negative".into()));
        }
        if self.feature_stride == 0 {
            return Err(Error::Config("align.feature_stride must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AlignResult {
    /// Estimated warp; translations in patch pixels.
    pub params: WarpParams,
    pub iterations_used: usize,
    /// Mean squared feature difference at `params` over valid samples.
    pub final_residual: f64,
    pub converged: bool,
    /// Mean squared residual after each accepted update, starting with `p0`.
    pub residual_history: ResidualTrace,
}

/// Bounded list of accepted residuals (one per accepted iteration plus the start).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ResidualTrace {
    values: [f64; 65],
    len: usize,
}

impl ResidualTrace {
    fn new() -> Self {
        Self {
            values: [0.0; 65],
            len: 0,
        }
    }

    fn push(&mut self, v: f64) {
        if self.len < self.values.len() {
            self.values[self.len] = v;
            self.len += 1;
        }
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values[..self.len]
    }
}

/// Per-channel central differences, one-sided on the border.
pub fn feature_gradients(f: &FeatureMap) -> (FeatureMap, FeatureMap) {
    let (c, h, w) = (f.channels(), f.height(), f.width());
    let mut gx = vec![0.0f32; c * h * w];
    let mut gy = vec![0.0f32; c * h * w];
    for ch in 0..c {
        let plane = f.channel(ch);
        let base = ch * h * w;
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                gx[base + i] = if w < 2 {
                    0.0
                } else if x == 0 {
                    plane[i + 1] - plane[i]
                } else if x == w - 1 {
                    plane[i] - plane[i - 1]
                } else {
                    0.5 * (plane[i + 1] - plane[i - 1])
                };
                gy[base + i] = if h < 2 {
                    0.0
                } else if y == 0 {
                    plane[i + w] - plane[i]
                } else if y == h - 1 {
                    plane[i] - plane[i - w]
                } else {
                    0.5 * (plane[i + w] - plane[i - w])
                };
            }
        }
    }
    (
        FeatureMap::new(c, h, w, gx).expect("same shape"),
        FeatureMap::new(c, h, w, gy).expect("same shape"),
    )
}

fn map_center(f: &FeatureMap) -> [f64; 2] {
    [(f.width() as f64 - 1.0) / 2.0, (f.height() as f64 - 1.0) / 2.0]
}

/// Template-side precomputation: steepest-descent images and Hessians.
#[derive(Debug, Clone)]
pub struct TemplateModel {
    template: FeatureMap,
    /// `J(x, c)` rows in channel-major order.
    sdi: Vec<[f64; 4]>,
    /// Σ_c JᵀJ at each pixel.
    pixel_hessians: Vec<Matrix4<f64>>,
    hessian: Matrix4<f64>,
    center: [f64; 2],
}

impl TemplateModel {
    pub fn template(&self) -> &FeatureMap {
        &self.template
    }

    pub fn hessian(&self) -> &Matrix4<f64> {
        &self.hessian
    }

    /// Steepest-descent row for channel `c`, pixel `(x, y)`.
    pub fn sdi(&self, c: usize, x: usize, y: usize) -> [f64; 4] {
        let w = self.template.width();
        let h = self.template.height();
        self.sdi[(c * h + y) * w + x]
    }
}

/// Builds steepest-descent images `∇F_T · ∂W/∂p` at the identity warp.
pub fn precompute_sdi(template: &FeatureMap) -> Result<TemplateModel> {
    let (c, h, w) = (template.channels(), template.height(), template.width());
    if h < 3 || w < 3 {
        return Err(Error::Shape(format!("feature map {h}x{w} is smaller than 3x3")));
    }
    let (gx, gy) = feature_gradients(template);
    let center = map_center(template);
    let hw = h * w;
    let mut sdi = Vec::with_capacity(c * hw);
    let mut pixel_hessians = vec![Matrix4::zeros(); hw];
    for ch in 0..c {
        let (gxc, gyc) = (gx.channel(ch), gy.channel(ch));
        for y in 0..h {
            let ry = y as f64 - center[1];
            for x in 0..w {
                let rx = x as f64 - center[0];
                let i = y * w + x;
                let (dx, dy) = (gxc[i] as f64, gyc[i] as f64);
                let j = [dx, dy, -dx * ry + dy * rx, dx * rx + dy * ry];
                let jv = Vector4::from(j);
                pixel_hessians[i] += jv * jv.transpose();
                sdi.push(j);
            }
        }
    }
    let hessian: Matrix4<f64> = pixel_hessians.iter().sum();
    let trace = hessian.trace();
    if !(trace > 1e-12) {
        return Err(Error::DegenerateTemplate("template features have no gradient".into()));
    }
    let eig = SymmetricEigen::new(hessian).eigenvalues;
    let (min, max) = (eig.min(), eig.max());
    if !(min > 1e-12 * max) {
        return Err(Error::DegenerateTemplate(format!(
            "Hessian is rank-deficient (eigenvalues {min:.3e}..{max:.3e})"
        )));
    }
    Ok(TemplateModel {
        template: template.clone(),
        sdi,
        pixel_hessians,
        hessian,
        center,
    })
}

/// Sampling footprint of every template pixel under a warp (feature units).
fn warp_taps(w: usize, h: usize, center: [f64; 2], p: &WarpParams) -> Vec<Option<BilinearTap>> {
    let mut taps = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            let q = p.warp_point([x as f64 - center[0], y as f64 - center[1]]);
            taps.push(BilinearTap::new(w, h, q[0] + center[0], q[1] + center[1]));
        }
    }
    taps
}

/// Resamples `f` on its own grid under warp `p` (feature units): output pixel
/// `x` holds `f(W(x; p))`. Samples falling outside are 0 and masked invalid.
pub fn warp_feature_map(f: &FeatureMap, p: &WarpParams) -> (FeatureMap, Vec<bool>) {
    let (c, h, w) = (f.channels(), f.height(), f.width());
    let taps = warp_taps(w, h, map_center(f), p);
    let mut data = vec![0.0f32; c * h * w];
    for ch in 0..c {
        let plane = f.channel(ch);
        let out = &mut data[ch * h * w..(ch + 1) * h * w];
        for (o, tap) in out.iter_mut().zip(&taps) {
            if let Some(t) = tap {
                *o = t.apply(plane) as f32;
            }
        }
    }
    let valid = taps.iter().map(Option::is_some).collect();
    (FeatureMap::new(c, h, w, data).expect("same shape"), valid)
}

struct Evaluation {
    taps: Vec<Option<BilinearTap>>,
    mse: f64,
    valid: usize,
}

fn evaluate(model: &TemplateModel, patch: &FeatureMap, p: &WarpParams) -> Result<Evaluation> {
    let (c, h, w) = (patch.channels(), patch.height(), patch.width());
    let taps = warp_taps(w, h, model.center, p);
    let valid = taps.iter().filter(|t| t.is_some()).count();
    let mut sse = 0.0;
    for ch in 0..c {
        let plane = patch.channel(ch);
        let tmpl = model.template.channel(ch);
        for (i, tap) in taps.iter().enumerate() {
            if let Some(t) = tap {
                let e = t.apply(plane) - tmpl[i] as f64;
                sse += e * e;
            }
        }
    }
    if !sse.is_finite() {
        return Err(Error::Numerical("non-finite alignment residual".into()));
    }
    let mse = if valid == 0 { 0.0 } else { sse / (valid * c) as f64 };
    Ok(Evaluation { taps, mse, valid })
}

/// Gauss–Newton/Levenberg inverse-compositional alignment of `patch` to the template.
///
/// `p0` and the returned parameters carry translations in patch pixels
/// (feature units × `feature_stride`); rotation and scale are unit-free.
/// Steps that raise the residual are rejected and the damping is increased.
pub fn align_lk(model: &TemplateModel, patch: &FeatureMap, p0: WarpParams, cfg: &AlignConfig) -> Result<AlignResult> {
    cfg.validate()?;
    if patch.shape() != model.template.shape() {
        return Err(Error::Shape(format!(
            "patch features {:?} do not match template {:?}",
            patch.shape(),
            model.template.shape()
        )));
    }
    if !p0.is_valid() {
        return Err(Error::InvalidInput("initial warp is not valid".into()));
    }
    let stride = cfg.feature_stride as f64;
    let (c, h, w) = (patch.channels(), patch.height(), patch.width());
    let hw = h * w;
    let min_valid = (hw / 8).max(4);

    let mut p = WarpParams {
        tx: p0.tx / stride,
        ty: p0.ty / stride,
        ..p0
    };
    let mut eval = evaluate(model, patch, &p)?;
    let mut trace = ResidualTrace::new();
    trace.push(eval.mse);
    let mean_diag = model.hessian.trace() / 4.0;
    let mut lambda = cfg.damping;
    let mut converged = false;
    let mut iterations = 0;

    while iterations < cfg.max_iterations {
        iterations += 1;
        if eval.valid < min_valid {
            return Err(Error::Numerical(format!(
                "only {} of {hw} samples remain inside the patch",
                eval.valid
            )));
        }
        let mut hess = Matrix4::zeros();
        let mut b = Vector4::zeros();
        for (i, tap) in eval.taps.iter().enumerate() {
            if tap.is_some() {
                hess += model.pixel_hessians[i];
            }
        }
        for ch in 0..c {
            let plane = patch.channel(ch);
            let tmpl = model.template.channel(ch);
            let rows = &model.sdi[ch * hw..(ch + 1) * hw];
            for (i, tap) in eval.taps.iter().enumerate() {
                if let Some(t) = tap {
                    // Error image F_P(W(x;p)) - F_T(x).
                    let e = t.apply(plane) - tmpl[i] as f64;
                    let j = &rows[i];
                    b[0] += j[0] * e;
                    b[1] += j[1] * e;
                    b[2] += j[2] * e;
                    b[3] += j[3] * e;
                }
            }
        }
        let system = hess + Matrix4::identity() * lambda;
        let dp = system
            .cholesky()
            .map(|ch| ch.solve(&b))
            .or_else(|| system.try_inverse().map(|inv| inv * b))
            .ok_or_else(|| Error::Numerical("singular alignment system".into()))?;
        if !dp.iter().all(|v| v.is_finite()) {
            return Err(Error::Numerical("non-finite alignment step".into()));
        }
        let step = dp.norm();
        let delta = WarpParams {
            tx: dp[0],
            ty: dp[1],
            theta: dp[2],
            scale: 1.0 + dp[3],
        };
        let candidate = delta.inverse().map(|inv| p.compose(&inv));
        let accepted = match candidate {
            Ok(cand) if cand.is_valid() => {
                let next = evaluate(model, patch, &cand)?;
                if next.valid >= min_valid && next.mse <= eval.mse {
                    p = cand;
                    eval = next;
                    trace.push(eval.mse);
                    true
                } else {
                    false
                }
            }
            _ => false,
        };
        if accepted {
            lambda = (lambda * 0.1).max(cfg.damping);
        } else {
            lambda = if lambda > 0.0 { lambda * 10.0 } else { 1e-4 * mean_diag };
        }
        if step < cfg.epsilon_dp {
            converged = true;
            break;
        }
    }

    Ok(AlignResult {
        params: WarpParams {
            tx: p.tx * stride,
            ty: p.ty * stride,
            ..p
        },
        iterations_used: iterations,
        final_residual: eval.mse,
        converged,
        residual_history: trace,
    })
}

#[cfg(test)]
pub(crate) mod testing {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Random smooth field: a sum of Gaussian blobs per channel, evaluated analytically.
    #[derive(Debug, Clone)]
    pub struct SmoothField {
        blobs: Vec<Vec<(f64, f64, f64, f64)>>,
    }

    impl SmoothField {
        pub fn random(seed: u64, channels: usize, extent: f64) -> Self {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let blobs = (0..channels)
                .map(|_| {
                    (0..12)
                        .map(|_| {
                            (
                                rng.random_range(-extent..extent),
                                rng.random_range(-extent..extent),
                                rng.random_range(2.0..4.0),
                                rng.random_range(-1.0..1.0),
                            )
                        })
                        .collect()
                })
                .collect();
            Self { blobs }
        }

        pub fn value(&self, c: usize, x: f64, y: f64) -> f64 {
            self.blobs[c]
                .iter()
                .map(|&(bx, by, r, a)| a * (-((x - bx).powi(2) + (y - by).powi(2)) / (2.0 * r * r)).exp())
                .sum()
        }

        /// Samples the field at `W(x; warp)` for every center-relative grid point.
        pub fn render(&self, w: usize, h: usize, warp: &WarpParams) -> FeatureMap {
            let c = self.blobs.len();
            let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
            let mut data = Vec::with_capacity(c * h * w);
            for ch in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        let q = warp.warp_point([x as f64 - cx, y as f64 - cy]);
                        data.push(self.value(ch, q[0], q[1]) as f32);
                    }
                }
            }
            FeatureMap::new(c, h, w, data).unwrap()
        }
    }

    /// Template/patch pair where the patch shows the template moved by `gt`,
    /// i.e. `F_P(W(x; gt)) = F_T(x)`.
    pub fn warped_pair(field: &SmoothField, w: usize, h: usize, gt: &WarpParams) -> (FeatureMap, FeatureMap) {
        let template = field.render(w, h, &WarpParams::IDENTITY);
        let patch = field.render(w, h, &gt.inverse().unwrap());
        (template, patch)
    }
}
