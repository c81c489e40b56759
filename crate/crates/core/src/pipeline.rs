//! Per-frame orchestration: coarse match, occlusion gate, feature alignment
//! with learned refinement, and motion prediction while the target is hidden.
//! Also the IBVS control step and a closed-loop servo simulation.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::align::{align_lk, precompute_sdi, warp_feature_map, AlignConfig, TemplateModel};
use crate::bench::{SceneRenderer, SyntheticScenario};
use crate::error::{Error, Result};
use crate::features::{ConvStackSpec, FeatureExtractor, FeatureMap, TensorStore};
use crate::gate::{self, GateConfig, OcclusionReport, Route};
use crate::img::{crop_patch, GrayFrame, Patch, WarpParams};
use crate::locate::{coarse_center, NccMatcher};
use crate::predict::{GruPredictor, MotionHistory, MIN_HISTORY};
use crate::residual::{apply_residual, ResidualNet};

/// Shipped GRU motion weights.
pub const SHIPPED_GRU: &[u8] = include_bytes!("../weights/gru.nts");
/// Shipped residual regressor weights for 128-channel features.
pub const SHIPPED_RESIDUAL: &[u8] = include_bytes!("../weights/residual.nts");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrackerConfig {
    pub patch_width: usize,
    pub patch_height: usize,
    pub op_threshold: f64,
    pub ncc_threshold: f64,
    pub tau_pix: f64,
    pub align: AlignConfig,
    /// Motion history length.
    pub k: usize,
    /// Aligned frames enter the motion history only below this occlusion percentage.
    pub history_op_threshold: f64,
    /// Pixels per frame mapped to one unit of GRU input.
    pub motion_scale: f64,
    /// Largest plausible center motion between consecutive outputs, in pixels.
    pub max_jump: f64,
    pub clamp_jumps: bool,
    pub use_residual: bool,
    /// Frames are resampled by this factor before tracking.
    pub prescale: f64,
    pub feature_weights: Option<PathBuf>,
    pub residual_weights: Option<PathBuf>,
    pub gru_weights: Option<PathBuf>,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        let gate = GateConfig::default();
        Self {
            patch_width: 64,
            patch_height: 64,
            op_threshold: gate.op_threshold,
            ncc_threshold: gate.ncc_threshold,
            tau_pix: gate.tau_pix,
            align: AlignConfig::default(),
            k: 10,
            history_op_threshold: 5.0,
            motion_scale: 10.0,
            max_jump: 20.0,
            clamp_jumps: true,
            use_residual: true,
            prescale: 1.0,
            feature_weights: None,
            residual_weights: None,
            gru_weights: None,
        }
    }
}

impl TrackerConfig {
    pub fn gate(&self) -> GateConfig {
        GateConfig {
            op_threshold: self.op_threshold,
            ncc_threshold: self.ncc_threshold,
            tau_pix: self.tau_pix,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.patch_width < 16
            || self.patch_height < 16
            || !self.patch_width.is_multiple_of(4)
            || !self.patch_height.is_multiple_of(4)
        {
            return bad(format!(
                "patch {}x{} must be at least 16x16 and divisible by 4",
                self.patch_width, self.patch_height
            ));
        }
        if !(0.0..=100.0).contains(&self.op_threshold) {
            return bad(format!("op_threshold {} outside [0, 100]", self.op_threshold));
        }
        if !(-1.0..=1.0).contains(&self.ncc_threshold) {
            return bad(format!("ncc_threshold {} outside [-1, 1]", self.ncc_threshold));
        }
        if !(self.tau_pix >= 0.0 && self.tau_pix <= 255.0) {
            return bad(format!("tau_pix {} outside [0, 255]", self.tau_pix));
        }
        if !(0.0..=100.0).contains(&self.history_op_threshold) {
            return bad(format!(
                "history_op_threshold {} outside [0, 100]",
                self.history_op_threshold
            ));
        }
        if self.k < MIN_HISTORY {
            return bad(format!("k must be at least {MIN_HISTORY}"));
        }
        if !(self.motion_scale > 0.0 && self.max_jump > 0.0 && self.prescale > 0.0 && self.prescale <= 4.0) {
            return bad("motion_scale and max_jump must be positive, prescale in (0, 4]".into());
        }
        self.align.validate()
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// Sets a dotted key such as `align.max_iterations`. The value is read as
    /// JSON when it parses and as a string otherwise.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let mut root = serde_json::to_value(&*self).map_err(|e| Error::Config(e.to_string()))?;
        let mut slot = &mut root;
        for part in key.split('.') {
            slot = slot
                .as_object_mut()
                .and_then(|m| m.get_mut(part))
                .ok_or_else(|| Error::Config(format!("unknown config key `{key}`")))?;
        }
        *slot = serde_json::from_str(value).unwrap_or_else(|_| serde_json::Value::String(value.into()));
        let cfg: Self = serde_json::from_value(root).map_err(|e| Error::Config(format!("{key}: {e}")))?;
        cfg.validate()?;
        *self = cfg;
        Ok(())
    }
}

/// Immutable weights shared by any number of trackers.
#[derive(Debug, Clone)]
pub struct TrackerWeights {
    pub extractor: FeatureExtractor,
    pub residual: Option<ResidualNet>,
    pub gru: GruPredictor,
}

impl TrackerWeights {
    /// Loads the configured weight files, falling back to the fixture feature
    /// weights and the shipped residual and GRU weights.
    pub fn load(cfg: &TrackerConfig) -> Result<Self> {
        let extractor = match &cfg.feature_weights {
            Some(p) => FeatureExtractor::new(&ConvStackSpec::vgg16_pool2(), &TensorStore::load(p)?)?,
            None => FeatureExtractor::fixture(),
        };
        let residual = if cfg.use_residual {
            let store = match &cfg.residual_weights {
                Some(p) => TensorStore::load(p)?,
                None => TensorStore::from_bytes(SHIPPED_RESIDUAL)?,
            };
            Some(ResidualNet::new(
                &store,
                extractor.output_channels(),
                cfg.patch_width as f64 / 2.0,
            )?)
        } else {
            None
        };
        let gru_store = match &cfg.gru_weights {
            Some(p) => TensorStore::load(p)?,
            None => TensorStore::from_bytes(SHIPPED_GRU)?,
        };
        Ok(Self {
            extractor,
            residual,
            gru: GruPredictor::new(&gru_store, cfg.motion_scale)?,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum PoseSource {
    Aligned,
    Predicted,
    Held,
}

impl PoseSource {
    pub fn as_str(&self) -> &'static str {
        match self {
            PoseSource::Aligned => "ALIGNED",
            PoseSource::Predicted => "PREDICTED",
            PoseSource::Held => "HELD",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "ALIGNED" => Some(PoseSource::Aligned),
            "PREDICTED" => Some(PoseSource::Predicted),
            "HELD" => Some(PoseSource::Held),
            _ => None,
        }
    }
}

/// One tracker output. `params.tx, params.ty` is the frame position of the
/// template center; rotation and scale are relative to the template.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoseOutput {
    pub frame_index: u64,
    pub params: WarpParams,
    pub source: PoseSource,
    pub op_percent: f64,
    pub ncc_score: f64,
    pub elapsed_ms: f64,
}

impl PoseOutput {
    pub fn center(&self) -> [f64; 2] {
        [self.params.tx, self.params.ty]
    }
}

pub const POSE_CSV_HEADER: &str = "frame,tx,ty,theta,scale,source,op_percent,ncc,elapsed_ms";

/// Pose stream CSV; `deterministic` writes zero timings so reruns are byte-identical.
pub fn pose_csv(outputs: &[PoseOutput], deterministic: bool) -> String {
    let mut s = String::from(POSE_CSV_HEADER);
    s.push('\n');
    for o in outputs {
        let p = &o.params;
        let elapsed = if deterministic { 0.0 } else { o.elapsed_ms };
        writeln!(
            s,
            "{},{},{},{},{},{},{},{},{}",
            o.frame_index,
            p.tx,
            p.ty,
            p.theta,
            p.scale,
            o.source.as_str(),
            o.op_percent,
            o.ncc_score,
            elapsed
        )
        .expect("string write");
    }
    s
}

pub fn parse_pose_csv(text: &str) -> Result<Vec<PoseOutput>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let row = i + 1;
        if i == 0 && line.trim() == POSE_CSV_HEADER {
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split(',').map(str::trim).collect();
        let bad = |what: &str| Error::Ingestion {
            row,
            reason: format!("bad {what} in {line:?}"),
        };
        if cols.len() != 9 {
            return Err(bad("column count"));
        }
        let num = |j: usize, what: &str| cols[j].parse::<f64>().map_err(|_| bad(what));
        out.push(PoseOutput {
            frame_index: cols[0].parse().map_err(|_| bad("frame"))?,
            params: WarpParams {
                tx: num(1, "tx")?,
                ty: num(2, "ty")?,
                theta: num(3, "theta")?,
                scale: num(4, "scale")?,
            },
            source: PoseSource::parse(cols[5]).ok_or_else(|| bad("source"))?,
            op_percent: num(6, "op_percent")?,
            ncc_score: num(7, "ncc")?,
            elapsed_ms: num(8, "elapsed_ms")?,
        });
    }
    Ok(out)
}

/// Maps between original and resampled frame coordinates.
#[derive(Debug, Clone, Copy)]
struct Prescale {
    factor: f64,
    /// Original pixels per resampled pixel, per axis.
    step: [f64; 2],
}

impl Prescale {
    fn new(factor: f64, w: usize, h: usize) -> Self {
        let rw = ((w as f64) * factor).round().max(1.0);
        let rh = ((h as f64) * factor).round().max(1.0);
        Self {
            factor,
            step: [
                (w as f64 - 1.0) / (rw - 1.0).max(1.0),
                (h as f64 - 1.0) / (rh - 1.0).max(1.0),
            ],
        }
    }

    fn is_identity(&self) -> bool {
        self.factor == 1.0
    }

    fn frame(&self, f: &GrayFrame) -> Result<GrayFrame> {
        if self.is_identity() {
            Ok(f.clone())
        } else {
            f.resized(self.factor)
        }
    }

    fn to_work(self, p: [f64; 2]) -> [f64; 2] {
        [p[0] / self.step[0], p[1] / self.step[1]]
    }

    fn to_frame(self, p: [f64; 2]) -> [f64; 2] {
        [p[0] * self.step[0], p[1] * self.step[1]]
    }
}

/// Tracking state for one target.
#[derive(Debug, Clone)]
pub struct Tracker {
    cfg: TrackerConfig,
    weights: Arc<TrackerWeights>,
    template: Patch,
    template_features: FeatureMap,
    model: TemplateModel,
    matcher: NccMatcher,
    prescale: Prescale,
    frame_size: [usize; 2],
    init_center: [f64; 2],
    current: WarpParams,
    history: MotionHistory,
    frame_index: u64,
    last_report: Option<OcclusionReport>,
}

/// Captures the template at `center` and prepares the alignment model.
pub fn init_tracker(
    frame: &GrayFrame,
    center: [f64; 2],
    cfg: &TrackerConfig,
    weights: Arc<TrackerWeights>,
) -> Result<Tracker> {
    cfg.validate()?;
    if cfg.align.feature_stride != weights.extractor.stride() {
        return Err(Error::Config(format!(
            "align.feature_stride {} does not match the feature stride {}",
            cfg.align.feature_stride,
            weights.extractor.stride()
        )));
    }
    let prescale = Prescale::new(cfg.prescale, frame.width(), frame.height());
    let work = prescale.frame(frame)?;
    let (pw, ph) = (cfg.patch_width, cfg.patch_height);
    let template = crop_patch(&work, prescale.to_work(center), pw, ph)?;
    if template.valid_count() < pw * ph {
        return Err(Error::PatchOutOfFrame {
            outside: pw * ph - template.valid_count(),
            total: pw * ph,
        });
    }
    let matcher = NccMatcher::new(template.pixels(), work.width(), work.height())?;
    let template_features = weights.extractor.extract(&template)?;
    let model = precompute_sdi(&template_features)?;
    Ok(Tracker {
        cfg: cfg.clone(),
        template,
        template_features,
        model,
        matcher,
        prescale,
        frame_size: [frame.width(), frame.height()],
        init_center: center,
        current: WarpParams::translation(center[0], center[1]),
        history: MotionHistory::new(cfg.k),
        frame_index: 0,
        last_report: None,
        weights,
    })
}

impl Tracker {
    pub fn config(&self) -> &TrackerConfig {
        &self.cfg
    }

    pub fn template(&self) -> &Patch {
        &self.template
    }

    pub fn template_features(&self) -> &FeatureMap {
        &self.template_features
    }

    pub fn history(&self) -> &MotionHistory {
        &self.history
    }

    pub fn current(&self) -> WarpParams {
        self.current
    }

    pub fn frame_index(&self) -> u64 {
        self.frame_index
    }

    pub fn last_report(&self) -> Option<&OcclusionReport> {
        self.last_report.as_ref()
    }

    /// Processes the next frame. Failures inside the alignment branch fall
    /// back to prediction; only a frame-size mismatch is an error.
    pub fn track(&mut self, frame: &GrayFrame) -> Result<PoseOutput> {
        let start = Instant::now();
        if [frame.width(), frame.height()] != self.frame_size {
            return Err(Error::InvalidInput(format!(
                "frame is {}x{}, tracker expects {}x{}",
                frame.width(),
                frame.height(),
                self.frame_size[0],
                self.frame_size[1]
            )));
        }
        let work = self.prescale.frame(frame)?;
        let coarse = coarse_center(
            &self.matcher.correlate(&work)?,
            [self.cfg.patch_width, self.cfg.patch_height],
        );
        let (pw, ph) = (self.cfg.patch_width, self.cfg.patch_height);

        let mut op_percent = 100.0;
        let mut aligned = None;
        match crop_patch(&work, coarse.center, pw, ph) {
            Ok(patch) => match gate::evaluate(&patch, &self.template, coarse.score, &self.cfg.gate()) {
                Ok(decision) => {
                    op_percent = decision.report.op_percent;
                    self.last_report = Some(decision.report);
                    if decision.route == Route::Align {
                        match self.refine(&patch) {
                            Ok(p) => aligned = Some(p),
                            Err(e) => log::debug!("frame {}: alignment failed: {e}", self.frame_index),
                        }
                    }
                }
                Err(e) => log::debug!("frame {}: gate failed: {e}", self.frame_index),
            },
            Err(e) => log::debug!("frame {}: coarse patch rejected: {e}", self.frame_index),
        }

        let previous = [self.current.tx, self.current.ty];
        let (center, theta, scale, source) = match aligned {
            Some(p) => {
                let work_center = [coarse.center[0] + p.tx, coarse.center[1] + p.ty];
                (
                    self.prescale.to_frame(work_center),
                    p.theta,
                    p.scale,
                    PoseSource::Aligned,
                )
            }
            None => match self.weights.gru.predict_at(&self.history, self.frame_index) {
                Ok(d) => (
                    [self.init_center[0] + d[0], self.init_center[1] + d[1]],
                    self.current.theta,
                    self.current.scale,
                    PoseSource::Predicted,
                ),
                Err(_) => (previous, self.current.theta, self.current.scale, PoseSource::Held),
            },
        };
        let (center, clamped) = self.clamp_jump(previous, center);
        if source == PoseSource::Aligned && !clamped && op_percent < self.cfg.history_op_threshold {
            let rel = [center[0] - self.init_center[0], center[1] - self.init_center[1]];
            self.history.push(self.frame_index, rel)?;
        }
        self.current = WarpParams {
            tx: center[0],
            ty: center[1],
            theta,
            scale,
        };
        let out = PoseOutput {
            frame_index: self.frame_index,
            params: self.current,
            source,
            op_percent,
            ncc_score: coarse.score,
            elapsed_ms: start.elapsed().as_secs_f64() * 1e3,
        };
        self.frame_index += 1;
        Ok(out)
    }

    /// Feature-space LK from the identity at the coarse center, then the
    /// learned correction. Translation is in working-frame pixels.
    fn refine(&self, patch: &Patch) -> Result<WarpParams> {
        let fp = self.weights.extractor.extract(patch)?;
        let lk = align_lk(&self.model, &fp, WarpParams::IDENTITY, &self.cfg.align)?;
        let mut p = lk.params;
        if let Some(net) = self.weights.residual.as_ref().filter(|_| self.cfg.use_residual) {
            let stride = self.cfg.align.feature_stride as f64;
            let (warped, _) = warp_feature_map(
                &fp,
                &WarpParams {
                    tx: p.tx / stride,
                    ty: p.ty / stride,
                    ..p
                },
            );
            p = apply_residual(&p, &net.forward(&self.template_features, &warped, &p)?)?;
        }
        let limit = self.cfg.patch_width.min(self.cfg.patch_height) as f64 / 2.0;
        if !p.is_valid() || p.tx.hypot(p.ty) > limit {
            return Err(Error::Numerical(format!("alignment left the patch: {p:?}")));
        }
        Ok(p)
    }

    fn clamp_jump(&self, previous: [f64; 2], center: [f64; 2]) -> ([f64; 2], bool) {
        let d = [center[0] - previous[0], center[1] - previous[1]];
        let n = d[0].hypot(d[1]);
        if !self.cfg.clamp_jumps || n <= self.cfg.max_jump || self.frame_index == 0 {
            return (center, false);
        }
        log::warn!(
            "frame {}: center jumped {n:.1} px, clamped to {} px",
            self.frame_index,
            self.cfg.max_jump
        );
        let k = self.cfg.max_jump / n;
        ([previous[0] + d[0] * k, previous[1] + d[1] * k], true)
    }
}

/// Runs a tracker over a sequence whose first frame holds the template.
pub fn track_sequence(
    frames: &[GrayFrame],
    center: [f64; 2],
    cfg: &TrackerConfig,
    weights: Arc<TrackerWeights>,
) -> Result<Vec<PoseOutput>> {
    let first = frames
        .first()
        .ok_or_else(|| Error::InvalidInput("empty sequence".into()))?;
    let mut tracker = init_tracker(first, center, cfg, weights)?;
    frames.iter().map(|f| tracker.track(f)).collect()
}

/// Intensity-only inverse-compositional LK seeded from the previous center,
/// with no coarse match, gate or prediction.
#[derive(Debug, Clone)]
pub struct BaselineLk {
    model: TemplateModel,
    align: AlignConfig,
    patch: [usize; 2],
    center: [f64; 2],
    frame_index: u64,
}

impl BaselineLk {
    pub fn new(frame: &GrayFrame, center: [f64; 2], cfg: &TrackerConfig) -> Result<Self> {
        cfg.validate()?;
        let [pw, ph] = [cfg.patch_width, cfg.patch_height];
        let template = crop_patch(frame, center, pw, ph)?;
        Ok(Self {
            model: precompute_sdi(&FeatureMap::from_patch(&template, 1.0 / 255.0))?,
            align: AlignConfig {
                feature_stride: 1,
                ..cfg.align
            },
            patch: [pw, ph],
            center,
            frame_index: 0,
        })
    }

    pub fn track(&mut self, frame: &GrayFrame) -> PoseOutput {
        let start = Instant::now();
        let result = crop_patch(frame, self.center, self.patch[0], self.patch[1]).and_then(|patch| {
            align_lk(
                &self.model,
                &FeatureMap::from_patch(&patch, 1.0 / 255.0),
                WarpParams::IDENTITY,
                &self.align,
            )
        });
        let (params, source) = match result {
            Ok(r) => {
                self.center = [self.center[0] + r.params.tx, self.center[1] + r.params.ty];
                (r.params, PoseSource::Aligned)
            }
            Err(e) => {
                log::debug!("baseline frame {}: {e}", self.frame_index);
                (WarpParams::IDENTITY, PoseSource::Held)
            }
        };
        let out = PoseOutput {
            frame_index: self.frame_index,
            params: WarpParams {
                tx: self.center[0],
                ty: self.center[1],
                ..params
            },
            source,
            op_percent: f64::NAN,
            ncc_score: f64::NAN,
            elapsed_ms: start.elapsed().as_secs_f64() * 1e3,
        };
        self.frame_index += 1;
        out
    }
}

pub fn baseline_lk_track(frames: &[GrayFrame], center: [f64; 2], cfg: &TrackerConfig) -> Result<Vec<PoseOutput>> {
    let first = frames
        .first()
        .ok_or_else(|| Error::InvalidInput("empty sequence".into()))?;
    let mut lk = BaselineLk::new(first, center, cfg)?;
    Ok(frames.iter().map(|f| lk.track(f)).collect())
}

/// Singular values below this are treated as zero in the pseudoinverse.
pub const PINV_CUTOFF: f64 = 1e-8;

/// Pseudoinverse from the eigen-decomposition of `LᵀL`.
///
/// Squaring the matrix leaves zero singular values near `√ε · σ_max`, so the
/// cutoff also has a relative floor.
pub fn pinv(l: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let ltl = l.transpose() * l;
    let eig = SymmetricEigen::new(ltl);
    let sigma_max = eig.eigenvalues.iter().fold(0.0f64, |m, v| m.max(*v)).sqrt();
    let cutoff = PINV_CUTOFF.max(sigma_max * 1e-7);
    let mut inv = DMatrix::zeros(l.ncols(), l.ncols());
    let mut rank = 0;
    for (i, &ev) in eig.eigenvalues.iter().enumerate() {
        if ev.max(0.0).sqrt() >= cutoff {
            let v = eig.eigenvectors.column(i);
            inv += (v * v.transpose()) / ev;
            rank += 1;
        }
    }
    if rank == 0 {
        return Err(Error::Uncontrollable { cutoff: PINV_CUTOFF });
    }
    Ok(inv * l.transpose())
}

/// `v = −λ · L⁺ · e`.
pub fn ibvs_step(error: &DVector<f64>, l: &DMatrix<f64>, lambda: f64) -> Result<DVector<f64>> {
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(Error::InvalidInput(format!("gain {lambda} must be positive")));
    }
    if l.nrows() != error.len() {
        return Err(Error::Shape(format!(
            "interaction matrix has {} rows, error has {} entries",
            l.nrows(),
            error.len()
        )));
    }
    Ok(pinv(l)? * error * -lambda)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ServoConfig {
    pub lambda: f64,
    pub dt: f64,
    pub steps: usize,
    /// Initial pose error `(tx, ty, θ, s − 1)`.
    pub initial_error: [f64; 4],
    /// Row-major 4×4 interaction matrix.
    pub interaction: [[f64; 4]; 4],
    /// Reference center; the frame center when absent.
    pub reference: Option<[f64; 2]>,
    /// Steps during which the occluder covers the target.
    pub occlusion_start: Option<usize>,
    pub occlusion_steps: usize,
    pub occlusion_coverage: f64,
    /// A run fails once the error norm exceeds this multiple of the initial norm.
    pub divergence_factor: f64,
    pub scene: SyntheticScenario,
}

impl Default for ServoConfig {
    fn default() -> Self {
        let mut identity = [[0.0; 4]; 4];
        (0..4).for_each(|i| identity[i][i] = 1.0);
        Self {
            lambda: 0.5,
            dt: 1.0,
            steps: 15,
            initial_error: [16.0, -12.0, 0.04, 0.03],
            interaction: identity,
            reference: None,
            occlusion_start: None,
            occlusion_steps: 0,
            occlusion_coverage: 0.9,
            divergence_factor: 10.0,
            scene: SyntheticScenario {
                occluder: Some(crate::bench::OccluderScript {
                    start_frame: 0,
                    duration: 0,
                    coverage: 0.0,
                    ramp_frames: 0,
                    seed: 4,
                }),
                ..SyntheticScenario::default()
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ServoStep {
    pub step: usize,
    /// True pose error before the command.
    pub error: [f64; 4],
    pub error_norm: f64,
    /// Pose error as measured by the tracker.
    pub measured: [f64; 4],
    pub velocity: [f64; 4],
    pub source: PoseSource,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServoLog {
    pub steps: Vec<ServoStep>,
    pub final_error: [f64; 4],
    pub final_norm: f64,
    pub diverged: bool,
}

impl ServoLog {
    pub fn to_csv(&self) -> String {
        let mut s = String::from(
            "step,e_tx,e_ty,e_theta,e_scale,norm,m_tx,m_ty,m_theta,m_scale,v_tx,v_ty,v_theta,v_scale,source\n",
        );
        for st in &self.steps {
            let cols: Vec<String> = st
                .error
                .iter()
                .chain(std::iter::once(&st.error_norm))
                .chain(&st.measured)
                .chain(&st.velocity)
                .map(f64::to_string)
                .collect();
            writeln!(s, "{},{},{}", st.step, cols.join(","), st.source.as_str()).expect("string write");
        }
        s
    }
}

fn norm4(e: &[f64; 4]) -> f64 {
    e.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Closed loop: render the target at the current pose error, measure it
/// with the tracker, command `v = −λ L⁺ e`, and integrate `e ← e + L v dt`.
pub fn servo_sim(cfg: &ServoConfig, tracker_cfg: &TrackerConfig, weights: Arc<TrackerWeights>) -> Result<ServoLog> {
    let renderer = SceneRenderer::new(&cfg.scene)?;
    let reference = cfg
        .reference
        .unwrap_or([(cfg.scene.width / 2) as f64, (cfg.scene.height / 2) as f64]);
    let l = DMatrix::from_fn(4, 4, |r, c| cfg.interaction[r][c]);
    let pose = |e: &[f64; 4]| ([reference[0] + e[0], reference[1] + e[1]], e[2], 1.0 + e[3]);
    let tracker_cfg = TrackerConfig {
        clamp_jumps: false,
        ..tracker_cfg.clone()
    };
    let reference_frame = renderer.render_frame(reference, 0.0, 1.0, 0.0)?;
    let mut tracker = init_tracker(&reference_frame, reference, &tracker_cfg, weights)?;
    let mut e = cfg.initial_error;
    let limit = cfg.divergence_factor * norm4(&e).max(1e-12);
    let mut steps = Vec::with_capacity(cfg.steps);
    let mut diverged = false;
    for step in 0..cfg.steps {
        let occluded = cfg
            .occlusion_start
            .is_some_and(|s| step >= s && step < s + cfg.occlusion_steps);
        let coverage = if occluded { cfg.occlusion_coverage } else { 0.0 };
        let (center, theta, scale) = pose(&e);
        let frame = renderer.render_frame(center, theta, scale, coverage)?;
        let out = tracker.track(&frame)?;
        let p = out.params;
        let measured = [p.tx - reference[0], p.ty - reference[1], p.theta, p.scale - 1.0];
        let v = ibvs_step(&DVector::from_row_slice(&measured), &l, cfg.lambda)?;
        let lv = &l * &v;
        steps.push(ServoStep {
            step,
            error: e,
            error_norm: norm4(&e),
            measured,
            velocity: [v[0], v[1], v[2], v[3]],
            source: out.source,
        });
        for i in 0..4 {
            e[i] += lv[i] * cfg.dt;
        }
        if !(norm4(&e) <= limit) {
            log::warn!("servo diverged at step {step}: error norm {:.3}", norm4(&e));
            diverged = true;
            break;
        }
    }
    Ok(ServoLog {
        steps,
        final_norm: norm4(&e),
        final_error: e,
        diverged,
    })
}
