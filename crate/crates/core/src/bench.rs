//! Synthetic sequences with exact ground truth, annotation ingestion,
//! translation-error metrics, and training-set generation.

use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::align::{align_lk, precompute_sdi, warp_feature_map, AlignConfig};
use crate::error::{Error, Result};
use crate::features::FeatureExtractor;
use crate::img::{load_frame, save_png, GrayFrame, Patch, WarpParams};
use crate::nn::seeded_rng;
use crate::residual::{ResidualSample, WarpResidual};

/// Constant-rate motion held for `frames` frames.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MotionSegment {
    pub frames: usize,
    /// Pixels per frame.
    pub velocity: [f64; 2],
    /// Radians per frame.
    #[serde(default)]
    pub angular_velocity: f64,
    /// Multiplicative scale change per frame.
    #[serde(default = "one")]
    pub scale_rate: f64,
}

fn one() -> f64 {
    1.0
}

/// A full-height textured band sliding in from the left until it covers
/// `coverage` of the target's columns, held for `duration` frames.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OccluderScript {
    pub start_frame: usize,
    pub duration: usize,
    pub coverage: f64,
    /// Frames spent sliding in before `start_frame` and out after the window.
    pub ramp_frames: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticScenario {
    pub width: usize,
    pub height: usize,
    pub frames: usize,
    /// Side of the square target texture.
    pub target_size: usize,
    pub start_center: [f64; 2],
    pub target_seed: u64,
    pub background_seed: u64,
    pub noise_seed: u64,
    /// Gaussian blur applied to the seeded noise textures.
    pub blur_sigma: f64,
    /// Additive Gaussian pixel noise before 8-bit quantization.
    pub noise_sigma: f64,
    pub motion: Vec<MotionSegment>,
    pub occluder: Option<OccluderScript>,
}

impl Default for SyntheticScenario {
    /// 300 frames at 320×240; the occlusion window sits inside a long vertical
    /// constant-velocity segment.
    fn default() -> Self {
        let seg = |frames, vx, vy| MotionSegment {
            frames,
            velocity: [vx, vy],
            angular_velocity: 0.0,
            scale_rate: 1.0,
        };
        Self {
            width: 320,
            height: 240,
            frames: 300,
            target_size: 80,
            start_center: [90.0, 60.0],
            target_seed: 1,
            background_seed: 2,
            noise_seed: 3,
            blur_sigma: 2.0,
            noise_sigma: 0.0,
            motion: vec![
                seg(60, 1.5, 0.0),
                seg(30, -1.0, 1.0),
                seg(90, 0.0, 1.0),
                seg(60, 1.5, -0.5),
                seg(60, -1.5, -1.0),
            ],
            occluder: Some(OccluderScript {
                start_frame: 130,
                duration: 30,
                coverage: 0.9,
                ramp_frames: 4,
                seed: 4,
            }),
        }
    }
}

impl SyntheticScenario {
    /// Per-frame ground-truth pose; frame 0 is the start pose and each frame
    /// applies the rates of the segment it belongs to.
    pub fn poses(&self) -> Result<Vec<(f64, f64, f64, f64)>> {
        let total: usize = self.motion.iter().map(|s| s.frames).sum();
        if total + 1 < self.frames && !self.motion.is_empty() {
            log::debug!("motion script shorter than the sequence; the last pose is held");
        }
        let mut rates = self.motion.iter().flat_map(|s| std::iter::repeat_n(*s, s.frames));
        let (mut x, mut y, mut th, mut s) = (self.start_center[0], self.start_center[1], 0.0, 1.0);
        let mut out = Vec::with_capacity(self.frames);
        for _ in 0..self.frames {
            out.push((x, y, th, s));
            if let Some(seg) = rates.next() {
                x += seg.velocity[0];
                y += seg.velocity[1];
                th += seg.angular_velocity;
                s *= seg.scale_rate;
            }
        }
        Ok(out)
    }

    fn validate(&self) -> Result<()> {
        if self.width < 16 || self.height < 16 || self.frames == 0 || self.target_size < 8 {
            return Err(Error::Scenario {
                frame: 0,
                reason: "frame, target and sequence sizes are too small".into(),
            });
        }
        if let Some(o) = &self.occluder {
            if !(0.0..=1.0).contains(&o.coverage) {
                return Err(Error::Scenario {
                    frame: o.start_frame,
                    reason: format!("occluder coverage {} outside [0, 1]", o.coverage),
                });
            }
        }
        if !(self.blur_sigma >= 0.0 && self.noise_sigma >= 0.0) {
            return Err(Error::Scenario {
                frame: 0,
                reason: "blur and noise sigmas must be non-negative".into(),
            });
        }
        Ok(())
    }

    /// Occluder coverage fraction at frame `t` (0 outside the window and ramps).
    pub fn occluder_coverage(&self, t: usize) -> f64 {
        let Some(o) = &self.occluder else { return 0.0 };
        let end = o.start_frame + o.duration;
        let r = o.ramp_frames;
        if t >= o.start_frame && t < end {
            o.coverage
        } else if t < o.start_frame && t + r >= o.start_frame {
            let k = r - (o.start_frame - t) + 1;
            o.coverage * k as f64 / (r + 1) as f64
        } else if t >= end && t < end + r {
            let k = end + r - t;
            o.coverage * k as f64 / (r + 1) as f64
        } else {
            0.0
        }
    }
}

/// Per-frame ground truth; `occ` is `None` when unknown.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GtEntry {
    pub center: [f64; 2],
    pub theta: f64,
    pub scale: f64,
    pub occ: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct GroundTruthTrack {
    pub entries: Vec<GtEntry>,
}

impl GroundTruthTrack {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn centers(&self) -> Vec<[f64; 2]> {
        self.entries.iter().map(|e| e.center).collect()
    }

    pub fn occlusion(&self) -> Vec<Option<f64>> {
        self.entries.iter().map(|e| e.occ).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSequence {
    pub frames: Vec<GrayFrame>,
    pub truth: GroundTruthTrack,
}

/// Seeded Gaussian-blurred noise, rescaled to the given mean and standard deviation.
pub fn smooth_texture(width: usize, height: usize, sigma: f64, seed: u64, mean: f64, std: f64) -> Vec<f64> {
    let mut rng = seeded_rng(seed);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let noise: Vec<f64> = (0..width * height).map(|_| normal.sample(&mut rng)).collect();
    let blurred = gaussian_blur(&noise, width, height, sigma);
    let n = blurred.len() as f64;
    let m = blurred.iter().sum::<f64>() / n;
    let sd = (blurred.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n)
        .sqrt()
        .max(1e-12);
    blurred
        .iter()
        .map(|v| (mean + std * (v - m) / sd).clamp(0.0, 255.0))
        .collect()
}

/// Separable Gaussian blur with mirrored borders; `sigma = 0` is the identity.
pub fn gaussian_blur(data: &[f64], width: usize, height: usize, sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return data.to_vec();
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let norm: f64 = kernel.iter().sum();
    let mirror = |i: isize, n: usize| -> usize {
        let n = n as isize;
        let mut i = i;
        while i < 0 || i >= n {
            i = if i < 0 { -i - 1 } else { 2 * n - i - 1 };
        }
        i as usize
    };
    let mut tmp = vec![0.0; data.len()];
    for y in 0..height {
        for x in 0..width {
            tmp[y * width + x] = kernel
                .iter()
                .enumerate()
                .map(|(k, w)| w * data[y * width + mirror(x as isize + k as isize - radius, width)])
                .sum::<f64>()
                / norm;
        }
    }
    let mut out = vec![0.0; data.len()];
    for y in 0..height {
        for x in 0..width {
            out[y * width + x] = kernel
                .iter()
                .enumerate()
                .map(|(k, w)| w * tmp[mirror(y as isize + k as isize - radius, height) * width + x])
                .sum::<f64>()
                / norm;
        }
    }
    out
}

/// Bilinear lookup with coordinates clamped into the texture.
fn sample_clamped(tex: &[f64], size: usize, u: f64, v: f64) -> f64 {
    let max = (size - 1) as f64;
    let (u, v) = (u.clamp(0.0, max), v.clamp(0.0, max));
    let (x0, y0) = (u.floor() as usize, v.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(size - 1), (y0 + 1).min(size - 1));
    let (fx, fy) = (u - x0 as f64, v - y0 as f64);
    let a = tex[y0 * size + x0] * (1.0 - fx) + tex[y0 * size + x1] * fx;
    let b = tex[y1 * size + x0] * (1.0 - fx) + tex[y1 * size + x1] * fx;
    a * (1.0 - fy) + b * fy
}

/// Seeded textures of a scenario, ready to render frames at arbitrary poses.
#[derive(Debug, Clone)]
pub struct SceneRenderer {
    width: usize,
    height: usize,
    size: usize,
    target: Vec<f64>,
    background: Vec<f64>,
    occluder: Option<Vec<f64>>,
}

/// One rendered frame before noise and quantization.
#[derive(Debug, Clone)]
pub struct RenderedFrame {
    pub data: Vec<f64>,
    /// Exact fraction of target pixels under the occluder.
    pub occ: f64,
}

impl SceneRenderer {
    pub fn new(scn: &SyntheticScenario) -> Result<Self> {
        scn.validate()?;
        let (w, h, size) = (scn.width, scn.height, scn.target_size);
        Ok(Self {
            width: w,
            height: h,
            size,
            target: smooth_texture(size, size, scn.blur_sigma, scn.target_seed, 128.0, 45.0),
            background: smooth_texture(w, h, scn.blur_sigma, scn.background_seed, 110.0, 35.0),
            occluder: scn
                .occluder
                .map(|o| smooth_texture(w, h, scn.blur_sigma, o.seed, 45.0, 15.0)),
        })
    }

    /// Pixel `(x, y)` belongs to the target when its inverse-warped texture
    /// coordinate lies in `[-0.5, S - 0.5)²`. `frame` only labels errors.
    pub fn render(
        &self,
        center: [f64; 2],
        theta: f64,
        scale: f64,
        coverage: f64,
        frame: usize,
    ) -> Result<RenderedFrame> {
        let (w, h, size) = (self.width, self.height, self.size);
        let [cx, cy] = center;
        let inv = WarpParams::new(0.0, 0.0, theta, scale)
            .and_then(|p| p.inverse())
            .map_err(|e| Error::Scenario {
                frame,
                reason: e.to_string(),
            })?;
        let half = (size as f64 - 1.0) / 2.0;
        let corner = scale * half * std::f64::consts::SQRT_2 + 1.0;
        if cx - corner < 0.0 || cy - corner < 0.0 || cx + corner > w as f64 || cy + corner > h as f64 {
            return Err(Error::Scenario {
                frame,
                reason: format!("target at ({cx:.2}, {cy:.2}) leaves the {w}x{h} frame"),
            });
        }
        let mut mask = vec![false; w * h];
        let mut data = self.background.clone();
        let (mut min_x, mut max_x) = (usize::MAX, 0usize);
        let mut target_px = 0usize;
        for y in 0..h {
            for x in 0..w {
                let q = inv.warp_point([x as f64 - cx, y as f64 - cy]);
                let (u, v) = (q[0] + half, q[1] + half);
                if u >= -0.5 && u < size as f64 - 0.5 && v >= -0.5 && v < size as f64 - 0.5 {
                    mask[y * w + x] = true;
                    data[y * w + x] = sample_clamped(&self.target, size, u, v);
                    min_x = min_x.min(x);
                    max_x = max_x.max(x);
                    target_px += 1;
                }
            }
        }
        if target_px == 0 {
            return Err(Error::Scenario {
                frame,
                reason: "target covers no pixels".into(),
            });
        }
        let mut covered = 0usize;
        if let (Some(tex), true) = (&self.occluder, coverage > 0.0) {
            let cols = max_x - min_x + 1;
            let edge = min_x + (coverage * cols as f64).round() as usize;
            for y in 0..h {
                for x in 0..edge.min(w) {
                    data[y * w + x] = tex[y * w + x];
                    if mask[y * w + x] {
                        covered += 1;
                    }
                }
            }
        }
        Ok(RenderedFrame {
            data,
            occ: covered as f64 / target_px as f64,
        })
    }

    /// Renders and quantizes to 8-bit levels without noise.
    pub fn render_frame(&self, center: [f64; 2], theta: f64, scale: f64, coverage: f64) -> Result<GrayFrame> {
        let r = self.render(center, theta, scale, coverage, 0)?;
        quantize(self.width, self.height, r.data)
    }
}

fn quantize(w: usize, h: usize, mut data: Vec<f64>) -> Result<GrayFrame> {
    data.iter_mut().for_each(|v| *v = v.round().clamp(0.0, 255.0));
    GrayFrame::new(w, h, data)
}

/// Renders every frame of the scenario with its ground truth.
pub fn gen_synthetic(scn: &SyntheticScenario) -> Result<SyntheticSequence> {
    let renderer = SceneRenderer::new(scn)?;
    let noise = Normal::new(0.0, scn.noise_sigma.max(f64::MIN_POSITIVE)).expect("valid sigma");
    let mut noise_rng = seeded_rng(scn.noise_seed);
    let mut frames = Vec::with_capacity(scn.frames);
    let mut entries = Vec::with_capacity(scn.frames);
    for (t, (cx, cy, theta, scale)) in scn.poses()?.into_iter().enumerate() {
        let mut r = renderer.render([cx, cy], theta, scale, scn.occluder_coverage(t), t)?;
        if scn.noise_sigma > 0.0 {
            r.data.iter_mut().for_each(|v| *v += noise.sample(&mut noise_rng));
        }
        frames.push(quantize(scn.width, scn.height, r.data)?);
        entries.push(GtEntry {
            center: [cx, cy],
            theta,
            scale,
            occ: Some(r.occ),
        });
    }
    Ok(SyntheticSequence {
        frames,
        truth: GroundTruthTrack { entries },
    })
}

pub fn frame_file_name(index: usize) -> String {
    format!("frame_{index:05}.png")
}

/// Writes PNG frames, `annotations.csv`, `ground_truth.csv` and `scenario.json`.
pub fn export_sequence(seq: &SyntheticSequence, scn: &SyntheticScenario, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for (i, f) in seq.frames.iter().enumerate() {
        save_png(f, &dir.join(frame_file_name(i)))?;
    }
    std::fs::write(dir.join("annotations.csv"), annotations_csv(&seq.truth))?;
    std::fs::write(dir.join("ground_truth.csv"), ground_truth_csv(&seq.truth))?;
    let json = serde_json::to_string_pretty(scn).map_err(|e| Error::Config(e.to_string()))?;
    std::fs::write(dir.join("scenario.json"), json + "\n")?;
    Ok(())
}

pub fn annotations_csv(gt: &GroundTruthTrack) -> String {
    let mut s = String::from("frame_index,cx,cy,occ\n");
    for (i, e) in gt.entries.iter().enumerate() {
        match e.occ {
            Some(o) => writeln!(s, "{i},{},{},{o}", e.center[0], e.center[1]),
            None => writeln!(s, "{i},{},{},", e.center[0], e.center[1]),
        }
        .expect("string write");
    }
    s
}

pub fn ground_truth_csv(gt: &GroundTruthTrack) -> String {
    let mut s = String::from("frame,cx,cy,theta,scale,occ\n");
    for (i, e) in gt.entries.iter().enumerate() {
        let occ = e.occ.map(|o| o.to_string()).unwrap_or_default();
        writeln!(s, "{i},{},{},{},{},{occ}", e.center[0], e.center[1], e.theta, e.scale).expect("string write");
    }
    s
}

/// Parses `frame_index,cx,cy[,occ]` rows; a leading non-numeric row is a header.
pub fn parse_annotations(text: &str) -> Result<GroundTruthTrack> {
    let mut entries = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let row = i + 1;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split(',').map(str::trim).collect();
        if i == 0 && cols[0].parse::<f64>().is_err() {
            continue;
        }
        if cols.len() < 3 || cols.len() > 4 {
            return Err(Error::Ingestion {
                row,
                reason: format!("expected 3 or 4 columns, got {}", cols.len()),
            });
        }
        let index: usize = cols[0].parse().map_err(|_| Error::Ingestion {
            row,
            reason: format!("bad frame index {:?}", cols[0]),
        })?;
        if index != entries.len() {
            return Err(Error::Ingestion {
                row,
                reason: format!("frame index {} is missing (found {index})", entries.len()),
            });
        }
        let num = |s: &str, what: &str| -> Result<f64> {
            s.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| Error::Ingestion {
                    row,
                    reason: format!("bad {what} value {s:?}"),
                })
        };
        let occ = match cols.get(3) {
            Some(s) if !s.is_empty() => {
                let o = num(s, "occ")?;
                if !(0.0..=1.0).contains(&o) {
                    return Err(Error::Ingestion {
                        row,
                        reason: format!("occlusion fraction {o} outside [0, 1]"),
                    });
                }
                Some(o)
            }
            _ => None,
        };
        entries.push(GtEntry {
            center: [num(cols[1], "cx")?, num(cols[2], "cy")?],
            theta: 0.0,
            scale: 1.0,
            occ,
        });
    }
    Ok(GroundTruthTrack { entries })
}

/// Loads frames `frame_00000.png`, … matching the annotation rows.
pub fn ingest_annotations(frames_dir: &Path, csv_path: &Path) -> Result<(Vec<GrayFrame>, GroundTruthTrack)> {
    let gt = parse_annotations(&std::fs::read_to_string(csv_path)?)?;
    let mut frames = Vec::with_capacity(gt.len());
    for i in 0..gt.len() {
        let path = frames_dir.join(frame_file_name(i));
        let frame = load_frame(&path).map_err(|e| Error::Ingestion {
            row: i + 2,
            reason: format!("frame {i} ({}): {e}", path.display()),
        })?;
        frames.push(frame);
    }
    Ok((frames, gt))
}

/// Loads the numbered frames of a directory until the first missing index.
pub fn load_frame_dir(dir: &Path) -> Result<Vec<GrayFrame>> {
    let mut frames = Vec::new();
    loop {
        let path = dir.join(frame_file_name(frames.len()));
        if !path.exists() {
            break;
        }
        frames.push(load_frame(&path)?);
    }
    if frames.is_empty() {
        return Err(Error::InvalidInput(format!(
            "no {} in {}",
            frame_file_name(0),
            dir.display()
        )));
    }
    Ok(frames)
}

/// Per-frame Euclidean distance between estimated and true centers.
pub fn e_xy(est: &[[f64; 2]], gt: &GroundTruthTrack) -> Result<Vec<f64>> {
    if est.len() != gt.len() {
        return Err(Error::InvalidInput(format!(
            "estimate has {} frames, ground truth has {}",
            est.len(),
            gt.len()
        )));
    }
    Ok(est
        .iter()
        .zip(&gt.entries)
        .map(|(e, g)| (e[0] - g.center[0]).hypot(e[1] - g.center[1]))
        .collect())
}

pub const CDF_MAX_THRESHOLD: f64 = 50.0;
pub const CDF_STEP: f64 = 0.25;
pub const SUCCESS_THRESHOLD: f64 = 2.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub frames: usize,
    pub errors: Vec<f64>,
    pub occlusion: Vec<Option<f64>>,
    /// `(threshold, fraction of frames with error ≤ threshold)`.
    pub cdf: Vec<[f64; 2]>,
    /// `(occ, e_xy)` for frames with known occlusion.
    pub scatter: Vec<[f64; 2]>,
    /// Fraction of frames with error strictly below 2 px.
    pub success_at_2px: f64,
    pub mean_error: f64,
    pub max_error: f64,
    pub elapsed_ms: Option<Vec<f64>>,
    pub mean_elapsed_ms: Option<f64>,
}

pub fn make_report(errors: &[f64], occ: &[Option<f64>], timings: Option<&[f64]>) -> Result<MetricReport> {
    if errors.len() != occ.len() || timings.is_some_and(|t| t.len() != errors.len()) {
        return Err(Error::InvalidInput(
            "errors, occlusion and timings must have equal lengths".into(),
        ));
    }
    let n = errors.len();
    let steps = (CDF_MAX_THRESHOLD / CDF_STEP).round() as usize;
    let cdf = (0..=steps)
        .map(|i| {
            let th = i as f64 * CDF_STEP;
            let frac = if n == 0 {
                1.0
            } else {
                errors.iter().filter(|e| **e <= th).count() as f64 / n as f64
            };
            [th, frac]
        })
        .collect();
    let scatter = occ.iter().zip(errors).filter_map(|(o, e)| o.map(|o| [o, *e])).collect();
    let denom = n.max(1) as f64;
    Ok(MetricReport {
        frames: n,
        errors: errors.to_vec(),
        occlusion: occ.to_vec(),
        cdf,
        scatter,
        success_at_2px: errors.iter().filter(|e| **e < SUCCESS_THRESHOLD).count() as f64 / denom,
        mean_error: errors.iter().sum::<f64>() / denom,
        max_error: errors.iter().cloned().fold(0.0, f64::max),
        elapsed_ms: timings.map(<[f64]>::to_vec),
        mean_elapsed_ms: timings.map(|t| t.iter().sum::<f64>() / denom),
    })
}

fn opt_str(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Writes `report.json`, `cdf.csv`, `error_over_time.csv` and `scatter.csv`.
pub fn write_report(report: &MetricReport, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let json = serde_json::to_string_pretty(report).map_err(|e| Error::Config(e.to_string()))?;
    std::fs::write(dir.join("report.json"), json + "\n")?;
    let mut cdf = String::from("threshold,fraction\n");
    for [t, f] in &report.cdf {
        writeln!(cdf, "{t},{f}").expect("string write");
    }
    std::fs::write(dir.join("cdf.csv"), cdf)?;
    let mut eot = String::from("frame,e_xy,occ,elapsed_ms\n");
    for (i, e) in report.errors.iter().enumerate() {
        let t = report.elapsed_ms.as_ref().map(|t| t[i]);
        writeln!(eot, "{i},{e},{},{}", opt_str(report.occlusion[i]), opt_str(t)).expect("string write");
    }
    std::fs::write(dir.join("error_over_time.csv"), eot)?;
    let mut sc = String::from("occ,e_xy\n");
    for [o, e] in &report.scatter {
        writeln!(sc, "{o},{e}").expect("string write");
    }
    std::fs::write(dir.join("scatter.csv"), sc)?;
    Ok(())
}

pub fn read_report_json(dir: &Path) -> Result<MetricReport> {
    serde_json::from_str(&std::fs::read_to_string(dir.join("report.json"))?).map_err(|e| Error::Ingestion {
        row: e.line(),
        reason: e.to_string(),
    })
}

/// Rebuilds the report from `error_over_time.csv` alone.
pub fn read_report_csv(dir: &Path) -> Result<MetricReport> {
    let text = std::fs::read_to_string(dir.join("error_over_time.csv"))?;
    let (mut errors, mut occ, mut times) = (Vec::new(), Vec::new(), Vec::new());
    for (i, line) in text.lines().enumerate().skip(1) {
        let cols: Vec<&str> = line.split(',').collect();
        let bad = |what: &str| Error::Ingestion {
            row: i + 1,
            reason: format!("bad {what} in {line:?}"),
        };
        if cols.len() != 4 {
            return Err(bad("column count"));
        }
        let parse_opt = |s: &str, what: &str| -> Result<Option<f64>> {
            if s.is_empty() {
                Ok(None)
            } else {
                s.parse().map(Some).map_err(|_| bad(what))
            }
        };
        errors.push(cols[1].parse().map_err(|_| bad("e_xy"))?);
        occ.push(parse_opt(cols[2], "occ")?);
        times.push(parse_opt(cols[3], "elapsed_ms")?);
    }
    let timings: Option<Vec<f64>> = times.iter().copied().collect();
    let timings = if times.iter().all(Option::is_none) {
        None
    } else {
        timings
    };
    make_report(&errors, &occ, timings.as_deref())
}

/// Residual-set generation parameters; translations in patch pixels.
///
/// The defaults match the pipeline, where the coarse match already places
/// the patch within a pixel of the target.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ResidualSetConfig {
    pub count: usize,
    pub patch_size: usize,
    /// Share of samples with an identity ground-truth warp.
    pub zero_fraction: f64,
    pub max_translation: f64,
    pub max_rotation: f64,
    pub max_scale_deviation: f64,
    /// Iterations given to the LK stage that produces the estimate to correct.
    pub lk_iterations: usize,
    pub seed: u64,
}

impl Default for ResidualSetConfig {
    fn default() -> Self {
        Self {
            count: 384,
            patch_size: 64,
            zero_fraction: 0.2,
            max_translation: 1.0,
            max_rotation: 0.02,
            max_scale_deviation: 0.01,
            lk_iterations: 20,
            seed: 21,
        }
    }
}

/// GRU trajectory-set parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GruSetConfig {
    pub count: usize,
    pub length: usize,
    /// Per-step displacement cap in pixels.
    pub max_step: f64,
    pub seed: u64,
}

impl Default for GruSetConfig {
    fn default() -> Self {
        Self {
            count: 400,
            length: 40,
            max_step: 5.0,
            seed: 31,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainingSets {
    pub residual: Vec<ResidualSample>,
    pub gru: Vec<Vec<[f64; 2]>>,
}

/// Patch pixel `(i, j)` of a texture rendered under `warp` about the texture center.
fn render_patch(tex: &[f64], tex_size: usize, patch: usize, warp: &WarpParams) -> Result<Patch> {
    let inv = warp.inverse()?;
    let c = (tex_size / 2) as f64;
    let half = (patch / 2) as f64;
    let frame = GrayFrame::from_fn(patch, patch, |i, j| {
        let q = inv.warp_point([i as f64 - half, j as f64 - half]);
        sample_clamped(tex, tex_size, q[0] + c, q[1] + c)
    })?;
    Ok(Patch::from_frame(frame))
}

/// Feature pairs with a known warp, the LK estimate, and the correction
/// that maps the estimate onto the truth.
pub fn gen_residual_set(extractor: &FeatureExtractor, cfg: &ResidualSetConfig) -> Result<Vec<ResidualSample>> {
    let mut rng = seeded_rng(cfg.seed);
    let align = AlignConfig {
        max_iterations: cfg.lk_iterations.max(1),
        feature_stride: extractor.stride(),
        ..AlignConfig::default()
    };
    let tex_size = cfg.patch_size + 32;
    let mut out = Vec::with_capacity(cfg.count);
    let mut attempts = 0;
    while out.len() < cfg.count {
        attempts += 1;
        if attempts > 4 * cfg.count + 16 {
            return Err(Error::Numerical("too many failed residual samples".into()));
        }
        let tex = smooth_texture(tex_size, tex_size, 2.0, rng.random(), 128.0, 45.0);
        let zero = rng.random::<f64>() < cfg.zero_fraction;
        let gt = if zero {
            WarpParams::IDENTITY
        } else {
            let t = cfg.max_translation;
            WarpParams::new(
                rng.random_range(-t..=t),
                rng.random_range(-t..=t),
                rng.random_range(-cfg.max_rotation..=cfg.max_rotation),
                1.0 + rng.random_range(-cfg.max_scale_deviation..=cfg.max_scale_deviation),
            )?
        };
        let template = extractor.extract(&render_patch(&tex, tex_size, cfg.patch_size, &WarpParams::IDENTITY)?)?;
        let patch = extractor.extract(&render_patch(&tex, tex_size, cfg.patch_size, &gt)?)?;
        let Ok(model) = precompute_sdi(&template) else { continue };
        let Ok(lk) = align_lk(&model, &patch, WarpParams::IDENTITY, &align) else {
            continue;
        };
        let stride = extractor.stride() as f64;
        let p_feat = WarpParams {
            tx: lk.params.tx / stride,
            ty: lk.params.ty / stride,
            ..lk.params
        };
        let (aligned, _) = warp_feature_map(&patch, &p_feat);
        out.push(ResidualSample {
            template,
            aligned,
            params: lk.params,
            target: WarpResidual::between(&lk.params, &gt),
        });
    }
    Ok(out)
}

/// Smooth trajectories with per-step displacement capped at `max_step`.
///
/// Kinds are mixed: constant velocity, random-walk velocity, zero-mean
/// velocity jumps, sinusoids, and static; some carry small position noise.
pub fn gen_gru_set(cfg: &GruSetConfig) -> Vec<Vec<[f64; 2]>> {
    let mut rng = seeded_rng(cfg.seed);
    let cap = cfg.max_step;
    let clamp_step = |v: [f64; 2]| -> [f64; 2] {
        let n = v[0].hypot(v[1]);
        if n > cap {
            [v[0] * cap / n, v[1] * cap / n]
        } else {
            v
        }
    };
    let random_velocity = |rng: &mut ChaCha8Rng, max: f64| -> [f64; 2] {
        let speed = rng.random_range(0.0..max);
        let a = rng.random_range(0.0..std::f64::consts::TAU);
        [speed * a.cos(), speed * a.sin()]
    };
    (0..cfg.count)
        .map(|_| {
            let kind = rng.random_range(0..10);
            let mut pos = [rng.random_range(-20.0..20.0), rng.random_range(-20.0..20.0)];
            let mut v = random_velocity(&mut rng, 0.8 * cap);
            let walk = rng.random_range(0.02..0.15);
            let (amp, period, phase) = (
                rng.random_range(2.0..20.0),
                rng.random_range(40.0..160.0),
                rng.random_range(0.0..std::f64::consts::TAU),
            );
            let noise: f64 = if rng.random_range(0..3) == 0 {
                rng.random_range(0.0..0.1)
            } else {
                0.0
            };
            let mut clean = Vec::with_capacity(cfg.length);
            for i in 0..cfg.length {
                clean.push(pos);
                let step = match kind {
                    0..=3 => v,
                    4..=5 => {
                        v = clamp_step([
                            v[0] + rng.random_range(-walk..walk),
                            v[1] + rng.random_range(-walk..walk),
                        ]);
                        v
                    }
                    6..=7 => {
                        if rng.random_range(0..25) == 0 {
                            v = clamp_step([v[0] + rng.random_range(-1.0..1.0), v[1] + rng.random_range(-1.0..1.0)]);
                        }
                        v
                    }
                    8 => {
                        let w = std::f64::consts::TAU / period;
                        let a = w * i as f64 + phase;
                        [amp * w * a.cos(), -amp * w * a.sin()]
                    }
                    _ => [0.0, 0.0],
                };
                let step = clamp_step(step);
                pos = [pos[0] + step[0], pos[1] + step[1]];
            }
            let jitter = noise.min(0.05 * cap);
            let mut traj: Vec<[f64; 2]> = clean
                .iter()
                .map(|p| {
                    [
                        p[0] + rng.random_range(-jitter..=jitter),
                        p[1] + rng.random_range(-jitter..=jitter),
                    ]
                })
                .collect();
            for i in 1..traj.len() {
                let d = clamp_step([traj[i][0] - traj[i - 1][0], traj[i][1] - traj[i - 1][1]]);
                traj[i] = [traj[i - 1][0] + d[0], traj[i - 1][1] + d[1]];
            }
            traj
        })
        .collect()
}

pub fn gen_training_sets(
    extractor: &FeatureExtractor,
    residual: &ResidualSetConfig,
    gru: &GruSetConfig,
) -> Result<TrainingSets> {
    Ok(TrainingSets {
        residual: gen_residual_set(extractor, residual)?,
        gru: gen_gru_set(gru),
    })
}
