//! Recurrent motion predictor used while the target is occluded.
//!
//! The network sees per-frame velocities of the confident history, divided
//! by a motion scale, and predicts the next velocity. Positions are
//! recovered by adding predicted velocities to the last confident position,
//! which keeps the model independent of where the target is in the frame.

use std::collections::VecDeque;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::TensorStore;
use crate::nn::{check_finite, seeded_rng, shuffled_indices, sigmoid, Adam, ParamSet};

pub const INPUT_SIZE: usize = 2;
pub const HIDDEN_SIZE: usize = 16;
pub const LAYERS: usize = 2;
const GATES: [&str; 9] = ["wz", "uz", "bz", "wr", "ur", "br", "wn", "un", "bn"];

/// Tensor names and shapes of the two-layer GRU and its linear head.
pub fn gru_layout() -> Vec<(String, Vec<usize>)> {
    let mut layout = Vec::new();
    for l in 0..LAYERS {
        let input = if l == 0 { INPUT_SIZE } else { HIDDEN_SIZE };
        for g in GATES {
            let shape = match &g[..1] {
                "w" => vec![HIDDEN_SIZE, input],
                "u" => vec![HIDDEN_SIZE, HIDDEN_SIZE],
                _ => vec![HIDDEN_SIZE],
            };
            layout.push((format!("gru.l{l}.{g}"), shape));
        }
    }
    layout.push(("head.w".into(), vec![INPUT_SIZE, HIDDEN_SIZE]));
    layout.push(("head.b".into(), vec![INPUT_SIZE]));
    layout
}

/// Uniform `±1/√hidden` recurrent weights and a zero head, so an untrained
/// predictor extrapolates the last velocity.
pub fn init_gru_params(seed: u64) -> ParamSet {
    let mut rng = seeded_rng(seed);
    let bound = 1.0 / (HIDDEN_SIZE as f64).sqrt();
    let mut p = ParamSet::new();
    for (name, shape) in gru_layout() {
        if name.starts_with("head.") {
            p.push_zeros(&name, shape);
        } else {
            p.push_uniform(&name, shape, bound, &mut rng);
        }
    }
    p
}

/// Weights of one GRU layer, row-major `[out, in]` matrices.
#[derive(Debug, Clone, Copy)]
pub struct GruLayerWeights<'a> {
    pub input_size: usize,
    pub wz: &'a [f64],
    pub uz: &'a [f64],
    pub bz: &'a [f64],
    pub wr: &'a [f64],
    pub ur: &'a [f64],
    pub br: &'a [f64],
    pub wn: &'a [f64],
    pub un: &'a [f64],
    pub bn: &'a [f64],
}

impl<'a> GruLayerWeights<'a> {
    fn from_params(p: &'a ParamSet, layer: usize) -> Self {
        let base = layer * GATES.len();
        Self {
            input_size: if layer == 0 { INPUT_SIZE } else { HIDDEN_SIZE },
            wz: p.get(base),
            uz: p.get(base + 1),
            bz: p.get(base + 2),
            wr: p.get(base + 3),
            ur: p.get(base + 4),
            br: p.get(base + 5),
            wn: p.get(base + 6),
            un: p.get(base + 7),
            bn: p.get(base + 8),
        }
    }

    pub fn hidden_size(&self) -> usize {
        self.bz.len()
    }
}

fn matvec(m: &[f64], v: &[f64], rows: usize) -> Vec<f64> {
    let cols = v.len();
    (0..rows)
        .map(|i| m[i * cols..(i + 1) * cols].iter().zip(v).map(|(a, b)| a * b).sum())
        .collect()
}

/// Intermediate values of one cell step, kept for backprop.
#[derive(Debug, Clone)]
struct CellCache {
    x: Vec<f64>,
    h: Vec<f64>,
    z: Vec<f64>,
    r: Vec<f64>,
    q: Vec<f64>,
    n: Vec<f64>,
}

fn cell_forward(x: &[f64], h: &[f64], w: &GruLayerWeights) -> (Vec<f64>, CellCache) {
    let hs = w.hidden_size();
    let (wzx, uzh) = (matvec(w.wz, x, hs), matvec(w.uz, h, hs));
    let (wrx, urh) = (matvec(w.wr, x, hs), matvec(w.ur, h, hs));
    let (wnx, q) = (matvec(w.wn, x, hs), matvec(w.un, h, hs));
    let mut z = vec![0.0; hs];
    let mut r = vec![0.0; hs];
    let mut n = vec![0.0; hs];
    let mut out = vec![0.0; hs];
    for i in 0..hs {
        z[i] = sigmoid(wzx[i] + uzh[i] + w.bz[i]);
        r[i] = sigmoid(wrx[i] + urh[i] + w.br[i]);
        n[i] = (wnx[i] + r[i] * q[i] + w.bn[i]).tanh();
        out[i] = (1.0 - z[i]) * n[i] + z[i] * h[i];
    }
    let cache = CellCache {
        x: x.to_vec(),
        h: h.to_vec(),
        z,
        r,
        q,
        n,
    };
    (out, cache)
}

/// One GRU step: update gate z, reset gate r applied after the recurrent
/// product, candidate n, and `h' = (1−z)⊙n + z⊙h`.
pub fn gru_cell(x: &[f64], h: &[f64], w: &GruLayerWeights) -> Result<Vec<f64>> {
    let hs = w.hidden_size();
    let shapes_ok = x.len() == w.input_size
        && h.len() == hs
        && [w.wz, w.wr, w.wn].iter().all(|m| m.len() == hs * w.input_size)
        && [w.uz, w.ur, w.un].iter().all(|m| m.len() == hs * hs)
        && [w.br, w.bn].iter().all(|b| b.len() == hs);
    if !shapes_ok {
        return Err(Error::Shape("GRU cell dimensions do not agree".into()));
    }
    Ok(cell_forward(x, h, w).0)
}

/// Hidden states of both layers.
#[derive(Debug, Clone, PartialEq)]
pub struct GruState {
    pub hidden: [Vec<f64>; LAYERS],
}

impl GruState {
    pub fn zeros() -> Self {
        Self {
            hidden: [vec![0.0; HIDDEN_SIZE], vec![0.0; HIDDEN_SIZE]],
        }
    }
}

struct SequenceCache {
    cells: [Vec<CellCache>; LAYERS],
    top: Vec<f64>,
    y: [f64; INPUT_SIZE],
}

fn sequence_forward(p: &ParamSet, inputs: &[[f64; 2]]) -> SequenceCache {
    let layers = [GruLayerWeights::from_params(p, 0), GruLayerWeights::from_params(p, 1)];
    let mut state = GruState::zeros();
    let mut cells: [Vec<CellCache>; LAYERS] = [Vec::with_capacity(inputs.len()), Vec::with_capacity(inputs.len())];
    for x in inputs {
        let mut input = x.to_vec();
        for (l, w) in layers.iter().enumerate() {
            let (h, cache) = cell_forward(&input, &state.hidden[l], w);
            cells[l].push(cache);
            state.hidden[l] = h.clone();
            input = h;
        }
    }
    let top = state.hidden[LAYERS - 1].clone();
    let head = p.get(2 * GATES.len());
    let bias = p.get(2 * GATES.len() + 1);
    // The head corrects the most recent velocity.
    let mut y = inputs.last().copied().unwrap_or([0.0; INPUT_SIZE]);
    for (o, out) in y.iter_mut().enumerate() {
        *out += bias[o]
            + (0..HIDDEN_SIZE)
                .map(|i| head[o * HIDDEN_SIZE + i] * top[i])
                .sum::<f64>();
    }
    SequenceCache { cells, top, y }
}

/// Runs both layers from a zero state; the output is the last input plus the
/// head applied to the final top state.
pub fn gru_sequence(p: &ParamSet, inputs: &[[f64; 2]]) -> [f64; 2] {
    sequence_forward(p, inputs).y
}

/// Squared error of one window and its gradient, accumulated into `grads` with weight `scale`.
fn sequence_backward(p: &ParamSet, inputs: &[[f64; 2]], target: [f64; 2], scale: f64, grads: &mut ParamSet) -> f64 {
    let cache = sequence_forward(p, inputs);
    let mut dy = [0.0; INPUT_SIZE];
    let mut loss = 0.0;
    for o in 0..INPUT_SIZE {
        let e = cache.y[o] - target[o];
        loss += e * e;
        dy[o] = 2.0 * e * scale;
    }
    let head_idx = 2 * GATES.len();
    let head = p.get(head_idx).to_vec();
    let mut dh_top = vec![0.0; HIDDEN_SIZE];
    for o in 0..INPUT_SIZE {
        for i in 0..HIDDEN_SIZE {
            grads.get_mut(head_idx)[o * HIDDEN_SIZE + i] += dy[o] * cache.top[i];
            dh_top[i] += head[o * HIDDEN_SIZE + i] * dy[o];
        }
        grads.get_mut(head_idx + 1)[o] += dy[o];
    }

    let steps = inputs.len();
    // Gradient flowing into each step's input of the layer being processed.
    let mut dinput_above: Vec<Vec<f64>> = vec![vec![0.0; HIDDEN_SIZE]; steps];
    for l in (0..LAYERS).rev() {
        let w = GruLayerWeights::from_params(p, l);
        let base = l * GATES.len();
        let insz = w.input_size;
        let mut dh_next = if l == LAYERS - 1 {
            dh_top.clone()
        } else {
            vec![0.0; HIDDEN_SIZE]
        };
        let mut dx_all = vec![vec![0.0; insz]; steps];
        for t in (0..steps).rev() {
            let c = &cache.cells[l][t];
            let mut dh_out = dh_next.clone();
            if l < LAYERS - 1 {
                for i in 0..HIDDEN_SIZE {
                    dh_out[i] += dinput_above[t][i];
                }
            }
            let mut dh_prev = vec![0.0; HIDDEN_SIZE];
            let mut da_z = vec![0.0; HIDDEN_SIZE];
            let mut da_r = vec![0.0; HIDDEN_SIZE];
            let mut da_n = vec![0.0; HIDDEN_SIZE];
            let mut dq = vec![0.0; HIDDEN_SIZE];
            for i in 0..HIDDEN_SIZE {
                let d = dh_out[i];
                let dn = d * (1.0 - c.z[i]);
                let dz = d * (c.h[i] - c.n[i]);
                dh_prev[i] += d * c.z[i];
                da_n[i] = dn * (1.0 - c.n[i] * c.n[i]);
                let dr = da_n[i] * c.q[i];
                dq[i] = da_n[i] * c.r[i];
                da_z[i] = dz * c.z[i] * (1.0 - c.z[i]);
                da_r[i] = dr * c.r[i] * (1.0 - c.r[i]);
            }
            let mut dx = vec![0.0; insz];
            for (gate, (da, src)) in [(&da_z, 0usize), (&da_r, 3), (&da_n, 6)].into_iter().enumerate() {
                let (wm, um) = match gate {
                    0 => (w.wz, w.uz),
                    1 => (w.wr, w.ur),
                    _ => (w.wn, w.un),
                };
                // Recurrent term of the candidate goes through the reset gate.
                let drec: &[f64] = if gate == 2 { &dq } else { da };
                for i in 0..HIDDEN_SIZE {
                    for j in 0..insz {
                        grads.get_mut(base + src)[i * insz + j] += da[i] * c.x[j];
                        dx[j] += wm[i * insz + j] * da[i];
                    }
                    for j in 0..HIDDEN_SIZE {
                        grads.get_mut(base + src + 1)[i * HIDDEN_SIZE + j] += drec[i] * c.h[j];
                        dh_prev[j] += um[i * HIDDEN_SIZE + j] * drec[i];
                    }
                    grads.get_mut(base + src + 2)[i] += da[i];
                }
            }
            dx_all[t] = dx;
            dh_next = dh_prev;
        }
        if l > 0 {
            dinput_above = dx_all;
        }
    }
    loss
}

/// Mean squared error over `(inputs, target)` windows and its gradient.
pub fn gru_loss_grad(p: &ParamSet, windows: &[(Vec<[f64; 2]>, [f64; 2])]) -> Result<(f64, ParamSet)> {
    if windows.is_empty() {
        return Err(Error::InvalidInput("empty batch".into()));
    }
    let mut grads = p.zeros_like();
    let scale = 1.0 / windows.len() as f64;
    let mut loss = 0.0;
    for (inputs, target) in windows {
        loss += scale * sequence_backward(p, inputs, *target, scale, &mut grads);
    }
    Ok((loss, grads))
}

/// Confident positions, oldest first, tagged with their frame index.
#[derive(Debug, Clone, PartialEq)]
pub struct MotionHistory {
    capacity: usize,
    entries: VecDeque<(u64, [f64; 2])>,
}

impl MotionHistory {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity: capacity.max(1),
            entries: VecDeque::with_capacity(capacity.max(1)),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Appends a position; frames must be strictly increasing.
    pub fn push(&mut self, frame: u64, t: [f64; 2]) -> Result<()> {
        if let Some((last, _)) = self.entries.back() {
            if frame <= *last {
                return Err(Error::InvalidInput(format!(
                    "history frame {frame} does not follow {last}"
                )));
            }
        }
        if !(t[0].is_finite() && t[1].is_finite()) {
            return Err(Error::InvalidInput("non-finite history entry".into()));
        }
        if self.entries.len() == self.capacity {
            self.entries.pop_front();
        }
        self.entries.push_back((frame, t));
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = &(u64, [f64; 2])> {
        self.entries.iter()
    }

    pub fn last(&self) -> Option<(u64, [f64; 2])> {
        self.entries.back().copied()
    }

    pub fn clear(&mut self) {
        self.entries.clear();
    }

    /// Per-frame velocities between consecutive entries.
    pub fn velocities(&self) -> Vec<[f64; 2]> {
        self.entries
            .iter()
            .zip(self.entries.iter().skip(1))
            .map(|((f0, a), (f1, b))| {
                let dt = (f1 - f0) as f64;
                [(b[0] - a[0]) / dt, (b[1] - a[1]) / dt]
            })
            .collect()
    }
}

/// Minimum number of confident entries needed to predict.
pub const MIN_HISTORY: usize = 2;

#[derive(Debug, Clone)]
pub struct GruPredictor {
    params: ParamSet,
    motion_scale: f64,
}

impl GruPredictor {
    pub fn new(weights: &TensorStore, motion_scale: f64) -> Result<Self> {
        if !(motion_scale > 0.0 && motion_scale.is_finite()) {
            return Err(Error::Config("motion scale must be positive".into()));
        }
        Ok(Self {
            params: ParamSet::from_store(weights, &gru_layout())?,
            motion_scale,
        })
    }

    pub fn from_params(params: ParamSet, motion_scale: f64) -> Self {
        Self { params, motion_scale }
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn motion_scale(&self) -> f64 {
        self.motion_scale
    }

    pub fn normalize(&self, v: [f64; 2]) -> [f64; 2] {
        [v[0] / self.motion_scale, v[1] / self.motion_scale]
    }

    pub fn denormalize(&self, v: [f64; 2]) -> [f64; 2] {
        [v[0] * self.motion_scale, v[1] * self.motion_scale]
    }

    /// Next-frame velocity for a window of normalized velocities.
    fn step(&self, window: &[[f64; 2]]) -> [f64; 2] {
        gru_sequence(&self.params, window)
    }

    /// Position one frame after the last history entry.
    pub fn predict_next(&self, history: &MotionHistory) -> Result<[f64; 2]> {
        let (last, _) = history.last().ok_or(Error::InsufficientHistory {
            needed: MIN_HISTORY,
            have: 0,
        })?;
        self.predict_at(history, last + 1)
    }

    /// Position at `frame`: the velocity predicted from the confident history
    /// is held across the gap. Predictions are never fed back into the window,
    /// so a small velocity bias grows linearly rather than compounding.
    pub fn predict_at(&self, history: &MotionHistory, frame: u64) -> Result<[f64; 2]> {
        if history.len() < MIN_HISTORY {
            return Err(Error::InsufficientHistory {
                needed: MIN_HISTORY,
                have: history.len(),
            });
        }
        let (last_frame, pos) = history.last().expect("non-empty");
        if frame <= last_frame {
            return Err(Error::InvalidInput(format!(
                "prediction frame {frame} is not after history frame {last_frame}"
            )));
        }
        let window: Vec<[f64; 2]> = history.velocities().into_iter().map(|v| self.normalize(v)).collect();
        let v = self.step(&window);
        if !(v[0].is_finite() && v[1].is_finite()) {
            return Err(Error::Numerical("non-finite motion prediction".into()));
        }
        let d = self.denormalize(v);
        let n = (frame - last_frame) as f64;
        Ok([pos[0] + d[0] * n, pos[1] + d[1] * n])
    }
}

/// One-step prediction with the default motion scale of 10 px.
pub fn gru_predict(history: &MotionHistory, weights: &TensorStore) -> Result<(f64, f64)> {
    let p = GruPredictor::new(weights, 10.0)?.predict_next(history)?;
    Ok((p[0], p[1]))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GruTrainConfig {
    /// History length; windows carry `k − 1` velocities.
    pub k: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub motion_scale: f64,
    pub seed: u64,
    /// Share of trajectories held out for validation.
    pub validation_fraction: f64,
}

impl Default for GruTrainConfig {
    fn default() -> Self {
        Self {
            k: 10,
            epochs: 40,
            batch_size: 32,
            learning_rate: 3e-3,
            motion_scale: 10.0,
            seed: 11,
            validation_fraction: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GruTrainReport {
    pub epoch_losses: Vec<f64>,
    /// Mean squared next-position error in pixels² on held-out windows.
    pub validation_mse: f64,
    /// Same metric for repeating the last position.
    pub baseline_mse: f64,
}

/// Training windows of one trajectory: `k − 1` normalized velocities and the next one.
pub fn trajectory_windows(traj: &[[f64; 2]], k: usize, motion_scale: f64) -> Vec<(Vec<[f64; 2]>, [f64; 2])> {
    if k < 2 || traj.len() < k + 1 {
        return Vec::new();
    }
    let vel: Vec<[f64; 2]> = traj
        .windows(2)
        .map(|w| [(w[1][0] - w[0][0]) / motion_scale, (w[1][1] - w[0][1]) / motion_scale])
        .collect();
    (0..=vel.len() - k)
        .map(|s| (vel[s..s + k - 1].to_vec(), vel[s + k - 1]))
        .collect()
}

/// Mini-batch Adam with backprop through each `k`-step window.
pub fn train_gru(trajectories: &[Vec<[f64; 2]>], cfg: &GruTrainConfig) -> Result<(TensorStore, GruTrainReport)> {
    if cfg.k < 2 || cfg.epochs == 0 || cfg.batch_size == 0 {
        return Err(Error::Config("k ≥ 2, epochs and batch_size > 0 required".into()));
    }
    if let Some(i) = trajectories.iter().position(|t| t.len() < cfg.k + 1) {
        return Err(Error::InvalidInput(format!(
            "trajectory {i} is shorter than k + 1 = {}",
            cfg.k + 1
        )));
    }
    if trajectories.is_empty() {
        return Err(Error::InvalidInput("no training trajectories".into()));
    }
    let mut rng = seeded_rng(cfg.seed);
    let order = shuffled_indices(trajectories.len(), &mut rng);
    let n_val = if trajectories.len() > 1 {
        ((trajectories.len() as f64 * cfg.validation_fraction).round() as usize).min(trajectories.len() - 1)
    } else {
        0
    };
    let (val_idx, train_idx) = order.split_at(n_val);
    let windows = |idx: &[usize]| -> Vec<(Vec<[f64; 2]>, [f64; 2])> {
        idx.iter()
            .flat_map(|&i| trajectory_windows(&trajectories[i], cfg.k, cfg.motion_scale))
            .collect()
    };
    let train = windows(train_idx);
    let val = if n_val > 0 { windows(val_idx) } else { train.clone() };

    let mut params = init_gru_params(cfg.seed);
    let mut opt = Adam::new(&params, cfg.learning_rate);
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        // Cosine decay to a tenth of the initial rate.
        let progress = epoch as f64 / cfg.epochs.max(2).saturating_sub(1) as f64;
        opt.learning_rate = cfg.learning_rate * (0.1 + 0.45 * (1.0 + (std::f64::consts::PI * progress).cos()));
        let order = shuffled_indices(train.len(), &mut rng);
        let (mut sum, mut batches) = (0.0, 0);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<(Vec<[f64; 2]>, [f64; 2])> = chunk.iter().map(|&i| train[i].clone()).collect();
            let (loss, grads) = gru_loss_grad(&params, &batch)?;
            check_finite(loss, "GRU training epoch", epoch)?;
            opt.update(&mut params, &grads);
            sum += loss;
            batches += 1;
        }
        epoch_losses.push(sum / batches as f64);
        log::debug!("gru epoch {epoch}: loss {:.6e}", sum / batches as f64);
    }
    let s2 = cfg.motion_scale * cfg.motion_scale;
    let (mut model, mut base) = (0.0, 0.0);
    for (inputs, target) in &val {
        let y = gru_sequence(&params, inputs);
        model += s2 * ((y[0] - target[0]).powi(2) + (y[1] - target[1]).powi(2));
        base += s2 * (target[0].powi(2) + target[1].powi(2));
    }
    let n = val.len().max(1) as f64;
    let report = GruTrainReport {
        epoch_losses,
        validation_mse: model / n,
        baseline_mse: base / n,
    };
    check_finite(report.validation_mse, "GRU training epoch", cfg.epochs)?;
    Ok((params.to_store()?, report))
}

/// Reads one trajectory, rows `t_x,t_y`; a non-numeric first row is taken as a header.
pub fn load_trajectory_csv(path: &Path) -> Result<Vec<[f64; 2]>> {
    let text = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split(',').map(str::trim).collect();
        let parsed: Option<Vec<f64>> = cols.iter().map(|c| c.parse().ok()).collect();
        match parsed {
            Some(v) if v.len() == 2 && v.iter().all(|x| x.is_finite()) => out.push([v[0], v[1]]),
            None if i == 0 => continue,
            _ => {
                return Err(Error::Ingestion {
                    row: i + 1,
                    reason: format!("expected two numbers, got {line:?}"),
                })
            }
        }
    }
    Ok(out)
}

pub fn save_trajectory_csv(path: &Path, traj: &[[f64; 2]]) -> Result<()> {
    let mut s = String::from("t_x,t_y\n");
    for t in traj {
        s.push_str(&format!("{},{}\n", t[0], t[1]));
    }
    std::fs::write(path, s)?;
    Ok(())
}
