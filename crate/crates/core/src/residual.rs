//! Residual warp regressor refining the Lucas–Kanade estimate.
//!
//! Input is the channel concatenation of template and aligned patch features;
//! two 3×3 conv+ReLU stages, a global average pool, the normalized warp, and
//! two fully connected layers produce a 4-vector correction.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{conv3x3_raw, im2col3x3, FeatureMap, TensorStore};
use crate::img::{normalize_angle, WarpParams};
use crate::nn::{check_finite, col2im3x3, dgemm, seeded_rng, shuffled_indices, Adam, ParamSet};

pub const CONV1_OUT: usize = 64;
pub const CONV2_OUT: usize = 32;
pub const FC1_OUT: usize = 32;
pub const FC_IN: usize = CONV2_OUT + 4;
pub const OUTPUTS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct WarpResidual {
    pub d_tx: f64,
    pub d_ty: f64,
    pub d_theta: f64,
    pub d_s: f64,
}

impl WarpResidual {
    pub const ZERO: WarpResidual = WarpResidual {
        d_tx: 0.0,
        d_ty: 0.0,
        d_theta: 0.0,
        d_s: 0.0,
    };

    pub fn to_array(&self) -> [f64; 4] {
        [self.d_tx, self.d_ty, self.d_theta, self.d_s]
    }

    pub fn from_array(v: [f64; 4]) -> Self {
        Self {
            d_tx: v[0],
            d_ty: v[1],
            d_theta: v[2],
            d_s: v[3],
        }
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }

    /// The correction that maps `estimate` onto `truth` under [`apply_residual`].
    pub fn between(estimate: &WarpParams, truth: &WarpParams) -> Self {
        Self {
            d_tx: truth.tx - estimate.tx,
            d_ty: truth.ty - estimate.ty,
            d_theta: normalize_angle(truth.theta - estimate.theta),
            d_s: truth.scale / estimate.scale - 1.0,
        }
    }
}

/// Translation and rotation add; scale composes as `s·(1 + d_s)`.
pub fn apply_residual(p: &WarpParams, d: &WarpResidual) -> Result<WarpParams> {
    if !d.is_finite() {
        return Err(Error::Numerical("non-finite warp residual".into()));
    }
    let scale = p.scale * (1.0 + d.d_s);
    if !(scale > 0.0) {
        return Err(Error::DegenerateWarp(scale));
    }
    Ok(WarpParams {
        tx: p.tx + d.d_tx,
        ty: p.ty + d.d_ty,
        theta: normalize_angle(p.theta + d.d_theta),
        scale,
    })
}

/// Warp parameters as fed to the fully connected stage.
pub fn normalized_warp(p: &WarpParams, patch_half_width: f64) -> [f64; 4] {
    [
        p.tx / patch_half_width,
        p.ty / patch_half_width,
        p.theta / std::f64::consts::PI,
        p.scale - 1.0,
    ]
}

/// Tensor names and shapes for `feature_channels` channels per input map.
pub fn residual_layout(feature_channels: usize) -> Vec<(String, Vec<usize>)> {
    vec![
        ("conv1.w".into(), vec![CONV1_OUT, 2 * feature_channels, 3, 3]),
        ("conv1.b".into(), vec![CONV1_OUT]),
        ("conv2.w".into(), vec![CONV2_OUT, CONV1_OUT, 3, 3]),
        ("conv2.b".into(), vec![CONV2_OUT]),
        ("fc1.w".into(), vec![FC1_OUT, FC_IN]),
        ("fc1.b".into(), vec![FC1_OUT]),
        ("fc2.w".into(), vec![OUTPUTS, FC1_OUT]),
        ("fc2.b".into(), vec![OUTPUTS]),
    ]
}

/// He-initialized parameters with a zero output layer, so the untrained net is neutral.
pub fn init_residual_params(feature_channels: usize, seed: u64) -> ParamSet {
    let mut rng = seeded_rng(seed);
    let mut p = ParamSet::new();
    for (name, shape) in residual_layout(feature_channels) {
        if name.ends_with(".b") || name.starts_with("fc2") {
            p.push_zeros(&name, shape);
        } else {
            p.push_he(&name, shape, &mut rng);
        }
    }
    p
}

/// All-zero weights: the net always outputs a zero correction.
pub fn zero_residual_store(feature_channels: usize) -> TensorStore {
    let mut p = ParamSet::new();
    for (name, shape) in residual_layout(feature_channels) {
        p.push_zeros(&name, shape);
    }
    p.to_store().expect("zeros are finite")
}

/// Residual regressor bound to its weights (single precision inference).
#[derive(Debug, Clone)]
pub struct ResidualNet {
    feature_channels: usize,
    patch_half_width: f64,
    conv1_w: Vec<f32>,
    conv1_b: Vec<f32>,
    conv2_w: Vec<f32>,
    conv2_b: Vec<f32>,
    fc1_w: Vec<f32>,
    fc1_b: Vec<f32>,
    fc2_w: Vec<f32>,
    fc2_b: Vec<f32>,
}

impl ResidualNet {
    pub fn new(weights: &TensorStore, feature_channels: usize, patch_half_width: f64) -> Result<Self> {
        if !(patch_half_width > 0.0) {
            return Err(Error::InvalidInput("patch half-width must be positive".into()));
        }
        let layout = residual_layout(feature_channels);
        let mut t = layout
            .iter()
            .map(|(name, shape)| weights.require(name, shape).map(|t| t.values().to_vec()));
        let mut next = || t.next().expect("eight tensors");
        Ok(Self {
            feature_channels,
            patch_half_width,
            conv1_w: next()?,
            conv1_b: next()?,
            conv2_w: next()?,
            conv2_b: next()?,
            fc1_w: next()?,
            fc1_b: next()?,
            fc2_w: next()?,
            fc2_b: next()?,
        })
    }

    pub fn feature_channels(&self) -> usize {
        self.feature_channels
    }

    pub fn patch_half_width(&self) -> f64 {
        self.patch_half_width
    }

    /// Predicts the correction for warp `p` (patch pixels) given the template
    /// features and the patch features resampled by `p`.
    pub fn forward(&self, template: &FeatureMap, aligned: &FeatureMap, p: &WarpParams) -> Result<WarpResidual> {
        if template.shape() != aligned.shape() {
            return Err(Error::Shape(format!(
                "template {:?} and aligned patch {:?} differ",
                template.shape(),
                aligned.shape()
            )));
        }
        if template.channels() != self.feature_channels {
            return Err(Error::WeightLoad(format!(
                "residual weights expect {} feature channels, got {}",
                self.feature_channels,
                template.channels()
            )));
        }
        let x = template.concat(aligned)?;
        let mut a1 = conv3x3_raw(&x, CONV1_OUT, &self.conv1_w, &self.conv1_b);
        a1.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
        let a2 = conv3x3_raw(&a1, CONV2_OUT, &self.conv2_w, &self.conv2_b);
        let hw = (a2.height() * a2.width()) as f64;
        let mut u = [0.0f64; FC_IN];
        for (c, slot) in u.iter_mut().take(CONV2_OUT).enumerate() {
            *slot = a2.channel(c).iter().map(|v| v.max(0.0) as f64).sum::<f64>() / hw;
        }
        u[CONV2_OUT..].copy_from_slice(&normalized_warp(p, self.patch_half_width));
        let mut h1 = [0.0f64; FC1_OUT];
        for (o, h) in h1.iter_mut().enumerate() {
            let row = &self.fc1_w[o * FC_IN..(o + 1) * FC_IN];
            let z = self.fc1_b[o] as f64 + row.iter().zip(&u).map(|(w, x)| *w as f64 * x).sum::<f64>();
            *h = z.max(0.0);
        }
        let mut y = [0.0f64; OUTPUTS];
        for (o, out) in y.iter_mut().enumerate() {
            let row = &self.fc2_w[o * FC1_OUT..(o + 1) * FC1_OUT];
            *out = self.fc2_b[o] as f64 + row.iter().zip(&h1).map(|(w, x)| *w as f64 * x).sum::<f64>();
        }
        let d = WarpResidual::from_array(y);
        if !d.is_finite() {
            return Err(Error::Numerical("non-finite residual output".into()));
        }
        Ok(d)
    }
}

/// One-shot forward pass; the patch half-width assumes the default feature stride of 4.
pub fn residual_forward(
    template: &FeatureMap,
    aligned: &FeatureMap,
    p: &WarpParams,
    weights: &TensorStore,
) -> Result<WarpResidual> {
    let half = template.width() as f64 * 4.0 / 2.0;
    ResidualNet::new(weights, template.channels(), half)?.forward(template, aligned, p)
}

/// Training example: feature pair, the warp it was aligned with, and the correction to learn.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualSample {
    pub template: FeatureMap,
    pub aligned: FeatureMap,
    pub params: WarpParams,
    pub target: WarpResidual,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ResidualTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub patch_half_width: f64,
}

impl Default for ResidualTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 32,
            learning_rate: 1e-3,
            seed: 7,
            patch_half_width: 32.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean training loss per epoch (over the updates of that epoch).
    pub epoch_losses: Vec<f64>,
    /// Loss of the returned weights over the whole training set.
    pub final_loss: f64,
}

struct ForwardCache {
    col1: Vec<f64>,
    z1: Vec<f64>,
    col2: Vec<f64>,
    z2: Vec<f64>,
    u: [f64; FC_IN],
    z3: [f64; FC1_OUT],
    h1: [f64; FC1_OUT],
    y: [f64; OUTPUTS],
}

fn forward_f64(params: &ParamSet, s: &ResidualSample, half_width: f64) -> Result<ForwardCache> {
    let (c, h, w) = (s.template.channels(), s.template.height(), s.template.width());
    if s.aligned.shape() != s.template.shape() {
        return Err(Error::Shape("template and aligned features differ".into()));
    }
    let hw = h * w;
    let cin = 2 * c;
    let x: Vec<f64> = s
        .template
        .data()
        .iter()
        .chain(s.aligned.data())
        .map(|v| *v as f64)
        .collect();
    let col1 = im2col3x3(&x, cin, h, w);
    let mut z1 = vec![0.0; CONV1_OUT * hw];
    for (o, b) in params.get(1).iter().enumerate() {
        z1[o * hw..(o + 1) * hw].fill(*b);
    }
    dgemm(
        CONV1_OUT,
        cin * 9,
        hw,
        1.0,
        params.get(0),
        false,
        &col1,
        false,
        1.0,
        &mut z1,
    );
    let a1: Vec<f64> = z1.iter().map(|v| v.max(0.0)).collect();
    let col2 = im2col3x3(&a1, CONV1_OUT, h, w);
    let mut z2 = vec![0.0; CONV2_OUT * hw];
    for (o, b) in params.get(3).iter().enumerate() {
        z2[o * hw..(o + 1) * hw].fill(*b);
    }
    dgemm(
        CONV2_OUT,
        CONV1_OUT * 9,
        hw,
        1.0,
        params.get(2),
        false,
        &col2,
        false,
        1.0,
        &mut z2,
    );
    let mut u = [0.0; FC_IN];
    for (ch, slot) in u.iter_mut().take(CONV2_OUT).enumerate() {
        *slot = z2[ch * hw..(ch + 1) * hw].iter().map(|v| v.max(0.0)).sum::<f64>() / hw as f64;
    }
    u[CONV2_OUT..].copy_from_slice(&normalized_warp(&s.params, half_width));
    let (fc1_w, fc1_b) = (params.get(4), params.get(5));
    let mut z3 = [0.0; FC1_OUT];
    let mut h1 = [0.0; FC1_OUT];
    for o in 0..FC1_OUT {
        z3[o] = fc1_b[o] + (0..FC_IN).map(|i| fc1_w[o * FC_IN + i] * u[i]).sum::<f64>();
        h1[o] = z3[o].max(0.0);
    }
    let (fc2_w, fc2_b) = (params.get(6), params.get(7));
    let mut y = [0.0; OUTPUTS];
    for o in 0..OUTPUTS {
        y[o] = fc2_b[o] + (0..FC1_OUT).map(|i| fc2_w[o * FC1_OUT + i] * h1[i]).sum::<f64>();
    }
    Ok(ForwardCache {
        col1,
        z1,
        col2,
        z2,
        u,
        z3,
        h1,
        y,
    })
}

/// Double-precision forward pass with the same semantics as [`ResidualNet::forward`].
pub fn residual_forward_f64(params: &ParamSet, sample: &ResidualSample, half_width: f64) -> Result<WarpResidual> {
    Ok(WarpResidual::from_array(forward_f64(params, sample, half_width)?.y))
}

/// Mean over `batch` of the squared error `‖y − target‖²` and its gradient.
pub fn residual_loss_grad(params: &ParamSet, batch: &[&ResidualSample], half_width: f64) -> Result<(f64, ParamSet)> {
    if batch.is_empty() {
        return Err(Error::InvalidInput("empty batch".into()));
    }
    let mut grads = params.zeros_like();
    let mut loss = 0.0;
    let inv_b = 1.0 / batch.len() as f64;
    for s in batch {
        let (c, h, w) = (s.template.channels(), s.template.height(), s.template.width());
        let (hw, cin) = (h * w, 2 * c);
        let fc = forward_f64(params, s, half_width)?;
        let target = s.target.to_array();
        let mut dy = [0.0; OUTPUTS];
        for o in 0..OUTPUTS {
            let e = fc.y[o] - target[o];
            loss += e * e * inv_b;
            dy[o] = 2.0 * e * inv_b;
        }
        // fc2
        let fc2_w = params.get(6).to_vec();
        let mut dh1 = [0.0; FC1_OUT];
        {
            let g = grads.get_mut(6);
            for o in 0..OUTPUTS {
                for i in 0..FC1_OUT {
                    g[o * FC1_OUT + i] += dy[o] * fc.h1[i];
                    dh1[i] += fc2_w[o * FC1_OUT + i] * dy[o];
                }
            }
        }
        grads.get_mut(7).iter_mut().zip(&dy).for_each(|(g, d)| *g += d);
        // fc1
        let dz3: Vec<f64> = (0..FC1_OUT)
            .map(|i| if fc.z3[i] > 0.0 { dh1[i] } else { 0.0 })
            .collect();
        let fc1_w = params.get(4).to_vec();
        let mut du = [0.0; FC_IN];
        {
            let g = grads.get_mut(4);
            for o in 0..FC1_OUT {
                for i in 0..FC_IN {
                    g[o * FC_IN + i] += dz3[o] * fc.u[i];
                    du[i] += fc1_w[o * FC_IN + i] * dz3[o];
                }
            }
        }
        grads.get_mut(5).iter_mut().zip(&dz3).for_each(|(g, d)| *g += d);
        // global average pool + relu
        let mut dz2 = vec![0.0; CONV2_OUT * hw];
        for ch in 0..CONV2_OUT {
            let d = du[ch] / hw as f64;
            for i in 0..hw {
                if fc.z2[ch * hw + i] > 0.0 {
                    dz2[ch * hw + i] = d;
                }
            }
        }
        // conv2
        dgemm(
            CONV2_OUT,
            hw,
            CONV1_OUT * 9,
            1.0,
            &dz2,
            false,
            &fc.col2,
            true,
            1.0,
            grads.get_mut(2),
        );
        for ch in 0..CONV2_OUT {
            grads.get_mut(3)[ch] += dz2[ch * hw..(ch + 1) * hw].iter().sum::<f64>();
        }
        let mut dcol2 = vec![0.0; CONV1_OUT * 9 * hw];
        dgemm(
            CONV1_OUT * 9,
            CONV2_OUT,
            hw,
            1.0,
            params.get(2),
            true,
            &dz2,
            false,
            0.0,
            &mut dcol2,
        );
        let da1 = col2im3x3(&dcol2, CONV1_OUT, h, w);
        let dz1: Vec<f64> = da1
            .iter()
            .zip(&fc.z1)
            .map(|(d, z)| if *z > 0.0 { *d } else { 0.0 })
            .collect();
        // conv1
        dgemm(
            CONV1_OUT,
            hw,
            cin * 9,
            1.0,
            &dz1,
            false,
            &fc.col1,
            true,
            1.0,
            grads.get_mut(0),
        );
        for ch in 0..CONV1_OUT {
            grads.get_mut(1)[ch] += dz1[ch * hw..(ch + 1) * hw].iter().sum::<f64>();
        }
    }
    Ok((loss, grads))
}

/// Mean squared correction error of `params` over `samples`.
pub fn residual_loss(params: &ParamSet, samples: &[ResidualSample], half_width: f64) -> Result<f64> {
    let mut total = 0.0;
    for s in samples {
        let y = forward_f64(params, s, half_width)?.y;
        let t = s.target.to_array();
        total += (0..OUTPUTS).map(|o| (y[o] - t[o]).powi(2)).sum::<f64>();
    }
    Ok(total / samples.len().max(1) as f64)
}

/// Mini-batch Adam on the squared correction error.
pub fn train_residual(samples: &[ResidualSample], cfg: &ResidualTrainConfig) -> Result<(TensorStore, TrainReport)> {
    let first = samples
        .first()
        .ok_or_else(|| Error::InvalidInput("residual training set is empty".into()))?;
    if cfg.batch_size == 0 || cfg.epochs == 0 {
        return Err(Error::Config("epochs and batch_size must be positive".into()));
    }
    let channels = first.template.channels();
    for (i, s) in samples.iter().enumerate() {
        if !s.target.is_finite() {
            return Err(Error::InvalidInput(format!("sample {i} has a non-finite target")));
        }
        if s.template.shape() != first.template.shape() || s.aligned.shape() != first.template.shape() {
            return Err(Error::Shape(format!("sample {i} has inconsistent feature shapes")));
        }
    }
    let mut params = init_residual_params(channels, cfg.seed);
    let mut opt = Adam::new(&params, cfg.learning_rate);
    let mut rng = seeded_rng(cfg.seed ^ 0x5EED);
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut batch_index = 0;
    for _ in 0..cfg.epochs {
        let order = shuffled_indices(samples.len(), &mut rng);
        let mut sum = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&ResidualSample> = chunk.iter().map(|&i| &samples[i]).collect();
            let (loss, grads) = residual_loss_grad(&params, &batch, cfg.patch_half_width)?;
            check_finite(loss, "residual training batch", batch_index)?;
            opt.update(&mut params, &grads);
            sum += loss;
            batches += 1;
            batch_index += 1;
        }
        let mean = sum / batches as f64;
        log::debug!("residual epoch {}: loss {mean:.6e}", epoch_losses.len());
        epoch_losses.push(mean);
    }
    let final_loss = residual_loss(&params, samples, cfg.patch_half_width)?;
    check_finite(final_loss, "residual training batch", batch_index)?;
    Ok((
        params.to_store()?,
        TrainReport {
            epoch_losses,
            final_loss,
        },
    ))
}
