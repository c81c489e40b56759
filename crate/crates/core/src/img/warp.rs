use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Smallest scale that [`WarpParams::inverse`] accepts.
pub const MIN_INVERTIBLE_SCALE: f64 = 1e-6;

/// 4-DoF similarity pose `W(x) = s·R(θ)·x + t`.
///
/// `x` is measured relative to the tracked center, so `tx`/`ty` are directly
/// the displacement of that center. Rotation is counter-clockwise in image
/// coordinates (x right, y down renders it clockwise on screen).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WarpParams {
    pub tx: f64,
    pub ty: f64,
    pub theta: f64,
    pub scale: f64,
}

impl Default for WarpParams {
    fn default() -> Self {
        Self::IDENTITY
    }
}

/// Wraps an angle into `(-π, π]`.
pub fn normalize_angle(theta: f64) -> f64 {
    let r = theta.rem_euclid(2.0 * PI);
    if r > PI {
        r - 2.0 * PI
    } else {
        r
    }
}

impl WarpParams {
    pub const IDENTITY: WarpParams = WarpParams {
        tx: 0.0,
        ty: 0.0,
        theta: 0.0,
        scale: 1.0,
    };

    /// Validated constructor; the angle is wrapped into `(-π, π]`.
    pub fn new(tx: f64, ty: f64, theta: f64, scale: f64) -> Result<Self> {
        if !(tx.is_finite() && ty.is_finite() && theta.is_finite() && scale.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "warp parameters must be finite, got ({tx}, {ty}, {theta}, {scale})"
            )));
        }
        if scale <= 0.0 {
            return Err(Error::DegenerateWarp(scale));
        }
        Ok(Self {
            tx,
            ty,
            theta: normalize_angle(theta),
            scale,
        })
    }

    pub fn translation(tx: f64, ty: f64) -> Self {
        Self {
            tx,
            ty,
            ..Self::IDENTITY
        }
    }

    pub fn is_valid(&self) -> bool {
        self.tx.is_finite()
            && self.ty.is_finite()
            && self.theta.is_finite()
            && self.scale.is_finite()
            && self.scale > 0.0
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.tx, self.ty, self.theta, self.scale]
    }

    #[inline]
    fn linear(&self) -> (f64, f64) {
        let (sin, cos) = self.theta.sin_cos();
        (self.scale * cos, self.scale * sin)
    }

    /// Applies the warp to a center-relative point.
    #[inline]
    pub fn warp_point(&self, x: [f64; 2]) -> [f64; 2] {
        if self.theta == 0.0 && self.scale == 1.0 {
            return [x[0] + self.tx, x[1] + self.ty];
        }
        let (a, b) = self.linear();
        [a * x[0] - b * x[1] + self.tx, b * x[0] + a * x[1] + self.ty]
    }

    /// The two-sided inverse `(-(1/s)R(-θ)t, -θ, 1/s)`.
    pub fn inverse(&self) -> Result<Self> {
        if self.scale <= MIN_INVERTIBLE_SCALE || !self.scale.is_finite() {
            return Err(Error::DegenerateWarp(self.scale));
        }
        let inv_s = 1.0 / self.scale;
        let (sin, cos) = self.theta.sin_cos();
        // R(-θ)·t
        let rx = cos * self.tx + sin * self.ty;
        let ry = -sin * self.tx + cos * self.ty;
        Ok(Self {
            tx: -inv_s * rx,
            ty: -inv_s * ry,
            theta: normalize_angle(-self.theta),
            scale: inv_s,
        })
    }

    /// `self ∘ other`: the warp that applies `other` first, then `self`.
    pub fn compose(&self, other: &WarpParams) -> Self {
        let t = self.warp_point([other.tx, other.ty]);
        Self {
            tx: t[0],
            ty: t[1],
            theta: normalize_angle(self.theta + other.theta),
            scale: self.scale * other.scale,
        }
    }

    /// Largest absolute component difference, with angles compared on the circle.
    pub fn max_abs_diff(&self, other: &WarpParams) -> f64 {
        (self.tx - other.tx)
            .abs()
            .max((self.ty - other.ty).abs())
            .max(normalize_angle(self.theta - other.theta).abs())
            .max((self.scale - other.scale).abs())
    }
}

/// Free-function form of [`WarpParams::warp_point`].
pub fn warp_point(p: &WarpParams, x: [f64; 2]) -> [f64; 2] {
    p.warp_point(x)
}

/// Free-function form of [`WarpParams::inverse`].
pub fn invert_warp(p: &WarpParams) -> Result<WarpParams> {
    p.inverse()
}

/// Free-function form of [`WarpParams::compose`].
pub fn compose_warps(p: &WarpParams, q: &WarpParams) -> WarpParams {
    p.compose(q)
}
