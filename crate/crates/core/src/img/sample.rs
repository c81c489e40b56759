/// Result of a bilinear lookup. Out-of-bounds lookups yield `value == 0.0`
/// with `valid == false`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sample {
    pub value: f64,
    pub valid: bool,
}

/// Precomputed bilinear footprint for one sub-pixel location.
///
/// Reusing a tap across the channels of a feature map avoids recomputing the
/// weights per channel.
#[derive(Debug, Clone, Copy)]
pub struct BilinearTap {
    index: usize,
    step_x: usize,
    step_y: usize,
    fx: f64,
    fy: f64,
}

impl BilinearTap {
    /// Returns `None` when `(x, y)` is outside `[0, w-1] × [0, h-1]`.
    #[inline]
    pub fn new(width: usize, height: usize, x: f64, y: f64) -> Option<Self> {
        if !(x >= 0.0 && y >= 0.0) || width == 0 || height == 0 {
            return None;
        }
        let max_x = (width - 1) as f64;
        let max_y = (height - 1) as f64;
        if !(x <= max_x && y <= max_y) {
            return None;
        }
        let x0 = x.floor() as usize;
        let y0 = y.floor() as usize;
        let (step_x, fx) = if x0 + 1 < width { (1, x - x0 as f64) } else { (0, 0.0) };
        let (step_y, fy) = if y0 + 1 < height {
            (width, y - y0 as f64)
        } else {
            (0, 0.0)
        };
        Some(Self {
            index: y0 * width + x0,
            step_x,
            step_y,
            fx,
            fy,
        })
    }

    #[inline]
    pub fn apply<T: Copy + Into<f64>>(&self, plane: &[T]) -> f64 {
        let i = self.index;
        let v00: f64 = plane[i].into();
        let v10: f64 = plane[i + self.step_x].into();
        let v01: f64 = plane[i + self.step_y].into();
        let v11: f64 = plane[i + self.step_y + self.step_x].into();
        let top = v00 + self.fx * (v10 - v00);
        let bottom = v01 + self.fx * (v11 - v01);
        top + self.fy * (bottom - top)
    }
}

/// Bilinear interpolation of a row-major plane at `(x, y)`.
pub fn sample_bilinear<T: Copy + Into<f64>>(plane: &[T], width: usize, height: usize, x: f64, y: f64) -> Sample {
    debug_assert_eq!(plane.len(), width * height);
    match BilinearTap::new(width, height, x, y) {
        Some(tap) => Sample {
            value: tap.apply(plane),
            valid: true,
        },
        None => Sample {
            value: 0.0,
            valid: false,
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ramp(width: usize, height: usize, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
        (0..height)
            .flat_map(|y| (0..width).map(move |x| (x, y)))
            .map(|(x, y)| f(x as f64, y as f64))
            .collect()
    }

    #[test]
    fn lattice_points_are_exact() {
        let plane = ramp(7, 5, |x, y| (x * 13.0 + y * 7.0).sin() * 100.0);
        for y in 0..5 {
            for x in 0..7 {
                let s = sample_bilinear(&plane, 7, 5, x as f64, y as f64);
                assert!(s.valid);
                assert_eq!(s.value, plane[y * 7 + x]);
            }
        }
    }

    #[test]
    fn midpoint_and_ramp() {
        let plane = [0.0, 0.0, 100.0, 100.0];
        assert_eq!(sample_bilinear(&plane, 2, 2, 0.5, 0.5).value, 50.0);
        let plane = ramp(6, 6, |x, y| x + 10.0 * y);
        let s = sample_bilinear(&plane, 6, 6, 1.25, 2.75);
        assert!((s.value - 28.75).abs() < 1e-12);
    }

    #[test]
    fn out_of_bounds_is_flagged() {
        let plane = [1.0f32; 9];
        for (x, y) in [(-0.01, 1.0), (1.0, 2.01), (3.0, 0.0), (f64::NAN, 0.0)] {
            let s = sample_bilinear(&plane, 3, 3, x, y);
            assert!(!s.valid);
            assert_eq!(s.value, 0.0);
        }
        assert!(sample_bilinear(&plane, 3, 3, 2.0, 2.0).valid);
    }

    proptest! {
        #[test]
        fn affine_fields_are_reproduced(a in -50.0..50.0f64, b in -5.0..5.0f64, c in -5.0..5.0f64,
                                        x in 0.0..15.0f64, y in 0.0..11.0f64) {
            let plane = ramp(16, 12, |px, py| a + b * px + c * py);
            let s = sample_bilinear(&plane, 16, 12, x, y);
            prop_assert!(s.valid);
            prop_assert!((s.value - (a + b * x + c * y)).abs() <= 1e-9);
        }
    }
}
