//! Coarse localization by zero-mean normalized cross-correlation.
//!
//! The numerator is a full-frame FFT cross-correlation against the
//! mean-subtracted template; window statistics come from summed-area tables.

use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};
use crate::img::GrayFrame;

/// Windows whose per-pixel intensity variance is below this score 0.
pub const MIN_WINDOW_VARIANCE: f64 = 1e-12;

/// NCC scores over every valid template placement (`frame - template + 1` per axis).
#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationMap {
    width: usize,
    height: usize,
    scores: Vec<f64>,
}

impl CorrelationMap {
    pub fn new(width: usize, height: usize, scores: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 || scores.len() != width * height {
            return Err(Error::InvalidInput(format!(
                "correlation map of {}x{} cannot hold {} scores",
                width,
                height,
                scores.len()
            )));
        }
        Ok(Self { width, height, scores })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.scores[y * self.width + x]
    }
}

/// Peak of a correlation map, expressed as the template-center position in the frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CoarseMatch {
    pub center: [f64; 2],
    pub score: f64,
}

/// Reusable matcher for one template against frames of a fixed size.
#[derive(Clone)]
pub struct NccMatcher {
    frame_w: usize,
    frame_h: usize,
    tw: usize,
    th: usize,
    template_norm: f64,
    // conj(FFT(template - mean)), stored column-major (transposed).
    spectrum: Vec<Complex<f64>>,
    row_fwd: Arc<dyn Fft<f64>>,
    col_fwd: Arc<dyn Fft<f64>>,
    row_inv: Arc<dyn Fft<f64>>,
    col_inv: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for NccMatcher {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("NccMatcher")
            .field("frame", &(self.frame_w, self.frame_h))
            .field("template", &(self.tw, self.th))
            .finish()
    }
}

fn transpose(src: &[Complex<f64>], rows: usize, cols: usize, dst: &mut [Complex<f64>]) {
    for r in 0..rows {
        for c in 0..cols {
            dst[c * rows + r] = src[r * cols + c];
        }
    }
}

impl NccMatcher {
    pub fn new(template: &GrayFrame, frame_w: usize, frame_h: usize) -> Result<Self> {
        let (tw, th) = (template.width(), template.height());
        if tw > frame_w || th > frame_h {
            return Err(Error::InvalidInput(format!(
                "template {tw}x{th} is larger than frame {frame_w}x{frame_h}"
            )));
        }
        let n = (tw * th) as f64;
        let mean = template.data().iter().sum::<f64>() / n;
        let centered: Vec<f64> = template.data().iter().map(|v| v - mean).collect();
        let energy: f64 = centered.iter().map(|v| v * v).sum();
        if energy / n < MIN_WINDOW_VARIANCE {
            return Err(Error::DegenerateTemplate("template has zero intensity variance".into()));
        }

        let mut planner = FftPlanner::<f64>::new();
        let row_fwd = planner.plan_fft_forward(frame_w);
        let col_fwd = planner.plan_fft_forward(frame_h);
        let row_inv = planner.plan_fft_inverse(frame_w);
        let col_inv = planner.plan_fft_inverse(frame_h);

        let mut padded = vec![Complex::new(0.0, 0.0); frame_w * frame_h];
        for y in 0..th {
            for x in 0..tw {
                padded[y * frame_w + x].re = centered[y * tw + x];
            }
        }
        let mut matcher = Self {
            frame_w,
            frame_h,
            tw,
            th,
            template_norm: energy.sqrt(),
            spectrum: Vec::new(),
            row_fwd,
            col_fwd,
            row_inv,
            col_inv,
        };
        let mut spectrum = matcher.forward(padded);
        spectrum.iter_mut().for_each(|c| *c = c.conj());
        matcher.spectrum = spectrum;
        Ok(matcher)
    }

    pub fn template_size(&self) -> [usize; 2] {
        [self.tw, self.th]
    }

    pub fn frame_size(&self) -> [usize; 2] {
        [self.frame_w, self.frame_h]
    }

    /// Row-major spatial buffer in, transposed spectrum out.
    fn forward(&self, mut buf: Vec<Complex<f64>>) -> Vec<Complex<f64>> {
        self.row_fwd.process(&mut buf);
        let mut t = vec![Complex::new(0.0, 0.0); buf.len()];
        transpose(&buf, self.frame_h, self.frame_w, &mut t);
        self.col_fwd.process(&mut t);
        t
    }

    /// Transposed spectrum in, row-major spatial buffer out (unnormalized).
    fn inverse(&self, mut t: Vec<Complex<f64>>) -> Vec<Complex<f64>> {
        self.col_inv.process(&mut t);
        let mut buf = vec![Complex::new(0.0, 0.0); t.len()];
        transpose(&t, self.frame_w, self.frame_h, &mut buf);
        self.row_inv.process(&mut buf);
        buf
    }

    pub fn correlate(&self, frame: &GrayFrame) -> Result<CorrelationMap> {
        let (fw, fh) = (frame.width(), frame.height());
        if fw != self.frame_w || fh != self.frame_h {
            return Err(Error::InvalidInput(format!(
                "matcher built for {}x{} frames, got {fw}x{fh}",
                self.frame_w, self.frame_h
            )));
        }
        let mean = frame.data().iter().sum::<f64>() / (fw * fh) as f64;
        let centered: Vec<f64> = frame.data().iter().map(|v| v - mean).collect();

        let buf: Vec<Complex<f64>> = centered.iter().map(|&v| Complex::new(v, 0.0)).collect();
        let mut spec = self.forward(buf);
        for (s, t) in spec.iter_mut().zip(&self.spectrum) {
            *s *= t;
        }
        let corr = self.inverse(spec);
        let norm = 1.0 / (fw * fh) as f64;

        // Summed-area tables with a zero border row/column.
        let sw = fw + 1;
        let mut s1 = vec![0.0; sw * (fh + 1)];
        let mut s2 = vec![0.0; sw * (fh + 1)];
        for y in 0..fh {
            let (mut r1, mut r2) = (0.0, 0.0);
            for x in 0..fw {
                let v = centered[y * fw + x];
                r1 += v;
                r2 += v * v;
                s1[(y + 1) * sw + x + 1] = s1[y * sw + x + 1] + r1;
                s2[(y + 1) * sw + x + 1] = s2[y * sw + x + 1] + r2;
            }
        }
        let rect = |s: &[f64], x: usize, y: usize| {
            s[(y + self.th) * sw + x + self.tw] - s[y * sw + x + self.tw] - s[(y + self.th) * sw + x] + s[y * sw + x]
        };

        let (mw, mh) = (fw - self.tw + 1, fh - self.th + 1);
        let n = (self.tw * self.th) as f64;
        let mut scores = Vec::with_capacity(mw * mh);
        for y in 0..mh {
            for x in 0..mw {
                let sum = rect(&s1, x, y);
                let sum_sq = rect(&s2, x, y);
                let energy = sum_sq - sum * sum / n;
                let score = if energy / n < MIN_WINDOW_VARIANCE {
                    0.0
                } else {
                    let num = corr[y * fw + x].re * norm;
                    (num / (energy.sqrt() * self.template_norm)).clamp(-1.0, 1.0)
                };
                scores.push(score);
            }
        }
        CorrelationMap::new(mw, mh, scores)
    }
}

/// Zero-mean NCC of `template` at every valid placement in `frame`.
pub fn ncc_map(frame: &GrayFrame, template: &GrayFrame) -> Result<CorrelationMap> {
    NccMatcher::new(template, frame.width(), frame.height())?.correlate(frame)
}

/// Argmax of the map (first occurrence in row-major order), converted to the
/// template center: placement `(x, y)` maps to `(x + w/2, y + h/2)`.
pub fn coarse_center(map: &CorrelationMap, template_size: [usize; 2]) -> CoarseMatch {
    let mut best = 0;
    for (i, s) in map.scores.iter().enumerate() {
        if *s > map.scores[best] {
            best = i;
        }
    }
    let (x, y) = (best % map.width, best / map.width);
    CoarseMatch {
        center: [(x + template_size[0] / 2) as f64, (y + template_size[1] / 2) as f64],
        score: map.scores[best],
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Direct double-loop zero-mean NCC.
    fn brute_force(frame: &GrayFrame, t: &GrayFrame) -> Vec<f64> {
        let (fw, fh, tw, th) = (frame.width(), frame.height(), t.width(), t.height());
        let n = (tw * th) as f64;
        let tmean = t.data().iter().sum::<f64>() / n;
        let mut out = Vec::new();
        for y in 0..=fh - th {
            for x in 0..=fw - tw {
                let mut wmean = 0.0;
                for j in 0..th {
                    for i in 0..tw {
                        wmean += frame.get(x + i, y + j);
                    }
                }
                wmean /= n;
                let (mut num, mut ew, mut et) = (0.0, 0.0, 0.0);
                for j in 0..th {
                    for i in 0..tw {
                        let a = frame.get(x + i, y + j) - wmean;
                        let b = t.get(i, j) - tmean;
                        num += a * b;
                        ew += a * a;
                        et += b * b;
                    }
                }
                out.push(if ew / n < MIN_WINDOW_VARIANCE {
                    0.0
                } else {
                    num / (ew * et).sqrt()
                });
            }
        }
        out
    }

    fn random_frame(rng: &mut ChaCha8Rng, w: usize, h: usize) -> GrayFrame {
        GrayFrame::from_fn(w, h, |_, _| rng.random_range(0.0..255.0)).unwrap()
    }

    #[test]
    fn self_correlation_is_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let f = random_frame(&mut rng, 12, 9);
        let m = ncc_map(&f, &f).unwrap();
        assert_eq!((m.width(), m.height()), (1, 1));
        assert!((m.get(0, 0) - 1.0).abs() < 1e-6);
    }

    #[test]
    fn embedded_template_is_found_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let t = random_frame(&mut rng, 10, 8);
        let f = GrayFrame::from_fn(40, 30, |x, y| {
            if (13..23).contains(&x) && (7..15).contains(&y) {
                t.get(x - 13, y - 7)
            } else {
                0.0
            }
        })
        .unwrap();
        let m = ncc_map(&f, &t).unwrap();
        let c = coarse_center(&m, [10, 8]);
        assert!((c.score - 1.0).abs() < 1e-6);
        assert_eq!(c.center, [18.0, 11.0]);
        assert!((m.get(13, 7) - 1.0).abs() < 1e-6);
    }

    #[test]
    fn matches_brute_force_on_random_frame() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let f = random_frame(&mut rng, 32, 32);
        let t = random_frame(&mut rng, 8, 8);
        let m = ncc_map(&f, &t).unwrap();
        for (a, b) in m.scores().iter().zip(brute_force(&f, &t)) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn tie_breaks_to_first_row_major() {
        let mut scores = vec![0.0; 100];
        scores[7 * 10 + 3] = 0.9;
        scores[3 * 10 + 7] = 0.9;
        let m = CorrelationMap::new(10, 10, scores).unwrap();
        let c = coarse_center(&m, [0, 0]);
        assert_eq!(c.center, [7.0, 3.0]);
        let single = CorrelationMap::new(1, 1, vec![0.3]).unwrap();
        assert_eq!(coarse_center(&single, [4, 6]).center, [2.0, 3.0]);
    }

    #[test]
    fn rejects_bad_templates() {
        let f = GrayFrame::filled(10, 10, 5.0).unwrap();
        let big = GrayFrame::filled(11, 4, 5.0).unwrap();
        assert!(matches!(ncc_map(&f, &big), Err(Error::InvalidInput(_))));
        let flat = GrayFrame::filled(4, 4, 5.0).unwrap();
        assert!(matches!(ncc_map(&f, &flat), Err(Error::DegenerateTemplate(_))));
    }

    #[test]
    fn flat_windows_score_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let t = random_frame(&mut rng, 4, 4);
        let f = GrayFrame::filled(12, 12, 9.0).unwrap();
        assert!(ncc_map(&f, &t).unwrap().scores().iter().all(|s| *s == 0.0));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]
        #[test]
        fn brute_force_equivalence(seed in any::<u64>(), fw in 4usize..=64, fh in 4usize..=64,
                                   tw in 2usize..=16, th in 2usize..=16) {
            prop_assume!(tw <= fw && th <= fh);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let f = random_frame(&mut rng, fw, fh);
            let t = random_frame(&mut rng, tw, th);
            let m = ncc_map(&f, &t).unwrap();
            for (a, b) in m.scores().iter().zip(brute_force(&f, &t)) {
                prop_assert!((a - b).abs() < 1e-5);
                prop_assert!(a.abs() <= 1.0 + 1e-6);
            }
        }

        #[test]
        fn affine_intensity_invariance(seed in any::<u64>(), a in 0.1..1.0f64, b in 0.0..20.0f64) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let f = random_frame(&mut rng, 24, 20);
            let t = random_frame(&mut rng, 6, 5);
            let g = GrayFrame::from_fn(24, 20, |x, y| a * f.get(x, y) + (1.0 - a) * 12.0 * b).unwrap();
            let m1 = ncc_map(&f, &t).unwrap();
            let m2 = ncc_map(&g, &t).unwrap();
            for (p, q) in m1.scores().iter().zip(m2.scores()) {
                prop_assert!((p - q).abs() < 1e-5);
            }
        }
    }
}
