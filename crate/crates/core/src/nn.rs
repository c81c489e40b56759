//! Double-precision training helpers shared by the residual regressor and the GRU.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::features::{Tensor, TensorStore};

/// Named trainable tensor held in f64.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

/// Ordered parameter list; also used for gradients of the same layout.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet {
    params: Vec<Param>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, shape: Vec<usize>, values: Vec<f64>) {
        debug_assert_eq!(shape.iter().product::<usize>(), values.len());
        self.params.push(Param {
            name: name.into(),
            shape,
            values,
        });
    }

    /// He-normal matrix (fan-in from every dimension but the first).
    pub fn push_he(&mut self, name: &str, shape: Vec<usize>, rng: &mut ChaCha8Rng) {
        let fan_in: usize = shape[1..].iter().product();
        let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
        let n = shape.iter().product();
        let values = (0..n).map(|_| normal.sample(rng)).collect();
        self.push(name, shape, values);
    }

    pub fn push_uniform(&mut self, name: &str, shape: Vec<usize>, bound: f64, rng: &mut ChaCha8Rng) {
        use rand::Rng;
        let n = shape.iter().product();
        let values = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
        self.push(name, shape, values);
    }

    pub fn push_zeros(&mut self, name: &str, shape: Vec<usize>) {
        let n = shape.iter().product();
        self.push(name, shape, vec![0.0; n]);
    }

    /// Loads the named tensors (with the expected shapes) from a store.
    pub fn from_store(store: &TensorStore, layout: &[(String, Vec<usize>)]) -> Result<Self> {
        let mut set = Self::new();
        for (name, shape) in layout {
            set.push(name.clone(), shape.clone(), store.require(name, shape)?.to_f64());
        }
        Ok(set)
    }

    pub fn to_store(&self) -> Result<TensorStore> {
        let mut store = TensorStore::new();
        for p in &self.params {
            store.insert(Tensor::from_f64(p.name.clone(), p.shape.clone(), &p.values)?)?;
        }
        Ok(store)
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    shape: p.shape.clone(),
                    values: vec![0.0; p.values.len()],
                })
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn get(&self, i: usize) -> &[f64] {
        &self.params[i].values
    }

    pub fn get_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.params[i].values
    }

    pub fn by_name(&self, name: &str) -> Option<&Param> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn scale(&mut self, factor: f64) {
        for p in &mut self.params {
            p.values.iter_mut().for_each(|v| *v *= factor);
        }
    }

    pub fn add_assign(&mut self, other: &ParamSet) {
        for (a, b) in self.params.iter_mut().zip(&other.params) {
            for (x, y) in a.values.iter_mut().zip(&b.values) {
                *x += y;
            }
        }
    }
}

/// Adam optimizer over a [`ParamSet`].
#[derive(Debug, Clone)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(params: &ParamSet, learning_rate: f64) -> Self {
        let zeros: Vec<Vec<f64>> = params.iter().map(|p| vec![0.0; p.values.len()]).collect();
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn update(&mut self, params: &mut ParamSet, grads: &ParamSet) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step as i32);
        let c2 = 1.0 - self.beta2.powi(self.step as i32);
        for (i, (p, g)) in params.iter_mut().zip(grads.iter()).enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..p.values.len() {
                let gj = g.values[j];
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                p.values[j] -= self.learning_rate * (m[j] / c1) / ((v[j] / c2).sqrt() + self.epsilon);
            }
        }
    }
}

/// Fisher–Yates order of `0..n` from a seeded stream.
pub fn shuffled_indices(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx
}

pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// `C = alpha·op(A)·op(B) + beta·C` with row-major storage; `op(A)` is `m × k`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn dgemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: bounds checked above; strides describe the stated layouts.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Adjoint of the 3×3 im2col unfold: scatters columns back onto the image.
pub(crate) fn col2im3x3(col: &[f64], channels: usize, height: usize, width: usize) -> Vec<f64> {
    let hw = height * width;
    let mut out = vec![0.0; channels * hw];
    for c in 0..channels {
        let plane = &mut out[c * hw..(c + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &col[((c * 9) + ky * 3 + kx) * hw..][..hw];
                for y in 0..height {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= height as isize {
                        continue;
                    }
                    for x in 0..width {
                        let sx = x as isize + kx as isize - 1;
                        if sx >= 0 && sx < width as isize {
                            plane[sy as usize * width + sx as usize] += row[y * width + x];
                        }
                    }
                }
            }
        }
    }
    out
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn check_finite(loss: f64, stage: &'static str, index: usize) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::Divergence { stage, index })
    }
}

/// Relative error used by the finite-difference checks.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::im2col3x3;
    use rand::Rng;

    #[test]
    fn dgemm_matches_loops() {
        let mut rng = seeded_rng(1);
        let (m, k, n) = (3, 5, 4);
        let a: Vec<f64> = (0..m * k).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..k * n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let at: Vec<f64> = (0..k * m).map(|i| a[(i % m) * k + i / m]).collect();
        let bt: Vec<f64> = (0..n * k).map(|i| b[(i % k) * n + i / k]).collect();
        let mut expect = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                expect[i * n + j] = (0..k).map(|l| a[i * k + l] * b[l * n + j]).sum();
            }
        }
        for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
            let mut c = vec![0.0; m * n];
            dgemm(
                m,
                k,
                n,
                1.0,
                if ta { &at } else { &a },
                ta,
                if tb { &bt } else { &b },
                tb,
                0.0,
                &mut c,
            );
            for (x, y) in c.iter().zip(&expect) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let mut rng = seeded_rng(2);
        let (c, h, w) = (2, 4, 5);
        let x: Vec<f64> = (0..c * h * w).map(|_| rng.random_range(-1.0..1.0)).collect();
        let y: Vec<f64> = (0..c * 9 * h * w).map(|_| rng.random_range(-1.0..1.0)).collect();
        let lhs: f64 = im2col3x3(&x, c, h, w).iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(col2im3x3(&y, c, h, w)).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn adam_minimizes_quadratic() {
        let mut p = ParamSet::new();
        p.push("x", vec![2], vec![3.0, -2.0]);
        let mut opt = Adam::new(&p, 0.1);
        for _ in 0..500 {
            let mut g = p.zeros_like();
            for j in 0..2 {
                g.get_mut(0)[j] = 2.0 * p.get(0)[j];
            }
            opt.update(&mut p, &g);
        }
        assert!(p.get(0).iter().all(|v| v.abs() < 1e-2));
    }

    #[test]
    fn sigmoid_is_stable() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!(sigmoid(-800.0) >= 0.0 && sigmoid(800.0) <= 1.0);
        assert!((sigmoid(2.0) + sigmoid(-2.0) - 1.0).abs() < 1e-15);
    }
}
