//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit on any FAIL.
//! Runs without the libtest harness so the lines are always shown and the
//! throughput measurement has the machine to itself.

use std::fs;
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use servotrack::align::{align_lk, precompute_sdi, AlignConfig};
use servotrack::bench::{gen_synthetic, SyntheticScenario};
use servotrack::features::{conv2d, maxpool2, FeatureMap, Tensor, TensorStore};
use servotrack::gate::{evaluate, route, GateConfig, Route};
use servotrack::img::{GrayFrame, Patch, WarpParams};
use servotrack::locate::ncc_map;
use servotrack::nn::{relative_error, ParamSet};
use servotrack::pipeline::{
    baseline_lk_track, servo_sim, track_sequence, PoseOutput, PoseSource, ServoConfig, TrackerConfig, TrackerWeights,
};
use servotrack::predict::{gru_cell, gru_layout, gru_loss_grad, GruLayerWeights, HIDDEN_SIZE};
use servotrack::residual::{
    normalized_warp, residual_layout, residual_loss_grad, ResidualNet, ResidualSample, WarpResidual,
};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, a: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-a..a)).collect()
}

fn random_map(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> FeatureMap {
    let data = (0..c * h * w).map(|_| rng.random_range(-1.0f32..1.0)).collect();
    FeatureMap::new(c, h, w, data).unwrap()
}

// ---------------------------------------------------------------- criterion 1

fn ncc_oracle(frame: &GrayFrame, t: &GrayFrame, x: usize, y: usize) -> f64 {
    let (tw, th) = (t.width(), t.height());
    let n = (tw * th) as f64;
    let tmean = t.data().iter().sum::<f64>() / n;
    let mut wmean = 0.0;
    for j in 0..th {
        for i in 0..tw {
            wmean += frame.get(x + i, y + j);
        }
    }
    wmean /= n;
    let (mut num, mut st, mut sw) = (0.0, 0.0, 0.0);
    for j in 0..th {
        for i in 0..tw {
            let a = t.get(i, j) - tmean;
            let b = frame.get(x + i, y + j) - wmean;
            num += a * b;
            st += a * a;
            sw += b * b;
        }
    }
    num / (st * sw).sqrt()
}

fn conv_oracle(input: &FeatureMap, w: &[f64], b: &[f64], cout: usize) -> Vec<f64> {
    let (cin, h, wd) = (input.channels(), input.height(), input.width());
    let mut out = vec![0.0; cout * h * wd];
    for o in 0..cout {
        for y in 0..h {
            for x in 0..wd {
                let mut acc = b[o];
                for c in 0..cin {
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let (sy, sx) = (y as isize + ky as isize - 1, x as isize + kx as isize - 1);
                            if sy < 0 || sx < 0 || sy >= h as isize || sx >= wd as isize {
                                continue;
                            }
                            acc += w[((o * cin + c) * 3 + ky) * 3 + kx] * input.get(c, sy as usize, sx as usize) as f64;
                        }
                    }
                }
                out[(o * h + y) * wd + x] = acc;
            }
        }
    }
    out
}

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

fn gru_oracle(x: &[f64], h: &[f64], g: &[Vec<f64>]) -> Vec<f64> {
    let hs = h.len();
    let dot = |m: &[f64], v: &[f64], i: usize| -> f64 { (0..v.len()).map(|j| m[i * v.len() + j] * v[j]).sum() };
    (0..hs)
        .map(|i| {
            let z = sigmoid(dot(&g[0], x, i) + dot(&g[1], h, i) + g[2][i]);
            let r = sigmoid(dot(&g[3], x, i) + dot(&g[4], h, i) + g[5][i]);
            let n = (dot(&g[6], x, i) + r * dot(&g[7], h, i) + g[8][i]).tanh();
            (1.0 - z) * n + z * h[i]
        })
        .collect()
}

fn residual_oracle(store: &TensorStore, t: &FeatureMap, a: &FeatureMap, p: &WarpParams, half: f64) -> [f64; 4] {
    let get = |n: &str| store.get(n).unwrap().to_f64();
    let x = t.concat(a).unwrap();
    let relu = |v: Vec<f64>| v.into_iter().map(|x| x.max(0.0)).collect::<Vec<_>>();
    let a1 = relu(conv_oracle(&x, &get("conv1.w"), &get("conv1.b"), 64));
    let (h, w) = (t.height(), t.width());
    let a1 = FeatureMap::new(64, h, w, a1.iter().map(|v| *v as f32).collect()).unwrap();
    // The second conv reads single-precision activations, like the network does.
    let a2 = relu(conv_oracle(&a1, &get("conv2.w"), &get("conv2.b"), 32));
    let mut u: Vec<f64> = (0..32)
        .map(|c| a2[c * h * w..(c + 1) * h * w].iter().sum::<f64>() / (h * w) as f64)
        .collect();
    u.extend(normalized_warp(p, half));
    let (w1, b1, w2, b2) = (get("fc1.w"), get("fc1.b"), get("fc2.w"), get("fc2.b"));
    let h1: Vec<f64> = (0..32)
        .map(|o| (b1[o] + (0..36).map(|i| w1[o * 36 + i] * u[i]).sum::<f64>()).max(0.0))
        .collect();
    let mut y = [0.0; 4];
    for (o, v) in y.iter_mut().enumerate() {
        *v = b2[o] + (0..32).map(|i| w2[o * 32 + i] * h1[i]).sum::<f64>();
    }
    y
}

fn oracle_equivalence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = [0.0f64; 5];
    for _ in 0..100 {
        let (fw, fh) = (rng.random_range(16..=64), rng.random_range(16..=64));
        let (tw, th) = (rng.random_range(3..=fw.min(16)), rng.random_range(3..=fh.min(16)));
        let frame = GrayFrame::from_fn(fw, fh, |_, _| rng.random_range(0.0..255.0)).unwrap();
        let t = GrayFrame::from_fn(tw, th, |_, _| rng.random_range(0.0..255.0)).unwrap();
        let map = ncc_map(&frame, &t).unwrap();
        for y in 0..map.height() {
            for x in 0..map.width() {
                worst[0] = worst[0].max((map.get(x, y) - ncc_oracle(&frame, &t, x, y)).abs());
            }
        }

        let (cin, cout) = (rng.random_range(1..=4), rng.random_range(1..=6));
        let (h, w) = (rng.random_range(1..=12), rng.random_range(1..=12));
        let input = random_map(&mut rng, cin, h, w);
        let wv = uniform(&mut rng, cout * cin * 9, 0.5);
        let bv = uniform(&mut rng, cout, 0.5);
        let wt = Tensor::from_f64("w", vec![cout, cin, 3, 3], &wv).unwrap();
        let bt = Tensor::from_f64("b", vec![cout], &bv).unwrap();
        let got = conv2d(&input, &wt, &bt).unwrap();
        let want = conv_oracle(&input, &wt.to_f64(), &bt.to_f64(), cout);
        for (g, e) in got.data().iter().zip(&want) {
            worst[1] = worst[1].max((*g as f64 - e).abs());
        }

        let pooled = maxpool2(&input);
        for c in 0..cin {
            for oy in 0..pooled.height() {
                for ox in 0..pooled.width() {
                    let mut m = f32::NEG_INFINITY;
                    for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                        let (y, x) = ((2 * oy + dy).min(h - 1), (2 * ox + dx).min(w - 1));
                        m = m.max(input.get(c, y, x));
                    }
                    worst[2] = worst[2].max((pooled.get(c, oy, ox) - m).abs() as f64);
                }
            }
        }

        let insz = if rng.random_bool(0.5) { 2 } else { HIDDEN_SIZE };
        let hs = HIDDEN_SIZE;
        let g: Vec<Vec<f64>> = [insz * hs, hs * hs, hs, insz * hs, hs * hs, hs, insz * hs, hs * hs, hs]
            .iter()
            .map(|&n| uniform(&mut rng, n, 0.6))
            .collect();
        let x = uniform(&mut rng, insz, 1.0);
        let hprev = uniform(&mut rng, hs, 1.0);
        let weights = GruLayerWeights {
            input_size: insz,
            wz: &g[0],
            uz: &g[1],
            bz: &g[2],
            wr: &g[3],
            ur: &g[4],
            br: &g[5],
            wn: &g[6],
            un: &g[7],
            bn: &g[8],
        };
        let got = gru_cell(&x, &hprev, &weights).unwrap();
        for (a, b) in got.iter().zip(gru_oracle(&x, &hprev, &g)) {
            worst[3] = worst[3].max((a - b).abs());
        }

        let c = rng.random_range(1..=3);
        let (h, w) = (rng.random_range(2..=6), rng.random_range(2..=6));
        let mut store = TensorStore::new();
        for (name, shape) in residual_layout(c) {
            let n: usize = shape.iter().product();
            let fan_in = if shape.len() > 1 {
                shape[1..].iter().product::<usize>()
            } else {
                4
            };
            let vals = uniform(&mut rng, n, (3.0 / fan_in as f64).sqrt());
            store.insert(Tensor::from_f64(name, shape, &vals).unwrap()).unwrap();
        }
        let half = 2.0 * w as f64;
        let net = ResidualNet::new(&store, c, half).unwrap();
        let (t, a) = (random_map(&mut rng, c, h, w), random_map(&mut rng, c, h, w));
        let p = WarpParams::new(
            rng.random_range(-3.0..3.0),
            rng.random_range(-3.0..3.0),
            rng.random_range(-0.2..0.2),
            rng.random_range(0.9..1.1),
        )
        .unwrap();
        let got = net.forward(&t, &a, &p).unwrap().to_array();
        for (g, e) in got.iter().zip(residual_oracle(&store, &t, &a, &p, half)) {
            worst[4] = worst[4].max((g - e).abs());
        }
    }
    let pass = worst[0] <= 1e-5 && worst[1] <= 1e-5 && worst[2] == 0.0 && worst[3] <= 1e-6 && worst[4] <= 1e-5;
    outcome(
        pass,
        format!(
            "100 instances; max |diff| ncc {:.1e}, conv2d {:.1e}, maxpool {:.1e}, gru {:.1e}, residual {:.1e}",
            worst[0], worst[1], worst[2], worst[3], worst[4]
        ),
    )
}

// ---------------------------------------------------------------- criterion 2

/// Sum of Gaussian blobs per channel, evaluated analytically.
struct SmoothField {
    blobs: Vec<Vec<(f64, f64, f64, f64)>>,
}

impl SmoothField {
    fn random(rng: &mut ChaCha8Rng, channels: usize, extent: f64) -> Self {
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

    fn render(&self, w: usize, h: usize, warp: &WarpParams) -> FeatureMap {
        let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
        let mut data = Vec::new();
        for blobs in &self.blobs {
            for y in 0..h {
                for x in 0..w {
                    let q = warp.warp_point([x as f64 - cx, y as f64 - cy]);
                    let v: f64 = blobs
                        .iter()
                        .map(|&(bx, by, r, a)| a * (-((q[0] - bx).powi(2) + (q[1] - by).powi(2)) / (2.0 * r * r)).exp())
                        .sum();
                    data.push(v as f32);
                }
            }
        }
        FeatureMap::new(self.blobs.len(), h, w, data).unwrap()
    }
}

fn lk_recovery() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let cfg = AlignConfig {
        feature_stride: 1,
        max_iterations: 20,
        ..AlignConfig::default()
    };
    let mut ok = 0;
    for _ in 0..100 {
        let field = SmoothField::random(&mut rng, 4, 8.0);
        let gt = WarpParams::new(
            rng.random_range(-3.0..=3.0),
            rng.random_range(-3.0..=3.0),
            rng.random_range(-0.1..=0.1),
            rng.random_range(0.95..=1.05),
        )
        .unwrap();
        let template = field.render(16, 16, &WarpParams::IDENTITY);
        let patch = field.render(16, 16, &gt.inverse().unwrap());
        let model = precompute_sdi(&template).unwrap();
        let Ok(r) = align_lk(&model, &patch, WarpParams::IDENTITY, &cfg) else {
            continue;
        };
        let p = r.params;
        if (p.tx - gt.tx).abs() <= 0.05
            && (p.ty - gt.ty).abs() <= 0.05
            && (p.theta - gt.theta).abs() <= 0.005
            && (p.scale - gt.scale).abs() <= 0.005
            && r.iterations_used <= 20
        {
            ok += 1;
        }
    }
    outcome(
        ok >= 95,
        format!("{ok}/100 recovered within 0.05 px / 0.005 rad / 0.005 in <= 20 iterations (need 95)"),
    )
}

// ---------------------------------------------------------------- criterion 3

fn random_params(layout: &[(String, Vec<usize>)], rng: &mut ChaCha8Rng, a: f64) -> ParamSet {
    let mut p = ParamSet::new();
    for (name, shape) in layout {
        let n = shape.iter().product();
        p.push(name.clone(), shape.clone(), uniform(rng, n, a));
    }
    p
}

/// Worst relative error over up to `per_tensor` entries of every tensor.
fn grad_check(
    p: &ParamSet,
    per_tensor: usize,
    rng: &mut ChaCha8Rng,
    loss: impl Fn(&ParamSet) -> (f64, ParamSet),
) -> (f64, usize) {
    let (_, g) = loss(p);
    let (mut worst, mut checked) = (0.0f64, 0);
    for t in 0..p.len() {
        let n = p.get(t).len();
        let idx: Vec<usize> = if n <= per_tensor {
            (0..n).collect()
        } else {
            (0..per_tensor).map(|_| rng.random_range(0..n)).collect()
        };
        for j in idx {
            let h = 1e-6;
            let mut plus = p.clone();
            plus.get_mut(t)[j] += h;
            let mut minus = p.clone();
            minus.get_mut(t)[j] -= h;
            let numeric = (loss(&plus).0 - loss(&minus).0) / (2.0 * h);
            let analytic = g.get(t)[j];
            checked += 1;
            if numeric.abs() < 1e-9 && analytic.abs() < 1e-9 {
                continue;
            }
            worst = worst.max(relative_error(analytic, numeric));
        }
    }
    (worst, checked)
}

fn gradient_checks() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let c = 2;
    let samples: Vec<ResidualSample> = (0..3)
        .map(|_| ResidualSample {
            template: random_map(&mut rng, c, 4, 4),
            aligned: random_map(&mut rng, c, 4, 4),
            params: WarpParams::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), 0.05, 1.02).unwrap(),
            target: WarpResidual::from_array([0.3, -0.2, 0.01, -0.005]),
        })
        .collect();
    let refs: Vec<&ResidualSample> = samples.iter().collect();
    let rp = random_params(&residual_layout(c), &mut rng, 0.3);
    let (res_worst, res_n) = grad_check(&rp, 8, &mut rng, |p| residual_loss_grad(p, &refs, 8.0).unwrap());

    let windows: Vec<(Vec<[f64; 2]>, [f64; 2])> = (0..3)
        .map(|_| {
            let seq = (0..6)
                .map(|_| [rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5)])
                .collect();
            (seq, [rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5)])
        })
        .collect();
    let gp = random_params(&gru_layout(), &mut rng, 0.6);
    let (gru_worst, gru_n) = grad_check(&gp, 8, &mut rng, |p| gru_loss_grad(p, &windows).unwrap());
    outcome(
        res_worst < 1e-4 && gru_worst < 1e-4,
        format!("max relative error residual {res_worst:.1e} ({res_n} entries), gru {gru_worst:.1e} ({gru_n} entries); limit 1e-4"),
    )
}

// ---------------------------------------------------------------- criterion 4

fn gate_boundaries() -> Outcome {
    let cfg = GateConfig::default();
    let ops = [0.0, 39.0, 39.999, 40.0, 40.001, 41.0, 100.0];
    let nccs = [-1.0, 0.0, 0.599, 0.6, 0.601, 0.9, 1.0];
    let mut mismatches = 0;
    let mut cases = 0;
    for &op in &ops {
        for &ncc in &nccs {
            cases += 1;
            let want = if op < 40.0 && ncc > 0.6 {
                Route::Align
            } else {
                Route::Fallback
            };
            if route(op, ncc, &cfg) != want {
                mismatches += 1;
            }
        }
    }
    // Pixel level: 10x10 patches with k pixels differing by `d`.
    let template = Patch::from_frame(GrayFrame::filled(10, 10, 100.0).unwrap());
    for (k, d, want_op, want_route) in [
        (40, 31.0, 40.0, Route::Fallback),
        (39, 31.0, 39.0, Route::Align),
        (60, 30.0, 0.0, Route::Align),
        (41, 30.5, 41.0, Route::Fallback),
    ] {
        cases += 1;
        let frame = GrayFrame::from_fn(10, 10, |x, y| if y * 10 + x < k { 100.0 + d } else { 100.0 }).unwrap();
        let got = evaluate(&Patch::from_frame(frame), &template, 0.9, &cfg).unwrap();
        if got.report.op_percent != want_op || got.route != want_route {
            mismatches += 1;
        }
    }
    outcome(
        mismatches == 0,
        format!("{cases} boundary cases at OP 40 / NCC 0.6 / tau 30, {mismatches} mismatches"),
    )
}

// ------------------------------------------------------------ criteria 5 to 7

struct Benchmark {
    hybrid: Vec<PoseOutput>,
    baseline: Vec<PoseOutput>,
    centers: Vec<[f64; 2]>,
    occ: Vec<f64>,
}

fn errors(poses: &[PoseOutput], centers: &[[f64; 2]]) -> Vec<f64> {
    poses
        .iter()
        .zip(centers)
        .map(|(p, c)| {
            let e = p.center();
            ((e[0] - c[0]).powi(2) + (e[1] - c[1]).powi(2)).sqrt()
        })
        .collect()
}

fn success(e: &[f64]) -> f64 {
    e.iter().filter(|v| **v < 2.0).count() as f64 / e.len() as f64
}

fn run_benchmark() -> Benchmark {
    let scn = SyntheticScenario::default();
    let seq = gen_synthetic(&scn).unwrap();
    let centers = seq.truth.centers();
    let cfg = TrackerConfig::default();
    let weights = Arc::new(TrackerWeights::load(&cfg).unwrap());
    let start = Instant::now();
    let hybrid = track_sequence(&seq.frames, centers[0], &cfg, weights).unwrap();
    eprintln!(
        "hybrid run: {} frames in {:.1} s",
        hybrid.len(),
        start.elapsed().as_secs_f64()
    );
    let baseline = baseline_lk_track(&seq.frames, centers[0], &cfg).unwrap();
    let occ = seq.truth.entries.iter().map(|e| e.occ.unwrap_or(0.0)).collect();
    Benchmark {
        hybrid,
        baseline,
        centers,
        occ,
    }
}

fn occlusion_benchmark(b: &Benchmark) -> Outcome {
    let e = errors(&b.hybrid, &b.centers);
    let s = success(&e);
    let max = e.iter().cloned().fold(0.0, f64::max);
    let heavy: Vec<usize> = (0..b.occ.len()).filter(|&i| b.occ[i] >= 0.9).collect();
    let routed = heavy
        .iter()
        .filter(|&&i| b.hybrid[i].source != PoseSource::Aligned)
        .count();
    let window_ok = !heavy.is_empty() && routed == heavy.len();
    outcome(
        s >= 0.9 && max < 10.0 && window_ok,
        format!(
            "success@2px {s:.3} (>= 0.9), max {max:.2} px (< 10), fallback on {routed}/{} frames at 90% occlusion (frames {}..={})",
            heavy.len(),
            heavy.first().copied().unwrap_or(0),
            heavy.last().copied().unwrap_or(0)
        ),
    )
}

fn comparator_separation(b: &Benchmark) -> Outcome {
    let hybrid = success(&errors(&b.hybrid, &b.centers));
    let eb = errors(&b.baseline, &b.centers);
    let base = success(&eb);
    let window_max = (0..eb.len())
        .filter(|&i| b.occ[i] > 0.0)
        .map(|i| eb[i])
        .fold(0.0, f64::max);
    let gap = 100.0 * (hybrid - base);
    outcome(
        gap >= 20.0 && window_max > 10.0,
        format!("baseline success@2px {base:.3} vs hybrid {hybrid:.3} (gap {gap:.1} points, need 20), baseline max in occlusion window {window_max:.1} px (need > 10)"),
    )
}

/// `None` for the warning band.
fn throughput(b: &Benchmark) -> (Option<bool>, String) {
    let mean = b.hybrid.iter().map(|p| p.elapsed_ms).sum::<f64>() / b.hybrid.len() as f64;
    let status = if mean <= 30.0 {
        Some(true)
    } else if mean <= 45.0 {
        None
    } else {
        Some(false)
    };
    (
        status,
        format!("mean {mean:.2} ms/frame at 64x64 patch, 320x240 frame (target 30, warn to 45)"),
    )
}

// ---------------------------------------------------------------- criterion 8

fn servo_convergence() -> Outcome {
    let cfg = ServoConfig::default();
    let tcfg = TrackerConfig::default();
    let weights = Arc::new(TrackerWeights::load(&tcfg).unwrap());
    let log = servo_sim(&cfg, &tcfg, weights).unwrap();
    let mut norms: Vec<f64> = log.steps.iter().map(|s| s.error_norm).collect();
    norms.push(log.final_norm);
    let ratios: Vec<f64> = norms.windows(2).filter(|w| w[0] >= 1.0).map(|w| w[1] / w[0]).collect();
    let ratio_ok = !ratios.is_empty() && ratios.iter().all(|r| (r - 0.5).abs() <= 0.05);
    let reached = norms.iter().position(|n| *n < 0.5);
    let (lo, hi) = ratios
        .iter()
        .fold((f64::INFINITY, 0.0f64), |(l, h), r| (l.min(*r), h.max(*r)));
    outcome(
        ratio_ok && reached.is_some_and(|k| k <= 12) && !log.diverged,
        format!(
            "L=I, lambda*dt=0.5: per-step ratio in [{lo:.4}, {hi:.4}] over {} steps, norm < 0.5 after {} steps (need <= 12), final {:.3}",
            ratios.len(),
            reached.map_or("never".into(), |k| k.to_string()),
            log.final_norm
        ),
    )
}

// ---------------------------------------------------------------- criterion 9

fn cli(args: &[&str]) -> i32 {
    servotrack::cli::run(std::iter::once("servotrack").chain(args.iter().copied()))
}

fn pipeline_run(root: &Path) -> Result<(), String> {
    let (seq, poses, report) = (root.join("seq"), root.join("poses.csv"), root.join("report"));
    let s = |p: &Path| p.to_str().unwrap().to_owned();
    let steps: [Vec<String>; 3] = [
        vec!["synth".into(), "--out".into(), s(&seq), "--seed".into(), "7".into()],
        vec![
            "track".into(),
            "--frames".into(),
            s(&seq),
            "--out".into(),
            s(&poses),
            "--deterministic".into(),
        ],
        vec![
            "eval".into(),
            "--poses".into(),
            s(&poses),
            "--truth".into(),
            s(&seq.join("annotations.csv")),
            "--out".into(),
            s(&report),
        ],
    ];
    for args in &steps {
        let refs: Vec<&str> = args.iter().map(String::as_str).collect();
        let code = cli(&refs);
        if code != 0 {
            return Err(format!("`{}` exited {code}", args[0]));
        }
    }
    Ok(())
}

const COMPARED: [&str; 7] = [
    "seq/annotations.csv",
    "seq/ground_truth.csv",
    "poses.csv",
    "report/cdf.csv",
    "report/error_over_time.csv",
    "report/scatter.csv",
    "report/report.json",
];

fn reproducibility() -> Outcome {
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    for d in &dirs {
        if let Err(e) = pipeline_run(d.path()) {
            return outcome(false, e);
        }
    }
    let differing: Vec<&str> = COMPARED
        .iter()
        .copied()
        .filter(|f| {
            fs::read(dirs[0].path().join(f)).ok() != fs::read(dirs[1].path().join(f)).ok()
                || !dirs[0].path().join(f).exists()
        })
        .collect();
    outcome(
        differing.is_empty(),
        if differing.is_empty() {
            format!(
                "synth -> track -> eval twice with seed 7: {} outputs byte-identical",
                COMPARED.len()
            )
        } else {
            format!("outputs differ or are missing: {}", differing.join(", "))
        },
    )
}

fn main() {
    let mut failed = 0;
    let mut report = |n: usize, name: &str, status: Option<bool>, detail: String| {
        let tag = match status {
            Some(true) => "PASS",
            Some(false) => {
                failed += 1;
                "FAIL"
            }
            None => "WARN",
        };
        println!("[{tag}] {n}. {name}: {detail}");
    };
    let o = oracle_equivalence();
    report(1, "oracle equivalence", Some(o.pass), o.detail);
    let o = lk_recovery();
    report(2, "LK recovery", Some(o.pass), o.detail);
    let o = gradient_checks();
    report(3, "gradient checks", Some(o.pass), o.detail);
    let o = gate_boundaries();
    report(4, "gate boundary table", Some(o.pass), o.detail);
    let b = run_benchmark();
    let o = occlusion_benchmark(&b);
    report(5, "occlusion benchmark", Some(o.pass), o.detail);
    let o = comparator_separation(&b);
    report(6, "comparator separation", Some(o.pass), o.detail);
    let (status, detail) = throughput(&b);
    report(7, "throughput", status, detail);
    let o = servo_convergence();
    report(8, "IBVS convergence", Some(o.pass), o.detail);
    let o = reproducibility();
    report(9, "reproducibility", Some(o.pass), o.detail);
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
