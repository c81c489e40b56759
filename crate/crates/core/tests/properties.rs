use std::sync::{Arc, OnceLock};

use proptest::prelude::*;
use servotrack::bench::{
    annotations_csv, make_report, parse_annotations, GroundTruthTrack, GtEntry, OccluderScript, SceneRenderer,
    SyntheticScenario,
};
use servotrack::features::{FeatureExtractor, FeatureMap};
use servotrack::img::{compose_warps, crop_patch, GrayFrame, WarpParams};
use servotrack::pipeline::{init_tracker, parse_pose_csv, pose_csv, PoseSource, TrackerConfig, TrackerWeights};
use servotrack::predict::{gru_cell, GruLayerWeights, MotionHistory, HIDDEN_SIZE};

fn weights() -> Arc<TrackerWeights> {
    static W: OnceLock<Arc<TrackerWeights>> = OnceLock::new();
    W.get_or_init(|| Arc::new(TrackerWeights::load(&TrackerConfig::default()).unwrap()))
        .clone()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    // Random short clips: one output per call, indices follow the call count,
    // and an ALIGNED pose always passed both gate thresholds.
    #[test]
    fn tracker_outputs_respect_cadence_and_routing(
        seed in 0u64..1000,
        vx in -2.0..2.0f64,
        vy in -2.0..2.0f64,
        coverage in 0.0..1.0f64,
        occ_start in 2usize..8,
    ) {
        let scn = SyntheticScenario {
            target_seed: seed,
            background_seed: seed + 1,
            ..SyntheticScenario::default()
        };
        let renderer = SceneRenderer::new(&scn).unwrap();
        let cfg = TrackerConfig::default();
        let start = [160.0, 120.0];
        let first = renderer.render_frame(start, 0.0, 1.0, 0.0).unwrap();
        let mut tracker = init_tracker(&first, start, &cfg, weights()).unwrap();
        for k in 0..12u64 {
            let c = [start[0] + vx * k as f64, start[1] + vy * k as f64];
            let cov = if (occ_start..occ_start + 3).contains(&(k as usize)) { coverage } else { 0.0 };
            let frame = renderer.render_frame(c, 0.0, 1.0, cov).unwrap();
            let out = tracker.track(&frame).unwrap();
            prop_assert_eq!(out.frame_index, k);
            prop_assert!(out.params.tx.is_finite() && out.params.ty.is_finite() && out.params.scale > 0.0);
            if out.source == PoseSource::Aligned {
                prop_assert!(out.op_percent < cfg.op_threshold, "{:?}", out);
                prop_assert!(out.ncc_score > cfg.ncc_threshold, "{:?}", out);
            }
        }
    }
}

proptest! {
    #[test]
    fn gru_state_stays_in_the_open_unit_box(
        x in proptest::collection::vec(-5.0..5.0f64, 2),
        h in proptest::collection::vec(-0.999..0.999f64, HIDDEN_SIZE),
        w in proptest::collection::vec(-2.0..2.0f64, 3 * (2 * HIDDEN_SIZE + HIDDEN_SIZE * HIDDEN_SIZE + HIDDEN_SIZE)),
    ) {
        let hs = HIDDEN_SIZE;
        let mut rest = w.as_slice();
        let mut take = |n: usize| {
            let (a, b) = rest.split_at(n);
            rest = b;
            a
        };
        let (wz, uz, bz) = (take(2 * hs), take(hs * hs), take(hs));
        let (wr, ur, br) = (take(2 * hs), take(hs * hs), take(hs));
        let (wn, un, bn) = (take(2 * hs), take(hs * hs), take(hs));
        let layer = GruLayerWeights { input_size: 2, wz, uz, bz, wr, ur, br, wn, un, bn };
        let out = gru_cell(&x, &h, &layer).unwrap();
        prop_assert!(out.iter().all(|v| v.is_finite() && v.abs() < 1.0), "{out:?}");
    }

    #[test]
    fn motion_history_is_bounded_and_ordered(k in 2usize..12, n in 0usize..40) {
        let mut hist = MotionHistory::new(k);
        for f in 0..n as u64 {
            hist.push(f, [f as f64, -(f as f64)]).unwrap();
            prop_assert!(hist.len() <= k);
        }
        let frames: Vec<u64> = hist.iter().map(|(f, _)| *f).collect();
        prop_assert!(frames.windows(2).all(|w| w[0] < w[1]));
        prop_assert_eq!(frames.len(), n.min(k));
        if n > 0 {
            prop_assert_eq!(hist.last().unwrap().0, n as u64 - 1);
        }
    }

    #[test]
    fn occluder_coverage_is_a_fraction(
        start in 0usize..50,
        duration in 0usize..30,
        ramp in 0usize..10,
        coverage in 0.0..=1.0f64,
        t in 0usize..120,
    ) {
        let scn = SyntheticScenario {
            occluder: Some(OccluderScript { start_frame: start, duration, coverage, ramp_frames: ramp, seed: 1 }),
            ..SyntheticScenario::default()
        };
        let c = scn.occluder_coverage(t);
        prop_assert!((0.0..=coverage).contains(&c));
        if t >= start && t < start + duration {
            prop_assert_eq!(c, coverage);
        }
    }

    #[test]
    fn report_cdf_and_success_are_consistent(errors in proptest::collection::vec(0.0..60.0f64, 1..200)) {
        let occ = vec![None; errors.len()];
        let r = make_report(&errors, &occ, None).unwrap();
        prop_assert!(r.cdf.windows(2).all(|w| w[1][1] >= w[0][1] && w[1][0] > w[0][0]));
        prop_assert!(r.cdf.iter().all(|p| (0.0..=1.0).contains(&p[1])));
        let below = errors.iter().filter(|e| **e < 2.0).count() as f64 / errors.len() as f64;
        prop_assert_eq!(r.success_at_2px, below);
        if errors.iter().all(|e| *e <= 50.0) {
            prop_assert_eq!(r.cdf.last().unwrap()[1], 1.0);
        }
    }

    #[test]
    fn annotations_round_trip(
        rows in proptest::collection::vec((0.0..320.0f64, 0.0..240.0f64, proptest::option::of(0.0..=1.0f64)), 1..40),
    ) {
        let track = GroundTruthTrack {
            entries: rows.iter().map(|&(x, y, occ)| GtEntry { center: [x, y], theta: 0.0, scale: 1.0, occ }).collect(),
        };
        let parsed = parse_annotations(&annotations_csv(&track)).unwrap();
        prop_assert_eq!(parsed.centers(), track.centers());
        prop_assert_eq!(parsed.occlusion(), track.occlusion());
    }

    #[test]
    fn composing_with_the_inverse_gives_identity(
        tx in -50.0..50.0f64, ty in -50.0..50.0f64, th in -3.0..3.0f64, s in 0.2..5.0f64,
        px in -100.0..100.0f64, py in -100.0..100.0f64,
    ) {
        let p = WarpParams::new(tx, ty, th, s).unwrap();
        let id = compose_warps(&p, &p.inverse().unwrap());
        let q = id.warp_point([px, py]);
        prop_assert!((q[0] - px).abs() < 1e-9 && (q[1] - py).abs() < 1e-9);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn features_are_nonnegative_at_quarter_resolution(seed in any::<u64>(), cx in 40.0..80.0f64, cy in 40.0..80.0f64) {
        let frame = GrayFrame::from_fn(120, 120, |x, y| {
            let v = (x as u64 * 31 + y as u64 * 17 + seed % 97) % 256;
            v as f64
        })
        .unwrap();
        let patch = crop_patch(&frame, [cx, cy], 32, 32).unwrap();
        let f: FeatureMap = FeatureExtractor::fixture().extract(&patch).unwrap();
        prop_assert_eq!((f.height(), f.width()), (8, 8));
        prop_assert!(f.data().iter().all(|v| v.is_finite() && *v >= 0.0));
    }

    #[test]
    fn pose_csv_round_trips(seed in 0u64..500) {
        let scn = SyntheticScenario { target_seed: seed, ..SyntheticScenario::default() };
        let renderer = SceneRenderer::new(&scn).unwrap();
        let c = [150.0, 110.0];
        let frame = renderer.render_frame(c, 0.0, 1.0, 0.0).unwrap();
        let mut tracker = init_tracker(&frame, c, &TrackerConfig::default(), weights()).unwrap();
        let outs: Vec<_> = (0..3).map(|_| tracker.track(&frame).unwrap()).collect();
        let parsed = parse_pose_csv(&pose_csv(&outs, false)).unwrap();
        prop_assert_eq!(parsed, outs);
    }
}
