use proptest::prelude::*;

use super::*;

#[test]
fn static_target_keeps_its_box() {
    let s = Scenario::preset("static", 3).unwrap();
    let seq = generate(&s).unwrap();
    assert!(seq.boxes.iter().all(|b| *b == seq.boxes[0]));
}

#[test]
fn same_seed_same_pixels() {
    let s = Scenario::preset("mixed", 11).unwrap();
    assert_eq!(generate(&s).unwrap(), generate(&s).unwrap());
    let other = Scenario::preset("mixed", 12).unwrap();
    assert_ne!(
        generate(&s).unwrap().frames[0],
        generate(&other).unwrap().frames[0]
    );
}

#[test]
fn occlusion_replaces_exactly_the_target_pixels() {
    let mut s = Scenario::preset("linear", 5).unwrap();
    s.events = vec![EventSpan::new(EventKind::Occlusion, 10, 15)];
    let evented = generate(&s).unwrap();
    let clean = generate(&s.without_events()).unwrap();
    for t in 0..s.length {
        let (a, b) = (&evented.frames[t], &clean.frames[t]);
        let gt = evented.boxes[t];
        for y in 0..s.height {
            for x in 0..s.width {
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                let inside = px > gt.x && px < gt.x + gt.w && py > gt.y && py < gt.y + gt.h;
                if (10..=15).contains(&t) && inside {
                    assert_eq!(a.get(x, y), OCCLUDER_LEVEL, "frame {t} ({x},{y})");
                    assert_ne!(b.get(x, y), OCCLUDER_LEVEL);
                } else {
                    assert_eq!(a.get(x, y), b.get(x, y), "frame {t} ({x},{y})");
                }
            }
        }
    }
}

#[test]
fn events_stay_inside_their_spans() {
    for name in ["mixed", "corruption", "distractor", "appearance"] {
        let s = Scenario::preset(name, 21).unwrap();
        let evented = generate(&s).unwrap();
        let clean = generate(&s.without_events()).unwrap();
        assert_eq!(evented.boxes, clean.boxes);
        for t in 0..s.length {
            if s.active(t).is_empty() {
                assert_eq!(evented.frames[t], clean.frames[t], "{name} frame {t}");
                assert!(evented.injected[t].is_none());
            } else if s.active(t) != [EventKind::Distractor] {
                // A distractor may sit fully off-canvas at the ends of its path.
                assert_ne!(evented.frames[t], clean.frames[t], "{name} frame {t}");
            }
        }
    }
}

#[test]
fn corruption_injects_a_displaced_box() {
    let s = Scenario::preset("corruption", 2).unwrap();
    let seq = generate(&s).unwrap();
    for t in 0..s.length {
        let corrupted = s.active(t).contains(&EventKind::Corruption);
        assert_eq!(seq.injected[t].is_some(), corrupted);
        if let Some(j) = seq.injected[t] {
            let gt = seq.boxes[t];
            assert_eq!((j.w, j.h), (gt.w, gt.h));
            assert!(iou(&j, &gt).unwrap() < 0.5);
            assert!(j.x >= 0.0 && j.y >= 0.0 && j.x + j.w <= 64.0 && j.y + j.h <= 64.0);
        }
    }
}

#[test]
fn trajectory_reflects_at_borders() {
    let mut s = Scenario::linear(0);
    s.start = (50.0, 10.0);
    s.target_w = 10.0;
    s.velocity = (3.0, 0.0);
    s.length = 5;
    let xs: Vec<f64> = trajectory(&s).iter().map(|b| b.x).collect();
    assert_eq!(xs, vec![50.0, 53.0, 52.0, 49.0, 46.0]);
}

#[test]
fn invalid_scenarios_are_rejected() {
    let mut s = Scenario::linear(0);
    s.events = vec![EventSpan::new(EventKind::Occlusion, 5, 40)];
    assert!(s.validate().is_err());
    assert!(Scenario::preset("nope", 0).is_err());
    let mut s = Scenario::linear(0);
    s.target_w = 80.0;
    assert!(generate(&s).is_err());
}

#[test]
fn dump_round_trips_through_the_header() {
    let s = Scenario::preset("linear", 4).unwrap();
    let seq = generate(&s).unwrap();
    let mut buf = Vec::new();
    dump(&seq, &mut buf).unwrap();
    assert_eq!(&buf[..4], b"PTSQ");
    assert_eq!(buf.len(), 16 + 40 * 64 * 64);
    let (w, h, frames) = read_dump(buf.as_slice()).unwrap();
    assert_eq!((w, h, frames.len()), (64, 64, 40));
    let px = seq.frames[3].get(7, 9);
    assert_eq!(
        frames[3][9 * 64 + 7],
        (px.clamp(0.0, 1.0) * 255.0).round() as u8
    );
    assert!(read_dump(&b"XXXX0000"[..]).is_err());
}

fn boxes(n: usize) -> Vec<BBox> {
    (0..n).map(|i| BBox::new(i as f64, 2.0, 5.0, 4.0)).collect()
}

#[test]
fn perfect_predictions_score_perfectly() {
    let gt = boxes(10);
    let r = evaluate(&gt, &gt, &vec![Vec::new(); 10]).unwrap();
    assert_eq!((r.mean_iou, r.success_50, r.drift_rate), (1.0, 1.0, 0.0));
    assert!((r.auc - 20.0 / 21.0).abs() < 1e-12);
}

#[test]
fn disjoint_predictions_fail_everywhere() {
    let gt = boxes(10);
    let wrong: Vec<BBox> = gt.iter().map(|b| b.translate(100.0, 0.0)).collect();
    let r = evaluate(&wrong, &gt, &vec![Vec::new(); 10]).unwrap();
    assert_eq!(
        (r.mean_iou, r.success_50, r.auc, r.drift_rate),
        (0.0, 0.0, 0.0, 1.0)
    );
}

#[test]
fn mixed_trace_matches_direct_recomputation() {
    let v = [0.9, 0.6, 0.05, 0.4, 0.0, 0.7, 0.5];
    let mut active = vec![Vec::new(); 7];
    active[2] = vec![EventKind::Occlusion];
    active[3] = vec![EventKind::Occlusion, EventKind::Corruption];
    let r = report_from_ious(&v, &active);
    assert!((r.mean_iou - 3.15 / 7.0).abs() < 1e-12);
    assert!((r.success_50 - 3.0 / 7.0).abs() < 1e-12);
    // failures at 2 and 4 out of frames 2..=6
    assert!((r.drift_rate - 2.0 / 5.0).abs() < 1e-12);
    let mut auc = 0.0;
    for i in 0..21 {
        let t = i as f64 * 0.05;
        auc += v.iter().filter(|&&x| x > t).count() as f64 / 7.0;
    }
    assert!((r.auc - auc / 21.0).abs() < 1e-12);
    let occ = r
        .per_event
        .iter()
        .find(|e| e.kind == Some(EventKind::Occlusion))
        .unwrap();
    assert_eq!(occ.frames, 2);
    assert!((occ.mean_iou - 0.225).abs() < 1e-12);
    let none = r.per_event.iter().find(|e| e.kind.is_none()).unwrap();
    assert_eq!(none.frames, 5);
    assert!(r
        .to_csv()
        .starts_with("metric,value\nframes,7\nmean_iou,0.450000\n"));
}

#[test]
fn length_mismatch_is_an_error() {
    assert!(evaluate(&boxes(3), &boxes(4), &vec![Vec::new(); 3]).is_err());
}

proptest! {
    #[test]
    fn improving_one_frame_never_hurts(
        v in prop::collection::vec(0.0f64..1.0, 1..30),
        idx in any::<prop::sample::Index>(),
        bump in 0.0f64..1.0,
    ) {
        let active = vec![Vec::new(); v.len()];
        let before = report_from_ious(&v, &active);
        let mut w = v.clone();
        let i = idx.index(v.len());
        w[i] = (w[i] + bump).min(1.0);
        let after = report_from_ious(&w, &active);
        prop_assert!(after.mean_iou >= before.mean_iou - 1e-12);
        prop_assert!(after.success_50 >= before.success_50);
        prop_assert!(after.auc >= before.auc - 1e-12);
        for x in [before.mean_iou, before.success_50, before.auc, before.drift_rate] {
            prop_assert!((0.0..=1.0).contains(&x));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn generator_is_deterministic_for_any_seed(seed in any::<u64>()) {
        let s = Scenario::preset("mixed", seed).unwrap();
        let a = generate(&s).unwrap();
        let b = generate(&s).unwrap();
        prop_assert_eq!(a, b);
    }
}
