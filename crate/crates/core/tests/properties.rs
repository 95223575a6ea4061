mod common;

use approx::{assert_abs_diff_eq, assert_relative_eq};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use spil::coattention::{covariance, global_mean, principal_component};
use spil::evalkit::{average_precision_of, pooled_feature, RankEntry, RankList};
use spil::localizer::anchors::MAX_LOG_DELTA;
use spil::localizer::{checkpoint, decode, encode, nms, Detection, HeadDims, HeadParams};
use spil::run::RunConfig;
use spil::selfpaced::{select_pseudo_gt, tau_schedule, union_ranklists};
use spil::{avg_pool_spatial, cosine_xcorr, depthwise_xcorr, mean_kernel, BoundingBox, FeatureMap, Kernel};

use common::*;

fn arb_box() -> impl Strategy<Value = BoundingBox> {
    (0.0..100.0f64, 0.0..100.0f64, 0.5..60.0f64, 0.5..60.0f64)
        .prop_map(|(x, y, w, h)| BoundingBox::new(x, y, x + w, y + h).unwrap())
}

fn arb_map() -> impl Strategy<Value = FeatureMap> {
    (1usize..7, 1usize..7, 1usize..6).prop_flat_map(|(h, w, c)| {
        prop::collection::vec(-3.0..3.0f64, h * w * c).prop_map(move |d| FeatureMap::new(h, w, c, d).unwrap())
    })
}

fn arb_detections() -> impl Strategy<Value = Vec<Detection>> {
    prop::collection::vec((0.0..1.0f64, arb_box()), 0..12).prop_map(|v| {
        v.into_iter()
            .enumerate()
            .map(|(a, (p, b))| Detection {
                probability: p,
                bbox: b,
                mask: None,
                anchor: a,
            })
            .collect()
    })
}

proptest! {
    #[test]
    fn iou_is_symmetric_and_bounded(a in arb_box(), b in arb_box()) {
        let (x, y) = (a.iou(&b), b.iou(&a));
        prop_assert_eq!(x, y);
        prop_assert!((0.0..=1.0).contains(&x));
        assert_abs_diff_eq!(a.iou(&a), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn decode_inverts_encode(anchor in arb_box(), target in arb_box()) {
        let deltas = encode(&anchor, &target);
        // size ratios beyond the clamp are not recoverable by design
        prop_assume!(deltas[2].abs() < MAX_LOG_DELTA && deltas[3].abs() < MAX_LOG_DELTA);
        let back = decode(&anchor, &deltas);
        for (u, v) in back.to_array().iter().zip(target.to_array()) {
            assert_abs_diff_eq!(*u, v, epsilon = 1e-9);
        }
    }

    #[test]
    fn nms_keeps_a_sorted_non_overlapping_subset(dets in arb_detections(), thr in 0.1..0.9f64) {
        let kept = nms(&dets, thr);
        prop_assert!(kept.windows(2).all(|w| w[0].probability >= w[1].probability));
        for (i, a) in kept.iter().enumerate() {
            prop_assert!(dets.iter().any(|d| d.anchor == a.anchor));
            for b in &kept[i + 1..] {
                prop_assert!(a.bbox.iou(&b.bbox) < thr);
            }
        }
        if let Some(top) = dets.iter().map(|d| d.probability).reduce(f64::max) {
            prop_assert_eq!(kept[0].probability, top);
        }
    }

    #[test]
    fn pseudo_gt_is_the_most_probable_detection_above_tau(dets in arb_detections(), tau in 0.0..1.0f64) {
        let best = dets.iter().filter(|d| d.probability > tau).map(|d| d.probability).reduce(f64::max);
        prop_assert_eq!(select_pseudo_gt(&dets, tau).map(|s| s.1), best);
    }

    #[test]
    fn tau_never_increases(k in 1usize..30) {
        let (a, b) = (tau_schedule(k).unwrap(), tau_schedule(k + 1).unwrap());
        prop_assert!(b <= a && b >= 0.5);
    }

    #[test]
    fn xcorr_matches_triple_loop(fm in arb_map(), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = random_kernel(fm.channels(), &mut rng);
        let got = depthwise_xcorr(&k, &fm).unwrap();
        let want = naive_xcorr(&k, &fm);
        prop_assert_eq!(got.map().data(), want.as_slice());
    }

    #[test]
    fn cosine_correlation_is_bounded(fm in arb_map(), seed in any::<u64>(), floor in 1e-6..2.0f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = random_kernel(fm.channels(), &mut rng);
        let sums = cosine_xcorr(&k, &fm, floor).unwrap().channel_sum();
        prop_assert!(sums.iter().all(|s| s.abs() <= 1.0 + 1e-12));
        // a map scaled far above the floor correlates like its direction
        let scaled = FeatureMap::new(fm.height(), fm.width(), fm.channels(), fm.data().iter().map(|v| v * 7.0).collect()).unwrap();
        let big = cosine_xcorr(&k, &scaled, 1e-9).unwrap();
        let unit = cosine_xcorr(&k, &fm, 1e-9).unwrap();
        for (a, b) in big.map().data().iter().zip(unit.map().data()) {
            assert_abs_diff_eq!(*a, *b, epsilon = 1e-9);
        }
    }

    #[test]
    fn mean_kernel_averages_pooled_crops(maps in prop::collection::vec(arb_map(), 1..4)) {
        let c = maps[0].channels();
        let maps: Vec<FeatureMap> = maps.into_iter().filter(|m| m.channels() == c).collect();
        let k = mean_kernel(&maps).unwrap();
        for ch in 0..c {
            let want = maps.iter().map(|m| avg_pool_spatial(m).values()[ch]).sum::<f64>() / maps.len() as f64;
            assert_relative_eq!(k.values()[ch], want, epsilon = 1e-12, max_relative = 1e-12);
        }
    }

    #[test]
    fn pooled_feature_matches_cell_membership(fm in arb_map(), b in arb_box(), stride in 1.0..16.0f64) {
        let got = pooled_feature(&fm, &b, stride);
        let mut members = Vec::new();
        for i in 0..fm.height() {
            for j in 0..fm.width() {
                let (cx, cy) = ((j as f64 + 0.5) * stride, (i as f64 + 0.5) * stride);
                if cx >= b.x_min && cx < b.x_max && cy >= b.y_min && cy < b.y_max {
                    members.push((i, j));
                }
            }
        }
        if !members.is_empty() {
            let mut want: Vec<f64> = (0..fm.channels())
                .map(|ch| members.iter().map(|(i, j)| fm.get(*i, *j, ch)).sum::<f64>() / members.len() as f64)
                .collect();
            let n = want.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n > 0.0 {
                want.iter_mut().for_each(|v| *v /= n);
            }
            for (a, w) in got.iter().zip(&want) {
                assert_abs_diff_eq!(*a, *w, epsilon = 1e-12);
            }
        }
        let norm = got.iter().map(|v| v * v).sum::<f64>().sqrt();
        prop_assert!(norm == 0.0 || (norm - 1.0).abs() < 1e-9);
    }

    #[test]
    fn retrieval_ap_matches_definition(flags in prop::collection::vec(any::<bool>(), 0..32)) {
        assert_abs_diff_eq!(average_precision_of(&flags), retrieval_ap_oracle(&flags), epsilon = 1e-12);
    }

    #[test]
    fn union_keeps_every_image_once(lists in prop::collection::vec(prop::collection::vec((0u8..20, 0.0..1.0f64), 0..10), 1..4)) {
        let lists: Vec<RankList> = lists
            .into_iter()
            .map(|entries| RankList {
                query_id: "q".into(),
                entries: entries
                    .into_iter()
                    .map(|(id, s)| RankEntry {
                        image_id: format!("img{id}"),
                        bbox: BoundingBox::new(0.0, 0.0, 1.0, 1.0).unwrap(),
                        score: s,
                    })
                    .collect(),
            })
            .collect();
        let refs: Vec<&RankList> = lists.iter().collect();
        let u = union_ranklists("q", &refs);
        let mut ids: Vec<&str> = u.entries.iter().map(|e| e.image_id.as_str()).collect();
        let n = ids.len();
        ids.sort_unstable();
        ids.dedup();
        prop_assert_eq!(ids.len(), n);
        for l in &lists {
            for e in &l.entries {
                prop_assert!(ids.contains(&e.image_id.as_str()));
            }
        }
        prop_assert!(u.entries.windows(2).all(|w| w[0].score >= w[1].score));
    }

    #[test]
    fn checkpoint_text_round_trips_bitwise(values in prop::collection::vec(-1e6..1e6f64, 1..2)) {
        let dims = HeadDims { channels: 3, context: 1, anchor_types: 2 };
        let n = HeadParams::zeros(dims).values().len();
        let v: Vec<f64> = (0..n).map(|i| values[0] / (i as f64 + 1.0)).collect();
        let p = HeadParams::from_values(dims, v).unwrap();
        let back = checkpoint::from_text(&checkpoint::to_text(&p), std::path::Path::new("mem")).unwrap();
        prop_assert_eq!(back, p);
    }

    #[test]
    fn principal_direction_ignores_shifts(maps in prop::collection::vec(arb_map(), 1..3), offset in -20.0..20.0f64) {
        let c = maps[0].channels();
        let maps: Vec<FeatureMap> = maps.into_iter().filter(|m| m.channels() == c).collect();
        let shifted: Vec<FeatureMap> = maps.iter().map(|m| m.shifted(&vec![offset; c]).unwrap()).collect();
        let cov = |ms: &[FeatureMap]| {
            let refs: Vec<&FeatureMap> = ms.iter().collect();
            covariance(&refs, &global_mean(&refs).unwrap()).unwrap()
        };
        let (a, b) = (cov(&maps), cov(&shifted));
        for (x, y) in a.entries().iter().zip(b.entries()) {
            assert_abs_diff_eq!(*x, *y, epsilon = 1e-9);
        }
        if let (Ok(p), Ok(q)) = (principal_component(&a), principal_component(&b)) {
            assert_abs_diff_eq!(p.eigenvalue, q.eigenvalue, epsilon = 1e-9);
        }
    }
}

#[test]
fn run_config_text_round_trips() {
    let mut cfg = RunConfig::default().with_seed(42);
    cfg.topk = 17;
    cfg.correlation = spil::Correlation::Cosine { floor: 0.3 };
    cfg.fewshot_correlation = spil::Correlation::Raw;
    let text = cfg.to_text();
    let mut kv = spil::config::KeyValues::parse(&text, std::path::Path::new("mem")).unwrap();
    assert_eq!(RunConfig::from_key_values(&mut kv).unwrap(), cfg);
}

#[test]
fn eigen_oracle_on_random_psd_matrices() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for order in 1..=16 {
        let m = random_psd(order, &mut rng);
        let p = principal_component(&m).unwrap();
        let (v, lambda, _) = dense_eigen(&m);
        assert_relative_eq!(p.eigenvalue, lambda, max_relative = 1e-9);
        assert!(cosine(&p.vector, &v).abs() > 1.0 - 1e-9);
    }
}

#[test]
fn kernel_rejects_channel_mismatch() {
    let fm = FeatureMap::filled(2, 2, 3, 1.0).unwrap();
    let k = Kernel::new(vec![1.0, 2.0]).unwrap();
    assert!(depthwise_xcorr(&k, &fm).is_err());
    assert!(cosine_xcorr(&k, &fm, 0.5).is_err());
}
