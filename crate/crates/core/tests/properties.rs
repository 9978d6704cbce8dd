use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use xdepict::detector::{nms, Detection};
use xdepict::evaluation::{match_detections, pr_curve, ranked_order, Verdict, VerdictCounts, MATCH_IOU};
use xdepict::geometry::{decode_bbox, encode_bbox, iou, Annotation, BBox};
use xdepict::proposals::{selective_search, SelectiveSearchParams};
use xdepict::roi_pool::{roi_pool_forward, RoiPoolConfig};
use xdepict::sampling::{classify_roi, label_proposals, sample_minibatch, RoiClass, RoiSamplingConfig, SamplingPreset};
use xdepict::tensor::Tensor;
use xdepict::experiment::{ExperimentConfig, Pooling, SamplingSpec};

fn bbox() -> impl Strategy<Value = BBox> {
    (0.0..200.0f64, 0.0..200.0f64, 0.5..120.0f64, 0.5..120.0f64)
        .prop_map(|(x, y, w, h)| BBox::new(x, y, x + w, y + h).unwrap())
}

fn detection(images: usize) -> impl Strategy<Value = Detection> {
    (0..images, bbox(), 0.0..1.0f64).prop_map(|(i, bbox, score)| Detection {
        image_id: format!("img{i}"),
        bbox,
        score,
    })
}

fn annotation(images: usize) -> impl Strategy<Value = Annotation> {
    (0..images, bbox(), prop::bool::weighted(0.2))
        .prop_map(|(i, b, d)| Annotation::new(format!("img{i}"), b).difficult(d))
}

fn preset() -> impl Strategy<Value = RoiSamplingConfig> {
    prop::sample::select(SamplingPreset::NAMED.to_vec()).prop_map(RoiSamplingConfig::preset)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn iou_is_bounded_symmetric_and_reflexive(a in bbox(), b in bbox()) {
        let o = iou(&a, &b);
        prop_assert!((0.0..=1.0).contains(&o));
        prop_assert_eq!(o, iou(&b, &a));
        prop_assert!((iou(&a, &a) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn encode_decode_round_trip(p in bbox(), g in bbox()) {
        let back = decode_bbox(&p, &encode_bbox(&p, &g));
        for (x, y) in back.key().iter().zip(g.key()) {
            prop_assert!((x - y).abs() < 1e-9, "{back} vs {g}");
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn nms_output_is_a_suppressed_subset(dets in prop::collection::vec(detection(2), 0..50), t in 0.05..0.95f64) {
        let kept = nms(dets.clone(), t);
        for k in &kept {
            prop_assert!(dets.contains(k));
        }
        for w in kept.windows(2) {
            prop_assert!(w[0].score >= w[1].score);
        }
        for (i, a) in kept.iter().enumerate() {
            for b in &kept[i + 1..] {
                prop_assert!(a.image_id != b.image_id || iou(&a.bbox, &b.bbox) <= t);
            }
        }
    }

    #[test]
    fn matching_ignores_input_order(
        dets in prop::collection::vec(detection(3), 0..25),
        gts in prop::collection::vec(annotation(3), 0..8),
        seed in any::<u64>(),
    ) {
        let verdicts = match_detections(&dets, &gts, MATCH_IOU);
        let mut perm: Vec<usize> = (0..dets.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rand::seq::SliceRandom::shuffle(perm.as_mut_slice(), &mut rng);
        let shuffled: Vec<Detection> = perm.iter().map(|&i| dets[i].clone()).collect();
        let again = match_detections(&shuffled, &gts, MATCH_IOU);
        for (j, &i) in perm.iter().enumerate() {
            prop_assert_eq!(again[j], verdicts[i]);
        }
        // at most one Cor per non-difficult person
        let cor = verdicts.iter().filter(|v| **v == Verdict::Cor).count();
        prop_assert!(cor <= gts.iter().filter(|g| !g.difficult).count());
    }

    #[test]
    fn pr_curve_recall_is_monotone(
        dets in prop::collection::vec(detection(3), 0..25),
        gts in prop::collection::vec(annotation(3), 1..8),
    ) {
        let num_gt = gts.iter().filter(|g| !g.difficult).count();
        prop_assume!(num_gt > 0);
        let verdicts = match_detections(&dets, &gts, MATCH_IOU);
        let ranked: Vec<(Verdict, f64)> = ranked_order(&dets).into_iter().map(|i| (verdicts[i], dets[i].score)).collect();
        let curve = pr_curve(&ranked, num_gt).unwrap();
        for w in curve.windows(2) {
            prop_assert!(w[1].recall >= w[0].recall);
        }
        let counts = VerdictCounts::tally(verdicts.iter().copied());
        prop_assert_eq!(counts.cor + counts.loc + counts.bg + counts.ignored, dets.len());
        prop_assert_eq!(curve.len(), counts.ranked());
    }

    #[test]
    fn difficult_ground_truth_never_affects_labels(
        roi in bbox(),
        gts in prop::collection::vec(annotation(1), 0..5),
        extra in prop::collection::vec(bbox(), 1..4),
        cfg in preset(),
    ) {
        let mut with = gts.clone();
        with.extend(extra.into_iter().map(|b| Annotation::new("img0", b).difficult(true)));
        prop_assert_eq!(classify_roi(&roi, &gts, &cfg), classify_roi(&roi, &with, &cfg));
    }

    #[test]
    fn minibatch_respects_caps(
        rois in prop::collection::vec(bbox(), 0..120),
        gts in prop::collection::vec(annotation(1), 1..4),
        cfg in preset(),
        ratio in 0.0..1.0f64,
        count in 1usize..100,
        seed in any::<u64>(),
    ) {
        let labelled = label_proposals(&rois, &gts, &cfg);
        let batch = sample_minibatch(&labelled, ratio, count, &mut ChaCha8Rng::seed_from_u64(seed));
        let again = sample_minibatch(&labelled, ratio, count, &mut ChaCha8Rng::seed_from_u64(seed));
        prop_assert_eq!(&batch, &again);
        prop_assert!(batch.len() <= count);
        prop_assert!(batch.iter().all(|r| r.class != RoiClass::Discard));
        let pos = batch.iter().filter(|r| r.class.is_positive()).count();
        prop_assert!(pos as f64 <= (ratio * count as f64).round());
        let avail_pos = labelled.iter().filter(|r| r.class.is_positive()).count();
        let avail_neg = labelled.iter().filter(|r| r.class == RoiClass::Negative).count();
        prop_assert_eq!(batch.len() - pos, avail_neg.min(count - pos));
        prop_assert_eq!(pos, avail_pos.min((ratio * count as f64).round() as usize).min(count));
    }

    #[test]
    fn constant_map_pools_to_constant(
        c in 1usize..3, h in 1usize..8, w in 1usize..8, gh in 1usize..7, gw in 1usize..7,
        value in -5.0..5.0f64, roi in bbox(),
    ) {
        let map = Tensor::filled([1, c, h, w], value);
        let cfg = RoiPoolConfig::new(gh, gw, 1.0).unwrap();
        let roi = roi.scale(0.04);
        let roi = BBox::new(roi.x1.min(w as f64 - 1.0), roi.y1.min(h as f64 - 1.0), roi.x2.max(roi.x1.min(w as f64 - 1.0) + 0.1), roi.y2.max(roi.y1.min(h as f64 - 1.0) + 0.1)).unwrap();
        let (out, state) = roi_pool_forward(&map, &roi, &cfg).unwrap();
        prop_assert_eq!(out.len(), c * gh * gw);
        for (v, a) in out.iter().zip(&state.argmax) {
            let expected = if a.is_some() { value } else { 0.0 };
            prop_assert_eq!(*v, expected);
        }
    }

    #[test]
    fn config_round_trip(
        seed in 0..=i64::MAX as u64,
        cfg in preset(),
        f in 0usize..=2,
        single in any::<bool>(),
        lr in 1e-4..0.1f64,
        iterations in 1usize..100_000,
        flip in any::<bool>(),
    ) {
        let mut c = ExperimentConfig::default();
        c.seed = seed;
        c.sampling = SamplingSpec::from_config(&cfg);
        c.sgd.fixed_layers = f;
        c.sgd.learning_rate = lr;
        c.sgd.iterations = iterations;
        c.batch.flip = flip;
        if single {
            c.pooling = Pooling::SingleCell;
        }
        c.validate().unwrap();
        let text = c.to_toml().unwrap();
        let back = ExperimentConfig::from_toml(&text).unwrap();
        prop_assert_eq!(&back, &c);
        prop_assert_eq!(back.to_toml().unwrap(), text);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn proposals_are_deduplicated_and_inside(seed in any::<u64>(), w in 16u32..64, h in 16u32..64) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut img = image::RgbImage::new(w, h);
        // a few flat rectangles on noise
        for p in img.pixels_mut() {
            *p = image::Rgb([rng.gen_range(0..40), rng.gen_range(0..40), rng.gen_range(0..40)]);
        }
        for _ in 0..3 {
            let (x0, y0) = (rng.gen_range(0..w - 4), rng.gen_range(0..h - 4));
            let colour = image::Rgb([rng.gen(), rng.gen(), rng.gen()]);
            for y in y0..(y0 + rng.gen_range(3..h / 2)).min(h) {
                for x in x0..(x0 + rng.gen_range(3..w / 2)).min(w) {
                    img.put_pixel(x, y, colour);
                }
            }
        }
        let params = SelectiveSearchParams { min_box_side: 1.0, ..SelectiveSearchParams::default() };
        let set = selective_search("x", &img, &params);
        let boxes = set.boxes();
        prop_assert!(!boxes.is_empty());
        for (i, a) in boxes.iter().enumerate() {
            prop_assert!(a.within(w as f64, h as f64), "{a}");
            prop_assert!(boxes[i + 1..].iter().all(|b| b != a));
        }
        // deterministic
        prop_assert_eq!(selective_search("x", &img, &params).boxes(), boxes);
    }
}
