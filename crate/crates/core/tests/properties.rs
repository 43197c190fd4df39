use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use fdtr_core::boxes::BBox;
use fdtr_core::config::RunConfig;
use fdtr_core::detector::{drop_foundation_levels, Detector};
use fdtr_core::eval::{compute_ap, Detection};
use fdtr_core::foundation::{interpolate_pos_embed, RegionGrid};
use fdtr_core::matching::{hungarian_match, GroundTruth};
use fdtr_core::{imaging, Mask, Tape, Tensor};

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(prop::collection::vec(-5.0f64..5.0, cols), rows)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn masked_softmax_matches_direct_formula(
        (rows, cols, x, allow) in (1usize..5, 1usize..7).prop_flat_map(|(r, c)| {
            (Just(r), Just(c), matrix(r, c), prop::collection::vec(any::<bool>(), r * c))
        })
    ) {
        let mut allow = allow;
        for r in 0..rows {
            allow[r * cols + r % cols] = true;
        }
        let mut tape = Tape::inference();
        let v = tape.constant(Tensor::new(&[rows, cols], x.concat()).unwrap());
        let y = tape.masked_softmax(v, Some(&Mask::new(allow.clone()))).unwrap();
        let y = tape.value(y);
        for r in 0..rows {
            let denom: f64 = (0..cols).filter(|&c| allow[r * cols + c]).map(|c| x[r][c].exp()).sum();
            for c in 0..cols {
                let got = y.row(r)[c];
                if allow[r * cols + c] {
                    prop_assert!((got - x[r][c].exp() / denom).abs() < 1e-12);
                } else {
                    prop_assert_eq!(got.to_bits(), 0);
                }
            }
        }
    }

    #[test]
    fn layer_norm_standardizes_rows(x in matrix(3, 8)) {
        let mut tape = Tape::inference();
        let v = tape.constant(Tensor::new(&[3, 8], x.concat()).unwrap());
        let g = tape.constant(Tensor::full(&[8], 1.0));
        let b = tape.constant(Tensor::zeros(&[8]));
        let eps = 1e-5;
        let y = tape.layer_norm(v, g, b, eps).unwrap();
        for (r, row) in x.iter().enumerate() {
            let m = row.iter().sum::<f64>() / 8.0;
            let var = row.iter().map(|a| (a - m).powi(2)).sum::<f64>() / 8.0;
            let out = tape.value(y).row(r);
            let mean = out.iter().sum::<f64>() / 8.0;
            let second = out.iter().map(|a| a * a).sum::<f64>() / 8.0;
            prop_assert!(mean.abs() < 1e-12);
            prop_assert!((second - var / (var + eps)).abs() < 1e-9);
        }
    }

    #[test]
    fn matching_ignores_row_and_column_offsets(
        (cost, shift_r, shift_c) in (1usize..6, 1usize..6).prop_flat_map(|(r, c)| {
            (matrix(r, c), prop::collection::vec(-3.0f64..3.0, r), prop::collection::vec(-3.0f64..3.0, c))
        })
    ) {
        let rows = cost.len();
        let cols = cost[0].len();
        let base = hungarian_match(&cost).unwrap();
        prop_assert_eq!(base.pairs.len(), rows.min(cols));
        // Square problems: shifting a whole row or column moves every
        // complete assignment by the same amount.
        if rows == cols {
            let shifted: Vec<Vec<f64>> = (0..rows)
                .map(|i| (0..cols).map(|j| cost[i][j] + shift_r[i] + shift_c[j]).collect())
                .collect();
            let m = hungarian_match(&shifted).unwrap();
            prop_assert!((m.total_cost(&cost) - base.total_cost(&cost)).abs() < 1e-9);
        }
    }

    #[test]
    fn regions_partition_any_grid(g in 1usize..5, rows in 1usize..12, cols in 1usize..12) {
        prop_assume!(g <= rows && g <= cols);
        let grid = RegionGrid::new(g, rows, cols).unwrap();
        let mut seen = vec![0; rows * cols];
        for r in 0..grid.regions() {
            let b = grid.bbox(r);
            for p in grid.members(r) {
                seen[p] += 1;
                prop_assert_eq!(grid.region_of(p), r);
                let cx = ((p % cols) as f64 + 0.5) / cols as f64;
                let cy = ((p / cols) as f64 + 0.5) / rows as f64;
                let [x0, y0, x1, y1] = b.xyxy();
                prop_assert!(cx > x0 && cx < x1 && cy > y0 && cy < y1);
            }
        }
        prop_assert!(seen.iter().all(|&s| s == 1));
    }

    #[test]
    fn pos_embed_resampling_to_same_grid_is_identity(h in 1usize..6, w in 1usize..6, seed in any::<u64>()) {
        let pos = Tensor::randn(&[h * w, 4], 1.0, &mut ChaCha8Rng::seed_from_u64(seed));
        let out = interpolate_pos_embed(&pos, (h, w), (h, w));
        prop_assert!(out.max_abs_diff(&pos) < 1e-12);
    }

    #[test]
    fn ap_is_bounded_and_order_free(seed in any::<u64>()) {
        use rand::Rng;
        let r = &mut ChaCha8Rng::seed_from_u64(seed);
        let mut gts = Vec::new();
        let mut preds = Vec::new();
        for _ in 0..3 {
            let mut gt = GroundTruth::default();
            let mut dets = Vec::new();
            for _ in 0..r.random_range(0..4) {
                let b = BBox::new(r.random_range(0.2..0.8), r.random_range(0.2..0.8), 0.2, 0.2);
                gt.boxes.push(b);
                gt.labels.push(r.random_range(0..2));
                dets.push(Detection {
                    bbox: BBox::new(b.cx + r.random_range(-0.05..0.05), b.cy, 0.2, 0.2),
                    score: r.random_range(0.0..1.0),
                    label: r.random_range(0..2),
                });
            }
            gts.push(gt);
            preds.push(dets);
        }
        let rep = compute_ap(&preds, &gts, 2, 64);
        for v in [rep.ap, rep.ap50, rep.ap75] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
        for d in preds.iter_mut() {
            d.shuffle(r);
        }
        prop_assert_eq!(compute_ap(&preds, &gts, 2, 64), rep);
    }

    #[test]
    fn config_survives_an_ini_round_trip(seed in any::<u64>(), lr in 1e-6f64..1e-2, iq in prop::sample::select(vec![0usize, 1, 5])) {
        let mut c = RunConfig::compact();
        c.seed = seed;
        c.optim.lr = lr;
        c.image_queries = iq;
        c.detector.fuse_patches = iq > 0;
        c.enhancer_count = usize::from(iq > 0);
        let back = RunConfig::from_ini_str(&c.to_ini()).unwrap();
        prop_assert_eq!(back, c);
    }
}

#[test]
fn object_predictions_do_not_depend_on_image_query_order() {
    let mut c = RunConfig::compact();
    c.image_queries = 5;
    c.enhancer_count = 1;
    let det = Detector::new(c.detector_config().unwrap(), 4).unwrap();
    let rng = &mut ChaCha8Rng::seed_from_u64(8);
    let image = Tensor::uniform(&[3, 64, 64], 0.0, 1.0, rng);
    let dim = det.enhancers()[0].dim();
    let feats: Vec<(Tensor, BBox)> = (0..5)
        .map(|i| (Tensor::randn(&[1, dim], 1.0, rng), BBox::new(0.2 + 0.1 * i as f64, 0.5, 0.3, 0.4)))
        .collect();
    let run = |order: &[usize]| {
        let mut tape = Tape::inference();
        let size = det.config().input_size;
        let pyr = det.backbone_forward(&mut tape, &imaging::resize(&image, size, size)).unwrap();
        let memory = drop_foundation_levels(&det.encoder().forward(&mut tape, det.store(), &pyr).unwrap());
        let queries: Vec<_> = order.iter().map(|&i| (tape.constant(feats[i].0.clone()), feats[i].1)).collect();
        let out = det.decoder().forward(&mut tape, det.store(), &memory, &queries, det.heads()).unwrap();
        let last = out.layers.last().unwrap();
        (tape.value(last.logits).clone(), tape.value(last.boxes).clone())
    };
    let (l0, b0) = run(&[0, 1, 2, 3, 4]);
    let (l1, b1) = run(&[3, 0, 4, 2, 1]);
    assert!(l0.max_abs_diff(&l1) < 1e-12);
    assert!(b0.max_abs_diff(&b1) < 1e-12);
}
