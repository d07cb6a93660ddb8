use proptest::prelude::*;

use sdae::data::{batch_iter, decode_sdds, encode_sdds, Image};
use sdae::distill::{cosine_loss_value, ema_update, normalize_targets, LossForm, MomentumSchedule};
use sdae::masking::{fold_sizes, masked_count, plan_for, FeedingMode};
use sdae::tensor::{ParamSet, Tensor};
use sdae::training::lr_schedule;
use sdae::vit::{patchify, pos_embed_2d, unpatchify};

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Tensor<f64>> {
    prop::collection::vec(-10.0f64..10.0, rows * cols).prop_map(move |d| Tensor::new(vec![rows, cols], d).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn patchify_inverts(grid in 1usize..6, patch in 1usize..5, channels in 1usize..4, seed in any::<u64>()) {
        let size = grid * patch;
        let pixels: Vec<f32> = (0..size * size * channels).map(|i| ((i as u64).wrapping_mul(seed | 1) % 1000) as f32).collect();
        let tokens = patchify(&pixels, size, channels, patch).unwrap();
        prop_assert_eq!(tokens.shape(), &[grid * grid, patch * patch * channels]);
        prop_assert_eq!(unpatchify(&tokens, size, channels, patch).unwrap(), pixels);
    }

    #[test]
    fn position_rows_share_a_norm(grid in 1usize..16, quarter in 1usize..32) {
        let t = pos_embed_2d(grid, 4 * quarter).unwrap();
        let norms: Vec<f64> = (0..t.rows()).map(|r| t.row(r).iter().map(|v| v * v).sum::<f64>().sqrt()).collect();
        for n in &norms {
            prop_assert!((n - norms[0]).abs() < 1e-5);
        }
    }

    #[test]
    fn folds_partition_the_masked_tokens(n in 8usize..200, r in 0.1f64..0.9, t in 1usize..8, seed in any::<u64>()) {
        let m = masked_count(n, r);
        prop_assume!(m >= t && m < n && m > 0);
        let plan = plan_for(n, r, FeedingMode::MultiFold { folds: t }, seed).unwrap();
        let mut all: Vec<usize> = plan.folds.iter().flatten().copied().collect();
        all.sort_unstable();
        prop_assert_eq!(&all, &plan.masked);
        let sizes: Vec<usize> = plan.folds.iter().map(Vec::len).collect();
        let (lo, hi) = (sizes.iter().min().unwrap(), sizes.iter().max().unwrap());
        prop_assert!(hi - lo <= 1);
        prop_assert_eq!(sizes.iter().sum::<usize>(), m);
        for f in &plan.folds {
            prop_assert!(f.iter().all(|i| plan.visible.binary_search(i).is_err()));
        }
        let mut want = fold_sizes(m, t);
        let mut got = sizes.clone();
        want.sort_unstable();
        got.sort_unstable();
        prop_assert_eq!(got, want);
    }

    #[test]
    fn crop_keeps_a_subset(n in 8usize..200, r_c in 0.05f64..0.7, seed in any::<u64>()) {
        let plan = plan_for(n, 0.75, FeedingMode::TeacherCrop { crop_ratio: r_c }, seed);
        if let Ok(plan) = plan {
            prop_assert!(plan.folds[0].iter().all(|i| plan.masked.binary_search(i).is_ok()));
            prop_assert_eq!(plan.targets(), &plan.folds[0][..]);
        }
    }

    #[test]
    fn normalized_rows_are_centered(x in (1usize..6, 2usize..30).prop_flat_map(|(r, c)| matrix(r, c))) {
        let mut y = x.clone();
        normalize_targets(&mut y, 1e-6);
        for r in 0..y.rows() {
            let mean = y.row(r).iter().sum::<f64>() / y.cols() as f64;
            prop_assert!(mean.abs() < 1e-9);
        }
    }

    #[test]
    fn cosine_loss_is_bounded_and_scale_free(
        (p, t) in (1usize..6, 2usize..20).prop_flat_map(|(r, c)| (matrix(r, c), matrix(r, c))),
        k in 1e-3f64..1e3,
    ) {
        let rows = p.rows();
        let scaled = Tensor::new(p.shape().to_vec(), p.data().iter().map(|v| v * k).collect()).unwrap();
        for form in [LossForm::PerToken, LossForm::Global] {
            let a = cosine_loss_value(&p, &t, form, &[rows]).unwrap();
            let b = cosine_loss_value(&scaled, &t, form, &[rows]).unwrap();
            prop_assert!((-1e-12..=2.0 + 1e-12).contains(&a));
            prop_assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn ema_stays_between_teacher_and_student(
        phi in prop::collection::vec(-5.0f64..5.0, 12),
        theta in prop::collection::vec(-5.0f64..5.0, 12),
        eta in 0.0f64..=1.0,
    ) {
        let set = |v: &Vec<f64>| {
            let mut s = ParamSet::new();
            s.push("w", Tensor::new(vec![3, 4], v.clone()).unwrap(), true);
            s
        };
        let mut teacher = set(&phi);
        ema_update(&mut teacher, &set(&theta), eta).unwrap();
        for ((&new, &old), &st) in teacher.get(0).value.data().iter().zip(&phi).zip(&theta) {
            prop_assert!(new >= old.min(st) - 1e-12 && new <= old.max(st) + 1e-12);
        }
    }

    #[test]
    fn momentum_is_monotone_in_range(total in 1usize..500, a in 0usize..500, b in 0usize..500) {
        let s = MomentumSchedule::new(total);
        let (lo, hi) = (a.min(b).min(total), a.max(b).min(total));
        prop_assert!(s.at(lo) <= s.at(hi));
        prop_assert!((0.96..=0.99).contains(&s.at(lo)));
    }

    #[test]
    fn lr_stays_in_range(total in 1usize..1000, warmup in 0usize..100, step in 0usize..1100) {
        let lr = lr_schedule(step, total, warmup, 1e-3);
        prop_assert!((0.0..=1e-3).contains(&lr));
    }

    #[test]
    fn batches_cover_each_item_once(n in 1usize..300, bs in 1usize..64, seed in any::<u64>(), epoch in 0usize..10) {
        let batches = batch_iter(n, bs.min(n), seed, epoch);
        let mut all: Vec<usize> = batches.concat();
        prop_assert!(batches.iter().all(|b| !b.is_empty() && b.len() <= bs));
        all.sort_unstable();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
    }

    #[test]
    fn packed_files_roundtrip(count in 1usize..6, size in 1usize..9, channels in 1usize..4, labeled in any::<bool>(), seed in any::<u8>()) {
        let images: Vec<Image> = (0..count)
            .map(|i| Image {
                size,
                channels,
                pixels: (0..size * size * channels).map(|j| (j as u8).wrapping_mul(seed).wrapping_add(i as u8)).collect(),
            })
            .collect();
        let labels: Option<Vec<u16>> = labeled.then(|| (0..count as u16).collect());
        let bytes = encode_sdds(&images, labels.as_deref()).unwrap();
        let (back, back_labels) = decode_sdds(&bytes).unwrap();
        prop_assert_eq!(back, images);
        prop_assert_eq!(back_labels, labels);
    }
}
