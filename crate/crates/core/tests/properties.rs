//! Randomized invariant checks over the masking, scheduling, data, and RNG
//! layers.

use proptest::prelude::*;

use map_pretrain::backbone::{ScanKind, ScanOrder};
use map_pretrain::data::{patchify, unpatchify, Image};
use map_pretrain::masking::{
    build_mask_plan, build_visibility, DecoderStrategy, MaskStrategy,
};
use map_pretrain::rng::MapRng;
use map_pretrain::trainer::cosine_lr;

use rand::RngCore;

fn strategy_from(i: u8) -> MaskStrategy {
    match i % 3 {
        0 => MaskStrategy::Random,
        1 => MaskStrategy::Sequential,
        _ => MaskStrategy::Diagonal,
    }
}

proptest! {
    // ── Mask plans ──────────────────────────────────────────────────────

    #[test]
    fn mask_plan_indices_sorted_unique_in_range(
        rows in 1usize..8, cols in 1usize..8,
        ratio in 0.0f64..=1.0, strat in 0u8..3, seed in any::<u64>(),
    ) {
        let plan = build_mask_plan(rows, cols, ratio, strategy_from(strat), seed).unwrap();
        prop_assert_eq!(plan.masked.len(), rows);
        for row in &plan.masked {
            prop_assert!(row.windows(2).all(|w| w[0] < w[1]), "unsorted or duplicated");
            prop_assert!(row.iter().all(|&c| c < cols));
        }
        let flags = plan.flags();
        prop_assert_eq!(flags.iter().filter(|&&f| f).count(), plan.total_masked());
        for r in 0..rows {
            for c in 0..cols {
                prop_assert_eq!(flags[r * cols + c], plan.is_masked(r, c));
            }
        }
    }

    #[test]
    fn random_masking_hits_global_quota(
        rows in 1usize..9, cols in 1usize..9,
        ratio in 0.0f64..=1.0, seed in any::<u64>(),
    ) {
        let plan = build_mask_plan(rows, cols, ratio, MaskStrategy::Random, seed).unwrap();
        let want = (ratio * (rows * cols) as f64 + 0.5).floor() as usize;
        prop_assert_eq!(plan.total_masked(), want);
    }

    #[test]
    fn same_seed_same_plan(
        rows in 1usize..8, cols in 1usize..8,
        ratio in 0.0f64..=1.0, strat in 0u8..3, seed in any::<u64>(),
    ) {
        let a = build_mask_plan(rows, cols, ratio, strategy_from(strat), seed).unwrap();
        let b = build_mask_plan(rows, cols, ratio, strategy_from(strat), seed).unwrap();
        prop_assert_eq!(a.masked, b.masked);
    }

    // ── Visibility matrices ─────────────────────────────────────────────

    #[test]
    fn visibility_strategy_lattice_and_row_semantics(
        rows in 1usize..6, cols in 1usize..6,
        ratio in 0.0f64..=1.0, seed in any::<u64>(), self_vis in any::<bool>(),
    ) {
        let plan = build_mask_plan(rows, cols, ratio, MaskStrategy::Random, seed).unwrap();
        let l = plan.len();
        let ar = build_visibility(&plan, DecoderStrategy::Ar, self_vis);
        let mae = build_visibility(&plan, DecoderStrategy::Mae, self_vis);
        let local = build_visibility(&plan, DecoderStrategy::LocalMae, self_vis);
        let map = build_visibility(&plan, DecoderStrategy::Map, self_vis);
        for q in 0..l {
            let qr = q / cols;
            for k in 0..l {
                let kr = k / cols;
                // MAE is the superset of every strategy
                prop_assert!(mae.allowed(q, k));
                prop_assert!(!ar.allowed(q, k) || mae.allowed(q, k));
                prop_assert!(!map.allowed(q, k) || mae.allowed(q, k));
                // AR is exactly the scan prefix
                prop_assert_eq!(ar.allowed(q, k), k <= q);
                // local MAE is exactly block-diagonal by grid row
                prop_assert_eq!(local.allowed(q, k), kr == qr);
                // MAP sees every key of every previous row
                if kr < qr {
                    prop_assert!(map.allowed(q, k));
                }
                // and nothing from future rows
                if kr > qr {
                    prop_assert!(!map.allowed(q, k));
                }
                // within a row: exactly the unmasked keys, plus self if
                // configured
                if kr == qr {
                    let want = !plan.is_masked(kr, k % cols) || (self_vis && k == q);
                    prop_assert_eq!(map.allowed(q, k), want);
                }
            }
        }
    }

    // ── Learning-rate schedule ──────────────────────────────────────────

    #[test]
    fn cosine_schedule_bounded_and_decaying(
        total in 2u64..500, warmup_frac in 0.0f64..0.5, base in 1e-6f64..1.0,
    ) {
        let warmup = (total as f64 * warmup_frac) as u64;
        let mut prev = None;
        for step in 0..=total {
            let lr = cosine_lr(step, warmup, total, base);
            prop_assert!(lr >= 0.0 && lr <= base + 1e-15, "lr {} out of range", lr);
            if step > warmup {
                if let Some(p) = prev {
                    prop_assert!(lr <= p + 1e-15, "not decaying after warmup");
                }
            }
            prev = Some(lr);
        }
        prop_assert!(cosine_lr(total, warmup, total, base).abs() < 1e-12);
    }

    // ── RNG ─────────────────────────────────────────────────────────────

    #[test]
    fn rng_state_round_trip(seed in any::<u64>(), skip in 0usize..64) {
        let mut a = MapRng::seed_from_u64(seed);
        for _ in 0..skip {
            a.next_u64();
        }
        let mut b = MapRng::from_state(a.state());
        for _ in 0..16 {
            prop_assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    // ── Patches ─────────────────────────────────────────────────────────

    #[test]
    fn patchify_round_trips(
        m in 1usize..5, n in 1usize..5,
        ph in 1usize..4, pw in 1usize..4, channels in 1usize..3,
        seed in any::<u64>(),
    ) {
        let (h, w) = (m * ph, n * pw);
        let mut rng = MapRng::seed_from_u64(seed);
        let pixels: Vec<f32> = (0..channels * h * w)
            .map(|_| (rng.next_u32() % 1000) as f32 / 1000.0)
            .collect();
        let img = Image::new(channels, h, w, pixels.clone());
        let grid = patchify(&img, ph, pw).unwrap();
        prop_assert_eq!(grid.rows, m);
        prop_assert_eq!(grid.cols, n);
        prop_assert_eq!(grid.patch_dim, ph * pw * channels);
        let back = unpatchify(&grid);
        prop_assert_eq!(back.pixels, pixels);
    }

    // ── Scan orders ─────────────────────────────────────────────────────

    #[test]
    fn scan_orders_are_inverse_permutations(rows in 1usize..8, cols in 1usize..8) {
        for kind in [ScanKind::RowFirst, ScanKind::ColumnFirst] {
            let order = ScanOrder::new(kind, rows, cols);
            let l = rows * cols;
            let mut seen = vec![false; l];
            for &p in &order.perm {
                prop_assert!(!seen[p], "perm not a bijection");
                seen[p] = true;
            }
            for i in 0..l {
                prop_assert_eq!(order.inv[order.perm[i]], i);
            }
        }
    }
}
