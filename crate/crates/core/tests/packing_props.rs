mod common;

use proptest::prelude::*;
use rand::Rng;

use npd_core::model::{ce_loss_and_grad_batch, SeqView, TinyLmParams};
use npd_core::packing::{assign_bins, pack, validate_pack, PackConfig, PackStrategy};

/// Minimum bin count by exhaustive search over placements.
fn optimal_bins(lengths: &[usize], cap: usize) -> usize {
    fn place(i: usize, lengths: &[usize], cap: usize, fill: &mut Vec<usize>, best: &mut usize) {
        if fill.len() >= *best {
            return;
        }
        if i == lengths.len() {
            *best = fill.len();
            return;
        }
        for b in 0..fill.len() {
            if fill[b] + lengths[i] <= cap {
                fill[b] += lengths[i];
                place(i + 1, lengths, cap, fill, best);
                fill[b] -= lengths[i];
            }
        }
        fill.push(lengths[i]);
        place(i + 1, lengths, cap, fill, best);
        fill.pop();
    }
    let mut best = lengths.len();
    place(0, lengths, cap, &mut Vec::new(), &mut best);
    best
}

#[test]
fn worked_instance_is_optimal() {
    let lengths = [7, 5, 4, 3, 2];
    let ids: Vec<u64> = (0..5).collect();
    let ffd = assign_bins(&lengths, &ids, 8, PackStrategy::FirstFitDecreasing);
    assert_eq!(ffd.len(), 3);
    assert_eq!(optimal_bins(&lengths, 8), 3);
}

fn check_bins(lengths: &[usize], cap: usize, bins: &[Vec<usize>]) {
    let mut seen: Vec<usize> = bins.iter().flatten().copied().collect();
    seen.sort_unstable();
    assert_eq!(seen, (0..lengths.len()).collect::<Vec<_>>(), "conservation");
    for b in bins {
        assert!(b.iter().map(|&i| lengths[i]).sum::<usize>() <= cap, "capacity");
        assert!(!b.is_empty());
    }
}

#[test]
fn seeded_multisets_respect_capacity_and_beat_sequential() {
    let mut rng = common::rng(2024);
    for _ in 0..200 {
        let cap = rng.gen_range(8..=64);
        let n = rng.gen_range(1..=40);
        let lengths: Vec<usize> = (0..n).map(|_| rng.gen_range(1..=cap)).collect();
        let ids: Vec<u64> = (0..n as u64).collect();
        let ffd = assign_bins(&lengths, &ids, cap, PackStrategy::FirstFitDecreasing);
        let seq = assign_bins(&lengths, &ids, cap, PackStrategy::Sequential);
        check_bins(&lengths, cap, &ffd);
        check_bins(&lengths, cap, &seq);
        assert!(ffd.len() <= seq.len(), "{lengths:?} cap {cap}");
    }
}

#[test]
fn ffd_matches_exhaustive_optimum_on_small_instances() {
    let mut rng = common::rng(77);
    for _ in 0..200 {
        let cap = rng.gen_range(4..=16);
        let n = rng.gen_range(1..=7);
        let lengths: Vec<usize> = (0..n).map(|_| rng.gen_range(1..=cap)).collect();
        let ids: Vec<u64> = (0..n as u64).collect();
        let ffd = assign_bins(&lengths, &ids, cap, PackStrategy::FirstFitDecreasing).len();
        let opt = optimal_bins(&lengths, cap);
        assert!(ffd >= opt);
        // FFD never exceeds 11/9·OPT + 6/9.
        assert!(9 * ffd <= 11 * opt + 6);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn packs_round_trip_their_trajectories(seed in 0u64..10_000, n in 1usize..30, pack_len in 12usize..48) {
        let mut rng = common::rng(seed);
        let trajs = common::random_trajectories(&mut rng, n, 12, 3);
        let packs = pack(&trajs, &PackConfig { pack_len, strategy: PackStrategy::FirstFitDecreasing }).unwrap();
        let mut recovered: Vec<(Vec<u32>, Vec<u32>)> = Vec::new();
        for p in &packs {
            prop_assert_eq!(p.len(), pack_len);
            prop_assert!(validate_pack(p, pack_len, 12).is_empty());
            let segs = p.unpack();
            prop_assert_eq!(segs.len(), p.source_ids.len());
            for (seg, &id) in segs.iter().zip(&p.source_ids) {
                let t = &trajs[id as usize];
                prop_assert_eq!(&seg.0, &t.prompt);
                prop_assert_eq!(&seg.1, &t.response);
            }
            recovered.extend(segs);
        }
        prop_assert_eq!(recovered.len(), trajs.len());
        let masked: usize = packs.iter().map(|p| p.masked_positions()).sum();
        prop_assert_eq!(masked, trajs.iter().map(|t| t.response.len()).sum::<usize>());
    }

    #[test]
    fn packed_loss_equals_unpacked_loss(seed in 0u64..10_000, n in 1usize..12) {
        let mut rng = common::rng(seed);
        let params = TinyLmParams::init(common::small_dims(12), seed).unwrap();
        let trajs = common::random_trajectories(&mut rng, n, 12, 0);
        let packs = pack(&trajs, &PackConfig { pack_len: 32, strategy: PackStrategy::FirstFitDecreasing }).unwrap();
        let views: Vec<SeqView> = packs.iter().map(|p| p.view()).collect();
        let (packed, _) = ce_loss_and_grad_batch(&params, &views).unwrap();

        let rows: Vec<(Vec<u32>, Vec<u16>, Vec<bool>)> = trajs
            .iter()
            .map(|t| {
                let tokens: Vec<u32> = t.prompt.iter().chain(&t.response).copied().collect();
                let mask = (0..tokens.len()).map(|i| i >= t.prompt.len()).collect();
                (vec![0; tokens.len()], mask, tokens)
            })
            .map(|(s, m, t)| (t, s, m))
            .collect();
        let single: Vec<SeqView> = rows
            .iter()
            .map(|(t, s, m)| SeqView { tokens: t, segment_ids: s, loss_mask: m })
            .collect();
        let (unpacked, _) = ce_loss_and_grad_batch(&params, &single).unwrap();
        prop_assert!((packed - unpacked).abs() < 1e-9);
    }
}
