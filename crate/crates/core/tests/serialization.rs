mod common;

use npd_core::annotation::Sidecar;
use npd_core::error::NpdError;
use npd_core::model::{forward_logits, TinyLmParams};
use npd_core::packing::PackFile;

fn fixture(seed: u64, k: usize) -> (TinyLmParams, PackFile, Sidecar) {
    let mut rng = common::rng(seed);
    let teacher = TinyLmParams::init(common::small_dims(12), seed).unwrap();
    let trajs = common::random_trajectories(&mut rng, 40, 12, 1);
    let (packs, sidecar) = common::packed(&teacher, &trajs, 32, k);
    (teacher, packs, sidecar)
}

#[test]
fn pack_file_round_trips_bit_identically() {
    let (_, packs, _) = fixture(1, 4);
    let bytes = packs.encode().unwrap();
    let back = PackFile::decode(&bytes).unwrap();
    assert_eq!(back.encode().unwrap(), bytes);
    assert_eq!(back.crc, packs.crc);
    for (a, b) in back.packs.iter().zip(&packs.packs) {
        assert_eq!((&a.tokens, &a.segment_ids, &a.loss_mask), (&b.tokens, &b.segment_ids, &b.loss_mask));
    }
    assert_eq!(bytes.len(), 8 + 12 + packs.packs.len() * 32 * 7 + 4);
}

#[test]
fn sidecar_round_trips_bit_identically() {
    let (_, packs, sidecar) = fixture(2, 5);
    let bytes = sidecar.encode();
    let back = Sidecar::decode_for(&bytes, &packs).unwrap();
    assert_eq!(back, sidecar);
    assert_eq!(back.encode(), bytes);
    assert_eq!(bytes.len(), 8 + 12 + sidecar.position_count() * (8 + 8 * 5) + 4);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("sidecar.bin");
    sidecar.save(&path).unwrap();
    assert_eq!(Sidecar::load_for(&path, &packs).unwrap(), sidecar);
}

#[test]
fn sidecar_for_other_pack_file_is_stale() {
    let (_, packs_a, sidecar_a) = fixture(3, 3);
    let (_, packs_b, _) = fixture(4, 3);
    assert_ne!(packs_a.crc, packs_b.crc);
    let bytes = sidecar_a.encode();
    assert!(matches!(Sidecar::decode_for(&bytes, &packs_b), Err(NpdError::Staleness(_))));
    assert!(matches!(sidecar_a.check_against(&packs_b), Err(NpdError::Staleness(_))));
}

#[test]
fn corrupted_files_are_rejected() {
    let (_, packs, sidecar) = fixture(5, 3);
    let mut p = packs.encode().unwrap();
    p[30] ^= 1;
    assert!(matches!(PackFile::decode(&p), Err(NpdError::Format(_))));
    let mut s = sidecar.encode();
    let mid = s.len() / 2;
    s[mid] ^= 0x40;
    assert!(matches!(Sidecar::decode(&s), Err(NpdError::Format(_))));
}

#[test]
fn checkpoint_round_trip_preserves_logits() {
    let (teacher, packs, _) = fixture(6, 3);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("teacher.ckpt");
    teacher.save(&path).unwrap();
    let back = TinyLmParams::load(&path).unwrap();
    assert_eq!(back.checkpoint_crc(), teacher.checkpoint_crc());
    assert_eq!(back.version(), teacher.version());
    let p = &packs.packs[0];
    let a = forward_logits(&teacher, &p.tokens, &p.segment_ids).unwrap();
    let b = forward_logits(&back, &p.tokens, &p.segment_ids).unwrap();
    for (x, y) in a.rows().zip(b.rows()) {
        assert!(x.iter().zip(y).all(|(u, v)| u.to_bits() == v.to_bits()));
    }
}

#[test]
fn sidecar_size_at_ten_thousand_positions() {
    let k = 10;
    let teacher = TinyLmParams::init(common::small_dims(12), 8).unwrap();
    let mut rng = common::rng(8);
    let mut trajs = common::random_trajectories(&mut rng, 2000, 12, 0);
    for t in &mut trajs {
        t.response.resize(5, 4);
    }
    let (packs, sidecar) = common::packed(&teacher, &trajs, 64, k);
    assert_eq!(sidecar.position_count(), 10_000);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("sidecar.bin");
    sidecar.save(&path).unwrap();
    let size = std::fs::metadata(&path).unwrap().len() as usize;
    let framing = 8 + 12 + 4;
    // Pack index and position, then k (token id, logit) pairs.
    assert_eq!(size - framing, 10_000 * (8 + 8 * k));
    assert_eq!(size - framing, 880_000);
    assert!(Sidecar::load_for(&path, &packs).is_ok());
}
