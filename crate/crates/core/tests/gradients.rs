mod common;

use std::time::Instant;

use rand::Rng;

use npd_core::model::{ce_loss_and_grad_batch, Gradient, SeqView, Tensor, TinyLmParams};
use npd_core::trainer::{composite_loss, KdNormalization};

const STEP: f64 = 1e-5;

fn max_rel_error(params: &TinyLmParams, analytic: &Gradient, loss: impl Fn(&TinyLmParams) -> f64) -> f64 {
    let mut worst: f64 = 0.0;
    for t in Tensor::ALL {
        for i in 0..params.tensor(t).len() {
            let mut plus = params.clone();
            plus.tensor_mut(t)[i] += STEP;
            let mut minus = params.clone();
            minus.tensor_mut(t)[i] -= STEP;
            let numeric = (loss(&plus) - loss(&minus)) / (2.0 * STEP);
            let a = analytic.tensor(t)[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(f64::MIN_POSITIVE);
            worst = worst.max(rel);
        }
    }
    worst
}

#[test]
fn analytic_gradients_match_central_differences() {
    let start = Instant::now();
    let mut rng = common::rng(99);
    for draw in 0..10u64 {
        let v = rng.gen_range(8..=12);
        let student = TinyLmParams::init(common::small_dims(v), 100 + draw).unwrap();
        let teacher = TinyLmParams::init(common::small_dims(v), 200 + draw).unwrap();
        let k = rng.gen_range(1..=v);
        let lambda: f64 = rng.gen();
        let trajs = common::random_trajectories(&mut rng, 3, v, 0);
        let (packs, sidecar) = common::packed(&teacher, &trajs, 40, k);
        assert_eq!(packs.packs.len(), 1);

        let views: Vec<SeqView> = packs.packs.iter().map(|p| p.view()).collect();
        let (_, g) = ce_loss_and_grad_batch(&student, &views).unwrap();
        let err = max_rel_error(&student, &g, |p| ce_loss_and_grad_batch(p, &views).unwrap().0);
        assert!(err < 1e-4, "draw {draw}: CE rel err {err}");

        for mode in [KdNormalization::Truncated, KdNormalization::Renormalized] {
            for lam in [1.0, lambda] {
                let f = |p: &TinyLmParams| composite_loss(p, &packs, &sidecar, 0, lam, mode).unwrap();
                let (_, g) = f(&student);
                let err = max_rel_error(&student, &g, |p| f(p).0.total);
                assert!(err < 1e-4, "draw {draw}: {mode:?} lambda {lam} k {k} rel err {err}");
            }
        }
    }
    assert!(start.elapsed().as_secs() < 30);
}
