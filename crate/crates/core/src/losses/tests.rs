use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::networks::{TapBundle, TapSource};
use crate::Error;

fn field(shape: [usize; 4], data: Vec<f64>) -> Field {
    Field::new(shape, data).unwrap()
}

fn random_field(rng: &mut ChaCha8Rng, shape: [usize; 4], lo: f64, hi: f64) -> Field {
    let len = shape.iter().product();
    field(shape, (0..len).map(|_| rng.gen_range(lo..hi)).collect())
}

fn with_data(f: &Field, data: &[f64]) -> Field {
    field(f.shape(), data.to_vec())
}

#[test]
fn negcos_endpoints() {
    let a = field([1, 3, 1, 2], vec![1.0, -2.0, 0.5, 3.0, 2.0, 0.1]);
    let neg = with_data(&a, &a.data().iter().map(|v| -v).collect::<Vec<_>>());
    assert!((dist_negcos(&a, &a).unwrap() + 1.0).abs() <= 1e-7);
    assert!((dist_negcos(&a, &neg).unwrap() - 1.0).abs() <= 1e-7);
    let x = field([1, 2, 1, 1], vec![1.0, 0.0]);
    let y = field([1, 2, 1, 1], vec![0.0, 3.0]);
    assert!(dist_negcos(&x, &y).unwrap().abs() <= 1e-7);
    let z = field([1, 2, 1, 2], vec![0.0; 4]);
    assert!(matches!(dist_negcos(&x, &z), Err(Error::Shape(_))));
}

#[test]
fn negcos_of_zero_vector_is_guarded() {
    let z = field([1, 2, 1, 1], vec![0.0, 0.0]);
    let y = field([1, 2, 1, 1], vec![1.0, 1.0]);
    let (v, ga, _) = dist_negcos_grad(&z, &y).unwrap();
    assert_eq!(v, 0.0);
    assert!(ga.data().iter().all(|g| g.is_finite()));
}

fn bundle(source: TapSource, taps: Vec<Field>) -> TapBundle {
    TapBundle {
        source,
        taps: taps.iter().enumerate().map(|(k, f)| (k, f.to_tensor())).collect(),
    }
}

#[test]
fn agg_sums_per_tap_distances() {
    let ts = vec![7];
    let a = field([1, 2, 2, 2], vec![1.0, 2.0, 3.0, 4.0, 0.0, 0.0, 0.0, 0.0]);
    let b = field([1, 2, 2, 2], vec![0.0, 0.0, 0.0, 0.0, 5.0, 6.0, 7.0, 8.0]);
    let teacher = bundle(
        TapSource::Teacher { timesteps: ts.clone() },
        vec![a.clone(), a.clone(), a.clone()],
    );
    let same = bundle(
        TapSource::Projected { timesteps: ts.clone() },
        vec![a.clone(), a.clone(), a.clone()],
    );
    assert!((loss_agg(&same, &teacher).unwrap().value + 3.0).abs() < 1e-7);
    let mixed = bundle(
        TapSource::Projected { timesteps: ts.clone() },
        vec![a.clone(), b.clone(), b.clone()],
    );
    let agg = loss_agg(&mixed, &teacher).unwrap();
    assert!((agg.value + 1.0).abs() < 1e-7);
    assert_eq!(agg.grads.len(), 3);

    let wrong_t = bundle(TapSource::Teacher { timesteps: vec![8] }, vec![a.clone(); 3]);
    assert!(matches!(loss_agg(&same, &wrong_t), Err(Error::Usage(_))));
    let fewer = bundle(TapSource::Teacher { timesteps: ts.clone() }, vec![a.clone(); 2]);
    assert!(matches!(loss_agg(&same, &fewer), Err(Error::Usage(_))));
    let clean = bundle(TapSource::StudentClean, vec![a.clone(); 3]);
    assert!(matches!(loss_agg(&clean, &teacher), Err(Error::Usage(_))));
}

#[test]
fn ssi_example_and_degenerate() {
    let d = field([1, 1, 1, 3], vec![1.0, 2.0, 3.0]);
    let n = ssi_normalize(&d, &[true; 3]).unwrap();
    for (got, want) in n.data().iter().zip([-1.5, 0.0, 1.5]) {
        assert!((got - want).abs() < 1e-12);
    }
    let c = field([1, 1, 1, 3], vec![2.0; 3]);
    assert!(matches!(ssi_normalize(&c, &[true; 3]), Err(Error::Degenerate(_))));
    assert!(matches!(
        ssi_normalize(&d, &[true, false, false]),
        Err(Error::Degenerate(_))
    ));
    let masked = ssi_normalize(&d, &[true, false, true]).unwrap();
    assert_eq!(masked.data()[1], 0.0);
}

#[test]
fn constant_target_item_drops_only_the_affine_term() {
    let w = LossWeights::default();
    // Item 0 varies; item 1 is a flat wall at one depth.
    let gt = field([2, 1, 1, 3], vec![1.0, 2.0, 3.0, 0.5, 0.5, 0.5]);
    let pred = field([2, 1, 1, 3], vec![1.1, 2.2, 2.9, 0.4, 0.6, 0.5]);
    let both = loss_depth(&pred, &gt, &[true; 6], &w).unwrap();
    let first = loss_depth(
        &field([1, 1, 1, 3], pred.data()[..3].to_vec()),
        &field([1, 1, 1, 3], gt.data()[..3].to_vec()),
        &[true; 3],
        &w,
    )
    .unwrap();
    assert!((both.terms["aff"] - first.terms["aff"] / 2.0).abs() < 1e-12);
    assert!(both.grad.data().iter().all(|v| v.is_finite()));
}

fn ramp_case() -> (Field, Field) {
    let mut gt = vec![0.0; 16];
    let mut pred = vec![0.0; 16];
    for y in 0..4 {
        for x in 0..4 {
            gt[y * 4 + x] = 1.0 + 0.25 * y as f64 + 0.1 * x as f64 + 0.03 * (x * y) as f64;
            pred[y * 4 + x] = gt[y * 4 + x] + 0.05 * (x + 4 * y) as f64;
        }
    }
    (field([1, 1, 4, 4], pred), field([1, 1, 4, 4], gt))
}

/// Straight-line per-pixel evaluation of the depth loss on a fully valid 4×4 map.
fn depth_oracle(p: &[f64], g: &[f64]) -> f64 {
    let at = |v: &[f64], y: usize, x: usize| v[y * 4 + x];
    let mse = p.iter().zip(g).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / 16.0;
    let normalize = |v: &[f64]| -> Vec<f64> {
        let mut s = v.to_vec();
        s.sort_by(f64::total_cmp);
        let med = (s[7] + s[8]) / 2.0;
        let mad = v.iter().map(|x| (x - med).abs()).sum::<f64>() / 16.0;
        v.iter().map(|x| (x - med) / mad).collect()
    };
    let (np, ng) = (normalize(p), normalize(g));
    let aff = np.iter().zip(&ng).map(|(a, b)| (a - b).abs()).sum::<f64>() / 16.0;
    let r: Vec<f64> = p.iter().zip(g).map(|(a, b)| a.ln() - b.ln()).collect();
    let mut gx0 = 0.0;
    let mut gy0 = 0.0;
    for y in 0..4 {
        for x in 0..3 {
            gx0 += (at(&r, y, x + 1) - at(&r, y, x)).abs();
            gy0 += (at(&r, x + 1, y) - at(&r, x, y)).abs();
        }
    }
    let term0 = gx0 / 12.0 + gy0 / 12.0;
    let pool = |y: usize, x: usize| {
        (at(&r, 2 * y, 2 * x)
            + at(&r, 2 * y, 2 * x + 1)
            + at(&r, 2 * y + 1, 2 * x)
            + at(&r, 2 * y + 1, 2 * x + 1))
            / 4.0
    };
    let term1 = ((pool(0, 1) - pool(0, 0)).abs() + (pool(1, 1) - pool(1, 0)).abs()) / 2.0
        + ((pool(1, 0) - pool(0, 0)).abs() + (pool(1, 1) - pool(0, 1)).abs()) / 2.0;
    let grad = (term0 + term1) / 2.0;
    8.0 * mse + 2.0 * aff + 100.0 * grad
}

#[test]
fn depth_matches_per_pixel_oracle_on_ramp() {
    let (p, g) = ramp_case();
    let got = loss_depth(&p, &g, &[true; 16], &LossWeights::default()).unwrap();
    let want = depth_oracle(p.data(), g.data());
    assert!((got.value - want).abs() < 1e-12 * want.abs().max(1.0), "{} vs {want}", got.value);
}

#[test]
fn depth_identity_and_scale_cases() {
    let (_, g) = ramp_case();
    let w = LossWeights::default();
    assert_eq!(loss_depth(&g, &g, &[true; 16], &w).unwrap().value, 0.0);
    let c = 1.7;
    let scaled = with_data(&g, &g.data().iter().map(|v| c * v).collect::<Vec<_>>());
    let out = loss_depth(&scaled, &g, &[true; 16], &w).unwrap();
    assert!(out.terms["aff"].abs() < 1e-12);
    assert!(out.terms["grad"].abs() < 1e-9);
    let mse = g.data().iter().map(|v| ((c - 1.0) * v).powi(2)).sum::<f64>() / 16.0;
    assert!((out.value - 8.0 * mse).abs() < 1e-9);
}

#[test]
fn depth_clamps_nonpositive_values() {
    let (p, g) = ramp_case();
    let mut pd = p.data().to_vec();
    pd[5] = -0.5;
    let out = loss_depth(&with_data(&p, &pd), &g, &[true; 16], &LossWeights::default()).unwrap();
    assert!(out.value.is_finite());
    assert_eq!(out.clamped, 1);
}

#[test]
fn normal_angular_cases() {
    let w = LossWeights::default();
    let gt = field([1, 3, 1, 2], vec![0.0, 0.6, 0.0, 0.0, 1.0, 0.8]);
    let mask = [true; 2];
    let same = loss_normal(&gt, &gt, &mask, &w).unwrap();
    assert!(same.terms["mse"] < 1e-30);
    assert!((same.terms["ang"] - (1.0 - ANGLE_CLAMP).acos()).abs() < 1e-12);
    let anti = with_data(&gt, &gt.data().iter().map(|v| -2.0 * v).collect::<Vec<_>>());
    let out = loss_normal(&anti, &gt, &mask, &w).unwrap();
    assert!((out.terms["ang"] - std::f64::consts::PI).abs() <= 1e-4);
    // Rotate each pixel by 90° in its own plane: (0, 0, 1) → (1, 0, 0), (0.6, 0, 0.8) → (-0.8, 0, 0.6).
    let ortho = field([1, 3, 1, 2], vec![1.0, -0.8, 0.0, 0.0, 0.0, 0.6]);
    let out = loss_normal(&ortho, &gt, &mask, &w).unwrap();
    assert!((out.terms["ang"] - std::f64::consts::FRAC_PI_2).abs() <= 1e-6);
}

#[test]
fn normal_zero_prediction_is_counted() {
    let gt = field([1, 3, 1, 1], vec![0.0, 0.0, 1.0]);
    let zero = field([1, 3, 1, 1], vec![0.0; 3]);
    let out = loss_normal(&zero, &gt, &[true], &LossWeights::default()).unwrap();
    assert_eq!(out.clamped, 1);
    assert!(out.value.is_finite());
}

#[test]
fn matting_cases() {
    let w = LossWeights::default();
    let gt = field([1, 1, 2, 2], vec![0.2, 0.7, 0.4, 0.9]);
    assert_eq!(loss_matting(&gt, &gt, &w).unwrap().value, 0.0);
    let shifted = with_data(&gt, &gt.data().iter().map(|v| v + 0.1).collect::<Vec<_>>());
    let out = loss_matting(&shifted, &gt, &w).unwrap();
    assert!((out.value - 1.05).abs() < 1e-12);
    assert!(out.terms["grad"].abs() < 1e-15);

    let d = 0.1;
    let diff = [d, -d, -d, d];
    let pred: Vec<f64> = gt.data().iter().zip(diff).map(|(g, e)| g + e).collect();
    let out = loss_matting(&with_data(&gt, &pred), &gt, &w).unwrap();
    // Per pixel: squared 0.01, absolute 0.1; every neighbour pair differs by 0.2.
    let mse = diff.iter().map(|e| e * e).sum::<f64>() / 4.0;
    let l1 = diff.iter().map(|e: &f64| e.abs()).sum::<f64>() / 4.0;
    let gx = ((diff[1] - diff[0]).abs() + (diff[3] - diff[2]).abs()) / 2.0;
    let gy = ((diff[2] - diff[0]).abs() + (diff[3] - diff[1]).abs()) / 2.0;
    let want = 5.0 * mse + 10.0 * l1 + 50.0 * (gx + gy);
    assert!((out.value - want).abs() < 1e-12);
    assert!((out.value - 21.05).abs() < 1e-12);

    let bad = with_data(&gt, &[1.2, 0.0, 0.0, 0.0]);
    assert!(matches!(loss_matting(&bad, &gt, &w), Err(Error::Range(_))));
}

#[test]
fn total_examples_and_lambda_guard() {
    assert_eq!(loss_total(-3.0, 0.0, 1.0).unwrap(), -3.0);
    assert_eq!(loss_total(0.0, 2.0, 0.5).unwrap(), 1.0);
    assert_eq!(loss_total(-1.5, 2.0, 1.0).unwrap(), 0.5);
    assert!(matches!(loss_total(1.0, 1.0, 0.0), Err(Error::Config(_))));
    assert!(matches!(loss_total(1.0, 1.0, -1.0), Err(Error::Config(_))));
    let b = LossBreakdown::new(-1.5, 2.0, 0.25, Default::default()).unwrap();
    assert!(b.decomposition_error(0.25) <= 1e-12);
}

#[test]
fn weights_validate() {
    assert!(LossWeights::default().validate().is_ok());
    let bad = LossWeights {
        depth_grad: 0.0,
        ..LossWeights::default()
    };
    assert!(matches!(bad.validate(), Err(Error::Config(_))));
}

const STEP: f64 = 1e-4;
const TOL: f64 = 1e-3;

#[test]
fn negcos_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..10 {
        let a = random_field(&mut rng, [2, 3, 2, 2], -1.0, 1.0);
        let b = random_field(&mut rng, [2, 3, 2, 2], -1.0, 1.0);
        let (_, ga, gb) = dist_negcos_grad(&a, &b).unwrap();
        let fa = |x: &[f64]| dist_negcos(&with_data(&a, x), &b).unwrap();
        let fb = |x: &[f64]| dist_negcos(&a, &with_data(&b, x)).unwrap();
        assert!(max_gradient_error(fa, a.data(), ga.data(), STEP) < TOL);
        assert!(max_gradient_error(fb, b.data(), gb.data(), STEP) < TOL);
    }
}

fn random_mask(rng: &mut ChaCha8Rng, len: usize) -> Vec<bool> {
    (0..len).map(|_| rng.gen_bool(0.85)).collect()
}

#[test]
fn depth_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let w = LossWeights::default();
    for _ in 0..10 {
        let p = random_field(&mut rng, [2, 1, 8, 8], 0.5, 3.0);
        let g = random_field(&mut rng, [2, 1, 8, 8], 0.5, 3.0);
        let mask = random_mask(&mut rng, 128);
        let out = loss_depth(&p, &g, &mask, &w).unwrap();
        let f = |x: &[f64]| loss_depth(&with_data(&p, x), &g, &mask, &w).unwrap().value;
        let err = max_gradient_error(f, p.data(), out.grad.data(), STEP);
        assert!(err < TOL, "relative error {err}");
    }
}

#[test]
fn normal_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let w = LossWeights::default();
    for _ in 0..10 {
        let p = random_field(&mut rng, [2, 3, 3, 3], -1.0, 1.0);
        let mut g = random_field(&mut rng, [2, 3, 3, 3], -1.0, 1.0);
        let hw = 9;
        for i in 0..2 {
            for j in 0..hw {
                let base = i * 3 * hw + j;
                let n = (0..3).map(|k| g.data()[base + k * hw].powi(2)).sum::<f64>().sqrt();
                for k in 0..3 {
                    g.data_mut()[base + k * hw] /= n;
                }
            }
        }
        let mask = random_mask(&mut rng, 18);
        let out = loss_normal(&p, &g, &mask, &w).unwrap();
        let f = |x: &[f64]| loss_normal(&with_data(&p, x), &g, &mask, &w).unwrap().value;
        let err = max_gradient_error(f, p.data(), out.grad.data(), STEP);
        assert!(err < TOL, "relative error {err}");
    }
}

#[test]
fn matting_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let w = LossWeights::default();
    for _ in 0..10 {
        let p = random_field(&mut rng, [2, 1, 4, 5], 0.05, 0.95);
        let g = random_field(&mut rng, [2, 1, 4, 5], 0.0, 1.0);
        let out = loss_matting(&p, &g, &w).unwrap();
        let f = |x: &[f64]| loss_matting(&with_data(&p, x), &g, &w).unwrap().value;
        let err = max_gradient_error(f, p.data(), out.grad.data(), STEP);
        assert!(err < TOL, "relative error {err}");
    }
}

#[test]
fn agg_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..10 {
        let taps: Vec<Field> = (0..3)
            .map(|_| random_field(&mut rng, [1, 4, 2, 2], -1.0, 1.0))
            .collect();
        let teacher: Vec<Field> = (0..3)
            .map(|_| random_field(&mut rng, [1, 4, 2, 2], -1.0, 1.0))
            .collect();
        // Round-trip through f32 so the finite differences see the same inputs.
        let taps: Vec<Field> = taps.iter().map(|f| Field::from_tensor(&f.to_tensor())).collect();
        let tb = bundle(TapSource::Teacher { timesteps: vec![3] }, teacher.clone());
        let pb = bundle(TapSource::Projected { timesteps: vec![3] }, taps.clone());
        let agg = loss_agg(&pb, &tb).unwrap();
        let teacher: Vec<Field> = teacher.iter().map(|f| Field::from_tensor(&f.to_tensor())).collect();
        for (k, grad) in &agg.grads {
            let f = |x: &[f64]| {
                (0..3)
                    .map(|j| {
                        let a = if j == *k { with_data(&taps[j], x) } else { taps[j].clone() };
                        dist_negcos(&a, &teacher[j]).unwrap()
                    })
                    .sum::<f64>()
            };
            assert!(max_gradient_error(f, taps[*k].data(), grad.data(), STEP) < TOL);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn affine_term_is_affine_invariant(
        d in prop::collection::vec(0.1f64..5.0, 16),
        g in prop::collection::vec(0.1f64..5.0, 16),
        a in 0.1f64..10.0,
        b in -3.0f64..3.0,
    ) {
        let w = LossWeights::default();
        let p = field([1, 1, 4, 4], d.clone());
        let gt = field([1, 1, 4, 4], g);
        let moved = field([1, 1, 4, 4], d.iter().map(|v| a * v + b).collect());
        let mask = [true; 16];
        let base = loss_depth(&p, &gt, &mask, &w).unwrap().terms["aff"];
        let other = match loss_depth(&moved, &gt, &mask, &w) {
            Ok(v) => v.terms["aff"],
            Err(_) => return Ok(()),
        };
        prop_assert!((base - other).abs() <= 1e-6 * base.abs().max(1e-12));
    }

    #[test]
    fn log_gradient_term_is_scale_invariant(
        d in prop::collection::vec(0.1f64..5.0, 64),
        g in prop::collection::vec(0.1f64..5.0, 64),
        c in 0.05f64..20.0,
    ) {
        let w = LossWeights::default();
        let p = field([1, 1, 8, 8], d.clone());
        let gt = field([1, 1, 8, 8], g);
        let scaled = field([1, 1, 8, 8], d.iter().map(|v| c * v).collect());
        let mask = [true; 64];
        let base = loss_depth(&p, &gt, &mask, &w).unwrap().terms["grad"];
        let other = loss_depth(&scaled, &gt, &mask, &w).unwrap().terms["grad"];
        prop_assert!((base - other).abs() <= 1e-6 * base.abs().max(1e-12));
    }

    #[test]
    fn masked_out_targets_are_ignored(
        d in prop::collection::vec(0.1f64..5.0, 36),
        g in prop::collection::vec(0.1f64..5.0, 36),
        n in prop::collection::vec(-1.0f64..1.0, 108),
        mask in prop::collection::vec(any::<bool>(), 36),
        flip in 0usize..36,
    ) {
        let w = LossWeights::default();
        let mut mask = mask;
        mask[0] = true;
        mask[1] = true;
        mask[flip] = false;
        let flip = if flip < 2 { 2 } else { flip };
        mask[flip] = false;
        let p = field([1, 1, 6, 6], d);
        let gt = field([1, 1, 6, 6], g.clone());
        let mut g2 = g;
        g2[flip] = -g2[flip] + 7.0;
        let gt2 = field([1, 1, 6, 6], g2);
        if let Ok(a) = loss_depth(&p, &gt, &mask, &w) {
            let b = loss_depth(&p, &gt2, &mask, &w).unwrap();
            prop_assert_eq!(a.value, b.value);
            prop_assert_eq!(a.grad, b.grad);
        }
        let pn = field([1, 3, 6, 6], n.clone());
        let mut gn = n.clone();
        for v in &mut gn { *v = v.signum() * 0.5; }
        let gtn = field([1, 3, 6, 6], gn.clone());
        gn[flip] = -gn[flip];
        gn[36 + flip] = 9.0;
        let gtn2 = field([1, 3, 6, 6], gn);
        let a = loss_normal(&pn, &gtn, &mask, &w).unwrap();
        let b = loss_normal(&pn, &gtn2, &mask, &w).unwrap();
        prop_assert_eq!(a.value, b.value);
    }

    #[test]
    fn bounds_hold(
        a in prop::collection::vec(-2.0f64..2.0, 24),
        b in prop::collection::vec(-2.0f64..2.0, 24),
        m in prop::collection::vec(0.0f64..1.0, 16),
        mg in prop::collection::vec(0.0f64..1.0, 16),
    ) {
        let w = LossWeights::default();
        let fa = field([2, 3, 2, 2], a.clone());
        let fb = field([2, 3, 2, 2], b.clone());
        let v = dist_negcos(&fa, &fb).unwrap();
        prop_assert!((-1.0..=1.0).contains(&v));
        let out = loss_normal(&fa, &fb, &[true; 8], &w).unwrap();
        prop_assert!(out.terms["ang"] >= 0.0 && out.terms["ang"] <= std::f64::consts::PI);
        prop_assert!(out.value >= 0.0);
        let mt = loss_matting(&field([1, 1, 4, 4], m), &field([1, 1, 4, 4], mg), &w).unwrap();
        prop_assert!(mt.value >= 0.0);
    }
}
