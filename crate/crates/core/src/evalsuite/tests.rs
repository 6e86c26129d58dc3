use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::scenegen::{random_scene, render_scene, SceneConfig};

const N: usize = 8;

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

#[test]
fn align_affine_examples() {
    let g = [1.0, 2.0, 5.0, 9.0];
    let all = [true; 4];
    let (a, b) = align_affine(&g, &g, &all).unwrap();
    assert!(close(a, 1.0, 1e-12) && close(b, 0.0, 1e-12));
    let p: Vec<f64> = g.iter().map(|v| (v - 3.0) / 2.0).collect();
    let (a, b) = align_affine(&p, &g, &all).unwrap();
    assert!(close(a, 2.0, 1e-12) && close(b, 3.0, 1e-12));
    let (a, b) = align_affine(&[1.0, 2.0, 3.0], &[2.0, 4.0, 7.0], &[true; 3]).unwrap();
    assert!(close(a, 2.5, 1e-12), "{a}");
    assert!(close(b, -2.0 / 3.0, 1e-12), "{b}");
    assert!(matches!(
        align_affine(&[4.0; 3], &[1.0, 2.0, 3.0], &[true; 3]),
        Err(Error::Degenerate(_))
    ));
    assert!(matches!(
        align_affine(&[1.0, 2.0], &[1.0, 2.0], &[true, false]),
        Err(Error::Degenerate(_))
    ));
}

#[test]
fn absrel_examples() {
    let g = [1.0, 2.0, 4.0, 8.0];
    let all = [true; 4];
    assert_eq!(metric_absrel(&g, &g, &all, false).unwrap(), 0.0);
    assert_eq!(metric_absrel(&g, &g, &all, true).unwrap(), 0.0);
    let p: Vec<f64> = g.iter().map(|v| 7.0 * v + 2.0).collect();
    assert!(metric_absrel(&p, &g, &all, true).unwrap() < 1e-12);
    assert_eq!(metric_absrel(&[2.0, 2.0], &[1.0, 4.0], &[true; 2], false).unwrap(), 0.75);
    assert!(matches!(
        metric_absrel(&[1.0, 1.0], &[0.0, 1.0], &[true; 2], false),
        Err(Error::Input(_))
    ));
    // Masked-out non-positive targets are fine.
    assert_eq!(metric_absrel(&[1.0, 5.0], &[1.0, 0.0], &[true, false], false).unwrap(), 0.0);
}

#[test]
fn delta1_examples() {
    let g = [1.0, 2.0, 3.0, 4.0];
    let all = [true; 4];
    let scaled = |s: f64| g.iter().map(|v| v * s).collect::<Vec<_>>();
    assert_eq!(metric_delta1(&scaled(1.2), &g, &all, false).unwrap(), 1.0);
    assert_eq!(metric_delta1(&scaled(1.3), &g, &all, false).unwrap(), 0.0);
    let mixed = [1.1, 2.2, 3.0 * 1.4, 4.0 * 1.4];
    assert_eq!(metric_delta1(&mixed, &g, &all, false).unwrap(), 0.5);
}

/// Rotate `n` about an axis orthogonal to it by `deg` degrees.
fn rotate_away(n: [f64; 3], deg: f64) -> [f64; 3] {
    let helper = if n[0].abs() < 0.9 { [1.0, 0.0, 0.0] } else { [0.0, 1.0, 0.0] };
    let d: f64 = (0..3).map(|k| helper[k] * n[k]).sum();
    let mut u = [0, 1, 2].map(|k| helper[k] - d * n[k]);
    let len = u.iter().map(|v| v * v).sum::<f64>().sqrt();
    u.iter_mut().for_each(|v| *v /= len);
    let r = deg.to_radians();
    [0, 1, 2].map(|k| r.cos() * n[k] + r.sin() * u[k])
}

#[test]
fn normal_metric_examples() {
    let gt = vec![[0.0, 0.0, 1.0]; 4];
    let mask = [true; 4];
    let (mean, frac) = metric_normal(&gt, &gt, &mask).unwrap();
    assert_eq!((mean, frac), (0.0, 1.0));
    let perp = vec![[1.0, 0.0, 0.0]; 4];
    let (mean, frac) = metric_normal(&perp, &gt, &mask).unwrap();
    assert!(close(mean, 90.0, 1e-9) && frac == 0.0);
    let half: Vec<[f64; 3]> = (0..4).map(|i| rotate_away(gt[i], if i < 2 { 10.0 } else { 20.0 })).collect();
    let (mean, frac) = metric_normal(&half, &gt, &mask).unwrap();
    assert!(close(mean, 15.0, 1e-9), "{mean}");
    assert_eq!(frac, 0.5);
    // Unnormalised and zero predictions are guarded.
    let (mean, _) = metric_normal(&[[0.0, 0.0, 5.0]], &[[0.0, 0.0, 1.0]], &[true]).unwrap();
    assert!(mean < 1e-6);
    let (mean, _) = metric_normal(&[[0.0; 3]], &[[0.0, 0.0, 1.0]], &[true]).unwrap();
    assert!(close(mean, 90.0, 1e-9));
}

#[test]
fn matting_examples() {
    let z = vec![0.3; 64];
    let m = metric_matting(&z, &z, 8, 8).unwrap();
    assert_eq!((m.sad, m.mad, m.mse, m.conn), (0.0, 0.0, 0.0, 0.0));
    let (p, g) = (vec![0.0; 1000], vec![1.0; 1000]);
    let m = metric_matting(&p, &g, 25, 40).unwrap();
    assert_eq!((m.sad, m.mad, m.mse), (1.0, 1.0, 1.0));
    assert!(matches!(metric_matting(&[1.5], &[1.0], 1, 1), Err(Error::Input(_))));
}

#[test]
fn binary_examples() {
    let g: Vec<f64> = (0..16).map(|i| f64::from(i % 3 == 0)).collect();
    assert_eq!(
        metric_binary(&g, &g, 0.5).unwrap(),
        BinaryMetrics { iou: 1.0, pa: 1.0, dice: 1.0 }
    );
    let inv: Vec<f64> = g.iter().map(|v| 1.0 - v).collect();
    assert_eq!(
        metric_binary(&inv, &g, 0.5).unwrap(),
        BinaryMetrics { iou: 0.0, pa: 0.0, dice: 0.0 }
    );
    let mut a = vec![0.0; 16];
    let mut b = vec![0.0; 16];
    for i in 0..4 {
        a[i] = 1.0;
    }
    for i in 2..8 {
        b[i] = 1.0;
    }
    let m = metric_binary(&a, &b, 0.5).unwrap();
    assert_eq!((m.iou, m.dice, m.pa), (0.25, 0.4, 0.625));
    let empty = vec![0.0; 16];
    assert_eq!(metric_binary(&empty, &empty, 0.5).unwrap().iou, 1.0);
}

// Brute-force oracles: each metric recomputed per pixel with plain loops and
// different algorithms (Cramer's rule, union-find labelling).

fn oracle_align(p: &[f64], g: &[f64], m: &[bool]) -> (f64, f64) {
    let (mut s1, mut sp, mut spp, mut sg, mut spg) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for i in 0..p.len() {
        if m[i] {
            s1 += 1.0;
            sp += p[i];
            spp += p[i] * p[i];
            sg += g[i];
            spg += p[i] * g[i];
        }
    }
    let det = spp * s1 - sp * sp;
    ((spg * s1 - sp * sg) / det, (spp * sg - sp * spg) / det)
}

fn oracle_depth(p: &[f64], g: &[f64], m: &[bool], align: bool) -> (f64, f64) {
    let (a, b) = if align { oracle_align(p, g, m) } else { (1.0, 0.0) };
    let (mut rel, mut hit, mut cnt) = (0.0, 0.0, 0.0);
    for i in 0..p.len() {
        if !m[i] {
            continue;
        }
        let q = a * p[i] + b;
        rel += ((q - g[i]) / g[i]).abs();
        let q = if q < 1e-6 { 1e-6 } else { q };
        let ratio = if q > g[i] { q / g[i] } else { g[i] / q };
        if ratio < 1.25 {
            hit += 1.0;
        }
        cnt += 1.0;
    }
    (rel / cnt, hit / cnt)
}

fn oracle_normal(p: &[[f64; 3]], g: &[[f64; 3]], m: &[bool]) -> (f64, f64) {
    let (mut sum, mut hit, mut cnt) = (0.0, 0.0, 0.0);
    for i in 0..p.len() {
        if !m[i] {
            continue;
        }
        let len = (p[i][0].powi(2) + p[i][1].powi(2) + p[i][2].powi(2)).sqrt().max(1e-8);
        let c = ((p[i][0] * g[i][0] + p[i][1] * g[i][1] + p[i][2] * g[i][2]) / len).clamp(-1.0, 1.0);
        let deg = c.acos() * 180.0 / std::f64::consts::PI;
        sum += deg;
        if deg < 11.25 {
            hit += 1.0;
        }
        cnt += 1.0;
    }
    (sum / cnt, hit / cnt)
}

fn find(parent: &mut [usize], i: usize) -> usize {
    let mut r = i;
    while parent[r] != r {
        r = parent[r];
    }
    r
}

/// Connectivity error via union-find; largest-component ties go to the
/// component containing the earliest pixel.
fn oracle_conn(p: &[f64], g: &[f64], h: usize, w: usize) -> f64 {
    let n = h * w;
    let mut level = vec![None::<f64>; n];
    for step in 1..=10 {
        let th = step as f64 / 10.0;
        let on: Vec<bool> = (0..n).map(|i| p[i] >= th && g[i] >= th).collect();
        let mut parent: Vec<usize> = (0..n).collect();
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                for j in [(x + 1 < w).then(|| i + 1), (y + 1 < h).then(|| i + w)].into_iter().flatten() {
                    if on[i] && on[j] {
                        let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                        parent[a.max(b)] = a.min(b);
                    }
                }
            }
        }
        let mut size = vec![0usize; n];
        for i in 0..n {
            if on[i] {
                let r = find(&mut parent, i);
                size[r] += 1;
            }
        }
        // Roots are the minimum index of each component, so the first
        // maximum in index order is the earliest-starting component.
        let mut best = None;
        for r in 0..n {
            if size[r] > 0 && best.is_none_or(|b: usize| size[r] > size[b]) {
                best = Some(r);
            }
        }
        for i in 0..n {
            let inside = on[i] && Some(find(&mut parent, i)) == best;
            if level[i].is_none() && !inside {
                level[i] = Some((step - 1) as f64 / 10.0);
            }
        }
    }
    let mut err = 0.0;
    for i in 0..n {
        let l = level[i].unwrap_or(1.0);
        let (dp, dg) = (p[i] - l, g[i] - l);
        let fp = if dp >= 0.15 { 1.0 - dp } else { 1.0 };
        let fg = if dg >= 0.15 { 1.0 - dg } else { 1.0 };
        err += (fp - fg).abs();
    }
    err
}

fn oracle_binary(p: &[f64], g: &[f64]) -> (f64, f64, f64) {
    let (mut tp, mut fp, mut fneg, mut tn) = (0.0, 0.0, 0.0, 0.0);
    for i in 0..p.len() {
        match (p[i] >= 0.5, g[i] >= 0.5) {
            (true, true) => tp += 1.0,
            (true, false) => fp += 1.0,
            (false, true) => fneg += 1.0,
            (false, false) => tn += 1.0,
        }
    }
    let iou = if tp + fp + fneg == 0.0 { 1.0 } else { tp / (tp + fp + fneg) };
    let dice = if 2.0 * tp + fp + fneg == 0.0 { 1.0 } else { 2.0 * tp / (2.0 * tp + fp + fneg) };
    (iou, (tp + tn) / p.len() as f64, dice)
}

/// Matte with blobs and plateaus so level sets have several components.
fn random_matte(rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..N * N)
        .map(|_| {
            let u: f64 = rng.gen();
            if u < 0.3 {
                0.0
            } else if u < 0.5 {
                1.0
            } else {
                (rng.gen::<f64>() * 10.0).round() / 10.0 * 0.5 + rng.gen::<f64>() * 0.5
            }
        })
        .collect()
}

#[test]
fn metrics_match_brute_force_oracles() {
    let mut rng = ChaCha8Rng::seed_from_u64(2718);
    for _ in 0..20 {
        let g: Vec<f64> = (0..N * N).map(|_| rng.gen_range(0.5..10.0)).collect();
        let p: Vec<f64> = g.iter().map(|v| v * rng.gen_range(0.6..1.5) + rng.gen_range(-0.3..0.3)).collect();
        let m: Vec<bool> = (0..N * N).map(|_| rng.gen_bool(0.8)).collect();
        for align in [false, true] {
            let (rel, d1) = oracle_depth(&p, &g, &m, align);
            assert!(close(metric_absrel(&p, &g, &m, align).unwrap(), rel, 1e-9));
            assert!(close(metric_delta1(&p, &g, &m, align).unwrap(), d1, 1e-9));
        }

        let gn: Vec<[f64; 3]> = (0..N * N)
            .map(|_| {
                let v: [f64; 3] = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(0.1..1.0)];
                let l = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
                v.map(|x| x / l)
            })
            .collect();
        let pn: Vec<[f64; 3]> = gn
            .iter()
            .map(|v| v.map(|x| 2.0 * x + rng.gen_range(-0.4..0.4)))
            .collect();
        let (mean, frac) = metric_normal(&pn, &gn, &m).unwrap();
        let (om, of) = oracle_normal(&pn, &gn, &m);
        assert!(close(mean, om, 1e-9) && close(frac, of, 1e-9));

        let (pa, ga) = (random_matte(&mut rng), random_matte(&mut rng));
        let mm = metric_matting(&pa, &ga, N, N).unwrap();
        let sad: f64 = pa.iter().zip(&ga).map(|(a, b)| (a - b).abs()).sum();
        let sq: f64 = pa.iter().zip(&ga).map(|(a, b)| (a - b) * (a - b)).sum();
        assert!(close(mm.sad, sad / 1000.0, 1e-9));
        assert!(close(mm.mad, sad / 64.0, 1e-9));
        assert!(close(mm.mse, sq / 64.0, 1e-9));
        assert!(close(mm.conn, oracle_conn(&pa, &ga, N, N) / 1000.0, 1e-6));

        let b = metric_binary(&pa, &ga, 0.5).unwrap();
        let (iou, acc, dice) = oracle_binary(&pa, &ga);
        assert!(close(b.iou, iou, 1e-9) && close(b.pa, acc, 1e-9) && close(b.dice, dice, 1e-9));
    }
}

#[test]
fn single_blob_connectivity() {
    // A 3x3 blob of 0.8 in the ground truth; the prediction splits it.
    let mut g = vec![0.0; 64];
    for y in 2..5 {
        for x in 2..5 {
            g[y * 8 + x] = 0.8;
        }
    }
    let mut p = g.clone();
    for y in 2..5 {
        p[y * 8 + 3] = 0.0;
    }
    p[2 * 8 + 4] = 0.6;
    let c = connectivity_error(&p, &g, 8, 8);
    assert!(close(c, oracle_conn(&p, &g, 8, 8), 1e-12));
    assert!(c > 0.0);
}

#[test]
fn metrics_degrade_with_noise() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let median = |mut v: Vec<f64>| {
        v.sort_by(f64::total_cmp);
        0.5 * (v[9] + v[10])
    };
    let mut last = [0.0f64; 3];
    for sigma in [0.0, 0.02, 0.05, 0.1, 0.2] {
        let (mut rel, mut ang, mut sad) = (vec![], vec![], vec![]);
        for _ in 0..20 {
            let g: Vec<f64> = (0..256).map(|_| rng.gen_range(1.0..5.0)).collect();
            let noisy: Vec<f64> = g.iter().map(|v| v + sigma * rng.gen_range(-1.0..1.0) * v).collect();
            rel.push(metric_absrel(&noisy, &g, &[true; 256], false).unwrap());
            let gn = vec![[0.0, 0.0, 1.0]; 256];
            let pn: Vec<[f64; 3]> = gn
                .iter()
                .map(|v| [v[0] + sigma * rng.gen_range(-1.0..1.0), v[1] + sigma * rng.gen_range(-1.0..1.0), v[2]])
                .collect();
            ang.push(metric_normal(&pn, &gn, &[true; 256]).unwrap().0);
            let ga: Vec<f64> = (0..256).map(|_| rng.gen()).collect();
            let pa: Vec<f64> = ga.iter().map(|v| (v + sigma * rng.gen_range(-1.0..1.0)).clamp(0.0, 1.0)).collect();
            sad.push(metric_matting(&pa, &ga, 16, 16).unwrap().sad);
        }
        let now = [median(rel), median(ang), median(sad)];
        for k in 0..3 {
            assert!(now[k] >= last[k], "metric {k} improved at sigma {sigma}");
        }
        last = now;
    }
}

fn report(task: Task, values: &[f64]) -> MetricsReport {
    MetricsReport {
        task,
        metrics: metric_names(task)
            .iter()
            .zip(values)
            .map(|(n, &v)| (n.to_string(), v))
            .collect(),
        samples: 10,
        align: true,
        nfe: STUDENT_NFE.into(),
    }
}

#[test]
fn ranking_examples() {
    let a = report(Task::Depth, &[0.08, 0.94]);
    assert_eq!(average_ranks(&[&a]).unwrap(), vec![1.0]);
    let b = report(Task::Depth, &[0.10, 0.90]);
    assert_eq!(average_ranks(&[&a, &b]).unwrap(), vec![1.0, 2.0]);
    // absrel: a and c tie for best; delta1: a best, c second, b third.
    let c = report(Task::Depth, &[0.08, 0.92]);
    let r = average_ranks(&[&a, &b, &c]).unwrap();
    assert_eq!(r, vec![(1.5 + 1.0) / 2.0, 3.0, (1.5 + 2.0) / 2.0]);
    let n = report(Task::Normal, &[10.0, 0.5]);
    assert!(matches!(average_ranks(&[&a, &n]), Err(Error::Input(_))));
    assert!(average_ranks(&[]).is_err());
}

#[test]
fn table_row_format() {
    let rows = vec![
        ("Ours".to_string(), report(Task::Depth, &[0.082, 0.940])),
        ("Base".to_string(), report(Task::Depth, &[0.1, 0.9])),
    ];
    let t = render_table(&rows).unwrap();
    let ours = t.lines().find(|l| l.starts_with("Ours")).unwrap();
    assert!(ours.contains("1 × 1"));
    assert!(ours.contains("0.082") && ours.contains("0.940"), "{ours}");
    assert!(ours.trim_end().ends_with("1.00"));
    assert!(t.lines().next().unwrap().contains("absrel↓"));
}

#[test]
fn report_kv_round_trip() {
    let r = report(Task::Matting, &[1.5, 0.01, 0.002, 0.7]);
    assert_eq!(MetricsReport::from_kv(&r.to_kv()).unwrap(), r);
    assert!(MetricsReport::from_kv("task=depth\nsamples=3\nabsrel=0.1").is_err());
    let bad = report(Task::Depth, &[0.1, 1.5]);
    assert!(MetricsReport::from_kv(&bad.to_kv()).is_err());
    assert!(r.to_text().contains("NFE       1 × 1"));
}

#[test]
fn ground_truth_oracle_gives_ideal_values() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let samples: Vec<_> = (0..5)
        .map(|_| render_scene(&random_scene(&mut rng, &SceneConfig::default()).unwrap(), (16, 16), 2).unwrap())
        .collect();
    for task in [Task::Depth, Task::Normal, Task::Matting] {
        let preds: Vec<Raster> = samples.iter().map(|s| ground_truth_raster(s, task)).collect();
        for align in [false, true] {
            let protocol = Protocol { align, batch_size: 4 };
            let r = evaluate_maps(&preds, &samples, task, &protocol, STUDENT_NFE).unwrap();
            let ideal: &[f64] = match task {
                Task::Depth => &[0.0, 1.0],
                Task::Normal => &[0.0, 1.0],
                Task::Matting => &[0.0; 4],
            };
            for ((name, v), want) in r.metrics.iter().zip(ideal) {
                assert_eq!(*v, *want, "{task} {name}");
            }
        }
    }
    assert!(matches!(
        evaluate_maps(&[], &[], Task::Depth, &Protocol::default(), STUDENT_NFE),
        Err(Error::Input(_))
    ));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn aligned_depth_metrics_are_affine_invariant(
        seed in any::<u64>(),
        a in 0.05f64..20.0,
        b in -5.0f64..5.0,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g: Vec<f64> = (0..64).map(|_| rng.gen_range(0.5..10.0)).collect();
        let p: Vec<f64> = g.iter().map(|v| v + rng.gen_range(-1.0..1.0)).collect();
        let m: Vec<bool> = (0..64).map(|_| rng.gen_bool(0.9)).collect();
        let q: Vec<f64> = p.iter().map(|v| a * v + b).collect();
        let (r0, r1) = (metric_absrel(&p, &g, &m, true).unwrap(), metric_absrel(&q, &g, &m, true).unwrap());
        prop_assert!((r0 - r1).abs() <= 1e-9 * r0.max(1.0));
        prop_assert_eq!(metric_delta1(&p, &g, &m, true).unwrap(), metric_delta1(&q, &g, &m, true).unwrap());
    }

    #[test]
    fn fraction_metrics_stay_in_unit_interval(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g: Vec<f64> = (0..64).map(|_| rng.gen_range(0.1..3.0)).collect();
        let p: Vec<f64> = (0..64).map(|_| rng.gen_range(-1.0..3.0)).collect();
        let m = vec![true; 64];
        let d = metric_delta1(&p, &g, &m, false).unwrap();
        prop_assert!((0.0..=1.0).contains(&d));
        let pn: Vec<[f64; 3]> = (0..64).map(|_| [rng.gen(), rng.gen(), rng.gen()]).collect();
        let gn = vec![[0.0, 0.0, 1.0]; 64];
        let (_, f) = metric_normal(&pn, &gn, &m).unwrap();
        prop_assert!((0.0..=1.0).contains(&f));
        let pa: Vec<f64> = (0..64).map(|_| rng.gen()).collect();
        let ga: Vec<f64> = (0..64).map(|_| rng.gen()).collect();
        let bm = metric_binary(&pa, &ga, 0.5).unwrap();
        for v in [bm.iou, bm.pa, bm.dice] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
    }
}

#[test]
fn conn_levels_are_exact_decimals() {
    // 0.3 must count as reaching the 0.3 level, so the pixel leaves at 0.4.
    let err = connectivity_error(&[0.3], &[0.5], 1, 1);
    assert!((err - 0.2).abs() < 1e-12, "{err}");
}
