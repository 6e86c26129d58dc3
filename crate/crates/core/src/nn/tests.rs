use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::tensor::Tensor;

fn random_tensor(rng: &mut ChaCha8Rng, shape: [usize; 4]) -> Tensor {
    let data = (0..shape.iter().product::<usize>())
        .map(|_| rng.gen_range(-1.0f32..1.0))
        .collect();
    Tensor::from_vec(shape, data).unwrap()
}

/// Build a graph with `build`, contract its output with fixed random weights,
/// and compare every parameter gradient against central differences.
fn check_param_grads(store: ParamStore, build: impl Fn(&mut Graph) -> NodeId) {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let probe = {
        let mut g = Graph::new(&store);
        let out = build(&mut g);
        random_tensor(&mut rng, g.value(out).shape())
    };
    let objective = |s: &ParamStore| -> f64 {
        let mut g = Graph::frozen(s);
        let out = build(&mut g);
        g.value(out)
            .data()
            .iter()
            .zip(probe.data())
            .map(|(&a, &b)| f64::from(a) * f64::from(b))
            .sum()
    };
    let analytic = {
        let mut g = Graph::new(&store);
        let out = build(&mut g);
        g.backward(vec![(out, probe.clone())])
    };
    let h = 1e-2f32;
    for id in store.ids() {
        for j in 0..store.get(id).len() {
            let mut plus = store.clone();
            plus.get_mut(id).data_mut()[j] += h;
            let mut minus = store.clone();
            minus.get_mut(id).data_mut()[j] -= h;
            let fd = (objective(&plus) - objective(&minus)) / (2.0 * f64::from(h));
            let an = f64::from(analytic[id.index()].data()[j]);
            let err = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-2);
            assert!(
                err < 2e-2,
                "{}[{j}]: analytic {an} vs finite difference {fd}",
                store.name(id)
            );
        }
    }
}

#[test]
fn conv3x3_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut store = ParamStore::new();
    let x = store.insert("x", random_tensor(&mut rng, [2, 2, 5, 4]));
    let w = store.insert("w", random_tensor(&mut rng, [3, 2, 3, 3]));
    let b = store.insert("b", random_tensor(&mut rng, [1, 3, 1, 1]));
    check_param_grads(store, |g| {
        let xn = g.param(x);
        g.conv(xn, w, Some(b), 3)
    });
}

#[test]
fn conv1x1_and_repeat_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut store = ParamStore::new();
    let x = store.insert("x", random_tensor(&mut rng, [1, 3, 1, 1]));
    let w = store.insert("w", random_tensor(&mut rng, [2, 3, 1, 1]));
    check_param_grads(store, |g| {
        let xn = g.param(x);
        let r = g.repeat(xn, 3);
        g.conv(r, w, None, 1)
    });
}

#[test]
fn group_norm_silu_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut store = ParamStore::new();
    let x = store.insert("x", random_tensor(&mut rng, [2, 4, 3, 3]));
    let gamma = store.insert("gamma", random_tensor(&mut rng, [1, 4, 1, 1]));
    let beta = store.insert("beta", random_tensor(&mut rng, [1, 4, 1, 1]));
    check_param_grads(store, |g| {
        let xn = g.param(x);
        let n = g.group_norm(xn, gamma, beta, 2);
        g.silu(n)
    });
}

#[test]
fn film_pool_upsample_concat_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut store = ParamStore::new();
    let x = store.insert("x", random_tensor(&mut rng, [2, 2, 4, 4]));
    let s = store.insert("s", random_tensor(&mut rng, [2, 2, 1, 1]));
    let t = store.insert("t", random_tensor(&mut rng, [2, 2, 1, 1]));
    let v = store.insert("v", random_tensor(&mut rng, [1, 4, 1, 1]));
    check_param_grads(store, |g| {
        let xn = g.param(x);
        let sn = g.param(s);
        let tn = g.param(t);
        let f = g.film(xn, sn, tn);
        let p = g.avg_pool2(f);
        let u = g.upsample2(p);
        let c = g.concat(u, xn);
        let vn = g.param(v);
        let a = g.add_channel(c, vn);
        let sl = g.channels(a, 1, 2);
        let sig = g.sigmoid(sl);
        g.add(sig, xn)
    });
}

#[test]
fn frozen_graph_yields_zero_grads() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut store = ParamStore::new();
    let w = store.insert("w", random_tensor(&mut rng, [1, 1, 3, 3]));
    let mut g = Graph::frozen(&store);
    let x = g.input(random_tensor(&mut rng, [1, 1, 4, 4]));
    let y = g.conv(x, w, None, 3);
    assert!(!g.requires_grad(y));
    let seed = Tensor::full(g.value(y).shape(), 1.0);
    let grads = g.backward(vec![(y, seed)]);
    assert!(grads[0].data().iter().all(|&v| v == 0.0));
}

#[test]
fn conv_matches_direct_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = random_tensor(&mut rng, [1, 2, 4, 5]);
    let w = random_tensor(&mut rng, [1, 2, 3, 3]);
    let mut store = ParamStore::new();
    let wid = store.insert("w", w.clone());
    let mut g = Graph::frozen(&store);
    let xn = g.input(x.clone());
    let y = g.conv(xn, wid, None, 3);
    let y = g.value(y);
    for yy in 0..4i32 {
        for xx in 0..5i32 {
            let mut acc = 0.0f32;
            for c in 0..2 {
                for ky in 0..3i32 {
                    for kx in 0..3i32 {
                        let (sy, sx) = (yy + ky - 1, xx + kx - 1);
                        if (0..4).contains(&sy) && (0..5).contains(&sx) {
                            acc += w.data()[(c * 3 + ky as usize) * 3 + kx as usize]
                                * x.data()[c * 20 + sy as usize * 5 + sx as usize];
                        }
                    }
                }
            }
            let got = y.data()[yy as usize * 5 + xx as usize];
            assert!((got - acc).abs() < 1e-5, "({yy},{xx}) {got} vs {acc}");
        }
    }
}

#[test]
#[ignore]
fn bench_kernels() {
    use super::{conv, kernels};
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for (c, hw) in [(4usize, 64usize), (8, 32), (16, 16), (12, 64)] {
        let x = random_tensor(&mut rng, [32, c, hw, hw]);
        let w = random_tensor(&mut rng, [c, c, 3, 3]);
        let b = random_tensor(&mut rng, [1, c, 1, 1]);
        let gamma = random_tensor(&mut rng, [1, c, 1, 1]);
        let t = std::time::Instant::now();
        let y = conv::conv2d(&x, &w, Some(&b), 3);
        let t_conv = t.elapsed();
        let t = std::time::Instant::now();
        let _ = conv::conv2d_backward(&x, &w, &y, 3, true, true);
        let t_convb = t.elapsed();
        let t = std::time::Instant::now();
        let (_, stats) = kernels::group_norm(&x, &gamma, &b, 4.min(c));
        let t_gn = t.elapsed();
        let t = std::time::Instant::now();
        let _ = kernels::group_norm_backward(&x, &gamma, &stats, 4.min(c), &y);
        let t_gnb = t.elapsed();
        let t = std::time::Instant::now();
        let mut s = x.clone();
        kernels::map_inplace(s.data_mut(), |v| v * kernels::sigmoid(v));
        let t_silu = t.elapsed();
        eprintln!("c={c} hw={hw}: conv {t_conv:?} convb {t_convb:?} gn {t_gn:?} gnb {t_gnb:?} silu {t_silu:?}");
    }
}
