use std::collections::BTreeMap;

use super::{check_mask, check_same, gradient_l1, sign, Field, LossValue, LossWeights};
use crate::error::{Error, Result};

/// Floor applied to depths before taking logs.
pub const LOG_CLAMP: f64 = 1e-6;
/// Number of factor-2 scales in the log-gradient term.
pub const GRADIENT_SCALES: usize = 4;

/// Median/mean-absolute-deviation normalization of one masked map.
struct Ssi {
    values: Vec<f64>,
    /// `∂ median / ∂ d_j` (1 for an odd count, ½ on each middle value otherwise).
    median_weights: Vec<(usize, f64)>,
    median: f64,
    scale: f64,
    count: usize,
}

fn ssi_item(d: &[f64], mask: &[bool]) -> Result<Ssi> {
    let mut idx: Vec<usize> = (0..d.len()).filter(|&i| mask[i]).collect();
    let count = idx.len();
    if count < 2 {
        return Err(Error::Degenerate(format!(
            "scale-and-shift normalization needs at least 2 valid pixels, got {count}"
        )));
    }
    idx.sort_by(|&a, &b| d[a].total_cmp(&d[b]).then(a.cmp(&b)));
    let (median, median_weights) = if count % 2 == 1 {
        (d[idx[count / 2]], vec![(idx[count / 2], 1.0)])
    } else {
        let (lo, hi) = (idx[count / 2 - 1], idx[count / 2]);
        (0.5 * (d[lo] + d[hi]), vec![(lo, 0.5), (hi, 0.5)])
    };
    let scale = idx.iter().map(|&i| (d[i] - median).abs()).sum::<f64>() / count as f64;
    if !(scale > 0.0) {
        return Err(Error::Degenerate(
            "masked depth is constant (zero scale)".into(),
        ));
    }
    let values = d
        .iter()
        .zip(mask)
        .map(|(&v, &m)| if m { (v - median) / scale } else { 0.0 })
        .collect();
    Ok(Ssi {
        values,
        median_weights,
        median,
        scale,
        count,
    })
}

impl Ssi {
    /// Pull `upstream = ∂L/∂d̂` back to `∂L/∂d` and add it into `out`.
    fn backward(&self, d: &[f64], mask: &[bool], upstream: &[f64], out: &mut [f64]) {
        let m = self.count as f64;
        let mut a = 0.0;
        let mut b = 0.0;
        let mut sign_sum = 0.0;
        for i in 0..d.len() {
            if mask[i] {
                a += upstream[i];
                b += upstream[i] * self.values[i];
                sign_sum += sign(d[i] - self.median);
            }
        }
        b /= self.scale;
        let mut median_w = vec![0.0; d.len()];
        for &(i, wgt) in &self.median_weights {
            median_w[i] = wgt;
        }
        for j in 0..d.len() {
            if !mask[j] {
                continue;
            }
            let ds = (sign(d[j] - self.median) - median_w[j] * sign_sum) / m;
            out[j] += upstream[j] / self.scale - a * median_w[j] / self.scale - b * ds;
        }
    }
}

/// `(d − median) / mean|d − median|` per item over the masked pixels; masked-out
/// pixels are zero. `d` must have one channel.
pub fn ssi_normalize(d: &Field, mask: &[bool]) -> Result<Field> {
    single_channel(d)?;
    check_mask(d, mask)?;
    let [n, _, h, w] = d.shape();
    let hw = h * w;
    let mut out = Vec::with_capacity(d.len());
    for i in 0..n {
        out.extend(ssi_item(d.item(i), &mask[i * hw..(i + 1) * hw])?.values);
    }
    Field::new(d.shape(), out)
}

fn single_channel(d: &Field) -> Result<()> {
    if d.shape()[1] != 1 {
        return Err(Error::Shape(format!(
            "depth maps have one channel, got {:?}",
            d.shape()
        )));
    }
    Ok(())
}

/// One level of the log-residual pyramid.
struct Level {
    r: Vec<f64>,
    valid: Vec<bool>,
    h: usize,
    w: usize,
}

impl Level {
    /// Average-pool by 2, keeping a pixel only if all four children are valid.
    fn down(&self) -> Option<Level> {
        let (h, w) = (self.h / 2, self.w / 2);
        if h == 0 || w == 0 {
            return None;
        }
        let mut r = vec![0.0; h * w];
        let mut valid = vec![false; h * w];
        for y in 0..h {
            for x in 0..w {
                let c = [
                    2 * y * self.w + 2 * x,
                    2 * y * self.w + 2 * x + 1,
                    (2 * y + 1) * self.w + 2 * x,
                    (2 * y + 1) * self.w + 2 * x + 1,
                ];
                if c.iter().all(|&i| self.valid[i]) {
                    valid[y * w + x] = true;
                    r[y * w + x] = 0.25 * c.iter().map(|&i| self.r[i]).sum::<f64>();
                }
            }
        }
        Some(Level { r, valid, h, w })
    }

    /// Adjoint of [`Level::down`] for a gradient on the pooled level.
    fn up(&self, pooled_grad: &[f64], pooled: &Level) -> Vec<f64> {
        let mut g = vec![0.0; self.h * self.w];
        for y in 0..pooled.h {
            for x in 0..pooled.w {
                let v = pooled_grad[y * pooled.w + x];
                if v == 0.0 {
                    continue;
                }
                for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    g[(2 * y + dy) * self.w + 2 * x + dx] += 0.25 * v;
                }
            }
        }
        g
    }
}

/// Multi-scale log-gradient matching term for one item. Returns the value and
/// `∂/∂R` at full resolution; the value is averaged over scales that have at
/// least one valid pixel pair.
fn log_gradient_item(r: Vec<f64>, valid: Vec<bool>, h: usize, w: usize) -> (f64, Vec<f64>) {
    let mut levels = vec![Level { r, valid, h, w }];
    while levels.len() < GRADIENT_SCALES {
        match levels.last().expect("nonempty").down() {
            Some(l) => levels.push(l),
            None => break,
        }
    }
    let mut value = 0.0;
    let mut used = 0usize;
    let mut grad0 = vec![0.0; h * w];
    for s in 0..levels.len() {
        let l = &levels[s];
        if !has_pair(l) {
            continue;
        }
        let mut g = vec![0.0; l.h * l.w];
        let v = gradient_l1(&l.r, &l.valid, l.h, l.w, 1.0, &mut g);
        used += 1;
        value += v;
        for t in (0..s).rev() {
            g = levels[t].up(&g, &levels[t + 1]);
        }
        for (a, b) in grad0.iter_mut().zip(&g) {
            *a += b;
        }
    }
    if used == 0 {
        return (0.0, grad0);
    }
    let inv = 1.0 / used as f64;
    grad0.iter_mut().for_each(|v| *v *= inv);
    (value * inv, grad0)
}

fn has_pair(l: &Level) -> bool {
    (0..l.h).any(|y| {
        (0..l.w).any(|x| {
            let i = y * l.w + x;
            l.valid[i]
                && ((x + 1 < l.w && l.valid[i + 1]) || (y + 1 < l.h && l.valid[i + l.w]))
        })
    })
}

/// Weighted depth loss: masked MSE, scale-and-shift-invariant L1 and the
/// multi-scale log-gradient term. Items with an empty mask are skipped, and
/// items whose masked prediction or target is constant get no affine term.
pub fn loss_depth(
    pred: &Field,
    gt: &Field,
    mask: &[bool],
    weights: &LossWeights,
) -> Result<LossValue> {
    check_same(pred, gt, "loss_depth")?;
    single_channel(pred)?;
    check_mask(pred, mask)?;
    let [n, _, h, w] = pred.shape();
    let hw = h * w;
    let mut grad = Field::zeros(pred.shape());
    let (mut mse, mut aff, mut lgrad) = (0.0, 0.0, 0.0);
    let mut clamped = 0usize;
    let mut items = 0usize;
    let mut aff_skipped = 0usize;
    for i in 0..n {
        let (p, g) = (pred.item(i), gt.item(i));
        let mk = &mask[i * hw..(i + 1) * hw];
        let m = mk.iter().filter(|&&v| v).count();
        if m == 0 {
            continue;
        }
        items += 1;
        let gi = grad.item_mut(i);
        let mf = m as f64;

        for j in 0..hw {
            if mk[j] {
                let d = p[j] - g[j];
                mse += d * d / mf;
                gi[j] += weights.depth_mse * 2.0 * d / mf;
            }
        }

        // A constant masked map (e.g. a wall seen head-on) has no defined
        // normalization; such items add nothing to the affine term.
        if let (Ok(sp), Ok(sg)) = (ssi_item(p, mk), ssi_item(g, mk)) {
            let mut upstream = vec![0.0; hw];
            for j in 0..hw {
                if mk[j] {
                    let d = sp.values[j] - sg.values[j];
                    aff += d.abs() / mf;
                    upstream[j] = weights.depth_aff * sign(d) / mf;
                }
            }
            sp.backward(p, mk, &upstream, gi);
        } else {
            aff_skipped += 1;
        }

        let mut r = vec![0.0; hw];
        let mut dlog = vec![0.0; hw];
        for j in 0..hw {
            if !mk[j] {
                continue;
            }
            if p[j] <= LOG_CLAMP {
                clamped += 1;
            } else {
                dlog[j] = 1.0 / p[j];
            }
            if g[j] <= LOG_CLAMP {
                clamped += 1;
            }
            r[j] = p[j].max(LOG_CLAMP).ln() - g[j].max(LOG_CLAMP).ln();
        }
        let (v, dr) = log_gradient_item(r, mk.to_vec(), h, w);
        lgrad += v;
        for j in 0..hw {
            gi[j] += weights.depth_grad * dr[j] * dlog[j];
        }
    }
    if items == 0 {
        return Err(Error::Degenerate("every depth mask is empty".into()));
    }
    if clamped > 0 {
        log::debug!("depth loss clamped {clamped} values at {LOG_CLAMP}");
    }
    if aff_skipped > 0 {
        log::debug!("depth loss skipped the affine term on {aff_skipped} constant item(s)");
    }
    let inv = 1.0 / items as f64;
    grad.data_mut().iter_mut().for_each(|v| *v *= inv);
    let (mse, aff, lgrad) = (mse * inv, aff * inv, lgrad * inv);
    let terms = BTreeMap::from([("mse", mse), ("aff", aff), ("grad", lgrad)]);
    Ok(LossValue {
        value: weights.depth_mse * mse + weights.depth_aff * aff + weights.depth_grad * lgrad,
        grad,
        terms,
        clamped,
    })
}
