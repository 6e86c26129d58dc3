use std::collections::BTreeMap;

use super::{check_mask, check_same, Field, LossValue, LossWeights};
use crate::error::{Error, Result};

/// Norm floor when normalizing predicted normals.
pub const NORMAL_EPS: f64 = 1e-8;
/// Cosines are capped at `1 - ANGLE_CLAMP` before `acos`, and the angular
/// gradient is zero once `|cos| >= 1 - ANGLE_CLAMP`. The lower end is only
/// clipped to the domain, so antipodal normals score exactly π.
pub const ANGLE_CLAMP: f64 = 1e-7;

/// Weighted normal loss: MSE between the normalized prediction and the
/// target plus the mean angular error in radians, both over masked pixels.
pub fn loss_normal(
    pred: &Field,
    gt: &Field,
    mask: &[bool],
    weights: &LossWeights,
) -> Result<LossValue> {
    check_same(pred, gt, "loss_normal")?;
    check_mask(pred, mask)?;
    let [n, c, h, w] = pred.shape();
    if c != 3 {
        return Err(Error::Shape(format!(
            "normal maps have three channels, got {:?}",
            pred.shape()
        )));
    }
    let hw = h * w;
    let mut grad = Field::zeros(pred.shape());
    let (mut mse, mut ang) = (0.0, 0.0);
    let mut guarded = 0usize;
    let mut items = 0usize;
    for i in 0..n {
        let mk = &mask[i * hw..(i + 1) * hw];
        let m = mk.iter().filter(|&&v| v).count();
        if m == 0 {
            continue;
        }
        items += 1;
        let mf = m as f64;
        let (p, g) = (pred.item(i), gt.item(i));
        let gi = grad.item_mut(i);
        for j in 0..hw {
            if !mk[j] {
                continue;
            }
            let pv = [p[j], p[hw + j], p[2 * hw + j]];
            let gv = [g[j], g[hw + j], g[2 * hw + j]];
            let norm = pv.iter().map(|v| v * v).sum::<f64>().sqrt();
            let small = norm <= NORMAL_EPS;
            if small {
                guarded += 1;
            }
            let denom = norm.max(NORMAL_EPS);
            let q = pv.map(|v| v / denom);

            // ∂/∂q of the per-pixel objective.
            let mut dq = [0.0; 3];
            for k in 0..3 {
                let d = q[k] - gv[k];
                mse += d * d / (3.0 * mf);
                dq[k] += weights.normal_mse * 2.0 * d / (3.0 * mf);
            }
            let cos: f64 = (0..3).map(|k| q[k] * gv[k]).sum();
            let lim = 1.0 - ANGLE_CLAMP;
            ang += cos.clamp(-1.0, lim).acos() / mf;
            if cos.abs() < lim {
                let dcos = -weights.normal_ang / ((1.0 - cos * cos).sqrt() * mf);
                for k in 0..3 {
                    dq[k] += dcos * gv[k];
                }
            }

            // q = p / |p|, or p / ε under the guard.
            let dp = if small {
                dq.map(|v| v / NORMAL_EPS)
            } else {
                let qdq: f64 = (0..3).map(|k| q[k] * dq[k]).sum();
                [0, 1, 2].map(|k| (dq[k] - q[k] * qdq) / norm)
            };
            for k in 0..3 {
                gi[k * hw + j] += dp[k];
            }
        }
    }
    if items == 0 {
        return Err(Error::Degenerate("every normal mask is empty".into()));
    }
    let inv = 1.0 / items as f64;
    grad.data_mut().iter_mut().for_each(|v| *v *= inv);
    let (mse, ang) = (mse * inv, ang * inv);
    Ok(LossValue {
        value: weights.normal_mse * mse + weights.normal_ang * ang,
        grad,
        terms: BTreeMap::from([("mse", mse), ("ang", ang)]),
        clamped: guarded,
    })
}
