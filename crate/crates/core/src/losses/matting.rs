use std::collections::BTreeMap;

use super::{check_same, gradient_l1, sign, Field, LossValue, LossWeights};
use crate::error::{Error, Result};

/// Weighted matting loss: MSE, L1 and first-difference L1 of `pred − gt`,
/// all over every pixel at the input resolution.
pub fn loss_matting(pred: &Field, gt: &Field, weights: &LossWeights) -> Result<LossValue> {
    check_same(pred, gt, "loss_matting")?;
    let [n, c, h, w] = pred.shape();
    if c != 1 {
        return Err(Error::Shape(format!(
            "mattes have one channel, got {:?}",
            pred.shape()
        )));
    }
    for (what, f) in [("prediction", pred), ("target", gt)] {
        if let Some(v) = f.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Range(format!("matte {what} value {v} outside [0, 1]")));
        }
    }
    let hw = h * w;
    let m = hw as f64;
    let valid = vec![true; hw];
    let mut grad = Field::zeros(pred.shape());
    let (mut mse, mut l1, mut lgrad) = (0.0, 0.0, 0.0);
    for i in 0..n {
        let (p, g) = (pred.item(i), gt.item(i));
        let gi = grad.item_mut(i);
        let diff: Vec<f64> = p.iter().zip(g).map(|(a, b)| a - b).collect();
        for (j, &d) in diff.iter().enumerate() {
            mse += d * d / m;
            l1 += d.abs() / m;
            gi[j] += weights.matting_mse * 2.0 * d / m + weights.matting_l1 * sign(d) / m;
        }
        lgrad += gradient_l1(&diff, &valid, h, w, weights.matting_grad, gi);
    }
    let inv = 1.0 / n.max(1) as f64;
    grad.data_mut().iter_mut().for_each(|v| *v *= inv);
    let (mse, l1, lgrad) = (mse * inv, l1 * inv, lgrad * inv);
    Ok(LossValue {
        value: weights.matting_mse * mse + weights.matting_l1 * l1 + weights.matting_grad * lgrad,
        grad,
        terms: BTreeMap::from([("mse", mse), ("l1", l1), ("grad", lgrad)]),
        clamped: 0,
    })
}
