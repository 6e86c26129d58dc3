use std::collections::VecDeque;

use crate::error::{Error, Result};

/// δ1 ratio threshold.
pub const DELTA1_THRESHOLD: f64 = 1.25;
/// Angular accuracy threshold in degrees.
pub const ANGLE_THRESHOLD_DEG: f64 = 11.25;
/// Divisor applied to SAD and Conn.
pub const MATTING_SCALE: f64 = 1000.0;
/// Level-set spacing of the connectivity error.
pub const CONN_STEP: f64 = 0.1;
/// Floor applied to predicted depth before taking ratios.
pub const DEPTH_FLOOR: f64 = 1e-6;
const NORM_EPS: f64 = 1e-8;
/// Distances below this do not count as disconnected in Conn.
const CONN_TOLERANCE: f64 = 0.15;

fn check_lengths(pred: usize, gt: usize, mask: usize) -> Result<()> {
    if pred != gt || pred != mask {
        return Err(Error::Shape(format!(
            "prediction {pred}, target {gt} and mask {mask} lengths differ"
        )));
    }
    Ok(())
}

/// Least-squares `(a, b)` minimising `Σ_mask (a·pred + b − gt)²`.
pub fn align_affine(pred: &[f64], gt: &[f64], mask: &[bool]) -> Result<(f64, f64)> {
    check_lengths(pred.len(), gt.len(), mask.len())?;
    let idx: Vec<usize> = (0..pred.len()).filter(|&i| mask[i]).collect();
    if idx.len() < 2 {
        return Err(Error::Degenerate(format!(
            "affine alignment needs at least 2 masked pixels, got {}",
            idx.len()
        )));
    }
    let m = idx.len() as f64;
    let mp = idx.iter().map(|&i| pred[i]).sum::<f64>() / m;
    let mg = idx.iter().map(|&i| gt[i]).sum::<f64>() / m;
    let (mut spp, mut spg) = (0.0, 0.0);
    for &i in &idx {
        let dp = pred[i] - mp;
        spp += dp * dp;
        spg += dp * (gt[i] - mg);
    }
    if !(spp > 1e-12 * m * (1.0 + mp * mp)) {
        return Err(Error::Degenerate(
            "prediction is constant over the mask; affine fit is undefined".into(),
        ));
    }
    let a = spg / spp;
    Ok((a, mg - a * mp))
}

/// Masked depth pairs after optional alignment; checks `gt > 0` on the mask.
fn depth_pairs(pred: &[f64], gt: &[f64], mask: &[bool], align: bool) -> Result<Vec<(f64, f64)>> {
    check_lengths(pred.len(), gt.len(), mask.len())?;
    if let Some(i) = (0..gt.len()).find(|&i| mask[i] && !(gt[i] > 0.0)) {
        return Err(Error::Input(format!("ground-truth depth {} at pixel {i} is not positive", gt[i])));
    }
    let (a, b) = if align {
        align_affine(pred, gt, mask)?
    } else {
        (1.0, 0.0)
    };
    let pairs: Vec<(f64, f64)> = (0..pred.len())
        .filter(|&i| mask[i])
        .map(|i| (a * pred[i] + b, gt[i]))
        .collect();
    if pairs.is_empty() {
        return Err(Error::Input("depth mask is empty".into()));
    }
    Ok(pairs)
}

/// Mean of `|p − g| / g` over the mask, after optional affine alignment.
pub fn metric_absrel(pred: &[f64], gt: &[f64], mask: &[bool], align: bool) -> Result<f64> {
    let pairs = depth_pairs(pred, gt, mask, align)?;
    Ok(pairs.iter().map(|(p, g)| (p - g).abs() / g).sum::<f64>() / pairs.len() as f64)
}

/// Fraction of masked pixels with `max(p/g, g/p) < 1.25`, `p` floored at 1e-6.
pub fn metric_delta1(pred: &[f64], gt: &[f64], mask: &[bool], align: bool) -> Result<f64> {
    let pairs = depth_pairs(pred, gt, mask, align)?;
    let hits = pairs
        .iter()
        .filter(|(p, g)| {
            let p = p.max(DEPTH_FLOOR);
            (p / g).max(g / p) < DELTA1_THRESHOLD
        })
        .count();
    Ok(hits as f64 / pairs.len() as f64)
}

/// Mean angular error in degrees and the fraction of pixels below 11.25°.
/// Predictions shorter than 1e-8 fall back to the ε-guarded cosine.
pub fn metric_normal(pred: &[[f64; 3]], gt: &[[f64; 3]], mask: &[bool]) -> Result<(f64, f64)> {
    check_lengths(pred.len(), gt.len(), mask.len())?;
    let mut total = 0.0;
    let (mut count, mut below) = (0usize, 0usize);
    for i in (0..pred.len()).filter(|&i| mask[i]) {
        let (p, g) = (pred[i], gt[i]);
        let norm = p.iter().map(|v| v * v).sum::<f64>().sqrt();
        let dot: f64 = (0..3).map(|k| p[k] * g[k]).sum();
        let rad = if norm >= NORM_EPS {
            // atan2 stays accurate for nearly parallel vectors, where acos does not.
            let cross = [
                p[1] * g[2] - p[2] * g[1],
                p[2] * g[0] - p[0] * g[2],
                p[0] * g[1] - p[1] * g[0],
            ];
            cross.iter().map(|v| v * v).sum::<f64>().sqrt().atan2(dot)
        } else {
            (dot / NORM_EPS).clamp(-1.0, 1.0).acos()
        };
        let deg = rad.to_degrees();
        total += deg;
        count += 1;
        if deg < ANGLE_THRESHOLD_DEG {
            below += 1;
        }
    }
    if count == 0 {
        return Err(Error::Input("normal mask is empty".into()));
    }
    Ok((total / count as f64, below as f64 / count as f64))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MattingMetrics {
    pub sad: f64,
    pub mad: f64,
    pub mse: f64,
    pub conn: f64,
}

/// SAD and Conn divided by [`MATTING_SCALE`]; MAD and MSE are per-pixel means.
pub fn metric_matting(pred: &[f64], gt: &[f64], height: usize, width: usize) -> Result<MattingMetrics> {
    let n = height * width;
    if pred.len() != n || gt.len() != n || n == 0 {
        return Err(Error::Shape(format!(
            "matte lengths {} and {} for a {height}x{width} image",
            pred.len(),
            gt.len()
        )));
    }
    for (what, v) in [("prediction", pred), ("target", gt)] {
        if let Some(x) = v.iter().find(|x| !(0.0..=1.0).contains(*x)) {
            return Err(Error::Input(format!("matte {what} value {x} outside [0, 1]")));
        }
    }
    let sum_abs: f64 = pred.iter().zip(gt).map(|(p, g)| (p - g).abs()).sum();
    let sum_sq: f64 = pred.iter().zip(gt).map(|(p, g)| (p - g).powi(2)).sum();
    Ok(MattingMetrics {
        sad: sum_abs / MATTING_SCALE,
        mad: sum_abs / n as f64,
        mse: sum_sq / n as f64,
        conn: connectivity_error(pred, gt, height, width) / MATTING_SCALE,
    })
}

/// Largest 4-connected component of `bin`; ties keep the first in raster order.
fn largest_component(bin: &[bool], h: usize, w: usize) -> Vec<bool> {
    let mut label = vec![usize::MAX; bin.len()];
    let (mut best, mut best_size) = (usize::MAX, 0usize);
    let mut queue = VecDeque::new();
    let mut next = 0usize;
    for start in 0..bin.len() {
        if !bin[start] || label[start] != usize::MAX {
            continue;
        }
        label[start] = next;
        queue.push_back(start);
        let mut size = 0;
        while let Some(i) = queue.pop_front() {
            size += 1;
            let (y, x) = (i / w, i % w);
            let mut visit = |j: usize| {
                if bin[j] && label[j] == usize::MAX {
                    label[j] = next;
                    queue.push_back(j);
                }
            };
            if x > 0 {
                visit(i - 1);
            }
            if x + 1 < w {
                visit(i + 1);
            }
            if y > 0 {
                visit(i - w);
            }
            if y + 1 < h {
                visit(i + w);
            }
        }
        if size > best_size {
            (best, best_size) = (next, size);
        }
        next += 1;
    }
    label.iter().map(|&l| l == best && best != usize::MAX).collect()
}

/// Unscaled connectivity error over level sets `θ = 0.1, …, 1.0`.
///
/// Each pixel gets the last level at which it still belonged to the largest
/// 4-connected component of `pred ≥ θ ∧ gt ≥ θ` (1 if it never left), and
/// the error sums `|φ(pred) − φ(gt)|` with `φ(x) = 1 − d·[d ≥ 0.15]`,
/// `d = x − level`.
pub fn connectivity_error(pred: &[f64], gt: &[f64], h: usize, w: usize) -> f64 {
    let levels = (1.0 / CONN_STEP).round() as usize;
    let mut l = vec![-1.0f64; pred.len()];
    // Dividing keeps levels such as 0.3 exact, which i * 0.1 does not.
    for i in 1..=levels {
        let theta = i as f64 / levels as f64;
        let both: Vec<bool> = pred.iter().zip(gt).map(|(&p, &g)| p >= theta && g >= theta).collect();
        let omega = largest_component(&both, h, w);
        let prev = (i - 1) as f64 / levels as f64;
        for j in 0..l.len() {
            if l[j] == -1.0 && !omega[j] {
                l[j] = prev;
            }
        }
    }
    let phi = |x: f64, level: f64| {
        let d = x - level;
        1.0 - if d >= CONN_TOLERANCE { d } else { 0.0 }
    };
    (0..pred.len())
        .map(|j| {
            let level = if l[j] == -1.0 { 1.0 } else { l[j] };
            (phi(pred[j], level) - phi(gt[j], level)).abs()
        })
        .sum()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BinaryMetrics {
    pub iou: f64,
    pub pa: f64,
    pub dice: f64,
}

/// IoU, pixel accuracy and Dice of `pred ≥ threshold` against `gt ≥ 0.5`.
/// IoU and Dice are 1 when both masks are empty.
pub fn metric_binary(pred: &[f64], gt: &[f64], threshold: f64) -> Result<BinaryMetrics> {
    if pred.len() != gt.len() || pred.is_empty() {
        return Err(Error::Shape(format!(
            "binary maps have {} and {} pixels",
            pred.len(),
            gt.len()
        )));
    }
    let (mut inter, mut a, mut b, mut agree) = (0usize, 0usize, 0usize, 0usize);
    for (&p, &g) in pred.iter().zip(gt) {
        let (p, g) = (p >= threshold, g >= 0.5);
        inter += usize::from(p && g);
        a += usize::from(p);
        b += usize::from(g);
        agree += usize::from(p == g);
    }
    let union = a + b - inter;
    let ratio = |num: usize, den: usize| if den == 0 { 1.0 } else { num as f64 / den as f64 };
    Ok(BinaryMetrics {
        iou: ratio(inter, union),
        pa: agree as f64 / pred.len() as f64,
        dice: ratio(2 * inter, a + b),
    })
}
