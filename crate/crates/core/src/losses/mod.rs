//! Alignment and task losses.
//!
//! Everything here is evaluated in `f64` on [`Field`]s and returns the value
//! together with its analytic gradient with respect to the prediction, so the
//! trainer can seed back-propagation directly. Batched inputs are reduced per
//! item first and then averaged over items.

mod align;
mod depth;
mod matting;
mod normal;

#[cfg(test)]
mod tests;

use std::collections::BTreeMap;

pub use align::{dist_negcos, dist_negcos_grad, loss_agg, AggLoss, COSINE_EPS};
pub use depth::{loss_depth, ssi_normalize, GRADIENT_SCALES, LOG_CLAMP};
pub use matting::loss_matting;
pub use normal::{loss_normal, ANGLE_CLAMP, NORMAL_EPS};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Dense `f64` map in NCHW layout.
#[derive(Clone, Debug, PartialEq)]
pub struct Field {
    shape: [usize; 4],
    data: Vec<f64>,
}

impl Field {
    pub fn new(shape: [usize; 4], data: Vec<f64>) -> Result<Self> {
        let len: usize = shape.iter().product();
        if data.len() != len {
            return Err(Error::Shape(format!(
                "{} values for shape {shape:?}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: [usize; 4]) -> Self {
        Self {
            shape,
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn from_tensor(t: &Tensor) -> Self {
        Self {
            shape: t.shape(),
            data: t.data().iter().map(|&v| f64::from(v)).collect(),
        }
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec(self.shape, self.data.iter().map(|&v| v as f32).collect())
            .expect("field shape matches data")
    }

    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    fn item_len(&self) -> usize {
        self.shape[1] * self.shape[2] * self.shape[3]
    }

    fn item(&self, i: usize) -> &[f64] {
        let n = self.item_len();
        &self.data[i * n..(i + 1) * n]
    }

    fn item_mut(&mut self, i: usize) -> &mut [f64] {
        let n = self.item_len();
        &mut self.data[i * n..(i + 1) * n]
    }
}

/// Loss weights for the joint objective and the three task losses.
#[derive(Clone, Debug, PartialEq)]
pub struct LossWeights {
    /// Balance between alignment and task terms.
    pub lambda: f64,
    pub depth_mse: f64,
    pub depth_aff: f64,
    pub depth_grad: f64,
    pub normal_mse: f64,
    pub normal_ang: f64,
    pub matting_mse: f64,
    pub matting_l1: f64,
    pub matting_grad: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            depth_mse: 8.0,
            depth_aff: 2.0,
            depth_grad: 100.0,
            normal_mse: 8.0,
            normal_ang: 3.0,
            matting_mse: 5.0,
            matting_l1: 10.0,
            matting_grad: 50.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            ("lambda", self.lambda),
            ("depth_mse", self.depth_mse),
            ("depth_aff", self.depth_aff),
            ("depth_grad", self.depth_grad),
            ("normal_mse", self.normal_mse),
            ("normal_ang", self.normal_ang),
            ("matting_mse", self.matting_mse),
            ("matting_l1", self.matting_l1),
            ("matting_grad", self.matting_grad),
        ];
        for (name, v) in all {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Config(format!("loss weight {name} must be > 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// A weighted loss value, its gradient with respect to the prediction and
/// the unweighted components.
#[derive(Clone, Debug)]
pub struct LossValue {
    pub value: f64,
    pub grad: Field,
    pub terms: BTreeMap<&'static str, f64>,
    /// Pixels whose value had to be clamped or ε-guarded.
    pub clamped: usize,
}

/// Joint objective split into its parts.
#[derive(Clone, Debug, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub agg: f64,
    pub task: f64,
    pub terms: BTreeMap<String, f64>,
}

impl LossBreakdown {
    pub fn new(agg: f64, task: f64, lambda: f64, terms: BTreeMap<String, f64>) -> Result<Self> {
        Ok(Self {
            total: loss_total(agg, task, lambda)?,
            agg,
            task,
            terms,
        })
    }

    /// Relative error of `total` against `agg + lambda * task`.
    pub fn decomposition_error(&self, lambda: f64) -> f64 {
        let expect = self.agg + lambda * self.task;
        (self.total - expect).abs() / expect.abs().max(f64::MIN_POSITIVE)
    }
}

pub fn loss_total(agg: f64, task: f64, lambda: f64) -> Result<f64> {
    if !(lambda.is_finite() && lambda > 0.0) {
        return Err(Error::Config(format!("lambda must be > 0, got {lambda}")));
    }
    Ok(agg + lambda * task)
}

fn check_same(a: &Field, b: &Field, what: &str) -> Result<()> {
    if a.shape != b.shape {
        return Err(Error::Shape(format!(
            "{what}: {:?} vs {:?}",
            a.shape, b.shape
        )));
    }
    Ok(())
}

fn check_mask(field: &Field, mask: &[bool]) -> Result<()> {
    let [n, _, h, w] = field.shape;
    if mask.len() != n * h * w {
        return Err(Error::Shape(format!(
            "mask has {} entries, expected {}",
            mask.len(),
            n * h * w
        )));
    }
    Ok(())
}

#[inline]
fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Sum of `|∂ₓ d|` over horizontal pairs and of `|∂ᵧ d|` over vertical pairs
/// whose endpoints are both valid, each divided by its pair count. Adds the
/// gradient, scaled by `weight`, into `grad`. Returns the value.
fn gradient_l1(
    d: &[f64],
    valid: &[bool],
    h: usize,
    w: usize,
    weight: f64,
    grad: &mut [f64],
) -> f64 {
    let mut pairs_x = 0usize;
    let mut pairs_y = 0usize;
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if x + 1 < w && valid[i] && valid[i + 1] {
                pairs_x += 1;
            }
            if y + 1 < h && valid[i] && valid[i + w] {
                pairs_y += 1;
            }
        }
    }
    let mut value = 0.0;
    for (pairs, step) in [(pairs_x, 1usize), (pairs_y, w)] {
        if pairs == 0 {
            continue;
        }
        let scale = 1.0 / pairs as f64;
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                let in_range = if step == 1 { x + 1 < w } else { y + 1 < h };
                if !in_range || !valid[i] || !valid[i + step] {
                    continue;
                }
                let diff = d[i + step] - d[i];
                value += diff.abs() * scale;
                let s = sign(diff) * scale * weight;
                grad[i + step] += s;
                grad[i] -= s;
            }
        }
    }
    value
}

/// Largest elementwise relative error between `analytic` and central
/// differences of `f` at `x`, with `|·|` floored at `1e-6` in the denominator.
pub fn max_gradient_error(f: impl Fn(&[f64]) -> f64, x: &[f64], analytic: &[f64], step: f64) -> f64 {
    let mut probe = x.to_vec();
    let mut worst = 0.0f64;
    for j in 0..x.len() {
        probe[j] = x[j] + step;
        let plus = f(&probe);
        probe[j] = x[j] - step;
        let minus = f(&probe);
        probe[j] = x[j];
        let fd = (plus - minus) / (2.0 * step);
        let err = (fd - analytic[j]).abs() / fd.abs().max(analytic[j].abs()).max(1e-6);
        worst = worst.max(err);
    }
    worst
}
