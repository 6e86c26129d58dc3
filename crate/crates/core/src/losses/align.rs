use super::{check_same, Field};
use crate::error::{Error, Result};
use crate::networks::{TapBundle, TapSource};

/// Guard on the product of norms in the cosine denominator.
pub const COSINE_EPS: f64 = 1e-8;

/// Negative cosine similarity over channels, averaged over batch and space.
pub fn dist_negcos(a: &Field, b: &Field) -> Result<f64> {
    Ok(dist_negcos_grad(a, b)?.0)
}

/// [`dist_negcos`] with its gradients with respect to `a` and `b`.
pub fn dist_negcos_grad(a: &Field, b: &Field) -> Result<(f64, Field, Field)> {
    check_same(a, b, "dist_negcos")?;
    let [n, c, h, w] = a.shape();
    let hw = h * w;
    let locations = (n * hw) as f64;
    let mut ga = Field::zeros(a.shape());
    let mut gb = Field::zeros(a.shape());
    let mut total = 0.0;
    for i in 0..n {
        let (ai, bi) = (a.item(i), b.item(i));
        for p in 0..hw {
            let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
            for ch in 0..c {
                let (x, y) = (ai[ch * hw + p], bi[ch * hw + p]);
                dot += x * y;
                na += x * x;
                nb += y * y;
            }
            let (na, nb) = (na.sqrt(), nb.sqrt());
            let denom = na * nb;
            let guarded = denom <= COSINE_EPS;
            let cos = dot / denom.max(COSINE_EPS);
            total -= cos;
            let scale = -1.0 / locations;
            let (gai, gbi) = (ga.item_mut(i), gb.item_mut(i));
            for ch in 0..c {
                let (x, y) = (ai[ch * hw + p], bi[ch * hw + p]);
                let (dx, dy) = if guarded {
                    (y / COSINE_EPS, x / COSINE_EPS)
                } else {
                    (
                        y / denom - cos * x / (na * na),
                        x / denom - cos * y / (nb * nb),
                    )
                };
                gai[ch * hw + p] = scale * dx;
                gbi[ch * hw + p] = scale * dy;
            }
        }
    }
    Ok((total / locations, ga, gb))
}

/// Alignment loss and its gradient with respect to each projected tap.
#[derive(Clone, Debug)]
pub struct AggLoss {
    pub value: f64,
    pub per_tap: Vec<(usize, f64)>,
    pub grads: Vec<(usize, Field)>,
}

/// Sum over taps of [`dist_negcos`] between projected student features and
/// teacher features sharing the same per-item timesteps.
pub fn loss_agg(projected: &TapBundle, teacher: &TapBundle) -> Result<AggLoss> {
    let (TapSource::Projected { timesteps: tp }, TapSource::Teacher { timesteps: tt }) =
        (&projected.source, &teacher.source)
    else {
        return Err(Error::Usage(format!(
            "loss_agg needs projected and teacher bundles, got {:?} and {:?}",
            projected.source, teacher.source
        )));
    };
    if tp != tt {
        return Err(Error::Usage(
            "projected and teacher bundles carry different timesteps".into(),
        ));
    }
    if projected.shapes() != teacher.shapes() || projected.is_empty() {
        return Err(Error::Usage(format!(
            "tap bundles do not match: {:?} vs {:?}",
            projected.shapes(),
            teacher.shapes()
        )));
    }
    let mut value = 0.0;
    let mut per_tap = Vec::with_capacity(projected.len());
    let mut grads = Vec::with_capacity(projected.len());
    for ((k, p), (_, t)) in projected.taps.iter().zip(&teacher.taps) {
        let (d, g, _) = dist_negcos_grad(&Field::from_tensor(p), &Field::from_tensor(t))?;
        value += d;
        per_tap.push((*k, d));
        grads.push((*k, g));
    }
    Ok(AggLoss {
        value,
        per_tap,
        grads,
    })
}
