use super::{Scene, Shape};
use crate::error::{Error, Result};

/// Whether labels are analytic or simulated pseudo labels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Provenance {
    Synthetic,
    Pseudo,
}

/// One rendered image with dense labels. Multi-channel rasters are stored
/// row-major with interleaved channels, `(H, W, C)`.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseSample {
    pub width: usize,
    pub height: usize,
    pub rgb: Vec<f32>,
    /// Camera z of the nearest hit; 0 where nothing is hit.
    pub depth: Vec<f32>,
    /// Unit normals, +z toward the camera; zero where nothing is hit.
    pub normal: Vec<f32>,
    pub matte: Vec<f32>,
    pub mask: Vec<bool>,
    pub provenance: Provenance,
}

impl DenseSample {
    pub fn pixels(&self) -> usize {
        self.width * self.height
    }

    /// Check the per-field lengths and value invariants.
    pub fn validate(&self) -> Result<()> {
        let n = self.pixels();
        let lens = [
            ("rgb", self.rgb.len(), 3 * n),
            ("depth", self.depth.len(), n),
            ("normal", self.normal.len(), 3 * n),
            ("matte", self.matte.len(), n),
            ("mask", self.mask.len(), n),
        ];
        for (name, got, want) in lens {
            if got != want {
                return Err(Error::Shape(format!("{name} has {got} values, expected {want}")));
            }
        }
        for i in 0..n {
            if !(0.0..=1.0).contains(&self.matte[i]) {
                return Err(Error::Range(format!("matte {} at pixel {i}", self.matte[i])));
            }
            if !self.rgb[3 * i..3 * i + 3].iter().all(|v| (0.0..=1.0).contains(v)) {
                return Err(Error::Range(format!("rgb outside [0, 1] at pixel {i}")));
            }
            if !self.mask[i] {
                continue;
            }
            if !(self.depth[i] > 0.0) {
                return Err(Error::Range(format!("depth {} at pixel {i}", self.depth[i])));
            }
            let norm = self.normal[3 * i..3 * i + 3]
                .iter()
                .map(|&v| f64::from(v).powi(2))
                .sum::<f64>()
                .sqrt();
            if (norm - 1.0).abs() > 1e-5 {
                return Err(Error::Range(format!("normal norm {norm} at pixel {i}")));
            }
        }
        Ok(())
    }
}

pub(super) struct Hit {
    pub depth: f64,
    /// Camera-frame (y down, z forward) unit normal facing the ray origin.
    pub normal: [f64; 3],
    pub primitive: usize,
}

const EPS: f64 = 1e-9;

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

/// Ray parameter of the nearest hit with `shape`. Directions have unit z, so
/// the parameter equals the depth gained along the camera axis.
fn intersect(shape: &Shape, o: [f64; 3], d: [f64; 3]) -> Option<(f64, [f64; 3])> {
    match shape {
        Shape::Sphere { center, radius } => {
            let oc = [o[0] - center[0], o[1] - center[1], o[2] - center[2]];
            let a = dot(d, d);
            let b = dot(oc, d);
            let c = dot(oc, oc) - radius * radius;
            let disc = b * b - a * c;
            if disc < 0.0 {
                return None;
            }
            let sq = disc.sqrt();
            let t = [(-b - sq) / a, (-b + sq) / a].into_iter().find(|&t| t > EPS)?;
            let p = [o[0] + t * d[0], o[1] + t * d[1], o[2] + t * d[2]];
            let n = [0, 1, 2].map(|k| (p[k] - center[k]) / radius);
            Some((t, n))
        }
        Shape::Cuboid { min, max } => {
            let (mut t0, mut t1) = (f64::NEG_INFINITY, f64::INFINITY);
            let (mut axis0, mut sign0) = (0, 0.0);
            for k in 0..3 {
                if d[k].abs() < 1e-15 {
                    if o[k] < min[k] || o[k] > max[k] {
                        return None;
                    }
                    continue;
                }
                let (mut a, mut b) = ((min[k] - o[k]) / d[k], (max[k] - o[k]) / d[k]);
                // Entering through the min face means the outward normal is -axis.
                let mut s = -1.0;
                if a > b {
                    std::mem::swap(&mut a, &mut b);
                    s = 1.0;
                }
                if a > t0 {
                    t0 = a;
                    axis0 = k;
                    sign0 = s;
                }
                t1 = t1.min(b);
            }
            if t0 > t1 || t0 <= EPS {
                return None;
            }
            let mut n = [0.0; 3];
            n[axis0] = sign0;
            Some((t0, n))
        }
        Shape::Ground { height } => {
            if d[1] <= 0.0 {
                return None;
            }
            let t = (height - o[1]) / d[1];
            (t > EPS).then_some((t, [0.0, -1.0, 0.0]))
        }
    }
}

impl Scene {
    pub(super) fn focal_for_width(&self, width: usize) -> f64 {
        self.camera.focal_px * width as f64 / self.camera.nominal_width as f64
    }

    /// Nearest hit along the ray through image point `(u, v)` (pixel units).
    pub(super) fn trace(&self, u: f64, v: f64, size: (usize, usize)) -> Option<Hit> {
        let (h, w) = size;
        let f = self.focal_for_width(w);
        let d = [(u - 0.5 * w as f64) / f, (v - 0.5 * h as f64) / f, 1.0];
        let o = self.camera.position;
        let mut best: Option<Hit> = None;
        for (i, p) in self.primitives.iter().enumerate() {
            let Some((t, n)) = intersect(&p.shape, o, d) else {
                continue;
            };
            if matches!(p.shape, Shape::Ground { .. }) && t > self.camera.far {
                continue;
            }
            if best.as_ref().is_none_or(|b| t < b.depth) {
                best = Some(Hit {
                    depth: t,
                    normal: n,
                    primitive: i,
                });
            }
        }
        best
    }

    fn shade(&self, hit: Option<&Hit>, v: f64, height: usize) -> [f64; 3] {
        match hit {
            Some(hit) => {
                let p = &self.primitives[hit.primitive];
                let lambert = dot(hit.normal, self.light.direction).max(0.0);
                let amb = self.light.ambient;
                p.albedo.map(|a| (a * (amb + (1.0 - amb) * lambert)).clamp(0.0, 1.0))
            }
            None => {
                // Sky gradient, lighter toward the horizon.
                let s = (v / height as f64).clamp(0.0, 1.0);
                [0.45 + 0.3 * s, 0.6 + 0.25 * s, 0.85 + 0.1 * s]
            }
        }
    }
}

/// Ray-cast a scene. Depth, normal and mask come from the pixel-centre ray;
/// RGB and matte average an `ss × ss` grid of sub-pixel rays.
pub fn render_scene(scene: &Scene, size: (usize, usize), ss: usize) -> Result<DenseSample> {
    let (h, w) = size;
    if h < 16 || w < 16 {
        return Err(Error::Config(format!("render size {h}x{w} is below 16x16")));
    }
    if !matches!(ss, 1 | 2 | 4) {
        return Err(Error::Config(format!("supersample factor {ss} not in {{1, 2, 4}}")));
    }
    scene.validate()?;
    let n = h * w;
    let mut out = DenseSample {
        width: w,
        height: h,
        rgb: vec![0.0; 3 * n],
        depth: vec![0.0; n],
        normal: vec![0.0; 3 * n],
        matte: vec![0.0; n],
        mask: vec![false; n],
        provenance: Provenance::Synthetic,
    };
    let inv = 1.0 / (ss * ss) as f64;
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let (uc, vc) = (x as f64 + 0.5, y as f64 + 0.5);
            if let Some(hit) = scene.trace(uc, vc, size) {
                out.mask[i] = true;
                out.depth[i] = hit.depth as f32;
                let n = [hit.normal[0], -hit.normal[1], -hit.normal[2]];
                for k in 0..3 {
                    out.normal[3 * i + k] = n[k] as f32;
                }
            }
            let mut rgb = [0.0; 3];
            let mut cover = 0usize;
            for sy in 0..ss {
                for sx in 0..ss {
                    let u = x as f64 + (sx as f64 + 0.5) / ss as f64;
                    let v = y as f64 + (sy as f64 + 0.5) / ss as f64;
                    let hit = scene.trace(u, v, size);
                    if hit.as_ref().is_some_and(|h| scene.primitives[h.primitive].is_foreground()) {
                        cover += 1;
                    }
                    let c = scene.shade(hit.as_ref(), v, h);
                    for k in 0..3 {
                        rgb[k] += c[k];
                    }
                }
            }
            for k in 0..3 {
                out.rgb[3 * i + k] = ((rgb[k] * inv) as f32).clamp(0.0, 1.0);
            }
            out.matte[i] = (cover as f64 * inv) as f32;
        }
    }
    Ok(out)
}
