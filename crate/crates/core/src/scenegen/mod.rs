//! Procedural ray-cast scenes with analytic dense labels.
//!
//! Scenes live in camera coordinates with x right, y down and z forward, so
//! depth is the z coordinate of the hit point. Output normals are flipped to
//! the "+z toward the camera" convention: a surface facing the viewer has a
//! positive z component.

mod pseudo;
mod raster;
mod render;


use rand::Rng;

pub use pseudo::{make_pseudo_labeled, PseudoNoise};
pub use raster::{
    decode_sample, encode_sample, read_raster, read_sample, write_png_rgb, write_raster,
    write_sample, Raster, RasterTag,
    RASTER_MAGIC,
};
pub use render::{render_scene, DenseSample, Provenance};

use crate::error::{Error, Result};

pub const MAX_PRIMITIVES: usize = 8;
const REJECTION_ATTEMPTS: usize = 1000;
/// Closest allowed distance between the camera plane and any object.
const NEAR: f64 = 0.5;

#[derive(Clone, Debug, PartialEq)]
pub enum Shape {
    Sphere { center: [f64; 3], radius: f64 },
    /// Axis-aligned box between two corners.
    Cuboid { min: [f64; 3], max: [f64; 3] },
    /// Horizontal ground plane `y = height` (below the camera when positive).
    Ground { height: f64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Primitive {
    pub shape: Shape,
    pub albedo: [f64; 3],
}

impl Primitive {
    /// Foreground primitives contribute to the alpha matte.
    pub fn is_foreground(&self) -> bool {
        !matches!(self.shape, Shape::Ground { .. })
    }
}

/// Pinhole camera at `position` looking down +z.
#[derive(Clone, Debug, PartialEq)]
pub struct Camera {
    pub position: [f64; 3],
    /// Focal length in pixels for an image `nominal_width` pixels wide; other
    /// widths scale it so the field of view is unchanged.
    pub focal_px: f64,
    pub nominal_width: usize,
    /// Ground-plane hits beyond this depth count as sky.
    pub far: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Light {
    /// Unit vector from surfaces toward the light.
    pub direction: [f64; 3],
    pub ambient: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub primitives: Vec<Primitive>,
    pub camera: Camera,
    pub light: Light,
}

impl Scene {
    /// Check that every object lies in front of the camera and the light is unit.
    pub fn validate(&self) -> Result<()> {
        let cz = self.camera.position[2];
        for p in &self.primitives {
            let ok = match &p.shape {
                Shape::Sphere { center, radius } => *radius > 0.0 && center[2] - radius - cz > 0.0,
                Shape::Cuboid { min, max } => {
                    (0..3).all(|k| min[k] < max[k]) && min[2] - cz > 0.0
                }
                Shape::Ground { height } => *height > self.camera.position[1],
            };
            if !ok {
                return Err(Error::Generation(format!(
                    "primitive {:?} is not in front of the camera",
                    p.shape
                )));
            }
        }
        let n = self.light.direction.iter().map(|v| v * v).sum::<f64>().sqrt();
        if (n - 1.0).abs() > 1e-9 {
            return Err(Error::Generation(format!("light direction has norm {n}")));
        }
        if !(0.0..=1.0).contains(&self.light.ambient) {
            return Err(Error::Generation(format!(
                "ambient fraction {} outside [0, 1]",
                self.light.ambient
            )));
        }
        Ok(())
    }

    pub fn foreground_count(&self) -> usize {
        self.primitives.iter().filter(|p| p.is_foreground()).count()
    }
}

/// Bounds for [`random_scene`].
#[derive(Clone, Debug, PartialEq)]
pub struct SceneConfig {
    pub min_primitives: usize,
    pub max_primitives: usize,
    pub radius_range: (f64, f64),
    pub depth_range: (f64, f64),
    pub ground_height_range: (f64, f64),
    pub ambient_range: (f64, f64),
    pub box_probability: f64,
    pub focal_px: f64,
    pub nominal_width: usize,
    pub far: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            min_primitives: 1,
            max_primitives: MAX_PRIMITIVES,
            radius_range: (0.3, 1.2),
            depth_range: (3.0, 12.0),
            ground_height_range: (1.0, 2.0),
            ambient_range: (0.15, 0.35),
            box_probability: 0.4,
            focal_px: 60.0,
            nominal_width: 64,
            far: 30.0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let range_ok = |(lo, hi): (f64, f64)| lo.is_finite() && hi.is_finite() && lo <= hi;
        if self.min_primitives < 1
            || self.max_primitives > MAX_PRIMITIVES
            || self.min_primitives > self.max_primitives
        {
            return Err(Error::Config(format!(
                "primitive count range {}..={} must lie within 1..={MAX_PRIMITIVES}",
                self.min_primitives, self.max_primitives
            )));
        }
        for (name, r) in [
            ("radius_range", self.radius_range),
            ("depth_range", self.depth_range),
            ("ground_height_range", self.ground_height_range),
            ("ambient_range", self.ambient_range),
        ] {
            if !range_ok(r) || r.0 < 0.0 {
                return Err(Error::Config(format!("{name} {r:?} is not a valid range")));
            }
        }
        if self.radius_range.0 <= 0.0 || self.ground_height_range.0 <= 0.0 {
            return Err(Error::Config("radii and ground height must be positive".into()));
        }
        if self.ambient_range.1 > 1.0 || !(0.0..=1.0).contains(&self.box_probability) {
            return Err(Error::Config("ambient and box probability must lie in [0, 1]".into()));
        }
        if !(self.focal_px > 0.0) || self.nominal_width == 0 || !(self.far > self.depth_range.1) {
            return Err(Error::Config(
                "focal length, nominal width and far distance must be positive, far beyond the depth range".into(),
            ));
        }
        Ok(())
    }
}

fn uniform(rng: &mut impl Rng, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.gen_range(lo..hi)
    }
}

fn random_albedo(rng: &mut impl Rng) -> [f64; 3] {
    [0; 3].map(|_| rng.gen_range(0.15..0.95))
}

/// Place one foreground object inside the view frustum, resting above the ground.
fn random_object(rng: &mut impl Rng, cfg: &SceneConfig, ground: f64) -> Option<Primitive> {
    let z = uniform(rng, cfg.depth_range);
    let half_extent = 0.5 * cfg.nominal_width as f64 * z / cfg.focal_px;
    let x = rng.gen_range(-0.8..0.8) * half_extent;
    let size = uniform(rng, cfg.radius_range);
    let lift = rng.gen_range(0.0..1.5);
    let shape = if rng.gen_bool(cfg.box_probability) {
        let half = [size, size * rng.gen_range(0.6..1.4), size * rng.gen_range(0.6..1.4)];
        let cy = ground - half[1] - lift;
        Shape::Cuboid {
            min: [x - half[0], cy - half[1], z - half[2]],
            max: [x + half[0], cy + half[1], z + half[2]],
        }
    } else {
        Shape::Sphere {
            center: [x, ground - size - lift, z],
            radius: size,
        }
    };
    let in_front = match &shape {
        Shape::Sphere { center, radius } => center[2] - radius > NEAR,
        Shape::Cuboid { min, .. } => min[2] > NEAR,
        Shape::Ground { .. } => true,
    };
    in_front.then(|| Primitive {
        shape,
        albedo: random_albedo(rng),
    })
}

/// Draw a scene: a ground plane plus `min..=max` foreground primitives.
pub fn random_scene(rng: &mut impl Rng, cfg: &SceneConfig) -> Result<Scene> {
    cfg.validate()?;
    let ground = uniform(rng, cfg.ground_height_range);
    let count = rng.gen_range(cfg.min_primitives..=cfg.max_primitives);
    let mut primitives = vec![Primitive {
        shape: Shape::Ground { height: ground },
        albedo: random_albedo(rng),
    }];
    for _ in 0..count {
        let obj = (0..REJECTION_ATTEMPTS)
            .find_map(|_| random_object(rng, cfg, ground))
            .ok_or_else(|| {
                Error::Generation(format!(
                    "no valid placement after {REJECTION_ATTEMPTS} attempts; check radius and depth ranges"
                ))
            })?;
        primitives.push(obj);
    }
    let raw = [
        rng.gen_range(-0.6..0.6),
        rng.gen_range(-1.0..-0.4),
        rng.gen_range(-1.0..-0.2),
    ];
    let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
    let scene = Scene {
        primitives,
        camera: Camera {
            position: [0.0; 3],
            focal_px: cfg.focal_px,
            nominal_width: cfg.nominal_width,
            far: cfg.far,
        },
        light: Light {
            direction: raw.map(|v| v / norm),
            ambient: uniform(rng, cfg.ambient_range),
        },
    };
    scene.validate()?;
    Ok(scene)
}
