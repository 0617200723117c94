use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{Point3, Rotation3, Unit, Vector3};
use rand::Rng;

use crate::error::{Error, Result};
use crate::geometry::{Aabb, RectifiedRig};

#[derive(Debug, Clone, PartialEq)]
pub enum Primitive {
    Sphere {
        center: Point3<f64>,
        radius: f64,
    },
    Capsule {
        a: Point3<f64>,
        b: Point3<f64>,
        radius: f64,
    },
    /// Oriented box; `rotation` maps box axes into camera space.
    Box {
        center: Point3<f64>,
        half: Vector3<f64>,
        rotation: Rotation3<f64>,
    },
}

impl Primitive {
    pub fn sdf(&self, p: &Point3<f64>) -> f64 {
        match self {
            Primitive::Sphere { center, radius } => (p - center).norm() - radius,
            Primitive::Capsule { a, b, radius } => {
                let pa = p - a;
                let ba = b - a;
                let len2 = ba.norm_squared();
                let h = if len2 > 0.0 {
                    (pa.dot(&ba) / len2).clamp(0.0, 1.0)
                } else {
                    0.0
                };
                (pa - ba * h).norm() - radius
            }
            Primitive::Box {
                center,
                half,
                rotation,
            } => {
                let q = rotation.inverse_transform_vector(&(p - center));
                let d = q.abs() - half;
                let outside = d.map(|v| v.max(0.0)).norm();
                outside + d.max().min(0.0)
            }
        }
    }

    /// Center and radius of a sphere enclosing the primitive.
    pub fn bounding_sphere(&self) -> (Point3<f64>, f64) {
        match self {
            Primitive::Sphere { center, radius } => (*center, *radius),
            Primitive::Capsule { a, b, radius } => {
                (nalgebra::center(a, b), 0.5 * (b - a).norm() + radius)
            }
            Primitive::Box { center, half, .. } => (*center, half.norm()),
        }
    }

    fn transformed(
        &self,
        rot: &Rotation3<f64>,
        pivot: &Point3<f64>,
        shift: &Vector3<f64>,
        scale: f64,
    ) -> Self {
        let tp = |p: &Point3<f64>| pivot + rot * ((p - pivot) * scale) + shift;
        match self {
            Primitive::Sphere { center, radius } => Primitive::Sphere {
                center: tp(center),
                radius: radius * scale,
            },
            Primitive::Capsule { a, b, radius } => Primitive::Capsule {
                a: tp(a),
                b: tp(b),
                radius: radius * scale,
            },
            Primitive::Box {
                center,
                half,
                rotation,
            } => Primitive::Box {
                center: tp(center),
                half: half * scale,
                rotation: rot * rotation,
            },
        }
    }
}

/// Directional light; `direction` points from the surface toward the light.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Light {
    pub direction: Vector3<f64>,
    pub intensity: f64,
}

impl Default for Light {
    fn default() -> Self {
        Self {
            direction: Vector3::new(0.0, 0.0, -1.0),
            intensity: 1.0,
        }
    }
}

/// Min-union of primitives in left-camera space.
#[derive(Debug, Clone, PartialEq)]
pub struct SdfScene {
    pub primitives: Vec<Primitive>,
    pub light: Light,
}

impl SdfScene {
    pub fn new(primitives: Vec<Primitive>) -> Result<Self> {
        if primitives.is_empty() {
            return Err(Error::Scene("scene needs at least one primitive".into()));
        }
        Ok(Self {
            primitives,
            light: Light::default(),
        })
    }

    pub fn with_light(mut self, light: Light) -> Self {
        self.light = light;
        self
    }

    pub fn sdf(&self, p: &Point3<f64>) -> f64 {
        self.primitives
            .iter()
            .map(|prim| prim.sdf(p))
            .fold(f64::INFINITY, f64::min)
    }

    /// Ground-truth occupancy: inside iff `sdf ≤ 0` (the surface counts as inside).
    pub fn occupancy(&self, p: &Point3<f64>) -> bool {
        self.sdf(p) <= 0.0
    }

    /// Central-difference SDF gradient.
    pub fn gradient(&self, p: &Point3<f64>) -> Vector3<f64> {
        const H: f64 = 1e-5;
        let e = |i: usize| {
            let mut v = Vector3::zeros();
            v[i] = H;
            v
        };
        Vector3::from_fn(|i, _| (self.sdf(&(p + e(i))) - self.sdf(&(p - e(i)))) / (2.0 * H))
    }

    pub fn normal(&self, p: &Point3<f64>) -> Vector3<f64> {
        let g = self.gradient(p);
        let n = g.norm();
        if n > 0.0 {
            g / n
        } else {
            Vector3::z()
        }
    }

    pub fn bounding_sphere(&self) -> (Point3<f64>, f64) {
        let spheres: Vec<_> = self
            .primitives
            .iter()
            .map(Primitive::bounding_sphere)
            .collect();
        let n = spheres.len() as f64;
        let c = Point3::from(spheres.iter().map(|(c, _)| c.coords).sum::<Vector3<f64>>() / n);
        let r = spheres
            .iter()
            .map(|(pc, pr)| (pc - c).norm() + pr)
            .fold(0.0, f64::max);
        (c, r)
    }

    /// Rotates by `rot` about the scene's bounding-sphere center, scales by
    /// `scale`, then translates by `shift`.
    pub fn transformed(&self, rot: &Rotation3<f64>, shift: &Vector3<f64>, scale: f64) -> Self {
        let (pivot, _) = self.bounding_sphere();
        Self {
            primitives: self
                .primitives
                .iter()
                .map(|p| p.transformed(rot, &pivot, shift, scale))
                .collect(),
            light: self.light,
        }
    }

    pub fn to_text(&self) -> String {
        let mut s =
            String::from("# sdf scene: one primitive per line, meters, left-camera space\n");
        for p in &self.primitives {
            match p {
                Primitive::Sphere { center: c, radius } => {
                    writeln!(s, "sphere {} {} {} {}", c.x, c.y, c.z, radius).unwrap();
                }
                Primitive::Capsule { a, b, radius } => {
                    writeln!(
                        s,
                        "capsule {} {} {} {} {} {} {}",
                        a.x, a.y, a.z, b.x, b.y, b.z, radius
                    )
                    .unwrap();
                }
                Primitive::Box {
                    center: c,
                    half: h,
                    rotation,
                } => {
                    let (rx, ry, rz) = rotation.euler_angles();
                    if rotation.angle() == 0.0 {
                        writeln!(s, "box {} {} {} {} {} {}", c.x, c.y, c.z, h.x, h.y, h.z).unwrap();
                    } else {
                        writeln!(
                            s,
                            "box {} {} {} {} {} {} {} {} {}",
                            c.x, c.y, c.z, h.x, h.y, h.z, rx, ry, rz
                        )
                        .unwrap();
                    }
                }
            }
        }
        let l = &self.light;
        writeln!(
            s,
            "light {} {} {} {}",
            l.direction.x, l.direction.y, l.direction.z, l.intensity
        )
        .unwrap();
        s
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let err = |line: usize, msg: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            msg,
        };
        let mut prims = Vec::new();
        let mut light = Light::default();
        for (n, raw) in text.lines().enumerate() {
            let line = n + 1;
            let body = raw.split('#').next().unwrap_or("").trim();
            if body.is_empty() {
                continue;
            }
            let mut it = body.split_whitespace();
            let kind = it.next().unwrap_or_default();
            let nums: Vec<f64> = it
                .map(|t| {
                    t.parse::<f64>()
                        .map_err(|e| err(line, format!("bad number {t:?}: {e}")))
                })
                .collect::<Result<_>>()?;
            if nums.iter().any(|v| !v.is_finite()) {
                return Err(err(line, "non-finite value".into()));
            }
            let want = |counts: &[usize]| -> Result<()> {
                if counts.contains(&nums.len()) {
                    Ok(())
                } else {
                    Err(err(
                        line,
                        format!("{kind} expects {counts:?} numbers, got {}", nums.len()),
                    ))
                }
            };
            let positive = |v: f64, what: &str| -> Result<f64> {
                if v > 0.0 {
                    Ok(v)
                } else {
                    Err(err(line, format!("{what} must be > 0")))
                }
            };
            match kind {
                "sphere" => {
                    want(&[4])?;
                    prims.push(Primitive::Sphere {
                        center: Point3::new(nums[0], nums[1], nums[2]),
                        radius: positive(nums[3], "radius")?,
                    });
                }
                "capsule" => {
                    want(&[7])?;
                    prims.push(Primitive::Capsule {
                        a: Point3::new(nums[0], nums[1], nums[2]),
                        b: Point3::new(nums[3], nums[4], nums[5]),
                        radius: positive(nums[6], "radius")?,
                    });
                }
                "box" => {
                    want(&[6, 9])?;
                    let rotation = if nums.len() == 9 {
                        Rotation3::from_euler_angles(nums[6], nums[7], nums[8])
                    } else {
                        Rotation3::identity()
                    };
                    prims.push(Primitive::Box {
                        center: Point3::new(nums[0], nums[1], nums[2]),
                        half: Vector3::new(
                            positive(nums[3], "half extent")?,
                            positive(nums[4], "half extent")?,
                            positive(nums[5], "half extent")?,
                        ),
                        rotation,
                    });
                }
                "light" => {
                    want(&[4])?;
                    let d = Vector3::new(nums[0], nums[1], nums[2]);
                    if d.norm() == 0.0 {
                        return Err(err(line, "light direction must be non-zero".into()));
                    }
                    light = Light {
                        direction: d.normalize(),
                        intensity: nums[3],
                    };
                }
                other => return Err(err(line, format!("unknown record {other:?}"))),
            }
        }
        if prims.is_empty() {
            return Err(err(0, "scene has no primitives".into()));
        }
        Ok(Self {
            primitives: prims,
            light,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text, path)
    }
}

/// Ranges for procedural scenes, in left-camera space.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneGenConfig {
    pub min_primitives: usize,
    pub max_primitives: usize,
    pub depth_range: (f64, f64),
    /// Fraction of the half field of view that primitive centers may use.
    pub lateral_fraction: f64,
    pub size_range: (f64, f64),
    /// Maximum angle between the light and the viewing axis (radians).
    pub light_cone: f64,
    pub intensity_range: (f64, f64),
    /// Every primitive lies inside this box.
    pub workspace: Aabb,
}

impl Default for SceneGenConfig {
    fn default() -> Self {
        Self {
            min_primitives: 1,
            max_primitives: 3,
            depth_range: (1.0, 1.6),
            lateral_fraction: 0.45,
            size_range: (0.08, 0.2),
            light_cone: 30f64.to_radians(),
            intensity_range: (0.7, 1.0),
            workspace: Aabb::DESK,
        }
    }
}

fn random_rotation<R: Rng + ?Sized>(rng: &mut R) -> Rotation3<f64> {
    let axis = loop {
        let v = Vector3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        );
        let n = v.norm();
        if n > 1e-3 && n <= 1.0 {
            break v / n;
        }
    };
    Rotation3::from_axis_angle(
        &Unit::new_unchecked(axis),
        rng.random_range(0.0..std::f64::consts::PI),
    )
}

/// Light direction within `cone` radians of the axis pointing back at the camera.
pub fn random_light<R: Rng + ?Sized>(rng: &mut R, cone: f64, intensity: (f64, f64)) -> Light {
    let theta = rng.random_range(0.0..=cone);
    let phi = rng.random_range(0.0..std::f64::consts::TAU);
    Light {
        direction: Vector3::new(
            theta.sin() * phi.cos(),
            theta.sin() * phi.sin(),
            -theta.cos(),
        ),
        intensity: rng.random_range(intensity.0..=intensity.1),
    }
}

/// Moves a ball's center the least along each axis so the ball lies inside
/// `workspace` and its center within `lateral_fraction` of the half field of
/// view, shrunk by the radius. An axis that cannot fit is centered.
pub fn fit_ball(
    center: Point3<f64>,
    radius: f64,
    rig: &RectifiedRig,
    workspace: &Aabb,
    lateral_fraction: f64,
) -> Point3<f64> {
    let half = [
        0.5 * rig.width as f64 / rig.focal_px,
        0.5 * rig.height as f64 / rig.focal_px,
    ];
    let ws = workspace;
    let mut c = center;
    c.z = c.z.clamp(
        ws.min.z + radius,
        (ws.max.z - radius).max(ws.min.z + radius),
    );
    for axis in 0..2 {
        let lim = (half[axis] * c.z - radius)
            .min(lateral_fraction * half[axis] * c.z)
            .max(0.0);
        let lo = (ws.min[axis] + radius).max(-lim);
        let hi = (ws.max[axis] - radius).min(lim);
        c[axis] = if lo <= hi {
            c[axis].clamp(lo, hi)
        } else {
            0.5 * (lo + hi)
        };
    }
    c
}

/// Per-epoch random re-posing of a training scene before it is re-rendered.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentConfig {
    /// Largest rotation angle (radians) about a random axis through the scene center.
    pub max_rotation: f64,
    /// Largest translation along each axis (meters).
    pub max_shift: f64,
    pub scale_range: (f64, f64),
    pub light_cone: f64,
    pub intensity_range: (f64, f64),
    /// The re-posed scene's enclosing ball is kept inside this box and the frustum.
    pub workspace: Aabb,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            max_rotation: std::f64::consts::PI,
            max_shift: 0.1,
            scale_range: (0.85, 1.15),
            light_cone: 30f64.to_radians(),
            intensity_range: (0.7, 1.0),
            workspace: Aabb::DESK,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.scale_range;
        if !(self.max_rotation >= 0.0 && self.max_shift >= 0.0 && lo > 0.0 && lo <= hi) {
            return Err(Error::Config(
                "augmentation needs non-negative rotation and shift and 0 < scale_min <= scale_max"
                    .into(),
            ));
        }
        if !(self.intensity_range.0 <= self.intensity_range.1 && self.light_cone >= 0.0) {
            return Err(Error::Config(
                "augmentation light ranges are inverted".into(),
            ));
        }
        Ok(())
    }
}

/// Randomly rotates, scales and shifts `scene`, then moves it back inside the
/// frustum and workspace; the light is redrawn.
pub fn augment_scene<R: Rng + ?Sized>(
    rng: &mut R,
    scene: &SdfScene,
    rig: &RectifiedRig,
    cfg: &AugmentConfig,
) -> SdfScene {
    let axis = random_rotation(rng) * Vector3::x();
    let angle = rng.random_range(0.0..=cfg.max_rotation);
    let rot = Rotation3::from_axis_angle(&Unit::new_normalize(axis), angle);
    let scale = rng.random_range(cfg.scale_range.0..=cfg.scale_range.1);
    let shift = Vector3::from_fn(|_, _| rng.random_range(-cfg.max_shift..=cfg.max_shift));
    let light = random_light(rng, cfg.light_cone, cfg.intensity_range);
    let moved = scene.transformed(&rot, &shift, scale);
    let (c, r) = moved.bounding_sphere();
    let fitted = fit_ball(c, r, rig, &cfg.workspace, 1.0);
    moved
        .transformed(&Rotation3::identity(), &(fitted - c), 1.0)
        .with_light(light)
}

/// Random min-union of primitives whose enclosing balls lie inside the frustum and the workspace.
pub fn random_scene<R: Rng + ?Sized>(
    rng: &mut R,
    rig: &RectifiedRig,
    cfg: &SceneGenConfig,
) -> SdfScene {
    let n = rng.random_range(cfg.min_primitives..=cfg.max_primitives.max(cfg.min_primitives));
    let half_w = 0.5 * rig.width as f64 / rig.focal_px;
    let half_h = 0.5 * rig.height as f64 / rig.focal_px;
    // Cluster primitives around a common anchor so scenes read as one object.
    let z0 = rng.random_range(cfg.depth_range.0..=cfg.depth_range.1);
    let anchor = Point3::new(
        rng.random_range(-1.0..=1.0) * 0.5 * cfg.lateral_fraction * half_w * z0,
        rng.random_range(-1.0..=1.0) * 0.5 * cfg.lateral_fraction * half_h * z0,
        z0,
    );
    let spread = cfg.size_range.1 * 1.2;
    let prims = (0..n)
        .map(|_| {
            let size = rng.random_range(cfg.size_range.0..=cfg.size_range.1);
            let offset = Vector3::new(
                rng.random_range(-spread..=spread),
                rng.random_range(-spread..=spread),
                rng.random_range(-0.5 * spread..=0.5 * spread),
            );
            let mut prim = match rng.random_range(0..3) {
                0 => Primitive::Sphere {
                    center: Point3::origin(),
                    radius: size,
                },
                1 => {
                    let dir = random_rotation(rng) * Vector3::x();
                    let radius = size * rng.random_range(0.35..=0.5);
                    let len = size - radius;
                    Primitive::Capsule {
                        a: Point3::from(-dir * len),
                        b: Point3::from(dir * len),
                        radius,
                    }
                }
                _ => Primitive::Box {
                    center: Point3::origin(),
                    half: Vector3::new(
                        size * rng.random_range(0.6..=1.0),
                        size * rng.random_range(0.6..=1.0),
                        size * rng.random_range(0.6..=1.0),
                    ),
                    rotation: random_rotation(rng),
                },
            };
            let bound = prim.bounding_sphere().1;
            let c = fit_ball(
                anchor + offset,
                bound,
                rig,
                &cfg.workspace,
                cfg.lateral_fraction,
            );
            match &mut prim {
                Primitive::Sphere { center, .. } | Primitive::Box { center, .. } => *center = c,
                Primitive::Capsule { a, b, .. } => {
                    *a += c.coords;
                    *b += c.coords;
                }
            }
            prim
        })
        .collect();
    SdfScene {
        primitives: prims,
        light: random_light(rng, cfg.light_cone, cfg.intensity_range),
    }
}
