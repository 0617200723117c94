//! Training query points with ground-truth occupancy around synthetic surfaces.

use nalgebra::{Point3, Vector3};
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::error::{Error, Result};
use crate::synth::SdfScene;

pub use crate::geometry::Aabb;

#[derive(Debug, Clone, PartialEq)]
pub struct SampleConfig {
    pub surface_count: usize,
    pub gaussian_sigma: f64,
    pub uniform_ratio: f64,
    pub bounds: Aabb,
    pub seed: u64,
}

impl Default for SampleConfig {
    fn default() -> Self {
        Self {
            surface_count: 4096,
            gaussian_sigma: 0.05,
            uniform_ratio: 1.0 / 16.0,
            bounds: Aabb::DESK,
            seed: 0,
        }
    }
}

impl SampleConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gaussian_sigma > 0.0) {
            return Err(Error::Config("gaussian_sigma must be > 0".into()));
        }
        if !(0.0..=1.0).contains(&self.uniform_ratio) {
            return Err(Error::Config("uniform_ratio must lie in [0, 1]".into()));
        }
        if !(self.bounds.volume() > 0.0) || self.bounds.min.z <= 0.0 {
            return Err(Error::Config(
                "sampling box needs positive volume in front of the camera".into(),
            ));
        }
        Ok(())
    }
}

/// Points with ground-truth labels (`true` = inside).
#[derive(Debug, Clone, PartialEq)]
pub struct QueryBatch {
    pub points: Vec<Point3<f64>>,
    pub labels: Vec<bool>,
    pub scene_id: usize,
}

const TRACE_TOL: f64 = 1e-6;
const PROJECT_TOL: f64 = 1e-6;

fn random_unit<R: Rng + ?Sized>(rng: &mut R) -> Vector3<f64> {
    loop {
        let v = Vector3::new(
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
        );
        let n: f64 = v.norm();
        if n > 1e-9 {
            return v / n;
        }
    }
}

/// Newton-style projection onto the zero level set.
fn project(scene: &SdfScene, mut p: Point3<f64>) -> Option<Point3<f64>> {
    for _ in 0..32 {
        let d = scene.sdf(&p);
        if d.abs() <= PROJECT_TOL {
            return Some(p);
        }
        p -= scene.normal(&p) * d;
    }
    None
}

/// Points on the outer surface of `scene`: random rays from random
/// directions are sphere traced and the hits projected onto `sdf = 0`.
pub fn sample_surface_points<R: Rng + ?Sized>(
    scene: &SdfScene,
    n: usize,
    rng: &mut R,
) -> Result<Vec<Point3<f64>>> {
    let mut out = Vec::with_capacity(n);
    if n == 0 {
        return Ok(out);
    }
    let (c, r) = scene.bounding_sphere();
    let start = 1.5 * r + 0.1;
    let max_attempts = 1000 + 200 * n;
    let mut attempts = 0;
    while out.len() < n {
        attempts += 1;
        if attempts > max_attempts || (attempts >= 1000 && out.is_empty()) {
            return Err(Error::Scene(format!(
                "surface sampler found {} of {n} points after {attempts} rays",
                out.len()
            )));
        }
        let origin = c + random_unit(rng) * start;
        let target = c + random_unit(rng) * r * rng.random::<f64>().cbrt();
        let dir = (target - origin).normalize();
        let mut t = 0.0;
        for _ in 0..512 {
            let p = origin + dir * t;
            let d = scene.sdf(&p);
            if d < TRACE_TOL {
                if let Some(q) = project(scene, p) {
                    out.push(q);
                }
                break;
            }
            t += d;
            if t > 2.0 * start + 2.0 * r {
                break;
            }
        }
    }
    Ok(out)
}

/// Gaussian perturbation of surface points mixed with box-uniform samples;
/// labels come from the SDF oracle. Perturbed points are clamped to the box.
pub fn perturb_and_label<R: Rng + ?Sized>(
    surface: &[Point3<f64>],
    scene: &SdfScene,
    cfg: &SampleConfig,
    scene_id: usize,
    rng: &mut R,
) -> QueryBatch {
    let n = surface.len();
    let n_uniform = ((n as f64) * cfg.uniform_ratio).round() as usize;
    let noise = Normal::new(0.0, cfg.gaussian_sigma).expect("sigma validated");
    let mut points = Vec::with_capacity(n);
    for p in &surface[..n - n_uniform] {
        let q = p + Vector3::new(noise.sample(rng), noise.sample(rng), noise.sample(rng));
        points.push(cfg.bounds.clamp(&q));
    }
    for _ in 0..n_uniform {
        points.push(cfg.bounds.sample(rng));
    }
    let labels = points.iter().map(|p| scene.occupancy(p)).collect();
    QueryBatch {
        points,
        labels,
        scene_id,
    }
}
