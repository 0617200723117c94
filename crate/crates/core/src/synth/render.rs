use nalgebra::{Point3, Vector3};
use rayon::prelude::*;

use super::scene::SdfScene;
use crate::geometry::RectifiedRig;
use crate::grid::{DepthMap, DisparityMap, PixelMap};

/// Single-channel image with intensities in `[0, 1]`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; width * height],
        }
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.width + x]
    }

    pub fn to_u8(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }

    pub fn from_u8(width: usize, height: usize, bytes: &[u8]) -> Self {
        Self {
            width,
            height,
            data: bytes.iter().map(|b| *b as f32 / 255.0).collect(),
        }
    }

    /// Rounds through 8 bits, matching what a PGM round trip yields.
    pub fn quantized(&self) -> Self {
        Self::from_u8(self.width, self.height, &self.to_u8())
    }

    /// Foreground = any non-zero intensity (background renders to exactly 0).
    pub fn foreground(&self) -> Vec<bool> {
        self.data.iter().map(|v| *v > 0.0).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RenderSettings {
    pub tolerance: f64,
    pub max_steps: usize,
    pub far: f64,
    /// Unlit fraction of the albedo; keeps every hit strictly brighter than
    /// the background.
    pub ambient: f64,
}

impl Default for RenderSettings {
    fn default() -> Self {
        Self {
            tolerance: 1e-5,
            max_steps: 256,
            far: 20.0,
            ambient: 0.25,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderedPair {
    pub left: GrayImage,
    pub right: GrayImage,
    /// Left-view depth (meters); misses are invalid.
    pub depth: DepthMap<f32>,
    /// Left-view disparity (pixels) derived from `depth`.
    pub disparity: DisparityMap<f32>,
    /// Right-view depth, used for reprojection checks.
    pub right_depth: DepthMap<f32>,
}

/// Solid texture in camera space, values in `[0.2, 1.0]`.
fn albedo(p: &Point3<f64>) -> f64 {
    let t = 0.35 * (23.1 * p.x + 7.3 * p.y + 11.0 * p.z + 0.3).sin()
        + 0.35 * (-13.7 * p.x + 29.3 * p.y + 5.1 * p.z + 1.7).sin()
        + 0.3 * (41.0 * p.x - 17.0 * p.y + 31.0 * p.z + 4.1).sin();
    0.6 + 0.4 * t
}

fn sphere_trace(
    scene: &SdfScene,
    origin: &Point3<f64>,
    dir: &Vector3<f64>,
    s: &RenderSettings,
) -> Option<Point3<f64>> {
    let mut t = 0.0;
    for _ in 0..s.max_steps {
        let p = origin + dir * t;
        let d = scene.sdf(&p);
        if d < s.tolerance {
            return Some(p);
        }
        t += d;
        if t > s.far {
            return None;
        }
    }
    None
}

fn shade(scene: &SdfScene, p: &Point3<f64>, s: &RenderSettings) -> f32 {
    let n = scene.normal(p);
    let lambert = n.dot(&scene.light.direction).max(0.0) * scene.light.intensity;
    let v = albedo(p) * (s.ambient + (1.0 - s.ambient) * lambert);
    v.clamp(1e-3, 1.0) as f32
}

struct View {
    image: GrayImage,
    depth: Vec<f32>,
    valid: Vec<bool>,
}

fn render_view(
    scene: &SdfScene,
    rig: &RectifiedRig,
    origin: Point3<f64>,
    s: &RenderSettings,
) -> View {
    let (w, h) = (rig.width, rig.height);
    let rows: Vec<Vec<(f32, f32, bool)>> = (0..h)
        .into_par_iter()
        .map(|y| {
            (0..w)
                .map(|x| {
                    let dir = rig.left_ray(x as f64, y as f64);
                    match sphere_trace(scene, &origin, &dir, s) {
                        Some(p) => (shade(scene, &p, s), p.z as f32, true),
                        None => (0.0, 0.0, false),
                    }
                })
                .collect()
        })
        .collect();
    let mut view = View {
        image: GrayImage::new(w, h),
        depth: vec![0.0; w * h],
        valid: vec![false; w * h],
    };
    for (y, row) in rows.into_iter().enumerate() {
        for (x, (i, z, ok)) in row.into_iter().enumerate() {
            let k = y * w + x;
            view.image.data[k] = i;
            view.depth[k] = z;
            view.valid[k] = ok;
        }
    }
    view
}

/// Renders the rectified pair. Misses are background (intensity 0, invalid).
pub fn render_stereo(
    scene: &SdfScene,
    rig: &RectifiedRig,
    settings: &RenderSettings,
) -> RenderedPair {
    let left = render_view(scene, rig, Point3::origin(), settings);
    let right = render_view(scene, rig, rig.right_center(), settings);
    let bk = rig.bk();
    let disp: Vec<f32> = left
        .depth
        .iter()
        .zip(&left.valid)
        .map(|(z, ok)| if *ok { (bk / *z as f64) as f32 } else { 0.0 })
        .collect();
    let (w, h) = (rig.width, rig.height);
    RenderedPair {
        depth: PixelMap {
            width: w,
            height: h,
            values: left.depth,
            valid: left.valid.clone(),
        },
        disparity: PixelMap {
            width: w,
            height: h,
            values: disp,
            valid: left.valid,
        },
        right_depth: PixelMap {
            width: w,
            height: h,
            values: right.depth,
            valid: right.valid,
        },
        left: left.image,
        right: right.image,
    }
}
