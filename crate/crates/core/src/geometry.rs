//! Rectified stereo camera model.
//!
//! Pixel centers sit at integer coordinates with the origin at the top-left
//! pixel. The right camera is the left camera translated by `+baseline_m`
//! along camera x with identical intrinsics.

use nalgebra::{Point2, Point3, Vector3};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RectifiedRig {
    /// Focal length `k` in pixels.
    pub focal_px: f64,
    /// Baseline `b` in meters.
    pub baseline_m: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl RectifiedRig {
    pub fn new(
        focal_px: f64,
        baseline_m: f64,
        principal: (f64, f64),
        image_size: (usize, usize),
    ) -> Result<Self> {
        let rig = Self {
            focal_px,
            baseline_m,
            cx: principal.0,
            cy: principal.1,
            width: image_size.0,
            height: image_size.1,
        };
        rig.validate()?;
        Ok(rig)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.focal_px > 0.0 && self.focal_px.is_finite()) {
            return Err(Error::Config(format!(
                "focal_px must be > 0, got {}",
                self.focal_px
            )));
        }
        if !(self.baseline_m > 0.0 && self.baseline_m.is_finite()) {
            return Err(Error::Config(format!(
                "baseline_m must be > 0, got {}",
                self.baseline_m
            )));
        }
        if self.width < 2 || self.height < 2 {
            return Err(Error::Config(format!(
                "image size must be at least 2x2, got {}x{}",
                self.width, self.height
            )));
        }
        Ok(())
    }

    /// Product `b·k`: the disparity (px) of a point at unit depth.
    #[inline]
    pub fn bk(&self) -> f64 {
        self.baseline_m * self.focal_px
    }

    pub fn project_left(&self, p: &Point3<f64>) -> Result<Point2<f64>> {
        if p.z <= 0.0 {
            return Err(Error::BehindCamera { z: p.z });
        }
        Ok(Point2::new(
            self.focal_px * p.x / p.z + self.cx,
            self.focal_px * p.y / p.z + self.cy,
        ))
    }

    pub fn project_right(&self, p: &Point3<f64>) -> Result<Point2<f64>> {
        if p.z <= 0.0 {
            return Err(Error::BehindCamera { z: p.z });
        }
        // y uses the same expression as project_left so the epipolar
        // constraint holds bit-exactly.
        Ok(Point2::new(
            self.focal_px * (p.x - self.baseline_m) / p.z + self.cx,
            self.focal_px * p.y / p.z + self.cy,
        ))
    }

    pub fn disparity_to_depth(&self, disparity: f64) -> Result<f64> {
        if !(disparity > 0.0) {
            return Err(Error::InvalidDisparity(disparity));
        }
        Ok(self.bk() / disparity)
    }

    pub fn depth_to_disparity(&self, depth: f64) -> Result<f64> {
        if !(depth > 0.0) {
            return Err(Error::InvalidDepth(depth));
        }
        Ok(self.bk() / depth)
    }

    /// Unit direction of the left-camera ray through pixel `(u, v)`.
    pub fn left_ray(&self, u: f64, v: f64) -> Vector3<f64> {
        Vector3::new(
            (u - self.cx) / self.focal_px,
            (v - self.cy) / self.focal_px,
            1.0,
        )
        .normalize()
    }

    pub fn right_center(&self) -> Point3<f64> {
        Point3::new(self.baseline_m, 0.0, 0.0)
    }

    /// Back-projects left pixel `(u, v)` at depth `z`.
    pub fn unproject_left(&self, u: f64, v: f64, z: f64) -> Point3<f64> {
        Point3::new(
            (u - self.cx) * z / self.focal_px,
            (v - self.cy) * z / self.focal_px,
            z,
        )
    }
}

/// Downsampling factors that relate a volume grid to the full-resolution image.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VolumeStrides {
    /// Pixels per voxel along x and y.
    pub spatial_stride: usize,
    /// Pixels of disparity per voxel along the disparity axis.
    pub disparity_stride: usize,
    /// Maximum disparity `D` in pixels.
    pub max_disparity: usize,
}

impl VolumeStrides {
    pub fn new(
        spatial_stride: usize,
        disparity_stride: usize,
        max_disparity: usize,
    ) -> Result<Self> {
        let s = Self {
            spatial_stride,
            disparity_stride,
            max_disparity,
        };
        if spatial_stride == 0 || disparity_stride == 0 {
            return Err(Error::Config("strides must be >= 1".into()));
        }
        if max_disparity == 0 || max_disparity % disparity_stride != 0 {
            return Err(Error::Config(format!(
                "max_disparity ({max_disparity}) must be a positive multiple of disparity_stride ({disparity_stride})"
            )));
        }
        Ok(s)
    }

    /// Checks that the image divides evenly into voxels.
    pub fn validate_for(&self, rig: &RectifiedRig) -> Result<()> {
        if rig.width % self.spatial_stride != 0 || rig.height % self.spatial_stride != 0 {
            return Err(Error::Config(format!(
                "image size {}x{} is not divisible by spatial_stride {}",
                rig.width, rig.height, self.spatial_stride
            )));
        }
        Ok(())
    }

    /// Number of disparity bins `D / disparity_stride`.
    pub fn disparity_bins(&self) -> usize {
        self.max_disparity / self.disparity_stride
    }

    pub fn grid_size(&self, rig: &RectifiedRig) -> (usize, usize) {
        (
            rig.width / self.spatial_stride,
            rig.height / self.spatial_stride,
        )
    }
}

/// Continuous `(d, y, x)` voxel coordinate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VoxelCoord {
    pub d: f64,
    pub y: f64,
    pub x: f64,
}

/// Voxel coordinate `(π_l(P)_x − π_r(P)_x, π_l(P)_y, π_l(P)_x)` divided by the strides.
pub fn volume_coordinate(
    p: &Point3<f64>,
    rig: &RectifiedRig,
    strides: &VolumeStrides,
) -> Result<VoxelCoord> {
    let l = rig.project_left(p)?;
    let r = rig.project_right(p)?;
    Ok(VoxelCoord {
        d: (l.x - r.x) / strides.disparity_stride as f64,
        y: l.y / strides.spatial_stride as f64,
        x: l.x / strides.spatial_stride as f64,
    })
}

/// Axis-aligned box in left-camera space.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aabb {
    pub min: Point3<f64>,
    pub max: Point3<f64>,
}

impl Aabb {
    /// Default desk workspace: a metre wide, 0.8 m to 1.9 m from the camera.
    pub const DESK: Aabb = Aabb {
        min: Point3::new(-0.5, -0.5, 0.8),
        max: Point3::new(0.5, 0.5, 1.9),
    };

    pub fn new(min: Point3<f64>, max: Point3<f64>) -> Self {
        Self { min, max }
    }

    pub fn contains(&self, p: &Point3<f64>) -> bool {
        (0..3).all(|i| p[i] >= self.min[i] && p[i] <= self.max[i])
    }

    pub fn clamp(&self, p: &Point3<f64>) -> Point3<f64> {
        Point3::new(
            p.x.clamp(self.min.x, self.max.x),
            p.y.clamp(self.min.y, self.max.y),
            p.z.clamp(self.min.z, self.max.z),
        )
    }

    pub fn volume(&self) -> f64 {
        (self.max - self.min).product()
    }

    pub fn sample<R: rand::Rng + ?Sized>(&self, rng: &mut R) -> Point3<f64> {
        Point3::new(
            rng.random_range(self.min.x..=self.max.x),
            rng.random_range(self.min.y..=self.max.y),
            rng.random_range(self.min.z..=self.max.z),
        )
    }
}
