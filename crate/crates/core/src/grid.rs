//! Dense 2D/3D/4D float grids and their interpolation stencils.
//!
//! Samplers are expressed as stencils (flat index, weight) so that the same
//! weights drive the forward gather and the adjoint scatter during training.

use crate::error::{Error, Result};
use crate::geometry::{VolumeStrides, VoxelCoord};
use crate::scalar::Real;

/// `(C, H, W)` feature map; cell `(i, j)` sits at full-resolution pixel
/// `(j·stride_px, i·stride_px)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureGrid<T> {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub stride_px: usize,
    pub data: Vec<T>,
}

impl<T: Real> FeatureGrid<T> {
    pub fn zeros(channels: usize, height: usize, width: usize, stride_px: usize) -> Self {
        Self {
            channels,
            height,
            width,
            stride_px: stride_px.max(1),
            data: vec![T::zero(); channels * height * width],
        }
    }

    pub fn from_data(
        channels: usize,
        height: usize,
        width: usize,
        stride_px: usize,
        data: Vec<T>,
    ) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::Dimension(format!(
                "feature grid data has {} values, expected {}x{}x{}",
                data.len(),
                channels,
                height,
                width
            )));
        }
        if stride_px == 0 {
            return Err(Error::Dimension("stride_px must be >= 1".into()));
        }
        Ok(Self {
            channels,
            height,
            width,
            stride_px,
            data,
        })
    }

    #[inline]
    pub fn plane(&self) -> usize {
        self.height * self.width
    }

    #[inline]
    pub fn idx(&self, c: usize, i: usize, j: usize) -> usize {
        (c * self.height + i) * self.width + j
    }

    #[inline]
    pub fn at(&self, c: usize, i: usize, j: usize) -> T {
        self.data[self.idx(c, i, j)]
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.channels == other.channels
            && self.height == other.height
            && self.width == other.width
            && self.stride_px == other.stride_px
    }

    /// Bilinear sample at continuous cell coordinates `(u = column, v = row)`.
    pub fn bilinear_sample(&self, u: f64, v: f64) -> Vec<T> {
        let stencil = bilinear_stencil(self.height, self.width, u, v);
        let plane = self.plane();
        (0..self.channels)
            .map(|c| stencil.gather(&self.data[c * plane..(c + 1) * plane]))
            .collect()
    }
}

/// `(C, D, H, W)` volume with optional per-voxel validity over `(D, H, W)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume4<T> {
    pub channels: usize,
    pub disparities: usize,
    pub height: usize,
    pub width: usize,
    pub strides: VolumeStrides,
    pub data: Vec<T>,
    /// `true` where the voxel's right-image lookup fell inside the image.
    pub in_range: Option<Vec<bool>>,
}

impl<T: Real> Volume4<T> {
    pub fn zeros(
        channels: usize,
        disparities: usize,
        height: usize,
        width: usize,
        strides: VolumeStrides,
    ) -> Self {
        Self {
            channels,
            disparities,
            height,
            width,
            strides,
            data: vec![T::zero(); channels * disparities * height * width],
            in_range: None,
        }
    }

    pub fn from_data(shape: [usize; 4], strides: VolumeStrides, data: Vec<T>) -> Result<Self> {
        let [c, d, h, w] = shape;
        if data.len() != c * d * h * w {
            return Err(Error::Dimension(format!(
                "volume data has {} values, expected {c}x{d}x{h}x{w}",
                data.len()
            )));
        }
        Ok(Self {
            channels: c,
            disparities: d,
            height: h,
            width: w,
            strides,
            data,
            in_range: None,
        })
    }

    pub fn shape(&self) -> [usize; 4] {
        [self.channels, self.disparities, self.height, self.width]
    }

    /// Voxels per channel (`D·H·W`).
    #[inline]
    pub fn cell_count(&self) -> usize {
        self.disparities * self.height * self.width
    }

    #[inline]
    pub fn cell(&self, d: usize, i: usize, j: usize) -> usize {
        (d * self.height + i) * self.width + j
    }

    #[inline]
    pub fn idx(&self, c: usize, d: usize, i: usize, j: usize) -> usize {
        c * self.cell_count() + self.cell(d, i, j)
    }

    #[inline]
    pub fn at(&self, c: usize, d: usize, i: usize, j: usize) -> T {
        self.data[self.idx(c, d, i, j)]
    }

    #[inline]
    pub fn is_in_range(&self, cell: usize) -> bool {
        self.in_range.as_ref().is_none_or(|m| m[cell])
    }

    pub fn channel(&self, c: usize) -> &[T] {
        let n = self.cell_count();
        &self.data[c * n..(c + 1) * n]
    }

    /// Trilinear sample at continuous `(d, y, x)` voxel coordinates,
    /// clamped to the border.
    pub fn trilinear_sample(&self, coord: VoxelCoord) -> Vec<T> {
        let stencil = trilinear_stencil(self.disparities, self.height, self.width, coord);
        (0..self.channels)
            .map(|c| stencil.gather(self.channel(c)))
            .collect()
    }
}

/// Per-pixel scalar map with a validity mask (disparity or depth).
#[derive(Debug, Clone, PartialEq)]
pub struct PixelMap<T> {
    pub width: usize,
    pub height: usize,
    pub values: Vec<T>,
    pub valid: Vec<bool>,
}

/// Disparity in full-resolution pixels.
pub type DisparityMap<T> = PixelMap<T>;
/// Depth in meters along the left camera's z axis.
pub type DepthMap<T> = PixelMap<T>;

impl<T: Real> PixelMap<T> {
    pub fn new(width: usize, height: usize, values: Vec<T>, valid: Vec<bool>) -> Result<Self> {
        if values.len() != width * height || valid.len() != width * height {
            return Err(Error::Dimension(format!(
                "pixel map {}x{} got {} values and {} mask entries",
                width,
                height,
                values.len(),
                valid.len()
            )));
        }
        Ok(Self {
            width,
            height,
            values,
            valid,
        })
    }

    pub fn filled(width: usize, height: usize, value: T) -> Self {
        Self {
            width,
            height,
            values: vec![value; width * height],
            valid: vec![true; width * height],
        }
    }

    #[inline]
    pub fn idx(&self, x: usize, y: usize) -> usize {
        y * self.width + x
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|v| **v).count()
    }

    /// Bilinear sample at pixel `(u, v)` requiring every contributing pixel
    /// to be valid; `None` outside the image or on an invalid neighborhood.
    pub fn sample_valid(&self, u: f64, v: f64) -> Option<(T, Stencil<4>)> {
        if !(u >= 0.0 && v >= 0.0 && u <= (self.width - 1) as f64 && v <= (self.height - 1) as f64)
        {
            return None;
        }
        let st = bilinear_stencil(self.height, self.width, u, v);
        if st.iter().any(|(i, _)| !self.valid[i]) {
            return None;
        }
        Some((st.gather(&self.values), st))
    }
}

/// Fixed-size interpolation stencil: flat indices with weights summing to 1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stencil<const N: usize> {
    pub index: [usize; N],
    pub weight: [f64; N],
}

impl<const N: usize> Stencil<N> {
    #[inline]
    pub fn gather<T: Real>(&self, data: &[T]) -> T {
        let mut acc = T::zero();
        for k in 0..N {
            acc = acc + data[self.index[k]] * T::lit(self.weight[k]);
        }
        acc
    }

    #[inline]
    pub fn scatter<T: Real>(&self, grad: T, out: &mut [T]) {
        for k in 0..N {
            out[self.index[k]] = out[self.index[k]] + grad * T::lit(self.weight[k]);
        }
    }

    /// `(index, weight)` pairs, skipping zero weights.
    pub fn iter(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        (0..N)
            .filter(|&k| self.weight[k] != 0.0)
            .map(|k| (self.index[k], self.weight[k]))
    }
}

/// Clamped 1D linear stencil on `n` nodes: `(lo, hi, frac)`.
#[inline]
fn axis_stencil(n: usize, t: f64) -> (usize, usize, f64) {
    let max = (n - 1) as f64;
    let t = if t.is_nan() { 0.0 } else { t.clamp(0.0, max) };
    let lo = t.floor() as usize;
    let lo = lo.min(n - 1);
    let hi = (lo + 1).min(n - 1);
    (lo, hi, t - lo as f64)
}

/// Bilinear stencil over an `h × w` plane at `(u = x, v = y)`; out-of-range
/// coordinates clamp to the border.
pub fn bilinear_stencil(h: usize, w: usize, u: f64, v: f64) -> Stencil<4> {
    let (x0, x1, fx) = axis_stencil(w, u);
    let (y0, y1, fy) = axis_stencil(h, v);
    Stencil {
        index: [y0 * w + x0, y0 * w + x1, y1 * w + x0, y1 * w + x1],
        weight: [
            (1.0 - fx) * (1.0 - fy),
            fx * (1.0 - fy),
            (1.0 - fx) * fy,
            fx * fy,
        ],
    }
}

/// Trilinear stencil over a `(d, h, w)` grid.
pub fn trilinear_stencil(d: usize, h: usize, w: usize, c: VoxelCoord) -> Stencil<8> {
    let (d0, d1, fd) = axis_stencil(d, c.d);
    let (y0, y1, fy) = axis_stencil(h, c.y);
    let (x0, x1, fx) = axis_stencil(w, c.x);
    let mut index = [0; 8];
    let mut weight = [0.0; 8];
    let mut k = 0;
    for (dd, wd) in [(d0, 1.0 - fd), (d1, fd)] {
        for (yy, wy) in [(y0, 1.0 - fy), (y1, fy)] {
            for (xx, wx) in [(x0, 1.0 - fx), (x1, fx)] {
                index[k] = (dd * h + yy) * w + xx;
                weight[k] = wd * wy * wx;
                k += 1;
            }
        }
    }
    Stencil { index, weight }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn strides() -> VolumeStrides {
        VolumeStrides::new(1, 1, 8).unwrap()
    }

    fn linear_grid() -> FeatureGrid<f64> {
        let (h, w) = (5, 7);
        let data = (0..h * w)
            .map(|k| 2.0 * (k % w) as f64 + 3.0 * (k / w) as f64)
            .collect();
        FeatureGrid::from_data(1, h, w, 1, data).unwrap()
    }

    #[test]
    fn bilinear_nodes_and_midpoints() {
        let g = linear_grid();
        assert_eq!(g.bilinear_sample(3.0, 2.0)[0], g.at(0, 2, 3));
        let mid = g.bilinear_sample(3.5, 2.0)[0];
        assert!((mid - 0.5 * (g.at(0, 2, 3) + g.at(0, 2, 4))).abs() < 1e-12);
    }

    #[test]
    fn bilinear_clamps_outside() {
        let g = linear_grid();
        assert_eq!(g.bilinear_sample(-3.0, -1.0), g.bilinear_sample(0.0, 0.0));
        assert_eq!(g.bilinear_sample(100.0, 100.0)[0], g.at(0, 4, 6));
    }

    #[test]
    fn trilinear_reproduces_linear_field() {
        let (d, h, w) = (4, 5, 6);
        let mut v = Volume4::<f64>::zeros(1, d, h, w, strides());
        for dd in 0..d {
            for i in 0..h {
                for j in 0..w {
                    let k = v.idx(0, dd, i, j);
                    v.data[k] = dd as f64 + 10.0 * i as f64 + 100.0 * j as f64;
                }
            }
        }
        let s = v.trilinear_sample(VoxelCoord {
            d: 1.5,
            y: 2.0,
            x: 3.25,
        })[0];
        // 1.5 + 10·2 + 100·3.25
        assert!((s - 346.5).abs() < 1e-9);
        assert_eq!(
            v.trilinear_sample(VoxelCoord {
                d: 2.0,
                y: 1.0,
                x: 4.0
            })[0],
            v.at(0, 2, 1, 4)
        );
        assert_eq!(
            v.trilinear_sample(VoxelCoord {
                d: -5.0,
                y: 0.0,
                x: 0.0
            }),
            v.trilinear_sample(VoxelCoord {
                d: 0.0,
                y: 0.0,
                x: 0.0
            })
        );
    }

    #[test]
    fn pixel_map_sampling_respects_mask() {
        let mut m = PixelMap::filled(4, 3, 2.0f64);
        assert_eq!(m.sample_valid(1.5, 1.5).unwrap().0, 2.0);
        assert!(m.sample_valid(3.5, 0.0).is_none());
        let k = m.idx(2, 1);
        m.valid[k] = false;
        assert!(m.sample_valid(1.5, 1.5).is_none());
        // Exactly on a valid node the invalid neighbour has zero weight.
        assert!(m.sample_valid(1.0, 1.0).is_some());
    }

    #[test]
    fn shape_errors() {
        assert!(FeatureGrid::<f32>::from_data(2, 2, 2, 1, vec![0.0; 7]).is_err());
        assert!(Volume4::<f32>::from_data([1, 2, 2, 2], strides(), vec![0.0; 9]).is_err());
        assert!(PixelMap::<f32>::new(2, 2, vec![0.0; 4], vec![true; 3]).is_err());
    }

    proptest! {
        #[test]
        fn bilinear_exact_on_bilinear_fields(u in 0.0f64..6.0, v in 0.0f64..4.0) {
            let g = linear_grid();
            let s = g.bilinear_sample(u, v)[0];
            prop_assert!((s - (2.0 * u + 3.0 * v)).abs() < 1e-5);
        }

        #[test]
        fn stencil_weights_are_convex(d in -3.0f64..10.0, y in -3.0f64..10.0, x in -3.0f64..10.0) {
            let st = trilinear_stencil(4, 5, 6, VoxelCoord { d, y, x });
            let sum: f64 = st.weight.iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-12);
            prop_assert!(st.weight.iter().all(|w| *w >= 0.0));
        }
    }
}
