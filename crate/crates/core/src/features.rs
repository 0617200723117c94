//! Implicit-function inputs for a 3D query point: pixel-aligned feature,
//! voxel-aligned cost feature and confidence, and the encoded relative
//! z-offset.

use nalgebra::Point3;

use crate::geometry::{volume_coordinate, RectifiedRig};
use crate::grid::{bilinear_stencil, trilinear_stencil, DepthMap, FeatureGrid, Stencil, Volume4};
use crate::scalar::Real;

/// `ψ_t(x) = 2/(1+exp(−t·x)) − 1`, evaluated as `tanh(t·x/2)`.
#[inline]
pub fn psi_t<T: Real>(x: T, t: T) -> T {
    (t * x * T::lit(0.5)).tanh()
}

/// `dψ_t/dx = (t/2)·(1 − ψ²)`.
#[inline]
pub fn psi_t_derivative<T: Real>(x: T, t: T) -> T {
    let p = psi_t(x, t);
    t * T::lit(0.5) * (T::one() - p * p)
}

/// How the relative z-offset is presented to the network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ZEncoding {
    #[default]
    Psi,
    /// Raw offset in meters (ablation variant).
    Raw,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeatureConfig {
    /// Sharpness `t` of ψ_t.
    pub t: f64,
    pub z_encoding: ZEncoding,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            t: 50.0,
            z_encoding: ZEncoding::Psi,
        }
    }
}

impl FeatureConfig {
    #[inline]
    pub fn encode<T: Real>(&self, z: T) -> T {
        match self.z_encoding {
            ZEncoding::Psi => psi_t(z, T::lit(self.t)),
            ZEncoding::Raw => z,
        }
    }

    #[inline]
    pub fn encode_derivative<T: Real>(&self, z: T) -> T {
        match self.z_encoding {
            ZEncoding::Psi => psi_t_derivative(z, T::lit(self.t)),
            ZEncoding::Raw => T::one(),
        }
    }
}

/// `Z_E(P) = P_z − E(π_l(P))` with bilinear depth lookup; `None` when the
/// projection leaves the image or touches invalid depth.
pub fn relative_z_offset<T: Real>(
    p: &Point3<f64>,
    depth: &DepthMap<T>,
    rig: &RectifiedRig,
) -> Option<f64> {
    let px = rig.project_left(p).ok()?;
    let (e, _) = depth.sample_valid(px.x, px.y)?;
    Some(p.z - e.to_f64_lossy())
}

/// Geometry-only sampling plan of a query point. Independent of every
/// learned parameter, so it is computed once per point and reused by the
/// forward and backward passes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QueryStencil {
    /// Into a `FeatureGrid` plane.
    pub pixel: Stencil<4>,
    /// Into `(D, H, W)` cells of the cost volume.
    pub cost: Stencil<8>,
    /// Into `(D, H, W)` cells of the confidence volume.
    pub confidence: Stencil<8>,
    /// Into full-resolution depth pixels.
    pub depth: Stencil<4>,
    pub p_z: f64,
}

/// Shapes that a stencil addresses.
#[derive(Debug, Clone, Copy)]
pub struct SamplingLayout<'a, T> {
    pub pixel_features: &'a FeatureGrid<T>,
    pub cost: &'a Volume4<T>,
    pub confidence: &'a Volume4<T>,
    pub depth: &'a DepthMap<T>,
}

/// Builds the stencil, or `None` when `P` is outside the stereo viewing
/// volume: behind the camera, projecting outside the left image, beyond the
/// disparity range, or onto pixels without valid depth.
pub fn query_stencil<T: Real>(
    p: &Point3<f64>,
    rig: &RectifiedRig,
    layout: &SamplingLayout<'_, T>,
) -> Option<QueryStencil> {
    let px = rig.project_left(p).ok()?;
    let (w, h) = (rig.width as f64, rig.height as f64);
    if !(px.x >= 0.0 && px.y >= 0.0 && px.x <= w - 1.0 && px.y <= h - 1.0) {
        return None;
    }
    let disparity = rig.bk() / p.z;
    if disparity >= layout.cost.strides.max_disparity as f64 {
        return None;
    }
    let (_, depth) = layout.depth.sample_valid(px.x, px.y)?;
    let f = layout.pixel_features;
    let s = f.stride_px as f64;
    let pixel = bilinear_stencil(f.height, f.width, px.x / s, px.y / s);
    let vol_stencil = |v: &Volume4<T>| {
        let c = volume_coordinate(p, rig, &v.strides).ok()?;
        Some(trilinear_stencil(v.disparities, v.height, v.width, c))
    };
    Some(QueryStencil {
        pixel,
        cost: vol_stencil(layout.cost)?,
        confidence: vol_stencil(layout.confidence)?,
        depth,
        p_z: p.z,
    })
}

/// Inputs of the implicit function for one point.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryFeatures<T> {
    pub pixel_feat: Vec<T>,
    pub cost_feat: Vec<T>,
    pub confidence: T,
    pub z_code: T,
    /// Raw relative offset `Z_E(P)` in meters.
    pub z_offset: T,
    pub in_frustum: bool,
}

impl<T: Real> QueryFeatures<T> {
    pub fn outside(pixel_channels: usize, cost_channels: usize) -> Self {
        Self {
            pixel_feat: vec![T::zero(); pixel_channels],
            cost_feat: vec![T::zero(); cost_channels],
            confidence: T::zero(),
            z_code: T::zero(),
            z_offset: T::zero(),
            in_frustum: false,
        }
    }

    /// Network input layout: `[pixel_feat, cost_feat, confidence, z_code]`.
    pub fn to_input(&self) -> Vec<T> {
        let mut v = Vec::with_capacity(self.pixel_feat.len() + self.cost_feat.len() + 2);
        v.extend_from_slice(&self.pixel_feat);
        v.extend_from_slice(&self.cost_feat);
        v.push(self.confidence);
        v.push(self.z_code);
        v
    }
}

/// Gathers features through a precomputed stencil.
pub fn gather_features<T: Real>(
    st: &QueryStencil,
    pixel_features: &FeatureGrid<T>,
    cost: &Volume4<T>,
    confidence: &Volume4<T>,
    depth: &DepthMap<T>,
    cfg: &FeatureConfig,
) -> QueryFeatures<T> {
    let plane = pixel_features.plane();
    let pixel_feat = (0..pixel_features.channels)
        .map(|c| {
            st.pixel
                .gather(&pixel_features.data[c * plane..(c + 1) * plane])
        })
        .collect();
    let cost_feat = (0..cost.channels)
        .map(|c| st.cost.gather(cost.channel(c)))
        .collect();
    let conf = st.confidence.gather(confidence.channel(0));
    let z = T::lit(st.p_z) - st.depth.gather(&depth.values);
    QueryFeatures {
        pixel_feat,
        cost_feat,
        confidence: conf,
        z_code: cfg.encode(z),
        z_offset: z,
        in_frustum: true,
    }
}

/// `f`'s inputs for `P`: `F_l(π_l(P))`, `Φ(P)`, `Ψ(P)`, `ψ_t(Z_E(P))`.
pub fn assemble_query_features<T: Real>(
    p: &Point3<f64>,
    pixel_features: &FeatureGrid<T>,
    cost: &Volume4<T>,
    confidence: &Volume4<T>,
    depth: &DepthMap<T>,
    rig: &RectifiedRig,
    cfg: &FeatureConfig,
) -> QueryFeatures<T> {
    let layout = SamplingLayout {
        pixel_features,
        cost,
        confidence,
        depth,
    };
    match query_stencil(p, rig, &layout) {
        Some(st) => gather_features(&st, pixel_features, cost, confidence, depth, cfg),
        None => QueryFeatures::outside(pixel_features.channels, cost.channels),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::VolumeStrides;
    use crate::grid::PixelMap;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn psi_values() {
        assert_eq!(psi_t(0.0f64, 50.0), 0.0);
        assert_eq!(psi_t(0.0f64, 3.0), 0.0);
        // 2/(1+e^-5) - 1, high-precision reference 0.98661429815143...
        assert!((psi_t(0.1f64, 50.0) - 0.986614).abs() < 1e-5);
        assert!((psi_t(-0.1f64, 50.0) + 0.986614).abs() < 1e-5);
        assert!(psi_t(1e4f64, 1.0).is_finite());
        assert!(psi_t(-1e4f64, 1.0).is_finite());
        assert!(psi_t(200.0f32, 50.0) <= 1.0);
    }

    #[test]
    fn psi_monotone_on_grid() {
        let xs: Vec<f64> = (0..1000).map(|k| -0.2 + 0.4 * k as f64 / 999.0).collect();
        for w in xs.windows(2) {
            assert!(psi_t(w[1], 50.0) > psi_t(w[0], 50.0));
        }
        for x in xs {
            let v = psi_t(x, 50.0);
            assert!(v > -1.0 && v < 1.0);
        }
    }

    proptest! {
        #[test]
        fn psi_is_odd(x in -10.0f64..10.0, t in 0.1f64..100.0) {
            prop_assert!((psi_t(x, t) + psi_t(-x, t)).abs() <= 1e-12);
        }

        #[test]
        fn psi_derivative_matches_difference(x in -0.1f64..0.1) {
            let h = 1e-6;
            let fd = (psi_t(x + h, 50.0) - psi_t(x - h, 50.0)) / (2.0 * h);
            prop_assert!((fd - psi_t_derivative(x, 50.0)).abs() < 1e-6);
        }
    }

    struct Fixture {
        rig: RectifiedRig,
        fl: FeatureGrid<f64>,
        phi: Volume4<f64>,
        psi: Volume4<f64>,
        depth: DepthMap<f64>,
    }

    fn fixture() -> Fixture {
        let rig = RectifiedRig::new(40.0, 0.1, (7.5, 5.5), (16, 12)).unwrap();
        let strides = VolumeStrides::new(2, 1, 8).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let fl = FeatureGrid::from_data(
            2,
            6,
            8,
            2,
            (0..96).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let phi = Volume4::from_data(
            [3, 8, 6, 8],
            strides,
            (0..3 * 8 * 48)
                .map(|_| rng.random_range(-1.0..1.0))
                .collect(),
        )
        .unwrap();
        let psi = Volume4::from_data(
            [1, 8, 6, 8],
            strides,
            (0..8 * 48).map(|_| rng.random_range(0.0..1.0)).collect(),
        )
        .unwrap();
        let depth = PixelMap::filled(16, 12, 1.0);
        Fixture {
            rig,
            fl,
            phi,
            psi,
            depth,
        }
    }

    #[test]
    fn relative_offset_examples() {
        let f = fixture();
        let mut depth = f.depth.clone();
        depth.values.iter_mut().for_each(|v| *v = 1.9);
        let p = f.rig.unproject_left(6.0, 4.0, 2.0);
        assert!((relative_z_offset(&p, &depth, &f.rig).unwrap() - 0.1).abs() < 1e-12);
        let q = f.rig.unproject_left(6.0, 4.0, 2.25);
        let dz = relative_z_offset(&q, &depth, &f.rig).unwrap()
            - relative_z_offset(&p, &depth, &f.rig).unwrap();
        assert!((dz - 0.25).abs() < 1e-12);
        let outside = f.rig.unproject_left(-3.0, 4.0, 2.0);
        assert!(relative_z_offset(&outside, &depth, &f.rig).is_none());
    }

    #[test]
    fn assemble_far_behind_saturates() {
        let f = fixture();
        let p = f.rig.unproject_left(6.0, 4.0, 1.5);
        let q = assemble_query_features(
            &p,
            &f.fl,
            &f.phi,
            &f.psi,
            &f.depth,
            &f.rig,
            &FeatureConfig::default(),
        );
        assert!(q.in_frustum);
        assert!((q.z_code - 1.0).abs() < 1e-4);
        assert!((q.z_code - psi_t(0.5, 50.0)).abs() <= 1e-12);
        assert_eq!(q.to_input().len(), 2 + 3 + 2);
    }

    #[test]
    fn assemble_flags_out_of_frustum() {
        let f = fixture();
        let cfg = FeatureConfig::default();
        let off_image = f.rig.unproject_left(20.0, 4.0, 1.5);
        assert!(
            !assemble_query_features(&off_image, &f.fl, &f.phi, &f.psi, &f.depth, &f.rig, &cfg)
                .in_frustum
        );
        // disparity bk/z = 4/z >= 8 for z <= 0.5
        let too_close = f.rig.unproject_left(6.0, 4.0, 0.4);
        assert!(
            !assemble_query_features(&too_close, &f.fl, &f.phi, &f.psi, &f.depth, &f.rig, &cfg)
                .in_frustum
        );
        let mut depth = f.depth.clone();
        let k = depth.idx(6, 4);
        depth.valid[k] = false;
        let on_hole = f.rig.unproject_left(6.0, 4.0, 1.5);
        assert!(
            !assemble_query_features(&on_hole, &f.fl, &f.phi, &f.psi, &depth, &f.rig, &cfg)
                .in_frustum
        );
    }

    #[test]
    fn cost_feature_piecewise_linear_along_ray() {
        // Fixed pixel: the cost feature is linear in the disparity coordinate
        // between integer bins.
        let f = fixture();
        let cfg = FeatureConfig::default();
        let at_disp = |d: f64| {
            let p = f.rig.unproject_left(6.0, 4.0, f.rig.bk() / d);
            assemble_query_features(&p, &f.fl, &f.phi, &f.psi, &f.depth, &f.rig, &cfg).cost_feat
        };
        let (a, b, m) = (at_disp(2.0), at_disp(3.0), at_disp(2.4));
        for c in 0..3 {
            assert!((m[c] - (0.6 * a[c] + 0.4 * b[c])).abs() < 1e-12);
        }
    }

    #[test]
    fn sampling_commutes_with_row_shift() {
        let f = fixture();
        let cfg = FeatureConfig::default();
        // Shift all content down by one feature row (two pixels).
        let mut fl = f.fl.clone();
        for c in 0..2 {
            for i in 1..6 {
                for j in 0..8 {
                    let k = fl.idx(c, i, j);
                    fl.data[k] = f.fl.at(c, i - 1, j);
                }
            }
        }
        let mut phi = f.phi.clone();
        for c in 0..3 {
            for d in 0..8 {
                for i in 1..6 {
                    for j in 0..8 {
                        let k = phi.idx(c, d, i, j);
                        phi.data[k] = f.phi.at(c, d, i - 1, j);
                    }
                }
            }
        }
        let p = f.rig.unproject_left(6.3, 3.2, 1.7);
        let q = f.rig.unproject_left(6.3, 5.2, 1.7);
        let a = assemble_query_features(&p, &f.fl, &f.phi, &f.psi, &f.depth, &f.rig, &cfg);
        let b = assemble_query_features(&q, &fl, &phi, &f.psi, &f.depth, &f.rig, &cfg);
        for (x, y) in a
            .pixel_feat
            .iter()
            .zip(&b.pixel_feat)
            .chain(a.cost_feat.iter().zip(&b.cost_feat))
        {
            assert!((x - y).abs() < 1e-5);
        }
    }
}
