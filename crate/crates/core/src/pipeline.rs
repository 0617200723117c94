//! Per-scene volumes, the depth head and the assembled occupancy model.

use nalgebra::Point3;
use rand::Rng;
use rayon::prelude::*;

use crate::cost::{
    aggregate_cost_volume, box_smooth, build_cost_volume, confidence_volume,
    disparity_map_to_depth, soft_argmax_disparity, ChannelMix, ScoreParams,
};
use crate::descriptors::{self, describe, describe_levels};
use crate::error::{Error, Result};
use crate::features::{assemble_query_features, FeatureConfig};
use crate::geometry::{RectifiedRig, VolumeStrides};
use crate::grid::{DepthMap, DisparityMap, FeatureGrid, Volume4};
use crate::model::{Mlp, ParamGroup};
use crate::scalar::Real;
use crate::surface::OccupancyField;
use crate::synth::GrayImage;

/// Camera, volume layout and fixed feature settings shared by every scene.
#[derive(Debug, Clone, PartialEq)]
pub struct StereoSetup {
    pub rig: RectifiedRig,
    pub strides: VolumeStrides,
    pub smooth_radius: usize,
    pub features: FeatureConfig,
    /// Coarser descriptor levels added to the pixel-aligned feature only.
    pub context_levels: usize,
}

impl StereoSetup {
    pub fn validate(&self) -> Result<()> {
        self.rig.validate()?;
        self.strides.validate_for(&self.rig)?;
        if !(self.features.t > 0.0) {
            return Err(Error::Config(format!(
                "feature t = {} must be > 0",
                self.features.t
            )));
        }
        Ok(())
    }

    pub fn pixel_channels(&self) -> usize {
        3 * (descriptors::LEVELS + self.context_levels)
    }

    pub fn cost_channels(&self) -> usize {
        descriptors::CHANNELS
    }

    pub fn bins(&self) -> usize {
        self.strides.disparity_bins()
    }
}

/// Quantities that depend only on the image pair.
#[derive(Debug, Clone)]
pub struct SceneTensors<T> {
    pub left_features: FeatureGrid<T>,
    /// `Φ′`
    pub cost: Volume4<T>,
    /// `Φ′` after box smoothing, before the channel mix.
    pub smoothed: Volume4<T>,
    /// Full-resolution left-image foreground.
    pub foreground: Vec<bool>,
}

impl<T: Real> SceneTensors<T> {
    pub fn from_images(left: &GrayImage, right: &GrayImage, setup: &StereoSetup) -> Result<Self> {
        let (w, h) = (setup.rig.width, setup.rig.height);
        for img in [left, right] {
            if img.width != w || img.height != h {
                return Err(Error::Dimension(format!(
                    "image is {}x{}, rig expects {w}x{h}",
                    img.width, img.height
                )));
            }
        }
        let s = setup.strides.spatial_stride;
        let left_features =
            describe_levels::<T>(left, s, descriptors::LEVELS + setup.context_levels);
        let stereo_left = if setup.context_levels == 0 {
            left_features.clone()
        } else {
            let n = descriptors::CHANNELS * left_features.plane();
            FeatureGrid::from_data(
                descriptors::CHANNELS,
                left_features.height,
                left_features.width,
                s,
                left_features.data[..n].to_vec(),
            )?
        };
        let right_features = describe::<T>(right, s);
        let cost = build_cost_volume(&stereo_left, &right_features, setup.strides)?;
        let smoothed = box_smooth(&cost, setup.smooth_radius);
        Ok(Self {
            left_features,
            cost,
            smoothed,
            foreground: left.foreground(),
        })
    }
}

/// `Ψ`, the predicted disparity `d^Pred` and depth `E`.
#[derive(Debug, Clone)]
pub struct DepthHead<T> {
    pub psi: Volume4<T>,
    pub disparity: DisparityMap<T>,
    pub depth: DepthMap<T>,
}

pub fn predict_depth<T: Real>(
    tensors: &SceneTensors<T>,
    score: &ScoreParams<T>,
    setup: &StereoSetup,
) -> Result<DepthHead<T>> {
    let psi = confidence_volume(&tensors.cost, score)?;
    let mut disparity = soft_argmax_disparity(&psi, setup.rig.width, setup.rig.height);
    for (v, fg) in disparity.valid.iter_mut().zip(&tensors.foreground) {
        *v &= *fg;
    }
    let depth = disparity_map_to_depth(&disparity, &setup.rig);
    Ok(DepthHead {
        psi,
        disparity,
        depth,
    })
}

/// All learned parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    pub score: ScoreParams<T>,
    pub mix: ChannelMix<T>,
    pub mlp: Mlp<T>,
}

impl<T: Real> Model<T> {
    /// `hidden` are the MLP hidden widths; the input width follows from the setup.
    pub fn new<R: Rng + ?Sized>(
        setup: &StereoSetup,
        cost_channels: usize,
        hidden: &[usize],
        rng: &mut R,
    ) -> Result<Self> {
        let c_in = setup.cost_channels();
        let mut widths = vec![setup.pixel_channels() + cost_channels + 2];
        widths.extend_from_slice(hidden);
        widths.push(1);
        let mut mix = ChannelMix::zeros(c_in, cost_channels);
        let scale = (1.0 / c_in as f64).sqrt();
        for w in mix.weight.iter_mut() {
            *w = T::lit(rng.random_range(-scale..scale));
        }
        Ok(Self {
            score: ScoreParams::new(c_in, setup.bins(), T::one()),
            mix,
            mlp: Mlp::random(&widths, rng)?,
        })
    }

    pub fn validate(&self, setup: &StereoSetup) -> Result<()> {
        let c_in = setup.cost_channels();
        if self.score.linear.len() != c_in || self.score.bin_bias.len() != setup.bins() {
            return Err(Error::Dimension(
                "score parameters do not match the setup".into(),
            ));
        }
        if self.mix.c_in != c_in
            || self.mlp.input_width() != setup.pixel_channels() + self.mix.c_out + 2
        {
            return Err(Error::Dimension(
                "mix / mlp widths do not match the setup".into(),
            ));
        }
        Ok(())
    }

    /// Flat layout: score, mix, mlp.
    pub fn occupancy_params(&self) -> Vec<T> {
        let mut v = self.mix.flatten();
        v.extend(self.mlp.flatten());
        v
    }

    pub fn set_occupancy_params(&mut self, flat: &[T]) -> Result<()> {
        let n = self.mix.param_count();
        if flat.len() < n {
            return Err(Error::Dimension(
                "occupancy parameter vector too short".into(),
            ));
        }
        self.mix.unflatten(&flat[..n])?;
        self.mlp.unflatten(&flat[n..])
    }
}

/// A scene ready for dense occupancy queries.
pub struct PreparedScene<'a, T> {
    pub model: &'a Model<T>,
    pub setup: &'a StereoSetup,
    pub tensors: SceneTensors<T>,
    pub head: DepthHead<T>,
    /// Aggregated cost volume `Φ`.
    pub phi: Volume4<T>,
}

impl<'a, T: Real> PreparedScene<'a, T> {
    pub fn new(
        model: &'a Model<T>,
        setup: &'a StereoSetup,
        left: &GrayImage,
        right: &GrayImage,
    ) -> Result<Self> {
        model.validate(setup)?;
        let tensors = SceneTensors::from_images(left, right, setup)?;
        let head = predict_depth(&tensors, &model.score, setup)?;
        let phi = aggregate_cost_volume(&tensors.cost, setup.smooth_radius, &model.mix)?;
        Ok(Self {
            model,
            setup,
            tensors,
            head,
            phi,
        })
    }

    /// `f(P)`; zero outside the viewing volume.
    pub fn occupancy_at(&self, p: &Point3<f64>) -> T {
        let q = assemble_query_features(
            p,
            &self.tensors.left_features,
            &self.phi,
            &self.head.psi,
            &self.head.depth,
            &self.setup.rig,
            &self.setup.features,
        );
        if !q.in_frustum {
            return T::zero();
        }
        self.model.mlp.forward(&q.to_input()).unwrap_or(T::zero())
    }
}

impl<T: Real> OccupancyField for PreparedScene<'_, T> {
    fn occupancy(&self, points: &[Point3<f64>]) -> Vec<f64> {
        points
            .par_iter()
            .map(|p| self.occupancy_at(p).to_f64_lossy())
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::{gather_features, query_stencil, SamplingLayout};
    use crate::synth::{render_stereo, Primitive, RenderSettings, SdfScene};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn small_setup() -> StereoSetup {
        StereoSetup {
            rig: RectifiedRig::new(64.0, 0.1, (31.5, 23.5), (64, 48)).unwrap(),
            strides: VolumeStrides::new(2, 1, 12).unwrap(),
            smooth_radius: 1,
            features: FeatureConfig::default(),
            context_levels: 1,
        }
    }

    pub(crate) fn small_scene() -> SdfScene {
        SdfScene::new(vec![Primitive::Sphere {
            center: Point3::new(0.0, 0.0, 1.0),
            radius: 0.25,
        }])
        .unwrap()
    }

    #[test]
    fn commuted_mix_matches_materialized_volume() {
        let setup = small_setup();
        let pair = render_stereo(&small_scene(), &setup.rig, &RenderSettings::default());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let model = Model::<f64>::new(&setup, 4, &[8], &mut rng).unwrap();
        let prep = PreparedScene::new(&model, &setup, &pair.left, &pair.right).unwrap();
        let mut checked = 0;
        for _ in 0..200 {
            let p = Point3::new(
                rng.random_range(-0.3..0.3),
                rng.random_range(-0.3..0.3),
                rng.random_range(0.7..1.3),
            );
            let layout = SamplingLayout {
                pixel_features: &prep.tensors.left_features,
                cost: &prep.tensors.smoothed,
                confidence: &prep.head.psi,
                depth: &prep.head.depth,
            };
            let Some(st) = query_stencil(&p, &setup.rig, &layout) else {
                continue;
            };
            let raw = gather_features(
                &st,
                layout.pixel_features,
                layout.cost,
                layout.confidence,
                layout.depth,
                &setup.features,
            );
            let commuted = model.mix.apply(&raw.cost_feat);
            let direct = assemble_query_features(
                &p,
                &prep.tensors.left_features,
                &prep.phi,
                &prep.head.psi,
                &prep.head.depth,
                &setup.rig,
                &setup.features,
            );
            for (a, b) in commuted.iter().zip(&direct.cost_feat) {
                assert!((a - b).abs() < 1e-12);
            }
            checked += 1;
        }
        assert!(checked > 20);
    }

    #[test]
    fn occupancy_is_zero_outside_and_bounded() {
        let setup = small_setup();
        let pair = render_stereo(&small_scene(), &setup.rig, &RenderSettings::default());
        let model = Model::<f32>::new(&setup, 4, &[8], &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let prep = PreparedScene::new(&model, &setup, &pair.left, &pair.right).unwrap();
        assert_eq!(prep.occupancy_at(&Point3::new(5.0, 0.0, 1.0)), 0.0);
        assert_eq!(prep.occupancy_at(&Point3::new(0.0, 0.0, -1.0)), 0.0);
        let v = prep.occupancy(&[Point3::new(0.0, 0.0, 0.9), Point3::new(0.0, 0.0, 1.0)]);
        assert!(v.iter().all(|x| (0.0..=1.0).contains(x)));
    }

    #[test]
    fn depth_head_masks_background() {
        let setup = small_setup();
        let pair = render_stereo(&small_scene(), &setup.rig, &RenderSettings::default());
        let t = SceneTensors::<f64>::from_images(&pair.left, &pair.right, &setup).unwrap();
        let head = predict_depth(&t, &ScoreParams::new(9, 12, 1.0), &setup).unwrap();
        assert!(head
            .disparity
            .valid
            .iter()
            .zip(&t.foreground)
            .all(|(v, f)| !*v || *f));
        assert!(head.depth.valid_count() > 0);
        assert!(!head.depth.valid[0]);
    }

    #[test]
    fn rejects_mismatched_images() {
        let setup = small_setup();
        let img = GrayImage::new(10, 10);
        assert!(SceneTensors::<f32>::from_images(&img, &img, &setup).is_err());
    }
}
