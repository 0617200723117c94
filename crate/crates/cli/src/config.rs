//! Flat `key = value` configuration with `[section]` headers.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use nalgebra::Point3;
use stereopifu::features::{FeatureConfig, ZEncoding};
use stereopifu::model::{AdamConfig, LossWeights};
use stereopifu::pipeline::StereoSetup;
use stereopifu::sampling::SampleConfig;
use stereopifu::surface::ReconGrid;
use stereopifu::synth::{AugmentConfig, RenderSettings, SceneGenConfig};
use stereopifu::train::{Augmentation, TrainConfig};
use stereopifu::{Aabb, Error, RectifiedRig, Result, VolumeStrides};

/// Everything a pipeline run needs besides file paths.
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub seed: u64,
    pub setup: StereoSetup,
    /// Output channels of the channel mix.
    pub cost_channels: usize,
    pub hidden: Vec<usize>,
    /// Initial quadratic matching weight of the confidence scores.
    pub score_init: f32,
    pub scene_count: usize,
    pub scenes: SceneGenConfig,
    pub render: RenderSettings,
    pub train: TrainConfig,
    pub augment: AugmentSettings,
    pub recon_resolution: usize,
    pub iso: f64,
}

/// Per-epoch re-posing of training scenes; light ranges, workspace and
/// rendering follow the scene settings.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentSettings {
    pub stage1: bool,
    pub stage2: bool,
    pub max_rotation_deg: f64,
    pub max_shift: f64,
    pub scale_min: f64,
    pub scale_max: f64,
}

impl Default for AugmentSettings {
    fn default() -> Self {
        let pose = AugmentConfig::default();
        Self {
            stage1: false,
            stage2: true,
            max_rotation_deg: pose.max_rotation.to_degrees(),
            max_shift: pose.max_shift,
            scale_min: pose.scale_range.0,
            scale_max: pose.scale_range.1,
        }
    }
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let rig =
            RectifiedRig::new(192.0, 0.08, (95.5, 95.5), (192, 192)).expect("valid default rig");
        let strides = VolumeStrides::new(2, 1, 24).expect("valid default strides");
        let stage1_adam = AdamConfig {
            lr: 0.5,
            weight_decay: 0.0,
            decay_factor: 0.3,
            decay_every: 120,
            ..Default::default()
        };
        let stage2_adam = AdamConfig {
            lr: 1e-3,
            decay_every: 80,
            ..Default::default()
        };
        Self {
            seed: 0,
            setup: StereoSetup {
                rig,
                strides,
                smooth_radius: 1,
                features: FeatureConfig {
                    t: 3.0,
                    z_encoding: ZEncoding::Psi,
                },
                context_levels: 3,
            },
            cost_channels: 8,
            hidden: vec![128, 128],
            score_init: 50.0,
            scene_count: 10,
            scenes: SceneGenConfig::default(),
            render: RenderSettings::default(),
            train: TrainConfig {
                stage1_epochs: 300,
                stage2_epochs: 120,
                stage1_adam,
                stage2_adam,
                loss_weights: LossWeights(vec![1.0; 3]),
                sampling: SampleConfig::default(),
                batch_size: 512,
                seed: 0,
                augment: None,
            },
            augment: AugmentSettings::default(),
            recon_resolution: 96,
            iso: 0.5,
        }
    }
}

fn config_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

fn join<T: Display>(xs: &[T]) -> String {
    xs.iter()
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

fn split<T: FromStr>(key: &str, raw: &str) -> Result<Vec<T>> {
    raw.split(',')
        .map(|s| {
            s.trim()
                .parse::<T>()
                .map_err(|_| config_err(format!("{key}: cannot parse {s:?}")))
        })
        .collect()
}

fn point(key: &str, raw: &str) -> Result<Point3<f64>> {
    match split::<f64>(key, raw)?.as_slice() {
        [x, y, z] => Ok(Point3::new(*x, *y, *z)),
        _ => Err(config_err(format!(
            "{key}: expected three comma-separated values"
        ))),
    }
}

/// Parses `[section]` headers and `key = value` lines into `section.key` entries.
pub fn parse_flat(text: &str, path: &Path) -> Result<Vec<(String, String)>> {
    let mut section = String::new();
    let mut out: Vec<(String, String)> = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        let err = |msg: &str| Error::Parse {
            path: path.to_path_buf(),
            line: n + 1,
            msg: msg.to_string(),
        };
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix('[') {
            let name = rest
                .strip_suffix(']')
                .ok_or_else(|| err("unterminated section header"))?
                .trim();
            if name.is_empty() {
                return Err(err("empty section name"));
            }
            section = name.to_string();
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| err("expected `key = value`"))?;
        let k = k.trim();
        if k.is_empty() {
            return Err(err("empty key"));
        }
        let key = if section.is_empty() {
            k.to_string()
        } else {
            format!("{section}.{k}")
        };
        if out.iter().any(|(existing, _)| *existing == key) {
            return Err(err(&format!("duplicate key {key}")));
        }
        out.push((key, v.trim().to_string()));
    }
    Ok(out)
}

struct Entries(BTreeMap<String, String>);

impl Entries {
    fn take<T: FromStr>(&mut self, key: &str, dst: &mut T) -> Result<()> {
        if let Some(raw) = self.0.remove(key) {
            *dst = raw
                .parse()
                .map_err(|_| config_err(format!("{key}: cannot parse {raw:?}")))?;
        }
        Ok(())
    }

    fn take_with<T>(
        &mut self,
        key: &str,
        dst: &mut T,
        f: impl Fn(&str, &str) -> Result<T>,
    ) -> Result<()> {
        if let Some(raw) = self.0.remove(key) {
            *dst = f(key, &raw)?;
        }
        Ok(())
    }

    fn take_adam(&mut self, stage: &str, a: &mut AdamConfig) -> Result<()> {
        self.take(&format!("train.{stage}_lr"), &mut a.lr)?;
        self.take(&format!("train.{stage}_beta1"), &mut a.beta1)?;
        self.take(&format!("train.{stage}_beta2"), &mut a.beta2)?;
        self.take(&format!("train.{stage}_eps"), &mut a.eps)?;
        self.take(&format!("train.{stage}_weight_decay"), &mut a.weight_decay)?;
        self.take(&format!("train.{stage}_decay_factor"), &mut a.decay_factor)?;
        self.take(&format!("train.{stage}_decay_every"), &mut a.decay_every)
    }
}

fn adam_pairs(stage: &str, a: &AdamConfig, out: &mut Vec<(String, String)>) {
    let fields: [(&str, String); 7] = [
        ("lr", a.lr.to_string()),
        ("beta1", a.beta1.to_string()),
        ("beta2", a.beta2.to_string()),
        ("eps", a.eps.to_string()),
        ("weight_decay", a.weight_decay.to_string()),
        ("decay_factor", a.decay_factor.to_string()),
        ("decay_every", a.decay_every.to_string()),
    ];
    for (k, v) in fields {
        out.push((format!("train.{stage}_{k}"), v));
    }
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_pairs(parse_flat(&text, path)?)
    }

    /// Applies `section.key` entries over the defaults; unknown keys are errors.
    pub fn from_pairs(pairs: impl IntoIterator<Item = (String, String)>) -> Result<Self> {
        let mut c = Self::default();
        let mut e = Entries(pairs.into_iter().collect());
        e.take("seed", &mut c.seed)?;

        let rig = c.setup.rig;
        let (mut width, mut height, mut focal, mut baseline) =
            (rig.width, rig.height, rig.focal_px, rig.baseline_m);
        let (mut cx, mut cy) = (rig.cx, rig.cy);
        e.take("camera.width", &mut width)?;
        e.take("camera.height", &mut height)?;
        e.take("camera.focal_px", &mut focal)?;
        e.take("camera.baseline_m", &mut baseline)?;
        e.take("camera.cx", &mut cx)?;
        e.take("camera.cy", &mut cy)?;
        c.setup.rig = RectifiedRig::new(focal, baseline, (cx, cy), (width, height))?;

        let s = c.setup.strides;
        let (mut ss, mut ds, mut md) = (s.spatial_stride, s.disparity_stride, s.max_disparity);
        e.take("volume.spatial_stride", &mut ss)?;
        e.take("volume.disparity_stride", &mut ds)?;
        e.take("volume.max_disparity", &mut md)?;
        c.setup.strides = VolumeStrides::new(ss, ds, md)?;
        e.take("volume.smooth_radius", &mut c.setup.smooth_radius)?;

        e.take("features.t", &mut c.setup.features.t)?;
        e.take_with(
            "features.z_encoding",
            &mut c.setup.features.z_encoding,
            |k, v| match v {
                "psi" => Ok(ZEncoding::Psi),
                "raw" => Ok(ZEncoding::Raw),
                _ => Err(config_err(format!(
                    "{k}: expected `psi` or `raw`, got {v:?}"
                ))),
            },
        )?;
        e.take("features.context_levels", &mut c.setup.context_levels)?;

        e.take("model.cost_channels", &mut c.cost_channels)?;
        e.take_with("model.hidden", &mut c.hidden, split)?;
        e.take("model.score_init", &mut c.score_init)?;

        let g = &mut c.scenes;
        e.take("scenes.count", &mut c.scene_count)?;
        e.take("scenes.min_primitives", &mut g.min_primitives)?;
        e.take("scenes.max_primitives", &mut g.max_primitives)?;
        e.take("scenes.depth_min", &mut g.depth_range.0)?;
        e.take("scenes.depth_max", &mut g.depth_range.1)?;
        e.take("scenes.size_min", &mut g.size_range.0)?;
        e.take("scenes.size_max", &mut g.size_range.1)?;
        e.take("scenes.lateral_fraction", &mut g.lateral_fraction)?;
        let mut cone_deg = g.light_cone.to_degrees();
        e.take("scenes.light_cone_deg", &mut cone_deg)?;
        g.light_cone = cone_deg.to_radians();
        e.take("scenes.intensity_min", &mut g.intensity_range.0)?;
        e.take("scenes.intensity_max", &mut g.intensity_range.1)?;
        e.take("scenes.ambient", &mut c.render.ambient)?;

        let mut ws = g.workspace;
        e.take_with("workspace.min", &mut ws.min, point)?;
        e.take_with("workspace.max", &mut ws.max, point)?;
        g.workspace = ws;
        c.train.sampling.bounds = ws;

        let sm = &mut c.train.sampling;
        e.take("sampling.surface_count", &mut sm.surface_count)?;
        e.take("sampling.gaussian_sigma", &mut sm.gaussian_sigma)?;
        e.take("sampling.uniform_ratio", &mut sm.uniform_ratio)?;

        let t = &mut c.train;
        e.take("train.stage1_epochs", &mut t.stage1_epochs)?;
        e.take("train.stage2_epochs", &mut t.stage2_epochs)?;
        e.take_adam("stage1", &mut t.stage1_adam)?;
        e.take_adam("stage2", &mut t.stage2_adam)?;
        e.take("train.batch_size", &mut t.batch_size)?;
        let mut weights = t.loss_weights.0.clone();
        e.take_with("train.loss_weights", &mut weights, split)?;
        t.loss_weights = LossWeights(weights);

        let a = &mut c.augment;
        e.take("augment.stage1", &mut a.stage1)?;
        e.take("augment.stage2", &mut a.stage2)?;
        e.take("augment.max_rotation_deg", &mut a.max_rotation_deg)?;
        e.take("augment.max_shift", &mut a.max_shift)?;
        e.take("augment.scale_min", &mut a.scale_min)?;
        e.take("augment.scale_max", &mut a.scale_max)?;

        e.take("recon.resolution", &mut c.recon_resolution)?;
        e.take("recon.iso", &mut c.iso)?;

        if let Some(k) = e.0.keys().next() {
            return Err(config_err(format!("unknown key {k:?}")));
        }
        c.validate()?;
        Ok(c)
    }

    /// Every setting as `section.key` pairs; `from_pairs` inverts this exactly.
    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let r = &self.setup.rig;
        let s = &self.setup.strides;
        let g = &self.scenes;
        let ws = &g.workspace;
        let sm = &self.train.sampling;
        let t = &self.train;
        let mut out: Vec<(String, String)> = vec![
            ("seed".into(), self.seed.to_string()),
            ("camera.width".into(), r.width.to_string()),
            ("camera.height".into(), r.height.to_string()),
            ("camera.focal_px".into(), r.focal_px.to_string()),
            ("camera.baseline_m".into(), r.baseline_m.to_string()),
            ("camera.cx".into(), r.cx.to_string()),
            ("camera.cy".into(), r.cy.to_string()),
            ("volume.spatial_stride".into(), s.spatial_stride.to_string()),
            (
                "volume.disparity_stride".into(),
                s.disparity_stride.to_string(),
            ),
            ("volume.max_disparity".into(), s.max_disparity.to_string()),
            (
                "volume.smooth_radius".into(),
                self.setup.smooth_radius.to_string(),
            ),
            ("features.t".into(), self.setup.features.t.to_string()),
            (
                "features.z_encoding".into(),
                match self.setup.features.z_encoding {
                    ZEncoding::Psi => "psi",
                    ZEncoding::Raw => "raw",
                }
                .into(),
            ),
            (
                "features.context_levels".into(),
                self.setup.context_levels.to_string(),
            ),
            ("model.cost_channels".into(), self.cost_channels.to_string()),
            ("model.hidden".into(), join(&self.hidden)),
            ("model.score_init".into(), self.score_init.to_string()),
            ("scenes.count".into(), self.scene_count.to_string()),
            ("scenes.min_primitives".into(), g.min_primitives.to_string()),
            ("scenes.max_primitives".into(), g.max_primitives.to_string()),
            ("scenes.depth_min".into(), g.depth_range.0.to_string()),
            ("scenes.depth_max".into(), g.depth_range.1.to_string()),
            ("scenes.size_min".into(), g.size_range.0.to_string()),
            ("scenes.size_max".into(), g.size_range.1.to_string()),
            (
                "scenes.lateral_fraction".into(),
                g.lateral_fraction.to_string(),
            ),
            (
                "scenes.light_cone_deg".into(),
                g.light_cone.to_degrees().to_string(),
            ),
            (
                "scenes.intensity_min".into(),
                g.intensity_range.0.to_string(),
            ),
            (
                "scenes.intensity_max".into(),
                g.intensity_range.1.to_string(),
            ),
            ("scenes.ambient".into(), self.render.ambient.to_string()),
            ("workspace.min".into(), join(ws.min.coords.as_slice())),
            ("workspace.max".into(), join(ws.max.coords.as_slice())),
            (
                "sampling.surface_count".into(),
                sm.surface_count.to_string(),
            ),
            (
                "sampling.gaussian_sigma".into(),
                sm.gaussian_sigma.to_string(),
            ),
            (
                "sampling.uniform_ratio".into(),
                sm.uniform_ratio.to_string(),
            ),
            ("train.stage1_epochs".into(), t.stage1_epochs.to_string()),
            ("train.stage2_epochs".into(), t.stage2_epochs.to_string()),
        ];
        adam_pairs("stage1", &t.stage1_adam, &mut out);
        adam_pairs("stage2", &t.stage2_adam, &mut out);
        let a = &self.augment;
        out.extend([
            ("train.batch_size".into(), t.batch_size.to_string()),
            ("train.loss_weights".into(), join(&t.loss_weights.0)),
            ("augment.stage1".into(), a.stage1.to_string()),
            ("augment.stage2".into(), a.stage2.to_string()),
            (
                "augment.max_rotation_deg".into(),
                a.max_rotation_deg.to_string(),
            ),
            ("augment.max_shift".into(), a.max_shift.to_string()),
            ("augment.scale_min".into(), a.scale_min.to_string()),
            ("augment.scale_max".into(), a.scale_max.to_string()),
            ("recon.resolution".into(), self.recon_resolution.to_string()),
            ("recon.iso".into(), self.iso.to_string()),
        ]);
        out
    }

    /// Canonical text form, grouped by section.
    pub fn to_text(&self) -> String {
        let mut text = String::new();
        let mut current = String::new();
        for (key, value) in self.to_pairs() {
            let (section, k) = key.split_once('.').unwrap_or(("", key.as_str()));
            if section != current {
                text.push_str(&format!("\n[{section}]\n"));
                current = section.to_string();
            }
            text.push_str(&format!("{k} = {value}\n"));
        }
        text.trim_start().to_string()
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    /// Training settings with the run seed and augmentation applied.
    pub fn train_config(&self) -> TrainConfig {
        let a = &self.augment;
        let augment = (a.stage1 || a.stage2).then(|| Augmentation {
            pose: AugmentConfig {
                max_rotation: a.max_rotation_deg.to_radians(),
                max_shift: a.max_shift,
                scale_range: (a.scale_min, a.scale_max),
                light_cone: self.scenes.light_cone,
                intensity_range: self.scenes.intensity_range,
                workspace: self.workspace(),
            },
            render: self.render,
            stages: [a.stage1, a.stage2],
        });
        TrainConfig {
            seed: self.seed,
            augment,
            ..self.train.clone()
        }
    }

    pub fn workspace(&self) -> Aabb {
        self.scenes.workspace
    }

    pub fn recon_grid(&self) -> Result<ReconGrid> {
        let ws = self.workspace();
        Ok(ReconGrid::new(ws.min, ws.max, [self.recon_resolution; 3])?.with_iso(self.iso))
    }

    pub fn validate(&self) -> Result<()> {
        self.setup.validate()?;
        let rig = &self.setup.rig;
        if self.cost_channels == 0 {
            return Err(config_err("model.cost_channels must be > 0"));
        }
        if self.hidden.contains(&0) {
            return Err(config_err("model.hidden widths must be > 0"));
        }
        if !(self.score_init.is_finite() && self.score_init > 0.0) {
            return Err(config_err("model.score_init must be > 0"));
        }
        let g = &self.scenes;
        if g.min_primitives == 0 || g.min_primitives > g.max_primitives {
            return Err(config_err(
                "scenes: need 1 <= min_primitives <= max_primitives",
            ));
        }
        if !(g.depth_range.0 > 0.0 && g.depth_range.0 <= g.depth_range.1) {
            return Err(config_err("scenes: need 0 < depth_min <= depth_max"));
        }
        if !(g.size_range.0 > 0.0 && g.size_range.0 <= g.size_range.1) {
            return Err(config_err("scenes: need 0 < size_min <= size_max"));
        }
        if !(g.intensity_range.0 >= 0.0 && g.intensity_range.0 <= g.intensity_range.1) {
            return Err(config_err(
                "scenes: need 0 <= intensity_min <= intensity_max",
            ));
        }
        if !(0.0..1.0).contains(&self.render.ambient) {
            return Err(config_err("scenes.ambient must lie in [0, 1)"));
        }
        let near = g.workspace.min.z;
        let max_disp = rig.focal_px * rig.baseline_m / near;
        if max_disp >= self.setup.strides.max_disparity as f64 {
            return Err(config_err(format!(
                "workspace.min z = {near} projects to disparity {max_disp:.2} px, beyond volume.max_disparity = {}; move the workspace back or raise max_disparity",
                self.setup.strides.max_disparity
            )));
        }
        self.train_config().validate()?;
        self.recon_grid()?.validate()?;
        Ok(())
    }
}
