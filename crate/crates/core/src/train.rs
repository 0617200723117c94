//! Two-stage training: the depth head on `L_Disp`, then the channel mix and
//! implicit function on `L_Occu` with the depth head frozen.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grad::{disparity_step, occupancy_loss_grad, prepare_queries, Query};
use crate::grid::DisparityMap;
use crate::io::{Checkpoint, Tensor};
use crate::model::{AdamConfig, AdamState, LossWeights, NamedArray, ParamGroup};
use crate::pipeline::{predict_depth, DepthHead, Model, SceneTensors, StereoSetup};
use crate::sampling::{perturb_and_label, sample_surface_points, SampleConfig};
use crate::scalar::Real;
use crate::synth::{
    augment_scene, render_stereo, AugmentConfig, GrayImage, RenderSettings, SdfScene,
};

/// Per-epoch re-posing and re-rendering of the training scenes.
#[derive(Debug, Clone, PartialEq)]
pub struct Augmentation {
    pub pose: AugmentConfig,
    pub render: RenderSettings,
    /// Whether epochs of stage 1 and stage 2 see re-posed scenes.
    pub stages: [bool; 2],
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub stage1_epochs: usize,
    pub stage2_epochs: usize,
    pub stage1_adam: AdamConfig,
    pub stage2_adam: AdamConfig,
    pub loss_weights: LossWeights,
    /// `surface_count` is the number of query points per scene and epoch.
    pub sampling: SampleConfig,
    /// Queries per optimiser step in stage 2.
    pub batch_size: usize,
    pub seed: u64,
    pub augment: Option<Augmentation>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            stage1_epochs: 30,
            stage2_epochs: 30,
            stage1_adam: AdamConfig::default(),
            stage2_adam: AdamConfig::default(),
            loss_weights: LossWeights::default(),
            sampling: SampleConfig::default(),
            batch_size: 512,
            seed: 0,
            augment: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.sampling.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be > 0".into()));
        }
        if self.loss_weights.0.is_empty() {
            return Err(Error::Config(
                "at least one disparity loss weight is required".into(),
            ));
        }
        if let Some(a) = &self.augment {
            a.pose.validate()?;
        }
        Ok(())
    }
}

/// One rendered training example with its ground truth.
#[derive(Debug, Clone)]
pub struct TrainingScene {
    pub scene: SdfScene,
    pub left: GrayImage,
    pub right: GrayImage,
    pub gt_disparity: DisparityMap<f32>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLog {
    pub stage: u8,
    pub epoch: usize,
    pub loss: f64,
}

/// Everything needed to continue training.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState<T> {
    pub model: Model<T>,
    pub score_adam: AdamState<T>,
    pub occupancy_adam: AdamState<T>,
    /// Stage of the next epoch; 3 once training is complete.
    pub stage: u8,
    /// Index of the next epoch within `stage`.
    pub epoch: usize,
}

impl<T: Real> TrainState<T> {
    pub fn new(model: Model<T>, cfg: &TrainConfig) -> Self {
        let score_adam = AdamState::new(cfg.stage1_adam, model.score.param_count());
        let occupancy_adam = AdamState::new(cfg.stage2_adam, model.occupancy_params().len());
        let mut s = Self {
            model,
            score_adam,
            occupancy_adam,
            stage: 1,
            epoch: 0,
        };
        s.skip_finished_stages(cfg);
        s
    }

    pub fn is_done(&self) -> bool {
        self.stage > 2
    }

    fn skip_finished_stages(&mut self, cfg: &TrainConfig) {
        if self.stage == 1 && self.epoch >= cfg.stage1_epochs {
            self.stage = 2;
            self.epoch = 0;
        }
        if self.stage == 2 && self.epoch >= cfg.stage2_epochs {
            self.stage = 3;
            self.epoch = 0;
        }
    }
}

const STATE_KEYS: [&str; 4] = [
    "train.stage",
    "train.epoch",
    "adam.score.step",
    "adam.occupancy.step",
];

impl TrainState<f32> {
    /// Parameters, optimiser moments and progress, plus caller metadata.
    pub fn to_checkpoint(&self, mut meta: BTreeMap<String, String>) -> Result<Checkpoint> {
        let values = [
            self.stage as u64,
            self.epoch as u64,
            self.score_adam.step,
            self.occupancy_adam.step,
        ];
        for (k, v) in STATE_KEYS.iter().zip(values) {
            meta.insert(k.to_string(), v.to_string());
        }
        let m = &self.model;
        let mut tensors = Vec::new();
        for a in m
            .score
            .arrays()
            .into_iter()
            .chain(m.mix.arrays())
            .chain(m.mlp.arrays())
        {
            tensors.push((a.name, Tensor::new(a.dims, a.data)?));
        }
        for (name, adam) in [
            ("score", &self.score_adam),
            ("occupancy", &self.occupancy_adam),
        ] {
            tensors.push((
                format!("adam.{name}.m"),
                Tensor::new(vec![adam.m.len()], adam.m.clone())?,
            ));
            tensors.push((
                format!("adam.{name}.v"),
                Tensor::new(vec![adam.v.len()], adam.v.clone())?,
            ));
        }
        Ok(Checkpoint { meta, tensors })
    }

    /// Restores into `model`, whose shapes must match the stored arrays.
    pub fn from_checkpoint(
        ckpt: &Checkpoint,
        mut model: Model<f32>,
        cfg: &TrainConfig,
    ) -> Result<Self> {
        let load = |arrays: Vec<NamedArray<f32>>| -> Result<Vec<NamedArray<f32>>> {
            arrays
                .into_iter()
                .map(|a| {
                    let t = ckpt.tensor(&a.name)?;
                    Ok(NamedArray {
                        name: a.name,
                        dims: t.dims.clone(),
                        data: t.data.clone(),
                    })
                })
                .collect()
        };
        let score = load(model.score.arrays())?;
        model.score.load_arrays(&score)?;
        let mix = load(model.mix.arrays())?;
        model.mix.load_arrays(&mix)?;
        let mlp = load(model.mlp.arrays())?;
        model.mlp.load_arrays(&mlp)?;
        let mut state = Self::new(model, cfg);
        for (name, adam) in [
            ("score", &mut state.score_adam),
            ("occupancy", &mut state.occupancy_adam),
        ] {
            for (suffix, dst) in [("m", &mut adam.m), ("v", &mut adam.v)] {
                let t = ckpt.tensor(&format!("adam.{name}.{suffix}"))?;
                if t.data.len() != dst.len() {
                    return Err(Error::Dimension(format!(
                        "adam.{name}.{suffix} has {} values, expected {}",
                        t.data.len(),
                        dst.len()
                    )));
                }
                dst.copy_from_slice(&t.data);
            }
        }
        state.stage = ckpt.meta_value(STATE_KEYS[0])?;
        state.epoch = ckpt.meta_value(STATE_KEYS[1])?;
        state.score_adam.step = ckpt.meta_value(STATE_KEYS[2])?;
        state.occupancy_adam.step = ckpt.meta_value(STATE_KEYS[3])?;
        state.skip_finished_stages(cfg);
        Ok(state)
    }
}

fn epoch_rng(seed: u64, stage: u8, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((stage as u64) << 32) | epoch as u64);
    rng
}

/// Separates the augmentation stream from the sampling stream of an epoch.
const AUGMENT_SALT: u64 = 0x5eed_a06e;

/// A scene with the tensors and ground truth derived from its images.
struct View<T> {
    scene: SdfScene,
    tensors: SceneTensors<T>,
    gt: DisparityMap<T>,
    /// Depth head under the frozen stage-2 scoring parameters.
    head: Option<DepthHead<T>>,
}

impl<T: Real> View<T> {
    fn new(
        setup: &StereoSetup,
        scene: SdfScene,
        left: &GrayImage,
        right: &GrayImage,
        gt: &DisparityMap<f32>,
    ) -> Result<Self> {
        let tensors = SceneTensors::from_images(left, right, setup)?;
        let gt = DisparityMap::new(
            gt.width,
            gt.height,
            gt.values.iter().map(|v| T::lit(*v as f64)).collect(),
            gt.valid.clone(),
        )?;
        Ok(Self {
            scene,
            tensors,
            gt,
            head: None,
        })
    }
}

/// Runs epochs over a scene set. Randomness is drawn per epoch from
/// `(seed, stage, epoch)`, so a resumed run continues identically.
pub struct Trainer<'a, T> {
    setup: &'a StereoSetup,
    cfg: &'a TrainConfig,
    base: Vec<View<T>>,
    /// Re-posed views of the current epoch when its stage is augmented.
    augmented: Vec<View<T>>,
    pub state: TrainState<T>,
}

impl<'a, T: Real> Trainer<'a, T> {
    pub fn new(
        setup: &'a StereoSetup,
        cfg: &'a TrainConfig,
        scenes: &[TrainingScene],
        state: TrainState<T>,
    ) -> Result<Self> {
        setup.validate()?;
        cfg.validate()?;
        state.model.validate(setup)?;
        if scenes.is_empty() {
            return Err(Error::Config("training needs at least one scene".into()));
        }
        let base = scenes
            .iter()
            .map(|s| View::new(setup, s.scene.clone(), &s.left, &s.right, &s.gt_disparity))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            setup,
            cfg,
            base,
            augmented: Vec::new(),
            state,
        })
    }

    /// Runs the next epoch; `None` once both stages are complete.
    pub fn step_epoch(&mut self) -> Result<Option<EpochLog>> {
        self.state.skip_finished_stages(self.cfg);
        let (stage, epoch) = (self.state.stage, self.state.epoch);
        let loss = match stage {
            1 | 2 => {
                let augmented = self.prepare_views(stage, epoch)?;
                if stage == 1 {
                    self.stage1_epoch(epoch, augmented)?
                } else {
                    self.stage2_epoch(epoch, augmented)?
                }
            }
            _ => return Ok(None),
        };
        if !loss.is_finite() {
            return Err(Error::NonFinite { loss, stage, epoch });
        }
        self.state.epoch += 1;
        self.state.skip_finished_stages(self.cfg);
        Ok(Some(EpochLog { stage, epoch, loss }))
    }

    pub fn run<F: FnMut(&EpochLog, &TrainState<T>) -> Result<()>>(
        &mut self,
        mut on_epoch: F,
    ) -> Result<()> {
        while let Some(log) = self.step_epoch()? {
            on_epoch(&log, &self.state)?;
        }
        Ok(())
    }

    /// Re-poses and re-renders every scene when `stage` is augmented.
    fn prepare_views(&mut self, stage: u8, epoch: usize) -> Result<bool> {
        let Some(aug) = self
            .cfg
            .augment
            .as_ref()
            .filter(|a| a.stages[stage as usize - 1])
        else {
            return Ok(false);
        };
        let mut rng = epoch_rng(self.cfg.seed ^ AUGMENT_SALT, stage, epoch);
        let seeds: Vec<u64> = self.base.iter().map(|_| rng.random()).collect();
        let setup = self.setup;
        self.augmented = self
            .base
            .par_iter()
            .zip(seeds)
            .map(|(view, seed)| {
                let scene = augment_scene(
                    &mut ChaCha8Rng::seed_from_u64(seed),
                    &view.scene,
                    &setup.rig,
                    &aug.pose,
                );
                let pair = render_stereo(&scene, &setup.rig, &aug.render);
                View::new(setup, scene, &pair.left, &pair.right, &pair.disparity)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(true)
    }

    fn stage1_epoch(&mut self, epoch: usize, augmented: bool) -> Result<f64> {
        let mut rng = epoch_rng(self.cfg.seed, 1, epoch);
        let views = if augmented {
            &self.augmented
        } else {
            &self.base
        };
        let mut order: Vec<usize> = (0..views.len()).collect();
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for &i in &order {
            let model = &mut self.state.model;
            let v = &views[i];
            let head = predict_depth(&v.tensors, &model.score, self.setup)?;
            let (loss, grad) = disparity_step(
                &v.tensors,
                &head,
                &model.score,
                self.setup,
                &v.gt,
                &self.cfg.loss_weights,
            );
            let loss = loss.to_f64_lossy();
            if !loss.is_finite() {
                return Err(Error::NonFinite {
                    loss,
                    stage: 1,
                    epoch,
                });
            }
            total += loss;
            let mut theta = model.score.flatten();
            self.state
                .score_adam
                .update(&mut theta, &grad.flatten(), epoch);
            model.score.unflatten(&theta)?;
        }
        Ok(total / order.len() as f64)
    }

    fn stage2_epoch(&mut self, epoch: usize, augmented: bool) -> Result<f64> {
        let mut rng = epoch_rng(self.cfg.seed, 2, epoch);
        let views = if augmented {
            &mut self.augmented
        } else {
            &mut self.base
        };
        let mut order: Vec<usize> = (0..views.len()).collect();
        order.shuffle(&mut rng);
        let mut batches: Vec<(usize, Vec<Query>)> = Vec::new();
        for &i in &order {
            let v = &mut views[i];
            if v.head.is_none() {
                v.head = Some(predict_depth(
                    &v.tensors,
                    &self.state.model.score,
                    self.setup,
                )?);
            }
            let head = v.head.as_ref().unwrap();
            let surface =
                sample_surface_points(&v.scene, self.cfg.sampling.surface_count, &mut rng)?;
            let batch = perturb_and_label(&surface, &v.scene, &self.cfg.sampling, i, &mut rng);
            let mut queries =
                prepare_queries(&batch.points, &batch.labels, &v.tensors, head, self.setup);
            queries.shuffle(&mut rng);
            for chunk in queries.chunks(self.cfg.batch_size) {
                batches.push((i, chunk.to_vec()));
            }
        }
        batches.shuffle(&mut rng);
        let mut total = 0.0;
        let mut count = 0usize;
        for (i, queries) in &batches {
            let v = &views[*i];
            let head = v.head.as_ref().unwrap();
            let g = occupancy_loss_grad(
                &self.state.model,
                &v.tensors,
                head,
                self.setup,
                queries,
                false,
            )?;
            let loss = g.loss.to_f64_lossy();
            if !loss.is_finite() {
                return Err(Error::NonFinite {
                    loss,
                    stage: 2,
                    epoch,
                });
            }
            total += loss * g.count as f64;
            count += g.count;
            let mut grads = g.mix.flatten();
            grads.extend(g.mlp.flatten());
            let mut theta = self.state.model.occupancy_params();
            self.state.occupancy_adam.update(&mut theta, &grads, epoch);
            self.state.model.set_occupancy_params(&theta)?;
        }
        Ok(if count == 0 {
            0.0
        } else {
            total / count as f64
        })
    }
}

/// Median absolute disparity error over pixels valid in both maps.
pub fn median_disparity_error<T: Real>(
    pred: &DisparityMap<T>,
    gt: &DisparityMap<T>,
) -> Option<f64> {
    let mut e: Vec<f64> = (0..pred.values.len())
        .filter(|&k| pred.valid[k] && gt.valid[k])
        .map(|k| (pred.values[k] - gt.values[k]).to_f64_lossy().abs())
        .collect();
    if e.is_empty() {
        return None;
    }
    e.sort_by(f64::total_cmp);
    let n = e.len();
    Some(if n % 2 == 1 {
        e[n / 2]
    } else {
        0.5 * (e[n / 2 - 1] + e[n / 2])
    })
}
