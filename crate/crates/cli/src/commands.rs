//! The five pipeline commands, callable in-process.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::Write;
use std::path::{Path, PathBuf};

use nalgebra::{Point3, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use stereopifu::grid::{DepthMap, DisparityMap};
use stereopifu::io::{read_pgm, write_pgm, Checkpoint, Tensor};
use stereopifu::pipeline::{predict_depth, Model, PreparedScene, SceneTensors};
use stereopifu::surface::{
    chamfer, evaluate_field, marching_cubes, mesh_scene, OccupancyField, OracleField, ReconGrid,
    SurfaceMetrics, TriangleMesh, DEFAULT_METRIC_SAMPLES,
};
use stereopifu::synth::{random_scene, render_stereo, GrayImage, SdfScene};
use stereopifu::train::{EpochLog, TrainState, Trainer};
use stereopifu::{Error, RectifiedRig, Result};

use crate::config::PipelineConfig;
use crate::dataset::{load_dataset, map_tensor, scene_path, Manifest, MANIFEST};

pub const CHECKPOINT: &str = "model.ckpt";
pub const TRAIN_LOG: &str = "train_log.csv";
pub const MESH: &str = "mesh.obj";
pub const DEPTH_PRED: &str = "depth_pred.t32";
pub const REPORT: &str = "report.txt";
pub const DISPARITY: &str = "disparity.t32";
pub const DEPTH: &str = "depth.t32";
pub const NORMALS: &str = "normals.t32";
/// Marching-cubes resolution used to mesh analytic ground truth.
pub const GT_RESOLUTION: usize = 256;
const LOG_HEADER: &str = "epoch,stage,loss";
const CONFIG_PREFIX: &str = "config.";

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Renders `cfg.scene_count` scenes into `out` and writes the manifest.
pub fn cmd_gen(cfg: &PipelineConfig, out: &Path) -> Result<Manifest> {
    cfg.validate()?;
    fs::create_dir_all(out)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut manifest = Manifest::default();
    for i in 0..cfg.scene_count {
        let name = format!("scene_{i:03}");
        let scene = random_scene(&mut rng, &cfg.setup.rig, &cfg.scenes);
        let pair = render_stereo(&scene, &cfg.setup.rig, &cfg.render);
        write_pgm(&scene_path(out, &name, "_l.pgm"), &pair.left)?;
        write_pgm(&scene_path(out, &name, "_r.pgm"), &pair.right)?;
        map_tensor(&pair.depth).save(&scene_path(out, &name, "_depth.t32"))?;
        map_tensor(&pair.disparity).save(&scene_path(out, &name, "_disp.t32"))?;
        fs::write(scene_path(out, &name, "_scene.txt"), scene.to_text())?;
        manifest.scenes.push(name);
    }
    fs::write(out.join(MANIFEST), manifest.to_text())?;
    Ok(manifest)
}

/// An untrained model with the configured shapes and score initialisation.
pub fn initial_model(cfg: &PipelineConfig) -> Result<Model<f32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = Model::<f32>::new(&cfg.setup, cfg.cost_channels, &cfg.hidden, &mut rng)?;
    model
        .score
        .quadratic
        .iter_mut()
        .for_each(|q| *q = cfg.score_init);
    Ok(model)
}

fn checkpoint_config(ckpt: &Checkpoint) -> Result<PipelineConfig> {
    PipelineConfig::from_pairs(ckpt.meta.iter().filter_map(|(k, v)| {
        k.strip_prefix(CONFIG_PREFIX)
            .map(|k| (k.to_string(), v.clone()))
    }))
}

/// The configuration a checkpoint was trained with, and its model.
pub fn load_model(path: &Path) -> Result<(PipelineConfig, Model<f32>)> {
    let ckpt = Checkpoint::load(path)?;
    let cfg = checkpoint_config(&ckpt)?;
    let state = TrainState::from_checkpoint(&ckpt, initial_model(&cfg)?, &cfg.train_config())?;
    Ok((cfg, state.model))
}

fn parse_log(text: &str) -> Result<Vec<EpochLog>> {
    let bad = |line: &str| Error::Format(format!("malformed training log line {line:?}"));
    let mut lines = text.lines();
    if lines.next() != Some(LOG_HEADER) {
        return Err(Error::Format(format!(
            "training log must start with {LOG_HEADER:?}"
        )));
    }
    lines
        .map(|line| {
            let f: Vec<&str> = line.split(',').collect();
            let [epoch, stage, loss] = f[..] else {
                return Err(bad(line));
            };
            Ok(EpochLog {
                epoch: epoch.parse().map_err(|_| bad(line))?,
                stage: stage.parse().map_err(|_| bad(line))?,
                loss: loss.parse().map_err(|_| bad(line))?,
            })
        })
        .collect()
}

/// Reads a `train_log.csv` back.
pub fn read_train_log(path: &Path) -> Result<Vec<EpochLog>> {
    parse_log(&fs::read_to_string(path)?)
}

fn log_line(l: &EpochLog) -> String {
    format!("{},{},{}\n", l.epoch, l.stage, l.loss)
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Continue from this checkpoint instead of a fresh model.
    pub resume: Option<PathBuf>,
    /// Stop after this many epochs in this invocation.
    pub max_epochs: Option<usize>,
}

/// Two-stage training on the scenes in `data`. Writes a checkpoint after
/// every epoch and appends to the loss log.
pub fn cmd_train(
    cfg: &PipelineConfig,
    data: &Path,
    out: &Path,
    opts: &TrainOptions,
) -> Result<Vec<EpochLog>> {
    cfg.validate()?;
    let (_, scenes) = load_dataset(data)?;
    if scenes.is_empty() {
        return Err(Error::Config(format!(
            "{} lists no scenes",
            data.join(MANIFEST).display()
        )));
    }
    let train_cfg = cfg.train_config();
    let (state, mut history) = match &opts.resume {
        None => (TrainState::new(initial_model(cfg)?, &train_cfg), Vec::new()),
        Some(path) => {
            let ckpt = Checkpoint::load(path)?;
            let saved = checkpoint_config(&ckpt)?;
            if (&saved.setup, saved.cost_channels, &saved.hidden)
                != (&cfg.setup, cfg.cost_channels, &cfg.hidden)
            {
                return Err(Error::Config(format!(
                    "{} was trained with a different camera, volume, feature or model configuration",
                    path.display()
                )));
            }
            let state = TrainState::from_checkpoint(&ckpt, initial_model(cfg)?, &train_cfg)?;
            let log_path = path.with_file_name(TRAIN_LOG);
            let mut history = if log_path.exists() {
                read_train_log(&log_path)?
            } else {
                Vec::new()
            };
            history.retain(|l| (l.stage, l.epoch) < (state.stage, state.epoch));
            (state, history)
        }
    };
    fs::create_dir_all(out)?;
    let mut log_text = String::from(LOG_HEADER);
    log_text.push('\n');
    history.iter().for_each(|l| log_text.push_str(&log_line(l)));
    fs::write(out.join(TRAIN_LOG), &log_text)?;
    let meta: BTreeMap<String, String> = cfg
        .to_pairs()
        .into_iter()
        .map(|(k, v)| (format!("{CONFIG_PREFIX}{k}"), v))
        .collect();
    let mut trainer = Trainer::new(&cfg.setup, &train_cfg, &scenes, state)?;
    write_atomic(
        &out.join(CHECKPOINT),
        &trainer.state.to_checkpoint(meta.clone())?.to_bytes(),
    )?;
    let mut log = File::options().append(true).open(out.join(TRAIN_LOG))?;
    let mut ran = 0;
    while opts.max_epochs.is_none_or(|m| ran < m) {
        let Some(entry) = trainer.step_epoch()? else {
            break;
        };
        ran += 1;
        write_atomic(
            &out.join(CHECKPOINT),
            &trainer.state.to_checkpoint(meta.clone())?.to_bytes(),
        )?;
        log.write_all(log_line(&entry).as_bytes())?;
        history.push(entry);
    }
    Ok(history)
}

/// Number of grid nodes whose projection lands inside the image and the disparity range.
pub fn nodes_in_view(grid: &ReconGrid, cfg: &PipelineConfig) -> usize {
    let rig = &cfg.setup.rig;
    let d_max = cfg.setup.strides.max_disparity as f64;
    grid.nodes()
        .iter()
        .filter(|p| {
            let Ok(uv) = rig.project_left(p) else {
                return false;
            };
            let Ok(d) = rig.depth_to_disparity(p.z) else {
                return false;
            };
            (0.0..=(rig.width - 1) as f64).contains(&uv.x)
                && (0.0..=(rig.height - 1) as f64).contains(&uv.y)
                && d < d_max
        })
        .count()
}

#[derive(Debug, Clone)]
pub struct ReconOutput {
    pub mesh: TriangleMesh,
    pub grid: ReconGrid,
    pub warnings: Vec<String>,
}

fn read_pair(left: &Path, right: &Path) -> Result<(GrayImage, GrayImage)> {
    Ok((read_pgm(left)?, read_pgm(right)?))
}

/// Predicted depth of the left view, masked pixels set to 0.
fn depth_tensor(depth: &DepthMap<f32>) -> Tensor {
    map_tensor(depth)
}

#[derive(Debug, Clone, Default)]
pub struct ReconOptions {
    /// Replaces the learned field by the scene's exact occupancy.
    pub oracle: Option<PathBuf>,
    /// Overrides the checkpoint's workspace and grid settings.
    pub grid: Option<ReconGrid>,
}

/// Full inference: depth head, occupancy field on the grid, marching cubes.
/// Writes `mesh.obj` and `depth_pred.t32` into `out`.
pub fn cmd_reconstruct(
    model_path: &Path,
    left: &Path,
    right: &Path,
    out: &Path,
    opts: &ReconOptions,
) -> Result<ReconOutput> {
    let (cfg, model) = load_model(model_path)?;
    let (l, r) = read_pair(left, right)?;
    let grid = match opts.grid {
        Some(g) => g,
        None => cfg.recon_grid()?,
    };
    grid.validate()?;
    let prepared = PreparedScene::new(&model, &cfg.setup, &l, &r)?;
    let oracle_scene = opts.oracle.as_deref().map(SdfScene::load).transpose()?;
    let field: &dyn OccupancyField = match &oracle_scene {
        Some(scene) => &OracleField(scene),
        None => &prepared,
    };
    let mut warnings = Vec::new();
    if nodes_in_view(&grid, &cfg) == 0 && oracle_scene.is_none() {
        warnings.push(
            "reconstruction grid lies outside the camera frustum; the mesh is empty".to_string(),
        );
    }
    let lattice = evaluate_field(field, &grid);
    let mesh = marching_cubes(&lattice, grid.iso);
    if mesh.is_empty() && warnings.is_empty() {
        warnings
            .push("the occupancy field never crosses the iso level; the mesh is empty".to_string());
    }
    fs::create_dir_all(out)?;
    mesh.save_obj(&out.join(MESH))?;
    depth_tensor(&prepared.head.depth).save(&out.join(DEPTH_PRED))?;
    Ok(ReconOutput {
        mesh,
        grid,
        warnings,
    })
}

/// Metrics report written by `cmd_eval`.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub metrics: SurfaceMetrics,
    pub samples: usize,
    pub recon_triangles: usize,
    pub recon_closed: bool,
}

impl EvalReport {
    pub fn to_text(&self) -> String {
        format!(
            "p2s_cm = {}\nchamfer_cm = {}\nsamples = {}\nrecon_triangles = {}\nrecon_closed = {}\n",
            self.metrics.p2s_cm,
            self.metrics.chamfer_cm,
            self.samples,
            self.recon_triangles,
            self.recon_closed
        )
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let pairs: BTreeMap<String, String> =
            crate::config::parse_flat(text, path)?.into_iter().collect();
        fn get<T: std::str::FromStr>(
            pairs: &BTreeMap<String, String>,
            key: &str,
            path: &Path,
        ) -> Result<T> {
            pairs
                .get(key)
                .ok_or_else(|| Error::Format(format!("{}: missing {key}", path.display())))?
                .parse()
                .map_err(|_| Error::Format(format!("{}: bad value for {key}", path.display())))
        }
        Ok(Self {
            metrics: SurfaceMetrics {
                p2s_cm: get(&pairs, "p2s_cm", path)?,
                chamfer_cm: get(&pairs, "chamfer_cm", path)?,
            },
            samples: get(&pairs, "samples", path)?,
            recon_triangles: get(&pairs, "recon_triangles", path)?,
            recon_closed: get(&pairs, "recon_closed", path)?,
        })
    }
}

/// Reads a report written by `cmd_eval`.
pub fn read_report(path: &Path) -> Result<EvalReport> {
    EvalReport::parse(&fs::read_to_string(path)?, path)
}

/// Ground truth from an OBJ file or, for any other extension, an analytic scene.
pub fn load_ground_truth(path: &Path) -> Result<TriangleMesh> {
    if path
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("obj"))
    {
        TriangleMesh::load_obj(path)
    } else {
        Ok(mesh_scene(&SdfScene::load(path)?, GT_RESOLUTION))
    }
}

/// P2S and Chamfer of `recon` against the ground truth; writes `report.txt`.
pub fn cmd_eval(recon: &Path, gt: &Path, out: &Path) -> Result<EvalReport> {
    let recon_mesh = TriangleMesh::load_obj(recon)?;
    let gt_mesh = load_ground_truth(gt)?;
    let metrics = chamfer(&recon_mesh, &gt_mesh, DEFAULT_METRIC_SAMPLES)?;
    let report = EvalReport {
        metrics,
        samples: DEFAULT_METRIC_SAMPLES,
        recon_triangles: recon_mesh.triangles.len(),
        recon_closed: recon_mesh.is_closed(),
    };
    fs::create_dir_all(out)?;
    fs::write(out.join(REPORT), report.to_text())?;
    Ok(report)
}

/// Unit normals from depth gradients, facing the camera; zero where undefined.
pub fn normal_map(depth: &DepthMap<f32>, rig: &RectifiedRig) -> Vec<[f32; 3]> {
    let (w, h) = (depth.width, depth.height);
    let point = |x: usize, y: usize| -> Option<Point3<f64>> {
        let k = y * w + x;
        depth.valid[k].then(|| rig.unproject_left(x as f64, y as f64, depth.values[k] as f64))
    };
    // Central difference where both neighbours exist, else one-sided.
    let diff =
        |a: Option<Point3<f64>>, c: Point3<f64>, b: Option<Point3<f64>>| -> Option<Vector3<f64>> {
            match (a, b) {
                (Some(a), Some(b)) => Some(b - a),
                (None, Some(b)) => Some(b - c),
                (Some(a), None) => Some(c - a),
                (None, None) => None,
            }
        };
    let mut out = vec![[0.0f32; 3]; w * h];
    for y in 0..h {
        for x in 0..w {
            let Some(c) = point(x, y) else { continue };
            let left = if x > 0 { point(x - 1, y) } else { None };
            let right = if x + 1 < w { point(x + 1, y) } else { None };
            let up = if y > 0 { point(x, y - 1) } else { None };
            let down = if y + 1 < h { point(x, y + 1) } else { None };
            let (Some(dx), Some(dy)) = (diff(left, c, right), diff(up, c, down)) else {
                continue;
            };
            let n = dx.cross(&dy);
            let len = n.norm();
            if len <= 0.0 || !len.is_finite() {
                continue;
            }
            let n = if n.dot(&c.coords) > 0.0 {
                -n / len
            } else {
                n / len
            };
            out[y * w + x] = [n.x as f32, n.y as f32, n.z as f32];
        }
    }
    out
}

#[derive(Debug, Clone)]
pub struct DepthOutput {
    pub disparity: DisparityMap<f32>,
    pub depth: DepthMap<f32>,
    pub normals: Vec<[f32; 3]>,
}

/// Depth-only branch: soft-argmax disparity, depth and normals.
/// Writes `disparity.t32`, `depth.t32` and `normals.t32` (`[H, W, 3]`).
pub fn cmd_depth(model_path: &Path, left: &Path, right: &Path, out: &Path) -> Result<DepthOutput> {
    let (cfg, model) = load_model(model_path)?;
    let (l, r) = read_pair(left, right)?;
    let tensors = SceneTensors::<f32>::from_images(&l, &r, &cfg.setup)?;
    let head = predict_depth(&tensors, &model.score, &cfg.setup)?;
    let normals = normal_map(&head.depth, &cfg.setup.rig);
    fs::create_dir_all(out)?;
    map_tensor(&head.disparity).save(&out.join(DISPARITY))?;
    depth_tensor(&head.depth).save(&out.join(DEPTH))?;
    let (w, h) = (head.depth.width, head.depth.height);
    Tensor::new(vec![h, w, 3], normals.iter().flatten().copied().collect())?
        .save(&out.join(NORMALS))?;
    Ok(DepthOutput {
        disparity: head.disparity,
        depth: head.depth,
        normals,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fronto_parallel_plane_faces_the_camera() {
        let rig = RectifiedRig::new(100.0, 0.1, (15.5, 15.5), (32, 32)).unwrap();
        let mut valid = vec![true; 32 * 32];
        valid[0] = false;
        let depth = DepthMap::new(32, 32, vec![2.0f32; 32 * 32], valid).unwrap();
        let n = normal_map(&depth, &rig);
        assert_eq!(n[0], [0.0; 3]);
        for v in &n[1..] {
            assert!(
                (v[0]).abs() < 1e-2 && (v[1]).abs() < 1e-2 && (v[2] + 1.0).abs() < 1e-2,
                "{v:?}"
            );
        }
    }

    #[test]
    fn tilted_plane_normal_matches_geometry() {
        let rig = RectifiedRig::new(100.0, 0.1, (15.5, 15.5), (32, 32)).unwrap();
        // Plane z = 2 + 0.5 x in camera space.
        let values = (0..32 * 32)
            .map(|k| {
                let u = (k % 32) as f64;
                let a = (u - rig.cx) / rig.focal_px;
                (2.0 / (1.0 - 0.5 * a)) as f32
            })
            .collect();
        let depth = DepthMap::new(32, 32, values, vec![true; 32 * 32]).unwrap();
        let n = normal_map(&depth, &rig)[16 * 32 + 16];
        let expect = Vector3::new(0.5, 0.0, -1.0).normalize();
        assert!(
            (Vector3::new(n[0] as f64, n[1] as f64, n[2] as f64) - expect).norm() < 1e-3,
            "{n:?}"
        );
    }

    #[test]
    fn log_round_trips() {
        let logs = vec![
            EpochLog {
                stage: 1,
                epoch: 0,
                loss: 0.123456789012345,
            },
            EpochLog {
                stage: 2,
                epoch: 7,
                loss: 1e-9,
            },
        ];
        let mut text = format!("{LOG_HEADER}\n");
        logs.iter().for_each(|l| text.push_str(&log_line(l)));
        assert_eq!(parse_log(&text).unwrap(), logs);
        assert!(parse_log("epoch,stage\n").is_err());
    }

    #[test]
    fn report_round_trips() {
        let r = EvalReport {
            metrics: SurfaceMetrics {
                p2s_cm: 1.25,
                chamfer_cm: 0.1 + 0.2,
            },
            samples: 10,
            recon_triangles: 4,
            recon_closed: true,
        };
        assert_eq!(EvalReport::parse(&r.to_text(), Path::new("r")).unwrap(), r);
        assert!(EvalReport::parse("p2s_cm = 1\n", Path::new("r")).is_err());
    }
}
