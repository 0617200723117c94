//! End-to-end acceptance run: one PASS/FAIL line per criterion.

#[path = "../../core/tests/support/gradcheck.rs"]
mod gradcheck;

use std::fs;
use std::path::Path;
use std::process::ExitCode;
use std::time::Instant;

use nalgebra::{Point3, Rotation3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stereopifu::cost::{build_cost_volume, soft_argmax_voxel};
use stereopifu::features::{psi_t, ZEncoding};
use stereopifu::pipeline::PreparedScene;
use stereopifu::surface::{
    chamfer, evaluate_field, marching_cubes, mesh_scene, OracleField, ReconGrid,
};
use stereopifu::synth::{
    random_scene, render_stereo, Primitive, RenderSettings, SceneGenConfig, SdfScene,
};
use stereopifu::train::median_disparity_error;
use stereopifu::{FeatureGrid, RectifiedRig, Volume4, VolumeStrides};
use stereopifu_cli::commands::{CHECKPOINT, MESH, TRAIN_LOG};
use stereopifu_cli::dataset::{load_scene, scene_path};
use stereopifu_cli::{
    cmd_depth, cmd_eval, cmd_gen, cmd_reconstruct, cmd_train, load_model, PipelineConfig,
};
use stereopifu_cli::{ReconOptions, TrainOptions};
use tempfile::TempDir;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

/// Runs one criterion; the runtime budget is part of the verdict.
fn criterion(id: u8, name: &str, budget_s: f64, f: impl FnOnce() -> Verdict) -> bool {
    let t0 = Instant::now();
    let v = f();
    let secs = t0.elapsed().as_secs_f64();
    let pass = v.pass && secs < budget_s;
    let budget = if budget_s.is_finite() {
        format!("of {budget_s}s")
    } else {
        "no budget".into()
    };
    println!(
        "criterion {id:>2} {name}: {} ({}; {secs:.2}s {budget})",
        if pass { "PASS" } else { "FAIL" },
        v.detail
    );
    pass
}

fn psi_suite() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let t = 50.0;
    let odd = (0..1000)
        .map(|_| rng.random_range(-10.0..10.0))
        .map(|x: f64| (psi_t(x, t) + psi_t(-x, t)).abs())
        .fold(0.0, f64::max);
    let at = psi_t(0.1, t);
    let grid: Vec<f64> = (0..1000)
        .map(|k| psi_t(-0.2 + 0.4 * k as f64 / 999.0, t))
        .collect();
    let monotone = grid.windows(2).all(|w| w[1] > w[0]);
    let pass = odd <= 1e-12 && (at - 0.986614).abs() <= 1e-5 && monotone;
    verdict(
        pass,
        format!("max |ψ(x)+ψ(−x)| {odd:.1e}, ψ_50(0.1) {at:.7}, monotone {monotone}"),
    )
}

fn cost_volume_oracle() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    let mut flags_ok = true;
    for _ in 0..20 {
        let (c, d, h, w) = (
            rng.random_range(1..=4),
            rng.random_range(1..=8),
            rng.random_range(1..=12),
            rng.random_range(1..=12),
        );
        let mut feats = || {
            let data = (0..c * h * w)
                .map(|_| rng.random_range(-1.0..1.0))
                .collect();
            FeatureGrid::<f64>::from_data(c, h, w, 1, data).unwrap()
        };
        let (l, r) = (feats(), feats());
        let vol = build_cost_volume(&l, &r, VolumeStrides::new(1, 1, d).unwrap()).unwrap();
        let in_range = vol.in_range.as_ref().unwrap();
        for ch in 0..c {
            for dd in 0..d {
                for i in 0..h {
                    for j in 0..w {
                        let expect = l.at(ch, i, j) - r.at(ch, i, j.saturating_sub(dd));
                        worst = worst.max((vol.at(ch, dd, i, j) - expect).abs());
                        flags_ok &= in_range[vol.cell(dd, i, j)] == (j >= dd);
                    }
                }
            }
        }
    }
    verdict(
        worst == 0.0 && flags_ok,
        format!("max deviation {worst:e}, range flags {flags_ok}"),
    )
}

fn soft_argmax_oracle() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let (d, h, w, s) = (
            rng.random_range(2..=24),
            rng.random_range(1..=6),
            rng.random_range(1..=6),
            rng.random_range(1..=3),
        );
        let mut data: Vec<f64> = (0..d * h * w).map(|_| rng.random_range(0.0..1.0)).collect();
        let plane = h * w;
        for p in 0..plane {
            let sum: f64 = (0..d).map(|k| data[k * plane + p]).sum();
            (0..d).for_each(|k| data[k * plane + p] /= sum);
        }
        let psi = Volume4::from_data(
            [1, d, h, w],
            VolumeStrides::new(1, s, d * s).unwrap(),
            data.clone(),
        )
        .unwrap();
        let out = soft_argmax_voxel(&psi);
        for p in 0..plane {
            let brute: f64 = (0..d).map(|k| (k * s) as f64 * data[k * plane + p]).sum();
            worst = worst.max((out.values[p] - brute).abs());
        }
    }
    let mut onehot = Volume4::<f64>::zeros(1, 8, 1, 1, VolumeStrides::new(1, 1, 8).unwrap());
    onehot.data[5] = 1.0;
    let exact = soft_argmax_voxel(&onehot).values[0] == 5.0;
    let uniform = Volume4::<f64>::from_data(
        [1, 24, 1, 1],
        VolumeStrides::new(3, 3, 72).unwrap(),
        vec![1.0 / 24.0; 24],
    )
    .unwrap();
    let mean = soft_argmax_voxel(&uniform).values[0];
    let pass = worst <= 1e-6 && exact && (mean - 34.5).abs() <= 1e-6;
    verdict(
        pass,
        format!("max deviation {worst:.1e}, one-hot exact {exact}, uniform {mean:.9}"),
    )
}

fn gradient_check() -> Verdict {
    let (mut occ, mut disp) = (0.0f64, 0.0f64);
    for seed in 0..3 {
        let (o, d) = gradcheck::check(seed);
        occ = occ.max(o);
        disp = disp.max(d);
    }
    verdict(
        occ <= 1e-6 && disp <= 1e-6,
        format!("worst relative error occupancy {occ:.1e}, disparity {disp:.1e}"),
    )
}

fn geometry_round_trips() -> Verdict {
    let rig = RectifiedRig::new(700.0, 0.12, (320.0, 240.0), (640, 480)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut depth_err = 0.0f64;
    for k in 0..1000 {
        let z = 0.5 + 9.5 * k as f64 / 999.0;
        let back = rig
            .disparity_to_depth(rig.depth_to_disparity(z).unwrap())
            .unwrap();
        depth_err = depth_err.max((back - z).abs() / z);
    }
    let mut tri_err = 0.0f64;
    for _ in 0..10_000 {
        let p = Point3::new(
            rng.random_range(-3.0..3.0),
            rng.random_range(-3.0..3.0),
            rng.random_range(0.5..10.0),
        );
        let gap = rig.project_left(&p).unwrap().x - rig.project_right(&p).unwrap().x;
        tri_err = tri_err.max((gap - rig.bk() / p.z).abs());
    }
    verdict(
        depth_err <= 1e-12 && tri_err <= 1e-10,
        format!("depth round trip {depth_err:.1e}, triangulation {tri_err:.1e}"),
    )
}

fn renderer_consistency() -> Verdict {
    let rig = RectifiedRig::new(96.0, 0.08, (47.5, 47.5), (96, 96)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut worst = 0.0f64;
    let mut valid = 0;
    for _ in 0..10 {
        let scene = random_scene(&mut rng, &rig, &SceneGenConfig::default());
        let pair = render_stereo(&scene, &rig, &RenderSettings::default());
        for k in 0..pair.depth.values.len() {
            if pair.disparity.valid[k] {
                let expect = rig.depth_to_disparity(pair.depth.values[k] as f64).unwrap();
                worst = worst.max((pair.disparity.values[k] as f64 - expect).abs());
                valid += 1;
            }
        }
    }
    let plane_rig = RectifiedRig::new(1000.0, 0.1, (31.5, 31.5), (64, 64)).unwrap();
    let plane = SdfScene::new(vec![Primitive::Box {
        center: Point3::new(0.0, 0.0, 2.01),
        half: Vector3::new(1.0, 1.0, 0.01),
        rotation: Rotation3::identity(),
    }])
    .unwrap();
    let pair = render_stereo(&plane, &plane_rig, &RenderSettings::default());
    let plane_err = pair
        .disparity
        .values
        .iter()
        .map(|d| (*d as f64 - 50.0).abs())
        .fold(0.0, f64::max);
    let covered = pair.disparity.valid_count() == 64 * 64;
    let pass = valid > 0 && worst <= 1e-5 && covered && plane_err <= 1e-3;
    verdict(pass, format!("{valid} valid pixels, max mismatch {worst:.1e}; plane error {plane_err:.1e}, full coverage {covered}"))
}

fn marching_cubes_sphere() -> Verdict {
    let c = Point3::new(0.0, 0.0, 1.5);
    let grid = ReconGrid::new(c - Vector3::repeat(1.0), c + Vector3::repeat(1.0), [64; 3]).unwrap();
    let scene = SdfScene::new(vec![Primitive::Sphere {
        center: c,
        radius: 0.5,
    }])
    .unwrap();
    let mesh = marching_cubes(&evaluate_field(&OracleField(&scene), &grid), grid.iso);
    let half_diag = grid.spacing().norm() / 2.0;
    let radial = mesh
        .vertices
        .iter()
        .map(|v| ((v - c).norm() - 0.5).abs())
        .fold(0.0, f64::max);
    let fine = mesh_scene(&scene, 256);
    let ch = chamfer(&mesh, &fine, 20_000).unwrap();
    let cell = grid.spacing().max();
    let euler = mesh.euler_characteristic();
    let pass =
        radial <= half_diag && mesh.is_closed() && euler == 2 && ch.chamfer_cm / 100.0 <= cell;
    verdict(
        pass,
        format!(
            "max radial error {radial:.4} vs {half_diag:.4}, closed {}, Euler {euler}, chamfer {:.3} cm vs cell {:.3} cm",
            mesh.is_closed(),
            ch.chamfer_cm,
            100.0 * cell
        ),
    )
}

/// Training data and the ψ_t model shared by the end-to-end criteria.
struct DeskRun {
    cfg: PipelineConfig,
    train_dir: std::path::PathBuf,
    model: std::path::PathBuf,
}

fn desk_end_to_end(tmp: &Path) -> (Verdict, DeskRun) {
    let cfg = PipelineConfig::default();
    let train_dir = tmp.join("train");
    let held_dir = tmp.join("held_out");
    let model_dir = tmp.join("model_psi");
    cmd_gen(&cfg, &train_dir).unwrap();
    let held_cfg = PipelineConfig {
        scene_count: 3,
        ..cfg.clone().with_seed(cfg.seed + 1000)
    };
    let held = cmd_gen(&held_cfg, &held_dir).unwrap();
    cmd_train(&cfg, &train_dir, &model_dir, &TrainOptions::default()).unwrap();
    let model = model_dir.join(CHECKPOINT);
    let cell_cm = 100.0 * cfg.recon_grid().unwrap().spacing().max();
    let mut pass = true;
    let mut parts = Vec::new();
    for name in &held.scenes {
        let (l, r) = (
            scene_path(&held_dir, name, "_l.pgm"),
            scene_path(&held_dir, name, "_r.pgm"),
        );
        let out = tmp.join("recon").join(name);
        let depth = cmd_depth(&model, &l, &r, &out).unwrap();
        let gt = load_scene(&held_dir, name).unwrap().gt_disparity;
        let median = median_disparity_error(&depth.disparity, &gt).unwrap_or(f64::INFINITY);
        cmd_reconstruct(&model, &l, &r, &out, &ReconOptions::default()).unwrap();
        let report = cmd_eval(
            &out.join(MESH),
            &scene_path(&held_dir, name, "_scene.txt"),
            &out,
        )
        .unwrap();
        let chamfer_cm = report.metrics.chamfer_cm;
        pass &= median < 0.5 && chamfer_cm < 2.0 * cell_cm && report.recon_closed;
        parts.push(format!(
            "{name}: median {median:.3} px, chamfer {chamfer_cm:.3} cm, closed {}",
            report.recon_closed
        ));
    }
    let detail = format!(
        "{}; bounds 0.5 px and {:.3} cm",
        parts.join("; "),
        2.0 * cell_cm
    );
    (
        verdict(pass, detail),
        DeskRun {
            cfg,
            train_dir,
            model,
        },
    )
}

/// Small box in front of a large one; both faces squarely toward the camera.
fn two_box_scene() -> SdfScene {
    SdfScene::new(vec![
        Primitive::Box {
            center: Point3::new(0.0, 0.0, 1.55),
            half: Vector3::new(0.35, 0.35, 0.1),
            rotation: Rotation3::identity(),
        },
        Primitive::Box {
            center: Point3::new(0.0, 0.0, 1.05),
            half: Vector3::new(0.1, 0.1, 0.1),
            rotation: Rotation3::identity(),
        },
    ])
    .unwrap()
}

/// Variance of the reconstructed back-wall depth on a pixel band straddling
/// the occluder's left edge, found by marching each ray behind the occluder.
fn back_surface_variance(model_path: &Path, scene: &SdfScene) -> f64 {
    let (cfg, model) = load_model(model_path).unwrap();
    let pair = render_stereo(scene, &cfg.setup.rig, &cfg.render);
    let prepared = PreparedScene::new(&model, &cfg.setup, &pair.left, &pair.right).unwrap();
    let rig = &cfg.setup.rig;
    let (near, far, step) = (1.25, 1.75, 0.0025);
    let edge = rig
        .project_left(&Point3::new(-0.1, 0.0, 0.95))
        .unwrap()
        .x
        .round() as usize;
    let (top, bottom) = (
        rig.project_left(&Point3::new(0.0, -0.08, 0.95)).unwrap().y,
        rig.project_left(&Point3::new(0.0, 0.08, 0.95)).unwrap().y,
    );
    let mut depths = Vec::new();
    for v in (top.ceil() as usize..=bottom.floor() as usize).step_by(2) {
        for u in edge - 20..=edge + 20 {
            let hit = (0..=((far - near) / step) as usize)
                .map(|k| near + k as f64 * step)
                .find(|&z| {
                    prepared.occupancy_at(&rig.unproject_left(u as f64 + 0.5, v as f64 + 0.5, z))
                        >= 0.5
                })
                .unwrap_or(far);
            depths.push(hit);
        }
    }
    let mean = depths.iter().sum::<f64>() / depths.len() as f64;
    depths.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / depths.len() as f64
}

fn psi_ablation(tmp: &Path, run: &DeskRun) -> Verdict {
    let mut raw_cfg = run.cfg.clone();
    raw_cfg.setup.features.z_encoding = ZEncoding::Raw;
    let raw_dir = tmp.join("model_raw");
    cmd_train(&raw_cfg, &run.train_dir, &raw_dir, &TrainOptions::default()).unwrap();
    let scene = two_box_scene();
    let var_psi = back_surface_variance(&run.model, &scene);
    let var_raw = back_surface_variance(&raw_dir.join(CHECKPOINT), &scene);
    let ratio = var_psi / var_raw;
    verdict(
        ratio < 1.0,
        format!("variance ψ_t {var_psi:.3e} m², raw {var_raw:.3e} m², ratio {ratio:.3}"),
    )
}

fn determinism(tmp: &Path) -> Verdict {
    let mut cfg = PipelineConfig {
        scene_count: 4,
        ..PipelineConfig::default()
    };
    cfg.train.stage1_epochs = 3;
    cfg.train.stage2_epochs = 2;
    let mut identical = true;
    let mut files = 0;
    let dirs = [tmp.join("det_a"), tmp.join("det_b")];
    for d in &dirs {
        cmd_gen(&cfg, &d.join("data")).unwrap();
        cmd_train(
            &cfg,
            &d.join("data"),
            &d.join("model"),
            &TrainOptions::default(),
        )
        .unwrap();
    }
    for sub in ["data", "model"] {
        for entry in fs::read_dir(dirs[0].join(sub)).unwrap() {
            let name = entry.unwrap().file_name();
            identical &= fs::read(dirs[0].join(sub).join(&name)).ok()
                == fs::read(dirs[1].join(sub).join(&name)).ok();
            files += 1;
        }
    }
    let trained = dirs[0].join("model").join(TRAIN_LOG).is_file();
    verdict(
        identical && trained,
        format!("{files} files compared, identical {identical}"),
    )
}

fn main() -> ExitCode {
    let tmp = TempDir::new().unwrap();
    let mut all = true;
    all &= criterion(1, "psi_t suite", 1.0, psi_suite);
    all &= criterion(2, "cost volume vs naive oracle", 1.0, cost_volume_oracle);
    all &= criterion(3, "soft-argmax vs brute force", 1.0, soft_argmax_oracle);
    all &= criterion(4, "gradient check", 30.0, gradient_check);
    all &= criterion(5, "geometry round trips", 1.0, geometry_round_trips);
    all &= criterion(6, "renderer consistency", 60.0, renderer_consistency);
    all &= criterion(7, "marching cubes sphere", 30.0, marching_cubes_sphere);
    let mut run = None;
    all &= criterion(8, "desk-scale end to end", 1800.0, || {
        let (v, r) = desk_end_to_end(tmp.path());
        run = Some(r);
        v
    });
    let run = run.unwrap();
    all &= criterion(9, "psi_t ablation on two boxes", f64::INFINITY, || {
        psi_ablation(tmp.path(), &run)
    });
    all &= criterion(10, "determinism of gen and train", f64::INFINITY, || {
        determinism(tmp.path())
    });
    if all {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
