//! Finite-difference oracle for the two training objectives on a tiny
//! random scene with a 4×6×8 (D×H×W) volume.

use nalgebra::Point3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stereopifu::cost::{aggregate_cost_volume, ChannelMix, ScoreParams};
use stereopifu::features::{assemble_query_features, FeatureConfig};
use stereopifu::grad::{disparity_step, occupancy_loss_grad, prepare_queries};
use stereopifu::model::{
    bce_with_logits, disparity_loss, disparity_pyramid, LossWeights, Mlp, ParamGroup,
};
use stereopifu::pipeline::{predict_depth, Model, SceneTensors, StereoSetup};
use stereopifu::synth::GrayImage;
use stereopifu::{DisparityMap, RectifiedRig, VolumeStrides};

pub struct Fixture {
    pub setup: StereoSetup,
    pub tensors: SceneTensors<f64>,
    pub model: Model<f64>,
    pub points: Vec<Point3<f64>>,
    pub labels: Vec<bool>,
    pub gt: DisparityMap<f64>,
}

pub fn fixture(seed: u64) -> Fixture {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let setup = StereoSetup {
        rig: RectifiedRig::new(16.0, 0.1, (7.5, 5.5), (16, 12)).unwrap(),
        strides: VolumeStrides::new(2, 1, 4).unwrap(),
        smooth_radius: 1,
        features: FeatureConfig::default(),
        context_levels: 1,
    };
    let mut img = || {
        let mut g = GrayImage::new(16, 12);
        g.data
            .iter_mut()
            .for_each(|v| *v = rng.random_range(0.1..1.0));
        g
    };
    let (left, right) = (img(), img());
    let tensors = SceneTensors::<f64>::from_images(&left, &right, &setup).unwrap();
    assert_eq!(tensors.cost.shape(), [9, 4, 6, 8]);
    let c = setup.cost_channels();
    let mut rnd =
        |n: usize, s: f64| -> Vec<f64> { (0..n).map(|_| rng.random_range(-s..s)).collect() };
    let score = ScoreParams {
        quadratic: rnd(c, 3.0),
        linear: rnd(c, 3.0),
        bin_bias: rnd(4, 0.5),
    };
    let mix = ChannelMix {
        c_in: c,
        c_out: 3,
        weight: rnd(3 * c, 1.0),
        bias: rnd(3, 0.5),
    };
    let mut mlp = Mlp::<f64>::zeros(&[setup.pixel_channels() + 3 + 2, 6, 5, 1]).unwrap();
    for w in mlp.weights.iter_mut().chain(mlp.biases.iter_mut()) {
        w.iter_mut().for_each(|v| *v = rng.random_range(-0.8..0.8));
    }
    let model = Model { score, mix, mlp };
    let head = predict_depth(&tensors, &model.score, &setup).unwrap();
    let mut points = Vec::new();
    let mut labels = Vec::new();
    while points.len() < 8 {
        // near the predicted surface so the z-code is not saturated
        let (u, v) = (rng.random_range(2.0..14.0), rng.random_range(0.0..11.0));
        let Some((e, _)) = head.depth.sample_valid(u, v) else {
            continue;
        };
        let z = e + rng.random_range(-0.03..0.03);
        let p = setup.rig.unproject_left(u, v, z);
        if prepare_queries(&[p], &[true], &tensors, &head, &setup).len() == 1 {
            points.push(p);
            labels.push(rng.random_bool(0.5));
        }
    }
    let gt = DisparityMap::new(
        16,
        12,
        (0..16 * 12).map(|_| rng.random_range(0.5..3.5)).collect(),
        (0..16 * 12).map(|_| rng.random_bool(0.9)).collect(),
    )
    .unwrap();
    Fixture {
        setup,
        tensors,
        model,
        points,
        labels,
        gt,
    }
}

/// Reference forward pass through the materialised aggregated volume.
pub fn occupancy_loss_reference(f: &Fixture, model: &Model<f64>) -> f64 {
    let head = predict_depth(&f.tensors, &model.score, &f.setup).unwrap();
    let phi = aggregate_cost_volume(&f.tensors.cost, f.setup.smooth_radius, &model.mix).unwrap();
    let mut total = 0.0;
    for (p, l) in f.points.iter().zip(&f.labels) {
        let q = assemble_query_features(
            p,
            &f.tensors.left_features,
            &phi,
            &head.psi,
            &head.depth,
            &f.setup.rig,
            &f.setup.features,
        );
        assert!(q.in_frustum);
        total += bce_with_logits(model.mlp.forward_logit(&q.to_input()).unwrap(), *l);
    }
    total / f.points.len() as f64
}

pub fn disparity_loss_reference(f: &Fixture, score: &ScoreParams<f64>) -> f64 {
    let head = predict_depth(&f.tensors, score, &f.setup).unwrap();
    disparity_loss(
        &disparity_pyramid(&head.disparity, 5),
        &f.gt,
        &LossWeights::default(),
    )
}

/// `‖a − n‖ / max(‖a‖, ‖n‖)` over one parameter group.
pub fn group_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).powi(2))
        .sum::<f64>()
        .sqrt();
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = norm(analytic).max(norm(numeric));
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

fn central<F: Fn(&[f64]) -> f64>(theta: &[f64], f: F) -> Vec<f64> {
    (0..theta.len())
        .map(|k| {
            let h = 1e-5 * theta[k].abs().max(1.0);
            let mut t = theta.to_vec();
            t[k] += h;
            let up = f(&t);
            t[k] -= 2.0 * h;
            let down = f(&t);
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Worst group error over consecutive groups of the given sizes.
fn worst(analytic: &[f64], numeric: &[f64], groups: &[usize]) -> f64 {
    let mut off = 0;
    let mut out: f64 = 0.0;
    for &n in groups {
        out = out.max(group_rel_err(
            &analytic[off..off + n],
            &numeric[off..off + n],
        ));
        off += n;
    }
    out
}

/// Worst per-group relative error of the occupancy gradient (score, mix,
/// every mlp array) and of the disparity gradient (score).
pub fn check(seed: u64) -> (f64, f64) {
    let f = fixture(seed);
    let head = predict_depth(&f.tensors, &f.model.score, &f.setup).unwrap();
    let queries = prepare_queries(&f.points, &f.labels, &f.tensors, &head, &f.setup);
    let g = occupancy_loss_grad(&f.model, &f.tensors, &head, &f.setup, &queries, true).unwrap();
    assert!((g.loss - occupancy_loss_reference(&f, &f.model)).abs() < 1e-12);

    let mut analytic = g.score.unwrap().flatten();
    analytic.extend(g.mix.flatten());
    analytic.extend(g.mlp.flatten());
    let mut theta = f.model.score.flatten();
    theta.extend(f.model.occupancy_params());
    let ns = f.model.score.param_count();
    let numeric = central(&theta, |t| {
        let mut m = f.model.clone();
        m.score.unflatten(&t[..ns]).unwrap();
        m.set_occupancy_params(&t[ns..]).unwrap();
        occupancy_loss_reference(&f, &m)
    });
    let mut groups = vec![ns];
    groups.extend(f.model.mix.arrays().iter().map(|a| a.data.len()));
    groups.extend(f.model.mlp.arrays().iter().map(|a| a.data.len()));
    let occ = worst(&analytic, &numeric, &groups);

    let (loss, gs) = disparity_step(
        &f.tensors,
        &head,
        &f.model.score,
        &f.setup,
        &f.gt,
        &LossWeights::default(),
    );
    assert!((loss - disparity_loss_reference(&f, &f.model.score)).abs() < 1e-12);
    let numeric = central(&f.model.score.flatten(), |t| {
        let mut s = f.model.score.clone();
        s.unflatten(t).unwrap();
        disparity_loss_reference(&f, &s)
    });
    (occ, group_rel_err(&gs.flatten(), &numeric))
}
