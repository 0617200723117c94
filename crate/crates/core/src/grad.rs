//! Analytic gradients of the two training objectives.

use nalgebra::Point3;
use rayon::prelude::*;

use crate::cost::{
    confidence_backward, soft_argmax_backward, upsample_disparity_backward, ChannelMix, ScoreParams,
};
use crate::error::Result;
use crate::features::{query_stencil, QueryStencil, SamplingLayout};
use crate::grid::DisparityMap;
use crate::model::{
    bce_with_logits, disparity_pyramid, sigmoid, smooth_l1, smooth_l1_grad, LossWeights, MlpGrad,
};
use crate::pipeline::{DepthHead, Model, SceneTensors, StereoSetup};
use crate::scalar::Real;

const CHUNK: usize = 128;

/// A labelled point inside the viewing volume.
#[derive(Debug, Clone)]
pub struct Query {
    pub stencil: QueryStencil,
    pub inside: bool,
}

/// Stencils for the points that lie inside the viewing volume; the rest
/// have forced zero occupancy and are dropped.
pub fn prepare_queries<T: Real>(
    points: &[Point3<f64>],
    labels: &[bool],
    tensors: &SceneTensors<T>,
    head: &DepthHead<T>,
    setup: &StereoSetup,
) -> Vec<Query> {
    let layout = SamplingLayout {
        pixel_features: &tensors.left_features,
        cost: &tensors.smoothed,
        confidence: &head.psi,
        depth: &head.depth,
    };
    points
        .iter()
        .zip(labels)
        .filter_map(|(p, &inside)| {
            query_stencil(p, &setup.rig, &layout).map(|stencil| Query { stencil, inside })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct OccupancyGrad<T> {
    /// Mean binary cross-entropy over the queries.
    pub loss: T,
    pub count: usize,
    pub score: Option<ScoreParams<T>>,
    pub mix: ChannelMix<T>,
    pub mlp: MlpGrad<T>,
}

struct Partial<T> {
    loss: T,
    mix: ChannelMix<T>,
    mlp: MlpGrad<T>,
    dpsi: Vec<(usize, T)>,
    ddepth: Vec<(usize, T)>,
}

/// `L_Occu` and its gradient. The score gradient covers both routes by which
/// `Ψ` reaches the network: the sampled confidence and the depth `E` inside
/// the z-code.
pub fn occupancy_loss_grad<T: Real>(
    model: &Model<T>,
    tensors: &SceneTensors<T>,
    head: &DepthHead<T>,
    setup: &StereoSetup,
    queries: &[Query],
    with_score: bool,
) -> Result<OccupancyGrad<T>> {
    let n = queries.len();
    let zero_mix = ChannelMix::zeros(model.mix.c_in, model.mix.c_out);
    if n == 0 {
        return Ok(OccupancyGrad {
            loss: T::zero(),
            count: 0,
            score: with_score.then(|| model.score.zeros_like()),
            mix: zero_mix,
            mlp: model.mlp.zero_grad(),
        });
    }
    let inv_n = T::one() / T::from_usize_lossy(n);
    let c_pix = tensors.left_features.channels;
    let c_in = model.mix.c_in;
    let c_out = model.mix.c_out;
    let pix_plane = tensors.left_features.plane();
    let partials: Vec<Result<Partial<T>>> =
        queries
            .par_chunks(CHUNK)
            .map(|chunk| {
                let mut part = Partial {
                    loss: T::zero(),
                    mix: zero_mix.clone(),
                    mlp: model.mlp.zero_grad(),
                    dpsi: Vec::new(),
                    ddepth: Vec::new(),
                };
                let mut input = Vec::with_capacity(model.mlp.input_width());
                for q in chunk {
                    let st = &q.stencil;
                    input.clear();
                    for c in 0..c_pix {
                        input.push(st.pixel.gather(
                            &tensors.left_features.data[c * pix_plane..(c + 1) * pix_plane],
                        ));
                    }
                    let s: Vec<T> = (0..c_in)
                        .map(|c| st.cost.gather(tensors.smoothed.channel(c)))
                        .collect();
                    input.extend(model.mix.apply(&s));
                    input.push(st.confidence.gather(head.psi.channel(0)));
                    let z = T::lit(st.p_z) - st.depth.gather(&head.depth.values);
                    input.push(setup.features.encode(z));
                    let cache = model.mlp.forward_cached(&input)?;
                    let logit = *cache.pre.last().unwrap().first().unwrap();
                    part.loss = part.loss + bce_with_logits(logit, q.inside);
                    let y = if q.inside { T::one() } else { T::zero() };
                    let dlogit = (sigmoid(logit) - y) * inv_n;
                    let dx = model.mlp.backward(&cache, dlogit, &mut part.mlp);
                    let dcost = &dx[c_pix..c_pix + c_out];
                    for (o, g) in dcost.iter().enumerate() {
                        part.mix.bias[o] = part.mix.bias[o] + *g;
                        let row = &mut part.mix.weight[o * c_in..(o + 1) * c_in];
                        for (w, sv) in row.iter_mut().zip(&s) {
                            *w = *w + *g * *sv;
                        }
                    }
                    if with_score {
                        let dconf = dx[c_pix + c_out];
                        for (i, w) in st.confidence.iter() {
                            part.dpsi.push((i, dconf * T::lit(w)));
                        }
                        let dz = dx[c_pix + c_out + 1] * setup.features.encode_derivative(z);
                        for (i, w) in st.depth.iter() {
                            part.ddepth.push((i, -dz * T::lit(w)));
                        }
                    }
                }
                Ok(part)
            })
            .collect();

    let mut loss = T::zero();
    let mut mix = zero_mix;
    let mut mlp = model.mlp.zero_grad();
    let mut dpsi = vec![T::zero(); if with_score { head.psi.data.len() } else { 0 }];
    let mut ddepth = vec![
        T::zero();
        if with_score {
            head.depth.values.len()
        } else {
            0
        }
    ];
    for p in partials {
        let p = p?;
        loss = loss + p.loss;
        mix.weight
            .iter_mut()
            .zip(&p.mix.weight)
            .for_each(|(a, b)| *a = *a + *b);
        mix.bias
            .iter_mut()
            .zip(&p.mix.bias)
            .for_each(|(a, b)| *a = *a + *b);
        mlp.add_assign(&p.mlp);
        for (i, g) in p.dpsi {
            dpsi[i] = dpsi[i] + g;
        }
        for (i, g) in p.ddepth {
            ddepth[i] = ddepth[i] + g;
        }
    }
    let score = if with_score {
        // E = b·k / d  ⇒  dE/dd = −E² / (b·k)
        let bk = T::lit(setup.rig.bk());
        let ddisp: Vec<T> = ddepth
            .iter()
            .zip(&head.depth.values)
            .map(|(g, e)| {
                if *g == T::zero() {
                    T::zero()
                } else {
                    -*g * *e * *e / bk
                }
            })
            .collect();
        Some(depth_head_backward(
            tensors,
            head,
            &model.score,
            setup,
            &ddisp,
            dpsi,
        ))
    } else {
        None
    };
    Ok(OccupancyGrad {
        loss: loss * inv_n,
        count: n,
        score,
        mix,
        mlp,
    })
}

/// Pulls a full-resolution disparity gradient (plus any direct `dL/dΨ`)
/// back to the score parameters.
pub fn depth_head_backward<T: Real>(
    tensors: &SceneTensors<T>,
    head: &DepthHead<T>,
    score: &ScoreParams<T>,
    setup: &StereoSetup,
    ddisp_full: &[T],
    mut dpsi: Vec<T>,
) -> ScoreParams<T> {
    let psi = &head.psi;
    if dpsi.is_empty() {
        dpsi = vec![T::zero(); psi.data.len()];
    }
    let vox = upsample_disparity_backward(
        ddisp_full,
        setup.strides.spatial_stride,
        setup.rig.width,
        setup.rig.height,
        psi.width,
        psi.height,
    );
    soft_argmax_backward(psi, &vox, &mut dpsi);
    confidence_backward(&tensors.cost, psi, score, &dpsi)
}

/// Multi-scale `L_Disp` of the predicted map against `gt` and its gradient
/// with respect to every full-resolution predicted disparity. Matches
/// `disparity_loss(disparity_pyramid(pred), gt)`.
pub fn disparity_loss_grad<T: Real>(
    pred: &DisparityMap<T>,
    gt: &DisparityMap<T>,
    weights: &LossWeights,
) -> (T, Vec<T>) {
    let levels = weights.0.len();
    let pyramid = disparity_pyramid(pred, levels);
    let gt_pyramid = disparity_pyramid(gt, levels);
    let mut grad = vec![T::zero(); pred.values.len()];
    let mut total = T::zero();
    for (l, lambda) in weights.0.iter().enumerate() {
        let factor = 1usize << l;
        let (p, g) = (&pyramid[l], &gt_pyramid[l]);
        let cells: Vec<usize> = (0..p.values.len())
            .filter(|&k| p.valid[k] && g.valid[k])
            .collect();
        if cells.is_empty() {
            continue;
        }
        let scale = T::lit(*lambda) / T::from_usize_lossy(cells.len());
        for k in cells {
            let diff = p.values[k] - g.values[k];
            total = total + scale * smooth_l1(diff);
            let (ci, cj) = (k / p.width, k % p.width);
            let members: Vec<usize> = (ci * factor..((ci + 1) * factor).min(pred.height))
                .flat_map(|y| {
                    (cj * factor..((cj + 1) * factor).min(pred.width)).map(move |x| (x, y))
                })
                .map(|(x, y)| pred.idx(x, y))
                .filter(|&i| pred.valid[i])
                .collect();
            let share = scale * smooth_l1_grad(diff) / T::from_usize_lossy(members.len());
            for i in members {
                grad[i] = grad[i] + share;
            }
        }
    }
    (total, grad)
}

/// `L_Disp` for one scene and its gradient with respect to the score.
pub fn disparity_step<T: Real>(
    tensors: &SceneTensors<T>,
    head: &DepthHead<T>,
    score: &ScoreParams<T>,
    setup: &StereoSetup,
    gt: &DisparityMap<T>,
    weights: &LossWeights,
) -> (T, ScoreParams<T>) {
    let (loss, ddisp) = disparity_loss_grad(&head.disparity, gt, weights);
    (
        loss,
        depth_head_backward(tensors, head, score, setup, &ddisp, Vec::new()),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::PixelMap;
    use crate::model::disparity_loss;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn disparity_grad_loss_matches_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (w, h) = (13, 9);
        let mk = |rng: &mut ChaCha8Rng, p: f64| {
            PixelMap::new(
                w,
                h,
                (0..w * h).map(|_| rng.random_range(0.0..10.0)).collect(),
                (0..w * h).map(|_| rng.random_bool(p)).collect(),
            )
            .unwrap()
        };
        let pred = mk(&mut rng, 0.8);
        let gt = mk(&mut rng, 0.7);
        let wts = LossWeights::default();
        let (l, g) = disparity_loss_grad(&pred, &gt, &wts);
        let reference: f64 = disparity_loss(&disparity_pyramid(&pred, 5), &gt, &wts);
        assert!((l - reference).abs() < 1e-12);
        for k in 0..w * h {
            let eval = |delta: f64| {
                let mut q = pred.clone();
                q.values[k] += delta;
                disparity_loss(&disparity_pyramid(&q, 5), &gt, &wts)
            };
            let fd = (eval(1e-6) - eval(-1e-6)) / 2e-6;
            assert!((fd - g[k]).abs() < 1e-7, "pixel {k}: {fd} vs {}", g[k]);
        }
    }
}
