//! Cost volume construction, aggregation, confidence normalization and
//! soft-argmax disparity regression, with the adjoints needed for training.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{RectifiedRig, VolumeStrides};
use crate::grid::{bilinear_stencil, DepthMap, DisparityMap, FeatureGrid, PixelMap, Volume4};
use crate::scalar::Real;

/// Builds `Φ′(:, d, i, j) = F_l(:, i, j) − F_r(:, i, j − d)`.
///
/// Bin `d` corresponds to a disparity of `d · disparity_stride` pixels. When
/// that is not a whole number of feature cells the right feature is linearly
/// interpolated along x. Lookups left of pixel 0 clamp to column 0 and are
/// flagged out of range.
pub fn build_cost_volume<T: Real>(
    left: &FeatureGrid<T>,
    right: &FeatureGrid<T>,
    strides: VolumeStrides,
) -> Result<Volume4<T>> {
    if !left.same_shape(right) {
        return Err(Error::Dimension(format!(
            "left features {}x{}x{} (stride {}) vs right {}x{}x{} (stride {})",
            left.channels,
            left.height,
            left.width,
            left.stride_px,
            right.channels,
            right.height,
            right.width,
            right.stride_px
        )));
    }
    if left.stride_px != strides.spatial_stride {
        return Err(Error::Dimension(format!(
            "feature stride {} differs from volume spatial stride {}",
            left.stride_px, strides.spatial_stride
        )));
    }
    let (c_n, h, w) = (left.channels, left.height, left.width);
    let bins = strides.disparity_bins();
    let s = left.stride_px as f64;
    let mut vol = Volume4::zeros(c_n, bins, h, w, strides);
    let mut in_range = vec![true; bins * h * w];

    // Per (bin, column): right column stencil and range flag.
    let lookups: Vec<(usize, usize, f64, bool)> = (0..bins)
        .flat_map(|d| (0..w).map(move |j| (d, j)))
        .map(|(d, j)| {
            let shift_px = (d * strides.disparity_stride) as f64;
            let px = j as f64 * s - shift_px;
            let ok = px >= 0.0;
            let col = (px / s).max(0.0);
            let lo = (col.floor() as usize).min(w - 1);
            let hi = (lo + 1).min(w - 1);
            (lo, hi, col - lo as f64, ok)
        })
        .collect();

    let cells = bins * h * w;
    vol.data
        .par_chunks_mut(cells)
        .enumerate()
        .for_each(|(c, out)| {
            for d in 0..bins {
                for i in 0..h {
                    for j in 0..w {
                        let (lo, hi, f, _) = lookups[d * w + j];
                        let r = if f == 0.0 {
                            right.at(c, i, lo)
                        } else {
                            let f = T::lit(f);
                            right.at(c, i, lo) * (T::one() - f) + right.at(c, i, hi) * f
                        };
                        out[(d * h + i) * w + j] = left.at(c, i, j) - r;
                    }
                }
            }
        });
    for d in 0..bins {
        for i in 0..h {
            for j in 0..w {
                in_range[(d * h + i) * w + j] = lookups[d * w + j].3;
            }
        }
    }
    vol.in_range = Some(in_range);
    Ok(vol)
}

/// Separable box filter of radius `r` along `(d, y, x)` with border
/// replication; every output averages exactly `(2r+1)^3` samples.
pub fn box_smooth<T: Real>(vol: &Volume4<T>, radius: usize) -> Volume4<T> {
    let mut out = vol.clone();
    if radius == 0 {
        return out;
    }
    let [_, dn, h, w] = vol.shape();
    let cells = vol.cell_count();
    let norm = T::one() / T::from_usize_lossy(2 * radius + 1);
    let r = radius as isize;
    out.data.par_chunks_mut(cells).for_each_init(
        || vec![T::zero(); cells],
        |tmp, ch| {
            // axis 0: x, axis 1: y, axis 2: d
            for (len, step) in [(w, 1usize), (h, w), (dn, h * w)] {
                tmp.copy_from_slice(ch);
                for base in 0..cells {
                    let pos = (base / step) % len;
                    let mut acc = T::zero();
                    for k in -r..=r {
                        let q = (pos as isize + k).clamp(0, len as isize - 1) as usize;
                        acc = acc + tmp[base - pos * step + q * step];
                    }
                    ch[base] = acc * norm;
                }
            }
        },
    );
    out
}

/// Learned affine map applied independently at every voxel.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelMix<T> {
    pub c_in: usize,
    pub c_out: usize,
    /// Row-major `c_out × c_in`.
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Real> ChannelMix<T> {
    pub fn identity(c: usize) -> Self {
        let mut weight = vec![T::zero(); c * c];
        for k in 0..c {
            weight[k * c + k] = T::one();
        }
        Self {
            c_in: c,
            c_out: c,
            weight,
            bias: vec![T::zero(); c],
        }
    }

    pub fn zeros(c_in: usize, c_out: usize) -> Self {
        Self {
            c_in,
            c_out,
            weight: vec![T::zero(); c_in * c_out],
            bias: vec![T::zero(); c_out],
        }
    }

    pub fn apply(&self, x: &[T]) -> Vec<T> {
        (0..self.c_out)
            .map(|o| {
                let row = &self.weight[o * self.c_in..(o + 1) * self.c_in];
                row.iter()
                    .zip(x)
                    .fold(self.bias[o], |a, (w, v)| a + *w * *v)
            })
            .collect()
    }
}

/// Produces `Φ` from `Φ′`: fixed box smoothing followed by a per-voxel
/// channel mix. Output shape is `(c_out, D, H, W)`.
pub fn aggregate_cost_volume<T: Real>(
    cost: &Volume4<T>,
    radius: usize,
    mix: &ChannelMix<T>,
) -> Result<Volume4<T>> {
    if mix.c_in != cost.channels {
        return Err(Error::Dimension(format!(
            "channel mix expects {} inputs, volume has {}",
            mix.c_in, cost.channels
        )));
    }
    let smooth = box_smooth(cost, radius);
    Ok(mix_volume(&smooth, mix))
}

pub fn mix_volume<T: Real>(vol: &Volume4<T>, mix: &ChannelMix<T>) -> Volume4<T> {
    let cells = vol.cell_count();
    let mut out = Volume4::zeros(
        mix.c_out,
        vol.disparities,
        vol.height,
        vol.width,
        vol.strides,
    );
    out.in_range = vol.in_range.clone();
    out.data
        .par_chunks_mut(cells)
        .enumerate()
        .for_each(|(o, dst)| {
            let row = &mix.weight[o * mix.c_in..(o + 1) * mix.c_in];
            dst.fill(mix.bias[o]);
            for (c, wv) in row.iter().enumerate() {
                let src = vol.channel(c);
                for (d, s) in dst.iter_mut().zip(src) {
                    *d = *d + *wv * *s;
                }
            }
        });
    out
}

/// Learned per-voxel matching score:
/// `logit(d,i,j) = Σ_c (linear_c·x_c − quadratic_c·x_c²) + bin_bias_d`
/// with `x = Φ′(:, d, i, j)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreParams<T> {
    pub quadratic: Vec<T>,
    pub linear: Vec<T>,
    pub bin_bias: Vec<T>,
}

impl<T: Real> ScoreParams<T> {
    pub fn new(channels: usize, bins: usize, quadratic: T) -> Self {
        Self {
            quadratic: vec![quadratic; channels],
            linear: vec![T::zero(); channels],
            bin_bias: vec![T::zero(); bins],
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            quadratic: vec![T::zero(); self.quadratic.len()],
            linear: vec![T::zero(); self.linear.len()],
            bin_bias: vec![T::zero(); self.bin_bias.len()],
        }
    }
}

/// Per-voxel logits; out-of-range voxels hold `-inf`.
pub fn score_logits<T: Real>(cost: &Volume4<T>, score: &ScoreParams<T>) -> Result<Vec<T>> {
    if score.quadratic.len() != cost.channels || score.linear.len() != cost.channels {
        return Err(Error::Dimension(format!(
            "score expects {} channels, volume has {}",
            score.quadratic.len(),
            cost.channels
        )));
    }
    if score.bin_bias.len() != cost.disparities {
        return Err(Error::Dimension(format!(
            "score has {} bin biases, volume has {} bins",
            score.bin_bias.len(),
            cost.disparities
        )));
    }
    let cells = cost.cell_count();
    let plane = cost.height * cost.width;
    let mut logits = vec![T::zero(); cells];
    logits
        .par_chunks_mut(plane)
        .enumerate()
        .for_each(|(d, out)| {
            out.fill(score.bin_bias[d]);
            for c in 0..cost.channels {
                let (a, l) = (score.quadratic[c], score.linear[c]);
                let src = &cost.channel(c)[d * plane..(d + 1) * plane];
                for (o, x) in out.iter_mut().zip(src) {
                    *o = *o + *x * (l - a * *x);
                }
            }
            for (k, o) in out.iter_mut().enumerate() {
                if !cost.is_in_range(d * plane + k) {
                    *o = T::neg_infinity();
                }
            }
        });
    Ok(logits)
}

/// Confidence volume `Ψ`: softmax of the scores over the disparity axis.
/// A column whose voxels are all out of range stays all-zero.
pub fn confidence_volume<T: Real>(cost: &Volume4<T>, score: &ScoreParams<T>) -> Result<Volume4<T>> {
    let logits = score_logits(cost, score)?;
    Ok(softmax_columns(
        &logits,
        cost.disparities,
        cost.height,
        cost.width,
        cost.strides,
    ))
}

pub fn softmax_columns<T: Real>(
    logits: &[T],
    bins: usize,
    h: usize,
    w: usize,
    strides: VolumeStrides,
) -> Volume4<T> {
    let plane = h * w;
    let mut psi = Volume4::zeros(1, bins, h, w, strides);
    let cols: Vec<Vec<T>> = (0..plane)
        .into_par_iter()
        .map(|p| {
            let max = (0..bins)
                .map(|d| logits[d * plane + p])
                .fold(T::neg_infinity(), T::max);
            if max == T::neg_infinity() {
                return vec![T::zero(); bins];
            }
            let e: Vec<T> = (0..bins)
                .map(|d| (logits[d * plane + p] - max).exp())
                .collect();
            let z: T = e.iter().copied().sum();
            e.into_iter().map(|v| v / z).collect()
        })
        .collect();
    for (p, col) in cols.into_iter().enumerate() {
        for (d, v) in col.into_iter().enumerate() {
            psi.data[d * plane + p] = v;
        }
    }
    psi
}

/// Voxel-resolution soft-argmax `disparity_stride · Σ_d d·Ψ(d,i,j)` in pixels.
/// A column is valid when its confidences are normalized (sum > 0).
pub fn soft_argmax_voxel<T: Real>(psi: &Volume4<T>) -> PixelMap<T> {
    let plane = psi.height * psi.width;
    let stride = T::from_usize_lossy(psi.strides.disparity_stride);
    let mut values = vec![T::zero(); plane];
    let mut valid = vec![false; plane];
    for p in 0..plane {
        let mut acc = T::zero();
        let mut mass = T::zero();
        for d in 0..psi.disparities {
            let v = psi.data[d * plane + p];
            acc = acc + T::from_usize_lossy(d) * v;
            mass = mass + v;
        }
        values[p] = acc * stride;
        valid[p] = mass > T::zero();
    }
    PixelMap {
        width: psi.width,
        height: psi.height,
        values,
        valid,
    }
}

/// Bilinear upsampling of a voxel-resolution map to the full image. A pixel
/// is valid when every voxel with non-zero weight is valid.
pub fn upsample_disparity<T: Real>(
    vox: &PixelMap<T>,
    spatial_stride: usize,
    width: usize,
    height: usize,
) -> DisparityMap<T> {
    let s = spatial_stride as f64;
    let mut values = vec![T::zero(); width * height];
    let mut valid = vec![false; width * height];
    for y in 0..height {
        for x in 0..width {
            let st = bilinear_stencil(vox.height, vox.width, x as f64 / s, y as f64 / s);
            let k = y * width + x;
            values[k] = st.gather(&vox.values);
            valid[k] = st.iter().all(|(i, _)| vox.valid[i]);
        }
    }
    PixelMap {
        width,
        height,
        values,
        valid,
    }
}

/// Adjoint of [`upsample_disparity`].
pub fn upsample_disparity_backward<T: Real>(
    grad_full: &[T],
    spatial_stride: usize,
    width: usize,
    height: usize,
    vox_width: usize,
    vox_height: usize,
) -> Vec<T> {
    let s = spatial_stride as f64;
    let mut g = vec![T::zero(); vox_width * vox_height];
    for y in 0..height {
        for x in 0..width {
            let gf = grad_full[y * width + x];
            if gf != T::zero() {
                bilinear_stencil(vox_height, vox_width, x as f64 / s, y as f64 / s)
                    .scatter(gf, &mut g);
            }
        }
    }
    g
}

/// Full-resolution disparity map from `Ψ`.
pub fn soft_argmax_disparity<T: Real>(
    psi: &Volume4<T>,
    width: usize,
    height: usize,
) -> DisparityMap<T> {
    upsample_disparity(
        &soft_argmax_voxel(psi),
        psi.strides.spatial_stride,
        width,
        height,
    )
}

/// Per-pixel `b·k/d`; invalid or non-positive disparities become invalid.
pub fn disparity_map_to_depth<T: Real>(disp: &DisparityMap<T>, rig: &RectifiedRig) -> DepthMap<T> {
    let bk = T::lit(rig.bk());
    let mut values = vec![T::zero(); disp.values.len()];
    let mut valid = vec![false; disp.values.len()];
    for (k, (&d, &ok)) in disp.values.iter().zip(&disp.valid).enumerate() {
        if ok && d > T::zero() {
            values[k] = bk / d;
            valid[k] = true;
        }
    }
    PixelMap {
        width: disp.width,
        height: disp.height,
        values,
        valid,
    }
}

/// Adds `disparity_stride · d · g(i,j)` to `dpsi(d,i,j)`: adjoint of the
/// voxel soft-argmax.
pub fn soft_argmax_backward<T: Real>(psi: &Volume4<T>, grad_vox: &[T], dpsi: &mut [T]) {
    let plane = psi.height * psi.width;
    let stride = T::from_usize_lossy(psi.strides.disparity_stride);
    for d in 0..psi.disparities {
        let f = stride * T::from_usize_lossy(d);
        for p in 0..plane {
            dpsi[d * plane + p] = dpsi[d * plane + p] + f * grad_vox[p];
        }
    }
}

/// Back-propagates `dL/dΨ` through the column softmax and the score layer.
pub fn confidence_backward<T: Real>(
    cost: &Volume4<T>,
    psi: &Volume4<T>,
    score: &ScoreParams<T>,
    dpsi: &[T],
) -> ScoreParams<T> {
    let plane = cost.height * cost.width;
    let bins = cost.disparities;
    // dL/dlogit = Ψ ⊙ (g − <Ψ, g>) per column.
    let mut dlogit = vec![T::zero(); bins * plane];
    for p in 0..plane {
        let mut dot = T::zero();
        for d in 0..bins {
            dot = dot + psi.data[d * plane + p] * dpsi[d * plane + p];
        }
        for d in 0..bins {
            let k = d * plane + p;
            dlogit[k] = psi.data[k] * (dpsi[k] - dot);
        }
    }
    let mut grad = score.zeros_like();
    for d in 0..bins {
        grad.bin_bias[d] = dlogit[d * plane..(d + 1) * plane].iter().copied().sum();
    }
    let per_channel: Vec<(T, T)> = (0..cost.channels)
        .into_par_iter()
        .map(|c| {
            let src = cost.channel(c);
            let mut gq = T::zero();
            let mut gl = T::zero();
            for (x, g) in src.iter().zip(&dlogit) {
                gl = gl + *x * *g;
                gq = gq - *x * *x * *g;
            }
            (gq, gl)
        })
        .collect();
    for (c, (gq, gl)) in per_channel.into_iter().enumerate() {
        grad.quadratic[c] = gq;
        grad.linear[c] = gl;
    }
    grad
}
