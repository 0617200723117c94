use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::loss::sigmoid;
use crate::error::{Error, Result};
use crate::scalar::Real;

pub const LEAKY_SLOPE: f64 = 0.01;

/// Fully connected network with leaky-ReLU hidden layers and a single
/// sigmoid output.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp<T> {
    pub widths: Vec<usize>,
    /// Per layer, row-major `out × in`.
    pub weights: Vec<Vec<T>>,
    pub biases: Vec<Vec<T>>,
}

/// Pre-activations of every layer for one input.
#[derive(Debug, Clone)]
pub struct MlpCache<T> {
    pub input: Vec<T>,
    pub pre: Vec<Vec<T>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpGrad<T> {
    pub weights: Vec<Vec<T>>,
    pub biases: Vec<Vec<T>>,
}

#[inline]
fn leaky<T: Real>(x: T) -> T {
    if x > T::zero() {
        x
    } else {
        x * T::lit(LEAKY_SLOPE)
    }
}

impl<T: Real> Mlp<T> {
    pub fn zeros(widths: &[usize]) -> Result<Self> {
        if widths.len() < 2 || *widths.last().unwrap() != 1 || widths.contains(&0) {
            return Err(Error::Config(format!(
                "mlp widths must be non-zero, at least two entries and end in 1, got {widths:?}"
            )));
        }
        Ok(Self {
            widths: widths.to_vec(),
            weights: widths
                .windows(2)
                .map(|w| vec![T::zero(); w[0] * w[1]])
                .collect(),
            biases: widths[1..].iter().map(|&n| vec![T::zero(); n]).collect(),
        })
    }

    /// He-normal hidden weights, zero biases.
    pub fn random<R: Rng + ?Sized>(widths: &[usize], rng: &mut R) -> Result<Self> {
        let mut m = Self::zeros(widths)?;
        for (l, w) in m.weights.iter_mut().enumerate() {
            let fan_in = widths[l] as f64;
            let gain = if l + 1 == widths.len() - 1 { 1.0 } else { 2.0 };
            let normal = Normal::new(0.0, (gain / fan_in).sqrt()).expect("valid normal");
            for v in w.iter_mut() {
                *v = T::lit(normal.sample(rng));
            }
        }
        Ok(m)
    }

    pub fn input_width(&self) -> usize {
        self.widths[0]
    }

    pub fn zero_grad(&self) -> MlpGrad<T> {
        MlpGrad {
            weights: self
                .weights
                .iter()
                .map(|w| vec![T::zero(); w.len()])
                .collect(),
            biases: self
                .biases
                .iter()
                .map(|b| vec![T::zero(); b.len()])
                .collect(),
        }
    }

    fn check(&self, x: &[T]) -> Result<()> {
        if x.len() != self.widths[0] {
            return Err(Error::Dimension(format!(
                "mlp expects {} inputs, got {}",
                self.widths[0],
                x.len()
            )));
        }
        Ok(())
    }

    fn layer(&self, l: usize, x: &[T]) -> Vec<T> {
        let n_in = self.widths[l];
        self.weights[l]
            .chunks_exact(n_in)
            .zip(&self.biases[l])
            .map(|(row, b)| row.iter().zip(x).fold(*b, |a, (w, v)| a + *w * *v))
            .collect()
    }

    /// Output logit (pre-sigmoid).
    pub fn forward_logit(&self, x: &[T]) -> Result<T> {
        Ok(*self.forward_cached(x)?.pre.last().unwrap().first().unwrap())
    }

    /// Occupancy `s = σ(logit) ∈ (0, 1)`.
    pub fn forward(&self, x: &[T]) -> Result<T> {
        self.forward_logit(x).map(sigmoid)
    }

    pub fn forward_batch(&self, xs: &[Vec<T>]) -> Result<Vec<T>> {
        xs.iter().map(|x| self.forward(x)).collect()
    }

    pub fn forward_cached(&self, x: &[T]) -> Result<MlpCache<T>> {
        self.check(x)?;
        let layers = self.weights.len();
        let mut pre = Vec::with_capacity(layers);
        let mut act = x.to_vec();
        for l in 0..layers {
            let z = self.layer(l, &act);
            if l + 1 < layers {
                act = z.iter().map(|v| leaky(*v)).collect();
            }
            pre.push(z);
        }
        Ok(MlpCache {
            input: x.to_vec(),
            pre,
        })
    }

    /// Accumulates `dL/dθ` into `grad` given `dL/dlogit`; returns `dL/dx`.
    pub fn backward(&self, cache: &MlpCache<T>, dlogit: T, grad: &mut MlpGrad<T>) -> Vec<T> {
        let layers = self.weights.len();
        let slope = T::lit(LEAKY_SLOPE);
        let mut delta = vec![dlogit];
        for l in (0..layers).rev() {
            let n_in = self.widths[l];
            let input: Vec<T> = if l == 0 {
                cache.input.clone()
            } else {
                cache.pre[l - 1].iter().map(|v| leaky(*v)).collect()
            };
            for (o, d) in delta.iter().enumerate() {
                grad.biases[l][o] = grad.biases[l][o] + *d;
                let row = &mut grad.weights[l][o * n_in..(o + 1) * n_in];
                for (g, a) in row.iter_mut().zip(&input) {
                    *g = *g + *d * *a;
                }
            }
            let mut dx = vec![T::zero(); n_in];
            for (o, d) in delta.iter().enumerate() {
                let row = &self.weights[l][o * n_in..(o + 1) * n_in];
                for (g, w) in dx.iter_mut().zip(row) {
                    *g = *g + *d * *w;
                }
            }
            if l > 0 {
                for (g, z) in dx.iter_mut().zip(&cache.pre[l - 1]) {
                    if *z <= T::zero() {
                        *g = *g * slope;
                    }
                }
            }
            delta = dx;
        }
        delta
    }
}

impl<T: Real> MlpGrad<T> {
    /// Same layout as the network's flattened parameters.
    pub fn flatten(&self) -> Vec<T> {
        let mut v = Vec::new();
        for (w, b) in self.weights.iter().zip(&self.biases) {
            v.extend_from_slice(w);
            v.extend_from_slice(b);
        }
        v
    }

    pub fn add_assign(&mut self, other: &Self) {
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x = *x + *y);
        }
        for (a, b) in self.biases.iter_mut().zip(&other.biases) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x = *x + *y);
        }
    }
}
