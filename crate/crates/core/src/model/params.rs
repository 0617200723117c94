use crate::cost::{ChannelMix, ScoreParams};
use crate::error::{Error, Result};
use crate::scalar::Real;

use super::mlp::Mlp;

/// A named parameter array as stored in checkpoints.
#[derive(Debug, Clone, PartialEq)]
pub struct NamedArray<T> {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<T>,
}

/// A trainable parameter group with a stable flat layout.
pub trait ParamGroup<T: Real> {
    fn arrays(&self) -> Vec<NamedArray<T>>;

    /// Restores from arrays produced by [`ParamGroup::arrays`] (same names and sizes).
    fn load_arrays(&mut self, arrays: &[NamedArray<T>]) -> Result<()>;

    fn flatten(&self) -> Vec<T> {
        self.arrays().into_iter().flat_map(|a| a.data).collect()
    }

    fn unflatten(&mut self, flat: &[T]) -> Result<()> {
        let mut arrays = self.arrays();
        let total: usize = arrays.iter().map(|a| a.data.len()).sum();
        if total != flat.len() {
            return Err(Error::Dimension(format!(
                "flat parameter vector has {} values, expected {total}",
                flat.len()
            )));
        }
        let mut off = 0;
        for a in &mut arrays {
            let n = a.data.len();
            a.data.copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        self.load_arrays(&arrays)
    }

    fn param_count(&self) -> usize {
        self.arrays().iter().map(|a| a.data.len()).sum()
    }
}

fn take<T: Real>(arrays: &[NamedArray<T>], name: &str, len: usize) -> Result<Vec<T>> {
    let a = arrays
        .iter()
        .find(|a| a.name == name)
        .ok_or_else(|| Error::Format(format!("missing parameter array {name:?}")))?;
    if a.data.len() != len {
        return Err(Error::Dimension(format!(
            "parameter {name:?} has {} values, expected {len}",
            a.data.len()
        )));
    }
    Ok(a.data.clone())
}

fn arr<T: Real>(name: &str, dims: &[usize], data: &[T]) -> NamedArray<T> {
    NamedArray {
        name: name.to_string(),
        dims: dims.to_vec(),
        data: data.to_vec(),
    }
}

impl<T: Real> ParamGroup<T> for ScoreParams<T> {
    fn arrays(&self) -> Vec<NamedArray<T>> {
        vec![
            arr("score.quadratic", &[self.quadratic.len()], &self.quadratic),
            arr("score.linear", &[self.linear.len()], &self.linear),
            arr("score.bin_bias", &[self.bin_bias.len()], &self.bin_bias),
        ]
    }

    fn load_arrays(&mut self, a: &[NamedArray<T>]) -> Result<()> {
        self.quadratic = take(a, "score.quadratic", self.quadratic.len())?;
        self.linear = take(a, "score.linear", self.linear.len())?;
        self.bin_bias = take(a, "score.bin_bias", self.bin_bias.len())?;
        Ok(())
    }
}

impl<T: Real> ParamGroup<T> for ChannelMix<T> {
    fn arrays(&self) -> Vec<NamedArray<T>> {
        vec![
            arr("mix.weight", &[self.c_out, self.c_in], &self.weight),
            arr("mix.bias", &[self.c_out], &self.bias),
        ]
    }

    fn load_arrays(&mut self, a: &[NamedArray<T>]) -> Result<()> {
        self.weight = take(a, "mix.weight", self.c_out * self.c_in)?;
        self.bias = take(a, "mix.bias", self.c_out)?;
        Ok(())
    }
}

impl<T: Real> ParamGroup<T> for Mlp<T> {
    fn arrays(&self) -> Vec<NamedArray<T>> {
        let mut out = Vec::new();
        for l in 0..self.weights.len() {
            out.push(arr(
                &format!("mlp.{l}.weight"),
                &[self.widths[l + 1], self.widths[l]],
                &self.weights[l],
            ));
            out.push(arr(
                &format!("mlp.{l}.bias"),
                &[self.widths[l + 1]],
                &self.biases[l],
            ));
        }
        out
    }

    fn load_arrays(&mut self, a: &[NamedArray<T>]) -> Result<()> {
        for l in 0..self.weights.len() {
            self.weights[l] = take(a, &format!("mlp.{l}.weight"), self.weights[l].len())?;
            self.biases[l] = take(a, &format!("mlp.{l}.bias"), self.biases[l].len())?;
        }
        Ok(())
    }
}
