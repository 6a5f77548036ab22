//! Analytic gradients against central finite differences.

use std::collections::BTreeSet;

use ndarray::Array2;
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Batch, Linear, Model, Parameters, Task};
use crate::error::{Error, Result};

pub const MIN_COORDINATES: usize = 200;

/// Denominator floor for the relative error. Coordinates whose true
/// gradient is zero (the key bias, for one) produce a numeric estimate of
/// pure rounding noise, around `ulp(loss) / epsilon`, and are judged by
/// absolute error against this floor instead.
pub const RELATIVE_FLOOR: f64 = 1e-6;

pub trait GradObjective {
    fn loss(&self) -> Result<f64>;
    /// Tensor-aligned with [`GradObjective::parameters_mut`].
    fn gradient(&self) -> Result<Vec<Vec<f64>>>;
    fn parameters_mut(&mut self) -> Vec<(String, &mut [f64])>;
    /// Coordinates of a tensor worth probing.
    fn candidates(&self, _tensor: &str, len: usize) -> Vec<usize> {
        (0..len).collect()
    }
}

/// One task's loss on a fixed batch, over the encoder and that head.
pub struct ModelObjective<'a> {
    pub model: &'a mut Model,
    pub task: Task,
    pub batch: &'a Batch,
    pub targets: &'a Array2<i32>,
}

impl GradObjective for ModelObjective<'_> {
    fn loss(&self) -> Result<f64> {
        self.model.loss(self.batch, self.targets, self.task)
    }

    fn gradient(&self) -> Result<Vec<Vec<f64>>> {
        let (_, g) = self.model.loss_and_grads(self.batch, self.targets, self.task)?;
        Ok(g.tensors().into_iter().map(|(_, t)| t.to_vec()).collect())
    }

    fn parameters_mut(&mut self) -> Vec<(String, &mut [f64])> {
        self.model.task_tensors_mut(self.task)
    }

    fn candidates(&self, tensor: &str, len: usize) -> Vec<usize> {
        let hidden = self.model.config().hidden;
        let rows: BTreeSet<usize> = match tensor {
            "token_embedding" => self.batch.ids.iter().map(|&i| i as usize).collect(),
            "position_embedding" => (0..self.batch.seq_len()).collect(),
            _ => return (0..len).collect(),
        };
        rows.into_iter().flat_map(|r| r * hidden..(r + 1) * hidden).collect()
    }
}

/// Least-squares linear regression on fixed features. The loss is
/// quadratic in every parameter, so central differences are exact up to
/// rounding.
pub struct LinearProbe {
    pub features: Array2<f64>,
    pub targets: Array2<f64>,
    pub head: Linear,
}

impl LinearProbe {
    fn residual(&self) -> Array2<f64> {
        self.head.forward(self.features.view()) - &self.targets
    }
}

impl GradObjective for LinearProbe {
    fn loss(&self) -> Result<f64> {
        let r = self.residual();
        Ok(0.5 * r.mapv(|v| v * v).sum() / r.nrows() as f64)
    }

    fn gradient(&self) -> Result<Vec<Vec<f64>>> {
        let r = self.residual();
        let dy = &r / r.nrows() as f64;
        let mut g = self.head.zeros_like();
        self.head.backward(self.features.view(), &dy, &mut g);
        Ok(g.tensors().into_iter().map(|(_, t)| t.to_vec()).collect())
    }

    fn parameters_mut(&mut self) -> Vec<(String, &mut [f64])> {
        self.head.tensors_mut()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub coordinates: usize,
    pub worst_tensor: String,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

fn set<O: GradObjective>(obj: &mut O, tensor: usize, index: usize, value: f64) {
    obj.parameters_mut()[tensor].1[index] = value;
}

/// Probes at least `coordinates` parameters, spread evenly across tensors,
/// and returns the largest relative error found.
pub fn grad_check<O: GradObjective>(
    obj: &mut O,
    epsilon: f64,
    coordinates: usize,
    seed: u64,
) -> Result<GradCheckReport> {
    if !(epsilon > 0.0) || !epsilon.is_finite() {
        return Err(Error::config(format!(
            "finite-difference epsilon must be positive, got {epsilon}"
        )));
    }
    let analytic = obj.gradient()?;
    let layout: Vec<(String, usize)> = obj.parameters_mut().into_iter().map(|(n, t)| (n, t.len())).collect();
    if layout.len() != analytic.len() {
        return Err(Error::config("gradient and parameter tensors are misaligned"));
    }
    let per_tensor = coordinates.div_ceil(layout.len().max(1));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        coordinates: 0,
        worst_tensor: String::new(),
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
    };
    for (t, (name, len)) in layout.iter().enumerate() {
        let cands = obj.candidates(name, *len);
        let picks = index::sample(&mut rng, cands.len(), per_tensor.min(cands.len()));
        for p in picks.iter() {
            let i = cands[p];
            let orig = obj.parameters_mut()[t].1[i];
            set(obj, t, i, orig + epsilon);
            let plus = obj.loss()?;
            set(obj, t, i, orig - epsilon);
            let minus = obj.loss()?;
            set(obj, t, i, orig);
            let numeric = (plus - minus) / (2.0 * epsilon);
            let a = analytic[t][i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(RELATIVE_FLOOR);
            report.coordinates += 1;
            if rel > report.max_relative_error || report.worst_tensor.is_empty() {
                report.max_relative_error = rel.max(report.max_relative_error);
                report.worst_tensor = name.clone();
                report.worst_index = i;
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}
