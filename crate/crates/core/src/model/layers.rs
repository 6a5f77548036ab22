use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};

/// Named flat views over every trainable tensor, in a fixed order.
pub trait Parameters {
    fn tensors(&self) -> Vec<(String, &[f64])>;
    fn tensors_mut(&mut self) -> Vec<(String, &mut [f64])>;

    fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }
}

pub(crate) fn prefixed<'p, T: 'p>(prefix: &'p str, items: Vec<(String, T)>) -> impl Iterator<Item = (String, T)> + 'p {
    items.into_iter().map(move |(n, t)| (format!("{prefix}.{n}"), t))
}

pub(crate) fn normal_matrix<R: Rng>(rows: usize, cols: usize, std: f64, rng: &mut R) -> Array2<f64> {
    let dist = Normal::new(0.0, std).expect("positive std");
    Array2::from_shape_simple_fn((rows, cols), || dist.sample(rng))
}

fn slice(a: &Array2<f64>) -> &[f64] {
    a.as_slice().expect("standard layout")
}

fn slice_mut(a: &mut Array2<f64>) -> &mut [f64] {
    a.as_slice_mut().expect("standard layout")
}

/// Affine map `x W + b` with `W` stored input-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

impl Linear {
    pub fn new<R: Rng>(input: usize, output: usize, std: f64, rng: &mut R) -> Self {
        Self {
            w: normal_matrix(input, output, std, rng),
            b: Array1::zeros(output),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            w: Array2::zeros(self.w.raw_dim()),
            b: Array1::zeros(self.b.raw_dim()),
        }
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> Array2<f64> {
        x.dot(&self.w) + &self.b
    }

    /// Accumulates parameter gradients into `grad` and returns `dL/dx`.
    pub fn backward(&self, x: ArrayView2<f64>, dy: &Array2<f64>, grad: &mut Linear) -> Array2<f64> {
        grad.w += &x.t().dot(dy);
        grad.b += &dy.sum_axis(Axis(0));
        dy.dot(&self.w.t())
    }
}

impl Parameters for Linear {
    fn tensors(&self) -> Vec<(String, &[f64])> {
        vec![
            ("w".into(), slice(&self.w)),
            ("b".into(), self.b.as_slice().expect("contiguous")),
        ]
    }

    fn tensors_mut(&mut self) -> Vec<(String, &mut [f64])> {
        vec![
            ("w".into(), slice_mut(&mut self.w)),
            ("b".into(), self.b.as_slice_mut().expect("contiguous")),
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
    pub eps: f64,
}

/// Saved normalized activations for the backward pass.
#[derive(Debug, Clone)]
pub struct LayerNormCache {
    xhat: Array2<f64>,
    rstd: Vec<f64>,
}

impl LayerNorm {
    pub fn new(dim: usize, eps: f64) -> Self {
        Self {
            gamma: Array1::ones(dim),
            beta: Array1::zeros(dim),
            eps,
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            gamma: Array1::zeros(self.gamma.raw_dim()),
            beta: Array1::zeros(self.beta.raw_dim()),
            eps: self.eps,
        }
    }

    pub fn forward(&self, x: &Array2<f64>) -> (Array2<f64>, LayerNormCache) {
        let (n, d) = x.dim();
        let mut xhat = x.clone();
        let mut rstd = Vec::with_capacity(n);
        for mut row in xhat.rows_mut() {
            let mean = row.sum() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let r = 1.0 / (var + self.eps).sqrt();
            row.mapv_inplace(|v| (v - mean) * r);
            rstd.push(r);
        }
        let y = &xhat * &self.gamma + &self.beta;
        (y, LayerNormCache { xhat, rstd })
    }

    pub fn backward(&self, dy: &Array2<f64>, cache: &LayerNormCache, grad: &mut LayerNorm) -> Array2<f64> {
        let d = dy.ncols() as f64;
        grad.gamma += &(dy * &cache.xhat).sum_axis(Axis(0));
        grad.beta += &dy.sum_axis(Axis(0));
        let dxhat = dy * &self.gamma;
        let mut dx = Array2::zeros(dy.raw_dim());
        for (i, ((mut out, g), xh)) in dx
            .rows_mut()
            .into_iter()
            .zip(dxhat.rows())
            .zip(cache.xhat.rows())
            .enumerate()
        {
            let mean_g = g.sum() / d;
            let mean_gx = g.iter().zip(xh.iter()).map(|(a, b)| a * b).sum::<f64>() / d;
            let r = cache.rstd[i];
            for ((o, &gv), &xv) in out.iter_mut().zip(g.iter()).zip(xh.iter()) {
                *o = r * (gv - mean_g - xv * mean_gx);
            }
        }
        dx
    }
}

impl Parameters for LayerNorm {
    fn tensors(&self) -> Vec<(String, &[f64])> {
        vec![
            ("gamma".into(), self.gamma.as_slice().expect("contiguous")),
            ("beta".into(), self.beta.as_slice().expect("contiguous")),
        ]
    }

    fn tensors_mut(&mut self) -> Vec<(String, &mut [f64])> {
        vec![
            ("gamma".into(), self.gamma.as_slice_mut().expect("contiguous")),
            ("beta".into(), self.beta.as_slice_mut().expect("contiguous")),
        ]
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_K: f64 = 0.044_715;

/// GELU, tanh approximation.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_K * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn gelu_derivative_matches_central_difference() {
        for &x in &[-3.0, -1.0, -0.1, 0.0, 0.3, 1.7, 4.0] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8, "x={x}");
        }
    }

    #[test]
    fn layer_norm_output_is_standardized() {
        let ln = LayerNorm::new(4, 1e-5);
        let (y, _) = ln.forward(&array![[1.0, 2.0, 3.0, 4.0], [0.0, 0.0, 5.0, -5.0]]);
        for row in y.rows() {
            assert!(row.sum().abs() < 1e-12);
            let var = row.iter().map(|v| v * v).sum::<f64>() / 4.0;
            assert!((var - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn layer_norm_backward_matches_central_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = normal_matrix(3, 5, 1.0, &mut rng);
        let mut ln = LayerNorm::new(5, 1e-5);
        ln.gamma = Array1::from_vec(vec![0.5, 1.5, -1.0, 2.0, 1.0]);
        let w = normal_matrix(3, 5, 1.0, &mut rng);
        let loss = |x: &Array2<f64>| (ln.forward(x).0 * &w).sum();
        let (_, cache) = ln.forward(&x);
        let mut grad = ln.zeros_like();
        let dx = ln.backward(&w, &cache, &mut grad);
        let h = 1e-6;
        for i in 0..3 {
            for j in 0..5 {
                let mut xp = x.clone();
                xp[[i, j]] += h;
                let mut xm = x.clone();
                xm[[i, j]] -= h;
                let fd = (loss(&xp) - loss(&xm)) / (2.0 * h);
                assert!((fd - dx[[i, j]]).abs() < 1e-6);
            }
        }
    }
}
