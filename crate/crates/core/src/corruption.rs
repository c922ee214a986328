//! Forward operators and measurement noise: `y = A x + sigma n`.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::linalg;
use crate::tensor::Tensor;

const LN_2PI: f64 = 1.837_877_066_409_345_6;

/// A linear measurement operator.
#[derive(Debug, Clone)]
pub enum LinearOperator {
    Identity { dim: usize },
    /// Dense `m x d` matrix.
    Dense(Tensor),
    /// Separable 2-d convolution with reflection padding on `h x w` images
    /// flattened row-major to `d = h * w`.
    Blur { height: usize, width: usize, kernel: Vec<f64> },
}

/// Normalized 1-d Gaussian kernel.
pub fn gaussian_kernel(size: usize, sigma: f64) -> Vec<f64> {
    let half = (size / 2) as isize;
    let mut k: Vec<f64> = (0..size)
        .map(|i| {
            let x = i as isize - half;
            (-(x * x) as f64 / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

fn reflect(p: isize, n: usize) -> usize {
    let n = n as isize;
    let mut p = p;
    // Mirror without repeating the edge sample more than once per bounce.
    loop {
        if p < 0 {
            p = -p - 1;
        } else if p >= n {
            p = 2 * n - 1 - p;
        } else {
            return p as usize;
        }
    }
}

/// 1-d correlation along rows of an `h x w` image, reflection padded.
fn conv_rows(img: &[f64], h: usize, w: usize, k: &[f64], out: &mut [f64]) {
    let half = (k.len() / 2) as isize;
    for r in 0..h {
        for c in 0..w {
            let mut s = 0.0;
            for (j, kv) in k.iter().enumerate() {
                let src = reflect(c as isize + j as isize - half, w);
                s += kv * img[r * w + src];
            }
            out[r * w + c] = s;
        }
    }
}

/// Exact transpose of [`conv_rows`]: scatter instead of gather.
fn conv_rows_adjoint(img: &[f64], h: usize, w: usize, k: &[f64], out: &mut [f64]) {
    out.iter_mut().for_each(|v| *v = 0.0);
    let half = (k.len() / 2) as isize;
    for r in 0..h {
        for c in 0..w {
            let v = img[r * w + c];
            for (j, kv) in k.iter().enumerate() {
                let src = reflect(c as isize + j as isize - half, w);
                out[r * w + src] += kv * v;
            }
        }
    }
}

fn transpose_img(img: &[f64], h: usize, w: usize, out: &mut [f64]) {
    for r in 0..h {
        for c in 0..w {
            out[c * h + r] = img[r * w + c];
        }
    }
}

impl LinearOperator {
    /// Separable Gaussian blur with the given kernel size and width.
    pub fn gaussian_blur(height: usize, width: usize, kernel_size: usize, sigma_ker: f64) -> Self {
        LinearOperator::Blur { height, width, kernel: gaussian_kernel(kernel_size, sigma_ker) }
    }

    pub fn input_dim(&self) -> usize {
        match self {
            LinearOperator::Identity { dim } => *dim,
            LinearOperator::Dense(a) => a.cols(),
            LinearOperator::Blur { height, width, .. } => height * width,
        }
    }

    pub fn output_dim(&self) -> usize {
        match self {
            LinearOperator::Identity { dim } => *dim,
            LinearOperator::Dense(a) => a.rows(),
            LinearOperator::Blur { height, width, .. } => height * width,
        }
    }

    /// `A x`.
    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.input_dim() {
            return Err(Error::ShapeMismatch {
                op: "operator::apply",
                lhs: vec![self.input_dim()],
                rhs: vec![x.len()],
            });
        }
        match self {
            LinearOperator::Identity { .. } => Ok(x.to_vec()),
            LinearOperator::Dense(a) => linalg::matvec(a, x),
            LinearOperator::Blur { height, width, kernel } => {
                let (h, w) = (*height, *width);
                let mut tmp = vec![0.0; h * w];
                conv_rows(x, h, w, kernel, &mut tmp);
                // Columns: transpose, row-convolve, transpose back.
                let mut tr = vec![0.0; h * w];
                transpose_img(&tmp, h, w, &mut tr);
                let mut tr2 = vec![0.0; h * w];
                conv_rows(&tr, w, h, kernel, &mut tr2);
                let mut out = vec![0.0; h * w];
                transpose_img(&tr2, w, h, &mut out);
                Ok(out)
            }
        }
    }

    /// `A^T y`, an exact transpose of [`LinearOperator::apply`].
    pub fn apply_adjoint(&self, y: &[f64]) -> Result<Vec<f64>> {
        if y.len() != self.output_dim() {
            return Err(Error::ShapeMismatch {
                op: "operator::apply_adjoint",
                lhs: vec![self.output_dim()],
                rhs: vec![y.len()],
            });
        }
        match self {
            LinearOperator::Identity { .. } => Ok(y.to_vec()),
            LinearOperator::Dense(a) => linalg::matvec_t(a, y),
            LinearOperator::Blur { height, width, kernel } => {
                let (h, w) = (*height, *width);
                // Adjoint of (rows then cols) is (cols^T then rows^T).
                let mut tr = vec![0.0; h * w];
                transpose_img(y, h, w, &mut tr);
                let mut tr2 = vec![0.0; h * w];
                conv_rows_adjoint(&tr, w, h, kernel, &mut tr2);
                let mut tmp = vec![0.0; h * w];
                transpose_img(&tr2, w, h, &mut tmp);
                let mut out = vec![0.0; h * w];
                conv_rows_adjoint(&tmp, h, w, kernel, &mut out);
                Ok(out)
            }
        }
    }

    pub fn apply_batch(&self, x: &Tensor) -> Result<Tensor> {
        let mut data = Vec::with_capacity(x.rows() * self.output_dim());
        for i in 0..x.rows() {
            data.extend(self.apply(x.row(i))?);
        }
        Tensor::from_shape(x.rows(), self.output_dim(), data)
    }

    /// Materialize as a dense matrix (column probes).
    pub fn to_dense(&self) -> Result<Tensor> {
        match self {
            LinearOperator::Identity { dim } => Ok(Tensor::eye(*dim)),
            LinearOperator::Dense(a) => Ok(a.clone()),
            _ => {
                let (m, d) = (self.output_dim(), self.input_dim());
                let mut out = vec![0.0; m * d];
                let mut e = vec![0.0; d];
                for j in 0..d {
                    e[j] = 1.0;
                    let col = self.apply(&e)?;
                    for i in 0..m {
                        out[i * d + j] = col[i];
                    }
                    e[j] = 0.0;
                }
                Tensor::from_shape(m, d, out)
            }
        }
    }

    /// `||A^T A||` (spectral norm) by power iteration (100 iterations,
    /// tolerance 1e-10).
    pub fn gram_norm(&self) -> f64 {
        let d = self.input_dim();
        linalg::power_iteration(d, 100, 1e-10, |v| {
            let av = self.apply(v).expect("dim checked");
            self.apply_adjoint(&av).expect("dim checked")
        })
    }

    /// `||A||` (largest singular value).
    pub fn operator_norm(&self) -> f64 {
        self.gram_norm().max(0.0).sqrt()
    }
}

/// Forward operator plus Gaussian noise scale.
#[derive(Debug, Clone)]
pub struct CorruptionModel {
    operator: LinearOperator,
    noise_sigma: f64,
}

impl CorruptionModel {
    /// Rejects negative noise scales; `sigma = 0` yields a noiseless model
    /// whose density is undefined.
    pub fn new(operator: LinearOperator, noise_sigma: f64) -> Result<Self> {
        if noise_sigma < 0.0 || !noise_sigma.is_finite() {
            return Err(Error::invalid("CorruptionModel::new", format!("sigma = {noise_sigma}")));
        }
        Ok(CorruptionModel { operator, noise_sigma })
    }

    pub fn operator(&self) -> &LinearOperator {
        &self.operator
    }

    pub fn noise_sigma(&self) -> f64 {
        self.noise_sigma
    }

    /// `A x + sigma n` with `n ~ N(0, I_m)` drawn from `rng`.
    pub fn apply(&self, x: &[f64], rng: &mut impl Rng) -> Result<Vec<f64>> {
        let mut y = self.operator.apply(x)?;
        for v in &mut y {
            *v += self.noise_sigma * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng);
        }
        Ok(y)
    }

    /// `A x` without noise.
    pub fn apply_noiseless(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.operator.apply(x)
    }

    /// `log p_noise(residual) = -||r||^2 / (2 sigma^2) - (m/2) log(2 pi sigma^2)`.
    pub fn noise_log_density(&self, residual: &[f64]) -> Result<f64> {
        if self.noise_sigma <= 0.0 {
            return Err(Error::numeric("noise_log_density", "sigma must be positive"));
        }
        let m = residual.len() as f64;
        let nsq: f64 = residual.iter().map(|v| v * v).sum();
        Ok(-nsq / (2.0 * self.noise_sigma * self.noise_sigma)
            - 0.5 * m * (LN_2PI + 2.0 * self.noise_sigma.ln()))
    }
}
