//! The learnable conditional density: a Gaussian head over a (possibly
//! identity) diffeomorphism.
//!
//! `p(x | y)` is Gaussian in `psi(x)` with mean `m(y)` and diagonal
//! covariance `exp(logvar(y))`, times the diffeomorphism's constant
//! Jacobian factor. The mean/log-variance networks share a trunk: a linear
//! embedding, one tanh ResNet block, and an affine head whose zero
//! initialization makes the posterior exactly standard normal at the start.
//! Sampling is reparametrized (`x = psi^{-1}(m + exp(logvar/2) * xi)`), so
//! pathwise gradients flow to every network parameter.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{FlowModel, FlowVars};
use crate::tape::{Tape, VarId};
use crate::tensor::Tensor;

const LN_2PI: f64 = 1.837_877_066_409_345_6;

/// Conditional mean/covariance network with an optional frozen diffeomorphism.
#[derive(Debug, Clone)]
pub struct PosteriorModel {
    /// Frozen diffeomorphism; `None` is the identity.
    diffeo: Option<FlowModel>,
    pub embed_w: Tensor, // [h, m]
    pub embed_b: Tensor, // [h]
    pub res_w1: Tensor,  // [w, h]
    pub res_b1: Tensor,  // [w]
    pub res_w2: Tensor,  // [h, w]
    pub res_b2: Tensor,  // [h]
    pub head_w: Tensor,  // [2d, h]
    pub head_b: Tensor,  // [2d]
    meas_dim: usize,
    dim: usize,
    hidden: usize,
    width: usize,
}

/// Tape-side handles for a registered posterior.
pub struct PosteriorVars {
    pub diffeo: Option<FlowVars>,
    pub embed_w: VarId,
    pub embed_b: VarId,
    pub res_w1: VarId,
    pub res_b1: VarId,
    pub res_w2: VarId,
    pub res_b2: VarId,
    pub head_w: VarId,
    pub head_b: VarId,
}

impl PosteriorVars {
    pub fn param_ids(&self) -> Vec<VarId> {
        vec![
            self.embed_w,
            self.embed_b,
            self.res_w1,
            self.res_b1,
            self.res_w2,
            self.res_b2,
            self.head_w,
            self.head_b,
        ]
    }
}

fn xavier(rows: usize, cols: usize, rng: &mut impl Rng) -> Tensor {
    let std = (1.0 / cols.max(1) as f64).sqrt();
    let data = (0..rows * cols)
        .map(|_| std * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng))
        .collect();
    Tensor::from_shape(rows, cols, data).expect("xavier shape")
}

impl PosteriorModel {
    /// Trunk with a zero-initialized head: `m(y) = 0`, `Sigma(y) = I` at
    /// initialization for every `y`.
    pub fn new(
        meas_dim: usize,
        dim: usize,
        hidden: usize,
        width: usize,
        diffeo: Option<FlowModel>,
        seed: u64,
    ) -> Result<Self> {
        if let Some(f) = &diffeo {
            if f.dim() != dim {
                return Err(Error::ShapeMismatch {
                    op: "PosteriorModel::new",
                    lhs: vec![dim],
                    rhs: vec![f.dim()],
                });
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(PosteriorModel {
            diffeo,
            embed_w: xavier(hidden, meas_dim, &mut rng),
            embed_b: Tensor::zeros(&[hidden]),
            res_w1: xavier(width, hidden, &mut rng),
            res_b1: Tensor::zeros(&[width]),
            res_w2: xavier(hidden, width, &mut rng),
            res_b2: Tensor::zeros(&[hidden]),
            head_w: Tensor::zeros(&[2 * dim, hidden]),
            head_b: Tensor::zeros(&[2 * dim]),
            meas_dim,
            dim,
            hidden,
            width,
        })
    }

    /// The synthetic-curve architecture: measurements in R^3 embedded into
    /// R^10, one ResNet block of width 8, identity diffeomorphism.
    pub fn build_sinusoid(seed: u64) -> Self {
        PosteriorModel::new(3, 3, 10, 8, None, seed).expect("static dims")
    }

    /// Scaled-up template for 14x14 images: R^196 embedded into R^256, one
    /// ResNet block of width 256, identity diffeomorphism.
    pub fn build_mnist14(seed: u64) -> Self {
        PosteriorModel::new(196, 196, 256, 256, None, seed).expect("static dims")
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn meas_dim(&self) -> usize {
        self.meas_dim
    }

    pub fn diffeo(&self) -> Option<&FlowModel> {
        self.diffeo.as_ref()
    }

    /// Total trainable scalar parameters (the frozen diffeomorphism excluded).
    pub fn param_count(&self) -> usize {
        [
            &self.embed_w,
            &self.embed_b,
            &self.res_w1,
            &self.res_b1,
            &self.res_w2,
            &self.res_b2,
            &self.head_w,
            &self.head_b,
        ]
        .iter()
        .map(|t| t.numel())
        .sum()
    }

    pub fn visit_params_mut(&mut self, mut f: impl FnMut(&mut Tensor)) {
        f(&mut self.embed_w);
        f(&mut self.embed_b);
        f(&mut self.res_w1);
        f(&mut self.res_b1);
        f(&mut self.res_w2);
        f(&mut self.res_b2);
        f(&mut self.head_w);
        f(&mut self.head_b);
    }

    pub fn visit_params(&self, mut f: impl FnMut(&Tensor)) {
        f(&self.embed_w);
        f(&self.embed_b);
        f(&self.res_w1);
        f(&self.res_b1);
        f(&self.res_w2);
        f(&self.res_b2);
        f(&self.head_w);
        f(&self.head_b);
    }

    /// Plain evaluation of `(mean(y), logvar(y))`.
    pub fn mean_logvar(&self, y: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        if y.len() != self.meas_dim {
            return Err(Error::ShapeMismatch {
                op: "posterior::mean_logvar",
                lhs: vec![self.meas_dim],
                rhs: vec![y.len()],
            });
        }
        let matvec_b = |w: &Tensor, b: &Tensor, x: &[f64]| -> Vec<f64> {
            (0..w.rows())
                .map(|i| {
                    w.row(i).iter().zip(x).map(|(a, v)| a * v).sum::<f64>() + b.data()[i]
                })
                .collect()
        };
        let h = matvec_b(&self.embed_w, &self.embed_b, y);
        let t: Vec<f64> =
            matvec_b(&self.res_w1, &self.res_b1, &h).iter().map(|v| v.tanh()).collect();
        let r2 = matvec_b(&self.res_w2, &self.res_b2, &t);
        let hr: Vec<f64> = h.iter().zip(&r2).map(|(a, b)| a + b).collect();
        let out = matvec_b(&self.head_w, &self.head_b, &hr);
        Ok((out[..self.dim].to_vec(), out[self.dim..].to_vec()))
    }

    /// `log p(x | y)`.
    pub fn conditional_log_density(&self, x: &[f64], y: &[f64]) -> Result<f64> {
        if x.len() != self.dim {
            return Err(Error::ShapeMismatch {
                op: "posterior::conditional_log_density",
                lhs: vec![self.dim],
                rhs: vec![x.len()],
            });
        }
        let z = match &self.diffeo {
            Some(f) => f.forward_point(x)?,
            None => x.to_vec(),
        };
        let (mean, logvar) = self.mean_logvar(y)?;
        let mut acc = 0.0;
        for i in 0..self.dim {
            let r = z[i] - mean[i];
            acc += r * r * (-logvar[i]).exp() + logvar[i];
        }
        let logdet = self.diffeo.as_ref().map_or(0.0, FlowModel::log_abs_det);
        Ok(-0.5 * acc - 0.5 * self.dim as f64 * LN_2PI + logdet)
    }

    /// Reparametrized samples `psi^{-1}(m(y) + exp(logvar/2) * xi)`.
    pub fn sample(&self, y: &[f64], count: usize, seed: u64) -> Result<Tensor> {
        if count == 0 {
            return Err(Error::invalid("posterior::sample", "count must be >= 1"));
        }
        let (mean, logvar) = self.mean_logvar(y)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut data = Vec::with_capacity(count * self.dim);
        for _ in 0..count {
            let z: Vec<f64> = (0..self.dim)
                .map(|i| {
                    mean[i]
                        + (0.5 * logvar[i]).exp()
                            * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng)
                })
                .collect();
            match &self.diffeo {
                Some(f) => data.extend(f.inverse_point(&z)?),
                None => data.extend(z),
            }
        }
        Tensor::from_shape(count, self.dim, data)
    }

    // ── Tape construction ────────────────────────────────────────────

    pub fn register_params(&self, tape: &mut Tape) -> Result<PosteriorVars> {
        Ok(PosteriorVars {
            diffeo: match &self.diffeo {
                Some(f) => Some(f.register_inputs(tape)),
                None => None,
            },
            embed_w: tape.param(self.embed_w.clone()),
            embed_b: tape.param(self.embed_b.clone()),
            res_w1: tape.param(self.res_w1.clone()),
            res_b1: tape.param(self.res_b1.clone()),
            res_w2: tape.param(self.res_w2.clone()),
            res_b2: tape.param(self.res_b2.clone()),
            head_w: tape.param(self.head_w.clone()),
            head_b: tape.param(self.head_b.clone()),
        })
    }

    pub fn register_inputs(&self, tape: &mut Tape) -> PosteriorVars {
        PosteriorVars {
            diffeo: match &self.diffeo {
                Some(f) => Some(f.register_inputs(tape)),
                None => None,
            },
            embed_w: tape.input(self.embed_w.clone()),
            embed_b: tape.input(self.embed_b.clone()),
            res_w1: tape.input(self.res_w1.clone()),
            res_b1: tape.input(self.res_b1.clone()),
            res_w2: tape.input(self.res_w2.clone()),
            res_b2: tape.input(self.res_b2.clone()),
            head_w: tape.input(self.head_w.clone()),
            head_b: tape.input(self.head_b.clone()),
        }
    }

    /// `(mean, logvar)` for a `[N, m]` batch variable.
    pub fn mean_logvar_on_tape(
        &self,
        tape: &mut Tape,
        vars: &PosteriorVars,
        y: VarId,
    ) -> Result<(VarId, VarId)> {
        let e = tape.matmul_tb(y, vars.embed_w)?;
        let h = tape.add_row(e, vars.embed_b)?;
        let a1 = tape.matmul_tb(h, vars.res_w1)?;
        let a1b = tape.add_row(a1, vars.res_b1)?;
        let t = tape.tanh(a1b);
        let a2 = tape.matmul_tb(t, vars.res_w2)?;
        let a2b = tape.add_row(a2, vars.res_b2)?;
        let hr = tape.add(h, a2b)?;
        let out = tape.matmul_tb(hr, vars.head_w)?;
        let out = tape.add_row(out, vars.head_b)?;
        let mean = tape.slice_cols(out, 0, self.dim)?;
        let logvar = tape.slice_cols(out, self.dim, self.dim)?;
        Ok((mean, logvar))
    }

    /// Reparametrized samples for a `[N, m]` batch of measurements and an
    /// `[N, d]` noise tensor; returns `(x, z, mean, logvar)` where `z` is the
    /// pre-inverse latent `m(y) + exp(logvar/2) * xi` (equal to `x` for the
    /// identity diffeomorphism).
    pub fn sample_on_tape(
        &self,
        tape: &mut Tape,
        vars: &PosteriorVars,
        y: VarId,
        xi: &Tensor,
    ) -> Result<(VarId, VarId, VarId, VarId)> {
        let (mean, logvar) = self.mean_logvar_on_tape(tape, vars, y)?;
        let half = tape.scale(logvar, 0.5);
        let sigma = tape.exp(half);
        let xi_var = tape.input(xi.clone());
        let noise = tape.mul(sigma, xi_var)?;
        let z = tape.add(mean, noise)?;
        let x = match (&self.diffeo, &vars.diffeo) {
            (Some(f), Some(fv)) => f.inverse_on_tape(tape, fv, z)?,
            _ => z,
        };
        Ok((x, z, mean, logvar))
    }

    /// Per-row `log p(x | y)` given the already-computed latent `z = psi(x)`
    /// (for identity diffeomorphisms `z` is `x` itself), `[N] `.
    pub fn log_density_on_tape(
        &self,
        tape: &mut Tape,
        vars: &PosteriorVars,
        z: VarId,
        mean: VarId,
        logvar: VarId,
    ) -> Result<VarId> {
        let r = tape.sub(z, mean)?;
        let r2 = tape.mul(r, r)?;
        let neg_lv = tape.neg(logvar);
        let prec = tape.exp(neg_lv);
        let quad = tape.mul(r2, prec)?;
        let inner = tape.add(quad, logvar)?;
        let row_sum = tape.sum_rows(inner)?;
        let scaled = tape.scale(row_sum, -0.5);
        let mut out = tape.add_scalar(scaled, -0.5 * self.dim as f64 * LN_2PI);
        if let (Some(f), Some(fv)) = (&self.diffeo, &vars.diffeo) {
            let ld = f.log_abs_det_on_tape(tape, fv)?;
            let n = tape.value(out).numel();
            let as_mat = tape.reshape(out, vec![n, 1])?;
            let with = tape.add_row(as_mat, ld)?;
            out = tape.reshape(with, vec![n])?;
        }
        Ok(out)
    }

    // ── Checkpointing ────────────────────────────────────────────────

    pub fn to_checkpoint(&self) -> PosteriorCheckpoint {
        let mat = |t: &Tensor| (0..t.rows()).map(|i| t.row(i).to_vec()).collect::<Vec<_>>();
        PosteriorCheckpoint {
            meas_dim: self.meas_dim,
            dim: self.dim,
            hidden: self.hidden,
            width: self.width,
            diffeo: self.diffeo.as_ref().map(FlowModel::to_checkpoint),
            embed_w: mat(&self.embed_w),
            embed_b: self.embed_b.data().to_vec(),
            res_w1: mat(&self.res_w1),
            res_b1: self.res_b1.data().to_vec(),
            res_w2: mat(&self.res_w2),
            res_b2: self.res_b2.data().to_vec(),
            head_w: mat(&self.head_w),
            head_b: self.head_b.data().to_vec(),
        }
    }

    pub fn from_checkpoint(ckpt: &PosteriorCheckpoint) -> Result<Self> {
        let tensor = |rows: &Vec<Vec<f64>>, r: usize, c: usize, what: &str| -> Result<Tensor> {
            if rows.len() != r || rows.iter().any(|row| row.len() != c) {
                return Err(Error::Schema {
                    expected: format!("{r}x{c}"),
                    found: format!("{}x?", rows.len()),
                    msg: format!("posterior {what}"),
                });
            }
            Tensor::from_rows(rows)
        };
        let vec = |v: &Vec<f64>, n: usize, what: &str| -> Result<Tensor> {
            if v.len() != n {
                return Err(Error::Schema {
                    expected: format!("{n}"),
                    found: format!("{}", v.len()),
                    msg: format!("posterior {what}"),
                });
            }
            Ok(Tensor::from_vec(v.clone()))
        };
        let (m, d, h, w) = (ckpt.meas_dim, ckpt.dim, ckpt.hidden, ckpt.width);
        Ok(PosteriorModel {
            diffeo: match &ckpt.diffeo {
                Some(f) => Some(FlowModel::from_checkpoint(f)?),
                None => None,
            },
            embed_w: tensor(&ckpt.embed_w, h, m, "embed_w")?,
            embed_b: vec(&ckpt.embed_b, h, "embed_b")?,
            res_w1: tensor(&ckpt.res_w1, w, h, "res_w1")?,
            res_b1: vec(&ckpt.res_b1, w, "res_b1")?,
            res_w2: tensor(&ckpt.res_w2, h, w, "res_w2")?,
            res_b2: vec(&ckpt.res_b2, h, "res_b2")?,
            head_w: tensor(&ckpt.head_w, 2 * d, h, "head_w")?,
            head_b: vec(&ckpt.head_b, 2 * d, "head_b")?,
            meas_dim: m,
            dim: d,
            hidden: h,
            width: w,
        })
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PosteriorCheckpoint {
    pub meas_dim: usize,
    pub dim: usize,
    pub hidden: usize,
    pub width: usize,
    pub diffeo: Option<crate::flow::FlowCheckpoint>,
    pub embed_w: Vec<Vec<f64>>,
    pub embed_b: Vec<f64>,
    pub res_w1: Vec<Vec<f64>>,
    pub res_b1: Vec<f64>,
    pub res_w2: Vec<Vec<f64>>,
    pub res_b2: Vec<f64>,
    pub head_w: Vec<Vec<f64>>,
    pub head_b: Vec<f64>,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sinusoid_architecture_contract() {
        let p = PosteriorModel::build_sinusoid(1);
        // embed 3->10, block width 8, head 10->6.
        assert_eq!(p.embed_w.shape(), &[10, 3]);
        assert_eq!(p.res_w1.shape(), &[8, 10]);
        assert_eq!(p.res_w2.shape(), &[10, 8]);
        assert_eq!(p.head_w.shape(), &[6, 10]);

        // Hand count: 10*3+10 + 8*10+8 + 10*8+10 + 6*10+6 = 284.
        assert_eq!(p.param_count(), 284);

        // Zero head: m(y) = 0 and Sigma = I for any y.
        let (mean, logvar) = p.mean_logvar(&[0.7, -2.0, 3.5]).unwrap();
        assert!(mean.iter().all(|v| *v == 0.0));
        assert!(logvar.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn mnist_template_dims() {
        let p = PosteriorModel::build_mnist14(1);
        assert_eq!(p.embed_w.shape(), &[256, 196]);
        assert_eq!(p.head_w.shape(), &[392, 256]);
    }

    #[test]
    fn log_density_identity_standard_normal() {
        let p = PosteriorModel::new(1, 1, 4, 4, None, 0).unwrap();
        let v = p.conditional_log_density(&[0.0], &[0.3]).unwrap();
        assert!((v + 0.5 * LN_2PI).abs() < 1e-12);
    }

    #[test]
    fn translation_invariance_with_shifted_mean() {
        // Identity diffeo: shifting x and m(y) together preserves density.
        let mut p = PosteriorModel::new(2, 2, 4, 4, None, 3).unwrap();
        // Force a nonzero constant mean through the head bias.
        p.head_b.data_mut()[0] = 0.7;
        p.head_b.data_mut()[1] = -0.2;
        let y = [0.5, 0.1];
        let base = p.conditional_log_density(&[0.3, 0.4], &y).unwrap();
        let mut p2 = p.clone();
        p2.head_b.data_mut()[0] += 1.0;
        let shifted = p2.conditional_log_density(&[1.3, 0.4], &y).unwrap();
        assert!((base - shifted).abs() < 1e-12);
    }

    #[test]
    fn density_normalizes_on_grid() {
        let mut p = PosteriorModel::new(2, 2, 6, 4, None, 5).unwrap();
        // Random-ish head so mean/var depend on y.
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for v in p.head_w.data_mut() {
            *v = 0.3 * rng.gen_range(-1.0..1.0);
        }
        let y = [0.4, -0.7];
        let lim = 9.0;
        let n = 500;
        let h = 2.0 * lim / n as f64;
        let mut mass = 0.0;
        for i in 0..n {
            for j in 0..n {
                let x = [-lim + (i as f64 + 0.5) * h, -lim + (j as f64 + 0.5) * h];
                mass += p.conditional_log_density(&x, &y).unwrap().exp();
            }
        }
        mass *= h * h;
        assert!((mass - 1.0).abs() < 1e-2, "mass {mass}");
    }

    #[test]
    fn sigma_collapse_limit() {
        let mut p = PosteriorModel::new(1, 1, 4, 4, None, 2).unwrap();
        p.head_b.data_mut()[0] = 0.9; // mean
        p.head_b.data_mut()[1] = -30.0; // logvar -> 0 variance
        let samples = p.sample(&[0.2], 100, 1).unwrap();
        for i in 0..100 {
            assert!((samples.get2(i, 0) - 0.9).abs() < 1e-5);
        }
    }

    #[test]
    fn sample_mean_matches_head() {
        let mut p = PosteriorModel::new(2, 2, 4, 4, None, 7).unwrap();
        p.head_b.data_mut()[0] = 1.5;
        p.head_b.data_mut()[1] = -0.5;
        let n = 10_000;
        let samples = p.sample(&[0.0, 0.0], n, 3).unwrap();
        for (c, expect) in [(0usize, 1.5f64), (1, -0.5)] {
            let mean: f64 = (0..n).map(|i| samples.get2(i, c)).sum::<f64>() / n as f64;
            assert!((mean - expect).abs() < 4.0 / (n as f64).sqrt());
        }
    }

    #[test]
    fn samples_match_density_by_ks() {
        // d = 1: empirical samples against the analytic conditional CDF.
        let mut p = PosteriorModel::new(1, 1, 4, 4, None, 11).unwrap();
        p.head_b.data_mut()[0] = 0.4;
        p.head_b.data_mut()[1] = 0.6; // variance e^{0.6}
        let y = [0.8];
        let n = 5000;
        let samples = p.sample(&y, n, 13).unwrap();
        let (mean, logvar) = p.mean_logvar(&y).unwrap();
        let sd = (0.5 * logvar[0]).exp();
        let d = crate::stats::ks_statistic(samples.data(), |x| {
            crate::stats::normal_cdf((x - mean[0]) / sd)
        });
        let pval = crate::stats::ks_pvalue(d, n);
        assert!(pval > 0.01, "KS p = {pval}");
    }

    #[test]
    fn tape_matches_plain_evaluation() {
        let mut p = PosteriorModel::new(3, 2, 6, 5, None, 17).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        for v in p.head_w.data_mut() {
            *v = 0.2 * rng.gen_range(-1.0..1.0);
        }
        let y = Tensor::from_rows(&[vec![0.1, 0.5, -0.3], vec![1.0, 0.0, 0.7]]).unwrap();
        let mut tape = Tape::new();
        let vars = p.register_inputs(&mut tape);
        let yid = tape.input(y.clone());
        let (mean, logvar) = p.mean_logvar_on_tape(&mut tape, &vars, yid).unwrap();
        for i in 0..2 {
            let (pm, plv) = p.mean_logvar(y.row(i)).unwrap();
            for j in 0..2 {
                assert!((tape.value(mean).get2(i, j) - pm[j]).abs() < 1e-13);
                assert!((tape.value(logvar).get2(i, j) - plv[j]).abs() < 1e-13);
            }
        }

        // Tape log-density equals the plain one on reparametrized samples.
        let xi = Tensor::from_rows(&[vec![0.3, -0.6], vec![1.2, 0.1]]).unwrap();
        let (x, z, mean2, logvar2) = p.sample_on_tape(&mut tape, &vars, yid, &xi).unwrap();
        let ld = p.log_density_on_tape(&mut tape, &vars, z, mean2, logvar2).unwrap();
        for i in 0..2 {
            let xrow = tape.value(x).row(i).to_vec();
            let plain = p.conditional_log_density(&xrow, y.row(i)).unwrap();
            assert!((tape.value(ld).data()[i] - plain).abs() < 1e-12);
        }
    }

    #[test]
    fn reparametrization_gradient_matches_finite_differences() {
        // d E[f(sample)] / d(head bias) via pathwise gradients vs central
        // differences, f(x) = sum(x^2), 1e5 samples shared via common noise.
        let build = |bias: f64| {
            let mut p = PosteriorModel::new(1, 1, 4, 4, None, 23).unwrap();
            p.head_b.data_mut()[0] = bias;
            p.head_b.data_mut()[1] = 0.2;
            p
        };
        let n = 100_000;
        let xi_data: Vec<f64> = {
            let mut rng = ChaCha8Rng::seed_from_u64(29);
            (0..n)
                .map(|_| <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng))
                .collect()
        };
        let xi = Tensor::from_shape(n, 1, xi_data).unwrap();
        let y = Tensor::from_shape(n, 1, vec![0.5; n]).unwrap();

        let eval = |bias: f64| -> f64 {
            let p = build(bias);
            let mut tape = Tape::new();
            let vars = p.register_inputs(&mut tape);
            let yid = tape.input(y.clone());
            let (x, _, _, _) = p.sample_on_tape(&mut tape, &vars, yid, &xi).unwrap();
            let sq = tape.mul(x, x).unwrap();
            let m = tape.mean(sq);
            tape.value(m).item().unwrap()
        };

        // Pathwise gradient.
        let p = build(0.7);
        let mut tape = Tape::new();
        let vars = p.register_params(&mut tape).unwrap();
        let yid = tape.input(y.clone());
        let (x, _, _, _) = p.sample_on_tape(&mut tape, &vars, yid, &xi).unwrap();
        let sq = tape.mul(x, x).unwrap();
        let m = tape.mean(sq);
        let grads = tape.backward(m).unwrap();
        let g = grads.get(vars.head_b).unwrap().data()[0];

        let h = 1e-4;
        let fd = (eval(0.7 + h) - eval(0.7 - h)) / (2.0 * h);
        let rel = (g - fd).abs() / fd.abs().max(1e-12);
        assert!(rel < 1e-2, "pathwise {g} vs fd {fd} (rel {rel})");
    }

    #[test]
    fn nontrivial_diffeo_density_accounts_for_logdet() {
        let mut flow = FlowModel::identity(2, 1, 1);
        flow.layers_mut()[0].linear.diag_logmag.data_mut()[0] = 0.4;
        flow.layers_mut()[0].linear.diag_logmag.data_mut()[1] = -0.1;
        let p = PosteriorModel::new(2, 2, 4, 4, Some(flow.clone()), 31).unwrap();
        // Normalization on a grid still holds with the diffeo factor.
        let y = [0.3, 0.3];
        let lim = 10.0;
        let n = 600;
        let h = 2.0 * lim / n as f64;
        let mut mass = 0.0;
        for i in 0..n {
            for j in 0..n {
                let x = [-lim + (i as f64 + 0.5) * h, -lim + (j as f64 + 0.5) * h];
                mass += p.conditional_log_density(&x, &y).unwrap().exp();
            }
        }
        mass *= h * h;
        assert!((mass - 1.0).abs() < 1e-2, "mass {mass}");
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut p = PosteriorModel::build_sinusoid(37);
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        for v in p.head_w.data_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
        let json = serde_json::to_string(&p.to_checkpoint()).unwrap();
        let back = PosteriorModel::from_checkpoint(&serde_json::from_str(&json).unwrap()).unwrap();
        let (m1, lv1) = p.mean_logvar(&[0.1, 0.2, 0.3]).unwrap();
        let (m2, lv2) = back.mean_logvar(&[0.1, 0.2, 0.3]).unwrap();
        for (a, b) in m1.iter().zip(&m2).chain(lv1.iter().zip(&lv2)) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }
}
