//! Decoder-prior inversion: certified smoothness constants for the
//! autoencoder decoder, empirical isometry checkers for the measurement
//! operator, contraction certificates for fixed-step gradient descent on
//! `L(p) = 1/2 ||A D(p) - y||^2`, the solver itself, and the total-variation
//! baseline.
//!
//! The certified bi-Lipschitz constants come from the layer structure: each
//! inverse layer is a triangular solve pair whose singular values are known,
//! and the coupling contributes at most `1 + B_i` with
//! `B_i = 2 max_l sum_r |alpha_{r,l}|` from the tanh-polynomial derivative
//! bound. The restricted-isometry constants are sampled lower bounds of the
//! true suprema and certificates built from them are labelled empirical.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::corruption::{CorruptionModel, LinearOperator};
use crate::error::{Error, Result};
use crate::linalg;
use crate::rae::Rae;
use crate::tape::Tape;
use crate::tensor::Tensor;

/// `sup_t r t^{r-1} (1 - t^2)` over `t in [0, 1]`: the per-power tanh
/// derivative bound. Equals 1 for `r = 1` and
/// `(2r/(r+1)) ((r-1)/(r+1))^{(r-1)/2}` for `r >= 2`.
pub fn tanh_power_derivative_bound(r: u32) -> f64 {
    if r == 0 {
        return 0.0;
    }
    if r == 1 {
        return 1.0;
    }
    let rf = r as f64;
    (2.0 * rf / (rf + 1.0)) * ((rf - 1.0) / (rf + 1.0)).powf((rf - 1.0) / 2.0)
}

/// Per-inverse-layer constants, indexed as in the decoder composition
/// (layer `i` of the inverse uses forward layer `L + 1 - i`).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayerSmoothness {
    /// Smallest singular value of the inverse linear factor.
    pub underline_sigma: f64,
    /// Largest singular value of the inverse linear factor.
    pub overline_sigma: f64,
    /// Coupling derivative bound `2 max_l sum_r |alpha_{r,l}|`.
    pub b: f64,
    /// Coupling Jacobian-Lipschitz coefficient (same alpha sum, factor 2).
    pub c_tilde: f64,
}

/// Certified decoder smoothness constants.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DecoderSmoothness {
    pub m1_lower: f64,
    pub m2_upper: f64,
    /// Jacobian-Lipschitz upper bound.
    pub m_upper: f64,
    pub per_layer: Vec<LayerSmoothness>,
    /// Smallest singular value of `D_base phi @ U`.
    pub sigma_tilde_min: f64,
    /// Largest singular value of `D_base phi @ U`.
    pub sigma_tilde_max: f64,
}

/// Closed-form products over layers: bi-Lipschitz bounds and the Jacobian
/// Lipschitz constant of the decoder.
pub fn smoothness_constants(rae: &Rae) -> Result<DecoderSmoothness> {
    let flow = rae.geometry().flow();
    let d = flow.dim();
    let num_layers = flow.num_layers();

    // sigma_tilde from the d x d_eps injection D_base phi @ U.
    let sv = linalg::singular_values(rae.u_tilde())?;
    let sigma_tilde_max = sv[0];
    let sigma_tilde_min = sv[rae.latent_dim() - 1].max(0.0);

    let mut per_layer = Vec::with_capacity(num_layers);
    for i in 1..=num_layers {
        let fwd = &flow.layers()[num_layers - i]; // forward layer L+1-i
        // W = V^{-1} = U^{-1} L^{-1} assembled densely.
        let lin = &fwd.linear;
        let mut lmat = Tensor::eye(d);
        let mut umat = Tensor::zeros(&[d, d]);
        for r in 0..d {
            umat.data_mut()[r * d + r] = lin.diag_sign[r] * lin.diag_logmag.data()[r].exp();
            for c in 0..r {
                lmat.data_mut()[r * d + c] = lin.lower.get2(r, c);
                umat.data_mut()[c * d + r] = lin.upper.get2(c, r);
            }
        }
        let linv = linalg::tri_inverse(lmat.data(), d, true, true);
        let uinv = linalg::tri_inverse(umat.data(), d, false, false);
        let w = linalg::matmul(
            &Tensor::from_shape(d, d, uinv)?,
            &Tensor::from_shape(d, d, linv)?,
        )?;
        let wsv = linalg::singular_values(&w)?;

        let alpha = &fwd.coupling.alpha;
        let (n, d2) = (alpha.rows(), alpha.cols());
        let mut max_sum = 0.0f64;
        for l in 0..d2 {
            let s: f64 = (0..n).map(|r| alpha.data()[r * d2 + l].abs()).sum();
            max_sum = max_sum.max(s);
        }
        per_layer.push(LayerSmoothness {
            underline_sigma: wsv[d - 1].max(0.0),
            overline_sigma: wsv[0],
            b: 2.0 * max_sum,
            c_tilde: 2.0 * max_sum,
        });
    }

    let mut m1 = sigma_tilde_min;
    let mut m2 = sigma_tilde_max;
    for layer in &per_layer {
        m1 *= layer.underline_sigma / (1.0 + layer.b);
        m2 *= layer.overline_sigma * (1.0 + layer.b);
    }

    // M <= sigma_tilde_max * sum_l [prod_{i>l} Mt_i] sigma_l C_l
    //      [prod_{k<l} Mt_k]^2 with Mt_i = (1 + B_i) sigma_i.
    let mt: Vec<f64> =
        per_layer.iter().map(|l| (1.0 + l.b) * l.overline_sigma).collect();
    let mut m_upper = 0.0;
    for l in 0..num_layers {
        let after: f64 = mt[l + 1..].iter().product();
        let before: f64 = mt[..l].iter().product();
        m_upper +=
            after * per_layer[l].overline_sigma * per_layer[l].c_tilde * before * before;
    }
    m_upper *= sigma_tilde_max;

    Ok(DecoderSmoothness {
        m1_lower: m1,
        m2_upper: m2,
        m_upper,
        per_layer,
        sigma_tilde_min,
        sigma_tilde_max,
    })
}

/// Sampled distortion extremes `min/max ||D(p)-D(q)|| / ||p-q||`.
pub fn empirical_bilipschitz(rae: &Rae, trial_count: usize, seed: u64) -> Result<(f64, f64)> {
    if trial_count < 1 {
        return Err(Error::invalid("empirical_bilipschitz", "need at least one trial"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = rae.latent_dim();
    let mut lo = f64::INFINITY;
    let mut hi: f64 = 0.0;
    for _ in 0..trial_count {
        let p: Vec<f64> = (0..k)
            .map(|_| 1.5 * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng))
            .collect();
        let q: Vec<f64> = (0..k)
            .map(|_| 1.5 * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng))
            .collect();
        let dpq: f64 = p.iter().zip(&q).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        if dpq < 1e-12 {
            continue;
        }
        let xp = rae.decode(&p)?;
        let xq = rae.decode(&q)?;
        let dx: f64 = xp.iter().zip(&xq).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        let ratio = dx / dpq;
        lo = lo.min(ratio);
        hi = hi.max(ratio);
    }
    Ok((lo, hi))
}

/// Source of points in (or standing in for) the decoder range.
pub enum RangeSource<'a> {
    Decoder(&'a Rae),
    Points(&'a Tensor),
}

impl RangeSource<'_> {
    fn draw(&self, rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
        match self {
            RangeSource::Decoder(rae) => {
                let p: Vec<f64> = (0..rae.latent_dim())
                    .map(|_| {
                        2.0 * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng)
                    })
                    .collect();
                rae.decode(&p)
            }
            RangeSource::Points(t) => {
                let i = rng.gen_range(0..t.rows());
                Ok(t.row(i).to_vec())
            }
        }
    }
}

/// Empirical restricted-isometry ratio extremes over sampled range pairs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RipSlack {
    /// `min ||A(x1-x2)||^2 / ||x1-x2||^2`, i.e. `1 - delta_low`.
    pub lower: f64,
    /// `max ||A(x1-x2)||^2 / ||x1-x2||^2`, i.e. `1 + delta_high`.
    pub upper: f64,
    pub pair_count: usize,
    /// All sampled ratios (for histogram export).
    pub ratios: Vec<f64>,
}

impl RipSlack {
    /// `max(1 - lower, upper - 1, 0)`: the implied two-sided constant.
    pub fn delta_hat(&self) -> f64 {
        (1.0 - self.lower).max(self.upper - 1.0).max(0.0)
    }
}

/// Sample pair ratios `||A(x1-x2)||^2 / ||x1-x2||^2`; coincident pairs are
/// resampled.
pub fn check_rip(
    source: RangeSource<'_>,
    corruption: &CorruptionModel,
    pair_count: usize,
    seed: u64,
) -> Result<RipSlack> {
    if pair_count < 1 {
        return Err(Error::invalid("check_rip", "need at least one pair"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ratios = Vec::with_capacity(pair_count);
    let mut attempts = 0usize;
    while ratios.len() < pair_count {
        attempts += 1;
        if attempts > 50 * pair_count {
            return Err(Error::numeric("check_rip", "too many degenerate pairs"));
        }
        let x1 = source.draw(&mut rng)?;
        let x2 = source.draw(&mut rng)?;
        let dsq: f64 = x1.iter().zip(&x2).map(|(a, b)| (a - b) * (a - b)).sum();
        if dsq < 1e-24 {
            continue;
        }
        let diff: Vec<f64> = x1.iter().zip(&x2).map(|(a, b)| a - b).collect();
        let adiff = corruption.operator().apply(&diff)?;
        let asq: f64 = adiff.iter().map(|v| v * v).sum();
        ratios.push(asq / dsq);
    }
    let lower = ratios.iter().copied().fold(f64::INFINITY, f64::min);
    let upper = ratios.iter().copied().fold(0.0f64, f64::max);
    Ok(RipSlack { lower, upper, pair_count, ratios })
}

/// Empirical range-restricted isometry constant: the maximum over sampled
/// quadruples of `|<(A^T A - I)(x1-x2), x3-x4>| / (||x1-x2|| ||x3-x4||)`.
/// A lower bound on the true constant.
pub fn check_rric(
    rae: &Rae,
    corruption: &CorruptionModel,
    quadruple_count: usize,
    seed: u64,
) -> Result<f64> {
    if quadruple_count < 1 {
        return Err(Error::invalid("check_rric", "need at least one quadruple"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut delta: f64 = 0.0;
    let mut done = 0usize;
    let mut attempts = 0usize;
    while done < quadruple_count {
        attempts += 1;
        if attempts > 50 * quadruple_count {
            return Err(Error::numeric("check_rric", "too many degenerate quadruples"));
        }
        let source = RangeSource::Decoder(rae);
        let x1 = source.draw(&mut rng)?;
        let x2 = source.draw(&mut rng)?;
        let x3 = source.draw(&mut rng)?;
        let x4 = source.draw(&mut rng)?;
        let u: Vec<f64> = x1.iter().zip(&x2).map(|(a, b)| a - b).collect();
        let v: Vec<f64> = x3.iter().zip(&x4).map(|(a, b)| a - b).collect();
        let un: f64 = u.iter().map(|a| a * a).sum::<f64>().sqrt();
        let vn: f64 = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if un < 1e-12 || vn < 1e-12 {
            continue;
        }
        let au = corruption.operator().apply(&u)?;
        let atau = corruption.operator().apply_adjoint(&au)?;
        let num: f64 =
            atau.iter().zip(&u).zip(&v).map(|((g, ui), vi)| (g - ui) * vi).sum::<f64>().abs();
        delta = delta.max(num / (un * vn));
        done += 1;
    }
    Ok(delta)
}

/// The contraction certificate for fixed-step gradient descent.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConvergenceCertificate {
    pub delta_hat: f64,
    pub m1: f64,
    pub m2: f64,
    pub m_jacobian: f64,
    /// `m1^2 - m2 M / 2 - delta m2^2`.
    pub m_delta: f64,
    pub ata_norm: f64,
    pub alpha: f64,
    /// `m_delta / (2 m2^4 ||A^T A||^2)`.
    pub alpha_max: f64,
    /// `1 - alpha m_delta + 2 alpha^2 m2^4 ||A^T A||^2`.
    pub rho: Option<f64>,
    /// `2 alpha^2 m2^2 + alpha m2^2 / m_delta`.
    pub beta: Option<f64>,
    pub smoothness_ok: bool,
    pub delta_ok: bool,
    pub alpha_ok: bool,
    pub satisfied: bool,
    /// Certificates from sampled delta are empirical, not certified.
    pub empirical_delta: bool,
}

/// Evaluate the three convergence conditions with certified constants and,
/// when they hold, the contraction and noise-amplification factors.
///
/// `delta_hat` is typically the sampled lower bound from [`check_rric`];
/// pass an analytically known constant for fully rigorous certificates.
pub fn certificate(
    rae: &Rae,
    corruption: &CorruptionModel,
    alpha: f64,
    delta_hat: f64,
    empirical_delta: bool,
) -> Result<ConvergenceCertificate> {
    let s = smoothness_constants(rae)?;
    let (m1, m2, mj) = (s.m1_lower, s.m2_upper, s.m_upper);

    let mut ata = corruption.operator().gram_norm();
    // Dense cross-check at desk scale; take the larger value so the step
    // bound cannot be loosened by an under-converged power iteration.
    if corruption.operator().input_dim() <= 512 {
        let dense = corruption.operator().to_dense()?;
        let sv = linalg::singular_values(&dense)?;
        ata = ata.max(sv[0] * sv[0]);
    }

    let smoothness_ok = m2 * mj < 2.0 * m1 * m1;
    let delta_ok = delta_hat < (m1 * m1 - m2 * mj / 2.0) / (m2 * m2);
    let m_delta = m1 * m1 - m2 * mj / 2.0 - delta_hat * m2 * m2;
    let alpha_max = if m_delta > 0.0 { m_delta / (2.0 * m2.powi(4) * ata * ata) } else { 0.0 };
    let alpha_ok = alpha > 0.0 && alpha < alpha_max;
    let satisfied = smoothness_ok && delta_ok && alpha_ok;

    let (rho, beta) = if m_delta > 0.0 {
        let rho = 1.0 - alpha * m_delta + 2.0 * alpha * alpha * m2.powi(4) * ata * ata;
        let beta = 2.0 * alpha * alpha * m2 * m2 + alpha * m2 * m2 / m_delta;
        (Some(rho), Some(beta))
    } else {
        (None, None)
    };

    if satisfied {
        debug_assert!(rho.is_some_and(|r| r > 0.0 && r < 1.0));
        debug_assert!(beta.is_some_and(|b| b > 0.0 && b.is_finite()));
    }

    Ok(ConvergenceCertificate {
        delta_hat,
        m1,
        m2,
        m_jacobian: mj,
        m_delta,
        ata_norm: ata,
        alpha,
        alpha_max,
        rho,
        beta,
        smoothness_ok,
        delta_ok,
        alpha_ok,
        satisfied,
        empirical_delta,
    })
}

/// `grad L(p) = J_D(p)^T A^T (A D(p) - y)`, evaluated by reverse mode
/// through the decoder's inverse pass.
pub fn decode_loss_grad(
    rae: &Rae,
    op_dense: Option<&Tensor>,
    y: &[f64],
    p: &[f64],
) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    let flow = rae.geometry().flow();
    let k = rae.latent_dim();
    let d = rae.dim();
    let mut tape = Tape::new();
    let fvars = flow.register_inputs(&mut tape);
    let pid = tape.param(Tensor::from_shape(1, k, p.to_vec())?);
    let ut = tape.input(rae.u_tilde().clone());
    let zrow = tape.matmul_tb(pid, ut)?;
    let zbar = tape.input(Tensor::from_vec(rae.z_base().to_vec()));
    let z = tape.add_row(zrow, zbar)?;
    let x = flow.inverse_on_tape(&mut tape, &fvars, z)?;
    let ax = match op_dense {
        Some(mat) => {
            let a = tape.input(mat.clone());
            tape.matmul_tb(x, a)?
        }
        None => x,
    };
    let yid = tape.input(Tensor::from_shape(1, y.len(), y.to_vec())?);
    let resid = tape.sub(ax, yid)?;
    let sq = tape.mul(resid, resid)?;
    let ssum = tape.sum(sq);
    let loss = tape.scale(ssum, 0.5);
    let grads = tape.backward(loss)?;
    let grad = grads.get_or_zeros(pid).data().to_vec();
    let _ = d;
    Ok((tape.value(loss).item()?, grad, tape.value(x).data().to_vec()))
}

#[derive(Debug, Clone)]
pub struct InvertOptions {
    pub alpha: f64,
    pub max_iters: usize,
    /// Initial latent; zeros when absent.
    pub init: Option<Vec<f64>>,
    /// Latent ground truth: records `||p_t - p*||` per iterate.
    pub latent_truth: Option<Vec<f64>>,
    /// Signal ground truth: enables best-MSE iterate tracking.
    pub signal_truth: Option<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct BestIterate {
    pub iter: usize,
    pub mse: f64,
    pub x: Vec<f64>,
    pub p: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct InvertResult {
    pub p_hat: Vec<f64>,
    pub x_hat: Vec<f64>,
    /// `L(p_t)` for `t = 1 ..= max_iters + 1`.
    pub losses: Vec<f64>,
    /// `||p_t - p*||` per iterate when latent truth was supplied.
    pub latent_dist: Option<Vec<f64>>,
    /// Lowest-MSE iterate when signal truth was supplied.
    pub best: Option<BestIterate>,
    pub aborted: Option<String>,
}

/// Fixed-step gradient descent on the decoder-prior least squares problem.
/// The default result is the final iterate; callers following the
/// best-MSE reporting protocol read `best` instead (requires ground truth).
pub fn invert(
    rae: &Rae,
    corruption: &CorruptionModel,
    y: &[f64],
    opts: &InvertOptions,
) -> Result<InvertResult> {
    if opts.alpha <= 0.0 {
        return Err(Error::invalid("invert", "alpha must be positive"));
    }
    let k = rae.latent_dim();
    let mut p = match &opts.init {
        Some(v) => {
            if v.len() != k {
                return Err(Error::ShapeMismatch {
                    op: "invert",
                    lhs: vec![k],
                    rhs: vec![v.len()],
                });
            }
            v.clone()
        }
        None => vec![0.0; k],
    };
    let op_dense = match corruption.operator() {
        LinearOperator::Identity { .. } => None,
        other => Some(other.to_dense()?),
    };

    let mut losses = Vec::with_capacity(opts.max_iters + 1);
    let mut latent_dist = opts.latent_truth.as_ref().map(|_| Vec::with_capacity(opts.max_iters + 1));
    let mut best: Option<BestIterate> = None;
    let mut aborted = None;
    let mut x_final = rae.decode(&p)?;

    for iter in 0..=opts.max_iters {
        let (loss, grad, x) = decode_loss_grad(rae, op_dense.as_ref(), y, &p)?;
        x_final = x.clone();
        losses.push(loss);
        if let (Some(hist), Some(truth)) = (latent_dist.as_mut(), opts.latent_truth.as_ref()) {
            let dist: f64 =
                p.iter().zip(truth).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
            hist.push(dist);
        }
        if let Some(truth) = opts.signal_truth.as_ref() {
            let m = crate::metrics::mse(&x, truth)?;
            if best.as_ref().map_or(true, |b| m < b.mse) {
                best = Some(BestIterate { iter, mse: m, x: x.clone(), p: p.clone() });
            }
        }
        if !loss.is_finite() {
            aborted = Some(format!("non-finite loss at iterate {iter}"));
            break;
        }
        if iter == opts.max_iters {
            break;
        }
        for (pi, gi) in p.iter_mut().zip(&grad) {
            *pi -= opts.alpha * gi;
        }
    }

    Ok(InvertResult { p_hat: p, x_hat: x_final, losses, latent_dist, best, aborted })
}

// ── Total variation baseline ─────────────────────────────────────────

/// Forward-difference gradient with Neumann boundary (last row/col zero).
fn tv_grad(u: &[f64], h: usize, w: usize, gx: &mut [f64], gy: &mut [f64]) {
    for i in 0..h {
        for j in 0..w {
            gx[i * w + j] = if i + 1 < h { u[(i + 1) * w + j] - u[i * w + j] } else { 0.0 };
            gy[i * w + j] = if j + 1 < w { u[i * w + j + 1] - u[i * w + j] } else { 0.0 };
        }
    }
}

/// Negative adjoint of [`tv_grad`].
fn tv_div(p1: &[f64], p2: &[f64], h: usize, w: usize, out: &mut [f64]) {
    for i in 0..h {
        for j in 0..w {
            let a = if i == 0 {
                p1[j]
            } else if i == h - 1 {
                -p1[(i - 1) * w + j]
            } else {
                p1[i * w + j] - p1[(i - 1) * w + j]
            };
            let b = if j == 0 {
                p2[i * w]
            } else if j == w - 1 {
                -p2[i * w + j - 1]
            } else {
                p2[i * w + j] - p2[i * w + j - 1]
            };
            out[i * w + j] = a + b;
        }
    }
}

/// Isotropic TV proximal map by dual ascent: `argmin_u 1/2||u-v||^2 + weight TV(u)`.
pub fn tv_prox(v: &[f64], weight: f64, h: usize, w: usize, inner_iters: usize) -> Vec<f64> {
    if weight <= 0.0 {
        return v.to_vec();
    }
    let n = h * w;
    let tau = 0.25;
    let mut p1 = vec![0.0; n];
    let mut p2 = vec![0.0; n];
    let mut div = vec![0.0; n];
    let mut gx = vec![0.0; n];
    let mut gy = vec![0.0; n];
    let mut tmp = vec![0.0; n];
    for _ in 0..inner_iters {
        tv_div(&p1, &p2, h, w, &mut div);
        for i in 0..n {
            tmp[i] = div[i] - v[i] / weight;
        }
        tv_grad(&tmp, h, w, &mut gx, &mut gy);
        for i in 0..n {
            let mag = (gx[i] * gx[i] + gy[i] * gy[i]).sqrt();
            let denom = 1.0 + tau * mag;
            p1[i] = (p1[i] + tau * gx[i]) / denom;
            p2[i] = (p2[i] + tau * gy[i]) / denom;
        }
    }
    tv_div(&p1, &p2, h, w, &mut div);
    (0..n).map(|i| v[i] - weight * div[i]).collect()
}

#[derive(Debug, Clone)]
pub struct TvResult {
    pub x_hat: Vec<f64>,
    /// Data term `1/2 ||A x_t - y||^2` per iterate.
    pub losses: Vec<f64>,
    pub best: Option<BestIterate>,
}

/// Proximal gradient descent `x <- prox_{alpha lambda TV}(x - alpha A^T (A x - y))`
/// from a zero initialization, 50 dual iterations per prox.
pub fn tv_reconstruct(
    corruption: &CorruptionModel,
    y: &[f64],
    lambda_tv: f64,
    alpha: f64,
    max_iters: usize,
    shape: (usize, usize),
    signal_truth: Option<&[f64]>,
) -> Result<TvResult> {
    let (h, w) = shape;
    let d = h * w;
    if corruption.operator().input_dim() != d {
        return Err(Error::ShapeMismatch {
            op: "tv_reconstruct",
            lhs: vec![corruption.operator().input_dim()],
            rhs: vec![d],
        });
    }
    let mut x = vec![0.0; d];
    let mut losses = Vec::with_capacity(max_iters + 1);
    let mut best: Option<BestIterate> = None;
    for iter in 0..=max_iters {
        let ax = corruption.operator().apply(&x)?;
        let resid: Vec<f64> = ax.iter().zip(y).map(|(a, b)| a - b).collect();
        let loss = 0.5 * resid.iter().map(|v| v * v).sum::<f64>();
        losses.push(loss);
        if let Some(truth) = signal_truth {
            let m = crate::metrics::mse(&x, truth)?;
            if best.as_ref().map_or(true, |b| m < b.mse) {
                best = Some(BestIterate { iter, mse: m, x: x.clone(), p: Vec::new() });
            }
        }
        if iter == max_iters {
            break;
        }
        let g = corruption.operator().apply_adjoint(&resid)?;
        let v: Vec<f64> = x.iter().zip(&g).map(|(xi, gi)| xi - alpha * gi).collect();
        x = tv_prox(&v, alpha * lambda_tv, h, w, 50);
    }
    Ok(TvResult { x_hat: x, losses, best })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::FlowModel;
    use crate::geometry::PullbackGeometry;
    use crate::rae::SelectBy;

    fn identity_rae(d: usize, k: usize) -> Rae {
        let g = PullbackGeometry::new(FlowModel::identity(d, 2, 3));
        // Samples spread along the first k canonical axes.
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let rows: Vec<Vec<f64>> = (0..(4 * d).max(20))
            .map(|_| {
                (0..d)
                    .map(|j| {
                        if j < k {
                            rng.gen_range(-2.0..2.0)
                        } else {
                            0.001 * rng.gen_range(-1.0..1.0)
                        }
                    })
                    .collect()
            })
            .collect();
        Rae::build_from_samples(g, &Tensor::from_rows(&rows).unwrap(), SelectBy::LatentDim(k))
            .unwrap()
    }

    fn random_rae_scaled(d: usize, k: usize, seed: u64, alpha_scale: f64, logmag_scale: f64) -> Rae {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut flow = FlowModel::init_random(d, 2, 3, &mut rng);
        for layer in flow.layers_mut() {
            for a in layer.coupling.alpha.data_mut() {
                *a = alpha_scale * rng.gen_range(-1.0..1.0);
            }
            for lm in layer.linear.diag_logmag.data_mut() {
                *lm = logmag_scale * rng.gen_range(-1.0..1.0);
            }
        }
        let g = PullbackGeometry::new(flow);
        let samples = g.flow().sample(6 * d, seed + 1).unwrap();
        Rae::build_from_samples(g, &samples, SelectBy::LatentDim(k)).unwrap()
    }

    fn random_rae(d: usize, k: usize, seed: u64, alpha_scale: f64) -> Rae {
        random_rae_scaled(d, k, seed, alpha_scale, 0.15)
    }

    /// Gentle couplings so the smoothness conditions actually certify.
    fn certified_toy_rae(seed: u64) -> Rae {
        random_rae_scaled(6, 2, seed, 0.02, 0.05)
    }

    fn identity_corruption(d: usize, sigma: f64) -> CorruptionModel {
        CorruptionModel::new(LinearOperator::Identity { dim: d }, sigma).unwrap()
    }

    #[test]
    fn tanh_bound_values() {
        assert!((tanh_power_derivative_bound(1) - 1.0).abs() < 1e-15);
        let expect_r2 = 4.0 / (3.0 * 3.0f64.sqrt());
        assert!((tanh_power_derivative_bound(2) - expect_r2).abs() < 1e-12);
        // Numeric sup oracle over a fine grid for several powers.
        for r in 1..=8u32 {
            let mut sup: f64 = 0.0;
            for i in 0..=100_000 {
                let t = i as f64 / 100_000.0;
                sup = sup.max(r as f64 * t.powi(r as i32 - 1) * (1.0 - t * t));
            }
            let closed = tanh_power_derivative_bound(r);
            assert!((closed - sup).abs() < 1e-6, "r={r}: closed {closed} vs grid {sup}");
            assert!(closed <= 2.0);
        }
    }

    #[test]
    fn identity_decoder_constants() {
        let rae = identity_rae(4, 2);
        let s = smoothness_constants(&rae).unwrap();
        for layer in &s.per_layer {
            assert!(layer.b.abs() < 1e-15);
            assert!((layer.underline_sigma - 1.0).abs() < 1e-9);
            assert!((layer.overline_sigma - 1.0).abs() < 1e-9);
        }
        assert!((s.m1_lower - 1.0).abs() < 1e-8);
        assert!((s.m2_upper - 1.0).abs() < 1e-8);
        assert!(s.m_upper.abs() < 1e-15, "affine decoder must have M = 0");

        // Ratios are exactly 1 for the affine isometric decoder.
        let (lo, hi) = empirical_bilipschitz(&rae, 500, 3).unwrap();
        assert!((lo - 1.0).abs() < 1e-8 && (hi - 1.0).abs() < 1e-8);
    }

    #[test]
    fn bilipschitz_sandwich_random_models() {
        for seed in 0..5u64 {
            let rae = random_rae(4, 2, 100 + seed, 0.3);
            let s = smoothness_constants(&rae).unwrap();
            let (lo, hi) = empirical_bilipschitz(&rae, 2000, seed).unwrap();
            assert!(
                s.m1_lower <= lo + 1e-9,
                "seed {seed}: certified m1 {} above sampled min {lo}",
                s.m1_lower
            );
            assert!(
                hi <= s.m2_upper + 1e-9,
                "seed {seed}: sampled max {hi} above certified m2 {}",
                s.m2_upper
            );
            assert!(lo <= hi);
        }
    }

    /// Dense `J_D(p) = J(x)^{-1} Utilde`.
    fn decoder_jacobian(rae: &Rae, p: &[f64]) -> Tensor {
        let x = rae.decode(p).unwrap();
        let j = rae.geometry().flow().jacobian_at(&x).unwrap();
        let lu = linalg::lu_factor(&j).unwrap();
        let d = rae.dim();
        let k = rae.latent_dim();
        let mut out = vec![0.0; d * k];
        for c in 0..k {
            let col: Vec<f64> = (0..d).map(|r| rae.u_tilde().get2(r, c)).collect();
            let s = lu.solve(&col);
            for r in 0..d {
                out[r * k + c] = s[r];
            }
        }
        Tensor::from_shape(d, k, out).unwrap()
    }

    #[test]
    fn jacobian_lipschitz_bound_holds_empirically() {
        let rae = random_rae(4, 2, 200, 0.3);
        let s = smoothness_constants(&rae).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..1000 {
            let p: Vec<f64> = (0..2).map(|_| 1.5 * rng.gen_range(-1.0..1.0f64)).collect();
            let q: Vec<f64> = (0..2).map(|_| 1.5 * rng.gen_range(-1.0..1.0f64)).collect();
            let dpq: f64 = p.iter().zip(&q).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
            if dpq < 1e-9 {
                continue;
            }
            let jp = decoder_jacobian(&rae, &p);
            let jq = decoder_jacobian(&rae, &q);
            let diff = Tensor::new(
                jp.shape().to_vec(),
                jp.data().iter().zip(jq.data()).map(|(a, b)| a - b).collect(),
            )
            .unwrap();
            let op_norm = linalg::singular_values(&diff).unwrap()[0];
            assert!(
                op_norm <= s.m_upper * dpq + 1e-9,
                "||J(p)-J(q)|| = {op_norm} > M ||p-q|| = {}",
                s.m_upper * dpq
            );
        }
    }

    #[test]
    fn decoder_injectivity_via_certified_m1() {
        let rae = random_rae(3, 2, 300, 0.2);
        let s = smoothness_constants(&rae).unwrap();
        assert!(s.m1_lower > 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..1000 {
            let p: Vec<f64> = (0..2).map(|_| rng.gen_range(-2.0..2.0f64)).collect();
            let q: Vec<f64> = (0..2).map(|_| rng.gen_range(-2.0..2.0f64)).collect();
            let dpq: f64 = p.iter().zip(&q).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
            let xp = rae.decode(&p).unwrap();
            let xq = rae.decode(&q).unwrap();
            let dx: f64 =
                xp.iter().zip(&xq).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
            assert!(dx + 1e-12 >= s.m1_lower * dpq, "injectivity margin violated");
        }
    }

    #[test]
    fn rric_identity_and_zero_operator() {
        let rae = identity_rae(4, 2);
        let ident = identity_corruption(4, 0.1);
        let delta = check_rric(&rae, &ident, 500, 5).unwrap();
        assert!(delta < 1e-12, "A = I must give delta 0, got {delta}");

        let zero = CorruptionModel::new(
            LinearOperator::Dense(Tensor::zeros(&[4, 4])),
            0.1,
        )
        .unwrap();
        let delta0 = check_rric(&rae, &zero, 500, 5).unwrap();
        assert!(delta0 <= 1.0 + 1e-12);

        // Affine decoder with a 1-d latent: all differences are parallel, so
        // A = 0 attains delta = 1 exactly.
        let rae1 = identity_rae(4, 1);
        let zero1 = CorruptionModel::new(
            LinearOperator::Dense(Tensor::zeros(&[4, 4])),
            0.1,
        )
        .unwrap();
        let delta1 = check_rric(&rae1, &zero1, 200, 7).unwrap();
        assert!((delta1 - 1.0).abs() < 1e-9, "parallel secants give delta 1, got {delta1}");
    }

    #[test]
    fn rip_identity_and_scaling() {
        let rae = identity_rae(4, 2);
        let ident = identity_corruption(4, 0.1);
        let slack = check_rip(RangeSource::Decoder(&rae), &ident, 500, 9).unwrap();
        assert!((slack.lower - 1.0).abs() < 1e-10 && (slack.upper - 1.0).abs() < 1e-10);
        assert_eq!(slack.delta_hat(), 0.0);

        let mut scaled = Tensor::eye(4);
        for i in 0..4 {
            scaled.data_mut()[i * 4 + i] = 1.3;
        }
        let c = CorruptionModel::new(LinearOperator::Dense(scaled), 0.1).unwrap();
        let slack2 = check_rip(RangeSource::Decoder(&rae), &c, 500, 9).unwrap();
        assert!((slack2.lower - 1.69).abs() < 1e-9 && (slack2.upper - 1.69).abs() < 1e-9);
    }

    #[test]
    fn gaussian_operator_is_near_isometric_on_toy_range() {
        // m = 8 d_eps rows with N(0, 1/m) entries over a d_eps = 2 range.
        let rae = random_rae_scaled(6, 2, 400, 0.03, 0.05);
        let m = 16;
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        let a = Tensor::from_shape(
            m,
            6,
            (0..6 * m)
                .map(|_| {
                    (1.0 / m as f64).sqrt()
                        * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng)
                })
                .collect::<Vec<f64>>(),
        )
        .unwrap();
        let c = CorruptionModel::new(LinearOperator::Dense(a), 0.1).unwrap();
        let delta = check_rric(&rae, &c, 10_000, 17).unwrap();
        assert!(delta < 0.5, "sampled RRIC constant {delta} unexpectedly large");

        let slack = check_rip(RangeSource::Decoder(&rae), &c, 10_000, 19).unwrap();
        assert!(slack.lower > 0.3 && slack.upper < 1.7, "ratios [{}, {}]", slack.lower, slack.upper);
    }

    #[test]
    fn certificate_hand_example() {
        // Identity decoder, A = I, delta = 0, alpha = 0.2:
        // rho = 1 - 0.2 + 2*0.04 = 0.88, beta = 2*0.04 + 0.2 = 0.28.
        let rae = identity_rae(3, 2);
        let c = identity_corruption(3, 0.1);
        let cert = certificate(&rae, &c, 0.2, 0.0, false).unwrap();
        assert!(cert.satisfied);
        assert!((cert.m_delta - 1.0).abs() < 1e-6);
        assert!((cert.alpha_max - 0.5).abs() < 1e-6);
        assert!((cert.rho.unwrap() - 0.88).abs() < 1e-6);
        assert!((cert.beta.unwrap() - 0.28).abs() < 1e-6);
    }

    #[test]
    fn certificate_condition_violations() {
        let rae = identity_rae(3, 2);
        let c = identity_corruption(3, 0.1);
        // alpha above alpha_max.
        let cert = certificate(&rae, &c, 0.6, 0.0, false).unwrap();
        assert!(!cert.satisfied && !cert.alpha_ok);

        // Large coupling coefficients blow up M so m2 M >= 2 m1^2.
        let rae_wild = random_rae(3, 2, 500, 3.0);
        let s = smoothness_constants(&rae_wild).unwrap();
        assert!(s.m2_upper * s.m_upper >= 2.0 * s.m1_lower * s.m1_lower);
        let cert2 = certificate(&rae_wild, &c, 0.01, 0.0, false).unwrap();
        assert!(!cert2.smoothness_ok && !cert2.satisfied);
    }

    #[test]
    fn invert_identity_contracts_linearly() {
        let rae = identity_rae(3, 2);
        let c = identity_corruption(3, 0.1);
        let p_star = vec![0.7, -0.4];
        let y = rae.decode(&p_star).unwrap();
        let alpha = 0.3;
        let res = invert(
            &rae,
            &c,
            &y,
            &InvertOptions {
                alpha,
                max_iters: 40,
                init: None,
                latent_truth: Some(p_star.clone()),
                signal_truth: None,
            },
        )
        .unwrap();
        let dist = res.latent_dist.unwrap();
        // Quadratic objective with unit curvature: exact factor |1 - alpha|.
        for t in 0..dist.len() - 1 {
            if dist[t] > 1e-12 {
                let factor = dist[t + 1] / dist[t];
                assert!((factor - (1.0 - alpha).abs()).abs() < 1e-8, "factor {factor}");
            }
        }
        assert!(res.aborted.is_none());
        let final_err: f64 = res
            .p_hat
            .iter()
            .zip(&p_star)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        assert!(final_err < 1e-5);
    }

    #[test]
    fn certified_run_obeys_per_iteration_inequality() {
        // Small certified instance with noise: every iterate must satisfy
        // the contraction inequality with the certified rho, beta.
        let rae = certified_toy_rae(600);
        let c = identity_corruption(6, 0.05);
        let cert = certificate(&rae, &c, 0.0, 0.0, false).unwrap();
        assert!(cert.smoothness_ok && cert.delta_ok, "toy instance must certify");
        let alpha = 0.5 * cert.alpha_max;
        let cert = certificate(&rae, &c, alpha, 0.0, false).unwrap();
        assert!(cert.satisfied);
        let rho = cert.rho.unwrap();
        let beta = cert.beta.unwrap();

        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for run in 0..5 {
            let p_star: Vec<f64> = (0..2).map(|_| rng.gen_range(-1.0..1.0f64)).collect();
            let x_star = rae.decode(&p_star).unwrap();
            let noise: Vec<f64> = (0..6)
                .map(|_| {
                    0.05 * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng)
                })
                .collect();
            let y: Vec<f64> = x_star.iter().zip(&noise).map(|(a, b)| a + b).collect();
            let atn = c.operator().apply_adjoint(&noise).unwrap();
            let atn_sq: f64 = atn.iter().map(|v| v * v).sum();

            let res = invert(
                &rae,
                &c,
                &y,
                &InvertOptions {
                    alpha,
                    max_iters: 100,
                    init: None,
                    latent_truth: Some(p_star.clone()),
                    signal_truth: None,
                },
            )
            .unwrap();
            let dist = res.latent_dist.unwrap();
            for t in 0..dist.len() - 1 {
                let lhs = dist[t + 1] * dist[t + 1];
                let rhs = rho * dist[t] * dist[t] + beta * atn_sq;
                assert!(
                    lhs <= rhs + 1e-10,
                    "run {run}, iter {t}: {lhs} > {rhs}"
                );
            }
        }
    }

    #[test]
    fn one_point_convexity_and_gradient_bound() {
        let rae = certified_toy_rae(700);
        let c = identity_corruption(6, 0.05);
        let cert = certificate(&rae, &c, 1e-3, 0.0, false).unwrap();
        assert!(cert.m_delta > 0.0);
        let m2 = cert.m2;
        let ata = cert.ata_norm;

        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let p_star: Vec<f64> = (0..2).map(|_| rng.gen_range(-0.8..0.8f64)).collect();
        let y = rae.decode(&p_star).unwrap(); // noiseless
        let mut convexity_violations = 0usize;
        for _ in 0..1000 {
            let p: Vec<f64> = (0..2).map(|_| rng.gen_range(-1.5..1.5f64)).collect();
            let (_, grad, _) = decode_loss_grad(&rae, None, &y, &p).unwrap();
            let diff: Vec<f64> = p.iter().zip(&p_star).map(|(a, b)| a - b).collect();
            let inner: f64 = diff.iter().zip(&grad).map(|(a, b)| a * b).sum();
            let dist_sq: f64 = diff.iter().map(|v| v * v).sum();
            // One-point convexity with the certified constant (delta = 0,
            // noiseless): logged because the sampled delta underestimates.
            if inner < cert.m_delta * dist_sq - 1e-10 {
                convexity_violations += 1;
            }
            // Gradient bound: ||grad||^2 <= 2 m2^4 ||A^T A||^2 ||p-p*||^2.
            let gsq: f64 = grad.iter().map(|v| v * v).sum();
            assert!(
                gsq <= 2.0 * m2.powi(4) * ata * ata * dist_sq + 1e-10,
                "gradient bound violated: {gsq}"
            );
        }
        assert_eq!(
            convexity_violations, 0,
            "one-point convexity violated {convexity_violations} times on a certified instance"
        );
    }

    #[test]
    fn tv_prox_constant_fixed_point_and_lambda_zero() {
        let (h, w) = (8, 8);
        let v = vec![0.37; h * w];
        let out = tv_prox(&v, 0.5, h, w, 50);
        for (a, b) in out.iter().zip(&v) {
            assert!((a - b).abs() < 1e-12, "constant image moved");
        }

        // lambda = 0 reduces to plain gradient descent; with A = I it
        // converges to the data.
        let c = identity_corruption(h * w, 0.1);
        let mut rng = ChaCha8Rng::seed_from_u64(37);
        let y: Vec<f64> = (0..h * w).map(|_| rng.gen_range(0.0..1.0)).collect();
        let res = tv_reconstruct(&c, &y, 0.0, 0.5, 200, (h, w), None).unwrap();
        let err: f64 = res
            .x_hat
            .iter()
            .zip(&y)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        assert!(err < 1e-6, "lambda = 0 GD did not reach y (err {err})");
    }

    #[test]
    fn tv_grad_div_adjointness() {
        let (h, w) = (6, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let u: Vec<f64> = (0..h * w).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let p1: Vec<f64> = (0..h * w).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let p2: Vec<f64> = (0..h * w).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut gx = vec![0.0; h * w];
        let mut gy = vec![0.0; h * w];
        tv_grad(&u, h, w, &mut gx, &mut gy);
        let mut div = vec![0.0; h * w];
        tv_div(&p1, &p2, h, w, &mut div);
        let lhs: f64 = gx.iter().zip(&p1).chain(gy.iter().zip(&p2)).map(|(a, b)| a * b).sum();
        let rhs: f64 = u.iter().zip(&div).map(|(a, b)| -a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10, "grad/div not adjoint: {lhs} vs {rhs}");
    }

    #[test]
    fn tv_denoises_blurred_blocky_image() {
        // A blocky image blurred and noised: TV should beat doing nothing.
        let (h, w) = (14, 14);
        let mut truth = vec![0.0; h * w];
        for i in 3..10 {
            for j in 4..11 {
                truth[i * w + j] = 1.0;
            }
        }
        let op = LinearOperator::gaussian_blur(h, w, 9, 1.5);
        let c = CorruptionModel::new(op, 0.05).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        let y = c.apply(&truth, &mut rng).unwrap();
        let alpha = 0.2 / c.operator().gram_norm();
        let res = tv_reconstruct(&c, &y, 0.05, alpha, 300, (h, w), Some(&truth)).unwrap();
        let mse_rec = res.best.as_ref().unwrap().mse;
        let mse_y = crate::metrics::mse(&y, &truth).unwrap();
        assert!(mse_rec < mse_y, "TV best-iterate MSE {mse_rec} not below observation {mse_y}");
    }
}
