//! Riemannian autoencoder: a base point plus an orthonormal tangent basis
//! turn the pullback exp/log maps into a nonlinear projection
//! `decode(encode(x))` onto a low-dimensional manifold.
//!
//! Two construction routes: the analytic one eigendecomposes the tangent
//! covariance implied by the model density at `phi^{-1}(0)`; the sample
//! route takes the barycenter of a batch and runs tangent-space PCA in the
//! plain l2 inner product. The sample route is the production default; the
//! analytic route assumes the data matches the model family exactly.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::error::{Error, Result};
use crate::flow::FlowModel;
use crate::geometry::PullbackGeometry;
use crate::linalg::{self, LuFactors};
use crate::metrics::{self, W1Estimate};
use crate::tensor::Tensor;

pub const RAE_CHECKPOINT_VERSION: &str = "1";

/// Where the tangent covariance comes from.
pub enum CovarianceSource<'a> {
    /// Model-implied covariance at the density's own base point.
    Analytic,
    /// Empirical covariance of log-mapped samples about their barycenter.
    Samples(&'a Tensor),
}

/// How to pick the latent dimension when building from samples.
#[derive(Debug, Clone, Copy)]
pub enum SelectBy {
    Epsilon(f64),
    LatentDim(usize),
}

/// Tangent covariance and its base point.
///
/// Analytic mode returns `D_0 phi^{-1} (D_0 phi^{-1})^T` at the base point
/// `phi^{-1}(0)` (unit latent covariance). Sample mode returns the second
/// moment of the log-mapped batch about the barycenter; the barycenter makes
/// those log vectors exactly mean-zero.
pub fn tangent_covariance(
    geometry: &PullbackGeometry,
    source: CovarianceSource<'_>,
) -> Result<(Tensor, Vec<f64>)> {
    let d = geometry.dim();
    match source {
        CovarianceSource::Analytic => {
            let base = geometry.flow().inverse_point(&vec![0.0; d])?;
            let jac = geometry.flow().jacobian_at(&base)?;
            let inv = linalg::lu_factor(&jac)?.inverse();
            let inv_t = linalg::transpose(&inv);
            let cov = linalg::matmul(&inv, &inv_t)?;
            Ok((cov, base))
        }
        CovarianceSource::Samples(batch) => {
            if batch.rows() < 2 {
                return Err(Error::invalid(
                    "tangent_covariance",
                    format!("sample mode needs N >= 2, got {}", batch.rows()),
                ));
            }
            let base = geometry.barycenter(batch)?;
            let at = geometry.base_at(&base)?;
            let n = batch.rows();
            let mut cov = vec![0.0; d * d];
            for i in 0..n {
                let log = at.log(batch.row(i))?;
                for r in 0..d {
                    for c in 0..d {
                        cov[r * d + c] += log[r] * log[c];
                    }
                }
            }
            cov.iter_mut().for_each(|v| *v /= n as f64);
            Ok((Tensor::from_shape(d, d, cov)?, base))
        }
    }
}

/// Smallest `d' in [d-1]` whose spectral tail sum is within `epsilon` of the
/// trace. Rejects `epsilon <= lambda_min / trace` (no valid `d'`) and
/// `epsilon > 1`.
pub fn select_dim(spectrum: &[f64], epsilon: f64) -> Result<usize> {
    let d = spectrum.len();
    if d < 2 {
        return Err(Error::invalid("select_dim", "need at least 2 eigenvalues"));
    }
    let trace: f64 = spectrum.iter().sum();
    let eps0 = spectrum[d - 1] / trace;
    if epsilon <= eps0 || epsilon > 1.0 {
        return Err(Error::invalid(
            "select_dim",
            format!("epsilon = {epsilon} outside ({eps0}, 1]"),
        ));
    }
    let mut tail = 0.0;
    // Walk d' downward accumulating the tail; the answer is the smallest d'
    // whose tail still fits.
    let mut best = d - 1;
    for dp in (1..d).rev() {
        tail += spectrum[dp];
        if tail <= epsilon * trace {
            best = dp;
        } else {
            break;
        }
    }
    Ok(best)
}

/// The autoencoder: base point, orthonormal tangent basis, spectrum, and the
/// geometry it lives on, with cached Jacobian factors for encode/decode.
pub struct Rae {
    base_point: Vec<f64>,
    basis: Tensor,
    latent_dim: usize,
    spectrum: Vec<f64>,
    geometry: PullbackGeometry,
    z_bar: Vec<f64>,
    jbar: Tensor,
    jbar_lu: LuFactors,
    u_tilde: Tensor,
}

/// Monte Carlo projection-error summary.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProjectionErrorReport {
    /// Mean of `||decode(encode(x)) - x||`.
    pub expected_error: f64,
    pub sample_count: usize,
    pub std_error: f64,
    /// Sliced W1 between the projected set and the samples themselves,
    /// for the distributional-error comparison.
    pub sliced_w1: Option<W1Estimate>,
    /// `(C1 sqrt(eps) ||.||_F, 1/2 C2 eps ||.||_F^2)` when evaluated.
    pub bound_terms: Option<(f64, f64)>,
}

/// Estimated curvature terms of the expected-projection-error bound.
///
/// The suprema are approximated by sampling latents; the result is a lower
/// bound of a sup and therefore a heuristic estimate, never a certificate.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Thm34Terms {
    pub c1: f64,
    pub c2: f64,
    pub c1_term: f64,
    pub c2_term: f64,
    pub bound: f64,
    pub frob_d0_inv: f64,
}

impl Rae {
    fn finish(
        geometry: PullbackGeometry,
        base_point: Vec<f64>,
        eigvecs: &Tensor,
        spectrum: Vec<f64>,
        latent_dim: usize,
    ) -> Result<Rae> {
        let d = geometry.dim();
        if latent_dim == 0 || latent_dim > d {
            return Err(Error::invalid("Rae", format!("latent_dim {latent_dim} outside 1..={d}")));
        }
        let mut basis = vec![0.0; d * latent_dim];
        for r in 0..d {
            for c in 0..latent_dim {
                basis[r * latent_dim + c] = eigvecs.get2(r, c);
            }
        }
        let basis = Tensor::from_shape(d, latent_dim, basis)?;
        let z_bar = geometry.flow().forward_point(&base_point)?;
        let jbar = geometry.flow().jacobian_at(&base_point)?;
        let jbar_lu = linalg::lu_factor(&jbar)?;
        let u_tilde = linalg::matmul(&jbar, &basis)?;
        Ok(Rae { base_point, basis, latent_dim, spectrum, geometry, z_bar, jbar, jbar_lu, u_tilde })
    }

    /// Eigendecompose the model-implied tangent covariance and keep the top
    /// directions for the given `epsilon`.
    pub fn build_analytic(geometry: PullbackGeometry, epsilon: f64) -> Result<Rae> {
        let (cov, base) = tangent_covariance(&geometry, CovarianceSource::Analytic)?;
        let (spectrum, eigvecs) = linalg::sym_eigen(&cov)?;
        let latent_dim = select_dim(&spectrum, epsilon)?;
        Rae::finish(geometry, base, &eigvecs, spectrum, latent_dim)
    }

    /// Barycenter plus tangent-space PCA on a sample batch.
    pub fn build_from_samples(
        geometry: PullbackGeometry,
        samples: &Tensor,
        select: SelectBy,
    ) -> Result<Rae> {
        let (cov, base) = tangent_covariance(&geometry, CovarianceSource::Samples(samples))?;
        let (spectrum, eigvecs) = linalg::sym_eigen(&cov)?;
        let latent_dim = match select {
            SelectBy::Epsilon(eps) => select_dim(&spectrum, eps)?,
            SelectBy::LatentDim(k) => k,
        };
        if samples.rows() < latent_dim + 1 {
            return Err(Error::invalid(
                "build_rae_from_samples",
                format!("need at least {} samples for latent_dim {latent_dim}", latent_dim + 1),
            ));
        }
        let scale = spectrum[0].max(1e-300);
        if spectrum[latent_dim - 1] <= 1e-12 * scale {
            return Err(Error::invalid(
                "build_rae_from_samples",
                format!(
                    "rank deficiency: eigenvalue {} at index {} cannot support latent_dim {latent_dim}",
                    spectrum[latent_dim - 1],
                    latent_dim - 1
                ),
            ));
        }
        Rae::finish(geometry, base, &eigvecs, spectrum, latent_dim)
    }

    pub fn base_point(&self) -> &[f64] {
        &self.base_point
    }

    /// `[d, d_eps]` orthonormal basis.
    pub fn basis(&self) -> &Tensor {
        &self.basis
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    /// All `d` eigenvalues of the tangent covariance, descending.
    pub fn spectrum(&self) -> &[f64] {
        &self.spectrum
    }

    pub fn geometry(&self) -> &PullbackGeometry {
        &self.geometry
    }

    pub fn dim(&self) -> usize {
        self.geometry.dim()
    }

    /// `phi(base_point)` cached for decode.
    pub fn z_base(&self) -> &[f64] {
        &self.z_bar
    }

    /// `D_{base} phi @ basis`, the latent-to-latent-space injection.
    pub fn u_tilde(&self) -> &Tensor {
        &self.u_tilde
    }

    /// `U^T log_base(x)`.
    pub fn encode(&self, x: &[f64]) -> Result<Vec<f64>> {
        let z = self.geometry.flow().forward_point(x)?;
        let w: Vec<f64> = z.iter().zip(&self.z_bar).map(|(a, b)| a - b).collect();
        let log = self.jbar_lu.solve(&w);
        linalg::matvec_t(&self.basis, &log)
    }

    /// `exp_base(U p) = phi^{-1}(phi(base) + D_base phi [U p])`.
    pub fn decode(&self, p: &[f64]) -> Result<Vec<f64>> {
        if p.len() != self.latent_dim {
            return Err(Error::ShapeMismatch {
                op: "decode",
                lhs: vec![self.latent_dim],
                rhs: vec![p.len()],
            });
        }
        let up = linalg::matvec(&self.u_tilde, p)?;
        let z: Vec<f64> = self.z_bar.iter().zip(&up).map(|(a, b)| a + b).collect();
        self.geometry.flow().inverse_point(&z)
    }

    pub fn encode_batch(&self, x: &Tensor) -> Result<Tensor> {
        let mut data = Vec::with_capacity(x.rows() * self.latent_dim);
        for i in 0..x.rows() {
            data.extend(self.encode(x.row(i))?);
        }
        Tensor::from_shape(x.rows(), self.latent_dim, data)
    }

    pub fn decode_batch(&self, p: &Tensor) -> Result<Tensor> {
        let mut data = Vec::with_capacity(p.rows() * self.dim());
        for i in 0..p.rows() {
            data.extend(self.decode(p.row(i))?);
        }
        Tensor::from_shape(p.rows(), self.dim(), data)
    }

    /// `decode(encode(x))`, the projection onto the learned manifold.
    pub fn project(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.decode(&self.encode(x)?)
    }

    /// Monte Carlo expected projection error under the model's own samples.
    pub fn expected_projection_error_model(
        &self,
        count: usize,
        seed: u64,
    ) -> Result<ProjectionErrorReport> {
        if count < 100 {
            return Err(Error::invalid(
                "expected_projection_error",
                format!("Monte Carlo mode needs count >= 100, got {count}"),
            ));
        }
        let samples = self.geometry.flow().sample(count, seed)?;
        self.expected_projection_error_of(&samples)
    }

    /// Expected projection error over a supplied batch, with the sliced-W1
    /// distributional comparison included.
    pub fn expected_projection_error_of(&self, samples: &Tensor) -> Result<ProjectionErrorReport> {
        let n = samples.rows();
        if n == 0 {
            return Err(Error::invalid("expected_projection_error", "empty batch"));
        }
        let mut projected = Vec::with_capacity(samples.numel());
        let mut errs = Vec::with_capacity(n);
        for i in 0..n {
            let x = samples.row(i);
            let px = self.project(x)?;
            errs.push(x.iter().zip(&px).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt());
            projected.extend(px);
        }
        let mean = errs.iter().sum::<f64>() / n as f64;
        let var =
            errs.iter().map(|e| (e - mean) * (e - mean)).sum::<f64>() / (n as f64 - 1.0).max(1.0);
        let proj_tensor = Tensor::from_shape(n, self.dim(), projected)?;
        let sliced = metrics::w1_sliced(&proj_tensor, samples, metrics::DEFAULT_SLICES, 0)?;
        Ok(ProjectionErrorReport {
            expected_error: mean,
            sample_count: n,
            std_error: (var / n as f64).sqrt(),
            sliced_w1: Some(sliced),
            bound_terms: None,
        })
    }

    /// Estimate the curvature constants of the projection-error bound by
    /// sampling latents from `N(0, diag(spectrum)) * 3` and maximizing the
    /// relevant operator norms (power iteration for the first; central
    /// differences of forward-mode products for the second).
    pub fn thm34_bound_terms(
        &self,
        epsilon: f64,
        latent_sample_count: usize,
        seed: u64,
    ) -> Result<Thm34Terms> {
        if latent_sample_count < 1 {
            return Err(Error::invalid("thm34_bound_terms", "need at least one latent sample"));
        }
        let flow = self.geometry.flow();
        let d = self.dim();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);

        // ||D_0 phi^{-1}||_F at the origin of the latent space.
        let x0 = flow.inverse_point(&vec![0.0; d])?;
        let j0 = flow.jacobian_at(&x0)?;
        let frob = {
            let inv = linalg::lu_factor(&j0)?.inverse();
            inv.data().iter().map(|v| v * v).sum::<f64>().sqrt()
        };

        let mut c1: f64 = 0.0;
        let mut c2: f64 = 0.0;
        let h = 1e-4;
        let n_dirs = 6;
        for _ in 0..latent_sample_count {
            let p: Vec<f64> = (0..self.latent_dim)
                .map(|k| {
                    3.0 * self.spectrum[k].max(0.0).sqrt()
                        * rand_distr::Distribution::<f64>::sample(
                            &rand_distr::StandardNormal,
                            &mut rng,
                        )
                })
                .collect();
            let x = self.decode(&p)?;
            let jx = flow.jacobian_at(&x)?;
            let lu = linalg::lu_factor(&jx)?;

            // C1: spectral norm of v -> J_x^{-1} Jbar v.
            let lambda = linalg::power_iteration(d, 100, 1e-12, |v| {
                let w = linalg::matvec(&self.jbar, v).expect("dims");
                let s = lu.solve(&w);
                let t = lu.solve_transpose(&s);
                linalg::matvec_t(&self.jbar, &t).expect("dims")
            });
            c1 = c1.max(lambda.max(0.0).sqrt());

            // C2: diagonal samples of the second-derivative bilinear map,
            // via central differences of the first-derivative action.
            let z = flow.forward_point(&x)?;
            for _ in 0..n_dirs {
                let mut u: Vec<f64> = (0..d)
                    .map(|_| {
                        rand_distr::Distribution::<f64>::sample(
                            &rand_distr::StandardNormal,
                            &mut rng,
                        )
                    })
                    .collect();
                let norm = u.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-300);
                u.iter_mut().for_each(|v| *v /= norm);
                let w = linalg::matvec(&self.jbar, &u)?;

                let solve_at = |zpt: &[f64]| -> Result<Vec<f64>> {
                    let xp = flow.inverse_point(zpt)?;
                    let jp = flow.jacobian_at(&xp)?;
                    Ok(linalg::lu_factor(&jp)?.solve(&w))
                };
                let zp: Vec<f64> = z.iter().zip(&w).map(|(a, b)| a + h * b).collect();
                let zm: Vec<f64> = z.iter().zip(&w).map(|(a, b)| a - h * b).collect();
                let fp = solve_at(&zp)?;
                let fm = solve_at(&zm)?;
                let b_norm = fp
                    .iter()
                    .zip(&fm)
                    .map(|(a, b)| ((a - b) / (2.0 * h)).powi(2))
                    .sum::<f64>()
                    .sqrt();
                c2 = c2.max(b_norm);
            }
        }

        let c1_term = c1 * epsilon.sqrt() * frob;
        let c2_term = 0.5 * c2 * epsilon * frob * frob;
        Ok(Thm34Terms { c1, c2, c1_term, c2_term, bound: c1_term + c2_term, frob_d0_inv: frob })
    }

    // ── Checkpointing ────────────────────────────────────────────────

    pub fn to_checkpoint(&self, flow_checkpoint_reference: &str) -> RaeCheckpoint {
        let d = self.dim();
        let mut colmajor = Vec::with_capacity(d * self.latent_dim);
        for c in 0..self.latent_dim {
            for r in 0..d {
                colmajor.push(self.basis.get2(r, c));
            }
        }
        RaeCheckpoint {
            version: RAE_CHECKPOINT_VERSION.to_string(),
            base_point: self.base_point.clone(),
            basis: colmajor,
            spectrum: self.spectrum.clone(),
            latent_dim: self.latent_dim,
            flow_checkpoint_reference: flow_checkpoint_reference.to_string(),
        }
    }

    /// Rebuild from a checkpoint plus the flow it references.
    pub fn from_checkpoint(ckpt: &RaeCheckpoint, flow: FlowModel) -> Result<Rae> {
        if ckpt.version != RAE_CHECKPOINT_VERSION {
            return Err(Error::Schema {
                expected: RAE_CHECKPOINT_VERSION.to_string(),
                found: ckpt.version.clone(),
                msg: "autoencoder checkpoint version".to_string(),
            });
        }
        let d = flow.dim();
        if ckpt.base_point.len() != d || ckpt.basis.len() != d * ckpt.latent_dim {
            return Err(Error::Schema {
                expected: format!("base {d}, basis {}x{}", d, ckpt.latent_dim),
                found: format!("base {}, basis {}", ckpt.base_point.len(), ckpt.basis.len()),
                msg: "autoencoder checkpoint shapes".to_string(),
            });
        }
        // Column-major back to a [d, d] eigvec-style matrix (only the first
        // latent_dim columns are used).
        let mut eigvecs = Tensor::zeros(&[d, d]);
        for c in 0..ckpt.latent_dim {
            for r in 0..d {
                eigvecs.data_mut()[r * d + c] = ckpt.basis[c * d + r];
            }
        }
        Rae::finish(
            PullbackGeometry::new(flow),
            ckpt.base_point.clone(),
            &eigvecs,
            ckpt.spectrum.clone(),
            ckpt.latent_dim,
        )
    }

    pub fn save(&self, path: &Path, flow_checkpoint_reference: &str) -> Result<()> {
        let json = serde_json::to_string_pretty(&self.to_checkpoint(flow_checkpoint_reference))?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &Path, flow: FlowModel) -> Result<Rae> {
        let ckpt: RaeCheckpoint = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        Rae::from_checkpoint(&ckpt, flow)
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RaeCheckpoint {
    pub version: String,
    pub base_point: Vec<f64>,
    /// Column-major `d x latent_dim`.
    pub basis: Vec<f64>,
    pub spectrum: Vec<f64>,
    pub latent_dim: usize,
    pub flow_checkpoint_reference: String,
}
