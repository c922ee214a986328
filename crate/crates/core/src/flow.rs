//! The diffeomorphism: additive tanh-polynomial coupling layers composed
//! with invertible LU-parametrized linear layers.
//!
//! Each layer applies `z -> V z` followed by the volume-preserving coupling
//! `[z1, z2] -> [z1, z2 + g(z1)]` with `g_l(u) = sum_r alpha[r][l] tanh(u_l)^r`.
//! `V = L U` with unit-lower `L` and an upper factor whose diagonal is stored
//! as fixed signs and trainable log-magnitudes, so invertibility is
//! unconditional and `log|det D phi| = sum(logmag)` exactly, independent of
//! the input point.
//!
//! Odd dimensions split into halves of size `ceil(d/2)` and `floor(d/2)`;
//! the coupling then reads the first `floor(d/2)` coordinates of the passive
//! half.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tape::{Tape, VarId};
use crate::tensor::Tensor;

pub const CHECKPOINT_VERSION: &str = "1";

const LN_2PI: f64 = 1.837_877_066_409_345_6;

/// Coefficients of one additive coupling map.
#[derive(Debug, Clone)]
pub struct CouplingLayerParams {
    /// `[degree, floor(d/2)]`, row r holds the coefficients of tanh(u)^(r+1).
    pub alpha: Tensor,
}

/// One LU-parametrized invertible linear map.
#[derive(Debug, Clone)]
pub struct InvertibleLinearParams {
    /// Unit-lower-triangular factor; only strictly-lower entries are free.
    pub lower: Tensor,
    /// Strictly-upper entries of the upper factor.
    pub upper: Tensor,
    /// Fixed diagonal signs of the upper factor.
    pub diag_sign: Vec<f64>,
    /// Trainable log-magnitudes of the upper factor diagonal.
    pub diag_logmag: Tensor,
}

#[derive(Debug, Clone)]
pub struct FlowLayer {
    pub linear: InvertibleLinearParams,
    pub coupling: CouplingLayerParams,
}

/// The full diffeomorphism.
#[derive(Debug, Clone)]
pub struct FlowModel {
    dim: usize,
    degree: usize,
    layers: Vec<FlowLayer>,
}

/// Split sizes for the coupling: `(ceil(d/2), floor(d/2))`.
pub fn coupling_split(dim: usize) -> (usize, usize) {
    (dim - dim / 2, dim / 2)
}

impl InvertibleLinearParams {
    fn identity(d: usize) -> Self {
        InvertibleLinearParams {
            lower: Tensor::zeros(&[d, d]),
            upper: Tensor::zeros(&[d, d]),
            diag_sign: vec![1.0; d],
            diag_logmag: Tensor::zeros(&[d]),
        }
    }

    /// Apply `V x = L (U x)` in place.
    fn apply(&self, x: &mut [f64]) {
        let d = x.len();
        let up = self.upper.data();
        let lo = self.lower.data();
        let lm = self.diag_logmag.data();
        for i in 0..d {
            let mut s = self.diag_sign[i] * lm[i].exp() * x[i];
            for j in (i + 1)..d {
                s += up[i * d + j] * x[j];
            }
            x[i] = s;
        }
        for i in (0..d).rev() {
            let mut s = x[i];
            for j in 0..i {
                s += lo[i * d + j] * x[j];
            }
            x[i] = s;
        }
    }

    /// Apply `V^{-1} z` in place: solve `L w = z`, then `U x = w`.
    fn apply_inverse(&self, z: &mut [f64]) {
        let d = z.len();
        let up = self.upper.data();
        let lo = self.lower.data();
        let lm = self.diag_logmag.data();
        for i in 0..d {
            let mut s = z[i];
            for j in 0..i {
                s -= lo[i * d + j] * z[j];
            }
            z[i] = s;
        }
        for i in (0..d).rev() {
            let mut s = z[i];
            for j in (i + 1)..d {
                s -= up[i * d + j] * z[j];
            }
            z[i] = s / (self.diag_sign[i] * lm[i].exp());
        }
    }
}

impl CouplingLayerParams {
    /// `g_l(u_l)` for the first `floor(d/2)` coordinates of the passive half.
    fn g(&self, u: f64, l: usize) -> f64 {
        let (n, d2) = (self.alpha.rows(), self.alpha.cols());
        let t = u.tanh();
        // Horner in t: t*(a_1 + t*(a_2 + ... )).
        let mut acc = 0.0;
        for r in (0..n).rev() {
            acc = t * (self.alpha.data()[r * d2 + l] + acc);
        }
        acc
    }
}

impl FlowModel {
    /// Exact identity map: `alpha = 0`, `V = I`.
    pub fn identity(dim: usize, num_layers: usize, degree: usize) -> Self {
        let (_d1, d2) = coupling_split(dim);
        let layers = (0..num_layers)
            .map(|_| FlowLayer {
                linear: InvertibleLinearParams::identity(dim),
                coupling: CouplingLayerParams { alpha: Tensor::zeros(&[degree, d2]) },
            })
            .collect();
        FlowModel { dim, degree, layers }
    }

    /// Near-identity initialization: off-diagonals ~ N(0, 0.01/d), diagonal
    /// log-magnitudes 0, signs +1, alpha = 0.
    pub fn init_random(dim: usize, num_layers: usize, degree: usize, rng: &mut impl Rng) -> Self {
        let mut model = FlowModel::identity(dim, num_layers, degree);
        let std = (0.01 / dim as f64).sqrt();
        for layer in &mut model.layers {
            let d = dim;
            let lo = layer.linear.lower.data_mut();
            for i in 0..d {
                for j in 0..i {
                    lo[i * d + j] = std * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng);
                }
            }
            let up = layer.linear.upper.data_mut();
            for i in 0..d {
                for j in (i + 1)..d {
                    up[i * d + j] = std * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng);
                }
            }
        }
        model
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn layers(&self) -> &[FlowLayer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [FlowLayer] {
        &mut self.layers
    }

    fn check_dim(&self, op: &'static str, len: usize) -> Result<()> {
        if len != self.dim {
            return Err(Error::ShapeMismatch { op, lhs: vec![self.dim], rhs: vec![len] });
        }
        Ok(())
    }

    /// `phi(x)` for a single point.
    pub fn forward_point(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_dim("flow::forward", x.len())?;
        let (d1, d2) = coupling_split(self.dim);
        let mut z = x.to_vec();
        for layer in &self.layers {
            layer.linear.apply(&mut z);
            for l in 0..d2 {
                z[d1 + l] += layer.coupling.g(z[l], l);
            }
        }
        Ok(z)
    }

    /// `phi^{-1}(y)` for a single point.
    pub fn inverse_point(&self, y: &[f64]) -> Result<Vec<f64>> {
        self.check_dim("flow::inverse", y.len())?;
        let (d1, d2) = coupling_split(self.dim);
        let mut z = y.to_vec();
        for layer in self.layers.iter().rev() {
            for l in 0..d2 {
                z[d1 + l] -= layer.coupling.g(z[l], l);
            }
            layer.linear.apply_inverse(&mut z);
        }
        Ok(z)
    }

    /// Row-wise `phi` over a `[N, d]` batch.
    pub fn forward_batch(&self, x: &Tensor) -> Result<Tensor> {
        self.check_dim("flow::forward", x.cols())?;
        let mut data = Vec::with_capacity(x.numel());
        for i in 0..x.rows() {
            data.extend(self.forward_point(x.row(i))?);
        }
        Tensor::from_shape(x.rows(), self.dim, data)
    }

    /// Row-wise `phi^{-1}` over a `[N, d]` batch.
    pub fn inverse_batch(&self, y: &Tensor) -> Result<Tensor> {
        self.check_dim("flow::inverse", y.cols())?;
        let mut data = Vec::with_capacity(y.numel());
        for i in 0..y.rows() {
            data.extend(self.inverse_point(y.row(i))?);
        }
        Tensor::from_shape(y.rows(), self.dim, data)
    }

    /// `log|det D_x phi|`, constant in `x`: the sum of stored diagonal
    /// log-magnitudes (couplings are volume-preserving).
    pub fn log_abs_det(&self) -> f64 {
        self.layers.iter().map(|l| l.linear.diag_logmag.data().iter().sum::<f64>()).sum()
    }

    /// Model log-density `-1/2 ||phi(x)||^2 - (d/2) log 2pi + log|det D phi|`.
    pub fn log_density(&self, x: &[f64]) -> Result<f64> {
        let z = self.forward_point(x)?;
        let nsq: f64 = z.iter().map(|v| v * v).sum();
        Ok(-0.5 * nsq - 0.5 * self.dim as f64 * LN_2PI + self.log_abs_det())
    }

    /// Draw `count` samples `phi^{-1}(z)`, `z ~ N(0, I)`; deterministic per seed.
    pub fn sample(&self, count: usize, seed: u64) -> Result<Tensor> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f64> = (0..count * self.dim)
            .map(|_| <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng))
            .collect();
        let z = Tensor::from_shape(count, self.dim, data)?;
        self.inverse_batch(&z)
    }

    /// `D_x phi` assembled column-by-column from `d` forward-mode passes.
    pub fn jacobian_at(&self, x: &[f64]) -> Result<Tensor> {
        self.check_dim("flow::jacobian_at", x.len())?;
        let mut tape = Tape::new();
        let vars = self.register_inputs(&mut tape);
        let xid = tape.input(Tensor::from_shape(1, self.dim, x.to_vec())?);
        let out = self.forward_on_tape(&mut tape, &vars, xid)?;
        let d = self.dim;
        let mut jac = vec![0.0; d * d];
        for j in 0..d {
            let mut e = Tensor::zeros(&[1, d]);
            e.data_mut()[j] = 1.0;
            let col = tape.jvp(&[(xid, e)], out)?;
            for i in 0..d {
                jac[i * d + j] = col.data()[i];
            }
        }
        Tensor::from_shape(d, d, jac)
    }

    // ── Tape construction ────────────────────────────────────────────

    /// Register all parameters as trainable leaves and assemble the per-layer
    /// `L`, `U`, `V` matrices on the tape.
    pub fn register_params(&self, tape: &mut Tape) -> Result<FlowVars> {
        self.register(tape, true)
    }

    /// Register parameters as plain (non-trainable) inputs.
    pub fn register_inputs(&self, tape: &mut Tape) -> FlowVars {
        self.register(tape, false).expect("input registration cannot fail")
    }

    fn register(&self, tape: &mut Tape, trainable: bool) -> Result<FlowVars> {
        let d = self.dim;
        let mut strict_lower = Tensor::zeros(&[d, d]);
        let mut strict_upper = Tensor::zeros(&[d, d]);
        for i in 0..d {
            for j in 0..i {
                strict_lower.data_mut()[i * d + j] = 1.0;
                strict_upper.data_mut()[j * d + i] = 1.0;
            }
        }
        let mask_lo = tape.input(strict_lower);
        let mask_up = tape.input(strict_upper);
        let eye = tape.input(Tensor::eye(d));

        let mut layers = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let leaf = |tape: &mut Tape, t: Tensor| {
                if trainable {
                    tape.param(t)
                } else {
                    tape.input(t)
                }
            };
            let lower_raw = leaf(tape, layer.linear.lower.clone());
            let upper_raw = leaf(tape, layer.linear.upper.clone());
            let logmag = leaf(tape, layer.linear.diag_logmag.clone());
            let alpha = leaf(tape, layer.coupling.alpha.clone());

            let sign = tape.input(Tensor::from_vec(layer.linear.diag_sign.clone()));
            let lo_masked = tape.mul(lower_raw, mask_lo)?;
            let l_mat = tape.add(lo_masked, eye)?;
            let mag = tape.exp(logmag);
            let diag = tape.mul(sign, mag)?;
            let diag_mat = tape.embed_diag(diag, d, d, 0, 0)?;
            let up_masked = tape.mul(upper_raw, mask_up)?;
            let u_mat = tape.add(up_masked, diag_mat)?;
            let v_mat = tape.matmul(l_mat, u_mat)?;

            layers.push(FlowLayerVars { lower_raw, upper_raw, logmag, alpha, l_mat, u_mat, v_mat });
        }
        Ok(FlowVars { dim: d, degree: self.degree, layers })
    }

    /// `phi` over a `[N, d]` tape variable.
    pub fn forward_on_tape(&self, tape: &mut Tape, vars: &FlowVars, x: VarId) -> Result<VarId> {
        let (d1, d2) = coupling_split(self.dim);
        let mut z = x;
        for layer in &vars.layers {
            z = tape.matmul_tb(z, layer.v_mat)?;
            if d2 > 0 {
                let z1 = tape.slice_cols(z, 0, d1)?;
                let z2 = tape.slice_cols(z, d1, d2)?;
                let g = coupling_g_on_tape(tape, layer.alpha, z, d2, self.degree)?;
                let y2 = tape.add(z2, g)?;
                z = tape.concat_cols(z1, y2)?;
            }
        }
        Ok(z)
    }

    /// `phi^{-1}` over a `[N, d]` tape variable (differentiable inverse pass).
    pub fn inverse_on_tape(&self, tape: &mut Tape, vars: &FlowVars, y: VarId) -> Result<VarId> {
        let (d1, d2) = coupling_split(self.dim);
        let mut z = y;
        for layer in vars.layers.iter().rev() {
            if d2 > 0 {
                let y1 = tape.slice_cols(z, 0, d1)?;
                let y2 = tape.slice_cols(z, d1, d2)?;
                let g = coupling_g_on_tape(tape, layer.alpha, z, d2, self.degree)?;
                let z2 = tape.sub(y2, g)?;
                z = tape.concat_cols(y1, z2)?;
            }
            let w = tape.solve_tri(layer.l_mat, z, true, true)?;
            z = tape.solve_tri(layer.u_mat, w, false, false)?;
        }
        Ok(z)
    }

    /// `log|det D phi|` as a differentiable scalar.
    pub fn log_abs_det_on_tape(&self, tape: &mut Tape, vars: &FlowVars) -> Result<VarId> {
        let mut acc: Option<VarId> = None;
        for layer in &vars.layers {
            let s = tape.sum(layer.logmag);
            acc = Some(match acc {
                Some(a) => tape.add(a, s)?,
                None => s,
            });
        }
        Ok(acc.unwrap_or_else(|| tape.scalar_input(0.0)))
    }

    /// Per-row model log-density of a `[N, d]` variable, as `[N]`.
    pub fn log_density_on_tape(&self, tape: &mut Tape, vars: &FlowVars, x: VarId) -> Result<VarId> {
        let z = self.forward_on_tape(tape, vars, x)?;
        let nsq = tape.norm_sq_rows(z)?;
        let half = tape.scale(nsq, -0.5);
        let shifted = tape.add_scalar(half, -0.5 * self.dim as f64 * LN_2PI);
        let ld = self.log_abs_det_on_tape(tape, vars)?;
        let n = tape.value(shifted).numel();
        let as_mat = tape.reshape(shifted, vec![n, 1])?;
        let with_ld = tape.add_row(as_mat, ld)?;
        tape.reshape(with_ld, vec![n])
    }

    /// `D_0 phi^{-1}` as a differentiable `[d, d]` variable: the inverse pass
    /// is run from the origin and per-layer inverse Jacobians are chained,
    /// exploiting the triangular structure of each linear factor.
    pub fn d0_inverse_jacobian_on_tape(&self, tape: &mut Tape, vars: &FlowVars) -> Result<VarId> {
        let d = self.dim;
        let (d1, d2) = coupling_split(d);
        let eye = tape.input(Tensor::eye(d));
        let mut point = tape.input(Tensor::zeros(&[1, d]));
        let mut acc: Option<VarId> = None;
        for layer in vars.layers.iter().rev() {
            // Jacobian of the coupling inverse at the current point.
            let k_f = if d2 > 0 {
                let gp = coupling_gprime_on_tape(tape, layer.alpha, point, d2, self.degree)?;
                let gp_vec = tape.reshape(gp, vec![d2])?;
                let neg = tape.neg(gp_vec);
                let block = tape.embed_diag(neg, d, d, d1, 0)?;
                Some(tape.add(eye, block)?)
            } else {
                None
            };
            let l_inv = tape.tri_inverse(layer.l_mat, true, true)?;
            let u_inv = tape.tri_inverse(layer.u_mat, false, false)?;
            let v_inv = tape.matmul(u_inv, l_inv)?;
            let k = match k_f {
                Some(jf) => tape.matmul(v_inv, jf)?,
                None => v_inv,
            };
            acc = Some(match acc {
                Some(a) => tape.matmul(k, a)?,
                None => k,
            });

            // Advance the point through this inverse layer.
            if d2 > 0 {
                let y1 = tape.slice_cols(point, 0, d1)?;
                let y2 = tape.slice_cols(point, d1, d2)?;
                let g = coupling_g_on_tape(tape, layer.alpha, point, d2, self.degree)?;
                let z2 = tape.sub(y2, g)?;
                point = tape.concat_cols(y1, z2)?;
            }
            let w = tape.solve_tri(layer.l_mat, point, true, true)?;
            point = tape.solve_tri(layer.u_mat, w, false, false)?;
        }
        Ok(acc.unwrap_or(eye))
    }

    // ── Checkpointing ────────────────────────────────────────────────

    pub fn to_checkpoint(&self) -> FlowCheckpoint {
        let d = self.dim;
        let layers = self
            .layers
            .iter()
            .map(|layer| {
                let mut lower = vec![vec![0.0; d]; d];
                let mut upper = vec![vec![0.0; d]; d];
                for i in 0..d {
                    lower[i][i] = 1.0;
                    for j in 0..i {
                        lower[i][j] = layer.linear.lower.get2(i, j);
                        upper[j][i] = layer.linear.upper.get2(j, i);
                    }
                }
                let (n, d2) = (layer.coupling.alpha.rows(), layer.coupling.alpha.cols());
                let alpha =
                    (0..n).map(|r| layer.coupling.alpha.row(r).to_vec()).collect::<Vec<_>>();
                let _ = d2;
                FlowLayerCheckpoint {
                    lower,
                    upper_offdiag: upper,
                    upper_diag_sign: layer.linear.diag_sign.clone(),
                    upper_diag_logmag: layer.linear.diag_logmag.data().to_vec(),
                    alpha,
                }
            })
            .collect();
        FlowCheckpoint {
            version: CHECKPOINT_VERSION.to_string(),
            dim: self.dim,
            num_layers: self.layers.len(),
            degree: self.degree,
            layers,
        }
    }

    pub fn from_checkpoint(ckpt: &FlowCheckpoint) -> Result<Self> {
        if ckpt.version != CHECKPOINT_VERSION {
            return Err(Error::Schema {
                expected: CHECKPOINT_VERSION.to_string(),
                found: ckpt.version.clone(),
                msg: "flow checkpoint version".to_string(),
            });
        }
        let d = ckpt.dim;
        let (_d1, d2) = coupling_split(d);
        if ckpt.layers.len() != ckpt.num_layers {
            return Err(Error::Schema {
                expected: format!("{} layers", ckpt.num_layers),
                found: format!("{}", ckpt.layers.len()),
                msg: "layer count".to_string(),
            });
        }
        let mut layers = Vec::with_capacity(ckpt.layers.len());
        for lc in &ckpt.layers {
            let mut lower = Tensor::zeros(&[d, d]);
            let mut upper = Tensor::zeros(&[d, d]);
            if lc.lower.len() != d || lc.upper_offdiag.len() != d {
                return Err(Error::Schema {
                    expected: format!("{d}x{d} matrices"),
                    found: format!("{}x? / {}x?", lc.lower.len(), lc.upper_offdiag.len()),
                    msg: "linear layer shape".to_string(),
                });
            }
            for i in 0..d {
                for j in 0..i {
                    lower.data_mut()[i * d + j] = lc.lower[i][j];
                    upper.data_mut()[j * d + i] = lc.upper_offdiag[j][i];
                }
            }
            if lc.upper_diag_sign.len() != d || lc.upper_diag_logmag.len() != d {
                return Err(Error::Schema {
                    expected: format!("diagonal length {d}"),
                    found: format!("{}/{}", lc.upper_diag_sign.len(), lc.upper_diag_logmag.len()),
                    msg: "diagonal storage".to_string(),
                });
            }
            let mut alpha = Tensor::zeros(&[ckpt.degree, d2]);
            if lc.alpha.len() != ckpt.degree {
                return Err(Error::Schema {
                    expected: format!("degree {}", ckpt.degree),
                    found: format!("{}", lc.alpha.len()),
                    msg: "alpha rows".to_string(),
                });
            }
            for (r, row) in lc.alpha.iter().enumerate() {
                if row.len() != d2 {
                    return Err(Error::Schema {
                        expected: format!("alpha row length {d2}"),
                        found: format!("{}", row.len()),
                        msg: "alpha columns".to_string(),
                    });
                }
                for (l, v) in row.iter().enumerate() {
                    alpha.data_mut()[r * d2 + l] = *v;
                }
            }
            layers.push(FlowLayer {
                linear: InvertibleLinearParams {
                    lower,
                    upper,
                    diag_sign: lc.upper_diag_sign.clone(),
                    diag_logmag: Tensor::from_vec(lc.upper_diag_logmag.clone()),
                },
                coupling: CouplingLayerParams { alpha },
            });
        }
        Ok(FlowModel { dim: d, degree: ckpt.degree, layers })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(&self.to_checkpoint())?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let json = std::fs::read_to_string(path)?;
        let ckpt: FlowCheckpoint = serde_json::from_str(&json)?;
        FlowModel::from_checkpoint(&ckpt)
    }
}

/// Tape-side handles for a registered flow.
pub struct FlowVars {
    pub dim: usize,
    pub degree: usize,
    pub layers: Vec<FlowLayerVars>,
}

pub struct FlowLayerVars {
    pub lower_raw: VarId,
    pub upper_raw: VarId,
    pub logmag: VarId,
    pub alpha: VarId,
    pub l_mat: VarId,
    pub u_mat: VarId,
    pub v_mat: VarId,
}

impl FlowVars {
    /// Trainable leaves in a stable order (mirrors [`FlowModel::visit_params`]).
    pub fn param_ids(&self) -> Vec<VarId> {
        let mut ids = Vec::with_capacity(self.layers.len() * 4);
        for l in &self.layers {
            ids.extend([l.lower_raw, l.upper_raw, l.logmag, l.alpha]);
        }
        ids
    }
}

impl FlowModel {
    /// Visit trainable tensors in the same stable order as
    /// [`FlowVars::param_ids`].
    pub fn visit_params_mut(&mut self, mut f: impl FnMut(&mut Tensor)) {
        for layer in &mut self.layers {
            f(&mut layer.linear.lower);
            f(&mut layer.linear.upper);
            f(&mut layer.linear.diag_logmag);
            f(&mut layer.coupling.alpha);
        }
    }

    pub fn visit_params(&self, mut f: impl FnMut(&Tensor)) {
        for layer in &self.layers {
            f(&layer.linear.lower);
            f(&layer.linear.upper);
            f(&layer.linear.diag_logmag);
            f(&layer.coupling.alpha);
        }
    }
}

/// Extract row `r` of a `[n, d2]` parameter as a `[d2]` variable.
fn alpha_row(tape: &mut Tape, alpha: VarId, r: usize, d2: usize) -> Result<VarId> {
    let n = tape.value(alpha).rows();
    let flat = tape.reshape(alpha, vec![1, n * d2])?;
    let sliced = tape.slice_cols(flat, r * d2, d2)?;
    tape.reshape(sliced, vec![d2])
}

/// `g(z_1)` on the tape: `[N, d] -> [N, d2]` using the first d2 columns.
fn coupling_g_on_tape(
    tape: &mut Tape,
    alpha: VarId,
    z: VarId,
    d2: usize,
    degree: usize,
) -> Result<VarId> {
    let zhead = tape.slice_cols(z, 0, d2)?;
    let t = tape.tanh(zhead);
    let mut acc: Option<VarId> = None;
    for r in 1..=degree {
        let tp = tape.powi(t, r as u32);
        let row = alpha_row(tape, alpha, r - 1, d2)?;
        let term = tape.mul_row(tp, row)?;
        acc = Some(match acc {
            Some(a) => tape.add(a, term)?,
            None => term,
        });
    }
    Ok(acc.expect("degree >= 1"))
}

/// `g'(z_1)` on the tape: `sum_r alpha_r r tanh^{r-1} sech^2`, `[N, d2]`.
fn coupling_gprime_on_tape(
    tape: &mut Tape,
    alpha: VarId,
    z: VarId,
    d2: usize,
    degree: usize,
) -> Result<VarId> {
    let zhead = tape.slice_cols(z, 0, d2)?;
    let t = tape.tanh(zhead);
    let t2 = tape.powi(t, 2);
    let nt2 = tape.neg(t2);
    let sech2 = tape.add_scalar(nt2, 1.0);
    let mut acc: Option<VarId> = None;
    for r in 1..=degree {
        let tp = tape.powi(t, (r - 1) as u32);
        let base = tape.mul(tp, sech2)?;
        let scaled = tape.scale(base, r as f64);
        let row = alpha_row(tape, alpha, r - 1, d2)?;
        let term = tape.mul_row(scaled, row)?;
        acc = Some(match acc {
            Some(a) => tape.add(a, term)?,
            None => term,
        });
    }
    Ok(acc.expect("degree >= 1"))
}

// ── Checkpoint schema ────────────────────────────────────────────────

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowCheckpoint {
    pub version: String,
    pub dim: usize,
    #[serde(rename = "L")]
    pub num_layers: usize,
    pub degree: usize,
    pub layers: Vec<FlowLayerCheckpoint>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowLayerCheckpoint {
    pub lower: Vec<Vec<f64>>,
    pub upper_offdiag: Vec<Vec<f64>>,
    pub upper_diag_sign: Vec<f64>,
    pub upper_diag_logmag: Vec<f64>,
    pub alpha: Vec<Vec<f64>>,
}
