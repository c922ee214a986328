//! Closed-form pullback-Riemannian mappings induced by a flow.
//!
//! The flow pulls the Euclidean structure back to the data space, so every
//! mapping reduces to arithmetic in the latent space:
//!
//! - distance: `||phi(x) - phi(y)||`
//! - geodesic: `phi^{-1}((1-t) phi(x) + t phi(y))`
//! - exp map:  `phi^{-1}(phi(x) + D_x phi [v])`
//! - log map:  `D_{phi(x)} phi^{-1} [phi(y) - phi(x)]`
//! - barycenter: `phi^{-1}(mean phi(x_i))`
//!
//! All functions are pure over an immutable geometry and thread-safe.

use crate::error::{Error, Result};
use crate::flow::FlowModel;
use crate::linalg::{self, LuFactors};
use crate::tensor::Tensor;

/// A flow viewed as a metric-inducing map.
#[derive(Debug, Clone)]
pub struct PullbackGeometry {
    flow: FlowModel,
}

impl PullbackGeometry {
    pub fn new(flow: FlowModel) -> Self {
        PullbackGeometry { flow }
    }

    pub fn flow(&self) -> &FlowModel {
        &self.flow
    }

    pub fn dim(&self) -> usize {
        self.flow.dim()
    }

    /// Pullback distance `||phi(x) - phi(y)||_2`.
    pub fn distance(&self, x: &[f64], y: &[f64]) -> Result<f64> {
        let zx = self.flow.forward_point(x)?;
        let zy = self.flow.forward_point(y)?;
        Ok(zx.iter().zip(&zy).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt())
    }

    /// Geodesic point at parameter `t in [0, 1]`.
    pub fn geodesic(&self, x: &[f64], y: &[f64], t: f64) -> Result<Vec<f64>> {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::invalid("geodesic", format!("t = {t} outside [0, 1]")));
        }
        let zx = self.flow.forward_point(x)?;
        let zy = self.flow.forward_point(y)?;
        let z: Vec<f64> = zx.iter().zip(&zy).map(|(a, b)| (1.0 - t) * a + t * b).collect();
        self.flow.inverse_point(&z)
    }

    /// Exponential map `phi^{-1}(phi(x) + D_x phi [v])`.
    pub fn exp_map(&self, x: &[f64], v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.dim() {
            return Err(Error::ShapeMismatch {
                op: "exp_map",
                lhs: vec![self.dim()],
                rhs: vec![v.len()],
            });
        }
        let zx = self.flow.forward_point(x)?;
        let jv = self.differential(x, v)?;
        let z: Vec<f64> = zx.iter().zip(&jv).map(|(a, b)| a + b).collect();
        self.flow.inverse_point(&z)
    }

    /// Logarithmic map, solving `D_x phi [u] = phi(y) - phi(x)` for `u`.
    pub fn log_map(&self, x: &[f64], y: &[f64]) -> Result<Vec<f64>> {
        let at = self.base_at(x)?;
        at.log(y)
    }

    /// `D_x phi [v]` by one forward-mode pass.
    pub fn differential(&self, x: &[f64], v: &[f64]) -> Result<Vec<f64>> {
        let mut tape = crate::tape::Tape::new();
        let vars = self.flow.register_inputs(&mut tape);
        let xid = tape.input(Tensor::from_shape(1, self.dim(), x.to_vec())?);
        let out = self.flow.forward_on_tape(&mut tape, &vars, xid)?;
        let seed = Tensor::from_shape(1, self.dim(), v.to_vec())?;
        let jv = tape.jvp(&[(xid, seed)], out)?;
        Ok(jv.data().to_vec())
    }

    /// Closed-form barycenter `phi^{-1}(mean phi(x_i))`.
    pub fn barycenter(&self, points: &Tensor) -> Result<Vec<f64>> {
        if points.rows() == 0 {
            return Err(Error::invalid("barycenter", "empty batch"));
        }
        let z = self.flow.forward_batch(points)?;
        let (n, d) = (z.rows(), z.cols());
        let mut mean = vec![0.0; d];
        for i in 0..n {
            for j in 0..d {
                mean[j] += z.get2(i, j);
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        self.flow.inverse_point(&mean)
    }

    /// Factorized state for repeated tangent work at a fixed base point:
    /// one Jacobian assembly amortizes across many log/exp calls.
    pub fn base_at(&self, x: &[f64]) -> Result<BasePoint<'_>> {
        let z = self.flow.forward_point(x)?;
        let jac = self.flow.jacobian_at(x)?;
        let lu = linalg::lu_factor(&jac).map_err(|e| match e {
            Error::Singular { pivot, index, .. } => Error::Singular {
                op: "log_map (flow differential)",
                pivot,
                index,
            },
            other => other,
        })?;
        Ok(BasePoint { geometry: self, base: x.to_vec(), z_base: z, jac, lu })
    }
}

/// Cached Jacobian factorization at a base point.
pub struct BasePoint<'a> {
    geometry: &'a PullbackGeometry,
    base: Vec<f64>,
    z_base: Vec<f64>,
    jac: Tensor,
    lu: LuFactors,
}

impl BasePoint<'_> {
    pub fn base(&self) -> &[f64] {
        &self.base
    }

    pub fn z_base(&self) -> &[f64] {
        &self.z_base
    }

    /// `D_x phi` at the base point.
    pub fn jacobian(&self) -> &Tensor {
        &self.jac
    }

    pub fn log(&self, y: &[f64]) -> Result<Vec<f64>> {
        let zy = self.geometry.flow.forward_point(y)?;
        let w: Vec<f64> = zy.iter().zip(&self.z_base).map(|(a, b)| a - b).collect();
        Ok(self.lu.solve(&w))
    }

    pub fn exp(&self, v: &[f64]) -> Result<Vec<f64>> {
        let jv = linalg::matvec(&self.jac, v)?;
        let z: Vec<f64> = self.z_base.iter().zip(&jv).map(|(a, b)| a + b).collect();
        self.geometry.flow.inverse_point(&z)
    }
}
