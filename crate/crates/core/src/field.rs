//! Scalar fields sampled at mesh nodes.
//!
//! A field stores one value per cell (interior then exterior) plus a
//! constant `far` value modelling the field beyond the truncation ball.
//! Linear operations combine `far` linearly; `abs` maps it through `abs`,
//! which keeps the pointwise comparison arguments valid for the tail terms.

use crate::error::{Error, Result};
use crate::geometry::{Mesh, Point};
use std::sync::Arc;

#[derive(Debug, Clone)]
pub struct Field {
    mesh: Arc<Mesh>,
    values: Vec<f64>,
    far: f64,
}

impl Field {
    pub fn constant(mesh: &Arc<Mesh>, c: f64) -> Result<Self> {
        if !c.is_finite() {
            return Err(Error::field("constant value must be finite"));
        }
        Ok(Self { mesh: mesh.clone(), values: vec![c; mesh.n_total()], far: c })
    }

    /// Build from explicit nodal values; the far value defaults to the
    /// weighted interior mean.
    pub fn from_values(mesh: &Arc<Mesh>, values: Vec<f64>) -> Result<Self> {
        if values.len() != mesh.n_total() {
            return Err(Error::field(format!(
                "expected {} nodal values, got {}",
                mesh.n_total(),
                values.len()
            )));
        }
        if !values.iter().all(|v| v.is_finite()) {
            return Err(Error::field("nodal values must be finite"));
        }
        let mut f = Self { mesh: mesh.clone(), values, far: 0.0 };
        f.far = f.interior_mean();
        Ok(f)
    }

    pub fn from_fn(mesh: &Arc<Mesh>, g: impl Fn(Point) -> f64) -> Result<Self> {
        let values = (0..mesh.n_total()).map(|i| g(mesh.node(i))).collect();
        Self::from_values(mesh, values)
    }

    /// Interior nodal values from the caller, exterior filled with the
    /// interior mean (callers normally apply a closure afterwards).
    pub fn from_interior_values(mesh: &Arc<Mesh>, interior: &[f64]) -> Result<Self> {
        if interior.len() != mesh.n_interior() {
            return Err(Error::field(format!(
                "expected {} interior values, got {}",
                mesh.n_interior(),
                interior.len()
            )));
        }
        let mut values = interior.to_vec();
        values.resize(mesh.n_total(), 0.0);
        let mut f = Self { mesh: mesh.clone(), values, far: 0.0 };
        let mean = f.interior_mean();
        f.values[mesh.n_interior()..].fill(mean);
        f.far = mean;
        Ok(f)
    }

    pub fn with_far(mut self, far: f64) -> Self {
        self.far = far;
        self
    }

    pub fn mesh(&self) -> &Arc<Mesh> {
        &self.mesh
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn interior(&self) -> &[f64] {
        &self.values[..self.mesh.n_interior()]
    }

    pub fn exterior(&self) -> &[f64] {
        &self.values[self.mesh.n_interior()..]
    }

    pub fn far(&self) -> f64 {
        self.far
    }

    pub fn set_far(&mut self, far: f64) {
        self.far = far;
    }

    /// Weighted mean over the interior, normalized by the mesh measure.
    pub fn interior_mean(&self) -> f64 {
        let ws = self.mesh.weights();
        let mut num = 0.0;
        let mut den = 0.0;
        for i in 0..self.mesh.n_interior() {
            num += ws[i] * self.values[i];
            den += ws[i];
        }
        num / den
    }

    pub fn same_mesh(&self, other: &Field) -> bool {
        Arc::ptr_eq(&self.mesh, &other.mesh)
    }

    pub fn abs(&self) -> Field {
        Field {
            mesh: self.mesh.clone(),
            values: self.values.iter().map(|v| v.abs()).collect(),
            far: self.far.abs(),
        }
    }

    pub fn scale(&self, t: f64) -> Field {
        Field {
            mesh: self.mesh.clone(),
            values: self.values.iter().map(|v| t * v).collect(),
            far: t * self.far,
        }
    }

    /// self + t * other
    pub fn axpy(&self, t: f64, other: &Field) -> Result<Field> {
        if !self.same_mesh(other) {
            return Err(Error::MeshMismatch);
        }
        Ok(Field {
            mesh: self.mesh.clone(),
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(a, b)| a + t * b)
                .collect(),
            far: self.far + t * other.far,
        })
    }

    pub fn min_value(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max_value(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Max |u| over all nodes, as a scale for tolerances.
    pub fn amplitude(&self) -> f64 {
        self.values.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    /// Nearest-node resampling onto another mesh of the same dimension.
    /// Nodes with no source cell nearby (outside the old truncation, say)
    /// take the far value.
    pub fn interpolate_to(&self, mesh: &Arc<Mesh>) -> Result<Field> {
        if Arc::ptr_eq(&self.mesh, mesh) {
            return Ok(self.clone());
        }
        if self.mesh.domain.dim != mesh.domain.dim {
            return Err(Error::MeshMismatch);
        }
        let base = 2.0
            * self
                .mesh
                .cells()
                .iter()
                .map(|c| c.extent(self.mesh.domain.dim))
                .fold(0.0f64, f64::max);
        let mut values = Vec::with_capacity(mesh.n_total());
        for i in 0..mesh.n_total() {
            let p = mesh.node(i);
            let mut radius = base;
            let mut best: Option<(f64, usize)> = None;
            for _ in 0..6 {
                for j in self.mesh.neighbor_candidates(p, radius) {
                    let q = self.mesh.node(j);
                    let d2 = (p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2);
                    if best.map_or(true, |(b, _)| d2 < b) {
                        best = Some((d2, j));
                    }
                }
                if best.is_some() {
                    break;
                }
                radius *= 2.0;
            }
            values.push(best.map_or(self.far, |(_, j)| self.values[j]));
        }
        Ok(Field { mesh: mesh.clone(), values, far: self.far })
    }
}
