//! Model bundle: the discretized system plus enough provenance to rebuild it
//! at a perturbed operating point.

use anyhow::{bail, Context, Result};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use std::path::Path;
use wadc_core::netmodel::{
    self, build_continuous, discretize, input_labels, state_labels, DiscreteSystem,
    NetworkDescription, OperatingPoint,
};

#[derive(Serialize, Deserialize)]
pub struct ModelBundle {
    pub dt: f64,
    pub n_sg: usize,
    pub n_vsc: usize,
    pub state_labels: Vec<String>,
    pub input_labels: Vec<String>,
    /// Row-major dense matrices.
    pub a: Vec<Vec<f64>>,
    pub b: Vec<Vec<f64>>,
    /// The network document the model was built from (absent for bundles
    /// assembled from raw matrices).
    pub source: Option<serde_json::Value>,
    /// Area assignment carried over from a builtin fixture.
    pub sg_areas: Option<Vec<usize>>,
    pub vsc_areas: Option<Vec<usize>>,
}

fn matrix_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|r| m.row(r).iter().copied().collect()).collect()
}

fn rows_matrix(rows: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let nr = rows.len();
    let nc = rows.first().map_or(0, |r| r.len());
    if nr == 0 || nc == 0 || rows.iter().any(|r| r.len() != nc) {
        bail!("bundle matrix is empty or ragged");
    }
    Ok(DMatrix::from_fn(nr, nc, |r, c| rows[r][c]))
}

impl ModelBundle {
    pub fn from_network(
        net: &NetworkDescription<f64>,
        op: &OperatingPoint<f64>,
        dt: f64,
        sg_areas: Option<Vec<usize>>,
        vsc_areas: Option<Vec<usize>>,
    ) -> Result<Self> {
        let lin = build_continuous(net, op)?;
        let disc = discretize(&lin, dt)?;
        let source: serde_json::Value =
            serde_json::from_str(&netmodel::json::network_to_json(net, op)?)?;
        Ok(ModelBundle {
            dt,
            n_sg: disc.n_sg,
            n_vsc: disc.n_vsc,
            state_labels: state_labels(disc.n_sg),
            input_labels: input_labels(disc.n_sg, disc.n_vsc),
            a: matrix_rows(&disc.a),
            b: matrix_rows(&disc.b),
            source: Some(source),
            sg_areas,
            vsc_areas,
        })
    }

    pub fn system(&self) -> Result<DiscreteSystem<f64>> {
        let a = rows_matrix(&self.a)?;
        let b = rows_matrix(&self.b)?;
        if a.nrows() != 4 * self.n_sg || b.ncols() != self.n_sg + self.n_vsc {
            bail!(
                "bundle dimensions are inconsistent: A is {}x{}, B is {}x{}, but n_sg={} n_vsc={}",
                a.nrows(),
                a.ncols(),
                b.nrows(),
                b.ncols(),
                self.n_sg,
                self.n_vsc
            );
        }
        Ok(DiscreteSystem {
            a,
            b,
            dt: self.dt,
            n_sg: self.n_sg,
            n_vsc: self.n_vsc,
        })
    }

    /// Network and operating point, when the bundle carries them.
    pub fn model_source(&self) -> Result<Option<(NetworkDescription<f64>, OperatingPoint<f64>)>> {
        match &self.source {
            None => Ok(None),
            Some(value) => {
                let text = serde_json::to_string(value)?;
                Ok(Some(netmodel::json::network_from_json(&text)?))
            }
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("cannot read model bundle {}", path.display()))?;
        serde_json::from_str(&text)
            .with_context(|| format!("model bundle {} is not valid", path.display()))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}
