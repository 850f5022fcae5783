//! Perturbation moments powering the quadratic risk form.
//!
//! For a perturbation `ξ` with mean `ξ̄` and centered samples `e = ξ − ξ̄`:
//!
//! * `W  = E[e e']`
//! * `M₃ = E[e (e' Q e)]`
//! * `m₄ = E[(e' Q e − tr(WQ))²]`
//! * `c̄  = c − m₄ + 4 tr((WQ)²)`
//!
//! Gaussian perturbations admit closed forms (`M₃ = 0`,
//! `m₄ = 2 tr((WQ)²)`); anything else is estimated from samples with a
//! reported standard error.

use super::RiskLqrError;
use crate::sim::{NoiseModel, NoiseSampler};
use crate::util::compensated_mean;
use crate::{real, Real};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

/// Moment set of the effective perturbation, with the adjusted tolerance.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseMoments<T> {
    /// Mean `ξ̄`.
    pub mean: DVector<T>,
    /// Second central moment `W`.
    pub w: DMatrix<T>,
    /// Third-moment vector `M₃`.
    pub m3: DVector<T>,
    /// Fourth-moment scalar `m₄`.
    pub m4: T,
    /// Adjusted tolerance `c̄`.
    pub c_bar: T,
    pub provenance: MomentProvenance,
}

/// Where a moment set came from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MomentProvenance {
    /// `"gaussian-closed-form"` or `"empirical"`.
    pub kind: String,
    pub sample_count: Option<usize>,
    /// Policy checkpoint the samples were recorded under, if any.
    pub policy: Option<String>,
    /// Standard error of the `m₄` estimate, empirical path only.
    pub m4_standard_error: Option<f64>,
}

impl MomentProvenance {
    fn gaussian() -> Self {
        MomentProvenance {
            kind: "gaussian-closed-form".into(),
            sample_count: None,
            policy: None,
            m4_standard_error: None,
        }
    }
}

fn adjusted_tolerance<T: Real>(c: T, m4: T, w: &DMatrix<T>, q: &DMatrix<T>) -> T {
    let wq = w * q;
    let four = real::<T>(4.0);
    c - m4 + four * (&wq * &wq).trace()
}

/// Moments of a noise model under the weight `Q`, with tolerance `c`.
///
/// Gaussian models take the closed-form path; empirical banks are reduced to
/// their sample moments.
pub fn compute_moments<T: Real>(
    noise: &NoiseModel<T>,
    q: &DMatrix<T>,
    c: T,
) -> Result<NoiseMoments<T>, RiskLqrError> {
    match noise {
        NoiseModel::Gaussian { mean, cov } => {
            let dim = mean.len();
            if q.nrows() != dim || q.ncols() != dim {
                return Err(RiskLqrError::DimensionMismatch(format!(
                    "Q is {}×{}, noise dimension is {dim}",
                    q.nrows(),
                    q.ncols()
                )));
            }
            let w = cov.clone();
            let wq = &w * q;
            let two = real::<T>(2.0);
            let m4 = two * (&wq * &wq).trace();
            let c_bar = adjusted_tolerance(c, m4, &w, q);
            Ok(NoiseMoments {
                mean: mean.clone(),
                w,
                m3: DVector::zeros(dim),
                m4,
                c_bar,
                provenance: MomentProvenance::gaussian(),
            })
        }
        NoiseModel::CustomEmpirical { samples } => {
            moments_from_samples(samples, q, c, None)
        }
    }
}

/// Sample moments of any noise model from `n` fresh draws.
pub fn compute_moments_sampled<T: Real>(
    noise: &NoiseModel<T>,
    q: &DMatrix<T>,
    c: T,
    n: usize,
    seed: u64,
) -> Result<NoiseMoments<T>, RiskLqrError> {
    let mut sampler = NoiseSampler::new(noise, seed)?;
    let samples: Vec<DVector<T>> = (0..n).map(|_| sampler.draw()).collect();
    moments_from_samples(&samples, q, c, None)
}

/// Sample moments of a recorded perturbation bank.
pub fn moments_from_samples<T: Real>(
    samples: &[DVector<T>],
    q: &DMatrix<T>,
    c: T,
    policy: Option<String>,
) -> Result<NoiseMoments<T>, RiskLqrError> {
    if samples.is_empty() {
        return Err(RiskLqrError::DimensionMismatch(
            "moment estimation needs at least one sample".into(),
        ));
    }
    let dim = samples[0].len();
    if q.nrows() != dim {
        return Err(RiskLqrError::DimensionMismatch(format!(
            "Q is {}×{}, samples have dimension {dim}",
            q.nrows(),
            q.ncols()
        )));
    }
    let n = samples.len();
    let n_t = real::<T>(n as f64);

    let mut mean = DVector::<T>::zeros(dim);
    for s in samples {
        mean += s;
    }
    mean /= n_t;

    let mut w = DMatrix::<T>::zeros(dim, dim);
    let mut m3 = DVector::<T>::zeros(dim);
    let centered: Vec<DVector<T>> = samples.iter().map(|s| s - &mean).collect();
    for e in &centered {
        w.syger(T::one(), e, e, T::one());
    }
    w.fill_upper_triangle_with_lower_triangle();
    w /= n_t;

    let quads: Vec<T> = centered.iter().map(|e| crate::sim::quad_form(q, e)).collect();
    for (e, &quad) in centered.iter().zip(&quads) {
        m3.axpy(quad, e, T::one());
    }
    m3 /= n_t;

    let tr_wq = (&w * q).trace();
    let m4_samples: Vec<T> = quads
        .iter()
        .map(|&quad| {
            let d = quad - tr_wq;
            d * d
        })
        .collect();
    let m4 = compensated_mean(&m4_samples);
    let m4_var = compensated_mean(
        &m4_samples
            .iter()
            .map(|&x| (x - m4) * (x - m4))
            .collect::<Vec<_>>(),
    );
    let se = (m4_var / n_t).sqrt().to_f64().unwrap_or(f64::NAN);

    let c_bar = adjusted_tolerance(c, m4, &w, q);
    Ok(NoiseMoments {
        mean,
        w,
        m3,
        m4,
        c_bar,
        provenance: MomentProvenance {
            kind: "empirical".into(),
            sample_count: Some(n),
            policy,
            m4_standard_error: Some(se),
        },
    })
}

#[derive(Serialize, Deserialize)]
struct MomentsFile {
    mean: Vec<f64>,
    w: Vec<Vec<f64>>,
    m3: Vec<f64>,
    m4: f64,
    c_bar: f64,
    provenance: MomentProvenance,
}

/// Serializes a moments cache.
pub fn moments_to_json(m: &NoiseMoments<f64>) -> Result<String, RiskLqrError> {
    let file = MomentsFile {
        mean: m.mean.iter().copied().collect(),
        w: (0..m.w.nrows())
            .map(|r| m.w.row(r).iter().copied().collect())
            .collect(),
        m3: m.m3.iter().copied().collect(),
        m4: m.m4,
        c_bar: m.c_bar,
        provenance: m.provenance.clone(),
    };
    Ok(serde_json::to_string_pretty(&file)?)
}

/// Reads a moments cache.
pub fn moments_from_json(text: &str) -> Result<NoiseMoments<f64>, RiskLqrError> {
    let file: MomentsFile = serde_json::from_str(text)?;
    let dim = file.mean.len();
    if file.w.len() != dim || file.w.iter().any(|r| r.len() != dim) || file.m3.len() != dim {
        return Err(RiskLqrError::DimensionMismatch(
            "moments cache has inconsistent dimensions".into(),
        ));
    }
    Ok(NoiseMoments {
        mean: DVector::from_vec(file.mean),
        w: DMatrix::from_fn(dim, dim, |r, c| file.w[r][c]),
        m3: DVector::from_vec(file.m3),
        m4: file.m4,
        c_bar: file.c_bar,
        provenance: file.provenance,
    })
}
