//! Analytic Jacobian of the power-flow sums and the algebraic elimination of
//! the VSC terminal voltages.

use super::{
    kron_reduce, NetModelError, NetworkDescription, OperatingPoint, ReducedAdmittance,
};
use crate::Real;
use nalgebra::DMatrix;

/// Jacobian of `(Pᵉ, Iᵈ, Pᵛ, Qᵛ)` with respect to `(δ, E, θ, V)`.
///
/// Row blocks: `Pᵉ` (n_sg), `Iᵈ` (n_sg), `Pᵛ` (n_vsc), `Qᵛ` (n_vsc).
/// Column blocks: `δ` (n_sg), `E` (n_sg), `θ` (n_vsc), `V` (n_vsc).
#[derive(Clone, Debug)]
pub struct PfJacobian<T> {
    pub m: DMatrix<T>,
    pub n_sg: usize,
    pub n_vsc: usize,
}

impl<T: Real> PfJacobian<T> {
    fn dim(&self) -> usize {
        2 * (self.n_sg + self.n_vsc)
    }

    /// `∂(Pᵛ,Qᵛ)/∂(θ,V)`: the boundary block solved during elimination.
    pub fn boundary_block(&self) -> DMatrix<T> {
        let (ng, nv) = (self.n_sg, self.n_vsc);
        self.m
            .view((2 * ng, 2 * ng), (2 * nv, 2 * nv))
            .clone_owned()
    }
}

/// Sensitivities of `(ΔPᵉ, ΔIᵈ)` to machine states and VSC injections after
/// the terminal voltages have been solved out:
///
/// ```text
/// ΔPᵉ = Aᴾ_δ Δδ + Aᴾ_E ΔE + Aᴾ_P ΔPᵛ + Aᴾ_Q ΔQᵛ
/// ΔIᵈ = Aᴵ_δ Δδ + Aᴵ_E ΔE + Aᴵ_P ΔPᵛ + Aᴵ_Q ΔQᵛ
/// ```
#[derive(Clone, Debug)]
pub struct AlgebraicCoefficients<T> {
    pub ap_delta: DMatrix<T>,
    pub ap_e: DMatrix<T>,
    pub ap_pv: DMatrix<T>,
    pub ap_qv: DMatrix<T>,
    pub ai_delta: DMatrix<T>,
    pub ai_e: DMatrix<T>,
    pub ai_pv: DMatrix<T>,
    pub ai_qv: DMatrix<T>,
}

/// Analytic Jacobian over a reduced admittance.
///
/// Every output is a sum of terms `m_a m_b (G cos φ_ab + B sin φ_ab)` or the
/// `Q`-type analogue; the derivatives below differentiate each term, with the
/// self term (`b = a`, `φ_aa ≡ 0`) contributing only through the magnitudes.
pub fn jacobian_reduced<T: Real>(
    red: &ReducedAdmittance<T>,
    op: &OperatingPoint<T>,
) -> Result<PfJacobian<T>, NetModelError> {
    op.validate()?;
    let (ng, nv) = (red.n_sg, red.n_vsc);
    if op.sg_e.len() != ng || op.vsc_v.len() != nv {
        return Err(NetModelError::Validation(
            "operating point does not match network dimensions".into(),
        ));
    }
    let n = ng + nv;
    let m = op.magnitudes();
    let phi = op.angles();
    let dim = 2 * n;
    let mut j = DMatrix::<T>::zeros(dim, dim);

    // Output row index for the P-type and Q-type quantity of node `a`.
    // SG nodes expose (Pᵉ, Iᵈ); VSC nodes expose (Pᵛ, Qᵛ).
    let p_row = |a: usize| if a < ng { a } else { ng + a };
    let q_row = |a: usize| if a < ng { ng + a } else { ng + nv + a };
    // Column index of the angle / magnitude variable of node `c`.
    let ang_col = |c: usize| if c < ng { c } else { ng + c };
    let mag_col = |c: usize| if c < ng { ng + c } else { ng + nv + c };

    for a in 0..n {
        // Q-type rows of SG nodes are Iᵈ = Q/m_a rows: drop the m_a factor.
        let q_scale = if a < ng { T::one() } else { m[a] };
        let mut dp_dphi_a = T::zero();
        let mut dp_dm_a = T::zero();
        let mut dq_dphi_a = T::zero();
        let mut dq_dm_a = T::zero();
        for b in 0..n {
            let (g, bb) = (red.g(a, b), red.b(a, b));
            if b == a {
                // Self term: P += m_a² G_aa, Q += −m_a² B_aa.
                dp_dm_a += (T::one() + T::one()) * m[a] * g;
                dq_dm_a += -(T::one() + T::one()) * m[a] * bb;
                continue;
            }
            let ang = phi[a] - phi[b];
            let (s, c) = (ang.sin(), ang.cos());
            let pc = g * c + bb * s; // P-type kernel
            let qc = g * s - bb * c; // Q-type kernel
            let dpc = -g * s + bb * c; // ∂(P-kernel)/∂φ_ab
            let dqc = g * c + bb * s; // ∂(Q-kernel)/∂φ_ab

            dp_dphi_a += m[a] * m[b] * dpc;
            dp_dm_a += m[b] * pc;
            // Accumulated in Iᵈ-row units (no m_a factor); `q_scale` restores
            // the factor for Q-type rows of VSC nodes.
            dq_dphi_a += m[b] * dqc;
            dq_dm_a += m[b] * qc;

            // Cross derivatives toward node b.
            j[(p_row(a), ang_col(b))] = -m[a] * m[b] * dpc;
            j[(p_row(a), mag_col(b))] = m[a] * pc;
            j[(q_row(a), ang_col(b))] = -q_scale * m[b] * dqc;
            j[(q_row(a), mag_col(b))] = q_scale * qc;
        }
        j[(p_row(a), ang_col(a))] = dp_dphi_a;
        j[(p_row(a), mag_col(a))] = dp_dm_a;
        j[(q_row(a), ang_col(a))] = q_scale * dq_dphi_a;
        if a < ng {
            // Iᵈ_a = Σ_b m_b (G sin − B cos): the self term is −m_a B_aa, so
            // ∂Iᵈ_a/∂m_a = −B_aa.
            j[(q_row(a), mag_col(a))] = -red.b(a, a);
        } else {
            j[(q_row(a), mag_col(a))] = dq_dm_a;
        }
    }

    Ok(PfJacobian { m: j, n_sg: ng, n_vsc: nv })
}

/// Analytic Jacobian of a network at an operating point.
pub fn jacobian<T: Real>(
    net: &NetworkDescription<T>,
    op: &OperatingPoint<T>,
) -> Result<PfJacobian<T>, NetModelError> {
    let red = kron_reduce(net)?;
    jacobian_reduced(&red, op)
}

/// Solves `(Δθ, ΔV)` out of the Jacobian in terms of the VSC injection
/// deviations, leaving `(ΔPᵉ, ΔIᵈ)` as functions of `(Δδ, ΔE, ΔPᵛ, ΔQᵛ)`.
pub fn eliminate_algebraic<T: Real>(
    jac: &PfJacobian<T>,
) -> Result<AlgebraicCoefficients<T>, NetModelError> {
    let (ng, nv) = (jac.n_sg, jac.n_vsc);
    debug_assert_eq!(jac.dim(), jac.m.nrows());

    let j1 = jac.m.view((0, 0), (2 * ng, 2 * ng));
    if nv == 0 {
        return Ok(AlgebraicCoefficients {
            ap_delta: j1.view((0, 0), (ng, ng)).clone_owned(),
            ap_e: j1.view((0, ng), (ng, ng)).clone_owned(),
            ap_pv: DMatrix::zeros(ng, 0),
            ap_qv: DMatrix::zeros(ng, 0),
            ai_delta: j1.view((ng, 0), (ng, ng)).clone_owned(),
            ai_e: j1.view((ng, ng), (ng, ng)).clone_owned(),
            ai_pv: DMatrix::zeros(ng, 0),
            ai_qv: DMatrix::zeros(ng, 0),
        });
    }

    let j2 = jac.m.view((0, 2 * ng), (2 * ng, 2 * nv)).clone_owned();
    let j3 = jac.m.view((2 * ng, 0), (2 * nv, 2 * ng)).clone_owned();
    let j4 = jac.m.view((2 * ng, 2 * ng), (2 * nv, 2 * nv)).clone_owned();

    let lu = j4.lu();
    let j4_inv_j3 = lu
        .solve(&j3)
        .ok_or(NetModelError::AlgebraicallyDegenerate)?;
    let j4_inv = lu
        .try_inverse()
        .ok_or(NetModelError::AlgebraicallyDegenerate)?;

    let s = &j1.clone_owned() - &j2 * &j4_inv_j3;
    let ct = &j2 * &j4_inv;

    Ok(AlgebraicCoefficients {
        ap_delta: s.view((0, 0), (ng, ng)).clone_owned(),
        ap_e: s.view((0, ng), (ng, ng)).clone_owned(),
        ap_pv: ct.view((0, 0), (ng, nv)).clone_owned(),
        ap_qv: ct.view((0, nv), (ng, nv)).clone_owned(),
        ai_delta: s.view((ng, 0), (ng, ng)).clone_owned(),
        ai_e: s.view((ng, ng), (ng, ng)).clone_owned(),
        ai_pv: ct.view((ng, 0), (ng, nv)).clone_owned(),
        ai_qv: ct.view((ng, nv), (ng, nv)).clone_owned(),
    })
}
