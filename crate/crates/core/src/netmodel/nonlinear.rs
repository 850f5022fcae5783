//! Nonlinear algebraic boundary: solving VSC terminal voltages for given
//! injections, equilibrium residuals, and operating-point rebuilds.

use super::{
    algebraic_outputs_reduced, equilibrium_field_voltage, equilibrium_vbar, jacobian_reduced,
    kron_reduce, NetModelError, NetworkDescription, OperatingPoint, ReducedAdmittance,
};
use crate::{real, Real};
use nalgebra::DVector;

/// Newton solve of the VSC terminal voltages `(θ, V)` such that the power
/// flowing out of each VSC bus equals the requested injections, holding the
/// generator internal voltages fixed.
///
/// Returns the updated operating point. The iteration matrix is the
/// `∂(Pᵛ,Qᵛ)/∂(θ,V)` block of the power-flow Jacobian.
pub fn solve_vsc_boundary<T: Real>(
    red: &ReducedAdmittance<T>,
    op: &OperatingPoint<T>,
    pv_target: &[T],
    qv_target: &[T],
) -> Result<OperatingPoint<T>, NetModelError> {
    let nv = red.n_vsc;
    if pv_target.len() != nv || qv_target.len() != nv {
        return Err(NetModelError::Validation(
            "injection targets do not match the VSC count".into(),
        ));
    }
    if nv == 0 {
        return Ok(op.clone());
    }

    let tol = real::<T>(1e-12);
    let max_iter = 50;
    let mut current = op.clone();
    let mut residual = T::zero();
    for _ in 0..max_iter {
        let out = algebraic_outputs_reduced(red, &current)?;
        let mut f = DVector::<T>::zeros(2 * nv);
        for j in 0..nv {
            f[j] = out.pv[j] - pv_target[j];
            f[nv + j] = out.qv[j] - qv_target[j];
        }
        residual = f.amax();
        if residual < tol {
            return Ok(current);
        }
        let jac = jacobian_reduced(red, &current)?;
        let j4 = jac.boundary_block();
        let step = j4
            .lu()
            .solve(&f)
            .ok_or(NetModelError::AlgebraicallyDegenerate)?;
        for j in 0..nv {
            current.vsc_theta[j] -= step[j];
            current.vsc_v[j] -= step[nv + j];
        }
    }
    Err(NetModelError::BoundaryNotConverged {
        iterations: max_iter,
        residual: residual.to_f64().unwrap_or(f64::NAN),
    })
}

/// Maximum equilibrium residual of a network at an operating point.
///
/// Checks, per generator, that the mechanical power balances the electric
/// output and that the declared exciter reference is consistent with the
/// equilibrium field voltage, and per VSC that the declared injections match
/// the power flow.
pub fn operating_residual<T: Real>(
    net: &NetworkDescription<T>,
    op: &OperatingPoint<T>,
) -> Result<T, NetModelError> {
    let red = kron_reduce(net)?;
    let out = algebraic_outputs_reduced(&red, op)?;
    let mut worst = T::zero();
    for (i, sg) in net.sgs.iter().enumerate() {
        let p = &sg.params;
        let r_swing = p.pm - out.pe[i];
        let efd = equilibrium_field_voltage(p, op.sg_e[i], out.id[i]);
        let r_field = -efd - p.ka * (op.sg_e[i] - p.xdp * out.id[i] - p.vbar);
        worst = worst.max(r_swing.abs()).max(r_field.abs());
    }
    for (j, vsc) in net.vscs.iter().enumerate() {
        worst = worst
            .max((vsc.pv - out.pv[j]).abs())
            .max((vsc.qv - out.qv[j]).abs());
    }
    Ok(worst)
}

/// Rebuilds a network and operating point at retargeted VSC injections.
///
/// The VSC terminal voltages are re-solved for the new injections while the
/// generator internal voltages stay put; mechanical powers and exciter
/// references are then re-derived so the new point is again an equilibrium.
/// This models a re-dispatch at a perturbed renewable output without a full
/// AC power-flow solve.
pub fn rebuild_with_injections<T: Real>(
    net: &NetworkDescription<T>,
    op: &OperatingPoint<T>,
    pv_target: &[T],
    qv_target: &[T],
) -> Result<(NetworkDescription<T>, OperatingPoint<T>), NetModelError> {
    let red = kron_reduce(net)?;
    let new_op = solve_vsc_boundary(&red, op, pv_target, qv_target)?;
    let out = algebraic_outputs_reduced(&red, &new_op)?;

    let mut new_net = net.clone();
    for (i, sg) in new_net.sgs.iter_mut().enumerate() {
        sg.params.pm = out.pe[i];
        let efd = equilibrium_field_voltage(&sg.params, new_op.sg_e[i], out.id[i]);
        sg.params.vbar = equilibrium_vbar(&sg.params, new_op.sg_e[i], out.id[i], efd);
    }
    for (j, vsc) in new_net.vscs.iter_mut().enumerate() {
        vsc.pv = pv_target[j];
        vsc.qv = qv_target[j];
    }

    let residual = operating_residual(&new_net, &new_op)?;
    let tolerance = real::<T>(1e-8);
    if residual > tolerance {
        return Err(NetModelError::InconsistentOperatingPoint {
            residual: residual.to_f64().unwrap_or(f64::NAN),
            tolerance: 1e-8,
        });
    }
    Ok((new_net, new_op))
}

/// Right-hand side of the nonlinear machine dynamics at a state deviation,
/// with the algebraic boundary re-solved at the deviated voltages.
///
/// `x` stacks `[δ, ω, E, E^fd]` deviations per generator; `u` stacks
/// `[ΔV̄, ΔPᵛ]`. Intended as a reference evaluator for validating the
/// linearization; not used on the simulation fast path.
pub fn nonlinear_rhs<T: Real>(
    net: &NetworkDescription<T>,
    op: &OperatingPoint<T>,
    red: &ReducedAdmittance<T>,
    x: &DVector<T>,
    u: &DVector<T>,
) -> Result<DVector<T>, NetModelError> {
    let ng = net.n_sg();
    let nv = net.n_vsc();
    assert_eq!(x.len(), 4 * ng);
    assert_eq!(u.len(), ng + nv);

    // Equilibrium field voltages at the nominal point.
    let out0 = algebraic_outputs_reduced(red, op)?;
    let efd0: Vec<T> = (0..ng)
        .map(|i| equilibrium_field_voltage(&net.sgs[i].params, op.sg_e[i], out0.id[i]))
        .collect();

    // Absolute voltages at the deviated state.
    let mut dev = op.clone();
    for i in 0..ng {
        dev.sg_delta[i] += x[4 * i];
        dev.sg_e[i] += x[4 * i + 2];
    }
    let pv_target: Vec<T> = (0..nv).map(|j| net.vscs[j].pv + u[ng + j]).collect();
    let qv_target: Vec<T> = (0..nv).map(|j| net.vscs[j].qv).collect();
    let solved = solve_vsc_boundary(red, &dev, &pv_target, &qv_target)?;
    let out = algebraic_outputs_reduced(red, &solved)?;

    let two = T::one() + T::one();
    let mut rhs = DVector::zeros(4 * ng);
    for i in 0..ng {
        let p = &net.sgs[i].params;
        let omega = x[4 * i + 1];
        let e = solved.sg_e[i];
        let efd = efd0[i] + x[4 * i + 3];
        rhs[4 * i] = omega;
        rhs[4 * i + 1] = (p.pm - out.pe[i] - p.d * omega) / (two * p.h);
        rhs[4 * i + 2] = (-(p.xd / p.xdp) * e + (p.xd - p.xdp) * out.id[i] + efd) / p.tdp;
        rhs[4 * i + 3] = (-efd - p.ka * (e - p.xdp * out.id[i] - p.vbar - u[i])) / p.ta;
    }
    Ok(rhs)
}
