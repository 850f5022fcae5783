//! Assembly of the continuous linearization and its exact discretization.

use super::{
    eliminate_algebraic, finite_or_validation, jacobian_reduced, kron_reduce, state_index,
    DiscreteSystem, LinearSystem, NetModelError, NetworkDescription, OperatingPoint,
};
use crate::Real;
use nalgebra::DMatrix;

/// Linearizes the machine dynamics around the operating point.
///
/// Per generator `i` the rows realize
///
/// ```text
/// δ̇ = ω
/// ω̇ = (−ΔPᵉ − D ω) / (2H)
/// Ė = (−(xd/xdp) ΔE + (xd − xdp) ΔIᵈ + ΔE^fd) / Tdp
/// Ė^fd = (−ΔE^fd − Ka (ΔE − xdp ΔIᵈ − ΔV̄)) / Ta
/// ```
///
/// with `ΔPᵉ` and `ΔIᵈ` expanded through the eliminated algebraic
/// coefficients. Exciter adjustments enter `B_c` with gain `Ka/Ta`; VSC
/// active-power adjustments enter through the `ΔPᵛ` sensitivities. `ΔQᵛ` is
/// held at zero.
pub fn build_continuous<T: Real>(
    net: &NetworkDescription<T>,
    op: &OperatingPoint<T>,
) -> Result<LinearSystem<T>, NetModelError> {
    let red = kron_reduce(net)?;
    let jac = jacobian_reduced(&red, op)?;
    let coeff = eliminate_algebraic(&jac)?;

    let ng = net.n_sg();
    let nv = net.n_vsc();
    let n = 4 * ng;
    let m = ng + nv;
    let two = T::one() + T::one();

    let mut a = DMatrix::<T>::zeros(n, n);
    let mut b = DMatrix::<T>::zeros(n, m);

    for i in 0..ng {
        let p = &net.sgs[i].params;
        let (di, wi, ei, fi) = (
            state_index::delta(i),
            state_index::omega(i),
            state_index::voltage(i),
            state_index::field(i),
        );
        let inv_2h = T::one() / (two * p.h);
        let dx = p.xd - p.xdp;

        a[(di, wi)] = T::one();

        a[(wi, wi)] = -p.d * inv_2h;
        for j in 0..ng {
            a[(wi, state_index::delta(j))] -= coeff.ap_delta[(i, j)] * inv_2h;
            a[(wi, state_index::voltage(j))] -= coeff.ap_e[(i, j)] * inv_2h;
        }
        for v in 0..nv {
            b[(wi, ng + v)] -= coeff.ap_pv[(i, v)] * inv_2h;
        }

        a[(ei, ei)] += -(p.xd / p.xdp) / p.tdp;
        a[(ei, fi)] += T::one() / p.tdp;
        for j in 0..ng {
            a[(ei, state_index::delta(j))] += dx * coeff.ai_delta[(i, j)] / p.tdp;
            a[(ei, state_index::voltage(j))] += dx * coeff.ai_e[(i, j)] / p.tdp;
        }
        for v in 0..nv {
            b[(ei, ng + v)] += dx * coeff.ai_pv[(i, v)] / p.tdp;
        }

        a[(fi, fi)] += -T::one() / p.ta;
        a[(fi, ei)] += -p.ka / p.ta;
        for j in 0..ng {
            a[(fi, state_index::delta(j))] += p.ka * p.xdp * coeff.ai_delta[(i, j)] / p.ta;
            a[(fi, state_index::voltage(j))] += p.ka * p.xdp * coeff.ai_e[(i, j)] / p.ta;
        }
        for v in 0..nv {
            b[(fi, ng + v)] += p.ka * p.xdp * coeff.ai_pv[(i, v)] / p.ta;
        }
        b[(fi, i)] = p.ka / p.ta;
    }

    finite_or_validation(&a, "continuous state matrix")?;
    finite_or_validation(&b, "continuous input matrix")?;
    Ok(LinearSystem { a, b, n_sg: ng, n_vsc: nv })
}

/// Exact zero-order-hold discretization.
///
/// Computes `A = exp(A_c Δt)` and `B = (∫₀^Δt exp(A_c s) ds) B_c` in one
/// augmented matrix exponential
///
/// ```text
/// exp([A_c B_c; 0 0] Δt) = [A B; 0 I].
/// ```
pub fn discretize<T: Real>(sys: &LinearSystem<T>, dt: T) -> Result<DiscreteSystem<T>, NetModelError> {
    if !(dt > T::zero()) || !dt.is_finite() {
        return Err(NetModelError::InvalidTimeStep(dt.to_f64().unwrap_or(f64::NAN)));
    }
    let n = sys.a.nrows();
    let m = sys.b.ncols();
    let mut aug = DMatrix::<T>::zeros(n + m, n + m);
    aug.view_mut((0, 0), (n, n)).copy_from(&(&sys.a * dt));
    aug.view_mut((0, n), (n, m)).copy_from(&(&sys.b * dt));
    let exp = aug.exp();
    let a = exp.view((0, 0), (n, n)).clone_owned();
    let b = exp.view((0, n), (n, m)).clone_owned();
    finite_or_validation(&a, "discretized state matrix")?;
    Ok(DiscreteSystem {
        a,
        b,
        dt,
        n_sg: sys.n_sg,
        n_vsc: sys.n_vsc,
    })
}
