//! Built-in test systems.
//!
//! Fixture operating points are made self-consistent by construction: the
//! voltages are chosen first, then mechanical powers, exciter references and
//! converter injections are derived from the power flow so the point is an
//! equilibrium (verified to an absolute residual of 1e-8).

use super::{
    algebraic_outputs_reduced, equilibrium_field_voltage, equilibrium_vbar, kron_reduce,
    operating_residual, Branch, NetModelError, NetworkDescription, OperatingPoint, SgParams,
    SgUnit, VscUnit,
};
use crate::{real, Real};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// A ready-to-linearize system: network, consistent operating point and an
/// area assignment for building communication graphs.
#[derive(Clone, Debug)]
pub struct BuiltinSystem<T> {
    pub network: NetworkDescription<T>,
    pub op: OperatingPoint<T>,
    /// Area of each generator, generator order.
    pub sg_areas: Vec<usize>,
    /// Area of each VSC, converter order.
    pub vsc_areas: Vec<usize>,
    pub n_areas: usize,
}

/// Resolves a builtin name: `"two-area"` or `"ring(N_g,N_v,seed)"`.
pub fn builtin_system<T: Real>(name: &str) -> Result<BuiltinSystem<T>, NetModelError> {
    let trimmed = name.trim();
    if trimmed == "two-area" {
        return two_area_system();
    }
    if let Some(rest) = trimmed.strip_prefix("ring(") {
        if let Some(args) = rest.strip_suffix(')') {
            let parts: Vec<&str> = args.split(',').map(str::trim).collect();
            if parts.len() == 3 {
                let ng = parts[0].parse::<usize>();
                let nv = parts[1].parse::<usize>();
                let seed = parts[2].parse::<u64>();
                if let (Ok(ng), Ok(nv), Ok(seed)) = (ng, nv, seed) {
                    return ring_system(ng, nv, seed);
                }
            }
        }
    }
    Err(NetModelError::UnknownBuiltin(trimmed.to_string()))
}

/// Derives `Pm`, `V̄` and the VSC injections from the power flow at the
/// fixture's chosen voltages, then verifies the equilibrium residual.
fn finalize_fixture<T: Real>(
    mut net: NetworkDescription<T>,
    op: OperatingPoint<T>,
) -> Result<(NetworkDescription<T>, OperatingPoint<T>), NetModelError> {
    let red = kron_reduce(&net)?;
    let out = algebraic_outputs_reduced(&red, &op)?;
    for (i, sg) in net.sgs.iter_mut().enumerate() {
        sg.params.pm = out.pe[i];
        let efd = equilibrium_field_voltage(&sg.params, op.sg_e[i], out.id[i]);
        sg.params.vbar = equilibrium_vbar(&sg.params, op.sg_e[i], out.id[i], efd);
    }
    for (j, vsc) in net.vscs.iter_mut().enumerate() {
        vsc.pv = out.pv[j];
        vsc.qv = out.qv[j];
    }
    let residual = operating_residual(&net, &op)?;
    let tolerance = real::<T>(1e-8);
    if residual > tolerance {
        return Err(NetModelError::InconsistentOperatingPoint {
            residual: residual.to_f64().unwrap_or(f64::NAN),
            tolerance: 1e-8,
        });
    }
    Ok((net, op))
}

/// Two-area four-machine system with one converter per area.
///
/// Buses 0-3 host the generators (two per area), buses 4 and 5 are the area
/// hubs joined by a weak tie line; each hub hosts a VSC. Inertia constants
/// are scaled so the inter-area swing mode lands in the sub-2 Hz band under
/// the normalized swing dynamics used here.
pub fn two_area_system<T: Real>() -> Result<BuiltinSystem<T>, NetModelError> {
    let r = real::<T>;
    let sg = |h: f64, d: f64, ka: f64| SgParams {
        h: r(h),
        d: r(d),
        xd: r(1.8),
        xdp: r(0.3),
        tdp: r(2.0),
        ta: r(0.05),
        ka: r(ka),
        pm: T::zero(),
        vbar: T::zero(),
    };
    let branch = |from: usize, to: usize, g: f64, b: f64| Branch {
        from,
        to,
        g: r(g),
        b: r(b),
    };
    let network = NetworkDescription {
        n_bus: 6,
        branches: vec![
            branch(0, 4, 0.8, -9.0),
            branch(1, 4, 0.9, -8.0),
            branch(2, 5, 0.8, -9.0),
            branch(3, 5, 0.9, -8.0),
            // Weak inter-area tie.
            branch(4, 5, 0.2, -2.0),
        ],
        sgs: vec![
            SgUnit { bus: 0, params: sg(0.032, 0.018, 24.0) },
            SgUnit { bus: 1, params: sg(0.038, 0.018, 20.0) },
            SgUnit { bus: 2, params: sg(0.035, 0.018, 24.0) },
            SgUnit { bus: 3, params: sg(0.042, 0.018, 20.0) },
        ],
        vscs: vec![
            VscUnit { bus: 4, pv: T::zero(), qv: T::zero() },
            VscUnit { bus: 5, pv: T::zero(), qv: T::zero() },
        ],
    };
    let op = OperatingPoint {
        sg_e: vec![r(1.05), r(1.04), r(1.03), r(1.02)],
        sg_delta: vec![r(0.30), r(0.28), r(0.00), r(-0.02)],
        vsc_v: vec![r(1.00), r(0.99)],
        vsc_theta: vec![r(0.14), r(-0.10)],
    };
    let (network, op) = finalize_fixture(network, op)?;
    Ok(BuiltinSystem {
        network,
        op,
        sg_areas: vec![0, 0, 1, 1],
        vsc_areas: vec![0, 1],
        n_areas: 2,
    })
}

/// Deterministic synthetic ring with `ng` generators and `nv` converters.
///
/// Every unit sits on its own bus; buses are joined in a ring. Parameters
/// and the operating point are drawn from fixed ranges with the given seed,
/// then balanced by [`finalize_fixture`]. Areas split the ring in half.
pub fn ring_system<T: Real>(ng: usize, nv: usize, seed: u64) -> Result<BuiltinSystem<T>, NetModelError> {
    if ng == 0 {
        return Err(NetModelError::Validation(
            "ring fixture needs at least one generator".into(),
        ));
    }
    let r = real::<T>;
    let mut rng = ChaCha8Rng::seed_from_u64(crate::util::mix(seed, 0xB17));
    let n_bus = ng + nv;

    // Spread VSC buses as evenly as the counts allow.
    let mut is_vsc_bus = vec![false; n_bus];
    for k in 0..nv {
        let mut pos = k * n_bus / nv.max(1);
        while is_vsc_bus[pos] {
            pos = (pos + 1) % n_bus;
        }
        is_vsc_bus[pos] = true;
    }

    let mut branches = Vec::new();
    if n_bus > 1 {
        let ring_len = if n_bus == 2 { 1 } else { n_bus };
        for i in 0..ring_len {
            branches.push(Branch {
                from: i,
                to: (i + 1) % n_bus,
                g: r(rng.gen_range(0.2..1.0)),
                b: r(-rng.gen_range(4.0..10.0)),
            });
        }
    }

    let mut sgs = Vec::new();
    let mut vscs = Vec::new();
    let mut sg_areas = Vec::new();
    let mut vsc_areas = Vec::new();
    for (bus, &vsc_here) in is_vsc_bus.iter().enumerate() {
        let area = if bus < n_bus.div_ceil(2) { 0 } else { 1 };
        if vsc_here {
            vscs.push(VscUnit { bus, pv: T::zero(), qv: T::zero() });
            vsc_areas.push(area);
        } else {
            let xdp = rng.gen_range(0.25..0.40);
            sgs.push(SgUnit {
                bus,
                params: SgParams {
                    h: r(rng.gen_range(0.03..0.08)),
                    d: r(rng.gen_range(0.01..0.05)),
                    xd: r(xdp + rng.gen_range(1.0..1.6)),
                    xdp: r(xdp),
                    tdp: r(rng.gen_range(5.0..9.0)),
                    ta: r(rng.gen_range(0.05..0.15)),
                    ka: r(rng.gen_range(5.0..15.0)),
                    pm: T::zero(),
                    vbar: T::zero(),
                },
            });
            sg_areas.push(area);
        }
    }

    let op = OperatingPoint {
        sg_e: (0..ng).map(|_| r(rng.gen_range(1.0..1.08))).collect(),
        sg_delta: (0..ng).map(|_| r(rng.gen_range(-0.2..0.2))).collect(),
        vsc_v: (0..nv).map(|_| r(rng.gen_range(0.98..1.04))).collect(),
        vsc_theta: (0..nv).map(|_| r(rng.gen_range(-0.2..0.2))).collect(),
    };

    let network = NetworkDescription { n_bus, branches, sgs, vscs };
    let (network, op) = finalize_fixture(network, op)?;
    let n_areas = if n_bus > 1 { 2 } else { 1 };
    Ok(BuiltinSystem { network, op, sg_areas, vsc_areas, n_areas })
}
