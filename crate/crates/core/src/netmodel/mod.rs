//! Linearized dynamic models of SG/VSC power networks.
//!
//! The model pipeline is:
//!
//! 1. [`NetworkDescription`] — buses, branch admittances, generators with
//!    their machine parameters, converters with their injection set-points.
//! 2. [`kron_reduce`] — Schur-complement elimination of every node except the
//!    SG internal nodes and the VSC terminal buses.
//! 3. [`algebraic_outputs`] / [`jacobian`] — power-flow sums over the reduced
//!    admittance and their analytic partial derivatives.
//! 4. [`eliminate_algebraic`] — solves the VSC terminal voltages out of the
//!    Jacobian, leaving the sensitivities of `(ΔPᵉ, ΔIᵈ)` to
//!    `(Δδ, ΔE, ΔPᵛ, ΔQᵛ)`.
//! 5. [`build_continuous`] — assembles the fourth-order machine dynamics into
//!    the state-space pair `(A_c, B_c)`.
//! 6. [`discretize`] — exact zero-order-hold discretization to `(A, B)`.
//!
//! # Conventions
//!
//! Per-unit quantities throughout; angles in radians; rotor speed deviation
//! in rad/s. The state vector stacks `[δ_i, ω_i, E_i, E^fd_i]` per generator
//! in generator order; inputs stack all exciter reference adjustments `ΔV̄`
//! followed by all converter active-power adjustments `ΔPᵛ`. VSC reactive
//! power is not a control input: `ΔQᵛ = 0` in the assembled model (its
//! sensitivity matrices are still computed and exposed).

mod build;
mod builtin;
mod jacobian;
pub mod json;
mod nonlinear;

pub use build::{build_continuous, discretize};
pub use builtin::{builtin_system, ring_system, two_area_system, BuiltinSystem};
pub use jacobian::{eliminate_algebraic, jacobian, jacobian_reduced, AlgebraicCoefficients, PfJacobian};
pub use nonlinear::{nonlinear_rhs, operating_residual, rebuild_with_injections, solve_vsc_boundary};

use crate::Real;
use nalgebra::{DMatrix, DVector};
use num_complex::Complex;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum NetModelError {
    #[error("network validation failed: {0}")]
    Validation(String),
    #[error("non-reducible network: eliminated nodes {nodes:?} form a singular block")]
    NonReducible { nodes: Vec<usize> },
    #[error("algebraically degenerate operating point: VSC boundary block is singular")]
    AlgebraicallyDegenerate,
    #[error("boundary solve did not converge after {iterations} iterations (residual {residual:.3e})")]
    BoundaryNotConverged { iterations: usize, residual: f64 },
    #[error("unknown builtin system '{0}' (expected \"two-area\" or \"ring(N_g,N_v,seed)\")")]
    UnknownBuiltin(String),
    #[error("operating point is not an equilibrium: residual {residual:.3e} exceeds {tolerance:.3e}")]
    InconsistentOperatingPoint { residual: f64, tolerance: f64 },
    #[error("invalid time step {0}")]
    InvalidTimeStep(f64),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Fourth-order machine parameters of one synchronous generator.
#[derive(Clone, Debug, PartialEq)]
pub struct SgParams<T> {
    /// Inertia constant H (s).
    pub h: T,
    /// Damping coefficient D (pu).
    pub d: T,
    /// d-axis synchronous reactance (pu).
    pub xd: T,
    /// d-axis transient reactance (pu).
    pub xdp: T,
    /// Open-circuit time constant (s).
    pub tdp: T,
    /// Regulator time constant (s).
    pub ta: T,
    /// Regulator gain.
    pub ka: T,
    /// Mechanical power input (pu), fixed by dispatch.
    pub pm: T,
    /// Exciter reference voltage (pu), fixed by dispatch.
    pub vbar: T,
}

impl<T: Real> SgParams<T> {
    pub fn validate(&self, index: usize) -> Result<(), NetModelError> {
        let bad = |what: &str| {
            Err(NetModelError::Validation(format!(
                "generator {index}: {what}"
            )))
        };
        if self.h <= T::zero() {
            return bad("inertia H must be positive");
        }
        if self.tdp <= T::zero() {
            return bad("time constant Tdp must be positive");
        }
        if self.ta <= T::zero() {
            return bad("time constant Ta must be positive");
        }
        if !(self.xd >= self.xdp && self.xdp > T::zero()) {
            return bad("reactances must satisfy xd >= xdp > 0");
        }
        Ok(())
    }
}

/// Branch between two buses, or a shunt when `from == to`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Branch<T> {
    pub from: usize,
    pub to: usize,
    /// Series (or shunt) conductance (pu).
    pub g: T,
    /// Series (or shunt) susceptance (pu).
    pub b: T,
}

/// Generator attachment: terminal bus plus machine parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct SgUnit<T> {
    pub bus: usize,
    pub params: SgParams<T>,
}

/// Converter attachment: terminal bus plus steady-state injections.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VscUnit<T> {
    pub bus: usize,
    /// Active-power injection set-point (pu).
    pub pv: T,
    /// Reactive-power injection set-point (pu).
    pub qv: T,
}

/// Static description of the network: buses, branches, machines, converters.
///
/// Generator internal nodes are implicit: generator `i` owns node
/// `n_bus + i`, tied to its terminal bus through the transient reactance
/// `xdp`. The retained-node set is the generator internal nodes followed by
/// the VSC terminal buses; everything else is eliminated by Kron reduction.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkDescription<T> {
    pub n_bus: usize,
    pub branches: Vec<Branch<T>>,
    pub sgs: Vec<SgUnit<T>>,
    pub vscs: Vec<VscUnit<T>>,
}

impl<T: Real> NetworkDescription<T> {
    pub fn n_sg(&self) -> usize {
        self.sgs.len()
    }

    pub fn n_vsc(&self) -> usize {
        self.vscs.len()
    }

    /// Total node count of the augmented graph (buses + internal nodes).
    pub fn n_nodes(&self) -> usize {
        self.n_bus + self.sgs.len()
    }

    pub fn internal_node(&self, sg: usize) -> usize {
        self.n_bus + sg
    }

    /// Retained nodes in reduced-matrix order: SG internal nodes in generator
    /// order, then VSC terminal buses in converter order.
    pub fn retained_nodes(&self) -> Vec<usize> {
        let mut nodes: Vec<usize> = (0..self.sgs.len()).map(|i| self.internal_node(i)).collect();
        nodes.extend(self.vscs.iter().map(|v| v.bus));
        nodes
    }

    pub fn validate(&self) -> Result<(), NetModelError> {
        if self.sgs.is_empty() {
            return Err(NetModelError::Validation(
                "network must contain at least one generator".into(),
            ));
        }
        for (i, sg) in self.sgs.iter().enumerate() {
            if sg.bus >= self.n_bus {
                return Err(NetModelError::Validation(format!(
                    "generator {i} attaches to bus {} but the network has {} buses",
                    sg.bus, self.n_bus
                )));
            }
            sg.params.validate(i)?;
        }
        let mut seen = std::collections::HashSet::new();
        for (j, vsc) in self.vscs.iter().enumerate() {
            if vsc.bus >= self.n_bus {
                return Err(NetModelError::Validation(format!(
                    "VSC {j} attaches to bus {} but the network has {} buses",
                    vsc.bus, self.n_bus
                )));
            }
            if !seen.insert(vsc.bus) {
                return Err(NetModelError::Validation(format!(
                    "VSC {j} duplicates bus {}",
                    vsc.bus
                )));
            }
        }
        for (k, br) in self.branches.iter().enumerate() {
            if br.from >= self.n_bus || br.to >= self.n_bus {
                return Err(NetModelError::Validation(format!(
                    "branch {k} references a bus outside 0..{}",
                    self.n_bus
                )));
            }
        }
        Ok(())
    }

    /// Bus admittance matrix of the augmented graph (buses plus generator
    /// internal nodes behind their transient reactances).
    pub fn bus_admittance(&self) -> DMatrix<Complex<T>> {
        let n = self.n_nodes();
        let mut y = DMatrix::from_element(n, n, Complex::new(T::zero(), T::zero()));
        for br in &self.branches {
            let yb = Complex::new(br.g, br.b);
            if br.from == br.to {
                y[(br.from, br.from)] += yb;
            } else {
                y[(br.from, br.from)] += yb;
                y[(br.to, br.to)] += yb;
                y[(br.from, br.to)] -= yb;
                y[(br.to, br.from)] -= yb;
            }
        }
        for (i, sg) in self.sgs.iter().enumerate() {
            // Internal EMF behind the transient reactance: y = 1/(j xdp).
            let yint = Complex::new(T::zero(), -T::one() / sg.params.xdp);
            let int = self.internal_node(i);
            y[(sg.bus, sg.bus)] += yint;
            y[(int, int)] += yint;
            y[(sg.bus, int)] -= yint;
            y[(int, sg.bus)] -= yint;
        }
        y
    }
}

/// Steady-state voltages of the retained nodes.
#[derive(Clone, Debug, PartialEq)]
pub struct OperatingPoint<T> {
    /// Generator internal voltage magnitudes E (pu).
    pub sg_e: Vec<T>,
    /// Generator internal angles δ (rad).
    pub sg_delta: Vec<T>,
    /// VSC terminal voltage magnitudes V (pu).
    pub vsc_v: Vec<T>,
    /// VSC terminal angles θ (rad).
    pub vsc_theta: Vec<T>,
}

impl<T: Real> OperatingPoint<T> {
    pub fn validate(&self) -> Result<(), NetModelError> {
        if self.sg_e.len() != self.sg_delta.len() || self.vsc_v.len() != self.vsc_theta.len() {
            return Err(NetModelError::Validation(
                "operating point magnitude/angle lists disagree in length".into(),
            ));
        }
        if self
            .sg_e
            .iter()
            .chain(self.vsc_v.iter())
            .any(|&m| m <= T::zero())
        {
            return Err(NetModelError::Validation(
                "all voltage magnitudes must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Magnitudes of all retained nodes in reduced order.
    pub(crate) fn magnitudes(&self) -> Vec<T> {
        self.sg_e.iter().chain(self.vsc_v.iter()).copied().collect()
    }

    /// Angles of all retained nodes in reduced order.
    pub(crate) fn angles(&self) -> Vec<T> {
        self.sg_delta
            .iter()
            .chain(self.vsc_theta.iter())
            .copied()
            .collect()
    }
}

/// Admittance over the retained nodes after Kron reduction.
#[derive(Clone, Debug, PartialEq)]
pub struct ReducedAdmittance<T> {
    pub y: DMatrix<Complex<T>>,
    pub n_sg: usize,
    pub n_vsc: usize,
}

impl<T: Real> ReducedAdmittance<T> {
    #[inline]
    pub fn g(&self, i: usize, l: usize) -> T {
        self.y[(i, l)].re
    }

    #[inline]
    pub fn b(&self, i: usize, l: usize) -> T {
        self.y[(i, l)].im
    }

    pub fn n_nodes(&self) -> usize {
        self.n_sg + self.n_vsc
    }
}

/// Schur complement of `y` onto the `retained` index set, in the order given.
///
/// The eliminated nodes are assumed to carry zero current injection, so the
/// reduction preserves the injections at retained nodes for any retained-node
/// voltage profile. With every node retained this is a pure re-indexing.
pub fn schur_reduce<T: Real>(
    y: &DMatrix<Complex<T>>,
    retained: &[usize],
) -> Result<DMatrix<Complex<T>>, NetModelError> {
    let n = y.nrows();
    let mut is_retained = vec![false; n];
    for &r in retained {
        if r >= n {
            return Err(NetModelError::Validation(format!(
                "retained node {r} outside admittance matrix of size {n}"
            )));
        }
        if std::mem::replace(&mut is_retained[r], true) {
            return Err(NetModelError::Validation(format!(
                "retained node {r} listed twice"
            )));
        }
    }
    let eliminated: Vec<usize> = (0..n).filter(|&i| !is_retained[i]).collect();

    let gather = |rows: &[usize], cols: &[usize]| {
        DMatrix::from_fn(rows.len(), cols.len(), |i, j| y[(rows[i], cols[j])])
    };
    let y_rr = gather(retained, retained);
    if eliminated.is_empty() {
        return Ok(y_rr);
    }
    let y_re = gather(retained, &eliminated);
    let y_er = gather(&eliminated, retained);
    let y_ee = gather(&eliminated, &eliminated);

    let lu = y_ee.lu();
    match lu.solve(&y_er) {
        Some(x) if x.iter().all(|c| c.re.is_finite() && c.im.is_finite()) => Ok(y_rr - y_re * x),
        _ => Err(NetModelError::NonReducible { nodes: eliminated }),
    }
}

/// Kron reduction of a network onto its retained nodes.
pub fn kron_reduce<T: Real>(
    net: &NetworkDescription<T>,
) -> Result<ReducedAdmittance<T>, NetModelError> {
    net.validate()?;
    let y = net.bus_admittance();
    let reduced = schur_reduce(&y, &net.retained_nodes())?;
    Ok(ReducedAdmittance {
        y: reduced,
        n_sg: net.n_sg(),
        n_vsc: net.n_vsc(),
    })
}

/// Power-flow quantities at the retained nodes for a given operating point.
#[derive(Clone, Debug)]
pub struct AlgebraicOutputs<T> {
    /// Active power at each SG internal node (pu).
    pub pe: DVector<T>,
    /// Reactive power at each SG internal node (pu).
    pub qe: DVector<T>,
    /// d-axis current of each SG, `Iᵈ_i = Qᵉ_i / E_i`.
    pub id: DVector<T>,
    /// Active power flowing out of each VSC terminal bus (pu).
    pub pv: DVector<T>,
    /// Reactive power flowing out of each VSC terminal bus (pu).
    pub qv: DVector<T>,
}

/// Evaluates the power-flow sums over a reduced admittance.
///
/// For node `a` with magnitude `m_a` and angle `φ_a`:
///
/// ```text
/// P_a = Σ_b m_a m_b (G_ab cos(φ_a − φ_b) + B_ab sin(φ_a − φ_b))
/// Q_a = Σ_b m_a m_b (G_ab sin(φ_a − φ_b) − B_ab cos(φ_a − φ_b))
/// ```
pub fn algebraic_outputs_reduced<T: Real>(
    red: &ReducedAdmittance<T>,
    op: &OperatingPoint<T>,
) -> Result<AlgebraicOutputs<T>, NetModelError> {
    op.validate()?;
    let n = red.n_nodes();
    if op.sg_e.len() != red.n_sg || op.vsc_v.len() != red.n_vsc {
        return Err(NetModelError::Validation(
            "operating point does not match network dimensions".into(),
        ));
    }
    let m = op.magnitudes();
    let phi = op.angles();

    let mut p = DVector::zeros(n);
    let mut q = DVector::zeros(n);
    for a in 0..n {
        let mut pa = T::zero();
        let mut qa = T::zero();
        for b in 0..n {
            let ang = phi[a] - phi[b];
            let (s, c) = (ang.sin(), ang.cos());
            pa += m[a] * m[b] * (red.g(a, b) * c + red.b(a, b) * s);
            qa += m[a] * m[b] * (red.g(a, b) * s - red.b(a, b) * c);
        }
        p[a] = pa;
        q[a] = qa;
    }

    let n_sg = red.n_sg;
    let pe = DVector::from_fn(n_sg, |i, _| p[i]);
    let qe = DVector::from_fn(n_sg, |i, _| q[i]);
    let id = DVector::from_fn(n_sg, |i, _| qe[i] / op.sg_e[i]);
    let pv = DVector::from_fn(red.n_vsc, |j, _| p[n_sg + j]);
    let qv = DVector::from_fn(red.n_vsc, |j, _| q[n_sg + j]);
    Ok(AlgebraicOutputs { pe, qe, id, pv, qv })
}

/// [`algebraic_outputs_reduced`] after reducing the network first.
pub fn algebraic_outputs<T: Real>(
    net: &NetworkDescription<T>,
    op: &OperatingPoint<T>,
) -> Result<AlgebraicOutputs<T>, NetModelError> {
    let red = kron_reduce(net)?;
    algebraic_outputs_reduced(&red, op)
}

/// Continuous-time linearization `ẋ = A_c x + B_c u` around an operating
/// point.
///
/// State ordering: blocks `[δ_i, ω_i, E_i, E^fd_i]` per generator. Input
/// ordering: all `ΔV̄_i` (one per generator), then all `ΔPᵛ_j` (one per VSC).
#[derive(Clone, Debug, PartialEq)]
pub struct LinearSystem<T> {
    pub a: DMatrix<T>,
    pub b: DMatrix<T>,
    pub n_sg: usize,
    pub n_vsc: usize,
}

/// Discrete-time pair `x⁺ = A x + B u` obtained by zero-order hold.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscreteSystem<T> {
    pub a: DMatrix<T>,
    pub b: DMatrix<T>,
    /// Sampling period Δt (s).
    pub dt: T,
    pub n_sg: usize,
    pub n_vsc: usize,
}

impl<T: Real> LinearSystem<T> {
    pub fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.b.ncols()
    }
}

impl<T: Real> DiscreteSystem<T> {
    pub fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.b.ncols()
    }

    /// Closed-loop matrix `A − B K`.
    pub fn closed_loop(&self, k: &DMatrix<T>) -> DMatrix<T> {
        &self.a - &self.b * k
    }

    /// Arbitrary `(A, B, Δt)` triple, for systems not born from a network
    /// (test rigs, scalar toys). `n_sg`/`n_vsc` are zeroed: such systems have
    /// no generator block structure.
    pub fn from_matrices(a: DMatrix<T>, b: DMatrix<T>, dt: T) -> Self {
        DiscreteSystem {
            a,
            b,
            dt,
            n_sg: 0,
            n_vsc: 0,
        }
    }
}

/// Index of the δ / ω / E / E^fd component of generator `i` within the state.
pub mod state_index {
    #[inline]
    pub fn delta(i: usize) -> usize {
        4 * i
    }
    #[inline]
    pub fn omega(i: usize) -> usize {
        4 * i + 1
    }
    #[inline]
    pub fn voltage(i: usize) -> usize {
        4 * i + 2
    }
    #[inline]
    pub fn field(i: usize) -> usize {
        4 * i + 3
    }
}

/// Human-readable labels matching the state ordering contract.
pub fn state_labels(n_sg: usize) -> Vec<String> {
    let mut labels = Vec::with_capacity(4 * n_sg);
    for i in 0..n_sg {
        labels.push(format!("delta_{i}"));
        labels.push(format!("omega_{i}"));
        labels.push(format!("e_{i}"));
        labels.push(format!("efd_{i}"));
    }
    labels
}

/// Human-readable labels matching the input ordering contract.
pub fn input_labels(n_sg: usize, n_vsc: usize) -> Vec<String> {
    let mut labels = Vec::with_capacity(n_sg + n_vsc);
    for i in 0..n_sg {
        labels.push(format!("dvbar_{i}"));
    }
    for j in 0..n_vsc {
        labels.push(format!("dpv_{j}"));
    }
    labels
}

/// Equilibrium field voltage implied by `Ė = 0`:
/// `E^fd = (xd/xdp) E − (xd − xdp) Iᵈ`.
pub fn equilibrium_field_voltage<T: Real>(params: &SgParams<T>, e: T, id: T) -> T {
    params.xd / params.xdp * e - (params.xd - params.xdp) * id
}

/// Exciter reference implied by `Ė^fd = 0`:
/// `V̄ = E − xdp Iᵈ + E^fd / Ka`.
pub fn equilibrium_vbar<T: Real>(params: &SgParams<T>, e: T, id: T, efd: T) -> T {
    e - params.xdp * id + efd / params.ka
}

pub(crate) fn finite_or_validation<T: Real>(
    m: &DMatrix<T>,
    what: &str,
) -> Result<(), NetModelError> {
    if m.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(NetModelError::Validation(format!(
            "{what} contains non-finite entries"
        )))
    }
}
