//! Network description file format.
//!
//! A single JSON document with sections `buses`, `branches`, `generators`,
//! `vscs` and `operating_point`:
//!
//! ```json
//! {
//!   "buses": [0, 1, 2],
//!   "branches": [{"from": 0, "to": 1, "g": 0.8, "b": -9.0}],
//!   "generators": [{"bus": 0, "H": 0.05, "D": 0.03, "xd": 1.8, "xdp": 0.3,
//!                   "Tdp": 8.0, "Ta": 0.1, "Ka": 12.0, "Pm": 0.4, "Vbar": 1.1}],
//!   "vscs": [{"bus": 2, "Pv": 0.1, "Qv": 0.05}],
//!   "operating_point": {"sg": [{"e": 1.05, "delta": 0.3}],
//!                        "vsc": [{"v": 1.0, "theta": 0.1}]}
//! }
//! ```
//!
//! Units are per-unit, seconds and radians. A branch with `from == to` is a
//! shunt.

use super::{
    Branch, NetModelError, NetworkDescription, OperatingPoint, SgParams, SgUnit, VscUnit,
};
use serde::{Deserialize, Serialize};

#[derive(Serialize, Deserialize)]
struct NetworkFile {
    buses: Vec<usize>,
    branches: Vec<BranchEntry>,
    generators: Vec<GeneratorEntry>,
    #[serde(default)]
    vscs: Vec<VscEntry>,
    operating_point: OperatingPointEntry,
}

#[derive(Serialize, Deserialize)]
struct BranchEntry {
    from: usize,
    to: usize,
    g: f64,
    b: f64,
}

#[derive(Serialize, Deserialize)]
struct GeneratorEntry {
    bus: usize,
    #[serde(rename = "H")]
    h: f64,
    #[serde(rename = "D")]
    d: f64,
    xd: f64,
    xdp: f64,
    #[serde(rename = "Tdp")]
    tdp: f64,
    #[serde(rename = "Ta")]
    ta: f64,
    #[serde(rename = "Ka")]
    ka: f64,
    #[serde(rename = "Pm")]
    pm: f64,
    #[serde(rename = "Vbar")]
    vbar: f64,
}

#[derive(Serialize, Deserialize)]
struct VscEntry {
    bus: usize,
    #[serde(rename = "Pv")]
    pv: f64,
    #[serde(rename = "Qv")]
    qv: f64,
}

#[derive(Serialize, Deserialize)]
struct OperatingPointEntry {
    sg: Vec<SgOpEntry>,
    #[serde(default)]
    vsc: Vec<VscOpEntry>,
}

#[derive(Serialize, Deserialize)]
struct SgOpEntry {
    e: f64,
    delta: f64,
}

#[derive(Serialize, Deserialize)]
struct VscOpEntry {
    v: f64,
    theta: f64,
}

/// Parses a network document. Validates topology and operating-point shape;
/// equilibrium checking is left to the caller.
pub fn network_from_json(
    text: &str,
) -> Result<(NetworkDescription<f64>, OperatingPoint<f64>), NetModelError> {
    let file: NetworkFile = serde_json::from_str(text)?;
    let n_bus = file.buses.len();
    let mut sorted = file.buses.clone();
    sorted.sort_unstable();
    if sorted != (0..n_bus).collect::<Vec<_>>() {
        return Err(NetModelError::Validation(
            "section `buses` must list ids 0..n exactly once".into(),
        ));
    }
    let net = NetworkDescription {
        n_bus,
        branches: file
            .branches
            .iter()
            .map(|b| Branch { from: b.from, to: b.to, g: b.g, b: b.b })
            .collect(),
        sgs: file
            .generators
            .iter()
            .map(|g| SgUnit {
                bus: g.bus,
                params: SgParams {
                    h: g.h,
                    d: g.d,
                    xd: g.xd,
                    xdp: g.xdp,
                    tdp: g.tdp,
                    ta: g.ta,
                    ka: g.ka,
                    pm: g.pm,
                    vbar: g.vbar,
                },
            })
            .collect(),
        vscs: file
            .vscs
            .iter()
            .map(|v| VscUnit { bus: v.bus, pv: v.pv, qv: v.qv })
            .collect(),
    };
    net.validate()?;
    if file.operating_point.sg.len() != net.n_sg() || file.operating_point.vsc.len() != net.n_vsc() {
        return Err(NetModelError::Validation(
            "operating_point entries must match generator/vsc counts".into(),
        ));
    }
    let op = OperatingPoint {
        sg_e: file.operating_point.sg.iter().map(|s| s.e).collect(),
        sg_delta: file.operating_point.sg.iter().map(|s| s.delta).collect(),
        vsc_v: file.operating_point.vsc.iter().map(|v| v.v).collect(),
        vsc_theta: file.operating_point.vsc.iter().map(|v| v.theta).collect(),
    };
    op.validate()?;
    Ok((net, op))
}

/// Serializes a network and operating point in the document format.
pub fn network_to_json(
    net: &NetworkDescription<f64>,
    op: &OperatingPoint<f64>,
) -> Result<String, NetModelError> {
    let file = NetworkFile {
        buses: (0..net.n_bus).collect(),
        branches: net
            .branches
            .iter()
            .map(|b| BranchEntry { from: b.from, to: b.to, g: b.g, b: b.b })
            .collect(),
        generators: net
            .sgs
            .iter()
            .map(|s| GeneratorEntry {
                bus: s.bus,
                h: s.params.h,
                d: s.params.d,
                xd: s.params.xd,
                xdp: s.params.xdp,
                tdp: s.params.tdp,
                ta: s.params.ta,
                ka: s.params.ka,
                pm: s.params.pm,
                vbar: s.params.vbar,
            })
            .collect(),
        vscs: net
            .vscs
            .iter()
            .map(|v| VscEntry { bus: v.bus, pv: v.pv, qv: v.qv })
            .collect(),
        operating_point: OperatingPointEntry {
            sg: op
                .sg_e
                .iter()
                .zip(&op.sg_delta)
                .map(|(&e, &delta)| SgOpEntry { e, delta })
                .collect(),
            vsc: op
                .vsc_v
                .iter()
                .zip(&op.vsc_theta)
                .map(|(&v, &theta)| VscOpEntry { v, theta })
                .collect(),
        },
    };
    Ok(serde_json::to_string_pretty(&file)?)
}
