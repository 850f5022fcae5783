//! Communication layer: measurement graph, gain sparsity, delays, loss.
//!
//! Controller nodes are the generator controllers `0..n_sg` followed by the
//! converter controllers `n_sg..n_sg+n_vsc`. An edge `i → ℓ` means SG `i`'s
//! state is measurable at controller `ℓ`. Generator controllers always see
//! their own machine undelayed; every remote state arrives with a per-source
//! delay of a whole number of control steps and, optionally, through a lossy
//! hold-last-sample channel.

use crate::{util, Real};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CommsError {
    #[error("communication graph validation failed: {0}")]
    Validation(String),
    #[error("a generator controller must keep access to its own machine (controller {0})")]
    LocalLinkRequired(usize),
    #[error("sparsity mask has no active entries")]
    EmptyMask,
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Directed measurement graph between SG states and controller nodes.
#[derive(Clone, Debug, PartialEq)]
pub struct CommGraph {
    n_sg: usize,
    n_vsc: usize,
    /// `links[l][i]`: controller `l` can read SG `i`.
    links: Vec<Vec<bool>>,
    /// Area of each controller node.
    areas: Vec<usize>,
}

impl CommGraph {
    pub fn n_sg(&self) -> usize {
        self.n_sg
    }

    pub fn n_vsc(&self) -> usize {
        self.n_vsc
    }

    pub fn n_controllers(&self) -> usize {
        self.n_sg + self.n_vsc
    }

    pub fn has_link(&self, controller: usize, sg: usize) -> bool {
        self.links[controller][sg]
    }

    pub fn areas(&self) -> &[usize] {
        &self.areas
    }

    /// Every controller reads every machine.
    pub fn complete(n_sg: usize, n_vsc: usize) -> Self {
        CommGraph {
            n_sg,
            n_vsc,
            links: vec![vec![true; n_sg]; n_sg + n_vsc],
            areas: vec![0; n_sg + n_vsc],
        }
    }

    /// Generator controllers read only their own machine; converter
    /// controllers read nothing.
    pub fn local_only(n_sg: usize, n_vsc: usize) -> Self {
        let mut links = vec![vec![false; n_sg]; n_sg + n_vsc];
        for (l, row) in links.iter_mut().enumerate().take(n_sg) {
            row[l] = true;
        }
        CommGraph {
            n_sg,
            n_vsc,
            links,
            areas: vec![0; n_sg + n_vsc],
        }
    }

    /// Builds the graph from an area assignment: a controller reads a machine
    /// iff they share an area or their areas are declared adjacent. Local
    /// links are always present.
    ///
    /// `adjacent` lists unordered area pairs; `None` means every pair of
    /// areas is adjacent.
    pub fn from_areas(
        sg_areas: &[usize],
        vsc_areas: &[usize],
        adjacent: Option<&[(usize, usize)]>,
    ) -> Self {
        let n_sg = sg_areas.len();
        let n_vsc = vsc_areas.len();
        let areas: Vec<usize> = sg_areas.iter().chain(vsc_areas.iter()).copied().collect();
        let is_adjacent = |a: usize, b: usize| {
            if a == b {
                return true;
            }
            match adjacent {
                None => true,
                Some(pairs) => pairs
                    .iter()
                    .any(|&(x, y)| (x == a && y == b) || (x == b && y == a)),
            }
        };
        let mut links = vec![vec![false; n_sg]; n_sg + n_vsc];
        for (l, row) in links.iter_mut().enumerate() {
            for (i, cell) in row.iter_mut().enumerate() {
                *cell = is_adjacent(areas[l], sg_areas[i]) || (l < n_sg && l == i);
            }
        }
        CommGraph { n_sg, n_vsc, links, areas }
    }

    /// Forces a single link on or off. Cutting a generator controller's own
    /// machine is refused.
    pub fn set_link(&mut self, controller: usize, sg: usize, link: bool) -> Result<(), CommsError> {
        if controller >= self.n_controllers() || sg >= self.n_sg {
            return Err(CommsError::Validation(format!(
                "link override ({controller}, {sg}) out of range"
            )));
        }
        if !link && controller < self.n_sg && controller == sg {
            return Err(CommsError::LocalLinkRequired(controller));
        }
        self.links[controller][sg] = link;
        Ok(())
    }
}

/// Boolean structure of the feedback gain.
///
/// Shape `(n_controllers) × (4 n_sg)` when built from a graph, where the
/// `1×4` block `(ℓ, i)` is all-true iff controller `ℓ` reads machine `i`.
/// Arbitrary shapes are supported for systems without machine block
/// structure.
#[derive(Clone, Debug, PartialEq)]
pub struct SparsityMask {
    cells: DMatrix<bool>,
}

impl SparsityMask {
    pub fn from_cells(cells: DMatrix<bool>) -> Result<Self, CommsError> {
        if !cells.iter().any(|&x| x) {
            return Err(CommsError::EmptyMask);
        }
        Ok(SparsityMask { cells })
    }

    /// Fully dense mask (no structure).
    pub fn dense(rows: usize, cols: usize) -> Result<Self, CommsError> {
        Self::from_cells(DMatrix::from_element(rows, cols, true))
    }

    pub fn rows(&self) -> usize {
        self.cells.nrows()
    }

    pub fn cols(&self) -> usize {
        self.cells.ncols()
    }

    #[inline]
    pub fn allowed(&self, row: usize, col: usize) -> bool {
        self.cells[(row, col)]
    }

    /// Number of structurally free entries.
    pub fn n_active(&self) -> usize {
        self.cells.iter().filter(|&&x| x).count()
    }

    /// Zeroes every masked-out entry of `m` in place.
    pub fn project<T: Real>(&self, m: &mut DMatrix<T>) {
        assert_eq!((m.nrows(), m.ncols()), (self.rows(), self.cols()));
        for c in 0..m.ncols() {
            for r in 0..m.nrows() {
                if !self.cells[(r, c)] {
                    m[(r, c)] = T::zero();
                }
            }
        }
    }

    /// True iff every masked-out entry of `m` is exactly zero.
    pub fn respects<T: Real>(&self, m: &DMatrix<T>) -> bool {
        if (m.nrows(), m.ncols()) != (self.rows(), self.cols()) {
            return false;
        }
        m.iter()
            .zip(self.cells.iter())
            .all(|(&v, &ok)| ok || v == T::zero())
    }
}

/// Derives the gain mask from a measurement graph: block `(ℓ, i)` is free
/// iff the graph carries `i → ℓ` (a generator's own block is always free).
pub fn mask_from_graph(graph: &CommGraph) -> Result<SparsityMask, CommsError> {
    let rows = graph.n_controllers();
    let cols = 4 * graph.n_sg();
    let cells = DMatrix::from_fn(rows, cols, |l, c| graph.has_link(l, c / 4));
    SparsityMask::from_cells(cells)
}

/// Per-source measurement delays in whole control steps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DelayProfile {
    /// Delay of SG `i`'s state toward every remote controller.
    pub steps: Vec<usize>,
    /// Bound the profile was sampled under (s); metadata only.
    pub max_delay_s: f64,
    /// Seed the profile was sampled with; metadata only.
    pub seed: u64,
}

impl DelayProfile {
    pub fn zero(n_sg: usize) -> Self {
        DelayProfile {
            steps: vec![0; n_sg],
            max_delay_s: 0.0,
            seed: 0,
        }
    }

    pub fn max_steps(&self) -> usize {
        self.steps.iter().copied().max().unwrap_or(0)
    }

    pub fn is_zero(&self) -> bool {
        self.steps.iter().all(|&h| h == 0)
    }
}

/// Samples each `h_i` uniformly from `{0, 1, …, round(max_delay_s/dt)}`.
///
/// The draw is `floor(u · (cap+1))` on a unit uniform, so enlarging the bound
/// with the same seed never shortens a delay; sweeps over the bound are
/// monotone per scenario.
pub fn sample_delays(n_sg: usize, max_delay_s: f64, dt: f64, seed: u64) -> DelayProfile {
    assert!(max_delay_s >= 0.0 && dt > 0.0);
    let cap = (max_delay_s / dt).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(util::mix(seed, util::stream::DELAYS));
    let steps = (0..n_sg)
        .map(|_| {
            let u: f64 = rng.gen();
            ((u * (cap as f64 + 1.0)) as usize).min(cap)
        })
        .collect();
    DelayProfile { steps, max_delay_s, seed }
}

/// The state vector controller `ℓ` sees at time `t`: each remote machine
/// block is read `h_i` steps in the past (clamped to the initial state),
/// while a generator controller's own block is current. Converter
/// controllers have no local machine, so every block is delayed.
pub fn delayed_view<T: Real>(
    states: &[DVector<T>],
    profile: &DelayProfile,
    controller: usize,
    n_sg: usize,
    t: usize,
) -> DVector<T> {
    let mut view = DVector::zeros(4 * n_sg);
    fill_delayed_view(states, profile, controller, n_sg, t, &mut view);
    view
}

/// In-place variant of [`delayed_view`].
pub fn fill_delayed_view<T: Real>(
    states: &[DVector<T>],
    profile: &DelayProfile,
    controller: usize,
    n_sg: usize,
    t: usize,
    out: &mut DVector<T>,
) {
    debug_assert!(t < states.len());
    debug_assert_eq!(profile.steps.len(), n_sg);
    for i in 0..n_sg {
        let src = if controller < n_sg && controller == i {
            t
        } else {
            t.saturating_sub(profile.steps[i])
        };
        let state = &states[src];
        for k in 0..4 {
            out[4 * i + k] = state[4 * i + k];
        }
    }
}

/// Bernoulli packet-loss channel with hold-last-sample semantics.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PacketLossModel {
    /// Probability that a step's measurement packet is lost.
    pub p: f64,
    pub seed: u64,
    /// When set, each (controller, source) link draws its own loss stream;
    /// by default one draw per step covers the whole measurement vector.
    #[serde(default)]
    pub per_link: bool,
}

impl PacketLossModel {
    pub fn none() -> Self {
        PacketLossModel {
            p: 0.0,
            seed: 0,
            per_link: false,
        }
    }

    pub fn is_none(&self) -> bool {
        self.p == 0.0
    }
}

/// Streaming hold-last-sample filter over whole vectors.
///
/// `x̂_t = x_t` when the step's draw succeeds, otherwise the previous output;
/// before the first success the output is the first input.
pub struct LossChannel<T> {
    p: f64,
    rng: ChaCha8Rng,
    held: Option<DVector<T>>,
}

impl<T: Real> LossChannel<T> {
    pub fn new(p: f64, seed: u64) -> Self {
        assert!((0.0..=1.0).contains(&p));
        LossChannel {
            p,
            rng: ChaCha8Rng::seed_from_u64(util::mix(seed, util::stream::LOSS)),
            held: None,
        }
    }

    pub fn apply(&mut self, x: &DVector<T>) -> DVector<T> {
        let lost = self.rng.gen::<f64>() < self.p;
        match (&mut self.held, lost) {
            (held @ None, _) => {
                // Nothing received yet: the first input doubles as the held
                // sample whether or not the draw succeeds.
                *held = Some(x.clone());
            }
            (Some(held), false) => {
                held.copy_from(x);
            }
            (Some(_), true) => {}
        }
        self.held.as_ref().unwrap().clone()
    }
}

/// Applies the loss model to a finite stream.
pub fn apply_loss<T: Real>(model: &PacketLossModel, xs: &[DVector<T>]) -> Vec<DVector<T>> {
    let mut channel = LossChannel::new(model.p, model.seed);
    xs.iter().map(|x| channel.apply(x)).collect()
}

/// The control perturbation caused by delayed measurements at controller `ℓ`:
/// `β_ℓ = Σ_{i≠ℓ} K_{ℓ,i} (x̃_i − x_i)`, so the applied input satisfies
/// `u(delayed) = u(undelayed) − β_ℓ` for `u = −K x̃`.
pub fn delay_perturbation<T: Real>(
    k: &DMatrix<T>,
    controller: usize,
    view: &DVector<T>,
    actual: &DVector<T>,
    n_sg: usize,
) -> T {
    let mut beta = T::zero();
    for i in 0..n_sg {
        if controller < n_sg && controller == i {
            continue;
        }
        for c in 4 * i..4 * i + 4 {
            beta += k[(controller, c)] * (view[c] - actual[c]);
        }
    }
    beta
}

/// On-disk communication configuration.
///
/// `areas` assigns every controller node (generators first, then converters)
/// to an area; `area_adjacency` lists which distinct areas may exchange
/// measurements (absent means all); `edges` force individual links after the
/// area rule.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CommConfig {
    pub areas: Vec<usize>,
    #[serde(default)]
    pub area_adjacency: Option<Vec<(usize, usize)>>,
    #[serde(default)]
    pub edges: Vec<EdgeOverride>,
    pub max_delay_s: f64,
    #[serde(default)]
    pub loss_p: f64,
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct EdgeOverride {
    pub sg: usize,
    pub node: usize,
    pub link: bool,
}

impl CommConfig {
    pub fn from_json(text: &str) -> Result<Self, CommsError> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn to_json(&self) -> Result<String, CommsError> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn build_graph(&self, n_sg: usize, n_vsc: usize) -> Result<CommGraph, CommsError> {
        if self.areas.len() != n_sg + n_vsc {
            return Err(CommsError::Validation(format!(
                "areas lists {} nodes but the system has {}",
                self.areas.len(),
                n_sg + n_vsc
            )));
        }
        let sg_areas = &self.areas[..n_sg];
        let vsc_areas = &self.areas[n_sg..];
        let mut graph = CommGraph::from_areas(sg_areas, vsc_areas, self.area_adjacency.as_deref());
        for e in &self.edges {
            graph.set_link(e.node, e.sg, e.link)?;
        }
        Ok(graph)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn complete_graph_mask_is_full() {
        let graph = CommGraph::complete(3, 2);
        let mask = mask_from_graph(&graph).unwrap();
        assert_eq!(mask.n_active(), 4 * 3 * (3 + 2));
        assert!(mask.allowed(4, 11));
    }

    #[test]
    fn empty_graph_keeps_only_local_blocks() {
        let graph = CommGraph::local_only(3, 1);
        let mask = mask_from_graph(&graph).unwrap();
        assert_eq!(mask.n_active(), 4 * 3);
        for l in 0..4 {
            for i in 0..3 {
                let expect = l == i;
                assert_eq!(mask.allowed(l, 4 * i), expect, "block ({l},{i})");
            }
        }
    }

    #[test]
    fn two_area_chain_links_only_adjacent_areas() {
        // Areas 0-1 adjacent, 1-2 adjacent, 0-2 not.
        let sg_areas = [0, 1, 2];
        let vsc_areas = [1];
        let graph = CommGraph::from_areas(&sg_areas, &vsc_areas, Some(&[(0, 1), (1, 2)]));
        assert!(graph.has_link(0, 1)); // area 0 controller reads area 1 SG
        assert!(!graph.has_link(0, 2)); // area 0 cannot reach area 2
        assert!(graph.has_link(2, 1));
        assert!(graph.has_link(3, 0)); // VSC in area 1 reads areas 0,1,2
        assert!(graph.has_link(3, 2));
        assert!(graph.has_link(0, 0)); // local always
    }

    #[test]
    fn mask_blocks_are_block_constant() {
        let graph = CommGraph::from_areas(&[0, 1], &[0], Some(&[]));
        let mask = mask_from_graph(&graph).unwrap();
        for l in 0..mask.rows() {
            for i in 0..2 {
                let first = mask.allowed(l, 4 * i);
                for k in 1..4 {
                    assert_eq!(mask.allowed(l, 4 * i + k), first);
                }
            }
        }
    }

    #[test]
    fn cutting_a_local_link_is_refused() {
        let mut graph = CommGraph::complete(2, 0);
        assert!(matches!(
            graph.set_link(1, 1, false),
            Err(CommsError::LocalLinkRequired(1))
        ));
        graph.set_link(1, 0, false).unwrap();
        assert!(!graph.has_link(1, 0));
    }

    #[test]
    fn delay_sampling_respects_bounds_and_seed() {
        let zero = sample_delays(5, 0.0, 0.01, 7);
        assert!(zero.is_zero());

        let p = sample_delays(200, 0.10, 0.01, 7);
        assert!(p.steps.iter().all(|&h| h <= 10));
        assert!(p.steps.iter().any(|&h| h >= 8), "upper range should be hit");
        assert_eq!(p, sample_delays(200, 0.10, 0.01, 7));
        assert_ne!(p, sample_delays(200, 0.10, 0.01, 8));
    }

    #[test]
    fn delay_bound_is_monotone_in_the_cap() {
        for seed in 0..20 {
            let small = sample_delays(50, 0.02, 0.01, seed);
            let large = sample_delays(50, 0.10, 0.01, seed);
            for (s, l) in small.steps.iter().zip(&large.steps) {
                assert!(l >= s, "seed {seed}: {l} < {s}");
            }
        }
    }

    fn ramp_states(n_sg: usize, horizon: usize) -> Vec<DVector<f64>> {
        (0..=horizon)
            .map(|t| DVector::from_fn(4 * n_sg, |r, _| t as f64 * (r + 1) as f64))
            .collect()
    }

    #[test]
    fn zero_delay_view_is_the_current_state() {
        let states = ramp_states(2, 5);
        let profile = DelayProfile::zero(2);
        for t in 0..=5 {
            for l in 0..3 {
                assert_eq!(delayed_view(&states, &profile, l, 2, t), states[t]);
            }
        }
    }

    #[test]
    fn constant_trajectory_is_delay_invariant() {
        let states: Vec<DVector<f64>> = (0..6).map(|_| DVector::from_element(8, 3.5)).collect();
        let profile = DelayProfile {
            steps: vec![2, 2],
            max_delay_s: 0.02,
            seed: 0,
        };
        assert_eq!(delayed_view(&states, &profile, 1, 2, 5), states[5]);
    }

    #[test]
    fn ramp_delay_reads_the_past_and_local_stays_current() {
        let states = ramp_states(2, 6);
        let profile = DelayProfile {
            steps: vec![2, 2],
            max_delay_s: 0.02,
            seed: 0,
        };
        let t = 5;
        let view = delayed_view(&states, &profile, 0, 2, t);
        // Local machine 0 current, remote machine 1 two steps back.
        for k in 0..4 {
            assert_eq!(view[k], states[t][k]);
            assert_eq!(view[4 + k], states[t - 2][4 + k]);
        }
        // A converter controller sees everything delayed.
        let vsc_view = delayed_view(&states, &profile, 2, 2, t);
        for k in 0..8 {
            assert_eq!(vsc_view[k], states[t - 2][k]);
        }
        // Before enough history exists, the initial state fills in.
        let early = delayed_view(&states, &profile, 2, 2, 1);
        for k in 0..8 {
            assert_eq!(early[k], states[0][k]);
        }
    }

    #[test]
    fn loss_edge_probabilities() {
        let xs = ramp_states(1, 20);
        let clean = apply_loss(&PacketLossModel { p: 0.0, seed: 3, per_link: false }, &xs);
        assert_eq!(clean, xs);
        let blocked = apply_loss(&PacketLossModel { p: 1.0, seed: 3, per_link: false }, &xs);
        for x in &blocked {
            assert_eq!(x, &xs[0]);
        }
    }

    #[test]
    fn loss_holds_most_recent_received() {
        // Replay the channel's Bernoulli stream and verify the hold-last
        // recurrence sample by sample.
        let xs = ramp_states(1, 50);
        let model = PacketLossModel { p: 0.5, seed: 9, per_link: false };
        let out = apply_loss(&model, &xs);
        let mut rng = ChaCha8Rng::seed_from_u64(util::mix(9, util::stream::LOSS));
        let mut held = xs[0].clone();
        for (t, x) in xs.iter().enumerate() {
            let lost = rng.gen::<f64>() < 0.5;
            if t == 0 {
                held = x.clone();
            } else if !lost {
                held.copy_from(x);
            }
            assert_eq!(out[t], held, "step {t}");
        }
    }

    #[test]
    fn loss_rate_matches_probability() {
        let xs: Vec<DVector<f64>> = (0..100_000)
            .map(|t| DVector::from_element(1, t as f64))
            .collect();
        let out = apply_loss(&PacketLossModel { p: 0.05, seed: 2, per_link: false }, &xs);
        let held = out
            .iter()
            .zip(&xs)
            .filter(|(y, x)| y != x)
            .count();
        let rate = held as f64 / xs.len() as f64;
        assert!((rate - 0.05).abs() < 0.005, "held fraction {rate}");
    }

    #[test]
    fn loss_coupling_is_monotone_in_p() {
        // With a shared seed, the loss set at smaller p is a subset of the
        // loss set at larger p.
        let n = 500;
        let draws = |p: f64| -> Vec<bool> {
            let mut rng = ChaCha8Rng::seed_from_u64(util::mix(4, util::stream::LOSS));
            (0..n).map(|_| rng.gen::<f64>() < p).collect()
        };
        let a = draws(0.025);
        let b = draws(0.10);
        for (x, y) in a.iter().zip(&b) {
            assert!(!x | y);
        }
    }

    #[test]
    fn comm_config_json_round_trip_and_graph() {
        let cfg = CommConfig {
            areas: vec![0, 0, 1, 1, 0, 1],
            area_adjacency: Some(vec![(0, 1)]),
            edges: vec![EdgeOverride { sg: 0, node: 3, link: false }],
            max_delay_s: 0.10,
            loss_p: 0.05,
            seed: 11,
        };
        let text = cfg.to_json().unwrap();
        let back = CommConfig::from_json(&text).unwrap();
        let graph = back.build_graph(4, 2).unwrap();
        assert!(!graph.has_link(3, 0), "override must cut the link");
        assert!(graph.has_link(3, 3), "local link survives");
        assert!(graph.has_link(4, 2), "adjacent areas exchange data");
    }
}
