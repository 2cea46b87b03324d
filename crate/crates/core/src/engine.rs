//! Event-driven simulation of the biased voter and Komarova dynamics with
//! two mutation stages.
//!
//! Type-1 cells live in a dense `Vec<Cell>`; a slot index maps site keys to
//! positions (dense array on the torus, hash map on the unbounded lattice).
//! Every ordered discordant pair `(x, y)` with `x` type 1 and `y` type 0 is
//! stored once as `(slot of x, direction to y)` so that a uniform flip can be
//! drawn in O(1) and updated in O(2d).
//!
//! Rates follow the per-site voter clock: a type-0 site flips up at rate
//! `lambda * n1(y) / 2d`, a type-1 site flips down at rate `n0(x) / 2d`.

use rand::Rng;
use rand_distr::Exp1;
use rustc_hash::FxHashMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lattice::{Geometry, LatticeError, Site};
pub use crate::replica::{par_replicas, replica_rng};
use crate::stats;

const NONE: u32 = u32::MAX;
/// Events between full rebuild checks of the pair index in debug builds.
const CHECK_EVERY: u64 = 100_000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EngineError {
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error(transparent)]
    Lattice(#[from] LatticeError),
    #[error("event budget of {budget} exhausted at t = {time:e} with {size} type-1 cells")]
    EventBudget { budget: u64, time: f64, size: usize },
    #[error("invariant violated: {0}")]
    Invariant(String),
}

fn invalid(msg: impl Into<String>) -> EngineError {
    EngineError::InvalidParams(msg.into())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Dynamics {
    /// Type-1 cells give birth at rate `lambda`, type-0 at rate 1, onto a uniform neighbour.
    BiasedVoter,
    /// Cells die at rate 1 and are replaced by a fitness-weighted neighbour.
    Komarova,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StopRule {
    /// Hard cap on the number of type-1 cells in single-family runs.
    pub size_cap: u64,
    /// Single-family runs stop once `u2 * W` exceeds this.
    pub exponent_cap: f64,
    /// Maximum number of events in one run.
    pub event_budget: u64,
}

impl Default for StopRule {
    fn default() -> Self {
        StopRule {
            size_cap: 10_000_000,
            exponent_cap: 20.0,
            event_budget: 10_000_000_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimParams {
    pub geometry: Geometry,
    pub lambda: f64,
    pub u1: f64,
    pub u2: f64,
    pub dynamics: Dynamics,
    pub seed: u64,
    #[serde(default)]
    pub stop_rule: StopRule,
}

impl SimParams {
    /// Single family on the unbounded lattice (`u1 = 0`).
    pub fn family(dim: usize, lambda: f64, u2: f64) -> Result<Self, EngineError> {
        let p = SimParams {
            geometry: Geometry::unbounded(dim)?,
            lambda,
            u1: 0.0,
            u2,
            dynamics: Dynamics::BiasedVoter,
            seed: 0,
            stop_rule: StopRule::default(),
        };
        p.validate()?;
        Ok(p)
    }

    pub fn torus(dim: usize, side: u64, lambda: f64, u1: f64, u2: f64) -> Result<Self, EngineError> {
        let p = SimParams {
            geometry: Geometry::torus(dim, side)?,
            lambda,
            u1,
            u2,
            dynamics: Dynamics::BiasedVoter,
            seed: 0,
            stop_rule: StopRule::default(),
        };
        p.validate()?;
        Ok(p)
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_dynamics(mut self, dynamics: Dynamics) -> Self {
        self.dynamics = dynamics;
        self
    }

    pub fn validate(&self) -> Result<(), EngineError> {
        if !(self.lambda > 0.0) || !self.lambda.is_finite() {
            return Err(invalid(format!("lambda must be positive, got {}", self.lambda)));
        }
        for (name, u) in [("u1", self.u1), ("u2", self.u2)] {
            if !(0.0..=1.0).contains(&u) {
                return Err(invalid(format!("{name} must lie in [0, 1], got {u}")));
            }
        }
        if !self.geometry.is_torus() && self.u1 != 0.0 {
            return Err(invalid("u1 must be 0 on the unbounded lattice"));
        }
        let s = &self.stop_rule;
        if s.size_cap == 0 || !(s.exponent_cap > 0.0) || s.event_budget == 0 {
            return Err(invalid("stop rule caps must be positive"));
        }
        Ok(())
    }
}

/// Lineage label carried by every type-1 cell.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Label {
    pub family: u64,
    /// Time of the 0 -> 1 mutation that founded the family.
    pub origin: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Event {
    FlipUp,
    FlipDown,
    /// A Komarova resampling that left the site's type unchanged.
    NoOp,
    Mutation01 { family: u64 },
    Mutation12 { label: Label },
    /// Nothing can happen any more.
    Absorbed,
}

/// Map from site key to slot in the cell vector.
pub trait SlotIndex: Send + Sized {
    fn for_geometry(g: &Geometry) -> Result<Self, EngineError>;
    fn get(&self, key: u64) -> Option<u32>;
    fn set(&mut self, key: u64, slot: u32);
    fn remove(&mut self, key: u64);
}

/// One entry per torus site.
pub struct DenseIndex(Vec<u32>);

impl SlotIndex for DenseIndex {
    fn for_geometry(g: &Geometry) -> Result<Self, EngineError> {
        let n = g
            .site_count()
            .ok_or_else(|| invalid("dense index needs a torus"))?;
        Ok(DenseIndex(vec![NONE; n as usize]))
    }

    #[inline]
    fn get(&self, key: u64) -> Option<u32> {
        let s = self.0[key as usize];
        (s != NONE).then_some(s)
    }

    #[inline]
    fn set(&mut self, key: u64, slot: u32) {
        self.0[key as usize] = slot;
    }

    #[inline]
    fn remove(&mut self, key: u64) {
        self.0[key as usize] = NONE;
    }
}

/// Sparse index for the unbounded lattice.
pub struct HashIndex(FxHashMap<u64, u32>);

impl SlotIndex for HashIndex {
    fn for_geometry(_: &Geometry) -> Result<Self, EngineError> {
        Ok(HashIndex(FxHashMap::default()))
    }

    #[inline]
    fn get(&self, key: u64) -> Option<u32> {
        self.0.get(&key).copied()
    }

    #[inline]
    fn set(&mut self, key: u64, slot: u32) {
        self.0.insert(key, slot);
    }

    #[inline]
    fn remove(&mut self, key: u64) {
        self.0.remove(&key);
    }
}

/// Dense array over the box `|x_i| < radius` around the origin of the
/// unbounded lattice, with a hash map for sites outside it.
pub struct WindowIndex {
    dense: Vec<u32>,
    overflow: FxHashMap<u64, u32>,
    dim: usize,
    width: u32,
    mask: u64,
    /// `coordinate_bound - radius`: field value of the window's lowest row.
    low: u64,
    side: u64,
}

impl WindowIndex {
    fn radius(dim: usize) -> u64 {
        match dim {
            1 => 1 << 15,
            2 => 256,
            _ => 32,
        }
    }

    #[inline(always)]
    fn pos(&self, key: u64) -> Option<usize> {
        let (w, m, low, side) = (self.width, self.mask, self.low, self.side);
        let c0 = (key & m).wrapping_sub(low);
        if c0 >= side {
            return None;
        }
        let pos = match self.dim {
            1 => c0,
            2 => {
                let c1 = ((key >> w) & m).wrapping_sub(low);
                if c1 >= side {
                    return None;
                }
                c1 * side + c0
            }
            _ => {
                let c1 = ((key >> w) & m).wrapping_sub(low);
                let c2 = ((key >> (2 * w)) & m).wrapping_sub(low);
                if c1 >= side || c2 >= side {
                    return None;
                }
                (c2 * side + c1) * side + c0
            }
        };
        Some(pos as usize)
    }
}

impl SlotIndex for WindowIndex {
    fn for_geometry(g: &Geometry) -> Result<Self, EngineError> {
        if g.is_torus() {
            return Err(invalid("window index is for the unbounded lattice"));
        }
        let dim = g.dim();
        let r = Self::radius(dim);
        let side = 2 * r;
        let width = g.key_field_width();
        Ok(WindowIndex {
            dense: vec![NONE; side.pow(dim as u32) as usize],
            overflow: FxHashMap::default(),
            dim,
            width,
            mask: (1u64 << width) - 1,
            low: g.coordinate_bound() as u64 - r,
            side,
        })
    }

    #[inline]
    fn get(&self, key: u64) -> Option<u32> {
        match self.pos(key) {
            Some(p) => {
                let s = self.dense[p];
                (s != NONE).then_some(s)
            }
            None => self.overflow.get(&key).copied(),
        }
    }

    #[inline]
    fn set(&mut self, key: u64, slot: u32) {
        match self.pos(key) {
            Some(p) => self.dense[p] = slot,
            None => {
                self.overflow.insert(key, slot);
            }
        }
    }

    #[inline]
    fn remove(&mut self, key: u64) {
        match self.pos(key) {
            Some(p) => self.dense[p] = NONE,
            None => {
                self.overflow.remove(&key);
            }
        }
    }
}

thread_local! {
    /// Window buffers kept between single-family runs on the same thread.
    static WINDOWS: std::cell::RefCell<Vec<WindowIndex>> = const { std::cell::RefCell::new(Vec::new()) };
}

#[derive(Clone, Copy)]
struct Cell {
    key: u64,
    label: Label,
    /// Position in `pairs` of the pair towards each direction, or `NONE`.
    pair_pos: [u32; 6],
}

/// Lattice state plus the event loop.
pub struct Simulation<I: SlotIndex> {
    geometry: Geometry,
    lambda: f64,
    u1: f64,
    u2: f64,
    dynamics: Dynamics,
    degree: usize,
    n_sites: u64,
    cells: Vec<Cell>,
    index: I,
    pairs: Vec<(u32, u8)>,
    time: f64,
    man_hours: f64,
    events: u64,
    next_family: u64,
    mutation12: bool,
    /// Doob conditioning on reaching this size before 0.
    target: Option<u64>,
}

pub type FamilySim = Simulation<WindowIndex>;
pub type TorusSim = Simulation<DenseIndex>;

impl<I: SlotIndex> Simulation<I> {
    /// Empty lattice (all type 0) at time 0.
    pub fn new(params: &SimParams) -> Result<Self, EngineError> {
        let index = I::for_geometry(&params.geometry)?;
        Self::with_index(params, index)
    }

    /// Empty lattice using an index that must contain no entries.
    fn with_index(params: &SimParams, index: I) -> Result<Self, EngineError> {
        params.validate()?;
        let g = params.geometry.clone();
        Ok(Simulation {
            degree: g.degree(),
            n_sites: g.site_count().unwrap_or(0),
            index,
            geometry: g,
            lambda: params.lambda,
            u1: params.u1,
            u2: params.u2,
            dynamics: params.dynamics,
            cells: Vec::new(),
            pairs: Vec::new(),
            time: 0.0,
            man_hours: 0.0,
            events: 0,
            next_family: 0,
            mutation12: params.u2 > 0.0,
            target: None,
        })
    }

    /// Lattice with the given sites type 1, all in family 0 founded at time 0.
    pub fn with_sites(params: &SimParams, sites: &[Site]) -> Result<Self, EngineError> {
        let mut sim = Self::new(params)?;
        let label = Label { family: 0, origin: 0.0 };
        for s in sites {
            let key = sim.geometry.encode(s)?;
            if sim.index.get(key).is_some() {
                return Err(invalid(format!("site {s:?} listed twice")));
            }
            sim.occupy(key, label)?;
        }
        sim.next_family = 1;
        Ok(sim)
    }

    /// A single type-1 cell at the origin.
    pub fn single(params: &SimParams) -> Result<Self, EngineError> {
        Self::with_sites(params, &[Site::origin(params.geometry.dim())])
    }

    fn single_with_index(params: &SimParams, index: I) -> Result<Self, EngineError> {
        let mut sim = Self::with_index(params, index)?;
        let key = sim.geometry.encode(&Site::origin(params.geometry.dim()))?;
        sim.occupy(key, Label { family: 0, origin: 0.0 })?;
        sim.next_family = 1;
        Ok(sim)
    }

    /// Empty the index and hand it back for reuse.
    fn into_index(mut self) -> I {
        for c in &self.cells {
            self.index.remove(c.key);
        }
        self.index
    }

    /// Turn the 1 -> 2 channel on or off (off when estimating through man-hours).
    pub fn set_mutation12(&mut self, on: bool) {
        self.mutation12 = on && self.u2 > 0.0;
    }

    /// Run conditioned on reaching size `target` before extinction
    /// (biased voter only; the 1 -> 2 channel is switched off).
    pub fn condition_on_reaching(&mut self, target: Option<u64>) -> Result<(), EngineError> {
        if target.is_some() {
            if self.dynamics != Dynamics::BiasedVoter {
                return Err(invalid("conditioning is implemented for the biased voter only"));
            }
            if self.u1 != 0.0 {
                return Err(invalid("conditioning needs u1 = 0"));
            }
            self.mutation12 = false;
        }
        self.target = target;
        Ok(())
    }

    pub fn time(&self) -> f64 {
        self.time
    }

    /// `W = int_0^t n1(s) ds`.
    pub fn man_hours(&self) -> f64 {
        self.man_hours
    }

    pub fn size(&self) -> usize {
        self.cells.len()
    }

    /// Number of unordered discordant nearest-neighbour pairs.
    pub fn boundary(&self) -> usize {
        self.pairs.len()
    }

    pub fn events(&self) -> u64 {
        self.events
    }

    /// Number of 0 -> 1 mutations so far (plus one if seeded with sites).
    pub fn families_started(&self) -> u64 {
        self.next_family
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geometry
    }

    pub fn type1_sites(&self) -> Result<Vec<Site>, EngineError> {
        self.cells
            .iter()
            .map(|c| self.geometry.decode(c.key).map_err(EngineError::from))
            .collect()
    }

    pub fn label_at(&self, site: &Site) -> Result<Option<Label>, EngineError> {
        let key = self.geometry.encode(site)?;
        Ok(self.index.get(key).map(|s| self.cells[s as usize].label))
    }

    #[inline]
    fn add_pair(&mut self, slot: u32, dir: usize) {
        let pos = self.pairs.len() as u32;
        self.pairs.push((slot, dir as u8));
        self.cells[slot as usize].pair_pos[dir] = pos;
    }

    #[inline]
    fn remove_pair(&mut self, slot: u32, dir: usize) {
        let pos = self.cells[slot as usize].pair_pos[dir];
        debug_assert_ne!(pos, NONE);
        self.cells[slot as usize].pair_pos[dir] = NONE;
        let last = self.pairs.pop().expect("pair list out of sync");
        if (pos as usize) < self.pairs.len() {
            self.pairs[pos as usize] = last;
            self.cells[last.0 as usize].pair_pos[last.1 as usize] = pos;
        }
    }

    #[inline]
    fn neighbor_keys(&self, key: u64) -> Result<[u64; 6], EngineError> {
        let mut nb = [0u64; 6];
        for (dir, k) in nb.iter_mut().enumerate().take(self.degree) {
            *k = self.geometry.neighbor_key(key, dir)?;
        }
        Ok(nb)
    }

    /// Make the type-0 site `key` type 1.
    #[inline]
    fn occupy(&mut self, key: u64, label: Label) -> Result<(), EngineError> {
        let nb = self.neighbor_keys(key)?;
        let slot = self.cells.len() as u32;
        self.cells.push(Cell { key, label, pair_pos: [NONE; 6] });
        self.index.set(key, slot);
        for (dir, &z) in nb.iter().enumerate().take(self.degree) {
            match self.index.get(z) {
                Some(sz) => self.remove_pair(sz, Geometry::opposite(dir)),
                None => self.add_pair(slot, dir),
            }
        }
        Ok(())
    }

    /// Make the type-1 cell in `slot` type 0.
    #[inline]
    fn vacate(&mut self, slot: u32) -> Result<(), EngineError> {
        let key = self.cells[slot as usize].key;
        let nb = self.neighbor_keys(key)?;
        for (dir, &z) in nb.iter().enumerate().take(self.degree) {
            match self.index.get(z) {
                Some(sz) => self.add_pair(sz, Geometry::opposite(dir)),
                None => self.remove_pair(slot, dir),
            }
        }
        self.index.remove(key);
        let last = self.cells.len() as u32 - 1;
        self.cells.swap_remove(slot as usize);
        if slot != last {
            let moved = self.cells[slot as usize];
            self.index.set(moved.key, slot);
            for pos in moved.pair_pos.iter().take(self.degree) {
                if *pos != NONE {
                    self.pairs[*pos as usize].0 = slot;
                }
            }
        }
        Ok(())
    }

    /// Type-1 neighbours of `key`.
    #[inline]
    fn type1_neighbors(&self, key: u64) -> Result<usize, EngineError> {
        let nb = self.neighbor_keys(key)?;
        Ok(nb[..self.degree].iter().filter(|&&z| self.index.get(z).is_some()).count())
    }

    /// Doob factor `h(n')/h(n)` for the conditioned size chain.
    #[inline]
    fn doob_ratio(&self, from: usize, to: usize) -> f64 {
        if self.lambda == 1.0 {
            return to as f64 / from as f64;
        }
        let ln_theta = -self.lambda.ln();
        (to as f64 * ln_theta).exp_m1() / (from as f64 * ln_theta).exp_m1()
    }

    /// Advance by one event of the continuous-time chain.
    ///
    /// Channels are selected by a single uniform draw against cumulative
    /// rates in the order flip-up, flip-down, 0 -> 1, 1 -> 2.
    pub fn step<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Result<Event, EngineError> {
        let n1 = self.cells.len();
        let b = self.pairs.len() as f64;
        let two_d = self.degree as f64;
        let komarova_bound = self.lambda.min(1.0);
        let (mut up, mut down) = match self.dynamics {
            Dynamics::BiasedVoter => (self.lambda * b / two_d, b / two_d),
            // Thinned proposals: per pair lambda/(2d m) and 1/(2d m), m = min(lambda, 1).
            Dynamics::Komarova => (
                self.lambda * b / (two_d * komarova_bound),
                b / (two_d * komarova_bound),
            ),
        };
        if self.target.is_some() && n1 > 0 {
            up *= self.doob_ratio(n1, n1 + 1);
            down *= self.doob_ratio(n1, n1 - 1);
        }
        let m01 = if self.u1 > 0.0 { self.u1 * (self.n_sites - n1 as u64) as f64 } else { 0.0 };
        let m12 = if self.mutation12 { self.u2 * n1 as f64 } else { 0.0 };
        let total = up + down + m01 + m12;
        if !(total > 0.0) {
            return Ok(Event::Absorbed);
        }
        let hold: f64 = rng.sample::<f64, _>(Exp1) / total;
        self.man_hours += n1 as f64 * hold;
        self.time += hold;
        self.events += 1;
        if cfg!(debug_assertions) && self.events % CHECK_EVERY == 0 {
            self.check_consistency()?;
        }

        let r = rng.gen::<f64>() * total;
        let event = if r < up + down {
            let (slot, dir) = self.pairs[rng.gen_range(0..self.pairs.len())];
            let slot_key = self.cells[slot as usize].key;
            if r < up {
                let y = self.geometry.neighbor_key(slot_key, dir as usize)?;
                if self.dynamics == Dynamics::Komarova {
                    let k1 = self.type1_neighbors(y)? as f64;
                    let accept = two_d * komarova_bound / (self.lambda * k1 + (two_d - k1));
                    if rng.gen::<f64>() >= accept {
                        return Ok(Event::NoOp);
                    }
                }
                let label = self.cells[slot as usize].label;
                self.occupy(y, label)?;
                Event::FlipUp
            } else {
                if self.dynamics == Dynamics::Komarova {
                    let cell = &self.cells[slot as usize];
                    let k0 = cell.pair_pos[..self.degree].iter().filter(|&&p| p != NONE).count() as f64;
                    let accept = two_d * komarova_bound / (self.lambda * (two_d - k0) + k0);
                    if rng.gen::<f64>() >= accept {
                        return Ok(Event::NoOp);
                    }
                }
                self.vacate(slot)?;
                Event::FlipDown
            }
        } else if r < up + down + m01 {
            let key = loop {
                let k = rng.gen_range(0..self.n_sites);
                if self.index.get(k).is_none() {
                    break k;
                }
            };
            let family = self.next_family;
            self.next_family += 1;
            self.occupy(key, Label { family, origin: self.time })?;
            Event::Mutation01 { family }
        } else {
            let c = self.cells[rng.gen_range(0..n1)];
            Event::Mutation12 { label: c.label }
        };
        Ok(event)
    }

    /// Compare the incremental pair index with a from-scratch rebuild.
    pub fn check_consistency(&self) -> Result<(), EngineError> {
        let bad = |m: String| Err(EngineError::Invariant(m));
        for (slot, c) in self.cells.iter().enumerate() {
            if self.index.get(c.key) != Some(slot as u32) {
                return bad(format!("index entry for slot {slot} is stale"));
            }
            let nb = self.neighbor_keys(c.key)?;
            for (dir, &z) in nb.iter().enumerate().take(self.degree) {
                let discordant = self.index.get(z).is_none();
                let pos = c.pair_pos[dir];
                if discordant != (pos != NONE) {
                    return bad(format!("pair ({slot}, {dir}) presence does not match lattice"));
                }
                if pos != NONE && self.pairs.get(pos as usize) != Some(&(slot as u32, dir as u8)) {
                    return bad(format!("pair ({slot}, {dir}) stored at wrong position"));
                }
            }
        }
        let expected: usize = self
            .cells
            .iter()
            .map(|c| c.pair_pos[..self.degree].iter().filter(|&&p| p != NONE).count())
            .sum();
        if expected != self.pairs.len() {
            return bad(format!("{} pairs stored, {} implied", self.pairs.len(), expected));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FamilyCaps {
    pub size_cap: u64,
    /// Stop once `W` reaches this.
    pub man_hours_cap: f64,
    /// Sizes whose first hitting times are recorded.
    pub levels: Vec<u64>,
    /// Run the 1 -> 2 channel and stop at the first type 2.
    pub stop_at_type2: bool,
    /// Stop on first reaching this size.
    pub stop_at_size: Option<u64>,
    /// Condition on reaching `stop_at_size` (Doob transform).
    pub conditioned: bool,
    pub event_budget: u64,
}

impl FamilyCaps {
    /// Caps implied by the stop rule: `u2 W <= exponent_cap` and the size cap.
    pub fn from_params(p: &SimParams) -> Self {
        FamilyCaps {
            size_cap: p.stop_rule.size_cap,
            man_hours_cap: if p.u2 > 0.0 {
                p.stop_rule.exponent_cap / p.u2
            } else {
                f64::INFINITY
            },
            levels: Vec::new(),
            stop_at_type2: true,
            stop_at_size: None,
            conditioned: false,
            event_budget: p.stop_rule.event_budget,
        }
    }

    /// Path-only run for the smoothed estimator: no 1 -> 2 channel.
    pub fn smoothed(p: &SimParams) -> Self {
        FamilyCaps {
            stop_at_type2: false,
            ..Self::from_params(p)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fate {
    Extinct,
    Type2Born,
    SizeCapHit,
    ManHourCapHit,
    TargetReached,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LevelHit {
    pub k: u64,
    pub time: f64,
    /// Discordant pairs at the hitting time.
    pub boundary: u64,
    pub man_hours: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FamilyOutcome {
    pub fate: Fate,
    pub man_hours: f64,
    pub max_size: u64,
    pub t_end: f64,
    pub up_jumps: u64,
    pub down_jumps: u64,
    pub first_hit_times: Vec<LevelHit>,
}

/// Run `f` on a single-cell family simulation whose window buffer is
/// borrowed from a per-thread pool.
fn with_family_sim<T>(
    params: &SimParams,
    f: impl FnOnce(&mut FamilySim) -> Result<T, EngineError>,
) -> Result<T, EngineError> {
    let dim = params.geometry.dim();
    let pooled = WINDOWS.with(|w| {
        let mut w = w.borrow_mut();
        let i = w.iter().position(|x| x.dim == dim);
        i.map(|i| w.swap_remove(i))
    });
    let index = match pooled {
        Some(ix) => ix,
        None => WindowIndex::for_geometry(&params.geometry)?,
    };
    let mut sim = FamilySim::single_with_index(params, index)?;
    let out = f(&mut sim);
    let index = sim.into_index();
    WINDOWS.with(|w| w.borrow_mut().push(index));
    out
}

/// Follow one family started from a single type-1 cell at the origin of the
/// unbounded lattice.
pub fn run_family<R: Rng + ?Sized>(
    params: &SimParams,
    caps: &FamilyCaps,
    rng: &mut R,
) -> Result<FamilyOutcome, EngineError> {
    if params.geometry.is_torus() {
        return Err(invalid("single-family runs use the unbounded lattice"));
    }
    with_family_sim(params, |sim| follow_family(sim, caps, rng))
}

fn follow_family<R: Rng + ?Sized>(
    sim: &mut FamilySim,
    caps: &FamilyCaps,
    rng: &mut R,
) -> Result<FamilyOutcome, EngineError> {
    sim.set_mutation12(caps.stop_at_type2);
    if caps.conditioned {
        let t = caps
            .stop_at_size
            .ok_or_else(|| invalid("conditioned runs need a target size"))?;
        sim.condition_on_reaching(Some(t))?;
    }
    let mut levels = caps.levels.clone();
    levels.sort_unstable();
    levels.dedup();
    levels.retain(|&k| k >= 1);
    let mut next = 0;
    let mut hits = Vec::with_capacity(levels.len());
    let record = |sim: &FamilySim, next: &mut usize, hits: &mut Vec<LevelHit>| {
        let size = sim.size() as u64;
        while *next < levels.len() && levels[*next] <= size {
            hits.push(LevelHit {
                k: levels[*next],
                time: sim.time(),
                boundary: sim.boundary() as u64,
                man_hours: sim.man_hours(),
            });
            *next += 1;
        }
    };
    record(sim, &mut next, &mut hits);
    let (mut up, mut down, mut max_size) = (0u64, 0u64, 1u64);
    let fate = loop {
        let size = sim.size() as u64;
        if size == 0 {
            break Fate::Extinct;
        }
        if caps.stop_at_size.is_some_and(|t| size >= t) {
            break Fate::TargetReached;
        }
        if size > caps.size_cap {
            break Fate::SizeCapHit;
        }
        if sim.man_hours() >= caps.man_hours_cap {
            break Fate::ManHourCapHit;
        }
        if sim.events() >= caps.event_budget {
            return Err(EngineError::EventBudget {
                budget: caps.event_budget,
                time: sim.time(),
                size: sim.size(),
            });
        }
        match sim.step(rng)? {
            Event::FlipUp => {
                up += 1;
                max_size = max_size.max(sim.size() as u64);
                record(sim, &mut next, &mut hits);
            }
            Event::FlipDown => down += 1,
            Event::NoOp => {}
            Event::Mutation12 { .. } => break Fate::Type2Born,
            Event::Mutation01 { .. } | Event::Absorbed => {
                return Err(EngineError::Invariant("unexpected event in a single-family run".into()))
            }
        }
    };
    Ok(FamilyOutcome {
        fate,
        man_hours: sim.man_hours(),
        max_size,
        t_end: sim.time(),
        up_jumps: up,
        down_jumps: down,
        first_hit_times: hits,
    })
}

/// Independent families with replica streams derived from `params.seed`.
pub fn family_batch(params: &SimParams, caps: &FamilyCaps, reps: usize) -> Result<Vec<FamilyOutcome>, EngineError> {
    par_replicas(params.seed, reps, |_, rng| run_family(params, caps, rng))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NuEstimate {
    pub u2: f64,
    pub nu_hat: f64,
    pub stderr: f64,
    pub reps: usize,
    pub size_capped: usize,
    pub man_hour_capped: usize,
}

fn mean_and_stderr(xs: &[f64]) -> (f64, f64) {
    match stats::mean_stderr(xs) {
        Ok(v) => v,
        Err(_) => (xs.first().copied().unwrap_or(0.0), f64::NAN),
    }
}

/// `nu_hat = mean(1 - exp(-u2 W))` over independent families.
pub fn estimate_nu(params: &SimParams, caps: &FamilyCaps, reps: usize) -> Result<NuEstimate, EngineError> {
    let mut one = estimate_nu_curve(params, &[params.u2], caps, reps)?;
    Ok(one.remove(0))
}

/// Smoothed estimates for several `u2` from the same families: each family
/// runs once with the man-hour cap of the smallest `u2`.
pub fn estimate_nu_curve(
    params: &SimParams,
    u2s: &[f64],
    caps: &FamilyCaps,
    reps: usize,
) -> Result<Vec<NuEstimate>, EngineError> {
    if reps == 0 {
        return Err(invalid("reps must be at least 1"));
    }
    if u2s.is_empty() || u2s.iter().any(|&u| !(0.0..=1.0).contains(&u)) {
        return Err(invalid("u2 values must lie in [0, 1]"));
    }
    let u_min = u2s.iter().copied().filter(|&u| u > 0.0).fold(f64::INFINITY, f64::min);
    if !u_min.is_finite() {
        // Every family contributes 1 - exp(0) = 0.
        return Ok(u2s
            .iter()
            .map(|&u2| NuEstimate { u2, nu_hat: 0.0, stderr: 0.0, reps, size_capped: 0, man_hour_capped: 0 })
            .collect());
    }
    let outcomes = family_man_hours(params, u_min, caps, reps)?;
    let size_capped = outcomes.iter().filter(|o| o.1 == Fate::SizeCapHit).count();
    Ok(u2s
        .iter()
        .map(|&u2| {
            let xs: Vec<f64> = outcomes.iter().map(|o| -(-u2 * o.0).exp_m1()).collect();
            let (nu_hat, stderr) = mean_and_stderr(&xs);
            let cap = params.stop_rule.exponent_cap / u2;
            NuEstimate {
                u2,
                nu_hat,
                stderr,
                reps,
                size_capped,
                man_hour_capped: outcomes.iter().filter(|o| o.0 >= cap).count(),
            }
        })
        .collect())
}

/// Man-hours and fate of `reps` families run without the 1 -> 2 channel,
/// stopped once `u2_min * W` exceeds the exponent cap.
pub fn family_man_hours(
    params: &SimParams,
    u2_min: f64,
    caps: &FamilyCaps,
    reps: usize,
) -> Result<Vec<(f64, Fate)>, EngineError> {
    if !(u2_min > 0.0) {
        return Err(invalid("man-hour runs need a positive u2"));
    }
    let run_params = SimParams { u2: u2_min, ..params.clone() };
    let caps = FamilyCaps {
        man_hours_cap: caps.man_hours_cap.min(params.stop_rule.exponent_cap / u2_min),
        stop_at_type2: false,
        ..caps.clone()
    };
    par_replicas(params.seed, reps, |_, rng| {
        run_family(&run_params, &caps, rng).map(|o| (o.man_hours, o.fate))
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NuEpsEstimate {
    /// `n eps`, rounded to the nearest size.
    pub target: u64,
    pub nu_eps: f64,
    pub stderr: f64,
    pub reps: usize,
}

/// Tunneling probability of families that first reach `target` cells, with
/// the mutation clock started there: `(1/target) E[1 - exp(-u2 W')]`.
/// Each replica is conditioned to reach `target` and then runs freely.
pub fn estimate_nu_eps(params: &SimParams, target: u64, reps: usize) -> Result<NuEpsEstimate, EngineError> {
    if params.lambda != 1.0 || params.dynamics != Dynamics::BiasedVoter {
        return Err(invalid("the conditioned estimator assumes the neutral biased voter"));
    }
    if !(params.u2 > 0.0) || target == 0 || reps < 2 {
        return Err(invalid("need u2 > 0, target >= 1 and reps >= 2"));
    }
    let w_cap = params.stop_rule.exponent_cap / params.u2;
    let xs = par_replicas(params.seed, reps, |_, rng| with_family_sim(params, |sim| {
        sim.condition_on_reaching(Some(target))?;
        while (sim.size() as u64) < target {
            sim.step(rng)?;
        }
        sim.condition_on_reaching(None)?;
        sim.set_mutation12(false);
        let w0 = sim.man_hours();
        while sim.size() > 0 && sim.man_hours() - w0 < w_cap {
            if sim.size() as u64 > params.stop_rule.size_cap {
                break;
            }
            sim.step(rng)?;
        }
        Ok(-(-params.u2 * (sim.man_hours() - w0)).exp_m1())
    }))?;
    let (m, se) = mean_and_stderr(&xs);
    let t = target as f64;
    Ok(NuEpsEstimate { target, nu_eps: m / t, stderr: se / t, reps })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Tau2Sample {
    pub tau2: f64,
    /// Founding time of the family that produced the first type 2.
    pub rho2: f64,
    /// Number of 0 -> 1 mutations up to `tau2`.
    pub n_families: u64,
}

/// Full torus from all type 0 until the first 1 -> 2 mutation. While no
/// type-1 cell is alive the only channel is 0 -> 1, so the gap is a single
/// exponential(`u1 N`) holding time.
pub fn run_tau2<R: Rng + ?Sized>(params: &SimParams, rng: &mut R) -> Result<Tau2Sample, EngineError> {
    if !params.geometry.is_torus() {
        return Err(invalid("waiting-time runs use the torus"));
    }
    if !(params.u1 > 0.0 && params.u2 > 0.0) {
        return Err(invalid("waiting-time runs need u1 > 0 and u2 > 0"));
    }
    let mut sim = TorusSim::new(params)?;
    loop {
        if sim.events() >= params.stop_rule.event_budget {
            return Err(EngineError::EventBudget {
                budget: params.stop_rule.event_budget,
                time: sim.time(),
                size: sim.size(),
            });
        }
        if let Event::Mutation12 { label } = sim.step(rng)? {
            return Ok(Tau2Sample {
                tau2: sim.time(),
                rho2: label.origin,
                n_families: sim.families_started(),
            });
        }
    }
}

pub fn tau2_batch(params: &SimParams, reps: usize) -> Result<Vec<Tau2Sample>, EngineError> {
    par_replicas(params.seed, reps, |_, rng| run_tau2(params, rng))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundaryRow {
    pub k: u64,
    pub mean: f64,
    pub stderr: f64,
    pub reps: usize,
}

/// Mean number of discordant pairs at the first time the family has `k`
/// cells, over families conditioned to reach the largest requested level.
pub fn boundary_profile(params: &SimParams, levels: &[u64], reps: usize) -> Result<Vec<BoundaryRow>, EngineError> {
    if params.lambda != 1.0 || params.u2 != 0.0 {
        return Err(invalid("boundary profiles need lambda = 1 and u2 = 0"));
    }
    if levels.is_empty() || levels.contains(&0) || reps == 0 {
        return Err(invalid("need positive levels and reps >= 1"));
    }
    let mut levels = levels.to_vec();
    levels.sort_unstable();
    levels.dedup();
    let top = *levels.last().expect("nonempty");
    let caps = FamilyCaps {
        levels: levels.clone(),
        stop_at_type2: false,
        stop_at_size: Some(top),
        conditioned: true,
        size_cap: top,
        ..FamilyCaps::from_params(params)
    };
    let outcomes = par_replicas(params.seed, reps, |_, rng| run_family(params, &caps, rng))?;
    levels
        .iter()
        .enumerate()
        .map(|(i, &k)| {
            let xs: Vec<f64> = outcomes
                .iter()
                .map(|o| {
                    o.first_hit_times
                        .get(i)
                        .map(|h| h.boundary as f64)
                        .ok_or_else(|| EngineError::Invariant(format!("conditioned family missed level {k}")))
                })
                .collect::<Result<_, _>>()?;
            let (mean, stderr) = mean_and_stderr(&xs);
            Ok(BoundaryRow { k, mean, stderr, reps })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BetaEstimate {
    /// Tail-corrected escape probability.
    pub beta: f64,
    pub stderr: f64,
    /// Fraction of walks alive after `walk_steps` steps.
    pub survival: f64,
    /// Fraction alive after `walk_steps / 4` steps.
    pub survival_quarter: f64,
    pub walk_steps: u64,
    pub reps: usize,
}

impl BetaEstimate {
    /// Cutoff extrapolation `2 S(T) - S(T/4)`, which cancels the `T^(-1/2)` term.
    pub fn richardson(&self) -> f64 {
        2.0 * self.survival - self.survival_quarter
    }
}

/// Coefficient of the `T^(-1/2)` late-return tail of the 3-d simple random
/// walk: `P(T < tau_0 < inf) ~ beta^2 * 2 (3 / 2 pi)^(3/2) / sqrt(T)`.
pub fn late_return_coefficient() -> f64 {
    2.0 * (3.0 / (2.0 * std::f64::consts::PI)).powf(1.5)
}

/// Probability that two simple random walks started at neighbouring sites
/// of `Z^3` never meet, via their difference walk from `e1` absorbed at 0.
pub fn estimate_beta(walk_steps: u64, reps: usize, seed: u64) -> Result<BetaEstimate, EngineError> {
    if reps < 2 {
        return Err(invalid("estimate_beta needs at least 2 replicates"));
    }
    if walk_steps < 4 {
        return Err(invalid("estimate_beta needs at least 4 walk steps"));
    }
    let quarter = walk_steps / 4;
    let alive = par_replicas::<_, EngineError, _>(seed, reps, |_, rng| {
        let mut x = [1i64, 0, 0];
        for step in 1..=walk_steps {
            let r = rng.gen_range(0..6usize);
            x[r >> 1] += if r & 1 == 1 { 1 } else { -1 };
            if x == [0, 0, 0] {
                return Ok((step > quarter, false));
            }
        }
        Ok((true, true))
    })?;
    let n = reps as f64;
    let s = alive.iter().filter(|a| a.1).count() as f64 / n;
    let sq = alive.iter().filter(|a| a.0).count() as f64 / n;
    let beta = s - s * s * late_return_coefficient() / (walk_steps as f64).sqrt();
    Ok(BetaEstimate {
        beta,
        stderr: (s * (1.0 - s) / (n - 1.0)).sqrt(),
        survival: s,
        survival_quarter: sq,
        walk_steps,
        reps,
    })
}
