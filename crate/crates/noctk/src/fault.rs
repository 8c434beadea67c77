//! Hybrid fault model: pattern injection, connectivity analysis, and the
//! DBS / DMS reconfiguration state machines with their handshake tokens.
//! The cycle simulator drives the state machines; everything here is
//! deterministic and independently testable.

use crate::topology::{Direction, MeshTopology, Tile, CARDINALS};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::fmt::Write as _;

/// A fault pattern over mesh resources. Dynamic faults (buffer, mux) leave
/// the datapath intact under the hybrid model; link faults kill the whole
/// physical channel.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FaultPattern {
    /// Dead physical channels, named by one directed end.
    pub link_faults: BTreeSet<(Tile, Tile)>,
    /// Faulty input buffers: (router, input port).
    pub buffer_faults: BTreeSet<(Tile, Direction)>,
    /// Faulty crossbar muxes: (router, output port).
    pub mux_faults: BTreeSet<(Tile, Direction)>,
}

impl FaultPattern {
    pub fn total(&self) -> usize {
        self.link_faults.len() + self.buffer_faults.len() + self.mux_faults.len()
    }

    pub fn dynamic(&self) -> usize {
        self.buffer_faults.len() + self.mux_faults.len()
    }

    /// True when the physical channel between two adjacent tiles is dead.
    pub fn channel_dead(&self, a: Tile, b: Tile) -> bool {
        self.link_faults.contains(&(a, b)) || self.link_faults.contains(&(b, a))
    }

    /// One fault per line: `link x y x y` / `buffer x y dir` / `mux x y dir`.
    pub fn to_text(&self) -> String {
        let mut out = String::from("# noctk fault pattern v1\n");
        for (a, b) in &self.link_faults {
            let _ = writeln!(out, "link {} {} {} {}", a.x, a.y, b.x, b.y);
        }
        for (r, d) in &self.buffer_faults {
            let _ = writeln!(out, "buffer {} {} {}", r.x, r.y, d);
        }
        for (r, d) in &self.mux_faults {
            let _ = writeln!(out, "mux {} {} {}", r.x, r.y, d);
        }
        out
    }

    pub fn from_text(text: &str) -> crate::error::Result<FaultPattern> {
        use crate::error::Error;
        let mut p = FaultPattern::default();
        let dir = |s: &str, line: usize| -> crate::error::Result<Direction> {
            Ok(match s {
                "N" => Direction::North,
                "E" => Direction::East,
                "S" => Direction::South,
                "W" => Direction::West,
                other => {
                    return Err(Error::Parse { line, msg: format!("bad direction `{other}`") })
                }
            })
        };
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let t: Vec<&str> = line.split_whitespace().collect();
            let lineno = i + 1;
            let num = |s: &str| -> crate::error::Result<u16> {
                s.parse().map_err(|_| Error::Parse { line: lineno, msg: "bad number".into() })
            };
            match t[0] {
                "link" if t.len() == 5 => {
                    p.link_faults.insert((
                        Tile::new(num(t[1])?, num(t[2])?),
                        Tile::new(num(t[3])?, num(t[4])?),
                    ));
                }
                "buffer" if t.len() == 4 => {
                    p.buffer_faults
                        .insert((Tile::new(num(t[1])?, num(t[2])?), dir(t[3], lineno)?));
                }
                "mux" if t.len() == 4 => {
                    p.mux_faults.insert((Tile::new(num(t[1])?, num(t[2])?), dir(t[3], lineno)?));
                }
                other => {
                    return Err(Error::Parse { line: lineno, msg: format!("bad record `{other}`") })
                }
            }
        }
        Ok(p)
    }
}

/// Draw `ceil(f * num_tiles)` faults; an `alpha` fraction are dynamic
/// (buffer or mux, uniformly), the rest are hard link faults. Reproducible
/// from the seed.
pub fn inject_faults(topo: &MeshTopology, f: f64, alpha: f64, seed: u64) -> FaultPattern {
    assert!((0.0..1.0).contains(&f) || f == 0.0, "fault rate must be in [0, 1)");
    assert!((0.0..=1.0).contains(&alpha));
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ 0xfa17);
    let n_faults = (f * topo.num_tiles() as f64).ceil() as usize;
    let n_dynamic = (alpha * n_faults as f64).round() as usize;

    let mut pattern = FaultPattern::default();
    // candidate pools
    let mut dyn_pool: Vec<(bool, Tile, Direction)> = Vec::new(); // (is_buffer, ...)
    for t in topo.tiles() {
        for d in CARDINALS {
            if topo.neighbor(t, d).is_some() {
                dyn_pool.push((true, t, d));
                dyn_pool.push((false, t, d));
            }
        }
    }
    dyn_pool.shuffle(&mut rng);
    for (is_buffer, t, d) in dyn_pool.into_iter().take(n_dynamic) {
        if is_buffer {
            pattern.buffer_faults.insert((t, d));
        } else {
            pattern.mux_faults.insert((t, d));
        }
    }

    let mut link_pool: Vec<(Tile, Tile)> = Vec::new();
    for t in topo.tiles() {
        for d in [Direction::East, Direction::North] {
            if let Some(n) = topo.neighbor(t, d) {
                link_pool.push((t, n));
            }
        }
    }
    link_pool.shuffle(&mut rng);
    for (a, b) in link_pool.into_iter().take(n_faults - n_dynamic) {
        pattern.link_faults.insert(if rng.gen_bool(0.5) { (a, b) } else { (b, a) });
    }
    pattern
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConnectivityModel {
    /// Every fault kills the whole physical channel it touches.
    Link,
    /// Every fault kills the whole router.
    Node,
    /// Buffer/mux faults keep the datapath intact; only link faults remove
    /// channels.
    Hybrid,
}

/// Fraction of ordered node pairs that can still communicate: a pair
/// counts when at least one minimal (monotone) route survives over the
/// remaining channels, matching the minimal-path routing frameworks this
/// model feeds.
pub fn connectivity(topo: &MeshTopology, pattern: &FaultPattern, model: ConnectivityModel) -> f64 {
    let n = topo.num_tiles();
    let mut dead_channel: BTreeSet<(usize, usize)> = BTreeSet::new();
    let mut dead_node: BTreeSet<usize> = BTreeSet::new();
    let kill = |a: Tile, b: Tile, set: &mut BTreeSet<(usize, usize)>| {
        set.insert((a.id(topo.width), b.id(topo.width)));
        set.insert((b.id(topo.width), a.id(topo.width)));
    };
    for &(a, b) in &pattern.link_faults {
        match model {
            ConnectivityModel::Node => {
                dead_node.insert(a.id(topo.width));
            }
            _ => kill(a, b, &mut dead_channel),
        }
    }
    for &(r, d) in pattern.buffer_faults.iter().chain(&pattern.mux_faults) {
        match model {
            ConnectivityModel::Hybrid => {} // datapath remains intact
            ConnectivityModel::Link => {
                if let Some(nb) = topo.neighbor(r, d) {
                    kill(r, nb, &mut dead_channel);
                }
            }
            ConnectivityModel::Node => {
                dead_node.insert(r.id(topo.width));
            }
        }
    }

    let alive = |a: Tile, b: Tile| {
        !dead_channel.contains(&(a.id(topo.width), b.id(topo.width)))
            && !dead_node.contains(&a.id(topo.width))
            && !dead_node.contains(&b.id(topo.width))
    };
    let mut reachable_pairs = 0usize;
    let mut total_pairs = 0usize;
    // per destination, dynamic program over monotone moves
    for dst in topo.tiles() {
        let mut ok = vec![false; n];
        ok[dst.id(topo.width)] = !dead_node.contains(&dst.id(topo.width));
        // process tiles by increasing Manhattan distance to dst
        let mut order: Vec<Tile> = topo.tiles().collect();
        order.sort_by_key(|t| t.dist(dst));
        for t in order {
            if t == dst {
                continue;
            }
            let mut here = false;
            if t.x != dst.x {
                let step = if dst.x > t.x { Direction::East } else { Direction::West };
                if let Some(nb) = topo.neighbor(t, step) {
                    here |= alive(t, nb) && ok[nb.id(topo.width)];
                }
            }
            if t.y != dst.y {
                let step = if dst.y > t.y { Direction::North } else { Direction::South };
                if let Some(nb) = topo.neighbor(t, step) {
                    here |= alive(t, nb) && ok[nb.id(topo.width)];
                }
            }
            ok[t.id(topo.width)] = here && !dead_node.contains(&t.id(topo.width));
            total_pairs += 1;
            if ok[t.id(topo.width)] {
                reachable_pairs += 1;
            }
        }
    }
    reachable_pairs as f64 / total_pairs.max(1) as f64
}

// ---------------------------------------------------------------------------
// Dynamic buffer swapping
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DbsPhase {
    S0,
    S1,
    S2,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SwapStrategy {
    RoundRobin,
    Dedicated,
}

/// Per-port handshake tokens written by the faulty router and read by its
/// neighbors. CPS: 00 = normal, 01 = monitored (only packets already in
/// flight may finish), 10 = disabled. CTS gates link transmission.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PortTokens {
    pub cts: bool,
    pub cps: u8,
}

impl PortTokens {
    pub const NORMAL: PortTokens = PortTokens { cts: true, cps: 0b00 };
}

/// DBS controller of one router: walks S0 -> S1 -> S2 around a single swap
/// in flight, maintaining the FP/SP/DP registers and per-port tokens.
#[derive(Debug, Clone)]
pub struct DbsCtl {
    pub phase: DbsPhase,
    pub fp: Direction,
    pub sp: Option<Direction>,
    pub dp: Option<Direction>,
    pub strategy: SwapStrategy,
    /// Round-robin pointer over substitute candidates.
    rr: usize,
    /// Ports excluded from substitution (their own buffer is faulty).
    pub faulty_ports: Vec<Direction>,
}

impl DbsCtl {
    pub fn new(fp: Direction, faulty_ports: Vec<Direction>, strategy: SwapStrategy) -> Self {
        DbsCtl { phase: DbsPhase::S0, fp, sp: None, dp: Some(fp), strategy, rr: 0, faulty_ports }
    }

    /// Tokens the faulty router writes for `port` in the current phase,
    /// following the handshake table row by row. Healthy uninvolved ports
    /// carry the normal tokens.
    pub fn tokens(&self, port: Direction) -> PortTokens {
        match self.phase {
            DbsPhase::S0 | DbsPhase::S1 => {
                if port == self.fp {
                    return PortTokens { cts: false, cps: 0b10 };
                }
                if self.phase == DbsPhase::S1 && Some(port) == self.sp {
                    return PortTokens { cts: true, cps: 0b01 };
                }
                PortTokens::NORMAL
            }
            DbsPhase::S2 => {
                if port == self.fp {
                    return PortTokens { cts: true, cps: 0b00 };
                }
                if Some(port) == self.sp {
                    return PortTokens { cts: false, cps: 0b10 };
                }
                PortTokens::NORMAL
            }
        }
    }

    /// Substitute candidates in selection order for the current strategy.
    fn candidates(&self, exclude: Option<Direction>) -> Vec<Direction> {
        let healthy: Vec<Direction> = CARDINALS
            .iter()
            .copied()
            .filter(|d| *d != self.fp && !self.faulty_ports.contains(d) && Some(*d) != exclude)
            .collect();
        match self.strategy {
            SwapStrategy::Dedicated => {
                // fixed ring successor of the faulty port
                let order = [Direction::North, Direction::East, Direction::South, Direction::West];
                let start = order.iter().position(|d| *d == self.fp).unwrap_or(0);
                (1..4)
                    .map(|i| order[(start + i) % 4])
                    .filter(|d| healthy.contains(d))
                    .take(1)
                    .collect()
            }
            SwapStrategy::RoundRobin => {
                let mut c = healthy;
                if !c.is_empty() {
                    let k = self.rr % c.len();
                    c.rotate_left(k);
                }
                c
            }
        }
    }

    /// A transmission request arrived for the faulty port: schedule a
    /// substitute (S0 -> S1). Returns the scheduled port.
    pub fn schedule(&mut self) -> Option<Direction> {
        debug_assert_eq!(self.phase, DbsPhase::S0);
        let cand = self.candidates(None);
        let sp = cand.first().copied()?;
        self.sp = Some(sp);
        self.dp = Some(self.fp);
        self.phase = DbsPhase::S1;
        Some(sp)
    }

    /// Re-swap (deadlock recovery): pick the next substitute, distinct from
    /// the current one.
    pub fn reswap(&mut self) -> Option<Direction> {
        if self.strategy == SwapStrategy::RoundRobin {
            self.rr += 1;
        }
        let cand = self.candidates(self.sp);
        let sp = cand.first().copied()?;
        self.sp = Some(sp);
        self.phase = DbsPhase::S1;
        Some(sp)
    }

    /// The substitute buffer drained its in-flight packet: enter S2.
    pub fn enter_swap(&mut self) {
        debug_assert_eq!(self.phase, DbsPhase::S1);
        self.dp = self.sp;
        self.phase = DbsPhase::S2;
    }

    /// The swapped packet departed: back to S0.
    pub fn finish(&mut self) {
        debug_assert_eq!(self.phase, DbsPhase::S2);
        if self.strategy == SwapStrategy::RoundRobin {
            self.rr += 1;
        }
        self.sp = None;
        self.dp = Some(self.fp);
        self.phase = DbsPhase::S0;
    }
}

// ---------------------------------------------------------------------------
// Dynamic MUX swapping
// ---------------------------------------------------------------------------

/// Ring order of the five output muxes.
pub const MUX_RING: [Direction; 5] = [
    Direction::North,
    Direction::East,
    Direction::South,
    Direction::West,
    Direction::Local,
];

/// Assign each faulty output mux the nearest healthy ring predecessor
/// whose mux it time-shares (a faulty east port borrows the north mux).
/// Returns `None` when every mux is dead (the router's outputs escalate to
/// link faults).
pub fn dms_config(mux_faults: &[Direction]) -> Option<[Option<Direction>; 5]> {
    if mux_faults.len() >= MUX_RING.len() {
        return None;
    }
    let n = MUX_RING.len();
    let mut assign: [Option<Direction>; 5] = [None; 5];
    for (i, d) in MUX_RING.iter().enumerate() {
        if mux_faults.contains(d) {
            for step in 1..n {
                let cand = MUX_RING[(i + n - step) % n];
                if !mux_faults.contains(&cand) {
                    assign[i] = Some(cand);
                    break;
                }
            }
        }
    }
    Some(assign)
}

/// Time-share schedule: on even cycles the healthy owner transmits, on odd
/// cycles the faulty sharer does.
pub fn dms_may_transmit(cycle: u64, port_faulty: bool, shared_with_faulty: bool) -> bool {
    if port_faulty {
        cycle % 2 == 1
    } else if shared_with_faulty {
        cycle % 2 == 0
    } else {
        true
    }
}

/// Recovery ladder rungs, attempted strictly in order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RecoveryAction {
    Reswap,
    Recompute,
    EjectToPe,
    Drop,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mesh(w: u16, h: u16) -> MeshTopology {
        MeshTopology::new(w, h, 1e9).unwrap()
    }

    #[test]
    fn inject_counts_and_reproducibility() {
        let topo = mesh(8, 8);
        let p = inject_faults(&topo, 0.0, 0.5, 1);
        assert_eq!(p.total(), 0);
        // ceil(0.2 * 64) = 13, all dynamic
        let p = inject_faults(&topo, 0.2, 1.0, 7);
        assert_eq!(p.total(), 13);
        assert_eq!(p.dynamic(), 13);
        assert!(p.link_faults.is_empty());
        let q = inject_faults(&topo, 0.2, 1.0, 7);
        assert_eq!(p, q);
        // alpha fraction within rounding
        let p = inject_faults(&topo, 0.3, 0.5, 9);
        assert_eq!(p.total(), 20);
        assert_eq!(p.dynamic(), 10);
    }

    #[test]
    fn connectivity_limits() {
        let topo = mesh(8, 8);
        let p = FaultPattern::default();
        assert_eq!(connectivity(&topo, &p, ConnectivityModel::Hybrid), 1.0);
        // alpha = 1: hybrid model removes nothing
        for seed in 0..5 {
            let p = inject_faults(&topo, 0.4, 1.0, seed);
            assert_eq!(connectivity(&topo, &p, ConnectivityModel::Hybrid), 1.0);
            assert!(connectivity(&topo, &p, ConnectivityModel::Link) < 1.0);
        }
    }

    #[test]
    fn hybrid_beats_link_model_by_20_percent_at_high_fault_rates() {
        let topo = mesh(8, 8);
        let mut gains = Vec::new();
        for seed in 0..30 {
            let p = inject_faults(&topo, 0.4, 0.5, seed);
            let h = connectivity(&topo, &p, ConnectivityModel::Hybrid);
            let l = connectivity(&topo, &p, ConnectivityModel::Link);
            assert!(h >= l);
            gains.push((h - l) / l.max(1e-9));
        }
        let mean = gains.iter().sum::<f64>() / gains.len() as f64;
        assert!(mean > 0.20, "mean hybrid gain {mean:.3} <= 20%");
    }

    #[test]
    fn dbs_token_sequence_matches_handshake_table() {
        // north faulty, east substitute
        let mut dbs =
            DbsCtl::new(Direction::North, vec![Direction::North], SwapStrategy::Dedicated);
        // S0: north disabled
        assert_eq!(dbs.tokens(Direction::North), PortTokens { cts: false, cps: 0b10 });
        assert_eq!(dbs.tokens(Direction::East), PortTokens::NORMAL);
        assert_eq!(dbs.fp, Direction::North);
        assert_eq!(dbs.dp, Some(Direction::North));
        assert_eq!(dbs.sp, None);
        // S1: east scheduled, neighbor monitors
        let sp = dbs.schedule().unwrap();
        assert_eq!(sp, Direction::East);
        assert_eq!(dbs.tokens(Direction::North), PortTokens { cts: false, cps: 0b10 });
        assert_eq!(dbs.tokens(Direction::East), PortTokens { cts: true, cps: 0b01 });
        assert_eq!((dbs.fp, dbs.sp, dbs.dp), (Direction::North, Some(Direction::East), Some(Direction::North)));
        // S2: north transmits into the east buffer, east link disabled
        dbs.enter_swap();
        assert_eq!(dbs.tokens(Direction::North), PortTokens { cts: true, cps: 0b00 });
        assert_eq!(dbs.tokens(Direction::East), PortTokens { cts: false, cps: 0b10 });
        assert_eq!((dbs.fp, dbs.sp, dbs.dp), (Direction::North, Some(Direction::East), Some(Direction::East)));
        dbs.finish();
        assert_eq!(dbs.phase, DbsPhase::S0);
    }

    #[test]
    fn dbs_round_robin_uses_distinct_substitutes() {
        let mut dbs =
            DbsCtl::new(Direction::North, vec![Direction::North], SwapStrategy::RoundRobin);
        let s1 = dbs.schedule().unwrap();
        dbs.enter_swap();
        dbs.finish();
        let s2 = dbs.schedule().unwrap();
        dbs.enter_swap();
        dbs.finish();
        let s3 = dbs.schedule().unwrap();
        assert_ne!(s1, s2);
        assert_ne!(s2, s3);
    }

    #[test]
    fn dbs_reswap_picks_a_different_port() {
        let mut dbs =
            DbsCtl::new(Direction::North, vec![Direction::North], SwapStrategy::RoundRobin);
        let s1 = dbs.schedule().unwrap();
        let s2 = dbs.reswap().unwrap();
        assert_ne!(s1, s2);
    }

    #[test]
    fn dms_ring_assignment() {
        // east mux faulty: borrows the north mux
        let assign = dms_config(&[Direction::East]).unwrap();
        assert_eq!(assign[Direction::East.index()], Some(Direction::North));
        // no faults: identity
        let assign = dms_config(&[]).unwrap();
        assert!(assign.iter().all(|a| a.is_none()));
        // all faulty: output-dead
        assert!(dms_config(&MUX_RING).is_none());
        // fairness by construction
        let mut own = 0;
        let mut other = 0;
        for c in 0..2000u64 {
            if dms_may_transmit(c, false, true) {
                own += 1;
            }
            if dms_may_transmit(c, true, false) {
                other += 1;
            }
        }
        assert_eq!(own, 1000);
        assert_eq!(other, 1000);
    }

    #[test]
    fn pattern_text_round_trip() {
        let topo = mesh(4, 4);
        let p = inject_faults(&topo, 0.3, 0.5, 3);
        let text = p.to_text();
        let q = FaultPattern::from_text(&text).unwrap();
        assert_eq!(p, q);
    }
}
