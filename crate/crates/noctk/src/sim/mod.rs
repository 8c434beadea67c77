//! Deterministic cycle-accurate mesh simulator.
//!
//! Routers run a 4-stage pipeline (RC, VA, SA, ST) plus one link cycle;
//! header flits pay every stage, body and tail flits ride SA/ST. Each cycle
//! runs in two phases: arbitration decisions (VA, SA, OWC) are computed
//! from the committed state of the previous cycle, then all effects commit
//! together, so router sweep order is immaterial for them. Route
//! computation and express-latch grabbing run at commit time in fixed
//! router order, which keeps shared-resource arbitration deterministic.
//!
//! Channel architectures: classic unidirectional, bidirectional master /
//! slave pairs, flit-level speedup, and the EVC + regional hub overlay.
//! Fault machinery (DBS, DMS, deadlock recovery) hooks into the same
//! phases.

pub mod inject;
pub mod routing;

use crate::adaptive::{self, ExpressChoice, FitnessView, RegionMap};
use crate::fault::{
    dms_may_transmit, dms_config, DbsCtl, DbsPhase, FaultPattern, SwapStrategy,
};
use crate::fsnoc::{
    flit_switch_alloc, owc_decide, pipelined_link_guard, LinkGuardState, OwcDecision,
    RequestExtractor, SaGrant, SaMode, SaRequest,
};
use crate::thermal::RoutingTables;
use crate::topology::{Direction, MeshTopology, Tile, CARDINALS};
use crate::traffic::CoreCommGraph;
use routing::{FaultAwareTable, Lfsr16, RoutingAlgo};
use serde::{Deserialize, Serialize};
use std::collections::VecDeque;

pub const NUM_PORTS: usize = 5;
pub const LOCAL: usize = 4;

/// Flit flight time after a switch grant: one crossbar + one link cycle.
const FLIGHT: u64 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArchMode {
    Uni,
    BiNoc,
    Fsnoc,
    EvcHub,
}

impl ArchMode {
    pub fn bidirectional(self) -> bool {
        !matches!(self, ArchMode::Uni)
    }

    fn speedup(self) -> bool {
        matches!(self, ArchMode::Fsnoc)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionPolicy {
    /// First candidate in fixed direction order (deterministic).
    First,
    /// Uniform random among candidates (per-router stream).
    Random,
    /// K-step speculative fitness selection.
    KStep,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimConfig {
    pub width: u16,
    pub height: u16,
    /// Virtual channels per input port (total across both lanes).
    pub vcs: usize,
    /// Buffer depth per VC, flits.
    pub buf_depth: usize,
    pub packet_len: u32,
    pub arch: ArchMode,
    pub routing: RoutingAlgo,
    pub selection: SelectionPolicy,
    pub seed: u64,
    /// Extra pipeline stages on every link (long-wire K).
    pub link_pipeline: usize,
    /// Enable per-cycle invariant checking (flit conservation, credits).
    pub invariant_checks: bool,
    /// Deadlock detection threshold T_sh; None disarms the monitor.
    pub deadlock_threshold: Option<u64>,
    /// Network-interface slots for the eject-and-resend recovery rung.
    pub ni_slots: usize,
    pub fitness_alpha: f64,
    pub fitness_window: u64,
    pub fitness_k: u32,
    /// EVC congestion threshold T on the sink wait.
    pub express_threshold: f64,
    /// Normal traffic is served after this many consecutive express grants.
    pub starvation_limit: u32,
    pub evc_len: u16,
    pub region_size: u16,
    pub swap_strategy: SwapStrategy,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            width: 8,
            height: 8,
            vcs: 1,
            buf_depth: 9,
            packet_len: 4,
            arch: ArchMode::Uni,
            routing: RoutingAlgo::Xy,
            selection: SelectionPolicy::First,
            seed: 1,
            link_pipeline: 0,
            invariant_checks: cfg!(debug_assertions),
            deadlock_threshold: None,
            ni_slots: 8,
            fitness_alpha: 0.8,
            fitness_window: 100,
            fitness_k: 2,
            express_threshold: 20.0,
            starvation_limit: 30,
            evc_len: 3,
            region_size: 4,
            swap_strategy: SwapStrategy::RoundRobin,
        }
    }
}

impl SimConfig {
    /// Wormhole configuration of the latency-model experiments: a single
    /// VC, 9-flit buffers, 4-flit packets.
    pub fn wormhole(width: u16, height: u16) -> Self {
        SimConfig { width, height, ..Default::default() }
    }

    /// Bidirectional-channel configuration of the flit-speedup experiments:
    /// 4 VCs per direction, 16-flit VC buffers, 16-flit packets.
    pub fn bidir(width: u16, height: u16, arch: ArchMode) -> Self {
        SimConfig { width, height, vcs: 4, buf_depth: 16, packet_len: 16, arch, ..Default::default() }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Flit {
    pub packet: u32,
    pub seq: u16,
}

#[derive(Debug, Clone)]
pub struct Packet {
    pub id: u32,
    pub src: Tile,
    pub dst: Tile,
    pub len: u32,
    pub birth: u64,
    pub inject: Option<u64>,
    pub eject: Option<u64>,
    pub recoveries: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Stage {
    Idle,
    Rc,
    Va,
    Active,
    /// Streaming over an express virtual channel segment.
    Evc,
}

#[derive(Debug, Clone)]
struct Vc {
    buf: VecDeque<Flit>,
    stage: Stage,
    out_dir: Direction,
    out_vc: usize,
    owner: Option<u32>,
    /// Upstream (router, out port) to notify on dequeue; None for local
    /// injection and express deliveries.
    feeder: Option<(usize, usize)>,
    /// Cycle the current head flit entered this buffer.
    head_arrived: u64,
    /// Cycle the current owner's header entered this buffer.
    header_arrived: u64,
    /// Header arrived over our master wire (reversed lane).
    via_master: bool,
    recovery_rung: u8,
    last_recovery: u64,
}

impl Vc {
    fn new() -> Self {
        Vc {
            buf: VecDeque::new(),
            stage: Stage::Idle,
            out_dir: Direction::Local,
            out_vc: 0,
            owner: None,
            feeder: None,
            head_arrived: 0,
            header_arrived: 0,
            via_master: false,
            recovery_rung: 0,
            last_recovery: 0,
        }
    }
}

#[derive(Debug, Clone)]
struct OutPort {
    credits: Vec<u32>,
    owner: Vec<Option<(usize, usize)>>,
    rr_va: usize,
    express_streak: u32,
    evc_busy_until: u64,
}

impl OutPort {
    fn new(vcs: usize, depth: usize) -> Self {
        OutPort {
            credits: vec![depth as u32; vcs],
            owner: vec![None; vcs],
            rr_va: 0,
            express_streak: 0,
            evc_busy_until: 0,
        }
    }
}

/// Per-direction bidirectional channel control state.
#[derive(Debug, Clone)]
struct ChannelCtl {
    /// Self pressure history (delay 2 + K).
    out_hist: VecDeque<u8>,
    guard: LinkGuardState,
    wrote_master: bool,
}

impl ChannelCtl {
    fn new(delay: usize) -> Self {
        ChannelCtl {
            out_hist: VecDeque::from(vec![0; delay]),
            guard: LinkGuardState::default(),
            wrote_master: false,
        }
    }
}

#[derive(Debug, Clone)]
struct ChannelStats {
    wait_sum: [f64; 2], // [slave-in, master-in]
    wait_cnt: [u64; 2],
    free_sum: f64,
    free_samples: u64,
    block_cycles: u64,
    cq_sum: f64,
    cq_cnt: u64,
}

impl ChannelStats {
    fn new() -> Self {
        ChannelStats {
            wait_sum: [0.0; 2],
            wait_cnt: [0; 2],
            free_sum: 0.0,
            free_samples: 0,
            block_cycles: 0,
            cq_sum: 0.0,
            cq_cnt: 0,
        }
    }

    fn reset_window(&mut self) {
        self.wait_sum = [0.0; 2];
        self.wait_cnt = [0; 2];
        self.free_sum = 0.0;
        self.free_samples = 0;
        self.block_cycles = 0;
    }
}

struct Router {
    tile: Tile,
    inputs: [Vec<Vc>; NUM_PORTS],
    out: [OutPort; NUM_PORTS],
    ctl: [ChannelCtl; 4],
    re: RequestExtractor,
    rr_sa_in: [usize; NUM_PORTS],
    rr_sa_out: [usize; NUM_PORTS],
    stats: [ChannelStats; NUM_PORTS],
    lfsr: Lfsr16,
    rng: rand_chacha::ChaCha8Rng,
    buffer_fault: [bool; NUM_PORTS],
    mux_share: [Option<Direction>; NUM_PORTS],
    mux_fault: [bool; NUM_PORTS],
    dbs: Option<DbsCtl>,
    /// During DBS S2: deliveries to the faulty port land in this port.
    swap_target: Option<(Direction, Direction)>,
    /// Direction fitness (current, previous) and update stamp.
    fitness: [(f64, f64); 4],
    fitness_updated: u64,
}

#[derive(Debug, Clone, Copy)]
struct Delivery {
    arrive: u64,
    router: usize,
    port: usize,
    vc: usize,
    flit: Flit,
    via_master: bool,
    eject: bool,
    express: bool,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Metrics {
    pub injected_packets: u64,
    pub measured_packets: u64,
    pub accepted_packets: u64,
    pub dropped_packets: u64,
    pub avg_latency: f64,
    pub max_latency: u64,
    /// Accepted flits per cycle per node over the measurement window.
    pub throughput: f64,
    pub recovered_packets: u64,
    pub event_hash: u64,
    /// Unfinished measured packets at drain cutoff.
    pub stalled_packets: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChannelWindow {
    pub router: Tile,
    pub dir: Direction,
    pub window_start: u64,
    pub avg_wait: f64,
    pub avg_free_slots: f64,
    pub block_prob: f64,
}

struct HubPacket {
    pid: u32,
    arrive: u64,
    out_quadrant: usize,
    granted: bool,
}

struct HubRouter {
    inputs: Vec<HubPacket>,
    out_busy_until: [u64; 4],
    rr: usize,
}

struct NodeSource {
    flows: Vec<(Tile, inject::GeProcess)>,
    queue: VecDeque<u32>,
    /// In-progress injection: (vc index, next seq).
    feeding: Option<(usize, u16)>,
    trace: Vec<inject::TracePacket>,
    trace_pos: usize,
}

pub struct Network {
    pub cfg: SimConfig,
    pub topo: MeshTopology,
    routers: Vec<Router>,
    pub packets: Vec<Packet>,
    sources: Vec<NodeSource>,
    inflight: VecDeque<Vec<Delivery>>,
    cycle: u64,
    pub tables: Option<RoutingTables>,
    fault_table: Option<FaultAwareTable>,
    pub faults: FaultPattern,
    regions: RegionMap,
    hubs: Vec<HubRouter>,
    hub_latch_busy: Vec<bool>,
    evc_latch_busy: std::collections::BTreeMap<(usize, Direction), u32>,
    hub_events: Vec<(u64, u32)>,
    measure_from: u64,
    measure_to: u64,
    ejected_flits: u64,
    injected_flits: u64,
    cancelled_flits: u64,
    dropped: u64,
    recovered: u64,
    event_hash: u64,
    sq_sum: Vec<f64>,
    sq_cnt: Vec<u64>,
    pub channel_windows: Vec<ChannelWindow>,
    collect_windows: bool,
}

impl Network {
    pub fn new(cfg: SimConfig, topo: MeshTopology) -> Self {
        let delay = 2 + cfg.link_pipeline;
        let n = topo.num_tiles();
        let routers: Vec<Router> = topo
            .tiles()
            .map(|tile| Router {
                tile,
                inputs: std::array::from_fn(|_| (0..cfg.vcs).map(|_| Vc::new()).collect()),
                out: std::array::from_fn(|_| OutPort::new(cfg.vcs, cfg.buf_depth)),
                ctl: std::array::from_fn(|_| ChannelCtl::new(delay)),
                re: RequestExtractor::default(),
                rr_sa_in: [0; NUM_PORTS],
                rr_sa_out: [0; NUM_PORTS],
                stats: std::array::from_fn(|_| ChannelStats::new()),
                lfsr: Lfsr16::new(cfg.seed, tile.id(topo.width)),
                rng: seeded_rng(cfg.seed, tile.id(topo.width) as u64),
                buffer_fault: [false; NUM_PORTS],
                mux_share: [None; NUM_PORTS],
                mux_fault: [false; NUM_PORTS],
                dbs: None,
                swap_target: None,
                fitness: [(0.0, 0.0); 4],
                fitness_updated: 0,
            })
            .collect();
        let sources = (0..n)
            .map(|_| NodeSource {
                flows: Vec::new(),
                queue: VecDeque::new(),
                feeding: None,
                trace: Vec::new(),
                trace_pos: 0,
            })
            .collect();
        let regions = RegionMap { region_size: cfg.region_size };
        let (rw, rh) = regions.regions(&topo);
        let hubs = (0..(rw as usize * rh as usize))
            .map(|_| HubRouter { inputs: Vec::new(), out_busy_until: [0; 4], rr: 0 })
            .collect();
        let horizon = FLIGHT as usize + cfg.link_pipeline + cfg.evc_len as usize + 2;
        let mut net = Network {
            cfg,
            topo,
            routers,
            packets: Vec::new(),
            sources,
            inflight: VecDeque::new(),
            cycle: 0,
            tables: None,
            fault_table: None,
            faults: FaultPattern::default(),
            regions,
            hubs,
            hub_latch_busy: vec![false; n],
            evc_latch_busy: Default::default(),
            hub_events: Vec::new(),
            measure_from: 0,
            measure_to: u64::MAX,
            ejected_flits: 0,
            injected_flits: 0,
            cancelled_flits: 0,
            dropped: 0,
            recovered: 0,
            event_hash: 0xcbf29ce484222325,
            sq_sum: vec![0.0; n],
            sq_cnt: vec![0; n],
            channel_windows: Vec::new(),
            collect_windows: false,
        };
        for _ in 0..horizon {
            net.inflight.push_back(Vec::new());
        }
        net
    }

    pub fn cycle(&self) -> u64 {
        self.cycle
    }

    /// Drive per-flow GE generators from a communication graph.
    pub fn set_ccg_traffic(&mut self, ccg: &CoreCommGraph) {
        for src in &mut self.sources {
            src.flows.clear();
        }
        for (i, f) in ccg.flows.iter().enumerate() {
            let sid = f.src.id(self.topo.width);
            let stream = ((sid as u64) << 32) | i as u64;
            self.sources[sid]
                .flows
                .push((f.dst, inject::GeProcess::new(f.rate, f.scv, self.cfg.seed, stream)));
        }
    }

    pub fn set_trace(&mut self, trace: &[inject::TracePacket]) {
        for s in &mut self.sources {
            s.trace.clear();
            s.trace_pos = 0;
        }
        for p in trace {
            self.sources[p.src.id(self.topo.width)].trace.push(*p);
        }
        for s in &mut self.sources {
            s.trace.sort_by_key(|p| p.cycle);
        }
    }

    pub fn set_tables(&mut self, tables: RoutingTables) {
        self.tables = Some(tables);
    }

    pub fn apply_faults(&mut self, pattern: FaultPattern) {
        for &(r, d) in &pattern.buffer_faults {
            let id = r.id(self.topo.width);
            self.routers[id].buffer_fault[d.index()] = true;
        }
        for r in self.routers.iter_mut() {
            let faulty: Vec<Direction> =
                CARDINALS.iter().copied().filter(|d| r.buffer_fault[d.index()]).collect();
            if let Some(&first) = faulty.first() {
                r.dbs = Some(DbsCtl::new(first, faulty, self.cfg.swap_strategy));
            }
        }
        let mut escalated = pattern.clone();
        for t in self.topo.tiles() {
            let id = t.id(self.topo.width);
            let faults: Vec<Direction> = CARDINALS
                .iter()
                .copied()
                .filter(|d| pattern.mux_faults.contains(&(t, *d)))
                .collect();
            if faults.is_empty() {
                continue;
            }
            match dms_config(&faults) {
                Some(assign) => {
                    for d in CARDINALS {
                        self.routers[id].mux_fault[d.index()] =
                            pattern.mux_faults.contains(&(t, d));
                    }
                    for d in CARDINALS {
                        if let Some(sharer) = assign[d.index()] {
                            self.routers[id].mux_share[sharer.index()] = Some(d);
                        }
                    }
                }
                None => {
                    for d in CARDINALS {
                        if let Some(nb) = self.topo.neighbor(t, d) {
                            escalated.link_faults.insert((t, nb));
                        }
                    }
                }
            }
        }
        if self.cfg.routing == RoutingAlgo::FaultAware {
            self.fault_table = Some(FaultAwareTable::build(&self.topo, &escalated));
        }
        self.faults = escalated;
    }

    pub fn set_measurement(&mut self, from: u64, to: u64) {
        self.measure_from = from;
        self.measure_to = to;
    }

    pub fn enable_window_collection(&mut self, on: bool) {
        self.collect_windows = on;
    }

    fn hash_event(&mut self, a: u64, b: u64, c: u64) {
        let mut h = self.event_hash;
        for v in [a, b, c, self.cycle] {
            h ^= v;
            h = h.wrapping_mul(0x100000001b3);
        }
        self.event_hash = h;
    }

    fn neighbor_id(&self, router: usize, dir: Direction) -> Option<usize> {
        self.topo
            .neighbor(Tile::from_id(router, self.topo.width), dir)
            .map(|t| t.id(self.topo.width))
    }

    fn channel_dead(&self, router: usize, dir: Direction) -> bool {
        let t = Tile::from_id(router, self.topo.width);
        match self.topo.neighbor(t, dir) {
            Some(nb) => self.faults.channel_dead(t, nb),
            None => true,
        }
    }

    // -----------------------------------------------------------------
    // phase 1: arbitration decisions from the committed state
    // -----------------------------------------------------------------

    fn compute_owc(&self) -> Vec<[OwcDecision; 4]> {
        let mut out = Vec::with_capacity(self.routers.len());
        for (id, r) in self.routers.iter().enumerate() {
            let mut dec =
                [OwcDecision { master_enable: true, slave_enable: false, flit_speedup: false }; 4];
            for (di, dir) in CARDINALS.iter().enumerate() {
                let Some(nb) = self.neighbor_id(id, *dir) else {
                    dec[di].master_enable = false;
                    continue;
                };
                if self.channel_dead(id, *dir) {
                    dec[di] = OwcDecision {
                        master_enable: false,
                        slave_enable: false,
                        flit_speedup: false,
                    };
                    continue;
                }
                if !self.cfg.arch.bidirectional() {
                    continue; // master stays enabled, slave stays down
                }
                let req_out_d = *r.ctl[di].out_hist.front().unwrap();
                let opp = dir.opposite().index();
                let req_in_d = *self.routers[nb].ctl[opp].out_hist.front().unwrap();
                let base = owc_decide(req_out_d, req_in_d, self.cfg.arch.speedup());
                dec[di] = pipelined_link_guard(self.cfg.link_pipeline, &r.ctl[di].guard, base);
            }
            out.push(dec);
        }
        out
    }

    fn compute_va(&self) -> Vec<(usize, usize, usize, usize, usize)> {
        let mut grants = Vec::new();
        for (id, r) in self.routers.iter().enumerate() {
            for out_port in 0..NUM_PORTS {
                let mut reqs: Vec<(usize, usize)> = Vec::new();
                for (port, vcs) in r.inputs.iter().enumerate() {
                    for (vi, vc) in vcs.iter().enumerate() {
                        if vc.stage == Stage::Va && vc.out_dir.index() == out_port {
                            reqs.push((port, vi));
                        }
                    }
                }
                if reqs.is_empty() {
                    continue;
                }
                if out_port != LOCAL {
                    let dir = Direction::from_index(out_port);
                    let Some(nb) = self.neighbor_id(id, dir) else { continue };
                    if self.channel_dead(id, dir) {
                        continue;
                    }
                    let nb_port = dir.opposite();
                    if let Some(dbs) = &self.routers[nb].dbs {
                        let tokens = dbs.tokens(nb_port);
                        if !tokens.cts || tokens.cps == 0b01 {
                            continue; // no new allocations toward this port
                        }
                    } else if self.routers[nb].buffer_fault[nb_port.index()] {
                        continue;
                    }
                }
                // the last VC of every cardinal port is the EVC sink buffer
                let reserved = if self.cfg.arch == ArchMode::EvcHub && out_port != LOCAL {
                    self.cfg.vcs - 1
                } else {
                    usize::MAX
                };
                let free: Vec<usize> = (0..self.cfg.vcs)
                    .filter(|&w| w != reserved && r.out[out_port].owner[w].is_none())
                    .collect();
                if free.is_empty() {
                    continue;
                }
                let start = r.out[out_port].rr_va % reqs.len();
                for (k, &w) in free.iter().enumerate() {
                    if k >= reqs.len() {
                        break;
                    }
                    let (port, vi) = reqs[(start + k) % reqs.len()];
                    grants.push((id, port, vi, out_port, w));
                }
            }
        }
        grants
    }

    /// SA grants plus the round-robin pointers to commit.
    #[allow(clippy::type_complexity)]
    fn compute_sa(
        &self,
        owc: &[[OwcDecision; 4]],
    ) -> Vec<(usize, Vec<SaGrant>, [usize; NUM_PORTS], [usize; NUM_PORTS])> {
        let mut all = Vec::new();
        for (id, r) in self.routers.iter().enumerate() {
            let mut enabled = [(false, false); NUM_PORTS];
            for di in 0..4 {
                let d = owc[id][di];
                enabled[di] = (d.master_enable, d.slave_enable);
                let shared = r.mux_share[di].is_some();
                if !dms_may_transmit(self.cycle, r.mux_fault[di], shared) {
                    enabled[di] = (false, false);
                }
                if r.out[di].evc_busy_until > self.cycle
                    && r.out[di].express_streak < self.cfg.starvation_limit
                {
                    enabled[di] = (false, false);
                }
            }
            enabled[LOCAL] = (true, self.cfg.arch.bidirectional());

            // flit-speedup VC per direction, when the OWC says so
            let mut speedup: [Option<(usize, usize)>; 4] = [None; 4];
            if self.cfg.arch.speedup() {
                for di in 0..4 {
                    if owc[id][di].flit_speedup {
                        'outer: for (port, vcs) in r.inputs.iter().enumerate() {
                            for (vi, vc) in vcs.iter().enumerate() {
                                if vc.stage == Stage::Active
                                    && vc.out_dir.index() == di
                                    && vc.buf.len() >= 2
                                {
                                    speedup[di] = Some((port, vi));
                                    break 'outer;
                                }
                            }
                        }
                    }
                }
            }

            let mut reqs: Vec<SaRequest> = Vec::new();
            for (port, vcs) in r.inputs.iter().enumerate() {
                for (vi, vc) in vcs.iter().enumerate() {
                    if vc.stage != Stage::Active || vc.buf.is_empty() {
                        continue;
                    }
                    let out = vc.out_dir.index();
                    let credits = if out == LOCAL {
                        usize::MAX
                    } else {
                        r.out[out].credits[vc.out_vc] as usize
                    };
                    let mode = if out < 4 && speedup[out] == Some((port, vi)) {
                        SaMode::FlitSpeedup
                    } else {
                        SaMode::Normal
                    };
                    reqs.push(SaRequest { port, vc: vi, out, flits_ready: vc.buf.len(), credits, mode });
                }
            }
            if reqs.is_empty() {
                continue;
            }
            let mut rr_in = r.rr_sa_in;
            let mut rr_out = r.rr_sa_out;
            let grants = if self.cfg.arch.bidirectional() {
                flit_switch_alloc(&reqs, &enabled, &mut rr_in, &mut rr_out, NUM_PORTS)
            } else {
                let mut winners: Vec<SaRequest> = Vec::new();
                for port in 0..NUM_PORTS {
                    let here: Vec<&SaRequest> =
                        reqs.iter().filter(|q| q.port == port && q.credits > 0).collect();
                    if here.is_empty() {
                        continue;
                    }
                    let pick = here[rr_in[port] % here.len()];
                    rr_in[port] = rr_in[port].wrapping_add(1);
                    winners.push(*pick);
                }
                let mut grants = Vec::new();
                let outs: std::collections::BTreeSet<usize> =
                    winners.iter().map(|w| w.out).collect();
                for out in outs {
                    if out != LOCAL && !enabled[out].0 {
                        continue;
                    }
                    let mut cands: Vec<&SaRequest> =
                        winners.iter().filter(|w| w.out == out).collect();
                    cands.sort_by_key(|w| (w.port, w.vc));
                    let pick = cands[rr_out[out] % cands.len()];
                    rr_out[out] = rr_out[out].wrapping_add(1);
                    grants.push(SaGrant {
                        port: pick.port,
                        vc: pick.vc,
                        out,
                        nflits: 1,
                        first_on_master: true,
                    });
                }
                grants
            };
            all.push((id, grants, rr_in, rr_out));
        }
        all
    }

    // -----------------------------------------------------------------
    // commit
    // -----------------------------------------------------------------

    pub fn step(&mut self) {
        let owc = self.compute_owc();
        let va = self.compute_va();
        let sa = self.compute_sa(&owc);

        self.commit_rc();
        self.commit_va(va);
        self.commit_sa(sa);
        self.commit_evc_streams();

        let due = self.inflight.pop_front().unwrap_or_default();
        self.inflight.push_back(Vec::new());
        for d in due {
            self.commit_delivery(d);
        }

        if self.cfg.arch == ArchMode::EvcHub {
            self.commit_hubs();
        }
        self.commit_injection();
        self.commit_dbs();
        if let Some(tsh) = self.cfg.deadlock_threshold {
            self.commit_recovery(tsh);
        }
        self.shift_pressure_lines();
        self.commit_stats();

        if self.cfg.invariant_checks {
            self.check_invariants();
        }
        self.cycle += 1;
    }

    /// Route computation: per-VC decisions in fixed router order. Runs at
    /// commit time so random draws and express-latch grabs advance real
    /// state deterministically.
    fn commit_rc(&mut self) {
        for id in 0..self.routers.len() {
            for port in 0..NUM_PORTS {
                for vi in 0..self.cfg.vcs {
                    let (head, tile) = {
                        let vc = &self.routers[id].inputs[port][vi];
                        if vc.stage != Stage::Rc || vc.buf.is_empty() {
                            continue;
                        }
                        (*vc.buf.front().unwrap(), self.routers[id].tile)
                    };
                    debug_assert_eq!(head.seq, 0, "RC on a non-header flit");
                    let (src, dst) = {
                        let p = &self.packets[head.packet as usize];
                        (p.src, p.dst)
                    };
                    if dst == tile {
                        let vc = &mut self.routers[id].inputs[port][vi];
                        vc.out_dir = Direction::Local;
                        vc.stage = Stage::Va;
                        continue;
                    }
                    // EVC shortcut at aligned anchors
                    if self.cfg.arch == ArchMode::EvcHub
                        && self.cfg.packet_len as usize <= self.cfg.buf_depth
                    {
                        if let Some(dir) = self.evc_direction(tile, dst) {
                            if self.evc_available(id, dir) {
                                let pid = head.packet;
                                let vc = &mut self.routers[id].inputs[port][vi];
                                vc.out_dir = dir;
                                vc.stage = Stage::Evc;
                                self.evc_latch_busy.insert((id, dir), pid);
                                continue;
                            }
                        }
                    }
                    if let Some(dir) = self.route_one(id, port, tile, src, dst) {
                        let vc = &mut self.routers[id].inputs[port][vi];
                        vc.out_dir = dir;
                        vc.stage = Stage::Va;
                    }
                }
            }
        }
    }

    fn route_one(&mut self, id: usize, port: usize, cur: Tile, src: Tile, dst: Tile) -> Option<Direction> {
        let candidates: Vec<Direction> = match self.cfg.routing {
            RoutingAlgo::Table => {
                let in_dir = Direction::from_index(port);
                let tables = self.tables.as_ref().expect("table routing without tables");
                let mut lfsr = self.routers[id].lfsr.clone();
                let out = routing::table_route(tables, &mut lfsr, cur, in_dir, src, dst).ok();
                self.routers[id].lfsr = lfsr;
                return out;
            }
            RoutingAlgo::FaultAware => {
                let table = self.fault_table.as_ref().expect("fault-aware routing without table");
                table.candidates(&self.topo, &self.faults, cur, dst)
            }
            algo => routing::route_compute(algo, &self.topo, cur, src, dst),
        };
        let alive: Vec<Direction> = candidates
            .iter()
            .copied()
            .filter(|d| *d == Direction::Local || !self.channel_dead(id, *d))
            .collect();
        let candidates = if alive.is_empty() { candidates } else { alive };
        if candidates.is_empty() {
            return None;
        }
        if candidates.len() == 1 {
            return Some(candidates[0]);
        }
        let choice = match self.cfg.selection {
            SelectionPolicy::First => candidates[0],
            SelectionPolicy::Random => {
                use rand::Rng;
                let idx = self.routers[id].rng.gen_range(0..candidates.len());
                candidates[idx]
            }
            SelectionPolicy::KStep => adaptive::k_step_select(
                &self.topo,
                cur,
                src,
                dst,
                &candidates,
                self,
                self.cfg.fitness_k,
            ),
        };
        assert!(candidates.contains(&choice), "selection left the candidate set");
        Some(choice)
    }

    fn commit_va(&mut self, grants: Vec<(usize, usize, usize, usize, usize)>) {
        for (id, port, vi, out_port, w) in grants {
            let vc = &mut self.routers[id].inputs[port][vi];
            if vc.stage != Stage::Va || vc.out_dir.index() != out_port {
                continue;
            }
            vc.stage = Stage::Active;
            vc.out_vc = w;
            let r = &mut self.routers[id];
            r.out[out_port].owner[w] = Some((port, vi));
            r.out[out_port].rr_va = r.out[out_port].rr_va.wrapping_add(1);
            if out_port != LOCAL {
                r.re.on_assigned(out_port);
            }
        }
    }

    fn commit_sa(&mut self, all: Vec<(usize, Vec<SaGrant>, [usize; NUM_PORTS], [usize; NUM_PORTS])>) {
        let mut wire_writers: std::collections::HashMap<(usize, usize), u32> = Default::default();
        for (id, grants, rr_in, rr_out) in all {
            self.routers[id].rr_sa_in = rr_in;
            self.routers[id].rr_sa_out = rr_out;
            for g in grants {
                // harvest everything needed from the VC, then release borrow
                let (popped, owner, out_vc, feeder, via_master, header_arrived, tail_left) = {
                    let plen_of = |pid: u32, packets: &Vec<Packet>| packets[pid as usize].len;
                    let vc = &mut self.routers[id].inputs[g.port][g.vc];
                    if vc.stage != Stage::Active || vc.buf.len() < g.nflits {
                        continue;
                    }
                    let owner = vc.owner.expect("active VC without owner");
                    let mut popped = Vec::with_capacity(g.nflits);
                    for _ in 0..g.nflits {
                        popped.push(vc.buf.pop_front().unwrap());
                    }
                    let plen = plen_of(owner, &self.packets);
                    let tail_left = popped.iter().any(|f| f.seq as u32 + 1 == plen);
                    let header_arrived = vc.header_arrived;
                    let via_master = vc.via_master;
                    let feeder = vc.feeder;
                    let out_vc = vc.out_vc;
                    if tail_left {
                        vc.stage = Stage::Idle;
                        vc.owner = None;
                        vc.recovery_rung = 0;
                    }
                    vc.head_arrived = self.cycle;
                    (popped, owner, out_vc, feeder, via_master, header_arrived, tail_left)
                };
                let out = g.out;
                let out_dir = Direction::from_index(out);

                // header departure: channel waiting-time observation
                if popped[0].seq == 0 {
                    let wait = (self.cycle - header_arrived) as f64 + FLIGHT as f64;
                    let lane = if via_master { 1 } else { 0 };
                    let st = &mut self.routers[id].stats[g.port];
                    st.cq_sum += wait;
                    st.cq_cnt += 1;
                    st.wait_sum[lane] += wait;
                    st.wait_cnt[lane] += 1;
                }

                if tail_left {
                    if out != LOCAL {
                        self.routers[id].re.on_released(out);
                    }
                    // our input VC frees: notify our feeder's ownership slot
                    if let Some((fr, fp)) = feeder {
                        self.routers[fr].out[fp].owner[g.vc] = None;
                    }
                }

                for (k, f) in popped.iter().enumerate() {
                    let master_lane = if g.nflits == 2 { k == 0 } else { g.first_on_master };
                    if out == LOCAL {
                        self.push_delivery(Delivery {
                            arrive: self.cycle + FLIGHT,
                            router: id,
                            port: LOCAL,
                            vc: out_vc,
                            flit: *f,
                            via_master: true,
                            eject: true,
                            express: false,
                        });
                    } else {
                        let nb = self.neighbor_id(id, out_dir).expect("grant into the void");
                        let nb_port = out_dir.opposite().index();
                        self.routers[id].out[out].credits[out_vc] -= 1;
                        self.push_delivery(Delivery {
                            arrive: self.cycle + FLIGHT + self.cfg.link_pipeline as u64,
                            router: nb,
                            port: nb_port,
                            vc: out_vc,
                            flit: *f,
                            // the receiver's master-in lane is fed by its own
                            // master wire, i.e. our slave lane
                            via_master: !master_lane,
                            eject: false,
                            express: false,
                        });
                        let wire = if master_lane { (id, out) } else { (nb, nb_port) };
                        if let Some(prev) = wire_writers.insert(wire, owner) {
                            panic!(
                                "link write conflict at cycle {}: wire {wire:?} by packets {prev} and {owner}",
                                self.cycle
                            );
                        }
                        if master_lane {
                            self.routers[id].ctl[out].wrote_master = true;
                        }
                    }
                    self.hash_event(1, (id * NUM_PORTS + out) as u64, f.packet as u64);
                }
                if tail_left && out == LOCAL {
                    self.routers[id].out[LOCAL].owner[out_vc] = None;
                }
                // a normal grant resets the express starvation streak
                if out < 4 {
                    self.routers[id].out[out].express_streak = 0;
                }
                // per-flit upstream credits for what we dequeued
                if let Some((fr, fp)) = feeder {
                    self.routers[fr].out[fp].credits[g.vc] += popped.len() as u32;
                }
            }
        }
    }

    fn push_delivery(&mut self, d: Delivery) {
        let offset = (d.arrive - self.cycle) as usize;
        while self.inflight.len() < offset + 1 {
            self.inflight.push_back(Vec::new());
        }
        self.inflight[offset].push(d);
    }

    fn commit_delivery(&mut self, d: Delivery) {
        if d.eject {
            let pkt = &mut self.packets[d.flit.packet as usize];
            self.ejected_flits += 1;
            if d.flit.seq as u32 + 1 == pkt.len {
                pkt.eject = Some(self.cycle);
            }
            self.hash_event(2, d.router as u64, d.flit.packet as u64);
            return;
        }
        let mut port = d.port;
        if let Some((from, to)) = self.routers[d.router].swap_target {
            if from.index() == d.port {
                port = to.index();
            }
        }
        let feeder = if d.express {
            None
        } else {
            let up_dir = Direction::from_index(d.port);
            self.neighbor_id(d.router, up_dir).map(|u| (u, up_dir.opposite().index()))
        };
        let vc = &mut self.routers[d.router].inputs[port][d.vc];
        if d.flit.seq == 0 {
            debug_assert!(
                vc.owner.is_none() && vc.buf.is_empty(),
                "header delivered into an occupied VC (interleaving) at cycle {}",
                self.cycle
            );
            vc.owner = Some(d.flit.packet);
            vc.stage = Stage::Rc;
            vc.header_arrived = self.cycle;
            vc.via_master = d.via_master;
            vc.feeder = feeder;
        } else {
            debug_assert_eq!(
                vc.owner,
                Some(d.flit.packet),
                "mid-packet VC ownership change (interleaving) at cycle {}",
                self.cycle
            );
        }
        if vc.buf.is_empty() {
            vc.head_arrived = self.cycle;
        }
        vc.buf.push_back(d.flit);
        debug_assert!(vc.buf.len() <= self.cfg.buf_depth, "buffer overflow");
        self.hash_event(3, (d.router * NUM_PORTS + port) as u64, d.flit.packet as u64);
    }

    // -----------------------------------------------------------------
    // EVC + hub overlay
    // -----------------------------------------------------------------

    fn evc_direction(&self, cur: Tile, dst: Tile) -> Option<Direction> {
        let l = self.cfg.evc_len;
        if cur.y == dst.y && cur.x % l == 0 {
            if dst.x >= cur.x + l {
                return Some(Direction::East);
            }
            if cur.x >= l && dst.x + l <= cur.x {
                return Some(Direction::West);
            }
        }
        if cur.x == dst.x && cur.y % l == 0 {
            if dst.y >= cur.y + l {
                return Some(Direction::North);
            }
            if cur.y >= l && dst.y + l <= cur.y {
                return Some(Direction::South);
            }
        }
        None
    }

    fn evc_sink(&self, cur: Tile, dir: Direction) -> Option<Tile> {
        let l = self.cfg.evc_len as i32;
        let (x, y) = (cur.x as i32, cur.y as i32);
        let (nx, ny) = match dir {
            Direction::East => (x + l, y),
            Direction::West => (x - l, y),
            Direction::North => (x, y + l),
            Direction::South => (x, y - l),
            Direction::Local => return None,
        };
        if nx < 0 || ny < 0 || nx >= self.topo.width as i32 || ny >= self.topo.height as i32 {
            None
        } else {
            Some(Tile::new(nx as u16, ny as u16))
        }
    }

    fn evc_available(&self, id: usize, dir: Direction) -> bool {
        let cur = Tile::from_id(id, self.topo.width);
        let Some(sink) = self.evc_sink(cur, dir) else { return false };
        if self.evc_latch_busy.contains_key(&(id, dir)) {
            return false;
        }
        let sid = sink.id(self.topo.width);
        let sink_port = dir.opposite().index();
        // the reserved sink VC must be idle
        let sink_vc = &self.routers[sid].inputs[sink_port][self.cfg.vcs - 1];
        if sink_vc.owner.is_some() || !sink_vc.buf.is_empty() {
            return false;
        }
        // sink congestion check against the threshold T
        let st = &self.routers[sid].stats[sink_port];
        let cnt = st.wait_cnt[0] + st.wait_cnt[1];
        let wait = if cnt > 0 { (st.wait_sum[0] + st.wait_sum[1]) / cnt as f64 } else { 0.0 };
        if wait > self.cfg.express_threshold {
            return false;
        }
        // dead wires along the segment disable the EVC
        let mut t = cur;
        for _ in 0..self.cfg.evc_len {
            let Some(next) = self.topo.neighbor(t, dir) else { return false };
            if self.faults.channel_dead(t, next) {
                return false;
            }
            t = next;
        }
        true
    }

    fn commit_evc_streams(&mut self) {
        if self.cfg.arch != ArchMode::EvcHub {
            return;
        }
        let l = self.cfg.evc_len as u64;
        for id in 0..self.routers.len() {
            for port in 0..NUM_PORTS {
                for vi in 0..self.cfg.vcs {
                    let (flit, dir, done) = {
                        let stalled = {
                            let vc = &self.routers[id].inputs[port][vi];
                            if vc.stage != Stage::Evc || vc.buf.is_empty() {
                                continue;
                            }
                            let o = vc.out_dir.index();
                            self.routers[id].out[o].express_streak
                                >= self.cfg.starvation_limit
                        };
                        if stalled {
                            // yield one cycle to starving normal traffic
                            let o = self.routers[id].inputs[port][vi].out_dir.index();
                            self.routers[id].out[o].express_streak = 0;
                            continue;
                        }
                        let vc = &mut self.routers[id].inputs[port][vi];
                        let dir = vc.out_dir;
                        let f = vc.buf.pop_front().unwrap();
                        let owner = vc.owner.unwrap();
                        let plen = self.packets[owner as usize].len;
                        let done = f.seq as u32 + 1 == plen;
                        if done {
                            vc.stage = Stage::Idle;
                            vc.owner = None;
                            vc.recovery_rung = 0;
                        }
                        (f, dir, done)
                    };
                    let cur = Tile::from_id(id, self.topo.width);
                    let sink = self.evc_sink(cur, dir).expect("EVC stream without a sink");
                    let sink_id = sink.id(self.topo.width);
                    let sink_port = dir.opposite().index();
                    self.push_delivery(Delivery {
                        arrive: self.cycle + l,
                        router: sink_id,
                        port: sink_port,
                        vc: self.cfg.vcs - 1,
                        flit,
                        via_master: false,
                        eject: false,
                        express: true,
                    });
                    // occupy the segment wires for express priority
                    let mut t = cur;
                    for hop in 0..self.cfg.evc_len {
                        let tid = t.id(self.topo.width);
                        let o = dir.index();
                        let busy = self.cycle + 1 + hop as u64;
                        let out = &mut self.routers[tid].out[o];
                        out.evc_busy_until = out.evc_busy_until.max(busy);
                        out.express_streak = out.express_streak.saturating_add(1);
                        t = self.topo.neighbor(t, dir).unwrap();
                    }
                    // per-flit upstream credit from the source VC
                    if let Some((fr, fp)) = self.routers[id].inputs[port][vi].feeder {
                        self.routers[fr].out[fp].credits[vi] += 1;
                        if done {
                            self.routers[fr].out[fp].owner[vi] = None;
                        }
                    }
                    if done {
                        self.evc_latch_busy.remove(&(id, dir));
                    }
                }
            }
        }
    }

    fn hub_index_of(&self, t: Tile) -> usize {
        let (rx, ry) = self.regions.region_of(t);
        let (rw, _) = self.regions.regions(&self.topo);
        ry as usize * rw as usize + rx as usize
    }

    fn hub_anchor_of(&self, t: Tile) -> Tile {
        let (rx, ry) = self.regions.region_of(t);
        let half = self.regions.region_size / 2;
        let x = (rx * self.regions.region_size + half).min(self.topo.width - 1);
        let y = (ry * self.regions.region_size + half).min(self.topo.height - 1);
        Tile::new(x, y)
    }

    fn commit_hubs(&mut self) {
        let m = self.cfg.packet_len as u64;
        let hs = 5u64; // one full router pipeline in the hub
        for h in 0..self.hubs.len() {
            for q in 0..4 {
                if self.hubs[h].out_busy_until[q] > self.cycle {
                    continue;
                }
                let n = self.hubs[h].inputs.len();
                if n == 0 {
                    continue;
                }
                let rr = self.hubs[h].rr;
                let pick = (0..n).map(|k| (k + rr) % n).find(|&k| {
                    let p = &self.hubs[h].inputs[k];
                    !p.granted && p.out_quadrant == q && p.arrive <= self.cycle
                });
                if let Some(k) = pick {
                    let pid = self.hubs[h].inputs[k].pid;
                    self.hubs[h].inputs[k].granted = true;
                    self.hubs[h].rr = (rr + 1) % n;
                    self.hubs[h].out_busy_until[q] = self.cycle + hs + m;
                    let dst = self.packets[pid as usize].dst;
                    let wire_out = self.hub_anchor_of(dst).dist(dst).max(1) as u64;
                    let eject_at = self.cycle + hs + (m - 1) + wire_out;
                    self.hub_events.push((eject_at, pid));
                }
            }
        }
        let mut done: Vec<u32> = Vec::new();
        self.hub_events.retain(|&(at, pid)| {
            if at <= self.cycle {
                done.push(pid);
                false
            } else {
                true
            }
        });
        for pid in done {
            let (src, len) = {
                let pkt = &mut self.packets[pid as usize];
                pkt.eject = Some(self.cycle);
                (pkt.src, pkt.len)
            };
            self.ejected_flits += len as u64;
            let sid = src.id(self.topo.width);
            self.hub_latch_busy[sid] = false;
            let hub = self.hub_index_of(src);
            self.hubs[hub].inputs.retain(|p| p.pid != pid);
            self.hash_event(4, pid as u64, 0);
        }
    }

    // -----------------------------------------------------------------
    // injection, faults, recovery
    // -----------------------------------------------------------------

    fn commit_injection(&mut self) {
        let width = self.topo.width;
        let inj_bw = if self.cfg.arch.bidirectional() { 2 } else { 1 };
        for id in 0..self.sources.len() {
            let mut born: Vec<(Tile, u32)> = Vec::new();
            {
                let src = &mut self.sources[id];
                for (dst, gen) in &mut src.flows {
                    for _ in 0..gen.arrivals_in_cycle(self.cycle) {
                        born.push((*dst, self.cfg.packet_len));
                    }
                }
                while src.trace_pos < src.trace.len()
                    && src.trace[src.trace_pos].cycle <= self.cycle
                {
                    let t = src.trace[src.trace_pos];
                    born.push((t.dst, t.len));
                    src.trace_pos += 1;
                }
            }
            for (dst, len) in born {
                let pid = self.packets.len() as u32;
                let tile = Tile::from_id(id, width);
                self.packets.push(Packet {
                    id: pid,
                    src: tile,
                    dst,
                    len,
                    birth: self.cycle,
                    inject: None,
                    eject: None,
                    recoveries: 0,
                });
                if self.cfg.arch == ArchMode::EvcHub {
                    let choice = adaptive::express_path_choice(
                        &self.regions,
                        tile,
                        dst,
                        self.cfg.evc_len,
                        !self.hub_latch_busy[id],
                        true,
                        0.0,
                        self.cfg.express_threshold,
                    );
                    if choice == ExpressChoice::Hub {
                        self.hub_latch_busy[id] = true;
                        let anchor = self.hub_anchor_of(tile);
                        let arrive = self.cycle + tile.dist(anchor).max(1) as u64;
                        let hub = self.hub_index_of(tile);
                        self.hubs[hub].inputs.push(HubPacket {
                            pid,
                            arrive,
                            out_quadrant: self.regions.quadrant_of(dst),
                            granted: false,
                        });
                        self.packets[pid as usize].inject = Some(self.cycle);
                        self.injected_flits += len as u64;
                        if self.cycle >= self.measure_from && self.cycle < self.measure_to {
                            self.sq_cnt[id] += 1;
                        }
                        continue;
                    }
                }
                self.sources[id].queue.push_back(pid);
            }
            // feed the local input port
            let mut moved = 0;
            while moved < inj_bw {
                let Some(&pid) = self.sources[id].queue.front() else { break };
                let plen = self.packets[pid as usize].len;
                match self.sources[id].feeding {
                    None => {
                        let free = (0..self.cfg.vcs).find(|&v| {
                            let vc = &self.routers[id].inputs[LOCAL][v];
                            vc.owner.is_none() && vc.buf.is_empty()
                        });
                        let Some(v) = free else { break };
                        {
                            let vc = &mut self.routers[id].inputs[LOCAL][v];
                            vc.owner = Some(pid);
                            vc.stage = Stage::Rc;
                            vc.feeder = None;
                            vc.header_arrived = self.cycle;
                            vc.head_arrived = self.cycle;
                            vc.via_master = false;
                            vc.buf.push_back(Flit { packet: pid, seq: 0 });
                        }
                        self.injected_flits += 1;
                        let birth = {
                            let pkt = &mut self.packets[pid as usize];
                            pkt.inject = Some(self.cycle);
                            pkt.birth
                        };
                        if birth >= self.measure_from && birth < self.measure_to {
                            self.sq_sum[id] += (self.cycle - birth) as f64;
                            self.sq_cnt[id] += 1;
                        }
                        moved += 1;
                        if plen == 1 {
                            self.sources[id].queue.pop_front();
                        } else {
                            self.sources[id].feeding = Some((v, 1));
                        }
                    }
                    Some((v, seq)) => {
                        if self.routers[id].inputs[LOCAL][v].buf.len() >= self.cfg.buf_depth {
                            break;
                        }
                        self.routers[id].inputs[LOCAL][v]
                            .buf
                            .push_back(Flit { packet: pid, seq });
                        self.injected_flits += 1;
                        moved += 1;
                        if seq as u32 + 1 == plen {
                            self.sources[id].feeding = None;
                            self.sources[id].queue.pop_front();
                        } else {
                            self.sources[id].feeding = Some((v, seq + 1));
                        }
                    }
                }
            }
        }
    }

    fn commit_dbs(&mut self) {
        for id in 0..self.routers.len() {
            let Some(phase) = self.routers[id].dbs.as_ref().map(|d| d.phase) else { continue };
            match phase {
                DbsPhase::S0 => {
                    // a transmission request pending toward any faulty port?
                    let faulty = self.routers[id].dbs.as_ref().unwrap().faulty_ports.clone();
                    for fp in faulty {
                        let Some(u) = self.neighbor_id(id, fp) else { continue };
                        let toward = fp.opposite().index();
                        let waiting = self.routers[u]
                            .inputs
                            .iter()
                            .flatten()
                            .any(|vc| vc.stage == Stage::Va && vc.out_dir.index() == toward);
                        if waiting {
                            let dbs = self.routers[id].dbs.as_mut().unwrap();
                            dbs.fp = fp;
                            if dbs.schedule().is_some() {
                                break;
                            }
                        }
                    }
                }
                DbsPhase::S1 => {
                    let sp = self.routers[id].dbs.as_ref().unwrap().sp.unwrap();
                    let drained = self.routers[id].inputs[sp.index()]
                        .iter()
                        .all(|vc| vc.owner.is_none() && vc.buf.is_empty())
                        && !self
                            .inflight
                            .iter()
                            .flatten()
                            .any(|d| d.router == id && d.port == sp.index() && !d.eject);
                    if drained {
                        let fp = self.routers[id].dbs.as_ref().unwrap().fp;
                        self.routers[id].dbs.as_mut().unwrap().enter_swap();
                        self.routers[id].swap_target = Some((fp, sp));
                        if let Some(u) = self.neighbor_id(id, fp) {
                            let up_out = fp.opposite().index();
                            for w in 0..self.cfg.vcs {
                                self.routers[u].out[up_out].credits[w] = self.cfg.buf_depth as u32;
                                self.routers[u].out[up_out].owner[w] = None;
                            }
                        }
                    }
                }
                DbsPhase::S2 => {
                    let dbs = self.routers[id].dbs.as_ref().unwrap();
                    let sp = dbs.sp.unwrap();
                    let fp = dbs.fp;
                    let empty = self.routers[id].inputs[sp.index()]
                        .iter()
                        .all(|vc| vc.owner.is_none() && vc.buf.is_empty());
                    let up_quiet = match self.neighbor_id(id, fp) {
                        Some(u) => {
                            let toward = fp.opposite().index();
                            !self.routers[u]
                                .inputs
                                .iter()
                                .flatten()
                                .any(|vc| vc.owner.is_some() && vc.out_dir.index() == toward
                                    && vc.stage == Stage::Active)
                                && !self
                                    .inflight
                                    .iter()
                                    .flatten()
                                    .any(|d| d.router == id && d.port == fp.index() && !d.eject)
                        }
                        None => true,
                    };
                    if empty && up_quiet {
                        self.routers[id].dbs.as_mut().unwrap().finish();
                        self.routers[id].swap_target = None;
                        if let Some(u) = self.neighbor_id(id, sp) {
                            let up_out = sp.opposite().index();
                            for w in 0..self.cfg.vcs {
                                self.routers[u].out[up_out].credits[w] = self.cfg.buf_depth as u32;
                                self.routers[u].out[up_out].owner[w] = None;
                            }
                        }
                    }
                }
            }
        }
    }

    fn commit_recovery(&mut self, tsh: u64) {
        use crate::fault::RecoveryAction;
        let mut actions: Vec<(usize, usize, usize, RecoveryAction)> = Vec::new();
        for (id, r) in self.routers.iter().enumerate() {
            for (port, vcs) in r.inputs.iter().enumerate() {
                for (vi, vc) in vcs.iter().enumerate() {
                    if vc.owner.is_none() || vc.buf.is_empty() || vc.stage == Stage::Evc {
                        continue;
                    }
                    // only the VC holding the packet header drives recovery;
                    // body-flit stalls resolve through it
                    if vc.buf.front().map(|f| f.seq) != Some(0) {
                        continue;
                    }
                    let waited = self.cycle.saturating_sub(vc.head_arrived);
                    if waited < tsh || self.cycle.saturating_sub(vc.last_recovery) < tsh {
                        continue;
                    }
                    let action = match vc.recovery_rung {
                        0 if r.dbs.is_some() => RecoveryAction::Reswap,
                        0 | 1 => RecoveryAction::Recompute,
                        2 => RecoveryAction::EjectToPe,
                        _ => RecoveryAction::Drop,
                    };
                    actions.push((id, port, vi, action));
                }
            }
        }
        for (id, port, vi, action) in actions {
            match action {
                RecoveryAction::Reswap => {
                    if let Some(dbs) = self.routers[id].dbs.as_mut() {
                        if dbs.phase == DbsPhase::S1 {
                            dbs.reswap();
                        }
                    }
                    let vc = &mut self.routers[id].inputs[port][vi];
                    vc.recovery_rung = 1;
                    vc.last_recovery = self.cycle;
                }
                RecoveryAction::Recompute => {
                    let (held, out_vc) = {
                        let vc = &mut self.routers[id].inputs[port][vi];
                        let held = (vc.stage == Stage::Active).then_some(vc.out_dir);
                        let w = vc.out_vc;
                        vc.stage = Stage::Rc;
                        vc.recovery_rung = 2;
                        vc.last_recovery = self.cycle;
                        (held, w)
                    };
                    if let Some(dir) = held {
                        let o = dir.index();
                        self.routers[id].out[o].owner[out_vc] = None;
                        if o != LOCAL {
                            self.routers[id].re.on_released(o);
                        }
                    }
                }
                RecoveryAction::EjectToPe => {
                    let Some(pid) = self.routers[id].inputs[port][vi].owner else { continue };
                    // eject only when the local NI has free memory slots
                    if self.sources[id].queue.len() >= self.cfg.ni_slots {
                        let vc = &mut self.routers[id].inputs[port][vi];
                        vc.recovery_rung = 3;
                        vc.last_recovery = self.cycle;
                        continue;
                    }
                    self.cancel_packet(pid);
                    let src = self.packets[pid as usize].src.id(self.topo.width);
                    self.packets[pid as usize].recoveries += 1;
                    self.recovered += 1;
                    self.sources[src].queue.push_back(pid);
                    self.hash_event(6, pid as u64, 0);
                }
                RecoveryAction::Drop => {
                    let Some(pid) = self.routers[id].inputs[port][vi].owner else { continue };
                    self.cancel_packet(pid);
                    self.dropped += 1;
                    self.hash_event(5, pid as u64, 0);
                }
            }
        }
    }

    /// Remove every trace of a packet from the network, restoring credits
    /// and ownerships, so it can be re-sent or counted dropped.
    fn cancel_packet(&mut self, pid: u32) {
        for bucket in self.inflight.iter_mut() {
            let before = bucket.len();
            bucket.retain(|d| d.flit.packet != pid);
            self.cancelled_flits += (before - bucket.len()) as u64;
        }
        for id in 0..self.routers.len() {
            for port in 0..NUM_PORTS {
                for vi in 0..self.cfg.vcs {
                    let (n, stage, out_dir, out_vc, feeder) = {
                        let vc = &mut self.routers[id].inputs[port][vi];
                        if vc.owner != Some(pid) {
                            continue;
                        }
                        let n = vc.buf.len() as u64;
                        let stage = vc.stage;
                        let info = (n, stage, vc.out_dir, vc.out_vc, vc.feeder);
                        vc.buf.clear();
                        vc.stage = Stage::Idle;
                        vc.owner = None;
                        vc.recovery_rung = 0;
                        info
                    };
                    self.cancelled_flits += n;
                    if stage == Stage::Active {
                        let o = out_dir.index();
                        self.routers[id].out[o].owner[out_vc] = None;
                        if o != LOCAL {
                            self.routers[id].re.on_released(o);
                        }
                    }
                    if stage == Stage::Evc {
                        self.evc_latch_busy.remove(&(id, out_dir));
                    }
                    if let Some((fr, fp)) = feeder {
                        self.routers[fr].out[fp].owner[vi] = None;
                    }
                }
            }
        }
        // abort an in-progress feed of this packet at its source
        let src = self.packets[pid as usize].src.id(self.topo.width);
        if let Some((v, _)) = self.sources[src].feeding {
            if self.routers[src].inputs[LOCAL][v].owner.is_none() {
                self.sources[src].feeding = None;
            }
        }
        for s in &mut self.sources {
            s.queue.retain(|&q| q != pid);
        }
        self.rebuild_credits();
    }

    /// Recompute upstream credit counters from buffer occupancy plus
    /// in-flight flits; used after packet cancellation.
    fn rebuild_credits(&mut self) {
        let depth = self.cfg.buf_depth as u32;
        for id in 0..self.routers.len() {
            for di in 0..4 {
                let dir = Direction::from_index(di);
                let Some(nb) = self.neighbor_id(id, dir) else { continue };
                let nb_port = dir.opposite().index();
                let effective = self.effective_port(nb, nb_port);
                for w in 0..self.cfg.vcs {
                    let occupancy = self.routers[nb].inputs[effective][w].buf.len() as u32;
                    let flying = self
                        .inflight
                        .iter()
                        .flatten()
                        .filter(|d| !d.eject && d.router == nb && d.port == nb_port && d.vc == w)
                        .count() as u32;
                    self.routers[id].out[di].credits[w] = depth.saturating_sub(occupancy + flying);
                }
            }
        }
    }

    fn effective_port(&self, router: usize, port: usize) -> usize {
        if let Some((from, to)) = self.routers[router].swap_target {
            if from.index() == port {
                return to.index();
            }
        }
        port
    }

    fn shift_pressure_lines(&mut self) {
        for id in 0..self.routers.len() {
            for di in 0..4 {
                let req = self.routers[id].re.req_out(di);
                let c = &mut self.routers[id].ctl[di];
                c.out_hist.pop_front();
                c.out_hist.push_back(req);
            }
        }
        for id in 0..self.routers.len() {
            for di in 0..4 {
                let dir = Direction::from_index(di);
                let (req_in_zero, yielded) = match self.neighbor_id(id, dir) {
                    Some(nb) => {
                        let rin =
                            *self.routers[nb].ctl[dir.opposite().index()].out_hist.front().unwrap();
                        let rout = *self.routers[id].ctl[di].out_hist.front().unwrap();
                        (rin == 0, rout == 0 && rin > 0)
                    }
                    None => (true, false),
                };
                let r = &mut self.routers[id];
                let wrote = r.ctl[di].wrote_master;
                r.ctl[di].guard.push(wrote, req_in_zero, yielded);
                if wrote {
                    r.stats[di].block_cycles += 1;
                }
                r.ctl[di].wrote_master = false;
            }
        }
    }

    fn commit_stats(&mut self) {
        let depth = self.cfg.buf_depth;
        let vcs = self.cfg.vcs;
        for r in self.routers.iter_mut() {
            for port in 0..NUM_PORTS {
                let occ: usize = r.inputs[port].iter().map(|v| v.buf.len()).sum();
                let st = &mut r.stats[port];
                st.free_sum += (depth * vcs - occ) as f64;
                st.free_samples += 1;
            }
        }
        if self.cycle > 0 && self.cycle % self.cfg.fitness_window == 0 {
            let window = self.cfg.fitness_window as f64;
            let alpha = self.cfg.fitness_alpha;
            let start = self.cycle - self.cfg.fitness_window;
            let collect = self.collect_windows;
            let mut windows = Vec::new();
            for r in self.routers.iter_mut() {
                for di in 0..4 {
                    let st = &r.stats[di];
                    let w_slave =
                        if st.wait_cnt[0] > 0 { st.wait_sum[0] / st.wait_cnt[0] as f64 } else { 0.0 };
                    let w_master =
                        if st.wait_cnt[1] > 0 { st.wait_sum[1] / st.wait_cnt[1] as f64 } else { 0.0 };
                    let m_free = st.free_sum / st.free_samples.max(1) as f64;
                    let p_block = (st.block_cycles as f64 / window).min(1.0);
                    let f_slave = adaptive::channel_fitness(m_free, w_slave, alpha);
                    let f_master = adaptive::channel_fitness(m_free, w_master, alpha);
                    let f = adaptive::direction_fitness(f_master, f_slave, p_block);
                    r.fitness[di] = (f, r.fitness[di].0);
                    if collect {
                        let cnt = st.wait_cnt[0] + st.wait_cnt[1];
                        windows.push(ChannelWindow {
                            router: r.tile,
                            dir: Direction::from_index(di),
                            window_start: start,
                            avg_wait: if cnt > 0 {
                                (st.wait_sum[0] + st.wait_sum[1]) / cnt as f64
                            } else {
                                0.0
                            },
                            avg_free_slots: m_free,
                            block_prob: p_block,
                        });
                    }
                }
                r.fitness_updated = self.cycle;
                for st in r.stats.iter_mut() {
                    st.reset_window();
                }
            }
            self.channel_windows.extend(windows);
        }
    }

    // -----------------------------------------------------------------
    // invariants
    // -----------------------------------------------------------------

    fn check_invariants(&self) {
        let buffered: u64 = self
            .routers
            .iter()
            .flat_map(|r| r.inputs.iter().flatten())
            .map(|v| v.buf.len() as u64)
            .sum();
        let flying: u64 = self.inflight.iter().map(|b| b.len() as u64).sum();
        let hub_flits: u64 = self
            .hubs
            .iter()
            .flat_map(|h| h.inputs.iter())
            .map(|p| self.packets[p.pid as usize].len as u64)
            .sum();
        assert_eq!(
            self.injected_flits,
            buffered + flying + self.ejected_flits + self.cancelled_flits + hub_flits,
            "flit conservation broken at cycle {}",
            self.cycle
        );
        for (id, r) in self.routers.iter().enumerate() {
            for di in 0..4 {
                let dir = Direction::from_index(di);
                let Some(nb) = self.neighbor_id(id, dir) else { continue };
                if self.routers[nb].swap_target.is_some() || r.swap_target.is_some() {
                    continue; // rebuilt around swap transitions
                }
                let nb_port = dir.opposite().index();
                for w in 0..self.cfg.vcs {
                    if self.cfg.arch == ArchMode::EvcHub && w == self.cfg.vcs - 1 {
                        continue; // reserved EVC sink lane, not credit-tracked
                    }
                    let occupancy = self.routers[nb].inputs[nb_port][w].buf.len() as u32;
                    let flying = self
                        .inflight
                        .iter()
                        .flatten()
                        .filter(|d| !d.eject && !d.express && d.router == nb && d.port == nb_port && d.vc == w)
                        .count() as u32;
                    assert_eq!(
                        r.out[di].credits[w] + occupancy + flying,
                        self.cfg.buf_depth as u32,
                        "credit mismatch {}:{dir} vc{w} at cycle {}",
                        r.tile,
                        self.cycle
                    );
                }
            }
        }
        for r in &self.routers {
            for vcs in &r.inputs {
                for vc in vcs {
                    if let Some(owner) = vc.owner {
                        for f in &vc.buf {
                            assert_eq!(f.packet, owner, "foreign flit in an owned VC");
                        }
                        for pair in vc.buf.iter().zip(vc.buf.iter().skip(1)) {
                            assert_eq!(pair.0.seq + 1, pair.1.seq, "out-of-order flits in VC");
                        }
                    } else {
                        assert!(vc.buf.is_empty(), "orphan flits in an unowned VC");
                    }
                }
            }
        }
    }

    // -----------------------------------------------------------------
    // run loop and metrics
    // -----------------------------------------------------------------

    /// Run warmup + measurement + drain; metrics cover packets born inside
    /// the measurement window.
    pub fn run(&mut self, warmup: u64, measure: u64) -> Metrics {
        assert!(measure > 0, "measurement window must be positive");
        self.set_measurement(warmup, warmup + measure);
        let end = warmup + measure;
        while self.cycle < end {
            self.step();
        }
        let drain_cap = end + (measure / 2).clamp(2_000, 100_000);
        'drain: while self.cycle < drain_cap {
            for _ in 0..256 {
                if self.cycle >= drain_cap {
                    break;
                }
                self.step();
            }
            let pending = self
                .packets
                .iter()
                .any(|p| p.birth >= warmup && p.birth < end && p.eject.is_none());
            if !pending {
                break 'drain;
            }
        }
        self.metrics()
    }

    pub fn metrics(&self) -> Metrics {
        let mut m = Metrics {
            injected_packets: self.packets.len() as u64,
            event_hash: self.event_hash,
            dropped_packets: self.dropped,
            recovered_packets: self.recovered,
            ..Default::default()
        };
        let mut lat_sum = 0.0;
        for p in &self.packets {
            if p.birth < self.measure_from || p.birth >= self.measure_to {
                continue;
            }
            m.measured_packets += 1;
            match p.eject {
                Some(e) => {
                    m.accepted_packets += 1;
                    let lat = e - p.birth;
                    lat_sum += lat as f64;
                    m.max_latency = m.max_latency.max(lat);
                    m.throughput += p.len as f64;
                }
                None => m.stalled_packets += 1,
            }
        }
        if m.accepted_packets > 0 {
            m.avg_latency = lat_sum / m.accepted_packets as f64;
        }
        let window = (self.measure_to.saturating_sub(self.measure_from)).max(1) as f64;
        m.throughput /= window * self.topo.num_tiles() as f64;
        m
    }

    /// Observed mean channel queuing time (header residence plus flight)
    /// per input channel, for the learning pipeline.
    pub fn observed_cq(&self) -> Vec<(Tile, Direction, f64, u64)> {
        let mut out = Vec::new();
        for r in &self.routers {
            for (pi, st) in r.stats.iter().enumerate() {
                let dir = Direction::from_index(pi);
                let mean = if st.cq_cnt > 0 { st.cq_sum / st.cq_cnt as f64 } else { 0.0 };
                out.push((r.tile, dir, mean, st.cq_cnt));
            }
        }
        out
    }

    /// Observed mean source queuing time per node.
    pub fn observed_sq(&self) -> Vec<(Tile, f64, u64)> {
        (0..self.sq_sum.len())
            .map(|i| {
                let mean =
                    if self.sq_cnt[i] > 0 { self.sq_sum[i] / self.sq_cnt[i] as f64 } else { 0.0 };
                (Tile::from_id(i, self.topo.width), mean, self.sq_cnt[i])
            })
            .collect()
    }

    /// Fraction of window cycles each router spends stalled above the
    /// deadlock threshold (diagnostic).
    pub fn max_head_wait(&self) -> u64 {
        self.routers
            .iter()
            .flat_map(|r| r.inputs.iter().flatten())
            .filter(|vc| !vc.buf.is_empty())
            .map(|vc| self.cycle.saturating_sub(vc.head_arrived))
            .max()
            .unwrap_or(0)
    }
}

impl FitnessView for Network {
    fn direction_fitness(&self, node: Tile, dir: Direction, hops: u32) -> f64 {
        let r = &self.routers[node.id(self.topo.width)];
        let (cur, prev) = r.fitness[dir.index()];
        // ideal broadcast with hop-count delay: values younger than the
        // propagation distance are not visible yet
        if self.cycle.saturating_sub(r.fitness_updated) < hops as u64 {
            prev
        } else {
            cur
        }
    }
}

fn seeded_rng(seed: u64, stream: u64) -> rand_chacha::ChaCha8Rng {
    use rand::SeedableRng;
    let mut s = seed.wrapping_mul(0x9e3779b97f4a7c15).wrapping_add(stream);
    s ^= s >> 31;
    rand_chacha::ChaCha8Rng::seed_from_u64(s)
}

#[cfg(test)]
mod tests;
