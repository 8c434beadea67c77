//! Bidirectional channels with flit-level speedup: request extraction,
//! output width control, split sub-buffers, the two-stage switch allocator,
//! and the pipelined-link direction guard. The cycle simulator drives these
//! per-cycle functions; they are pure over their inputs.

use crate::error::{Error, Result};
use std::collections::VecDeque;

/// Per-VC switch arbitration mode set by the output width controller.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SaMode {
    Normal,
    FlitSpeedup,
}

/// Channel width decision for one output direction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OwcDecision {
    pub master_enable: bool,
    pub slave_enable: bool,
    /// The requesting VC may send two flits of the same packet.
    pub flit_speedup: bool,
}

/// Output width control truth table over the delayed pressure pair
/// (local `req_out_d`, neighbor `req_in_d`):
///
/// * `(0, >0)`: both halves yield to the neighbor
/// * `(1, 0)`: slave enabled; in flit-speedup mode the requesting VC may
///   pair two flits
/// * `(2, 0)`: slave enabled for two distinct packets
/// * anything else: master sends, slave receives
pub fn owc_decide(req_out_d: u8, req_in_d: u8, speedup_supported: bool) -> OwcDecision {
    let mut d = OwcDecision { master_enable: true, slave_enable: false, flit_speedup: false };
    if req_out_d == 0 && req_in_d > 0 {
        d.master_enable = false;
    } else if req_out_d == 1 && req_in_d == 0 {
        d.slave_enable = speedup_supported;
        d.flit_speedup = speedup_supported;
    } else if req_out_d >= 2 && req_in_d == 0 {
        d.slave_enable = true;
    }
    d
}

/// Request extractor: counts, per output direction, the VCs that hold a
/// downstream VC grant. The extracted pressure saturates at 2.
#[derive(Debug, Clone, Default)]
pub struct RequestExtractor {
    counts: [i32; 4],
}

impl RequestExtractor {
    /// A VC routed toward `dir` was granted its downstream VC.
    pub fn on_assigned(&mut self, dir: usize) {
        self.counts[dir] += 1;
    }

    /// The tail left and the downstream VC was released.
    pub fn on_released(&mut self, dir: usize) {
        self.counts[dir] -= 1;
        debug_assert!(self.counts[dir] >= 0, "release without matching assign");
    }

    pub fn req_out(&self, dir: usize) -> u8 {
        self.counts[dir].clamp(0, 2) as u8
    }
}

/// Input VC buffer split into two interleaved sub-buffers so one cycle can
/// move two flits. Consecutive flits alternate sub-buffers; the Front and
/// Back bits name the sub-buffer holding the first and last flit.
#[derive(Debug, Clone)]
pub struct SplitVcBuffer<T> {
    s0: VecDeque<T>,
    s1: VecDeque<T>,
    front: bool,
    back: bool,
    cap_each: usize,
}

impl<T> SplitVcBuffer<T> {
    /// `depth` is the logical VC depth in flits; each sub-buffer holds half.
    pub fn new(depth: usize) -> Self {
        SplitVcBuffer {
            s0: VecDeque::new(),
            s1: VecDeque::new(),
            front: false,
            back: true, // first write lands in s0
            cap_each: depth.div_ceil(2),
        }
    }

    pub fn len(&self) -> usize {
        self.s0.len() + self.s1.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn capacity(&self) -> usize {
        2 * self.cap_each
    }

    fn sub(&mut self, one: bool) -> &mut VecDeque<T> {
        if one {
            &mut self.s1
        } else {
            &mut self.s0
        }
    }

    /// Append up to two flits in order. Overflow is a contract violation:
    /// credits must prevent it upstream.
    pub fn write(&mut self, flits: impl IntoIterator<Item = T>) {
        for f in flits {
            let target = !self.back;
            assert!(
                self.sub(target).len() < self.cap_each,
                "split buffer overflow: credits must prevent this"
            );
            self.sub(target).push_back(f);
            self.back = target;
            if self.len() == 1 {
                self.front = target;
            }
        }
    }

    /// Pop `count` flits in logical FIFO order.
    pub fn read(&mut self, count: usize) -> Vec<T> {
        let mut out = Vec::with_capacity(count);
        for _ in 0..count {
            let source = self.front;
            let Some(f) = self.sub(source).pop_front() else {
                break;
            };
            out.push(f);
            self.front = !source;
        }
        out
    }

    pub fn peek(&self, idx: usize) -> Option<&T> {
        // flits alternate starting at `front`
        let (first, second) = if self.front {
            (&self.s1, &self.s0)
        } else {
            (&self.s0, &self.s1)
        };
        if idx % 2 == 0 {
            first.get(idx / 2)
        } else {
            second.get(idx / 2)
        }
    }

    /// Room for `n` more flits respecting the alternation rule.
    pub fn can_accept(&self, n: usize) -> bool {
        let mut s0 = self.s0.len();
        let mut s1 = self.s1.len();
        let mut back = self.back;
        for _ in 0..n {
            let target = !back;
            let len = if target { &mut s1 } else { &mut s0 };
            if *len >= self.cap_each {
                return false;
            }
            *len += 1;
            back = target;
        }
        true
    }
}

/// One switch-allocation request: an active VC with flits ready.
#[derive(Debug, Clone, Copy)]
pub struct SaRequest {
    pub port: usize,
    pub vc: usize,
    pub out: usize,
    pub flits_ready: usize,
    pub credits: usize,
    pub mode: SaMode,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SaGrant {
    pub port: usize,
    pub vc: usize,
    pub out: usize,
    /// 1 or 2 flits; 2 only for a flit-speedup pair.
    pub nflits: usize,
    /// Lane of the first flit: true = master. A pair takes master+slave.
    pub first_on_master: bool,
}

/// Two-stage allocator: a V:2 pick per input port, then a 2N:2 grant per
/// output direction limited by the enabled link halves. The first flit of
/// any cycle maps to the master lane, the second to the slave lane.
pub fn flit_switch_alloc(
    requests: &[SaRequest],
    enabled: &[(bool, bool)],
    rr_in: &mut [usize],
    rr_out: &mut [usize],
    num_ports: usize,
) -> Vec<SaGrant> {
    // input stage: up to two winners per input port
    #[derive(Clone, Copy)]
    struct Winner {
        req: SaRequest,
        nflits: usize,
    }
    let mut winners: Vec<Winner> = Vec::new();
    for port in 0..num_ports {
        let mut here: Vec<&SaRequest> = requests
            .iter()
            .filter(|r| r.port == port && r.flits_ready > 0 && r.credits > 0)
            .collect();
        if here.is_empty() {
            continue;
        }
        here.sort_by_key(|r| r.vc);
        if let Some(sp) = here.iter().find(|r| r.mode == SaMode::FlitSpeedup) {
            // Mode_Dec points both arbiters at the speedup VC
            let n = sp.flits_ready.min(sp.credits).min(2);
            winners.push(Winner { req: **sp, nflits: n });
        } else {
            // two independent V:1 round-robin picks
            let start = rr_in[port] % here.len();
            let first = here[start];
            winners.push(Winner { req: *first, nflits: 1 });
            if here.len() > 1 {
                let second = here[(start + 1) % here.len()];
                winners.push(Winner { req: *second, nflits: 1 });
            }
            rr_in[port] = (start + 1) % here.len();
        }
    }

    // output stage: grant up to the enabled lane count per direction
    let mut grants = Vec::new();
    let outs: std::collections::BTreeSet<usize> = winners.iter().map(|w| w.req.out).collect();
    for out in outs {
        let (master, slave) = enabled[out];
        let capacity = master as usize + slave as usize;
        if capacity == 0 {
            continue;
        }
        let mut cands: Vec<&Winner> = winners.iter().filter(|w| w.req.out == out).collect();
        cands.sort_by_key(|w| (w.req.port, w.req.vc));
        let start = rr_out[out] % cands.len();
        cands.rotate_left(start);
        rr_out[out] = (rr_out[out] + 1) % num_ports.max(1);
        let mut lanes_left = capacity;
        let mut first_lane_master = master;
        for w in cands {
            if lanes_left == 0 {
                break;
            }
            if w.nflits == 2 {
                // a pair needs both lanes; FS_check grants two requests to
                // the same input VC
                if lanes_left >= 2 {
                    grants.push(SaGrant {
                        port: w.req.port,
                        vc: w.req.vc,
                        out,
                        nflits: 2,
                        first_on_master: true,
                    });
                    lanes_left -= 2;
                } else {
                    grants.push(SaGrant {
                        port: w.req.port,
                        vc: w.req.vc,
                        out,
                        nflits: 1,
                        first_on_master: first_lane_master,
                    });
                    lanes_left -= 1;
                    first_lane_master = false;
                }
            } else {
                grants.push(SaGrant {
                    port: w.req.port,
                    vc: w.req.vc,
                    out,
                    nflits: 1,
                    first_on_master: first_lane_master,
                });
                lanes_left -= 1;
                first_lane_master = false;
            }
        }
    }
    grants
}

/// Direction-guard history for one channel pair end.
#[derive(Debug, Clone, Copy, Default)]
pub struct LinkGuardState {
    /// Bit i set: we wrote our master wire i+1 cycles ago.
    pub master_write_hist: u32,
    /// Bit i set: neighbor pressure was zero i+1 cycles ago.
    pub req_in_zero_hist: u32,
    /// Bit i set: i+1 cycles ago the wire was yielded (our pressure zero,
    /// neighbor pressure nonzero), so neighbor flits may be in flight.
    pub yielded_hist: u32,
}

impl LinkGuardState {
    pub fn push(&mut self, wrote_master: bool, req_in_was_zero: bool, yielded: bool) {
        self.master_write_hist = (self.master_write_hist << 1) | wrote_master as u32;
        self.req_in_zero_hist = (self.req_in_zero_hist << 1) | req_in_was_zero as u32;
        self.yielded_hist = (self.yielded_hist << 1) | yielded as u32;
    }
}

/// Filter an OWC decision for a K-stage pipelined link:
///
/// * the master is yielded only after K write-free cycles;
/// * the master may not transmit within K cycles of a yield window, since
///   neighbor flits may still occupy intermediate segments;
/// * the slave lane may be taken only after K cycles of zero neighbor
///   pressure.
///
/// K = 0 degenerates to the base protocol.
pub fn pipelined_link_guard(k: usize, state: &LinkGuardState, d: OwcDecision) -> OwcDecision {
    if k == 0 {
        return d;
    }
    let mask = (1u32 << k) - 1;
    let mut out = d;
    if !d.master_enable && (state.master_write_hist & mask) != 0 {
        out.master_enable = true; // postpone the reversal
    }
    if out.master_enable && (state.yielded_hist & mask) != 0 {
        out.master_enable = false; // drain the neighbor's in-flight flits
    }
    if d.slave_enable && (state.req_in_zero_hist & mask) != mask {
        out.slave_enable = false;
        out.flit_speedup = false;
    }
    out
}

// ---------------------------------------------------------------------------
// Golden-scenario harness
// ---------------------------------------------------------------------------

/// Architectures compared by the two-router micro-benchmark.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScenarioArch {
    Typical,
    InputSpeedup,
    BiNoc,
    Fsnoc,
}

#[derive(Debug, Clone)]
pub struct ScenarioPacket {
    pub name: String,
    pub len: u32,
    pub out_port: String,
    /// Output unavailable until header_send + blockage.
    pub blockage: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScenarioEvent {
    /// Flit placed on the R1 -> R2 channel during this cycle.
    Send,
    /// Flit leaves R2 through its output port during this cycle.
    Depart,
}

#[derive(Debug, Clone)]
pub struct ScenarioRecord {
    pub cycle: u32,
    pub event: ScenarioEvent,
    pub packet: usize,
    pub flit: u32,
    /// 'm' master lane, 's' slave lane, '-' single channel.
    pub lane: char,
}

/// A replayable timing diagram for the two-router micro-benchmark.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub arch: ScenarioArch,
    pub vcs: usize,
    pub packets: Vec<ScenarioPacket>,
    pub records: Vec<ScenarioRecord>,
}

/// Parse the scenario text format: header comments carrying `arch=`,
/// `vcs=` and `packet=name:len:out:blockage` tokens, then one
/// `<cycle> <event> <router> <signal>` record per line, where the signal is
/// `<packet><flit>:<lane>`.
pub fn parse_scenario(text: &str) -> Result<Scenario> {
    let mut arch = None;
    let mut vcs = 2usize;
    let mut packets: Vec<ScenarioPacket> = Vec::new();
    let mut records = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let lineno = i + 1;
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix('#') {
            for tok in rest.split_whitespace() {
                if let Some(v) = tok.strip_prefix("arch=") {
                    arch = Some(match v {
                        "typical" => ScenarioArch::Typical,
                        "speedup" => ScenarioArch::InputSpeedup,
                        "binoc" => ScenarioArch::BiNoc,
                        "fsnoc" => ScenarioArch::Fsnoc,
                        _ => {
                            return Err(Error::Parse {
                                line: lineno,
                                msg: format!("unknown arch `{v}`"),
                            })
                        }
                    });
                } else if let Some(v) = tok.strip_prefix("vcs=") {
                    vcs = v
                        .parse()
                        .map_err(|_| Error::Parse { line: lineno, msg: "bad vcs".into() })?;
                } else if let Some(v) = tok.strip_prefix("packet=") {
                    let parts: Vec<&str> = v.split(':').collect();
                    if parts.len() != 4 {
                        return Err(Error::Parse {
                            line: lineno,
                            msg: "packet needs name:len:out:blockage".into(),
                        });
                    }
                    let bad = |what: &str| Error::Parse {
                        line: lineno,
                        msg: format!("bad packet {what}"),
                    };
                    packets.push(ScenarioPacket {
                        name: parts[0].to_string(),
                        len: parts[1].parse().map_err(|_| bad("length"))?,
                        out_port: parts[2].to_string(),
                        blockage: parts[3].parse().map_err(|_| bad("blockage"))?,
                    });
                }
            }
            continue;
        }
        let toks: Vec<&str> = line.split_whitespace().collect();
        if toks.len() != 4 {
            return Err(Error::Parse {
                line: lineno,
                msg: "record needs `<cycle> <event> <router> <signal>`".into(),
            });
        }
        let cycle: u32 =
            toks[0].parse().map_err(|_| Error::Parse { line: lineno, msg: "bad cycle".into() })?;
        let event = match toks[1] {
            "send" => ScenarioEvent::Send,
            "depart" => ScenarioEvent::Depart,
            other => {
                return Err(Error::Parse { line: lineno, msg: format!("unknown event `{other}`") })
            }
        };
        let expected_router = match event {
            ScenarioEvent::Send => "R1",
            ScenarioEvent::Depart => "R2",
        };
        if toks[2] != expected_router {
            return Err(Error::Parse {
                line: lineno,
                msg: format!("`{}` events belong to {expected_router}", toks[1]),
            });
        }
        let (pf, lane) = toks[3].split_once(':').ok_or(Error::Parse {
            line: lineno,
            msg: "signal needs `<packet><flit>:<lane>`".into(),
        })?;
        let name = &pf[..1];
        let flit: u32 = pf[1..]
            .parse()
            .map_err(|_| Error::Parse { line: lineno, msg: "bad flit number".into() })?;
        let packet = packets
            .iter()
            .position(|p| p.name == name)
            .ok_or(Error::Parse { line: lineno, msg: format!("unknown packet `{name}`") })?;
        let lane = lane.chars().next().unwrap_or('-');
        records.push(ScenarioRecord { cycle, event, packet, flit, lane });
    }
    let arch = arch.ok_or(Error::Parse { line: 1, msg: "missing arch= header".into() })?;
    Ok(Scenario { arch, vcs, packets, records })
}

/// Validate a scenario against the architecture's structural rules and
/// return per-packet tail-departure latencies.
pub fn validate_scenario(s: &Scenario) -> Result<Vec<u32>> {
    use std::collections::BTreeMap;
    let np = s.packets.len();
    let mut send_cycles: Vec<BTreeMap<u32, u32>> = vec![BTreeMap::new(); np];
    let mut depart_cycles: Vec<BTreeMap<u32, u32>> = vec![BTreeMap::new(); np];
    let fail = |msg: String| Error::Contract(format!("scenario invalid: {msg}"));

    for r in &s.records {
        let map = match r.event {
            ScenarioEvent::Send => &mut send_cycles,
            ScenarioEvent::Depart => &mut depart_cycles,
        };
        if map[r.packet].insert(r.flit, r.cycle).is_some() {
            return Err(fail(format!(
                "duplicate {:?} for packet {} flit {}",
                r.event, s.packets[r.packet].name, r.flit
            )));
        }
    }

    for (pi, p) in s.packets.iter().enumerate() {
        for f in 1..=p.len {
            if !send_cycles[pi].contains_key(&f) || !depart_cycles[pi].contains_key(&f) {
                return Err(fail(format!("packet {} flit {f} missing events", p.name)));
            }
        }
        // flit order preserved on both sides
        for f in 1..p.len {
            if send_cycles[pi][&f] > send_cycles[pi][&(f + 1)] {
                return Err(fail(format!("{} sends out of order", p.name)));
            }
            if depart_cycles[pi][&f] > depart_cycles[pi][&(f + 1)] {
                return Err(fail(format!("{} departs out of order", p.name)));
            }
        }
        let header_send = send_cycles[pi][&1];
        let first_depart = depart_cycles[pi][&1];
        if first_depart < header_send + p.blockage.max(1) {
            return Err(fail(format!(
                "{} departs at {first_depart}, blocked until {}",
                p.name,
                header_send + p.blockage.max(1)
            )));
        }
        // store-and-forward: a flit departs the cycle after it crossed
        for f in 1..=p.len {
            if depart_cycles[pi][&f] < send_cycles[pi][&f] + 1 {
                return Err(fail(format!("{} flit {f} departs before arrival", p.name)));
            }
        }
    }

    // per-cycle structural rules
    let mut per_cycle: BTreeMap<u32, Vec<&ScenarioRecord>> = BTreeMap::new();
    for r in &s.records {
        per_cycle.entry(r.cycle).or_default().push(r);
    }
    let bidir = matches!(s.arch, ScenarioArch::BiNoc | ScenarioArch::Fsnoc);
    for (cycle, recs) in &per_cycle {
        let sends: Vec<_> = recs.iter().filter(|r| r.event == ScenarioEvent::Send).collect();
        if bidir {
            for lane in ['m', 's'] {
                let n = sends.iter().filter(|r| r.lane == lane).count();
                if n > 1 {
                    return Err(fail(format!("cycle {cycle}: lane {lane} written twice")));
                }
            }
            for a in &sends {
                for b in &sends {
                    if a.packet == b.packet && a.flit < b.flit {
                        if a.lane != 'm' || b.lane != 's' {
                            return Err(fail(format!(
                                "cycle {cycle}: pair of {} must ride master+slave in order",
                                s.packets[a.packet].name
                            )));
                        }
                        if s.arch != ScenarioArch::Fsnoc {
                            return Err(fail(format!(
                                "cycle {cycle}: same-packet pairing needs flit speedup"
                            )));
                        }
                    }
                }
            }
        } else if sends.len() > 1 {
            return Err(fail(format!("cycle {cycle}: single channel written twice")));
        }
        // departures per output port
        let mut per_out: BTreeMap<&str, usize> = BTreeMap::new();
        for r in recs.iter().filter(|r| r.event == ScenarioEvent::Depart) {
            *per_out.entry(s.packets[r.packet].out_port.as_str()).or_default() += 1;
        }
        let out_cap = if s.arch == ScenarioArch::Fsnoc { 2 } else { 1 };
        for (port, n) in per_out {
            if n > out_cap {
                return Err(fail(format!("cycle {cycle}: output {port} over capacity ({n})")));
            }
        }
        // typical: a single crossbar entry serves the whole input port
        if s.arch == ScenarioArch::Typical {
            let n = recs.iter().filter(|r| r.event == ScenarioEvent::Depart).count();
            if n > 1 {
                return Err(fail(format!("cycle {cycle}: typical NoC departs {n} flits")));
            }
        }
    }

    // VC occupancy at R2: a packet holds a VC from its first send until the
    // tail departs; the slot is reusable in the tail-departure cycle.
    let mut spans: Vec<(u32, u32)> = Vec::new();
    for pi in 0..np {
        let first = send_cycles[pi][&1];
        let last = depart_cycles[pi][&s.packets[pi].len];
        spans.push((first, last));
    }
    let max_cycle = spans.iter().map(|&(_, b)| b).max().unwrap_or(0);
    for c in 1..=max_cycle {
        let occ = spans.iter().filter(|&&(a, b)| a <= c && c < b).count();
        if occ > s.vcs {
            return Err(fail(format!("cycle {c}: {occ} packets occupy {} VCs", s.vcs)));
        }
    }

    Ok(spans.iter().map(|&(_, b)| b).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn owc_truth_table() {
        // (0, 1): both disabled, neighbor takes the pair
        let d = owc_decide(0, 1, true);
        assert!(!d.master_enable && !d.slave_enable);
        // (1, 0): slave enabled, requesting VC in flit-speedup mode
        let d = owc_decide(1, 0, true);
        assert!(d.master_enable && d.slave_enable && d.flit_speedup);
        // same case without speedup support (BiNoC) keeps the slave idle
        let d = owc_decide(1, 0, false);
        assert!(d.master_enable && !d.slave_enable && !d.flit_speedup);
        // (2, 0): both enabled, normal modes
        let d = owc_decide(2, 0, true);
        assert!(d.master_enable && d.slave_enable && !d.flit_speedup);
        // (1, 1): defaults
        let d = owc_decide(1, 1, true);
        assert!(d.master_enable && !d.slave_enable);
    }

    #[test]
    fn request_extractor_caps_at_two() {
        let mut re = RequestExtractor::default();
        assert_eq!(re.req_out(1), 0);
        re.on_assigned(1);
        re.on_assigned(1);
        re.on_assigned(1);
        assert_eq!(re.req_out(1), 2);
        re.on_released(1);
        re.on_released(1);
        assert_eq!(re.req_out(1), 1);
    }

    #[test]
    fn split_buffer_figure_example() {
        // write a..f, read one, write g and h; order must be preserved
        let mut b = SplitVcBuffer::new(16);
        b.write(['a', 'b']);
        b.write(['c', 'd']);
        b.write(['e', 'f']);
        assert_eq!(b.read(1), vec!['a']);
        b.write(['g', 'h']);
        assert_eq!(b.read(2), vec!['b', 'c']);
        assert_eq!(b.read(2), vec!['d', 'e']);
        assert_eq!(b.read(2), vec!['f', 'g']);
        assert_eq!(b.read(1), vec!['h']);
        assert!(b.is_empty());
        // empty read is a no-op
        assert!(b.read(0).is_empty());
    }

    #[test]
    fn split_buffer_fuzz_matches_plain_fifo() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(77);
        let mut split = SplitVcBuffer::new(16);
        let mut plain: VecDeque<u32> = VecDeque::new();
        let mut next = 0u32;
        for _ in 0..20_000 {
            if rng.gen_bool(0.5) {
                let n = rng.gen_range(1..=2usize);
                if split.can_accept(n) {
                    let items: Vec<u32> = (0..n)
                        .map(|_| {
                            next += 1;
                            next
                        })
                        .collect();
                    plain.extend(items.iter().copied());
                    split.write(items);
                }
            } else {
                let n = rng.gen_range(1..=2usize).min(split.len());
                let got = split.read(n);
                let want: Vec<u32> = (0..n).map(|_| plain.pop_front().unwrap()).collect();
                assert_eq!(got, want);
            }
            assert_eq!(split.len(), plain.len());
            if let Some(&head) = plain.front() {
                assert_eq!(split.peek(0), Some(&head));
            }
        }
    }

    fn req(
        port: usize,
        vc: usize,
        out: usize,
        ready: usize,
        credits: usize,
        mode: SaMode,
    ) -> SaRequest {
        SaRequest { port, vc, out, flits_ready: ready, credits, mode }
    }

    #[test]
    fn sa_two_distinct_vcs_both_granted() {
        let reqs =
            vec![req(0, 0, 1, 4, 4, SaMode::Normal), req(0, 1, 1, 4, 4, SaMode::Normal)];
        let enabled = vec![(true, true); 5];
        let grants = flit_switch_alloc(&reqs, &enabled, &mut [0; 5], &mut [0; 5], 5);
        assert_eq!(grants.len(), 2);
        assert!(grants.iter().all(|g| g.nflits == 1));
        assert!(grants.iter().any(|g| g.first_on_master));
        assert!(grants.iter().any(|g| !g.first_on_master));
    }

    #[test]
    fn sa_speedup_pair_rides_master_then_slave() {
        let reqs = vec![req(0, 0, 2, 3, 4, SaMode::FlitSpeedup)];
        let enabled = vec![(true, true); 5];
        let grants = flit_switch_alloc(&reqs, &enabled, &mut [0; 5], &mut [0; 5], 5);
        assert_eq!(grants.len(), 1);
        assert_eq!(grants[0].nflits, 2);
        assert!(grants[0].first_on_master);
    }

    #[test]
    fn sa_slave_disabled_limits_output() {
        let reqs =
            vec![req(0, 0, 1, 4, 4, SaMode::Normal), req(2, 0, 1, 4, 4, SaMode::Normal)];
        let mut enabled = vec![(true, true); 5];
        enabled[1] = (true, false);
        let grants = flit_switch_alloc(&reqs, &enabled, &mut [0; 5], &mut [0; 5], 5);
        assert_eq!(grants.len(), 1);
    }

    #[test]
    fn link_guard_rules() {
        let d_yield =
            OwcDecision { master_enable: false, slave_enable: false, flit_speedup: false };
        // K = 0: pass-through
        let st = LinkGuardState::default();
        assert_eq!(pipelined_link_guard(0, &st, d_yield), d_yield);
        // K = 1, wrote last cycle: reversal never permitted
        let mut st = LinkGuardState::default();
        st.push(true, true, false);
        let out = pipelined_link_guard(1, &st, d_yield);
        assert!(out.master_enable);
        // recent yield blocks master transmission while flits drain
        let d_send = OwcDecision { master_enable: true, slave_enable: false, flit_speedup: false };
        let mut st = LinkGuardState::default();
        st.push(false, false, true);
        let out = pipelined_link_guard(2, &st, d_send);
        assert!(!out.master_enable);
        // slave take requires K cycles of zero pressure
        let d_take = OwcDecision { master_enable: true, slave_enable: true, flit_speedup: true };
        let mut st = LinkGuardState::default();
        st.push(false, false, false);
        st.push(false, true, false);
        let out = pipelined_link_guard(2, &st, d_take);
        assert!(!out.slave_enable && !out.flit_speedup);
        st.push(false, true, false);
        let out = pipelined_link_guard(2, &st, d_take);
        assert!(out.slave_enable);
    }

    #[test]
    fn guard_k2_fuzz_finds_zero_segment_conflicts() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4242);
        let k = 2usize;
        // Two ends of one physical wire (u's master). u writes when its
        // guarded decision keeps the master and it has traffic; v writes
        // when its guarded decision takes the slave lane. Pressure signals
        // travel 2 + k cycles. The checker walks wire segments and pipeline
        // registers.
        let delay = 2 + k;
        let mut u_req: VecDeque<u8> = VecDeque::from(vec![0; delay]);
        let mut v_req: VecDeque<u8> = VecDeque::from(vec![0; delay]);
        let mut u_guard = LinkGuardState::default();
        let mut v_guard = LinkGuardState::default();
        let mut writes: Vec<(u64, bool)> = Vec::new();
        for cycle in 0..1_000_000u64 {
            let u_now: u8 = rng.gen_range(0..3);
            let v_now: u8 = rng.gen_range(0..3);
            let u_out_d = *u_req.front().unwrap();
            let v_out_d = *v_req.front().unwrap();
            let du = pipelined_link_guard(k, &u_guard, owc_decide(u_out_d, v_out_d, true));
            let dv = pipelined_link_guard(k, &v_guard, owc_decide(v_out_d, u_out_d, true));
            let u_writes = du.master_enable && u_out_d > 0;
            let v_writes = dv.slave_enable && v_out_d > 0;
            if u_writes {
                writes.push((cycle, true));
            }
            if v_writes {
                writes.push((cycle, false));
            }
            let u_yielded = u_out_d == 0 && v_out_d > 0;
            u_guard.push(u_writes, v_out_d == 0, u_yielded);
            v_guard.push(v_writes, u_out_d == 0, false);
            u_req.pop_front();
            u_req.push_back(u_now);
            v_req.pop_front();
            v_req.push_back(v_now);
        }
        // a u-write at cycle c occupies segment s at c+s and register r at
        // c+r; a v-write occupies segment k-s at c+s and register r at
        // c+(k+1-r)
        use std::collections::HashMap;
        let mut seg: HashMap<(u64, usize), bool> = HashMap::new();
        let mut reg: HashMap<(u64, usize), bool> = HashMap::new();
        for &(c, from_u) in &writes {
            for st in 0..=k {
                let idx = if from_u { st } else { k - st };
                let t = c + st as u64;
                if let Some(&other) = seg.get(&(t, idx)) {
                    assert_eq!(other, from_u, "wire conflict at cycle {t} segment {idx}");
                } else {
                    seg.insert((t, idx), from_u);
                }
            }
            for r in 1..=k {
                let t = if from_u { c + r as u64 } else { c + (k + 1 - r) as u64 };
                if let Some(&other) = reg.get(&(t, r)) {
                    assert_eq!(other, from_u, "register conflict at cycle {t} register {r}");
                } else {
                    reg.insert((t, r), from_u);
                }
            }
        }
        assert!(writes.len() > 100_000, "fuzz should actually exercise the wire");
    }
}
