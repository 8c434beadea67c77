//! Analytical end-to-end latency model.
//!
//! Links are analyzed in link-dependency order (downstream first). Each
//! link gets a transfer time `eta` from a finite-buffer flit queue and an
//! acquisition time `h` from a two-moment M/G/1/K approximation corrected
//! for GE arrivals; source queues use a GE/G/1 closed form. Flow latency is
//! `v_s + sum(eta) + (m - 1) + sum(h)`, scaled by the average VC
//! multiplexing degree when V > 1.

use crate::error::{Error, Result};
use crate::topology::{LinkId, MeshTopology, Tile};
use crate::traffic::CoreCommGraph;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Latency values are capped here once a queue saturates so that sweep
/// plots stay finite; the `saturated` flag carries the real signal.
pub const SATURATION_CAP: f64 = 1e4;

/// A GE arrival process: mean rate and squared coefficient of variation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeArrival {
    pub lambda: f64,
    pub scv: f64,
}

impl GeArrival {
    pub fn new(lambda: f64, scv: f64) -> Self {
        debug_assert!(lambda >= 0.0 && scv > 0.0);
        GeArrival { lambda, scv }
    }

    /// Branching parameter tau = 2 / (1 + C^2), in (0, 2).
    pub fn tau(&self) -> f64 {
        2.0 / (1.0 + self.scv)
    }
}

/// Merge flows into one aggregate GE arrival: rates add, SCV is the
/// rate-weighted average. An all-zero aggregate gets SCV 1 by convention.
pub fn merge_arrivals(flows: &[GeArrival]) -> GeArrival {
    assert!(!flows.is_empty(), "merge_arrivals needs at least one flow");
    let lambda: f64 = flows.iter().map(|f| f.lambda).sum();
    if lambda <= 0.0 {
        return GeArrival { lambda: 0.0, scv: 1.0 };
    }
    let scv = flows.iter().map(|f| f.lambda * f.scv).sum::<f64>() / lambda;
    GeArrival { lambda, scv }
}

/// Per-link delay components.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LinkDelay {
    /// Header transfer time across this link (q + H_s), cycles.
    pub eta: f64,
    /// Path acquisition (contention) time, cycles. Zero for injection links.
    pub h: f64,
    /// Mean channel service time, cycles.
    pub s_mean: f64,
    /// SCV of the channel service time.
    pub s_scv: f64,
    /// Buffer-head waiting delay of the flit queue, cycles.
    pub q: f64,
    pub arrival: GeArrival,
    pub saturated: bool,
}

/// Per-flow latency estimate.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct FlowDelayEstimate {
    pub src: Tile,
    pub dst: Tile,
    /// Source queuing time, cycles.
    pub v_s: f64,
    /// Transfer time including the (m - 1) serialization term, cycles.
    pub eta_sd: f64,
    /// Total acquisition time over the path, cycles.
    pub h_sd: f64,
    /// Average degree of VC multiplexing along the path (1 for wormhole).
    pub vbar: f64,
    pub total: f64,
    pub saturated: bool,
}

/// Mean queue wait (excluding service) of an M/M/1/K system with arrival
/// rate `lambda`, mean service `s`, and capacity `k` (queue + server),
/// experienced by accepted customers.
pub fn mm1k_wait(lambda: f64, s: f64, k: usize) -> f64 {
    if lambda <= 0.0 || s <= 0.0 {
        return 0.0;
    }
    let k = k.max(1);
    let rho = lambda * s;
    let (l, p_k) = if (rho - 1.0).abs() < 1e-9 {
        (k as f64 / 2.0, 1.0 / (k as f64 + 1.0))
    } else {
        let rk1 = rho.powi(k as i32 + 1);
        let p0 = (1.0 - rho) / (1.0 - rk1);
        let l = rho / (1.0 - rho) - (k as f64 + 1.0) * rk1 / (1.0 - rk1);
        (l, p0 * rho.powi(k as i32))
    };
    let lambda_eff = lambda * (1.0 - p_k);
    if lambda_eff <= 0.0 {
        return 0.0;
    }
    (l / lambda_eff - s).max(0.0)
}

/// Two-moment M/G/1/K waiting-time approximation: the Pollaczek-Khinchine
/// mean wait scaled by the finite-capacity factor of the matching M/M/1/K
/// queue. Exact for exponential service; reduces to P-K as K grows.
///
/// This is the one place the M/G/1/K formula lives, so it can be swapped.
pub fn mg1k_wait(lambda: f64, s_mean: f64, s_scv: f64, k: usize) -> f64 {
    mm1k_wait(lambda, s_mean, k) * (1.0 + s_scv.max(0.0)) / 2.0
}

/// Effective blocking span: number of downstream hops a blocked packet can
/// stretch across, and the residual term z.
pub fn blocking_span(m: u32, buf_depth: u32, remaining_hops: usize) -> (usize, f64) {
    let span = ((m / buf_depth.max(1)) as usize).min(remaining_hops);
    // z approximates the time for the header to reach the point where the
    // accumulated buffer space holds the rest of the packet: the residual
    // flit count modulo the buffer depth.
    let z = ((m as i64 - span as i64 * buf_depth as i64).rem_euclid(buf_depth as i64)) as f64;
    (span, z)
}

/// Worst-case delay for the packet head to stretch over the downstream
/// buffers (Lambda hops), given the already-analyzed downstream delays.
/// `downstream` holds (eta, h) for hops i+1, i+2, ... of the flow.
pub fn blocking_delay(
    eta_here: f64,
    m: u32,
    buf_depth: u32,
    downstream: &[(f64, f64)],
    h_s: f64,
) -> f64 {
    let (span, z) = blocking_span(m, buf_depth, downstream.len());
    if span < 1 {
        return 0.0;
    }
    let h_at_span = downstream[span - 1].1;
    let mut x = eta_here + h_at_span + z;
    for &(eta_j, h_j) in &downstream[..span] {
        x += eta_j + h_j + h_s;
    }
    x
}

/// Channel service time for one flow under congestion level `x`.
pub fn service_time(m: u32, x: f64) -> f64 {
    let m = m as f64;
    if x < m {
        (m * (m + x) + 2.0 * x * m) / (m + 2.0 * x)
    } else {
        (m * (m + x) + 2.0 * x * x) / (m + 2.0 * x)
    }
}

/// Path acquisition time: M/G/1/K wait with capacity = number of
/// contending flows, corrected for the second moment of GE arrivals.
pub fn acquisition_time(
    arrival: GeArrival,
    s_mean: f64,
    s_scv: f64,
    contenders: usize,
) -> (f64, bool) {
    assert!(contenders >= 1);
    if arrival.lambda <= 0.0 {
        return (0.0, false);
    }
    let h_star = mg1k_wait(arrival.lambda, s_mean, s_scv, contenders);
    let corr = (s_scv + arrival.scv) / (1.0 + s_scv);
    let h = (h_star * corr).min(SATURATION_CAP);
    let saturated = arrival.lambda * s_mean >= 1.0;
    (h, saturated)
}

/// GE/G/1 source queue waiting time. Diverges at rho = 1; past that the
/// value is capped and flagged.
pub fn source_wait(arrival: GeArrival, s_mean: f64, m: u32) -> (f64, bool) {
    if arrival.lambda <= 0.0 {
        return (0.0, false);
    }
    let rho = arrival.lambda * s_mean;
    if rho >= 1.0 {
        return (SATURATION_CAP, true);
    }
    let m = m as f64;
    let excess = (s_mean - m) * (s_mean - m) / s_mean;
    let v = s_mean / 2.0 * (1.0 + (arrival.scv + arrival.lambda * excess) / (1.0 - rho)) - s_mean;
    (v.clamp(0.0, SATURATION_CAP), v >= SATURATION_CAP)
}

/// Steady-state probabilities of the VC occupancy birth-death chain with
/// state-independent arrival rate `lambda` and mean holding time `t`.
pub fn vc_state_probs(lambda: f64, t: f64, vcs: usize) -> Vec<f64> {
    let rho = (lambda * t).max(0.0);
    let mut probs = Vec::with_capacity(vcs + 1);
    let mut acc = 1.0;
    for _ in 0..=vcs {
        probs.push(acc);
        acc *= rho;
    }
    let sum: f64 = probs.iter().sum();
    for p in &mut probs {
        *p /= sum;
    }
    probs
}

/// Average degree of VC multiplexing: sum(v^2 P_v) / sum(v P_v), defined
/// as 1 for an idle channel.
pub fn vc_multiplex_degree(state_probs: &[f64], vcs: usize) -> f64 {
    assert!(vcs >= 1 && state_probs.len() == vcs + 1);
    let num: f64 = state_probs.iter().enumerate().map(|(v, p)| (v * v) as f64 * p).sum();
    let den: f64 = state_probs.iter().enumerate().map(|(v, p)| v as f64 * p).sum();
    if den <= 0.0 {
        1.0
    } else {
        (num / den).clamp(1.0, vcs as f64)
    }
}

/// Link dependency graph: vertices are links, a directed edge points from
/// a downstream link to the upstream link that depends on it.
#[derive(Debug, Clone, Default)]
pub struct LinkDepGraph {
    pub nodes: Vec<LinkId>,
    pub index: BTreeMap<LinkId, usize>,
    /// Adjacency: edges[d] holds upstream links depending on node d.
    pub edges: Vec<Vec<usize>>,
}

impl LinkDepGraph {
    pub fn add_node(&mut self, link: LinkId) -> usize {
        if let Some(&i) = self.index.get(&link) {
            return i;
        }
        let i = self.nodes.len();
        self.nodes.push(link);
        self.index.insert(link, i);
        self.edges.push(Vec::new());
        i
    }

    pub fn add_edge(&mut self, down: LinkId, up: LinkId) {
        let d = self.add_node(down);
        let u = self.add_node(up);
        if !self.edges[d].contains(&u) {
            self.edges[d].push(u);
        }
    }

    pub fn has_edge(&self, down: LinkId, up: LinkId) -> bool {
        match (self.index.get(&down), self.index.get(&up)) {
            (Some(&d), Some(&u)) => self.edges[d].contains(&u),
            _ => false,
        }
    }
}

/// Build the LDG for a flow set under a deterministic routing function.
pub fn build_ldg<R>(ccg: &CoreCommGraph, topo: &MeshTopology, route: R) -> LinkDepGraph
where
    R: Fn(Tile, Tile) -> Vec<Tile>,
{
    let mut g = LinkDepGraph::default();
    for f in &ccg.flows {
        let links = topo.path_links(&route(f.src, f.dst));
        for l in &links {
            g.add_node(*l);
        }
        for w in links.windows(2) {
            // w[0] is upstream of w[1]: dependency points downstream -> up.
            g.add_edge(w[1], w[0]);
        }
    }
    g
}

/// Topologically order the links so every link appears after all links it
/// depends on. A cycle is a model error (the routing is not deadlock-free).
pub fn topo_order(g: &LinkDepGraph) -> Result<Vec<LinkId>> {
    let n = g.nodes.len();
    let mut indeg = vec![0usize; n];
    for adj in &g.edges {
        for &u in adj {
            indeg[u] += 1;
        }
    }
    let mut stack: Vec<usize> = (0..n).filter(|&i| indeg[i] == 0).collect();
    stack.sort_unstable();
    let mut order = Vec::with_capacity(n);
    while let Some(v) = stack.pop() {
        order.push(v);
        for &u in &g.edges[v] {
            indeg[u] -= 1;
            if indeg[u] == 0 {
                stack.push(u);
            }
        }
    }
    if order.len() < n {
        let cycle: Vec<String> = (0..n)
            .filter(|&i| indeg[i] > 0)
            .map(|i| g.nodes[i].to_string())
            .collect();
        return Err(Error::Model(format!(
            "link dependency graph has a cycle among [{}]; routing input is not deadlock-free",
            cycle.join(", ")
        )));
    }
    Ok(order.into_iter().map(|i| g.nodes[i]).collect())
}

/// Knobs of the analytical model.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct QueuingParams {
    /// Packet length in flits (fixed per run).
    pub packet_len: u32,
    /// Input buffer depth per VC, flits.
    pub buf_depth: u32,
    /// Per-hop pipeline cost: 4 router stages + 1 link cycle.
    pub h_s: f64,
    /// Virtual channels per input port (1 = plain wormhole).
    pub vcs: usize,
}

impl Default for QueuingParams {
    fn default() -> Self {
        QueuingParams { packet_len: 4, buf_depth: 9, h_s: 5.0, vcs: 1 }
    }
}

/// The full analysis output: per-link delays plus per-flow estimates.
/// CQ* = h + eta per channel and SQ* = v per source feed the SVR features.
#[derive(Debug, Clone)]
pub struct NetworkAnalysis {
    pub link_delays: BTreeMap<LinkId, LinkDelay>,
    pub flows: Vec<FlowDelayEstimate>,
    pub saturated: bool,
}

impl NetworkAnalysis {
    pub fn cq_star(&self, link: LinkId) -> Option<f64> {
        self.link_delays.get(&link).map(|d| d.h + d.eta)
    }

    /// Estimated source queuing time; v_s lives in the injection link's
    /// `h` slot.
    pub fn sq_star(&self, tile: Tile) -> Option<f64> {
        self.link_delays.get(&LinkId::Injection(tile)).map(|d| d.h)
    }

    pub fn mean_latency(&self) -> f64 {
        if self.flows.is_empty() {
            return 0.0;
        }
        let w: f64 = self.flows.iter().map(|f| f.total).sum();
        w / self.flows.len() as f64
    }

    /// Flow-rate-weighted mean latency.
    pub fn weighted_mean_latency(&self, ccg: &CoreCommGraph) -> f64 {
        let mut num = 0.0;
        let mut den = 0.0;
        for (f, e) in ccg.flows.iter().zip(&self.flows) {
            num += f.rate * e.total;
            den += f.rate;
        }
        if den > 0.0 {
            num / den
        } else {
            self.mean_latency()
        }
    }

    /// CSV rows (`link_id, lambda, scv, eta, h, s_mean, s_scv`) consumed by
    /// the learning pipeline.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("link_id,lambda,scv,eta,h,s_mean,s_scv\n");
        for (l, d) in &self.link_delays {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                l, d.arrival.lambda, d.arrival.scv, d.eta, d.h, d.s_mean, d.s_scv
            ));
        }
        out
    }
}

/// Run the full analytical chain over a flow set.
pub fn analyze_network<R>(
    ccg: &CoreCommGraph,
    topo: &MeshTopology,
    route: R,
    params: &QueuingParams,
) -> Result<NetworkAnalysis>
where
    R: Fn(Tile, Tile) -> Vec<Tile>,
{
    let m = params.packet_len;
    let b = params.buf_depth;
    let h_s = params.h_s;

    // Per-flow link lists (injection link first).
    let flow_links: Vec<Vec<LinkId>> = ccg
        .flows
        .iter()
        .map(|f| topo.path_links(&route(f.src, f.dst)))
        .collect();

    let ldg = build_ldg(ccg, topo, &route);
    let order = topo_order(&ldg)?;

    // Which flows use each link, and at which hop index.
    let mut users: BTreeMap<LinkId, Vec<(usize, usize)>> = BTreeMap::new();
    for (fi, links) in flow_links.iter().enumerate() {
        for (hop, l) in links.iter().enumerate() {
            users.entry(*l).or_default().push((fi, hop));
        }
    }

    let mut delays: BTreeMap<LinkId, LinkDelay> = BTreeMap::new();
    let mut any_saturated = false;

    for link in &order {
        let Some(flows_here) = users.get(link) else { continue };
        let arrivals: Vec<GeArrival> = flows_here
            .iter()
            .map(|&(fi, _)| GeArrival::new(ccg.flows[fi].rate, ccg.flows[fi].scv))
            .collect();
        let arrival = merge_arrivals(&arrivals);

        // Flit-level queue for the transfer time eta.
        let mut flit_service = 1.0;
        if arrival.lambda > 0.0 {
            let mut acc = 0.0;
            for &(fi, hop) in flows_here {
                let h_next = flow_links[fi]
                    .get(hop + 1)
                    .and_then(|nl| delays.get(nl))
                    .map(|d| d.h)
                    .unwrap_or(0.0);
                acc += ccg.flows[fi].rate * (h_next / m as f64 + 1.0);
            }
            flit_service = acc / arrival.lambda;
        }
        let flit_rate = arrival.lambda * m as f64;
        let q = mm1k_wait(flit_rate, flit_service, b as usize).min(SATURATION_CAP);
        let mut saturated = flit_rate * flit_service >= 1.0;
        let eta = (q + h_s).min(SATURATION_CAP);

        // Per-flow channel service times -> weighted mean and SCV.
        let (mut s_mean, mut s_scv) = (m as f64, 0.0);
        if arrival.lambda > 0.0 {
            let mut sum = 0.0;
            let mut sum_sq = 0.0;
            for &(fi, hop) in flows_here {
                let downstream: Vec<(f64, f64)> = flow_links[fi][hop + 1..]
                    .iter()
                    .map(|nl| delays.get(nl).map(|d| (d.eta, d.h)).unwrap_or((h_s, 0.0)))
                    .collect();
                let x = blocking_delay(eta, m, b, &downstream, h_s);
                let s = service_time(m, x);
                sum += ccg.flows[fi].rate * s;
                sum_sq += ccg.flows[fi].rate * s * s;
            }
            s_mean = sum / arrival.lambda;
            let second = sum_sq / arrival.lambda;
            s_scv = (second / (s_mean * s_mean) - 1.0).max(0.0);
        }

        // Contention wait h per link class.
        let h = match link {
            LinkId::Internal { .. } => {
                let k = flows_here.len().max(1);
                let (h, sat) = acquisition_time(arrival, s_mean, s_scv, k);
                saturated |= sat;
                h
            }
            LinkId::Injection(_) => {
                let (v, sat) = source_wait(arrival, s_mean, m);
                saturated |= sat;
                v
            }
            LinkId::Ejection(_) => 0.0,
        };

        any_saturated |= saturated;
        delays.insert(
            *link,
            LinkDelay { eta, h, s_mean, s_scv, q, arrival, saturated },
        );
    }

    // Assemble per-flow estimates.
    let mut flows = Vec::with_capacity(ccg.flows.len());
    for (fi, f) in ccg.flows.iter().enumerate() {
        let links = &flow_links[fi];
        let mut v_s = 0.0;
        let mut eta_sd = (m - 1) as f64;
        let mut h_sd = 0.0;
        let mut vbar_acc = 0.0;
        let mut vbar_n = 0usize;
        let mut saturated = false;
        for l in links {
            let d = &delays[l];
            saturated |= d.saturated;
            match l {
                LinkId::Injection(_) => {
                    v_s = d.h;
                    eta_sd += d.eta;
                }
                LinkId::Internal { .. } => {
                    eta_sd += d.eta;
                    h_sd += d.h;
                    if params.vcs > 1 {
                        let probs =
                            vc_state_probs(d.arrival.lambda, d.s_mean, params.vcs);
                        vbar_acc += vc_multiplex_degree(&probs, params.vcs);
                        vbar_n += 1;
                    }
                }
                LinkId::Ejection(_) => {}
            }
        }
        let vbar = if params.vcs > 1 && vbar_n > 0 { vbar_acc / vbar_n as f64 } else { 1.0 };
        let total = ((v_s + eta_sd + h_sd) * vbar).min(SATURATION_CAP);
        saturated |= total >= SATURATION_CAP;
        flows.push(FlowDelayEstimate {
            src: f.src,
            dst: f.dst,
            v_s,
            eta_sd,
            h_sd,
            vbar,
            total,
            saturated,
        });
    }

    Ok(NetworkAnalysis { link_delays: delays, flows, saturated: any_saturated })
}
