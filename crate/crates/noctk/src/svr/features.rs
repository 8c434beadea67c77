//! Feature extraction for the channel/source queuing regressors, plus the
//! network prediction engine that combines both models.
//!
//! Channel-queue layout (11 slots):
//! `[AR_dir, AR_contend(N,E,S,W), F(N,E,S,W), CQ*, S_dir]`
//!
//! Source-queue layout (19 slots):
//! `[Lambda_s, F_s(N,E,S,W), contend(N,E,S,W), CQ*_down(N,E,S,W),
//!   s*_down(N,E,S,W), SQ*, S*]`

use super::{FeatureKind, FeatureVector, TrainedModel};
use crate::error::Result;
use crate::queuing::{NetworkAnalysis, QueuingParams};
use crate::topology::{Direction, LinkId, MeshTopology, Tile, CARDINALS};
use crate::traffic::CoreCommGraph;
use std::collections::BTreeMap;

/// A router input channel: the receiving router and the input port side.
pub type Channel = (Tile, Direction);

/// The link feeding a channel, if the port exists on this mesh.
pub fn link_of_channel(topo: &MeshTopology, router: Tile, dir: Direction) -> Option<LinkId> {
    match dir {
        Direction::Local => Some(LinkId::Injection(router)),
        d => topo.neighbor(router, d).map(|n| LinkId::Internal { from: n, to: router }),
    }
}

/// The channel a link feeds.
pub fn channel_of(topo: &MeshTopology, link: LinkId) -> Channel {
    match link {
        LinkId::Injection(t) | LinkId::Ejection(t) => (t, Direction::Local),
        LinkId::Internal { from, to } => (to, topo.direction_of(to, from)),
    }
}

/// Precomputed traffic geometry shared by all feature extractions.
pub struct FeatureContext<'a> {
    pub topo: &'a MeshTopology,
    pub ccg: &'a CoreCommGraph,
    pub analysis: &'a NetworkAnalysis,
    pub params: &'a QueuingParams,
    /// Per-flow link lists (injection first).
    pub flow_links: Vec<Vec<LinkId>>,
    /// Per router: (flow, in_dir, out_dir) transits.
    transits: BTreeMap<Tile, Vec<(usize, Direction, Direction)>>,
}

impl<'a> FeatureContext<'a> {
    pub fn new<R>(
        topo: &'a MeshTopology,
        ccg: &'a CoreCommGraph,
        analysis: &'a NetworkAnalysis,
        params: &'a QueuingParams,
        route: R,
    ) -> Self
    where
        R: Fn(Tile, Tile) -> Vec<Tile>,
    {
        let flow_links: Vec<Vec<LinkId>> =
            ccg.flows.iter().map(|f| topo.path_links(&route(f.src, f.dst))).collect();
        let mut transits: BTreeMap<Tile, Vec<(usize, Direction, Direction)>> = BTreeMap::new();
        for (fi, links) in flow_links.iter().enumerate() {
            for (i, l) in links.iter().enumerate() {
                let (router, in_dir) = channel_of(topo, *l);
                let out_dir = match links.get(i + 1) {
                    Some(LinkId::Internal { from, to }) => topo.direction_of(*from, *to),
                    _ => Direction::Local, // terminates here
                };
                transits.entry(router).or_default().push((fi, in_dir, out_dir));
            }
        }
        FeatureContext { topo, ccg, analysis, params, flow_links, transits }
    }

    fn rate(&self, fi: usize) -> f64 {
        self.ccg.flows[fi].rate
    }

    /// Arrival rate at a channel.
    pub fn channel_rate(&self, router: Tile, in_dir: Direction) -> f64 {
        self.transits
            .get(&router)
            .map(|ts| {
                ts.iter().filter(|&&(_, d, _)| d == in_dir).map(|&(fi, _, _)| self.rate(fi)).sum()
            })
            .unwrap_or(0.0)
    }

    fn contending(&self, router: Tile, in_dir: Direction, out: Direction) -> f64 {
        self.transits
            .get(&router)
            .map(|ts| {
                ts.iter()
                    .filter(|&&(_, d, o)| d != in_dir && o == out)
                    .map(|&(fi, _, _)| self.rate(fi))
                    .sum()
            })
            .unwrap_or(0.0)
    }

    fn forwarding(&self, router: Tile, in_dir: Direction, out: Direction) -> f64 {
        let total = self.channel_rate(router, in_dir);
        if total <= 0.0 {
            return 0.0; // channels with zero arrivals forward nothing
        }
        let part: f64 = self
            .transits
            .get(&router)
            .map(|ts| {
                ts.iter()
                    .filter(|&&(_, d, o)| d == in_dir && o == out)
                    .map(|&(fi, _, _)| self.rate(fi))
                    .sum()
            })
            .unwrap_or(0.0);
        part / total
    }

    fn cq_star(&self, link: Option<LinkId>) -> f64 {
        link.and_then(|l| self.analysis.cq_star(l)).unwrap_or(self.params.h_s)
    }

    fn s_mean(&self, link: Option<LinkId>) -> f64 {
        link.and_then(|l| self.analysis.link_delays.get(&l))
            .map(|d| d.s_mean)
            .unwrap_or(self.params.packet_len as f64)
    }

    /// Channel-queue feature vector for one input channel.
    pub fn extract_cq_features(&self, router: Tile, in_dir: Direction) -> FeatureVector {
        let link = link_of_channel(self.topo, router, in_dir);
        let mut v = Vec::with_capacity(super::CQ_FEATURES);
        v.push(self.channel_rate(router, in_dir));
        for o in CARDINALS {
            v.push(self.contending(router, in_dir, o));
        }
        for o in CARDINALS {
            v.push(self.forwarding(router, in_dir, o));
        }
        v.push(self.cq_star(link));
        v.push(self.s_mean(link));
        FeatureVector::new(FeatureKind::Cq, v)
    }

    /// Source-queue feature vector for one source tile.
    pub fn extract_sq_features(&self, source: Tile) -> FeatureVector {
        let inj = Some(LinkId::Injection(source));
        let mut v = Vec::with_capacity(super::SQ_FEATURES);
        v.push(self.channel_rate(source, Direction::Local));
        for o in CARDINALS {
            v.push(self.forwarding(source, Direction::Local, o));
        }
        for o in CARDINALS {
            v.push(self.contending(source, Direction::Local, o));
        }
        let down = |o| {
            self.topo
                .neighbor(source, o)
                .map(|n| LinkId::Internal { from: source, to: n })
        };
        for o in CARDINALS {
            let l = down(o);
            v.push(if l.is_some() { self.cq_star(l) } else { 0.0 });
        }
        for o in CARDINALS {
            let l = down(o);
            v.push(if l.is_some() { self.s_mean(l) } else { 0.0 });
        }
        v.push(self.analysis.sq_star(source).unwrap_or(0.0));
        v.push(self.s_mean(inj));
        FeatureVector::new(FeatureKind::Sq, v)
    }

    /// All channels that carry or could carry traffic: every existing input
    /// port of every router.
    pub fn all_channels(&self) -> Vec<Channel> {
        let mut out = Vec::new();
        for t in self.topo.tiles() {
            out.push((t, Direction::Local));
            for d in CARDINALS {
                if self.topo.neighbor(t, d).is_some() {
                    out.push((t, d));
                }
            }
        }
        out
    }

    /// Path channels of one flow, injection channel first.
    pub fn flow_channels(&self, fi: usize) -> Vec<Channel> {
        self.flow_links[fi].iter().map(|l| channel_of(self.topo, *l)).collect()
    }
}

/// Predict per-flow latencies with the trained channel and source models:
/// `L = SQ_hat(src) + sum CQ_hat(channel) + (m - 1)`.
pub fn predict_network(
    ctx: &FeatureContext<'_>,
    model_cq: &TrainedModel,
    model_sq: &TrainedModel,
) -> Result<Vec<f64>> {
    model_cq.check_compatible(FeatureKind::Cq)?;
    model_sq.check_compatible(FeatureKind::Sq)?;
    // memoize per-channel predictions: channels are shared across flows
    let mut cq_cache: BTreeMap<Channel, f64> = BTreeMap::new();
    let mut sq_cache: BTreeMap<Tile, f64> = BTreeMap::new();
    let mut out = Vec::with_capacity(ctx.ccg.flows.len());
    for fi in 0..ctx.ccg.flows.len() {
        let src = ctx.ccg.flows[fi].src;
        let sq = *sq_cache.entry(src).or_insert_with(|| {
            model_sq.predict(&ctx.extract_sq_features(src)).max(0.0)
        });
        let mut total = sq + (ctx.params.packet_len - 1) as f64;
        for ch in ctx.flow_channels(fi) {
            let cq = *cq_cache.entry(ch).or_insert_with(|| {
                model_cq.predict(&ctx.extract_cq_features(ch.0, ch.1)).max(0.0)
            });
            total += cq;
        }
        out.push(total);
    }
    Ok(out)
}
