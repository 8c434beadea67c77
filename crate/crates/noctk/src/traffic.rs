//! Traffic characterization: synthetic pattern generators, task-graph and
//! trace ingestion, all producing a [`CoreCommGraph`].
//!
//! Pattern definitions are the textbook ones and are frozen here:
//!
//! * `transpose1`: `(x, y) -> (y, x)`
//! * `transpose2`: `(x, y) -> (W-1-y, H-1-x)`
//! * `shuffle`: destination id is the source id rotated left by one bit
//! * `bitreversal`: destination id is the bit-reversed source id
//! * `bitcomplement`: destination id is the complemented source id
//! * `butterfly`: swap the most and least significant id bits
//! * `tornado`: per dimension, shift by `ceil(k/2) - 1`
//!
//! Bit-based patterns require a power-of-two tile count. Self-loop flows
//! produced by a permutation are silently dropped.

use crate::error::{Error, Result};
use crate::topology::{MeshTopology, Tile};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

/// One traffic flow demand between two tiles.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Flow {
    pub src: Tile,
    pub dst: Tile,
    /// Mean packet rate in packets/cycle.
    pub rate: f64,
    /// Squared coefficient of variation of inter-arrival times.
    pub scv: f64,
    /// Bandwidth demand in bits/second, used by the thermal LP.
    pub bandwidth: f64,
}

/// Core communication graph: the per-flow demand set of an application.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct CoreCommGraph {
    pub flows: Vec<Flow>,
}

impl CoreCommGraph {
    pub fn new(flows: Vec<Flow>) -> Result<Self> {
        for f in &flows {
            if f.src == f.dst {
                return Err(Error::Config(format!("flow {}->{} is a self loop", f.src, f.dst)));
            }
            if f.rate < 0.0 || f.scv <= 0.0 {
                return Err(Error::Config(format!(
                    "flow {}->{} has invalid rate/scv ({}, {})",
                    f.src, f.dst, f.rate, f.scv
                )));
            }
        }
        Ok(CoreCommGraph { flows })
    }

    pub fn total_rate(&self) -> f64 {
        self.flows.iter().map(|f| f.rate).sum()
    }

    /// Scale every flow rate by `k` (used for injection-rate sweeps).
    pub fn scaled(&self, k: f64) -> CoreCommGraph {
        let flows = self
            .flows
            .iter()
            .map(|f| Flow { rate: f.rate * k, bandwidth: f.bandwidth * k, ..*f })
            .collect();
        CoreCommGraph { flows }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrafficPattern {
    Random,
    Transpose1,
    Transpose2,
    Shuffle,
    Tornado,
    Bitreversal,
    Bitcomplement,
    Hotspot,
    Butterfly,
    Bursty,
    Trace,
}

impl std::str::FromStr for TrafficPattern {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "random" => TrafficPattern::Random,
            "transpose1" | "transpose" => TrafficPattern::Transpose1,
            "transpose2" => TrafficPattern::Transpose2,
            "shuffle" => TrafficPattern::Shuffle,
            "tornado" => TrafficPattern::Tornado,
            "bitreversal" => TrafficPattern::Bitreversal,
            "bitcomplement" => TrafficPattern::Bitcomplement,
            "hotspot" => TrafficPattern::Hotspot,
            "butterfly" => TrafficPattern::Butterfly,
            "bursty" => TrafficPattern::Bursty,
            "trace" => TrafficPattern::Trace,
            other => return Err(Error::Config(format!("unknown traffic pattern `{other}`"))),
        })
    }
}

/// Synthetic traffic specification.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrafficSpec {
    pub pattern: TrafficPattern,
    /// Packets per cycle per node.
    pub injection_rate: f64,
    /// Packet length in flits.
    pub packet_len: u32,
    /// Hotspot destinations and their extra probability share in [0, 1].
    pub hotspot_nodes: Vec<Tile>,
    pub hotspot_bias: f64,
    /// Inter-arrival SCV used by the bursty pattern.
    pub burst_scv: f64,
    pub trace_path: Option<PathBuf>,
}

impl TrafficSpec {
    pub fn new(pattern: TrafficPattern, injection_rate: f64, packet_len: u32) -> Self {
        TrafficSpec {
            pattern,
            injection_rate,
            packet_len,
            hotspot_nodes: Vec::new(),
            hotspot_bias: 0.1,
            burst_scv: 4.0,
            trace_path: None,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.injection_rate < 0.0 {
            return Err(Error::Config("injection rate must be >= 0".into()));
        }
        if self.packet_len < 1 {
            return Err(Error::Config("packet length must be >= 1 flit".into()));
        }
        if !(0.0..=1.0).contains(&self.hotspot_bias) {
            return Err(Error::Config("hotspot bias must be in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Destination of a permutation pattern for a given source id, or `None`
/// for non-permutation patterns.
pub fn permutation_dest(
    pattern: TrafficPattern,
    topo: &MeshTopology,
    src: Tile,
) -> Result<Option<Tile>> {
    let n = topo.num_tiles();
    let dst = match pattern {
        TrafficPattern::Transpose1 => {
            if topo.width != topo.height {
                return Err(Error::Config("transpose needs a square mesh".into()));
            }
            Some(Tile::new(src.y, src.x))
        }
        TrafficPattern::Transpose2 => {
            if topo.width != topo.height {
                return Err(Error::Config("transpose needs a square mesh".into()));
            }
            Some(Tile::new(topo.width - 1 - src.y, topo.height - 1 - src.x))
        }
        TrafficPattern::Tornado => {
            let sx = (topo.width as u32).div_ceil(2) - 1;
            let sy = (topo.height as u32).div_ceil(2) - 1;
            Some(Tile::new(
                ((src.x as u32 + sx) % topo.width as u32) as u16,
                ((src.y as u32 + sy) % topo.height as u32) as u16,
            ))
        }
        TrafficPattern::Shuffle
        | TrafficPattern::Bitreversal
        | TrafficPattern::Bitcomplement
        | TrafficPattern::Butterfly => {
            if !n.is_power_of_two() {
                return Err(Error::Config(format!(
                    "pattern {pattern:?} needs a power-of-two tile count, got {n}"
                )));
            }
            let bits = n.trailing_zeros();
            let s = src.id(topo.width);
            let d = match pattern {
                TrafficPattern::Shuffle => ((s << 1) | (s >> (bits - 1))) & (n - 1),
                TrafficPattern::Bitreversal => {
                    let mut d = 0usize;
                    for b in 0..bits {
                        if s & (1 << b) != 0 {
                            d |= 1 << (bits - 1 - b);
                        }
                    }
                    d
                }
                TrafficPattern::Bitcomplement => !s & (n - 1),
                TrafficPattern::Butterfly => {
                    if bits < 2 {
                        s
                    } else {
                        let lo = s & 1;
                        let hi = (s >> (bits - 1)) & 1;
                        (s & !(1 | (1 << (bits - 1)))) | (lo << (bits - 1)) | hi
                    }
                }
                _ => unreachable!(),
            };
            Some(Tile::from_id(d, topo.width))
        }
        _ => None,
    };
    Ok(dst)
}

/// Build a [`CoreCommGraph`] from a synthetic or trace traffic spec.
pub fn gen_traffic(spec: &TrafficSpec, topo: &MeshTopology) -> Result<CoreCommGraph> {
    spec.validate()?;
    let n = topo.num_tiles();
    let bits_per_packet = spec.packet_len as f64 * 32.0;
    let mk = |src: Tile, dst: Tile, rate: f64, scv: f64| Flow {
        src,
        dst,
        rate,
        scv,
        bandwidth: rate * bits_per_packet,
    };
    let mut flows = Vec::new();
    match spec.pattern {
        TrafficPattern::Random | TrafficPattern::Bursty => {
            let scv = if spec.pattern == TrafficPattern::Bursty { spec.burst_scv } else { 1.0 };
            let per_dst = spec.injection_rate / (n - 1) as f64;
            for s in topo.tiles() {
                for d in topo.tiles() {
                    if s != d && per_dst > 0.0 {
                        flows.push(mk(s, d, per_dst, scv));
                    }
                }
            }
        }
        TrafficPattern::Hotspot => {
            if spec.hotspot_nodes.is_empty() {
                return Err(Error::Config("hotspot pattern needs hotspot_nodes".into()));
            }
            // Hotspot destinations get a share larger by `bias` relative to
            // the uniform weight of 1.
            for s in topo.tiles() {
                let mut weights: Vec<(Tile, f64)> = Vec::with_capacity(n - 1);
                for d in topo.tiles() {
                    if d == s {
                        continue;
                    }
                    let w = if spec.hotspot_nodes.contains(&d) { 1.0 + spec.hotspot_bias } else { 1.0 };
                    weights.push((d, w));
                }
                let total: f64 = weights.iter().map(|(_, w)| w).sum();
                for (d, w) in weights {
                    let r = spec.injection_rate * w / total;
                    if r > 0.0 {
                        flows.push(mk(s, d, r, 1.0));
                    }
                }
            }
        }
        TrafficPattern::Trace => {
            let path = spec
                .trace_path
                .as_ref()
                .ok_or_else(|| Error::Config("trace pattern needs trace_path".into()))?;
            return load_trace_ccg(path, topo, spec.packet_len);
        }
        _ => {
            for s in topo.tiles() {
                if let Some(d) = permutation_dest(spec.pattern, topo, s)? {
                    if d != s && spec.injection_rate > 0.0 {
                        flows.push(mk(s, d, spec.injection_rate, 1.0));
                    }
                }
            }
        }
    }
    CoreCommGraph::new(flows)
}

/// Parse a trace file (`cycle src dst length` per line) into aggregate
/// per-pair rates. SCV is estimated from the per-pair inter-arrival samples.
pub fn load_trace_ccg(path: &Path, topo: &MeshTopology, packet_len: u32) -> Result<CoreCommGraph> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut arrivals: BTreeMap<(usize, usize), Vec<u64>> = BTreeMap::new();
    let mut horizon = 0u64;
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut it = line.split_whitespace();
        let parse = |tok: Option<&str>, what: &str, lineno: usize| -> Result<u64> {
            tok.ok_or_else(|| Error::Parse { line: lineno, msg: format!("missing {what}") })?
                .parse::<u64>()
                .map_err(|_| Error::Parse { line: lineno, msg: format!("bad {what} token") })
        };
        let cycle = parse(it.next(), "cycle", i + 1)?;
        let src = parse(it.next(), "src", i + 1)? as usize;
        let dst = parse(it.next(), "dst", i + 1)? as usize;
        let _len = parse(it.next(), "length", i + 1)?;
        if src >= topo.num_tiles() || dst >= topo.num_tiles() {
            return Err(Error::Parse { line: i + 1, msg: "tile id outside mesh".into() });
        }
        horizon = horizon.max(cycle + 1);
        arrivals.entry((src, dst)).or_default().push(cycle);
    }
    let mut flows = Vec::new();
    for ((s, d), mut times) in arrivals {
        if s == d {
            continue;
        }
        times.sort_unstable();
        let rate = times.len() as f64 / horizon.max(1) as f64;
        let scv = if times.len() >= 3 {
            let gaps: Vec<f64> =
                times.windows(2).map(|w| (w[1] - w[0]) as f64).collect();
            let mean = gaps.iter().sum::<f64>() / gaps.len() as f64;
            if mean > 0.0 {
                let var =
                    gaps.iter().map(|g| (g - mean) * (g - mean)).sum::<f64>() / gaps.len() as f64;
                (var / (mean * mean)).max(0.05)
            } else {
                1.0
            }
        } else {
            1.0
        };
        flows.push(Flow {
            src: Tile::from_id(s, topo.width),
            dst: Tile::from_id(d, topo.width),
            rate,
            scv,
            bandwidth: rate * packet_len as f64 * 32.0,
        });
    }
    CoreCommGraph::new(flows)
}

/// Load a task-graph file.
///
/// Grammar (one statement per line, `#` comments):
///
/// ```text
/// map  <task>  <x> <y>          # or: map <task> <tile-id>
/// edge <src-task> <dst-task> <rate> <scv> <bw>
/// ```
///
/// Duplicate edges are merged (rates and bandwidths added, SCV
/// rate-averaged) and reported as warnings. Edges naming an unmapped task
/// are rejected.
pub fn load_task_graph(
    text: &str,
    topo: &MeshTopology,
) -> Result<(CoreCommGraph, Vec<String>)> {
    let mut mapping: BTreeMap<String, Tile> = BTreeMap::new();
    let mut merged: BTreeMap<(Tile, Tile), Flow> = BTreeMap::new();
    let mut warnings = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let lineno = i + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let toks: Vec<&str> = line.split_whitespace().collect();
        match toks[0] {
            "map" => {
                let tile = match toks.len() {
                    3 => {
                        let id: usize = toks[2].parse().map_err(|_| Error::Parse {
                            line: lineno,
                            msg: format!("bad tile id `{}`", toks[2]),
                        })?;
                        if id >= topo.num_tiles() {
                            return Err(Error::Parse {
                                line: lineno,
                                msg: format!("tile id {id} outside {}x{} mesh", topo.width, topo.height),
                            });
                        }
                        Tile::from_id(id, topo.width)
                    }
                    4 => {
                        let x: u16 = toks[2].parse().map_err(|_| Error::Parse {
                            line: lineno,
                            msg: format!("bad x coordinate `{}`", toks[2]),
                        })?;
                        let y: u16 = toks[3].parse().map_err(|_| Error::Parse {
                            line: lineno,
                            msg: format!("bad y coordinate `{}`", toks[3]),
                        })?;
                        let t = Tile::new(x, y);
                        if !topo.contains(t) {
                            return Err(Error::Parse {
                                line: lineno,
                                msg: format!("tile {t} outside mesh"),
                            });
                        }
                        t
                    }
                    _ => {
                        return Err(Error::Parse {
                            line: lineno,
                            msg: "map needs `map <task> <x> <y>` or `map <task> <id>`".into(),
                        })
                    }
                };
                mapping.insert(toks[1].to_string(), tile);
            }
            "edge" => {
                if toks.len() != 6 {
                    return Err(Error::Parse {
                        line: lineno,
                        msg: "edge needs `edge <src> <dst> <rate> <scv> <bw>`".into(),
                    });
                }
                let lookup = |name: &str| -> Result<Tile> {
                    mapping.get(name).copied().ok_or_else(|| Error::Parse {
                        line: lineno,
                        msg: format!("task `{name}` is not mapped"),
                    })
                };
                let src = lookup(toks[1])?;
                let dst = lookup(toks[2])?;
                let num = |tok: &str, what: &str| -> Result<f64> {
                    tok.parse::<f64>().map_err(|_| Error::Parse {
                        line: lineno,
                        msg: format!("bad {what} token `{tok}`"),
                    })
                };
                let rate = num(toks[3], "rate")?;
                let scv = num(toks[4], "scv")?;
                let bw = num(toks[5], "bw")?;
                if src == dst {
                    return Err(Error::Parse {
                        line: lineno,
                        msg: format!("edge {}->{} maps both tasks to tile {src}", toks[1], toks[2]),
                    });
                }
                if let Some(prev) = merged.get_mut(&(src, dst)) {
                    warnings.push(format!(
                        "line {lineno}: duplicate edge {}->{} merged",
                        toks[1], toks[2]
                    ));
                    let total = prev.rate + rate;
                    if total > 0.0 {
                        prev.scv = (prev.scv * prev.rate + scv * rate) / total;
                    }
                    prev.rate = total;
                    prev.bandwidth += bw;
                } else {
                    merged.insert((src, dst), Flow { src, dst, rate, scv, bandwidth: bw });
                }
            }
            other => {
                return Err(Error::Parse {
                    line: lineno,
                    msg: format!("unknown statement `{other}`"),
                })
            }
        }
    }
    let ccg = CoreCommGraph::new(merged.into_values().collect())?;
    Ok((ccg, warnings))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mesh(w: u16, h: u16) -> MeshTopology {
        MeshTopology::new(w, h, 1e9).unwrap()
    }

    #[test]
    fn transpose1_matches_paper_example() {
        let topo = mesh(4, 4);
        let spec = TrafficSpec::new(TrafficPattern::Transpose1, 0.01, 4);
        let ccg = gen_traffic(&spec, &topo).unwrap();
        let f: Vec<_> =
            ccg.flows.iter().filter(|f| f.src == Tile::new(1, 3)).collect();
        assert_eq!(f.len(), 1);
        assert_eq!(f[0].dst, Tile::new(3, 1));
    }

    #[test]
    fn random_targets_all_others_uniformly() {
        let topo = mesh(3, 3);
        let spec = TrafficSpec::new(TrafficPattern::Random, 0.08, 4);
        let ccg = gen_traffic(&spec, &topo).unwrap();
        assert_eq!(ccg.flows.len(), 9 * 8);
        for f in &ccg.flows {
            assert!((f.rate - 0.01).abs() < 1e-12);
        }
        assert!((ccg.total_rate() - 0.08 * 9.0).abs() < 1e-9);
    }

    // Standalone permutation oracles, computed by a different route than the
    // implementation (modular arithmetic / digit loops instead of bit ops).
    fn oracle_shuffle(s: usize, n: usize) -> usize {
        if s == n - 1 {
            n - 1
        } else {
            (2 * s) % (n - 1)
        }
    }

    fn oracle_bitreversal(s: usize, n: usize) -> usize {
        let bits = (n as f64).log2().round() as u32;
        let mut v = s;
        let mut out = 0;
        for _ in 0..bits {
            out = out * 2 + (v % 2);
            v /= 2;
        }
        out
    }

    fn oracle_bitcomplement(s: usize, n: usize) -> usize {
        n - 1 - s
    }

    #[test]
    fn bit_patterns_match_independent_oracles() {
        let topo = mesh(4, 4);
        let n = 16;
        for s in 0..n {
            let src = Tile::from_id(s, 4);
            let d =
                permutation_dest(TrafficPattern::Shuffle, &topo, src).unwrap().unwrap();
            assert_eq!(d.id(4), oracle_shuffle(s, n), "shuffle {s}");
            let d = permutation_dest(TrafficPattern::Bitreversal, &topo, src)
                .unwrap()
                .unwrap();
            assert_eq!(d.id(4), oracle_bitreversal(s, n), "bitrev {s}");
            let d = permutation_dest(TrafficPattern::Bitcomplement, &topo, src)
                .unwrap()
                .unwrap();
            assert_eq!(d.id(4), oracle_bitcomplement(s, n), "bitcomp {s}");
        }
    }

    #[test]
    fn tornado_shifts_by_half_minus_one() {
        let topo = mesh(4, 4);
        let d = permutation_dest(TrafficPattern::Tornado, &topo, Tile::new(0, 0))
            .unwrap()
            .unwrap();
        assert_eq!(d, Tile::new(1, 1));
        let d = permutation_dest(TrafficPattern::Tornado, &topo, Tile::new(3, 2))
            .unwrap()
            .unwrap();
        assert_eq!(d, Tile::new(0, 3));
    }

    #[test]
    fn permutations_are_bijections() {
        let topo = mesh(4, 4);
        for pattern in [
            TrafficPattern::Transpose1,
            TrafficPattern::Transpose2,
            TrafficPattern::Shuffle,
            TrafficPattern::Tornado,
            TrafficPattern::Bitreversal,
            TrafficPattern::Bitcomplement,
            TrafficPattern::Butterfly,
        ] {
            let mut seen = std::collections::BTreeSet::new();
            for s in topo.tiles() {
                let d = permutation_dest(pattern, &topo, s).unwrap().unwrap();
                assert!(seen.insert(d), "{pattern:?} not injective at {s}");
            }
            assert_eq!(seen.len(), 16);
        }
    }

    #[test]
    fn injected_rate_accounts_for_dropped_self_loops() {
        let topo = mesh(4, 4);
        let spec = TrafficSpec::new(TrafficPattern::Transpose1, 0.02, 4);
        let ccg = gen_traffic(&spec, &topo).unwrap();
        // the four diagonal tiles map to themselves and are dropped
        assert_eq!(ccg.flows.len(), 12);
        assert!((ccg.total_rate() - 0.02 * 12.0).abs() < 1e-12);
        // bitcomplement has no fixed points: full rate preserved
        let spec = TrafficSpec::new(TrafficPattern::Bitcomplement, 0.02, 4);
        let ccg = gen_traffic(&spec, &topo).unwrap();
        assert!((ccg.total_rate() - 0.02 * 16.0).abs() < 1e-12);
    }

    #[test]
    fn hotspot_bias_shifts_share() {
        let topo = mesh(4, 4);
        let mut spec = TrafficSpec::new(TrafficPattern::Hotspot, 0.1, 4);
        spec.hotspot_nodes = vec![Tile::new(0, 0)];
        spec.hotspot_bias = 0.1;
        let ccg = gen_traffic(&spec, &topo).unwrap();
        let src = Tile::new(3, 3);
        let hot = ccg
            .flows
            .iter()
            .find(|f| f.src == src && f.dst == Tile::new(0, 0))
            .unwrap();
        let cold = ccg
            .flows
            .iter()
            .find(|f| f.src == src && f.dst == Tile::new(1, 0))
            .unwrap();
        assert!((hot.rate / cold.rate - 1.1).abs() < 1e-12);
    }

    const FIG_TASKGRAPH: &str = "\
# motivation example: three pairs on a 3x2 mesh
map P0 0 0
map P1 1 0
map P2 2 0
map P3 0 1
map P4 1 1
map P5 2 1
edge P3 P1 0.01 1.0 1000
edge P1 P5 0.01 1.0 1000
edge P4 P0 0.01 1.0 1000
";

    #[test]
    fn task_graph_happy_path() {
        let topo = mesh(3, 2);
        let (ccg, warnings) = load_task_graph(FIG_TASKGRAPH, &topo).unwrap();
        assert!(warnings.is_empty());
        assert_eq!(ccg.flows.len(), 3);
        let pairs: Vec<(usize, usize)> =
            ccg.flows.iter().map(|f| (f.src.id(3), f.dst.id(3))).collect();
        assert!(pairs.contains(&(3, 1)));
        assert!(pairs.contains(&(1, 5)));
        assert!(pairs.contains(&(4, 0)));
    }

    #[test]
    fn task_graph_empty_and_errors() {
        let topo = mesh(3, 2);
        let (ccg, _) = load_task_graph("# nothing\n", &topo).unwrap();
        assert!(ccg.flows.is_empty());

        let bad = "map A 0 0\nmap B 1 0\nedge A B x 1.0 10\n";
        match load_task_graph(bad, &topo) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }

        let unmapped = "map A 0 0\nedge A B 1.0 1.0 10\n";
        assert!(load_task_graph(unmapped, &topo).is_err());
    }

    #[test]
    fn task_graph_duplicate_edges_merge_with_warning() {
        let topo = mesh(3, 2);
        let text = "map A 0 0\nmap B 1 0\nedge A B 0.01 1.0 10\nedge A B 0.03 2.0 10\n";
        let (ccg, warnings) = load_task_graph(text, &topo).unwrap();
        assert_eq!(ccg.flows.len(), 1);
        assert_eq!(warnings.len(), 1);
        let f = &ccg.flows[0];
        assert!((f.rate - 0.04).abs() < 1e-12);
        assert!((f.scv - 1.75).abs() < 1e-12);
        assert!((f.bandwidth - 20.0).abs() < 1e-12);
    }
}
