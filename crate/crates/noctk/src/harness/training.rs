//! Training-data collection for the learning-based latency model: run the
//! simulator over (pattern, rate) points, pair per-channel and per-source
//! observations with the analytically derived feature vectors, and emit /
//! ingest the training CSVs.

use crate::error::{Error, Result};
use crate::queuing::{analyze_network, QueuingParams};
use crate::sim::{Network, SimConfig};
use crate::svr::features::FeatureContext;
use crate::svr::{FeatureKind, FeatureVector, CQ_FEATURES, SQ_FEATURES};
use crate::topology::{xy_path, MeshTopology};
use crate::traffic::{gen_traffic, TrafficPattern, TrafficSpec};
use rayon::prelude::*;
use std::fmt::Write as _;

/// Paired channel-queue and source-queue sample sets.
#[derive(Debug, Clone, Default)]
pub struct TrainingSet {
    pub cq: Vec<(FeatureVector, f64)>,
    pub sq: Vec<(FeatureVector, f64)>,
}

impl TrainingSet {
    pub fn extend(&mut self, other: TrainingSet) {
        self.cq.extend(other.cq);
        self.sq.extend(other.sq);
    }
}

/// Simulate one traffic point and join observations with features.
/// The queuing analysis and the simulation must describe the identical
/// configuration; both are derived from the same inputs here.
pub fn collect_point(
    topo: &MeshTopology,
    pattern: TrafficPattern,
    rate: f64,
    sim_cfg: &SimConfig,
    warmup: u64,
    measure: u64,
) -> Result<TrainingSet> {
    if sim_cfg.width != topo.width || sim_cfg.height != topo.height {
        return Err(Error::Config(
            "simulator and analysis configurations do not match".into(),
        ));
    }
    let params = QueuingParams {
        packet_len: sim_cfg.packet_len,
        buf_depth: sim_cfg.buf_depth as u32,
        h_s: 5.0,
        vcs: sim_cfg.vcs,
    };
    let spec = TrafficSpec::new(pattern, rate, sim_cfg.packet_len);
    let ccg = gen_traffic(&spec, topo)?;
    let analysis = analyze_network(&ccg, topo, xy_path, &params)?;
    let ctx = FeatureContext::new(topo, &ccg, &analysis, &params, xy_path);

    let mut net = Network::new(sim_cfg.clone(), topo.clone());
    net.set_ccg_traffic(&ccg);
    net.run(warmup, measure);

    let mut out = TrainingSet::default();
    for (tile, dir, mean, count) in net.observed_cq() {
        if count < 20 {
            continue; // too few packets for a stable observation
        }
        out.cq.push((ctx.extract_cq_features(tile, dir), mean));
    }
    for (tile, mean, count) in net.observed_sq() {
        if count < 20 {
            continue;
        }
        out.sq.push((ctx.extract_sq_features(tile), mean));
    }
    Ok(out)
}

/// Collect over a (pattern x rate) grid; points run concurrently.
pub fn collect_grid(
    topo: &MeshTopology,
    patterns: &[TrafficPattern],
    rates: &[f64],
    sim_cfg: &SimConfig,
    warmup: u64,
    measure: u64,
) -> Result<TrainingSet> {
    let mut jobs = Vec::new();
    for &p in patterns {
        for &r in rates {
            jobs.push((p, r));
        }
    }
    let sets: Result<Vec<TrainingSet>> = jobs
        .par_iter()
        .map(|&(p, r)| collect_point(topo, p, r, sim_cfg, warmup, measure))
        .collect();
    let mut out = TrainingSet::default();
    for s in sets? {
        out.extend(s);
    }
    Ok(out)
}

/// CSV schema: `kind,x0..x18,target`; CQ rows leave the unused trailing
/// slots empty.
pub fn training_csv(set: &TrainingSet) -> String {
    let mut out = String::from("kind,");
    for i in 0..SQ_FEATURES {
        let _ = write!(out, "x{i},");
    }
    out.push_str("target\n");
    for (x, y) in &set.cq {
        out.push_str("cq,");
        for i in 0..SQ_FEATURES {
            if i < CQ_FEATURES {
                let _ = write!(out, "{},", x.values[i]);
            } else {
                out.push(',');
            }
        }
        let _ = writeln!(out, "{y}");
    }
    for (x, y) in &set.sq {
        out.push_str("sq,");
        for v in &x.values {
            let _ = write!(out, "{v},");
        }
        let _ = writeln!(out, "{y}");
    }
    out
}

pub fn training_from_csv(text: &str) -> Result<TrainingSet> {
    let mut out = TrainingSet::default();
    for (i, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != SQ_FEATURES + 2 {
            return Err(Error::Parse { line: i + 1, msg: "bad column count".into() });
        }
        let target: f64 = fields[SQ_FEATURES + 1]
            .parse()
            .map_err(|_| Error::Parse { line: i + 1, msg: "bad target".into() })?;
        let parse = |k: usize, n: usize| -> Result<Vec<f64>> {
            (1..=n)
                .map(|j| {
                    fields[j].parse::<f64>().map_err(|_| Error::Parse {
                        line: i + 1,
                        msg: format!("bad x{} value", j - 1),
                    })
                })
                .collect::<Result<Vec<f64>>>()
                .map(|v| {
                    let _ = k;
                    v
                })
        };
        match fields[0] {
            "cq" => {
                let values = parse(0, CQ_FEATURES)?;
                out.cq.push((FeatureVector::new(FeatureKind::Cq, values), target));
            }
            "sq" => {
                let values = parse(1, SQ_FEATURES)?;
                out.sq.push((FeatureVector::new(FeatureKind::Sq, values), target));
            }
            other => {
                return Err(Error::Parse { line: i + 1, msg: format!("unknown kind `{other}`") })
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn collect_and_round_trip() {
        let topo = MeshTopology::new(4, 4, 1e9).unwrap();
        let mut cfg = SimConfig::wormhole(4, 4);
        cfg.invariant_checks = false;
        let set =
            collect_point(&topo, TrafficPattern::Random, 0.02, &cfg, 500, 4_000).unwrap();
        assert!(!set.cq.is_empty());
        assert!(!set.sq.is_empty());
        // idle channels are filtered by the observation count
        let csv = training_csv(&set);
        let back = training_from_csv(&csv).unwrap();
        assert_eq!(back.cq.len(), set.cq.len());
        assert_eq!(back.sq.len(), set.sq.len());
        for ((x0, y0), (x1, y1)) in set.cq.iter().zip(&back.cq) {
            assert_eq!(x0, x1);
            assert_eq!(y0.to_bits(), y1.to_bits());
        }
    }

    #[test]
    fn config_mismatch_refused() {
        let topo = MeshTopology::new(4, 4, 1e9).unwrap();
        let cfg = SimConfig::wormhole(8, 8);
        assert!(collect_point(&topo, TrafficPattern::Random, 0.02, &cfg, 100, 500).is_err());
    }
}
