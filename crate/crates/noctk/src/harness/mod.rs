//! Experiment orchestration: configuration files, injection-rate sweeps,
//! saturation detection, model persistence, training-data collection, and
//! plot-ready report emission. Every artifact is reproducible from the
//! (config, seed) pair recorded in the manifest.

pub mod training;

use crate::error::{Error, Result};
use crate::queuing::{analyze_network, NetworkAnalysis, QueuingParams};
use crate::sim::routing::RoutingAlgo;
use crate::sim::{ArchMode, Metrics, Network, SelectionPolicy, SimConfig};
use crate::topology::{xy_path, MeshTopology, Tile};
use crate::traffic::{gen_traffic, CoreCommGraph, TrafficPattern, TrafficSpec};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::path::Path;

/// Declarative experiment description (TOML on disk).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub width: u16,
    pub height: u16,
    #[serde(default = "default_arch")]
    pub arch: ArchMode,
    #[serde(default = "default_routing")]
    pub routing: RoutingAlgo,
    #[serde(default = "default_selection")]
    pub selection: SelectionPolicy,
    pub pattern: TrafficPattern,
    /// Injection rates to sweep (packets/cycle/node).
    pub rates: Vec<f64>,
    pub seeds: Vec<u64>,
    #[serde(default = "default_vcs")]
    pub vcs: usize,
    #[serde(default = "default_buf")]
    pub buf_depth: usize,
    #[serde(default = "default_m")]
    pub packet_len: u32,
    #[serde(default = "default_warmup")]
    pub warmup: u64,
    #[serde(default = "default_measure")]
    pub measure: u64,
    #[serde(default)]
    pub trace_path: Option<String>,
    #[serde(default)]
    pub taskgraph_path: Option<String>,
    #[serde(default)]
    pub tables_path: Option<String>,
    /// Fault sweep grid.
    #[serde(default)]
    pub fault_rates: Vec<f64>,
    #[serde(default = "default_alpha")]
    pub fault_alpha: f64,
    #[serde(default)]
    pub deadlock_threshold: Option<u64>,
}

fn default_arch() -> ArchMode {
    ArchMode::Uni
}
fn default_routing() -> RoutingAlgo {
    RoutingAlgo::Xy
}
fn default_selection() -> SelectionPolicy {
    SelectionPolicy::First
}
fn default_vcs() -> usize {
    1
}
fn default_buf() -> usize {
    9
}
fn default_m() -> u32 {
    4
}
fn default_warmup() -> u64 {
    10_000
}
fn default_measure() -> u64 {
    100_000
}
fn default_alpha() -> f64 {
    0.5
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| Error::Config(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg = Self::from_toml(&text)?;
        for p in [&cfg.trace_path, &cfg.taskgraph_path, &cfg.tables_path].into_iter().flatten() {
            let candidate = path.parent().unwrap_or(Path::new(".")).join(p);
            if !Path::new(p).exists() && !candidate.exists() {
                return Err(Error::Config(format!("referenced file `{p}` does not exist")));
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.width < 2 || self.height < 2 {
            return Err(Error::Config("mesh dimensions must be >= 2".into()));
        }
        if self.rates.is_empty() {
            return Err(Error::Config("rates must not be empty".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must be explicit (no wall-clock defaults)".into()));
        }
        if self.measure == 0 {
            return Err(Error::Config("measure window must be positive".into()));
        }
        Ok(())
    }

    pub fn sim_config(&self, seed: u64) -> SimConfig {
        SimConfig {
            width: self.width,
            height: self.height,
            vcs: self.vcs,
            buf_depth: self.buf_depth,
            packet_len: self.packet_len,
            arch: self.arch,
            routing: self.routing,
            selection: self.selection,
            seed,
            deadlock_threshold: self.deadlock_threshold,
            invariant_checks: false,
            ..SimConfig::default()
        }
    }

    /// Stable digest of the canonical config serialization.
    pub fn digest(&self) -> String {
        use sha2::{Digest, Sha256};
        let canon = toml::to_string(self).unwrap_or_default();
        let mut h = Sha256::new();
        h.update(canon.as_bytes());
        let out = h.finalize();
        out.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}

/// One row of a sweep result.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepRow {
    pub rate: f64,
    pub seed: u64,
    pub metrics: Metrics,
}

/// Run the simulation sweep: every (rate, seed) point is an independent
/// network instance; points run concurrently, results come back in a
/// deterministic order.
pub fn run_sim_sweep(cfg: &ExperimentConfig) -> Result<Vec<SweepRow>> {
    let topo = MeshTopology::new(cfg.width, cfg.height, 1e9)?;
    let mut jobs: Vec<(f64, u64)> = Vec::new();
    for &rate in &cfg.rates {
        for &seed in &cfg.seeds {
            jobs.push((rate, seed));
        }
    }
    let rows: Result<Vec<SweepRow>> = jobs
        .par_iter()
        .map(|&(rate, seed)| {
            let mut spec = TrafficSpec::new(cfg.pattern, rate, cfg.packet_len);
            if let Some(tp) = &cfg.trace_path {
                spec.trace_path = Some(tp.into());
            }
            let ccg = gen_traffic(&spec, &topo)?;
            let mut net = Network::new(cfg.sim_config(seed), topo.clone());
            net.set_ccg_traffic(&ccg);
            if let Some(tp) = &cfg.tables_path {
                let text =
                    std::fs::read_to_string(tp).map_err(|e| Error::io(tp.clone(), e))?;
                net.set_tables(crate::thermal::tables_from_text(&text)?);
            }
            let metrics = net.run(cfg.warmup, cfg.measure);
            Ok(SweepRow { rate, seed, metrics })
        })
        .collect();
    let mut rows = rows?;
    rows.sort_by(|a, b| a.rate.total_cmp(&b.rate).then(a.seed.cmp(&b.seed)));
    Ok(rows)
}

/// Analytical sweep over the same rates.
pub fn run_analysis_sweep(cfg: &ExperimentConfig) -> Result<Vec<(f64, NetworkAnalysis, f64)>> {
    let topo = MeshTopology::new(cfg.width, cfg.height, 1e9)?;
    let params = QueuingParams {
        packet_len: cfg.packet_len,
        buf_depth: cfg.buf_depth as u32,
        h_s: 5.0,
        vcs: cfg.vcs,
    };
    let mut out = Vec::new();
    for &rate in &cfg.rates {
        let spec = TrafficSpec::new(cfg.pattern, rate, cfg.packet_len);
        let ccg = gen_traffic(&spec, &topo)?;
        let analysis = analyze_network(&ccg, &topo, xy_path, &params)?;
        let lat = analysis.weighted_mean_latency(&ccg);
        out.push((rate, analysis, lat));
    }
    Ok(out)
}

/// The saturation injection point of a latency-vs-rate curve: the rate at
/// which the latency crosses `mult` times the zero-load latency, linearly
/// interpolated between sweep points.
pub fn saturation_point(points: &[(f64, f64)], mult: f64) -> Option<f64> {
    if points.len() < 2 {
        return None;
    }
    let zero_load = points[0].1;
    let threshold = zero_load * mult;
    for w in points.windows(2) {
        let (r0, l0) = w[0];
        let (r1, l1) = w[1];
        if l0 <= threshold && l1 > threshold {
            let t = (threshold - l0) / (l1 - l0);
            return Some(r0 + t * (r1 - r0));
        }
    }
    if points.last().map(|&(_, l)| l > threshold) == Some(true) {
        points.last().map(|&(r, _)| r)
    } else {
        None
    }
}

/// Mean latency per rate (averaged over seeds), for saturation detection.
pub fn latency_curve(rows: &[SweepRow]) -> Vec<(f64, f64)> {
    let mut acc: Vec<(f64, f64, usize)> = Vec::new();
    for row in rows {
        match acc.iter_mut().find(|(r, _, _)| *r == row.rate) {
            Some((_, sum, n)) => {
                *sum += row.metrics.avg_latency;
                *n += 1;
            }
            None => acc.push((row.rate, row.metrics.avg_latency, 1)),
        }
    }
    acc.into_iter().map(|(r, sum, n)| (r, sum / n as f64)).collect()
}

/// Sweep CSV: one row per (rate, seed) point.
pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from(
        "rate,seed,avg_latency,throughput,accepted,dropped,stalled,measured,max_latency\n",
    );
    for r in rows {
        let m = &r.metrics;
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            r.rate,
            r.seed,
            m.avg_latency,
            m.throughput,
            m.accepted_packets,
            m.dropped_packets,
            m.stalled_packets,
            m.measured_packets,
            m.max_latency
        );
    }
    out
}

/// Manifest embedding the config digest and seeds so artifacts replay.
pub fn manifest(cfg: &ExperimentConfig) -> String {
    format!(
        "# noctk manifest v1\nconfig_digest = \"{}\"\nseeds = {:?}\n\n[config]\n{}",
        cfg.digest(),
        cfg.seeds,
        toml::to_string(cfg).unwrap_or_default()
    )
}

/// Long-format report CSV: labeled series of (x, y) points.
pub fn report_csv(series: &[(&str, Vec<(f64, f64)>)]) -> String {
    let mut out = String::from("series,x,y\n");
    for (label, points) in series {
        for (x, y) in points {
            let _ = writeln!(out, "{label},{x},{y}");
        }
    }
    out
}

/// Relative-error comparison of two (x, y) tables joined on x.
pub fn compare_csv(a: &[(f64, f64)], b: &[(f64, f64)], labels: (&str, &str)) -> String {
    let mut out = format!("x,{},{},rel_error\n", labels.0, labels.1);
    for (x, ya) in a {
        if let Some((_, yb)) = b.iter().find(|(xb, _)| (xb - x).abs() < 1e-12) {
            let err = if *ya != 0.0 { (yb - ya) / ya } else { 0.0 };
            let _ = writeln!(out, "{x},{ya},{yb},{err}");
        }
    }
    out
}

/// Persist a trained model (versioned JSON; `serde_json` round-trips f64
/// exactly for finite values).
pub fn save_model(model: &crate::svr::TrainedModel, path: &Path) -> Result<()> {
    let wrapper = serde_json::json!({
        "format": "noctk-svr-model",
        "version": 1,
        "model": model,
    });
    let text = serde_json::to_string_pretty(&wrapper)
        .map_err(|e| Error::Config(format!("serialize model: {e}")))?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn load_model(path: &Path) -> Result<crate::svr::TrainedModel> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let value: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| Error::Parse { line: 0, msg: e.to_string() })?;
    if value.get("format").and_then(|v| v.as_str()) != Some("noctk-svr-model") {
        return Err(Error::Version("not a noctk SVR model file".into()));
    }
    if value.get("version").and_then(|v| v.as_u64()) != Some(1) {
        return Err(Error::Version(format!(
            "unsupported model file version {:?}",
            value.get("version")
        )));
    }
    let model = value
        .get("model")
        .cloned()
        .ok_or(Error::Version("model payload missing".into()))?;
    serde_json::from_value(model).map_err(|e| Error::Version(format!("model payload: {e}")))
}

/// Synthetic trace generation: regionally biased traffic written in the
/// `cycle src dst length` format. `locality` is the probability that a
/// packet stays within its 4x4 region.
pub fn generate_trace(
    topo: &MeshTopology,
    rate: f64,
    cycles: u64,
    packet_len: u32,
    locality: f64,
    seed: u64,
) -> String {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let regions = crate::adaptive::RegionMap::default();
    let mut out = String::from("# noctk trace v1: cycle src dst length\n");
    let n = topo.num_tiles();
    let mut events: Vec<(u64, usize, usize)> = Vec::new();
    for t in 0..cycles {
        for s in 0..n {
            if rng.gen::<f64>() < rate {
                let src = Tile::from_id(s, topo.width);
                let dst = if rng.gen::<f64>() < locality {
                    // same region, any other tile
                    let (rx, ry) = regions.region_of(src);
                    let size = regions.region_size;
                    loop {
                        let dx = rng.gen_range(0..size.min(topo.width - rx * size));
                        let dy = rng.gen_range(0..size.min(topo.height - ry * size));
                        let cand = Tile::new(rx * size + dx, ry * size + dy);
                        if cand != src {
                            break cand;
                        }
                    }
                } else {
                    loop {
                        let cand = Tile::from_id(rng.gen_range(0..n), topo.width);
                        if cand != src {
                            break cand;
                        }
                    }
                };
                events.push((t, s, dst.id(topo.width)));
            }
        }
    }
    for (t, s, d) in events {
        let _ = writeln!(out, "{t} {s} {d} {packet_len}");
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> ExperimentConfig {
        ExperimentConfig {
            width: 3,
            height: 3,
            arch: ArchMode::Uni,
            routing: RoutingAlgo::Xy,
            selection: SelectionPolicy::First,
            pattern: TrafficPattern::Random,
            rates: vec![0.005, 0.01],
            seeds: vec![1, 2],
            vcs: 1,
            buf_depth: 9,
            packet_len: 4,
            warmup: 200,
            measure: 2_000,
            trace_path: None,
            taskgraph_path: None,
            tables_path: None,
            fault_rates: vec![],
            fault_alpha: 0.5,
            deadlock_threshold: None,
        }
    }

    #[test]
    fn sweep_counts_and_determinism() {
        let cfg = small_cfg();
        let rows = run_sim_sweep(&cfg).unwrap();
        assert_eq!(rows.len(), 4); // 2 rates x 2 seeds
        let rows2 = run_sim_sweep(&cfg).unwrap();
        for (a, b) in rows.iter().zip(&rows2) {
            assert_eq!(a.metrics.event_hash, b.metrics.event_hash);
            assert_eq!(a.metrics.avg_latency, b.metrics.avg_latency);
        }
        let csv = sweep_csv(&rows);
        assert_eq!(csv.lines().count(), 5);
    }

    #[test]
    fn toml_round_trip_and_validation() {
        let cfg = small_cfg();
        let text = toml::to_string(&cfg).unwrap();
        let back = ExperimentConfig::from_toml(&text).unwrap();
        assert_eq!(back.digest(), cfg.digest());
        // empty seeds rejected
        let mut bad = cfg.clone();
        bad.seeds.clear();
        assert!(bad.validate().is_err());
    }

    #[test]
    fn saturation_point_interpolates() {
        let points =
            vec![(0.01, 20.0), (0.02, 22.0), (0.03, 30.0), (0.04, 90.0), (0.05, 400.0)];
        let sat = saturation_point(&points, 3.0).unwrap();
        // threshold 60 crossed between 0.03 and 0.04
        assert!((0.03..0.04).contains(&sat), "sat {sat}");
        // monotone flat curve never saturates
        assert!(saturation_point(&[(0.01, 20.0), (0.02, 21.0)], 3.0).is_none());
    }

    #[test]
    fn report_and_compare_shapes() {
        let r = report_csv(&[("sim", vec![(0.01, 20.0)]), ("model", vec![(0.01, 21.0)])]);
        assert_eq!(r.lines().count(), 3);
        let c = compare_csv(&[(0.01, 20.0)], &[(0.01, 22.0)], ("sim", "model"));
        assert!(c.contains("0.1"), "10% relative error expected: {c}");
        // empty results produce a header-only CSV
        assert_eq!(report_csv(&[]).lines().count(), 1);
    }

    #[test]
    fn model_save_load_round_trip() {
        use crate::svr::{train_svr, FeatureVector, SvrParams};
        let samples: Vec<(FeatureVector, f64)> = (0..10)
            .map(|i| (FeatureVector::custom(vec![i as f64, (i * i) as f64]), i as f64 * 0.5))
            .collect();
        let (model, _) = train_svr(&samples, &SvrParams::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        save_model(&model, &path).unwrap();
        let back = load_model(&path).unwrap();
        assert_eq!(model, back, "bitwise round trip");
        for (x, _) in &samples {
            assert_eq!(model.predict(x).to_bits(), back.predict(x).to_bits());
        }
        // truncated file gives a clean error
        std::fs::write(&path, "{\"format\": \"noctk-svr-model\"").unwrap();
        assert!(load_model(&path).is_err());
        // wrong version refused
        std::fs::write(&path, "{\"format\": \"noctk-svr-model\", \"version\": 99}").unwrap();
        assert!(matches!(load_model(&path), Err(Error::Version(_))));
    }

    #[test]
    fn trace_generation_is_parseable_and_regional() {
        let topo = MeshTopology::new(8, 8, 1e9).unwrap();
        let text = generate_trace(&topo, 0.01, 500, 6, 0.9, 3);
        let trace = crate::sim::inject::parse_trace(&text, 8).unwrap();
        assert!(trace.len() > 100);
        let regions = crate::adaptive::RegionMap::default();
        let local = trace
            .iter()
            .filter(|p| regions.same_region(p.src, p.dst))
            .count() as f64
            / trace.len() as f64;
        assert!(local > 0.8, "locality {local}");
    }
}
