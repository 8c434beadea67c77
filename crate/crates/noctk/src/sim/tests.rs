use super::inject::TracePacket;
use super::*;
use crate::traffic::{gen_traffic, TrafficPattern, TrafficSpec};

fn mesh(w: u16, h: u16) -> MeshTopology {
    MeshTopology::new(w, h, 1e9).unwrap()
}

fn one_packet_net(cfg: SimConfig, src: (u16, u16), dst: (u16, u16), at: u64) -> Network {
    let topo = mesh(cfg.width, cfg.height);
    let mut net = Network::new(cfg, topo);
    net.set_trace(&[TracePacket {
        cycle: at,
        src: Tile::new(src.0, src.1),
        dst: Tile::new(dst.0, dst.1),
        len: 4,
    }]);
    net
}

/// Golden hand trace: one 4-flit packet over one hop with the 4-stage
/// pipeline and 1 link cycle. Injection lands the header in the local
/// buffer during cycle 0; RC 1, VA 2, SA 3, arrival at the end of cycle 5;
/// at the destination RC 6, VA 7, SA 8, ejection at the end of cycle 10.
/// The tail follows three cycles behind on each leg and ejects at 13.
#[test]
fn golden_one_hop_pipeline_trace() {
    let mut cfg = SimConfig::wormhole(2, 2);
    cfg.invariant_checks = true;
    let mut net = one_packet_net(cfg, (0, 0), (1, 0), 0);
    for _ in 0..40 {
        net.step();
    }
    let p = &net.packets[0];
    assert_eq!(p.inject, Some(0));
    assert_eq!(p.eject, Some(13), "tail ejection cycle");
    // total latency = 2 * H_s + (m - 1)
    assert_eq!(p.eject.unwrap() - p.birth, 13);
}

#[test]
fn golden_three_hop_latency_matches_model_floor() {
    let mut cfg = SimConfig::wormhole(4, 4);
    cfg.invariant_checks = true;
    let mut net = one_packet_net(cfg, (0, 0), (2, 1), 3);
    for _ in 0..60 {
        net.step();
    }
    let p = &net.packets[0];
    // 3 inter-router hops + injection leg: 4 * H_s + (m - 1) = 23
    assert_eq!(p.eject.unwrap() - p.birth, 23);
}

#[test]
fn empty_network_only_advances_cycle() {
    let topo = mesh(3, 3);
    let mut cfg = SimConfig::wormhole(3, 3);
    cfg.invariant_checks = true;
    let mut net = Network::new(cfg, topo);
    for _ in 0..100 {
        net.step();
    }
    assert_eq!(net.cycle(), 100);
    assert!(net.packets.is_empty());
    let m = net.metrics();
    assert_eq!(m.injected_packets, 0);
}

#[test]
fn two_packets_same_output_alternate_sa_grants() {
    let mut cfg = SimConfig::wormhole(3, 3);
    cfg.vcs = 2;
    cfg.invariant_checks = true;
    let topo = mesh(3, 3);
    let mut net = Network::new(cfg, topo);
    net.set_trace(&[
        TracePacket { cycle: 0, src: Tile::new(0, 1), dst: Tile::new(2, 1), len: 4 },
        TracePacket { cycle: 5, src: Tile::new(1, 1), dst: Tile::new(2, 1), len: 4 },
    ]);
    for _ in 0..80 {
        net.step();
    }
    let a = net.packets[0].eject.unwrap();
    let b = net.packets[1].eject.unwrap();
    // both packets stream through (1,1)'s east port from cycle 8 onward;
    // round-robin interleaves their flits, so the tails finish within two
    // cycles of each other (winner-takes-all would separate them by m)
    assert!(a.abs_diff(b) <= 2, "no alternation: ejects {a} vs {b}");
}

#[test]
fn determinism_same_seed_identical_runs() {
    let spec = TrafficSpec::new(TrafficPattern::Random, 0.02, 4);
    let topo = mesh(4, 4);
    let ccg = gen_traffic(&spec, &topo).unwrap();
    let run = |seed: u64| {
        let mut cfg = SimConfig::wormhole(4, 4);
        cfg.seed = seed;
        cfg.invariant_checks = true;
        let mut net = Network::new(cfg, mesh(4, 4));
        net.set_ccg_traffic(&ccg);
        net.run(500, 3_000)
    };
    let m1 = run(7);
    let m2 = run(7);
    assert_eq!(m1.event_hash, m2.event_hash, "event logs diverged");
    assert_eq!(m1.accepted_packets, m2.accepted_packets);
    assert_eq!(m1.avg_latency, m2.avg_latency);
    let m3 = run(8);
    assert_ne!(m1.event_hash, m3.event_hash, "different seeds should differ");
}

#[test]
fn latency_monotone_below_saturation() {
    let topo = mesh(4, 4);
    let mut last = 0.0;
    for rate in [0.002, 0.008, 0.016] {
        let spec = TrafficSpec::new(TrafficPattern::Random, rate, 4);
        let ccg = gen_traffic(&spec, &topo).unwrap();
        let mut cfg = SimConfig::wormhole(4, 4);
        cfg.invariant_checks = true;
        let mut net = Network::new(cfg, mesh(4, 4));
        net.set_ccg_traffic(&ccg);
        let m = net.run(1_000, 8_000);
        assert!(m.accepted_packets > 0);
        assert!(
            m.avg_latency >= last * 0.95,
            "latency dropped from {last} to {} at rate {rate}",
            m.avg_latency
        );
        last = m.avg_latency;
    }
}

#[test]
fn xy_drops_nothing_and_delivers_everything() {
    let topo = mesh(4, 4);
    let spec = TrafficSpec::new(TrafficPattern::Transpose1, 0.02, 4);
    let ccg = gen_traffic(&spec, &topo).unwrap();
    let mut cfg = SimConfig::wormhole(4, 4);
    cfg.invariant_checks = true;
    let mut net = Network::new(cfg, mesh(4, 4));
    net.set_ccg_traffic(&ccg);
    let m = net.run(1_000, 10_000);
    assert_eq!(m.dropped_packets, 0);
    assert_eq!(m.stalled_packets, 0, "deterministic XY must drain");
    assert!(m.accepted_packets > 100);
}

#[test]
fn channel_windows_idle_and_counts() {
    let topo = mesh(3, 3);
    let mut cfg = SimConfig::wormhole(3, 3);
    cfg.fitness_window = 100;
    cfg.invariant_checks = true;
    let mut net = Network::new(cfg, topo);
    net.enable_window_collection(true);
    for _ in 0..=300 {
        net.step();
    }
    // row count: 4 cardinal channels x 9 routers x 3 completed windows
    assert_eq!(net.channel_windows.len(), 4 * 9 * 3);
    for w in &net.channel_windows {
        assert_eq!(w.avg_wait, 0.0);
        assert_eq!(w.avg_free_slots, 9.0, "idle channel shows full buffers");
        assert_eq!(w.block_prob, 0.0);
    }
}

#[test]
fn saturated_channel_empties_free_slots() {
    let topo = mesh(4, 4);
    // hammer a single column to congest (3,1)->(2,1) direction
    let flows = vec![
        crate::traffic::Flow {
            src: Tile::new(0, 1),
            dst: Tile::new(3, 1),
            rate: 0.05,
            scv: 1.0,
            bandwidth: 1.0,
        },
        crate::traffic::Flow {
            src: Tile::new(0, 0),
            dst: Tile::new(3, 1),
            rate: 0.05,
            scv: 1.0,
            bandwidth: 1.0,
        },
    ];
    let ccg = CoreCommGraph::new(flows).unwrap();
    let mut cfg = SimConfig::wormhole(4, 4);
    // packets much longer than the buffer: while the other flow holds the
    // ejection port, a blocked wormhole keeps this channel pinned full
    cfg.packet_len = 64;
    cfg.invariant_checks = true;
    let mut net = Network::new(cfg, topo);
    net.set_ccg_traffic(&ccg);
    net.enable_window_collection(true);
    for _ in 0..3_000 {
        net.step();
    }
    let congested: Vec<&ChannelWindow> = net
        .channel_windows
        .iter()
        .filter(|w| w.router == Tile::new(3, 1) && w.dir == Direction::West)
        .collect();
    let tail = &congested[congested.len() / 2..];
    let mean_free: f64 =
        tail.iter().map(|w| w.avg_free_slots).sum::<f64>() / tail.len() as f64;
    assert!(mean_free < 2.5, "saturated channel should run nearly full, free {mean_free}");
}

#[test]
fn observed_sq_grows_past_saturation() {
    let topo = mesh(4, 4);
    let run = |rate: f64| {
        let spec = TrafficSpec::new(TrafficPattern::Random, rate, 4);
        let ccg = gen_traffic(&spec, &topo).unwrap();
        let mut net = Network::new(SimConfig::wormhole(4, 4), mesh(4, 4));
        net.set_ccg_traffic(&ccg);
        net.run(1_000, 6_000);
        let sq = net.observed_sq();
        sq.iter().map(|&(_, w, _)| w).sum::<f64>() / sq.len() as f64
    };
    let low = run(0.01);
    let high = run(0.2); // far past saturation for m = 4 on 4x4
    assert!(high > low * 10.0 + 1.0, "source queue should blow up ({low} -> {high})");
}

#[test]
fn bidir_modes_run_clean_with_checks() {
    for arch in [ArchMode::BiNoc, ArchMode::Fsnoc] {
        let topo = mesh(4, 4);
        let spec = TrafficSpec::new(TrafficPattern::Random, 0.01, 16);
        let ccg = gen_traffic(&spec, &topo).unwrap();
        let mut cfg = SimConfig::bidir(4, 4, arch);
        cfg.invariant_checks = true;
        let mut net = Network::new(cfg, topo);
        net.set_ccg_traffic(&ccg);
        let m = net.run(500, 4_000);
        assert!(m.accepted_packets > 50, "{arch:?} moved {0} packets", m.accepted_packets);
        assert_eq!(m.dropped_packets, 0);
        assert_eq!(m.stalled_packets, 0);
    }
}

#[test]
fn fsnoc_beats_uni_on_asymmetric_flows() {
    // one-directional stream: bidirectional channels double the bandwidth
    let topo = mesh(4, 2);
    let flows = vec![crate::traffic::Flow {
        src: Tile::new(0, 0),
        dst: Tile::new(3, 0),
        rate: 0.09,
        scv: 1.0,
        bandwidth: 1.0,
    }];
    let ccg = CoreCommGraph::new(flows).unwrap();
    let run = |arch: ArchMode| {
        let mut cfg = SimConfig::bidir(4, 2, arch);
        cfg.invariant_checks = true;
        let mut net = Network::new(cfg, mesh(4, 2));
        net.set_ccg_traffic(&ccg);
        net.run(500, 6_000)
    };
    let uni = run(ArchMode::Uni);
    let fs = run(ArchMode::Fsnoc);
    assert!(fs.accepted_packets > 0 && uni.accepted_packets > 0);
    assert!(
        fs.avg_latency < uni.avg_latency,
        "fsnoc {} should beat uni {}",
        fs.avg_latency,
        uni.avg_latency
    );
}

#[test]
fn evc_hub_mode_runs_and_uses_hub() {
    let topo = mesh(8, 8);
    // regional traffic: same region, different quadrants
    let flows = vec![
        crate::traffic::Flow {
            src: Tile::new(1, 3),
            dst: Tile::new(3, 1),
            rate: 0.02,
            scv: 1.0,
            bandwidth: 1.0,
        },
        crate::traffic::Flow {
            src: Tile::new(0, 0),
            dst: Tile::new(2, 3),
            rate: 0.02,
            scv: 1.0,
            bandwidth: 1.0,
        },
    ];
    let ccg = CoreCommGraph::new(flows).unwrap();
    let mut cfg = SimConfig::bidir(8, 8, ArchMode::EvcHub);
    cfg.vcs = 3;
    cfg.buf_depth = 6;
    cfg.packet_len = 6;
    cfg.routing = RoutingAlgo::OddEven;
    cfg.selection = SelectionPolicy::Random;
    cfg.invariant_checks = true;
    let mut net = Network::new(cfg, topo);
    net.set_ccg_traffic(&ccg);
    let m = net.run(500, 5_000);
    assert!(m.accepted_packets > 50);
    assert_eq!(m.stalled_packets, 0);
}

#[test]
fn table_mode_reproduces_split_ratios() {
    use crate::thermal;
    let topo = mesh(3, 3);
    let flows = vec![crate::traffic::Flow {
        src: Tile::new(0, 0),
        dst: Tile::new(2, 1),
        rate: 0.08,
        scv: 1.0,
        bandwidth: 1.0,
    }];
    let ccg = CoreCommGraph::new(flows).unwrap();
    let ps = thermal::break_cycles(&ccg, &topo, 10_000).unwrap();
    // force a 0.75 / 0.25 split over the first decision
    let mut ratios = thermal::uniform_ratios(&ps);
    // paths: x-first order; 3 paths for (0,0)->(2,1)
    assert_eq!(ratios[0].len(), 3);
    // paths in x-first order: EEN, ENE, NEE; the first two leave east
    ratios[0] = vec![0.5, 0.25, 0.25];
    let alloc = thermal::AllocationRatios { ratios };
    let tables =
        thermal::build_tables(&alloc, &ps, &ccg, &topo, thermal::TableVariant::SourceDest);
    let mut cfg = SimConfig::wormhole(3, 3);
    cfg.routing = RoutingAlgo::Table;
    cfg.invariant_checks = true;
    let mut net = Network::new(cfg, topo);
    net.set_tables(tables);
    net.set_ccg_traffic(&ccg);
    net.run(500, 60_000);
    // empirical first-hop split at the source router: p(east) = 0.75
    let east_cq = net
        .observed_cq()
        .iter()
        .find(|&&(t, d, _, _)| t == Tile::new(1, 0) && d == Direction::West)
        .map(|&(_, _, _, n)| n)
        .unwrap();
    let north_cq = net
        .observed_cq()
        .iter()
        .find(|&&(t, d, _, _)| t == Tile::new(0, 1) && d == Direction::South)
        .map(|&(_, _, _, n)| n)
        .unwrap();
    let total = (east_cq + north_cq) as f64;
    let east_frac = east_cq as f64 / total;
    assert!(
        (east_frac - 0.75).abs() < 0.02,
        "east split {east_frac} should be 0.75 +/- 0.02 over {total} packets"
    );
}
