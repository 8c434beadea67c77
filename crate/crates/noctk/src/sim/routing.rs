//! Routing-computation algorithms: dimension-ordered XY, the odd-even turn
//! model, the west-first / north-last / negative-first turn models,
//! probability tables with LFSR selection, and fault-aware shortest-path
//! tables.

use crate::error::{Error, Result};
use crate::fault::FaultPattern;
use crate::thermal::RoutingTables;
use crate::topology::{Direction, MeshTopology, Tile};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoutingAlgo {
    Xy,
    OddEven,
    WestFirst,
    NorthLast,
    NegativeFirst,
    /// Probability tables from the thermal-aware synthesis, LFSR-selected.
    Table,
    /// Shortest-path candidates over the surviving (fault-free) channel
    /// graph; turn rules relaxed where connectivity requires it, guarded by
    /// the deadlock monitor.
    FaultAware,
}

fn toward_y(cur: Tile, dst: Tile) -> Direction {
    if dst.y > cur.y {
        Direction::North
    } else {
        Direction::South
    }
}

fn toward_x(cur: Tile, dst: Tile) -> Direction {
    if dst.x > cur.x {
        Direction::East
    } else {
        Direction::West
    }
}

/// Dimension-ordered XY: a singleton candidate.
pub fn xy(cur: Tile, dst: Tile) -> Vec<Direction> {
    if cur == dst {
        vec![Direction::Local]
    } else if cur.x != dst.x {
        vec![toward_x(cur, dst)]
    } else {
        vec![toward_y(cur, dst)]
    }
}

/// Minimal odd-even candidates: no EN/ES turn in even columns, no NW/SW
/// turn in odd columns.
pub fn odd_even(_topo: &MeshTopology, cur: Tile, src: Tile, dst: Tile) -> Vec<Direction> {
    if cur == dst {
        return vec![Direction::Local];
    }
    let e0 = dst.x as i32 - cur.x as i32;
    let e1 = dst.y as i32 - cur.y as i32;
    let mut avail = Vec::with_capacity(2);
    if e0 == 0 {
        avail.push(toward_y(cur, dst));
    } else if e0 > 0 {
        if e1 == 0 {
            avail.push(Direction::East);
        } else {
            if cur.x % 2 == 1 || cur.x == src.x {
                avail.push(toward_y(cur, dst));
            }
            if dst.x % 2 == 1 || e0 != 1 {
                avail.push(Direction::East);
            }
        }
    } else {
        avail.push(Direction::West);
        if cur.x % 2 == 0 && e1 != 0 {
            avail.push(toward_y(cur, dst));
        }
    }
    debug_assert!(!avail.is_empty(), "odd-even must always offer a direction");
    avail
}

/// West-first: all westward hops are taken first; eastbound packets route
/// fully adaptively.
pub fn west_first(cur: Tile, dst: Tile) -> Vec<Direction> {
    if cur == dst {
        return vec![Direction::Local];
    }
    if dst.x < cur.x {
        return vec![Direction::West];
    }
    let mut avail = Vec::with_capacity(2);
    if dst.x > cur.x {
        avail.push(Direction::East);
    }
    if dst.y != cur.y {
        avail.push(toward_y(cur, dst));
    }
    avail
}

/// North-last: a packet turns north only when north is the only direction
/// left.
pub fn north_last(cur: Tile, dst: Tile) -> Vec<Direction> {
    if cur == dst {
        return vec![Direction::Local];
    }
    if dst.y > cur.y {
        if dst.x != cur.x {
            return vec![toward_x(cur, dst)];
        }
        return vec![Direction::North];
    }
    let mut avail = Vec::with_capacity(2);
    if dst.x != cur.x {
        avail.push(toward_x(cur, dst));
    }
    if dst.y < cur.y {
        avail.push(Direction::South);
    }
    avail
}

/// Negative-first: all west/south hops precede any east/north hop.
pub fn negative_first(cur: Tile, dst: Tile) -> Vec<Direction> {
    if cur == dst {
        return vec![Direction::Local];
    }
    let mut neg = Vec::with_capacity(2);
    if dst.x < cur.x {
        neg.push(Direction::West);
    }
    if dst.y < cur.y {
        neg.push(Direction::South);
    }
    if !neg.is_empty() {
        return neg;
    }
    let mut pos = Vec::with_capacity(2);
    if dst.x > cur.x {
        pos.push(Direction::East);
    }
    if dst.y > cur.y {
        pos.push(Direction::North);
    }
    pos
}

/// 16-bit maximal-length Galois LFSR (taps 16, 14, 13, 11 -> mask 0xB400).
#[derive(Debug, Clone)]
pub struct Lfsr16 {
    state: u16,
}

impl Lfsr16 {
    /// Per-router stream seeded from (global seed, router id); never zero.
    pub fn new(seed: u64, router_id: usize) -> Self {
        let mixed = seed
            .wrapping_mul(0x9e3779b97f4a7c15)
            .wrapping_add(router_id as u64)
            .wrapping_mul(0xbf58476d1ce4e5b9);
        let s = (mixed >> 16) as u16;
        Lfsr16 { state: if s == 0 { 0xace1 } else { s } }
    }

    pub fn next(&mut self) -> u16 {
        let lsb = self.state & 1;
        self.state >>= 1;
        if lsb != 0 {
            self.state ^= 0xB400;
        }
        self.state
    }

    /// Uniform draw in [0, 1).
    pub fn next_unit(&mut self) -> f64 {
        self.next() as f64 / 65536.0
    }
}

/// Fault-aware shortest-path candidate tables: per destination, BFS
/// distances over the surviving channel graph.
#[derive(Debug, Clone)]
pub struct FaultAwareTable {
    width: u16,
    /// dist[dst][node]
    dist: Vec<Vec<u32>>,
}

impl FaultAwareTable {
    pub fn build(topo: &MeshTopology, pattern: &FaultPattern) -> Self {
        let n = topo.num_tiles();
        let mut adj: Vec<Vec<usize>> = vec![Vec::new(); n];
        for t in topo.tiles() {
            for d in crate::topology::CARDINALS {
                if let Some(nb) = topo.neighbor(t, d) {
                    if !pattern.channel_dead(t, nb) {
                        adj[t.id(topo.width)].push(nb.id(topo.width));
                    }
                }
            }
        }
        let mut dist = vec![vec![u32::MAX; n]; n];
        for dst in 0..n {
            let dv = &mut dist[dst];
            dv[dst] = 0;
            let mut q = std::collections::VecDeque::from(vec![dst]);
            while let Some(v) = q.pop_front() {
                for &w in &adj[v] {
                    if dv[w] == u32::MAX {
                        dv[w] = dv[v] + 1;
                        q.push_back(w);
                    }
                }
            }
        }
        FaultAwareTable { width: topo.width, dist }
    }

    pub fn reachable(&self, cur: Tile, dst: Tile) -> bool {
        self.dist[dst.id(self.width)][cur.id(self.width)] != u32::MAX
    }

    pub fn candidates(
        &self,
        topo: &MeshTopology,
        pattern: &FaultPattern,
        cur: Tile,
        dst: Tile,
    ) -> Vec<Direction> {
        if cur == dst {
            return vec![Direction::Local];
        }
        let dv = &self.dist[dst.id(self.width)];
        let here = dv[cur.id(self.width)];
        if here == u32::MAX {
            return Vec::new();
        }
        let mut out = Vec::new();
        for d in crate::topology::CARDINALS {
            if let Some(nb) = topo.neighbor(cur, d) {
                if !pattern.channel_dead(cur, nb) && dv[nb.id(self.width)] + 1 == here {
                    out.push(d);
                }
            }
        }
        out
    }
}

/// Candidate output set of a routing algorithm at one router. Table-based
/// algorithms are resolved by the caller (they need per-router state).
pub fn route_compute(
    algo: RoutingAlgo,
    topo: &MeshTopology,
    cur: Tile,
    src: Tile,
    dst: Tile,
) -> Vec<Direction> {
    match algo {
        RoutingAlgo::Xy => xy(cur, dst),
        RoutingAlgo::OddEven => odd_even(topo, cur, src, dst),
        RoutingAlgo::WestFirst => west_first(cur, dst),
        RoutingAlgo::NorthLast => north_last(cur, dst),
        RoutingAlgo::NegativeFirst => negative_first(cur, dst),
        RoutingAlgo::Table | RoutingAlgo::FaultAware => {
            unreachable!("table modes are resolved by the router")
        }
    }
}

/// Table lookup + LFSR draw; a missing entry is a routing fault.
pub fn table_route(
    tables: &RoutingTables,
    lfsr: &mut Lfsr16,
    cur: Tile,
    in_dir: Direction,
    src: Tile,
    dst: Tile,
) -> Result<Direction> {
    if cur == dst {
        return Ok(Direction::Local);
    }
    let outs = tables.lookup(cur, in_dir, src, dst).ok_or_else(|| Error::Routing {
        router: cur.id(tables.width),
        msg: format!("no table entry (in {in_dir}, src {src}, dst {dst})"),
    })?;
    let draw = lfsr.next_unit();
    let mut acc = 0.0;
    for &(o, p) in outs {
        acc += p;
        if draw < acc {
            return Ok(o);
        }
    }
    Ok(outs.last().map(|&(o, _)| o).unwrap())
}

/// All minimal paths admissible under the odd-even turn rules, by DFS over
/// the candidate sets.
pub fn oe_admissible_paths(topo: &MeshTopology, src: Tile, dst: Tile) -> Vec<Vec<Tile>> {
    let mut out = Vec::new();
    let mut path = vec![src];
    fn dfs(
        topo: &MeshTopology,
        cur: Tile,
        src: Tile,
        dst: Tile,
        path: &mut Vec<Tile>,
        out: &mut Vec<Vec<Tile>>,
    ) {
        if cur == dst {
            out.push(path.clone());
            return;
        }
        for d in odd_even(topo, cur, src, dst) {
            if let Some(next) = topo.neighbor(cur, d) {
                path.push(next);
                dfs(topo, next, src, dst, path, out);
                path.pop();
            }
        }
    }
    dfs(topo, src, src, dst, &mut path, &mut out);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mesh(w: u16, h: u16) -> MeshTopology {
        MeshTopology::new(w, h, 1e9).unwrap()
    }

    #[test]
    fn xy_is_dimension_ordered_singleton() {
        let c = xy(Tile::new(0, 0), Tile::new(2, 1));
        assert_eq!(c, vec![Direction::East]);
        let c = xy(Tile::new(2, 0), Tile::new(2, 1));
        assert_eq!(c, vec![Direction::North]);
        assert_eq!(xy(Tile::new(1, 1), Tile::new(1, 1)), vec![Direction::Local]);
    }

    /// Exhaustive turn-pair scan: walk every (src, dst) pair on an 8x8 mesh
    /// through every reachable (node, in-direction) state and check that no
    /// forbidden odd-even turn is ever offered.
    #[test]
    fn odd_even_never_offers_forbidden_turns() {
        let topo = mesh(8, 8);
        let forbidden = |col: u16, inc: Direction, out: Direction| -> bool {
            use Direction::*;
            let even = col % 2 == 0;
            match (inc, out) {
                // arrived through the west port = traveling east
                (West, North) | (West, South) => even, // EN / ES turns
                (North, West) | (South, West) => !even, // NW / SW turns
                _ => false,
            }
        };
        for src in topo.tiles() {
            for dst in topo.tiles() {
                if src == dst {
                    continue;
                }
                // BFS over (cur, in_dir) states
                let mut stack = vec![(src, Direction::Local)];
                let mut seen = std::collections::BTreeSet::new();
                while let Some((cur, in_dir)) = stack.pop() {
                    if cur == dst {
                        continue;
                    }
                    let cands = odd_even(&topo, cur, src, dst);
                    assert!(!cands.is_empty(), "dead end {cur} for {src}->{dst}");
                    for d in cands {
                        if in_dir != Direction::Local {
                            assert!(
                                !forbidden(cur.x, in_dir, d),
                                "turn {in_dir}->{d} at col {} ({src}->{dst})",
                                cur.x
                            );
                        }
                        let next = topo.neighbor(cur, d).expect("candidate leaves mesh");
                        assert!(next.dist(dst) < cur.dist(dst), "non-minimal step");
                        let st = (next, topo.direction_of(next, cur));
                        if seen.insert(st) {
                            stack.push(st);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn turn_models_reach_destination_minimally() {
        let topo = mesh(6, 6);
        for algo in [RoutingAlgo::WestFirst, RoutingAlgo::NorthLast, RoutingAlgo::NegativeFirst] {
            for src in topo.tiles() {
                for dst in topo.tiles() {
                    if src == dst {
                        continue;
                    }
                    // follow first-candidate greedily; must arrive in d hops
                    let mut cur = src;
                    let mut hops = 0;
                    while cur != dst {
                        let c = route_compute(algo, &topo, cur, src, dst);
                        assert!(!c.is_empty());
                        cur = topo.neighbor(cur, c[0]).unwrap();
                        hops += 1;
                        assert!(hops <= src.dist(dst), "{algo:?} wandered");
                    }
                }
            }
        }
    }

    #[test]
    fn west_first_forces_west_before_adaptive() {
        let c = west_first(Tile::new(3, 1), Tile::new(1, 3));
        assert_eq!(c, vec![Direction::West]);
        let c = west_first(Tile::new(1, 1), Tile::new(3, 3));
        assert!(c.contains(&Direction::East) && c.contains(&Direction::North));
    }

    #[test]
    fn north_last_defers_north() {
        let c = north_last(Tile::new(1, 1), Tile::new(3, 3));
        assert_eq!(c, vec![Direction::East]);
        let c = north_last(Tile::new(3, 1), Tile::new(3, 3));
        assert_eq!(c, vec![Direction::North]);
        let c = north_last(Tile::new(1, 3), Tile::new(3, 1));
        assert!(c.contains(&Direction::East) && c.contains(&Direction::South));
    }

    #[test]
    fn lfsr_is_maximal_length() {
        let mut l = Lfsr16 { state: 1 };
        let mut seen = std::collections::HashSet::new();
        for _ in 0..65535 {
            assert!(seen.insert(l.next()), "LFSR repeated before full period");
        }
    }

    #[test]
    fn fault_aware_avoids_dead_channels() {
        let topo = mesh(4, 4);
        let mut pattern = FaultPattern::default();
        pattern.link_faults.insert((Tile::new(1, 0), Tile::new(2, 0)));
        let table = FaultAwareTable::build(&topo, &pattern);
        let c = table.candidates(&topo, &pattern, Tile::new(1, 0), Tile::new(3, 0));
        assert!(!c.is_empty());
        assert!(!c.contains(&Direction::East), "must detour around the dead channel");
        assert!(table.reachable(Tile::new(1, 0), Tile::new(3, 0)));
    }

    #[test]
    fn oe_path_sets_are_minimal_and_contained() {
        let topo = mesh(8, 8);
        for (s, d) in [((0u16, 0u16), (3u16, 2u16)), ((5, 5), (2, 1)), ((7, 0), (0, 7))] {
            let src = Tile::new(s.0, s.1);
            let dst = Tile::new(d.0, d.1);
            let oe = oe_admissible_paths(&topo, src, dst);
            let all = topo.enumerate_minimal_paths(src, dst);
            assert!(!oe.is_empty());
            assert!(oe.len() <= all.len());
            let all_set: std::collections::BTreeSet<_> = all.into_iter().collect();
            for p in &oe {
                assert!(all_set.contains(p), "OE path not minimal");
            }
        }
    }
}
