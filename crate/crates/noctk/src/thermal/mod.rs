//! Offline thermal-aware routing: application channel dependency graph,
//! SCC-based cycle breaking, min-max LP traffic allocation, and probability
//! routing tables with a deadlock-inheritance verifier.

pub mod lp;
pub mod scc;

use crate::error::{Error, Result};
use crate::topology::{Direction, LinkId, MeshTopology, Tile};
use crate::traffic::CoreCommGraph;
use lp::{Cmp, LpProblem};
use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

/// Application channel dependency graph: vertices are directed physical
/// links, edges are consecutive-use relations over all admissible minimal
/// paths of all flows.
#[derive(Debug, Clone, Default)]
pub struct Acdg {
    pub links: Vec<LinkId>,
    pub index: BTreeMap<LinkId, usize>,
    pub edges: BTreeSet<(usize, usize)>,
}

impl Acdg {
    fn link_id(&mut self, l: LinkId) -> usize {
        if let Some(&i) = self.index.get(&l) {
            return i;
        }
        let i = self.links.len();
        self.links.push(l);
        self.index.insert(l, i);
        i
    }

    pub fn adjacency(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.links.len()];
        for &(u, v) in &self.edges {
            adj[u].push(v);
        }
        adj
    }

    pub fn edge_names(&self, e: (usize, usize)) -> (LinkId, LinkId) {
        (self.links[e.0], self.links[e.1])
    }
}

/// Minimal paths of one flow plus the surviving subset after cycle breaking.
#[derive(Debug, Clone)]
pub struct FlowPaths {
    pub src: Tile,
    pub dst: Tile,
    pub paths: Vec<Vec<Tile>>,
    pub surviving: Vec<bool>,
}

impl FlowPaths {
    pub fn surviving_count(&self) -> usize {
        self.surviving.iter().filter(|&&s| s).count()
    }
}

/// Admissible path sets per flow and the CDG edges removed to break cycles.
#[derive(Debug, Clone)]
pub struct PathSet {
    pub flows: Vec<FlowPaths>,
    pub removed: BTreeSet<(LinkId, LinkId)>,
    /// Set when the branch-and-bound node budget ran out and the result is
    /// the best found plus greedy completion.
    pub heuristic: bool,
}

/// Internal-link sequence of a tile path.
fn internal_links(path: &[Tile]) -> Vec<LinkId> {
    path.windows(2).map(|w| LinkId::Internal { from: w[0], to: w[1] }).collect()
}

/// Enumerate every flow's minimal paths.
pub fn enumerate_flow_paths(ccg: &CoreCommGraph, topo: &MeshTopology) -> Vec<FlowPaths> {
    ccg.flows
        .iter()
        .map(|f| {
            let paths = topo.enumerate_minimal_paths(f.src, f.dst);
            let n = paths.len();
            FlowPaths { src: f.src, dst: f.dst, paths, surviving: vec![true; n] }
        })
        .collect()
}

/// Build the ACDG over all minimal paths of all flows.
pub fn build_acdg(ccg: &CoreCommGraph, topo: &MeshTopology) -> Acdg {
    let mut g = Acdg::default();
    for f in &ccg.flows {
        for path in topo.enumerate_minimal_paths(f.src, f.dst) {
            let links = internal_links(&path);
            for l in &links {
                g.link_id(*l);
            }
            for w in links.windows(2) {
                let u = g.index[&w[0]];
                let v = g.index[&w[1]];
                g.edges.insert((u, v));
            }
        }
    }
    g
}

struct BreakState {
    /// Per (flow, path): CDG edge ids used.
    path_edges: Vec<Vec<Vec<(usize, usize)>>>,
    /// edge -> (flow, path) users
    edge_users: BTreeMap<(usize, usize), Vec<(usize, usize)>>,
    weights: Vec<f64>,
    totals: Vec<usize>,
}

impl BreakState {
    /// Weighted adaptivity objective for a removal set.
    fn objective(&self, alive: &[Vec<bool>]) -> f64 {
        let mut acc = 0.0;
        for (fi, flags) in alive.iter().enumerate() {
            let surv = flags.iter().filter(|&&a| a).count();
            acc += self.weights[fi] * surv as f64 / self.totals[fi] as f64;
        }
        acc
    }

    fn feasible(&self, alive: &[Vec<bool>]) -> bool {
        alive.iter().all(|f| f.iter().any(|&a| a))
    }
}

/// Find one cycle in the retained subgraph, as a list of edges.
fn find_cycle(
    adj: &[Vec<usize>],
    removed: &BTreeSet<(usize, usize)>,
) -> Option<Vec<(usize, usize)>> {
    let n = adj.len();
    #[derive(Clone, Copy, PartialEq)]
    enum Mark {
        White,
        Gray,
        Black,
    }
    let mut mark = vec![Mark::White; n];
    let mut parent_edge: Vec<Option<(usize, usize)>> = vec![None; n];
    for start in 0..n {
        if mark[start] != Mark::White {
            continue;
        }
        // iterative DFS with explicit edge iteration state
        let mut stack: Vec<(usize, usize)> = vec![(start, 0)];
        mark[start] = Mark::Gray;
        while let Some(&mut (v, ref mut ei)) = stack.last_mut() {
            if *ei < adj[v].len() {
                let w = adj[v][*ei];
                *ei += 1;
                if removed.contains(&(v, w)) {
                    continue;
                }
                match mark[w] {
                    Mark::Gray => {
                        // back edge: unwind the cycle
                        let mut cycle = vec![(v, w)];
                        let mut cur = v;
                        while cur != w {
                            let pe = parent_edge[cur].unwrap();
                            cycle.push(pe);
                            cur = pe.0;
                        }
                        cycle.reverse();
                        return Some(cycle);
                    }
                    Mark::White => {
                        mark[w] = Mark::Gray;
                        parent_edge[w] = Some((v, w));
                        stack.push((w, 0));
                    }
                    Mark::Black => {}
                }
            } else {
                mark[v] = Mark::Black;
                stack.pop();
            }
        }
    }
    None
}

fn apply_removal(
    st: &BreakState,
    edge: (usize, usize),
    alive: &mut [Vec<bool>],
) -> Vec<(usize, usize)> {
    let mut killed = Vec::new();
    if let Some(users) = st.edge_users.get(&edge) {
        for &(fi, pi) in users {
            if alive[fi][pi] {
                alive[fi][pi] = false;
                killed.push((fi, pi));
            }
        }
    }
    killed
}

fn undo_removal(alive: &mut [Vec<bool>], killed: &[(usize, usize)]) {
    for &(fi, pi) in killed {
        alive[fi][pi] = true;
    }
}

/// Break all ACDG cycles by removing edges, maximizing bandwidth-weighted
/// adaptivity, subject to every flow keeping at least one path.
///
/// Branch-and-bound on cycles with a node budget; past the budget the best
/// found solution is completed greedily and flagged heuristic.
pub fn break_cycles(
    ccg: &CoreCommGraph,
    topo: &MeshTopology,
    node_budget: usize,
) -> Result<PathSet> {
    let flows = enumerate_flow_paths(ccg, topo);
    let acdg = build_acdg(ccg, topo);
    let adj = acdg.adjacency();

    let mut path_edges: Vec<Vec<Vec<(usize, usize)>>> = Vec::with_capacity(flows.len());
    let mut edge_users: BTreeMap<(usize, usize), Vec<(usize, usize)>> = BTreeMap::new();
    for (fi, fp) in flows.iter().enumerate() {
        let mut per_flow = Vec::with_capacity(fp.paths.len());
        for (pi, path) in fp.paths.iter().enumerate() {
            let links = internal_links(path);
            let edges: Vec<(usize, usize)> = links
                .windows(2)
                .map(|w| (acdg.index[&w[0]], acdg.index[&w[1]]))
                .collect();
            for &e in &edges {
                edge_users.entry(e).or_default().push((fi, pi));
            }
            per_flow.push(edges);
        }
        path_edges.push(per_flow);
    }
    let st = BreakState {
        path_edges,
        edge_users,
        weights: ccg.flows.iter().map(|f| f.bandwidth.max(f.rate).max(1e-12)).collect(),
        totals: flows.iter().map(|f| f.paths.len().max(1)).collect(),
    };
    let _ = &st.path_edges;

    let mut alive: Vec<Vec<bool>> = flows.iter().map(|f| f.surviving.clone()).collect();
    let mut removed: BTreeSet<(usize, usize)> = BTreeSet::new();
    let mut forbidden: BTreeSet<(usize, usize)> = BTreeSet::new();

    let mut best: Option<(f64, BTreeSet<(usize, usize)>, Vec<Vec<bool>>)> = None;
    let mut nodes = 0usize;
    let mut exhausted = false;

    // depth-first branch and bound
    fn dfs(
        st: &BreakState,
        adj: &[Vec<usize>],
        alive: &mut Vec<Vec<bool>>,
        removed: &mut BTreeSet<(usize, usize)>,
        forbidden: &mut BTreeSet<(usize, usize)>,
        best: &mut Option<(f64, BTreeSet<(usize, usize)>, Vec<Vec<bool>>)>,
        nodes: &mut usize,
        budget: usize,
        exhausted: &mut bool,
    ) {
        if *exhausted {
            return;
        }
        *nodes += 1;
        if *nodes > budget {
            *exhausted = true;
            return;
        }
        let obj = st.objective(alive);
        if let Some((b, _, _)) = best {
            if obj <= *b + 1e-12 {
                return; // removals only lower the objective
            }
        }
        match find_cycle(adj, removed) {
            None => {
                let better = best.as_ref().map(|(b, _, _)| obj > *b + 1e-12).unwrap_or(true);
                if better {
                    *best = Some((obj, removed.clone(), alive.clone()));
                }
            }
            Some(cycle) => {
                // order candidate edges by removal cost, cheapest first
                let mut cands: Vec<((usize, usize), f64)> = cycle
                    .iter()
                    .filter(|e| !forbidden.contains(e))
                    .map(|&e| {
                        let loss: f64 = st
                            .edge_users
                            .get(&e)
                            .map(|users| {
                                users
                                    .iter()
                                    .filter(|&&(fi, pi)| alive[fi][pi])
                                    .map(|&(fi, _)| st.weights[fi] / st.totals[fi] as f64)
                                    .sum()
                            })
                            .unwrap_or(0.0);
                        (e, loss)
                    })
                    .collect();
                cands.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
                let mut locally_forbidden = Vec::new();
                for (e, _) in cands {
                    removed.insert(e);
                    let killed = apply_removal(st, e, alive);
                    if st.feasible(alive) {
                        dfs(st, adj, alive, removed, forbidden, best, nodes, budget, exhausted);
                    }
                    undo_removal(alive, &killed);
                    removed.remove(&e);
                    // partition the search space: this edge stays retained
                    // in the remaining branches of this node
                    forbidden.insert(e);
                    locally_forbidden.push(e);
                    if *exhausted {
                        break;
                    }
                }
                for e in locally_forbidden {
                    forbidden.remove(&e);
                }
            }
        }
    }

    dfs(
        &st,
        &adj,
        &mut alive,
        &mut removed,
        &mut forbidden,
        &mut best,
        &mut nodes,
        node_budget,
        &mut exhausted,
    );

    // Greedy completion as a fallback when the budget ran out or the exact
    // search found nothing.
    if best.is_none() || exhausted {
        let mut alive: Vec<Vec<bool>> = flows.iter().map(|f| f.surviving.clone()).collect();
        let mut removed = BTreeSet::new();
        let mut ok = true;
        while let Some(cycle) = find_cycle(&adj, &removed) {
            let mut picked = None;
            let mut best_loss = f64::INFINITY;
            for &e in &cycle {
                let killed = apply_removal(&st, e, &mut alive);
                let feas = st.feasible(&alive);
                let loss: f64 = killed
                    .iter()
                    .map(|&(fi, _)| st.weights[fi] / st.totals[fi] as f64)
                    .sum();
                undo_removal(&mut alive, &killed);
                if feas && loss < best_loss {
                    best_loss = loss;
                    picked = Some(e);
                }
            }
            match picked {
                Some(e) => {
                    removed.insert(e);
                    apply_removal(&st, e, &mut alive);
                }
                None => {
                    ok = false;
                    break;
                }
            }
        }
        if ok {
            let obj = st.objective(&alive);
            let better = best.as_ref().map(|(b, _, _)| obj > *b).unwrap_or(true);
            if better {
                best = Some((obj, removed, alive));
            }
        }
    }

    let Some((_, removed, alive)) = best else {
        let offenders: Vec<String> = flows
            .iter()
            .map(|f| format!("{}->{}", f.src, f.dst))
            .collect();
        return Err(Error::Infeasible(format!(
            "cannot break all CDG cycles while keeping every flow connected; flows: [{}]",
            offenders.join(", ")
        )));
    };

    let mut out_flows = flows;
    for (fi, flags) in alive.iter().enumerate() {
        out_flows[fi].surviving = flags.clone();
    }
    let removed_named = removed.iter().map(|&e| acdg.edge_names(e)).collect();
    Ok(PathSet { flows: out_flows, removed: removed_named, heuristic: exhausted })
}

/// Per-flow and average routing adaptivity of a path set.
pub fn adaptivity(ps: &PathSet) -> (Vec<f64>, f64) {
    let per: Vec<f64> = ps
        .flows
        .iter()
        .map(|f| f.surviving_count() as f64 / f.paths.len().max(1) as f64)
        .collect();
    let avg = if per.is_empty() { 1.0 } else { per.iter().sum::<f64>() / per.len() as f64 };
    (per, avg)
}

/// Check that the retained CDG (all surviving paths) is acyclic.
pub fn retained_cdg_acyclic(ps: &PathSet) -> bool {
    let mut idx: BTreeMap<LinkId, usize> = BTreeMap::new();
    let mut adj: Vec<Vec<usize>> = Vec::new();
    let mut id = |l: LinkId, adj: &mut Vec<Vec<usize>>, idx: &mut BTreeMap<LinkId, usize>| {
        *idx.entry(l).or_insert_with(|| {
            adj.push(Vec::new());
            adj.len() - 1
        })
    };
    for f in &ps.flows {
        for (pi, path) in f.paths.iter().enumerate() {
            if !f.surviving[pi] {
                continue;
            }
            let links = internal_links(path);
            for w in links.windows(2) {
                let u = id(w[0], &mut adj, &mut idx);
                let v = id(w[1], &mut adj, &mut idx);
                if !adj[u].contains(&v) {
                    adj[u].push(v);
                }
            }
        }
    }
    scc::is_acyclic(&adj)
}

/// Tile-energy model for the LP: per-tile processor energy plus a uniform
/// per-packet router energy.
#[derive(Debug, Clone)]
pub struct EnergyModel {
    pub proc_energy: Vec<f64>,
    pub packet_energy: f64,
}

impl EnergyModel {
    pub fn uniform(num_tiles: usize, proc: f64, packet: f64) -> Self {
        EnergyModel { proc_energy: vec![proc; num_tiles], packet_energy: packet }
    }
}

/// Optimal traffic split ratios, aligned with `PathSet::flows[..].paths`.
#[derive(Debug, Clone)]
pub struct AllocationRatios {
    pub ratios: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct LpReport {
    pub peak: f64,
    pub tile_energy: Vec<f64>,
    pub uniform_peak: f64,
    pub uniform_tile_energy: Vec<f64>,
}

impl LpReport {
    pub fn spread(&self) -> f64 {
        let max = self.tile_energy.iter().cloned().fold(f64::MIN, f64::max);
        let min = self.tile_energy.iter().cloned().fold(f64::MAX, f64::min);
        max - min
    }

    pub fn uniform_spread(&self) -> f64 {
        let max = self.uniform_tile_energy.iter().cloned().fold(f64::MIN, f64::max);
        let min = self.uniform_tile_energy.iter().cloned().fold(f64::MAX, f64::min);
        max - min
    }
}

/// Per-tile energies for a given allocation. Every router on a path,
/// including source and destination, handles the packet.
pub fn tile_energies(
    ps: &PathSet,
    ccg: &CoreCommGraph,
    topo: &MeshTopology,
    energy: &EnergyModel,
    ratios: &[Vec<f64>],
) -> Vec<f64> {
    let mut n = vec![0.0; topo.num_tiles()];
    for (fi, fp) in ps.flows.iter().enumerate() {
        let p = ccg.flows[fi].rate;
        for (pi, path) in fp.paths.iter().enumerate() {
            let r = ratios[fi][pi];
            if r <= 0.0 {
                continue;
            }
            for t in path {
                n[t.id(topo.width)] += r * p;
            }
        }
    }
    n.iter()
        .enumerate()
        .map(|(i, packets)| energy.proc_energy[i] + energy.packet_energy * packets)
        .collect()
}

pub fn uniform_ratios(ps: &PathSet) -> Vec<Vec<f64>> {
    ps.flows
        .iter()
        .map(|f| {
            let k = f.surviving_count().max(1) as f64;
            f.surviving.iter().map(|&s| if s { 1.0 / k } else { 0.0 }).collect()
        })
        .collect()
}

/// Min-max LP: minimize the peak tile energy over path split ratios.
pub fn lp_allocate(
    ps: &PathSet,
    ccg: &CoreCommGraph,
    topo: &MeshTopology,
    energy: &EnergyModel,
) -> Result<(AllocationRatios, LpReport)> {
    assert_eq!(ps.flows.len(), ccg.flows.len());
    // variable layout: one ratio per surviving path, then E
    let mut var_of: Vec<Vec<Option<usize>>> = Vec::with_capacity(ps.flows.len());
    let mut nv = 0usize;
    for fp in &ps.flows {
        let mut row = Vec::with_capacity(fp.paths.len());
        for &s in &fp.surviving {
            if s {
                row.push(Some(nv));
                nv += 1;
            } else {
                row.push(None);
            }
        }
        var_of.push(row);
    }
    let e_var = nv;
    let mut lp = LpProblem::new(nv + 1);
    lp.objective[e_var] = 1.0;

    // split constraints: ratios of each flow sum to one
    for (fi, fp) in ps.flows.iter().enumerate() {
        let terms: Vec<(usize, f64)> = fp
            .surviving
            .iter()
            .enumerate()
            .filter_map(|(pi, &s)| s.then(|| (var_of[fi][pi].unwrap(), 1.0)))
            .collect();
        if terms.is_empty() {
            return Err(Error::Infeasible(format!(
                "flow {}->{} has no surviving path",
                fp.src, fp.dst
            )));
        }
        lp.push(terms, Cmp::Eq, 1.0);
    }

    // peak constraints: E >= E_p(i) + dE * n_i
    for tile in topo.tiles() {
        let ti = tile.id(topo.width);
        let mut terms = vec![(e_var, 1.0)];
        for (fi, fp) in ps.flows.iter().enumerate() {
            let p = ccg.flows[fi].rate;
            for (pi, path) in fp.paths.iter().enumerate() {
                if let Some(v) = var_of[fi][pi] {
                    if path.contains(&tile) {
                        terms.push((v, -energy.packet_energy * p));
                    }
                }
            }
        }
        lp.push(terms, Cmp::Ge, energy.proc_energy[ti]);
    }

    // capacity constraints per directed internal link
    let mut link_users: BTreeMap<LinkId, Vec<(usize, f64)>> = BTreeMap::new();
    for (fi, fp) in ps.flows.iter().enumerate() {
        let w = ccg.flows[fi].bandwidth;
        for (pi, path) in fp.paths.iter().enumerate() {
            if let Some(v) = var_of[fi][pi] {
                for l in internal_links(path) {
                    link_users.entry(l).or_default().push((v, w));
                }
            }
        }
    }
    for (_, terms) in link_users {
        lp.push(terms, Cmp::Le, topo.link_capacity);
    }

    let sol = lp::solve(&lp).map_err(|e| match e {
        Error::Infeasible(msg) => {
            Error::Infeasible(format!("traffic allocation infeasible ({msg}); check link capacities"))
        }
        other => other,
    })?;

    let mut ratios: Vec<Vec<f64>> = Vec::with_capacity(ps.flows.len());
    for (fi, fp) in ps.flows.iter().enumerate() {
        let row: Vec<f64> = (0..fp.paths.len())
            .map(|pi| var_of[fi][pi].map(|v| sol.x[v].max(0.0)).unwrap_or(0.0))
            .collect();
        ratios.push(row);
    }
    // normalize away solver round-off
    for row in &mut ratios {
        let s: f64 = row.iter().sum();
        if s > 0.0 {
            for r in row.iter_mut() {
                *r /= s;
            }
        }
    }

    let tile_energy = tile_energies(ps, ccg, topo, energy, &ratios);
    let uni = uniform_ratios(ps);
    let uniform_tile_energy = tile_energies(ps, ccg, topo, energy, &uni);
    let report = LpReport {
        peak: sol.objective,
        tile_energy,
        uniform_peak: uniform_tile_energy.iter().cloned().fold(f64::MIN, f64::max),
        uniform_tile_energy,
    };
    Ok((AllocationRatios { ratios }, report))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TableVariant {
    SourceDest,
    DestOnly,
}

/// Probability routing tables: per router and input direction, candidate
/// output ports with selection probabilities for each (source,) destination.
#[derive(Debug, Clone, PartialEq)]
pub struct RoutingTables {
    pub variant: TableVariant,
    pub width: u16,
    pub height: u16,
    pub entries: BTreeMap<(Tile, Direction, Option<Tile>, Tile), Vec<(Direction, f64)>>,
}

impl RoutingTables {
    pub fn lookup(
        &self,
        router: Tile,
        in_dir: Direction,
        src: Tile,
        dst: Tile,
    ) -> Option<&Vec<(Direction, f64)>> {
        let key_src = match self.variant {
            TableVariant::SourceDest => Some(src),
            TableVariant::DestOnly => None,
        };
        self.entries.get(&(router, in_dir, key_src, dst))
    }
}

/// Convert path ratios into local routing-table probabilities.
pub fn build_tables(
    ratios: &AllocationRatios,
    ps: &PathSet,
    ccg: &CoreCommGraph,
    topo: &MeshTopology,
    variant: TableVariant,
) -> RoutingTables {
    // (router, in_dir, src?, dst) -> out -> (mass, seen)
    let mut acc: BTreeMap<(Tile, Direction, Option<Tile>, Tile), BTreeMap<Direction, f64>> =
        BTreeMap::new();
    for (fi, fp) in ps.flows.iter().enumerate() {
        let p = ccg.flows[fi].rate;
        let src_key = |s: Tile| match variant {
            TableVariant::SourceDest => Some(s),
            TableVariant::DestOnly => None,
        };
        for (pi, path) in fp.paths.iter().enumerate() {
            if !fp.surviving[pi] {
                continue;
            }
            let w = ratios.ratios[fi][pi] * p;
            for (i, &t) in path.iter().enumerate() {
                if i + 1 >= path.len() {
                    break; // destination router ejects locally
                }
                let in_dir = if i == 0 {
                    Direction::Local
                } else {
                    topo.direction_of(t, path[i - 1])
                };
                let out = topo.direction_of(t, path[i + 1]);
                *acc.entry((t, in_dir, src_key(fp.src), fp.dst))
                    .or_default()
                    .entry(out)
                    .or_insert(0.0) += w;
            }
        }
    }
    let mut entries = BTreeMap::new();
    for (key, outs) in acc {
        let total: f64 = outs.values().sum();
        let n = outs.len() as f64;
        let probs: Vec<(Direction, f64)> = outs
            .iter()
            .map(|(&o, &mass)| {
                // zero aggregate traffic: split uniformly over candidates
                let p = if total > 0.0 { mass / total } else { 1.0 / n };
                (o, p)
            })
            .collect();
        entries.insert(key, probs);
    }
    RoutingTables { variant, width: topo.width, height: topo.height, entries }
}

/// A route realizable from the tables that exits the admissible set.
#[derive(Debug, Clone)]
pub struct Counterexample {
    pub route: Vec<Tile>,
    pub violation: String,
}

/// Exhaustively compose table lookups for every flow and check that each
/// realizable route only uses CDG edges retained by the path set.
pub fn verify_tables(
    tables: &RoutingTables,
    ps: &PathSet,
    topo: &MeshTopology,
) -> std::result::Result<(), Counterexample> {
    // allowed CDG edges: union over surviving paths
    let mut allowed: BTreeSet<(LinkId, LinkId)> = BTreeSet::new();
    for f in &ps.flows {
        for (pi, path) in f.paths.iter().enumerate() {
            if !f.surviving[pi] {
                continue;
            }
            let links = internal_links(path);
            for w in links.windows(2) {
                allowed.insert((w[0], w[1]));
            }
        }
    }
    for f in &ps.flows {
        // DFS over (tile, in_dir, partial route)
        let mut stack = vec![(f.src, Direction::Local, vec![f.src])];
        let mut seen: BTreeSet<(Tile, Direction)> = BTreeSet::new();
        while let Some((t, in_dir, route)) = stack.pop() {
            if t == f.dst {
                continue;
            }
            if route.len() > (topo.num_tiles() + 1) {
                return Err(Counterexample {
                    route,
                    violation: "route exceeds mesh diameter: livelock".into(),
                });
            }
            let Some(cands) = tables.lookup(t, in_dir, f.src, f.dst) else {
                return Err(Counterexample {
                    route,
                    violation: format!("no table entry at {t} in-dir {in_dir} for dst {}", f.dst),
                });
            };
            for &(out, p) in cands {
                if p <= 0.0 {
                    continue;
                }
                let Some(next) = topo.neighbor(t, out) else {
                    return Err(Counterexample {
                        route: route.clone(),
                        violation: format!("output {out} leaves the mesh at {t}"),
                    });
                };
                if next.dist(f.dst) >= t.dist(f.dst) {
                    return Err(Counterexample {
                        route: route.clone(),
                        violation: format!("non-minimal step {t}->{next} toward {}", f.dst),
                    });
                }
                if in_dir != Direction::Local {
                    let prev = topo.neighbor(t, in_dir).unwrap();
                    let e_in = LinkId::Internal { from: prev, to: t };
                    let e_out = LinkId::Internal { from: t, to: next };
                    if !allowed.contains(&(e_in, e_out)) {
                        let mut route = route.clone();
                        route.push(next);
                        return Err(Counterexample {
                            route,
                            violation: format!(
                                "route uses removed CDG edge ({e_in}) -> ({e_out})"
                            ),
                        });
                    }
                }
                let mut route = route.clone();
                route.push(next);
                let next_in = topo.direction_of(next, t);
                if seen.insert((next, next_in)) {
                    stack.push((next, next_in, route));
                }
            }
        }
    }
    Ok(())
}

/// One-entry-per-line table serialization for diffing and replay.
pub fn tables_to_text(t: &RoutingTables) -> String {
    let variant = match t.variant {
        TableVariant::SourceDest => "source_dest",
        TableVariant::DestOnly => "dest_only",
    };
    let mut out = format!("# noctk routing tables v1 variant={variant} width={} height={}\n", t.width, t.height);
    for ((router, in_dir, src, dst), outs) in &t.entries {
        for (o, p) in outs {
            let s = src.map(|s| format!("{} {}", s.x, s.y)).unwrap_or_else(|| "- -".into());
            let _ = writeln!(
                out,
                "entry {} {} {} {} {} {} {} {}",
                router.x, router.y, in_dir, s, dst.x, dst.y, o, p
            );
        }
    }
    out
}

pub fn tables_from_text(text: &str) -> Result<RoutingTables> {
    let mut variant = TableVariant::SourceDest;
    let mut width = 0u16;
    let mut height = 0u16;
    let mut entries: BTreeMap<(Tile, Direction, Option<Tile>, Tile), Vec<(Direction, f64)>> =
        BTreeMap::new();
    let parse_dir = |s: &str, line: usize| -> Result<Direction> {
        Ok(match s {
            "N" => Direction::North,
            "E" => Direction::East,
            "S" => Direction::South,
            "W" => Direction::West,
            "L" => Direction::Local,
            _ => return Err(Error::Parse { line, msg: format!("bad direction `{s}`") }),
        })
    };
    for (i, raw) in text.lines().enumerate() {
        let lineno = i + 1;
        let line = raw.trim();
        if line.starts_with('#') {
            for tok in line.trim_start_matches('#').split_whitespace() {
                if let Some(v) = tok.strip_prefix("variant=") {
                    variant = match v {
                        "source_dest" => TableVariant::SourceDest,
                        "dest_only" => TableVariant::DestOnly,
                        _ => {
                            return Err(Error::Parse {
                                line: lineno,
                                msg: format!("unknown variant `{v}`"),
                            })
                        }
                    };
                } else if let Some(v) = tok.strip_prefix("width=") {
                    width = v.parse().unwrap_or(0);
                } else if let Some(v) = tok.strip_prefix("height=") {
                    height = v.parse().unwrap_or(0);
                }
            }
            continue;
        }
        if line.is_empty() {
            continue;
        }
        let toks: Vec<&str> = line.split_whitespace().collect();
        if toks.len() != 10 || toks[0] != "entry" {
            return Err(Error::Parse { line: lineno, msg: "expected `entry` with 9 fields".into() });
        }
        let num = |s: &str| -> Result<u16> {
            s.parse().map_err(|_| Error::Parse { line: lineno, msg: format!("bad number `{s}`") })
        };
        let router = Tile::new(num(toks[1])?, num(toks[2])?);
        let in_dir = parse_dir(toks[3], lineno)?;
        let src = if toks[4] == "-" {
            None
        } else {
            Some(Tile::new(num(toks[4])?, num(toks[5])?))
        };
        let dst = Tile::new(num(toks[6])?, num(toks[7])?);
        let out = parse_dir(toks[8], lineno)?;
        let p: f64 = toks[9]
            .parse()
            .map_err(|_| Error::Parse { line: lineno, msg: "bad probability".into() })?;
        entries.entry((router, in_dir, src, dst)).or_default().push((out, p));
    }
    if width == 0 || height == 0 {
        return Err(Error::Parse { line: 1, msg: "missing width/height header".into() });
    }
    Ok(RoutingTables { variant, width, height, entries })
}
