//! Tarjan strongly connected components over an adjacency-list digraph.

pub fn tarjan_scc(graph: &[Vec<usize>]) -> Vec<Vec<usize>> {
    let n = graph.len();
    let mut state = TarjanState {
        index: 0,
        stack: Vec::new(),
        on_stack: vec![false; n],
        idx: vec![None; n],
        low: vec![0; n],
        comps: Vec::new(),
    };
    for v in 0..n {
        if state.idx[v].is_none() {
            strongconnect(v, graph, &mut state);
        }
    }
    state.comps
}

struct TarjanState {
    index: usize,
    stack: Vec<usize>,
    on_stack: Vec<bool>,
    idx: Vec<Option<usize>>,
    low: Vec<usize>,
    comps: Vec<Vec<usize>>,
}

fn strongconnect(v: usize, graph: &[Vec<usize>], st: &mut TarjanState) {
    st.idx[v] = Some(st.index);
    st.low[v] = st.index;
    st.index += 1;
    st.stack.push(v);
    st.on_stack[v] = true;

    for &w in &graph[v] {
        if st.idx[w].is_none() {
            strongconnect(w, graph, st);
            st.low[v] = st.low[v].min(st.low[w]);
        } else if st.on_stack[w] {
            st.low[v] = st.low[v].min(st.idx[w].unwrap());
        }
    }

    if st.low[v] == st.idx[v].unwrap() {
        let mut comp = Vec::new();
        while let Some(w) = st.stack.pop() {
            st.on_stack[w] = false;
            comp.push(w);
            if w == v {
                break;
            }
        }
        st.comps.push(comp);
    }
}

/// True when the digraph has no cycle (every SCC is a singleton without a
/// self loop).
pub fn is_acyclic(graph: &[Vec<usize>]) -> bool {
    tarjan_scc(graph)
        .iter()
        .all(|c| c.len() == 1 && !graph[c[0]].contains(&c[0]))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dag_gives_singletons() {
        let g = vec![vec![1, 2], vec![2], vec![]];
        let comps = tarjan_scc(&g);
        assert_eq!(comps.len(), 3);
        assert!(comps.iter().all(|c| c.len() == 1));
        assert!(is_acyclic(&g));
    }

    #[test]
    fn one_four_cycle_is_one_component() {
        let g = vec![vec![1], vec![2], vec![3], vec![0]];
        let comps = tarjan_scc(&g);
        assert_eq!(comps.len(), 1);
        assert_eq!(comps[0].len(), 4);
        assert!(!is_acyclic(&g));
    }

    /// O(V^3) pairwise-reachability closure oracle.
    fn scc_oracle(g: &[Vec<usize>]) -> Vec<Vec<usize>> {
        let n = g.len();
        let mut reach = vec![vec![false; n]; n];
        for (v, adj) in g.iter().enumerate() {
            reach[v][v] = true;
            for &w in adj {
                reach[v][w] = true;
            }
        }
        for k in 0..n {
            for i in 0..n {
                for j in 0..n {
                    reach[i][j] |= reach[i][k] && reach[k][j];
                }
            }
        }
        let mut comp = vec![usize::MAX; n];
        let mut next = 0;
        for v in 0..n {
            if comp[v] == usize::MAX {
                for w in 0..n {
                    if reach[v][w] && reach[w][v] {
                        comp[w] = next;
                    }
                }
                next += 1;
            }
        }
        let mut out = vec![Vec::new(); next];
        for (v, &c) in comp.iter().enumerate() {
            out[c].push(v);
        }
        out
    }

    #[test]
    fn random_digraphs_match_reachability_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(42);
        for _ in 0..50 {
            let n = rng.gen_range(1..14);
            let mut g = vec![Vec::new(); n];
            for v in 0..n {
                for w in 0..n {
                    if v != w && rng.gen_bool(0.18) {
                        g[v].push(w);
                    }
                }
            }
            let mut got: Vec<Vec<usize>> = tarjan_scc(&g)
                .into_iter()
                .map(|mut c| {
                    c.sort_unstable();
                    c
                })
                .collect();
            got.sort();
            let mut want: Vec<Vec<usize>> = scc_oracle(&g)
                .into_iter()
                .map(|mut c| {
                    c.sort_unstable();
                    c
                })
                .collect();
            want.sort();
            assert_eq!(got, want);
        }
    }
}
