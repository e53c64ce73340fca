//! Dinic max-flow on integer capacities.

use std::collections::VecDeque;

#[derive(Clone, Debug)]
struct Arc {
    to: usize,
    cap: i64,
}

#[derive(Clone, Debug, Default)]
pub struct Dinic {
    arcs: Vec<Arc>,
    head: Vec<Vec<usize>>,
    level: Vec<i32>,
    iter: Vec<usize>,
}

impl Dinic {
    pub fn new(n: usize) -> Self {
        Self { arcs: Vec::new(), head: vec![Vec::new(); n], level: vec![0; n], iter: vec![0; n] }
    }

    pub fn node_count(&self) -> usize {
        self.head.len()
    }

    /// Adds `u → v` with capacity `cap`; returns the arc id (its reverse is `id ^ 1`).
    pub fn add_edge(&mut self, u: usize, v: usize, cap: i64) -> usize {
        let id = self.arcs.len();
        self.arcs.push(Arc { to: v, cap });
        self.head[u].push(id);
        self.arcs.push(Arc { to: u, cap: 0 });
        self.head[v].push(id + 1);
        id
    }

    /// Flow currently routed on arc `id`.
    pub fn flow(&self, id: usize) -> i64 {
        self.arcs[id ^ 1].cap
    }

    fn bfs(&mut self, s: usize, t: usize) -> bool {
        self.level.iter_mut().for_each(|l| *l = -1);
        self.level[s] = 0;
        let mut q = VecDeque::from([s]);
        while let Some(u) = q.pop_front() {
            for &e in &self.head[u] {
                let a = &self.arcs[e];
                if a.cap > 0 && self.level[a.to] < 0 {
                    self.level[a.to] = self.level[u] + 1;
                    q.push_back(a.to);
                }
            }
        }
        self.level[t] >= 0
    }

    fn dfs(&mut self, u: usize, t: usize, f: i64) -> i64 {
        if u == t {
            return f;
        }
        while self.iter[u] < self.head[u].len() {
            let e = self.head[u][self.iter[u]];
            let (to, cap) = (self.arcs[e].to, self.arcs[e].cap);
            if cap > 0 && self.level[to] == self.level[u] + 1 {
                let got = self.dfs(to, t, f.min(cap));
                if got > 0 {
                    self.arcs[e].cap -= got;
                    self.arcs[e ^ 1].cap += got;
                    return got;
                }
            }
            self.iter[u] += 1;
        }
        0
    }

    pub fn max_flow(&mut self, s: usize, t: usize) -> i64 {
        let mut total = 0;
        while self.bfs(s, t) {
            self.iter.iter_mut().for_each(|i| *i = 0);
            loop {
                let f = self.dfs(s, t, i64::MAX);
                if f == 0 {
                    break;
                }
                total += f;
            }
        }
        total
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn classic_example() {
        let mut g = Dinic::new(4);
        let a = g.add_edge(0, 1, 3);
        g.add_edge(0, 2, 2);
        g.add_edge(1, 2, 1);
        g.add_edge(1, 3, 2);
        g.add_edge(2, 3, 3);
        assert_eq!(g.max_flow(0, 3), 5);
        assert!(g.flow(a) <= 3);
    }

    proptest! {
        // max flow equals min cut, by enumeration of all cuts on small graphs
        #[test]
        fn equals_min_cut(edges in prop::collection::vec((0usize..6, 0usize..6, 0i64..5), 0..15)) {
            let n = 6;
            let mut g = Dinic::new(n);
            for &(u, v, c) in &edges {
                if u != v { g.add_edge(u, v, c); }
            }
            let f = g.max_flow(0, n - 1);
            let mut best = i64::MAX;
            for mask in 0..(1u32 << n) {
                if mask & 1 == 0 || mask >> (n - 1) & 1 == 1 { continue; }
                let cut: i64 = edges.iter().filter(|&&(u, v, _)| u != v && mask >> u & 1 == 1 && mask >> v & 1 == 0).map(|e| e.2).sum();
                best = best.min(cut);
            }
            prop_assert_eq!(f, best);
        }
    }
}
