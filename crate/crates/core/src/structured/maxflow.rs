use std::collections::VecDeque;

/// Residual graph with `f64` capacities, solved with Dinic's algorithm.
#[derive(Clone, Debug)]
pub struct FlowGraph {
    adj: Vec<Vec<usize>>,
    to: Vec<usize>,
    cap: Vec<f64>,
    tol: f64,
}

impl FlowGraph {
    pub fn new(nodes: usize) -> Self {
        Self {
            adj: vec![Vec::new(); nodes],
            to: Vec::new(),
            cap: Vec::new(),
            tol: 0.0,
        }
    }

    pub fn node_count(&self) -> usize {
        self.adj.len()
    }

    /// Directed edge `u -> v`. Non-positive capacities are ignored.
    pub fn add_edge(&mut self, u: usize, v: usize, cap: f64) {
        if !(cap > 0.0) {
            return;
        }
        self.adj[u].push(self.to.len());
        self.to.push(v);
        self.cap.push(cap);
        self.adj[v].push(self.to.len());
        self.to.push(u);
        self.cap.push(0.0);
    }

    fn levels(&self, s: usize) -> Vec<i64> {
        let mut level = vec![-1; self.adj.len()];
        level[s] = 0;
        let mut q = VecDeque::from([s]);
        while let Some(u) = q.pop_front() {
            for &e in &self.adj[u] {
                let v = self.to[e];
                if self.cap[e] > self.tol && level[v] < 0 {
                    level[v] = level[u] + 1;
                    q.push_back(v);
                }
            }
        }
        level
    }

    fn augment(&mut self, u: usize, t: usize, pushed: f64, level: &[i64], it: &mut [usize]) -> f64 {
        if u == t {
            return pushed;
        }
        while it[u] < self.adj[u].len() {
            let e = self.adj[u][it[u]];
            let v = self.to[e];
            if self.cap[e] > self.tol && level[v] == level[u] + 1 {
                let got = self.augment(v, t, pushed.min(self.cap[e]), level, it);
                if got > 0.0 {
                    self.cap[e] -= got;
                    self.cap[e ^ 1] += got;
                    return got;
                }
            }
            it[u] += 1;
        }
        0.0
    }

    /// Value of a maximum `s`-`t` flow. Leaves the residual graph in place
    /// for [`FlowGraph::source_side`].
    pub fn max_flow(&mut self, s: usize, t: usize) -> f64 {
        let scale = self.cap.iter().copied().fold(0.0, f64::max);
        self.tol = scale * 1e-14;
        let mut total = 0.0;
        loop {
            let level = self.levels(s);
            if level[t] < 0 {
                return total;
            }
            let mut it = vec![0; self.adj.len()];
            loop {
                let f = self.augment(s, t, f64::INFINITY, &level, &mut it);
                if f <= 0.0 {
                    break;
                }
                total += f;
            }
        }
    }

    /// Nodes reachable from `s` in the residual graph: the minimal source
    /// side of a minimum cut.
    pub fn source_side(&self, s: usize) -> Vec<bool> {
        self.levels(s).into_iter().map(|l| l >= 0).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn classic_network() {
        // CLRS example; max flow 23.
        let mut g = FlowGraph::new(6);
        for (u, v, c) in [
            (0, 1, 16.0),
            (0, 2, 13.0),
            (1, 2, 10.0),
            (2, 1, 4.0),
            (1, 3, 12.0),
            (3, 2, 9.0),
            (2, 4, 14.0),
            (4, 3, 7.0),
            (3, 5, 20.0),
            (4, 5, 4.0),
        ] {
            g.add_edge(u, v, c);
        }
        assert!((g.max_flow(0, 5) - 23.0).abs() < 1e-12);
        let side = g.source_side(0);
        assert!(side[0] && !side[5]);
    }

    #[test]
    fn disconnected_sink() {
        let mut g = FlowGraph::new(3);
        g.add_edge(0, 1, 5.0);
        assert_eq!(g.max_flow(0, 2), 0.0);
    }
}
