//! Route selection over an undirected rate graph.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use crate::ids::{NodeId, NodePair};

/// Deliverable rate per node pair, in bits per second.
#[derive(Clone, Debug, Default)]
pub struct RouteGraph {
    edges: BTreeMap<NodePair, f64>,
    adj: BTreeMap<NodeId, BTreeSet<NodeId>>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Selection {
    Found { nodes: Vec<NodeId>, bottleneck_bps: f64 },
    /// Paths exist but none carries the requested rate.
    QosInfeasible { best_bps: f64 },
    NoPath,
}

impl RouteGraph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds `bps` to the edge between `a` and `b`.
    pub fn add(&mut self, a: &NodeId, b: &NodeId, bps: f64) {
        *self.edges.entry(NodePair::new(a, b)).or_insert(0.0) += bps;
        self.adj.entry(a.clone()).or_default().insert(b.clone());
        self.adj.entry(b.clone()).or_default().insert(a.clone());
    }

    pub fn rate(&self, a: &NodeId, b: &NodeId) -> Option<f64> {
        self.edges.get(&NodePair::new(a, b)).copied()
    }

    pub fn edges(&self) -> impl Iterator<Item = (&NodePair, &f64)> {
        self.edges.iter()
    }

    pub fn neighbours(&self, n: &NodeId) -> impl Iterator<Item = &NodeId> {
        self.adj.get(n).into_iter().flatten()
    }

    /// Fewest hops among paths whose every edge carries `min_bps`, then the
    /// highest bottleneck, then the lexicographically smallest node sequence.
    pub fn select(&self, src: &NodeId, dst: &NodeId, min_bps: f64) -> Selection {
        if let Some(nodes) = self.best_path(src, dst, min_bps) {
            let bottleneck_bps = nodes.windows(2).map(|w| self.rate(&w[0], &w[1]).unwrap()).fold(f64::INFINITY, f64::min);
            return Selection::Found { nodes, bottleneck_bps };
        }
        match self.best_path(src, dst, f64::NEG_INFINITY) {
            None => Selection::NoPath,
            Some(_) => Selection::QosInfeasible { best_bps: self.widest(src, dst) },
        }
    }

    fn best_path(&self, src: &NodeId, dst: &NodeId, min_bps: f64) -> Option<Vec<NodeId>> {
        if src == dst {
            return None;
        }
        let ok = |a: &NodeId, b: &NodeId| self.rate(a, b).is_some_and(|r| r >= min_bps);
        // Hop distance to dst over admissible edges.
        let mut dist: BTreeMap<&NodeId, usize> = BTreeMap::new();
        let mut q = VecDeque::new();
        dist.insert(dst, 0);
        q.push_back(dst);
        while let Some(v) = q.pop_front() {
            let d = dist[v];
            for w in self.neighbours(v) {
                if ok(v, w) && !dist.contains_key(w) {
                    dist.insert(w, d + 1);
                    q.push_back(w);
                }
            }
        }
        let hops = *dist.get(src)?;
        // Best bottleneck from each node along shortest paths, by layer.
        let next = |v: &NodeId| -> Vec<&NodeId> {
            let dv = dist[v];
            self.neighbours(v).filter(|w| ok(v, w) && dist.get(w) == Some(&(dv - 1))).collect()
        };
        let mut best: BTreeMap<&NodeId, f64> = BTreeMap::new();
        best.insert(dst, f64::INFINITY);
        for layer in 1..=hops {
            for (&v, _) in dist.iter().filter(|(_, &d)| d == layer) {
                let b = next(v).into_iter().map(|w| self.rate(v, w).unwrap().min(best[w])).fold(f64::NEG_INFINITY, f64::max);
                best.insert(v, b);
            }
        }
        let target = best[src];
        let mut path = vec![src.clone()];
        let mut cur = f64::INFINITY;
        let mut v = src;
        while v != dst {
            // Successors come out of a BTreeSet, so the first match is the
            // lexicographically smallest.
            let w = next(v)
                .into_iter()
                .find(|w| cur.min(self.rate(v, w).unwrap()).min(best[*w]) == target)
                .expect("layered graph has an optimal successor");
            cur = cur.min(self.rate(v, w).unwrap());
            path.push(w.clone());
            v = w;
        }
        Some(path)
    }

    /// Largest bottleneck over all paths, ignoring hop count.
    fn widest(&self, src: &NodeId, dst: &NodeId) -> f64 {
        let mut rates: Vec<f64> = self.edges.values().copied().collect();
        rates.sort_by(|a, b| b.total_cmp(a));
        rates.dedup();
        rates.into_iter().find(|&r| self.best_path(src, dst, r).is_some()).unwrap_or(0.0)
    }
}
