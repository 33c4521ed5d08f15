//! A plain reference model of a node/edge graph used to check `Dag`.

use std::collections::{BTreeMap, BTreeSet};

use flowpipe::Dag;
use rand::Rng;

#[derive(Debug, Clone)]
pub enum Op {
    AddNode(u8),
    RemoveNode(u8),
    AddEdge(u8, u8),
    RemoveEdge(u8, u8),
}

pub fn name(k: u8) -> String {
    format!("n{k}")
}

pub fn random_op(rng: &mut impl Rng, width: u8) -> Op {
    let (a, b) = (rng.gen_range(0..width), rng.gen_range(0..width));
    match rng.gen_range(0..10) {
        0..=2 => Op::AddNode(a),
        3 => Op::RemoveNode(a),
        4..=8 => Op::AddEdge(a, b),
        _ => Op::RemoveEdge(a, b),
    }
}

#[derive(Debug, Default)]
pub struct Model {
    pub nodes: BTreeMap<String, u64>,
    pub edges: BTreeSet<(String, String)>,
    next_seq: u64,
}

impl Model {
    fn reaches(&self, from: &str, to: &str) -> bool {
        let mut seen = BTreeSet::new();
        let mut stack = vec![from.to_owned()];
        while let Some(n) = stack.pop() {
            if n == to {
                return true;
            }
            if seen.insert(n.clone()) {
                stack.extend(self.edges.iter().filter(|(f, _)| *f == n).map(|(_, t)| t.clone()));
            }
        }
        false
    }

    /// Applies `op`, returning whether the model accepts it.
    pub fn apply(&mut self, op: &Op) -> bool {
        match op {
            Op::AddNode(k) => {
                let n = name(*k);
                if self.nodes.contains_key(&n) {
                    return false;
                }
                self.nodes.insert(n, self.next_seq);
                self.next_seq += 1;
                true
            }
            Op::RemoveNode(k) => {
                let n = name(*k);
                if self.nodes.remove(&n).is_none() {
                    return false;
                }
                self.edges.retain(|(f, t)| *f != n && *t != n);
                true
            }
            Op::AddEdge(a, b) => {
                let (f, t) = (name(*a), name(*b));
                let ok = a != b
                    && self.nodes.contains_key(&f)
                    && self.nodes.contains_key(&t)
                    && !self.edges.contains(&(f.clone(), t.clone()))
                    && !self.reaches(&t, &f);
                if ok {
                    self.edges.insert((f, t));
                }
                ok
            }
            Op::RemoveEdge(a, b) => self.edges.remove(&(name(*a), name(*b))),
        }
    }

    /// Kahn order picking the lowest insertion sequence among ready nodes.
    pub fn topo(&self) -> Vec<String> {
        let mut placed: BTreeSet<String> = BTreeSet::new();
        let mut order = Vec::new();
        while order.len() < self.nodes.len() {
            let next = self
                .nodes
                .iter()
                .filter(|(n, _)| !placed.contains(*n))
                .filter(|(n, _)| self.edges.iter().all(|(f, t)| t != *n || placed.contains(f)))
                .min_by_key(|(_, s)| **s)
                .map(|(n, _)| n.clone())
                .expect("model graph is acyclic");
            placed.insert(next.clone());
            order.push(next);
        }
        order
    }
}

pub fn apply(dag: &mut Dag, op: &Op) -> bool {
    match op {
        Op::AddNode(k) => dag.add_node(&name(*k)).is_ok(),
        Op::RemoveNode(k) => dag.remove_node(&name(*k)).is_ok(),
        Op::AddEdge(a, b) => dag.add_edge(&name(*a), &name(*b)).is_ok(),
        Op::RemoveEdge(a, b) => dag.remove_edge(&name(*a), &name(*b)).is_ok(),
    }
}

pub fn edge_set(dag: &Dag) -> BTreeSet<(String, String)> {
    dag.edges().into_iter().map(|(f, t)| (f.name().to_owned(), t.name().to_owned())).collect()
}

/// Transitive closure by repeated relaxation; true if any node reaches itself.
pub fn has_cycle(dag: &Dag) -> bool {
    let names: Vec<String> = dag.nodes().map(|n| n.name().to_owned()).collect();
    let idx = |s: &str| names.iter().position(|n| n == s).unwrap();
    let n = names.len();
    let mut reach = vec![vec![false; n]; n];
    for (f, t) in edge_set(dag) {
        reach[idx(&f)][idx(&t)] = true;
    }
    for k in 0..n {
        for i in 0..n {
            for j in 0..n {
                if reach[i][k] && reach[k][j] {
                    reach[i][j] = true;
                }
            }
        }
    }
    (0..n).any(|i| reach[i][i])
}

/// Every edge goes forward in `order` and every node appears exactly once.
pub fn respects_edges(dag: &Dag, order: &[String]) -> bool {
    let pos = |s: &str| order.iter().position(|n| n == s);
    let all_once =
        order.len() == dag.len() && dag.nodes().all(|n| order.iter().filter(|o| *o == n.name()).count() == 1);
    all_once && edge_set(dag).iter().all(|(f, t)| matches!((pos(f), pos(t)), (Some(a), Some(b)) if a < b))
}
