//! Pipeline topology: a directed acyclic graph of named nodes.
//!
//! Acyclicity is enforced when edges are inserted, so a `Dag` is valid after
//! every accepted mutation. Topological order is Kahn's algorithm with ties
//! broken by ascending insertion sequence, which makes it deterministic.
//! The order of a node's incoming edges is the order they were added; the
//! pipeline uses it as inbox slot order.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap, HashMap, HashSet};
use std::fmt;
use std::sync::Arc;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum DagError {
    #[error("node name must not be empty")]
    EmptyName,
    #[error("duplicate node `{0}`")]
    DuplicateName(String),
    #[error("unknown node `{0}`")]
    UnknownNode(String),
    #[error("self-loop on `{0}`")]
    SelfLoop(String),
    #[error("edge {from} -> {to} would close the cycle {}", path.join(" -> "))]
    CycleRejected { from: String, to: String, path: Vec<String> },
    #[error("duplicate edge {from} -> {to}")]
    DuplicateEdge { from: String, to: String },
    #[error("no edge {from} -> {to}")]
    UnknownEdge { from: String, to: String },
}

/// A node handle: its unique name plus the insertion sequence number.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId {
    seq: u64,
    name: Arc<str>,
}

impl NodeId {
    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn seq(&self) -> u64 {
        self.seq
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name)
    }
}

#[derive(Debug, Clone)]
struct Node {
    id: NodeId,
    /// Incoming edges in insertion order.
    preds: Vec<u64>,
    /// Outgoing edges in insertion order.
    succs: Vec<u64>,
}

#[derive(Debug, Clone, Default)]
pub struct Dag {
    nodes: BTreeMap<u64, Node>,
    by_name: HashMap<Arc<str>, u64>,
    next_seq: u64,
}

impl Dag {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.by_name.contains_key(name)
    }

    pub fn node(&self, name: &str) -> Option<&NodeId> {
        self.by_name.get(name).map(|s| &self.nodes[s].id)
    }

    /// Nodes in insertion order.
    pub fn nodes(&self) -> impl Iterator<Item = &NodeId> {
        self.nodes.values().map(|n| &n.id)
    }

    pub fn edge_count(&self) -> usize {
        self.nodes.values().map(|n| n.succs.len()).sum()
    }

    pub fn has_edge(&self, from: &str, to: &str) -> bool {
        match (self.by_name.get(from), self.by_name.get(to)) {
            (Some(f), Some(t)) => self.nodes[f].succs.contains(t),
            _ => false,
        }
    }

    /// All edges, grouped by source node in insertion order.
    pub fn edges(&self) -> Vec<(NodeId, NodeId)> {
        self.nodes
            .values()
            .flat_map(|n| n.succs.iter().map(move |s| (n.id.clone(), self.nodes[s].id.clone())))
            .collect()
    }

    fn seq_of(&self, name: &str) -> Result<u64, DagError> {
        self.by_name.get(name).copied().ok_or_else(|| DagError::UnknownNode(name.to_owned()))
    }

    pub fn add_node(&mut self, name: &str) -> Result<NodeId, DagError> {
        if name.is_empty() {
            return Err(DagError::EmptyName);
        }
        if self.by_name.contains_key(name) {
            return Err(DagError::DuplicateName(name.to_owned()));
        }
        let seq = self.next_seq;
        self.next_seq += 1;
        let id = NodeId { seq, name: Arc::from(name) };
        self.by_name.insert(id.name.clone(), seq);
        self.nodes.insert(seq, Node { id: id.clone(), preds: Vec::new(), succs: Vec::new() });
        Ok(id)
    }

    pub fn add_edge(&mut self, from: &str, to: &str) -> Result<(), DagError> {
        let f = self.seq_of(from)?;
        let t = self.seq_of(to)?;
        if f == t {
            return Err(DagError::SelfLoop(from.to_owned()));
        }
        if self.nodes[&f].succs.contains(&t) {
            return Err(DagError::DuplicateEdge { from: from.to_owned(), to: to.to_owned() });
        }
        if let Some(path) = self.path(t, f) {
            let mut names: Vec<String> = path.iter().map(|s| self.nodes[s].id.name.to_string()).collect();
            names.push(to.to_owned());
            return Err(DagError::CycleRejected { from: from.to_owned(), to: to.to_owned(), path: names });
        }
        self.nodes.get_mut(&f).expect("present").succs.push(t);
        self.nodes.get_mut(&t).expect("present").preds.push(f);
        Ok(())
    }

    /// A path `start ~> goal` if one exists.
    fn path(&self, start: u64, goal: u64) -> Option<Vec<u64>> {
        let mut parent: HashMap<u64, u64> = HashMap::new();
        let mut seen = HashSet::from([start]);
        let mut stack = vec![start];
        while let Some(n) = stack.pop() {
            if n == goal {
                let mut path = vec![n];
                let mut cur = n;
                while let Some(&p) = parent.get(&cur) {
                    path.push(p);
                    cur = p;
                }
                path.reverse();
                return Some(path);
            }
            for &s in &self.nodes[&n].succs {
                if seen.insert(s) {
                    parent.insert(s, n);
                    stack.push(s);
                }
            }
        }
        None
    }

    pub fn remove_edge(&mut self, from: &str, to: &str) -> Result<(), DagError> {
        let unknown = || DagError::UnknownEdge { from: from.to_owned(), to: to.to_owned() };
        let f = self.seq_of(from).map_err(|_| unknown())?;
        let t = self.seq_of(to).map_err(|_| unknown())?;
        let succs = &mut self.nodes.get_mut(&f).expect("present").succs;
        let pos = succs.iter().position(|&s| s == t).ok_or_else(unknown)?;
        succs.remove(pos);
        self.nodes.get_mut(&t).expect("present").preds.retain(|&p| p != f);
        Ok(())
    }

    /// Removes a node and every edge touching it.
    pub fn remove_node(&mut self, name: &str) -> Result<NodeId, DagError> {
        let seq = self.seq_of(name)?;
        let node = self.nodes.remove(&seq).expect("present");
        self.by_name.remove(name);
        for p in &node.preds {
            self.nodes.get_mut(p).expect("edge endpoint").succs.retain(|&s| s != seq);
        }
        for s in &node.succs {
            self.nodes.get_mut(s).expect("edge endpoint").preds.retain(|&p| p != seq);
        }
        Ok(node.id)
    }

    /// Kahn's algorithm; among ready nodes the lowest insertion sequence goes first.
    pub fn topo_sort(&self) -> Vec<NodeId> {
        let mut indeg: HashMap<u64, usize> = self.nodes.iter().map(|(&s, n)| (s, n.preds.len())).collect();
        let mut ready: BinaryHeap<Reverse<u64>> =
            indeg.iter().filter(|(_, &d)| d == 0).map(|(&s, _)| Reverse(s)).collect();
        let mut order = Vec::with_capacity(self.nodes.len());
        while let Some(Reverse(s)) = ready.pop() {
            let node = &self.nodes[&s];
            order.push(node.id.clone());
            for t in &node.succs {
                let d = indeg.get_mut(t).expect("present");
                *d -= 1;
                if *d == 0 {
                    ready.push(Reverse(*t));
                }
            }
        }
        debug_assert_eq!(order.len(), self.nodes.len(), "acyclic by construction");
        order
    }

    pub fn roots(&self) -> Vec<NodeId> {
        self.nodes.values().filter(|n| n.preds.is_empty()).map(|n| n.id.clone()).collect()
    }

    pub fn leaves(&self) -> Vec<NodeId> {
        self.nodes.values().filter(|n| n.succs.is_empty()).map(|n| n.id.clone()).collect()
    }

    /// Upstream nodes in incoming-edge insertion order.
    pub fn predecessors(&self, name: &str) -> Result<Vec<NodeId>, DagError> {
        let seq = self.seq_of(name)?;
        Ok(self.nodes[&seq].preds.iter().map(|p| self.nodes[p].id.clone()).collect())
    }

    /// Downstream nodes in outgoing-edge insertion order.
    pub fn successors(&self, name: &str) -> Result<Vec<NodeId>, DagError> {
        let seq = self.seq_of(name)?;
        Ok(self.nodes[&seq].succs.iter().map(|s| self.nodes[s].id.clone()).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names(ids: &[NodeId]) -> Vec<&str> {
        ids.iter().map(NodeId::name).collect()
    }

    fn diamond() -> Dag {
        let mut d = Dag::new();
        for n in ["A", "B", "C", "D"] {
            d.add_node(n).unwrap();
        }
        for (f, t) in [("A", "B"), ("A", "C"), ("B", "D"), ("C", "D")] {
            d.add_edge(f, t).unwrap();
        }
        d
    }

    #[test]
    fn first_node_has_seq_zero() {
        let mut d = Dag::new();
        let a = d.add_node("A").unwrap();
        assert_eq!((a.name(), a.seq()), ("A", 0));
        assert_eq!(d.add_node("A"), Err(DagError::DuplicateName("A".into())));
        assert_eq!(d.add_node(""), Err(DagError::EmptyName));
    }

    #[test]
    fn seq_is_never_reused() {
        let mut d = Dag::new();
        for n in ["A", "B", "C"] {
            d.add_node(n).unwrap();
        }
        d.remove_node("B").unwrap();
        // replaying the insertions: A=0, B=1, C=2, so the next fresh seq is 3
        assert_eq!(d.add_node("D").unwrap().seq(), 3);
        assert_eq!(d.add_node("B").unwrap().seq(), 4);
    }

    #[test]
    fn rejects_cycles_and_self_loops() {
        let mut d = Dag::new();
        for n in ["A", "B", "C"] {
            d.add_node(n).unwrap();
        }
        d.add_edge("A", "B").unwrap();
        d.add_edge("B", "C").unwrap();
        let before = d.edges();
        match d.add_edge("C", "A") {
            Err(DagError::CycleRejected { path, .. }) => assert_eq!(path, ["A", "B", "C", "A"]),
            other => panic!("{other:?}"),
        }
        assert_eq!(d.edges(), before);
        assert_eq!(d.add_edge("A", "A"), Err(DagError::SelfLoop("A".into())));
        assert!(matches!(d.add_edge("A", "Z"), Err(DagError::UnknownNode(_))));
        assert!(matches!(d.add_edge("A", "B"), Err(DagError::DuplicateEdge { .. })));
    }

    #[test]
    fn remove_node_drops_incident_edges() {
        let mut d = diamond();
        d.remove_node("B").unwrap();
        let e: Vec<_> = d.edges().into_iter().map(|(f, t)| (f.name().to_owned(), t.name().to_owned())).collect();
        assert_eq!(e, [("A".to_owned(), "C".to_owned()), ("C".to_owned(), "D".to_owned())]);

        let mut single = Dag::new();
        single.add_node("X").unwrap();
        single.remove_node("X").unwrap();
        assert!(single.is_empty());
        assert!(matches!(single.remove_node("X"), Err(DagError::UnknownNode(_))));
    }

    #[test]
    fn remove_edge_and_readd() {
        let mut d = Dag::new();
        d.add_node("A").unwrap();
        d.add_node("B").unwrap();
        d.add_edge("A", "B").unwrap();
        let before = d.edges();
        d.remove_edge("A", "B").unwrap();
        assert_eq!((d.len(), d.edge_count()), (2, 0));
        assert!(matches!(d.remove_edge("A", "B"), Err(DagError::UnknownEdge { .. })));
        d.add_edge("A", "B").unwrap();
        assert_eq!(d.edges(), before);
    }

    #[test]
    fn diamond_topology_queries() {
        let d = diamond();
        assert_eq!(names(&d.topo_sort()), ["A", "B", "C", "D"]);
        assert_eq!(names(&d.roots()), ["A"]);
        assert_eq!(names(&d.leaves()), ["D"]);
        assert_eq!(names(&d.predecessors("D").unwrap()), ["B", "C"]);
        assert_eq!(names(&d.successors("A").unwrap()), ["B", "C"]);
        assert!(Dag::new().topo_sort().is_empty());
    }

    #[test]
    fn predecessor_order_follows_edge_insertion() {
        let mut d = Dag::new();
        for n in ["A", "B", "D"] {
            d.add_node(n).unwrap();
        }
        d.add_edge("B", "D").unwrap();
        d.add_edge("A", "D").unwrap();
        assert_eq!(names(&d.predecessors("D").unwrap()), ["B", "A"]);
        // topo order still prefers the lower seq among ready nodes
        assert_eq!(names(&d.topo_sort()), ["A", "B", "D"]);
    }

    #[test]
    fn isolated_node_is_root_and_leaf() {
        let mut d = diamond();
        d.add_node("N").unwrap();
        assert!(names(&d.roots()).contains(&"N"));
        assert!(names(&d.leaves()).contains(&"N"));
    }
}
