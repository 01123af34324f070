//! Causal graphs over system variables and the graphical criteria used to
//! decide which interventions are identifiable from passive observations.
//!
//! The graph is a DAG whose nodes carry a [`VariableKind`]; hidden variables
//! (exogenous or internal) may appear in the graph but are never eligible as
//! adjustment variables. d-separation is decided with the standard reachable
//! ("Bayes ball") algorithm; a slow path-enumeration oracle is also exported
//! so tests can cross-check the two implementations on random DAGs.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum GraphError {
    #[error("duplicate node `{0}`")]
    DuplicateNode(String),
    #[error("edge ({parent} -> {child}) references unknown node `{name}`")]
    UnknownEndpoint {
        parent: String,
        child: String,
        name: String,
    },
    #[error("graph has a cycle through `{0}`")]
    CycleDetected(String),
    #[error("unknown node `{0}`")]
    UnknownNode(String),
    #[error("node `{0}` appears in more than one of the queried sets")]
    OverlappingSets(String),
    #[error("`{0}` is not a control variable and cannot be intervened on")]
    NotAControl(String),
    #[error("control `{name}` has no declared domain")]
    MissingDomain { name: String },
    #[error("value {value} for `{name}` is outside its domain [{lo}, {hi}]")]
    OutOfDomain {
        name: String,
        value: f64,
        lo: f64,
        hi: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VariableKind {
    /// Unobserved external driver.
    Exogenous,
    /// Unobserved internal state.
    Internal,
    /// Observed but not controllable.
    Observable,
    /// Observed and directly settable by an intervention.
    Control,
    /// Observed metric that specifications constrain.
    Target,
}

impl VariableKind {
    /// Variables that can appear in recorded datasets.
    pub fn is_data_visible(self) -> bool {
        matches!(
            self,
            VariableKind::Observable | VariableKind::Control | VariableKind::Target
        )
    }

    pub fn is_hidden(self) -> bool {
        !self.is_data_visible()
    }
}

/// JSON schema for graphs on disk: `{"nodes": [...], "edges": [["A","B"], ...]}`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraphSpec {
    pub nodes: Vec<NodeSpec>,
    pub edges: Vec<[String; 2]>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeSpec {
    pub name: String,
    pub kind: VariableKind,
    /// Closed real interval; required for control nodes used in grids.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub domain: Option<[f64; 2]>,
}

#[derive(Debug, Clone)]
struct NodeInfo {
    kind: VariableKind,
    domain: Option<[f64; 2]>,
}

/// Directed acyclic graph over named variables.
#[derive(Debug, Clone)]
pub struct CausalGraph {
    nodes: BTreeMap<String, NodeInfo>,
    parents: BTreeMap<String, BTreeSet<String>>,
    children: BTreeMap<String, BTreeSet<String>>,
    /// Declaration order of the nodes, kept for deterministic control-axis
    /// ordering in grids and reports.
    order: Vec<String>,
}

impl CausalGraph {
    pub fn from_spec(spec: &GraphSpec) -> Result<Self, GraphError> {
        let mut nodes = BTreeMap::new();
        let mut order = Vec::new();
        for node in &spec.nodes {
            if nodes
                .insert(
                    node.name.clone(),
                    NodeInfo {
                        kind: node.kind,
                        domain: node.domain,
                    },
                )
                .is_some()
            {
                return Err(GraphError::DuplicateNode(node.name.clone()));
            }
            order.push(node.name.clone());
        }
        let mut parents: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
        let mut children: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
        for [parent, child] in &spec.edges {
            for name in [parent, child] {
                if !nodes.contains_key(name) {
                    return Err(GraphError::UnknownEndpoint {
                        parent: parent.clone(),
                        child: child.clone(),
                        name: name.clone(),
                    });
                }
            }
            parents
                .entry(child.clone())
                .or_default()
                .insert(parent.clone());
            children
                .entry(parent.clone())
                .or_default()
                .insert(child.clone());
        }
        let graph = CausalGraph {
            nodes,
            parents,
            children,
            order,
        };
        graph.check_acyclic()?;
        Ok(graph)
    }

    pub fn from_json_str(text: &str) -> Result<Self, serde_json::Error> {
        let spec: GraphSpec = serde_json::from_str(text)?;
        CausalGraph::from_spec(&spec).map_err(serde::de::Error::custom)
    }

    pub fn to_spec(&self) -> GraphSpec {
        let nodes = self
            .order
            .iter()
            .map(|name| {
                let info = &self.nodes[name];
                NodeSpec {
                    name: name.clone(),
                    kind: info.kind,
                    domain: info.domain,
                }
            })
            .collect();
        let mut edges = Vec::new();
        for (parent, kids) in &self.children {
            for child in kids {
                edges.push([parent.clone(), child.clone()]);
            }
        }
        GraphSpec { nodes, edges }
    }

    fn check_acyclic(&self) -> Result<(), GraphError> {
        // Kahn's algorithm; any node left with positive in-degree sits on a cycle.
        let mut indegree: BTreeMap<String, usize> = self
            .nodes
            .keys()
            .map(|n| (n.clone(), self.parents_of(n).len()))
            .collect();
        let mut queue: VecDeque<String> = indegree
            .iter()
            .filter(|(_, &d)| d == 0)
            .map(|(n, _)| n.clone())
            .collect();
        let mut seen = 0usize;
        while let Some(node) = queue.pop_front() {
            seen += 1;
            for child in self.children_of(&node) {
                let d = indegree.get_mut(&child).unwrap();
                *d -= 1;
                if *d == 0 {
                    queue.push_back(child);
                }
            }
        }
        if seen == self.nodes.len() {
            Ok(())
        } else {
            let culprit = indegree
                .iter()
                .find(|(_, &d)| d > 0)
                .map(|(n, _)| n.clone())
                .unwrap_or_default();
            Err(GraphError::CycleDetected(culprit))
        }
    }

    pub fn contains(&self, name: &str) -> bool {
        self.nodes.contains_key(name)
    }

    pub fn kind(&self, name: &str) -> Option<VariableKind> {
        self.nodes.get(name).map(|n| n.kind)
    }

    pub fn domain(&self, name: &str) -> Option<[f64; 2]> {
        self.nodes.get(name).and_then(|n| n.domain)
    }

    /// Node names in declaration order.
    pub fn node_names(&self) -> &[String] {
        &self.order
    }

    /// Control variables in declaration order.
    pub fn control_names(&self) -> Vec<String> {
        self.order
            .iter()
            .filter(|n| self.nodes[*n].kind == VariableKind::Control)
            .cloned()
            .collect()
    }

    /// Data-visible variables in declaration order.
    pub fn visible_names(&self) -> Vec<String> {
        self.order
            .iter()
            .filter(|n| self.nodes[*n].kind.is_data_visible())
            .cloned()
            .collect()
    }

    pub fn parents_of(&self, name: &str) -> BTreeSet<String> {
        self.parents.get(name).cloned().unwrap_or_default()
    }

    pub fn children_of(&self, name: &str) -> BTreeSet<String> {
        self.children.get(name).cloned().unwrap_or_default()
    }

    /// Strict descendants of `name` (the node itself is excluded).
    pub fn descendants(&self, name: &str) -> BTreeSet<String> {
        let mut out = BTreeSet::new();
        let mut stack: Vec<String> = self.children_of(name).into_iter().collect();
        while let Some(node) = stack.pop() {
            if out.insert(node.clone()) {
                stack.extend(self.children_of(&node));
            }
        }
        out
    }

    /// `names` plus all their ancestors.
    fn ancestral_closure(&self, names: &BTreeSet<String>) -> BTreeSet<String> {
        let mut out = names.clone();
        let mut stack: Vec<String> = names.iter().cloned().collect();
        while let Some(node) = stack.pop() {
            for parent in self.parents_of(&node) {
                if out.insert(parent.clone()) {
                    stack.push(parent);
                }
            }
        }
        out
    }

    fn check_query_sets(
        &self,
        sets: &[&BTreeSet<String>],
    ) -> Result<(), GraphError> {
        for set in sets {
            for name in set.iter() {
                if !self.contains(name) {
                    return Err(GraphError::UnknownNode(name.clone()));
                }
            }
        }
        for (i, a) in sets.iter().enumerate() {
            for b in sets.iter().skip(i + 1) {
                if let Some(shared) = a.intersection(b).next() {
                    return Err(GraphError::OverlappingSets(shared.clone()));
                }
            }
        }
        Ok(())
    }

    /// Decides whether `a` and `b` are d-separated given `z`, using the
    /// reachable-set algorithm. The three sets must be pairwise disjoint.
    pub fn d_separated(
        &self,
        a: &BTreeSet<String>,
        b: &BTreeSet<String>,
        z: &BTreeSet<String>,
    ) -> Result<bool, GraphError> {
        self.check_query_sets(&[a, b, z])?;
        let z_ancestral = self.ancestral_closure(z);
        // Visit states: (node, entered-moving-up). "Up" means the trail enters
        // the node from one of its children (or is a source), "down" from a
        // parent.
        let mut visited: BTreeSet<(String, bool)> = BTreeSet::new();
        let mut queue: VecDeque<(String, bool)> =
            a.iter().map(|n| (n.clone(), true)).collect();
        while let Some((node, up)) = queue.pop_front() {
            if !visited.insert((node.clone(), up)) {
                continue;
            }
            let in_z = z.contains(&node);
            if !in_z && b.contains(&node) {
                return Ok(false);
            }
            if up && !in_z {
                for parent in self.parents_of(&node) {
                    queue.push_back((parent, true));
                }
                for child in self.children_of(&node) {
                    queue.push_back((child, false));
                }
            } else if !up {
                if !in_z {
                    for child in self.children_of(&node) {
                        queue.push_back((child, false));
                    }
                }
                if z_ancestral.contains(&node) {
                    for parent in self.parents_of(&node) {
                        queue.push_back((parent, true));
                    }
                }
            }
        }
        Ok(true)
    }

    /// Reference implementation of d-separation by exhaustive enumeration of
    /// simple undirected paths. Exponential in the worst case; intended for
    /// cross-checking [`CausalGraph::d_separated`] on small graphs, not for
    /// production queries.
    pub fn d_separated_by_path_enumeration(
        &self,
        a: &BTreeSet<String>,
        b: &BTreeSet<String>,
        z: &BTreeSet<String>,
    ) -> Result<bool, GraphError> {
        self.check_query_sets(&[a, b, z])?;
        let z_ancestral = self.ancestral_closure(z);
        for start in a {
            let mut path = vec![start.clone()];
            let mut on_path: BTreeSet<String> = BTreeSet::from([start.clone()]);
            if self.any_active_path(b, z, &z_ancestral, &mut path, &mut on_path) {
                return Ok(false);
            }
        }
        Ok(true)
    }

    fn any_active_path(
        &self,
        b: &BTreeSet<String>,
        z: &BTreeSet<String>,
        z_ancestral: &BTreeSet<String>,
        path: &mut Vec<String>,
        on_path: &mut BTreeSet<String>,
    ) -> bool {
        let last = path.last().unwrap().clone();
        let mut neighbors: BTreeSet<String> = self.parents_of(&last);
        neighbors.extend(self.children_of(&last));
        for next in neighbors {
            if on_path.contains(&next) {
                continue;
            }
            path.push(next.clone());
            on_path.insert(next.clone());
            let reached = b.contains(&next)
                && self.path_is_active(path, z, z_ancestral);
            let keep_going = !b.contains(&next);
            if reached
                || (keep_going
                    && self.any_active_path(b, z, z_ancestral, path, on_path))
            {
                path.pop();
                on_path.remove(&next);
                return true;
            }
            path.pop();
            on_path.remove(&next);
        }
        false
    }

    /// Classic per-path blocking test: an interior collider blocks unless it
    /// or one of its descendants is conditioned on; an interior non-collider
    /// blocks exactly when conditioned on.
    fn path_is_active(
        &self,
        path: &[String],
        z: &BTreeSet<String>,
        z_ancestral: &BTreeSet<String>,
    ) -> bool {
        for i in 1..path.len().saturating_sub(1) {
            let prev = &path[i - 1];
            let node = &path[i];
            let next = &path[i + 1];
            let collider = self.parents_of(node).contains(prev)
                && self.parents_of(node).contains(next);
            if collider {
                if !z_ancestral.contains(node) {
                    return false;
                }
            } else if z.contains(node) {
                return false;
            }
        }
        true
    }

    /// All conditional independencies (a, b, z) implied by the graph among
    /// data-visible variables, with `|z| <= max_conditioning`, in
    /// deterministic lexicographic order of `(a, b, z)`.
    pub fn implied_independencies(&self, max_conditioning: usize) -> Vec<Independence> {
        let visible: Vec<String> = {
            let mut v = self.visible_names();
            v.sort();
            v
        };
        let mut out = Vec::new();
        for (i, a) in visible.iter().enumerate() {
            for b in visible.iter().skip(i + 1) {
                let others: Vec<String> = visible
                    .iter()
                    .filter(|n| *n != a && *n != b)
                    .cloned()
                    .collect();
                for z in subsets_up_to(&others, max_conditioning) {
                    let a_set = BTreeSet::from([a.clone()]);
                    let b_set = BTreeSet::from([b.clone()]);
                    let z_set: BTreeSet<String> = z.iter().cloned().collect();
                    if self
                        .d_separated(&a_set, &b_set, &z_set)
                        .expect("sets are valid by construction")
                    {
                        out.push(Independence {
                            a: a.clone(),
                            b: b.clone(),
                            given: z_set,
                        });
                    }
                }
            }
        }
        out.sort();
        out
    }

    /// Copy of the graph with every edge leaving a node in `nodes` removed.
    /// Used by the backdoor criterion, which inspects only paths entering the
    /// treatment variables.
    pub fn without_outgoing_edges(&self, nodes: &BTreeSet<String>) -> CausalGraph {
        let mut pruned = self.clone();
        for node in nodes {
            let kids = pruned.children.remove(node).unwrap_or_default();
            for child in kids {
                if let Some(ps) = pruned.parents.get_mut(&child) {
                    ps.remove(node);
                }
            }
        }
        pruned
    }

    /// Smallest adjustment set of data-visible variables satisfying the
    /// backdoor criterion for `treatments -> outcome`, or `None` when no such
    /// set exists (the effect is not identifiable through this criterion).
    ///
    /// Ties among equal-cardinality sets break lexicographically. Hidden
    /// variables are never eligible, and neither are descendants of any
    /// treatment.
    pub fn backdoor_set(
        &self,
        treatments: &[String],
        outcome: &str,
    ) -> Result<Option<BTreeSet<String>>, GraphError> {
        for t in treatments {
            if !self.contains(t) {
                return Err(GraphError::UnknownNode(t.clone()));
            }
        }
        if !self.contains(outcome) {
            return Err(GraphError::UnknownNode(outcome.to_string()));
        }
        let treatment_set: BTreeSet<String> = treatments.iter().cloned().collect();
        if treatment_set.contains(outcome) {
            return Err(GraphError::OverlappingSets(outcome.to_string()));
        }
        let mut forbidden: BTreeSet<String> = treatment_set.clone();
        forbidden.insert(outcome.to_string());
        for t in &treatment_set {
            forbidden.extend(self.descendants(t));
        }
        let candidates: Vec<String> = {
            let mut v: Vec<String> = self
                .nodes
                .iter()
                .filter(|(name, info)| {
                    info.kind.is_data_visible() && !forbidden.contains(*name)
                })
                .map(|(name, _)| name.clone())
                .collect();
            v.sort();
            v
        };
        let pruned = self.without_outgoing_edges(&treatment_set);
        let outcome_set = BTreeSet::from([outcome.to_string()]);
        for z in subsets_up_to(&candidates, candidates.len()) {
            let z_set: BTreeSet<String> = z.iter().cloned().collect();
            if pruned.d_separated(&treatment_set, &outcome_set, &z_set)? {
                return Ok(Some(z_set));
            }
        }
        Ok(None)
    }

    /// Whether the effect of intervening on `treatments` can be estimated
    /// from observational data for every listed outcome metric, via the
    /// backdoor criterion. Intervening on a non-control variable is an error.
    pub fn is_identifiable(
        &self,
        treatments: &[String],
        outcomes: &[String],
    ) -> Result<bool, GraphError> {
        for t in treatments {
            match self.kind(t) {
                None => return Err(GraphError::UnknownNode(t.clone())),
                Some(VariableKind::Control) => {}
                Some(_) => return Err(GraphError::NotAControl(t.clone())),
            }
        }
        for outcome in outcomes {
            if self.backdoor_set(treatments, outcome)?.is_none() {
                return Ok(false);
            }
        }
        Ok(true)
    }

    /// Union of the per-outcome backdoor sets, or `None` if any outcome has
    /// no admissible set. Multi-metric specifications adjust for the union.
    pub fn adjustment_union(
        &self,
        treatments: &[String],
        outcomes: &[String],
    ) -> Result<Option<BTreeSet<String>>, GraphError> {
        let mut union = BTreeSet::new();
        for outcome in outcomes {
            match self.backdoor_set(treatments, outcome)? {
                Some(z) => union.extend(z),
                None => return Ok(None),
            }
        }
        Ok(Some(union))
    }
}

/// One conditional-independence statement implied by the graph.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Independence {
    pub a: String,
    pub b: String,
    pub given: BTreeSet<String>,
}

/// Enumerates subsets of `items` with size at most `max_size`, ordered by
/// cardinality first and lexicographically within each cardinality.
fn subsets_up_to(items: &[String], max_size: usize) -> Vec<Vec<String>> {
    let mut out = vec![Vec::new()];
    let mut current: Vec<Vec<usize>> = vec![Vec::new()];
    for _size in 1..=max_size.min(items.len()) {
        let mut next: Vec<Vec<usize>> = Vec::new();
        for subset in &current {
            let start = subset.last().map_or(0, |&i| i + 1);
            for i in start..items.len() {
                let mut grown = subset.clone();
                grown.push(i);
                next.push(grown);
            }
        }
        for subset in &next {
            out.push(subset.iter().map(|&i| items[i].clone()).collect());
        }
        current = next;
    }
    out
}

/// Requested intervention: ordered control assignments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterventionTarget {
    pub assignments: Vec<(String, f64)>,
}

impl InterventionTarget {
    pub fn new(assignments: Vec<(String, f64)>) -> Self {
        InterventionTarget { assignments }
    }

    pub fn control_names(&self) -> Vec<String> {
        self.assignments.iter().map(|(n, _)| n.clone()).collect()
    }

    /// Checks that every assignment names a control node and lies inside its
    /// declared domain.
    pub fn validate(&self, graph: &CausalGraph) -> Result<(), GraphError> {
        for (name, value) in &self.assignments {
            match graph.kind(name) {
                None => return Err(GraphError::UnknownNode(name.clone())),
                Some(VariableKind::Control) => {}
                Some(_) => return Err(GraphError::NotAControl(name.clone())),
            }
            let [lo, hi] = graph
                .domain(name)
                .ok_or_else(|| GraphError::MissingDomain { name: name.clone() })?;
            if !(*value >= lo && *value <= hi) {
                return Err(GraphError::OutOfDomain {
                    name: name.clone(),
                    value: *value,
                    lo,
                    hi,
                });
            }
        }
        Ok(())
    }
}


#[cfg(test)]
mod tests {
    use super::test_graphs::*;
    use super::*;
    use proptest::prelude::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn set(names: &[&str]) -> BTreeSet<String> {
        names.iter().map(|s| s.to_string()).collect()
    }

    fn chain_abc() -> CausalGraph {
        CausalGraph::from_spec(&GraphSpec {
            nodes: ["A", "B", "C"]
                .iter()
                .map(|n| NodeSpec {
                    name: n.to_string(),
                    kind: VariableKind::Observable,
                    domain: None,
                })
                .collect(),
            edges: vec![["A".into(), "B".into()], ["B".into(), "C".into()]],
        })
        .unwrap()
    }

    #[test]
    fn rejects_duplicate_nodes() {
        let err = CausalGraph::from_spec(&GraphSpec {
            nodes: vec![
                NodeSpec {
                    name: "A".into(),
                    kind: VariableKind::Observable,
                    domain: None,
                },
                NodeSpec {
                    name: "A".into(),
                    kind: VariableKind::Target,
                    domain: None,
                },
            ],
            edges: vec![],
        })
        .unwrap_err();
        assert_eq!(err, GraphError::DuplicateNode("A".into()));
    }

    #[test]
    fn rejects_unknown_edge_endpoint() {
        let err = CausalGraph::from_spec(&GraphSpec {
            nodes: vec![NodeSpec {
                name: "A".into(),
                kind: VariableKind::Observable,
                domain: None,
            }],
            edges: vec![["A".into(), "B".into()]],
        })
        .unwrap_err();
        assert!(matches!(err, GraphError::UnknownEndpoint { .. }));
    }

    #[test]
    fn rejects_cycles() {
        let err = CausalGraph::from_spec(&GraphSpec {
            nodes: ["A", "B"]
                .iter()
                .map(|n| NodeSpec {
                    name: n.to_string(),
                    kind: VariableKind::Observable,
                    domain: None,
                })
                .collect(),
            edges: vec![["A".into(), "B".into()], ["B".into(), "A".into()]],
        })
        .unwrap_err();
        assert!(matches!(err, GraphError::CycleDetected(_)));
    }

    #[test]
    fn collider_blocks_marginally_and_opens_when_conditioned() {
        let g = edge_server();
        assert!(g.d_separated(&set(&["C"]), &set(&["W"]), &set(&[])).unwrap());
        assert!(!g.d_separated(&set(&["C"]), &set(&["W"]), &set(&["Y"])).unwrap());
    }

    #[test]
    fn chain_is_blocked_by_its_middle_node() {
        let g = chain_abc();
        assert!(!g.d_separated(&set(&["A"]), &set(&["C"]), &set(&[])).unwrap());
        assert!(g.d_separated(&set(&["A"]), &set(&["C"]), &set(&["B"])).unwrap());
    }

    #[test]
    fn query_sets_must_be_known_and_disjoint() {
        let g = chain_abc();
        let err = g
            .d_separated(&set(&["A"]), &set(&["Q"]), &set(&[]))
            .unwrap_err();
        assert_eq!(err, GraphError::UnknownNode("Q".into()));
        let err = g
            .d_separated(&set(&["A"]), &set(&["A", "C"]), &set(&[]))
            .unwrap_err();
        assert_eq!(err, GraphError::OverlappingSets("A".into()));
    }

    #[test]
    fn marginal_independencies_of_the_edge_server_graph() {
        let g = edge_server();
        let implied = g.implied_independencies(0);
        let pairs: Vec<(String, String)> = implied
            .iter()
            .map(|ind| (ind.a.clone(), ind.b.clone()))
            .collect();
        assert!(pairs.contains(&("C".into(), "W".into())));
        assert!(pairs.contains(&("C".into(), "M".into())));
        assert!(pairs.contains(&("M".into(), "W".into())));
        for ind in &implied {
            assert!(ind.given.is_empty());
            assert_ne!(ind.b, "Y", "Y depends on every other variable");
        }
    }

    #[test]
    fn implied_independencies_are_sorted_and_deterministic() {
        let g = edge_server();
        let a = g.implied_independencies(1);
        let b = g.implied_independencies(1);
        assert_eq!(a, b);
        let mut sorted = a.clone();
        sorted.sort();
        assert_eq!(a, sorted);
    }

    #[test]
    fn joint_controls_on_the_edge_server_need_no_adjustment() {
        let g = edge_server();
        let z = g
            .backdoor_set(&["C".to_string(), "M".to_string()], "Y")
            .unwrap();
        assert_eq!(z, Some(BTreeSet::new()));
    }

    #[test]
    fn previous_allocation_is_the_minimal_backdoor_set() {
        let g = two_step_allocation();
        let z = g.backdoor_set(&["C".to_string()], "P").unwrap();
        assert_eq!(z, Some(set(&["C_prev"])));
    }

    #[test]
    fn hidden_confounding_has_no_admissible_set() {
        let g = hidden_confounder();
        assert_eq!(g.backdoor_set(&["C".to_string()], "Y").unwrap(), None);
        assert_eq!(
            g.is_identifiable(&["C".to_string()], &["Y".to_string()])
                .unwrap(),
            false
        );
    }

    #[test]
    fn intervening_on_non_controls_is_refused() {
        let g = edge_server();
        let err = g
            .is_identifiable(&["W".to_string()], &["Y".to_string()])
            .unwrap_err();
        assert_eq!(err, GraphError::NotAControl("W".into()));
        let err = g
            .is_identifiable(&["Q".to_string()], &["Y".to_string()])
            .unwrap_err();
        assert_eq!(err, GraphError::UnknownNode("Q".into()));
    }

    #[test]
    fn intervention_targets_validate_domains() {
        let g = edge_server();
        InterventionTarget::new(vec![("C".into(), 0.5), ("M".into(), 1.0)])
            .validate(&g)
            .unwrap();
        let err = InterventionTarget::new(vec![("C".into(), 1.5)])
            .validate(&g)
            .unwrap_err();
        assert!(matches!(err, GraphError::OutOfDomain { .. }));
        let err = InterventionTarget::new(vec![("Y".into(), 0.5)])
            .validate(&g)
            .unwrap_err();
        assert_eq!(err, GraphError::NotAControl("Y".into()));
    }

    /// Independent check of a backdoor set: no descendants of any treatment,
    /// and d-separation (by path enumeration) in the graph with treatment
    /// outgoing edges removed.
    fn verify_backdoor(
        g: &CausalGraph,
        treatments: &BTreeSet<String>,
        outcome: &str,
        z: &BTreeSet<String>,
    ) -> bool {
        for t in treatments {
            if g.descendants(t).intersection(z).next().is_some() {
                return false;
            }
        }
        let pruned = g.without_outgoing_edges(treatments);
        pruned
            .d_separated_by_path_enumeration(
                treatments,
                &BTreeSet::from([outcome.to_string()]),
                z,
            )
            .unwrap()
    }

    #[test]
    fn backdoor_outputs_pass_the_independent_verifier() {
        for g in [edge_server(), two_step_allocation()] {
            for control in g.control_names() {
                for outcome in g.node_names() {
                    if g.kind(outcome) != Some(VariableKind::Target) {
                        continue;
                    }
                    if let Some(z) = g.backdoor_set(&[control.clone()], outcome).unwrap() {
                        assert!(verify_backdoor(
                            &g,
                            &BTreeSet::from([control.clone()]),
                            outcome,
                            &z
                        ));
                    }
                }
            }
        }
    }

    pub(crate) fn random_dag(rng: &mut StdRng, max_nodes: usize) -> CausalGraph {
        let n = rng.random_range(3..=max_nodes);
        let names: Vec<String> = (0..n).map(|i| format!("N{i}")).collect();
        let mut edges = Vec::new();
        for i in 0..n {
            for j in (i + 1)..n {
                if rng.random_bool(0.35) {
                    edges.push([names[i].clone(), names[j].clone()]);
                }
            }
        }
        CausalGraph::from_spec(&GraphSpec {
            nodes: names
                .iter()
                .map(|name| NodeSpec {
                    name: name.clone(),
                    kind: VariableKind::Observable,
                    domain: None,
                })
                .collect(),
            edges,
        })
        .unwrap()
    }

    pub(crate) fn random_disjoint_sets(
        rng: &mut StdRng,
        g: &CausalGraph,
        max_z: usize,
    ) -> (BTreeSet<String>, BTreeSet<String>, BTreeSet<String>) {
        let mut names: Vec<String> = g.node_names().to_vec();
        for i in (1..names.len()).rev() {
            names.swap(i, rng.random_range(0..=i));
        }
        let a = BTreeSet::from([names[0].clone()]);
        let b = BTreeSet::from([names[1].clone()]);
        let z_len = rng.random_range(0..=max_z.min(names.len() - 2));
        let z = names[2..2 + z_len].iter().cloned().collect();
        (a, b, z)
    }

    #[test]
    fn reachability_agrees_with_path_enumeration_on_random_dags() {
        let mut rng = StdRng::seed_from_u64(7);
        for _ in 0..100 {
            let g = random_dag(&mut rng, 8);
            let (a, b, z) = random_disjoint_sets(&mut rng, &g, 3);
            let fast = g.d_separated(&a, &b, &z).unwrap();
            let slow = g.d_separated_by_path_enumeration(&a, &b, &z).unwrap();
            assert_eq!(fast, slow, "graph {:?} a={a:?} b={b:?} z={z:?}", g.to_spec());
        }
    }

    #[test]
    fn removing_an_edge_never_breaks_a_d_separation() {
        let mut rng = StdRng::seed_from_u64(11);
        for _ in 0..60 {
            let g = random_dag(&mut rng, 7);
            let (a, b, z) = random_disjoint_sets(&mut rng, &g, 2);
            if !g.d_separated(&a, &b, &z).unwrap() {
                continue;
            }
            let spec = g.to_spec();
            for skip in 0..spec.edges.len() {
                let mut thinner = spec.clone();
                thinner.edges.remove(skip);
                let thin = CausalGraph::from_spec(&thinner).unwrap();
                assert!(
                    thin.d_separated(&a, &b, &z).unwrap(),
                    "removing edge {skip} broke separation"
                );
            }
        }
    }

    proptest! {
        #[test]
        fn d_separation_is_symmetric(seed in 0u64..500) {
            let mut rng = StdRng::seed_from_u64(seed);
            let g = random_dag(&mut rng, 8);
            let (a, b, z) = random_disjoint_sets(&mut rng, &g, 3);
            prop_assert_eq!(
                g.d_separated(&a, &b, &z).unwrap(),
                g.d_separated(&b, &a, &z).unwrap()
            );
        }
    }
}
