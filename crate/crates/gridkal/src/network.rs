//! Pipeline network data model: graph ingestion, validation, incidence queries.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet, VecDeque};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NodeKind {
    Interior,
    Boundary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Node {
    pub id: String,
    pub kind: NodeKind,
}

/// A pipe with its model coefficients. `d_lin` stays absent until
/// `linearize_friction` fills it from a stationary solution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipeEdge {
    pub id: String,
    pub from: String,
    pub to: String,
    pub length: f64,
    pub a: f64,
    pub b: f64,
    pub d: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub d_lin: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipeNetwork {
    pub nodes: Vec<Node>,
    pub edges: Vec<PipeEdge>,
}

/// One validation finding: the entity it concerns and the violated rule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostic {
    pub entity: String,
    pub rule: String,
    pub message: String,
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}] {}: {}", self.rule, self.entity, self.message)
    }
}

/// Per-node ingoing (delta+) and outgoing (delta-) edge sets.
#[derive(Debug, Clone, PartialEq)]
pub struct IncidenceMaps {
    pub ingoing: BTreeMap<String, BTreeSet<String>>,
    pub outgoing: BTreeMap<String, BTreeSet<String>>,
}

impl PipeNetwork {
    /// Parse the JSON schema without enforcing graph invariants.
    pub fn from_json(text: &str) -> Result<PipeNetwork> {
        let net: PipeNetwork = serde_json::from_str(text).map_err(|e| {
            Error::Parse(format!("line {}, column {}: {}", e.line(), e.column(), e))
        })?;
        // Edge endpoint references are a schema matter: the file is
        // self-contained and must not dangle.
        let ids: HashSet<&str> = net.nodes.iter().map(|n| n.id.as_str()).collect();
        for e in &net.edges {
            for end in [&e.from, &e.to] {
                if !ids.contains(end.as_str()) {
                    return Err(Error::Schema(format!(
                        "edge '{}' references unknown node '{}'",
                        e.id, end
                    )));
                }
            }
        }
        Ok(net)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("network serialization cannot fail")
    }

    pub fn node(&self, id: &str) -> Option<&Node> {
        self.nodes.iter().find(|n| n.id == id)
    }

    pub fn edge(&self, id: &str) -> Option<&PipeEdge> {
        self.edges.iter().find(|e| e.id == id)
    }

    /// Boundary node ids in file order.
    pub fn boundary_nodes(&self) -> Vec<&str> {
        self.nodes
            .iter()
            .filter(|n| n.kind == NodeKind::Boundary)
            .map(|n| n.id.as_str())
            .collect()
    }

    /// Interior node ids in file order.
    pub fn interior_nodes(&self) -> Vec<&str> {
        self.nodes
            .iter()
            .filter(|n| n.kind == NodeKind::Interior)
            .map(|n| n.id.as_str())
            .collect()
    }
}

/// Parse a network file, enforcing both schema and graph invariants.
pub fn parse_network(text: &str) -> Result<PipeNetwork> {
    let net = PipeNetwork::from_json(text)?;
    let diags = validate_network(&net);
    if let Some(d) = diags.first() {
        return Err(Error::InvalidNetwork(format!(
            "{} ({} violation(s) total)",
            d,
            diags.len()
        )));
    }
    Ok(net)
}

/// Check every PipeNetwork invariant; returns one diagnostic per violation.
pub fn validate_network(net: &PipeNetwork) -> Vec<Diagnostic> {
    let mut diags = Vec::new();
    let push = |diags: &mut Vec<Diagnostic>, entity: &str, rule: &str, message: String| {
        diags.push(Diagnostic { entity: entity.to_string(), rule: rule.to_string(), message });
    };

    let mut seen_nodes = HashSet::new();
    for n in &net.nodes {
        if !seen_nodes.insert(n.id.as_str()) {
            push(&mut diags, &n.id, "unique-node-id", "duplicate node id".into());
        }
    }
    let mut seen_edges = HashSet::new();
    for e in &net.edges {
        if !seen_edges.insert(e.id.as_str()) {
            push(&mut diags, &e.id, "unique-edge-id", "duplicate edge id".into());
        }
        for end in [&e.from, &e.to] {
            if !seen_nodes.contains(end.as_str()) {
                push(
                    &mut diags,
                    &e.id,
                    "known-endpoint",
                    format!("references unknown node '{end}'"),
                );
            }
        }
        if e.from == e.to {
            push(&mut diags, &e.id, "no-self-loop", "from and to coincide".into());
        }
        if !(e.length > 0.0) {
            push(&mut diags, &e.id, "positive-length", format!("length = {}", e.length));
        }
        if !(e.a > 0.0) {
            push(&mut diags, &e.id, "positive-a", format!("a = {}", e.a));
        }
        if !(e.b > 0.0) {
            push(&mut diags, &e.id, "positive-b", format!("b = {}", e.b));
        }
        if !(e.d >= 0.0) {
            push(&mut diags, &e.id, "nonnegative-d", format!("d = {}", e.d));
        }
        if let Some(dl) = e.d_lin {
            if !(dl >= 0.0) {
                push(&mut diags, &e.id, "nonnegative-d-lin", format!("d_lin = {dl}"));
            }
        }
    }

    if net.boundary_nodes().is_empty() {
        push(&mut diags, "network", "boundary-exists", "no boundary node".into());
    }

    // Connectivity of the underlying undirected graph over all listed nodes.
    if !net.nodes.is_empty() {
        let mut adj: HashMap<&str, Vec<&str>> = HashMap::new();
        for n in &net.nodes {
            adj.entry(n.id.as_str()).or_default();
        }
        for e in &net.edges {
            if seen_nodes.contains(e.from.as_str()) && seen_nodes.contains(e.to.as_str()) {
                adj.entry(e.from.as_str()).or_default().push(&e.to);
                adj.entry(e.to.as_str()).or_default().push(&e.from);
            }
        }
        let start = net.nodes[0].id.as_str();
        let mut visited = HashSet::new();
        let mut queue = VecDeque::from([start]);
        visited.insert(start);
        while let Some(u) = queue.pop_front() {
            for &v in adj.get(u).into_iter().flatten() {
                if visited.insert(v) {
                    queue.push_back(v);
                }
            }
        }
        if visited.len() != seen_nodes.len() {
            let missing: Vec<&str> = net
                .nodes
                .iter()
                .map(|n| n.id.as_str())
                .filter(|id| !visited.contains(id))
                .collect();
            push(
                &mut diags,
                "network",
                "connected",
                format!("nodes unreachable from '{start}': {}", missing.join(", ")),
            );
        }
    }

    diags
}

/// Build the ingoing/outgoing incidence maps (delta_v^+ / delta_v^-).
pub fn incidence_maps(net: &PipeNetwork) -> IncidenceMaps {
    let mut ingoing: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
    let mut outgoing: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
    for n in &net.nodes {
        ingoing.entry(n.id.clone()).or_default();
        outgoing.entry(n.id.clone()).or_default();
    }
    for e in &net.edges {
        ingoing.entry(e.to.clone()).or_default().insert(e.id.clone());
        outgoing.entry(e.from.clone()).or_default().insert(e.id.clone());
    }
    IncidenceMaps { ingoing, outgoing }
}

/// Per-edge parameters for the builtin diamond topology.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EdgeParams {
    pub length: f64,
    pub a: f64,
    pub b: f64,
    pub d: f64,
}

/// Representative parameter table (nondimensional units): l = b = 1,
/// a = 0.05, d = 5000 per pipe. These are not published benchmark values;
/// they are chosen to place the network in the strongly friction-dominated
/// regime typical of long-distance transport, where the linearized model is
/// diffusion-like and low-rank reduction is effective.
pub fn default_diamond_params() -> BTreeMap<String, EdgeParams> {
    (1..=7)
        .map(|i| (format!("e{i}"), EdgeParams { length: 1.0, a: 0.05, b: 1.0, d: 5000.0 }))
        .collect()
}

/// The 7-edge / 6-node diamond topology with v1, v2 as boundary nodes.
pub fn builtin_diamond(params: &BTreeMap<String, EdgeParams>) -> Result<PipeNetwork> {
    let topo: [(&str, &str, &str); 7] = [
        ("e1", "v1", "v4"),
        ("e2", "v4", "v3"),
        ("e3", "v4", "v5"),
        ("e4", "v3", "v5"),
        ("e5", "v3", "v6"),
        ("e6", "v5", "v6"),
        ("e7", "v6", "v2"),
    ];
    let mut edges = Vec::with_capacity(7);
    for (id, from, to) in topo {
        let p = params
            .get(id)
            .ok_or_else(|| Error::Missing(format!("missing parameter row for edge '{id}'")))?;
        edges.push(PipeEdge {
            id: id.to_string(),
            from: from.to_string(),
            to: to.to_string(),
            length: p.length,
            a: p.a,
            b: p.b,
            d: p.d,
            d_lin: None,
        });
    }
    let nodes = [
        ("v1", NodeKind::Boundary),
        ("v2", NodeKind::Boundary),
        ("v3", NodeKind::Interior),
        ("v4", NodeKind::Interior),
        ("v5", NodeKind::Interior),
        ("v6", NodeKind::Interior),
    ]
    .into_iter()
    .map(|(id, kind)| Node { id: id.to_string(), kind })
    .collect();
    Ok(PipeNetwork { nodes, edges })
}

/// Diamond network with the representative default parameters.
pub fn diamond_network() -> PipeNetwork {
    builtin_diamond(&default_diamond_params()).expect("default table covers e1..e7")
}

/// Minimal network: a single pipe between two boundary nodes.
pub fn single_pipe(length: f64, a: f64, b: f64, d: f64) -> PipeNetwork {
    PipeNetwork {
        nodes: vec![
            Node { id: "v1".into(), kind: NodeKind::Boundary },
            Node { id: "v2".into(), kind: NodeKind::Boundary },
        ],
        edges: vec![PipeEdge {
            id: "e1".into(),
            from: "v1".into(),
            to: "v2".into(),
            length,
            a,
            b,
            d,
            d_lin: None,
        }],
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_diamond_counts() {
        let text = diamond_network().to_json();
        let net = parse_network(&text).unwrap();
        assert_eq!(net.edges.len(), 7);
        assert_eq!(net.nodes.len(), 6);
        assert_eq!(net.boundary_nodes(), vec!["v1", "v2"]);
        assert_eq!(net.interior_nodes().len(), 4);
    }

    #[test]
    fn parse_single_pipe_no_interior() {
        let net = parse_network(&single_pipe(1.0, 1.0, 1.0, 1.5).to_json()).unwrap();
        assert!(net.interior_nodes().is_empty());
    }

    #[test]
    fn parse_unknown_node_reference() {
        let text = r#"{"nodes":[{"id":"v1","kind":"boundary"},{"id":"v2","kind":"boundary"}],
            "edges":[{"id":"e1","from":"v1","to":"vX","length":1.0,"a":1.0,"b":1.0,"d":0.5}]}"#;
        let err = parse_network(text).unwrap_err();
        assert!(err.to_string().contains("vX"), "{err}");
    }

    #[test]
    fn parse_rejects_unknown_keys() {
        let text = r#"{"nodes":[{"id":"v1","kind":"boundary","extra":1}],"edges":[]}"#;
        assert!(parse_network(text).is_err());
    }

    #[test]
    fn validate_diamond_clean() {
        assert!(validate_network(&diamond_network()).is_empty());
    }

    #[test]
    fn validate_zero_length() {
        let net = single_pipe(0.0, 1.0, 1.0, 1.0);
        let diags = validate_network(&net);
        assert_eq!(diags.len(), 1);
        assert_eq!(diags[0].rule, "positive-length");
        assert_eq!(diags[0].entity, "e1");
    }

    #[test]
    fn validate_disconnected_components() {
        let mut net = single_pipe(1.0, 1.0, 1.0, 1.0);
        let mut other = single_pipe(1.0, 1.0, 1.0, 1.0);
        for n in &mut other.nodes {
            n.id = format!("w{}", n.id);
        }
        other.edges[0].id = "e2".into();
        other.edges[0].from = "wv1".into();
        other.edges[0].to = "wv2".into();
        net.nodes.extend(other.nodes);
        net.edges.extend(other.edges);
        let diags = validate_network(&net);
        assert_eq!(diags.len(), 1);
        assert_eq!(diags[0].rule, "connected");
    }

    #[test]
    fn incidence_diamond_v3() {
        let net = diamond_network();
        let maps = incidence_maps(&net);
        assert_eq!(
            maps.ingoing["v3"].iter().collect::<Vec<_>>(),
            vec!["e2"]
        );
        assert_eq!(
            maps.outgoing["v3"].iter().collect::<Vec<_>>(),
            vec!["e4", "e5"]
        );
        let total_in: usize = maps.ingoing.values().map(|s| s.len()).sum();
        let total_out: usize = maps.outgoing.values().map(|s| s.len()).sum();
        assert_eq!(total_in, 7);
        assert_eq!(total_out, 7);
    }

    #[test]
    fn incidence_single_pipe() {
        let net = single_pipe(1.0, 1.0, 1.0, 1.0);
        let maps = incidence_maps(&net);
        assert_eq!(maps.ingoing["v2"].len(), 1);
        assert_eq!(maps.outgoing["v1"].len(), 1);
        assert!(maps.ingoing["v1"].is_empty());
        assert!(maps.outgoing["v2"].is_empty());
    }

    #[test]
    fn builtin_diamond_missing_row() {
        let mut params = default_diamond_params();
        params.remove("e7");
        let err = builtin_diamond(&params).unwrap_err();
        assert!(err.to_string().contains("e7"));
    }

    #[test]
    fn builtin_diamond_all_unit_params_valid() {
        let params: BTreeMap<String, EdgeParams> = (1..=7)
            .map(|i| (format!("e{i}"), EdgeParams { length: 1.0, a: 1.0, b: 1.0, d: 1.0 }))
            .collect();
        let net = builtin_diamond(&params).unwrap();
        assert!(validate_network(&net).is_empty());
    }

    #[test]
    fn serialize_parse_roundtrip() {
        let net = diamond_network();
        let back = parse_network(&net.to_json()).unwrap();
        assert_eq!(net, back);
    }
}
