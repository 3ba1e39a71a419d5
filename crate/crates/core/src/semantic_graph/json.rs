//! Graph JSON document:
//! `{"tokens":[..],"nodes":[{"id","level","span":[s,e],"role"}],"edges":[{"child","parent","role"}]}`.

use serde::{Deserialize, Serialize};

use super::{invalid, Edge, GraphError, Level, Node, RoleLabel, SemanticRoleGraph};

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawNode {
    id: usize,
    level: Level,
    span: [usize; 2],
    role: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawEdge {
    child: usize,
    parent: usize,
    role: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawGraph {
    tokens: Vec<String>,
    nodes: Vec<RawNode>,
    edges: Vec<RawEdge>,
}

/// A parsed graph plus warnings about roles mapped to `OTHERS`.
#[derive(Clone, Debug, PartialEq)]
pub struct ParsedGraph {
    pub graph: SemanticRoleGraph,
    pub warnings: Vec<String>,
}

fn to_raw(g: &SemanticRoleGraph) -> RawGraph {
    RawGraph {
        tokens: g.tokens.clone(),
        nodes: g
            .nodes
            .iter()
            .map(|n| RawNode {
                id: n.id,
                level: n.level,
                span: [n.span.0, n.span.1],
                role: n.role.as_str().into(),
            })
            .collect(),
        edges: g
            .edges
            .iter()
            .map(|e| RawEdge {
                child: e.child,
                parent: e.parent,
                role: e.role.as_str().into(),
            })
            .collect(),
    }
}

/// Compact single-line JSON.
pub fn serialize_graph(g: &SemanticRoleGraph) -> String {
    serde_json::to_string(&to_raw(g)).expect("graph serialization cannot fail")
}

pub fn graph_to_value(g: &SemanticRoleGraph) -> serde_json::Value {
    serde_json::to_value(to_raw(g)).expect("graph serialization cannot fail")
}

pub fn parse_graph(json: &str) -> Result<ParsedGraph, GraphError> {
    let de = &mut serde_json::Deserializer::from_str(json);
    let raw: RawGraph = serde_path_to_error::deserialize(de).map_err(path_error)?;
    from_raw(raw)
}

pub fn parse_graph_value(value: serde_json::Value) -> Result<ParsedGraph, GraphError> {
    let raw: RawGraph = serde_path_to_error::deserialize(value).map_err(path_error)?;
    from_raw(raw)
}

fn path_error(e: serde_path_to_error::Error<serde_json::Error>) -> GraphError {
    let path = e.path().to_string();
    invalid(
        if path == "." { "$".to_string() } else { path },
        e.into_inner().to_string(),
    )
}

fn from_raw(raw: RawGraph) -> Result<ParsedGraph, GraphError> {
    let mut warnings = Vec::new();
    let mut role = |s: &str, path: String| {
        let (r, known) = RoleLabel::parse_lossy(s);
        if !known {
            warnings.push(format!("{path}: unknown role `{s}` mapped to OTHERS"));
        }
        r
    };
    let nodes = raw
        .nodes
        .iter()
        .enumerate()
        .map(|(i, n)| Node {
            id: n.id,
            level: n.level,
            span: (n.span[0], n.span[1]),
            role: role(&n.role, format!("nodes[{i}].role")),
        })
        .collect();
    let edges = raw
        .edges
        .iter()
        .enumerate()
        .map(|(j, e)| Edge {
            child: e.child,
            parent: e.parent,
            role: role(&e.role, format!("edges[{j}].role")),
        })
        .collect();
    let graph = SemanticRoleGraph {
        tokens: raw.tokens,
        nodes,
        edges,
    };
    graph.validate()?;
    Ok(ParsedGraph { graph, warnings })
}

#[cfg(test)]
mod tests {
    use super::super::{build_graph, tokenize, SrlFrame};
    use super::*;

    fn sample() -> SemanticRoleGraph {
        build_graph(
            tokenize("a woman is cutting an onion"),
            &[SrlFrame::new(3, vec![((0, 2), "ARG0"), ((4, 6), "ARG1")])],
        )
        .unwrap()
    }

    #[test]
    fn round_trip() {
        let g = sample();
        let s = serialize_graph(&g);
        let back = parse_graph(&s).unwrap();
        assert!(back.warnings.is_empty());
        assert_eq!(back.graph, g);
        assert_eq!(serialize_graph(&back.graph), s);
    }

    #[test]
    fn missing_event_node_is_schema_error() {
        let doc = r#"{"tokens":["a","b"],"nodes":[{"id":0,"level":"action","span":[0,2],"role":"Action"}],"edges":[]}"#;
        let err = parse_graph(doc).unwrap_err();
        assert!(err.to_string().contains("missing event node"), "{err}");
    }

    #[test]
    fn type_error_reports_path() {
        let doc = r#"{"tokens":["a"],"nodes":[{"id":0,"level":"event","span":[0,"x"],"role":"Event"}],"edges":[]}"#;
        let err = parse_graph(doc).unwrap_err().to_string();
        assert!(err.starts_with("nodes[0].span[1]"), "{err}");
    }

    #[test]
    fn unknown_role_warns() {
        let s = serialize_graph(&sample()).replace("ARG1", "ARGM-PRP");
        let p = parse_graph(&s).unwrap();
        assert_eq!(p.graph.nodes[3].role, RoleLabel::Others);
        assert_eq!(p.warnings.len(), 2);
    }
}
