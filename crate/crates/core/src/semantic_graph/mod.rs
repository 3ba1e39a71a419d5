//! Three-level semantic-role graphs over caption tokens.
//!
//! A graph has one event node spanning the whole caption, one action node per
//! verb and one entity node per (argument, verb) pair. Action nodes hang off
//! the event node; entity nodes hang off the action they are an argument of.

mod json;
mod parse;
mod roles;

pub use json::{graph_to_value, parse_graph, parse_graph_value, serialize_graph, ParsedGraph};
pub use parse::{parse_caption, rule_parse, ParseError, ParsedCaption};
pub use roles::{RoleLabel, NUM_ROLES};

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    Event,
    Action,
    Entity,
}

/// Half-open token range `[start, end)`.
pub type Span = (usize, usize);

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Node {
    pub id: usize,
    pub level: Level,
    pub span: Span,
    pub role: RoleLabel,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Edge {
    pub child: usize,
    pub parent: usize,
    pub role: RoleLabel,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SemanticRoleGraph {
    pub tokens: Vec<String>,
    pub nodes: Vec<Node>,
    pub edges: Vec<Edge>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SrlArg {
    pub span: Span,
    pub role: String,
}

/// One predicate with its arguments, as produced by a role labeller.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SrlFrame {
    pub verb: usize,
    pub args: Vec<SrlArg>,
}

impl SrlFrame {
    pub fn new(verb: usize, args: Vec<(Span, &str)>) -> Self {
        SrlFrame {
            verb,
            args: args
                .into_iter()
                .map(|(span, role)| SrlArg {
                    span,
                    role: role.to_string(),
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum GraphError {
    #[error("caption has no tokens")]
    EmptyTokens,
    #[error("frame {frame}: verb index {verb} out of bounds for {len} tokens")]
    VerbOutOfBounds {
        frame: usize,
        verb: usize,
        len: usize,
    },
    #[error("frame {frame}: argument span {span:?} out of bounds or empty for {len} tokens")]
    SpanOutOfBounds {
        frame: usize,
        span: Span,
        len: usize,
    },
    #[error("frame {frame}: argument spans {a:?} and {b:?} overlap")]
    OverlappingSpans { frame: usize, a: Span, b: Span },
    #[error("{path}: {msg}")]
    Invalid { path: String, msg: String },
}

fn invalid(path: impl Into<String>, msg: impl Into<String>) -> GraphError {
    GraphError::Invalid {
        path: path.into(),
        msg: msg.into(),
    }
}

/// Lowercases and splits on whitespace and punctuation, dropping the
/// punctuation itself.
pub fn tokenize(sentence: &str) -> Vec<String> {
    sentence
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Builds the graph for `tokens` from role frames.
///
/// Actions are ordered by verb position and entities by (action, span
/// start). With no frames a single action node covering every token stands
/// in for the missing verb.
pub fn build_graph(
    tokens: Vec<String>,
    frames: &[SrlFrame],
) -> Result<SemanticRoleGraph, GraphError> {
    let n = tokens.len();
    if n == 0 {
        return Err(GraphError::EmptyTokens);
    }
    for (fi, f) in frames.iter().enumerate() {
        if f.verb >= n {
            return Err(GraphError::VerbOutOfBounds {
                frame: fi,
                verb: f.verb,
                len: n,
            });
        }
        for a in &f.args {
            if a.span.0 >= a.span.1 || a.span.1 > n {
                return Err(GraphError::SpanOutOfBounds {
                    frame: fi,
                    span: a.span,
                    len: n,
                });
            }
        }
        for (i, a) in f.args.iter().enumerate() {
            for b in &f.args[i + 1..] {
                if a.span.0 < b.span.1 && b.span.0 < a.span.1 {
                    return Err(GraphError::OverlappingSpans {
                        frame: fi,
                        a: a.span,
                        b: b.span,
                    });
                }
            }
        }
    }

    let mut nodes = vec![Node {
        id: 0,
        level: Level::Event,
        span: (0, n),
        role: RoleLabel::Event,
    }];
    let mut edges = Vec::new();
    let mut order: Vec<usize> = (0..frames.len()).collect();
    order.sort_by_key(|&i| frames[i].verb);

    if order.is_empty() {
        nodes.push(Node {
            id: 1,
            level: Level::Action,
            span: (0, n),
            role: RoleLabel::Action,
        });
        edges.push(Edge {
            child: 1,
            parent: 0,
            role: RoleLabel::Action,
        });
    }
    for (k, &fi) in order.iter().enumerate() {
        let id = 1 + k;
        let v = frames[fi].verb;
        nodes.push(Node {
            id,
            level: Level::Action,
            span: (v, v + 1),
            role: RoleLabel::Action,
        });
        edges.push(Edge {
            child: id,
            parent: 0,
            role: RoleLabel::Action,
        });
    }
    for (k, &fi) in order.iter().enumerate() {
        let mut args: Vec<&SrlArg> = frames[fi].args.iter().collect();
        args.sort_by_key(|a| a.span.0);
        for a in args {
            let (role, _) = RoleLabel::parse_lossy(&a.role);
            // Frame-level roles cannot label an argument.
            let role = if role.is_argument() {
                role
            } else {
                RoleLabel::Others
            };
            let id = nodes.len();
            nodes.push(Node {
                id,
                level: Level::Entity,
                span: a.span,
                role,
            });
            edges.push(Edge {
                child: id,
                parent: 1 + k,
                role,
            });
        }
    }
    let g = SemanticRoleGraph {
        tokens,
        nodes,
        edges,
    };
    debug_assert!(g.validate().is_ok());
    Ok(g)
}

impl SemanticRoleGraph {
    /// Checks every structural invariant, reporting the first violation with
    /// the JSON path of the offending element.
    pub fn validate(&self) -> Result<(), GraphError> {
        let n_tok = self.tokens.len();
        if n_tok == 0 {
            return Err(invalid("tokens", "token list is empty"));
        }
        let n = self.nodes.len();
        let mut event = None;
        for (i, node) in self.nodes.iter().enumerate() {
            let p = format!("nodes[{i}]");
            if node.id != i {
                return Err(invalid(
                    format!("{p}.id"),
                    format!("expected id {i}, found {}", node.id),
                ));
            }
            let (s, e) = node.span;
            if s >= e || e > n_tok {
                return Err(invalid(
                    format!("{p}.span"),
                    format!("span [{s},{e}] empty or outside {n_tok} tokens"),
                ));
            }
            match node.level {
                Level::Event => {
                    if event.is_some() {
                        return Err(invalid(p, "second event node"));
                    }
                    if node.role != RoleLabel::Event {
                        return Err(invalid(
                            format!("{p}.role"),
                            "event node must have role Event",
                        ));
                    }
                    if node.span != (0, n_tok) {
                        return Err(invalid(
                            format!("{p}.span"),
                            "event node must span all tokens",
                        ));
                    }
                    event = Some(i);
                }
                Level::Action if node.role != RoleLabel::Action => {
                    return Err(invalid(
                        format!("{p}.role"),
                        "action node must have role Action",
                    ));
                }
                Level::Entity if !node.role.is_argument() => {
                    return Err(invalid(
                        format!("{p}.role"),
                        format!("entity node cannot have role {}", node.role),
                    ));
                }
                _ => {}
            }
        }
        if event.is_none() {
            return Err(invalid("nodes", "missing event node"));
        }

        let mut parent_count = vec![0usize; n];
        for (j, e) in self.edges.iter().enumerate() {
            let p = format!("edges[{j}]");
            if e.child >= n {
                return Err(invalid(
                    format!("{p}.child"),
                    format!("unknown node {}", e.child),
                ));
            }
            if e.parent >= n {
                return Err(invalid(
                    format!("{p}.parent"),
                    format!("unknown node {}", e.parent),
                ));
            }
            let (child, parent) = (&self.nodes[e.child], &self.nodes[e.parent]);
            let expected_parent = match child.level {
                Level::Event => {
                    return Err(invalid(
                        format!("{p}.child"),
                        "event node cannot be a child",
                    ))
                }
                Level::Action => Level::Event,
                Level::Entity => Level::Action,
            };
            if parent.level != expected_parent {
                return Err(invalid(
                    format!("{p}.parent"),
                    format!(
                        "{:?} node must attach to a {:?} node",
                        child.level, expected_parent
                    ),
                ));
            }
            if e.role != child.role {
                return Err(invalid(
                    format!("{p}.role"),
                    format!("edge role {} differs from node role {}", e.role, child.role),
                ));
            }
            parent_count[e.child] += 1;
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if node.level != Level::Event && parent_count[i] != 1 {
                return Err(invalid(
                    format!("nodes[{i}]"),
                    format!("node has {} parent edges, expected 1", parent_count[i]),
                ));
            }
        }
        Ok(())
    }

    pub fn event_node(&self) -> usize {
        self.nodes
            .iter()
            .position(|n| n.level == Level::Event)
            .expect("validated graph has an event node")
    }

    pub fn nodes_at(&self, level: Level) -> Vec<usize> {
        self.nodes
            .iter()
            .filter(|n| n.level == level)
            .map(|n| n.id)
            .collect()
    }

    pub fn parent_of(&self, node: usize) -> Option<usize> {
        self.edges
            .iter()
            .find(|e| e.child == node)
            .map(|e| e.parent)
    }

    pub fn span_text(&self, span: Span) -> String {
        self.tokens[span.0..span.1].join(" ")
    }

    /// The caption as a space-joined token string.
    pub fn sentence(&self) -> String {
        self.tokens.join(" ")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<String> {
        tokenize(s)
    }

    #[test]
    fn tokenizer_drops_punctuation() {
        assert_eq!(
            toks("A man, then: a DOG!"),
            vec!["a", "man", "then", "a", "dog"]
        );
    }

    #[test]
    fn three_verb_example() {
        let t = toks("break an egg and drop it into the cup then boil it");
        let frames = vec![
            SrlFrame::new(10, vec![((11, 12), "ARG1"), ((9, 10), "ARGM-TMP")]),
            SrlFrame::new(0, vec![((1, 3), "ARG1")]),
            SrlFrame::new(4, vec![((5, 6), "ARG1"), ((6, 9), "ARGM-DIR")]),
        ];
        let g = build_graph(t, &frames).unwrap();
        g.validate().unwrap();
        let actions: Vec<String> = g
            .nodes_at(Level::Action)
            .iter()
            .map(|&i| g.span_text(g.nodes[i].span))
            .collect();
        assert_eq!(actions, ["break", "drop", "boil"]);
        let egg = g
            .nodes
            .iter()
            .find(|n| g.span_text(n.span) == "an egg")
            .unwrap();
        assert_eq!(egg.role, RoleLabel::Arg1);
        assert_eq!(
            g.span_text(g.nodes[g.parent_of(egg.id).unwrap()].span),
            "break"
        );
        let cup = g
            .nodes
            .iter()
            .find(|n| g.span_text(n.span) == "into the cup")
            .unwrap();
        assert_eq!(cup.role, RoleLabel::ArgmDir);
        assert_eq!(
            g.span_text(g.nodes[g.parent_of(cup.id).unwrap()].span),
            "drop"
        );
        // Entities of the last action are ordered by span start.
        let last: Vec<RoleLabel> = g
            .nodes
            .iter()
            .filter(|n| g.parent_of(n.id) == Some(3))
            .map(|n| n.role)
            .collect();
        assert_eq!(last, [RoleLabel::ArgmTmp, RoleLabel::Arg1]);
    }

    #[test]
    fn zero_frames_fallback() {
        let g = build_graph(toks("men in towels"), &[]).unwrap();
        assert_eq!(g.nodes.len(), 2);
        assert_eq!(g.nodes[1].span, (0, 3));
        assert!(g.nodes_at(Level::Entity).is_empty());
    }

    #[test]
    fn shared_phrase_is_duplicated() {
        let t = toks("a man jumps and hits a ball");
        let frames = vec![
            SrlFrame::new(2, vec![((0, 2), "ARG0")]),
            SrlFrame::new(4, vec![((0, 2), "ARG0"), ((5, 7), "ARG1")]),
        ];
        let g = build_graph(t, &frames).unwrap();
        let man: Vec<&Node> = g
            .nodes
            .iter()
            .filter(|n| n.level == Level::Entity && n.span == (0, 2))
            .collect();
        assert_eq!(man.len(), 2);
        assert_ne!(g.parent_of(man[0].id), g.parent_of(man[1].id));
    }

    #[test]
    fn build_errors() {
        assert_eq!(build_graph(vec![], &[]), Err(GraphError::EmptyTokens));
        let err = build_graph(
            toks("a b c"),
            &[
                SrlFrame::new(0, vec![]),
                SrlFrame::new(1, vec![((2, 5), "ARG1")]),
            ],
        )
        .unwrap_err();
        assert!(matches!(err, GraphError::SpanOutOfBounds { frame: 1, .. }));
        assert!(err.to_string().contains("frame 1"));
        let err = build_graph(
            toks("a b c"),
            &[SrlFrame::new(0, vec![((1, 3), "ARG1"), ((2, 3), "ARG2")])],
        );
        assert!(matches!(err, Err(GraphError::OverlappingSpans { .. })));
    }

    #[test]
    fn validate_catches_two_events() {
        let mut g = build_graph(toks("a b"), &[]).unwrap();
        g.nodes.push(Node {
            id: 2,
            level: Level::Event,
            span: (0, 2),
            role: RoleLabel::Event,
        });
        assert!(g.validate().unwrap_err().to_string().contains("nodes[2]"));
    }
}
