//! Deterministic parser for the synthetic caption grammar.
//!
//! Entity phrases, verb forms, scene phrases and connectors are disjoint, so
//! the grammar is parsed left to right with one token of lookahead past a
//! noun phrase. On failure the template that got furthest is reported.

use std::fmt;

use super::{tokenize, Span, SrlFrame};
use crate::synth::grammar::{
    CaptionPlan, ClauseForm, ClausePlan, Connector, ScenePlan, SceneRole, SyntheticGrammar, Tense,
    DIR_PREP, LOC_PREPS, MAX_CLAUSES,
};

const T_PROGRESSIVE: &str = "AGENT is V-ing [PATIENT] [SCENE]";
const T_SIMPLE: &str = "AGENT V-s [PATIENT] [SCENE]";
const T_PASSIVE: &str = "PATIENT is V-pp by AGENT [SCENE]";
const T_ELIDED: &str = "V-ing|V-s [PATIENT] [SCENE] (shared agent)";
const T_CLAUSE: &str = "CLAUSE (and|then|and then CLAUSE){0,2}";
const T_FRAGMENT: &str = "AGENT SCENE";

#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
pub struct ParseError {
    pub sentence: String,
    pub position: usize,
    pub found: Option<String>,
    pub nearest_template: &'static str,
    pub expected: String,
}

impl fmt::Display for ParseError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let found = self
            .found
            .as_deref()
            .map_or("end of caption".to_string(), |t| format!("`{t}`"));
        write!(
            f,
            "no template matches `{}`; nearest template `{}` fails at token {} ({found}), expected {}",
            self.sentence, self.nearest_template, self.position, self.expected
        )
    }
}

/// Tokens, role frames and the structured plan recovered from a sentence.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParsedCaption {
    pub tokens: Vec<String>,
    pub frames: Vec<SrlFrame>,
    pub plan: CaptionPlan,
}

/// Tokenizes `sentence` and recovers its role frames.
pub fn rule_parse(
    sentence: &str,
    grammar: &SyntheticGrammar,
) -> Result<(Vec<String>, Vec<SrlFrame>), ParseError> {
    let p = parse_caption(sentence, grammar)?;
    Ok((p.tokens, p.frames))
}

pub fn parse_caption(
    sentence: &str,
    grammar: &SyntheticGrammar,
) -> Result<ParsedCaption, ParseError> {
    let tokens = tokenize(sentence);
    let parser = Parser {
        g: grammar,
        toks: &tokens,
    };
    let clause_err = match parser.clauses() {
        Ok((frames, plan)) => {
            return Ok(ParsedCaption {
                tokens: tokens.clone(),
                frames,
                plan,
            })
        }
        Err(e) => e,
    };
    let frag_err = match parser.fragment() {
        Ok(plan) => {
            return Ok(ParsedCaption {
                tokens: tokens.clone(),
                frames: Vec::new(),
                plan,
            })
        }
        Err(e) => e,
    };
    let best = if frag_err.pos > clause_err.pos {
        frag_err
    } else {
        clause_err
    };
    Err(ParseError {
        sentence: tokens.join(" "),
        position: best.pos,
        found: tokens.get(best.pos).cloned(),
        nearest_template: best.template,
        expected: best.expected,
    })
}

struct Failure {
    pos: usize,
    template: &'static str,
    expected: String,
}

fn fail<T>(pos: usize, template: &'static str, expected: impl Into<String>) -> Result<T, Failure> {
    Err(Failure {
        pos,
        template,
        expected: expected.into(),
    })
}

struct Parser<'a> {
    g: &'a SyntheticGrammar,
    toks: &'a [String],
}

impl Parser<'_> {
    fn tok(&self, pos: usize) -> Option<&str> {
        self.toks.get(pos).map(String::as_str)
    }

    fn entity(&self, pos: usize) -> Option<(usize, Span)> {
        (0..self.g.num_entities()).find_map(|id| {
            let words = self.g.entity(id);
            let end = pos + words.len();
            (end <= self.toks.len() && self.toks[pos..end] == *words).then_some((id, (pos, end)))
        })
    }

    fn verb(&self, pos: usize, form: VerbForm) -> Option<usize> {
        let t = self.tok(pos)?;
        self.g.actions.iter().position(|v| match form {
            VerbForm::Ing => v.ing == t,
            VerbForm::Third => v.third == t,
            VerbForm::Pp => v.pp.as_deref() == Some(t),
        })
    }

    /// Optional scene phrase at `pos`: `(scene, role, span)`.
    fn scene(&self, pos: usize) -> Option<(usize, SceneRole, Span)> {
        let prep = self.tok(pos)?;
        let role = if LOC_PREPS.contains(&prep) {
            SceneRole::Loc
        } else if prep == DIR_PREP {
            SceneRole::Dir
        } else {
            return None;
        };
        self.g.scenes.iter().enumerate().find_map(|(i, s)| {
            let end = pos + 1 + s.phrase.len();
            (end <= self.toks.len() && self.toks[pos + 1..end] == *s.phrase).then_some((
                i,
                role,
                (pos, end),
            ))
        })
    }

    fn clauses(&self) -> Result<(Vec<SrlFrame>, CaptionPlan), Failure> {
        let n = self.toks.len();
        let mut pos = 0;
        let mut frames = Vec::new();
        let mut clauses: Vec<ClausePlan> = Vec::new();
        let mut scene: Option<ScenePlan> = None;
        let mut governing: Option<(Tense, usize, Span)> = None;
        loop {
            let i = clauses.len();
            let mut args: Vec<(Span, &str)> = Vec::new();
            let connector = if i == 0 {
                None
            } else {
                let c = match (self.tok(pos), self.tok(pos + 1)) {
                    (Some("and"), Some("then")) => Connector::AndThen,
                    (Some("and"), _) => Connector::And,
                    (Some("then"), _) => Connector::Then,
                    _ => return fail(pos, T_CLAUSE, "`and`, `then` or end of caption"),
                };
                if c != Connector::And {
                    let at = if c == Connector::AndThen {
                        pos + 1
                    } else {
                        pos
                    };
                    args.push(((at, at + 1), "ARGM-TMP"));
                }
                pos += if c == Connector::AndThen { 2 } else { 1 };
                Some(c)
            };

            let (form, agent, mut patient, verb_at, action);
            if let Some((eid, span)) = self.entity(pos) {
                pos = span.1;
                if self.tok(pos) == Some("is") {
                    if let Some(a) = self.verb(pos + 1, VerbForm::Ing) {
                        form = ClauseForm::Active {
                            tense: Tense::Progressive,
                            elided: false,
                        };
                        (agent, patient, action, verb_at) = (eid, None, a, pos + 1);
                        governing = Some((Tense::Progressive, eid, span));
                        args.push((span, "ARG0"));
                        pos += 2;
                    } else if let Some(a) = self.verb(pos + 1, VerbForm::Pp) {
                        args.push((span, "ARG1"));
                        if self.tok(pos + 2) != Some("by") {
                            return fail(pos + 2, T_PASSIVE, "`by`");
                        }
                        let Some((ag, aspan)) = self.entity(pos + 3) else {
                            return fail(pos + 3, T_PASSIVE, "an agent phrase");
                        };
                        args.push(((pos + 2, aspan.1), "ARG0"));
                        form = ClauseForm::Passive;
                        (agent, patient, action, verb_at) = (ag, Some(eid), a, pos + 1);
                        governing = None;
                        pos = aspan.1;
                    } else {
                        return fail(
                            pos + 1,
                            T_PROGRESSIVE,
                            "a verb in -ing or past-participle form",
                        );
                    }
                } else if let Some(a) = self.verb(pos, VerbForm::Third) {
                    form = ClauseForm::Active {
                        tense: Tense::Simple,
                        elided: false,
                    };
                    (agent, patient, action, verb_at) = (eid, None, a, pos);
                    governing = Some((Tense::Simple, eid, span));
                    args.push((span, "ARG0"));
                    pos += 1;
                } else {
                    return fail(pos, T_SIMPLE, "`is` or a verb in -s form");
                }
            } else if let Some((tense, eid, span)) = governing.filter(|_| i > 0) {
                let vf = if tense == Tense::Progressive {
                    VerbForm::Ing
                } else {
                    VerbForm::Third
                };
                let Some(a) = self.verb(pos, vf) else {
                    let want = if tense == Tense::Progressive {
                        "-ing"
                    } else {
                        "-s"
                    };
                    return fail(
                        pos,
                        T_ELIDED,
                        format!("an agent phrase or a verb in {want} form"),
                    );
                };
                form = ClauseForm::Active {
                    tense,
                    elided: true,
                };
                (agent, patient, action, verb_at) = (eid, None, a, pos);
                args.push((span, "ARG0"));
                pos += 1;
            } else {
                let t = if i == 0 { T_PROGRESSIVE } else { T_CLAUSE };
                return fail(pos, t, "an agent or patient phrase");
            }

            if form != ClauseForm::Passive {
                if let Some((pid, pspan)) = self.entity(pos) {
                    patient = Some(pid);
                    args.push((pspan, "ARG1"));
                    pos = pspan.1;
                }
            }
            if scene.is_none() {
                if let Some((sid, role, sspan)) = self.scene(pos) {
                    scene = Some(ScenePlan {
                        scene: sid,
                        role,
                        clause: i,
                    });
                    args.push((
                        sspan,
                        if role == SceneRole::Loc {
                            "ARGM-LOC"
                        } else {
                            "ARGM-DIR"
                        },
                    ));
                    pos = sspan.1;
                }
            }
            frames.push(SrlFrame::new(verb_at, args));
            clauses.push(ClausePlan {
                action,
                agent,
                patient,
                form,
                connector,
            });
            if pos == n {
                return Ok((frames, CaptionPlan::Clauses { clauses, scene }));
            }
            if clauses.len() == MAX_CLAUSES {
                return fail(pos, T_CLAUSE, "end of caption after three clauses");
            }
        }
    }

    fn fragment(&self) -> Result<CaptionPlan, Failure> {
        let Some((agent, span)) = self.entity(0) else {
            return fail(0, T_FRAGMENT, "an agent phrase");
        };
        match self.scene(span.1) {
            Some((scene, SceneRole::Loc, s)) if s.1 == self.toks.len() => {
                Ok(CaptionPlan::Fragment { agent, scene })
            }
            Some((_, SceneRole::Loc, s)) => fail(s.1, T_FRAGMENT, "end of caption"),
            _ => fail(span.1, T_FRAGMENT, "a locative scene phrase"),
        }
    }
}

#[derive(Clone, Copy)]
enum VerbForm {
    Ing,
    Third,
    Pp,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn g() -> SyntheticGrammar {
        SyntheticGrammar::desk()
    }

    #[test]
    fn progressive_example() {
        let (t, f) = rule_parse("a woman is cutting an onion", &g()).unwrap();
        assert_eq!(t[f[0].verb], "cutting");
        assert_eq!(
            f,
            vec![SrlFrame::new(3, vec![((0, 2), "ARG0"), ((4, 6), "ARG1")])]
        );
    }

    #[test]
    fn locative_example() {
        let (_, f) = rule_parse("a man strums a violin on a stage", &g()).unwrap();
        assert_eq!(f[0].args[2].span, (5, 8));
        assert_eq!(f[0].args[2].role, "ARGM-LOC");
    }

    #[test]
    fn swapped_template_swaps_roles() {
        let (_, f) = rule_parse("an onion is cutting a woman", &g()).unwrap();
        assert_eq!(
            f,
            vec![SrlFrame::new(3, vec![((0, 2), "ARG0"), ((4, 6), "ARG1")])]
        );
        let p = parse_caption("an onion is cutting a woman", &g()).unwrap();
        assert_eq!(p.plan.clauses()[0].agent, 24);
        assert_eq!(p.plan.clauses()[0].patient, Some(0));
    }

    #[test]
    fn passive_and_elision() {
        let p = parse_caption(
            "an egg is cut by a chef then a man is slicing a cake and then washing a cup",
            &g(),
        )
        .unwrap();
        assert_eq!(p.frames.len(), 3);
        assert_eq!(p.frames[0].args[1].span, (4, 7));
        assert_eq!(p.frames[2].args[1].span, p.frames[1].args[1].span);
        assert_eq!(p.frames[2].args[0].role, "ARGM-TMP");
        assert_eq!(g().realize(&p.plan).tokens, p.tokens);
    }

    #[test]
    fn fragment_parses_without_frames() {
        let p = parse_caption("a man in a park", &g()).unwrap();
        assert!(p.frames.is_empty());
        assert!(matches!(
            p.plan,
            CaptionPlan::Fragment { agent: 1, scene: 3 }
        ));
    }

    #[test]
    fn failure_names_nearest_template() {
        let e = parse_caption("a woman is eating an onion", &g()).unwrap_err();
        assert_eq!(e.nearest_template, T_PROGRESSIVE);
        assert_eq!(e.position, 3);
        assert!(e.to_string().contains("eating"), "{e}");
        let e = parse_caption("a chef cuts a cake and", &g()).unwrap_err();
        assert_eq!(e.position, 6);
    }
}
