//! Controlled caption grammar: lexicons, structured caption plans and their
//! surface realization with the role frames they imply.
//!
//! Clause forms:
//! - progressive: `AGENT is V-ing [PATIENT] [SCENE]`
//! - simple: `AGENT V-s [PATIENT] [SCENE]`
//! - passive: `PATIENT is V-pp by AGENT [SCENE]`
//! - elided: `V-ing|V-s [PATIENT] [SCENE]`, sharing the agent of the nearest
//!   preceding explicit active clause of the same tense
//!
//! Clauses are joined by `and`, `then` or `and then`; `then` is the temporal
//! argument of the verb that follows it. A caption has 1 to 3 clauses and at
//! most one scene. The verb-less fragment `AGENT SCENE` is also accepted.

use crate::semantic_graph::{Span, SrlFrame};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Verb {
    pub base: String,
    pub third: String,
    pub ing: String,
    /// Past participle; intransitive verbs have none.
    pub pp: Option<String>,
}

impl Verb {
    pub fn transitive(&self) -> bool {
        self.pp.is_some()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Scene {
    /// Locative preposition used with this scene.
    pub prep: String,
    pub phrase: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SyntheticGrammar {
    pub agents: Vec<Vec<String>>,
    pub actions: Vec<Verb>,
    pub patients: Vec<Vec<String>>,
    pub scenes: Vec<Scene>,
}

pub const LOC_PREPS: [&str; 3] = ["on", "in", "at"];
pub const DIR_PREP: &str = "toward";
pub const MAX_CLAUSES: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Tense {
    Progressive,
    Simple,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ClauseForm {
    Active { tense: Tense, elided: bool },
    Passive,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Connector {
    And,
    Then,
    AndThen,
}

impl Connector {
    pub const ALL: [Connector; 3] = [Connector::And, Connector::Then, Connector::AndThen];

    fn words(self) -> &'static [&'static str] {
        match self {
            Connector::And => &["and"],
            Connector::Then => &["then"],
            Connector::AndThen => &["and", "then"],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SceneRole {
    Loc,
    Dir,
}

/// Entity ids index the agent lexicon first and then the patient lexicon.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct ClausePlan {
    pub action: usize,
    pub agent: usize,
    pub patient: Option<usize>,
    pub form: ClauseForm,
    /// Connector preceding this clause; `None` for the first clause.
    pub connector: Option<Connector>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ScenePlan {
    pub scene: usize,
    pub role: SceneRole,
    /// Clause the scene phrase is attached to.
    pub clause: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum CaptionPlan {
    Clauses {
        clauses: Vec<ClausePlan>,
        scene: Option<ScenePlan>,
    },
    /// Verb-less `AGENT SCENE`.
    Fragment { agent: usize, scene: usize },
}

/// Tokens and the role frames they carry.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Realized {
    pub tokens: Vec<String>,
    pub frames: Vec<SrlFrame>,
}

impl Realized {
    pub fn sentence(&self) -> String {
        self.tokens.join(" ")
    }
}

fn words(list: &[&str]) -> Vec<String> {
    list.iter().map(|s| s.to_string()).collect()
}

fn with_article(noun: &str) -> Vec<String> {
    let article = if noun.starts_with(['a', 'e', 'i', 'o', 'u']) {
        "an"
    } else {
        "a"
    };
    words(&[article, noun])
}

impl SyntheticGrammar {
    /// Desk-scale lexicons: 24 agents, 16 actions, 24 patients, 8 scenes.
    pub fn desk() -> Self {
        let agents = [
            "woman", "man", "boy", "girl", "chef", "child", "dancer", "player", "singer",
            "teacher", "student", "doctor", "farmer", "driver", "worker", "artist", "baby",
            "soldier", "monkey", "dog", "cat", "horse", "bird", "cow",
        ];
        let patients = [
            "onion", "violin", "ball", "guitar", "tomato", "egg", "car", "box", "bottle", "book",
            "cake", "apple", "bike", "door", "rope", "drum", "pan", "phone", "chair", "kite",
            "hat", "cup", "knife", "potato",
        ];
        let verbs: [(&str, &str, &str, Option<&str>); 16] = [
            ("cut", "cuts", "cutting", Some("cut")),
            ("slice", "slices", "slicing", Some("sliced")),
            ("hold", "holds", "holding", Some("held")),
            ("push", "pushes", "pushing", Some("pushed")),
            ("carry", "carries", "carrying", Some("carried")),
            ("throw", "throws", "throwing", Some("thrown")),
            ("kick", "kicks", "kicking", Some("kicked")),
            ("wash", "washes", "washing", Some("washed")),
            ("open", "opens", "opening", Some("opened")),
            ("play", "plays", "playing", Some("played")),
            ("strum", "strums", "strumming", Some("strummed")),
            ("catch", "catches", "catching", Some("caught")),
            ("dance", "dances", "dancing", None),
            ("jump", "jumps", "jumping", None),
            ("run", "runs", "running", None),
            ("sing", "sings", "singing", None),
        ];
        let scenes = [
            ("on", "a stage"),
            ("in", "a kitchen"),
            ("at", "the beach"),
            ("in", "a park"),
            ("on", "a street"),
            ("in", "a garden"),
            ("at", "a market"),
            ("in", "a classroom"),
        ];
        SyntheticGrammar {
            agents: agents.iter().map(|n| with_article(n)).collect(),
            actions: verbs
                .iter()
                .map(|(b, t, i, p)| Verb {
                    base: b.to_string(),
                    third: t.to_string(),
                    ing: i.to_string(),
                    pp: p.map(str::to_string),
                })
                .collect(),
            patients: patients.iter().map(|n| with_article(n)).collect(),
            scenes: scenes
                .iter()
                .map(|(p, np)| Scene {
                    prep: p.to_string(),
                    phrase: np.split(' ').map(str::to_string).collect(),
                })
                .collect(),
        }
    }

    pub fn num_entities(&self) -> usize {
        self.agents.len() + self.patients.len()
    }

    pub fn entity(&self, id: usize) -> &[String] {
        if id < self.agents.len() {
            &self.agents[id]
        } else {
            &self.patients[id - self.agents.len()]
        }
    }

    pub fn entity_text(&self, id: usize) -> String {
        self.entity(id).join(" ")
    }

    /// Every word the grammar can emit, sorted and deduplicated.
    pub fn vocabulary(&self) -> Vec<String> {
        let mut v: Vec<String> = Vec::new();
        for e in self.agents.iter().chain(&self.patients) {
            v.extend(e.iter().cloned());
        }
        for a in &self.actions {
            v.extend([a.third.clone(), a.ing.clone()]);
            v.extend(a.pp.clone());
        }
        for s in &self.scenes {
            v.extend(s.phrase.iter().cloned());
        }
        v.extend(words(&LOC_PREPS));
        v.extend(words(&[DIR_PREP, "is", "by", "and", "then"]));
        v.sort();
        v.dedup();
        v
    }

    /// Checks lexicon sizes and that no surface form is shared between roles.
    pub fn check(&self) -> Result<(), String> {
        if self.agents.len() < 2
            || self.actions.len() < 2
            || self.patients.len() < 2
            || self.scenes.len() < 2
        {
            return Err("every lexicon needs at least two entries".into());
        }
        let mut seen = std::collections::BTreeMap::new();
        let mut claim = |w: &str, owner: String| -> Result<(), String> {
            if let Some(prev) = seen.insert(w.to_string(), owner.clone()) {
                if prev != owner {
                    return Err(format!("word `{w}` used by both {prev} and {owner}"));
                }
            }
            Ok(())
        };
        for (i, e) in self.agents.iter().enumerate() {
            claim(e.last().ok_or("empty agent")?, format!("agent {i}"))?;
        }
        for (i, e) in self.patients.iter().enumerate() {
            claim(e.last().ok_or("empty patient")?, format!("patient {i}"))?;
        }
        for (i, a) in self.actions.iter().enumerate() {
            for f in [Some(&a.third), Some(&a.ing), a.pp.as_ref()]
                .into_iter()
                .flatten()
            {
                claim(f, format!("action {i}"))?;
            }
        }
        for (i, s) in self.scenes.iter().enumerate() {
            claim(s.phrase.last().ok_or("empty scene")?, format!("scene {i}"))?;
        }
        let reserved = [
            "is", "by", "and", "then", DIR_PREP, "on", "in", "at", "a", "an", "the",
        ];
        for w in reserved {
            if let Some(owner) = seen.get(w) {
                return Err(format!(
                    "reserved word `{w}` used as a head word by {owner}"
                ));
            }
        }
        Ok(())
    }

    /// Structural validity of a plan with respect to this grammar.
    pub fn check_plan(&self, plan: &CaptionPlan) -> Result<(), String> {
        let ne = self.num_entities();
        match plan {
            CaptionPlan::Fragment { agent, scene } => {
                if *agent >= ne || *scene >= self.scenes.len() {
                    return Err("fragment ids out of range".into());
                }
            }
            CaptionPlan::Clauses { clauses, scene } => {
                if clauses.is_empty() || clauses.len() > MAX_CLAUSES {
                    return Err(format!(
                        "{} clauses, expected 1..={MAX_CLAUSES}",
                        clauses.len()
                    ));
                }
                let mut governing: Option<(Tense, usize)> = None;
                for (i, c) in clauses.iter().enumerate() {
                    if c.action >= self.actions.len()
                        || c.agent >= ne
                        || c.patient.is_some_and(|p| p >= ne)
                    {
                        return Err(format!("clause {i}: id out of range"));
                    }
                    if (i == 0) != c.connector.is_none() {
                        return Err(format!(
                            "clause {i}: only the first clause lacks a connector"
                        ));
                    }
                    match c.form {
                        ClauseForm::Passive => {
                            if c.patient.is_none() || !self.actions[c.action].transitive() {
                                return Err(format!(
                                    "clause {i}: passive needs a transitive verb and a patient"
                                ));
                            }
                            governing = None;
                        }
                        ClauseForm::Active {
                            tense,
                            elided: true,
                        } => {
                            if governing != Some((tense, c.agent)) {
                                return Err(format!(
                                    "clause {i}: elided clause has no matching explicit clause"
                                ));
                            }
                        }
                        ClauseForm::Active {
                            tense,
                            elided: false,
                        } => governing = Some((tense, c.agent)),
                    }
                }
                if let Some(s) = scene {
                    if s.scene >= self.scenes.len() || s.clause >= clauses.len() {
                        return Err("scene ids out of range".into());
                    }
                }
            }
        }
        Ok(())
    }

    /// Surface tokens and role frames for a plan.
    pub fn realize(&self, plan: &CaptionPlan) -> Realized {
        let mut tokens: Vec<String> = Vec::new();
        let push = |tokens: &mut Vec<String>, ws: &[String]| -> Span {
            let s = tokens.len();
            tokens.extend(ws.iter().cloned());
            (s, tokens.len())
        };
        let mut frames = Vec::new();
        match plan {
            CaptionPlan::Fragment { agent, scene } => {
                push(&mut tokens, self.entity(*agent));
                let sc = &self.scenes[*scene];
                push(&mut tokens, std::slice::from_ref(&sc.prep));
                push(&mut tokens, &sc.phrase);
            }
            CaptionPlan::Clauses { clauses, scene } => {
                let mut governing_span: Span = (0, 0);
                for (i, c) in clauses.iter().enumerate() {
                    let mut args: Vec<(Span, &str)> = Vec::new();
                    if let Some(conn) = c.connector {
                        for w in conn.words() {
                            let sp = push(&mut tokens, &[w.to_string()]);
                            if *w == "then" {
                                args.push((sp, "ARGM-TMP"));
                            }
                        }
                    }
                    let verb = &self.actions[c.action];
                    let verb_at;
                    match c.form {
                        ClauseForm::Passive => {
                            let p = push(
                                &mut tokens,
                                self.entity(c.patient.expect("passive patient")),
                            );
                            args.push((p, "ARG1"));
                            push(&mut tokens, &["is".to_string()]);
                            verb_at = push(
                                &mut tokens,
                                std::slice::from_ref(verb.pp.as_ref().expect("transitive")),
                            )
                            .0;
                            let by = push(&mut tokens, &["by".to_string()]);
                            let a = push(&mut tokens, self.entity(c.agent));
                            args.push(((by.0, a.1), "ARG0"));
                        }
                        ClauseForm::Active { tense, elided } => {
                            if elided {
                                args.push((governing_span, "ARG0"));
                            } else {
                                governing_span = push(&mut tokens, self.entity(c.agent));
                                args.push((governing_span, "ARG0"));
                                if tense == Tense::Progressive {
                                    push(&mut tokens, &["is".to_string()]);
                                }
                            }
                            let form = if tense == Tense::Progressive {
                                &verb.ing
                            } else {
                                &verb.third
                            };
                            verb_at = push(&mut tokens, std::slice::from_ref(form)).0;
                            if let Some(p) = c.patient {
                                let sp = push(&mut tokens, self.entity(p));
                                args.push((sp, "ARG1"));
                            }
                        }
                    }
                    if let Some(s) = scene.filter(|s| s.clause == i) {
                        let sc = &self.scenes[s.scene];
                        let (prep, role) = match s.role {
                            SceneRole::Loc => (sc.prep.clone(), "ARGM-LOC"),
                            SceneRole::Dir => (DIR_PREP.to_string(), "ARGM-DIR"),
                        };
                        let a = push(&mut tokens, &[prep]);
                        let b = push(&mut tokens, &sc.phrase);
                        args.push(((a.0, b.1), role));
                    }
                    frames.push(SrlFrame::new(verb_at, args));
                }
            }
        }
        Realized { tokens, frames }
    }
}

impl CaptionPlan {
    pub fn clauses(&self) -> &[ClausePlan] {
        match self {
            CaptionPlan::Clauses { clauses, .. } => clauses,
            CaptionPlan::Fragment { .. } => &[],
        }
    }

    pub fn scene(&self) -> Option<usize> {
        match self {
            CaptionPlan::Clauses { scene, .. } => scene.map(|s| s.scene),
            CaptionPlan::Fragment { scene, .. } => Some(*scene),
        }
    }
}
