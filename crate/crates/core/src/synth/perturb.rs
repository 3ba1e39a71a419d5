//! Caption perturbations that produce hard negatives for binary selection.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::grammar::{CaptionPlan, ClauseForm, ClausePlan, ScenePlan, SyntheticGrammar, Tense};
use crate::semantic_graph::{build_graph, parse_caption, ParseError, SemanticRoleGraph};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerturbKind {
    SwitchRoles,
    ReplaceActions,
    ReplacePersons,
    ReplaceScenes,
    IncompleteEvents,
}

impl PerturbKind {
    pub const ALL: [PerturbKind; 5] = [
        PerturbKind::SwitchRoles,
        PerturbKind::ReplaceActions,
        PerturbKind::ReplacePersons,
        PerturbKind::ReplaceScenes,
        PerturbKind::IncompleteEvents,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PerturbKind::SwitchRoles => "switch_roles",
            PerturbKind::ReplaceActions => "replace_actions",
            PerturbKind::ReplacePersons => "replace_persons",
            PerturbKind::ReplaceScenes => "replace_scenes",
            PerturbKind::IncompleteEvents => "incomplete_events",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Perturbed {
    pub sentence: String,
    pub plan: CaptionPlan,
    pub graph: SemanticRoleGraph,
    /// Clause index the edit targeted, when it targeted one.
    pub clause: Option<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum PerturbOutcome {
    Applied(Perturbed),
    /// The caption lacks the structure this kind needs.
    Inapplicable(PerturbKind),
}

/// Parses the graph's sentence back into a plan and perturbs it.
pub fn perturb(
    graph: &SemanticRoleGraph,
    grammar: &SyntheticGrammar,
    kind: PerturbKind,
    rng: &mut ChaCha8Rng,
) -> Result<PerturbOutcome, ParseError> {
    let parsed = parse_caption(&graph.sentence(), grammar)?;
    Ok(perturb_plan(&parsed.plan, grammar, kind, rng))
}

pub fn perturb_plan(
    plan: &CaptionPlan,
    grammar: &SyntheticGrammar,
    kind: PerturbKind,
    rng: &mut ChaCha8Rng,
) -> PerturbOutcome {
    let edited = match kind {
        PerturbKind::SwitchRoles => switch_roles(plan, rng),
        PerturbKind::ReplaceActions => replace_action(plan, grammar, rng),
        PerturbKind::ReplacePersons => replace_person(plan, grammar, rng),
        PerturbKind::ReplaceScenes => replace_scene(plan, grammar, rng),
        PerturbKind::IncompleteEvents => incomplete(plan, rng),
    };
    let Some((plan, clause)) = edited else {
        return PerturbOutcome::Inapplicable(kind);
    };
    debug_assert!(
        grammar.check_plan(&plan).is_ok(),
        "{kind:?} produced {plan:?}"
    );
    let r = grammar.realize(&plan);
    let sentence = r.sentence();
    let graph = build_graph(r.tokens, &r.frames).expect("realized plans build valid graphs");
    PerturbOutcome::Applied(Perturbed {
        sentence,
        plan,
        graph,
        clause,
    })
}

fn clauses_mut(plan: &mut CaptionPlan) -> &mut Vec<ClausePlan> {
    match plan {
        CaptionPlan::Clauses { clauses, .. } => clauses,
        CaptionPlan::Fragment { .. } => unreachable!("callers check for fragments"),
    }
}

/// Indices of the elided clauses whose agent is the explicit clause `i`.
fn dependents(clauses: &[ClausePlan], i: usize) -> Vec<usize> {
    clauses[i + 1..]
        .iter()
        .take_while(|c| matches!(c.form, ClauseForm::Active { elided: true, .. }))
        .enumerate()
        .map(|(k, _)| i + 1 + k)
        .collect()
}

fn is_explicit(c: &ClausePlan) -> bool {
    !matches!(c.form, ClauseForm::Active { elided: true, .. })
}

fn draw_excluding(rng: &mut ChaCha8Rng, n: usize, exclude: &[usize]) -> Option<usize> {
    let pool: Vec<usize> = (0..n).filter(|i| !exclude.contains(i)).collect();
    pool.choose(rng).copied()
}

fn switch_roles(plan: &CaptionPlan, rng: &mut ChaCha8Rng) -> Option<(CaptionPlan, Option<usize>)> {
    let clauses = plan.clauses();
    let candidates: Vec<usize> = (0..clauses.len())
        .filter(|&i| {
            is_explicit(&clauses[i])
                && clauses[i].patient.is_some()
                && dependents(clauses, i).is_empty()
        })
        .collect();
    let &i = candidates.choose(rng)?;
    let mut out = plan.clone();
    let c = &mut clauses_mut(&mut out)[i];
    let p = c.patient.replace(c.agent).expect("candidate has a patient");
    c.agent = p;
    Some((out, Some(i)))
}

fn replace_action(
    plan: &CaptionPlan,
    grammar: &SyntheticGrammar,
    rng: &mut ChaCha8Rng,
) -> Option<(CaptionPlan, Option<usize>)> {
    let clauses = plan.clauses();
    if clauses.is_empty() {
        return None;
    }
    let i = rng.gen_range(0..clauses.len());
    let c = &clauses[i];
    let needs_object = c.patient.is_some() || c.form == ClauseForm::Passive;
    let pool: Vec<usize> = (0..grammar.actions.len())
        .filter(|&a| a != c.action && (!needs_object || grammar.actions[a].transitive()))
        .collect();
    let &a = pool.choose(rng)?;
    let mut out = plan.clone();
    clauses_mut(&mut out)[i].action = a;
    Some((out, Some(i)))
}

fn replace_person(
    plan: &CaptionPlan,
    grammar: &SyntheticGrammar,
    rng: &mut ChaCha8Rng,
) -> Option<(CaptionPlan, Option<usize>)> {
    let ne = grammar.num_entities();
    if let CaptionPlan::Fragment { agent, scene } = plan {
        let a = draw_excluding(rng, ne, &[*agent])?;
        return Some((
            CaptionPlan::Fragment {
                agent: a,
                scene: *scene,
            },
            None,
        ));
    }
    let clauses = plan.clauses();
    // (clause, is_agent) slots holding an explicit entity phrase.
    let mut slots = Vec::new();
    for (i, c) in clauses.iter().enumerate() {
        if is_explicit(c) {
            slots.push((i, true));
        }
        if c.patient.is_some() {
            slots.push((i, false));
        }
    }
    let &(i, is_agent) = slots.choose(rng)?;
    let c = &clauses[i];
    let mut out = plan.clone();
    let cs = clauses_mut(&mut out);
    if is_agent {
        let deps = dependents(clauses, i);
        let mut exclude = vec![c.agent];
        for &k in std::iter::once(&i).chain(&deps) {
            exclude.extend(clauses[k].patient);
        }
        let e = draw_excluding(rng, ne, &exclude)?;
        for k in std::iter::once(i).chain(deps) {
            cs[k].agent = e;
        }
    } else {
        let e = draw_excluding(rng, ne, &[c.agent, c.patient.expect("slot has a patient")])?;
        cs[i].patient = Some(e);
    }
    Some((out, Some(i)))
}

fn replace_scene(
    plan: &CaptionPlan,
    grammar: &SyntheticGrammar,
    rng: &mut ChaCha8Rng,
) -> Option<(CaptionPlan, Option<usize>)> {
    let old = plan.scene()?;
    let s = draw_excluding(rng, grammar.scenes.len(), &[old])?;
    let mut out = plan.clone();
    match &mut out {
        CaptionPlan::Clauses {
            scene: Some(sp), ..
        } => sp.scene = s,
        CaptionPlan::Fragment { scene, .. } => *scene = s,
        CaptionPlan::Clauses { scene: None, .. } => unreachable!("scene checked above"),
    }
    Some((out, None))
}

#[derive(Clone, Copy)]
enum Omit {
    Clauses,
    Patient,
    Scene,
    Verbs,
}

fn incomplete(plan: &CaptionPlan, rng: &mut ChaCha8Rng) -> Option<(CaptionPlan, Option<usize>)> {
    let CaptionPlan::Clauses { clauses, scene } = plan else {
        return None;
    };
    let mut options = Vec::new();
    if clauses.len() > 1 {
        options.push(Omit::Clauses);
    }
    if clauses
        .iter()
        .any(|c| c.patient.is_some() && c.form != ClauseForm::Passive)
    {
        options.push(Omit::Patient);
    }
    if scene.is_some() {
        options.push(Omit::Scene);
        options.push(Omit::Verbs);
    }
    match *options.choose(rng)? {
        Omit::Clauses => {
            let n = clauses.len();
            let mut keep: Vec<usize>;
            loop {
                keep = (0..n).filter(|_| rng.gen_bool(0.5)).collect();
                if !keep.is_empty() && keep.len() < n {
                    break;
                }
            }
            let mut kept: Vec<ClausePlan> = keep.iter().map(|&i| clauses[i].clone()).collect();
            kept[0].connector = None;
            let mut governing: Option<(Tense, usize)> = None;
            for c in &mut kept {
                match c.form {
                    ClauseForm::Passive => governing = None,
                    ClauseForm::Active { tense, elided } => {
                        if !(elided && governing == Some((tense, c.agent))) {
                            c.form = ClauseForm::Active {
                                tense,
                                elided: false,
                            };
                            governing = Some((tense, c.agent));
                        }
                    }
                }
            }
            let scene = scene.and_then(|s| {
                keep.iter()
                    .position(|&i| i == s.clause)
                    .map(|k| ScenePlan { clause: k, ..s })
            });
            Some((
                CaptionPlan::Clauses {
                    clauses: kept,
                    scene,
                },
                None,
            ))
        }
        Omit::Patient => {
            let idx: Vec<usize> = (0..clauses.len())
                .filter(|&i| clauses[i].patient.is_some() && clauses[i].form != ClauseForm::Passive)
                .collect();
            let &i = idx.choose(rng).expect("option requires a candidate");
            let mut out = plan.clone();
            clauses_mut(&mut out)[i].patient = None;
            Some((out, Some(i)))
        }
        Omit::Scene => Some((
            CaptionPlan::Clauses {
                clauses: clauses.clone(),
                scene: None,
            },
            None,
        )),
        Omit::Verbs => {
            let s = scene.expect("option requires a scene");
            Some((
                CaptionPlan::Fragment {
                    agent: clauses[0].agent,
                    scene: s.scene,
                },
                None,
            ))
        }
    }
}
