//! Seeded synthetic world: latent clause structure per video, frame features
//! built from role-factor codes, and captions realized from the grammar.
//!
//! A frame feature is the concatenation of four code blocks, one each for
//! the agent, action, patient and scene of the clause active in that frame,
//! plus Gaussian noise. Agents and patients draw from one shared entity code
//! table, so the role of an entity is carried only by which block it occupies.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::grammar::{
    CaptionPlan, ClauseForm, ClausePlan, Connector, ScenePlan, SceneRole, SyntheticGrammar, Tense,
    MAX_CLAUSES,
};
use super::SynthError;
use crate::autodiff::Tensor;
use crate::semantic_graph::{build_graph, SemanticRoleGraph};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldConfig {
    pub seed: u64,
    pub n_videos: usize,
    pub frames_per_video: usize,
    pub feature_dim: usize,
    pub noise: f64,
    pub captions_per_video: usize,
    pub max_clauses: usize,
    /// Probability that an agent slot is filled from the patient lexicon and
    /// vice versa.
    pub role_reversal_rate: f64,
    /// Probability that a clause reuses the previous clause's agent.
    pub shared_agent_rate: f64,
    /// Probability that a caption mentions the scene.
    pub scene_mention_rate: f64,
    pub n_val: usize,
    pub n_test: usize,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            seed: 0,
            n_videos: 256,
            frames_per_video: 8,
            feature_dim: 128,
            noise: 0.05,
            captions_per_video: 2,
            max_clauses: MAX_CLAUSES,
            role_reversal_rate: 0.3,
            shared_agent_rate: 0.3,
            scene_mention_rate: 0.85,
            n_val: 32,
            n_test: 64,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LatentClause {
    pub agent: usize,
    pub action: usize,
    pub patient: Option<usize>,
    pub scene: usize,
    pub order: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LatentScene {
    pub clauses: Vec<LatentClause>,
    pub noise_seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticVideo {
    pub id: String,
    pub latent: LatentScene,
    /// `[frames × feature_dim]`.
    pub features: Tensor<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticCaption {
    pub video_id: String,
    pub sentence: String,
    pub plan: CaptionPlan,
    pub graph: SemanticRoleGraph,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticDataset {
    pub config: WorldConfig,
    pub grammar: SyntheticGrammar,
    pub videos: Vec<SyntheticVideo>,
    pub captions: Vec<SyntheticCaption>,
    pub splits: Splits,
}

/// Fixed random code per lexicon item, one table per factor.
#[derive(Clone, Debug, PartialEq)]
pub struct FactorCodes {
    pub width: usize,
    pub entity: Vec<Vec<f32>>,
    pub action: Vec<Vec<f32>>,
    pub scene: Vec<Vec<f32>>,
}

impl FactorCodes {
    pub fn new(grammar: &SyntheticGrammar, width: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xC0DE_C0DE);
        let scale = 1.0 / (width as f64).sqrt();
        let mut table = |n: usize| -> Vec<Vec<f32>> {
            (0..n)
                .map(|_| {
                    (0..width)
                        .map(|_| {
                            let z: f64 = StandardNormal.sample(&mut rng);
                            (z * scale) as f32
                        })
                        .collect()
                })
                .collect()
        };
        FactorCodes {
            width,
            entity: table(grammar.num_entities()),
            action: table(grammar.actions.len()),
            scene: table(grammar.scenes.len()),
        }
    }

    /// Noise-free feature row for one clause.
    pub fn clause_row(&self, c: &LatentClause, feature_dim: usize) -> Vec<f32> {
        let w = self.width;
        let mut row = vec![0f32; feature_dim];
        row[..w].copy_from_slice(&self.entity[c.agent]);
        row[w..2 * w].copy_from_slice(&self.action[c.action]);
        if let Some(p) = c.patient {
            row[2 * w..3 * w].copy_from_slice(&self.entity[p]);
        }
        row[3 * w..4 * w].copy_from_slice(&self.scene[c.scene]);
        row
    }
}

/// Frame features for a latent scene: clause `c` of `C` occupies frames
/// `[c·M/C, (c+1)·M/C)`.
pub fn render_features(
    latent: &LatentScene,
    codes: &FactorCodes,
    frames: usize,
    feature_dim: usize,
    noise: f64,
) -> Tensor<f32> {
    let n_c = latent.clauses.len();
    let mut rng = ChaCha8Rng::seed_from_u64(latent.noise_seed);
    let mut data = Vec::with_capacity(frames * feature_dim);
    for m in 0..frames {
        let c = (m * n_c / frames).min(n_c - 1);
        let row = codes.clause_row(&latent.clauses[c], feature_dim);
        for x in row {
            let z: f64 = StandardNormal.sample(&mut rng);
            data.push(x + (noise * z) as f32);
        }
    }
    Tensor::new(vec![frames, feature_dim], data)
}

pub fn video_id(i: usize) -> String {
    format!("v{i:04}")
}

/// Generates a complete dataset deterministically from `config.seed`.
pub fn generate_world(config: &WorldConfig) -> Result<SyntheticDataset, SynthError> {
    let grammar = SyntheticGrammar::desk();
    generate_world_with(config, grammar)
}

pub fn generate_world_with(
    config: &WorldConfig,
    grammar: SyntheticGrammar,
) -> Result<SyntheticDataset, SynthError> {
    grammar.check().map_err(SynthError::Grammar)?;
    let width = config.feature_dim / 4;
    if width == 0
        || config.frames_per_video == 0
        || config.n_videos == 0
        || config.captions_per_video == 0
    {
        return Err(SynthError::Config(
            "feature_dim ≥ 4 and nonzero videos, frames and captions are required".into(),
        ));
    }
    if !(1..=MAX_CLAUSES).contains(&config.max_clauses) {
        return Err(SynthError::Config(format!(
            "max_clauses must be in 1..={MAX_CLAUSES}"
        )));
    }
    if config.n_val + config.n_test >= config.n_videos {
        return Err(SynthError::Config(format!(
            "{} validation + {} test videos leave no training videos out of {}",
            config.n_val, config.n_test, config.n_videos
        )));
    }
    let codes = FactorCodes::new(&grammar, width, config.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut used: BTreeSet<(usize, usize, Option<usize>)> = BTreeSet::new();
    let mut videos = Vec::with_capacity(config.n_videos);
    let mut captions = Vec::new();
    for v in 0..config.n_videos {
        let latent = sample_latent(&grammar, config, &mut rng, &mut used)?;
        let features = render_features(
            &latent,
            &codes,
            config.frames_per_video,
            config.feature_dim,
            config.noise,
        );
        let id = video_id(v);
        for _ in 0..config.captions_per_video {
            let plan = sample_plan(&latent, &grammar, config, &mut rng);
            let r = grammar.realize(&plan);
            let sentence = r.sentence();
            let graph =
                build_graph(r.tokens, &r.frames).map_err(|e| SynthError::Grammar(e.to_string()))?;
            captions.push(SyntheticCaption {
                video_id: id.clone(),
                sentence,
                plan,
                graph,
            });
        }
        videos.push(SyntheticVideo {
            id,
            latent,
            features,
        });
    }
    let mut order: Vec<usize> = (0..config.n_videos).collect();
    order.shuffle(&mut rng);
    let (test, rest) = order.split_at(config.n_test);
    let (val, train) = rest.split_at(config.n_val);
    let ids = |ix: &[usize]| {
        let mut v: Vec<usize> = ix.to_vec();
        v.sort();
        v.into_iter().map(video_id).collect()
    };
    let splits = Splits {
        train: ids(train),
        val: ids(val),
        test: ids(test),
    };
    Ok(SyntheticDataset {
        config: config.clone(),
        grammar,
        videos,
        captions,
        splits,
    })
}

fn sample_entity(
    grammar: &SyntheticGrammar,
    rng: &mut ChaCha8Rng,
    agent_slot: bool,
    reversal: f64,
) -> usize {
    let from_agents = agent_slot != rng.gen_bool(reversal);
    if from_agents {
        rng.gen_range(0..grammar.agents.len())
    } else {
        grammar.agents.len() + rng.gen_range(0..grammar.patients.len())
    }
}

fn sample_latent(
    grammar: &SyntheticGrammar,
    config: &WorldConfig,
    rng: &mut ChaCha8Rng,
    used: &mut BTreeSet<(usize, usize, Option<usize>)>,
) -> Result<LatentScene, SynthError> {
    const TRIES: usize = 1000;
    let n_clauses = rng.gen_range(1..=config.max_clauses);
    let scene = rng.gen_range(0..grammar.scenes.len());
    let mut clauses: Vec<LatentClause> = Vec::with_capacity(n_clauses);
    for order in 0..n_clauses {
        let share = clauses
            .last()
            .map(|c| c.agent)
            .filter(|_| rng.gen_bool(config.shared_agent_rate));
        let mut found = None;
        for _ in 0..TRIES {
            let action = rng.gen_range(0..grammar.actions.len());
            let agent = share
                .unwrap_or_else(|| sample_entity(grammar, rng, true, config.role_reversal_rate));
            let patient = if grammar.actions[action].transitive() {
                let p = sample_entity(grammar, rng, false, config.role_reversal_rate);
                if p == agent {
                    continue;
                }
                Some(p)
            } else {
                None
            };
            if used.insert((agent, action, patient)) {
                found = Some(LatentClause {
                    agent,
                    action,
                    patient,
                    scene,
                    order,
                });
                break;
            }
        }
        let c = found.ok_or_else(|| {
            SynthError::Config(format!(
                "could not find an unused (agent, action, patient) triple after {TRIES} draws"
            ))
        })?;
        clauses.push(c);
    }
    Ok(LatentScene {
        clauses,
        noise_seed: rng.gen(),
    })
}

/// One caption describing every clause of the latent scene.
fn sample_plan(
    latent: &LatentScene,
    grammar: &SyntheticGrammar,
    config: &WorldConfig,
    rng: &mut ChaCha8Rng,
) -> CaptionPlan {
    let mut clauses: Vec<ClausePlan> = Vec::with_capacity(latent.clauses.len());
    let mut governing: Option<(Tense, usize)> = None;
    for (i, lc) in latent.clauses.iter().enumerate() {
        let connector = (i > 0).then(|| *Connector::ALL.choose(rng).expect("nonempty"));
        let can_elide = governing.is_some_and(|(_, a)| a == lc.agent);
        let form = if can_elide && rng.gen_bool(0.7) {
            ClauseForm::Active {
                tense: governing.expect("checked").0,
                elided: true,
            }
        } else if lc.patient.is_some()
            && grammar.actions[lc.action].transitive()
            && rng.gen_bool(0.3)
        {
            ClauseForm::Passive
        } else {
            let tense = if rng.gen_bool(0.5) {
                Tense::Progressive
            } else {
                Tense::Simple
            };
            ClauseForm::Active {
                tense,
                elided: false,
            }
        };
        governing = match form {
            ClauseForm::Passive => None,
            ClauseForm::Active { elided: true, .. } => governing,
            ClauseForm::Active { tense, .. } => Some((tense, lc.agent)),
        };
        clauses.push(ClausePlan {
            action: lc.action,
            agent: lc.agent,
            patient: lc.patient,
            form,
            connector,
        });
    }
    let scene = rng.gen_bool(config.scene_mention_rate).then(|| ScenePlan {
        scene: latent.clauses[0].scene,
        role: if rng.gen_bool(0.8) {
            SceneRole::Loc
        } else {
            SceneRole::Dir
        },
        clause: rng.gen_range(0..clauses.len()),
    });
    let plan = CaptionPlan::Clauses { clauses, scene };
    debug_assert!(grammar.check_plan(&plan).is_ok());
    plan
}

impl SyntheticDataset {
    pub fn video(&self, id: &str) -> Option<&SyntheticVideo> {
        self.videos.iter().find(|v| v.id == id)
    }

    pub fn captions_of<'a>(
        &'a self,
        id: &'a str,
    ) -> impl Iterator<Item = &'a SyntheticCaption> + 'a {
        self.captions.iter().filter(move |c| c.video_id == id)
    }
}
