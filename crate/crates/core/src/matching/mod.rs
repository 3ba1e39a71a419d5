//! Cross-modal similarity at the event, action and entity levels, their
//! fusion, and the hardest-negative ranking loss.
//!
//! Similarity matrices are `[B_v × B_c]`: rows are videos, columns captions.

use serde::{Deserialize, Serialize};

use crate::autodiff::{AutodiffError, Graph, Real, Tensor, Unary, Var};
use crate::text_encoder::TextBatch;
use crate::video_encoder::VideoBatch;

type Result<T> = std::result::Result<T, AutodiffError>;

/// Largest accepted softmax temperature; keeps `exp(λ)` finite in `f32`.
pub const MAX_LAMBDA: f64 = 60.0;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormalizeLocal {
    /// `s_x = Σ_i s_{x,i}`.
    #[default]
    Sum,
    /// `s_x = Σ_i s_{x,i} / N_x`.
    Mean,
}

impl std::str::FromStr for NormalizeLocal {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "sum" => Ok(NormalizeLocal::Sum),
            "mean" => Ok(NormalizeLocal::Mean),
            _ => Err(format!(
                "unknown local normalization `{s}` (expected sum or mean)"
            )),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MatchConfig {
    pub lambda: f64,
    pub eps: f64,
    pub normalize_local: NormalizeLocal,
}

impl Default for MatchConfig {
    fn default() -> Self {
        MatchConfig {
            lambda: 4.0,
            eps: 1e-8,
            normalize_local: NormalizeLocal::Sum,
        }
    }
}

impl MatchConfig {
    pub fn validate(&self) -> std::result::Result<(), String> {
        if !(self.lambda > 0.0 && self.lambda <= MAX_LAMBDA) {
            return Err(format!(
                "lambda must lie in (0, {MAX_LAMBDA}], got {}",
                self.lambda
            ));
        }
        if !(self.eps > 0.0) {
            return Err(format!("eps must be positive, got {}", self.eps));
        }
        Ok(())
    }
}

/// Caption-side inputs to matching.
#[derive(Clone, Debug)]
pub struct TextSide {
    /// `[B_c × D]`.
    pub event: Var,
    pub actions: Var,
    pub action_offsets: Vec<usize>,
    /// `None` when no caption of the batch has an entity node.
    pub entities: Option<Var>,
    pub entity_offsets: Vec<usize>,
}

/// Video-side inputs to matching.
#[derive(Clone, Debug)]
pub struct VideoSide {
    /// `[B_v × D]`.
    pub event: Var,
    pub actions: Var,
    pub entities: Var,
    pub frame_offsets: Vec<usize>,
}

impl From<&TextBatch> for TextSide {
    fn from(b: &TextBatch) -> Self {
        TextSide {
            event: b.event,
            actions: b.actions,
            action_offsets: b.action_offsets.clone(),
            entities: b.entities,
            entity_offsets: b.entity_offsets.clone(),
        }
    }
}

impl From<&VideoBatch> for VideoSide {
    fn from(b: &VideoBatch) -> Self {
        VideoSide {
            event: b.event,
            actions: b.actions,
            entities: b.entities,
            frame_offsets: b.frame_offsets.clone(),
        }
    }
}

/// Local attentive matching of one level for every (video, caption) pair.
#[derive(Clone, Debug)]
pub struct LocalScores {
    /// `[B_v × B_c]`.
    pub score: Var,
    /// `[ΣN × ΣM]` node-frame cosine similarities, when any node exists.
    pub sims: Option<Var>,
    /// `[ΣN × ΣM]` attention over the frames of each video, per node.
    pub phi: Option<Var>,
    /// Per caption: true when it has no node at this level (score forced to 0).
    pub empty: Vec<bool>,
}

#[derive(Clone, Debug)]
pub struct Similarities {
    pub event: Var,
    pub action: LocalScores,
    pub entity: LocalScores,
    /// Mean of the three level scores.
    pub fused: Var,
}

/// Segment indicator `[Σlen × segments]` with `weights[s]` in segment `s`.
fn indicator<T: Real>(offsets: &[usize], weights: impl Fn(usize) -> f64) -> Tensor<T> {
    let segs = offsets.len() - 1;
    let total = offsets[segs];
    let mut data = vec![T::zero(); total * segs];
    for s in 0..segs {
        let w = T::from_f64_lossy(weights(s));
        for r in offsets[s]..offsets[s + 1] {
            data[r * segs + s] = w;
        }
    }
    Tensor::new(vec![total, segs], data)
}

/// `s_ij = cos(c_i, v_j)`, `φ_ij = softmax_j(λ[s_ij]_+ / sqrt(Σ_j [s_ij]_+² + ε))`
/// over the frames of each video, `s_{x,i} = Σ_j φ_ij s_ij`, then summed (or
/// averaged) over the nodes of each caption.
pub fn local_scores<T: Real>(
    g: &mut Graph<'_, T>,
    nodes: Option<Var>,
    node_offsets: &[usize],
    frames: Var,
    frame_offsets: &[usize],
    cfg: &MatchConfig,
) -> Result<LocalScores> {
    let bc = node_offsets.len() - 1;
    let bv = frame_offsets.len() - 1;
    let empty: Vec<bool> = (0..bc)
        .map(|c| node_offsets[c] == node_offsets[c + 1])
        .collect();
    let Some(nodes) = nodes.filter(|_| node_offsets[bc] > 0) else {
        let score = g.constant(Tensor::zeros(vec![bv, bc]));
        return Ok(LocalScores {
            score,
            sims: None,
            phi: None,
            empty,
        });
    };
    let s = g.cosine_matrix(nodes, frames, cfg.eps)?;
    let p = g.constant(indicator::<T>(frame_offsets, |_| 1.0));
    let pt = g.constant(indicator::<T>(frame_offsets, |_| 1.0).transpose());
    let sp = g.relu(s)?;
    let sq = g.square(sp)?;
    let n2 = g.matmul(sq, p)?;
    let n2 = g.add_scalar(n2, cfg.eps)?;
    let norm = g.sqrt(n2)?;
    let inv = g.recip(norm)?;
    let inv = g.matmul(inv, pt)?;
    let logits = g.mul(sp, inv)?;
    let logits = g.scale(logits, cfg.lambda)?;
    // Logits lie in [0, λ], so the exponentials need no max shift.
    let e = g.unary(logits, Unary::Exp)?;
    let z = g.matmul(e, p)?;
    let inv_z = g.recip(z)?;
    let inv_z = g.matmul(inv_z, pt)?;
    let phi = g.mul(e, inv_z)?;
    let weighted = g.mul(phi, s)?;
    let node_scores = g.matmul(weighted, p)?;
    let node_scores = g.transpose(node_scores)?;
    let q = g.constant(indicator::<T>(node_offsets, |c| {
        match cfg.normalize_local {
            NormalizeLocal::Sum => 1.0,
            NormalizeLocal::Mean => 1.0 / (node_offsets[c + 1] - node_offsets[c]).max(1) as f64,
        }
    }));
    let score = g.matmul(node_scores, q)?;
    Ok(LocalScores {
        score,
        sims: Some(s),
        phi: Some(phi),
        empty,
    })
}

/// `[B_v × B_c]` similarities at every level plus their mean.
pub fn batch_similarity<T: Real>(
    g: &mut Graph<'_, T>,
    video: &VideoSide,
    text: &TextSide,
    cfg: &MatchConfig,
) -> Result<Similarities> {
    if video.frame_offsets.len() < 2 || text.action_offsets.len() < 2 {
        return Err(AutodiffError::InvalidArgument {
            op: "batch_similarity",
            msg: "empty batch".into(),
        });
    }
    let event = g.cosine_matrix(video.event, text.event, cfg.eps)?;
    let action = local_scores(
        g,
        Some(text.actions),
        &text.action_offsets,
        video.actions,
        &video.frame_offsets,
        cfg,
    )?;
    let entity = local_scores(
        g,
        text.entities,
        &text.entity_offsets,
        video.entities,
        &video.frame_offsets,
        cfg,
    )?;
    let sum = g.add(event, action.score)?;
    let sum = g.add(sum, entity.score)?;
    let fused = g.scale(sum, 1.0 / 3.0)?;
    Ok(Similarities {
        event,
        action,
        entity,
        fused,
    })
}

/// Hardest-negative hinge in both directions, averaged over the positive
/// pairs on the diagonal. Zero for a single pair.
pub fn contrastive_loss<T: Real>(g: &mut Graph<'_, T>, sim: Var, margin: f64) -> Result<Var> {
    let (b, c) = match g.shape(sim) {
        [b, c] => (*b, *c),
        s => {
            return Err(AutodiffError::ShapeMismatch {
                op: "contrastive_loss",
                shapes: vec![s.to_vec()],
            })
        }
    };
    if b != c || b == 0 {
        return Err(AutodiffError::InvalidArgument {
            op: "contrastive_loss",
            msg: format!("similarity matrix must be square and nonempty, got {b}×{c}"),
        });
    }
    if !(margin >= 0.0) {
        return Err(AutodiffError::InvalidArgument {
            op: "contrastive_loss",
            msg: format!("margin {margin} < 0"),
        });
    }
    let eye = g.constant(Tensor::new(
        vec![b, b],
        (0..b * b)
            .map(|k| if k / b == k % b { T::one() } else { T::zero() })
            .collect(),
    ));
    let blocked = g.constant(Tensor::new(
        vec![b, b],
        (0..b * b)
            .map(|k| {
                if k / b == k % b {
                    T::from_f64_lossy(-1e9)
                } else {
                    T::zero()
                }
            })
            .collect(),
    ));
    let diag = g.mul(sim, eye)?;
    let pos = g.sum(diag, 1)?;
    let neg = g.add(sim, blocked)?;
    let row_max = g.max(neg, 1)?;
    let col_max = g.max(neg, 0)?;
    let col_max = g.transpose(col_max)?;
    let mut total = None;
    for hardest in [row_max, col_max] {
        let d = g.sub(hardest, pos)?;
        let d = g.add_scalar(d, margin)?;
        let h = g.relu(d)?;
        total = Some(match total {
            None => h,
            Some(t) => g.add(t, h)?,
        });
    }
    let per_pair = total.expect("two directions");
    g.mean_all(per_pair)
}

/// Dense per-pair scores at every level, `[B_v][B_c]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreMatrices {
    pub event: Vec<Vec<f64>>,
    pub action: Vec<Vec<f64>>,
    pub entity: Vec<Vec<f64>>,
    pub fused: Vec<Vec<f64>>,
    /// Captions without entity nodes.
    pub entity_missing: Vec<bool>,
}

impl ScoreMatrices {
    pub fn level(&self, level: ScoreLevel) -> &Vec<Vec<f64>> {
        match level {
            ScoreLevel::Event => &self.event,
            ScoreLevel::Action => &self.action,
            ScoreLevel::Entity => &self.entity,
            ScoreLevel::Fusion => &self.fused,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoreLevel {
    Event,
    Action,
    Entity,
    Fusion,
}

impl ScoreLevel {
    pub const ALL: [ScoreLevel; 4] = [
        ScoreLevel::Event,
        ScoreLevel::Action,
        ScoreLevel::Entity,
        ScoreLevel::Fusion,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ScoreLevel::Event => "event",
            ScoreLevel::Action => "action",
            ScoreLevel::Entity => "entity",
            ScoreLevel::Fusion => "fusion",
        }
    }
}

/// Encoded captions as plain tensors, for scoring outside a training graph.
#[derive(Clone, Debug, PartialEq)]
pub struct TextEmbeddings {
    pub event: Tensor<f64>,
    pub actions: Tensor<f64>,
    pub action_offsets: Vec<usize>,
    /// `[0 × D]` when there are no entity nodes.
    pub entities: Tensor<f64>,
    pub entity_offsets: Vec<usize>,
}

/// Encoded videos as plain tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoEmbeddings {
    pub event: Tensor<f64>,
    pub actions: Tensor<f64>,
    pub entities: Tensor<f64>,
    pub frame_offsets: Vec<usize>,
}

fn take_rows(
    t: &Tensor<f64>,
    offsets: &[usize],
    items: std::ops::Range<usize>,
) -> (Tensor<f64>, Vec<usize>) {
    let cols = t.cols();
    let (lo, hi) = (offsets[items.start], offsets[items.end]);
    let data = t.data()[lo * cols..hi * cols].to_vec();
    let offs = offsets[items.start..=items.end]
        .iter()
        .map(|o| o - lo)
        .collect();
    (Tensor::new(vec![hi - lo, cols], data), offs)
}

fn event_rows(t: &Tensor<f64>, items: std::ops::Range<usize>) -> Tensor<f64> {
    let cols = t.cols();
    Tensor::new(
        vec![items.len(), cols],
        t.data()[items.start * cols..items.end * cols].to_vec(),
    )
}

fn to_tensor<T: Real>(t: &Tensor<T>) -> Tensor<f64> {
    t.cast()
}

impl TextEmbeddings {
    pub fn len(&self) -> usize {
        self.action_offsets.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn from_batch<T: Real>(g: &Graph<'_, T>, b: &TextBatch) -> Self {
        let d = g.shape(b.event)[1];
        TextEmbeddings {
            event: to_tensor(g.value(b.event)),
            actions: to_tensor(g.value(b.actions)),
            action_offsets: b.action_offsets.clone(),
            entities: b
                .entities
                .map_or_else(|| Tensor::zeros(vec![0, d]), |e| to_tensor(g.value(e))),
            entity_offsets: b.entity_offsets.clone(),
        }
    }

    /// Captions `items` as a standalone set.
    pub fn slice(&self, items: std::ops::Range<usize>) -> Self {
        let (actions, action_offsets) =
            take_rows(&self.actions, &self.action_offsets, items.clone());
        let (entities, entity_offsets) =
            take_rows(&self.entities, &self.entity_offsets, items.clone());
        TextEmbeddings {
            event: event_rows(&self.event, items),
            actions,
            action_offsets,
            entities,
            entity_offsets,
        }
    }

    /// Concatenates sets encoded separately.
    pub fn concat(parts: &[TextEmbeddings]) -> Self {
        let d = parts[0].event.cols();
        let cat = |f: &dyn Fn(&TextEmbeddings) -> (&Tensor<f64>, Option<&Vec<usize>>)| {
            let mut data = Vec::new();
            let mut offs = vec![0];
            let mut rows = 0;
            for p in parts {
                let (t, o) = f(p);
                data.extend_from_slice(t.data());
                if let Some(o) = o {
                    offs.extend(o[1..].iter().map(|x| x + rows));
                }
                rows += t.rows();
            }
            (Tensor::new(vec![rows, d], data), offs)
        };
        let (event, _) = cat(&|p| (&p.event, None));
        let (actions, action_offsets) = cat(&|p| (&p.actions, Some(&p.action_offsets)));
        let (entities, entity_offsets) = cat(&|p| (&p.entities, Some(&p.entity_offsets)));
        TextEmbeddings {
            event,
            actions,
            action_offsets,
            entities,
            entity_offsets,
        }
    }

    pub fn side<'p, T: Real>(&self, g: &mut Graph<'p, T>) -> TextSide {
        TextSide {
            event: g.constant(self.event.cast()),
            actions: g.constant(self.actions.cast()),
            action_offsets: self.action_offsets.clone(),
            entities: (self.entities.rows() > 0).then(|| g.constant(self.entities.cast())),
            entity_offsets: self.entity_offsets.clone(),
        }
    }
}

impl VideoEmbeddings {
    pub fn len(&self) -> usize {
        self.frame_offsets.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn from_batch<T: Real>(g: &Graph<'_, T>, b: &VideoBatch) -> Self {
        VideoEmbeddings {
            event: to_tensor(g.value(b.event)),
            actions: to_tensor(g.value(b.actions)),
            entities: to_tensor(g.value(b.entities)),
            frame_offsets: b.frame_offsets.clone(),
        }
    }

    pub fn slice(&self, items: std::ops::Range<usize>) -> Self {
        let (actions, frame_offsets) = take_rows(&self.actions, &self.frame_offsets, items.clone());
        let (entities, _) = take_rows(&self.entities, &self.frame_offsets, items.clone());
        VideoEmbeddings {
            event: event_rows(&self.event, items),
            actions,
            entities,
            frame_offsets,
        }
    }

    pub fn concat(parts: &[VideoEmbeddings]) -> Self {
        let d = parts[0].event.cols();
        let mut ev = Vec::new();
        let mut ac = Vec::new();
        let mut en = Vec::new();
        let mut offs = vec![0];
        for p in parts {
            let base = *offs.last().unwrap();
            ev.extend_from_slice(p.event.data());
            ac.extend_from_slice(p.actions.data());
            en.extend_from_slice(p.entities.data());
            offs.extend(p.frame_offsets[1..].iter().map(|x| x + base));
        }
        let frames = *offs.last().unwrap();
        VideoEmbeddings {
            event: Tensor::new(vec![ev.len() / d, d], ev),
            actions: Tensor::new(vec![frames, d], ac),
            entities: Tensor::new(vec![frames, d], en),
            frame_offsets: offs,
        }
    }

    pub fn side<'p, T: Real>(&self, g: &mut Graph<'p, T>) -> VideoSide {
        VideoSide {
            event: g.constant(self.event.cast()),
            actions: g.constant(self.actions.cast()),
            entities: g.constant(self.entities.cast()),
            frame_offsets: self.frame_offsets.clone(),
        }
    }
}

/// All-pairs scores in `f64`, computed in tiles of at most `tile` videos by
/// `tile` captions. Tiles run in parallel; each fills a disjoint block.
pub fn score_matrices(
    video: &VideoEmbeddings,
    text: &TextEmbeddings,
    cfg: &MatchConfig,
    tile: usize,
) -> Result<ScoreMatrices> {
    use rayon::prelude::*;
    let (bv, bc) = (video.len(), text.len());
    if bv == 0 || bc == 0 {
        return Err(AutodiffError::InvalidArgument {
            op: "score_matrices",
            msg: "empty gallery".into(),
        });
    }
    let tile = tile.max(1);
    let jobs: Vec<(usize, usize)> = (0..bv)
        .step_by(tile)
        .flat_map(|v| (0..bc).step_by(tile).map(move |c| (v, c)))
        .collect();
    let blocks: Vec<Result<[Tensor<f64>; 4]>> = jobs
        .par_iter()
        .map(|&(v0, c0)| {
            let vs = video.slice(v0..(v0 + tile).min(bv));
            let ts = text.slice(c0..(c0 + tile).min(bc));
            let mut g = Graph::<f64>::new();
            let vside = vs.side(&mut g);
            let tside = ts.side(&mut g);
            let s = batch_similarity(&mut g, &vside, &tside, cfg)?;
            Ok([s.event, s.action.score, s.entity.score, s.fused].map(|v| g.value(v).clone()))
        })
        .collect();
    let mut out = [(); 4].map(|_| vec![vec![0.0; bc]; bv]);
    for (&(v0, c0), block) in jobs.iter().zip(blocks) {
        for (level, t) in block?.iter().enumerate() {
            for r in 0..t.rows() {
                out[level][v0 + r][c0..c0 + t.cols()].copy_from_slice(t.row_slice(r));
            }
        }
    }
    let [event, action, entity, fused] = out;
    let entity_missing = (0..bc)
        .map(|c| text.entity_offsets[c] == text.entity_offsets[c + 1])
        .collect();
    Ok(ScoreMatrices {
        event,
        action,
        entity,
        fused,
        entity_missing,
    })
}

/// Node-by-frame similarities and attention for one level of one pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocalDiagnostics {
    pub sims: Vec<Vec<f64>>,
    pub phi: Vec<Vec<f64>>,
    pub score: f64,
}

/// Per-level breakdown of one (video, caption) pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimilarityBreakdown {
    pub s_event: f64,
    pub s_action: f64,
    pub s_entity: f64,
    pub s_fused: f64,
    pub entity_missing: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub action: Option<LocalDiagnostics>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub entity: Option<LocalDiagnostics>,
}

/// Scores one pair; with `diagnostics` also returns `s_ij` and `φ_ij`.
pub fn pair_breakdown(
    video: &VideoEmbeddings,
    v: usize,
    text: &TextEmbeddings,
    c: usize,
    cfg: &MatchConfig,
    diagnostics: bool,
) -> Result<SimilarityBreakdown> {
    let vs = video.slice(v..v + 1);
    let ts = text.slice(c..c + 1);
    let mut g = Graph::<f64>::new();
    let vside = vs.side(&mut g);
    let tside = ts.side(&mut g);
    let s = batch_similarity(&mut g, &vside, &tside, cfg)?;
    let diag = |l: &LocalScores| {
        let (sims, phi) = (l.sims?, l.phi?);
        Some(LocalDiagnostics {
            sims: g.value(sims).to_rows(),
            phi: g.value(phi).to_rows(),
            score: g.value(l.score).data()[0],
        })
    };
    Ok(SimilarityBreakdown {
        s_event: g.value(s.event).data()[0],
        s_action: g.value(s.action.score).data()[0],
        s_entity: g.value(s.entity.score).data()[0],
        s_fused: g.value(s.fused).data()[0],
        entity_missing: s.entity.empty[0],
        action: if diagnostics { diag(&s.action) } else { None },
        entity: if diagnostics { diag(&s.entity) } else { None },
    })
}
