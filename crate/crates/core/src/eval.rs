//! Retrieval ranking and metrics in both directions, per-level breakdowns,
//! cross-dataset evaluation and the binary selection task.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::autodiff::{AutodiffError, ParameterStore, Real, Tensor};
use crate::config::EvalConfig;
use crate::dataset::{Caption, Dataset, Triplet};
use crate::matching::{pair_breakdown, score_matrices, ScoreLevel, ScoreMatrices};
use crate::model::HgrModel;
use crate::synth::PerturbKind;
use crate::text_encoder::{CaptionInput, Vocab};
use crate::video_encoder::VideoError;

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("query {0} has no ground-truth item")]
    NoGroundTruth(usize),
    #[error("ground-truth index {index} of query {query} is outside the gallery of {len}")]
    GroundTruthRange {
        query: usize,
        index: usize,
        len: usize,
    },
    #[error("cannot compute metrics from an empty rank list")]
    Empty,
    #[error("unknown video `{0}`")]
    UnknownVideo(String),
    #[error(transparent)]
    Video(#[from] VideoError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    TextToVideo,
    VideoToText,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankingReport {
    pub direction: Direction,
    pub queries: usize,
    pub r1: f64,
    pub r5: f64,
    pub r10: f64,
    pub medr: f64,
    pub mnr: f64,
    /// `R@1 + R@5 + R@10` for this direction.
    pub rsum: f64,
}

/// 1-based rank of the best-ranked ground-truth item. Items are ordered by
/// descending score with ties broken by ascending index.
pub fn rank_of(scores: &[f64], gt: &[usize]) -> Option<usize> {
    gt.iter()
        .map(|&g| {
            let s = scores[g];
            1 + scores
                .iter()
                .enumerate()
                .filter(|&(k, &x)| x > s || (x == s && k < g))
                .count()
        })
        .min()
}

/// Ranks for every query row of `sim` (`[queries × gallery]`).
pub fn rank_gallery(sim: &[Vec<f64>], gt: &[Vec<usize>]) -> Result<Vec<usize>, EvalError> {
    sim.iter()
        .zip(gt)
        .enumerate()
        .map(|(q, (row, g))| {
            if let Some(&index) = g.iter().find(|&&i| i >= row.len()) {
                return Err(EvalError::GroundTruthRange {
                    query: q,
                    index,
                    len: row.len(),
                });
            }
            rank_of(row, g).ok_or(EvalError::NoGroundTruth(q))
        })
        .collect()
}

pub fn compute_metrics(direction: Direction, ranks: &[usize]) -> Result<RankingReport, EvalError> {
    if ranks.is_empty() {
        return Err(EvalError::Empty);
    }
    let n = ranks.len() as f64;
    let recall = |k: usize| 100.0 * ranks.iter().filter(|&&r| r <= k).count() as f64 / n;
    let mut sorted = ranks.to_vec();
    sorted.sort_unstable();
    let mid = sorted.len() / 2;
    let medr = if sorted.len() % 2 == 1 {
        sorted[mid] as f64
    } else {
        (sorted[mid - 1] + sorted[mid]) as f64 / 2.0
    };
    let mnr = ranks.iter().sum::<usize>() as f64 / n;
    let (r1, r5, r10) = (recall(1), recall(5), recall(10));
    Ok(RankingReport {
        direction,
        queries: ranks.len(),
        r1,
        r5,
        r10,
        medr,
        mnr,
        rsum: r1 + r5 + r10,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LevelReport {
    pub level: ScoreLevel,
    pub t2v: RankingReport,
    pub v2t: RankingReport,
    /// Sum over both directions.
    pub rsum: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub videos: usize,
    pub captions: usize,
    pub t2v: RankingReport,
    pub v2t: RankingReport,
    /// Sum of the six recall values.
    pub rsum: f64,
    /// Rows for event, action, entity and fusion scores.
    pub per_level: Vec<LevelReport>,
}

impl EvalReport {
    pub fn level(&self, level: ScoreLevel) -> &LevelReport {
        self.per_level
            .iter()
            .find(|r| r.level == level)
            .expect("every level is reported")
    }
}

fn level_report(
    sim: &[Vec<f64>],
    caption_video: &[usize],
    level: ScoreLevel,
) -> Result<LevelReport, EvalError> {
    let (nv, nc) = (sim.len(), caption_video.len());
    let t2v_sim: Vec<Vec<f64>> = (0..nc)
        .map(|c| (0..nv).map(|v| sim[v][c]).collect())
        .collect();
    let t2v_gt: Vec<Vec<usize>> = caption_video.iter().map(|&v| vec![v]).collect();
    let mut v2t_gt = vec![Vec::new(); nv];
    for (c, &v) in caption_video.iter().enumerate() {
        v2t_gt[v].push(c);
    }
    let t2v = compute_metrics(Direction::TextToVideo, &rank_gallery(&t2v_sim, &t2v_gt)?)?;
    let v2t = compute_metrics(Direction::VideoToText, &rank_gallery(sim, &v2t_gt)?)?;
    Ok(LevelReport {
        level,
        rsum: t2v.rsum + v2t.rsum,
        t2v,
        v2t,
    })
}

/// Metrics from precomputed scores; `caption_video[c]` is the gallery row of
/// caption `c`'s video.
pub fn evaluate_scores(
    scores: &ScoreMatrices,
    caption_video: &[usize],
) -> Result<EvalReport, EvalError> {
    let per_level = ScoreLevel::ALL
        .iter()
        .map(|&l| level_report(scores.level(l), caption_video, l))
        .collect::<Result<Vec<_>, _>>()?;
    let fused = per_level.last().expect("fusion row").clone();
    Ok(EvalReport {
        videos: scores.fused.len(),
        captions: caption_video.len(),
        t2v: fused.t2v,
        v2t: fused.v2t,
        rsum: fused.rsum,
        per_level,
    })
}

/// Token ids through the vocabulary; unknown tokens map to the OOV id.
pub fn caption_ids(vocab: &Vocab, c: &Caption) -> Vec<usize> {
    vocab.ids(&c.graph.tokens)
}

/// Scores every (video, caption) pair among `video_ids` and the captions
/// attached to them.
pub fn score_split<T: Real>(
    model: &HgrModel,
    params: &ParameterStore<T>,
    vocab: &Vocab,
    ds: &Dataset,
    video_ids: &[String],
    cfg: &EvalConfig,
) -> Result<(ScoreMatrices, Vec<usize>), EvalError> {
    let vidx = ds.video_index();
    let mut videos = Vec::with_capacity(video_ids.len());
    let mut row = HashMap::new();
    for (r, id) in video_ids.iter().enumerate() {
        let &i = vidx
            .get(id.as_str())
            .ok_or_else(|| EvalError::UnknownVideo(id.clone()))?;
        videos.push((ds.videos[i].video_id.as_str(), &ds.videos[i].frames));
        row.insert(id.as_str(), r);
    }
    let caps: Vec<&Caption> = ds
        .captions
        .iter()
        .filter(|c| row.contains_key(c.video_id.as_str()))
        .collect();
    let ids: Vec<Vec<usize>> = caps.iter().map(|c| caption_ids(vocab, c)).collect();
    let inputs: Vec<CaptionInput> = caps
        .iter()
        .zip(&ids)
        .map(|(c, ids)| CaptionInput {
            graph: &c.graph,
            ids,
        })
        .collect();
    let caption_video = caps.iter().map(|c| row[c.video_id.as_str()]).collect();
    let v = model.encode_videos(params, &videos, cfg.chunk)?;
    let t = model.encode_texts(params, &inputs, cfg.chunk)?;
    let scores = score_matrices(&v, &t, &model.cfg.matching, cfg.tile)?;
    Ok((scores, caption_video))
}

/// Standard evaluation over a split of `ds`.
pub fn evaluate<T: Real>(
    model: &HgrModel,
    params: &ParameterStore<T>,
    vocab: &Vocab,
    ds: &Dataset,
    video_ids: &[String],
    cfg: &EvalConfig,
) -> Result<EvalReport, EvalError> {
    let (scores, caption_video) = score_split(model, params, vocab, ds, video_ids, cfg)?;
    evaluate_scores(&scores, &caption_video)
}

/// Evaluates a trained model on another dataset without updating anything.
/// Foreign tokens go through the training vocabulary; the feature width
/// must match the model.
pub fn cross_dataset_eval<T: Real>(
    model: &HgrModel,
    params: &ParameterStore<T>,
    vocab: &Vocab,
    foreign: &Dataset,
    video_ids: &[String],
    cfg: &EvalConfig,
) -> Result<EvalReport, EvalError> {
    if let Some(v) = foreign.videos.first() {
        if v.frames.cols() != model.cfg.feature_dim {
            return Err(VideoError::Width {
                video: v.video_id.clone(),
                expected: model.cfg.feature_dim,
                actual: v.frames.cols(),
            }
            .into());
        }
    }
    evaluate(model, params, vocab, foreign, video_ids, cfg)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub video_id: String,
    pub kind: PerturbKind,
    pub positive_score: f64,
    pub negative_score: f64,
    /// Positive minus negative fused score.
    pub margin: f64,
    /// Strictly higher positive score; ties count as wrong.
    pub correct: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct KindAccuracy {
    pub triplets: usize,
    pub correct: usize,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinarySelectionReport {
    pub per_kind: BTreeMap<PerturbKind, KindAccuracy>,
    /// Unweighted mean over kinds with at least one triplet.
    pub average_uniform: f64,
    /// Accuracy over all triplets pooled.
    pub average_weighted: f64,
    pub selections: Vec<Selection>,
}

pub fn summarize_selections(selections: Vec<Selection>) -> BinarySelectionReport {
    let mut per_kind: BTreeMap<PerturbKind, KindAccuracy> = PerturbKind::ALL
        .iter()
        .map(|&k| (k, KindAccuracy::default()))
        .collect();
    for s in &selections {
        let k = per_kind.get_mut(&s.kind).expect("every kind present");
        k.triplets += 1;
        k.correct += usize::from(s.correct);
    }
    for k in per_kind.values_mut() {
        k.accuracy = if k.triplets == 0 {
            0.0
        } else {
            100.0 * k.correct as f64 / k.triplets as f64
        };
    }
    let used: Vec<&KindAccuracy> = per_kind.values().filter(|k| k.triplets > 0).collect();
    let average_uniform = if used.is_empty() {
        0.0
    } else {
        used.iter().map(|k| k.accuracy).sum::<f64>() / used.len() as f64
    };
    let total: usize = used.iter().map(|k| k.triplets).sum();
    let correct: usize = used.iter().map(|k| k.correct).sum();
    let average_weighted = if total == 0 {
        0.0
    } else {
        100.0 * correct as f64 / total as f64
    };
    BinarySelectionReport {
        per_kind,
        average_uniform,
        average_weighted,
        selections,
    }
}

/// Chooses, for each triplet's video, the caption with the higher fused score.
pub fn binary_select<T: Real>(
    model: &HgrModel,
    params: &ParameterStore<T>,
    vocab: &Vocab,
    ds: &Dataset,
    triplets: &[Triplet],
    cfg: &EvalConfig,
) -> Result<BinarySelectionReport, EvalError> {
    let mut vids: Vec<String> = triplets.iter().map(|t| t.video_id.clone()).collect();
    vids.sort();
    vids.dedup();
    let vidx = ds.video_index();
    let mut frames = Vec::with_capacity(vids.len());
    for id in &vids {
        let &i = vidx
            .get(id.as_str())
            .ok_or_else(|| EvalError::UnknownVideo(id.clone()))?;
        frames.push((ds.videos[i].video_id.as_str(), &ds.videos[i].frames));
    }
    let row: HashMap<&str, usize> = vids
        .iter()
        .enumerate()
        .map(|(r, id)| (id.as_str(), r))
        .collect();
    let caps: Vec<&Caption> = triplets
        .iter()
        .flat_map(|t| [&t.positive, &t.negative])
        .collect();
    let ids: Vec<Vec<usize>> = caps.iter().map(|c| caption_ids(vocab, c)).collect();
    let inputs: Vec<CaptionInput> = caps
        .iter()
        .zip(&ids)
        .map(|(c, ids)| CaptionInput {
            graph: &c.graph,
            ids,
        })
        .collect();
    let v = model.encode_videos(params, &frames, cfg.chunk)?;
    let t = model.encode_texts(params, &inputs, cfg.chunk)?;
    let mut selections = Vec::with_capacity(triplets.len());
    for (k, tr) in triplets.iter().enumerate() {
        let r = row[tr.video_id.as_str()];
        let pos = pair_breakdown(&v, r, &t, 2 * k, &model.cfg.matching, false)?.s_fused;
        let neg = pair_breakdown(&v, r, &t, 2 * k + 1, &model.cfg.matching, false)?.s_fused;
        selections.push(Selection {
            video_id: tr.video_id.clone(),
            kind: tr.kind,
            positive_score: pos,
            negative_score: neg,
            margin: pos - neg,
            correct: pos > neg,
        });
    }
    Ok(summarize_selections(selections))
}

/// Ranked gallery entries for one caption query.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalHit {
    pub rank: usize,
    pub video_id: String,
    pub s_event: f64,
    pub s_action: f64,
    pub s_entity: f64,
    pub s_fused: f64,
}

/// Top-`k` videos for an ad-hoc caption, with per-level scores.
pub fn retrieve<T: Real>(
    model: &HgrModel,
    params: &ParameterStore<T>,
    vocab: &Vocab,
    query: &Caption,
    videos: &[(&str, &Tensor<f32>)],
    k: usize,
    cfg: &EvalConfig,
) -> Result<Vec<RetrievalHit>, EvalError> {
    let ids = caption_ids(vocab, query);
    let t = model.encode_texts(
        params,
        &[CaptionInput {
            graph: &query.graph,
            ids: &ids,
        }],
        1,
    )?;
    let v = model.encode_videos(params, videos, cfg.chunk)?;
    let s = score_matrices(&v, &t, &model.cfg.matching, cfg.tile)?;
    let mut order: Vec<usize> = (0..videos.len()).collect();
    order.sort_by(|&a, &b| s.fused[b][0].total_cmp(&s.fused[a][0]).then(a.cmp(&b)));
    Ok(order
        .into_iter()
        .take(k)
        .enumerate()
        .map(|(r, i)| RetrievalHit {
            rank: r + 1,
            video_id: videos[i].0.to_string(),
            s_event: s.event[i][0],
            s_action: s.action[i][0],
            s_entity: s.entity[i][0],
            s_fused: s.fused[i][0],
        })
        .collect())
}

fn fmt_row(label: &str, r: &RankingReport) -> String {
    format!(
        "{label:<8} {:>7.2} {:>7.2} {:>7.2} {:>7.1} {:>8.2}",
        r.r1, r.r5, r.r10, r.medr, r.mnr
    )
}

/// Aligned-column text table; with `per_level` one block per score level.
pub fn render_eval_text(rep: &EvalReport, per_level: bool) -> String {
    let mut s = String::new();
    let rows: Vec<&LevelReport> = if per_level {
        rep.per_level.iter().collect()
    } else {
        vec![rep.level(ScoreLevel::Fusion)]
    };
    let _ = writeln!(s, "{} videos, {} captions", rep.videos, rep.captions);
    let _ = writeln!(
        s,
        "{:<8} | {:<8} {:>7} {:>7} {:>7} {:>7} {:>8} | {:<8} {:>7} {:>7} {:>7} {:>7} {:>8} | {:>7}",
        "level",
        "t2v",
        "R@1",
        "R@5",
        "R@10",
        "MedR",
        "MnR",
        "v2t",
        "R@1",
        "R@5",
        "R@10",
        "MedR",
        "MnR",
        "rsum"
    );
    for r in rows {
        let _ = writeln!(
            s,
            "{:<8} | {} | {} | {:>7.2}",
            r.level.as_str(),
            fmt_row("", &r.t2v),
            fmt_row("", &r.v2t),
            r.rsum
        );
    }
    s
}

pub fn render_eval_csv(rep: &EvalReport) -> String {
    let mut s = String::from("level,direction,r1,r5,r10,medr,mnr,rsum\n");
    for r in &rep.per_level {
        for (d, m) in [("t2v", &r.t2v), ("v2t", &r.v2t)] {
            let _ = writeln!(
                s,
                "{},{d},{},{},{},{},{},{}",
                r.level.as_str(),
                m.r1,
                m.r5,
                m.r10,
                m.medr,
                m.mnr,
                m.rsum
            );
        }
    }
    s
}

pub fn render_selection_text(rep: &BinarySelectionReport) -> String {
    let mut s = format!(
        "{:<18} {:>8} {:>8} {:>9}\n",
        "task", "triplets", "correct", "accuracy"
    );
    for (k, a) in &rep.per_kind {
        let _ = writeln!(
            s,
            "{:<18} {:>8} {:>8} {:>8.2}%",
            k.as_str(),
            a.triplets,
            a.correct,
            a.accuracy
        );
    }
    let _ = writeln!(
        s,
        "{:<18} {:>8} {:>8} {:>8.2}%",
        "average (uniform)", "", "", rep.average_uniform
    );
    let _ = writeln!(
        s,
        "{:<18} {:>8} {:>8} {:>8.2}%",
        "average (pooled)", "", "", rep.average_weighted
    );
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tie_break_example() {
        assert_eq!(rank_of(&[0.2, 0.9, 0.9], &[2]), Some(2));
        assert_eq!(rank_of(&[0.2, 0.9, 0.9], &[1]), Some(1));
        assert_eq!(rank_of(&[0.5], &[0]), Some(1));
        assert_eq!(rank_of(&[0.1, 0.3, 0.2], &[0, 2]), Some(2));
    }

    #[test]
    fn metric_examples() {
        let r = compute_metrics(Direction::TextToVideo, &[1, 3, 7]).unwrap();
        assert_eq!(r.medr, 3.0);
        assert_eq!(r.mnr, 11.0 / 3.0);
        assert!((r.r1 - 100.0 / 3.0).abs() < 1e-12);
        assert_eq!(
            compute_metrics(Direction::VideoToText, &[2, 4])
                .unwrap()
                .medr,
            3.0
        );
        assert!(matches!(
            compute_metrics(Direction::VideoToText, &[]),
            Err(EvalError::Empty)
        ));
    }

    #[test]
    fn missing_ground_truth_is_an_error() {
        assert!(matches!(
            rank_gallery(&[vec![0.1, 0.2]], &[vec![]]),
            Err(EvalError::NoGroundTruth(0))
        ));
        assert!(rank_gallery(&[vec![0.1, 0.2]], &[vec![2]]).is_err());
    }

    #[test]
    fn selection_ties_are_wrong_and_averages_are_labelled() {
        let sel = |kind, pos: f64, neg: f64| Selection {
            video_id: "v".into(),
            kind,
            positive_score: pos,
            negative_score: neg,
            margin: pos - neg,
            correct: pos > neg,
        };
        let rep = summarize_selections(vec![
            sel(PerturbKind::SwitchRoles, 0.5, 0.5),
            sel(PerturbKind::SwitchRoles, 0.6, 0.5),
            sel(PerturbKind::ReplaceScenes, 0.6, 0.5),
        ]);
        assert_eq!(rep.per_kind[&PerturbKind::SwitchRoles].accuracy, 50.0);
        assert_eq!(rep.average_uniform, 75.0);
        assert!((rep.average_weighted - 200.0 / 3.0).abs() < 1e-12);
    }
}
