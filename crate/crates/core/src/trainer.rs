//! Mini-batch training with hardest-negative ranking loss, Adam updates,
//! validation-based model selection and checkpoints.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AutodiffError, Graph, ParameterStore, Tensor};
use crate::config::{canonical_json, content_hash, AdamConfig, EvalConfig, TrainConfig};
use crate::dataset::Dataset;
use crate::eval::{caption_ids, evaluate, EvalError, EvalReport};
use crate::model::{HgrModel, ModelConfig};
use crate::text_encoder::{CaptionInput, Vocab, VocabError};
use crate::video_encoder::VideoError;

pub const CHECKPOINT_FORMAT: &str = "hgr-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;
const PARAMS_STEM: &str = "params";
const META_FILE: &str = "checkpoint.json";
const VOCAB_FILE: &str = "vocab.json";

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("non-finite loss {loss} at epoch {epoch}, batch {batch}; captions {captions:?}")]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        loss: f64,
        captions: Vec<String>,
    },
    #[error("non-finite gradient in `{param}` at index {index}")]
    NonFiniteGradient { param: String, index: usize },
    #[error("videos without features: {0:?}")]
    MissingFeatures(Vec<String>),
    #[error("training split has {pairs} caption pairs, fewer than the batch size {batch_size}")]
    TooFewPairs { pairs: usize, batch_size: usize },
    #[error(transparent)]
    Video(#[from] VideoError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

/// Scales every gradient so the global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut BTreeMap<String, Tensor<f32>>, max_norm: f64) -> f64 {
    let norm = grads
        .values()
        .flat_map(|t| t.data())
        .map(|&x| (x as f64) * (x as f64))
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = (max_norm / norm) as f32;
        for t in grads.values_mut() {
            for x in t.data_mut() {
                *x *= s;
            }
        }
    }
    norm
}

pub fn check_finite(grads: &BTreeMap<String, Tensor<f32>>) -> Result<(), TrainError> {
    for (name, t) in grads {
        if let Some(index) = t.data().iter().position(|x| !x.is_finite()) {
            return Err(TrainError::NonFiniteGradient {
                param: name.clone(),
                index,
            });
        }
    }
    Ok(())
}

/// Adaptive-moment optimizer with bias correction. Parameters without a
/// gradient in a step are left untouched.
#[derive(Clone, Debug)]
pub struct Adam {
    pub cfg: AdamConfig,
    step: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Adam {
            cfg,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step(
        &mut self,
        params: &mut ParameterStore<f32>,
        grads: &BTreeMap<String, Tensor<f32>>,
    ) -> Result<(), TrainError> {
        check_finite(grads)?;
        self.step += 1;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (name, g) in grads {
            let p = params
                .get_mut(name)
                .ok_or_else(|| AutodiffError::UnknownParameter(name.clone()))?;
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; g.len()]);
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; g.len()]);
            for (k, (x, &gk)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                let gk = gk as f64;
                m[k] = c.beta1 * m[k] + (1.0 - c.beta1) * gk;
                v[k] = c.beta2 * v[k] + (1.0 - c.beta2) * gk * gk;
                let upd = c.lr * (m[k] / bc1) / ((v[k] / bc2).sqrt() + c.eps);
                *x = (*x as f64 - upd) as f32;
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchLog {
    pub epoch: usize,
    pub batch: usize,
    pub loss: f64,
    pub lr: f64,
    /// Seconds since training started; `null` unless enabled.
    pub wallclock: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochSummary {
    pub epoch: usize,
    pub mean_loss: f64,
    pub val_rsum: f64,
    pub best: bool,
    pub validation: EvalReport,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub best_epoch: usize,
    pub best_params: ParameterStore<f32>,
    pub best_report: EvalReport,
    pub final_params: ParameterStore<f32>,
    pub final_report: EvalReport,
    pub epochs: Vec<EpochSummary>,
}

/// Trains on the captions of `ds.splits.train` and selects the epoch with
/// the highest validation rsum (first wins ties). With an empty validation
/// split, selection uses the training split.
pub fn train(
    model: &HgrModel,
    mut params: ParameterStore<f32>,
    tc: &TrainConfig,
    ec: &EvalConfig,
    ds: &Dataset,
    vocab: &Vocab,
    mut on_batch: impl FnMut(&BatchLog),
    mut on_epoch: impl FnMut(&EpochSummary),
) -> Result<TrainOutcome, TrainError> {
    let vidx = ds.video_index();
    let mut missing: Vec<String> = ds
        .splits
        .train
        .iter()
        .chain(&ds.splits.val)
        .filter(|id| !vidx.contains_key(id.as_str()))
        .cloned()
        .collect();
    let train_caps = ds.caption_indices(&ds.splits.train);
    missing.extend(
        train_caps
            .iter()
            .map(|&c| &ds.captions[c].video_id)
            .filter(|id| !vidx.contains_key(id.as_str()))
            .cloned(),
    );
    if !missing.is_empty() {
        missing.sort();
        missing.dedup();
        return Err(TrainError::MissingFeatures(missing));
    }
    if train_caps.len() < tc.batch_size {
        return Err(TrainError::TooFewPairs {
            pairs: train_caps.len(),
            batch_size: tc.batch_size,
        });
    }
    let prepared: Vec<Tensor<f32>> = ds
        .videos
        .iter()
        .map(|v| model.video.prepare::<f32>(&v.video_id, &v.frames))
        .collect::<Result<_, _>>()?;
    let ids: Vec<Vec<usize>> = ds.captions.iter().map(|c| caption_ids(vocab, c)).collect();
    let select_on = if ds.splits.val.is_empty() {
        &ds.splits.train
    } else {
        &ds.splits.val
    };

    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed);
    let mut opt = Adam::new(tc.optimizer);
    let start = Instant::now();
    let mut order = train_caps.clone();
    let mut best: Option<(usize, ParameterStore<f32>, EvalReport)> = None;
    let mut epochs = Vec::new();
    let mut last_report = None;
    for epoch in 1..=tc.epochs {
        order.shuffle(&mut rng);
        let mut losses = Vec::new();
        for (b, chunk) in order.chunks_exact(tc.batch_size).enumerate() {
            let batch = b + 1;
            let videos: Vec<Tensor<f32>> = chunk
                .iter()
                .map(|&c| prepared[vidx[ds.captions[c].video_id.as_str()]].clone())
                .collect();
            let caps: Vec<CaptionInput> = chunk
                .iter()
                .map(|&c| CaptionInput {
                    graph: &ds.captions[c].graph,
                    ids: &ids[c],
                })
                .collect();
            let (loss, mut grads) = {
                let mut g = Graph::with_params(&params);
                let (loss, _) = model.loss(&mut g, videos, &caps, tc.margin)?;
                let value = g.scalar(loss) as f64;
                if !value.is_finite() {
                    return Err(TrainError::NonFiniteLoss {
                        epoch,
                        batch,
                        loss: value,
                        captions: chunk
                            .iter()
                            .map(|&c| ds.captions[c].caption_id.clone())
                            .collect(),
                    });
                }
                (value, g.backward(loss)?.into_params())
            };
            check_finite(&grads)?;
            clip_global_norm(&mut grads, tc.clip_norm);
            opt.step(&mut params, &grads)?;
            losses.push(loss);
            let wallclock = tc.log_wallclock.then(|| start.elapsed().as_secs_f64());
            on_batch(&BatchLog {
                epoch,
                batch,
                loss,
                lr: tc.optimizer.lr,
                wallclock,
            });
        }
        let report = evaluate(model, &params, vocab, ds, select_on, ec)?;
        let improved = best.as_ref().is_none_or(|(_, _, r)| report.rsum > r.rsum);
        if improved {
            best = Some((epoch, params.clone(), report.clone()));
        }
        let summary = EpochSummary {
            epoch,
            mean_loss: losses.iter().sum::<f64>() / losses.len().max(1) as f64,
            val_rsum: report.rsum,
            best: improved,
            validation: report.clone(),
        };
        on_epoch(&summary);
        epochs.push(summary);
        last_report = Some(report);
    }
    let final_report = match last_report {
        Some(r) => r,
        None => evaluate(model, &params, vocab, ds, select_on, ec)?,
    };
    let (best_epoch, best_params, best_report) =
        best.unwrap_or((0, params.clone(), final_report.clone()));
    Ok(TrainOutcome {
        best_epoch,
        best_params,
        best_report,
        final_params: params,
        final_report,
        epochs,
    })
}

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("checkpoint was written for configuration {found}, current configuration hashes to {expected}; pass the override flag to load anyway")]
    HashMismatch { expected: String, found: String },
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

impl From<AutodiffError> for CheckpointError {
    fn from(e: AutodiffError) -> Self {
        match e {
            AutodiffError::Io(source) => CheckpointError::Io {
                path: "params".into(),
                source,
            },
            other => CheckpointError::Corrupt(other.to_string()),
        }
    }
}

impl From<VocabError> for CheckpointError {
    fn from(e: VocabError) -> Self {
        match e {
            VocabError::Io(source) => CheckpointError::Io {
                path: VOCAB_FILE.into(),
                source,
            },
            other => CheckpointError::Corrupt(other.to_string()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub format: String,
    pub version: u32,
    pub epoch: usize,
    /// Hash of the canonical model configuration.
    pub config_hash: String,
    pub model: ModelConfig,
    pub validation: EvalReport,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub params: ParameterStore<f32>,
    pub vocab: Vocab,
}

impl Checkpoint {
    pub fn new(
        model: &ModelConfig,
        epoch: usize,
        validation: EvalReport,
        params: ParameterStore<f32>,
        vocab: Vocab,
    ) -> Self {
        let meta = CheckpointMeta {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            epoch,
            config_hash: content_hash(model),
            model: model.clone(),
            validation,
        };
        Checkpoint {
            meta,
            params,
            vocab,
        }
    }

    /// Writes `params.json`, `params.bin`, `checkpoint.json` and `vocab.json`.
    pub fn save(&self, dir: &Path) -> Result<(), CheckpointError> {
        fs::create_dir_all(dir).map_err(|source| CheckpointError::Io {
            path: dir.display().to_string(),
            source,
        })?;
        self.params.save(dir, PARAMS_STEM)?;
        let meta = dir.join(META_FILE);
        fs::write(&meta, canonical_json(&self.meta)).map_err(|source| CheckpointError::Io {
            path: meta.display().to_string(),
            source,
        })?;
        self.vocab.save(&dir.join(VOCAB_FILE))?;
        Ok(())
    }

    /// Loads and checks format, integrity and, when `expected` is given, that
    /// the model configuration matches unless `allow_mismatch`.
    pub fn load(
        dir: &Path,
        expected: Option<&ModelConfig>,
        allow_mismatch: bool,
    ) -> Result<Self, CheckpointError> {
        let mpath = dir.join(META_FILE);
        let text = fs::read_to_string(&mpath).map_err(|source| CheckpointError::Io {
            path: mpath.display().to_string(),
            source,
        })?;
        let meta: CheckpointMeta = serde_json::from_str(&text)
            .map_err(|e| CheckpointError::Corrupt(format!("{META_FILE}: {e}")))?;
        if meta.format != CHECKPOINT_FORMAT || meta.version != CHECKPOINT_VERSION {
            return Err(CheckpointError::Corrupt(format!(
                "unsupported format {} version {}",
                meta.format, meta.version
            )));
        }
        if content_hash(&meta.model) != meta.config_hash {
            return Err(CheckpointError::Corrupt(
                "stored model configuration does not match its hash".into(),
            ));
        }
        if let Some(cfg) = expected {
            let want = content_hash(cfg);
            if want != meta.config_hash && !allow_mismatch {
                return Err(CheckpointError::HashMismatch {
                    expected: want,
                    found: meta.config_hash,
                });
            }
        }
        let params = ParameterStore::<f32>::load(dir, PARAMS_STEM)?;
        let vocab = Vocab::load(&dir.join(VOCAB_FILE))?;
        if vocab.len() != meta.model.vocab_size {
            return Err(CheckpointError::Corrupt(format!(
                "vocabulary has {} entries, model expects {}",
                vocab.len(),
                meta.model.vocab_size
            )));
        }
        let model = HgrModel::new(meta.model.clone()).map_err(CheckpointError::Corrupt)?;
        let fresh = model
            .init_params::<f32>(0)
            .map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
        for (name, t) in fresh.iter() {
            match params.get(name) {
                Some(p) if p.shape() == t.shape() => {}
                Some(p) => {
                    return Err(CheckpointError::Corrupt(format!(
                        "`{name}` has shape {:?}, expected {:?}",
                        p.shape(),
                        t.shape()
                    )))
                }
                None => {
                    return Err(CheckpointError::Corrupt(format!(
                        "missing parameter `{name}`"
                    )))
                }
            }
        }
        Ok(Checkpoint {
            meta,
            params,
            vocab,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(vals: &[f32]) -> ParameterStore<f32> {
        let mut s = ParameterStore::new(0);
        s.insert("w", Tensor::new(vec![vals.len()], vals.to_vec()))
            .unwrap();
        s
    }

    fn grads(vals: &[f32]) -> BTreeMap<String, Tensor<f32>> {
        [(
            "w".to_string(),
            Tensor::new(vec![vals.len()], vals.to_vec()),
        )]
        .into()
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut p = store(&[1.0, -2.0]);
        let mut a = Adam::new(AdamConfig::default());
        a.step(&mut p, &grads(&[0.0, 0.0])).unwrap();
        assert_eq!(p.get("w").unwrap().data(), &[1.0, -2.0]);
    }

    #[test]
    fn constant_gradient_steps_are_bounded_by_lr() {
        let cfg = AdamConfig {
            lr: 0.01,
            ..AdamConfig::default()
        };
        let mut p = store(&[0.0]);
        let mut a = Adam::new(cfg);
        let mut prev = 0.0f32;
        for _ in 0..100 {
            a.step(&mut p, &grads(&[123.0])).unwrap();
            let now = p.get("w").unwrap().data()[0];
            assert!(((prev - now) as f64) <= cfg.lr * (1.0 + 1e-4));
            prev = now;
        }
    }

    #[test]
    fn clipping_scales_to_threshold() {
        let mut g = grads(&[12.0, 16.0]);
        let n = clip_global_norm(&mut g, 2.0);
        assert_eq!(n, 20.0);
        let d = g["w"].data();
        assert!((d[0] - 1.2).abs() < 1e-6 && (d[1] - 1.6).abs() < 1e-6);
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut p = store(&[0.0, 0.0]);
        let e = Adam::new(AdamConfig::default())
            .step(&mut p, &grads(&[0.0, f32::NAN]))
            .unwrap_err();
        assert_eq!(e.to_string(), "non-finite gradient in `w` at index 1");
    }
}
