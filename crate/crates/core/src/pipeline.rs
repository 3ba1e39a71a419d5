//! End-to-end assembly of data, model, training runs and their artifacts.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::autodiff::{grad_check_where, AutodiffError, GradCheckReport, Graph, Real, Tensor};
use crate::config::{canonical_json, ConfigError, DataMode, ExperimentConfig};
use crate::dataset::{
    benchmark_records, load_and_validate, read_benchmark, resolve_data_path, write_benchmark,
    Caption, Dataset, DatasetError, Triplet, BENCHMARK_FILE, FEATURES_MANIFEST, VOCAB_FILE,
    WORLD_FILE,
};
use crate::eval::{caption_ids, EvalError, EvalReport};
use crate::matching::{batch_similarity, contrastive_loss, TextSide, VideoSide};
use crate::model::{HgrModel, ModelConfig};
use crate::semantic_graph::{build_graph, parse_caption};
use crate::synth::{
    build_binary_benchmark, generate_world, SynthError, SyntheticDataset, SyntheticGrammar,
    WorldConfig,
};
use crate::text_encoder::{is_sequence_param, CaptionInput, Vocab, VocabError};
use crate::trainer::{
    train, BatchLog, Checkpoint, CheckpointError, EpochSummary, TrainError, TrainOutcome,
};
use crate::video_encoder::VideoError;

pub const RUN_CONFIG: &str = "config.json";
pub const BATCH_LOG: &str = "train_log.jsonl";
pub const EPOCH_LOG: &str = "epochs.jsonl";
pub const BEST_DIR: &str = "best";
pub const FINAL_DIR: &str = "final";

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Vocab(#[from] VocabError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Video(#[from] VideoError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{0}")]
    Invalid(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// A dataset with its vocabulary and, for generated data, the world it came from.
#[derive(Clone, Debug)]
pub struct LoadedData {
    pub ds: Dataset,
    pub vocab: Vocab,
    pub world: Option<SyntheticDataset>,
    /// Directory the data was read from; `None` when generated in memory.
    pub dir: Option<PathBuf>,
}

impl LoadedData {
    pub fn from_world(world: SyntheticDataset) -> Self {
        let ds = Dataset::from_synthetic(&world);
        let vocab = ds.build_vocab(&ds.caption_indices(&ds.splits.train));
        LoadedData {
            ds,
            vocab,
            world: Some(world),
            dir: None,
        }
    }

    /// Feature width shared by all videos, if any are loaded.
    pub fn feature_dim(&self) -> Option<usize> {
        self.ds.videos.first().map(|v| v.frames.cols())
    }

    /// Binary-selection triplets: `benchmark.jsonl` from the data directory,
    /// else built from the generated world with `seed`.
    pub fn benchmark(&self, seed: u64) -> Result<Vec<Triplet>, PipelineError> {
        if let Some(dir) = &self.dir {
            let path = dir.join(BENCHMARK_FILE);
            if path.exists() {
                return Ok(read_benchmark(&path)?);
            }
        }
        let world = self.world.as_ref().ok_or_else(|| {
            PipelineError::Invalid(
                "no benchmark file and no synthetic world to build one from".into(),
            )
        })?;
        synthetic_triplets(world, seed)
    }
}

/// Reads `cfg.data.dir` when it holds a dataset. Otherwise, in synthetic
/// mode, generates the world in memory.
pub fn load_data(cfg: &ExperimentConfig) -> Result<LoadedData, PipelineError> {
    let dir = resolve_data_path(&cfg.data.dir);
    let explicit_vocab = cfg.data.vocab.as_ref().map(|p| resolve_data_path(p));
    let mut data = if dir.join(FEATURES_MANIFEST).exists() {
        let vocab_file = dir.join(VOCAB_FILE);
        let vocab = match &explicit_vocab {
            Some(p) => Some(Vocab::load(p)?),
            None if vocab_file.exists() => Some(Vocab::load(&vocab_file)?),
            None => None,
        };
        let (ds, report) = load_and_validate(&dir, vocab.as_ref());
        let ds = match ds {
            Some(ds) if report.is_clean() => ds,
            _ => return Err(DatasetError::Invalid(report.errors).into()),
        };
        for w in &report.warnings {
            log::warn!("{w}");
        }
        let vocab = vocab.unwrap_or_else(|| ds.build_vocab(&ds.caption_indices(&ds.splits.train)));
        LoadedData {
            ds,
            vocab,
            world: None,
            dir: Some(dir),
        }
    } else if cfg.data.mode == DataMode::Synthetic {
        log::info!(
            "no dataset at {}; generating the synthetic world",
            dir.display()
        );
        LoadedData::from_world(generate_world(&cfg.data.synthetic)?)
    } else {
        return Err(PipelineError::Invalid(format!(
            "{}: no {FEATURES_MANIFEST} found",
            dir.display()
        )));
    };
    if let (Some(p), None) = (&explicit_vocab, &data.dir) {
        data.vocab = Vocab::load(p)?;
    }
    Ok(data)
}

/// Writes a generated world as a dataset directory together with its
/// vocabulary, binary benchmark and generator configuration.
pub fn write_synthetic(
    world: &SyntheticDataset,
    bench_seed: u64,
    dir: &Path,
) -> Result<LoadedData, PipelineError> {
    let data = LoadedData::from_world(world.clone());
    data.ds.write(dir)?;
    data.vocab.save(&dir.join(VOCAB_FILE))?;
    let records = benchmark_records(&build_binary_benchmark(world, bench_seed), &world.grammar)
        .map_err(PipelineError::Invalid)?;
    write_benchmark(&dir.join(BENCHMARK_FILE), &records)?;
    let wpath = dir.join(WORLD_FILE);
    fs::write(&wpath, canonical_json(&world.config)).map_err(io_err(&wpath))?;
    Ok(LoadedData {
        dir: Some(dir.to_path_buf()),
        ..data
    })
}

pub fn synthetic_triplets(
    world: &SyntheticDataset,
    seed: u64,
) -> Result<Vec<Triplet>, PipelineError> {
    let records = benchmark_records(&build_binary_benchmark(world, seed), &world.grammar)
        .map_err(PipelineError::Invalid)?;
    records
        .into_iter()
        .enumerate()
        .map(|(i, r)| {
            r.into_triplet(&(i + 1).to_string())
                .map_err(|e| PipelineError::Invalid(e.join("; ")))
        })
        .collect()
}

/// Parses an ad-hoc sentence with the synthetic grammar into a caption.
pub fn parse_query(sentence: &str, grammar: &SyntheticGrammar) -> Result<Caption, PipelineError> {
    let p = parse_caption(sentence, grammar)
        .map_err(|e| PipelineError::Invalid(format!("query: {e}")))?;
    let graph = build_graph(p.tokens, &p.frames)
        .map_err(|e| PipelineError::Invalid(format!("query: {e}")))?;
    Ok(Caption {
        caption_id: "query".into(),
        video_id: String::new(),
        sentence: sentence.to_string(),
        graph,
    })
}

/// The model configuration with sizes filled from the data.
pub fn effective_model(cfg: &ModelConfig, data: &LoadedData) -> ModelConfig {
    let mut m = cfg.clone();
    m.vocab_size = data.vocab.len();
    if let Some(d) = data.feature_dim() {
        m.feature_dim = d;
    }
    m
}

#[derive(Clone, Debug)]
pub struct RunResult {
    pub config: ExperimentConfig,
    pub model: HgrModel,
    pub outcome: TrainOutcome,
}

/// Trains with `cfg` and writes `config.json`, `train_log.jsonl`,
/// `epochs.jsonl` and the `best/` and `final/` checkpoints under `out`.
pub fn run_training(
    cfg: &ExperimentConfig,
    data: &LoadedData,
    out: &Path,
) -> Result<RunResult, PipelineError> {
    cfg.validate()?;
    let mut cfg = cfg.clone();
    cfg.model = effective_model(&cfg.model, data);
    cfg.output_dir = out.to_path_buf();
    let model = HgrModel::new(cfg.model.clone()).map_err(PipelineError::Invalid)?;
    fs::create_dir_all(out).map_err(io_err(out))?;
    cfg.save(&out.join(RUN_CONFIG))?;
    let params = model.init_params::<f32>(cfg.train.seed)?;

    let bpath = out.join(BATCH_LOG);
    let epath = out.join(EPOCH_LOG);
    let mut blog = BufWriter::new(fs::File::create(&bpath).map_err(io_err(&bpath))?);
    let mut elog = BufWriter::new(fs::File::create(&epath).map_err(io_err(&epath))?);
    let mut batch_error: Option<PipelineError> = None;
    let mut epoch_error: Option<PipelineError> = None;
    let outcome = train(
        &model,
        params,
        &cfg.train,
        &cfg.eval,
        &data.ds,
        &data.vocab,
        |b: &BatchLog| {
            if batch_error.is_none() {
                if let Err(e) = writeln!(
                    blog,
                    "{}",
                    serde_json::to_string(b).expect("log serializes")
                ) {
                    batch_error = Some(PipelineError::Io {
                        path: bpath.display().to_string(),
                        source: e,
                    });
                }
            }
        },
        |e: &EpochSummary| {
            log::info!(
                "epoch {} loss {:.4} val rsum {:.2}{}",
                e.epoch,
                e.mean_loss,
                e.val_rsum,
                if e.best { " *" } else { "" }
            );
            if epoch_error.is_none() {
                let r = writeln!(
                    elog,
                    "{}",
                    serde_json::to_string(e).expect("log serializes")
                )
                .and_then(|_| elog.flush());
                if let Err(e) = r {
                    epoch_error = Some(PipelineError::Io {
                        path: epath.display().to_string(),
                        source: e,
                    });
                }
            }
        },
    )?;
    if let Some(e) = batch_error.or(epoch_error) {
        return Err(e);
    }
    blog.flush().map_err(io_err(&bpath))?;
    elog.flush().map_err(io_err(&epath))?;
    Checkpoint::new(
        &cfg.model,
        outcome.best_epoch,
        outcome.best_report.clone(),
        outcome.best_params.clone(),
        data.vocab.clone(),
    )
    .save(&out.join(BEST_DIR))?;
    Checkpoint::new(
        &cfg.model,
        cfg.train.epochs,
        outcome.final_report.clone(),
        outcome.final_params.clone(),
        data.vocab.clone(),
    )
    .save(&out.join(FINAL_DIR))?;
    Ok(RunResult {
        config: cfg,
        model,
        outcome,
    })
}

/// Reads `epochs.jsonl` from a run directory.
pub fn read_epoch_log(run: &Path) -> Result<Vec<EpochSummary>, PipelineError> {
    let path = run.join(EPOCH_LOG);
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l)
                .map_err(|e| PipelineError::Invalid(format!("{}:{}: {e}", path.display(), i + 1)))
        })
        .collect()
}

/// Epoch table followed by text bar charts of loss and validation rsum.
pub fn render_epoch_report(epochs: &[EpochSummary]) -> String {
    const WIDTH: usize = 40;
    let mut s = String::from("epoch  mean_loss  val_rsum  best\n");
    for e in epochs {
        s += &format!(
            "{:>5}  {:>9.5}  {:>8.2}  {}\n",
            e.epoch,
            e.mean_loss,
            e.val_rsum,
            if e.best { "*" } else { "" }
        );
    }
    let bars = |title: &str, values: Vec<f64>| {
        let max = values.iter().cloned().fold(0.0f64, f64::max);
        let mut out = format!("\n{title}\n");
        for (e, v) in epochs.iter().zip(&values) {
            let n = if max > 0.0 {
                ((v / max) * WIDTH as f64).round() as usize
            } else {
                0
            };
            out += &format!("{:>5} |{:<WIDTH$}| {v:.4}\n", e.epoch, "#".repeat(n));
        }
        out
    };
    s += &bars("mean loss", epochs.iter().map(|e| e.mean_loss).collect());
    s += &bars(
        "validation rsum",
        epochs.iter().map(|e| e.val_rsum).collect(),
    );
    s
}

/// Validation report of a run's best checkpoint.
pub fn best_report(run: &Path) -> Result<EvalReport, PipelineError> {
    Ok(Checkpoint::load(&run.join(BEST_DIR), None, false)?
        .meta
        .validation)
}

/// Dimensions for the end-to-end gradient check.
#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckSetup {
    pub word_dim: usize,
    pub lstm_hidden: usize,
    pub joint_dim: usize,
    pub seed: u64,
    pub step: f64,
    pub margin: f64,
}

impl Default for GradcheckSetup {
    fn default() -> Self {
        GradcheckSetup {
            word_dim: 8,
            lstm_hidden: 16,
            joint_dim: 16,
            seed: 0,
            step: 1e-8,
            margin: 0.2,
        }
    }
}

/// Central-difference check of the full ranking loss on two videos and one
/// caption each, over every parameter of the model, at precision `T`.
///
/// Runs three passes whose perturbed parameters partition the store. Video weights
/// are perturbed with the text embeddings held as constants. Word embedding
/// and Bi-LSTM weights are perturbed with the video embeddings held constant.
/// The remaining text weights are perturbed with both the video embeddings
/// and the contextual word states held constant. Each pass still
/// differentiates everything downstream of the perturbed weights through the
/// loss; the split only avoids re-running stages those weights cannot reach.
/// The report is the worst of the three.
pub fn model_gradcheck<T: Real>(
    setup: &GradcheckSetup,
    base: &ModelConfig,
) -> Result<GradCheckReport, PipelineError> {
    let world = generate_world(&WorldConfig {
        seed: setup.seed,
        n_videos: 2,
        n_val: 0,
        n_test: 0,
        captions_per_video: 1,
        ..Default::default()
    })?;
    let data = LoadedData::from_world(world);
    let mut cfg = effective_model(base, &data);
    cfg.word_dim = setup.word_dim;
    cfg.lstm_hidden = setup.lstm_hidden;
    cfg.joint_dim = setup.joint_dim;
    let model = HgrModel::new(cfg).map_err(PipelineError::Invalid)?;
    let params = model.init_params::<T>(setup.seed)?;
    let ds = &data.ds;
    let frames: Vec<_> = ds
        .videos
        .iter()
        .map(|v| (v.video_id.as_str(), &v.frames))
        .collect();
    let videos = model.prepare_videos::<T>(&frames)?;
    let ids: Vec<Vec<usize>> = ds
        .captions
        .iter()
        .map(|c| caption_ids(&data.vocab, c))
        .collect();
    let caps: Vec<CaptionInput> = ds
        .captions
        .iter()
        .zip(&ids)
        .map(|(c, ids)| CaptionInput {
            graph: &c.graph,
            ids,
        })
        .collect();
    let video_err = |e: VideoError| match e {
        VideoError::Autodiff(e) => e,
        other => AutodiffError::InvalidArgument {
            op: "model_gradcheck",
            msg: other.to_string(),
        },
    };

    let (text_values, video_values, words) = {
        let mut g = Graph::with_params(&params);
        let text = model.text.encode(&mut g, &caps)?;
        let video = model
            .video
            .encode(&mut g, videos.clone())
            .map_err(video_err)?;
        let words = g.value(text.words).clone();
        (
            FrozenText::new(&g, &TextSide::from(&text)),
            FrozenVideo::new(&g, &VideoSide::from(&video)),
            words,
        )
    };
    let matching = &model.cfg.matching;
    let margin = setup.margin;
    let is_video = |n: &str| n.starts_with("video.");

    let video_report = grad_check_where(
        |g| {
            let text = text_values.inject(g);
            let video = model.video.encode(g, videos.clone()).map_err(video_err)?;
            let sims = batch_similarity(g, &VideoSide::from(&video), &text, matching)?;
            contrastive_loss(g, sims.fused, margin)
        },
        &params,
        setup.step,
        is_video,
    )?;

    let sequence_report = grad_check_where(
        |g| {
            let video = video_values.inject(g);
            let text = model.text.encode(g, &caps)?;
            let sims = batch_similarity(g, &video, &TextSide::from(&text), matching)?;
            contrastive_loss(g, sims.fused, margin)
        },
        &params,
        setup.step,
        is_sequence_param,
    )?;

    let graph_report = grad_check_where(
        |g| {
            let video = video_values.inject(g);
            let w = g.constant(words.clone());
            let text = model.text.encode_from_words(g, w, &caps)?;
            let sims = batch_similarity(g, &video, &TextSide::from(&text), matching)?;
            contrastive_loss(g, sims.fused, margin)
        },
        &params,
        setup.step,
        |n| !is_video(n) && !is_sequence_param(n),
    )?;

    let reports = [video_report, sequence_report, graph_report];
    let entries = reports.iter().map(|r| r.entries_checked).sum();
    if entries != params.num_values() {
        return Err(PipelineError::Invalid(
            "gradcheck passes do not cover every parameter".into(),
        ));
    }
    let mut worst = reports
        .into_iter()
        .max_by(|a, b| a.max_relative_error.total_cmp(&b.max_relative_error))
        .expect("three reports");
    worst.entries_checked = entries;
    Ok(worst)
}

/// Text-side matching inputs detached from the graph that produced them.
struct FrozenText<T: Real> {
    event: Tensor<T>,
    actions: Tensor<T>,
    action_offsets: Vec<usize>,
    entities: Option<Tensor<T>>,
    entity_offsets: Vec<usize>,
}

impl<T: Real> FrozenText<T> {
    fn new(g: &Graph<'_, T>, s: &TextSide) -> Self {
        FrozenText {
            event: g.value(s.event).clone(),
            actions: g.value(s.actions).clone(),
            action_offsets: s.action_offsets.clone(),
            entities: s.entities.map(|e| g.value(e).clone()),
            entity_offsets: s.entity_offsets.clone(),
        }
    }

    fn inject(&self, g: &mut Graph<'_, T>) -> TextSide {
        TextSide {
            event: g.constant(self.event.clone()),
            actions: g.constant(self.actions.clone()),
            action_offsets: self.action_offsets.clone(),
            entities: self.entities.clone().map(|e| g.constant(e)),
            entity_offsets: self.entity_offsets.clone(),
        }
    }
}

/// Video-side matching inputs detached from the graph that produced them.
struct FrozenVideo<T: Real> {
    event: Tensor<T>,
    actions: Tensor<T>,
    entities: Tensor<T>,
    frame_offsets: Vec<usize>,
}

impl<T: Real> FrozenVideo<T> {
    fn new(g: &Graph<'_, T>, s: &VideoSide) -> Self {
        FrozenVideo {
            event: g.value(s.event).clone(),
            actions: g.value(s.actions).clone(),
            entities: g.value(s.entities).clone(),
            frame_offsets: s.frame_offsets.clone(),
        }
    }

    fn inject(&self, g: &mut Graph<'_, T>) -> VideoSide {
        VideoSide {
            event: g.constant(self.event.clone()),
            actions: g.constant(self.actions.clone()),
            entities: g.constant(self.entities.clone()),
            frame_offsets: self.frame_offsets.clone(),
        }
    }
}
