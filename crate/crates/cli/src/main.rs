//! `hgr`: data generation, training, evaluation and inspection commands.

use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use hgr_core::autodiff::Dd;
use hgr_core::config::{content_hash, ExperimentConfig};
use hgr_core::dataset::{features_for, load_and_validate, resolve_data_path, Dataset};
use hgr_core::eval::{
    binary_select, cross_dataset_eval, evaluate, render_eval_csv, render_eval_text,
    render_selection_text, retrieve,
};
use hgr_core::matching::NormalizeLocal;
use hgr_core::model::HgrModel;
use hgr_core::pipeline::{
    effective_model, load_data, model_gradcheck, parse_query, read_epoch_log, render_epoch_report,
    run_training, write_synthetic, GradcheckSetup, LoadedData, PipelineError, BEST_DIR,
};
use hgr_core::semantic_graph::{build_graph, parse_caption, serialize_graph};
use hgr_core::synth::{generate_world, SyntheticGrammar};
use hgr_core::text_encoder::Vocab;
use hgr_core::trainer::{Checkpoint, CheckpointError};

#[derive(Parser)]
#[command(
    name = "hgr",
    about = "Hierarchical graph reasoning for video-text retrieval",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic world as a dataset directory.
    GenData(GenDataArgs),
    /// Parse sentences (arguments or stdin lines) into semantic-role graph JSON.
    Parse(ParseArgs),
    /// Train a model and write logs and checkpoints.
    Train(TrainArgs),
    /// Retrieval metrics of a checkpoint on a split.
    Eval(EvalArgs),
    /// Retrieval metrics of a checkpoint on another dataset directory.
    EvalCross(EvalCrossArgs),
    /// Rank videos for an ad-hoc caption.
    Retrieve(RetrieveArgs),
    /// Binary selection between true and perturbed captions.
    Select(SelectArgs),
    /// Finite-difference check of the end-to-end loss gradient.
    Gradcheck(GradcheckArgs),
    /// Render the epoch log of a training run.
    Report(ReportArgs),
    /// Check a dataset directory and print every problem found.
    Validate(ValidateArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Ablation {
    NoGraphAttention,
    NoRoleAwareness,
    NoHierVideo,
}

#[derive(Clone, Copy, ValueEnum)]
enum Normalize {
    Sum,
    Mean,
}

#[derive(Clone, Copy, Default, ValueEnum)]
enum Format {
    #[default]
    Text,
    Json,
    Csv,
}

#[derive(Args, Clone, Default)]
struct ConfigArgs {
    /// Experiment configuration (JSON); omitted fields take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed override (training seed; world seed for gen-data).
    #[arg(long)]
    seed: Option<u64>,
    /// Dataset directory override.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Model ablation; may be repeated.
    #[arg(long, value_enum)]
    ablation: Vec<Ablation>,
    /// Aggregation of local scores over text nodes.
    #[arg(long, value_enum)]
    normalize_local: Option<Normalize>,
    /// Print the effective configuration as canonical JSON and exit.
    #[arg(long)]
    print_config: bool,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<ExperimentConfig, PipelineError> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(&resolve_data_path(p))?,
            None => ExperimentConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.train.seed = s;
        }
        if let Some(d) = &self.data {
            cfg.data.dir = d.clone();
        }
        for a in &self.ablation {
            let name = a
                .to_possible_value()
                .expect("named variant")
                .get_name()
                .to_string();
            cfg.model
                .ablations
                .enable(&name)
                .map_err(PipelineError::Invalid)?;
        }
        if let Some(n) = self.normalize_local {
            cfg.model.matching.normalize_local = match n {
                Normalize::Sum => NormalizeLocal::Sum,
                Normalize::Mean => NormalizeLocal::Mean,
            };
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Whether the model configuration was requested explicitly.
    fn explicit_model(&self) -> bool {
        self.config.is_some() || !self.ablation.is_empty() || self.normalize_local.is_some()
    }
}

#[derive(Args)]
struct GenDataArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Output directory (defaults to the configured data directory).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ParseArgs {
    /// Sentences to parse; read from stdin, one per line, when empty.
    sentences: Vec<String>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Run directory (defaults to the configured output directory).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CheckpointArgs {
    /// Checkpoint directory, or a run directory containing `best/`.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Load even when the checkpoint's model configuration differs.
    #[arg(long)]
    allow_config_mismatch: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    #[command(flatten)]
    ckpt: CheckpointArgs,
    /// Split to evaluate.
    #[arg(long, default_value = "test")]
    split: String,
    /// One table block per level: event, action, entity, fusion.
    #[arg(long)]
    per_level: bool,
    #[arg(long, value_enum, default_value_t)]
    format: Format,
    /// Also write the report as JSON to this file.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalCrossArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    #[command(flatten)]
    ckpt: CheckpointArgs,
    /// Foreign dataset directory.
    #[arg(long)]
    target: PathBuf,
    /// Split of the foreign dataset; `all` uses every video.
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(long)]
    per_level: bool,
    #[arg(long, value_enum, default_value_t)]
    format: Format,
}

#[derive(Args)]
struct RetrieveArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    #[command(flatten)]
    ckpt: CheckpointArgs,
    /// Caption to search for.
    #[arg(long)]
    query: String,
    #[arg(long, default_value_t = 3)]
    topk: usize,
    /// Gallery split; `all` uses every video.
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(long, value_enum, default_value_t)]
    format: Format,
}

#[derive(Args)]
struct SelectArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    #[command(flatten)]
    ckpt: CheckpointArgs,
    #[arg(long, value_enum, default_value_t)]
    format: Format,
    /// Also write the report with every selection as JSON to this file.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Largest acceptable relative error.
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
    /// Central-difference step.
    #[arg(long, default_value_t = GradcheckSetup::default().step)]
    step: f64,
    /// Arithmetic for the check. `f64` is faster but its round-off exceeds
    /// the tolerance on near-zero gradients.
    #[arg(long, value_enum, default_value_t)]
    precision: Precision,
}

#[derive(Clone, Copy, Default, ValueEnum)]
enum Precision {
    /// Double-double, about 32 significant digits.
    #[default]
    Dd,
    /// IEEE binary64.
    F64,
}

#[derive(Args)]
struct ReportArgs {
    /// Run directory written by `train`.
    #[arg(long)]
    run: PathBuf,
    /// Include the best checkpoint's per-level validation table.
    #[arg(long)]
    per_level: bool,
}

#[derive(Args)]
struct ValidateArgs {
    /// Dataset directory.
    #[arg(long)]
    data: PathBuf,
    /// Vocabulary for coverage statistics (defaults to the directory's vocab.json).
    #[arg(long)]
    vocab: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn print_config(cfg: &ExperimentConfig) -> ExitCode {
    print!("{}", cfg.to_canonical_json());
    ExitCode::SUCCESS
}

fn run(cmd: Command) -> Result<ExitCode, PipelineError> {
    match cmd {
        Command::GenData(a) => gen_data(a),
        Command::Parse(a) => parse(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::EvalCross(a) => eval_cross(a),
        Command::Retrieve(a) => retrieve_cmd(a),
        Command::Select(a) => select(a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::Report(a) => report(a),
        Command::Validate(a) => validate(a),
    }
}

fn gen_data(a: GenDataArgs) -> Result<ExitCode, PipelineError> {
    let mut cfg = a.cfg.resolve()?;
    if let Some(s) = a.cfg.seed {
        cfg.data.synthetic.seed = s;
    }
    if a.cfg.print_config {
        return Ok(print_config(&cfg));
    }
    let dir = a.out.unwrap_or_else(|| cfg.data.dir.clone());
    let world = generate_world(&cfg.data.synthetic)?;
    let data = write_synthetic(&world, cfg.eval.bench_seed, &dir)?;
    let s = &data.ds.splits;
    println!(
        "wrote {} videos, {} captions (train {}, val {}, test {}) to {}",
        data.ds.videos.len(),
        data.ds.captions.len(),
        s.train.len(),
        s.val.len(),
        s.test.len(),
        dir.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn parse(a: ParseArgs) -> Result<ExitCode, PipelineError> {
    let grammar = SyntheticGrammar::desk();
    let sentences: Vec<String> = if a.sentences.is_empty() {
        std::io::stdin()
            .lock()
            .lines()
            .collect::<Result<_, _>>()
            .map_err(|source| PipelineError::Io {
                path: "<stdin>".into(),
                source,
            })?
    } else {
        a.sentences
    };
    let mut failed = false;
    let mut out = std::io::stdout().lock();
    for (i, s) in sentences
        .iter()
        .enumerate()
        .filter(|(_, s)| !s.trim().is_empty())
    {
        let graph = parse_caption(s, &grammar)
            .map_err(|e| e.to_string())
            .and_then(|p| build_graph(p.tokens, &p.frames).map_err(|e| e.to_string()));
        match graph {
            Ok(g) => {
                let _ = writeln!(out, "{}", serialize_graph(&g));
            }
            Err(e) => {
                eprintln!("error: sentence {}: {e}", i + 1);
                failed = true;
            }
        }
    }
    Ok(if failed {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    })
}

fn train(a: TrainArgs) -> Result<ExitCode, PipelineError> {
    let cfg = a.cfg.resolve()?;
    if a.cfg.print_config {
        return Ok(print_config(&cfg));
    }
    let data = load_data(&cfg)?;
    let out = a.out.unwrap_or_else(|| cfg.output_dir.clone());
    let run = run_training(&cfg, &data, &out)?;
    let o = &run.outcome;
    println!(
        "best epoch {} (validation rsum {:.2}); run written to {}",
        o.best_epoch,
        o.best_report.rsum,
        out.display()
    );
    Ok(ExitCode::SUCCESS)
}

/// Loads a checkpoint and makes `data` use its vocabulary. With an explicit
/// model configuration, the checkpoint must match it unless overridden.
fn load_checkpoint(
    args: &CheckpointArgs,
    cfg_args: &ConfigArgs,
    cfg: &ExperimentConfig,
    data: &mut LoadedData,
) -> Result<(HgrModel, Checkpoint), PipelineError> {
    let mut dir = resolve_data_path(&args.checkpoint);
    if !dir.join("checkpoint.json").exists() && dir.join(BEST_DIR).join("checkpoint.json").exists()
    {
        dir = dir.join(BEST_DIR);
    }
    let ckpt = Checkpoint::load(&dir, None, false)?;
    data.vocab = ckpt.vocab.clone();
    let mut model_cfg = ckpt.meta.model.clone();
    if cfg_args.explicit_model() {
        let expected = effective_model(&cfg.model, data);
        let want = content_hash(&expected);
        if want != ckpt.meta.config_hash {
            if !args.allow_config_mismatch {
                return Err(CheckpointError::HashMismatch {
                    expected: want,
                    found: ckpt.meta.config_hash.clone(),
                }
                .into());
            }
            log::warn!("checkpoint configuration {} differs from requested {want}; using the requested one", ckpt.meta.config_hash);
            model_cfg = expected;
        }
    }
    let model = HgrModel::new(model_cfg).map_err(PipelineError::Invalid)?;
    let fresh = model.init_params::<f32>(0)?;
    for (name, t) in fresh.iter() {
        match ckpt.params.get(name) {
            Some(p) if p.shape() == t.shape() => {}
            _ => {
                return Err(PipelineError::Invalid(format!(
                "checkpoint parameter `{name}` is missing or has the wrong shape for this model"
            )))
            }
        }
    }
    Ok((model, ckpt))
}

fn split_ids(ds: &Dataset, split: &str) -> Result<Vec<String>, PipelineError> {
    match split {
        "train" => Ok(ds.splits.train.clone()),
        "val" => Ok(ds.splits.val.clone()),
        "test" => Ok(ds.splits.test.clone()),
        "all" => Ok(ds.videos.iter().map(|v| v.video_id.clone()).collect()),
        other => Err(PipelineError::Invalid(format!(
            "unknown split `{other}` (expected train, val, test or all)"
        ))),
    }
}

fn to_json<T: serde::Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("report serializes") + "\n"
}

fn write_file(path: &Path, text: &str) -> Result<(), PipelineError> {
    std::fs::write(path, text).map_err(|source| PipelineError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn eval(a: EvalArgs) -> Result<ExitCode, PipelineError> {
    let cfg = a.cfg.resolve()?;
    if a.cfg.print_config {
        return Ok(print_config(&cfg));
    }
    let mut data = load_data(&cfg)?;
    let (model, ckpt) = load_checkpoint(&a.ckpt, &a.cfg, &cfg, &mut data)?;
    let ids = split_ids(&data.ds, &a.split)?;
    let rep = evaluate(&model, &ckpt.params, &data.vocab, &data.ds, &ids, &cfg.eval)?;
    match a.format {
        Format::Text => print!("{}", render_eval_text(&rep, a.per_level)),
        Format::Json => print!("{}", to_json(&rep)),
        Format::Csv => print!("{}", render_eval_csv(&rep)),
    }
    if let Some(p) = a.out {
        write_file(&p, &to_json(&rep))?;
    }
    Ok(ExitCode::SUCCESS)
}

fn eval_cross(a: EvalCrossArgs) -> Result<ExitCode, PipelineError> {
    let cfg = a.cfg.resolve()?;
    if a.cfg.print_config {
        return Ok(print_config(&cfg));
    }
    let dir = resolve_data_path(&a.target);
    let foreign = Dataset::load(&dir)?;
    let ds_vocab = Vocab::from_tokens(std::iter::empty::<&str>());
    let mut data = LoadedData {
        ds: foreign,
        vocab: ds_vocab,
        world: None,
        dir: Some(dir),
    };
    let (model, ckpt) = load_checkpoint(&a.ckpt, &a.cfg, &cfg, &mut data)?;
    let ids = split_ids(&data.ds, &a.split)?;
    let rep = cross_dataset_eval(&model, &ckpt.params, &data.vocab, &data.ds, &ids, &cfg.eval)?;
    match a.format {
        Format::Text => print!("{}", render_eval_text(&rep, a.per_level)),
        Format::Json => print!("{}", to_json(&rep)),
        Format::Csv => print!("{}", render_eval_csv(&rep)),
    }
    Ok(ExitCode::SUCCESS)
}

fn retrieve_cmd(a: RetrieveArgs) -> Result<ExitCode, PipelineError> {
    let cfg = a.cfg.resolve()?;
    if a.cfg.print_config {
        return Ok(print_config(&cfg));
    }
    let mut data = load_data(&cfg)?;
    let (model, ckpt) = load_checkpoint(&a.ckpt, &a.cfg, &cfg, &mut data)?;
    let grammar = data
        .world
        .as_ref()
        .map(|w| w.grammar.clone())
        .unwrap_or_else(SyntheticGrammar::desk);
    let query = parse_query(&a.query, &grammar)?;
    let ids = split_ids(&data.ds, &a.split)?;
    let gallery = features_for(&data.ds, &ids)
        .map_err(|m| PipelineError::Invalid(format!("videos without features: {m:?}")))?;
    let hits = retrieve(
        &model,
        &ckpt.params,
        &data.vocab,
        &query,
        &gallery,
        a.topk,
        &cfg.eval,
    )?;
    match a.format {
        Format::Json => print!("{}", to_json(&hits)),
        Format::Text | Format::Csv => {
            println!(
                "{:>4}  {:<12} {:>9} {:>9} {:>9} {:>9}",
                "rank", "video", "event", "action", "entity", "fused"
            );
            for h in &hits {
                println!(
                    "{:>4}  {:<12} {:>9.4} {:>9.4} {:>9.4} {:>9.4}",
                    h.rank, h.video_id, h.s_event, h.s_action, h.s_entity, h.s_fused
                );
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn select(a: SelectArgs) -> Result<ExitCode, PipelineError> {
    let cfg = a.cfg.resolve()?;
    if a.cfg.print_config {
        return Ok(print_config(&cfg));
    }
    let mut data = load_data(&cfg)?;
    let (model, ckpt) = load_checkpoint(&a.ckpt, &a.cfg, &cfg, &mut data)?;
    let triplets = data.benchmark(cfg.eval.bench_seed)?;
    let rep = binary_select(
        &model,
        &ckpt.params,
        &data.vocab,
        &data.ds,
        &triplets,
        &cfg.eval,
    )?;
    match a.format {
        Format::Json => print!("{}", to_json(&rep)),
        Format::Text | Format::Csv => print!("{}", render_selection_text(&rep)),
    }
    if let Some(p) = a.out {
        write_file(&p, &to_json(&rep))?;
    }
    Ok(ExitCode::SUCCESS)
}

fn gradcheck(a: GradcheckArgs) -> Result<ExitCode, PipelineError> {
    let cfg = a.cfg.resolve()?;
    if a.cfg.print_config {
        return Ok(print_config(&cfg));
    }
    let setup = GradcheckSetup {
        seed: cfg.train.seed,
        step: a.step,
        margin: cfg.train.margin,
        ..GradcheckSetup::default()
    };
    let start = std::time::Instant::now();
    let r = match a.precision {
        Precision::Dd => model_gradcheck::<Dd>(&setup, &cfg.model)?,
        Precision::F64 => model_gradcheck::<f64>(&setup, &cfg.model)?,
    };
    let pass = r.max_relative_error <= a.tolerance;
    println!(
        "max relative error {:.3e} at {} (analytic {:.6e}, numeric {:.6e}); {} entries in {:.1}s: {}",
        r.max_relative_error,
        r.worst.as_ref().map_or("-".to_string(), |(n, i)| format!("{n}[{i}]")),
        r.analytic,
        r.numeric,
        r.entries_checked,
        start.elapsed().as_secs_f64(),
        if pass { "pass" } else { "FAIL" }
    );
    Ok(if pass {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    })
}

fn report(a: ReportArgs) -> Result<ExitCode, PipelineError> {
    let epochs = read_epoch_log(&a.run)?;
    print!("{}", render_epoch_report(&epochs));
    if a.per_level {
        let ckpt = Checkpoint::load(&a.run.join(BEST_DIR), None, false)?;
        println!("\nbest checkpoint (epoch {}) validation", ckpt.meta.epoch);
        print!("{}", render_eval_text(&ckpt.meta.validation, true));
    }
    Ok(ExitCode::SUCCESS)
}

fn validate(a: ValidateArgs) -> Result<ExitCode, PipelineError> {
    let dir = resolve_data_path(&a.data);
    let vocab_path = a
        .vocab
        .map(|p| resolve_data_path(&p))
        .or_else(|| Some(dir.join("vocab.json")).filter(|p| p.exists()));
    let vocab = vocab_path.map(|p| Vocab::load(&p)).transpose()?;
    let (_, rep) = load_and_validate(&dir, vocab.as_ref());
    print!("{}", rep.render());
    Ok(if rep.is_clean() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    })
}
