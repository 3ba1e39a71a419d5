//! On-disk dataset layout, loading and exhaustive validation.
//!
//! A dataset directory holds:
//! - `features.jsonl`: manifest of `{video_id, path}` lines pointing at HGRF files;
//! - `captions.jsonl`: `{caption_id, video_id, sentence, graph}` lines;
//! - `splits.json`: `{train, val, test}` lists of video ids;
//! - optionally `vocab.json`, `benchmark.jsonl` and `world.json`.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::semantic_graph::{
    build_graph, graph_to_value, parse_caption, parse_graph_value, tokenize, SemanticRoleGraph,
};
use crate::synth::{BinaryBenchmark, PerturbKind, Splits, SyntheticDataset, SyntheticGrammar};
use crate::text_encoder::Vocab;
use crate::video_encoder::{
    decode_hgrf, read_manifest, write_manifest, FeatureError, ManifestEntry, VideoFeatures,
};

pub const FEATURES_MANIFEST: &str = "features.jsonl";
pub const FEATURES_DIR: &str = "features";
pub const CAPTIONS_FILE: &str = "captions.jsonl";
pub const SPLITS_FILE: &str = "splits.json";
pub const VOCAB_FILE: &str = "vocab.json";
pub const BENCHMARK_FILE: &str = "benchmark.jsonl";
pub const WORLD_FILE: &str = "world.json";

#[derive(Clone, Debug, PartialEq)]
pub struct Caption {
    pub caption_id: String,
    pub video_id: String,
    pub sentence: String,
    pub graph: SemanticRoleGraph,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CaptionLine {
    caption_id: String,
    video_id: String,
    sentence: String,
    graph: serde_json::Value,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub videos: Vec<VideoFeatures>,
    pub captions: Vec<Caption>,
    pub splits: Splits,
}

/// A problem found while loading, with file and line context.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Issue {
    pub file: String,
    pub line: Option<usize>,
    pub msg: String,
}

impl fmt::Display for Issue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.line {
            Some(l) => write!(f, "{}:{}: {}", self.file, l, self.msg),
            None => write!(f, "{}: {}", self.file, self.msg),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct VocabCoverage {
    pub size: usize,
    pub tokens: usize,
    pub covered_tokens: usize,
    /// Percentage of caption tokens present in the vocabulary.
    pub coverage_pct: f64,
    pub oov_types: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct DatasetStats {
    pub videos: usize,
    pub captions: usize,
    pub feature_dim: Option<usize>,
    pub frames: usize,
    pub tokens: usize,
    pub split_sizes: BTreeMap<String, usize>,
    pub vocab: Option<VocabCoverage>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct ValidationReport {
    pub errors: Vec<Issue>,
    pub warnings: Vec<Issue>,
    pub stats: DatasetStats,
}

impl ValidationReport {
    pub fn is_clean(&self) -> bool {
        self.errors.is_empty()
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        for e in &self.errors {
            s += &format!("error: {e}\n");
        }
        for w in &self.warnings {
            s += &format!("warning: {w}\n");
        }
        let st = &self.stats;
        s += &format!(
            "{} videos, {} captions, {} frames, {} tokens, feature width {}\n",
            st.videos,
            st.captions,
            st.frames,
            st.tokens,
            st.feature_dim.map_or("-".to_string(), |d| d.to_string())
        );
        for (k, v) in &st.split_sizes {
            s += &format!("split {k}: {v} videos\n");
        }
        if let Some(v) = &st.vocab {
            s += &format!(
                "vocabulary {} entries, token coverage {:.2}% ({} of {}), {} unknown types\n",
                v.size, v.coverage_pct, v.covered_tokens, v.tokens, v.oov_types
            );
        }
        s += &format!(
            "{} errors, {} warnings\n",
            self.errors.len(),
            self.warnings.len()
        );
        s
    }
}

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("{}", render_issues(.0))]
    Invalid(Vec<Issue>),
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

fn render_issues(issues: &[Issue]) -> String {
    issues
        .iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join("\n")
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn caption_line(c: &Caption) -> String {
    let line = CaptionLine {
        caption_id: c.caption_id.clone(),
        video_id: c.video_id.clone(),
        sentence: c.sentence.clone(),
        graph: graph_to_value(&c.graph),
    };
    serde_json::to_string(&line).expect("caption serializes")
}

impl Dataset {
    pub fn from_synthetic(world: &SyntheticDataset) -> Self {
        let videos = world
            .videos
            .iter()
            .map(|v| VideoFeatures {
                video_id: v.id.clone(),
                frames: v.features.clone(),
                source: "synthetic".into(),
            })
            .collect();
        let mut per_video: HashMap<&str, usize> = HashMap::new();
        let captions = world
            .captions
            .iter()
            .map(|c| {
                let k = per_video.entry(&c.video_id).or_insert(0);
                *k += 1;
                Caption {
                    caption_id: format!("{}#{}", c.video_id, *k - 1),
                    video_id: c.video_id.clone(),
                    sentence: c.sentence.clone(),
                    graph: c.graph.clone(),
                }
            })
            .collect();
        Dataset {
            videos,
            captions,
            splits: world.splits.clone(),
        }
    }

    pub fn video_index(&self) -> HashMap<&str, usize> {
        self.videos
            .iter()
            .enumerate()
            .map(|(i, v)| (v.video_id.as_str(), i))
            .collect()
    }

    /// Indices of `ids` in `videos`, in the given order.
    pub fn video_indices(&self, ids: &[String]) -> Vec<usize> {
        let idx = self.video_index();
        ids.iter()
            .filter_map(|id| idx.get(id.as_str()).copied())
            .collect()
    }

    /// Indices of captions whose video is in `ids`, in caption order.
    pub fn caption_indices(&self, ids: &[String]) -> Vec<usize> {
        let set: HashSet<&str> = ids.iter().map(String::as_str).collect();
        (0..self.captions.len())
            .filter(|&i| set.contains(self.captions[i].video_id.as_str()))
            .collect()
    }

    /// Vocabulary over the tokens of the given captions.
    pub fn build_vocab(&self, captions: &[usize]) -> Vocab {
        Vocab::from_tokens(
            captions
                .iter()
                .flat_map(|&i| self.captions[i].graph.tokens.iter()),
        )
    }

    pub fn write(&self, dir: &Path) -> Result<(), DatasetError> {
        let fdir = dir.join(FEATURES_DIR);
        fs::create_dir_all(&fdir).map_err(io_err(&fdir))?;
        let mut manifest = Vec::new();
        for v in &self.videos {
            let rel = format!("{FEATURES_DIR}/{}.hgrf", v.video_id);
            let path = dir.join(&rel);
            crate::video_encoder::write_hgrf(&path, &v.frames).map_err(feature_io)?;
            manifest.push(ManifestEntry {
                video_id: v.video_id.clone(),
                path: rel,
                source: Some(v.source.clone()),
            });
        }
        write_manifest(&dir.join(FEATURES_MANIFEST), &manifest).map_err(feature_io)?;
        let cpath = dir.join(CAPTIONS_FILE);
        let mut f = fs::File::create(&cpath).map_err(io_err(&cpath))?;
        for c in &self.captions {
            writeln!(f, "{}", caption_line(c)).map_err(io_err(&cpath))?;
        }
        let spath = dir.join(SPLITS_FILE);
        fs::write(
            &spath,
            serde_json::to_string_pretty(&self.splits).expect("splits serialize") + "\n",
        )
        .map_err(io_err(&spath))
    }

    /// Loads a dataset directory, failing with every issue found.
    pub fn load(dir: &Path) -> Result<Self, DatasetError> {
        let (ds, report) = load_and_validate(dir, None);
        match ds {
            Some(ds) if report.is_clean() => Ok(ds),
            _ => Err(DatasetError::Invalid(report.errors)),
        }
    }
}

fn feature_io(e: FeatureError) -> DatasetError {
    match e {
        FeatureError::Io { path, source } => DatasetError::Io { path, source },
        other => DatasetError::Invalid(vec![Issue {
            file: String::new(),
            line: None,
            msg: other.to_string(),
        }]),
    }
}

fn feature_issue(e: FeatureError) -> Issue {
    match e {
        FeatureError::Manifest { path, line, msg } => Issue {
            file: path,
            line: Some(line),
            msg,
        },
        other => {
            let s = other.to_string();
            match s.split_once(": ") {
                Some((file, msg)) => Issue {
                    file: file.into(),
                    line: None,
                    msg: msg.into(),
                },
                None => Issue {
                    file: String::new(),
                    line: None,
                    msg: s,
                },
            }
        }
    }
}

/// Reads everything under `dir`, collecting every problem instead of
/// stopping at the first. Returns the dataset only when it could be
/// assembled.
pub fn load_and_validate(dir: &Path, vocab: Option<&Vocab>) -> (Option<Dataset>, ValidationReport) {
    let mut rep = ValidationReport::default();
    let shown = |name: &str| dir.join(name).display().to_string();
    let issue = |file: &str, line: Option<usize>, msg: String| Issue {
        file: file.to_string(),
        line,
        msg,
    };

    // Features.
    let mpath = dir.join(FEATURES_MANIFEST);
    let mut videos = Vec::new();
    // Ids listed in the manifest, whether or not their files load.
    let mut declared: Option<HashSet<String>> = None;
    match read_manifest(&mpath) {
        Err(errs) => rep.errors.extend(errs.into_iter().map(feature_issue)),
        Ok(entries) => {
            declared = Some(entries.iter().map(|e| e.video_id.clone()).collect());
            for (line, e) in entries.iter().enumerate() {
                let path = e.resolve(dir);
                let pshown = path.display().to_string();
                let bytes = match fs::read(&path) {
                    Ok(b) => b,
                    Err(err) => {
                        rep.errors.push(issue(
                            &shown(FEATURES_MANIFEST),
                            Some(line + 1),
                            format!("video `{}`: cannot read {pshown}: {err}", e.video_id),
                        ));
                        continue;
                    }
                };
                match decode_hgrf(&bytes, &pshown) {
                    Ok(frames) => {
                        let d = frames.cols();
                        match rep.stats.feature_dim {
                            None => rep.stats.feature_dim = Some(d),
                            Some(w) if w != d => rep.errors.push(issue(
                                &pshown,
                                None,
                                format!(
                                    "video `{}` has feature width {d}, other files have {w}",
                                    e.video_id
                                ),
                            )),
                            _ => {}
                        }
                        rep.stats.frames += frames.rows();
                        videos.push(VideoFeatures {
                            video_id: e.video_id.clone(),
                            frames,
                            source: e.source.clone().unwrap_or_else(|| "unknown".into()),
                        });
                    }
                    Err(err) => rep.errors.push(feature_issue(err)),
                }
            }
        }
    }
    let known = |id: &str| declared.as_ref().is_none_or(|d| d.contains(id));

    // Captions.
    let cshown = shown(CAPTIONS_FILE);
    let mut captions = Vec::new();
    match fs::File::open(dir.join(CAPTIONS_FILE)) {
        Err(e) => rep.errors.push(issue(&cshown, None, e.to_string())),
        Ok(f) => {
            let mut seen: HashMap<String, usize> = HashMap::new();
            for (i, line) in BufReader::new(f).lines().enumerate() {
                let ln = Some(i + 1);
                let line = match line {
                    Ok(l) => l,
                    Err(e) => {
                        rep.errors.push(issue(&cshown, ln, e.to_string()));
                        break;
                    }
                };
                if line.trim().is_empty() {
                    continue;
                }
                let rec: CaptionLine = match serde_json::from_str(&line) {
                    Ok(r) => r,
                    Err(e) => {
                        rep.errors.push(issue(&cshown, ln, e.to_string()));
                        continue;
                    }
                };
                let cid = rec.caption_id.clone();
                if let Some(first) = seen.insert(cid.clone(), i + 1) {
                    rep.errors.push(issue(
                        &cshown,
                        ln,
                        format!("caption `{cid}` already defined on line {first}"),
                    ));
                }
                if !known(&rec.video_id) {
                    rep.errors.push(issue(
                        &cshown,
                        ln,
                        format!("caption `{cid}`: unknown video `{}`", rec.video_id),
                    ));
                }
                let parsed = match parse_graph_value(rec.graph) {
                    Ok(p) => p,
                    Err(e) => {
                        rep.errors
                            .push(issue(&cshown, ln, format!("caption `{cid}`: graph.{e}")));
                        continue;
                    }
                };
                for w in parsed.warnings {
                    rep.warnings
                        .push(issue(&cshown, ln, format!("caption `{cid}`: graph.{w}")));
                }
                if tokenize(&rec.sentence) != parsed.graph.tokens {
                    rep.errors.push(issue(
                        &cshown,
                        ln,
                        format!("caption `{cid}`: graph tokens do not match the sentence"),
                    ));
                }
                rep.stats.tokens += parsed.graph.tokens.len();
                captions.push(Caption {
                    caption_id: cid,
                    video_id: rec.video_id,
                    sentence: rec.sentence,
                    graph: parsed.graph,
                });
            }
        }
    }
    let captioned: HashSet<&str> = captions.iter().map(|c| c.video_id.as_str()).collect();
    for v in &videos {
        if !captioned.contains(v.video_id.as_str()) {
            rep.warnings.push(issue(
                &cshown,
                None,
                format!("video `{}` has no caption", v.video_id),
            ));
        }
    }

    // Splits.
    let sshown = shown(SPLITS_FILE);
    let splits = match fs::read_to_string(dir.join(SPLITS_FILE)) {
        Err(e) => {
            rep.errors.push(issue(&sshown, None, e.to_string()));
            None
        }
        Ok(text) => {
            let de = &mut serde_json::Deserializer::from_str(&text);
            match serde_path_to_error::deserialize::<_, Splits>(de) {
                Err(e) => {
                    rep.errors.push(issue(
                        &sshown,
                        Some(e.inner().line()),
                        format!("{}: {}", e.path(), e.inner()),
                    ));
                    None
                }
                Ok(s) => {
                    let mut owner: HashMap<&str, &str> = HashMap::new();
                    for (name, ids) in [("train", &s.train), ("val", &s.val), ("test", &s.test)] {
                        rep.stats.split_sizes.insert(name.into(), ids.len());
                        for id in ids {
                            if !known(id) {
                                rep.errors.push(issue(
                                    &sshown,
                                    None,
                                    format!("{name}: unknown video `{id}`"),
                                ));
                            }
                            if let Some(prev) = owner.insert(id, name) {
                                rep.errors.push(issue(
                                    &sshown,
                                    None,
                                    format!("video `{id}` appears in both {prev} and {name}"),
                                ));
                            }
                        }
                    }
                    Some(s)
                }
            }
        }
    };

    if let Some(v) = vocab {
        let mut cov = VocabCoverage {
            size: v.len(),
            ..Default::default()
        };
        let mut oov = HashSet::new();
        for c in &captions {
            for t in &c.graph.tokens {
                cov.tokens += 1;
                if v.contains(t) {
                    cov.covered_tokens += 1;
                } else {
                    oov.insert(t.clone());
                }
            }
        }
        cov.oov_types = oov.len();
        cov.coverage_pct = if cov.tokens == 0 {
            0.0
        } else {
            100.0 * cov.covered_tokens as f64 / cov.tokens as f64
        };
        rep.stats.vocab = Some(cov);
    }
    rep.stats.videos = videos.len();
    rep.stats.captions = captions.len();
    let ds = splits.map(|splits| Dataset {
        videos,
        captions,
        splits,
    });
    (ds, rep)
}

/// One binary-selection triplet with both caption graphs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TripletRecord {
    pub video_id: String,
    pub kind: PerturbKind,
    pub positive: String,
    pub negative: String,
    pub positive_graph: serde_json::Value,
    pub negative_graph: serde_json::Value,
}

impl TripletRecord {
    /// Parses both graphs; caption ids are `{tag}+` and `{tag}-`.
    pub fn into_triplet(self, tag: &str) -> Result<Triplet, Vec<String>> {
        let graph = |v: serde_json::Value, which: &str| {
            parse_graph_value(v)
                .map(|p| p.graph)
                .map_err(|e| format!("{which}_graph.{e}"))
        };
        match (
            graph(self.positive_graph, "positive"),
            graph(self.negative_graph, "negative"),
        ) {
            (Ok(pg), Ok(ng)) => Ok(Triplet {
                video_id: self.video_id.clone(),
                kind: self.kind,
                positive: Caption {
                    caption_id: format!("{tag}+"),
                    video_id: self.video_id.clone(),
                    sentence: self.positive,
                    graph: pg,
                },
                negative: Caption {
                    caption_id: format!("{tag}-"),
                    video_id: self.video_id,
                    sentence: self.negative,
                    graph: ng,
                },
            }),
            (a, b) => Err(a.err().into_iter().chain(b.err()).collect()),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Triplet {
    pub video_id: String,
    pub kind: PerturbKind,
    pub positive: Caption,
    pub negative: Caption,
}

fn grammar_graph(sentence: &str, grammar: &SyntheticGrammar) -> Result<SemanticRoleGraph, String> {
    let p = parse_caption(sentence, grammar).map_err(|e| e.to_string())?;
    build_graph(p.tokens, &p.frames).map_err(|e| e.to_string())
}

/// Attaches parsed graphs to the benchmark's sentences.
pub fn benchmark_records(
    bench: &BinaryBenchmark,
    grammar: &SyntheticGrammar,
) -> Result<Vec<TripletRecord>, String> {
    bench
        .triplets
        .iter()
        .map(|t| {
            Ok(TripletRecord {
                video_id: t.video_id.clone(),
                kind: t.kind,
                positive: t.positive.clone(),
                negative: t.negative.clone(),
                positive_graph: graph_to_value(&grammar_graph(&t.positive, grammar)?),
                negative_graph: graph_to_value(&grammar_graph(&t.negative, grammar)?),
            })
        })
        .collect()
}

pub fn write_benchmark(path: &Path, records: &[TripletRecord]) -> Result<(), DatasetError> {
    let mut f = fs::File::create(path).map_err(io_err(path))?;
    for r in records {
        writeln!(
            f,
            "{}",
            serde_json::to_string(r).expect("triplet serializes")
        )
        .map_err(io_err(path))?;
    }
    Ok(())
}

pub fn read_benchmark(path: &Path) -> Result<Vec<Triplet>, DatasetError> {
    let shown = path.display().to_string();
    let f = fs::File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    let mut errors = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let err = |msg: String| Issue {
            file: shown.clone(),
            line: Some(i + 1),
            msg,
        };
        let rec: TripletRecord = match serde_json::from_str(&line) {
            Ok(r) => r,
            Err(e) => {
                errors.push(err(e.to_string()));
                continue;
            }
        };
        match rec.into_triplet(&(i + 1).to_string()) {
            Ok(t) => out.push(t),
            Err(msgs) => errors.extend(msgs.into_iter().map(err)),
        }
    }
    if errors.is_empty() {
        Ok(out)
    } else {
        Err(DatasetError::Invalid(errors))
    }
}

/// Feature matrices for `ids`, or the missing ids.
pub fn features_for<'a>(
    ds: &'a Dataset,
    ids: &[String],
) -> Result<Vec<(&'a str, &'a Tensor<f32>)>, Vec<String>> {
    let idx = ds.video_index();
    let mut out = Vec::new();
    let mut missing = Vec::new();
    for id in ids {
        match idx.get(id.as_str()) {
            Some(&i) => out.push((ds.videos[i].video_id.as_str(), &ds.videos[i].frames)),
            None => missing.push(id.clone()),
        }
    }
    if missing.is_empty() {
        Ok(out)
    } else {
        Err(missing)
    }
}

/// Resolves a path argument: absolute or existing paths are used as given;
/// otherwise they are looked up under `$HGR_DATA_DIR` when it is set.
pub fn resolve_data_path(p: &Path) -> PathBuf {
    if p.is_absolute() || p.exists() {
        return p.to_path_buf();
    }
    match std::env::var_os("HGR_DATA_DIR") {
        Some(root) => Path::new(&root).join(p),
        None => p.to_path_buf(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_world, WorldConfig};

    fn small() -> SyntheticDataset {
        generate_world(&WorldConfig {
            n_videos: 12,
            n_val: 2,
            n_test: 4,
            feature_dim: 16,
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn write_load_write_is_byte_identical() {
        let ds = Dataset::from_synthetic(&small());
        let a = tempfile::tempdir().unwrap();
        ds.write(a.path()).unwrap();
        let back = Dataset::load(a.path()).unwrap();
        assert_eq!(back, ds);
        let b = tempfile::tempdir().unwrap();
        back.write(b.path()).unwrap();
        for f in [
            FEATURES_MANIFEST,
            CAPTIONS_FILE,
            SPLITS_FILE,
            "features/v0003.hgrf",
        ] {
            assert_eq!(
                fs::read(a.path().join(f)).unwrap(),
                fs::read(b.path().join(f)).unwrap(),
                "{f}"
            );
        }
    }

    #[test]
    fn validation_lists_every_problem() {
        let ds = Dataset::from_synthetic(&small());
        let dir = tempfile::tempdir().unwrap();
        ds.write(dir.path()).unwrap();
        let hgrf = dir.path().join("features/v0001.hgrf");
        let mut b = fs::read(&hgrf).unwrap();
        b[0] = b'X';
        fs::write(&hgrf, b).unwrap();
        let cpath = dir.path().join(CAPTIONS_FILE);
        let text = fs::read_to_string(&cpath).unwrap();
        let mut lines: Vec<String> = text.lines().map(String::from).collect();
        // Second event node in caption 3.
        let mut v: serde_json::Value = serde_json::from_str(&lines[2]).unwrap();
        v["graph"]["nodes"][1]["level"] = "event".into();
        lines[2] = v.to_string();
        lines[4] = "{broken".into();
        fs::write(&cpath, lines.join("\n") + "\n").unwrap();
        let (_, rep) = load_and_validate(dir.path(), None);
        let msgs: Vec<String> = rep.errors.iter().map(ToString::to_string).collect();
        assert_eq!(msgs.len(), 3, "{msgs:#?}");
        assert!(msgs[0].contains("v0001.hgrf") && msgs[0].contains("magic"));
        assert!(msgs[1].contains(":3:") && msgs[1].contains(&ds.captions[2].caption_id));
        assert!(msgs[2].contains(":5:"));
    }

    #[test]
    fn benchmark_round_trip() {
        let w = small();
        let bench = crate::synth::build_binary_benchmark(&w, 1);
        let recs = benchmark_records(&bench, &w.grammar).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join(BENCHMARK_FILE);
        write_benchmark(&p, &recs).unwrap();
        let back = read_benchmark(&p).unwrap();
        assert_eq!(back.len(), bench.triplets.len());
        assert_eq!(back[0].negative.sentence, bench.triplets[0].negative);
    }
}
