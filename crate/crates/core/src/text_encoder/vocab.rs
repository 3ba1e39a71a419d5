//! Token vocabulary with reserved padding and out-of-vocabulary ids, plus
//! import of pretrained word vectors.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;

use crate::autodiff::{ParameterStore, Real, Tensor};

pub const PAD: usize = 0;
pub const OOV: usize = 1;
pub const PAD_TOKEN: &str = "<pad>";
pub const OOV_TOKEN: &str = "<unk>";

#[derive(Debug, thiserror::Error)]
pub enum VocabError {
    #[error("{path}: {msg}")]
    Format { path: String, msg: String },
    #[error("{path}:{line}: {msg}")]
    Line {
        path: String,
        line: usize,
        msg: String,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    /// Ids 0 and 1 are reserved; the remaining tokens get ids in sorted order.
    pub fn from_tokens<I, S>(tokens: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut words: Vec<String> = tokens.into_iter().map(|t| t.as_ref().to_string()).collect();
        words.sort();
        words.dedup();
        words.retain(|w| w != PAD_TOKEN && w != OOV_TOKEN);
        let mut all = vec![PAD_TOKEN.to_string(), OOV_TOKEN.to_string()];
        all.extend(words);
        Self::from_list(all)
    }

    fn from_list(tokens: Vec<String>) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Vocab { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(OOV)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn ids<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t.as_ref())).collect()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    /// JSON object mapping token to id.
    pub fn to_json(&self) -> String {
        let map: BTreeMap<&str, usize> = self
            .tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.as_str(), i))
            .collect();
        serde_json::to_string_pretty(&map).expect("vocab serialization cannot fail") + "\n"
    }

    pub fn from_json(json: &str, path: &str) -> Result<Self, VocabError> {
        let fmt = |msg: String| VocabError::Format {
            path: path.to_string(),
            msg,
        };
        let map: BTreeMap<String, usize> =
            serde_json::from_str(json).map_err(|e| fmt(e.to_string()))?;
        let mut tokens = vec![None; map.len()];
        for (t, &i) in &map {
            let slot = tokens
                .get_mut(i)
                .ok_or_else(|| fmt(format!("id {i} of `{t}` is not below {}", map.len())))?;
            if slot.is_some() {
                return Err(fmt(format!("id {i} assigned twice")));
            }
            *slot = Some(t.clone());
        }
        let tokens: Vec<String> = tokens
            .into_iter()
            .map(|t| t.expect("ids are a permutation"))
            .collect();
        if tokens.len() < 2 || tokens[PAD] != PAD_TOKEN || tokens[OOV] != OOV_TOKEN {
            return Err(fmt(format!(
                "ids 0 and 1 must be `{PAD_TOKEN}` and `{OOV_TOKEN}`"
            )));
        }
        Ok(Self::from_list(tokens))
    }

    pub fn save(&self, path: &Path) -> Result<(), VocabError> {
        fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, VocabError> {
        Self::from_json(&fs::read_to_string(path)?, &path.display().to_string())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ImportReport {
    pub matched: usize,
    /// Vocabulary tokens (excluding reserved ids) without a vector; they keep
    /// their random initialization.
    pub missing: usize,
}

/// Overwrites rows of `param` (shaped `[vocab × dim]`) from a text file with
/// lines `token v1 … vdim`. Tokens outside the vocabulary are ignored.
pub fn import_embeddings<T: Real>(
    store: &mut ParameterStore<T>,
    param: &str,
    vocab: &Vocab,
    path: &Path,
) -> Result<ImportReport, VocabError> {
    let shown = path.display().to_string();
    let table = store.get(param).ok_or_else(|| VocabError::Format {
        path: shown.clone(),
        msg: format!("no parameter `{param}`"),
    })?;
    let (rows, dim) = table.dims2().expect("embedding is a matrix");
    let mut data = table.data().to_vec();
    let mut seen = vec![false; rows];
    let reader = BufReader::new(fs::File::open(path)?);
    for (ln, line) in reader.lines().enumerate() {
        let line = line?;
        let mut parts = line.split_whitespace();
        let Some(tok) = parts.next() else { continue };
        let vals: Vec<f64> = parts
            .map(|p| p.parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|e| VocabError::Line {
                path: shown.clone(),
                line: ln + 1,
                msg: e.to_string(),
            })?;
        if vals.len() != dim {
            return Err(VocabError::Line {
                path: shown.clone(),
                line: ln + 1,
                msg: format!("expected {dim} values, found {}", vals.len()),
            });
        }
        if let Some(&id) = vocab.index.get(tok) {
            for (k, v) in vals.into_iter().enumerate() {
                data[id * dim + k] = T::from_f64_lossy(v);
            }
            seen[id] = true;
        }
    }
    let matched = seen.iter().filter(|&&s| s).count();
    let missing = (2..vocab.len()).filter(|&i| !seen[i]).count();
    store
        .set(param, Tensor::new(vec![rows, dim], data))
        .expect("same shape");
    Ok(ImportReport { matched, missing })
}
