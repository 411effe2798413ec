//! Exported-vocabulary tokenizer used to decide where the answer label's
//! token boundary falls.
//!
//! The encoder is a greedy longest-match over the vocabulary surfaces. For
//! the short suffixes this harness cares about (`"Answer:"`, `" A"`) this
//! agrees with the real merge-based tokenizer whenever the fused surface is
//! present in the exported vocabulary.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

/// Header directive that overrides the leading-space marker for a vocabulary file.
pub const SPACE_MARKER_DIRECTIVE: &str = "#!space_marker";

#[derive(Debug, thiserror::Error)]
pub enum TokenizerError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: duplicate surface {surface:?}")]
    DuplicateSurface { line: usize, surface: String },
    #[error("line {line}: duplicate token id {id}")]
    DuplicateId { line: usize, id: u32 },
    #[error("token ids are not contiguous from 0: id {missing} is missing")]
    NonContiguousIds { missing: u32 },
    #[error("embedding matrix has {rows} rows but the vocabulary has {vocab} tokens")]
    EmbeddingRowMismatch { rows: usize, vocab: usize },
    #[error("embedding row {row} has {found} columns, expected {expected}")]
    RaggedEmbeddings {
        row: usize,
        expected: usize,
        found: usize,
    },
    #[error("no vocabulary surface covers {ch:?} at byte offset {offset}")]
    Uncoverable { offset: usize, ch: char },
    #[error("text contains the reserved space marker {marker:?} at byte offset {offset}")]
    ReservedMarker { offset: usize, marker: String },
    #[error("unknown token id {0}")]
    UnknownId(u32),
    #[error("label list is empty")]
    EmptyLabels,
    #[error("duplicate label {0:?}")]
    DuplicateLabel(String),
    #[error("tokenizer has no embedding matrix")]
    MissingEmbeddings,
    #[error("embedding row for token {0} has zero norm")]
    ZeroNorm(u32),
}

pub type Result<T> = std::result::Result<T, TokenizerError>;

/// Where the space between the answer cue and the label is tokenized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TokenizationStrategy {
    /// Prompt ends with `"Answer: "`; the scored token is `"X"`.
    #[serde(rename = "letter")]
    LetterOnly,
    /// Prompt ends with `"Answer:"`; the scored token is `" X"`.
    #[serde(rename = "space-letter")]
    SpaceLetter,
}

impl TokenizationStrategy {
    pub const BOTH: [TokenizationStrategy; 2] = [Self::LetterOnly, Self::SpaceLetter];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::LetterOnly => "letter",
            Self::SpaceLetter => "space-letter",
        }
    }

    /// Text appended after the answer cue at the end of the prompt.
    pub fn prompt_suffix(self) -> &'static str {
        match self {
            Self::LetterOnly => " ",
            Self::SpaceLetter => "",
        }
    }

    /// The text scored for a label under this strategy.
    pub fn candidate_surface(self, label: &str) -> String {
        match self {
            Self::LetterOnly => label.to_string(),
            Self::SpaceLetter => format!(" {label}"),
        }
    }
}

impl fmt::Display for TokenizationStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for TokenizationStrategy {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "letter" | "letter-only" | "X" => Ok(Self::LetterOnly),
            "space-letter" | "space_letter" | " X" => Ok(Self::SpaceLetter),
            other => Err(format!(
                "unknown strategy {other:?} (expected `letter` or `space-letter`)"
            )),
        }
    }
}

/// Immutable vocabulary with an optional embedding matrix.
#[derive(Debug, Clone)]
pub struct TokenizerModel {
    /// Surfaces indexed by id, in vocabulary form (leading spaces rendered with the marker).
    surfaces: Vec<String>,
    vocab: HashMap<String, u32>,
    space_marker: String,
    max_surface_chars: usize,
    embeddings: Option<Vec<Vec<f64>>>,
}

impl TokenizerModel {
    /// Builds a model from `(surface, id)` pairs, validating uniqueness and contiguity.
    pub fn from_entries<I, S>(
        entries: I,
        space_marker: impl Into<String>,
        embeddings: Option<Vec<Vec<f64>>>,
    ) -> Result<Self>
    where
        I: IntoIterator<Item = (S, u32)>,
        S: Into<String>,
    {
        let mut by_id: HashMap<u32, String> = HashMap::new();
        let mut vocab = HashMap::new();
        for (i, (surface, id)) in entries.into_iter().enumerate() {
            let surface = surface.into();
            let line = i + 1;
            if surface.is_empty() {
                return Err(TokenizerError::Parse {
                    line,
                    message: "empty surface".into(),
                });
            }
            if vocab.insert(surface.clone(), id).is_some() {
                return Err(TokenizerError::DuplicateSurface { line, surface });
            }
            if by_id.insert(id, surface).is_some() {
                return Err(TokenizerError::DuplicateId { line, id });
            }
        }
        let n = by_id.len() as u32;
        let mut surfaces = Vec::with_capacity(n as usize);
        for id in 0..n {
            match by_id.remove(&id) {
                Some(s) => surfaces.push(s),
                None => return Err(TokenizerError::NonContiguousIds { missing: id }),
            }
        }
        if let Some(rows) = &embeddings {
            if rows.len() != surfaces.len() {
                return Err(TokenizerError::EmbeddingRowMismatch {
                    rows: rows.len(),
                    vocab: surfaces.len(),
                });
            }
            if let Some(first) = rows.first() {
                let expected = first.len();
                if let Some((row, r)) = rows.iter().enumerate().find(|(_, r)| r.len() != expected)
                {
                    return Err(TokenizerError::RaggedEmbeddings {
                        row,
                        expected,
                        found: r.len(),
                    });
                }
            }
        }
        let max_surface_chars = surfaces.iter().map(|s| s.chars().count()).max().unwrap_or(0);
        let space_marker = space_marker.into();
        let space_marker = if space_marker.is_empty() {
            " ".to_string()
        } else {
            space_marker
        };
        Ok(Self {
            surfaces,
            vocab,
            space_marker,
            max_surface_chars,
            embeddings,
        })
    }

    pub fn len(&self) -> usize {
        self.surfaces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.surfaces.is_empty()
    }

    pub fn space_marker(&self) -> &str {
        &self.space_marker
    }

    pub fn has_embeddings(&self) -> bool {
        self.embeddings.is_some()
    }

    /// Vocabulary-form surface of a token.
    pub fn surface(&self, id: u32) -> Option<&str> {
        self.surfaces.get(id as usize).map(String::as_str)
    }

    /// Looks up a plain-text piece (spaces as spaces).
    pub fn token_id(&self, text: &str) -> Option<u32> {
        self.vocab.get(&self.to_vocab_form(text)).copied()
    }

    fn to_vocab_form(&self, text: &str) -> String {
        if self.space_marker == " " {
            text.to_string()
        } else {
            text.replace(' ', &self.space_marker)
        }
    }

    /// Plain-text rendering of one token.
    pub fn token_text(&self, id: u32) -> Result<String> {
        let s = self.surface(id).ok_or(TokenizerError::UnknownId(id))?;
        Ok(if self.space_marker == " " {
            s.to_string()
        } else {
            s.replace(&self.space_marker, " ")
        })
    }

    /// Greedy left-to-right longest-match encoding.
    pub fn encode(&self, text: &str) -> Result<Vec<u32>> {
        // Normalize spaces to the marker, remembering where each original char started.
        let marker_is_space = self.space_marker == " ";
        let mut units: Vec<(usize, String)> = Vec::with_capacity(text.len());
        for (offset, ch) in text.char_indices() {
            if !marker_is_space && text[offset..].starts_with(self.space_marker.as_str()) {
                return Err(TokenizerError::ReservedMarker {
                    offset,
                    marker: self.space_marker.clone(),
                });
            }
            if ch == ' ' {
                units.push((offset, self.space_marker.clone()));
            } else {
                units.push((offset, ch.to_string()));
            }
        }

        let mut ids = Vec::new();
        let mut pos = 0;
        let mut buf = String::new();
        while pos < units.len() {
            let longest = self.max_surface_chars.min(units.len() - pos);
            let mut matched = None;
            for len in (1..=longest).rev() {
                buf.clear();
                for (_, u) in &units[pos..pos + len] {
                    buf.push_str(u);
                }
                if let Some(&id) = self.vocab.get(buf.as_str()) {
                    matched = Some((id, len));
                    break;
                }
            }
            match matched {
                Some((id, len)) => {
                    ids.push(id);
                    pos += len;
                }
                None => {
                    let offset = units[pos].0;
                    let ch = text[offset..].chars().next().unwrap_or('\u{FFFD}');
                    return Err(TokenizerError::Uncoverable { offset, ch });
                }
            }
        }
        Ok(ids)
    }

    /// Concatenates token texts; the inverse of [`encode`](Self::encode).
    pub fn decode(&self, ids: &[u32]) -> Result<String> {
        let mut out = String::new();
        for &id in ids {
            out.push_str(&self.token_text(id)?);
        }
        Ok(out)
    }

    /// Resolves the token sequence scored for each label under `strategy`.
    pub fn resolve_label_tokens(
        &self,
        labels: &[impl AsRef<str>],
        strategy: TokenizationStrategy,
    ) -> Result<LabelTokenSet> {
        if labels.is_empty() {
            return Err(TokenizerError::EmptyLabels);
        }
        let mut seen = HashSet::new();
        let mut entries = Vec::with_capacity(labels.len());
        for label in labels {
            let label = label.as_ref();
            if !seen.insert(label) {
                return Err(TokenizerError::DuplicateLabel(label.to_string()));
            }
            let surface = strategy.candidate_surface(label);
            let ids = self.encode(&surface)?;
            let pieces = ids
                .iter()
                .map(|&id| self.token_text(id))
                .collect::<Result<Vec<_>>>()?;
            entries.push(LabelTokens {
                label: label.to_string(),
                single_token: ids.len() == 1,
                surface,
                ids,
                pieces,
            });
        }
        Ok(LabelTokenSet { strategy, entries })
    }

    /// Pairwise cosine similarity of the embedding rows for `ids`.
    pub fn embedding_similarity(&self, ids: &[u32]) -> Result<Vec<Vec<f64>>> {
        let rows = self
            .embeddings
            .as_ref()
            .ok_or(TokenizerError::MissingEmbeddings)?;
        let mut vecs = Vec::with_capacity(ids.len());
        let mut norms = Vec::with_capacity(ids.len());
        for &id in ids {
            let row = rows.get(id as usize).ok_or(TokenizerError::UnknownId(id))?;
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm == 0.0 || !norm.is_finite() {
                return Err(TokenizerError::ZeroNorm(id));
            }
            vecs.push(row);
            norms.push(norm);
        }
        let n = ids.len();
        let mut sim = vec![vec![0.0; n]; n];
        for i in 0..n {
            sim[i][i] = 1.0;
            for j in i + 1..n {
                let value = if ids[i] == ids[j] {
                    1.0
                } else {
                    let dot: f64 = vecs[i].iter().zip(vecs[j]).map(|(a, b)| a * b).sum();
                    (dot / (norms[i] * norms[j])).clamp(-1.0, 1.0)
                };
                sim[i][j] = value;
                sim[j][i] = value;
            }
        }
        Ok(sim)
    }
}

/// Token sequence scored for one label.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelTokens {
    pub label: String,
    /// Plain text the sequence decodes to (`"A"` or `" A"`).
    pub surface: String,
    pub ids: Vec<u32>,
    /// Plain-text rendering of each token.
    pub pieces: Vec<String>,
    pub single_token: bool,
}

impl LabelTokens {
    /// Text of every token but the last; appended to the prompt before scoring.
    pub fn prefix(&self) -> String {
        self.pieces[..self.pieces.len() - 1].concat()
    }

    /// Text of the final token; the surface actually scored.
    pub fn final_piece(&self) -> &str {
        self.pieces.last().map(String::as_str).unwrap_or("")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelTokenSet {
    pub strategy: TokenizationStrategy,
    pub entries: Vec<LabelTokens>,
}

impl LabelTokenSet {
    pub fn all_single_token(&self) -> bool {
        self.entries.iter().all(|e| e.single_token)
    }
}

fn unescape_surface(raw: &str, line: usize) -> Result<String> {
    let mut out = String::with_capacity(raw.len());
    let mut chars = raw.chars();
    while let Some(c) = chars.next() {
        if c != '\\' {
            out.push(c);
            continue;
        }
        match chars.next() {
            Some('t') => out.push('\t'),
            Some('n') => out.push('\n'),
            Some('r') => out.push('\r'),
            Some('\\') => out.push('\\'),
            other => {
                return Err(TokenizerError::Parse {
                    line,
                    message: format!("bad escape sequence \\{}", other.map(String::from).unwrap_or_default()),
                })
            }
        }
    }
    Ok(out)
}

/// Parses vocabulary text: one `surface<TAB>id` per line. Surfaces may use
/// `\t`, `\n`, `\r` and `\\` escapes. An optional first line
/// `#!space_marker<TAB><marker>` sets the leading-space marker.
pub fn parse_vocab(text: &str) -> Result<(Vec<(String, u32)>, String)> {
    let mut marker = " ".to_string();
    let mut entries = Vec::new();
    let mut surfaces = HashSet::new();
    let mut ids = HashSet::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        if raw.is_empty() {
            continue;
        }
        if let Some(rest) = raw.strip_prefix(SPACE_MARKER_DIRECTIVE) {
            if !entries.is_empty() {
                return Err(TokenizerError::Parse {
                    line,
                    message: "space marker directive must precede all entries".into(),
                });
            }
            let value = rest.strip_prefix('\t').ok_or_else(|| TokenizerError::Parse {
                line,
                message: "expected TAB after space marker directive".into(),
            })?;
            marker = unescape_surface(value, line)?;
            continue;
        }
        let (surface, id) = raw.rsplit_once('\t').ok_or_else(|| TokenizerError::Parse {
            line,
            message: "expected `surface<TAB>id`".into(),
        })?;
        let id: u32 = id.trim().parse().map_err(|_| TokenizerError::Parse {
            line,
            message: format!("invalid token id {id:?}"),
        })?;
        let surface = unescape_surface(surface, line)?;
        if !surfaces.insert(surface.clone()) {
            return Err(TokenizerError::DuplicateSurface { line, surface });
        }
        if !ids.insert(id) {
            return Err(TokenizerError::DuplicateId { line, id });
        }
        entries.push((surface, id));
    }
    Ok((entries, marker))
}

fn parse_embeddings(text: &str) -> Result<Vec<Vec<f64>>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            l.split_whitespace()
                .map(|v| {
                    v.parse::<f64>().map_err(|_| TokenizerError::Parse {
                        line: i + 1,
                        message: format!("invalid embedding value {v:?}"),
                    })
                })
                .collect()
        })
        .collect()
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|source| TokenizerError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Loads a vocabulary file.
pub fn load_vocab(path: impl AsRef<Path>) -> Result<TokenizerModel> {
    let (entries, marker) = parse_vocab(&read(path.as_ref())?)?;
    TokenizerModel::from_entries(entries, marker, None)
}

/// Loads a vocabulary file together with its companion embeddings file.
pub fn load_vocab_with_embeddings(
    vocab: impl AsRef<Path>,
    embeddings: impl AsRef<Path>,
) -> Result<TokenizerModel> {
    let (entries, marker) = parse_vocab(&read(vocab.as_ref())?)?;
    let rows = parse_embeddings(&read(embeddings.as_ref())?)?;
    TokenizerModel::from_entries(entries, marker, Some(rows))
}
