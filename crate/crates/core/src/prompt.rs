//! Prompt rendering for multiple-choice questions.
//!
//! Rendering is byte-exact and purely a function of its inputs. The final
//! line is `"Answer: "` under [`TokenizationStrategy::LetterOnly`] and
//! `"Answer:"` under [`TokenizationStrategy::SpaceLetter`]; everything before
//! it is identical between the two strategies.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::fingerprint::sha256_hex;
use crate::tokenizer::TokenizationStrategy;

pub const BASE_PREAMBLE: &str = "The following are multiple choice questions (with answers).";
pub const INSTRUCT_SYSTEM_PROMPT: &str = "You are a helpful assistant for multiple-choice questions. Always answer strictly in the format \"Answer: X\", where X is the letter of the chosen answer (A, B, C, or D). Do not include any other text or explanation.";
pub const DEFAULT_COT_INSTRUCTION: &str = "Think step by step, then finish with 'Answer: X'.";

#[derive(Debug, thiserror::Error)]
pub enum PromptError {
    #[error("question {id:?} has {options} options but the label style supports at most {max}")]
    TooManyOptions { id: String, options: usize, max: usize },
    #[error("exemplar {0:?} is the evaluated question")]
    ExemplarOverlap(String),
    #[error("variation {variation:?} cannot be applied to template {template:?}: {reason}")]
    IncompatibleVariation {
        variation: Variation,
        template: String,
        reason: String,
    },
    #[error("permutation has length {got}, question has {expected} options")]
    PermutationLength { expected: usize, got: usize },
    #[error("permutation {0:?} is not a bijection")]
    NotAPermutation(Vec<usize>),
    #[error("requested {requested} distinct non-identity permutations of {n} options, only {available} exist")]
    TooManyPermutations {
        n: usize,
        requested: usize,
        available: u128,
    },
    #[error("permutation count must be at least 1")]
    NoPermutations,
    #[error("invalid question {id:?}: {reason}")]
    InvalidQuestion { id: String, reason: String },
    #[error("cannot read template {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid template {path}: {message}")]
    TemplateParse { path: String, message: String },
}

pub type Result<T> = std::result::Result<T, PromptError>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Question {
    pub id: String,
    pub stem: String,
    pub options: Vec<String>,
    pub gold_index: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subject: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub language: Option<String>,
}

impl Question {
    pub fn validate(&self) -> Result<()> {
        let fail = |reason: &str| {
            Err(PromptError::InvalidQuestion {
                id: self.id.clone(),
                reason: reason.to_string(),
            })
        };
        if self.options.len() < 2 {
            return fail("fewer than 2 options");
        }
        if self.gold_index >= self.options.len() {
            return fail("gold index out of range");
        }
        if self.options.iter().any(|o| o.is_empty()) {
            return fail("empty option text");
        }
        Ok(())
    }

    pub fn gold_text(&self) -> &str {
        &self.options[self.gold_index]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelStyle {
    /// `A. text`, scored as `A`.
    Letter,
    /// `(A) text`, scored as `(A)`.
    ParenthesizedLetter,
    /// `1. text`, scored as `1`.
    Number,
}

impl LabelStyle {
    pub fn max_options(self) -> usize {
        match self {
            LabelStyle::Letter | LabelStyle::ParenthesizedLetter => 26,
            LabelStyle::Number => 9,
        }
    }

    /// The answer label for option `i`, as it appears after the answer cue.
    pub fn label(self, i: usize) -> String {
        let letter = (b'A' + i as u8) as char;
        match self {
            LabelStyle::Letter => letter.to_string(),
            LabelStyle::ParenthesizedLetter => format!("({letter})"),
            LabelStyle::Number => (i + 1).to_string(),
        }
    }

    /// The marker that starts option line `i`.
    pub fn option_marker(self, i: usize) -> String {
        match self {
            LabelStyle::Letter | LabelStyle::Number => format!("{}.", self.label(i)),
            LabelStyle::ParenthesizedLetter => self.label(i),
        }
    }

    pub fn labels(self, n: usize) -> Vec<String> {
        (0..n).map(|i| self.label(i)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChoicesPosition {
    AfterQuestion,
    BeforeQuestion,
}

/// Model-specific chat markers, supplied verbatim by configuration.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RoleWrappers {
    pub system: String,
    pub user: String,
    pub assistant: String,
}

fn default_question_cue() -> String {
    "Question:".to_string()
}
fn default_answer_cue() -> String {
    "Answer:".to_string()
}
fn default_cot_instruction() -> String {
    DEFAULT_COT_INSTRUCTION.to_string()
}
fn default_language() -> String {
    "en".to_string()
}
fn default_label_style() -> LabelStyle {
    LabelStyle::Letter
}
fn default_choices_position() -> ChoicesPosition {
    ChoicesPosition::AfterQuestion
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub template_id: String,
    /// Header line for base models; system text for instruct models.
    pub preamble: String,
    #[serde(default = "default_label_style")]
    pub label_style: LabelStyle,
    /// Empty, or a single space placed before each option marker.
    #[serde(default)]
    pub option_line_prefix: String,
    #[serde(default = "default_choices_position")]
    pub choices_position: ChoicesPosition,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub role_wrappers: Option<RoleWrappers>,
    #[serde(default = "default_question_cue")]
    pub question_cue: String,
    #[serde(default = "default_answer_cue")]
    pub answer_cue: String,
    #[serde(default = "default_cot_instruction")]
    pub cot_instruction: String,
    #[serde(default = "default_language")]
    pub language: String,
}

impl PromptTemplate {
    /// Template for base (completion) models.
    pub fn base() -> Self {
        Self {
            template_id: "base".into(),
            preamble: BASE_PREAMBLE.into(),
            label_style: LabelStyle::Letter,
            option_line_prefix: String::new(),
            choices_position: ChoicesPosition::AfterQuestion,
            role_wrappers: None,
            question_cue: default_question_cue(),
            answer_cue: default_answer_cue(),
            cot_instruction: default_cot_instruction(),
            language: default_language(),
        }
    }

    /// Template for chat models; the assistant turn is pre-seeded with the answer cue.
    pub fn instruct(wrappers: RoleWrappers) -> Self {
        Self {
            template_id: "instruct".into(),
            preamble: INSTRUCT_SYSTEM_PROMPT.into(),
            role_wrappers: Some(wrappers),
            ..Self::base()
        }
    }

    pub fn from_toml_str(text: &str, origin: &str) -> Result<Self> {
        let t: Self = toml::from_str(text).map_err(|e| PromptError::TemplateParse {
            path: origin.to_string(),
            message: e.to_string(),
        })?;
        t.validate(origin)?;
        Ok(t)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|source| PromptError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml_str(&text, &path.display().to_string())
    }

    /// Loads `<dir>/<language>.toml`.
    pub fn load_language_pack(dir: impl AsRef<Path>, language: &str) -> Result<Self> {
        let t = Self::load(dir.as_ref().join(format!("{language}.toml")))?;
        if t.language != language {
            return Err(PromptError::TemplateParse {
                path: dir.as_ref().display().to_string(),
                message: format!(
                    "language pack {language:?} declares language {:?}",
                    t.language
                ),
            });
        }
        Ok(t)
    }

    fn validate(&self, origin: &str) -> Result<()> {
        let fail = |message: &str| {
            Err(PromptError::TemplateParse {
                path: origin.to_string(),
                message: message.to_string(),
            })
        };
        if self.answer_cue.is_empty() {
            return fail("answer_cue must be non-empty");
        }
        if !(self.option_line_prefix.is_empty() || self.option_line_prefix == " ") {
            return fail("option_line_prefix must be empty or a single space");
        }
        Ok(())
    }

    /// Stable content hash over every field that affects rendering.
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_string(self).expect("template serializes");
        sha256_hex(json.as_bytes())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("template serializes")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variation {
    Parentheses,
    Numbers,
    SpaceInOptionList,
    ChoicesBeforeQuestion,
}

impl Variation {
    pub const ALL: [Variation; 4] = [
        Variation::Parentheses,
        Variation::Numbers,
        Variation::SpaceInOptionList,
        Variation::ChoicesBeforeQuestion,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Variation::Parentheses => "parentheses",
            Variation::Numbers => "numbers",
            Variation::SpaceInOptionList => "space_in_option_list",
            Variation::ChoicesBeforeQuestion => "choices_before_question",
        }
    }
}

impl std::str::FromStr for Variation {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        Variation::ALL
            .into_iter()
            .find(|v| v.as_str() == s.replace('-', "_"))
            .ok_or_else(|| format!("unknown variation {s:?}"))
    }
}

/// Returns a copy of `template` with one layout field changed. The template
/// id gains a `+<variation>` suffix.
pub fn apply_variation(template: &PromptTemplate, variation: Variation) -> Result<PromptTemplate> {
    let incompatible = |reason: &str| {
        Err(PromptError::IncompatibleVariation {
            variation,
            template: template.template_id.clone(),
            reason: reason.to_string(),
        })
    };
    let mut t = template.clone();
    match variation {
        Variation::Parentheses | Variation::Numbers => {
            if template.label_style != LabelStyle::Letter {
                return incompatible("label style already varied");
            }
            t.label_style = if variation == Variation::Parentheses {
                LabelStyle::ParenthesizedLetter
            } else {
                LabelStyle::Number
            };
        }
        Variation::SpaceInOptionList => {
            if !template.option_line_prefix.is_empty() {
                return incompatible("option lines already have a leading space");
            }
            t.option_line_prefix = " ".into();
        }
        Variation::ChoicesBeforeQuestion => {
            if template.choices_position == ChoicesPosition::BeforeQuestion {
                return incompatible("choices already precede the question");
            }
            t.choices_position = ChoicesPosition::BeforeQuestion;
        }
    }
    t.template_id = format!("{}+{}", template.template_id, variation.as_str());
    Ok(t)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RenderedPrompt {
    pub text: String,
    /// Pieces of `text` that a token-level adapter must encode separately;
    /// their concatenation is `text`. Boundaries fall where the strategy
    /// fixes a token boundary (around each exemplar answer).
    pub segments: Vec<String>,
    /// Answer labels in option order (`A`, `(A)`, `1`, ...).
    pub labels: Vec<String>,
    /// Per-option scoring surface (`"A"` or `" A"`).
    pub candidate_surfaces: Vec<String>,
    pub strategy: TokenizationStrategy,
    pub exemplar_count: usize,
}

/// Accumulates text while tracking forced token boundaries.
#[derive(Default)]
struct SegmentedText {
    segments: Vec<String>,
    current: String,
}

impl SegmentedText {
    fn push(&mut self, s: &str) {
        self.current.push_str(s);
    }

    fn boundary(&mut self) {
        if !self.current.is_empty() {
            self.segments.push(std::mem::take(&mut self.current));
        }
    }

    fn finish(mut self) -> (String, Vec<String>) {
        self.boundary();
        (self.segments.concat(), self.segments)
    }
}

fn check_options(q: &Question, style: LabelStyle) -> Result<()> {
    q.validate()?;
    if q.options.len() > style.max_options() {
        return Err(PromptError::TooManyOptions {
            id: q.id.clone(),
            options: q.options.len(),
            max: style.max_options(),
        });
    }
    Ok(())
}

fn push_options(out: &mut SegmentedText, q: &Question, t: &PromptTemplate) {
    for (i, option) in q.options.iter().enumerate() {
        out.push(&t.option_line_prefix);
        out.push(&t.label_style.option_marker(i));
        out.push(" ");
        out.push(option);
        out.push("\n");
    }
}

/// Question and option lines, each terminated by a newline.
fn push_body(out: &mut SegmentedText, q: &Question, t: &PromptTemplate) {
    let question_line = format!("{} {}\n", t.question_cue, q.stem);
    match t.choices_position {
        ChoicesPosition::AfterQuestion => {
            out.push(&question_line);
            push_options(out, q, t);
        }
        ChoicesPosition::BeforeQuestion => {
            push_options(out, q, t);
            out.push(&question_line);
        }
    }
}

/// `Answer:` followed by the gold label, split where the strategy puts the
/// token boundary.
fn push_answered(out: &mut SegmentedText, q: &Question, t: &PromptTemplate, s: TokenizationStrategy) {
    let label = t.label_style.label(q.gold_index);
    out.push(&t.answer_cue);
    out.push(s.prompt_suffix());
    out.boundary();
    out.push(&s.candidate_surface(&label));
    out.boundary();
}

fn check_exemplars(q: &Question, t: &PromptTemplate, exemplars: &[Question]) -> Result<()> {
    check_options(q, t.label_style)?;
    for ex in exemplars {
        if ex.id == q.id {
            return Err(PromptError::ExemplarOverlap(ex.id.clone()));
        }
        check_options(ex, t.label_style)?;
    }
    Ok(())
}

enum Ending<'a> {
    Answer,
    Cot(&'a str),
}

fn render_inner(
    q: &Question,
    t: &PromptTemplate,
    s: TokenizationStrategy,
    exemplars: &[Question],
    ending: Ending<'_>,
) -> Result<RenderedPrompt> {
    check_exemplars(q, t, exemplars)?;
    let mut out = SegmentedText::default();

    let push_exemplars = |out: &mut SegmentedText| {
        for ex in exemplars {
            push_body(out, ex, t);
            push_answered(out, ex, t, s);
            out.push("\n\n");
        }
    };

    match &t.role_wrappers {
        None => {
            out.push(&t.preamble);
            out.push("\n");
            push_exemplars(&mut out);
            push_body(&mut out, q, t);
            match ending {
                Ending::Answer => {
                    out.push(&t.answer_cue);
                    out.push(s.prompt_suffix());
                }
                Ending::Cot(instruction) => {
                    out.push(instruction);
                    out.push("\n");
                }
            }
        }
        Some(w) => {
            out.push(&w.system);
            out.push("\n");
            out.push(&t.preamble);
            out.push("\n");
            out.push(&w.user);
            out.push("\n");
            push_exemplars(&mut out);
            push_body(&mut out, q, t);
            if let Ending::Cot(instruction) = ending {
                out.push(instruction);
                out.push("\n");
            }
            // The last option line's newline separates the user block from the marker.
            out.push(&w.assistant);
            out.push("\n");
            if let Ending::Answer = ending {
                out.push(&t.answer_cue);
                out.push(s.prompt_suffix());
            }
        }
    }

    let (text, segments) = out.finish();
    let labels = t.label_style.labels(q.options.len());
    let candidate_surfaces = labels.iter().map(|l| s.candidate_surface(l)).collect();
    Ok(RenderedPrompt {
        text,
        segments,
        labels,
        candidate_surfaces,
        strategy: s,
        exemplar_count: exemplars.len(),
    })
}

/// Renders the scoring prompt for `q`, preceded by answered exemplars.
pub fn render_prompt(
    q: &Question,
    t: &PromptTemplate,
    s: TokenizationStrategy,
    exemplars: &[Question],
) -> Result<RenderedPrompt> {
    render_inner(q, t, s, exemplars, Ending::Answer)
}

/// Renders the reasoning-generation prompt for chain-of-thought runs. The
/// returned candidates are those that will be scored after
/// [`complete_cot_prompt`].
pub fn render_cot_prompt(
    q: &Question,
    t: &PromptTemplate,
    s: TokenizationStrategy,
    exemplars: &[Question],
) -> Result<RenderedPrompt> {
    render_inner(q, t, s, exemplars, Ending::Cot(&t.cot_instruction))
}

/// Appends generated reasoning and the answer cue to a reasoning prompt.
pub fn complete_cot_prompt(
    generation_prompt: &RenderedPrompt,
    reasoning: &str,
    t: &PromptTemplate,
) -> RenderedPrompt {
    let s = generation_prompt.strategy;
    let mut out = SegmentedText::default();
    for seg in &generation_prompt.segments {
        out.push(seg);
        out.boundary();
    }
    let reasoning = reasoning.trim();
    if !reasoning.is_empty() {
        out.push(reasoning);
        out.push("\n");
    }
    out.push(&t.answer_cue);
    out.push(s.prompt_suffix());
    let (text, segments) = out.finish();
    RenderedPrompt {
        text,
        segments,
        ..generation_prompt.clone()
    }
}

/// Reorders options so that position `i` holds old option `perm[i]`.
pub fn permute_options(q: &Question, perm: &[usize]) -> Result<Question> {
    let n = q.options.len();
    if perm.len() != n {
        return Err(PromptError::PermutationLength {
            expected: n,
            got: perm.len(),
        });
    }
    let mut seen = vec![false; n];
    for &p in perm {
        if p >= n || std::mem::replace(&mut seen[p], true) {
            return Err(PromptError::NotAPermutation(perm.to_vec()));
        }
    }
    let gold_index = perm
        .iter()
        .position(|&p| p == q.gold_index)
        .expect("bijection covers the gold index");
    Ok(Question {
        options: perm.iter().map(|&p| q.options[p].clone()).collect(),
        gold_index,
        ..q.clone()
    })
}

fn factorial_saturating(n: usize) -> u128 {
    (1..=n as u128).fold(1u128, |acc, k| acc.saturating_mul(k))
}

/// Seeded, pairwise-distinct, non-identity permutations of `0..n_options`.
pub fn generate_permutations(n_options: usize, count: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if count < 1 {
        return Err(PromptError::NoPermutations);
    }
    let available = factorial_saturating(n_options) - 1;
    if count as u128 > available {
        return Err(PromptError::TooManyPermutations {
            n: n_options,
            requested: count,
            available,
        });
    }
    let identity: Vec<usize> = (0..n_options).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let mut perm = identity.clone();
        perm.shuffle(&mut rng);
        if perm != identity && seen.insert(perm.clone()) {
            out.push(perm);
        }
    }
    Ok(out)
}
