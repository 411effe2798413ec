//! Run configuration (TOML). Relative paths resolve against the config
//! file's directory.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::backend::{CompletionsAdapter, HttpBackend, MockBackend, MockBackendSpec, RetryPolicy, ScoringBackend};
use crate::metrics::DEFAULT_BINS;
use crate::prompt::{apply_variation, PromptTemplate, RoleWrappers, Variation};
use crate::stats::DEFAULT_BOOTSTRAP_ITERATIONS;
use crate::tokenizer::TokenizationStrategy;

use super::HarnessError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    /// In-process mock driven by a score table file.
    Mock,
    /// `/v1/score` + `/v1/generate` server.
    Endpoint,
    /// OpenAI-style `/v1/completions` with `top_logprobs`.
    Completions,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendConfig {
    pub kind: BackendKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mock_spec: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub endpoint: Option<String>,
    /// Environment variable holding a bearer token.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token_env: Option<String>,
    #[serde(default)]
    pub retry: RetryPolicy,
    /// Model name sent to completions endpoints (defaults to the run's model id).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub remote_model: Option<String>,
    #[serde(default = "default_top_logprobs")]
    pub top_logprobs: u32,
}

fn default_top_logprobs() -> u32 {
    20
}

impl BackendConfig {
    pub fn mock(spec: impl Into<PathBuf>) -> Self {
        Self {
            kind: BackendKind::Mock,
            mock_spec: Some(spec.into()),
            endpoint: None,
            token_env: None,
            retry: RetryPolicy::default(),
            remote_model: None,
            top_logprobs: default_top_logprobs(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemplateConfig {
    /// `base`, `instruct`, or a path to a template TOML file.
    #[serde(default = "default_template_id")]
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub variation: Option<Variation>,
    /// Selects `<language_pack_dir>/<language>.toml` when both are set.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub language: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub language_pack_dir: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub role_wrappers: Option<RoleWrappers>,
}

fn default_template_id() -> String {
    "base".into()
}

impl Default for TemplateConfig {
    fn default() -> Self {
        Self {
            id: default_template_id(),
            variation: None,
            language: None,
            language_pack_dir: None,
            role_wrappers: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PermutationSpec {
    pub count: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BootstrapConfig {
    #[serde(default = "default_iterations")]
    pub iterations: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_iterations() -> usize {
    DEFAULT_BOOTSTRAP_ITERATIONS
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        Self {
            iterations: DEFAULT_BOOTSTRAP_ITERATIONS,
            seed: 0,
        }
    }
}

fn default_strategy() -> TokenizationStrategy {
    TokenizationStrategy::SpaceLetter
}
fn default_bins() -> usize {
    DEFAULT_BINS
}
fn default_parallelism() -> usize {
    1
}
fn default_cache_dir() -> PathBuf {
    PathBuf::from(".labelspace-cache")
}
fn default_cot_max_tokens() -> usize {
    512
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub dataset: PathBuf,
    /// Defaults to the dataset file stem.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset_id: Option<String>,
    /// Split that few-shot exemplars are drawn from; never the evaluated split.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exemplars: Option<PathBuf>,
    #[serde(default)]
    pub exemplar_seed: u64,
    pub vocab: PathBuf,
    pub model: String,
    pub backend: BackendConfig,
    #[serde(default)]
    pub template: TemplateConfig,
    #[serde(default = "default_strategy")]
    pub strategy: TokenizationStrategy,
    #[serde(default)]
    pub shots: usize,
    #[serde(default)]
    pub cot: bool,
    #[serde(default = "default_cot_max_tokens")]
    pub cot_max_tokens: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub permutations: Option<PermutationSpec>,
    #[serde(default)]
    pub bootstrap: BootstrapConfig,
    #[serde(default = "default_bins")]
    pub bins: usize,
    #[serde(default = "default_parallelism")]
    pub parallelism: usize,
    #[serde(default = "default_cache_dir")]
    pub cache_dir: PathBuf,
}

fn resolve(base: &Path, p: &mut PathBuf) {
    if p.is_relative() {
        *p = base.join(&*p);
    }
}

impl RunConfig {
    /// Minimal config with defaults for everything optional.
    pub fn new(
        dataset: impl Into<PathBuf>,
        vocab: impl Into<PathBuf>,
        model: impl Into<String>,
        backend: BackendConfig,
        cache_dir: impl Into<PathBuf>,
    ) -> Self {
        Self {
            dataset: dataset.into(),
            dataset_id: None,
            exemplars: None,
            exemplar_seed: 0,
            vocab: vocab.into(),
            model: model.into(),
            backend,
            template: TemplateConfig::default(),
            strategy: default_strategy(),
            shots: 0,
            cot: false,
            cot_max_tokens: default_cot_max_tokens(),
            permutations: None,
            bootstrap: BootstrapConfig::default(),
            bins: DEFAULT_BINS,
            parallelism: 1,
            cache_dir: cache_dir.into(),
        }
    }

    pub fn from_toml_str(text: &str, base_dir: &Path) -> Result<Self, HarnessError> {
        let mut cfg: RunConfig =
            toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        cfg.resolve_paths(base_dir);
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, HarnessError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_toml_str(&text, base)
    }

    fn resolve_paths(&mut self, base: &Path) {
        resolve(base, &mut self.dataset);
        resolve(base, &mut self.vocab);
        resolve(base, &mut self.cache_dir);
        if let Some(p) = &mut self.exemplars {
            resolve(base, p);
        }
        if let Some(p) = &mut self.backend.mock_spec {
            resolve(base, p);
        }
        if let Some(p) = &mut self.template.language_pack_dir {
            resolve(base, p);
        }
        if !matches!(self.template.id.as_str(), "base" | "instruct") {
            let mut p = PathBuf::from(&self.template.id);
            resolve(base, &mut p);
            self.template.id = p.display().to_string();
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn dataset_id(&self) -> String {
        self.dataset_id.clone().unwrap_or_else(|| {
            self.dataset
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "dataset".into())
        })
    }

    /// Checks invariants and that every referenced file exists.
    pub fn validate(&self) -> Result<(), HarnessError> {
        let must_exist = |p: &Path, what: &str| {
            if p.exists() {
                Ok(())
            } else {
                Err(HarnessError::Config(format!(
                    "{what} {} does not exist",
                    p.display()
                )))
            }
        };
        must_exist(&self.dataset, "dataset")?;
        must_exist(&self.vocab, "vocabulary")?;
        if let Some(p) = &self.exemplars {
            must_exist(p, "exemplar split")?;
        }
        if self.shots > 0 && self.exemplars.is_none() {
            return Err(HarnessError::Config(
                "shots > 0 requires an exemplar split".into(),
            ));
        }
        if self.parallelism < 1 {
            return Err(HarnessError::Config("parallelism must be >= 1".into()));
        }
        if self.bins < 1 {
            return Err(HarnessError::Config("bins must be >= 1".into()));
        }
        if self.bootstrap.iterations < 1 {
            return Err(HarnessError::Config(
                "bootstrap iterations must be >= 1".into(),
            ));
        }
        if self.cot && self.cot_max_tokens < 1 {
            return Err(HarnessError::Config("cot_max_tokens must be >= 1".into()));
        }
        match self.backend.kind {
            BackendKind::Mock => match &self.backend.mock_spec {
                Some(p) => must_exist(p, "mock spec")?,
                None => return Err(HarnessError::Config("mock backend needs mock_spec".into())),
            },
            BackendKind::Endpoint | BackendKind::Completions => {
                if self.backend.endpoint.is_none() {
                    return Err(HarnessError::Config("backend endpoint is not set".into()));
                }
            }
        }
        if let (Some(_), Some(dir)) = (&self.template.language, &self.template.language_pack_dir) {
            must_exist(dir, "language pack directory")?;
        }
        Ok(())
    }

    /// Resolves the prompt template: language pack, built-in, or file; then the variation.
    pub fn resolve_template(&self) -> Result<PromptTemplate, HarnessError> {
        let tc = &self.template;
        let mut template = match (&tc.language, &tc.language_pack_dir) {
            (Some(lang), Some(dir)) => PromptTemplate::load_language_pack(dir, lang)?,
            _ => match tc.id.as_str() {
                "base" => PromptTemplate::base(),
                "instruct" => {
                    let w = tc.role_wrappers.clone().ok_or_else(|| {
                        HarnessError::Config("instruct template needs role_wrappers".into())
                    })?;
                    PromptTemplate::instruct(w)
                }
                path => PromptTemplate::load(path)?,
            },
        };
        // Chat markers are model-specific and always come from the run config.
        if let Some(w) = &tc.role_wrappers {
            template.role_wrappers = Some(w.clone());
        }
        if let Some(v) = tc.variation {
            template = apply_variation(&template, v)?;
        }
        Ok(template)
    }

    /// Builds the configured backend.
    pub fn build_backend(&self) -> Result<Arc<dyn ScoringBackend>, HarnessError> {
        let token = self
            .backend
            .token_env
            .as_ref()
            .and_then(|var| std::env::var(var).ok());
        Ok(match self.backend.kind {
            BackendKind::Mock => {
                let path = self
                    .backend
                    .mock_spec
                    .as_ref()
                    .ok_or_else(|| HarnessError::Config("mock backend needs mock_spec".into()))?;
                Arc::new(MockBackend::new(MockBackendSpec::load(path)?))
            }
            BackendKind::Endpoint => {
                let url = self.backend.endpoint.clone().unwrap_or_default();
                let mut b = HttpBackend::new(url).with_retry(self.backend.retry);
                if let Some(t) = token {
                    b = b.with_bearer_token(t);
                }
                Arc::new(b)
            }
            BackendKind::Completions => {
                let url = self.backend.endpoint.clone().unwrap_or_default();
                let model = self
                    .backend
                    .remote_model
                    .clone()
                    .unwrap_or_else(|| self.model.clone());
                let mut b = CompletionsAdapter::new(url, model, self.backend.top_logprobs)
                    .with_retry(self.backend.retry);
                if let Some(t) = token {
                    b = b.with_bearer_token(t);
                }
                Arc::new(b)
            }
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_and_resolves_paths() {
        let text = r#"
dataset = "data/test.jsonl"
vocab = "vocab.tsv"
model = "m1"
shots = 0

[backend]
kind = "mock"
mock_spec = "mock.json"

[template]
id = "base"
variation = "numbers"
"#;
        let cfg = RunConfig::from_toml_str(text, Path::new("/cfg")).unwrap();
        assert_eq!(cfg.dataset, PathBuf::from("/cfg/data/test.jsonl"));
        assert_eq!(cfg.backend.mock_spec, Some(PathBuf::from("/cfg/mock.json")));
        assert_eq!(cfg.strategy, TokenizationStrategy::SpaceLetter);
        assert_eq!(cfg.bins, 10);
        assert_eq!(cfg.bootstrap.iterations, 10_000);
        assert_eq!(cfg.dataset_id(), "test");
        let t = cfg.resolve_template().unwrap();
        assert_eq!(t.template_id, "base+numbers");
        assert!(cfg.validate().is_err());
        let back = RunConfig::from_toml_str(&cfg.to_toml(), Path::new("/elsewhere")).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn instruct_requires_wrappers() {
        let mut cfg = RunConfig::new("d", "v", "m", BackendConfig::mock("x"), "c");
        cfg.template.id = "instruct".into();
        assert!(matches!(cfg.resolve_template(), Err(HarnessError::Config(_))));
        cfg.template.role_wrappers = Some(RoleWrappers {
            system: "<s>".into(),
            user: "<u>".into(),
            assistant: "<a>".into(),
        });
        assert!(cfg.resolve_template().unwrap().role_wrappers.is_some());
    }
}
