//! Single-strategy evaluation runs.

use std::sync::atomic::{AtomicUsize, Ordering};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backend::{GenerateRequest, ScoreRequest, ScoringBackend};
use crate::fingerprint::{prompt_fingerprint, sha256_hex};
use crate::metrics::{ExampleResult, RunResult};
use crate::prompt::{
    complete_cot_prompt, render_cot_prompt, render_prompt, PromptTemplate, Question, RenderedPrompt,
};
use crate::tokenizer::{load_vocab, LabelTokenSet, TokenizationStrategy, TokenizerModel};

use super::cache::{CacheEntry, CacheKey, CachedGeneration, ResponseCache, ScoredCall};
use super::config::RunConfig;
use super::dataset::load_dataset;
use super::{ExampleFailure, HarnessError};

/// The request an option's logit came from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScoredOption {
    pub prompt_fingerprint: String,
    pub candidate: String,
}

/// Everything recorded about one evaluated example.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExampleRecord {
    pub example_id: String,
    pub gold_index: usize,
    pub predicted_index: usize,
    pub confidence: f64,
    pub correct: bool,
    pub labels: Vec<String>,
    pub logits: Vec<f64>,
    pub distribution: Vec<f64>,
    pub scored_as: Vec<ScoredOption>,
    /// Some label resolved to more than one token.
    pub multi_token_labels: bool,
    /// Multi-token labels did not share a prefix, so options were scored
    /// against different prompts.
    pub divergent_prefixes: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reasoning: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub variant: Option<String>,
}

impl ExampleRecord {
    pub fn example_result(&self) -> ExampleResult {
        ExampleResult {
            example_id: self.example_id.clone(),
            distribution: self.distribution.clone(),
            predicted_index: self.predicted_index,
            confidence: self.confidence,
            correct: self.correct,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunFlags {
    pub multi_token_labels: bool,
    pub divergent_prefixes: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunOutput {
    pub result: RunResult,
    /// Sorted by example id.
    pub records: Vec<ExampleRecord>,
    pub flags: RunFlags,
    pub template_fingerprint: String,
    /// Backend requests issued by this run (zero on a fully warm cache).
    pub backend_calls: usize,
    pub cache_hits: usize,
}

/// Prompts and candidates for one example, grouped by shared label prefix.
struct ScoringPlan {
    requests: Vec<(ScoreRequest, Vec<usize>)>,
    scored_as: Vec<ScoredOption>,
    multi_token: bool,
}

fn plan_scoring(prompt: &RenderedPrompt, tokens: &LabelTokenSet) -> ScoringPlan {
    let mut groups: Vec<(String, Vec<usize>)> = Vec::new();
    for (i, entry) in tokens.entries.iter().enumerate() {
        let prefix = entry.prefix();
        match groups.iter_mut().find(|(p, _)| *p == prefix) {
            Some((_, members)) => members.push(i),
            None => groups.push((prefix, vec![i])),
        }
    }
    let mut scored_as = vec![
        ScoredOption {
            prompt_fingerprint: String::new(),
            candidate: String::new(),
        };
        tokens.entries.len()
    ];
    let requests = groups
        .into_iter()
        .map(|(prefix, members)| {
            let text = format!("{}{}", prompt.text, prefix);
            let fp = prompt_fingerprint(&text);
            let candidates: Vec<String> = members
                .iter()
                .map(|&i| tokens.entries[i].final_piece().to_string())
                .collect();
            for (&i, c) in members.iter().zip(&candidates) {
                scored_as[i] = ScoredOption {
                    prompt_fingerprint: fp.clone(),
                    candidate: c.clone(),
                };
            }
            (ScoreRequest::new(text, candidates), members)
        })
        .collect();
    ScoringPlan {
        requests,
        scored_as,
        multi_token: !tokens.all_single_token(),
    }
}

/// Loaded inputs shared by every run of one configuration.
/// A scored record and whether it came from the cache.
type Outcome = Result<(ExampleRecord, bool), HarnessError>;

pub struct Evaluator<'a> {
    cfg: &'a RunConfig,
    backend: &'a dyn ScoringBackend,
    template: PromptTemplate,
    template_fingerprint: String,
    tokenizer: TokenizerModel,
    questions: Vec<Question>,
    exemplar_pool: Vec<Question>,
    cache: ResponseCache,
    dataset_id: String,
    pool: rayon::ThreadPool,
}

impl<'a> Evaluator<'a> {
    pub fn new(cfg: &'a RunConfig, backend: &'a dyn ScoringBackend) -> Result<Self, HarnessError> {
        cfg.validate()?;
        let template = cfg.resolve_template()?;
        let questions = load_dataset(&cfg.dataset)?;
        let exemplar_pool = match (&cfg.exemplars, cfg.shots) {
            (Some(path), s) if s > 0 => load_dataset(path)?,
            _ => Vec::new(),
        };
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.parallelism)
            .build()
            .map_err(|e| HarnessError::Config(format!("thread pool: {e}")))?;
        Ok(Self {
            cfg,
            backend,
            template_fingerprint: template.fingerprint(),
            template,
            tokenizer: load_vocab(&cfg.vocab)?,
            questions,
            exemplar_pool,
            cache: ResponseCache::open(&cfg.cache_dir)?,
            dataset_id: cfg.dataset_id(),
            pool,
        })
    }

    pub fn questions(&self) -> &[Question] {
        &self.questions
    }

    pub fn template(&self) -> &PromptTemplate {
        &self.template
    }

    pub fn tokenizer(&self) -> &TokenizerModel {
        &self.tokenizer
    }

    pub fn config(&self) -> &RunConfig {
        self.cfg
    }

    /// Few-shot exemplars for `q`: same-subject pool entries in file order,
    /// then the rest of the pool in a seeded order. `q` itself is never used.
    pub fn exemplars_for(&self, q: &Question) -> Result<Vec<Question>, HarnessError> {
        let shots = self.cfg.shots;
        if shots == 0 {
            return Ok(Vec::new());
        }
        let available: Vec<&Question> = self.exemplar_pool.iter().filter(|e| e.id != q.id).collect();
        if available.len() < shots {
            return Err(HarnessError::NotEnoughExemplars {
                example_id: q.id.clone(),
                need: shots,
                have: available.len(),
            });
        }
        let same_subject = |e: &&Question| q.subject.is_some() && e.subject == q.subject;
        let (mut chosen, mut rest): (Vec<&Question>, Vec<&Question>) =
            available.into_iter().partition(same_subject);
        if chosen.len() < shots {
            let id_hash = u64::from_str_radix(&sha256_hex(q.id.as_bytes())[..16], 16)
                .expect("hex digest");
            let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.exemplar_seed ^ id_hash);
            rest.shuffle(&mut rng);
            chosen.extend(rest);
        }
        Ok(chosen.into_iter().take(shots).cloned().collect())
    }

    fn cache_key(&self, q: &Question, strategy: TokenizationStrategy, variant: Option<&str>) -> CacheKey {
        CacheKey {
            dataset_id: self.dataset_id.clone(),
            example_id: q.id.clone(),
            model_id: self.cfg.model.clone(),
            template_fingerprint: self.template_fingerprint.clone(),
            strategy,
            shots: self.cfg.shots,
            cot: self.cfg.cot,
            variant: variant.map(str::to_string),
        }
    }

    fn evaluate_one(
        &self,
        q: &Question,
        strategy: TokenizationStrategy,
        variant: Option<&str>,
        calls: &AtomicUsize,
    ) -> Result<(ExampleRecord, bool), HarnessError> {
        let exemplars = self.exemplars_for(q)?;
        let key = self.cache_key(q, strategy, variant);
        let cached = self.cache.get(&key)?;
        let stale = || HarnessError::StaleCache {
            example_id: q.id.clone(),
        };

        let (prompt, generation) = if self.cfg.cot {
            let gen_prompt = render_cot_prompt(q, &self.template, strategy, &exemplars)?;
            let gen_fp = prompt_fingerprint(&gen_prompt.text);
            let text = match cached.as_ref().and_then(|e| e.generation.as_ref()) {
                Some(g) if g.prompt_fingerprint == gen_fp => g.text.clone(),
                Some(_) => return Err(stale()),
                None if cached.is_some() => return Err(stale()),
                None => {
                    let req = GenerateRequest {
                        prompt: gen_prompt.text.clone(),
                        max_tokens: self.cfg.cot_max_tokens,
                        stop: vec![self.template.answer_cue.clone()],
                    };
                    calls.fetch_add(1, Ordering::Relaxed);
                    self.backend.generate(&req)?
                }
            };
            let completed = complete_cot_prompt(&gen_prompt, &text, &self.template);
            let generation = CachedGeneration {
                prompt_fingerprint: gen_fp,
                text,
            };
            (completed, Some(generation))
        } else {
            (render_prompt(q, &self.template, strategy, &exemplars)?, None)
        };

        let tokens = self.tokenizer.resolve_label_tokens(&prompt.labels, strategy)?;
        let plan = plan_scoring(&prompt, &tokens);

        let (calls_made, from_cache) = match cached {
            Some(entry) => {
                let matches = entry.calls.len() == plan.requests.len()
                    && entry.calls.iter().zip(&plan.requests).all(|(c, (r, _))| {
                        c.prompt_fingerprint == prompt_fingerprint(&r.prompt)
                            && c.candidates == r.candidates
                            && c.logits.len() == r.candidates.len()
                    });
                if !matches {
                    return Err(stale());
                }
                (entry.calls, true)
            }
            None => {
                let mut made = Vec::with_capacity(plan.requests.len());
                for (req, _) in &plan.requests {
                    calls.fetch_add(1, Ordering::Relaxed);
                    let resp = self.backend.score(req)?;
                    resp.check_against(req)?;
                    made.push(ScoredCall {
                        prompt_fingerprint: prompt_fingerprint(&req.prompt),
                        candidates: req.candidates.clone(),
                        logits: resp.logits,
                    });
                }
                self.cache.put(&CacheEntry {
                    key,
                    generation: generation.clone(),
                    calls: made.clone(),
                })?;
                (made, false)
            }
        };

        let mut logits = vec![0.0; q.options.len()];
        for (call, (_, members)) in calls_made.iter().zip(&plan.requests) {
            for (&i, &logit) in members.iter().zip(&call.logits) {
                logits[i] = logit;
            }
        }
        let scored = ExampleResult::from_logits(q.id.clone(), &logits, q.gold_index)?;
        let record = ExampleRecord {
            example_id: q.id.clone(),
            gold_index: q.gold_index,
            predicted_index: scored.predicted_index,
            confidence: scored.confidence,
            correct: scored.correct,
            labels: prompt.labels.clone(),
            logits,
            distribution: scored.distribution,
            divergent_prefixes: plan.requests.len() > 1,
            scored_as: plan.scored_as,
            multi_token_labels: plan.multi_token,
            reasoning: generation.map(|g| g.text),
            variant: variant.map(str::to_string),
        };
        Ok((record, from_cache))
    }

    /// Evaluates `questions` under `strategy`. Every example is attempted;
    /// failures are reported together and successful ones stay cached.
    pub fn run(
        &self,
        strategy: TokenizationStrategy,
        questions: &[Question],
        variant: Option<&str>,
    ) -> Result<RunOutput, HarnessError> {
        let calls = AtomicUsize::new(0);
        let outcomes: Vec<(String, Outcome)> = self.pool.install(|| {
            questions
                .par_iter()
                .map(|q| (q.id.clone(), self.evaluate_one(q, strategy, variant, &calls)))
                .collect()
        });

        let mut records = Vec::with_capacity(outcomes.len());
        let mut failures = Vec::new();
        let mut cache_hits = 0;
        for (id, outcome) in outcomes {
            match outcome {
                Ok((r, hit)) => {
                    cache_hits += usize::from(hit);
                    records.push(r);
                }
                Err(e) => failures.push(ExampleFailure {
                    example_id: id,
                    error: e.to_string(),
                }),
            }
        }
        if !failures.is_empty() {
            failures.sort_by(|a, b| a.example_id.cmp(&b.example_id));
            for f in &failures {
                tracing::error!(example = %f.example_id, error = %f.error, "example failed");
            }
            return Err(HarnessError::ExamplesFailed { failures });
        }

        records.sort_by(|a, b| a.example_id.cmp(&b.example_id));
        let results: Vec<ExampleResult> = records.iter().map(ExampleRecord::example_result).collect();
        let result = RunResult::from_results(
            &results,
            self.cfg.bins,
            strategy,
            self.template.template_id.clone(),
            self.cfg.model.clone(),
            self.dataset_id.clone(),
        )?;
        let flags = RunFlags {
            multi_token_labels: records.iter().any(|r| r.multi_token_labels),
            divergent_prefixes: records.iter().any(|r| r.divergent_prefixes),
        };
        Ok(RunOutput {
            result,
            records,
            flags,
            template_fingerprint: self.template_fingerprint.clone(),
            backend_calls: calls.into_inner(),
            cache_hits,
        })
    }
}

/// Evaluates the configured dataset under `cfg.strategy`.
pub fn run_eval(cfg: &RunConfig, backend: &dyn ScoringBackend) -> Result<RunOutput, HarnessError> {
    let eval = Evaluator::new(cfg, backend)?;
    eval.run(cfg.strategy, eval.questions(), None)
}
