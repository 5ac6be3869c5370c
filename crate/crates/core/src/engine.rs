//! The inference loop: explore, expand, complete, merge, repeat.
//!
//! Each iteration renders the current graph into the exploration prompt. The
//! backend either answers (and the loop stops) or names `(entity, relation)`
//! pairs to expand. Every pair is turned into a retrieval query, the top
//! passages are shown to the backend with the completion prompt, and the
//! extracted triplets are stamped with provenance. Pair results are merged
//! into the graph in pair order once all pairs of the iteration are done,
//! so the outcome does not depend on how the pairs were scheduled.

use std::collections::HashSet;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kg::{normalize_entity, KgContext, RenderStrategy, Triplet, TripletProvenance};
use crate::lmio::{
    build_completion_prompt, build_exploration_prompt, fingerprint, generate_with_retry,
    parse_completion, parse_exploration, Attempt, ExpansionPair, ExplorationOutcome,
    GenerationBackend, LmError, Templates, CORRECTIVE_SUFFIX,
};
use crate::retrieval::{form_query, Retriever};

/// Appended to the exploration prompt once the iteration budget is spent.
pub const FORCE_ANSWER_SUFFIX: &str = "You must answer now.";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EngineError {
    #[error("invalid engine config: {0}")]
    InvalidConfig(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EngineConfig {
    pub max_iterations: usize,
    pub passages_per_query: usize,
    pub strategy: RenderStrategy,
    pub parse_retries: usize,
    pub max_output_tokens: usize,
    /// Worker threads for the per-pair retrieval + completion step.
    #[serde(skip)]
    pub inner_parallelism: usize,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            max_iterations: 5,
            passages_per_query: 5,
            strategy: RenderStrategy::Triplets,
            parse_retries: 1,
            max_output_tokens: 512,
            inner_parallelism: 1,
        }
    }
}

impl EngineConfig {
    pub fn validate(&self) -> Result<(), EngineError> {
        if self.max_iterations == 0 {
            return Err(EngineError::InvalidConfig("max_iterations must be >= 1"));
        }
        if self.passages_per_query == 0 {
            return Err(EngineError::InvalidConfig(
                "passages_per_query must be >= 1",
            ));
        }
        if self.max_output_tokens == 0 {
            return Err(EngineError::InvalidConfig("max_output_tokens must be >= 1"));
        }
        if self.inner_parallelism == 0 {
            return Err(EngineError::InvalidConfig("inner_parallelism must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairRecord {
    /// 1-based position of the pair in the exploration outcome.
    pub pair_index: usize,
    pub pair: ExpansionPair,
    pub is_initial_entity: bool,
    pub query: String,
    pub passage_ids: Vec<String>,
    pub completion_prompt: String,
    pub completion_raw: String,
    pub completion_triplets: Vec<Triplet>,
    pub skipped_lines: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub index: usize,
    /// True for the single answer-forcing exploration after the budget ran out.
    pub forced: bool,
    pub knowledge: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub knowledge_rewrite: Option<Attempt>,
    pub exploration_prompt: String,
    pub exploration_raw: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub exploration_retries: Vec<Attempt>,
    pub outcome: ExplorationOutcome,
    pub pair_records: Vec<PairRecord>,
    /// 1-based indices of pairs skipped as repeats of an earlier pair.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub duplicate_pairs: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureKind {
    Transport,
    Format,
    Template,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum FinalState {
    Answered {
        thought: String,
        answer: String,
    },
    /// The budget ran out; `answer` is empty when even the forced
    /// exploration asked for more expansion.
    Exhausted {
        thought: String,
        answer: String,
    },
    Failed {
        step: String,
        kind: FailureKind,
        message: String,
        #[serde(default, skip_serializing_if = "Vec::is_empty")]
        attempts: Vec<Attempt>,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trajectory {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
    pub question: String,
    pub backend_identity: String,
    pub config: EngineConfig,
    pub iterations: Vec<IterationRecord>,
    #[serde(rename = "final")]
    pub final_state: FinalState,
    #[serde(deserialize_with = "deserialize_kg")]
    pub kg: KgContext,
}

fn deserialize_kg<'de, D>(deserializer: D) -> Result<KgContext, D::Error>
where
    D: serde::Deserializer<'de>,
{
    let value = serde_json::Value::deserialize(deserializer)?;
    crate::kg::kg_from_value(value).map_err(serde::de::Error::custom)
}

impl Trajectory {
    /// The final answer, empty when the run failed or never answered.
    pub fn prediction(&self) -> &str {
        match &self.final_state {
            FinalState::Answered { answer, .. } | FinalState::Exhausted { answer, .. } => answer,
            FinalState::Failed { .. } => "",
        }
    }

    /// `(thought, answer)` when the run produced an answer.
    pub fn thought_and_answer(&self) -> Option<(&str, &str)> {
        match &self.final_state {
            FinalState::Answered { thought, answer }
            | FinalState::Exhausted { thought, answer }
                if !answer.is_empty() =>
            {
                Some((thought, answer))
            }
            _ => None,
        }
    }

    pub fn is_failed(&self) -> bool {
        matches!(self.final_state, FinalState::Failed { .. })
    }

    /// Every `(prompt, generation)` exchanged with the backend, in call
    /// order. Feeding these to a keyed scripted backend replays the run.
    pub fn exchanges(&self) -> Vec<(String, String)> {
        let mut out = Vec::new();
        let mut push = |p: &str, r: &str| out.push((p.to_string(), r.to_string()));
        for it in &self.iterations {
            if let Some(rw) = &it.knowledge_rewrite {
                push(&rw.prompt, &rw.raw);
            }
            for a in &it.exploration_retries {
                push(&a.prompt, &a.raw);
            }
            if it.exploration_retries.is_empty() {
                push(&it.exploration_prompt, &it.exploration_raw);
            } else {
                let corrective = format!("{}\n\n{CORRECTIVE_SUFFIX}", it.exploration_prompt);
                push(&corrective, &it.exploration_raw);
            }
            for p in &it.pair_records {
                push(&p.completion_prompt, &p.completion_raw);
            }
        }
        if let FinalState::Failed { attempts, .. } = &self.final_state {
            for a in attempts {
                push(&a.prompt, &a.raw);
            }
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("trajectory serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    /// Stable file name derived from the question text.
    pub fn file_name(&self) -> String {
        trajectory_file_name(&self.question)
    }
}

pub fn trajectory_file_name(question: &str) -> String {
    format!("{}.json", fingerprint(question))
}

pub fn write_trajectory(dir: &Path, trajectory: &Trajectory) -> io::Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let path = dir.join(trajectory.file_name());
    fs::write(&path, trajectory.to_json())?;
    Ok(path)
}

/// Every `*.json` trajectory in `dir`, sorted by file name.
pub fn read_trajectories(dir: &Path) -> io::Result<Vec<(PathBuf, Trajectory)>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    paths.sort();
    let mut out = Vec::with_capacity(paths.len());
    for path in paths {
        let text = fs::read_to_string(&path)?;
        let t = Trajectory::from_json(&text).map_err(|e| {
            io::Error::new(
                io::ErrorKind::InvalidData,
                format!("{}: {e}", path.display()),
            )
        })?;
        out.push((path, t));
    }
    Ok(out)
}

struct Failure {
    step: String,
    kind: FailureKind,
    message: String,
    attempts: Vec<Attempt>,
}

impl Failure {
    fn from_lm(step: String, err: LmError) -> Self {
        match err {
            LmError::GenerationFormat {
                attempts,
                last_error,
            } => Failure {
                step,
                kind: FailureKind::Format,
                message: last_error.reason,
                attempts,
            },
            LmError::Backend { source, failed } => Failure {
                step,
                kind: FailureKind::Transport,
                message: source.to_string(),
                attempts: failed,
            },
        }
    }

    fn into_final(self) -> FinalState {
        FinalState::Failed {
            step: self.step,
            kind: self.kind,
            message: self.message,
            attempts: self.attempts,
        }
    }
}

/// Collaborators shared by every question of a run.
#[derive(Clone, Copy)]
pub struct Engine<'a> {
    pub backend: &'a dyn GenerationBackend,
    pub retriever: &'a dyn Retriever,
    pub templates: &'a Templates,
    pub config: &'a EngineConfig,
}

impl<'a> Engine<'a> {
    pub fn new(
        backend: &'a dyn GenerationBackend,
        retriever: &'a dyn Retriever,
        templates: &'a Templates,
        config: &'a EngineConfig,
    ) -> Result<Self, EngineError> {
        config.validate()?;
        Ok(Self {
            backend,
            retriever,
            templates,
            config,
        })
    }

    pub fn run_question(&self, id: Option<&str>, question: &str) -> Trajectory {
        let mut trajectory = Trajectory {
            id: id.map(str::to_string),
            question: question.to_string(),
            backend_identity: self.backend.identity().to_string(),
            config: *self.config,
            iterations: Vec::new(),
            final_state: FinalState::Exhausted {
                thought: String::new(),
                answer: String::new(),
            },
            kg: KgContext::new(),
        };
        trajectory.final_state = match self.run_loop(&mut trajectory) {
            Ok(state) => state,
            Err(failure) => {
                tracing::warn!(question, step = %failure.step, "question failed: {}", failure.message);
                failure.into_final()
            }
        };
        trajectory
    }

    fn run_loop(&self, t: &mut Trajectory) -> Result<FinalState, Failure> {
        let budget = self.config.max_iterations;
        for l in 1..=budget {
            let record = self.explore(l, false, &t.question, &t.kg)?;
            let pairs = match &record.outcome {
                ExplorationOutcome::Sufficient { thought, answer } => {
                    let state = FinalState::Answered {
                        thought: thought.clone(),
                        answer: answer.clone(),
                    };
                    t.iterations.push(record);
                    return Ok(state);
                }
                ExplorationOutcome::Expand { pairs } => pairs.clone(),
            };
            t.iterations.push(record);
            let (records, duplicates, failure) = self.expand(l, &pairs, &mut t.kg);
            let current = t.iterations.last_mut().expect("just pushed");
            current.pair_records = records;
            current.duplicate_pairs = duplicates;
            if let Some(failure) = failure {
                return Err(failure);
            }
            for record in &current.pair_records {
                t.kg.merge(record.completion_triplets.iter().cloned());
            }
        }
        let record = self.explore(budget + 1, true, &t.question, &t.kg)?;
        let state = match &record.outcome {
            ExplorationOutcome::Sufficient { thought, answer } => FinalState::Exhausted {
                thought: thought.clone(),
                answer: answer.clone(),
            },
            ExplorationOutcome::Expand { .. } => FinalState::Exhausted {
                thought: String::new(),
                answer: String::new(),
            },
        };
        t.iterations.push(record);
        Ok(state)
    }

    fn explore(
        &self,
        l: usize,
        forced: bool,
        question: &str,
        kg: &KgContext,
    ) -> Result<IterationRecord, Failure> {
        let mut knowledge_rewrite = None;
        let knowledge = match self.config.strategy {
            RenderStrategy::Texts if !kg.is_empty() => {
                let rewrite = |prompt: &str| {
                    let raw = self
                        .backend
                        .generate(prompt, self.config.max_output_tokens)
                        .map_err(|e| e.to_string())?;
                    knowledge_rewrite = Some(Attempt {
                        prompt: prompt.to_string(),
                        raw: raw.clone(),
                    });
                    Ok(raw)
                };
                kg.render(RenderStrategy::Texts, Some(rewrite))
                    .map_err(|e| Failure {
                        step: format!("knowledge rewrite {l}"),
                        kind: FailureKind::Transport,
                        message: e.to_string(),
                        attempts: Vec::new(),
                    })?
            }
            RenderStrategy::Texts => kg.render_triplets(),
            strategy => kg
                .render(strategy, None::<fn(&str) -> Result<String, String>>)
                .expect("non-texts strategies render without a backend"),
        };
        let mut prompt =
            build_exploration_prompt(&self.templates.exploration, question, &knowledge).map_err(
                |e| Failure {
                    step: format!("exploration {l}"),
                    kind: FailureKind::Template,
                    message: e.to_string(),
                    attempts: Vec::new(),
                },
            )?;
        if forced {
            prompt.push_str("\n\n");
            prompt.push_str(FORCE_ANSWER_SUFFIX);
        }
        let retried = generate_with_retry(
            self.backend,
            &prompt,
            parse_exploration,
            self.config.parse_retries,
            self.config.max_output_tokens,
        )
        .map_err(|e| Failure::from_lm(format!("exploration {l}"), e))?;
        if !retried.failed.is_empty() {
            tracing::debug!(
                iteration = l,
                retries = retried.failed.len(),
                "exploration needed retries"
            );
        }
        tracing::debug!(
            iteration = l,
            forced,
            sufficient = retried.value.is_sufficient(),
            "explored"
        );
        Ok(IterationRecord {
            index: l,
            forced,
            knowledge,
            knowledge_rewrite,
            exploration_prompt: prompt,
            exploration_raw: retried.raw,
            exploration_retries: retried.failed,
            outcome: retried.value,
            pair_records: Vec::new(),
            duplicate_pairs: Vec::new(),
        })
    }

    /// Runs retrieval + completion for every distinct pair. Registration of
    /// expansion points happens up front, in pair order, against the graph
    /// as it stood before this iteration.
    fn expand(
        &self,
        l: usize,
        pairs: &[ExpansionPair],
        kg: &mut KgContext,
    ) -> (Vec<PairRecord>, Vec<usize>, Option<Failure>) {
        let mut seen = HashSet::new();
        let mut duplicates = Vec::new();
        let mut jobs = Vec::new();
        for (i, pair) in pairs.iter().enumerate() {
            let entity = normalize_entity(&pair.entity).expect("parser guarantees entities");
            if !seen.insert((entity, pair.relation_hint.clone())) {
                duplicates.push(i + 1);
                continue;
            }
            let is_initial = kg
                .register_expansion_point(&pair.entity)
                .expect("parser guarantees entities");
            jobs.push((i + 1, pair.clone(), is_initial));
        }

        let slots: Vec<Mutex<Option<Result<PairRecord, Failure>>>> =
            jobs.iter().map(|_| Mutex::new(None)).collect();
        let next = AtomicUsize::new(0);
        let width = self.config.inner_parallelism.min(jobs.len()).max(1);
        let work = || loop {
            let k = next.fetch_add(1, Ordering::Relaxed);
            let Some((index, pair, is_initial)) = jobs.get(k) else {
                break;
            };
            let result = self.complete(l, *index, pair, *is_initial);
            *slots[k].lock().expect("slot poisoned") = Some(result);
        };
        if width == 1 {
            work();
        } else {
            std::thread::scope(|s| {
                for _ in 0..width {
                    s.spawn(work);
                }
            });
        }

        let mut records = Vec::with_capacity(jobs.len());
        for slot in slots {
            match slot
                .into_inner()
                .expect("slot poisoned")
                .expect("every job ran")
            {
                Ok(record) => records.push(record),
                Err(failure) => return (records, duplicates, Some(failure)),
            }
        }
        (records, duplicates, None)
    }

    fn complete(
        &self,
        l: usize,
        pair_index: usize,
        pair: &ExpansionPair,
        is_initial_entity: bool,
    ) -> Result<PairRecord, Failure> {
        let step = |what: &str| format!("{what} {l}.{pair_index}");
        let query = form_query(pair);
        let passages = self
            .retriever
            .retrieve(&query, self.config.passages_per_query)
            .map_err(|e| Failure {
                step: step("retrieval"),
                kind: FailureKind::Transport,
                message: e.to_string(),
                attempts: Vec::new(),
            })?;
        let passages: Vec<_> = passages
            .into_iter()
            .take(self.config.passages_per_query)
            .collect();
        let prompt =
            build_completion_prompt(&self.templates.completion, pair, &passages).map_err(|e| {
                Failure {
                    step: step("completion"),
                    kind: FailureKind::Template,
                    message: e.to_string(),
                    attempts: Vec::new(),
                }
            })?;
        let raw = self
            .backend
            .generate(&prompt, self.config.max_output_tokens)
            .map_err(|e| Failure {
                step: step("completion"),
                kind: FailureKind::Transport,
                message: e.to_string(),
                attempts: Vec::new(),
            })?;
        let parsed = parse_completion(&raw);
        let passage_ids: Vec<String> = passages.into_iter().map(|p| p.id).collect();
        let provenance = TripletProvenance {
            iteration: l,
            pair_index,
            source_pair: (pair.entity.clone(), pair.relation_hint.clone()),
            passage_ids: passage_ids.clone(),
        };
        let mut skipped_lines = parsed.skipped;
        let mut completion_triplets = Vec::new();
        for t in parsed.triplets {
            let triplet =
                Triplet::new(t.subject, t.relation, t.object).with_provenance(provenance.clone());
            match triplet.validate() {
                Ok(()) => completion_triplets.push(triplet),
                Err(e) => skipped_lines.push(e.to_string()),
            }
        }
        if !skipped_lines.is_empty() {
            tracing::debug!(
                iteration = l,
                pair_index,
                skipped = skipped_lines.len(),
                "completion lines skipped"
            );
        }
        Ok(PairRecord {
            pair_index,
            pair: pair.clone(),
            is_initial_entity,
            query,
            passage_ids,
            completion_prompt: prompt,
            completion_raw: raw,
            completion_triplets,
            skipped_lines,
        })
    }

    /// Runs every question with up to `width` questions in flight. Results
    /// come back in input order.
    pub fn run_batch(
        &self,
        questions: &[(Option<String>, String)],
        width: usize,
    ) -> Vec<Trajectory> {
        let width = width.max(1).min(questions.len().max(1));
        let slots: Vec<Mutex<Option<Trajectory>>> =
            questions.iter().map(|_| Mutex::new(None)).collect();
        let next = AtomicUsize::new(0);
        let work = || loop {
            let k = next.fetch_add(1, Ordering::Relaxed);
            let Some((id, question)) = questions.get(k) else {
                break;
            };
            let t = self.run_question(id.as_deref(), question);
            *slots[k].lock().expect("slot poisoned") = Some(t);
        };
        if width == 1 {
            work();
        } else {
            std::thread::scope(|s| {
                for _ in 0..width {
                    s.spawn(work);
                }
            });
        }
        slots
            .into_iter()
            .map(|s| {
                s.into_inner()
                    .expect("slot poisoned")
                    .expect("every question ran")
            })
            .collect()
    }
}
