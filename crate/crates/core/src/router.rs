//! The two-stage pipeline: classify the question's task, look the task
//! up in the task-expert map, and obtain the designated expert's answer.
//!
//! The gold task label is never consulted at inference time; the
//! oracle-classifier mode exists only for tests and is marked on every
//! decision it produces.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, Question, TaskLabel};
use crate::error::{Error, Result};
use crate::leaderboard::{ExpertRef, TaskExpertMap};
use crate::llm_client::{ChatModel, ChatRequest, Checkpoint, Stage};
use crate::prompting::{
    parse_classifier, parse_expert, ClassifierOutput, ExpertAnswer, TaskPrediction, TemplateSet,
};
use crate::retrieval::{encode, retrieve, EmbeddingProvider, KnowledgeBase};

/// The full trace of one routed question.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RoutingDecision {
    pub question_id: String,
    pub predicted_task: TaskPrediction,
    pub chosen_expert: ExpertRef,
    pub classifier_raw: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub retrieval_hits: Option<Vec<RetrievalHit>>,
    pub expert_answer: ExpertAnswer,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default)]
    pub oracle_classifier: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RetrievalHit {
    pub question_id: String,
    pub similarity: f64,
}

/// Maps a prediction to its expert: the task's entry for known tasks,
/// the unknown expert otherwise.
pub fn route(map: &TaskExpertMap, prediction: &TaskPrediction) -> Result<ExpertRef> {
    match prediction {
        TaskPrediction::Unknown => Ok(map.unknown_expert.clone()),
        TaskPrediction::Task(t) => map
            .expert_for(t)
            .cloned()
            .ok_or_else(|| Error::Config(format!("task `{t}` has no entry in the task-expert map"))),
    }
}

pub struct RagContext {
    pub kb: KnowledgeBase,
    pub provider: Box<dyn EmbeddingProvider>,
    pub k: usize,
    /// Remove the query's own record before retrieval (leakage-free runs).
    pub exclude_self: bool,
    pub normalize: bool,
}

pub struct Pipeline {
    pub tasks: Vec<TaskLabel>,
    pub classifier: Box<dyn ChatModel>,
    pub experts: HashMap<String, Box<dyn ChatModel>>,
    pub map: TaskExpertMap,
    pub templates: TemplateSet,
    pub rag: Option<RagContext>,
    pub oracle_classifier: bool,
}

impl Pipeline {
    fn retrieve_context(&self, q: &Question) -> Result<Option<crate::retrieval::RetrievalResult>> {
        let Some(rag) = &self.rag else {
            return Ok(None);
        };
        let text = crate::prompting::question_block(q);
        let vector = encode(&text, rag.provider.as_ref(), rag.normalize)?;
        if rag.exclude_self && rag.kb.records.iter().any(|r| r.question_id == q.id) {
            let filtered = KnowledgeBase {
                provider_id: rag.kb.provider_id.clone(),
                dim: rag.kb.dim,
                records: rag
                    .kb
                    .records
                    .iter()
                    .filter(|r| r.question_id != q.id)
                    .cloned()
                    .collect(),
            };
            return Ok(Some(retrieve(&vector, &filtered, rag.k)?));
        }
        Ok(Some(retrieve(&vector, &rag.kb, rag.k)?))
    }

    /// Stage 1: render the classifier prompt (with retrieved context
    /// when a knowledge base is configured), call the classifier, and
    /// parse its commitment.
    pub fn classify(&self, q: &Question) -> Result<(ClassifierOutput, Option<Vec<RetrievalHit>>)> {
        let context = self.retrieve_context(q)?;
        let prompt = self
            .templates
            .render_classifier_prompt(q, &self.tasks, context.as_ref())?;
        let raw = self
            .classifier
            .complete(&ChatRequest::tagged(&prompt.text, &q.id))?;
        let output = parse_classifier(&raw, &self.tasks);
        let hits = context.map(|c| {
            c.hits
                .iter()
                .map(|h| RetrievalHit {
                    question_id: h.question_id.clone(),
                    similarity: h.similarity,
                })
                .collect()
        });
        Ok((output, hits))
    }

    fn expert(&self, expert: &ExpertRef) -> Result<&dyn ChatModel> {
        self.experts
            .get(&expert.name)
            .map(|m| m.as_ref())
            .ok_or_else(|| Error::Config(format!("no endpoint configured for expert `{expert}`")))
    }

    /// The full classify -> route -> answer chain for one question,
    /// checkpointed at both stages. Stage errors are recorded on the
    /// decision rather than aborting the run; classification failures
    /// fall back to the unknown expert.
    pub fn answer(&self, q: &Question, ckpt: &Checkpoint) -> Result<RoutingDecision> {
        let mut trace_error: Option<String> = None;

        let (output, hits) = if self.oracle_classifier {
            let out = ClassifierOutput {
                raw: String::new(),
                predicted: TaskPrediction::Task(q.gold_task.clone()),
            };
            (out, None)
        } else {
            let classified = ckpt.complete_or_skip(&q.id, Stage::Classify, || {
                let context = self.retrieve_context(q)?;
                let prompt =
                    self.templates
                        .render_classifier_prompt(q, &self.tasks, context.as_ref())?;
                let raw = self
                    .classifier
                    .complete(&ChatRequest::tagged(&prompt.text, &q.id))?;
                let output = parse_classifier(&raw, &self.tasks);
                let hits: Vec<RetrievalHit> = context
                    .map(|c| {
                        c.hits
                            .iter()
                            .map(|h| RetrievalHit {
                                question_id: h.question_id.clone(),
                                similarity: h.similarity,
                            })
                            .collect()
                    })
                    .unwrap_or_default();
                Ok((
                    raw,
                    serde_json::json!({
                        "predicted": output.predicted,
                        "hits": hits,
                    }),
                ))
            });
            match classified {
                Ok(rec) => {
                    let output = parse_classifier(&rec.raw, &self.tasks);
                    let hits: Option<Vec<RetrievalHit>> = rec
                        .parsed
                        .get("hits")
                        .and_then(|h| serde_json::from_value(h.clone()).ok())
                        .filter(|v: &Vec<RetrievalHit>| !v.is_empty());
                    (output, hits)
                }
                Err(e @ (Error::Transport { .. } | Error::ContentFilter(_))) => {
                    // The unknown expert is the safety net for
                    // classification failures.
                    trace_error = Some(e.to_string());
                    (
                        ClassifierOutput {
                            raw: String::new(),
                            predicted: TaskPrediction::Unknown,
                        },
                        None,
                    )
                }
                Err(e) => return Err(e),
            }
        };

        let chosen = route(&self.map, &output.predicted)?;
        let expert = self.expert(&chosen)?;

        let answered = ckpt.complete_or_skip(&q.id, Stage::Answer, || {
            let prompt = self.templates.render_expert_prompt(q)?;
            let raw = expert.complete(&ChatRequest::tagged(&prompt.text, &q.id))?;
            let parsed = parse_expert(&raw);
            Ok((raw, serde_json::json!({ "choice": parsed.choice })))
        });
        let expert_answer = match answered {
            Ok(rec) => parse_expert(&rec.raw),
            Err(e @ (Error::Transport { .. } | Error::ContentFilter(_))) => {
                trace_error = Some(match trace_error {
                    Some(prev) => format!("{prev}; {e}"),
                    None => e.to_string(),
                });
                ExpertAnswer {
                    raw: String::new(),
                    choice: crate::prompting::Choice::Unparsed,
                }
            }
            Err(e) => return Err(e),
        };

        Ok(RoutingDecision {
            question_id: q.id.clone(),
            predicted_task: output.predicted,
            chosen_expert: chosen,
            classifier_raw: output.raw,
            retrieval_hits: hits,
            expert_answer,
            error: trace_error,
            oracle_classifier: self.oracle_classifier,
        })
    }

    /// Routes every question in the dataset with bounded parallelism;
    /// decisions come back in dataset order.
    pub fn run(
        &self,
        d: &Dataset,
        ckpt: &Checkpoint,
        parallelism: usize,
    ) -> Result<Vec<RoutingDecision>> {
        crate::llm_client::run_parallel(&d.questions, parallelism, |q| self.answer(q, ckpt))
    }
}

/// Writes a decision log, one JSON record per line.
pub fn save_decisions(decisions: &[RoutingDecision], path: &std::path::Path) -> Result<()> {
    use std::io::Write;
    let mut out = std::fs::File::create(path)?;
    for d in decisions {
        writeln!(out, "{}", serde_json::to_string(d)?)?;
    }
    Ok(())
}

pub fn load_decisions(path: &std::path::Path) -> Result<Vec<RoutingDecision>> {
    use std::io::BufRead;
    let file = std::fs::File::open(path)?;
    let mut decisions = Vec::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let d: RoutingDecision = serde_json::from_str(&line).map_err(|e| Error::Row {
            row: i + 1,
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        decisions.push(d);
    }
    Ok(decisions)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{OptionLetter, Split};
    use crate::llm_client::{FixedChat, ScriptedChat};
    use indexmap::IndexMap;

    fn task(name: &str) -> TaskLabel {
        TaskLabel::new(name).unwrap()
    }

    fn question(id: &str, t: &str, gold: OptionLetter) -> Question {
        Question {
            id: id.to_string(),
            stem: format!("stem for {id}"),
            options: [
                "first".into(),
                "second".into(),
                "third".into(),
                "fourth".into(),
            ],
            gold_answer: gold,
            gold_task: task(t),
            split: Split::Test,
        }
    }

    fn two_task_map() -> TaskExpertMap {
        let mut entries = IndexMap::new();
        entries.insert(task("LogParser"), ExpertRef::new("log-expert"));
        entries.insert(task("Code"), ExpertRef::new("code-expert"));
        TaskExpertMap {
            entries,
            unknown_expert: ExpertRef::new("general-expert"),
        }
    }

    #[test]
    fn unknown_prediction_routes_to_the_unknown_expert() {
        let map = two_task_map();
        let chosen = route(&map, &TaskPrediction::Unknown).unwrap();
        assert_eq!(chosen, ExpertRef::new("general-expert"));
    }

    #[test]
    fn known_task_routes_to_its_mapped_expert() {
        let map = two_task_map();
        let chosen = route(&map, &TaskPrediction::Task(task("Code"))).unwrap();
        assert_eq!(chosen, ExpertRef::new("code-expert"));
        // Task labels match case-insensitively.
        let chosen = route(&map, &TaskPrediction::Task(task("logparser"))).unwrap();
        assert_eq!(chosen, ExpertRef::new("log-expert"));
    }

    #[test]
    fn unmapped_task_is_a_config_error() {
        let map = two_task_map();
        let err = route(&map, &TaskPrediction::Task(task("Deploy"))).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    fn dataset() -> Dataset {
        Dataset::new(
            "synthetic",
            vec![
                question("l0", "LogParser", OptionLetter::A),
                question("l1", "LogParser", OptionLetter::B),
                question("c0", "Code", OptionLetter::C),
                question("c1", "Code", OptionLetter::D),
            ],
        )
        .unwrap()
    }

    fn scripted(pairs: &[(&str, &str)], default: Option<&str>) -> Box<dyn ChatModel> {
        Box::new(ScriptedChat::new(
            "scripted",
            pairs
                .iter()
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .collect(),
            default.map(|s| s.to_string()),
        ))
    }

    fn pipeline(classifier: Box<dyn ChatModel>, oracle: bool) -> Pipeline {
        let mut experts: HashMap<String, Box<dyn ChatModel>> = HashMap::new();
        experts.insert(
            "log-expert".into(),
            scripted(
                &[("l0", "The answer is: (A)"), ("l1", "The answer is: (B)")],
                Some("The answer is: (A)"),
            ),
        );
        experts.insert(
            "code-expert".into(),
            scripted(
                &[("c0", "The answer is: (C)"), ("c1", "The answer is: (D)")],
                Some("The answer is: (A)"),
            ),
        );
        experts.insert(
            "general-expert".into(),
            Box::new(FixedChat::new("general-expert", "The answer is: (D)")),
        );
        Pipeline {
            tasks: vec![task("LogParser"), task("Code")],
            classifier,
            experts,
            map: two_task_map(),
            templates: crate::prompting::TemplateSet::builtin(),
            rag: None,
            oracle_classifier: oracle,
        }
    }

    fn checkpoint(dir: &tempfile::TempDir) -> Checkpoint {
        Checkpoint::open(&dir.path().join("run.ckpt")).unwrap()
    }

    #[test]
    fn correct_classification_reaches_the_right_expert_answers() {
        let classifier = scripted(
            &[
                ("l0", "**Task: [LogParser]**"),
                ("l1", "**Task: [LogParser]**"),
                ("c0", "**Task: [Code]**"),
                ("c1", "**Task: [Code]**"),
            ],
            None,
        );
        let p = pipeline(classifier, false);
        let d = dataset();
        let dir = tempfile::TempDir::new().unwrap();
        let decisions = p.run(&d, &checkpoint(&dir), 2).unwrap();
        assert_eq!(decisions.len(), 4);
        for (dec, q) in decisions.iter().zip(&d.questions) {
            assert_eq!(dec.question_id, q.id);
            assert_eq!(dec.predicted_task, TaskPrediction::Task(q.gold_task.clone()));
            assert_eq!(
                dec.expert_answer.choice,
                crate::prompting::Choice::Letter(q.gold_answer)
            );
            assert!(dec.error.is_none());
            assert!(!dec.oracle_classifier);
        }
        assert_eq!(decisions[0].chosen_expert, ExpertRef::new("log-expert"));
        assert_eq!(decisions[2].chosen_expert, ExpertRef::new("code-expert"));
    }

    #[test]
    fn unclassifiable_output_falls_back_to_the_unknown_expert() {
        let classifier = scripted(&[], Some("I have no idea what this is."));
        let p = pipeline(classifier, false);
        let d = dataset();
        let dir = tempfile::TempDir::new().unwrap();
        let decisions = p.run(&d, &checkpoint(&dir), 1).unwrap();
        for dec in &decisions {
            assert_eq!(dec.predicted_task, TaskPrediction::Unknown);
            assert_eq!(dec.chosen_expert, ExpertRef::new("general-expert"));
        }
    }

    struct FailingChat;

    impl ChatModel for FailingChat {
        fn name(&self) -> &str {
            "failing"
        }
        fn complete(&self, _req: &ChatRequest) -> Result<String> {
            Err(Error::Transport {
                attempts: 4,
                message: "503 upstream".into(),
            })
        }
    }

    #[test]
    fn classifier_transport_failure_is_recorded_and_routes_unknown() {
        let p = pipeline(Box::new(FailingChat), false);
        let d = dataset();
        let dir = tempfile::TempDir::new().unwrap();
        let decisions = p.run(&d, &checkpoint(&dir), 1).unwrap();
        for dec in &decisions {
            assert_eq!(dec.predicted_task, TaskPrediction::Unknown);
            assert_eq!(dec.chosen_expert, ExpertRef::new("general-expert"));
            assert!(dec.error.as_deref().unwrap().contains("503"));
            // The unknown expert still answered.
            assert_eq!(
                dec.expert_answer.choice,
                crate::prompting::Choice::Letter(OptionLetter::D)
            );
        }
    }

    #[test]
    fn oracle_classifier_marks_every_decision() {
        let p = pipeline(Box::new(FailingChat), true);
        let d = dataset();
        let dir = tempfile::TempDir::new().unwrap();
        let decisions = p.run(&d, &checkpoint(&dir), 1).unwrap();
        for (dec, q) in decisions.iter().zip(&d.questions) {
            assert!(dec.oracle_classifier);
            assert_eq!(dec.predicted_task, TaskPrediction::Task(q.gold_task.clone()));
            assert_eq!(
                dec.expert_answer.choice,
                crate::prompting::Choice::Letter(q.gold_answer)
            );
        }
    }

    #[test]
    fn resumed_run_repeats_no_model_calls() {
        use std::sync::atomic::{AtomicUsize, Ordering};

        struct Counting(AtomicUsize);
        impl ChatModel for Counting {
            fn name(&self) -> &str {
                "counting"
            }
            fn complete(&self, _req: &ChatRequest) -> Result<String> {
                self.0.fetch_add(1, Ordering::SeqCst);
                Ok("**Task: [LogParser]**".into())
            }
        }

        let d = dataset();
        let dir = tempfile::TempDir::new().unwrap();
        let first = pipeline(Box::new(Counting(AtomicUsize::new(0))), false);
        let a = first.run(&d, &checkpoint(&dir), 1).unwrap();

        // A classifier that can only fail proves resume never re-calls it.
        let second = pipeline(Box::new(FailingChat), false);
        let b = second.run(&d, &checkpoint(&dir), 1).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.question_id, y.question_id);
            assert_eq!(x.predicted_task, y.predicted_task);
            assert_eq!(x.chosen_expert, y.chosen_expert);
            assert_eq!(x.expert_answer.choice, y.expert_answer.choice);
        }
        assert!(b.iter().all(|dec| dec.error.is_none()));
    }

    #[test]
    fn decision_log_round_trips_through_jsonl() {
        let classifier = scripted(
            &[
                ("l0", "**Task: [LogParser]**"),
                ("l1", "gibberish"),
                ("c0", "**Task: [Code]**"),
                ("c1", "**Task: [Code]**"),
            ],
            None,
        );
        let p = pipeline(classifier, false);
        let d = dataset();
        let dir = tempfile::TempDir::new().unwrap();
        let decisions = p.run(&d, &checkpoint(&dir), 1).unwrap();
        let path = dir.path().join("decisions.jsonl");
        save_decisions(&decisions, &path).unwrap();
        let loaded = load_decisions(&path).unwrap();
        assert_eq!(loaded.len(), decisions.len());
        for (a, b) in loaded.iter().zip(&decisions) {
            assert_eq!(a.question_id, b.question_id);
            assert_eq!(a.predicted_task, b.predicted_task);
            assert_eq!(a.chosen_expert, b.chosen_expert);
            assert_eq!(a.expert_answer.choice, b.expert_answer.choice);
            assert_eq!(a.oracle_classifier, b.oracle_classifier);
        }
    }

    #[test]
    fn malformed_decision_line_errors_with_row_number() {
        let dir = tempfile::TempDir::new().unwrap();
        let path = dir.path().join("decisions.jsonl");
        std::fs::write(&path, "{broken\n").unwrap();
        match load_decisions(&path).unwrap_err() {
            Error::Row { row, .. } => assert_eq!(row, 1),
            other => panic!("expected row error, got {other:?}"),
        }
    }
}
