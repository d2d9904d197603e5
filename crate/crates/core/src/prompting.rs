//! Prompt rendering and structured-output parsing.
//!
//! The three templates ship as files under `templates/` and use
//! `{placeholder}` substitution. Substitution is single-pass, so braces
//! inside question text are never re-expanded. Parsers are total: any
//! input collapses to UNKNOWN / UNPARSED rather than failing.

use std::fmt;
use std::path::Path;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::dataset::{OptionLetter, Question, TaskLabel};
use crate::error::{Error, Result};
use crate::retrieval::RetrievalResult;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TemplateId {
    ClassifierPlain,
    ClassifierRag,
    ExpertCot,
}

#[derive(Debug, Clone)]
pub struct RenderedPrompt {
    pub text: String,
    pub template_id: TemplateId,
}

/// The task a classifier committed to, or the distinguished unknown class.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum TaskPrediction {
    Task(TaskLabel),
    Unknown,
}

impl TaskPrediction {
    pub fn as_task(&self) -> Option<&TaskLabel> {
        match self {
            TaskPrediction::Task(t) => Some(t),
            TaskPrediction::Unknown => None,
        }
    }
}

impl fmt::Display for TaskPrediction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TaskPrediction::Task(t) => f.write_str(t.display()),
            TaskPrediction::Unknown => f.write_str("UNKNOWN"),
        }
    }
}

impl Serialize for TaskPrediction {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for TaskPrediction {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        if s == "UNKNOWN" {
            Ok(TaskPrediction::Unknown)
        } else {
            TaskLabel::new(s)
                .map(TaskPrediction::Task)
                .map_err(serde::de::Error::custom)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierOutput {
    pub raw: String,
    pub predicted: TaskPrediction,
}

/// The option letter an expert committed to, or UNPARSED.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Choice {
    Letter(OptionLetter),
    Unparsed,
}

impl Serialize for Choice {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Choice::Letter(l) => s.serialize_str(l.as_str()),
            Choice::Unparsed => s.serialize_str("UNPARSED"),
        }
    }
}

impl<'de> Deserialize<'de> for Choice {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        if s == "UNPARSED" {
            return Ok(Choice::Unparsed);
        }
        OptionLetter::parse(&s)
            .map(Choice::Letter)
            .ok_or_else(|| serde::de::Error::custom(format!("`{s}` is not an option letter")))
    }
}

impl Choice {
    pub fn letter(&self) -> Option<OptionLetter> {
        match self {
            Choice::Letter(l) => Some(*l),
            Choice::Unparsed => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertAnswer {
    pub raw: String,
    pub choice: Choice,
}

/// The three prompt templates.
pub struct TemplateSet {
    classifier_plain: String,
    classifier_rag: String,
    expert_cot: String,
}

impl TemplateSet {
    /// The templates shipped with the crate.
    pub fn builtin() -> TemplateSet {
        TemplateSet {
            classifier_plain: include_str!("../templates/classifier_plain.txt").to_string(),
            classifier_rag: include_str!("../templates/classifier_rag.txt").to_string(),
            expert_cot: include_str!("../templates/expert_cot.txt").to_string(),
        }
    }

    /// Loads `classifier_plain.txt`, `classifier_rag.txt`, and
    /// `expert_cot.txt` from a directory, for task scenarios that swap
    /// prompts without rebuilding.
    pub fn from_dir(dir: &Path) -> Result<TemplateSet> {
        let read = |name: &str| -> Result<String> {
            std::fs::read_to_string(dir.join(name)).map_err(|e| {
                Error::Config(format!("cannot read template {}: {e}", dir.join(name).display()))
            })
        };
        Ok(TemplateSet {
            classifier_plain: read("classifier_plain.txt")?,
            classifier_rag: read("classifier_rag.txt")?,
            expert_cot: read("expert_cot.txt")?,
        })
    }

    pub fn render_classifier_prompt(
        &self,
        q: &Question,
        tasks: &[TaskLabel],
        context: Option<&RetrievalResult>,
    ) -> Result<RenderedPrompt> {
        if tasks.is_empty() {
            return Err(Error::Config("task list is empty".into()));
        }
        let task_list = tasks
            .iter()
            .map(|t| t.display().to_string())
            .collect::<Vec<_>>()
            .join(", ");
        let mut vars = vec![
            ("task_list", task_list),
            ("question", q.stem.clone()),
            ("option_a", q.options[0].clone()),
            ("option_b", q.options[1].clone()),
            ("option_c", q.options[2].clone()),
            ("option_d", q.options[3].clone()),
        ];
        let (template, id) = match context {
            None => (&self.classifier_plain, TemplateId::ClassifierPlain),
            Some(result) => {
                if result.hits.is_empty() {
                    return Err(Error::Config("retrieval context has no hits".into()));
                }
                vars.push(("context", render_context(result)));
                (&self.classifier_rag, TemplateId::ClassifierRag)
            }
        };
        Ok(RenderedPrompt {
            text: substitute(template, &vars)?,
            template_id: id,
        })
    }

    pub fn render_expert_prompt(&self, q: &Question) -> Result<RenderedPrompt> {
        let vars = [
            ("question", q.stem.clone()),
            ("option_a", q.options[0].clone()),
            ("option_b", q.options[1].clone()),
            ("option_c", q.options[2].clone()),
            ("option_d", q.options[3].clone()),
        ];
        Ok(RenderedPrompt {
            text: substitute(&self.expert_cot, &vars)?,
            template_id: TemplateId::ExpertCot,
        })
    }
}

/// The question block as it appears inside the classifier prompts; also
/// the text that gets embedded for knowledge-base records.
pub fn question_block(q: &Question) -> String {
    format!(
        "{}\nA.{}\nB.{}\nC.{}\nD.{}",
        q.stem, q.options[0], q.options[1], q.options[2], q.options[3]
    )
}

/// Numbered context lines for the RAG prompt, one retrieved record each.
fn render_context(result: &RetrievalResult) -> String {
    result
        .hits
        .iter()
        .enumerate()
        .map(|(i, hit)| format!("{}. Question: {} → Task: {}", i + 1, hit.text, hit.task))
        .collect::<Vec<_>>()
        .join("\n")
}

/// Single-pass `{placeholder}` substitution. Every placeholder in the
/// template must be supplied; substituted values are inserted literally.
fn substitute(template: &str, vars: &[(&str, String)]) -> Result<String> {
    let mut out = String::with_capacity(template.len());
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let after = &rest[open + 1..];
        match after.find('}') {
            Some(close) => {
                let name = &after[..close];
                match vars.iter().find(|(k, _)| *k == name) {
                    Some((_, value)) => out.push_str(value),
                    None => {
                        return Err(Error::Config(format!(
                            "template placeholder `{{{name}}}` has no value"
                        )))
                    }
                }
                rest = &after[close + 1..];
            }
            None => {
                out.push_str(&rest[open..]);
                rest = "";
            }
        }
    }
    out.push_str(rest);
    Ok(out)
}

fn classifier_pattern() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        // "**Task: [name] **" tolerating absent brackets, absent trailing
        // space, and surrounding whitespace.
        Regex::new(r"\*\*\s*Task:\s*\[?\s*([^\[\]*]*?)\s*\]?\s*\*\*").unwrap()
    })
}

/// Extracts the LAST task commitment from classifier output. A capture
/// that matches no configured task, or a missing pattern, is UNKNOWN.
pub fn parse_classifier(raw: &str, tasks: &[TaskLabel]) -> ClassifierOutput {
    let mut predicted = TaskPrediction::Unknown;
    if let Some(m) = classifier_pattern().captures_iter(raw).last() {
        let captured = m.get(1).map(|g| g.as_str().trim()).unwrap_or("");
        if !captured.is_empty() {
            if let Ok(label) = TaskLabel::new(captured) {
                if let Some(t) = tasks.iter().find(|t| **t == label) {
                    predicted = TaskPrediction::Task(t.clone());
                }
            }
        }
    }
    ClassifierOutput {
        raw: raw.to_string(),
        predicted,
    }
}

fn expert_pattern() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        // "the answer is (X)" tolerating missing parentheses and
        // trailing punctuation.
        Regex::new(r"(?i)the\s+answer\s+is\s*:?\s*\(?\s*([A-Da-d])\s*\)?").unwrap()
    })
}

/// Extracts the LAST answer commitment from expert output, falling back
/// to the last standalone option letter token; otherwise UNPARSED.
pub fn parse_expert(raw: &str) -> ExpertAnswer {
    let mut choice = Choice::Unparsed;
    if let Some(m) = expert_pattern().captures_iter(raw).last() {
        let letter = m.get(1).unwrap().as_str().to_uppercase();
        if let Some(l) = OptionLetter::parse(&letter) {
            choice = Choice::Letter(l);
        }
    } else if let Some(l) = last_standalone_letter(raw) {
        choice = Choice::Letter(l);
    }
    ExpertAnswer {
        raw: raw.to_string(),
        choice,
    }
}

fn last_standalone_letter(raw: &str) -> Option<OptionLetter> {
    let chars: Vec<char> = raw.chars().collect();
    for (i, &c) in chars.iter().enumerate().rev() {
        if !matches!(c, 'A' | 'B' | 'C' | 'D') {
            continue;
        }
        let prev_ok = i == 0 || !chars[i - 1].is_alphanumeric();
        let next_ok = i + 1 == chars.len() || !chars[i + 1].is_alphanumeric();
        if prev_ok && next_ok {
            return OptionLetter::parse(&c.to_string());
        }
    }
    None
}
