//! Capability matrix construction and task-expert mapping.
//!
//! Each expert is scored per task by answer accuracy over the benchmark;
//! the best expert per task forms the mapping, and the expert with the
//! highest count-weighted overall accuracy handles the "unknown" class.

use std::collections::HashMap;
use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, OptionLetter, TaskLabel};
use crate::error::{Error, Result};

/// A named expert model. The name refers to an endpoint configuration.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ExpertRef {
    pub name: String,
}

impl ExpertRef {
    pub fn new(name: impl Into<String>) -> ExpertRef {
        ExpertRef { name: name.into() }
    }
}

impl std::fmt::Display for ExpertRef {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.name)
    }
}

/// Per-(expert, task) accuracy table plus per-task sample counts.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CapabilityMatrix {
    pub version: u32,
    pub dataset: String,
    pub created_at: String,
    pub experts: Vec<ExpertRef>,
    pub tasks: Vec<TaskLabel>,
    /// N_i per task, aligned with `tasks`.
    pub counts: Vec<usize>,
    /// `cells[e][t]` is the accuracy of expert `e` on task `t`.
    pub cells: Vec<Vec<f64>>,
}

impl CapabilityMatrix {
    pub fn validate(&self) -> Result<()> {
        if self.cells.len() != self.experts.len() {
            return Err(Error::Integrity("matrix row count != expert count".into()));
        }
        if self.counts.len() != self.tasks.len() {
            return Err(Error::Integrity("matrix counts != task count".into()));
        }
        for row in &self.cells {
            if row.len() != self.tasks.len() {
                return Err(Error::Integrity("matrix column count != task count".into()));
            }
            for &c in row {
                if !(0.0..=1.0).contains(&c) {
                    return Err(Error::Integrity(format!("cell {c} outside [0,1]")));
                }
            }
        }
        Ok(())
    }

    pub fn cell(&self, expert: usize, task: usize) -> f64 {
        self.cells[expert][task]
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<CapabilityMatrix> {
        let m: CapabilityMatrix = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        m.validate()?;
        Ok(m)
    }
}

/// The mapping from task to its designated expert, with a fallback for
/// the "unknown" class.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TaskExpertMap {
    pub entries: IndexMap<TaskLabel, ExpertRef>,
    pub unknown_expert: ExpertRef,
}

impl TaskExpertMap {
    /// Builds the full mapping from a capability matrix, checking the
    /// candidate-pool bound 2 <= N_expert <= N_task. Pass
    /// `allow_degenerate_pool` to waive the bound for single-expert or
    /// over-provisioned pools.
    pub fn from_matrix(matrix: &CapabilityMatrix, allow_degenerate_pool: bool) -> Result<TaskExpertMap> {
        if !allow_degenerate_pool {
            let n_expert = matrix.experts.len();
            let n_task = matrix.tasks.len();
            if n_expert < 2 || n_expert > n_task {
                return Err(Error::Config(format!(
                    "candidate pool of {n_expert} expert(s) violates 2 <= N_expert <= N_task ({n_task})"
                )));
            }
        }
        Ok(TaskExpertMap {
            entries: select_best(matrix)?,
            unknown_expert: select_unknown(matrix)?,
        })
    }

    pub fn expert_for(&self, task: &TaskLabel) -> Option<&ExpertRef> {
        self.entries.get(task)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<TaskExpertMap> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

/// Answer accuracy of one expert on one task: correct / N_i, with
/// unanswered questions counting as incorrect.
pub fn compute_accuracy(
    answers: &[(String, OptionLetter)],
    d: &Dataset,
    task: &TaskLabel,
) -> Result<f64> {
    let gold: HashMap<&str, OptionLetter> = d
        .questions
        .iter()
        .filter(|q| &q.gold_task == task)
        .map(|q| (q.id.as_str(), q.gold_answer))
        .collect();
    if gold.is_empty() {
        return Err(Error::Integrity(format!("task `{task}` has no questions")));
    }
    let mut seen = std::collections::HashSet::new();
    let mut correct = 0usize;
    for (id, pred) in answers {
        let Some(&g) = gold.get(id.as_str()) else {
            return Err(Error::Integrity(format!(
                "answer for unknown question id `{id}` on task `{task}`"
            )));
        };
        if !seen.insert(id.as_str()) {
            continue;
        }
        if *pred == g {
            correct += 1;
        }
    }
    Ok(correct as f64 / gold.len() as f64)
}

/// Per-expert answer logs: expert -> question id -> predicted letter.
/// Questions an expert never answered, or answered unparseably, are
/// simply absent and score as incorrect.
pub type AnswerLogs = IndexMap<ExpertRef, HashMap<String, OptionLetter>>;

/// Builds the capability matrix from per-expert answer logs.
///
/// Every (expert, task) pair must be covered by at least one answer;
/// absent pairs are reported together in a coverage error.
pub fn build_matrix(logs: &AnswerLogs, d: &Dataset) -> Result<CapabilityMatrix> {
    if logs.is_empty() {
        return Err(Error::Config("no expert answer logs supplied".into()));
    }
    let counts = d.task_counts();
    let task_of: HashMap<&str, &TaskLabel> = d
        .questions
        .iter()
        .map(|q| (q.id.as_str(), &q.gold_task))
        .collect();

    let mut missing = Vec::new();
    let mut cells = Vec::new();
    for (expert, answers) in logs {
        let mut covered: std::collections::HashSet<&TaskLabel> = std::collections::HashSet::new();
        for id in answers.keys() {
            if let Some(t) = task_of.get(id.as_str()) {
                covered.insert(t);
            }
        }
        let mut row = Vec::new();
        for task in &d.tasks {
            if !covered.contains(task) {
                missing.push(format!("({expert}, {task})"));
                row.push(0.0);
                continue;
            }
            let task_answers: Vec<(String, OptionLetter)> = answers
                .iter()
                .filter(|(id, _)| task_of.get(id.as_str()) == Some(&task))
                .map(|(id, &l)| (id.clone(), l))
                .collect();
            row.push(compute_accuracy(&task_answers, d, task)?);
        }
        cells.push(row);
    }
    if !missing.is_empty() {
        return Err(Error::Coverage(missing));
    }

    let m = CapabilityMatrix {
        version: 1,
        dataset: d.name.clone(),
        created_at: chrono::Utc::now().to_rfc3339(),
        experts: logs.keys().cloned().collect(),
        tasks: d.tasks.clone(),
        counts: counts.values().copied().collect(),
        cells,
    };
    m.validate()?;
    Ok(m)
}

#[derive(Serialize, Deserialize)]
struct AnswerLogLine {
    expert: String,
    question_id: String,
    choice: String,
}

/// Writes answer logs as line-delimited records
/// `{expert, question_id, choice}`. Unparseable answers are written as
/// `UNPARSED` and dropped again on load.
pub fn save_answer_logs(logs: &AnswerLogs, path: &Path) -> Result<()> {
    use std::io::Write;
    let mut out = std::fs::File::create(path)?;
    for (expert, answers) in logs {
        let mut ids: Vec<&String> = answers.keys().collect();
        ids.sort();
        for id in ids {
            let line = serde_json::to_string(&AnswerLogLine {
                expert: expert.name.clone(),
                question_id: id.clone(),
                choice: answers[id].as_str().to_string(),
            })?;
            writeln!(out, "{line}")?;
        }
    }
    Ok(())
}

pub fn load_answer_logs(path: &Path) -> Result<AnswerLogs> {
    use std::io::BufRead;
    let file = std::fs::File::open(path)?;
    let mut logs: AnswerLogs = IndexMap::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: AnswerLogLine = serde_json::from_str(&line).map_err(|e| Error::Row {
            row: i + 1,
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        let entry = logs.entry(ExpertRef::new(rec.expert)).or_default();
        if let Some(letter) = OptionLetter::parse(&rec.choice) {
            entry.insert(rec.question_id, letter);
        }
    }
    Ok(logs)
}

/// Argmax expert per task; ties break to the first-listed expert.
pub fn select_best(matrix: &CapabilityMatrix) -> Result<IndexMap<TaskLabel, ExpertRef>> {
    if matrix.experts.is_empty() {
        return Err(Error::Config("empty expert list".into()));
    }
    matrix.validate()?;
    let mut entries = IndexMap::new();
    for (t, task) in matrix.tasks.iter().enumerate() {
        let mut best = 0usize;
        for e in 1..matrix.experts.len() {
            if matrix.cell(e, t) > matrix.cell(best, t) {
                best = e;
            }
        }
        entries.insert(task.clone(), matrix.experts[best].clone());
    }
    Ok(entries)
}


/// Expert with the highest count-weighted overall accuracy
/// (the double sum over all questions divided by N_total);
/// ties break to the first-listed expert.
pub fn select_unknown(matrix: &CapabilityMatrix) -> Result<ExpertRef> {
    if matrix.experts.is_empty() {
        return Err(Error::Config("empty expert list".into()));
    }
    matrix.validate()?;
    let total: usize = matrix.counts.iter().sum();
    if total == 0 {
        return Err(Error::Config("zero total question count".into()));
    }
    let overall = |e: usize| -> f64 {
        let weighted: f64 = matrix
            .counts
            .iter()
            .enumerate()
            .map(|(t, &n)| n as f64 * matrix.cell(e, t))
            .sum();
        weighted / total as f64
    };
    let mut best = 0usize;
    for e in 1..matrix.experts.len() {
        if overall(e) > overall(best) {
            best = e;
        }
    }
    Ok(matrix.experts[best].clone())
}
