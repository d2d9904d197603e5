//! Scoring of decision logs and answer logs: accuracy, support-weighted
//! precision/recall/F1, confusion matrices, baselines, and plot-ready
//! exports.
//!
//! Predictions outside every gold class (UNPARSED answers, UNKNOWN task
//! labels) stay in the denominator and in their own confusion column but
//! never count toward any class's true positives.

use std::collections::HashMap;
use std::path::Path;

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, OptionLetter, TaskLabel};
use crate::error::{Error, Result};
use crate::leaderboard::{AnswerLogs, ExpertRef, TaskExpertMap};
use crate::prompting::{Choice, TaskPrediction};
use crate::router::RoutingDecision;

/// Gold-row by predicted-column count matrix. Predicted labels may carry
/// one extra sink column (UNPARSED / UNKNOWN) beyond the gold labels.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Confusion {
    pub gold_labels: Vec<String>,
    pub pred_labels: Vec<String>,
    pub counts: Vec<Vec<u64>>,
}

impl Confusion {
    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn row_sums(&self) -> Vec<u64> {
        self.counts.iter().map(|r| r.iter().sum()).collect()
    }

    fn col_sum(&self, col: usize) -> u64 {
        self.counts.iter().map(|r| r[col]).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Averaging {
    /// Support-weighted per-class averaging (weighted recall equals
    /// accuracy on full-coverage logs).
    Weighted,
    Macro,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub subject: String,
    pub n: usize,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Per-task accuracy, in dataset task order.
    pub per_task: IndexMap<TaskLabel, f64>,
    pub confusion: Confusion,
}

/// Metrics from a confusion matrix whose first `gold_labels.len()`
/// predicted columns align with the gold rows.
fn metrics_from_confusion(confusion: &Confusion, averaging: Averaging) -> (f64, f64, f64, f64) {
    let n_classes = confusion.gold_labels.len();
    let n = confusion.total() as f64;
    let mut correct = 0u64;
    let mut precision = 0.0;
    let mut recall = 0.0;
    let mut f1 = 0.0;
    let mut macro_classes = 0usize;
    for c in 0..n_classes {
        let tp = confusion.counts[c][c];
        correct += tp;
        let support: u64 = confusion.counts[c].iter().sum();
        if support == 0 {
            continue;
        }
        let predicted = confusion.col_sum(c);
        let p = if predicted == 0 {
            0.0
        } else {
            tp as f64 / predicted as f64
        };
        let r = tp as f64 / support as f64;
        let f = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
        match averaging {
            Averaging::Weighted => {
                let w = support as f64 / n;
                precision += w * p;
                recall += w * r;
                f1 += w * f;
            }
            Averaging::Macro => {
                precision += p;
                recall += r;
                f1 += f;
                macro_classes += 1;
            }
        }
    }
    if averaging == Averaging::Macro && macro_classes > 0 {
        precision /= macro_classes as f64;
        recall /= macro_classes as f64;
        f1 /= macro_classes as f64;
    }
    let accuracy = if n == 0.0 { 0.0 } else { correct as f64 / n };
    (accuracy, precision, recall, f1)
}

/// Scores answer-letter predictions over every question of the dataset.
/// Questions without a prediction score as UNPARSED (incorrect).
pub fn score_qa(
    preds: &HashMap<String, Choice>,
    d: &Dataset,
    subject: &str,
    averaging: Averaging,
) -> Result<EvalReport> {
    let known: std::collections::HashSet<&str> =
        d.questions.iter().map(|q| q.id.as_str()).collect();
    for id in preds.keys() {
        if !known.contains(id.as_str()) {
            return Err(Error::Integrity(format!("prediction for unknown id `{id}`")));
        }
    }

    let gold_labels: Vec<String> = OptionLetter::ALL.iter().map(|l| l.to_string()).collect();
    let mut pred_labels = gold_labels.clone();
    pred_labels.push("UNPARSED".to_string());
    let mut counts = vec![vec![0u64; pred_labels.len()]; gold_labels.len()];

    let mut per_task_correct: IndexMap<TaskLabel, (usize, usize)> = IndexMap::new();
    for t in &d.tasks {
        per_task_correct.insert(t.clone(), (0, 0));
    }
    for q in &d.questions {
        let choice = preds.get(&q.id).copied().unwrap_or(Choice::Unparsed);
        let col = match choice.letter() {
            Some(l) => l.index(),
            None => 4,
        };
        counts[q.gold_answer.index()][col] += 1;
        let entry = per_task_correct.get_mut(&q.gold_task).unwrap();
        entry.1 += 1;
        if choice.letter() == Some(q.gold_answer) {
            entry.0 += 1;
        }
    }

    let confusion = Confusion {
        gold_labels,
        pred_labels,
        counts,
    };
    let (accuracy, precision, recall, f1) = metrics_from_confusion(&confusion, averaging);
    Ok(EvalReport {
        subject: subject.to_string(),
        n: d.questions.len(),
        accuracy,
        precision,
        recall,
        f1,
        per_task: per_task_correct
            .into_iter()
            .map(|(t, (c, n))| (t, c as f64 / n as f64))
            .collect(),
        confusion,
    })
}

/// Scores a routed decision log as QA.
pub fn score_decisions(
    decisions: &[RoutingDecision],
    d: &Dataset,
    subject: &str,
    averaging: Averaging,
) -> Result<EvalReport> {
    let preds: HashMap<String, Choice> = decisions
        .iter()
        .map(|dec| (dec.question_id.clone(), dec.expert_answer.choice))
        .collect();
    score_qa(&preds, d, subject, averaging)
}

/// Scores task-label predictions. The confusion matrix gains an UNKNOWN
/// prediction column; there is never an UNKNOWN gold row.
pub fn score_classification(
    preds: &HashMap<String, TaskPrediction>,
    d: &Dataset,
    subject: &str,
    averaging: Averaging,
) -> Result<EvalReport> {
    let known: std::collections::HashSet<&str> =
        d.questions.iter().map(|q| q.id.as_str()).collect();
    for id in preds.keys() {
        if !known.contains(id.as_str()) {
            return Err(Error::Integrity(format!("prediction for unknown id `{id}`")));
        }
    }

    let gold_labels: Vec<String> = d.tasks.iter().map(|t| t.display().to_string()).collect();
    let mut pred_labels = gold_labels.clone();
    pred_labels.push("UNKNOWN".to_string());
    let task_col: HashMap<TaskLabel, usize> = d
        .tasks
        .iter()
        .enumerate()
        .map(|(i, t)| (t.clone(), i))
        .collect();
    let mut counts = vec![vec![0u64; pred_labels.len()]; gold_labels.len()];

    let mut per_task_correct: IndexMap<TaskLabel, (usize, usize)> = IndexMap::new();
    for t in &d.tasks {
        per_task_correct.insert(t.clone(), (0, 0));
    }
    for q in &d.questions {
        let pred = preds.get(&q.id).cloned().unwrap_or(TaskPrediction::Unknown);
        let col = match &pred {
            TaskPrediction::Task(t) => task_col.get(t).copied().unwrap_or(gold_labels.len()),
            TaskPrediction::Unknown => gold_labels.len(),
        };
        let row = task_col[&q.gold_task];
        counts[row][col] += 1;
        let entry = per_task_correct.get_mut(&q.gold_task).unwrap();
        entry.1 += 1;
        if pred.as_task() == Some(&q.gold_task) {
            entry.0 += 1;
        }
    }

    let confusion = Confusion {
        gold_labels,
        pred_labels,
        counts,
    };
    let (accuracy, precision, recall, f1) = metrics_from_confusion(&confusion, averaging);
    Ok(EvalReport {
        subject: subject.to_string(),
        n: d.questions.len(),
        accuracy,
        precision,
        recall,
        f1,
        per_task: per_task_correct
            .into_iter()
            .map(|(t, (c, n))| (t, c as f64 / n as f64))
            .collect(),
        confusion,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum BaselineSpec {
    /// Everything goes to one expert.
    SingleExpert { expert: String },
    /// Uniformly random expert per question (seeded, reproducible).
    RandomCoe { seed: u64 },
    /// Routes by gold task through the map; the ensemble's ceiling.
    OracleRouter,
}

/// Runs a baseline over per-expert answer logs.
pub fn run_baseline(
    spec: &BaselineSpec,
    logs: &AnswerLogs,
    d: &Dataset,
    map: Option<&TaskExpertMap>,
    averaging: Averaging,
) -> Result<EvalReport> {
    if logs.is_empty() {
        return Err(Error::Config("no expert answer logs supplied".into()));
    }
    let lookup = |expert: &ExpertRef, id: &str| -> Result<Choice> {
        let log = logs
            .get(expert)
            .ok_or_else(|| Error::Config(format!("no answer log for expert `{expert}`")))?;
        Ok(log.get(id).map(|&l| Choice::Letter(l)).unwrap_or(Choice::Unparsed))
    };

    let (subject, preds) = match spec {
        BaselineSpec::SingleExpert { expert } => {
            let e = ExpertRef::new(expert.clone());
            let mut preds = HashMap::new();
            for q in &d.questions {
                preds.insert(q.id.clone(), lookup(&e, &q.id)?);
            }
            (expert.clone(), preds)
        }
        BaselineSpec::RandomCoe { seed } => {
            let experts: Vec<&ExpertRef> = logs.keys().collect();
            let mut rng = ChaCha8Rng::seed_from_u64(*seed);
            let mut preds = HashMap::new();
            for q in &d.questions {
                let e = experts[rng.gen_range(0..experts.len())];
                preds.insert(q.id.clone(), lookup(e, &q.id)?);
            }
            (format!("random-coe(seed={seed})"), preds)
        }
        BaselineSpec::OracleRouter => {
            let map = map.ok_or_else(|| {
                Error::Config("oracle-router baseline needs a task-expert map".into())
            })?;
            let mut preds = HashMap::new();
            for q in &d.questions {
                let e = map.expert_for(&q.gold_task).ok_or_else(|| {
                    Error::Config(format!("task `{}` has no entry in the map", q.gold_task))
                })?;
                preds.insert(q.id.clone(), lookup(e, &q.id)?);
            }
            ("oracle-router".to_string(), preds)
        }
    };
    score_qa(&preds, d, &subject, averaging)
}

/// One row per report: `subject,n,accuracy,precision,recall,f1`.
pub fn metrics_csv(reports: &[EvalReport]) -> String {
    let mut out = String::from("subject,n,accuracy,precision,recall,f1\n");
    for r in reports {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.subject, r.n, r.accuracy, r.precision, r.recall, r.f1
        ));
    }
    out
}

/// Confusion counts plus row-normalized rates, ready for a heatmap.
pub fn heatmap_data(report: &EvalReport) -> serde_json::Value {
    let rates: Vec<Vec<f64>> = report
        .confusion
        .counts
        .iter()
        .map(|row| {
            let sum: u64 = row.iter().sum();
            row.iter()
                .map(|&c| if sum == 0 { 0.0 } else { c as f64 / sum as f64 })
                .collect()
        })
        .collect();
    serde_json::json!({
        "subject": report.subject,
        "gold_labels": report.confusion.gold_labels,
        "pred_labels": report.confusion.pred_labels,
        "counts": report.confusion.counts,
        "rates": rates,
    })
}

/// Per-task accuracy per subject: one axis row per task.
pub fn radar_data(reports: &[EvalReport]) -> serde_json::Value {
    let tasks: Vec<String> = reports
        .first()
        .map(|r| r.per_task.keys().map(|t| t.display().to_string()).collect())
        .unwrap_or_default();
    let subjects: Vec<serde_json::Value> = reports
        .iter()
        .map(|r| {
            serde_json::json!({
                "subject": r.subject,
                "per_task": r.per_task.values().collect::<Vec<_>>(),
            })
        })
        .collect();
    serde_json::json!({ "tasks": tasks, "subjects": subjects })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExportKind {
    MetricsTable,
    ConfusionHeatmapData,
    RadarData,
}

pub fn export_report(report: &EvalReport, kind: ExportKind, path: &Path) -> Result<()> {
    let body = match kind {
        ExportKind::MetricsTable => metrics_csv(std::slice::from_ref(report)),
        ExportKind::ConfusionHeatmapData => {
            serde_json::to_string_pretty(&heatmap_data(report))?
        }
        ExportKind::RadarData => {
            serde_json::to_string_pretty(&radar_data(std::slice::from_ref(report)))?
        }
    };
    std::fs::write(path, body)?;
    Ok(())
}
