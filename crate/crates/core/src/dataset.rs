//! Benchmark loading for multiple-choice QA datasets.
//!
//! Two input layouts are accepted:
//! - delimiter-separated files with header `id,question,A,B,C,D,answer`,
//!   one task per file (the task name comes from the file name or an
//!   explicit override);
//! - a line-delimited record format with self-describing fields
//!   (`id`, `question`, `A`..`D`, `answer`, `task`, `split`) for
//!   multi-task synthetic datasets.

use std::collections::HashSet;
use std::fmt;
use std::hash::{Hash, Hasher};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One of the four answer options.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum OptionLetter {
    A,
    B,
    C,
    D,
}

impl OptionLetter {
    pub const ALL: [OptionLetter; 4] = [
        OptionLetter::A,
        OptionLetter::B,
        OptionLetter::C,
        OptionLetter::D,
    ];

    pub fn parse(s: &str) -> Option<OptionLetter> {
        match s.trim() {
            "A" | "a" => Some(OptionLetter::A),
            "B" | "b" => Some(OptionLetter::B),
            "C" | "c" => Some(OptionLetter::C),
            "D" | "d" => Some(OptionLetter::D),
            _ => None,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            OptionLetter::A => "A",
            OptionLetter::B => "B",
            OptionLetter::C => "C",
            OptionLetter::D => "D",
        }
    }

    pub fn index(&self) -> usize {
        *self as usize
    }
}

impl fmt::Display for OptionLetter {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A task name. Display casing is preserved; equality and hashing use the
/// trimmed, case-folded form.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TaskLabel {
    display: String,
}

impl TaskLabel {
    pub fn new(name: impl Into<String>) -> Result<TaskLabel> {
        let display = name.into();
        if display.trim().is_empty() {
            return Err(Error::Integrity("task label is empty".into()));
        }
        Ok(TaskLabel { display })
    }

    pub fn display(&self) -> &str {
        self.display.trim()
    }

    /// Canonical comparison key: trimmed and case-folded.
    pub fn key(&self) -> String {
        self.display.trim().to_lowercase()
    }
}

impl PartialEq for TaskLabel {
    fn eq(&self, other: &Self) -> bool {
        self.key() == other.key()
    }
}

impl Eq for TaskLabel {}

impl Hash for TaskLabel {
    fn hash<H: Hasher>(&self, state: &mut H) {
        self.key().hash(state);
    }
}

impl fmt::Display for TaskLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.display())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    /// Development/evaluation split (seeds the RAG knowledge base).
    #[serde(alias = "dev")]
    Eval,
    Test,
}

impl Split {
    pub fn parse(s: &str) -> Option<Split> {
        match s.trim().to_lowercase().as_str() {
            "dev" | "eval" => Some(Split::Eval),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

/// One benchmark item: stem, four options, gold answer, gold task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Question {
    pub id: String,
    pub stem: String,
    /// Option texts indexed by letter (A=0 .. D=3).
    pub options: [String; 4],
    pub gold_answer: OptionLetter,
    pub gold_task: TaskLabel,
    pub split: Split,
}

impl Question {
    pub fn option(&self, letter: OptionLetter) -> &str {
        &self.options[letter.index()]
    }
}

/// A validated benchmark dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub name: String,
    pub tasks: Vec<TaskLabel>,
    pub questions: Vec<Question>,
}

impl Dataset {
    /// Assembles a dataset, deriving the task list from distinct gold
    /// tasks in first-appearance order, and validates invariants.
    pub fn new(name: impl Into<String>, questions: Vec<Question>) -> Result<Dataset> {
        let mut tasks: Vec<TaskLabel> = Vec::new();
        for q in &questions {
            if !tasks.contains(&q.gold_task) {
                tasks.push(q.gold_task.clone());
            }
        }
        let d = Dataset {
            name: name.into(),
            tasks,
            questions,
        };
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for q in &self.questions {
            if !seen.insert(q.id.clone()) {
                return Err(Error::Integrity(format!("duplicate question id `{}`", q.id)));
            }
            if !self.tasks.contains(&q.gold_task) {
                return Err(Error::Integrity(format!(
                    "question `{}` has task `{}` not present in the task list",
                    q.id, q.gold_task
                )));
            }
        }
        let counts = self.task_counts();
        for t in &self.tasks {
            if counts.get(t).copied().unwrap_or(0) == 0 {
                return Err(Error::Integrity(format!("task `{t}` has no questions")));
            }
        }
        Ok(())
    }

    /// Per-task sample counts, in task-list order.
    pub fn task_counts(&self) -> IndexMap<TaskLabel, usize> {
        let mut counts: IndexMap<TaskLabel, usize> = IndexMap::new();
        for t in &self.tasks {
            counts.insert(t.clone(), 0);
        }
        for q in &self.questions {
            *counts.entry(q.gold_task.clone()).or_insert(0) += 1;
        }
        counts
    }

    pub fn question(&self, id: &str) -> Option<&Question> {
        self.questions.iter().find(|q| q.id == id)
    }

    /// Questions restricted to one split.
    pub fn split(&self, split: Split) -> impl Iterator<Item = &Question> {
        self.questions.iter().filter(move |q| q.split == split)
    }
}

/// Column mapping and defaults for the delimiter-separated layout.
#[derive(Debug, Clone)]
pub struct LoadConfig {
    pub delimiter: u8,
    /// Task label override for single-file loads; defaults to the file stem.
    pub task: Option<String>,
    /// Split assigned to every row of a delimiter-separated file.
    pub split: Split,
}

impl Default for LoadConfig {
    fn default() -> Self {
        LoadConfig {
            delimiter: b',',
            task: None,
            split: Split::Test,
        }
    }
}

/// Loads a dataset from a file or directory.
///
/// - `.jsonl` file: the self-describing record format.
/// - other file: one delimiter-separated task file.
/// - directory: every `*.csv` inside, sorted by file name, one task each.
pub fn load_dataset(path: &Path, cfg: &LoadConfig) -> Result<Dataset> {
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "dataset".to_string());
    if path.is_dir() {
        let mut files: Vec<_> = std::fs::read_dir(path)?
            .collect::<std::io::Result<Vec<_>>>()?
            .into_iter()
            .map(|e| e.path())
            .filter(|p| p.extension().map(|e| e == "csv").unwrap_or(false))
            .collect();
        files.sort();
        let mut questions = Vec::new();
        for f in &files {
            questions.extend(load_csv_rows(f, cfg, None)?);
        }
        return Dataset::new(name, questions);
    }
    if path.extension().map(|e| e == "jsonl").unwrap_or(false) {
        return load_jsonl(path, &name);
    }
    let questions = load_csv_rows(path, cfg, cfg.task.as_deref())?;
    Dataset::new(name, questions)
}

const CSV_COLUMNS: [&str; 7] = ["id", "question", "A", "B", "C", "D", "answer"];

fn load_csv_rows(path: &Path, cfg: &LoadConfig, task_override: Option<&str>) -> Result<Vec<Question>> {
    let display = path.display().to_string();
    let task_name = match task_override {
        Some(t) => t.to_string(),
        None => path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .ok_or_else(|| Error::Config(format!("cannot derive task name from {display}")))?,
    };
    let task = TaskLabel::new(task_name)?;

    let mut reader = csv::ReaderBuilder::new()
        .delimiter(cfg.delimiter)
        .flexible(true)
        .from_path(path)?;
    let headers = reader.headers()?.clone();
    let mut col = IndexMap::new();
    for want in CSV_COLUMNS {
        let idx = headers
            .iter()
            .position(|h| h.trim() == want)
            .ok_or_else(|| Error::Schema {
                column: want.to_string(),
                path: display.clone(),
            })?;
        col.insert(want, idx);
    }

    let mut questions = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let row = i + 1;
        let record = record?;
        let field = |name: &str| -> String {
            record
                .get(col[name])
                .unwrap_or_default()
                .to_string()
        };
        let answer_raw = field("answer");
        let gold_answer = OptionLetter::parse(&answer_raw).ok_or_else(|| Error::Row {
            row,
            path: display.clone(),
            message: format!("gold answer `{answer_raw}` is not one of A-D"),
        })?;
        questions.push(Question {
            id: format!("{}-{}", task.display(), field("id")),
            stem: field("question"),
            options: [field("A"), field("B"), field("C"), field("D")],
            gold_answer,
            gold_task: task.clone(),
            split: cfg.split,
        });
    }
    Ok(questions)
}

#[derive(Debug, Serialize, Deserialize)]
struct JsonlRecord {
    id: String,
    question: String,
    #[serde(rename = "A")]
    a: String,
    #[serde(rename = "B")]
    b: String,
    #[serde(rename = "C")]
    c: String,
    #[serde(rename = "D")]
    d: String,
    answer: String,
    task: String,
    split: String,
}

pub fn load_jsonl(path: &Path, name: &str) -> Result<Dataset> {
    let display = path.display().to_string();
    let file = std::fs::File::open(path)?;
    let mut questions = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let row = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: JsonlRecord = serde_json::from_str(&line).map_err(|e| Error::Row {
            row,
            path: display.clone(),
            message: e.to_string(),
        })?;
        let gold_answer = OptionLetter::parse(&rec.answer).ok_or_else(|| Error::Row {
            row,
            path: display.clone(),
            message: format!("gold answer `{}` is not one of A-D", rec.answer),
        })?;
        let split = Split::parse(&rec.split).ok_or_else(|| Error::Row {
            row,
            path: display.clone(),
            message: format!("unknown split `{}`", rec.split),
        })?;
        questions.push(Question {
            id: rec.id,
            stem: rec.question,
            options: [rec.a, rec.b, rec.c, rec.d],
            gold_answer,
            gold_task: TaskLabel::new(rec.task)?,
            split,
        });
    }
    Dataset::new(name, questions)
}

#[cfg(test)]
mod tests {
    use super::*;

    use tempfile::TempDir;

    fn write_task_csv(dir: &Path, task: &str, rows: &[(&str, &str)]) {
        let mut f = std::fs::File::create(dir.join(format!("{task}.csv"))).unwrap();
        writeln!(f, "id,question,A,B,C,D,answer").unwrap();
        for (id, answer) in rows {
            writeln!(f, "{id},What is it?,w,x,y,z,{answer}").unwrap();
        }
    }

    #[test]
    fn loads_directory_of_task_files() {
        let dir = TempDir::new().unwrap();
        write_task_csv(dir.path(), "LogParser", &[("1", "A"), ("2", "B"), ("3", "C")]);
        write_task_csv(dir.path(), "RootCauseAnalysis", &[("1", "D"), ("2", "A")]);
        let d = load_dataset(dir.path(), &LoadConfig::default()).unwrap();
        assert_eq!(d.tasks.len(), 2);
        assert_eq!(d.tasks[0].display(), "LogParser");
        let counts = d.task_counts();
        assert_eq!(counts[&TaskLabel::new("LogParser").unwrap()], 3);
        assert_eq!(counts[&TaskLabel::new("RootCauseAnalysis").unwrap()], 2);
    }

    #[test]
    fn empty_file_with_header_is_empty_dataset() {
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("Empty.csv");
        std::fs::write(&path, "id,question,A,B,C,D,answer\n").unwrap();
        let d = load_dataset(&path, &LoadConfig::default()).unwrap();
        assert!(d.questions.is_empty());
        assert!(d.tasks.is_empty());
        assert!(d.task_counts().is_empty());
    }

    #[test]
    fn gold_answer_outside_a_to_d_is_row_error() {
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("Task.csv");
        std::fs::write(&path, "id,question,A,B,C,D,answer\n1,q,w,x,y,z,E\n").unwrap();
        let err = load_dataset(&path, &LoadConfig::default()).unwrap_err();
        match err {
            Error::Row { row, .. } => assert_eq!(row, 1),
            other => panic!("expected row error, got {other:?}"),
        }
    }

    #[test]
    fn missing_column_names_the_column() {
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("Task.csv");
        std::fs::write(&path, "id,question,A,B,C,answer\n").unwrap();
        let err = load_dataset(&path, &LoadConfig::default()).unwrap_err();
        match err {
            Error::Schema { column, .. } => assert_eq!(column, "D"),
            other => panic!("expected schema error, got {other:?}"),
        }
    }

    #[test]
    fn duplicate_id_is_integrity_error() {
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("Task.csv");
        std::fs::write(
            &path,
            "id,question,A,B,C,D,answer\n1,q,w,x,y,z,A\n1,q2,w,x,y,z,B\n",
        )
        .unwrap();
        let err = load_dataset(&path, &LoadConfig::default()).unwrap_err();
        assert!(matches!(err, Error::Integrity(_)));
    }

    #[test]
    fn task_override_beats_file_stem() {
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("whatever.csv");
        std::fs::write(&path, "id,question,A,B,C,D,answer\n1,q,w,x,y,z,A\n").unwrap();
        let cfg = LoadConfig {
            task: Some("Monitor".into()),
            ..LoadConfig::default()
        };
        let d = load_dataset(&path, &cfg).unwrap();
        assert_eq!(d.tasks[0].display(), "Monitor");
    }

    #[test]
    fn task_labels_fold_case_and_trim() {
        let a = TaskLabel::new("  code ").unwrap();
        let b = TaskLabel::new("Code").unwrap();
        assert_eq!(a, b);
        assert_eq!(b.display(), "Code");
        let mut set = std::collections::HashSet::new();
        set.insert(a);
        assert!(set.contains(&b));
    }

    #[test]
    fn counts_sum_to_question_total() {
        let dir = TempDir::new().unwrap();
        write_task_csv(dir.path(), "Build", &[("1", "A")]);
        write_task_csv(dir.path(), "Code", &[("1", "B"), ("2", "C"), ("3", "D")]);
        let d = load_dataset(dir.path(), &LoadConfig::default()).unwrap();
        let total: usize = d.task_counts().values().sum();
        assert_eq!(total, d.questions.len());
    }

    #[test]
    fn jsonl_round_trip() {
        let q = |id: &str, task: &str, split: Split| Question {
            id: id.to_string(),
            stem: "stem with {braces} and, commas".to_string(),
            options: ["one".into(), "two".into(), "three".into(), "four".into()],
            gold_answer: OptionLetter::B,
            gold_task: TaskLabel::new(task).unwrap(),
            split,
        };
        let d = Dataset::new(
            "synthetic",
            vec![q("a", "Code", Split::Eval), q("b", "Build", Split::Test)],
        )
        .unwrap();
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("synthetic.jsonl");
        save_jsonl(&d, &path).unwrap();
        let loaded = load_dataset(&path, &LoadConfig::default()).unwrap();
        assert_eq!(loaded, d);
    }
}

/// Writes a dataset in the line-delimited record format.
pub fn save_jsonl(d: &Dataset, path: &Path) -> Result<()> {
    let mut out = std::fs::File::create(path)?;
    for q in &d.questions {
        let rec = JsonlRecord {
            id: q.id.clone(),
            question: q.stem.clone(),
            a: q.options[0].clone(),
            b: q.options[1].clone(),
            c: q.options[2].clone(),
            d: q.options[3].clone(),
            answer: q.gold_answer.as_str().to_string(),
            task: q.gold_task.display().to_string(),
            split: match q.split {
                Split::Eval => "eval".to_string(),
                Split::Test => "test".to_string(),
            },
        };
        writeln!(out, "{}", serde_json::to_string(&rec)?)?;
    }
    Ok(())
}
