//! Interaction-log ingestion.
//!
//! Two input formats are accepted: ASSIST-style CSV dumps (header row,
//! configurable column names) and JSON lines. Both are normalised into a
//! [`Dataset`] whose question and skill ids are dense indices; the raw ids
//! are kept in `question_labels` / `skill_labels`.
//!
//! Rows are dropped (and counted) when the student, question or skill is
//! missing or non-numeric, or when the correctness value is not exactly 0
//! or 1. Rows of one student that share an order id and a question are one
//! multi-skill interaction.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seed;

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("line {line}: malformed json: {source}")]
    Json {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("column `{0}` not found in header")]
    MissingColumn(String),
    #[error("no valid rows ({dropped} dropped)")]
    EmptyDataset { dropped: usize },
    #[error("invalid dataset: {0}")]
    Invalid(String),
    #[error("need at least 2 students to split, got {0}")]
    TooFewStudents(usize),
    #[error("test fraction must lie in (0, 1), got {0}")]
    InvalidFraction(f64),
    #[error("unknown format `{0}` (expected assist_csv or jsonl)")]
    UnknownFormat(String),
}

pub type Result<T> = std::result::Result<T, IngestError>;

mod bit {
    use serde::{de::Error, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &bool, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u8(u8::from(*v))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<bool, D::Error> {
        match u8::deserialize(d)? {
            0 => Ok(false),
            1 => Ok(true),
            other => Err(D::Error::custom(format!("response must be 0 or 1, got {other}"))),
        }
    }
}

/// One (question, response, skill, difficulty) event.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Interaction {
    pub question_id: u32,
    #[serde(with = "bit")]
    pub response: bool,
    pub skill_id: u32,
    /// Further skills of a multi-skill question.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub extra_skills: Vec<u32>,
    /// Position within the student's sequence.
    pub order: u32,
    /// Normalised difficulty, filled by [`crate::stats`].
    #[serde(default)]
    pub difficulty: f64,
}

impl Interaction {
    pub fn new(question_id: u32, skill_id: u32, response: bool) -> Self {
        Self {
            question_id,
            response,
            skill_id,
            extra_skills: Vec::new(),
            order: 0,
            difficulty: 0.0,
        }
    }

    pub fn skills(&self) -> impl Iterator<Item = u32> + '_ {
        std::iter::once(self.skill_id).chain(self.extra_skills.iter().copied())
    }

    pub fn has_skill(&self, skill: u32) -> bool {
        self.skill_id == skill || self.extra_skills.contains(&skill)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudentSequence {
    pub student_id: u64,
    pub interactions: Vec<Interaction>,
}

impl StudentSequence {
    /// Build a sequence, renumbering `order` to 0..n-1.
    pub fn new(student_id: u64, mut interactions: Vec<Interaction>) -> Self {
        for (i, it) in interactions.iter_mut().enumerate() {
            it.order = i as u32;
        }
        Self {
            student_id,
            interactions,
        }
    }

    pub fn len(&self) -> usize {
        self.interactions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.interactions.is_empty()
    }

    pub fn responses(&self) -> Vec<bool> {
        self.interactions.iter().map(|it| it.response).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub sequences: Vec<StudentSequence>,
    pub num_questions: usize,
    pub num_skills: usize,
    pub num_records: usize,
    #[serde(default)]
    pub dropped_count: usize,
    /// Raw question id for each dense question index (empty when ids were dense already).
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub question_labels: Vec<u64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub skill_labels: Vec<u64>,
}

impl Dataset {
    pub fn new(sequences: Vec<StudentSequence>, num_questions: usize, num_skills: usize) -> Self {
        let num_records = sequences.iter().map(StudentSequence::len).sum();
        Self {
            sequences,
            num_questions,
            num_skills,
            num_records,
            dropped_count: 0,
            question_labels: Vec::new(),
            skill_labels: Vec::new(),
        }
    }

    pub fn num_students(&self) -> usize {
        self.sequences.len()
    }

    pub fn interactions(&self) -> impl Iterator<Item = &Interaction> {
        self.sequences.iter().flat_map(|s| s.interactions.iter())
    }

    /// Same id space and labels, a different set of students.
    pub fn with_sequences(&self, sequences: Vec<StudentSequence>) -> Self {
        let mut out = Self::new(sequences, self.num_questions, self.num_skills);
        out.question_labels = self.question_labels.clone();
        out.skill_labels = self.skill_labels.clone();
        out
    }

    pub fn validate(&self) -> Result<()> {
        let mut total = 0;
        for seq in &self.sequences {
            if seq.interactions.is_empty() {
                return Err(IngestError::Invalid(format!(
                    "student {} has an empty sequence",
                    seq.student_id
                )));
            }
            for (i, it) in seq.interactions.iter().enumerate() {
                if it.order as usize != i {
                    return Err(IngestError::Invalid(format!(
                        "student {}: order {} at position {i}",
                        seq.student_id, it.order
                    )));
                }
                if it.question_id as usize >= self.num_questions {
                    return Err(IngestError::Invalid(format!(
                        "question id {} out of range ({} questions)",
                        it.question_id, self.num_questions
                    )));
                }
                if let Some(k) = it.skills().find(|&k| k as usize >= self.num_skills) {
                    return Err(IngestError::Invalid(format!(
                        "skill id {k} out of range ({} skills)",
                        self.num_skills
                    )));
                }
            }
            total += seq.len();
        }
        if total != self.num_records {
            return Err(IngestError::Invalid(format!(
                "num_records {} but sequences hold {total}",
                self.num_records
            )));
        }
        Ok(())
    }

    pub fn to_json_file(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|source| IngestError::Io {
            path: path.to_owned(),
            source,
        })?;
        let mut w = BufWriter::new(file);
        serde_json::to_writer(&mut w, self).map_err(|source| IngestError::Json { line: 0, source })?;
        w.flush().map_err(|source| IngestError::Io {
            path: path.to_owned(),
            source,
        })
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|source| IngestError::Io {
            path: path.to_owned(),
            source,
        })?;
        let ds: Dataset = serde_json::from_reader(BufReader::new(file))
            .map_err(|source| IngestError::Json { line: 0, source })?;
        ds.validate()?;
        Ok(ds)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputFormat {
    AssistCsv,
    Jsonl,
}

impl FromStr for InputFormat {
    type Err = IngestError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "assist_csv" => Ok(Self::AssistCsv),
            "jsonl" => Ok(Self::Jsonl),
            other => Err(IngestError::UnknownFormat(other.to_owned())),
        }
    }
}

impl fmt::Display for InputFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::AssistCsv => "assist_csv",
            Self::Jsonl => "jsonl",
        })
    }
}

/// CSV header names. Defaults follow the public ASSIST09 skill-builder dump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ColumnMap {
    pub student: String,
    pub question: String,
    pub skill: String,
    pub correct: String,
    pub order: String,
}

impl Default for ColumnMap {
    fn default() -> Self {
        Self {
            student: "user_id".into(),
            question: "problem_id".into(),
            skill: "skill_id".into(),
            correct: "correct".into(),
            order: "order_id".into(),
        }
    }
}

#[derive(Debug)]
struct RawRow {
    student: u64,
    question: u64,
    skills: Vec<u64>,
    correct: bool,
    order: i64,
    line: usize,
}

fn parse_skills(field: &str) -> Option<Vec<u64>> {
    let mut out = Vec::new();
    for part in field.split(['_', ';', ',', '~']) {
        let part = part.trim();
        if part.is_empty() {
            continue;
        }
        out.push(parse_id(part)?);
    }
    if out.is_empty() {
        None
    } else {
        Some(out)
    }
}

fn parse_id(field: &str) -> Option<u64> {
    let field = field.trim();
    field.parse::<u64>().ok().or_else(|| {
        // Some dumps write integer ids as floats ("12.0").
        let f: f64 = field.parse().ok()?;
        (f >= 0.0 && f.fract() == 0.0 && f < 1e15).then_some(f as u64)
    })
}

fn parse_correct(field: &str) -> Option<bool> {
    match field.trim() {
        "0" => Some(false),
        "1" => Some(true),
        _ => None,
    }
}

/// Parse a log file into a validated [`Dataset`].
pub fn parse_dataset(path: &Path, format: InputFormat) -> Result<Dataset> {
    parse_dataset_with(path, format, &ColumnMap::default())
}

pub fn parse_dataset_with(path: &Path, format: InputFormat, columns: &ColumnMap) -> Result<Dataset> {
    let file = File::open(path).map_err(|source| IngestError::Io {
        path: path.to_owned(),
        source,
    })?;
    let (rows, dropped) = match format {
        InputFormat::AssistCsv => read_csv(file, columns)?,
        InputFormat::Jsonl => read_jsonl(file, path)?,
    };
    build_dataset(rows, dropped)
}

fn read_csv(file: File, columns: &ColumnMap) -> Result<(Vec<RawRow>, usize)> {
    let mut reader = csv::ReaderBuilder::new()
        .flexible(true)
        .from_reader(BufReader::new(file));
    let headers = reader.headers()?.clone();
    let col = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| IngestError::MissingColumn(name.to_owned()))
    };
    let (c_student, c_question, c_skill, c_correct) = (
        col(&columns.student)?,
        col(&columns.question)?,
        col(&columns.skill)?,
        col(&columns.correct)?,
    );
    // Without an order column the file order is used.
    let c_order = col(&columns.order).ok();

    let mut rows = Vec::new();
    let mut dropped = 0;
    for (line, record) in reader.records().enumerate() {
        let record = record?;
        let field = |i: usize| record.get(i).unwrap_or("");
        let row = (|| {
            Some(RawRow {
                student: parse_id(field(c_student))?,
                question: parse_id(field(c_question))?,
                skills: parse_skills(field(c_skill))?,
                correct: parse_correct(field(c_correct))?,
                order: match c_order {
                    Some(c) => field(c).trim().parse().ok()?,
                    None => line as i64,
                },
                line,
            })
        })();
        match row {
            Some(r) => rows.push(r),
            None => dropped += 1,
        }
    }
    Ok((rows, dropped))
}

fn json_id(v: Option<&serde_json::Value>) -> Option<u64> {
    match v? {
        serde_json::Value::Number(n) => n.as_u64(),
        serde_json::Value::String(s) => parse_id(s),
        _ => None,
    }
}

fn read_jsonl(file: File, path: &Path) -> Result<(Vec<RawRow>, usize)> {
    let mut rows = Vec::new();
    let mut dropped = 0;
    for (line, text) in BufReader::new(file).lines().enumerate() {
        let text = text.map_err(|source| IngestError::Io {
            path: path.to_owned(),
            source,
        })?;
        if text.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value = serde_json::from_str(&text).map_err(|source| IngestError::Json {
            line: line + 1,
            source,
        })?;
        let row = (|| {
            let skills = match value.get("skill_ids") {
                Some(serde_json::Value::Array(items)) => {
                    let ids: Option<Vec<u64>> = items.iter().map(|v| json_id(Some(v))).collect();
                    ids.filter(|v| !v.is_empty())?
                }
                _ => match value.get("skill_id")? {
                    serde_json::Value::String(s) => parse_skills(s)?,
                    other => vec![json_id(Some(other))?],
                },
            };
            let correct = match value.get("correct")? {
                serde_json::Value::Bool(b) => *b,
                serde_json::Value::Number(n) => match n.as_u64()? {
                    0 => false,
                    1 => true,
                    _ => return None,
                },
                serde_json::Value::String(s) => parse_correct(s)?,
                _ => return None,
            };
            let order = match value.get("order") {
                Some(v) => v.as_i64()?,
                None => line as i64,
            };
            Some(RawRow {
                student: json_id(value.get("student_id"))?,
                question: json_id(value.get("question_id"))?,
                skills,
                correct,
                order,
                line,
            })
        })();
        match row {
            Some(r) => rows.push(r),
            None => dropped += 1,
        }
    }
    Ok((rows, dropped))
}

fn dense_ids(ids: impl Iterator<Item = u64>) -> (BTreeMap<u64, u32>, Vec<u64>) {
    let mut map: BTreeMap<u64, u32> = ids.map(|id| (id, 0)).collect();
    let labels: Vec<u64> = map.keys().copied().collect();
    for (i, v) in map.values_mut().enumerate() {
        *v = i as u32;
    }
    (map, labels)
}

fn build_dataset(rows: Vec<RawRow>, dropped: usize) -> Result<Dataset> {
    if rows.is_empty() {
        return Err(IngestError::EmptyDataset { dropped });
    }
    let (questions, question_labels) = dense_ids(rows.iter().map(|r| r.question));
    let (skills, skill_labels) = dense_ids(rows.iter().flat_map(|r| r.skills.iter().copied()));

    let mut by_student: BTreeMap<u64, Vec<RawRow>> = BTreeMap::new();
    for row in rows {
        by_student.entry(row.student).or_default().push(row);
    }

    let mut sequences = Vec::with_capacity(by_student.len());
    for (student, mut rows) in by_student {
        rows.sort_by_key(|r| (r.order, r.line));
        let mut interactions: Vec<Interaction> = Vec::with_capacity(rows.len());
        let mut last_key: Option<(i64, u64)> = None;
        for row in rows {
            let dense: Vec<u32> = row.skills.iter().map(|k| skills[k]).collect();
            if last_key == Some((row.order, row.question)) {
                // Duplicate row of a multi-skill question.
                let it = interactions.last_mut().expect("previous interaction");
                for k in dense {
                    if !it.has_skill(k) {
                        it.extra_skills.push(k);
                    }
                }
                continue;
            }
            last_key = Some((row.order, row.question));
            let mut it = Interaction::new(questions[&row.question], dense[0], row.correct);
            for &k in &dense[1..] {
                if !it.has_skill(k) {
                    it.extra_skills.push(k);
                }
            }
            interactions.push(it);
        }
        sequences.push(StudentSequence::new(student, interactions));
    }

    let identity = |labels: &[u64]| labels.iter().enumerate().all(|(i, &l)| l == i as u64);
    let mut ds = Dataset::new(sequences, question_labels.len(), skill_labels.len());
    ds.dropped_count = dropped;
    if !identity(&question_labels) {
        ds.question_labels = question_labels;
    }
    if !identity(&skill_labels) {
        ds.skill_labels = skill_labels;
    }
    ds.validate()?;
    Ok(ds)
}

/// Split by student. The test side receives `max(1, floor(n * test_fraction))`
/// students chosen by a seeded shuffle; both sides keep the input order.
pub fn split_train_test(dataset: &Dataset, test_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(IngestError::InvalidFraction(test_fraction));
    }
    let n = dataset.num_students();
    if n < 2 {
        return Err(IngestError::TooFewStudents(n));
    }
    let n_test = ((n as f64 * test_fraction).floor() as usize).clamp(1, n - 1);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seed::rng(seed));
    let mut is_test = vec![false; n];
    for &i in &order[..n_test] {
        is_test[i] = true;
    }
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (seq, t) in dataset.sequences.iter().zip(is_test) {
        if t {
            test.push(seq.clone());
        } else {
            train.push(seq.clone());
        }
    }
    Ok((dataset.with_sequences(train), dataset.with_sequences(test)))
}
