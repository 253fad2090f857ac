//! Multiple-choice questions and dataset ingestion.

use std::collections::{BTreeSet, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tracing::warn;

use crate::label::{ChoiceLabel, LabelPermutation};

/// One multiple-choice item with its choices in source-file order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Question {
    pub id: String,
    pub subject: String,
    pub text: String,
    pub choices: [String; 4],
    pub gold_index: usize,
}

impl Question {
    pub fn new(
        id: impl Into<String>,
        subject: impl Into<String>,
        text: impl Into<String>,
        choices: [String; 4],
        gold_index: usize,
    ) -> Result<Self, String> {
        if gold_index > 3 {
            return Err(format!("gold index {gold_index} out of range 0..=3"));
        }
        if let Some(i) = choices.iter().position(|c| c.trim().is_empty()) {
            return Err(format!("choice {i} is empty"));
        }
        Ok(Question {
            id: id.into(),
            subject: subject.into(),
            text: text.into(),
            choices,
            gold_index,
        })
    }

    /// Label carried by the gold choice under `perm`.
    pub fn gold_label(&self, perm: &LabelPermutation) -> ChoiceLabel {
        perm.label_at(self.gold_index)
    }

    /// Text of the choice that carries `label` under `perm`.
    pub fn choice_for_label(&self, perm: &LabelPermutation, label: ChoiceLabel) -> &str {
        &self.choices[perm.slot_of(label)]
    }
}

/// Pairs every slot's label under `perm` with that slot's canonical text.
pub fn permute_choices<'q>(q: &'q Question, perm: &LabelPermutation) -> [(ChoiceLabel, &'q str); 4] {
    std::array::from_fn(|slot| (perm.label_at(slot), q.choices[slot].as_str()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetFormat {
    /// Headerless `question,A,B,C,D,answer` rows, one `<subject>_test.csv` per subject.
    MmluCsv,
    /// Headered `id,subject,question,choice_0..choice_3,gold_index` rows.
    GenericCsv,
}

impl std::str::FromStr for DatasetFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "mmlu-csv" => Ok(DatasetFormat::MmluCsv),
            "generic-csv" => Ok(DatasetFormat::GenericCsv),
            other => Err(format!("unknown dataset format {other:?}")),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("dataset path {0} does not exist")]
    Missing(PathBuf),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Row {
        path: PathBuf,
        line: u64,
        message: String,
    },
    #[error("duplicate question id {id:?} ({path}:{line})")]
    DuplicateId { id: String, path: PathBuf, line: u64 },
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dataset {
    pub questions: Vec<Question>,
    pub subjects: BTreeSet<String>,
}

impl Dataset {
    pub fn from_questions(questions: Vec<Question>) -> Result<Self, String> {
        let mut seen = HashSet::new();
        for q in &questions {
            if !seen.insert(q.id.as_str()) {
                return Err(format!("duplicate question id {:?}", q.id));
            }
        }
        let subjects = questions.iter().map(|q| q.subject.clone()).collect();
        Ok(Dataset { questions, subjects })
    }

    pub fn len(&self) -> usize {
        self.questions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.questions.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&Question> {
        self.questions.iter().find(|q| q.id == id)
    }

    /// SHA-256 over the canonical JSON of the question list.
    pub fn digest(&self) -> String {
        let bytes = serde_json::to_vec(&self.questions).expect("questions serialize");
        hex(&Sha256::digest(&bytes))
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Loads a dataset from a single CSV file or a directory of CSV files.
pub fn load_dataset(path: &Path, format: DatasetFormat) -> Result<Dataset, DatasetError> {
    if !path.exists() {
        return Err(DatasetError::Missing(path.to_path_buf()));
    }
    let files = if path.is_dir() {
        let mut files: Vec<PathBuf> = fs::read_dir(path)
            .map_err(|source| DatasetError::Io {
                path: path.to_path_buf(),
                source,
            })?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|e| e == "csv"))
            .collect();
        files.sort();
        files
    } else {
        vec![path.to_path_buf()]
    };

    let mut questions = Vec::new();
    let mut seen = HashSet::new();
    for file in &files {
        let before = questions.len();
        let rows = match format {
            DatasetFormat::MmluCsv => read_mmlu_file(file)?,
            DatasetFormat::GenericCsv => read_generic_file(file)?,
        };
        for (line, q) in rows {
            if !seen.insert(q.id.clone()) {
                return Err(DatasetError::DuplicateId {
                    id: q.id,
                    path: file.clone(),
                    line,
                });
            }
            questions.push(q);
        }
        if questions.len() == before {
            warn!(path = %file.display(), "dataset file contains no questions");
        }
    }
    if files.is_empty() {
        warn!(path = %path.display(), "no csv files found");
    }
    let subjects = questions.iter().map(|q| q.subject.clone()).collect();
    Ok(Dataset { questions, subjects })
}

fn parse_answer(raw: &str) -> Result<usize, String> {
    let t = raw.trim();
    if let Ok(label) = t.parse::<ChoiceLabel>() {
        return Ok(label.index());
    }
    match t.parse::<usize>() {
        Ok(i) if i <= 3 => Ok(i),
        _ => Err(format!("answer {t:?} is not one of A-D or 0-3")),
    }
}

fn mmlu_subject(path: &Path) -> String {
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    stem.strip_suffix("_test").unwrap_or(&stem).to_string()
}

fn open_reader(path: &Path, has_headers: bool) -> Result<csv::Reader<fs::File>, DatasetError> {
    let file = fs::File::open(path).map_err(|source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(csv::ReaderBuilder::new()
        .has_headers(has_headers)
        .flexible(true)
        .from_reader(file))
}

fn row_error(path: &Path, line: u64, message: impl Into<String>) -> DatasetError {
    DatasetError::Row {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

fn read_mmlu_file(path: &Path) -> Result<Vec<(u64, Question)>, DatasetError> {
    let subject = mmlu_subject(path);
    let mut reader = open_reader(path, false)?;
    let mut out = Vec::new();
    for (row_no, record) in reader.records().enumerate() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(row_no as u64 + 1, |p| p.line());
            row_error(path, line, e.to_string())
        })?;
        let line = record.position().map_or(row_no as u64 + 1, |p| p.line());
        if record.len() != 6 {
            return Err(row_error(
                path,
                line,
                format!("expected question, 4 choices and answer (6 fields), found {}", record.len()),
            ));
        }
        let gold_index = parse_answer(&record[5]).map_err(|m| row_error(path, line, m))?;
        let choices = std::array::from_fn(|i| record[i + 1].to_string());
        let q = Question::new(
            format!("{subject}/{}", row_no + 1),
            subject.clone(),
            &record[0],
            choices,
            gold_index,
        )
        .map_err(|m| row_error(path, line, m))?;
        out.push((line, q));
    }
    Ok(out)
}

#[derive(Debug, Deserialize)]
struct GenericRow {
    id: String,
    subject: String,
    question: String,
    choice_0: String,
    choice_1: String,
    choice_2: String,
    choice_3: String,
    gold_index: String,
}

fn read_generic_file(path: &Path) -> Result<Vec<(u64, Question)>, DatasetError> {
    let mut reader = open_reader(path, true)?;
    let headers = reader
        .headers()
        .map_err(|e| row_error(path, 1, e.to_string()))?
        .clone();
    let mut out = Vec::new();
    for (row_no, result) in reader.records().enumerate() {
        let record = result.map_err(|e| {
            let line = e.position().map_or(row_no as u64 + 2, |p| p.line());
            row_error(path, line, e.to_string())
        })?;
        let line = record.position().map_or(row_no as u64 + 2, |p| p.line());
        if record.len() != 8 {
            return Err(row_error(
                path,
                line,
                format!("expected 8 fields (id, subject, question, 4 choices, gold_index), found {}", record.len()),
            ));
        }
        let row: GenericRow = record
            .deserialize(Some(&headers))
            .map_err(|e| row_error(path, line, e.to_string()))?;
        let gold_index = parse_answer(&row.gold_index).map_err(|m| row_error(path, line, m))?;
        let q = Question::new(
            row.id,
            row.subject,
            row.question,
            [row.choice_0, row.choice_1, row.choice_2, row.choice_3],
            gold_index,
        )
        .map_err(|m| row_error(path, line, m))?;
        out.push((line, q));
    }
    Ok(out)
}
