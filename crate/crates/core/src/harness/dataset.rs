//! JSONL dataset ingestion.
//!
//! One object per line:
//! `{"id": ..., "question": ..., "options": [...], "answer": <0-based index>, "subject"?: ..., "language"?: ...}`

use std::collections::HashSet;
use std::path::Path;

use serde::Deserialize;

use crate::prompt::Question;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum DatasetError {
    #[error("cannot read dataset {path}: {message}")]
    Io { path: String, message: String },
    #[error("line {line}: {message}")]
    Schema { line: usize, message: String },
    #[error("line {line}: duplicate example id {id:?}")]
    DuplicateId { line: usize, id: String },
    #[error("line {line}: answer index {answer} out of range for {options} options")]
    GoldOutOfRange {
        line: usize,
        answer: i64,
        options: usize,
    },
}

#[derive(Debug, Deserialize)]
struct Record {
    id: String,
    question: String,
    options: Vec<String>,
    answer: i64,
    #[serde(default)]
    subject: Option<String>,
    #[serde(default)]
    language: Option<String>,
}

pub fn parse_dataset(text: &str) -> Result<Vec<Question>, DatasetError> {
    let mut ids = HashSet::new();
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(raw).map_err(|e| DatasetError::Schema {
            line,
            message: e.to_string(),
        })?;
        if rec.id.is_empty() {
            return Err(DatasetError::Schema {
                line,
                message: "empty id".into(),
            });
        }
        if rec.options.len() < 2 {
            return Err(DatasetError::Schema {
                line,
                message: format!("{} options; at least 2 required", rec.options.len()),
            });
        }
        if let Some(k) = rec.options.iter().position(String::is_empty) {
            return Err(DatasetError::Schema {
                line,
                message: format!("option {k} is empty"),
            });
        }
        if rec.answer < 0 || rec.answer as usize >= rec.options.len() {
            return Err(DatasetError::GoldOutOfRange {
                line,
                answer: rec.answer,
                options: rec.options.len(),
            });
        }
        if !ids.insert(rec.id.clone()) {
            return Err(DatasetError::DuplicateId { line, id: rec.id });
        }
        out.push(Question {
            id: rec.id,
            stem: rec.question,
            gold_index: rec.answer as usize,
            options: rec.options,
            subject: rec.subject,
            language: rec.language,
        });
    }
    Ok(out)
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Vec<Question>, DatasetError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| DatasetError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    parse_dataset(&text)
}

/// Serializes questions back to the JSONL schema.
pub fn to_jsonl(questions: &[Question]) -> String {
    let mut out = String::new();
    for q in questions {
        let mut obj = serde_json::json!({
            "id": q.id,
            "question": q.stem,
            "options": q.options,
            "answer": q.gold_index,
        });
        if let Some(s) = &q.subject {
            obj["subject"] = s.clone().into();
        }
        if let Some(l) = &q.language {
            obj["language"] = l.clone().into();
        }
        out.push_str(&obj.to_string());
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line(id: &str, answer: i64) -> String {
        format!(r#"{{"id":"{id}","question":"q?","options":["a","b","c","d"],"answer":{answer}}}"#)
    }

    #[test]
    fn parses_fixture_lines() {
        let text: String = (0..20).map(|i| line(&format!("q{i}"), i % 4) + "\n").collect();
        let qs = parse_dataset(&text).unwrap();
        assert_eq!(qs.len(), 20);
        assert_eq!(qs[5].gold_index, 1);
        assert_eq!(parse_dataset(&to_jsonl(&qs)).unwrap(), qs);
    }

    #[test]
    fn rejects_bad_records() {
        let text = format!("{}\n{}\n", line("a", 0), line("b", 4));
        assert_eq!(
            parse_dataset(&text),
            Err(DatasetError::GoldOutOfRange {
                line: 2,
                answer: 4,
                options: 4
            })
        );
        let text = format!("{}\n\n{}\n", line("a", 0), line("a", 1));
        assert_eq!(
            parse_dataset(&text),
            Err(DatasetError::DuplicateId {
                line: 3,
                id: "a".into()
            })
        );
        assert!(matches!(
            parse_dataset("{\"id\":\"x\"}\n"),
            Err(DatasetError::Schema { line: 1, .. })
        ));
        assert!(matches!(
            parse_dataset(&line("n", -1)),
            Err(DatasetError::GoldOutOfRange { .. })
        ));
    }
}
