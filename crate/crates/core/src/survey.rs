//! Non-inferiority margin survey.
//!
//! Two CSV layouts are accepted, with or without a header row:
//!
//! ```text
//! margin          value,count
//! 2               1,6
//! 4               2,20
//! 5               3,3
//! ```
//!
//! The long form lists one response per row. The tally form lists each
//! distinct answer with the number of physicians who gave it. Values are
//! "additional patients out of 100".

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SurveyError {
    #[error("survey schema error: {0}")]
    Schema(String),
    #[error("negative survey value {0}")]
    NegativeValue(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurveyResponses {
    responses: Vec<f64>,
}

impl SurveyResponses {
    pub fn new(responses: Vec<f64>) -> Result<Self, SurveyError> {
        if responses.is_empty() {
            return Err(SurveyError::Schema("no responses".into()));
        }
        if let Some(&v) = responses.iter().find(|v| !v.is_finite()) {
            return Err(SurveyError::Schema(format!("non-finite value {v}")));
        }
        if let Some(&v) = responses.iter().find(|&&v| v < 0.0) {
            return Err(SurveyError::NegativeValue(v));
        }
        Ok(Self { responses })
    }

    pub fn responses(&self) -> &[f64] {
        &self.responses
    }

    pub fn len(&self) -> usize {
        self.responses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.responses.is_empty()
    }
}

pub fn parse_survey(document: &str) -> Result<SurveyResponses, SurveyError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_reader(document.as_bytes());

    let mut rows: Vec<Vec<String>> = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| SurveyError::Schema(e.to_string()))?;
        if record.iter().all(str::is_empty) {
            continue;
        }
        rows.push(record.iter().map(str::to_owned).collect());
    }
    if rows
        .first()
        .is_some_and(|r| r.iter().any(|cell| cell.parse::<f64>().is_err()))
    {
        rows.remove(0);
    }
    if rows.is_empty() {
        return Err(SurveyError::Schema("empty survey document".into()));
    }
    let width = rows[0].len();
    if width != 1 && width != 2 {
        return Err(SurveyError::Schema(format!("expected 1 or 2 columns, found {width}")));
    }

    let mut responses = Vec::new();
    for (line, row) in rows.iter().enumerate() {
        if row.len() != width {
            return Err(SurveyError::Schema(format!(
                "row {} has {} columns, expected {width}",
                line + 1,
                row.len()
            )));
        }
        let value: f64 = row[0]
            .parse()
            .map_err(|_| SurveyError::Schema(format!("row {}: '{}' is not a number", line + 1, row[0])))?;
        if value < 0.0 {
            return Err(SurveyError::NegativeValue(value));
        }
        if width == 1 {
            responses.push(value);
        } else {
            let count: u64 = row[1].parse().map_err(|_| {
                SurveyError::Schema(format!("row {}: count '{}' is not a nonnegative integer", line + 1, row[1]))
            })?;
            responses.extend(std::iter::repeat_n(value, count as usize));
        }
    }
    SurveyResponses::new(responses)
}

/// Sample median; an even count averages the two middle order statistics.
pub fn median_margin(r: &SurveyResponses) -> f64 {
    let mut sorted = r.responses.clone();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

/// Converts a margin in "patients per 100" to the risk-difference scale.
pub fn margin_to_probability(margin: f64) -> f64 {
    margin / 100.0
}
