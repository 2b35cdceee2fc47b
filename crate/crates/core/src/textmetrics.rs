//! n-gram repetition (`rep-n`) of generated text.
//!
//! `rep_n = 100 · (1 − unique n-grams / total n-grams)`, computed per
//! response on whitespace tokens and averaged over a file.

use std::collections::HashSet;
use std::path::Path;

use serde::Serialize;
use thiserror::Error;

/// Score at or above which a generation run counts as degenerate.
pub const DEFAULT_THRESHOLD: f64 = 20.0;

#[derive(Debug, Error)]
pub enum TextError {
    #[error("i/o failure on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {reason}")]
    MalformedLine { line: usize, reason: String },
    #[error("n-gram length must be at least 1")]
    ZeroN,
}

/// Repetition percentage of the `n`-grams in `tokens`; 0 when there are
/// fewer than `n` tokens.
pub fn rep_n<S: AsRef<str>>(tokens: &[S], n: usize) -> f64 {
    assert!(n >= 1, "n-gram length must be at least 1");
    if tokens.len() < n {
        return 0.0;
    }
    let tokens: Vec<&str> = tokens.iter().map(AsRef::as_ref).collect();
    let total = tokens.len() - n + 1;
    let unique: HashSet<&[&str]> = tokens.windows(n).collect();
    100.0 * (1.0 - unique.len() as f64 / total as f64)
}

pub fn whitespace_tokens(text: &str) -> Vec<&str> {
    text.split_whitespace().collect()
}

/// How lines of a generation file are read.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LineFormat {
    /// JSON lines if the first non-blank line starts with `{`, else plain.
    #[default]
    Auto,
    Plain,
    /// One object per line with a string `"text"` field.
    JsonLines,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RepScore {
    pub n: usize,
    pub per_text: Vec<f64>,
    pub mean: f64,
}

impl RepScore {
    pub fn from_scores(n: usize, per_text: Vec<f64>) -> Self {
        let mean = if per_text.is_empty() {
            0.0
        } else {
            per_text.iter().sum::<f64>() / per_text.len() as f64
        };
        Self { n, per_text, mean }
    }

    pub fn max(&self) -> f64 {
        self.per_text.iter().copied().fold(0.0, f64::max)
    }

    pub fn count_at_or_above(&self, threshold: f64) -> usize {
        self.per_text.iter().filter(|&&s| s >= threshold).count()
    }
}

/// Scores already-split responses.
pub fn score_texts<S: AsRef<str>>(texts: &[S], n: usize) -> Result<RepScore, TextError> {
    if n == 0 {
        return Err(TextError::ZeroN);
    }
    let scores = texts.iter().map(|t| rep_n(&whitespace_tokens(t.as_ref()), n)).collect();
    Ok(RepScore::from_scores(n, scores))
}

/// Splits file contents into responses. Blank lines are not responses.
pub fn parse_responses(contents: &str, format: LineFormat) -> Result<Vec<String>, TextError> {
    let json = match format {
        LineFormat::Plain => false,
        LineFormat::JsonLines => true,
        LineFormat::Auto => contents
            .lines()
            .find(|l| !l.trim().is_empty())
            .is_some_and(|l| l.trim_start().starts_with('{')),
    };
    let mut out = Vec::new();
    for (idx, line) in contents.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        if !json {
            out.push(line.to_string());
            continue;
        }
        let value: serde_json::Value = serde_json::from_str(line)
            .map_err(|e| TextError::MalformedLine { line: idx + 1, reason: e.to_string() })?;
        let text = value
            .get("text")
            .and_then(serde_json::Value::as_str)
            .ok_or_else(|| TextError::MalformedLine {
                line: idx + 1,
                reason: "missing string field \"text\"".into(),
            })?;
        out.push(text.to_string());
    }
    Ok(out)
}

pub fn score_file(path: impl AsRef<Path>, n: usize, format: LineFormat) -> Result<RepScore, TextError> {
    let path = path.as_ref();
    let contents = std::fs::read_to_string(path).map_err(|source| TextError::Io {
        path: path.display().to_string(),
        source,
    })?;
    score_texts(&parse_responses(&contents, format)?, n)
}
