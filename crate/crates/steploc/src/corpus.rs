//! Canonical data model, dataset adapters, and corpus statistics.
//!
//! Every supported input format is adapted into one canonical JSONL shape
//! (one attempt per line, problem fields denormalized onto the line) so the
//! rest of the pipeline never sees source-specific quirks.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: malformed json: {message}")]
    MalformedLine { line: usize, message: String },
    #[error("line {line}: {message}")]
    Invalid { line: usize, message: String },
    #[error("duplicate attempt id {id}")]
    DuplicateId { id: String },
    #[error("problem {problem_id} redefined with different content at line {line}")]
    ProblemMismatch { problem_id: String, line: usize },
    #[error("solution has no steps after canonicalization")]
    EmptySolution,
    #[error("corpus is empty")]
    EmptyCorpus,
}

/// Origin of a record; drives which invariants apply.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    VtgStyle,
    Prm800kStyle,
    Fixture,
}

impl Source {
    pub fn label(&self) -> &'static str {
        match self {
            Source::VtgStyle => "vtg_style",
            Source::Prm800kStyle => "prm800k_style",
            Source::Fixture => "fixture",
        }
    }
}

/// The seven annotated first-error categories, in canonical declaration order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorType {
    CalculationError,
    ExtraOrMissingQuantity,
    FactualKnowledge,
    QuestionMisunderstanding,
    ProceededPastCorrect,
    UnitConversion,
    NoneOfTheAbove,
}

pub const ALL_ERROR_TYPES: [ErrorType; 7] = [
    ErrorType::CalculationError,
    ErrorType::ExtraOrMissingQuantity,
    ErrorType::FactualKnowledge,
    ErrorType::QuestionMisunderstanding,
    ErrorType::ProceededPastCorrect,
    ErrorType::UnitConversion,
    ErrorType::NoneOfTheAbove,
];

impl ErrorType {
    pub fn label(&self) -> &'static str {
        match self {
            ErrorType::CalculationError => "calculation_error",
            ErrorType::ExtraOrMissingQuantity => "extra_or_missing_quantity",
            ErrorType::FactualKnowledge => "factual_knowledge",
            ErrorType::QuestionMisunderstanding => "question_misunderstanding",
            ErrorType::ProceededPastCorrect => "proceeded_past_correct",
            ErrorType::UnitConversion => "unit_conversion",
            ErrorType::NoneOfTheAbove => "none_of_the_above",
        }
    }

    /// 1-based integer code; 0 is reserved for untyped records.
    pub fn code(&self) -> u32 {
        ALL_ERROR_TYPES.iter().position(|t| t == self).unwrap() as u32 + 1
    }

    /// Accepts both canonical snake_case labels and the longer annotation-guideline phrasings.
    pub fn parse(raw: &str) -> Option<ErrorType> {
        let norm = raw.trim().to_lowercase();
        let squashed: String = norm
            .chars()
            .map(|c| if c.is_alphanumeric() { c } else { ' ' })
            .collect::<String>()
            .split_whitespace()
            .collect::<Vec<_>>()
            .join(" ");
        match squashed.as_str() {
            "calculation error" | "calculation error easily solved by a calculator" => {
                Some(ErrorType::CalculationError)
            }
            "extra or missing quantity" | "extra quantity or missing quantity" => {
                Some(ErrorType::ExtraOrMissingQuantity)
            }
            "factual knowledge" | "missing wrong factual knowledge" => {
                Some(ErrorType::FactualKnowledge)
            }
            "question misunderstanding" | "misunderstanding of a question" => {
                Some(ErrorType::QuestionMisunderstanding)
            }
            "proceeded past correct" | "reached correct solution but proceeded further" => {
                Some(ErrorType::ProceededPastCorrect)
            }
            "unit conversion" | "unit conversion error" => Some(ErrorType::UnitConversion),
            "none of the above" => Some(ErrorType::NoneOfTheAbove),
            _ => None,
        }
    }
}

/// A math word problem with its stepwise gold solution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProblemRecord {
    pub id: String,
    pub question: String,
    pub gold_steps: Vec<String>,
    pub gold_final_answer: String,
    pub source: Source,
}

/// An incorrect student solution with its annotated first error.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudentAttempt {
    pub id: String,
    pub problem_id: String,
    pub steps: Vec<String>,
    /// 1-based index of the first erroneous step.
    pub first_error_index: usize,
    pub error_type: Option<ErrorType>,
    pub mistake_description: Option<String>,
}

impl ProblemRecord {
    fn validate(&self, line: usize) -> Result<(), CorpusError> {
        let fail = |m: String| CorpusError::Invalid { line, message: m };
        if self.id.trim().is_empty() {
            return Err(fail("problem id is empty".into()));
        }
        if self.question.trim().is_empty() {
            return Err(fail(format!("problem {}: question is empty", self.id)));
        }
        if self.gold_steps.is_empty() || self.gold_steps.iter().any(|s| s.trim().is_empty()) {
            return Err(fail(format!("problem {}: gold solution has empty steps", self.id)));
        }
        if self.gold_final_answer.trim().is_empty() {
            return Err(fail(format!("problem {}: gold final answer is empty", self.id)));
        }
        Ok(())
    }
}

impl StudentAttempt {
    fn validate(&self, source: Source, line: usize) -> Result<(), CorpusError> {
        let fail = |m: String| CorpusError::Invalid { line, message: m };
        if self.id.trim().is_empty() {
            return Err(fail("attempt id is empty".into()));
        }
        if self.steps.is_empty() || self.steps.iter().any(|s| s.trim().is_empty()) {
            return Err(fail(format!("attempt {}: student solution has empty steps", self.id)));
        }
        if self.first_error_index < 1 || self.first_error_index > self.steps.len() {
            return Err(fail(format!(
                "attempt {}: first error index {} outside 1..={}",
                self.id,
                self.first_error_index,
                self.steps.len()
            )));
        }
        if self.error_type.is_some() && source != Source::VtgStyle {
            return Err(fail(format!(
                "attempt {}: error_type is only valid for vtg_style records",
                self.id
            )));
        }
        Ok(())
    }
}

/// Wire form of one canonical JSONL line.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct CanonicalRecord {
    id: String,
    problem_id: String,
    question: String,
    gold_solution: Vec<String>,
    gold_final_answer: String,
    student_solution: Vec<String>,
    first_error_step: usize,
    error_type: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    mistake_description: Option<String>,
    source: Source,
}

/// An ingested corpus: problems keyed by id plus the attempts that reference them.
#[derive(Debug, Clone, Default)]
pub struct Corpus {
    pub problems: Vec<ProblemRecord>,
    pub attempts: Vec<StudentAttempt>,
    problem_index: BTreeMap<String, usize>,
}

impl Corpus {
    pub fn problem(&self, problem_id: &str) -> Option<&ProblemRecord> {
        self.problem_index.get(problem_id).map(|&i| &self.problems[i])
    }

    /// Problem record for an attempt; attempts are only admitted with a known problem.
    pub fn problem_for(&self, attempt: &StudentAttempt) -> &ProblemRecord {
        self.problem(&attempt.problem_id).expect("attempt admitted without problem")
    }

    pub fn push(
        &mut self,
        problem: ProblemRecord,
        attempt: StudentAttempt,
        line: usize,
    ) -> Result<(), CorpusError> {
        problem.validate(line)?;
        attempt.validate(problem.source, line)?;
        if attempt.problem_id != problem.id {
            return Err(CorpusError::Invalid {
                line,
                message: format!("attempt {} references problem {}", attempt.id, problem.id),
            });
        }
        if self.attempts.iter().any(|a| a.id == attempt.id) {
            return Err(CorpusError::DuplicateId { id: attempt.id });
        }
        match self.problem_index.get(&problem.id) {
            Some(&i) => {
                if self.problems[i] != problem {
                    return Err(CorpusError::ProblemMismatch { problem_id: problem.id, line });
                }
            }
            None => {
                self.problem_index.insert(problem.id.clone(), self.problems.len());
                self.problems.push(problem);
            }
        }
        self.attempts.push(attempt);
        Ok(())
    }

    /// Writes the corpus back out in canonical JSONL form.
    pub fn write_canonical(&self, path: &Path) -> Result<(), CorpusError> {
        let mut out = Vec::new();
        for attempt in &self.attempts {
            let problem = self.problem_for(attempt);
            let record = CanonicalRecord {
                id: attempt.id.clone(),
                problem_id: problem.id.clone(),
                question: problem.question.clone(),
                gold_solution: problem.gold_steps.clone(),
                gold_final_answer: problem.gold_final_answer.clone(),
                student_solution: attempt.steps.clone(),
                first_error_step: attempt.first_error_index,
                error_type: attempt.error_type.map(|t| t.label().to_string()),
                mistake_description: attempt.mistake_description.clone(),
                source: problem.source,
            };
            out.push(serde_json::to_string(&record).expect("serializable record"));
        }
        let mut file = File::create(path).map_err(|e| CorpusError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        for line in out {
            writeln!(file, "{line}").map_err(|e| CorpusError::Io {
                path: path.display().to_string(),
                source: e,
            })?;
        }
        Ok(())
    }
}

/// Input schema selector for `ingest`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchemaKind {
    Vtg,
    Prm800k,
    Canonical,
}

#[derive(Debug, Clone, Serialize)]
pub struct SkippedLine {
    pub line: usize,
    pub reason: String,
}

#[derive(Debug)]
pub struct IngestReport {
    pub corpus: Corpus,
    pub skipped: Vec<SkippedLine>,
}

/// Reads a JSONL file in the given schema. In strict mode the first bad line
/// aborts; otherwise bad lines are collected in the skip report.
pub fn ingest(path: &Path, schema: SchemaKind, strict: bool) -> Result<IngestReport, CorpusError> {
    let file = File::open(path).map_err(|e| CorpusError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    let reader = BufReader::new(file);
    let mut corpus = Corpus::default();
    let mut skipped = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let text = line.map_err(|e| CorpusError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        if text.trim().is_empty() {
            continue;
        }
        let outcome = parse_line(&text, schema, line_no)
            .and_then(|(problem, attempt)| corpus.push(problem, attempt, line_no));
        if let Err(err) = outcome {
            if strict {
                return Err(err);
            }
            skipped.push(SkippedLine { line: line_no, reason: err.to_string() });
        }
    }
    if corpus.attempts.is_empty() {
        return Err(CorpusError::EmptyCorpus);
    }
    Ok(IngestReport { corpus, skipped })
}

fn parse_line(
    text: &str,
    schema: SchemaKind,
    line: usize,
) -> Result<(ProblemRecord, StudentAttempt), CorpusError> {
    let value: serde_json::Value = serde_json::from_str(text)
        .map_err(|e| CorpusError::MalformedLine { line, message: e.to_string() })?;
    match schema {
        SchemaKind::Canonical => adapt_canonical(&value, line),
        SchemaKind::Vtg => adapt_vtg(&value, line),
        SchemaKind::Prm800k => adapt_prm800k(&value, line),
    }
}

fn adapt_canonical(
    value: &serde_json::Value,
    line: usize,
) -> Result<(ProblemRecord, StudentAttempt), CorpusError> {
    let record: CanonicalRecord = serde_json::from_value(value.clone())
        .map_err(|e| CorpusError::MalformedLine { line, message: e.to_string() })?;
    let error_type = match &record.error_type {
        None => None,
        Some(raw) => Some(ErrorType::parse(raw).ok_or_else(|| CorpusError::Invalid {
            line,
            message: format!("unknown error type {raw:?}"),
        })?),
    };
    let problem = ProblemRecord {
        id: record.problem_id.clone(),
        question: record.question,
        gold_steps: record.gold_solution,
        gold_final_answer: record.gold_final_answer,
        source: record.source,
    };
    let attempt = StudentAttempt {
        id: record.id,
        problem_id: record.problem_id,
        steps: record.student_solution,
        first_error_index: record.first_error_step,
        error_type,
        mistake_description: record.mistake_description,
    };
    Ok((problem, attempt))
}

fn str_field<'a>(value: &'a serde_json::Value, names: &[&str]) -> Option<&'a str> {
    names.iter().find_map(|n| value.get(n).and_then(|v| v.as_str()))
}

fn any_field<'a>(value: &'a serde_json::Value, names: &[&str]) -> Option<&'a serde_json::Value> {
    names.iter().find_map(|n| value.get(n))
}

fn steps_from(value: &serde_json::Value) -> Result<Vec<String>, CorpusError> {
    match value {
        serde_json::Value::String(text) => canonicalize_steps_text(text),
        serde_json::Value::Array(items) => {
            let raw: Vec<String> = items
                .iter()
                .map(|v| v.as_str().map(str::to_string).unwrap_or_else(|| v.to_string()))
                .collect();
            canonicalize_steps(&raw)
        }
        _ => Err(CorpusError::EmptySolution),
    }
}

/// Adapter for VtG-style JSONL. Field names vary across published dumps, so a
/// small alias table is accepted; solutions may be plain text or step lists.
fn adapt_vtg(
    value: &serde_json::Value,
    line: usize,
) -> Result<(ProblemRecord, StudentAttempt), CorpusError> {
    let fail = |m: String| CorpusError::Invalid { line, message: m };
    let question = str_field(value, &["question", "problem"])
        .ok_or_else(|| fail("missing question".into()))?
        .trim()
        .to_string();
    let gold_value = any_field(value, &["gold_solution", "reference_solution", "solution"])
        .ok_or_else(|| fail("missing gold solution".into()))?;
    let gold_steps = steps_from(gold_value).map_err(|_| fail("gold solution has no steps".into()))?;
    let student_value = any_field(
        value,
        &["student_solution", "incorrect_solution", "model_solution"],
    )
    .ok_or_else(|| fail("missing student solution".into()))?;
    let steps =
        steps_from(student_value).map_err(|_| fail("student solution has no steps".into()))?;
    let first_error_index = any_field(
        value,
        &["first_error_step", "first_error_index", "error_step"],
    )
    .and_then(|v| v.as_u64())
    .ok_or_else(|| fail("missing first error step".into()))? as usize;
    let gold_final_answer = match str_field(
        value,
        &["gold_final_answer", "reference_answer", "final_answer", "answer"],
    ) {
        Some(ans) => ans.trim().to_string(),
        None => extract_gold_answer(&gold_steps).ok_or_else(|| fail("missing gold answer".into()))?,
    };
    let error_type = match str_field(value, &["error_type", "mistake_type"]) {
        None => None,
        Some(raw) => {
            Some(ErrorType::parse(raw).ok_or_else(|| fail(format!("unknown error type {raw:?}")))?)
        }
    };
    let mistake_description =
        str_field(value, &["mistake_description", "description"]).map(str::to_string);
    let problem_id = str_field(value, &["problem_id", "qid", "question_id"])
        .map(str::to_string)
        .unwrap_or_else(|| format!("vtg-p{}", content_tag(&question)));
    let id = str_field(value, &["id", "attempt_id"])
        .map(str::to_string)
        .unwrap_or_else(|| format!("vtg-{line:05}"));
    let problem = ProblemRecord {
        id: problem_id.clone(),
        question,
        gold_steps,
        gold_final_answer,
        source: Source::VtgStyle,
    };
    let attempt = StudentAttempt {
        id,
        problem_id,
        steps,
        first_error_index,
        error_type,
        mistake_description,
    };
    Ok((problem, attempt))
}

/// Adapter for PRM800K-style phase-2 lines: the pre-generated solution provides
/// the steps and the first step whose chosen completion is rated -1 marks the error.
fn adapt_prm800k(
    value: &serde_json::Value,
    line: usize,
) -> Result<(ProblemRecord, StudentAttempt), CorpusError> {
    let fail = |m: String| CorpusError::Invalid { line, message: m };
    let question_obj = value.get("question").ok_or_else(|| fail("missing question object".into()))?;
    let question = str_field(question_obj, &["problem"])
        .ok_or_else(|| fail("missing problem text".into()))?
        .trim()
        .to_string();
    let steps_value = question_obj
        .get("pre_generated_steps")
        .ok_or_else(|| fail("missing pre_generated_steps".into()))?;
    let steps = steps_from(steps_value).map_err(|_| fail("solution has no steps".into()))?;
    let labels = value
        .get("label")
        .and_then(|l| l.get("steps"))
        .and_then(|s| s.as_array())
        .ok_or_else(|| fail("missing step labels".into()))?;
    let mut first_error_index = None;
    for (i, step) in labels.iter().enumerate() {
        let completions = step.get("completions").and_then(|c| c.as_array());
        let chosen = step.get("chosen_completion").and_then(|c| c.as_u64()).unwrap_or(0) as usize;
        let rating = completions
            .and_then(|c| c.get(chosen).or_else(|| c.first()))
            .and_then(|c| c.get("rating"))
            .and_then(|r| r.as_i64());
        if rating == Some(-1) {
            first_error_index = Some(i + 1);
            break;
        }
    }
    let first_error_index =
        first_error_index.ok_or_else(|| fail("no step is rated -1; not an incorrect attempt".into()))?;
    if first_error_index > steps.len() {
        return Err(fail(format!(
            "first rated error at step {} but solution has {} steps",
            first_error_index,
            steps.len()
        )));
    }
    let gold_final_answer = str_field(question_obj, &["ground_truth_answer"])
        .ok_or_else(|| fail("missing ground truth answer".into()))?
        .trim()
        .to_string();
    let gold_steps = match str_field(question_obj, &["ground_truth_solution"]) {
        Some(text) => canonicalize_steps_text(text)
            .map_err(|_| fail("ground truth solution has no steps".into()))?,
        None => vec![format!("The answer is {gold_final_answer}.")],
    };
    let problem_id = format!("prm-p{}", content_tag(&question));
    let attempt_id = format!("prm-{line:05}");
    let problem = ProblemRecord {
        id: problem_id.clone(),
        question,
        gold_steps,
        gold_final_answer,
        source: Source::Prm800kStyle,
    };
    let attempt = StudentAttempt {
        id: attempt_id,
        problem_id,
        steps,
        first_error_index,
        error_type: None,
        mistake_description: None,
    };
    Ok((problem, attempt))
}

/// Short stable tag derived from content, for sources without explicit ids.
fn content_tag(text: &str) -> String {
    use sha2::{Digest, Sha256};
    let digest = Sha256::digest(text.as_bytes());
    hex::encode(&digest[..6])
}

/// GSM8K-style "#### 42" marker, else the last numeric token of the last step.
fn extract_gold_answer(gold_steps: &[String]) -> Option<String> {
    for step in gold_steps.iter().rev() {
        if let Some(pos) = step.find("####") {
            let tail = step[pos + 4..].trim();
            if !tail.is_empty() {
                return Some(tail.to_string());
            }
        }
    }
    let last = gold_steps.last()?;
    let mut numbers = Vec::new();
    let mut current = String::new();
    for c in last.chars() {
        if c.is_ascii_digit() || (c == '.' && !current.is_empty() && current.chars().all(|d| d.is_ascii_digit())) {
            current.push(c);
        } else {
            if !current.is_empty() {
                numbers.push(current.trim_end_matches('.').to_string());
                current = String::new();
            }
        }
    }
    if !current.is_empty() {
        numbers.push(current.trim_end_matches('.').to_string());
    }
    numbers.into_iter().rev().find(|n| !n.is_empty())
}

/// Strips a leading step marker ("Step 3:", "3)", "3. ") from one line.
/// A bare "N." prefix only counts when followed by whitespace so decimal
/// leads like "3.5 miles" survive untouched.
fn strip_step_prefix(line: &str) -> &str {
    let trimmed = line.trim();
    let lower = trimmed.to_lowercase();
    let after_keyword = lower.strip_prefix("step").map(|_| &trimmed[4..]);
    let (body, had_keyword) = match after_keyword {
        Some(rest) => (rest.trim_start(), true),
        None => (trimmed, false),
    };
    let digits: String = body.chars().take_while(|c| c.is_ascii_digit()).collect();
    if digits.is_empty() || digits.len() > 3 {
        return trimmed;
    }
    let rest = &body[digits.len()..];
    let mut chars = rest.chars();
    match chars.next() {
        Some(':') | Some(')') => chars.as_str().trim_start(),
        Some('.') => {
            let tail = chars.as_str();
            if tail.starts_with(char::is_whitespace) || (had_keyword && !tail.starts_with(|c: char| c.is_ascii_digit())) {
                tail.trim_start()
            } else if had_keyword {
                trimmed
            } else {
                trimmed
            }
        }
        Some(c) if c.is_whitespace() && had_keyword => chars.as_str().trim_start(),
        _ => trimmed,
    }
}

/// Splits free text into canonical steps: one per line, step numbering and
/// blank lines removed.
pub fn canonicalize_steps_text(text: &str) -> Result<Vec<String>, CorpusError> {
    let lines: Vec<String> = text.lines().map(str::to_string).collect();
    canonicalize_steps(&lines)
}

/// Canonicalizes a list of raw step strings.
pub fn canonicalize_steps(raw: &[String]) -> Result<Vec<String>, CorpusError> {
    let steps: Vec<String> = raw
        .iter()
        .map(|line| strip_step_prefix(line).to_string())
        .filter(|s| !s.trim().is_empty())
        .collect();
    if steps.is_empty() {
        return Err(CorpusError::EmptySolution);
    }
    Ok(steps)
}

/// Summary statistics for one corpus dimension.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DimensionStats {
    pub dimension: String,
    pub min: f64,
    pub max: f64,
    pub median: f64,
    pub mean: f64,
    /// Population standard deviation (divides by n).
    pub std: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorpusStats {
    pub dimensions: Vec<DimensionStats>,
}

fn word_count(steps: &[String]) -> f64 {
    steps.iter().map(|s| s.split_whitespace().count()).sum::<usize>() as f64
}

fn summarize(dimension: &str, values: &[f64]) -> DimensionStats {
    assert!(!values.is_empty(), "stats over empty dimension");
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = sorted.len();
    let median = if n % 2 == 1 {
        sorted[n / 2]
    } else {
        (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0
    };
    let mean = sorted.iter().sum::<f64>() / n as f64;
    let var = sorted.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
    DimensionStats {
        dimension: dimension.to_string(),
        min: sorted[0],
        max: sorted[n - 1],
        median,
        mean,
        std: var.sqrt(),
    }
}

/// Distributional statistics over the corpus, one observation per attempt.
pub fn dataset_stats(corpus: &Corpus) -> CorpusStats {
    let mut gold_words = Vec::new();
    let mut student_words = Vec::new();
    let mut gold_steps = Vec::new();
    let mut student_steps = Vec::new();
    let mut error_index = Vec::new();
    for attempt in &corpus.attempts {
        let problem = corpus.problem_for(attempt);
        gold_words.push(word_count(&problem.gold_steps));
        student_words.push(word_count(&attempt.steps));
        gold_steps.push(problem.gold_steps.len() as f64);
        student_steps.push(attempt.steps.len() as f64);
        error_index.push(attempt.first_error_index as f64);
    }
    CorpusStats {
        dimensions: vec![
            summarize("gold_solution_word_length", &gold_words),
            summarize("student_solution_word_length", &student_words),
            summarize("gold_solution_step_length", &gold_steps),
            summarize("student_solution_step_length", &student_steps),
            summarize("first_error_step_index", &error_index),
        ],
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_problem() -> ProblemRecord {
        ProblemRecord {
            id: "p1".into(),
            question: "Tom has 3 bags with 4 apples each. How many apples?".into(),
            gold_steps: vec!["Tom has 3*4 = 12 apples.".into()],
            gold_final_answer: "12".into(),
            source: Source::VtgStyle,
        }
    }

    fn sample_attempt(id: &str, first_error: usize) -> StudentAttempt {
        StudentAttempt {
            id: id.into(),
            problem_id: "p1".into(),
            steps: vec!["Tom has 3 bags.".into(), "Tom has 3+4 = 7 apples.".into()],
            first_error_index: first_error,
            error_type: Some(ErrorType::CalculationError),
            mistake_description: None,
        }
    }

    #[test]
    fn canonicalizes_numbered_text() {
        let steps = canonicalize_steps_text("1. x=5\n2. x+3=8").unwrap();
        assert_eq!(steps, vec!["x=5".to_string(), "x+3=8".to_string()]);
    }

    #[test]
    fn canonicalize_strips_step_keyword_and_blank_lines() {
        let steps = canonicalize_steps_text("Step 1: add\n\nStep 2) subtract\n3. done").unwrap();
        assert_eq!(steps, vec!["add", "subtract", "done"]);
    }

    #[test]
    fn canonicalize_preserves_decimal_leads() {
        let steps = canonicalize_steps_text("3.5 miles each day\nStep 2: total").unwrap();
        assert_eq!(steps, vec!["3.5 miles each day", "total"]);
    }

    #[test]
    fn canonicalize_rejects_empty_solution() {
        assert!(matches!(canonicalize_steps_text("\n  \n"), Err(CorpusError::EmptySolution)));
    }

    #[test]
    fn rejects_error_index_outside_bounds() {
        let mut corpus = Corpus::default();
        let err = corpus.push(sample_problem(), sample_attempt("a1", 3), 1).unwrap_err();
        assert!(err.to_string().contains("outside 1..=2"), "{err}");
    }

    #[test]
    fn rejects_duplicate_attempt_ids() {
        let mut corpus = Corpus::default();
        corpus.push(sample_problem(), sample_attempt("a1", 2), 1).unwrap();
        let err = corpus.push(sample_problem(), sample_attempt("a1", 1), 2).unwrap_err();
        assert!(matches!(err, CorpusError::DuplicateId { .. }));
    }

    #[test]
    fn rejects_error_type_on_prm800k_source() {
        let mut problem = sample_problem();
        problem.source = Source::Prm800kStyle;
        let mut corpus = Corpus::default();
        let err = corpus.push(problem, sample_attempt("a1", 2), 1).unwrap_err();
        assert!(err.to_string().contains("only valid for vtg_style"), "{err}");
    }

    #[test]
    fn parses_long_form_error_labels() {
        assert_eq!(
            ErrorType::parse("Calculation error easily solved by a calculator"),
            Some(ErrorType::CalculationError)
        );
        assert_eq!(
            ErrorType::parse("Reached correct solution but proceeded further"),
            Some(ErrorType::ProceededPastCorrect)
        );
        assert_eq!(ErrorType::parse("unit_conversion"), Some(ErrorType::UnitConversion));
        assert_eq!(ErrorType::parse("gibberish"), None);
    }

    #[test]
    fn canonical_round_trip_preserves_records() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("corpus.jsonl");
        let mut corpus = Corpus::default();
        corpus.push(sample_problem(), sample_attempt("a1", 2), 1).unwrap();
        let mut second = sample_attempt("a2", 1);
        second.error_type = None;
        second.mistake_description = Some("adds instead of multiplying".into());
        corpus.push(sample_problem(), second, 2).unwrap();
        corpus.write_canonical(&path).unwrap();
        let reread = ingest(&path, SchemaKind::Canonical, true).unwrap();
        assert_eq!(reread.corpus.problems, corpus.problems);
        assert_eq!(reread.corpus.attempts, corpus.attempts);
    }

    #[test]
    fn strict_ingest_aborts_on_bad_line_lenient_skips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mixed.jsonl");
        let good = r#"{"id":"a1","problem_id":"p1","question":"Q?","gold_solution":["g 1"],"gold_final_answer":"1","student_solution":["s 1","s 2"],"first_error_step":2,"error_type":null,"source":"fixture"}"#;
        let bad = r#"{"id":"a2","problem_id":"p1","question":"Q?","gold_solution":["g 1"],"gold_final_answer":"1","student_solution":["s 1"],"first_error_step":4,"error_type":null,"source":"fixture"}"#;
        let mut file = File::create(&path).unwrap();
        writeln!(file, "{good}").unwrap();
        writeln!(file, "{bad}").unwrap();
        assert!(ingest(&path, SchemaKind::Canonical, true).is_err());
        let lenient = ingest(&path, SchemaKind::Canonical, false).unwrap();
        assert_eq!(lenient.corpus.attempts.len(), 1);
        assert_eq!(lenient.skipped.len(), 1);
        assert_eq!(lenient.skipped[0].line, 2);
    }

    #[test]
    fn vtg_adapter_handles_aliases_and_text_solutions() {
        let line = r#"{"qid":"q7","problem":"A pen costs 2 dollars. Ben buys 3 pens. Total?","reference_solution":"Step 1: Ben pays 2*3 = 6 dollars.\n#### 6","incorrect_solution":["Ben pays 2+3 = 5 dollars."],"first_error_index":1,"mistake_type":"Calculation error easily solved by a calculator","description":"adds the prices"}"#;
        let value: serde_json::Value = serde_json::from_str(line).unwrap();
        let (problem, attempt) = adapt_vtg(&value, 1).unwrap();
        assert_eq!(problem.id, "q7");
        assert_eq!(problem.gold_final_answer, "6");
        assert_eq!(problem.gold_steps, vec!["Ben pays 2*3 = 6 dollars.", "#### 6"]);
        assert_eq!(attempt.first_error_index, 1);
        assert_eq!(attempt.error_type, Some(ErrorType::CalculationError));
        assert_eq!(attempt.mistake_description.as_deref(), Some("adds the prices"));
    }

    #[test]
    fn vtg_adapter_falls_back_to_last_number_for_answer() {
        let line = r#"{"id":"a9","question":"Q?","gold_solution":["First part 5", "So the total is 30 dollars"],"student_solution":["wrong step"],"first_error_step":1}"#;
        let value: serde_json::Value = serde_json::from_str(line).unwrap();
        let (problem, _) = adapt_vtg(&value, 1).unwrap();
        assert_eq!(problem.gold_final_answer, "30");
    }

    #[test]
    fn prm800k_adapter_finds_first_negative_rating() {
        let line = r#"{"question":{"problem":"What is 2+2?","ground_truth_answer":"4","pre_generated_steps":["2+2 is a sum.","2+2 = 5.","So the answer is 5."]},"label":{"steps":[{"completions":[{"text":"ok","rating":1}],"chosen_completion":0},{"completions":[{"text":"bad","rating":-1}],"chosen_completion":0},{"completions":[{"text":"bad","rating":-1}],"chosen_completion":0}]}}"#;
        let value: serde_json::Value = serde_json::from_str(line).unwrap();
        let (problem, attempt) = adapt_prm800k(&value, 3).unwrap();
        assert_eq!(attempt.first_error_index, 2);
        assert_eq!(attempt.error_type, None);
        assert_eq!(problem.gold_final_answer, "4");
        assert_eq!(problem.gold_steps, vec!["The answer is 4."]);
        assert_eq!(attempt.id, "prm-00003");
    }

    #[test]
    fn prm800k_adapter_rejects_fully_correct_solutions() {
        let line = r#"{"question":{"problem":"What is 2+2?","ground_truth_answer":"4","pre_generated_steps":["2+2 = 4."]},"label":{"steps":[{"completions":[{"text":"ok","rating":1}],"chosen_completion":0}]}}"#;
        let value: serde_json::Value = serde_json::from_str(line).unwrap();
        assert!(adapt_prm800k(&value, 1).is_err());
    }

    #[test]
    fn stats_use_population_std_and_even_median() {
        let mut corpus = Corpus::default();
        corpus.push(sample_problem(), sample_attempt("a1", 2), 1).unwrap();
        let mut longer = sample_attempt("a2", 1);
        longer.steps = vec!["one two three".into(), "four".into(), "five".into(), "six".into()];
        corpus.push(sample_problem(), longer, 2).unwrap();
        let stats = dataset_stats(&corpus);
        let step_len = stats
            .dimensions
            .iter()
            .find(|d| d.dimension == "student_solution_step_length")
            .unwrap();
        assert_eq!(step_len.min, 2.0);
        assert_eq!(step_len.max, 4.0);
        assert_eq!(step_len.median, 3.0);
        assert_eq!(step_len.mean, 3.0);
        assert!((step_len.std - 1.0).abs() < 1e-12);
        let err_idx =
            stats.dimensions.iter().find(|d| d.dimension == "first_error_step_index").unwrap();
        assert_eq!(err_idx.median, 1.5);
    }
}
