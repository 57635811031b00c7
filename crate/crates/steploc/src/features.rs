//! Per-attempt feature extraction: question readability and argument counts,
//! arithmetic-expression mining over gold solutions, and assembly of the
//! feature vector consumed by the statistical analyses.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{ErrorType, ProblemRecord, StudentAttempt};
use crate::metrics::Prediction;

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("question text is empty")]
    EmptyQuestion,
    #[error("sidecar file has no row for problem {0}")]
    SidecarMissingId(String),
    #[error("sidecar file is malformed: {0}")]
    SidecarFormat(String),
    #[error("sidecar io: {0}")]
    Io(#[from] std::io::Error),
}

/// Canonical feature column order; pruning and matrix assembly follow it.
pub const FEATURE_ORDER: [&str; 19] = [
    "q_word_length",
    "q_arg_count",
    "q_fkgl",
    "q_tree_depth",
    "q_np_count",
    "g_arg_count",
    "g_add",
    "g_sub",
    "g_mul",
    "g_div",
    "g_op_unique",
    "g_op_diversity",
    "g_param_usage",
    "g_world_knowledge",
    "step_count",
    "rel_error_step_loc",
    "error_type",
    "semantic_recall",
    "solved",
];

/// One arithmetic operator recognized in gold-solution expressions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ArithmeticOp {
    Add,
    Sub,
    Mul,
    Div,
}

impl ArithmeticOp {
    /// Operator for a symbol token, accepting ASCII and common unicode forms.
    pub fn from_symbol(symbol: &str) -> Option<Self> {
        match symbol {
            "+" => Some(Self::Add),
            "-" | "\u{2212}" => Some(Self::Sub),
            "*" | "\u{00d7}" => Some(Self::Mul),
            "/" | "\u{00f7}" => Some(Self::Div),
            _ => None,
        }
    }

    /// Lowercase label used in artifacts.
    pub fn label(&self) -> &'static str {
        match self {
            Self::Add => "add",
            Self::Sub => "sub",
            Self::Mul => "mul",
            Self::Div => "div",
        }
    }
}

/// One mined arithmetic expression: at least two operands joined by a single
/// operator, with an optional stated result.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParsedExpression {
    pub lhs_args: Vec<f64>,
    pub operator: ArithmeticOp,
    pub result: Option<f64>,
    /// 1-based index of the gold step the expression came from.
    pub source_step: usize,
}

/// Question-side features.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct QuestionFeatures {
    pub word_length: u64,
    pub arg_count: u64,
    pub fkgl: f64,
}

/// Gold-solution math features.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GoldMathFeatures {
    pub arg_count: u64,
    pub add: u64,
    pub sub: u64,
    pub mul: u64,
    pub div: u64,
    pub op_unique: u64,
    pub op_diversity: f64,
    pub param_usage: f64,
    /// False when the question has no numbers, in which case param_usage is 0.
    pub param_usage_defined: bool,
    pub world_knowledge: u64,
}

/// Precomputed syntactic features supplied per problem id.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SidecarFeatures {
    pub tree_depth: f64,
    pub np_count: u64,
}

/// The assembled per-attempt row fed to the analyses.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FeatureVector {
    pub attempt_id: String,
    pub q_word_length: u64,
    pub q_arg_count: u64,
    pub q_fkgl: f64,
    pub q_tree_depth: Option<f64>,
    pub q_np_count: Option<u64>,
    pub g_arg_count: u64,
    pub g_add: u64,
    pub g_sub: u64,
    pub g_mul: u64,
    pub g_div: u64,
    pub g_op_unique: u64,
    pub g_op_diversity: f64,
    pub g_param_usage: f64,
    pub g_world_knowledge: u64,
    pub step_count: u64,
    /// first_error_index / step_count, always in (0, 1].
    pub rel_error_step_loc: f64,
    pub error_type: Option<ErrorType>,
    pub semantic_recall: f64,
    pub solved: bool,
    pub label_localized: bool,
}

/// Numeric design matrix: one column per available feature, in canonical order.
#[derive(Debug, Clone)]
pub struct FeatureMatrix {
    pub names: Vec<String>,
    pub columns: Vec<Vec<f64>>,
    pub labels: Vec<bool>,
}

fn number_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\d+(?:\.\d+)?").expect("static regex"))
}

fn fraction_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(\d+(?:\.\d+)?)\s*/\s*(\d+(?:\.\d+)?)").expect("static regex"))
}

/// Bit pattern used as a value-equality key, so "20" and "20.0" collapse.
fn value_key(value: f64) -> u64 {
    // +0.0 folds a negative zero into positive zero before taking bits.
    (value + 0.0).to_bits()
}

/// All plain numeric tokens (integers and decimals) in order of appearance.
pub fn number_values(text: &str) -> Vec<f64> {
    number_regex()
        .find_iter(text)
        .map(|m| m.as_str().parse::<f64>().expect("regex-matched number"))
        .collect()
}

/// Syllables in one token, by the documented heuristic: count maximal runs of
/// a/e/i/o/u/y in the letters; subtract a silent final 'e' except after a
/// consonant + 'l' ("table" keeps it, "tale" does not); letterless tokens
/// (bare numbers) and empty results count as one syllable.
pub fn syllable_count(token: &str) -> usize {
    let letters: Vec<u8> = token
        .chars()
        .filter(|c| c.is_ascii_alphabetic())
        .map(|c| c.to_ascii_lowercase() as u8)
        .collect();
    if letters.is_empty() {
        return 1;
    }
    let is_vowel = |b: u8| matches!(b, b'a' | b'e' | b'i' | b'o' | b'u' | b'y');
    let mut groups = 0usize;
    let mut in_group = false;
    for &b in &letters {
        if is_vowel(b) {
            if !in_group {
                groups += 1;
                in_group = true;
            }
        } else {
            in_group = false;
        }
    }
    let n = letters.len();
    if groups > 1 && letters[n - 1] == b'e' {
        let keep_le = n >= 3 && letters[n - 2] == b'l' && !is_vowel(letters[n - 3]);
        if !keep_le {
            groups -= 1;
        }
    }
    groups.max(1)
}

/// Whitespace tokens containing at least one alphanumeric character.
fn word_tokens(text: &str) -> Vec<&str> {
    text.split_whitespace().filter(|t| t.chars().any(|c| c.is_alphanumeric())).collect()
}

/// Sentence terminators: maximal runs of . ! ? where a period flanked by
/// digits (a decimal point) does not count. Minimum one sentence.
fn sentence_count(text: &str) -> usize {
    let chars: Vec<char> = text.chars().collect();
    let mut count = 0usize;
    let mut in_run = false;
    for (i, &c) in chars.iter().enumerate() {
        let decimal_point = c == '.'
            && i > 0
            && chars[i - 1].is_ascii_digit()
            && chars.get(i + 1).is_some_and(|n| n.is_ascii_digit());
        let terminator = matches!(c, '.' | '!' | '?') && !decimal_point;
        if terminator {
            if !in_run {
                count += 1;
                in_run = true;
            }
        } else {
            in_run = false;
        }
    }
    count.max(1)
}

/// Flesch-Kincaid grade level:
/// 0.39 * (words / sentences) + 11.8 * (syllables / words) - 15.59.
pub fn fkgl(text: &str) -> f64 {
    let words = word_tokens(text);
    if words.is_empty() {
        return 0.0;
    }
    let sentences = sentence_count(text) as f64;
    let syllables: usize = words.iter().map(|w| syllable_count(w)).sum();
    let w = words.len() as f64;
    0.39 * (w / sentences) + 11.8 * (syllables as f64 / w) - 15.59
}

struct QuestionNumbers {
    /// Distinct quantity values; a simple fraction folds to one value.
    distinct: BTreeSet<u64>,
    /// Values excluded from world knowledge: quantities plus fraction parts.
    exclusion: BTreeSet<u64>,
}

fn question_numbers(question: &str) -> QuestionNumbers {
    let mut distinct = BTreeSet::new();
    let mut exclusion = BTreeSet::new();
    let mut fraction_spans: Vec<(usize, usize)> = Vec::new();
    for cap in fraction_regex().captures_iter(question) {
        let p: f64 = cap[1].parse().expect("regex-matched number");
        let q: f64 = cap[2].parse().expect("regex-matched number");
        if q == 0.0 {
            continue;
        }
        let whole = cap.get(0).expect("whole match");
        fraction_spans.push((whole.start(), whole.end()));
        distinct.insert(value_key(p / q));
        exclusion.insert(value_key(p / q));
        exclusion.insert(value_key(p));
        exclusion.insert(value_key(q));
    }
    for m in number_regex().find_iter(question) {
        if fraction_spans.iter().any(|&(s, e)| m.start() < e && m.end() > s) {
            continue;
        }
        let v: f64 = m.as_str().parse().expect("regex-matched number");
        distinct.insert(value_key(v));
        exclusion.insert(value_key(v));
    }
    QuestionNumbers { distinct, exclusion }
}

/// Word count, distinct quantity count, and readability grade of a question.
pub fn extract_question_features(question: &str) -> Result<QuestionFeatures, FeatureError> {
    if question.trim().is_empty() {
        return Err(FeatureError::EmptyQuestion);
    }
    let numbers = question_numbers(question);
    Ok(QuestionFeatures {
        word_length: word_tokens(question).len() as u64,
        arg_count: numbers.distinct.len() as u64,
        fkgl: fkgl(question),
    })
}

#[derive(Clone, Copy, PartialEq)]
enum Link {
    Op(ArithmeticOp),
    Equals,
}

fn link_between(text: &str, from_end: usize, to_start: usize) -> Option<Link> {
    let between = text[from_end..to_start].trim();
    if between == "=" {
        return Some(Link::Equals);
    }
    ArithmeticOp::from_symbol(between).map(Link::Op)
}

/// Scans plain text for "number op number ... (= number)?" patterns. Chains of
/// one operator collect extra operands; after each match the scan resumes at
/// the last consumed number so a stated result can open the next expression.
fn scan_inline(text: &str, source_step: usize) -> Vec<ParsedExpression> {
    let tokens: Vec<(usize, usize, f64)> = number_regex()
        .find_iter(text)
        .map(|m| (m.start(), m.end(), m.as_str().parse::<f64>().expect("number")))
        .collect();
    let link = |from: usize, to: usize| link_between(text, tokens[from].1, tokens[to].0);
    let mut out = Vec::new();
    let mut i = 0usize;
    while i + 1 < tokens.len() {
        let Some(Link::Op(op)) = link(i, i + 1) else {
            i += 1;
            continue;
        };
        let mut args = vec![tokens[i].2, tokens[i + 1].2];
        let mut last = i + 1;
        while last + 1 < tokens.len() && link(last, last + 1) == Some(Link::Op(op)) {
            last += 1;
            args.push(tokens[last].2);
        }
        let mut result = None;
        if last + 1 < tokens.len() && link(last, last + 1) == Some(Link::Equals) {
            last += 1;
            result = Some(tokens[last].2);
        }
        out.push(ParsedExpression { lhs_args: args, operator: op, result, source_step });
        i = last;
    }
    out
}

/// Mines arithmetic expressions from gold steps. A step carrying calculator
/// annotations (<<...>>) is read only through them; otherwise the step text is
/// scanned inline. Unparseable text yields no expressions.
pub fn parse_expressions(gold_steps: &[String]) -> Vec<ParsedExpression> {
    static ANNOTATION: OnceLock<Regex> = OnceLock::new();
    let annotation = ANNOTATION.get_or_init(|| Regex::new(r"<<([^<>]*)>>").expect("static regex"));
    let mut out = Vec::new();
    for (idx, step) in gold_steps.iter().enumerate() {
        let source_step = idx + 1;
        let inners: Vec<&str> =
            annotation.captures_iter(step).map(|c| c.get(1).expect("group").as_str()).collect();
        if inners.is_empty() {
            out.extend(scan_inline(step, source_step));
        } else {
            for inner in inners {
                out.extend(scan_inline(inner, source_step));
            }
        }
    }
    out
}

/// Distinct-number, operator, and world-knowledge features of a gold solution.
/// World knowledge counts distinct gold numbers that are neither question
/// quantities (nor fraction parts) nor the stated result of any expression.
pub fn extract_gold_math_features(gold_steps: &[String], question: &str) -> GoldMathFeatures {
    let numbers = question_numbers(question);
    let expressions = parse_expressions(gold_steps);
    let mut gold_values = BTreeSet::new();
    for step in gold_steps {
        for v in number_values(step) {
            gold_values.insert(value_key(v));
        }
    }
    let (mut add, mut sub, mut mul, mut div) = (0u64, 0u64, 0u64, 0u64);
    let mut results = BTreeSet::new();
    for expression in &expressions {
        match expression.operator {
            ArithmeticOp::Add => add += 1,
            ArithmeticOp::Sub => sub += 1,
            ArithmeticOp::Mul => mul += 1,
            ArithmeticOp::Div => div += 1,
        }
        if let Some(result) = expression.result {
            results.insert(value_key(result));
        }
    }
    let total = add + sub + mul + div;
    let op_unique = [add, sub, mul, div].iter().filter(|&&c| c > 0).count() as u64;
    let op_diversity = if total == 0 { 0.0 } else { op_unique as f64 / total as f64 };
    let q_arg_count = numbers.distinct.len() as u64;
    let (param_usage, param_usage_defined) = if q_arg_count == 0 {
        (0.0, false)
    } else {
        (gold_values.len() as f64 / q_arg_count as f64, true)
    };
    let world_knowledge = gold_values
        .iter()
        .filter(|k| !numbers.exclusion.contains(*k) && !results.contains(*k))
        .count() as u64;
    GoldMathFeatures {
        arg_count: gold_values.len() as u64,
        add,
        sub,
        mul,
        div,
        op_unique,
        op_diversity,
        param_usage,
        param_usage_defined,
        world_knowledge,
    }
}

/// Loads the optional syntactic sidecar: CSV with header
/// id,q_tree_depth,q_np_count, keyed by problem id.
pub fn load_sidecar(path: &Path) -> Result<BTreeMap<String, SidecarFeatures>, FeatureError> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header = lines.next().unwrap_or("").trim();
    if header != "id,q_tree_depth,q_np_count" {
        return Err(FeatureError::SidecarFormat(format!("unexpected header '{header}'")));
    }
    let mut map = BTreeMap::new();
    for (line_no, line) in lines.enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(',').map(str::trim).collect();
        if parts.len() != 3 {
            return Err(FeatureError::SidecarFormat(format!(
                "line {}: expected 3 fields, got {}",
                line_no + 2,
                parts.len()
            )));
        }
        let tree_depth: f64 = parts[1]
            .parse()
            .map_err(|_| FeatureError::SidecarFormat(format!("line {}: bad depth", line_no + 2)))?;
        let np_count: u64 = parts[2]
            .parse()
            .map_err(|_| FeatureError::SidecarFormat(format!("line {}: bad count", line_no + 2)))?;
        map.insert(parts[0].to_string(), SidecarFeatures { tree_depth, np_count });
    }
    Ok(map)
}

/// Builds the full per-attempt row. The prediction is consulted only for the
/// localized label; every other field derives from the problem and attempt.
pub fn assemble_feature_vector(
    problem: &ProblemRecord,
    attempt: &StudentAttempt,
    prediction: &Prediction,
    semantic_recall: f64,
    solved: bool,
    sidecar: Option<&BTreeMap<String, SidecarFeatures>>,
) -> Result<FeatureVector, FeatureError> {
    let question = extract_question_features(&problem.question)?;
    let gold = extract_gold_math_features(&problem.gold_steps, &problem.question);
    let (q_tree_depth, q_np_count) = match sidecar {
        Some(map) => {
            let row = map
                .get(&problem.id)
                .ok_or_else(|| FeatureError::SidecarMissingId(problem.id.clone()))?;
            (Some(row.tree_depth), Some(row.np_count))
        }
        None => (None, None),
    };
    let step_count = attempt.steps.len() as u64;
    Ok(FeatureVector {
        attempt_id: attempt.id.clone(),
        q_word_length: question.word_length,
        q_arg_count: question.arg_count,
        q_fkgl: question.fkgl,
        q_tree_depth,
        q_np_count,
        g_arg_count: gold.arg_count,
        g_add: gold.add,
        g_sub: gold.sub,
        g_mul: gold.mul,
        g_div: gold.div,
        g_op_unique: gold.op_unique,
        g_op_diversity: gold.op_diversity,
        g_param_usage: gold.param_usage,
        g_world_knowledge: gold.world_knowledge,
        step_count,
        rel_error_step_loc: attempt.first_error_index as f64 / step_count as f64,
        error_type: attempt.error_type,
        semantic_recall: semantic_recall.clamp(0.0, 1.0),
        solved,
        label_localized: prediction.predicted_step == Some(attempt.first_error_index),
    })
}

impl FeatureVector {
    /// Numeric value for a canonical column; None when a sidecar column is
    /// absent. Error type codes as 0 for untyped, else its 1-based code.
    pub fn numeric(&self, name: &str) -> Option<f64> {
        match name {
            "q_word_length" => Some(self.q_word_length as f64),
            "q_arg_count" => Some(self.q_arg_count as f64),
            "q_fkgl" => Some(self.q_fkgl),
            "q_tree_depth" => self.q_tree_depth,
            "q_np_count" => self.q_np_count.map(|v| v as f64),
            "g_arg_count" => Some(self.g_arg_count as f64),
            "g_add" => Some(self.g_add as f64),
            "g_sub" => Some(self.g_sub as f64),
            "g_mul" => Some(self.g_mul as f64),
            "g_div" => Some(self.g_div as f64),
            "g_op_unique" => Some(self.g_op_unique as f64),
            "g_op_diversity" => Some(self.g_op_diversity),
            "g_param_usage" => Some(self.g_param_usage),
            "g_world_knowledge" => Some(self.g_world_knowledge as f64),
            "step_count" => Some(self.step_count as f64),
            "rel_error_step_loc" => Some(self.rel_error_step_loc),
            "error_type" => Some(self.error_type.map(|t| t.code() as f64).unwrap_or(0.0)),
            "semantic_recall" => Some(self.semantic_recall),
            "solved" => Some(if self.solved { 1.0 } else { 0.0 }),
            _ => None,
        }
    }
}

/// Assembles the design matrix in canonical column order. A sidecar column is
/// kept only when every row carries it; labels are the localized flags.
pub fn feature_matrix(rows: &[FeatureVector]) -> FeatureMatrix {
    let mut names = Vec::new();
    let mut columns = Vec::new();
    for name in FEATURE_ORDER {
        let values: Vec<Option<f64>> = rows.iter().map(|r| r.numeric(name)).collect();
        if values.iter().all(|v| v.is_some()) && !rows.is_empty() {
            names.push(name.to_string());
            columns.push(values.into_iter().map(|v| v.expect("checked")).collect());
        }
    }
    FeatureMatrix { names, columns, labels: rows.iter().map(|r| r.label_localized).collect() }
}
