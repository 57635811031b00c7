//! Prompt settings, template rendering, and model-output parsing.
//!
//! Four settings: unguided review (wo_s), review guided by the gold solution
//! (w_gs), review guided by a model-corrected solution (w_cor), and a
//! uniform-random baseline that issues no model calls. Templates are plain
//! text files with `{placeholder}` slots; built-in defaults are compiled in.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{ProblemRecord, StudentAttempt};
use crate::gateway::Message;

/// Literal concluding phrase appended between solving stages; the answer
/// parser keys on it.
pub const FINAL_ANSWER_PHRASE: &str = "Therefore, the final answer is:";

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("template {name}: placeholder {placeholder} must appear exactly once (found {count})")]
    PlaceholderCount { name: String, placeholder: String, count: usize },
    #[error("template {name}: placeholder {placeholder} is not allowed")]
    ForbiddenPlaceholder { name: String, placeholder: String },
    #[error("template file {path}: {message}")]
    TemplateIo { path: String, message: String },
    #[error("setting {0} requires a reference solution")]
    MissingReference(String),
    #[error("setting {0} does not take a reference solution")]
    UnexpectedReference(String),
    #[error("the random baseline issues no prompts")]
    RandomBaselineHasNoPrompt,
    #[error("model output contains no extractable answer")]
    EmptyAnswer,
}

/// Prompt settings in canonical declaration order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptSetting {
    WoS,
    WGs,
    WCor,
    #[serde(rename = "random")]
    RandomBaseline,
}

pub const ALL_SETTINGS: [PromptSetting; 4] =
    [PromptSetting::WoS, PromptSetting::WGs, PromptSetting::WCor, PromptSetting::RandomBaseline];

impl PromptSetting {
    pub fn key(&self) -> &'static str {
        match self {
            PromptSetting::WoS => "wo_s",
            PromptSetting::WGs => "w_gs",
            PromptSetting::WCor => "w_cor",
            PromptSetting::RandomBaseline => "random",
        }
    }

    /// Human-facing table label.
    pub fn label(&self) -> &'static str {
        match self {
            PromptSetting::WoS => "w/o-S",
            PromptSetting::WGs => "w-GS",
            PromptSetting::WCor => "w-Cor",
            PromptSetting::RandomBaseline => "Random",
        }
    }

    pub fn needs_reference(&self) -> bool {
        matches!(self, PromptSetting::WGs | PromptSetting::WCor)
    }

    pub fn from_key(key: &str) -> Option<PromptSetting> {
        match key {
            "wo_s" => Some(PromptSetting::WoS),
            "w_gs" => Some(PromptSetting::WGs),
            "w_cor" => Some(PromptSetting::WCor),
            "random" | "random_baseline" => Some(PromptSetting::RandomBaseline),
            _ => None,
        }
    }
}

/// How a localization reply parsed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParseStatus {
    Ok,
    Clamped,
    Unparsed,
}

/// A named template body with validated placeholder usage.
#[derive(Debug, Clone)]
pub struct PromptTemplate {
    pub name: String,
    pub body: String,
}

impl PromptTemplate {
    fn validate(&self, required: &[&str], forbidden: &[&str]) -> Result<(), PromptError> {
        for placeholder in required {
            let count = self.body.matches(placeholder).count();
            if count != 1 {
                return Err(PromptError::PlaceholderCount {
                    name: self.name.clone(),
                    placeholder: placeholder.to_string(),
                    count,
                });
            }
        }
        for placeholder in forbidden {
            if self.body.contains(placeholder) {
                return Err(PromptError::ForbiddenPlaceholder {
                    name: self.name.clone(),
                    placeholder: placeholder.to_string(),
                });
            }
        }
        Ok(())
    }
}

/// The five template slots plus few-shot exemplars per slot.
#[derive(Debug)]
pub struct PromptLibrary {
    templates: BTreeMap<String, PromptTemplate>,
    few_shot: BTreeMap<String, Vec<String>>,
    pub few_shot_count: usize,
}

const TEMPLATE_NAMES: [&str; 5] = ["wo_s", "w_gs", "w_cor", "correction", "solve_stage1"];

fn template_rules(name: &str) -> (Vec<&'static str>, Vec<&'static str>) {
    match name {
        "wo_s" => (
            vec!["{question}", "{student_steps}", "{few_shot_block}"],
            vec!["{reference_steps}"],
        ),
        "w_gs" | "w_cor" | "correction" => (
            vec!["{question}", "{student_steps}", "{reference_steps}", "{few_shot_block}"],
            vec![],
        ),
        "solve_stage1" => (
            vec!["{question}", "{few_shot_block}"],
            vec!["{student_steps}", "{reference_steps}"],
        ),
        _ => unreachable!("unknown template {name}"),
    }
}

fn split_exemplars(text: &str) -> Vec<String> {
    text.split("\n---\n").map(|s| s.trim_matches('\n').to_string()).filter(|s| !s.is_empty()).collect()
}

impl PromptLibrary {
    /// Compiled-in default templates and exemplars.
    pub fn builtin() -> PromptLibrary {
        let bodies: [(&str, &str); 5] = [
            ("wo_s", include_str!("../../../templates/wo_s.txt")),
            ("w_gs", include_str!("../../../templates/w_gs.txt")),
            ("w_cor", include_str!("../../../templates/w_cor.txt")),
            ("correction", include_str!("../../../templates/correction.txt")),
            ("solve_stage1", include_str!("../../../templates/solve_stage1.txt")),
        ];
        let shots: [(&str, &str); 5] = [
            ("wo_s", include_str!("../../../templates/few_shot/wo_s.txt")),
            ("w_gs", include_str!("../../../templates/few_shot/w_gs.txt")),
            ("w_cor", include_str!("../../../templates/few_shot/w_cor.txt")),
            ("correction", include_str!("../../../templates/few_shot/correction.txt")),
            ("solve_stage1", include_str!("../../../templates/few_shot/solve_stage1.txt")),
        ];
        let mut templates = BTreeMap::new();
        for (name, body) in bodies {
            let template = PromptTemplate { name: name.to_string(), body: body.to_string() };
            let (required, forbidden) = template_rules(name);
            template.validate(&required, &forbidden).expect("builtin template is valid");
            templates.insert(name.to_string(), template);
        }
        let mut few_shot = BTreeMap::new();
        for (name, text) in shots {
            few_shot.insert(name.to_string(), split_exemplars(text));
        }
        PromptLibrary { templates, few_shot, few_shot_count: 2 }
    }

    /// Loads `<name>.txt` templates (and optional `few_shot/<name>.txt`
    /// exemplar files) from a directory, validating placeholder usage.
    pub fn from_dir(dir: &Path) -> Result<PromptLibrary, PromptError> {
        let mut templates = BTreeMap::new();
        let mut few_shot = BTreeMap::new();
        for name in TEMPLATE_NAMES {
            let path = dir.join(format!("{name}.txt"));
            let body = std::fs::read_to_string(&path).map_err(|e| PromptError::TemplateIo {
                path: path.display().to_string(),
                message: e.to_string(),
            })?;
            let template = PromptTemplate { name: name.to_string(), body };
            let (required, forbidden) = template_rules(name);
            template.validate(&required, &forbidden)?;
            templates.insert(name.to_string(), template);
            let shot_path = dir.join("few_shot").join(format!("{name}.txt"));
            let shots = match std::fs::read_to_string(&shot_path) {
                Ok(text) => split_exemplars(&text),
                Err(_) => Vec::new(),
            };
            few_shot.insert(name.to_string(), shots);
        }
        Ok(PromptLibrary { templates, few_shot, few_shot_count: 2 })
    }

    pub fn with_few_shot_count(mut self, count: usize) -> PromptLibrary {
        self.few_shot_count = count;
        self
    }

    fn few_shot_block(&self, name: &str) -> String {
        let shots = self.few_shot.get(name).map(Vec::as_slice).unwrap_or(&[]);
        let take = self.few_shot_count.min(shots.len());
        if take == 0 {
            return String::new();
        }
        let mut block = shots[..take].join("\n\n");
        block.push_str("\n\n");
        block
    }

    fn render(&self, name: &str, slots: &[(&str, String)]) -> String {
        let body = &self.templates.get(name).expect("known template").body;
        let mut text = body.clone();
        for (placeholder, value) in slots {
            text = text.replace(placeholder, value);
        }
        text
    }

    /// Localization prompt for one attempt. Settings that use a reference
    /// solution must get one; wo_s must not; the random baseline has no prompt.
    pub fn build_prompt(
        &self,
        setting: PromptSetting,
        problem: &ProblemRecord,
        attempt: &StudentAttempt,
        reference: Option<&[String]>,
    ) -> Result<Vec<Message>, PromptError> {
        match setting {
            PromptSetting::RandomBaseline => return Err(PromptError::RandomBaselineHasNoPrompt),
            _ if setting.needs_reference() && reference.is_none() => {
                return Err(PromptError::MissingReference(setting.key().into()));
            }
            _ if !setting.needs_reference() && reference.is_some() => {
                return Err(PromptError::UnexpectedReference(setting.key().into()));
            }
            _ => {}
        }
        let name = setting.key();
        let mut slots = vec![
            ("{question}", problem.question.clone()),
            ("{student_steps}", numbered_steps(&attempt.steps)),
            ("{few_shot_block}", self.few_shot_block(name)),
        ];
        if let Some(reference) = reference {
            slots.push(("{reference_steps}", numbered_steps(reference)));
        }
        Ok(vec![Message::user(self.render(name, &slots))])
    }

    /// Correction prompt: gold-guided rewrite of the student's solution.
    pub fn build_correction_prompt(
        &self,
        problem: &ProblemRecord,
        attempt: &StudentAttempt,
    ) -> Vec<Message> {
        let slots = vec![
            ("{question}", problem.question.clone()),
            ("{student_steps}", numbered_steps(&attempt.steps)),
            ("{reference_steps}", numbered_steps(&problem.gold_steps)),
            ("{few_shot_block}", self.few_shot_block("correction")),
        ];
        vec![Message::user(self.render("correction", &slots))]
    }

    /// Two-stage solver prompts: the stage-1 messages and the literal stage-2
    /// suffix. Stage 2 replays stage 1, appends the model's output as an
    /// assistant turn (skipped when empty), then asks for the suffix.
    pub fn build_solver_prompts(&self, problem: &ProblemRecord) -> (Vec<Message>, String) {
        let slots = vec![
            ("{question}", problem.question.clone()),
            ("{few_shot_block}", self.few_shot_block("solve_stage1")),
        ];
        let initial = vec![Message::user(self.render("solve_stage1", &slots))];
        (initial, FINAL_ANSWER_PHRASE.to_string())
    }
}

/// Stage-2 message list: stage-1 prompt, the stage-1 output verbatim, then the
/// concluding-phrase suffix.
pub fn solver_stage2_messages(
    initial: &[Message],
    stage1_output: &str,
    suffix: &str,
) -> Vec<Message> {
    let mut messages = initial.to_vec();
    if !stage1_output.trim().is_empty() {
        messages.push(Message::assistant(stage1_output.to_string()));
    }
    messages.push(Message::user(suffix.to_string()));
    messages
}

/// Steps rendered as numbered "Step k:" lines.
pub fn numbered_steps(steps: &[String]) -> String {
    steps
        .iter()
        .enumerate()
        .map(|(i, s)| format!("Step {}: {}", i + 1, s))
        .collect::<Vec<_>>()
        .join("\n")
}

/// Integer tokens that are not part of a decimal number.
fn standalone_integers(text: &str) -> Vec<(usize, u64)> {
    let bytes = text.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i].is_ascii_digit() {
            let start = i;
            while i < bytes.len() && bytes[i].is_ascii_digit() {
                i += 1;
            }
            let before_ok = if start == 0 {
                true
            } else {
                let prev = bytes[start - 1];
                // reject decimal tails like the 5 in "3.5"
                !(prev == b'.' && start >= 2 && bytes[start - 2].is_ascii_digit())
            };
            // reject decimal heads like the 3 in "3.5"
            let after_ok = !(i + 1 < bytes.len() && bytes[i] == b'.' && bytes[i + 1].is_ascii_digit());
            if before_ok && after_ok {
                if let Ok(value) = text[start..i].parse::<u64>() {
                    out.push((start, value));
                }
            }
        } else {
            i += 1;
        }
    }
    out
}

/// Extracts the predicted first-error step from a localization reply.
///
/// The last "Step N" mention wins; with none, the last standalone integer is
/// used. Out-of-range predictions clamp to [1, step_count] and are marked.
pub fn parse_error_step(output: &str, step_count: usize) -> (Option<usize>, ParseStatus) {
    assert!(step_count >= 1, "attempts always have at least one step");
    let lower = output.to_lowercase();
    let step_re = regex::Regex::new(r"step\s*#?\s*(\d+)").expect("static regex");
    let mentioned: Option<u64> = step_re
        .captures_iter(&lower)
        .filter_map(|c| c.get(1).and_then(|m| m.as_str().parse().ok()))
        .last();
    let raw = match mentioned {
        Some(n) => Some(n),
        None => standalone_integers(output).into_iter().map(|(_, v)| v).last(),
    };
    match raw {
        None => (None, ParseStatus::Unparsed),
        Some(n) if n < 1 => (Some(1), ParseStatus::Clamped),
        Some(n) if (n as usize) > step_count => (Some(step_count), ParseStatus::Clamped),
        Some(n) => (Some(n as usize), ParseStatus::Ok),
    }
}

/// Strips currency symbols and digit-group commas: "$1,200." stays one number.
fn strip_currency_and_commas(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    let chars: Vec<char> = text.chars().collect();
    for (i, &c) in chars.iter().enumerate() {
        if matches!(c, '$' | '€' | '£') {
            continue;
        }
        if c == ','
            && i > 0
            && i + 1 < chars.len()
            && chars[i - 1].is_ascii_digit()
            && chars[i + 1].is_ascii_digit()
        {
            continue;
        }
        out.push(c);
    }
    out
}

fn unwrap_delimiters(text: &str) -> String {
    let mut s = text.trim().to_string();
    loop {
        let before = s.clone();
        for (open, close) in [("$$", "$$"), ("$", "$"), ("\\(", "\\)"), ("\\[", "\\]")] {
            if s.len() > open.len() + close.len() && s.starts_with(open) && s.ends_with(close) {
                s = s[open.len()..s.len() - close.len()].trim().to_string();
            }
        }
        if let Some(start) = s.find("\\boxed{") {
            let inner_start = start + "\\boxed{".len();
            let mut depth = 1;
            let mut end = None;
            for (i, c) in s[inner_start..].char_indices() {
                match c {
                    '{' => depth += 1,
                    '}' => {
                        depth -= 1;
                        if depth == 0 {
                            end = Some(inner_start + i);
                            break;
                        }
                    }
                    _ => {}
                }
            }
            if let Some(end) = end {
                s = s[inner_start..end].trim().to_string();
            }
        }
        if s == before {
            return s;
        }
    }
}

/// Parses a numeric answer: plain numbers, "p/q" fractions, and
/// "\frac{p}{q}" all evaluate; anything else is non-numeric.
pub fn parse_numeric(text: &str) -> Option<f64> {
    let cleaned = strip_currency_and_commas(text.trim()).trim().to_string();
    if cleaned.is_empty() {
        return None;
    }
    if let Ok(v) = cleaned.parse::<f64>() {
        return v.is_finite().then_some(v);
    }
    let frac_re = regex::Regex::new(r"^-?\s*(\d+(?:\.\d+)?)\s*/\s*(\d+(?:\.\d+)?)$").expect("static regex");
    if let Some(caps) = frac_re.captures(&cleaned) {
        let num: f64 = caps[1].parse().ok()?;
        let den: f64 = caps[2].parse().ok()?;
        if den != 0.0 {
            let sign = if cleaned.starts_with('-') { -1.0 } else { 1.0 };
            return Some(sign * num / den);
        }
    }
    let latex_re =
        regex::Regex::new(r"^\\frac\{(\d+(?:\.\d+)?)\}\{(\d+(?:\.\d+)?)\}$").expect("static regex");
    if let Some(caps) = latex_re.captures(&cleaned) {
        let num: f64 = caps[1].parse().ok()?;
        let den: f64 = caps[2].parse().ok()?;
        if den != 0.0 {
            return Some(num / den);
        }
    }
    None
}

/// Documented normalization: trim, drop trailing sentence punctuation, unwrap
/// math delimiters and \boxed, strip currency/group commas, collapse internal
/// whitespace, canonicalize plain numbers, lowercase everything else.
pub fn normalize_answer(raw: &str) -> String {
    let mut s = raw.trim().to_string();
    while s.ends_with(['.', '!', '?', ',', ';', ':']) {
        s.pop();
        s = s.trim_end().to_string();
    }
    s = unwrap_delimiters(&s);
    s = strip_currency_and_commas(&s);
    s = s.split_whitespace().collect::<Vec<_>>().join(" ");
    if let Ok(v) = s.parse::<f64>() {
        if v.is_finite() {
            return format_number(v);
        }
    }
    s.to_lowercase()
}

/// Shortest round-trip rendering; integral values print without ".0".
fn format_number(v: f64) -> String {
    if v == v.trunc() && v.abs() < 1e15 {
        format!("{}", v as i64)
    } else {
        format!("{v}")
    }
}

/// Extracts and normalizes the final answer from solver output.
///
/// With the concluding phrase present the text after its last occurrence is
/// the answer; otherwise the reply is prose and the last number in it is
/// taken, falling back to the normalized whole output.
pub fn parse_final_answer(output: &str) -> Result<String, PromptError> {
    if let Some(pos) = output.rfind(FINAL_ANSWER_PHRASE) {
        let tail = &output[pos + FINAL_ANSWER_PHRASE.len()..];
        let normalized = normalize_answer(tail);
        if normalized.is_empty() {
            return Err(PromptError::EmptyAnswer);
        }
        return Ok(normalized);
    }
    let cleaned = strip_currency_and_commas(output);
    let number_re = regex::Regex::new(r"\d+(?:\.\d+)?").expect("static regex");
    if let Some(last) = number_re.find_iter(&cleaned).last() {
        return Ok(normalize_answer(last.as_str()));
    }
    let normalized = normalize_answer(output);
    if normalized.is_empty() {
        return Err(PromptError::EmptyAnswer);
    }
    Ok(normalized)
}

/// Answer equivalence: numeric values (fractions included) compare within
/// relative tolerance 1e-6; everything else compares as normalized strings.
pub fn answers_equal(a: &str, b: &str) -> bool {
    if a.trim().is_empty() || b.trim().is_empty() {
        return false;
    }
    let norm_a = normalize_answer(a);
    let norm_b = normalize_answer(b);
    match (parse_numeric(&norm_a), parse_numeric(&norm_b)) {
        (Some(x), Some(y)) => {
            let scale = x.abs().max(y.abs()).max(1.0);
            (x - y).abs() <= 1e-6 * scale
        }
        _ => norm_a == norm_b,
    }
}
