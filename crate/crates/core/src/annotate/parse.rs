//! Tolerant parsing of annotator replies.
//!
//! Replies are first stripped of markdown fences, then read as JSON. When that
//! fails a lenient reader accepts Python-literal style text (single quotes,
//! `True`/`None`, missing or trailing commas). Counterfactual replies have a
//! last-resort field scanner for the loosely bracketed shape used in the
//! counterfactual prompt's own example.

use std::sync::LazyLock;

use log::warn;
use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::model::{normalize_whitespace, AtomicLabel};

/// Returns the body of the first fenced block, or the input when there is none.
pub fn strip_fences(raw: &str) -> &str {
    let Some(open) = raw.find("```") else {
        return raw.trim();
    };
    let after = &raw[open + 3..];
    // skip an info string such as `json`
    let body_start = after.find('\n').map_or(0, |i| i + 1);
    let body = &after[body_start..];
    match body.find("```") {
        Some(close) => body[..close].trim(),
        None => body.trim(),
    }
}

/// Parses the first JSON-like value in `text`.
pub fn parse_loose(text: &str) -> Option<Value> {
    let text = strip_fences(text);
    if let Ok(v) = serde_json::from_str::<Value>(text) {
        return Some(v);
    }
    let start = text.find(['{', '['])?;
    let mut reader = Lenient {
        chars: text[start..].chars().collect(),
        pos: 0,
    };
    reader.value()
}

struct Lenient {
    chars: Vec<char>,
    pos: usize,
}

impl Lenient {
    fn peek(&self) -> Option<char> {
        self.chars.get(self.pos).copied()
    }

    fn skip_ws(&mut self) {
        while self.peek().is_some_and(char::is_whitespace) {
            self.pos += 1;
        }
    }

    fn skip_separators(&mut self) {
        while self.peek().is_some_and(|c| c.is_whitespace() || c == ',') {
            self.pos += 1;
        }
    }

    fn value(&mut self) -> Option<Value> {
        self.skip_ws();
        match self.peek()? {
            '{' => self.object(),
            '[' | '(' => self.array(),
            '\'' | '"' => self.string().map(Value::String),
            c if c == '-' || c.is_ascii_digit() => self.number(),
            _ => self.word(),
        }
    }

    fn object(&mut self) -> Option<Value> {
        self.pos += 1;
        let mut map = Map::new();
        loop {
            self.skip_separators();
            match self.peek()? {
                '}' => {
                    self.pos += 1;
                    return Some(Value::Object(map));
                }
                _ => {
                    let key = match self.value()? {
                        Value::String(s) => s,
                        other => other.to_string(),
                    };
                    self.skip_ws();
                    if self.peek()? != ':' {
                        return None;
                    }
                    self.pos += 1;
                    let v = self.value()?;
                    map.insert(key, v);
                }
            }
        }
    }

    fn array(&mut self) -> Option<Value> {
        let close = if self.peek()? == '(' { ')' } else { ']' };
        self.pos += 1;
        let mut items = Vec::new();
        loop {
            self.skip_separators();
            if self.peek()? == close {
                self.pos += 1;
                return Some(Value::Array(items));
            }
            let v = self.value()?;
            self.skip_ws();
            if self.peek() == Some(':') {
                // a key/value pair inside brackets: not a list
                return None;
            }
            items.push(v);
        }
    }

    fn string(&mut self) -> Option<String> {
        let quote = self.peek()?;
        self.pos += 1;
        let mut out = String::new();
        loop {
            let c = self.peek()?;
            self.pos += 1;
            match c {
                '\\' => {
                    let e = self.peek()?;
                    self.pos += 1;
                    out.push(match e {
                        'n' => '\n',
                        't' => '\t',
                        'r' => '\r',
                        other => other,
                    });
                }
                c if c == quote => return Some(out),
                c => out.push(c),
            }
        }
    }

    fn number(&mut self) -> Option<Value> {
        let start = self.pos;
        while self
            .peek()
            .is_some_and(|c| c.is_ascii_digit() || matches!(c, '-' | '+' | '.' | 'e' | 'E'))
        {
            self.pos += 1;
        }
        let text: String = self.chars[start..self.pos].iter().collect();
        serde_json::from_str(&text).ok()
    }

    fn word(&mut self) -> Option<Value> {
        let start = self.pos;
        while self
            .peek()
            .is_some_and(|c| !matches!(c, ',' | ':' | ']' | '}' | ')' | '\n'))
        {
            self.pos += 1;
        }
        let text: String = self.chars[start..self.pos].iter().collect();
        let text = text.trim();
        Some(match text {
            "True" | "true" => Value::Bool(true),
            "False" | "false" => Value::Bool(false),
            "None" | "null" => Value::Null,
            "" => return None,
            other => Value::String(other.to_string()),
        })
    }
}

fn string_list(v: &Value) -> Option<Vec<String>> {
    match v {
        Value::Array(items) => Some(
            items
                .iter()
                .filter_map(|i| match i {
                    Value::String(s) => Some(normalize_whitespace(s)),
                    _ => None,
                })
                .filter(|s| !s.is_empty())
                .collect(),
        ),
        Value::String(s) if !s.trim().is_empty() => Some(vec![normalize_whitespace(s)]),
        _ => None,
    }
}

fn find_key<'a>(v: &'a Value, key: &str) -> Option<&'a Value> {
    match v {
        Value::Object(map) => map
            .iter()
            .find(|(k, _)| k.eq_ignore_ascii_case(key))
            .map(|(_, v)| v)
            .or_else(|| map.values().find_map(|v| find_key(v, key))),
        Value::Array(items) => items.iter().find_map(|v| find_key(v, key)),
        _ => None,
    }
}

/// Instructions from a summarize reply: `{'instructions': [...], 'reasoning': ...}`.
pub fn parse_instructions(raw: &str) -> Result<Vec<String>> {
    let value = parse_loose(raw).ok_or_else(|| Error::SummarizeParse("no JSON object found".into()))?;
    let list = match &value {
        Value::Array(_) => string_list(&value),
        _ => find_key(&value, "instructions").and_then(string_list),
    }
    .ok_or_else(|| Error::SummarizeParse("missing 'instructions' list".into()))?;
    if list.is_empty() {
        return Err(Error::SummarizeParse("empty instructions list".into()));
    }
    Ok(list)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FilterResult {
    pub best: Vec<String>,
    pub new: Vec<String>,
}

/// `{'best': [...], 'new': [...]}` from a filter reply. A missing key reads as
/// an empty list; a reply with neither key is an error.
pub fn parse_filter(raw: &str) -> Result<FilterResult> {
    let fail = |reason: &str| Error::FilterParse {
        reason: reason.to_string(),
        raw: raw.to_string(),
    };
    let value = parse_loose(raw).ok_or_else(|| fail("no JSON object found"))?;
    let best = find_key(&value, "best").map(|v| string_list(v).unwrap_or_default());
    let new = find_key(&value, "new").map(|v| string_list(v).unwrap_or_default());
    if best.is_none() && new.is_none() {
        return Err(fail("neither 'best' nor 'new' present"));
    }
    Ok(FilterResult {
        best: best.unwrap_or_default(),
        new: new.unwrap_or_default(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CounterfactualProposal {
    /// The factual action preceding the branch and its index in the label list.
    pub prev_action: (AtomicLabel, usize),
    pub proposed_action: AtomicLabel,
    pub new_instruction: String,
    pub reasoning: String,
}

impl CounterfactualProposal {
    /// Index of the segment the proposal replaces.
    pub fn branch_segment(&self) -> usize {
        self.prev_action.1 + 1
    }
}

#[derive(Debug, Default)]
struct RawProposal {
    prev_label: Option<String>,
    prev_index: Option<i64>,
    proposed: Option<String>,
    instruction: Option<String>,
    reasoning: Option<String>,
}

fn value_str(v: &Value) -> Option<String> {
    match v {
        Value::String(s) => Some(s.clone()),
        Value::Number(n) => Some(n.to_string()),
        _ => None,
    }
}

fn raw_from_object(map: &Map<String, Value>) -> RawProposal {
    let get = |key: &str| {
        map.iter()
            .find(|(k, _)| k.eq_ignore_ascii_case(key))
            .map(|(_, v)| v)
    };
    let mut raw = RawProposal::default();
    match get("prev_action") {
        Some(Value::Array(items)) if items.len() == 2 => {
            raw.prev_label = value_str(&items[0]);
            raw.prev_index = items[1]
                .as_i64()
                .or_else(|| items[1].as_str().and_then(|s| s.trim().parse().ok()));
        }
        Some(Value::Object(inner)) => {
            raw.prev_label = inner
                .iter()
                .find(|(k, _)| matches!(k.as_str(), "action" | "label"))
                .and_then(|(_, v)| value_str(v));
            raw.prev_index = inner.get("index").and_then(Value::as_i64);
        }
        _ => {}
    }
    raw.proposed = get("proposed_action").and_then(value_str);
    raw.instruction = get("new_instruction").and_then(value_str);
    raw.reasoning = get("reasoning").and_then(value_str);
    raw
}

fn collect_objects<'a>(v: &'a Value, out: &mut Vec<&'a Map<String, Value>>) {
    match v {
        Value::Object(map) if map.keys().any(|k| k.eq_ignore_ascii_case("proposed_action")) => {
            out.push(map)
        }
        Value::Object(map) => map.values().for_each(|v| collect_objects(v, out)),
        Value::Array(items) => items.iter().for_each(|v| collect_objects(v, out)),
        _ => {}
    }
}

static PREV_KEY: LazyLock<Regex> = LazyLock::new(|| Regex::new(r#"['"]prev_action['"]"#).unwrap());
static PREV: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r#"['"]prev_action['"]\s*:\s*[\[\(]\s*['"]([^'"]+)['"]\s*,\s*(-?\d+)"#).unwrap()
});
static PROPOSED: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r#"['"]proposed_action['"]\s*:\s*['"]([^'"]+)['"]"#).unwrap()
});
static INSTRUCTION: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r#"['"]new_instruction['"]\s*:\s*['"]([^'"]*)['"]"#).unwrap()
});
static REASONING: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r#"['"]reasoning['"]\s*:\s*['"]([^'"]*)['"]"#).unwrap());

fn scan_fields(text: &str) -> Vec<RawProposal> {
    let starts: Vec<usize> = PREV_KEY.find_iter(text).map(|m| m.start()).collect();
    starts
        .iter()
        .enumerate()
        .map(|(i, &s)| {
            let piece = &text[s..starts.get(i + 1).copied().unwrap_or(text.len())];
            let mut raw = RawProposal::default();
            if let Some(c) = PREV.captures(piece) {
                raw.prev_label = Some(c[1].to_string());
                raw.prev_index = c[2].parse().ok();
            }
            raw.proposed = PROPOSED.captures(piece).map(|c| c[1].to_string());
            raw.instruction = INSTRUCTION.captures(piece).map(|c| c[1].to_string());
            raw.reasoning = REASONING.captures(piece).map(|c| c[1].to_string());
            raw
        })
        .collect()
}

fn validate(raw: RawProposal, labels: &[AtomicLabel]) -> std::result::Result<CounterfactualProposal, String> {
    let prev_label: AtomicLabel = raw
        .prev_label
        .ok_or("missing prev_action")?
        .parse()
        .map_err(|e: Error| e.to_string())?;
    let index = raw.prev_index.ok_or("missing prev_action index")?;
    let index = usize::try_from(index).map_err(|_| format!("negative index {index}"))?;
    if index >= labels.len() {
        return Err(format!("index {index} out of bounds for {} labels", labels.len()));
    }
    if labels[index] != prev_label {
        return Err(format!(
            "prev_action {prev_label} does not match label {} at index {index}",
            labels[index]
        ));
    }
    let following = labels
        .get(index + 1)
        .ok_or_else(|| format!("no action follows index {index}"))?;
    let proposed: AtomicLabel = raw
        .proposed
        .ok_or("missing proposed_action")?
        .parse()
        .map_err(|e: Error| e.to_string())?;
    if proposed == *following {
        return Err(format!("proposed action {proposed} equals the factual action"));
    }
    let instruction = normalize_whitespace(&raw.instruction.ok_or("missing new_instruction")?);
    if instruction.is_empty() {
        return Err("empty new_instruction".into());
    }
    Ok(CounterfactualProposal {
        prev_action: (prev_label, index),
        proposed_action: proposed,
        new_instruction: instruction,
        reasoning: normalize_whitespace(&raw.reasoning.unwrap_or_default()),
    })
}

/// Parses counterfactual proposals against the atomic label sequence they
/// refer to. Malformed or invalid entries are dropped with a warning.
pub fn parse_counterfactual_response(raw: &str, labels: &[AtomicLabel]) -> Result<Vec<CounterfactualProposal>> {
    let body = strip_fences(raw);
    let mut candidates = Vec::new();
    if let Some(v) = parse_loose(body) {
        let mut objects = Vec::new();
        collect_objects(&v, &mut objects);
        candidates.extend(objects.into_iter().map(raw_from_object));
    }
    if candidates.is_empty() {
        candidates = scan_fields(body);
    }
    let proposals: Vec<CounterfactualProposal> = candidates
        .into_iter()
        .filter_map(|c| match validate(c, labels) {
            Ok(p) => Some(p),
            Err(why) => {
                warn!("dropping counterfactual proposal: {why}");
                None
            }
        })
        .collect();
    if proposals.is_empty() {
        return Err(Error::EmptyCounterfactualResponse);
    }
    Ok(proposals)
}

/// A planner reply naming a single primitive.
pub fn parse_plan_reply(raw: &str) -> Result<AtomicLabel> {
    let text = strip_fences(raw);
    let trimmed = text.trim_matches(|c: char| c.is_whitespace() || "[]'\".`".contains(c));
    if let Ok(label) = trimmed.parse::<AtomicLabel>() {
        return Ok(label);
    }
    let lower = normalize_whitespace(&text.to_lowercase().replace(['_', '-'], " "));
    let found: Vec<AtomicLabel> = AtomicLabel::ALL
        .into_iter()
        .filter(|l| lower.contains(l.as_str()))
        .collect();
    match found.as_slice() {
        [one] => Ok(*one),
        _ => Err(Error::UnknownLabel(raw.to_string())),
    }
}
