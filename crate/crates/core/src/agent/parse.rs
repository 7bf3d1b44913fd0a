//! Extracting schema'd JSON objects from free-form completions.
//!
//! Completions may wrap the JSON in prose; every top-level `{...}` region
//! that parses is considered, first match per schema wins.

use serde_json::{Map, Value};
use thiserror::Error;

use super::BIN_LABELS;

#[derive(Debug, Error, PartialEq)]
pub enum ParseError {
    #[error("no JSON object found in completion")]
    NoJsonObject,
    #[error("no object carries key \"{0}\"")]
    MissingKey(&'static str),
    #[error("key \"{key}\": expected {expected}")]
    WrongType { key: String, expected: &'static str },
    #[error("adjustment {0} outside [-0.5, 0.5]")]
    OutOfRange(f64),
    #[error("range keys off: missing {missing:?}, unexpected {extra:?}")]
    WrongKeySet { missing: Vec<String>, extra: Vec<String> },
}

/// Every parseable top-level JSON object in `text`, left to right.
/// Nested objects are not reported separately.
pub fn extract_json_objects(text: &str) -> Vec<Map<String, Value>> {
    let mut out = Vec::new();
    let bytes = text.as_bytes();
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i] == b'{' {
            let mut stream = serde_json::Deserializer::from_str(&text[i..]).into_iter::<Value>();
            if let Some(Ok(Value::Object(map))) = stream.next() {
                let consumed = stream.byte_offset().max(1);
                out.push(map);
                i += consumed;
                continue;
            }
        }
        i += 1;
    }
    out
}

fn objects_or_err(text: &str) -> Result<Vec<Map<String, Value>>, ParseError> {
    let objs = extract_json_objects(text);
    if objs.is_empty() {
        Err(ParseError::NoJsonObject)
    } else {
        Ok(objs)
    }
}

fn string_field(
    objs: &[Map<String, Value>],
    key: &'static str,
) -> Result<String, ParseError> {
    let obj = objs
        .iter()
        .find(|o| o.contains_key(key))
        .ok_or(ParseError::MissingKey(key))?;
    obj[key]
        .as_str()
        .map(str::to_string)
        .ok_or(ParseError::WrongType { key: key.into(), expected: "string" })
}

pub fn parse_summary(text: &str) -> Result<String, ParseError> {
    string_field(&objects_or_err(text)?, "summary")
}

pub fn parse_reflection(text: &str) -> Result<String, ParseError> {
    string_field(&objects_or_err(text)?, "reflection")
}

/// Parses `{"adjustment": number, "reason": string}`. The value is never
/// clamped: out-of-range counts as a failed parse so the retry path runs.
pub fn parse_action(text: &str) -> Result<(f64, String), ParseError> {
    let objs = objects_or_err(text)?;
    let obj = objs
        .iter()
        .find(|o| o.contains_key("adjustment"))
        .ok_or(ParseError::MissingKey("adjustment"))?;
    let a = obj["adjustment"]
        .as_f64()
        .ok_or(ParseError::WrongType { key: "adjustment".into(), expected: "number" })?;
    if !(-0.5..=0.5).contains(&a) {
        return Err(ParseError::OutOfRange(a));
    }
    let reason = obj
        .get("reason")
        .ok_or(ParseError::MissingKey("reason"))?
        .as_str()
        .ok_or(ParseError::WrongType { key: "reason".into(), expected: "string" })?;
    Ok((a, reason.to_string()))
}

fn range_key(label: &str) -> String {
    format!("adjustment range for {label}")
}

/// Parses the ten-range analysis object. The key set must match the ten
/// range labels exactly; analyses come back in bin order.
pub fn parse_insight(text: &str) -> Result<Vec<String>, ParseError> {
    let objs = objects_or_err(text)?;
    let obj = objs
        .iter()
        .find(|o| o.keys().any(|k| k.starts_with("adjustment range for")))
        .ok_or(ParseError::MissingKey("adjustment range for"))?;
    let expected: Vec<String> = BIN_LABELS.iter().map(|l| range_key(l)).collect();
    let missing: Vec<String> =
        expected.iter().filter(|k| !obj.contains_key(*k)).cloned().collect();
    let extra: Vec<String> =
        obj.keys().filter(|k| !expected.contains(k)).cloned().collect();
    if !missing.is_empty() || !extra.is_empty() {
        return Err(ParseError::WrongKeySet { missing, extra });
    }
    expected
        .iter()
        .map(|k| {
            obj[k]
                .as_str()
                .map(str::to_string)
                .ok_or(ParseError::WrongType { key: k.clone(), expected: "string" })
        })
        .collect()
}
