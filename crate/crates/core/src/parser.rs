//! Extraction of structured decisions from raw model text.
//!
//! Structured mode looks for JSON objects (`{"offer": n}` or
//! `{"decision": "accept"|"reject"}`) and takes the last one. Fallback mode
//! reads free text and only runs when no structured candidate exists.

use std::fmt;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::game::ResponderChoice;
use crate::prompt::Side;

pub const MAX_EXCERPT_CHARS: usize = 200;
const FALLBACK_WINDOW_CHARS: usize = 40;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExtractionMode {
    Structured,
    Fallback,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParsedDecision {
    pub side: Side,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub offer: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub choice: Option<ResponderChoice>,
    pub extraction_mode: ExtractionMode,
}

impl ParsedDecision {
    fn offer(offer: u32, mode: ExtractionMode) -> Self {
        Self {
            side: Side::Proposer,
            offer: Some(offer),
            choice: None,
            extraction_mode: mode,
        }
    }

    fn choice(choice: ResponderChoice, mode: ExtractionMode) -> Self {
        Self {
            side: Side::Responder,
            offer: None,
            choice: Some(choice),
            extraction_mode: mode,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParseErrorKind {
    NoValue,
    OutOfRange,
    Ambiguous,
    MalformedStructure,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParseError {
    pub kind: ParseErrorKind,
    pub excerpt: String,
}

impl ParseError {
    fn new(kind: ParseErrorKind, excerpt: &str) -> Self {
        Self {
            kind,
            excerpt: truncate_chars(excerpt, MAX_EXCERPT_CHARS),
        }
    }
}

impl fmt::Display for ParseError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?} near {:?}", self.kind, self.excerpt)
    }
}

impl std::error::Error for ParseError {}

fn truncate_chars(s: &str, max: usize) -> String {
    s.chars().take(max).collect()
}

/// Last `max` characters of `s`.
fn tail_chars(s: &str, max: usize) -> &str {
    match s.char_indices().rev().nth(max.saturating_sub(1)) {
        Some((idx, _)) if max > 0 => &s[idx..],
        _ => s,
    }
}

/// A JSON object found in the text, with the byte span it occupies.
struct JsonObject {
    start: usize,
    end: usize,
    map: serde_json::Map<String, Value>,
}

/// Every position where a JSON object parses, including nested ones.
fn json_objects(text: &str) -> Vec<JsonObject> {
    let mut found = Vec::new();
    for (start, _) in text.match_indices('{') {
        let mut stream = serde_json::Deserializer::from_str(&text[start..]).into_iter::<Value>();
        if let Some(Ok(Value::Object(map))) = stream.next() {
            found.push(JsonObject {
                start,
                end: start + stream.byte_offset(),
                map,
            });
        }
    }
    found
}

fn line_index(text: &str, byte: usize) -> usize {
    text[..byte].matches('\n').count()
}

/// Structured candidates for `key`, in text order. `invalid` holds spans of
/// objects that name the key but carry an unusable value.
struct Candidates<T> {
    valid: Vec<(usize, usize, T)>,
    invalid: Vec<(usize, usize)>,
}

fn collect_candidates<T>(
    text: &str,
    key: &str,
    convert: impl Fn(&Value) -> Option<T>,
) -> Candidates<T> {
    let mut out = Candidates {
        valid: Vec::new(),
        invalid: Vec::new(),
    };
    for obj in json_objects(text) {
        let Some(value) = obj.map.iter().find(|(k, _)| k.eq_ignore_ascii_case(key)).map(|(_, v)| v)
        else {
            continue;
        };
        match convert(value) {
            Some(v) => out.valid.push((obj.start, obj.end, v)),
            None => out.invalid.push((obj.start, obj.end)),
        }
    }
    out
}

/// Picks the last candidate. Distinct values sharing its line are ambiguous.
fn last_candidate<'t, T: PartialEq + Copy>(
    text: &'t str,
    valid: &[(usize, usize, T)],
) -> Result<(T, &'t str), ParseError> {
    let &(start, end, value) = valid.last().expect("non-empty");
    let line = line_index(text, start);
    let conflicting = valid
        .iter()
        .any(|&(s, _, v)| v != value && line_index(text, s) == line);
    if conflicting {
        let line_text = text.lines().nth(line).unwrap_or(&text[start..end]);
        return Err(ParseError::new(ParseErrorKind::Ambiguous, line_text));
    }
    Ok((value, &text[start..end]))
}

fn looks_like_structure(text: &str, key: &str) -> Option<usize> {
    static CACHE: OnceLock<[(String, Regex); 2]> = OnceLock::new();
    let regexes = CACHE.get_or_init(|| {
        ["offer", "decision"].map(|k| {
            (
                k.to_string(),
                Regex::new(&format!(r#"(?i)\{{\s*["']?{k}["']?\s*:"#)).unwrap(),
            )
        })
    });
    regexes
        .iter()
        .find(|(k, _)| k == key)
        .and_then(|(_, re)| re.find(text).map(|m| m.start()))
}

fn integer_value(value: &Value) -> Option<i64> {
    match value {
        Value::Number(n) => n.as_i64().or_else(|| n.as_u64().map(|_| i64::MAX)),
        _ => None,
    }
}

fn choice_value(value: &Value) -> Option<ResponderChoice> {
    value.as_str().and_then(|s| s.parse().ok())
}

/// Extracts a proposer's offer.
pub fn parse_proposer(raw: &str, total_good: u32) -> Result<ParsedDecision, ParseError> {
    let limit = i64::from(total_good);
    let candidates = collect_candidates(raw, "offer", integer_value);
    if !candidates.valid.is_empty() {
        let (value, excerpt) = last_candidate(raw, &candidates.valid)?;
        if !(0..=limit).contains(&value) {
            return Err(ParseError::new(ParseErrorKind::OutOfRange, excerpt));
        }
        return Ok(ParsedDecision::offer(value as u32, ExtractionMode::Structured));
    }

    match fallback_offer(raw, limit) {
        FallbackOffer::Found(v) => Ok(ParsedDecision::offer(v, ExtractionMode::Fallback)),
        FallbackOffer::OutOfRange(excerpt) => {
            Err(ParseError::new(ParseErrorKind::OutOfRange, excerpt))
        }
        FallbackOffer::Missing => {
            if let Some(&(start, end)) = candidates.invalid.last() {
                Err(ParseError::new(ParseErrorKind::MalformedStructure, &raw[start..end]))
            } else if let Some(start) = looks_like_structure(raw, "offer") {
                Err(ParseError::new(ParseErrorKind::MalformedStructure, &raw[start..]))
            } else {
                Err(ParseError::new(
                    ParseErrorKind::NoValue,
                    tail_chars(raw, MAX_EXCERPT_CHARS),
                ))
            }
        }
    }
}

enum FallbackOffer<'t> {
    Found(u32),
    OutOfRange(&'t str),
    Missing,
}

fn offer_word() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?i)\boffer").unwrap())
}

fn integer_token() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"-?[0-9]+").unwrap())
}

/// Last standalone integer preceded within 40 characters by "offer".
fn fallback_offer(raw: &str, limit: i64) -> FallbackOffer<'_> {
    let mut in_range: Option<u32> = None;
    let mut out_of_range: Option<&str> = None;
    for m in integer_token().find_iter(raw) {
        let before = raw[..m.start()].chars().next_back();
        let after = raw[m.end()..].chars().next();
        let after2 = raw[m.end()..].chars().nth(1);
        let glued_before = before.is_some_and(|c| c.is_alphanumeric() || c == '.' || c == '_');
        let glued_after = after.is_some_and(|c| c.is_alphanumeric() || c == '_')
            || (after == Some('.') && after2.is_some_and(|c| c.is_ascii_digit()));
        if glued_before || glued_after {
            continue;
        }
        let window = tail_chars(&raw[..m.start()], FALLBACK_WINDOW_CHARS);
        if !offer_word().is_match(window) {
            continue;
        }
        match m.as_str().parse::<i64>() {
            Ok(v) if (0..=limit).contains(&v) => in_range = Some(v as u32),
            _ => out_of_range = Some(m.as_str()),
        }
    }
    match (in_range, out_of_range) {
        (Some(v), _) => FallbackOffer::Found(v),
        (None, Some(token)) => FallbackOffer::OutOfRange(token),
        (None, None) => FallbackOffer::Missing,
    }
}

fn keyword() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?i)\b(accept|accepts|accepted|reject|rejects|rejected)\b").unwrap())
}

/// The last non-empty sentence, split on `.`, `!`, `?` and newlines.
fn final_sentence(raw: &str) -> &str {
    raw.split(['.', '!', '?', '\n'])
        .map(str::trim)
        .rfind(|s| !s.is_empty())
        .unwrap_or("")
}

/// Extracts a responder's accept/reject decision.
pub fn parse_responder(raw: &str) -> Result<ParsedDecision, ParseError> {
    let candidates = collect_candidates(raw, "decision", choice_value);
    if !candidates.valid.is_empty() {
        let (choice, _) = last_candidate(raw, &candidates.valid)?;
        return Ok(ParsedDecision::choice(choice, ExtractionMode::Structured));
    }

    let sentence = final_sentence(raw);
    let mut saw_accept = false;
    let mut saw_reject = false;
    for m in keyword().find_iter(sentence) {
        if m.as_str().to_ascii_lowercase().starts_with("accept") {
            saw_accept = true;
        } else {
            saw_reject = true;
        }
    }
    match (saw_accept, saw_reject) {
        (true, true) => Err(ParseError::new(ParseErrorKind::Ambiguous, sentence)),
        (true, false) => Ok(ParsedDecision::choice(
            ResponderChoice::Accept,
            ExtractionMode::Fallback,
        )),
        (false, true) => Ok(ParsedDecision::choice(
            ResponderChoice::Reject,
            ExtractionMode::Fallback,
        )),
        (false, false) => {
            if let Some(&(start, end)) = candidates.invalid.last() {
                Err(ParseError::new(ParseErrorKind::MalformedStructure, &raw[start..end]))
            } else if let Some(start) = looks_like_structure(raw, "decision") {
                Err(ParseError::new(ParseErrorKind::MalformedStructure, &raw[start..]))
            } else {
                Err(ParseError::new(
                    ParseErrorKind::NoValue,
                    tail_chars(raw, MAX_EXCERPT_CHARS),
                ))
            }
        }
    }
}

/// Dispatches on side.
pub fn parse_decision(
    side: Side,
    raw: &str,
    total_good: u32,
) -> Result<ParsedDecision, ParseError> {
    match side {
        Side::Proposer => parse_proposer(raw, total_good),
        Side::Responder => parse_responder(raw),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ParseErrorKind::*;

    fn offer(raw: &str) -> Result<(u32, ExtractionMode), ParseErrorKind> {
        parse_proposer(raw, 100)
            .map(|d| (d.offer.unwrap(), d.extraction_mode))
            .map_err(|e| e.kind)
    }

    fn choice(raw: &str) -> Result<(ResponderChoice, ExtractionMode), ParseErrorKind> {
        parse_responder(raw)
            .map(|d| (d.choice.unwrap(), d.extraction_mode))
            .map_err(|e| e.kind)
    }

    #[test]
    fn proposer_examples() {
        assert_eq!(
            offer("Let me think.\n{\"offer\": 50}"),
            Ok((50, ExtractionMode::Structured))
        );
        assert_eq!(
            offer("I will offer 40 coins to the other player."),
            Ok((40, ExtractionMode::Fallback))
        );
        assert_eq!(offer("{\"offer\": 150}"), Err(OutOfRange));
    }

    #[test]
    fn responder_examples() {
        assert_eq!(
            choice("{\"decision\": \"accept\"}"),
            Ok((ResponderChoice::Accept, ExtractionMode::Structured))
        );
        assert_eq!(
            choice("Unfair. I reject this offer."),
            Ok((ResponderChoice::Reject, ExtractionMode::Fallback))
        );
        assert_eq!(
            choice("I would reject it normally, but I accept."),
            Err(Ambiguous)
        );
    }

    #[test]
    fn last_structured_object_wins() {
        assert_eq!(
            offer("First I thought {\"offer\": 30}.\nFinal answer:\n{\"offer\": 45}"),
            Ok((45, ExtractionMode::Structured))
        );
        assert_eq!(offer("{\"offer\": 40} or maybe {\"offer\": 50}"), Err(Ambiguous));
        assert_eq!(
            offer("{\"offer\": 40} {\"offer\": 40}"),
            Ok((40, ExtractionMode::Structured))
        );
    }

    #[test]
    fn structured_beats_fallback() {
        assert_eq!(
            offer("I offer 10 coins.\n{\"offer\": 60}"),
            Ok((60, ExtractionMode::Structured))
        );
        assert_eq!(
            choice("I reject this.\n{\"decision\": \"Accept\"}"),
            Ok((ResponderChoice::Accept, ExtractionMode::Structured))
        );
    }

    #[test]
    fn malformed_structures() {
        // Unterminated objects fall through to the free-text rule.
        assert_eq!(offer("{\"offer\": 50"), Ok((50, ExtractionMode::Fallback)));
        assert_eq!(offer("{\"offer\": fifty"), Err(MalformedStructure));
        assert_eq!(offer("{\"offer\": \"fifty\"}"), Err(MalformedStructure));
        assert_eq!(choice("{\"decision\": \"maybe\"}"), Err(MalformedStructure));
        assert_eq!(choice("{'decision': accept"), Ok((ResponderChoice::Accept, ExtractionMode::Fallback)));
    }

    #[test]
    fn excerpt_is_bounded() {
        let long = "x".repeat(1000);
        let err = parse_proposer(&long, 100).unwrap_err();
        assert_eq!(err.kind, NoValue);
        assert_eq!(err.excerpt.chars().count(), MAX_EXCERPT_CHARS);
        let err = parse_responder(&"é".repeat(500)).unwrap_err();
        assert!(err.excerpt.chars().count() <= MAX_EXCERPT_CHARS);
    }

    #[test]
    fn fallback_window_and_standalone_rules() {
        assert_eq!(offer("My offer is: 35"), Ok((35, ExtractionMode::Fallback)));
        assert_eq!(
            offer("OFFER ................................................ 35"),
            Err(NoValue)
        );
        assert_eq!(offer("I offer 3.5 coins"), Err(NoValue));
        assert_eq!(offer("I offer A1 coins"), Err(NoValue));
        assert_eq!(offer("I offer 250 coins"), Err(OutOfRange));
        assert_eq!(offer("I offer -5 coins"), Err(OutOfRange));
    }

    #[test]
    fn total_good_bounds_offers() {
        assert_eq!(parse_proposer("{\"offer\": 12}", 10).unwrap_err().kind, OutOfRange);
        assert_eq!(parse_proposer("{\"offer\": 10}", 10).unwrap().offer, Some(10));
    }

    #[test]
    fn dispatch_by_side() {
        assert_eq!(
            parse_decision(Side::Responder, "{\"decision\": \"reject\"}", 100)
                .unwrap()
                .choice,
            Some(ResponderChoice::Reject)
        );
        assert_eq!(
            parse_decision(Side::Proposer, "{\"offer\": 0}", 100).unwrap().offer,
            Some(0)
        );
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(2000))]
            #[test]
            fn never_panics(bytes in proptest::collection::vec(any::<u8>(), 0..300)) {
                let text = String::from_utf8_lossy(&bytes);
                let _ = parse_proposer(&text, 100);
                let _ = parse_responder(&text);
            }

            #[test]
            fn structured_offer_round_trips(prefix in "[a-zA-Z .,\n]{0,80}", v in 0u32..=100) {
                let text = format!("{prefix}\n{{\"offer\": {v}}}");
                let d = parse_proposer(&text, 100).unwrap();
                prop_assert_eq!(d.offer, Some(v));
                prop_assert_eq!(d.extraction_mode, ExtractionMode::Structured);
            }
        }
    }
}
