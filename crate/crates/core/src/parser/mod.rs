//! Command parameterizer: natural-language command to [`ExecutionPlan`].
//!
//! Routing is decided by the clause-head verb. Commands starting with an edit
//! verb (`delete`, `remove`, `extract`, `make`, `change`, `recolor`) go to the
//! editor; everything else is a generation request.

mod backend;
pub mod lexicon;

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use backend::{
    parse_with_backend, BackendError, ParsedPlan, PlanBackend, PlanRequest, Provenance,
};
pub use lexicon::{Lexicon, LexiconError, Lexicons};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    LeftToRight,
    RightToLeft,
    Up,
    Down,
    TowardCamera,
    Away,
}

impl Direction {
    pub const ALL: [Direction; 6] = [
        Direction::LeftToRight,
        Direction::RightToLeft,
        Direction::Up,
        Direction::Down,
        Direction::TowardCamera,
        Direction::Away,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Direction::LeftToRight => "left_to_right",
            Direction::RightToLeft => "right_to_left",
            Direction::Up => "up",
            Direction::Down => "down",
            Direction::TowardCamera => "toward_camera",
            Direction::Away => "away",
        }
    }
}

impl std::str::FromStr for Direction {
    type Err = ParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Direction::ALL
            .into_iter()
            .find(|d| d.as_str() == s)
            .ok_or_else(|| ParseError::UnknownDirection {
                phrase: s.to_string(),
                accepted: accepted_direction_phrases(),
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Speed {
    Slow,
    #[default]
    Normal,
    Fast,
}

impl Speed {
    pub fn as_str(self) -> &'static str {
        match self {
            Speed::Slow => "slow",
            Speed::Normal => "normal",
            Speed::Fast => "fast",
        }
    }
}

impl std::str::FromStr for Speed {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "slow" => Ok(Speed::Slow),
            "normal" => Ok(Speed::Normal),
            "fast" => Ok(Speed::Fast),
            other => Err(format!("unknown speed `{other}` (expected slow, normal, fast)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EditVerb {
    Recolor,
    Remove,
    Extract,
}

impl EditVerb {
    pub fn as_str(self) -> &'static str {
        match self {
            EditVerb::Recolor => "recolor",
            EditVerb::Remove => "remove",
            EditVerb::Extract => "extract",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenQuery {
    pub object_phrase: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub color: Option<String>,
    pub direction: Direction,
    pub speed: Speed,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scene_phrase: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EditQuery {
    pub verb: EditVerb,
    pub target_phrase: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub new_color: Option<String>,
}

/// Routing decision plus the structured queries extracted from a command.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "module", content = "queries")]
pub enum ExecutionPlan {
    #[serde(rename = "GEN")]
    Gen(GenQuery),
    #[serde(rename = "EDIT")]
    Edit(EditQuery),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Module {
    #[serde(rename = "GEN")]
    Gen,
    #[serde(rename = "EDIT")]
    Edit,
}

impl fmt::Display for Module {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Module::Gen => "GEN",
            Module::Edit => "EDIT",
        })
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ParseError {
    #[error("empty command")]
    Empty,
    #[error("`{verb}` command is missing its {slot}")]
    MissingSlot { verb: String, slot: &'static str },
    #[error("unknown direction phrase `{phrase}`; accepted phrases: {}", accepted.join(", "))]
    UnknownDirection { phrase: String, accepted: Vec<String> },
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PlanValidationError {
    #[error("plan does not match the schema: {0}")]
    Schema(String),
    #[error("plan violates an invariant: {0}")]
    Invariant(String),
}

impl ExecutionPlan {
    pub fn module(&self) -> Module {
        match self {
            ExecutionPlan::Gen(_) => Module::Gen,
            ExecutionPlan::Edit(_) => Module::Edit,
        }
    }

    pub fn as_gen(&self) -> Option<&GenQuery> {
        match self {
            ExecutionPlan::Gen(q) => Some(q),
            ExecutionPlan::Edit(_) => None,
        }
    }

    pub fn as_edit(&self) -> Option<&EditQuery> {
        match self {
            ExecutionPlan::Edit(q) => Some(q),
            ExecutionPlan::Gen(_) => None,
        }
    }

    pub fn validate(&self) -> Result<(), PlanValidationError> {
        let inv = |m: &str| Err(PlanValidationError::Invariant(m.to_string()));
        match self {
            ExecutionPlan::Gen(q) => {
                if q.object_phrase.trim().is_empty() {
                    return inv("GEN plan needs a nonempty object_phrase");
                }
            }
            ExecutionPlan::Edit(q) => {
                if q.target_phrase.trim().is_empty() {
                    return inv("EDIT plan needs a nonempty target_phrase");
                }
                match (q.verb, &q.new_color) {
                    (EditVerb::Recolor, None) => return inv("recolor requires new_color"),
                    (EditVerb::Recolor, Some(c)) if c.trim().is_empty() => {
                        return inv("recolor requires a nonempty new_color")
                    }
                    (EditVerb::Remove | EditVerb::Extract, Some(_)) => {
                        return inv("new_color is only valid for recolor")
                    }
                    _ => {}
                }
            }
        }
        Ok(())
    }

    /// Strict decoding of a plan document (schema check plus invariants).
    pub fn from_json_value(value: serde_json::Value) -> Result<Self, PlanValidationError> {
        let plan: ExecutionPlan = serde_json::from_value(value)
            .map_err(|e| PlanValidationError::Schema(e.to_string()))?;
        plan.validate()?;
        Ok(plan)
    }

    pub fn from_json(text: &str) -> Result<Self, PlanValidationError> {
        let value: serde_json::Value =
            serde_json::from_str(text).map_err(|e| PlanValidationError::Schema(e.to_string()))?;
        Self::from_json_value(value)
    }

    pub fn to_json_value(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("plan serialization is infallible")
    }
}

/// JSON Schema describing [`ExecutionPlan`], sent to remote plan backends.
pub fn plan_schema() -> serde_json::Value {
    let directions: Vec<&str> = Direction::ALL.iter().map(|d| d.as_str()).collect();
    serde_json::json!({
        "$schema": "http://json-schema.org/draft-07/schema#",
        "title": "ExecutionPlan",
        "oneOf": [
            {
                "type": "object",
                "additionalProperties": false,
                "required": ["module", "queries"],
                "properties": {
                    "module": { "const": "GEN" },
                    "queries": {
                        "type": "object",
                        "additionalProperties": false,
                        "required": ["object_phrase", "direction", "speed"],
                        "properties": {
                            "object_phrase": { "type": "string", "minLength": 1 },
                            "color": { "type": "string" },
                            "direction": { "enum": directions },
                            "speed": { "enum": ["slow", "normal", "fast"] },
                            "scene_phrase": { "type": "string" }
                        }
                    }
                }
            },
            {
                "type": "object",
                "additionalProperties": false,
                "required": ["module", "queries"],
                "properties": {
                    "module": { "const": "EDIT" },
                    "queries": {
                        "type": "object",
                        "additionalProperties": false,
                        "required": ["verb", "target_phrase"],
                        "properties": {
                            "verb": { "enum": ["recolor", "remove", "extract"] },
                            "target_phrase": { "type": "string", "minLength": 1 },
                            "new_color": { "type": "string", "minLength": 1 }
                        }
                    }
                }
            }
        ]
    })
}

/// Every direction surface form the grammar accepts.
pub fn accepted_direction_phrases() -> Vec<String> {
    let mut v: Vec<String> = Lexicons::builtin().directions.surfaces().collect();
    v.sort();
    v
}

const ARTICLES: &[&str] = &["the", "a", "an", "this", "that"];
const LEAD_FILLERS: &[&str] = &["please", "now", "then", "and", "also", "next"];
const TRAIL_FILLERS: &[&str] = &["please", "thanks", "now"];
const SCENE_PREPOSITIONS: &[&str] = &[
    "through", "in", "on", "across", "over", "along", "under", "into", "past", "near", "around",
    "above", "beneath", "inside", "within", "at",
];
const SUBJECT_STOPWORDS: &[&str] = &[
    "from", "to", "toward", "towards", "with", "and", "while", "as", "of", "by",
];
const REMOVE_TARGET_STOPS: &[&str] = &["from", "out", "in", "on", "at", "please"];
const SPATIAL_NOUNS: &[&str] = &[
    "north", "south", "east", "west", "northeast", "northwest", "southeast", "southwest", "top",
    "bottom", "side", "corner", "center", "centre", "middle", "front", "back", "sky", "ceiling",
];

/// Lowercases, splits on whitespace and commas, and trims punctuation that
/// is not part of a word (apostrophes and hyphens inside words are kept).
pub fn tokenize(command: &str) -> Vec<String> {
    command
        .replace(['\u{2019}', '\u{2018}'], "'")
        .to_lowercase()
        .split(|c: char| c.is_whitespace() || c == ',' || c == ';')
        .map(|w| {
            w.trim_matches(|c: char| !c.is_alphanumeric())
                .to_string()
        })
        .filter(|w| !w.is_empty())
        .collect()
}

fn strip_article(words: &[String]) -> &[String] {
    let mut w = words;
    while let Some(first) = w.first() {
        if ARTICLES.contains(&first.as_str()) {
            w = &w[1..];
        } else {
            break;
        }
    }
    w
}

fn strip_possessive(word: &str) -> &str {
    word.strip_suffix("'s")
        .or_else(|| word.strip_suffix('\''))
        .unwrap_or(word)
}

fn join(words: &[String]) -> String {
    words.join(" ")
}

/// Parses a command with the bundled grammar and lexicons.
pub fn parse(command: &str) -> Result<ExecutionPlan, ParseError> {
    let lex = Lexicons::builtin();
    let mut tokens = tokenize(command);
    let lead = tokens
        .iter()
        .take_while(|t| LEAD_FILLERS.contains(&t.as_str()))
        .count();
    tokens.drain(..lead);
    while tokens.last().is_some_and(|t| TRAIL_FILLERS.contains(&t.as_str())) {
        tokens.pop();
    }
    let head = tokens.first().ok_or(ParseError::Empty)?;
    let plan = match lex.edit_verbs.get(head) {
        Some(op) => parse_edit(head.clone(), op, &tokens[1..], lex)?,
        None => parse_gen(&tokens, lex)?,
    };
    debug_assert!(plan.validate().is_ok());
    Ok(plan)
}

fn parse_edit(
    head: String,
    op: &str,
    rest: &[String],
    lex: &Lexicons,
) -> Result<ExecutionPlan, ParseError> {
    let missing = |slot| ParseError::MissingSlot {
        verb: head.clone(),
        slot,
    };
    let verb = match op {
        "remove" => EditVerb::Remove,
        "extract" => EditVerb::Extract,
        _ => EditVerb::Recolor,
    };
    if verb != EditVerb::Recolor {
        let end = rest
            .iter()
            .position(|t| REMOVE_TARGET_STOPS.contains(&t.as_str()))
            .unwrap_or(rest.len());
        let target = target_phrase(&rest[..end]);
        if target.is_empty() {
            return Err(missing("target_phrase"));
        }
        return Ok(ExecutionPlan::Edit(EditQuery {
            verb,
            target_phrase: target,
            new_color: None,
        }));
    }

    // Recolor: "<verb> X to C", "<verb> the color of X C", "<verb> X C".
    let (subject, color_words) = match rest.iter().rposition(|t| t == "to" || t == "into") {
        Some(i) => (&rest[..i], strip_article(&rest[i + 1..])),
        None if !strip_article(&rest[..rest.len().saturating_sub(1)]).is_empty() => {
            (&rest[..rest.len() - 1], &rest[rest.len() - 1..])
        }
        None => (rest, &rest[rest.len()..]),
    };
    let color_raw = join(color_words);
    if color_raw.is_empty() {
        return Err(missing("new_color"));
    }
    let new_color = lex
        .colors
        .get(&color_raw)
        .map(str::to_string)
        .unwrap_or(color_raw);

    let subject = match subject
        .iter()
        .position(|t| t == "of")
        .filter(|&i| i > 0 && is_color_noun(&subject[i - 1]))
    {
        Some(i) => &subject[i + 1..],
        None => subject,
    };
    let target = target_phrase(subject);
    if target.is_empty() {
        return Err(missing("target_phrase"));
    }
    Ok(ExecutionPlan::Edit(EditQuery {
        verb,
        target_phrase: target,
        new_color: Some(new_color),
    }))
}

fn is_color_noun(w: &str) -> bool {
    matches!(w, "color" | "colour" | "colors" | "colours")
}

/// Noun phrase with leading articles, trailing "color" and possessives removed.
fn target_phrase(words: &[String]) -> String {
    let mut words: Vec<String> = strip_article(words).to_vec();
    while words.last().is_some_and(|w| is_color_noun(w)) {
        words.pop();
    }
    if let Some(last) = words.last_mut() {
        *last = strip_possessive(last).to_string();
    }
    words.retain(|w| !w.is_empty());
    join(&words)
}

fn parse_gen(tokens: &[String], lex: &Lexicons) -> Result<ExecutionPlan, ParseError> {
    // Direction phrase (leftmost-longest lexicon match).
    let dir_match = lex.directions.find(tokens);
    let direction = match dir_match {
        Some((_, _, canon)) => canon.parse::<Direction>()?,
        None => {
            if let Some(phrase) = unresolved_direction(tokens) {
                return Err(ParseError::UnknownDirection {
                    phrase,
                    accepted: accepted_direction_phrases(),
                });
            }
            Direction::LeftToRight
        }
    };
    let dir_span = dir_match.map(|(s, n, _)| s..s + n);

    let speed = tokens
        .iter()
        .find_map(|t| lex.speeds.get(t))
        .map(|s| s.parse::<Speed>().expect("speed lexicon holds canonical speeds"))
        .unwrap_or_default();

    // Subject noun phrase: after the leading article, up to the first verb,
    // adverb, preposition, or direction word.
    let start = tokens.len() - strip_article(tokens).len();
    let mut end = start;
    while end < tokens.len() {
        let t = tokens[end].as_str();
        let in_dir = dir_span.as_ref().is_some_and(|r| r.contains(&end));
        if in_dir
            || lex.motion_verbs.get(t).is_some()
            || lex.speeds.get(t).is_some()
            || SCENE_PREPOSITIONS.contains(&t)
            || SUBJECT_STOPWORDS.contains(&t)
            || (end > start && t.len() > 4 && t.ends_with("ing"))
            || (end > start && t.ends_with("ly") && t.len() > 4)
        {
            break;
        }
        end += 1;
    }
    let subject = &tokens[start..end];
    let object = subject
        .last()
        .map(|w| strip_possessive(w).to_string())
        .filter(|w| !w.is_empty())
        .ok_or(ParseError::MissingSlot {
            verb: "generate".into(),
            slot: "object_phrase",
        })?;
    let color = subject[..subject.len() - 1]
        .iter()
        .find_map(|w| lex.colors.get(w))
        .map(str::to_string);

    let scene_phrase = tokens[end..]
        .iter()
        .position(|t| SCENE_PREPOSITIONS.contains(&t.as_str()))
        .map(|p| end + p + 1)
        .and_then(|from| {
            let mut to = from;
            while to < tokens.len() {
                let in_dir = dir_span.as_ref().is_some_and(|r| r.contains(&to));
                let t = tokens[to].as_str();
                if in_dir || t == "from" || lex.speeds.get(t).is_some() {
                    break;
                }
                to += 1;
            }
            let words = strip_article(&tokens[from..to]);
            (!words.is_empty()).then(|| join(words))
        });

    Ok(ExecutionPlan::Gen(GenQuery {
        object_phrase: object,
        color,
        direction,
        speed,
        scene_phrase,
    }))
}

/// A direction-like phrase that the lexicon does not resolve.
fn unresolved_direction(tokens: &[String]) -> Option<String> {
    for (i, t) in tokens.iter().enumerate() {
        if t == "from" && tokens.get(i + 2).is_some_and(|w| w == "to") {
            return Some(join(&tokens[i..(i + 4).min(tokens.len())]));
        }
        let is_toward = matches!(t.as_str(), "toward" | "towards");
        if !is_toward && (t.ends_with("ward") || t.ends_with("wards")) {
            return Some(t.clone());
        }
        if matches!(t.as_str(), "to" | "toward" | "towards") {
            let rest = strip_article(&tokens[i + 1..]);
            if let Some(noun) = rest.first() {
                if SPATIAL_NOUNS.contains(&noun.as_str()) {
                    let consumed = tokens.len() - rest.len() + 1;
                    return Some(join(&tokens[i..consumed]));
                }
            }
        }
    }
    None
}
