//! Tab-separated lexicon files: one `surface form<TAB>canonical value` per
//! line, `#` starts a comment line. Surface forms may span several words.

use std::sync::OnceLock;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum LexiconError {
    #[error("line {line}: expected `surface<TAB>canonical`")]
    MissingTab { line: usize },
    #[error("line {line}: empty {field}")]
    EmptyField { line: usize, field: &'static str },
    #[error("line {line}: surface form `{surface}` listed twice")]
    Duplicate { line: usize, surface: String },
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Lexicon {
    entries: Vec<(Vec<String>, String)>,
}

impl Lexicon {
    pub fn parse(text: &str) -> Result<Self, LexiconError> {
        let mut entries: Vec<(Vec<String>, String)> = Vec::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let trimmed = raw.trim_end_matches('\r');
            if trimmed.trim().is_empty() || trimmed.trim_start().starts_with('#') {
                continue;
            }
            let (surface, canonical) = trimmed
                .split_once('\t')
                .ok_or(LexiconError::MissingTab { line })?;
            let words: Vec<String> = surface.split_whitespace().map(str::to_lowercase).collect();
            if words.is_empty() {
                return Err(LexiconError::EmptyField {
                    line,
                    field: "surface form",
                });
            }
            let canonical = canonical.trim();
            if canonical.is_empty() {
                return Err(LexiconError::EmptyField {
                    line,
                    field: "canonical value",
                });
            }
            if entries.iter().any(|(w, _)| *w == words) {
                return Err(LexiconError::Duplicate {
                    line,
                    surface: words.join(" "),
                });
            }
            entries.push((words, canonical.to_string()));
        }
        // Longest surface forms first so lookups prefer compound phrases.
        entries.sort_by_key(|e| std::cmp::Reverse(e.0.len()));
        Ok(Self { entries })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Exact lookup of a (possibly multi-word) surface form.
    pub fn get(&self, surface: &str) -> Option<&str> {
        let words: Vec<&str> = surface.split_whitespace().collect();
        self.entries
            .iter()
            .find(|(w, _)| w.iter().map(String::as_str).eq(words.iter().copied()))
            .map(|(_, c)| c.as_str())
    }

    /// Longest entry matching `tokens` starting at `start`, as
    /// `(token count, canonical)`.
    pub fn match_at(&self, tokens: &[String], start: usize) -> Option<(usize, &str)> {
        let rest = &tokens[start.min(tokens.len())..];
        self.entries
            .iter()
            .find(|(w, _)| w.len() <= rest.len() && w.iter().zip(rest).all(|(a, b)| a == b))
            .map(|(w, c)| (w.len(), c.as_str()))
    }

    /// Leftmost-longest match anywhere in `tokens`, as
    /// `(start, token count, canonical)`.
    pub fn find(&self, tokens: &[String]) -> Option<(usize, usize, &str)> {
        (0..tokens.len()).find_map(|i| self.match_at(tokens, i).map(|(n, c)| (i, n, c)))
    }

    pub fn surfaces(&self) -> impl Iterator<Item = String> + '_ {
        self.entries.iter().map(|(w, _)| w.join(" "))
    }

    pub fn values(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(_, c)| c.as_str())
    }
}

/// The lexicons bundled with the crate.
#[derive(Debug)]
pub struct Lexicons {
    pub directions: Lexicon,
    pub speeds: Lexicon,
    pub colors: Lexicon,
    pub edit_verbs: Lexicon,
    pub motion_verbs: Lexicon,
    pub objects: Lexicon,
    pub color_values: Lexicon,
}

pub const DIRECTIONS_TSV: &str = include_str!("../../data/directions.tsv");
pub const SPEEDS_TSV: &str = include_str!("../../data/speeds.tsv");
pub const COLORS_TSV: &str = include_str!("../../data/colors.tsv");
pub const EDIT_VERBS_TSV: &str = include_str!("../../data/edit_verbs.tsv");
pub const MOTION_VERBS_TSV: &str = include_str!("../../data/motion_verbs.tsv");
pub const OBJECTS_TSV: &str = include_str!("../../data/objects.tsv");
pub const COLOR_VALUES_TSV: &str = include_str!("../../data/color_values.tsv");

impl Lexicons {
    pub fn builtin() -> &'static Lexicons {
        static CELL: OnceLock<Lexicons> = OnceLock::new();
        CELL.get_or_init(|| {
            let load = |name: &str, text: &str| {
                Lexicon::parse(text).unwrap_or_else(|e| panic!("bundled lexicon {name}: {e}"))
            };
            Lexicons {
                directions: load("directions", DIRECTIONS_TSV),
                speeds: load("speeds", SPEEDS_TSV),
                colors: load("colors", COLORS_TSV),
                edit_verbs: load("edit_verbs", EDIT_VERBS_TSV),
                motion_verbs: load("motion_verbs", MOTION_VERBS_TSV),
                objects: load("objects", OBJECTS_TSV),
                color_values: load("color_values", COLOR_VALUES_TSV),
            }
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    #[test]
    fn parses_comments_and_multiword() {
        let lex = Lexicon::parse("# header\n\nto the right\tleft_to_right\nright\tleft_to_right\n").unwrap();
        assert_eq!(lex.len(), 2);
        assert_eq!(lex.get("to the right"), Some("left_to_right"));
        assert_eq!(lex.find(&toks("moves to the right")), Some((1, 3, "left_to_right")));
    }

    #[test]
    fn longest_match_wins() {
        let lex = Lexicon::parse("right\tA\nfrom right to left\tB\n").unwrap();
        assert_eq!(lex.find(&toks("going from right to left")), Some((1, 4, "B")));
    }

    #[test]
    fn errors_carry_line_numbers() {
        assert_eq!(
            Lexicon::parse("a\tb\nno tab here\n"),
            Err(LexiconError::MissingTab { line: 2 })
        );
        assert_eq!(
            Lexicon::parse("a\t \n"),
            Err(LexiconError::EmptyField {
                line: 1,
                field: "canonical value"
            })
        );
        assert!(matches!(
            Lexicon::parse("a\tb\nA\tc\n"),
            Err(LexiconError::Duplicate { line: 2, .. })
        ));
    }

    #[test]
    fn builtin_lexicons_load() {
        let lex = Lexicons::builtin();
        assert_eq!(lex.edit_verbs.len(), 6);
        assert_eq!(lex.colors.get("grey"), Some("gray"));
        assert_eq!(lex.color_values.get("blue"), Some("#0000ff"));
    }
}
