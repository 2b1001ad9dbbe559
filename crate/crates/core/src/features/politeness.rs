//! Binary politeness-strategy detectors over user turns.
//!
//! Word lists live in plain-text lexicon files (see `lexicons/` in this
//! crate); the modal and deferential rules are positional and coded here.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::text::tokenize;
use crate::corpus::Dialog;
use crate::error::{Error, Result};

/// Tokens searched after `could`/`would` (and before `wondering`).
const WINDOW: usize = 3;
const FIRST_PERSON: [&str; 5] = ["i", "we", "me", "my", "us"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Counterfactual,
    Indicative,
    Deferential,
    Gratitude,
    Apology,
    Appreciation,
    Request,
    Greeting,
    Hedge,
}

impl Strategy {
    pub const ALL: [Strategy; 9] = [
        Strategy::Counterfactual,
        Strategy::Indicative,
        Strategy::Deferential,
        Strategy::Gratitude,
        Strategy::Apology,
        Strategy::Appreciation,
        Strategy::Request,
        Strategy::Greeting,
        Strategy::Hedge,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Counterfactual => "counterfactual",
            Strategy::Indicative => "indicative",
            Strategy::Deferential => "deferential",
            Strategy::Gratitude => "gratitude",
            Strategy::Apology => "apology",
            Strategy::Appreciation => "appreciation",
            Strategy::Request => "request",
            Strategy::Greeting => "greeting",
            Strategy::Hedge => "hedge",
        }
    }

    /// Feature-space key, e.g. `pol:gratitude`.
    pub fn feature_key(self) -> String {
        format!("pol:{}", self.as_str())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PolitenessProfile {
    pub counterfactual: bool,
    pub indicative: bool,
    pub deferential: bool,
    pub gratitude: bool,
    pub apology: bool,
    pub appreciation: bool,
    pub request: bool,
    pub greeting: bool,
    pub hedge: bool,
}

impl PolitenessProfile {
    pub fn get(&self, s: Strategy) -> bool {
        match s {
            Strategy::Counterfactual => self.counterfactual,
            Strategy::Indicative => self.indicative,
            Strategy::Deferential => self.deferential,
            Strategy::Gratitude => self.gratitude,
            Strategy::Apology => self.apology,
            Strategy::Appreciation => self.appreciation,
            Strategy::Request => self.request,
            Strategy::Greeting => self.greeting,
            Strategy::Hedge => self.hedge,
        }
    }

    pub(crate) fn set(&mut self, s: Strategy) {
        let flag = match s {
            Strategy::Counterfactual => &mut self.counterfactual,
            Strategy::Indicative => &mut self.indicative,
            Strategy::Deferential => &mut self.deferential,
            Strategy::Gratitude => &mut self.gratitude,
            Strategy::Apology => &mut self.apology,
            Strategy::Appreciation => &mut self.appreciation,
            Strategy::Request => &mut self.request,
            Strategy::Greeting => &mut self.greeting,
            Strategy::Hedge => &mut self.hedge,
        };
        *flag = true;
    }

    pub fn active(&self) -> Vec<Strategy> {
        Strategy::ALL.into_iter().filter(|&s| self.get(s)).collect()
    }

    pub fn count(&self) -> usize {
        self.active().len()
    }
}

/// A token pattern: consecutive tokens, each matched exactly or, with a
/// trailing `*`, by prefix.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Pattern(Vec<String>);

impl Pattern {
    pub fn parse(line: &str) -> Option<Pattern> {
        let toks: Vec<String> = line.split_whitespace().map(str::to_lowercase).collect();
        (!toks.is_empty()).then_some(Pattern(toks))
    }

    fn matches_at(&self, tokens: &[String], at: usize) -> bool {
        if at + self.0.len() > tokens.len() {
            return false;
        }
        self.0.iter().zip(&tokens[at..]).all(|(p, t)| match p.strip_suffix('*') {
            Some(prefix) => t.starts_with(prefix),
            None => p == t,
        })
    }

    pub fn occurs_in(&self, tokens: &[String]) -> bool {
        (0..tokens.len()).any(|i| self.matches_at(tokens, i))
    }
}

/// Parses a lexicon file body: one pattern per line, `#` starts a comment.
pub fn parse_lexicon(body: &str) -> Vec<Pattern> {
    body.lines()
        .map(|l| l.split('#').next().unwrap_or(""))
        .filter_map(Pattern::parse)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Lexicons {
    pub hedges: Vec<Pattern>,
    pub gratitude: Vec<Pattern>,
    pub apology: Vec<Pattern>,
    pub appreciation: Vec<Pattern>,
    pub greeting: Vec<Pattern>,
}

impl Default for Lexicons {
    fn default() -> Self {
        Lexicons {
            hedges: parse_lexicon(include_str!("../../lexicons/hedges.txt")),
            gratitude: parse_lexicon(include_str!("../../lexicons/gratitude.txt")),
            apology: parse_lexicon(include_str!("../../lexicons/apology.txt")),
            appreciation: parse_lexicon(include_str!("../../lexicons/appreciation.txt")),
            greeting: parse_lexicon(include_str!("../../lexicons/greeting.txt")),
        }
    }
}

impl Lexicons {
    /// Loads `hedges.txt`, `gratitude.txt`, `apology.txt`, `appreciation.txt`
    /// and `greeting.txt` from `dir`; files that are absent keep the bundled
    /// list.
    pub fn load_dir(dir: impl AsRef<Path>) -> Result<Lexicons> {
        let dir = dir.as_ref();
        let mut lex = Lexicons::default();
        let slots: [(&str, &mut Vec<Pattern>); 5] = [
            ("hedges.txt", &mut lex.hedges),
            ("gratitude.txt", &mut lex.gratitude),
            ("apology.txt", &mut lex.apology),
            ("appreciation.txt", &mut lex.appreciation),
            ("greeting.txt", &mut lex.greeting),
        ];
        for (name, slot) in slots {
            let path = dir.join(name);
            if path.exists() {
                let body = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
                *slot = parse_lexicon(&body);
            }
        }
        Ok(lex)
    }
}

fn any_pattern(patterns: &[Pattern], tokens: &[String]) -> bool {
    patterns.iter().any(|p| p.occurs_in(tokens))
}

fn is_counterfactual(tokens: &[String]) -> bool {
    tokens.iter().enumerate().any(|(i, t)| {
        (t == "could" || t == "would")
            && tokens[i + 1..].iter().take(WINDOW).any(|n| n == "you")
    })
}

fn is_indicative(tokens: &[String]) -> bool {
    let subject = |t: Option<&String>| matches!(t.map(String::as_str), Some("you" | "we"));
    tokens.iter().enumerate().any(|(i, t)| {
        (t == "can" || t == "will")
            && (subject(tokens.get(i + 1)) || (i > 0 && subject(tokens.get(i - 1))))
    })
}

fn is_deferential(tokens: &[String]) -> bool {
    tokens.iter().enumerate().any(|(i, t)| {
        t == "wondering"
            && tokens[i.saturating_sub(WINDOW)..i]
                .iter()
                .any(|p| FIRST_PERSON.contains(&p.as_str()))
    })
}

/// Per-turn politeness flags; `first`/`late` mark the first user turn and the
/// last two user turns.
fn turn_flags(tokens: &[String], first: bool, late: bool, lex: &Lexicons, out: &mut PolitenessProfile) {
    if is_counterfactual(tokens) {
        out.set(Strategy::Counterfactual);
    }
    if is_indicative(tokens) {
        out.set(Strategy::Indicative);
    }
    if is_deferential(tokens) {
        out.set(Strategy::Deferential);
    }
    if any_pattern(&lex.gratitude, tokens) {
        out.set(Strategy::Gratitude);
    }
    if any_pattern(&lex.apology, tokens) {
        out.set(Strategy::Apology);
    }
    if late && any_pattern(&lex.appreciation, tokens) {
        out.set(Strategy::Appreciation);
    }
    if tokens.iter().any(|t| t == "please") {
        out.set(Strategy::Request);
    }
    if first && any_pattern(&lex.greeting, tokens) {
        out.set(Strategy::Greeting);
    }
    if any_pattern(&lex.hedges, tokens) {
        out.set(Strategy::Hedge);
    }
}

/// Politeness strategies present anywhere in the dialog's user turns.
pub fn politeness_flags(dialog: &Dialog, lex: &Lexicons) -> PolitenessProfile {
    let turns: Vec<Vec<String>> = dialog.user_turns().map(|t| tokenize(&t.text)).collect();
    politeness_flags_tokens(&turns, lex)
}

/// Same as [`politeness_flags`] over already-tokenized user turns.
pub fn politeness_flags_tokens(user_turns: &[Vec<String>], lex: &Lexicons) -> PolitenessProfile {
    let mut profile = PolitenessProfile::default();
    let n = user_turns.len();
    for (i, tokens) in user_turns.iter().enumerate() {
        turn_flags(tokens, i == 0, i + 2 >= n, lex, &mut profile);
    }
    profile
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Turn;

    fn one_turn(text: &str) -> Dialog {
        Dialog {
            id: "t".into(),
            turns: vec![Turn::system("hello"), Turn::user(text)],
            ratings: Default::default(),
        }
    }

    fn flags(text: &str) -> Vec<Strategy> {
        politeness_flags(&one_turn(text), &Lexicons::default()).active()
    }

    #[test]
    fn neutral_text_sets_nothing() {
        assert!(flags("the slides are ready").is_empty());
    }

    #[test]
    fn modal_rules() {
        assert_eq!(flags("Could you also review my slides?"), vec![Strategy::Counterfactual]);
        assert_eq!(flags("would you mind"), vec![Strategy::Counterfactual]);
        assert!(flags("would it be ok for you").is_empty());
        assert!(flags("i could send the file to you").is_empty());
        assert_eq!(flags("can you check it"), vec![Strategy::Indicative]);
        assert_eq!(flags("if we can meet"), vec![Strategy::Indicative]);
        assert!(!flags("sounds good . i will see you").contains(&Strategy::Indicative));
    }

    #[test]
    fn deferential_needs_first_person() {
        assert_eq!(flags("I was wondering do you have time"), vec![Strategy::Deferential]);
        assert_eq!(flags("we were wondering"), vec![Strategy::Deferential]);
        assert!(flags("everyone keeps wondering about the budget").is_empty());
    }

    #[test]
    fn positional_strategies() {
        let lex = Lexicons::default();
        let d = Dialog {
            id: "p".into(),
            turns: vec![
                Turn::system("a"),
                Turn::user("sounds good"),
                Turn::system("b"),
                Turn::user("hello again"),
                Turn::system("c"),
                Turn::user("fine"),
                Turn::system("d"),
                Turn::user("fine"),
            ],
            ratings: Default::default(),
        };
        // appreciation only counts in the last two user turns, greeting only in the first
        assert!(politeness_flags(&d, &lex).active().is_empty());
    }

    #[test]
    fn system_turns_are_ignored() {
        let d = Dialog {
            id: "s".into(),
            turns: vec![Turn::system("hello, thank you, please"), Turn::user("ok")],
            ratings: Default::default(),
        };
        assert_eq!(politeness_flags(&d, &Lexicons::default()).count(), 0);
    }

    #[test]
    fn lexicon_parsing() {
        let pats = parse_lexicon("# header\nthank*  # prefix\n\nexcuse me\n");
        assert_eq!(pats.len(), 2);
        let toks: Vec<String> = tokenize("well, excuse me please");
        assert!(pats[1].occurs_in(&toks));
        assert!(pats[0].occurs_in(&tokenize("Thankfully")));
        assert!(!pats[1].occurs_in(&tokenize("excuse")));
    }

    #[test]
    fn load_dir_overrides_present_files() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("hedges.txt"), "zorp\n").unwrap();
        let lex = Lexicons::load_dir(dir.path()).unwrap();
        assert_eq!(lex.hedges, vec![Pattern::parse("zorp").unwrap()]);
        assert_eq!(lex.gratitude, Lexicons::default().gratitude);
    }
}
