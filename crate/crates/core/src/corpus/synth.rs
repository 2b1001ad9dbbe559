//! Seeded generator of meeting-request dialogs with label-correlated surface
//! signals. The template banks and placement rules are described in
//! `docs/synthetic-corpus.md`.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Construct, Dialog, Turn};
use crate::error::{Error, Result};
use crate::features::{PolitenessProfile, Strategy};

/// Inclusive range of planted politeness-strategy counts per Appropriateness
/// level 1..=4.
pub const POLITE_STRATEGY_RANGES: [(usize, usize); 4] = [(0, 1), (2, 3), (4, 5), (6, 7)];

/// Strategies are planted as a prefix of this list, so the presence of the
/// 2nd, 4th and 6th entries marks levels 2, 3 and 4.
pub const POLITE_ORDER: [Strategy; 7] = [
    Strategy::Request,
    Strategy::Greeting,
    Strategy::Gratitude,
    Strategy::Deferential,
    Strategy::Indicative,
    Strategy::Appreciation,
    Strategy::Counterfactual,
];

/// Knobs for signal strength and noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SignalSpec {
    /// Probability that one simulated rater moves one point off the true label.
    pub rater_noise: f64,
    /// Probability of each non-triggering look-alike of a positional
    /// politeness strategy (greeting, deferential, appreciation, could).
    pub decoy_rate: f64,
    /// Probability that a system prompt after the first signals confusion.
    pub confusion_rate: f64,
}

impl Default for SignalSpec {
    fn default() -> Self {
        SignalSpec {
            rater_noise: 0.2,
            decoy_rate: 0.3,
            confusion_rate: 0.6,
        }
    }
}

impl SignalSpec {
    fn validate(&self) -> Result<()> {
        for (name, p) in [
            ("rater_noise", self.rater_noise),
            ("decoy_rate", self.decoy_rate),
            ("confusion_rate", self.confusion_rate),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::InvalidArgument(format!("{name} = {p} is not a probability")));
            }
        }
        Ok(())
    }
}

/// A generated dialog with the truth used to build it.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDialog {
    pub dialog: Dialog,
    pub truth: BTreeMap<Construct, u8>,
    /// Politeness strategies deliberately planted in user turns.
    pub planted: PolitenessProfile,
}

const RATERS: usize = 3;

const SYSTEM_OPENERS: [&str; 3] = [
    "Hello, this is the scheduling assistant. How can I help you today?",
    "Welcome back. What do you need today?",
    "Good afternoon. What would you like to arrange?",
];
const SYSTEM_PROMPTS: [&str; 4] = [
    "When is a good time for the meeting?",
    "Who else should attend?",
    "Is there anything else to add?",
    "What is the meeting about?",
];
const SYSTEM_CONFUSED: [&str; 3] = [
    "Sorry, I did not catch that.",
    "Pardon? Say that again.",
    "I am not sure I follow you.",
];
const SYSTEM_CLOSERS: [&str; 2] = ["Okay, I will send the invite. Bye.", "Great, the request is noted."];

// Per-level phrase banks; index 0 is level 1.
const TOPIC: [&[&str]; 4] = [
    &["my cat is cute", "the soup was cold"],
    &["a chat", "weekend plans"],
    &["a meeting", "the project"],
    &["a project meeting", "a meeting on my slides"],
];
const ELABORATION: [&[&str]; 4] = [
    &["yes yes", "no no"],
    &["for class"],
    &["for class, due friday"],
    &["for class, due friday, slides need review"],
];
const STRUCTURE: [&[&str]; 4] = [&["um"], &["first"], &["first then"], &["first then finally"]];
const TASK: [&[&str]; 4] = [
    &["some day"],
    &["at noon"],
    &["noon, room four"],
    &["noon, room four, design team"],
];
const ENGAGEMENT: [&[&str]; 4] = [&["whatever"], &["fine"], &["what do you say"], &["what do you and the team say"]];
const TURN_TAKING: [&[&str]; 4] = [&["uh"], &["okay"], &["okay, got it"], &["okay, got it, your turn"]];
const REPAIR: [&[&str]; 4] = [
    &["huh no idea", "dunno"],
    &["i mean it"],
    &["what i meant is this"],
    &["let me rephrase that", "to clarify my request"],
];

fn polite_bank(s: Strategy) -> &'static [&'static str] {
    match s {
        Strategy::Request => &["please send the agenda", "please book a room"],
        Strategy::Greeting => &["hi", "hello", "good morning"],
        Strategy::Gratitude => &["thank you", "thanks a lot"],
        Strategy::Deferential => &["i was wondering about it", "we were wondering"],
        Strategy::Indicative => &["can you book the room", "will you join us"],
        Strategy::Appreciation => &["sounds good", "that sounds great"],
        Strategy::Counterfactual => &["could you share the slides", "would you join"],
        Strategy::Apology => &["sorry for the short notice"],
        Strategy::Hedge => &["maybe next week"],
    }
}

const DECOY_GREETING: &str = "say hello to them";
const DECOY_DEFERENTIAL: &str = "the team was wondering";
const DECOY_APPRECIATION: &str = "the old plan sounds good";
const DECOY_COULD: &str = "the room could fit ten";

fn pick<R: Rng>(rng: &mut R, bank: &[&'static str]) -> &'static str {
    bank[rng.gen_range(0..bank.len())]
}

fn render(fragments: &[String]) -> String {
    let mut s = fragments.join(". ");
    if let Some(first) = s.get(..1) {
        let upper = first.to_uppercase();
        s.replace_range(..1, &upper);
    }
    s.push('.');
    s
}

/// Generates `n` dialogs; identical `(seed, n, spec)` give identical output.
pub fn synthesize_corpus(seed: u64, n: usize, spec: &SignalSpec) -> Result<Vec<Dialog>> {
    Ok(synthesize_detailed(seed, n, spec)?.into_iter().map(|s| s.dialog).collect())
}

/// [`synthesize_corpus`] with the planted truth attached.
pub fn synthesize_detailed(seed: u64, n: usize, spec: &SignalSpec) -> Result<Vec<SyntheticDialog>> {
    if n == 0 {
        return Err(Error::InvalidArgument("synthetic corpus size must be at least 1".into()));
    }
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n).map(|i| one_dialog(&mut rng, format!("syn{i:05}"), spec)).collect())
}

fn one_dialog(rng: &mut ChaCha8Rng, id: String, spec: &SignalSpec) -> SyntheticDialog {
    // Labels first.
    let mut truth = BTreeMap::new();
    let mut sum = 0u32;
    for c in Construct::ALL {
        if c != Construct::Overall {
            let l = rng.gen_range(1..=4u8);
            sum += u32::from(l);
            truth.insert(c, l);
        }
    }
    truth.insert(Construct::Overall, (f64::from(sum) / 8.0).round() as u8);

    let n_turns: usize = rng.gen_range(3..=8);
    let n_user = n_turns / 2;
    let level = |c: Construct| usize::from(truth[&c]) - 1;

    // System side: opener, then prompts (possibly confused) before each later user turn.
    let mut system: Vec<String> = vec![pick(rng, &SYSTEM_OPENERS).to_string()];
    let mut confused = vec![false; n_user];
    for slot in confused.iter_mut().skip(1) {
        if rng.gen_bool(spec.confusion_rate) {
            *slot = true;
            system.push(pick(rng, &SYSTEM_CONFUSED).to_string());
        } else {
            system.push(pick(rng, &SYSTEM_PROMPTS).to_string());
        }
    }

    let mut user: Vec<Vec<String>> = vec![Vec::new(); n_user];
    let place = |rng: &mut ChaCha8Rng, user: &mut Vec<Vec<String>>, text: &str| {
        let t = rng.gen_range(0..user.len());
        user[t].push(text.to_string());
    };

    for (c, bank) in [
        (Construct::Topic, TOPIC),
        (Construct::Elaboration, ELABORATION),
        (Construct::Structure, STRUCTURE),
        (Construct::Task, TASK),
        (Construct::Engagement, ENGAGEMENT),
        (Construct::TurnTaking, TURN_TAKING),
    ] {
        let phrase = pick(rng, bank[level(c)]);
        place(rng, &mut user, phrase);
    }

    // Repair: the first response always shows the level's repair style, and so
    // does every response to a confused prompt.
    let repair = REPAIR[level(Construct::Repair)];
    for (t, turn) in user.iter_mut().enumerate() {
        if t == 0 || confused[t] {
            turn.push(pick(rng, repair).to_string());
        }
    }

    // Appropriateness: plant a prefix of POLITE_ORDER.
    let (lo, hi) = POLITE_STRATEGY_RANGES[level(Construct::Appropriateness)];
    let count = rng.gen_range(lo..=hi);
    let mut planted = PolitenessProfile::default();
    let mut greeting = None;
    for &s in &POLITE_ORDER[..count] {
        planted.set(s);
        let phrase = pick(rng, polite_bank(s));
        match s {
            Strategy::Greeting => greeting = Some(phrase),
            Strategy::Appreciation => user[n_user - 1].push(phrase.to_string()),
            _ => place(rng, &mut user, phrase),
        }
    }

    // Look-alikes that the positional rules must not count.
    if n_user >= 2 && rng.gen_bool(spec.decoy_rate) {
        let t = rng.gen_range(1..n_user);
        user[t].push(DECOY_GREETING.to_string());
    }
    if rng.gen_bool(spec.decoy_rate) {
        place(rng, &mut user, DECOY_DEFERENTIAL);
    }
    if n_user >= 3 && rng.gen_bool(spec.decoy_rate) {
        let t = rng.gen_range(0..n_user - 2);
        user[t].push(DECOY_APPRECIATION.to_string());
    }
    if rng.gen_bool(spec.decoy_rate) {
        place(rng, &mut user, DECOY_COULD);
    }

    for turn in user.iter_mut() {
        turn.shuffle(rng);
    }
    if let Some(g) = greeting {
        user[0].insert(0, g.to_string());
    }

    let mut turns = Vec::with_capacity(n_turns);
    for t in 0..n_user {
        turns.push(Turn::system(system[t].clone()));
        turns.push(Turn::user(render(&user[t])));
    }
    if n_turns % 2 == 1 {
        turns.push(Turn::system(pick(rng, &SYSTEM_CLOSERS)));
    }

    let mut ratings = BTreeMap::new();
    for (&c, &l) in &truth {
        let scores = (0..RATERS)
            .map(|_| {
                if rng.gen_bool(spec.rater_noise) {
                    let step: i8 = if rng.gen_bool(0.5) { 1 } else { -1 };
                    (l as i8 + step).clamp(1, 4) as u8
                } else {
                    l
                }
            })
            .collect();
        ratings.insert(c, scores);
    }

    SyntheticDialog {
        dialog: Dialog { id, turns, ratings },
        truth,
        planted,
    }
}
