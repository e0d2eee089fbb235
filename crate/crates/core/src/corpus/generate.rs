//! Templated conversation scripts.
//!
//! Every conversation opens with an agent greeting (no intent content),
//! followed by the caller's problem description, 0-3 agent/caller exchange
//! pairs and an optional closing, for 2-10 turns in total. Several short
//! replies ("okay", "sure") carry different acts depending on the preceding
//! agent turn, so dialog history is informative for act recognition.

use std::collections::{BTreeSet, HashSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::labels::{DialogAct, Intent};
use super::normalize::{alphabet, normalize_transcript};
use super::{Conversation, CorpusConfig, CorpusManifest, Role, Split, Turn};
use crate::error::Result;

use DialogAct::*;

type Line = (&'static str, &'static [DialogAct]);

const OPENINGS: &[Line] = &[
    ("hello how can i help", &[Greeting, OpenQuestion]),
    ("hi how may i help you", &[Greeting, OpenQuestion]),
    ("good morning how can i help", &[Greeting, OpenQuestion]),
    ("hello", &[Greeting]),
];

fn requests(intent: Intent) -> &'static [&'static str] {
    match intent {
        Intent::OrderChecks => &["i need to order checks", "i want new checks", "can i order more checks"],
        Intent::CheckBalance => &["i want to check my balance", "what is my balance", "i need my balance"],
        Intent::ReplaceCard => &["i lost my card", "i need a new card", "my card was stolen"],
        Intent::ResetPassword => &["i forgot my password", "i need to reset my password", "my password is locked"],
        Intent::GetBranchHours => &["when does the branch open", "what are your hours", "is the branch open today"],
        Intent::PayBill => &["i want to pay my bill", "i need to pay a bill", "can i pay my bill"],
        Intent::ScheduleAppointment => &["i need an appointment", "can i book a meeting", "i want to schedule a visit"],
        Intent::TransferMoney => &["i want to send money", "i need to transfer funds", "move money to savings"],
    }
}

fn procedures(intent: Intent) -> &'static [&'static str] {
    match intent {
        Intent::OrderChecks => &["i will order new checks", "your checks will ship soon"],
        Intent::CheckBalance => &["i can see your balance", "your balance is ready"],
        Intent::ReplaceCard => &["i will send a new card", "i blocked the old card"],
        Intent::ResetPassword => &["i will reset your password", "your password is reset"],
        Intent::GetBranchHours => &["we open at nine", "the branch hours are nine to five"],
        Intent::PayBill => &["i can pay that bill", "the bill is paid"],
        Intent::ScheduleAppointment => &["i booked your appointment", "your meeting is set"],
        Intent::TransferMoney => &["i sent the money", "the transfer is done"],
    }
}

/// Words that reveal the caller's intent.
pub fn intent_keywords(intent: Intent) -> &'static [&'static str] {
    match intent {
        Intent::OrderChecks => &["checks"],
        Intent::CheckBalance => &["balance"],
        Intent::ReplaceCard => &["card"],
        Intent::ResetPassword => &["password"],
        Intent::GetBranchHours => &["branch", "hours", "open", "nine"],
        Intent::PayBill => &["bill"],
        Intent::ScheduleAppointment => &["appointment", "meeting", "visit"],
        Intent::TransferMoney => &["money", "transfer", "funds"],
    }
}

const NAMES: &[&str] = &["john", "mary", "alex", "sam", "kim", "lee", "ann", "tom"];
const DIGITS: &[&str] = &["one", "two", "three", "four", "five", "six", "seven", "eight", "zero"];

#[derive(Debug, Clone, Copy)]
enum Exchange {
    AskName,
    Confirm,
    Procedure,
    BearWithMe,
    AskAccount,
    Filler,
    Inform,
}

const EXCHANGES: [Exchange; 7] = [
    Exchange::AskName,
    Exchange::Confirm,
    Exchange::Procedure,
    Exchange::BearWithMe,
    Exchange::AskAccount,
    Exchange::Filler,
    Exchange::Inform,
];

struct Script {
    lines: Vec<(String, BTreeSet<DialogAct>)>,
}

impl Script {
    fn push(&mut self, text: impl Into<String>, acts: &[DialogAct]) {
        self.lines.push((text.into(), acts.iter().copied().collect()));
    }
}

fn pick<'a, T>(rng: &mut ChaCha8Rng, items: &'a [T]) -> &'a T {
    items.choose(rng).expect("non-empty template list")
}

fn digits(rng: &mut ChaCha8Rng, n: usize) -> String {
    (0..n).map(|_| *pick(rng, DIGITS)).collect::<Vec<_>>().join(" ")
}

fn exchange(rng: &mut ChaCha8Rng, kind: Exchange, intent: Intent, s: &mut Script) {
    match kind {
        Exchange::AskName => {
            s.push(*pick(rng, &["what is your name", "can i get your name"]), &[DataQuestion]);
            let name = *pick(rng, NAMES);
            match rng.gen_range(0..3) {
                0 => s.push(format!("it is {name}"), &[DataResponse]),
                1 => s.push(format!("my name is {name}"), &[DataResponse]),
                _ => s.push(name, &[DataResponse]),
            }
        }
        Exchange::Confirm => {
            s.push(*pick(rng, &["is that correct", "can you confirm that"]), &[DataConfirmation]);
            s.push(*pick(rng, &["yes", "okay", "yes it is", "sure"]), &[YesResponse]);
        }
        Exchange::Procedure => {
            s.push(*pick(rng, procedures(intent)), &[ProcedureExplanation]);
            match rng.gen_range(0..3) {
                0 => s.push("thank you", &[Thanks]),
                _ => s.push(*pick(rng, &["okay", "sure", "sounds good"]), &[Acknowledgement]),
            }
        }
        Exchange::BearWithMe => {
            s.push(*pick(rng, &["one moment please", "bear with me"]), &[BearWithMe]);
            s.push(*pick(rng, &["okay", "sure"]), &[Acknowledgement]);
        }
        Exchange::AskAccount => {
            s.push("what is your account number", &[DataQuestion]);
            let n = rng.gen_range(2..4);
            s.push(digits(rng, n), &[DataResponse]);
        }
        Exchange::Filler => {
            s.push(*pick(rng, &["um let me see", "uh okay"]), &[FillerDisfluency]);
            s.push(*pick(rng, &["okay", "uh huh"]), &[Other]);
        }
        Exchange::Inform => {
            let code = digits(rng, 2);
            s.push(format!("your code is {code}"), &[DataCommunication]);
            s.push(*pick(rng, &["okay", "thank you"]), &[Acknowledgement]);
        }
    }
}

fn script(rng: &mut ChaCha8Rng, intent: Intent) -> Script {
    let mut s = Script { lines: Vec::new() };
    let (open, open_acts) = *pick(rng, OPENINGS);
    s.push(open, open_acts);
    let request = *pick(rng, requests(intent));
    if rng.gen_bool(0.2) {
        s.push(format!("hi {request}"), &[Greeting, ProblemDescription]);
    } else {
        s.push(request, &[ProblemDescription]);
    }
    let pairs = rng.gen_range(0..=3);
    for _ in 0..pairs {
        let kind = *pick(rng, &EXCHANGES);
        exchange(rng, kind, intent, &mut s);
    }
    match rng.gen_range(0..3) {
        1 => s.push("thanks for calling bye", &[Thanks, Closing]),
        2 => {
            s.push(*pick(rng, &["anything else", "is there anything else"]), &[OpenQuestion]);
            s.push(*pick(rng, &["no thank you bye", "no thanks"]), &[Response, Thanks, Closing]);
        }
        _ => {}
    }
    s
}

/// Deterministic synthetic corpus for `(seed, config)`.
pub fn generate_corpus(seed: u64, config: &CorpusConfig) -> Result<CorpusManifest> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let agents: Vec<String> = (0..config.num_agents).map(|i| format!("agent{i:02}")).collect();
    let mut callers: Vec<String> = (0..config.num_callers).map(|i| format!("caller{i:02}")).collect();
    callers.shuffle(&mut rng);
    let caller_split = |caller: &str| -> Split {
        let pos = callers.iter().position(|c| c == caller).unwrap();
        if pos < config.test_callers {
            Split::Test
        } else if pos < config.test_callers + config.valid_callers {
            Split::Valid
        } else {
            Split::Train
        }
    };

    let mut conversations = Vec::new();
    for rep in 0..config.conversations_per_intent {
        for intent in Intent::ALL {
            let id = format!("conv{:04}", rep * Intent::ALL.len() + intent.index());
            let caller = pick(&mut rng, &callers).clone();
            let agent = pick(&mut rng, &agents).clone();
            let s = script(&mut rng, intent);
            let turns = s
                .lines
                .into_iter()
                .enumerate()
                .map(|(i, (text, acts))| Turn {
                    index: i + 1,
                    speaker: if i % 2 == 0 { Role::Agent } else { Role::User },
                    transcript: normalize_transcript(&text),
                    dialog_acts: acts,
                    waveform_ref: format!("wav/{id}_{:02}.wav", i + 1),
                })
                .collect();
            conversations.push(Conversation {
                split: caller_split(&caller),
                id,
                intent,
                caller_id: caller,
                agent_id: agent,
                turns,
            });
        }
    }

    // Held-out agents must also be seen in training.
    let train_agents: HashSet<String> = conversations
        .iter()
        .filter(|c| c.split == Split::Train)
        .map(|c| c.agent_id.clone())
        .collect();
    let mut seen: Vec<String> = train_agents.into_iter().collect();
    seen.sort();
    if !seen.is_empty() {
        for (i, c) in conversations.iter_mut().enumerate() {
            if c.split != Split::Train && !seen.contains(&c.agent_id) {
                c.agent_id = seen[i % seen.len()].clone();
            }
        }
    }

    let manifest = CorpusManifest {
        seed,
        config: config.clone(),
        alphabet: alphabet(),
        conversations,
    };
    manifest.validate()?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;

    #[test]
    fn deterministic_per_seed() {
        let cfg = CorpusConfig::default();
        let a = generate_corpus(7, &cfg).unwrap().to_jsonl().unwrap();
        let b = generate_corpus(7, &cfg).unwrap().to_jsonl().unwrap();
        assert_eq!(a.as_bytes(), b.as_bytes());
        let c = generate_corpus(8, &cfg).unwrap().to_jsonl().unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn intent_counts() {
        let cfg = CorpusConfig {
            conversations_per_intent: 25,
            ..CorpusConfig::default()
        };
        let m = generate_corpus(1, &cfg).unwrap();
        assert_eq!(m.conversations.len(), 200);
        for intent in Intent::ALL {
            assert_eq!(m.conversations.iter().filter(|c| c.intent == intent).count(), 25);
        }
    }

    #[test]
    fn opening_turn_never_reveals_intent() {
        for seed in 0..5 {
            let m = generate_corpus(seed, &CorpusConfig::default()).unwrap();
            for c in &m.conversations {
                let first: Vec<&str> = c.turns[0].transcript.split(' ').collect();
                for intent in Intent::ALL {
                    for kw in intent_keywords(intent) {
                        assert!(!first.contains(kw), "{} turn 1 reveals {intent}", c.id);
                    }
                }
                assert!(c.turns[0].dialog_acts.contains(&DialogAct::Greeting));
                // The request turn always names the true intent.
                let second = &c.turns[1].transcript;
                assert!(intent_keywords(c.intent)
                    .iter()
                    .any(|kw| second.split(' ').any(|w| w == *kw)));
            }
        }
    }

    #[test]
    fn structure_and_split_invariants() {
        for seed in 0..5 {
            let m = generate_corpus(seed, &CorpusConfig::default()).unwrap();
            m.validate().unwrap();
            for c in &m.conversations {
                assert!((2..=10).contains(&c.turns.len()));
                for t in &c.turns {
                    assert!(!t.transcript.is_empty());
                    assert_eq!(t.speaker == Role::Agent, t.index % 2 == 1);
                }
            }
            for split in [Split::Train, Split::Valid, Split::Test] {
                assert!(m.split(split).count() > 0, "seed {seed} empty {split}");
            }
        }
    }

    #[test]
    fn all_acts_are_used() {
        let m = generate_corpus(2, &CorpusConfig::default()).unwrap();
        let used: BTreeSet<DialogAct> = m
            .conversations
            .iter()
            .flat_map(|c| c.turns.iter().flat_map(|t| t.dialog_acts.iter().copied()))
            .collect();
        assert_eq!(used.len(), 16);
    }

    #[test]
    fn config_errors() {
        let no_agents = CorpusConfig {
            num_agents: 0,
            ..CorpusConfig::default()
        };
        assert!(matches!(generate_corpus(0, &no_agents), Err(Error::Config(_))));
        let few_callers = CorpusConfig {
            num_callers: 4,
            test_callers: 4,
            ..CorpusConfig::default()
        };
        assert!(matches!(generate_corpus(0, &few_callers), Err(Error::Config(_))));
    }
}
