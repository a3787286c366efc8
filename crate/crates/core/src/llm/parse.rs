use std::collections::BTreeSet;

use thiserror::Error;

use crate::grid::Action;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("ParseFailure: {reason} in {text:?}")]
pub struct ParseFailure {
    pub text: String,
    pub reason: ParseFailureReason,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ParseFailureReason {
    NoAction,
    Ambiguous(Vec<Action>),
}

impl std::fmt::Display for ParseFailureReason {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ParseFailureReason::NoAction => f.write_str("no action keyword"),
            ParseFailureReason::Ambiguous(a) => write!(f, "several actions {a:?}"),
        }
    }
}

fn keyword_action(word: &str) -> Option<Action> {
    match word {
        "go" | "goes" | "going" => Some(Action::Go),
        "stop" | "stops" | "stopping" | "stopped" => Some(Action::Stop),
        "change" | "changes" | "changing" | "switch" | "switches" | "switching" | "lane" | "lanes" => {
            Some(Action::LaneChange)
        }
        _ => None,
    }
}

/// Reads an action out of free-form model output.
///
/// Words are matched case-insensitively; keywords naming actions outside
/// `legal` are ignored. Exactly one distinct legal action must remain.
pub fn parse_action(response_text: &str, legal: &BTreeSet<Action>) -> Result<Action, ParseFailure> {
    let lowered = response_text.to_lowercase();
    let found: BTreeSet<Action> = lowered
        .split(|c: char| !c.is_alphabetic())
        .filter_map(keyword_action)
        .filter(|a| legal.contains(a))
        .collect();
    let fail = |reason| ParseFailure {
        text: response_text.to_owned(),
        reason,
    };
    match found.len() {
        0 => Err(fail(ParseFailureReason::NoAction)),
        1 => Ok(*found.iter().next().expect("one element")),
        _ => Err(fail(ParseFailureReason::Ambiguous(found.into_iter().collect()))),
    }
}
