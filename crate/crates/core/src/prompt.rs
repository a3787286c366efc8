//! Prompt templates and rendering.
//!
//! Each query is a single system message (the static game description) and a
//! single user message built from three pieces: the agent's own state, one
//! line per visible vehicle, and the question. Templates use `{name}`
//! placeholders; `{{` and `}}` produce literal braces.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::grid::{Action, VehicleId};
use crate::policy::{Observation, OtherVehicle};
use crate::scalar::RewardScalar;
use crate::scenario::{Road, ScenarioKind, ScenarioSpec};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TemplateError {
    #[error("TemplateError: unresolved placeholder {{{0}}}")]
    Unresolved(String),
    #[error("TemplateError: unbalanced brace at byte {0}")]
    Malformed(usize),
    #[error("TemplateError: {template} template must use exactly {expected:?}, found {found:?}")]
    Placeholders {
        template: &'static str,
        expected: Vec<&'static str>,
        found: Vec<String>,
    },
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Piece<'a> {
    Text(&'a str),
    Brace(char),
    Slot(&'a str),
}

fn parse(template: &str) -> Result<Vec<Piece<'_>>, TemplateError> {
    let mut out = Vec::new();
    let bytes = template.as_bytes();
    let mut i = 0;
    let mut text_start = 0;
    while i < bytes.len() {
        match bytes[i] {
            b'{' | b'}' if bytes.get(i + 1) == Some(&bytes[i]) => {
                out.push(Piece::Text(&template[text_start..i]));
                out.push(Piece::Brace(bytes[i] as char));
                i += 2;
                text_start = i;
            }
            b'{' => {
                let close = template[i + 1..]
                    .find(['}', '{'])
                    .map(|off| i + 1 + off)
                    .filter(|&j| bytes[j] == b'}')
                    .ok_or(TemplateError::Malformed(i))?;
                out.push(Piece::Text(&template[text_start..i]));
                out.push(Piece::Slot(&template[i + 1..close]));
                i = close + 1;
                text_start = i;
            }
            b'}' => return Err(TemplateError::Malformed(i)),
            _ => i += 1,
        }
    }
    out.push(Piece::Text(&template[text_start..]));
    Ok(out)
}

/// Names of all `{name}` placeholders in a template.
pub fn placeholders(template: &str) -> Result<BTreeSet<String>, TemplateError> {
    Ok(parse(template)?
        .into_iter()
        .filter_map(|p| match p {
            Piece::Slot(name) => Some(name.to_owned()),
            _ => None,
        })
        .collect())
}

/// Fills every placeholder from `values`; any missing name is an error.
pub fn fill(template: &str, values: &BTreeMap<&str, String>) -> Result<String, TemplateError> {
    let mut out = String::with_capacity(template.len());
    for piece in parse(template)? {
        match piece {
            Piece::Text(t) => out.push_str(t),
            Piece::Brace(c) => out.push(c),
            Piece::Slot(name) => out.push_str(
                values
                    .get(name)
                    .ok_or_else(|| TemplateError::Unresolved(name.to_owned()))?,
            ),
        }
    }
    Ok(out)
}

const SELF_SLOTS: [&str; 4] = ["color", "cumulative_reward", "position", "time_step"];
const OTHER_SLOTS: [&str; 2] = ["color", "position"];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptTemplateSet {
    pub system_template: String,
    pub self_template: String,
    pub other_template: String,
    pub question_template: String,
}

impl PromptTemplateSet {
    /// Default wording for a scenario.
    pub fn defaults(kind: ScenarioKind) -> Self {
        let system_template = match kind {
            ScenarioKind::Intersection => INTERSECTION_SYSTEM,
            ScenarioKind::Platoon => PLATOON_SYSTEM,
        };
        PromptTemplateSet {
            system_template: system_template.to_owned(),
            self_template: "You are the {color} car. It is time step {time_step}. \
                            Your location is {position} and your cumulative reward is {cumulative_reward}.\n"
                .to_owned(),
            other_template: "There is a {color} car at {position}.\n".to_owned(),
            question_template: "Which action do you take ({actions})? \
                                Reply with the action and your resulting location."
                .to_owned(),
        }
    }

    /// Checks the placeholder contracts of the observation templates and
    /// that every template parses.
    pub fn validate(&self) -> Result<(), TemplateError> {
        check_exact("self", &self.self_template, &SELF_SLOTS)?;
        check_exact("other", &self.other_template, &OTHER_SLOTS)?;
        placeholders(&self.system_template)?;
        placeholders(&self.question_template)?;
        Ok(())
    }
}

fn check_exact(template: &'static str, text: &str, expected: &[&'static str]) -> Result<(), TemplateError> {
    let found = placeholders(text)?;
    let want: BTreeSet<String> = expected.iter().map(|s| s.to_string()).collect();
    if found != want {
        return Err(TemplateError::Placeholders {
            template,
            expected: expected.to_vec(),
            found: found.into_iter().collect(),
        });
    }
    Ok(())
}

const INTERSECTION_SYSTEM: &str = "\
You are driving a car in a game played on a {rows} by {cols} grid. \
Locations are written as (row,column); rows count from north to south and columns from west to east. \
Road 1 runs from west to east along row {east_roads}. Road 2 runs from north to south along column {south_roads}. \
The roads cross at the unsignalized intersection {conflict_cells}. \
The green car drives on Road 1 and the red car drives on Road 2. White cars are background vehicles that follow fixed rules.\n\
At every time step each car picks one action, and all cars move at the same time.\n\
Go: move forward by one cell. Reward {go_cost}.\n\
Stop: do not move. Reward {stop_cost}.\n\
If two cars end up in the same cell, or swap cells, they crash and each receives {crash_penalty}.\n\
A car finishes its trip when it reaches the last cell of its road. \
The game ends when every car has finished its trip or a crash occurs. \
Finish your trip and maximize your cumulative reward.";

const PLATOON_SYSTEM: &str = "\
You are driving a car on a two-lane highway modelled as a {rows} by {cols} grid. \
Locations are written as (row,column). Both lanes (columns {lanes}) run from north to south, from row 1 to row {rows}. \
The red and green cars each start in their own lane. White cars are background vehicles that follow fixed rules.\n\
At every time step each car picks one action, and all cars move at the same time.\n\
Go: move forward by one cell. Reward {go_cost}.\n\
Stop: do not move. Reward {stop_cost}.\n\
Lane change: switch to the other lane in the same row. Reward {lane_change_cost}.\n\
If two cars end up in the same cell, or swap cells, they crash and each receives {crash_penalty}.\n\
Cars travelling in the same lane form a platoon. Every time step that ends with the red and green cars in a platoon gives each of them {platoon_bonus}.\n\
A car finishes its trip when it reaches row {rows}. \
The game succeeds if a platoon forms at least once and all cars complete their trips without any car crashes. \
Finish your trip and maximize your cumulative reward.";

/// One query: exactly one system message and one user message.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RenderedPrompt {
    pub agent_id: VehicleId,
    pub time_step: u32,
    pub system_message: String,
    pub user_message: String,
}

impl RenderedPrompt {
    /// Stable SHA-256 over both messages, hex encoded.
    pub fn content_hash(&self) -> String {
        prompt_hash(&self.system_message, &self.user_message)
    }
}

pub fn prompt_hash(system: &str, user: &str) -> String {
    let mut h = Sha256::new();
    h.update(system.as_bytes());
    h.update([0u8]);
    h.update(user.as_bytes());
    hex::encode(h.finalize())
}

fn join_list<T: ToString>(items: impl IntoIterator<Item = T>) -> String {
    let items: Vec<String> = items.into_iter().map(|i| i.to_string()).collect();
    match items.len() {
        0 => String::new(),
        1 => items[0].clone(),
        n => format!("{} and {}", items[..n - 1].join(", "), items[n - 1]),
    }
}

fn opt_value<R: RewardScalar>(v: Option<R>) -> String {
    v.map(|x| x.to_string()).unwrap_or_else(|| "0".into())
}

/// Static description of the game, identical for every agent and step.
pub fn render_system<R: RewardScalar>(
    spec: &ScenarioSpec<R>,
    templates: &PromptTemplateSet,
) -> Result<String, TemplateError> {
    let r = &spec.reward;
    let east = spec.roads.iter().filter_map(|rd| match rd {
        Road::East { row } => Some(*row),
        _ => None,
    });
    let south = spec.roads.iter().filter_map(|rd| match rd {
        Road::South { col } => Some(*col),
        _ => None,
    });
    let values: BTreeMap<&str, String> = [
        ("rows", spec.grid.rows.to_string()),
        ("cols", spec.grid.cols.to_string()),
        ("east_roads", join_list(east)),
        ("south_roads", join_list(south)),
        ("conflict_cells", join_list(spec.conflict_cells.iter())),
        ("lanes", join_list(spec.lanes.iter())),
        ("go_cost", r.go_cost.to_string()),
        ("stop_cost", r.stop_cost.to_string()),
        ("lane_change_cost", opt_value(r.lane_change_cost)),
        ("crash_penalty", r.crash_penalty.to_string()),
        ("platoon_bonus", opt_value(r.platoon_bonus)),
        ("step_cap", spec.step_cap.to_string()),
    ]
    .into_iter()
    .collect();
    fill(&templates.system_template, &values)
}

/// The three parts of a user message, kept apart so audits can tell the
/// observation text from the fixed question.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UserMessageParts {
    pub self_part: String,
    pub other_parts: Vec<String>,
    pub question_part: String,
}

impl UserMessageParts {
    pub fn joined(&self) -> String {
        let mut s = self.self_part.clone();
        for o in &self.other_parts {
            s.push_str(o);
        }
        s.push_str(&self.question_part);
        s
    }
}

pub fn render_other(other: &OtherVehicle, templates: &PromptTemplateSet) -> Result<String, TemplateError> {
    let values: BTreeMap<&str, String> = [("color", other.color.clone()), ("position", other.position.to_string())]
        .into_iter()
        .collect();
    fill(&templates.other_template, &values)
}

fn action_choices(legal: &BTreeSet<Action>) -> String {
    let labels: Vec<&str> = legal.iter().map(|a| a.label()).collect();
    match labels.len() {
        0 => String::new(),
        1 => labels[0].to_owned(),
        n => format!("{} or {}", labels[..n - 1].join(", "), labels[n - 1]),
    }
}

pub fn render_user_parts<R: RewardScalar>(
    obs: &Observation<R>,
    templates: &PromptTemplateSet,
) -> Result<UserMessageParts, TemplateError> {
    let self_values: BTreeMap<&str, String> = [
        ("color", obs.self_color.clone()),
        ("position", obs.self_position.to_string()),
        ("cumulative_reward", obs.self_cumulative_reward.to_string()),
        ("time_step", obs.time_step.to_string()),
    ]
    .into_iter()
    .collect();
    let self_part = fill(&templates.self_template, &self_values)?;

    let mut others = obs.others.clone();
    others.sort();
    let other_parts = others
        .iter()
        .map(|o| render_other(o, templates))
        .collect::<Result<Vec<_>, _>>()?;

    let question_values: BTreeMap<&str, String> = [
        ("color", obs.self_color.clone()),
        ("time_step", obs.time_step.to_string()),
        ("actions", action_choices(&obs.legal)),
    ]
    .into_iter()
    .collect();
    let question_part = fill(&templates.question_template, &question_values)?;
    Ok(UserMessageParts {
        self_part,
        other_parts,
        question_part,
    })
}

pub fn render_user<R: RewardScalar>(
    obs: &Observation<R>,
    templates: &PromptTemplateSet,
) -> Result<String, TemplateError> {
    Ok(render_user_parts(obs, templates)?.joined())
}

pub fn render_prompt<R: RewardScalar>(
    obs: &Observation<R>,
    spec: &ScenarioSpec<R>,
    templates: &PromptTemplateSet,
) -> Result<RenderedPrompt, TemplateError> {
    Ok(RenderedPrompt {
        agent_id: obs.self_id.clone(),
        time_step: obs.time_step,
        system_message: render_system(spec, templates)?,
        user_message: render_user(obs, templates)?,
    })
}
