//! Prompt assembly from the versioned template assets, with budget-driven
//! truncation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MULTI_TURN_TEMPLATE: &str = include_str!("../assets/multi_turn.v1.txt");
pub const SINGLE_TURN_TEMPLATE: &str = include_str!("../assets/single_turn.v1.txt");

pub const DEFAULT_PROMPT_BUDGET: usize = 8_000;

/// Placeholder rendered for a section with no content.
pub const EMPTY_SECTION: &str = "(none)";
const TRUNCATION_MARKER: &str = " [truncated]";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptMode {
    MultiTurn,
    SingleTurn,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Section {
    Instructions,
    Demonstrations,
    Experiences,
    Task,
    History,
    OutputFormat,
}

impl Section {
    fn placeholder(self) -> Option<&'static str> {
        match self {
            Section::Instructions => Some("instructions"),
            Section::Demonstrations => Some("demonstrations"),
            Section::Experiences => Some("experiences"),
            Section::Task => Some("task"),
            Section::History => Some("history"),
            Section::OutputFormat => None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PromptInput<'a> {
    pub mode: PromptMode,
    pub instructions: &'a str,
    pub demonstrations: &'a str,
    pub task_input: &'a str,
    /// `(display index, rendered experience)`, indices contiguous from 1.
    pub experiences: &'a [(usize, String)],
    pub history: &'a [String],
    pub budget: usize,
}

#[derive(Debug, Clone)]
pub struct PromptContext {
    /// Section bodies in template order, after truncation.
    pub sections: Vec<(Section, String)>,
    pub rendered: String,
    pub truncated: bool,
}

/// Working copy of the truncatable parts. `None` means the part was cut
/// away entirely.
struct Parts {
    instructions: Option<String>,
    demonstrations: Option<String>,
    bodies: Vec<String>,
    history: Vec<String>,
}

fn or_none(s: &str) -> String {
    if s.trim().is_empty() {
        EMPTY_SECTION.to_string()
    } else {
        s.to_string()
    }
}

fn shrink(text: &str, over: usize) -> Option<String> {
    let n = text.chars().count();
    let target = n.saturating_sub(over);
    let marker = TRUNCATION_MARKER.chars().count();
    if target > marker {
        let mut s: String = text.chars().take(target - marker).collect();
        s.push_str(TRUNCATION_MARKER);
        Some(s)
    } else {
        None
    }
}

fn substitute(template: &str, values: &[(Section, String)]) -> String {
    let mut out = String::with_capacity(template.len() + values.iter().map(|(_, v)| v.len()).sum::<usize>());
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let after = &rest[open + 1..];
        let hit = after.find('}').and_then(|close| {
            let name = &after[..close];
            values
                .iter()
                .find(|(s, _)| s.placeholder() == Some(name))
                .map(|(_, v)| (v, close))
        });
        match hit {
            Some((v, close)) => {
                out.push_str(v);
                rest = &after[close + 1..];
            }
            None => {
                out.push('{');
                rest = after;
            }
        }
    }
    out.push_str(rest);
    out
}

fn template(mode: PromptMode) -> &'static str {
    let t = match mode {
        PromptMode::MultiTurn => MULTI_TURN_TEMPLATE,
        PromptMode::SingleTurn => SINGLE_TURN_TEMPLATE,
    };
    t.strip_suffix('\n').unwrap_or(t)
}

fn output_format(mode: PromptMode) -> &'static str {
    let t = template(mode);
    let heading = match mode {
        PromptMode::MultiTurn => "OUTPUT FORMAT\n",
        PromptMode::SingleTurn => "Provide your output",
    };
    t.find(heading).map_or(t, |pos| &t[pos..])
}

fn experience_block(index: usize, body: &str) -> String {
    format!("[Experience #{index}]\n{body}")
}

impl Parts {
    fn sections(&self, input: &PromptInput<'_>) -> Vec<(Section, String)> {
        let experiences = if input.experiences.is_empty() {
            EMPTY_SECTION.to_string()
        } else {
            input
                .experiences
                .iter()
                .zip(&self.bodies)
                .map(|((i, _), body)| experience_block(*i, body))
                .collect::<Vec<_>>()
                .join("\n\n")
        };
        let mut out = Vec::with_capacity(6);
        if input.mode == PromptMode::MultiTurn {
            out.push((Section::Instructions, self.instructions.clone().unwrap_or_default()));
            out.push((Section::Demonstrations, self.demonstrations.clone().unwrap_or_default()));
        }
        out.push((Section::Experiences, experiences));
        out.push((Section::Task, input.task_input.to_string()));
        if input.mode == PromptMode::MultiTurn {
            let history = if self.history.is_empty() {
                EMPTY_SECTION.to_string()
            } else {
                self.history.join("\n")
            };
            out.push((Section::History, history));
        }
        out.push((Section::OutputFormat, output_format(input.mode).to_string()));
        out
    }

    /// Cuts the next truncatable part by up to `over` characters. Returns
    /// false when nothing is left to cut.
    fn cut(&mut self, over: usize) -> bool {
        if let Some(d) = self.demonstrations.take() {
            self.demonstrations = shrink(&d, over);
            return true;
        }
        if let Some(body) = self.bodies.iter_mut().rev().find(|b| !b.is_empty()) {
            *body = shrink(body, over).unwrap_or_default();
            return true;
        }
        if !self.history.is_empty() {
            self.history.remove(0);
            return true;
        }
        if let Some(i) = self.instructions.take() {
            self.instructions = shrink(&i, over);
            return true;
        }
        false
    }
}

/// Renders the prompt for `input.mode`, truncating demonstrations first,
/// then experience bodies from the last one backwards, then the oldest
/// history lines, then instructions. The task and output-format sections are
/// never cut.
pub fn build_prompt(input: &PromptInput<'_>) -> Result<PromptContext> {
    for (pos, (i, _)) in input.experiences.iter().enumerate() {
        if *i != pos + 1 {
            return Err(Error::InvalidInput(format!(
                "experience indices must be contiguous from 1; found {i} at position {}",
                pos + 1
            )));
        }
    }
    let mut parts = Parts {
        instructions: Some(or_none(input.instructions)),
        demonstrations: Some(or_none(input.demonstrations)),
        bodies: input.experiences.iter().map(|(_, b)| b.clone()).collect(),
        history: input.history.to_vec(),
    };
    let tpl = template(input.mode);
    let mut truncated = false;
    loop {
        let sections = parts.sections(input);
        let rendered = substitute(tpl, &sections);
        let len = rendered.chars().count();
        if len <= input.budget || !parts.cut(len - input.budget) {
            return Ok(PromptContext {
                sections,
                rendered,
                truncated,
            });
        }
        truncated = true;
    }
}

/// Extracts the answer after the last `Final Answer:` marker, falling back to
/// the whole trimmed text.
pub fn extract_final_answer(text: &str) -> String {
    const MARKER: &str = "final answer:";
    let lower = text.to_ascii_lowercase();
    match lower.rfind(MARKER) {
        Some(pos) => text[pos + MARKER.len()..].trim().to_string(),
        None => text.trim().to_string(),
    }
}
