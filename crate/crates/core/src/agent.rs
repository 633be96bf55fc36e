//! The Think / Refine / Act step loop and the one-shot retrieval synthesis
//! path.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::backends::ModelBackend;
use crate::error::{Error, Result};
use crate::memory::MemoryState;
use crate::operation::{parse_operation, AgentOperation};
use crate::prompt::{build_prompt, extract_final_answer, PromptInput, PromptMode, DEFAULT_PROMPT_BUDGET};

pub const DEFAULT_MAX_OPS: usize = 6;
pub const DEFAULT_PRUNE_DEACTIVATE_THRESHOLD: i64 = -2;

/// Which template non-ReMem policies use for single-turn tasks. The step
/// loop always uses the multi-turn template, the only one that carries the
/// operation grammar.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModeSetting {
    #[default]
    Auto,
    MultiTurn,
    SingleTurn,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AgentConfig {
    pub max_ops: usize,
    pub prompt_budget: usize,
    pub mode: ModeSetting,
    pub prune_deactivate_threshold: i64,
}

impl Default for AgentConfig {
    fn default() -> Self {
        Self {
            max_ops: DEFAULT_MAX_OPS,
            prompt_budget: DEFAULT_PROMPT_BUDGET,
            mode: ModeSetting::Auto,
            prune_deactivate_threshold: DEFAULT_PRUNE_DEACTIVATE_THRESHOLD,
        }
    }
}

impl AgentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_ops == 0 {
            return Err(Error::Config("agent.max_ops must be at least 1".into()));
        }
        if self.prompt_budget == 0 {
            return Err(Error::Config("agent.prompt_budget must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorkingItem {
    pub display_index: usize,
    pub entry_id: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentStepState {
    pub task_input: String,
    pub working_set: Vec<WorkingItem>,
    pub trace: Vec<AgentOperation>,
    pub ops_used: usize,
    pub max_ops: usize,
}

impl AgentStepState {
    pub fn new(task_input: impl Into<String>, entry_ids: &[u64], max_ops: usize) -> Self {
        let working_set = entry_ids
            .iter()
            .enumerate()
            .map(|(i, &entry_id)| WorkingItem {
                display_index: i + 1,
                entry_id,
            })
            .collect();
        Self {
            task_input: task_input.into(),
            working_set,
            trace: Vec::new(),
            ops_used: 0,
            max_ops,
        }
    }

    pub fn entry_ids(&self) -> Vec<u64> {
        self.working_set.iter().map(|w| w.entry_id).collect()
    }

    pub fn indices_contiguous(&self) -> bool {
        self.working_set
            .iter()
            .enumerate()
            .all(|(i, w)| w.display_index == i + 1)
    }

    fn history_lines(&self) -> impl Iterator<Item = String> + '_ {
        self.trace.iter().map(|op| op.to_string())
    }
}

/// Removes the experiences at `indices` from the working set, renumbers the
/// rest, and records a prune vote against each removed entry. Returns the
/// pruned entry ids. On error nothing changes.
pub fn apply_prune(
    step: &mut AgentStepState,
    memory: &mut MemoryState,
    indices: &BTreeSet<usize>,
    deactivate_at: i64,
) -> Result<Vec<u64>> {
    AgentOperation::Prune(indices.clone()).validate(step.working_set.len())?;
    let mut pruned = Vec::with_capacity(indices.len());
    step.working_set.retain(|w| {
        let drop = indices.contains(&w.display_index);
        if drop {
            pruned.push(w.entry_id);
        }
        !drop
    });
    for (i, w) in step.working_set.iter_mut().enumerate() {
        w.display_index = i + 1;
    }
    for &id in &pruned {
        memory.penalize(id, deactivate_at);
    }
    Ok(pruned)
}

/// Fixed parts of the prompt supplied by the environment.
#[derive(Debug, Clone, Copy, Default)]
pub struct StepContext<'a> {
    pub instructions: &'a str,
    pub demonstrations: &'a str,
    /// Observation / action lines from earlier in the episode.
    pub history: &'a [String],
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct StepOutcome {
    pub act: String,
    pub backend_calls: usize,
    pub malformed: usize,
    pub pruned_ids: Vec<u64>,
    pub prompts: Vec<String>,
}

fn experiences_for(memory: &MemoryState, ids: &[u64]) -> Vec<(usize, String)> {
    ids.iter()
        .enumerate()
        .map(|(i, id)| {
            let body = memory.get(*id).map(|e| e.rendered.clone()).unwrap_or_default();
            (i + 1, body)
        })
        .collect()
}

fn render_step_prompt(
    step: &AgentStepState,
    memory: &MemoryState,
    ctx: &StepContext<'_>,
    cfg: &AgentConfig,
) -> Result<String> {
    let experiences = experiences_for(memory, &step.entry_ids());
    let history: Vec<String> = ctx.history.iter().cloned().chain(step.history_lines()).collect();
    let prompt = build_prompt(&PromptInput {
        mode: PromptMode::MultiTurn,
        instructions: ctx.instructions,
        demonstrations: ctx.demonstrations,
        task_input: &step.task_input,
        experiences: &experiences,
        history: &history,
        budget: cfg.prompt_budget,
    })?;
    Ok(prompt.rendered)
}

/// Runs one agent step: Think and Think-Prune rounds until an Action, or
/// until `max_ops` operations, in which case the last raw output becomes the
/// Action. A malformed output (or an out-of-range prune) gets one re-prompt
/// per step; after that it is coerced to an Action.
pub fn run_step(
    step: &mut AgentStepState,
    memory: &mut MemoryState,
    backend: &dyn ModelBackend,
    ctx: &StepContext<'_>,
    cfg: &AgentConfig,
) -> Result<StepOutcome> {
    run_step_observed(step, memory, backend, ctx, cfg, &mut |_| {})
}

/// [`run_step`] with a callback after every applied operation.
pub fn run_step_observed(
    step: &mut AgentStepState,
    memory: &mut MemoryState,
    backend: &dyn ModelBackend,
    ctx: &StepContext<'_>,
    cfg: &AgentConfig,
    observer: &mut dyn FnMut(&AgentStepState),
) -> Result<StepOutcome> {
    if step.max_ops == 0 {
        return Err(Error::InvalidInput("max_ops must be at least 1".into()));
    }
    let mut out = StepOutcome::default();
    let mut reprompt_left = true;
    loop {
        let prompt = render_step_prompt(step, memory, ctx, cfg)?;
        let raw = backend.complete(&prompt)?;
        out.backend_calls += 1;
        out.prompts.push(prompt);

        let parsed = parse_operation(&raw).and_then(|op| op.validate(step.working_set.len()).map(|_| op));
        let last_op = step.ops_used + 1 >= step.max_ops;
        let op = match parsed {
            Ok(op) if op.is_act() || !last_op => op,
            Ok(_) => AgentOperation::Act(raw.trim().to_string()),
            Err(_) => {
                out.malformed += 1;
                if reprompt_left {
                    reprompt_left = false;
                    continue;
                }
                AgentOperation::Act(raw.trim().to_string())
            }
        };

        step.ops_used += 1;
        match &op {
            AgentOperation::Prune(ids) => {
                let pruned = apply_prune(step, memory, ids, cfg.prune_deactivate_threshold)?;
                out.pruned_ids.extend(pruned);
            }
            AgentOperation::Act(payload) => out.act = payload.clone(),
            AgentOperation::Think(_) => {}
        }
        let done = op.is_act();
        step.trace.push(op);
        observer(step);
        if done {
            return Ok(out);
        }
    }
}

/// Single backend call on the multi-turn template. The Action payload is
/// returned; any other output is taken verbatim as the action.
pub fn act_once(
    task_input: &str,
    memory: &MemoryState,
    entry_ids: &[u64],
    backend: &dyn ModelBackend,
    ctx: &StepContext<'_>,
    cfg: &AgentConfig,
) -> Result<StepOutcome> {
    let step = AgentStepState::new(task_input, entry_ids, 1);
    let prompt = render_step_prompt(&step, memory, ctx, cfg)?;
    let raw = backend.complete(&prompt)?;
    let (act, malformed) = match parse_operation(&raw) {
        Ok(AgentOperation::Act(payload)) => (payload, 0),
        Ok(_) => (raw.trim().to_string(), 0),
        Err(_) => (raw.trim().to_string(), 1),
    };
    Ok(StepOutcome {
        act,
        backend_calls: 1,
        malformed,
        pruned_ids: Vec::new(),
        prompts: vec![prompt],
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Synthesis {
    pub answer: String,
    pub completion: String,
    pub prompt: String,
}

/// One-shot experience reuse: a single call on the single-turn template with
/// the retrieved experiences, answer taken after `Final Answer:`.
pub fn synthesize_exprag(
    task_input: &str,
    memory: &MemoryState,
    entry_ids: &[u64],
    backend: &dyn ModelBackend,
    prompt_budget: usize,
) -> Result<Synthesis> {
    let experiences = experiences_for(memory, entry_ids);
    let prompt = build_prompt(&PromptInput {
        mode: PromptMode::SingleTurn,
        instructions: "",
        demonstrations: "",
        task_input,
        experiences: &experiences,
        history: &[],
        budget: prompt_budget,
    })?
    .rendered;
    let completion = backend.complete(&prompt)?;
    Ok(Synthesis {
        answer: extract_final_answer(&completion),
        completion,
        prompt,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::{ScriptedBackend, ScriptedRule};
    use crate::memory::{Experience, Feedback, PolicyTag};

    fn memory_with(n: usize) -> MemoryState {
        let mut m = MemoryState::new(PolicyTag::ReMem);
        for t in 0..n {
            let mut v = vec![0.0; 8];
            v[t % 8] = 1.0;
            let exp = Experience {
                task_input: format!("task {t}"),
                prediction: format!("answer {t}"),
                feedback: Feedback::success(),
            };
            m.evolve(exp, v, t as u64).unwrap();
        }
        m
    }

    fn set(ids: &[usize]) -> BTreeSet<usize> {
        ids.iter().copied().collect()
    }

    #[test]
    fn prune_renumbers() {
        let mut m = MemoryState::new(PolicyTag::ReMem);
        // ids 1..=9 so e3, e7, e9 exist
        for t in 0..9 {
            let mut v = vec![0.0; 9];
            v[t] = 1.0;
            let exp = Experience {
                task_input: format!("t{t}"),
                prediction: "p".into(),
                feedback: Feedback::success(),
            };
            m.evolve(exp, v, t as u64).unwrap();
        }
        let mut step = AgentStepState::new("x", &[7, 3, 9], 6);
        let pruned = apply_prune(&mut step, &mut m, &set(&[2]), -2).unwrap();
        assert_eq!(pruned, vec![3]);
        assert_eq!(
            step.working_set,
            vec![
                WorkingItem {
                    display_index: 1,
                    entry_id: 7
                },
                WorkingItem {
                    display_index: 2,
                    entry_id: 9
                }
            ]
        );
        assert_eq!(m.get(3).unwrap().utility, -1);
    }

    #[test]
    fn full_prune_empties_working_set() {
        let mut m = memory_with(3);
        let mut step = AgentStepState::new("x", &[1, 2, 3], 6);
        apply_prune(&mut step, &mut m, &set(&[1, 2, 3]), -2).unwrap();
        assert!(step.working_set.is_empty());
    }

    #[test]
    fn out_of_range_prune_changes_nothing() {
        let mut m = memory_with(3);
        let before = m.clone();
        let mut step = AgentStepState::new("x", &[1, 2, 3], 6);
        let snapshot = step.clone();
        assert!(matches!(
            apply_prune(&mut step, &mut m, &set(&[5]), -2),
            Err(Error::InvalidPrune(_))
        ));
        assert_eq!(step, snapshot);
        assert_eq!(m, before);
    }

    #[test]
    fn immediate_action_single_call() {
        let b = ScriptedBackend::new("s", vec![ScriptedRule::always(&["Action: answer 42"])]).unwrap();
        let mut m = memory_with(0);
        let mut step = AgentStepState::new("q", &[], 6);
        let out = run_step(&mut step, &mut m, &b, &StepContext::default(), &AgentConfig::default()).unwrap();
        assert_eq!(out.act, "answer 42");
        assert_eq!(out.backend_calls, 1);
        assert_eq!(step.trace, vec![AgentOperation::Act("answer 42".into())]);
    }

    #[test]
    fn think_prune_act_sequence() {
        let b = ScriptedBackend::new(
            "s",
            vec![ScriptedRule::always(&[
                "Think: look at memory",
                "Think-Prune: 1",
                "Action: x",
            ])],
        )
        .unwrap();
        let mut m = memory_with(3);
        let mut step = AgentStepState::new("q", &[1, 2, 3], 6);
        let out = run_step(&mut step, &mut m, &b, &StepContext::default(), &AgentConfig::default()).unwrap();
        assert_eq!(step.trace.len(), 3);
        assert!(matches!(step.trace[1], AgentOperation::Prune(_)));
        assert_eq!(step.working_set.len(), 2);
        assert_eq!(out.pruned_ids, vec![1]);
        assert_eq!(out.act, "x");
        // the prune shows up in the history of the final prompt
        assert!(out.prompts[2].contains("Think: look at memory\nThink-Prune: 1"));
        assert!(!out.prompts[2].contains("Goal: task 0"));
    }

    #[test]
    fn cap_coerces_last_output() {
        let b = ScriptedBackend::new("s", vec![ScriptedRule::always(&["Think: still thinking"])]).unwrap();
        let mut m = memory_with(0);
        let cfg = AgentConfig {
            max_ops: 4,
            ..Default::default()
        };
        let mut step = AgentStepState::new("q", &[], 4);
        let out = run_step(&mut step, &mut m, &b, &StepContext::default(), &cfg).unwrap();
        assert_eq!(step.trace.len(), 4);
        assert_eq!(step.trace[3], AgentOperation::Act("Think: still thinking".into()));
        assert_eq!(out.backend_calls, 4);
    }

    #[test]
    fn malformed_gets_one_reprompt() {
        let b = ScriptedBackend::new("s", vec![ScriptedRule::always(&["hmm", "Action: ok"])]).unwrap();
        let mut m = memory_with(0);
        let mut step = AgentStepState::new("q", &[], 6);
        let out = run_step(&mut step, &mut m, &b, &StepContext::default(), &AgentConfig::default()).unwrap();
        assert_eq!(out.act, "ok");
        assert_eq!(out.malformed, 1);
        assert_eq!(out.backend_calls, 2);

        let b = ScriptedBackend::new("s", vec![ScriptedRule::always(&["hmm", "still no prefix"])]).unwrap();
        let mut step = AgentStepState::new("q", &[], 6);
        let out = run_step(&mut step, &mut m, &b, &StepContext::default(), &AgentConfig::default()).unwrap();
        assert_eq!(out.act, "still no prefix");
        assert_eq!(out.malformed, 2);
        assert_eq!(step.trace.len(), 1);
    }

    #[test]
    fn exprag_extracts_final_answer() {
        let b = ScriptedBackend::new(
            "s",
            vec![ScriptedRule::always(&[
                "Rationale: recalled quadratic formula\nFinal Answer: x=1",
            ])],
        )
        .unwrap();
        let m = memory_with(0);
        let s = synthesize_exprag("solve", &m, &[], &b, DEFAULT_PROMPT_BUDGET).unwrap();
        assert_eq!(s.answer, "x=1");
        assert!(s.prompt.contains("LOCAL EXPERIENCE MEMORIES:\n\n(none)"));

        let b = ScriptedBackend::new("s", vec![ScriptedRule::always(&["  forty two \n"])]).unwrap();
        assert_eq!(synthesize_exprag("q", &m, &[], &b, 8000).unwrap().answer, "forty two");
    }
}
