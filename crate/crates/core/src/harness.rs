//! Stream runner: orders tasks, runs search / synthesize / evolve per task,
//! grades, and persists results, prompts and checkpoints.

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use tracing::{debug, info};

use crate::agent::{act_once, run_step, synthesize_exprag, AgentStepState, ModeSetting, StepContext, StepOutcome};
use crate::backends::ModelBackend;
use crate::config::{StreamOrder, StreamSpec};
use crate::environments::{
    grade_single_turn, run_episode, EnvKind, TaskRecord, KEYDOOR_DEMONSTRATION, KEYDOOR_INSTRUCTIONS,
};
use crate::error::{Error, Result};
use crate::memory::{Experience, Feedback, MemoryState, Outcome, PolicyTag};
use crate::prompt::extract_final_answer;
use crate::retrieval::{top_k, Embedder};
use crate::snapshot;

pub const RESULTS_FILE: &str = "results.jsonl";
pub const SNAPSHOT_FILE: &str = "memory.snapshot.jsonl";
pub const CONFIG_FILE: &str = "config.resolved.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const PROMPTS_DIR: &str = "prompts";

pub const QA_INSTRUCTIONS: &str = "Answer the question given as the goal of the current task. \
Respond with Action: <your final answer>.";

/// Orders a task list. Sorted orderings are stable; shuffling is a seeded
/// Fisher-Yates permutation.
pub fn build_stream(mut tasks: Vec<TaskRecord>, ordering: StreamOrder) -> Result<Vec<TaskRecord>> {
    let sorted = matches!(ordering, StreamOrder::EasyToHard | StreamOrder::HardToEasy);
    if sorted {
        if let Some(t) = tasks.iter().find(|t| t.difficulty.is_none()) {
            return Err(Error::InvalidStream(format!(
                "task `{}` has no difficulty; required for {ordering}",
                t.id
            )));
        }
    }
    let diff = |t: &TaskRecord| t.difficulty.unwrap_or(0.0);
    match ordering {
        StreamOrder::Given => {}
        StreamOrder::EasyToHard => tasks.sort_by(|a, b| diff(a).total_cmp(&diff(b))),
        StreamOrder::HardToEasy => tasks.sort_by(|a, b| diff(b).total_cmp(&diff(a))),
        StreamOrder::Shuffled(seed) => tasks.shuffle(&mut ChaCha8Rng::seed_from_u64(seed)),
    }
    Ok(tasks)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskResult {
    pub task_index: usize,
    pub task_id: String,
    pub env: EnvKind,
    pub prediction: String,
    pub feedback: Feedback,
    pub steps_taken: usize,
    pub backend_calls: usize,
    pub malformed_outputs: usize,
    pub retrieved_ids: Vec<u64>,
    pub pruned_ids: Vec<u64>,
    pub memory_size_after: usize,
    pub wall_time: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Checkpoint {
    completed: usize,
    backend_state: Option<Value>,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct RunControl {
    /// Stop (with a checkpoint) once this many tasks have completed.
    pub stop_after: Option<usize>,
    /// Continue from the run directory's last checkpoint.
    pub resume: bool,
    /// Keep every rendered prompt in [`StreamRun::prompts`].
    pub collect_prompts: bool,
}

#[derive(Debug, Clone)]
pub struct StreamRun {
    pub results: Vec<TaskResult>,
    pub memory: MemoryState,
    /// True when every task in the stream has a result.
    pub finished: bool,
    pub prompts: Vec<String>,
}

pub struct StreamRunner<'a> {
    spec: &'a StreamSpec,
    backend: &'a dyn ModelBackend,
    embedder: &'a dyn Embedder,
    run_dir: Option<PathBuf>,
}

struct TaskRun {
    result: TaskResult,
    prompts: Vec<String>,
}

/// Accumulates what happens while the agent acts on one task.
#[derive(Default)]
struct Tally {
    calls: usize,
    malformed: usize,
    pruned: Vec<u64>,
    prompts: Vec<String>,
}

impl Tally {
    fn absorb(&mut self, out: StepOutcome) -> String {
        self.calls += out.backend_calls;
        self.malformed += out.malformed;
        self.pruned.extend(out.pruned_ids);
        self.prompts.extend(out.prompts);
        out.act
    }
}

fn new_memory(spec: &StreamSpec) -> MemoryState {
    MemoryState::new(spec.policy)
        .with_capacity(spec.memory.capacity)
        .with_ingest_failures(spec.memory.ingest_failures)
}

impl<'a> StreamRunner<'a> {
    pub fn new(spec: &'a StreamSpec, backend: &'a dyn ModelBackend, embedder: &'a dyn Embedder) -> Self {
        Self {
            spec,
            backend,
            embedder,
            run_dir: None,
        }
    }

    /// Persist results, prompts and checkpoints under `dir`.
    pub fn with_run_dir(mut self, dir: impl Into<PathBuf>) -> Self {
        self.run_dir = Some(dir.into());
        self
    }

    pub fn run(&self, tasks: &[TaskRecord]) -> Result<StreamRun> {
        self.run_with(tasks, RunControl::default())
    }

    pub fn run_with(&self, tasks: &[TaskRecord], control: RunControl) -> Result<StreamRun> {
        self.spec.validate()?;
        for t in tasks {
            t.validate()?;
        }
        let stream = build_stream(tasks.to_vec(), self.spec.ordering)?;

        let (mut memory, mut results) = match (&self.run_dir, control.resume) {
            (Some(dir), true) => self.load_checkpoint(dir)?,
            (Some(dir), false) => {
                self.init_run_dir(dir)?;
                (new_memory(self.spec), Vec::new())
            }
            (None, true) => return Err(Error::Config("resume needs a run directory".into())),
            (None, false) => (new_memory(self.spec), Vec::new()),
        };
        if results.len() > stream.len() {
            return Err(Error::Snapshot(format!(
                "checkpoint covers {} tasks but the stream has {}",
                results.len(),
                stream.len()
            )));
        }

        let mut results_file = match &self.run_dir {
            Some(dir) => {
                let path = dir.join(RESULTS_FILE);
                let f = OpenOptions::new()
                    .append(true)
                    .open(&path)
                    .map_err(|e| Error::io(&path, e))?;
                Some((BufWriter::new(f), path))
            }
            None => None,
        };

        let mut prompts = Vec::new();
        let every = self.spec.harness.checkpoint_every;
        let start = results.len();
        for (index, task) in stream.iter().enumerate().skip(start) {
            if control.stop_after.is_some_and(|n| results.len() >= n) {
                break;
            }
            let run = self.run_task(index, task, &mut memory)?;
            if let Some(dir) = &self.run_dir {
                if self.spec.harness.record_prompts {
                    write_prompts(dir, index, &run.prompts)?;
                }
            }
            if let Some((w, path)) = results_file.as_mut() {
                let line = serde_json::to_string(&run.result)?;
                writeln!(w, "{line}")
                    .and_then(|_| w.flush())
                    .map_err(|e| Error::io(&*path, e))?;
            }
            debug!(task = %run.result.task_id, outcome = %run.result.feedback.outcome, "task done");
            if control.collect_prompts {
                prompts.extend(run.prompts);
            }
            results.push(run.result);
            if results.len() % every == 0 {
                self.checkpoint(&memory, results.len())?;
            }
        }
        self.checkpoint(&memory, results.len())?;
        let finished = results.len() == stream.len();
        info!(run_id = %self.spec.run_id, completed = results.len(), total = stream.len(), "stream stopped");
        Ok(StreamRun {
            results,
            memory,
            finished,
            prompts,
        })
    }

    fn init_run_dir(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir.join(PROMPTS_DIR)).map_err(|e| Error::io(dir, e))?;
        let cfg = serde_json::to_string_pretty(self.spec)?;
        fs::write(dir.join(CONFIG_FILE), cfg + "\n").map_err(|e| Error::io(dir.join(CONFIG_FILE), e))?;
        File::create(dir.join(RESULTS_FILE)).map_err(|e| Error::io(dir.join(RESULTS_FILE), e))?;
        Ok(())
    }

    fn checkpoint(&self, memory: &MemoryState, completed: usize) -> Result<()> {
        let Some(dir) = &self.run_dir else { return Ok(()) };
        snapshot::save(memory, &dir.join(SNAPSHOT_FILE))?;
        let cp = Checkpoint {
            completed,
            backend_state: self.backend.save_state(),
        };
        snapshot::write_atomic(&dir.join(CHECKPOINT_FILE), serde_json::to_string(&cp)?.as_bytes())
    }

    fn load_checkpoint(&self, dir: &Path) -> Result<(MemoryState, Vec<TaskResult>)> {
        let cp_path = dir.join(CHECKPOINT_FILE);
        let text = fs::read_to_string(&cp_path).map_err(|e| Error::io(&cp_path, e))?;
        let cp: Checkpoint = serde_json::from_str(&text)?;
        let memory = snapshot::load(&dir.join(SNAPSHOT_FILE))?;
        if let Some(state) = &cp.backend_state {
            self.backend.restore_state(state)?;
        }
        // results written after the checkpoint are recomputed
        let mut results = read_results(&dir.join(RESULTS_FILE))?;
        if results.len() < cp.completed {
            return Err(Error::Snapshot(format!(
                "checkpoint covers {} tasks but results.jsonl has {}",
                cp.completed,
                results.len()
            )));
        }
        results.truncate(cp.completed);
        let mut body = String::new();
        for r in &results {
            body.push_str(&serde_json::to_string(r)?);
            body.push('\n');
        }
        snapshot::write_atomic(&dir.join(RESULTS_FILE), body.as_bytes())?;
        info!(completed = cp.completed, "resuming from checkpoint");
        Ok((memory, results))
    }

    fn retrieve(&self, memory: &MemoryState, query: &[f64]) -> Result<Vec<u64>> {
        let cfg = &self.spec.retrieval;
        let recent = |n: usize| -> Vec<u64> {
            let mut ids: Vec<u64> = memory
                .active_entries()
                .rev()
                .filter(|e| !(cfg.exclude_failures && e.feedback.outcome == Outcome::Failure))
                .take(n)
                .map(|e| e.id)
                .collect();
            ids.reverse();
            ids
        };
        Ok(match self.spec.policy {
            PolicyTag::Baseline => Vec::new(),
            PolicyTag::History => recent(self.spec.memory.history_window),
            PolicyTag::ExpRecent => recent(cfg.k),
            PolicyTag::ExpRag | PolicyTag::ReMem => {
                top_k(memory, query, cfg)?.into_iter().map(|s| s.entry_id).collect()
            }
        })
    }

    fn run_task(&self, index: usize, task: &TaskRecord, memory: &mut MemoryState) -> Result<TaskRun> {
        let started = Instant::now();
        let query = self.embedder.embed(&task.input)?;
        let retrieved = self.retrieve(memory, &query)?;
        let mut tally = Tally::default();

        let (prediction, feedback, steps) = match task.env {
            EnvKind::SingleTurnQa => self.solve_qa(task, memory, &retrieved, &mut tally)?,
            EnvKind::KeyDoor => self.solve_key_door(task, memory, &retrieved, &mut tally)?,
        };

        if feedback.is_success() {
            let kept: Vec<u64> = retrieved
                .iter()
                .copied()
                .filter(|id| !tally.pruned.contains(id))
                .collect();
            memory.reward(&kept);
        }
        if feedback.outcome.is_graded() {
            let exp = Experience {
                task_input: task.input.clone(),
                prediction: prediction.clone(),
                feedback: feedback.clone(),
            };
            memory.evolve(exp, query, index as u64)?;
        }

        let wall_time = if self.spec.harness.record_wall_time {
            started.elapsed().as_secs_f64()
        } else {
            0.0
        };
        Ok(TaskRun {
            result: TaskResult {
                task_index: index,
                task_id: task.id.clone(),
                env: task.env,
                prediction,
                feedback,
                steps_taken: steps,
                backend_calls: tally.calls,
                malformed_outputs: tally.malformed,
                retrieved_ids: retrieved,
                pruned_ids: tally.pruned,
                memory_size_after: memory.active_count(),
                wall_time,
            },
            prompts: tally.prompts,
        })
    }

    fn solve_qa(
        &self,
        task: &TaskRecord,
        memory: &mut MemoryState,
        retrieved: &[u64],
        tally: &mut Tally,
    ) -> Result<(String, Feedback, usize)> {
        let expected = task.expected.as_deref().unwrap_or_default();
        let agent = &self.spec.agent;
        let ctx = StepContext {
            instructions: QA_INSTRUCTIONS,
            demonstrations: "",
            history: &[],
        };
        let answer = if self.spec.policy == PolicyTag::ReMem {
            let mut step = AgentStepState::new(task.input.clone(), retrieved, agent.max_ops);
            run_step(&mut step, memory, self.backend, &ctx, agent).map(|o| extract_final_answer(&tally.absorb(o)))
        } else if agent.mode == ModeSetting::MultiTurn {
            act_once(&task.input, memory, retrieved, self.backend, &ctx, agent)
                .map(|o| extract_final_answer(&tally.absorb(o)))
        } else {
            synthesize_exprag(&task.input, memory, retrieved, self.backend, agent.prompt_budget).map(|s| {
                tally.calls += 1;
                tally.prompts.push(s.prompt);
                s.answer
            })
        };
        match answer {
            Ok(a) => {
                let fb = grade_single_turn(&a, expected);
                Ok((a, fb, 1))
            }
            Err(Error::Backend(msg)) => Ok((String::new(), Feedback::ungraded(msg), 0)),
            Err(e) => Err(e),
        }
    }

    fn solve_key_door(
        &self,
        task: &TaskRecord,
        memory: &mut MemoryState,
        retrieved: &[u64],
        tally: &mut Tally,
    ) -> Result<(String, Feedback, usize)> {
        let agent = &self.spec.agent;
        let remem = self.spec.policy == PolicyTag::ReMem;
        let mut working: Vec<u64> = retrieved.to_vec();
        let mut fatal = None;
        let outcome = run_episode(
            task,
            &mut |view| {
                let ctx = StepContext {
                    instructions: KEYDOOR_INSTRUCTIONS,
                    demonstrations: KEYDOOR_DEMONSTRATION,
                    history: view.history,
                };
                let out = if remem {
                    let mut step = AgentStepState::new(view.goal, &working, agent.max_ops);
                    let out = run_step(&mut step, memory, self.backend, &ctx, agent);
                    working = step.entry_ids();
                    out
                } else {
                    act_once(view.goal, memory, &working, self.backend, &ctx, agent)
                };
                match out {
                    Ok(o) => Ok(tally.absorb(o)),
                    Err(e @ Error::Backend(_)) => Err(e),
                    Err(e) => {
                        let msg = e.to_string();
                        fatal = Some(e);
                        Err(Error::Backend(msg))
                    }
                }
            },
            self.spec.harness.step_cap,
        )?;
        if let Some(e) = fatal {
            return Err(e);
        }
        let prediction = outcome
            .transcript
            .iter()
            .map(|(a, _)| a.as_str())
            .collect::<Vec<_>>()
            .join("; ");
        Ok((prediction, outcome.feedback, outcome.steps_taken))
    }
}

fn write_prompts(dir: &Path, index: usize, prompts: &[String]) -> Result<()> {
    for (call, p) in prompts.iter().enumerate() {
        let path = dir.join(PROMPTS_DIR).join(format!("task{index:05}_call{call:03}.txt"));
        fs::write(&path, p).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

pub fn read_results(path: &Path) -> Result<Vec<TaskResult>> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for line in BufReader::new(f).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}

pub fn read_config(dir: &Path) -> Result<StreamSpec> {
    let path = dir.join(CONFIG_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Ok(serde_json::from_str(&text)?)
}
