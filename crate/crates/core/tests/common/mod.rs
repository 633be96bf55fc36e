//! Fixtures and independent oracles shared by the integration tests.
#![allow(dead_code)]

use std::collections::{HashSet, VecDeque};

use memloop::backends::FnBackend;
use memloop::environments::KeyDoorWorld;
use memloop::memory::{Experience, Feedback, MemoryState, Outcome, PolicyTag};
use memloop::retrieval::{RetrievalConfig, ScoredEntry};
use memloop::Result;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

pub const SEP: &str = "==================================================";

pub fn random_unit<R: Rng>(rng: &mut R, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-9 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// Memory with `n` entries; roughly one in five repeats an earlier vector
/// so that exact score ties occur.
pub fn random_memory<R: Rng>(rng: &mut R, n: usize, dim: usize, policy: PolicyTag) -> MemoryState {
    let mut m = MemoryState::new(policy).with_ingest_failures(true);
    let mut pool: Vec<Vec<f64>> = Vec::new();
    for t in 0..n {
        let v = if !pool.is_empty() && rng.gen_bool(0.2) {
            pool[rng.gen_range(0..pool.len())].clone()
        } else {
            random_unit(rng, dim)
        };
        pool.push(v.clone());
        let feedback = if rng.gen_bool(0.3) {
            Feedback::failure(0.0)
        } else {
            Feedback::success()
        };
        let exp = Experience {
            task_input: format!("task {t}"),
            prediction: format!("prediction {t}"),
            feedback,
        };
        m.evolve(exp, v, t as u64).unwrap();
    }
    m
}

/// Scores every eligible entry, sorts the whole list, takes k.
pub fn linear_scan_oracle(m: &MemoryState, query: &[f64], cfg: &RetrievalConfig) -> Vec<ScoredEntry> {
    let mut all: Vec<ScoredEntry> = m
        .entries()
        .iter()
        .filter(|e| e.active)
        .filter(|e| !(cfg.exclude_failures && e.feedback.outcome == Outcome::Failure))
        .map(|e| {
            let s: f64 = query.iter().zip(&e.embedding).map(|(a, b)| a * b).sum();
            ScoredEntry {
                entry_id: e.id,
                score: s.clamp(-1.0, 1.0),
            }
        })
        .filter(|s| cfg.min_score.is_none_or(|m| s.score >= m))
        .collect();
    all.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap().then(b.entry_id.cmp(&a.entry_id)));
    all.truncate(cfg.k);
    all
}

pub const KEYDOOR_ROOMS: [&str; 8] = [
    "hall", "kitchen", "library", "cellar", "study", "garden", "attic", "pantry",
];

/// Shortest action sequence that opens the chest, by breadth-first search
/// over cloned world states using the full command alphabet.
pub fn bfs_plan(world: &KeyDoorWorld) -> Option<Vec<String>> {
    let mut alphabet: Vec<String> = KEYDOOR_ROOMS.iter().map(|r| format!("go {r}")).collect();
    alphabet.push("go vault".into());
    alphabet.extend(["take key", "unlock door", "open chest"].map(String::from));

    let mut seen = HashSet::new();
    let mut queue = VecDeque::new();
    seen.insert(world.clone());
    queue.push_back((world.clone(), Vec::<String>::new()));
    while let Some((w, path)) = queue.pop_front() {
        if w.is_done() {
            return Some(path);
        }
        for a in &alphabet {
            let mut next = w.clone();
            next.step(a);
            if seen.insert(next.clone()) {
                let mut p = path.clone();
                p.push(a.clone());
                queue.push_back((next, p));
            }
        }
    }
    None
}

/// Text between a section heading and the next section in a multi-turn
/// prompt.
pub fn section<'a>(prompt: &'a str, heading: &str) -> &'a str {
    let head = format!("{SEP}\n{heading}\n{SEP}\n");
    let start = match prompt.find(&head) {
        Some(i) => i + head.len(),
        None => return "",
    };
    let rest = &prompt[start..];
    let end = rest.find(&format!("\n\n{SEP}\n")).unwrap_or(rest.len());
    &rest[..end]
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParsedExperience {
    pub goal: String,
    pub trajectory: String,
    pub correctness: String,
}

/// Parses `[Experience #i]` blocks from either template.
pub fn parse_experiences(prompt: &str) -> Vec<ParsedExperience> {
    let mut out = Vec::new();
    for block in prompt.split("[Experience #").skip(1) {
        let mut goal = None;
        let mut traj = None;
        let mut corr = None;
        for line in block.lines().skip(1) {
            if let Some(g) = line.strip_prefix("Goal: ") {
                goal.get_or_insert(g.to_string());
            } else if let Some(t) = line.strip_prefix("Trajectory: ") {
                traj.get_or_insert(t.to_string());
            } else if let Some(c) = line.strip_prefix("Correctness: ") {
                corr.get_or_insert(c.to_string());
            }
        }
        if let (Some(goal), Some(trajectory), Some(correctness)) = (goal, traj, corr) {
            out.push(ParsedExperience {
                goal,
                trajectory,
                correctness,
            });
        }
    }
    out
}

fn room_in(observation: &str) -> Option<String> {
    let rest = observation.split("You are in the ").nth(1)?;
    Some(rest.split('.').next()?.to_string())
}

/// Removes observation-only commands and loop-erases the walks between
/// milestones, given the start room.
pub fn distill(trajectory: &str, start: &str) -> Vec<String> {
    let mut plan = Vec::new();
    let mut walk: Vec<String> = vec![start.to_string()];
    for action in trajectory.split("; ") {
        if let Some(room) = action.strip_prefix("go ") {
            if let Some(pos) = walk.iter().position(|r| r == room) {
                walk.truncate(pos + 1);
            } else {
                walk.push(room.to_string());
            }
        } else if action == "check valid actions" || action == "inventory" {
            continue;
        } else {
            plan.extend(walk.iter().skip(1).map(|r| format!("go {r}")));
            let here = walk.last().unwrap().clone();
            walk = vec![here];
            plan.push(action.to_string());
        }
    }
    plan
}

/// Heuristic explorer: checks valid actions before every move, takes any
/// milestone action offered, else walks to an unvisited neighbour or keeps
/// heading away from the room it came from.
pub fn explore(history: &[&str]) -> String {
    let last_action = history.iter().rev().find_map(|l| l.strip_prefix("Action: "));
    let last_obs = history
        .iter()
        .rev()
        .find_map(|l| l.strip_prefix("Observation: "))
        .unwrap_or("");
    if last_action != Some("check valid actions") {
        return "check valid actions".into();
    }
    let valid: Vec<&str> = last_obs
        .strip_prefix("Valid actions: ")
        .unwrap_or("")
        .trim_end_matches('.')
        .split(", ")
        .collect();
    for m in ["open chest", "go vault", "unlock door", "take key"] {
        if valid.contains(&m) {
            return m.into();
        }
    }
    let rooms: Vec<String> = history
        .iter()
        .filter_map(|l| l.strip_prefix("Observation: "))
        .filter_map(room_in)
        .collect();
    let prev = rooms.len().checked_sub(2).map(|i| rooms[i].clone());
    let exits: Vec<&str> = valid.iter().filter_map(|a| a.strip_prefix("go ")).collect();
    if let Some(r) = exits.iter().find(|r| !rooms.iter().any(|v| v == *r)) {
        return format!("go {r}");
    }
    if let Some(r) = exits.iter().find(|r| Some(r.to_string()) != prev) {
        return format!("go {r}");
    }
    format!("go {}", exits.first().copied().unwrap_or("hall"))
}

/// Simulated model for KeyDoor prompts: replays a distilled successful
/// trajectory for the same goal when one is in the prompt, otherwise
/// explores.
pub fn replay_or_explore(prompt: &str) -> Result<String> {
    let goal = section(prompt, "YOUR CURRENT TASK")
        .lines()
        .next()
        .and_then(|l| l.strip_prefix("Goal: "))
        .unwrap_or("")
        .to_string();
    let history: Vec<&str> = section(prompt, "RECENT HISTORY").lines().collect();
    let start = history
        .first()
        .and_then(|l| l.strip_prefix("Observation: "))
        .and_then(room_in)
        .unwrap_or_else(|| "hall".into());
    let taken = history.iter().filter(|l| l.starts_with("Action: ")).count();
    let reuse = parse_experiences(section(prompt, "RELEVANT EXPERIENCE FROM SIMILAR TASKS"))
        .into_iter()
        .find(|e| e.goal == goal && e.correctness == "success");
    if let Some(exp) = reuse {
        let plan = distill(&exp.trajectory, &start);
        if let Some(next) = plan.get(taken) {
            return Ok(format!("Action: {next}"));
        }
    }
    Ok(format!("Action: {}", explore(&history)))
}

pub fn keydoor_agent() -> FnBackend {
    FnBackend::new("replay-or-explore", replay_or_explore)
}

pub fn spec(run_id: &str, policy: PolicyTag) -> memloop::config::StreamSpec {
    let mut s = memloop::config::StreamSpec::new(
        run_id,
        policy,
        memloop::config::BackendConfig::scripted("scripted", "rules.json"),
    );
    s.harness.record_wall_time = false;
    s
}

/// Question asked by a single-turn or multi-turn prompt.
pub fn question(prompt: &str) -> String {
    if let Some(rest) = prompt.split("\nQuestion: ").nth(1) {
        return rest.lines().next().unwrap_or("").to_string();
    }
    section(prompt, "YOUR CURRENT TASK")
        .lines()
        .next()
        .and_then(|l| l.strip_prefix("Goal: "))
        .unwrap_or("")
        .to_string()
}

/// Answers correctly only when the prompt holds a successful experience for
/// the same goal; otherwise gives a fixed wrong answer.
pub fn reuse_only_backend() -> FnBackend {
    FnBackend::new("reuse-only", |prompt| {
        let q = question(prompt);
        let hit = parse_experiences(prompt)
            .into_iter()
            .find(|e| e.goal == q && e.correctness == "success");
        Ok(match hit {
            Some(e) => format!("Rationale: seen before\nFinal Answer: {}", e.trajectory),
            None => "Rationale: no memory\nFinal Answer: unknown".to_string(),
        })
    })
}
