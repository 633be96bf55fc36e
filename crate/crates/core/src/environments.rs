//! Task records and the two environments: exact-match QA and the KeyDoor
//! corridor world.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::memory::Feedback;

pub const DEFAULT_STEP_CAP: usize = 30;
pub const DEFAULT_ROOMS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvKind {
    SingleTurnQa,
    KeyDoor,
}

impl EnvKind {
    pub fn is_multi_turn(self) -> bool {
        self == EnvKind::KeyDoor
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskRecord {
    pub id: String,
    pub input: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expected: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub difficulty: Option<f64>,
    #[serde(default)]
    pub domain_tag: String,
    pub env: EnvKind,
    #[serde(default, skip_serializing_if = "Map::is_empty")]
    pub env_params: Map<String, Value>,
}

impl TaskRecord {
    pub fn qa(id: impl Into<String>, input: impl Into<String>, expected: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            input: input.into(),
            expected: Some(expected.into()),
            difficulty: None,
            domain_tag: String::new(),
            env: EnvKind::SingleTurnQa,
            env_params: Map::new(),
        }
    }

    /// A KeyDoor task whose input is the world's own goal description.
    pub fn key_door(id: impl Into<String>, seed: u64, rooms: usize) -> Result<Self> {
        let world = KeyDoorWorld::new(seed, rooms)?;
        let mut env_params = Map::new();
        env_params.insert("seed".into(), Value::from(seed));
        env_params.insert("rooms".into(), Value::from(rooms));
        Ok(Self {
            id: id.into(),
            input: world.goal_text(),
            expected: None,
            difficulty: None,
            domain_tag: "key_door".into(),
            env: EnvKind::KeyDoor,
            env_params,
        })
    }

    pub fn with_difficulty(mut self, difficulty: f64) -> Self {
        self.difficulty = Some(difficulty);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.input.is_empty() {
            return Err(Error::InvalidInput(format!("task `{}` has empty input", self.id)));
        }
        match self.env {
            EnvKind::SingleTurnQa if self.expected.is_none() => Err(Error::InvalidInput(format!(
                "QA task `{}` needs an expected answer",
                self.id
            ))),
            EnvKind::KeyDoor => self.world().map(|_| ()),
            _ => Ok(()),
        }
    }

    pub fn world(&self) -> Result<KeyDoorWorld> {
        let seed = self
            .env_params
            .get("seed")
            .and_then(Value::as_u64)
            .ok_or_else(|| Error::InvalidInput(format!("KeyDoor task `{}` needs env_params.seed", self.id)))?;
        let rooms = match self.env_params.get("rooms") {
            None => DEFAULT_ROOMS,
            Some(v) => v
                .as_u64()
                .ok_or_else(|| Error::InvalidInput(format!("task `{}`: rooms must be an integer", self.id)))?
                as usize,
        };
        KeyDoorWorld::new(seed, rooms)
    }
}

/// Reads a JSON Lines task file. Blank lines are skipped.
pub fn load_tasks(path: &Path) -> Result<Vec<TaskRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut tasks = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let task: TaskRecord = serde_json::from_str(line)
            .map_err(|e| Error::InvalidInput(format!("{}:{}: {e}", path.display(), lineno + 1)))?;
        task.validate()?;
        tasks.push(task);
    }
    Ok(tasks)
}

fn normalize_answer(s: &str) -> String {
    let collapsed = s.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase();
    collapsed.trim_end_matches('.').trim_end().to_string()
}

/// Exact match after trimming, whitespace collapsing, lowercasing and
/// stripping trailing periods.
pub fn grade_single_turn(prediction: &str, expected: &str) -> Feedback {
    if normalize_answer(prediction) == normalize_answer(expected) {
        Feedback::success()
    } else {
        Feedback::failure(0.0)
    }
}

const ROOM_NAMES: [&str; 8] = [
    "hall", "kitchen", "library", "cellar", "study", "garden", "attic", "pantry",
];
const VAULT: &str = "vault";

pub const KEYDOOR_SUBGOALS: usize = 4;

pub const KEYDOOR_INSTRUCTIONS: &str =
    "You are in a house whose rooms are joined in a corridor; you can only walk to an adjacent room. \
A key lies in one room and a locked door in one room leads to a vault holding a chest. \
Commands: go <room>, take key, unlock door, open chest, check valid actions, inventory. \
The task is complete when the chest is open.";

pub const KEYDOOR_DEMONSTRATION: &str = "Example 1: Goal: Take the key from the kitchen and open the chest behind the locked door in the kitchen. | Action: go kitchen | Observation: You are in the kitchen. Exits: hall, library. A key lies here. A locked door leads to the vault.";

/// Corridor world: rooms in a line, start in the first room, key in a later
/// room, a locked door in some room that leads to the vault with the chest.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct KeyDoorWorld {
    rooms: Vec<&'static str>,
    key_room: usize,
    door_room: usize,
    /// `None` means the vault.
    location: Option<usize>,
    has_key: bool,
    key_taken: bool,
    unlocked: bool,
    chest_open: bool,
    reached_key_room: bool,
}

impl KeyDoorWorld {
    pub fn new(seed: u64, rooms: usize) -> Result<Self> {
        if !(2..=ROOM_NAMES.len()).contains(&rooms) {
            return Err(Error::InvalidInput(format!(
                "KeyDoor rooms must be in 2..={}, got {rooms}",
                ROOM_NAMES.len()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let key_room = rng.gen_range(1..rooms);
        let door_room = rng.gen_range(0..rooms);
        Ok(Self {
            rooms: ROOM_NAMES[..rooms].to_vec(),
            key_room,
            door_room,
            location: Some(0),
            has_key: false,
            key_taken: false,
            unlocked: false,
            chest_open: false,
            reached_key_room: false,
        })
    }

    pub fn goal_text(&self) -> String {
        format!(
            "Take the key from the {} and open the chest behind the locked door in the {}.",
            self.rooms[self.key_room], self.rooms[self.door_room]
        )
    }

    pub fn subgoals_done(&self) -> usize {
        [self.reached_key_room, self.key_taken, self.unlocked, self.chest_open]
            .iter()
            .filter(|b| **b)
            .count()
    }

    pub fn is_done(&self) -> bool {
        self.chest_open
    }

    fn exits(&self) -> Vec<&'static str> {
        match self.location {
            None => vec![self.rooms[self.door_room]],
            Some(i) => {
                let mut out = Vec::new();
                if i > 0 {
                    out.push(self.rooms[i - 1]);
                }
                if i + 1 < self.rooms.len() {
                    out.push(self.rooms[i + 1]);
                }
                if i == self.door_room && self.unlocked {
                    out.push(VAULT);
                }
                out
            }
        }
    }

    pub fn describe(&self) -> String {
        match self.location {
            None => {
                let chest = if self.chest_open {
                    "The chest is open."
                } else {
                    "A closed chest stands here."
                };
                format!("You are in the vault. Exits: {}. {chest}", self.rooms[self.door_room])
            }
            Some(i) => {
                let mut s = format!("You are in the {}. Exits: {}.", self.rooms[i], self.exits().join(", "));
                if i == self.key_room && !self.key_taken {
                    s.push_str(" A key lies here.");
                }
                if i == self.door_room {
                    s.push_str(if self.unlocked {
                        " An open door leads to the vault."
                    } else {
                        " A locked door leads to the vault."
                    });
                }
                s
            }
        }
    }

    pub fn valid_actions(&self) -> Vec<String> {
        let mut out: Vec<String> = self.exits().into_iter().map(|r| format!("go {r}")).collect();
        match self.location {
            Some(i) => {
                if i == self.key_room && !self.key_taken {
                    out.push("take key".into());
                }
                if i == self.door_room && self.has_key && !self.unlocked {
                    out.push("unlock door".into());
                }
            }
            None => {
                if !self.chest_open {
                    out.push("open chest".into());
                }
            }
        }
        out.push("check valid actions".into());
        out.push("inventory".into());
        out
    }

    fn enter(&mut self, loc: Option<usize>) {
        self.location = loc;
        if loc == Some(self.key_room) {
            self.reached_key_room = true;
        }
    }

    /// Applies one action and returns the observation. Unknown or
    /// inapplicable actions yield `Nothing happens.`
    pub fn step(&mut self, action: &str) -> String {
        const NOTHING: &str = "Nothing happens.";
        let line = action.lines().next().unwrap_or("");
        let cmd = line.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase();
        let cmd = cmd.trim_end_matches('.');
        if let Some(target) = cmd.strip_prefix("go ") {
            let target = target.trim_start_matches("to ").trim_start_matches("the ");
            let dest = if target == VAULT {
                (self.location == Some(self.door_room) && self.unlocked).then_some(None)
            } else {
                self.exits()
                    .contains(&target)
                    .then(|| self.rooms.iter().position(|r| *r == target))
                    .flatten()
                    .map(Some)
            };
            return match dest {
                Some(loc) => {
                    self.enter(loc);
                    self.describe()
                }
                None => NOTHING.into(),
            };
        }
        match cmd {
            "take key" if self.location == Some(self.key_room) && !self.key_taken => {
                self.key_taken = true;
                self.has_key = true;
                "You pick up the key.".into()
            }
            "unlock door" if self.location == Some(self.door_room) && self.has_key && !self.unlocked => {
                self.unlocked = true;
                self.has_key = false;
                "You unlock the door. The key stays in the lock.".into()
            }
            "open chest" if self.location.is_none() && !self.chest_open => {
                self.chest_open = true;
                "You open the chest. The task is complete.".into()
            }
            "check valid actions" => format!("Valid actions: {}.", self.valid_actions().join(", ")),
            "inventory" => {
                if self.has_key {
                    "You carry a key.".into()
                } else {
                    "You carry nothing.".into()
                }
            }
            _ => NOTHING.into(),
        }
    }
}

/// A running KeyDoor episode with its step cap.
#[derive(Debug, Clone)]
pub struct KeyDoorEpisode {
    pub world: KeyDoorWorld,
    pub cap: usize,
    pub steps: usize,
}

impl KeyDoorEpisode {
    pub fn new(world: KeyDoorWorld, cap: usize) -> Self {
        Self { world, cap, steps: 0 }
    }

    /// One environment step. `done` is set when the chest is open or the step
    /// cap is reached.
    pub fn keydoor_step(&mut self, action: &str) -> (String, bool) {
        let obs = self.world.step(action);
        self.steps += 1;
        (obs, self.world.is_done() || self.steps >= self.cap)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvOutcome {
    pub feedback: Feedback,
    pub steps_taken: usize,
    pub subgoals_total: usize,
    pub subgoals_done: usize,
    pub transcript: Vec<(String, String)>,
}

/// What the agent sees before choosing its next action.
#[derive(Debug, Clone, Copy)]
pub struct EpisodeView<'a> {
    pub goal: &'a str,
    /// Initial observation followed by alternating action / observation lines.
    pub history: &'a [String],
    pub step: usize,
}

/// Runs a KeyDoor episode, alternating agent actions and observations until
/// the chest is open or `cap` steps were taken. An agent error ends the
/// episode as ungraded with the partial transcript.
pub fn run_episode(
    task: &TaskRecord,
    agent: &mut dyn FnMut(&EpisodeView<'_>) -> Result<String>,
    cap: usize,
) -> Result<EnvOutcome> {
    if task.env != EnvKind::KeyDoor {
        return Err(Error::InvalidInput(format!("task `{}` is not a KeyDoor task", task.id)));
    }
    if cap == 0 {
        return Err(Error::InvalidInput("step cap must be positive".into()));
    }
    let mut ep = KeyDoorEpisode::new(task.world()?, cap);
    let mut history = vec![format!("Observation: {}", ep.world.describe())];
    let mut transcript = Vec::new();
    let mut ungraded = None;
    loop {
        let view = EpisodeView {
            goal: &task.input,
            history: &history,
            step: ep.steps,
        };
        let action = match agent(&view) {
            Ok(a) => a,
            Err(e) => {
                ungraded = Some(e.to_string());
                break;
            }
        };
        let (obs, done) = ep.keydoor_step(&action);
        history.push(format!("Action: {action}"));
        history.push(format!("Observation: {obs}"));
        transcript.push((action, obs));
        if done {
            break;
        }
    }
    let done = ep.world.subgoals_done();
    let feedback = match ungraded {
        Some(detail) => Feedback::ungraded(detail),
        None if ep.world.is_done() => Feedback::success(),
        None => Feedback::failure(done as f64 / KEYDOOR_SUBGOALS as f64),
    };
    Ok(EnvOutcome {
        feedback,
        steps_taken: transcript.len(),
        subgoals_total: KEYDOOR_SUBGOALS,
        subgoals_done: done,
        transcript,
    })
}
