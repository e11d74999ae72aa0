//! Sessions, blind pair assignment, vote capture and the append-only log.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{EvalError, Result};
use crate::gsb::{Choice, GsbTally, Outcome};

/// One comparison in the pool: our video against one competitor's video
/// for the same prompt.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairSpec {
    pub id: String,
    pub prompt: String,
    pub ours: PathBuf,
    pub theirs: PathBuf,
    pub competitor: String,
}

/// Load a pool from a JSON array of [`PairSpec`]; relative video paths are
/// resolved against the file's directory.
pub fn load_pool(path: &Path) -> Result<Vec<PairSpec>> {
    let mut pool: Vec<PairSpec> = serde_json::from_str(&fs::read_to_string(path)?)?;
    let base = path.parent().unwrap_or(Path::new("."));
    for p in &mut pool {
        for v in [&mut p.ours, &mut p.theirs] {
            if v.is_relative() {
                *v = base.join(&*v);
            }
        }
    }
    Ok(pool)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Left,
    Right,
}

/// What the voter sees. Carries no side mapping.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Presentation {
    pub pair_id: String,
    pub left_url: String,
    pub right_url: String,
    pub prompt: String,
}

/// One line of the vote log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "lowercase")]
pub enum LogEntry {
    Session { token: String },
    Vote(VoteRecord),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VoteRecord {
    pub voter: String,
    pub pair_id: String,
    pub competitor: String,
    pub choice: Choice,
    pub left_is_ours: bool,
    pub outcome: Outcome,
    pub timestamp_ms: u64,
}

#[derive(Clone, Debug)]
struct Assignment {
    pair: usize,
    left_is_ours: bool,
}

#[derive(Debug, Default)]
struct Session {
    voted: HashSet<String>,
    pending: Option<Assignment>,
}

#[derive(Debug)]
pub struct EvalState {
    pool: Vec<PairSpec>,
    index: HashMap<String, usize>,
    sessions: HashMap<String, Session>,
    tallies: BTreeMap<String, GsbTally>,
    votes: u64,
    rng: ChaCha8Rng,
    log: Option<(PathBuf, File)>,
}

fn valid_id(id: &str) -> bool {
    !id.is_empty() && id.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_')
}

fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

impl EvalState {
    /// In-memory state; nothing is persisted.
    pub fn new(pool: Vec<PairSpec>, seed: u64) -> Result<Self> {
        let mut index = HashMap::new();
        for (i, p) in pool.iter().enumerate() {
            if !valid_id(&p.id) {
                return Err(EvalError::Pool(format!("pair id {:?} must be [A-Za-z0-9_-]+", p.id)));
            }
            if index.insert(p.id.clone(), i).is_some() {
                return Err(EvalError::Pool(format!("duplicate pair id {}", p.id)));
            }
        }
        let mut tallies = BTreeMap::new();
        for p in &pool {
            tallies
                .entry(p.competitor.clone())
                .or_insert_with(|| GsbTally::new(p.competitor.clone()));
        }
        Ok(Self {
            pool,
            index,
            sessions: HashMap::new(),
            tallies,
            votes: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
            log: None,
        })
    }

    /// State backed by an append-only JSONL log at `path`; an existing log
    /// is replayed first.
    pub fn with_log(pool: Vec<PairSpec>, seed: u64, path: &Path) -> Result<Self> {
        let mut s = Self::new(pool, seed)?;
        if path.exists() {
            for (n, line) in BufReader::new(File::open(path)?).lines().enumerate() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                let entry: LogEntry = serde_json::from_str(&line).map_err(|e| EvalError::Log {
                    path: path.to_path_buf(),
                    line: n + 1,
                    msg: e.to_string(),
                })?;
                s.apply(entry);
            }
        }
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        s.log = Some((path.to_path_buf(), file));
        Ok(s)
    }

    fn apply(&mut self, entry: LogEntry) {
        match entry {
            LogEntry::Session { token } => {
                self.sessions.entry(token).or_default();
            }
            LogEntry::Vote(v) => {
                self.sessions.entry(v.voter.clone()).or_default().voted.insert(v.pair_id.clone());
                self.tallies
                    .entry(v.competitor.clone())
                    .or_insert_with(|| GsbTally::new(v.competitor.clone()))
                    .add(v.outcome);
                self.votes += 1;
            }
        }
    }

    fn append(&mut self, entry: &LogEntry) -> Result<()> {
        if let Some((_, file)) = self.log.as_mut() {
            let mut line = serde_json::to_string(entry)?;
            line.push('\n');
            file.write_all(line.as_bytes())?;
            file.flush()?;
        }
        Ok(())
    }

    pub fn pool(&self) -> &[PairSpec] {
        &self.pool
    }

    /// Issue a fresh opaque session token.
    pub fn create_session(&mut self) -> Result<String> {
        let token = loop {
            let t: String = (0..16).map(|_| format!("{:02x}", self.rng.random::<u8>())).collect();
            if !self.sessions.contains_key(&t) {
                break t;
            }
        };
        self.append(&LogEntry::Session { token: token.clone() })?;
        self.sessions.insert(token.clone(), Session::default());
        Ok(token)
    }

    fn presentation(&self, token: &str, a: &Assignment) -> Presentation {
        let p = &self.pool[a.pair];
        let url = |side: &str| format!("/video/{}/{side}?token={token}", p.id);
        Presentation {
            pair_id: p.id.clone(),
            left_url: url("left"),
            right_url: url("right"),
            prompt: p.prompt.clone(),
        }
    }

    /// The session's pending pair, or a uniformly chosen unvoted pair with a
    /// fresh random side order. Repeated calls before voting return the same
    /// presentation.
    pub fn assign_pair(&mut self, token: &str) -> Result<Presentation> {
        let session = self.sessions.get(token).ok_or(EvalError::UnknownSession)?;
        if let Some(a) = &session.pending {
            return Ok(self.presentation(token, a));
        }
        let remaining: Vec<usize> = (0..self.pool.len())
            .filter(|&i| !session.voted.contains(&self.pool[i].id))
            .collect();
        if remaining.is_empty() {
            return Err(EvalError::Exhausted);
        }
        let pair = remaining[self.rng.random_range(0..remaining.len())];
        let left_is_ours = self.rng.random_bool(0.5);
        let a = Assignment { pair, left_is_ours };
        let out = self.presentation(token, &a);
        self.sessions.get_mut(token).expect("checked above").pending = Some(a);
        Ok(out)
    }

    /// Record a click on the session's pending pair, de-randomized against
    /// the hidden side mapping. The log is appended before the tally moves.
    pub fn record_vote(&mut self, token: &str, pair_id: &str, choice: Choice) -> Result<Outcome> {
        let session = self.sessions.get(token).ok_or(EvalError::UnknownSession)?;
        if !self.index.contains_key(pair_id) {
            return Err(EvalError::UnknownPair(pair_id.to_string()));
        }
        if session.voted.contains(pair_id) {
            return Err(EvalError::DuplicateVote(pair_id.to_string()));
        }
        let a = match &session.pending {
            Some(a) if self.pool[a.pair].id == pair_id => a.clone(),
            _ => return Err(EvalError::NotAssigned(pair_id.to_string())),
        };
        let outcome = choice.outcome(a.left_is_ours);
        let record = VoteRecord {
            voter: token.to_string(),
            pair_id: pair_id.to_string(),
            competitor: self.pool[a.pair].competitor.clone(),
            choice,
            left_is_ours: a.left_is_ours,
            outcome,
            timestamp_ms: now_ms(),
        };
        let entry = LogEntry::Vote(record);
        self.append(&entry)?;
        self.apply(entry);
        self.sessions.get_mut(token).expect("checked above").pending = None;
        Ok(outcome)
    }

    /// Video shown on `side` of the session's pending pair.
    pub fn asset(&self, token: &str, pair_id: &str, side: Side) -> Result<&Path> {
        let session = self.sessions.get(token).ok_or(EvalError::UnknownSession)?;
        let a = match &session.pending {
            Some(a) if self.pool[a.pair].id == pair_id => a,
            _ => return Err(EvalError::NotAssigned(pair_id.to_string())),
        };
        let p = &self.pool[a.pair];
        let ours = (side == Side::Left) == a.left_is_ours;
        Ok(if ours { &p.ours } else { &p.theirs })
    }

    /// Whether our video is on the left of the session's pending pair.
    /// For auditing only; never served to voters.
    pub fn pending_left_is_ours(&self, token: &str) -> Option<bool> {
        self.sessions.get(token)?.pending.as_ref().map(|a| a.left_is_ours)
    }

    pub fn votes_by(&self, token: &str) -> Result<usize> {
        Ok(self.sessions.get(token).ok_or(EvalError::UnknownSession)?.voted.len())
    }

    pub fn remaining(&self, token: &str) -> Result<usize> {
        let s = self.sessions.get(token).ok_or(EvalError::UnknownSession)?;
        Ok(self.pool.iter().filter(|p| !s.voted.contains(&p.id)).count())
    }

    pub fn stats(&self, competitor: &str) -> GsbTally {
        self.tallies
            .get(competitor)
            .cloned()
            .unwrap_or_else(|| GsbTally::new(competitor))
    }

    pub fn all_stats(&self) -> Vec<GsbTally> {
        self.tallies.values().cloned().collect()
    }

    pub fn total_votes(&self) -> u64 {
        self.votes
    }

    pub fn log_path(&self) -> Option<&Path> {
        self.log.as_ref().map(|(p, _)| p.as_path())
    }
}

/// Tally a vote log without a pool.
pub fn replay_log(path: &Path) -> Result<Vec<GsbTally>> {
    let mut s = EvalState::new(Vec::new(), 0)?;
    for (n, line) in BufReader::new(File::open(path)?).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let entry: LogEntry = serde_json::from_str(&line).map_err(|e| EvalError::Log {
            path: path.to_path_buf(),
            line: n + 1,
            msg: e.to_string(),
        })?;
        s.apply(entry);
    }
    Ok(s.all_stats())
}
