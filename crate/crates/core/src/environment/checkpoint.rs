//! Checkpoint archive: one text file of JSON lines.
//!
//! ```text
//! {"format":"gensim-checkpoint","version":1,"round":R}
//! {"section":"config","records":1}
//! <config>
//! {"section":"profiles","records":N}
//! <profile> x N
//! {"section":"memories","records":N}
//! {"id":..,"memory":..} x N
//! {"section":"env","records":1}
//! {"section":"rng","records":1}
//! {"section":"queue","records":K}
//! ```
//!
//! Maps are ordered and floats use shortest round-trip formatting, so writing
//! a restored snapshot reproduces the original bytes.

use std::io::{BufRead, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::{EnvironmentError, EnvironmentState, Intervention};
use crate::agent::{Agent, AgentId, AgentMemory, AgentProfile};
use crate::scheduler::SimulationConfig;

pub const CHECKPOINT_VERSION: u32 = 1;
const FORMAT: &str = "gensim-checkpoint";
const SECTIONS: [&str; 6] = ["config", "profiles", "memories", "env", "rng", "queue"];

/// Everything needed to resume a run. All randomness is counter-based, so the
/// seed plus the next event number is the whole RNG state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub next_seq: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulationSnapshot {
    pub config: SimulationConfig,
    pub agents: Vec<Agent>,
    pub env: EnvironmentState,
    pub rng: RngState,
    pub pending: Vec<Intervention>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    round: u64,
}

#[derive(Serialize, Deserialize)]
struct SectionHeader {
    section: String,
    records: usize,
}

#[derive(Serialize, Deserialize)]
struct MemoryEntry {
    id: AgentId,
    memory: AgentMemory,
}

fn bad(msg: impl Into<String>) -> EnvironmentError {
    EnvironmentError::Checkpoint(msg.into())
}

fn line<T: Serialize>(w: &mut impl Write, v: &T) -> Result<(), EnvironmentError> {
    serde_json::to_writer(&mut *w, v).map_err(|e| bad(e.to_string()))?;
    w.write_all(b"\n")?;
    Ok(())
}

fn section<T: Serialize>(w: &mut impl Write, name: &str, items: &[T]) -> Result<(), EnvironmentError> {
    line(
        w,
        &SectionHeader {
            section: name.to_owned(),
            records: items.len(),
        },
    )?;
    for item in items {
        line(w, item)?;
    }
    Ok(())
}

/// Write a checkpoint. The file is written next to `path` and renamed into
/// place so a crash never leaves a truncated archive behind.
pub fn write_checkpoint(path: &Path, snap: &SimulationSnapshot) -> Result<(), EnvironmentError> {
    let tmp = path.with_extension("tmp");
    {
        let mut w = BufWriter::new(std::fs::File::create(&tmp)?);
        line(
            &mut w,
            &Header {
                format: FORMAT.to_owned(),
                version: CHECKPOINT_VERSION,
                round: snap.env.round,
            },
        )?;
        section(&mut w, "config", std::slice::from_ref(&snap.config))?;
        let profiles: Vec<&AgentProfile> = snap.agents.iter().map(|a| &a.profile).collect();
        section(&mut w, "profiles", &profiles)?;
        let memories: Vec<MemoryEntry> = snap
            .agents
            .iter()
            .map(|a| MemoryEntry {
                id: a.id(),
                memory: a.memory.clone(),
            })
            .collect();
        section(&mut w, "memories", &memories)?;
        section(&mut w, "env", std::slice::from_ref(&snap.env))?;
        section(&mut w, "rng", std::slice::from_ref(&snap.rng))?;
        section(&mut w, "queue", &snap.pending)?;
        w.flush()?;
        w.get_ref().sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

struct Reader<R> {
    lines: std::io::Lines<R>,
    line_no: usize,
}

impl<R: BufRead> Reader<R> {
    fn next<T: DeserializeOwned>(&mut self) -> Result<T, EnvironmentError> {
        self.line_no += 1;
        let text = self
            .lines
            .next()
            .ok_or_else(|| bad(format!("unexpected end of file at line {}", self.line_no)))??;
        serde_json::from_str(&text).map_err(|e| bad(format!("line {}: {e}", self.line_no)))
    }

    fn section<T: DeserializeOwned>(&mut self, name: &str) -> Result<Vec<T>, EnvironmentError> {
        let h: SectionHeader = self.next()?;
        if h.section != name {
            return Err(bad(format!(
                "line {}: expected section `{name}`, found `{}`",
                self.line_no, h.section
            )));
        }
        (0..h.records).map(|_| self.next()).collect()
    }

    fn single<T: DeserializeOwned>(&mut self, name: &str) -> Result<T, EnvironmentError> {
        let mut v = self.section(name)?;
        if v.len() != 1 {
            return Err(bad(format!("section `{name}` must hold exactly one record")));
        }
        Ok(v.pop().unwrap())
    }
}

pub fn read_checkpoint(path: &Path) -> Result<SimulationSnapshot, EnvironmentError> {
    let file = std::fs::File::open(path)?;
    let mut r = Reader {
        lines: std::io::BufReader::new(file).lines(),
        line_no: 0,
    };
    let header: Header = r.next()?;
    if header.format != FORMAT {
        return Err(bad(format!("not a checkpoint (format `{}`)", header.format)));
    }
    if header.version != CHECKPOINT_VERSION {
        return Err(bad(format!("unsupported version {}", header.version)));
    }
    let config: SimulationConfig = r.single(SECTIONS[0])?;
    let profiles: Vec<AgentProfile> = r.section(SECTIONS[1])?;
    let memories: Vec<MemoryEntry> = r.section(SECTIONS[2])?;
    let env: EnvironmentState = r.single(SECTIONS[3])?;
    let rng: RngState = r.single(SECTIONS[4])?;
    let pending: Vec<Intervention> = r.section(SECTIONS[5])?;
    for rest in r.lines {
        if !rest?.trim().is_empty() {
            return Err(bad("trailing data after the last section"));
        }
    }
    if env.round != header.round {
        return Err(bad("header round does not match env round"));
    }
    if profiles.len() != memories.len() {
        return Err(bad("profile and memory sections differ in length"));
    }
    let mut agents = Vec::with_capacity(profiles.len());
    for (p, m) in profiles.into_iter().zip(memories) {
        if p.id != m.id {
            return Err(bad(format!("memory entry {} does not match profile {}", m.id, p.id)));
        }
        p.validate().map_err(|e| bad(e.to_string()))?;
        agents.push(Agent {
            profile: p,
            memory: m.memory,
        });
    }
    if agents.windows(2).any(|w| w[0].id() >= w[1].id()) {
        return Err(bad("agents are not sorted by unique id"));
    }
    Ok(SimulationSnapshot {
        config,
        agents,
        env,
        rng,
        pending,
    })
}
