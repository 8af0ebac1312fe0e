use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};
use tokio::sync::watch;

use gensim_core::environment::InterventionQueue;
use gensim_core::scheduler::ActionEvent;
use gensim_core::{Simulation, StopHandle};

use super::error::ApiError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Configured,
    Running,
    Paused,
    Stopped,
    Finished,
}

impl Status {
    pub fn can_become(self, next: Status) -> bool {
        use Status::*;
        matches!(
            (self, next),
            (Configured, Running) | (Running, Paused) | (Paused, Running) | (Running, Stopped) | (Running, Finished)
        )
    }

    pub fn is_terminal(self) -> bool {
        matches!(self, Status::Stopped | Status::Finished)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationHandle {
    pub id: String,
    pub status: Status,
    /// Rounds completed so far.
    pub current_round: u64,
    pub total_rounds: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub last_error: Option<String>,
}

struct Control {
    status: Status,
    current_round: u64,
    last_error: Option<String>,
}

/// One hosted simulation. The engine is locked one round at a time by the
/// runner thread, so reads interleave with a run at round boundaries.
pub struct SimEntry {
    pub id: String,
    total_rounds: u64,
    sim: Mutex<Simulation>,
    queue: Arc<InterventionQueue>,
    control: Mutex<Control>,
    log: RwLock<Vec<ActionEvent>>,
    stop: StopHandle,
    pause: AtomicBool,
    /// Bumped whenever the log or the status changes.
    tick: watch::Sender<u64>,
}

impl SimEntry {
    pub fn new(id: String, sim: Simulation) -> Self {
        SimEntry {
            id,
            total_rounds: sim.config().rounds,
            queue: sim.queue(),
            control: Mutex::new(Control {
                status: Status::Configured,
                current_round: sim.round(),
                last_error: None,
            }),
            sim: Mutex::new(sim),
            log: RwLock::new(Vec::new()),
            stop: StopHandle::new(),
            pause: AtomicBool::new(false),
            tick: watch::channel(0).0,
        }
    }

    pub fn handle(&self) -> SimulationHandle {
        let c = self.control.lock();
        SimulationHandle {
            id: self.id.clone(),
            status: c.status,
            current_round: c.current_round,
            total_rounds: self.total_rounds,
            last_error: c.last_error.clone(),
        }
    }

    pub fn status(&self) -> Status {
        self.control.lock().status
    }

    pub fn queue(&self) -> &InterventionQueue {
        &self.queue
    }

    /// Exclusive access to the engine; waits for a running round to end.
    pub fn with_sim<R>(&self, f: impl FnOnce(&mut Simulation) -> R) -> R {
        f(&mut self.sim.lock())
    }

    pub fn subscribe(&self) -> watch::Receiver<u64> {
        self.tick.subscribe()
    }

    fn bump(&self) {
        self.tick.send_modify(|t| *t += 1);
    }

    /// Events with `seq > after`, at most `limit` of them.
    pub fn events_after(&self, after: u64, limit: usize) -> Vec<ActionEvent> {
        let log = self.log.read();
        let start = log.partition_point(|e| e.seq <= after);
        log[start..].iter().take(limit).cloned().collect()
    }

    pub fn event(&self, seq: u64) -> Option<ActionEvent> {
        let log = self.log.read();
        log.binary_search_by_key(&seq, |e| e.seq).ok().map(|i| log[i].clone())
    }

    pub fn agent_events(&self, agent: u64, limit: usize) -> Vec<ActionEvent> {
        let log = self.log.read();
        let mut out: Vec<ActionEvent> = log
            .iter()
            .rev()
            .filter(|e| e.agent_id.0 == agent)
            .take(limit)
            .cloned()
            .collect();
        out.reverse();
        out
    }

    /// Start (or resume) a background run of up to `rounds` rounds.
    pub fn start(self: &Arc<Self>, rounds: Option<u64>) -> Result<SimulationHandle, ApiError> {
        let mut c = self.control.lock();
        if !c.status.can_become(Status::Running) {
            return Err(ApiError::conflict(format!("cannot run a simulation that is {:?}", c.status)));
        }
        let remaining = self.total_rounds - c.current_round;
        let rounds = rounds.unwrap_or(remaining).min(remaining);
        if rounds == 0 {
            return Err(ApiError::invalid("rounds must be >= 1").with_field("rounds"));
        }
        c.status = Status::Running;
        self.pause.store(false, Ordering::SeqCst);
        drop(c);
        self.bump();
        let me = Arc::clone(self);
        std::thread::Builder::new()
            .name(format!("sim-{}", self.id))
            .spawn(move || me.run(rounds))
            .map_err(|e| ApiError::backend(e.to_string()))?;
        Ok(self.handle())
    }

    /// Ask a running simulation to stop (or pause) at the next barrier and
    /// wait until it has.
    pub async fn halt(&self, target: Status) -> Result<SimulationHandle, ApiError> {
        let mut rx = self.subscribe();
        {
            let c = self.control.lock();
            if !c.status.can_become(target) {
                return Err(ApiError::conflict(format!(
                    "cannot move a {:?} simulation to {:?}",
                    c.status, target
                )));
            }
            match target {
                Status::Stopped => self.stop.stop(),
                _ => self.pause.store(true, Ordering::SeqCst),
            }
        }
        loop {
            rx.borrow_and_update();
            if self.status() != Status::Running {
                return Ok(self.handle());
            }
            if rx.changed().await.is_err() {
                return Ok(self.handle());
            }
        }
    }

    fn run(&self, rounds: u64) {
        for _ in 0..rounds {
            if self.stop.is_stopped() || self.pause.load(Ordering::SeqCst) {
                break;
            }
            let result = self.sim.lock().run_round();
            match result {
                Ok(out) => {
                    self.log.write().extend(out.events);
                    self.control.lock().current_round = out.report.round + 1;
                    tracing::debug!(sim = %self.id, round = out.report.round, errors = out.report.errors, "round done");
                    self.bump();
                }
                Err(e) => {
                    tracing::warn!(sim = %self.id, error = %e, "run stopped");
                    let mut c = self.control.lock();
                    c.last_error = Some(e.to_string());
                    c.status = Status::Stopped;
                    drop(c);
                    self.bump();
                    return;
                }
            }
        }
        let mut c = self.control.lock();
        c.status = if self.stop.is_stopped() {
            Status::Stopped
        } else if c.current_round >= self.total_rounds {
            Status::Finished
        } else {
            Status::Paused
        };
        drop(c);
        self.bump();
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn transition_graph() {
        use Status::*;
        let all = [Configured, Running, Paused, Stopped, Finished];
        let legal: Vec<(Status, Status)> = all
            .iter()
            .flat_map(|a| all.iter().map(move |b| (*a, *b)))
            .filter(|(a, b)| a.can_become(*b))
            .collect();
        assert_eq!(
            legal,
            vec![
                (Configured, Running),
                (Running, Paused),
                (Running, Stopped),
                (Running, Finished),
                (Paused, Running),
            ]
        );
        assert!(all.iter().filter(|s| s.is_terminal()).all(|s| all.iter().all(|n| !s.can_become(*n))));
    }
}
