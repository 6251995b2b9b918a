//! One live session: bit queues, the simulator and the rolling analysis.
//!
//! [`SessionCore`] is plain synchronous state. [`spawn_session`] wraps it in
//! a task that serializes every mutation and publishes an immutable
//! [`Snapshot`] after each batch of commands.

use std::collections::VecDeque;
use std::io;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Instant;

use mdlbell::pipeline::{analyze, ingest, Analysis, AnalysisOptions, CountTable};
use mdlbell::rngstat::MarkovPredictor;
use mdlbell::session::{
    LogWriter, SessionConfig, SessionError, SessionLog, Simulator, StopReason,
};
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tokio::sync::{mpsc, oneshot, watch};

#[derive(Debug, Error)]
pub enum LiveError {
    #[error(transparent)]
    Config(#[from] SessionError),
    #[error("session is closed")]
    Closed,
    #[error("log file: {0}")]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Role {
    #[serde(rename = "A", alias = "a")]
    A,
    #[serde(rename = "B", alias = "b")]
    B,
    /// One stream split alternately between A and B.
    #[serde(rename = "interleaved")]
    Interleaved,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoleBits {
    pub accepted: u64,
    pub consumed: u64,
    pub queued: u64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BitAccounting {
    pub a: RoleBits,
    pub b: RoleBits,
}

/// Order-2 Markov guess rate per input stream, as the user typed it.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Predictability {
    pub a: Option<f64>,
    pub b: Option<f64>,
    pub interleaved: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub session: String,
    /// Increments with every published change.
    pub seq: u64,
    pub trials: u64,
    pub closed: bool,
    pub stop: Option<StopReason>,
    pub bits: BitAccounting,
    pub predictability: Predictability,
    pub analysis: Analysis,
}

pub struct SessionCore {
    id: String,
    max_trials: Option<u64>,
    period_ns: f64,
    sim: Simulator,
    queues: [VecDeque<u8>; 2],
    accepted: [u64; 2],
    consumed: [u64; 2],
    /// Whether the next interleaved bit goes to B.
    interleave_to_b: bool,
    predictors: [MarkovPredictor; 3],
    log: SessionLog,
    counts: CountTable,
    writer: Option<LogWriter>,
    started: Instant,
    last_pulse: Option<u64>,
    seq: u64,
    closed: bool,
    stop: Option<StopReason>,
}

impl SessionCore {
    pub fn new(id: String, config: &SessionConfig, writer: Option<LogWriter>) -> Result<Self, LiveError> {
        config.validate()?;
        Ok(SessionCore {
            id,
            max_trials: config.max_trials,
            period_ns: config.pulse_period_ns(),
            sim: Simulator::new(config)?,
            queues: [VecDeque::new(), VecDeque::new()],
            accepted: [0; 2],
            consumed: [0; 2],
            interleave_to_b: false,
            predictors: Default::default(),
            log: SessionLog::default(),
            counts: CountTable::new(),
            writer,
            started: Instant::now(),
            last_pulse: None,
            seq: 0,
            closed: false,
            stop: None,
        })
    }

    /// Enqueues bits and runs every trial that now has both settings.
    /// Returns the number of bits accepted.
    pub fn push(&mut self, role: Role, bits: &[u8]) -> Result<usize, LiveError> {
        if self.closed {
            return Err(LiveError::Closed);
        }
        match role {
            Role::A => self.enqueue(0, bits),
            Role::B => self.enqueue(1, bits),
            Role::Interleaved => {
                for &bit in bits {
                    let side = usize::from(self.interleave_to_b);
                    self.enqueue(side, &[bit]);
                    self.interleave_to_b = !self.interleave_to_b;
                }
            }
        }
        self.predictors[match role {
            Role::A => 0,
            Role::B => 1,
            Role::Interleaved => 2,
        }]
        .observe_all(bits);
        self.advance()?;
        self.seq += 1;
        Ok(bits.len())
    }

    fn enqueue(&mut self, side: usize, bits: &[u8]) {
        self.queues[side].extend(bits);
        self.accepted[side] += bits.len() as u64;
    }

    fn advance(&mut self) -> io::Result<()> {
        while !self.queues[0].is_empty() && !self.queues[1].is_empty() {
            if self.max_trials.is_some_and(|m| self.sim.trials_run() >= m) {
                self.stop = Some(StopReason::MaxTrials);
                break;
            }
            let x = self.queues[0].pop_front().expect("nonempty");
            let y = self.queues[1].pop_front().expect("nonempty");
            self.consumed[0] += 1;
            self.consumed[1] += 1;
            // Trials sit on the clock pulse at which they ran; a burst
            // occupies consecutive pulses.
            let now = (self.started.elapsed().as_nanos() as f64 / self.period_ns) as u64;
            let pulse = self.last_pulse.map_or(now, |p| now.max(p + 1));
            self.last_pulse = Some(pulse);
            let record = self.sim.trial(x, y, pulse);
            if let (Some(a), Some(b)) = (record.a, record.b) {
                self.counts.record(a, b, record.x, record.y);
            }
            if let Some(w) = &mut self.writer {
                w.append(&record)?;
            }
            self.log.records.push(record);
        }
        if let Some(w) = &mut self.writer {
            w.flush()?;
        }
        Ok(())
    }

    pub fn close(&mut self) -> Result<(), LiveError> {
        if self.closed {
            return Ok(());
        }
        self.closed = true;
        self.seq += 1;
        if let Some(mut w) = self.writer.take() {
            w.flush()?;
        }
        Ok(())
    }

    pub fn log(&self) -> &SessionLog {
        &self.log
    }

    /// Incrementally maintained counts; always equal to `ingest(log)`.
    pub fn counts(&self) -> &CountTable {
        &self.counts
    }

    pub fn snapshot(&self) -> Snapshot {
        debug_assert_eq!(self.counts, ingest(&self.log));
        let role = |i: usize| RoleBits {
            accepted: self.accepted[i],
            consumed: self.consumed[i],
            queued: self.queues[i].len() as u64,
        };
        Snapshot {
            session: self.id.clone(),
            seq: self.seq,
            trials: self.log.len() as u64,
            closed: self.closed,
            stop: self.stop,
            bits: BitAccounting { a: role(0), b: role(1) },
            predictability: Predictability {
                a: self.predictors[0].score(),
                b: self.predictors[1].score(),
                interleaved: self.predictors[2].score(),
            },
            analysis: analyze(&self.log, &AnalysisOptions::default()),
        }
    }
}

enum Command {
    Push {
        role: Role,
        bits: Vec<u8>,
        reply: oneshot::Sender<Result<usize, LiveError>>,
    },
    Close {
        reply: oneshot::Sender<Result<Arc<Snapshot>, LiveError>>,
    },
}

/// Cloneable handle to a running session task.
#[derive(Clone)]
pub struct SessionHandle {
    pub id: String,
    pub log_path: Option<PathBuf>,
    tx: mpsc::Sender<Command>,
    snapshots: watch::Receiver<Arc<Snapshot>>,
}

impl SessionHandle {
    pub async fn push(&self, role: Role, bits: Vec<u8>) -> Result<usize, LiveError> {
        let (reply, rx) = oneshot::channel();
        self.tx
            .send(Command::Push { role, bits, reply })
            .await
            .map_err(|_| LiveError::Closed)?;
        rx.await.map_err(|_| LiveError::Closed)?
    }

    /// Closes the session and returns the final snapshot. Closing twice
    /// returns the same snapshot.
    pub async fn close(&self) -> Result<Arc<Snapshot>, LiveError> {
        let (reply, rx) = oneshot::channel();
        if self.tx.send(Command::Close { reply }).await.is_err() {
            return Ok(self.latest());
        }
        match rx.await {
            Ok(r) => r,
            Err(_) => Ok(self.latest()),
        }
    }

    pub fn latest(&self) -> Arc<Snapshot> {
        self.snapshots.borrow().clone()
    }

    pub fn subscribe(&self) -> watch::Receiver<Arc<Snapshot>> {
        self.snapshots.clone()
    }
}

/// Starts the session task. With a `log_path` every trial is appended to
/// that file as it runs.
pub fn spawn_session(
    id: String,
    config: &SessionConfig,
    log_path: Option<PathBuf>,
) -> Result<SessionHandle, LiveError> {
    config.validate()?;
    let writer = log_path.as_ref().map(LogWriter::create).transpose()?;
    let core = SessionCore::new(id.clone(), config, writer)?;
    let (snap_tx, snap_rx) = watch::channel(Arc::new(core.snapshot()));
    let (tx, rx) = mpsc::channel(256);
    tokio::spawn(event_loop(core, rx, snap_tx));
    Ok(SessionHandle {
        id,
        log_path,
        tx,
        snapshots: snap_rx,
    })
}

async fn event_loop(
    mut core: SessionCore,
    mut rx: mpsc::Receiver<Command>,
    snapshots: watch::Sender<Arc<Snapshot>>,
) {
    while let Some(first) = rx.recv().await {
        // Everything already queued is applied before one snapshot goes out.
        let mut batch = vec![first];
        while let Ok(cmd) = rx.try_recv() {
            batch.push(cmd);
        }
        let mut push_replies = Vec::new();
        let mut close_replies = Vec::new();
        for cmd in batch {
            match cmd {
                Command::Push { role, bits, reply } => push_replies.push((reply, core.push(role, &bits))),
                Command::Close { reply } => close_replies.push((reply, core.close())),
            }
        }
        let snap = Arc::new(core.snapshot());
        snapshots.send_replace(snap.clone());
        for (reply, result) in push_replies {
            let _ = reply.send(result);
        }
        for (reply, result) in close_replies {
            let _ = reply.send(result.map(|()| snap.clone()));
        }
        if core.closed {
            break;
        }
    }
    // Every handle dropped without a close: still flush what we have.
    if !core.closed {
        if let Err(e) = core.close() {
            log::warn!("session {}: closing log failed: {e}", core.id);
        }
        snapshots.send_replace(Arc::new(core.snapshot()));
    }
}
