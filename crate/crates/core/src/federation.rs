//! Simulated server/client exchange and float accounting.
//!
//! Transport is in-process: round functions push [`Message`]s describing what
//! crossed the wire and a [`CommLedger`] tallies them. A broadcast is counted
//! once regardless of the number of receivers.

use serde::Serialize;

use crate::error::{ElfError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Uplink,
    Downlink,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Node {
    Server,
    Client(usize),
    AllClients,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum MessageKind {
    /// Dense iterate `x_{k+1}` sent to every device.
    ModelBroadcast,
    /// Compressed shadow-model update `v_k`.
    ModelDelta,
    /// Compressed estimator update `c_i` / `h^i_{k+1}`.
    GradientDelta,
    /// Uncompressed client gradient.
    DenseGradient,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Message {
    pub direction: Direction,
    pub sender: Node,
    pub receiver: Node,
    pub payload_floats: usize,
    pub round: usize,
    pub kind: MessageKind,
}

impl Message {
    pub fn broadcast(round: usize, kind: MessageKind, payload_floats: usize) -> Self {
        Self {
            direction: Direction::Downlink,
            sender: Node::Server,
            receiver: Node::AllClients,
            payload_floats,
            round,
            kind,
        }
    }

    pub fn upload(round: usize, client: usize, kind: MessageKind, payload_floats: usize) -> Self {
        Self {
            direction: Direction::Uplink,
            sender: Node::Client(client),
            receiver: Node::Server,
            payload_floats,
            round,
            kind,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct RoundTraffic {
    pub round: usize,
    pub uplink_floats: u64,
    pub downlink_floats: u64,
}

/// Cumulative per-direction float counters with optional per-round history.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CommLedger {
    pub uplink_floats: u64,
    pub downlink_floats: u64,
    last_round: Option<usize>,
    keep_history: bool,
    history: Vec<RoundTraffic>,
}

impl CommLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_history() -> Self {
        Self {
            keep_history: true,
            ..Self::default()
        }
    }

    pub fn history(&self) -> &[RoundTraffic] {
        &self.history
    }

    pub fn record(&mut self, message: &Message) -> Result<()> {
        if let Some(last) = self.last_round {
            if message.round < last {
                return Err(ElfError::RoundRegression {
                    last,
                    got: message.round,
                });
            }
        }
        let floats = message.payload_floats as u64;
        match message.direction {
            Direction::Uplink => self.uplink_floats += floats,
            Direction::Downlink => self.downlink_floats += floats,
        }
        if self.keep_history {
            if self.history.last().map(|h| h.round) != Some(message.round) {
                self.history.push(RoundTraffic {
                    round: message.round,
                    ..RoundTraffic::default()
                });
            }
            let h = self.history.last_mut().unwrap();
            match message.direction {
                Direction::Uplink => h.uplink_floats += floats,
                Direction::Downlink => h.downlink_floats += floats,
            }
        }
        self.last_round = Some(message.round);
        Ok(())
    }

    pub fn record_all<'a>(&mut self, messages: impl IntoIterator<Item = &'a Message>) -> Result<()> {
        for m in messages {
            self.record(m)?;
        }
        Ok(())
    }
}

/// Outcome of [`cost_to_reach`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum CostToReach {
    Reached {
        round: usize,
        uplink_floats: f64,
        downlink_floats: f64,
    },
    NotReached,
}

/// One monitored point of a trace: metric value after `round` rounds with
/// the cumulative traffic spent to get there.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostPoint {
    pub round: usize,
    pub metric: f64,
    pub uplink_floats: f64,
    pub downlink_floats: f64,
}

/// First logged point whose metric is at or below `threshold`.
pub fn cost_to_reach(trace: &[CostPoint], threshold: f64) -> Result<CostToReach> {
    if trace.is_empty() {
        return Err(ElfError::InvalidArgument("cost_to_reach on an empty trace".into()));
    }
    Ok(trace
        .iter()
        .find(|p| p.metric <= threshold)
        .map(|p| CostToReach::Reached {
            round: p.round,
            uplink_floats: p.uplink_floats,
            downlink_floats: p.downlink_floats,
        })
        .unwrap_or(CostToReach::NotReached))
}
