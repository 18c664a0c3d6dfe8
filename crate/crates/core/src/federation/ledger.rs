//! Communication ledger: every payload that crosses the simulated wire.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Uplink,
    Downlink,
}

/// What a payload carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PayloadMode {
    /// Trainable parameters only (adapters, head, RevIN affine).
    AdapterOnly,
    /// Every model parameter.
    FullModel,
}

impl PayloadMode {
    pub fn label(&self) -> &'static str {
        match self {
            PayloadMode::AdapterOnly => "adapter-only",
            PayloadMode::FullModel => "full-model",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub round: usize,
    pub client: usize,
    pub cluster: usize,
    pub direction: Direction,
    pub bytes: usize,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Totals {
    pub messages: usize,
    pub bytes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CommLedger {
    pub mode: PayloadMode,
    /// Size of a full-model payload, used to account every message as if the
    /// whole model had been sent.
    pub full_payload_bytes: usize,
    messages: Vec<Message>,
    rounds: usize,
}

impl CommLedger {
    pub fn new(mode: PayloadMode, full_payload_bytes: usize) -> Self {
        Self {
            mode,
            full_payload_bytes,
            messages: Vec::new(),
            rounds: 0,
        }
    }

    /// Records one message of `bytes`, the length of the produced payload.
    pub fn record(&mut self, round: usize, client: usize, cluster: usize, direction: Direction, bytes: usize) {
        self.rounds = self.rounds.max(round);
        self.messages.push(Message {
            round,
            client,
            cluster,
            direction,
            bytes,
        });
    }

    pub fn messages(&self) -> &[Message] {
        &self.messages
    }

    pub fn rounds(&self) -> usize {
        self.rounds
    }

    pub fn totals(&self, direction: Option<Direction>) -> Totals {
        self.filtered(|m| direction.is_none_or(|d| m.direction == d))
    }

    pub fn round_totals(&self, round: usize, direction: Direction) -> Totals {
        self.filtered(|m| m.round == round && m.direction == direction)
    }

    pub fn cluster_round_totals(&self, round: usize, cluster: usize, direction: Direction) -> Totals {
        self.filtered(|m| m.round == round && m.cluster == cluster && m.direction == direction)
    }

    fn filtered(&self, keep: impl Fn(&Message) -> bool) -> Totals {
        self.messages.iter().filter(|m| keep(m)).fold(Totals::default(), |t, m| Totals {
            messages: t.messages + 1,
            bytes: t.bytes + m.bytes,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LedgerRow {
    pub mode: PayloadMode,
    pub rounds: usize,
    pub messages: usize,
    pub uplink_bytes: usize,
    pub downlink_bytes: usize,
    pub total_bytes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LedgerReport {
    /// The run's own mode first, then the full-model shadow when they differ.
    pub rows: Vec<LedgerRow>,
    /// Full-model bytes over the run's bytes; `None` with no traffic.
    pub full_to_actual_ratio: Option<f64>,
}

/// Per-mode totals and the full-model versus actual payload ratio.
pub fn ledger_report(ledger: &CommLedger) -> LedgerReport {
    if ledger.messages.is_empty() {
        return LedgerReport {
            rows: Vec::new(),
            full_to_actual_ratio: None,
        };
    }
    let up = ledger.totals(Some(Direction::Uplink));
    let down = ledger.totals(Some(Direction::Downlink));
    let actual = LedgerRow {
        mode: ledger.mode,
        rounds: ledger.rounds,
        messages: up.messages + down.messages,
        uplink_bytes: up.bytes,
        downlink_bytes: down.bytes,
        total_bytes: up.bytes + down.bytes,
    };
    let full = LedgerRow {
        mode: PayloadMode::FullModel,
        rounds: ledger.rounds,
        messages: actual.messages,
        uplink_bytes: up.messages * ledger.full_payload_bytes,
        downlink_bytes: down.messages * ledger.full_payload_bytes,
        total_bytes: actual.messages * ledger.full_payload_bytes,
    };
    let ratio = (actual.total_bytes > 0).then(|| full.total_bytes as f64 / actual.total_bytes as f64);
    let rows = if ledger.mode == PayloadMode::FullModel {
        vec![actual]
    } else {
        vec![actual, full]
    };
    LedgerReport {
        rows,
        full_to_actual_ratio: ratio,
    }
}
