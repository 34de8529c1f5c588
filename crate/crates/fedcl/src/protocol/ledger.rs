//! Byte-exact accounting of every simulated message.
//!
//! Model components count 4 bytes per parameter value; feature banks use
//! the wire encoding from the contrastive module; scalars (distances,
//! calibration values) count 8 bytes each.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use crate::contrastive::bank_wire_bytes;
use crate::error::{Error, Result};

/// Bytes of one scalar on the wire.
pub const SCALAR_WIRE_BYTES: u64 = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Direction {
    Up,
    Down,
}

impl Direction {
    pub fn name(self) -> &'static str {
        match self {
            Direction::Up => "up",
            Direction::Down => "down",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "up" => Ok(Direction::Up),
            "down" => Ok(Direction::Down),
            other => Err(Error::Malformed { what: "ledger direction", message: other.into() }),
        }
    }
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Message payload category, matching the component breakdown reported
/// by `summarize`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Component {
    OnlineNet,
    Predictor,
    TargetNet,
    Features,
    Scalar,
}

impl Component {
    pub const ALL: [Component; 5] = [
        Component::OnlineNet,
        Component::Predictor,
        Component::TargetNet,
        Component::Features,
        Component::Scalar,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Component::OnlineNet => "online_net",
            Component::Predictor => "predictor",
            Component::TargetNet => "target_net",
            Component::Features => "features",
            Component::Scalar => "scalar",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Component::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::Malformed { what: "ledger component", message: s.into() })
    }
}

impl fmt::Display for Component {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// One metered message.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LedgerEntry {
    pub round: usize,
    pub client: usize,
    pub direction: Direction,
    pub component: Component,
    pub bytes: u64,
}

/// Append-only record of all messages in a run.
#[derive(Debug, Clone, Default)]
pub struct CommLedger {
    entries: Vec<LedgerEntry>,
}

impl CommLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&mut self, round: usize, client: usize, direction: Direction, component: Component, bytes: u64) {
        self.entries.push(LedgerEntry { round, client, direction, component, bytes });
    }

    pub fn entries(&self) -> &[LedgerEntry] {
        &self.entries
    }

    pub fn total(&self) -> u64 {
        self.entries.iter().map(|e| e.bytes).sum()
    }

    /// Total bytes matching a component and optional direction filter.
    pub fn total_where(&self, component: Option<Component>, direction: Option<Direction>) -> u64 {
        self.entries
            .iter()
            .filter(|e| component.map_or(true, |c| e.component == c))
            .filter(|e| direction.map_or(true, |d| e.direction == d))
            .map(|e| e.bytes)
            .sum()
    }

    pub fn component_totals(&self) -> BTreeMap<Component, u64> {
        let mut map = BTreeMap::new();
        for e in &self.entries {
            *map.entry(e.component).or_insert(0) += e.bytes;
        }
        map
    }

    /// Rounds on which a given component/direction pair carried bytes.
    pub fn rounds_with_traffic(&self, component: Component, direction: Direction) -> Vec<usize> {
        let mut rounds: Vec<usize> = self
            .entries
            .iter()
            .filter(|e| e.component == component && e.direction == direction && e.bytes > 0)
            .map(|e| e.round)
            .collect();
        rounds.dedup();
        rounds
    }

    pub fn to_csv_string(&self) -> String {
        let mut out = String::from("round,client,direction,component,bytes\n");
        for e in &self.entries {
            out.push_str(&format!("{},{},{},{},{}\n", e.round, e.client, e.direction, e.component, e.bytes));
        }
        out
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_csv_string())?;
        Ok(())
    }

    pub fn from_csv_str(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if i == 0 {
                if line != "round,client,direction,component,bytes" {
                    return Err(Error::Malformed { what: "ledger csv", message: "unexpected header".into() });
                }
                continue;
            }
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 5 {
                return Err(Error::Malformed {
                    what: "ledger csv",
                    message: format!("line {} has {} fields", i + 1, fields.len()),
                });
            }
            let parse_num = |s: &str| -> Result<u64> {
                s.parse().map_err(|_| Error::Malformed { what: "ledger csv", message: format!("bad number `{s}`") })
            };
            entries.push(LedgerEntry {
                round: parse_num(fields[0])? as usize,
                client: parse_num(fields[1])? as usize,
                direction: Direction::parse(fields[2])?,
                component: Component::parse(fields[3])?,
                bytes: parse_num(fields[4])?,
            });
        }
        Ok(Self { entries })
    }

    pub fn read_csv(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_csv_str(&text)
    }
}

/// Per-round bytes of the feature-exchange variant with full banks: both
/// model networks both ways plus one bank uploaded and `clients - 1`
/// downloaded per client. Used to normalize other variants' totals.
pub fn feature_exchange_round_bytes(
    clients: usize,
    encoder_params: usize,
    feature_dim: usize,
    bank_entries: usize,
) -> u64 {
    let model = 4 * encoder_params as u64;
    let bank = bank_wire_bytes(bank_entries, feature_dim);
    clients as u64 * (4 * model + bank + (clients as u64 - 1) * bank)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn totals_and_filters() {
        let mut ledger = CommLedger::new();
        ledger.record(1, 0, Direction::Up, Component::OnlineNet, 100);
        ledger.record(1, 0, Direction::Down, Component::OnlineNet, 100);
        ledger.record(1, 1, Direction::Up, Component::Scalar, 8);
        ledger.record(2, 0, Direction::Up, Component::TargetNet, 50);
        assert_eq!(ledger.total(), 258);
        assert_eq!(ledger.total_where(Some(Component::OnlineNet), None), 200);
        assert_eq!(ledger.total_where(Some(Component::OnlineNet), Some(Direction::Up)), 100);
        assert_eq!(ledger.total_where(None, Some(Direction::Up)), 158);
        assert_eq!(ledger.rounds_with_traffic(Component::TargetNet, Direction::Up), vec![2]);
    }

    #[test]
    fn csv_roundtrip() {
        let mut ledger = CommLedger::new();
        ledger.record(1, 3, Direction::Down, Component::Features, 8716);
        ledger.record(2, 4, Direction::Up, Component::Predictor, 8448);
        let text = ledger.to_csv_string();
        let back = CommLedger::from_csv_str(&text).unwrap();
        assert_eq!(back.entries(), ledger.entries());
    }

    #[test]
    fn rejects_malformed_csv() {
        assert!(CommLedger::from_csv_str("bogus header\n").is_err());
        let bad = "round,client,direction,component,bytes\n1,2,sideways,online_net,5\n";
        assert!(CommLedger::from_csv_str(bad).is_err());
    }
}
