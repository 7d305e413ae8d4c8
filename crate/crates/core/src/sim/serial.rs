//! Sequencer state kept by each replica of a serializable handler group.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::sync::Arc;

use crate::runtime::Effect;
use crate::value::{Message, Row, Value, MESSAGE_ID};

/// Mailbox carrying committed effects from the acting sequencer to the
/// other replicas.
pub const SYNC_MAILBOX: &str = "__sync";
pub const REJECTED: &str = "REJECTED";

#[derive(Debug, Clone)]
pub struct SyncMsg {
    pub group: String,
    pub seq: u64,
    pub message_id: i64,
    pub effects: Vec<Effect>,
}

impl SyncMsg {
    pub fn to_row(&self) -> Row {
        let effects = serde_json::to_string(&self.effects).expect("effects encode");
        Arc::new(
            [
                ("group".to_string(), Value::str(self.group.clone())),
                ("seq".to_string(), Value::int(self.seq as i64)),
                (MESSAGE_ID.to_string(), Value::int(self.message_id)),
                ("effects".to_string(), Value::str(effects)),
            ]
            .into_iter()
            .collect(),
        )
    }

    pub fn from_row(row: &Row) -> Option<SyncMsg> {
        let effects = match row.get("effects")?.as_scalar()? {
            crate::lattice::Scalar::Str(s) => serde_json::from_str(s).ok()?,
            _ => return None,
        };
        let group = match row.get("group")?.as_scalar()? {
            crate::lattice::Scalar::Str(s) => s.clone(),
            _ => return None,
        };
        Some(SyncMsg {
            group,
            seq: row.get("seq")?.as_int()? as u64,
            message_id: row.get(MESSAGE_ID)?.as_int()?,
            effects,
        })
    }
}

#[derive(Debug, Clone, Default)]
pub struct SerialState {
    pub queue: VecDeque<Message>,
    pub done: BTreeSet<i64>,
    /// Syncs applied so far; the next one expected has this seq.
    pub applied: u64,
    pub pending: BTreeMap<u64, SyncMsg>,
}

impl SerialState {
    /// Queues a request unless it already ran or is already waiting.
    pub fn enqueue(&mut self, m: Message) {
        let Some(id) = m.message_id() else { return };
        if self.done.contains(&id) || self.queue.iter().any(|q| q.message_id() == Some(id)) {
            return;
        }
        self.queue.push_back(m);
    }

    pub fn next_ready(&mut self) -> Option<Message> {
        self.queue.pop_front()
    }

    pub fn mark_done(&mut self, id: i64) {
        self.done.insert(id);
        self.queue.retain(|q| q.message_id() != Some(id));
    }

    /// Buffers a sync; returns the syncs now applicable in seq order.
    pub fn receive(&mut self, s: SyncMsg) -> Vec<SyncMsg> {
        if s.seq >= self.applied {
            self.pending.insert(s.seq, s);
        }
        let mut ready = Vec::new();
        while let Some(s) = self.pending.remove(&self.applied) {
            self.applied += 1;
            ready.push(s);
        }
        ready
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn syncs_apply_in_order() {
        let mut s = SerialState::default();
        let mk = |seq, id| SyncMsg {
            group: "g".into(),
            seq,
            message_id: id,
            effects: vec![],
        };
        assert!(s.receive(mk(1, 11)).is_empty());
        let ready = s.receive(mk(0, 10));
        assert_eq!(ready.iter().map(|r| r.seq).collect::<Vec<_>>(), vec![0, 1]);
        assert!(s.receive(mk(0, 10)).is_empty());
        assert_eq!(s.applied, 2);
    }

    #[test]
    fn sync_row_round_trip() {
        let s = SyncMsg {
            group: "g".into(),
            seq: 3,
            message_id: 9,
            effects: vec![Effect::AssignVar {
                var: "x".into(),
                value: Value::int(1),
            }],
        };
        let back = SyncMsg::from_row(&s.to_row()).unwrap();
        assert_eq!(back.effects, s.effects);
        assert_eq!((back.seq, back.message_id), (3, 9));
    }
}
