//! Round-synchronous message passing between nodes.
//!
//! Sends are buffered until [`Mailbox::deliver`], which is the round barrier:
//! no node observes a message from the current round before every node has
//! sent. Delivery is reliable and ordered by sender id.

use nalgebra::DVector;

use crate::topology::NodeId;

#[derive(Debug, Clone)]
pub struct Message {
    pub from: NodeId,
    pub payload: DVector<f64>,
}

#[derive(Debug)]
pub struct Mailbox {
    pending: Vec<Vec<Message>>,
}

impl Mailbox {
    pub fn new(node_count: usize) -> Self {
        Self { pending: vec![Vec::new(); node_count] }
    }

    pub fn send(&mut self, from: NodeId, to: NodeId, payload: DVector<f64>) {
        self.pending[to].push(Message { from, payload });
    }

    /// Hands every recipient its messages, sorted by sender, and empties the
    /// buffers for the next round.
    pub fn deliver(&mut self) -> Vec<Vec<Message>> {
        let n = self.pending.len();
        let mut out = std::mem::replace(&mut self.pending, vec![Vec::new(); n]);
        for inbox in &mut out {
            inbox.sort_by_key(|m| m.from);
        }
        out
    }
}
