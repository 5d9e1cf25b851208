//! Deterministic discrete-event network.
//!
//! Time is an integer count of microseconds. A message sent at `t` arrives at
//! `t + d0/2 + U(0, ε_max/2)`, so a request/response pair spans
//! `d0 + ε` with `ε ∈ [0, ε_max]`. Slot ticks fire every 100 ms.
//!
//! The loop is pull-driven: callers repeatedly take [`NetEvent`]s from
//! [`Network::next_event`] and react by calling [`Network::send`].

use std::cmp::Reverse;
use std::collections::{BTreeSet, BinaryHeap};
use std::io::Write;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::{rng_from_seed, SimRng};

pub type NodeId = u32;

pub const US_PER_MS: u64 = 1_000;
pub const DEFAULT_SLOT_MS: u64 = 100;
pub const DEFAULT_PROCESSING_MS: f64 = 1.0;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum NetError {
    #[error("unknown node {0}")]
    UnknownNode(NodeId),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LinkModel {
    pub d0_ms: f64,
    pub jitter_max_ms: f64,
    pub seed: u64,
}

impl Default for LinkModel {
    fn default() -> Self {
        Self {
            d0_ms: 20.0,
            jitter_max_ms: 15.0,
            seed: 0,
        }
    }
}

impl LinkModel {
    pub fn zero_jitter(d0_ms: f64) -> Self {
        Self {
            d0_ms,
            jitter_max_ms: 0.0,
            seed: 0,
        }
    }

    pub fn sampler(&self) -> RttSampler {
        RttSampler {
            link: *self,
            rng: rng_from_seed(self.seed),
        }
    }

    pub fn mean_rtt_ms(&self) -> f64 {
        self.d0_ms + self.jitter_max_ms / 2.0
    }

    fn one_way_us(&self, rng: &mut SimRng) -> u64 {
        let base = (self.d0_ms * US_PER_MS as f64 / 2.0).round() as u64;
        let jitter = if self.jitter_max_ms > 0.0 {
            let half_us = self.jitter_max_ms * US_PER_MS as f64 / 2.0;
            (rng.random::<f64>() * half_us).round() as u64
        } else {
            0
        };
        base + jitter
    }
}

/// Stream of round-trip samples `d0 + U(0, ε_max)`.
#[derive(Debug, Clone)]
pub struct RttSampler {
    link: LinkModel,
    rng: SimRng,
}

impl RttSampler {
    pub fn sample_rtt(&mut self) -> f64 {
        self.link.d0_ms + self.rng.random::<f64>() * self.link.jitter_max_ms
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Message {
    pub seq: u64,
    pub src: NodeId,
    pub dst: NodeId,
    pub kind: &'static str,
    pub payload: Vec<u8>,
    pub sent_at_us: u64,
    pub deliver_at_us: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum NetEvent {
    /// Slot boundary at the given time.
    Slot {
        t_us: u64,
        index: u64,
    },
    Deliver(Message),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TraceRow {
    pub t_us: u64,
    pub src: NodeId,
    pub dst: NodeId,
    pub kind: &'static str,
    pub size: usize,
}

#[derive(Debug)]
pub struct Network {
    link: LinkModel,
    rng: SimRng,
    nodes: BTreeSet<NodeId>,
    down: BTreeSet<(NodeId, NodeId)>,
    queue: BinaryHeap<Reverse<(u64, u64)>>,
    pending: std::collections::HashMap<u64, Message>,
    seq: u64,
    now_us: u64,
    slot_us: u64,
    next_slot: u64,
    processing_us: u64,
    dropped: u64,
    trace: Option<Vec<TraceRow>>,
}

impl Network {
    pub fn new(link: LinkModel) -> Self {
        Self {
            link,
            rng: rng_from_seed(link.seed),
            nodes: BTreeSet::new(),
            down: BTreeSet::new(),
            queue: BinaryHeap::new(),
            pending: Default::default(),
            seq: 0,
            now_us: 0,
            slot_us: DEFAULT_SLOT_MS * US_PER_MS,
            next_slot: 0,
            processing_us: (DEFAULT_PROCESSING_MS * US_PER_MS as f64).round() as u64,
            dropped: 0,
            trace: None,
        }
    }

    pub fn with_nodes(link: LinkModel, n: u32) -> Self {
        let mut net = Self::new(link);
        for i in 0..n {
            net.add_node(i);
        }
        net
    }

    pub fn set_slot_ms(&mut self, slot_ms: u64) {
        assert!(slot_ms > 0);
        self.slot_us = slot_ms * US_PER_MS;
    }

    pub fn set_processing_ms(&mut self, ms: f64) {
        self.processing_us = (ms * US_PER_MS as f64).round() as u64;
    }

    /// Configured per-message processing cost.
    pub fn processing_us(&self) -> u64 {
        self.processing_us
    }

    pub fn enable_trace(&mut self) {
        self.trace.get_or_insert_with(Vec::new);
    }

    pub fn trace(&self) -> &[TraceRow] {
        self.trace.as_deref().unwrap_or(&[])
    }

    pub fn write_trace_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "t_us,src,dst,type,size")?;
        for r in self.trace() {
            writeln!(w, "{},{},{},{},{}", r.t_us, r.src, r.dst, r.kind, r.size)?;
        }
        Ok(())
    }

    pub fn add_node(&mut self, id: NodeId) {
        self.nodes.insert(id);
    }

    pub fn nodes(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.nodes.iter().copied()
    }

    /// Marks the directed pair in both directions as partitioned. Messages
    /// sent over a down link are dropped.
    pub fn set_link_down(&mut self, a: NodeId, b: NodeId, down: bool) {
        for pair in [(a, b), (b, a)] {
            if down {
                self.down.insert(pair);
            } else {
                self.down.remove(&pair);
            }
        }
    }

    pub fn is_link_down(&self, a: NodeId, b: NodeId) -> bool {
        self.down.contains(&(a, b))
    }

    pub fn dropped(&self) -> u64 {
        self.dropped
    }

    pub fn now_us(&self) -> u64 {
        self.now_us
    }

    pub fn now_ms(&self) -> f64 {
        self.now_us as f64 / US_PER_MS as f64
    }

    pub fn in_flight(&self) -> usize {
        self.pending.len()
    }

    /// Sends now. Returns the scheduled delivery time, or `None` when the
    /// link is down.
    pub fn send(
        &mut self,
        src: NodeId,
        dst: NodeId,
        kind: &'static str,
        payload: Vec<u8>,
    ) -> Result<Option<u64>, NetError> {
        self.send_after(0, src, dst, kind, payload)
    }

    /// Sends after `delay_us` of local work at the sender.
    pub fn send_after(
        &mut self,
        delay_us: u64,
        src: NodeId,
        dst: NodeId,
        kind: &'static str,
        payload: Vec<u8>,
    ) -> Result<Option<u64>, NetError> {
        for n in [src, dst] {
            if !self.nodes.contains(&n) {
                return Err(NetError::UnknownNode(n));
            }
        }
        let sent_at_us = self.now_us + delay_us;
        // jitter is drawn even for dropped messages so partitions do not
        // shift the random stream of unrelated traffic
        let deliver_at_us = sent_at_us + self.link.one_way_us(&mut self.rng);
        if self.down.contains(&(src, dst)) {
            self.dropped += 1;
            return Ok(None);
        }
        let seq = self.seq;
        self.seq += 1;
        self.queue.push(Reverse((deliver_at_us, seq)));
        self.pending.insert(
            seq,
            Message {
                seq,
                src,
                dst,
                kind,
                payload,
                sent_at_us,
                deliver_at_us,
            },
        );
        Ok(Some(deliver_at_us))
    }

    /// Next event with timestamp `<= until_us`, advancing the clock. Slot
    /// ticks precede deliveries carrying the same timestamp; deliveries with
    /// equal timestamps leave in send order.
    pub fn next_event(&mut self, until_us: u64) -> Option<NetEvent> {
        let slot_t = self.next_slot * self.slot_us;
        let msg_t = self.queue.peek().map(|Reverse((t, _))| *t);
        let take_slot = match msg_t {
            Some(t) => slot_t <= t,
            None => true,
        };
        if take_slot {
            if slot_t > until_us {
                return None;
            }
            self.now_us = slot_t;
            let index = self.next_slot;
            self.next_slot += 1;
            return Some(NetEvent::Slot {
                t_us: slot_t,
                index,
            });
        }
        let t = msg_t.expect("checked above");
        if t > until_us {
            return None;
        }
        let Reverse((_, seq)) = self.queue.pop().expect("peeked");
        let msg = self
            .pending
            .remove(&seq)
            .expect("queued message is pending");
        self.now_us = t;
        if let Some(trace) = self.trace.as_mut() {
            trace.push(TraceRow {
                t_us: t,
                src: msg.src,
                dst: msg.dst,
                kind: msg.kind,
                size: msg.payload.len(),
            });
        }
        Some(NetEvent::Deliver(msg))
    }

    /// Drains every event up to `until_ms` without reacting to any of them.
    pub fn run_until(&mut self, until_ms: u64) -> Vec<NetEvent> {
        let until = until_ms * US_PER_MS;
        let mut out = Vec::new();
        while let Some(ev) = self.next_event(until) {
            out.push(ev);
        }
        self.now_us = self.now_us.max(until);
        out
    }

    /// Moves the clock forward to `t_us`, keeping messages in flight. Call
    /// after draining events up to `t_us`.
    pub fn advance_to(&mut self, t_us: u64) {
        self.now_us = self.now_us.max(t_us);
    }

    /// Skips to `t_us` without firing the slot ticks in between. Pending
    /// messages scheduled earlier are discarded.
    pub fn reset_clock(&mut self, t_us: u64) {
        self.queue.clear();
        self.pending.clear();
        self.now_us = t_us;
        self.next_slot = t_us.div_ceil(self.slot_us);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn deliveries(evs: &[NetEvent]) -> Vec<Message> {
        evs.iter()
            .filter_map(|e| match e {
                NetEvent::Deliver(m) => Some(m.clone()),
                _ => None,
            })
            .collect()
    }

    #[test]
    fn zero_jitter_rtt_is_baseline() {
        let mut s = LinkModel::zero_jitter(20.0).sampler();
        assert!((0..100).all(|_| s.sample_rtt() == 20.0));
    }

    #[test]
    fn rtt_moments() {
        let mut s = LinkModel::default().sampler();
        let xs: Vec<f64> = (0..100_000).map(|_| s.sample_rtt()).collect();
        assert!(xs.iter().all(|&x| (20.0..=35.0).contains(&x)));
        let m = xs.iter().sum::<f64>() / xs.len() as f64;
        assert!((m - 27.5).abs() < 0.1, "{m}");
        let mut s2 = LinkModel::default().sampler();
        assert!(xs.iter().take(50).all(|&x| x == s2.sample_rtt()));
    }

    #[test]
    fn one_way_is_half_baseline() {
        let mut net = Network::with_nodes(LinkModel::zero_jitter(20.0), 2);
        assert_eq!(net.send(0, 1, "ping", vec![1, 2]).unwrap(), Some(10_000));
        let d = deliveries(&net.run_until(50));
        assert_eq!(d.len(), 1);
        assert_eq!(d[0].deliver_at_us, 10_000);
    }

    #[test]
    fn slot_hooks() {
        let mut net = Network::with_nodes(LinkModel::default(), 1);
        let slots: Vec<u64> = net
            .run_until(250)
            .iter()
            .filter_map(|e| match e {
                NetEvent::Slot { t_us, .. } => Some(t_us / US_PER_MS),
                _ => None,
            })
            .collect();
        assert_eq!(slots, vec![0, 100, 200]);
    }

    #[test]
    fn unknown_node() {
        let mut net = Network::with_nodes(LinkModel::default(), 2);
        assert_eq!(net.send(0, 7, "x", vec![]), Err(NetError::UnknownNode(7)));
    }

    #[test]
    fn deterministic_ordered_delivery() {
        let run = || {
            let mut net = Network::with_nodes(
                LinkModel {
                    seed: 11,
                    ..Default::default()
                },
                4,
            );
            for i in 0..1000u32 {
                net.send(i % 4, (i + 1) % 4, "m", i.to_le_bytes().to_vec())
                    .unwrap();
            }
            deliveries(&net.run_until(1000))
        };
        let a = run();
        assert_eq!(a.len(), 1000);
        assert_eq!(a, run());
        assert!(a
            .windows(2)
            .all(|w| w[0].deliver_at_us <= w[1].deliver_at_us));
        assert!(a.iter().all(|m| m.deliver_at_us >= m.sent_at_us));
    }

    #[test]
    fn equal_timestamps_fifo() {
        let mut net = Network::with_nodes(LinkModel::zero_jitter(20.0), 2);
        for i in 0..5u8 {
            net.send(0, 1, "m", vec![i]).unwrap();
        }
        let d = deliveries(&net.run_until(20));
        assert_eq!(
            d.iter().map(|m| m.payload[0]).collect::<Vec<_>>(),
            vec![0, 1, 2, 3, 4]
        );
    }

    #[test]
    fn request_response_round_trip() {
        let mut net = Network::with_nodes(
            LinkModel {
                seed: 5,
                ..Default::default()
            },
            2,
        );
        let mut hist = [0u32; 16];
        for _ in 0..10_000 {
            let t0 = net.now_us();
            net.send(0, 1, "req", vec![]).unwrap();
            let rtt = loop {
                match net.next_event(u64::MAX).unwrap() {
                    NetEvent::Deliver(m) if m.kind == "req" => {
                        net.send(1, 0, "resp", vec![]).unwrap();
                    }
                    NetEvent::Deliver(m) => break m.deliver_at_us - t0,
                    NetEvent::Slot { .. } => {}
                }
            };
            let eps = rtt as f64 / 1000.0 - 20.0;
            assert!((0.0..=15.0).contains(&eps), "{eps}");
            hist[(eps as usize).min(15)] += 1;
        }
        // sum of two U(0, 7.5): every 1 ms bin in [0, 15) is visited
        assert!(hist[..15].iter().all(|&c| c > 0));
    }

    #[test]
    fn one_round_protocol_mean_is_rtt_plus_processing() {
        let mut net = Network::with_nodes(
            LinkModel {
                seed: 8,
                ..Default::default()
            },
            2,
        );
        let proc = net.processing_us();
        let mut total = 0u64;
        let n = 20_000;
        for _ in 0..n {
            let t0 = net.now_us();
            net.send(0, 1, "req", vec![]).unwrap();
            while net.in_flight() > 0 {
                match net.next_event(u64::MAX).unwrap() {
                    NetEvent::Deliver(m) if m.kind == "req" => {
                        net.send_after(proc, 1, 0, "resp", vec![]).unwrap();
                    }
                    NetEvent::Deliver(m) => total += m.deliver_at_us - t0,
                    NetEvent::Slot { .. } => {}
                }
            }
        }
        let mean_ms = total as f64 / n as f64 / 1000.0;
        assert!((mean_ms - (27.5 + 1.0)).abs() < 0.1, "{mean_ms}");
    }

    #[test]
    fn partition_drops() {
        let mut net = Network::with_nodes(LinkModel::default(), 3);
        net.set_link_down(0, 1, true);
        assert_eq!(net.send(1, 0, "x", vec![]).unwrap(), None);
        assert!(net.send(0, 2, "x", vec![]).unwrap().is_some());
        assert_eq!(net.dropped(), 1);
        net.set_link_down(0, 1, false);
        assert!(net.send(0, 1, "x", vec![]).unwrap().is_some());
    }

    #[test]
    fn trace_csv() {
        let mut net = Network::with_nodes(LinkModel::zero_jitter(20.0), 2);
        net.enable_trace();
        net.send(0, 1, "hello", vec![0; 32]).unwrap();
        net.run_until(100);
        let mut buf = Vec::new();
        net.write_trace_csv(&mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "t_us,src,dst,type,size\n10000,0,1,hello,32\n"
        );
    }
}
