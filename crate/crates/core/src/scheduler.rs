//! Virtual-clock event loop driving client activations and message delivery.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use crate::error::{config_err, Result};
use crate::numerics::{sample, streams, DistKind, DistSpec, Rng};
use crate::protocol::{ClientState, Message, Mode, ServerState, StepOrder};

/// Gap law between consecutive activations of one client.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ActivationLaw {
    /// Exponential gaps with rate `rate` (mean gap `1/rate`).
    Poisson { rate: f64 },
    /// Exponential gaps with mean `mean`.
    ExpDelay { mean: f64 },
    Periodic { period: f64 },
}

impl ActivationLaw {
    fn validate(&self) -> Result<()> {
        let v = match *self {
            ActivationLaw::Poisson { rate } => rate,
            ActivationLaw::ExpDelay { mean } => mean,
            ActivationLaw::Periodic { period } => period,
        };
        if v > 0.0 && v.is_finite() {
            Ok(())
        } else {
            Err(config_err!("activation parameter must be positive and finite, got {v}"))
        }
    }

    /// Long-run activations per unit time.
    pub fn intensity(&self) -> f64 {
        match *self {
            ActivationLaw::Poisson { rate } => rate,
            ActivationLaw::ExpDelay { mean } => 1.0 / mean,
            ActivationLaw::Periodic { period } => 1.0 / period,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ActivationSpec {
    pub laws: Vec<ActivationLaw>,
    /// One-way message latency; `None` delivers instantly.
    pub latency: Option<DistSpec>,
}

impl ActivationSpec {
    pub fn new(laws: Vec<ActivationLaw>) -> Self {
        ActivationSpec { laws, latency: None }
    }

    pub fn validate(&self, clients: usize) -> Result<()> {
        if self.laws.len() != clients {
            return Err(config_err!(
                "activation spec lists {} clients, the run has {clients}",
                self.laws.len()
            ));
        }
        self.laws.iter().try_for_each(ActivationLaw::validate)?;
        if let Some(l) = &self.latency {
            l.validate()?;
            if l.dim != 1 {
                return Err(config_err!("latency law must be scalar"));
            }
            if let DistKind::Gaussian { .. } | DistKind::UniformSymmetric { .. } = l.kind {
                return Err(config_err!("latency law must be nonnegative (exponential or categorical)"));
            }
        }
        Ok(())
    }
}

/// Time of client `m`'s next activation after `now`.
pub fn next_activation(spec: &ActivationSpec, m: usize, now: f64, rng: &mut Rng) -> Result<f64> {
    let law = spec
        .laws
        .get(m)
        .ok_or_else(|| config_err!("no activation law for client {m}"))?;
    law.validate()?;
    let gap = match *law {
        ActivationLaw::Poisson { rate } => sample(&DistSpec::exponential(rate, 1), rng)?[0],
        ActivationLaw::ExpDelay { mean } => sample(&DistSpec::exponential(1.0 / mean, 1), rng)?[0],
        ActivationLaw::Periodic { period } => period,
    };
    // Exponential draws can be exactly zero; keep per-client times strictly increasing.
    let next = now + gap;
    Ok(if next > now { next } else { f64::from_bits(now.to_bits() + 1).max(f64::MIN_POSITIVE) })
}

#[derive(Clone, Debug)]
enum Event {
    Activate(usize),
    ToServer(Message),
    ToClient(usize, Message),
}

struct Entry {
    time: f64,
    seq: u64,
    event: Event,
}

impl PartialEq for Entry {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Entry {}

impl PartialOrd for Entry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Entry {
    // Reversed so the max-heap pops the earliest time, then the lowest sequence number.
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .time
            .total_cmp(&self.time)
            .then_with(|| other.seq.cmp(&self.seq))
    }
}

/// Time-ordered queue; equal times pop in insertion order.
#[derive(Default)]
pub struct EventQueue {
    heap: BinaryHeap<Entry>,
    seq: u64,
}

impl EventQueue {
    pub fn new() -> Self {
        EventQueue::default()
    }

    fn push(&mut self, time: f64, event: Event) {
        self.heap.push(Entry {
            time,
            seq: self.seq,
            event,
        });
        self.seq += 1;
    }

    fn pop(&mut self) -> Option<(f64, Event)> {
        self.heap.pop().map(|e| (e.time, e.event))
    }

    pub fn len(&self) -> usize {
        self.heap.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heap.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StopCondition {
    pub max_k: Option<u64>,
    pub max_time: Option<f64>,
}

/// Counter values at which metrics are recorded (always including 0 and the last).
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum EvalCadence {
    Every(u64),
    /// About `per_decade` points per factor of ten in `k`.
    LogSpaced { per_decade: u32 },
}

impl EvalCadence {
    pub fn hits(&self, k: u64) -> bool {
        match *self {
            EvalCadence::Every(e) => e > 0 && k % e == 0,
            EvalCadence::LogSpaced { per_decade } => {
                if k <= 1 {
                    return true;
                }
                let pd = per_decade.max(1) as f64;
                let i = ((k as f64).log10() * pd).round();
                [i - 1.0, i, i + 1.0]
                    .iter()
                    .any(|&j| j >= 0.0 && 10f64.powf(j / pd).round() as u64 == k)
            }
        }
    }
}

/// One metrics row.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub k: u64,
    pub virtual_time: f64,
    pub train_loss: f64,
    pub grad_norm_sq: f64,
    pub test_metric: f64,
    pub max_tau_read: u64,
    pub lyapunov: Option<f64>,
}

/// What an observer sees at an evaluation point.
pub struct Observation<'a> {
    pub k: u64,
    pub time: f64,
    /// Largest staleness read since the previous observation.
    pub max_tau_read: u64,
    pub server: &'a ServerState,
    pub clients: &'a [ClientState],
}

pub trait Observer {
    fn observe(&mut self, at: Observation<'_>) -> Result<MetricsRow>;

    /// Called after every completed server update.
    fn after_update(&mut self, _server: &ServerState, _clients: &[ClientState]) -> Result<()> {
        Ok(())
    }
}

impl<F> Observer for F
where
    F: FnMut(Observation<'_>) -> Result<MetricsRow>,
{
    fn observe(&mut self, at: Observation<'_>) -> Result<MetricsRow> {
        self(at)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunLog {
    /// `key = value` lines describing the run.
    pub header: Vec<(String, String)>,
    pub rows: Vec<MetricsRow>,
    /// Uploads received from each client.
    pub uploads: Vec<u64>,
    pub activations: Vec<u64>,
    pub final_time: f64,
    pub events: u64,
}

/// Runs the event loop until `stop`. The cache must already be warm.
pub fn run(
    server: &mut ServerState,
    clients: &mut [ClientState],
    spec: &ActivationSpec,
    stop: StopCondition,
    cadence: EvalCadence,
    seed: u64,
    observer: &mut dyn Observer,
) -> Result<RunLog> {
    let m_total = clients.len();
    spec.validate(m_total)?;
    if stop.max_k.is_none() && stop.max_time.is_none() {
        return Err(config_err!("stop condition needs max_k or max_time"));
    }
    let root = Rng::from_seed(seed).fork(streams::ACTIVATION);
    let mut act_rng: Vec<Rng> = (0..m_total).map(|m| root.fork(m as u64)).collect();
    let mut latency_rng = root.fork(u64::MAX);
    let draw_latency = |rng: &mut Rng| -> Result<f64> {
        match &spec.latency {
            None => Ok(0.0),
            Some(l) => Ok(sample(l, rng)?[0].max(0.0)),
        }
    };

    let mut log = RunLog {
        uploads: vec![0; m_total],
        activations: vec![0; m_total],
        ..Default::default()
    };
    fn evaluate(
        observer: &mut dyn Observer,
        server: &mut ServerState,
        clients: &[ClientState],
        time: f64,
        log: &mut RunLog,
    ) -> Result<()> {
        let max_tau_read = server.audit.take_window_max();
        let row = observer.observe(Observation {
            k: server.k,
            time,
            max_tau_read,
            server,
            clients,
        })?;
        log.rows.push(row);
        Ok(())
    }
    evaluate(observer, server, clients, 0.0, &mut log)?;
    let mut last_eval = Some(0u64);

    let mut stopped_by_count = false;
    let done = |server: &ServerState, time: f64| {
        stop.max_k.is_some_and(|k| server.k >= k) || stop.max_time.is_some_and(|t| time > t)
    };
    let mut queue = EventQueue::new();
    let mut now = 0.0;
    if !done(server, now) {
        for (m, rng) in act_rng.iter_mut().enumerate() {
            let t = next_activation(spec, m, 0.0, rng)?;
            queue.push(t, Event::Activate(m));
        }
    }
    let mut waiting: Vec<usize> = Vec::new();
    while let Some((time, event)) = queue.pop() {
        if stop.max_time.is_some_and(|t| time > t) {
            break;
        }
        now = time;
        log.events += 1;
        match event {
            Event::Activate(m) => {
                if matches!(server.mode, Mode::TSync(_)) && server.buffered_clients().contains(&m) {
                    waiting.push(m);
                    continue;
                }
                log.activations[m] += 1;
                let msgs = clients[m].begin_activation(server.k)?;
                let lat = draw_latency(&mut latency_rng)?;
                for msg in msgs {
                    queue.push(time + lat, Event::ToServer(msg));
                }
            }
            Event::ToServer(msg) => {
                let from = msg.client();
                let is_upload = matches!(msg, Message::Upload { .. });
                let k_before = server.k;
                server.clock = time;
                let reply = server.handle(msg, &mut &mut *clients)?;
                if is_upload {
                    log.uploads[from] += 1;
                    // A footnote-order activation ends with its upload.
                    if clients[from].step_order == StepOrder::Footnote && !clients[from].is_busy() {
                        let t = next_activation(spec, from, time, &mut act_rng[from])?;
                        queue.push(t, Event::Activate(from));
                    }
                }
                if let Some(r) = reply {
                    let lat = draw_latency(&mut latency_rng)?;
                    queue.push(time + lat, Event::ToClient(from, r));
                }
                if server.k != k_before {
                    observer.after_update(server, clients)?;
                    if stop.max_k.is_some_and(|k| server.k >= k) {
                        stopped_by_count = true;
                        break;
                    }
                    if !waiting.is_empty() && server.buffered_clients().is_empty() {
                        for m in waiting.drain(..) {
                            queue.push(time, Event::Activate(m));
                        }
                    }
                    if cadence.hits(server.k) {
                        evaluate(observer, server, clients, time, &mut log)?;
                        last_eval = Some(server.k);
                    }
                }
            }
            Event::ToClient(m, reply) => {
                let k_iter = clients[m].pending_counter().unwrap_or(server.k);
                let eta = server.schedule.at(k_iter).1;
                let msgs = clients[m].finish_activation(reply, eta)?;
                if msgs.is_empty() {
                    let t = next_activation(spec, m, time, &mut act_rng[m])?;
                    queue.push(t, Event::Activate(m));
                } else {
                    let lat = draw_latency(&mut latency_rng)?;
                    for msg in msgs {
                        queue.push(time + lat, Event::ToServer(msg));
                    }
                }
            }
        }
    }
    if stopped_by_count {
        // Paper-order activations whose upload was counted still owe their
        // client update; nothing new starts and no further upload is taken.
        while let Some((time, event)) = queue.pop() {
            match event {
                Event::ToServer(msg @ Message::Query { .. }) if clients[msg.client()].step_order == StepOrder::Paper => {
                    now = time;
                    log.events += 1;
                    server.clock = time;
                    let from = msg.client();
                    if let Some(r) = server.handle(msg, &mut &mut *clients)? {
                        let lat = draw_latency(&mut latency_rng)?;
                        queue.push(time + lat, Event::ToClient(from, r));
                    }
                }
                Event::ToClient(m, reply) if clients[m].step_order == StepOrder::Paper => {
                    now = time;
                    log.events += 1;
                    let k_iter = clients[m].pending_counter().unwrap_or(server.k);
                    let eta = server.schedule.at(k_iter).1;
                    clients[m].finish_activation(reply, eta)?;
                }
                _ => {}
            }
        }
    }
    if last_eval != Some(server.k) {
        evaluate(observer, server, clients, now, &mut log)?;
    }
    log.final_time = now;
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn periodic_gap() {
        let spec = ActivationSpec::new(vec![ActivationLaw::Periodic { period: 1.0 }]);
        let mut rng = Rng::new(1, 2);
        assert_eq!(next_activation(&spec, 0, 3.0, &mut rng).unwrap(), 4.0);
        assert!(next_activation(&spec, 1, 3.0, &mut rng).is_err());
    }

    #[test]
    fn poisson_mean_gap() {
        let spec = ActivationSpec::new(vec![ActivationLaw::Poisson { rate: 2.0 }]);
        let mut rng = Rng::new(11, 3);
        let mut t = 0.0;
        let n = 100_000;
        for _ in 0..n {
            let next = next_activation(&spec, 0, t, &mut rng).unwrap();
            assert!(next > t);
            t = next;
        }
        assert!((t / n as f64 - 0.5).abs() < 0.01);
    }

    #[test]
    fn equal_rates_interleave_evenly() {
        let spec = ActivationSpec::new(vec![ActivationLaw::Poisson { rate: 1.0 }; 2]);
        let mut rngs = [Rng::new(4, 10), Rng::new(4, 11)];
        let mut q = EventQueue::new();
        for (m, r) in rngs.iter_mut().enumerate() {
            q.push(next_activation(&spec, m, 0.0, r).unwrap(), Event::Activate(m));
        }
        let mut counts = [0u64; 2];
        for _ in 0..100_000 {
            let (t, e) = q.pop().unwrap();
            if let Event::Activate(m) = e {
                counts[m] += 1;
                q.push(next_activation(&spec, m, t, &mut rngs[m]).unwrap(), Event::Activate(m));
            }
        }
        let share = counts[0] as f64 / 100_000.0;
        assert!((share - 0.5).abs() < 0.01, "{share}");
    }

    #[test]
    fn queue_orders_by_time_then_fifo() {
        let mut q = EventQueue::new();
        q.push(2.0, Event::Activate(0));
        q.push(1.0, Event::Activate(1));
        q.push(1.0, Event::Activate(2));
        let order: Vec<usize> = std::iter::from_fn(|| q.pop())
            .map(|(_, e)| match e {
                Event::Activate(m) => m,
                _ => unreachable!(),
            })
            .collect();
        assert_eq!(order, vec![1, 2, 0]);
    }

    #[test]
    fn cadence() {
        assert!(EvalCadence::Every(5).hits(10));
        assert!(!EvalCadence::Every(5).hits(11));
        let c = EvalCadence::LogSpaced { per_decade: 10 };
        let hits: Vec<u64> = (1..=100).filter(|&k| c.hits(k)).collect();
        assert!(hits.contains(&1) && hits.contains(&10) && hits.contains(&100));
        assert!(hits.len() >= 15 && hits.len() <= 25, "{hits:?}");
    }
}
