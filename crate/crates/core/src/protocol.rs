//! Server and client state machines of the asynchronous protocol, the
//! t-synchronous barrier and bounded-delay enforcement.
//!
//! Clients talk to the server only through [`Message`]: embeddings go up,
//! gradients with respect to embeddings come down. Raw features, labels and
//! model parameters never appear in a message.

use crate::data::{sample_minibatch, BatchSpec};
use crate::error::{config_err, protocol_err, Result};
use crate::model::{
    backprop_accumulate, embed_forward, grad_embedding, grad_server, regularizer_grad, EmbeddingParams, ForwardTape,
    PerturbationSpec, RegularizerSpec, ServerHead,
};
use crate::numerics::{streams, Matrix, Rng};
use crate::optimizer::{apply_update_in_place, Schedule};

/// Update rule of the server.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Async,
    /// Update once `t` distinct clients have uploaded.
    TSync(usize),
    /// Refresh any cell whose staleness would exceed `D` before it is read.
    Bounded(u64),
}

impl Mode {
    pub fn name(&self) -> String {
        match self {
            Mode::Async => "async".into(),
            Mode::TSync(t) => format!("tsync({t})"),
            Mode::Bounded(d) => format!("bounded({d})"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StepOrder {
    /// Sample, upload, query, update.
    Paper,
    /// Query and update on the previous batch, then sample and upload.
    Footnote,
}

/// Which extra embeddings a client sends along with an upload.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PushPolicy {
    None,
    /// Every sample outside the batch.
    All,
}

const EMPTY: u64 = u64::MAX;

/// Latest embedding the server holds for every `(sample, client)` cell.
#[derive(Clone, Debug)]
pub struct EmbeddingCache {
    n: usize,
    widths: Vec<usize>,
    h: Vec<Vec<f64>>,
    stamp: Vec<Vec<u64>>,
}

impl EmbeddingCache {
    pub fn new(n: usize, widths: &[usize]) -> Self {
        EmbeddingCache {
            n,
            widths: widths.to_vec(),
            h: widths.iter().map(|w| vec![0.0; n * w]).collect(),
            stamp: widths.iter().map(|_| vec![EMPTY; n]).collect(),
        }
    }

    pub fn n_samples(&self) -> usize {
        self.n
    }

    pub fn n_clients(&self) -> usize {
        self.widths.len()
    }

    pub fn get(&self, n: usize, m: usize) -> &[f64] {
        let w = self.widths[m];
        &self.h[m][n * w..(n + 1) * w]
    }

    /// Iteration at which cell `(n, m)` was produced, `None` if never written.
    pub fn stamp(&self, n: usize, m: usize) -> Option<u64> {
        let s = self.stamp[m][n];
        (s != EMPTY).then_some(s)
    }

    pub fn is_populated(&self) -> bool {
        self.stamp.iter().all(|s| s.iter().all(|&v| v != EMPTY))
    }

    fn set(&mut self, n: usize, m: usize, h: &[f64], stamp: u64) {
        let w = self.widths[m];
        self.h[m][n * w..(n + 1) * w].copy_from_slice(h);
        self.stamp[m][n] = stamp;
    }
}

/// Staleness counters `tau[n][m]`.
///
/// Stored as the counter value at the last reset so that advancing every
/// cell costs nothing: `tau = now - base`.
#[derive(Clone, Debug)]
pub struct DelayTable {
    clients: usize,
    now: i64,
    base: Vec<i64>,
}

impl DelayTable {
    /// Every cell starts at 1.
    pub fn new(n: usize, clients: usize) -> Self {
        DelayTable {
            clients,
            now: 0,
            base: vec![-1; n * clients],
        }
    }

    pub fn tau(&self, n: usize, m: usize) -> u64 {
        (self.now - self.base[n * self.clients + m]) as u64
    }

    /// A cell written during the current iteration reads as 0.
    pub fn mark_fresh(&mut self, n: usize, m: usize) {
        self.base[n * self.clients + m] = self.now;
    }

    /// One iteration passes for every cell.
    pub fn advance(&mut self) {
        self.now += 1;
    }
}

/// Uploaded cells restart at 1, every other cell ages by one.
pub fn update_delays(delays: &mut DelayTable, m: usize, batch: &[usize]) {
    for &n in batch {
        delays.mark_fresh(n, m);
    }
    delays.advance();
}

#[derive(Clone, Debug, PartialEq)]
pub enum Message {
    Upload {
        client: usize,
        indices: Vec<usize>,
        embeddings: Vec<Vec<f64>>,
    },
    /// Cache refresh outside the batch; triggers no model update.
    Push {
        client: usize,
        indices: Vec<usize>,
        embeddings: Vec<Vec<f64>>,
    },
    Query {
        client: usize,
        indices: Vec<usize>,
    },
    QueryReply {
        client: usize,
        indices: Vec<usize>,
        gradients: Vec<Vec<f64>>,
    },
    ForcedRefreshRequest {
        client: usize,
        indices: Vec<usize>,
    },
}

impl Message {
    pub fn kind(&self) -> &'static str {
        match self {
            Message::Upload { .. } => "upload",
            Message::Push { .. } => "push",
            Message::Query { .. } => "query",
            Message::QueryReply { .. } => "reply",
            Message::ForcedRefreshRequest { .. } => "refresh",
        }
    }

    pub fn client(&self) -> usize {
        match self {
            Message::Upload { client, .. }
            | Message::Push { client, .. }
            | Message::Query { client, .. }
            | Message::QueryReply { client, .. }
            | Message::ForcedRefreshRequest { client, .. } => *client,
        }
    }

    pub fn batch_size(&self) -> usize {
        match self {
            Message::Upload { indices, .. }
            | Message::Push { indices, .. }
            | Message::Query { indices, .. }
            | Message::QueryReply { indices, .. }
            | Message::ForcedRefreshRequest { indices, .. } => indices.len(),
        }
    }
}

/// Answers forced refresh requests synchronously.
pub trait RefreshResponder {
    fn refresh(&mut self, request: &Message) -> Result<Message>;
}

impl RefreshResponder for &mut [ClientState] {
    fn refresh(&mut self, request: &Message) -> Result<Message> {
        let m = request.client();
        let client = self
            .get_mut(m)
            .ok_or_else(|| protocol_err!("refresh request for unknown client {m}"))?;
        client.answer_refresh(request)
    }
}

/// Refuses every refresh; for modes that never request one.
pub struct NoRefresh;

impl RefreshResponder for NoRefresh {
    fn refresh(&mut self, request: &Message) -> Result<Message> {
        Err(protocol_err!("unexpected refresh request for client {}", request.client()))
    }
}

/// Per-client histograms of staleness at read time.
#[derive(Clone, Debug, Default)]
pub struct StalenessAudit {
    /// `hist[m][tau]` counts reads of client `m`'s cells at staleness `tau >= 1`.
    pub hist: Vec<Vec<u64>>,
    pub max_overall: u64,
    window_max: u64,
    pub refreshes: u64,
}

impl StalenessAudit {
    fn new(clients: usize) -> Self {
        StalenessAudit {
            hist: vec![Vec::new(); clients],
            ..Default::default()
        }
    }

    fn record(&mut self, m: usize, tau: u64) {
        if tau == 0 {
            return;
        }
        let h = &mut self.hist[m];
        let t = tau as usize;
        if h.len() <= t {
            h.resize(t + 1, 0);
        }
        h[t] += 1;
        self.max_overall = self.max_overall.max(tau);
        self.window_max = self.window_max.max(tau);
    }

    /// Largest staleness read since the previous call.
    pub fn take_window_max(&mut self) -> u64 {
        std::mem::take(&mut self.window_max)
    }
}

/// One line of the optional event trace.
#[derive(Clone, Debug, PartialEq)]
pub struct TraceRow {
    pub virtual_time: f64,
    pub k: u64,
    pub kind: &'static str,
    pub client: usize,
    pub batch_size: usize,
    pub max_tau_read: u64,
}

#[derive(Clone, Debug)]
struct Buffered {
    client: usize,
    indices: Vec<usize>,
    embeddings: Vec<Vec<f64>>,
}

#[derive(Clone, Debug)]
pub struct ServerState {
    pub head: ServerHead,
    pub cache: EmbeddingCache,
    pub delays: DelayTable,
    /// Completed server-model updates.
    pub k: u64,
    pub mode: Mode,
    pub schedule: Schedule,
    pub audit: StalenessAudit,
    /// Virtual time stamped on trace rows.
    pub clock: f64,
    pub trace: Option<Vec<TraceRow>>,
    labels: Vec<f64>,
    pending: Vec<Buffered>,
}

impl ServerState {
    pub fn new(head: ServerHead, labels: Vec<f64>, mode: Mode, schedule: Schedule) -> Result<Self> {
        let clients = head.num_clients();
        match mode {
            Mode::TSync(t) if t == 0 || t > clients => {
                return Err(config_err!("t-synchronous t must satisfy 1 <= t <= M = {clients}, got {t}"))
            }
            Mode::Bounded(0) => return Err(config_err!("delay bound D must be >= 1")),
            _ => {}
        }
        for &y in &labels {
            head.loss.check_label(y)?;
        }
        let n = labels.len();
        Ok(ServerState {
            cache: EmbeddingCache::new(n, head.client_widths()),
            delays: DelayTable::new(n, clients),
            k: 0,
            mode,
            schedule,
            audit: StalenessAudit::new(clients),
            clock: 0.0,
            trace: None,
            labels,
            pending: Vec::new(),
            head,
        })
    }

    pub fn n_samples(&self) -> usize {
        self.labels.len()
    }

    pub fn n_clients(&self) -> usize {
        self.head.num_clients()
    }

    /// Clients whose upload waits at the t-synchronous barrier.
    pub fn buffered_clients(&self) -> Vec<usize> {
        self.pending.iter().map(|b| b.client).collect()
    }

    fn check_cells(&self, m: usize, indices: &[usize], embeddings: Option<&[Vec<f64>]>) -> Result<()> {
        if m >= self.n_clients() {
            return Err(protocol_err!("unknown client {m} (M = {})", self.n_clients()));
        }
        if let Some(&n) = indices.iter().find(|&&n| n >= self.n_samples()) {
            return Err(protocol_err!("sample index {n} out of range (N = {})", self.n_samples()));
        }
        if let Some(e) = embeddings {
            let w = self.head.client_widths()[m];
            if e.len() != indices.len() || e.iter().any(|h| h.len() != w) {
                return Err(protocol_err!("client {m} sent embeddings that do not match its width {w}"));
            }
        }
        Ok(())
    }

    fn log(&mut self, kind: &'static str, client: usize, batch_size: usize, max_tau_read: u64) {
        if let Some(trace) = self.trace.as_mut() {
            trace.push(TraceRow {
                virtual_time: self.clock,
                k: self.k,
                kind,
                client,
                batch_size,
                max_tau_read,
            });
        }
    }

    /// Reads cell `(n, m)` for a gradient evaluation, refreshing it first in
    /// bounded mode if it is too stale. Returns the staleness actually read.
    fn prepare_reads(
        &mut self,
        indices: &[usize],
        skip: Option<usize>,
        responder: &mut dyn RefreshResponder,
    ) -> Result<u64> {
        let clients = self.n_clients();
        if let Mode::Bounded(d) = self.mode {
            for m in 0..clients {
                if Some(m) == skip {
                    continue;
                }
                let mut stale: Vec<usize> = indices.iter().copied().filter(|&n| self.delays.tau(n, m) > d).collect();
                stale.sort_unstable();
                stale.dedup();
                if stale.is_empty() {
                    continue;
                }
                let request = Message::ForcedRefreshRequest {
                    client: m,
                    indices: stale,
                };
                self.log("refresh", m, request.batch_size(), 0);
                match responder.refresh(&request)? {
                    Message::Push {
                        client,
                        indices,
                        embeddings,
                    } if client == m => {
                        self.check_cells(m, &indices, Some(&embeddings))?;
                        for (n, h) in indices.iter().zip(&embeddings) {
                            self.cache.set(*n, m, h, self.k);
                            self.delays.mark_fresh(*n, m);
                        }
                        self.audit.refreshes += indices.len() as u64;
                    }
                    other => {
                        return Err(protocol_err!("client {m} answered a refresh with a {} message", other.kind()))
                    }
                }
            }
        }
        let mut max_tau = 0;
        for &n in indices {
            for m in 0..clients {
                if Some(m) == skip {
                    continue;
                }
                let tau = self.delays.tau(n, m);
                debug_assert!({
                    let s = self.cache.stamp(n, m).expect("read of an empty cell");
                    tau == self.k - s || (s == 0 && tau == self.k + 1)
                });
                self.audit.record(m, tau);
                max_tau = max_tau.max(tau);
            }
        }
        Ok(max_tau)
    }

    /// Averaged head gradient over one upload, with the uploaded embeddings
    /// standing in for client `m`'s cells.
    fn server_gradient(&self, m: usize, indices: &[usize], embeddings: &[Vec<f64>], out: &mut [f64]) -> Result<()> {
        let scale = 1.0 / indices.len() as f64;
        let clients = self.n_clients();
        let mut cells: Vec<&[f64]> = Vec::with_capacity(clients);
        for (n, h) in indices.iter().zip(embeddings) {
            cells.clear();
            for j in 0..clients {
                cells.push(if j == m { h } else { self.cache.get(*n, j) });
            }
            let g = grad_server(&self.head, &cells, self.labels[*n])?;
            for (o, gi) in out.iter_mut().zip(&g) {
                *o += scale * gi;
            }
        }
        Ok(())
    }

    /// Writes an upload into the cache and, depending on the mode, updates the head.
    pub fn handle_upload(
        &mut self,
        client: usize,
        indices: Vec<usize>,
        embeddings: Vec<Vec<f64>>,
        responder: &mut dyn RefreshResponder,
    ) -> Result<()> {
        self.check_cells(client, &indices, Some(&embeddings))?;
        if indices.is_empty() {
            return Err(protocol_err!("client {client} uploaded an empty batch"));
        }
        if !self.cache.is_populated() {
            return Err(protocol_err!("upload before the initialization pass"));
        }
        match self.mode {
            Mode::Async | Mode::Bounded(_) => {
                for (n, h) in indices.iter().zip(&embeddings) {
                    self.cache.set(*n, client, h, self.k);
                    self.delays.mark_fresh(*n, client);
                }
                let max_tau = self.prepare_reads(&indices, Some(client), responder)?;
                if self.head.trainable {
                    let mut g = vec![0.0; self.head.weights.len()];
                    self.server_gradient(client, &indices, &embeddings, &mut g)?;
                    let eta0 = self.schedule.at(self.k).0;
                    apply_update_in_place(&mut self.head.weights, &g, eta0)?;
                }
                self.log("upload", client, indices.len(), max_tau);
                update_delays(&mut self.delays, client, &indices);
                self.k += 1;
            }
            Mode::TSync(t) => {
                if self.pending.iter().any(|b| b.client == client) {
                    return Err(protocol_err!(
                        "client {client} uploaded twice in one t-synchronous round"
                    ));
                }
                for (n, h) in indices.iter().zip(&embeddings) {
                    self.cache.set(*n, client, h, self.k);
                    self.delays.mark_fresh(*n, client);
                }
                self.log("upload", client, indices.len(), 0);
                self.pending.push(Buffered {
                    client,
                    indices,
                    embeddings,
                });
                if self.pending.len() == t {
                    self.release_barrier(t)?;
                }
            }
        }
        Ok(())
    }

    fn release_barrier(&mut self, t: usize) -> Result<()> {
        let pending = std::mem::take(&mut self.pending);
        let mut max_tau = 0;
        for b in &pending {
            max_tau = max_tau.max(self.prepare_reads(&b.indices, Some(b.client), &mut NoRefresh)?);
        }
        if self.head.trainable {
            let mut g = vec![0.0; self.head.weights.len()];
            for b in &pending {
                self.server_gradient(b.client, &b.indices, &b.embeddings, &mut g)?;
            }
            g.iter_mut().for_each(|v| *v /= t as f64);
            let eta0 = self.schedule.at(self.k).0;
            apply_update_in_place(&mut self.head.weights, &g, eta0)?;
        }
        self.log("update", usize::MAX, pending.iter().map(|b| b.indices.len()).sum(), max_tau);
        for b in &pending {
            for &n in &b.indices {
                self.delays.mark_fresh(n, b.client);
            }
        }
        self.delays.advance();
        self.k += 1;
        Ok(())
    }

    /// Cache refresh without a model update.
    pub fn handle_push(&mut self, client: usize, indices: Vec<usize>, embeddings: Vec<Vec<f64>>) -> Result<()> {
        self.check_cells(client, &indices, Some(&embeddings))?;
        for (n, h) in indices.iter().zip(&embeddings) {
            self.cache.set(*n, client, h, self.k);
            self.delays.mark_fresh(*n, client);
        }
        self.log("push", client, indices.len(), 0);
        Ok(())
    }

    /// Gradients of the loss in client `m`'s embeddings, read from the cache.
    pub fn handle_query(
        &mut self,
        client: usize,
        indices: Vec<usize>,
        responder: &mut dyn RefreshResponder,
    ) -> Result<Message> {
        self.check_cells(client, &indices, None)?;
        if !self.cache.is_populated() {
            return Err(protocol_err!("query before the initialization pass"));
        }
        let max_tau = self.prepare_reads(&indices, None, responder)?;
        let clients = self.n_clients();
        let mut gradients = Vec::with_capacity(indices.len());
        let mut cells: Vec<&[f64]> = Vec::with_capacity(clients);
        for &n in &indices {
            cells.clear();
            cells.extend((0..clients).map(|j| self.cache.get(n, j)));
            gradients.push(grad_embedding(&self.head, &cells, self.labels[n], client)?);
        }
        self.log("query", client, indices.len(), max_tau);
        Ok(Message::QueryReply {
            client,
            indices,
            gradients,
        })
    }

    /// Dispatches a client message; returns the reply, if any.
    pub fn handle(&mut self, msg: Message, responder: &mut dyn RefreshResponder) -> Result<Option<Message>> {
        match msg {
            Message::Upload {
                client,
                indices,
                embeddings,
            } => self.handle_upload(client, indices, embeddings, responder).map(|_| None),
            Message::Push {
                client,
                indices,
                embeddings,
            } => self.handle_push(client, indices, embeddings).map(|_| None),
            Message::Query { client, indices } => self.handle_query(client, indices, responder).map(Some),
            other => Err(protocol_err!("server cannot handle a {} message", other.kind())),
        }
    }
}

#[derive(Clone, Debug)]
struct Batch {
    indices: Vec<usize>,
    tapes: Vec<ForwardTape>,
    /// Counter value when the activation began.
    k: u64,
}

/// Noise streams of one client, one per perturbation site.
#[derive(Clone, Debug)]
struct NoiseStreams {
    upload: Rng,
    refresh: Rng,
    init: Rng,
    push: Rng,
}

#[derive(Clone, Debug)]
pub struct ClientState {
    pub m: usize,
    pub params: EmbeddingParams,
    pub pert: PerturbationSpec,
    pub reg: RegularizerSpec,
    pub batch: BatchSpec,
    pub step_order: StepOrder,
    pub push: PushPolicy,
    /// Local model updates performed.
    pub updates: u64,
    features: Matrix,
    batch_rng: Rng,
    noise: NoiseStreams,
    awaiting: Option<Batch>,
    previous: Option<Batch>,
}

impl ClientState {
    /// Streams derive from `(seed, m)`.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        m: usize,
        features: Matrix,
        params: EmbeddingParams,
        pert: PerturbationSpec,
        reg: RegularizerSpec,
        batch: BatchSpec,
        step_order: StepOrder,
        seed: u64,
    ) -> Result<Self> {
        if features.cols() != params.input_dim() {
            return Err(config_err!(
                "client {m} holds {} features but its embedding expects {}",
                features.cols(),
                params.input_dim()
            ));
        }
        pert.validate(params.depth())?;
        batch.validate(features.rows())?;
        let root = Rng::from_seed(seed);
        let noise = root.fork(streams::NOISE).fork(m as u64);
        Ok(ClientState {
            m,
            params,
            pert,
            reg,
            batch,
            step_order,
            push: PushPolicy::None,
            updates: 0,
            batch_rng: root.fork(streams::BATCH).fork(m as u64),
            noise: NoiseStreams {
                upload: noise.fork(streams::SITE_UPLOAD),
                refresh: noise.fork(streams::SITE_REFRESH),
                init: noise.fork(streams::SITE_INIT),
                push: noise.fork(streams::SITE_PUSH),
            },
            features,
            awaiting: None,
            previous: None,
        })
    }

    pub fn n_samples(&self) -> usize {
        self.features.rows()
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    /// True between sending a query and receiving its reply.
    pub fn is_busy(&self) -> bool {
        self.awaiting.is_some()
    }

    fn forward_batch(&self, indices: &[usize], rng: &mut Rng) -> Result<(Vec<Vec<f64>>, Vec<ForwardTape>)> {
        let mut hs = Vec::with_capacity(indices.len());
        let mut tapes = Vec::with_capacity(indices.len());
        for &n in indices {
            let (h, tape) = embed_forward(&self.params, self.features.row(n), &self.pert, rng)?;
            hs.push(h);
            tapes.push(tape);
        }
        Ok((hs, tapes))
    }

    fn embed_without_tape(&self, indices: &[usize], rng: &mut Rng) -> Result<Vec<Vec<f64>>> {
        indices
            .iter()
            .map(|&n| embed_forward(&self.params, self.features.row(n), &self.pert, rng).map(|(h, _)| h))
            .collect()
    }

    /// Perturbed embeddings of every sample at the initial parameters.
    pub fn initial_upload(&mut self) -> Result<Message> {
        let indices: Vec<usize> = (0..self.n_samples()).collect();
        let mut rng = self.noise.init.clone();
        let embeddings = self.embed_without_tape(&indices, &mut rng)?;
        self.noise.init = rng;
        Ok(Message::Push {
            client: self.m,
            indices,
            embeddings,
        })
    }

    fn upload_messages(&mut self, k: u64) -> Result<Vec<Message>> {
        let indices = sample_minibatch(self.n_samples(), &self.batch, &mut self.batch_rng);
        let mut rng = self.noise.upload.clone();
        let (embeddings, tapes) = self.forward_batch(&indices, &mut rng)?;
        self.noise.upload = rng;
        let upload = Message::Upload {
            client: self.m,
            indices: indices.clone(),
            embeddings,
        };
        // Pushed cells go first so they share the upload's iteration.
        let mut out = Vec::with_capacity(3);
        if self.push == PushPolicy::All {
            let mut chosen = vec![false; self.n_samples()];
            indices.iter().for_each(|&n| chosen[n] = true);
            let rest: Vec<usize> = (0..self.n_samples()).filter(|&n| !chosen[n]).collect();
            if !rest.is_empty() {
                let mut rng = self.noise.push.clone();
                let embeddings = self.embed_without_tape(&rest, &mut rng)?;
                self.noise.push = rng;
                out.push(Message::Push {
                    client: self.m,
                    indices: rest,
                    embeddings,
                });
            }
        }
        out.push(upload);
        let batch = Batch { indices, tapes, k };
        match self.step_order {
            StepOrder::Paper => {
                out.push(Message::Query {
                    client: self.m,
                    indices: batch.indices.clone(),
                });
                self.awaiting = Some(batch);
            }
            StepOrder::Footnote => self.previous = Some(batch),
        }
        Ok(out)
    }

    /// Starts an activation at global counter `k`; returns the messages to send in order.
    pub fn begin_activation(&mut self, k: u64) -> Result<Vec<Message>> {
        if self.awaiting.is_some() {
            return Err(protocol_err!("client {} activated while waiting for a reply", self.m));
        }
        match self.step_order {
            StepOrder::Paper => self.upload_messages(k),
            StepOrder::Footnote => {
                let batch = match self.previous.take() {
                    Some(mut b) => {
                        b.k = k;
                        b
                    }
                    None => {
                        let indices = sample_minibatch(self.n_samples(), &self.batch, &mut self.batch_rng);
                        let mut rng = self.noise.upload.clone();
                        let (_, tapes) = self.forward_batch(&indices, &mut rng)?;
                        self.noise.upload = rng;
                        Batch { indices, tapes, k }
                    }
                };
                let query = Message::Query {
                    client: self.m,
                    indices: batch.indices.clone(),
                };
                self.awaiting = Some(batch);
                Ok(vec![query])
            }
        }
    }

    /// Applies a query reply with stepsize `eta`; returns any messages that
    /// complete the activation.
    pub fn finish_activation(&mut self, reply: Message, eta: f64) -> Result<Vec<Message>> {
        let batch = self
            .awaiting
            .take()
            .ok_or_else(|| protocol_err!("client {} received an unexpected reply", self.m))?;
        let gradients = match reply {
            Message::QueryReply {
                client,
                indices,
                gradients,
            } if client == self.m && indices == batch.indices => gradients,
            other => {
                return Err(protocol_err!(
                    "client {} received a {} message that does not answer its query",
                    self.m,
                    other.kind()
                ))
            }
        };
        let theta = self.params.flatten();
        let mut g = regularizer_grad(&self.reg, &theta);
        let scale = 1.0 / batch.indices.len() as f64;
        let width = self.params.output_dim();
        for (tape, gh) in batch.tapes.iter().zip(&gradients) {
            if gh.len() != width {
                return Err(protocol_err!("reply gradient width {} does not match embedding width {width}", gh.len()));
            }
            backprop_accumulate(&self.params, tape, gh, scale, &mut g);
        }
        let mut theta = theta;
        apply_update_in_place(&mut theta, &g, eta)?;
        self.params.set_flat(&theta)?;
        self.updates += 1;
        match self.step_order {
            StepOrder::Paper => Ok(Vec::new()),
            StepOrder::Footnote => self.upload_messages(batch.k),
        }
    }

    /// Counter value recorded when the pending activation began.
    pub fn pending_counter(&self) -> Option<u64> {
        self.awaiting.as_ref().map(|b| b.k)
    }

    fn answer_refresh(&mut self, request: &Message) -> Result<Message> {
        let indices = match request {
            Message::ForcedRefreshRequest { client, indices } if *client == self.m => indices.clone(),
            other => return Err(protocol_err!("client {} cannot answer a {} message", self.m, other.kind())),
        };
        if let Some(&n) = indices.iter().find(|&&n| n >= self.n_samples()) {
            return Err(protocol_err!("refresh index {n} out of range"));
        }
        let mut rng = self.noise.refresh.clone();
        let embeddings = self.embed_without_tape(&indices, &mut rng)?;
        self.noise.refresh = rng;
        Ok(Message::Push {
            client: self.m,
            indices,
            embeddings,
        })
    }
}

/// Warms the cache with every client's embeddings at its initial parameters.
/// No model changes; every cell ends with stamp 0 and staleness 1.
pub fn init_pass(server: &mut ServerState, clients: &mut [ClientState]) -> Result<()> {
    if server.k != 0 || server.cache.is_populated() {
        return Err(protocol_err!("initialization pass on a server that already holds embeddings"));
    }
    if clients.len() != server.n_clients() {
        return Err(config_err!(
            "server head expects {} clients, {} were given",
            server.n_clients(),
            clients.len()
        ));
    }
    for (m, c) in clients.iter_mut().enumerate() {
        if c.m != m || c.n_samples() != server.n_samples() {
            return Err(config_err!("client {m} does not match the server's sample set"));
        }
        if let Message::Push {
            client,
            indices,
            embeddings,
        } = c.initial_upload()?
        {
            server.check_cells(client, &indices, Some(&embeddings))?;
            for (n, h) in indices.iter().zip(&embeddings) {
                server.cache.set(*n, client, h, 0);
            }
        }
    }
    Ok(())
}

/// One zero-latency activation of client `m`: every message is delivered
/// immediately and the activation runs to completion.
pub fn client_step(server: &mut ServerState, clients: &mut [ClientState], m: usize) -> Result<()> {
    if m >= clients.len() {
        return Err(protocol_err!("unknown client {m}"));
    }
    let k = server.k;
    let mut outbox = clients[m].begin_activation(k)?;
    while !outbox.is_empty() {
        let mut next = Vec::new();
        for msg in outbox {
            if let Some(reply) = server.handle(msg, &mut &mut *clients)? {
                let k_iter = clients[m].pending_counter().unwrap_or(server.k);
                let eta = server.schedule.at(k_iter).1;
                next.extend(clients[m].finish_activation(reply, eta)?);
            }
        }
        outbox = next;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{LossKind, PerturbationSpec};
    use crate::optimizer::{Schedule, ScheduleSpec};

    fn setup(
        m: usize,
        n: usize,
        mode: Mode,
        order: StepOrder,
        eta: f64,
    ) -> (ServerState, Vec<ClientState>) {
        let mut clients = Vec::new();
        let mut rng = Rng::new(9, 1);
        for j in 0..m {
            let x = Matrix::from_vec(n, 2, (0..2 * n).map(|_| rng.standard_normal()).collect()).unwrap();
            let mut p = EmbeddingParams::linear(2, 1, false);
            p.init_random(&mut rng);
            clients.push(
                ClientState::new(
                    j,
                    x,
                    p,
                    PerturbationSpec::none(1),
                    RegularizerSpec::l2(0.0),
                    BatchSpec::Minibatch(2),
                    order,
                    5,
                )
                .unwrap(),
            );
        }
        let labels: Vec<f64> = (0..n).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect();
        let head = ServerHead::zeros(&vec![1; m], LossKind::BinaryLogistic, true);
        let schedule = Schedule::resolve(&ScheduleSpec::constant(eta, eta)).unwrap();
        let mut server = ServerState::new(head, labels, mode, schedule).unwrap();
        init_pass(&mut server, &mut clients).unwrap();
        (server, clients)
    }

    #[test]
    fn delay_recursion() {
        let mut d = DelayTable::new(3, 2);
        assert_eq!(d.tau(0, 0), 1);
        update_delays(&mut d, 0, &[1]);
        assert_eq!(d.tau(1, 0), 1);
        assert_eq!(d.tau(0, 0), 2);
        update_delays(&mut d, 0, &[1]);
        assert_eq!(d.tau(1, 0), 1);
        update_delays(&mut d, 1, &[2]);
        assert_eq!(d.tau(0, 0), 4);
        assert_eq!(d.tau(0, 1), 4);
        assert_eq!(d.tau(2, 1), 1);
    }

    #[test]
    fn init_pass_populates_cache() {
        let (server, clients) = setup(2, 6, Mode::Async, StepOrder::Paper, 0.1);
        assert!(server.cache.is_populated());
        assert_eq!(server.k, 0);
        for n in 0..6 {
            for m in 0..2 {
                assert_eq!(server.cache.stamp(n, m), Some(0));
                assert_eq!(server.delays.tau(n, m), 1);
            }
            let h = clients[0].params.forward_clean(clients[0].features().row(n));
            assert_eq!(server.cache.get(n, 0), &h[..]);
        }
    }

    #[test]
    fn counter_and_frozen_head() {
        let (mut server, mut clients) = setup(2, 6, Mode::Async, StepOrder::Paper, 0.1);
        server.head.trainable = false;
        let before = server.head.weights.clone();
        client_step(&mut server, &mut clients, 1).unwrap();
        client_step(&mut server, &mut clients, 0).unwrap();
        assert_eq!(server.k, 2);
        assert_eq!(server.head.weights, before);
    }

    #[test]
    fn identical_queries_identical_replies() {
        let (mut server, mut clients) = setup(2, 6, Mode::Async, StepOrder::Paper, 0.1);
        client_step(&mut server, &mut clients, 0).unwrap();
        let a = server.handle_query(1, vec![0, 3], &mut NoRefresh).unwrap();
        let b = server.handle_query(1, vec![0, 3], &mut NoRefresh).unwrap();
        assert_eq!(a, b);
        assert!(server.handle_query(2, vec![0], &mut NoRefresh).is_err());
        assert!(server.handle_query(0, vec![6], &mut NoRefresh).is_err());
    }

    #[test]
    fn zero_stepsize_keeps_params_but_refreshes_cells() {
        let (mut server, mut clients) = setup(1, 4, Mode::Async, StepOrder::Paper, 0.0);
        let before = clients[0].params.clone();
        client_step(&mut server, &mut clients, 0).unwrap();
        assert_eq!(clients[0].params, before);
        assert!((0..4).any(|n| server.cache.stamp(n, 0) == Some(0) && server.delays.tau(n, 0) == 2));
        assert!((0..4).any(|n| server.delays.tau(n, 0) == 1));
    }

    #[test]
    fn tsync_barrier() {
        let (mut server, mut clients) = setup(2, 6, Mode::TSync(2), StepOrder::Paper, 0.1);
        let w0 = server.head.weights.clone();
        client_step(&mut server, &mut clients, 0).unwrap();
        assert_eq!(server.k, 0);
        assert_eq!(server.head.weights, w0);
        assert_eq!(server.buffered_clients(), vec![0]);
        let dup = clients[0].clone().begin_activation(0).unwrap().remove(0);
        assert!(server.handle(dup, &mut NoRefresh).is_err());
        client_step(&mut server, &mut clients, 1).unwrap();
        assert_eq!(server.k, 1);
        assert_ne!(server.head.weights, w0);
        assert!(server.buffered_clients().is_empty());
    }

    #[test]
    fn bounded_mode_never_reads_stale_cells() {
        let (mut server, mut clients) = setup(3, 20, Mode::Bounded(1), StepOrder::Paper, 0.05);
        for i in 0..60 {
            client_step(&mut server, &mut clients, [0, 0, 0, 1, 2][i % 5]).unwrap();
        }
        assert!(server.audit.max_overall <= 1);
        assert!(server.audit.refreshes > 0);
    }

    #[test]
    fn footnote_order_runs() {
        let (mut server, mut clients) = setup(2, 6, Mode::Async, StepOrder::Footnote, 0.1);
        client_step(&mut server, &mut clients, 0).unwrap();
        assert_eq!(server.k, 1);
        assert_eq!(clients[0].updates, 1);
        client_step(&mut server, &mut clients, 0).unwrap();
        assert_eq!(server.k, 2);
    }

    #[test]
    fn push_all_refreshes_every_cell() {
        let (mut server, mut clients) = setup(2, 6, Mode::Async, StepOrder::Paper, 0.1);
        clients[0].push = PushPolicy::All;
        client_step(&mut server, &mut clients, 0).unwrap();
        assert!((0..6).all(|n| server.delays.tau(n, 0) == 1));
        assert!((0..6).all(|n| server.cache.stamp(n, 0) == Some(0)));
        assert_eq!(server.delays.tau(0, 1), 2);
    }
}
