//! Parallel runtime.
//!
//! Workers share one FIFO ready queue. Each node of a frame carries an atomic
//! count of unresolved inputs; finishing a node decrements its dependents and
//! enqueues those that reach zero. Invoke, Cond and CondGrad nodes create a
//! child frame and return immediately; the child's completion later resolves
//! the call node in its parent, so no worker ever waits on a child.
//!
//! Numeric kernels go through the queue. Bookkeeping operations (inputs,
//! projections, keys, cache access, call expansion) run inline on the worker
//! that made them ready.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::atomic::{AtomicBool, AtomicU32, AtomicUsize, Ordering};
use std::sync::{Arc, Condvar, Mutex, OnceLock};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use thiserror::Error;

use crate::cache::{LedgerEntry, ValueCache};
use crate::graph::{FinalizedGraph, NodeId, OpKind};
use crate::tensor::{self, as_index, BinaryFn, Tensor, UnaryFn};
use crate::value::{add_values, InvocationKey, RowList, RowSparse, StateArray, Value};

pub const DEFAULT_MAX_DEPTH: usize = 512;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ExecError {
    #[error("placeholder `{0}` was not fed")]
    Unfed(String),
    #[error("parameter `{0}` has no value")]
    MissingParameter(String),
    #[error("input `{name}` has shape {got}, expected {want}")]
    FeedShape {
        name: String,
        got: String,
        want: String,
    },
    #[error("invalid fetch {0}")]
    InvalidFetch(NodeId),
    #[error("recursion depth limit {limit} exceeded at key {key}")]
    DepthLimit { limit: usize, key: InvocationKey },
    #[error("node {node} ({op}) at key {key}: {msg}")]
    Kernel {
        node: NodeId,
        op: String,
        key: InvocationKey,
        msg: String,
    },
    #[error("worker panicked at node {node} ({op}) key {key}: {msg}")]
    Panic {
        node: NodeId,
        op: String,
        key: InvocationKey,
        msg: String,
    },
    #[error("fetched value {0} is not a tensor")]
    NotATensor(usize),
}

#[derive(Debug, Clone)]
pub struct RunOptions {
    /// Worker count used by the free [`run`] function.
    pub threads: usize,
    pub max_recursion_depth: usize,
    /// Sleep inside every numeric kernel; simulates expensive operations.
    pub kernel_delay: Option<Duration>,
    pub trace: bool,
    /// Record every cache access.
    pub ledger: bool,
    /// Fault injection: panic when this node executes.
    pub panic_at: Option<NodeId>,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions {
            threads: default_threads(),
            max_recursion_depth: DEFAULT_MAX_DEPTH,
            kernel_delay: None,
            trace: false,
            ledger: false,
            panic_at: None,
        }
    }
}

pub fn default_threads() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

/// Values for placeholders and parameters, looked up by name. Parameters
/// are shared across runs.
#[derive(Debug, Clone, Default)]
pub struct Feeds {
    params: Arc<HashMap<String, Arc<Tensor>>>,
    values: HashMap<String, Arc<Tensor>>,
}

impl Feeds {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_params(params: Arc<HashMap<String, Arc<Tensor>>>) -> Self {
        Feeds {
            params,
            values: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: &str, t: Tensor) -> &mut Self {
        self.values.insert(name.to_string(), Arc::new(t));
        self
    }

    pub fn get(&self, name: &str) -> Option<&Arc<Tensor>> {
        self.values.get(name).or_else(|| self.params.get(name))
    }
}

#[derive(Debug, Clone, Default)]
pub struct RunStats {
    /// Highest number of numeric kernels running at the same moment
    /// (across all runs sharing the pool).
    pub peak_active_kernels: usize,
    pub kernels: usize,
    pub frames: usize,
    pub frames_per_subgraph: BTreeMap<String, usize>,
    pub max_depth: usize,
    pub wall: Duration,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceEvent {
    pub timestamp_us: u64,
    pub worker_id: usize,
    pub key: InvocationKey,
    pub node: NodeId,
    pub op_kind: &'static str,
}

pub fn write_trace_csv<W: Write>(events: &[TraceEvent], w: W) -> std::io::Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["timestamp_us", "worker_id", "key", "node_id", "op_kind"])?;
    for e in events {
        out.write_record([
            e.timestamp_us.to_string(),
            e.worker_id.to_string(),
            e.key.to_string(),
            e.node.to_string(),
            e.op_kind.to_string(),
        ])?;
    }
    out.flush()
}

#[derive(Debug)]
pub struct RunOutput {
    pub values: Vec<Value>,
    pub stats: RunStats,
    pub trace: Vec<TraceEvent>,
    /// Cache entries still present after the run.
    pub cache_left: usize,
    pub ledger: Vec<LedgerEntry>,
}

impl RunOutput {
    pub fn tensor(&self, i: usize) -> Result<Arc<Tensor>, ExecError> {
        match &self.values[i] {
            Value::Tensor(t) => Ok(t.clone()),
            Value::Rows(r) => Ok(Arc::new(r.to_dense())),
            _ => Err(ExecError::NotATensor(i)),
        }
    }

    pub fn scalar(&self, i: usize) -> Result<f64, ExecError> {
        Ok(self.tensor(i)?.item())
    }
}

enum Task {
    Start(Arc<RunCtx>),
    Node(Arc<Frame>, u32),
}

impl Task {
    fn ctx(&self) -> &Arc<RunCtx> {
        match self {
            Task::Start(c) => c,
            Task::Node(f, _) => &f.ctx,
        }
    }
}

struct Shared {
    queue: Mutex<VecDeque<Task>>,
    ready: Condvar,
    shutdown: AtomicBool,
    active: AtomicUsize,
}

struct RunCtx {
    graph: Arc<FinalizedGraph>,
    feeds: Feeds,
    fetches: Vec<NodeId>,
    opts: RunOptions,
    cache: ValueCache,
    owner: Vec<Option<usize>>,
    failed: AtomicBool,
    outcome: Mutex<Option<Result<Vec<Value>, ExecError>>>,
    done: Condvar,
    peak: AtomicUsize,
    kernels: AtomicUsize,
    frames: Vec<AtomicUsize>,
    total_frames: AtomicUsize,
    max_depth: AtomicUsize,
    trace: Option<Mutex<Vec<TraceEvent>>>,
    start: Instant,
}

impl RunCtx {
    fn fail(&self, e: ExecError) {
        if !self.failed.swap(true, Ordering::SeqCst) {
            *self.outcome.lock().expect("outcome poisoned") = Some(Err(e));
            self.done.notify_all();
        }
    }

    fn finish(&self, values: Vec<Value>) {
        if self.failed.load(Ordering::SeqCst) {
            return;
        }
        let mut o = self.outcome.lock().expect("outcome poisoned");
        if o.is_none() {
            *o = Some(Ok(values));
        }
        self.done.notify_all();
    }

    fn record(&self, worker: usize, key: &InvocationKey, node: NodeId, op: &'static str) {
        if let Some(t) = &self.trace {
            let ev = TraceEvent {
                timestamp_us: self.start.elapsed().as_micros() as u64,
                worker_id: worker,
                key: key.clone(),
                node,
                op_kind: op,
            };
            t.lock().expect("trace poisoned").push(ev);
        }
    }
}

enum Return {
    Root,
    Invoke {
        parent: Arc<Frame>,
        node: u32,
    },
    CondGrad {
        parent: Arc<Frame>,
        node: u32,
        taken_then: bool,
        nargs: usize,
        then_caps: usize,
        else_caps: usize,
    },
}

struct Frame {
    ctx: Arc<RunCtx>,
    body: u32,
    key: InvocationKey,
    depth: usize,
    ret: Return,
    inputs: Vec<Value>,
    slots: Vec<OnceLock<Value>>,
    pending: Vec<AtomicU32>,
    remaining: AtomicUsize,
}

impl Frame {
    fn node_id(&self, idx: u32) -> NodeId {
        NodeId {
            scope: self.body,
            index: idx,
        }
    }

    fn input(&self, idx: u32, k: usize) -> &Value {
        let src = self.ctx.graph.body(self.body).nodes[idx as usize].inputs[k];
        self.slots[src as usize]
            .get()
            .expect("scheduled node has all inputs resolved")
    }

    fn kernel_error(&self, idx: u32, msg: impl Into<String>) -> ExecError {
        ExecError::Kernel {
            node: self.node_id(idx),
            op: self.ctx.graph.body(self.body).nodes[idx as usize].kind.name(),
            key: self.key.clone(),
            msg: msg.into(),
        }
    }
}

enum Work {
    Run(Arc<Frame>, u32),
    Done(Arc<Frame>, u32, Value),
}

/// Persistent worker pool.
pub struct Executor {
    shared: Arc<Shared>,
    workers: Vec<JoinHandle<()>>,
}

impl Executor {
    pub fn new(threads: usize) -> Self {
        let threads = threads.max(1);
        let shared = Arc::new(Shared {
            queue: Mutex::new(VecDeque::new()),
            ready: Condvar::new(),
            shutdown: AtomicBool::new(false),
            active: AtomicUsize::new(0),
        });
        let workers = (0..threads)
            .map(|id| {
                let s = shared.clone();
                std::thread::Builder::new()
                    .name(format!("rdg-worker-{id}"))
                    .stack_size(8 << 20)
                    .spawn(move || worker_loop(s, id))
                    .expect("spawn worker thread")
            })
            .collect();
        Executor { shared, workers }
    }

    pub fn threads(&self) -> usize {
        self.workers.len()
    }

    /// Execute the whole top-level graph once and return the fetched values.
    pub fn run(
        &self,
        graph: &Arc<FinalizedGraph>,
        feeds: &Feeds,
        fetches: &[NodeId],
        opts: &RunOptions,
    ) -> Result<RunOutput, ExecError> {
        self.run_batch(graph, std::slice::from_ref(feeds), fetches, opts)
            .pop()
            .expect("one result per feed")
    }

    /// Execute one run per feed set concurrently, each with its own cache.
    pub fn run_batch(
        &self,
        graph: &Arc<FinalizedGraph>,
        feeds: &[Feeds],
        fetches: &[NodeId],
        opts: &RunOptions,
    ) -> Vec<Result<RunOutput, ExecError>> {
        let top = graph.top().len();
        if let Some(bad) = fetches
            .iter()
            .find(|f| f.scope != 0 || f.index as usize >= top)
        {
            return feeds.iter().map(|_| Err(ExecError::InvalidFetch(*bad))).collect();
        }
        let mut owner = vec![None; graph.num_bodies()];
        for (r, info) in graph.subgraphs() {
            owner[info.body as usize] = Some(r.0 as usize);
        }
        let nsub = graph.subgraphs().count();
        let ctxs: Vec<Arc<RunCtx>> = feeds
            .iter()
            .map(|f| {
                Arc::new(RunCtx {
                    graph: graph.clone(),
                    feeds: f.clone(),
                    fetches: fetches.to_vec(),
                    opts: opts.clone(),
                    cache: if opts.ledger {
                        ValueCache::with_ledger()
                    } else {
                        ValueCache::new()
                    },
                    owner: owner.clone(),
                    failed: AtomicBool::new(false),
                    outcome: Mutex::new(None),
                    done: Condvar::new(),
                    peak: AtomicUsize::new(0),
                    kernels: AtomicUsize::new(0),
                    frames: (0..nsub).map(|_| AtomicUsize::new(0)).collect(),
                    total_frames: AtomicUsize::new(0),
                    max_depth: AtomicUsize::new(0),
                    trace: opts.trace.then(|| Mutex::new(Vec::new())),
                    start: Instant::now(),
                })
            })
            .collect();
        {
            let mut q = self.shared.queue.lock().expect("queue poisoned");
            for c in &ctxs {
                q.push_back(Task::Start(c.clone()));
            }
        }
        self.shared.ready.notify_all();
        ctxs.into_iter().map(wait).collect()
    }
}

impl Drop for Executor {
    fn drop(&mut self) {
        self.shared.shutdown.store(true, Ordering::SeqCst);
        self.shared.ready.notify_all();
        for w in self.workers.drain(..) {
            let _ = w.join();
        }
    }
}

/// One-shot run on a temporary pool of `opts.threads` workers.
pub fn run(
    graph: &Arc<FinalizedGraph>,
    feeds: &Feeds,
    fetches: &[NodeId],
    opts: &RunOptions,
) -> Result<RunOutput, ExecError> {
    Executor::new(opts.threads).run(graph, feeds, fetches, opts)
}

fn wait(ctx: Arc<RunCtx>) -> Result<RunOutput, ExecError> {
    let mut o = ctx.outcome.lock().expect("outcome poisoned");
    while o.is_none() {
        o = ctx.done.wait(o).expect("outcome poisoned");
    }
    let values = o.take().expect("outcome present")?;
    drop(o);
    let frames_per_subgraph = ctx
        .graph
        .subgraphs()
        .map(|(r, info)| (info.name.clone(), ctx.frames[r.0 as usize].load(Ordering::SeqCst)))
        .filter(|(_, n)| *n > 0)
        .collect();
    let stats = RunStats {
        peak_active_kernels: ctx.peak.load(Ordering::SeqCst),
        kernels: ctx.kernels.load(Ordering::SeqCst),
        frames: ctx.total_frames.load(Ordering::SeqCst),
        frames_per_subgraph,
        max_depth: ctx.max_depth.load(Ordering::SeqCst),
        wall: ctx.start.elapsed(),
    };
    let mut trace = ctx
        .trace
        .as_ref()
        .map(|t| std::mem::take(&mut *t.lock().expect("trace poisoned")))
        .unwrap_or_default();
    trace.sort_by_key(|e| e.timestamp_us);
    Ok(RunOutput {
        values,
        stats,
        trace,
        cache_left: ctx.cache.len(),
        ledger: ctx.cache.ledger(),
    })
}

fn worker_loop(shared: Arc<Shared>, id: usize) {
    loop {
        let task = {
            let mut q = shared.queue.lock().expect("queue poisoned");
            loop {
                if let Some(t) = q.pop_front() {
                    break t;
                }
                if shared.shutdown.load(Ordering::SeqCst) {
                    return;
                }
                q = shared.ready.wait(q).expect("queue poisoned");
            }
        };
        let ctx = task.ctx().clone();
        if ctx.failed.load(Ordering::SeqCst) {
            continue;
        }
        let mut ready = Vec::new();
        let outcome = catch_unwind(AssertUnwindSafe(|| process(&shared, task, id, &mut ready)));
        if let Err(p) = outcome {
            ctx.fail(ExecError::Panic {
                node: NodeId::top(0),
                op: "scheduler".into(),
                key: InvocationKey::root(),
                msg: panic_message(&p),
            });
            continue;
        }
        if !ready.is_empty() {
            let n = ready.len();
            shared
                .queue
                .lock()
                .expect("queue poisoned")
                .extend(ready);
            if n == 1 {
                shared.ready.notify_one();
            } else {
                shared.ready.notify_all();
            }
        }
    }
}

fn panic_message(p: &Box<dyn std::any::Any + Send>) -> String {
    p.downcast_ref::<&str>()
        .map(|s| s.to_string())
        .or_else(|| p.downcast_ref::<String>().cloned())
        .unwrap_or_else(|| "panic".into())
}

fn process(shared: &Shared, task: Task, worker: usize, ready: &mut Vec<Task>) {
    let mut work = VecDeque::new();
    match task {
        Task::Start(ctx) => {
            let graph = ctx.graph.clone();
            if let Err(e) = spawn_frame(
                &ctx,
                0,
                InvocationKey::root(),
                0,
                Return::Root,
                Vec::new(),
                &mut work,
                &graph,
            ) {
                ctx.fail(e);
                return;
            }
        }
        Task::Node(frame, idx) => match run_kernel(shared, &frame, idx, worker) {
            Ok(v) => work.push_back(Work::Done(frame, idx, v)),
            Err(e) => {
                frame.ctx.fail(e);
                return;
            }
        },
    }
    while let Some(w) = work.pop_front() {
        match w {
            Work::Run(frame, idx) => {
                let ctx = frame.ctx.clone();
                if ctx.failed.load(Ordering::SeqCst) {
                    return;
                }
                let kind = &ctx.graph.body(frame.body).nodes[idx as usize].kind;
                if kind.is_compute() {
                    ready.push(Task::Node(frame, idx));
                    continue;
                }
                ctx.record(worker, &frame.key, frame.node_id(idx), kind.tag());
                match eval_inline(&frame, idx, &mut work) {
                    Ok(Some(v)) => work.push_back(Work::Done(frame, idx, v)),
                    Ok(None) => {}
                    Err(e) => {
                        ctx.fail(e);
                        return;
                    }
                }
            }
            Work::Done(frame, idx, v) => settle(&frame, idx, v, &mut work),
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn spawn_frame(
    ctx: &Arc<RunCtx>,
    body_idx: u32,
    key: InvocationKey,
    depth: usize,
    ret: Return,
    inputs: Vec<Value>,
    work: &mut VecDeque<Work>,
    graph: &FinalizedGraph,
) -> Result<(), ExecError> {
    if depth > ctx.opts.max_recursion_depth {
        return Err(ExecError::DepthLimit {
            limit: ctx.opts.max_recursion_depth,
            key,
        });
    }
    ctx.max_depth.fetch_max(depth, Ordering::Relaxed);
    ctx.total_frames.fetch_add(1, Ordering::Relaxed);
    if let Some(s) = ctx.owner[body_idx as usize] {
        ctx.frames[s].fetch_add(1, Ordering::Relaxed);
    }
    let body = graph.body(body_idx);
    let frame = Arc::new(Frame {
        ctx: ctx.clone(),
        body: body_idx,
        key,
        depth,
        ret,
        inputs,
        slots: (0..body.len()).map(|_| OnceLock::new()).collect(),
        pending: body.indegree.iter().map(|d| AtomicU32::new(*d)).collect(),
        remaining: AtomicUsize::new(body.len()),
    });
    if body.is_empty() {
        complete_frame(&frame, work);
        return Ok(());
    }
    for (i, d) in body.indegree.iter().enumerate() {
        if *d == 0 {
            work.push_back(Work::Run(frame.clone(), i as u32));
        }
    }
    Ok(())
}

fn settle(frame: &Arc<Frame>, idx: u32, v: Value, work: &mut VecDeque<Work>) {
    let body = frame.ctx.graph.body(frame.body);
    if frame.slots[idx as usize].set(v).is_err() {
        panic!("node {} resolved twice", frame.node_id(idx));
    }
    for &d in &body.dependents[idx as usize] {
        if frame.pending[d as usize].fetch_sub(1, Ordering::AcqRel) == 1 {
            work.push_back(Work::Run(frame.clone(), d));
        }
    }
    if frame.remaining.fetch_sub(1, Ordering::AcqRel) == 1 {
        complete_frame(frame, work);
    }
}

fn complete_frame(frame: &Arc<Frame>, work: &mut VecDeque<Work>) {
    let slot = |i: u32| {
        frame.slots[i as usize]
            .get()
            .cloned()
            .expect("completed frame has every node resolved")
    };
    let body = frame.ctx.graph.body(frame.body);
    match &frame.ret {
        Return::Root => {
            let vals = frame.ctx.fetches.iter().map(|f| slot(f.index)).collect();
            frame.ctx.finish(vals);
        }
        Return::Invoke { parent, node } => {
            let outs: Vec<Value> = body.outputs.iter().map(|&o| slot(o)).collect();
            work.push_back(Work::Done(parent.clone(), *node, Value::Tuple(outs.into())));
        }
        Return::CondGrad {
            parent,
            node,
            taken_then,
            nargs,
            then_caps,
            else_caps,
        } => {
            let outs: Vec<Value> = body.outputs.iter().map(|&o| slot(o)).collect();
            let v = cond_grad_tuple(Some(&outs), *taken_then, *nargs, *then_caps, *else_caps);
            work.push_back(Work::Done(parent.clone(), *node, v));
        }
    }
}

/// Gradient tuple aligned with a Cond's inputs: predicate, args, then
/// captures, else captures. `outs` holds the taken branch's input gradients.
fn cond_grad_tuple(
    outs: Option<&[Value]>,
    taken_then: bool,
    nargs: usize,
    then_caps: usize,
    else_caps: usize,
) -> Value {
    let mut v = Vec::with_capacity(1 + nargs + then_caps + else_caps);
    v.push(Value::Zero);
    let zeros = |n: usize| std::iter::repeat_n(Value::Zero, n);
    match outs {
        None => v.extend(zeros(nargs + then_caps + else_caps)),
        Some(o) => {
            v.extend(o[..nargs].iter().cloned());
            if taken_then {
                v.extend(o[nargs..].iter().cloned());
                v.extend(zeros(else_caps));
            } else {
                v.extend(zeros(then_caps));
                v.extend(o[nargs..].iter().cloned());
            }
        }
    }
    Value::Tuple(v.into())
}

fn feed_value(ctx: &RunCtx, name: &str, admits: impl Fn(&Tensor) -> bool, want: String, param: bool) -> Result<Value, ExecError> {
    let t = ctx.feeds.get(name).ok_or_else(|| {
        if param {
            ExecError::MissingParameter(name.into())
        } else {
            ExecError::Unfed(name.into())
        }
    })?;
    if !admits(t) {
        return Err(ExecError::FeedShape {
            name: name.into(),
            got: t.shape().to_string(),
            want,
        });
    }
    Ok(Value::Tensor(t.clone()))
}

fn eval_inline(frame: &Arc<Frame>, idx: u32, work: &mut VecDeque<Work>) -> Result<Option<Value>, ExecError> {
    let ctx = &frame.ctx;
    let graph = ctx.graph.clone();
    let node = &graph.body(frame.body).nodes[idx as usize];
    let err = |m: String| frame.kernel_error(idx, m);
    if ctx.opts.panic_at == Some(frame.node_id(idx)) {
        return Err(ExecError::Panic {
            node: frame.node_id(idx),
            op: node.kind.name(),
            key: frame.key.clone(),
            msg: "injected fault".into(),
        });
    }
    let key_input = |k: usize| match frame.input(idx, k) {
        Value::Key(key) => Ok(key.clone()),
        other => Err(err(format!("expected a key, got {}", other.kind()))),
    };
    let v = match &node.kind {
        OpKind::Placeholder { name, shape } => {
            feed_value(ctx, name, |t| shape.admits(t.shape()), shape.to_string(), false)?
        }
        OpKind::Parameter { name, shape } => {
            feed_value(ctx, name, |t| t.shape() == *shape, shape.to_string(), true)?
        }
        OpKind::Constant(t) => Value::Tensor(t.clone()),
        OpKind::Input(k) => frame.inputs[*k].clone(),
        OpKind::Zero => Value::Zero,
        OpKind::FrameKey => Value::Key(frame.key.clone()),
        OpKind::ChildKey(j) => Value::Key(key_input(0)?.child(*j)),
        OpKind::Project(k) => frame.input(idx, 0).project(*k).map_err(err)?,
        OpKind::ArrayNew { len, elem } => Value::Array(Arc::new(StateArray::new(*len, *elem))),
        OpKind::CacheWrite { target } => {
            ctx.cache
                .write(&frame.key, *target, frame.input(idx, 0).clone())
                .map_err(|e| err(e.to_string()))?;
            Value::Unit
        }
        OpKind::CacheRead { target } => ctx
            .cache
            .read(&key_input(0)?, *target)
            .map_err(|e| err(e.to_string()))?,
        OpKind::Invoke(sub) => {
            let info = graph.subgraph(*sub);
            let inputs = (0..node.inputs.len()).map(|k| frame.input(idx, k).clone()).collect();
            spawn_frame(
                ctx,
                info.body,
                frame.key.child(idx),
                frame.depth + 1,
                Return::Invoke {
                    parent: frame.clone(),
                    node: idx,
                },
                inputs,
                work,
                &graph,
            )?;
            return Ok(None);
        }
        OpKind::Cond {
            then_branch,
            else_branch,
            nargs,
            record,
        } => {
            let pred = frame.input(idx, 0).dense().map_err(&err)?.item();
            if pred.is_nan() {
                return Err(err("predicate is NaN".into()));
            }
            let taken_then = pred != 0.0;
            let key = frame.key.child(idx);
            if *record {
                ctx.cache
                    .record_branch(&key, taken_then)
                    .map_err(|e| err(e.to_string()))?;
            }
            let then_caps = graph.subgraph(*then_branch).captures.len();
            let (branch, caps) = if taken_then {
                (*then_branch, 1 + nargs..1 + nargs + then_caps)
            } else {
                (*else_branch, 1 + nargs + then_caps..node.inputs.len())
            };
            let inputs = (1..1 + nargs)
                .chain(caps)
                .map(|k| frame.input(idx, k).clone())
                .collect();
            spawn_frame(
                ctx,
                graph.subgraph(branch).body,
                key,
                frame.depth,
                Return::Invoke {
                    parent: frame.clone(),
                    node: idx,
                },
                inputs,
                work,
                &graph,
            )?;
            return Ok(None);
        }
        OpKind::CondGrad {
            then_grad,
            else_grad,
            nargs,
            then_caps,
            else_caps,
        } => {
            let last = node.inputs.len() - 1;
            let key = key_input(last)?;
            let taken_then = ctx.cache.take_branch(&key).map_err(|e| err(e.to_string()))?;
            let grad = if taken_then { then_grad } else { else_grad };
            let Some(g) = grad else {
                return Ok(Some(cond_grad_tuple(None, taken_then, *nargs, *then_caps, *else_caps)));
            };
            let inputs = (0..node.inputs.len()).map(|k| frame.input(idx, k).clone()).collect();
            spawn_frame(
                ctx,
                graph.subgraph(*g).body,
                frame.key.child(idx),
                frame.depth,
                Return::CondGrad {
                    parent: frame.clone(),
                    node: idx,
                    taken_then,
                    nargs: *nargs,
                    then_caps: *then_caps,
                    else_caps: *else_caps,
                },
                inputs,
                work,
                &graph,
            )?;
            return Ok(None);
        }
        other => unreachable!("{} is a kernel", other.name()),
    };
    Ok(Some(v))
}

fn run_kernel(shared: &Shared, frame: &Arc<Frame>, idx: u32, worker: usize) -> Result<Value, ExecError> {
    let ctx = &frame.ctx;
    let node = &ctx.graph.body(frame.body).nodes[idx as usize];
    let inputs: Vec<Value> = (0..node.inputs.len())
        .map(|k| frame.input(idx, k).clone())
        .collect();
    ctx.record(worker, &frame.key, frame.node_id(idx), node.kind.tag());
    let active = shared.active.fetch_add(1, Ordering::SeqCst) + 1;
    ctx.peak.fetch_max(active, Ordering::SeqCst);
    ctx.kernels.fetch_add(1, Ordering::Relaxed);
    let inject = ctx.opts.panic_at == Some(frame.node_id(idx));
    let result = catch_unwind(AssertUnwindSafe(|| {
        if let Some(d) = ctx.opts.kernel_delay {
            std::thread::sleep(d);
        }
        if inject {
            panic!("injected fault");
        }
        kernel(&node.kind, &inputs)
    }));
    shared.active.fetch_sub(1, Ordering::SeqCst);
    match result {
        Ok(Ok(v)) => Ok(v),
        Ok(Err(msg)) => Err(frame.kernel_error(idx, msg)),
        Err(p) => Err(ExecError::Panic {
            node: frame.node_id(idx),
            op: node.kind.name(),
            key: frame.key.clone(),
            msg: panic_message(&p),
        }),
    }
}

fn index_of(v: &Value) -> Result<i64, String> {
    let t = v.dense()?;
    if t.shape() != tensor::Shape::new(1, 1) {
        return Err(format!("index must be 1x1, got {}", t.shape()));
    }
    as_index(t.item()).map_err(|e| e.to_string())
}

fn te(e: tensor::TensorError) -> String {
    e.to_string()
}

fn pad(x: &Tensor, row0: usize, col0: usize, rows: usize, cols: usize) -> Result<Tensor, String> {
    if row0 + x.rows() > rows || col0 + x.cols() > cols {
        return Err(format!("cannot pad {} into {rows}x{cols}", x.shape()));
    }
    let mut out = Tensor::zeros(rows, cols);
    for r in 0..x.rows() {
        for c in 0..x.cols() {
            out.set(row0 + r, col0 + c, x.get(r, c));
        }
    }
    Ok(out)
}

/// Evaluate a numeric kernel. `Zero` inputs stand for all-zero tensors.
fn kernel(kind: &OpKind, inputs: &[Value]) -> Result<Value, String> {
    let zero_in = |k: usize| inputs[k].is_zero();
    let d = |k: usize| inputs[k].dense();
    let out = |t: Tensor| Ok(Value::from(t));
    match kind {
        OpKind::MatMul { ta, tb } => {
            if zero_in(0) || zero_in(1) {
                return Ok(Value::Zero);
            }
            out(tensor::matmul_t(&*d(0)?, &*d(1)?, *ta, *tb).map_err(te)?)
        }
        OpKind::Unary(f) => {
            if zero_in(0) {
                return match f {
                    UnaryFn::Sigmoid => Err("sigmoid of a shapeless zero".into()),
                    _ => Ok(Value::Zero),
                };
            }
            out(tensor::apply_unary(&*d(0)?, *f))
        }
        OpKind::UnaryGrad(f) => {
            if zero_in(0) {
                return Ok(Value::Zero);
            }
            out(tensor::unary_grad(&*d(0)?, &*d(1)?, *f).map_err(te)?)
        }
        OpKind::Binary(f) => match (f, zero_in(0), zero_in(1)) {
            (BinaryFn::Hadamard, true, _) | (BinaryFn::Hadamard, _, true) => Ok(Value::Zero),
            (BinaryFn::Add, _, _) => add_values(&inputs[0], &inputs[1]),
            (BinaryFn::Sub, _, true) => Ok(inputs[0].clone()),
            (BinaryFn::Sub, true, false) => out(d(1)?.scale(-1.0)),
            _ => out(tensor::apply_binary(&*d(0)?, &*d(1)?, *f).map_err(te)?),
        },
        OpKind::ConcatRows => out(tensor::concat_rows(&*d(0)?, &*d(1)?).map_err(te)?),
        OpKind::ConcatCols => out(tensor::concat_cols(&*d(0)?, &*d(1)?).map_err(te)?),
        OpKind::SliceRows { start, len } => {
            if zero_in(0) {
                return Ok(Value::Zero);
            }
            out(tensor::slice_rows(&*d(0)?, *start, *len).map_err(te)?)
        }
        OpKind::SliceCols { start, len } => {
            if zero_in(0) {
                return Ok(Value::Zero);
            }
            out(tensor::slice_cols(&*d(0)?, *start, *len).map_err(te)?)
        }
        OpKind::PadRows { start, total } => {
            if zero_in(0) {
                return Ok(Value::Zero);
            }
            let x = d(0)?;
            out(pad(&x, *start, 0, *total, x.cols())?)
        }
        OpKind::PadCols { start, total } => {
            if zero_in(0) {
                return Ok(Value::Zero);
            }
            let x = d(0)?;
            out(pad(&x, 0, *start, x.rows(), *total)?)
        }
        OpKind::Reshape(s) => {
            if zero_in(0) {
                return Ok(Value::Zero);
            }
            out(tensor::reshape(&*d(0)?, *s).map_err(te)?)
        }
        OpKind::GatherRow => out(tensor::gather_row(&*d(0)?, index_of(&inputs[1])?).map_err(te)?),
        OpKind::ScatterRow { rows } => {
            if zero_in(0) {
                return Ok(Value::Zero);
            }
            let g = d(0)?.into_owned();
            let i = index_of(&inputs[1])?;
            if g.rows() != 1 {
                return Err(format!("scattered gradient must be one row, got {}", g.shape()));
            }
            if i < 0 || i as usize >= *rows {
                return Err(format!("row index {i} out of range for {rows} rows"));
            }
            Ok(Value::Rows(RowSparse {
                shape: tensor::Shape::new(*rows, g.cols()),
                rows: Arc::new(RowList::Row {
                    index: i as usize,
                    values: Arc::new(g),
                }),
            }))
        }
        OpKind::SoftmaxXent => {
            let (loss, _) = tensor::softmax_cross_entropy(&*d(0)?, index_of(&inputs[1])?).map_err(te)?;
            out(Tensor::scalar(loss))
        }
        OpKind::SoftmaxXentGrad => {
            if zero_in(0) {
                return Ok(Value::Zero);
            }
            let g = d(0)?;
            if g.shape() != tensor::Shape::new(1, 1) {
                return Err(format!("upstream of a loss must be 1x1, got {}", g.shape()));
            }
            let (_, grad) = tensor::softmax_cross_entropy(&*d(1)?, index_of(&inputs[2])?).map_err(te)?;
            out(grad.scale(g.item()))
        }
        OpKind::GradAccum => inputs
            .iter()
            .try_fold(Value::Zero, |acc, v| add_values(&acc, v)),
        OpKind::Densify(s) => out(inputs[0].densify(*s)?),
        OpKind::ArrayWrite => {
            let Value::Array(a) = &inputs[0] else {
                return Err("array_write expects an array".into());
            };
            let v = match &inputs[2] {
                Value::Tensor(t) => t.clone(),
                other => Arc::new(other.dense()?.into_owned()),
            };
            a.write(index_of(&inputs[1])?, v)?;
            Ok(inputs[0].clone())
        }
        OpKind::ArrayRead => {
            let Value::Array(a) = &inputs[0] else {
                return Err("array_read expects an array".into());
            };
            Ok(Value::Tensor(a.read(index_of(&inputs[1])?)?))
        }
        OpKind::ArrayGradWrite => {
            let Value::Array(a) = &inputs[0] else {
                return Err("array_grad_write expects an array".into());
            };
            if !zero_in(2) {
                a.add_grad(index_of(&inputs[1])?, &*d(2)?)?;
            }
            Ok(Value::Unit)
        }
        OpKind::ArrayGradRead => {
            let Value::Array(a) = &inputs[0] else {
                return Err("array_grad_read expects an array".into());
            };
            Ok(a
                .take_grad(index_of(&inputs[1])?)?
                .map_or(Value::Zero, Value::from))
        }
        other => Err(format!("{} is not a kernel", other.name())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{GraphBuilder, ShapeSpec, Signature, ValueType};
    use crate::tensor::Shape;

    fn s11() -> Shape {
        Shape::new(1, 1)
    }

    fn countdown(limit_guard: bool) -> (Arc<FinalizedGraph>, NodeId) {
        let mut g = GraphBuilder::new();
        let f = g
            .declare_subgraph("down", Signature::tensors(&[s11()], &[s11()]))
            .unwrap();
        g.define_subgraph(f, |b, ins| {
            let x = ins[0];
            if !limit_guard {
                return b.invoke(f, &[x]);
            }
            b.cond_with(
                x,
                &[x],
                vec![ValueType::tensor(1, 1)],
                |b, ins| {
                    let one = b.constant(Tensor::scalar(1.0))?;
                    let y = b.binary(BinaryFn::Sub, ins[0], one)?;
                    let r = b.invoke(f, &[y])?;
                    Ok(vec![b.add(r[0], one)?])
                },
                |_, ins| Ok(vec![ins[0]]),
            )
        })
        .unwrap();
        let x = g.placeholder("x", s11().into()).unwrap();
        let y = g.invoke(f, &[x]).unwrap();
        (Arc::new(g.finalize().unwrap()), y[0])
    }

    fn feed(x: f64) -> Feeds {
        let mut f = Feeds::new();
        f.insert("x", Tensor::scalar(x));
        f
    }

    #[test]
    fn recursion_counts_down() {
        let (g, y) = countdown(true);
        let ex = Executor::new(3);
        let out = ex.run(&g, &feed(10.0), &[y], &RunOptions::default()).unwrap();
        assert_eq!(out.scalar(0).unwrap(), 10.0);
        assert_eq!(out.stats.frames_per_subgraph["down"], 11);
        assert_eq!(out.stats.max_depth, 11);
    }

    #[test]
    fn unterminated_recursion_hits_depth_limit() {
        let (g, y) = countdown(false);
        let opts = RunOptions {
            max_recursion_depth: 40,
            ..RunOptions::default()
        };
        let err = Executor::new(2).run(&g, &feed(1.0), &[y], &opts).unwrap_err();
        match err {
            ExecError::DepthLimit { limit, key } => {
                assert_eq!(limit, 40);
                assert_eq!(key.depth(), 41);
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn unfed_placeholder_is_named() {
        let (g, y) = countdown(true);
        let err = Executor::new(1).run(&g, &Feeds::new(), &[y], &RunOptions::default()).unwrap_err();
        assert_eq!(err, ExecError::Unfed("x".into()));
        assert!(err.to_string().contains("`x`"));
    }

    #[test]
    fn panics_abort_with_node_and_key() {
        let (g, y) = countdown(true);
        let body = g.subgraph(g.lookup("down/if1/then").unwrap()).body;
        let target = NodeId { scope: body, index: 2 };
        assert!(matches!(g.node(target).unwrap().kind, OpKind::Binary(_)));
        let opts = RunOptions {
            panic_at: Some(target),
            ..RunOptions::default()
        };
        let err = Executor::new(2).run(&g, &feed(3.0), &[y], &opts).unwrap_err();
        let ExecError::Panic { node, key, .. } = &err else {
            panic!("unexpected {err}")
        };
        assert_eq!(*node, target);
        assert!(key.depth() >= 2);
        // pool still usable afterwards
        let ex = Executor::new(2);
        assert!(ex.run(&g, &feed(3.0), &[y], &opts).is_err());
        assert_eq!(ex.run(&g, &feed(3.0), &[y], &RunOptions::default()).unwrap().scalar(0).unwrap(), 3.0);
    }

    #[test]
    fn diamond_overlaps_with_two_threads() {
        let mut g = GraphBuilder::new();
        let a = g.placeholder("x", ShapeSpec::fixed(1, 1)).unwrap();
        let a = g.tanh(a).unwrap();
        let b = g.tanh(a).unwrap();
        let c = g.tanh(a).unwrap();
        let dd = g.add(b, c).unwrap();
        let g = Arc::new(g.finalize().unwrap());
        let opts = RunOptions {
            kernel_delay: Some(Duration::from_millis(30)),
            trace: true,
            ..RunOptions::default()
        };
        let out = Executor::new(2).run(&g, &feed(0.5), &[dd], &opts).unwrap();
        assert_eq!(out.stats.peak_active_kernels, 2);
        assert!(out.stats.wall < Duration::from_millis(4 * 30), "{:?}", out.stats.wall);
        let t = 0.5f64.tanh().tanh();
        assert!((out.scalar(0).unwrap() - 2.0 * t).abs() < 1e-15);
        assert_eq!(out.trace.iter().filter(|e| e.op_kind == "Unary").count(), 3);
        let mut buf = Vec::new();
        write_trace_csv(&out.trace, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("timestamp_us,worker_id,key,node_id,op_kind"));
    }

    #[test]
    fn cond_runs_only_the_taken_branch() {
        let mut g = GraphBuilder::new();
        let p = g.placeholder("x", ShapeSpec::fixed(1, 1)).unwrap();
        let table = g.constant(Tensor::zeros(1, 1)).unwrap();
        let out = g
            .cond_with(
                p,
                &[p],
                vec![ValueType::tensor(1, 1)],
                |_, ins| Ok(vec![ins[0]]),
                // would fail with an out-of-range index if executed
                |b, ins| Ok(vec![b.gather_row(table, ins[0])?]),
            )
            .unwrap();
        let g = Arc::new(g.finalize().unwrap());
        let r = Executor::new(1).run(&g, &feed(5.0), &[out[0]], &RunOptions::default()).unwrap();
        assert_eq!(r.scalar(0).unwrap(), 5.0);
        assert_eq!(r.stats.frames_per_subgraph.get("main/if1/else"), None);
    }

    #[test]
    fn batch_runs_are_independent() {
        let (g, y) = countdown(true);
        let ex = Executor::new(4);
        let feeds: Vec<Feeds> = (0..20).map(|i| feed(i as f64)).collect();
        let outs = ex.run_batch(&g, &feeds, &[y], &RunOptions::default());
        for (i, o) in outs.into_iter().enumerate() {
            assert_eq!(o.unwrap().scalar(0).unwrap(), i as f64);
        }
    }
}
