//! Tree models as dataflow graphs.
//!
//! The recursive variant defines one SubGraph `Tree(idx)` that branches on
//! whether `idx` is a leaf and, for internal nodes, invokes itself on both
//! children. The iterative variant unrolls a chain of `Step(pos)` calls over
//! the topologically sorted node positions and keeps states in write-once
//! arrays.
//!
//! All vectors are rows (1 x d). `[h_l, h_r]` is the 1 x 2d column
//! concatenation; weight matrices are stored output-major (d x 2d) and
//! applied as `x * W^T`.

pub mod oracle;

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::differentiate;
use crate::data::{NodeKind, TreeInstance};
use crate::executor::Feeds;
use crate::graph::{BuildError, FinalizedGraph, GraphBuilder, NodeId, ShapeSpec, Signature, SubGraphRef, ValueType};
use crate::tensor::{Shape, Tensor};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Build(#[from] BuildError),
    #[error("instance has {nodes} nodes but the iterative graph was built for {capacity}")]
    Capacity { nodes: usize, capacity: usize },
    #[error("token id {token} outside vocabulary of size {vocab}")]
    Token { token: usize, vocab: usize },
    #[error("label {label} outside {classes} classes")]
    Label { label: usize, classes: usize },
    #[error("invalid tree: {0}")]
    Tree(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ModelKind {
    #[serde(rename = "treernn")]
    TreeRnn,
    #[serde(rename = "rntn")]
    Rntn,
    #[serde(rename = "treelstm")]
    TreeLstm,
}

impl ModelKind {
    pub const ALL: [ModelKind; 3] = [ModelKind::TreeRnn, ModelKind::Rntn, ModelKind::TreeLstm];

    pub fn name(&self) -> &'static str {
        match self {
            ModelKind::TreeRnn => "treernn",
            ModelKind::Rntn => "rntn",
            ModelKind::TreeLstm => "treelstm",
        }
    }

    /// Number of per-node state tensors (h, or h and c).
    pub fn states(&self) -> usize {
        match self {
            ModelKind::TreeLstm => 2,
            _ => 1,
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for ModelKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "treernn" => Ok(ModelKind::TreeRnn),
            "rntn" => Ok(ModelKind::Rntn),
            "treelstm" => Ok(ModelKind::TreeLstm),
            other => Err(format!("unknown model `{other}` (treernn|rntn|treelstm)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Mode {
    Recursive,
    Iterative,
}

impl Mode {
    pub fn name(&self) -> &'static str {
        match self {
            Mode::Recursive => "recursive",
            Mode::Iterative => "iterative",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "recursive" => Ok(Mode::Recursive),
            "iterative" => Ok(Mode::Iterative),
            other => Err(format!("unknown mode `{other}` (recursive|iterative)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub d: usize,
    pub vocab: usize,
    pub classes: usize,
    /// Sum cross-entropies over every node instead of the root only.
    pub per_node_loss: bool,
}

impl ModelConfig {
    pub fn new(kind: ModelKind, d: usize, vocab: usize, classes: usize) -> Self {
        ModelConfig {
            kind,
            d,
            vocab,
            classes,
            per_node_loss: false,
        }
    }
}

const LSTM_GATES: [&str; 5] = ["i", "fl", "fr", "o", "u"];
const LSTM_LEAF_GATES: [&str; 3] = ["i", "o", "u"];

/// Parameter names and shapes, in a fixed order.
pub fn param_specs(kind: ModelKind, d: usize, vocab: usize, classes: usize) -> Vec<(String, Shape)> {
    let mut v = vec![("E".to_string(), Shape::new(vocab, d))];
    match kind {
        ModelKind::TreeRnn => {
            v.push(("W".into(), Shape::new(d, 2 * d)));
            v.push(("b".into(), Shape::new(1, d)));
        }
        ModelKind::Rntn => {
            v.push(("V".into(), Shape::new(d * 2 * d, 2 * d)));
            v.push(("W".into(), Shape::new(d, 2 * d)));
            v.push(("b".into(), Shape::new(1, d)));
        }
        ModelKind::TreeLstm => {
            for g in LSTM_GATES {
                v.push((format!("U_{g}"), Shape::new(d, 2 * d)));
                v.push((format!("b_{g}"), Shape::new(1, d)));
            }
            for g in LSTM_LEAF_GATES {
                v.push((format!("W_{g}"), Shape::new(d, d)));
                v.push((format!("bl_{g}"), Shape::new(1, d)));
            }
        }
    }
    v.push(("Ws".into(), Shape::new(classes, d)));
    v.push(("bs".into(), Shape::new(1, classes)));
    v
}

/// Named parameter tensors of one model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub kind: ModelKind,
    pub d: usize,
    pub vocab: usize,
    pub classes: usize,
    pub tensors: BTreeMap<String, Tensor>,
}

impl ModelParams {
    /// Uniform initialization: Glorot range for matrices, +-0.1 for
    /// embeddings and zero biases.
    pub fn init<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Self {
        let mut tensors = BTreeMap::new();
        for (name, shape) in param_specs(cfg.kind, cfg.d, cfg.vocab, cfg.classes) {
            let t = if name == "E" {
                Tensor::random_init(shape, 0.1, rng)
            } else if shape.rows == 1 {
                Tensor::zeros(1, shape.cols)
            } else if name == "V" {
                Tensor::random_init(shape, 0.1 / (cfg.d as f64).sqrt(), rng)
            } else {
                let scale = (6.0 / (shape.rows + shape.cols) as f64).sqrt();
                Tensor::random_init(shape, scale, rng)
            };
            tensors.insert(name, t);
        }
        ModelParams {
            kind: cfg.kind,
            d: cfg.d,
            vocab: cfg.vocab,
            classes: cfg.classes,
            tensors,
        }
    }

    /// Like [`ModelParams::init`] but with random biases too; used to make
    /// gradient checks exercise every term.
    pub fn init_dense<R: Rng + ?Sized>(cfg: &ModelConfig, scale: f64, rng: &mut R) -> Self {
        let mut p = Self::init(cfg, rng);
        for t in p.tensors.values_mut() {
            *t = Tensor::random_init(t.shape(), scale, rng);
        }
        p
    }

    pub fn get(&self, name: &str) -> &Tensor {
        &self.tensors[name]
    }

    pub fn shared(&self) -> Arc<HashMap<String, Arc<Tensor>>> {
        Arc::new(
            self.tensors
                .iter()
                .map(|(k, v)| (k.clone(), Arc::new(v.clone())))
                .collect(),
        )
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(|t| t.data().len()).sum()
    }

    pub fn to_checkpoint(&self, vocab: Option<&[String]>) -> Checkpoint {
        Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            kind: self.kind,
            d: self.d,
            vocab_size: self.vocab,
            classes: self.classes,
            params: self
                .tensors
                .iter()
                .map(|(k, t)| {
                    (
                        k.clone(),
                        StoredTensor {
                            rows: t.rows(),
                            cols: t.cols(),
                            data: t.data().to_vec(),
                        },
                    )
                })
                .collect(),
            vocab: vocab.map(|v| v.to_vec()),
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self, ModelError> {
        if ck.format != CHECKPOINT_FORMAT {
            return Err(ModelError::Checkpoint(format!(
                "unsupported format `{}`, expected `{CHECKPOINT_FORMAT}`",
                ck.format
            )));
        }
        let specs = param_specs(ck.kind, ck.d, ck.vocab_size, ck.classes);
        let mut diffs = Vec::new();
        let mut tensors = BTreeMap::new();
        for (name, shape) in &specs {
            match ck.params.get(name) {
                None => diffs.push(format!("missing `{name}` ({shape})")),
                Some(s) if s.rows != shape.rows || s.cols != shape.cols => {
                    diffs.push(format!("`{name}`: checkpoint {}x{}, model {shape}", s.rows, s.cols))
                }
                Some(s) => {
                    let t = Tensor::from_vec(s.rows, s.cols, s.data.clone())
                        .map_err(|e| ModelError::Checkpoint(format!("`{name}`: {e}")))?;
                    tensors.insert(name.clone(), t);
                }
            }
        }
        for name in ck.params.keys() {
            if !specs.iter().any(|(n, _)| n == name) {
                diffs.push(format!("unexpected `{name}`"));
            }
        }
        if !diffs.is_empty() {
            return Err(ModelError::Checkpoint(format!("shape mismatch: {}", diffs.join("; "))));
        }
        Ok(ModelParams {
            kind: ck.kind,
            d: ck.d,
            vocab: ck.vocab_size,
            classes: ck.classes,
            tensors,
        })
    }
}

pub const CHECKPOINT_FORMAT: &str = "rdg-ckpt-1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoredTensor {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

/// Versioned JSON checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub kind: ModelKind,
    pub d: usize,
    #[serde(rename = "V")]
    pub vocab_size: usize,
    #[serde(rename = "C")]
    pub classes: usize,
    pub params: BTreeMap<String, StoredTensor>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vocab: Option<Vec<String>>,
}

impl Checkpoint {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("checkpoint serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, ModelError> {
        serde_json::from_str(text).map_err(|e| ModelError::Checkpoint(e.to_string()))
    }
}

/// A built model: forward graph, differentiated training graph and the
/// handles needed to feed and read them.
#[derive(Debug, Clone)]
pub struct BuiltModel {
    pub config: ModelConfig,
    pub mode: Mode,
    /// Maximum instance size (iterative variant only).
    pub capacity: Option<usize>,
    pub forward: Arc<FinalizedGraph>,
    pub train: Arc<FinalizedGraph>,
    pub loss: NodeId,
    pub logits: NodeId,
    /// Gradient node per parameter, in [`param_specs`] order.
    pub grads: Vec<(String, NodeId)>,
    /// `Tree` (recursive) or `Step` (iterative).
    pub cell: SubGraphRef,
}

struct Params {
    nodes: HashMap<String, NodeId>,
}

impl Params {
    fn get(&self, name: &str) -> NodeId {
        self.nodes[name]
    }
}

fn affine(b: &mut GraphBuilder, x: NodeId, w: NodeId, bias: NodeId) -> Result<NodeId, BuildError> {
    let xw = b.matmul_bt(x, w)?;
    b.add(xw, bias)
}

/// Leaf state from an embedding row.
fn leaf_cell(b: &mut GraphBuilder, p: &Params, kind: ModelKind, x: NodeId) -> Result<Vec<NodeId>, BuildError> {
    match kind {
        ModelKind::TreeRnn | ModelKind::Rntn => Ok(vec![x]),
        ModelKind::TreeLstm => {
            let i = affine(b, x, p.get("W_i"), p.get("bl_i"))?;
            let i = b.sigmoid(i)?;
            let o = affine(b, x, p.get("W_o"), p.get("bl_o"))?;
            let o = b.sigmoid(o)?;
            let u = affine(b, x, p.get("W_u"), p.get("bl_u"))?;
            let u = b.tanh(u)?;
            let c = b.hadamard(i, u)?;
            let tc = b.tanh(c)?;
            let h = b.hadamard(o, tc)?;
            Ok(vec![h, c])
        }
    }
}

/// Parent state from the two child states.
fn internal_cell(
    b: &mut GraphBuilder,
    p: &Params,
    kind: ModelKind,
    d: usize,
    left: &[NodeId],
    right: &[NodeId],
) -> Result<Vec<NodeId>, BuildError> {
    let x = b.concat_cols(left[0], right[0])?;
    match kind {
        ModelKind::TreeRnn => {
            let a = affine(b, x, p.get("W"), p.get("b"))?;
            Ok(vec![b.tanh(a)?])
        }
        ModelKind::Rntn => {
            let u = b.matmul_bt(p.get("V"), x)?;
            let r = b.reshape(u, Shape::new(d, 2 * d))?;
            let quad = b.matmul_bt(x, r)?;
            let a = affine(b, x, p.get("W"), p.get("b"))?;
            let s = b.add(quad, a)?;
            Ok(vec![b.tanh(s)?])
        }
        ModelKind::TreeLstm => {
            let mut gates = HashMap::new();
            for g in LSTM_GATES {
                let a = affine(b, x, p.get(&format!("U_{g}")), p.get(&format!("b_{g}")))?;
                let v = if g == "u" { b.tanh(a)? } else { b.sigmoid(a)? };
                gates.insert(g, v);
            }
            let iu = b.hadamard(gates["i"], gates["u"])?;
            let fl = b.hadamard(gates["fl"], left[1])?;
            let fr = b.hadamard(gates["fr"], right[1])?;
            let c = b.add(iu, fl)?;
            let c = b.add(c, fr)?;
            let tc = b.tanh(c)?;
            let h = b.hadamard(gates["o"], tc)?;
            Ok(vec![h, c])
        }
    }
}

fn logits_of(b: &mut GraphBuilder, p: &Params, h: NodeId) -> Result<NodeId, BuildError> {
    affine(b, h, p.get("Ws"), p.get("bs"))
}

fn node_loss(b: &mut GraphBuilder, p: &Params, h: NodeId, label: NodeId) -> Result<NodeId, BuildError> {
    let logits = logits_of(b, p, h)?;
    b.softmax_xent(logits, label)
}

fn declare_params(b: &mut GraphBuilder, cfg: &ModelConfig) -> Result<Params, BuildError> {
    let mut nodes = HashMap::new();
    for (name, shape) in param_specs(cfg.kind, cfg.d, cfg.vocab, cfg.classes) {
        let id = b.parameter(&name, shape)?;
        nodes.insert(name, id);
    }
    Ok(Params { nodes })
}

fn check_config(cfg: &ModelConfig) -> Result<(), ModelError> {
    if cfg.d == 0 || cfg.vocab == 0 || cfg.classes == 0 {
        return Err(ModelError::Build(BuildError::Autodiff(
            "d, vocabulary size and class count must be at least 1".into(),
        )));
    }
    Ok(())
}

fn finish(
    mut b: GraphBuilder,
    cfg: &ModelConfig,
    mode: Mode,
    capacity: Option<usize>,
    loss: NodeId,
    logits: NodeId,
    cell: SubGraphRef,
) -> Result<BuiltModel, ModelError> {
    let forward = b.finalize()?;
    let wrt: Vec<NodeId> = forward.parameters().into_iter().map(|(_, id)| id).collect();
    let grads = differentiate(&forward, loss, &wrt)?;
    Ok(BuiltModel {
        config: *cfg,
        mode,
        capacity,
        forward: Arc::new(forward),
        train: Arc::new(grads.graph),
        loss,
        logits,
        grads: grads.params,
        cell,
    })
}

fn col(b: &mut GraphBuilder, name: &str) -> Result<NodeId, BuildError> {
    b.placeholder(name, ShapeSpec::dynamic_rows(1))
}

/// Recursive variant: `Tree(idx)` calls itself on both children of an
/// internal node.
pub fn build_recursive(cfg: &ModelConfig) -> Result<BuiltModel, ModelError> {
    check_config(cfg)?;
    let (kind, d) = (cfg.kind, cfg.d);
    let mut b = GraphBuilder::new();
    let p = declare_params(&mut b, cfg)?;
    let is_leaf = col(&mut b, "is_leaf")?;
    let token = col(&mut b, "token")?;
    let left = col(&mut b, "left")?;
    let right = col(&mut b, "right")?;
    let labels = col(&mut b, "label")?;
    let root = b.placeholder("root", ShapeSpec::fixed(1, 1))?;
    let root_label = b.placeholder("root_label", ShapeSpec::fixed(1, 1))?;

    let nstates = kind.states();
    let mut outs = vec![ValueType::tensor(1, d); nstates];
    if cfg.per_node_loss {
        outs.push(ValueType::tensor(1, 1));
    }
    let tree = b.declare_subgraph("Tree", Signature::new(vec![ValueType::tensor(1, 1)], outs.clone()))?;
    b.define_subgraph(tree, |b, ins| {
        let idx = ins[0];
        let flag = b.gather_row(is_leaf, idx)?;
        b.cond_with(
            flag,
            &[idx],
            outs.clone(),
            |b, ins| {
                let tok = b.gather_row(token, ins[0])?;
                let x = b.gather_row(p.get("E"), tok)?;
                let mut st = leaf_cell(b, &p, kind, x)?;
                if cfg.per_node_loss {
                    let lab = b.gather_row(labels, ins[0])?;
                    st.push(node_loss(b, &p, st[0], lab)?);
                }
                Ok(st)
            },
            |b, ins| {
                let l = b.gather_row(left, ins[0])?;
                let r = b.gather_row(right, ins[0])?;
                let ls = b.invoke(tree, &[l])?;
                let rs = b.invoke(tree, &[r])?;
                let mut st = internal_cell(b, &p, kind, d, &ls[..nstates], &rs[..nstates])?;
                if cfg.per_node_loss {
                    let lab = b.gather_row(labels, ins[0])?;
                    let own = node_loss(b, &p, st[0], lab)?;
                    let sub = b.add(ls[nstates], rs[nstates])?;
                    st.push(b.add(sub, own)?);
                }
                Ok(st)
            },
        )
    })?;
    let top = b.invoke(tree, &[root])?;
    let logits = logits_of(&mut b, &p, top[0])?;
    let loss = if cfg.per_node_loss {
        top[nstates]
    } else {
        b.softmax_xent(logits, root_label)?
    };
    finish(b, cfg, Mode::Recursive, None, loss, logits, tree)
}

/// Iterative variant: a build-time chain of `capacity` masked `Step(pos)`
/// calls over nodes in topological order.
pub fn build_iterative(cfg: &ModelConfig, capacity: usize) -> Result<BuiltModel, ModelError> {
    check_config(cfg)?;
    if capacity == 0 {
        return Err(ModelError::Capacity { nodes: 1, capacity });
    }
    let (kind, d) = (cfg.kind, cfg.d);
    let mut b = GraphBuilder::new();
    let p = declare_params(&mut b, cfg)?;
    let table = |b: &mut GraphBuilder, name: &str| b.placeholder(name, ShapeSpec::fixed(capacity, 1));
    let active = table(&mut b, "active")?;
    let is_leaf = table(&mut b, "is_leaf")?;
    let token = table(&mut b, "token")?;
    let left = table(&mut b, "left")?;
    let right = table(&mut b, "right")?;
    let labels = table(&mut b, "label")?;
    let root = b.placeholder("root", ShapeSpec::fixed(1, 1))?;
    let root_label = b.placeholder("root_label", ShapeSpec::fixed(1, 1))?;

    let nstates = kind.states();
    let elem = Shape::new(1, d);
    let arr = ValueType::Array { len: capacity, elem };
    let mut state = vec![arr; nstates];
    if cfg.per_node_loss {
        state.push(ValueType::tensor(1, 1));
    }
    let mut sig_in = vec![ValueType::tensor(1, 1)];
    sig_in.extend(state.iter().copied());
    let step = b.declare_subgraph("Step", Signature::new(sig_in, state.clone()))?;
    b.define_subgraph(step, |b, ins| {
        let pos = ins[0];
        let flag = b.gather_row(active, pos)?;
        b.cond_with(
            flag,
            ins,
            state.clone(),
            |b, ins| {
                let pos = ins[0];
                let leaf = b.gather_row(is_leaf, pos)?;
                b.cond_with(
                    leaf,
                    ins,
                    state.clone(),
                    |b, ins| {
                        let pos = ins[0];
                        let tok = b.gather_row(token, pos)?;
                        let x = b.gather_row(p.get("E"), tok)?;
                        let st = leaf_cell(b, &p, kind, x)?;
                        write_states(b, &p, cfg, ins, pos, labels, &st)
                    },
                    |b, ins| {
                        let pos = ins[0];
                        let l = b.gather_row(left, pos)?;
                        let r = b.gather_row(right, pos)?;
                        let mut ls = Vec::new();
                        let mut rs = Vec::new();
                        for k in 0..nstates {
                            ls.push(b.array_read(ins[1 + k], l)?);
                            rs.push(b.array_read(ins[1 + k], r)?);
                        }
                        let st = internal_cell(b, &p, kind, d, &ls, &rs)?;
                        write_states(b, &p, cfg, ins, pos, labels, &st)
                    },
                )
            },
            |_, ins| Ok(ins[1..].to_vec()),
        )
    })?;
    let mut carry: Vec<NodeId> = Vec::with_capacity(state.len());
    for _ in 0..nstates {
        carry.push(b.array_new(capacity, elem)?);
    }
    if cfg.per_node_loss {
        carry.push(b.constant(Tensor::scalar(0.0))?);
    }
    for pos in 0..capacity {
        let at = b.constant(Tensor::scalar(pos as f64))?;
        let mut args = vec![at];
        args.extend(carry.iter().copied());
        carry = b.invoke(step, &args)?;
    }
    let h = b.array_read(carry[0], root)?;
    let logits = logits_of(&mut b, &p, h)?;
    let loss = if cfg.per_node_loss {
        carry[nstates]
    } else {
        b.softmax_xent(logits, root_label)?
    };
    finish(b, cfg, Mode::Iterative, Some(capacity), loss, logits, step)
}

fn write_states(
    b: &mut GraphBuilder,
    p: &Params,
    cfg: &ModelConfig,
    ins: &[NodeId],
    pos: NodeId,
    labels: NodeId,
    st: &[NodeId],
) -> Result<Vec<NodeId>, BuildError> {
    let nstates = cfg.kind.states();
    let mut out = Vec::with_capacity(ins.len() - 1);
    for k in 0..nstates {
        out.push(b.array_write(ins[1 + k], pos, st[k])?);
    }
    if cfg.per_node_loss {
        let lab = b.gather_row(labels, pos)?;
        let l = node_loss(b, p, st[0], lab)?;
        out.push(b.add(ins[1 + nstates], l)?);
    }
    Ok(out)
}

pub fn build(cfg: &ModelConfig, mode: Mode, capacity: usize) -> Result<BuiltModel, ModelError> {
    match mode {
        Mode::Recursive => build_recursive(cfg),
        Mode::Iterative => build_iterative(cfg, capacity),
    }
}

impl BuiltModel {
    fn check_tree(&self, tree: &TreeInstance) -> Result<(), ModelError> {
        tree.validate().map_err(ModelError::Tree)?;
        for n in &tree.nodes {
            if n.label >= self.config.classes {
                return Err(ModelError::Label {
                    label: n.label,
                    classes: self.config.classes,
                });
            }
            if let NodeKind::Leaf { token } = n.kind {
                if token >= self.config.vocab {
                    return Err(ModelError::Token {
                        token,
                        vocab: self.config.vocab,
                    });
                }
            }
        }
        Ok(())
    }

    /// Placeholder values describing `tree`, on top of shared parameters.
    pub fn feeds(&self, tree: &TreeInstance, params: &Arc<HashMap<String, Arc<Tensor>>>) -> Result<Feeds, ModelError> {
        self.check_tree(tree)?;
        let n = tree.len();
        let rows = match self.capacity {
            Some(c) if n > c => return Err(ModelError::Capacity { nodes: n, capacity: c }),
            Some(c) => c,
            None => n,
        };
        // position of each node in the fed tables
        let pos: Vec<usize> = match self.mode {
            Mode::Recursive => (0..n).collect(),
            Mode::Iterative => {
                let mut pos = vec![0; n];
                for (p, &i) in tree.topo_order.iter().enumerate() {
                    pos[i] = p;
                }
                pos
            }
        };
        let mut is_leaf = vec![0.0; rows];
        let mut token = vec![0.0; rows];
        let mut left = vec![0.0; rows];
        let mut right = vec![0.0; rows];
        let mut label = vec![0.0; rows];
        for (i, node) in tree.nodes.iter().enumerate() {
            let at = pos[i];
            label[at] = node.label as f64;
            match node.kind {
                NodeKind::Leaf { token: t } => {
                    is_leaf[at] = 1.0;
                    token[at] = t as f64;
                }
                NodeKind::Internal { left: l, right: r } => {
                    left[at] = pos[l] as f64;
                    right[at] = pos[r] as f64;
                }
            }
        }
        let column = |v: Vec<f64>| Tensor::from_vec(rows, 1, v).expect("column length matches");
        let mut f = Feeds::with_params(params.clone());
        f.insert("is_leaf", column(is_leaf));
        f.insert("token", column(token));
        f.insert("left", column(left));
        f.insert("right", column(right));
        f.insert("label", column(label));
        f.insert("root", Tensor::scalar(pos[tree.root] as f64));
        f.insert("root_label", Tensor::scalar(tree.root_label() as f64));
        if self.mode == Mode::Iterative {
            let act = (0..rows).map(|p| if p < n { 1.0 } else { 0.0 }).collect();
            f.insert("active", column(act));
        }
        Ok(f)
    }

    /// Parameter node ids of the forward graph.
    pub fn parameter_nodes(&self) -> Vec<(String, NodeId)> {
        self.forward.parameters()
    }
}
