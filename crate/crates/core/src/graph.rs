//! Graph intermediate representation.
//!
//! A [`GraphBuilder`] collects operation nodes into scopes. Scope 0 is the
//! top-level graph; every SubGraph body is its own scope, lexically nested in
//! the scope that was open when it was defined. Bodies may reference nodes of
//! enclosing scopes; such references are captured automatically and turned
//! into extra body inputs when the graph is finalized.
//!
//! SubGraphs are declared before they are defined, so a body can invoke its
//! own SubGraph (or one declared later, for mutual recursion).

use std::collections::HashMap;
use std::fmt;
use std::sync::Arc;

use thiserror::Error;

use crate::tensor::{BinaryFn, Shape, Tensor, UnaryFn};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum BuildError {
    #[error("node {node}: {msg}")]
    Node { node: String, msg: String },
    #[error("unknown node {0}")]
    UnknownNode(NodeId),
    #[error("node {node} is not visible from scope {scope}")]
    NotVisible { node: NodeId, scope: u32 },
    #[error("subgraph `{0}` is already declared")]
    DuplicateSubGraph(String),
    #[error("subgraph `{0}` is already defined")]
    AlreadyDefined(String),
    #[error("undefined body for subgraph(s): {0}")]
    Undefined(String),
    #[error("subgraph `{name}`: {msg}")]
    Signature { name: String, msg: String },
    #[error("arity mismatch for {what}: expected {expected}, got {got}")]
    Arity {
        what: String,
        expected: usize,
        got: usize,
    },
    #[error("capture of {node} is out of scope where `{name}` is invoked")]
    CaptureOutOfScope { node: NodeId, name: String },
    #[error("cycle among nodes of scope {scope}: {nodes:?}")]
    Cycle { scope: u32, nodes: Vec<u32> },
    #[error("graph is already finalized")]
    Finalized,
    #[error("{0}")]
    Autodiff(String),
}

pub type Result<T> = std::result::Result<T, BuildError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId {
    pub scope: u32,
    pub index: u32,
}

impl NodeId {
    pub const fn top(index: u32) -> Self {
        NodeId { scope: 0, index }
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.scope == 0 {
            write!(f, "%{}", self.index)
        } else {
            write!(f, "s{}%{}", self.scope, self.index)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SubGraphRef(pub u32);

/// Static shape; `None` dimensions are only known at run time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ShapeSpec {
    pub rows: Option<usize>,
    pub cols: Option<usize>,
}

impl ShapeSpec {
    pub const ANY: ShapeSpec = ShapeSpec {
        rows: None,
        cols: None,
    };

    pub const fn fixed(rows: usize, cols: usize) -> Self {
        ShapeSpec {
            rows: Some(rows),
            cols: Some(cols),
        }
    }

    pub const fn dynamic_rows(cols: usize) -> Self {
        ShapeSpec {
            rows: None,
            cols: Some(cols),
        }
    }

    pub fn as_shape(&self) -> Option<Shape> {
        Some(Shape::new(self.rows?, self.cols?))
    }

    pub fn admits(&self, s: Shape) -> bool {
        self.rows.is_none_or(|r| r == s.rows) && self.cols.is_none_or(|c| c == s.cols)
    }

    fn unify(&self, other: &ShapeSpec) -> Option<ShapeSpec> {
        fn dim(a: Option<usize>, b: Option<usize>) -> Option<Option<usize>> {
            match (a, b) {
                (Some(x), Some(y)) if x != y => None,
                (Some(x), _) | (_, Some(x)) => Some(Some(x)),
                _ => Some(None),
            }
        }
        Some(ShapeSpec {
            rows: dim(self.rows, other.rows)?,
            cols: dim(self.cols, other.cols)?,
        })
    }
}

impl From<Shape> for ShapeSpec {
    fn from(s: Shape) -> Self {
        ShapeSpec::fixed(s.rows, s.cols)
    }
}

impl fmt::Display for ShapeSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let d = |x: Option<usize>| x.map_or("?".to_string(), |v| v.to_string());
        write!(f, "{}x{}", d(self.rows), d(self.cols))
    }
}

/// Static type of the value a node produces.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ValueType {
    Tensor(ShapeSpec),
    Tuple(usize),
    Key,
    Array { len: usize, elem: Shape },
    Unit,
}

impl ValueType {
    pub fn tensor(rows: usize, cols: usize) -> Self {
        ValueType::Tensor(ShapeSpec::fixed(rows, cols))
    }

    pub fn shape(&self) -> Option<ShapeSpec> {
        match self {
            ValueType::Tensor(s) => Some(*s),
            _ => None,
        }
    }

    pub fn compatible(&self, other: &ValueType) -> bool {
        match (self, other) {
            (ValueType::Tensor(a), ValueType::Tensor(b)) => a.unify(b).is_some(),
            (a, b) => a == b,
        }
    }
}

impl fmt::Display for ValueType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ValueType::Tensor(s) => write!(f, "{s}"),
            ValueType::Tuple(n) => write!(f, "tuple({n})"),
            ValueType::Key => write!(f, "key"),
            ValueType::Array { len, elem } => write!(f, "array[{len}]<{elem}>"),
            ValueType::Unit => write!(f, "unit"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Signature {
    pub inputs: Vec<ValueType>,
    pub outputs: Vec<ValueType>,
}

impl Signature {
    pub fn new(inputs: Vec<ValueType>, outputs: Vec<ValueType>) -> Self {
        Signature { inputs, outputs }
    }

    pub fn tensors(inputs: &[Shape], outputs: &[Shape]) -> Self {
        let t = |s: &[Shape]| s.iter().map(|s| ValueType::Tensor((*s).into())).collect();
        Signature::new(t(inputs), t(outputs))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SubGraphKind {
    /// A named, user-declared function.
    Function,
    /// The then/else arm of a conditional.
    Branch,
    /// Synthesized by automatic differentiation.
    Gradient,
}

#[derive(Debug, Clone, PartialEq)]
pub enum OpKind {
    Placeholder { name: String, shape: ShapeSpec },
    Parameter { name: String, shape: Shape },
    Constant(Arc<Tensor>),
    /// Body input slot (signature inputs first, then captures).
    Input(usize),
    /// Shapeless additive identity, used for absent gradients.
    Zero,
    /// The invocation key of the executing frame.
    FrameKey,
    /// Extend a key value with an Invoke/Cond node index. An optional
    /// second input only orders the node after that value.
    ChildKey(u32),
    MatMul { ta: bool, tb: bool },
    Unary(UnaryFn),
    /// Inputs: upstream gradient, saved forward value.
    UnaryGrad(UnaryFn),
    Binary(BinaryFn),
    ConcatRows,
    ConcatCols,
    SliceRows { start: usize, len: usize },
    SliceCols { start: usize, len: usize },
    /// Place the input at row `start` of a zero tensor with `total` rows.
    PadRows { start: usize, total: usize },
    PadCols { start: usize, total: usize },
    Reshape(Shape),
    /// Inputs: table, index.
    GatherRow,
    /// Inputs: row gradient, index. Produces a row-sparse `rows x cols` value.
    ScatterRow { rows: usize },
    /// Inputs: logits (1 x C), label (1 x 1). Output: loss (1 x 1).
    SoftmaxXent,
    /// Inputs: upstream (1 x 1), logits, label.
    SoftmaxXentGrad,
    /// Inputs: predicate, args, then-captures, else-captures.
    Cond {
        then_branch: SubGraphRef,
        else_branch: SubGraphRef,
        nargs: usize,
        record: bool,
    },
    /// Inputs: one upstream gradient per Cond output, then the Cond's key.
    /// Output tuple is aligned with the Cond's inputs.
    CondGrad {
        then_grad: Option<SubGraphRef>,
        else_grad: Option<SubGraphRef>,
        nargs: usize,
        then_caps: usize,
        else_caps: usize,
    },
    /// Inputs: args followed by the callee's captures.
    Invoke(SubGraphRef),
    Project(usize),
    /// Store the input under (frame key, target).
    CacheWrite { target: u32 },
    /// Input: key. Takes the value stored under (key, target).
    CacheRead { target: u32 },
    GradAccum,
    Densify(Shape),
    ArrayNew { len: usize, elem: Shape },
    /// Inputs: array, index, value. Output: the same array.
    ArrayWrite,
    /// Inputs: array, index.
    ArrayRead,
    /// Inputs: array, index, gradient. Output: unit token.
    ArrayGradWrite,
    /// Inputs: array, index, ordering token.
    ArrayGradRead,
}

impl OpKind {
    pub fn name(&self) -> String {
        match self {
            OpKind::Placeholder { name, .. } => format!("placeholder {name}"),
            OpKind::Parameter { name, .. } => format!("parameter {name}"),
            OpKind::Constant(t) => format!("constant<{}>", t.shape()),
            OpKind::Input(k) => format!("input[{k}]"),
            OpKind::Zero => "zero".into(),
            OpKind::FrameKey => "frame_key".into(),
            OpKind::ChildKey(i) => format!("child_key[{i}]"),
            OpKind::MatMul { ta, tb } => match (ta, tb) {
                (false, false) => "matmul".into(),
                (true, false) => "matmul[ta]".into(),
                (false, true) => "matmul[tb]".into(),
                (true, true) => "matmul[ta,tb]".into(),
            },
            OpKind::Unary(f) => f.name().into(),
            OpKind::UnaryGrad(f) => format!("{}_grad", f.name()),
            OpKind::Binary(f) => f.name().into(),
            OpKind::ConcatRows => "concat_rows".into(),
            OpKind::ConcatCols => "concat_cols".into(),
            OpKind::SliceRows { start, len } => format!("slice_rows[{start}+{len}]"),
            OpKind::SliceCols { start, len } => format!("slice_cols[{start}+{len}]"),
            OpKind::PadRows { start, total } => format!("pad_rows[{start}/{total}]"),
            OpKind::PadCols { start, total } => format!("pad_cols[{start}/{total}]"),
            OpKind::Reshape(s) => format!("reshape[{s}]"),
            OpKind::GatherRow => "gather_row".into(),
            OpKind::ScatterRow { rows } => format!("scatter_row[{rows}]"),
            OpKind::SoftmaxXent => "softmax_xent".into(),
            OpKind::SoftmaxXentGrad => "softmax_xent_grad".into(),
            OpKind::Cond {
                then_branch,
                else_branch,
                ..
            } => format!("cond[#{} | #{}]", then_branch.0, else_branch.0),
            OpKind::CondGrad {
                then_grad,
                else_grad,
                ..
            } => {
                let r = |s: &Option<SubGraphRef>| s.map_or("-".to_string(), |s| format!("#{}", s.0));
                format!("cond_grad[{} | {}]", r(then_grad), r(else_grad))
            }
            OpKind::Invoke(s) => format!("invoke[#{}]", s.0),
            OpKind::Project(k) => format!("project[{k}]"),
            OpKind::CacheWrite { target } => format!("cache_write[%{target}]"),
            OpKind::CacheRead { target } => format!("cache_read[%{target}]"),
            OpKind::GradAccum => "grad_accum".into(),
            OpKind::Densify(s) => format!("densify[{s}]"),
            OpKind::ArrayNew { len, .. } => format!("array_new[{len}]"),
            OpKind::ArrayWrite => "array_write".into(),
            OpKind::ArrayRead => "array_read".into(),
            OpKind::ArrayGradWrite => "array_grad_write".into(),
            OpKind::ArrayGradRead => "array_grad_read".into(),
        }
    }

    /// Short tag used in traces.
    pub fn tag(&self) -> &'static str {
        match self {
            OpKind::Placeholder { .. } => "Placeholder",
            OpKind::Parameter { .. } => "Parameter",
            OpKind::Constant(_) => "Constant",
            OpKind::Input(_) => "Input",
            OpKind::Zero => "Zero",
            OpKind::FrameKey => "FrameKey",
            OpKind::ChildKey(_) => "ChildKey",
            OpKind::MatMul { .. } => "MatMul",
            OpKind::Unary(_) => "Unary",
            OpKind::UnaryGrad(_) => "UnaryGrad",
            OpKind::Binary(_) => "Binary",
            OpKind::ConcatRows => "ConcatRows",
            OpKind::ConcatCols => "ConcatCols",
            OpKind::SliceRows { .. } => "SliceRows",
            OpKind::SliceCols { .. } => "SliceCols",
            OpKind::PadRows { .. } => "PadRows",
            OpKind::PadCols { .. } => "PadCols",
            OpKind::Reshape(_) => "Reshape",
            OpKind::GatherRow => "GatherRow",
            OpKind::ScatterRow { .. } => "ScatterRow",
            OpKind::SoftmaxXent => "SoftmaxXent",
            OpKind::SoftmaxXentGrad => "SoftmaxXentGrad",
            OpKind::Cond { .. } => "Cond",
            OpKind::CondGrad { .. } => "CondGrad",
            OpKind::Invoke(_) => "Invoke",
            OpKind::Project(_) => "Project",
            OpKind::CacheWrite { .. } => "CacheWrite",
            OpKind::CacheRead { .. } => "CacheRead",
            OpKind::GradAccum => "GradAccum",
            OpKind::Densify(_) => "Densify",
            OpKind::ArrayNew { .. } => "ArrayNew",
            OpKind::ArrayWrite => "ArrayWrite",
            OpKind::ArrayRead => "ArrayRead",
            OpKind::ArrayGradWrite => "ArrayGradWrite",
            OpKind::ArrayGradRead => "ArrayGradRead",
        }
    }

    /// Numeric kernels, as opposed to bookkeeping and control operations.
    pub fn is_compute(&self) -> bool {
        matches!(
            self,
            OpKind::MatMul { .. }
                | OpKind::Unary(_)
                | OpKind::UnaryGrad(_)
                | OpKind::Binary(_)
                | OpKind::ConcatRows
                | OpKind::ConcatCols
                | OpKind::SliceRows { .. }
                | OpKind::SliceCols { .. }
                | OpKind::PadRows { .. }
                | OpKind::PadCols { .. }
                | OpKind::Reshape(_)
                | OpKind::GatherRow
                | OpKind::ScatterRow { .. }
                | OpKind::SoftmaxXent
                | OpKind::SoftmaxXentGrad
                | OpKind::GradAccum
                | OpKind::Densify(_)
                | OpKind::ArrayRead
                | OpKind::ArrayWrite
                | OpKind::ArrayGradRead
                | OpKind::ArrayGradWrite
        )
    }
}

/// Result type of a node, for the kinds where it follows from the inputs.
pub(crate) fn infer_type(kind: &OpKind, inputs: &[ValueType]) -> std::result::Result<ValueType, String> {
    let arity = |n: usize| {
        if inputs.len() != n {
            Err(format!("{} takes {n} input(s), got {}", kind.name(), inputs.len()))
        } else {
            Ok(())
        }
    };
    let tensor = |i: usize| match inputs[i] {
        ValueType::Tensor(s) => Ok(s),
        other => Err(format!("input {i} of {} must be a tensor, got {other}", kind.name())),
    };
    let index = |i: usize| -> std::result::Result<(), String> {
        let s = tensor(i)?;
        if s.unify(&ShapeSpec::fixed(1, 1)).is_none() {
            return Err(format!("index input {i} must be 1x1, got {s}"));
        }
        Ok(())
    };
    let mismatch = |a: ShapeSpec, b: ShapeSpec| format!("shape mismatch: {a} vs {b}");
    let add = |a: Option<usize>, b: Option<usize>| Some(a? + b?);
    match kind {
        OpKind::Placeholder { shape, .. } => {
            arity(0)?;
            Ok(ValueType::Tensor(*shape))
        }
        OpKind::Parameter { shape, .. } => {
            arity(0)?;
            Ok(ValueType::Tensor((*shape).into()))
        }
        OpKind::Constant(t) => {
            arity(0)?;
            Ok(ValueType::Tensor(t.shape().into()))
        }
        OpKind::Zero => {
            arity(0)?;
            Ok(ValueType::Tensor(ShapeSpec::ANY))
        }
        OpKind::FrameKey => {
            arity(0)?;
            Ok(ValueType::Key)
        }
        OpKind::ChildKey(_) => {
            if inputs.is_empty() || inputs.len() > 2 {
                return Err(format!("child_key takes 1 or 2 inputs, got {}", inputs.len()));
            }
            if inputs[0] != ValueType::Key {
                return Err("child_key expects a key".into());
            }
            Ok(ValueType::Key)
        }
        OpKind::MatMul { ta, tb } => {
            arity(2)?;
            let (a, b) = (tensor(0)?, tensor(1)?);
            let (m, k1) = if *ta { (a.cols, a.rows) } else { (a.rows, a.cols) };
            let (k2, n) = if *tb { (b.cols, b.rows) } else { (b.rows, b.cols) };
            if let (Some(x), Some(y)) = (k1, k2) {
                if x != y {
                    return Err(format!("matmul inner dimensions differ: {a} vs {b}"));
                }
            }
            Ok(ValueType::Tensor(ShapeSpec { rows: m, cols: n }))
        }
        OpKind::Unary(_) => {
            arity(1)?;
            Ok(ValueType::Tensor(tensor(0)?))
        }
        OpKind::UnaryGrad(_) | OpKind::Binary(_) => {
            arity(2)?;
            let (a, b) = (tensor(0)?, tensor(1)?);
            a.unify(&b).map(ValueType::Tensor).ok_or_else(|| mismatch(a, b))
        }
        OpKind::ConcatRows => {
            arity(2)?;
            let (a, b) = (tensor(0)?, tensor(1)?);
            let cols = ShapeSpec { rows: None, cols: a.cols }
                .unify(&ShapeSpec { rows: None, cols: b.cols })
                .ok_or_else(|| mismatch(a, b))?
                .cols;
            Ok(ValueType::Tensor(ShapeSpec {
                rows: add(a.rows, b.rows),
                cols,
            }))
        }
        OpKind::ConcatCols => {
            arity(2)?;
            let (a, b) = (tensor(0)?, tensor(1)?);
            let rows = ShapeSpec { rows: a.rows, cols: None }
                .unify(&ShapeSpec { rows: b.rows, cols: None })
                .ok_or_else(|| mismatch(a, b))?
                .rows;
            Ok(ValueType::Tensor(ShapeSpec {
                rows,
                cols: add(a.cols, b.cols),
            }))
        }
        OpKind::SliceRows { start, len } => {
            arity(1)?;
            let a = tensor(0)?;
            if *len == 0 || a.rows.is_some_and(|r| start + len > r) {
                return Err(format!("row slice {start}+{len} out of range for {a}"));
            }
            Ok(ValueType::Tensor(ShapeSpec {
                rows: Some(*len),
                cols: a.cols,
            }))
        }
        OpKind::SliceCols { start, len } => {
            arity(1)?;
            let a = tensor(0)?;
            if *len == 0 || a.cols.is_some_and(|c| start + len > c) {
                return Err(format!("column slice {start}+{len} out of range for {a}"));
            }
            Ok(ValueType::Tensor(ShapeSpec {
                rows: a.rows,
                cols: Some(*len),
            }))
        }
        OpKind::PadRows { start, total } => {
            arity(1)?;
            let a = tensor(0)?;
            if a.rows.is_some_and(|r| start + r > *total) {
                return Err(format!("cannot pad {a} at row {start} into {total} rows"));
            }
            Ok(ValueType::Tensor(ShapeSpec {
                rows: Some(*total),
                cols: a.cols,
            }))
        }
        OpKind::PadCols { start, total } => {
            arity(1)?;
            let a = tensor(0)?;
            if a.cols.is_some_and(|c| start + c > *total) {
                return Err(format!("cannot pad {a} at column {start} into {total} columns"));
            }
            Ok(ValueType::Tensor(ShapeSpec {
                rows: a.rows,
                cols: Some(*total),
            }))
        }
        OpKind::Reshape(s) => {
            arity(1)?;
            let a = tensor(0)?;
            if let Some(src) = a.as_shape() {
                if src.numel() != s.numel() {
                    return Err(format!("cannot reshape {src} to {s}"));
                }
            }
            Ok(ValueType::Tensor((*s).into()))
        }
        OpKind::GatherRow => {
            arity(2)?;
            let t = tensor(0)?;
            index(1)?;
            Ok(ValueType::Tensor(ShapeSpec {
                rows: Some(1),
                cols: t.cols,
            }))
        }
        OpKind::ScatterRow { rows } => {
            arity(2)?;
            let g = tensor(0)?;
            index(1)?;
            Ok(ValueType::Tensor(ShapeSpec {
                rows: Some(*rows),
                cols: g.cols,
            }))
        }
        OpKind::SoftmaxXent => {
            arity(2)?;
            let l = tensor(0)?;
            if l.rows.is_some_and(|r| r != 1) {
                return Err(format!("logits must be a single row, got {l}"));
            }
            index(1)?;
            Ok(ValueType::tensor(1, 1))
        }
        OpKind::SoftmaxXentGrad => {
            arity(3)?;
            index(2)?;
            Ok(ValueType::Tensor(tensor(1)?))
        }
        OpKind::GradAccum => {
            if inputs.is_empty() {
                return Err("grad_accum needs at least one input".into());
            }
            let mut acc = inputs[0];
            for t in &inputs[1..] {
                acc = match (acc, t) {
                    (ValueType::Tensor(a), ValueType::Tensor(b)) => {
                        ValueType::Tensor(a.unify(b).ok_or_else(|| mismatch(a, *b))?)
                    }
                    (ValueType::Unit, ValueType::Unit) => ValueType::Unit,
                    (a, b) => return Err(format!("cannot accumulate {a} with {b}")),
                };
            }
            Ok(acc)
        }
        OpKind::Densify(s) => {
            arity(1)?;
            Ok(ValueType::Tensor((*s).into()))
        }
        OpKind::ArrayNew { len, elem } => {
            arity(0)?;
            Ok(ValueType::Array {
                len: *len,
                elem: *elem,
            })
        }
        OpKind::ArrayWrite => {
            arity(3)?;
            let ValueType::Array { elem, .. } = inputs[0] else {
                return Err("array_write expects an array".into());
            };
            index(1)?;
            let v = tensor(2)?;
            if !v.unify(&elem.into()).is_some() {
                return Err(mismatch(v, elem.into()));
            }
            Ok(inputs[0])
        }
        OpKind::ArrayRead | OpKind::ArrayGradRead => {
            arity(if matches!(kind, OpKind::ArrayRead) { 2 } else { 3 })?;
            let ValueType::Array { elem, .. } = inputs[0] else {
                return Err(format!("{} expects an array", kind.name()));
            };
            index(1)?;
            Ok(ValueType::Tensor(elem.into()))
        }
        OpKind::ArrayGradWrite => {
            arity(3)?;
            index(1)?;
            Ok(ValueType::Unit)
        }
        OpKind::CacheWrite { .. } => {
            arity(1)?;
            Ok(ValueType::Unit)
        }
        OpKind::Input(_) | OpKind::Project(_) | OpKind::CacheRead { .. } => {
            Err(format!("{} needs an explicit type", kind.name()))
        }
        OpKind::Cond { .. } | OpKind::CondGrad { .. } | OpKind::Invoke(_) => {
            Err(format!("{} is typed by its signature", kind.name()))
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    kind: OpKind,
    inputs: Vec<NodeId>,
    ty: ValueType,
}

#[derive(Debug, Clone)]
struct Scope {
    nodes: Vec<Node>,
    parent: Option<u32>,
    owner: Option<SubGraphRef>,
}

#[derive(Debug, Clone)]
struct SubGraphDecl {
    name: String,
    signature: Signature,
    kind: SubGraphKind,
    declared_in: u32,
    body: Option<DefinedBody>,
}

#[derive(Debug, Clone)]
struct DefinedBody {
    scope: u32,
    outputs: Vec<NodeId>,
    captures: Vec<NodeId>,
}

/// Mutable graph under construction.
#[derive(Debug, Clone)]
pub struct GraphBuilder {
    scopes: Vec<Scope>,
    open: Vec<u32>,
    subgraphs: Vec<SubGraphDecl>,
    names: HashMap<String, SubGraphRef>,
    branch_counter: usize,
    finalized: bool,
}

impl Default for GraphBuilder {
    fn default() -> Self {
        Self::new()
    }
}

impl GraphBuilder {
    pub fn new() -> Self {
        GraphBuilder {
            scopes: vec![Scope {
                nodes: Vec::new(),
                parent: None,
                owner: None,
            }],
            open: vec![0],
            subgraphs: Vec::new(),
            names: HashMap::new(),
            branch_counter: 0,
            finalized: false,
        }
    }

    fn current(&self) -> u32 {
        *self.open.last().expect("scope stack never empty")
    }

    fn node(&self, id: NodeId) -> Result<&Node> {
        self.scopes
            .get(id.scope as usize)
            .and_then(|s| s.nodes.get(id.index as usize))
            .ok_or(BuildError::UnknownNode(id))
    }

    /// Static type of a node.
    pub fn value_type(&self, id: NodeId) -> Result<ValueType> {
        Ok(self.node(id)?.ty)
    }

    pub fn signature(&self, sub: SubGraphRef) -> &Signature {
        &self.subgraphs[sub.0 as usize].signature
    }

    /// Direct outer references recorded when the body was defined.
    pub fn captures(&self, sub: SubGraphRef) -> Option<&[NodeId]> {
        self.subgraphs[sub.0 as usize]
            .body
            .as_ref()
            .map(|b| b.captures.as_slice())
    }

    pub fn is_defined(&self, sub: SubGraphRef) -> bool {
        self.subgraphs[sub.0 as usize].body.is_some()
    }

    fn push(&mut self, kind: OpKind, inputs: Vec<NodeId>, ty: ValueType) -> NodeId {
        let scope = self.current();
        let nodes = &mut self.scopes[scope as usize].nodes;
        nodes.push(Node { kind, inputs, ty });
        NodeId {
            scope,
            index: (nodes.len() - 1) as u32,
        }
    }

    fn check_visible(&self, inputs: &[NodeId]) -> Result<Vec<ValueType>> {
        if self.finalized {
            return Err(BuildError::Finalized);
        }
        let scope = self.current();
        inputs
            .iter()
            .map(|id| {
                let n = self.node(*id)?;
                if !self.open.contains(&id.scope) {
                    return Err(BuildError::NotVisible { node: *id, scope });
                }
                Ok(n.ty)
            })
            .collect()
    }

    /// Append a node to the current scope, inferring its output type.
    pub fn add_node(&mut self, kind: OpKind, inputs: &[NodeId]) -> Result<NodeId> {
        let tys = self.check_visible(inputs)?;
        match &kind {
            OpKind::Placeholder { .. } | OpKind::Parameter { .. } if self.current() != 0 => {
                return Err(BuildError::Node {
                    node: kind.name(),
                    msg: "placeholders and parameters live in the top-level graph".into(),
                })
            }
            OpKind::Invoke(_) | OpKind::Cond { .. } => {
                return Err(BuildError::Node {
                    node: kind.name(),
                    msg: "use invoke()/cond() to add call sites".into(),
                })
            }
            OpKind::Input(_)
            | OpKind::Project(_)
            | OpKind::CacheRead { .. }
            | OpKind::CacheWrite { .. }
            | OpKind::CondGrad { .. } => {
                return Err(BuildError::Node {
                    node: kind.name(),
                    msg: "internal operation".into(),
                })
            }
            _ => {}
        }
        let ty = infer_type(&kind, &tys).map_err(|msg| BuildError::Node {
            node: format!("{}({})", kind.name(), fmt_ids(inputs)),
            msg,
        })?;
        Ok(self.push(kind, inputs.to_vec(), ty))
    }

    pub fn placeholder(&mut self, name: &str, shape: ShapeSpec) -> Result<NodeId> {
        self.add_node(
            OpKind::Placeholder {
                name: name.into(),
                shape,
            },
            &[],
        )
    }

    pub fn parameter(&mut self, name: &str, shape: Shape) -> Result<NodeId> {
        self.add_node(
            OpKind::Parameter {
                name: name.into(),
                shape,
            },
            &[],
        )
    }

    pub fn constant(&mut self, t: Tensor) -> Result<NodeId> {
        self.add_node(OpKind::Constant(Arc::new(t)), &[])
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.add_node(OpKind::MatMul { ta: false, tb: false }, &[a, b])
    }

    /// `a * b^T`.
    pub fn matmul_bt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.add_node(OpKind::MatMul { ta: false, tb: true }, &[a, b])
    }

    pub fn unary(&mut self, f: UnaryFn, x: NodeId) -> Result<NodeId> {
        self.add_node(OpKind::Unary(f), &[x])
    }

    pub fn tanh(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(UnaryFn::Tanh, x)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(UnaryFn::Sigmoid, x)
    }

    pub fn binary(&mut self, f: BinaryFn, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.add_node(OpKind::Binary(f), &[a, b])
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(BinaryFn::Add, a, b)
    }

    pub fn hadamard(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(BinaryFn::Hadamard, a, b)
    }

    pub fn concat_rows(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.add_node(OpKind::ConcatRows, &[a, b])
    }

    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.add_node(OpKind::ConcatCols, &[a, b])
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        self.add_node(OpKind::SliceCols { start, len }, &[x])
    }

    pub fn reshape(&mut self, x: NodeId, shape: Shape) -> Result<NodeId> {
        self.add_node(OpKind::Reshape(shape), &[x])
    }

    pub fn gather_row(&mut self, table: NodeId, index: NodeId) -> Result<NodeId> {
        self.add_node(OpKind::GatherRow, &[table, index])
    }

    pub fn softmax_xent(&mut self, logits: NodeId, label: NodeId) -> Result<NodeId> {
        self.add_node(OpKind::SoftmaxXent, &[logits, label])
    }

    /// Register a SubGraph signature without a body. The returned reference
    /// can be invoked immediately, including from inside its own body.
    pub fn declare_subgraph(&mut self, name: &str, signature: Signature) -> Result<SubGraphRef> {
        self.declare(name, signature, SubGraphKind::Function)
    }

    fn declare(&mut self, name: &str, signature: Signature, kind: SubGraphKind) -> Result<SubGraphRef> {
        if self.finalized {
            return Err(BuildError::Finalized);
        }
        if self.names.contains_key(name) {
            return Err(BuildError::DuplicateSubGraph(name.into()));
        }
        let r = SubGraphRef(self.subgraphs.len() as u32);
        self.subgraphs.push(SubGraphDecl {
            name: name.into(),
            signature,
            kind,
            declared_in: self.current(),
            body: None,
        });
        self.names.insert(name.into(), r);
        Ok(r)
    }

    pub fn lookup(&self, name: &str) -> Option<SubGraphRef> {
        self.names.get(name).copied()
    }

    /// Build the body of a declared SubGraph. The closure receives the body's
    /// input nodes and returns its outputs. Nodes of enclosing scopes used in
    /// the body are recorded as captures.
    pub fn define_subgraph<F>(&mut self, sub: SubGraphRef, body: F) -> Result<()>
    where
        F: FnOnce(&mut GraphBuilder, &[NodeId]) -> Result<Vec<NodeId>>,
    {
        if self.finalized {
            return Err(BuildError::Finalized);
        }
        let decl = &self.subgraphs[sub.0 as usize];
        if decl.body.is_some() {
            return Err(BuildError::AlreadyDefined(decl.name.clone()));
        }
        let signature = decl.signature.clone();
        let name = decl.name.clone();
        let parent = self.current();
        let scope = self.scopes.len() as u32;
        self.scopes.push(Scope {
            nodes: Vec::new(),
            parent: Some(parent),
            owner: Some(sub),
        });
        self.open.push(scope);
        let inputs: Vec<NodeId> = signature
            .inputs
            .iter()
            .enumerate()
            .map(|(k, ty)| self.push(OpKind::Input(k), Vec::new(), *ty))
            .collect();
        let result = body(self, &inputs);
        self.open.pop();
        let outputs = result?;
        if outputs.len() != signature.outputs.len() {
            return Err(BuildError::Signature {
                name,
                msg: format!(
                    "body returns {} output(s), signature declares {}",
                    outputs.len(),
                    signature.outputs.len()
                ),
            });
        }
        for (k, (out, want)) in outputs.iter().zip(&signature.outputs).enumerate() {
            let got = self.node(*out)?.ty;
            if !got.compatible(want) {
                return Err(BuildError::Signature {
                    name,
                    msg: format!("output {k} has type {got}, signature declares {want}"),
                });
            }
            if out.scope != scope && !self.open.contains(&out.scope) {
                return Err(BuildError::NotVisible {
                    node: *out,
                    scope,
                });
            }
        }
        let mut captures: Vec<NodeId> = Vec::new();
        let note = |id: NodeId, caps: &mut Vec<NodeId>| {
            if id.scope != scope && !caps.contains(&id) {
                caps.push(id);
            }
        };
        for n in &self.scopes[scope as usize].nodes {
            for i in &n.inputs {
                note(*i, &mut captures);
            }
        }
        for o in &outputs {
            note(*o, &mut captures);
        }
        self.subgraphs[sub.0 as usize].body = Some(DefinedBody {
            scope,
            outputs,
            captures,
        });
        Ok(())
    }

    fn check_args(&self, sub: SubGraphRef, args: &[NodeId]) -> Result<()> {
        let decl = &self.subgraphs[sub.0 as usize];
        let sig = &decl.signature;
        if args.len() != sig.inputs.len() {
            return Err(BuildError::Arity {
                what: format!("invocation of `{}`", decl.name),
                expected: sig.inputs.len(),
                got: args.len(),
            });
        }
        for (k, (a, want)) in args.iter().zip(&sig.inputs).enumerate() {
            let got = self.node(*a)?.ty;
            if !got.compatible(want) {
                return Err(BuildError::Signature {
                    name: decl.name.clone(),
                    msg: format!("argument {k} has type {got}, expected {want}"),
                });
            }
        }
        Ok(())
    }

    fn projections(&mut self, call: NodeId, outputs: &[ValueType]) -> Vec<NodeId> {
        outputs
            .iter()
            .enumerate()
            .map(|(k, ty)| self.push(OpKind::Project(k), vec![call], *ty))
            .collect()
    }

    /// Add a call site; returns one handle per signature output.
    pub fn invoke(&mut self, sub: SubGraphRef, args: &[NodeId]) -> Result<Vec<NodeId>> {
        self.check_visible(args)?;
        self.check_args(sub, args)?;
        let outs = self.subgraphs[sub.0 as usize].signature.outputs.clone();
        let call = self.push(OpKind::Invoke(sub), args.to_vec(), ValueType::Tuple(outs.len()));
        Ok(self.projections(call, &outs))
    }

    /// Lazy conditional: only the SubGraph selected by `predicate` (nonzero =
    /// then) runs.
    pub fn cond(
        &mut self,
        predicate: NodeId,
        then_branch: SubGraphRef,
        else_branch: SubGraphRef,
        args: &[NodeId],
    ) -> Result<Vec<NodeId>> {
        let mut all = vec![predicate];
        all.extend_from_slice(args);
        let tys = self.check_visible(&all)?;
        if !tys[0].compatible(&ValueType::tensor(1, 1)) {
            return Err(BuildError::Node {
                node: format!("cond({predicate})"),
                msg: format!("predicate must be 1x1, got {}", tys[0]),
            });
        }
        let (ts, es) = (
            &self.subgraphs[then_branch.0 as usize],
            &self.subgraphs[else_branch.0 as usize],
        );
        if ts.signature != es.signature {
            return Err(BuildError::Signature {
                name: format!("{} / {}", ts.name, es.name),
                msg: "conditional branches must share one signature".into(),
            });
        }
        self.check_args(then_branch, args)?;
        let outs = ts.signature.outputs.clone();
        let call = self.push(
            OpKind::Cond {
                then_branch,
                else_branch,
                nargs: args.len(),
                record: false,
            },
            all,
            ValueType::Tuple(outs.len()),
        );
        Ok(self.projections(call, &outs))
    }

    /// Declare, define and select between two anonymous branch SubGraphs.
    pub fn cond_with<T, E>(
        &mut self,
        predicate: NodeId,
        args: &[NodeId],
        outputs: Vec<ValueType>,
        then_body: T,
        else_body: E,
    ) -> Result<Vec<NodeId>>
    where
        T: FnOnce(&mut GraphBuilder, &[NodeId]) -> Result<Vec<NodeId>>,
        E: FnOnce(&mut GraphBuilder, &[NodeId]) -> Result<Vec<NodeId>>,
    {
        let inputs = args
            .iter()
            .map(|a| self.value_type(*a))
            .collect::<Result<Vec<_>>>()?;
        let sig = Signature::new(inputs, outputs);
        let base = self.branch_name();
        let t = self.declare(&format!("{base}/then"), sig.clone(), SubGraphKind::Branch)?;
        let e = self.declare(&format!("{base}/else"), sig, SubGraphKind::Branch)?;
        self.define_subgraph(t, then_body)?;
        self.define_subgraph(e, else_body)?;
        self.cond(predicate, t, e, args)
    }

    fn branch_name(&mut self) -> String {
        let owner = self.scopes[self.current() as usize]
            .owner
            .map_or("main".to_string(), |s| self.subgraphs[s.0 as usize].name.clone());
        self.branch_counter += 1;
        format!("{owner}/if{}", self.branch_counter)
    }

    pub fn array_new(&mut self, len: usize, elem: Shape) -> Result<NodeId> {
        self.add_node(OpKind::ArrayNew { len, elem }, &[])
    }

    pub fn array_write(&mut self, array: NodeId, index: NodeId, value: NodeId) -> Result<NodeId> {
        self.add_node(OpKind::ArrayWrite, &[array, index, value])
    }

    pub fn array_read(&mut self, array: NodeId, index: NodeId) -> Result<NodeId> {
        self.add_node(OpKind::ArrayRead, &[array, index])
    }

    /// Resolve captures, wire them into call sites, and freeze the graph.
    pub fn finalize(&mut self) -> Result<FinalizedGraph> {
        if self.finalized {
            return Err(BuildError::Finalized);
        }
        let undefined: Vec<&str> = self
            .subgraphs
            .iter()
            .filter(|s| s.body.is_none())
            .map(|s| s.name.as_str())
            .collect();
        if !undefined.is_empty() {
            return Err(BuildError::Undefined(undefined.join(", ")));
        }
        let caps = self.capture_closure()?;
        let nsub = self.subgraphs.len();
        let mut bodies = Vec::with_capacity(self.scopes.len());
        for (sid, scope) in self.scopes.iter().enumerate() {
            let sid = sid as u32;
            let own_caps: &[NodeId] = scope.owner.map_or(&[], |o| &caps[o.0 as usize]);
            let base = scope.nodes.len() as u32;
            let wire = |id: NodeId, name: &str| -> Result<u32> {
                if id.scope == sid {
                    return Ok(id.index);
                }
                own_caps
                    .iter()
                    .position(|c| *c == id)
                    .map(|p| base + p as u32)
                    .ok_or_else(|| BuildError::CaptureOutOfScope {
                        node: id,
                        name: name.to_string(),
                    })
            };
            let mut nodes = Vec::with_capacity(scope.nodes.len() + own_caps.len());
            for n in &scope.nodes {
                let mut inputs = n
                    .inputs
                    .iter()
                    .map(|i| wire(*i, "<body>"))
                    .collect::<Result<Vec<_>>>()?;
                match &n.kind {
                    OpKind::Invoke(t) => {
                        for c in &caps[t.0 as usize] {
                            inputs.push(wire(*c, &self.subgraphs[t.0 as usize].name)?);
                        }
                    }
                    OpKind::Cond {
                        then_branch,
                        else_branch,
                        ..
                    } => {
                        for t in [then_branch, else_branch] {
                            for c in &caps[t.0 as usize] {
                                inputs.push(wire(*c, &self.subgraphs[t.0 as usize].name)?);
                            }
                        }
                    }
                    _ => {}
                }
                nodes.push(FNode {
                    kind: n.kind.clone(),
                    inputs,
                    ty: n.ty,
                });
            }
            let (mut inputs, outputs) = match scope.owner {
                Some(o) => {
                    let decl = &self.subgraphs[o.0 as usize];
                    let body = decl.body.as_ref().expect("checked defined");
                    let nsig = decl.signature.inputs.len();
                    let outs = body
                        .outputs
                        .iter()
                        .map(|id| wire(*id, &decl.name))
                        .collect::<Result<Vec<_>>>()?;
                    ((0..nsig as u32).collect::<Vec<_>>(), outs)
                }
                None => (Vec::new(), Vec::new()),
            };
            let nsig = inputs.len();
            for (k, c) in own_caps.iter().enumerate() {
                inputs.push(nodes.len() as u32);
                nodes.push(FNode {
                    kind: OpKind::Input(nsig + k),
                    inputs: Vec::new(),
                    ty: self.node(*c)?.ty,
                });
            }
            let mut body = Body {
                nodes,
                inputs,
                outputs,
                dependents: Vec::new(),
                indegree: Vec::new(),
            };
            body.reindex(sid)?;
            bodies.push(body);
        }
        let subgraphs = (0..nsub)
            .map(|i| {
                let d = &self.subgraphs[i];
                let b = d.body.as_ref().expect("checked defined");
                SubGraphInfo {
                    name: d.name.clone(),
                    kind: d.kind,
                    signature: d.signature.clone(),
                    captures: caps[i].clone(),
                    body: b.scope,
                    parent_scope: self.scopes[b.scope as usize].parent.unwrap_or(0),
                    declared_in: d.declared_in,
                }
            })
            .collect();
        self.finalized = true;
        Ok(FinalizedGraph {
            bodies,
            subgraphs,
            differentiated: false,
        })
    }

    /// Captures of every SubGraph, closed over the captures of the SubGraphs
    /// it calls.
    fn capture_closure(&self) -> Result<Vec<Vec<NodeId>>> {
        let mut caps: Vec<Vec<NodeId>> = self
            .subgraphs
            .iter()
            .map(|s| s.body.as_ref().map(|b| b.captures.clone()).unwrap_or_default())
            .collect();
        let callees = |n: &Node| -> Vec<SubGraphRef> {
            match &n.kind {
                OpKind::Invoke(t) => vec![*t],
                OpKind::Cond {
                    then_branch,
                    else_branch,
                    ..
                } => vec![*then_branch, *else_branch],
                _ => Vec::new(),
            }
        };
        loop {
            let mut changed = false;
            for s in 0..self.subgraphs.len() {
                let scope = self.subgraphs[s].body.as_ref().expect("defined").scope;
                for n in &self.scopes[scope as usize].nodes {
                    for t in callees(n) {
                        let inherited = caps[t.0 as usize].clone();
                        for c in inherited {
                            if c.scope != scope && !caps[s].contains(&c) {
                                caps[s].push(c);
                                changed = true;
                            }
                        }
                    }
                }
            }
            if !changed {
                break;
            }
        }
        // a captured node must live in a strict ancestor of the body scope
        for (s, list) in caps.iter().enumerate() {
            let scope = self.subgraphs[s].body.as_ref().expect("defined").scope;
            for c in list {
                if !self.is_ancestor(c.scope, scope) {
                    return Err(BuildError::CaptureOutOfScope {
                        node: *c,
                        name: self.subgraphs[s].name.clone(),
                    });
                }
            }
        }
        Ok(caps)
    }

    fn is_ancestor(&self, anc: u32, mut scope: u32) -> bool {
        while let Some(p) = self.scopes[scope as usize].parent {
            if p == anc {
                return true;
            }
            scope = p;
        }
        false
    }
}

fn fmt_ids(ids: &[NodeId]) -> String {
    ids.iter().map(|i| i.to_string()).collect::<Vec<_>>().join(", ")
}

/// A node of a finalized body; inputs are local indices.
#[derive(Debug, Clone)]
pub struct FNode {
    pub kind: OpKind,
    pub inputs: Vec<u32>,
    pub ty: ValueType,
}

/// One executable scope: the top-level graph or a SubGraph body.
#[derive(Debug, Clone)]
pub struct Body {
    pub nodes: Vec<FNode>,
    /// Local index of each input slot.
    pub inputs: Vec<u32>,
    pub outputs: Vec<u32>,
    pub dependents: Vec<Vec<u32>>,
    pub indegree: Vec<u32>,
}

impl Body {
    /// Recompute dependents and in-degrees, and check the body is acyclic.
    pub(crate) fn reindex(&mut self, scope: u32) -> Result<()> {
        let n = self.nodes.len();
        let mut dependents = vec![Vec::new(); n];
        let mut indegree = vec![0u32; n];
        for (i, node) in self.nodes.iter().enumerate() {
            indegree[i] = node.inputs.len() as u32;
            for &inp in &node.inputs {
                if inp as usize >= n {
                    return Err(BuildError::UnknownNode(NodeId { scope, index: inp }));
                }
                dependents[inp as usize].push(i as u32);
            }
        }
        let mut deg = indegree.clone();
        let mut stack: Vec<u32> = (0..n as u32).filter(|&i| deg[i as usize] == 0).collect();
        let mut seen = 0;
        while let Some(i) = stack.pop() {
            seen += 1;
            for &d in &dependents[i as usize] {
                deg[d as usize] -= 1;
                if deg[d as usize] == 0 {
                    stack.push(d);
                }
            }
        }
        if seen != n {
            let nodes = (0..n as u32).filter(|&i| deg[i as usize] > 0).collect();
            return Err(BuildError::Cycle { scope, nodes });
        }
        self.dependents = dependents;
        self.indegree = indegree;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct SubGraphInfo {
    pub name: String,
    pub kind: SubGraphKind,
    pub signature: Signature,
    /// Outer nodes appended to the body inputs, in slot order.
    pub captures: Vec<NodeId>,
    /// Scope (and body index) of the definition.
    pub body: u32,
    pub parent_scope: u32,
    pub declared_in: u32,
}

/// Immutable, executable graph. Body `0` is the top-level graph; SubGraph
/// bodies are indexed by their scope id.
#[derive(Debug, Clone)]
pub struct FinalizedGraph {
    pub(crate) bodies: Vec<Body>,
    pub(crate) subgraphs: Vec<SubGraphInfo>,
    pub(crate) differentiated: bool,
}

impl FinalizedGraph {
    pub fn top(&self) -> &Body {
        &self.bodies[0]
    }

    pub fn body(&self, scope: u32) -> &Body {
        &self.bodies[scope as usize]
    }

    pub fn num_bodies(&self) -> usize {
        self.bodies.len()
    }

    pub fn subgraph(&self, r: SubGraphRef) -> &SubGraphInfo {
        &self.subgraphs[r.0 as usize]
    }

    pub fn subgraphs(&self) -> impl Iterator<Item = (SubGraphRef, &SubGraphInfo)> {
        self.subgraphs
            .iter()
            .enumerate()
            .map(|(i, s)| (SubGraphRef(i as u32), s))
    }

    pub fn lookup(&self, name: &str) -> Option<SubGraphRef> {
        self.subgraphs().find(|(_, s)| s.name == name).map(|(r, _)| r)
    }

    /// Named user SubGraphs (excluding conditional arms and gradients).
    pub fn functions(&self) -> Vec<SubGraphRef> {
        self.subgraphs()
            .filter(|(_, s)| s.kind == SubGraphKind::Function)
            .map(|(r, _)| r)
            .collect()
    }

    pub fn is_differentiated(&self) -> bool {
        self.differentiated
    }

    pub fn node(&self, id: NodeId) -> Option<&FNode> {
        self.bodies.get(id.scope as usize)?.nodes.get(id.index as usize)
    }

    /// Scopes lexically nested in `scope` (including itself).
    pub fn nested_scopes(&self, scope: u32) -> Vec<u32> {
        let mut out = vec![scope];
        let mut i = 0;
        while i < out.len() {
            let s = out[i];
            for info in &self.subgraphs {
                if info.parent_scope == s && info.body != s && !out.contains(&info.body) {
                    out.push(info.body);
                }
            }
            i += 1;
        }
        out
    }

    /// Invoke nodes targeting `target`, anywhere in `sub`'s body or the
    /// bodies nested in it.
    pub fn invoke_sites(&self, sub: SubGraphRef, target: SubGraphRef) -> usize {
        self.nested_scopes(self.subgraph(sub).body)
            .into_iter()
            .map(|s| {
                self.bodies[s as usize]
                    .nodes
                    .iter()
                    .filter(|n| n.kind == OpKind::Invoke(target))
                    .count()
            })
            .sum()
    }

    /// Top-level parameter nodes in index order, with their names.
    pub fn parameters(&self) -> Vec<(String, NodeId)> {
        self.top()
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| match &n.kind {
                OpKind::Parameter { name, .. } => Some((name.clone(), NodeId::top(i as u32))),
                _ => None,
            })
            .collect()
    }

    /// Rewrite operation kinds in place; a hook for instrumentation and
    /// fault-injection fixtures.
    pub fn rewrite_ops(&mut self, mut f: impl FnMut(&OpKind) -> Option<OpKind>) {
        for body in &mut self.bodies {
            for n in &mut body.nodes {
                if let Some(k) = f(&n.kind) {
                    n.kind = k;
                }
            }
        }
    }

    fn dump_body(&self, f: &mut fmt::Formatter<'_>, scope: u32, indent: usize) -> fmt::Result {
        let pad = "  ".repeat(indent);
        let body = &self.bodies[scope as usize];
        for (i, n) in body.nodes.iter().enumerate() {
            let ins = n
                .inputs
                .iter()
                .map(|x| format!("%{x}"))
                .collect::<Vec<_>>()
                .join(", ");
            writeln!(f, "{pad}%{i}: {}({ins}) -> {}", n.kind.name(), n.ty)?;
        }
        if !body.outputs.is_empty() {
            let outs = body
                .outputs
                .iter()
                .map(|x| format!("%{x}"))
                .collect::<Vec<_>>()
                .join(", ");
            writeln!(f, "{pad}return {outs}")?;
        }
        for (r, info) in self.subgraphs() {
            if info.parent_scope == scope {
                let kind = match info.kind {
                    SubGraphKind::Function => "function",
                    SubGraphKind::Branch => "branch",
                    SubGraphKind::Gradient => "gradient",
                };
                let tys = |v: &[ValueType]| v.iter().map(|t| t.to_string()).collect::<Vec<_>>().join(", ");
                let caps = info
                    .captures
                    .iter()
                    .map(|c| c.to_string())
                    .collect::<Vec<_>>()
                    .join(", ");
                writeln!(
                    f,
                    "{pad}subgraph #{} {} ({kind}) ({}) -> ({}) captures [{caps}]",
                    r.0,
                    info.name,
                    tys(&info.signature.inputs),
                    tys(&info.signature.outputs)
                )?;
                self.dump_body(f, info.body, indent + 1)?;
            }
        }
        Ok(())
    }
}

impl fmt::Display for FinalizedGraph {
    /// Deterministic listing, one node per line, SubGraph bodies indented
    /// under their definition site.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "graph")?;
        self.dump_body(f, 0, 1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(r: usize, c: usize) -> Shape {
        Shape::new(r, c)
    }

    #[test]
    fn matmul_shape_inference() {
        let mut g = GraphBuilder::new();
        let a = g.placeholder("a", s(2, 3).into()).unwrap();
        let b = g.placeholder("b", s(3, 4).into()).unwrap();
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value_type(c).unwrap(), ValueType::tensor(2, 4));
        assert!(g.add(a, b).is_err());
        let p = g.placeholder("p", ShapeSpec::fixed(1, 1)).unwrap();
        let fg = g.finalize().unwrap();
        assert_eq!(fg.node(p).unwrap().ty, ValueType::tensor(1, 1));
    }

    #[test]
    fn declare_twice_fails() {
        let mut g = GraphBuilder::new();
        let sig = Signature::tensors(&[s(1, 1)], &[s(1, 1)]);
        g.declare_subgraph("f", sig.clone()).unwrap();
        assert!(matches!(
            g.declare_subgraph("f", sig),
            Err(BuildError::DuplicateSubGraph(_))
        ));
    }

    #[test]
    fn undefined_subgraph_fails_finalize() {
        let mut g = GraphBuilder::new();
        let f = g
            .declare_subgraph("f", Signature::tensors(&[s(1, 1)], &[s(1, 1)]))
            .unwrap();
        let x = g.placeholder("x", s(1, 1).into()).unwrap();
        g.invoke(f, &[x]).unwrap();
        let err = g.finalize().unwrap_err();
        assert!(err.to_string().contains("undefined body"), "{err}");
    }

    #[test]
    fn invoke_arity_checked() {
        let mut g = GraphBuilder::new();
        let f = g
            .declare_subgraph("f", Signature::tensors(&[s(1, 1)], &[s(1, 1)]))
            .unwrap();
        let x = g.placeholder("x", s(1, 1).into()).unwrap();
        assert!(matches!(g.invoke(f, &[x, x]), Err(BuildError::Arity { .. })));
    }

    #[test]
    fn outer_parameter_is_captured() {
        let mut g = GraphBuilder::new();
        let w = g.parameter("W", s(2, 2)).unwrap();
        let f = g
            .declare_subgraph("f", Signature::tensors(&[s(1, 2)], &[s(1, 2)]))
            .unwrap();
        g.define_subgraph(f, |b, ins| Ok(vec![b.matmul(ins[0], w)?]))
            .unwrap();
        assert_eq!(g.captures(f).unwrap(), &[w]);
        let pure = g
            .declare_subgraph("pure", Signature::tensors(&[s(1, 2)], &[s(1, 2)]))
            .unwrap();
        g.define_subgraph(pure, |b, ins| Ok(vec![b.tanh(ins[0])?]))
            .unwrap();
        assert!(g.captures(pure).unwrap().is_empty());
        let x = g.placeholder("x", s(1, 2).into()).unwrap();
        let y = g.invoke(f, &[x]).unwrap();
        g.invoke(pure, &y).unwrap();
        let fg = g.finalize().unwrap();
        let body = fg.body(fg.subgraph(f).body);
        assert_eq!(body.inputs.len(), 2);
        // no body node refers outside the body after finalize
        for n in &body.nodes {
            assert!(n.inputs.iter().all(|&i| (i as usize) < body.nodes.len()));
        }
        let call = fg.top().nodes.iter().find(|n| n.kind == OpKind::Invoke(f)).unwrap();
        assert_eq!(call.inputs, vec![x.index, w.index]);
    }

    #[test]
    fn output_shape_mismatch_is_rejected() {
        let mut g = GraphBuilder::new();
        let f = g
            .declare_subgraph("f", Signature::tensors(&[s(1, 2)], &[s(1, 3)]))
            .unwrap();
        let err = g.define_subgraph(f, |b, ins| Ok(vec![b.tanh(ins[0])?])).unwrap_err();
        assert!(matches!(err, BuildError::Signature { .. }));
    }

    #[test]
    fn cond_branch_signatures_must_match() {
        let mut g = GraphBuilder::new();
        let a = g
            .declare_subgraph("a", Signature::tensors(&[s(1, 1)], &[s(1, 1)]))
            .unwrap();
        let b = g
            .declare_subgraph("b", Signature::tensors(&[s(1, 1)], &[s(1, 1), s(1, 1)]))
            .unwrap();
        let p = g.placeholder("p", s(1, 1).into()).unwrap();
        assert!(g.cond(p, a, b, &[p]).is_err());
    }

    #[test]
    fn self_recursion_builds_with_forward_declaration() {
        let mut g = GraphBuilder::new();
        let f = g
            .declare_subgraph("down", Signature::tensors(&[s(1, 1)], &[s(1, 1)]))
            .unwrap();
        g.define_subgraph(f, |b, ins| {
            let x = ins[0];
            let out = b.cond_with(
                x,
                &[x],
                vec![ValueType::tensor(1, 1)],
                |b, ins| {
                    let one = b.constant(Tensor::scalar(1.0))?;
                    let y = b.binary(BinaryFn::Sub, ins[0], one)?;
                    b.invoke(f, &[y])
                },
                |_, ins| Ok(vec![ins[0]]),
            )?;
            Ok(out)
        })
        .unwrap();
        let x = g.placeholder("x", s(1, 1).into()).unwrap();
        g.invoke(f, &[x]).unwrap();
        let fg = g.finalize().unwrap();
        assert_eq!(fg.functions(), vec![f]);
        assert_eq!(fg.invoke_sites(f, f), 1);
    }

    #[test]
    fn finalize_twice_is_an_error() {
        let mut g = GraphBuilder::new();
        g.placeholder("x", s(1, 1).into()).unwrap();
        g.finalize().unwrap();
        assert_eq!(g.finalize().unwrap_err(), BuildError::Finalized);
    }

    #[test]
    fn body_cannot_reference_closed_sibling_scope() {
        let mut g = GraphBuilder::new();
        let sig = Signature::tensors(&[s(1, 1)], &[s(1, 1)]);
        let a = g.declare_subgraph("a", sig.clone()).unwrap();
        let b = g.declare_subgraph("b", sig).unwrap();
        let mut leaked = None;
        g.define_subgraph(a, |g, ins| {
            let t = g.tanh(ins[0])?;
            leaked = Some(t);
            Ok(vec![t])
        })
        .unwrap();
        let t = leaked.unwrap();
        let err = g.define_subgraph(b, |g, _| Ok(vec![g.tanh(t)?])).unwrap_err();
        assert!(matches!(err, BuildError::NotVisible { .. }));
    }
}
