//! Runtime values flowing along graph edges.

use std::borrow::Cow;
use std::fmt;
use std::sync::{Arc, Mutex, OnceLock};

use crate::tensor::{Shape, Tensor, TensorError};

/// Path of Invoke/Cond node indices from the root frame, e.g. `/5/3/7`.
#[derive(Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct InvocationKey(Arc<[u32]>);

impl InvocationKey {
    pub fn root() -> Self {
        InvocationKey(Arc::from(Vec::new()))
    }

    pub fn child(&self, node: u32) -> Self {
        let mut v = Vec::with_capacity(self.0.len() + 1);
        v.extend_from_slice(&self.0);
        v.push(node);
        InvocationKey(v.into())
    }

    pub fn path(&self) -> &[u32] {
        &self.0
    }

    pub fn depth(&self) -> usize {
        self.0.len()
    }
}

impl fmt::Display for InvocationKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.0.is_empty() {
            return write!(f, "/");
        }
        for p in self.0.iter() {
            write!(f, "/{p}")?;
        }
        Ok(())
    }
}

impl fmt::Debug for InvocationKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self}")
    }
}

/// Row-sparse gradient of a table: an ordered list of (row, values)
/// contributions, concatenated in O(1).
#[derive(Debug)]
pub enum RowList {
    Row { index: usize, values: Arc<Tensor> },
    Cat(Arc<RowList>, Arc<RowList>),
}

impl RowList {
    /// Contributions in order.
    pub fn for_each(self: &Arc<Self>, mut f: impl FnMut(usize, &Tensor)) {
        let mut stack: Vec<&Arc<RowList>> = vec![self];
        while let Some(node) = stack.pop() {
            match node.as_ref() {
                RowList::Row { index, values } => f(*index, values),
                RowList::Cat(a, b) => {
                    stack.push(b);
                    stack.push(a);
                }
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct RowSparse {
    pub shape: Shape,
    pub rows: Arc<RowList>,
}

impl RowSparse {
    pub fn to_dense(&self) -> Tensor {
        let mut out = Tensor::zeros(self.shape.rows, self.shape.cols);
        self.add_into(&mut out);
        out
    }

    pub fn add_into(&self, out: &mut Tensor) {
        let cols = self.shape.cols;
        self.rows.for_each(|i, v| {
            let dst = &mut out.data_mut()[i * cols..(i + 1) * cols];
            for (d, s) in dst.iter_mut().zip(v.data()) {
                *d += s;
            }
        });
    }
}

/// Write-once table of per-position states, with a gradient slot per
/// position.
#[derive(Debug)]
pub struct StateArray {
    pub elem: Shape,
    slots: Vec<OnceLock<Arc<Tensor>>>,
    grads: Vec<Mutex<Option<Tensor>>>,
}

impl StateArray {
    pub fn new(len: usize, elem: Shape) -> Self {
        StateArray {
            elem,
            slots: (0..len).map(|_| OnceLock::new()).collect(),
            grads: (0..len).map(|_| Mutex::new(None)).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    fn check(&self, i: i64) -> Result<usize, String> {
        if i < 0 || i as usize >= self.slots.len() {
            return Err(format!("array index {i} out of range for length {}", self.slots.len()));
        }
        Ok(i as usize)
    }

    pub fn write(&self, i: i64, v: Arc<Tensor>) -> Result<(), String> {
        let i = self.check(i)?;
        if v.shape() != self.elem {
            return Err(format!("array element must be {}, got {}", self.elem, v.shape()));
        }
        self.slots[i]
            .set(v)
            .map_err(|_| format!("array slot {i} written twice"))
    }

    pub fn read(&self, i: i64) -> Result<Arc<Tensor>, String> {
        let i = self.check(i)?;
        self.slots[i]
            .get()
            .cloned()
            .ok_or_else(|| format!("array slot {i} read before it was written"))
    }

    pub fn add_grad(&self, i: i64, g: &Tensor) -> Result<(), String> {
        let i = self.check(i)?;
        let mut slot = self.grads[i].lock().expect("grad slot poisoned");
        match slot.as_mut() {
            Some(acc) => acc.add_assign(g).map_err(|e| e.to_string()),
            None => {
                *slot = Some(g.clone());
                Ok(())
            }
        }
    }

    pub fn take_grad(&self, i: i64) -> Result<Option<Tensor>, String> {
        let i = self.check(i)?;
        Ok(self.grads[i].lock().expect("grad slot poisoned").take())
    }
}

#[derive(Debug, Clone)]
pub enum Value {
    Tensor(Arc<Tensor>),
    Rows(RowSparse),
    /// Additive identity of any shape.
    Zero,
    Tuple(Arc<[Value]>),
    Key(InvocationKey),
    Unit,
    Array(Arc<StateArray>),
}

impl From<Tensor> for Value {
    fn from(t: Tensor) -> Self {
        Value::Tensor(Arc::new(t))
    }
}

impl Value {
    pub fn kind(&self) -> &'static str {
        match self {
            Value::Tensor(_) => "tensor",
            Value::Rows(_) => "rows",
            Value::Zero => "zero",
            Value::Tuple(_) => "tuple",
            Value::Key(_) => "key",
            Value::Unit => "unit",
            Value::Array(_) => "array",
        }
    }

    /// Dense view; `Zero` is rejected since it has no shape.
    pub fn dense(&self) -> Result<Cow<'_, Tensor>, String> {
        match self {
            Value::Tensor(t) => Ok(Cow::Borrowed(t.as_ref())),
            Value::Rows(r) => Ok(Cow::Owned(r.to_dense())),
            other => Err(format!("expected a tensor, got {}", other.kind())),
        }
    }

    /// Dense tensor of the given shape; `Zero` becomes zeros.
    pub fn densify(&self, shape: Shape) -> Result<Tensor, String> {
        let t = match self {
            Value::Zero => Tensor::zeros(shape.rows, shape.cols),
            other => other.dense()?.into_owned(),
        };
        if t.shape() != shape {
            return Err(format!("expected {shape}, got {}", t.shape()));
        }
        Ok(t)
    }

    pub fn as_tensor(&self) -> Option<&Arc<Tensor>> {
        match self {
            Value::Tensor(t) => Some(t),
            _ => None,
        }
    }

    pub fn is_zero(&self) -> bool {
        matches!(self, Value::Zero)
    }

    pub fn project(&self, k: usize) -> Result<Value, String> {
        match self {
            Value::Tuple(items) => items
                .get(k)
                .cloned()
                .ok_or_else(|| format!("projection {k} of a {}-tuple", items.len())),
            other => Err(format!("cannot project from {}", other.kind())),
        }
    }
}

fn shape_err(e: TensorError) -> String {
    e.to_string()
}

/// Sum of two gradient contributions.
pub fn add_values(a: &Value, b: &Value) -> Result<Value, String> {
    use Value::*;
    match (a, b) {
        (Zero, x) | (x, Zero) => Ok(x.clone()),
        (Unit, Unit) => Ok(Unit),
        (Tensor(x), Tensor(y)) => {
            let mut out = x.as_ref().clone();
            out.add_assign(y).map_err(shape_err)?;
            Ok(out.into())
        }
        (Rows(x), Rows(y)) => {
            if x.shape != y.shape {
                return Err(format!("cannot add rows of {} and {}", x.shape, y.shape));
            }
            Ok(Rows(RowSparse {
                shape: x.shape,
                rows: Arc::new(RowList::Cat(x.rows.clone(), y.rows.clone())),
            }))
        }
        (Tensor(t), Rows(r)) | (Rows(r), Tensor(t)) => {
            if t.shape() != r.shape {
                return Err(format!("cannot add {} and rows of {}", t.shape(), r.shape));
            }
            let mut out = t.as_ref().clone();
            r.add_into(&mut out);
            Ok(out.into())
        }
        (x, y) => Err(format!("cannot add {} and {}", x.kind(), y.kind())),
    }
}
