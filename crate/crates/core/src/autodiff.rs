//! Reverse-mode automatic differentiation over finalized graphs, including
//! recursive SubGraphs.
//!
//! Every SubGraph `T` that can carry a gradient gets a gradient SubGraph
//! `T/grad`. Its inputs are one upstream gradient per output of `T` plus the
//! invocation key of the forward frame; its outputs are the gradients of
//! `T`'s input slots (arguments, then captures). Forward values the
//! gradient body needs are stored by `CacheWrite` nodes in the forward body
//! and taken back by `CacheRead` nodes keyed by that invocation key.
//!
//! A gradient body calls the gradient of every Invoke/Cond in its forward
//! body, even when the upstream gradient is zero, so each cache entry is
//! consumed exactly once.

use std::collections::HashMap;

use crate::graph::{
    infer_type, Body, BuildError, FNode, FinalizedGraph, NodeId, OpKind, Result, ShapeSpec, Signature,
    SubGraphInfo, SubGraphKind, SubGraphRef, ValueType,
};
use crate::tensor::{BinaryFn, Shape, Tensor, UnaryFn};

/// A differentiated graph and the handles of its gradient outputs.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub graph: FinalizedGraph,
    pub loss: NodeId,
    /// Gradient node per requested parameter, in request order.
    pub params: Vec<(String, NodeId)>,
}

impl Gradients {
    pub fn grad_of(&self, name: &str) -> Option<NodeId> {
        self.params.iter().find(|(n, _)| n == name).map(|(_, id)| *id)
    }

    /// Gradient SubGraph synthesized for `forward`.
    pub fn gradient_of(&self, forward: SubGraphRef) -> Option<SubGraphRef> {
        let name = format!("{}/grad", self.graph.subgraph(forward).name);
        self.graph.lookup(&name)
    }
}

fn err(msg: impl Into<String>) -> BuildError {
    BuildError::Autodiff(msg.into())
}

fn grad_type(t: ValueType) -> ValueType {
    match t {
        ValueType::Tensor(s) => ValueType::Tensor(s),
        ValueType::Array { .. } | ValueType::Unit => ValueType::Unit,
        _ => ValueType::Tensor(ShapeSpec::ANY),
    }
}

fn topo_order(body: &Body, n: usize) -> Vec<u32> {
    let mut deg: Vec<u32> = body.nodes[..n].iter().map(|x| x.inputs.len() as u32).collect();
    let mut deps = vec![Vec::new(); n];
    for (i, node) in body.nodes[..n].iter().enumerate() {
        for &j in &node.inputs {
            deps[j as usize].push(i as u32);
        }
    }
    let mut order: Vec<u32> = (0..n as u32).filter(|&i| deg[i as usize] == 0).collect();
    let mut k = 0;
    while k < order.len() {
        let i = order[k] as usize;
        for &d in &deps[i] {
            deg[d as usize] -= 1;
            if deg[d as usize] == 0 {
                order.push(d);
            }
        }
        k += 1;
    }
    order
}

/// Input positions through which gradients flow.
fn differentiable_inputs(kind: &OpKind, ninputs: usize) -> Vec<usize> {
    match kind {
        OpKind::GatherRow | OpKind::ScatterRow { .. } | OpKind::SoftmaxXent | OpKind::ArrayRead => vec![0],
        OpKind::ArrayWrite => vec![0, 2],
        OpKind::Cond { .. } => (1..ninputs).collect(),
        OpKind::ChildKey(_) | OpKind::CacheWrite { .. } | OpKind::CacheRead { .. } => Vec::new(),
        _ => (0..ninputs).collect(),
    }
}

fn is_derivative_op(kind: &OpKind) -> bool {
    matches!(
        kind,
        OpKind::UnaryGrad(_)
            | OpKind::SoftmaxXentGrad
            | OpKind::CondGrad { .. }
            | OpKind::CacheRead { .. }
            | OpKind::CacheWrite { .. }
            | OpKind::ArrayGradRead
            | OpKind::ArrayGradWrite
    )
}

struct Analysis {
    order: Vec<Vec<u32>>,
    active: Vec<Vec<bool>>,
    needs: Vec<bool>,
}

fn analyze(g: &FinalizedGraph, wrt: &[NodeId]) -> Result<Analysis> {
    let nb = g.bodies.len();
    let order: Vec<Vec<u32>> = g.bodies.iter().map(|b| topo_order(b, b.len())).collect();
    let mut active: Vec<Vec<bool>> = g.bodies.iter().map(|b| vec![false; b.len()]).collect();
    let mut slot: Vec<Vec<bool>> = g.bodies.iter().map(|b| vec![false; b.inputs.len()]).collect();
    let out_active = |active: &Vec<Vec<bool>>, s: SubGraphRef, k: usize| {
        let b = g.subgraph(s).body as usize;
        active[b][g.bodies[b].outputs[k] as usize]
    };
    loop {
        let mut changed = false;
        for b in 0..nb {
            let body = &g.bodies[b];
            for &n in &order[b] {
                let node = &body.nodes[n as usize];
                let on = match &node.kind {
                    OpKind::Parameter { .. } => wrt.contains(&NodeId { scope: b as u32, index: n }),
                    OpKind::Input(k) => slot[b][*k],
                    OpKind::Project(k) => {
                        let call = &body.nodes[node.inputs[0] as usize];
                        match &call.kind {
                            OpKind::Invoke(t) => out_active(&active, *t, *k),
                            OpKind::Cond {
                                then_branch,
                                else_branch,
                                ..
                            } => out_active(&active, *then_branch, *k) || out_active(&active, *else_branch, *k),
                            _ => active[b][node.inputs[0] as usize],
                        }
                    }
                    OpKind::Invoke(_) | OpKind::Cond { .. } => false,
                    kind => differentiable_inputs(kind, node.inputs.len())
                        .iter()
                        .any(|&j| active[b][node.inputs[j] as usize]),
                };
                if on && !active[b][n as usize] {
                    if is_derivative_op(&node.kind) {
                        return Err(err(format!(
                            "cannot differentiate through {} (graph already differentiated)",
                            node.kind.name()
                        )));
                    }
                    active[b][n as usize] = true;
                    changed = true;
                }
                let mut feed = |callee: SubGraphRef, j: usize, from: u32, slot: &mut Vec<Vec<bool>>| {
                    let cb = g.subgraph(callee).body as usize;
                    if active[b][from as usize] && !slot[cb][j] {
                        slot[cb][j] = true;
                        changed = true;
                    }
                };
                match &node.kind {
                    OpKind::Invoke(t) => {
                        for (j, &from) in node.inputs.iter().enumerate() {
                            feed(*t, j, from, &mut slot);
                        }
                    }
                    OpKind::Cond {
                        then_branch,
                        else_branch,
                        nargs,
                        ..
                    } => {
                        let tc = g.subgraph(*then_branch).captures.len();
                        for (j, &from) in node.inputs.iter().enumerate().skip(1) {
                            let a = j - 1;
                            if a < *nargs {
                                feed(*then_branch, a, from, &mut slot);
                                feed(*else_branch, a, from, &mut slot);
                            } else if a < nargs + tc {
                                feed(*then_branch, a, from, &mut slot);
                            } else {
                                feed(*else_branch, a - tc, from, &mut slot);
                            }
                        }
                    }
                    _ => {}
                }
            }
        }
        if !changed {
            break;
        }
    }
    let ns = g.subgraphs.len();
    let mut needs: Vec<bool> = (0..ns)
        .map(|s| {
            let b = g.subgraphs[s].body as usize;
            g.bodies[b].outputs.iter().any(|&o| active[b][o as usize])
        })
        .collect();
    loop {
        let mut changed = false;
        for s in 0..ns {
            if needs[s] {
                continue;
            }
            let b = g.subgraphs[s].body as usize;
            let calls_grad = g.bodies[b].nodes.iter().any(|n| match &n.kind {
                OpKind::Invoke(t) => needs[t.0 as usize],
                OpKind::Cond {
                    then_branch,
                    else_branch,
                    ..
                } => needs[then_branch.0 as usize] || needs[else_branch.0 as usize],
                _ => false,
            });
            if calls_grad {
                needs[s] = true;
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }
    Ok(Analysis {
        order,
        active,
        needs,
    })
}

/// Extend `g` with nodes computing d`loss`/dP for each parameter node in
/// `wrt`.
pub fn differentiate(g: &FinalizedGraph, loss: NodeId, wrt: &[NodeId]) -> Result<Gradients> {
    if g.differentiated {
        return Err(err("graph is already differentiated"));
    }
    let loss_node = g.node(loss).ok_or(BuildError::UnknownNode(loss))?;
    if loss.scope != 0 {
        return Err(err(format!("loss {loss} must be a top-level node")));
    }
    if loss_node.ty != ValueType::tensor(1, 1) {
        return Err(err(format!("loss must be a 1x1 scalar, got {}", loss_node.ty)));
    }
    let mut names = Vec::with_capacity(wrt.len());
    for p in wrt {
        match g.node(*p).map(|n| &n.kind) {
            Some(OpKind::Parameter { name, shape }) if p.scope == 0 => names.push((name.clone(), *shape)),
            _ => return Err(err(format!("{p} is not a parameter"))),
        }
    }
    let an = analyze(g, wrt)?;
    let mut out = g.clone();
    out.differentiated = true;

    // forward-declare every gradient SubGraph
    let mut grad_ref: Vec<Option<SubGraphRef>> = vec![None; g.subgraphs.len()];
    for (s, info) in g.subgraphs.iter().enumerate() {
        if !an.needs[s] {
            continue;
        }
        let fb = &g.bodies[info.body as usize];
        let mut inputs: Vec<ValueType> = fb
            .outputs
            .iter()
            .map(|&o| grad_type(fb.nodes[o as usize].ty))
            .collect();
        inputs.push(ValueType::Key);
        let outputs = fb
            .inputs
            .iter()
            .map(|&i| grad_type(fb.nodes[i as usize].ty))
            .collect();
        let body = out.bodies.len() as u32;
        out.bodies.push(Body {
            nodes: Vec::new(),
            inputs: Vec::new(),
            outputs: Vec::new(),
            dependents: Vec::new(),
            indegree: Vec::new(),
        });
        grad_ref[s] = Some(SubGraphRef(out.subgraphs.len() as u32));
        out.subgraphs.push(SubGraphInfo {
            name: format!("{}/grad", info.name),
            kind: SubGraphKind::Gradient,
            signature: Signature::new(inputs, outputs),
            captures: Vec::new(),
            body,
            parent_scope: info.parent_scope,
            declared_in: info.declared_in,
        });
    }

    for (s, info) in g.subgraphs.iter().enumerate() {
        let Some(gr) = grad_ref[s] else { continue };
        let dst = out.subgraphs[gr.0 as usize].body;
        let fwd = info.body;
        let fb = &g.bodies[fwd as usize];
        let mut sw = Sweep::new(&mut out, &an, &grad_ref, fwd, dst);
        let nout = fb.outputs.len();
        let mut ins = Vec::with_capacity(nout + 1);
        for k in 0..nout {
            let ty = grad_type(fb.nodes[fb.outputs[k] as usize].ty);
            ins.push(sw.emit_typed(OpKind::Input(k), vec![], ty));
        }
        let key = sw.emit_typed(OpKind::Input(nout), vec![], ValueType::Key);
        ins.push(key);
        sw.key = Some(key);
        for (&o, &v) in fb.outputs.iter().zip(&ins) {
            sw.contribute(o, v);
        }
        sw.sweep(g)?;
        let mut outs = Vec::with_capacity(fb.inputs.len());
        for &i in &fb.inputs {
            let ty = grad_type(fb.nodes[i as usize].ty);
            let v = match sw.accumulate(i, ty)? {
                Some(v) => v,
                None => sw.emit_typed(OpKind::Zero, vec![], ty),
            };
            outs.push(v);
        }
        let b = &mut out.bodies[dst as usize];
        b.inputs = ins;
        b.outputs = outs;
    }

    let mut sw = Sweep::new(&mut out, &an, &grad_ref, 0, 0);
    let one = sw.emit(OpKind::Constant(std::sync::Arc::new(Tensor::scalar(1.0))), vec![])?;
    sw.contribute(loss.index, one);
    sw.sweep(g)?;
    let mut params = Vec::with_capacity(wrt.len());
    for (p, (name, shape)) in wrt.iter().zip(names) {
        let ty = ValueType::Tensor(shape.into());
        let acc = match sw.accumulate(p.index, ty)? {
            Some(v) => v,
            None => sw.emit_typed(OpKind::Zero, vec![], ty),
        };
        let d = sw.emit(OpKind::Densify(shape), vec![acc])?;
        params.push((name, NodeId::top(d)));
    }
    for (i, b) in out.bodies.iter_mut().enumerate() {
        b.reindex(i as u32)?;
    }
    Ok(Gradients {
        graph: out,
        loss,
        params,
    })
}

/// Reverse sweep over one forward body, emitting into `dst` (the same body
/// for the top-level graph).
struct Sweep<'a> {
    g: &'a mut FinalizedGraph,
    an: &'a Analysis,
    grad_ref: &'a [Option<SubGraphRef>],
    fwd: u32,
    dst: u32,
    key: Option<u32>,
    saved: HashMap<u32, u32>,
    contribs: HashMap<u32, Vec<u32>>,
    tuple: HashMap<(u32, usize), Vec<u32>>,
}

impl<'a> Sweep<'a> {
    fn new(
        g: &'a mut FinalizedGraph,
        an: &'a Analysis,
        grad_ref: &'a [Option<SubGraphRef>],
        fwd: u32,
        dst: u32,
    ) -> Self {
        Sweep {
            g,
            an,
            grad_ref,
            fwd,
            dst,
            key: None,
            saved: HashMap::new(),
            contribs: HashMap::new(),
            tuple: HashMap::new(),
        }
    }

    fn ty(&self, body: u32, n: u32) -> ValueType {
        self.g.bodies[body as usize].nodes[n as usize].ty
    }

    fn push(&mut self, body: u32, kind: OpKind, inputs: Vec<u32>, ty: ValueType) -> u32 {
        let b = &mut self.g.bodies[body as usize];
        b.nodes.push(FNode { kind, inputs, ty });
        (b.nodes.len() - 1) as u32
    }

    fn emit_typed(&mut self, kind: OpKind, inputs: Vec<u32>, ty: ValueType) -> u32 {
        self.push(self.dst, kind, inputs, ty)
    }

    fn emit(&mut self, kind: OpKind, inputs: Vec<u32>) -> Result<u32> {
        let tys: Vec<ValueType> = inputs.iter().map(|&i| self.ty(self.dst, i)).collect();
        let ty = infer_type(&kind, &tys).map_err(|m| err(format!("gradient {}: {m}", kind.name())))?;
        Ok(self.push(self.dst, kind, inputs, ty))
    }

    fn key(&mut self) -> u32 {
        if let Some(k) = self.key {
            return k;
        }
        let k = self.emit_typed(OpKind::FrameKey, vec![], ValueType::Key);
        self.key = Some(k);
        k
    }

    /// Forward value of node `n`, visible in the gradient body.
    fn fwd(&mut self, n: u32) -> u32 {
        if self.fwd == self.dst {
            return n;
        }
        if let Some(&v) = self.saved.get(&n) {
            return v;
        }
        let node = self.g.bodies[self.fwd as usize].nodes[n as usize].clone();
        let v = if let OpKind::Constant(_) = node.kind {
            self.emit_typed(node.kind, vec![], node.ty)
        } else {
            self.push(self.fwd, OpKind::CacheWrite { target: n }, vec![n], ValueType::Unit);
            let key = self.key();
            self.emit_typed(OpKind::CacheRead { target: n }, vec![key], node.ty)
        };
        self.saved.insert(n, v);
        v
    }

    fn contribute(&mut self, n: u32, g: u32) {
        self.contribs.entry(n).or_default().push(g);
    }

    fn sum(&mut self, parts: Vec<u32>, ty: ValueType) -> Option<u32> {
        match parts.len() {
            0 => None,
            1 => Some(parts[0]),
            _ => Some(self.emit_typed(OpKind::GradAccum, parts, ty)),
        }
    }

    fn accumulate(&mut self, n: u32, ty: ValueType) -> Result<Option<u32>> {
        let parts = self.contribs.remove(&n).unwrap_or_default();
        Ok(self.sum(parts, grad_type(ty)))
    }

    fn static_shape(&self, n: u32, what: &str) -> Result<Shape> {
        self.ty(self.fwd, n)
            .shape()
            .and_then(|s| s.as_shape())
            .ok_or_else(|| err(format!("gradient of {what} needs a static input shape")))
    }

    fn is_active(&self, n: u32) -> bool {
        self.an.active[self.fwd as usize][n as usize]
    }

    fn sweep(&mut self, src: &FinalizedGraph) -> Result<()> {
        let fb = &src.bodies[self.fwd as usize];
        let an = self.an;
        for &n in an.order[self.fwd as usize].iter().rev() {
            let node = &fb.nodes[n as usize];
            let ins = &node.inputs;
            match &node.kind {
                OpKind::Invoke(t) => {
                    self.call_site(n, node, &[*t], src)?;
                    continue;
                }
                OpKind::Cond {
                    then_branch,
                    else_branch,
                    ..
                } => {
                    self.call_site(n, node, &[*then_branch, *else_branch], src)?;
                    continue;
                }
                OpKind::Input(_) | OpKind::Parameter { .. } => continue,
                _ => {}
            }
            if !self.is_active(n) {
                continue;
            }
            let Some(g) = self.accumulate(n, node.ty)? else {
                continue;
            };
            let act: Vec<bool> = ins.iter().map(|&i| self.is_active(i)).collect();
            match &node.kind {
                OpKind::MatMul { ta, tb } => {
                    let (ta, tb) = (*ta, *tb);
                    let (a, b) = (ins[0], ins[1]);
                    if act[0] {
                        let fb_ = self.fwd(b);
                        let da = if !ta {
                            self.emit(OpKind::MatMul { ta: false, tb: !tb }, vec![g, fb_])?
                        } else {
                            self.emit(OpKind::MatMul { ta: tb, tb: true }, vec![fb_, g])?
                        };
                        self.contribute(a, da);
                    }
                    if act[1] {
                        let fa = self.fwd(a);
                        let db = if !tb {
                            self.emit(OpKind::MatMul { ta: !ta, tb: false }, vec![fa, g])?
                        } else {
                            self.emit(OpKind::MatMul { ta: true, tb: ta }, vec![g, fa])?
                        };
                        self.contribute(b, db);
                    }
                }
                OpKind::Unary(f) => {
                    let d = match f {
                        UnaryFn::Tanh | UnaryFn::Sigmoid => {
                            let y = self.fwd(n);
                            self.emit(OpKind::UnaryGrad(*f), vec![g, y])?
                        }
                        UnaryFn::Square => {
                            let x = self.fwd(ins[0]);
                            self.emit(OpKind::UnaryGrad(*f), vec![g, x])?
                        }
                        UnaryFn::Neg => self.emit(OpKind::Unary(UnaryFn::Neg), vec![g])?,
                    };
                    self.contribute(ins[0], d);
                }
                OpKind::Binary(f) => match f {
                    BinaryFn::Add => {
                        for j in 0..2 {
                            if act[j] {
                                self.contribute(ins[j], g);
                            }
                        }
                    }
                    BinaryFn::Sub => {
                        if act[0] {
                            self.contribute(ins[0], g);
                        }
                        if act[1] {
                            let d = self.emit(OpKind::Unary(UnaryFn::Neg), vec![g])?;
                            self.contribute(ins[1], d);
                        }
                    }
                    BinaryFn::Hadamard => {
                        for j in 0..2 {
                            if act[j] {
                                let other = self.fwd(ins[1 - j]);
                                let d = self.emit(OpKind::Binary(BinaryFn::Hadamard), vec![g, other])?;
                                self.contribute(ins[j], d);
                            }
                        }
                    }
                },
                OpKind::ConcatRows | OpKind::ConcatCols => {
                    let rows = matches!(node.kind, OpKind::ConcatRows);
                    let sa = self.static_shape(ins[0], "concat")?;
                    let sb = self.static_shape(ins[1], "concat")?;
                    let parts = if rows {
                        [(0, sa.rows), (sa.rows, sb.rows)]
                    } else {
                        [(0, sa.cols), (sa.cols, sb.cols)]
                    };
                    for j in 0..2 {
                        if act[j] {
                            let (start, len) = parts[j];
                            let kind = if rows {
                                OpKind::SliceRows { start, len }
                            } else {
                                OpKind::SliceCols { start, len }
                            };
                            let d = self.emit(kind, vec![g])?;
                            self.contribute(ins[j], d);
                        }
                    }
                }
                OpKind::SliceRows { start, .. } => {
                    let total = self.static_shape(ins[0], "slice")?.rows;
                    let d = self.emit(OpKind::PadRows { start: *start, total }, vec![g])?;
                    self.contribute(ins[0], d);
                }
                OpKind::SliceCols { start, .. } => {
                    let total = self.static_shape(ins[0], "slice")?.cols;
                    let d = self.emit(OpKind::PadCols { start: *start, total }, vec![g])?;
                    self.contribute(ins[0], d);
                }
                OpKind::PadRows { start, .. } => {
                    let len = self.static_shape(ins[0], "pad")?.rows;
                    let d = self.emit(OpKind::SliceRows { start: *start, len }, vec![g])?;
                    self.contribute(ins[0], d);
                }
                OpKind::PadCols { start, .. } => {
                    let len = self.static_shape(ins[0], "pad")?.cols;
                    let d = self.emit(OpKind::SliceCols { start: *start, len }, vec![g])?;
                    self.contribute(ins[0], d);
                }
                OpKind::Reshape(_) => {
                    let s = self.static_shape(ins[0], "reshape")?;
                    let d = self.emit(OpKind::Reshape(s), vec![g])?;
                    self.contribute(ins[0], d);
                }
                OpKind::GatherRow => {
                    let rows = self.static_shape(ins[0], "gather_row")?.rows;
                    let idx = self.fwd(ins[1]);
                    let d = self.emit(OpKind::ScatterRow { rows }, vec![g, idx])?;
                    self.contribute(ins[0], d);
                }
                OpKind::ScatterRow { .. } => {
                    let idx = self.fwd(ins[1]);
                    let d = self.emit(OpKind::GatherRow, vec![g, idx])?;
                    self.contribute(ins[0], d);
                }
                OpKind::SoftmaxXent => {
                    let logits = self.fwd(ins[0]);
                    let label = self.fwd(ins[1]);
                    let d = self.emit(OpKind::SoftmaxXentGrad, vec![g, logits, label])?;
                    self.contribute(ins[0], d);
                }
                OpKind::GradAccum | OpKind::Densify(_) => {
                    for j in 0..ins.len() {
                        if act[j] {
                            self.contribute(ins[j], g);
                        }
                    }
                }
                OpKind::Project(k) => {
                    self.tuple.entry((ins[0], *k)).or_default().push(g);
                }
                OpKind::ArrayWrite => {
                    if act[0] {
                        self.contribute(ins[0], g);
                    }
                    if act[2] {
                        let arr = self.fwd(ins[0]);
                        let idx = self.fwd(ins[1]);
                        let ty = grad_type(self.ty(self.fwd, ins[2]));
                        let d = self.emit_typed(OpKind::ArrayGradRead, vec![arr, idx, g], ty);
                        self.contribute(ins[2], d);
                    }
                }
                OpKind::ArrayRead => {
                    let arr = self.fwd(ins[0]);
                    let idx = self.fwd(ins[1]);
                    let d = self.emit(OpKind::ArrayGradWrite, vec![arr, idx, g])?;
                    self.contribute(ins[0], d);
                }
                other => {
                    return Err(err(format!("no gradient rule for {}", other.name())));
                }
            }
        }
        Ok(())
    }

    /// Emit the gradient call for an Invoke (one callee) or Cond (two).
    fn call_site(&mut self, n: u32, node: &FNode, callees: &[SubGraphRef], src: &FinalizedGraph) -> Result<()> {
        let grads: Vec<Option<SubGraphRef>> = callees.iter().map(|c| self.grad_ref[c.0 as usize]).collect();
        if grads.iter().all(|g| g.is_none()) {
            return Ok(());
        }
        let first = src.subgraph(callees[0]);
        let cb = &src.bodies[first.body as usize];
        let mut args = Vec::with_capacity(cb.outputs.len() + 1);
        for k in 0..cb.outputs.len() {
            let ty = grad_type(cb.nodes[cb.outputs[k] as usize].ty);
            let parts = self.tuple.remove(&(n, k)).unwrap_or_default();
            let v = match self.sum(parts, ty) {
                Some(v) => v,
                None => self.emit_typed(OpKind::Zero, vec![], ty),
            };
            args.push(v);
        }
        let base = self.key();
        // in the forward body itself, wait for the forward call to finish
        let key_in = if self.fwd == self.dst { vec![base, n] } else { vec![base] };
        let key = self.emit_typed(OpKind::ChildKey(n), key_in, ValueType::Key);
        args.push(key);
        let nin = node.inputs.len();
        let call = match &node.kind {
            OpKind::Invoke(_) => {
                self.emit_typed(OpKind::Invoke(grads[0].expect("checked")), args, ValueType::Tuple(nin))
            }
            OpKind::Cond { nargs, .. } => {
                let then_caps = src.subgraph(callees[0]).captures.len();
                let else_caps = src.subgraph(callees[1]).captures.len();
                if let OpKind::Cond { record, .. } = &mut self.g.bodies[self.fwd as usize].nodes[n as usize].kind {
                    *record = true;
                }
                self.emit_typed(
                    OpKind::CondGrad {
                        then_grad: grads[0],
                        else_grad: grads[1],
                        nargs: *nargs,
                        then_caps,
                        else_caps,
                    },
                    args,
                    ValueType::Tuple(nin),
                )
            }
            _ => unreachable!("call sites are Invoke or Cond"),
        };
        let first_diff = if matches!(node.kind, OpKind::Cond { .. }) { 1 } else { 0 };
        for (j, &inp) in node.inputs.iter().enumerate().skip(first_diff) {
            if self.is_active(inp) {
                let ty = grad_type(self.ty(self.fwd, inp));
                let p = self.emit_typed(OpKind::Project(j), vec![call], ty);
                self.contribute(inp, p);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::executor::{Executor, Feeds, RunOptions};
    use crate::graph::GraphBuilder;
    use std::sync::Arc;

    fn scalar_graph() -> (GraphBuilder, NodeId, NodeId) {
        let mut g = GraphBuilder::new();
        let w = g.parameter("w", Shape::new(1, 2)).unwrap();
        let x = g.placeholder("x", ShapeSpec::fixed(2, 1)).unwrap();
        let y = g.matmul(w, x).unwrap();
        let y = g.tanh(y).unwrap();
        (g, w, y)
    }

    #[test]
    fn simple_chain_gradient() {
        let (mut g, w, y) = scalar_graph();
        let y2 = g.unary(UnaryFn::Square, y).unwrap();
        let fg = g.finalize().unwrap();
        let grads = differentiate(&fg, y2, &[w]).unwrap();
        let graph = Arc::new(grads.graph);
        let mut feeds = Feeds::new();
        feeds.insert("w", Tensor::from_rows(&[&[0.3, -0.2]]));
        feeds.insert("x", Tensor::from_rows(&[&[1.0], &[2.0]]));
        let gw = grads.params[0].1;
        let out = Executor::new(1)
            .run(&graph, &feeds, &[y2, gw], &RunOptions::default())
            .unwrap();
        let t = (0.3f64 - 0.4).tanh();
        let dy = 2.0 * t * (1.0 - t * t);
        let gw = out.tensor(1).unwrap();
        assert!((gw.data()[0] - dy * 1.0).abs() < 1e-12);
        assert!((gw.data()[1] - dy * 2.0).abs() < 1e-12);
    }

    #[test]
    fn rejects_non_scalar_loss_and_double_differentiation() {
        let (mut g, w, y) = scalar_graph();
        let x = g.placeholder("v", ShapeSpec::fixed(1, 2)).unwrap();
        let fg = g.finalize().unwrap();
        assert!(differentiate(&fg, x, &[w]).unwrap_err().to_string().contains("scalar"));
        let d = differentiate(&fg, y, &[w]).unwrap();
        assert!(differentiate(&d.graph, y, &[w]).is_err());
        assert!(differentiate(&fg, y, &[x]).is_err());
    }
}
