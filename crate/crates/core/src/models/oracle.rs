//! Reference implementation on a dynamic tape.
//!
//! Walks the tree with host recursion, records every primitive on a tape
//! and runs reverse mode over it. Shares no code with the graph builder,
//! executor or autodiff pass, so it serves as an independent check.

use std::collections::BTreeMap;

use super::{ModelKind, ModelParams};
use crate::data::{NodeKind, TreeInstance};
use crate::tensor::{Shape, Tensor};

#[derive(Debug, Clone)]
enum Op {
    Param(String),
    EmbedRow(usize),
    /// a * b^T
    MatMulBt(usize, usize),
    Add(usize, usize),
    Mul(usize, usize),
    Tanh(usize),
    Sigmoid(usize),
    Concat(usize, usize),
    Reshape(usize),
    Xent { logits: usize, label: usize },
}

struct Tape<'a> {
    params: &'a ModelParams,
    vals: Vec<Tensor>,
    ops: Vec<Op>,
    param_ids: BTreeMap<String, usize>,
}

fn mm_bt(a: &Tensor, b: &Tensor) -> Tensor {
    assert_eq!(a.cols(), b.cols());
    let mut out = Tensor::zeros(a.rows(), b.rows());
    for i in 0..a.rows() {
        for j in 0..b.rows() {
            let s: f64 = a.row(i).iter().zip(b.row(j)).map(|(x, y)| x * y).sum();
            out.set(i, j, s);
        }
    }
    out
}

fn zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    assert_eq!(a.shape(), b.shape());
    let d = a.data().iter().zip(b.data()).map(|(x, y)| f(*x, *y)).collect();
    Tensor::from_vec(a.rows(), a.cols(), d).unwrap()
}

impl<'a> Tape<'a> {
    fn push(&mut self, v: Tensor, op: Op) -> usize {
        self.vals.push(v);
        self.ops.push(op);
        self.vals.len() - 1
    }

    fn param(&mut self, name: &str) -> usize {
        if let Some(&i) = self.param_ids.get(name) {
            return i;
        }
        let i = self.push(self.params.get(name).clone(), Op::Param(name.to_string()));
        self.param_ids.insert(name.to_string(), i);
        i
    }

    fn embed(&mut self, token: usize) -> usize {
        let e = self.params.get("E");
        let row = Tensor::from_vec(1, e.cols(), e.row(token).to_vec()).unwrap();
        self.push(row, Op::EmbedRow(token))
    }

    fn mm_bt(&mut self, a: usize, b: usize) -> usize {
        let v = mm_bt(&self.vals[a], &self.vals[b]);
        self.push(v, Op::MatMulBt(a, b))
    }

    fn add(&mut self, a: usize, b: usize) -> usize {
        let v = zip(&self.vals[a], &self.vals[b], |x, y| x + y);
        self.push(v, Op::Add(a, b))
    }

    fn mul(&mut self, a: usize, b: usize) -> usize {
        let v = zip(&self.vals[a], &self.vals[b], |x, y| x * y);
        self.push(v, Op::Mul(a, b))
    }

    fn tanh(&mut self, a: usize) -> usize {
        let v = self.vals[a].map(f64::tanh);
        self.push(v, Op::Tanh(a))
    }

    fn sigmoid(&mut self, a: usize) -> usize {
        let v = self.vals[a].map(|x| 1.0 / (1.0 + (-x).exp()));
        self.push(v, Op::Sigmoid(a))
    }

    fn concat(&mut self, a: usize, b: usize) -> usize {
        let mut d = self.vals[a].data().to_vec();
        d.extend_from_slice(self.vals[b].data());
        let v = Tensor::from_vec(1, d.len(), d).unwrap();
        self.push(v, Op::Concat(a, b))
    }

    fn reshape(&mut self, a: usize, shape: Shape) -> usize {
        let v = Tensor::from_vec(shape.rows, shape.cols, self.vals[a].data().to_vec()).unwrap();
        self.push(v, Op::Reshape(a))
    }

    fn xent(&mut self, logits: usize, label: usize) -> usize {
        let z = self.vals[logits].data();
        let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + z.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
        let v = Tensor::scalar(lse - z[label]);
        self.push(v, Op::Xent { logits, label })
    }

    fn affine(&mut self, x: usize, w: &str, b: &str) -> usize {
        let w = self.param(w);
        let b = self.param(b);
        let xw = self.mm_bt(x, w);
        self.add(xw, b)
    }

    fn node_loss(&mut self, h: usize, label: usize) -> usize {
        let z = self.affine(h, "Ws", "bs");
        self.xent(z, label)
    }

    /// Returns (states, summed subtree loss if requested).
    fn visit(&mut self, tree: &TreeInstance, i: usize, per_node: bool) -> (Vec<usize>, Option<usize>) {
        let kind = self.params.kind;
        let d = self.params.d;
        let node = &tree.nodes[i];
        let (states, child_loss) = match node.kind {
            NodeKind::Leaf { token } => {
                let x = self.embed(token);
                let st = match kind {
                    ModelKind::TreeRnn | ModelKind::Rntn => vec![x],
                    ModelKind::TreeLstm => {
                        let a = self.affine(x, "W_i", "bl_i");
                        let ig = self.sigmoid(a);
                        let a = self.affine(x, "W_o", "bl_o");
                        let og = self.sigmoid(a);
                        let a = self.affine(x, "W_u", "bl_u");
                        let u = self.tanh(a);
                        let c = self.mul(ig, u);
                        let tc = self.tanh(c);
                        vec![self.mul(og, tc), c]
                    }
                };
                (st, None)
            }
            NodeKind::Internal { left, right } => {
                let (ls, ll) = self.visit(tree, left, per_node);
                let (rs, rl) = self.visit(tree, right, per_node);
                let x = self.concat(ls[0], rs[0]);
                let st = match kind {
                    ModelKind::TreeRnn => {
                        let a = self.affine(x, "W", "b");
                        vec![self.tanh(a)]
                    }
                    ModelKind::Rntn => {
                        let v = self.param("V");
                        let u = self.mm_bt(v, x);
                        let r = self.reshape(u, Shape::new(d, 2 * d));
                        let q = self.mm_bt(x, r);
                        let a = self.affine(x, "W", "b");
                        let s = self.add(q, a);
                        vec![self.tanh(s)]
                    }
                    ModelKind::TreeLstm => {
                        let mut g = BTreeMap::new();
                        for name in ["i", "fl", "fr", "o", "u"] {
                            let a = self.affine(x, &format!("U_{name}"), &format!("b_{name}"));
                            let v = if name == "u" { self.tanh(a) } else { self.sigmoid(a) };
                            g.insert(name, v);
                        }
                        let iu = self.mul(g["i"], g["u"]);
                        let fl = self.mul(g["fl"], ls[1]);
                        let fr = self.mul(g["fr"], rs[1]);
                        let c = self.add(iu, fl);
                        let c = self.add(c, fr);
                        let tc = self.tanh(c);
                        vec![self.mul(g["o"], tc), c]
                    }
                };
                let sub = match (ll, rl) {
                    (Some(a), Some(b)) => Some(self.add(a, b)),
                    _ => None,
                };
                (st, sub)
            }
        };
        if !per_node {
            return (states, None);
        }
        let own = self.node_loss(states[0], node.label);
        let total = match child_loss {
            Some(c) => self.add(c, own),
            None => own,
        };
        (states, Some(total))
    }

    fn backward(&self, out: usize) -> BTreeMap<String, Tensor> {
        let mut g: Vec<Option<Tensor>> = vec![None; self.vals.len()];
        g[out] = Some(Tensor::scalar(1.0));
        let mut grads: BTreeMap<String, Tensor> = self
            .params
            .tensors
            .iter()
            .map(|(k, t)| (k.clone(), Tensor::zeros(t.rows(), t.cols())))
            .collect();
        fn acc(slot: &mut Option<Tensor>, t: Tensor) {
            match slot {
                Some(s) => *s = zip(s, &t, |a, b| a + b),
                None => *slot = Some(t),
            }
        }
        for i in (0..self.ops.len()).rev() {
            let Some(gi) = g[i].take() else { continue };
            match &self.ops[i] {
                Op::Param(name) => {
                    let p = grads.get_mut(name).unwrap();
                    *p = zip(p, &gi, |a, b| a + b);
                }
                Op::EmbedRow(tok) => {
                    let e = grads.get_mut("E").unwrap();
                    for (c, v) in gi.data().iter().enumerate() {
                        e.set(*tok, c, e.get(*tok, c) + v);
                    }
                }
                Op::MatMulBt(a, b) => {
                    // y = a b^T: da = g b, db = g^T a
                    let (va, vb) = (&self.vals[*a], &self.vals[*b]);
                    let da = mm_bt(&gi, &vb.transpose());
                    let db = mm_bt(&gi.transpose(), &va.transpose());
                    acc(&mut g[*a], da);
                    acc(&mut g[*b], db);
                }
                Op::Add(a, b) => {
                    acc(&mut g[*a], gi.clone());
                    acc(&mut g[*b], gi);
                }
                Op::Mul(a, b) => {
                    let da = zip(&gi, &self.vals[*b], |x, y| x * y);
                    let db = zip(&gi, &self.vals[*a], |x, y| x * y);
                    acc(&mut g[*a], da);
                    acc(&mut g[*b], db);
                }
                Op::Tanh(a) => {
                    let d = zip(&gi, &self.vals[i], |x, y| x * (1.0 - y * y));
                    acc(&mut g[*a], d);
                }
                Op::Sigmoid(a) => {
                    let d = zip(&gi, &self.vals[i], |x, y| x * y * (1.0 - y));
                    acc(&mut g[*a], d);
                }
                Op::Concat(a, b) => {
                    let n = self.vals[*a].cols();
                    let d = gi.data();
                    acc(&mut g[*a], Tensor::from_vec(1, n, d[..n].to_vec()).unwrap());
                    acc(&mut g[*b], Tensor::from_vec(1, d.len() - n, d[n..].to_vec()).unwrap());
                }
                Op::Reshape(a) => {
                    let s = self.vals[*a].shape();
                    acc(&mut g[*a], Tensor::from_vec(s.rows, s.cols, gi.data().to_vec()).unwrap());
                }
                Op::Xent { logits, label } => {
                    let z = self.vals[*logits].data();
                    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let e: Vec<f64> = z.iter().map(|x| (x - m).exp()).collect();
                    let s: f64 = e.iter().sum();
                    let up = gi.item();
                    let d = e
                        .iter()
                        .enumerate()
                        .map(|(k, v)| up * (v / s - if k == *label { 1.0 } else { 0.0 }))
                        .collect();
                    acc(&mut g[*logits], Tensor::from_vec(1, z.len(), d).unwrap());
                }
            }
        }
        grads
    }
}

/// Root logits of `tree`.
pub fn logits(params: &ModelParams, tree: &TreeInstance) -> Tensor {
    let mut t = new_tape(params);
    let (st, _) = t.visit(tree, tree.root, false);
    let z = t.affine(st[0], "Ws", "bs");
    t.vals[z].clone()
}

/// Loss and parameter gradients for one instance.
pub fn forward_backward(params: &ModelParams, tree: &TreeInstance, per_node: bool) -> (f64, BTreeMap<String, Tensor>) {
    let mut t = new_tape(params);
    let (st, sub) = t.visit(tree, tree.root, per_node);
    let loss = match sub {
        Some(l) => l,
        None => t.node_loss(st[0], tree.root_label()),
    };
    (t.vals[loss].item(), t.backward(loss))
}

fn new_tape(params: &ModelParams) -> Tape<'_> {
    Tape {
        params,
        vals: Vec::new(),
        ops: Vec::new(),
        param_ids: BTreeMap::new(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::ModelConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn oracle_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for kind in ModelKind::ALL {
            let cfg = ModelConfig::new(kind, 2, 4, 2);
            let p = ModelParams::init_dense(&cfg, 0.6, &mut rng);
            let t = crate::data::generate_synthetic(crate::data::TreeShape::Moderate, 4, 4, 2, &mut rng).unwrap();
            let (_, g) = forward_backward(&p, &t, true);
            for (name, grad) in &g {
                for k in 0..grad.data().len() {
                    let mut hi = p.clone();
                    hi.tensors.get_mut(name).unwrap().data_mut()[k] += 1e-5;
                    let mut lo = p.clone();
                    lo.tensors.get_mut(name).unwrap().data_mut()[k] -= 1e-5;
                    let fd = (forward_backward(&hi, &t, true).0 - forward_backward(&lo, &t, true).0) / 2e-5;
                    assert!((fd - grad.data()[k]).abs() < 1e-7, "{kind} {name}[{k}]: {fd} vs {}", grad.data()[k]);
                }
            }
        }
    }
}
