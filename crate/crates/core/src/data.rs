//! Labeled binary trees: parsing, vocabulary, synthetic generation and
//! statistics.
//!
//! Line format: a leaf is `(L token)`, an internal node is `(L child child)`,
//! with `L` a non-negative integer class label. Node indices are assigned in
//! post-order, so children always precede their parent.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("parse error at byte {offset}: {msg}")]
pub struct ParseError {
    pub offset: usize,
    pub msg: String,
}

#[derive(Debug, Error)]
pub enum DataError {
    #[error(transparent)]
    Parse(#[from] ParseError),
    #[error("{}", format_line_errors(.0))]
    Corpus(Vec<(usize, ParseError)>),
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

fn format_line_errors(errs: &[(usize, ParseError)]) -> String {
    errs.iter()
        .map(|(l, e)| format!("line {l}: {e}"))
        .collect::<Vec<_>>()
        .join("\n")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NodeKind {
    Leaf { token: usize },
    Internal { left: usize, right: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TreeNode {
    pub label: usize,
    pub kind: NodeKind,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TreeInstance {
    pub nodes: Vec<TreeNode>,
    pub root: usize,
    /// Children before parents.
    pub topo_order: Vec<usize>,
}

impl TreeInstance {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn root_label(&self) -> usize {
        self.nodes[self.root].label
    }

    pub fn is_leaf(&self, i: usize) -> bool {
        matches!(self.nodes[i].kind, NodeKind::Leaf { .. })
    }

    /// Check binary structure, index ranges and the topological order.
    pub fn validate(&self) -> Result<(), String> {
        let n = self.nodes.len();
        if n == 0 || n.is_multiple_of(2) {
            return Err(format!("a binary tree has an odd node count, got {n}"));
        }
        if self.root >= n {
            return Err("root out of range".into());
        }
        let mut pos = vec![usize::MAX; n];
        for (p, &i) in self.topo_order.iter().enumerate() {
            if i >= n || pos[i] != usize::MAX {
                return Err("topo_order is not a permutation".into());
            }
            pos[i] = p;
        }
        if self.topo_order.len() != n {
            return Err("topo_order is not a permutation".into());
        }
        let mut parents = vec![0usize; n];
        for (i, node) in self.nodes.iter().enumerate() {
            if let NodeKind::Internal { left, right } = node.kind {
                for c in [left, right] {
                    if c >= n {
                        return Err(format!("child {c} of node {i} out of range"));
                    }
                    if pos[c] >= pos[i] {
                        return Err(format!("child {c} does not precede parent {i}"));
                    }
                    parents[c] += 1;
                }
            }
        }
        for (i, &p) in parents.iter().enumerate() {
            let want = usize::from(i != self.root);
            if p != want {
                return Err(format!("node {i} has {p} parents"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    ids: HashMap<String, usize>,
    tokens: Vec<String>,
}

pub const UNK: &str = "<unk>";

impl Default for Vocab {
    fn default() -> Self {
        Self::new()
    }
}

impl Vocab {
    /// A vocabulary holding only the unknown token (id 0).
    pub fn new() -> Self {
        let mut v = Vocab {
            ids: HashMap::new(),
            tokens: Vec::new(),
        };
        v.add(UNK);
        v
    }

    /// `<unk>` plus tokens `t1 .. t{size-1}`.
    pub fn synthetic(size: usize) -> Self {
        let mut v = Vocab::new();
        for i in 1..size {
            v.add(&format!("t{i}"));
        }
        v
    }

    pub fn unk(&self) -> usize {
        0
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn add(&mut self, token: &str) -> usize {
        if let Some(&id) = self.ids.get(token) {
            return id;
        }
        self.tokens.push(token.to_string());
        self.ids.insert(token.to_string(), self.tokens.len() - 1);
        self.tokens.len() - 1
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.ids.get(token).copied()
    }

    pub fn token(&self, id: usize) -> &str {
        self.tokens.get(id).map_or(UNK, |s| s.as_str())
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn from_tokens(tokens: Vec<String>) -> Self {
        let mut v = Vocab {
            ids: HashMap::new(),
            tokens: Vec::new(),
        };
        for t in tokens {
            v.add(&t);
        }
        if v.id(UNK).is_none() {
            v.add(UNK);
        }
        v
    }
}

struct Parser<'a> {
    src: &'a [u8],
    pos: usize,
    nodes: Vec<TreeNode>,
}

impl<'a> Parser<'a> {
    fn err<T>(&self, offset: usize, msg: impl Into<String>) -> Result<T, ParseError> {
        Err(ParseError {
            offset,
            msg: msg.into(),
        })
    }

    fn skip_ws(&mut self) {
        while self.pos < self.src.len() && self.src[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn peek(&self) -> Option<u8> {
        self.src.get(self.pos).copied()
    }

    fn atom(&mut self) -> &'a [u8] {
        let start = self.pos;
        while let Some(c) = self.peek() {
            if c.is_ascii_whitespace() || c == b'(' || c == b')' {
                break;
            }
            self.pos += 1;
        }
        &self.src[start..self.pos]
    }

    fn tree(&mut self, vocab: &mut Vocab, grow: bool) -> Result<usize, ParseError> {
        self.skip_ws();
        let open = self.pos;
        if self.peek() != Some(b'(') {
            return self.err(self.pos, "expected `(`");
        }
        self.pos += 1;
        self.skip_ws();
        let lpos = self.pos;
        let label_text = self.atom();
        if label_text.is_empty() {
            return self.err(lpos, "expected a label");
        }
        let label: usize = match std::str::from_utf8(label_text).ok().and_then(|s| s.parse().ok()) {
            Some(l) => l,
            None => {
                return self.err(
                    lpos,
                    format!("bad label `{}`", String::from_utf8_lossy(label_text)),
                )
            }
        };
        self.skip_ws();
        let kind = match self.peek() {
            Some(b'(') => {
                let left = self.tree(vocab, grow)?;
                self.skip_ws();
                if self.peek() != Some(b'(') {
                    return self.err(self.pos, "internal node needs two subtree children");
                }
                let right = self.tree(vocab, grow)?;
                NodeKind::Internal { left, right }
            }
            Some(b')') => return self.err(self.pos, "node without children"),
            None => return self.err(self.pos, "unexpected end of input"),
            Some(_) => {
                let tpos = self.pos;
                let tok = std::str::from_utf8(self.atom()).map_err(|_| ParseError {
                    offset: tpos,
                    msg: "token is not valid UTF-8".into(),
                })?;
                let token = if grow {
                    vocab.add(tok)
                } else {
                    vocab.id(tok).unwrap_or(vocab.unk())
                };
                NodeKind::Leaf { token }
            }
        };
        self.skip_ws();
        match self.peek() {
            Some(b')') => self.pos += 1,
            Some(b'(') => return self.err(self.pos, format!("node opened at byte {open} has more than two children")),
            Some(_) => return self.err(self.pos, "unexpected token; leaves hold exactly one token"),
            None => return self.err(self.pos, format!("unclosed `(` at byte {open}")),
        }
        self.nodes.push(TreeNode { label, kind });
        Ok(self.nodes.len() - 1)
    }
}

/// Parse one tree. Unknown tokens map to `<unk>` unless `grow` is set, in
/// which case they are added to `vocab`.
pub fn parse_sexpr(line: &str, vocab: &mut Vocab, grow: bool) -> Result<TreeInstance, ParseError> {
    let mut p = Parser {
        src: line.as_bytes(),
        pos: 0,
        nodes: Vec::new(),
    };
    let root = p.tree(vocab, grow)?;
    p.skip_ws();
    if p.pos != p.src.len() {
        return p.err(p.pos, "trailing input after tree");
    }
    let n = p.nodes.len();
    Ok(TreeInstance {
        nodes: p.nodes,
        root,
        topo_order: (0..n).collect(),
    })
}

/// Inverse of [`parse_sexpr`].
pub fn serialize(tree: &TreeInstance, vocab: &Vocab) -> String {
    fn go(t: &TreeInstance, v: &Vocab, i: usize, out: &mut String) {
        let node = &t.nodes[i];
        out.push('(');
        out.push_str(&node.label.to_string());
        out.push(' ');
        match node.kind {
            NodeKind::Leaf { token } => out.push_str(v.token(token)),
            NodeKind::Internal { left, right } => {
                go(t, v, left, out);
                out.push(' ');
                go(t, v, right, out);
            }
        }
        out.push(')');
    }
    let mut s = String::new();
    go(tree, vocab, tree.root, &mut s);
    s
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TreeShape {
    Balanced,
    Moderate,
    Linear,
}

impl TreeShape {
    pub const ALL: [TreeShape; 3] = [TreeShape::Balanced, TreeShape::Moderate, TreeShape::Linear];

    pub fn name(&self) -> &'static str {
        match self {
            TreeShape::Balanced => "balanced",
            TreeShape::Moderate => "moderate",
            TreeShape::Linear => "linear",
        }
    }
}

impl fmt::Display for TreeShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for TreeShape {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "balanced" => Ok(TreeShape::Balanced),
            "moderate" => Ok(TreeShape::Moderate),
            "linear" => Ok(TreeShape::Linear),
            other => Err(format!("unknown shape `{other}` (balanced|moderate|linear)")),
        }
    }
}

/// Tree skeleton as child links; `None` marks a leaf.
struct Skeleton {
    children: Vec<Option<(usize, usize)>>,
    root: usize,
}

impl Skeleton {
    fn balanced(leaves: usize) -> Skeleton {
        let mut children: Vec<Option<(usize, usize)>> = (0..leaves).map(|_| None).collect();
        let mut level: Vec<usize> = (0..leaves).collect();
        while level.len() > 1 {
            level = level
                .chunks(2)
                .map(|p| {
                    children.push(Some((p[0], p[1])));
                    children.len() - 1
                })
                .collect();
        }
        Skeleton {
            root: level[0],
            children,
        }
    }

    fn linear(leaves: usize) -> Skeleton {
        let mut children = vec![None];
        let mut top = 0;
        for _ in 1..leaves {
            children.push(None);
            let leaf = children.len() - 1;
            children.push(Some((top, leaf)));
            top = children.len() - 1;
        }
        Skeleton { children, root: top }
    }

    /// Uniform random binary tree (Rémy's algorithm).
    fn uniform<R: Rng + ?Sized>(leaves: usize, rng: &mut R) -> Skeleton {
        let mut children: Vec<Option<(usize, usize)>> = vec![None];
        let mut parent: Vec<Option<usize>> = vec![None];
        let mut root = 0;
        for _ in 1..leaves {
            let x = rng.gen_range(0..children.len());
            let leaf = children.len();
            children.push(None);
            parent.push(None);
            let inner = children.len();
            let pair = if rng.gen_bool(0.5) { (x, leaf) } else { (leaf, x) };
            children.push(Some(pair));
            parent.push(parent[x]);
            match parent[x] {
                None => root = inner,
                Some(p) => {
                    let (l, r) = children[p].expect("parent is internal");
                    children[p] = Some(if l == x { (inner, r) } else { (l, inner) });
                }
            }
            parent[x] = Some(inner);
            parent[leaf] = Some(inner);
        }
        Skeleton { children, root }
    }

    /// Post-order layout.
    fn post_order(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.children.len());
        let mut stack = vec![(self.root, false)];
        while let Some((i, expanded)) = stack.pop() {
            match (self.children[i], expanded) {
                (Some((l, r)), false) => {
                    stack.push((i, true));
                    stack.push((r, false));
                    stack.push((l, false));
                }
                _ => out.push(i),
            }
        }
        out
    }
}

/// Random tree of the given shape. Tokens are drawn from `1..vocab_size`
/// and every node is labeled with the sum of its subtree's tokens modulo
/// `n_classes`.
pub fn generate_synthetic<R: Rng + ?Sized>(
    shape: TreeShape,
    n_leaves: usize,
    vocab_size: usize,
    n_classes: usize,
    rng: &mut R,
) -> Result<TreeInstance, DataError> {
    if n_leaves == 0 {
        return Err(DataError::Argument("a tree needs at least one leaf".into()));
    }
    if vocab_size < 2 {
        return Err(DataError::Argument("vocabulary needs at least one token besides <unk>".into()));
    }
    if n_classes == 0 {
        return Err(DataError::Argument("need at least one class".into()));
    }
    let sk = match shape {
        TreeShape::Balanced => {
            if !n_leaves.is_power_of_two() {
                return Err(DataError::Argument(format!(
                    "balanced trees need a power-of-two leaf count, got {n_leaves}"
                )));
            }
            Skeleton::balanced(n_leaves)
        }
        TreeShape::Linear => Skeleton::linear(n_leaves),
        TreeShape::Moderate => Skeleton::uniform(n_leaves, rng),
    };
    let order = sk.post_order();
    let mut index = vec![0usize; sk.children.len()];
    for (new, &old) in order.iter().enumerate() {
        index[old] = new;
    }
    let mut nodes = Vec::with_capacity(order.len());
    let mut sums = Vec::with_capacity(order.len());
    for &old in &order {
        let (kind, sum) = match sk.children[old] {
            None => {
                let t = rng.gen_range(1..vocab_size);
                (NodeKind::Leaf { token: t }, t)
            }
            Some((l, r)) => {
                let (l, r) = (index[l], index[r]);
                (NodeKind::Internal { left: l, right: r }, sums[l] + sums[r])
            }
        };
        sums.push(sum % n_classes);
        nodes.push(TreeNode {
            label: sum % n_classes,
            kind,
        });
    }
    let n = nodes.len();
    Ok(TreeInstance {
        nodes,
        root: n - 1,
        topo_order: (0..n).collect(),
    })
}

/// `count` trees with labels balanced by construction of the random tokens.
pub fn synthetic_corpus<R: Rng + ?Sized>(
    shape: TreeShape,
    n_leaves: usize,
    count: usize,
    vocab_size: usize,
    n_classes: usize,
    rng: &mut R,
) -> Result<Vec<TreeInstance>, DataError> {
    (0..count)
        .map(|_| generate_synthetic(shape, n_leaves, vocab_size, n_classes, rng))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TreeStats {
    pub n_nodes: usize,
    pub n_leaves: usize,
    pub depth: usize,
    pub max_parallelism: usize,
}

pub fn tree_stats(t: &TreeInstance) -> TreeStats {
    let mut depth_of = vec![0usize; t.nodes.len()];
    let mut width: Vec<usize> = Vec::new();
    let mut stack = vec![t.root];
    let mut leaves = 0;
    while let Some(i) = stack.pop() {
        let d = depth_of[i];
        if width.len() <= d {
            width.resize(d + 1, 0);
        }
        width[d] += 1;
        match t.nodes[i].kind {
            NodeKind::Leaf { .. } => leaves += 1,
            NodeKind::Internal { left, right } => {
                depth_of[left] = d + 1;
                depth_of[right] = d + 1;
                stack.push(left);
                stack.push(right);
            }
        }
    }
    TreeStats {
        n_nodes: t.nodes.len(),
        n_leaves: leaves,
        depth: width.len() - 1,
        max_parallelism: width.iter().copied().max().unwrap_or(0),
    }
}

/// Parse a corpus text. Blank lines and `#` comments are skipped; errors
/// from all lines are reported together.
pub fn parse_corpus(text: &str, vocab: &mut Vocab, grow: bool) -> Result<Vec<TreeInstance>, DataError> {
    let mut trees = Vec::new();
    let mut errors = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let l = line.trim();
        if l.is_empty() || l.starts_with('#') {
            continue;
        }
        match parse_sexpr(l, vocab, grow) {
            Ok(t) => trees.push(t),
            Err(e) => errors.push((i + 1, e)),
        }
    }
    if errors.is_empty() {
        Ok(trees)
    } else {
        Err(DataError::Corpus(errors))
    }
}

pub fn load_corpus(path: &Path, vocab: &mut Vocab, grow: bool) -> Result<Vec<TreeInstance>, DataError> {
    let text = fs::read_to_string(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_corpus(&text, vocab, grow)
}

pub fn write_corpus(path: &Path, trees: &[TreeInstance], vocab: &Vocab) -> Result<(), DataError> {
    let mut text = String::new();
    for t in trees {
        text.push_str(&serialize(t, vocab));
        text.push('\n');
    }
    fs::write(path, text).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Deterministic shuffle helper for training order.
pub fn shuffled<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<usize> {
    let mut v: Vec<usize> = (0..n).collect();
    v.shuffle(rng);
    v
}

/// Path of the bundled sentiment mini-corpus.
pub fn bundled_corpus_path() -> std::path::PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("data/mini_sentiment.txt")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn smallest_tree() {
        let mut v = Vocab::new();
        let t = parse_sexpr("(1 good)", &mut v, true).unwrap();
        assert_eq!(t.len(), 1);
        assert_eq!(t.root_label(), 1);
        assert_eq!(v.id("good"), Some(1));
    }

    #[test]
    fn three_nodes_post_order() {
        let mut v = Vocab::new();
        let t = parse_sexpr("(0 (1 not) (1 good))", &mut v, true).unwrap();
        assert_eq!(t.len(), 3);
        assert_eq!(t.root, 2);
        assert_eq!(t.root_label(), 0);
        assert_eq!(t.topo_order, vec![0, 1, 2]);
        assert!(t.is_leaf(0) && t.is_leaf(1));
        t.validate().unwrap();
    }

    #[test]
    fn grammar_violations_report_offsets() {
        let mut v = Vocab::new();
        let e = parse_sexpr("(1 (1 a) b)", &mut v, true).unwrap_err();
        assert_eq!(e.offset, 9);
        assert!(parse_sexpr("(1 a b)", &mut v, true).is_err());
        assert!(parse_sexpr("(1 (0 a) (0 b) (0 c))", &mut v, true).is_err());
        assert!(parse_sexpr("(x a)", &mut v, true).unwrap_err().msg.contains("bad label"));
        assert!(parse_sexpr("(-1 a)", &mut v, true).is_err());
        assert!(parse_sexpr("(1 a", &mut v, true).is_err());
        assert!(parse_sexpr("(1 a))", &mut v, true).is_err());
        assert!(parse_sexpr("", &mut v, true).is_err());
    }

    #[test]
    fn frozen_vocab_maps_unknown_to_unk() {
        let mut v = Vocab::new();
        parse_sexpr("(1 (1 a) (0 b))", &mut v, true).unwrap();
        let t = parse_sexpr("(1 (1 a) (0 zzz))", &mut v, false).unwrap();
        assert_eq!(t.nodes[1].kind, NodeKind::Leaf { token: v.unk() });
        assert_eq!(v.len(), 3);
    }

    #[test]
    fn round_trip() {
        let mut v = Vocab::new();
        let line = "(0 (1 (0 a) (1 b)) (1 c))";
        let t = parse_sexpr(line, &mut v, true).unwrap();
        assert_eq!(serialize(&t, &v), line);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let sv = Vocab::synthetic(20);
        for shape in TreeShape::ALL {
            let leaves = if shape == TreeShape::Balanced { 8 } else { 7 };
            let t = generate_synthetic(shape, leaves, 20, 3, &mut rng).unwrap();
            let mut v2 = sv.clone();
            assert_eq!(parse_sexpr(&serialize(&t, &sv), &mut v2, false).unwrap(), t);
        }
    }

    #[test]
    fn synthetic_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = generate_synthetic(TreeShape::Balanced, 8, 10, 2, &mut rng).unwrap();
        assert_eq!(
            tree_stats(&b),
            TreeStats {
                n_nodes: 15,
                n_leaves: 8,
                depth: 3,
                max_parallelism: 8
            }
        );
        let l = generate_synthetic(TreeShape::Linear, 8, 10, 2, &mut rng).unwrap();
        assert_eq!(
            tree_stats(&l),
            TreeStats {
                n_nodes: 15,
                n_leaves: 8,
                depth: 7,
                max_parallelism: 2
            }
        );
        let one = generate_synthetic(TreeShape::Linear, 1, 10, 2, &mut rng).unwrap();
        assert_eq!(
            tree_stats(&one),
            TreeStats {
                n_nodes: 1,
                n_leaves: 1,
                depth: 0,
                max_parallelism: 1
            }
        );
        assert!(generate_synthetic(TreeShape::Balanced, 6, 10, 2, &mut rng).is_err());
        for t in [&b, &l, &one] {
            t.validate().unwrap();
        }
    }

    #[test]
    fn labels_follow_the_parity_rule() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let t = generate_synthetic(TreeShape::Moderate, 9, 50, 2, &mut rng).unwrap();
        fn sum(t: &TreeInstance, i: usize) -> usize {
            match t.nodes[i].kind {
                NodeKind::Leaf { token } => token,
                NodeKind::Internal { left, right } => sum(t, left) + sum(t, right),
            }
        }
        for i in 0..t.len() {
            assert_eq!(t.nodes[i].label, sum(&t, i) % 2);
        }
    }

    #[test]
    fn moderate_is_deterministic_and_between_extremes() {
        let a = generate_synthetic(TreeShape::Moderate, 8, 10, 2, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = generate_synthetic(TreeShape::Moderate, 8, 10, 2, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a, b);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut total = 0usize;
        for _ in 0..1000 {
            let t = generate_synthetic(TreeShape::Moderate, 8, 10, 2, &mut rng).unwrap();
            t.validate().unwrap();
            assert_eq!(t.len(), 15);
            total += tree_stats(&t).depth;
        }
        let mean = total as f64 / 1000.0;
        assert!(mean > 3.0 && mean < 7.0, "{mean}");
    }

    #[test]
    fn corpus_errors_name_lines() {
        let mut v = Vocab::new();
        let ok = parse_corpus("# c\n(1 a)\n\n(0 b)\n(1 (0 a) (1 b))\n", &mut v, true).unwrap();
        assert_eq!(ok.len(), 3);
        let err = parse_corpus("(1 a)\n(1 (1 a) b)\n(0 c)\n", &mut v, true).unwrap_err();
        match &err {
            DataError::Corpus(errs) => {
                assert_eq!(errs.len(), 1);
                assert_eq!(errs[0].0, 2);
            }
            other => panic!("{other}"),
        }
        assert!(err.to_string().starts_with("line 2:"));
    }

    #[test]
    fn bundled_corpus_loads() {
        let mut v = Vocab::new();
        let trees = load_corpus(&bundled_corpus_path(), &mut v, true).unwrap();
        assert!(trees.len() >= 150, "{}", trees.len());
        for t in &trees {
            t.validate().unwrap();
            assert!(t.nodes.iter().all(|n| n.label < 2));
        }
        let mut frozen = v.clone();
        let again = load_corpus(&bundled_corpus_path(), &mut frozen, false).unwrap();
        assert_eq!(trees, again);
    }
}
