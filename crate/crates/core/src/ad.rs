//! Reverse-mode automatic differentiation over dense matrices.
//!
//! A [`Graph`] is an append-only list of primitive operations. Leaves are
//! either named inputs (bound per evaluation through [`Bindings`]) or
//! constants. Shapes are inferred while the graph is built, so a shape error
//! is reported at the node that introduces it.
//!
//! Two differentiation routes exist:
//!
//! * [`Graph::backward`] propagates numeric cotangents through recorded values.
//! * [`Graph::gradient`] appends the adjoint computation to the graph itself,
//!   producing nodes that can be evaluated and differentiated again. The
//!   primitive set is closed under differentiation, so this never fails for a
//!   well-formed graph.
//!
//! Leaky-ReLU has derivative 1 at exactly zero. Its derivative mask
//! ([`Op::LeakyReluSlope`]) is treated as locally constant.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::{gemm, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub enum Op {
    Input(String),
    Const(Tensor),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    /// Elementwise product.
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId, f64),
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    /// Matrix plus a row vector added to every row.
    AddRow(NodeId, NodeId),
    Sum(NodeId),
    Mean(NodeId),
    /// Column sums: `r x c -> 1 x c`.
    SumRows(NodeId),
    /// Row sums: `r x c -> r x 1`.
    SumCols(NodeId),
    BroadcastScalar(NodeId, [usize; 2]),
    /// `1 x c -> r x c`.
    BroadcastRows(NodeId, usize),
    /// `r x 1 -> r x c`.
    BroadcastCols(NodeId, usize),
    Square(NodeId),
    Exp(NodeId),
    Log(NodeId),
    Recip(NodeId),
    Sigmoid(NodeId),
    Tanh(NodeId),
    Softplus(NodeId),
    LeakyRelu(NodeId, f64),
    /// Derivative of leaky-ReLU: 1 where the input is `>= 0`, the slope elsewhere.
    LeakyReluSlope(NodeId, f64),
    /// Column-wise concatenation.
    Concat(Vec<NodeId>),
    SliceCols {
        input: NodeId,
        start: usize,
        width: usize,
    },
    /// Embeds the input into zero columns: inverse layout of `SliceCols`.
    PadCols {
        input: NodeId,
        start: usize,
        total: usize,
    },
    /// Subtracts column means within consecutive blocks of `group` rows.
    GroupCenter(NodeId, usize),
    /// Identity in the forward pass; blocks gradients.
    StopGrad(NodeId),
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Input(_) => "input",
            Op::Const(_) => "const",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::MatMul(..) => "matmul",
            Op::Transpose(_) => "transpose",
            Op::AddRow(..) => "add_row",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::SumRows(_) => "sum_rows",
            Op::SumCols(_) => "sum_cols",
            Op::BroadcastScalar(..) => "broadcast_scalar",
            Op::BroadcastRows(..) => "broadcast_rows",
            Op::BroadcastCols(..) => "broadcast_cols",
            Op::Square(_) => "square",
            Op::Exp(_) => "exp",
            Op::Log(_) => "log",
            Op::Recip(_) => "recip",
            Op::Sigmoid(_) => "sigmoid",
            Op::Tanh(_) => "tanh",
            Op::Softplus(_) => "softplus",
            Op::LeakyRelu(..) => "leaky_relu",
            Op::LeakyReluSlope(..) => "leaky_relu_slope",
            Op::Concat(_) => "concat",
            Op::SliceCols { .. } => "slice_cols",
            Op::PadCols { .. } => "pad_cols",
            Op::GroupCenter(..) => "group_center",
            Op::StopGrad(_) => "stop_grad",
        }
    }

    pub fn parents(&self) -> Vec<NodeId> {
        match self {
            Op::Input(_) | Op::Const(_) => Vec::new(),
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::MatMul(a, b) | Op::AddRow(a, b) => {
                vec![*a, *b]
            }
            Op::Concat(parts) => parts.clone(),
            Op::Scale(a, _)
            | Op::AddScalar(a, _)
            | Op::Transpose(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::SumRows(a)
            | Op::SumCols(a)
            | Op::BroadcastScalar(a, _)
            | Op::BroadcastRows(a, _)
            | Op::BroadcastCols(a, _)
            | Op::Square(a)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Recip(a)
            | Op::Sigmoid(a)
            | Op::Tanh(a)
            | Op::Softplus(a)
            | Op::LeakyRelu(a, _)
            | Op::LeakyReluSlope(a, _)
            | Op::SliceCols { input: a, .. }
            | Op::PadCols { input: a, .. }
            | Op::GroupCenter(a, _)
            | Op::StopGrad(a) => vec![*a],
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    shape: [usize; 2],
}

#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Values for the input leaves of a graph.
#[derive(Clone, Debug, Default)]
pub struct Bindings {
    map: HashMap<NodeId, Tensor>,
}

impl Bindings {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn bind(&mut self, leaf: NodeId, value: Tensor) -> &mut Self {
        self.map.insert(leaf, value);
        self
    }

    pub fn get(&self, leaf: NodeId) -> Option<&Tensor> {
        self.map.get(&leaf)
    }
}

/// Forward values of every node, indexed by [`NodeId`].
#[derive(Clone, Debug)]
pub struct Values {
    vals: Vec<Tensor>,
}

impl Values {
    pub fn get(&self, id: NodeId) -> &Tensor {
        &self.vals[id.0]
    }

    pub fn len(&self) -> usize {
        self.vals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vals.is_empty()
    }
}

/// Gradients of a scalar root with respect to input leaves.
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    map: HashMap<NodeId, Tensor>,
}

impl Gradients {
    pub fn get(&self, leaf: NodeId) -> Option<&Tensor> {
        self.map.get(&leaf)
    }

    pub fn iter(&self) -> impl Iterator<Item = (NodeId, &Tensor)> {
        self.map.iter().map(|(k, v)| (*k, v))
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn op(&self, id: NodeId) -> &Op {
        &self.nodes[id.0].op
    }

    pub fn shape(&self, id: NodeId) -> [usize; 2] {
        self.nodes[id.0].shape
    }

    /// All input leaves in creation order.
    pub fn inputs(&self) -> Vec<NodeId> {
        self.nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| matches!(n.op, Op::Input(_)))
            .map(|(i, _)| NodeId(i))
            .collect()
    }

    fn describe(&self, id: NodeId) -> String {
        match &self.nodes[id.0].op {
            Op::Input(name) => format!("node {} (input '{}')", id.0, name),
            op => format!("node {} ({})", id.0, op.name()),
        }
    }

    fn push(&mut self, op: Op, shape: [usize; 2]) -> NodeId {
        debug_assert!(op.parents().iter().all(|p| p.0 < self.nodes.len()));
        self.nodes.push(Node { op, shape });
        NodeId(self.nodes.len() - 1)
    }

    fn check(&self, id: NodeId) -> Result<[usize; 2]> {
        self.nodes
            .get(id.0)
            .map(|n| n.shape)
            .ok_or_else(|| Error::Invalid(format!("node {} does not exist", id.0)))
    }

    fn mismatch(&self, op: &str, detail: String) -> Error {
        Error::shape(format!("node {} ({op})", self.nodes.len()), detail)
    }

    pub fn input(&mut self, name: impl Into<String>, rows: usize, cols: usize) -> NodeId {
        assert!(rows > 0 && cols > 0, "input extents must be positive");
        self.push(Op::Input(name.into()), [rows, cols])
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        let shape = value.shape();
        self.push(Op::Const(value), shape)
    }

    fn same_shape(&mut self, op: Op, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.check(a)?, self.check(b)?);
        if sa != sb {
            return Err(self.mismatch(op.name(), format!("{sa:?} vs {sb:?}")));
        }
        Ok(self.push(op, sa))
    }

    fn unary(&mut self, op: Op, a: NodeId) -> Result<NodeId> {
        let s = self.check(a)?;
        Ok(self.push(op, s))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(Op::Add(a, b), a, b)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(Op::Sub(a, b), a, b)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(Op::Mul(a, b), a, b)
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> Result<NodeId> {
        self.unary(Op::Scale(a, s), a)
    }

    pub fn add_scalar(&mut self, a: NodeId, s: f64) -> Result<NodeId> {
        self.unary(Op::AddScalar(a, s), a)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.check(a)?, self.check(b)?);
        if sa[1] != sb[0] {
            return Err(self.mismatch("matmul", format!("{sa:?} by {sb:?}")));
        }
        Ok(self.push(Op::MatMul(a, b), [sa[0], sb[1]]))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let s = self.check(a)?;
        Ok(self.push(Op::Transpose(a), [s[1], s[0]]))
    }

    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId> {
        let (sa, sr) = (self.check(a)?, self.check(row)?);
        if sr != [1, sa[1]] {
            return Err(self.mismatch("add_row", format!("row {sr:?} for matrix {sa:?}")));
        }
        Ok(self.push(Op::AddRow(a, row), sa))
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        self.check(a)?;
        Ok(self.push(Op::Sum(a), [1, 1]))
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        self.check(a)?;
        Ok(self.push(Op::Mean(a), [1, 1]))
    }

    pub fn sum_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let s = self.check(a)?;
        Ok(self.push(Op::SumRows(a), [1, s[1]]))
    }

    pub fn sum_cols(&mut self, a: NodeId) -> Result<NodeId> {
        let s = self.check(a)?;
        Ok(self.push(Op::SumCols(a), [s[0], 1]))
    }

    pub fn broadcast_scalar(&mut self, a: NodeId, rows: usize, cols: usize) -> Result<NodeId> {
        let s = self.check(a)?;
        if s != [1, 1] || rows == 0 || cols == 0 {
            return Err(self.mismatch("broadcast_scalar", format!("{s:?} to {rows}x{cols}")));
        }
        Ok(self.push(Op::BroadcastScalar(a, [rows, cols]), [rows, cols]))
    }

    pub fn broadcast_rows(&mut self, a: NodeId, rows: usize) -> Result<NodeId> {
        let s = self.check(a)?;
        if s[0] != 1 || rows == 0 {
            return Err(self.mismatch("broadcast_rows", format!("{s:?} to {rows} rows")));
        }
        Ok(self.push(Op::BroadcastRows(a, rows), [rows, s[1]]))
    }

    pub fn broadcast_cols(&mut self, a: NodeId, cols: usize) -> Result<NodeId> {
        let s = self.check(a)?;
        if s[1] != 1 || cols == 0 {
            return Err(self.mismatch("broadcast_cols", format!("{s:?} to {cols} columns")));
        }
        Ok(self.push(Op::BroadcastCols(a, cols), [s[0], cols]))
    }

    pub fn square(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(Op::Square(a), a)
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(Op::Exp(a), a)
    }

    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(Op::Log(a), a)
    }

    pub fn recip(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(Op::Recip(a), a)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(Op::Sigmoid(a), a)
    }

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(Op::Tanh(a), a)
    }

    pub fn softplus(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(Op::Softplus(a), a)
    }

    pub fn leaky_relu(&mut self, a: NodeId, slope: f64) -> Result<NodeId> {
        self.unary(Op::LeakyRelu(a, slope), a)
    }

    pub fn leaky_relu_slope(&mut self, a: NodeId, slope: f64) -> Result<NodeId> {
        self.unary(Op::LeakyReluSlope(a, slope), a)
    }

    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let Some(&first) = parts.first() else {
            return Err(self.mismatch("concat", "no operands".into()));
        };
        let rows = self.check(first)?[0];
        let mut cols = 0;
        for &p in parts {
            let s = self.check(p)?;
            if s[0] != rows {
                return Err(self.mismatch("concat", format!("row counts {rows} vs {}", s[0])));
            }
            cols += s[1];
        }
        Ok(self.push(Op::Concat(parts.to_vec()), [rows, cols]))
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, width: usize) -> Result<NodeId> {
        let s = self.check(a)?;
        if width == 0 || start + width > s[1] {
            return Err(self.mismatch(
                "slice_cols",
                format!("columns {start}..{} of {s:?}", start + width),
            ));
        }
        Ok(self.push(
            Op::SliceCols {
                input: a,
                start,
                width,
            },
            [s[0], width],
        ))
    }

    pub fn pad_cols(&mut self, a: NodeId, start: usize, total: usize) -> Result<NodeId> {
        let s = self.check(a)?;
        if start + s[1] > total {
            return Err(self.mismatch(
                "pad_cols",
                format!("{s:?} at column {start} exceeds width {total}"),
            ));
        }
        Ok(self.push(
            Op::PadCols {
                input: a,
                start,
                total,
            },
            [s[0], total],
        ))
    }

    pub fn group_center(&mut self, a: NodeId, group: usize) -> Result<NodeId> {
        let s = self.check(a)?;
        if group == 0 || s[0] % group != 0 {
            return Err(self.mismatch(
                "group_center",
                format!("{} rows not divisible into groups of {group}", s[0]),
            ));
        }
        Ok(self.push(Op::GroupCenter(a, group), s))
    }

    pub fn stop_grad(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(Op::StopGrad(a), a)
    }

    /// Evaluates every node. All input leaves must be bound with their declared shape.
    pub fn forward(&self, bindings: &Bindings) -> Result<Values> {
        let mut vals: Vec<Tensor> = Vec::with_capacity(self.nodes.len());
        for (i, node) in self.nodes.iter().enumerate() {
            let v = match &node.op {
                Op::Input(name) => {
                    let t = bindings
                        .get(NodeId(i))
                        .ok_or_else(|| Error::UnboundLeaf(format!("node {i} ('{name}')")))?;
                    if t.shape() != node.shape {
                        return Err(Error::shape(
                            self.describe(NodeId(i)),
                            format!("bound {:?}, declared {:?}", t.shape(), node.shape),
                        ));
                    }
                    t.clone()
                }
                op => eval_op(op, node.shape, &vals),
            };
            vals.push(v);
        }
        Ok(Values { vals })
    }

    fn require_scalar(&self, root: NodeId) -> Result<()> {
        let s = self.check(root)?;
        if s != [1, 1] {
            return Err(Error::NotScalar {
                node: root.0,
                rows: s[0],
                cols: s[1],
            });
        }
        Ok(())
    }

    /// Marks nodes in `0..=root` whose value depends on one of `leaves`
    /// through a differentiable path.
    fn dependency_mask(&self, root: NodeId, leaves: &[NodeId]) -> Vec<bool> {
        let mut mask = vec![false; root.0 + 1];
        for &l in leaves {
            if l.0 <= root.0 {
                mask[l.0] = true;
            }
        }
        for i in 0..=root.0 {
            if mask[i] {
                continue;
            }
            mask[i] = match &self.nodes[i].op {
                Op::Input(_) | Op::Const(_) | Op::StopGrad(_) | Op::LeakyReluSlope(..) => false,
                op => op.parents().iter().any(|p| mask[p.0]),
            };
        }
        mask
    }

    /// Gradient of a scalar root with respect to every input leaf.
    /// Leaves the root does not depend on receive zeros.
    pub fn backward(&self, values: &Values, root: NodeId) -> Result<Gradients> {
        let leaves = self.inputs();
        self.backward_wrt(values, root, &leaves)
    }

    /// Gradient of a scalar root with respect to the given leaves only.
    pub fn backward_wrt(&self, values: &Values, root: NodeId, leaves: &[NodeId]) -> Result<Gradients> {
        self.require_scalar(root)?;
        let mask = self.dependency_mask(root, leaves);
        let mut grads: Vec<Option<Tensor>> = vec![None; root.0 + 1];
        let mut out = Gradients::default();
        if mask[root.0] {
            grads[root.0] = Some(Tensor::scalar(1.0));
        }
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if let Op::Input(_) = node.op {
                out.map.insert(NodeId(i), g);
                continue;
            }
            for (p, contrib) in vjp(&node.op, node.shape, &g, values.get(NodeId(i)), values, &mask) {
                match &mut grads[p.0] {
                    Some(acc) => acc.add_assign(&contrib),
                    slot => *slot = Some(contrib),
                }
            }
        }
        for &l in leaves {
            out.map
                .entry(l)
                .or_insert_with(|| Tensor::zeros(self.nodes[l.0].shape[0], self.nodes[l.0].shape[1]));
        }
        Ok(out)
    }

    /// Appends nodes computing `d root / d leaf` for each leaf in `wrt` and
    /// returns them in the same order. The new nodes use only primitives of
    /// this graph and can be differentiated again.
    pub fn gradient(&mut self, root: NodeId, wrt: &[NodeId]) -> Result<Vec<NodeId>> {
        self.require_scalar(root)?;
        if wrt.is_empty() {
            return Err(Error::Invalid("gradient requested for no leaves".into()));
        }
        for &w in wrt {
            self.check(w)?;
        }
        let mask = self.dependency_mask(root, wrt);
        let mut grads: Vec<Option<NodeId>> = vec![None; root.0 + 1];
        if mask[root.0] {
            grads[root.0] = Some(self.constant(Tensor::scalar(1.0)));
        }
        let mut found: HashMap<NodeId, NodeId> = HashMap::new();
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i] else { continue };
            if wrt.contains(&NodeId(i)) {
                found.insert(NodeId(i), g);
            }
            let op = self.nodes[i].op.clone();
            let out = NodeId(i);
            let mut contribs: Vec<(NodeId, NodeId)> = Vec::new();
            let want = |p: &NodeId| mask[p.0];
            match op {
                Op::Input(_) | Op::Const(_) | Op::StopGrad(_) | Op::LeakyReluSlope(..) => {}
                Op::Add(a, b) => {
                    if want(&a) {
                        contribs.push((a, g));
                    }
                    if want(&b) {
                        contribs.push((b, g));
                    }
                }
                Op::Sub(a, b) => {
                    if want(&a) {
                        contribs.push((a, g));
                    }
                    if want(&b) {
                        contribs.push((b, self.scale(g, -1.0)?));
                    }
                }
                Op::Mul(a, b) => {
                    if want(&a) {
                        contribs.push((a, self.mul(g, b)?));
                    }
                    if want(&b) {
                        contribs.push((b, self.mul(g, a)?));
                    }
                }
                Op::Scale(a, s) => contribs.push((a, self.scale(g, s)?)),
                Op::AddScalar(a, _) => contribs.push((a, g)),
                Op::MatMul(a, b) => {
                    if want(&a) {
                        let bt = self.transpose(b)?;
                        contribs.push((a, self.matmul(g, bt)?));
                    }
                    if want(&b) {
                        let at = self.transpose(a)?;
                        contribs.push((b, self.matmul(at, g)?));
                    }
                }
                Op::Transpose(a) => contribs.push((a, self.transpose(g)?)),
                Op::AddRow(a, r) => {
                    if want(&a) {
                        contribs.push((a, g));
                    }
                    if want(&r) {
                        contribs.push((r, self.sum_rows(g)?));
                    }
                }
                Op::Sum(a) => {
                    let [r, c] = self.shape(a);
                    contribs.push((a, self.broadcast_scalar(g, r, c)?));
                }
                Op::Mean(a) => {
                    let [r, c] = self.shape(a);
                    let b = self.broadcast_scalar(g, r, c)?;
                    contribs.push((a, self.scale(b, 1.0 / (r * c) as f64)?));
                }
                Op::SumRows(a) => {
                    let r = self.shape(a)[0];
                    contribs.push((a, self.broadcast_rows(g, r)?));
                }
                Op::SumCols(a) => {
                    let c = self.shape(a)[1];
                    contribs.push((a, self.broadcast_cols(g, c)?));
                }
                Op::BroadcastScalar(a, _) => contribs.push((a, self.sum(g)?)),
                Op::BroadcastRows(a, _) => contribs.push((a, self.sum_rows(g)?)),
                Op::BroadcastCols(a, _) => contribs.push((a, self.sum_cols(g)?)),
                Op::Square(a) => {
                    let ga = self.mul(g, a)?;
                    contribs.push((a, self.scale(ga, 2.0)?));
                }
                Op::Exp(a) => contribs.push((a, self.mul(g, out)?)),
                Op::Log(a) => {
                    let inv = self.recip(a)?;
                    contribs.push((a, self.mul(g, inv)?));
                }
                Op::Recip(a) => {
                    let sq = self.square(out)?;
                    let gs = self.mul(g, sq)?;
                    contribs.push((a, self.scale(gs, -1.0)?));
                }
                Op::Sigmoid(a) => {
                    let neg = self.scale(out, -1.0)?;
                    let one_minus = self.add_scalar(neg, 1.0)?;
                    let d = self.mul(out, one_minus)?;
                    contribs.push((a, self.mul(g, d)?));
                }
                Op::Tanh(a) => {
                    let sq = self.square(out)?;
                    let neg = self.scale(sq, -1.0)?;
                    let d = self.add_scalar(neg, 1.0)?;
                    contribs.push((a, self.mul(g, d)?));
                }
                Op::Softplus(a) => {
                    let d = self.sigmoid(a)?;
                    contribs.push((a, self.mul(g, d)?));
                }
                Op::LeakyRelu(a, slope) => {
                    let d = self.leaky_relu_slope(a, slope)?;
                    contribs.push((a, self.mul(g, d)?));
                }
                Op::Concat(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let w = self.shape(p)[1];
                        if want(&p) {
                            contribs.push((p, self.slice_cols(g, offset, w)?));
                        }
                        offset += w;
                    }
                }
                Op::SliceCols { input, start, .. } => {
                    let total = self.shape(input)[1];
                    contribs.push((input, self.pad_cols(g, start, total)?));
                }
                Op::PadCols { input, start, .. } => {
                    let w = self.shape(input)[1];
                    contribs.push((input, self.slice_cols(g, start, w)?));
                }
                Op::GroupCenter(a, group) => contribs.push((a, self.group_center(g, group)?)),
            }
            for (p, c) in contribs {
                if !mask[p.0] {
                    continue;
                }
                grads[p.0] = Some(match grads[p.0] {
                    Some(acc) => self.add(acc, c)?,
                    None => c,
                });
            }
        }
        let mut result = Vec::with_capacity(wrt.len());
        for &w in wrt {
            let id = match found.get(&w) {
                Some(&id) => id,
                None => {
                    let [r, c] = self.shape(w);
                    self.constant(Tensor::zeros(r, c))
                }
            };
            result.push(id);
        }
        Ok(result)
    }
}

/// Copies `graph` and appends the symbolic gradient of `root` with respect to `wrt`.
pub fn grad_graph(graph: &Graph, root: NodeId, wrt: &[NodeId]) -> Result<(Graph, Vec<NodeId>)> {
    let mut g = graph.clone();
    let ids = g.gradient(root, wrt)?;
    Ok((g, ids))
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus(v: f64) -> f64 {
    v.max(0.0) + (-v.abs()).exp().ln_1p()
}

fn leaky(v: f64, slope: f64) -> f64 {
    if v >= 0.0 {
        v
    } else {
        slope * v
    }
}

fn leaky_slope(v: f64, slope: f64) -> f64 {
    if v >= 0.0 {
        1.0
    } else {
        slope
    }
}

fn sum_rows(t: &Tensor) -> Tensor {
    let mut out = Tensor::zeros(1, t.cols());
    for r in 0..t.rows() {
        for (o, v) in out.data_mut().iter_mut().zip(t.row(r)) {
            *o += v;
        }
    }
    out
}

fn sum_cols(t: &Tensor) -> Tensor {
    Tensor::from_fn(t.rows(), 1, |r, _| t.row(r).iter().sum())
}

fn broadcast_rows(t: &Tensor, rows: usize) -> Tensor {
    t.repeat_rows(rows)
}

fn broadcast_cols(t: &Tensor, cols: usize) -> Tensor {
    Tensor::from_fn(t.rows(), cols, |r, _| t.get(r, 0))
}

fn pad_cols(t: &Tensor, start: usize, total: usize) -> Tensor {
    let mut out = Tensor::zeros(t.rows(), total);
    for r in 0..t.rows() {
        for c in 0..t.cols() {
            out.set(r, start + c, t.get(r, c));
        }
    }
    out
}

fn group_center(t: &Tensor, group: usize) -> Tensor {
    let mut out = t.clone();
    let cols = t.cols();
    for block in 0..t.rows() / group {
        for c in 0..cols {
            let mean = (0..group).map(|k| t.get(block * group + k, c)).sum::<f64>() / group as f64;
            for k in 0..group {
                let r = block * group + k;
                out.set(r, c, t.get(r, c) - mean);
            }
        }
    }
    out
}

fn eval_op(op: &Op, shape: [usize; 2], vals: &[Tensor]) -> Tensor {
    let v = |id: &NodeId| &vals[id.0];
    match op {
        Op::Input(_) => unreachable!("inputs are bound, not evaluated"),
        Op::Const(t) => t.clone(),
        Op::Add(a, b) => v(a).zip(v(b), |x, y| x + y),
        Op::Sub(a, b) => v(a).zip(v(b), |x, y| x - y),
        Op::Mul(a, b) => v(a).zip(v(b), |x, y| x * y),
        Op::Scale(a, s) => v(a).scale(*s),
        Op::AddScalar(a, s) => v(a).map(|x| x + s),
        Op::MatMul(a, b) => gemm(v(a), false, v(b), false),
        Op::Transpose(a) => v(a).transpose(),
        Op::AddRow(a, r) => {
            let mut out = v(a).clone();
            let row = v(r).data();
            let cols = out.cols();
            for chunk in out.data_mut().chunks_mut(cols) {
                for (o, b) in chunk.iter_mut().zip(row) {
                    *o += b;
                }
            }
            out
        }
        Op::Sum(a) => Tensor::scalar(v(a).sum()),
        Op::Mean(a) => Tensor::scalar(v(a).mean()),
        Op::SumRows(a) => sum_rows(v(a)),
        Op::SumCols(a) => sum_cols(v(a)),
        Op::BroadcastScalar(a, [r, c]) => Tensor::full(*r, *c, v(a).item()),
        Op::BroadcastRows(a, r) => broadcast_rows(v(a), *r),
        Op::BroadcastCols(a, c) => broadcast_cols(v(a), *c),
        Op::Square(a) => v(a).map(|x| x * x),
        Op::Exp(a) => v(a).map(f64::exp),
        Op::Log(a) => v(a).map(f64::ln),
        Op::Recip(a) => v(a).map(|x| 1.0 / x),
        Op::Sigmoid(a) => v(a).map(sigmoid),
        Op::Tanh(a) => v(a).map(f64::tanh),
        Op::Softplus(a) => v(a).map(softplus),
        Op::LeakyRelu(a, s) => v(a).map(|x| leaky(x, *s)),
        Op::LeakyReluSlope(a, s) => v(a).map(|x| leaky_slope(x, *s)),
        Op::Concat(parts) => {
            let refs: Vec<&Tensor> = parts.iter().map(v).collect();
            Tensor::hcat(&refs).expect("concat shapes checked at construction")
        }
        Op::SliceCols { input, start, width } => v(input).slice_cols(*start, *width),
        Op::PadCols { input, start, total } => pad_cols(v(input), *start, *total),
        Op::GroupCenter(a, group) => group_center(v(a), *group),
        Op::StopGrad(a) => {
            debug_assert_eq!(v(a).shape(), shape);
            v(a).clone()
        }
    }
}

/// Numeric vector-Jacobian products for the parents of one node that need a gradient.
fn vjp(op: &Op, shape: [usize; 2], g: &Tensor, out: &Tensor, values: &Values, mask: &[bool]) -> Vec<(NodeId, Tensor)> {
    let v = |id: &NodeId| values.get(*id);
    let want = |id: &NodeId| mask[id.0];
    let mut res = Vec::with_capacity(2);
    match op {
        Op::Input(_) | Op::Const(_) | Op::StopGrad(_) | Op::LeakyReluSlope(..) => {}
        Op::Add(a, b) => {
            if want(a) {
                res.push((*a, g.clone()));
            }
            if want(b) {
                res.push((*b, g.clone()));
            }
        }
        Op::Sub(a, b) => {
            if want(a) {
                res.push((*a, g.clone()));
            }
            if want(b) {
                res.push((*b, g.scale(-1.0)));
            }
        }
        Op::Mul(a, b) => {
            if want(a) {
                res.push((*a, g.zip(v(b), |x, y| x * y)));
            }
            if want(b) {
                res.push((*b, g.zip(v(a), |x, y| x * y)));
            }
        }
        Op::Scale(a, s) => res.push((*a, g.scale(*s))),
        Op::AddScalar(a, _) => res.push((*a, g.clone())),
        Op::MatMul(a, b) => {
            if want(a) {
                res.push((*a, gemm(g, false, v(b), true)));
            }
            if want(b) {
                res.push((*b, gemm(v(a), true, g, false)));
            }
        }
        Op::Transpose(a) => res.push((*a, g.transpose())),
        Op::AddRow(a, r) => {
            if want(a) {
                res.push((*a, g.clone()));
            }
            if want(r) {
                res.push((*r, sum_rows(g)));
            }
        }
        Op::Sum(a) => {
            let [r, c] = v(a).shape();
            res.push((*a, Tensor::full(r, c, g.item())));
        }
        Op::Mean(a) => {
            let [r, c] = v(a).shape();
            res.push((*a, Tensor::full(r, c, g.item() / (r * c) as f64)));
        }
        Op::SumRows(a) => res.push((*a, broadcast_rows(g, v(a).rows()))),
        Op::SumCols(a) => res.push((*a, broadcast_cols(g, v(a).cols()))),
        Op::BroadcastScalar(a, _) => res.push((*a, Tensor::scalar(g.sum()))),
        Op::BroadcastRows(a, _) => res.push((*a, sum_rows(g))),
        Op::BroadcastCols(a, _) => res.push((*a, sum_cols(g))),
        Op::Square(a) => res.push((*a, g.zip(v(a), |x, y| 2.0 * x * y))),
        Op::Exp(a) => res.push((*a, g.zip(out, |x, y| x * y))),
        Op::Log(a) => res.push((*a, g.zip(v(a), |x, y| x / y))),
        Op::Recip(a) => res.push((*a, g.zip(out, |x, y| -x * y * y))),
        Op::Sigmoid(a) => res.push((*a, g.zip(out, |x, s| x * s * (1.0 - s)))),
        Op::Tanh(a) => res.push((*a, g.zip(out, |x, t| x * (1.0 - t * t)))),
        Op::Softplus(a) => res.push((*a, g.zip(v(a), |x, y| x * sigmoid(y)))),
        Op::LeakyRelu(a, s) => res.push((*a, g.zip(v(a), |x, y| x * leaky_slope(y, *s)))),
        Op::Concat(parts) => {
            let mut offset = 0;
            for p in parts {
                let w = v(p).cols();
                if want(p) {
                    res.push((*p, g.slice_cols(offset, w)));
                }
                offset += w;
            }
        }
        Op::SliceCols { input, start, .. } => res.push((*input, pad_cols(g, *start, v(input).cols()))),
        Op::PadCols { input, start, .. } => res.push((*input, g.slice_cols(*start, v(input).cols()))),
        Op::GroupCenter(a, group) => res.push((*a, group_center(g, *group))),
    }
    debug_assert!(res.iter().all(|(p, t)| t.shape() == values.get(*p).shape()), "vjp shape for {shape:?}");
    res.retain(|(p, _)| want(p));
    res
}
