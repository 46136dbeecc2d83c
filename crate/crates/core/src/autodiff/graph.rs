use crate::error::{Error, Result};

use super::tensor::{ParamId, ParamStore};

/// Lower and upper clamp applied to a score before taking logs.
pub const BCE_CLAMP: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub usize);

/// Operation tags of the compute graph.
#[derive(Clone, Debug)]
pub enum Op {
    Input,
    Param(ParamId),
    MatVec { w: NodeId, x: NodeId },
    AddBias { x: NodeId, b: NodeId },
    Relu(NodeId),
    Sigmoid(NodeId),
    Hadamard(NodeId, NodeId),
    Concat(Vec<NodeId>),
    Abs(NodeId),
    /// `max(0, a - b)` elementwise.
    ReluOfDiff(NodeId, NodeId),
    Square(NodeId),
    /// Mean over every entry of the listed nodes; a scalar.
    Mean(Vec<NodeId>),
    /// Binary cross-entropy of a scalar score against a fixed label.
    Bce { s: NodeId, label: f64 },
    /// Weighted sum of rows of an embedding parameter.
    EmbedBag {
        table: ParamId,
        bag: Vec<(usize, f64)>,
    },
}

impl Op {
    fn tag(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Param(_) => "param",
            Op::MatVec { .. } => "matvec",
            Op::AddBias { .. } => "add_bias",
            Op::Relu(_) => "relu",
            Op::Sigmoid(_) => "sigmoid",
            Op::Hadamard(..) => "hadamard",
            Op::Concat(_) => "concat",
            Op::Abs(_) => "abs",
            Op::ReluOfDiff(..) => "relu_of_diff",
            Op::Square(_) => "square",
            Op::Mean(_) => "mean",
            Op::Bce { .. } => "bce",
            Op::EmbedBag { .. } => "embed_bag",
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    rows: usize,
    cols: usize,
    /// Cached forward value. Empty for parameter nodes, which read the store.
    value: Vec<f64>,
    bound: bool,
}

impl Node {
    fn len(&self) -> usize {
        self.rows * self.cols
    }
}

/// Define-then-run reverse-mode graph over dense `f64` vectors.
///
/// Nodes are appended after their parents, so creation order is a
/// topological order and backward walks it in reverse.
#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    evaluated: bool,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Binary cross-entropy with the score clamped to `[1e-12, 1 - 1e-12]`.
pub fn bce(s: f64, y: f64) -> f64 {
    let s = s.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
    -(y * s.ln() + (1.0 - y) * (1.0 - s).ln())
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

    fn name(&self, id: NodeId) -> String {
        format!("{}#{}", self.nodes[id.0].op.tag(), id.0)
    }

    fn push(&mut self, op: Op, rows: usize, cols: usize) -> NodeId {
        self.evaluated = false;
        self.nodes.push(Node {
            op,
            rows,
            cols,
            value: Vec::new(),
            bound: false,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn shape_err(&self, op: &str, message: String) -> Error {
        Error::Shape {
            node: format!("{op}#{}", self.nodes.len()),
            message,
        }
    }

    fn vec_len(&self, id: NodeId, op: &str) -> Result<usize> {
        let n = &self.nodes[id.0];
        if n.cols != 1 {
            return Err(self.shape_err(
                op,
                format!("operand {} is a {}x{} matrix, expected a vector", self.name(id), n.rows, n.cols),
            ));
        }
        Ok(n.rows)
    }

    /// An input vector bound to `value`.
    pub fn input(&mut self, value: Vec<f64>) -> NodeId {
        let len = value.len();
        let id = self.push(Op::Input, len, 1);
        self.nodes[id.0].value = value;
        self.nodes[id.0].bound = true;
        id
    }

    /// An input vector of length `len` to be bound later with [`Graph::set_input`].
    pub fn placeholder(&mut self, len: usize) -> NodeId {
        self.push(Op::Input, len, 1)
    }

    pub fn set_input(&mut self, id: NodeId, value: Vec<f64>) -> Result<()> {
        let node = &self.nodes[id.0];
        if !matches!(node.op, Op::Input) {
            return Err(Error::State(format!("{} is not an input", self.name(id))));
        }
        if node.len() != value.len() {
            return Err(Error::Shape {
                node: self.name(id),
                message: format!("bound {} values, expected {}", value.len(), node.len()),
            });
        }
        self.evaluated = false;
        let node = &mut self.nodes[id.0];
        node.value = value;
        node.bound = true;
        Ok(())
    }

    pub fn param<S: ParamStore + ?Sized>(&mut self, store: &S, id: ParamId) -> NodeId {
        let (r, c) = store.param(id).value.shape();
        self.push(Op::Param(id), r, c)
    }

    pub fn matvec(&mut self, w: NodeId, x: NodeId) -> Result<NodeId> {
        let (r, c) = (self.nodes[w.0].rows, self.nodes[w.0].cols);
        let xl = self.vec_len(x, "matvec")?;
        if c != xl {
            return Err(self.shape_err(
                "matvec",
                format!("{} is {r}x{c} but {} has length {xl}", self.name(w), self.name(x)),
            ));
        }
        Ok(self.push(Op::MatVec { w, x }, r, 1))
    }

    pub fn add_bias(&mut self, x: NodeId, b: NodeId) -> Result<NodeId> {
        let n = self.same_len(x, b, "add_bias")?;
        Ok(self.push(Op::AddBias { x, b }, n, 1))
    }

    /// `w * x + b`.
    pub fn affine(&mut self, w: NodeId, x: NodeId, b: NodeId) -> Result<NodeId> {
        let wx = self.matvec(w, x)?;
        self.add_bias(wx, b)
    }

    fn same_len(&self, a: NodeId, b: NodeId, op: &str) -> Result<usize> {
        let la = self.vec_len(a, op)?;
        let lb = self.vec_len(b, op)?;
        if la != lb {
            return Err(self.shape_err(
                op,
                format!("{} has length {la} but {} has length {lb}", self.name(a), self.name(b)),
            ));
        }
        Ok(la)
    }

    fn unary(&mut self, x: NodeId, op: Op) -> Result<NodeId> {
        let n = self.vec_len(x, op.tag())?;
        Ok(self.push(op, n, 1))
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(x, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(x, Op::Sigmoid(x))
    }

    pub fn abs(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(x, Op::Abs(x))
    }

    pub fn square(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(x, Op::Square(x))
    }

    pub fn hadamard(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let n = self.same_len(a, b, "hadamard")?;
        Ok(self.push(Op::Hadamard(a, b), n, 1))
    }

    pub fn relu_of_diff(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let n = self.same_len(a, b, "relu_of_diff")?;
        Ok(self.push(Op::ReluOfDiff(a, b), n, 1))
    }

    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.len() == 1 {
            return Ok(parts[0]);
        }
        let mut n = 0;
        for &p in parts {
            n += self.vec_len(p, "concat")?;
        }
        Ok(self.push(Op::Concat(parts.to_vec()), n, 1))
    }

    pub fn mean(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let total: usize = parts.iter().map(|p| self.nodes[p.0].len()).sum();
        if total == 0 {
            return Err(self.shape_err("mean", "mean over zero entries".into()));
        }
        Ok(self.push(Op::Mean(parts.to_vec()), 1, 1))
    }

    pub fn bce(&mut self, s: NodeId, label: f64) -> Result<NodeId> {
        if self.vec_len(s, "bce")? != 1 {
            return Err(self.shape_err("bce", format!("{} is not a scalar", self.name(s))));
        }
        Ok(self.push(Op::Bce { s, label }, 1, 1))
    }

    pub fn embed_bag<S: ParamStore + ?Sized>(
        &mut self,
        store: &S,
        table: ParamId,
        bag: Vec<(usize, f64)>,
    ) -> Result<NodeId> {
        let (rows, d) = store.param(table).value.shape();
        if let Some(&(r, _)) = bag.iter().find(|(r, _)| *r >= rows) {
            return Err(self.shape_err(
                "embed_bag",
                format!("row {r} out of range for table '{}' with {rows} rows", store.param(table).name),
            ));
        }
        Ok(self.push(Op::EmbedBag { table, bag }, d, 1))
    }

    /// Forward value of a node. Parameter nodes are read from `store`.
    pub fn value<'a, S: ParamStore + ?Sized>(&'a self, store: &'a S, id: NodeId) -> &'a [f64] {
        match self.nodes[id.0].op {
            Op::Param(p) => store.param(p).value.data(),
            _ => &self.nodes[id.0].value,
        }
    }

    pub fn scalar(&self, id: NodeId) -> Result<f64> {
        if !self.evaluated {
            return Err(Error::State("graph has not been evaluated".into()));
        }
        let v = &self.nodes[id.0].value;
        match v.as_slice() {
            [x] => Ok(*x),
            _ => Err(Error::Shape {
                node: self.name(id),
                message: format!("expected a scalar, found {} values", v.len()),
            }),
        }
    }

    pub fn is_evaluated(&self) -> bool {
        self.evaluated
    }

    /// Compute and cache every node value.
    pub fn forward<S: ParamStore + ?Sized>(&mut self, store: &S) -> Result<()> {
        for i in 0..self.nodes.len() {
            let out = self.eval_node(store, i)?;
            if let Some(out) = out {
                self.nodes[i].value = out;
            }
        }
        self.evaluated = true;
        Ok(())
    }

    fn eval_node<S: ParamStore + ?Sized>(&self, store: &S, i: usize) -> Result<Option<Vec<f64>>> {
        let node = &self.nodes[i];
        let val = |id: NodeId| self.value(store, id);
        let out = match &node.op {
            Op::Input => {
                if !node.bound {
                    return Err(Error::State(format!("{} is not bound", self.name(NodeId(i)))));
                }
                return Ok(None);
            }
            Op::Param(p) => {
                let shape = store.param(*p).value.shape();
                if shape != (node.rows, node.cols) {
                    return Err(Error::Shape {
                        node: self.name(NodeId(i)),
                        message: format!(
                            "parameter '{}' is {:?}, graph expects {:?}",
                            store.param(*p).name,
                            shape,
                            (node.rows, node.cols)
                        ),
                    });
                }
                return Ok(None);
            }
            Op::MatVec { w, x } => {
                let cols = self.nodes[w.0].cols;
                let wv = val(*w);
                let xv = val(*x);
                wv.chunks_exact(cols)
                    .map(|row| row.iter().zip(xv).map(|(a, b)| a * b).sum())
                    .collect()
            }
            Op::AddBias { x, b } => val(*x).iter().zip(val(*b)).map(|(a, b)| a + b).collect(),
            Op::Relu(x) => val(*x).iter().map(|&v| v.max(0.0)).collect(),
            Op::Sigmoid(x) => val(*x).iter().map(|&v| sigmoid(v)).collect(),
            Op::Hadamard(a, b) => val(*a).iter().zip(val(*b)).map(|(a, b)| a * b).collect(),
            Op::Concat(parts) => {
                let mut out = Vec::with_capacity(node.rows);
                for p in parts {
                    out.extend_from_slice(val(*p));
                }
                out
            }
            Op::Abs(x) => val(*x).iter().map(|v| v.abs()).collect(),
            Op::ReluOfDiff(a, b) => val(*a)
                .iter()
                .zip(val(*b))
                .map(|(a, b)| (a - b).max(0.0))
                .collect(),
            Op::Square(x) => val(*x).iter().map(|v| v * v).collect(),
            Op::Mean(parts) => {
                let mut sum = 0.0;
                let mut n = 0usize;
                for p in parts {
                    let v = val(*p);
                    sum += v.iter().sum::<f64>();
                    n += v.len();
                }
                vec![sum / n as f64]
            }
            Op::Bce { s, label } => vec![bce(val(*s)[0], *label)],
            Op::EmbedBag { table, bag } => {
                let t = &store.param(*table).value;
                let mut out = vec![0.0; t.cols()];
                for &(r, w) in bag {
                    for (o, e) in out.iter_mut().zip(t.row(r)) {
                        *o += w * e;
                    }
                }
                out
            }
        };
        Ok(Some(out))
    }

    /// Parameters referenced by the graph, in first-use order.
    pub fn params(&self) -> Vec<ParamId> {
        let mut seen = Vec::new();
        for n in &self.nodes {
            let p = match &n.op {
                Op::Param(p) => *p,
                Op::EmbedBag { table, .. } => *table,
                _ => continue,
            };
            if !seen.contains(&p) {
                seen.push(p);
            }
        }
        seen
    }

    /// Backpropagate from scalar node `output` seeded with `seed`.
    ///
    /// Gradients of every referenced parameter are zeroed first, then
    /// filled with d(seed * output)/d(param).
    pub fn backward<S: ParamStore + ?Sized>(&self, store: &mut S, output: NodeId, seed: f64) -> Result<()> {
        if !self.evaluated {
            return Err(Error::State("backward called before forward".into()));
        }
        if self.nodes[output.0].len() != 1 {
            return Err(Error::Shape {
                node: self.name(output),
                message: "backward requires a scalar output".into(),
            });
        }
        for p in self.params() {
            store.param_mut(p).zero_grad();
        }
        let mut grads: Vec<Vec<f64>> = vec![Vec::new(); self.nodes.len()];
        grads[output.0] = vec![seed];

        for i in (0..=output.0).rev() {
            if grads[i].is_empty() {
                continue;
            }
            let g = std::mem::take(&mut grads[i]);
            let node = &self.nodes[i];
            match &node.op {
                Op::Input => {}
                Op::Param(p) => {
                    let pg = store.param_mut(*p).grad.data_mut();
                    for (a, b) in pg.iter_mut().zip(&g) {
                        *a += b;
                    }
                }
                Op::MatVec { w, x } => {
                    let cols = self.nodes[w.0].cols;
                    let xv = self.value(&*store, *x).to_vec();
                    let mut dx = vec![0.0; cols];
                    {
                        let wv = self.value(&*store, *w);
                        for (row, gr) in wv.chunks_exact(cols).zip(&g) {
                            if *gr != 0.0 {
                                for (d, wrc) in dx.iter_mut().zip(row) {
                                    *d += wrc * gr;
                                }
                            }
                        }
                    }
                    let mut dw = WeightGrad::new(self, &mut grads, store, *w);
                    for (r, gr) in g.iter().enumerate() {
                        if *gr != 0.0 {
                            let row = dw.row_mut(r, cols);
                            for (d, xc) in row.iter_mut().zip(&xv) {
                                *d += gr * xc;
                            }
                        }
                    }
                    drop(dw);
                    self.accumulate(&mut grads, store, *x, &dx);
                }
                Op::AddBias { x, b } => {
                    self.accumulate(&mut grads, store, *x, &g);
                    self.accumulate(&mut grads, store, *b, &g);
                }
                Op::Relu(x) => {
                    let d: Vec<f64> = self
                        .value(&*store, *x)
                        .iter()
                        .zip(&g)
                        .map(|(v, g)| if *v > 0.0 { *g } else { 0.0 })
                        .collect();
                    self.accumulate(&mut grads, store, *x, &d);
                }
                Op::Sigmoid(x) => {
                    let d: Vec<f64> = node
                        .value
                        .iter()
                        .zip(&g)
                        .map(|(s, g)| g * s * (1.0 - s))
                        .collect();
                    self.accumulate(&mut grads, store, *x, &d);
                }
                Op::Hadamard(a, b) => {
                    let av = self.value(&*store, *a).to_vec();
                    let bv = self.value(&*store, *b).to_vec();
                    let da: Vec<f64> = g.iter().zip(&bv).map(|(g, b)| g * b).collect();
                    let db: Vec<f64> = g.iter().zip(&av).map(|(g, a)| g * a).collect();
                    self.accumulate(&mut grads, store, *a, &da);
                    self.accumulate(&mut grads, store, *b, &db);
                }
                Op::Concat(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let n = self.nodes[p.0].len();
                        self.accumulate(&mut grads, store, *p, &g[off..off + n]);
                        off += n;
                    }
                }
                Op::Abs(x) => {
                    let d: Vec<f64> = self
                        .value(&*store, *x)
                        .iter()
                        .zip(&g)
                        .map(|(v, g)| {
                            if *v > 0.0 {
                                *g
                            } else if *v < 0.0 {
                                -g
                            } else {
                                0.0
                            }
                        })
                        .collect();
                    self.accumulate(&mut grads, store, *x, &d);
                }
                Op::ReluOfDiff(a, b) => {
                    let av = self.value(&*store, *a);
                    let bv = self.value(&*store, *b);
                    let da: Vec<f64> = av
                        .iter()
                        .zip(bv)
                        .zip(&g)
                        .map(|((a, b), g)| if a - b > 0.0 { *g } else { 0.0 })
                        .collect();
                    let db: Vec<f64> = da.iter().map(|v| -v).collect();
                    self.accumulate(&mut grads, store, *a, &da);
                    self.accumulate(&mut grads, store, *b, &db);
                }
                Op::Square(x) => {
                    let d: Vec<f64> = self
                        .value(&*store, *x)
                        .iter()
                        .zip(&g)
                        .map(|(v, g)| 2.0 * v * g)
                        .collect();
                    self.accumulate(&mut grads, store, *x, &d);
                }
                Op::Mean(parts) => {
                    let n: usize = parts.iter().map(|p| self.nodes[p.0].len()).sum();
                    let share = g[0] / n as f64;
                    for p in parts {
                        let d = vec![share; self.nodes[p.0].len()];
                        self.accumulate(&mut grads, store, *p, &d);
                    }
                }
                Op::Bce { s, label } => {
                    let sv = self.value(&*store, *s)[0];
                    let d = if (BCE_CLAMP..=1.0 - BCE_CLAMP).contains(&sv) {
                        -label / sv + (1.0 - label) / (1.0 - sv)
                    } else {
                        0.0
                    };
                    self.accumulate(&mut grads, store, *s, &[g[0] * d]);
                }
                Op::EmbedBag { table, bag } => {
                    let t = &mut store.param_mut(*table).grad;
                    for &(r, w) in bag {
                        for (d, gi) in t.row_mut(r).iter_mut().zip(&g) {
                            *d += w * gi;
                        }
                    }
                }
            }
        }
        Ok(())
    }

    fn accumulate<S: ParamStore + ?Sized>(&self, grads: &mut [Vec<f64>], store: &mut S, id: NodeId, d: &[f64]) {
        match self.nodes[id.0].op {
            Op::Param(p) => {
                for (a, b) in store.param_mut(p).grad.data_mut().iter_mut().zip(d) {
                    *a += b;
                }
            }
            _ => {
                let slot = &mut grads[id.0];
                if slot.is_empty() {
                    *slot = d.to_vec();
                } else {
                    for (a, b) in slot.iter_mut().zip(d) {
                        *a += b;
                    }
                }
            }
        }
    }
}

/// Destination for a weight-matrix gradient: either the parameter's own
/// accumulator or the pending gradient of an intermediate node.
enum WeightGrad<'a> {
    Param(&'a mut [f64]),
    Node(&'a mut Vec<f64>),
}

impl<'a> WeightGrad<'a> {
    fn new<S: ParamStore + ?Sized>(
        graph: &Graph,
        grads: &'a mut [Vec<f64>],
        store: &'a mut S,
        w: NodeId,
    ) -> Self {
        match graph.nodes[w.0].op {
            Op::Param(p) => WeightGrad::Param(store.param_mut(p).grad.data_mut()),
            _ => {
                let slot = &mut grads[w.0];
                if slot.is_empty() {
                    *slot = vec![0.0; graph.nodes[w.0].len()];
                }
                WeightGrad::Node(slot)
            }
        }
    }

    fn row_mut(&mut self, r: usize, cols: usize) -> &mut [f64] {
        match self {
            WeightGrad::Param(s) => &mut s[r * cols..(r + 1) * cols],
            WeightGrad::Node(v) => &mut v[r * cols..(r + 1) * cols],
        }
    }
}
