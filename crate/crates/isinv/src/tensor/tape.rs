use super::Tensor;
use crate::{Error, Result};

/// Handle to a node on one specific [`Tape`]. Handles must not be mixed
/// between tapes; they are plain indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Gradient returned by [`Tape::grad_of`]. `disconnected` is set when the
/// requested variable is not reachable from the loss, in which case the
/// values are all zero.
#[derive(Debug, Clone)]
pub struct Gradient {
    pub tensor: Tensor,
    pub disconnected: bool,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul { a: usize, b: usize },
    /// a · bᵀ, with b stored untransposed (n×k).
    MatMulNT { a: usize, b: usize },
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    /// Broadcast a 1×c row over every row of x.
    AddRow { x: usize, row: usize },
    Scale { x: usize, c: f64 },
    AddConst { x: usize },
    SoftmaxRows { x: usize },
    RmsNormRows { x: usize, gain: usize },
    Silu { x: usize },
    Tanh { x: usize },
    Arctan { x: usize },
    /// Rotary position transform over pairs of columns; row index = position.
    Rope { x: usize, base: f64 },
    SliceCols { x: usize, start: usize, len: usize },
    ConcatCols { parts: Vec<usize> },
    MeanAll { x: usize },
    SumAll { x: usize },
    MeanRows { x: usize },
    /// Euclidean norm of all entries, with a clamped-denominator backward.
    Norm2 { x: usize },
    EmbedRows { table: usize, ids: Vec<usize> },
    CrossEntropyRows { logits: usize, targets: Vec<usize> },
    /// Mean over rows of the cosine similarity between paired rows of a and b.
    CosineRowsMean { a: usize, b: usize, eps: f64 },
}

struct Node {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
    /// Cached values some backward passes need (softmax probs, rms radii).
    aux: Vec<f64>,
    op: Op,
    needs_grad: bool,
}

/// Define-by-run reverse-mode tape. Build the forward computation through the
/// op methods, then call [`Tape::backward`] on a scalar loss.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), grads: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Current node count, usable with [`Tape::truncate_to`] to roll the tape
    /// back to this point.
    pub fn mark(&self) -> usize {
        self.nodes.len()
    }

    /// Drop every node recorded after `mark` and clear gradients. Lets a loop
    /// keep constant leaves (model weights) resident while rebuilding the
    /// differentiated subgraph each iteration. Handles issued after the mark
    /// become invalid.
    pub fn truncate_to(&mut self, mark: usize) {
        self.nodes.truncate(mark);
        self.grads.clear();
    }

    // ── node plumbing ───────────────────────────────────────────────────────

    fn push(&mut self, rows: usize, cols: usize, data: Vec<f64>, aux: Vec<f64>, op: Op) -> Var {
        let needs_grad = match &op {
            Op::Leaf => false, // overwritten by leaf()
            _ => self.inputs_of(&op).iter().any(|&i| self.nodes[i].needs_grad),
        };
        debug_assert_eq!(data.len(), rows * cols);
        self.nodes.push(Node { rows, cols, data, aux, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn inputs_of(&self, op: &Op) -> Vec<usize> {
        match op {
            Op::Leaf => vec![],
            Op::MatMul { a, b }
            | Op::MatMulNT { a, b }
            | Op::Add { a, b }
            | Op::Sub { a, b }
            | Op::Mul { a, b }
            | Op::CosineRowsMean { a, b, .. } => vec![*a, *b],
            Op::AddRow { x, row } => vec![*x, *row],
            Op::RmsNormRows { x, gain } => vec![*x, *gain],
            Op::Scale { x, .. }
            | Op::AddConst { x }
            | Op::SoftmaxRows { x }
            | Op::Silu { x }
            | Op::Tanh { x }
            | Op::Arctan { x }
            | Op::Rope { x, .. }
            | Op::SliceCols { x, .. }
            | Op::MeanAll { x }
            | Op::SumAll { x }
            | Op::MeanRows { x }
            | Op::Norm2 { x } => vec![*x],
            Op::ConcatCols { parts } => parts.clone(),
            Op::EmbedRows { table, .. } => vec![*table],
            Op::CrossEntropyRows { logits, .. } => vec![*logits],
        }
    }

    pub fn dims(&self, v: Var) -> (usize, usize) {
        let n = &self.nodes[v.0];
        (n.rows, n.cols)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].data
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        debug_assert_eq!(self.nodes[v.0].data.len(), 1, "scalar_value on non-scalar");
        self.nodes[v.0].data[0]
    }

    pub fn value_tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(vec![n.rows, n.cols], n.data.clone()).expect("node shape is consistent")
    }

    /// Gradient of the last `backward` call, if this node received one.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn grad_tensor(&self, v: Var) -> Option<Tensor> {
        let n = &self.nodes[v.0];
        self.grad(v)
            .map(|g| Tensor::new(vec![n.rows, n.cols], g.to_vec()).expect("grad shape matches node"))
    }

    // ── leaves ──────────────────────────────────────────────────────────────

    /// Insert a tensor as a leaf; it participates in backward iff
    /// `t.requires_grad` is set.
    pub fn leaf(&mut self, t: &Tensor) -> Result<Var> {
        if !t.is_finite() {
            return Err(Error::NonFinite("leaf"));
        }
        let (r, c) = t.dims();
        let v = self.push(r, c, t.data().to_vec(), vec![], Op::Leaf);
        self.nodes[v.0].needs_grad = t.requires_grad;
        Ok(v)
    }

    /// Leaf that never receives a gradient regardless of the tensor flag.
    pub fn constant(&mut self, t: &Tensor) -> Result<Var> {
        if !t.is_finite() {
            return Err(Error::NonFinite("constant"));
        }
        let (r, c) = t.dims();
        Ok(self.push(r, c, t.data().to_vec(), vec![], Op::Leaf))
    }

    // ── matrix products ─────────────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (k2, n) = self.dims(b);
        if k != k2 {
            return Err(Error::shape("matmul", format!("{}x{} . {}x{}", m, k, k2, n)));
        }
        let mut out = vec![0.0; m * n];
        mm_acc(&self.nodes[a.0].data, m, k, &self.nodes[b.0].data, n, &mut out);
        Ok(self.push(m, n, out, vec![], Op::MatMul { a: a.0, b: b.0 }))
    }

    /// a · bᵀ without materializing the transpose; b is n×k.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (n, k2) = self.dims(b);
        if k != k2 {
            return Err(Error::shape("matmul_nt", format!("{}x{} . ({}x{})^T", m, k, n, k2)));
        }
        let mut out = vec![0.0; m * n];
        mm_nt_acc(&self.nodes[a.0].data, m, k, &self.nodes[b.0].data, n, &mut out);
        Ok(self.push(m, n, out, vec![], Op::MatMulNT { a: a.0, b: b.0 }))
    }

    // ── elementwise ─────────────────────────────────────────────────────────

    fn binary_same_shape(&mut self, name: &'static str, a: Var, b: Var) -> Result<(usize, usize)> {
        let da = self.dims(a);
        let db = self.dims(b);
        if da != db {
            return Err(Error::shape(name, format!("{:?} vs {:?}", da, db)));
        }
        Ok(da)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, c) = self.binary_same_shape("add", a, b)?;
        let data: Vec<f64> =
            self.nodes[a.0].data.iter().zip(&self.nodes[b.0].data).map(|(x, y)| x + y).collect();
        finite_or_err("add", &data)?;
        Ok(self.push(r, c, data, vec![], Op::Add { a: a.0, b: b.0 }))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, c) = self.binary_same_shape("sub", a, b)?;
        let data: Vec<f64> =
            self.nodes[a.0].data.iter().zip(&self.nodes[b.0].data).map(|(x, y)| x - y).collect();
        finite_or_err("sub", &data)?;
        Ok(self.push(r, c, data, vec![], Op::Sub { a: a.0, b: b.0 }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, c) = self.binary_same_shape("mul", a, b)?;
        let data: Vec<f64> =
            self.nodes[a.0].data.iter().zip(&self.nodes[b.0].data).map(|(x, y)| x * y).collect();
        finite_or_err("mul", &data)?;
        Ok(self.push(r, c, data, vec![], Op::Mul { a: a.0, b: b.0 }))
    }

    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (r, c) = self.dims(x);
        let (rr, rc) = self.dims(row);
        if rr != 1 || rc != c {
            return Err(Error::shape("add_row", format!("row {}x{} onto {}x{}", rr, rc, r, c)));
        }
        let mut data = self.nodes[x.0].data.clone();
        for i in 0..r {
            for (d, b) in data[i * c..(i + 1) * c].iter_mut().zip(&self.nodes[row.0].data) {
                *d += b;
            }
        }
        finite_or_err("add_row", &data)?;
        Ok(self.push(r, c, data, vec![], Op::AddRow { x: x.0, row: row.0 }))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let (r, cc) = self.dims(x);
        let data: Vec<f64> = self.nodes[x.0].data.iter().map(|v| v * c).collect();
        finite_or_err("scale", &data)?;
        Ok(self.push(r, cc, data, vec![], Op::Scale { x: x.0, c }))
    }

    pub fn add_const(&mut self, x: Var, c: f64) -> Result<Var> {
        let (r, cc) = self.dims(x);
        let data: Vec<f64> = self.nodes[x.0].data.iter().map(|v| v + c).collect();
        finite_or_err("add_const", &data)?;
        Ok(self.push(r, cc, data, vec![], Op::AddConst { x: x.0 }))
    }

    pub fn silu(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.dims(x);
        let data: Vec<f64> =
            self.nodes[x.0].data.iter().map(|&v| v * (1.0 / (1.0 + (-v).exp()))).collect();
        finite_or_err("silu", &data)?;
        Ok(self.push(r, c, data, vec![], Op::Silu { x: x.0 }))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.dims(x);
        let data: Vec<f64> = self.nodes[x.0].data.iter().map(|v| v.tanh()).collect();
        Ok(self.push(r, c, data, vec![], Op::Tanh { x: x.0 }))
    }

    pub fn arctan(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.dims(x);
        let data: Vec<f64> = self.nodes[x.0].data.iter().map(|v| v.atan()).collect();
        Ok(self.push(r, c, data, vec![], Op::Arctan { x: x.0 }))
    }

    // ── row-structured ops ──────────────────────────────────────────────────

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.dims(x);
        if c == 0 {
            return Err(Error::shape("softmax_rows", "zero columns".to_string()));
        }
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            let row = &self.nodes[x.0].data[i * c..(i + 1) * c];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let out = &mut data[i * c..(i + 1) * c];
            let mut z = 0.0;
            for (o, &v) in out.iter_mut().zip(row) {
                *o = (v - m).exp();
                z += *o;
            }
            for o in out.iter_mut() {
                *o /= z;
            }
        }
        Ok(self.push(r, c, data, vec![], Op::SoftmaxRows { x: x.0 }))
    }

    /// Root-mean-square normalization per row with a learned gain vector.
    pub fn rmsnorm_rows(&mut self, x: Var, gain: Var, eps: f64) -> Result<Var> {
        let (r, c) = self.dims(x);
        let (gr, gc) = self.dims(gain);
        if gr != 1 || gc != c {
            return Err(Error::shape("rmsnorm_rows", format!("gain {}x{} for {}x{}", gr, gc, r, c)));
        }
        let mut data = vec![0.0; r * c];
        let mut radii = vec![0.0; r];
        let g = &self.nodes[gain.0].data;
        for i in 0..r {
            let row = &self.nodes[x.0].data[i * c..(i + 1) * c];
            let ms = row.iter().map(|v| v * v).sum::<f64>() / c as f64;
            let rad = (ms + eps).sqrt();
            radii[i] = rad;
            for (j, (o, &v)) in data[i * c..(i + 1) * c].iter_mut().zip(row).enumerate() {
                *o = v * g[j] / rad;
            }
        }
        Ok(self.push(r, c, data, radii, Op::RmsNormRows { x: x.0, gain: gain.0 }))
    }

    pub fn rope(&mut self, x: Var, base: f64) -> Result<Var> {
        let (r, c) = self.dims(x);
        if c % 2 != 0 {
            return Err(Error::shape("rope", format!("odd width {}", c)));
        }
        let mut data = self.nodes[x.0].data.clone();
        rope_apply(&mut data, r, c, base, false);
        Ok(self.push(r, c, data, vec![], Op::Rope { x: x.0, base }))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.dims(x);
        if start + len > c {
            return Err(Error::shape("slice_cols", format!("{}+{} > {}", start, len, c)));
        }
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&self.nodes[x.0].data[i * c + start..i * c + start + len]);
        }
        Ok(self.push(r, len, data, vec![], Op::SliceCols { x: x.0, start, len }))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::shape("concat_cols", "no parts".to_string()));
        }
        let r = self.dims(parts[0]).0;
        if parts.iter().any(|&p| self.dims(p).0 != r) {
            return Err(Error::shape("concat_cols", "row counts differ".to_string()));
        }
        let total: usize = parts.iter().map(|&p| self.dims(p).1).sum();
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for &p in parts {
                let c = self.dims(p).1;
                data.extend_from_slice(&self.nodes[p.0].data[i * c..(i + 1) * c]);
            }
        }
        Ok(self.push(r, total, data, vec![], Op::ConcatCols { parts: parts.iter().map(|v| v.0).collect() }))
    }

    // ── reductions ──────────────────────────────────────────────────────────

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let n = self.nodes[x.0].data.len();
        if n == 0 {
            return Err(Error::shape("mean_all", "empty tensor".to_string()));
        }
        let v = self.nodes[x.0].data.iter().sum::<f64>() / n as f64;
        Ok(self.push(1, 1, vec![v], vec![], Op::MeanAll { x: x.0 }))
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let v = self.nodes[x.0].data.iter().sum::<f64>();
        Ok(self.push(1, 1, vec![v], vec![], Op::SumAll { x: x.0 }))
    }

    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.dims(x);
        if r == 0 {
            return Err(Error::shape("mean_rows", "no rows".to_string()));
        }
        let mut data = vec![0.0; c];
        for i in 0..r {
            for (o, v) in data.iter_mut().zip(&self.nodes[x.0].data[i * c..(i + 1) * c]) {
                *o += v;
            }
        }
        for o in data.iter_mut() {
            *o /= r as f64;
        }
        Ok(self.push(1, c, data, vec![], Op::MeanRows { x: x.0 }))
    }

    pub fn norm2(&mut self, x: Var) -> Result<Var> {
        let v = self.nodes[x.0].data.iter().map(|v| v * v).sum::<f64>().sqrt();
        Ok(self.push(1, 1, vec![v], vec![], Op::Norm2 { x: x.0 }))
    }

    // ── lookup and losses ───────────────────────────────────────────────────

    pub fn embed_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = self.dims(table);
        if let Some(&bad) = ids.iter().find(|&&id| id >= v) {
            return Err(Error::shape("embed_rows", format!("id {} out of range {}", bad, v)));
        }
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            data.extend_from_slice(&self.nodes[table.0].data[id * d..(id + 1) * d]);
        }
        Ok(self.push(ids.len(), d, data, vec![], Op::EmbedRows { table: table.0, ids: ids.to_vec() }))
    }

    /// Mean negative log-likelihood over rows; caches the softmax for backward.
    pub fn cross_entropy_rows(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (r, c) = self.dims(logits);
        if targets.len() != r {
            return Err(Error::shape("cross_entropy_rows", format!("{} targets for {} rows", targets.len(), r)));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
            return Err(Error::shape("cross_entropy_rows", format!("target {} out of range {}", bad, c)));
        }
        let mut probs = vec![0.0; r * c];
        let mut nll = 0.0;
        for i in 0..r {
            let row = &self.nodes[logits.0].data[i * c..(i + 1) * c];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let out = &mut probs[i * c..(i + 1) * c];
            let mut z = 0.0;
            for (o, &v) in out.iter_mut().zip(row) {
                *o = (v - m).exp();
                z += *o;
            }
            for o in out.iter_mut() {
                *o /= z;
            }
            nll -= row[targets[i]] - m - z.ln();
        }
        let v = nll / r as f64;
        Ok(self.push(1, 1, vec![v], probs, Op::CrossEntropyRows { logits: logits.0, targets: targets.to_vec() }))
    }

    /// Mean cosine similarity between paired rows. Zero-norm rows contribute
    /// zero similarity; `eps` keeps the division defined.
    pub fn cosine_rows_mean(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, c) = self.binary_same_shape("cosine_rows_mean", a, b)?;
        let eps = 1e-12;
        let mut total = 0.0;
        for i in 0..r {
            let ra = &self.nodes[a.0].data[i * c..(i + 1) * c];
            let rb = &self.nodes[b.0].data[i * c..(i + 1) * c];
            let dot: f64 = ra.iter().zip(rb).map(|(x, y)| x * y).sum();
            let na: f64 = ra.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nb: f64 = rb.iter().map(|x| x * x).sum::<f64>().sqrt();
            total += dot / (na * nb + eps);
        }
        let v = total / r as f64;
        Ok(self.push(1, 1, vec![v], vec![], Op::CosineRowsMean { a: a.0, b: b.0, eps }))
    }

    // ── backward ────────────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Gradients land on every node that
    /// transitively requires them and stay readable until the next backward.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let ln = &self.nodes[loss.0];
        if ln.data.len() != 1 {
            return Err(Error::shape("backward", format!("loss is {}x{}, expected scalar", ln.rows, ln.cols)));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            if self.nodes[i].needs_grad {
                self.propagate(i, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    /// Run backward and collect gradients for `wrt` only. Variables that are
    /// topologically unreachable from the loss come back as zeros with the
    /// `disconnected` flag set.
    pub fn grad_of(&mut self, loss: Var, wrt: &[Var]) -> Result<Vec<Gradient>> {
        self.backward(loss)?;
        let reachable = self.reachable_from(loss);
        Ok(wrt
            .iter()
            .map(|&w| {
                let (r, c) = self.dims(w);
                let tensor = match self.grad(w) {
                    Some(g) => Tensor::new(vec![r, c], g.to_vec()).expect("grad shape"),
                    None => Tensor::zeros(r, c),
                };
                Gradient { tensor, disconnected: !reachable[w.0] }
            })
            .collect())
    }

    fn reachable_from(&self, root: Var) -> Vec<bool> {
        let mut seen = vec![false; self.nodes.len()];
        let mut stack = vec![root.0];
        while let Some(i) = stack.pop() {
            if seen[i] {
                continue;
            }
            seen[i] = true;
            stack.extend(self.inputs_of(&self.nodes[i].op));
        }
        seen
    }

    fn accumulate(grads: &mut [Option<Vec<f64>>], idx: usize, len: usize) -> &mut Vec<f64> {
        grads[idx].get_or_insert_with(|| vec![0.0; len])
    }

    fn wants(&self, idx: usize) -> bool {
        self.nodes[idx].needs_grad
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let (rows, cols) = (node.rows, node.cols);
        match &node.op {
            Op::Leaf => {}

            Op::MatMul { a, b } => {
                let (m, k) = (self.nodes[*a].rows, self.nodes[*a].cols);
                let n = self.nodes[*b].cols;
                if self.wants(*a) {
                    let da = Self::accumulate(grads, *a, m * k);
                    mm_nt_acc(g, m, n, &self.nodes[*b].data, k, da);
                }
                if self.wants(*b) {
                    let db = Self::accumulate(grads, *b, k * n);
                    mm_tn_acc(&self.nodes[*a].data, m, k, g, n, db);
                }
            }

            Op::MatMulNT { a, b } => {
                // out = a · bᵀ, a: m×k, b: n×k, g: m×n
                let (m, k) = (self.nodes[*a].rows, self.nodes[*a].cols);
                let n = self.nodes[*b].rows;
                if self.wants(*a) {
                    let da = Self::accumulate(grads, *a, m * k);
                    mm_acc(g, m, n, &self.nodes[*b].data, k, da);
                }
                if self.wants(*b) {
                    let db = Self::accumulate(grads, *b, n * k);
                    mm_tn_acc(g, m, n, &self.nodes[*a].data, k, db);
                }
            }

            Op::Add { a, b } => {
                for idx in [*a, *b] {
                    if self.wants(idx) {
                        let d = Self::accumulate(grads, idx, g.len());
                        for (o, v) in d.iter_mut().zip(g) {
                            *o += v;
                        }
                    }
                }
            }

            Op::Sub { a, b } => {
                if self.wants(*a) {
                    let d = Self::accumulate(grads, *a, g.len());
                    for (o, v) in d.iter_mut().zip(g) {
                        *o += v;
                    }
                }
                if self.wants(*b) {
                    let d = Self::accumulate(grads, *b, g.len());
                    for (o, v) in d.iter_mut().zip(g) {
                        *o -= v;
                    }
                }
            }

            Op::Mul { a, b } => {
                if self.wants(*a) {
                    let bd = &self.nodes[*b].data;
                    let d = Self::accumulate(grads, *a, g.len());
                    for ((o, v), x) in d.iter_mut().zip(g).zip(bd) {
                        *o += v * x;
                    }
                }
                if self.wants(*b) {
                    let ad = &self.nodes[*a].data;
                    let d = Self::accumulate(grads, *b, g.len());
                    for ((o, v), x) in d.iter_mut().zip(g).zip(ad) {
                        *o += v * x;
                    }
                }
            }

            Op::AddRow { x, row } => {
                if self.wants(*x) {
                    let d = Self::accumulate(grads, *x, g.len());
                    for (o, v) in d.iter_mut().zip(g) {
                        *o += v;
                    }
                }
                if self.wants(*row) {
                    let d = Self::accumulate(grads, *row, cols);
                    for i in 0..rows {
                        for (o, v) in d.iter_mut().zip(&g[i * cols..(i + 1) * cols]) {
                            *o += v;
                        }
                    }
                }
            }

            Op::Scale { x, c } => {
                if self.wants(*x) {
                    let d = Self::accumulate(grads, *x, g.len());
                    for (o, v) in d.iter_mut().zip(g) {
                        *o += v * c;
                    }
                }
            }

            Op::AddConst { x } => {
                if self.wants(*x) {
                    let d = Self::accumulate(grads, *x, g.len());
                    for (o, v) in d.iter_mut().zip(g) {
                        *o += v;
                    }
                }
            }

            Op::SoftmaxRows { x } => {
                if self.wants(*x) {
                    let y = &node.data;
                    let d = Self::accumulate(grads, *x, g.len());
                    for i in 0..rows {
                        let yr = &y[i * cols..(i + 1) * cols];
                        let gr = &g[i * cols..(i + 1) * cols];
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for ((o, &yv), &gv) in
                            d[i * cols..(i + 1) * cols].iter_mut().zip(yr).zip(gr)
                        {
                            *o += yv * (gv - dot);
                        }
                    }
                }
            }

            Op::RmsNormRows { x, gain } => {
                let xd = &self.nodes[*x].data;
                let gd = &self.nodes[*gain].data;
                let radii = &node.aux;
                if self.wants(*x) {
                    let d = Self::accumulate(grads, *x, g.len());
                    for i in 0..rows {
                        let rad = radii[i];
                        let xr = &xd[i * cols..(i + 1) * cols];
                        let gr = &g[i * cols..(i + 1) * cols];
                        let inner: f64 =
                            gr.iter().zip(gd).zip(xr).map(|((u, gn), xv)| u * gn * xv).sum();
                        let coef = inner / (cols as f64 * rad * rad * rad);
                        for (j, (o, &xv)) in
                            d[i * cols..(i + 1) * cols].iter_mut().zip(xr).enumerate()
                        {
                            *o += gr[j] * gd[j] / rad - coef * xv;
                        }
                    }
                }
                if self.wants(*gain) {
                    let d = Self::accumulate(grads, *gain, cols);
                    for i in 0..rows {
                        let rad = radii[i];
                        for (j, o) in d.iter_mut().enumerate() {
                            *o += g[i * cols + j] * xd[i * cols + j] / rad;
                        }
                    }
                }
            }

            Op::Silu { x } => {
                if self.wants(*x) {
                    let xd = &self.nodes[*x].data;
                    let d = Self::accumulate(grads, *x, g.len());
                    for ((o, &gv), &xv) in d.iter_mut().zip(g).zip(xd) {
                        let s = 1.0 / (1.0 + (-xv).exp());
                        *o += gv * s * (1.0 + xv * (1.0 - s));
                    }
                }
            }

            Op::Tanh { x } => {
                if self.wants(*x) {
                    let y = &node.data;
                    let d = Self::accumulate(grads, *x, g.len());
                    for ((o, &gv), &yv) in d.iter_mut().zip(g).zip(y) {
                        *o += gv * (1.0 - yv * yv);
                    }
                }
            }

            Op::Arctan { x } => {
                if self.wants(*x) {
                    let xd = &self.nodes[*x].data;
                    let d = Self::accumulate(grads, *x, g.len());
                    for ((o, &gv), &xv) in d.iter_mut().zip(g).zip(xd) {
                        *o += gv / (1.0 + xv * xv);
                    }
                }
            }

            Op::Rope { x, base } => {
                if self.wants(*x) {
                    let mut gx = g.to_vec();
                    rope_apply(&mut gx, rows, cols, *base, true);
                    let d = Self::accumulate(grads, *x, g.len());
                    for (o, v) in d.iter_mut().zip(&gx) {
                        *o += v;
                    }
                }
            }

            Op::SliceCols { x, start, len } => {
                if self.wants(*x) {
                    let xc = self.nodes[*x].cols;
                    let d = Self::accumulate(grads, *x, self.nodes[*x].data.len());
                    for i in 0..rows {
                        for j in 0..*len {
                            d[i * xc + start + j] += g[i * len + j];
                        }
                    }
                }
            }

            Op::ConcatCols { parts } => {
                let mut offset = 0;
                for &p in parts {
                    let pc = self.nodes[p].cols;
                    if self.wants(p) {
                        let d = Self::accumulate(grads, p, self.nodes[p].data.len());
                        for i in 0..rows {
                            for j in 0..pc {
                                d[i * pc + j] += g[i * cols + offset + j];
                            }
                        }
                    }
                    offset += pc;
                }
            }

            Op::MeanAll { x } => {
                if self.wants(*x) {
                    let n = self.nodes[*x].data.len();
                    let gv = g[0] / n as f64;
                    let d = Self::accumulate(grads, *x, n);
                    for o in d.iter_mut() {
                        *o += gv;
                    }
                }
            }

            Op::SumAll { x } => {
                if self.wants(*x) {
                    let n = self.nodes[*x].data.len();
                    let d = Self::accumulate(grads, *x, n);
                    for o in d.iter_mut() {
                        *o += g[0];
                    }
                }
            }

            Op::MeanRows { x } => {
                if self.wants(*x) {
                    let r = self.nodes[*x].rows;
                    let d = Self::accumulate(grads, *x, self.nodes[*x].data.len());
                    for i in 0..r {
                        for (o, v) in d[i * cols..(i + 1) * cols].iter_mut().zip(g) {
                            *o += v / r as f64;
                        }
                    }
                }
            }

            Op::Norm2 { x } => {
                if self.wants(*x) {
                    let xd = &self.nodes[*x].data;
                    let denom = node.data[0].max(1e-12);
                    let d = Self::accumulate(grads, *x, xd.len());
                    for (o, &xv) in d.iter_mut().zip(xd) {
                        *o += g[0] * xv / denom;
                    }
                }
            }

            Op::EmbedRows { table, ids } => {
                if self.wants(*table) {
                    let d = Self::accumulate(grads, *table, self.nodes[*table].data.len());
                    for (i, &id) in ids.iter().enumerate() {
                        for (o, v) in
                            d[id * cols..(id + 1) * cols].iter_mut().zip(&g[i * cols..(i + 1) * cols])
                        {
                            *o += v;
                        }
                    }
                }
            }

            Op::CrossEntropyRows { logits, targets } => {
                if self.wants(*logits) {
                    let probs = &node.aux;
                    let r = targets.len();
                    let c = self.nodes[*logits].cols;
                    let scale = g[0] / r as f64;
                    let d = Self::accumulate(grads, *logits, r * c);
                    for i in 0..r {
                        for j in 0..c {
                            let onehot = if j == targets[i] { 1.0 } else { 0.0 };
                            d[i * c + j] += scale * (probs[i * c + j] - onehot);
                        }
                    }
                }
            }

            Op::CosineRowsMean { a, b, eps } => {
                let ad = &self.nodes[*a].data;
                let bd = &self.nodes[*b].data;
                let r = self.nodes[*a].rows;
                let c = self.nodes[*a].cols;
                let gs = g[0] / r as f64;
                for (target, this, other) in [(*a, ad, bd), (*b, bd, ad)] {
                    if !self.wants(target) {
                        continue;
                    }
                    let d = Self::accumulate(grads, target, r * c);
                    for i in 0..r {
                        let rt = &this[i * c..(i + 1) * c];
                        let ro = &other[i * c..(i + 1) * c];
                        let dot: f64 = rt.iter().zip(ro).map(|(x, y)| x * y).sum();
                        let nt = rt.iter().map(|x| x * x).sum::<f64>().sqrt();
                        let no = ro.iter().map(|x| x * x).sum::<f64>().sqrt();
                        let denom = nt * no + eps;
                        let self_coef = dot * no / (nt.max(1e-300) * denom * denom);
                        for (j, o) in d[i * c..(i + 1) * c].iter_mut().enumerate() {
                            *o += gs * (ro[j] / denom - self_coef * rt[j]);
                        }
                    }
                }
            }
        }
    }
}

// ── kernels ─────────────────────────────────────────────────────────────────

/// out += a(m×k) · b(k×n)
pub(crate) fn mm_acc(a: &[f64], m: usize, k: usize, b: &[f64], n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &aip) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
}

/// out += a(m×k) · b(n×k)ᵀ
pub(crate) fn mm_nt_acc(a: &[f64], m: usize, k: usize, b: &[f64], n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (j, o) in orow.iter_mut().enumerate() {
            let brow = &b[j * k..(j + 1) * k];
            // four partial sums so the dot product doesn't serialize on one
            // accumulator
            let mut s = [0.0f64; 4];
            let mut it_a = arow.chunks_exact(4);
            let mut it_b = brow.chunks_exact(4);
            for (ca, cb) in (&mut it_a).zip(&mut it_b) {
                s[0] += ca[0] * cb[0];
                s[1] += ca[1] * cb[1];
                s[2] += ca[2] * cb[2];
                s[3] += ca[3] * cb[3];
            }
            let mut tail = 0.0;
            for (x, y) in it_a.remainder().iter().zip(it_b.remainder()) {
                tail += x * y;
            }
            *o += s[0] + s[1] + s[2] + s[3] + tail;
        }
    }
}

/// out(k×n) += a(m×k)ᵀ · g(m×n)
pub(crate) fn mm_tn_acc(a: &[f64], m: usize, k: usize, g: &[f64], n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(g.len(), m * n);
    debug_assert_eq!(out.len(), k * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let grow = &g[i * n..(i + 1) * n];
        for (p, &apv) in arow.iter().enumerate() {
            let crow = &mut out[p * n..(p + 1) * n];
            for (o, &gv) in crow.iter_mut().zip(grow) {
                *o += apv * gv;
            }
        }
    }
}

/// In-place rotary transform; `inverse` rotates by the negated angles, which
/// is exactly the backward pass.
fn rope_apply(data: &mut [f64], rows: usize, cols: usize, base: f64, inverse: bool) {
    let half = cols / 2;
    for pos in 0..rows {
        let row = &mut data[pos * cols..(pos + 1) * cols];
        for pair in 0..half {
            let theta = pos as f64 * base.powf(-2.0 * pair as f64 / cols as f64);
            let (sin, cos) = if inverse { (-theta).sin_cos() } else { theta.sin_cos() };
            let x0 = row[2 * pair];
            let x1 = row[2 * pair + 1];
            row[2 * pair] = x0 * cos - x1 * sin;
            row[2 * pair + 1] = x0 * sin + x1 * cos;
        }
    }
}

fn finite_or_err(op: &'static str, data: &[f64]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(op))
    }
}

#[cfg(test)]
mod tests {
    use super::super::{check_gradient, Tape, Tensor};
    use rand::SeedableRng;

    const H: f64 = 1e-5;
    const PRIMITIVE_TOL: f64 = 1e-6;

    fn rng(seed: u64) -> rand_chacha::ChaCha8Rng {
        rand_chacha::ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn matmul_known_value() {
        let mut t = Tape::new();
        let a = t.constant(&Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap()).unwrap();
        let b = t.constant(&Tensor::from_rows(&[vec![5.0, 6.0], vec![7.0, 8.0]]).unwrap()).unwrap();
        let c = t.matmul(a, b).unwrap();
        assert_eq!(t.value(c), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn matmul_shape_error_names_dims() {
        let mut t = Tape::new();
        let a = t.constant(&Tensor::zeros(2, 3)).unwrap();
        let b = t.constant(&Tensor::zeros(4, 2)).unwrap();
        let err = t.matmul(a, b).unwrap_err();
        assert!(err.to_string().contains("2x3"), "got: {}", err);
    }

    #[test]
    fn matmul_nt_matches_explicit_transpose() {
        let mut r = rng(1);
        let a = Tensor::randn(3, 5, 1.0, &mut r);
        let b = Tensor::randn(4, 5, 1.0, &mut r);
        let mut t = Tape::new();
        let va = t.constant(&a).unwrap();
        let vb = t.constant(&b).unwrap();
        let nt = t.matmul_nt(va, vb).unwrap();
        let vbt = t.constant(&b.transposed()).unwrap();
        let mm = t.matmul(va, vbt).unwrap();
        let diff: f64 = t
            .value(nt)
            .iter()
            .zip(t.value(mm))
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max);
        assert!(diff < 1e-12, "max diff {}", diff);
    }

    #[test]
    fn grad_matmul_lhs_and_rhs() {
        let mut r = rng(2);
        let x = Tensor::randn(3, 4, 1.0, &mut r);
        let w = Tensor::randn(4, 2, 1.0, &mut r);
        let rep = check_gradient(
            |t, v| {
                let wc = t.constant(&w).unwrap();
                let y = t.matmul(v, wc)?;
                t.mean_all(y)
            },
            &x,
            H,
            &[],
        )
        .unwrap();
        assert!(rep.max_rel_err < PRIMITIVE_TOL, "lhs: {:?}", rep);

        let rep = check_gradient(
            |t, v| {
                let xc = t.constant(&x).unwrap();
                let y = t.matmul(xc, v)?;
                t.mean_all(y)
            },
            &w,
            H,
            &[],
        )
        .unwrap();
        assert!(rep.max_rel_err < PRIMITIVE_TOL, "rhs: {:?}", rep);
    }

    #[test]
    fn grad_matmul_nt_both_sides() {
        let mut r = rng(3);
        let a = Tensor::randn(3, 5, 1.0, &mut r);
        let b = Tensor::randn(4, 5, 1.0, &mut r);
        for side in 0..2 {
            let (checked, fixed) = if side == 0 { (&a, &b) } else { (&b, &a) };
            let rep = check_gradient(
                |t, v| {
                    let f = t.constant(fixed).unwrap();
                    let y = if side == 0 { t.matmul_nt(v, f)? } else { t.matmul_nt(f, v)? };
                    t.mean_all(y)
                },
                checked,
                H,
                &[],
            )
            .unwrap();
            assert!(rep.max_rel_err < PRIMITIVE_TOL, "side {}: {:?}", side, rep);
        }
    }

    #[test]
    fn grad_elementwise_chain() {
        let mut r = rng(4);
        let x = Tensor::randn(3, 4, 1.0, &mut r);
        let c = Tensor::randn(3, 4, 1.0, &mut r);
        let rep = check_gradient(
            |t, v| {
                let cc = t.constant(&c).unwrap();
                let s = t.add(v, cc)?;
                let d = t.sub(v, cc)?;
                let m = t.mul(s, d)?;
                let sc = t.scale(m, 0.7)?;
                let ac = t.add_const(sc, 1.3)?;
                t.sum_all(ac)
            },
            &x,
            H,
            &[],
        )
        .unwrap();
        assert!(rep.max_rel_err < PRIMITIVE_TOL, "{:?}", rep);
    }

    #[test]
    fn grad_mul_aliased_input_doubles() {
        // y = sum(x*x) has gradient exactly 2x; aliasing must accumulate both
        // branches.
        let x = Tensor::from_rows(&[vec![1.5, -2.0, 0.25]]).unwrap().with_grad();
        let mut t = Tape::new();
        let v = t.leaf(&x).unwrap();
        let m = t.mul(v, v).unwrap();
        let loss = t.sum_all(m).unwrap();
        t.backward(loss).unwrap();
        assert_eq!(t.grad(v).unwrap(), &[3.0, -4.0, 0.5]);
    }

    #[test]
    fn grad_add_row_broadcast() {
        let mut r = rng(5);
        let x = Tensor::randn(4, 3, 1.0, &mut r);
        let row = Tensor::randn(1, 3, 1.0, &mut r);
        let rep = check_gradient(
            |t, v| {
                let xc = t.constant(&x).unwrap();
                let y = t.add_row(xc, v)?;
                let sq = t.mul(y, y)?;
                t.mean_all(sq)
            },
            &row,
            H,
            &[],
        )
        .unwrap();
        assert!(rep.max_rel_err < PRIMITIVE_TOL, "{:?}", rep);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut r = rng(6);
        let x = Tensor::randn(5, 7, 3.0, &mut r);
        let mut t = Tape::new();
        let v = t.constant(&x).unwrap();
        let y = t.softmax_rows(v).unwrap();
        for i in 0..5 {
            let s: f64 = t.value(y)[i * 7..(i + 1) * 7].iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn grad_softmax_rows() {
        let mut r = rng(7);
        let x = Tensor::randn(3, 5, 1.0, &mut r);
        let w = Tensor::randn(3, 5, 1.0, &mut r);
        let rep = check_gradient(
            |t, v| {
                let wc = t.constant(&w).unwrap();
                let y = t.softmax_rows(v)?;
                let m = t.mul(y, wc)?;
                t.sum_all(m)
            },
            &x,
            H,
            &[],
        )
        .unwrap();
        assert!(rep.max_rel_err < PRIMITIVE_TOL, "{:?}", rep);
    }

    #[test]
    fn rmsnorm_unit_gain_normalizes() {
        let mut r = rng(8);
        let x = Tensor::randn(4, 16, 2.0, &mut r);
        let gain = Tensor::full(1, 16, 1.0);
        let mut t = Tape::new();
        let vx = t.constant(&x).unwrap();
        let vg = t.constant(&gain).unwrap();
        let y = t.rmsnorm_rows(vx, vg, 1e-5).unwrap();
        for i in 0..4 {
            let ms: f64 =
                t.value(y)[i * 16..(i + 1) * 16].iter().map(|v| v * v).sum::<f64>() / 16.0;
            assert!((ms - 1.0).abs() < 1e-3, "row {} mean square {}", i, ms);
        }
    }

    #[test]
    fn grad_rmsnorm_input_and_gain() {
        let mut r = rng(9);
        let x = Tensor::randn(3, 8, 1.0, &mut r);
        let gain = Tensor::randn(1, 8, 1.0, &mut r);
        let w = Tensor::randn(3, 8, 1.0, &mut r);
        let rep = check_gradient(
            |t, v| {
                let g = t.constant(&gain).unwrap();
                let wc = t.constant(&w).unwrap();
                let y = t.rmsnorm_rows(v, g, 1e-5)?;
                let m = t.mul(y, wc)?;
                t.sum_all(m)
            },
            &x,
            H,
            &[],
        )
        .unwrap();
        assert!(rep.max_rel_err < PRIMITIVE_TOL, "input: {:?}", rep);

        let rep = check_gradient(
            |t, v| {
                let xc = t.constant(&x).unwrap();
                let wc = t.constant(&w).unwrap();
                let y = t.rmsnorm_rows(xc, v, 1e-5)?;
                let m = t.mul(y, wc)?;
                t.sum_all(m)
            },
            &gain,
            H,
            &[],
        )
        .unwrap();
        assert!(rep.max_rel_err < PRIMITIVE_TOL, "gain: {:?}", rep);
    }

    #[test]
    fn grad_silu_tanh_arctan() {
        let mut r = rng(10);
        let x = Tensor::randn(2, 9, 1.5, &mut r);
        for which in 0..3 {
            let rep = check_gradient(
                |t, v| {
                    let y = match which {
                        0 => t.silu(v)?,
                        1 => t.tanh(v)?,
                        _ => t.arctan(v)?,
                    };
                    t.sum_all(y)
                },
                &x,
                H,
                &[],
            )
            .unwrap();
            assert!(rep.max_rel_err < PRIMITIVE_TOL, "op {}: {:?}", which, rep);
        }
    }

    #[test]
    fn rope_preserves_pair_norms() {
        let mut r = rng(11);
        let x = Tensor::randn(6, 8, 1.0, &mut r);
        let mut t = Tape::new();
        let v = t.constant(&x).unwrap();
        let y = t.rope(v, 10000.0).unwrap();
        for i in 0..6 {
            for p in 0..4 {
                let a = x.get(i, 2 * p).hypot(x.get(i, 2 * p + 1));
                let b = t.value(y)[i * 8 + 2 * p].hypot(t.value(y)[i * 8 + 2 * p + 1]);
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rope_position_zero_is_identity() {
        let mut r = rng(12);
        let x = Tensor::randn(3, 4, 1.0, &mut r);
        let mut t = Tape::new();
        let v = t.constant(&x).unwrap();
        let y = t.rope(v, 10000.0).unwrap();
        assert_eq!(&t.value(y)[0..4], &x.data()[0..4]);
    }

    #[test]
    fn grad_rope() {
        let mut r = rng(13);
        let x = Tensor::randn(5, 6, 1.0, &mut r);
        let w = Tensor::randn(5, 6, 1.0, &mut r);
        let rep = check_gradient(
            |t, v| {
                let wc = t.constant(&w).unwrap();
                let y = t.rope(v, 10000.0)?;
                let m = t.mul(y, wc)?;
                t.sum_all(m)
            },
            &x,
            H,
            &[],
        )
        .unwrap();
        assert!(rep.max_rel_err < PRIMITIVE_TOL, "{:?}", rep);
    }

    #[test]
    fn grad_slice_concat_round_trip() {
        let mut r = rng(14);
        let x = Tensor::randn(3, 6, 1.0, &mut r);
        let w = Tensor::randn(3, 6, 1.0, &mut r);
        let rep = check_gradient(
            |t, v| {
                let wc = t.constant(&w).unwrap();
                let left = t.slice_cols(v, 0, 2)?;
                let right = t.slice_cols(v, 2, 4)?;
                let back = t.concat_cols(&[left, right])?;
                let m = t.mul(back, wc)?;
                t.sum_all(m)
            },
            &x,
            H,
            &[],
        )
        .unwrap();
        assert!(rep.max_rel_err < PRIMITIVE_TOL, "{:?}", rep);
    }

    #[test]
    fn grad_mean_rows_norm2() {
        let mut r = rng(15);
        let x = Tensor::randn(5, 4, 1.0, &mut r);
        let c = Tensor::randn(1, 4, 1.0, &mut r);
        let rep = check_gradient(
            |t, v| {
                let cc = t.constant(&c).unwrap();
                let m = t.mean_rows(v)?;
                let d = t.sub(m, cc)?;
                t.norm2(d)
            },
            &x,
            H,
            &[],
        )
        .unwrap();
        assert!(rep.max_rel_err < PRIMITIVE_TOL, "{:?}", rep);
    }

    #[test]
    fn grad_embed_rows_scatters_to_used_ids() {
        let mut r = rng(16);
        let table = Tensor::randn(7, 3, 1.0, &mut r);
        let w = Tensor::randn(4, 3, 1.0, &mut r);
        let ids = [2usize, 5, 2, 0];
        let rep = check_gradient(
            |t, v| {
                let wc = t.constant(&w).unwrap();
                let e = t.embed_rows(v, &ids)?;
                let m = t.mul(e, wc)?;
                t.sum_all(m)
            },
            &table,
            H,
            &[],
        )
        .unwrap();
        assert!(rep.max_rel_err < PRIMITIVE_TOL, "{:?}", rep);

        // unused ids must have exactly zero gradient
        let mut t = Tape::new();
        let mut tt = table.clone();
        tt.requires_grad = true;
        let v = t.leaf(&tt).unwrap();
        let e = t.embed_rows(v, &ids).unwrap();
        let loss = t.sum_all(e).unwrap();
        t.backward(loss).unwrap();
        let g = t.grad(v).unwrap();
        for unused in [1usize, 3, 4, 6] {
            assert!(g[unused * 3..(unused + 1) * 3].iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn cross_entropy_uniform_logits_is_log_vocab() {
        let mut t = Tape::new();
        let logits = t.constant(&Tensor::zeros(4, 16)).unwrap();
        let loss = t.cross_entropy_rows(logits, &[3, 0, 15, 7]).unwrap();
        assert!((t.scalar_value(loss) - (16f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_rejects_bad_target() {
        let mut t = Tape::new();
        let logits = t.constant(&Tensor::zeros(2, 4)).unwrap();
        assert!(t.cross_entropy_rows(logits, &[0, 4]).is_err());
        assert!(t.cross_entropy_rows(logits, &[0]).is_err());
    }

    #[test]
    fn grad_cross_entropy() {
        let mut r = rng(17);
        let x = Tensor::randn(4, 6, 1.0, &mut r);
        let targets = [1usize, 4, 0, 5];
        let rep = check_gradient(|t, v| t.cross_entropy_rows(v, &targets), &x, H, &[]).unwrap();
        assert!(rep.max_rel_err < PRIMITIVE_TOL, "{:?}", rep);
    }

    #[test]
    fn cosine_identical_rows_is_one() {
        let mut r = rng(18);
        let x = Tensor::randn(3, 5, 1.0, &mut r);
        let mut t = Tape::new();
        let a = t.constant(&x).unwrap();
        let b = t.constant(&x).unwrap();
        let c = t.cosine_rows_mean(a, b).unwrap();
        assert!((t.scalar_value(c) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn cosine_zero_row_contributes_zero() {
        let a = Tensor::from_rows(&[vec![0.0, 0.0], vec![1.0, 0.0]]).unwrap();
        let b = Tensor::from_rows(&[vec![1.0, 1.0], vec![1.0, 0.0]]).unwrap();
        let mut t = Tape::new();
        let va = t.constant(&a).unwrap();
        let vb = t.constant(&b).unwrap();
        let c = t.cosine_rows_mean(va, vb).unwrap();
        assert!((t.scalar_value(c) - 0.5).abs() < 1e-9);
    }

    #[test]
    fn grad_cosine_rows_mean_both_sides() {
        let mut r = rng(19);
        let a = Tensor::randn(3, 5, 1.0, &mut r);
        let b = Tensor::randn(3, 5, 1.0, &mut r);
        for side in 0..2 {
            let (checked, fixed) = if side == 0 { (&a, &b) } else { (&b, &a) };
            let rep = check_gradient(
                |t, v| {
                    let f = t.constant(fixed).unwrap();
                    if side == 0 {
                        t.cosine_rows_mean(v, f)
                    } else {
                        t.cosine_rows_mean(f, v)
                    }
                },
                checked,
                H,
                &[],
            )
            .unwrap();
            assert!(rep.max_rel_err < PRIMITIVE_TOL, "side {}: {:?}", side, rep);
        }
    }

    #[test]
    fn disconnected_wrt_is_flagged_with_zeros() {
        let mut t = Tape::new();
        let x = Tensor::full(2, 2, 1.0).with_grad();
        let y = Tensor::full(2, 2, 2.0).with_grad();
        let vx = t.leaf(&x).unwrap();
        let vy = t.leaf(&y).unwrap();
        let loss = t.mean_all(vx).unwrap();
        let grads = t.grad_of(loss, &[vx, vy]).unwrap();
        assert!(!grads[0].disconnected);
        assert!(grads[1].disconnected);
        assert!(grads[1].tensor.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut t = Tape::new();
        let x = Tensor::zeros(2, 3).with_grad();
        let v = t.leaf(&x).unwrap();
        assert!(t.backward(v).is_err());
    }

    #[test]
    fn leaf_rejects_non_finite() {
        let mut t = Tape::new();
        let x = Tensor::new(vec![1, 2], vec![1.0, f64::NAN]).unwrap();
        assert!(t.leaf(&x).is_err());
    }

    #[test]
    fn rebuilt_tape_replays_bit_identically() {
        let mut r = rng(20);
        let x = Tensor::randn(4, 8, 1.0, &mut r);
        let w = Tensor::randn(8, 8, 1.0, &mut r);
        let run = || {
            let mut t = Tape::new();
            let vx = t.constant(&x).unwrap();
            let vw = t.constant(&w).unwrap();
            let y = t.matmul(vx, vw).unwrap();
            let s = t.silu(y).unwrap();
            let l = t.mean_all(s).unwrap();
            t.scalar_value(l)
        };
        assert_eq!(run().to_bits(), run().to_bits());
    }
}
