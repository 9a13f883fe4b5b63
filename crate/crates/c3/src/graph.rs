//! Reverse-mode automatic differentiation over a recorded operation tape.
//!
//! A [`Graph`] is built fresh for every forward pass. Leaf nodes reference
//! parameters in a [`ParamStore`] by id; all other nodes own their value
//! buffers. `backward` replays the tape in reverse and accumulates gradients
//! for every reachable parameter.

use crate::error::{Error, Result};
use crate::params::{GradBuffers, ParamId, ParamStore};
use crate::tensor::{matmul_into, Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op<T: Scalar> {
    Param(ParamId),
    Input,
    Embedding { table: ParamId, ids: Vec<usize> },
    Matmul { a: NodeId, b: NodeId, ta: bool, tb: bool },
    Add { a: NodeId, b: NodeId },
    AddBias { a: NodeId, bias: NodeId },
    Mul { a: NodeId, b: NodeId },
    Scale { a: NodeId, c: T },
    Silu { a: NodeId },
    Gelu { a: NodeId },
    RmsNorm { x: NodeId, gain: NodeId },
    Softmax { a: NodeId },
    Rope { a: NodeId, d_head: usize, positions: Vec<usize>, base: f64 },
    SliceCols { a: NodeId, start: usize, len: usize },
    ConcatCols { parts: Vec<NodeId> },
    SliceRows { a: NodeId, start: usize, len: usize },
    ConcatRows { parts: Vec<NodeId> },
    Transpose { a: NodeId },
    Reshape { a: NodeId },
    Sum { a: NodeId },
    CrossEntropy { logits: NodeId, targets: Vec<usize>, mask: Vec<bool> },
}

struct Node<T: Scalar> {
    op: Op<T>,
    value: Tensor<T>,
    /// Saved forward byproducts needed by the backward rule
    /// (per-row inverse RMS for RmsNorm, probabilities for CrossEntropy).
    aux: Option<Tensor<T>>,
    needs_grad: bool,
}

pub struct Graph<'a, T: Scalar> {
    store: &'a ParamStore<T>,
    nodes: Vec<Node<T>>,
}

/// Result of a backward pass: gradients per node and per parameter.
pub struct Gradients<T: Scalar> {
    node_grads: Vec<Option<Tensor<T>>>,
    param_grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn node(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.node_grads[id.0].as_ref()
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.param_grads[id.index()].as_ref()
    }

    /// bufs[p] += scale * grad[p] for every parameter with a gradient.
    pub fn accumulate_into(&self, bufs: &mut GradBuffers<T>, scale: T) {
        for (i, g) in self.param_grads.iter().enumerate() {
            if let Some(g) = g {
                let dst = bufs.get_mut(ParamId(i)).data_mut();
                for (d, s) in dst.iter_mut().zip(g.data()) {
                    *d = *d + scale * *s;
                }
            }
        }
    }
}

impl<'a, T: Scalar> Graph<'a, T> {
    pub fn new(store: &'a ParamStore<T>) -> Self {
        Graph {
            store,
            nodes: Vec::new(),
        }
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        match &self.nodes[id.0].op {
            Op::Param(p) => self.store.get(*p),
            _ => &self.nodes[id.0].value,
        }
    }

    fn needs_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    fn push(&mut self, op: Op<T>, value: Tensor<T>, aux: Option<Tensor<T>>) -> NodeId {
        debug_assert!(
            value.all_finite(),
            "non-finite value produced by {:?}",
            std::mem::discriminant(&op)
        );
        let needs_grad = match &op {
            Op::Param(_) | Op::Embedding { .. } => true,
            Op::Input => false,
            Op::Matmul { a, b, .. } | Op::Add { a, b } | Op::Mul { a, b } => {
                self.needs_grad(*a) || self.needs_grad(*b)
            }
            Op::AddBias { a, bias } => self.needs_grad(*a) || self.needs_grad(*bias),
            Op::RmsNorm { x, gain } => self.needs_grad(*x) || self.needs_grad(*gain),
            Op::Scale { a, .. }
            | Op::Silu { a }
            | Op::Gelu { a }
            | Op::Softmax { a }
            | Op::Rope { a, .. }
            | Op::SliceCols { a, .. }
            | Op::SliceRows { a, .. }
            | Op::Transpose { a }
            | Op::Reshape { a }
            | Op::Sum { a } => self.needs_grad(*a),
            Op::ConcatCols { parts } | Op::ConcatRows { parts } => {
                parts.iter().any(|p| self.needs_grad(*p))
            }
            Op::CrossEntropy { logits, .. } => self.needs_grad(*logits),
        };
        self.nodes.push(Node {
            op,
            value,
            aux,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn param(&mut self, id: ParamId) -> NodeId {
        // Value lives in the store; keep an empty placeholder here.
        self.push(Op::Param(id), Tensor::zeros(vec![0]), None)
    }

    pub fn input(&mut self, value: Tensor<T>) -> NodeId {
        self.push(Op::Input, value, None)
    }

    /// Gather rows of an embedding table; backward scatter-adds.
    pub fn embedding(&mut self, table: ParamId, ids: &[usize]) -> Result<NodeId> {
        let t = self.store.get(table);
        let (v, d) = t.dims2();
        let mut out = Tensor::zeros(vec![ids.len(), d]);
        for (r, &id) in ids.iter().enumerate() {
            if id >= v {
                return Err(Error::Token(format!(
                    "embedding id {id} out of range for table of {v} rows"
                )));
            }
            out.data_mut()[r * d..(r + 1) * d].copy_from_slice(&t.data()[id * d..(id + 1) * d]);
        }
        Ok(self.push(
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            out,
            None,
        ))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.matmul_t(a, false, b, false)
    }

    /// Matrix product with logical transposes on either operand.
    pub fn matmul_t(&mut self, a: NodeId, ta: bool, b: NodeId, tb: bool) -> Result<NodeId> {
        let c = matmul_into(self.value(a), ta, self.value(b), tb, "matmul")?;
        Ok(self.push(Op::Matmul { a, b, ta, tb }, c, None))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::ShapeMismatch {
                op: "add",
                left: va.shape().to_vec(),
                right: vb.shape().to_vec(),
            });
        }
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| x + y)
            .collect();
        let out = Tensor::new(va.shape().to_vec(), data);
        Ok(self.push(Op::Add { a, b }, out, None))
    }

    /// Adds a length-d bias row to every row of a [..., d] tensor.
    pub fn add_bias(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(bias));
        let (_, d) = va.rows_cols();
        if vb.len() != d {
            return Err(Error::ShapeMismatch {
                op: "add_bias",
                left: va.shape().to_vec(),
                right: vb.shape().to_vec(),
            });
        }
        let mut out = va.clone();
        for row in out.data_mut().chunks_mut(d) {
            for (x, &b) in row.iter_mut().zip(vb.data()) {
                *x = *x + b;
            }
        }
        Ok(self.push(Op::AddBias { a, bias }, out, None))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::ShapeMismatch {
                op: "mul",
                left: va.shape().to_vec(),
                right: vb.shape().to_vec(),
            });
        }
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| x * y)
            .collect();
        let out = Tensor::new(va.shape().to_vec(), data);
        Ok(self.push(Op::Mul { a, b }, out, None))
    }

    pub fn scale(&mut self, a: NodeId, c: T) -> NodeId {
        let va = self.value(a);
        let out = Tensor::new(va.shape().to_vec(), va.data().iter().map(|&x| x * c).collect());
        self.push(Op::Scale { a, c }, out, None)
    }

    pub fn silu(&mut self, a: NodeId) -> NodeId {
        let va = self.value(a);
        let data = va.data().iter().map(|&x| x * sigmoid(x)).collect();
        let out = Tensor::new(va.shape().to_vec(), data);
        self.push(Op::Silu { a }, out, None)
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let va = self.value(a);
        let data = va.data().iter().map(|&x| gelu_fwd(x)).collect();
        let out = Tensor::new(va.shape().to_vec(), data);
        self.push(Op::Gelu { a }, out, None)
    }

    /// y = x / sqrt(mean(x^2) + eps) * gain, per last-axis row.
    pub fn rms_norm(&mut self, x: NodeId, gain: NodeId, eps: T) -> Result<NodeId> {
        let (vx, vg) = (self.value(x), self.value(gain));
        let (rows, d) = vx.rows_cols();
        if vg.len() != d {
            return Err(Error::ShapeMismatch {
                op: "rms_norm",
                left: vx.shape().to_vec(),
                right: vg.shape().to_vec(),
            });
        }
        let mut out = Tensor::zeros(vx.shape().to_vec());
        let mut inv_rms = Tensor::zeros(vec![rows]);
        let dn = T::of(d as f64);
        for r in 0..rows {
            let xr = &vx.data()[r * d..(r + 1) * d];
            let ms = xr.iter().fold(T::zero(), |s, &v| s + v * v) / dn;
            let inv = T::one() / (ms + eps).sqrt();
            inv_rms.data_mut()[r] = inv;
            let orow = &mut out.data_mut()[r * d..(r + 1) * d];
            for j in 0..d {
                orow[j] = xr[j] * inv * vg.data()[j];
            }
        }
        Ok(self.push(Op::RmsNorm { x, gain }, out, Some(inv_rms)))
    }

    /// Numerically stable softmax over the last axis.
    pub fn softmax(&mut self, a: NodeId) -> NodeId {
        let va = self.value(a);
        let (rows, d) = va.rows_cols();
        let mut out = Tensor::zeros(va.shape().to_vec());
        for r in 0..rows {
            let xr = &va.data()[r * d..(r + 1) * d];
            let orow = &mut out.data_mut()[r * d..(r + 1) * d];
            softmax_row(xr, orow);
        }
        self.push(Op::Softmax { a }, out, None)
    }

    /// Rotary position embedding applied per d_head-sized column chunk.
    pub fn rope(
        &mut self,
        a: NodeId,
        d_head: usize,
        positions: &[usize],
        base: f64,
    ) -> Result<NodeId> {
        let va = self.value(a);
        let (rows, cols) = va.rows_cols();
        if d_head % 2 != 0 {
            return Err(Error::Config(format!("rope requires even d_head, got {d_head}")));
        }
        if cols % d_head != 0 || positions.len() != rows {
            return Err(Error::ShapeMismatch {
                op: "rope",
                left: va.shape().to_vec(),
                right: vec![positions.len(), d_head],
            });
        }
        let mut out = va.clone();
        rope_apply(out.data_mut(), rows, cols, d_head, positions, base, false);
        Ok(self.push(
            Op::Rope {
                a,
                d_head,
                positions: positions.to_vec(),
                base,
            },
            out,
            None,
        ))
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        let va = self.value(a);
        let (rows, d) = va.rows_cols();
        assert!(start + len <= d, "slice_cols out of range");
        let mut out = Tensor::zeros(vec![rows, len]);
        for r in 0..rows {
            out.data_mut()[r * len..(r + 1) * len]
                .copy_from_slice(&va.data()[r * d + start..r * d + start + len]);
        }
        self.push(Op::SliceCols { a, start, len }, out, None)
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let rows = self.value(parts[0]).rows_cols().0;
        let total: usize = parts.iter().map(|&p| self.value(p).rows_cols().1).sum();
        let mut out = Tensor::zeros(vec![rows, total]);
        let mut off = 0;
        for &p in parts {
            let vp = self.value(p);
            let (pr, pd) = vp.rows_cols();
            assert_eq!(pr, rows, "concat_cols row mismatch");
            for r in 0..rows {
                out.data_mut()[r * total + off..r * total + off + pd]
                    .copy_from_slice(&vp.data()[r * pd..(r + 1) * pd]);
            }
            off += pd;
        }
        self.push(
            Op::ConcatCols {
                parts: parts.to_vec(),
            },
            out,
            None,
        )
    }

    pub fn slice_rows(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        let va = self.value(a);
        let (rows, d) = va.rows_cols();
        assert!(start + len <= rows, "slice_rows out of range");
        let out = Tensor::new(
            vec![len, d],
            va.data()[start * d..(start + len) * d].to_vec(),
        );
        self.push(Op::SliceRows { a, start, len }, out, None)
    }

    /// Concatenation along the sequence (row) axis.
    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        assert!(!parts.is_empty());
        let d = self.value(parts[0]).rows_cols().1;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let vp = self.value(p);
            let (pr, pd) = vp.rows_cols();
            if pd != d {
                return Err(Error::ShapeMismatch {
                    op: "concat_rows",
                    left: vec![rows, d],
                    right: vp.shape().to_vec(),
                });
            }
            rows += pr;
            data.extend_from_slice(vp.data());
        }
        let out = Tensor::new(vec![rows, d], data);
        Ok(self.push(
            Op::ConcatRows {
                parts: parts.to_vec(),
            },
            out,
            None,
        ))
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let va = self.value(a);
        let (rows, d) = va.dims2();
        let mut out = Tensor::zeros(vec![d, rows]);
        for r in 0..rows {
            for c in 0..d {
                out.data_mut()[c * rows + r] = va.data()[r * d + c];
            }
        }
        self.push(Op::Transpose { a }, out, None)
    }

    pub fn reshape(&mut self, a: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let va = self.value(a);
        if shape.iter().product::<usize>() != va.len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                left: va.shape().to_vec(),
                right: shape,
            });
        }
        let out = Tensor::new(shape, va.data().to_vec());
        Ok(self.push(Op::Reshape { a }, out, None))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let total = self
            .value(a)
            .data()
            .iter()
            .fold(T::zero(), |s, &v| s + v);
        self.push(Op::Sum { a }, Tensor::scalar(total), None)
    }

    /// Mean next-token negative log-likelihood over masked rows of [t, V]
    /// logits.
    pub fn cross_entropy(
        &mut self,
        logits: NodeId,
        targets: &[usize],
        mask: &[bool],
    ) -> Result<NodeId> {
        let vl = self.value(logits);
        let (t, v) = vl.dims2();
        if targets.len() != t || mask.len() != t {
            return Err(Error::ShapeMismatch {
                op: "cross_entropy",
                left: vl.shape().to_vec(),
                right: vec![targets.len(), mask.len()],
            });
        }
        if !mask.iter().any(|&m| m) {
            return Err(Error::EmptyInput("cross_entropy mask has no set bits"));
        }
        let mut probs = Tensor::zeros(vec![t, v]);
        let mut loss = T::zero();
        let mut count = 0usize;
        for r in 0..t {
            if !mask[r] {
                continue;
            }
            if targets[r] >= v {
                return Err(Error::Token(format!(
                    "cross_entropy target {} out of vocabulary {v}",
                    targets[r]
                )));
            }
            let xr = &vl.data()[r * v..(r + 1) * v];
            let prow = &mut probs.data_mut()[r * v..(r + 1) * v];
            softmax_row(xr, prow);
            loss = loss - prow[targets[r]].max(T::of(f64::MIN_POSITIVE)).ln();
            count += 1;
        }
        loss = loss / T::of(count as f64);
        Ok(self.push(
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
            },
            Tensor::scalar(loss),
            Some(probs),
        ))
    }

    /// x @ w (+ bias). Weight is stored [in, out].
    pub fn linear(&mut self, x: NodeId, w: NodeId, bias: Option<NodeId>) -> Result<NodeId> {
        let y = self.matmul(x, w)?;
        match bias {
            Some(b) => self.add_bias(y, b),
            None => Ok(y),
        }
    }

    /// Reverse-mode sweep from a scalar loss node.
    pub fn backward(&self, loss: NodeId) -> Gradients<T> {
        assert_eq!(self.value(loss).len(), 1, "backward root must be scalar");
        let mut node_grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        let mut param_grads: Vec<Option<Tensor<T>>> = vec![None; self.store.len()];
        node_grads[loss.0] = Some(Tensor::scalar(T::one()));

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let g = match node_grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.backward_one(i, &g, &mut node_grads, &mut param_grads);
            node_grads[i] = Some(g);
        }
        Gradients {
            node_grads,
            param_grads,
        }
    }

    fn backward_one(
        &self,
        i: usize,
        g: &Tensor<T>,
        node_grads: &mut [Option<Tensor<T>>],
        param_grads: &mut [Option<Tensor<T>>],
    ) {
        let add_node = |grads: &mut [Option<Tensor<T>>], id: NodeId, delta: Tensor<T>| {
            match &mut grads[id.0] {
                Some(acc) => {
                    for (a, b) in acc.data_mut().iter_mut().zip(delta.data()) {
                        *a = *a + *b;
                    }
                }
                slot => *slot = Some(delta),
            }
        };

        match &self.nodes[i].op {
            Op::Input => {}
            Op::Param(pid) => {
                let shape = self.store.get(*pid).shape().to_vec();
                let mut delta = g.clone();
                if delta.shape() != shape.as_slice() {
                    delta = Tensor::new(shape, delta.data().to_vec());
                }
                match &mut param_grads[pid.index()] {
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(delta.data()) {
                            *a = *a + *b;
                        }
                    }
                    slot => *slot = Some(delta),
                }
            }
            Op::Embedding { table, ids } => {
                let t = self.store.get(*table);
                let (_, d) = t.dims2();
                let acc = param_grads[table.index()]
                    .get_or_insert_with(|| Tensor::zeros(t.shape().to_vec()));
                for (r, &id) in ids.iter().enumerate() {
                    let dst = &mut acc.data_mut()[id * d..(id + 1) * d];
                    let src = &g.data()[r * d..(r + 1) * d];
                    for (a, b) in dst.iter_mut().zip(src) {
                        *a = *a + *b;
                    }
                }
            }
            Op::Matmul { a, b, ta, tb } => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.needs_grad(*a) {
                    let (ar, ac) = va.dims2();
                    let mut da = Tensor::uninit(vec![ar, ac]);
                    let (m, n) = g.dims2();
                    if !*ta {
                        // dA[m,k] = dC[m,n] x op(B)^T
                        T::gemm(m, n, ac, T::one(), g.data(), false, vb.data(), !*tb, T::zero(), da.data_mut());
                    } else {
                        // A stored [k,m]; dA = op(B)[k?]  -> dA[k,m] = op(B) x dC^T
                        T::gemm(ar, n, m, T::one(), vb.data(), *tb, g.data(), true, T::zero(), da.data_mut());
                    }
                    add_node(node_grads, *a, da);
                }
                if self.needs_grad(*b) {
                    let (br, bc) = vb.dims2();
                    let mut db = Tensor::uninit(vec![br, bc]);
                    let (m, n) = g.dims2();
                    if !*tb {
                        // dB[k,n] = op(A)^T x dC
                        T::gemm(br, m, n, T::one(), va.data(), !*ta, g.data(), false, T::zero(), db.data_mut());
                    } else {
                        // B stored [n,k]; dB[n,k] = dC^T x op(A)
                        T::gemm(br, m, bc, T::one(), g.data(), true, va.data(), *ta, T::zero(), db.data_mut());
                    }
                    add_node(node_grads, *b, db);
                }
            }
            Op::Add { a, b } => {
                if self.needs_grad(*a) {
                    add_node(node_grads, *a, g.clone());
                }
                if self.needs_grad(*b) {
                    add_node(node_grads, *b, g.clone());
                }
            }
            Op::AddBias { a, bias } => {
                if self.needs_grad(*a) {
                    add_node(node_grads, *a, g.clone());
                }
                if self.needs_grad(*bias) {
                    let d = self.value(*bias).len();
                    let mut db = Tensor::zeros(self.value(*bias).shape().to_vec());
                    for row in g.data().chunks(d) {
                        for (acc, &v) in db.data_mut().iter_mut().zip(row) {
                            *acc = *acc + v;
                        }
                    }
                    add_node(node_grads, *bias, db);
                }
            }
            Op::Mul { a, b } => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.needs_grad(*a) {
                    let data = g.data().iter().zip(vb.data()).map(|(&x, &y)| x * y).collect();
                    add_node(node_grads, *a, Tensor::new(va.shape().to_vec(), data));
                }
                if self.needs_grad(*b) {
                    let data = g.data().iter().zip(va.data()).map(|(&x, &y)| x * y).collect();
                    add_node(node_grads, *b, Tensor::new(vb.shape().to_vec(), data));
                }
            }
            Op::Scale { a, c } => {
                let data = g.data().iter().map(|&x| x * *c).collect();
                add_node(node_grads, *a, Tensor::new(g.shape().to_vec(), data));
            }
            Op::Silu { a } => {
                let va = self.value(*a);
                let data = g
                    .data()
                    .iter()
                    .zip(va.data())
                    .map(|(&gv, &x)| {
                        let s = sigmoid(x);
                        gv * s * (T::one() + x * (T::one() - s))
                    })
                    .collect();
                add_node(node_grads, *a, Tensor::new(va.shape().to_vec(), data));
            }
            Op::Gelu { a } => {
                let va = self.value(*a);
                let data = g
                    .data()
                    .iter()
                    .zip(va.data())
                    .map(|(&gv, &x)| gv * gelu_bwd(x))
                    .collect();
                add_node(node_grads, *a, Tensor::new(va.shape().to_vec(), data));
            }
            Op::RmsNorm { x, gain } => {
                let (vx, vg) = (self.value(*x), self.value(*gain));
                let inv_rms = self.nodes[i].aux.as_ref().expect("rms aux");
                let (rows, d) = vx.rows_cols();
                let dn = T::of(d as f64);
                if self.needs_grad(*x) {
                    let mut dx = Tensor::zeros(vx.shape().to_vec());
                    for r in 0..rows {
                        let inv = inv_rms.data()[r];
                        let xr = &vx.data()[r * d..(r + 1) * d];
                        let gr = &g.data()[r * d..(r + 1) * d];
                        let mut dot = T::zero();
                        for j in 0..d {
                            dot = dot + gr[j] * vg.data()[j] * xr[j];
                        }
                        let coef = inv * inv * inv / dn * dot;
                        let drow = &mut dx.data_mut()[r * d..(r + 1) * d];
                        for j in 0..d {
                            drow[j] = gr[j] * vg.data()[j] * inv - xr[j] * coef;
                        }
                    }
                    add_node(node_grads, *x, dx);
                }
                if self.needs_grad(*gain) {
                    let mut dg = Tensor::zeros(vg.shape().to_vec());
                    for r in 0..rows {
                        let inv = inv_rms.data()[r];
                        for j in 0..d {
                            dg.data_mut()[j] = dg.data_mut()[j]
                                + g.data()[r * d + j] * vx.data()[r * d + j] * inv;
                        }
                    }
                    add_node(node_grads, *gain, dg);
                }
            }
            Op::Softmax { a } => {
                let y = &self.nodes[i].value;
                let (rows, d) = y.rows_cols();
                let mut dx = Tensor::zeros(y.shape().to_vec());
                for r in 0..rows {
                    let yr = &y.data()[r * d..(r + 1) * d];
                    let gr = &g.data()[r * d..(r + 1) * d];
                    let mut dot = T::zero();
                    for j in 0..d {
                        dot = dot + yr[j] * gr[j];
                    }
                    let drow = &mut dx.data_mut()[r * d..(r + 1) * d];
                    for j in 0..d {
                        drow[j] = yr[j] * (gr[j] - dot);
                    }
                }
                add_node(node_grads, *a, dx);
            }
            Op::Rope {
                a,
                d_head,
                positions,
                base,
            } => {
                // Rotation is orthogonal: backward rotates by the negated angle.
                let mut dx = g.clone();
                let (rows, cols) = dx.rows_cols();
                rope_apply(dx.data_mut(), rows, cols, *d_head, positions, *base, true);
                add_node(node_grads, *a, dx);
            }
            Op::SliceCols { a, start, len } => {
                let va = self.value(*a);
                let (rows, d) = va.rows_cols();
                let mut dx = Tensor::zeros(va.shape().to_vec());
                for r in 0..rows {
                    dx.data_mut()[r * d + start..r * d + start + len]
                        .copy_from_slice(&g.data()[r * len..(r + 1) * len]);
                }
                add_node(node_grads, *a, dx);
            }
            Op::ConcatCols { parts } => {
                let (rows, total) = self.nodes[i].value.rows_cols();
                let mut off = 0;
                for &p in parts {
                    let (_, pd) = self.value(p).rows_cols();
                    if self.needs_grad(p) {
                        let mut dp = Tensor::zeros(vec![rows, pd]);
                        for r in 0..rows {
                            dp.data_mut()[r * pd..(r + 1) * pd]
                                .copy_from_slice(&g.data()[r * total + off..r * total + off + pd]);
                        }
                        add_node(node_grads, p, dp);
                    }
                    off += pd;
                }
            }
            Op::SliceRows { a, start, len } => {
                let va = self.value(*a);
                let (_, d) = va.rows_cols();
                let mut dx = Tensor::zeros(va.shape().to_vec());
                dx.data_mut()[start * d..(start + len) * d].copy_from_slice(g.data());
                add_node(node_grads, *a, dx);
            }
            Op::ConcatRows { parts } => {
                let (_, d) = self.nodes[i].value.rows_cols();
                let mut off = 0;
                for &p in parts {
                    let (pr, _) = self.value(p).rows_cols();
                    if self.needs_grad(p) {
                        let dp = Tensor::new(
                            vec![pr, d],
                            g.data()[off * d..(off + pr) * d].to_vec(),
                        );
                        add_node(node_grads, p, dp);
                    }
                    off += pr;
                }
            }
            Op::Transpose { a } => {
                let (gr, gc) = g.dims2();
                let mut dx = Tensor::zeros(vec![gc, gr]);
                for r in 0..gr {
                    for c in 0..gc {
                        dx.data_mut()[c * gr + r] = g.data()[r * gc + c];
                    }
                }
                add_node(node_grads, *a, dx);
            }
            Op::Reshape { a } => {
                let va_shape = self.value(*a).shape().to_vec();
                add_node(node_grads, *a, Tensor::new(va_shape, g.data().to_vec()));
            }
            Op::Sum { a } => {
                let va = self.value(*a);
                let gv = g.item();
                add_node(
                    node_grads,
                    *a,
                    Tensor::new(va.shape().to_vec(), vec![gv; va.len()]),
                );
            }
            Op::CrossEntropy {
                logits,
                targets,
                mask,
            } => {
                let probs = self.nodes[i].aux.as_ref().expect("ce aux");
                let (t, v) = probs.dims2();
                let count = mask.iter().filter(|&&m| m).count();
                let scale = g.item() / T::of(count as f64);
                let mut dl = Tensor::zeros(vec![t, v]);
                for r in 0..t {
                    if !mask[r] {
                        continue;
                    }
                    let prow = &probs.data()[r * v..(r + 1) * v];
                    let drow = &mut dl.data_mut()[r * v..(r + 1) * v];
                    for j in 0..v {
                        drow[j] = prow[j] * scale;
                    }
                    drow[targets[r]] = drow[targets[r]] - scale;
                }
                add_node(node_grads, *logits, dl);
            }
        }
    }
}

#[inline]
fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

fn gelu_fwd<T: Scalar>(x: T) -> T {
    // tanh approximation
    let c = T::of(0.7978845608028654); // sqrt(2/pi)
    let k = T::of(0.044715);
    let half = T::of(0.5);
    half * x * (T::one() + (c * (x + k * x * x * x)).tanh())
}

fn gelu_bwd<T: Scalar>(x: T) -> T {
    let c = T::of(0.7978845608028654);
    let k = T::of(0.044715);
    let half = T::of(0.5);
    let three = T::of(3.0);
    let u = c * (x + k * x * x * x);
    let t = u.tanh();
    let du = c * (T::one() + three * k * x * x);
    half * (T::one() + t) + half * x * (T::one() - t * t) * du
}

fn softmax_row<T: Scalar>(x: &[T], out: &mut [T]) {
    let max = x.iter().cloned().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for (o, &v) in out.iter_mut().zip(x) {
        *o = (v - max).exp();
        sum = sum + *o;
    }
    for o in out.iter_mut() {
        *o = *o / sum;
    }
}

/// In-place rotary rotation over per-head column chunks. Pairs element j with
/// j + d_head/2 inside each head; `inverse` negates the angle (used by the
/// backward rule).
pub(crate) fn rope_apply<T: Scalar>(
    data: &mut [T],
    rows: usize,
    cols: usize,
    d_head: usize,
    positions: &[usize],
    base: f64,
    inverse: bool,
) {
    let half = d_head / 2;
    // frequencies depend only on the pair index; sin/cos only on (row, pair)
    let inv_freq: Vec<f64> = (0..half)
        .map(|j| base.powf(-2.0 * j as f64 / d_head as f64))
        .collect();
    let mut table = vec![(T::zero(), T::zero()); half];
    for r in 0..rows {
        let p = positions[r] as f64;
        for (j, slot) in table.iter_mut().enumerate() {
            let theta = if inverse { -p * inv_freq[j] } else { p * inv_freq[j] };
            *slot = (T::of(theta.sin()), T::of(theta.cos()));
        }
        for h in 0..cols / d_head {
            let off = r * cols + h * d_head;
            for (j, &(sin, cos)) in table.iter().enumerate() {
                let x0 = data[off + j];
                let x1 = data[off + half + j];
                data[off + j] = x0 * cos - x1 * sin;
                data[off + half + j] = x0 * sin + x1 * cos;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{finite_difference_grad, max_relative_error};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor<f64> {
        let n: usize = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    /// Checks the tape gradient of a scalar loss against central finite
    /// differences for every parameter in the store.
    fn check_grads<F>(store: &mut ParamStore<f64>, build: F, tol: f64)
    where
        F: Fn(&mut Graph<f64>) -> NodeId,
    {
        let mut g = Graph::new(store);
        let loss = build(&mut g);
        let grads = g.backward(loss);
        let analytic: Vec<Vec<f64>> = store
            .ids()
            .map(|id| {
                grads
                    .param(id)
                    .map(|t| t.data().to_vec())
                    .unwrap_or_else(|| vec![0.0; store.get(id).len()])
            })
            .collect();
        drop(grads);
        let ids: Vec<ParamId> = store.ids().collect();
        for id in ids {
            let numeric = finite_difference_grad(store, id, 1e-5, |s| {
                let mut g = Graph::new(s);
                let loss = build(&mut g);
                g.value(loss).item()
            });
            let err = max_relative_error(&analytic[id.index()], &numeric, 1e-6);
            assert!(err <= tol, "param {} rel err {err}", id.index());
        }
    }

    #[test]
    fn matmul_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let a = store.add("a", rand_tensor(&mut rng, vec![3, 4]));
        let b = store.add("b", rand_tensor(&mut rng, vec![4, 2]));
        check_grads(
            &mut store,
            |g| {
                let an = g.param(a);
                let bn = g.param(b);
                let c = g.matmul(an, bn).unwrap();
                g.sum(c)
            },
            1e-6,
        );
    }

    #[test]
    fn matmul_transpose_flag_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for (ta, tb) in [(false, true), (true, false), (true, true)] {
            let mut store = ParamStore::new();
            let ash = if ta { vec![4, 3] } else { vec![3, 4] };
            let bsh = if tb { vec![2, 4] } else { vec![4, 2] };
            let a = store.add("a", rand_tensor(&mut rng, ash));
            let b = store.add("b", rand_tensor(&mut rng, bsh));
            check_grads(
                &mut store,
                |g| {
                    let an = g.param(a);
                    let bn = g.param(b);
                    // weight the sum so grads are not uniform
                    let c = g.matmul_t(an, ta, bn, tb).unwrap();
                    let c2 = g.mul(c, c).unwrap();
                    g.sum(c2)
                },
                1e-6,
            );
        }
    }

    #[test]
    fn softmax_symmetry_and_stability() {
        let store = ParamStore::<f64>::new();
        let mut g = Graph::new(&store);
        let x = g.input(Tensor::new(vec![1, 2], vec![0.0, 0.0]));
        let y = g.softmax(x);
        assert_eq!(g.value(y).data(), &[0.5, 0.5]);

        let x = g.input(Tensor::new(vec![1, 2], vec![1000.0, 0.0]));
        let y = g.softmax(x);
        assert!((g.value(y).data()[0] - 1.0).abs() < 1e-12);
        assert!(g.value(y).data()[1] < 1e-12);
    }

    #[test]
    fn softmax_rows_sum_to_one_in_unit_interval() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let store = ParamStore::<f64>::new();
        let mut g = Graph::new(&store);
        let x = g.input(rand_tensor(&mut rng, vec![5, 8]));
        let y = g.softmax(x);
        for row in g.value(y).data().chunks(8) {
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
            assert!(row.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn softmax_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::new();
        let x = store.add("x", rand_tensor(&mut rng, vec![1, 8]));
        let w = rand_tensor(&mut rng, vec![1, 8]);
        check_grads(
            &mut store,
            move |g| {
                let xn = g.param(x);
                let y = g.softmax(xn);
                let wn = g.input(w.clone());
                let p = g.mul(y, wn).unwrap();
                g.sum(p)
            },
            1e-6,
        );
    }

    #[test]
    fn rms_norm_unit_and_zero_cases() {
        let store = ParamStore::<f64>::new();
        let mut g = Graph::new(&store);
        let x = g.input(Tensor::new(vec![1, 4], vec![1.0; 4]));
        let gain = g.input(Tensor::new(vec![4], vec![1.0; 4]));
        let y = g.rms_norm(x, gain, 1e-12).unwrap();
        for &v in g.value(y).data() {
            assert!((v - 1.0).abs() < 1e-6);
        }
        let x = g.input(Tensor::new(vec![1, 4], vec![0.0; 4]));
        let gain = g.input(Tensor::new(vec![4], vec![1.0; 4]));
        let y = g.rms_norm(x, gain, 1e-6).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rms_norm_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let x = store.add("x", rand_tensor(&mut rng, vec![2, 6]));
        let gain = store.add("gain", rand_tensor(&mut rng, vec![6]));
        let w = rand_tensor(&mut rng, vec![2, 6]);
        check_grads(
            &mut store,
            move |g| {
                let xn = g.param(x);
                let gn = g.param(gain);
                let y = g.rms_norm(xn, gn, 1e-6).unwrap();
                let wn = g.input(w.clone());
                let p = g.mul(y, wn).unwrap();
                g.sum(p)
            },
            1e-6,
        );
    }

    #[test]
    fn cross_entropy_uniform_logits_is_log_vocab() {
        let store = ParamStore::<f64>::new();
        let mut g = Graph::new(&store);
        let logits = g.input(Tensor::zeros(vec![3, 256]));
        let loss = g
            .cross_entropy(logits, &[0, 17, 255], &[true, true, true])
            .unwrap();
        assert!((g.value(loss).item() - (256f64).ln()).abs() < 1e-9);
        assert!(((256f64).ln() - 5.5452).abs() < 1e-4);
    }

    #[test]
    fn cross_entropy_margin_limit() {
        let store = ParamStore::<f64>::new();
        let mut prev = f64::INFINITY;
        for margin in [1.0, 5.0, 20.0, 50.0] {
            let mut g = Graph::new(&store);
            let mut data = vec![0.0; 4];
            data[2] = margin;
            let logits = g.input(Tensor::new(vec![1, 4], data));
            let loss = g.cross_entropy(logits, &[2], &[true]).unwrap();
            let l = g.value(loss).item();
            assert!(l < prev);
            prev = l;
        }
        assert!(prev < 1e-12);
    }

    #[test]
    fn cross_entropy_equals_log_softmax_gather_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let logits = rand_tensor(&mut rng, vec![5, 11]);
        let targets: Vec<usize> = (0..5).map(|_| rng.gen_range(0..11)).collect();
        let mask = vec![true, false, true, true, false];

        // independent oracle: direct log-sum-exp and gather
        let mut want = 0.0;
        let mut n = 0;
        for r in 0..5 {
            if !mask[r] {
                continue;
            }
            let row = &logits.data()[r * 11..(r + 1) * 11];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<f64>().ln();
            want += lse - row[targets[r]];
            n += 1;
        }
        want /= n as f64;

        let store = ParamStore::<f64>::new();
        let mut g = Graph::new(&store);
        let ln = g.input(logits);
        let loss = g.cross_entropy(ln, &targets, &mask).unwrap();
        assert!((g.value(loss).item() - want).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_empty_mask_is_error() {
        let store = ParamStore::<f64>::new();
        let mut g = Graph::new(&store);
        let logits = g.input(Tensor::zeros(vec![2, 4]));
        assert!(g.cross_entropy(logits, &[0, 1], &[false, false]).is_err());
    }

    #[test]
    fn cross_entropy_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut store = ParamStore::new();
        let x = store.add("logits", rand_tensor(&mut rng, vec![4, 9]));
        check_grads(
            &mut store,
            |g| {
                let xn = g.param(x);
                g.cross_entropy(xn, &[1, 8, 0, 3], &[true, true, false, true])
                    .unwrap()
            },
            1e-6,
        );
    }

    #[test]
    fn activation_and_bias_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut store = ParamStore::new();
        let x = store.add("x", rand_tensor(&mut rng, vec![3, 5]));
        let b = store.add("b", rand_tensor(&mut rng, vec![5]));
        check_grads(
            &mut store,
            |g| {
                let xn = g.param(x);
                let bn = g.param(b);
                let h = g.add_bias(xn, bn).unwrap();
                let s = g.silu(h);
                let e = g.gelu(s);
                let sc = g.scale(e, 0.7);
                g.sum(sc)
            },
            1e-5,
        );
    }

    #[test]
    fn embedding_scatter_add_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut store = ParamStore::new();
        let table = store.add("emb", rand_tensor(&mut rng, vec![6, 4]));
        // id 2 appears twice: its gradient rows must sum
        check_grads(
            &mut store,
            |g| {
                let rows = g.embedding(table, &[2, 0, 2]).unwrap();
                let sq = g.mul(rows, rows).unwrap();
                g.sum(sq)
            },
            1e-6,
        );
    }

    #[test]
    fn concat_and_slice_gradients_split_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut store = ParamStore::new();
        let a = store.add("a", rand_tensor(&mut rng, vec![2, 3]));
        let b = store.add("b", rand_tensor(&mut rng, vec![4, 3]));
        let mut g = Graph::new(&store);
        let an = g.param(a);
        let bn = g.param(b);
        let cat = g.concat_rows(&[an, bn]).unwrap();
        let sq = g.mul(cat, cat).unwrap();
        let loss = g.sum(sq);
        let grads = g.backward(loss);
        let ga = grads.param(a).unwrap();
        let gb = grads.param(b).unwrap();
        // sum of gradient element counts equals input element counts
        assert_eq!(ga.len() + gb.len(), 2 * 3 + 4 * 3);
        for (i, &v) in ga.data().iter().enumerate() {
            assert!((v - 2.0 * store.get(a).data()[i]).abs() < 1e-12);
        }
        for (i, &v) in gb.data().iter().enumerate() {
            assert!((v - 2.0 * store.get(b).data()[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn slice_and_concat_cols_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut store = ParamStore::new();
        let x = store.add("x", rand_tensor(&mut rng, vec![3, 6]));
        check_grads(
            &mut store,
            |g| {
                let xn = g.param(x);
                let left = g.slice_cols(xn, 0, 2);
                let right = g.slice_cols(xn, 2, 4);
                let swapped = g.concat_cols(&[right, left]);
                let rows = g.slice_rows(swapped, 1, 2);
                let sq = g.mul(rows, rows).unwrap();
                g.sum(sq)
            },
            1e-6,
        );
    }

    #[test]
    fn transpose_and_reshape_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut store = ParamStore::new();
        let x = store.add("x", rand_tensor(&mut rng, vec![3, 4]));
        check_grads(
            &mut store,
            |g| {
                let xn = g.param(x);
                let t = g.transpose(xn);
                let r = g.reshape(t, vec![2, 6]).unwrap();
                let sq = g.mul(r, r).unwrap();
                g.sum(sq)
            },
            1e-6,
        );
    }

    #[test]
    fn rope_position_zero_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let store = ParamStore::<f64>::new();
        let mut g = Graph::new(&store);
        let x = rand_tensor(&mut rng, vec![1, 8]);
        let xn = g.input(x.clone());
        let y = g.rope(xn, 8, &[0], 10000.0).unwrap();
        assert_eq!(g.value(y).data(), x.data());
    }

    #[test]
    fn rope_preserves_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let store = ParamStore::<f64>::new();
        let mut g = Graph::new(&store);
        let x = rand_tensor(&mut rng, vec![3, 8]);
        let norm0: Vec<f64> = x
            .data()
            .chunks(8)
            .map(|r| r.iter().map(|v| v * v).sum::<f64>())
            .collect();
        let xn = g.input(x);
        let y = g.rope(xn, 4, &[5, 9, 120], 10000.0).unwrap();
        let norm1: Vec<f64> = g
            .value(y)
            .data()
            .chunks(8)
            .map(|r| r.iter().map(|v| v * v).sum::<f64>())
            .collect();
        for (a, b) in norm0.iter().zip(&norm1) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn rope_dot_depends_only_on_relative_position() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let store = ParamStore::<f64>::new();
        let q = rand_tensor(&mut rng, vec![1, 8]);
        let k = rand_tensor(&mut rng, vec![1, 8]);
        let dot = |p1: usize, p2: usize| {
            let mut g = Graph::new(&store);
            let qn = g.input(q.clone());
            let kn = g.input(k.clone());
            let qr = g.rope(qn, 8, &[p1], 10000.0).unwrap();
            let kr = g.rope(kn, 8, &[p2], 10000.0).unwrap();
            g.value(qr)
                .data()
                .iter()
                .zip(g.value(kr).data())
                .map(|(a, b)| a * b)
                .sum::<f64>()
        };
        for (p1, p2, q1, q2) in [(7, 3, 11, 7), (20, 15, 105, 100), (4, 4, 90, 90)] {
            assert!((dot(p1, p2) - dot(q1, q2)).abs() < 1e-9);
        }
    }

    #[test]
    fn rope_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let mut store = ParamStore::new();
        let x = store.add("x", rand_tensor(&mut rng, vec![3, 8]));
        check_grads(
            &mut store,
            |g| {
                let xn = g.param(x);
                let y = g.rope(xn, 4, &[0, 3, 17], 10000.0).unwrap();
                let sq = g.mul(y, y).unwrap();
                g.sum(sq)
            },
            1e-6,
        );
    }

    #[test]
    fn rope_odd_head_dim_is_error() {
        let store = ParamStore::<f64>::new();
        let mut g = Graph::new(&store);
        let x = g.input(Tensor::zeros(vec![1, 3]));
        assert!(g.rope(x, 3, &[0], 10000.0).is_err());
    }

    #[test]
    fn forward_is_bitwise_deterministic() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(42);
            let mut store = ParamStore::new();
            let a = store.add("a", rand_tensor(&mut rng, vec![4, 4]));
            let mut g = Graph::new(&store);
            let an = g.param(a);
            let b = g.matmul(an, an).unwrap();
            let c = g.softmax(b);
            let s = g.silu(c);
            let loss = g.sum(s);
            let grads = g.backward(loss);
            (
                g.value(loss).item().to_bits(),
                grads.param(a).unwrap().data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            )
        };
        assert_eq!(run(), run());
    }
}
