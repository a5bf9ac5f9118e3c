//! Reverse-mode differentiation over a recorded computation graph.
//!
//! A `Tape` is rebuilt for every forward pass (define-by-run): builder
//! methods execute the forward computation immediately and record one node
//! per primitive. `backward` replays the nodes in reverse, so operands
//! always precede their consumers. A tape is confined to one thread;
//! tensors themselves are plain values and move freely between threads.
//!
//! Primitives are tensor-granular. Batched values carry the batch as the
//! leading axis; ops whose name mentions `batch` treat axis 0 that way.

use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId(pub(crate) usize);

struct Node {
    value: Tensor,
    op: Op,
}

enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Neg(NodeId),
    /// Multiply by a constant.
    Scale(NodeId, f64),
    /// Add a constant to every element.
    AddScalar(NodeId),
    /// `a[i, ...] + b[...]` for every leading-axis row `i`.
    AddBroadcast(NodeId, NodeId),
    /// `a[i, ...] - b[...]` for every leading-axis row `i`.
    SubBroadcast(NodeId, NodeId),
    /// Repeat an unbatched tensor across a new leading axis.
    BroadcastToBatch(NodeId),
    /// Divide a tensor elementwise by a scalar node.
    DivByScalar(NodeId, NodeId),
    /// Outer product of unbatched tensors (axes concatenated).
    Outer(NodeId, NodeId),
    /// Per-row outer product of two batched tensors.
    BatchOuter(NodeId, NodeId),
    /// Outer product of a batched tensor with an unbatched one.
    OuterBatchUn(NodeId, NodeId),
    PermuteAxes(NodeId, Vec<usize>),
    FrobeniusSq(NodeId),
    Sqrt(NodeId),
    /// Scalar power with a constant exponent; subgradient 0 at base 0.
    PowScalar(NodeId, f64),
    MeanAxis0(NodeId),
    /// Per-row inner product `out[i] = <a[i, ...], w>` (flattened row-major).
    BatchDot(NodeId, NodeId),
    /// `out[i, o] = sum_j w[o, j] x[i, j]`.
    Linear(NodeId, NodeId),
    Relu(NodeId),
    /// Mean over the batch of the stable logistic loss `-log sigmoid(y t)`.
    LogisticLossMean(NodeId, Rc<Vec<f64>>),
    /// Valid 1-d convolution of one-hot sequences (gathered by letter index)
    /// plus bias: `out[i, c, t] = b[c] + sum_k w[c, seq_i[t+k], k]`.
    ConvSeq {
        seqs: Rc<Vec<Vec<u8>>>,
        weights: NodeId,
        bias: NodeId,
    },
    /// Max over the last axis; `argmax` stores the lowest maximizing index.
    MaxLastAxis(NodeId, Vec<usize>),
}

/// Gradients produced by one backward pass, indexed by node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor> {
        self.grads.get_mut(id.0).and_then(|g| g.take())
    }
}

/// Define-by-run tape of tensor operations.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    /// Records an input node. Leaves are the only nodes whose gradients
    /// survive in the `Gradients` result.
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).add(self.value(b));
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).sub(self.value(b));
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).mul(self.value(b));
        self.push(v, Op::Mul(a, b))
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).scale(-1.0);
        self.push(v, Op::Neg(a))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.value(a).scale(c);
        self.push(v, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.value(a).map(|x| x + c);
        self.push(v, Op::AddScalar(a))
    }

    fn broadcast_rows(a: &Tensor, b: &Tensor) -> usize {
        assert!(a.rank() >= 1, "broadcast needs a batched operand");
        assert_eq!(&a.shape()[1..], b.shape(), "broadcast shape mismatch");
        a.shape()[0]
    }

    pub fn add_broadcast(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (av, bv) = (self.value(a), self.value(b));
        let rows = Self::broadcast_rows(av, bv);
        let chunk = bv.len();
        let mut out = av.clone();
        for i in 0..rows {
            for (o, &x) in out.data_mut()[i * chunk..(i + 1) * chunk]
                .iter_mut()
                .zip(bv.data())
            {
                *o += x;
            }
        }
        self.push(out, Op::AddBroadcast(a, b))
    }

    pub fn sub_broadcast(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (av, bv) = (self.value(a), self.value(b));
        let rows = Self::broadcast_rows(av, bv);
        let chunk = bv.len();
        let mut out = av.clone();
        for i in 0..rows {
            for (o, &x) in out.data_mut()[i * chunk..(i + 1) * chunk]
                .iter_mut()
                .zip(bv.data())
            {
                *o -= x;
            }
        }
        self.push(out, Op::SubBroadcast(a, b))
    }

    pub fn broadcast_to_batch(&mut self, b: NodeId, rows: usize) -> NodeId {
        let bv = self.value(b);
        let mut shape = vec![rows];
        shape.extend_from_slice(bv.shape());
        let mut data = Vec::with_capacity(rows * bv.len());
        for _ in 0..rows {
            data.extend_from_slice(bv.data());
        }
        let out = Tensor::new(shape, data).expect("broadcast shape");
        self.push(out, Op::BroadcastToBatch(b))
    }

    pub fn div_by_scalar(&mut self, a: NodeId, s: NodeId) -> NodeId {
        assert!(self.value(s).is_scalar(), "divisor must be a scalar node");
        let d = self.value(s).scalar_value();
        let v = self.value(a).scale(1.0 / d);
        self.push(v, Op::DivByScalar(a, s))
    }

    pub fn outer(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).outer(self.value(b));
        self.push(v, Op::Outer(a, b))
    }

    pub fn batch_outer(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (av, bv) = (self.value(a), self.value(b));
        assert!(av.rank() >= 1 && bv.rank() >= 1, "batch_outer needs batches");
        let rows = av.shape()[0];
        assert_eq!(rows, bv.shape()[0], "batch_outer batch mismatch");
        let (ca, cb) = (av.len() / rows, bv.len() / rows);
        let mut shape = vec![rows];
        shape.extend_from_slice(&av.shape()[1..]);
        shape.extend_from_slice(&bv.shape()[1..]);
        let mut data = Vec::with_capacity(rows * ca * cb);
        for i in 0..rows {
            let ra = &av.data()[i * ca..(i + 1) * ca];
            let rb = &bv.data()[i * cb..(i + 1) * cb];
            for &x in ra {
                for &y in rb {
                    data.push(x * y);
                }
            }
        }
        let out = Tensor::new(shape, data).expect("batch_outer shape");
        self.push(out, Op::BatchOuter(a, b))
    }

    pub fn outer_batch_un(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (av, bv) = (self.value(a), self.value(b));
        assert!(av.rank() >= 1, "outer_batch_un needs a batched left operand");
        let rows = av.shape()[0];
        let ca = av.len() / rows.max(1);
        let cb = bv.len();
        let mut shape = vec![rows];
        shape.extend_from_slice(&av.shape()[1..]);
        shape.extend_from_slice(bv.shape());
        let mut data = Vec::with_capacity(rows * ca * cb);
        for i in 0..rows {
            let ra = &av.data()[i * ca..(i + 1) * ca];
            for &x in ra {
                for &y in bv.data() {
                    data.push(x * y);
                }
            }
        }
        let out = Tensor::new(shape, data).expect("outer_batch_un shape");
        self.push(out, Op::OuterBatchUn(a, b))
    }

    pub fn permute_axes(&mut self, a: NodeId, perm: &[usize]) -> NodeId {
        let v = self.value(a).permute_axes(perm);
        self.push(v, Op::PermuteAxes(a, perm.to_vec()))
    }

    pub fn frobenius_sq(&mut self, a: NodeId) -> NodeId {
        let v = Tensor::scalar(self.value(a).frobenius_sq());
        self.push(v, Op::FrobeniusSq(a))
    }

    pub fn sqrt(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(f64::sqrt);
        self.push(v, Op::Sqrt(a))
    }

    pub fn pow_scalar(&mut self, a: NodeId, exponent: f64) -> NodeId {
        assert!(self.value(a).is_scalar(), "pow_scalar needs a scalar node");
        let v = Tensor::scalar(self.value(a).scalar_value().powf(exponent));
        self.push(v, Op::PowScalar(a, exponent))
    }

    pub fn mean_axis0(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).mean_axis0();
        self.push(v, Op::MeanAxis0(a))
    }

    pub fn batch_dot(&mut self, a: NodeId, w: NodeId) -> NodeId {
        let (av, wv) = (self.value(a), self.value(w));
        assert!(av.rank() >= 1, "batch_dot needs a batched left operand");
        let rows = av.shape()[0];
        let chunk = av.len() / rows.max(1);
        assert_eq!(chunk, wv.len(), "batch_dot weight length mismatch");
        let mut data = Vec::with_capacity(rows);
        for i in 0..rows {
            let row = &av.data()[i * chunk..(i + 1) * chunk];
            data.push(row.iter().zip(wv.data()).map(|(&x, &y)| x * y).sum());
        }
        let out = Tensor::new(vec![rows], data).expect("batch_dot shape");
        self.push(out, Op::BatchDot(a, w))
    }

    pub fn linear(&mut self, x: NodeId, w: NodeId) -> NodeId {
        let (xv, wv) = (self.value(x), self.value(w));
        assert_eq!(xv.rank(), 2, "linear input must be [batch, in]");
        assert_eq!(wv.rank(), 2, "linear weights must be [out, in]");
        let (rows, din) = (xv.shape()[0], xv.shape()[1]);
        let (dout, win) = (wv.shape()[0], wv.shape()[1]);
        assert_eq!(din, win, "linear width mismatch");
        let mut data = vec![0.0; rows * dout];
        for i in 0..rows {
            let xr = &xv.data()[i * din..(i + 1) * din];
            for o in 0..dout {
                let wr = &wv.data()[o * din..(o + 1) * din];
                data[i * dout + o] = xr.iter().zip(wr).map(|(&a, &b)| a * b).sum();
            }
        }
        let out = Tensor::new(vec![rows, dout], data).expect("linear shape");
        self.push(out, Op::Linear(x, w))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| x.max(0.0));
        self.push(v, Op::Relu(a))
    }

    /// Mean over the batch of `-log sigmoid(y_i t_i)` in log-sum-exp form.
    pub fn logistic_loss_mean(&mut self, logits: NodeId, labels: Rc<Vec<f64>>) -> Result<NodeId> {
        let t = self.value(logits);
        if t.rank() != 1 || t.shape()[0] != labels.len() {
            return Err(Error::Contract(format!(
                "logits shape {:?} does not match {} labels",
                t.shape(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y != 1.0 && y != -1.0) {
            return Err(Error::Contract(format!(
                "labels must be -1 or +1, got {bad}"
            )));
        }
        let mean = t
            .data()
            .iter()
            .zip(labels.iter())
            .map(|(&ti, &yi)| softplus(-yi * ti))
            .sum::<f64>()
            / labels.len() as f64;
        Ok(self.push(Tensor::scalar(mean), Op::LogisticLossMean(logits, labels)))
    }

    /// Valid convolution of letter-index sequences against `weights`
    /// `[channels, alphabet, kernel]` plus `bias` `[channels]`, producing
    /// `[batch, channels, positions]`. Sequences must share one length.
    pub fn conv_seq(
        &mut self,
        seqs: Rc<Vec<Vec<u8>>>,
        weights: NodeId,
        bias: NodeId,
    ) -> Result<NodeId> {
        let wv = self.value(weights);
        let bv = self.value(bias);
        if wv.rank() != 3 {
            return Err(Error::Contract(format!(
                "conv weights must be [channels, alphabet, kernel], got {:?}",
                wv.shape()
            )));
        }
        let (channels, alphabet, kernel) = (wv.shape()[0], wv.shape()[1], wv.shape()[2]);
        if bv.shape() != [channels] {
            return Err(Error::Contract(format!(
                "conv bias shape {:?} does not match {channels} channels",
                bv.shape()
            )));
        }
        let batch = seqs.len();
        if batch == 0 {
            return Err(Error::Contract("conv_seq on an empty batch".into()));
        }
        let len = seqs[0].len();
        for s in seqs.iter() {
            if s.len() != len {
                return Err(Error::Contract(
                    "conv_seq requires equal sequence lengths within a batch".into(),
                ));
            }
            if let Some(&l) = s.iter().find(|&&l| (l as usize) >= alphabet) {
                return Err(Error::Contract(format!(
                    "letter index {l} outside alphabet of size {alphabet}"
                )));
            }
        }
        if len < kernel {
            return Err(Error::SequenceTooShort {
                len,
                kernel_width: kernel,
            });
        }
        let positions = len - kernel + 1;
        let mut data = vec![0.0; batch * channels * positions];
        let w = wv.data();
        let b = bv.data();
        for (i, seq) in seqs.iter().enumerate() {
            for c in 0..channels {
                let wbase = c * alphabet * kernel;
                let obase = (i * channels + c) * positions;
                for t in 0..positions {
                    let mut acc = b[c];
                    for (k, &letter) in seq[t..t + kernel].iter().enumerate() {
                        acc += w[wbase + (letter as usize) * kernel + k];
                    }
                    data[obase + t] = acc;
                }
            }
        }
        let out = Tensor::new(vec![batch, channels, positions], data).expect("conv shape");
        Ok(self.push(
            out,
            Op::ConvSeq {
                seqs,
                weights,
                bias,
            },
        ))
    }

    /// Max over the last axis; ties route the gradient to the lowest index.
    pub fn max_last_axis(&mut self, a: NodeId) -> NodeId {
        let av = self.value(a);
        assert!(av.rank() >= 1, "max_last_axis needs rank >= 1");
        let last = *av.shape().last().unwrap();
        assert!(last > 0, "max over an empty axis");
        let outer = av.len() / last;
        let mut data = Vec::with_capacity(outer);
        let mut argmax = Vec::with_capacity(outer);
        for g in 0..outer {
            let row = &av.data()[g * last..(g + 1) * last];
            let (mut best, mut best_k) = (row[0], 0usize);
            for (k, &v) in row.iter().enumerate().skip(1) {
                if v > best {
                    best = v;
                    best_k = k;
                }
            }
            data.push(best);
            argmax.push(best_k);
        }
        let shape = av.shape()[..av.rank() - 1].to_vec();
        let out = Tensor::new(shape, data).expect("max shape");
        self.push(out, Op::MaxLastAxis(a, argmax))
    }

    /// Backpropagates from a scalar loss node. Gradients are populated for
    /// every leaf reachable from `loss`; intermediate gradients are freed.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        if !self.value(loss).is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss node, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.backprop_node(idx, &g, &mut grads);
            if matches!(self.nodes[idx].op, Op::Leaf) {
                grads[idx] = Some(g);
            }
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let acc = |grads: &mut [Option<Tensor>], id: NodeId, delta: Tensor| {
            match &mut grads[id.0] {
                Some(t) => t.add_assign(&delta),
                slot @ None => *slot = Some(delta),
            }
        };
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(grads, *a, g.clone());
                acc(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(grads, *a, g.clone());
                acc(grads, *b, g.scale(-1.0));
            }
            Op::Mul(a, b) => {
                acc(grads, *a, g.mul(self.value(*b)));
                acc(grads, *b, g.mul(self.value(*a)));
            }
            Op::Neg(a) => acc(grads, *a, g.scale(-1.0)),
            Op::Scale(a, c) => acc(grads, *a, g.scale(*c)),
            Op::AddScalar(a) => acc(grads, *a, g.clone()),
            Op::AddBroadcast(a, b) => {
                acc(grads, *a, g.clone());
                acc(grads, *b, sum_axis0(g, self.value(*b).shape()));
            }
            Op::SubBroadcast(a, b) => {
                acc(grads, *a, g.clone());
                acc(grads, *b, sum_axis0(g, self.value(*b).shape()).scale(-1.0));
            }
            Op::BroadcastToBatch(b) => {
                acc(grads, *b, sum_axis0(g, self.value(*b).shape()));
            }
            Op::DivByScalar(a, s) => {
                let d = self.value(*s).scalar_value();
                acc(grads, *a, g.scale(1.0 / d));
                let num: f64 = g.dot(self.value(*a));
                acc(grads, *s, Tensor::scalar(-num / (d * d)));
            }
            Op::Outer(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (la, lb) = (av.len(), bv.len());
                let mut da = vec![0.0; la];
                let mut db = vec![0.0; lb];
                for (p, dp) in da.iter_mut().enumerate() {
                    let row = &g.data()[p * lb..(p + 1) * lb];
                    *dp = row.iter().zip(bv.data()).map(|(&x, &y)| x * y).sum();
                    for (q, dq) in db.iter_mut().enumerate() {
                        *dq += row[q] * av.data()[p];
                    }
                }
                acc(grads, *a, Tensor::new(av.shape().to_vec(), da).unwrap());
                acc(grads, *b, Tensor::new(bv.shape().to_vec(), db).unwrap());
            }
            Op::BatchOuter(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let rows = av.shape()[0];
                let (ca, cb) = (av.len() / rows, bv.len() / rows);
                let mut da = vec![0.0; av.len()];
                let mut db = vec![0.0; bv.len()];
                for i in 0..rows {
                    let gi = &g.data()[i * ca * cb..(i + 1) * ca * cb];
                    let rb = &bv.data()[i * cb..(i + 1) * cb];
                    let ra = &av.data()[i * ca..(i + 1) * ca];
                    for p in 0..ca {
                        let grow = &gi[p * cb..(p + 1) * cb];
                        da[i * ca + p] = grow.iter().zip(rb).map(|(&x, &y)| x * y).sum();
                        for q in 0..cb {
                            db[i * cb + q] += grow[q] * ra[p];
                        }
                    }
                }
                acc(grads, *a, Tensor::new(av.shape().to_vec(), da).unwrap());
                acc(grads, *b, Tensor::new(bv.shape().to_vec(), db).unwrap());
            }
            Op::OuterBatchUn(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let rows = av.shape()[0];
                let ca = av.len() / rows.max(1);
                let cb = bv.len();
                let mut da = vec![0.0; av.len()];
                let mut db = vec![0.0; cb];
                for i in 0..rows {
                    let gi = &g.data()[i * ca * cb..(i + 1) * ca * cb];
                    let ra = &av.data()[i * ca..(i + 1) * ca];
                    for p in 0..ca {
                        let grow = &gi[p * cb..(p + 1) * cb];
                        da[i * ca + p] = grow.iter().zip(bv.data()).map(|(&x, &y)| x * y).sum();
                        for (q, dq) in db.iter_mut().enumerate() {
                            *dq += grow[q] * ra[p];
                        }
                    }
                }
                acc(grads, *a, Tensor::new(av.shape().to_vec(), da).unwrap());
                acc(grads, *b, Tensor::new(bv.shape().to_vec(), db).unwrap());
            }
            Op::PermuteAxes(a, perm) => {
                let mut inv = vec![0usize; perm.len()];
                for (k, &p) in perm.iter().enumerate() {
                    inv[p] = k;
                }
                acc(grads, *a, g.permute_axes(&inv));
            }
            Op::FrobeniusSq(a) => {
                let s = g.scalar_value();
                acc(grads, *a, self.value(*a).scale(2.0 * s));
            }
            Op::Sqrt(a) => {
                let out = &self.nodes[idx].value;
                acc(grads, *a, g.zip_map(out, |gi, oi| 0.5 * gi / oi));
            }
            Op::PowScalar(a, e) => {
                let base = self.value(*a).scalar_value();
                let d = if base == 0.0 {
                    // subgradient 0 at a zero base for e < 1; exact 0 or 1 otherwise
                    if *e == 1.0 {
                        1.0
                    } else {
                        0.0
                    }
                } else {
                    e * base.powf(e - 1.0)
                };
                acc(grads, *a, Tensor::scalar(g.scalar_value() * d));
            }
            Op::MeanAxis0(a) => {
                let av = self.value(*a);
                let rows = av.shape()[0];
                let chunk = av.len() / rows;
                let mut da = Vec::with_capacity(av.len());
                let inv = 1.0 / rows as f64;
                for _ in 0..rows {
                    da.extend(g.data().iter().map(|&x| x * inv));
                }
                debug_assert_eq!(chunk, g.len());
                acc(grads, *a, Tensor::new(av.shape().to_vec(), da).unwrap());
            }
            Op::BatchDot(a, w) => {
                let (av, wv) = (self.value(*a), self.value(*w));
                let rows = av.shape()[0];
                let chunk = wv.len();
                let mut da = vec![0.0; av.len()];
                let mut dw = vec![0.0; chunk];
                for i in 0..rows {
                    let gi = g.data()[i];
                    let ra = &av.data()[i * chunk..(i + 1) * chunk];
                    for j in 0..chunk {
                        da[i * chunk + j] = gi * wv.data()[j];
                        dw[j] += gi * ra[j];
                    }
                }
                acc(grads, *a, Tensor::new(av.shape().to_vec(), da).unwrap());
                acc(grads, *w, Tensor::new(wv.shape().to_vec(), dw).unwrap());
            }
            Op::Linear(x, w) => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (rows, din) = (xv.shape()[0], xv.shape()[1]);
                let dout = wv.shape()[0];
                let mut dx = vec![0.0; xv.len()];
                let mut dw = vec![0.0; wv.len()];
                for i in 0..rows {
                    let xr = &xv.data()[i * din..(i + 1) * din];
                    for o in 0..dout {
                        let gi = g.data()[i * dout + o];
                        let wr = &wv.data()[o * din..(o + 1) * din];
                        for j in 0..din {
                            dx[i * din + j] += gi * wr[j];
                            dw[o * din + j] += gi * xr[j];
                        }
                    }
                }
                acc(grads, *x, Tensor::new(xv.shape().to_vec(), dx).unwrap());
                acc(grads, *w, Tensor::new(wv.shape().to_vec(), dw).unwrap());
            }
            Op::Relu(a) => {
                let av = self.value(*a);
                acc(
                    grads,
                    *a,
                    g.zip_map(av, |gi, x| if x > 0.0 { gi } else { 0.0 }),
                );
            }
            Op::LogisticLossMean(t, labels) => {
                let tv = self.value(*t);
                let gs = g.scalar_value();
                let inv = 1.0 / labels.len() as f64;
                let dt: Vec<f64> = tv
                    .data()
                    .iter()
                    .zip(labels.iter())
                    .map(|(&ti, &yi)| gs * inv * (-yi) * sigmoid(-yi * ti))
                    .collect();
                acc(grads, *t, Tensor::new(vec![labels.len()], dt).unwrap());
            }
            Op::ConvSeq {
                seqs,
                weights,
                bias,
            } => {
                let wv = self.value(*weights);
                let (channels, alphabet, kernel) = (wv.shape()[0], wv.shape()[1], wv.shape()[2]);
                let positions = self.nodes[idx].value.shape()[2];
                let mut dw = vec![0.0; wv.len()];
                let mut db = vec![0.0; channels];
                for (i, seq) in seqs.iter().enumerate() {
                    for c in 0..channels {
                        let wbase = c * alphabet * kernel;
                        let obase = (i * channels + c) * positions;
                        for t in 0..positions {
                            let gv = g.data()[obase + t];
                            if gv == 0.0 {
                                continue;
                            }
                            db[c] += gv;
                            for (k, &letter) in seq[t..t + kernel].iter().enumerate() {
                                dw[wbase + (letter as usize) * kernel + k] += gv;
                            }
                        }
                    }
                }
                acc(grads, *weights, Tensor::new(wv.shape().to_vec(), dw).unwrap());
                acc(grads, *bias, Tensor::new(vec![channels], db).unwrap());
            }
            Op::MaxLastAxis(a, argmax) => {
                let av = self.value(*a);
                let last = *av.shape().last().unwrap();
                let mut da = vec![0.0; av.len()];
                for (group, &k) in argmax.iter().enumerate() {
                    da[group * last + k] = g.data()[group];
                }
                acc(grads, *a, Tensor::new(av.shape().to_vec(), da).unwrap());
            }
        }
    }
}

/// Sum over the leading axis, yielding a tensor of `inner_shape`.
fn sum_axis0(g: &Tensor, inner_shape: &[usize]) -> Tensor {
    let chunk: usize = inner_shape.iter().product();
    let rows = if chunk == 0 { 0 } else { g.len() / chunk };
    let mut out = vec![0.0; chunk];
    for i in 0..rows {
        for (o, &v) in out.iter_mut().zip(&g.data()[i * chunk..(i + 1) * chunk]) {
            *o += v;
        }
    }
    Tensor::new(inner_shape.to_vec(), out).expect("sum_axis0 shape")
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{central_difference, max_relative_error};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_vec(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(lo..hi)).collect()
    }

    #[test]
    fn square_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0));
        let y = tape.mul(x, x);
        let grads = tape.backward(y).unwrap();
        assert_eq!(tape.value(y).scalar_value(), 9.0);
        assert_eq!(grads.get(x).unwrap().scalar_value(), 6.0);
    }

    #[test]
    fn dot_gradient_is_other_operand() {
        let mut tape = Tape::new();
        let w = tape.leaf(Tensor::new(vec![1, 3], vec![1.0, 2.0, 3.0]).unwrap());
        let v = tape.leaf(Tensor::vector(&[4.0, 5.0, 6.0]));
        let out = tape.batch_dot(w, v);
        let loss = tape.mean_axis0(out);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(w).unwrap().data(), &[4.0, 5.0, 6.0]);
    }

    #[test]
    fn backward_rejects_nonscalar_loss() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(&[1.0, 2.0]));
        let y = tape.relu(x);
        assert!(matches!(tape.backward(y), Err(Error::Contract(_))));
    }

    #[test]
    fn three_layer_composition_matches_finite_differences() {
        // linear -> relu -> batch_dot, checked against the central-difference
        // oracle at 10 seeded points
        for seed in 0..10u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let (b, din, dout) = (3usize, 4usize, 3usize);
            let x = rand_vec(&mut rng, b * din, -1.0, 1.0);
            let theta = rand_vec(&mut rng, dout * din + dout, -1.0, 1.0);
            let f = |p: &[f64]| {
                let mut tape = Tape::new();
                let xs = tape.leaf(Tensor::new(vec![b, din], x.clone()).unwrap());
                let w = tape.leaf(Tensor::new(vec![dout, din], p[..dout * din].to_vec()).unwrap());
                let v = tape.leaf(Tensor::vector(&p[dout * din..]));
                let h = tape.linear(xs, w);
                let h = tape.relu(h);
                let o = tape.batch_dot(h, v);
                let loss = tape.mean_axis0(o);
                tape.value(loss).scalar_value()
            };
            let analytic = {
                let mut tape = Tape::new();
                let xs = tape.leaf(Tensor::new(vec![b, din], x.clone()).unwrap());
                let w = tape
                    .leaf(Tensor::new(vec![dout, din], theta[..dout * din].to_vec()).unwrap());
                let v = tape.leaf(Tensor::vector(&theta[dout * din..]));
                let h = tape.linear(xs, w);
                let h = tape.relu(h);
                let o = tape.batch_dot(h, v);
                let loss = tape.mean_axis0(o);
                let grads = tape.backward(loss).unwrap();
                let mut flat = grads.get(w).unwrap().data().to_vec();
                flat.extend_from_slice(grads.get(v).unwrap().data());
                flat
            };
            let numeric = central_difference(f, &theta, 1e-5);
            assert!(
                max_relative_error(&analytic, &numeric, 1e-6) < 1e-5,
                "seed {seed}"
            );
        }
    }

    /// Builds one primitive over leaf inputs, reduces it to a scalar with a
    /// fixed probe tensor, and checks the backward pass against central
    /// finite differences.
    fn check_primitive(
        name: &str,
        seed: u64,
        shapes: &[Vec<usize>],
        build: impl Fn(&mut Tape, &[NodeId]) -> NodeId,
    ) {
        for point in 0..10u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed * 1000 + point);
            let sizes: Vec<usize> = shapes.iter().map(|s| s.iter().product()).collect();
            let total: usize = sizes.iter().sum();
            // keep inputs away from 0 so sqrt/div/pow stay smooth
            let theta: Vec<f64> = (0..total)
                .map(|_| {
                    let v: f64 = rng.gen_range(0.3..1.5);
                    if rng.gen_bool(0.5) {
                        v
                    } else {
                        -v
                    }
                })
                .collect();
            let run = |p: &[f64], want_grads: bool| -> (f64, Vec<f64>) {
                let mut tape = Tape::new();
                let mut ids = Vec::new();
                let mut off = 0;
                for (shape, &len) in shapes.iter().zip(&sizes) {
                    ids.push(
                        tape.leaf(Tensor::new(shape.clone(), p[off..off + len].to_vec()).unwrap()),
                    );
                    off += len;
                }
                let out = build(&mut tape, &ids);
                let probe_vals: Vec<f64> = (0..tape.value(out).len())
                    .map(|k| 0.25 + 0.5 * ((k as f64) * 0.7).sin())
                    .collect();
                let probe_shape = tape.value(out).shape().to_vec();
                let probe = tape.leaf(Tensor::new(probe_shape, probe_vals).unwrap());
                let prod = tape.mul(out, probe);
                let loss = tape.frobenius_sq(prod);
                let value = tape.value(loss).scalar_value();
                if !want_grads {
                    return (value, Vec::new());
                }
                let grads = tape.backward(loss).unwrap();
                let mut flat = Vec::new();
                for &id in &ids {
                    match grads.get(id) {
                        Some(g) => flat.extend_from_slice(g.data()),
                        None => flat.extend(std::iter::repeat_n(0.0, tape.value(id).len())),
                    }
                }
                (value, flat)
            };
            let (_, analytic) = run(&theta, true);
            let numeric = central_difference(|p| run(p, false).0, &theta, 1e-5);
            let err = max_relative_error(&analytic, &numeric, 1e-6);
            assert!(err < 1e-5, "{name} point {point}: error {err}");
        }
    }

    #[test]
    fn primitives_match_finite_differences() {
        let b2 = vec![2, 3];
        check_primitive("add", 1, &[b2.clone(), b2.clone()], |t, ids| {
            t.add(ids[0], ids[1])
        });
        check_primitive("sub", 2, &[b2.clone(), b2.clone()], |t, ids| {
            t.sub(ids[0], ids[1])
        });
        check_primitive("mul", 3, &[b2.clone(), b2.clone()], |t, ids| {
            t.mul(ids[0], ids[1])
        });
        check_primitive("neg", 4, std::slice::from_ref(&b2), |t, ids| t.neg(ids[0]));
        check_primitive("scale", 5, std::slice::from_ref(&b2), |t, ids| t.scale(ids[0], -1.7));
        check_primitive("add_scalar", 6, std::slice::from_ref(&b2), |t, ids| {
            t.add_scalar(ids[0], 0.9)
        });
        check_primitive("add_broadcast", 7, &[vec![2, 3], vec![3]], |t, ids| {
            t.add_broadcast(ids[0], ids[1])
        });
        check_primitive("sub_broadcast", 8, &[vec![2, 3], vec![3]], |t, ids| {
            t.sub_broadcast(ids[0], ids[1])
        });
        check_primitive("broadcast_to_batch", 9, &[vec![3]], |t, ids| {
            t.broadcast_to_batch(ids[0], 4)
        });
        check_primitive("div_by_scalar", 10, &[b2.clone(), vec![]], |t, ids| {
            t.div_by_scalar(ids[0], ids[1])
        });
        check_primitive("outer", 11, &[vec![2], vec![3]], |t, ids| {
            t.outer(ids[0], ids[1])
        });
        check_primitive("batch_outer", 12, &[vec![2, 2], vec![2, 3]], |t, ids| {
            t.batch_outer(ids[0], ids[1])
        });
        check_primitive("outer_batch_un", 13, &[vec![2, 2], vec![3]], |t, ids| {
            t.outer_batch_un(ids[0], ids[1])
        });
        check_primitive("permute", 14, &[vec![2, 3, 2]], |t, ids| {
            t.permute_axes(ids[0], &[2, 0, 1])
        });
        check_primitive("frobenius_sq", 15, std::slice::from_ref(&b2), |t, ids| {
            t.frobenius_sq(ids[0])
        });
        check_primitive("sqrt", 16, &[vec![]], |t, ids| {
            let sq = t.mul(ids[0], ids[0]);
            let pos = t.add_scalar(sq, 0.5);
            t.sqrt(pos)
        });
        check_primitive("pow_scalar", 17, &[vec![]], |t, ids| {
            let sq = t.mul(ids[0], ids[0]);
            let pos = t.add_scalar(sq, 0.5);
            t.pow_scalar(pos, 0.65)
        });
        check_primitive("mean_axis0", 18, &[vec![4, 2]], |t, ids| {
            t.mean_axis0(ids[0])
        });
        check_primitive("batch_dot", 19, &[vec![3, 2, 2], vec![2, 2]], |t, ids| {
            t.batch_dot(ids[0], ids[1])
        });
        check_primitive("linear", 20, &[vec![3, 4], vec![2, 4]], |t, ids| {
            t.linear(ids[0], ids[1])
        });
        check_primitive("relu", 21, std::slice::from_ref(&b2), |t, ids| t.relu(ids[0]));
        check_primitive("logistic_loss", 22, &[vec![4]], |t, ids| {
            let labels = Rc::new(vec![1.0, -1.0, 1.0, -1.0]);
            t.logistic_loss_mean(ids[0], labels).unwrap()
        });
        check_primitive("max_last_axis", 23, &[vec![2, 2, 3]], |t, ids| {
            t.max_last_axis(ids[0])
        });
        check_primitive("conv_seq", 24, &[vec![2, 4, 3], vec![2]], |t, ids| {
            let seqs = Rc::new(vec![vec![0u8, 1, 2, 3, 0, 2], vec![3u8, 3, 1, 0, 2, 1]]);
            t.conv_seq(seqs, ids[0], ids[1]).unwrap()
        });
    }

    #[test]
    fn max_ties_route_to_lowest_index() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![1, 1, 3], vec![2.0, 5.0, 5.0]).unwrap());
        let m = tape.max_last_axis(x);
        let loss = tape.frobenius_sq(m);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[0.0, 10.0, 0.0]);
    }

    #[test]
    fn logistic_loss_rejects_bad_labels() {
        let mut tape = Tape::new();
        let t = tape.leaf(Tensor::vector(&[0.3, -0.2]));
        let err = tape.logistic_loss_mean(t, Rc::new(vec![1.0, 0.0]));
        assert!(matches!(err, Err(Error::Contract(_))));
    }

    #[test]
    fn conv_seq_rejects_short_sequences() {
        let mut tape = Tape::new();
        let w = tape.leaf(Tensor::zeros(&[1, 4, 7]));
        let b = tape.leaf(Tensor::zeros(&[1]));
        let err = tape.conv_seq(Rc::new(vec![vec![0u8, 1, 2]]), w, b);
        assert!(matches!(err, Err(Error::SequenceTooShort { .. })));
    }
}
