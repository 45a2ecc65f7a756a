use std::collections::HashMap;
use std::sync::Arc;

use super::tensor::Float;
use super::{AutodiffError, ParamId, ParamStore, Tensor};

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Matmul { a: Var, b: Var, b_transposed: bool },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, factor: T },
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Concat { inputs: Vec<Var>, axis: usize },
    Slice { a: Var, axis: usize, start: usize, end: usize },
    Reshape(Var),
    Embedding { table: Var, ids: Vec<usize> },
    Softmax(Var),
    LogSoftmax(Var),
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<T> },
    BceWithLogits { logits: Var, targets: Vec<T> },
    MaxOverTime { seq: Var, argmax: Vec<usize> },
    MeanOverTime { seq: Var, lengths: Vec<usize> },
    LastStep { seq: Var, lengths: Vec<usize> },
    Dropout { a: Var, scaled_mask: Vec<T> },
    Sum(Var),
}

#[derive(Debug)]
struct Node<T> {
    value: Arc<Tensor<T>>,
    op: Op<T>,
    tracked: bool,
}

/// Operation tape for reverse-mode differentiation.
///
/// Values are computed eagerly as ops are recorded. Nodes are appended in
/// execution order, so the tape is already topologically sorted and
/// [`Graph::backward`] walks it once in reverse.
#[derive(Debug)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    params: HashMap<ParamId, Var>,
}

impl<T: Float> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(op: &'static str, left: &[usize], right: &[usize]) -> AutodiffError {
    AutodiffError::Shape {
        op,
        left: left.to_vec(),
        right: right.to_vec(),
    }
}

fn stable_sigmoid<T: Float>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// `(rows, cols)` split of a tensor at its last axis.
fn rows_cols(shape: &[usize]) -> (usize, usize) {
    let cols = shape.last().copied().unwrap_or(1);
    let rows = shape.iter().product::<usize>().checked_div(cols).unwrap_or(0);
    (rows, cols)
}

impl<T: Float> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, tracked: bool) -> Var {
        self.nodes.push(Node {
            value: Arc::new(value),
            op,
            tracked,
        });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// A leaf that does not receive gradients.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A leaf that receives gradients (used for inputs under test).
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Imports a parameter. Repeated imports of the same id return the same
    /// node, so every use of a tied weight accumulates into one gradient.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let tracked = store.requires_grad(id);
        self.nodes.push(Node {
            value: store.shared_value(id),
            op: Op::Leaf,
            tracked,
        });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(id, v);
        v
    }

    fn matrix_dims(&self, v: Var, op: &'static str) -> Result<(usize, usize), AutodiffError> {
        match self.shape(v) {
            [r, c] => Ok((*r, *c)),
            s => Err(shape_err(op, s, &[])),
        }
    }

    /// `a · b` for `a: [m, k]`, `b: [k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.matmul_impl(a, b, false)
    }

    /// `a · bᵀ` for `a: [m, k]`, `b: [n, k]`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, bt: bool) -> Result<Var, AutodiffError> {
        let name = if bt { "matmul_bt" } else { "matmul" };
        let (m, k) = self.matrix_dims(a, name)?;
        let (br, bc) = self.matrix_dims(b, name)?;
        let (kb, n) = if bt { (bc, br) } else { (br, bc) };
        if k != kb {
            return Err(shape_err(name, self.shape(a), self.shape(b)));
        }
        let mut out = vec![T::zero(); m * n];
        let (rsb, csb) = if bt { (1, k as isize) } else { (n as isize, 1) };
        T::gemm(
            m,
            k,
            n,
            T::one(),
            self.value(a).data(),
            k as isize,
            1,
            self.value(b).data(),
            rsb,
            csb,
            T::zero(),
            &mut out,
        );
        let tracked = self.tracked(a) || self.tracked(b);
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(
            value,
            Op::Matmul {
                a,
                b,
                b_transposed: bt,
            },
            tracked,
        ))
    }

    fn check_broadcast(&self, op: &'static str, a: Var, b: Var) -> Result<(), AutodiffError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(shape_err(op, sa, sb));
        }
        Ok(())
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        op_name: &'static str,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<Var, AutodiffError> {
        self.check_broadcast(op_name, a, b)?;
        let av = self.value(a);
        let bv = self.value(b).data();
        let inner = bv.len().max(1);
        let data: Vec<T> = av
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, bv[i % inner]))
            .collect();
        let value = Tensor::new(av.shape().to_vec(), data)?;
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(value, op, tracked))
    }

    /// Elementwise sum; `b` may broadcast over leading dimensions of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul { a, b })
    }

    pub fn scale(&mut self, a: Var, factor: T) -> Var {
        let value = self.value(a).map(|x| x * factor);
        let tracked = self.tracked(a);
        self.push(value, Op::Scale { a, factor }, tracked)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(stable_sigmoid);
        let tracked = self.tracked(a);
        self.push(value, Op::Sigmoid(a), tracked)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.tanh());
        let tracked = self.tracked(a);
        self.push(value, Op::Tanh(a), tracked)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.max(T::zero()));
        let tracked = self.tracked(a);
        self.push(value, Op::Relu(a), tracked)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, AutodiffError> {
        let value = (*self.nodes[a.0].value).clone().reshaped(shape)?;
        let tracked = self.tracked(a);
        Ok(self.push(value, Op::Reshape(a), tracked))
    }

    /// Concatenation along `axis`; all other extents must agree.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var, AutodiffError> {
        let first = inputs
            .first()
            .ok_or_else(|| AutodiffError::Usage("concat of zero tensors".into()))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(shape_err("concat", &base, &[axis]));
        }
        let mut axis_total = 0;
        for &v in inputs {
            let s = self.shape(v);
            if s.len() != base.len()
                || s[..axis] != base[..axis]
                || s[axis + 1..] != base[axis + 1..]
            {
                return Err(shape_err("concat", &base, s));
            }
            axis_total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * axis_total * inner);
        for o in 0..outer {
            for &v in inputs {
                let chunk = self.shape(v)[axis] * inner;
                data.extend_from_slice(&self.value(v).data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = axis_total;
        let tracked = inputs.iter().any(|&v| self.tracked(v));
        let value = Tensor::new(shape, data)?;
        Ok(self.push(
            value,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            tracked,
        ))
    }

    /// Half-open range `[start, end)` along `axis`.
    pub fn slice(
        &mut self,
        a: Var,
        axis: usize,
        start: usize,
        end: usize,
    ) -> Result<Var, AutodiffError> {
        let s = self.shape(a).to_vec();
        if axis >= s.len() || start > end || end > s[axis] {
            return Err(shape_err("slice", &s, &[axis, start, end]));
        }
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis + 1..].iter().product();
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(outer * (end - start) * inner);
        for o in 0..outer {
            let base = o * s[axis] * inner;
            data.extend_from_slice(&src[base + start * inner..base + end * inner]);
        }
        let mut shape = s;
        shape[axis] = end - start;
        let tracked = self.tracked(a);
        let value = Tensor::new(shape, data)?;
        Ok(self.push(
            value,
            Op::Slice {
                a,
                axis,
                start,
                end,
            },
            tracked,
        ))
    }

    /// Row gather: `table: [rows, d]`, output `[ids.len(), d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var, AutodiffError> {
        let (rows, d) = self.matrix_dims(table, "embedding")?;
        let src = self.value(table).data();
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= rows {
                return Err(AutodiffError::Index {
                    op: "embedding",
                    index: id,
                    bound: rows,
                });
            }
            data.extend_from_slice(&src[id * d..(id + 1) * d]);
        }
        let tracked = self.tracked(table);
        let value = Tensor::new(vec![ids.len(), d], data)?;
        Ok(self.push(
            value,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            tracked,
        ))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let value = softmax_rows(self.value(a));
        let tracked = self.tracked(a);
        self.push(value, Op::Softmax(a), tracked)
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, a: Var) -> Var {
        let value = log_softmax_rows(self.value(a));
        let tracked = self.tracked(a);
        self.push(value, Op::LogSoftmax(a), tracked)
    }

    /// Mean over rows of `-log_softmax(logits)[target]`, `logits: [n, classes]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var, AutodiffError> {
        let (n, c) = self.matrix_dims(logits, "cross_entropy")?;
        if n != targets.len() {
            return Err(shape_err("cross_entropy", self.shape(logits), &[targets.len()]));
        }
        if n == 0 {
            return Err(AutodiffError::Usage("cross_entropy over zero rows".into()));
        }
        let lsm = log_softmax_rows(self.value(logits));
        let mut total = T::zero();
        for (row, &t) in targets.iter().enumerate() {
            if t >= c {
                return Err(AutodiffError::Index {
                    op: "cross_entropy",
                    index: t,
                    bound: c,
                });
            }
            total -= lsm.data()[row * c + t];
        }
        let loss = total / T::from_f64(n as f64);
        let probs = lsm.data().iter().map(|v| v.exp()).collect();
        let tracked = self.tracked(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            tracked,
        ))
    }

    /// Mean over every element of the numerically stable binary cross-entropy
    /// on logits. `targets` holds 0/1 values with the shape of `logits`.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &Tensor<T>) -> Result<Var, AutodiffError> {
        if self.shape(logits) != targets.shape() {
            return Err(shape_err("bce_with_logits", self.shape(logits), targets.shape()));
        }
        let count = targets.len();
        if count == 0 {
            return Err(AutodiffError::Usage("bce_with_logits over zero elements".into()));
        }
        let mut total = T::zero();
        for (&x, &z) in self.value(logits).data().iter().zip(targets.data()) {
            total += x.max(T::zero()) - x * z + (T::one() + (-x.abs()).exp()).ln();
        }
        let loss = total / T::from_f64(count as f64);
        let tracked = self.tracked(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::BceWithLogits {
                logits,
                targets: targets.data().to_vec(),
            },
            tracked,
        ))
    }

    fn check_seq(&self, seq: Var, lengths: &[usize], op: &'static str) -> Result<(usize, usize, usize), AutodiffError> {
        let (t, b, d) = match self.shape(seq) {
            [t, b, d] => (*t, *b, *d),
            s => return Err(shape_err(op, s, &[])),
        };
        if lengths.len() != b {
            return Err(shape_err(op, self.shape(seq), lengths));
        }
        if let Some(&bad) = lengths.iter().find(|&&l| l == 0 || l > t) {
            return Err(AutodiffError::Usage(format!(
                "{op}: sequence length {bad} outside 1..={t}"
            )));
        }
        Ok((t, b, d))
    }

    /// Elementwise max over valid positions of `seq: [time, batch, d]`.
    pub fn max_over_time(&mut self, seq: Var, lengths: &[usize]) -> Result<Var, AutodiffError> {
        let (_, b, d) = self.check_seq(seq, lengths, "max_over_time")?;
        let src = self.value(seq).data();
        let mut data = vec![T::zero(); b * d];
        let mut argmax = vec![0usize; b * d];
        for (bi, &len) in lengths.iter().enumerate() {
            for j in 0..d {
                let mut best = src[bi * d + j];
                let mut best_t = 0;
                for t in 1..len {
                    let v = src[(t * b + bi) * d + j];
                    if v > best {
                        best = v;
                        best_t = t;
                    }
                }
                data[bi * d + j] = best;
                argmax[bi * d + j] = best_t;
            }
        }
        let tracked = self.tracked(seq);
        let value = Tensor::new(vec![b, d], data)?;
        Ok(self.push(value, Op::MaxOverTime { seq, argmax }, tracked))
    }

    /// Elementwise mean over valid positions of `seq: [time, batch, d]`.
    pub fn mean_over_time(&mut self, seq: Var, lengths: &[usize]) -> Result<Var, AutodiffError> {
        let (_, b, d) = self.check_seq(seq, lengths, "mean_over_time")?;
        let src = self.value(seq).data();
        let mut data = vec![T::zero(); b * d];
        for (bi, &len) in lengths.iter().enumerate() {
            let out = &mut data[bi * d..(bi + 1) * d];
            for t in 0..len {
                let row = &src[(t * b + bi) * d..(t * b + bi + 1) * d];
                for (o, &v) in out.iter_mut().zip(row) {
                    *o += v;
                }
            }
            let inv = T::one() / T::from_f64(len as f64);
            out.iter_mut().for_each(|o| *o *= inv);
        }
        let tracked = self.tracked(seq);
        let value = Tensor::new(vec![b, d], data)?;
        Ok(self.push(
            value,
            Op::MeanOverTime {
                seq,
                lengths: lengths.to_vec(),
            },
            tracked,
        ))
    }

    /// The state at position `length - 1` of each sequence.
    pub fn last_step(&mut self, seq: Var, lengths: &[usize]) -> Result<Var, AutodiffError> {
        let (_, b, d) = self.check_seq(seq, lengths, "last_step")?;
        let src = self.value(seq).data();
        let mut data = Vec::with_capacity(b * d);
        for (bi, &len) in lengths.iter().enumerate() {
            let row = ((len - 1) * b + bi) * d;
            data.extend_from_slice(&src[row..row + d]);
        }
        let tracked = self.tracked(seq);
        let value = Tensor::new(vec![b, d], data)?;
        Ok(self.push(
            value,
            Op::LastStep {
                seq,
                lengths: lengths.to_vec(),
            },
            tracked,
        ))
    }

    /// Applies a caller-supplied keep mask (entries 0 or 1) with inverted
    /// scaling `1 / keep_prob`. The mask shape may be a suffix of the input
    /// shape, in which case it is reused across the leading dimensions.
    pub fn dropout(&mut self, a: Var, mask: &Tensor<T>, keep_prob: T) -> Result<Var, AutodiffError> {
        let sa = self.shape(a);
        let sm = mask.shape();
        if sm.len() > sa.len() || sa[sa.len() - sm.len()..] != *sm {
            return Err(shape_err("dropout", sa, sm));
        }
        if !(keep_prob > T::zero() && keep_prob <= T::one()) {
            return Err(AutodiffError::Usage("dropout keep_prob must be in (0, 1]".into()));
        }
        let inv = T::one() / keep_prob;
        let scaled_mask: Vec<T> = mask.data().iter().map(|&m| m * inv).collect();
        let inner = scaled_mask.len().max(1);
        let data = self
            .value(a)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x * scaled_mask[i % inner])
            .collect();
        let tracked = self.tracked(a);
        let value = Tensor::new(sa.to_vec(), data)?;
        Ok(self.push(value, Op::Dropout { a, scaled_mask }, tracked))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let total = self.value(a).data().iter().copied().sum();
        let tracked = self.tracked(a);
        self.push(Tensor::scalar(total), Op::Sum(a), tracked)
    }

    /// Runs the reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>, AutodiffError> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(AutodiffError::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(lv.shape(), T::one()));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.tracked {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.backward_node(node, &g, &mut grads);
            grads[idx] = Some(g);
        }

        let params = self.params.iter().map(|(&id, &v)| (id, v.0)).collect();
        Ok(Gradients { grads, params })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, delta: Tensor<T>) {
        if !self.tracked(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => g.add_assign(&delta),
            slot @ None => *slot = Some(delta),
        }
    }

    fn backward_node(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Matmul { a, b, b_transposed } => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let (m, k) = (av.shape()[0], av.shape()[1]);
                let n = g.shape()[1];
                if self.tracked(*a) {
                    // dA = dC · Bᵀ  (or dC · B when B was used transposed)
                    let mut da = vec![T::zero(); m * k];
                    let (rsb, csb) = if *b_transposed {
                        (k as isize, 1)
                    } else {
                        (1, n as isize)
                    };
                    T::gemm(m, n, k, T::one(), gd, n as isize, 1, bv.data(), rsb, csb, T::zero(), &mut da);
                    self.accumulate(grads, *a, Tensor::new(vec![m, k], da).unwrap());
                }
                if self.tracked(*b) {
                    if *b_transposed {
                        // dB = dCᵀ · A, shape [n, k]
                        let mut db = vec![T::zero(); n * k];
                        T::gemm(n, m, k, T::one(), gd, 1, n as isize, av.data(), k as isize, 1, T::zero(), &mut db);
                        self.accumulate(grads, *b, Tensor::new(vec![n, k], db).unwrap());
                    } else {
                        // dB = Aᵀ · dC, shape [k, n]
                        let mut db = vec![T::zero(); k * n];
                        T::gemm(k, m, n, T::one(), av.data(), 1, k as isize, gd, n as isize, 1, T::zero(), &mut db);
                        self.accumulate(grads, *b, Tensor::new(vec![k, n], db).unwrap());
                    }
                }
            }
            Op::Add { a, b } | Op::Sub { a, b } => {
                let negate = matches!(node.op, Op::Sub { .. });
                self.accumulate(grads, *a, g.clone());
                if self.tracked(*b) {
                    let mut db = reduce_leading(g, self.shape(*b));
                    if negate {
                        db.data_mut().iter_mut().for_each(|v| *v = -*v);
                    }
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Mul { a, b } => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let inner = bv.len().max(1);
                if self.tracked(*a) {
                    let da = gd
                        .iter()
                        .enumerate()
                        .map(|(i, &x)| x * bv.data()[i % inner])
                        .collect();
                    self.accumulate(grads, *a, Tensor::new(av.shape().to_vec(), da).unwrap());
                }
                if self.tracked(*b) {
                    let prod: Vec<T> = gd.iter().zip(av.data()).map(|(&x, &y)| x * y).collect();
                    let prod = Tensor::new(av.shape().to_vec(), prod).unwrap();
                    self.accumulate(grads, *b, reduce_leading(&prod, bv.shape()));
                }
            }
            Op::Scale { a, factor } => {
                self.accumulate(grads, *a, g.map(|x| x * *factor));
            }
            Op::Sigmoid(a) => {
                let y = node.value.data();
                let da = gd
                    .iter()
                    .zip(y)
                    .map(|(&x, &s)| x * s * (T::one() - s))
                    .collect();
                self.accumulate(grads, *a, Tensor::new(g.shape().to_vec(), da).unwrap());
            }
            Op::Tanh(a) => {
                let y = node.value.data();
                let da = gd
                    .iter()
                    .zip(y)
                    .map(|(&x, &t)| x * (T::one() - t * t))
                    .collect();
                self.accumulate(grads, *a, Tensor::new(g.shape().to_vec(), da).unwrap());
            }
            Op::Relu(a) => {
                let xin = self.value(*a).data();
                let da = gd
                    .iter()
                    .zip(xin)
                    .map(|(&x, &v)| if v > T::zero() { x } else { T::zero() })
                    .collect();
                self.accumulate(grads, *a, Tensor::new(g.shape().to_vec(), da).unwrap());
            }
            Op::Reshape(a) => {
                let da = g.clone().reshaped(self.shape(*a)).unwrap();
                self.accumulate(grads, *a, da);
            }
            Op::Concat { inputs, axis } => {
                let out_shape = g.shape();
                let outer: usize = out_shape[..*axis].iter().product();
                let inner: usize = out_shape[axis + 1..].iter().product();
                let row = out_shape[*axis] * inner;
                let mut offset = 0;
                for &v in inputs {
                    let chunk = self.shape(v)[*axis] * inner;
                    if self.tracked(v) {
                        let mut dv = Vec::with_capacity(outer * chunk);
                        for o in 0..outer {
                            dv.extend_from_slice(&gd[o * row + offset..o * row + offset + chunk]);
                        }
                        self.accumulate(grads, v, Tensor::new(self.shape(v).to_vec(), dv).unwrap());
                    }
                    offset += chunk;
                }
            }
            Op::Slice {
                a,
                axis,
                start,
                end,
            } => {
                let s = self.shape(*a);
                let outer: usize = s[..*axis].iter().product();
                let inner: usize = s[axis + 1..].iter().product();
                let mut da = Tensor::zeros(s);
                let width = (end - start) * inner;
                for o in 0..outer {
                    let dst = o * s[*axis] * inner + start * inner;
                    da.data_mut()[dst..dst + width].copy_from_slice(&gd[o * width..(o + 1) * width]);
                }
                self.accumulate(grads, *a, da);
            }
            Op::Embedding { table, ids } => {
                let s = self.shape(*table);
                let d = s[1];
                let mut dt = Tensor::zeros(s);
                let dtd = dt.data_mut();
                for (row, &id) in ids.iter().enumerate() {
                    for j in 0..d {
                        dtd[id * d + j] += gd[row * d + j];
                    }
                }
                self.accumulate(grads, *table, dt);
            }
            Op::Softmax(a) => {
                let y = node.value.data();
                let (rows, cols) = rows_cols(g.shape());
                let mut da = vec![T::zero(); y.len()];
                for r in 0..rows {
                    let span = r * cols..(r + 1) * cols;
                    let dot: T = gd[span.clone()].iter().zip(&y[span.clone()]).map(|(&a, &b)| a * b).sum();
                    for i in span {
                        da[i] = y[i] * (gd[i] - dot);
                    }
                }
                self.accumulate(grads, *a, Tensor::new(g.shape().to_vec(), da).unwrap());
            }
            Op::LogSoftmax(a) => {
                let y = node.value.data();
                let (rows, cols) = rows_cols(g.shape());
                let mut da = vec![T::zero(); y.len()];
                for r in 0..rows {
                    let span = r * cols..(r + 1) * cols;
                    let total: T = gd[span.clone()].iter().copied().sum();
                    for i in span {
                        da[i] = gd[i] - y[i].exp() * total;
                    }
                }
                self.accumulate(grads, *a, Tensor::new(g.shape().to_vec(), da).unwrap());
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let s = self.shape(*logits);
                let c = s[1];
                let scale = gd[0] / T::from_f64(targets.len() as f64);
                let mut da: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                for (row, &t) in targets.iter().enumerate() {
                    da[row * c + t] -= scale;
                }
                self.accumulate(grads, *logits, Tensor::new(s.to_vec(), da).unwrap());
            }
            Op::BceWithLogits { logits, targets } => {
                let x = self.value(*logits);
                let scale = gd[0] / T::from_f64(targets.len() as f64);
                let da = x
                    .data()
                    .iter()
                    .zip(targets)
                    .map(|(&v, &z)| (stable_sigmoid(v) - z) * scale)
                    .collect();
                self.accumulate(grads, *logits, Tensor::new(x.shape().to_vec(), da).unwrap());
            }
            Op::MaxOverTime { seq, argmax } => {
                let s = self.shape(*seq);
                let (b, d) = (s[1], s[2]);
                let mut ds = Tensor::zeros(s);
                let dsd = ds.data_mut();
                for bi in 0..b {
                    for j in 0..d {
                        let t = argmax[bi * d + j];
                        dsd[(t * b + bi) * d + j] += gd[bi * d + j];
                    }
                }
                self.accumulate(grads, *seq, ds);
            }
            Op::MeanOverTime { seq, lengths } => {
                let s = self.shape(*seq);
                let (b, d) = (s[1], s[2]);
                let mut ds = Tensor::zeros(s);
                let dsd = ds.data_mut();
                for (bi, &len) in lengths.iter().enumerate() {
                    let inv = T::one() / T::from_f64(len as f64);
                    for t in 0..len {
                        for j in 0..d {
                            dsd[(t * b + bi) * d + j] += gd[bi * d + j] * inv;
                        }
                    }
                }
                self.accumulate(grads, *seq, ds);
            }
            Op::LastStep { seq, lengths } => {
                let s = self.shape(*seq);
                let (b, d) = (s[1], s[2]);
                let mut ds = Tensor::zeros(s);
                let dsd = ds.data_mut();
                for (bi, &len) in lengths.iter().enumerate() {
                    let row = ((len - 1) * b + bi) * d;
                    for j in 0..d {
                        dsd[row + j] += gd[bi * d + j];
                    }
                }
                self.accumulate(grads, *seq, ds);
            }
            Op::Dropout { a, scaled_mask } => {
                let inner = scaled_mask.len().max(1);
                let da = gd
                    .iter()
                    .enumerate()
                    .map(|(i, &x)| x * scaled_mask[i % inner])
                    .collect();
                self.accumulate(grads, *a, Tensor::new(g.shape().to_vec(), da).unwrap());
            }
            Op::Sum(a) => {
                let da = Tensor::full(self.shape(*a), gd[0]);
                self.accumulate(grads, *a, da);
            }
        }
    }
}

/// Sums `g` over its leading dimensions down to `target` (a suffix of its shape).
fn reduce_leading<T: Float>(g: &Tensor<T>, target: &[usize]) -> Tensor<T> {
    if g.shape() == target {
        return g.clone();
    }
    let inner: usize = target.iter().product();
    let mut out = Tensor::zeros(target);
    let od = out.data_mut();
    for (i, &v) in g.data().iter().enumerate() {
        od[i % inner] += v;
    }
    out
}

pub(crate) fn softmax_rows<T: Float>(x: &Tensor<T>) -> Tensor<T> {
    let (rows, cols) = rows_cols(x.shape());
    let src = x.data();
    let mut out = vec![T::zero(); src.len()];
    for r in 0..rows {
        let row = &src[r * cols..(r + 1) * cols];
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut total = T::zero();
        for (o, &v) in out[r * cols..(r + 1) * cols].iter_mut().zip(row) {
            *o = (v - max).exp();
            total += *o;
        }
        out[r * cols..(r + 1) * cols]
            .iter_mut()
            .for_each(|o| *o = *o / total);
    }
    Tensor::new(x.shape().to_vec(), out).unwrap()
}

pub(crate) fn log_softmax_rows<T: Float>(x: &Tensor<T>) -> Tensor<T> {
    let (rows, cols) = rows_cols(x.shape());
    let src = x.data();
    let mut out = vec![T::zero(); src.len()];
    for r in 0..rows {
        let row = &src[r * cols..(r + 1) * cols];
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
        for (o, &v) in out[r * cols..(r + 1) * cols].iter_mut().zip(row) {
            *o = v - lse;
        }
    }
    Tensor::new(x.shape().to_vec(), out).unwrap()
}

/// Result of a reverse sweep.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    params: Vec<(ParamId, usize)>,
}

impl<T: Float> Gradients<T> {
    /// Gradient with respect to a recorded node; `None` if the loss does not
    /// depend on it or it is not tracked.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads[v.0].as_ref()
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.params
            .iter()
            .find(|(p, _)| *p == id)
            .and_then(|(_, idx)| self.grads[*idx].as_ref())
    }

    /// Adds parameter gradients into the store's gradient buffers.
    pub fn accumulate_into(&self, store: &mut ParamStore<T>) {
        for &(id, idx) in &self.params {
            if !store.requires_grad(id) {
                continue;
            }
            if let Some(g) = &self.grads[idx] {
                store.grad_mut(id).add_assign(g);
            }
        }
    }
}
