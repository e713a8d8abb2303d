//! Reverse-mode differentiation tape.
//!
//! Operations append nodes to the tape in execution order, which is
//! already a topological order: parents always precede children. The
//! backward sweep walks the tape once in reverse, accumulating exact
//! vector-Jacobian products; fan-out therefore adds gradients.
//!
//! A tape and its tensors belong to one training thread. Independent
//! tapes may run in parallel.

use crate::error::AutogradError;

use super::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorId(usize);

#[derive(Debug, Clone)]
enum Step {
    Leaf,
    Add(TensorId, TensorId),
    Sub(TensorId, TensorId),
    Mul(TensorId, TensorId),
    Scale(TensorId, f64),
    AddScalar(TensorId),
    Matmul {
        a: TensorId,
        b: TensorId,
        m: usize,
        k: usize,
        n: usize,
    },
    Conv2d {
        input: TensorId,
        kernel: TensorId,
        pad: usize,
    },
    BiasAdd {
        x: TensorId,
        bias: TensorId,
    },
    Relu(TensorId),
    Sigmoid(TensorId),
    Log(TensorId),
    Exp(TensorId),
    PowConst(TensorId, f64),
    Clamp {
        x: TensorId,
        lo: f64,
        hi: f64,
    },
    ReduceSum(TensorId),
    ReduceSumLast(TensorId),
    ReduceMax {
        x: TensorId,
        argmax: usize,
    },
    ReduceMaxLast {
        x: TensorId,
        argmax: Vec<usize>,
    },
    Reshape(TensorId),
    Concat {
        a: TensorId,
        b: TensorId,
        axis: usize,
    },
    Grl(TensorId, f64),
    SmoothL1 {
        a: TensorId,
        b: TensorId,
    },
    SoftmaxCeLast {
        logits: TensorId,
        targets: Vec<usize>,
    },
}

struct Node {
    value: Tensor,
    step: Step,
    requires_grad: bool,
}

/// The recording tape. All ops validate shapes eagerly and return the id
/// of the freshly appended node.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Vec<f64>>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, step: Step, requires_grad: bool) -> TensorId {
        self.nodes.push(Node {
            value,
            step,
            requires_grad,
        });
        self.grads.push(Vec::new());
        TensorId(self.nodes.len() - 1)
    }

    fn requires(&self, id: TensorId) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub fn value(&self, id: TensorId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    pub fn data(&self, id: TensorId) -> &[f64] {
        self.nodes[id.0].value.data()
    }

    /// Gradient buffer of a node; empty until `backward` reaches it.
    pub fn grad(&self, id: TensorId) -> &[f64] {
        &self.grads[id.0]
    }

    /// Error out if any entry of the node is NaN or infinite.
    pub fn check_finite(&self, id: TensorId, context: &str) -> Result<(), AutogradError> {
        if self.nodes[id.0].value.all_finite() {
            Ok(())
        } else {
            Err(AutogradError::NonFinite {
                context: context.to_string(),
            })
        }
    }

    // ---- construction -----------------------------------------------------

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> TensorId {
        self.push(value, Step::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> TensorId {
        self.leaf(value, false)
    }

    pub fn scalar(&mut self, value: f64) -> TensorId {
        self.constant(Tensor::scalar(value))
    }

    // ---- elementwise ------------------------------------------------------

    fn same_shape(
        &self,
        op: &'static str,
        a: TensorId,
        b: TensorId,
    ) -> Result<(), AutogradError> {
        if self.shape(a) != self.shape(b) {
            return Err(AutogradError::ShapeMismatch {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, AutogradError> {
        self.same_shape("add", a, b)?;
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| x + y)
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data);
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(value, Step::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, AutogradError> {
        self.same_shape("sub", a, b)?;
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| x - y)
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data);
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(value, Step::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, AutogradError> {
        self.same_shape("mul", a, b)?;
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| x * y)
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data);
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(value, Step::Mul(a, b), rg))
    }

    pub fn scale(&mut self, x: TensorId, c: f64) -> TensorId {
        let data = self.data(x).iter().map(|v| v * c).collect();
        let value = Tensor::new(self.shape(x).to_vec(), data);
        let rg = self.requires(x);
        self.push(value, Step::Scale(x, c), rg)
    }

    pub fn add_scalar(&mut self, x: TensorId, c: f64) -> TensorId {
        let data = self.data(x).iter().map(|v| v + c).collect();
        let value = Tensor::new(self.shape(x).to_vec(), data);
        let rg = self.requires(x);
        self.push(value, Step::AddScalar(x), rg)
    }

    pub fn relu(&mut self, x: TensorId) -> TensorId {
        let data = self.data(x).iter().map(|v| v.max(0.0)).collect();
        let value = Tensor::new(self.shape(x).to_vec(), data);
        let rg = self.requires(x);
        self.push(value, Step::Relu(x), rg)
    }

    pub fn sigmoid(&mut self, x: TensorId) -> TensorId {
        let data = self.data(x).iter().map(|&v| stable_sigmoid(v)).collect();
        let value = Tensor::new(self.shape(x).to_vec(), data);
        let rg = self.requires(x);
        self.push(value, Step::Sigmoid(x), rg)
    }

    pub fn log(&mut self, x: TensorId) -> TensorId {
        let data = self.data(x).iter().map(|v| v.ln()).collect();
        let value = Tensor::new(self.shape(x).to_vec(), data);
        let rg = self.requires(x);
        self.push(value, Step::Log(x), rg)
    }

    pub fn exp(&mut self, x: TensorId) -> TensorId {
        let data = self.data(x).iter().map(|v| v.exp()).collect();
        let value = Tensor::new(self.shape(x).to_vec(), data);
        let rg = self.requires(x);
        self.push(value, Step::Exp(x), rg)
    }

    pub fn pow_const(&mut self, x: TensorId, p: f64) -> TensorId {
        let data = self.data(x).iter().map(|v| v.powf(p)).collect();
        let value = Tensor::new(self.shape(x).to_vec(), data);
        let rg = self.requires(x);
        self.push(value, Step::PowConst(x, p), rg)
    }

    pub fn clamp(&mut self, x: TensorId, lo: f64, hi: f64) -> TensorId {
        let data = self.data(x).iter().map(|v| v.clamp(lo, hi)).collect();
        let value = Tensor::new(self.shape(x).to_vec(), data);
        let rg = self.requires(x);
        self.push(value, Step::Clamp { x, lo, hi }, rg)
    }

    /// Elementwise smooth-L1 of `a - b` with the transition at 1.
    pub fn smooth_l1(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, AutogradError> {
        self.same_shape("smooth_l1", a, b)?;
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| {
                let d = x - y;
                if d.abs() < 1.0 {
                    0.5 * d * d
                } else {
                    d.abs() - 0.5
                }
            })
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data);
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(value, Step::SmoothL1 { a, b }, rg))
    }

    /// Gradient reversal: identity forward, gradient multiplied by
    /// `-lambda` on the way back.
    pub fn grl(&mut self, x: TensorId, lambda: f64) -> TensorId {
        assert!(lambda >= 0.0, "grl strength must be nonnegative");
        let value = self.nodes[x.0].value.clone();
        let rg = self.requires(x);
        self.push(value, Step::Grl(x, lambda), rg)
    }

    // ---- linear algebra ----------------------------------------------------

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, AutogradError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(AutogradError::ShapeMismatch {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        let da = self.data(a);
        let db = self.data(b);
        for i in 0..m {
            for p in 0..k {
                let v = da[i * k + p];
                if v == 0.0 {
                    continue;
                }
                let row = &db[p * n..(p + 1) * n];
                let acc = &mut out[i * n..(i + 1) * n];
                for j in 0..n {
                    acc[j] += v * row[j];
                }
            }
        }
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(
            Tensor::new(vec![m, n], out),
            Step::Matmul { a, b, m, k, n },
            rg,
        ))
    }

    /// Dense 2d cross-correlation, stride 1. Input is `(H, W, Cin)`,
    /// kernel `(kh, kw, Cin, Cout)`, output `(H', W', Cout)` with
    /// `H' = H + 2 pad - kh + 1`.
    pub fn conv2d(
        &mut self,
        input: TensorId,
        kernel: TensorId,
        pad: usize,
    ) -> Result<TensorId, AutogradError> {
        let si = self.shape(input).to_vec();
        let sk = self.shape(kernel).to_vec();
        if si.len() != 3 || sk.len() != 4 || si[2] != sk[2] {
            return Err(AutogradError::ShapeMismatch {
                op: "conv2d",
                lhs: si,
                rhs: sk,
            });
        }
        let (h, w, cin) = (si[0], si[1], si[2]);
        let (kh, kw, cout) = (sk[0], sk[1], sk[3]);
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(AutogradError::InvalidShape {
                op: "conv2d",
                shape: si,
                reason: format!("kernel ({kh},{kw}) larger than padded input"),
            });
        }
        let oh = h + 2 * pad - kh + 1;
        let ow = w + 2 * pad - kw + 1;
        let mut out = vec![0.0; oh * ow * cout];
        let din = self.data(input);
        let dk = self.data(kernel);
        for i in 0..oh {
            for j in 0..ow {
                let acc = &mut out[(i * ow + j) * cout..(i * ow + j + 1) * cout];
                for di in 0..kh {
                    let ii = (i + di).wrapping_sub(pad);
                    if ii >= h {
                        continue;
                    }
                    for dj in 0..kw {
                        let jj = (j + dj).wrapping_sub(pad);
                        if jj >= w {
                            continue;
                        }
                        let in_off = (ii * w + jj) * cin;
                        let k_off = (di * kw + dj) * cin * cout;
                        for ci in 0..cin {
                            let v = din[in_off + ci];
                            if v == 0.0 {
                                continue;
                            }
                            let krow = &dk[k_off + ci * cout..k_off + (ci + 1) * cout];
                            for co in 0..cout {
                                acc[co] += v * krow[co];
                            }
                        }
                    }
                }
            }
        }
        let rg = self.requires(input) || self.requires(kernel);
        Ok(self.push(
            Tensor::new(vec![oh, ow, cout], out),
            Step::Conv2d { input, kernel, pad },
            rg,
        ))
    }

    /// Broadcast-add a `(C,)` bias over the trailing axis of `x`.
    pub fn bias_add(&mut self, x: TensorId, bias: TensorId) -> Result<TensorId, AutogradError> {
        let sx = self.shape(x).to_vec();
        let sb = self.shape(bias).to_vec();
        let c = *sx.last().unwrap_or(&0);
        if sb.len() != 1 || sb[0] != c {
            return Err(AutogradError::ShapeMismatch {
                op: "bias_add",
                lhs: sx,
                rhs: sb,
            });
        }
        let db = self.data(bias).to_vec();
        let data = self
            .data(x)
            .iter()
            .enumerate()
            .map(|(i, v)| v + db[i % c])
            .collect();
        let rg = self.requires(x) || self.requires(bias);
        Ok(self.push(Tensor::new(sx, data), Step::BiasAdd { x, bias }, rg))
    }

    // ---- reductions / shape ------------------------------------------------

    pub fn reduce_sum(&mut self, x: TensorId) -> TensorId {
        let total: f64 = self.data(x).iter().sum();
        let rg = self.requires(x);
        self.push(Tensor::scalar(total), Step::ReduceSum(x), rg)
    }

    /// Sum over the trailing axis; a 1-d input reduces to a scalar.
    pub fn reduce_sum_last(&mut self, x: TensorId) -> TensorId {
        let shape = self.shape(x).to_vec();
        let c = *shape.last().expect("reduce over empty shape");
        let rows = self.data(x).len() / c;
        let mut out = vec![0.0; rows];
        for (r, chunk) in self.data(x).chunks_exact(c).enumerate() {
            out[r] = chunk.iter().sum();
        }
        let out_shape = leading_shape(&shape);
        let rg = self.requires(x);
        self.push(Tensor::new(out_shape, out), Step::ReduceSumLast(x), rg)
    }

    /// Maximum over all entries; gradient routes to the first arg-max.
    pub fn reduce_max(&mut self, x: TensorId) -> TensorId {
        let data = self.data(x);
        let mut best = 0usize;
        for (i, v) in data.iter().enumerate() {
            if *v > data[best] {
                best = i;
            }
        }
        let rg = self.requires(x);
        self.push(
            Tensor::scalar(data[best]),
            Step::ReduceMax { x, argmax: best },
            rg,
        )
    }

    /// Row-wise maximum over the trailing axis, first index on ties.
    pub fn reduce_max_last(&mut self, x: TensorId) -> TensorId {
        let shape = self.shape(x).to_vec();
        let c = *shape.last().expect("reduce over empty shape");
        let rows = self.data(x).len() / c;
        let mut out = vec![0.0; rows];
        let mut argmax = vec![0usize; rows];
        for (r, chunk) in self.data(x).chunks_exact(c).enumerate() {
            let mut best = 0usize;
            for (i, v) in chunk.iter().enumerate() {
                if *v > chunk[best] {
                    best = i;
                }
            }
            out[r] = chunk[best];
            argmax[r] = best;
        }
        let out_shape = leading_shape(&shape);
        let rg = self.requires(x);
        self.push(
            Tensor::new(out_shape, out),
            Step::ReduceMaxLast { x, argmax },
            rg,
        )
    }

    pub fn reshape(&mut self, x: TensorId, shape: Vec<usize>) -> Result<TensorId, AutogradError> {
        let n: usize = shape.iter().product();
        if n != self.data(x).len() {
            return Err(AutogradError::InvalidShape {
                op: "reshape",
                shape,
                reason: format!("element count differs from {}", self.data(x).len()),
            });
        }
        let value = Tensor::new(shape, self.data(x).to_vec());
        let rg = self.requires(x);
        Ok(self.push(value, Step::Reshape(x), rg))
    }

    pub fn concat(
        &mut self,
        a: TensorId,
        b: TensorId,
        axis: usize,
    ) -> Result<TensorId, AutogradError> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let compatible = sa.len() == sb.len()
            && axis < sa.len()
            && sa
                .iter()
                .zip(&sb)
                .enumerate()
                .all(|(i, (x, y))| i == axis || x == y);
        if !compatible {
            return Err(AutogradError::ShapeMismatch {
                op: "concat",
                lhs: sa,
                rhs: sb,
            });
        }
        let outer: usize = sa[..axis].iter().product();
        let inner: usize = sa[axis + 1..].iter().product();
        let block_a = sa[axis] * inner;
        let block_b = sb[axis] * inner;
        let mut out = Vec::with_capacity(self.data(a).len() + self.data(b).len());
        for o in 0..outer {
            out.extend_from_slice(&self.data(a)[o * block_a..(o + 1) * block_a]);
            out.extend_from_slice(&self.data(b)[o * block_b..(o + 1) * block_b]);
        }
        let mut shape = sa.clone();
        shape[axis] += sb[axis];
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(Tensor::new(shape, out), Step::Concat { a, b, axis }, rg))
    }

    /// Row-wise softmax cross-entropy over the trailing axis.
    pub fn softmax_ce_last(
        &mut self,
        logits: TensorId,
        targets: &[usize],
    ) -> Result<TensorId, AutogradError> {
        let shape = self.shape(logits).to_vec();
        let c = *shape.last().expect("softmax over empty shape");
        let rows = self.data(logits).len() / c;
        if targets.len() != rows || targets.iter().any(|t| *t >= c) {
            return Err(AutogradError::InvalidShape {
                op: "softmax_ce_last",
                shape,
                reason: format!("{} targets for {} rows of {} classes", targets.len(), rows, c),
            });
        }
        let mut out = vec![0.0; rows];
        for (r, chunk) in self.data(logits).chunks_exact(c).enumerate() {
            let m = chunk.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + chunk.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            out[r] = lse - chunk[targets[r]];
        }
        let out_shape = leading_shape(&shape);
        let rg = self.requires(logits);
        Ok(self.push(
            Tensor::new(out_shape, out),
            Step::SoftmaxCeLast {
                logits,
                targets: targets.to_vec(),
            },
            rg,
        ))
    }

    /// Mean over all entries.
    pub fn mean(&mut self, x: TensorId) -> TensorId {
        let n = self.data(x).len().max(1);
        let s = self.reduce_sum(x);
        self.scale(s, 1.0 / n as f64)
    }

    // ---- backward ----------------------------------------------------------

    /// Populate gradients of every node reachable from the scalar `loss`.
    /// Repeated calls without clearing accumulate: each sweep runs on a
    /// fresh seed and is added onto the persistent buffers afterwards.
    pub fn backward(&mut self, loss: TensorId) -> Result<(), AutogradError> {
        if !self.nodes[loss.0].value.is_scalar() {
            return Err(AutogradError::NonScalarLoss(
                self.nodes[loss.0].value.shape().to_vec(),
            ));
        }
        let mut local: Vec<Vec<f64>> = self
            .nodes
            .iter()
            .map(|node| vec![0.0; node.value.numel()])
            .collect();
        local[loss.0][0] = 1.0;

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let g = std::mem::take(&mut local[i]);
            self.propagate(i, &g, &mut local);
            local[i] = g;
        }
        for (persistent, fresh) in self.grads.iter_mut().zip(local) {
            if persistent.is_empty() {
                *persistent = fresh;
            } else {
                for (slot, v) in persistent.iter_mut().zip(fresh) {
                    *slot += v;
                }
            }
        }
        Ok(())
    }

    fn add_grad(&self, local: &mut [Vec<f64>], id: TensorId, contribution: impl Iterator<Item = f64>) {
        if !self.nodes[id.0].requires_grad {
            return;
        }
        let buf = &mut local[id.0];
        for (slot, v) in buf.iter_mut().zip(contribution) {
            *slot += v;
        }
    }

    fn propagate(&self, i: usize, g: &[f64], local: &mut [Vec<f64>]) {
        // Cheap steps are cloned out to satisfy the borrow checker; the
        // vectors inside ReduceMaxLast/SoftmaxCeLast are shared per-row
        // metadata, not tensor payloads.
        let step = self.nodes[i].step.clone();
        match step {
            Step::Leaf => {}
            Step::Add(a, b) => {
                self.add_grad(local, a, g.iter().cloned());
                self.add_grad(local, b, g.iter().cloned());
            }
            Step::Sub(a, b) => {
                self.add_grad(local, a, g.iter().cloned());
                self.add_grad(local, b, g.iter().map(|v| -v));
            }
            Step::Mul(a, b) => {
                let da: Vec<f64> = self.data(b).iter().zip(g).map(|(y, gv)| y * gv).collect();
                let db: Vec<f64> = self.data(a).iter().zip(g).map(|(x, gv)| x * gv).collect();
                self.add_grad(local, a, da.into_iter());
                self.add_grad(local, b, db.into_iter());
            }
            Step::Scale(x, c) => {
                self.add_grad(local, x, g.iter().map(|v| v * c));
            }
            Step::AddScalar(x) => {
                self.add_grad(local, x, g.iter().cloned());
            }
            Step::Relu(x) => {
                let dx: Vec<f64> = self
                    .data(x)
                    .iter()
                    .zip(g)
                    .map(|(v, gv)| if *v > 0.0 { *gv } else { 0.0 })
                    .collect();
                self.add_grad(local, x, dx.into_iter());
            }
            Step::Sigmoid(x) => {
                let dx: Vec<f64> = self.nodes[i]
                    .value
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(s, gv)| s * (1.0 - s) * gv)
                    .collect();
                self.add_grad(local, x, dx.into_iter());
            }
            Step::Log(x) => {
                let dx: Vec<f64> = self.data(x).iter().zip(g).map(|(v, gv)| gv / v).collect();
                self.add_grad(local, x, dx.into_iter());
            }
            Step::Exp(x) => {
                let dx: Vec<f64> = self.nodes[i]
                    .value
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(e, gv)| e * gv)
                    .collect();
                self.add_grad(local, x, dx.into_iter());
            }
            Step::PowConst(x, p) => {
                let dx: Vec<f64> = self
                    .data(x)
                    .iter()
                    .zip(g)
                    .map(|(v, gv)| p * v.powf(p - 1.0) * gv)
                    .collect();
                self.add_grad(local, x, dx.into_iter());
            }
            Step::Clamp { x, lo, hi } => {
                let dx: Vec<f64> = self
                    .data(x)
                    .iter()
                    .zip(g)
                    .map(|(v, gv)| if *v >= lo && *v <= hi { *gv } else { 0.0 })
                    .collect();
                self.add_grad(local, x, dx.into_iter());
            }
            Step::SmoothL1 { a, b } => {
                let da: Vec<f64> = self
                    .data(a)
                    .iter()
                    .zip(self.data(b))
                    .zip(g)
                    .map(|((x, y), gv)| (x - y).clamp(-1.0, 1.0) * gv)
                    .collect();
                let db: Vec<f64> = da.iter().map(|v| -v).collect();
                self.add_grad(local, a, da.into_iter());
                self.add_grad(local, b, db.into_iter());
            }
            Step::Grl(x, lambda) => {
                self.add_grad(local, x, g.iter().map(|v| -lambda * v));
            }
            Step::Matmul { a, b, m, k, n } => {
                let da_src = self.data(b);
                let mut da = vec![0.0; m * k];
                for i2 in 0..m {
                    for j in 0..n {
                        let gv = g[i2 * n + j];
                        if gv == 0.0 {
                            continue;
                        }
                        for p in 0..k {
                            da[i2 * k + p] += gv * da_src[p * n + j];
                        }
                    }
                }
                let db_src = self.data(a);
                let mut db = vec![0.0; k * n];
                for i2 in 0..m {
                    for p in 0..k {
                        let v = db_src[i2 * k + p];
                        if v == 0.0 {
                            continue;
                        }
                        for j in 0..n {
                            db[p * n + j] += v * g[i2 * n + j];
                        }
                    }
                }
                self.add_grad(local, a, da.into_iter());
                self.add_grad(local, b, db.into_iter());
            }
            Step::Conv2d { input, kernel, pad } => {
                let si = self.shape(input).to_vec();
                let sk = self.shape(kernel).to_vec();
                let (h, w, cin) = (si[0], si[1], si[2]);
                let (kh, kw, cout) = (sk[0], sk[1], sk[3]);
                let ow = w + 2 * pad - kw + 1;
                let oh = h + 2 * pad - kh + 1;
                let din = self.data(input);
                let dk = self.data(kernel);
                let mut gin = vec![0.0; din.len()];
                let mut gk = vec![0.0; dk.len()];
                for i2 in 0..oh {
                    for j in 0..ow {
                        let gout = &g[(i2 * ow + j) * cout..(i2 * ow + j + 1) * cout];
                        for di in 0..kh {
                            let ii = (i2 + di).wrapping_sub(pad);
                            if ii >= h {
                                continue;
                            }
                            for dj in 0..kw {
                                let jj = (j + dj).wrapping_sub(pad);
                                if jj >= w {
                                    continue;
                                }
                                let in_off = (ii * w + jj) * cin;
                                let k_off = (di * kw + dj) * cin * cout;
                                for ci in 0..cin {
                                    let v = din[in_off + ci];
                                    let krow = &dk[k_off + ci * cout..k_off + (ci + 1) * cout];
                                    let gkrow = &mut gk[k_off + ci * cout..k_off + (ci + 1) * cout];
                                    let mut acc = 0.0;
                                    for co in 0..cout {
                                        acc += gout[co] * krow[co];
                                        gkrow[co] += gout[co] * v;
                                    }
                                    gin[in_off + ci] += acc;
                                }
                            }
                        }
                    }
                }
                self.add_grad(local, input, gin.into_iter());
                self.add_grad(local, kernel, gk.into_iter());
            }
            Step::BiasAdd { x, bias } => {
                let c = self.shape(bias)[0];
                let mut gb = vec![0.0; c];
                for (i2, gv) in g.iter().enumerate() {
                    gb[i2 % c] += gv;
                }
                self.add_grad(local, x, g.iter().cloned());
                self.add_grad(local, bias, gb.into_iter());
            }
            Step::ReduceSum(x) => {
                let n = self.data(x).len();
                let gv = g[0];
                self.add_grad(local, x, std::iter::repeat(gv).take(n));
            }
            Step::ReduceSumLast(x) => {
                let c = *self.shape(x).last().unwrap();
                let dx: Vec<f64> = g.iter().flat_map(|gv| std::iter::repeat(*gv).take(c)).collect();
                self.add_grad(local, x, dx.into_iter());
            }
            Step::ReduceMax { x, argmax } => {
                let n = self.data(x).len();
                let gv = g[0];
                let dx = (0..n).map(move |j| if j == argmax { gv } else { 0.0 });
                self.add_grad(local, x, dx);
            }
            Step::ReduceMaxLast { x, argmax } => {
                let c = *self.shape(x).last().unwrap();
                let mut dx = vec![0.0; self.data(x).len()];
                for (r, &am) in argmax.iter().enumerate() {
                    dx[r * c + am] = g[r];
                }
                self.add_grad(local, x, dx.into_iter());
            }
            Step::Reshape(x) => {
                self.add_grad(local, x, g.iter().cloned());
            }
            Step::Concat { a, b, axis } => {
                let sa = self.shape(a).to_vec();
                let sb = self.shape(b).to_vec();
                let outer: usize = sa[..axis].iter().product();
                let inner: usize = sa[axis + 1..].iter().product();
                let block_a = sa[axis] * inner;
                let block_b = sb[axis] * inner;
                let stride = block_a + block_b;
                let mut ga = vec![0.0; self.data(a).len()];
                let mut gb = vec![0.0; self.data(b).len()];
                for o in 0..outer {
                    ga[o * block_a..(o + 1) * block_a]
                        .copy_from_slice(&g[o * stride..o * stride + block_a]);
                    gb[o * block_b..(o + 1) * block_b]
                        .copy_from_slice(&g[o * stride + block_a..(o + 1) * stride]);
                }
                self.add_grad(local, a, ga.into_iter());
                self.add_grad(local, b, gb.into_iter());
            }
            Step::SoftmaxCeLast { logits, targets } => {
                let c = *self.shape(logits).last().unwrap();
                let mut dx = vec![0.0; self.data(logits).len()];
                {
                    let dl = self.data(logits);
                    for (r, &t) in targets.iter().enumerate() {
                        let chunk = &dl[r * c..(r + 1) * c];
                        let m = chunk.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let denom: f64 = chunk.iter().map(|v| (v - m).exp()).sum();
                        for j in 0..c {
                            let soft = (chunk[j] - m).exp() / denom;
                            let indicator = if j == t { 1.0 } else { 0.0 };
                            dx[r * c + j] = (soft - indicator) * g[r];
                        }
                    }
                }
                self.add_grad(local, logits, dx.into_iter());
            }
        }
    }
}

fn leading_shape(shape: &[usize]) -> Vec<usize> {
    if shape.len() <= 1 {
        vec![1]
    } else {
        shape[..shape.len() - 1].to_vec()
    }
}

fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
