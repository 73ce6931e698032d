//! Reverse-mode autodiff tape over dense f64 matrices.
//!
//! Every tensor in the lab is a 2-D `ndarray::Array2<f64>`; scalars are 1x1.
//! Ops are recorded eagerly on a per-step tape and `backward` replays it in
//! reverse insertion order, which is always a valid reverse topological order
//! because parents are created before children.
//!
//! Gradient partitioning for adversarial training is structural: `detach`
//! cuts the tape, and parameters bound as constants never receive gradients.

use ndarray::{concatenate, Array2, Axis};

pub const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
pub const GELU_A: f64 = 0.044_715;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub usize);

/// Which input a [`SelectGather`](Op::SelectGather) row comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RowSource {
    A,
    B,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Detach,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    AddScalar(NodeId),
    MulScalar(NodeId, f64),
    MatMul(NodeId, NodeId),
    /// a @ b^T
    MatMulNT(NodeId, NodeId),
    AddBias(NodeId, NodeId),
    RowSoftmax(NodeId),
    RowLogSoftmax(NodeId),
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        eps: f64,
    },
    Gelu(NodeId),
    Sigmoid(NodeId),
    Ln(NodeId),
    Clamp {
        x: NodeId,
        lo: f64,
        hi: f64,
    },
    SumAll(NodeId),
    MaskedMeanRows {
        x: NodeId,
        mask: Vec<bool>,
    },
    ZeroMaskedRows {
        x: NodeId,
        mask: Vec<bool>,
    },
    MaskFill {
        x: NodeId,
        mask: Array2<bool>,
    },
    GatherRows {
        table: NodeId,
        idx: Vec<usize>,
    },
    SelectGather {
        a: NodeId,
        b: NodeId,
        plan: Vec<(RowSource, usize)>,
    },
    ConcatRows(Vec<NodeId>),
    ConcatCols(Vec<NodeId>),
    SliceCols {
        x: NodeId,
        start: usize,
        len: usize,
    },
    GatherNll {
        log_probs: NodeId,
        targets: Vec<usize>,
        mask: Vec<bool>,
    },
    /// Stores the precomputed gradient of the loss w.r.t. the log-prob input.
    CtcLoss {
        log_probs: NodeId,
        grad: Array2<f64>,
    },
    Dropout {
        x: NodeId,
        mask: Array2<f64>,
    },
    UnfoldRows {
        x: NodeId,
        kernel: usize,
        stride: usize,
        pad: usize,
    },
    RowL2Normalize(NodeId),
}

struct Node {
    value: Array2<f64>,
    grad: Option<Array2<f64>>,
    op: Op,
    requires_grad: bool,
}

/// The tape. One per training step (or per evaluated example).
pub struct Graph {
    nodes: Vec<Node>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Array2<f64>, op: Op, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            grad: None,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn requires(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub fn value(&self, id: NodeId) -> &Array2<f64> {
        &self.nodes[id.0].value
    }

    pub fn scalar_value(&self, id: NodeId) -> f64 {
        let v = &self.nodes[id.0].value;
        debug_assert_eq!(v.dim(), (1, 1));
        v[[0, 0]]
    }

    /// Gradient of the last `backward` target w.r.t. this node, if any path
    /// reached it. `None` means the gradient is structurally zero.
    pub fn grad(&self, id: NodeId) -> Option<&Array2<f64>> {
        self.nodes[id.0].grad.as_ref()
    }

    // ── node constructors ───────────────────────────────────────────────

    pub fn leaf(&mut self, value: Array2<f64>) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    pub fn constant(&mut self, value: Array2<f64>) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    pub fn scalar(&mut self, v: f64) -> NodeId {
        self.constant(Array2::from_elem((1, 1), v))
    }

    /// Copies the value and cuts the gradient path.
    pub fn detach(&mut self, x: NodeId) -> NodeId {
        let v = self.nodes[x.0].value.clone();
        self.push(v, Op::Detach, false)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = &self.nodes[a.0].value + &self.nodes[b.0].value;
        let rg = self.requires(a) || self.requires(b);
        self.push(v, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = &self.nodes[a.0].value - &self.nodes[b.0].value;
        let rg = self.requires(a) || self.requires(b);
        self.push(v, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = &self.nodes[a.0].value * &self.nodes[b.0].value;
        let rg = self.requires(a) || self.requires(b);
        self.push(v, Op::Mul(a, b), rg)
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.nodes[a.0].value.mapv(|x| x + c);
        let rg = self.requires(a);
        self.push(v, Op::AddScalar(a), rg)
    }

    pub fn mul_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.nodes[a.0].value.mapv(|x| x * c);
        let rg = self.requires(a);
        self.push(v, Op::MulScalar(a, c), rg)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.nodes[a.0].value.dot(&self.nodes[b.0].value);
        let rg = self.requires(a) || self.requires(b);
        self.push(v, Op::MatMul(a, b), rg)
    }

    /// a @ b^T. Used for attention scores and the weight-tied output layer.
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.nodes[a.0].value.dot(&self.nodes[b.0].value.t());
        let rg = self.requires(a) || self.requires(b);
        self.push(v, Op::MatMulNT(a, b), rg)
    }

    /// Broadcast-add a 1 x d bias row to every row of a.
    pub fn add_bias(&mut self, a: NodeId, bias: NodeId) -> NodeId {
        let b = &self.nodes[bias.0].value;
        debug_assert_eq!(b.nrows(), 1);
        let v = &self.nodes[a.0].value + &b.row(0);
        let rg = self.requires(a) || self.requires(bias);
        self.push(v, Op::AddBias(a, bias), rg)
    }

    pub fn row_softmax(&mut self, a: NodeId) -> NodeId {
        let x = &self.nodes[a.0].value;
        let mut v = x.clone();
        for mut row in v.rows_mut() {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            row.mapv_inplace(|z| (z - m).exp());
            let s: f64 = row.sum();
            row.mapv_inplace(|z| z / s);
        }
        let rg = self.requires(a);
        self.push(v, Op::RowSoftmax(a), rg)
    }

    pub fn row_log_softmax(&mut self, a: NodeId) -> NodeId {
        let x = &self.nodes[a.0].value;
        let mut v = x.clone();
        for mut row in v.rows_mut() {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|z| (z - m).exp()).sum::<f64>().ln();
            row.mapv_inplace(|z| z - lse);
        }
        let rg = self.requires(a);
        self.push(v, Op::RowLogSoftmax(a), rg)
    }

    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId, eps: f64) -> NodeId {
        let xs = &self.nodes[x.0].value;
        let g = &self.nodes[gain.0].value;
        let b = &self.nodes[bias.0].value;
        let d = xs.ncols() as f64;
        let mut v = xs.clone();
        for mut row in v.rows_mut() {
            let mean = row.sum() / d;
            let var = row.iter().map(|z| (z - mean) * (z - mean)).sum::<f64>() / d;
            let inv = 1.0 / (var + eps).sqrt();
            for (j, z) in row.iter_mut().enumerate() {
                *z = (*z - mean) * inv * g[[0, j]] + b[[0, j]];
            }
        }
        let rg = self.requires(x) || self.requires(gain) || self.requires(bias);
        self.push(v, Op::LayerNorm { x, gain, bias, eps }, rg)
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a.0].value.mapv(gelu);
        let rg = self.requires(a);
        self.push(v, Op::Gelu(a), rg)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a.0].value.mapv(sigmoid);
        let rg = self.requires(a);
        self.push(v, Op::Sigmoid(a), rg)
    }

    pub fn ln(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a.0].value.mapv(f64::ln);
        let rg = self.requires(a);
        self.push(v, Op::Ln(a), rg)
    }

    pub fn clamp(&mut self, x: NodeId, lo: f64, hi: f64) -> NodeId {
        let v = self.nodes[x.0].value.mapv(|z| z.clamp(lo, hi));
        let rg = self.requires(x);
        self.push(v, Op::Clamp { x, lo, hi }, rg)
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let s = self.nodes[a.0].value.sum();
        let rg = self.requires(a);
        self.push(Array2::from_elem((1, 1), s), Op::SumAll(a), rg)
    }

    /// Mean over valid rows only; returns 1 x d. At least one row must be valid.
    pub fn masked_mean_rows(&mut self, x: NodeId, mask: &[bool]) -> NodeId {
        let xs = &self.nodes[x.0].value;
        debug_assert_eq!(xs.nrows(), mask.len());
        let n_valid = mask.iter().filter(|m| **m).count();
        assert!(n_valid > 0, "masked_mean_rows: no valid rows");
        let mut acc = Array2::zeros((1, xs.ncols()));
        for (i, &keep) in mask.iter().enumerate() {
            if keep {
                acc.row_mut(0).scaled_add(1.0, &xs.row(i));
            }
        }
        acc.mapv_inplace(|z| z / n_valid as f64);
        let rg = self.requires(x);
        self.push(
            acc,
            Op::MaskedMeanRows {
                x,
                mask: mask.to_vec(),
            },
            rg,
        )
    }

    /// Copies valid rows, writes exact zeros to masked rows. NaN-safe: masked
    /// cells are overwritten, never multiplied.
    pub fn zero_masked_rows(&mut self, x: NodeId, mask: &[bool]) -> NodeId {
        let xs = &self.nodes[x.0].value;
        debug_assert_eq!(xs.nrows(), mask.len());
        let mut v = Array2::zeros(xs.dim());
        for (i, &keep) in mask.iter().enumerate() {
            if keep {
                v.row_mut(i).assign(&xs.row(i));
            }
        }
        let rg = self.requires(x);
        self.push(
            v,
            Op::ZeroMaskedRows {
                x,
                mask: mask.to_vec(),
            },
            rg,
        )
    }

    /// Where mask is true the output is `fill`, else the input value. Select,
    /// not arithmetic, so poisoned (NaN) cells cannot leak through.
    pub fn mask_fill(&mut self, x: NodeId, mask: &Array2<bool>, fill: f64) -> NodeId {
        let xs = &self.nodes[x.0].value;
        debug_assert_eq!(xs.dim(), mask.dim());
        let mut v = xs.clone();
        for ((i, j), m) in mask.indexed_iter() {
            if *m {
                v[[i, j]] = fill;
            }
        }
        let rg = self.requires(x);
        self.push(
            v,
            Op::MaskFill {
                x,
                mask: mask.clone(),
            },
            rg,
        )
    }

    pub fn gather_rows(&mut self, table: NodeId, idx: &[usize]) -> NodeId {
        let t = &self.nodes[table.0].value;
        let mut v = Array2::zeros((idx.len(), t.ncols()));
        for (i, &r) in idx.iter().enumerate() {
            v.row_mut(i).assign(&t.row(r));
        }
        let rg = self.requires(table);
        self.push(
            v,
            Op::GatherRows {
                table,
                idx: idx.to_vec(),
            },
            rg,
        )
    }

    /// Builds a new matrix row by row from two sources. Powers the mix-up and
    /// noising paths of enhanced adversarial training.
    pub fn select_gather(&mut self, a: NodeId, b: NodeId, plan: &[(RowSource, usize)]) -> NodeId {
        let va = &self.nodes[a.0].value;
        let vb = &self.nodes[b.0].value;
        debug_assert_eq!(va.ncols(), vb.ncols());
        let mut v = Array2::zeros((plan.len(), va.ncols()));
        for (i, (src, r)) in plan.iter().enumerate() {
            match src {
                RowSource::A => v.row_mut(i).assign(&va.row(*r)),
                RowSource::B => v.row_mut(i).assign(&vb.row(*r)),
            }
        }
        let rg = self.requires(a) || self.requires(b);
        self.push(
            v,
            Op::SelectGather {
                a,
                b,
                plan: plan.to_vec(),
            },
            rg,
        )
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let views: Vec<_> = parts.iter().map(|p| self.nodes[p.0].value.view()).collect();
        let v = concatenate(Axis(0), &views).expect("concat_rows: column mismatch");
        let rg = parts.iter().any(|p| self.requires(*p));
        self.push(v, Op::ConcatRows(parts.to_vec()), rg)
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let views: Vec<_> = parts.iter().map(|p| self.nodes[p.0].value.view()).collect();
        let v = concatenate(Axis(1), &views).expect("concat_cols: row mismatch");
        let rg = parts.iter().any(|p| self.requires(*p));
        self.push(v, Op::ConcatCols(parts.to_vec()), rg)
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> NodeId {
        let v = self.nodes[x.0]
            .value
            .slice(ndarray::s![.., start..start + len])
            .to_owned();
        let rg = self.requires(x);
        self.push(v, Op::SliceCols { x, start, len }, rg)
    }

    /// Sum of -log_probs[i, targets[i]] over unmasked positions; 1 x 1.
    pub fn gather_nll(&mut self, log_probs: NodeId, targets: &[usize], mask: &[bool]) -> NodeId {
        let lp = &self.nodes[log_probs.0].value;
        debug_assert_eq!(lp.nrows(), targets.len());
        debug_assert_eq!(targets.len(), mask.len());
        let mut s = 0.0;
        for (i, (&t, &m)) in targets.iter().zip(mask).enumerate() {
            if m {
                s -= lp[[i, t]];
            }
        }
        let rg = self.requires(log_probs);
        self.push(
            Array2::from_elem((1, 1), s),
            Op::GatherNll {
                log_probs,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
            },
            rg,
        )
    }

    /// Records a fused loss node whose input gradient was precomputed by the
    /// caller (the CTC forward-backward recursion lives in `objectives`).
    pub fn fused_loss(&mut self, log_probs: NodeId, loss: f64, grad: Array2<f64>) -> NodeId {
        debug_assert_eq!(grad.dim(), self.nodes[log_probs.0].value.dim());
        let rg = self.requires(log_probs);
        self.push(
            Array2::from_elem((1, 1), loss),
            Op::CtcLoss { log_probs, grad },
            rg,
        )
    }

    /// Inverted-scale dropout; mask entries are 0.0 or 1/keep_prob.
    pub fn dropout(&mut self, x: NodeId, keep_prob: f64, rng: &mut impl rand::Rng) -> NodeId {
        debug_assert!(keep_prob > 0.0 && keep_prob <= 1.0);
        if keep_prob >= 1.0 {
            return x;
        }
        let xs = &self.nodes[x.0].value;
        let scale = 1.0 / keep_prob;
        let mask = Array2::from_shape_fn(xs.dim(), |_| {
            if rng.gen::<f64>() < keep_prob {
                scale
            } else {
                0.0
            }
        });
        let v = xs * &mask;
        let rg = self.requires(x);
        self.push(v, Op::Dropout { x, mask }, rg)
    }

    /// im2col over rows with implicit zero padding: [T x d] -> [T_out x k*d]
    /// with T_out = floor((T + 2*pad - kernel)/stride) + 1.
    pub fn unfold_rows(&mut self, x: NodeId, kernel: usize, stride: usize, pad: usize) -> NodeId {
        let xs = &self.nodes[x.0].value;
        let t = xs.nrows();
        let d = xs.ncols();
        let t_out = (t + 2 * pad - kernel) / stride + 1;
        let mut v = Array2::zeros((t_out, kernel * d));
        for to in 0..t_out {
            for k in 0..kernel {
                let src = to as isize * stride as isize - pad as isize + k as isize;
                if src >= 0 && (src as usize) < t {
                    v.slice_mut(ndarray::s![to, k * d..(k + 1) * d])
                        .assign(&xs.row(src as usize));
                }
            }
        }
        let rg = self.requires(x);
        self.push(
            v,
            Op::UnfoldRows {
                x,
                kernel,
                stride,
                pad,
            },
            rg,
        )
    }

    /// Normalizes each row to unit L2 norm. Rows must be nonzero.
    pub fn row_l2_normalize(&mut self, x: NodeId) -> NodeId {
        let xs = &self.nodes[x.0].value;
        let mut v = xs.clone();
        for mut row in v.rows_mut() {
            let n = row.iter().map(|z| z * z).sum::<f64>().sqrt();
            debug_assert!(n > 0.0, "row_l2_normalize: zero row");
            row.mapv_inplace(|z| z / n);
        }
        let rg = self.requires(x);
        self.push(v, Op::RowL2Normalize(x), rg)
    }

    // ── composite helpers ───────────────────────────────────────────────

    /// Mean of a list of 1 x 1 scalars.
    pub fn mean_of(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let cat = self.concat_rows(parts);
        let s = self.sum_all(cat);
        self.mul_scalar(s, 1.0 / parts.len() as f64)
    }

    /// 1 - x, elementwise.
    pub fn one_minus(&mut self, x: NodeId) -> NodeId {
        let neg = self.mul_scalar(x, -1.0);
        self.add_scalar(neg, 1.0)
    }

    // ── backward ────────────────────────────────────────────────────────

    /// Accumulates gradients of the scalar node `from` into every node on a
    /// gradient-requiring path. Clears previous gradients first, so it can be
    /// called repeatedly on different loss nodes of one tape (used by the
    /// partition audit).
    pub fn backward(&mut self, from: NodeId) {
        assert_eq!(
            self.nodes[from.0].value.dim(),
            (1, 1),
            "backward target must be scalar"
        );
        for n in &mut self.nodes {
            n.grad = None;
        }
        self.nodes[from.0].grad = Some(Array2::from_elem((1, 1), 1.0));

        for id in (0..=from.0).rev() {
            if !self.nodes[id].requires_grad {
                continue;
            }
            let Some(gy) = self.nodes[id].grad.take() else {
                continue;
            };
            let op = self.nodes[id].op.clone();
            let y_value = self.nodes[id].value.clone();
            self.step_backward(&op, &y_value, &gy);
            self.nodes[id].grad = Some(gy);
        }
    }

    fn accumulate(&mut self, id: NodeId, delta: &Array2<f64>) {
        if !self.nodes[id.0].requires_grad {
            return;
        }
        match &mut self.nodes[id.0].grad {
            Some(g) => *g += delta,
            slot => *slot = Some(delta.clone()),
        }
    }

    fn accumulate_owned(&mut self, id: NodeId, delta: Array2<f64>) {
        if !self.nodes[id.0].requires_grad {
            return;
        }
        match &mut self.nodes[id.0].grad {
            Some(g) => *g += &delta,
            slot => *slot = Some(delta),
        }
    }

    fn step_backward(&mut self, op: &Op, y: &Array2<f64>, gy: &Array2<f64>) {
        match op {
            Op::Leaf | Op::Detach => {}
            Op::Add(a, b) => {
                self.accumulate(*a, gy);
                self.accumulate(*b, gy);
            }
            Op::Sub(a, b) => {
                self.accumulate(*a, gy);
                self.accumulate_owned(*b, gy.mapv(|z| -z));
            }
            Op::Mul(a, b) => {
                let da = gy * &self.nodes[b.0].value;
                let db = gy * &self.nodes[a.0].value;
                self.accumulate_owned(*a, da);
                self.accumulate_owned(*b, db);
            }
            Op::AddScalar(a) => self.accumulate(*a, gy),
            Op::MulScalar(a, c) => self.accumulate_owned(*a, gy.mapv(|z| z * c)),
            Op::MatMul(a, b) => {
                let da = gy.dot(&self.nodes[b.0].value.t());
                let db = self.nodes[a.0].value.t().dot(gy);
                self.accumulate_owned(*a, da);
                self.accumulate_owned(*b, db);
            }
            Op::MatMulNT(a, b) => {
                let da = gy.dot(&self.nodes[b.0].value);
                let db = gy.t().dot(&self.nodes[a.0].value);
                self.accumulate_owned(*a, da);
                self.accumulate_owned(*b, db);
            }
            Op::AddBias(a, bias) => {
                self.accumulate(*a, gy);
                let db = gy.sum_axis(Axis(0)).insert_axis(Axis(0));
                self.accumulate_owned(*bias, db);
            }
            Op::RowSoftmax(a) => {
                let mut dx = gy * y;
                for (mut drow, yrow) in dx.rows_mut().into_iter().zip(y.rows()) {
                    let dot: f64 = drow.sum();
                    for (d, yv) in drow.iter_mut().zip(yrow) {
                        *d -= yv * dot;
                    }
                }
                self.accumulate_owned(*a, dx);
            }
            Op::RowLogSoftmax(a) => {
                let mut dx = gy.clone();
                for (mut drow, yrow) in dx.rows_mut().into_iter().zip(y.rows()) {
                    let gsum: f64 = drow.sum();
                    for (d, yv) in drow.iter_mut().zip(yrow) {
                        *d -= yv.exp() * gsum;
                    }
                }
                self.accumulate_owned(*a, dx);
            }
            Op::LayerNorm { x, gain, bias, eps } => {
                let xs = self.nodes[x.0].value.clone();
                let g = self.nodes[gain.0].value.clone();
                let d = xs.ncols() as f64;
                let mut dx = Array2::zeros(xs.dim());
                let mut dgain = Array2::zeros((1, xs.ncols()));
                let mut dbias = Array2::zeros((1, xs.ncols()));
                for i in 0..xs.nrows() {
                    let row = xs.row(i);
                    let mean = row.sum() / d;
                    let var = row.iter().map(|z| (z - mean) * (z - mean)).sum::<f64>() / d;
                    let inv = 1.0 / (var + eps).sqrt();
                    // dY hat = gy * gain; dx from the standard LN backward.
                    let mut sum_dyh = 0.0;
                    let mut sum_dyh_xh = 0.0;
                    for j in 0..xs.ncols() {
                        let xh = (row[j] - mean) * inv;
                        let dyh = gy[[i, j]] * g[[0, j]];
                        sum_dyh += dyh;
                        sum_dyh_xh += dyh * xh;
                        dgain[[0, j]] += gy[[i, j]] * xh;
                        dbias[[0, j]] += gy[[i, j]];
                    }
                    for j in 0..xs.ncols() {
                        let xh = (row[j] - mean) * inv;
                        let dyh = gy[[i, j]] * g[[0, j]];
                        dx[[i, j]] = inv * (dyh - sum_dyh / d - xh * sum_dyh_xh / d);
                    }
                }
                self.accumulate_owned(*x, dx);
                self.accumulate_owned(*gain, dgain);
                self.accumulate_owned(*bias, dbias);
            }
            Op::Gelu(a) => {
                let xs = &self.nodes[a.0].value;
                let dx = ndarray::Zip::from(gy).and(xs).map_collect(|g, &x| {
                    let u = GELU_C * (x + GELU_A * x * x * x);
                    let t = u.tanh();
                    let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
                    g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)
                });
                self.accumulate_owned(*a, dx);
            }
            Op::Sigmoid(a) => {
                let dx = ndarray::Zip::from(gy)
                    .and(y)
                    .map_collect(|g, &s| g * s * (1.0 - s));
                self.accumulate_owned(*a, dx);
            }
            Op::Ln(a) => {
                let dx = gy / &self.nodes[a.0].value;
                self.accumulate_owned(*a, dx);
            }
            Op::Clamp { x, lo, hi } => {
                let xs = &self.nodes[x.0].value;
                let dx = ndarray::Zip::from(gy).and(xs).map_collect(|g, &z| {
                    if z >= *lo && z <= *hi {
                        *g
                    } else {
                        0.0
                    }
                });
                self.accumulate_owned(*x, dx);
            }
            Op::SumAll(a) => {
                let dx = Array2::from_elem(self.nodes[a.0].value.dim(), gy[[0, 0]]);
                self.accumulate_owned(*a, dx);
            }
            Op::MaskedMeanRows { x, mask } => {
                let n_valid = mask.iter().filter(|m| **m).count() as f64;
                let mut dx = Array2::zeros(self.nodes[x.0].value.dim());
                for (i, &keep) in mask.iter().enumerate() {
                    if keep {
                        dx.row_mut(i).assign(&gy.row(0).mapv(|z| z / n_valid));
                    }
                }
                self.accumulate_owned(*x, dx);
            }
            Op::ZeroMaskedRows { x, mask } => {
                let mut dx = gy.clone();
                for (i, &keep) in mask.iter().enumerate() {
                    if !keep {
                        dx.row_mut(i).fill(0.0);
                    }
                }
                self.accumulate_owned(*x, dx);
            }
            Op::MaskFill { x, mask } => {
                let mut dx = gy.clone();
                for ((i, j), m) in mask.indexed_iter() {
                    if *m {
                        dx[[i, j]] = 0.0;
                    }
                }
                self.accumulate_owned(*x, dx);
            }
            Op::GatherRows { table, idx } => {
                let mut dt = Array2::zeros(self.nodes[table.0].value.dim());
                for (i, &r) in idx.iter().enumerate() {
                    dt.row_mut(r).scaled_add(1.0, &gy.row(i));
                }
                self.accumulate_owned(*table, dt);
            }
            Op::SelectGather { a, b, plan } => {
                let mut da = Array2::zeros(self.nodes[a.0].value.dim());
                let mut db = Array2::zeros(self.nodes[b.0].value.dim());
                for (i, (src, r)) in plan.iter().enumerate() {
                    match src {
                        RowSource::A => da.row_mut(*r).scaled_add(1.0, &gy.row(i)),
                        RowSource::B => db.row_mut(*r).scaled_add(1.0, &gy.row(i)),
                    }
                }
                self.accumulate_owned(*a, da);
                self.accumulate_owned(*b, db);
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts.clone() {
                    let n = self.nodes[p.0].value.nrows();
                    let slice = gy.slice(ndarray::s![offset..offset + n, ..]).to_owned();
                    self.accumulate_owned(p, slice);
                    offset += n;
                }
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for p in parts.clone() {
                    let n = self.nodes[p.0].value.ncols();
                    let slice = gy.slice(ndarray::s![.., offset..offset + n]).to_owned();
                    self.accumulate_owned(p, slice);
                    offset += n;
                }
            }
            Op::SliceCols { x, start, len } => {
                let mut dx = Array2::zeros(self.nodes[x.0].value.dim());
                dx.slice_mut(ndarray::s![.., *start..start + len]).assign(gy);
                self.accumulate_owned(*x, dx);
            }
            Op::GatherNll {
                log_probs,
                targets,
                mask,
            } => {
                let g = gy[[0, 0]];
                let mut dx = Array2::zeros(self.nodes[log_probs.0].value.dim());
                for (i, (&t, &m)) in targets.iter().zip(mask).enumerate() {
                    if m {
                        dx[[i, t]] = -g;
                    }
                }
                self.accumulate_owned(*log_probs, dx);
            }
            Op::CtcLoss { log_probs, grad } => {
                let dx = grad.mapv(|z| z * gy[[0, 0]]);
                self.accumulate_owned(*log_probs, dx);
            }
            Op::Dropout { x, mask } => {
                let dx = gy * mask;
                self.accumulate_owned(*x, dx);
            }
            Op::UnfoldRows {
                x,
                kernel,
                stride,
                pad,
            } => {
                let xs_dim = self.nodes[x.0].value.dim();
                let d = xs_dim.1;
                let mut dx = Array2::zeros(xs_dim);
                for to in 0..gy.nrows() {
                    for k in 0..*kernel {
                        let src = to as isize * *stride as isize - *pad as isize + k as isize;
                        if src >= 0 && (src as usize) < xs_dim.0 {
                            dx.row_mut(src as usize)
                                .scaled_add(1.0, &gy.slice(ndarray::s![to, k * d..(k + 1) * d]));
                        }
                    }
                }
                self.accumulate_owned(*x, dx);
            }
            Op::RowL2Normalize(a) => {
                let xs = &self.nodes[a.0].value;
                let mut dx = Array2::zeros(xs.dim());
                for i in 0..xs.nrows() {
                    let row = xs.row(i);
                    let n = row.iter().map(|z| z * z).sum::<f64>().sqrt();
                    let ydotg: f64 = y.row(i).iter().zip(gy.row(i)).map(|(a, b)| a * b).sum();
                    for j in 0..xs.ncols() {
                        dx[[i, j]] = (gy[[i, j]] - y[[i, j]] * ydotg) / n;
                    }
                }
                self.accumulate_owned(*a, dx);
            }
        }
    }
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Numerically stable log(exp(a) + exp(b)).
pub fn log_add_exp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}
