//! Dense tensors and a reverse-mode differentiation tape.
//!
//! Every differentiable quantity in the library lives on a [`Tape`]: callers
//! create leaves (parameters, constants), apply primitive operations, and run
//! one backward pass from a scalar root. Gradients accumulate additively into
//! every reachable leaf that was created with `requires_grad`.
//!
//! All arithmetic is `f64`. Finite-difference gradient checking is only
//! meaningful in double precision, and at desk scale the speed difference
//! does not matter.

use crate::error::{DcmclError, Result};

/// Dense row-major array of `f64` with an explicit shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        let n: usize = shape.iter().product();
        assert_eq!(n, data.len(), "shape {:?} does not match data length {}", shape, data.len());
        Tensor { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor { shape, data: vec![0.0; n] }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor { shape: vec![1], data: vec![v] }
    }

    pub fn vector(v: Vec<f64>) -> Self {
        Tensor { shape: vec![v.len()], data: v }
    }

    /// Row-major matrix from `rows * cols` values.
    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Number of rows when viewed as a 2-D array (last axis = columns).
    pub fn rows(&self) -> usize {
        if self.shape.len() <= 1 {
            1
        } else {
            self.shape[..self.shape.len() - 1].iter().product()
        }
    }

    /// Size of the last axis.
    pub fn cols(&self) -> usize {
        *self.shape.last().unwrap_or(&0)
    }

    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Handle to a value recorded on a tape.
pub type VarId = usize;

/// Counters for numerically degenerate events, queryable after a run.
#[derive(Debug, Default, Clone, Copy)]
pub struct Counters {
    /// Times a KL denominator entry had to be clamped at the floor.
    pub kl_clamp: u64,
    /// Times a cosine similarity saw a zero-length vector.
    pub degenerate_cosine: u64,
}

enum Op {
    Leaf,
    /// C = A (m×k) · B (k×n)
    Matmul(VarId, VarId),
    /// C = A (m×k) · B(n×k)ᵀ
    MatmulNt(VarId, VarId),
    Add(VarId, VarId),
    /// Broadcast-add a length-n vector to every row of an m×n value.
    AddRow(VarId, VarId),
    Mul(VarId, VarId),
    Scale(VarId, f64),
    ConcatCols(VarId, VarId),
    SliceCols(VarId, usize, usize),
    SelectRows(VarId, Vec<usize>),
    MeanRows(VarId),
    SumAll(VarId),
    Gelu(VarId),
    /// Saved mask entries are 0 or 1/(1-p).
    Dropout(VarId, Vec<f64>),
    SoftmaxRows(VarId),
    LogSoftmaxRows(VarId),
    KlRows {
        p: VarId,
        q: VarId,
        detach_p: bool,
        /// q clamped at the floor, saved for backward.
        q_clamped: Vec<f64>,
    },
    LayerNorm {
        x: VarId,
        gain: VarId,
        bias: VarId,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    CosineSim {
        u: VarId,
        v: VarId,
        norm_u: f64,
        norm_v: f64,
        dot: f64,
    },
    /// Pick individual (row, col) entries of a 2-D value into a vector.
    PickEntries(VarId, Vec<(usize, usize)>),
    /// Pack scalar values into one vector.
    StackScalars(Vec<VarId>),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// KL floor: label-smoothed softmax outputs never reach exact zero, so the
/// clamp only guards hand-built inputs.
pub const KL_FLOOR: f64 = 1e-12;
const LN_EPS: f64 = 1e-5;
const COS_EPS: f64 = 1e-12;

/// Records primitive applications for one forward pass and replays them in
/// reverse to accumulate leaf gradients. Single-threaded per training step.
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
    pub counters: Counters,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), consumed: false, counters: Counters::default() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: VarId) -> &Tensor {
        &self.nodes[id].value
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> VarId {
        assert!(!self.consumed, "tape already consumed by backward");
        self.nodes.push(Node { value, op, requires_grad });
        self.nodes.len() - 1
    }

    fn rg(&self, id: VarId) -> bool {
        self.nodes[id].requires_grad
    }

    pub fn leaf(&mut self, t: Tensor, requires_grad: bool) -> VarId {
        self.push(t, Op::Leaf, requires_grad)
    }

    /// Leaf that never receives gradient (positional tables, masks, ...).
    pub fn constant(&mut self, t: Tensor) -> VarId {
        self.leaf(t, false)
    }

    pub fn matmul(&mut self, a: VarId, b: VarId) -> VarId {
        let (ta, tb) = (&self.nodes[a].value, &self.nodes[b].value);
        let (m, k) = (ta.rows(), ta.cols());
        let (k2, n) = (tb.rows(), tb.cols());
        assert_eq!(k, k2, "matmul inner dims {k} vs {k2}");
        let mut out = vec![0.0; m * n];
        mm_ikj(ta.data(), tb.data(), &mut out, m, k, n);
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::matrix(m, n, out), Op::Matmul(a, b), rg)
    }

    /// `a · bᵀ` without materializing the transpose.
    pub fn matmul_nt(&mut self, a: VarId, b: VarId) -> VarId {
        let (ta, tb) = (&self.nodes[a].value, &self.nodes[b].value);
        let (m, k) = (ta.rows(), ta.cols());
        let (n, k2) = (tb.rows(), tb.cols());
        assert_eq!(k, k2, "matmul_nt inner dims {k} vs {k2}");
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let ai = &ta.data()[i * k..(i + 1) * k];
            for j in 0..n {
                let bj = &tb.data()[j * k..(j + 1) * k];
                out[i * n + j] = dot(ai, bj);
            }
        }
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::matrix(m, n, out), Op::MatmulNt(a, b), rg)
    }

    pub fn add(&mut self, a: VarId, b: VarId) -> VarId {
        let (ta, tb) = (&self.nodes[a].value, &self.nodes[b].value);
        assert_eq!(ta.shape(), tb.shape(), "add shape mismatch");
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let shape = ta.shape().to_vec();
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::new(shape, data), Op::Add(a, b), rg)
    }

    pub fn add_row(&mut self, a: VarId, row: VarId) -> VarId {
        let (ta, tr) = (&self.nodes[a].value, &self.nodes[row].value);
        let n = ta.cols();
        assert_eq!(tr.numel(), n, "add_row width mismatch");
        let mut data = ta.data().to_vec();
        for chunk in data.chunks_mut(n) {
            for (x, y) in chunk.iter_mut().zip(tr.data()) {
                *x += y;
            }
        }
        let shape = ta.shape().to_vec();
        let rg = self.rg(a) || self.rg(row);
        self.push(Tensor::new(shape, data), Op::AddRow(a, row), rg)
    }

    pub fn mul(&mut self, a: VarId, b: VarId) -> VarId {
        let (ta, tb) = (&self.nodes[a].value, &self.nodes[b].value);
        assert_eq!(ta.shape(), tb.shape(), "mul shape mismatch");
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let shape = ta.shape().to_vec();
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::new(shape, data), Op::Mul(a, b), rg)
    }

    pub fn scale(&mut self, a: VarId, c: f64) -> VarId {
        let ta = &self.nodes[a].value;
        let data = ta.data().iter().map(|x| x * c).collect();
        let shape = ta.shape().to_vec();
        let rg = self.rg(a);
        self.push(Tensor::new(shape, data), Op::Scale(a, c), rg)
    }

    pub fn concat_cols(&mut self, a: VarId, b: VarId) -> VarId {
        let (ta, tb) = (&self.nodes[a].value, &self.nodes[b].value);
        let (m, p) = (ta.rows(), ta.cols());
        let (m2, q) = (tb.rows(), tb.cols());
        assert_eq!(m, m2, "concat_cols row mismatch");
        let mut data = Vec::with_capacity(m * (p + q));
        for i in 0..m {
            data.extend_from_slice(&ta.data()[i * p..(i + 1) * p]);
            data.extend_from_slice(&tb.data()[i * q..(i + 1) * q]);
        }
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::matrix(m, p + q, data), Op::ConcatCols(a, b), rg)
    }

    pub fn slice_cols(&mut self, a: VarId, start: usize, len: usize) -> VarId {
        let ta = &self.nodes[a].value;
        let (m, n) = (ta.rows(), ta.cols());
        assert!(start + len <= n, "slice_cols out of range");
        let mut data = Vec::with_capacity(m * len);
        for i in 0..m {
            data.extend_from_slice(&ta.data()[i * n + start..i * n + start + len]);
        }
        let rg = self.rg(a);
        self.push(Tensor::matrix(m, len, data), Op::SliceCols(a, start, len), rg)
    }

    /// Gather rows by index; also serves as embedding lookup.
    pub fn select_rows(&mut self, a: VarId, idx: &[usize]) -> VarId {
        let ta = &self.nodes[a].value;
        let (m, n) = (ta.rows(), ta.cols());
        let mut data = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            assert!(i < m, "select_rows index {i} out of {m}");
            data.extend_from_slice(&ta.data()[i * n..(i + 1) * n]);
        }
        let rg = self.rg(a);
        self.push(Tensor::matrix(idx.len(), n, data), Op::SelectRows(a, idx.to_vec()), rg)
    }

    /// Mean over rows, yielding a length-n vector.
    pub fn mean_rows(&mut self, a: VarId) -> VarId {
        let ta = &self.nodes[a].value;
        let (m, n) = (ta.rows(), ta.cols());
        assert!(m > 0, "mean_rows on empty");
        let mut out = vec![0.0; n];
        for i in 0..m {
            for j in 0..n {
                out[j] += ta.data()[i * n + j];
            }
        }
        for v in &mut out {
            *v /= m as f64;
        }
        let rg = self.rg(a);
        self.push(Tensor::vector(out), Op::MeanRows(a), rg)
    }

    pub fn sum_all(&mut self, a: VarId) -> VarId {
        let s: f64 = self.nodes[a].value.data().iter().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::SumAll(a), rg)
    }

    pub fn mean_all(&mut self, a: VarId) -> VarId {
        let n = self.nodes[a].value.numel();
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n as f64)
    }

    /// tanh-approximation GELU.
    pub fn gelu(&mut self, a: VarId) -> VarId {
        let ta = &self.nodes[a].value;
        let data = ta.data().iter().map(|&x| gelu_fwd(x)).collect();
        let shape = ta.shape().to_vec();
        let rg = self.rg(a);
        self.push(Tensor::new(shape, data), Op::Gelu(a), rg)
    }

    /// Train-mode dropout with an explicit mask from the run RNG. Callers in
    /// eval mode simply skip the call.
    pub fn dropout(&mut self, a: VarId, p: f64, rng: &mut impl rand::Rng) -> VarId {
        assert!((0.0..1.0).contains(&p), "dropout rate out of [0,1)");
        if p == 0.0 {
            return self.scale(a, 1.0);
        }
        let ta = &self.nodes[a].value;
        let keep = 1.0 - p;
        let mask: Vec<f64> = (0..ta.numel())
            .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let data = ta.data().iter().zip(&mask).map(|(x, m)| x * m).collect();
        let shape = ta.shape().to_vec();
        let rg = self.rg(a);
        self.push(Tensor::new(shape, data), Op::Dropout(a, mask), rg)
    }

    /// Row-wise softmax with max-subtraction. Rows may contain `-inf`
    /// (attention masking); those entries come out exactly 0.
    pub fn softmax_rows(&mut self, a: VarId) -> Result<VarId> {
        let ta = &self.nodes[a].value;
        let (m, n) = (ta.rows(), ta.cols());
        if n == 0 {
            return Err(DcmclError::EmptyDistribution);
        }
        let mut data = ta.data().to_vec();
        for row in data.chunks_mut(n) {
            softmax_in_place(row);
        }
        let shape = ta.shape().to_vec();
        let rg = self.rg(a);
        let _ = m;
        Ok(self.push(Tensor::new(shape, data), Op::SoftmaxRows(a), rg))
    }

    pub fn log_softmax_rows(&mut self, a: VarId) -> Result<VarId> {
        let ta = &self.nodes[a].value;
        let n = ta.cols();
        if n == 0 {
            return Err(DcmclError::EmptyDistribution);
        }
        let mut data = ta.data().to_vec();
        for row in data.chunks_mut(n) {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        let shape = ta.shape().to_vec();
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(shape, data), Op::LogSoftmaxRows(a), rg))
    }

    /// Per-row `D_KL(p ‖ q)` with `0·ln(0/q) = 0` and q floored at
    /// [`KL_FLOOR`]. With `detach_p` no gradient flows into `p`.
    pub fn kl_rows(&mut self, p: VarId, q: VarId, detach_p: bool) -> VarId {
        let (tp, tq) = (&self.nodes[p].value, &self.nodes[q].value);
        assert_eq!(tp.shape(), tq.shape(), "kl_rows shape mismatch");
        let (m, n) = (tp.rows(), tp.cols());
        let mut q_clamped = tq.data().to_vec();
        let mut clamps = 0u64;
        for v in &mut q_clamped {
            if *v < KL_FLOOR {
                *v = KL_FLOOR;
                clamps += 1;
            }
        }
        if clamps > 0 {
            self.counters.kl_clamp += clamps;
        }
        let mut out = vec![0.0; m];
        for i in 0..m {
            let mut s = 0.0;
            for j in 0..n {
                let pv = tp.data()[i * n + j];
                if pv > 0.0 {
                    s += pv * (pv / q_clamped[i * n + j]).ln();
                }
            }
            out[i] = s;
        }
        let rg = (self.rg(p) && !detach_p) || self.rg(q);
        self.push(Tensor::vector(out), Op::KlRows { p, q, detach_p, q_clamped }, rg)
    }

    /// Layer normalization over the last axis with affine gain/bias.
    pub fn layer_norm(&mut self, x: VarId, gain: VarId, bias: VarId) -> VarId {
        let (tx, tg, tb) = (&self.nodes[x].value, &self.nodes[gain].value, &self.nodes[bias].value);
        let (m, d) = (tx.rows(), tx.cols());
        assert!(d >= 1);
        assert_eq!(tg.numel(), d, "layer_norm gain width");
        assert_eq!(tb.numel(), d, "layer_norm bias width");
        let mut xhat = vec![0.0; m * d];
        let mut inv_std = vec![0.0; m];
        let mut out = vec![0.0; m * d];
        for i in 0..m {
            let row = &tx.data()[i * d..(i + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let istd = 1.0 / (var + LN_EPS).sqrt();
            inv_std[i] = istd;
            for j in 0..d {
                let xh = (row[j] - mean) * istd;
                xhat[i * d + j] = xh;
                out[i * d + j] = xh * tg.data()[j] + tb.data()[j];
            }
        }
        let shape = tx.shape().to_vec();
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        self.push(Tensor::new(shape, out), Op::LayerNorm { x, gain, bias, xhat, inv_std }, rg)
    }

    /// Cosine similarity of two equal-length vectors, with a denominator
    /// floor so zero vectors give 0 rather than NaN.
    pub fn cosine_sim(&mut self, u: VarId, v: VarId) -> VarId {
        let (tu, tv) = (&self.nodes[u].value, &self.nodes[v].value);
        assert_eq!(tu.numel(), tv.numel(), "cosine_sim length mismatch");
        let dot_uv = dot(tu.data(), tv.data());
        let nu = dot(tu.data(), tu.data()).sqrt();
        let nv = dot(tv.data(), tv.data()).sqrt();
        if nu == 0.0 || nv == 0.0 {
            self.counters.degenerate_cosine += 1;
        }
        let s = dot_uv / (nu * nv + COS_EPS);
        let rg = self.rg(u) || self.rg(v);
        self.push(
            Tensor::scalar(s),
            Op::CosineSim { u, v, norm_u: nu, norm_v: nv, dot: dot_uv },
            rg,
        )
    }

    pub fn pick_entries(&mut self, a: VarId, picks: &[(usize, usize)]) -> VarId {
        let ta = &self.nodes[a].value;
        let (m, n) = (ta.rows(), ta.cols());
        let data: Vec<f64> = picks
            .iter()
            .map(|&(i, j)| {
                assert!(i < m && j < n, "pick_entries ({i},{j}) out of {m}x{n}");
                ta.data()[i * n + j]
            })
            .collect();
        let rg = self.rg(a);
        self.push(Tensor::vector(data), Op::PickEntries(a, picks.to_vec()), rg)
    }

    pub fn stack_scalars(&mut self, ids: &[VarId]) -> VarId {
        let data: Vec<f64> = ids
            .iter()
            .map(|&id| {
                assert_eq!(self.nodes[id].value.numel(), 1, "stack_scalars needs scalars");
                self.nodes[id].value.item()
            })
            .collect();
        let rg = ids.iter().any(|&id| self.rg(id));
        self.push(Tensor::matrix(1, ids.len(), data), Op::StackScalars(ids.to_vec()), rg)
    }

    /// One reverse sweep from a scalar root. Each node is visited exactly
    /// once; the tape cannot be replayed afterwards.
    pub fn backward(&mut self, root: VarId) -> Result<Gradients> {
        if self.consumed {
            return Err(DcmclError::TapeConsumed);
        }
        self.consumed = true;
        let rv = &self.nodes[root].value;
        if rv.numel() != 1 {
            return Err(DcmclError::Invalid("backward root must be a scalar".into()));
        }
        if !rv.item().is_finite() {
            return Err(DcmclError::NonFiniteObjective);
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root] = Some(Tensor::scalar(1.0));
        for id in (0..=root).rev() {
            if !self.nodes[id].requires_grad {
                grads[id] = None;
                continue;
            }
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            self.backprop_node(id, &g, &mut grads);
            // keep leaf gradients; interior gradients are dropped once used
            if matches!(self.nodes[id].op, Op::Leaf) {
                grads[id] = Some(g);
            }
        }
        Ok(Gradients { grads })
    }

    fn accumulate(
        nodes: &[Node],
        grads: &mut [Option<Tensor>],
        id: VarId,
        update: impl FnOnce(&mut [f64]),
    ) {
        if !nodes[id].requires_grad {
            return;
        }
        let slot = &mut grads[id];
        if slot.is_none() {
            *slot = Some(Tensor::zeros(nodes[id].value.shape().to_vec()));
        }
        update(slot.as_mut().unwrap().data_mut());
    }

    #[allow(clippy::too_many_lines)]
    fn backprop_node(&self, id: VarId, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let nodes = &self.nodes;
        match &nodes[id].op {
            Op::Leaf => {}
            Op::Matmul(a, b) => {
                let (ta, tb) = (&nodes[*a].value, &nodes[*b].value);
                let (m, k) = (ta.rows(), ta.cols());
                let n = tb.cols();
                Self::accumulate(nodes, grads, *a, |da| {
                    // dA += G · Bᵀ
                    for i in 0..m {
                        for j in 0..n {
                            let gv = g.data()[i * n + j];
                            if gv != 0.0 {
                                let brow = &tb.data()[0..]; // B is k×n
                                for l in 0..k {
                                    da[i * k + l] += gv * brow[l * n + j];
                                }
                            }
                        }
                    }
                });
                Self::accumulate(nodes, grads, *b, |db| {
                    // dB += Aᵀ · G
                    for i in 0..m {
                        for l in 0..k {
                            let av = ta.data()[i * k + l];
                            if av != 0.0 {
                                for j in 0..n {
                                    db[l * n + j] += av * g.data()[i * n + j];
                                }
                            }
                        }
                    }
                });
            }
            Op::MatmulNt(a, b) => {
                let (ta, tb) = (&nodes[*a].value, &nodes[*b].value);
                let (m, k) = (ta.rows(), ta.cols());
                let n = tb.rows();
                Self::accumulate(nodes, grads, *a, |da| {
                    // dA += G · B
                    mm_ikj(g.data(), tb.data(), da, m, n, k);
                });
                Self::accumulate(nodes, grads, *b, |db| {
                    // dB += Gᵀ · A
                    for i in 0..m {
                        for j in 0..n {
                            let gv = g.data()[i * n + j];
                            if gv != 0.0 {
                                for l in 0..k {
                                    db[j * k + l] += gv * ta.data()[i * k + l];
                                }
                            }
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                for &x in [a, b].iter() {
                    Self::accumulate(nodes, grads, *x, |dx| {
                        for (d, gv) in dx.iter_mut().zip(g.data()) {
                            *d += gv;
                        }
                    });
                }
            }
            Op::AddRow(a, row) => {
                Self::accumulate(nodes, grads, *a, |da| {
                    for (d, gv) in da.iter_mut().zip(g.data()) {
                        *d += gv;
                    }
                });
                let n = nodes[*row].value.numel();
                Self::accumulate(nodes, grads, *row, |dr| {
                    for chunk in g.data().chunks(n) {
                        for (d, gv) in dr.iter_mut().zip(chunk) {
                            *d += gv;
                        }
                    }
                });
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (&nodes[*a].value, &nodes[*b].value);
                Self::accumulate(nodes, grads, *a, |da| {
                    for ((d, gv), bv) in da.iter_mut().zip(g.data()).zip(tb.data()) {
                        *d += gv * bv;
                    }
                });
                Self::accumulate(nodes, grads, *b, |db| {
                    for ((d, gv), av) in db.iter_mut().zip(g.data()).zip(ta.data()) {
                        *d += gv * av;
                    }
                });
            }
            Op::Scale(a, c) => {
                let c = *c;
                Self::accumulate(nodes, grads, *a, |da| {
                    for (d, gv) in da.iter_mut().zip(g.data()) {
                        *d += gv * c;
                    }
                });
            }
            Op::ConcatCols(a, b) => {
                let p = nodes[*a].value.cols();
                let q = nodes[*b].value.cols();
                let m = nodes[*a].value.rows();
                Self::accumulate(nodes, grads, *a, |da| {
                    for i in 0..m {
                        for j in 0..p {
                            da[i * p + j] += g.data()[i * (p + q) + j];
                        }
                    }
                });
                Self::accumulate(nodes, grads, *b, |db| {
                    for i in 0..m {
                        for j in 0..q {
                            db[i * q + j] += g.data()[i * (p + q) + p + j];
                        }
                    }
                });
            }
            Op::SliceCols(a, start, len) => {
                let n = nodes[*a].value.cols();
                let m = nodes[*a].value.rows();
                Self::accumulate(nodes, grads, *a, |da| {
                    for i in 0..m {
                        for j in 0..*len {
                            da[i * n + start + j] += g.data()[i * len + j];
                        }
                    }
                });
            }
            Op::SelectRows(a, idx) => {
                let n = nodes[*a].value.cols();
                Self::accumulate(nodes, grads, *a, |da| {
                    for (r, &src) in idx.iter().enumerate() {
                        for j in 0..n {
                            da[src * n + j] += g.data()[r * n + j];
                        }
                    }
                });
            }
            Op::MeanRows(a) => {
                let (m, n) = (nodes[*a].value.rows(), nodes[*a].value.cols());
                let inv = 1.0 / m as f64;
                Self::accumulate(nodes, grads, *a, |da| {
                    for i in 0..m {
                        for j in 0..n {
                            da[i * n + j] += g.data()[j] * inv;
                        }
                    }
                });
            }
            Op::SumAll(a) => {
                let gv = g.item();
                Self::accumulate(nodes, grads, *a, |da| {
                    for d in da.iter_mut() {
                        *d += gv;
                    }
                });
            }
            Op::Gelu(a) => {
                let ta = &nodes[*a].value;
                Self::accumulate(nodes, grads, *a, |da| {
                    for ((d, gv), &x) in da.iter_mut().zip(g.data()).zip(ta.data()) {
                        *d += gv * gelu_bwd(x);
                    }
                });
            }
            Op::Dropout(a, mask) => {
                Self::accumulate(nodes, grads, *a, |da| {
                    for ((d, gv), mv) in da.iter_mut().zip(g.data()).zip(mask) {
                        *d += gv * mv;
                    }
                });
            }
            Op::SoftmaxRows(a) => {
                let p = &nodes[id].value;
                let n = p.cols();
                Self::accumulate(nodes, grads, *a, |da| {
                    for ((drow, grow), prow) in
                        da.chunks_mut(n).zip(g.data().chunks(n)).zip(p.data().chunks(n))
                    {
                        let s: f64 = grow.iter().zip(prow).map(|(gv, pv)| gv * pv).sum();
                        for ((d, gv), pv) in drow.iter_mut().zip(grow).zip(prow) {
                            *d += pv * (gv - s);
                        }
                    }
                });
            }
            Op::LogSoftmaxRows(a) => {
                let lp = &nodes[id].value;
                let n = lp.cols();
                Self::accumulate(nodes, grads, *a, |da| {
                    for ((drow, grow), lprow) in
                        da.chunks_mut(n).zip(g.data().chunks(n)).zip(lp.data().chunks(n))
                    {
                        let s: f64 = grow.iter().sum();
                        for ((d, gv), lpv) in drow.iter_mut().zip(grow).zip(lprow) {
                            *d += gv - lpv.exp() * s;
                        }
                    }
                });
            }
            Op::KlRows { p, q, detach_p, q_clamped } => {
                let tp = &nodes[*p].value;
                let tq = &nodes[*q].value;
                let n = tp.cols();
                Self::accumulate(nodes, grads, *q, |dq| {
                    for i in 0..tp.rows() {
                        let gi = g.data()[i];
                        if gi == 0.0 {
                            continue;
                        }
                        for j in 0..n {
                            let pv = tp.data()[i * n + j];
                            // no gradient through a clamped denominator
                            if pv > 0.0 && tq.data()[i * n + j] >= KL_FLOOR {
                                dq[i * n + j] += gi * (-pv / q_clamped[i * n + j]);
                            }
                        }
                    }
                });
                if !detach_p {
                    Self::accumulate(nodes, grads, *p, |dp| {
                        for i in 0..tp.rows() {
                            let gi = g.data()[i];
                            if gi == 0.0 {
                                continue;
                            }
                            for j in 0..n {
                                let pv = tp.data()[i * n + j];
                                if pv > 0.0 {
                                    dp[i * n + j] +=
                                        gi * ((pv / q_clamped[i * n + j]).ln() + 1.0);
                                }
                            }
                        }
                    });
                }
            }
            Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
                let d = nodes[*x].value.cols();
                let m = nodes[*x].value.rows();
                let tg = &nodes[*gain].value;
                Self::accumulate(nodes, grads, *gain, |dg| {
                    for i in 0..m {
                        for j in 0..d {
                            dg[j] += g.data()[i * d + j] * xhat[i * d + j];
                        }
                    }
                });
                Self::accumulate(nodes, grads, *bias, |db| {
                    for i in 0..m {
                        for j in 0..d {
                            db[j] += g.data()[i * d + j];
                        }
                    }
                });
                Self::accumulate(nodes, grads, *x, |dx| {
                    let dn = d as f64;
                    for i in 0..m {
                        let mut sum_dxh = 0.0;
                        let mut sum_dxh_xh = 0.0;
                        for j in 0..d {
                            let dxh = g.data()[i * d + j] * tg.data()[j];
                            sum_dxh += dxh;
                            sum_dxh_xh += dxh * xhat[i * d + j];
                        }
                        for j in 0..d {
                            let dxh = g.data()[i * d + j] * tg.data()[j];
                            dx[i * d + j] += inv_std[i] / dn
                                * (dn * dxh - sum_dxh - xhat[i * d + j] * sum_dxh_xh);
                        }
                    }
                });
            }
            Op::CosineSim { u, v, norm_u, norm_v, dot } => {
                let gv = g.item();
                let tu = &nodes[*u].value;
                let tv = &nodes[*v].value;
                let denom = norm_u * norm_v + COS_EPS;
                let s = dot / denom;
                Self::accumulate(nodes, grads, *u, |du| {
                    for j in 0..tu.numel() {
                        let mut t = tv.data()[j] / denom;
                        if *norm_u > 0.0 {
                            t -= s * norm_v / denom * tu.data()[j] / norm_u;
                        }
                        du[j] += gv * t;
                    }
                });
                Self::accumulate(nodes, grads, *v, |dv| {
                    for j in 0..tv.numel() {
                        let mut t = tu.data()[j] / denom;
                        if *norm_v > 0.0 {
                            t -= s * norm_u / denom * tv.data()[j] / norm_v;
                        }
                        dv[j] += gv * t;
                    }
                });
            }
            Op::PickEntries(a, picks) => {
                let n = nodes[*a].value.cols();
                Self::accumulate(nodes, grads, *a, |da| {
                    for (r, &(i, j)) in picks.iter().enumerate() {
                        da[i * n + j] += g.data()[r];
                    }
                });
            }
            Op::StackScalars(ids) => {
                for (r, src) in ids.clone().into_iter().enumerate() {
                    let gv = g.data()[r];
                    Self::accumulate(nodes, grads, src, |ds| ds[0] += gv);
                }
            }
        }
    }
}

/// Leaf gradients produced by one backward pass.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for a leaf; `None` means no path reached it (gradient zero).
    pub fn get(&self, id: VarId) -> Option<&Tensor> {
        self.grads.get(id).and_then(|g| g.as_ref())
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `out += A (m×k) · B (k×n)`, i-k-j loop order.
fn mm_ikj(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for l in 0..k {
            let av = a[i * k + l];
            if av != 0.0 {
                let brow = &b[l * n..(l + 1) * n];
                for (o, bv) in orow.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
    }
}

fn softmax_in_place(row: &mut [f64]) {
    let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        // masked entries (-inf) become exactly 0 here
        *v = (*v - mx).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu_fwd(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_bwd(x: f64) -> f64 {
    let inner = GELU_C * (x + GELU_A * x * x * x);
    let t = inner.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// Compares tape gradients against finite differences using the
/// fourth-order five-point stencil with step `eps`, which keeps the
/// truncation error `O(eps^4)` instead of `O(eps^2)`.
///
/// `f` must rebuild the same computation from the given leaves each call.
/// Returns the max over all leaf elements of
/// `|analytic - numeric| / max(1e-8, |analytic| + |numeric|)`.
pub fn grad_check<F>(mut f: F, leaves: &[Tensor], eps: f64) -> Result<f64>
where
    F: FnMut(&mut Tape, &[VarId]) -> Result<VarId>,
{
    let eval = |f: &mut F, leaves: &[Tensor], grad: bool| -> Result<(f64, Option<Vec<Tensor>>)> {
        let mut tape = Tape::new();
        let ids: Vec<VarId> = leaves.iter().map(|t| tape.leaf(t.clone(), grad)).collect();
        let root = f(&mut tape, &ids)?;
        let y = tape.value(root).item();
        if !y.is_finite() {
            return Err(DcmclError::NonFiniteObjective);
        }
        if grad {
            let grads = tape.backward(root)?;
            let gs = ids
                .iter()
                .map(|&id| {
                    grads
                        .get(id)
                        .cloned()
                        .unwrap_or_else(|| Tensor::zeros(tape.value(id).shape().to_vec()))
                })
                .collect();
            Ok((y, Some(gs)))
        } else {
            Ok((y, None))
        }
    };

    let (_, analytic) = eval(&mut f, leaves, true)?;
    let analytic = analytic.unwrap();

    let mut max_rel = 0.0f64;
    let mut work: Vec<Tensor> = leaves.to_vec();
    for li in 0..leaves.len() {
        for ei in 0..leaves[li].numel() {
            let orig = work[li].data()[ei];
            let mut at = |delta: f64, f: &mut F| -> Result<f64> {
                work[li].data_mut()[ei] = orig + delta;
                let (y, _) = eval(f, &work, false)?;
                Ok(y)
            };
            let y2p = at(2.0 * eps, &mut f)?;
            let yp = at(eps, &mut f)?;
            let ym = at(-eps, &mut f)?;
            let y2m = at(-2.0 * eps, &mut f)?;
            work[li].data_mut()[ei] = orig;
            let numeric = (-y2p + 8.0 * yp - 8.0 * ym + y2m) / (12.0 * eps);
            let a = analytic[li].data()[ei];
            let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-8);
            if rel > max_rel {
                max_rel = rel;
            }
        }
    }
    Ok(max_rel)
}
