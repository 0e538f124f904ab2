//! Tape-based reverse-mode differentiation.
//!
//! A [`Tape`] owns every value produced during one forward evaluation. Ops are
//! methods that append a slot (value + the recipe that made it) and return a
//! [`Var`] handle. `backward` replays the slots newest-to-oldest, accumulating
//! vector-Jacobian products. One tape belongs to one logical execution
//! context; concurrent work uses one tape per sequence.
//!
//! Every op validates shapes up front and rejects non-finite outputs, so a
//! training step either completes with finite numbers everywhere or fails
//! fast with the offending op named.

use crate::error::{Error, Result};
use crate::numerics::{Rng, Tensor};
use crate::real::Real;

/// Handle to a value on a tape. Only meaningful for the tape that issued it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op<F: Real> {
    Leaf,
    Matmul { a: Var, b: Var },
    /// a · bᵀ where `b` is stored row-major as [n×k].
    MatmulNt { a: Var, b: Var },
    Add { a: Var, b: Var },
    /// Broadcast a rank-1 row over every row of a matrix.
    AddRow { a: Var, row: Var },
    Mul { a: Var, b: Var },
    OneMinus { a: Var },
    Scale { a: Var, c: F },
    Sigmoid { a: Var },
    Tanh { a: Var },
    Relu { a: Var },
    SoftmaxRows { a: Var },
    /// Row i is a softmax over columns 0..=i; the rest of the row is zero.
    CausalSoftmaxRows { a: Var },
    LayerNorm { a: Var, gain: Var, bias: Var, rstd: Vec<F>, normed: Vec<F> },
    PadRowsFront { a: Var, count: usize },
    SliceRows { a: Var, start: usize },
    GatherRows { a: Var, rows: Vec<usize> },
    ConcatCols { parts: Vec<Var> },
    /// Inverted dropout; mask entries are 0 or 1/keep.
    Dropout { a: Var, mask: Vec<F> },
    /// Sum of -log softmax(logits)[target] over positions with target >= 0.
    CrossEntropySum { logits: Var, targets: Vec<i64>, probs: Vec<F> },
    Sum { a: Var },
}

impl<F: Real> Op<F> {
    fn kind(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Matmul { .. } => "matmul",
            Op::MatmulNt { .. } => "matmul_nt",
            Op::Add { .. } => "add",
            Op::AddRow { .. } => "add_row",
            Op::Mul { .. } => "mul",
            Op::OneMinus { .. } => "one_minus",
            Op::Scale { .. } => "scale",
            Op::Sigmoid { .. } => "sigmoid",
            Op::Tanh { .. } => "tanh",
            Op::Relu { .. } => "relu",
            Op::SoftmaxRows { .. } => "softmax_rows",
            Op::CausalSoftmaxRows { .. } => "causal_softmax_rows",
            Op::LayerNorm { .. } => "layer_norm",
            Op::PadRowsFront { .. } => "pad_rows_front",
            Op::SliceRows { .. } => "slice_rows",
            Op::GatherRows { .. } => "gather_rows",
            Op::ConcatCols { .. } => "concat_cols",
            Op::Dropout { .. } => "dropout",
            Op::CrossEntropySum { .. } => "cross_entropy",
            Op::Sum { .. } => "sum",
        }
    }
}

struct Slot<F: Real> {
    shape: Vec<usize>,
    data: Vec<F>,
    op: Op<F>,
    needs_grad: bool,
}

pub struct Tape<F: Real> {
    slots: Vec<Slot<F>>,
    grads: Vec<Option<Vec<F>>>,
    /// Test fixture: multiplies the tanh backward rule by a wrong factor so
    /// gradient-check suites can prove they catch broken derivatives.
    corrupt_tanh_backward: bool,
}

impl<F: Real> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Real> Tape<F> {
    pub fn new() -> Self {
        Tape {
            slots: Vec::new(),
            grads: Vec::new(),
            corrupt_tanh_backward: false,
        }
    }

    pub fn corrupt_tanh_backward(&mut self, on: bool) {
        self.corrupt_tanh_backward = on;
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    // ── Access ───────────────────────────────────────────────────────

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.slots[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[F] {
        &self.slots[v.0].data
    }

    pub fn to_tensor(&self, v: Var) -> Tensor<F> {
        Tensor::new(self.slots[v.0].shape.clone(), self.slots[v.0].data.clone())
            .expect("tape slots hold consistent, finite values")
    }

    /// Gradient of the given var after `backward`, if one was reached.
    pub fn grad(&self, v: Var) -> Option<&[F]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    fn dims2(&self, v: Var) -> (usize, usize) {
        match self.slots[v.0].shape.as_slice() {
            [r, c] => (*r, *c),
            s => panic!("expected rank-2 var on tape, got {s:?}"),
        }
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<F>, op: Op<F>, needs_grad: bool) -> Result<Var> {
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::NumericFault { op: op.kind() });
        }
        self.slots.push(Slot {
            shape,
            data,
            op,
            needs_grad,
        });
        Ok(Var(self.slots.len() - 1))
    }

    fn needs(&self, v: Var) -> bool {
        self.slots[v.0].needs_grad
    }

    // ── Leaves ───────────────────────────────────────────────────────

    /// Copy a tensor onto the tape; gradient tracking follows its
    /// `requires_grad` flag.
    pub fn leaf(&mut self, t: &Tensor<F>) -> Var {
        self.push(
            t.shape().to_vec(),
            t.data().to_vec(),
            Op::Leaf,
            t.requires_grad(),
        )
        .expect("tensor invariants already guarantee finite data")
    }

    pub fn constant(&mut self, t: Tensor<F>) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, false)
            .expect("tensor invariants already guarantee finite data")
    }

    pub fn constant_zeros(&mut self, shape: Vec<usize>) -> Var {
        let numel = shape.iter().product();
        self.push(shape, vec![F::zero(); numel], Op::Leaf, false)
            .expect("zeros are finite")
    }

    // ── Binary ops ───────────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = match self.slots[a.0].shape.as_slice() {
            [m, k] => (*m, *k),
            _ => {
                return Err(self.shape_err("matmul", a, b));
            }
        };
        let (k2, n) = match self.slots[b.0].shape.as_slice() {
            [k2, n] => (*k2, *n),
            _ => {
                return Err(self.shape_err("matmul", a, b));
            }
        };
        if k != k2 {
            return Err(self.shape_err("matmul", a, b));
        }
        let data = mm(self.value(a), m, k, self.value(b), n);
        let needs = self.needs(a) || self.needs(b);
        self.push(vec![m, n], data, Op::Matmul { a, b }, needs)
    }

    /// a[m×k] · (b[n×k])ᵀ → [m×n].
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a);
        let (n, k2) = self.dims2(b);
        if k != k2 {
            return Err(self.shape_err("matmul_nt", a, b));
        }
        let data = mm_nt(self.value(a), m, k, self.value(b), n);
        let needs = self.needs(a) || self.needs(b);
        self.push(vec![m, n], data, Op::MatmulNt { a, b }, needs)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.slots[a.0].shape != self.slots[b.0].shape {
            return Err(self.shape_err("add", a, b));
        }
        let data = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| *x + *y)
            .collect();
        let needs = self.needs(a) || self.needs(b);
        self.push(self.slots[a.0].shape.clone(), data, Op::Add { a, b }, needs)
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (m, n) = self.dims2(a);
        if self.slots[row.0].shape != [n] {
            return Err(self.shape_err("add_row", a, row));
        }
        let mut data = self.value(a).to_vec();
        let r = &self.slots[row.0].data;
        for i in 0..m {
            for j in 0..n {
                data[i * n + j] += r[j];
            }
        }
        let needs = self.needs(a) || self.needs(row);
        self.push(vec![m, n], data, Op::AddRow { a, row }, needs)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.slots[a.0].shape != self.slots[b.0].shape {
            return Err(self.shape_err("mul", a, b));
        }
        let data = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| *x * *y)
            .collect();
        let needs = self.needs(a) || self.needs(b);
        self.push(self.slots[a.0].shape.clone(), data, Op::Mul { a, b }, needs)
    }

    // ── Unary ops ────────────────────────────────────────────────────

    pub fn one_minus(&mut self, a: Var) -> Result<Var> {
        let data = self.value(a).iter().map(|x| F::one() - *x).collect();
        let needs = self.needs(a);
        self.push(self.slots[a.0].shape.clone(), data, Op::OneMinus { a }, needs)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let c = F::from_f64(c);
        let data = self.value(a).iter().map(|x| *x * c).collect();
        let needs = self.needs(a);
        self.push(self.slots[a.0].shape.clone(), data, Op::Scale { a, c }, needs)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let data = self.value(a).iter().map(|&x| sigmoid(x)).collect();
        let needs = self.needs(a);
        self.push(self.slots[a.0].shape.clone(), data, Op::Sigmoid { a }, needs)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let data = self.value(a).iter().map(|x| x.tanh()).collect();
        let needs = self.needs(a);
        self.push(self.slots[a.0].shape.clone(), data, Op::Tanh { a }, needs)
    }

    /// Elementwise max(0, x).
    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let data = self
            .value(a)
            .iter()
            .map(|&x| if x > F::zero() { x } else { F::zero() })
            .collect();
        let needs = self.needs(a);
        self.push(self.slots[a.0].shape.clone(), data, Op::Relu { a }, needs)
    }

    // ── Row-structured ops ───────────────────────────────────────────

    /// Stable softmax over each row of a matrix.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.dims2(a);
        if n == 0 {
            return Err(Error::ShapeMismatch {
                op: "softmax_rows",
                lhs: vec![m, n],
                rhs: vec![],
            });
        }
        let mut data = self.value(a).to_vec();
        for row in data.chunks_mut(n) {
            softmax_in_place(row);
        }
        let needs = self.needs(a);
        self.push(vec![m, n], data, Op::SoftmaxRows { a }, needs)
    }

    /// Softmax over the leading 0..=i columns of row i; used for causal
    /// attention scores, which are square [T×T].
    pub fn causal_softmax_rows(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.dims2(a);
        if m != n || n == 0 {
            return Err(Error::ShapeMismatch {
                op: "causal_softmax_rows",
                lhs: vec![m, n],
                rhs: vec![n, n],
            });
        }
        let mut data = self.value(a).to_vec();
        for i in 0..m {
            let row = &mut data[i * n..i * n + n];
            softmax_in_place(&mut row[..i + 1]);
            for x in &mut row[i + 1..] {
                *x = F::zero();
            }
        }
        let needs = self.needs(a);
        self.push(vec![m, n], data, Op::CausalSoftmaxRows { a }, needs)
    }

    /// Per-row normalization: gain ⊙ (x − mean) / sqrt(var + eps) + bias.
    pub fn layer_norm(&mut self, a: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (m, n) = self.dims2(a);
        if self.slots[gain.0].shape != [n] || self.slots[bias.0].shape != [n] {
            return Err(self.shape_err("layer_norm", a, gain));
        }
        let eps = F::from_f64(eps);
        let inv_n = F::from_f64(1.0 / n as f64);
        let g = self.slots[gain.0].data.clone();
        let b = self.slots[bias.0].data.clone();
        let mut data = vec![F::zero(); m * n];
        let mut rstd = vec![F::zero(); m];
        let mut normed = vec![F::zero(); m * n];
        for i in 0..m {
            let row = &self.slots[a.0].data[i * n..i * n + n];
            let mut mean = F::zero();
            for &x in row {
                mean += x;
            }
            mean *= inv_n;
            let mut var = F::zero();
            for &x in row {
                let d = x - mean;
                var += d * d;
            }
            var *= inv_n;
            let r = (var + eps).sqrt().recip();
            rstd[i] = r;
            for j in 0..n {
                let xn = (row[j] - mean) * r;
                normed[i * n + j] = xn;
                data[i * n + j] = g[j] * xn + b[j];
            }
        }
        let needs = self.needs(a) || self.needs(gain) || self.needs(bias);
        self.push(
            vec![m, n],
            data,
            Op::LayerNorm { a, gain, bias, rstd, normed },
            needs,
        )
    }

    // ── Shape ops ────────────────────────────────────────────────────

    /// Prepend `count` all-zero rows.
    pub fn pad_rows_front(&mut self, a: Var, count: usize) -> Result<Var> {
        let (m, n) = self.dims2(a);
        let mut data = vec![F::zero(); (m + count) * n];
        data[count * n..].copy_from_slice(self.value(a));
        let needs = self.needs(a);
        self.push(vec![m + count, n], data, Op::PadRowsFront { a, count }, needs)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.dims2(a);
        if start + len > m {
            return Err(Error::Usage(format!(
                "slice_rows {start}..{} out of bounds for {m} rows",
                start + len
            )));
        }
        let data = self.value(a)[start * n..(start + len) * n].to_vec();
        let needs = self.needs(a);
        self.push(vec![len, n], data, Op::SliceRows { a, start }, needs)
    }

    /// Copy the listed rows, in order (embedding lookup, window assembly,
    /// last-position readout).
    pub fn gather_rows(&mut self, a: Var, rows: Vec<usize>) -> Result<Var> {
        let (m, n) = self.dims2(a);
        if let Some(&bad) = rows.iter().find(|&&r| r >= m) {
            return Err(Error::Usage(format!(
                "gather_rows: row {bad} out of bounds for {m} rows"
            )));
        }
        let mut data = Vec::with_capacity(rows.len() * n);
        for &r in &rows {
            data.extend_from_slice(&self.slots[a.0].data[r * n..r * n + n]);
        }
        let needs = self.needs(a);
        self.push(vec![rows.len(), n], data, Op::GatherRows { a, rows }, needs)
    }

    /// Concatenate matrices with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Usage("concat_cols: no inputs".into()));
        }
        let (m, _) = self.dims2(parts[0]);
        let mut total = 0;
        for &p in parts {
            let (mp, np) = self.dims2(p);
            if mp != m {
                return Err(self.shape_err("concat_cols", parts[0], p));
            }
            total += np;
        }
        let mut data = vec![F::zero(); m * total];
        let mut col = 0;
        for &p in parts {
            let (_, np) = self.dims2(p);
            for i in 0..m {
                data[i * total + col..i * total + col + np]
                    .copy_from_slice(&self.slots[p.0].data[i * np..i * np + np]);
            }
            col += np;
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        let op = Op::ConcatCols { parts: parts.to_vec() };
        self.push(vec![m, total], data, op, needs)
    }

    /// Inverted dropout: zero with probability `rate`, scale survivors by
    /// 1/(1-rate). `rate == 0` is the identity and records nothing.
    pub fn dropout(&mut self, a: Var, rate: f64, rng: &mut Rng) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!("dropout rate {rate} not in [0, 1)")));
        }
        if rate == 0.0 {
            return Ok(a);
        }
        let keep = 1.0 - rate;
        let scale = F::from_f64(1.0 / keep);
        let mask: Vec<F> = (0..self.slots[a.0].data.len())
            .map(|_| if rng.next_f64() < keep { scale } else { F::zero() })
            .collect();
        let data = self
            .value(a)
            .iter()
            .zip(&mask)
            .map(|(x, m)| *x * *m)
            .collect();
        let needs = self.needs(a);
        self.push(self.slots[a.0].shape.clone(), data, Op::Dropout { a, mask }, needs)
    }

    // ── Reductions / losses ──────────────────────────────────────────

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let mut acc = F::zero();
        for &x in self.value(a) {
            acc += x;
        }
        let needs = self.needs(a);
        self.push(vec![], vec![acc], Op::Sum { a }, needs)
    }

    /// Summed token-level negative log-likelihood over positions whose target
    /// is >= 0. Returns the scalar loss var and the number of counted
    /// positions. Targets of -1 are ignored (loss masking).
    pub fn cross_entropy_sum(&mut self, logits: Var, targets: &[i64]) -> Result<(Var, usize)> {
        let (m, n) = self.dims2(logits);
        if targets.len() != m {
            return Err(Error::ShapeMismatch {
                op: "cross_entropy",
                lhs: vec![m, n],
                rhs: vec![targets.len()],
            });
        }
        let mut probs = vec![F::zero(); m * n];
        let mut loss = F::zero();
        let mut count = 0usize;
        for i in 0..m {
            let t = targets[i];
            if t < 0 {
                continue;
            }
            let t = t as usize;
            if t >= n {
                return Err(Error::Data(format!(
                    "cross_entropy: target {t} at position {i} out of range for {n} classes"
                )));
            }
            let row = &self.slots[logits.0].data[i * n..i * n + n];
            let mut max = row[0];
            for &x in &row[1..] {
                if x > max {
                    max = x;
                }
            }
            let mut denom = F::zero();
            for &x in row {
                denom += (x - max).exp();
            }
            let lse = max + denom.ln();
            loss += lse - row[t];
            let p = &mut probs[i * n..i * n + n];
            for (j, &x) in row.iter().enumerate() {
                p[j] = (x - lse).exp();
            }
            count += 1;
        }
        let needs = self.needs(logits);
        let op = Op::CrossEntropySum {
            logits,
            targets: targets.to_vec(),
            probs,
        };
        let v = self.push(vec![], vec![loss], op, needs)?;
        Ok((v, count))
    }

    /// Mean token-level negative log-likelihood over counted positions.
    pub fn cross_entropy_mean(&mut self, logits: Var, targets: &[i64]) -> Result<Var> {
        let (sum, count) = self.cross_entropy_sum(logits, targets)?;
        if count == 0 {
            return Err(Error::Usage("cross_entropy: no counted positions".into()));
        }
        self.scale(sum, 1.0 / count as f64)
    }

    fn shape_err(&self, op: &'static str, a: Var, b: Var) -> Error {
        Error::ShapeMismatch {
            op,
            lhs: self.slots[a.0].shape.clone(),
            rhs: self.slots[b.0].shape.clone(),
        }
    }

    // ── Backward ─────────────────────────────────────────────────────

    /// Reverse-mode sweep from a scalar loss; gradients land in `grad(...)`
    /// for every slot on a tracked path.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        self.backward_seeded(loss, 1.0)
    }

    /// Like `backward` but seeds dLoss/dLoss with `seed` — used when a
    /// sequence loss enters a batch mean with weight 1/total.
    pub fn backward_seeded(&mut self, loss: Var, seed: f64) -> Result<()> {
        if self.slots[loss.0].data.len() != 1 {
            return Err(Error::Usage(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.slots[loss.0].shape
            )));
        }
        self.grads = (0..self.slots.len()).map(|_| None).collect();
        self.grads[loss.0] = Some(vec![F::from_f64(seed)]);

        for idx in (0..=loss.0).rev() {
            if !self.slots[idx].needs_grad {
                continue;
            }
            let Some(gout) = self.grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &gout)?;
            self.grads[idx] = Some(gout);
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, delta: Vec<F>) {
        match &mut self.grads[v.0] {
            Some(g) => {
                for (a, d) in g.iter_mut().zip(&delta) {
                    *a += *d;
                }
            }
            slot @ None => *slot = Some(delta),
        }
    }

    fn propagate(&mut self, idx: usize, gout: &[F]) -> Result<()> {
        // Ops only reference earlier slots, so borrow of op metadata is split
        // from grad accumulation by cloning the small descriptors.
        enum Work<F: Real> {
            One(Var, Vec<F>),
            Two(Var, Vec<F>, Var, Vec<F>),
            Many(Vec<(Var, Vec<F>)>),
            None,
        }

        let kind = self.slots[idx].op.kind();
        let work = match &self.slots[idx].op {
            Op::Leaf => Work::None,
            Op::Matmul { a, b } => {
                let (m, k) = self.dims2(*a);
                let (_, n) = self.dims2(*b);
                let da = mm_nt(gout, m, n, self.value(*b), k);
                let db = mm_tn(self.value(*a), m, k, gout, n);
                Work::Two(*a, da, *b, db)
            }
            Op::MatmulNt { a, b } => {
                let (m, k) = self.dims2(*a);
                let (n, _) = self.dims2(*b);
                let da = mm(gout, m, n, self.value(*b), k);
                let db = mm_tn(gout, m, n, self.value(*a), k);
                Work::Two(*a, da, *b, db)
            }
            Op::Add { a, b } => Work::Two(*a, gout.to_vec(), *b, gout.to_vec()),
            Op::AddRow { a, row } => {
                let (m, n) = self.dims2(*a);
                let mut drow = vec![F::zero(); n];
                for i in 0..m {
                    for j in 0..n {
                        drow[j] += gout[i * n + j];
                    }
                }
                Work::Two(*a, gout.to_vec(), *row, drow)
            }
            Op::Mul { a, b } => {
                let da: Vec<F> = gout.iter().zip(self.value(*b)).map(|(g, y)| *g * *y).collect();
                let db: Vec<F> = gout.iter().zip(self.value(*a)).map(|(g, x)| *g * *x).collect();
                Work::Two(*a, da, *b, db)
            }
            Op::OneMinus { a } => Work::One(*a, gout.iter().map(|g| -*g).collect()),
            Op::Scale { a, c } => {
                let c = *c;
                Work::One(*a, gout.iter().map(|g| *g * c).collect())
            }
            Op::Sigmoid { a } => {
                let d = gout
                    .iter()
                    .zip(&self.slots[idx].data)
                    .map(|(g, y)| *g * *y * (F::one() - *y))
                    .collect();
                Work::One(*a, d)
            }
            Op::Tanh { a } => {
                let fudge = if self.corrupt_tanh_backward {
                    F::from_f64(1.05)
                } else {
                    F::one()
                };
                let d = gout
                    .iter()
                    .zip(&self.slots[idx].data)
                    .map(|(g, y)| *g * (F::one() - *y * *y) * fudge)
                    .collect();
                Work::One(*a, d)
            }
            Op::Relu { a } => {
                let d = gout
                    .iter()
                    .zip(&self.slots[idx].data)
                    .map(|(g, y)| if *y > F::zero() { *g } else { F::zero() })
                    .collect();
                Work::One(*a, d)
            }
            Op::SoftmaxRows { a } => {
                let (m, n) = self.dims2(*a);
                let y = &self.slots[idx].data;
                let mut d = vec![F::zero(); m * n];
                for i in 0..m {
                    let yr = &y[i * n..i * n + n];
                    let gr = &gout[i * n..i * n + n];
                    let mut dot = F::zero();
                    for j in 0..n {
                        dot += gr[j] * yr[j];
                    }
                    for j in 0..n {
                        d[i * n + j] = yr[j] * (gr[j] - dot);
                    }
                }
                Work::One(*a, d)
            }
            Op::CausalSoftmaxRows { a } => {
                // Same Jacobian as softmax_rows; zeros beyond the prefix make
                // the masked terms vanish on their own.
                let (m, n) = self.dims2(*a);
                let y = &self.slots[idx].data;
                let mut d = vec![F::zero(); m * n];
                for i in 0..m {
                    let yr = &y[i * n..i * n + n];
                    let gr = &gout[i * n..i * n + n];
                    let mut dot = F::zero();
                    for j in 0..=i {
                        dot += gr[j] * yr[j];
                    }
                    for j in 0..=i {
                        d[i * n + j] = yr[j] * (gr[j] - dot);
                    }
                }
                Work::One(*a, d)
            }
            Op::LayerNorm { a, gain, bias, rstd, normed } => {
                let (m, n) = self.dims2(*a);
                let inv_n = F::from_f64(1.0 / n as f64);
                let g = &self.slots[gain.0].data;
                let mut da = vec![F::zero(); m * n];
                let mut dgain = vec![F::zero(); n];
                let mut dbias = vec![F::zero(); n];
                for i in 0..m {
                    let xn = &normed[i * n..i * n + n];
                    let gr = &gout[i * n..i * n + n];
                    let r = rstd[i];
                    let mut sum_dy = F::zero();
                    let mut sum_dy_xn = F::zero();
                    for j in 0..n {
                        let dy = gr[j] * g[j];
                        sum_dy += dy;
                        sum_dy_xn += dy * xn[j];
                        dgain[j] += gr[j] * xn[j];
                        dbias[j] += gr[j];
                    }
                    sum_dy *= inv_n;
                    sum_dy_xn *= inv_n;
                    for j in 0..n {
                        let dy = gr[j] * g[j];
                        da[i * n + j] = r * (dy - sum_dy - xn[j] * sum_dy_xn);
                    }
                }
                Work::Many(vec![(*a, da), (*gain, dgain), (*bias, dbias)])
            }
            Op::PadRowsFront { a, count } => {
                let (m, n) = self.dims2(*a);
                Work::One(*a, gout[count * n..(count + m) * n].to_vec())
            }
            Op::SliceRows { a, start } => {
                let (m, n) = self.dims2(*a);
                let rows = self.slots[idx].shape[0];
                let mut d = vec![F::zero(); m * n];
                d[start * n..(start + rows) * n].copy_from_slice(gout);
                Work::One(*a, d)
            }
            Op::GatherRows { a, rows } => {
                let (m, n) = self.dims2(*a);
                let mut d = vec![F::zero(); m * n];
                for (i, &r) in rows.iter().enumerate() {
                    for j in 0..n {
                        d[r * n + j] += gout[i * n + j];
                    }
                }
                Work::One(*a, d)
            }
            Op::ConcatCols { parts } => {
                let m = self.slots[idx].shape[0];
                let total = self.slots[idx].shape[1];
                let mut out = Vec::with_capacity(parts.len());
                let mut col = 0;
                for &p in parts {
                    let (_, np) = self.dims2(p);
                    let mut d = vec![F::zero(); m * np];
                    for i in 0..m {
                        d[i * np..i * np + np]
                            .copy_from_slice(&gout[i * total + col..i * total + col + np]);
                    }
                    out.push((p, d));
                    col += np;
                }
                Work::Many(out)
            }
            Op::Dropout { a, mask } => {
                let d = gout.iter().zip(mask).map(|(g, m)| *g * *m).collect();
                Work::One(*a, d)
            }
            Op::CrossEntropySum { logits, targets, probs } => {
                let (m, n) = self.dims2(*logits);
                let seed = gout[0];
                let mut d = vec![F::zero(); m * n];
                for i in 0..m {
                    let t = targets[i];
                    if t < 0 {
                        continue;
                    }
                    for j in 0..n {
                        d[i * n + j] = probs[i * n + j] * seed;
                    }
                    d[i * n + t as usize] -= seed;
                }
                Work::One(*logits, d)
            }
            Op::Sum { a } => {
                let seed = gout[0];
                Work::One(*a, vec![seed; self.slots[a.0].data.len()])
            }
        };

        let mut apply = |tape: &mut Self, v: Var, d: Vec<F>| -> Result<()> {
            if !tape.slots[v.0].needs_grad {
                return Ok(());
            }
            if d.iter().any(|x| !x.is_finite()) {
                return Err(Error::NumericFault { op: kind });
            }
            tape.accumulate(v, d);
            Ok(())
        };

        match work {
            Work::None => Ok(()),
            Work::One(v, d) => apply(self, v, d),
            Work::Two(v1, d1, v2, d2) => {
                apply(self, v1, d1)?;
                apply(self, v2, d2)
            }
            Work::Many(list) => {
                for (v, d) in list {
                    apply(self, v, d)?;
                }
                Ok(())
            }
        }
    }
}

#[inline]
fn sigmoid<F: Real>(x: F) -> F {
    if x >= F::zero() {
        (F::one() + (-x).exp()).recip()
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

fn softmax_in_place<F: Real>(row: &mut [F]) {
    let mut max = row[0];
    for &x in row[1..].iter() {
        if x > max {
            max = x;
        }
    }
    let mut denom = F::zero();
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        denom += *x;
    }
    let inv = denom.recip();
    for x in row.iter_mut() {
        *x *= inv;
    }
}

// ── Matrix kernels ──────────────────────────────────────────────────
//
// Row-major throughout. Each output row is accumulated in a fixed order that
// reads nothing outside its own input row, which is what makes the bitwise
// causality and locality guarantees hold.

/// a[m×k] · b[k×n] → [m×n].
pub(crate) fn mm<F: Real>(a: &[F], m: usize, k: usize, b: &[F], n: usize) -> Vec<F> {
    let mut out = vec![F::zero(); m * n];
    for i in 0..m {
        let orow = &mut out[i * n..i * n + n];
        for l in 0..k {
            let av = a[i * k + l];
            if av == F::zero() {
                continue;
            }
            let brow = &b[l * n..l * n + n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    out
}

/// a[m×k] · (b[n×k])ᵀ → [m×n].
pub(crate) fn mm_nt<F: Real>(a: &[F], m: usize, k: usize, b: &[F], n: usize) -> Vec<F> {
    let mut out = vec![F::zero(); m * n];
    for i in 0..m {
        let arow = &a[i * k..i * k + k];
        for j in 0..n {
            let brow = &b[j * k..j * k + k];
            let mut acc = F::zero();
            for l in 0..k {
                acc += arow[l] * brow[l];
            }
            out[i * n + j] = acc;
        }
    }
    out
}

/// (a[m×k])ᵀ · b[m×n] → [k×n].
pub(crate) fn mm_tn<F: Real>(a: &[F], m: usize, k: usize, b: &[F], n: usize) -> Vec<F> {
    let mut out = vec![F::zero(); k * n];
    for l in 0..m {
        let brow = &b[l * n..l * n + n];
        for i in 0..k {
            let av = a[l * k + i];
            if av == F::zero() {
                continue;
            }
            let orow = &mut out[i * n..i * n + n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    out
}
