//! Tape-based reverse-mode differentiation over dense `f64` matrices.
//!
//! Every value on the tape is a 2-D array. Forward ops validate shapes and
//! push a node; [`Tape::backward`] walks the nodes in reverse and accumulates
//! parameter gradients into a [`ParamStore`].

use ndarray::{s, Array1, Array2, ArrayView1, Axis, Zip};

use super::{NnError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// A named parameter value with an optional gradient buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub value: Array2<f64>,
    pub grad: Option<Array2<f64>>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Array2<f64>) -> ParamId {
        let name = name.into();
        assert!(
            !self.names.contains(&name),
            "duplicate parameter name {name}"
        );
        self.names.push(name);
        self.tensors.push(Tensor { value, grad: None });
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn value(&self, id: ParamId) -> &Array2<f64> {
        &self.tensors[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Array2<f64> {
        &mut self.tensors[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> Option<&Array2<f64>> {
        self.tensors[id.0].grad.as_ref()
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn zero_grad(&mut self) {
        for t in &mut self.tensors {
            t.grad = None;
        }
    }

    pub fn accumulate(&mut self, id: ParamId, g: &Array2<f64>) {
        let t = &mut self.tensors[id.0];
        assert_eq!(t.value.dim(), g.dim(), "gradient shape mismatch");
        match &mut t.grad {
            Some(acc) => *acc += g,
            None => t.grad = Some(g.clone()),
        }
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.value.len()).sum()
    }

    /// Number of scalars in parameters whose name starts with `prefix`.
    pub fn count_prefix(&self, prefix: &str) -> usize {
        self.names
            .iter()
            .zip(&self.tensors)
            .filter(|(n, _)| n.starts_with(prefix))
            .map(|(_, t)| t.value.len())
            .sum()
    }

    pub fn scale_grads(&mut self, factor: f64) {
        for t in &mut self.tensors {
            if let Some(g) = &mut t.grad {
                *g *= factor;
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
struct LstmCache {
    /// Activated gates `[T × 4H]` in i, f, g, o order, indexed by time.
    gates: Array2<f64>,
    /// Cell states `[T × H]`, indexed by time.
    cells: Array2<f64>,
    reverse: bool,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    ConcatCols(Vec<Var>),
    Mean(Vec<Var>),
    SumAll(Var),
    MeanAll(Var),
    RowCosine(Var, Var),
    WeightedMean(Var, Array1<f64>),
    Mse(Var, Array2<f64>),
    Lstm {
        x: Var,
        w_ih: Var,
        w_hh: Var,
        bias: Var,
        cache: LstmCache,
    },
}

#[derive(Debug)]
struct Node {
    value: Array2<f64>,
    op: Op,
    needs_grad: bool,
}

/// Rows whose norm is below this are treated as degenerate by `row_cosine`.
pub const COSINE_EPS: f64 = 1e-12;

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
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

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    /// Scalar value of a `[1 × 1]` node.
    pub fn scalar(&self, v: Var) -> f64 {
        let x = self.value(v);
        debug_assert_eq!(x.dim(), (1, 1));
        x[[0, 0]]
    }

    /// Whether any node reads parameter `id`.
    pub fn reads(&self, id: ParamId) -> bool {
        self.nodes.iter().any(|n| matches!(n.op, Op::Param(p) if p == id))
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Array2<f64>, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.needs(*v));
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn dim(&self, v: Var) -> (usize, usize) {
        self.value(v).dim()
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.dim(a) != self.dim(b) {
            return Err(NnError::Shape {
                op,
                left: self.dim(a),
                right: self.dim(b),
            });
        }
        Ok(())
    }

    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.nodes.push(Node {
            value: store.value(id).clone(),
            op: Op::Param(id),
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (da, db) = (self.dim(a), self.dim(b));
        if da.1 != db.0 {
            return Err(NnError::Shape {
                op: "matmul",
                left: da,
                right: db,
            });
        }
        let value = self.value(a).dot(self.value(b));
        Ok(self.push(value, Op::MatMul(a, b), &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let value = self.value(a) + self.value(b);
        Ok(self.push(value, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let value = self.value(a) - self.value(b);
        Ok(self.push(value, Op::Sub(a, b), &[a, b]))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let value = self.value(a) * self.value(b);
        Ok(self.push(value, Op::Mul(a, b), &[a, b]))
    }

    /// Adds a `[1 × n]` row to every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (dx, dr) = (self.dim(x), self.dim(row));
        if dr.0 != 1 || dr.1 != dx.1 {
            return Err(NnError::Shape {
                op: "add_row",
                left: dx,
                right: dr,
            });
        }
        let value = self.value(x) + self.value(row);
        Ok(self.push(value, Op::AddRow(x, row), &[x, row]))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let value = self.value(x) * c;
        self.push(value, Op::Scale(x, c), &[x])
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let value = self.value(x) + c;
        self.push(value, Op::AddScalar(x), &[x])
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let value = self.value(x).mapv(f64::tanh);
        self.push(value, Op::Tanh(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).mapv(sigmoid);
        self.push(value, Op::Sigmoid(x), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).mapv(|v| v.max(0.0));
        self.push(value, Op::Relu(x), &[x])
    }

    /// `x · w + b` with `w: [in × out]` and `b: [1 × out]`.
    pub fn dense(&mut self, w: Var, b: Var, x: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_row(y, b)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(NnError::Empty("concat_cols"))?;
        let rows = self.dim(first).0;
        for p in parts {
            if self.dim(*p).0 != rows {
                return Err(NnError::Shape {
                    op: "concat_cols",
                    left: self.dim(first),
                    right: self.dim(*p),
                });
            }
        }
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let value = ndarray::concatenate(Axis(1), &views).expect("row counts checked");
        Ok(self.push(value, Op::ConcatCols(parts.to_vec()), parts))
    }

    /// Elementwise mean of equally shaped tensors.
    pub fn mean(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(NnError::Empty("mean"))?;
        for p in parts {
            self.same_shape("mean", first, *p)?;
        }
        let mut value = self.value(first).clone();
        for p in &parts[1..] {
            value += self.value(*p);
        }
        value /= parts.len() as f64;
        Ok(self.push(value, Op::Mean(parts.to_vec()), parts))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let value = Array2::from_elem((1, 1), self.value(x).sum());
        self.push(value, Op::SumAll(x), &[x])
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.value(x).len().max(1) as f64;
        let value = Array2::from_elem((1, 1), self.value(x).sum() / n);
        self.push(value, Op::MeanAll(x), &[x])
    }

    /// Per-row cosine similarity `[T × 1]`; rows where either norm is below
    /// [`COSINE_EPS`] give 0 with zero gradient.
    pub fn row_cosine(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("row_cosine", a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let value = Array2::from_shape_fn((va.nrows(), 1), |(t, _)| {
            row_cos(va.row(t), vb.row(t)).unwrap_or(0.0)
        });
        Ok(self.push(value, Op::RowCosine(a, b), &[a, b]))
    }

    /// `Σ w_t x_t / Σ w_t` over a `[T × 1]` column; zero when all weights vanish.
    pub fn weighted_mean(&mut self, x: Var, weights: Array1<f64>) -> Result<Var> {
        let d = self.dim(x);
        if d.1 != 1 || d.0 != weights.len() {
            return Err(NnError::Shape {
                op: "weighted_mean",
                left: d,
                right: (weights.len(), 1),
            });
        }
        let total = weights.sum();
        let v = if total > 0.0 {
            self.value(x).column(0).dot(&weights) / total
        } else {
            0.0
        };
        Ok(self.push(
            Array2::from_elem((1, 1), v),
            Op::WeightedMean(x, weights),
            &[x],
        ))
    }

    /// Mean squared difference against a constant target.
    pub fn mse(&mut self, x: Var, target: Array2<f64>) -> Result<Var> {
        if self.dim(x) != target.dim() {
            return Err(NnError::Shape {
                op: "mse",
                left: self.dim(x),
                right: target.dim(),
            });
        }
        let n = target.len().max(1) as f64;
        let v = Zip::from(self.value(x))
            .and(&target)
            .fold(0.0, |acc, a, b| acc + (a - b) * (a - b))
            / n;
        Ok(self.push(Array2::from_elem((1, 1), v), Op::Mse(x, target), &[x]))
    }

    /// Unidirectional LSTM over the rows of `x` with zero initial state.
    ///
    /// `w_ih: [d × 4H]`, `w_hh: [H × 4H]`, `bias: [1 × 4H]`, gate order
    /// i, f, g, o. With `reverse`, time runs from the last row to the first;
    /// output row `t` is always the hidden state after consuming row `t`.
    pub fn lstm(&mut self, x: Var, w_ih: Var, w_hh: Var, bias: Var, reverse: bool) -> Result<Var> {
        let (t_len, d_in) = self.dim(x);
        let (wd, four_h) = self.dim(w_ih);
        let h = four_h / 4;
        if wd != d_in || four_h % 4 != 0 || t_len == 0 {
            return Err(NnError::Shape {
                op: "lstm.w_ih",
                left: self.dim(x),
                right: self.dim(w_ih),
            });
        }
        if self.dim(w_hh) != (h, four_h) {
            return Err(NnError::Shape {
                op: "lstm.w_hh",
                left: (h, four_h),
                right: self.dim(w_hh),
            });
        }
        if self.dim(bias) != (1, four_h) {
            return Err(NnError::Shape {
                op: "lstm.bias",
                left: (1, four_h),
                right: self.dim(bias),
            });
        }
        let pre = self.value(x).dot(self.value(w_ih)) + self.value(bias);
        let whh = self.value(w_hh);
        let mut gates = Array2::<f64>::zeros((t_len, four_h));
        let mut cells = Array2::<f64>::zeros((t_len, h));
        let mut out = Array2::<f64>::zeros((t_len, h));
        let mut h_prev = Array1::<f64>::zeros(h);
        let mut c_prev = Array1::<f64>::zeros(h);
        for k in 0..t_len {
            let t = if reverse { t_len - 1 - k } else { k };
            let z = &pre.row(t) + &h_prev.dot(whh);
            let mut g_row = gates.row_mut(t);
            for j in 0..h {
                let i_g = sigmoid(z[j]);
                let f_g = sigmoid(z[h + j]);
                let g_g = z[2 * h + j].tanh();
                let o_g = sigmoid(z[3 * h + j]);
                let c = f_g * c_prev[j] + i_g * g_g;
                g_row[j] = i_g;
                g_row[h + j] = f_g;
                g_row[2 * h + j] = g_g;
                g_row[3 * h + j] = o_g;
                cells[[t, j]] = c;
                out[[t, j]] = o_g * c.tanh();
            }
            h_prev.assign(&out.row(t));
            c_prev.assign(&cells.row(t));
        }
        let cache = LstmCache {
            gates,
            cells,
            reverse,
        };
        Ok(self.push(
            out,
            Op::Lstm {
                x,
                w_ih,
                w_hh,
                bias,
                cache,
            },
            &[x, w_ih, w_hh, bias],
        ))
    }

    /// Backpropagates from the `[1 × 1]` node `loss`, adding parameter
    /// gradients into `store`.
    pub fn backward(&self, loss: Var, store: &mut ParamStore) -> Result<()> {
        if self.dim(loss) != (1, 1) {
            return Err(NnError::Shape {
                op: "backward",
                left: self.dim(loss),
                right: (1, 1),
            });
        }
        let mut grads: Vec<Option<Array2<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Array2::ones((1, 1)));
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let mut send = |v: Var, delta: Array2<f64>| {
                if !self.nodes[v.0].needs_grad {
                    return;
                }
                match &mut grads[v.0] {
                    Some(acc) => *acc += &delta,
                    slot @ None => *slot = Some(delta),
                }
            };
            match &node.op {
                Op::Leaf => {}
                Op::Param(id) => store.accumulate(*id, &g),
                Op::MatMul(a, b) => {
                    if self.needs(*a) {
                        send(*a, g.dot(&self.value(*b).t()));
                    }
                    if self.needs(*b) {
                        send(*b, self.value(*a).t().dot(&g));
                    }
                }
                Op::Add(a, b) => {
                    send(*a, g.clone());
                    send(*b, g);
                }
                Op::Sub(a, b) => {
                    send(*a, g.clone());
                    send(*b, -g);
                }
                Op::Mul(a, b) => {
                    if self.needs(*a) {
                        send(*a, &g * self.value(*b));
                    }
                    if self.needs(*b) {
                        send(*b, &g * self.value(*a));
                    }
                }
                Op::AddRow(x, row) => {
                    if self.needs(*row) {
                        send(*row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    }
                    send(*x, g);
                }
                Op::Scale(x, c) => send(*x, g * *c),
                Op::AddScalar(x) => send(*x, g),
                Op::Tanh(x) => {
                    let mut d = g;
                    Zip::from(&mut d)
                        .and(&node.value)
                        .for_each(|d, &y| *d *= 1.0 - y * y);
                    send(*x, d);
                }
                Op::Sigmoid(x) => {
                    let mut d = g;
                    Zip::from(&mut d)
                        .and(&node.value)
                        .for_each(|d, &y| *d *= y * (1.0 - y));
                    send(*x, d);
                }
                Op::Relu(x) => {
                    let mut d = g;
                    Zip::from(&mut d)
                        .and(&node.value)
                        .for_each(|d, &y| {
                            if y <= 0.0 {
                                *d = 0.0
                            }
                        });
                    send(*x, d);
                }
                Op::ConcatCols(parts) => {
                    let mut col = 0;
                    for p in parts {
                        let w = self.dim(*p).1;
                        if self.needs(*p) {
                            send(*p, g.slice(s![.., col..col + w]).to_owned());
                        }
                        col += w;
                    }
                }
                Op::Mean(parts) => {
                    let share = &g / parts.len() as f64;
                    for p in parts {
                        send(*p, share.clone());
                    }
                }
                Op::SumAll(x) => {
                    send(*x, Array2::from_elem(self.dim(*x), g[[0, 0]]));
                }
                Op::MeanAll(x) => {
                    let n = self.value(*x).len().max(1) as f64;
                    send(*x, Array2::from_elem(self.dim(*x), g[[0, 0]] / n));
                }
                Op::RowCosine(a, b) => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    let mut da = Array2::zeros(va.dim());
                    let mut db = Array2::zeros(vb.dim());
                    for t in 0..va.nrows() {
                        let (ra, rb) = (va.row(t), vb.row(t));
                        let (na, nb) = (ra.dot(&ra).sqrt(), rb.dot(&rb).sqrt());
                        if na < COSINE_EPS || nb < COSINE_EPS {
                            continue;
                        }
                        let c = node.value[[t, 0]];
                        let gt = g[[t, 0]];
                        let inv = 1.0 / (na * nb);
                        Zip::from(da.row_mut(t))
                            .and(&ra)
                            .and(&rb)
                            .for_each(|d, &x, &y| *d = gt * (y * inv - c * x / (na * na)));
                        Zip::from(db.row_mut(t))
                            .and(&ra)
                            .and(&rb)
                            .for_each(|d, &x, &y| *d = gt * (x * inv - c * y / (nb * nb)));
                    }
                    send(*a, da);
                    send(*b, db);
                }
                Op::WeightedMean(x, w) => {
                    let total = w.sum();
                    let mut d = Array2::zeros(self.dim(*x));
                    if total > 0.0 {
                        d.column_mut(0).assign(&(w * (g[[0, 0]] / total)));
                    }
                    send(*x, d);
                }
                Op::Mse(x, target) => {
                    let n = target.len().max(1) as f64;
                    let scale = 2.0 * g[[0, 0]] / n;
                    let mut d = self.value(*x) - target;
                    d *= scale;
                    send(*x, d);
                }
                Op::Lstm {
                    x,
                    w_ih,
                    w_hh,
                    bias,
                    cache,
                } => {
                    let grads_lstm = self.lstm_backward(&g, *x, *w_hh, &node.value, cache);
                    let LstmGrads { dz, h_prev } = grads_lstm;
                    if self.needs(*x) {
                        send(*x, dz.dot(&self.value(*w_ih).t()));
                    }
                    if self.needs(*w_ih) {
                        send(*w_ih, self.value(*x).t().dot(&dz));
                    }
                    if self.needs(*w_hh) {
                        send(*w_hh, h_prev.t().dot(&dz));
                    }
                    if self.needs(*bias) {
                        send(*bias, dz.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    }
                }
            }
        }
        Ok(())
    }

    fn lstm_backward(
        &self,
        d_out: &Array2<f64>,
        x: Var,
        w_hh: Var,
        out: &Array2<f64>,
        cache: &LstmCache,
    ) -> LstmGrads {
        let t_len = self.dim(x).0;
        let h = out.ncols();
        let whh = self.value(w_hh);
        let mut dz = Array2::<f64>::zeros((t_len, 4 * h));
        let mut h_prev = Array2::<f64>::zeros((t_len, h));
        let mut dh_next = Array1::<f64>::zeros(h);
        let mut dc_next = Array1::<f64>::zeros(h);
        let order: Vec<usize> = if cache.reverse {
            (0..t_len).rev().collect()
        } else {
            (0..t_len).collect()
        };
        for k in (0..t_len).rev() {
            let t = order[k];
            let prev = if k > 0 { Some(order[k - 1]) } else { None };
            if let Some(p) = prev {
                h_prev.row_mut(t).assign(&out.row(p));
            }
            let gates = cache.gates.row(t);
            let mut dz_row = dz.row_mut(t);
            for j in 0..h {
                let (i_g, f_g, g_g, o_g) =
                    (gates[j], gates[h + j], gates[2 * h + j], gates[3 * h + j]);
                let c = cache.cells[[t, j]];
                let c_prev = prev.map_or(0.0, |p| cache.cells[[p, j]]);
                let tc = c.tanh();
                let dh = d_out[[t, j]] + dh_next[j];
                let d_o = dh * tc;
                let dc = dh * o_g * (1.0 - tc * tc) + dc_next[j];
                let d_i = dc * g_g;
                let d_g = dc * i_g;
                let d_f = dc * c_prev;
                dc_next[j] = dc * f_g;
                dz_row[j] = d_i * i_g * (1.0 - i_g);
                dz_row[h + j] = d_f * f_g * (1.0 - f_g);
                dz_row[2 * h + j] = d_g * (1.0 - g_g * g_g);
                dz_row[3 * h + j] = d_o * o_g * (1.0 - o_g);
            }
            dh_next = whh.dot(&dz.row(t));
        }
        LstmGrads { dz, h_prev }
    }
}

struct LstmGrads {
    dz: Array2<f64>,
    h_prev: Array2<f64>,
}

/// Cosine similarity of two rows, `None` when either norm is degenerate.
pub fn row_cos(a: ArrayView1<f64>, b: ArrayView1<f64>) -> Option<f64> {
    let na = a.dot(&a).sqrt();
    let nb = b.dot(&b).sqrt();
    if na < COSINE_EPS || nb < COSINE_EPS {
        None
    } else {
        Some(a.dot(&b) / (na * nb))
    }
}
