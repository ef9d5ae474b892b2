//! Reverse-mode differentiation over a fixed set of matrix primitives.
//!
//! A [`Tape`] is rebuilt for every minibatch: each builder method evaluates
//! its op eagerly and records it, and [`Tape::backward`] walks the records in
//! reverse to accumulate parameter gradients.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::isotonic::{self, IsoBackward, IsoOperator};
use crate::linalg::Mat;

pub type NodeId = usize;

/// How base-model quantiles are combined by aggregation weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Resolution {
    /// One weight per base model.
    Coarse,
    /// One weight per base model and output level.
    Medium,
    /// One weight per base model, output level and input level.
    Fine,
}

impl Resolution {
    /// Number of weights per softmax group, i.e. per output level.
    pub fn group_size(self, p: usize, m: usize) -> usize {
        match self {
            Resolution::Coarse | Resolution::Medium => p,
            Resolution::Fine => p * m,
        }
    }

    /// Total weight count (a single group for coarse, `m` groups otherwise).
    pub fn weight_count(self, p: usize, m: usize) -> usize {
        match self {
            Resolution::Coarse => p,
            Resolution::Medium => p * m,
            Resolution::Fine => p * m * m,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Resolution::Coarse => "coarse",
            Resolution::Medium => "medium",
            Resolution::Fine => "fine",
        }
    }
}

impl std::str::FromStr for Resolution {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "coarse" => Ok(Resolution::Coarse),
            "medium" => Ok(Resolution::Medium),
            "fine" => Ok(Resolution::Fine),
            other => Err(Error::Config(format!("unknown resolution `{other}`"))),
        }
    }
}

/// Trainable tensors, addressed by index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct ParamSet {
    pub tensors: Vec<Mat>,
}

impl ParamSet {
    pub fn push(&mut self, m: Mat) -> usize {
        self.tensors.push(m);
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn zeros_like(&self) -> Vec<Mat> {
        self.tensors
            .iter()
            .map(|t| Mat::zeros(t.rows, t.cols))
            .collect()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }

    /// All parameters flattened in storage order.
    pub fn flatten(&self) -> Vec<f64> {
        self.tensors.iter().flat_map(|t| t.data.iter().copied()).collect()
    }

    pub fn assign_flat(&mut self, flat: &[f64]) {
        let mut k = 0;
        for t in &mut self.tensors {
            let n = t.data.len();
            t.data.copy_from_slice(&flat[k..k + n]);
            k += n;
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct MixLayout {
    resolution: Resolution,
    p: usize,
    m: usize,
}

#[derive(Debug)]
enum Op {
    Const,
    Param(usize),
    MatMul(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    Add(NodeId, NodeId),
    Scale(NodeId, f64),
    Elu(NodeId),
    HCat(NodeId, NodeId),
    Mul(NodeId, NodeId),
    SoftmaxGroups(NodeId, usize),
    Mix {
        weights: NodeId,
        values: NodeId,
        layout: MixLayout,
    },
    Isotonize(NodeId, Vec<IsoBackward>),
    PinballMean {
        input: NodeId,
        y: Vec<f64>,
        levels: Vec<f64>,
    },
    CrossingMean {
        input: NodeId,
        margins: Vec<f64>,
    },
    GaussianNllMean {
        input: NodeId,
        y: Vec<f64>,
    },
    SquaredErrorMean {
        input: NodeId,
        y: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Mat,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug)]
pub struct Tape {
    nodes: Vec<Node>,
    kink_margin: f64,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

const LN_2PI_HALF: f64 = 0.918_938_533_204_672_8;

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            kink_margin: f64::INFINITY,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Mat {
        &self.nodes[id].value
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        self.nodes[id].value.data[0]
    }

    /// Smallest distance of any nonsmooth op argument (pinball residual,
    /// hinge argument, isotonization comparison) from its kink.
    pub fn kink_margin(&self) -> f64 {
        self.kink_margin
    }

    fn push(&mut self, value: Mat, op: Op, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.nodes.len() - 1
    }

    fn rg(&self, a: NodeId) -> bool {
        self.nodes[a].requires_grad
    }

    fn note_kink(&mut self, d: f64) {
        if d.abs() < self.kink_margin {
            self.kink_margin = d.abs();
        }
    }

    pub fn constant(&mut self, m: Mat) -> NodeId {
        self.push(m, Op::Const, false)
    }

    pub fn param(&mut self, params: &ParamSet, idx: usize) -> NodeId {
        self.push(params.tensors[idx].clone(), Op::Param(idx), true)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).matmul(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::MatMul(a, b), rg)
    }

    /// `a (r×c) + b (1×c)` broadcast over rows.
    pub fn add_row(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let bias = self.value(b);
        assert_eq!(bias.rows, 1, "add_row bias must be a single row");
        assert_eq!(bias.cols, self.value(a).cols, "add_row widths");
        let mut v = self.value(a).clone();
        let bias = &self.nodes[b].value.data;
        for row in v.data.chunks_mut(bias.len()) {
            for (x, &bb) in row.iter_mut().zip(bias) {
                *x += bb;
            }
        }
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::AddRow(a, b), rg)
    }

    /// Affine map `x W + b`.
    pub fn affine(&mut self, x: NodeId, w: NodeId, b: NodeId) -> NodeId {
        let h = self.matmul(x, w);
        self.add_row(h, b)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "add shapes");
        let mut v = self.value(a).clone();
        for (x, &y) in v.data.iter_mut().zip(&self.nodes[b].value.data) {
            *x += y;
        }
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Add(a, b), rg)
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let mut v = self.value(a).clone();
        v.data.iter_mut().for_each(|x| *x *= c);
        let rg = self.rg(a);
        self.push(v, Op::Scale(a, c), rg)
    }

    pub fn elu(&mut self, a: NodeId) -> NodeId {
        let mut v = self.value(a).clone();
        v.data
            .iter_mut()
            .for_each(|x| *x = if *x > 0.0 { *x } else { x.exp_m1() });
        let rg = self.rg(a);
        self.push(v, Op::Elu(a), rg)
    }

    /// Places `b`'s columns to the right of `a`'s.
    pub fn hcat(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.rows, vb.rows, "hcat rows");
        let cols = va.cols + vb.cols;
        let mut data = Vec::with_capacity(va.rows * cols);
        for i in 0..va.rows {
            data.extend_from_slice(va.row(i));
            data.extend_from_slice(vb.row(i));
        }
        let v = Mat {
            rows: va.rows,
            cols,
            data,
        };
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::HCat(a, b), rg)
    }

    /// Elementwise product of equally shaped nodes.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "mul shapes");
        let mut v = self.value(a).clone();
        for (x, &y) in v.data.iter_mut().zip(&self.nodes[b].value.data) {
            *x *= y;
        }
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Mul(a, b), rg)
    }

    /// Softmax over consecutive groups of `group` columns within each row.
    pub fn softmax_groups(&mut self, a: NodeId, group: usize) -> NodeId {
        assert!(group > 0 && self.value(a).cols % group == 0, "softmax group size");
        let mut v = self.value(a).clone();
        for g in v.data.chunks_mut(group) {
            softmax_in_place(g);
        }
        let rg = self.rg(a);
        self.push(v, Op::SoftmaxGroups(a, group), rg)
    }

    /// Combines base-model quantiles `values` (r×(p·m), laid out `[j][ν]`)
    /// with `weights` (one row broadcast, or r rows) into r×m quantiles.
    ///
    /// Weight layouts: coarse `[j]`, medium `[τ][j]`, fine `[τ][j][ν]`.
    pub fn mix(
        &mut self,
        weights: NodeId,
        values: NodeId,
        resolution: Resolution,
        p: usize,
        m: usize,
    ) -> NodeId {
        let layout = MixLayout { resolution, p, m };
        let w = self.value(weights);
        let vals = self.value(values);
        assert_eq!(vals.cols, p * m, "mix values width");
        assert_eq!(w.cols, resolution.weight_count(p, m), "mix weights width");
        assert!(w.rows == 1 || w.rows == vals.rows, "mix weight rows");
        let r = vals.rows;
        let mut out = Mat::zeros(r, m);
        for i in 0..r {
            let wr = if w.rows == 1 { w.row(0) } else { w.row(i) };
            mix_row(layout, wr, vals.row(i), out.row_mut(i));
        }
        let rg = self.rg(weights) || self.rg(values);
        self.push(
            out,
            Op::Mix {
                weights,
                values,
                layout,
            },
            rg,
        )
    }

    /// Applies an isotonization operator to every row.
    pub fn isotonize(&mut self, a: NodeId, op: IsoOperator, anchor: usize) -> Result<NodeId> {
        let input = self.value(a);
        let mut out = Mat::zeros(input.rows, input.cols);
        let mut maps = Vec::with_capacity(input.rows);
        let mut margin = f64::INFINITY;
        for i in 0..input.rows {
            let row = input.row(i);
            let res = isotonic::apply(op, row, anchor)?;
            margin = margin.min(iso_kink_margin(op, row, &res.values, anchor));
            out.row_mut(i).copy_from_slice(&res.values);
            maps.push(res.backward);
        }
        self.note_kink(margin);
        let rg = self.rg(a);
        Ok(self.push(out, Op::Isotonize(a, maps), rg))
    }

    /// Mean over rows of the summed pinball loss across levels.
    pub fn pinball_mean(&mut self, a: NodeId, y: &[f64], levels: &[f64]) -> NodeId {
        let q = self.value(a);
        assert_eq!(q.rows, y.len(), "pinball rows");
        assert_eq!(q.cols, levels.len(), "pinball levels");
        let mut total = 0.0;
        let mut margin = f64::INFINITY;
        for (i, &yi) in y.iter().enumerate() {
            for (&t, &qv) in levels.iter().zip(q.row(i)) {
                let r = yi - qv;
                margin = margin.min(r.abs());
                total += if r >= 0.0 { t * r } else { (t - 1.0) * r };
            }
        }
        self.note_kink(margin);
        let v = Mat::scalar(total / y.len() as f64);
        let rg = self.rg(a);
        self.push(
            v,
            Op::PinballMean {
                input: a,
                y: y.to_vec(),
                levels: levels.to_vec(),
            },
            rg,
        )
    }

    /// Mean over rows of `Σ_{τ<τ'} (q_τ − q_τ' + δ_{ττ'})₊`; `margins` is the
    /// row-major `m×m` table (only the upper triangle is read).
    pub fn crossing_mean(&mut self, a: NodeId, margins: &[f64]) -> NodeId {
        let q = self.value(a);
        let m = q.cols;
        assert_eq!(margins.len(), m * m, "margin table size");
        let mut total = 0.0;
        let mut margin = f64::INFINITY;
        for i in 0..q.rows {
            let row = q.row(i);
            for t in 0..m {
                for u in t + 1..m {
                    let arg = row[t] - row[u] + margins[t * m + u];
                    margin = margin.min(arg.abs());
                    if arg > 0.0 {
                        total += arg;
                    }
                }
            }
        }
        let rows = q.rows;
        self.note_kink(margin);
        let v = Mat::scalar(total / rows as f64);
        let rg = self.rg(a);
        self.push(
            v,
            Op::CrossingMean {
                input: a,
                margins: margins.to_vec(),
            },
            rg,
        )
    }

    /// Mean Gaussian negative log-likelihood; `a` is r×2 holding `(μ, ln σ)`.
    pub fn gaussian_nll_mean(&mut self, a: NodeId, y: &[f64]) -> NodeId {
        let x = self.value(a);
        assert_eq!(x.cols, 2, "gaussian nll expects (mean, log sd) columns");
        assert_eq!(x.rows, y.len(), "gaussian nll rows");
        let mut total = 0.0;
        for (i, &yi) in y.iter().enumerate() {
            let (mu, s) = (x.get(i, 0), x.get(i, 1));
            let z = (yi - mu) * (-s).exp();
            total += s + 0.5 * z * z + LN_2PI_HALF;
        }
        let v = Mat::scalar(total / y.len() as f64);
        let rg = self.rg(a);
        self.push(
            v,
            Op::GaussianNllMean {
                input: a,
                y: y.to_vec(),
            },
            rg,
        )
    }

    /// Mean over rows of the summed squared error against a single-column target.
    pub fn squared_error_mean(&mut self, a: NodeId, y: &[f64]) -> NodeId {
        let x = self.value(a);
        assert_eq!(x.rows, y.len(), "squared error rows");
        let mut total = 0.0;
        for (i, &yi) in y.iter().enumerate() {
            total += x.row(i).iter().map(|v| (v - yi).powi(2)).sum::<f64>();
        }
        let v = Mat::scalar(total / y.len() as f64);
        let rg = self.rg(a);
        self.push(
            v,
            Op::SquaredErrorMean {
                input: a,
                y: y.to_vec(),
            },
            rg,
        )
    }

    /// Gradients of the scalar node `loss` with respect to every parameter.
    pub fn backward(&self, loss: NodeId, params: &ParamSet) -> Result<Vec<Mat>> {
        let lv = self.scalar(loss);
        if !lv.is_finite() {
            return Err(Error::Numerical(format!("non-finite loss {lv}")));
        }
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss] = Some(Mat::scalar(1.0));
        let mut out = params.zeros_like();

        for id in (0..=loss).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            match &node.op {
                Op::Const => {}
                Op::Param(k) => {
                    for (o, v) in out[*k].data.iter_mut().zip(&g.data) {
                        *o += v;
                    }
                }
                Op::MatMul(a, b) => {
                    if self.rg(*a) {
                        let da = g.matmul_t(self.value(*b));
                        accumulate(&mut grads, *a, da);
                    }
                    if self.rg(*b) {
                        let db = self.value(*a).t_matmul(&g);
                        accumulate(&mut grads, *b, db);
                    }
                }
                Op::AddRow(a, b) => {
                    if self.rg(*b) {
                        let mut db = Mat::zeros(1, g.cols);
                        for row in g.iter_rows() {
                            for (d, &v) in db.data.iter_mut().zip(row) {
                                *d += v;
                            }
                        }
                        accumulate(&mut grads, *b, db);
                    }
                    if self.rg(*a) {
                        accumulate(&mut grads, *a, g);
                    }
                }
                Op::Add(a, b) => {
                    if self.rg(*b) {
                        accumulate(&mut grads, *b, g.clone());
                    }
                    if self.rg(*a) {
                        accumulate(&mut grads, *a, g);
                    }
                }
                Op::Scale(a, c) => {
                    let mut d = g;
                    d.data.iter_mut().for_each(|x| *x *= c);
                    accumulate(&mut grads, *a, d);
                }
                Op::Elu(a) => {
                    let mut d = g;
                    for (dv, &y) in d.data.iter_mut().zip(&node.value.data) {
                        // for x ≤ 0, d/dx (e^x − 1) = e^x = y + 1
                        if y <= 0.0 {
                            *dv *= y + 1.0;
                        }
                    }
                    accumulate(&mut grads, *a, d);
                }
                Op::HCat(a, b) => {
                    let ca = self.value(*a).cols;
                    let cb = self.value(*b).cols;
                    if self.rg(*a) {
                        let d = g.select_cols(&(0..ca).collect::<Vec<_>>());
                        accumulate(&mut grads, *a, d);
                    }
                    if self.rg(*b) {
                        let d = g.select_cols(&(ca..ca + cb).collect::<Vec<_>>());
                        accumulate(&mut grads, *b, d);
                    }
                }
                Op::Mul(a, b) => {
                    if self.rg(*a) {
                        let mut d = g.clone();
                        for (dv, &bv) in d.data.iter_mut().zip(&self.value(*b).data) {
                            *dv *= bv;
                        }
                        accumulate(&mut grads, *a, d);
                    }
                    if self.rg(*b) {
                        let mut d = g;
                        for (dv, &av) in d.data.iter_mut().zip(&self.value(*a).data) {
                            *dv *= av;
                        }
                        accumulate(&mut grads, *b, d);
                    }
                }
                Op::SoftmaxGroups(a, group) => {
                    let mut d = g;
                    for (dg, s) in d
                        .data
                        .chunks_mut(*group)
                        .zip(node.value.data.chunks(*group))
                    {
                        let dot: f64 = dg.iter().zip(s).map(|(x, y)| x * y).sum();
                        for (x, &sv) in dg.iter_mut().zip(s) {
                            *x = sv * (*x - dot);
                        }
                    }
                    accumulate(&mut grads, *a, d);
                }
                Op::Mix {
                    weights,
                    values,
                    layout,
                } => {
                    let w = self.value(*weights);
                    let vals = self.value(*values);
                    let want_w = self.rg(*weights);
                    let want_v = self.rg(*values);
                    let mut dw = Mat::zeros(w.rows, w.cols);
                    let mut dv = if want_v {
                        Mat::zeros(vals.rows, vals.cols)
                    } else {
                        Mat::zeros(0, 0)
                    };
                    for i in 0..vals.rows {
                        let wi = if w.rows == 1 { 0 } else { i };
                        let gw = if want_w {
                            Some(&mut dw.data[wi * w.cols..(wi + 1) * w.cols])
                        } else {
                            None
                        };
                        let gv = if want_v { Some(dv.row_mut(i)) } else { None };
                        mix_row_backward(*layout, w.row(wi), vals.row(i), g.row(i), gw, gv);
                    }
                    if want_w {
                        accumulate(&mut grads, *weights, dw);
                    }
                    if want_v {
                        accumulate(&mut grads, *values, dv);
                    }
                }
                Op::Isotonize(a, maps) => {
                    let mut d = Mat::zeros(g.rows, g.cols);
                    for (i, map) in maps.iter().enumerate() {
                        map.vjp_into(g.row(i), d.row_mut(i));
                    }
                    accumulate(&mut grads, *a, d);
                }
                Op::PinballMean { input, y, levels } => {
                    let q = self.value(*input);
                    let scale = g.data[0] / y.len() as f64;
                    let mut d = Mat::zeros(q.rows, q.cols);
                    for (i, &yi) in y.iter().enumerate() {
                        for (k, (&t, &qv)) in levels.iter().zip(q.row(i)).enumerate() {
                            d.data[i * q.cols + k] =
                                scale * if yi - qv >= 0.0 { -t } else { 1.0 - t };
                        }
                    }
                    accumulate(&mut grads, *input, d);
                }
                Op::CrossingMean { input, margins } => {
                    let q = self.value(*input);
                    let m = q.cols;
                    let scale = g.data[0] / q.rows as f64;
                    let mut d = Mat::zeros(q.rows, m);
                    for i in 0..q.rows {
                        let row = q.row(i);
                        let drow = &mut d.data[i * m..(i + 1) * m];
                        for t in 0..m {
                            for u in t + 1..m {
                                if row[t] - row[u] + margins[t * m + u] > 0.0 {
                                    drow[t] += scale;
                                    drow[u] -= scale;
                                }
                            }
                        }
                    }
                    accumulate(&mut grads, *input, d);
                }
                Op::GaussianNllMean { input, y } => {
                    let x = self.value(*input);
                    let scale = g.data[0] / y.len() as f64;
                    let mut d = Mat::zeros(x.rows, 2);
                    for (i, &yi) in y.iter().enumerate() {
                        let (mu, s) = (x.get(i, 0), x.get(i, 1));
                        let inv_var = (-2.0 * s).exp();
                        let r = yi - mu;
                        d.data[2 * i] = -scale * r * inv_var;
                        d.data[2 * i + 1] = scale * (1.0 - r * r * inv_var);
                    }
                    accumulate(&mut grads, *input, d);
                }
                Op::SquaredErrorMean { input, y } => {
                    let x = self.value(*input);
                    let scale = g.data[0] / y.len() as f64;
                    let mut d = Mat::zeros(x.rows, x.cols);
                    for (i, &yi) in y.iter().enumerate() {
                        for (dv, &v) in d.row_mut(i).iter_mut().zip(x.row(i)) {
                            *dv = 2.0 * scale * (v - yi);
                        }
                    }
                    accumulate(&mut grads, *input, d);
                }
            }
        }
        Ok(out)
    }
}

fn accumulate(grads: &mut [Option<Mat>], id: NodeId, d: Mat) {
    match &mut grads[id] {
        Some(g) => {
            for (a, b) in g.data.iter_mut().zip(&d.data) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(d),
    }
}

pub(crate) fn softmax_in_place(g: &mut [f64]) {
    let max = g.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in g.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in g.iter_mut() {
        *x /= sum;
    }
}

/// Combines one sample's base quantiles `vals` (`[j][ν]`, length `p·m`) with
/// weights `w` into `out` (length `m`); see [`Tape::mix`] for the layouts.
pub fn mix_weights(resolution: Resolution, p: usize, m: usize, w: &[f64], vals: &[f64], out: &mut [f64]) {
    out.iter_mut().for_each(|o| *o = 0.0);
    mix_row(MixLayout { resolution, p, m }, w, vals, out);
}

fn mix_row(layout: MixLayout, w: &[f64], vals: &[f64], out: &mut [f64]) {
    let MixLayout { resolution, p, m } = layout;
    match resolution {
        Resolution::Coarse => {
            for (j, &wj) in w.iter().enumerate() {
                for (o, &v) in out.iter_mut().zip(&vals[j * m..(j + 1) * m]) {
                    *o += wj * v;
                }
            }
        }
        Resolution::Medium => {
            for (t, o) in out.iter_mut().enumerate() {
                *o = (0..p).map(|j| w[t * p + j] * vals[j * m + t]).sum();
            }
        }
        Resolution::Fine => {
            let g = p * m;
            for (t, o) in out.iter_mut().enumerate() {
                *o = w[t * g..(t + 1) * g]
                    .iter()
                    .zip(vals)
                    .map(|(a, b)| a * b)
                    .sum();
            }
        }
    }
}

fn mix_row_backward(
    layout: MixLayout,
    w: &[f64],
    vals: &[f64],
    gout: &[f64],
    mut gw: Option<&mut [f64]>,
    mut gv: Option<&mut [f64]>,
) {
    let MixLayout { resolution, p, m } = layout;
    match resolution {
        Resolution::Coarse => {
            for j in 0..p {
                let vj = &vals[j * m..(j + 1) * m];
                if let Some(gw) = gw.as_deref_mut() {
                    gw[j] += vj.iter().zip(gout).map(|(a, b)| a * b).sum::<f64>();
                }
                if let Some(gv) = gv.as_deref_mut() {
                    for (t, &go) in gout.iter().enumerate() {
                        gv[j * m + t] += w[j] * go;
                    }
                }
            }
        }
        Resolution::Medium => {
            for (t, &go) in gout.iter().enumerate() {
                for j in 0..p {
                    if let Some(gw) = gw.as_deref_mut() {
                        gw[t * p + j] += go * vals[j * m + t];
                    }
                    if let Some(gv) = gv.as_deref_mut() {
                        gv[j * m + t] += go * w[t * p + j];
                    }
                }
            }
        }
        Resolution::Fine => {
            let g = p * m;
            for (t, &go) in gout.iter().enumerate() {
                if let Some(gw) = gw.as_deref_mut() {
                    for (d, &v) in gw[t * g..(t + 1) * g].iter_mut().zip(vals) {
                        *d += go * v;
                    }
                }
                if let Some(gv) = gv.as_deref_mut() {
                    for (d, &wv) in gv.iter_mut().zip(&w[t * g..(t + 1) * g]) {
                        *d += go * wv;
                    }
                }
            }
        }
    }
}

/// Distance of the comparisons made by an isotonization operator from a tie.
fn iso_kink_margin(op: IsoOperator, input: &[f64], output: &[f64], anchor: usize) -> f64 {
    match op {
        IsoOperator::Sort => output
            .windows(2)
            .map(|w| w[1] - w[0])
            .fold(f64::INFINITY, f64::min),
        IsoOperator::Pava => {
            // gaps between neighbouring blocks, and between raw inputs inside a block
            let mut best = f64::INFINITY;
            for k in 1..output.len() {
                let d = output[k] - output[k - 1];
                if d != 0.0 {
                    best = best.min(d);
                } else {
                    best = best.min((input[k] - input[k - 1]).abs());
                }
            }
            best
        }
        IsoOperator::MinMaxSweep => {
            let mut best = f64::INFINITY;
            for k in anchor + 1..input.len() {
                best = best.min((output[k - 1] - input[k]).abs());
            }
            for k in 0..anchor {
                best = best.min((output[k + 1] - input[k]).abs());
            }
            best
        }
    }
}
