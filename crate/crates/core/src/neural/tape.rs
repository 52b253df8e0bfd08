//! Reverse-mode differentiation over 2-D `f64` arrays.
//!
//! Activations are laid out with one row per (sample, intersection) pair,
//! row `b * n + i`, and features along columns. A per-intersection
//! ("1×1 convolution") layer is then a single matrix product for the whole
//! batch, and intersection mixing is a per-sample left multiplication.

use ndarray::{linalg::general_mat_mul, s, Array2, ArrayView2, Axis};

use crate::error::{Result, TscError};

/// Named trainable matrices. Biases are stored as `1 × F`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    pub names: Vec<String>,
    pub values: Vec<Array2<f64>>,
}

impl ParamSet {
    pub fn push(&mut self, name: impl Into<String>, value: Array2<f64>) -> usize {
        self.names.push(name.into());
        self.values.push(value);
        self.values.len() - 1
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn zeros_like(&self) -> Vec<Array2<f64>> {
        self.values.iter().map(|v| Array2::zeros(v.raw_dim())).collect()
    }

    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(Array2::len).sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

enum Op {
    Param(usize),
    Input,
    /// `x · wᵀ + b`
    Linear { x: NodeId, w: NodeId, b: NodeId },
    Relu(NodeId),
    Add(NodeId, NodeId),
    ConcatCols(NodeId, NodeId),
    MatMul(NodeId, NodeId),
    SoftmaxRows(NodeId),
    /// Per sample block `H_b`: `W · H_b`.
    Mix { h: NodeId, w: NodeId, n: usize },
}

struct Node {
    value: Array2<f64>,
    op: Op,
    needs_grad: bool,
}

/// A recorded forward pass over borrowed parameters.
pub struct Tape<'p> {
    params: &'p ParamSet,
    nodes: Vec<Node>,
    /// Parameter nodes are created once per tape.
    param_nodes: Vec<Option<NodeId>>,
}

fn shape_err(op: &str, a: &[usize], b: &[usize]) -> TscError {
    TscError::invalid(format!("{op}: incompatible shapes {a:?} and {b:?}"))
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamSet) -> Self {
        Tape {
            params,
            nodes: Vec::new(),
            param_nodes: vec![None; params.len()],
        }
    }

    fn push(&mut self, value: Array2<f64>, op: Op, needs_grad: bool) -> NodeId {
        self.nodes.push(Node { value, op, needs_grad });
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> ArrayView2<'_, f64> {
        self.nodes[id.0].value.view()
    }

    pub fn into_value(mut self, id: NodeId) -> Array2<f64> {
        std::mem::take(&mut self.nodes[id.0].value)
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    pub fn param(&mut self, index: usize) -> NodeId {
        if let Some(id) = self.param_nodes[index] {
            return id;
        }
        // Parameter values are copied once per tape; they are small next to activations.
        let id = self.push(self.params.values[index].clone(), Op::Param(index), true);
        self.param_nodes[index] = Some(id);
        id
    }

    pub fn input(&mut self, value: Array2<f64>) -> NodeId {
        self.push(value, Op::Input, false)
    }

    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let (xv, wv, bv) = (&self.nodes[x.0].value, &self.nodes[w.0].value, &self.nodes[b.0].value);
        if xv.ncols() != wv.ncols() || bv.nrows() != 1 || bv.ncols() != wv.nrows() {
            return Err(shape_err("linear", xv.shape(), wv.shape()));
        }
        let mut y = Array2::zeros((xv.nrows(), wv.nrows()));
        y.assign(&bv.row(0));
        general_mat_mul(1.0, xv, &wv.t(), 1.0, &mut y);
        let needs = self.needs(x) || self.needs(w) || self.needs(b);
        Ok(self.push(y, Op::Linear { x, w, b }, needs))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let y = self.nodes[x.0].value.mapv(|v| v.max(0.0));
        let needs = self.needs(x);
        self.push(y, Op::Relu(x), needs)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if av.shape() != bv.shape() {
            return Err(shape_err("add", av.shape(), bv.shape()));
        }
        let y = av + bv;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(y, Op::Add(a, b), needs))
    }

    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if av.nrows() != bv.nrows() {
            return Err(shape_err("concat", av.shape(), bv.shape()));
        }
        let y = ndarray::concatenate(Axis(1), &[av.view(), bv.view()]).expect("row counts checked");
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(y, Op::ConcatCols(a, b), needs))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if av.ncols() != bv.nrows() {
            return Err(shape_err("matmul", av.shape(), bv.shape()));
        }
        let y = av.dot(bv);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(y, Op::MatMul(a, b), needs))
    }

    pub fn softmax_rows(&mut self, x: NodeId) -> NodeId {
        let y = softmax_rows(self.nodes[x.0].value.view());
        let needs = self.needs(x);
        self.push(y, Op::SoftmaxRows(x), needs)
    }

    /// `h` holds `B` blocks of `n` rows; each block `H_b` becomes `W · H_b`
    /// with `W` of shape `n × n`.
    pub fn mix(&mut self, h: NodeId, w: NodeId) -> Result<NodeId> {
        let (hv, wv) = (&self.nodes[h.0].value, &self.nodes[w.0].value);
        let n = wv.nrows();
        if wv.ncols() != n || n == 0 || hv.nrows() % n != 0 {
            return Err(shape_err("mix", hv.shape(), wv.shape()));
        }
        let mut y = Array2::zeros(hv.raw_dim());
        for b in 0..hv.nrows() / n {
            let rows = s![b * n..(b + 1) * n, ..];
            general_mat_mul(1.0, wv, &hv.slice(rows), 0.0, &mut y.slice_mut(rows));
        }
        let needs = self.needs(h) || self.needs(w);
        Ok(self.push(y, Op::Mix { h, w, n }, needs))
    }

    /// On/off state of every ReLU unit recorded so far; used to tell whether
    /// two nearby evaluations straddle a kink.
    pub fn relu_pattern(&self) -> Vec<bool> {
        self.nodes
            .iter()
            .filter(|n| matches!(n.op, Op::Relu(_)))
            .flat_map(|n| n.value.iter().map(|&v| v > 0.0))
            .collect()
    }

    /// Back-propagates `seed = dL/d(root)` and returns one gradient per
    /// parameter (zeros for parameters off the path).
    pub fn backward(&self, root: NodeId, seed: Array2<f64>) -> Result<Vec<Array2<f64>>> {
        if root.0 >= self.nodes.len() {
            return Err(TscError::Contract(format!(
                "backward from node {} on a tape with {} nodes",
                root.0,
                self.nodes.len()
            )));
        }
        if seed.shape() != self.nodes[root.0].value.shape() {
            return Err(shape_err("backward seed", seed.shape(), self.nodes[root.0].value.shape()));
        }
        let mut grads: Vec<Option<Array2<f64>>> = (0..=root.0).map(|_| None).collect();
        grads[root.0] = Some(seed);
        let mut out = self.params.zeros_like();

        fn acc(grads: &mut [Option<Array2<f64>>], id: NodeId, g: Array2<f64>) {
            match &mut grads[id.0] {
                Some(existing) => *existing += &g,
                slot => *slot = Some(g),
            }
        }

        for k in (0..=root.0).rev() {
            let Some(g) = grads[k].take() else { continue };
            let node = &self.nodes[k];
            if !node.needs_grad {
                continue;
            }
            match node.op {
                Op::Param(p) => out[p] += &g,
                Op::Input => {}
                Op::Linear { x, w, b } => {
                    if self.needs(x) {
                        acc(&mut grads, x, g.dot(&self.nodes[w.0].value));
                    }
                    if self.needs(w) {
                        acc(&mut grads, w, g.t().dot(&self.nodes[x.0].value));
                    }
                    if self.needs(b) {
                        acc(&mut grads, b, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    }
                }
                Op::Relu(x) => {
                    let mut g = g;
                    ndarray::Zip::from(&mut g)
                        .and(&node.value)
                        .for_each(|g, &y| {
                            if y <= 0.0 {
                                *g = 0.0
                            }
                        });
                    acc(&mut grads, x, g);
                }
                Op::Add(a, b) => {
                    if self.needs(b) {
                        acc(&mut grads, b, g.clone());
                    }
                    if self.needs(a) {
                        acc(&mut grads, a, g);
                    }
                }
                Op::ConcatCols(a, b) => {
                    let split = self.nodes[a.0].value.ncols();
                    if self.needs(a) {
                        acc(&mut grads, a, g.slice(s![.., ..split]).to_owned());
                    }
                    if self.needs(b) {
                        acc(&mut grads, b, g.slice(s![.., split..]).to_owned());
                    }
                }
                Op::MatMul(a, b) => {
                    if self.needs(a) {
                        acc(&mut grads, a, g.dot(&self.nodes[b.0].value.t()));
                    }
                    if self.needs(b) {
                        acc(&mut grads, b, self.nodes[a.0].value.t().dot(&g));
                    }
                }
                Op::SoftmaxRows(x) => {
                    let y = &node.value;
                    let mut dx = &g * y;
                    let dots = dx.sum_axis(Axis(1));
                    for (mut row, (yr, d)) in dx.rows_mut().into_iter().zip(y.rows().into_iter().zip(dots)) {
                        row.scaled_add(-d, &yr);
                    }
                    acc(&mut grads, x, dx);
                }
                Op::Mix { h, w, n } => {
                    let hv = &self.nodes[h.0].value;
                    let wv = &self.nodes[w.0].value;
                    let blocks = hv.nrows() / n;
                    if self.needs(h) {
                        let mut dh = Array2::zeros(hv.raw_dim());
                        for b in 0..blocks {
                            let rows = s![b * n..(b + 1) * n, ..];
                            general_mat_mul(1.0, &wv.t(), &g.slice(rows), 0.0, &mut dh.slice_mut(rows));
                        }
                        acc(&mut grads, h, dh);
                    }
                    if self.needs(w) {
                        let mut dw = Array2::zeros((n, n));
                        for b in 0..blocks {
                            let rows = s![b * n..(b + 1) * n, ..];
                            general_mat_mul(1.0, &g.slice(rows), &hv.slice(rows).t(), 1.0, &mut dw);
                        }
                        acc(&mut grads, w, dw);
                    }
                }
            }
        }
        Ok(out)
    }
}

pub fn softmax_rows(x: ArrayView2<'_, f64>) -> Array2<f64> {
    let mut y = x.to_owned();
    for mut row in y.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row /= sum;
    }
    y
}
