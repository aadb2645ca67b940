//! Dense 64-bit tensors with define-by-run reverse-mode differentiation.
//!
//! Parameters live in a [`ParamStore`] as plain [`Tensor`]s. Each forward
//! pass builds a fresh [`Graph`]; [`Graph::param`] copies a parameter in as
//! a leaf, and after [`Graph::backward`] the leaf gradients are added into
//! the store with [`Graph::accumulate_param_grads`]. Gradients accumulate
//! (`+=`) until [`ParamStore::zero_grad`] is called.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::math;
use crate::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(pub usize);

/// A node handle; alias kept short because model code uses it everywhere.
pub type Var = NodeId;

/// Dense row-major array of `f64` with optional gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
    node_id: Option<NodeId>,
}

fn shape_len(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn fmt_shape(shape: &[usize]) -> String {
    format!("{shape:?}")
}

impl Tensor {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::Dimension(format!(
                "shape {} must be a non-empty list of positive sizes",
                fmt_shape(&shape)
            )));
        }
        if shape_len(&shape) != values.len() {
            return Err(Error::Dimension(format!(
                "shape {} needs {} values, got {}",
                fmt_shape(&shape),
                shape_len(&shape),
                values.len()
            )));
        }
        Ok(Tensor {
            shape,
            values,
            requires_grad: false,
            grad: None,
            node_id: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            values: vec![0.0; shape_len(shape)],
            requires_grad: false,
            grad: None,
            node_id: None,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            values: vec![value],
            requires_grad: false,
            grad: None,
            node_id: None,
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let values = (0..shape_len(shape)).map(&mut f).collect();
        Tensor {
            shape: shape.to_vec(),
            values,
            requires_grad: false,
            grad: None,
            node_id: None,
        }
    }

    /// Uniform Glorot initialisation for a `[fan_in, fan_out]` matrix.
    pub fn glorot<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Self {
        let limit = math::sqrt(6.0 / (rows + cols) as f64);
        Tensor::from_fn(&[rows, cols], |_| (rng.random::<f64>() * 2.0 - 1.0) * limit)
    }

    pub fn normal<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        Tensor::from_fn(shape, |_| crate::rng::normal(rng) * std)
    }

    pub fn with_requires_grad(mut self, requires_grad: bool) -> Self {
        self.requires_grad = requires_grad;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }
    pub fn values(&self) -> &[f64] {
        &self.values
    }
    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }
    pub fn into_values(self) -> Vec<f64> {
        self.values
    }
    pub fn len(&self) -> usize {
        self.values.len()
    }
    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }
    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }
    pub fn node_id(&self) -> Option<NodeId> {
        self.node_id
    }

    /// Reset the gradient to zeros (allocating it when absent).
    pub fn zero_grad(&mut self) {
        match &mut self.grad {
            Some(g) => g.iter_mut().for_each(|x| *x = 0.0),
            None => self.grad = Some(vec![0.0; self.values.len()]),
        }
    }

    pub fn accumulate_grad(&mut self, delta: &[f64]) -> Result<()> {
        if delta.len() != self.values.len() {
            return Err(Error::Dimension(format!(
                "gradient of length {} does not fit tensor of shape {}",
                delta.len(),
                fmt_shape(&self.shape)
            )));
        }
        let g = self.grad.get_or_insert_with(|| vec![0.0; delta.len()]);
        for (a, b) in g.iter_mut().zip(delta) {
            *a += b;
        }
        Ok(())
    }

    /// Rows of a 2-D tensor (1-D tensors are one row).
    pub fn rows(&self) -> usize {
        if self.shape.len() == 1 {
            1
        } else {
            self.shape[..self.shape.len() - 1].iter().product()
        }
    }
    pub fn cols(&self) -> usize {
        *self.shape.last().expect("shape is never empty")
    }
    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.values[r * c..(r + 1) * c]
    }
}

/// Index of a parameter inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub usize);

/// Named, ordered collection of trainable tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: BTreeMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, tensor: Tensor) -> Result<ParamId> {
        if self.index.contains_key(name) {
            return Err(Error::Config(format!("duplicate parameter name `{name}`")));
        }
        let id = ParamId(self.tensors.len());
        let mut tensor = tensor.with_requires_grad(true);
        tensor.zero_grad();
        self.names.push(name.to_string());
        self.tensors.push(tensor);
        self.index.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }
    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }
    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }
    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
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
    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(self.tensors.iter())
    }
    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn zero_grad(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }

    pub fn num_values(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Overwrite values by name; the shape must match.
    pub fn set_values(&mut self, name: &str, shape: &[usize], values: Vec<f64>) -> Result<()> {
        let id = self
            .id(name)
            .ok_or_else(|| Error::Input(format!("unknown parameter `{name}`")))?;
        let t = &mut self.tensors[id.0];
        if t.shape != shape || values.len() != t.values.len() {
            return Err(Error::Dimension(format!(
                "parameter `{name}` has shape {}, got {}",
                fmt_shape(&t.shape),
                fmt_shape(shape)
            )));
        }
        t.values = values;
        Ok(())
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    ScaleRows(Var, Vec<f64>),
    Softmax { input: Var, axis: usize },
    LayerNorm { input: Var, normalized: Vec<f64>, inv_std: Vec<f64> },
    Gelu(Var),
    Sigmoid(Var),
    Relu(Var),
    Gather { table: Var, ids: Vec<usize> },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols { input: Var, start: usize },
    SliceRows { input: Var, start: usize },
    MeanRows(Var),
    Sum(Var),
    Mean(Var),
    Dropout { input: Var, mask: Vec<f64> },
    CrossEntropy { logits: Var, targets: Vec<Option<usize>>, probs: Vec<f64>, count: usize },
    CrossEntropySum { logits: Var, targets: Vec<Option<usize>>, probs: Vec<f64> },
    BinaryCrossEntropy { probs: Var, targets: Vec<f64> },
}

#[derive(Debug, Clone)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
    param: Option<ParamId>,
}

/// Smallest probability allowed into the binary cross-entropy logs.
pub const BCE_CLAMP: f64 = 1e-7;
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// One define-by-run computation graph.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Vec<f64>>,
    params: BTreeMap<ParamId, Var>,
}

fn dims2(shape: &[usize]) -> (usize, usize) {
    if shape.len() == 1 {
        (1, shape[0])
    } else {
        (shape[..shape.len() - 1].iter().product(), shape[shape.len() - 1])
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }
    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(shape_len(&shape), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
            param: None,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }
    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }
    pub fn dims(&self, v: Var) -> (usize, usize) {
        dims2(&self.nodes[v.0].shape)
    }

    /// Snapshot a node as a standalone tensor carrying its node id.
    pub fn tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor {
            shape: n.shape.clone(),
            values: n.value.clone(),
            requires_grad: n.requires_grad,
            grad: self.grads.get(v.0).filter(|g| !g.is_empty()).cloned(),
            node_id: Some(v),
        }
    }

    /// Accumulated gradient of a node after [`Graph::backward`]; zeros if
    /// nothing reached it.
    pub fn grad(&self, v: Var) -> Vec<f64> {
        match self.grads.get(v.0) {
            Some(g) if !g.is_empty() => g.clone(),
            _ => vec![0.0; self.nodes[v.0].value.len()],
        }
    }

    /// Leaf that does not require a gradient.
    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.push(t.shape.clone(), t.values.clone(), Op::Leaf, false)
    }

    /// Leaf input; `requires_grad` follows the tensor's flag.
    pub fn input(&mut self, t: &Tensor) -> Var {
        self.push(t.shape.clone(), t.values.clone(), Op::Leaf, t.requires_grad)
    }

    pub fn zeros(&mut self, shape: &[usize]) -> Var {
        self.push(shape.to_vec(), vec![0.0; shape_len(shape)], Op::Leaf, false)
    }

    /// Parameter leaf; repeated calls in one graph share the node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(v) = self.params.get(&id) {
            return *v;
        }
        let t = store.get(id);
        let v = self.push(t.shape.clone(), t.values.clone(), Op::Leaf, true);
        self.nodes[v.0].param = Some(id);
        self.params.insert(id, v);
        v
    }

    /// Parameter leaf whose gradient is not tracked (frozen weights).
    pub fn frozen(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.constant(store.get(id))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(Error::Dimension(format!(
                "{what}: shapes {} and {} differ",
                fmt_shape(&self.nodes[a.0].shape),
                fmt_shape(&self.nodes[b.0].shape)
            )));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Dimension(format!(
                "matmul: cannot multiply {} by {}",
                fmt_shape(sa),
                fmt_shape(sb)
            )));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        matmul_into(&self.nodes[a.0].value, &self.nodes[b.0].value, &mut out, m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(vec![m, n], out, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = &self.nodes[a.0].shape;
        if s.len() != 2 {
            return Err(Error::Dimension(format!("transpose needs a matrix, got {}", fmt_shape(s))));
        }
        let (m, n) = (s[0], s[1]);
        let x = &self.nodes[a.0].value;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = x[i * n + j];
            }
        }
        let rg = self.rg(a);
        Ok(self.push(vec![n, m], out, Op::Transpose(a), rg))
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op, what: &str) -> Result<Var> {
        self.same_shape(a, b, what)?;
        let out = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(x, y)| f(*x, *y))
            .collect();
        let rg = self.rg(a) || self.rg(b);
        let shape = self.nodes[a.0].shape.clone();
        Ok(self.push(shape, out, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b), "add")
    }
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b), "sub")
    }
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b), "mul")
    }

    fn row_broadcast_check(&self, a: Var, b: Var, what: &str) -> Result<(usize, usize)> {
        let (m, n) = self.dims(a);
        if self.nodes[b.0].value.len() != n {
            return Err(Error::Dimension(format!(
                "{what}: row vector {} does not match width of {}",
                fmt_shape(&self.nodes[b.0].shape),
                fmt_shape(&self.nodes[a.0].shape)
            )));
        }
        Ok((m, n))
    }

    /// `a[i, :] + b` for every row.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, n) = self.row_broadcast_check(a, b, "add_row")?;
        let (x, r) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let mut out = x.clone();
        for i in 0..m {
            for j in 0..n {
                out[i * n + j] += r[j];
            }
        }
        let rg = self.rg(a) || self.rg(b);
        let shape = self.nodes[a.0].shape.clone();
        Ok(self.push(shape, out, Op::AddRow(a, b), rg))
    }

    /// `a[i, :] * b` for every row.
    pub fn mul_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, n) = self.row_broadcast_check(a, b, "mul_row")?;
        let (x, r) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let mut out = x.clone();
        for i in 0..m {
            for j in 0..n {
                out[i * n + j] *= r[j];
            }
        }
        let rg = self.rg(a) || self.rg(b);
        let shape = self.nodes[a.0].shape.clone();
        Ok(self.push(shape, out, Op::MulRow(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.nodes[a.0].value.iter().map(|x| x * c).collect();
        let rg = self.rg(a);
        let shape = self.nodes[a.0].shape.clone();
        self.push(shape, out, Op::Scale(a, c), rg)
    }

    /// Multiply row `i` by the constant `weights[i]`.
    pub fn scale_rows(&mut self, a: Var, weights: Vec<f64>) -> Result<Var> {
        let (m, n) = self.dims(a);
        if weights.len() != m {
            return Err(Error::Dimension(format!(
                "scale_rows: {} weights for {m} rows",
                weights.len()
            )));
        }
        let mut out = self.nodes[a.0].value.clone();
        for i in 0..m {
            for v in &mut out[i * n..(i + 1) * n] {
                *v *= weights[i];
            }
        }
        let rg = self.rg(a);
        let shape = self.nodes[a.0].shape.clone();
        Ok(self.push(shape, out, Op::ScaleRows(a, weights), rg))
    }

    /// Max-subtracted softmax along `axis`.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.nodes[a.0].shape.clone();
        if axis >= shape.len() {
            return Err(Error::Dimension(format!(
                "softmax axis {axis} out of range for {}",
                fmt_shape(&shape)
            )));
        }
        let mut out = self.nodes[a.0].value.clone();
        for_each_slice(&shape, axis, |idx| {
            let max = idx.clone().map(|i| out[i]).fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for i in idx.clone() {
                out[i] = math::exp(out[i] - max);
                total += out[i];
            }
            for i in idx {
                out[i] /= total;
            }
        });
        let rg = self.rg(a);
        Ok(self.push(shape, out, Op::Softmax { input: a, axis }, rg))
    }

    /// Row-wise standardisation without gain or bias.
    pub fn layer_norm(&mut self, a: Var) -> Var {
        let (m, n) = self.dims(a);
        let x = &self.nodes[a.0].value;
        let mut out = vec![0.0; m * n];
        let mut inv_std = vec![0.0; m];
        for i in 0..m {
            let row = &x[i * n..(i + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let inv = 1.0 / math::sqrt(var + LAYER_NORM_EPS);
            inv_std[i] = inv;
            for j in 0..n {
                out[i * n + j] = (row[j] - mean) * inv;
            }
        }
        let rg = self.rg(a);
        let shape = self.nodes[a.0].shape.clone();
        let normalized = out.clone();
        self.push(shape, out, Op::LayerNorm { input: a, normalized, inv_std }, rg)
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let out = self.nodes[a.0].value.iter().map(|x| f(*x)).collect();
        let rg = self.rg(a);
        let shape = self.nodes[a.0].shape.clone();
        self.push(shape, out, op, rg)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, math::gelu, Op::Gelu(a))
    }
    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, math::sigmoid, Op::Sigmoid(a))
    }
    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    /// Rows `ids` of a `[V, d]` table, as an `[ids.len(), d]` matrix.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = self.dims(table);
        if ids.is_empty() {
            return Err(Error::Dimension("gather_rows: empty id list".into()));
        }
        if let Some(bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::Index(format!("row {bad} out of range for table with {v} rows")));
        }
        let t = &self.nodes[table.0].value;
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&t[i * d..(i + 1) * d]);
        }
        let rg = self.rg(table);
        Ok(self.push(vec![ids.len(), d], out, Op::Gather { table, ids: ids.to_vec() }, rg))
    }

    /// Concatenate matrices with equal row counts along the last axis.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Dimension("concat_cols: nothing to concatenate".into()));
        }
        let m = self.dims(parts[0]).0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pm, pn) = self.dims(p);
            if pm != m {
                return Err(Error::Dimension(format!(
                    "concat_cols: row counts {} and {} differ",
                    fmt_shape(&self.nodes[parts[0].0].shape),
                    fmt_shape(&self.nodes[p.0].shape)
                )));
            }
            widths.push(pn);
        }
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; m * total];
        let mut offset = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let x = &self.nodes[p.0].value;
            for i in 0..m {
                out[i * total + offset..i * total + offset + w].copy_from_slice(&x[i * w..(i + 1) * w]);
            }
            offset += w;
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(vec![m, total], out, Op::ConcatCols(parts.to_vec()), rg))
    }

    /// Stack matrices with equal widths along the first axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Dimension("concat_rows: nothing to concatenate".into()));
        }
        let n = self.dims(parts[0]).1;
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (pm, pn) = self.dims(p);
            if pn != n {
                return Err(Error::Dimension(format!(
                    "concat_rows: widths {} and {} differ",
                    fmt_shape(&self.nodes[parts[0].0].shape),
                    fmt_shape(&self.nodes[p.0].shape)
                )));
            }
            out.extend_from_slice(&self.nodes[p.0].value);
            rows += pm;
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(vec![rows, n], out, Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.dims(a);
        if len == 0 || start + len > n {
            return Err(Error::Dimension(format!(
                "slice_cols: [{start}, {}) outside width {n}",
                start + len
            )));
        }
        let x = &self.nodes[a.0].value;
        let mut out = Vec::with_capacity(m * len);
        for i in 0..m {
            out.extend_from_slice(&x[i * n + start..i * n + start + len]);
        }
        let rg = self.rg(a);
        Ok(self.push(vec![m, len], out, Op::SliceCols { input: a, start }, rg))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.dims(a);
        if len == 0 || start + len > m {
            return Err(Error::Dimension(format!(
                "slice_rows: [{start}, {}) outside {m} rows",
                start + len
            )));
        }
        let out = self.nodes[a.0].value[start * n..(start + len) * n].to_vec();
        let rg = self.rg(a);
        Ok(self.push(vec![len, n], out, Op::SliceRows { input: a, start }, rg))
    }

    /// Mean over rows, giving a `[1, n]` matrix.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let (m, n) = self.dims(a);
        let x = &self.nodes[a.0].value;
        let mut out = vec![0.0; n];
        for i in 0..m {
            for j in 0..n {
                out[j] += x[i * n + j];
            }
        }
        out.iter_mut().for_each(|v| *v /= m as f64);
        let rg = self.rg(a);
        self.push(vec![1, n], out, Op::MeanRows(a), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.nodes[a.0].value.iter().sum();
        let rg = self.rg(a);
        self.push(vec![1], vec![s], Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let x = &self.nodes[a.0].value;
        let s = x.iter().sum::<f64>() / x.len() as f64;
        let rg = self.rg(a);
        self.push(vec![1], vec![s], Op::Mean(a), rg)
    }

    /// Inverted dropout with keep-probability `1 - rate`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, a: Var, rate: f64, rng: &mut R) -> Var {
        if rate <= 0.0 {
            return a;
        }
        let keep = 1.0 - rate;
        let mask: Vec<f64> = (0..self.nodes[a.0].value.len())
            .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let out = self.nodes[a.0].value.iter().zip(&mask).map(|(x, m)| x * m).collect();
        let rg = self.rg(a);
        let shape = self.nodes[a.0].shape.clone();
        self.push(shape, out, Op::Dropout { input: a, mask }, rg)
    }

    fn ce_forward(&self, logits: Var, targets: &[Option<usize>]) -> Result<(Vec<f64>, f64, usize)> {
        let (m, k) = self.dims(logits);
        if targets.len() != m {
            return Err(Error::Dimension(format!(
                "cross_entropy: {} targets for {m} rows",
                targets.len()
            )));
        }
        let mut probs = self.nodes[logits.0].value.clone();
        let mut total = 0.0;
        let mut count = 0;
        for (i, t) in targets.iter().enumerate() {
            let row = &mut probs[i * k..(i + 1) * k];
            let lse = math::log_sum_exp(row);
            if let Some(t) = *t {
                if t >= k {
                    return Err(Error::Index(format!("target {t} out of range for {k} classes")));
                }
                total -= row[t] - lse;
                count += 1;
            }
            for v in row.iter_mut() {
                *v = math::exp(*v - lse);
            }
        }
        Ok((probs, total, count))
    }

    /// Mean negative log-softmax at the target of each row; `None` rows
    /// are ignored. Zero when every row is ignored.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let (probs, total, count) = self.ce_forward(logits, targets)?;
        let loss = if count == 0 { 0.0 } else { total / count as f64 };
        let rg = self.rg(logits);
        Ok(self.push(
            vec![1],
            vec![loss],
            Op::CrossEntropy { logits, targets: targets.to_vec(), probs, count },
            rg,
        ))
    }

    /// Unreduced (summed) variant of [`Graph::cross_entropy`].
    pub fn cross_entropy_sum(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let (probs, total, _) = self.ce_forward(logits, targets)?;
        let rg = self.rg(logits);
        Ok(self.push(
            vec![1],
            vec![total],
            Op::CrossEntropySum { logits, targets: targets.to_vec(), probs },
            rg,
        ))
    }

    /// Mean binary cross-entropy with probabilities clamped to
    /// `[BCE_CLAMP, 1 - BCE_CLAMP]`.
    pub fn binary_cross_entropy(&mut self, probs: Var, targets: &[f64]) -> Result<Var> {
        let p = &self.nodes[probs.0].value;
        if p.len() != targets.len() {
            return Err(Error::Dimension(format!(
                "binary_cross_entropy: {} probabilities for {} targets",
                p.len(),
                targets.len()
            )));
        }
        let n = p.len() as f64;
        let loss = p
            .iter()
            .zip(targets)
            .map(|(&p, &t)| {
                let p = p.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
                -(t * math::ln(p) + (1.0 - t) * math::ln(1.0 - p))
            })
            .sum::<f64>()
            / n;
        let rg = self.rg(probs);
        Ok(self.push(
            vec![1],
            vec![loss],
            Op::BinaryCrossEntropy { probs, targets: targets.to_vec() },
            rg,
        ))
    }

    /// Reverse-mode sweep from a scalar. Gradients add onto whatever
    /// earlier sweeps left in this graph.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {}",
                fmt_shape(&self.nodes[loss.0].shape)
            )));
        }
        let mut grads: Vec<Vec<f64>> = vec![Vec::new(); loss.0 + 1];
        grads[loss.0] = vec![1.0];
        for idx in (0..=loss.0).rev() {
            if grads[idx].is_empty() || !self.nodes[idx].requires_grad {
                continue;
            }
            let g = core::mem::take(&mut grads[idx]);
            self.propagate(idx, &g, &mut grads);
            grads[idx] = g;
        }
        if self.grads.len() < self.nodes.len() {
            self.grads.resize(self.nodes.len(), Vec::new());
        }
        for (idx, g) in grads.into_iter().enumerate() {
            if g.is_empty() {
                continue;
            }
            let acc = &mut self.grads[idx];
            if acc.is_empty() {
                *acc = g;
            } else {
                acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
            }
        }
        Ok(())
    }

    /// Add each parameter leaf's gradient into the store.
    pub fn accumulate_param_grads(&self, store: &mut ParamStore) -> Result<()> {
        for (&id, &v) in &self.params {
            if let Some(g) = self.grads.get(v.0).filter(|g| !g.is_empty()) {
                store.get_mut(id).accumulate_grad(g)?;
            }
        }
        Ok(())
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Vec<f64>]) {
        let node = &self.nodes[idx];
        let add = |grads: &mut [Vec<f64>], v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let slot = &mut grads[v.0];
            if slot.is_empty() {
                *slot = vec![0.0; self.nodes[v.0].value.len()];
            }
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.dims(*a);
                let n = self.dims(*b).1;
                let av = &self.nodes[a.0].value;
                let bv = &self.nodes[b.0].value;
                add(grads, *a, &mut |ga| {
                    // dA = dC · Bᵀ
                    for i in 0..m {
                        for p in 0..k {
                            let mut s = 0.0;
                            for j in 0..n {
                                s += g[i * n + j] * bv[p * n + j];
                            }
                            ga[i * k + p] += s;
                        }
                    }
                });
                add(grads, *b, &mut |gb| {
                    // dB = Aᵀ · dC
                    for i in 0..m {
                        for p in 0..k {
                            let a_ip = av[i * k + p];
                            if a_ip == 0.0 {
                                continue;
                            }
                            let row = &g[i * n..(i + 1) * n];
                            for (dst, gv) in gb[p * n..(p + 1) * n].iter_mut().zip(row) {
                                *dst += a_ip * gv;
                            }
                        }
                    }
                });
            }
            Op::Transpose(a) => {
                let (m, n) = self.dims(*a);
                add(grads, *a, &mut |ga| {
                    for i in 0..m {
                        for j in 0..n {
                            ga[i * n + j] += g[j * m + i];
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                add(grads, *a, &mut |ga| axpy(ga, g, 1.0));
                add(grads, *b, &mut |gb| axpy(gb, g, 1.0));
            }
            Op::Sub(a, b) => {
                add(grads, *a, &mut |ga| axpy(ga, g, 1.0));
                add(grads, *b, &mut |gb| axpy(gb, g, -1.0));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                add(grads, *a, &mut |ga| {
                    ga.iter_mut().zip(g.iter().zip(bv)).for_each(|(d, (g, y))| *d += g * y)
                });
                add(grads, *b, &mut |gb| {
                    gb.iter_mut().zip(g.iter().zip(av)).for_each(|(d, (g, x))| *d += g * x)
                });
            }
            Op::AddRow(a, b) => {
                let (m, n) = self.dims(*a);
                add(grads, *a, &mut |ga| axpy(ga, g, 1.0));
                add(grads, *b, &mut |gb| {
                    for i in 0..m {
                        for j in 0..n {
                            gb[j] += g[i * n + j];
                        }
                    }
                });
            }
            Op::MulRow(a, b) => {
                let (m, n) = self.dims(*a);
                let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                add(grads, *a, &mut |ga| {
                    for i in 0..m {
                        for j in 0..n {
                            ga[i * n + j] += g[i * n + j] * bv[j];
                        }
                    }
                });
                add(grads, *b, &mut |gb| {
                    for i in 0..m {
                        for j in 0..n {
                            gb[j] += g[i * n + j] * av[i * n + j];
                        }
                    }
                });
            }
            Op::Scale(a, c) => add(grads, *a, &mut |ga| axpy(ga, g, *c)),
            Op::ScaleRows(a, w) => {
                let n = self.dims(*a).1;
                add(grads, *a, &mut |ga| {
                    for (i, wi) in w.iter().enumerate() {
                        for j in 0..n {
                            ga[i * n + j] += g[i * n + j] * wi;
                        }
                    }
                });
            }
            Op::Softmax { input, axis } => {
                let y = &node.value;
                add(grads, *input, &mut |ga| {
                    for_each_slice(&node.shape, *axis, |idx| {
                        let dot: f64 = idx.clone().map(|i| g[i] * y[i]).sum();
                        for i in idx {
                            ga[i] += y[i] * (g[i] - dot);
                        }
                    });
                });
            }
            Op::LayerNorm { input, normalized, inv_std } => {
                let (m, n) = self.dims(*input);
                add(grads, *input, &mut |ga| {
                    for i in 0..m {
                        let gr = &g[i * n..(i + 1) * n];
                        let xr = &normalized[i * n..(i + 1) * n];
                        let mean_g = gr.iter().sum::<f64>() / n as f64;
                        let mean_gx = gr.iter().zip(xr).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                        for j in 0..n {
                            ga[i * n + j] += inv_std[i] * (gr[j] - mean_g - xr[j] * mean_gx);
                        }
                    }
                });
            }
            Op::Gelu(a) => {
                let x = &self.nodes[a.0].value;
                add(grads, *a, &mut |ga| {
                    for i in 0..ga.len() {
                        ga[i] += g[i] * math::gelu_grad(x[i]);
                    }
                });
            }
            Op::Sigmoid(a) => {
                let y = &node.value;
                add(grads, *a, &mut |ga| {
                    for i in 0..ga.len() {
                        ga[i] += g[i] * y[i] * (1.0 - y[i]);
                    }
                });
            }
            Op::Relu(a) => {
                let x = &self.nodes[a.0].value;
                add(grads, *a, &mut |ga| {
                    for i in 0..ga.len() {
                        if x[i] > 0.0 {
                            ga[i] += g[i];
                        }
                    }
                });
            }
            Op::Gather { table, ids } => {
                let d = self.dims(*table).1;
                add(grads, *table, &mut |gt| {
                    for (r, &id) in ids.iter().enumerate() {
                        axpy(&mut gt[id * d..(id + 1) * d], &g[r * d..(r + 1) * d], 1.0);
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let (m, total) = dims2(&node.shape);
                let mut offset = 0;
                for &p in parts {
                    let w = self.dims(p).1;
                    add(grads, p, &mut |gp| {
                        for i in 0..m {
                            axpy(
                                &mut gp[i * w..(i + 1) * w],
                                &g[i * total + offset..i * total + offset + w],
                                1.0,
                            );
                        }
                    });
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.nodes[p.0].value.len();
                    add(grads, p, &mut |gp| axpy(gp, &g[offset..offset + len], 1.0));
                    offset += len;
                }
            }
            Op::SliceCols { input, start } => {
                let n = self.dims(*input).1;
                let (m, len) = dims2(&node.shape);
                add(grads, *input, &mut |ga| {
                    for i in 0..m {
                        axpy(&mut ga[i * n + start..i * n + start + len], &g[i * len..(i + 1) * len], 1.0);
                    }
                });
            }
            Op::SliceRows { input, start } => {
                let n = self.dims(*input).1;
                add(grads, *input, &mut |ga| axpy(&mut ga[start * n..start * n + g.len()], g, 1.0));
            }
            Op::MeanRows(a) => {
                let (m, n) = self.dims(*a);
                add(grads, *a, &mut |ga| {
                    for i in 0..m {
                        for j in 0..n {
                            ga[i * n + j] += g[j] / m as f64;
                        }
                    }
                });
            }
            Op::Sum(a) => add(grads, *a, &mut |ga| ga.iter_mut().for_each(|v| *v += g[0])),
            Op::Mean(a) => {
                let n = self.nodes[a.0].value.len() as f64;
                add(grads, *a, &mut |ga| ga.iter_mut().for_each(|v| *v += g[0] / n));
            }
            Op::Dropout { input, mask } => {
                add(grads, *input, &mut |ga| {
                    for i in 0..ga.len() {
                        ga[i] += g[i] * mask[i];
                    }
                });
            }
            Op::CrossEntropy { logits, targets, probs, count } => {
                if *count > 0 {
                    let scale = g[0] / *count as f64;
                    ce_backward(self, *logits, targets, probs, scale, grads, &add);
                }
            }
            Op::CrossEntropySum { logits, targets, probs } => {
                ce_backward(self, *logits, targets, probs, g[0], grads, &add);
            }
            Op::BinaryCrossEntropy { probs, targets } => {
                let p = &self.nodes[probs.0].value;
                let n = p.len() as f64;
                add(grads, *probs, &mut |gp| {
                    for i in 0..p.len() {
                        if p[i] <= BCE_CLAMP || p[i] >= 1.0 - BCE_CLAMP {
                            continue;
                        }
                        let t = targets[i];
                        gp[i] += g[0] * (-(t / p[i]) + (1.0 - t) / (1.0 - p[i])) / n;
                    }
                });
            }
        }
    }
}

fn ce_backward(
    graph: &Graph,
    logits: Var,
    targets: &[Option<usize>],
    probs: &[f64],
    scale: f64,
    grads: &mut [Vec<f64>],
    add: &dyn Fn(&mut [Vec<f64>], Var, &mut dyn FnMut(&mut [f64])),
) {
    let k = graph.dims(logits).1;
    add(grads, logits, &mut |gl| {
        for (i, t) in targets.iter().enumerate() {
            if let Some(t) = *t {
                for j in 0..k {
                    gl[i * k + j] += scale * probs[i * k + j];
                }
                gl[i * k + t] -= scale;
            }
        }
    });
}

fn axpy(dst: &mut [f64], src: &[f64], alpha: f64) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += alpha * s;
    }
}

/// `out += a · b` for row-major `[m, k] · [k, n]`.
pub fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let a_ip = a[i * k + p];
            if a_ip == 0.0 {
                continue;
            }
            for (o, bv) in row.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += a_ip * bv;
            }
        }
    }
}

/// Calls `f` with the flat indices of every 1-D slice along `axis`.
fn for_each_slice(
    shape: &[usize],
    axis: usize,
    mut f: impl FnMut(core::iter::StepBy<core::ops::Range<usize>>),
) {
    let outer: usize = shape[..axis].iter().product();
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    for o in 0..outer {
        for i in 0..inner {
            let start = o * len * inner + i;
            f((start..start + len * inner).step_by(inner));
        }
    }
}
