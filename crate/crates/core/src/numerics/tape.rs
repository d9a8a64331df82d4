//! Reverse-mode tape over dense arrays.
//!
//! Every operation appends a node holding its forward value; `backward`
//! walks the nodes in reverse and accumulates gradients into the inputs that
//! require them. Parameters enter through [`Tape::param`], which binds each
//! [`ParamId`] to a single leaf so that gradients can be read back per
//! parameter.

use std::collections::HashMap;
use std::rc::Rc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Array, NumericsError, ParamId, ParamStore};
use crate::geometry::OrientedRect;

type Result<T> = std::result::Result<T, NumericsError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Boolean attention mask, row-major `nq x nk`; `true` means the key is visible.
#[derive(Clone, Debug, PartialEq)]
pub struct AttnMask {
    pub rows: usize,
    pub cols: usize,
    allowed: Rc<[bool]>,
}

impl AttnMask {
    pub fn new(rows: usize, cols: usize, allowed: Vec<bool>) -> Result<Self> {
        if allowed.len() != rows * cols {
            return Err(NumericsError::Dimension(format!(
                "mask {rows}x{cols} needs {} entries, got {}",
                rows * cols,
                allowed.len()
            )));
        }
        Ok(Self {
            rows,
            cols,
            allowed: allowed.into(),
        })
    }

    pub fn causal(n: usize) -> Self {
        let allowed = (0..n).flat_map(|i| (0..n).map(move |j| j <= i)).collect();
        Self::new(n, n, allowed).expect("square mask")
    }

    pub fn allowed(&self, r: usize, c: usize) -> bool {
        self.allowed[r * self.cols + c]
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<f64>,
    },
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    Gather(Var, Vec<usize>),
    ReplaceRows {
        x: Var,
        row: Var,
        which: Vec<bool>,
    },
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    MeanRows(Var),
    Maximum(Var, Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    L2Loss(Var, Var),
    Kl(Var, Var),
    Clearance {
        points: Var,
        grads: Vec<f64>,
    },
}

#[derive(Clone, Debug)]
struct Node {
    value: Array,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of operations.
#[derive(Debug)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
    grad_enabled: bool,
    rng: ChaCha8Rng,
}

/// Gradients of a scalar with respect to leaves and bound parameters.
#[derive(Debug)]
pub struct Gradients {
    leaves: HashMap<usize, Array>,
    params: Vec<(ParamId, Array)>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Array> {
        self.leaves.get(&v.0)
    }

    /// Gradients for every parameter bound on the tape, ordered by id.
    pub fn params(&self) -> &[(ParamId, Array)] {
        &self.params
    }

    pub fn into_params(self) -> Vec<(ParamId, Array)> {
        self.params
    }

    pub fn param(&self, id: ParamId) -> Option<&Array> {
        self.params.iter().find(|(p, _)| *p == id).map(|(_, g)| g)
    }
}

/// `c = a(m x k) * b(k x n) + beta * c` over strided operands.
#[allow(clippy::too_many_arguments)]
fn gemm_strided(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: isize,
    csa: isize,
    b: &[f64],
    rsb: isize,
    csb: isize,
    c: &mut [f64],
    rsc: isize,
    csc: isize,
    beta: f64,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if beta == 0.0 {
            for i in 0..m {
                for j in 0..n {
                    c[i * rsc as usize + j * csc as usize] = 0.0;
                }
            }
        }
        return;
    }
    // SAFETY: every (i, j) / (i, l) / (l, j) index reached through the given
    // strides lies inside the corresponding slice; callers derive strides
    // from the shapes of those same slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            rsc,
            csc,
        );
    }
}

/// Dense gemm with optional transposes of the row-major operands.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    ta: bool,
    b: &[f64],
    tb: bool,
    c: &mut [f64],
    beta: f64,
) {
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    gemm_strided(m, k, n, a, rsa, csa, b, rsb, csb, c, n as isize, 1, beta);
}

fn as_matrix(a: &Array) -> (usize, usize) {
    (a.rows(), a.cols())
}

impl Tape {
    pub fn new(seed: u64) -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
            grad_enabled: true,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// A tape on which parameters and leaves never require gradients.
    pub fn inference() -> Self {
        Self {
            grad_enabled: false,
            ..Self::new(0)
        }
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Array {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Array, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn leaf(&mut self, value: Array) -> Var {
        let rg = self.grad_enabled;
        self.push(value, Op::Leaf, rg)
    }

    pub fn constant(&mut self, value: Array) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Copies a value into a fresh constant, blocking gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.leaf(store.get(id).clone());
        self.params.insert(id, v);
        v
    }

    fn check_same(&self, a: Var, b: Var, what: &str) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(NumericsError::Dimension(format!("{what}: {sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = as_matrix(self.value(a));
        let (k2, n) = as_matrix(self.value(b));
        if k != k2 || self.value(b).shape().len() != 2 {
            return Err(NumericsError::Dimension(format!(
                "matmul {:?} x {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), false, &mut out, 0.0);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Array::from_parts(vec![m, n], out), Op::MatMul(a, b), rg))
    }

    /// `a * b^T`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = as_matrix(self.value(a));
        let (n, k2) = as_matrix(self.value(b));
        if k != k2 {
            return Err(NumericsError::Dimension(format!(
                "matmul_bt {:?} x {:?}^T",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), true, &mut out, 0.0);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Array::from_parts(vec![m, n], out), Op::MatMulBt(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = as_matrix(self.value(a));
        let src = self.value(a).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        let rg = self.rg(&[a]);
        Ok(self.push(Array::from_parts(vec![n, m], out), Op::Transpose(a), rg))
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        self.check_same(a, b, "elementwise")?;
        let out: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.value(a).shape().to_vec();
        let rg = self.rg(&[a, b]);
        Ok(self.push(Array::from_parts(shape, out), op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Maximum(a, b), f64::max)
    }

    /// Adds a bias of length `cols` to every row.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (m, n) = as_matrix(self.value(x));
        if self.value(bias).len() != n {
            return Err(NumericsError::Dimension(format!(
                "bias of length {} for rows of {n}",
                self.value(bias).len()
            )));
        }
        let b = self.value(bias).data();
        let mut out = self.value(x).data().to_vec();
        for r in 0..m {
            for (o, bv) in out[r * n..(r + 1) * n].iter_mut().zip(b) {
                *o += bv;
            }
        }
        let shape = self.value(x).shape().to_vec();
        let rg = self.rg(&[x, bias]);
        Ok(self.push(Array::from_parts(shape, out), Op::AddRow(x, bias), rg))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        if !s.is_finite() {
            return Err(NumericsError::NonFinite(0));
        }
        let out = self.value(x).data().iter().map(|v| v * s).collect();
        let shape = self.value(x).shape().to_vec();
        let rg = self.rg(&[x]);
        Ok(self.push(Array::from_parts(shape, out), Op::Scale(x, s), rg))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).data().iter().map(|v| v.max(0.0)).collect();
        let shape = self.value(x).shape().to_vec();
        let rg = self.rg(&[x]);
        Ok(self.push(Array::from_parts(shape, out), Op::Relu(x), rg))
    }

    /// Softmax along the last axis with max subtraction.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let (m, n) = as_matrix(self.value(x));
        if n == 0 {
            return Err(NumericsError::Dimension("softmax over empty axis".into()));
        }
        let src = self.value(x).data();
        let mut out = vec![0.0; m * n];
        for r in 0..m {
            softmax_row(&src[r * n..(r + 1) * n], &mut out[r * n..(r + 1) * n], None);
        }
        let shape = self.value(x).shape().to_vec();
        let rg = self.rg(&[x]);
        Ok(self.push(Array::from_parts(shape, out), Op::Softmax(x), rg))
    }

    /// Softmax along `axis` of a 2-D array.
    pub fn softmax_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        match axis {
            1 => self.softmax(x),
            0 => {
                let t = self.transpose(x)?;
                let s = self.softmax(t)?;
                self.transpose(s)
            }
            _ => Err(NumericsError::Dimension(format!("softmax axis {axis} on a matrix"))),
        }
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        const EPS: f64 = 1e-5;
        let (m, n) = as_matrix(self.value(x));
        if n < 2 {
            return Err(NumericsError::Dimension("layer_norm needs at least 2 features".into()));
        }
        if self.value(gain).len() != n || self.value(bias).len() != n {
            return Err(NumericsError::Dimension("layer_norm affine width".into()));
        }
        let src = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut xhat = vec![0.0; m * n];
        let mut inv_std = vec![0.0; m];
        let mut out = vec![0.0; m * n];
        for r in 0..m {
            let row = &src[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + EPS).sqrt();
            inv_std[r] = is;
            for j in 0..n {
                let h = (row[j] - mean) * is;
                xhat[r * n + j] = h;
                out[r * n + j] = h * g[j] + b[j];
            }
        }
        let shape = self.value(x).shape().to_vec();
        let rg = self.rg(&[x, gain, bias]);
        Ok(self.push(
            Array::from_parts(shape, out),
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// Multi-head scaled dot-product attention on already-projected
    /// `q (nq x d)`, `k (nk x d)`, `v (nk x d)`. Rows whose keys are all
    /// masked (or that have no keys at all) produce zeros.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        mask: Option<&AttnMask>,
    ) -> Result<Var> {
        let (nq, d) = as_matrix(self.value(q));
        let (nk, dk) = as_matrix(self.value(k));
        let (nv, dv) = as_matrix(self.value(v));
        if dk != d || dv != d || nv != nk {
            return Err(NumericsError::Dimension(format!(
                "attention q {:?} k {:?} v {:?}",
                self.value(q).shape(),
                self.value(k).shape(),
                self.value(v).shape()
            )));
        }
        if heads == 0 || d % heads != 0 {
            return Err(NumericsError::Dimension(format!("{heads} heads over width {d}")));
        }
        if let Some(m) = mask {
            if m.rows != nq || m.cols != nk {
                return Err(NumericsError::Dimension(format!(
                    "mask {}x{} for scores {nq}x{nk}",
                    m.rows, m.cols
                )));
            }
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut probs = vec![0.0; heads * nq * nk];
        let mut out = vec![0.0; nq * d];
        if nk > 0 {
            let qd = self.value(q).data();
            let kd = self.value(k).data();
            let vd = self.value(v).data();
            let mut scores = vec![0.0; nq * nk];
            for h in 0..heads {
                let off = h * dh;
                gemm_strided(
                    nq,
                    dh,
                    nk,
                    &qd[off..],
                    d as isize,
                    1,
                    &kd[off..],
                    1,
                    d as isize,
                    &mut scores,
                    nk as isize,
                    1,
                    0.0,
                );
                let p = &mut probs[h * nq * nk..(h + 1) * nq * nk];
                for r in 0..nq {
                    let row = &mut scores[r * nk..(r + 1) * nk];
                    row.iter_mut().for_each(|s| *s *= scale);
                    let allowed = mask.map(|m| &m.allowed[r * nk..(r + 1) * nk]);
                    softmax_row(row, &mut p[r * nk..(r + 1) * nk], allowed);
                }
                gemm_strided(
                    nq,
                    nk,
                    dh,
                    p,
                    nk as isize,
                    1,
                    &vd[off..],
                    d as isize,
                    1,
                    &mut out[off..],
                    d as isize,
                    1,
                    0.0,
                );
            }
        }
        let rg = self.rg(&[q, k, v]);
        Ok(self.push(
            Array::from_parts(vec![nq, d], out),
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            },
            rg,
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = match parts.first() {
            Some(&p) => self.value(p).cols(),
            None => return Err(NumericsError::Dimension("concat of nothing".into())),
        };
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let a = self.value(p);
            if a.cols() != cols {
                return Err(NumericsError::Dimension(format!(
                    "concat_rows widths {} vs {cols}",
                    a.cols()
                )));
            }
            rows += a.rows();
            out.extend_from_slice(a.data());
        }
        let rg = self.rg(parts);
        Ok(self.push(Array::from_parts(vec![rows, cols], out), Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (m, n) = as_matrix(self.value(x));
        if start > end || end > m {
            return Err(NumericsError::Index { index: end, bound: m });
        }
        let out = self.value(x).data()[start * n..end * n].to_vec();
        let rg = self.rg(&[x]);
        Ok(self.push(Array::from_parts(vec![end - start, n], out), Op::SliceRows(x, start), rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = match parts.first() {
            Some(&p) => self.value(p).rows(),
            None => return Err(NumericsError::Dimension("concat of nothing".into())),
        };
        if parts.iter().any(|&p| self.value(p).rows() != rows) {
            return Err(NumericsError::Dimension("concat_cols row mismatch".into()));
        }
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = vec![0.0; rows * total];
        let mut off = 0;
        for &p in parts {
            let a = self.value(p);
            let c = a.cols();
            for r in 0..rows {
                out[r * total + off..r * total + off + c].copy_from_slice(a.row(r));
            }
            off += c;
        }
        let rg = self.rg(parts);
        Ok(self.push(Array::from_parts(vec![rows, total], out), Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (m, n) = as_matrix(self.value(x));
        if start > end || end > n {
            return Err(NumericsError::Index { index: end, bound: n });
        }
        let w = end - start;
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(m * w);
        for r in 0..m {
            out.extend_from_slice(&src[r * n + start..r * n + end]);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Array::from_parts(vec![m, w], out), Op::SliceCols(x, start), rg))
    }

    /// Row gather; indices may repeat.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (m, n) = as_matrix(self.value(x));
        let mut out = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            if i >= m {
                return Err(NumericsError::Index { index: i, bound: m });
            }
            out.extend_from_slice(self.value(x).row(i));
        }
        let rg = self.rg(&[x]);
        Ok(self.push(
            Array::from_parts(vec![idx.len(), n], out),
            Op::Gather(x, idx.to_vec()),
            rg,
        ))
    }

    /// Replaces the rows flagged in `which` by the single row `row`.
    pub fn replace_rows(&mut self, x: Var, row: Var, which: &[bool]) -> Result<Var> {
        let (m, n) = as_matrix(self.value(x));
        if which.len() != m || self.value(row).len() != n {
            return Err(NumericsError::Dimension("replace_rows shape".into()));
        }
        let mut out = self.value(x).data().to_vec();
        let rv = self.value(row).data();
        for (r, &w) in which.iter().enumerate() {
            if w {
                out[r * n..(r + 1) * n].copy_from_slice(rv);
            }
        }
        let shape = self.value(x).shape().to_vec();
        let rg = self.rg(&[x, row]);
        Ok(self.push(
            Array::from_parts(shape, out),
            Op::ReplaceRows {
                x,
                row,
                which: which.to_vec(),
            },
            rg,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshaped(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(&[x]);
        Ok(self.push(Array::from_parts(vec![], vec![s]), Op::Sum(x), rg))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len();
        if n == 0 {
            return Err(NumericsError::Dimension("mean of empty array".into()));
        }
        let s = self.value(x).data().iter().sum::<f64>() / n as f64;
        let rg = self.rg(&[x]);
        Ok(self.push(Array::from_parts(vec![], vec![s]), Op::Mean(x), rg))
    }

    /// Column-wise mean over rows: `m x n -> 1 x n`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let (m, n) = as_matrix(self.value(x));
        if m == 0 {
            return Err(NumericsError::Dimension("mean over zero rows".into()));
        }
        let mut out = vec![0.0; n];
        for r in 0..m {
            for (o, v) in out.iter_mut().zip(self.value(x).row(r)) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|o| *o /= m as f64);
        let rg = self.rg(&[x]);
        Ok(self.push(Array::from_parts(vec![1, n], out), Op::MeanRows(x), rg))
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (m, n) = as_matrix(self.value(logits));
        if targets.len() != m {
            return Err(NumericsError::Dimension(format!(
                "{} targets for {m} rows",
                targets.len()
            )));
        }
        if m == 0 {
            return Err(NumericsError::Contract("cross_entropy over zero rows".into()));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= n) {
            return Err(NumericsError::Index { index: t, bound: n });
        }
        let src = self.value(logits).data();
        let mut probs = vec![0.0; m * n];
        let mut loss = 0.0;
        for r in 0..m {
            let row = &src[r * n..(r + 1) * n];
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln() + mx;
            loss += lse - row[targets[r]];
            for j in 0..n {
                probs[r * n + j] = (row[j] - lse).exp();
            }
        }
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Array::from_parts(vec![], vec![loss / m as f64]),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Element-mean squared difference.
    pub fn l2_loss(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same(a, b, "l2_loss")?;
        let n = self.value(a).len();
        if n == 0 {
            return Err(NumericsError::Dimension("l2_loss of empty arrays".into()));
        }
        let s = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| (x - y).powi(2))
            .sum::<f64>()
            / n as f64;
        let rg = self.rg(&[a, b]);
        Ok(self.push(Array::from_parts(vec![], vec![s]), Op::L2Loss(a, b), rg))
    }

    /// Row-mean of `sum p ln(p / q)` with both arguments clamped at 1e-9
    /// inside the logarithm. Rows must be probability vectors.
    pub fn kl_divergence(&mut self, p: Var, q: Var) -> Result<Var> {
        self.check_same(p, q, "kl_divergence")?;
        let (m, n) = as_matrix(self.value(p));
        if m == 0 || n == 0 {
            return Err(NumericsError::Dimension("kl_divergence of empty arrays".into()));
        }
        for v in [p, q] {
            check_simplex_rows(self.value(v))?;
        }
        let (pd, qd) = (self.value(p).data(), self.value(q).data());
        let total: f64 = pd
            .iter()
            .zip(qd)
            .map(|(&a, &b)| a * (a.max(KL_EPS) / b.max(KL_EPS)).ln())
            .sum();
        let rg = self.rg(&[p, q]);
        Ok(self.push(Array::from_parts(vec![], vec![total / m as f64]), Op::Kl(p, q), rg))
    }

    /// `sum_t sum_r max(0, margin - sd(points[t], obstacles[t][r]))` where
    /// `sd` is the signed distance to an oriented rectangle.
    pub fn clearance_penalty(
        &mut self,
        points: Var,
        obstacles: &[Vec<OrientedRect>],
        margin: f64,
    ) -> Result<Var> {
        let (m, n) = as_matrix(self.value(points));
        if n != 2 || m != obstacles.len() {
            return Err(NumericsError::Dimension(format!(
                "clearance over {m}x{n} points and {} obstacle steps",
                obstacles.len()
            )));
        }
        let mut total = 0.0;
        let mut grads = vec![0.0; m * 2];
        for (t, step) in obstacles.iter().enumerate() {
            let p = [self.value(points).get(t, 0), self.value(points).get(t, 1)];
            for rect in step {
                let (d, g) = rect.signed_distance(p);
                if d < margin {
                    total += margin - d;
                    grads[2 * t] -= g[0];
                    grads[2 * t + 1] -= g[1];
                }
            }
        }
        let rg = self.rg(&[points]);
        Ok(self.push(
            Array::from_parts(vec![], vec![total]),
            Op::Clearance { points, grads },
            rg,
        ))
    }

    /// Reverse sweep from a scalar.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(NumericsError::Contract(format!(
                "backward from non-scalar of shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
        }
        let mut leaves = HashMap::new();
        for (i, g) in grads.into_iter().enumerate() {
            if let Some(g) = g {
                if matches!(self.nodes[i].op, Op::Leaf) {
                    let shape = self.nodes[i].value.shape().to_vec();
                    leaves.insert(i, Array::from_parts(shape, g));
                }
            }
        }
        let mut params: Vec<(ParamId, Array)> = self
            .params
            .iter()
            .map(|(&id, &v)| {
                let g = leaves
                    .get(&v.0)
                    .cloned()
                    .unwrap_or_else(|| Array::zeros(self.value(v).shape()));
                (id, g)
            })
            .collect();
        params.sort_by_key(|(id, _)| *id);
        Ok(Gradients { leaves, params })
    }

    fn backprop_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let want = |v: Var| nodes[v.0].requires_grad;
        let val = |v: Var| &nodes[v.0].value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = as_matrix(val(*a));
                let n = val(*b).cols();
                if want(*a) {
                    let ga = slot(grads, *a, m * k);
                    gemm(m, n, k, g, false, val(*b).data(), true, ga, 1.0);
                }
                if want(*b) {
                    let gb = slot(grads, *b, k * n);
                    gemm(k, m, n, val(*a).data(), true, g, false, gb, 1.0);
                }
            }
            Op::MatMulBt(a, b) => {
                let (m, k) = as_matrix(val(*a));
                let n = val(*b).rows();
                if want(*a) {
                    let ga = slot(grads, *a, m * k);
                    gemm(m, n, k, g, false, val(*b).data(), false, ga, 1.0);
                }
                if want(*b) {
                    let gb = slot(grads, *b, n * k);
                    gemm(n, m, k, g, true, val(*a).data(), false, gb, 1.0);
                }
            }
            Op::Transpose(a) => {
                let (m, n) = as_matrix(val(*a));
                let ga = slot(grads, *a, m * n);
                for i in 0..m {
                    for j in 0..n {
                        ga[i * n + j] += g[j * m + i];
                    }
                }
            }
            Op::Add(a, b) => {
                for (v, s) in [(*a, 1.0), (*b, 1.0)] {
                    if want(v) {
                        axpy(slot(grads, v, g.len()), g, s);
                    }
                }
            }
            Op::Sub(a, b) => {
                for (v, s) in [(*a, 1.0), (*b, -1.0)] {
                    if want(v) {
                        axpy(slot(grads, v, g.len()), g, s);
                    }
                }
            }
            Op::Mul(a, b) => {
                if want(*a) {
                    let bd = val(*b).data();
                    let ga = slot(grads, *a, g.len());
                    for ((o, gi), bi) in ga.iter_mut().zip(g).zip(bd) {
                        *o += gi * bi;
                    }
                }
                if want(*b) {
                    let ad = val(*a).data();
                    let gb = slot(grads, *b, g.len());
                    for ((o, gi), ai) in gb.iter_mut().zip(g).zip(ad) {
                        *o += gi * ai;
                    }
                }
            }
            Op::Maximum(a, b) => {
                let (ad, bd) = (val(*a).data(), val(*b).data());
                if want(*a) {
                    let ga = slot(grads, *a, g.len());
                    for i in 0..g.len() {
                        if ad[i] >= bd[i] {
                            ga[i] += g[i];
                        }
                    }
                }
                if want(*b) {
                    let gb = slot(grads, *b, g.len());
                    for i in 0..g.len() {
                        if ad[i] < bd[i] {
                            gb[i] += g[i];
                        }
                    }
                }
            }
            Op::AddRow(x, bias) => {
                if want(*x) {
                    axpy(slot(grads, *x, g.len()), g, 1.0);
                }
                if want(*bias) {
                    let n = val(*bias).len();
                    let gb = slot(grads, *bias, n);
                    for row in g.chunks(n) {
                        axpy(gb, row, 1.0);
                    }
                }
            }
            Op::Scale(x, s) => axpy(slot(grads, *x, g.len()), g, *s),
            Op::Relu(x) => {
                let xd = val(*x).data();
                let gx = slot(grads, *x, g.len());
                for i in 0..g.len() {
                    if xd[i] > 0.0 {
                        gx[i] += g[i];
                    }
                }
            }
            Op::Softmax(x) => {
                let n = node.value.cols();
                let y = node.value.data();
                let gx = slot(grads, *x, g.len());
                for r in 0..node.value.rows() {
                    softmax_backward(&y[r * n..(r + 1) * n], &g[r * n..(r + 1) * n], &mut gx[r * n..(r + 1) * n]);
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let n = val(*x).cols();
                let m = val(*x).rows();
                let gd = val(*gain).data();
                if want(*gain) {
                    let gg = slot(grads, *gain, n);
                    for i in 0..m * n {
                        gg[i % n] += g[i] * xhat[i];
                    }
                }
                if want(*bias) {
                    let gb = slot(grads, *bias, n);
                    for row in g.chunks(n) {
                        axpy(gb, row, 1.0);
                    }
                }
                if want(*x) {
                    let gx = slot(grads, *x, m * n);
                    let nf = n as f64;
                    for r in 0..m {
                        let xh = &xhat[r * n..(r + 1) * n];
                        let gr = &g[r * n..(r + 1) * n];
                        let mut s1 = 0.0;
                        let mut s2 = 0.0;
                        for j in 0..n {
                            let dxh = gr[j] * gd[j];
                            s1 += dxh;
                            s2 += dxh * xh[j];
                        }
                        for j in 0..n {
                            let dxh = gr[j] * gd[j];
                            gx[r * n + j] += inv_std[r] / nf * (nf * dxh - s1 - xh[j] * s2);
                        }
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            } => self.attention_backward(*q, *k, *v, *heads, probs, g, grads),
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = val(p).len();
                    if want(p) {
                        axpy(slot(grads, p, len), &g[off..off + len], 1.0);
                    }
                    off += len;
                }
            }
            Op::SliceRows(x, start) => {
                let n = val(*x).cols();
                let len = val(*x).len();
                let gx = slot(grads, *x, len);
                axpy(&mut gx[start * n..start * n + g.len()], g, 1.0);
            }
            Op::ConcatCols(parts) => {
                let total = node.value.cols();
                let rows = node.value.rows();
                let mut off = 0;
                for &p in parts {
                    let c = val(p).cols();
                    if want(p) {
                        let gp = slot(grads, p, rows * c);
                        for r in 0..rows {
                            axpy(&mut gp[r * c..(r + 1) * c], &g[r * total + off..r * total + off + c], 1.0);
                        }
                    }
                    off += c;
                }
            }
            Op::SliceCols(x, start) => {
                let n = val(*x).cols();
                let w = node.value.cols();
                let len = val(*x).len();
                let gx = slot(grads, *x, len);
                for r in 0..node.value.rows() {
                    axpy(&mut gx[r * n + start..r * n + start + w], &g[r * w..(r + 1) * w], 1.0);
                }
            }
            Op::Gather(x, idx) => {
                let n = val(*x).cols();
                let len = val(*x).len();
                let gx = slot(grads, *x, len);
                for (r, &i) in idx.iter().enumerate() {
                    axpy(&mut gx[i * n..(i + 1) * n], &g[r * n..(r + 1) * n], 1.0);
                }
            }
            Op::ReplaceRows { x, row, which } => {
                let n = val(*x).cols();
                if want(*x) {
                    let gx = slot(grads, *x, g.len());
                    for (r, &w) in which.iter().enumerate() {
                        if !w {
                            axpy(&mut gx[r * n..(r + 1) * n], &g[r * n..(r + 1) * n], 1.0);
                        }
                    }
                }
                if want(*row) {
                    let gr = slot(grads, *row, n);
                    for (r, &w) in which.iter().enumerate() {
                        if w {
                            axpy(gr, &g[r * n..(r + 1) * n], 1.0);
                        }
                    }
                }
            }
            Op::Reshape(x) => axpy(slot(grads, *x, g.len()), g, 1.0),
            Op::Sum(x) => {
                let len = val(*x).len();
                slot(grads, *x, len).iter_mut().for_each(|o| *o += g[0]);
            }
            Op::Mean(x) => {
                let len = val(*x).len();
                let s = g[0] / len as f64;
                slot(grads, *x, len).iter_mut().for_each(|o| *o += s);
            }
            Op::MeanRows(x) => {
                let (m, n) = as_matrix(val(*x));
                let gx = slot(grads, *x, m * n);
                for r in 0..m {
                    axpy(&mut gx[r * n..(r + 1) * n], g, 1.0 / m as f64);
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let (m, n) = as_matrix(val(*logits));
                let s = g[0] / m as f64;
                let gl = slot(grads, *logits, m * n);
                for r in 0..m {
                    for j in 0..n {
                        let onehot = if j == targets[r] { 1.0 } else { 0.0 };
                        gl[r * n + j] += s * (probs[r * n + j] - onehot);
                    }
                }
            }
            Op::L2Loss(a, b) => {
                let (ad, bd) = (val(*a).data(), val(*b).data());
                let s = 2.0 * g[0] / ad.len() as f64;
                if want(*a) {
                    let ga = slot(grads, *a, ad.len());
                    for i in 0..ad.len() {
                        ga[i] += s * (ad[i] - bd[i]);
                    }
                }
                if want(*b) {
                    let gb = slot(grads, *b, ad.len());
                    for i in 0..ad.len() {
                        gb[i] -= s * (ad[i] - bd[i]);
                    }
                }
            }
            Op::Kl(p, q) => {
                let (pd, qd) = (val(*p).data(), val(*q).data());
                let s = g[0] / val(*p).rows() as f64;
                if want(*p) {
                    let gp = slot(grads, *p, pd.len());
                    for i in 0..pd.len() {
                        let lr = (pd[i].max(KL_EPS) / qd[i].max(KL_EPS)).ln();
                        let d = if pd[i] > KL_EPS { lr + 1.0 } else { lr };
                        gp[i] += s * d;
                    }
                }
                if want(*q) {
                    let gq = slot(grads, *q, qd.len());
                    for i in 0..qd.len() {
                        if qd[i] > KL_EPS {
                            gq[i] -= s * pd[i] / qd[i];
                        }
                    }
                }
            }
            Op::Clearance { points, grads: pg } => {
                axpy(slot(grads, *points, pg.len()), pg, g[0]);
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: &[f64],
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let (nq, d) = as_matrix(self.value(q));
        let nk = self.value(k).rows();
        if nk == 0 || nq == 0 {
            return;
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut gq = vec![0.0; nq * d];
        let mut gk = vec![0.0; nk * d];
        let mut gv = vec![0.0; nk * d];
        let mut dp = vec![0.0; nq * nk];
        for h in 0..heads {
            let off = h * dh;
            let p = &probs[h * nq * nk..(h + 1) * nq * nk];
            // dV_h = P^T dOut_h
            gemm_strided(
                nk, nq, dh, p, 1, nk as isize, &g[off..], d as isize, 1, &mut gv[off..], d as isize, 1, 1.0,
            );
            // dP = dOut_h V_h^T
            gemm_strided(
                nq, dh, nk, &g[off..], d as isize, 1, &vd[off..], 1, d as isize, &mut dp, nk as isize, 1, 0.0,
            );
            // dS = P * (dP - rowsum(dP * P)), folded with the score scale.
            for r in 0..nq {
                let pr = &p[r * nk..(r + 1) * nk];
                let dr = &mut dp[r * nk..(r + 1) * nk];
                let dot: f64 = pr.iter().zip(dr.iter()).map(|(a, b)| a * b).sum();
                for j in 0..nk {
                    dr[j] = pr[j] * (dr[j] - dot) * scale;
                }
            }
            // dQ_h = dS K_h ; dK_h = dS^T Q_h
            gemm_strided(
                nq, nk, dh, &dp, nk as isize, 1, &kd[off..], d as isize, 1, &mut gq[off..], d as isize, 1, 1.0,
            );
            gemm_strided(
                nk, nq, dh, &dp, 1, nk as isize, &qd[off..], d as isize, 1, &mut gk[off..], d as isize, 1, 1.0,
            );
        }
        for (var, buf) in [(q, gq), (k, gk), (v, gv)] {
            if self.nodes[var.0].requires_grad {
                axpy(slot(grads, var, buf.len()), &buf, 1.0);
            }
        }
    }
}

const KL_EPS: f64 = 1e-9;

fn check_simplex_rows(a: &Array) -> Result<()> {
    for r in 0..a.rows() {
        let row = a.row(r);
        if row.iter().any(|&v| v < 0.0) {
            return Err(NumericsError::Domain(format!("row {r} has a negative probability")));
        }
        let s: f64 = row.iter().sum();
        if (s - 1.0).abs() > 1e-6 {
            return Err(NumericsError::Domain(format!("row {r} sums to {s}")));
        }
    }
    Ok(())
}

fn slot(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut [f64] {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn axpy(dst: &mut [f64], src: &[f64], s: f64) {
    for (d, x) in dst.iter_mut().zip(src) {
        *d += s * x;
    }
}

fn softmax_row(x: &[f64], out: &mut [f64], allowed: Option<&[bool]>) {
    let ok = |j: usize| allowed.is_none_or(|a| a[j]);
    let mx = (0..x.len())
        .filter(|&j| ok(j))
        .map(|j| x[j])
        .fold(f64::NEG_INFINITY, f64::max);
    if mx == f64::NEG_INFINITY {
        out.iter_mut().for_each(|o| *o = 0.0);
        return;
    }
    let mut s = 0.0;
    for j in 0..x.len() {
        out[j] = if ok(j) { (x[j] - mx).exp() } else { 0.0 };
        s += out[j];
    }
    out.iter_mut().for_each(|o| *o /= s);
}

fn softmax_backward(y: &[f64], g: &[f64], gx: &mut [f64]) {
    let dot: f64 = y.iter().zip(g).map(|(a, b)| a * b).sum();
    for j in 0..y.len() {
        gx[j] += y[j] * (g[j] - dot);
    }
}
