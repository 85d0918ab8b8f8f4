//! Dynamic reverse-mode differentiation.
//!
//! A [`Tape`] is rebuilt for every forward pass. Each primitive pushes one
//! node holding its output value, so node indices are already a
//! topological order and [`Tape::backward`] simply walks them in reverse.
//! Parameters enter the tape by reference from a [`ParamStore`]; the
//! gradients that come out of `backward` are returned as an owned
//! [`Gradients`] value which the caller folds into the store once the
//! tape (and its borrow of the store) is gone.

use alloc::borrow::Cow;
use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::{gemm_nn, gemm_nt, gemm_tn, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Parameter<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    /// Biases and normalization gains skip weight decay.
    pub decay_exempt: bool,
}

/// Named trainable tensors. Names are unique and define checkpoint identity.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<T> {
    params: Vec<Parameter<T>>,
    by_name: BTreeMap<String, ParamId>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            by_name: BTreeMap::new(),
        }
    }

    pub fn register(
        &mut self,
        name: impl Into<String>,
        value: Tensor<T>,
        decay_exempt: bool,
    ) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::contract(format!("duplicate parameter name `{name}`")));
        }
        let id = ParamId(self.params.len());
        let grad = Tensor::zeros(value.shape());
        self.by_name.insert(name.clone(), id);
        self.params.push(Parameter {
            name,
            value,
            grad,
            decay_exempt,
        });
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn by_name(&self, name: &str) -> Option<&Parameter<T>> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<T>> {
        self.params.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.iter().map(|p| p.name.as_str())
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.fill(T::ZERO);
        }
    }

    /// Adds a backward result into the stored gradients.
    pub fn accumulate(&mut self, grads: &Gradients<T>) -> Result<()> {
        for (id, g) in &grads.entries {
            self.params[id.0].grad.add_assign(g)?;
        }
        Ok(())
    }

    /// Total number of scalar coordinates.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Parameter {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    grad: p.grad.cast(),
                    decay_exempt: p.decay_exempt,
                })
                .collect(),
            by_name: self.by_name.clone(),
        }
    }
}

/// Per-parameter gradients produced by one backward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T> {
    entries: BTreeMap<ParamId, Tensor<T>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient for `id`; `None` when the parameter was not on the tape.
    pub fn get(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.entries.get(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor<T>)> {
        self.entries.iter().map(|(k, v)| (*k, v))
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op<T> {
    Constant,
    Param(ParamId),
    MatMul { a: usize, b: usize, transpose_b: bool },
    Transpose(usize),
    Add(usize, usize),
    AddBias { a: usize, bias: usize },
    Mul(usize, usize),
    Scale(usize, T),
    ScaleRows { a: usize, factors: Vec<T> },
    Gelu(usize),
    LayerNorm { x: usize, gain: usize, bias: usize, xhat: Vec<T>, inv_std: Vec<T> },
    GatherRows { table: usize, ids: Vec<usize> },
    Conv1d { x: usize, w: usize, b: usize, seq_len: usize },
    ConcatCols(Vec<usize>),
    ConcatRows(Vec<usize>),
    SliceCols { a: usize, start: usize },
    SliceRows { a: usize, start: usize },
    Softmax { a: usize, axis: usize },
    MaskedSoftmaxRows { a: usize },
    GatherRel { a: usize, idx: Vec<usize> },
    CrossEntropy { logits: usize, targets: Vec<(usize, usize)> },
    BinaryCrossEntropy { logits: usize, labels: Vec<i8>, count: usize },
    StopGradient,
    Sum(usize),
    Mean(usize),
    Reshape(usize),
}

struct Node<'a, T: Real> {
    value: Cow<'a, Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
}

pub struct Tape<'a, T: Real> {
    nodes: Vec<Node<'a, T>>,
}

impl<T: Real> Default for Tape<'_, T> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::Shape {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

fn matrix<T: Real>(op: &'static str, t: &Tensor<T>) -> Result<(usize, usize)> {
    if t.rank() != 2 {
        return Err(shape_err(op, t.shape(), &[]));
    }
    Ok((t.shape()[0], t.shape()[1]))
}

const INV_SQRT_2: f64 = core::f64::consts::FRAC_1_SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

fn gelu<T: Real>(x: T) -> T {
    let half = T::from_f64(0.5);
    half * x * (T::ONE + (x * T::from_f64(INV_SQRT_2)).erf())
}

fn gelu_grad<T: Real>(x: T) -> T {
    let half = T::from_f64(0.5);
    let cdf = half * (T::ONE + (x * T::from_f64(INV_SQRT_2)).erf());
    let pdf = T::from_f64(INV_SQRT_2PI) * (-(half * x * x)).exp();
    cdf + x * pdf
}

impl<'a, T: Real> Tape<'a, T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[usize]) -> Var {
        let requires_grad = inputs.iter().any(|&i| self.nodes[i].requires_grad);
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn val(&self, i: usize) -> &Tensor<T> {
        &self.nodes[i].value
    }

    /// A value that receives no gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op: Op::Constant,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// A borrowed value that receives no gradient.
    pub fn constant_ref(&mut self, value: &'a Tensor<T>) -> Var {
        self.nodes.push(Node {
            value: Cow::Borrowed(value),
            op: Op::Constant,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// A trainable leaf referencing `store`'s tensor.
    pub fn param(&mut self, store: &'a ParamStore<T>, id: ParamId) -> Var {
        self.nodes.push(Node {
            value: Cow::Borrowed(&store.get(id).value),
            op: Op::Param(id),
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// `a[m×k] · b[k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = matrix("matmul", self.val(a.0))?;
        let (k2, n) = matrix("matmul", self.val(b.0))?;
        if k != k2 {
            return Err(shape_err("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![T::ZERO; m * n];
        gemm_nn(self.val(a.0).data(), self.val(b.0).data(), &mut out, m, k, n);
        let t = Tensor::new(&[m, n], out)?;
        Ok(self.push(
            t,
            Op::MatMul {
                a: a.0,
                b: b.0,
                transpose_b: false,
            },
            &[a.0, b.0],
        ))
    }

    /// `a[m×k] · b[n×k]ᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = matrix("matmul_nt", self.val(a.0))?;
        let (n, k2) = matrix("matmul_nt", self.val(b.0))?;
        if k != k2 {
            return Err(shape_err("matmul_nt", self.shape(a), self.shape(b)));
        }
        let mut out = vec![T::ZERO; m * n];
        gemm_nt(self.val(a.0).data(), self.val(b.0).data(), &mut out, m, k, n);
        let t = Tensor::new(&[m, n], out)?;
        Ok(self.push(
            t,
            Op::MatMul {
                a: a.0,
                b: b.0,
                transpose_b: true,
            },
            &[a.0, b.0],
        ))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = matrix("transpose", self.val(a.0))?;
        let src = self.val(a.0).data();
        let mut out = vec![T::ZERO; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        let t = Tensor::new(&[n, m], out)?;
        Ok(self.push(t, Op::Transpose(a.0), &[a.0]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err("add", self.shape(a), self.shape(b)));
        }
        let data = self
            .val(a.0)
            .data()
            .iter()
            .zip(self.val(b.0).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let t = Tensor::new(self.shape(a), data)?;
        Ok(self.push(t, Op::Add(a.0, b.0), &[a.0, b.0]))
    }

    /// Adds a `[n]` bias to every row of `a[..×n]`.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (_, n) = self.val(a.0).dims2();
        if self.val(bias.0).len() != n {
            return Err(shape_err("add_bias", self.shape(a), self.shape(bias)));
        }
        let b = self.val(bias.0).data();
        let data = self
            .val(a.0)
            .data()
            .chunks(n)
            .flat_map(|row| row.iter().zip(b).map(|(&x, &y)| x + y))
            .collect();
        let t = Tensor::new(self.shape(a), data)?;
        Ok(self.push(t, Op::AddBias { a: a.0, bias: bias.0 }, &[a.0, bias.0]))
    }

    /// Element-wise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err("mul", self.shape(a), self.shape(b)));
        }
        let data = self
            .val(a.0)
            .data()
            .iter()
            .zip(self.val(b.0).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let t = Tensor::new(self.shape(a), data)?;
        Ok(self.push(t, Op::Mul(a.0, b.0), &[a.0, b.0]))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let data = self.val(a.0).data().iter().map(|&x| x * c).collect();
        let t = Tensor::new(self.shape(a), data).expect("same shape");
        self.push(t, Op::Scale(a.0, c), &[a.0])
    }

    /// Multiplies row `r` of `a[m×n]` by `factors[r]`.
    pub fn scale_rows(&mut self, a: Var, factors: Vec<T>) -> Result<Var> {
        let (m, n) = self.val(a.0).dims2();
        if factors.len() != m {
            return Err(shape_err("scale_rows", self.shape(a), &[factors.len()]));
        }
        let data = self
            .val(a.0)
            .data()
            .chunks(n)
            .zip(&factors)
            .flat_map(|(row, &f)| row.iter().map(move |&x| x * f))
            .collect();
        let t = Tensor::new(self.shape(a), data)?;
        Ok(self.push(t, Op::ScaleRows { a: a.0, factors }, &[a.0]))
    }

    /// Exact (erf-based) GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let data = self.val(a.0).data().iter().map(|&x| gelu(x)).collect();
        let t = Tensor::new(self.shape(a), data).expect("same shape");
        self.push(t, Op::Gelu(a.0), &[a.0])
    }

    /// Normalizes each row of `x[..×n]` and applies `gain[n]`, `bias[n]`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (m, n) = self.val(x.0).dims2();
        if self.val(gain.0).len() != n || self.val(bias.0).len() != n {
            return Err(shape_err("layer_norm", self.shape(x), self.shape(gain)));
        }
        let src = self.val(x.0).data();
        let g = self.val(gain.0).data();
        let b = self.val(bias.0).data();
        let mut out = vec![T::ZERO; m * n];
        let mut xhat = vec![T::ZERO; m * n];
        let mut inv_std = vec![T::ZERO; m];
        let nf = n as f64;
        for r in 0..m {
            let row = &src[r * n..(r + 1) * n];
            let mean = row.iter().map(|v| v.to_f64()).sum::<f64>() / nf;
            let var = row
                .iter()
                .map(|v| {
                    let d = v.to_f64() - mean;
                    d * d
                })
                .sum::<f64>()
                / nf;
            let inv = 1.0 / libm::sqrt(var + eps);
            inv_std[r] = T::from_f64(inv);
            for c in 0..n {
                let xh = T::from_f64((row[c].to_f64() - mean) * inv);
                xhat[r * n + c] = xh;
                out[r * n + c] = xh * g[c] + b[c];
            }
        }
        let t = Tensor::new(self.shape(x), out)?;
        Ok(self.push(
            t,
            Op::LayerNorm {
                x: x.0,
                gain: gain.0,
                bias: bias.0,
                xhat,
                inv_std,
            },
            &[x.0, gain.0, bias.0],
        ))
    }

    /// Rows of `table[V×d]` selected by `ids`; backward scatter-adds.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = matrix("gather_rows", self.val(table.0))?;
        if ids.is_empty() {
            return Err(Error::contract("gather_rows with no ids"));
        }
        let src = self.val(table.0).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(Error::Index {
                    what: "embedding table",
                    index: id,
                    bound: v,
                });
            }
            out.extend_from_slice(&src[id * d..(id + 1) * d]);
        }
        let t = Tensor::new(&[ids.len(), d], out)?;
        Ok(self.push(
            t,
            Op::GatherRows {
                table: table.0,
                ids: ids.to_vec(),
            },
            &[table.0],
        ))
    }

    /// Same-padded 1-D convolution along rows. `x` is `[B·L × c_in]`, made
    /// of `B` independent sequences of `seq_len` rows; `w` is
    /// `[kernel × c_in × c_out]` with odd `kernel`; `b` is `[c_out]`.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var, seq_len: usize) -> Result<Var> {
        let (rows, cin) = matrix("conv1d", self.val(x.0))?;
        let ws = self.shape(w).to_vec();
        if ws.len() != 3 || ws[1] != cin || ws[0].is_multiple_of(2) {
            return Err(shape_err("conv1d", self.shape(x), &ws));
        }
        let (kernel, cout) = (ws[0], ws[2]);
        if self.val(b.0).len() != cout || seq_len == 0 || rows % seq_len != 0 {
            return Err(shape_err("conv1d", self.shape(x), self.shape(b)));
        }
        let half = kernel / 2;
        let xs = self.val(x.0).data();
        let wd = self.val(w.0).data();
        let bd = self.val(b.0).data();
        let mut out = vec![T::ZERO; rows * cout];
        for s in 0..rows / seq_len {
            for t in 0..seq_len {
                let orow = &mut out[(s * seq_len + t) * cout..(s * seq_len + t + 1) * cout];
                orow.copy_from_slice(bd);
                for o in 0..kernel {
                    let src = t as isize + o as isize - half as isize;
                    if src < 0 || src >= seq_len as isize {
                        continue;
                    }
                    let xr = (s * seq_len) + src as usize;
                    gemm_nn(
                        &xs[xr * cin..(xr + 1) * cin],
                        &wd[o * cin * cout..(o + 1) * cin * cout],
                        orow,
                        1,
                        cin,
                        cout,
                    );
                }
            }
        }
        let t = Tensor::new(&[rows, cout], out)?;
        Ok(self.push(
            t,
            Op::Conv1d {
                x: x.0,
                w: w.0,
                b: b.0,
                seq_len,
            },
            &[x.0, w.0, b.0],
        ))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::contract("concat_cols of nothing"))?;
        let (m, _) = matrix("concat_cols", self.val(first.0))?;
        let mut total = 0;
        for p in parts {
            let (pm, pn) = matrix("concat_cols", self.val(p.0))?;
            if pm != m {
                return Err(shape_err("concat_cols", self.shape(*first), self.shape(*p)));
            }
            total += pn;
        }
        let mut out = Vec::with_capacity(m * total);
        for r in 0..m {
            for p in parts {
                out.extend_from_slice(self.val(p.0).row(r));
            }
        }
        let t = Tensor::new(&[m, total], out)?;
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        Ok(self.push(t, Op::ConcatCols(ids.clone()), &ids))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::contract("concat_rows of nothing"))?;
        let (_, n) = matrix("concat_rows", self.val(first.0))?;
        let mut out = Vec::new();
        let mut m = 0;
        for p in parts {
            let (pm, pn) = matrix("concat_rows", self.val(p.0))?;
            if pn != n {
                return Err(shape_err("concat_rows", self.shape(*first), self.shape(*p)));
            }
            out.extend_from_slice(self.val(p.0).data());
            m += pm;
        }
        let t = Tensor::new(&[m, n], out)?;
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        Ok(self.push(t, Op::ConcatRows(ids.clone()), &ids))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = matrix("slice_cols", self.val(a.0))?;
        if len == 0 || start + len > n {
            return Err(shape_err("slice_cols", self.shape(a), &[start, len]));
        }
        let src = self.val(a.0);
        let mut out = Vec::with_capacity(m * len);
        for r in 0..m {
            out.extend_from_slice(&src.row(r)[start..start + len]);
        }
        let t = Tensor::new(&[m, len], out)?;
        Ok(self.push(t, Op::SliceCols { a: a.0, start }, &[a.0]))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = matrix("slice_rows", self.val(a.0))?;
        if len == 0 || start + len > m {
            return Err(shape_err("slice_rows", self.shape(a), &[start, len]));
        }
        let out = self.val(a.0).data()[start * n..(start + len) * n].to_vec();
        let t = Tensor::new(&[len, n], out)?;
        Ok(self.push(t, Op::SliceRows { a: a.0, start }, &[a.0]))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.val(a.0).clone().reshaped(shape)?;
        Ok(self.push(t, Op::Reshape(a.0), &[a.0]))
    }

    /// Softmax along `axis`, with max subtraction.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(shape_err("softmax", &shape, &[axis]));
        }
        let (outer, n, inner) = split_axis(&shape, axis);
        let src = self.val(a.0).data();
        let mut out = vec![T::ZERO; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| o * n * inner + k * inner + i;
                let mut mx = src[at(0)];
                for k in 1..n {
                    mx = mx.max(src[at(k)]);
                }
                let mut z = T::ZERO;
                for k in 0..n {
                    let e = (src[at(k)] - mx).exp();
                    out[at(k)] = e;
                    z += e;
                }
                for k in 0..n {
                    out[at(k)] = out[at(k)] / z;
                }
            }
        }
        let t = Tensor::new(&shape, out)?;
        Ok(self.push(t, Op::Softmax { a: a.0, axis }, &[a.0]))
    }

    /// Row-wise softmax of `a[m×n]` restricted to columns with
    /// `valid[c] == true`; invalid columns get probability exactly zero.
    /// A row with no valid column is all zeros.
    pub fn masked_softmax_rows(&mut self, a: Var, valid: &[bool]) -> Result<Var> {
        let (m, n) = matrix("masked_softmax_rows", self.val(a.0))?;
        if valid.len() != n {
            return Err(shape_err("masked_softmax_rows", self.shape(a), &[valid.len()]));
        }
        let src = self.val(a.0).data();
        let mut out = vec![T::ZERO; m * n];
        if valid.iter().any(|&v| v) {
            for r in 0..m {
                let row = &src[r * n..(r + 1) * n];
                let mx = row
                    .iter()
                    .zip(valid)
                    .filter(|(_, &v)| v)
                    .map(|(&x, _)| x)
                    .fold(None, |acc: Option<T>, x| Some(acc.map_or(x, |a| a.max(x))))
                    .unwrap_or(T::ZERO);
                let orow = &mut out[r * n..(r + 1) * n];
                let mut z = T::ZERO;
                for c in 0..n {
                    if valid[c] {
                        let e = (row[c] - mx).exp();
                        orow[c] = e;
                        z += e;
                    }
                }
                for v in orow.iter_mut() {
                    *v = *v / z;
                }
            }
        }
        let t = Tensor::new(&[m, n], out)?;
        Ok(self.push(t, Op::MaskedSoftmaxRows { a: a.0 }, &[a.0]))
    }

    /// `out[i][j] = a[i][idx[i·n + j]]` for `a[m×r]` and an `m×n` index grid.
    pub fn gather_rel(&mut self, a: Var, idx: &[usize], n: usize) -> Result<Var> {
        let (m, r) = matrix("gather_rel", self.val(a.0))?;
        if idx.len() != m * n {
            return Err(shape_err("gather_rel", self.shape(a), &[m, n]));
        }
        let src = self.val(a.0).data();
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            for j in 0..n {
                let k = idx[i * n + j];
                if k >= r {
                    return Err(Error::Index {
                        what: "relative position table",
                        index: k,
                        bound: r,
                    });
                }
                out.push(src[i * r + k]);
            }
        }
        let t = Tensor::new(&[m, n], out)?;
        Ok(self.push(
            t,
            Op::GatherRel {
                a: a.0,
                idx: idx.to_vec(),
            },
            &[a.0],
        ))
    }

    /// Mean softmax cross-entropy of `logits[N×V]` over `(row, class)` targets.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[(usize, usize)]) -> Result<Var> {
        let (m, v) = matrix("cross_entropy", self.val(logits.0))?;
        if targets.is_empty() {
            return Err(Error::contract("cross_entropy with no targets"));
        }
        let src = self.val(logits.0).data();
        let mut total = 0.0f64;
        for &(r, c) in targets {
            if r >= m || c >= v {
                return Err(Error::Index {
                    what: "cross_entropy target",
                    index: if r >= m { r } else { c },
                    bound: if r >= m { m } else { v },
                });
            }
            let row = &src[r * v..(r + 1) * v];
            total += log_sum_exp(row) - row[c].to_f64();
        }
        let loss = total / targets.len() as f64;
        Ok(self.push(
            Tensor::scalar(T::from_f64(loss)),
            Op::CrossEntropy {
                logits: logits.0,
                targets: targets.to_vec(),
            },
            &[logits.0],
        ))
    }

    /// Mean sigmoid binary cross-entropy over entries whose label is not -1.
    pub fn binary_cross_entropy(&mut self, logits: Var, labels: &[i8]) -> Result<Var> {
        let n = self.val(logits.0).len();
        if labels.len() != n {
            return Err(shape_err("binary_cross_entropy", self.shape(logits), &[labels.len()]));
        }
        let src = self.val(logits.0).data();
        let mut total = 0.0f64;
        let mut count = 0usize;
        for (&x, &y) in src.iter().zip(labels) {
            match y {
                -1 => continue,
                0 | 1 => {
                    let x = x.to_f64();
                    total += x.max(0.0) - x * f64::from(y) + libm::log1p(libm::exp(-x.abs()));
                    count += 1;
                }
                other => {
                    return Err(Error::contract(format!("label {other} is not in {{-1, 0, 1}}")))
                }
            }
        }
        if count == 0 {
            return Err(Error::contract("binary_cross_entropy: every label is ignored"));
        }
        Ok(self.push(
            Tensor::scalar(T::from_f64(total / count as f64)),
            Op::BinaryCrossEntropy {
                logits: logits.0,
                labels: labels.to_vec(),
                count,
            },
            &[logits.0],
        ))
    }

    /// Identity forward, zero gradient backward.
    pub fn stop_gradient(&mut self, a: Var) -> Var {
        let t = self.val(a.0).clone();
        self.nodes.push(Node {
            value: Cow::Owned(t),
            op: Op::StopGradient,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: f64 = self.val(a.0).data().iter().map(|x| x.to_f64()).sum();
        self.push(Tensor::scalar(T::from_f64(s)), Op::Sum(a.0), &[a.0])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.val(a.0);
        let s: f64 = t.data().iter().map(|x| x.to_f64()).sum::<f64>() / t.len() as f64;
        self.push(Tensor::scalar(T::from_f64(s)), Op::Mean(a.0), &[a.0])
    }

    /// Reverse sweep from a scalar `loss`. Consumes the tape, releasing its
    /// borrow of the parameter store.
    pub fn backward(self, loss: Var) -> Result<Gradients<T>> {
        if self.val(loss.0).len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::ONE]);
        let mut out: BTreeMap<ParamId, Tensor<T>> = BTreeMap::new();

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            self.propagate(&node.op, i, &g, &mut grads, &mut out)?;
        }
        Ok(Gradients { entries: out })
    }

    fn wants(&self, i: usize) -> bool {
        self.nodes[i].requires_grad
    }

    fn propagate(
        &self,
        op: &Op<T>,
        here: usize,
        g: &[T],
        grads: &mut [Option<Vec<T>>],
        out: &mut BTreeMap<ParamId, Tensor<T>>,
    ) -> Result<()> {
        let nodes = &self.nodes;
        macro_rules! slot {
            ($i:expr) => {
                grad_slot(nodes, grads, $i)
            };
        }
        match op {
            Op::Constant | Op::StopGradient => {}
            Op::Param(id) => {
                let shape = self.val(here).shape();
                match out.get_mut(id) {
                    Some(acc) => {
                        for (a, &b) in acc.data_mut().iter_mut().zip(g) {
                            *a += b;
                        }
                    }
                    None => {
                        out.insert(*id, Tensor::new(shape, g.to_vec())?);
                    }
                }
            }
            &Op::MatMul { a, b, transpose_b } => {
                let (m, k) = self.val(a).dims2();
                let n = self.val(here).dims2().1;
                if self.wants(a) {
                    let bd = self.val(b).data();
                    let ga = slot!(a).expect("requires grad");
                    if transpose_b {
                        // b is [n×k]: dA = dC · b
                        gemm_nn(g, bd, ga, m, n, k);
                    } else {
                        // b is [k×n]: dA = dC · bᵀ
                        gemm_nt(g, bd, ga, m, n, k);
                    }
                }
                if self.wants(b) {
                    let ad = self.val(a).data();
                    let gb = slot!(b).expect("requires grad");
                    if transpose_b {
                        // dB[n×k] = dCᵀ · A
                        gemm_tn(g, ad, gb, m, n, k);
                    } else {
                        // dB[k×n] = Aᵀ · dC
                        gemm_tn(ad, g, gb, m, k, n);
                    }
                }
            }
            &Op::Transpose(a) => {
                let (m, n) = self.val(a).dims2();
                if let Some(ga) = slot!(a) {
                    for i in 0..m {
                        for j in 0..n {
                            ga[i * n + j] += g[j * m + i];
                        }
                    }
                }
            }
            &Op::Add(a, b) => {
                if let Some(ga) = slot!(a) {
                    add_into(ga, g);
                }
                if let Some(gb) = slot!(b) {
                    add_into(gb, g);
                }
            }
            &Op::AddBias { a, bias } => {
                if let Some(ga) = slot!(a) {
                    add_into(ga, g);
                }
                if let Some(gb) = slot!(bias) {
                    let n = gb.len();
                    for row in g.chunks(n) {
                        add_into(gb, row);
                    }
                }
            }
            &Op::Mul(a, b) => {
                if self.wants(a) {
                    let bd = self.val(b).data();
                    let ga = slot!(a).expect("requires grad");
                    for ((x, &gi), &y) in ga.iter_mut().zip(g).zip(bd) {
                        *x += gi * y;
                    }
                }
                if self.wants(b) {
                    let ad = self.val(a).data();
                    let gb = slot!(b).expect("requires grad");
                    for ((x, &gi), &y) in gb.iter_mut().zip(g).zip(ad) {
                        *x += gi * y;
                    }
                }
            }
            &Op::Scale(a, c) => {
                if let Some(ga) = slot!(a) {
                    for (x, &gi) in ga.iter_mut().zip(g) {
                        *x += gi * c;
                    }
                }
            }
            Op::ScaleRows { a, factors } => {
                if let Some(ga) = slot!(*a) {
                    let n = g.len() / factors.len();
                    for (r, &f) in factors.iter().enumerate() {
                        for c in 0..n {
                            ga[r * n + c] += g[r * n + c] * f;
                        }
                    }
                }
            }
            &Op::Gelu(a) => {
                if self.wants(a) {
                    let xd = self.val(a).data();
                    let ga = slot!(a).expect("requires grad");
                    for ((x, &gi), &xi) in ga.iter_mut().zip(g).zip(xd) {
                        *x += gi * gelu_grad(xi);
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let n = self.val(*gain).len();
                if self.wants(*gain) {
                    let gg = slot!(*gain).expect("requires grad");
                    for (grow, xrow) in g.chunks(n).zip(xhat.chunks(n)) {
                        for c in 0..n {
                            gg[c] += grow[c] * xrow[c];
                        }
                    }
                }
                if let Some(gb) = slot!(*bias) {
                    for grow in g.chunks(n) {
                        add_into(gb, grow);
                    }
                }
                if self.wants(*x) {
                    let gain_v = self.val(*gain).data();
                    let gx = slot!(*x).expect("requires grad");
                    let nf = n as f64;
                    for (r, &inv) in inv_std.iter().enumerate() {
                        let grow = &g[r * n..(r + 1) * n];
                        let xrow = &xhat[r * n..(r + 1) * n];
                        let mut sum_d = 0.0f64;
                        let mut sum_dx = 0.0f64;
                        for c in 0..n {
                            let d = (grow[c] * gain_v[c]).to_f64();
                            sum_d += d;
                            sum_dx += d * xrow[c].to_f64();
                        }
                        let inv = inv.to_f64();
                        for c in 0..n {
                            let d = (grow[c] * gain_v[c]).to_f64();
                            let v = inv / nf * (nf * d - sum_d - xrow[c].to_f64() * sum_dx);
                            gx[r * n + c] += T::from_f64(v);
                        }
                    }
                }
            }
            Op::GatherRows { table, ids } => {
                if let Some(gt) = slot!(*table) {
                    let d = g.len() / ids.len();
                    for (k, &id) in ids.iter().enumerate() {
                        add_into(&mut gt[id * d..(id + 1) * d], &g[k * d..(k + 1) * d]);
                    }
                }
            }
            &Op::Conv1d { x, w, b, seq_len } => {
                let ws = self.val(w).shape();
                let (kernel, cin, cout) = (ws[0], ws[1], ws[2]);
                let half = kernel / 2;
                let rows = self.val(x).dims2().0;
                if let Some(gb) = slot!(b) {
                    for grow in g.chunks(cout) {
                        add_into(gb, grow);
                    }
                }
                let taps = |s: usize, t: usize, o: usize| -> Option<usize> {
                    let src = t as isize + o as isize - half as isize;
                    (src >= 0 && src < seq_len as isize).then(|| s * seq_len + src as usize)
                };
                if self.wants(w) {
                    let xd = self.val(x).data();
                    let gw = slot!(w).expect("requires grad");
                    for s in 0..rows / seq_len {
                        for t in 0..seq_len {
                            let grow = &g[(s * seq_len + t) * cout..(s * seq_len + t + 1) * cout];
                            for o in 0..kernel {
                                if let Some(xr) = taps(s, t, o) {
                                    gemm_tn(
                                        &xd[xr * cin..(xr + 1) * cin],
                                        grow,
                                        &mut gw[o * cin * cout..(o + 1) * cin * cout],
                                        1,
                                        cin,
                                        cout,
                                    );
                                }
                            }
                        }
                    }
                }
                if self.wants(x) {
                    let wd = self.val(w).data();
                    let gx = slot!(x).expect("requires grad");
                    for s in 0..rows / seq_len {
                        for t in 0..seq_len {
                            let grow = &g[(s * seq_len + t) * cout..(s * seq_len + t + 1) * cout];
                            for o in 0..kernel {
                                if let Some(xr) = taps(s, t, o) {
                                    gemm_nt(
                                        grow,
                                        &wd[o * cin * cout..(o + 1) * cin * cout],
                                        &mut gx[xr * cin..(xr + 1) * cin],
                                        1,
                                        cout,
                                        cin,
                                    );
                                }
                            }
                        }
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let (m, total) = self.val(here).dims2();
                let mut offset = 0;
                for &p in parts {
                    let pn = self.val(p).dims2().1;
                    if let Some(gp) = slot!(p) {
                        for r in 0..m {
                            add_into(
                                &mut gp[r * pn..(r + 1) * pn],
                                &g[r * total + offset..r * total + offset + pn],
                            );
                        }
                    }
                    offset += pn;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.val(p).len();
                    if let Some(gp) = slot!(p) {
                        add_into(gp, &g[offset..offset + len]);
                    }
                    offset += len;
                }
            }
            &Op::SliceCols { a, start } => {
                let (m, n) = self.val(a).dims2();
                let len = self.val(here).dims2().1;
                if let Some(ga) = slot!(a) {
                    for r in 0..m {
                        add_into(
                            &mut ga[r * n + start..r * n + start + len],
                            &g[r * len..(r + 1) * len],
                        );
                    }
                }
            }
            &Op::SliceRows { a, start } => {
                let n = self.val(a).dims2().1;
                if let Some(ga) = slot!(a) {
                    add_into(&mut ga[start * n..start * n + g.len()], g);
                }
            }
            &Op::Reshape(a) => {
                if let Some(ga) = slot!(a) {
                    add_into(ga, g);
                }
            }
            &Op::Softmax { a, axis } => {
                let y = self.val(here);
                let (outer, n, inner) = split_axis(y.shape(), axis);
                let yd = y.data();
                if let Some(ga) = slot!(a) {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |k: usize| o * n * inner + k * inner + i;
                            let mut dot = T::ZERO;
                            for k in 0..n {
                                dot += yd[at(k)] * g[at(k)];
                            }
                            for k in 0..n {
                                ga[at(k)] += yd[at(k)] * (g[at(k)] - dot);
                            }
                        }
                    }
                }
            }
            &Op::MaskedSoftmaxRows { a } => {
                let y = self.val(here);
                let (_, n) = y.dims2();
                let yd = y.data();
                if let Some(ga) = slot!(a) {
                    for (r, (yrow, grow)) in yd.chunks(n).zip(g.chunks(n)).enumerate() {
                        let mut dot = T::ZERO;
                        for c in 0..n {
                            dot += yrow[c] * grow[c];
                        }
                        for c in 0..n {
                            ga[r * n + c] += yrow[c] * (grow[c] - dot);
                        }
                    }
                }
            }
            Op::GatherRel { a, idx } => {
                let r = self.val(*a).dims2().1;
                let n = self.val(here).dims2().1;
                if let Some(ga) = slot!(*a) {
                    for (p, &k) in idx.iter().enumerate() {
                        let i = p / n;
                        ga[i * r + k] += g[p];
                    }
                }
            }
            Op::CrossEntropy { logits, targets } => {
                let v = self.val(*logits).dims2().1;
                let src = self.val(*logits).data();
                let scale = g[0].to_f64() / targets.len() as f64;
                if let Some(gl) = slot!(*logits) {
                    for &(r, c) in targets {
                        let row = &src[r * v..(r + 1) * v];
                        let lse = log_sum_exp(row);
                        for k in 0..v {
                            let p = libm::exp(row[k].to_f64() - lse);
                            let onehot = if k == c { 1.0 } else { 0.0 };
                            gl[r * v + k] += T::from_f64(scale * (p - onehot));
                        }
                    }
                }
            }
            Op::BinaryCrossEntropy {
                logits,
                labels,
                count,
            } => {
                let src = self.val(*logits).data();
                let scale = g[0].to_f64() / *count as f64;
                if let Some(gl) = slot!(*logits) {
                    for (k, (&x, &y)) in src.iter().zip(labels).enumerate() {
                        if y < 0 {
                            continue;
                        }
                        let s = sigmoid(x.to_f64());
                        gl[k] += T::from_f64(scale * (s - f64::from(y)));
                    }
                }
            }
            &Op::Sum(a) => {
                if let Some(ga) = slot!(a) {
                    ga.iter_mut().for_each(|x| *x += g[0]);
                }
            }
            &Op::Mean(a) => {
                if let Some(ga) = slot!(a) {
                    let s = g[0] / T::from_usize(ga.len());
                    ga.iter_mut().for_each(|x| *x += s);
                }
            }
        }
        Ok(())
    }
}

fn grad_slot<'g, T: Real>(
    nodes: &[Node<'_, T>],
    grads: &'g mut [Option<Vec<T>>],
    i: usize,
) -> Option<&'g mut Vec<T>> {
    if !nodes[i].requires_grad {
        return None;
    }
    let len = nodes[i].value.len();
    Some(grads[i].get_or_insert_with(|| vec![T::ZERO; len]))
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub(crate) fn log_sum_exp<T: Real>(row: &[T]) -> f64 {
    let mx = row.iter().map(|x| x.to_f64()).fold(f64::NEG_INFINITY, f64::max);
    mx + libm::log(row.iter().map(|x| libm::exp(x.to_f64() - mx)).sum::<f64>())
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}
