//! Dense tensors and a tape-based reverse-mode autodiff engine.
//!
//! A [`Graph`] records every operation applied to its nodes in creation
//! order. Node handles ([`Var`]) are plain indices, so a node's inputs always
//! precede it and a single reverse sweep visits each operation once.
//!
//! The op set is deliberately small: it is exactly what the LSTM
//! encoder-decoder and the pointer-generator head need. There is no implicit
//! broadcasting; the only row-wise broadcasts are [`Graph::add_bias`] and
//! [`Graph::scale_rows`], and tiling is an explicit op.

use std::fmt;
use std::ops::{AddAssign, MulAssign, SubAssign};

use rand::Rng;

use crate::error::{Error, Result};

/// Scalar type for tensors. Implemented for `f32` (default, fast) and `f64`
/// (verification mode).
pub trait Float:
    num_traits::Float
    + AddAssign
    + SubAssign
    + MulAssign
    + Default
    + fmt::Debug
    + fmt::Display
    + Send
    + Sync
    + 'static
{
    const BYTES: usize;
    const DTYPE: &'static str;

    fn of(x: f64) -> Self;
    fn as_f64(self) -> f64;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;

    /// `c = a·b (+ c if accumulate)` for row-major `a: m×k`, `b: k×n`.
    /// `ta`/`tb` read the stored buffers as transposed.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        ta: bool,
        b: &[Self],
        tb: bool,
        c: &mut [Self],
        accumulate: bool,
    );
}

macro_rules! gemm_strides {
    ($trans:expr, $rows:expr, $cols:expr) => {
        if $trans {
            (1isize, $rows as isize)
        } else {
            ($cols as isize, 1isize)
        }
    };
}

impl Float for f32 {
    const BYTES: usize = 4;
    const DTYPE: &'static str = "f32";

    fn of(x: f64) -> Self {
        x as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4 bytes"))
    }
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[f32],
        ta: bool,
        b: &[f32],
        tb: bool,
        c: &mut [f32],
        accumulate: bool,
    ) {
        assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
        let (rsa, csa) = gemm_strides!(ta, m, k);
        let (rsb, csb) = gemm_strides!(tb, k, n);
        let beta = if accumulate { 1.0 } else { 0.0 };
        // SAFETY: the asserts above bound every access made with these strides.
        unsafe {
            matrixmultiply::sgemm(
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
                n as isize,
                1,
            );
        }
    }
}

impl Float for f64 {
    const BYTES: usize = 8;
    const DTYPE: &'static str = "f64";

    fn of(x: f64) -> Self {
        x
    }
    fn as_f64(self) -> f64 {
        self
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8 bytes"))
    }
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[f64],
        ta: bool,
        b: &[f64],
        tb: bool,
        c: &mut [f64],
        accumulate: bool,
    ) {
        assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
        let (rsa, csa) = gemm_strides!(ta, m, k);
        let (rsb, csb) = gemm_strides!(tb, k, n);
        let beta = if accumulate { 1.0 } else { 0.0 };
        // SAFETY: the asserts above bound every access made with these strides.
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
                n as isize,
                1,
            );
        }
    }
}

/// Owned dense row-major array.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<F> {
    shape: Vec<usize>,
    data: Vec<F>,
}

impl<F: Float> Tensor<F> {
    pub fn new(shape: Vec<usize>, data: Vec<F>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::Shape {
                op: "tensor",
                detail: format!("zero-sized dimension in {shape:?}"),
            });
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Shape {
                op: "tensor",
                detail: format!("shape {shape:?} needs {numel} values, got {}", data.len()),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![F::zero(); numel],
        }
    }

    pub fn scalar(x: F) -> Self {
        Self {
            shape: vec![],
            data: vec![x],
        }
    }

    pub fn from_f64(shape: &[usize], values: &[f64]) -> Result<Self> {
        Self::new(shape.to_vec(), values.iter().map(|&v| F::of(v)).collect())
    }

    pub fn uniform(shape: &[usize], bound: f64, rng: &mut impl Rng) -> Self {
        let numel = shape.iter().product();
        let data = (0..numel)
            .map(|_| F::of(rng.gen_range(-bound..bound)))
            .collect();
        Self {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn into_data(self) -> Vec<F> {
        self.data
    }

    /// Converts between precisions.
    pub fn cast<G: Float>(&self) -> Tensor<G> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| G::of(v.as_f64())).collect(),
        }
    }
}

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<F> {
    Leaf,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine { x: Var, scale: F },
    Concat(Vec<Var>),
    SliceLast { x: Var, start: usize },
    Tanh(Var),
    Sigmoid(Var),
    Softmax(Var),
    LnFloor { x: Var, floor: F },
    Embedding { table: Var, ids: Vec<usize> },
    Dropout { x: Var, mask: Vec<F> },
    StackMid(Vec<Var>),
    SelectMid { x: Var, t: usize },
    Reshape(Var),
    ExpandMid { x: Var },
    PairAdd(Var, Var),
    Bmm(Var, Var),
    ScaleRows(Var, Var),
    SelectRows { mask: Vec<bool>, a: Var, b: Var },
    IndexRows { x: Var, idx: Vec<usize> },
    Sum(Var),
    DotConst { x: Var, weights: Vec<F> },
}

struct Node<F> {
    shape: Vec<usize>,
    value: Vec<F>,
    grad: Option<Vec<F>>,
    requires_grad: bool,
    op: Op<F>,
}

/// Computation tape. Confined to one thread for the duration of a
/// forward/backward pass.
pub struct Graph<F> {
    nodes: Vec<Node<F>>,
}

impl<F: Float> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(op: &'static str, detail: String) -> Error {
    Error::Shape { op, detail }
}

fn rows_cols(shape: &[usize]) -> (usize, usize) {
    match shape.split_last() {
        Some((&last, lead)) => (lead.iter().product(), last),
        None => (1, 1),
    }
}

fn sigmoid<F: Float>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

impl<F: Float> Graph<F> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<F>, op: Op<F>, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Trainable leaf: receives gradient.
    pub fn param(&mut self, t: &Tensor<F>) -> Var {
        self.push(t.shape.clone(), t.data.clone(), Op::Leaf, true)
    }

    /// Detached leaf: never receives gradient.
    pub fn constant(&mut self, t: Tensor<F>) -> Var {
        self.push(t.shape, t.data, Op::Leaf, false)
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[F] {
        &self.nodes[v.0].value
    }

    pub fn tensor(&self, v: Var) -> Tensor<F> {
        let n = &self.nodes[v.0];
        Tensor {
            shape: n.shape.clone(),
            data: n.value.clone(),
        }
    }

    /// Accumulated gradient, `None` if nothing flowed into `v`.
    pub fn grad(&self, v: Var) -> Option<&[F]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn scalar_value(&self, v: Var) -> F {
        self.nodes[v.0].value[0]
    }

    /// `a[..., k] · b[k, n] -> [..., n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.is_empty() || sb.len() != 2 || sa[sa.len() - 1] != sb[0] {
            return Err(shape_err("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (m, k) = rows_cols(sa);
        let n = sb[1];
        let mut shape = sa.to_vec();
        *shape.last_mut().unwrap() = n;
        let mut out = vec![F::zero(); m * n];
        F::gemm(m, k, n, self.value(a), false, self.value(b), false, &mut out, false);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(shape, out, Op::MatMul(a, b), rg))
    }

    /// Adds a `[n]` bias to every row of `x[..., n]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x), self.shape(bias));
        if sb.len() != 1 || sx.last() != Some(&sb[0]) {
            return Err(shape_err("add_bias", format!("{sx:?} + {sb:?}")));
        }
        let n = sb[0];
        let b = self.value(bias);
        let out: Vec<F> = self
            .value(x)
            .iter()
            .enumerate()
            .map(|(i, &v)| v + b[i % n])
            .collect();
        let shape = sx.to_vec();
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(shape, out, Op::AddBias(x, bias), rg))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    fn zip(&mut self, a: Var, b: Var, op: Op<F>, f: impl Fn(F, F) -> F) -> Var {
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a) || self.rg(b);
        self.push(shape, out, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        Ok(self.zip(a, b, Op::Add(a, b), |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        Ok(self.zip(a, b, Op::Sub(a, b), |x, y| x - y))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        Ok(self.zip(a, b, Op::Mul(a, b), |x, y| x * y))
    }

    /// `scale·x + shift` elementwise.
    pub fn affine(&mut self, x: Var, scale: F, shift: F) -> Var {
        let out = self.value(x).iter().map(|&v| scale * v + shift).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        self.push(shape, out, Op::Affine { x, scale }, rg)
    }

    /// Concatenates along the last axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(shape_err("concat", "no inputs".into()));
        };
        let lead = self.shape(first).split_last().map(|(_, l)| l.to_vec());
        let Some(lead) = lead else {
            return Err(shape_err("concat", "scalar input".into()));
        };
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.len() != lead.len() + 1 || s[..lead.len()] != lead[..] {
                let shapes: Vec<_> = parts.iter().map(|&p| self.shape(p).to_vec()).collect();
                return Err(shape_err("concat", format!("{shapes:?}")));
            }
            widths.push(s[lead.len()]);
        }
        let rows: usize = lead.iter().product();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p)[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(shape, out, Op::Concat(parts.to_vec()), rg))
    }

    /// `x[..., start..start+len]`.
    pub fn slice_last(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x);
        let width = *s.last().unwrap_or(&1);
        if s.is_empty() || len == 0 || start + len > width {
            return Err(shape_err(
                "slice_last",
                format!("{s:?}[{start}..{}]", start + len),
            ));
        }
        let (rows, _) = rows_cols(s);
        let mut out = Vec::with_capacity(rows * len);
        let v = self.value(x);
        for r in 0..rows {
            out.extend_from_slice(&v[r * width + start..r * width + start + len]);
        }
        let mut shape = s.to_vec();
        *shape.last_mut().unwrap() = len;
        let rg = self.rg(x);
        Ok(self.push(shape, out, Op::SliceLast { x, start }, rg))
    }

    fn map(&mut self, x: Var, op: Op<F>, f: impl Fn(F) -> F) -> Var {
        let out = self.value(x).iter().map(|&v| f(v)).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        self.push(shape, out, op, rg)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.map(x, Op::Tanh(x), |v| v.tanh())
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.map(x, Op::Sigmoid(x), sigmoid)
    }

    /// `ln(x + floor)`; the floor keeps zero probabilities finite.
    pub fn ln_floor(&mut self, x: Var, floor: F) -> Var {
        self.map(x, Op::LnFloor { x, floor }, |v| (v + floor).ln())
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.is_empty() {
            return Err(shape_err("softmax", "scalar input".into()));
        }
        let (rows, n) = rows_cols(s);
        let mut out = self.value(x).to_vec();
        for r in 0..rows {
            softmax_in_place(&mut out[r * n..(r + 1) * n]);
        }
        let shape = s.to_vec();
        let rg = self.rg(x);
        Ok(self.push(shape, out, Op::Softmax(x), rg))
    }

    /// Rows of `table[V, D]` selected by `ids`, shaped `[..ids_shape, D]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize], ids_shape: &[usize]) -> Result<Var> {
        let s = self.shape(table);
        if s.len() != 2 || ids_shape.iter().product::<usize>() != ids.len() || ids.is_empty() {
            return Err(shape_err(
                "embedding",
                format!("table {s:?}, ids {} as {ids_shape:?}", ids.len()),
            ));
        }
        let (vocab, dim) = (s[0], s[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(shape_err(
                "embedding",
                format!("id {bad} out of range for vocab {vocab}"),
            ));
        }
        let t = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * dim);
        for &i in ids {
            out.extend_from_slice(&t[i * dim..(i + 1) * dim]);
        }
        let mut shape = ids_shape.to_vec();
        shape.push(dim);
        let rg = self.rg(table);
        Ok(self.push(
            shape,
            out,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Inverted dropout. Identity when `!training` or `rate == 0`.
    pub fn dropout(&mut self, x: Var, rate: f64, training: bool, rng: &mut impl Rng) -> Var {
        if !training || rate <= 0.0 {
            return x;
        }
        let keep = 1.0 - rate;
        let scale = F::of(1.0 / keep);
        let mask: Vec<F> = (0..self.value(x).len())
            .map(|_| {
                if rng.gen::<f64>() < keep {
                    scale
                } else {
                    F::zero()
                }
            })
            .collect();
        let out = self
            .value(x)
            .iter()
            .zip(&mask)
            .map(|(&v, &m)| v * m)
            .collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        self.push(shape, out, Op::Dropout { x, mask }, rg)
    }

    /// Stacks `T` tensors of shape `[B, D]` into `[B, T, D]`.
    pub fn stack_mid(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(shape_err("stack_mid", "no inputs".into()));
        };
        let s0 = self.shape(first).to_vec();
        if s0.len() != 2 || parts.iter().any(|&p| self.shape(p) != &s0[..]) {
            let shapes: Vec<_> = parts.iter().map(|&p| self.shape(p).to_vec()).collect();
            return Err(shape_err("stack_mid", format!("{shapes:?}")));
        }
        let (b, d, t) = (s0[0], s0[1], parts.len());
        let mut out = vec![F::zero(); b * t * d];
        for (ti, &p) in parts.iter().enumerate() {
            let v = self.value(p);
            for bi in 0..b {
                out[(bi * t + ti) * d..(bi * t + ti + 1) * d]
                    .copy_from_slice(&v[bi * d..(bi + 1) * d]);
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(vec![b, t, d], out, Op::StackMid(parts.to_vec()), rg))
    }

    /// `x[:, t, :]` of a `[B, T, D]` tensor.
    pub fn select_mid(&mut self, x: Var, t: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || t >= s[1] {
            return Err(shape_err("select_mid", format!("{s:?} at {t}")));
        }
        let (b, tt, d) = (s[0], s[1], s[2]);
        let v = self.value(x);
        let mut out = Vec::with_capacity(b * d);
        for bi in 0..b {
            out.extend_from_slice(&v[(bi * tt + t) * d..(bi * tt + t + 1) * d]);
        }
        let rg = self.rg(x);
        Ok(self.push(vec![b, d], out, Op::SelectMid { x, t }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(x).len() || shape.contains(&0) {
            return Err(shape_err(
                "reshape",
                format!("{:?} -> {shape:?}", self.shape(x)),
            ));
        }
        let out = self.value(x).to_vec();
        let rg = self.rg(x);
        Ok(self.push(shape.to_vec(), out, Op::Reshape(x), rg))
    }

    /// Tiles `[B, D]` into `[B, T, D]`.
    pub fn expand_mid(&mut self, x: Var, t: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || t == 0 {
            return Err(shape_err("expand_mid", format!("{s:?} x {t}")));
        }
        let (b, d) = (s[0], s[1]);
        let v = self.value(x);
        let mut out = Vec::with_capacity(b * t * d);
        for bi in 0..b {
            for _ in 0..t {
                out.extend_from_slice(&v[bi * d..(bi + 1) * d]);
            }
        }
        let rg = self.rg(x);
        Ok(self.push(vec![b, t, d], out, Op::ExpandMid { x }, rg))
    }

    /// Outer sum `out[b, l, m, :] = x[b, l, :] + y[b, m, :]`.
    pub fn pair_add(&mut self, x: Var, y: Var) -> Result<Var> {
        let (sx, sy) = (self.shape(x).to_vec(), self.shape(y).to_vec());
        if sx.len() != 3 || sy.len() != 3 || sx[0] != sy[0] || sx[2] != sy[2] {
            return Err(shape_err("pair_add", format!("{sx:?} (+) {sy:?}")));
        }
        let (b, l, m, a) = (sx[0], sx[1], sy[1], sx[2]);
        let (vx, vy) = (self.value(x), self.value(y));
        let mut out = Vec::with_capacity(b * l * m * a);
        for bi in 0..b {
            for li in 0..l {
                let xr = &vx[(bi * l + li) * a..(bi * l + li + 1) * a];
                for mi in 0..m {
                    let yr = &vy[(bi * m + mi) * a..(bi * m + mi + 1) * a];
                    out.extend(xr.iter().zip(yr).map(|(&p, &q)| p + q));
                }
            }
        }
        let rg = self.rg(x) || self.rg(y);
        Ok(self.push(vec![b, l, m, a], out, Op::PairAdd(x, y), rg))
    }

    /// Batched matmul `[B, L, M] · [B, M, D] -> [B, L, D]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(shape_err("bmm", format!("{sa:?} x {sb:?}")));
        }
        let (bs, l, m, d) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![F::zero(); bs * l * d];
        let (va, vb) = (self.value(a), self.value(b));
        for bi in 0..bs {
            F::gemm(
                l,
                m,
                d,
                &va[bi * l * m..(bi + 1) * l * m],
                false,
                &vb[bi * m * d..(bi + 1) * m * d],
                false,
                &mut out[bi * l * d..(bi + 1) * l * d],
                false,
            );
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(vec![bs, l, d], out, Op::Bmm(a, b), rg))
    }

    /// `x[..., n] * s[..., 1]`: scales each row of `x` by its scalar in `s`.
    pub fn scale_rows(&mut self, x: Var, s: Var) -> Result<Var> {
        let (sx, ss) = (self.shape(x).to_vec(), self.shape(s).to_vec());
        if sx.is_empty()
            || ss.len() != sx.len()
            || ss[..ss.len() - 1] != sx[..sx.len() - 1]
            || ss[ss.len() - 1] != 1
        {
            return Err(shape_err("scale_rows", format!("{sx:?} * {ss:?}")));
        }
        let (_, n) = rows_cols(&sx);
        let vs = self.value(s);
        let out = self
            .value(x)
            .iter()
            .enumerate()
            .map(|(i, &v)| v * vs[i / n])
            .collect();
        let rg = self.rg(x) || self.rg(s);
        Ok(self.push(sx, out, Op::ScaleRows(x, s), rg))
    }

    /// Row `i` (along the first axis) from `a` where `mask[i]`, else from `b`.
    pub fn select_rows(&mut self, mask: &[bool], a: Var, b: Var) -> Result<Var> {
        self.same_shape("select_rows", a, b)?;
        let s = self.shape(a).to_vec();
        if s.is_empty() || s[0] != mask.len() {
            return Err(shape_err(
                "select_rows",
                format!("{s:?} with {} mask rows", mask.len()),
            ));
        }
        let w = self.value(a).len() / s[0];
        let (va, vb) = (self.value(a), self.value(b));
        let mut out = Vec::with_capacity(va.len());
        for (r, &m) in mask.iter().enumerate() {
            let src = if m { va } else { vb };
            out.extend_from_slice(&src[r * w..(r + 1) * w]);
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            s,
            out,
            Op::SelectRows {
                mask: mask.to_vec(),
                a,
                b,
            },
            rg,
        ))
    }

    /// Gathers rows along the first axis.
    pub fn index_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.is_empty() || idx.is_empty() || idx.iter().any(|&i| i >= s[0]) {
            return Err(shape_err("index_rows", format!("{s:?} at {idx:?}")));
        }
        let w = self.value(x).len() / s[0];
        let v = self.value(x);
        let mut out = Vec::with_capacity(idx.len() * w);
        for &i in idx {
            out.extend_from_slice(&v[i * w..(i + 1) * w]);
        }
        let mut shape = s;
        shape[0] = idx.len();
        let rg = self.rg(x);
        Ok(self.push(
            shape,
            out,
            Op::IndexRows {
                x,
                idx: idx.to_vec(),
            },
            rg,
        ))
    }

    /// Sum of all elements as a scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).iter().fold(F::zero(), |acc, &v| acc + v);
        let rg = self.rg(x);
        self.push(vec![], vec![total], Op::Sum(x), rg)
    }

    /// `Σ x ⊙ weights` as a scalar, with `weights` a detached constant.
    pub fn dot_const(&mut self, x: Var, weights: Vec<F>) -> Result<Var> {
        if weights.len() != self.value(x).len() {
            return Err(shape_err(
                "dot_const",
                format!("{:?} against {} weights", self.shape(x), weights.len()),
            ));
        }
        let total = self
            .value(x)
            .iter()
            .zip(&weights)
            .fold(F::zero(), |acc, (&v, &w)| acc + v * w);
        let rg = self.rg(x);
        Ok(self.push(vec![], vec![total], Op::DotConst { x, weights }, rg))
    }

    fn accumulate(&mut self, v: Var, f: impl FnOnce(&mut [F], &[Node<F>])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let mut g = self.nodes[v.0]
            .grad
            .take()
            .unwrap_or_else(|| vec![F::zero(); self.nodes[v.0].value.len()]);
        f(&mut g, &self.nodes);
        self.nodes[v.0].grad = Some(g);
    }

    /// Reverse sweep from a scalar `loss`. Gradients accumulate into every
    /// node that requires them; calling twice adds twice.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        self.accumulate(loss, |g, _| g[0] += F::one());
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad || matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(gout) = self.nodes[i].grad.take() else {
                continue;
            };
            let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
            self.backward_op(i, &op, &gout);
            self.nodes[i].op = op;
            self.nodes[i].grad = Some(gout);
        }
        Ok(())
    }

    fn backward_op(&mut self, i: usize, op: &Op<F>, g: &[F]) {
        let out_shape = self.nodes[i].shape.clone();
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = rows_cols(&self.nodes[a.0].shape);
                let n = self.nodes[b.0].shape[1];
                let (a, b) = (*a, *b);
                self.accumulate(a, |ga, nodes| {
                    F::gemm(m, n, k, g, false, &nodes[b.0].value, true, ga, true)
                });
                self.accumulate(b, |gb, nodes| {
                    F::gemm(k, m, n, &nodes[a.0].value, true, g, false, gb, true)
                });
            }
            Op::AddBias(x, bias) => {
                let n = self.nodes[bias.0].shape[0];
                self.accumulate(*x, |gx, _| add_into(gx, g));
                self.accumulate(*bias, |gb, _| {
                    for row in g.chunks(n) {
                        add_into(gb, row);
                    }
                });
            }
            Op::Add(a, b) => {
                self.accumulate(*a, |ga, _| add_into(ga, g));
                self.accumulate(*b, |gb, _| add_into(gb, g));
            }
            Op::Sub(a, b) => {
                self.accumulate(*a, |ga, _| add_into(ga, g));
                self.accumulate(*b, |gb, _| {
                    for (d, &s) in gb.iter_mut().zip(g) {
                        *d -= s;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                self.accumulate(a, |ga, nodes| {
                    for ((d, &s), &y) in ga.iter_mut().zip(g).zip(&nodes[b.0].value) {
                        *d += s * y;
                    }
                });
                self.accumulate(b, |gb, nodes| {
                    for ((d, &s), &x) in gb.iter_mut().zip(g).zip(&nodes[a.0].value) {
                        *d += s * x;
                    }
                });
            }
            Op::Affine { x, scale } => {
                let scale = *scale;
                self.accumulate(*x, |gx, _| {
                    for (d, &s) in gx.iter_mut().zip(g) {
                        *d += scale * s;
                    }
                });
            }
            Op::Concat(parts) => {
                let rows: usize = out_shape[..out_shape.len() - 1].iter().product();
                let total = out_shape[out_shape.len() - 1];
                let mut offset = 0;
                for &p in parts {
                    let w = *self.nodes[p.0].shape.last().unwrap();
                    self.accumulate(p, |gp, _| {
                        for r in 0..rows {
                            add_into(
                                &mut gp[r * w..(r + 1) * w],
                                &g[r * total + offset..r * total + offset + w],
                            );
                        }
                    });
                    offset += w;
                }
            }
            Op::SliceLast { x, start } => {
                let width = *self.nodes[x.0].shape.last().unwrap();
                let len = *out_shape.last().unwrap();
                let start = *start;
                self.accumulate(*x, |gx, _| {
                    for (r, row) in g.chunks(len).enumerate() {
                        add_into(&mut gx[r * width + start..r * width + start + len], row);
                    }
                });
            }
            Op::Tanh(x) => {
                self.accumulate(*x, |gx, nodes| {
                    for ((d, &s), &y) in gx.iter_mut().zip(g).zip(&nodes[i].value) {
                        *d += s * (F::one() - y * y);
                    }
                });
            }
            Op::Sigmoid(x) => {
                self.accumulate(*x, |gx, nodes| {
                    for ((d, &s), &y) in gx.iter_mut().zip(g).zip(&nodes[i].value) {
                        *d += s * y * (F::one() - y);
                    }
                });
            }
            Op::Softmax(x) => {
                let n = *out_shape.last().unwrap();
                self.accumulate(*x, |gx, nodes| {
                    let y = &nodes[i].value;
                    for r in 0..y.len() / n {
                        let (ys, gs) = (&y[r * n..(r + 1) * n], &g[r * n..(r + 1) * n]);
                        let dot = ys
                            .iter()
                            .zip(gs)
                            .fold(F::zero(), |acc, (&p, &q)| acc + p * q);
                        for j in 0..n {
                            gx[r * n + j] += ys[j] * (gs[j] - dot);
                        }
                    }
                });
            }
            Op::LnFloor { x, floor } => {
                let floor = *floor;
                let x = *x;
                self.accumulate(x, |gx, nodes| {
                    for ((d, &s), &v) in gx.iter_mut().zip(g).zip(&nodes[x.0].value) {
                        *d += s / (v + floor);
                    }
                });
            }
            Op::Embedding { table, ids } => {
                let dim = self.nodes[table.0].shape[1];
                self.accumulate(*table, |gt, _| {
                    for (row, &id) in g.chunks(dim).zip(ids) {
                        add_into(&mut gt[id * dim..(id + 1) * dim], row);
                    }
                });
            }
            Op::Dropout { x, mask } => {
                self.accumulate(*x, |gx, _| {
                    for ((d, &s), &m) in gx.iter_mut().zip(g).zip(mask) {
                        *d += s * m;
                    }
                });
            }
            Op::StackMid(parts) => {
                let (b, t, d) = (out_shape[0], out_shape[1], out_shape[2]);
                for (ti, &p) in parts.iter().enumerate() {
                    self.accumulate(p, |gp, _| {
                        for bi in 0..b {
                            add_into(
                                &mut gp[bi * d..(bi + 1) * d],
                                &g[(bi * t + ti) * d..(bi * t + ti + 1) * d],
                            );
                        }
                    });
                }
            }
            Op::SelectMid { x, t } => {
                let tt = self.nodes[x.0].shape[1];
                let (b, d) = (out_shape[0], out_shape[1]);
                let t = *t;
                self.accumulate(*x, |gx, _| {
                    for bi in 0..b {
                        add_into(
                            &mut gx[(bi * tt + t) * d..(bi * tt + t + 1) * d],
                            &g[bi * d..(bi + 1) * d],
                        );
                    }
                });
            }
            Op::Reshape(x) => self.accumulate(*x, |gx, _| add_into(gx, g)),
            Op::ExpandMid { x } => {
                let (t, d) = (out_shape[1], out_shape[2]);
                self.accumulate(*x, |gx, _| {
                    for (r, row) in g.chunks(d).enumerate() {
                        let bi = r / t;
                        add_into(&mut gx[bi * d..(bi + 1) * d], row);
                    }
                });
            }
            Op::PairAdd(x, y) => {
                let (b, l, m, a) = (out_shape[0], out_shape[1], out_shape[2], out_shape[3]);
                self.accumulate(*x, |gx, _| {
                    for bi in 0..b {
                        for li in 0..l {
                            let dst = &mut gx[(bi * l + li) * a..(bi * l + li + 1) * a];
                            for mi in 0..m {
                                let o = ((bi * l + li) * m + mi) * a;
                                add_into(dst, &g[o..o + a]);
                            }
                        }
                    }
                });
                self.accumulate(*y, |gy, _| {
                    for bi in 0..b {
                        for li in 0..l {
                            for mi in 0..m {
                                let o = ((bi * l + li) * m + mi) * a;
                                add_into(&mut gy[(bi * m + mi) * a..(bi * m + mi + 1) * a], &g[o..o + a]);
                            }
                        }
                    }
                });
            }
            Op::Bmm(a, b) => {
                let (bs, l, m) = {
                    let s = &self.nodes[a.0].shape;
                    (s[0], s[1], s[2])
                };
                let d = out_shape[2];
                let (a, b) = (*a, *b);
                self.accumulate(a, |ga, nodes| {
                    let vb = &nodes[b.0].value;
                    for bi in 0..bs {
                        F::gemm(
                            l,
                            d,
                            m,
                            &g[bi * l * d..(bi + 1) * l * d],
                            false,
                            &vb[bi * m * d..(bi + 1) * m * d],
                            true,
                            &mut ga[bi * l * m..(bi + 1) * l * m],
                            true,
                        );
                    }
                });
                self.accumulate(b, |gb, nodes| {
                    let va = &nodes[a.0].value;
                    for bi in 0..bs {
                        F::gemm(
                            m,
                            l,
                            d,
                            &va[bi * l * m..(bi + 1) * l * m],
                            true,
                            &g[bi * l * d..(bi + 1) * l * d],
                            false,
                            &mut gb[bi * m * d..(bi + 1) * m * d],
                            true,
                        );
                    }
                });
            }
            Op::ScaleRows(x, s) => {
                let n = *out_shape.last().unwrap();
                let (x, s) = (*x, *s);
                self.accumulate(x, |gx, nodes| {
                    let vs = &nodes[s.0].value;
                    for (j, (d, &q)) in gx.iter_mut().zip(g).enumerate() {
                        *d += q * vs[j / n];
                    }
                });
                self.accumulate(s, |gs, nodes| {
                    let vx = &nodes[x.0].value;
                    for (r, d) in gs.iter_mut().enumerate() {
                        let row = r * n..(r + 1) * n;
                        *d += g[row.clone()]
                            .iter()
                            .zip(&vx[row])
                            .fold(F::zero(), |acc, (&p, &q)| acc + p * q);
                    }
                });
            }
            Op::SelectRows { mask, a, b } => {
                let w = g.len() / mask.len();
                self.accumulate(*a, |ga, _| {
                    for (r, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
                        add_into(&mut ga[r * w..(r + 1) * w], &g[r * w..(r + 1) * w]);
                    }
                });
                self.accumulate(*b, |gb, _| {
                    for (r, _) in mask.iter().enumerate().filter(|(_, &m)| !m) {
                        add_into(&mut gb[r * w..(r + 1) * w], &g[r * w..(r + 1) * w]);
                    }
                });
            }
            Op::IndexRows { x, idx } => {
                let w = g.len() / idx.len();
                self.accumulate(*x, |gx, _| {
                    for (r, &src) in idx.iter().enumerate() {
                        add_into(&mut gx[src * w..(src + 1) * w], &g[r * w..(r + 1) * w]);
                    }
                });
            }
            Op::Sum(x) => {
                let s = g[0];
                self.accumulate(*x, |gx, _| {
                    for d in gx.iter_mut() {
                        *d += s;
                    }
                });
            }
            Op::DotConst { x, weights } => {
                let s = g[0];
                self.accumulate(*x, |gx, _| {
                    for (d, &w) in gx.iter_mut().zip(weights) {
                        *d += s * w;
                    }
                });
            }
        }
    }
}

fn add_into<F: Float>(dst: &mut [F], src: &[F]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Numerically stable in-place softmax.
pub fn softmax_in_place<F: Float>(row: &mut [F]) {
    let max = row.iter().fold(F::neg_infinity(), |m, &v| m.max(v));
    let mut total = F::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v = *v / total;
    }
}

/// Compares reverse-mode gradients of a scalar function against central
/// differences, over every coordinate of every input.
///
/// Returns `max |analytic - numeric| / max(1, |analytic|)`, or infinity if
/// anything evaluated to NaN.
pub fn grad_check_many<Fun>(points: &[Tensor<f64>], eps: f64, mut f: Fun) -> f64
where
    Fun: FnMut(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |f: &mut Fun, pts: &[Tensor<f64>]| -> Option<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = pts.iter().map(|p| g.param(p)).collect();
        let out = f(&mut g, &vars).ok()?;
        Some(g.scalar_value(out))
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = points.iter().map(|p| g.param(p)).collect();
    let Ok(out) = f(&mut g, &vars) else {
        return f64::INFINITY;
    };
    if g.backward(out).is_err() {
        return f64::INFINITY;
    }
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(points)
        .map(|(&v, p)| {
            g.grad(v)
                .map(|s| s.to_vec())
                .unwrap_or_else(|| vec![0.0; p.numel()])
        })
        .collect();

    let mut worst = 0.0f64;
    let mut pts = points.to_vec();
    for (pi, grads) in analytic.iter().enumerate() {
        for (j, &a) in grads.iter().enumerate() {
            let orig = pts[pi].data[j];
            pts[pi].data[j] = orig + eps;
            let up = eval(&mut f, &pts);
            pts[pi].data[j] = orig - eps;
            let down = eval(&mut f, &pts);
            pts[pi].data[j] = orig;
            let (Some(up), Some(down)) = (up, down) else {
                return f64::INFINITY;
            };
            let numeric = (up - down) / (2.0 * eps);
            let err = (a - numeric).abs() / a.abs().max(1.0);
            if err.is_nan() {
                return f64::INFINITY;
            }
            worst = worst.max(err);
        }
    }
    worst
}

/// Single-input form of [`grad_check_many`].
pub fn grad_check<Fun>(point: &Tensor<f64>, eps: f64, mut f: Fun) -> f64
where
    Fun: FnMut(&mut Graph<f64>, Var) -> Result<Var>,
{
    grad_check_many(std::slice::from_ref(point), eps, |g, v| f(g, v[0]))
}
