use super::{axis_split, gemm, shape_err, Result, Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum UnaryKind {
    Neg,
    Exp,
    Log,
    Sqrt,
    Sigmoid,
    Tanh,
    /// tanh approximation
    Gelu,
    Square,
    /// `|x|^p`
    AbsPow(f64),
    /// `x^p` for `x >= 0`; the derivative at 0 is taken as 0.
    Pow(f64),
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

impl UnaryKind {
    fn apply(self, x: f64) -> f64 {
        match self {
            UnaryKind::Neg => -x,
            UnaryKind::Exp => x.exp(),
            UnaryKind::Log => x.ln(),
            UnaryKind::Sqrt => x.sqrt(),
            UnaryKind::Sigmoid => sigmoid(x),
            UnaryKind::Tanh => x.tanh(),
            UnaryKind::Gelu => 0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh()),
            UnaryKind::Square => x * x,
            UnaryKind::AbsPow(p) => x.abs().powf(p),
            UnaryKind::Pow(p) => x.powf(p),
        }
    }

    /// dy/dx given input `x` and output `y`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            UnaryKind::Neg => -1.0,
            UnaryKind::Exp => y,
            UnaryKind::Log => 1.0 / x,
            UnaryKind::Sqrt => 0.5 / y,
            UnaryKind::Sigmoid => y * (1.0 - y),
            UnaryKind::Tanh => 1.0 - y * y,
            UnaryKind::Gelu => {
                let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
                0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
            }
            UnaryKind::Square => 2.0 * x,
            UnaryKind::AbsPow(p) => {
                if x == 0.0 {
                    0.0
                } else {
                    p * x.abs().powf(p - 1.0) * x.signum()
                }
            }
            UnaryKind::Pow(p) => {
                if x == 0.0 {
                    0.0
                } else {
                    p * x.powf(p - 1.0)
                }
            }
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    AddBias { x: Var, bias: Var },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Unary(Var, UnaryKind),
    Softmax { x: Var, axis: usize },
    LayerNorm { x: Var, gain: Var, bias: Var, rstd: Vec<f64> },
    Conv1d { x: Var, w: Var, stride: usize, padding: usize },
    AdaptivePool { x: Var },
    Concat { xs: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    Permute { x: Var, perm: Vec<usize> },
    Reshape(Var),
    BroadcastLead(Var),
    Sum(Var),
    SumAxis { x: Var, axis: usize },
    IndexSelect { x: Var, axis: usize, idx: Vec<usize> },
    ReverseGrad { x: Var, scale: f64 },
    Bce { logit: Var, target: Tensor },
    RowNormalize { x: Var, scale: f64 },
    PairwiseSqDist(Var),
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
    tracked: bool,
}

/// Append-only record of one forward pass.
///
/// Nodes are stored in creation order, so inputs always precede their
/// consumers and a single reverse sweep is a valid topological traversal.
#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of one backward pass, indexed by node.
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient for `v`; zeros when `v` did not influence the loss.
    pub fn wrt(&self, v: Var) -> Tensor {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }

    pub fn touched(&self, v: Var) -> bool {
        self.grads[v.0].is_some()
    }
}

fn check_same(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return shape_err(op, a.shape(), b.shape());
    }
    Ok(())
}

/// Strides of the logical (optionally transposed) matrix stored row-major with `cols` columns.
fn mat_strides(cols: usize, transposed: bool) -> (usize, usize) {
    if transposed {
        (1, cols)
    } else {
        (cols, 1)
    }
}

fn swap((r, c): (usize, usize)) -> (usize, usize) {
    (c, r)
}

fn adaptive_bounds(len: usize, out: usize, i: usize) -> (usize, usize) {
    let start = i * len / out;
    let end = ((i + 1) * len).div_ceil(out);
    (start, end)
}

fn permute_data(src: &[f64], shape: &[usize], perm: &[usize]) -> (Vec<usize>, Vec<f64>) {
    let rank = shape.len();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(src.len());
    let mut idx = vec![0usize; rank];
    let last = rank - 1;
    let (inner_len, inner_stride) = (out_shape[last], strides[last]);
    if src.is_empty() {
        return (out_shape, out);
    }
    loop {
        let base: usize = idx.iter().zip(&strides).map(|(i, s)| i * s).sum();
        for j in 0..inner_len {
            out.push(src[base + j * inner_stride]);
        }
        // advance all but the last axis
        let mut ax = last;
        loop {
            if ax == 0 {
                return (out_shape, out);
            }
            ax -= 1;
            idx[ax] += 1;
            if idx[ax] < out_shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn is_tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let tracked = inputs.iter().any(|v| self.nodes[v.0].tracked);
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf: receives a gradient in [`Tape::backward`].
    pub fn param(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            tracked: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Untracked leaf.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            tracked: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Copy of `x` cut off from the graph.
    pub fn detach(&mut self, x: Var) -> Var {
        let t = self.value(x).clone();
        self.constant(t)
    }

    // ---------------------------------------------------------------- linear algebra

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    /// `op(a)·op(b)` where `op` optionally transposes the last two axes.
    /// Both operands are rank 2, or both rank 3 with equal leading (batch) size.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (batch, am, ak, bk, bn) = match (sa.len(), sb.len()) {
            (2, 2) => {
                let (am, ak) = if ta { (sa[1], sa[0]) } else { (sa[0], sa[1]) };
                let (bk, bn) = if tb { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
                (1, am, ak, bk, bn)
            }
            (3, 3) if sa[0] == sb[0] => {
                let (am, ak) = if ta { (sa[2], sa[1]) } else { (sa[1], sa[2]) };
                let (bk, bn) = if tb { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
                (sa[0], am, ak, bk, bn)
            }
            _ => return shape_err("matmul", &sa, &sb),
        };
        if ak != bk {
            return shape_err("matmul", &sa, &sb);
        }
        let (m, k, n) = (am, ak, bn);
        let a_cols = *sa.last().unwrap();
        let b_cols = *sb.last().unwrap();
        let mut out = vec![0.0; batch * m * n];
        {
            let (av, bv) = (self.value(a).data(), self.value(b).data());
            for bi in 0..batch {
                gemm(
                    m,
                    k,
                    n,
                    &av[bi * m * k..(bi + 1) * m * k],
                    mat_strides(a_cols, ta),
                    &bv[bi * k * n..(bi + 1) * k * n],
                    mat_strides(b_cols, tb),
                    &mut out[bi * m * n..(bi + 1) * m * n],
                    false,
                );
            }
        }
        let shape = if sa.len() == 2 { vec![m, n] } else { vec![batch, m, n] };
        Ok(self.push(Tensor::from_parts(shape, out), Op::MatMul { a, b, ta, tb }, &[a, b]))
    }

    /// `x + bias` with `bias` broadcast over every leading axis.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xs, bs) = (self.shape(x), self.shape(bias));
        if bs.len() != 1 || xs.last() != Some(&bs[0]) {
            return shape_err("add_bias", xs, bs);
        }
        let n = bs[0];
        let b = self.value(bias).data();
        let out: Vec<f64> = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v + b[i % n])
            .collect();
        let t = Tensor::from_parts(self.shape(x).to_vec(), out);
        Ok(self.push(t, Op::AddBias { x, bias }, &[x, bias]))
    }

    /// `x·w + b` over the last axis of `x` (any rank ≥ 2).
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let din = *xs.last().unwrap();
        let rows = xs.iter().product::<usize>() / din.max(1);
        let flat = self.reshape(x, &[rows, din])?;
        let y = self.matmul(flat, w)?;
        let y = match b {
            Some(b) => self.add_bias(y, b)?,
            None => y,
        };
        let dout = self.shape(y)[1];
        let mut out_shape = xs;
        *out_shape.last_mut().unwrap() = dout;
        self.reshape(y, &out_shape)
    }

    // ---------------------------------------------------------------- elementwise

    fn binary(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        check_same(op, ta, tb)?;
        ta.zip_map(tb, f)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary("add", a, b, |x, y| x + y)?;
        Ok(self.push(t, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary("sub", a, b, |x, y| x - y)?;
        Ok(self.push(t, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary("mul", a, b, |x, y| x * y)?;
        Ok(self.push(t, Op::Mul(a, b), &[a, b]))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary("div", a, b, |x, y| x / y)?;
        Ok(self.push(t, Op::Div(a, b), &[a, b]))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let t = self.value(x).map(|v| v * c);
        self.push(t, Op::Scale(x, c), &[x])
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let t = self.value(x).map(|v| v + c);
        self.push(t, Op::AddScalar(x), &[x])
    }

    pub fn unary(&mut self, x: Var, kind: UnaryKind) -> Var {
        let t = self.value(x).map(|v| kind.apply(v));
        self.push(t, Op::Unary(x, kind), &[x])
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.unary(x, UnaryKind::Neg)
    }
    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, UnaryKind::Exp)
    }
    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, UnaryKind::Log)
    }
    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary(x, UnaryKind::Sqrt)
    }
    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, UnaryKind::Sigmoid)
    }
    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, UnaryKind::Tanh)
    }
    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(x, UnaryKind::Gelu)
    }
    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, UnaryKind::Square)
    }

    // ---------------------------------------------------------------- normalisation

    /// Max-subtracted softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(TensorError::Config {
                op: "softmax",
                msg: format!("axis {axis} out of range for {shape:?}"),
            });
        }
        let (outer, len, inner) = axis_split(&shape, axis);
        let src = self.value(x).data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mut mx = f64::NEG_INFINITY;
                for j in 0..len {
                    mx = mx.max(src[base + j * inner]);
                }
                let mut s = 0.0;
                for j in 0..len {
                    let e = (src[base + j * inner] - mx).exp();
                    out[base + j * inner] = e;
                    s += e;
                }
                for j in 0..len {
                    out[base + j * inner] /= s;
                }
            }
        }
        Ok(self.push(Tensor::from_parts(shape, out), Op::Softmax { x, axis }, &[x]))
    }

    /// Layer normalisation over the last axis, epsilon 1e-5 inside the root.
    pub fn layernorm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        const EPS: f64 = 1e-5;
        let shape = self.shape(x).to_vec();
        let d = *shape.last().unwrap();
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return shape_err("layernorm", &shape, self.shape(gain));
        }
        let rows = self.value(x).numel() / d;
        let (src, g, b) = (self.value(x).data(), self.value(gain).data(), self.value(bias).data());
        let mut out = vec![0.0; src.len()];
        let mut rstd = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &src[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + EPS).sqrt();
            rstd.push(rs);
            for j in 0..d {
                out[r * d + j] = (row[j] - mean) * rs * g[j] + b[j];
            }
        }
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::LayerNorm { x, gain, bias, rstd },
            &[x, gain, bias],
        ))
    }

    /// Scales every row (last axis) of `x` to L2 norm `scale`; zero rows stay zero.
    pub fn row_normalize(&mut self, x: Var, scale: f64) -> Var {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().unwrap();
        let src = self.value(x).data();
        let mut out = vec![0.0; src.len()];
        for (o, row) in out.chunks_mut(d).zip(src.chunks(d)) {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 0.0 {
                for (dst, v) in o.iter_mut().zip(row) {
                    *dst = scale * v / norm;
                }
            }
        }
        self.push(Tensor::from_parts(shape, out), Op::RowNormalize { x, scale }, &[x])
    }

    // ---------------------------------------------------------------- convolution & pooling

    /// Cross-correlation along the token axis.
    ///
    /// `x` is `[L, C]` or `[B, L, C]`, `w` is `[k, C, C']` with odd `k`.
    pub fn conv1d(&mut self, x: Var, w: Var, stride: usize, padding: usize) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        let (batch, len, cin) = match xs.len() {
            2 => (1, xs[0], xs[1]),
            3 => (xs[0], xs[1], xs[2]),
            _ => return shape_err("conv1d", &xs, &ws),
        };
        if ws.len() != 3 || ws[1] != cin {
            return shape_err("conv1d", &xs, &ws);
        }
        let (k, cout) = (ws[0], ws[2]);
        if k % 2 == 0 || stride == 0 {
            return Err(TensorError::Config {
                op: "conv1d",
                msg: format!("kernel size must be odd and stride positive (k={k}, stride={stride})"),
            });
        }
        let out_len = conv_out_len(len, k, stride, padding).ok_or_else(|| TensorError::Config {
            op: "conv1d",
            msg: format!("output length < 1 for L={len}, k={k}, stride={stride}, padding={padding}"),
        })?;
        let cols = im2col(self.value(x).data(), batch, len, cin, k, stride, padding, out_len);
        let mut out = vec![0.0; batch * out_len * cout];
        gemm(
            batch * out_len,
            k * cin,
            cout,
            &cols,
            (k * cin, 1),
            self.value(w).data(),
            (cout, 1),
            &mut out,
            false,
        );
        let shape = if xs.len() == 2 {
            vec![out_len, cout]
        } else {
            vec![batch, out_len, cout]
        };
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::Conv1d { x, w, stride, padding },
            &[x, w],
        ))
    }

    /// Adaptive average pooling of the token axis (axis 1 of `[B, T, C]`,
    /// axis 0 of `[T, C]`) down to `out_len` tokens.
    pub fn adaptive_avg_pool(&mut self, x: Var, out_len: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let (batch, len, c) = match xs.len() {
            2 => (1, xs[0], xs[1]),
            3 => (xs[0], xs[1], xs[2]),
            _ => return shape_err("adaptive_avg_pool", &xs, &[out_len]),
        };
        if out_len == 0 || len == 0 {
            return Err(TensorError::Config {
                op: "adaptive_avg_pool",
                msg: format!("cannot pool {len} tokens to {out_len}"),
            });
        }
        let src = self.value(x).data();
        let mut out = vec![0.0; batch * out_len * c];
        for b in 0..batch {
            for i in 0..out_len {
                let (s, e) = adaptive_bounds(len, out_len, i);
                let inv = 1.0 / (e - s) as f64;
                let dst = &mut out[(b * out_len + i) * c..(b * out_len + i + 1) * c];
                for t in s..e {
                    let row = &src[(b * len + t) * c..(b * len + t + 1) * c];
                    for (d, v) in dst.iter_mut().zip(row) {
                        *d += v;
                    }
                }
                dst.iter_mut().for_each(|d| *d *= inv);
            }
        }
        let shape = if xs.len() == 2 {
            vec![out_len, c]
        } else {
            vec![batch, out_len, c]
        };
        Ok(self.push(Tensor::from_parts(shape, out), Op::AdaptivePool { x }, &[x]))
    }

    // ---------------------------------------------------------------- shape manipulation

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).reshape(shape)?;
        Ok(self.push(t, Op::Reshape(x), &[x]))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(xs[0]).to_vec();
        if axis >= first.len() {
            return Err(TensorError::Config {
                op: "concat",
                msg: format!("axis {axis} out of range for {first:?}"),
            });
        }
        let mut total = 0;
        for &v in xs {
            let s = self.shape(v);
            if s.len() != first.len()
                || s.iter().enumerate().any(|(i, &d)| i != axis && d != first[i])
            {
                return shape_err("concat", &first, s);
            }
            total += s[axis];
        }
        let (outer, _, inner) = axis_split(&first, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in xs {
                let n = self.shape(v)[axis];
                out.extend_from_slice(&self.value(v).data()[o * n * inner..(o + 1) * n * inner]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::Concat { xs: xs.to_vec(), axis },
            xs,
        ))
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(TensorError::Config {
                op: "slice",
                msg: format!("[{start}, {}) on axis {axis} of {shape:?}", start + len),
            });
        }
        let (outer, n, inner) = axis_split(&shape, axis);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * n + start) * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut oshape = shape;
        oshape[axis] = len;
        Ok(self.push(Tensor::from_parts(oshape, out), Op::Slice { x, axis, start }, &[x]))
    }

    /// Reorders axes; materialises the result.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(TensorError::Config {
                op: "permute",
                msg: format!("{perm:?} is not a permutation of the axes of {shape:?}"),
            });
        }
        let (oshape, out) = permute_data(self.value(x).data(), &shape, perm);
        Ok(self.push(
            Tensor::from_parts(oshape, out),
            Op::Permute { x, perm: perm.to_vec() },
            &[x],
        ))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let r = self.shape(x).len();
        if r < 2 {
            return shape_err("transpose", self.shape(x), &[]);
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.permute(x, &perm)
    }

    /// Repeats `x` `n` times along a new leading axis.
    pub fn broadcast_lead(&mut self, x: Var, n: usize) -> Var {
        let src = self.value(x);
        let mut shape = vec![n];
        shape.extend_from_slice(src.shape());
        let mut out = Vec::with_capacity(n * src.numel());
        for _ in 0..n {
            out.extend_from_slice(src.data());
        }
        self.push(Tensor::from_parts(shape, out), Op::BroadcastLead(x), &[x])
    }

    pub fn index_select(&mut self, x: Var, axis: usize, idx: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || idx.iter().any(|&i| i >= shape[axis]) {
            return Err(TensorError::Config {
                op: "index_select",
                msg: format!("indices out of range for axis {axis} of {shape:?}"),
            });
        }
        let (outer, n, inner) = axis_split(&shape, axis);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(outer * idx.len() * inner);
        for o in 0..outer {
            for &i in idx {
                let base = (o * n + i) * inner;
                out.extend_from_slice(&src[base..base + inner]);
            }
        }
        let mut oshape = shape;
        oshape[axis] = idx.len();
        Ok(self.push(
            Tensor::from_parts(oshape, out),
            Op::IndexSelect { x, axis, idx: idx.to_vec() },
            &[x],
        ))
    }

    // ---------------------------------------------------------------- reductions

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel().max(1) as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Sum along `axis`, removing it.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(TensorError::Config {
                op: "sum_axis",
                msg: format!("axis {axis} out of range for {shape:?}"),
            });
        }
        let (outer, n, inner) = axis_split(&shape, axis);
        let src = self.value(x).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..n {
                let row = &src[(o * n + j) * inner..(o * n + j + 1) * inner];
                for (d, v) in out[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *d += v;
                }
            }
        }
        let mut oshape = shape;
        oshape.remove(axis);
        if oshape.is_empty() {
            oshape.push(1);
        }
        Ok(self.push(Tensor::from_parts(oshape, out), Op::SumAxis { x, axis }, &[x]))
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let n = self.shape(x).get(axis).copied().unwrap_or(1).max(1) as f64;
        let s = self.sum_axis(x, axis)?;
        Ok(self.scale(s, 1.0 / n))
    }

    /// Squared Euclidean distances between all row pairs of `[n, D]`.
    pub fn pairwise_sq_dist(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 2 {
            return shape_err("pairwise_sq_dist", &shape, &[]);
        }
        let (n, d) = (shape[0], shape[1]);
        let src = self.value(x).data();
        let mut out = vec![0.0; n * n];
        for i in 0..n {
            for j in (i + 1)..n {
                let s: f64 = (0..d).map(|c| (src[i * d + c] - src[j * d + c]).powi(2)).sum();
                out[i * n + j] = s;
                out[j * n + i] = s;
            }
        }
        Ok(self.push(Tensor::from_parts(vec![n, n], out), Op::PairwiseSqDist(x), &[x]))
    }

    // ---------------------------------------------------------------- losses & special nodes

    /// Identity forward; backward multiplies the upstream gradient by `scale`.
    pub fn reverse_gradient(&mut self, x: Var, scale: f64) -> Result<Var> {
        if !(scale < 0.0) {
            return Err(TensorError::Validation(format!(
                "gradient reversal scale must be negative, got {scale}"
            )));
        }
        let t = self.value(x).clone();
        Ok(self.push(t, Op::ReverseGrad { x, scale }, &[x]))
    }

    /// Mean binary cross-entropy on logits, computed as
    /// `max(z,0) - z·t + ln(1 + e^{-|z|})`.
    pub fn bce_with_logits(&mut self, logit: Var, target: &Tensor) -> Result<Var> {
        let z = self.value(logit);
        check_same("bce_with_logits", z, target)?;
        if let Some(bad) = target.data().iter().find(|&&t| t != 0.0 && t != 1.0) {
            return Err(TensorError::Validation(format!(
                "bce_with_logits: target {bad} is not in {{0, 1}}"
            )));
        }
        if z.numel() == 0 {
            return Err(TensorError::Validation("bce_with_logits: empty input".into()));
        }
        let n = z.numel() as f64;
        let loss: f64 = z
            .data()
            .iter()
            .zip(target.data())
            .map(|(&z, &t)| z.max(0.0) - z * t + (-z.abs()).exp().ln_1p())
            .sum::<f64>()
            / n;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::Bce { logit, target: target.clone() },
            &[logit],
        ))
    }

    // ---------------------------------------------------------------- backward

    /// Reverse sweep from a tracked scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let node = &self.nodes[loss.0];
        if node.value.numel() != 1 {
            return Err(TensorError::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                node.value.shape()
            )));
        }
        if !node.tracked {
            return Err(TensorError::Usage(
                "backward called on a loss that depends on no tracked parameter".into(),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::full(node.value.shape(), 1.0));
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.tracked {
                continue;
            }
            let Some(g) = grads[id].clone() else { continue };
            self.backprop_node(node, &g, &mut grads);
        }
        grads.resize(self.nodes.len(), None);
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn acc<'g>(&self, grads: &'g mut [Option<Tensor>], v: Var) -> Option<&'g mut [f64]> {
        let node = &self.nodes[v.0];
        if !node.tracked {
            return None;
        }
        let slot = &mut grads[v.0];
        if slot.is_none() {
            *slot = Some(Tensor::zeros(node.value.shape()));
        }
        slot.as_mut().map(|t| t.data_mut())
    }

    fn acc_with(&self, grads: &mut [Option<Tensor>], v: Var, f: impl Fn(usize) -> f64) {
        if let Some(buf) = self.acc(grads, v) {
            for (i, d) in buf.iter_mut().enumerate() {
                *d += f(i);
            }
        }
    }

    fn backprop_node(&self, node: &Node, gt: &Tensor, grads: &mut [Option<Tensor>]) {
        let g = gt.data();
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, ta, tb } => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let batch = if sa.len() == 3 { sa[0] } else { 1 };
                let a_cols = *sa.last().unwrap();
                let b_cols = *sb.last().unwrap();
                let (m, k) = if *ta {
                    (a_cols, sa[sa.len() - 2])
                } else {
                    (sa[sa.len() - 2], a_cols)
                };
                let n = if *tb { sb[sb.len() - 2] } else { b_cols };
                let (st_a, st_b) = (mat_strides(a_cols, *ta), mat_strides(b_cols, *tb));
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if let Some(ga) = self.acc(grads, *a) {
                    for bi in 0..batch {
                        let gs = &g[bi * m * n..(bi + 1) * m * n];
                        let bs = &bv[bi * k * n..(bi + 1) * k * n];
                        let out = &mut ga[bi * m * k..(bi + 1) * m * k];
                        if *ta {
                            gemm(k, n, m, bs, st_b, gs, (1, n), out, true);
                        } else {
                            gemm(m, n, k, gs, (n, 1), bs, swap(st_b), out, true);
                        }
                    }
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for bi in 0..batch {
                        let gs = &g[bi * m * n..(bi + 1) * m * n];
                        let as_ = &av[bi * m * k..(bi + 1) * m * k];
                        let out = &mut gb[bi * k * n..(bi + 1) * k * n];
                        if *tb {
                            gemm(n, m, k, gs, (1, n), as_, st_a, out, true);
                        } else {
                            gemm(k, m, n, as_, swap(st_a), gs, (n, 1), out, true);
                        }
                    }
                }
            }
            Op::AddBias { x, bias } => {
                self.acc_with(grads, *x, |i| g[i]);
                let n = self.shape(*bias)[0];
                if let Some(gb) = self.acc(grads, *bias) {
                    for (i, v) in g.iter().enumerate() {
                        gb[i % n] += v;
                    }
                }
            }
            Op::Add(a, b) => {
                self.acc_with(grads, *a, |i| g[i]);
                self.acc_with(grads, *b, |i| g[i]);
            }
            Op::Sub(a, b) => {
                self.acc_with(grads, *a, |i| g[i]);
                self.acc_with(grads, *b, |i| -g[i]);
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                self.acc_with(grads, *a, |i| g[i] * bv[i]);
                self.acc_with(grads, *b, |i| g[i] * av[i]);
            }
            Op::Div(a, b) => {
                let bv = self.value(*b).data();
                self.acc_with(grads, *a, |i| g[i] / bv[i]);
                self.acc_with(grads, *b, |i| -g[i] * y[i] / bv[i]);
            }
            Op::Scale(x, c) => self.acc_with(grads, *x, |i| g[i] * c),
            Op::AddScalar(x) => self.acc_with(grads, *x, |i| g[i]),
            Op::Unary(x, kind) => {
                let xv = self.value(*x).data();
                self.acc_with(grads, *x, |i| g[i] * kind.derivative(xv[i], y[i]));
            }
            Op::Softmax { x, axis } => {
                let (outer, len, inner) = axis_split(node.value.shape(), *axis);
                if let Some(gx) = self.acc(grads, *x) {
                    for o in 0..outer {
                        for i in 0..inner {
                            let base = o * len * inner + i;
                            let dot: f64 = (0..len).map(|j| g[base + j * inner] * y[base + j * inner]).sum();
                            for j in 0..len {
                                let p = base + j * inner;
                                gx[p] += y[p] * (g[p] - dot);
                            }
                        }
                    }
                }
            }
            Op::LayerNorm { x, gain, bias, rstd } => {
                let d = *node.value.shape().last().unwrap();
                let xv = self.value(*x).data();
                let gv = self.value(*gain).data();
                let rows = rstd.len();
                let mut xhat = vec![0.0; xv.len()];
                for r in 0..rows {
                    let row = &xv[r * d..(r + 1) * d];
                    let mean = row.iter().sum::<f64>() / d as f64;
                    for j in 0..d {
                        xhat[r * d + j] = (row[j] - mean) * rstd[r];
                    }
                }
                if let Some(gg) = self.acc(grads, *gain) {
                    for (i, v) in g.iter().enumerate() {
                        gg[i % d] += v * xhat[i];
                    }
                }
                if let Some(gb) = self.acc(grads, *bias) {
                    for (i, v) in g.iter().enumerate() {
                        gb[i % d] += v;
                    }
                }
                if let Some(gx) = self.acc(grads, *x) {
                    for r in 0..rows {
                        let sl = r * d..(r + 1) * d;
                        let dxhat: Vec<f64> = g[sl.clone()].iter().zip(gv).map(|(a, b)| a * b).collect();
                        let m1 = dxhat.iter().sum::<f64>() / d as f64;
                        let m2 = dxhat.iter().zip(&xhat[sl.clone()]).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        for j in 0..d {
                            gx[r * d + j] += rstd[r] * (dxhat[j] - m1 - xhat[r * d + j] * m2);
                        }
                    }
                }
            }
            Op::Conv1d { x, w, stride, padding } => {
                let xs = self.shape(*x);
                let (batch, len, cin) = if xs.len() == 2 { (1, xs[0], xs[1]) } else { (xs[0], xs[1], xs[2]) };
                let ws = self.shape(*w);
                let (k, cout) = (ws[0], ws[2]);
                let out_len = conv_out_len(len, k, *stride, *padding).unwrap();
                let rows = batch * out_len;
                if self.nodes[w.0].tracked {
                    let cols = im2col(self.value(*x).data(), batch, len, cin, k, *stride, *padding, out_len);
                    let gw = self.acc(grads, *w).unwrap();
                    gemm(k * cin, rows, cout, &cols, (1, k * cin), g, (cout, 1), gw, true);
                }
                if self.nodes[x.0].tracked {
                    let mut gcols = vec![0.0; rows * k * cin];
                    gemm(rows, cout, k * cin, g, (cout, 1), self.value(*w).data(), (1, cout), &mut gcols, false);
                    let gx = self.acc(grads, *x).unwrap();
                    col2im(&gcols, gx, batch, len, cin, k, *stride, *padding, out_len);
                }
            }
            Op::AdaptivePool { x } => {
                let xs = self.shape(*x);
                let (batch, len, c) = if xs.len() == 2 { (1, xs[0], xs[1]) } else { (xs[0], xs[1], xs[2]) };
                let out_len = node.value.shape()[node.value.rank() - 2];
                if let Some(gx) = self.acc(grads, *x) {
                    for b in 0..batch {
                        for i in 0..out_len {
                            let (s, e) = adaptive_bounds(len, out_len, i);
                            let inv = 1.0 / (e - s) as f64;
                            let src = &g[(b * out_len + i) * c..(b * out_len + i + 1) * c];
                            for t in s..e {
                                let dst = &mut gx[(b * len + t) * c..(b * len + t + 1) * c];
                                for (d, v) in dst.iter_mut().zip(src) {
                                    *d += v * inv;
                                }
                            }
                        }
                    }
                }
            }
            Op::Concat { xs, axis } => {
                let (outer, total, inner) = axis_split(node.value.shape(), *axis);
                let mut offset = 0;
                for &v in xs {
                    let n = self.shape(v)[*axis];
                    if let Some(gx) = self.acc(grads, v) {
                        for o in 0..outer {
                            let src = &g[(o * total + offset) * inner..(o * total + offset + n) * inner];
                            for (d, s) in gx[o * n * inner..(o + 1) * n * inner].iter_mut().zip(src) {
                                *d += s;
                            }
                        }
                    }
                    offset += n;
                }
            }
            Op::Slice { x, axis, start } => {
                let (outer, n, inner) = axis_split(self.shape(*x), *axis);
                let len = node.value.shape()[*axis];
                if let Some(gx) = self.acc(grads, *x) {
                    for o in 0..outer {
                        let base = (o * n + start) * inner;
                        for (d, s) in gx[base..base + len * inner].iter_mut().zip(&g[o * len * inner..(o + 1) * len * inner]) {
                            *d += s;
                        }
                    }
                }
            }
            Op::Permute { x, perm } => {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                let (_, back) = permute_data(g, node.value.shape(), &inv);
                self.acc_with(grads, *x, |i| back[i]);
            }
            Op::Reshape(x) => self.acc_with(grads, *x, |i| g[i]),
            Op::BroadcastLead(x) => {
                let n = self.value(*x).numel();
                if let Some(gx) = self.acc(grads, *x) {
                    for chunk in g.chunks(n.max(1)) {
                        for (d, s) in gx.iter_mut().zip(chunk) {
                            *d += s;
                        }
                    }
                }
            }
            Op::Sum(x) => {
                let g0 = g[0];
                self.acc_with(grads, *x, |_| g0);
            }
            Op::SumAxis { x, axis } => {
                let (_, n, inner) = axis_split(self.shape(*x), *axis);
                self.acc_with(grads, *x, |i| {
                    let o = i / (n * inner);
                    let r = i % inner;
                    g[o * inner + r]
                });
            }
            Op::IndexSelect { x, axis, idx } => {
                let (outer, n, inner) = axis_split(self.shape(*x), *axis);
                if let Some(gx) = self.acc(grads, *x) {
                    let m = idx.len();
                    for o in 0..outer {
                        for (j, &i) in idx.iter().enumerate() {
                            let src = &g[(o * m + j) * inner..(o * m + j + 1) * inner];
                            let base = (o * n + i) * inner;
                            for (d, s) in gx[base..base + inner].iter_mut().zip(src) {
                                *d += s;
                            }
                        }
                    }
                }
            }
            Op::ReverseGrad { x, scale } => self.acc_with(grads, *x, |i| scale * g[i]),
            Op::Bce { logit, target } => {
                let z = self.value(*logit).data();
                let t = target.data();
                let n = z.len() as f64;
                let g0 = g[0];
                self.acc_with(grads, *logit, |i| g0 * (sigmoid(z[i]) - t[i]) / n);
            }
            Op::RowNormalize { x, scale } => {
                let d = *node.value.shape().last().unwrap();
                let xv = self.value(*x).data();
                if let Some(gx) = self.acc(grads, *x) {
                    for r in 0..xv.len() / d {
                        let row = &xv[r * d..(r + 1) * d];
                        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                        if norm == 0.0 {
                            continue;
                        }
                        let gr = &g[r * d..(r + 1) * d];
                        let dot: f64 = row.iter().zip(gr).map(|(a, b)| a * b).sum::<f64>() / (norm * norm);
                        for j in 0..d {
                            gx[r * d + j] += scale / norm * (gr[j] - row[j] * dot);
                        }
                    }
                }
            }
            Op::PairwiseSqDist(x) => {
                let s = self.shape(*x);
                let (n, d) = (s[0], s[1]);
                let xv = self.value(*x).data();
                if let Some(gx) = self.acc(grads, *x) {
                    for i in 0..n {
                        for j in 0..n {
                            if i == j {
                                continue;
                            }
                            let w = 2.0 * (g[i * n + j] + g[j * n + i]);
                            for c in 0..d {
                                gx[i * d + c] += w * (xv[i * d + c] - xv[j * d + c]);
                            }
                        }
                    }
                }
            }
        }
    }
}

fn conv_out_len(len: usize, k: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = len + 2 * padding;
    if padded < k {
        return None;
    }
    Some((padded - k) / stride + 1)
}

#[allow(clippy::too_many_arguments)]
fn im2col(
    x: &[f64],
    batch: usize,
    len: usize,
    cin: usize,
    k: usize,
    stride: usize,
    padding: usize,
    out_len: usize,
) -> Vec<f64> {
    let mut cols = vec![0.0; batch * out_len * k * cin];
    for b in 0..batch {
        for l in 0..out_len {
            let row = &mut cols[(b * out_len + l) * k * cin..(b * out_len + l + 1) * k * cin];
            for j in 0..k {
                let src = (l * stride + j) as isize - padding as isize;
                if src < 0 || src as usize >= len {
                    continue;
                }
                let s = (b * len + src as usize) * cin;
                row[j * cin..(j + 1) * cin].copy_from_slice(&x[s..s + cin]);
            }
        }
    }
    cols
}

#[allow(clippy::too_many_arguments)]
fn col2im(
    cols: &[f64],
    gx: &mut [f64],
    batch: usize,
    len: usize,
    cin: usize,
    k: usize,
    stride: usize,
    padding: usize,
    out_len: usize,
) {
    for b in 0..batch {
        for l in 0..out_len {
            let row = &cols[(b * out_len + l) * k * cin..(b * out_len + l + 1) * k * cin];
            for j in 0..k {
                let src = (l * stride + j) as isize - padding as isize;
                if src < 0 || src as usize >= len {
                    continue;
                }
                let s = (b * len + src as usize) * cin;
                for (d, v) in gx[s..s + cin].iter_mut().zip(&row[j * cin..(j + 1) * cin]) {
                    *d += v;
                }
            }
        }
    }
}
