// Wengert tape: every forward op appends a node holding its value and the
// ids of its inputs. `backward` walks the nodes in reverse, so each node's
// gradient is complete before it is propagated to its inputs.

use crate::error::{shape_err, NumError, Result};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Shift(Var),
    AddBias(Var, Var),
    MatMul(Var, Var),
    Conv2d {
        x: Var,
        w: Var,
        geom: ConvGeom,
        cols: Vec<f64>,
    },
    ConvTranspose2d {
        x: Var,
        w: Var,
        geom: ConvGeom,
    },
    Relu(Var),
    LeakyRelu(Var, f64),
    Tanh(Var),
    Sigmoid(Var),
    Softmax(Var),
    LogSoftmax(Var),
    Log(Var),
    Sqrt(Var),
    Square(Var),
    Recip(Var),
    ClampMin(Var, f64),
    Sum(Var),
    Mean(Var),
    MeanRows(Var),
    BroadcastRows(Var),
    Concat(Vec<Var>),
    Reshape(Var),
    GatherCols(Var, Vec<usize>),
    Pick(Var, Vec<usize>),
    BceWithLogits(Var, Vec<f64>),
    GlobalAvgPool(Var),
}

/// Spatial bookkeeping shared by `conv2d` and `conv_transpose2d`.
///
/// `in_*` is the side with the larger spatial extent for a strided conv
/// (the conv input, or the transposed-conv output); `out_*` the other side.
#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    n: usize,
    c_in: usize,
    c_out: usize,
    in_h: usize,
    in_w: usize,
    out_h: usize,
    out_w: usize,
    k: usize,
    stride: usize,
    pad: usize,
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// Recorded computation graph with reverse-mode differentiation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

fn rows_cols(shape: &[usize]) -> (usize, usize) {
    match shape.len() {
        0 => (1, 1),
        _ => {
            let m = *shape.last().unwrap();
            let total: usize = shape.iter().product();
            (if m == 0 { 0 } else { total / m }, m)
        }
    }
}

fn matrix_dims(shape: &[usize], what: &str) -> Result<(usize, usize)> {
    if shape.len() != 2 {
        return shape_err(format!("{what}: expected a 2-D tensor, got {shape:?}"));
    }
    Ok((shape[0], shape[1]))
}

/// C[m,n] = A[m,k] B[k,n]
pub(crate) fn gemm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
    c
}

/// C[m,n] += A[k,m]^T B[k,n]
fn gemm_at_b_acc(a: &[f64], b: &[f64], k: usize, m: usize, n: usize, c: &mut [f64]) {
    for p in 0..k {
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let av = a[p * m + i];
            if av == 0.0 {
                continue;
            }
            let crow = &mut c[i * n..(i + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// Dot product with four independent partial sums.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ca
        .remainder()
        .iter()
        .zip(cb.remainder())
        .map(|(x, y)| x * y)
        .sum();
    for (x, y) in ca.zip(cb) {
        for l in 0..4 {
            acc[l] += x[l] * y[l];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// C[m,n] += A[m,k] B[n,k]^T
fn gemm_a_bt_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, c: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            c[i * n + j] += dot(arow, brow);
        }
    }
}

/// `[n, c, area]` → `[c, n*area]`.
fn to_channel_major(x: &[f64], n: usize, c: usize, area: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for i in 0..n {
        for ch in 0..c {
            let src = &x[(i * c + ch) * area..(i * c + ch + 1) * area];
            out[ch * n * area + i * area..ch * n * area + (i + 1) * area].copy_from_slice(src);
        }
    }
    out
}

/// `[c, n*area]` → `[n, c, area]`.
fn from_channel_major(x: &[f64], n: usize, c: usize, area: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for i in 0..n {
        for ch in 0..c {
            let src = &x[ch * n * area + i * area..ch * n * area + (i + 1) * area];
            out[(i * c + ch) * area..(i * c + ch + 1) * area].copy_from_slice(src);
        }
    }
    out
}

impl ConvGeom {
    fn col_rows(&self, channels: usize) -> usize {
        channels * self.k * self.k
    }

    fn out_area(&self) -> usize {
        self.out_h * self.out_w
    }

    /// Unfold one image of `channels` planes at the large-side resolution
    /// into columns `off..off + out_h*out_w` of a `[channels*k*k, ld]` matrix.
    fn im2col(&self, x: &[f64], channels: usize, cols: &mut [f64], ld: usize, off: usize) {
        let (k, s, p) = (self.k, self.stride as isize, self.pad as isize);
        let area = self.out_area();
        for c in 0..channels {
            let plane = &x[c * self.in_h * self.in_w..(c + 1) * self.in_h * self.in_w];
            for ki in 0..k {
                for kj in 0..k {
                    let row = (c * k + ki) * k + kj;
                    let dst = &mut cols[row * ld + off..row * ld + off + area];
                    for oy in 0..self.out_h {
                        let iy = oy as isize * s - p + ki as isize;
                        for ox in 0..self.out_w {
                            let ix = ox as isize * s - p + kj as isize;
                            dst[oy * self.out_w + ox] = if iy >= 0
                                && ix >= 0
                                && (iy as usize) < self.in_h
                                && (ix as usize) < self.in_w
                            {
                                plane[iy as usize * self.in_w + ix as usize]
                            } else {
                                0.0
                            };
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of `im2col`: scatter-add columns back onto the image planes.
    fn col2im(&self, cols: &[f64], channels: usize, x: &mut [f64], ld: usize, off: usize) {
        let (k, s, p) = (self.k, self.stride as isize, self.pad as isize);
        let area = self.out_area();
        for c in 0..channels {
            let plane = &mut x[c * self.in_h * self.in_w..(c + 1) * self.in_h * self.in_w];
            for ki in 0..k {
                for kj in 0..k {
                    let row = (c * k + ki) * k + kj;
                    let src = &cols[row * ld + off..row * ld + off + area];
                    for oy in 0..self.out_h {
                        let iy = oy as isize * s - p + ki as isize;
                        if iy < 0 || iy as usize >= self.in_h {
                            continue;
                        }
                        for ox in 0..self.out_w {
                            let ix = ox as isize * s - p + kj as isize;
                            if ix < 0 || ix as usize >= self.in_w {
                                continue;
                            }
                            plane[iy as usize * self.in_w + ix as usize] +=
                                src[oy * self.out_w + ox];
                        }
                    }
                }
            }
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

    /// Leaf that receives a gradient on `backward`.
    pub fn param(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, true)
    }

    /// Leaf without gradient.
    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, false)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(NumError::NonFinite("leaf holds a non-finite value".into()));
        }
        Ok(self.push_raw(value, requires_grad, Op::Leaf))
    }

    /// Constant copy of `v`'s current value (stops gradient flow).
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.push_raw(value, false, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient accumulated by the last `backward`, if `v` was reached.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    fn push_raw(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        let id = self.nodes.len();
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var(id)
    }

    fn push(&mut self, value: Tensor, inputs: &[Var], op: Op, name: &str) -> Result<Var> {
        if !value.is_finite() {
            return Err(NumError::NonFinite(format!(
                "{name} produced a non-finite value"
            )));
        }
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if rg { op } else { Op::Leaf };
        Ok(self.push_raw(value, rg, op))
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    fn same_shape(&self, a: Var, b: Var, name: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return shape_err(format!(
                "{name}: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            ));
        }
        Ok(())
    }

    fn map(&mut self, a: Var, op: Op, name: &str, f: impl Fn(f64) -> f64) -> Result<Var> {
        let src = &self.nodes[a.0].value;
        let data = src.data().iter().map(|&x| f(x)).collect();
        let value = Tensor::new(src.shape().to_vec(), data)?;
        self.push(value, &[a], op, name)
    }

    fn zip(
        &mut self,
        a: Var,
        b: Var,
        op: Op,
        name: &str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var> {
        self.same_shape(a, b, name)?;
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        self.push(value, &[a, b], op, name)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, Op::Add(a, b), "add", |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, Op::Sub(a, b), "sub", |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, Op::Mul(a, b), "mul", |x, y| x * y)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.map(a, Op::Scale(a, c), "scale", |x| x * c)
    }

    /// Adds a constant offset; the gradient passes through unchanged.
    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        self.map(a, Op::Shift(a), "add_scalar", |x| x + c)
    }

    /// Adds `bias[c]` along axis 1 of `x` (`[n, c]` or `[n, c, h, w]`).
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 || self.shape(bias) != [shape[1]] {
            return shape_err(format!(
                "add_bias: bias {:?} does not match axis 1 of {:?}",
                self.shape(bias),
                shape
            ));
        }
        let c = shape[1];
        let inner: usize = shape[2..].iter().product();
        let b = self.data(bias);
        let data = self
            .data(x)
            .iter()
            .enumerate()
            .map(|(i, &v)| v + b[(i / inner) % c])
            .collect();
        let value = Tensor::new(shape, data)?;
        self.push(value, &[x, bias], Op::AddBias(x, bias), "add_bias")
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = matrix_dims(self.shape(a), "matmul")?;
        let (k2, n) = matrix_dims(self.shape(b), "matmul")?;
        if k != k2 {
            return shape_err(format!("matmul: inner dims {k} and {k2} differ"));
        }
        let data = gemm(self.data(a), self.data(b), m, k, n);
        let value = Tensor::new(vec![m, n], data)?;
        self.push(value, &[a, b], Op::MatMul(a, b), "matmul")
    }

    /// 2-D convolution, NCHW input, weight `[c_out, c_in, k, k]`.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 4 || ws.len() != 4 || ws[2] != ws[3] || ws[1] != xs[1] || stride == 0 {
            return shape_err(format!(
                "conv2d: input {xs:?} incompatible with weight {ws:?}"
            ));
        }
        let (n, c_in, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (c_out, k) = (ws[0], ws[2]);
        if h + 2 * pad < k || wd + 2 * pad < k {
            return shape_err("conv2d: kernel larger than padded input");
        }
        let geom = ConvGeom {
            n,
            c_in,
            c_out,
            in_h: h,
            in_w: wd,
            out_h: (h + 2 * pad - k) / stride + 1,
            out_w: (wd + 2 * pad - k) / stride + 1,
            k,
            stride,
            pad,
        };
        let rows = geom.col_rows(c_in);
        let area = geom.out_area();
        let ld = n * area;
        let mut cols = vec![0.0; rows * ld];
        for i in 0..n {
            let img = &self.data(x)[i * c_in * h * wd..(i + 1) * c_in * h * wd];
            geom.im2col(img, c_in, &mut cols, ld, i * area);
        }
        let out = from_channel_major(&gemm(self.data(w), &cols, c_out, rows, ld), n, c_out, area);
        let value = Tensor::new(vec![n, c_out, geom.out_h, geom.out_w], out)?;
        self.push(value, &[x, w], Op::Conv2d { x, w, geom, cols }, "conv2d")
    }

    /// Transposed 2-D convolution, NCHW input, weight `[c_in, c_out, k, k]`.
    /// Output side is `(h - 1) * stride - 2 * pad + k`.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 4 || ws.len() != 4 || ws[2] != ws[3] || ws[0] != xs[1] || stride == 0 {
            return shape_err(format!(
                "conv_transpose2d: input {xs:?} incompatible with weight {ws:?}"
            ));
        }
        let (n, c_in, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (c_out, k) = (ws[1], ws[2]);
        if (h - 1) * stride + k < 2 * pad + 1 {
            return shape_err("conv_transpose2d: padding leaves no output");
        }
        let oh = (h - 1) * stride + k - 2 * pad;
        let ow = (wd - 1) * stride + k - 2 * pad;
        let geom = ConvGeom {
            n,
            c_in,
            c_out,
            in_h: oh,
            in_w: ow,
            out_h: h,
            out_w: wd,
            k,
            stride,
            pad,
        };
        let rows = geom.col_rows(c_out);
        let area = h * wd;
        // W viewed as [c_in, c_out*k*k]; columns = W^T x.
        let ld = n * area;
        let xm = to_channel_major(self.data(x), n, c_in, area);
        let mut cols = vec![0.0; rows * ld];
        gemm_at_b_acc(self.data(w), &xm, c_in, rows, ld, &mut cols);
        let mut out = vec![0.0; n * c_out * oh * ow];
        for i in 0..n {
            let big = c_out * oh * ow;
            geom.col2im(&cols, c_out, &mut out[i * big..(i + 1) * big], ld, i * area);
        }
        let value = Tensor::new(vec![n, c_out, oh, ow], out)?;
        self.push(
            value,
            &[x, w],
            Op::ConvTranspose2d { x, w, geom },
            "conv_transpose2d",
        )
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.map(a, Op::Relu(a), "relu", |x| x.max(0.0))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Result<Var> {
        self.map(a, Op::LeakyRelu(a, slope), "leaky_relu", |x| {
            if x > 0.0 {
                x
            } else {
                slope * x
            }
        })
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.map(a, Op::Tanh(a), "tanh", f64::tanh)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.map(a, Op::Sigmoid(a), "sigmoid", sigmoid)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let (rows, m) = rows_cols(&shape);
        let mut out = self.data(a).to_vec();
        for r in 0..rows {
            softmax_in_place(&mut out[r * m..(r + 1) * m]);
        }
        let value = Tensor::new(shape, out)?;
        self.push(value, &[a], Op::Softmax(a), "softmax")
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let (rows, m) = rows_cols(&shape);
        let mut out = self.data(a).to_vec();
        for r in 0..rows {
            let row = &mut out[r * m..(r + 1) * m];
            let lse = log_sum_exp(row);
            row.iter_mut().for_each(|v| *v -= lse);
        }
        let value = Tensor::new(shape, out)?;
        self.push(value, &[a], Op::LogSoftmax(a), "log_softmax")
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.map(a, Op::Log(a), "log", f64::ln)
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        self.map(a, Op::Sqrt(a), "sqrt", f64::sqrt)
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.map(a, Op::Square(a), "square", |x| x * x)
    }

    pub fn recip(&mut self, a: Var) -> Result<Var> {
        self.map(a, Op::Recip(a), "recip", |x| 1.0 / x)
    }

    /// `max(x, floor)` elementwise; no gradient where the floor is active.
    pub fn clamp_min(&mut self, a: Var, floor: f64) -> Result<Var> {
        self.map(a, Op::ClampMin(a, floor), "clamp_min", |x| x.max(floor))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.data(a).iter().sum();
        self.push(Tensor::scalar(s), &[a], Op::Sum(a), "sum")
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.data(a).len();
        if n == 0 {
            return shape_err("mean of an empty tensor");
        }
        let s: f64 = self.data(a).iter().sum();
        self.push(Tensor::scalar(s / n as f64), &[a], Op::Mean(a), "mean")
    }

    /// Column means of a `[n, m]` matrix, as `[1, m]`.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let (n, m) = matrix_dims(self.shape(a), "mean_rows")?;
        if n == 0 {
            return shape_err("mean_rows of an empty batch");
        }
        let mut out = vec![0.0; m];
        for row in self.data(a).chunks(m) {
            out.iter_mut().zip(row).for_each(|(o, v)| *o += v);
        }
        out.iter_mut().for_each(|o| *o /= n as f64);
        let value = Tensor::new(vec![1, m], out)?;
        self.push(value, &[a], Op::MeanRows(a), "mean_rows")
    }

    /// Repeat a `[1, m]` row `n` times.
    pub fn broadcast_rows(&mut self, a: Var, n: usize) -> Result<Var> {
        let (r, m) = matrix_dims(self.shape(a), "broadcast_rows")?;
        if r != 1 {
            return shape_err(format!("broadcast_rows: expected one row, got {r}"));
        }
        let row = self.data(a).to_vec();
        let data = row.iter().copied().cycle().take(n * m).collect();
        let value = Tensor::new(vec![n, m], data)?;
        self.push(value, &[a], Op::BroadcastRows(a), "broadcast_rows")
    }

    /// Concatenate `[n, m_i]` matrices along axis 1.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return shape_err("concat of nothing");
        }
        let n = matrix_dims(self.shape(parts[0]), "concat")?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, m) = matrix_dims(self.shape(p), "concat")?;
            if r != n {
                return shape_err(format!("concat: row counts {n} and {r} differ"));
            }
            widths.push(m);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(n * total);
        for i in 0..n {
            for (&p, &m) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.data(p)[i * m..(i + 1) * m]);
            }
        }
        let value = Tensor::new(vec![n, total], out)?;
        self.push(value, parts, Op::Concat(parts.to_vec()), "concat")
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let value = self.nodes[a.0].value.clone().reshaped(shape)?;
        self.push(value, &[a], Op::Reshape(a), "reshape")
    }

    /// Select columns `idx` of a `[n, m]` matrix.
    pub fn gather_cols(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let (n, m) = matrix_dims(self.shape(a), "gather_cols")?;
        if let Some(&bad) = idx.iter().find(|&&j| j >= m) {
            return shape_err(format!("gather_cols: column {bad} out of range {m}"));
        }
        let src = self.data(a);
        let mut out = Vec::with_capacity(n * idx.len());
        for i in 0..n {
            out.extend(idx.iter().map(|&j| src[i * m + j]));
        }
        let value = Tensor::new(vec![n, idx.len()], out)?;
        self.push(value, &[a], Op::GatherCols(a, idx.to_vec()), "gather_cols")
    }

    /// One entry per row: `out[i] = a[i, idx[i]]`.
    pub fn pick(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let (n, m) = matrix_dims(self.shape(a), "pick")?;
        if idx.len() != n {
            return shape_err(format!("pick: {} indices for {n} rows", idx.len()));
        }
        if let Some(&bad) = idx.iter().find(|&&j| j >= m) {
            return shape_err(format!("pick: column {bad} out of range {m}"));
        }
        let src = self.data(a);
        let out = idx
            .iter()
            .enumerate()
            .map(|(i, &j)| src[i * m + j])
            .collect();
        self.push(Tensor::vector(out), &[a], Op::Pick(a, idx.to_vec()), "pick")
    }

    /// Mean binary cross-entropy of logits `a` against targets in `[0, 1]`.
    pub fn bce_with_logits(&mut self, a: Var, targets: &[f64]) -> Result<Var> {
        let x = self.data(a);
        if x.len() != targets.len() || x.is_empty() {
            return shape_err(format!(
                "bce_with_logits: {} logits for {} targets",
                x.len(),
                targets.len()
            ));
        }
        let total: f64 = x
            .iter()
            .zip(targets)
            .map(|(&z, &t)| z.max(0.0) - z * t + (-z.abs()).exp().ln_1p())
            .sum();
        let value = Tensor::scalar(total / x.len() as f64);
        self.push(
            value,
            &[a],
            Op::BceWithLogits(a, targets.to_vec()),
            "bce_with_logits",
        )
    }

    /// Mean over the spatial axes of a `[n, c, h, w]` tensor, giving `[n, c]`.
    pub fn global_avg_pool(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 4 {
            return shape_err(format!("global_avg_pool: expected NCHW, got {s:?}"));
        }
        let area = s[2] * s[3];
        let out = self
            .data(a)
            .chunks(area)
            .map(|c| c.iter().sum::<f64>() / area as f64)
            .collect();
        let value = Tensor::new(vec![s[0], s[1]], out)?;
        self.push(value, &[a], Op::GlobalAvgPool(a), "global_avg_pool")
    }

    /// Reverse sweep from a scalar `loss`. Gradients from earlier sweeps are
    /// discarded.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(NumError::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.grads = vec![None; self.nodes.len()];
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let Some(g) = self.grads[id].take() else {
                continue;
            };
            self.propagate(id, &g);
            self.grads[id] = Some(g);
        }
        Ok(())
    }

    fn acc(&mut self, v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let n = self.nodes[v.0].value.len();
        let slot = self.grads[v.0].get_or_insert_with(|| vec![0.0; n]);
        f(slot);
    }

    fn acc_each(&mut self, v: Var, f: impl Fn(usize) -> f64) {
        self.acc(v, |g| {
            for (i, gi) in g.iter_mut().enumerate() {
                *gi += f(i);
            }
        });
    }

    fn propagate(&mut self, id: usize, g: &[f64]) {
        // Values are needed while grads are mutated; the borrow checker
        // cannot see that these touch different vectors, so take the op out.
        let op = std::mem::replace(&mut self.nodes[id].op, Op::Leaf);
        let out = match op {
            Op::Tanh(_)
            | Op::Sigmoid(_)
            | Op::Softmax(_)
            | Op::LogSoftmax(_)
            | Op::Sqrt(_)
            | Op::Recip(_) => self.nodes[id].value.data().to_vec(),
            _ => Vec::new(),
        };
        match &op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc_each(*a, |i| g[i]);
                self.acc_each(*b, |i| g[i]);
            }
            Op::Sub(a, b) => {
                self.acc_each(*a, |i| g[i]);
                self.acc_each(*b, |i| -g[i]);
            }
            Op::Mul(a, b) => {
                let av = self.data(*a).to_vec();
                let bv = self.data(*b).to_vec();
                self.acc_each(*a, |i| g[i] * bv[i]);
                self.acc_each(*b, |i| g[i] * av[i]);
            }
            Op::Scale(a, c) => self.acc_each(*a, |i| g[i] * c),
            Op::Shift(a) | Op::Reshape(a) => self.acc_each(*a, |i| g[i]),
            Op::AddBias(x, b) => {
                let s = self.shape(*x).to_vec();
                let c = s[1];
                let inner: usize = s[2..].iter().product();
                self.acc_each(*x, |i| g[i]);
                self.acc(*b, |gb| {
                    for (i, gi) in g.iter().enumerate() {
                        gb[(i / inner) % c] += gi;
                    }
                });
            }
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                let av = self.data(*a).to_vec();
                let bv = self.data(*b).to_vec();
                self.acc(*a, |ga| gemm_a_bt_acc(g, &bv, m, n, k, ga));
                self.acc(*b, |gb| gemm_at_b_acc(&av, g, m, k, n, gb));
            }
            Op::Conv2d { x, w, geom, cols } => {
                let rows = geom.col_rows(geom.c_in);
                let area = geom.out_area();
                let img = geom.c_in * geom.in_h * geom.in_w;
                let ld = geom.n * area;
                let gm = to_channel_major(g, geom.n, geom.c_out, area);
                self.acc(*w, |gw| gemm_a_bt_acc(&gm, cols, geom.c_out, ld, rows, gw));
                if self.nodes[x.0].requires_grad {
                    let mut dcols = vec![0.0; rows * ld];
                    gemm_at_b_acc(self.data(*w), &gm, geom.c_out, rows, ld, &mut dcols);
                    self.acc(*x, |gx| {
                        for i in 0..geom.n {
                            geom.col2im(
                                &dcols,
                                geom.c_in,
                                &mut gx[i * img..(i + 1) * img],
                                ld,
                                i * area,
                            );
                        }
                    });
                }
            }
            Op::ConvTranspose2d { x, w, geom } => {
                let rows = geom.col_rows(geom.c_out);
                let area = geom.out_area();
                let big = geom.c_out * geom.in_h * geom.in_w;
                let ld = geom.n * area;
                let mut dcols = vec![0.0; rows * ld];
                for i in 0..geom.n {
                    geom.im2col(
                        &g[i * big..(i + 1) * big],
                        geom.c_out,
                        &mut dcols,
                        ld,
                        i * area,
                    );
                }
                if self.nodes[x.0].requires_grad {
                    let prod = gemm(self.data(*w), &dcols, geom.c_in, rows, ld);
                    let gxm = from_channel_major(&prod, geom.n, geom.c_in, area);
                    self.acc_each(*x, |i| gxm[i]);
                }
                if self.nodes[w.0].requires_grad {
                    let xm = to_channel_major(self.data(*x), geom.n, geom.c_in, area);
                    self.acc(*w, |gw| gemm_a_bt_acc(&xm, &dcols, geom.c_in, ld, rows, gw));
                }
            }
            Op::Relu(a) => {
                let av = self.data(*a).to_vec();
                self.acc_each(*a, |i| if av[i] > 0.0 { g[i] } else { 0.0 });
            }
            Op::LeakyRelu(a, slope) => {
                let av = self.data(*a).to_vec();
                self.acc_each(*a, |i| if av[i] > 0.0 { g[i] } else { slope * g[i] });
            }
            Op::Tanh(a) => self.acc_each(*a, |i| g[i] * (1.0 - out[i] * out[i])),
            Op::Sigmoid(a) => self.acc_each(*a, |i| g[i] * out[i] * (1.0 - out[i])),
            Op::Softmax(a) => {
                let (rows, m) = rows_cols(self.shape(*a));
                let mut dx = vec![0.0; out.len()];
                for r in 0..rows {
                    let y = &out[r * m..(r + 1) * m];
                    let gy = &g[r * m..(r + 1) * m];
                    let dot: f64 = y.iter().zip(gy).map(|(a, b)| a * b).sum();
                    for j in 0..m {
                        dx[r * m + j] = y[j] * (gy[j] - dot);
                    }
                }
                self.acc_each(*a, |i| dx[i]);
            }
            Op::LogSoftmax(a) => {
                let (rows, m) = rows_cols(self.shape(*a));
                let mut dx = vec![0.0; out.len()];
                for r in 0..rows {
                    let gs: f64 = g[r * m..(r + 1) * m].iter().sum();
                    for j in 0..m {
                        dx[r * m + j] = g[r * m + j] - out[r * m + j].exp() * gs;
                    }
                }
                self.acc_each(*a, |i| dx[i]);
            }
            Op::Log(a) => {
                let av = self.data(*a).to_vec();
                self.acc_each(*a, |i| g[i] / av[i]);
            }
            Op::Sqrt(a) => self.acc_each(*a, |i| g[i] * 0.5 / out[i]),
            Op::Square(a) => {
                let av = self.data(*a).to_vec();
                self.acc_each(*a, |i| 2.0 * av[i] * g[i]);
            }
            Op::Recip(a) => self.acc_each(*a, |i| -g[i] * out[i] * out[i]),
            Op::ClampMin(a, floor) => {
                let av = self.data(*a).to_vec();
                self.acc_each(*a, |i| if av[i] > *floor { g[i] } else { 0.0 });
            }
            Op::Sum(a) => self.acc_each(*a, |_| g[0]),
            Op::Mean(a) => {
                let n = self.data(*a).len() as f64;
                self.acc_each(*a, |_| g[0] / n);
            }
            Op::MeanRows(a) => {
                let n = self.shape(*a)[0] as f64;
                let m = self.shape(*a)[1];
                self.acc_each(*a, |i| g[i % m] / n);
            }
            Op::BroadcastRows(a) => {
                let m = self.shape(*a)[1];
                self.acc(*a, |ga| {
                    for (i, gi) in g.iter().enumerate() {
                        ga[i % m] += gi;
                    }
                });
            }
            Op::Concat(parts) => {
                let n = self.nodes[id].value.shape()[0];
                let total = self.nodes[id].value.shape()[1];
                let mut offset = 0;
                for &p in parts {
                    let m = self.shape(p)[1];
                    self.acc(p, |gp| {
                        for i in 0..n {
                            for j in 0..m {
                                gp[i * m + j] += g[i * total + offset + j];
                            }
                        }
                    });
                    offset += m;
                }
            }
            Op::GatherCols(a, idx) => {
                let m = self.shape(*a)[1];
                let k = idx.len();
                self.acc(*a, |ga| {
                    for (r, grow) in g.chunks(k.max(1)).enumerate() {
                        for (&j, gv) in idx.iter().zip(grow) {
                            ga[r * m + j] += gv;
                        }
                    }
                });
            }
            Op::Pick(a, idx) => {
                let m = self.shape(*a)[1];
                self.acc(*a, |ga| {
                    for (i, &j) in idx.iter().enumerate() {
                        ga[i * m + j] += g[i];
                    }
                });
            }
            Op::BceWithLogits(a, t) => {
                let av = self.data(*a).to_vec();
                let n = av.len() as f64;
                self.acc_each(*a, |i| g[0] * (sigmoid(av[i]) - t[i]) / n);
            }
            Op::GlobalAvgPool(a) => {
                let s = self.shape(*a);
                let area = s[2] * s[3];
                self.acc_each(*a, |i| g[i / area] / area as f64);
            }
        }
        self.nodes[id].op = op;
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    row.iter_mut().for_each(|v| *v = (*v - max).exp());
    let s: f64 = row.iter().sum();
    row.iter_mut().for_each(|v| *v /= s);
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn elementwise_add() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2], &[1.0, 2.0])).unwrap();
        let b = tape.constant(t(&[2], &[3.0, 4.0])).unwrap();
        let c = tape.add(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[4.0, 6.0]);
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2], &[0.0, 0.0])).unwrap();
        let s = tape.softmax(a).unwrap();
        assert_eq!(tape.value(s).data(), &[0.5, 0.5]);
    }

    #[test]
    fn identity_matmul() {
        let mut tape = Tape::new();
        let i = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0])).unwrap();
        let m = tape.constant(t(&[2, 2], &[5.0, 6.0, 7.0, 8.0])).unwrap();
        let p = tape.matmul(i, m).unwrap();
        assert_eq!(tape.value(p).data(), &[5.0, 6.0, 7.0, 8.0]);
    }

    #[test]
    fn shape_mismatch_is_a_dimension_error() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2], &[1.0, 2.0])).unwrap();
        let b = tape.constant(t(&[3], &[1.0, 2.0, 3.0])).unwrap();
        assert!(matches!(tape.add(a, b), Err(NumError::Shape(_))));
        let m = tape.constant(t(&[2, 3], &[0.0; 6])).unwrap();
        assert!(matches!(tape.matmul(m, m), Err(NumError::Shape(_))));
    }

    #[test]
    fn non_finite_output_is_a_numeric_error() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[1], &[0.0])).unwrap();
        assert!(matches!(tape.log(a), Err(NumError::NonFinite(_))));
        assert!(matches!(tape.recip(a), Err(NumError::NonFinite(_))));
    }

    #[test]
    fn sum_of_squares_gradient() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[3], &[1.0, 2.0, 3.0])).unwrap();
        let sq = tape.square(x).unwrap();
        let loss = tape.sum(sq).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn sigmoid_gradient_at_zero() {
        let mut tape = Tape::new();
        let w = tape.param(t(&[1, 1], &[0.0])).unwrap();
        let x = tape.constant(t(&[1, 1], &[1.0])).unwrap();
        let z = tape.matmul(w, x).unwrap();
        let s = tape.sigmoid(z).unwrap();
        let loss = tape.sum(s).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(w).unwrap(), &[0.25]);
    }

    #[test]
    fn backward_requires_scalar() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[2], &[1.0, 2.0])).unwrap();
        let y = tape.square(x).unwrap();
        assert!(matches!(tape.backward(y), Err(NumError::Usage(_))));
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[2], &[1.0, 2.0])).unwrap();
        let c = tape.constant(t(&[2], &[5.0, 5.0])).unwrap();
        let y = tape.mul(x, c).unwrap();
        let d = tape.detach(y);
        let z = tape.add(y, d).unwrap();
        let loss = tape.sum(z).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[5.0, 5.0]);
        assert!(tape.grad(c).is_none());
    }

    #[test]
    fn conv_shapes() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(vec![2, 3, 8, 8])).unwrap();
        let w = tape.constant(Tensor::zeros(vec![5, 3, 3, 3])).unwrap();
        let y = tape.conv2d(x, w, 2, 1).unwrap();
        assert_eq!(tape.shape(y), &[2, 5, 4, 4]);
        let wt = tape.constant(Tensor::zeros(vec![5, 4, 4, 4])).unwrap();
        let z = tape.conv_transpose2d(y, wt, 2, 1).unwrap();
        assert_eq!(tape.shape(z), &[2, 4, 8, 8]);
    }

    #[test]
    fn conv2d_matches_direct_sum() {
        let mut tape = Tape::new();
        let xs: Vec<f64> = (0..16).map(|v| v as f64).collect();
        let x = tape.constant(t(&[1, 1, 4, 4], &xs)).unwrap();
        let w = tape
            .constant(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]))
            .unwrap();
        let y = tape.conv2d(x, w, 2, 0).unwrap();
        // top-left window [0 1; 4 5]
        assert_eq!(tape.value(y).data()[0], 0.0 + 2.0 + 12.0 + 20.0);
        assert_eq!(tape.shape(y), &[1, 1, 2, 2]);
    }

    #[test]
    fn transposed_conv_is_adjoint_of_conv() {
        // <conv(x), y> == <x, conv_t(y)> with the same kernel.
        let xs: Vec<f64> = (0..2 * 6 * 6)
            .map(|v| ((v * 7 % 11) as f64) - 5.0)
            .collect();
        let ys: Vec<f64> = (0..3 * 3 * 3)
            .map(|v| ((v * 5 % 13) as f64) - 6.0)
            .collect();
        let ws: Vec<f64> = (0..3 * 2 * 4 * 4)
            .map(|v| ((v * 3 % 7) as f64) - 3.0)
            .collect();
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 2, 6, 6], &xs)).unwrap();
        let w = tape.constant(t(&[3, 2, 4, 4], &ws)).unwrap();
        let cx = tape.conv2d(x, w, 2, 1).unwrap();
        assert_eq!(tape.shape(cx), &[1, 3, 3, 3]);
        let lhs: f64 = tape
            .value(cx)
            .data()
            .iter()
            .zip(&ys)
            .map(|(a, b)| a * b)
            .sum();
        let y = tape.constant(t(&[1, 3, 3, 3], &ys)).unwrap();
        let ty = tape.conv_transpose2d(y, w, 2, 1).unwrap();
        assert_eq!(tape.shape(ty), &[1, 2, 6, 6]);
        let rhs: f64 = tape
            .value(ty)
            .data()
            .iter()
            .zip(&xs)
            .map(|(a, b)| a * b)
            .sum();
        assert!((lhs - rhs).abs() < 1e-9, "{lhs} vs {rhs}");
    }

    #[test]
    fn bce_matches_naive_formula() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[3], &[-2.0, 0.5, 3.0])).unwrap();
        let l = tape.bce_with_logits(x, &[0.0, 1.0, 1.0]).unwrap();
        let naive = -((1.0 - sigmoid(-2.0)).ln() + sigmoid(0.5).ln() + sigmoid(3.0).ln()) / 3.0;
        assert!((tape.value(l).item().unwrap() - naive).abs() < 1e-12);
    }
}
