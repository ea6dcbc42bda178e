//! Dense tensors with a small reverse-mode tape.
//!
//! The tape only knows the operations the retrieval model is built from:
//! convolution, ReLU, matmul, softmax, normalization, dot products,
//! softplus, soft cross-entropy and the fused VLAD residual aggregation.
//! Values are computed eagerly when an op is recorded, so mining code can
//! read similarities off the graph before deciding what enters the loss.

use crate::error::{shape_err, Error, Result};
use crate::vlad;

/// Floor applied inside `log` for cross-entropy.
pub const LOG_FLOOR: f64 = 1e-30;
/// Norms at or below this are treated as degenerate.
pub const NORM_EPS: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if shape.contains(&0) {
            return shape_err(format!("zero extent in shape {shape:?}"));
        }
        if n != data.len() {
            return shape_err(format!(
                "shape {shape:?} needs {n} elements, got {}",
                data.len()
            ));
        }
        Ok(Self {
            shape,
            data,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
            grad: None,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
            grad: None,
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
            grad: None,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    fn accumulate_grad(&mut self, g: &[f64]) {
        match &mut self.grad {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            None => self.grad = Some(g.to_vec()),
        }
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        self.data[0]
    }
}

// ---------------------------------------------------------------------------
// Plain (tape-free) numerics shared by inference and the tape ops.

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

pub fn l2_normalize(v: &[f64]) -> Result<Vec<f64>> {
    let n = norm(v);
    if !(n > NORM_EPS) {
        return Err(Error::Degenerate(format!("vector norm {n:e} too small")));
    }
    Ok(v.iter().map(|x| x / n).collect())
}

/// Temperature softmax with max-subtraction.
pub fn softmax_temp(v: &[f64], tau: f64) -> Result<Vec<f64>> {
    if v.is_empty() {
        return shape_err("softmax of empty vector");
    }
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::Parameter(format!("temperature must be > 0, got {tau}")));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::Evaluation("non-finite softmax input".into()));
    }
    Ok(softmax_unchecked(v, tau))
}

fn softmax_unchecked(v: &[f64], tau: f64) -> Vec<f64> {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = v.iter().map(|x| ((x - max) / tau).exp()).collect();
    let z: f64 = out.iter().sum();
    out.iter_mut().for_each(|x| *x /= z);
    out
}

/// `-sum_i target(i) * log(probs(i))`.
pub fn soft_cross_entropy(probs: &[f64], target: &[f64]) -> Result<f64> {
    if probs.len() != target.len() {
        return shape_err(format!(
            "cross-entropy length mismatch: {} vs {}",
            probs.len(),
            target.len()
        ));
    }
    Ok(-probs
        .iter()
        .zip(target)
        .map(|(p, t)| t * p.max(LOG_FLOOR).ln())
        .sum::<f64>())
}

/// Shannon entropy in nats.
pub fn entropy(p: &[f64]) -> f64 {
    -p.iter()
        .filter(|&&x| x > 0.0)
        .map(|x| x * x.ln())
        .sum::<f64>()
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Half-open spatial window `[top, bottom) x [left, right)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Window {
    pub top: usize,
    pub bottom: usize,
    pub left: usize,
    pub right: usize,
}

impl Window {
    pub fn full(height: usize, width: usize) -> Self {
        Self {
            top: 0,
            bottom: height,
            left: 0,
            right: width,
        }
    }

    pub fn height(&self) -> usize {
        self.bottom - self.top
    }

    pub fn width(&self) -> usize {
        self.right - self.left
    }

    pub fn area(&self) -> usize {
        self.height() * self.width()
    }
}

/// Output extent of a 3x3, padding-1 convolution.
pub fn conv_out_extent(extent: usize, stride: usize) -> usize {
    (extent - 1) / stride + 1
}

/// 3x3 convolution with zero padding 1. `input` is `[C,H,W]`, `weight` is
/// `[O,C,3,3]`. Returns `[O,Ho,Wo]` data.
pub fn conv2d_forward(
    input: &[f64],
    (c_in, h, w): (usize, usize, usize),
    weight: &[f64],
    bias: &[f64],
    stride: usize,
) -> (Vec<f64>, usize, usize) {
    let c_out = bias.len();
    let ho = conv_out_extent(h, stride);
    let wo = conv_out_extent(w, stride);
    let mut out = vec![0.0; c_out * ho * wo];
    for o in 0..c_out {
        let plane = &mut out[o * ho * wo..(o + 1) * ho * wo];
        plane.iter_mut().for_each(|x| *x = bias[o]);
        for c in 0..c_in {
            let src = &input[c * h * w..(c + 1) * h * w];
            for ky in 0..3 {
                for kx in 0..3 {
                    let wv = weight[((o * c_in + c) * 3 + ky) * 3 + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    for oy in 0..ho {
                        let iy = (oy * stride + ky) as isize - 1;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let row = &src[iy as usize * w..(iy as usize + 1) * w];
                        let dst = &mut plane[oy * wo..(oy + 1) * wo];
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = (ox * stride + kx) as isize - 1;
                            if ix >= 0 && ix < w as isize {
                                *d += wv * row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    (out, ho, wo)
}

#[allow(clippy::too_many_arguments)]
fn conv2d_backward(
    input: &[f64],
    (c_in, h, w): (usize, usize, usize),
    weight: &[f64],
    c_out: usize,
    stride: usize,
    gout: &[f64],
    want_input: bool,
    want_params: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>, Option<Vec<f64>>) {
    let ho = conv_out_extent(h, stride);
    let wo = conv_out_extent(w, stride);
    let mut gin = want_input.then(|| vec![0.0; input.len()]);
    let mut gw = want_params.then(|| vec![0.0; weight.len()]);
    let gb = want_params.then(|| {
        (0..c_out)
            .map(|o| gout[o * ho * wo..(o + 1) * ho * wo].iter().sum())
            .collect()
    });
    for o in 0..c_out {
        let gplane = &gout[o * ho * wo..(o + 1) * ho * wo];
        for c in 0..c_in {
            let src = &input[c * h * w..(c + 1) * h * w];
            for ky in 0..3 {
                for kx in 0..3 {
                    let widx = ((o * c_in + c) * 3 + ky) * 3 + kx;
                    let wv = weight[widx];
                    let mut acc = 0.0;
                    for oy in 0..ho {
                        let iy = (oy * stride + ky) as isize - 1;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let iy = iy as usize;
                        for ox in 0..wo {
                            let ix = (ox * stride + kx) as isize - 1;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let g = gplane[oy * wo + ox];
                            let idx = iy * w + ix as usize;
                            acc += g * src[idx];
                            if let Some(gi) = gin.as_mut() {
                                gi[c * h * w + idx] += wv * g;
                            }
                        }
                    }
                    if let Some(gw) = gw.as_mut() {
                        gw[widx] += acc;
                    }
                }
            }
        }
    }
    (gin, gw, gb)
}

fn matmul_plain(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            orow.iter_mut().zip(brow).for_each(|(o, bv)| *o += av * bv);
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Tape

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Var,
        stride: usize,
    },
    Relu(Var),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Scale(Var, f64),
    Softmax {
        input: Var,
        tau: f64,
    },
    Normalize(Var),
    RowNormalize(Var),
    Dot(Var, Var),
    Concat(Vec<Var>),
    Softplus(Var),
    Sum(Var),
    CrossEntropy {
        probs: Var,
        target: Vec<f64>,
    },
    Vlad {
        fm: Var,
        window: Window,
        weight: Var,
        bias: Var,
        centers: Var,
        assign: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    tracked: bool,
}

/// Reverse-mode tape. Nodes are appended in evaluation order and the
/// backward pass walks them in reverse, so gradient accumulation order is
/// fixed by construction.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
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

    /// Leaf that receives a gradient.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn item(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    pub fn is_tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    fn push(&mut self, mut value: Tensor, op: Op, tracked: bool) -> Var {
        value.grad = None;
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn tracked_any(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].tracked)
    }

    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var, stride: usize) -> Result<Var> {
        let x = self.value(input);
        let wt = self.value(weight);
        let b = self.value(bias);
        if x.shape.len() != 3 || wt.shape.len() != 4 || b.shape.len() != 1 {
            return shape_err("conv2d expects [C,H,W], [O,C,3,3], [O]");
        }
        let (c, h, w) = (x.shape[0], x.shape[1], x.shape[2]);
        let o = wt.shape[0];
        if wt.shape[1] != c || wt.shape[2] != 3 || wt.shape[3] != 3 || b.shape[0] != o {
            return shape_err(format!(
                "conv2d kernel {:?} incompatible with input {:?}",
                wt.shape, x.shape
            ));
        }
        if stride == 0 {
            return Err(Error::Parameter("stride must be positive".into()));
        }
        let (out, ho, wo) = conv2d_forward(&x.data, (c, h, w), &wt.data, &b.data, stride);
        let tracked = self.tracked_any(&[input, weight, bias]);
        Ok(self.push(
            Tensor {
                shape: vec![o, ho, wo],
                data: out,
                grad: None,
            },
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
            },
            tracked,
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let out = Tensor {
            shape: t.shape.clone(),
            data: t.data.iter().map(|v| v.max(0.0)).collect(),
            grad: None,
        };
        let tracked = self.nodes[x.0].tracked;
        self.push(out, Op::Relu(x), tracked)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape.len() != 2 || tb.shape.len() != 2 || ta.shape[1] != tb.shape[0] {
            return shape_err(format!("matmul {:?} x {:?}", ta.shape, tb.shape));
        }
        let (m, k, n) = (ta.shape[0], ta.shape[1], tb.shape[1]);
        let out = matmul_plain(&ta.data, &tb.data, m, k, n);
        let tracked = self.tracked_any(&[a, b]);
        Ok(self.push(
            Tensor {
                shape: vec![m, n],
                data: out,
                grad: None,
            },
            Op::MatMul(a, b),
            tracked,
        ))
    }

    fn same_shape(&self, a: Var, b: Var) -> Result<()> {
        if self.value(a).shape != self.value(b).shape {
            return shape_err(format!(
                "shape mismatch {:?} vs {:?}",
                self.value(a).shape,
                self.value(b).shape
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let out = Tensor {
            shape: ta.shape.clone(),
            data: ta.data.iter().zip(&tb.data).map(|(x, y)| x + y).collect(),
            grad: None,
        };
        let tracked = self.tracked_any(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), tracked))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let out = Tensor {
            shape: ta.shape.clone(),
            data: ta.data.iter().zip(&tb.data).map(|(x, y)| x - y).collect(),
            grad: None,
        };
        let tracked = self.tracked_any(&[a, b]);
        Ok(self.push(out, Op::Sub(a, b), tracked))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let t = self.value(x);
        let out = Tensor {
            shape: t.shape.clone(),
            data: t.data.iter().map(|v| v * c).collect(),
            grad: None,
        };
        let tracked = self.nodes[x.0].tracked;
        self.push(out, Op::Scale(x, c), tracked)
    }

    /// Softmax of `x / tau` over all elements of `x`.
    pub fn softmax(&mut self, x: Var, tau: f64) -> Result<Var> {
        let t = self.value(x);
        let out = softmax_temp(&t.data, tau)?;
        let shape = t.shape.clone();
        let tracked = self.nodes[x.0].tracked;
        Ok(self.push(
            Tensor {
                shape,
                data: out,
                grad: None,
            },
            Op::Softmax { input: x, tau },
            tracked,
        ))
    }

    /// L2 normalization over all elements of `x`.
    pub fn normalize(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let out = l2_normalize(&t.data)?;
        let shape = t.shape.clone();
        let tracked = self.nodes[x.0].tracked;
        Ok(self.push(
            Tensor {
                shape,
                data: out,
                grad: None,
            },
            Op::Normalize(x),
            tracked,
        ))
    }

    /// Per-row L2 normalization of a 2-D tensor. Rows with norm below
    /// [`NORM_EPS`] are divided by `NORM_EPS` instead.
    pub fn row_normalize(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.shape.len() != 2 {
            return shape_err("row_normalize expects a 2-D tensor");
        }
        let cols = t.shape[1];
        let mut out = t.data.clone();
        for row in out.chunks_mut(cols) {
            let n = norm(row).max(NORM_EPS);
            row.iter_mut().for_each(|v| *v /= n);
        }
        let shape = t.shape.clone();
        let tracked = self.nodes[x.0].tracked;
        Ok(self.push(
            Tensor {
                shape,
                data: out,
                grad: None,
            },
            Op::RowNormalize(x),
            tracked,
        ))
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.len() != tb.len() {
            return shape_err(format!("dot length mismatch {} vs {}", ta.len(), tb.len()));
        }
        let v = dot(&ta.data, &tb.data);
        let tracked = self.tracked_any(&[a, b]);
        Ok(self.push(Tensor::scalar(v), Op::Dot(a, b), tracked))
    }

    /// Flattens and concatenates the inputs into one vector.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return shape_err("concat of nothing");
        }
        let data: Vec<f64> = parts
            .iter()
            .flat_map(|v| self.value(*v).data.iter().copied())
            .collect();
        let tracked = self.tracked_any(parts);
        Ok(self.push(Tensor::vector(data), Op::Concat(parts.to_vec()), tracked))
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let out = Tensor {
            shape: t.shape.clone(),
            data: t.data.iter().map(|&v| softplus(v)).collect(),
            grad: None,
        };
        let tracked = self.nodes[x.0].tracked;
        self.push(out, Op::Softplus(x), tracked)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data.iter().sum();
        let tracked = self.nodes[x.0].tracked;
        self.push(Tensor::scalar(s), Op::Sum(x), tracked)
    }

    /// Soft cross-entropy of a probability node against a constant target.
    pub fn cross_entropy(&mut self, probs: Var, target: &[f64]) -> Result<Var> {
        let v = soft_cross_entropy(&self.value(probs).data, target)?;
        let tracked = self.nodes[probs.0].tracked;
        Ok(self.push(
            Tensor::scalar(v),
            Op::CrossEntropy {
                probs,
                target: target.to_vec(),
            },
            tracked,
        ))
    }

    /// Unnormalized VLAD residual matrix `[K, D]` of the columns of `fm`
    /// inside `window`.
    pub fn vlad(
        &mut self,
        fm: Var,
        window: Window,
        weight: Var,
        bias: Var,
        centers: Var,
    ) -> Result<Var> {
        let f = self.value(fm);
        let (wt, b, c) = (self.value(weight), self.value(bias), self.value(centers));
        if f.shape.len() != 3 {
            return shape_err("vlad expects a [D,H,W] feature map");
        }
        let (d, h, w) = (f.shape[0], f.shape[1], f.shape[2]);
        if wt.shape.len() != 2 || wt.shape[1] != d || c.shape != wt.shape {
            return shape_err(format!(
                "vlad parameters {:?} incompatible with {d} channels",
                wt.shape
            ));
        }
        let k = wt.shape[0];
        if b.shape != [k] {
            return shape_err("vlad bias length mismatch");
        }
        if window.bottom > h || window.right > w || window.area() == 0 {
            return shape_err(format!("window {window:?} outside {h}x{w} map"));
        }
        let (v, assign) = vlad::residuals(&f.data, (d, h, w), window, &wt.data, &b.data, &c.data);
        let tracked = self.tracked_any(&[fm, weight, bias, centers]);
        Ok(self.push(
            Tensor {
                shape: vec![k, d],
                data: v,
                grad: None,
            },
            Op::Vlad {
                fm,
                window,
                weight,
                bias,
                centers,
                assign,
            },
            tracked,
        ))
    }

    /// Accumulates d(loss)/d(node) into every tracked node reachable from
    /// `loss`. Gradients from earlier calls are cleared first.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return shape_err("backward requires a scalar loss");
        }
        for n in &mut self.nodes {
            n.value.grad = None;
        }
        if !self.nodes[loss.0].tracked {
            return Ok(());
        }
        self.nodes[loss.0].value.grad = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.tracked {
                continue;
            }
            let Some(g) = node.value.grad.as_deref() else {
                continue;
            };
            let contributions = self.local_grads(node, g);
            for (var, gv) in contributions {
                if self.nodes[var.0].tracked {
                    self.nodes[var.0].value.accumulate_grad(&gv);
                }
            }
        }
        Ok(())
    }

    fn local_grads(&self, node: &Node, g: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let out = &node.value;
        match &node.op {
            Op::Leaf => Vec::new(),
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
            } => {
                let x = self.value(*input);
                let wt = self.value(*weight);
                let want_params = self.nodes[weight.0].tracked || self.nodes[bias.0].tracked;
                let (gin, gw, gb) = conv2d_backward(
                    &x.data,
                    (x.shape[0], x.shape[1], x.shape[2]),
                    &wt.data,
                    wt.shape[0],
                    *stride,
                    g,
                    self.nodes[input.0].tracked,
                    want_params,
                );
                let mut v = Vec::new();
                if let Some(gin) = gin {
                    v.push((*input, gin));
                }
                if let (Some(gw), Some(gb)) = (gw, gb) {
                    v.push((*weight, gw));
                    v.push((*bias, gb));
                }
                v
            }
            Op::Relu(x) => {
                let gx = out
                    .data
                    .iter()
                    .zip(g)
                    .map(|(o, gv)| if *o > 0.0 { *gv } else { 0.0 })
                    .collect();
                vec![(*x, gx)]
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.shape[0], ta.shape[1], tb.shape[1]);
                let mut ga = vec![0.0; m * k];
                let mut gb = vec![0.0; k * n];
                for i in 0..m {
                    for p in 0..k {
                        let mut acc = 0.0;
                        for j in 0..n {
                            let gij = g[i * n + j];
                            acc += gij * tb.data[p * n + j];
                            gb[p * n + j] += ta.data[i * k + p] * gij;
                        }
                        ga[i * k + p] = acc;
                    }
                }
                vec![(*a, ga), (*b, gb)]
            }
            Op::Add(a, b) => vec![(*a, g.to_vec()), (*b, g.to_vec())],
            Op::Sub(a, b) => vec![(*a, g.to_vec()), (*b, g.iter().map(|v| -v).collect())],
            Op::Scale(x, c) => vec![(*x, g.iter().map(|v| v * c).collect())],
            Op::Softmax { input, tau } => {
                let y = &out.data;
                let s = dot(y, g);
                let gx = y.iter().zip(g).map(|(yi, gi)| yi * (gi - s) / tau).collect();
                vec![(*input, gx)]
            }
            Op::Normalize(x) => {
                let n = norm(&self.value(*x).data);
                let y = &out.data;
                let s = dot(y, g);
                let gx = y.iter().zip(g).map(|(yi, gi)| (gi - yi * s) / n).collect();
                vec![(*x, gx)]
            }
            Op::RowNormalize(x) => {
                let xin = self.value(*x);
                let cols = xin.shape[1];
                let mut gx = vec![0.0; xin.len()];
                for (r, row) in xin.data.chunks(cols).enumerate() {
                    let raw = norm(row);
                    let span = r * cols..(r + 1) * cols;
                    let (y, gy) = (&out.data[span.clone()], &g[span.clone()]);
                    let dst = &mut gx[span];
                    if raw > NORM_EPS {
                        let s = dot(y, gy);
                        for j in 0..cols {
                            dst[j] = (gy[j] - y[j] * s) / raw;
                        }
                    } else {
                        for j in 0..cols {
                            dst[j] = gy[j] / NORM_EPS;
                        }
                    }
                }
                vec![(*x, gx)]
            }
            Op::Dot(a, b) => {
                let gs = g[0];
                let ga = self.value(*b).data.iter().map(|v| v * gs).collect();
                let gb = self.value(*a).data.iter().map(|v| v * gs).collect();
                vec![(*a, ga), (*b, gb)]
            }
            Op::Concat(parts) => {
                let mut off = 0;
                parts
                    .iter()
                    .map(|p| {
                        let n = self.value(*p).len();
                        let piece = g[off..off + n].to_vec();
                        off += n;
                        (*p, piece)
                    })
                    .collect()
            }
            Op::Softplus(x) => {
                let gx = self
                    .value(*x)
                    .data
                    .iter()
                    .zip(g)
                    .map(|(v, gi)| gi * sigmoid(*v))
                    .collect();
                vec![(*x, gx)]
            }
            Op::Sum(x) => vec![(*x, vec![g[0]; self.value(*x).len()])],
            Op::CrossEntropy { probs, target } => {
                let p = &self.value(*probs).data;
                let gx = p
                    .iter()
                    .zip(target)
                    .map(|(pi, ti)| if *pi > LOG_FLOOR { -g[0] * ti / pi } else { 0.0 })
                    .collect();
                vec![(*probs, gx)]
            }
            Op::Vlad {
                fm,
                window,
                weight,
                bias,
                centers,
                assign,
            } => {
                let f = self.value(*fm);
                let grads = vlad::residuals_backward(
                    &f.data,
                    (f.shape[0], f.shape[1], f.shape[2]),
                    *window,
                    &self.value(*weight).data,
                    &self.value(*centers).data,
                    assign,
                    g,
                );
                let mut v = Vec::with_capacity(4);
                if self.nodes[fm.0].tracked {
                    v.push((*fm, grads.fm));
                }
                v.push((*weight, grads.weight));
                v.push((*bias, grads.bias));
                v.push((*centers, grads.centers));
                v
            }
        }
    }
}

/// Central-difference gradient check.
///
/// `f` builds a scalar loss from leaves holding `params`. Returns the
/// maximum over all coordinates of `|analytic - numeric| / max(1, |numeric|)`.
pub fn grad_check<F>(f: F, params: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    if !(eps > 0.0) {
        return Err(Error::Parameter(format!("eps must be > 0, got {eps}")));
    }
    let eval = |ps: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = ps.iter().map(|p| g.constant(p.clone())).collect();
        let out = f(&mut g, &vars)?;
        let v = g.item(out);
        if !v.is_finite() {
            return Err(Error::Evaluation(format!("function returned {v}")));
        }
        Ok(v)
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
    let out = f(&mut g, &vars)?;
    if !g.item(out).is_finite() {
        return Err(Error::Evaluation("non-finite loss".into()));
    }
    g.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(params)
        .map(|(v, p)| {
            g.grad(*v)
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; p.len()])
        })
        .collect();

    let mut work: Vec<Tensor> = params.to_vec();
    let mut worst = 0.0f64;
    for (pi, grads) in analytic.iter().enumerate() {
        for i in 0..work[pi].len() {
            let orig = work[pi].data[i];
            work[pi].data[i] = orig + eps;
            let up = eval(&work)?;
            work[pi].data[i] = orig - eps;
            let down = eval(&work)?;
            work[pi].data[i] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let err = (grads[i] - numeric).abs() / numeric.abs().max(1.0);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}
