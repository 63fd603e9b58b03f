//! Tensor-level reverse-mode differentiation.
//!
//! A [`Tape`] records every intermediate as a flat `f64` buffer together with
//! the operation that produced it. Calling [`Tape::backward`] on a scalar
//! node walks the record in reverse and returns vector-Jacobian products for
//! every node that depends on a differentiable leaf. The tape is never
//! mutated by a backward pass, so several scalars recorded on the same tape
//! (a loss and an importance probe, say) can be differentiated in turn.
//!
//! The operation set is the one the descriptor network and its losses need:
//! 2-D convolution, pointwise activations, generalized-mean pooling, dense
//! layers, L2 normalization and a handful of vector and scalar primitives.

use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Softplus,
    Relu,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Softplus => x.max(0.0) + (-x.abs()).exp().ln_1p(),
            Activation::Relu => x.max(0.0),
        }
    }

    /// Derivative expressed through input `x` and output `y`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - y * y,
            Activation::Softplus => {
                if x >= 0.0 {
                    1.0 / (1.0 + (-x).exp())
                } else {
                    let e = x.exp();
                    e / (1.0 + e)
                }
            }
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

/// Shape bookkeeping for a zero-padded, square-kernel convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub out_channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeometry {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn weight_len(&self) -> usize {
        self.out_channels * self.in_channels * self.kernel * self.kernel
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Slice {
        src: Var,
        start: usize,
    },
    Conv2d {
        input: Var,
        weight: Var,
        bias: Var,
        geom: ConvGeometry,
    },
    Activate {
        input: Var,
        kind: Activation,
    },
    Gem {
        input: Var,
        channels: usize,
        p: f64,
    },
    Linear {
        input: Var,
        weight: Var,
        bias: Var,
    },
    L2Normalize {
        input: Var,
        norm: f64,
    },
    Add {
        a: Var,
        b: Var,
    },
    Sub {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        a: Var,
        factor: f64,
    },
    Dot {
        a: Var,
        b: Var,
    },
    Sum {
        a: Var,
    },
    Square {
        a: Var,
    },
    Sqrt {
        a: Var,
    },
    Hinge {
        a: Var,
    },
    Div {
        a: Var,
        b: Var,
    },
    Concat {
        parts: Vec<Var>,
    },
}

#[derive(Debug)]
struct Node {
    value: Vec<f64>,
    op: Op,
    needs_grad: bool,
    scope: usize,
}

/// Record of a computation.
#[derive(Debug)]
pub struct Tape {
    nodes: Vec<Node>,
    scopes: Vec<String>,
    current_scope: usize,
    first_non_finite: Option<usize>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            scopes: vec!["input".to_string()],
            current_scope: 0,
            first_non_finite: None,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Labels every node recorded from now on; reported when a non-finite
    /// value shows up.
    pub fn set_scope(&mut self, name: &str) {
        if let Some(i) = self.scopes.iter().position(|s| s == name) {
            self.current_scope = i;
        } else {
            self.scopes.push(name.to_string());
            self.current_scope = self.scopes.len() - 1;
        }
    }

    fn push(&mut self, value: Vec<f64>, op: Op, needs_grad: bool) -> Var {
        let idx = self.nodes.len();
        if self.first_non_finite.is_none() && value.iter().any(|v| !v.is_finite()) {
            self.first_non_finite = Some(idx);
        }
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
            scope: self.current_scope,
        });
        Var(idx)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Differentiable leaf.
    pub fn variable(&mut self, value: Vec<f64>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Non-differentiable leaf.
    pub fn constant(&mut self, value: Vec<f64>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.constant(vec![value])
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    /// Fails with the scope of the first node that produced a NaN or an
    /// infinity.
    pub fn check_finite(&self) -> Result<()> {
        match self.first_non_finite {
            None => Ok(()),
            Some(idx) => Err(Error::NonFinite {
                layer: self.scopes[self.nodes[idx].scope].clone(),
            }),
        }
    }

    pub fn slice(&mut self, src: Var, start: usize, len: usize) -> Var {
        let value = self.nodes[src.0].value[start..start + len].to_vec();
        let ng = self.needs(src);
        self.push(value, Op::Slice { src, start }, ng)
    }

    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var, geom: ConvGeometry) -> Var {
        let x = &self.nodes[input.0].value;
        let w = &self.nodes[weight.0].value;
        let b = &self.nodes[bias.0].value;
        debug_assert_eq!(x.len(), geom.in_channels * geom.height * geom.width);
        debug_assert_eq!(w.len(), geom.weight_len());
        debug_assert_eq!(b.len(), geom.out_channels);
        let (oh, ow) = (geom.out_height(), geom.out_width());
        let k = geom.kernel;
        let mut out = vec![0.0; geom.out_channels * oh * ow];
        for co in 0..geom.out_channels {
            let o = &mut out[co * oh * ow..(co + 1) * oh * ow];
            o.fill(b[co]);
            for ci in 0..geom.in_channels {
                let xin = &x[ci * geom.height * geom.width..(ci + 1) * geom.height * geom.width];
                let wk = &w[(co * geom.in_channels + ci) * k * k
                    ..(co * geom.in_channels + ci + 1) * k * k];
                for oy in 0..oh {
                    for ky in 0..k {
                        let iy = (oy * geom.stride + ky) as isize - geom.pad as isize;
                        if iy < 0 || iy >= geom.height as isize {
                            continue;
                        }
                        let row = &xin[iy as usize * geom.width..(iy as usize + 1) * geom.width];
                        for kx in 0..k {
                            let wv = wk[ky * k + kx];
                            for ox in 0..ow {
                                let ix = (ox * geom.stride + kx) as isize - geom.pad as isize;
                                if ix >= 0 && ix < geom.width as isize {
                                    o[oy * ow + ox] += wv * row[ix as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
        let ng = self.needs(input) || self.needs(weight) || self.needs(bias);
        self.push(
            out,
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            },
            ng,
        )
    }

    pub fn activate(&mut self, input: Var, kind: Activation) -> Var {
        let value = self.nodes[input.0]
            .value
            .iter()
            .map(|&x| kind.apply(x))
            .collect();
        let ng = self.needs(input);
        self.push(value, Op::Activate { input, kind }, ng)
    }

    /// Generalized-mean pooling over the spatial positions of each channel.
    /// `p = 1` is the plain mean; for other exponents inputs are clamped at
    /// `1e-6`.
    pub fn gem(&mut self, input: Var, channels: usize, p: f64) -> Var {
        let x = &self.nodes[input.0].value;
        let n = x.len() / channels;
        let mut out = Vec::with_capacity(channels);
        for c in 0..channels {
            let xs = &x[c * n..(c + 1) * n];
            if p == 1.0 {
                out.push(xs.iter().sum::<f64>() / n as f64);
            } else {
                let peak = xs.iter().fold(GEM_EPS, |m, &v| m.max(v));
                let m = xs
                    .iter()
                    .map(|&v| (v.max(GEM_EPS) / peak).powf(p))
                    .sum::<f64>()
                    / n as f64;
                out.push(peak * m.powf(1.0 / p));
            }
        }
        let ng = self.needs(input);
        self.push(out, Op::Gem { input, channels, p }, ng)
    }

    /// `weight` is row-major `[out, in]`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Var) -> Var {
        let x = &self.nodes[input.0].value;
        let w = &self.nodes[weight.0].value;
        let b = &self.nodes[bias.0].value;
        let n_in = x.len();
        debug_assert_eq!(w.len(), n_in * b.len());
        let out = b
            .iter()
            .enumerate()
            .map(|(o, &bo)| {
                bo + w[o * n_in..(o + 1) * n_in]
                    .iter()
                    .zip(x)
                    .map(|(a, b)| a * b)
                    .sum::<f64>()
            })
            .collect();
        let ng = self.needs(input) || self.needs(weight) || self.needs(bias);
        self.push(
            out,
            Op::Linear {
                input,
                weight,
                bias,
            },
            ng,
        )
    }

    pub fn l2_normalize(&mut self, input: Var) -> Var {
        let x = &self.nodes[input.0].value;
        let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        let value = x.iter().map(|v| v / norm).collect();
        let ng = self.needs(input);
        self.push(value, Op::L2Normalize { input, norm }, ng)
    }

    fn zip_with(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let va = &self.nodes[a.0].value;
        let vb = &self.nodes[b.0].value;
        assert_eq!(va.len(), vb.len(), "elementwise operands differ in length");
        let value = va.iter().zip(vb).map(|(&x, &y)| f(x, y)).collect();
        let ng = self.needs(a) || self.needs(b);
        self.push(value, op, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.zip_with(a, b, |x, y| x + y, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.zip_with(a, b, |x, y| x - y, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.zip_with(a, b, |x, y| x * y, Op::Mul { a, b })
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let value = self.nodes[a.0].value.iter().map(|v| v * factor).collect();
        let ng = self.needs(a);
        self.push(value, Op::Scale { a, factor }, ng)
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Var {
        let va = &self.nodes[a.0].value;
        let vb = &self.nodes[b.0].value;
        assert_eq!(va.len(), vb.len(), "dot operands differ in length");
        let value = va.iter().zip(vb).map(|(x, y)| x * y).sum::<f64>();
        let ng = self.needs(a) || self.needs(b);
        self.push(vec![value], Op::Dot { a, b }, ng)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.iter().sum::<f64>();
        let ng = self.needs(a);
        self.push(vec![value], Op::Sum { a }, ng)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.iter().map(|v| v * v).collect();
        let ng = self.needs(a);
        self.push(value, Op::Square { a }, ng)
    }

    /// Elementwise square root; the derivative at exactly zero is taken as 0.
    pub fn sqrt(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.iter().map(|v| v.sqrt()).collect();
        let ng = self.needs(a);
        self.push(value, Op::Sqrt { a }, ng)
    }

    /// Elementwise `max(x, 0)`.
    pub fn hinge(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.iter().map(|v| v.max(0.0)).collect();
        let ng = self.needs(a);
        self.push(value, Op::Hinge { a }, ng)
    }

    /// Elementwise quotient; `b` may be a scalar broadcast over `a`.
    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let va = &self.nodes[a.0].value;
        let vb = &self.nodes[b.0].value;
        let value = if vb.len() == 1 {
            va.iter().map(|x| x / vb[0]).collect()
        } else {
            assert_eq!(va.len(), vb.len(), "div operands differ in length");
            va.iter().zip(vb).map(|(x, y)| x / y).collect()
        };
        let ng = self.needs(a) || self.needs(b);
        self.push(value, Op::Div { a, b }, ng)
    }

    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let mut value = Vec::new();
        let mut ng = false;
        for &p in parts {
            value.extend_from_slice(&self.nodes[p.0].value);
            ng |= self.needs(p);
        }
        self.push(
            value,
            Op::Concat {
                parts: parts.to_vec(),
            },
            ng,
        )
    }

    /// Euclidean norm as a scalar node.
    pub fn norm(&mut self, a: Var) -> Var {
        let sq = self.dot(a, a);
        self.sqrt(sq)
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        self.check_finite()?;
        if self.nodes[root.0].value.len() != 1 {
            return Err(Error::DimensionMismatch(format!(
                "backward needs a scalar root, node has {} entries",
                self.nodes[root.0].value.len()
            )));
        }
        let mut adj: Vec<Vec<f64>> = vec![Vec::new(); root.0 + 1];
        adj[root.0] = vec![1.0];
        for i in (0..=root.0).rev() {
            if adj[i].is_empty() || !self.nodes[i].needs_grad {
                continue;
            }
            let g = std::mem::take(&mut adj[i]);
            self.propagate(i, &g, &mut adj);
            adj[i] = g;
        }
        for (i, a) in adj.iter().enumerate() {
            if a.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    layer: format!("{} (gradient)", self.scopes[self.nodes[i].scope]),
                });
            }
        }
        Ok(Gradients { adj })
    }

    fn accumulate<'a>(&self, adj: &'a mut [Vec<f64>], v: Var) -> Option<&'a mut Vec<f64>> {
        if !self.nodes[v.0].needs_grad {
            return None;
        }
        let slot = &mut adj[v.0];
        if slot.is_empty() {
            *slot = vec![0.0; self.nodes[v.0].value.len()];
        }
        Some(slot)
    }

    fn propagate(&self, i: usize, g: &[f64], adj: &mut [Vec<f64>]) {
        let node = &self.nodes[i];
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Slice { src, start } => {
                if let Some(ga) = self.accumulate(adj, *src) {
                    for (a, &d) in ga[*start..*start + g.len()].iter_mut().zip(g) {
                        *a += d;
                    }
                }
            }
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            } => self.conv2d_backward(*input, *weight, *bias, geom, g, adj),
            Op::Activate { input, kind } => {
                let x = &self.nodes[input.0].value;
                if let Some(ga) = self.accumulate(adj, *input) {
                    for j in 0..g.len() {
                        ga[j] += g[j] * kind.derivative(x[j], y[j]);
                    }
                }
            }
            Op::Gem { input, channels, p } => {
                let x = &self.nodes[input.0].value;
                let n = x.len() / channels;
                if let Some(ga) = self.accumulate(adj, *input) {
                    for c in 0..*channels {
                        let range = c * n..(c + 1) * n;
                        if *p == 1.0 {
                            for a in &mut ga[range] {
                                *a += g[c] / n as f64;
                            }
                        } else {
                            // d y / d x_i = (x_i / y)^(p-1) / n for unclamped x_i
                            for (a, &xv) in ga[range.clone()].iter_mut().zip(&x[range]) {
                                if xv > GEM_EPS {
                                    *a += g[c] * (xv / y[c]).powf(p - 1.0) / n as f64;
                                }
                            }
                        }
                    }
                }
            }
            Op::Linear {
                input,
                weight,
                bias,
            } => {
                let x = &self.nodes[input.0].value;
                let w = &self.nodes[weight.0].value;
                let n_in = x.len();
                if let Some(gb) = self.accumulate(adj, *bias) {
                    for (a, &d) in gb.iter_mut().zip(g) {
                        *a += d;
                    }
                }
                if let Some(gw) = self.accumulate(adj, *weight) {
                    for (o, &d) in g.iter().enumerate() {
                        for (a, &xv) in gw[o * n_in..(o + 1) * n_in].iter_mut().zip(x) {
                            *a += d * xv;
                        }
                    }
                }
                if let Some(gx) = self.accumulate(adj, *input) {
                    for (o, &d) in g.iter().enumerate() {
                        for (a, &wv) in gx.iter_mut().zip(&w[o * n_in..(o + 1) * n_in]) {
                            *a += d * wv;
                        }
                    }
                }
            }
            Op::L2Normalize { input, norm } => {
                let yg: f64 = y.iter().zip(g).map(|(a, b)| a * b).sum();
                if let Some(ga) = self.accumulate(adj, *input) {
                    for j in 0..g.len() {
                        ga[j] += (g[j] - y[j] * yg) / norm;
                    }
                }
            }
            Op::Add { a, b } => {
                for v in [*a, *b] {
                    if let Some(ga) = self.accumulate(adj, v) {
                        for (x, &d) in ga.iter_mut().zip(g) {
                            *x += d;
                        }
                    }
                }
            }
            Op::Sub { a, b } => {
                if let Some(ga) = self.accumulate(adj, *a) {
                    for (x, &d) in ga.iter_mut().zip(g) {
                        *x += d;
                    }
                }
                if let Some(gb) = self.accumulate(adj, *b) {
                    for (x, &d) in gb.iter_mut().zip(g) {
                        *x -= d;
                    }
                }
            }
            Op::Mul { a, b } => {
                let va = &self.nodes[a.0].value;
                let vb = &self.nodes[b.0].value;
                if let Some(ga) = self.accumulate(adj, *a) {
                    for j in 0..g.len() {
                        ga[j] += g[j] * vb[j];
                    }
                }
                if let Some(gb) = self.accumulate(adj, *b) {
                    for j in 0..g.len() {
                        gb[j] += g[j] * va[j];
                    }
                }
            }
            Op::Scale { a, factor } => {
                if let Some(ga) = self.accumulate(adj, *a) {
                    for (x, &d) in ga.iter_mut().zip(g) {
                        *x += d * factor;
                    }
                }
            }
            Op::Dot { a, b } => {
                let va = &self.nodes[a.0].value;
                let vb = &self.nodes[b.0].value;
                if a == b {
                    if let Some(ga) = self.accumulate(adj, *a) {
                        for (x, &v) in ga.iter_mut().zip(va) {
                            *x += 2.0 * g[0] * v;
                        }
                    }
                    return;
                }
                if let Some(ga) = self.accumulate(adj, *a) {
                    for (x, &v) in ga.iter_mut().zip(vb) {
                        *x += g[0] * v;
                    }
                }
                if let Some(gb) = self.accumulate(adj, *b) {
                    for (x, &v) in gb.iter_mut().zip(va) {
                        *x += g[0] * v;
                    }
                }
            }
            Op::Sum { a } => {
                if let Some(ga) = self.accumulate(adj, *a) {
                    for x in ga.iter_mut() {
                        *x += g[0];
                    }
                }
            }
            Op::Square { a } => {
                let va = &self.nodes[a.0].value;
                if let Some(ga) = self.accumulate(adj, *a) {
                    for j in 0..g.len() {
                        ga[j] += 2.0 * g[j] * va[j];
                    }
                }
            }
            Op::Sqrt { a } => {
                if let Some(ga) = self.accumulate(adj, *a) {
                    for j in 0..g.len() {
                        if y[j] > 0.0 {
                            ga[j] += g[j] * 0.5 / y[j];
                        }
                    }
                }
            }
            Op::Hinge { a } => {
                let va = &self.nodes[a.0].value;
                if let Some(ga) = self.accumulate(adj, *a) {
                    for j in 0..g.len() {
                        if va[j] > 0.0 {
                            ga[j] += g[j];
                        }
                    }
                }
            }
            Op::Div { a, b } => {
                let vb = &self.nodes[b.0].value;
                let broadcast = vb.len() == 1;
                if let Some(ga) = self.accumulate(adj, *a) {
                    for j in 0..g.len() {
                        ga[j] += g[j] / if broadcast { vb[0] } else { vb[j] };
                    }
                }
                if let Some(gb) = self.accumulate(adj, *b) {
                    // d(a/b)/db = -y/b
                    for j in 0..g.len() {
                        let bj = if broadcast { vb[0] } else { vb[j] };
                        let d = -g[j] * y[j] / bj;
                        if broadcast {
                            gb[0] += d;
                        } else {
                            gb[j] += d;
                        }
                    }
                }
            }
            Op::Concat { parts } => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.nodes[p.0].value.len();
                    if let Some(gp) = self.accumulate(adj, p) {
                        for (x, &d) in gp.iter_mut().zip(&g[offset..offset + len]) {
                            *x += d;
                        }
                    }
                    offset += len;
                }
            }
        }
    }

    fn conv2d_backward(
        &self,
        input: Var,
        weight: Var,
        bias: Var,
        geom: &ConvGeometry,
        g: &[f64],
        adj: &mut [Vec<f64>],
    ) {
        let x = &self.nodes[input.0].value;
        let w = &self.nodes[weight.0].value;
        let (oh, ow) = (geom.out_height(), geom.out_width());
        let k = geom.kernel;
        let plane = geom.height * geom.width;
        if let Some(gb) = self.accumulate(adj, bias) {
            for co in 0..geom.out_channels {
                gb[co] += g[co * oh * ow..(co + 1) * oh * ow].iter().sum::<f64>();
            }
        }
        let need_w = self.nodes[weight.0].needs_grad;
        let need_x = self.nodes[input.0].needs_grad;
        let mut gw = need_w.then(|| vec![0.0; w.len()]);
        let mut gx = need_x.then(|| vec![0.0; x.len()]);
        for co in 0..geom.out_channels {
            let go = &g[co * oh * ow..(co + 1) * oh * ow];
            for ci in 0..geom.in_channels {
                let xin = &x[ci * plane..(ci + 1) * plane];
                let wbase = (co * geom.in_channels + ci) * k * k;
                for ky in 0..k {
                    for kx in 0..k {
                        let wv = w[wbase + ky * k + kx];
                        let mut acc = 0.0;
                        for oy in 0..oh {
                            let iy = (oy * geom.stride + ky) as isize - geom.pad as isize;
                            if iy < 0 || iy >= geom.height as isize {
                                continue;
                            }
                            let row = iy as usize * geom.width;
                            for ox in 0..ow {
                                let ix = (ox * geom.stride + kx) as isize - geom.pad as isize;
                                if ix < 0 || ix >= geom.width as isize {
                                    continue;
                                }
                                let d = go[oy * ow + ox];
                                acc += d * xin[row + ix as usize];
                                if let Some(gx) = gx.as_mut() {
                                    gx[ci * plane + row + ix as usize] += d * wv;
                                }
                            }
                        }
                        if let Some(gw) = gw.as_mut() {
                            gw[wbase + ky * k + kx] += acc;
                        }
                    }
                }
            }
        }
        if let (Some(buf), Some(slot)) = (gw, self.accumulate(adj, weight)) {
            for (a, b) in slot.iter_mut().zip(buf) {
                *a += b;
            }
        }
        if let (Some(buf), Some(slot)) = (gx, self.accumulate(adj, input)) {
            for (a, b) in slot.iter_mut().zip(buf) {
                *a += b;
            }
        }
    }
}

const GEM_EPS: f64 = 1e-6;

/// Adjoints produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    adj: Vec<Vec<f64>>,
}

impl Gradients {
    /// Gradient of the root with respect to `v`; all zeros when `v` does not
    /// influence the root.
    pub fn wrt(&self, tape: &Tape, v: Var) -> Vec<f64> {
        match self.adj.get(v.0) {
            Some(a) if !a.is_empty() => a.clone(),
            _ => vec![0.0; tape.value(v).len()],
        }
    }
}
