//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s. Leaves are
//! either trainable (`param`) or constants (`constant`, `detach`); gradients
//! are only propagated into nodes that transitively depend on a trainable leaf,
//! so a constant leaf is exactly a stop-gradient.

use crate::error::{Error, Result};
use crate::tensor::{self, ConvGeometry, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Square(Var),
    Abs(Var),
    Relu(Var),
    Silu(Var),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    MatMul { a: Var, b: Var, trans_a: bool, trans_b: bool },
    SoftmaxLast(Var),
    LogSoftmaxLast(Var),
    L2NormalizeLast(Var),
    Gather(Var, Vec<usize>),
    Concat { parts: Vec<Var>, axis: usize },
    Conv2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeometry },
    Upsample2x(Var),
    Embed { codebook: Var, indices: Vec<usize> },
    StraightThrough { continuous: Var },
    WeightedSum { weights: Var, items: Vec<Var> },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Stop-gradient: a constant leaf carrying the current value of `v`.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    fn check_same(&self, context: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(context, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same("add", a, b)?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same("sub", a, b)?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same("mul", a, b)?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).map(|x| x * s);
        let rg = self.rg(a);
        self.push(value, Op::Scale(a, s), rg)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).map(|x| x + s);
        let rg = self.rg(a);
        self.push(value, Op::AddScalar(a), rg)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x * x);
        let rg = self.rg(a);
        self.push(value, Op::Square(a), rg)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::abs);
        let rg = self.rg(a);
        self.push(value, Op::Abs(a), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.max(0.0));
        let rg = self.rg(a);
        self.push(value, Op::Relu(a), rg)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x / (1.0 + (-x).exp()));
        let rg = self.rg(a);
        self.push(value, Op::Silu(a), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).data().iter().sum());
        let rg = self.rg(a);
        self.push(value, Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let value = Tensor::scalar(t.data().iter().sum::<f64>() / t.len() as f64);
        let rg = self.rg(a);
        self.push(value, Op::Mean(a), rg)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).reshape(shape)?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::Reshape(a), rg))
    }

    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Var {
        let value = self.value(a).permute(perm);
        let rg = self.rg(a);
        self.push(value, Op::Permute(a, perm.to_vec()), rg)
    }

    /// Batched matrix product of rank-3 tensors `[batch, m, k] x [batch, k, n]`,
    /// with either operand optionally stored transposed.
    pub fn matmul(&mut self, a: Var, b: Var, trans_a: bool, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(Error::shape("matmul", &sa, &sb));
        }
        let (m, k) = if trans_a { (sa[2], sa[1]) } else { (sa[1], sa[2]) };
        let (k2, n) = if trans_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if k != k2 {
            return Err(Error::shape("matmul inner dimension", &sa, &sb));
        }
        let batch = sa[0];
        let mut out = vec![0.0; batch * m * n];
        {
            let (ta, tb) = (self.value(a), self.value(b));
            for i in 0..batch {
                tensor::gemm(
                    m,
                    k,
                    n,
                    &ta.data()[i * m * k..],
                    trans_a,
                    &tb.data()[i * k * n..],
                    trans_b,
                    &mut out[i * m * n..(i + 1) * m * n],
                    0.0,
                );
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            Tensor::from_parts(vec![batch, m, n], out),
            Op::MatMul { a, b, trans_a, trans_b },
            rg,
        ))
    }

    pub fn softmax_last(&mut self, a: Var) -> Var {
        let value = softmax_rows(self.value(a), false);
        let rg = self.rg(a);
        self.push(value, Op::SoftmaxLast(a), rg)
    }

    pub fn log_softmax_last(&mut self, a: Var) -> Var {
        let value = softmax_rows(self.value(a), true);
        let rg = self.rg(a);
        self.push(value, Op::LogSoftmaxLast(a), rg)
    }

    /// Divides every row (last axis) by its Euclidean norm. Zero rows are rejected.
    pub fn l2_normalize_last(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let d = *t.shape().last().unwrap_or(&1);
        let mut out = t.data().to_vec();
        for row in out.chunks_mut(d) {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if !(norm > 0.0) {
                return Err(Error::invalid("cannot normalize a zero-norm vector"));
            }
            row.iter_mut().for_each(|v| *v /= norm);
        }
        let value = Tensor::from_parts(t.shape().to_vec(), out);
        let rg = self.rg(a);
        Ok(self.push(value, Op::L2NormalizeLast(a), rg))
    }

    /// `out[i] = flat(a)[indices[i]]`, reshaped to `shape`.
    pub fn gather(&mut self, a: Var, indices: Vec<usize>, shape: &[usize]) -> Result<Var> {
        let src = self.value(a).data();
        if shape.iter().product::<usize>() != indices.len() {
            return Err(Error::invalid("gather shape does not match index count"));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= src.len()) {
            return Err(Error::invalid(format!("gather index {bad} out of range {}", src.len())));
        }
        let value = Tensor::from_parts(shape.to_vec(), indices.iter().map(|&i| src[i]).collect());
        let rg = self.rg(a);
        Ok(self.push(value, Op::Gather(a, indices), rg))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(parts[0]).to_vec();
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len()
                || s.iter().enumerate().any(|(i, &d)| i != axis && d != first[i])
            {
                return Err(Error::shape("concat", &first, s));
            }
            total += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let t = self.value(p);
                let len = t.shape()[axis] * inner;
                out.extend_from_slice(&t.data()[o * len..(o + 1) * len]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::Concat { parts: parts.to_vec(), axis },
            rg,
        ))
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] || ws[2] != ws[3] {
            return Err(Error::shape("conv2d", &ws, &xs));
        }
        if let Some(b) = b {
            if self.shape(b) != [ws[0]] {
                return Err(Error::shape("conv2d bias", &[ws[0]], self.shape(b)));
            }
        }
        let geom = ConvGeometry::new(xs[1], xs[2], xs[3], ws[2], stride, pad)
            .ok_or_else(|| Error::invalid(format!("input {xs:?} too small for kernel {}", ws[2])))?;
        let value = tensor::conv2d_forward(self.value(x), self.value(w), b.map(|b| self.value(b)), &geom);
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(value, Op::Conv2d { x, w, b, geom }, rg))
    }

    pub fn upsample2x(&mut self, x: Var) -> Var {
        let value = tensor::upsample2x(self.value(x));
        let rg = self.rg(x);
        self.push(value, Op::Upsample2x(x), rg)
    }

    /// Codebook lookup. `codebook: [N, C]`, `indices` in `(b, y, x)` order;
    /// output `[B, C, H, W]`.
    pub fn embed(&mut self, codebook: Var, indices: Vec<usize>, batch: usize, height: usize, width: usize) -> Result<Var> {
        let cb = self.value(codebook);
        let [n, c] = match cb.shape() {
            &[n, c] => [n, c],
            s => return Err(Error::shape("embed codebook", &[0, 0], s)),
        };
        if indices.len() != batch * height * width {
            return Err(Error::invalid("embed index count does not match grid"));
        }
        let hw = height * width;
        let mut out = vec![0.0; batch * c * hw];
        for (pos, &idx) in indices.iter().enumerate() {
            if idx >= n {
                return Err(Error::invalid(format!("code index {idx} out of range {n}")));
            }
            let (b, s) = (pos / hw, pos % hw);
            let entry = &cb.data()[idx * c..(idx + 1) * c];
            for (ch, &v) in entry.iter().enumerate() {
                out[(b * c + ch) * hw + s] = v;
            }
        }
        let rg = self.rg(codebook);
        Ok(self.push(
            Tensor::from_parts(vec![batch, c, height, width], out),
            Op::Embed { codebook, indices },
            rg,
        ))
    }

    /// Forward value of `quantized`; the backward pass hands the incoming
    /// gradient to `continuous` unchanged and nothing to `quantized`.
    pub fn straight_through(&mut self, continuous: Var, quantized: Var) -> Result<Var> {
        self.check_same("straight_through", continuous, quantized)?;
        let value = self.value(quantized).clone();
        let rg = self.rg(continuous);
        Ok(self.push(value, Op::StraightThrough { continuous }, rg))
    }

    /// `out[b, c, y, x] = sum_k weights[b, k, y, x] * items[k][b, c, y, x]`.
    /// Terms whose weight is exactly zero are skipped in the forward sum.
    pub fn weighted_sum(&mut self, weights: Var, items: &[Var]) -> Result<Var> {
        let ws = self.shape(weights).to_vec();
        if items.is_empty() || ws.len() != 4 || ws[1] != items.len() {
            return Err(Error::invalid(format!(
                "weight map {ws:?} does not match {} grids",
                items.len()
            )));
        }
        let first = self.shape(items[0]).to_vec();
        for &it in items {
            let s = self.shape(it);
            if s != first.as_slice() {
                return Err(Error::shape("weighted_sum grid", &first, s));
            }
        }
        if first.len() != 4 || first[0] != ws[0] || first[2] != ws[2] || first[3] != ws[3] {
            return Err(Error::shape("weighted_sum weights", &first, &ws));
        }
        let [b, c, h, w] = [first[0], first[1], first[2], first[3]];
        let k = items.len();
        let hw = h * w;
        let wv = self.value(weights).data();
        let mut out = vec![0.0; b * c * hw];
        for n in 0..b {
            for s in 0..hw {
                let mut started = false;
                for (ki, &it) in items.iter().enumerate() {
                    let wt = wv[(n * k + ki) * hw + s];
                    if wt == 0.0 {
                        continue;
                    }
                    let src = self.nodes[it.0].value.data();
                    for ch in 0..c {
                        let i = (n * c + ch) * hw + s;
                        if started {
                            out[i] += wt * src[i];
                        } else {
                            out[i] = wt * src[i];
                        }
                    }
                    started = true;
                }
            }
        }
        let rg = self.rg(weights) || items.iter().any(|&i| self.rg(i));
        Ok(self.push(
            Tensor::from_parts(first, out),
            Op::WeightedSum { weights, items: items.to_vec() },
            rg,
        ))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Gradients {
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.rg(loss) {
            return Gradients { grads };
        }
        grads[loss.0] = Some(Tensor::full(self.shape(loss), 1.0));
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.requires_grad {
                grads[id] = Some(g);
                continue;
            }
            self.propagate(&node.op, &node.value, &g, &mut grads);
            grads[id] = Some(g);
        }
        Gradients { grads }
    }

    fn propagate(&self, op: &Op, out: &Tensor, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let mut acc = |v: Var, t: Tensor| {
            if !self.rg(v) {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&t),
                slot => *slot = Some(t),
            }
        };
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                acc(*a, g.zip_map(self.value(*b), |gv, bv| gv * bv));
                acc(*b, g.zip_map(self.value(*a), |gv, av| gv * av));
            }
            Op::Scale(a, s) => acc(*a, g.map(|v| v * s)),
            Op::AddScalar(a) => acc(*a, g.clone()),
            Op::Square(a) => acc(*a, g.zip_map(self.value(*a), |gv, x| 2.0 * x * gv)),
            Op::Abs(a) => acc(
                *a,
                g.zip_map(self.value(*a), |gv, x| {
                    if x > 0.0 {
                        gv
                    } else if x < 0.0 {
                        -gv
                    } else {
                        0.0
                    }
                }),
            ),
            Op::Relu(a) => acc(*a, g.zip_map(self.value(*a), |gv, x| if x > 0.0 { gv } else { 0.0 })),
            Op::Silu(a) => acc(
                *a,
                g.zip_map(self.value(*a), |gv, x| {
                    let s = 1.0 / (1.0 + (-x).exp());
                    gv * s * (1.0 + x * (1.0 - s))
                }),
            ),
            Op::Sum(a) => acc(*a, Tensor::full(self.shape(*a), g.item())),
            Op::Mean(a) => {
                let n = self.value(*a).len() as f64;
                acc(*a, Tensor::full(self.shape(*a), g.item() / n))
            }
            Op::Reshape(a) => acc(*a, Tensor::from_parts(self.shape(*a).to_vec(), g.data().to_vec())),
            Op::Permute(a, perm) => acc(*a, g.permute(&tensor::inverse_permutation(perm))),
            Op::MatMul { a, b, trans_a, trans_b } => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (sa, sb) = (ta.shape(), tb.shape());
                let batch = sa[0];
                let (m, k) = if *trans_a { (sa[2], sa[1]) } else { (sa[1], sa[2]) };
                let n = if *trans_b { sb[1] } else { sb[2] };
                if self.rg(*a) {
                    let mut ga = vec![0.0; ta.len()];
                    for i in 0..batch {
                        let gi = &g.data()[i * m * n..];
                        let bi = &tb.data()[i * k * n..];
                        let dst = &mut ga[i * m * k..(i + 1) * m * k];
                        if *trans_a {
                            // dA (k x m) = op(B) G^T
                            tensor::gemm(k, n, m, bi, *trans_b, gi, true, dst, 0.0);
                        } else {
                            // dA (m x k) = G op(B)^T
                            tensor::gemm(m, n, k, gi, false, bi, !*trans_b, dst, 0.0);
                        }
                    }
                    acc(*a, Tensor::from_parts(sa.to_vec(), ga));
                }
                if self.rg(*b) {
                    let mut gb = vec![0.0; tb.len()];
                    for i in 0..batch {
                        let gi = &g.data()[i * m * n..];
                        let ai = &ta.data()[i * m * k..];
                        let dst = &mut gb[i * k * n..(i + 1) * k * n];
                        if *trans_b {
                            // dB (n x k) = G^T op(A)
                            tensor::gemm(n, m, k, gi, true, ai, *trans_a, dst, 0.0);
                        } else {
                            // dB (k x n) = op(A)^T G
                            tensor::gemm(k, m, n, ai, !*trans_a, gi, false, dst, 0.0);
                        }
                    }
                    acc(*b, Tensor::from_parts(sb.to_vec(), gb));
                }
            }
            Op::SoftmaxLast(a) => {
                let d = *out.shape().last().unwrap_or(&1);
                let mut gx = vec![0.0; out.len()];
                for ((y, gr), dst) in out.data().chunks(d).zip(g.data().chunks(d)).zip(gx.chunks_mut(d)) {
                    let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for i in 0..d {
                        dst[i] = y[i] * (gr[i] - dot);
                    }
                }
                acc(*a, Tensor::from_parts(out.shape().to_vec(), gx));
            }
            Op::LogSoftmaxLast(a) => {
                let d = *out.shape().last().unwrap_or(&1);
                let mut gx = vec![0.0; out.len()];
                for ((y, gr), dst) in out.data().chunks(d).zip(g.data().chunks(d)).zip(gx.chunks_mut(d)) {
                    let total: f64 = gr.iter().sum();
                    for i in 0..d {
                        dst[i] = gr[i] - y[i].exp() * total;
                    }
                }
                acc(*a, Tensor::from_parts(out.shape().to_vec(), gx));
            }
            Op::L2NormalizeLast(a) => {
                let x = self.value(*a);
                let d = *out.shape().last().unwrap_or(&1);
                let mut gx = vec![0.0; out.len()];
                for (((xr, y), gr), dst) in x
                    .data()
                    .chunks(d)
                    .zip(out.data().chunks(d))
                    .zip(g.data().chunks(d))
                    .zip(gx.chunks_mut(d))
                {
                    let norm = xr.iter().map(|v| v * v).sum::<f64>().sqrt();
                    let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for i in 0..d {
                        dst[i] = (gr[i] - y[i] * dot) / norm;
                    }
                }
                acc(*a, Tensor::from_parts(out.shape().to_vec(), gx));
            }
            Op::Gather(a, indices) => {
                let mut ga = Tensor::zeros(self.shape(*a));
                for (&i, &gv) in indices.iter().zip(g.data()) {
                    ga.data_mut()[i] += gv;
                }
                acc(*a, ga);
            }
            Op::Concat { parts, axis } => {
                let shape = out.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let total = shape[*axis] * inner;
                let mut start = 0;
                for &p in parts {
                    let ps = self.shape(p).to_vec();
                    let len = ps[*axis] * inner;
                    if self.rg(p) {
                        let mut gp = Vec::with_capacity(outer * len);
                        for o in 0..outer {
                            gp.extend_from_slice(&g.data()[o * total + start..o * total + start + len]);
                        }
                        acc(p, Tensor::from_parts(ps, gp));
                    }
                    start += len;
                }
            }
            Op::Conv2d { x, w, b, geom } => {
                let grads_c = tensor::conv2d_backward(
                    self.value(*x),
                    self.value(*w),
                    g,
                    geom,
                    self.rg(*x),
                    self.rg(*w),
                    b.is_some_and(|b| self.rg(b)),
                );
                if let Some(t) = grads_c.input {
                    acc(*x, t);
                }
                if let Some(t) = grads_c.weight {
                    acc(*w, t);
                }
                if let (Some(b), Some(t)) = (b, grads_c.bias) {
                    acc(*b, t);
                }
            }
            Op::Upsample2x(x) => acc(*x, tensor::upsample2x_backward(g)),
            Op::Embed { codebook, indices } => {
                let cb_shape = self.shape(*codebook).to_vec();
                let c = cb_shape[1];
                let [_, _, h, w] = g.dims4();
                let hw = h * w;
                let mut gc = Tensor::zeros(&cb_shape);
                for (pos, &idx) in indices.iter().enumerate() {
                    let (b, s) = (pos / hw, pos % hw);
                    for ch in 0..c {
                        gc.data_mut()[idx * c + ch] += g.data()[(b * c + ch) * hw + s];
                    }
                }
                acc(*codebook, gc);
            }
            Op::StraightThrough { continuous } => acc(*continuous, g.clone()),
            Op::WeightedSum { weights, items } => {
                let [b, c, h, w] = g.dims4();
                let k = items.len();
                let hw = h * w;
                let wv = self.value(*weights).data();
                if self.rg(*weights) {
                    let mut gw = vec![0.0; b * k * hw];
                    for (ki, &it) in items.iter().enumerate() {
                        let src = self.value(it).data();
                        for n in 0..b {
                            for ch in 0..c {
                                let base = (n * c + ch) * hw;
                                let wrow = &mut gw[(n * k + ki) * hw..(n * k + ki + 1) * hw];
                                for s in 0..hw {
                                    wrow[s] += g.data()[base + s] * src[base + s];
                                }
                            }
                        }
                    }
                    acc(*weights, Tensor::from_parts(vec![b, k, h, w], gw));
                }
                for (ki, &it) in items.iter().enumerate() {
                    if !self.rg(it) {
                        continue;
                    }
                    let mut gi = vec![0.0; g.len()];
                    for n in 0..b {
                        let wrow = &wv[(n * k + ki) * hw..(n * k + ki + 1) * hw];
                        for ch in 0..c {
                            let base = (n * c + ch) * hw;
                            for s in 0..hw {
                                gi[base + s] = g.data()[base + s] * wrow[s];
                            }
                        }
                    }
                    acc(it, Tensor::from_parts(g.shape().to_vec(), gi));
                }
            }
        }
    }
}

fn softmax_rows(t: &Tensor, log: bool) -> Tensor {
    let d = *t.shape().last().unwrap_or(&1);
    let mut out = t.data().to_vec();
    for row in out.chunks_mut(d) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
        if log {
            let lse = max + sum.ln();
            row.iter_mut().for_each(|v| *v -= lse);
        } else {
            row.iter_mut().for_each(|v| *v = (*v - max).exp() / sum);
        }
    }
    Tensor::from_parts(t.shape().to_vec(), out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Checks the analytic gradient of `f` at `inputs` against central differences.
    fn check(inputs: Vec<Tensor>, f: impl Fn(&mut Graph, &[Var]) -> Var) {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
        let loss = f(&mut g, &vars);
        let grads = g.backward(loss);
        let h = 1e-6;
        for (vi, t) in inputs.iter().enumerate() {
            let analytic = grads.get(vars[vi]).cloned().unwrap_or_else(|| Tensor::zeros(t.shape()));
            for i in 0..t.len() {
                let eval = |delta: f64| {
                    let mut g = Graph::new();
                    let vars: Vec<Var> = inputs
                        .iter()
                        .enumerate()
                        .map(|(j, t)| {
                            let mut t = t.clone();
                            if j == vi {
                                t.data_mut()[i] += delta;
                            }
                            g.param(t)
                        })
                        .collect();
                    let l = f(&mut g, &vars);
                    g.value(l).item()
                };
                let numeric = (eval(h) - eval(-h)) / (2.0 * h);
                let a = analytic.data()[i];
                let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
                assert!(err < 1e-5, "input {vi} elem {i}: analytic {a} numeric {numeric}");
            }
        }
    }

    #[test]
    fn conv_and_upsample_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random(&[2, 2, 5, 5], &mut rng);
        let w = random(&[3, 2, 3, 3], &mut rng);
        let b = random(&[3], &mut rng);
        check(vec![x, w, b], |g, v| {
            let y = g.conv2d(v[0], v[1], Some(v[2]), 2, 1).unwrap();
            let y = g.upsample2x(y);
            let y = g.silu(y);
            let y = g.square(y);
            g.mean(y)
        });
    }

    #[test]
    fn matmul_gradients_all_transpose_modes() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
            let a = random(if ta { &[2, 4, 3] } else { &[2, 3, 4] }, &mut rng);
            let b = random(if tb { &[2, 5, 4] } else { &[2, 4, 5] }, &mut rng);
            check(vec![a, b], move |g, v| {
                let y = g.matmul(v[0], v[1], ta, tb).unwrap();
                let y = g.softmax_last(y);
                let y = g.square(y);
                g.sum(y)
            });
        }
    }

    #[test]
    fn normalize_logsoftmax_gather_concat_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random(&[3, 4], &mut rng);
        let b = random(&[2, 4], &mut rng);
        check(vec![a, b], |g, v| {
            let c = g.concat(&[v[0], v[1]], 0).unwrap();
            let n = g.l2_normalize_last(c).unwrap();
            let s = g.gather(n, vec![0, 5, 7, 2, 19, 3], &[2, 3]).unwrap();
            let l = g.log_softmax_last(s);
            let p = g.permute(l, &[1, 0]);
            let p = g.gather(p, vec![0, 1], &[2]).unwrap();
            g.mean(p)
        });
    }

    #[test]
    fn embed_weighted_sum_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cb = random(&[4, 3], &mut rng);
        let w = random(&[1, 2, 2, 2], &mut rng);
        let other = random(&[1, 3, 2, 2], &mut rng);
        check(vec![cb, w, other], |g, v| {
            let q = g.embed(v[0], vec![0, 3, 3, 1], 1, 2, 2).unwrap();
            let s = g.weighted_sum(v[1], &[q, v[2]]).unwrap();
            let s = g.abs(s);
            let c = g.concat(&[s, v[2]], 1).unwrap();
            let c = g.relu(c);
            g.mean(c)
        });
    }

    #[test]
    fn straight_through_passes_identity_gradient() {
        let mut g = Graph::new();
        let cont = g.param(Tensor::new(vec![2], vec![0.1, 0.2]).unwrap());
        let quant = g.constant(Tensor::new(vec![2], vec![0.0, 0.0]).unwrap());
        let st = g.straight_through(cont, quant).unwrap();
        assert_eq!(g.value(st).data(), &[0.0, 0.0]);
        let loss = g.sum(st);
        let grads = g.backward(loss);
        assert_eq!(grads.get(cont).unwrap().data(), &[1.0, 1.0]);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::new();
        let p = g.param(Tensor::full(&[2], 3.0));
        let d = g.detach(p);
        let y = g.mul(p, d).unwrap();
        let loss = g.sum(y);
        let grads = g.backward(loss);
        assert!(grads.get(d).is_none() || !g.requires_grad(d));
        assert_eq!(grads.get(p).unwrap().data(), &[3.0, 3.0]);
    }
}
