//! Dynamic reverse-mode tape.
//!
//! A [`Tape`] is rebuilt for every forward pass. Each operation appends a node
//! holding its value and the handles of its inputs; [`Tape::backward`] walks
//! the nodes in reverse creation order, which is always a valid topological
//! order because nodes can only refer to earlier nodes.
//!
//! Gradients are kept only for leaves created with `requires_grad`. Calling
//! `backward` twice without [`Tape::zero_grad`] accumulates into those leaves.

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Norms below this are treated as zero by `cosine` and `normalize`.
pub const NORM_EPS: f64 = 1e-12;

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
    MatMul(Var, Var),
    Conv1d { x: Var, filters: Var, bias: Var },
    Softmax { x: Var, mask: Option<Vec<bool>> },
    Cosine(Var, Var),
    Dot(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MulScalar(Var, Var),
    AddScalar(Var, Var),
    Scale(Var, f64),
    Tanh(Var),
    Relu(Var),
    Exp(Var),
    Log(Var),
    Sum(Var),
    Mean(Var),
    MeanRows(Var),
    Concat { parts: Vec<Var>, axis: usize },
    Gather { src: Var, rows: Vec<usize> },
    Reshape(Var),
    Element(Var, usize),
    Row(Var, usize),
    Normalize(Var),
    Euclidean(Var, Var),
    ClampMin(Var, f64),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
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

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    /// Records a leaf. Its gradient is tracked iff `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        let needs = tensor.requires_grad();
        let value = if needs {
            tensor
        } else {
            // Drop any stale grad buffer a caller might have attached.
            tensor.with_requires_grad(false)
        };
        self.push(value, Op::Leaf, needs)
    }

    /// Records a trainable leaf holding a copy of `param`'s values.
    pub fn param(&mut self, param: &Tensor) -> Var {
        let t = Tensor::new(param.shape().to_vec(), param.data().to_vec())
            .expect("tensor invariant")
            .with_requires_grad(true);
        self.push(t, Op::Leaf, true)
    }

    /// Records a constant (never differentiated) leaf.
    pub fn constant(&mut self, tensor: Tensor) -> Var {
        self.leaf(tensor.with_requires_grad(false))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Value of a one-element node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    /// Accumulated gradient of a `requires_grad` leaf.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.value.zero_grad();
        }
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let src = &self.nodes[x.0].value;
        let data = src.data().iter().map(|&v| f(v)).collect();
        let t = Tensor::new(src.shape().to_vec(), data).expect("same shape");
        let ng = self.ng(x);
        self.push(t, op, ng)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(t, op, ng))
    }

    fn require_scalar(&self, op: &'static str, s: Var) -> Result<()> {
        if self.value(s).len() != 1 {
            return Err(Error::dim(op, self.shape(s), &[]));
        }
        Ok(())
    }

    /// `a[m×k] · b[k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dim("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = matmul_raw(self.data(a), self.data(b), m, k, n);
        let t = Tensor::new(vec![m, n], out)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(t, Op::MatMul(a, b), ng))
    }

    /// Same-length 1-D convolution over the rows of `x[l×d_in]` with
    /// `filters[w×d_in×d_out]`, zero-padding `(w-1)/2` rows on each side.
    pub fn conv1d_same(&mut self, x: Var, filters: Var, bias: Var) -> Result<Var> {
        let (sx, sf, sb) = (self.shape(x), self.shape(filters), self.shape(bias));
        if sf.len() != 3 {
            return Err(Error::dim("conv1d_same", sx, sf));
        }
        let (w, din, dout) = (sf[0], sf[1], sf[2]);
        if w % 2 == 0 {
            return Err(Error::Config(format!(
                "conv1d_same needs an odd window, got {w}"
            )));
        }
        if sx.len() != 2 || sx[1] != din || sx[0] == 0 {
            return Err(Error::dim("conv1d_same", sx, sf));
        }
        if sb != [dout] {
            return Err(Error::dim("conv1d_same", sf, sb));
        }
        let l = sx[0];
        let pad = (w - 1) / 2;
        let (xd, fd, bd) = (self.data(x), self.data(filters), self.data(bias));
        let mut out = Vec::with_capacity(l * dout);
        for _ in 0..l {
            out.extend_from_slice(bd);
        }
        for t in 0..l {
            let orow = &mut out[t * dout..(t + 1) * dout];
            for j in 0..w {
                let src = t + j;
                if src < pad || src - pad >= l {
                    continue;
                }
                let xrow = &xd[(src - pad) * din..(src - pad + 1) * din];
                for (i, &xv) in xrow.iter().enumerate() {
                    if xv == 0.0 {
                        continue;
                    }
                    let frow = &fd[(j * din + i) * dout..(j * din + i + 1) * dout];
                    for (o, fv) in orow.iter_mut().zip(frow) {
                        *o += xv * fv;
                    }
                }
            }
        }
        let t = Tensor::new(vec![l, dout], out)?;
        let ng = self.ng(x) || self.ng(filters) || self.ng(bias);
        Ok(self.push(t, Op::Conv1d { x, filters, bias }, ng))
    }

    /// Max-stabilised softmax over all entries of `x`. Masked (`false`)
    /// positions get exactly zero.
    pub fn softmax(&mut self, x: Var, mask: Option<&[bool]>) -> Result<Var> {
        let xd = self.data(x);
        if let Some(m) = mask {
            if m.len() != xd.len() {
                return Err(Error::dim("softmax", self.shape(x), &[m.len()]));
            }
            if !m.iter().any(|&b| b) {
                return Err(Error::InvalidMask("every position is masked".into()));
            }
        }
        if xd.is_empty() {
            return Err(Error::InvalidMask("softmax over zero positions".into()));
        }
        let live = |i: usize| mask.is_none_or(|m| m[i]);
        let max = xd
            .iter()
            .enumerate()
            .filter(|(i, _)| live(*i))
            .map(|(_, &v)| v)
            .fold(f64::NEG_INFINITY, f64::max);
        let mut out: Vec<f64> = xd
            .iter()
            .enumerate()
            .map(|(i, &v)| if live(i) { (v - max).exp() } else { 0.0 })
            .collect();
        let z: f64 = out.iter().sum();
        out.iter_mut().for_each(|v| *v /= z);
        let t = Tensor::new(self.shape(x).to_vec(), out)?;
        let ng = self.ng(x);
        Ok(self.push(
            t,
            Op::Softmax {
                x,
                mask: mask.map(<[bool]>::to_vec),
            },
            ng,
        ))
    }

    /// `u·v / (‖u‖‖v‖)`, or 0 when either norm is below [`NORM_EPS`].
    pub fn cosine(&mut self, u: Var, v: Var) -> Result<Var> {
        self.same_shape("cosine", u, v)?;
        let c = cosine_raw(self.data(u), self.data(v));
        let ng = self.ng(u) || self.ng(v);
        Ok(self.push(Tensor::scalar(c), Op::Cosine(u, v), ng))
    }

    pub fn dot(&mut self, u: Var, v: Var) -> Result<Var> {
        self.same_shape("dot", u, v)?;
        let d = dot(self.data(u), self.data(v));
        let ng = self.ng(u) || self.ng(v);
        Ok(self.push(Tensor::scalar(d), Op::Dot(u, v), ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// `x * s` for a one-element `s`.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        self.require_scalar("mul_scalar", s)?;
        let sv = self.scalar(s);
        let t = Tensor::new(
            self.shape(x).to_vec(),
            self.data(x).iter().map(|v| v * sv).collect(),
        )?;
        let ng = self.ng(x) || self.ng(s);
        Ok(self.push(t, Op::MulScalar(x, s), ng))
    }

    /// `x + s` for a one-element `s`.
    pub fn add_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        self.require_scalar("add_scalar", s)?;
        let sv = self.scalar(s);
        let t = Tensor::new(
            self.shape(x).to_vec(),
            self.data(x).iter().map(|v| v + sv).collect(),
        )?;
        let ng = self.ng(x) || self.ng(s);
        Ok(self.push(t, Op::AddScalar(x, s), ng))
    }

    /// `x * c` for a constant `c`.
    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, |v| v * c, Op::Scale(x, c))
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.scale(x, -1.0)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, f64::tanh, Op::Tanh(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, f64::exp, Op::Exp(x))
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, f64::ln, Op::Log(x))
    }

    /// `max(x, c)` elementwise; no gradient flows where the floor is active.
    pub fn clamp_min(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, |v| v.max(c), Op::ClampMin(x, c))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.data(x).iter().sum();
        let ng = self.ng(x);
        self.push(Tensor::scalar(s), Op::Sum(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let d = self.data(x);
        let s = d.iter().sum::<f64>() / d.len() as f64;
        let ng = self.ng(x);
        self.push(Tensor::scalar(s), Op::Mean(x), ng)
    }

    /// Column means of a matrix: `[r×c] -> [c]`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 || s[0] == 0 {
            return Err(Error::dim("mean_rows", s, &[]));
        }
        let (r, c) = (s[0], s[1]);
        let d = self.data(x);
        let mut out = vec![0.0; c];
        for i in 0..r {
            for (o, v) in out.iter_mut().zip(&d[i * c..(i + 1) * c]) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|v| *v /= r as f64);
        let ng = self.ng(x);
        Ok(self.push(Tensor::vector(out), Op::MeanRows(x), ng))
    }

    /// Concatenates tensors along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::dim("concat", &base, &[axis]));
        }
        let mut total = 0;
        for p in parts {
            let s = self.shape(*p);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::dim("concat", &base, s));
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let chunk = self.shape(*p)[axis] * inner;
                out.extend_from_slice(&self.data(*p)[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let ng = parts.iter().any(|p| self.ng(*p));
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            ng,
        ))
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("stack of zero tensors".into()))?;
        let mut shape = vec![1];
        shape.extend_from_slice(self.shape(*first));
        let lifted = parts
            .iter()
            .map(|p| self.reshape(*p, shape.clone()))
            .collect::<Result<Vec<_>>>()?;
        self.concat(&lifted, 0)
    }

    /// Selects rows of `src[v×d]` by index: `[len(rows)×d]`.
    pub fn gather_rows(&mut self, src: Var, rows: &[usize]) -> Result<Var> {
        let s = self.shape(src);
        if s.len() != 2 {
            return Err(Error::dim("gather_rows", s, &[]));
        }
        let (v, d) = (s[0], s[1]);
        if let Some(&bad) = rows.iter().find(|&&r| r >= v) {
            return Err(Error::dim("gather_rows", s, &[bad]));
        }
        let sd = self.data(src);
        let mut out = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            out.extend_from_slice(&sd[r * d..(r + 1) * d]);
        }
        let ng = self.ng(src);
        Ok(self.push(
            Tensor::new(vec![rows.len(), d], out)?,
            Op::Gather {
                src,
                rows: rows.to_vec(),
            },
            ng,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != self.value(x).len() {
            return Err(Error::dim("reshape", self.shape(x), &shape));
        }
        let t = Tensor::new(shape, self.data(x).to_vec())?;
        let ng = self.ng(x);
        Ok(self.push(t, Op::Reshape(x), ng))
    }

    /// The `i`-th entry of the flattened tensor, as a scalar.
    pub fn element(&mut self, x: Var, i: usize) -> Result<Var> {
        let d = self.data(x);
        let v = *d
            .get(i)
            .ok_or_else(|| Error::dim("element", self.shape(x), &[i]))?;
        let ng = self.ng(x);
        Ok(self.push(Tensor::scalar(v), Op::Element(x, i), ng))
    }

    /// Row `i` of a matrix, as a vector.
    pub fn row(&mut self, x: Var, i: usize) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 || i >= s[0] {
            return Err(Error::dim("row", s, &[i]));
        }
        let c = s[1];
        let v = self.data(x)[i * c..(i + 1) * c].to_vec();
        let ng = self.ng(x);
        Ok(self.push(Tensor::vector(v), Op::Row(x, i), ng))
    }

    /// `x / ‖x‖`, or zeros when `‖x‖ <` [`NORM_EPS`].
    pub fn normalize(&mut self, x: Var) -> Var {
        let d = self.data(x);
        let n = norm(d);
        let out = if n < NORM_EPS {
            vec![0.0; d.len()]
        } else {
            d.iter().map(|v| v / n).collect()
        };
        let t = Tensor::new(self.shape(x).to_vec(), out).expect("same shape");
        let ng = self.ng(x);
        self.push(t, Op::Normalize(x), ng)
    }

    /// `‖u − v‖₂`. The gradient at coincident points is taken as zero.
    pub fn euclidean_distance(&mut self, u: Var, v: Var) -> Result<Var> {
        self.same_shape("euclidean_distance", u, v)?;
        let d = self
            .data(u)
            .iter()
            .zip(self.data(v))
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        let ng = self.ng(u) || self.ng(v);
        Ok(self.push(Tensor::scalar(d), Op::Euclidean(u, v), ng))
    }

    /// Back-propagates from a one-element `loss`, adding into the gradient
    /// buffers of every `requires_grad` leaf it depends on.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        let mut leaf_grads = Vec::new();

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            self.propagate(i, &g, &mut grads);
            if matches!(node.op, Op::Leaf) {
                leaf_grads.push((i, g));
            }
        }
        for (i, g) in leaf_grads {
            self.nodes[i].value.accumulate_grad(&g)?;
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let y = node.value.data();
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            let buf = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.len()]);
            f(buf);
        };

        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                let (ad, bd) = (self.data(*a), self.data(*b));
                acc(*a, &mut |ga| {
                    for r in 0..m {
                        for p in 0..k {
                            ga[r * k + p] += dot(&g[r * n..(r + 1) * n], &bd[p * n..(p + 1) * n]);
                        }
                    }
                });
                acc(*b, &mut |gb| {
                    for r in 0..m {
                        for p in 0..k {
                            let av = ad[r * k + p];
                            for c in 0..n {
                                gb[p * n + c] += av * g[r * n + c];
                            }
                        }
                    }
                });
            }
            Op::Conv1d { x, filters, bias } => {
                let sf = self.shape(*filters);
                let (w, din, dout) = (sf[0], sf[1], sf[2]);
                let l = self.shape(*x)[0];
                let pad = (w - 1) / 2;
                let (xd, fd) = (self.data(*x), self.data(*filters));
                let taps = |t: usize, j: usize| {
                    let src = t + j;
                    (src >= pad && src - pad < l).then(|| src - pad)
                };
                acc(*x, &mut |gx| {
                    for t in 0..l {
                        let grow = &g[t * dout..(t + 1) * dout];
                        for j in 0..w {
                            let Some(s) = taps(t, j) else { continue };
                            for ii in 0..din {
                                let frow = &fd[(j * din + ii) * dout..(j * din + ii + 1) * dout];
                                gx[s * din + ii] += dot(grow, frow);
                            }
                        }
                    }
                });
                acc(*filters, &mut |gf| {
                    for t in 0..l {
                        let grow = &g[t * dout..(t + 1) * dout];
                        for j in 0..w {
                            let Some(s) = taps(t, j) else { continue };
                            for ii in 0..din {
                                let xv = xd[s * din + ii];
                                if xv == 0.0 {
                                    continue;
                                }
                                let base = (j * din + ii) * dout;
                                for (o, gv) in grow.iter().enumerate() {
                                    gf[base + o] += xv * gv;
                                }
                            }
                        }
                    }
                });
                acc(*bias, &mut |gb| {
                    for t in 0..l {
                        for (o, gv) in g[t * dout..(t + 1) * dout].iter().enumerate() {
                            gb[o] += gv;
                        }
                    }
                });
            }
            Op::Softmax { x, mask } => {
                let s = dot(g, y);
                acc(*x, &mut |gx| {
                    for (k, gxk) in gx.iter_mut().enumerate() {
                        if mask.as_ref().is_none_or(|m| m[k]) {
                            *gxk += y[k] * (g[k] - s);
                        }
                    }
                });
            }
            Op::Cosine(u, v) => {
                let (ud, vd) = (self.data(*u), self.data(*v));
                let (nu, nv) = (norm(ud), norm(vd));
                if nu < NORM_EPS || nv < NORM_EPS {
                    return;
                }
                let c = y[0];
                let go = g[0];
                acc(*u, &mut |gu| {
                    for k in 0..gu.len() {
                        gu[k] += go * (vd[k] / (nu * nv) - c * ud[k] / (nu * nu));
                    }
                });
                acc(*v, &mut |gv| {
                    for k in 0..gv.len() {
                        gv[k] += go * (ud[k] / (nu * nv) - c * vd[k] / (nv * nv));
                    }
                });
            }
            Op::Dot(u, v) => {
                let (ud, vd) = (self.data(*u), self.data(*v));
                acc(*u, &mut |gu| gu.iter_mut().zip(vd).for_each(|(a, b)| *a += g[0] * b));
                acc(*v, &mut |gv| gv.iter_mut().zip(ud).for_each(|(a, b)| *a += g[0] * b));
            }
            Op::Add(a, b) => {
                acc(*a, &mut |ga| ga.iter_mut().zip(g).for_each(|(x, gv)| *x += gv));
                acc(*b, &mut |gb| gb.iter_mut().zip(g).for_each(|(x, gv)| *x += gv));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |ga| ga.iter_mut().zip(g).for_each(|(x, gv)| *x += gv));
                acc(*b, &mut |gb| gb.iter_mut().zip(g).for_each(|(x, gv)| *x -= gv));
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (self.data(*a), self.data(*b));
                acc(*a, &mut |ga| {
                    for k in 0..ga.len() {
                        ga[k] += g[k] * bd[k];
                    }
                });
                acc(*b, &mut |gb| {
                    for k in 0..gb.len() {
                        gb[k] += g[k] * ad[k];
                    }
                });
            }
            Op::MulScalar(x, s) => {
                let sv = self.data(*s)[0];
                let xd = self.data(*x);
                acc(*x, &mut |gx| gx.iter_mut().zip(g).for_each(|(a, gv)| *a += gv * sv));
                acc(*s, &mut |gs| gs[0] += dot(g, xd));
            }
            Op::AddScalar(x, s) => {
                acc(*x, &mut |gx| gx.iter_mut().zip(g).for_each(|(a, gv)| *a += gv));
                acc(*s, &mut |gs| gs[0] += g.iter().sum::<f64>());
            }
            Op::Scale(x, c) => {
                acc(*x, &mut |gx| gx.iter_mut().zip(g).for_each(|(a, gv)| *a += gv * c));
            }
            Op::Tanh(x) => acc(*x, &mut |gx| {
                for k in 0..gx.len() {
                    gx[k] += g[k] * (1.0 - y[k] * y[k]);
                }
            }),
            Op::Relu(x) => {
                let xd = self.data(*x);
                acc(*x, &mut |gx| {
                    for k in 0..gx.len() {
                        if xd[k] > 0.0 {
                            gx[k] += g[k];
                        }
                    }
                });
            }
            Op::Exp(x) => acc(*x, &mut |gx| {
                for k in 0..gx.len() {
                    gx[k] += g[k] * y[k];
                }
            }),
            Op::Log(x) => {
                let xd = self.data(*x);
                acc(*x, &mut |gx| {
                    for k in 0..gx.len() {
                        gx[k] += g[k] / xd[k];
                    }
                });
            }
            Op::ClampMin(x, c) => {
                let xd = self.data(*x);
                acc(*x, &mut |gx| {
                    for k in 0..gx.len() {
                        if xd[k] > *c {
                            gx[k] += g[k];
                        }
                    }
                });
            }
            Op::Sum(x) => acc(*x, &mut |gx| gx.iter_mut().for_each(|a| *a += g[0])),
            Op::Mean(x) => {
                let n = self.value(*x).len() as f64;
                acc(*x, &mut |gx| gx.iter_mut().for_each(|a| *a += g[0] / n));
            }
            Op::MeanRows(x) => {
                let (r, c) = (self.shape(*x)[0], self.shape(*x)[1]);
                acc(*x, &mut |gx| {
                    for i in 0..r {
                        for j in 0..c {
                            gx[i * c + j] += g[j] / r as f64;
                        }
                    }
                });
            }
            Op::Concat { parts, axis } => {
                let shape = node.value.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let total = shape[*axis] * inner;
                let mut offset = 0;
                for p in parts {
                    let chunk = self.shape(*p)[*axis] * inner;
                    acc(*p, &mut |gp| {
                        for o in 0..outer {
                            let src = &g[o * total + offset..o * total + offset + chunk];
                            for (a, b) in gp[o * chunk..(o + 1) * chunk].iter_mut().zip(src) {
                                *a += b;
                            }
                        }
                    });
                    offset += chunk;
                }
            }
            Op::Gather { src, rows } => {
                let d = self.shape(*src)[1];
                acc(*src, &mut |gs| {
                    for (t, &r) in rows.iter().enumerate() {
                        for j in 0..d {
                            gs[r * d + j] += g[t * d + j];
                        }
                    }
                });
            }
            Op::Reshape(x) => acc(*x, &mut |gx| gx.iter_mut().zip(g).for_each(|(a, b)| *a += b)),
            Op::Element(x, k) => acc(*x, &mut |gx| gx[*k] += g[0]),
            Op::Row(x, r) => {
                let c = self.shape(*x)[1];
                acc(*x, &mut |gx| {
                    for j in 0..c {
                        gx[r * c + j] += g[j];
                    }
                });
            }
            Op::Normalize(x) => {
                let n = norm(self.data(*x));
                if n < NORM_EPS {
                    return;
                }
                let proj = dot(y, g);
                acc(*x, &mut |gx| {
                    for k in 0..gx.len() {
                        gx[k] += (g[k] - y[k] * proj) / n;
                    }
                });
            }
            Op::Euclidean(u, v) => {
                let d = y[0];
                if d == 0.0 {
                    return;
                }
                let (ud, vd) = (self.data(*u), self.data(*v));
                acc(*u, &mut |gu| {
                    for k in 0..gu.len() {
                        gu[k] += g[0] * (ud[k] - vd[k]) / d;
                    }
                });
                acc(*v, &mut |gv| {
                    for k in 0..gv.len() {
                        gv[k] -= g[0] * (ud[k] - vd[k]) / d;
                    }
                });
            }
        }
    }
}

/// Cosine similarity on raw slices, zero for near-zero vectors.
pub fn cosine_raw(u: &[f64], v: &[f64]) -> f64 {
    let (nu, nv) = (norm(u), norm(v));
    if nu < NORM_EPS || nv < NORM_EPS {
        return 0.0;
    }
    dot(u, v) / (nu * nv)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn mat(r: usize, c: usize, d: &[f64]) -> Tensor {
        Tensor::matrix(r, c, d.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_hand_sum() {
        let mut t = Tape::new();
        let i2 = t.constant(mat(2, 2, &[1.0, 0.0, 0.0, 1.0]));
        let a = t.constant(mat(2, 2, &[1.0, 2.0, 3.0, 4.0]));
        let ia = t.matmul(i2, a).unwrap();
        assert_eq!(t.value(ia).data(), &[1.0, 2.0, 3.0, 4.0]);

        let ones = t.constant(mat(2, 1, &[1.0, 1.0]));
        let p = t.matmul(a, ones).unwrap();
        assert_eq!(t.value(p).shape(), &[2, 1]);
        assert_eq!(t.value(p).data(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::zeros(vec![2, 3]));
        let b = t.constant(Tensor::zeros(vec![2, 3]));
        match t.matmul(a, b) {
            Err(Error::Dimension { left, right, .. }) => {
                assert_eq!(left, vec![2, 3]);
                assert_eq!(right, vec![2, 3]);
            }
            other => panic!("expected dimension error, got {other:?}"),
        }
    }

    #[test]
    fn conv_direct_example() {
        let mut t = Tape::new();
        let x = t.constant(mat(3, 1, &[1.0, 2.0, 3.0]));
        let f = t.constant(Tensor::new(vec![3, 1, 1], vec![1.0; 3]).unwrap());
        let b = t.constant(Tensor::vector(vec![0.0]));
        let y = t.conv1d_same(x, f, b).unwrap();
        assert_eq!(t.value(y).data(), &[3.0, 6.0, 5.0]);
    }

    #[test]
    fn conv_zero_filters_gives_bias_rows() {
        let mut t = Tape::new();
        let x = t.constant(mat(4, 2, &[1.0, -2.0, 0.5, 3.0, 7.0, 1.0, -1.0, 2.0]));
        let f = t.constant(Tensor::zeros(vec![3, 2, 3]));
        let b = t.constant(Tensor::vector(vec![0.1, -0.2, 0.3]));
        let y = t.conv1d_same(x, f, b).unwrap();
        for r in 0..4 {
            assert_eq!(t.value(y).row(r), &[0.1, -0.2, 0.3]);
        }
    }

    #[test]
    fn conv_even_window_is_config_error() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::zeros(vec![3, 1]));
        let f = t.constant(Tensor::zeros(vec![2, 1, 1]));
        let b = t.constant(Tensor::zeros(vec![1]));
        assert!(matches!(t.conv1d_same(x, f, b), Err(Error::Config(_))));
    }

    #[test]
    fn softmax_examples() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::vector(vec![0.7; 5]));
        let y = t.softmax(x, None).unwrap();
        for v in t.value(y).data() {
            assert_abs_diff_eq!(*v, 0.2, epsilon = 1e-15);
        }

        let x = t.constant(Tensor::vector(vec![0.0, 3f64.ln()]));
        let y = t.softmax(x, None).unwrap();
        assert_abs_diff_eq!(t.value(y).data()[0], 0.25, epsilon = 1e-15);
        assert_abs_diff_eq!(t.value(y).data()[1], 0.75, epsilon = 1e-15);

        let x = t.constant(Tensor::vector(vec![1.0; 3]));
        let y = t.softmax(x, Some(&[true, false, true])).unwrap();
        assert_eq!(t.value(y).data(), &[0.5, 0.0, 0.5]);
    }

    #[test]
    fn softmax_all_masked_is_error() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::vector(vec![1.0; 3]));
        assert!(matches!(
            t.softmax(x, Some(&[false; 3])),
            Err(Error::InvalidMask(_))
        ));
    }

    #[test]
    fn softmax_survives_large_inputs() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::vector(vec![1000.0, 1000.0, -1000.0]));
        let y = t.softmax(x, None).unwrap();
        assert_eq!(t.value(y).data(), &[0.5, 0.5, 0.0]);
    }

    #[test]
    fn cosine_examples() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::vector(vec![1.0, 0.0]));
        let b = t.constant(Tensor::vector(vec![0.0, 1.0]));
        let c = t.constant(Tensor::vector(vec![1.0, 1.0]));
        let z = t.constant(Tensor::vector(vec![0.0, 0.0]));
        let ab = t.cosine(a, b).unwrap();
        let ac = t.cosine(a, c).unwrap();
        let cc = t.cosine(c, c).unwrap();
        let az = t.cosine(a, z).unwrap();
        assert_eq!(t.scalar(ab), 0.0);
        assert_abs_diff_eq!(t.scalar(ac), std::f64::consts::FRAC_1_SQRT_2, epsilon = 1e-12);
        assert_abs_diff_eq!(t.scalar(cc), 1.0, epsilon = 1e-15);
        assert_eq!(t.scalar(az), 0.0);
        let three = t.constant(Tensor::vector(vec![1.0, 2.0, 3.0]));
        assert!(matches!(t.cosine(a, three), Err(Error::Dimension { .. })));
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::zeros(vec![2, 3]).with_requires_grad(true));
        let s = t.sum(x);
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[1.0; 6]);
    }

    #[test]
    fn backward_accumulates_until_zeroed() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::vector(vec![1.0, 2.0]).with_requires_grad(true));
        let s = t.sum(x);
        t.backward(s).unwrap();
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[2.0, 2.0]);
        t.zero_grad();
        assert_eq!(t.grad(x).unwrap(), &[0.0, 0.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::vector(vec![1.0, 2.0]).with_requires_grad(true));
        assert!(matches!(t.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn constants_get_no_grad() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::vector(vec![1.0, 2.0]).with_requires_grad(true));
        let c = t.constant(Tensor::vector(vec![3.0, 4.0]));
        let p = t.mul(x, c).unwrap();
        let s = t.sum(p);
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[3.0, 4.0]);
        assert!(t.grad(c).is_none());
    }

    #[test]
    fn concat_and_stack_shapes() {
        let mut t = Tape::new();
        let a = t.constant(mat(2, 2, &[1.0, 2.0, 3.0, 4.0]));
        let b = t.constant(mat(2, 1, &[5.0, 6.0]));
        let c = t.concat(&[a, b], 1).unwrap();
        assert_eq!(t.value(c).shape(), &[2, 3]);
        assert_eq!(t.value(c).data(), &[1.0, 2.0, 5.0, 3.0, 4.0, 6.0]);
        let s1 = t.constant(Tensor::scalar(1.0));
        let s2 = t.constant(Tensor::scalar(2.0));
        let v = t.stack(&[s1, s2]).unwrap();
        assert_eq!(t.value(v).shape(), &[2]);
        assert!(t.concat(&[a, b], 0).is_err());
    }

    #[test]
    fn euclidean_at_coincident_points_has_zero_grad() {
        let mut t = Tape::new();
        let u = t.leaf(Tensor::vector(vec![1.0, 2.0]).with_requires_grad(true));
        let v = t.constant(Tensor::vector(vec![1.0, 2.0]));
        let d = t.euclidean_distance(u, v).unwrap();
        assert_eq!(t.scalar(d), 0.0);
        t.backward(d).unwrap();
        assert_eq!(t.grad(u).unwrap(), &[0.0, 0.0]);
    }
}
