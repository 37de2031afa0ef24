//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s. Values are
//! computed eagerly; [`Graph::backward`] walks the tape in reverse and
//! returns the accumulated gradients. Parameters are read directly from a
//! borrowed [`ParamStore`], so building a graph never copies weights.

use std::collections::HashMap;

use super::params::{ParamId, ParamStore};
use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Value<F> {
    Owned(Tensor<F>),
    Param(ParamId),
}

enum Op<F> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
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
        k: F,
    },
    Tanh(Var),
    Relu(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<F>,
        rstd: Vec<F>,
    },
    Gather {
        table: Var,
        idx: Vec<usize>,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Narrow {
        a: Var,
        axis: usize,
        start: usize,
    },
    Reshape(Var),
    Permute {
        a: Var,
        perm: Vec<usize>,
    },
    StopGradient,
    Sum(Var),
    SumSquares(Var),
    L2Norm(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Vec<F>,
        count: usize,
    },
}

struct Node<F> {
    value: Value<F>,
    op: Op<F>,
    requires_grad: bool,
}

/// Recorded or replayed stop-gradient outputs, used by gradient checks that
/// hold `sg[...]` terms constant while probing.
pub(crate) enum SgMode<F> {
    Off,
    Record(Vec<Tensor<F>>),
    Replay(Vec<Tensor<F>>, usize),
}

pub struct Graph<'p, F: Real> {
    store: Option<&'p ParamStore<F>>,
    nodes: Vec<Node<F>>,
    params: HashMap<ParamId, Var>,
    grad_enabled: bool,
    nonfinite: Option<String>,
    sg: SgMode<F>,
}

impl<'p, F: Real> Graph<'p, F> {
    /// Graph without parameters; only explicit inputs.
    pub fn new() -> Self {
        Graph {
            store: None,
            nodes: Vec::new(),
            params: HashMap::new(),
            grad_enabled: true,
            nonfinite: None,
            sg: SgMode::Off,
        }
    }

    pub fn with_params(store: &'p ParamStore<F>) -> Self {
        Graph {
            store: Some(store),
            ..Self::new()
        }
    }

    /// Forward-only graph: nothing requires a gradient.
    pub fn inference(store: &'p ParamStore<F>) -> Self {
        Graph {
            grad_enabled: false,
            ..Self::with_params(store)
        }
    }

    pub(crate) fn set_sg_mode(&mut self, mode: SgMode<F>) {
        self.sg = mode;
    }

    pub(crate) fn take_sg_record(&mut self) -> Vec<Tensor<F>> {
        match std::mem::replace(&mut self.sg, SgMode::Off) {
            SgMode::Record(v) => v,
            _ => Vec::new(),
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        match &self.nodes[v.0].value {
            Value::Owned(t) => t,
            Value::Param(id) => self.store.expect("param node without store").tensor(*id),
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    /// Scalar value of a one-element node.
    pub fn scalar(&self, v: Var) -> F {
        self.value(v).data()[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// First non-finite operation seen (checked in debug builds only).
    pub fn check_finite(&self) -> Result<()> {
        match &self.nonfinite {
            Some(op) => Err(Error::NonFinite(op.clone())),
            None => Ok(()),
        }
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, requires_grad: bool, name: &str) -> Var {
        if cfg!(debug_assertions) && self.nonfinite.is_none() && !value.all_finite() {
            self.nonfinite = Some(name.to_string());
        }
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
            requires_grad: requires_grad && self.grad_enabled,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    // ---- leaves ---------------------------------------------------------

    pub fn input(&mut self, t: Tensor<F>, requires_grad: bool) -> Var {
        self.push(t, Op::Leaf, requires_grad, "input")
    }

    pub fn constant(&mut self, t: Tensor<F>) -> Var {
        self.input(t, false)
    }

    /// Leaf bound to a stored parameter. Repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let store = self.store.expect("graph has no parameter store");
        let requires_grad = self.grad_enabled && !store.get(id).frozen;
        self.nodes.push(Node {
            value: Value::Param(id),
            op: Op::Leaf,
            requires_grad,
        });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(id, v);
        v
    }

    // ---- linear algebra ---------------------------------------------------

    /// Batched matrix product over the last two axes. `b` may be 2-D (shared
    /// across the batch) or carry the same leading axes as `a`. `ta`/`tb`
    /// transpose the trailing matrices.
    pub fn matmul(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let ash = self.shape(a).to_vec();
        let bsh = self.shape(b).to_vec();
        if ash.len() < 2 || bsh.len() < 2 {
            return Err(Error::shape("matmul", format!("{ash:?} x {bsh:?}")));
        }
        let (ar, ac) = (ash[ash.len() - 2], ash[ash.len() - 1]);
        let (br, bc) = (bsh[bsh.len() - 2], bsh[bsh.len() - 1]);
        let (n, k) = if ta { (ac, ar) } else { (ar, ac) };
        let (kb, m) = if tb { (bc, br) } else { (br, bc) };
        let lead = &ash[..ash.len() - 2];
        let b_shared = bsh.len() == 2;
        if k != kb || (!b_shared && &bsh[..bsh.len() - 2] != lead) {
            return Err(Error::shape("matmul", format!("{ash:?} x {bsh:?} (ta={ta}, tb={tb})")));
        }
        let nb: usize = lead.iter().product();
        let mut out = vec![F::zero(); nb * n * m];
        {
            let ad = self.value(a).data();
            let bd = self.value(b).data();
            let av = mat_view(ac, ta);
            let bv = mat_view(bc, tb);
            if b_shared && !ta {
                gemm(nb * n, k, m, ad, 0, av, bd, 0, bv, &mut out, 0, F::zero());
            } else {
                for bi in 0..nb {
                    let boff = if b_shared { 0 } else { bi * br * bc };
                    gemm(
                        n,
                        k,
                        m,
                        ad,
                        bi * ar * ac,
                        av,
                        bd,
                        boff,
                        bv,
                        &mut out,
                        bi * n * m,
                        F::zero(),
                    );
                }
            }
        }
        let mut shape = lead.to_vec();
        shape.extend([n, m]);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::new(shape, out)?, Op::MatMul { a, b, ta, tb }, rg, "matmul"))
    }

    /// `x @ w^T` for a weight stored `[out, in]`.
    pub fn linear(&mut self, x: Var, w: Var) -> Result<Var> {
        self.matmul(x, w, false, true)
    }

    /// `x @ w^T + bias`.
    pub fn affine(&mut self, x: Var, w: Var, bias: Var) -> Result<Var> {
        let y = self.linear(x, w)?;
        self.add(y, bias)
    }

    // ---- elementwise ------------------------------------------------------

    fn check_broadcast(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (ash, bsh) = (self.shape(a), self.shape(b));
        if bsh.len() > ash.len() || &ash[ash.len() - bsh.len()..] != bsh {
            return Err(Error::shape(op, format!("{ash:?} with {bsh:?}")));
        }
        Ok(())
    }

    fn binary(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(F, F) -> F) -> Result<Vec<F>> {
        self.check_broadcast(name, a, b)?;
        let ad = self.value(a).data();
        let bd = self.value(b).data();
        let bl = bd.len();
        let mut out = Vec::with_capacity(ad.len());
        for chunk in ad.chunks_exact(bl) {
            out.extend(chunk.iter().zip(bd).map(|(&x, &y)| f(x, y)));
        }
        Ok(out)
    }

    /// `a + b`, where `b`'s shape is a suffix of `a`'s (broadcast over the
    /// leading axes).
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary("add", a, b, |x, y| x + y)?;
        let shape = self.shape(a).to_vec();
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::new(shape, out)?, Op::Add { a, b }, rg, "add"))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary("sub", a, b, |x, y| x - y)?;
        let shape = self.shape(a).to_vec();
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::new(shape, out)?, Op::Sub { a, b }, rg, "sub"))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary("mul", a, b, |x, y| x * y)?;
        let shape = self.shape(a).to_vec();
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::new(shape, out)?, Op::Mul { a, b }, rg, "mul"))
    }

    pub fn scale(&mut self, a: Var, k: F) -> Var {
        let t = self.value(a);
        let out = t.data().iter().map(|&x| x * k).collect();
        let shape = t.shape().to_vec();
        let rg = self.any_grad(&[a]);
        self.push(Tensor::new(shape, out).expect("shape"), Op::Scale { a, k }, rg, "scale")
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let out = t.data().iter().map(|&x| x.tanh()).collect();
        let shape = t.shape().to_vec();
        let rg = self.any_grad(&[a]);
        self.push(Tensor::new(shape, out).expect("shape"), Op::Tanh(a), rg, "tanh")
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let out = t
            .data()
            .iter()
            .map(|&x| if x > F::zero() { x } else { F::zero() })
            .collect();
        let shape = t.shape().to_vec();
        let rg = self.any_grad(&[a]);
        self.push(Tensor::new(shape, out).expect("shape"), Op::Relu(a), rg, "relu")
    }

    /// Multiplies by a fixed keep-mask scaled by `1/(1-p)`.
    pub fn dropout<R: rand::Rng>(&mut self, a: Var, p: f64, rng: &mut R) -> Result<Var> {
        if p <= 0.0 || !self.grad_enabled {
            return Ok(a);
        }
        let keep = F::of(1.0 / (1.0 - p));
        let shape = self.shape(a).to_vec();
        let n: usize = shape.iter().product();
        let mask: Vec<F> = (0..n)
            .map(|_| if rng.random::<f64>() < p { F::zero() } else { keep })
            .collect();
        let m = self.constant(Tensor::new(shape, mask)?);
        self.mul(a, m)
    }

    // ---- normalization ----------------------------------------------------

    /// Softmax over the last axis. With a mask (same length as the input,
    /// `true` = keep), masked entries get probability zero; a fully masked
    /// row yields zeros.
    pub fn softmax(&mut self, a: Var, mask: Option<Vec<bool>>) -> Result<Var> {
        let t = self.value(a);
        let c = t.cols();
        if let Some(m) = &mask {
            if m.len() != t.len() {
                return Err(Error::shape("softmax", format!("mask {} vs {}", m.len(), t.len())));
            }
        }
        let mut out = vec![F::zero(); t.len()];
        for (r, (row, o)) in t.data().chunks(c).zip(out.chunks_mut(c)).enumerate() {
            let keep = |j: usize| mask.as_ref().is_none_or(|m| m[r * c + j]);
            softmax_row(row, o, keep);
        }
        let shape = t.shape().to_vec();
        let rg = self.any_grad(&[a]);
        Ok(self.push(Tensor::new(shape, out)?, Op::Softmax(a), rg, "softmax"))
    }

    /// Layer normalization over the last axis with affine `gain`/`bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let t = self.value(x);
        let d = t.cols();
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(Error::shape("layer_norm", format!("width {d}")));
        }
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let eps = F::of(eps);
        let dn = F::of(d as f64);
        let rows = t.len() / d;
        let mut out = vec![F::zero(); t.len()];
        let mut xhat = vec![F::zero(); t.len()];
        let mut rstd = vec![F::zero(); rows];
        for r in 0..rows {
            let row = &t.data()[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<F>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / dn;
            let rs = F::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let shape = t.shape().to_vec();
        let rg = self.any_grad(&[x, gain, bias]);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            rg,
            "layer_norm",
        ))
    }

    // ---- indexing and layout ------------------------------------------------

    /// Rows of a 2-D `table` selected by `idx`: output `[idx.len(), cols]`.
    /// The backward pass scatter-adds into the table.
    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let t = self.value(table);
        if t.shape().len() != 2 {
            return Err(Error::shape("gather_rows", format!("table {:?}", t.shape())));
        }
        let (rows, c) = (t.shape()[0], t.shape()[1]);
        if idx.is_empty() {
            return Err(Error::Empty("gather_rows"));
        }
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            if i >= rows {
                return Err(Error::shape("gather_rows", format!("index {i} >= {rows}")));
            }
            out.extend_from_slice(t.row(i));
        }
        let rg = self.any_grad(&[table]);
        Ok(self.push(
            Tensor::new(vec![idx.len(), c], out)?,
            Op::Gather {
                table,
                idx: idx.to_vec(),
            },
            rg,
            "gather",
        ))
    }

    /// Concatenation along `axis`; all other extents must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(*parts.first().ok_or(Error::Empty("concat"))?).to_vec();
        if axis >= first.len() {
            return Err(Error::shape("concat", format!("axis {axis} of {first:?}")));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len() || s.iter().zip(&first).enumerate().any(|(i, (x, y))| i != axis && x != y) {
                return Err(Error::shape("concat", format!("{first:?} vs {s:?}")));
            }
            total += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let chunk = self.shape(p)[axis] * inner;
                out.extend_from_slice(&self.value(p).data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let rg = self.any_grad(parts);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            rg,
            "concat",
        ))
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let sh = self.shape(a).to_vec();
        if axis >= sh.len() || len == 0 || start + len > sh[axis] {
            return Err(Error::shape("narrow", format!("{sh:?} axis {axis} [{start}, +{len})")));
        }
        let outer: usize = sh[..axis].iter().product();
        let inner: usize = sh[axis + 1..].iter().product();
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * sh[axis] + start) * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut shape = sh;
        shape[axis] = len;
        let rg = self.any_grad(&[a]);
        Ok(self.push(Tensor::new(shape, out)?, Op::Narrow { a, axis, start }, rg, "narrow"))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshaped(shape)?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(t, Op::Reshape(a), rg, "reshape"))
    }

    /// Axis permutation: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let sh = self.shape(a).to_vec();
        let mut seen = vec![false; sh.len()];
        if perm.len() != sh.len()
            || perm
                .iter()
                .any(|&p| p >= sh.len() || std::mem::replace(&mut seen[p], true))
        {
            return Err(Error::shape("permute", format!("{sh:?} by {perm:?}")));
        }
        let out = permute_data(self.value(a).data(), &sh, perm);
        let shape: Vec<usize> = perm.iter().map(|&p| sh[p]).collect();
        let rg = self.any_grad(&[a]);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Permute { a, perm: perm.to_vec() },
            rg,
            "permute",
        ))
    }

    /// Identity forward; blocks gradient flow.
    pub fn stop_gradient(&mut self, a: Var) -> Result<Var> {
        let value = match &mut self.sg {
            SgMode::Replay(saved, cursor) => {
                let t = saved
                    .get(*cursor)
                    .cloned()
                    .ok_or_else(|| Error::GradCheck("stop-gradient replay exhausted".into()))?;
                *cursor += 1;
                if t.shape() != self.value(a).shape() {
                    return Err(Error::GradCheck("stop-gradient replay shape changed".into()));
                }
                t
            }
            _ => self.value(a).clone(),
        };
        if let SgMode::Record(saved) = &mut self.sg {
            saved.push(value.clone());
        }
        Ok(self.push(value, Op::StopGradient, false, "stop_gradient"))
    }

    // ---- reductions ---------------------------------------------------------

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().copied().sum::<F>();
        let rg = self.any_grad(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), rg, "sum")
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len();
        let s = self.sum(a);
        self.scale(s, F::one() / F::of(n as f64))
    }

    /// Squared L2 norm of all elements.
    pub fn sum_squares(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().map(|&x| x * x).sum::<F>();
        let rg = self.any_grad(&[a]);
        self.push(Tensor::scalar(s), Op::SumSquares(a), rg, "sum_squares")
    }

    pub fn l2_norm(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().map(|&x| x * x).sum::<F>().sqrt();
        let rg = self.any_grad(&[a]);
        self.push(Tensor::scalar(s), Op::L2Norm(a), rg, "l2_norm")
    }

    /// Mean token cross-entropy of `logits [n, V]` against integer targets;
    /// `None` targets are ignored.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let t = self.value(logits);
        let v = t.cols();
        let n = t.len() / v;
        if targets.len() != n {
            return Err(Error::shape(
                "cross_entropy",
                format!("{n} rows, {} targets", targets.len()),
            ));
        }
        let mut probs = vec![F::zero(); t.len()];
        let mut loss = F::zero();
        let mut count = 0;
        for (r, (row, p)) in t.data().chunks(v).zip(probs.chunks_mut(v)).enumerate() {
            softmax_row(row, p, |_| true);
            if let Some(y) = targets[r] {
                if y >= v {
                    return Err(Error::UnknownToken(y));
                }
                let mx = row.iter().copied().fold(row[0], F::max);
                let lse = row.iter().map(|&x| (x - mx).exp()).sum::<F>().ln() + mx;
                loss += lse - row[y];
                count += 1;
            }
        }
        if count == 0 {
            return Err(Error::Empty("cross_entropy"));
        }
        loss /= F::of(count as f64);
        let rg = self.any_grad(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
                count,
            },
            rg,
            "cross_entropy",
        ))
    }

    // ---- backward -------------------------------------------------------------

    /// Reverse pass from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<F>> {
        self.check_finite()?;
        if self.value(loss).len() != 1 {
            return Err(Error::shape("backward", format!("loss shape {:?}", self.shape(loss))));
        }
        let mut grads: Vec<Option<Vec<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients {
                grads,
                params: self.params.clone(),
            });
        }
        grads[loss.0] = Some(vec![F::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Gradients {
            grads,
            params: self.params.clone(),
        })
    }

    fn acc(&self, grads: &mut [Option<Vec<F>>], v: Var, f: impl FnOnce(&mut [F])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let n = self.value(v).len();
        let slot = grads[v.0].get_or_insert_with(|| vec![F::zero(); n]);
        f(slot);
    }

    fn backprop_node(&self, i: usize, g: &[F], grads: &mut [Option<Vec<F>>]) -> Result<()> {
        match &self.nodes[i].op {
            Op::Leaf | Op::StopGradient => {}
            &Op::MatMul { a, b, ta, tb } => self.backprop_matmul(i, a, b, ta, tb, g, grads),
            &Op::Add { a, b } => {
                self.acc(grads, a, |s| add_into(s, g));
                self.acc(grads, b, |s| reduce_into(s, g, F::one()));
            }
            &Op::Sub { a, b } => {
                self.acc(grads, a, |s| add_into(s, g));
                self.acc(grads, b, |s| reduce_into(s, g, -F::one()));
            }
            &Op::Mul { a, b } => {
                let ad = self.value(a).data();
                let bd = self.value(b).data();
                let bl = bd.len();
                self.acc(grads, a, |s| {
                    for (k, (sv, &gv)) in s.iter_mut().zip(g).enumerate() {
                        *sv += gv * bd[k % bl];
                    }
                });
                self.acc(grads, b, |s| {
                    for (k, (&gv, &av)) in g.iter().zip(ad).enumerate() {
                        s[k % bl] += gv * av;
                    }
                });
            }
            &Op::Scale { a, k } => self.acc(grads, a, |s| {
                for (sv, &gv) in s.iter_mut().zip(g) {
                    *sv += gv * k;
                }
            }),
            &Op::Tanh(a) => {
                let y = self.value(Var(i)).data();
                self.acc(grads, a, |s| {
                    for ((sv, &gv), &yv) in s.iter_mut().zip(g).zip(y) {
                        *sv += gv * (F::one() - yv * yv);
                    }
                })
            }
            &Op::Relu(a) => {
                let x = self.value(a).data();
                self.acc(grads, a, |s| {
                    for ((sv, &gv), &xv) in s.iter_mut().zip(g).zip(x) {
                        if xv > F::zero() {
                            *sv += gv;
                        }
                    }
                })
            }
            &Op::Softmax(a) => {
                let y = self.value(Var(i));
                let c = y.cols();
                self.acc(grads, a, |s| {
                    for ((sr, gr), yr) in s.chunks_mut(c).zip(g.chunks(c)).zip(y.data().chunks(c)) {
                        let dot = gr.iter().zip(yr).map(|(&gv, &yv)| gv * yv).sum::<F>();
                        for ((sv, &gv), &yv) in sr.iter_mut().zip(gr).zip(yr) {
                            *sv += yv * (gv - dot);
                        }
                    }
                })
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let d = self.value(*gain).len();
                let gd = self.value(*gain).data();
                self.acc(grads, *gain, |s| {
                    for (gr, hr) in g.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            s[j] += gr[j] * hr[j];
                        }
                    }
                });
                self.acc(grads, *bias, |s| reduce_into(s, g, F::one()));
                let dn = F::of(d as f64);
                self.acc(grads, *x, |s| {
                    for (r, ((sr, gr), hr)) in s.chunks_mut(d).zip(g.chunks(d)).zip(xhat.chunks(d)).enumerate() {
                        let mut m1 = F::zero();
                        let mut m2 = F::zero();
                        for j in 0..d {
                            let dh = gr[j] * gd[j];
                            m1 += dh;
                            m2 += dh * hr[j];
                        }
                        m1 /= dn;
                        m2 /= dn;
                        for j in 0..d {
                            let dh = gr[j] * gd[j];
                            sr[j] += rstd[r] * (dh - m1 - hr[j] * m2);
                        }
                    }
                });
            }
            Op::Gather { table, idx } => {
                let c = self.value(*table).cols();
                self.acc(grads, *table, |s| {
                    for (k, &row) in idx.iter().enumerate() {
                        for j in 0..c {
                            s[row * c + j] += g[k * c + j];
                        }
                    }
                })
            }
            Op::Concat { parts, axis } => {
                let sh = self.shape(Var(i));
                let outer: usize = sh[..*axis].iter().product();
                let inner: usize = sh[axis + 1..].iter().product();
                let total = sh[*axis] * inner;
                let mut offset = 0;
                for &p in parts {
                    let chunk = self.shape(p)[*axis] * inner;
                    self.acc(grads, p, |s| {
                        for o in 0..outer {
                            let src = &g[o * total + offset..o * total + offset + chunk];
                            add_into(&mut s[o * chunk..(o + 1) * chunk], src);
                        }
                    });
                    offset += chunk;
                }
            }
            &Op::Narrow { a, axis, start } => {
                let sh = self.shape(a);
                let outer: usize = sh[..axis].iter().product();
                let inner: usize = sh[axis + 1..].iter().product();
                let full = sh[axis];
                let len = self.shape(Var(i))[axis];
                self.acc(grads, a, |s| {
                    for o in 0..outer {
                        let base = (o * full + start) * inner;
                        add_into(
                            &mut s[base..base + len * inner],
                            &g[o * len * inner..(o + 1) * len * inner],
                        );
                    }
                })
            }
            &Op::Reshape(a) => self.acc(grads, a, |s| add_into(s, g)),
            Op::Permute { a, perm } => {
                let out_shape = self.shape(Var(i)).to_vec();
                let mut inv = vec![0; perm.len()];
                for (k, &p) in perm.iter().enumerate() {
                    inv[p] = k;
                }
                let back = permute_data(g, &out_shape, &inv);
                self.acc(grads, *a, |s| add_into(s, &back));
            }
            &Op::Sum(a) => self.acc(grads, a, |s| {
                for sv in s.iter_mut() {
                    *sv += g[0];
                }
            }),
            &Op::SumSquares(a) => {
                let x = self.value(a).data();
                let two = F::of(2.0);
                self.acc(grads, a, |s| {
                    for (sv, &xv) in s.iter_mut().zip(x) {
                        *sv += two * xv * g[0];
                    }
                })
            }
            &Op::L2Norm(a) => {
                let x = self.value(a).data();
                let norm = self.scalar(Var(i));
                if norm > F::zero() {
                    self.acc(grads, a, |s| {
                        for (sv, &xv) in s.iter_mut().zip(x) {
                            *sv += xv / norm * g[0];
                        }
                    })
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                count,
            } => {
                let v = self.value(*logits).cols();
                let scale = g[0] / F::of(*count as f64);
                self.acc(grads, *logits, |s| {
                    for (r, t) in targets.iter().enumerate() {
                        let Some(y) = *t else { continue };
                        for j in 0..v {
                            s[r * v + j] += probs[r * v + j] * scale;
                        }
                        s[r * v + y] -= scale;
                    }
                })
            }
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn backprop_matmul(&self, i: usize, a: Var, b: Var, ta: bool, tb: bool, g: &[F], grads: &mut [Option<Vec<F>>]) {
        let ash = self.shape(a);
        let bsh = self.shape(b);
        let (ar, ac) = (ash[ash.len() - 2], ash[ash.len() - 1]);
        let (br, bc) = (bsh[bsh.len() - 2], bsh[bsh.len() - 1]);
        let (n, k) = if ta { (ac, ar) } else { (ar, ac) };
        let m = if tb { br } else { bc };
        let b_shared = bsh.len() == 2;
        let nb = self.value(Var(i)).len() / (n * m);
        let ad = self.value(a).data();
        let bd = self.value(b).data();
        let opa = mat_view(ac, ta);
        let opb = mat_view(bc, tb);
        let gv = mat_view(m, false);
        self.acc(grads, a, |s| {
            if b_shared && !ta {
                // dA = dC @ op(B)^T over the flattened batch.
                gemm(nb * n, m, k, g, 0, gv, bd, 0, opb.t(), s, 0, F::one());
                return;
            }
            for bi in 0..nb {
                let boff = if b_shared { 0 } else { bi * br * bc };
                if ta {
                    // stored [k, n] = op(B) @ dC^T
                    gemm(k, m, n, bd, boff, opb, g, bi * n * m, gv.t(), s, bi * ar * ac, F::one());
                } else {
                    gemm(n, m, k, g, bi * n * m, gv, bd, boff, opb.t(), s, bi * ar * ac, F::one());
                }
            }
        });
        self.acc(grads, b, |s| {
            if b_shared && !ta {
                if tb {
                    gemm(m, nb * n, k, g, 0, gv.t(), ad, 0, opa, s, 0, F::one());
                } else {
                    gemm(k, nb * n, m, ad, 0, opa.t(), g, 0, gv, s, 0, F::one());
                }
                return;
            }
            for bi in 0..nb {
                let boff = if b_shared { 0 } else { bi * br * bc };
                let aoff = bi * ar * ac;
                if tb {
                    // stored [m, k] = dC^T @ op(A)
                    gemm(m, n, k, g, bi * n * m, gv.t(), ad, aoff, opa, s, boff, F::one());
                } else {
                    gemm(k, n, m, ad, aoff, opa.t(), g, bi * n * m, gv, s, boff, F::one());
                }
            }
        });
    }
}

impl<F: Real> Default for Graph<'_, F> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients<F> {
    grads: Vec<Option<Vec<F>>>,
    params: HashMap<ParamId, Var>,
}

impl<F: Real> Gradients<F> {
    /// Gradient of a node as a flat vector; `None` when it received none
    /// (frozen, constant or unreachable from the loss).
    pub fn wrt(&self, v: Var) -> Option<&[F]> {
        self.grads[v.0].as_deref()
    }

    pub fn param(&self, id: ParamId) -> Option<&[F]> {
        self.params.get(&id).and_then(|&v| self.wrt(v))
    }

    /// All parameter gradients, ordered by parameter id.
    pub fn params(&self) -> Vec<(ParamId, &[F])> {
        let mut out: Vec<_> = self
            .params
            .iter()
            .filter_map(|(&id, &v)| self.wrt(v).map(|g| (id, g)))
            .collect();
        out.sort_by_key(|(id, _)| *id);
        out
    }
}

// ---- kernels -----------------------------------------------------------------

/// Row/column strides of a (possibly transposed) row-major matrix.
#[derive(Clone, Copy)]
struct MatView {
    rs: isize,
    cs: isize,
}

impl MatView {
    fn t(self) -> MatView {
        MatView {
            rs: self.cs,
            cs: self.rs,
        }
    }
}

fn mat_view(cols: usize, transposed: bool) -> MatView {
    let v = MatView {
        rs: cols as isize,
        cs: 1,
    };
    if transposed {
        v.t()
    } else {
        v
    }
}

/// `c[coff..] = a @ b + beta * c` with `c` a contiguous `[m, n]` block.
#[allow(clippy::too_many_arguments)]
fn gemm<F: Real>(
    m: usize,
    k: usize,
    n: usize,
    a: &[F],
    aoff: usize,
    av: MatView,
    b: &[F],
    boff: usize,
    bv: MatView,
    c: &mut [F],
    coff: usize,
    beta: F,
) {
    if m == 0 || n == 0 {
        return;
    }
    let last =
        |off: usize, v: MatView, r: usize, cc: usize| off as isize + (r as isize - 1) * v.rs + (cc as isize - 1) * v.cs;
    assert!(k == 0 || (last(aoff, av, m, k) as usize) < a.len());
    assert!(k == 0 || (last(boff, bv, k, n) as usize) < b.len());
    assert!(coff + m * n <= c.len());
    // SAFETY: bounds asserted above; `c` is a distinct mutable slice.
    unsafe {
        F::gemm(
            m,
            k,
            n,
            F::one(),
            a.as_ptr().add(aoff),
            av.rs,
            av.cs,
            b.as_ptr().add(boff),
            bv.rs,
            bv.cs,
            beta,
            c.as_mut_ptr().add(coff),
            n as isize,
            1,
        );
    }
}

fn softmax_row<F: Real>(row: &[F], out: &mut [F], keep: impl Fn(usize) -> bool) {
    let mut mx: Option<F> = None;
    for (j, &x) in row.iter().enumerate() {
        if keep(j) {
            mx = Some(mx.map_or(x, |m: F| m.max(x)));
        }
    }
    let Some(mx) = mx else {
        out.iter_mut().for_each(|o| *o = F::zero());
        return;
    };
    let mut total = F::zero();
    for (j, (&x, o)) in row.iter().zip(out.iter_mut()).enumerate() {
        *o = if keep(j) { (x - mx).exp() } else { F::zero() };
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}

fn add_into<F: Real>(dst: &mut [F], src: &[F]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Sums `src` over its leading (broadcast) axes into `dst`.
fn reduce_into<F: Real>(dst: &mut [F], src: &[F], sign: F) {
    let n = dst.len();
    for chunk in src.chunks(n) {
        for (d, &s) in dst.iter_mut().zip(chunk) {
            *d += sign * s;
        }
    }
}

fn permute_data<F: Real>(src: &[F], shape: &[usize], perm: &[usize]) -> Vec<F> {
    let rank = shape.len();
    let mut in_strides = vec![1; rank];
    for a in (0..rank.saturating_sub(1)).rev() {
        in_strides[a] = in_strides[a + 1] * shape[a + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(src.len());
    let mut idx = vec![0usize; rank];
    let inner = out_shape[rank - 1];
    let inner_stride = strides[rank - 1];
    loop {
        let base: usize = idx.iter().zip(&strides).map(|(i, s)| i * s).sum();
        for j in 0..inner {
            out.push(src[base + j * inner_stride]);
        }
        // advance all but the innermost axis
        let mut a = rank - 1;
        loop {
            if a == 0 {
                return out;
            }
            a -= 1;
            idx[a] += 1;
            if idx[a] < out_shape[a] {
                break;
            }
            idx[a] = 0;
        }
    }
}
