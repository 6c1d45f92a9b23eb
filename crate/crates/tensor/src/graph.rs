use crate::error::{Result, TensorError};
use crate::kernels::{self, axis_extents, gemm};
use crate::tensor::{check_perm, Tensor};
use crate::{normal_cdf, normal_pdf};

/// Handle to a node recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
struct MatMulPlan {
    batch: usize,
    a_batched: bool,
    b_batched: bool,
    rows: usize,
    inner: usize,
    cols: usize,
    trans_a: bool,
    trans_b: bool,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, plan: MatMulPlan },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddAlong { a: Var, v: Var, axis: usize },
    MulAlong { a: Var, v: Var, axis: usize },
    Softmax(Var),
    Gelu(Var),
    Abs(Var),
    Permute { a: Var, perm: Vec<usize> },
    Reshape(Var),
    Concat { parts: Vec<Var>, axis: usize },
    Gather { a: Var, axis: usize, index: Vec<usize> },
    Scatter { a: Var, axis: usize, index: Vec<usize> },
    LayerNorm { a: Var, gamma: Var, beta: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Sum(Var),
    Mean(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

/// Operation tape. Nodes are appended in execution order, so reverse index
/// order is a valid topological order for the backward sweep.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn finite(op: &'static str, data: &[f64]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(TensorError::NonFinite { op })
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Trainable leaf: receives a gradient from `backward`.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push_node(value, Op::Leaf, true)
    }

    /// Non-trainable input.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_node(value, Op::Leaf, false)
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

    fn push_node(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, name: &'static str, shape: Vec<usize>, data: Vec<f64>, op: Op, inputs: &[Var]) -> Result<Var> {
        finite(name, &data)?;
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let value = Tensor::new(shape, data)?;
        Ok(self.push_node(value, op, requires_grad))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::Shape {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    /// Matrix product over the last two axes.
    ///
    /// Leading (batch) axes must either match, or one operand must be a plain
    /// 2-D matrix that is shared across the other's batch. `trans_a`/`trans_b`
    /// transpose the last two axes of the respective operand.
    pub fn matmul_t(&mut self, a: Var, b: Var, trans_a: bool, trans_b: bool) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let err = || TensorError::Shape {
            op: "matmul",
            lhs: sa.clone(),
            rhs: sb.clone(),
        };
        if sa.len() < 2 || sb.len() < 2 {
            return Err(err());
        }
        let (ar, ac) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (br, bc) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        let (rows, inner) = if trans_a { (ac, ar) } else { (ar, ac) };
        let (inner_b, cols) = if trans_b { (bc, br) } else { (br, bc) };
        if inner != inner_b {
            return Err(err());
        }
        let ba = &sa[..sa.len() - 2];
        let bb = &sb[..sb.len() - 2];
        let (batch_dims, a_batched, b_batched) = if ba == bb {
            (ba.to_vec(), !ba.is_empty(), !bb.is_empty())
        } else if bb.is_empty() {
            (ba.to_vec(), true, false)
        } else if ba.is_empty() {
            (bb.to_vec(), false, true)
        } else {
            return Err(err());
        };
        let batch: usize = batch_dims.iter().product();
        let plan = MatMulPlan {
            batch,
            a_batched,
            b_batched,
            rows,
            inner,
            cols,
            trans_a,
            trans_b,
        };
        let mut out = vec![0.0; batch * rows * cols];
        {
            let av = self.value(a).data();
            let bv = self.value(b).data();
            if a_batched && !b_batched && !trans_a {
                gemm(batch * rows, inner, cols, av, false, bv, trans_b, &mut out, 0.0);
            } else {
                let (asz, bsz, csz) = (rows * inner, inner * cols, rows * cols);
                for s in 0..batch {
                    let aslice = if a_batched { &av[s * asz..(s + 1) * asz] } else { av };
                    let bslice = if b_batched { &bv[s * bsz..(s + 1) * bsz] } else { bv };
                    gemm(rows, inner, cols, aslice, trans_a, bslice, trans_b, &mut out[s * csz..(s + 1) * csz], 0.0);
                }
            }
        }
        let mut shape = batch_dims;
        shape.extend([rows, cols]);
        self.push("matmul", shape, out, Op::MatMul { a, b, plan }, &[a, b])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let t = self.value(a).zip_with(self.value(b), |x, y| x + y)?;
        let shape = t.shape().to_vec();
        self.push("add", shape, t.into_data(), Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let t = self.value(a).zip_with(self.value(b), |x, y| x - y)?;
        let shape = t.shape().to_vec();
        self.push("sub", shape, t.into_data(), Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let t = self.value(a).zip_with(self.value(b), |x, y| x * y)?;
        let shape = t.shape().to_vec();
        self.push("mul", shape, t.into_data(), Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let t = self.value(a).map(|x| x * factor);
        let shape = t.shape().to_vec();
        self.push("scale", shape, t.into_data(), Op::Scale(a, factor), &[a])
    }

    fn check_along(&self, op: &'static str, a: Var, v: Var, axis: usize) -> Result<(usize, usize, usize)> {
        let sa = self.shape(a);
        let sv = self.shape(v);
        if axis >= sa.len() || sv.len() != 1 || sv[0] != sa[axis] {
            return Err(TensorError::Shape {
                op,
                lhs: sa.to_vec(),
                rhs: sv.to_vec(),
            });
        }
        Ok(axis_extents(sa, axis))
    }

    /// Adds vector `v` broadcast along `axis` of `a` (bias add when `axis` is last).
    pub fn add_along(&mut self, a: Var, v: Var, axis: usize) -> Result<Var> {
        let (outer, len, inner) = self.check_along("add_along", a, v, axis)?;
        let av = self.value(a).data();
        let vv = self.value(v).data();
        let mut out = Vec::with_capacity(av.len());
        for o in 0..outer {
            for (i, &s) in vv.iter().enumerate().take(len) {
                let start = (o * len + i) * inner;
                out.extend(av[start..start + inner].iter().map(|x| x + s));
            }
        }
        let shape = self.shape(a).to_vec();
        self.push("add_along", shape, out, Op::AddAlong { a, v, axis }, &[a, v])
    }

    /// Multiplies `a` by vector `v` broadcast along `axis`.
    pub fn mul_along(&mut self, a: Var, v: Var, axis: usize) -> Result<Var> {
        let (outer, len, inner) = self.check_along("mul_along", a, v, axis)?;
        let av = self.value(a).data();
        let vv = self.value(v).data();
        let mut out = Vec::with_capacity(av.len());
        for o in 0..outer {
            for (i, &s) in vv.iter().enumerate().take(len) {
                let start = (o * len + i) * inner;
                out.extend(av[start..start + inner].iter().map(|x| x * s));
            }
        }
        let shape = self.shape(a).to_vec();
        self.push("mul_along", shape, out, Op::MulAlong { a, v, axis }, &[a, v])
    }

    /// Softmax over the last axis, max-subtracted.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let cols = *shape.last().ok_or_else(|| TensorError::invalid("softmax", "scalar input"))?;
        let mut out = self.value(a).data().to_vec();
        if cols > 0 {
            for row in out.chunks_mut(cols) {
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for v in row.iter_mut() {
                    *v = (*v - max).exp();
                    total += *v;
                }
                row.iter_mut().for_each(|v| *v /= total);
            }
        }
        self.push("softmax", shape, out, Op::Softmax(a), &[a])
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a).map(|x| x * normal_cdf(x));
        let shape = t.shape().to_vec();
        self.push("gelu", shape, t.into_data(), Op::Gelu(a), &[a])
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a).map(f64::abs);
        let shape = t.shape().to_vec();
        self.push("abs", shape, t.into_data(), Op::Abs(a), &[a])
    }

    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        check_perm(perm, self.shape(a).len())?;
        let (data, shape) = kernels::permute_copy(self.value(a).data(), self.shape(a), perm);
        self.push(
            "permute",
            shape,
            data,
            Op::Permute {
                a,
                perm: perm.to_vec(),
            },
            &[a],
        )
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != self.value(a).numel() {
            return Err(TensorError::Shape {
                op: "reshape",
                lhs: self.shape(a).to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let data = self.value(a).data().to_vec();
        self.push("reshape", shape.to_vec(), data, Op::Reshape(a), &[a])
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| TensorError::invalid("concat", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(TensorError::invalid("concat", format!("axis {axis} out of range")));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(d, (x, y))| d == axis || x == y);
            if !compatible {
                return Err(TensorError::Shape {
                    op: "concat",
                    lhs: base.clone(),
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let (outer, _, inner) = axis_extents(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let len = self.shape(p)[axis];
                let chunk = len * inner;
                out.extend_from_slice(&self.value(p).data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        self.push(
            "concat",
            shape,
            out,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            parts,
        )
    }

    /// Picks entries `index` along `axis`. Indices may repeat, which is how
    /// embedding lookups and broadcasts are expressed.
    pub fn gather(&mut self, a: Var, axis: usize, index: &[usize]) -> Result<Var> {
        let t = self.value(a).select(axis, index)?;
        let shape = t.shape().to_vec();
        self.push(
            "gather",
            shape,
            t.into_data(),
            Op::Gather {
                a,
                axis,
                index: index.to_vec(),
            },
            &[a],
        )
    }

    /// Places slice `i` of `a` at position `index[i]` of a zero tensor whose
    /// `axis` has extent `size`. Indices must be distinct.
    pub fn scatter(&mut self, a: Var, axis: usize, index: &[usize], size: usize) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        if axis >= sa.len() || sa[axis] != index.len() {
            return Err(TensorError::invalid("scatter", format!("index length {} vs shape {sa:?}", index.len())));
        }
        let mut seen = vec![false; size];
        for &i in index {
            if i >= size || seen[i] {
                return Err(TensorError::invalid("scatter", format!("bad or repeated index {i}")));
            }
            seen[i] = true;
        }
        let (outer, len, inner) = axis_extents(&sa, axis);
        let av = self.value(a).data();
        let mut out = vec![0.0; outer * size * inner];
        for o in 0..outer {
            for (i, &dst) in index.iter().enumerate() {
                let src = (o * len + i) * inner;
                let dst = (o * size + dst) * inner;
                out[dst..dst + inner].copy_from_slice(&av[src..src + inner]);
            }
        }
        let mut shape = sa;
        shape[axis] = size;
        self.push(
            "scatter",
            shape,
            out,
            Op::Scatter {
                a,
                axis,
                index: index.to_vec(),
            },
            &[a],
        )
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, a: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let cols = *shape.last().ok_or_else(|| TensorError::invalid("layer_norm", "scalar input"))?;
        for p in [gamma, beta] {
            if self.shape(p) != [cols] {
                return Err(TensorError::Shape {
                    op: "layer_norm",
                    lhs: shape.clone(),
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        let av = self.value(a).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let rows = av.len().checked_div(cols).unwrap_or(0);
        let mut xhat = Vec::with_capacity(av.len());
        let mut rstd = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(av.len());
        for row in av.chunks(cols.max(1)).take(rows) {
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / cols as f64;
            let r = 1.0 / (var + eps).sqrt();
            rstd.push(r);
            for (j, &x) in row.iter().enumerate() {
                let h = (x - mean) * r;
                xhat.push(h);
                out.push(h * g[j] + b[j]);
            }
        }
        self.push(
            "layer_norm",
            shape,
            out,
            Op::LayerNorm {
                a,
                gamma,
                beta,
                xhat,
                rstd,
            },
            &[a, gamma, beta],
        )
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).sum();
        self.push("sum", Vec::new(), vec![s], Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.numel() == 0 {
            return Err(TensorError::invalid("mean", "empty tensor"));
        }
        let m = t.sum() / t.numel() as f64;
        self.push("mean", Vec::new(), vec![m], Op::Mean(a), &[a])
    }

    /// Mean absolute error between two equally shaped tensors.
    pub fn mae(&mut self, prediction: Var, target: Var) -> Result<Var> {
        let d = self.sub(prediction, target)?;
        let d = self.abs(d)?;
        self.mean(d)
    }

    /// Sum of absolute values.
    pub fn l1(&mut self, a: Var) -> Result<Var> {
        let d = self.abs(a)?;
        self.sum(d)
    }

    /// Reverse sweep from a scalar `loss`. Returns gradients for every node
    /// that requires one; intermediate gradients are dropped once consumed.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(TensorError::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(Tensor::full(lv.shape(), 1.0));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backprop_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, plan } => self.backprop_matmul(*a, *b, plan, gd, grads),
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if self.wants(v) {
                        accumulate(grads, v, self.shape(v), |dst| add_into(dst, gd));
                    }
                }
            }
            Op::Sub(a, b) => {
                if self.wants(*a) {
                    accumulate(grads, *a, self.shape(*a), |dst| add_into(dst, gd));
                }
                if self.wants(*b) {
                    accumulate(grads, *b, self.shape(*b), |dst| {
                        dst.iter_mut().zip(gd).for_each(|(d, g)| *d -= g)
                    });
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if self.wants(*a) {
                    accumulate(grads, *a, self.shape(*a), |dst| {
                        for ((d, g), y) in dst.iter_mut().zip(gd).zip(bv) {
                            *d += g * y;
                        }
                    });
                }
                if self.wants(*b) {
                    accumulate(grads, *b, self.shape(*b), |dst| {
                        for ((d, g), x) in dst.iter_mut().zip(gd).zip(av) {
                            *d += g * x;
                        }
                    });
                }
            }
            Op::Scale(a, f) => {
                if self.wants(*a) {
                    accumulate(grads, *a, self.shape(*a), |dst| {
                        dst.iter_mut().zip(gd).for_each(|(d, g)| *d += g * f)
                    });
                }
            }
            Op::AddAlong { a, v, axis } => {
                if self.wants(*a) {
                    accumulate(grads, *a, self.shape(*a), |dst| add_into(dst, gd));
                }
                if self.wants(*v) {
                    let (outer, len, inner) = axis_extents(self.shape(*a), *axis);
                    accumulate(grads, *v, self.shape(*v), |dst| {
                        for o in 0..outer {
                            for (i, d) in dst.iter_mut().enumerate().take(len) {
                                let s = (o * len + i) * inner;
                                *d += gd[s..s + inner].iter().sum::<f64>();
                            }
                        }
                    });
                }
            }
            Op::MulAlong { a, v, axis } => {
                let (outer, len, inner) = axis_extents(self.shape(*a), *axis);
                let av = self.value(*a).data();
                let vv = self.value(*v).data();
                if self.wants(*a) {
                    accumulate(grads, *a, self.shape(*a), |dst| {
                        for o in 0..outer {
                            for (i, &s) in vv.iter().enumerate().take(len) {
                                let st = (o * len + i) * inner;
                                for j in st..st + inner {
                                    dst[j] += gd[j] * s;
                                }
                            }
                        }
                    });
                }
                if self.wants(*v) {
                    accumulate(grads, *v, self.shape(*v), |dst| {
                        for o in 0..outer {
                            for (i, d) in dst.iter_mut().enumerate().take(len) {
                                let st = (o * len + i) * inner;
                                *d += gd[st..st + inner]
                                    .iter()
                                    .zip(&av[st..st + inner])
                                    .map(|(g, x)| g * x)
                                    .sum::<f64>();
                            }
                        }
                    });
                }
            }
            Op::Softmax(a) => {
                if self.wants(*a) {
                    let y = node.value.data();
                    let cols = *node.value.shape().last().unwrap_or(&1);
                    accumulate(grads, *a, self.shape(*a), |dst| {
                        for ((drow, grow), yrow) in dst
                            .chunks_mut(cols.max(1))
                            .zip(gd.chunks(cols.max(1)))
                            .zip(y.chunks(cols.max(1)))
                        {
                            let dot: f64 = grow.iter().zip(yrow).map(|(g, y)| g * y).sum();
                            for ((d, g), y) in drow.iter_mut().zip(grow).zip(yrow) {
                                *d += y * (g - dot);
                            }
                        }
                    });
                }
            }
            Op::Gelu(a) => {
                if self.wants(*a) {
                    let x = self.value(*a).data();
                    accumulate(grads, *a, self.shape(*a), |dst| {
                        for ((d, g), &x) in dst.iter_mut().zip(gd).zip(x) {
                            *d += g * (normal_cdf(x) + x * normal_pdf(x));
                        }
                    });
                }
            }
            Op::Abs(a) => {
                if self.wants(*a) {
                    let x = self.value(*a).data();
                    accumulate(grads, *a, self.shape(*a), |dst| {
                        for ((d, g), &x) in dst.iter_mut().zip(gd).zip(x) {
                            if x > 0.0 {
                                *d += g;
                            } else if x < 0.0 {
                                *d -= g;
                            }
                        }
                    });
                }
            }
            Op::Permute { a, perm } => {
                if self.wants(*a) {
                    let mut inverse = vec![0; perm.len()];
                    for (i, &p) in perm.iter().enumerate() {
                        inverse[p] = i;
                    }
                    let (back, _) = kernels::permute_copy(gd, g.shape(), &inverse);
                    accumulate(grads, *a, self.shape(*a), |dst| add_into(dst, &back));
                }
            }
            Op::Reshape(a) => {
                if self.wants(*a) {
                    accumulate(grads, *a, self.shape(*a), |dst| add_into(dst, gd));
                }
            }
            Op::Concat { parts, axis } => {
                let (outer, total, inner) = axis_extents(g.shape(), *axis);
                let mut offset = 0;
                for &p in parts {
                    let len = self.shape(p)[*axis];
                    if self.wants(p) {
                        accumulate(grads, p, self.shape(p), |dst| {
                            for o in 0..outer {
                                let src = (o * total + offset) * inner;
                                let d0 = o * len * inner;
                                add_into(&mut dst[d0..d0 + len * inner], &gd[src..src + len * inner]);
                            }
                        });
                    }
                    offset += len;
                }
            }
            Op::Gather { a, axis, index } => {
                if self.wants(*a) {
                    let (outer, len, inner) = axis_extents(self.shape(*a), *axis);
                    let k = index.len();
                    accumulate(grads, *a, self.shape(*a), |dst| {
                        for o in 0..outer {
                            for (i, &src_i) in index.iter().enumerate() {
                                let s = (o * k + i) * inner;
                                let d = (o * len + src_i) * inner;
                                add_into(&mut dst[d..d + inner], &gd[s..s + inner]);
                            }
                        }
                    });
                }
            }
            Op::Scatter { a, axis, index } => {
                if self.wants(*a) {
                    let (outer, size, inner) = axis_extents(g.shape(), *axis);
                    let k = index.len();
                    accumulate(grads, *a, self.shape(*a), |dst| {
                        for o in 0..outer {
                            for (i, &pos) in index.iter().enumerate() {
                                let d = (o * k + i) * inner;
                                let s = (o * size + pos) * inner;
                                add_into(&mut dst[d..d + inner], &gd[s..s + inner]);
                            }
                        }
                    });
                }
            }
            Op::LayerNorm {
                a,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let cols = self.shape(*gamma)[0];
                let gam = self.value(*gamma).data();
                if self.wants(*gamma) {
                    accumulate(grads, *gamma, &[cols], |dst| {
                        for (grow, hrow) in gd.chunks(cols).zip(xhat.chunks(cols)) {
                            for ((d, g), h) in dst.iter_mut().zip(grow).zip(hrow) {
                                *d += g * h;
                            }
                        }
                    });
                }
                if self.wants(*beta) {
                    accumulate(grads, *beta, &[cols], |dst| {
                        for grow in gd.chunks(cols) {
                            add_into(dst, grow);
                        }
                    });
                }
                if self.wants(*a) {
                    let c = cols as f64;
                    accumulate(grads, *a, self.shape(*a), |dst| {
                        for (((drow, grow), hrow), &r) in dst
                            .chunks_mut(cols)
                            .zip(gd.chunks(cols))
                            .zip(xhat.chunks(cols))
                            .zip(rstd)
                        {
                            let mut sum_dh = 0.0;
                            let mut sum_dh_h = 0.0;
                            for j in 0..cols {
                                let dh = grow[j] * gam[j];
                                sum_dh += dh;
                                sum_dh_h += dh * hrow[j];
                            }
                            for j in 0..cols {
                                let dh = grow[j] * gam[j];
                                drow[j] += r / c * (c * dh - sum_dh - hrow[j] * sum_dh_h);
                            }
                        }
                    });
                }
            }
            Op::Sum(a) => {
                if self.wants(*a) {
                    let s = gd[0];
                    accumulate(grads, *a, self.shape(*a), |dst| dst.iter_mut().for_each(|d| *d += s));
                }
            }
            Op::Mean(a) => {
                if self.wants(*a) {
                    let s = gd[0] / self.value(*a).numel() as f64;
                    accumulate(grads, *a, self.shape(*a), |dst| dst.iter_mut().for_each(|d| *d += s));
                }
            }
        }
    }

    fn backprop_matmul(&self, a: Var, b: Var, plan: &MatMulPlan, gd: &[f64], grads: &mut [Option<Tensor>]) {
        let MatMulPlan {
            batch,
            a_batched,
            b_batched,
            rows,
            inner,
            cols,
            trans_a,
            trans_b,
        } = *plan;
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let (asz, bsz, csz) = (rows * inner, inner * cols, rows * cols);
        let flat = a_batched && !b_batched && !trans_a;

        if self.wants(a) {
            accumulate(grads, a, self.shape(a), |dst| {
                if flat {
                    gemm(batch * rows, cols, inner, gd, false, bv, !trans_b, dst, 1.0);
                    return;
                }
                for s in 0..batch {
                    let bs = if b_batched { &bv[s * bsz..(s + 1) * bsz] } else { bv };
                    let gs = &gd[s * csz..(s + 1) * csz];
                    let ds = if a_batched { &mut dst[s * asz..(s + 1) * asz] } else { &mut dst[..] };
                    if trans_a {
                        // stored (inner x rows) = op(B) * dC^T
                        gemm(inner, cols, rows, bs, trans_b, gs, true, ds, 1.0);
                    } else {
                        gemm(rows, cols, inner, gs, false, bs, !trans_b, ds, 1.0);
                    }
                }
            });
        }
        if self.wants(b) {
            accumulate(grads, b, self.shape(b), |dst| {
                if flat {
                    if trans_b {
                        gemm(cols, batch * rows, inner, gd, true, av, false, dst, 1.0);
                    } else {
                        gemm(inner, batch * rows, cols, av, true, gd, false, dst, 1.0);
                    }
                    return;
                }
                for s in 0..batch {
                    let as_ = if a_batched { &av[s * asz..(s + 1) * asz] } else { av };
                    let gs = &gd[s * csz..(s + 1) * csz];
                    let ds = if b_batched { &mut dst[s * bsz..(s + 1) * bsz] } else { &mut dst[..] };
                    if trans_b {
                        // stored (cols x inner) = dC^T * op(A)
                        gemm(cols, rows, inner, gs, true, as_, trans_a, ds, 1.0);
                    } else {
                        gemm(inner, rows, cols, as_, !trans_a, gs, false, ds, 1.0);
                    }
                }
            });
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, shape: &[usize], f: impl FnOnce(&mut [f64])) {
    let slot = &mut grads[v.0];
    let t = slot.get_or_insert_with(|| Tensor::zeros(shape));
    f(t.data_mut());
}
