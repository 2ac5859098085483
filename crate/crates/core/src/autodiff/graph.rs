//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation of one forward pass in creation
//! order, which is also a topological order. [`Graph::backward`] walks the
//! record in reverse, visiting each node once, and accumulates gradients
//! into the [`ParameterSet`] tensors that were bound with
//! [`Graph::param`].
//!
//! Shapes never broadcast implicitly: binary ops require identical shapes
//! and repetition along an axis is spelled out with [`Graph::expand`].

use super::nn::{self, BatchNormStats, ConvGeometry};
use super::tensor::{gemm, Element, MatLayout, ParameterSet, Tensor};
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// `(outer, axis_len, inner)` decomposition of a shape around one axis.
#[derive(Debug, Clone, Copy)]
pub(crate) struct AxisSplit {
    pub outer: usize,
    pub len: usize,
    pub inner: usize,
}

impl AxisSplit {
    fn new(shape: &[usize], axis: usize) -> Result<Self> {
        if axis >= shape.len() {
            return Err(Error::Shape(format!(
                "axis {axis} out of range for shape {shape:?}"
            )));
        }
        Ok(AxisSplit {
            outer: shape[..axis].iter().product(),
            len: shape[axis],
            inner: shape[axis + 1..].iter().product(),
        })
    }

    #[inline]
    fn index(&self, o: usize, a: usize, i: usize) -> usize {
        (o * self.len + a) * self.inner + i
    }
}

#[derive(Debug)]
enum Op<F: Element> {
    Constant,
    Param(usize),
    Relu(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    Scale(Var, F),
    AddScalar(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MatMul {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Transpose {
        x: Var,
        batch: usize,
        rows: usize,
        cols: usize,
    },
    Reshape(Var),
    Sum(Var, AxisSplit),
    Mean(Var, AxisSplit),
    Max {
        x: Var,
        split: AxisSplit,
        argmax: Vec<usize>,
    },
    Softmax(Var, AxisSplit),
    Expand(Var, AxisSplit),
    Select {
        x: Var,
        index: usize,
        stride: usize,
    },
    AvgPool2 {
        x: Var,
        planes: usize,
        h: usize,
        w: usize,
    },
    Conv2d {
        x: Var,
        kernel: Var,
        bias: Option<Var>,
        geom: ConvGeometry,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<F>,
        inv_std: Vec<F>,
        batch_stats: bool,
        n: usize,
        c: usize,
        hw: usize,
    },
    BceWithLogits {
        logits: Var,
        targets: Vec<F>,
    },
    CrossEntropy {
        logits: Var,
        classes: Vec<usize>,
        probs: Vec<F>,
    },
    SumAll(Var),
}

#[derive(Debug)]
struct Node<F: Element> {
    value: Tensor<F>,
    op: Op<F>,
    needs_grad: bool,
}

/// Record of one forward pass.
#[derive(Debug)]
pub struct Graph<F: Element = f32> {
    nodes: Vec<Node<F>>,
    bindings: Vec<String>,
    branches: u64,
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

impl<F: Element> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Element> Graph<F> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            bindings: Vec::new(),
            branches: FNV_OFFSET,
        }
    }

    /// Hash of every discrete choice made so far (relu signs, argmax
    /// positions). Two evaluations with equal signatures lie on the same
    /// smooth piece of the function.
    pub fn branch_signature(&self) -> u64 {
        self.branches
    }

    fn record_branches(&mut self, choices: impl Iterator<Item = u64>) {
        for c in choices {
            self.branches = (self.branches ^ c).wrapping_mul(FNV_PRIME);
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, needs_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(format!(
                "{} produced a non-finite value (shape {:?})",
                op_name(&op),
                value.shape()
            )));
        }
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Input that receives no gradient.
    pub fn constant(&mut self, value: Tensor<F>) -> Result<Var> {
        self.push(value.with_requires_grad(false), Op::Constant, false)
    }

    /// Binds the named parameter; [`Graph::backward`] accumulates its gradient.
    pub fn param(&mut self, params: &ParameterSet<F>, name: &str) -> Result<Var> {
        let tensor = params.get(name)?;
        let mut value = Tensor::new(tensor.shape(), tensor.data().to_vec())?;
        value = value.with_requires_grad(true);
        self.bindings.push(name.to_string());
        let slot = self.bindings.len() - 1;
        self.push(value, Op::Param(slot), true)
    }

    fn unary(&mut self, x: Var, f: impl Fn(F) -> F, op: Op<F>) -> Result<Var> {
        let src = self.value(x);
        let data = src.data().iter().map(|&v| f(v)).collect();
        let value = Tensor::new(src.shape(), data)?;
        let needs = self.needs(x);
        self.push(value, op, needs)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let signs: Vec<u64> = self.value(x).data().iter().map(|&v| u64::from(v > F::zero())).collect();
        self.record_branches(signs.into_iter());
        self.unary(x, |v| if v > F::zero() { v } else { F::zero() }, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(x, F::exp, Op::Exp(x))
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary(x, F::ln, Op::Log(x))
    }

    pub fn scale(&mut self, x: Var, c: F) -> Result<Var> {
        self.unary(x, |v| v * c, Op::Scale(x, c))
    }

    pub fn add_scalar(&mut self, x: Var, c: F) -> Result<Var> {
        self.unary(x, |v| v + c, Op::AddScalar(x))
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(F, F) -> F, op: Op<F>) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::Shape(format!(
                "{}: {:?} vs {:?}",
                op_name(&op),
                ta.shape(),
                tb.shape()
            )));
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::new(ta.shape(), data)?;
        let needs = self.needs(a) || self.needs(b);
        self.push(value, op, needs)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Matrix product of rank-2 `[m,k] x [k,n]` or batched rank-3
    /// `[b,m,k] x [b,k,n]` operands.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (batch, m, k, k2, n) = match (sa.as_slice(), sb.as_slice()) {
            ([m, k], [k2, n]) => (1, *m, *k, *k2, *n),
            ([b1, m, k], [b2, k2, n]) if b1 == b2 => (*b1, *m, *k, *k2, *n),
            _ => {
                return Err(Error::Shape(format!("matmul: {sa:?} vs {sb:?}")));
            }
        };
        if k != k2 {
            return Err(Error::Shape(format!("matmul: {sa:?} vs {sb:?}")));
        }
        let mut out = vec![F::zero(); batch * m * n];
        {
            let (da, db) = (self.value(a).data(), self.value(b).data());
            for i in 0..batch {
                gemm(
                    &da[i * m * k..(i + 1) * m * k],
                    MatLayout::plain(m, k),
                    &db[i * k * n..(i + 1) * k * n],
                    MatLayout::plain(k, n),
                    &mut out[i * m * n..(i + 1) * m * n],
                    F::zero(),
                );
            }
        }
        let shape = if sa.len() == 2 {
            vec![m, n]
        } else {
            vec![batch, m, n]
        };
        let needs = self.needs(a) || self.needs(b);
        self.push(
            Tensor::new(&shape, out)?,
            Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
            },
            needs,
        )
    }

    /// Swaps the last two axes of a rank-2 or rank-3 tensor.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (batch, rows, cols) = match shape.as_slice() {
            [r, c] => (1, *r, *c),
            [b, r, c] => (*b, *r, *c),
            _ => return Err(Error::Shape(format!("transpose: rank of {shape:?}"))),
        };
        let src = self.value(x).data();
        let out = transpose_batched(src, batch, rows, cols);
        let mut new_shape = shape.clone();
        let r = new_shape.len();
        new_shape.swap(r - 1, r - 2);
        let needs = self.needs(x);
        self.push(
            Tensor::new(&new_shape, out)?,
            Op::Transpose {
                x,
                batch,
                rows,
                cols,
            },
            needs,
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        let needs = self.needs(x);
        self.push(value.with_requires_grad(false), Op::Reshape(x), needs)
    }

    fn reduced_shape(shape: &[usize], axis: usize) -> Vec<usize> {
        let mut s = shape.to_vec();
        s.remove(axis);
        s
    }

    /// Sum over `axis`, removing it.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let split = AxisSplit::new(&shape, axis)?;
        let out = reduce(self.value(x).data(), split, |acc, v| acc + v, F::zero());
        let needs = self.needs(x);
        self.push(
            Tensor::new(&Self::reduced_shape(&shape, axis), out)?,
            Op::Sum(x, split),
            needs,
        )
    }

    /// Mean over `axis`, removing it.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let split = AxisSplit::new(&shape, axis)?;
        let denom = F::from_usize(split.len).unwrap();
        let out = reduce(self.value(x).data(), split, |acc, v| acc + v, F::zero())
            .into_iter()
            .map(|v| v / denom)
            .collect();
        let needs = self.needs(x);
        self.push(
            Tensor::new(&Self::reduced_shape(&shape, axis), out)?,
            Op::Mean(x, split),
            needs,
        )
    }

    /// Maximum over `axis`, removing it. Ties resolve to the lowest index,
    /// which is also where the gradient is routed.
    pub fn max_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let split = AxisSplit::new(&shape, axis)?;
        let argmax = argmax_along(self.value(x).data(), split);
        self.record_branches(argmax.iter().map(|&i| i as u64));
        let src = self.value(x).data();
        let out = argmax.iter().map(|&i| src[i]).collect();
        let needs = self.needs(x);
        self.push(
            Tensor::new(&Self::reduced_shape(&shape, axis), out)?,
            Op::Max { x, split, argmax },
            needs,
        )
    }

    /// Softmax along `axis`, stabilised by subtracting each slice maximum.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let split = AxisSplit::new(&shape, axis)?;
        let out = softmax_along(self.value(x).data(), split);
        let needs = self.needs(x);
        self.push(Tensor::new(&shape, out)?, Op::Softmax(x, split), needs)
    }

    /// One-hot indicator of the maximum along `axis` (lowest index on ties).
    /// The result is a constant: no gradient flows through the selection.
    pub fn onehot_argmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let split = AxisSplit::new(&shape, axis)?;
        let mut out = vec![F::zero(); self.value(x).len()];
        let argmax = argmax_along(self.value(x).data(), split);
        self.record_branches(argmax.iter().map(|&i| i as u64));
        for idx in argmax {
            out[idx] = F::one();
        }
        self.push(Tensor::new(&shape, out)?, Op::Constant, false)
    }

    /// Inserts a new axis of length `n` at position `axis` by repetition.
    pub fn expand(&mut self, x: Var, axis: usize, n: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis > shape.len() {
            return Err(Error::Shape(format!(
                "expand axis {axis} out of range for {shape:?}"
            )));
        }
        let mut new_shape = shape.clone();
        new_shape.insert(axis, n);
        let split = AxisSplit::new(&new_shape, axis)?;
        let src = self.value(x).data();
        let mut out = vec![F::zero(); src.len() * n];
        for o in 0..split.outer {
            let chunk = &src[o * split.inner..(o + 1) * split.inner];
            for a in 0..n {
                let start = split.index(o, a, 0);
                out[start..start + split.inner].copy_from_slice(chunk);
            }
        }
        let needs = self.needs(x);
        self.push(Tensor::new(&new_shape, out)?, Op::Expand(x, split), needs)
    }

    /// Slice `index` along the leading axis, removing it.
    pub fn select(&mut self, x: Var, index: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.is_empty() || index >= shape[0] {
            return Err(Error::Shape(format!("select {index} from {shape:?}")));
        }
        let stride: usize = shape[1..].iter().product();
        let data = self.value(x).data()[index * stride..(index + 1) * stride].to_vec();
        let needs = self.needs(x);
        self.push(
            Tensor::new(&shape[1..], data)?,
            Op::Select { x, index, stride },
            needs,
        )
    }

    /// 2x2 average pooling with stride 2 over the last two axes of `[N,C,H,W]`.
    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let [n, c, h, w] = shape[..] else {
            return Err(Error::Shape(format!("avg_pool2 expects rank 4, got {shape:?}")));
        };
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::Shape(format!(
                "avg_pool2 needs even spatial dims, got {shape:?}"
            )));
        }
        let out = nn::avg_pool2_forward(self.value(x).data(), n * c, h, w);
        let needs = self.needs(x);
        self.push(
            Tensor::new(&[n, c, h / 2, w / 2], out)?,
            Op::AvgPool2 {
                x,
                planes: n * c,
                h,
                w,
            },
            needs,
        )
    }

    /// Cross-correlation of `[N,C_in,H,W]` with `[C_out,C_in,kH,kW]`.
    pub fn conv2d(
        &mut self,
        x: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let geom = ConvGeometry::new(self.shape(x), self.shape(kernel), stride, padding)?;
        if let Some(b) = bias {
            if self.shape(b) != [geom.c_out] {
                return Err(Error::Shape(format!(
                    "conv2d bias {:?} for {} output channels",
                    self.shape(b),
                    geom.c_out
                )));
            }
        }
        let out = nn::conv2d_forward(
            self.value(x).data(),
            self.value(kernel).data(),
            bias.map(|b| self.value(b).data()),
            &geom,
        );
        let needs =
            self.needs(x) || self.needs(kernel) || bias.map(|b| self.needs(b)).unwrap_or(false);
        self.push(
            Tensor::new(&geom.output_shape(), out)?,
            Op::Conv2d {
                x,
                kernel,
                bias,
                geom,
            },
            needs,
        )
    }

    /// Batch normalization over `(N,H,W)` per channel.
    ///
    /// In training mode the batch statistics normalize the input and
    /// update `stats` by exponential moving average; in evaluation mode
    /// `stats` are used unchanged.
    pub fn batchnorm2d(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: BatchNormMode<'_, F>,
        eps: F,
    ) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let [n, c, h, w] = shape[..] else {
            return Err(Error::Shape(format!("batchnorm2d expects rank 4, got {shape:?}")));
        };
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::Shape(format!(
                "batchnorm2d affine {:?}/{:?} for {} channels",
                self.shape(gamma),
                self.shape(beta),
                c
            )));
        }
        let hw = h * w;
        let (mean, inv_std, batch_stats) = match stats {
            BatchNormMode::Train { stats, momentum } => {
                if n * hw < 2 {
                    return Err(Error::Validation(format!(
                        "batchnorm2d training needs at least 2 values per channel, got input {shape:?}"
                    )));
                }
                stats.check(c)?;
                let (mean, var) = nn::channel_moments(self.value(x).data(), n, c, hw);
                stats.update(&mean, &var, n * hw, momentum);
                let inv_std: Vec<F> = var.iter().map(|&v| (v + eps).sqrt().recip()).collect();
                (mean, inv_std, true)
            }
            BatchNormMode::Eval { stats } => {
                stats.check(c)?;
                let inv_std: Vec<F> = stats.var.iter().map(|&v| (v + eps).sqrt().recip()).collect();
                (stats.mean.clone(), inv_std, false)
            }
        };
        let out = nn::batchnorm_forward(
            self.value(x).data(),
            self.value(gamma).data(),
            self.value(beta).data(),
            &mean,
            &inv_std,
            n,
            c,
            hw,
        );
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        self.push(
            Tensor::new(&shape, out)?,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                inv_std,
                batch_stats,
                n,
                c,
                hw,
            },
            needs,
        )
    }

    /// Mean binary cross-entropy between `sigmoid(logits)` and 0/1 targets,
    /// evaluated from the logits in the fused stable form.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &Tensor<F>) -> Result<Var> {
        let lv = self.value(logits);
        if lv.shape() != targets.shape() {
            return Err(Error::Shape(format!(
                "bce logits {:?} vs targets {:?}",
                lv.shape(),
                targets.shape()
            )));
        }
        if !lv.is_finite() {
            return Err(Error::NonFinite("bce logits".into()));
        }
        if targets.data().iter().any(|&y| y != F::zero() && y != F::one()) {
            return Err(Error::Validation("bce targets must be 0 or 1".into()));
        }
        let count = F::from_usize(lv.len().max(1)).unwrap();
        let total = lv
            .data()
            .iter()
            .zip(targets.data())
            .fold(F::zero(), |acc, (&l, &y)| acc + bce_term(l, y));
        let needs = self.needs(logits);
        self.push(
            Tensor::scalar(total / count),
            Op::BceWithLogits {
                logits,
                targets: targets.data().to_vec(),
            },
            needs,
        )
    }

    /// Mean cross-entropy of `softmax(logits)` against class indices,
    /// `logits` shaped `[batch, classes]`.
    pub fn cross_entropy(&mut self, logits: Var, classes: &[usize]) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        let [batch, k] = shape[..] else {
            return Err(Error::Shape(format!("cross_entropy logits {shape:?}")));
        };
        if classes.len() != batch {
            return Err(Error::Shape(format!(
                "cross_entropy: {} classes for batch {batch}",
                classes.len()
            )));
        }
        if let Some(&bad) = classes.iter().find(|&&c| c >= k) {
            return Err(Error::Range(format!("class {bad} outside 0..{k}")));
        }
        let split = AxisSplit::new(&shape, 1)?;
        let probs = softmax_along(self.value(logits).data(), split);
        let lv = self.value(logits).data();
        let mut total = F::zero();
        for (row, &c) in classes.iter().enumerate() {
            let r = &lv[row * k..(row + 1) * k];
            let max = r.iter().fold(F::neg_infinity(), |a, &b| a.max(b));
            let lse = max + r.iter().fold(F::zero(), |a, &v| a + (v - max).exp()).ln();
            total = total + lse - r[c];
        }
        let needs = self.needs(logits);
        self.push(
            Tensor::scalar(total / F::from_usize(batch.max(1)).unwrap()),
            Op::CrossEntropy {
                logits,
                classes: classes.to_vec(),
                probs,
            },
            needs,
        )
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let total = self
            .value(x)
            .data()
            .iter()
            .fold(F::zero(), |a, &b| a + b);
        let needs = self.needs(x);
        self.push(Tensor::scalar(total), Op::SumAll(x), needs)
    }

    /// Reverse pass from the scalar `loss`.
    ///
    /// Gradients are added (`+=`) into the bound parameters of `params`;
    /// every bound parameter ends with an allocated gradient, zero when the
    /// loss does not depend on it.
    pub fn backward(&self, loss: Var, params: &mut ParameterSet<F>) -> Result<()> {
        let grads = self.gradients(loss)?;
        for (idx, node) in self.nodes.iter().enumerate() {
            if let Op::Param(slot) = node.op {
                let name = &self.bindings[slot];
                let tensor = params.get_mut(name)?;
                match &grads[idx] {
                    Some(g) => tensor.accumulate_grad(g)?,
                    None => tensor.accumulate_grad(&vec![F::zero(); tensor.len()])?,
                }
            }
        }
        Ok(())
    }

    /// Gradient of `loss` with respect to every node, `None` where it does
    /// not depend on the node. Intermediate gradients are released once
    /// propagated, so only leaves keep theirs.
    fn gradients(&self, loss: Var) -> Result<Vec<Option<Vec<F>>>> {
        if self.value(loss).len() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![F::one()]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            if matches!(node.op, Op::Param(_) | Op::Constant) {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(node, &g, &mut grads)?;
        }
        Ok(grads)
    }

    fn propagate(&self, node: &Node<F>, g: &[F], grads: &mut [Option<Vec<F>>]) -> Result<()> {
        let y = node.value.data();
        match &node.op {
            Op::Constant | Op::Param(_) => {}
            Op::Relu(x) => {
                let d = g
                    .iter()
                    .zip(y)
                    .map(|(&g, &y)| if y > F::zero() { g } else { F::zero() })
                    .collect();
                self.accumulate(grads, *x, d);
            }
            Op::Sigmoid(x) => {
                let d = g
                    .iter()
                    .zip(y)
                    .map(|(&g, &y)| g * y * (F::one() - y))
                    .collect();
                self.accumulate(grads, *x, d);
            }
            Op::Exp(x) => {
                let d = g.iter().zip(y).map(|(&g, &y)| g * y).collect();
                self.accumulate(grads, *x, d);
            }
            Op::Log(x) => {
                let xs = self.value(*x).data();
                let d = g.iter().zip(xs).map(|(&g, &x)| g / x).collect();
                self.accumulate(grads, *x, d);
            }
            Op::Scale(x, c) => {
                let d = g.iter().map(|&g| g * *c).collect();
                self.accumulate(grads, *x, d);
            }
            Op::AddScalar(x) | Op::Reshape(x) => self.accumulate(grads, *x, g.to_vec()),
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.to_vec());
                self.accumulate(grads, *b, g.to_vec());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.to_vec());
                self.accumulate(grads, *b, g.iter().map(|&v| -v).collect());
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if self.needs(*a) {
                    let d = g.iter().zip(vb).map(|(&g, &b)| g * b).collect();
                    self.accumulate(grads, *a, d);
                }
                if self.needs(*b) {
                    let d = g.iter().zip(va).map(|(&g, &a)| g * a).collect();
                    self.accumulate(grads, *b, d);
                }
            }
            &Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
            } => {
                let (va, vb) = (self.value(a).data(), self.value(b).data());
                if self.needs(a) {
                    let mut da = vec![F::zero(); batch * m * k];
                    for i in 0..batch {
                        // dA = dC * B^T
                        gemm(
                            &g[i * m * n..(i + 1) * m * n],
                            MatLayout::plain(m, n),
                            &vb[i * k * n..(i + 1) * k * n],
                            MatLayout::transposed(n, k),
                            &mut da[i * m * k..(i + 1) * m * k],
                            F::zero(),
                        );
                    }
                    self.accumulate(grads, a, da);
                }
                if self.needs(b) {
                    let mut db = vec![F::zero(); batch * k * n];
                    for i in 0..batch {
                        // dB = A^T * dC
                        gemm(
                            &va[i * m * k..(i + 1) * m * k],
                            MatLayout::transposed(k, m),
                            &g[i * m * n..(i + 1) * m * n],
                            MatLayout::plain(m, n),
                            &mut db[i * k * n..(i + 1) * k * n],
                            F::zero(),
                        );
                    }
                    self.accumulate(grads, b, db);
                }
            }
            &Op::Transpose {
                x,
                batch,
                rows,
                cols,
            } => {
                self.accumulate(grads, x, transpose_batched(g, batch, cols, rows));
            }
            &Op::Sum(x, split) | &Op::Mean(x, split) => {
                let scale = if matches!(node.op, Op::Mean(..)) {
                    F::one() / F::from_usize(split.len).unwrap()
                } else {
                    F::one()
                };
                let mut d = vec![F::zero(); split.outer * split.len * split.inner];
                for o in 0..split.outer {
                    for a in 0..split.len {
                        for i in 0..split.inner {
                            d[split.index(o, a, i)] = g[o * split.inner + i] * scale;
                        }
                    }
                }
                self.accumulate(grads, x, d);
            }
            Op::Max { x, split, argmax } => {
                let mut d = vec![F::zero(); split.outer * split.len * split.inner];
                for (&src, &gv) in argmax.iter().zip(g) {
                    d[src] = d[src] + gv;
                }
                self.accumulate(grads, *x, d);
            }
            &Op::Softmax(x, split) => {
                let mut d = vec![F::zero(); y.len()];
                for o in 0..split.outer {
                    for i in 0..split.inner {
                        let dot = (0..split.len).fold(F::zero(), |acc, a| {
                            let j = split.index(o, a, i);
                            acc + g[j] * y[j]
                        });
                        for a in 0..split.len {
                            let j = split.index(o, a, i);
                            d[j] = y[j] * (g[j] - dot);
                        }
                    }
                }
                self.accumulate(grads, x, d);
            }
            &Op::Expand(x, split) => {
                let mut d = vec![F::zero(); split.outer * split.inner];
                for o in 0..split.outer {
                    for a in 0..split.len {
                        for i in 0..split.inner {
                            let t = o * split.inner + i;
                            d[t] = d[t] + g[split.index(o, a, i)];
                        }
                    }
                }
                self.accumulate(grads, x, d);
            }
            &Op::Select { x, index, stride } => {
                let mut d = vec![F::zero(); self.value(x).len()];
                d[index * stride..(index + 1) * stride].copy_from_slice(g);
                self.accumulate(grads, x, d);
            }
            &Op::AvgPool2 { x, planes, h, w } => {
                self.accumulate(grads, x, nn::avg_pool2_backward(g, planes, h, w));
            }
            Op::Conv2d {
                x,
                kernel,
                bias,
                geom,
            } => {
                let (dx, dk, db) = nn::conv2d_backward(
                    self.value(*x).data(),
                    self.value(*kernel).data(),
                    g,
                    geom,
                    self.needs(*x),
                    self.needs(*kernel),
                    bias.map(|b| self.needs(b)).unwrap_or(false),
                );
                if let Some(dx) = dx {
                    self.accumulate(grads, *x, dx);
                }
                if let Some(dk) = dk {
                    self.accumulate(grads, *kernel, dk);
                }
                if let (Some(b), Some(db)) = (bias, db) {
                    self.accumulate(grads, *b, db);
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                inv_std,
                batch_stats,
                n,
                c,
                hw,
            } => {
                let parts = nn::batchnorm_backward(
                    self.value(*x).data(),
                    self.value(*gamma).data(),
                    g,
                    mean,
                    inv_std,
                    *batch_stats,
                    *n,
                    *c,
                    *hw,
                );
                if self.needs(*x) {
                    self.accumulate(grads, *x, parts.dx);
                }
                self.accumulate(grads, *gamma, parts.dgamma);
                self.accumulate(grads, *beta, parts.dbeta);
            }
            Op::BceWithLogits { logits, targets } => {
                let lv = self.value(*logits).data();
                let count = F::from_usize(lv.len().max(1)).unwrap();
                let d = lv
                    .iter()
                    .zip(targets)
                    .map(|(&l, &t)| g[0] * (sigmoid(l) - t) / count)
                    .collect();
                self.accumulate(grads, *logits, d);
            }
            Op::CrossEntropy {
                logits,
                classes,
                probs,
            } => {
                let batch = classes.len();
                let k = probs.len() / batch.max(1);
                let scale = g[0] / F::from_usize(batch.max(1)).unwrap();
                let mut d: Vec<F> = probs.iter().map(|&p| p * scale).collect();
                for (row, &c) in classes.iter().enumerate() {
                    d[row * k + c] = d[row * k + c] - scale;
                }
                self.accumulate(grads, *logits, d);
            }
            Op::SumAll(x) => {
                let n = self.value(*x).len();
                self.accumulate(grads, *x, vec![g[0]; n]);
            }
        }
        Ok(())
    }

    fn accumulate(&self, grads: &mut [Option<Vec<F>>], target: Var, delta: Vec<F>) {
        if !self.needs(target) {
            return;
        }
        match &mut grads[target.0] {
            Some(existing) => existing
                .iter_mut()
                .zip(&delta)
                .for_each(|(e, d)| *e = *e + *d),
            slot @ None => *slot = Some(delta),
        }
    }
}

/// How [`Graph::batchnorm2d`] obtains its statistics.
pub enum BatchNormMode<'a, F: Element> {
    Train {
        stats: &'a mut BatchNormStats<F>,
        momentum: F,
    },
    Eval {
        stats: &'a BatchNormStats<F>,
    },
}

pub(crate) fn sigmoid<F: Element>(v: F) -> F {
    if v >= F::zero() {
        F::one() / (F::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (F::one() + e)
    }
}

/// `-[y log s(l) + (1-y) log(1-s(l))] = max(l,0) - l*y + log(1 + e^-|l|)`.
pub(crate) fn bce_term<F: Element>(l: F, y: F) -> F {
    l.max(F::zero()) - l * y + (-l.abs()).exp().ln_1p()
}

fn reduce<F: Element>(src: &[F], split: AxisSplit, f: impl Fn(F, F) -> F, init: F) -> Vec<F> {
    let mut out = vec![init; split.outer * split.inner];
    for o in 0..split.outer {
        for a in 0..split.len {
            for i in 0..split.inner {
                let t = o * split.inner + i;
                out[t] = f(out[t], src[split.index(o, a, i)]);
            }
        }
    }
    out
}

/// Flat source index of the maximum of each slice; lowest index wins ties.
fn argmax_along<F: Element>(src: &[F], split: AxisSplit) -> Vec<usize> {
    let mut out = Vec::with_capacity(split.outer * split.inner);
    for o in 0..split.outer {
        for i in 0..split.inner {
            let mut best = split.index(o, 0, i);
            for a in 1..split.len {
                let j = split.index(o, a, i);
                if src[j] > src[best] {
                    best = j;
                }
            }
            out.push(best);
        }
    }
    out
}

pub(crate) fn softmax_along<F: Element>(src: &[F], split: AxisSplit) -> Vec<F> {
    let mut out = vec![F::zero(); src.len()];
    for o in 0..split.outer {
        for i in 0..split.inner {
            let max = (0..split.len).fold(F::neg_infinity(), |m, a| m.max(src[split.index(o, a, i)]));
            let mut total = F::zero();
            for a in 0..split.len {
                let j = split.index(o, a, i);
                let e = (src[j] - max).exp();
                out[j] = e;
                total = total + e;
            }
            for a in 0..split.len {
                let j = split.index(o, a, i);
                out[j] = out[j] / total;
            }
        }
    }
    out
}

fn transpose_batched<F: Element>(src: &[F], batch: usize, rows: usize, cols: usize) -> Vec<F> {
    let mut out = vec![F::zero(); src.len()];
    for b in 0..batch {
        let base = b * rows * cols;
        for r in 0..rows {
            for c in 0..cols {
                out[base + c * rows + r] = src[base + r * cols + c];
            }
        }
    }
    out
}

fn op_name<F: Element>(op: &Op<F>) -> &'static str {
    match op {
        Op::Constant => "constant",
        Op::Param(_) => "param",
        Op::Relu(_) => "relu",
        Op::Sigmoid(_) => "sigmoid",
        Op::Exp(_) => "exp",
        Op::Log(_) => "log",
        Op::Scale(..) => "scale",
        Op::AddScalar(_) => "add_scalar",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::Mul(..) => "mul",
        Op::MatMul { .. } => "matmul",
        Op::Transpose { .. } => "transpose",
        Op::Reshape(_) => "reshape",
        Op::Sum(..) => "sum",
        Op::Mean(..) => "mean",
        Op::Max { .. } => "max",
        Op::Softmax(..) => "softmax",
        Op::Expand(..) => "expand",
        Op::Select { .. } => "select",
        Op::AvgPool2 { .. } => "avg_pool2",
        Op::Conv2d { .. } => "conv2d",
        Op::BatchNorm { .. } => "batchnorm2d",
        Op::BceWithLogits { .. } => "bce_with_logits",
        Op::CrossEntropy { .. } => "cross_entropy",
        Op::SumAll(_) => "sum_all",
    }
}
