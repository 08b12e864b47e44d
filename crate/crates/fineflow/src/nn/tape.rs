//! Define-by-run reverse-mode differentiation.
//!
//! Every op appends a node holding its output; node order is therefore a
//! topological order, and [`Tape::backward`] walks it once in reverse.

use rand::Rng;

use crate::error::{Error, Result};

use super::kernels::{self, ConvGeom};
use super::scalar::{matmul, Mat};
use super::{ParamId, ParamStore, Scalar, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Batch statistics from a training-mode batch-norm call, for updating
/// running averages. `var` is the unbiased estimate.
#[derive(Debug, Clone)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

#[derive(Debug, Clone, Copy)]
pub enum BnMode<'a, T> {
    Train { eps: T },
    Eval { mean: &'a [T], var: &'a [T], eps: T },
}

#[derive(Debug)]
enum Op<T> {
    Constant,
    Leaf,
    Param(ParamId),
    Conv2d { input: Var, weight: Var, bias: Var, geom: ConvGeom },
    BatchNorm { input: Var, gamma: Var, beta: Var, mean: Vec<T>, inv_std: Vec<T>, train: bool },
    PixelShuffle { input: Var, r: usize },
    Dense { input: Var, weight: Var, bias: Var },
    Embedding { table: Var, indices: Vec<usize> },
    Dropout { input: Var, mask: Vec<T> },
    Relu { input: Var },
    Add { a: Var, b: Var },
    ConcatChannels { a: Var, b: Var },
    ConcatFeatures { parts: Vec<Var> },
    Reshape { input: Var },
    N2Norm { input: Var, n: usize, eps: T, sums: Vec<T> },
    MulConst { input: Var, factor: Vec<T> },
    Mse { pred: Var, target: Vec<T> },
    StructuralL1 { pred: Var, residual: Vec<T>, n: usize },
    Weighted { a: Var, b: Var, wb: T },
    Dot { input: Var, weights: Vec<T> },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Recorded computation. Build one per forward pass.
#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients of one scalar output with respect to every tape node.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads[v.0].as_deref()
    }
}

fn same_shape<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, context: &'static str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            context,
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Constant, false)
    }

    /// Input that receives a gradient (used by finite-difference checks).
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        self.push(store.param(id).value.clone(), Op::Param(id), true)
    }

    /// Stride-1 cross-correlation with `pad` zeros on each side.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var, pad: usize) -> Result<Var> {
        let (b, c, h, w) = self.value(input).dims4("conv2d input")?;
        let (co, ci, kh, kw) = self.value(weight).dims4("conv2d weight")?;
        if ci != c {
            return Err(Error::shape(
                "conv2d",
                format!("input has {c} channels, kernel expects {ci}"),
            ));
        }
        if kh != kw || kh % 2 == 0 || pad != (kh - 1) / 2 {
            return Err(Error::shape(
                "conv2d",
                format!("kernel {kh}x{kw} with padding {pad} is not an odd same-size kernel"),
            ));
        }
        if self.value(bias).shape() != [co] {
            return Err(Error::shape("conv2d", format!("bias shape {:?}", self.value(bias).shape())));
        }
        let geom = ConvGeom {
            batch: b,
            in_ch: c,
            out_ch: co,
            height: h,
            width: w,
            k: kh,
            pad,
        };
        let out = kernels::conv2d_forward(
            self.value(input).data(),
            self.value(weight).data(),
            self.value(bias).data(),
            &geom,
        );
        let rg = self.rg(input) || self.rg(weight) || self.rg(bias);
        Ok(self.push(
            Tensor::new(vec![b, co, h, w], out)?,
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            },
            rg,
        ))
    }

    /// Per-channel normalization over `(batch, height, width)`.
    pub fn batch_norm(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        mode: BnMode<'_, T>,
    ) -> Result<(Var, Option<BatchStats<T>>)> {
        let (b, c, h, w) = self.value(input).dims4("batch_norm")?;
        if self.value(gamma).shape() != [c] || self.value(beta).shape() != [c] {
            return Err(Error::shape("batch_norm", format!("affine terms must have {c} entries")));
        }
        let plane = h * w;
        let count = b * plane;
        let x = self.value(input).data();
        let (mean, inv_std, stats, train) = match mode {
            BnMode::Train { eps } => {
                if b < 2 {
                    return Err(Error::domain(
                        "batch_norm",
                        "training mode needs a batch of at least 2",
                    ));
                }
                let m = T::from_usize(count).unwrap();
                let mut mean = vec![T::zero(); c];
                let mut var = vec![T::zero(); c];
                for ch in 0..c {
                    let mut s = T::zero();
                    for bi in 0..b {
                        s += x[(bi * c + ch) * plane..(bi * c + ch + 1) * plane].iter().copied().sum::<T>();
                    }
                    let mu = s / m;
                    let mut ss = T::zero();
                    for bi in 0..b {
                        for v in &x[(bi * c + ch) * plane..(bi * c + ch + 1) * plane] {
                            let d = *v - mu;
                            ss += d * d;
                        }
                    }
                    mean[ch] = mu;
                    var[ch] = ss / m;
                }
                let inv_std: Vec<T> = var.iter().map(|v| T::one() / (*v + eps).sqrt()).collect();
                let unbiased = var
                    .iter()
                    .map(|v| *v * m / (m - T::one()))
                    .collect();
                let stats = BatchStats {
                    mean: mean.clone(),
                    var: unbiased,
                };
                (mean, inv_std, Some(stats), true)
            }
            BnMode::Eval { mean, var, eps } => {
                if mean.len() != c || var.len() != c {
                    return Err(Error::shape("batch_norm", "running statistics length"));
                }
                let inv_std = var.iter().map(|v| T::one() / (*v + eps).sqrt()).collect();
                (mean.to_vec(), inv_std, None, false)
            }
        };
        let g = self.value(gamma).data();
        let be = self.value(beta).data();
        let mut out = vec![T::zero(); x.len()];
        for bi in 0..b {
            for ch in 0..c {
                let sl = (bi * c + ch) * plane..(bi * c + ch + 1) * plane;
                let (mu, is, gg, bb) = (mean[ch], inv_std[ch], g[ch], be[ch]);
                for (o, v) in out[sl.clone()].iter_mut().zip(&x[sl]) {
                    *o = gg * (*v - mu) * is + bb;
                }
            }
        }
        let rg = self.rg(input) || self.rg(gamma) || self.rg(beta);
        let var = self.push(
            Tensor::new(vec![b, c, h, w], out)?,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                mean,
                inv_std,
                train,
            },
            rg,
        );
        Ok((var, stats))
    }

    pub fn pixel_shuffle(&mut self, input: Var, r: usize) -> Result<Var> {
        let (b, c, h, w) = self.value(input).dims4("pixel_shuffle")?;
        if r == 0 || c % (r * r) != 0 {
            return Err(Error::shape(
                "pixel_shuffle",
                format!("{c} channels not divisible by {r}²"),
            ));
        }
        let out = kernels::pixel_shuffle(self.value(input).data(), b, c, h, w, r);
        let rg = self.rg(input);
        Ok(self.push(
            Tensor::new(vec![b, c / (r * r), h * r, w * r], out)?,
            Op::PixelShuffle { input, r },
            rg,
        ))
    }

    /// `y = x·Wᵀ + b` for `x: (B, D_in)`, `W: (D_out, D_in)`.
    pub fn dense(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let (b, din) = self.value(input).dims2("dense input")?;
        let (dout, win) = self.value(weight).dims2("dense weight")?;
        if win != din || self.value(bias).shape() != [dout] {
            return Err(Error::shape(
                "dense",
                format!("input width {din}, weight {dout}x{win}, bias {:?}", self.value(bias).shape()),
            ));
        }
        let mut out = vec![T::zero(); b * dout];
        matmul(
            Mat::new(self.value(input).data(), b, din),
            Mat::new(self.value(weight).data(), dout, din).t(),
            &mut out,
            false,
        );
        let bias_v = self.value(bias).data();
        for row in out.chunks_mut(dout) {
            for (o, bv) in row.iter_mut().zip(bias_v) {
                *o += *bv;
            }
        }
        let rg = self.rg(input) || self.rg(weight) || self.rg(bias);
        Ok(self.push(
            Tensor::new(vec![b, dout], out)?,
            Op::Dense { input, weight, bias },
            rg,
        ))
    }

    /// Gathers rows of a `(V, d)` table, one per batch entry.
    pub fn embedding(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let (v, d) = self.value(table).dims2("embedding table")?;
        if let Some(bad) = indices.iter().find(|i| **i >= v) {
            return Err(Error::domain(
                "embedding",
                format!("index {bad} outside vocabulary of {v}"),
            ));
        }
        let t = self.value(table).data();
        let mut out = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            out.extend_from_slice(&t[i * d..(i + 1) * d]);
        }
        let rg = self.rg(table);
        Ok(self.push(
            Tensor::new(vec![indices.len(), d], out)?,
            Op::Embedding {
                table,
                indices: indices.to_vec(),
            },
            rg,
        ))
    }

    /// Inverted dropout. `rng = None` means evaluation mode (identity).
    pub fn dropout<R: Rng + ?Sized>(&mut self, input: Var, rate: f64, rng: Option<&mut R>) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::domain("dropout", format!("rate must lie in [0, 1), got {rate}")));
        }
        let n = self.value(input).len();
        let mask: Vec<T> = match rng {
            Some(rng) if rate > 0.0 => {
                let keep = T::lit(1.0 / (1.0 - rate));
                (0..n)
                    .map(|_| if rng.random::<f64>() < rate { T::zero() } else { keep })
                    .collect()
            }
            _ => vec![T::one(); n],
        };
        let x = self.value(input);
        let out: Vec<T> = x.data().iter().zip(&mask).map(|(a, m)| *a * *m).collect();
        let shape = x.shape().to_vec();
        let rg = self.rg(input);
        Ok(self.push(Tensor::new(shape, out)?, Op::Dropout { input, mask }, rg))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let x = self.value(input);
        let out: Vec<T> = x
            .data()
            .iter()
            .map(|v| if *v > T::zero() { *v } else { T::zero() })
            .collect();
        let shape = x.shape().to_vec();
        let rg = self.rg(input);
        self.push(Tensor::new(shape, out).expect("same length"), Op::Relu { input }, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self.value(a), self.value(b), "add")?;
        let out: Vec<T> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| *x + *y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(shape, out)?, Op::Add { a, b }, rg))
    }

    /// Concatenates two image tensors along the channel axis.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ba, ca, ha, wa) = self.value(a).dims4("concat")?;
        let (bb, cb, hb, wb) = self.value(b).dims4("concat")?;
        if (ba, ha, wa) != (bb, hb, wb) {
            return Err(Error::shape(
                "concat",
                format!("{:?} vs {:?}", self.value(a).shape(), self.value(b).shape()),
            ));
        }
        let (pa, pb) = (ca * ha * wa, cb * ha * wa);
        let mut out = Vec::with_capacity(ba * (pa + pb));
        for bi in 0..ba {
            out.extend_from_slice(&self.value(a).data()[bi * pa..(bi + 1) * pa]);
            out.extend_from_slice(&self.value(b).data()[bi * pb..(bi + 1) * pb]);
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            Tensor::new(vec![ba, ca + cb, ha, wa], out)?,
            Op::ConcatChannels { a, b },
            rg,
        ))
    }

    /// Concatenates `(B, d_k)` feature tensors along the feature axis.
    pub fn concat_features(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::shape("concat_features", "no inputs"))?;
        let (b, _) = self.value(*first).dims2("concat_features")?;
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let (pb, d) = self.value(*p).dims2("concat_features")?;
            if pb != b {
                return Err(Error::shape("concat_features", format!("batch {pb} vs {b}")));
            }
            widths.push(d);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(b * total);
        for bi in 0..b {
            for (p, d) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(*p).data()[bi * d..(bi + 1) * d]);
            }
        }
        let rg = parts.iter().any(|p| self.rg(*p));
        Ok(self.push(
            Tensor::new(vec![b, total], out)?,
            Op::ConcatFeatures {
                parts: parts.to_vec(),
            },
            rg,
        ))
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(input).clone().reshaped(shape)?;
        let rg = self.rg(input);
        Ok(self.push(t, Op::Reshape { input }, rg))
    }

    /// Divides each entry by the sum of its `n x n` block plus `eps`.
    pub fn n2_normalize(&mut self, input: Var, n: usize, eps: T) -> Result<Var> {
        let (b, c, h, w) = self.value(input).dims4("n2_normalize")?;
        if n == 0 || h % n != 0 || w % n != 0 {
            return Err(Error::shape(
                "n2_normalize",
                format!("{h}x{w} not divisible by {n}"),
            ));
        }
        let x = self.value(input).data();
        if x.iter().any(|v| *v < T::zero() || !v.is_finite()) {
            return Err(Error::domain("n2_normalize", "input must be finite and nonnegative"));
        }
        let sums = kernels::block_sums(x, b * c, h, w, n);
        let mut out = vec![T::zero(); x.len()];
        for p in 0..b * c {
            for r in 0..h {
                for col in 0..w {
                    let k = (p * h + r) * w + col;
                    let d = sums[kernels::block_index(p, r, col, h, w, n)] + eps;
                    out[k] = if d > T::zero() { x[k] / d } else { T::zero() };
                }
            }
        }
        let rg = self.rg(input);
        Ok(self.push(
            Tensor::new(vec![b, c, h, w], out)?,
            Op::N2Norm { input, n, eps, sums },
            rg,
        ))
    }

    /// Element-wise product with a constant tensor of the same shape.
    pub fn mul_const(&mut self, input: Var, factor: &Tensor<T>) -> Result<Var> {
        same_shape(self.value(input), factor, "mul_const")?;
        let out: Vec<T> = self
            .value(input)
            .data()
            .iter()
            .zip(factor.data())
            .map(|(a, b)| *a * *b)
            .collect();
        let shape = factor.shape().to_vec();
        let rg = self.rg(input);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::MulConst {
                input,
                factor: factor.data().to_vec(),
            },
            rg,
        ))
    }

    /// Mean squared error against a constant target.
    pub fn mse(&mut self, pred: Var, target: &Tensor<T>) -> Result<Var> {
        same_shape(self.value(pred), target, "mse_loss")?;
        let n = T::from_usize(target.len().max(1)).unwrap();
        let diff: Vec<T> = self
            .value(pred)
            .data()
            .iter()
            .zip(target.data())
            .map(|(p, t)| *p - *t)
            .collect();
        let loss = diff.iter().map(|d| *d * *d).sum::<T>() / n;
        let rg = self.rg(pred);
        Ok(self.push(Tensor::scalar(loss), Op::Mse { pred, target: diff }, rg))
    }

    /// Mean over superregions of `|coarse − Σ block(pred)|`.
    /// `pred` is `(B, 1, nH, nW)`; `coarse` is `(B, 1, H, W)`.
    pub fn structural_l1(&mut self, pred: Var, coarse: &Tensor<T>, n: usize) -> Result<Var> {
        let (b, c, h, w) = self.value(pred).dims4("structural_loss")?;
        let (cb, cc, ch, cw) = coarse.dims4("structural_loss")?;
        if (b, c) != (cb, cc) || n == 0 || ch * n != h || cw * n != w {
            return Err(Error::shape(
                "structural_loss",
                format!("prediction {:?} vs coarse {:?} at scale {n}", self.value(pred).shape(), coarse.shape()),
            ));
        }
        let sums = kernels::block_sums(self.value(pred).data(), b * c, h, w, n);
        let residual: Vec<T> = coarse.data().iter().zip(&sums).map(|(x, s)| *x - *s).collect();
        let count = T::from_usize(residual.len().max(1)).unwrap();
        let loss = residual.iter().map(|r| r.abs()).sum::<T>() / count;
        let rg = self.rg(pred);
        Ok(self.push(Tensor::scalar(loss), Op::StructuralL1 { pred, residual, n }, rg))
    }

    /// `a + wb·b` for same-shape inputs.
    pub fn weighted_sum(&mut self, a: Var, b: Var, wb: T) -> Result<Var> {
        same_shape(self.value(a), self.value(b), "weighted_sum")?;
        let out: Vec<T> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| *x + wb * *y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(shape, out)?, Op::Weighted { a, b, wb }, rg))
    }

    /// Scalar `Σ x·weights`, used to project any output to a scalar.
    pub fn dot(&mut self, input: Var, weights: &[T]) -> Result<Var> {
        if weights.len() != self.value(input).len() {
            return Err(Error::shape("dot", "weight length"));
        }
        let s = self
            .value(input)
            .data()
            .iter()
            .zip(weights)
            .map(|(a, b)| *a * *b)
            .sum::<T>();
        let rg = self.rg(input);
        Ok(self.push(
            Tensor::scalar(s),
            Op::Dot {
                input,
                weights: weights.to_vec(),
            },
            rg,
        ))
    }

    /// Reverse accumulation from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape("backward", "loss must be a scalar"));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let mut acc = |v: Var, delta: Vec<T>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => {
                    for (e, d) in existing.iter_mut().zip(delta) {
                        *e += d;
                    }
                }
                slot @ None => *slot = Some(delta),
            }
        };
        match &node.op {
            Op::Constant | Op::Leaf | Op::Param(_) => {}
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            } => {
                let cg = kernels::conv2d_backward(
                    self.value(*input).data(),
                    self.value(*weight).data(),
                    g,
                    geom,
                    self.rg(*input),
                );
                if let Some(di) = cg.input {
                    acc(*input, di);
                }
                acc(*weight, cg.weight);
                acc(*bias, cg.bias);
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                mean,
                inv_std,
                train,
            } => {
                let x = self.value(*input);
                let (b, c, h, w) = x.dims4("batch_norm").expect("checked in forward");
                let plane = h * w;
                let xd = x.data();
                let gm = self.value(*gamma).data();
                let mut dg = vec![T::zero(); c];
                let mut db = vec![T::zero(); c];
                for bi in 0..b {
                    for ch in 0..c {
                        let sl = (bi * c + ch) * plane..(bi * c + ch + 1) * plane;
                        for (gy, xv) in g[sl.clone()].iter().zip(&xd[sl]) {
                            dg[ch] += *gy * (*xv - mean[ch]) * inv_std[ch];
                            db[ch] += *gy;
                        }
                    }
                }
                if self.rg(*input) {
                    let mut dx = vec![T::zero(); xd.len()];
                    let m = T::from_usize(b * plane).unwrap();
                    for bi in 0..b {
                        for ch in 0..c {
                            let sl = (bi * c + ch) * plane..(bi * c + ch + 1) * plane;
                            let k = gm[ch] * inv_std[ch];
                            for ((d, gy), xv) in dx[sl.clone()].iter_mut().zip(&g[sl.clone()]).zip(&xd[sl]) {
                                *d = if *train {
                                    let xhat = (*xv - mean[ch]) * inv_std[ch];
                                    k / m * (m * *gy - db[ch] - xhat * dg[ch])
                                } else {
                                    k * *gy
                                };
                            }
                        }
                    }
                    acc(*input, dx);
                }
                acc(*gamma, dg);
                acc(*beta, db);
            }
            Op::PixelShuffle { input, r } => {
                let (b, c, h, w) = node.value.dims4("pixel_shuffle").expect("4-d");
                acc(*input, kernels::pixel_unshuffle(g, b, c, h, w, *r));
            }
            Op::Dense { input, weight, bias } => {
                let (b, din) = self.value(*input).dims2("dense").expect("2-d");
                let (dout, _) = self.value(*weight).dims2("dense").expect("2-d");
                let gm = Mat::new(g, b, dout);
                if self.rg(*input) {
                    let mut dx = vec![T::zero(); b * din];
                    matmul(gm, Mat::new(self.value(*weight).data(), dout, din), &mut dx, false);
                    acc(*input, dx);
                }
                let mut dw = vec![T::zero(); dout * din];
                matmul(gm.t(), Mat::new(self.value(*input).data(), b, din), &mut dw, false);
                acc(*weight, dw);
                let mut dbias = vec![T::zero(); dout];
                for row in g.chunks(dout) {
                    for (d, v) in dbias.iter_mut().zip(row) {
                        *d += *v;
                    }
                }
                acc(*bias, dbias);
            }
            Op::Embedding { table, indices } => {
                let (_, d) = self.value(*table).dims2("embedding").expect("2-d");
                let mut dt = vec![T::zero(); self.value(*table).len()];
                for (row, &i) in indices.iter().enumerate() {
                    for (t, v) in dt[i * d..(i + 1) * d].iter_mut().zip(&g[row * d..(row + 1) * d]) {
                        *t += *v;
                    }
                }
                acc(*table, dt);
            }
            Op::Dropout { input, mask } => {
                acc(*input, g.iter().zip(mask).map(|(a, m)| *a * *m).collect());
            }
            Op::Relu { input } => {
                let x = self.value(*input).data();
                acc(
                    *input,
                    g.iter()
                        .zip(x)
                        .map(|(gy, xv)| if *xv > T::zero() { *gy } else { T::zero() })
                        .collect(),
                );
            }
            Op::Add { a, b } => {
                acc(*a, g.to_vec());
                acc(*b, g.to_vec());
            }
            Op::ConcatChannels { a, b } => {
                let (bs, ca, h, w) = self.value(*a).dims4("concat").expect("4-d");
                let (_, cb, _, _) = self.value(*b).dims4("concat").expect("4-d");
                let (pa, pb) = (ca * h * w, cb * h * w);
                let mut da = Vec::with_capacity(bs * pa);
                let mut dbv = Vec::with_capacity(bs * pb);
                for bi in 0..bs {
                    let base = bi * (pa + pb);
                    da.extend_from_slice(&g[base..base + pa]);
                    dbv.extend_from_slice(&g[base + pa..base + pa + pb]);
                }
                acc(*a, da);
                acc(*b, dbv);
            }
            Op::ConcatFeatures { parts } => {
                let widths: Vec<usize> = parts.iter().map(|p| self.value(*p).shape()[1]).collect();
                let total: usize = widths.iter().sum();
                let b = g.len() / total.max(1);
                let mut offset = 0;
                for (p, d) in parts.iter().zip(&widths) {
                    let mut dp = Vec::with_capacity(b * d);
                    for bi in 0..b {
                        dp.extend_from_slice(&g[bi * total + offset..bi * total + offset + d]);
                    }
                    offset += d;
                    acc(*p, dp);
                }
            }
            Op::Reshape { input } => acc(*input, g.to_vec()),
            Op::N2Norm { input, n, eps, sums } => {
                let x = self.value(*input);
                let (b, c, h, w) = x.dims4("n2_normalize").expect("4-d");
                let xd = x.data();
                // per block: Σ g·x
                let mut gx = vec![T::zero(); sums.len()];
                for p in 0..b * c {
                    for r in 0..h {
                        for col in 0..w {
                            let k = (p * h + r) * w + col;
                            gx[kernels::block_index(p, r, col, h, w, *n)] += g[k] * xd[k];
                        }
                    }
                }
                let mut dx = vec![T::zero(); xd.len()];
                for p in 0..b * c {
                    for r in 0..h {
                        for col in 0..w {
                            let k = (p * h + r) * w + col;
                            let bi = kernels::block_index(p, r, col, h, w, *n);
                            let d = sums[bi] + *eps;
                            if d > T::zero() {
                                dx[k] = g[k] / d - gx[bi] / (d * d);
                            }
                        }
                    }
                }
                acc(*input, dx);
            }
            Op::MulConst { input, factor } => {
                acc(*input, g.iter().zip(factor).map(|(a, f)| *a * *f).collect());
            }
            Op::Mse { pred, target: diff } => {
                let n = T::from_usize(diff.len().max(1)).unwrap();
                let two = T::lit(2.0);
                acc(*pred, diff.iter().map(|d| two * *d / n * g[0]).collect());
            }
            Op::StructuralL1 { pred, residual, n } => {
                let (b, c, h, w) = self.value(*pred).dims4("structural_loss").expect("4-d");
                let count = T::from_usize(residual.len().max(1)).unwrap();
                let mut dp = vec![T::zero(); b * c * h * w];
                for p in 0..b * c {
                    for r in 0..h {
                        for col in 0..w {
                            let res = residual[kernels::block_index(p, r, col, h, w, *n)];
                            let sign = if res > T::zero() {
                                T::one()
                            } else if res < T::zero() {
                                -T::one()
                            } else {
                                T::zero()
                            };
                            dp[(p * h + r) * w + col] = -sign / count * g[0];
                        }
                    }
                }
                acc(*pred, dp);
            }
            Op::Weighted { a, b, wb } => {
                acc(*a, g.to_vec());
                acc(*b, g.iter().map(|v| *v * *wb).collect());
            }
            Op::Dot { input, weights } => {
                acc(*input, weights.iter().map(|w| *w * g[0]).collect());
            }
        }
    }

    /// Activation pattern of every ReLU on the tape. Finite differences are
    /// only meaningful between points that share this pattern.
    pub fn relu_pattern(&self) -> Vec<bool> {
        let mut out = Vec::new();
        for node in &self.nodes {
            if let Op::Relu { input } = node.op {
                out.extend(self.value(input).data().iter().map(|v| *v > T::zero()));
            }
        }
        out
    }

    /// Adds the gradient of every parameter node into the store.
    pub fn accumulate_param_grads(&self, grads: &Gradients<T>, store: &mut ParamStore<T>) {
        for (i, node) in self.nodes.iter().enumerate() {
            if let Op::Param(id) = node.op {
                if let Some(g) = &grads.grads[i] {
                    for (dst, v) in store.param_mut(id).grad.data_mut().iter_mut().zip(g) {
                        *dst += *v;
                    }
                }
            }
        }
    }
}
