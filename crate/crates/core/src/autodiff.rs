//! Reverse-mode differentiation over a linear tape.
//!
//! Every operation appends a node holding its output value and enough saved
//! state to run its vector-Jacobian product. [`Tape::backward`] walks the
//! nodes in reverse and accumulates into the gradients of the parameters the
//! tape was built from. Constants never receive gradient, which is how frozen
//! layers are kept out of an upper layer's update.

use rand::Rng;
use rand_distr::Distribution;

use crate::error::{arg_err, dim_err, Result};
use crate::kernels::{self, ConvDims, ConvGeom};
use crate::param::{ParamId, ParamStore};
use crate::real::Real;
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
    Identity,
}

/// Gumbel noise is drawn from u ∈ (ε, 1−ε) so −log(−log u) stays finite.
pub const GUMBEL_EPS: f64 = 1e-10;

/// Running per-channel statistics for input normalisation.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningNorm<T = f32> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
    pub momentum: f64,
    pub eps: f64,
}

impl<T: Real> RunningNorm<T> {
    pub const DEFAULT_MOMENTUM: f64 = 0.1;
    pub const DEFAULT_EPS: f64 = 1e-5;

    pub fn new(channels: usize) -> Self {
        Self {
            mean: vec![T::zero(); channels],
            var: vec![T::one(); channels],
            momentum: Self::DEFAULT_MOMENTUM,
            eps: Self::DEFAULT_EPS,
        }
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }
}

enum Op<T> {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        dims: ConvDims,
    },
    Upsample {
        x: Var,
        factor: usize,
    },
    Act {
        x: Var,
        kind: Activation,
    },
    Normalize {
        x: Var,
        inv_std: Vec<T>,
        batch_stats: bool,
    },
    Dropout {
        x: Var,
        mask: Vec<T>,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Sum(Var),
    Matmul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    AddRowBias {
        x: Var,
        b: Var,
    },
    NegHalfSqDist {
        z: Var,
        e: Var,
    },
    Softmax(Var),
    LogSoftmax(Var),
    ToRows(Var),
    FromRows(Var),
    Reshape(Var),
    GatherRows {
        table: Var,
        idx: Vec<usize>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<T>,
    },
    Mse(Var, Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    param: Option<(u64, ParamId)>,
}

pub struct Tape<T = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A value that never receives gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A leaf that receives gradient but is not tied to a parameter store.
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Registers a stored parameter; gradient flows back to it on `backward`
    /// when it is marked `requires_grad`.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        let p = store.get(id);
        let v = self.push(p.tensor.clone(), Op::Leaf, p.requires_grad);
        self.nodes[v.0].param = Some((store.uid(), id));
        v
    }

    /// Copies a value into a fresh constant: the stop-gradient operator.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, geom: ConvGeom) -> Result<Var> {
        let dims = ConvDims::infer(self.shape(x), self.shape(w), geom)?;
        if let Some(b) = b {
            if self.shape(b) != [dims.out_ch] {
                return Err(dim_err(
                    "conv2d",
                    format!("bias shape {:?}, expected [{}]", self.shape(b), dims.out_ch),
                ));
            }
        }
        let out = kernels::conv2d_forward(
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            &dims,
        );
        let value = Tensor::new(vec![dims.batch, dims.out_ch, dims.oh, dims.ow], out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        let rg = self.rg(&inputs);
        Ok(self.push(value, Op::Conv2d { x, w, b, dims }, rg))
    }

    pub fn nearest_upsample(&mut self, x: Var, factor: usize) -> Result<Var> {
        if factor == 0 {
            return Err(arg_err("nearest_upsample", "factor must be at least 1"));
        }
        let shape = self.shape(x).to_vec();
        if shape.len() != 4 {
            return Err(dim_err(
                "nearest_upsample",
                format!("expected [B,C,H,W], got {shape:?}"),
            ));
        }
        let out = kernels::upsample_forward(self.value(x).data(), &shape, factor);
        let value = Tensor::new(
            vec![shape[0], shape[1], shape[2] * factor, shape[3] * factor],
            out,
        )?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Upsample { x, factor }, rg))
    }

    pub fn elementwise(&mut self, x: Var, kind: Activation) -> Var {
        let value = match kind {
            Activation::Relu => self.value(x).map(|v| v.max(T::zero())),
            Activation::Sigmoid => self.value(x).map(kernels::sigmoid),
            Activation::Identity => self.value(x).map(|v| v),
        };
        let rg = self.rg(&[x]);
        self.push(value, Op::Act { x, kind }, rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.elementwise(x, Activation::Relu)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.elementwise(x, Activation::Sigmoid)
    }

    /// Channel-wise standardisation of a `[B,C,H,W]` (or `[B,C]`) input.
    /// Training mode normalises with the batch statistics and folds them into
    /// `state`; eval mode uses `state` only.
    pub fn running_normalize(
        &mut self,
        x: Var,
        state: &mut RunningNorm<T>,
        training: bool,
    ) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 || shape[1] != state.channels() {
            return Err(dim_err(
                "running_normalize",
                format!("input {shape:?} vs {} channels of state", state.channels()),
            ));
        }
        let (b, c) = (shape[0], shape[1]);
        let inner: usize = shape[2..].iter().product();
        let count = b * inner;
        let data = self.value(x).data();
        let eps = T::c(state.eps);
        let (mean, var) = if training {
            let mut mean = vec![T::zero(); c];
            let mut var = vec![T::zero(); c];
            for ch in 0..c {
                let mut s = T::zero();
                for bi in 0..b {
                    let off = (bi * c + ch) * inner;
                    s += data[off..off + inner].iter().copied().sum::<T>();
                }
                let m = s / T::c(count as f64);
                let mut ss = T::zero();
                for bi in 0..b {
                    let off = (bi * c + ch) * inner;
                    ss += data[off..off + inner]
                        .iter()
                        .map(|&v| (v - m) * (v - m))
                        .sum::<T>();
                }
                mean[ch] = m;
                var[ch] = ss / T::c(count as f64);
            }
            let mom = T::c(state.momentum);
            let unbias = if count > 1 {
                T::c(count as f64 / (count - 1) as f64)
            } else {
                T::one()
            };
            for ch in 0..c {
                state.mean[ch] = (T::one() - mom) * state.mean[ch] + mom * mean[ch];
                state.var[ch] = (T::one() - mom) * state.var[ch] + mom * var[ch] * unbias;
            }
            (mean, var)
        } else {
            (state.mean.clone(), state.var.clone())
        };
        let inv_std: Vec<T> = var
            .iter()
            .map(|&v| T::one() / (v.max(T::zero()) + eps).sqrt())
            .collect();
        let mut out = data.to_vec();
        for bi in 0..b {
            for ch in 0..c {
                let off = (bi * c + ch) * inner;
                for v in &mut out[off..off + inner] {
                    *v = (*v - mean[ch]) * inv_std[ch];
                }
            }
        }
        let value = Tensor::new(shape, out)?;
        let rg = self.rg(&[x]);
        let op = Op::Normalize {
            x,
            inv_std,
            batch_stats: training,
        };
        Ok(self.push(value, op, rg))
    }

    /// Inverted dropout; identity when `p == 0`.
    pub fn dropout<R: Rng>(&mut self, x: Var, p: f64, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(arg_err("dropout", format!("probability {p} not in [0,1)")));
        }
        if p == 0.0 {
            return Ok(x);
        }
        let keep = T::c(1.0 / (1.0 - p));
        let mask: Vec<T> = (0..self.value(x).len())
            .map(|_| {
                if rng.random::<f64>() < p {
                    T::zero()
                } else {
                    keep
                }
            })
            .collect();
        let mut value = self.value(x).clone();
        value.clear_grad();
        value
            .data_mut()
            .iter_mut()
            .zip(&mask)
            .for_each(|(v, &m)| *v *= m);
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Dropout { x, mask }, rg))
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(T, T) -> T,
    ) -> Result<Vec<T>> {
        if self.shape(a) != self.shape(b) {
            return Err(dim_err(
                name,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "add", |x, y| x + y)?;
        let value = Tensor::new(self.shape(a).to_vec(), out)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "sub", |x, y| x - y)?;
        let value = Tensor::new(self.shape(a).to_vec(), out)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "mul", |x, y| x * y)?;
        let value = Tensor::new(self.shape(a).to_vec(), out)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let value = self.value(x).map(|v| v * c);
        let rg = self.rg(&[x]);
        self.push(value, Op::Scale(x, c), rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        // f64 accumulation: f32 sums over millions of terms drift by percents.
        let s = T::c(self.value(x).data().iter().map(|v| v.f64()).sum::<f64>());
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len().max(1);
        let s = self.sum(x);
        self.scale(s, T::one() / T::c(n as f64))
    }

    /// `[m,k] @ [k,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(dim_err("matmul", format!("{sa:?} @ {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            T::one(),
            self.value(a).data(),
            false,
            self.value(b).data(),
            false,
            T::zero(),
            &mut out,
        );
        let value = Tensor::new(vec![m, n], out)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Matmul { a, b, m, k, n }, rg))
    }

    /// `[R,C] + [C]` broadcast over rows.
    pub fn add_row_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x), self.shape(b));
        if sx.len() != 2 || sb != [sx[1]] {
            return Err(dim_err("add_row_bias", format!("{sx:?} + {sb:?}")));
        }
        let cols = sx[1];
        let mut value = self.value(x).clone();
        value.clear_grad();
        let bias = self.value(b).data().to_vec();
        for row in value.data_mut().chunks_exact_mut(cols) {
            row.iter_mut().zip(&bias).for_each(|(v, &bv)| *v += bv);
        }
        let rg = self.rg(&[x, b]);
        Ok(self.push(value, Op::AddRowBias { x, b }, rg))
    }

    /// Logits `−½‖z_p − e_n‖²` for rows `z: [P,D]` against codes `e: [N,D]`,
    /// computed through GEMM (see [`kernels::pairwise_sq_dist_gemm`]).
    pub fn neg_half_sq_dist(&mut self, z: Var, e: Var) -> Result<Var> {
        let (sz, se) = (self.shape(z), self.shape(e));
        if sz.len() != 2 || se.len() != 2 || sz[1] != se[1] {
            return Err(dim_err(
                "neg_half_sq_dist",
                format!("{sz:?} vs codebook {se:?}"),
            ));
        }
        let (p, n, d) = (sz[0], se[0], sz[1]);
        let half = T::c(-0.5);
        let out: Vec<T> =
            kernels::pairwise_sq_dist_gemm(self.value(z).data(), self.value(e).data(), d)
                .into_iter()
                .map(|v| v * half)
                .collect();
        let value = Tensor::new(vec![p, n], out)?;
        let rg = self.rg(&[z, e]);
        Ok(self.push(value, Op::NegHalfSqDist { z, e }, rg))
    }

    fn last_dim(&self, x: Var) -> usize {
        *self.shape(x).last().unwrap_or(&1)
    }

    pub fn softmax(&mut self, x: Var) -> Var {
        let cols = self.last_dim(x);
        let out = kernels::softmax_rows(self.value(x).data(), cols);
        let value = Tensor::new(self.shape(x).to_vec(), out).expect("same shape");
        let rg = self.rg(&[x]);
        self.push(value, Op::Softmax(x), rg)
    }

    pub fn log_softmax(&mut self, x: Var) -> Var {
        let cols = self.last_dim(x);
        let out = kernels::log_softmax_rows(self.value(x).data(), cols);
        let value = Tensor::new(self.shape(x).to_vec(), out).expect("same shape");
        let rg = self.rg(&[x]);
        self.push(value, Op::LogSoftmax(x), rg)
    }

    /// `[B,C,H,W] -> [B·H·W, C]`.
    pub fn to_rows(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(dim_err("to_rows", format!("expected [B,C,H,W], got {s:?}")));
        }
        let out = kernels::nchw_to_rows(self.value(x).data(), &s);
        let value = Tensor::new(vec![s[0] * s[2] * s[3], s[1]], out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::ToRows(x), rg))
    }

    /// `[B·H·W, C] -> [B,C,H,W]`.
    pub fn from_rows(&mut self, x: Var, shape: [usize; 4]) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 || s[0] != shape[0] * shape[2] * shape[3] || s[1] != shape[1] {
            return Err(dim_err("from_rows", format!("{s:?} -> {shape:?}")));
        }
        let out = kernels::rows_to_nchw(self.value(x).data(), &shape);
        let value = Tensor::new(shape.to_vec(), out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::FromRows(x), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let mut value = self.value(x).clone();
        value.clear_grad();
        let value = value.reshape(shape.to_vec())?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    /// Row lookup `table[idx[i]]` for a `[N,D]` table.
    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let s = self.shape(table).to_vec();
        if s.len() != 2 {
            return Err(dim_err(
                "gather_rows",
                format!("table must be 2-D, got {s:?}"),
            ));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= s[0]) {
            return Err(crate::error::HqaError::Range {
                index: bad,
                size: s[0],
            });
        }
        let value = self.value(table).select_outer(idx);
        let rg = self.rg(&[table]);
        Ok(self.push(
            value,
            Op::GatherRows {
                table,
                idx: idx.to_vec(),
            },
            rg,
        ))
    }

    /// Mean negative log-likelihood of integer targets under row-wise softmax.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != targets.len() {
            return Err(dim_err(
                "cross_entropy",
                format!("logits {s:?}, {} targets", targets.len()),
            ));
        }
        let cols = s[1];
        if let Some(&bad) = targets.iter().find(|&&t| t >= cols) {
            return Err(crate::error::HqaError::Range {
                index: bad,
                size: cols,
            });
        }
        let logp = kernels::log_softmax_rows(self.value(logits).data(), cols);
        let nll: T = targets
            .iter()
            .enumerate()
            .map(|(r, &t)| -logp[r * cols + t])
            .sum::<T>()
            / T::c(targets.len().max(1) as f64);
        let probs = logp.iter().map(|v| v.exp()).collect();
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(nll),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Mean of squared differences over all elements.
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        let diff = self.binary(pred, target, "mse", |x, y| x - y)?;
        let n = T::c(diff.len().max(1) as f64);
        let v = T::c(diff.iter().map(|&d| (d * d).f64()).sum::<f64>()) / n;
        let rg = self.rg(&[pred, target]);
        Ok(self.push(Tensor::scalar(v), Op::Mse(pred, target), rg))
    }

    /// Relaxed categorical sample `softmax((logits + g)/τ)` with Gumbel noise
    /// `g`, differentiable with respect to `logits`.
    pub fn gumbel_softmax<R: Rng>(&mut self, logits: Var, tau: f64, rng: &mut R) -> Result<Var> {
        if !(tau > 0.0) {
            return Err(arg_err(
                "gumbel_softmax_sample",
                format!("temperature must be > 0, got {tau}"),
            ));
        }
        let noise = gumbel_noise::<T, R>(self.value(logits).len(), rng);
        let g = self.constant(Tensor::new(self.shape(logits).to_vec(), noise)?);
        let perturbed = self.add(logits, g)?;
        let scaled = self.scale(perturbed, T::c(1.0 / tau));
        Ok(self.softmax(scaled))
    }

    /// Accumulates d`loss`/dθ into every reachable parameter that requires
    /// gradient. Unreached parameters are left untouched (zero after
    /// `zero_grad`). May be called repeatedly; gradients add up.
    pub fn backward(&self, loss: Var, store: &mut ParamStore<T>) -> Result<()> {
        self.backward_many(loss, &mut [store])
    }

    /// [`Tape::backward`] for a graph built from several stores; one reverse
    /// sweep serves all of them.
    pub fn backward_many(&self, loss: Var, stores: &mut [&mut ParamStore<T>]) -> Result<()> {
        let grads = self.gradients(loss)?;
        for (i, node) in self.nodes.iter().enumerate() {
            let (Some((uid, id)), Some(g)) = (node.param, &grads[i]) else {
                continue;
            };
            if let Some(store) = stores.iter_mut().find(|s| s.uid() == uid) {
                if store.get(id).requires_grad {
                    store.get_mut(id).tensor.accumulate_grad(g);
                }
            }
        }
        Ok(())
    }

    /// Gradient of a scalar node with respect to a single leaf, for tests and
    /// gradient checks on non-parameter inputs.
    pub fn grad_of(&self, loss: Var, wrt: Var) -> Result<Vec<T>> {
        let mut grads = self.gradients(loss)?;
        Ok(grads[wrt.0]
            .take()
            .unwrap_or_else(|| vec![T::zero(); self.nodes[wrt.0].value.len()]))
    }

    fn gradients(&self, loss: Var) -> Result<Vec<Option<Vec<T>>>> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(arg_err(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.shape(loss)),
            ));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if self.nodes[i].requires_grad {
                self.propagate(i, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        Ok(grads)
    }

    fn slot<'a>(&self, grads: &'a mut [Option<Vec<T>>], v: Var) -> Option<&'a mut [T]> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let n = self.nodes[v.0].value.len();
        Some(
            grads[v.0]
                .get_or_insert_with(|| vec![T::zero(); n])
                .as_mut_slice(),
        )
    }

    fn propagate(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, dims } => {
                let xv = self.value(*x).data();
                let wv = self.value(*w).data();
                let mut gx = self.slot(grads, *x).map(|s| s.to_vec());
                let mut gw = self.slot(grads, *w).map(|s| s.to_vec());
                let mut gb = b.and_then(|b| self.slot(grads, b).map(|s| s.to_vec()));
                kernels::conv2d_backward(
                    xv,
                    wv,
                    g,
                    dims,
                    gx.as_deref_mut(),
                    gw.as_deref_mut(),
                    gb.as_deref_mut(),
                );
                if let Some(v) = gx {
                    grads[x.0] = Some(v);
                }
                if let Some(v) = gw {
                    grads[w.0] = Some(v);
                }
                if let (Some(v), Some(b)) = (gb, b) {
                    grads[b.0] = Some(v);
                }
            }
            Op::Upsample { x, factor } => {
                let shape = self.shape(*x).to_vec();
                if let Some(gx) = self.slot(grads, *x) {
                    kernels::upsample_backward(g, &shape, *factor, gx);
                }
            }
            Op::Act { x, kind } => {
                let kind = *kind;
                let xv = self.value(*x).data().to_vec();
                if let Some(gx) = self.slot(grads, *x) {
                    for j in 0..gx.len() {
                        gx[j] += match kind {
                            Activation::Relu => {
                                if xv[j] > T::zero() {
                                    g[j]
                                } else {
                                    T::zero()
                                }
                            }
                            Activation::Sigmoid => g[j] * out[j] * (T::one() - out[j]),
                            Activation::Identity => g[j],
                        };
                    }
                }
            }
            Op::Normalize {
                x,
                inv_std,
                batch_stats,
            } => {
                let shape = self.shape(*x).to_vec();
                let (b, c) = (shape[0], shape[1]);
                let inner: usize = shape[2..].iter().product();
                let m = T::c((b * inner) as f64);
                if let Some(gx) = self.slot(grads, *x) {
                    if !batch_stats {
                        // Stored statistics: a fixed per-channel affine map.
                        for bi in 0..b {
                            for ch in 0..c {
                                let off = (bi * c + ch) * inner;
                                for j in off..off + inner {
                                    gx[j] += g[j] * inv_std[ch];
                                }
                            }
                        }
                        return;
                    }
                    for ch in 0..c {
                        let mut sg = T::zero();
                        let mut sgy = T::zero();
                        for bi in 0..b {
                            let off = (bi * c + ch) * inner;
                            for j in off..off + inner {
                                sg += g[j];
                                sgy += g[j] * out[j];
                            }
                        }
                        for bi in 0..b {
                            let off = (bi * c + ch) * inner;
                            for j in off..off + inner {
                                gx[j] += inv_std[ch] / m * (m * g[j] - sg - out[j] * sgy);
                            }
                        }
                    }
                }
            }
            Op::Dropout { x, mask } => {
                if let Some(gx) = self.slot(grads, *x) {
                    gx.iter_mut()
                        .zip(g.iter().zip(mask))
                        .for_each(|(a, (&gg, &m))| *a += gg * m);
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(gv) = self.slot(grads, v) {
                        gv.iter_mut().zip(g).for_each(|(x, &y)| *x += y);
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = self.slot(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, &y)| *x += y);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    gb.iter_mut().zip(g).for_each(|(x, &y)| *x -= y);
                }
            }
            Op::Mul(a, b) => {
                let av = self.value(*a).data().to_vec();
                let bv = self.value(*b).data().to_vec();
                if let Some(ga) = self.slot(grads, *a) {
                    for j in 0..ga.len() {
                        ga[j] += g[j] * bv[j];
                    }
                }
                if let Some(gb) = self.slot(grads, *b) {
                    for j in 0..gb.len() {
                        gb[j] += g[j] * av[j];
                    }
                }
            }
            Op::Scale(x, c) => {
                let c = *c;
                if let Some(gx) = self.slot(grads, *x) {
                    gx.iter_mut().zip(g).for_each(|(a, &b)| *a += b * c);
                }
            }
            Op::Sum(x) => {
                if let Some(gx) = self.slot(grads, *x) {
                    gx.iter_mut().for_each(|a| *a += g[0]);
                }
            }
            Op::Matmul { a, b, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                if self.nodes[a.0].requires_grad {
                    let mut ga = vec![T::zero(); m * k];
                    T::gemm(m, n, k, T::one(), g, false, bv, true, T::zero(), &mut ga);
                    add_into(self.slot(grads, *a), &ga);
                }
                if self.nodes[b.0].requires_grad {
                    let mut gb = vec![T::zero(); k * n];
                    T::gemm(k, m, n, T::one(), av, true, g, false, T::zero(), &mut gb);
                    add_into(self.slot(grads, *b), &gb);
                }
            }
            Op::AddRowBias { x, b } => {
                if let Some(gx) = self.slot(grads, *x) {
                    gx.iter_mut().zip(g).for_each(|(a, &b)| *a += b);
                }
                let cols = self.shape(*b)[0];
                if let Some(gb) = self.slot(grads, *b) {
                    for row in g.chunks_exact(cols) {
                        gb.iter_mut().zip(row).for_each(|(a, &r)| *a += r);
                    }
                }
            }
            Op::NegHalfSqDist { z, e } => {
                // L = −½‖z_p − e_n‖²:  ∂/∂z_p = Σ_n g_pn (e_n − z_p),  ∂/∂e_n = Σ_p g_pn (z_p − e_n).
                let (p, d) = (self.shape(*z)[0], self.shape(*z)[1]);
                let n = self.shape(*e)[0];
                let zv = self.value(*z).data();
                let ev = self.value(*e).data();
                if self.nodes[z.0].requires_grad {
                    let mut gz = vec![T::zero(); p * d];
                    T::gemm(p, n, d, T::one(), g, false, ev, false, T::zero(), &mut gz);
                    for r in 0..p {
                        let s: T = g[r * n..(r + 1) * n].iter().copied().sum();
                        for c in 0..d {
                            gz[r * d + c] -= s * zv[r * d + c];
                        }
                    }
                    add_into(self.slot(grads, *z), &gz);
                }
                if self.nodes[e.0].requires_grad {
                    let mut ge = vec![T::zero(); n * d];
                    T::gemm(n, p, d, T::one(), g, true, zv, false, T::zero(), &mut ge);
                    let mut colsum = vec![T::zero(); n];
                    for row in g.chunks_exact(n) {
                        colsum.iter_mut().zip(row).for_each(|(a, &b)| *a += b);
                    }
                    for k in 0..n {
                        for c in 0..d {
                            ge[k * d + c] -= colsum[k] * ev[k * d + c];
                        }
                    }
                    add_into(self.slot(grads, *e), &ge);
                }
            }
            Op::Softmax(x) => {
                let cols = self.last_dim(*x);
                if let Some(gx) = self.slot(grads, *x) {
                    for ((gr, yr), gxr) in g
                        .chunks_exact(cols)
                        .zip(out.chunks_exact(cols))
                        .zip(gx.chunks_exact_mut(cols))
                    {
                        let dot: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                        for j in 0..cols {
                            gxr[j] += yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::LogSoftmax(x) => {
                let cols = self.last_dim(*x);
                if let Some(gx) = self.slot(grads, *x) {
                    for ((gr, yr), gxr) in g
                        .chunks_exact(cols)
                        .zip(out.chunks_exact(cols))
                        .zip(gx.chunks_exact_mut(cols))
                    {
                        let s: T = gr.iter().copied().sum();
                        for j in 0..cols {
                            gxr[j] += gr[j] - yr[j].exp() * s;
                        }
                    }
                }
            }
            Op::ToRows(x) => {
                let shape = self.shape(*x).to_vec();
                let back = kernels::rows_to_nchw(g, &shape);
                add_into(self.slot(grads, *x), &back);
            }
            Op::FromRows(x) => {
                let back = kernels::nchw_to_rows(g, node.value.shape());
                add_into(self.slot(grads, *x), &back);
            }
            Op::Reshape(x) => add_into(self.slot(grads, *x), g),
            Op::GatherRows { table, idx } => {
                let d = self.shape(*table)[1];
                if let Some(gt) = self.slot(grads, *table) {
                    for (r, &k) in idx.iter().enumerate() {
                        for c in 0..d {
                            gt[k * d + c] += g[r * d + c];
                        }
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let cols = self.last_dim(*logits);
                let scale = g[0] / T::c(targets.len().max(1) as f64);
                if let Some(gl) = self.slot(grads, *logits) {
                    for (r, &t) in targets.iter().enumerate() {
                        for j in 0..cols {
                            let onehot = if j == t { T::one() } else { T::zero() };
                            gl[r * cols + j] += scale * (probs[r * cols + j] - onehot);
                        }
                    }
                }
            }
            Op::Mse(a, b) => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                let c = T::c(2.0) * g[0] / T::c(av.len().max(1) as f64);
                let diff: Vec<T> = av.iter().zip(bv).map(|(&x, &y)| c * (x - y)).collect();
                if let Some(ga) = self.slot(grads, *a) {
                    ga.iter_mut().zip(&diff).for_each(|(x, &y)| *x += y);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    gb.iter_mut().zip(&diff).for_each(|(x, &y)| *x -= y);
                }
            }
        }
    }
}

fn add_into<T: Real>(dst: Option<&mut [T]>, src: &[T]) {
    if let Some(d) = dst {
        d.iter_mut().zip(src).for_each(|(a, &b)| *a += b);
    }
}

pub fn gumbel_noise<T: Real, R: Rng>(n: usize, rng: &mut R) -> Vec<T> {
    // −log u with u ∈ (ε, 1−ε) is an Exp(1) draw truncated to these bounds.
    let lo = -(1.0 - GUMBEL_EPS).ln();
    let hi = -GUMBEL_EPS.ln();
    (0..n)
        .map(|_| {
            let e: f64 = rand_distr::Exp1.sample(rng);
            -T::c(e.clamp(lo, hi)).ln()
        })
        .collect()
}

/// Draws one relaxed categorical sample per row of `logits` (last axis = N).
pub fn gumbel_softmax_sample<T: Real, R: Rng>(
    logits: &Tensor<T>,
    tau: f64,
    rng: &mut R,
) -> Result<Tensor<T>> {
    if !(tau > 0.0) {
        return Err(arg_err(
            "gumbel_softmax_sample",
            format!("temperature must be > 0, got {tau}"),
        ));
    }
    let cols = *logits.shape().last().unwrap_or(&1);
    let noise = gumbel_noise::<T, R>(logits.len(), rng);
    let inv = T::c(1.0 / tau);
    let perturbed: Vec<T> = logits
        .data()
        .iter()
        .zip(&noise)
        .map(|(&l, &g)| (l + g) * inv)
        .collect();
    Tensor::new(
        logits.shape().to_vec(),
        kernels::softmax_rows(&perturbed, cols),
    )
}
