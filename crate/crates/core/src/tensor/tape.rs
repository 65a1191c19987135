use std::collections::HashMap;

use super::{Nctv, ParamId, ParamStore, Real, Tensor};
use crate::error::{NasError, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var },
    BatchedMatMul { a: Var, b: Var },
    Add { a: Var, b: Var },
    Scale { x: Var, c: T },
    Relu { x: Var },
    Softmax { x: Var },
    Conv { x: Var, w: Var, stride: usize },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, inv_std: Vec<T>, training: bool },
    Propagate { adj: Var, x: Var },
    Correlate { phi: Var, psi: Var, scale: T },
    Combine { terms: Vec<(Var, T)> },
    AvgPool { x: Var },
    GroupMean { x: Var, groups: usize },
    Linear { x: Var, w: Var, b: Var },
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<T> },
    WeightedSum { x: Var, weights: Tensor<T> },
}

struct Node<T> {
    op: Op<T>,
    value: Tensor<T>,
    requires_grad: bool,
}

/// Batch statistics produced by a training-mode batch normalization, kept so
/// the owner can update its running estimates after the forward pass.
#[derive(Clone, Debug)]
pub struct BatchNormStats<T> {
    pub mean: Vec<T>,
    /// Biased (population) variance of the batch.
    pub var: Vec<T>,
    pub count: usize,
}

/// Records operations for one forward pass and replays them backwards.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    params: HashMap<ParamId, Var>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), params: HashMap::new() }
    }

    fn push(&mut self, op: Op<T>, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { op, value, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A value that takes no gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(Op::Leaf, t, false)
    }

    /// A free input that takes a gradient (used by gradient checks).
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(Op::Leaf, t, true)
    }

    /// Leaf for a stored parameter. Repeated calls within one tape return
    /// the same leaf so gradients accumulate in one place.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(Op::Leaf, store.value(id).clone(), true);
        self.params.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k, n) = match (av.shape(), bv.shape()) {
            (&[m, k], &[k2, n]) if k == k2 => (m, k, n),
            (sa, sb) => return Err(NasError::structural(format!("matmul of {sa:?} and {sb:?}"))),
        };
        let mut out = vec![T::zero(); m * n];
        gemm_nn(av.data(), bv.data(), &mut out, m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::MatMul { a, b }, Tensor::new(&[m, n], out)?, rg))
    }

    pub fn batched_matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (batch, m, k, n) = match (av.shape(), bv.shape()) {
            (&[b1, m, k], &[b2, k2, n]) if b1 == b2 && k == k2 => (b1, m, k, n),
            (sa, sb) => return Err(NasError::structural(format!("batched matmul of {sa:?} and {sb:?}"))),
        };
        let mut out = vec![T::zero(); batch * m * n];
        for i in 0..batch {
            gemm_nn(
                &av.data()[i * m * k..(i + 1) * m * k],
                &bv.data()[i * k * n..(i + 1) * k * n],
                &mut out[i * m * n..(i + 1) * m * n],
                m,
                k,
                n,
            );
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::BatchedMatMul { a, b }, Tensor::new(&[batch, m, n], out)?, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(NasError::structural(format!("add of {:?} and {:?}", av.shape(), bv.shape())));
        }
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| x + y).collect();
        let value = Tensor::new(av.shape(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::Add { a, b }, value, rg))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let value = self.value(x).map(|v| v * c);
        let rg = self.rg(x);
        self.push(Op::Scale { x, c }, value, rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        let rg = self.rg(x);
        self.push(Op::Relu { x }, value, rg)
    }

    /// Softmax over the last axis, stabilized by subtracting the row max.
    pub fn softmax_lastdim(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let width = *xv.shape().last().ok_or_else(|| NasError::structural("softmax of a scalar"))?;
        let mut out = xv.data().to_vec();
        if width > 0 {
            out.chunks_mut(width).for_each(softmax_row);
        }
        let value = Tensor::new(xv.shape(), out)?;
        let rg = self.rg(x);
        Ok(self.push(Op::Softmax { x }, value, rg))
    }

    /// Convolution along frames with a `C_out × C_in × K × 1` kernel, zero
    /// padding `(K-1)/2` on both ends and the given stride. Output length is
    /// `ceil(T / stride)`; the joint axis is untouched. `K = 1` gives the
    /// pointwise (channel-mixing) convolution.
    pub fn conv_temporal(&mut self, x: Var, w: Var, stride: usize) -> Result<Var> {
        let xs = Nctv::of(self.value(x))?;
        let (co, ci, k) = match *self.value(w).shape() {
            [co, ci, k, 1] => (co, ci, k),
            ref s => return Err(NasError::structural(format!("conv kernel must be C_out×C_in×K×1, got {s:?}"))),
        };
        if ci != xs.c {
            return Err(NasError::structural(format!("kernel expects {ci} input channels, input has {}", xs.c)));
        }
        if k % 2 == 0 {
            return Err(NasError::argument(format!("temporal kernel size must be odd, got {k}")));
        }
        if stride == 0 {
            return Err(NasError::argument("stride must be positive"));
        }
        let geo = ConvGeometry { n: xs.n, ci, co, t: xs.t, t_out: xs.t.div_ceil(stride), v: xs.v, k, stride };
        let mut out = vec![T::zero(); geo.n * co * geo.t_out * geo.v];
        conv_forward(&geo, self.value(x).data(), self.value(w).data(), &mut out);
        let value = Tensor::new(&[geo.n, co, geo.t_out, geo.v], out)?;
        let rg = self.rg(x) || self.rg(w);
        Ok(self.push(Op::Conv { x, w, stride }, value, rg))
    }

    pub fn conv_pointwise(&mut self, x: Var, w: Var) -> Result<Var> {
        match *self.value(w).shape() {
            [_, _, 1, 1] => self.conv_temporal(x, w, 1),
            ref s => Err(NasError::structural(format!("pointwise kernel must be C_out×C_in×1×1, got {s:?}"))),
        }
    }

    /// Per-channel normalization over `N × T × V`, using batch statistics.
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<(Var, BatchNormStats<T>)> {
        let s = Nctv::of(self.value(x))?;
        self.check_affine(gamma, beta, s.c)?;
        let plane = s.t * s.v;
        let count = s.n * plane;
        let xd = self.value(x).data();
        let mut mean = vec![T::zero(); s.c];
        let mut var = vec![T::zero(); s.c];
        let cnt = T::of(count as f64);
        for c in 0..s.c {
            let mut acc = T::zero();
            for n in 0..s.n {
                let off = (n * s.c + c) * plane;
                acc += xd[off..off + plane].iter().copied().sum::<T>();
            }
            let mu = acc / cnt;
            let mut sq = T::zero();
            for n in 0..s.n {
                let off = (n * s.c + c) * plane;
                sq += xd[off..off + plane].iter().map(|&v| (v - mu) * (v - mu)).sum::<T>();
            }
            mean[c] = mu;
            var[c] = sq / cnt;
        }
        let inv_std: Vec<T> = var.iter().map(|&v| (v + eps).sqrt().recip()).collect();
        let (value, xhat) = self.normalize(x, gamma, beta, &mean, &inv_std, s);
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let v = self.push(Op::BatchNorm { x, gamma, beta, xhat, inv_std, training: true }, value, rg);
        Ok((v, BatchNormStats { mean, var, count }))
    }

    /// Normalization with fixed (running) statistics.
    pub fn batch_norm_eval(&mut self, x: Var, gamma: Var, beta: Var, mean: &[T], var: &[T], eps: T) -> Result<Var> {
        let s = Nctv::of(self.value(x))?;
        self.check_affine(gamma, beta, s.c)?;
        if mean.len() != s.c || var.len() != s.c {
            return Err(NasError::structural("running statistics do not match the channel count"));
        }
        let inv_std: Vec<T> = var.iter().map(|&v| (v + eps).sqrt().recip()).collect();
        let (value, xhat) = self.normalize(x, gamma, beta, mean, &inv_std, s);
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(Op::BatchNorm { x, gamma, beta, xhat, inv_std, training: false }, value, rg))
    }

    fn check_affine(&self, gamma: Var, beta: Var, c: usize) -> Result<()> {
        if self.value(gamma).shape() != [c] || self.value(beta).shape() != [c] {
            return Err(NasError::structural(format!("batch norm affine parameters must have shape [{c}]")));
        }
        Ok(())
    }

    fn normalize(&self, x: Var, gamma: Var, beta: Var, mean: &[T], inv_std: &[T], s: Nctv) -> (Tensor<T>, Vec<T>) {
        let plane = s.t * s.v;
        let xd = self.value(x).data();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![T::zero(); xd.len()];
        let mut out = vec![T::zero(); xd.len()];
        for n in 0..s.n {
            for c in 0..s.c {
                let off = (n * s.c + c) * plane;
                for i in off..off + plane {
                    let h = (xd[i] - mean[c]) * inv_std[c];
                    xhat[i] = h;
                    out[i] = h * g[c] + b[c];
                }
            }
        }
        (Tensor::new(self.value(x).shape(), out).expect("same shape"), xhat)
    }

    /// Graph propagation `y[n,c,t,i] = Σ_j A[i,j] x[n,c,t,j]`. `adj` is either
    /// one shared `V × V` matrix or a per-sample `N × V × V` stack.
    pub fn propagate(&mut self, adj: Var, x: Var) -> Result<Var> {
        let s = Nctv::of(self.value(x))?;
        let per_sample = self.adjacency_layout(adj, s)?;
        let mut out = vec![T::zero(); self.value(x).len()];
        let (a, xd) = (self.value(adj).data(), self.value(x).data());
        let vv = s.v * s.v;
        for n in 0..s.n {
            let an = if per_sample { &a[n * vv..(n + 1) * vv] } else { a };
            let base = n * s.c * s.t * s.v;
            for row in 0..s.c * s.t {
                let off = base + row * s.v;
                let xr = &xd[off..off + s.v];
                let yr = &mut out[off..off + s.v];
                for (i, y) in yr.iter_mut().enumerate() {
                    let ai = &an[i * s.v..(i + 1) * s.v];
                    *y = ai.iter().zip(xr).map(|(&p, &q)| p * q).sum();
                }
            }
        }
        let value = Tensor::new(self.value(x).shape(), out)?;
        let rg = self.rg(adj) || self.rg(x);
        Ok(self.push(Op::Propagate { adj, x }, value, rg))
    }

    fn adjacency_layout(&self, adj: Var, s: Nctv) -> Result<bool> {
        match *self.value(adj).shape() {
            [a, b] if a == s.v && b == s.v => Ok(false),
            [n, a, b] if n == s.n && a == s.v && b == s.v => Ok(true),
            ref sh => Err(NasError::structural(format!(
                "adjacency shape {sh:?} incompatible with {} samples of {} joints",
                s.n, s.v
            ))),
        }
    }

    /// Pairwise joint scores `s[n,i,j] = scale · Σ_{c,t} φ[n,c,t,i] ψ[n,c,t,j]`.
    /// Only identical (channel, frame) coordinates interact.
    pub fn correlate(&mut self, phi: Var, psi: Var, scale: T) -> Result<Var> {
        let s = Nctv::of(self.value(phi))?;
        if self.value(psi).shape() != self.value(phi).shape() {
            return Err(NasError::structural("correlation embeddings must have identical shapes"));
        }
        let (p, q) = (self.value(phi).data(), self.value(psi).data());
        let vv = s.v * s.v;
        let mut out = vec![T::zero(); s.n * vv];
        for n in 0..s.n {
            let o = &mut out[n * vv..(n + 1) * vv];
            let base = n * s.c * s.t * s.v;
            for row in 0..s.c * s.t {
                let off = base + row * s.v;
                let (pr, qr) = (&p[off..off + s.v], &q[off..off + s.v]);
                for i in 0..s.v {
                    let pi = pr[i];
                    for (oj, &qj) in o[i * s.v..(i + 1) * s.v].iter_mut().zip(qr) {
                        *oj += pi * qj;
                    }
                }
            }
            o.iter_mut().for_each(|x| *x *= scale);
        }
        let value = Tensor::new(&[s.n, s.v, s.v], out)?;
        let rg = self.rg(phi) || self.rg(psi);
        Ok(self.push(Op::Correlate { phi, psi, scale }, value, rg))
    }

    /// `Σ_k w_k A_k` over adjacency terms, each `V × V` (shared) or
    /// `n × V × V`; the result is always `n × V × V`. Terms are added in
    /// the given order.
    pub fn combine_adjacency(&mut self, terms: &[(Var, T)], n: usize) -> Result<Var> {
        let first = terms.first().ok_or_else(|| NasError::argument("no adjacency terms to combine"))?;
        let v = *self.value(first.0).shape().last().unwrap_or(&0);
        let vv = v * v;
        let mut out = vec![T::zero(); n * vv];
        let mut started = false;
        for &(t, w) in terms {
            let tv = self.value(t);
            let per_sample = match *tv.shape() {
                [a, b] if a == v && b == v => false,
                [m, a, b] if m == n && a == v && b == v => true,
                ref sh => return Err(NasError::structural(format!("adjacency term of shape {sh:?}"))),
            };
            for s in 0..n {
                let src = if per_sample { &tv.data()[s * vv..(s + 1) * vv] } else { tv.data() };
                let dst = &mut out[s * vv..(s + 1) * vv];
                if started {
                    dst.iter_mut().zip(src).for_each(|(d, &a)| *d += w * a);
                } else {
                    dst.iter_mut().zip(src).for_each(|(d, &a)| *d = w * a);
                }
            }
            started = true;
        }
        let value = Tensor::new(&[n, v, v], out)?;
        let rg = terms.iter().any(|&(t, _)| self.rg(t));
        Ok(self.push(Op::Combine { terms: terms.to_vec() }, value, rg))
    }

    /// Mean over frames and joints: `N × C × T × V → N × C`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let s = Nctv::of(self.value(x))?;
        let plane = s.t * s.v;
        let inv = T::of(1.0 / plane as f64);
        let out = self.value(x).data().chunks(plane).map(|ch| ch.iter().copied().sum::<T>() * inv).collect();
        let value = Tensor::new(&[s.n, s.c], out)?;
        let rg = self.rg(x);
        Ok(self.push(Op::AvgPool { x }, value, rg))
    }

    /// Averages consecutive groups of rows: `(N·G) × C → N × C`.
    pub fn group_mean(&mut self, x: Var, groups: usize) -> Result<Var> {
        let (rows, c) = match *self.value(x).shape() {
            [r, c] => (r, c),
            ref s => return Err(NasError::structural(format!("group_mean expects a matrix, got {s:?}"))),
        };
        if groups == 0 || rows % groups != 0 {
            return Err(NasError::structural(format!("{rows} rows cannot be split into groups of {groups}")));
        }
        let n = rows / groups;
        let inv = T::of(1.0 / groups as f64);
        let xd = self.value(x).data();
        let mut out = vec![T::zero(); n * c];
        for i in 0..n {
            for g in 0..groups {
                let src = &xd[(i * groups + g) * c..(i * groups + g + 1) * c];
                out[i * c..(i + 1) * c].iter_mut().zip(src).for_each(|(o, &s)| *o += s);
            }
            out[i * c..(i + 1) * c].iter_mut().for_each(|o| *o *= inv);
        }
        let value = Tensor::new(&[n, c], out)?;
        let rg = self.rg(x);
        Ok(self.push(Op::GroupMean { x, groups }, value, rg))
    }

    /// `y = x Wᵀ + b` with `W: out × in`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (n, cin) = match *self.value(x).shape() {
            [n, c] => (n, c),
            ref s => return Err(NasError::structural(format!("linear expects a matrix input, got {s:?}"))),
        };
        let cout = match *self.value(w).shape() {
            [o, i] if i == cin => o,
            ref s => return Err(NasError::structural(format!("linear weight {s:?} for {cin} inputs"))),
        };
        if self.value(b).shape() != [cout] {
            return Err(NasError::structural("linear bias shape"));
        }
        let (xd, wd, bd) = (self.value(x).data(), self.value(w).data(), self.value(b).data());
        let mut out = vec![T::zero(); n * cout];
        for i in 0..n {
            let xr = &xd[i * cin..(i + 1) * cin];
            for o in 0..cout {
                let wr = &wd[o * cin..(o + 1) * cin];
                out[i * cout + o] = bd[o] + xr.iter().zip(wr).map(|(&a, &b)| a * b).sum::<T>();
            }
        }
        let value = Tensor::new(&[n, cout], out)?;
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(Op::Linear { x, w, b }, value, rg))
    }

    /// Mean negative log-likelihood of integer labels under softmax(logits).
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (n, k) = match *self.value(logits).shape() {
            [n, k] => (n, k),
            ref s => return Err(NasError::structural(format!("logits must be N×classes, got {s:?}"))),
        };
        if labels.len() != n {
            return Err(NasError::structural(format!("{} labels for {n} rows", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(NasError::argument(format!("label {bad} out of range for {k} classes")));
        }
        let mut probs = self.value(logits).data().to_vec();
        probs.chunks_mut(k).for_each(softmax_row);
        let nll: T = labels.iter().enumerate().map(|(i, &l)| -probs[i * k + l].ln()).sum();
        let value = Tensor::scalar(nll / T::of(n as f64));
        let rg = self.rg(logits);
        Ok(self.push(Op::CrossEntropy { logits, labels: labels.to_vec(), probs }, value, rg))
    }

    /// `Σ x ⊙ weights` as a scalar; turns any tensor into a loss for checks.
    pub fn weighted_sum(&mut self, x: Var, weights: Tensor<T>) -> Result<Var> {
        if self.value(x).shape() != weights.shape() {
            return Err(NasError::structural("weighted_sum weight shape"));
        }
        let s = self.value(x).data().iter().zip(weights.data()).map(|(&a, &b)| a * b).sum();
        let rg = self.rg(x);
        Ok(self.push(Op::WeightedSum { x, weights }, Tensor::scalar(s), rg))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(NasError::structural("backward needs a scalar loss"));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), T::one()));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(gy) = grads[idx].take() else { continue };
            self.backprop_node(node, &gy, &mut grads);
            grads[idx] = Some(gy);
        }
        let params = self.params.iter().map(|(&id, &v)| (id, v)).collect();
        Ok(Gradients { grads, params })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn backprop_node(&self, node: &Node<T>, gy: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let g = gy.data();
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b } => {
                let (av, bv) = (self.value(a), self.value(b));
                let (m, k) = (av.shape()[0], av.shape()[1]);
                let n = bv.shape()[1];
                if self.rg(a) {
                    let mut da = vec![T::zero(); m * k];
                    gemm_nt(g, bv.data(), &mut da, m, n, k);
                    self.accumulate(grads, a, Tensor::new(av.shape(), da).unwrap());
                }
                if self.rg(b) {
                    let mut db = vec![T::zero(); k * n];
                    gemm_tn(av.data(), g, &mut db, k, m, n);
                    self.accumulate(grads, b, Tensor::new(bv.shape(), db).unwrap());
                }
            }
            &Op::BatchedMatMul { a, b } => {
                let (av, bv) = (self.value(a), self.value(b));
                let (batch, m, k) = (av.shape()[0], av.shape()[1], av.shape()[2]);
                let n = bv.shape()[2];
                let mut da = vec![T::zero(); batch * m * k];
                let mut db = vec![T::zero(); batch * k * n];
                for i in 0..batch {
                    let gi = &g[i * m * n..(i + 1) * m * n];
                    gemm_nt(gi, &bv.data()[i * k * n..(i + 1) * k * n], &mut da[i * m * k..(i + 1) * m * k], m, n, k);
                    gemm_tn(&av.data()[i * m * k..(i + 1) * m * k], gi, &mut db[i * k * n..(i + 1) * k * n], k, m, n);
                }
                self.accumulate(grads, a, Tensor::new(av.shape(), da).unwrap());
                self.accumulate(grads, b, Tensor::new(bv.shape(), db).unwrap());
            }
            &Op::Add { a, b } => {
                self.accumulate(grads, a, gy.clone());
                self.accumulate(grads, b, gy.clone());
            }
            &Op::Scale { x, c } => self.accumulate(grads, x, gy.map(|v| v * c)),
            &Op::Relu { x } => {
                let xv = self.value(x);
                let d = xv.data().iter().zip(g).map(|(&xi, &gi)| if xi > T::zero() { gi } else { T::zero() });
                self.accumulate(grads, x, Tensor::new(xv.shape(), d.collect()).unwrap());
            }
            &Op::Softmax { x } => {
                let y = node.value.data();
                let width = *node.value.shape().last().unwrap();
                let mut dx = vec![T::zero(); y.len()];
                for ((yr, gr), dr) in y.chunks(width).zip(g.chunks(width)).zip(dx.chunks_mut(width)) {
                    let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for ((d, &yi), &gi) in dr.iter_mut().zip(yr).zip(gr) {
                        *d = yi * (gi - dot);
                    }
                }
                self.accumulate(grads, x, Tensor::new(node.value.shape(), dx).unwrap());
            }
            &Op::Conv { x, w, stride } => {
                let xv = self.value(x);
                let wv = self.value(w);
                let xs = Nctv::of(xv).unwrap();
                let ws = wv.shape();
                let geo = ConvGeometry {
                    n: xs.n,
                    ci: ws[1],
                    co: ws[0],
                    t: xs.t,
                    t_out: node.value.shape()[2],
                    v: xs.v,
                    k: ws[2],
                    stride,
                };
                if self.rg(x) {
                    let mut dx = vec![T::zero(); xv.len()];
                    conv_backward_input(&geo, g, wv.data(), &mut dx);
                    self.accumulate(grads, x, Tensor::new(xv.shape(), dx).unwrap());
                }
                if self.rg(w) {
                    let mut dw = vec![T::zero(); wv.len()];
                    conv_backward_weight(&geo, g, xv.data(), &mut dw);
                    self.accumulate(grads, w, Tensor::new(ws, dw).unwrap());
                }
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, training } => {
                let s = Nctv::of(&node.value).unwrap();
                let plane = s.t * s.v;
                let gam = self.value(*gamma).data();
                let mut dgamma = vec![T::zero(); s.c];
                let mut dbeta = vec![T::zero(); s.c];
                for n in 0..s.n {
                    for c in 0..s.c {
                        let off = (n * s.c + c) * plane;
                        for i in off..off + plane {
                            dgamma[c] += g[i] * xhat[i];
                            dbeta[c] += g[i];
                        }
                    }
                }
                if self.rg(*x) {
                    let mut dx = vec![T::zero(); g.len()];
                    let m = T::of((s.n * plane) as f64);
                    for c in 0..s.c {
                        let k = gam[c] * inv_std[c];
                        if *training {
                            // dgamma/dbeta already hold Σ dy·x̂ and Σ dy
                            let (sum_g, sum_gx) = (dbeta[c], dgamma[c]);
                            for n in 0..s.n {
                                let off = (n * s.c + c) * plane;
                                for i in off..off + plane {
                                    dx[i] = k * (g[i] - (sum_g + xhat[i] * sum_gx) / m);
                                }
                            }
                        } else {
                            for n in 0..s.n {
                                let off = (n * s.c + c) * plane;
                                for i in off..off + plane {
                                    dx[i] = k * g[i];
                                }
                            }
                        }
                    }
                    self.accumulate(grads, *x, Tensor::new(node.value.shape(), dx).unwrap());
                }
                self.accumulate(grads, *gamma, Tensor::new(&[s.c], dgamma).unwrap());
                self.accumulate(grads, *beta, Tensor::new(&[s.c], dbeta).unwrap());
            }
            &Op::Propagate { adj, x } => {
                let s = Nctv::of(&node.value).unwrap();
                let av = self.value(adj);
                let per_sample = av.shape().len() == 3;
                let xd = self.value(x).data();
                let vv = s.v * s.v;
                let mut dx = vec![T::zero(); xd.len()];
                let mut da = vec![T::zero(); av.len()];
                for n in 0..s.n {
                    let aoff = if per_sample { n * vv } else { 0 };
                    let an = &av.data()[aoff..aoff + vv];
                    let base = n * s.c * s.t * s.v;
                    for row in 0..s.c * s.t {
                        let off = base + row * s.v;
                        let (gr, xr) = (&g[off..off + s.v], &xd[off..off + s.v]);
                        for i in 0..s.v {
                            let gi = gr[i];
                            let ai = &an[i * s.v..(i + 1) * s.v];
                            for j in 0..s.v {
                                dx[off + j] += ai[j] * gi;
                            }
                            let dai = &mut da[aoff + i * s.v..aoff + (i + 1) * s.v];
                            for (d, &xj) in dai.iter_mut().zip(xr) {
                                *d += gi * xj;
                            }
                        }
                    }
                }
                self.accumulate(grads, x, Tensor::new(self.value(x).shape(), dx).unwrap());
                self.accumulate(grads, adj, Tensor::new(av.shape(), da).unwrap());
            }
            &Op::Correlate { phi, psi, scale } => {
                let s = Nctv::of(self.value(phi)).unwrap();
                let (p, q) = (self.value(phi).data(), self.value(psi).data());
                let vv = s.v * s.v;
                let mut dp = vec![T::zero(); p.len()];
                let mut dq = vec![T::zero(); q.len()];
                for n in 0..s.n {
                    let gs: Vec<T> = g[n * vv..(n + 1) * vv].iter().map(|&x| x * scale).collect();
                    let base = n * s.c * s.t * s.v;
                    for row in 0..s.c * s.t {
                        let off = base + row * s.v;
                        for i in 0..s.v {
                            let gi = &gs[i * s.v..(i + 1) * s.v];
                            let pi = p[off + i];
                            let mut acc = T::zero();
                            for j in 0..s.v {
                                acc += gi[j] * q[off + j];
                                dq[off + j] += gi[j] * pi;
                            }
                            dp[off + i] += acc;
                        }
                    }
                }
                self.accumulate(grads, phi, Tensor::new(self.value(phi).shape(), dp).unwrap());
                self.accumulate(grads, psi, Tensor::new(self.value(psi).shape(), dq).unwrap());
            }
            Op::Combine { terms } => {
                let (n, v) = (node.value.shape()[0], node.value.shape()[1]);
                let vv = v * v;
                for &(t, w) in terms {
                    if !self.rg(t) {
                        continue;
                    }
                    let shape = self.value(t).shape();
                    let d = if shape.len() == 3 {
                        g.iter().map(|&x| x * w).collect()
                    } else {
                        let mut acc = vec![T::zero(); vv];
                        for s in 0..n {
                            acc.iter_mut().zip(&g[s * vv..(s + 1) * vv]).for_each(|(a, &x)| *a += x * w);
                        }
                        acc
                    };
                    self.accumulate(grads, t, Tensor::new(shape, d).unwrap());
                }
            }
            &Op::AvgPool { x } => {
                let xv = self.value(x);
                let s = Nctv::of(xv).unwrap();
                let plane = s.t * s.v;
                let inv = T::of(1.0 / plane as f64);
                let mut dx = vec![T::zero(); xv.len()];
                for (chunk, &gv) in dx.chunks_mut(plane).zip(g) {
                    chunk.iter_mut().for_each(|d| *d = gv * inv);
                }
                self.accumulate(grads, x, Tensor::new(xv.shape(), dx).unwrap());
            }
            &Op::GroupMean { x, groups } => {
                let xv = self.value(x);
                let c = xv.shape()[1];
                let inv = T::of(1.0 / groups as f64);
                let mut dx = vec![T::zero(); xv.len()];
                for (r, row) in dx.chunks_mut(c).enumerate() {
                    let i = r / groups;
                    row.iter_mut().zip(&g[i * c..(i + 1) * c]).for_each(|(d, &gv)| *d = gv * inv);
                }
                self.accumulate(grads, x, Tensor::new(xv.shape(), dx).unwrap());
            }
            &Op::Linear { x, w, b } => {
                let (xv, wv) = (self.value(x), self.value(w));
                let (n, cin) = (xv.shape()[0], xv.shape()[1]);
                let cout = wv.shape()[0];
                let mut dx = vec![T::zero(); n * cin];
                let mut dw = vec![T::zero(); cout * cin];
                let mut db = vec![T::zero(); cout];
                for i in 0..n {
                    let xr = &xv.data()[i * cin..(i + 1) * cin];
                    for o in 0..cout {
                        let go = g[i * cout + o];
                        db[o] += go;
                        let wr = &wv.data()[o * cin..(o + 1) * cin];
                        for j in 0..cin {
                            dx[i * cin + j] += go * wr[j];
                            dw[o * cin + j] += go * xr[j];
                        }
                    }
                }
                self.accumulate(grads, x, Tensor::new(xv.shape(), dx).unwrap());
                self.accumulate(grads, w, Tensor::new(wv.shape(), dw).unwrap());
                self.accumulate(grads, b, Tensor::new(&[cout], db).unwrap());
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let lv = self.value(*logits);
                let k = lv.shape()[1];
                let scale = g[0] / T::of(labels.len() as f64);
                let mut d = probs.clone();
                for (i, &l) in labels.iter().enumerate() {
                    d[i * k + l] -= T::one();
                }
                d.iter_mut().for_each(|x| *x *= scale);
                self.accumulate(grads, *logits, Tensor::new(lv.shape(), d).unwrap());
            }
            Op::WeightedSum { x, weights } => {
                let gv = g[0];
                self.accumulate(grads, *x, weights.map(|w| w * gv));
            }
        }
    }
}

/// Result of [`Tape::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    params: Vec<(ParamId, Var)>,
}

impl<T: Real> Gradients<T> {
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads[v.0].as_ref()
    }

    /// Adds each parameter's gradient into `store` (creating buffers as needed).
    pub fn accumulate_into(&self, store: &mut ParamStore<T>) {
        for &(id, v) in &self.params {
            if let Some(g) = &self.grads[v.0] {
                let p = store.get_mut(id);
                match &mut p.grad {
                    Some(existing) => existing.add_assign(g),
                    slot @ None => *slot = Some(g.clone()),
                }
            }
        }
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.params.iter().find(|(p, _)| *p == id).and_then(|&(_, v)| self.wrt(v))
    }
}

fn softmax_row<T: Real>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    row.iter_mut().for_each(|x| *x /= sum);
}

// out[m×n] += a[m×k] · b[k×n]
fn gemm_nn<T: Real>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            orow.iter_mut().zip(&b[p * n..(p + 1) * n]).for_each(|(o, &bv)| *o += aip * bv);
        }
    }
}

// out[m×k] += g[m×n] · b[k×n]ᵀ
fn gemm_nt<T: Real>(g: &[T], b: &[T], out: &mut [T], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let gr = &g[i * n..(i + 1) * n];
        for p in 0..k {
            out[i * k + p] += gr.iter().zip(&b[p * n..(p + 1) * n]).map(|(&x, &y)| x * y).sum::<T>();
        }
    }
}

// out[k×n] += a[m×k]ᵀ · g[m×n]
fn gemm_tn<T: Real>(a: &[T], g: &[T], out: &mut [T], k: usize, m: usize, n: usize) {
    for i in 0..m {
        let gr = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            out[p * n..(p + 1) * n].iter_mut().zip(gr).for_each(|(o, &gv)| *o += aip * gv);
        }
    }
}

struct ConvGeometry {
    n: usize,
    ci: usize,
    co: usize,
    t: usize,
    t_out: usize,
    v: usize,
    k: usize,
    stride: usize,
}

impl ConvGeometry {
    /// Output frames `[lo, hi)` whose input frame `t_out·stride + offset`
    /// falls inside the sequence.
    fn valid_range(&self, offset: isize) -> (usize, usize) {
        let s = self.stride as isize;
        let lo = if offset < 0 { ((-offset) + s - 1) / s } else { 0 };
        // largest t_out with t_out*s + offset <= t-1
        let last = self.t as isize - 1 - offset;
        let hi = if last < 0 { 0 } else { (last / s + 1).min(self.t_out as isize) };
        (lo as usize, (hi.max(lo as isize)) as usize)
    }
}

fn conv_forward<T: Real>(geo: &ConvGeometry, x: &[T], w: &[T], out: &mut [T]) {
    let (v, pad) = (geo.v, (geo.k / 2) as isize);
    let in_plane = geo.t * v;
    let out_plane = geo.t_out * v;
    for n in 0..geo.n {
        for co in 0..geo.co {
            let o = &mut out[(n * geo.co + co) * out_plane..][..out_plane];
            for ci in 0..geo.ci {
                let xi = &x[(n * geo.ci + ci) * in_plane..][..in_plane];
                for k in 0..geo.k {
                    let wk = w[(co * geo.ci + ci) * geo.k + k];
                    let offset = k as isize - pad;
                    let (lo, hi) = geo.valid_range(offset);
                    if lo >= hi {
                        continue;
                    }
                    if geo.stride == 1 {
                        let src_lo = ((lo as isize + offset) as usize) * v;
                        let len = (hi - lo) * v;
                        o[lo * v..lo * v + len]
                            .iter_mut()
                            .zip(&xi[src_lo..src_lo + len])
                            .for_each(|(a, &b)| *a += wk * b);
                    } else {
                        for t in lo..hi {
                            let ti = (t as isize * geo.stride as isize + offset) as usize;
                            o[t * v..(t + 1) * v]
                                .iter_mut()
                                .zip(&xi[ti * v..(ti + 1) * v])
                                .for_each(|(a, &b)| *a += wk * b);
                        }
                    }
                }
            }
        }
    }
}

fn conv_backward_input<T: Real>(geo: &ConvGeometry, gy: &[T], w: &[T], dx: &mut [T]) {
    let (v, pad) = (geo.v, (geo.k / 2) as isize);
    let in_plane = geo.t * v;
    let out_plane = geo.t_out * v;
    for n in 0..geo.n {
        for ci in 0..geo.ci {
            let d = &mut dx[(n * geo.ci + ci) * in_plane..][..in_plane];
            for co in 0..geo.co {
                let g = &gy[(n * geo.co + co) * out_plane..][..out_plane];
                for k in 0..geo.k {
                    let wk = w[(co * geo.ci + ci) * geo.k + k];
                    let offset = k as isize - pad;
                    let (lo, hi) = geo.valid_range(offset);
                    for t in lo..hi {
                        let ti = (t as isize * geo.stride as isize + offset) as usize;
                        d[ti * v..(ti + 1) * v].iter_mut().zip(&g[t * v..(t + 1) * v]).for_each(|(a, &b)| *a += wk * b);
                    }
                }
            }
        }
    }
}

fn conv_backward_weight<T: Real>(geo: &ConvGeometry, gy: &[T], x: &[T], dw: &mut [T]) {
    let (v, pad) = (geo.v, (geo.k / 2) as isize);
    let in_plane = geo.t * v;
    let out_plane = geo.t_out * v;
    for n in 0..geo.n {
        for co in 0..geo.co {
            let g = &gy[(n * geo.co + co) * out_plane..][..out_plane];
            for ci in 0..geo.ci {
                let xi = &x[(n * geo.ci + ci) * in_plane..][..in_plane];
                for k in 0..geo.k {
                    let offset = k as isize - pad;
                    let (lo, hi) = geo.valid_range(offset);
                    let mut acc = T::zero();
                    if geo.stride == 1 && lo < hi {
                        let src_lo = ((lo as isize + offset) as usize) * v;
                        let len = (hi - lo) * v;
                        acc = g[lo * v..lo * v + len].iter().zip(&xi[src_lo..src_lo + len]).map(|(&a, &b)| a * b).sum();
                    } else {
                        for t in lo..hi {
                            let ti = (t as isize * geo.stride as isize + offset) as usize;
                            acc += g[t * v..(t + 1) * v].iter().zip(&xi[ti * v..(ti + 1) * v]).map(|(&a, &b)| a * b).sum::<T>();
                        }
                    }
                    dw[(co * geo.ci + ci) * geo.k + k] += acc;
                }
            }
        }
    }
}
