use std::collections::HashMap;

use super::conv::{self, ConvGeom};
use super::params::{ParamId, ParamStore};
use crate::error::{shape_err, Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Param,
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        cols: Option<Vec<T>>,
        geom: ConvGeom,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MulBcast { w: Var, x: Var },
    Sigmoid(Var),
    Tanh(Var),
    Scale(Var, T),
    Concat(Var, Var),
    Narrow { x: Var, start: usize },
    Sum(Var),
    MseSum(Var, Var),
    Blend { mask: Vec<bool>, on: Var, off: Var },
    Patchify { x: Var, map: Vec<usize> },
    Unpatchify { x: Var, map: Vec<usize> },
    Decouple { a: Var, b: Var, eps: T },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Wengert list of tensor operations. Nodes are appended in evaluation order,
/// so the list is topologically sorted by construction and a reverse sweep
/// visits each node once.
pub struct Tape<T = f32> {
    nodes: Vec<Node<T>>,
    params: HashMap<ParamId, Var>,
    adjoints: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn same_shape<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, op: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return shape_err(format!("{op}: {:?} vs {:?}", a.shape(), b.shape()));
    }
    Ok(())
}

fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

/// `map[i]` is the frame index feeding patched element `i`; patched channel
/// `j·p² + dy·p + dx` at `(y, x)` holds frame pixel `(j, y·p + dy, x·p + dx)`.
fn patch_map(n: usize, j: usize, h: usize, w: usize, p: usize) -> Vec<usize> {
    let (hp, wp) = (h / p, w / p);
    let mut map = Vec::with_capacity(n * j * h * w);
    for b in 0..n {
        for c in 0..j {
            for dy in 0..p {
                for dx in 0..p {
                    for y in 0..hp {
                        for x in 0..wp {
                            map.push(((b * j + c) * h + y * p + dy) * w + x * p + dx);
                        }
                    }
                }
            }
        }
    }
    map
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            params: HashMap::new(),
            adjoints: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
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

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Input with no gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Input whose adjoint is tracked and readable through [`Tape::grad`].
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Loads a parameter onto the tape once; later calls reuse the same node.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Result<Var> {
        if let Some(&v) = self.params.get(&id) {
            return Ok(v);
        }
        let value = store.value(id)?.clone();
        let v = self.push(value, Op::Param, true);
        self.params.insert(id, v);
        Ok(v)
    }

    pub fn zeros(&mut self, dims: &[usize]) -> Result<Var> {
        Ok(self.constant(Tensor::zeros(dims)?))
    }

    /// Stride-1 convolution with zero "same" padding; kernels must be odd.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let [n, ci, h, wd] = self.value(x).nchw()?;
        let [co, wci, kh, kw] = self.value(w).nchw()?;
        if wci != ci {
            return shape_err(format!("conv2d: input has {ci} channels, weight expects {wci}"));
        }
        if kh % 2 == 0 || kw % 2 == 0 {
            return shape_err(format!("conv2d: kernel {kh}x{kw} must be odd"));
        }
        if let Some(b) = b {
            if self.value(b).numel() != co {
                return shape_err(format!("conv2d: bias length {} != {co}", self.value(b).numel()));
            }
        }
        let geom = ConvGeom {
            n,
            ci,
            h,
            w: wd,
            co,
            kh,
            kw,
        };
        let (out, cols) = conv::forward(
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            &geom,
        );
        let value = Tensor::from_vec(&[n, co, h, wd], out)?;
        let needs = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        Ok(self.push(
            value,
            Op::Conv {
                x,
                w,
                b,
                cols,
                geom,
            },
            needs,
        ))
    }

    fn binary(&mut self, a: Var, b: Var, name: &str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (va, vb) = (self.value(a), self.value(b));
        same_shape(va, vb, name)?;
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        Ok(va.with_shape_of(data))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, "add", |x, y| x + y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(v, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, "sub", |x, y| x - y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(v, Op::Sub(a, b), ng))
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, "hadamard", |x, y| x * y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(v, Op::Mul(a, b), ng))
    }

    /// `w: [1, C, H, W]` times every sample of `x: [N, C, H, W]`.
    pub fn hadamard_batch(&mut self, w: Var, x: Var) -> Result<Var> {
        let [wn, wc, wh, ww] = self.value(w).nchw()?;
        let [_, c, h, wd] = self.value(x).nchw()?;
        if wn != 1 || (wc, wh, ww) != (c, h, wd) {
            return shape_err(format!(
                "hadamard_batch: weight {:?} vs state {:?}",
                self.value(w).shape(),
                self.value(x).shape()
            ));
        }
        let wv = self.value(w).data();
        let per = wv.len();
        let data = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v * wv[i % per])
            .collect();
        let value = self.value(x).with_shape_of(data);
        let ng = self.ng(w) || self.ng(x);
        Ok(self.push(value, Op::MulBcast { w, x }, ng))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let v = self.value(x).map(sigmoid);
        let ng = self.ng(x);
        self.push(v, Op::Sigmoid(x), ng)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let v = self.value(x).map(T::tanh);
        let ng = self.ng(x);
        self.push(v, Op::Tanh(x), ng)
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let v = self.value(x).map(|e| e * s);
        let ng = self.ng(x);
        self.push(v, Op::Scale(x, s), ng)
    }

    /// Channel concatenation with `a`'s channels first.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let [n, ca, h, w] = self.value(a).nchw()?;
        let [nb, cb, hb, wb] = self.value(b).nchw()?;
        if (n, h, w) != (nb, hb, wb) {
            return shape_err(format!(
                "concat_channels: {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            ));
        }
        let (la, lb) = (ca * h * w, cb * h * w);
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut data = Vec::with_capacity(n * (la + lb));
        for i in 0..n {
            data.extend_from_slice(&da[i * la..(i + 1) * la]);
            data.extend_from_slice(&db[i * lb..(i + 1) * lb]);
        }
        let value = Tensor::from_vec(&[n, ca + cb, h, w], data)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(value, Op::Concat(a, b), ng))
    }

    /// Channels `start..start + len`.
    pub fn narrow_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let [n, c, h, w] = self.value(x).nchw()?;
        if len == 0 || start + len > c {
            return shape_err(format!("narrow {start}+{len} of {c} channels"));
        }
        let hw = h * w;
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(n * len * hw);
        for i in 0..n {
            let base = (i * c + start) * hw;
            data.extend_from_slice(&src[base..base + len * hw]);
        }
        let value = Tensor::from_vec(&[n, len, h, w], data)?;
        let ng = self.ng(x);
        Ok(self.push(value, Op::Narrow { x, start }, ng))
    }

    /// Splits `x` into `parts` equal channel blocks.
    pub fn chunk_channels(&mut self, x: Var, parts: usize) -> Result<Vec<Var>> {
        let [_, c, _, _] = self.value(x).nchw()?;
        if parts == 0 || c % parts != 0 {
            return shape_err(format!("cannot split {c} channels into {parts}"));
        }
        let len = c / parts;
        (0..parts)
            .map(|i| self.narrow_channels(x, i * len, len))
            .collect()
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let v = Tensor::scalar(self.value(x).sum());
        let ng = self.ng(x);
        self.push(v, Op::Sum(x), ng)
    }

    /// Σ (pred − target)² over all elements.
    pub fn mse_sum(&mut self, pred: Var, target: Var) -> Result<Var> {
        let (a, b) = (self.value(pred), self.value(target));
        same_shape(a, b, "mse_sum")?;
        let s = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| (x - y) * (x - y))
            .sum();
        let ng = self.ng(pred) || self.ng(target);
        Ok(self.push(Tensor::scalar(s), Op::MseSum(pred, target), ng))
    }

    /// Per-sample selection: sample `n` comes from `on` where `mask[n]`, else
    /// from `off`.
    pub fn blend_batch(&mut self, mask: &[bool], on: Var, off: Var) -> Result<Var> {
        let (a, b) = (self.value(on), self.value(off));
        same_shape(a, b, "blend_batch")?;
        let [n, ..] = a.nchw()?;
        if mask.len() != n {
            return shape_err(format!("blend mask of {} for batch {n}", mask.len()));
        }
        let per = a.numel() / n;
        let mut data = Vec::with_capacity(a.numel());
        for (i, &m) in mask.iter().enumerate() {
            let src = if m { a.data() } else { b.data() };
            data.extend_from_slice(&src[i * per..(i + 1) * per]);
        }
        let value = a.with_shape_of(data);
        let ng = self.ng(on) || self.ng(off);
        Ok(self.push(
            value,
            Op::Blend {
                mask: mask.to_vec(),
                on,
                off,
            },
            ng,
        ))
    }

    /// Space-to-depth: `[N, J, H, W] -> [N, J·p², H/p, W/p]`.
    pub fn patchify(&mut self, x: Var, p: usize) -> Result<Var> {
        let [n, j, h, w] = self.value(x).nchw()?;
        if p == 0 || h % p != 0 || w % p != 0 {
            return shape_err(format!("patch {p} does not divide {h}x{w}"));
        }
        let map = patch_map(n, j, h, w, p);
        let src = self.value(x).data();
        let data = map.iter().map(|&i| src[i]).collect();
        let value = Tensor::from_vec(&[n, j * p * p, h / p, w / p], data)?;
        let ng = self.ng(x);
        Ok(self.push(value, Op::Patchify { x, map }, ng))
    }

    /// Inverse of [`Tape::patchify`].
    pub fn unpatchify(&mut self, x: Var, p: usize) -> Result<Var> {
        let [n, c, hp, wp] = self.value(x).nchw()?;
        if p == 0 || c % (p * p) != 0 {
            return shape_err(format!("{c} channels not a multiple of {p}²"));
        }
        let j = c / (p * p);
        let map = patch_map(n, j, hp * p, wp * p, p);
        let src = self.value(x).data();
        let mut data = vec![T::zero(); src.len()];
        for (i, &m) in map.iter().enumerate() {
            data[m] = src[i];
        }
        let value = Tensor::from_vec(&[n, j, hp * p, wp * p], data)?;
        let ng = self.ng(x);
        Ok(self.push(value, Op::Unpatchify { x, map }, ng))
    }

    /// Σ over samples and channels of |⟨a, b⟩| / (‖a‖·‖b‖ + eps), where the
    /// inner product and norms run over each channel's flattened spatial map.
    pub fn decouple_loss(&mut self, a: Var, b: Var, eps: T) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        same_shape(va, vb, "decouple_loss")?;
        let [n, c, h, w] = va.nchw()?;
        let hw = h * w;
        let mut total = T::zero();
        for k in 0..n * c {
            let x = &va.data()[k * hw..(k + 1) * hw];
            let y = &vb.data()[k * hw..(k + 1) * hw];
            let (dot, nx, ny) = channel_stats(x, y);
            total = total + dot.abs() / (nx * ny + eps);
        }
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::scalar(total), Op::Decouple { a, b, eps }, ng))
    }

    /// Reverse sweep from a scalar `loss`, accumulating ∂loss/∂param into the
    /// store's gradient buffers.
    pub fn backward(&mut self, loss: Var, store: &mut ParamStore<T>) -> Result<()> {
        self.compute_adjoints(loss)?;
        for (&id, &v) in &self.params {
            if let Some(g) = &self.adjoints[v.0] {
                store.accumulate_grad(id, g)?;
            } else {
                store.accumulate_grad(id, &vec![T::zero(); self.nodes[v.0].value.numel()])?;
            }
        }
        Ok(())
    }

    /// Reverse sweep without touching any parameter store; adjoints are then
    /// readable through [`Tape::grad`].
    pub fn compute_adjoints(&mut self, loss: Var) -> Result<()> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward from non-scalar of shape {:?}",
                lv.shape()
            )));
        }
        if !lv.all_finite() {
            return Err(Error::Numeric(format!("loss is {}", lv.data()[0])));
        }
        let mut adj: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        adj[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            if self.nodes[i].needs_grad {
                self.propagate(i, &g, &mut adj)?;
            }
            adj[i] = Some(g);
        }
        self.adjoints = adj;
        Ok(())
    }

    /// Adjoint of `v` from the last reverse sweep, if `v` was reached.
    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        self.adjoints
            .get(v.0)?
            .as_ref()
            .map(|g| self.nodes[v.0].value.with_shape_of(g.clone()))
    }

    fn propagate(&self, i: usize, g: &[T], adj: &mut [Option<Vec<T>>]) -> Result<()> {
        let nodes = &self.nodes;
        let val = |v: Var| nodes[v.0].value.data();
        let mut send = |v: Var, contrib: Vec<T>| {
            if !nodes[v.0].needs_grad {
                return;
            }
            match &mut adj[v.0] {
                Some(a) => {
                    for (x, y) in a.iter_mut().zip(contrib) {
                        *x = *x + y;
                    }
                }
                slot @ None => *slot = Some(contrib),
            }
        };
        let two = T::one() + T::one();
        match &nodes[i].op {
            Op::Leaf | Op::Param => {}
            Op::Conv {
                x,
                w,
                b,
                cols,
                geom,
            } => {
                let grads = conv::backward(
                    g,
                    val(*x),
                    val(*w),
                    cols.as_deref(),
                    geom,
                    nodes[x.0].needs_grad,
                    nodes[w.0].needs_grad,
                    b.is_some_and(|b| nodes[b.0].needs_grad),
                );
                if let Some(dx) = grads.dx {
                    send(*x, dx);
                }
                if let Some(dw) = grads.dw {
                    send(*w, dw);
                }
                if let (Some(b), Some(db)) = (b, grads.db) {
                    send(*b, db);
                }
            }
            Op::Add(a, b) => {
                send(*a, g.to_vec());
                send(*b, g.to_vec());
            }
            Op::Sub(a, b) => {
                send(*a, g.to_vec());
                send(*b, g.iter().map(|&v| -v).collect());
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                send(*a, g.iter().zip(vb).map(|(&d, &y)| d * y).collect());
                send(*b, g.iter().zip(va).map(|(&d, &x)| d * x).collect());
            }
            Op::MulBcast { w, x } => {
                let (vw, vx) = (val(*w), val(*x));
                let per = vw.len();
                if nodes[w.0].needs_grad {
                    let mut dw = vec![T::zero(); per];
                    for (k, (&d, &xv)) in g.iter().zip(vx).enumerate() {
                        dw[k % per] = dw[k % per] + d * xv;
                    }
                    send(*w, dw);
                }
                send(
                    *x,
                    g.iter().enumerate().map(|(k, &d)| d * vw[k % per]).collect(),
                );
            }
            Op::Sigmoid(x) => {
                let y = nodes[i].value.data();
                send(
                    *x,
                    g.iter().zip(y).map(|(&d, &s)| d * s * (T::one() - s)).collect(),
                );
            }
            Op::Tanh(x) => {
                let y = nodes[i].value.data();
                send(
                    *x,
                    g.iter().zip(y).map(|(&d, &t)| d * (T::one() - t * t)).collect(),
                );
            }
            Op::Scale(x, s) => send(*x, g.iter().map(|&d| d * *s).collect()),
            Op::Concat(a, b) => {
                let [n, ca, h, w] = nodes[a.0].value.nchw()?;
                let cb = nodes[b.0].value.nchw()?[1];
                let (la, lb) = (ca * h * w, cb * h * w);
                let mut ga = Vec::with_capacity(n * la);
                let mut gb = Vec::with_capacity(n * lb);
                for k in 0..n {
                    let base = k * (la + lb);
                    ga.extend_from_slice(&g[base..base + la]);
                    gb.extend_from_slice(&g[base + la..base + la + lb]);
                }
                send(*a, ga);
                send(*b, gb);
            }
            Op::Narrow { x, start } => {
                let [n, c, h, w] = nodes[x.0].value.nchw()?;
                let len = nodes[i].value.nchw()?[1];
                let hw = h * w;
                let mut gx = vec![T::zero(); n * c * hw];
                for k in 0..n {
                    let dst = (k * c + start) * hw;
                    gx[dst..dst + len * hw].copy_from_slice(&g[k * len * hw..(k + 1) * len * hw]);
                }
                send(*x, gx);
            }
            Op::Sum(x) => send(*x, vec![g[0]; nodes[x.0].value.numel()]),
            Op::MseSum(a, b) => {
                let diff: Vec<T> = val(*a)
                    .iter()
                    .zip(val(*b))
                    .map(|(&x, &y)| two * (x - y) * g[0])
                    .collect();
                if nodes[b.0].needs_grad {
                    send(*b, diff.iter().map(|&v| -v).collect());
                }
                send(*a, diff);
            }
            Op::Blend { mask, on, off } => {
                let per = g.len() / mask.len();
                let mut g_on = vec![T::zero(); g.len()];
                let mut g_off = vec![T::zero(); g.len()];
                for (k, &m) in mask.iter().enumerate() {
                    let dst = if m { &mut g_on } else { &mut g_off };
                    dst[k * per..(k + 1) * per].copy_from_slice(&g[k * per..(k + 1) * per]);
                }
                send(*on, g_on);
                send(*off, g_off);
            }
            Op::Patchify { x, map } => {
                let mut gx = vec![T::zero(); g.len()];
                for (k, &m) in map.iter().enumerate() {
                    gx[m] = g[k];
                }
                send(*x, gx);
            }
            Op::Unpatchify { x, map } => send(*x, map.iter().map(|&m| g[m]).collect()),
            Op::Decouple { a, b, eps } => {
                let [n, c, h, w] = nodes[a.0].value.nchw()?;
                let hw = h * w;
                let (va, vb) = (val(*a), val(*b));
                let mut ga = vec![T::zero(); va.len()];
                let mut gb = vec![T::zero(); vb.len()];
                for k in 0..n * c {
                    let r = k * hw..(k + 1) * hw;
                    let (x, y) = (&va[r.clone()], &vb[r.clone()]);
                    let (dot, nx, ny) = channel_stats(x, y);
                    let den = nx * ny + *eps;
                    let sgn = if dot > T::zero() {
                        T::one()
                    } else if dot < T::zero() {
                        -T::one()
                    } else {
                        T::zero()
                    };
                    let q = dot.abs() / (den * den);
                    // ∂‖x‖/∂x = x/‖x‖, taken as 0 at the origin
                    let cx = if nx > T::zero() { q * ny / nx } else { T::zero() };
                    let cy = if ny > T::zero() { q * nx / ny } else { T::zero() };
                    for j in 0..hw {
                        ga[r.start + j] = g[0] * (sgn * y[j] / den - cx * x[j]);
                        gb[r.start + j] = g[0] * (sgn * x[j] / den - cy * y[j]);
                    }
                }
                send(*a, ga);
                send(*b, gb);
            }
        }
        Ok(())
    }
}

fn channel_stats<T: Scalar>(x: &[T], y: &[T]) -> (T, T, T) {
    let mut dot = T::zero();
    let mut xx = T::zero();
    let mut yy = T::zero();
    for (&a, &b) in x.iter().zip(y) {
        dot = dot + a * b;
        xx = xx + a * a;
        yy = yy + b * b;
    }
    (dot, xx.sqrt(), yy.sqrt())
}
