//! Recurrent cells: ConvLSTM with peepholes, the zigzag memory-flow ConvLSTM,
//! the dual-memory ST-LSTM, and multiplicative action fusion.
//!
//! Gate convolutions that read the same source are stored fused along the
//! output-channel axis, one block of `hidden` channels per gate, in the order
//! listed on each parameter field. A fused convolution is exactly the sum of
//! its per-gate convolutions, so the algebra is unchanged.

use crate::autodiff::{ParamId, ParamStore, Tape, Var};
use crate::error::{shape_err, Error, Result};
use crate::rng::Rng;
use crate::tensor::{Scalar, Tensor};

/// Geometry shared by a cell's tensors.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CellDims {
    /// Channels of the cell input `X` (patched frame or the hidden state below).
    pub in_channels: usize,
    pub hidden: usize,
    pub kernel: usize,
    /// Spatial size of the states (after patching).
    pub height: usize,
    pub width: usize,
}

/// Uniform `±sqrt(1/fan_in)` weights for `blocks` stacked convolutions of
/// `cin → hidden` channels each.
fn conv_weight<T: Scalar>(
    rng: &mut Rng,
    blocks: usize,
    hidden: usize,
    cin: usize,
    k: usize,
    fan_in: usize,
) -> Result<Tensor<T>> {
    let bound = (1.0 / fan_in as f64).sqrt();
    Tensor::from_fn(&[blocks * hidden, cin, k, k], |_| {
        T::lit(rng.uniform_range(-bound, bound))
    })
}

fn add_conv<T: Scalar>(
    store: &mut ParamStore<T>,
    rng: &mut Rng,
    name: String,
    blocks: usize,
    hidden: usize,
    cin: usize,
    k: usize,
) -> Result<ParamId> {
    Ok(store.add(name, conv_weight(rng, blocks, hidden, cin, k, cin * k * k)?))
}

fn add_zeros<T: Scalar>(store: &mut ParamStore<T>, name: String, dims: &[usize]) -> Result<ParamId> {
    Ok(store.add(name, Tensor::zeros(dims)?))
}

/// Tape handles to the gate quantities the diagnostics and the decoupling loss
/// read: memory increments `i ⊙ g` and forget activations, for the temporal
/// memory `C` and/or the zigzag memory `M` depending on the cell.
#[derive(Clone, Copy, Debug)]
pub struct GateCache {
    pub inc_c: Option<Var>,
    pub inc_m: Option<Var>,
    pub forget_c: Option<Var>,
    pub forget_m: Option<Var>,
}

impl GateCache {
    pub fn snapshot<T: Scalar>(&self, tape: &Tape<T>) -> GateValues<T> {
        let get = |v: Option<Var>| v.map(|v| tape.value(v).clone());
        GateValues {
            inc_c: get(self.inc_c),
            inc_m: get(self.inc_m),
            forget_c: get(self.forget_c),
            forget_m: get(self.forget_m),
        }
    }
}

/// Detached copy of a [`GateCache`].
#[derive(Clone, Debug)]
pub struct GateValues<T = f32> {
    pub inc_c: Option<Tensor<T>>,
    pub inc_m: Option<Tensor<T>>,
    pub forget_c: Option<Tensor<T>>,
    pub forget_m: Option<Tensor<T>>,
}

fn same_grid<T: Scalar>(tape: &Tape<T>, vars: &[Var], hidden: &[Var]) -> Result<()> {
    let first = tape.value(vars[0]).nchw()?;
    for &v in vars {
        let [n, _, h, w] = tape.value(v).nchw()?;
        if (n, h, w) != (first[0], first[2], first[3]) {
            return shape_err(format!(
                "state grid {:?} vs {:?}",
                tape.value(v).shape(),
                tape.value(vars[0]).shape()
            ));
        }
    }
    if let Some(&h0) = hidden.first() {
        let c0 = tape.value(h0).nchw()?[1];
        for &v in hidden {
            if tape.value(v).nchw()?[1] != c0 {
                return shape_err("hidden/memory channel mismatch");
            }
        }
    }
    Ok(())
}

fn add3<T: Scalar>(tape: &mut Tape<T>, a: Var, b: Var, c: Var) -> Result<Var> {
    let ab = tape.add(a, b)?;
    tape.add(ab, c)
}

/// `f ⊙ prev + i ⊙ g`, returning the new memory and the increment `i ⊙ g`.
fn memory_update<T: Scalar>(
    tape: &mut Tape<T>,
    f: Var,
    prev: Var,
    i: Var,
    g: Var,
) -> Result<(Var, Var)> {
    let keep = tape.hadamard(f, prev)?;
    let inc = tape.hadamard(i, g)?;
    Ok((tape.add(keep, inc)?, inc))
}

// ---------------------------------------------------------------------------
// ConvLSTM

/// Peephole ConvLSTM.
#[derive(Clone, Debug)]
pub struct ConvLstmParams {
    /// `[4·hidden, in, k, k]`, gates `g, i, f, o`.
    pub w_x: ParamId,
    /// `[4·hidden]`, gates `g, i, f, o`.
    pub bias: ParamId,
    /// `[4·hidden, hidden, k, k]`, gates `g, i, f, o`.
    pub w_h: ParamId,
    /// Per-element peepholes `[1, hidden, H, W]`.
    pub w_ci: ParamId,
    pub w_cf: ParamId,
    pub w_co: ParamId,
}

impl ConvLstmParams {
    pub fn init<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut Rng,
        prefix: &str,
        d: &CellDims,
    ) -> Result<Self> {
        let (c, k) = (d.hidden, d.kernel);
        let peep = [1, c, d.height, d.width];
        Ok(ConvLstmParams {
            w_x: add_conv(store, rng, format!("{prefix}.w_x"), 4, c, d.in_channels, k)?,
            bias: add_zeros(store, format!("{prefix}.bias"), &[4 * c])?,
            w_h: add_conv(store, rng, format!("{prefix}.w_h"), 4, c, c, k)?,
            w_ci: add_zeros(store, format!("{prefix}.w_ci"), &peep)?,
            w_cf: add_zeros(store, format!("{prefix}.w_cf"), &peep)?,
            w_co: add_zeros(store, format!("{prefix}.w_co"), &peep)?,
        })
    }

    pub fn ids(&self) -> Vec<ParamId> {
        vec![self.w_x, self.bias, self.w_h, self.w_ci, self.w_cf, self.w_co]
    }
}

pub struct ConvLstmOut {
    pub h: Var,
    pub c: Var,
    pub cache: GateCache,
}

pub fn convlstm_step<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    p: &ConvLstmParams,
    x: Var,
    h_prev: Var,
    c_prev: Var,
) -> Result<ConvLstmOut> {
    same_grid(tape, &[x, h_prev, c_prev], &[h_prev, c_prev])?;
    let (w_x, b, w_h) = (tape.param(store, p.w_x)?, tape.param(store, p.bias)?, tape.param(store, p.w_h)?);
    let gx = tape.conv2d(x, w_x, Some(b))?;
    let gh = tape.conv2d(h_prev, w_h, None)?;
    let s = tape.add(gx, gh)?;
    let gates = tape.chunk_channels(s, 4)?;

    let w_ci = tape.param(store, p.w_ci)?;
    let w_cf = tape.param(store, p.w_cf)?;
    let w_co = tape.param(store, p.w_co)?;
    let g = tape.tanh(gates[0]);
    let pi = tape.hadamard_batch(w_ci, c_prev)?;
    let pre_i = tape.add(gates[1], pi)?;
    let i = tape.sigmoid(pre_i);
    let pf = tape.hadamard_batch(w_cf, c_prev)?;
    let pre_f = tape.add(gates[2], pf)?;
    let f = tape.sigmoid(pre_f);
    let (c, inc) = memory_update(tape, f, c_prev, i, g)?;
    let po = tape.hadamard_batch(w_co, c)?;
    let pre_o = tape.add(gates[3], po)?;
    let o = tape.sigmoid(pre_o);
    let tc = tape.tanh(c);
    let h = tape.hadamard(o, tc)?;
    Ok(ConvLstmOut {
        h,
        c,
        cache: GateCache {
            inc_c: Some(inc),
            inc_m: None,
            forget_c: Some(f),
            forget_m: None,
        },
    })
}

// ---------------------------------------------------------------------------
// Memory-flow ConvLSTM

/// ConvLSTM whose only memory `M` zigzags through the stack; gates read `M`
/// through convolutions.
#[derive(Clone, Debug)]
pub struct MFlowParams {
    /// `[4·hidden, in, k, k]`, gates `g, i, f, o`; bottom layer only.
    pub w_x: Option<ParamId>,
    /// `[4·hidden, hidden, k, k]` on `H^{l-1}`, gates `g, i, f, o`.
    pub w_h: ParamId,
    /// `[4·hidden]`, gates `g, i, f, o`.
    pub bias: ParamId,
    /// `[2·hidden, hidden, k, k]` on `M^{l-1}`, gates `i, f`.
    pub w_m: ParamId,
    /// `[hidden, hidden, k, k]` on the updated `M^l`, output gate.
    pub w_mo: ParamId,
}

impl MFlowParams {
    /// `layer_index` is 1-based; only layer 1 gets input-to-state weights.
    pub fn init<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut Rng,
        prefix: &str,
        d: &CellDims,
        layer_index: usize,
    ) -> Result<Self> {
        let (c, k) = (d.hidden, d.kernel);
        let w_x = if layer_index == 1 {
            Some(add_conv(store, rng, format!("{prefix}.w_x"), 4, c, d.in_channels, k)?)
        } else {
            None
        };
        Ok(MFlowParams {
            w_x,
            w_h: add_conv(store, rng, format!("{prefix}.w_h"), 4, c, c, k)?,
            bias: add_zeros(store, format!("{prefix}.bias"), &[4 * c])?,
            w_m: add_conv(store, rng, format!("{prefix}.w_m"), 2, c, c, k)?,
            w_mo: add_conv(store, rng, format!("{prefix}.w_mo"), 1, c, c, k)?,
        })
    }

    pub fn ids(&self) -> Vec<ParamId> {
        let mut v: Vec<ParamId> = self.w_x.into_iter().collect();
        v.extend([self.w_h, self.bias, self.w_m, self.w_mo]);
        v
    }
}

pub struct MFlowOut {
    pub h: Var,
    pub m: Var,
    pub cache: GateCache,
}

/// `h_below`/`m_below` are `H_t^{l-1}`, `M_t^{l-1}`; for the bottom layer the
/// caller passes the top layer's states from the previous timestep.
pub fn mflow_step<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    p: &MFlowParams,
    x: Option<Var>,
    h_below: Var,
    m_below: Var,
    layer_index: usize,
) -> Result<MFlowOut> {
    match (layer_index, x) {
        (1, None) => return Err(Error::Contract("layer 1 requires the input frame".into())),
        (l, Some(_)) if l != 1 => {
            return Err(Error::Contract(format!("layer {l} must not receive the input frame")))
        }
        _ => {}
    }
    let mut grid = vec![h_below, m_below];
    grid.extend(x);
    same_grid(tape, &grid, &[h_below, m_below])?;

    let w_h = tape.param(store, p.w_h)?;
    let b = tape.param(store, p.bias)?;
    let mut pre = tape.conv2d(h_below, w_h, Some(b))?;
    if let Some(x) = x {
        let w_x = p
            .w_x
            .ok_or_else(|| Error::Contract("bottom layer is missing input weights".into()))?;
        let w_x = tape.param(store, w_x)?;
        let gx = tape.conv2d(x, w_x, None)?;
        pre = tape.add(pre, gx)?;
    }
    let gates = tape.chunk_channels(pre, 4)?;
    let w_m = tape.param(store, p.w_m)?;
    let mm = tape.conv2d(m_below, w_m, None)?;
    let mg = tape.chunk_channels(mm, 2)?;

    let g = tape.tanh(gates[0]);
    let pre_i = tape.add(gates[1], mg[0])?;
    let i = tape.sigmoid(pre_i);
    let pre_f = tape.add(gates[2], mg[1])?;
    let f = tape.sigmoid(pre_f);
    let (m, inc) = memory_update(tape, f, m_below, i, g)?;
    let w_mo = tape.param(store, p.w_mo)?;
    let mo = tape.conv2d(m, w_mo, None)?;
    let pre_o = tape.add(gates[3], mo)?;
    let o = tape.sigmoid(pre_o);
    let tm = tape.tanh(m);
    let h = tape.hadamard(o, tm)?;
    Ok(MFlowOut {
        h,
        m,
        cache: GateCache {
            inc_c: None,
            inc_m: Some(inc),
            forget_c: None,
            forget_m: Some(f),
        },
    })
}

// ---------------------------------------------------------------------------
// ST-LSTM

/// Spatiotemporal LSTM with a temporal memory `C` and a zigzag memory `M`.
#[derive(Clone, Debug)]
pub struct StLstmParams {
    /// `[7·hidden, in, k, k]`, gates `g, i, f, g', i', f', o`.
    pub w_x: ParamId,
    /// `[7·hidden]`, same gate order as `w_x`.
    pub bias: ParamId,
    /// `[4·hidden, hidden, k, k]` on `H_{t-1}`, gates `g, i, f, o`.
    pub w_h: ParamId,
    /// `[3·hidden, hidden, k, k]` on `M^{l-1}`, gates `g', i', f'`.
    pub w_m: ParamId,
    /// `[hidden, 2·hidden, k, k]` output-gate weights on `[C_t, M_t]`.
    pub w_o: ParamId,
    /// `[hidden, 2·hidden, 1, 1]` fusion of `[C_t, M_t]`, no bias.
    pub w_fuse: ParamId,
}

impl StLstmParams {
    pub fn init<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut Rng,
        prefix: &str,
        d: &CellDims,
    ) -> Result<Self> {
        let (c, k) = (d.hidden, d.kernel);
        Ok(StLstmParams {
            w_x: add_conv(store, rng, format!("{prefix}.w_x"), 7, c, d.in_channels, k)?,
            bias: add_zeros(store, format!("{prefix}.bias"), &[7 * c])?,
            w_h: add_conv(store, rng, format!("{prefix}.w_h"), 4, c, c, k)?,
            w_m: add_conv(store, rng, format!("{prefix}.w_m"), 3, c, c, k)?,
            // W_co and W_mo are separate convolutions of `hidden` inputs each
            w_o: store.add(
                format!("{prefix}.w_o"),
                conv_weight(rng, 1, c, 2 * c, k, c * k * k)?,
            ),
            w_fuse: add_conv(store, rng, format!("{prefix}.w_fuse"), 1, c, 2 * c, 1)?,
        })
    }

    pub fn ids(&self) -> Vec<ParamId> {
        vec![self.w_x, self.bias, self.w_h, self.w_m, self.w_o, self.w_fuse]
    }
}

pub struct StLstmOut {
    pub h: Var,
    pub c: Var,
    pub m: Var,
    pub cache: GateCache,
}

pub fn stlstm_step<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    p: &StLstmParams,
    x: Var,
    h_prev: Var,
    c_prev: Var,
    m_below: Var,
) -> Result<StLstmOut> {
    same_grid(tape, &[x, h_prev, c_prev, m_below], &[h_prev, c_prev, m_below])?;
    let w_x = tape.param(store, p.w_x)?;
    let b = tape.param(store, p.bias)?;
    let xg = tape.conv2d(x, w_x, Some(b))?;
    let xs = tape.chunk_channels(xg, 7)?;
    let w_h = tape.param(store, p.w_h)?;
    let hg = tape.conv2d(h_prev, w_h, None)?;
    let hs = tape.chunk_channels(hg, 4)?;
    let w_m = tape.param(store, p.w_m)?;
    let mg = tape.conv2d(m_below, w_m, None)?;
    let ms = tape.chunk_channels(mg, 3)?;

    // temporal branch: X_t and H_{t-1} only
    let pre_g = tape.add(xs[0], hs[0])?;
    let g = tape.tanh(pre_g);
    let pre_i = tape.add(xs[1], hs[1])?;
    let i = tape.sigmoid(pre_i);
    let pre_f = tape.add(xs[2], hs[2])?;
    let f = tape.sigmoid(pre_f);
    let (c, inc_c) = memory_update(tape, f, c_prev, i, g)?;

    // spatiotemporal branch: X_t and M^{l-1} only
    let pre_g2 = tape.add(xs[3], ms[0])?;
    let g2 = tape.tanh(pre_g2);
    let pre_i2 = tape.add(xs[4], ms[1])?;
    let i2 = tape.sigmoid(pre_i2);
    let pre_f2 = tape.add(xs[5], ms[2])?;
    let f2 = tape.sigmoid(pre_f2);
    let (m, inc_m) = memory_update(tape, f2, m_below, i2, g2)?;

    let cm = tape.concat_channels(c, m)?;
    let w_o = tape.param(store, p.w_o)?;
    let oc = tape.conv2d(cm, w_o, None)?;
    let pre_o = add3(tape, xs[6], hs[3], oc)?;
    let o = tape.sigmoid(pre_o);
    let w_fuse = tape.param(store, p.w_fuse)?;
    let fused = tape.conv2d(cm, w_fuse, None)?;
    let tf = tape.tanh(fused);
    let h = tape.hadamard(o, tf)?;
    Ok(StLstmOut {
        h,
        c,
        m,
        cache: GateCache {
            inc_c: Some(inc_c),
            inc_m: Some(inc_m),
            forget_c: Some(f),
            forget_m: Some(f2),
        },
    })
}

// ---------------------------------------------------------------------------
// Action fusion

#[derive(Clone, Debug)]
pub struct ActionFuseParams {
    pub action_dim: usize,
    /// `[hidden, action_dim, 1, 1]` linear embedding of the action vector.
    pub w_embed: ParamId,
    /// `[hidden]`
    pub b_embed: ParamId,
    /// `[hidden, hidden, k, k]` on `H_{t-1}`, no bias.
    pub w_hv: ParamId,
    /// `[hidden, hidden, k, k]` on the tiled action map, no bias.
    pub w_av: ParamId,
}

impl ActionFuseParams {
    pub fn init<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut Rng,
        prefix: &str,
        d: &CellDims,
        action_dim: usize,
    ) -> Result<Self> {
        let (c, k) = (d.hidden, d.kernel);
        Ok(ActionFuseParams {
            action_dim,
            w_embed: add_conv(store, rng, format!("{prefix}.w_embed"), 1, c, action_dim, 1)?,
            b_embed: add_zeros(store, format!("{prefix}.b_embed"), &[c])?,
            w_hv: add_conv(store, rng, format!("{prefix}.w_hv"), 1, c, c, k)?,
            w_av: add_conv(store, rng, format!("{prefix}.w_av"), 1, c, c, k)?,
        })
    }

    pub fn ids(&self) -> Vec<ParamId> {
        vec![self.w_embed, self.b_embed, self.w_hv, self.w_av]
    }
}

/// Tiles `[N, d_a]` action vectors to a constant `[N, d_a, H, W]` map.
pub fn tile_actions<T: Scalar>(action: &Tensor<T>, height: usize, width: usize) -> Result<Tensor<T>> {
    let dims = action.dims();
    if dims.len() != 2 {
        return shape_err(format!("actions must be [N, d_a], got {dims:?}"));
    }
    let (n, da) = (dims[0], dims[1]);
    let hw = height * width;
    let mut data = Vec::with_capacity(n * da * hw);
    for &a in action.data() {
        data.extend(std::iter::repeat_n(a, hw));
    }
    Tensor::from_vec(&[n, da, height, width], data)
}

/// `V = (W_hv ∗ H_{t-1}) ⊙ (W_av ∗ A)`, with `A` the embedded action tiled to
/// the hidden-state grid. `V` replaces `H_{t-1}` in the ST-LSTM update.
pub fn action_fuse<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    p: &ActionFuseParams,
    h_prev: Var,
    action: &Tensor<T>,
) -> Result<Var> {
    let [n, _, h, w] = tape.value(h_prev).nchw()?;
    if action.dims() != [n, p.action_dim] {
        return shape_err(format!(
            "action {:?} does not match [batch {n}, d_a {}]",
            action.dims(),
            p.action_dim
        ));
    }
    let map = tape.constant(tile_actions(action, h, w)?);
    let (we, be) = (tape.param(store, p.w_embed)?, tape.param(store, p.b_embed)?);
    let emb = tape.conv2d(map, we, Some(be))?;
    let w_av = tape.param(store, p.w_av)?;
    let av = tape.conv2d(emb, w_av, None)?;
    let w_hv = tape.param(store, p.w_hv)?;
    let hv = tape.conv2d(h_prev, w_hv, None)?;
    tape.hadamard(hv, av)
}

// ---------------------------------------------------------------------------
// Diagnostics

/// Fraction of forget-gate activations strictly below a threshold, per memory.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Saturation {
    /// Forget gates of the temporal memory `C` (`f_t`).
    pub forget_c: Option<f64>,
    /// Forget gates of the zigzag memory `M` (`f'_t`).
    pub forget_m: Option<f64>,
}

pub fn forget_saturation<T: Scalar>(caches: &[GateValues<T>], threshold: f64) -> Result<Saturation> {
    let ratio = |pick: fn(&GateValues<T>) -> Option<&Tensor<T>>| {
        let (mut below, mut total) = (0usize, 0usize);
        for c in caches {
            if let Some(t) = pick(c) {
                total += t.numel();
                below += t
                    .data()
                    .iter()
                    .filter(|v| v.to_f64().is_some_and(|v| v < threshold))
                    .count();
            }
        }
        (total > 0).then(|| below as f64 / total as f64)
    };
    let s = Saturation {
        forget_c: ratio(|c| c.forget_c.as_ref()),
        forget_m: ratio(|c| c.forget_m.as_ref()),
    };
    if s.forget_c.is_none() && s.forget_m.is_none() {
        return Err(Error::Contract("no forget-gate activations to analyse".into()));
    }
    Ok(s)
}
