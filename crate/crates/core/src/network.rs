//! Stacked recurrent predictors: configuration, parameter allocation, a single
//! timestep through the stack, masked rollouts, and gradient probes.

use std::fmt;
use std::str::FromStr;

use crate::autodiff::{ParamId, ParamStore, Tape, Var};
use crate::cells::{
    action_fuse, convlstm_step, mflow_step, stlstm_step, ActionFuseParams, CellDims,
    ConvLstmParams, GateCache, MFlowParams, StLstmParams,
};
use crate::curriculum::SamplingMask;
use crate::decoupling::{decouple_loss, project_increments, DecoupleParams, DECOUPLE_EPS};
use crate::error::{shape_err, Error, Result};
use crate::rng::Rng;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    /// Independent ConvLSTM layers; memories never leave their layer.
    ConvLstmStack,
    /// Single memory zigzagging bottom-up within a step and top-to-bottom
    /// across steps.
    MFlow,
    /// Temporal memory per layer plus the zigzag memory.
    StLstm,
    /// [`Variant::StLstm`] with the hidden state gated by the action.
    StLstmAction,
}

impl Variant {
    pub fn has_zigzag_memory(self) -> bool {
        !matches!(self, Variant::ConvLstmStack)
    }

    pub fn has_layer_memory(self) -> bool {
        !matches!(self, Variant::MFlow)
    }

    pub fn uses_decoupling(self) -> bool {
        matches!(self, Variant::StLstm | Variant::StLstmAction)
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "convlstm" | "convlstm_stack" => Ok(Variant::ConvLstmStack),
            "mflow" => Ok(Variant::MFlow),
            "stlstm" => Ok(Variant::StLstm),
            "stlstm_action" => Ok(Variant::StLstmAction),
            _ => Err(Error::Config(format!("unknown variant '{s}'"))),
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::ConvLstmStack => "convlstm",
            Variant::MFlow => "mflow",
            Variant::StLstm => "stlstm",
            Variant::StLstmAction => "stlstm_action",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkConfig {
    pub variant: Variant,
    pub num_layers: usize,
    pub hidden: usize,
    pub kernel: usize,
    pub patch: usize,
    /// Frame channels.
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// Action vector length; zero unless the variant is action-conditioned.
    pub action_dim: usize,
}

impl NetworkConfig {
    /// Four layers of 128 channels with 5×5 kernels on 64×64 single-channel
    /// frames cut into 4×4 patches.
    pub fn full_scale(variant: Variant) -> Self {
        NetworkConfig {
            variant,
            num_layers: 4,
            hidden: 128,
            kernel: 5,
            patch: 4,
            channels: 1,
            height: 64,
            width: 64,
            action_dim: if variant == Variant::StLstmAction { 2 } else { 0 },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.num_layers == 0 {
            return bad("num_layers must be at least 1".into());
        }
        if self.hidden == 0 || self.channels == 0 || self.patch == 0 {
            return bad("hidden, channels and patch must be positive".into());
        }
        if self.kernel.is_multiple_of(2) {
            return bad(format!("kernel {} must be odd", self.kernel));
        }
        if self.height == 0
            || self.width == 0
            || !self.height.is_multiple_of(self.patch)
            || !self.width.is_multiple_of(self.patch)
        {
            return bad(format!(
                "frame {}x{} not divisible by patch {}",
                self.height, self.width, self.patch
            ));
        }
        match (self.variant, self.action_dim) {
            (Variant::StLstmAction, 0) => bad("action variant needs action_dim > 0".into()),
            (Variant::StLstmAction, _) | (_, 0) => Ok(()),
            (v, d) => bad(format!("variant {v} takes no actions (action_dim = {d})")),
        }
    }

    pub fn patched_channels(&self) -> usize {
        self.channels * self.patch * self.patch
    }

    /// Spatial size of the recurrent states.
    pub fn latent_size(&self) -> (usize, usize) {
        (self.height / self.patch, self.width / self.patch)
    }

    fn cell_dims(&self, layer: usize) -> CellDims {
        let (height, width) = self.latent_size();
        CellDims {
            in_channels: if layer == 1 { self.patched_channels() } else { self.hidden },
            hidden: self.hidden,
            kernel: self.kernel,
            height,
            width,
        }
    }
}

#[derive(Clone, Debug)]
pub enum LayerParams {
    ConvLstm(ConvLstmParams),
    MFlow(MFlowParams),
    StLstm {
        cell: StLstmParams,
        action: Option<ActionFuseParams>,
    },
}

impl LayerParams {
    pub fn ids(&self) -> Vec<ParamId> {
        match self {
            LayerParams::ConvLstm(p) => p.ids(),
            LayerParams::MFlow(p) => p.ids(),
            LayerParams::StLstm { cell, action } => {
                let mut v = cell.ids();
                if let Some(a) = action {
                    v.extend(a.ids());
                }
                v
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct Model<T = f32> {
    pub cfg: NetworkConfig,
    pub store: ParamStore<T>,
    pub layers: Vec<LayerParams>,
    /// `[J·p², hidden, 1, 1]` readout from the top hidden state.
    pub head_w: ParamId,
    pub head_b: ParamId,
    /// Present for ST-LSTM variants until stripped for inference.
    pub decouple: Option<DecoupleParams>,
}

/// Allocates every parameter; deterministic given the rng state. Parameter
/// names are stable and used as checkpoint keys.
pub fn init_model<T: Scalar>(cfg: &NetworkConfig, rng: &mut Rng) -> Result<Model<T>> {
    cfg.validate()?;
    let mut store = ParamStore::new();
    let mut layers = Vec::with_capacity(cfg.num_layers);
    for l in 1..=cfg.num_layers {
        let d = cfg.cell_dims(l);
        let prefix = format!("layer{l}");
        layers.push(match cfg.variant {
            Variant::ConvLstmStack => {
                LayerParams::ConvLstm(ConvLstmParams::init(&mut store, rng, &prefix, &d)?)
            }
            Variant::MFlow => LayerParams::MFlow(MFlowParams::init(&mut store, rng, &prefix, &d, l)?),
            Variant::StLstm | Variant::StLstmAction => {
                let cell = StLstmParams::init(&mut store, rng, &prefix, &d)?;
                let action = if cfg.variant == Variant::StLstmAction {
                    let p = format!("{prefix}.action");
                    Some(ActionFuseParams::init(&mut store, rng, &p, &d, cfg.action_dim)?)
                } else {
                    None
                };
                LayerParams::StLstm { cell, action }
            }
        });
    }
    let out = cfg.patched_channels();
    let bound = (1.0 / cfg.hidden as f64).sqrt();
    let head = Tensor::from_fn(&[out, cfg.hidden, 1, 1], |_| {
        T::lit(rng.uniform_range(-bound, bound))
    })?;
    let head_w = store.add("head.w", head);
    let head_b = store.add("head.b", Tensor::zeros(&[out])?);
    let decouple = if cfg.variant.uses_decoupling() {
        Some(DecoupleParams::init(&mut store, rng, cfg.hidden)?)
    } else {
        None
    };
    Ok(Model {
        cfg: cfg.clone(),
        store,
        layers,
        head_w,
        head_b,
        decouple,
    })
}

impl<T: Scalar> Model<T> {
    pub fn param_count(&self) -> usize {
        self.store.num_elements()
    }

    /// Same model with parameters converted to another precision.
    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            cfg: self.cfg.clone(),
            store: self.store.cast(),
            layers: self.layers.clone(),
            head_w: self.head_w,
            head_b: self.head_b,
            decouple: self.decouple.clone(),
        }
    }
}

/// Recurrent state of the whole stack for a batch. Entries are tape handles.
#[derive(Clone, Debug)]
pub struct NetworkState {
    /// `H^l`, one per layer.
    pub h: Vec<Var>,
    /// `C^l`, one per layer; empty for the memory-flow variant.
    pub c: Vec<Var>,
    /// Zigzag memory leaving the top layer; absent for the ConvLSTM stack.
    pub m: Option<Var>,
}

pub fn zero_state<T: Scalar>(tape: &mut Tape<T>, cfg: &NetworkConfig, batch: usize) -> Result<NetworkState> {
    let (h, w) = cfg.latent_size();
    let z = tape.zeros(&[batch, cfg.hidden, h, w])?;
    let l = cfg.num_layers;
    Ok(NetworkState {
        h: vec![z; l],
        c: if cfg.variant.has_layer_memory() { vec![z; l] } else { Vec::new() },
        m: cfg.variant.has_zigzag_memory().then_some(z),
    })
}

pub struct StepOut {
    pub state: NetworkState,
    /// Predicted next frame `[N, J, H, W]`, unclamped.
    pub x_hat: Var,
    /// One cache per layer, bottom first.
    pub caches: Vec<GateCache>,
}

/// Advances the stack by one timestep on `input` (`[N, J, H, W]`).
pub fn step<T: Scalar>(
    tape: &mut Tape<T>,
    model: &Model<T>,
    input: Var,
    state: &NetworkState,
    action: Option<&Tensor<T>>,
) -> Result<StepOut> {
    let cfg = &model.cfg;
    match (cfg.variant == Variant::StLstmAction, action.is_some()) {
        (false, true) => {
            return Err(Error::Contract(format!("variant {} takes no actions", cfg.variant)))
        }
        (true, false) => return Err(Error::Contract("action variant needs an action".into())),
        _ => {}
    }
    let [_, j, fh, fw] = tape.value(input).nchw()?;
    if (j, fh, fw) != (cfg.channels, cfg.height, cfg.width) {
        return shape_err(format!(
            "frame {:?} does not match config {}x{}x{}",
            tape.value(input).shape(),
            cfg.channels,
            cfg.height,
            cfg.width
        ));
    }
    let x = tape.patchify(input, cfg.patch)?;
    let store = &model.store;
    let n_layers = cfg.num_layers;
    let mut h_new: Vec<Var> = Vec::with_capacity(n_layers);
    let mut c_new: Vec<Var> = Vec::with_capacity(n_layers);
    let mut m = state.m;
    let mut caches = Vec::with_capacity(n_layers);

    for (idx, layer) in model.layers.iter().enumerate() {
        let below = if idx == 0 { x } else { h_new[idx - 1] };
        match layer {
            LayerParams::ConvLstm(p) => {
                let o = convlstm_step(tape, store, p, below, state.h[idx], state.c[idx])?;
                h_new.push(o.h);
                c_new.push(o.c);
                caches.push(o.cache);
            }
            LayerParams::MFlow(p) => {
                let m_below = m.expect("memory-flow state carries M");
                let o = if idx == 0 {
                    // the bottom layer reads the top layer's previous outputs
                    mflow_step(tape, store, p, Some(x), state.h[n_layers - 1], m_below, 1)?
                } else {
                    mflow_step(tape, store, p, None, below, m_below, idx + 1)?
                };
                h_new.push(o.h);
                m = Some(o.m);
                caches.push(o.cache);
            }
            LayerParams::StLstm { cell, action: fuse } => {
                let h_prev = match (fuse, action) {
                    (Some(f), Some(a)) => action_fuse(tape, store, f, state.h[idx], a)?,
                    _ => state.h[idx],
                };
                let m_below = m.expect("ST-LSTM state carries M");
                let o = stlstm_step(tape, store, cell, below, h_prev, state.c[idx], m_below)?;
                h_new.push(o.h);
                c_new.push(o.c);
                m = Some(o.m);
                caches.push(o.cache);
            }
        }
    }
    let top = *h_new.last().expect("at least one layer");
    let (w, b) = (tape.param(store, model.head_w)?, tape.param(store, model.head_b)?);
    let y = tape.conv2d(top, w, Some(b))?;
    let x_hat = tape.unpatchify(y, cfg.patch)?;
    Ok(StepOut {
        state: NetworkState { h: h_new, c: c_new, m },
        x_hat,
        caches,
    })
}

/// A batch of sequences: `frames[t]` is `[N, J, H, W]` for timestep `t+1`;
/// `actions[t]` is `[N, d_a]`, the action applied between frames `t+1` and
/// `t+2`.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameSequence<T = f32> {
    pub frames: Vec<Tensor<T>>,
    pub actions: Option<Vec<Tensor<T>>>,
}

impl<T: Scalar> FrameSequence<T> {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn batch(&self) -> Result<usize> {
        let f = self
            .frames
            .first()
            .ok_or_else(|| Error::Contract("empty frame sequence".into()))?;
        Ok(f.nchw()?[0])
    }

    pub fn cast<U: Scalar>(&self) -> FrameSequence<U> {
        FrameSequence {
            frames: self.frames.iter().map(Tensor::cast).collect(),
            actions: self.actions.as_ref().map(|a| a.iter().map(Tensor::cast).collect()),
        }
    }
}

pub struct RolloutOut {
    /// `predictions[i]` estimates frame `X_{i+2}` (raw, unclamped).
    pub predictions: Vec<Var>,
    /// Frames `X_1 .. X_{T+K}` as loaded on the tape.
    pub targets: Vec<Var>,
    /// `caches[i][l]` for input position `i+1` and layer `l+1`.
    pub caches: Vec<Vec<GateCache>>,
    /// Bottom-layer hidden state `H^1_t` for `t = 1 .. T+K-1`.
    pub bottom_hidden: Vec<Var>,
}

/// Runs the stack over input positions `1 ..= T+K-1`. At each position the
/// input is the true frame where `mask` is set, else the previous prediction
/// (gradients flow through fed-back predictions).
pub fn rollout<T: Scalar>(
    tape: &mut Tape<T>,
    model: &Model<T>,
    seq: &FrameSequence<T>,
    t_in: usize,
    k_out: usize,
    mask: &SamplingMask,
) -> Result<RolloutOut> {
    let total = t_in + k_out;
    if t_in < 1 || k_out < 1 {
        return Err(Error::Contract(format!("need T, K >= 1, got T = {t_in}, K = {k_out}")));
    }
    if seq.len() < total {
        return Err(Error::Contract(format!(
            "sequence has {} frames, rollout needs T+K = {total}",
            seq.len()
        )));
    }
    let batch = seq.batch()?;
    if mask.positions() != total - 1 || mask.batch() != batch {
        return Err(Error::Contract(format!(
            "mask covers {} positions x {} sequences, expected {} x {batch}",
            mask.positions(),
            mask.batch(),
            total - 1
        )));
    }
    let actions = match (model.cfg.variant, &seq.actions) {
        (Variant::StLstmAction, Some(a)) if a.len() >= total - 1 => Some(a),
        (Variant::StLstmAction, _) => {
            return Err(Error::Contract(format!("action variant needs {} actions", total - 1)))
        }
        _ => None,
    };

    let targets: Vec<Var> = seq.frames[..total]
        .iter()
        .map(|f| tape.constant(f.clone()))
        .collect();
    let mut state = zero_state(tape, &model.cfg, batch)?;
    let mut out = RolloutOut {
        predictions: Vec::with_capacity(total - 1),
        targets,
        caches: Vec::with_capacity(total - 1),
        bottom_hidden: Vec::with_capacity(total - 1),
    };
    for pos in 1..total {
        let truth = out.targets[pos - 1];
        let input = match out.predictions.last() {
            None => truth,
            Some(&pred) => {
                let col = mask.column(pos);
                if col.iter().all(|&b| b) {
                    truth
                } else if col.iter().all(|&b| !b) {
                    pred
                } else {
                    tape.blend_batch(col, truth, pred)?
                }
            }
        };
        let action = actions.map(|a| &a[pos - 1]);
        let s = step(tape, model, input, &state, action)?;
        out.bottom_hidden.push(s.state.h[0]);
        out.predictions.push(s.x_hat);
        out.caches.push(s.caches);
        state = s.state;
    }
    Ok(out)
}

/// `Σ_t ‖x̂_t − X_t‖²` over `t = 2 ..= T+K`, summed over the batch.
pub fn reconstruction_loss<T: Scalar>(tape: &mut Tape<T>, r: &RolloutOut) -> Result<Var> {
    let mut total: Option<Var> = None;
    for (i, &pred) in r.predictions.iter().enumerate() {
        let l = tape.mse_sum(pred, r.targets[i + 1])?;
        total = Some(match total {
            Some(t) => tape.add(t, l)?,
            None => l,
        });
    }
    total.ok_or_else(|| Error::Contract("rollout produced no predictions".into()))
}

/// Decoupling penalty summed over every position, layer and channel of a
/// rollout (and over the batch). `None` for variants without dual memories
/// or after the projection was stripped.
pub fn decoupling_loss<T: Scalar>(
    tape: &mut Tape<T>,
    model: &Model<T>,
    r: &RolloutOut,
) -> Result<Option<Var>> {
    let Some(p) = &model.decouple else {
        return Ok(None);
    };
    let mut total: Option<Var> = None;
    for cache in r.caches.iter().flatten() {
        let (dc, dm) = project_increments(tape, &model.store, p, cache)?;
        let l = decouple_loss(tape, dc, dm, T::lit(DECOUPLE_EPS))?;
        total = Some(match total {
            Some(t) => tape.add(t, l)?,
            None => l,
        });
    }
    Ok(total)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ProbeMode {
    /// `‖∇_{H^1_t} L_{T+K}‖` for every input position `t = 1 ..= T+K-1`.
    LastLoss,
    /// For each forecast frame `t = T+1 ..= T+K`, the encoder-averaged
    /// `(1/(T-1)) Σ_{τ=2..T} ‖∇_{H^1_τ} L_t‖`.
    Accumulated,
}

impl FromStr for ProbeMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "last_loss" | "last" => Ok(ProbeMode::LastLoss),
            "accumulated" => Ok(ProbeMode::Accumulated),
            _ => Err(Error::Config(format!("unknown probe mode '{s}'"))),
        }
    }
}

/// L2 norm of `∂loss/∂h` for each `h`, computed per sequence of the batch and
/// averaged over the batch. States the loss does not reach get 0.
pub fn hidden_gradient_norms<T: Scalar>(
    tape: &mut Tape<T>,
    loss: Var,
    hidden: &[Var],
) -> Result<Vec<f64>> {
    tape.compute_adjoints(loss)?;
    hidden
        .iter()
        .map(|&h| {
            let Some(g) = tape.grad(h) else { return Ok(0.0) };
            let [n, ..] = g.nchw()?;
            let per = g.numel() / n;
            let mut acc = 0.0;
            for chunk in g.data().chunks(per) {
                acc += chunk
                    .iter()
                    .map(|v| v.to_f64().unwrap_or(f64::NAN).powi(2))
                    .sum::<f64>()
                    .sqrt();
            }
            Ok(acc / n as f64)
        })
        .collect()
}

fn normalize_by_max(mut v: Vec<f64>) -> Vec<f64> {
    let max = v.iter().copied().fold(0.0, f64::max);
    if max > 0.0 {
        v.iter_mut().for_each(|x| *x /= max);
    }
    v
}

/// Normalized (max = 1) gradient norms of the prediction loss with respect to
/// the bottom-layer hidden states, under the inference input pattern (true
/// frames up to `T`, own predictions afterwards). All zeros if no gradient
/// reaches any state.
pub fn encoder_gradient_probe<T: Scalar>(
    model: &Model<T>,
    seq: &FrameSequence<T>,
    t_in: usize,
    k_out: usize,
    mode: ProbeMode,
) -> Result<Vec<f64>> {
    if t_in + k_out < 2 {
        return Err(Error::Contract("probe needs T+K >= 2".into()));
    }
    if mode == ProbeMode::Accumulated && t_in < 2 {
        return Err(Error::Contract("accumulated probe needs T >= 2".into()));
    }
    let mut tape = Tape::new();
    let mask = SamplingMask::inference(seq.batch()?, t_in, k_out)?;
    let r = rollout(&mut tape, model, seq, t_in, k_out, &mask)?;
    let raw = match mode {
        ProbeMode::LastLoss => {
            let last = r.predictions.len() - 1;
            let loss = tape.mse_sum(r.predictions[last], r.targets[last + 1])?;
            hidden_gradient_norms(&mut tape, loss, &r.bottom_hidden)?
        }
        ProbeMode::Accumulated => {
            let encoder = &r.bottom_hidden[1..t_in];
            let mut curve = Vec::with_capacity(k_out);
            for t in t_in + 1..=t_in + k_out {
                let loss = tape.mse_sum(r.predictions[t - 2], r.targets[t - 1])?;
                let norms = hidden_gradient_norms(&mut tape, loss, encoder)?;
                curve.push(norms.iter().sum::<f64>() / (t_in - 1) as f64);
            }
            curve
        }
    };
    Ok(normalize_by_max(raw))
}

#[cfg(test)]
mod tests;
