//! Decoupling regularizer for the two memory increments of the ST-LSTM, the
//! raw-increment cosine diagnostic, and removal of the projection for
//! inference.

use crate::autodiff::{ParamId, ParamStore, Tape, Var};
use crate::cells::{GateCache, GateValues};
use crate::curriculum::SamplingMask;
use crate::error::{Error, Result};
use crate::network::{rollout, FrameSequence, Model};
use crate::rng::Rng;
use crate::tensor::{Scalar, Tensor};

/// Added to the product of norms in every per-channel cosine.
pub const DECOUPLE_EPS: f64 = 1e-8;

/// Shared `hidden → hidden` 1×1 projection, no bias.
#[derive(Clone, Debug)]
pub struct DecoupleParams {
    pub w: ParamId,
}

pub const DECOUPLE_PARAM: &str = "decouple.w";

impl DecoupleParams {
    pub fn init<T: Scalar>(store: &mut ParamStore<T>, rng: &mut Rng, hidden: usize) -> Result<Self> {
        let bound = (1.0 / hidden as f64).sqrt();
        let w = Tensor::from_fn(&[hidden, hidden, 1, 1], |_| {
            T::lit(rng.uniform_range(-bound, bound))
        })?;
        Ok(DecoupleParams {
            w: store.add(DECOUPLE_PARAM, w),
        })
    }
}

/// Projects both memory increments of `cache` through the shared weights.
pub fn project_increments<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    p: &DecoupleParams,
    cache: &GateCache,
) -> Result<(Var, Var)> {
    let (Some(inc_c), Some(inc_m)) = (cache.inc_c, cache.inc_m) else {
        return Err(Error::Contract("cache lacks one of the two memory increments".into()));
    };
    let w = tape.param(store, p.w)?;
    Ok((tape.conv2d(inc_c, w, None)?, tape.conv2d(inc_m, w, None)?))
}

/// `Σ_c |⟨a, b⟩_c| / (‖a‖_c ‖b‖_c + eps)` with spatial inner products per
/// channel, also summed over the batch.
pub fn decouple_loss<T: Scalar>(tape: &mut Tape<T>, dc: Var, dm: Var, eps: T) -> Result<Var> {
    tape.decouple_loss(dc, dm, eps)
}

/// Mean over steps, layers, sequences and channels of the absolute cosine
/// between the raw increments `i ⊙ g` and `i' ⊙ g'`. A channel where either
/// increment is identically zero counts as 0.
pub fn increment_cosine<T: Scalar>(caches: &[GateValues<T>]) -> Result<f64> {
    let (mut sum, mut count) = (0.0f64, 0usize);
    for c in caches {
        let (Some(a), Some(b)) = (&c.inc_c, &c.inc_m) else {
            return Err(Error::Contract("cache lacks one of the two memory increments".into()));
        };
        if a.dims() != b.dims() {
            return Err(Error::Shape(format!("{:?} vs {:?}", a.dims(), b.dims())));
        }
        let [_, _, h, w] = a.nchw()?;
        for (pa, pb) in a.data().chunks(h * w).zip(b.data().chunks(h * w)) {
            let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
            for (&x, &y) in pa.iter().zip(pb) {
                let (x, y) = (x.to_f64().unwrap_or(0.0), y.to_f64().unwrap_or(0.0));
                dot += x * y;
                na += x * x;
                nb += y * y;
            }
            let denom = (na * nb).sqrt();
            sum += if denom > 0.0 { dot.abs() / denom } else { 0.0 };
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::Contract("no increments to compare".into()));
    }
    Ok(sum / count as f64)
}

/// [`increment_cosine`] over a pass of `seq` through `model` with true frames
/// up to `T` and own predictions afterwards.
pub fn mean_abs_cosine<T: Scalar>(
    model: &Model<T>,
    seq: &FrameSequence<T>,
    t_in: usize,
    k_out: usize,
) -> Result<f64> {
    if seq.is_empty() {
        return Err(Error::Contract("empty sample".into()));
    }
    let mut tape = Tape::new();
    let mask = SamplingMask::inference(seq.batch()?, t_in, k_out)?;
    let r = rollout(&mut tape, model, seq, t_in, k_out, &mask)?;
    let values: Vec<GateValues<T>> = r
        .caches
        .iter()
        .flatten()
        .map(|c| c.snapshot(&tape))
        .collect();
    increment_cosine(&values)
}

/// Drops the decoupling projection, which only feeds the training loss.
pub fn strip_training_params<T: Scalar>(mut model: Model<T>) -> Model<T> {
    if let Some(p) = model.decouple.take() {
        model.store.remove(p.w);
    }
    model
}
