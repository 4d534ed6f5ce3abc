//! Model diagnostics written as small CSV tables.

use std::fmt::Write as _;
use std::str::FromStr;

use stp_core::cells::{forget_saturation, GateValues};
use stp_core::curriculum::SamplingMask;
use stp_core::decoupling::mean_abs_cosine;
use stp_core::network::{encoder_gradient_probe, rollout, FrameSequence, Model, ProbeMode};
use stp_core::{Error, Result, Tape};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Probe {
    Gradients,
    Saturation,
    Cosine,
}

impl FromStr for Probe {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gradients" => Ok(Probe::Gradients),
            "saturation" => Ok(Probe::Saturation),
            "cosine" => Ok(Probe::Cosine),
            _ => Err(Error::Config(format!("unknown probe '{s}'"))),
        }
    }
}

/// Normalized bottom-layer gradient norms: `position,norm` rows for
/// last-loss mode, `t,norm` over forecast frames for accumulated mode.
pub fn gradient_csv(model: &Model, seq: &FrameSequence, t_in: usize, k_out: usize, mode: ProbeMode) -> Result<String> {
    let v = encoder_gradient_probe(model, seq, t_in, k_out, mode)?;
    let (head, first) = match mode {
        ProbeMode::LastLoss => ("position", 1),
        ProbeMode::Accumulated => ("t", t_in + 1),
    };
    let mut s = format!("{head},norm\n");
    for (i, x) in v.iter().enumerate() {
        let _ = writeln!(s, "{},{x}", first + i);
    }
    Ok(s)
}

/// Fraction of forget-gate activations below `threshold` over an inference
/// pass, one row per gate family present in the model.
pub fn saturation_csv(model: &Model, seq: &FrameSequence, t_in: usize, k_out: usize, threshold: f64) -> Result<String> {
    let mut tape = Tape::new();
    let mask = SamplingMask::inference(seq.batch()?, t_in, k_out)?;
    let r = rollout(&mut tape, model, seq, t_in, k_out, &mask)?;
    let values: Vec<GateValues> = r.caches.iter().flatten().map(|c| c.snapshot(&tape)).collect();
    let sat = forget_saturation(&values, threshold)?;
    let mut s = String::from("gate,fraction_below\n");
    for (name, v) in [("forget_c", sat.forget_c), ("forget_m", sat.forget_m)] {
        if let Some(v) = v {
            let _ = writeln!(s, "{name},{v}");
        }
    }
    Ok(s)
}

pub fn cosine_csv(model: &Model, seq: &FrameSequence, t_in: usize, k_out: usize) -> Result<String> {
    let c = mean_abs_cosine(model, seq, t_in, k_out)?;
    Ok(format!("metric,value\nmean_abs_cosine,{c}\n"))
}
