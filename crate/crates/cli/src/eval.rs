//! Forecasting under the inference input pattern, scoring, and frame images.

use std::path::{Path, PathBuf};

use image::{GrayImage, ImageFormat, RgbImage};
use stp_core::curriculum::SamplingMask;
use stp_core::data::{sequence_item, stack_sequences};
use stp_core::metrics::MetricReport;
use stp_core::network::{rollout, FrameSequence, Model, Variant};
use stp_core::{Error, Result, Tape, Tensor};

pub const DEFAULT_THRESHOLDS: [f64; 3] = [0.25, 0.5, 0.75];

fn clamp01(t: &Tensor) -> Tensor {
    t.map(|v| v.clamp(0.0, 1.0))
}

/// Predictions for frames `T+1 ..= T+K`, clamped to `[0, 1]`. Only the first
/// `T` frames of `seq` are read; later frames may be placeholders.
pub fn forecast(model: &Model, seq: &FrameSequence, t_in: usize, k_out: usize) -> Result<Vec<Tensor>> {
    let mut tape = Tape::new();
    let mask = SamplingMask::inference(seq.batch()?, t_in, k_out)?;
    let r = rollout(&mut tape, model, seq, t_in, k_out, &mask)?;
    Ok(r.predictions[t_in - 1..]
        .iter()
        .map(|&p| clamp01(tape.value(p)))
        .collect())
}

fn check_compatible(model: &Model, seq: &FrameSequence) -> Result<()> {
    let cfg = &model.cfg;
    let [_, j, h, w] = seq
        .frames
        .first()
        .ok_or_else(|| Error::Contract("empty sequence".into()))?
        .nchw()?;
    if (j, h, w) != (cfg.channels, cfg.height, cfg.width) {
        return Err(Error::Config(format!(
            "data frames are {j}x{h}x{w}, model expects {}x{}x{}",
            cfg.channels, cfg.height, cfg.width
        )));
    }
    if cfg.variant == Variant::StLstmAction && seq.actions.is_none() {
        return Err(Error::Config("the action variant needs data with actions".into()));
    }
    Ok(())
}

/// Splits the batch into consecutive groups of at most `size` sequences; `0`
/// keeps it whole.
pub fn split_batch(seq: &FrameSequence, size: usize) -> Result<Vec<FrameSequence>> {
    let n = seq.batch()?;
    if size == 0 || size >= n {
        return Ok(vec![seq.clone()]);
    }
    let items = (0..n).map(|i| sequence_item(seq, i)).collect::<Result<Vec<_>>>()?;
    items.chunks(size).map(stack_sequences).collect()
}

/// Scores clamped forecasts of every sequence in `seq` against frames
/// `T+1 ..= T+K`; `chunk` bounds how many sequences share one rollout.
pub fn evaluate(
    model: &Model,
    seq: &FrameSequence,
    t_in: usize,
    k_out: usize,
    thresholds: &[f64],
    chunk: usize,
) -> Result<MetricReport> {
    check_compatible(model, seq)?;
    let mut per_step: Vec<Vec<Tensor>> = vec![Vec::new(); k_out];
    for part in split_batch(seq, chunk)? {
        for (t, p) in forecast(model, &part, t_in, k_out)?.into_iter().enumerate() {
            per_step[t].push(p);
        }
    }
    let preds = per_step
        .iter()
        .map(|parts| Tensor::stack_batch(parts))
        .collect::<Result<Vec<_>>>()?;
    MetricReport::compute(&preds, &seq.frames[t_in..t_in + k_out], thresholds)
}

/// Repeats frame `T` for every forecast step.
pub fn copy_last_frame(seq: &FrameSequence, t_in: usize, k_out: usize) -> Result<Vec<Tensor>> {
    let last = seq
        .frames
        .get(t_in - 1)
        .ok_or_else(|| Error::Contract(format!("sequence shorter than T = {t_in}")))?;
    Ok(vec![last.clone(); k_out])
}

pub fn baseline_report(seq: &FrameSequence, t_in: usize, k_out: usize, thresholds: &[f64]) -> Result<MetricReport> {
    if seq.len() < t_in + k_out {
        return Err(Error::Contract(format!("sequence shorter than T+K = {}", t_in + k_out)));
    }
    let preds = copy_last_frame(seq, t_in, k_out)?;
    MetricReport::compute(&preds, &seq.frames[t_in..t_in + k_out], thresholds)
}

fn to_byte(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes a `[1, J, H, W]` frame as binary PGM (`J = 1`) or PPM (`J = 3`).
pub fn write_frame(path: &Path, frame: &Tensor) -> Result<()> {
    let [n, j, h, w] = frame.nchw()?;
    if n != 1 {
        return Err(Error::Shape(format!("expected one frame, got a batch of {n}")));
    }
    let d = frame.data();
    let plane = h * w;
    let res = match j {
        1 => GrayImage::from_raw(w as u32, h as u32, d.iter().map(|&v| to_byte(v)).collect())
            .expect("buffer matches dimensions")
            .save_with_format(path, ImageFormat::Pnm),
        3 => {
            let px = (0..plane)
                .flat_map(|i| (0..3).map(move |c| c * plane + i))
                .map(|i| to_byte(d[i]))
                .collect();
            RgbImage::from_raw(w as u32, h as u32, px)
                .expect("buffer matches dimensions")
                .save_with_format(path, ImageFormat::Pnm)
        }
        _ => return Err(Error::Shape(format!("cannot write {j}-channel frames as images"))),
    };
    res.map_err(|e| Error::Io(format!("{}: {e}", path.display())))
}

/// Reads a PGM or PPM back as a `[1, J, H, W]` frame in `[0, 1]`.
pub fn read_frame(path: &Path) -> Result<Tensor> {
    let img = image::open(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    if img.color().channel_count() == 1 {
        let data = img.to_luma8().into_raw().into_iter().map(|b| b as f32 / 255.0).collect();
        Tensor::from_vec(&[1, 1, h, w], data)
    } else {
        let raw = img.to_rgb8().into_raw();
        let plane = h * w;
        Tensor::from_fn(&[1, 3, h, w], |i| raw[(i % plane) * 3 + i / plane] as f32 / 255.0)
    }
}

/// Parses actions written one per line as whitespace- or comma-separated
/// numbers.
pub fn parse_actions(text: &str, dim: usize) -> Result<Vec<Tensor>> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .enumerate()
        .map(|(n, l)| {
            let v = l
                .split(|c: char| c == ',' || c.is_whitespace())
                .filter(|s| !s.is_empty())
                .map(|s| s.parse::<f32>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|_| Error::Format(format!("action line {}: not a number", n + 1)))?;
            if v.len() != dim {
                return Err(Error::Format(format!(
                    "action line {}: {} values, expected {dim}",
                    n + 1,
                    v.len()
                )));
            }
            Tensor::from_vec(&[1, dim], v)
        })
        .collect()
}

/// Forecasts `horizon` frames after the `context` frames of a single
/// sequence and writes them to `out_dir` as `pred_001.pgm`, … Returns the
/// written paths.
pub fn generate(
    model: &Model,
    context: &[Tensor],
    actions: Option<&[Tensor]>,
    horizon: usize,
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    if context.is_empty() || horizon == 0 {
        return Err(Error::Contract("need at least one context frame and horizon >= 1".into()));
    }
    let t_in = context.len();
    let mut frames = context.to_vec();
    frames.resize(t_in + horizon, Tensor::zeros(context[0].dims())?);
    let needed = t_in + horizon - 1;
    let actions = match (model.cfg.variant, actions) {
        (Variant::StLstmAction, Some(a)) if a.len() >= needed => Some(a[..needed].to_vec()),
        (Variant::StLstmAction, _) => {
            return Err(Error::Contract(format!("the action variant needs {needed} actions")))
        }
        _ => None,
    };
    let seq = FrameSequence { frames, actions };
    check_compatible(model, &seq)?;
    let ext = if model.cfg.channels == 3 { "ppm" } else { "pgm" };
    std::fs::create_dir_all(out_dir)?;
    let mut paths = Vec::with_capacity(horizon);
    for (i, f) in forecast(model, &seq, t_in, horizon)?.iter().enumerate() {
        let p = out_dir.join(format!("pred_{:03}.{ext}", i + 1));
        write_frame(&p, f)?;
        paths.push(p);
    }
    Ok(paths)
}
