//! Synthetic bouncing-sprite video and the raw dataset file format.

use std::fmt;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::network::FrameSequence;
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SpriteStyle {
    /// Seven-segment digit, one random digit per sprite.
    DigitGlyph,
    /// Filled square.
    Block,
    /// Diagonal cross.
    Cross,
}

impl FromStr for SpriteStyle {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "digit_glyph" | "digit" => Ok(SpriteStyle::DigitGlyph),
            "block" => Ok(SpriteStyle::Block),
            "cross" => Ok(SpriteStyle::Cross),
            _ => Err(Error::Config(format!("unknown sprite style '{s}'"))),
        }
    }
}

impl fmt::Display for SpriteStyle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SpriteStyle::DigitGlyph => "digit_glyph",
            SpriteStyle::Block => "block",
            SpriteStyle::Cross => "cross",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetConfig {
    pub num_sprites: usize,
    pub height: usize,
    pub width: usize,
    pub sprite_size: usize,
    /// Speed range in pixels per step.
    pub speed_min: f64,
    pub speed_max: f64,
    /// Frames per sequence (`T+K`).
    pub seq_len: usize,
    pub style: SpriteStyle,
    /// Largest per-axis velocity change commanded per step. Zero disables
    /// actions; otherwise each step draws a 2-vector uniformly in
    /// `[-action_scale, action_scale]²`, adds it to every sprite's velocity
    /// (speed clamped to the configured range) and records it.
    pub action_scale: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            num_sprites: 2,
            height: 64,
            width: 64,
            sprite_size: 16,
            speed_min: 2.0,
            speed_max: 4.0,
            seq_len: 20,
            style: SpriteStyle::DigitGlyph,
            action_scale: 0.0,
        }
    }
}

/// Length of the action vectors of action-mode datasets.
pub const ACTION_DIM: usize = 2;

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.num_sprites == 0 || self.seq_len == 0 {
            return bad("num_sprites and seq_len must be positive".into());
        }
        if self.sprite_size == 0 || self.sprite_size > self.height.min(self.width) {
            return bad(format!(
                "sprite size {} does not fit a {}x{} canvas",
                self.sprite_size, self.height, self.width
            ));
        }
        if !(self.speed_min > 0.0 && self.speed_min <= self.speed_max && self.speed_max.is_finite()) {
            return bad(format!(
                "speed range [{}, {}] must be positive and ordered",
                self.speed_min, self.speed_max
            ));
        }
        if !(self.action_scale >= 0.0 && self.action_scale.is_finite()) {
            return bad(format!("action_scale {} must be >= 0", self.action_scale));
        }
        Ok(())
    }

    pub fn has_actions(&self) -> bool {
        self.action_scale > 0.0
    }
}

/// Glyph bitmap `s × s`, row-major, values in {0, 1}.
pub fn glyph(style: SpriteStyle, s: usize, digit: usize) -> Vec<f32> {
    let mut b = vec![0.0f32; s * s];
    let t = (s / 8).max(1);
    let mut fill = |y0: usize, y1: usize, x0: usize, x1: usize| {
        for y in y0..=y1.min(s - 1) {
            for x in x0..=x1.min(s - 1) {
                b[y * s + x] = 1.0;
            }
        }
    };
    match style {
        SpriteStyle::Block => fill(0, s - 1, 0, s - 1),
        SpriteStyle::Cross => {
            for y in 0..s {
                for x in 0..s {
                    let d1 = y.abs_diff(x);
                    let d2 = (y + x).abs_diff(s - 1);
                    if d1 < t || d2 < t {
                        fill(y, y, x, x);
                    }
                }
            }
        }
        SpriteStyle::DigitGlyph => {
            // segments: top, top-right, bottom-right, bottom, bottom-left, top-left, middle
            const SEGMENTS: [u8; 10] = [
                0b0111111, 0b0000110, 0b1011011, 0b1001111, 0b1100110, 0b1101101, 0b1111101,
                0b0000111, 0b1111111, 0b1101111,
            ];
            let (left, right) = (s / 4, s - 1 - s / 4);
            let (top, bottom) = (s / 8, s - 1 - s / 8);
            let mid = s / 2;
            let on = SEGMENTS[digit % 10];
            let seg = |k: u32| on >> k & 1 == 1;
            if seg(0) {
                fill(top, top + t - 1, left, right);
            }
            if seg(1) {
                fill(top, mid, right + 1 - t, right);
            }
            if seg(2) {
                fill(mid, bottom, right + 1 - t, right);
            }
            if seg(3) {
                fill(bottom + 1 - t, bottom, left, right);
            }
            if seg(4) {
                fill(mid, bottom, left, left + t - 1);
            }
            if seg(5) {
                fill(top, mid, left, left + t - 1);
            }
            if seg(6) {
                fill(mid - t / 2, mid - t / 2 + t - 1, left, right);
            }
        }
    }
    b
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sprite {
    /// Top-left corner in pixels.
    pub x: f64,
    pub y: f64,
    pub vx: f64,
    pub vy: f64,
    pub size: usize,
    pub bitmap: Vec<f32>,
}

/// Mirrors `pos` back into `[0, max]` about whichever wall it crossed,
/// negating `vel` once per crossing.
pub fn reflect(mut pos: f64, mut vel: f64, max: f64) -> (f64, f64) {
    if max <= 0.0 {
        return (0.0, vel);
    }
    loop {
        if pos > max {
            pos = 2.0 * max - pos;
            vel = -vel;
        } else if pos < 0.0 {
            pos = -pos;
            vel = -vel;
        } else {
            return (pos, vel);
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpriteWorld {
    pub height: usize,
    pub width: usize,
    pub sprites: Vec<Sprite>,
}

impl SpriteWorld {
    /// Random sprites: position uniform in the valid box, heading uniform on
    /// the circle, speed uniform in the configured range.
    pub fn random(cfg: &DatasetConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let s = cfg.sprite_size;
        let sprites = (0..cfg.num_sprites)
            .map(|_| {
                let x = rng.uniform_range(0.0, (cfg.width - s) as f64);
                let y = rng.uniform_range(0.0, (cfg.height - s) as f64);
                let theta = rng.uniform_range(0.0, std::f64::consts::TAU);
                let speed = rng.uniform_range(cfg.speed_min, cfg.speed_max);
                let digit = rng.below(10);
                Sprite {
                    x,
                    y,
                    vx: speed * theta.cos(),
                    vy: speed * theta.sin(),
                    size: s,
                    bitmap: glyph(cfg.style, s, digit),
                }
            })
            .collect();
        Ok(SpriteWorld {
            height: cfg.height,
            width: cfg.width,
            sprites,
        })
    }

    /// Moves every sprite one step; both axes reflect independently, so a
    /// corner hit reverses both components in the same step.
    pub fn advance(&mut self) {
        for sp in &mut self.sprites {
            let (x, vx) = reflect(sp.x + sp.vx, sp.vx, (self.width - sp.size) as f64);
            let (y, vy) = reflect(sp.y + sp.vy, sp.vy, (self.height - sp.size) as f64);
            (sp.x, sp.vx, sp.y, sp.vy) = (x, vx, y, vy);
        }
    }

    /// Adds `dv` to every velocity, rescaling speeds into `[lo, hi]`.
    pub fn push(&mut self, dv: [f64; 2], lo: f64, hi: f64) {
        for sp in &mut self.sprites {
            let (vx, vy) = (sp.vx + dv[0], sp.vy + dv[1]);
            let speed = vx.hypot(vy);
            (sp.vx, sp.vy) = if speed > 0.0 {
                let scale = speed.clamp(lo, hi) / speed;
                (vx * scale, vy * scale)
            } else {
                (lo, 0.0)
            };
        }
    }

    /// Per-pixel maximum over sprites placed at their rounded positions.
    pub fn render(&self) -> Vec<f32> {
        let mut canvas = vec![0.0f32; self.height * self.width];
        for sp in &self.sprites {
            let (px, py) = (sp.x.round() as usize, sp.y.round() as usize);
            for r in 0..sp.size {
                for c in 0..sp.size {
                    let v = sp.bitmap[r * sp.size + c];
                    let dst = &mut canvas[(py + r) * self.width + px + c];
                    *dst = dst.max(v);
                }
            }
        }
        canvas
    }
}

/// One sequence as a batch of one.
pub fn gen_sequence(cfg: &DatasetConfig, rng: &mut Rng) -> Result<FrameSequence> {
    let mut world = SpriteWorld::random(cfg, rng)?;
    let plane = cfg.height * cfg.width;
    let mut frames = Vec::with_capacity(cfg.seq_len);
    let mut actions = Vec::new();
    for t in 0..cfg.seq_len {
        if t > 0 {
            if cfg.has_actions() {
                let a = cfg.action_scale;
                let dv = [rng.uniform_range(-a, a), rng.uniform_range(-a, a)];
                world.push(dv, cfg.speed_min, cfg.speed_max);
                actions.push(Tensor::from_vec(&[1, ACTION_DIM], dv.map(|v| v as f32).to_vec())?);
            }
            world.advance();
        }
        let img = world.render();
        debug_assert_eq!(img.len(), plane);
        frames.push(Tensor::from_vec(&[1, 1, cfg.height, cfg.width], img)?);
    }
    Ok(FrameSequence {
        frames,
        actions: cfg.has_actions().then_some(actions),
    })
}

/// `batch` independent sequences stacked along the batch axis.
pub fn gen_batch(cfg: &DatasetConfig, batch: usize, rng: &mut Rng) -> Result<FrameSequence> {
    let seqs = (0..batch)
        .map(|_| gen_sequence(cfg, rng))
        .collect::<Result<Vec<_>>>()?;
    stack_sequences(&seqs)
}

/// Concatenates sequences of equal length along the batch axis.
pub fn stack_sequences(seqs: &[FrameSequence]) -> Result<FrameSequence> {
    let first = seqs
        .first()
        .ok_or_else(|| Error::Contract("nothing to stack".into()))?;
    let len = first.len();
    if seqs.iter().any(|s| s.len() != len || s.actions.is_some() != first.actions.is_some()) {
        return Err(Error::Contract("sequences differ in length or action presence".into()));
    }
    let cat = |pick: &dyn Fn(&FrameSequence) -> &Tensor| -> Result<Tensor> {
        let parts: Vec<Tensor> = seqs.iter().map(|s| pick(s).clone()).collect();
        Tensor::stack_batch(&parts)
    };
    let frames = (0..len)
        .map(|t| cat(&|s: &FrameSequence| &s.frames[t]))
        .collect::<Result<Vec<_>>>()?;
    let actions = match &first.actions {
        Some(a) => Some(
            (0..a.len())
                .map(|t| cat(&|s: &FrameSequence| &s.actions.as_ref().expect("checked")[t]))
                .collect::<Result<Vec<_>>>()?,
        ),
        None => None,
    };
    Ok(FrameSequence { frames, actions })
}

/// Sequence `n` of a batch.
pub fn sequence_item(seq: &FrameSequence, n: usize) -> Result<FrameSequence> {
    Ok(FrameSequence {
        frames: seq.frames.iter().map(|f| f.batch_item(n)).collect::<Result<_>>()?,
        actions: match &seq.actions {
            Some(a) => Some(a.iter().map(|t| t.batch_item(n)).collect::<Result<_>>()?),
            None => None,
        },
    })
}

/// First `T` frames and the following `K`.
pub fn split_context_target(
    seq: &FrameSequence,
    t_in: usize,
    k_out: usize,
) -> Result<(Vec<Tensor>, Vec<Tensor>)> {
    if seq.len() < t_in + k_out {
        return Err(Error::Contract(format!(
            "sequence of {} frames cannot be split into {t_in} + {k_out}",
            seq.len()
        )));
    }
    Ok((
        seq.frames[..t_in].to_vec(),
        seq.frames[t_in..t_in + k_out].to_vec(),
    ))
}

const MAGIC: &[u8; 4] = b"STPD";
const VERSION: u32 = 1;
/// Magic, version and five counts.
pub const HEADER_BYTES: usize = 4 + 4 + 5 * 4;

/// Writes single-sequence batches of identical shape; actions are not stored.
pub fn save_dataset(path: &Path, seqs: &[FrameSequence]) -> Result<()> {
    let first = seqs
        .first()
        .ok_or_else(|| Error::Contract("refusing to write an empty dataset".into()))?;
    let len = first.len();
    let [_, j, h, w] = first
        .frames
        .first()
        .ok_or_else(|| Error::Contract("sequence without frames".into()))?
        .nchw()?;
    let mut out = BufWriter::new(fs::File::create(path)?);
    out.write_all(MAGIC)?;
    for v in [VERSION, seqs.len() as u32, len as u32, j as u32, h as u32, w as u32] {
        out.write_all(&v.to_le_bytes())?;
    }
    for s in seqs {
        if s.len() != len {
            return Err(Error::Contract("sequences differ in length".into()));
        }
        for f in &s.frames {
            if f.dims() != [1, j, h, w] {
                return Err(Error::Shape(format!(
                    "frame {:?} differs from [1, {j}, {h}, {w}]",
                    f.dims()
                )));
            }
            for v in f.data() {
                out.write_all(&v.to_le_bytes())?;
            }
        }
    }
    out.flush()?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<Vec<FrameSequence>> {
    let bytes = fs::read(path)?;
    if bytes.len() < HEADER_BYTES || &bytes[..4] != MAGIC {
        return Err(Error::Format("not a dataset file (bad magic)".into()));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().expect("4 bytes"));
    let version = word(0);
    if version != VERSION {
        return Err(Error::Format(format!("unsupported dataset version {version}")));
    }
    let [num, len, j, h, w] = [1, 2, 3, 4, 5].map(|i| word(i) as usize);
    if num == 0 || len == 0 || j == 0 || h == 0 || w == 0 {
        return Err(Error::Format("dataset header has a zero count".into()));
    }
    let plane = j * h * w;
    let expected = num
        .checked_mul(len)
        .and_then(|v| v.checked_mul(plane))
        .and_then(|v| v.checked_mul(4))
        .and_then(|v| v.checked_add(HEADER_BYTES))
        .ok_or_else(|| Error::Format("dataset header counts overflow".into()))?;
    if bytes.len() != expected {
        return Err(Error::Format(format!(
            "dataset length {} bytes, header implies {expected}",
            bytes.len()
        )));
    }
    let floats: Vec<f32> = bytes[HEADER_BYTES..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    let mut chunks = floats.chunks_exact(plane);
    (0..num)
        .map(|_| {
            let frames = (0..len)
                .map(|_| Tensor::from_vec(&[1, j, h, w], chunks.next().expect("sized above").to_vec()))
                .collect::<Result<_>>()?;
            Ok(FrameSequence {
                frames,
                actions: None,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests;
