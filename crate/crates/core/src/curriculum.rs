//! Scheduled-sampling curricula: the encoder-side reverse schedule ε_k, the
//! forecaster-side decay η_k, and per-sequence Bernoulli input masks.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RssMode {
    Linear,
    Exponential,
    Sigmoid,
}

impl FromStr for RssMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(RssMode::Linear),
            "exponential" | "exp" => Ok(RssMode::Exponential),
            "sigmoid" => Ok(RssMode::Sigmoid),
            _ => Err(Error::Config(format!("unknown schedule mode '{s}'"))),
        }
    }
}

impl fmt::Display for RssMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RssMode::Linear => "linear",
            RssMode::Exponential => "exponential",
            RssMode::Sigmoid => "sigmoid",
        })
    }
}

/// Probability of feeding the true frame at encoder positions, rising from
/// `eps_start` towards `eps_end` as training proceeds.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RssSchedule {
    pub mode: RssMode,
    pub eps_start: f64,
    pub eps_end: f64,
    /// Linear slope per iteration.
    pub alpha_l: f64,
    /// Exponential time constant in iterations.
    pub alpha_e: f64,
    /// Sigmoid width in iterations.
    pub alpha_s: f64,
    /// Sigmoid midpoint in iterations.
    pub beta_s: f64,
}

impl RssSchedule {
    /// Schedule whose curve saturates near `eps_end` at half of `iters`:
    /// the linear ramp and the sigmoid tail reach it there, and the
    /// exponential is within 1 % of it.
    pub fn for_budget(mode: RssMode, eps_start: f64, eps_end: f64, iters: u64) -> Result<Self> {
        let half = (iters.max(2) / 2) as f64;
        let gap = eps_end - eps_start;
        let ratio = gap / (0.01 * eps_end);
        let s = RssSchedule {
            mode,
            eps_start,
            eps_end,
            alpha_l: if gap > 0.0 { gap / half } else { 1.0 },
            alpha_e: if ratio > 1.0 { half / ratio.ln() } else { 1.0 },
            alpha_s: half / 20.0,
            beta_s: half / 2.0,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        let unit = 0.0..=1.0;
        if !unit.contains(&self.eps_start) || !unit.contains(&self.eps_end) {
            return Err(Error::Config(format!(
                "eps_start {} and eps_end {} must lie in [0, 1]",
                self.eps_start, self.eps_end
            )));
        }
        if self.eps_start > self.eps_end {
            return Err(Error::Config("eps_start must not exceed eps_end".into()));
        }
        for (name, v) in [
            ("alpha_l", self.alpha_l),
            ("alpha_e", self.alpha_e),
            ("alpha_s", self.alpha_s),
            ("beta_s", self.beta_s),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Config(format!("{name} = {v} must be positive")));
            }
        }
        Ok(())
    }
}

pub fn epsilon_at(s: &RssSchedule, k: u64) -> f64 {
    let k = k as f64;
    let (es, ee) = (s.eps_start, s.eps_end);
    match s.mode {
        RssMode::Linear => (es + s.alpha_l * k).min(ee),
        RssMode::Exponential => es + (ee - es) * -(-k / s.alpha_e).exp_m1(),
        RssMode::Sigmoid => es + (ee - es) / (1.0 + ((s.beta_s - k) / s.alpha_s).exp()),
    }
}

/// Linearly decaying probability of feeding the true frame at forecaster
/// positions.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SsSchedule {
    pub eta_start: f64,
    /// Decrease per iteration.
    pub rate: f64,
    pub floor: f64,
}

impl SsSchedule {
    /// Reaches the floor (zero) after `decay_fraction` of the budget.
    pub fn for_budget(iters: u64, decay_fraction: f64) -> Self {
        let span = (iters as f64 * decay_fraction).max(1.0);
        SsSchedule {
            eta_start: 1.0,
            rate: 1.0 / span,
            floor: 0.0,
        }
    }
}

pub fn eta_at(s: &SsSchedule, k: u64) -> f64 {
    (s.eta_start - s.rate * k as f64).max(s.floor)
}

/// How the encoder positions are sampled. The two reverse-sampling
/// strategies share code and differ only in their `eps_start` preset.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Strategy {
    /// Encoder always sees true frames.
    Standard,
    /// Reverse sampling starting from `eps_start = 0`.
    Rss1,
    /// Reverse sampling starting from `eps_start = 0.5`.
    Rss2,
}

impl Strategy {
    /// `(eps_start, eps_end)` preset.
    pub fn preset(self) -> (f64, f64) {
        match self {
            Strategy::Standard => (1.0, 1.0),
            Strategy::Rss1 => (0.0, 1.0),
            Strategy::Rss2 => (0.5, 1.0),
        }
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "standard" | "ss" => Ok(Strategy::Standard),
            "rss1" | "rss_1" => Ok(Strategy::Rss1),
            "rss2" | "rss_2" => Ok(Strategy::Rss2),
            _ => Err(Error::Config(format!("unknown sampling strategy '{s}'"))),
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Strategy::Standard => "standard",
            Strategy::Rss1 => "rss1",
            Strategy::Rss2 => "rss2",
        })
    }
}

/// Per-sequence choice between the true frame and the model's own previous
/// prediction at each input position `1 ..= T+K-1`. Position 1 is always the
/// true frame.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SamplingMask {
    batch: usize,
    positions: usize,
    /// Position-major: `bits[(pos - 1) * batch + n]`.
    bits: Vec<bool>,
}

impl SamplingMask {
    /// `f(position, sequence)` for positions `2..=positions`.
    pub fn from_fn(
        batch: usize,
        positions: usize,
        mut f: impl FnMut(usize, usize) -> bool,
    ) -> Result<Self> {
        if batch == 0 || positions == 0 {
            return Err(Error::Contract("mask needs at least one sequence and position".into()));
        }
        let mut bits = vec![true; batch * positions];
        for pos in 2..=positions {
            for n in 0..batch {
                bits[(pos - 1) * batch + n] = f(pos, n);
            }
        }
        Ok(SamplingMask {
            batch,
            positions,
            bits,
        })
    }

    pub fn all_true(batch: usize, positions: usize) -> Result<Self> {
        Self::from_fn(batch, positions, |_, _| true)
    }

    /// True frames through position `t_in`, own predictions afterwards.
    pub fn inference(batch: usize, t_in: usize, k_out: usize) -> Result<Self> {
        Self::from_fn(batch, t_in + k_out - 1, |pos, _| pos <= t_in)
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn positions(&self) -> usize {
        self.positions
    }

    /// Decisions for every sequence at 1-based `pos`.
    pub fn column(&self, pos: usize) -> &[bool] {
        assert!((1..=self.positions).contains(&pos), "position {pos} out of range");
        &self.bits[(pos - 1) * self.batch..pos * self.batch]
    }

    pub fn get(&self, pos: usize, n: usize) -> bool {
        self.column(pos)[n]
    }
}

/// Draws a mask over `T+K-1` positions for `batch` sequences: encoder
/// positions `2..=T` are true with probability `eps` (always true under
/// [`Strategy::Standard`]), forecaster positions `T+1..=T+K-1` with
/// probability `eta`.
pub fn draw_mask(
    eps: f64,
    eta: f64,
    t_in: usize,
    k_out: usize,
    batch: usize,
    strategy: Strategy,
    rng: &mut Rng,
) -> Result<SamplingMask> {
    for (name, p) in [("epsilon", eps), ("eta", eta)] {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::Contract(format!("{name} = {p} outside [0, 1]")));
        }
    }
    if t_in < 2 || k_out < 1 {
        return Err(Error::Contract(format!(
            "need T >= 2 and K >= 1, got T = {t_in}, K = {k_out}"
        )));
    }
    SamplingMask::from_fn(batch, t_in + k_out - 1, |pos, _| {
        if pos <= t_in {
            strategy == Strategy::Standard || rng.bernoulli(eps)
        } else {
            rng.bernoulli(eta)
        }
    })
}

/// A complete training curriculum: strategy plus both schedules.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Curriculum {
    pub strategy: Strategy,
    pub rss: RssSchedule,
    pub ss: SsSchedule,
}

impl Curriculum {
    /// `(ε_k, η_k)`; ε is reported as 1 under the standard strategy.
    pub fn probabilities(&self, k: u64) -> (f64, f64) {
        let eps = match self.strategy {
            Strategy::Standard => 1.0,
            _ => epsilon_at(&self.rss, k),
        };
        (eps, eta_at(&self.ss, k))
    }

    pub fn mask_at(
        &self,
        k: u64,
        t_in: usize,
        k_out: usize,
        batch: usize,
        rng: &mut Rng,
    ) -> Result<SamplingMask> {
        let (eps, eta) = self.probabilities(k);
        draw_mask(eps, eta, t_in, k_out, batch, self.strategy, rng)
    }
}
