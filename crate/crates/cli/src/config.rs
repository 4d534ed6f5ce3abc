//! Training configuration and its flat `key = value` text form.
//!
//! Every key is also a command-line flag of the same name; flags are applied
//! after the file, so they win.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use stp_core::curriculum::{Curriculum, RssMode, RssSchedule, SsSchedule, Strategy};
use stp_core::data::{DatasetConfig, SpriteStyle, ACTION_DIM};
use stp_core::network::{NetworkConfig, Variant};
use stp_core::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub variant: Variant,
    pub layers: usize,
    /// Hidden channels per layer.
    pub channels: usize,
    pub kernel: usize,
    pub patch: usize,
    pub t_in: usize,
    pub k_out: usize,
    pub batch: usize,
    pub iters: u64,
    pub lr: f64,
    /// Global gradient-norm bound; 0 disables clipping.
    pub clip: f64,
    pub lambda_dec: f64,
    pub seed: u64,
    pub rss_strategy: Strategy,
    pub rss_mode: RssMode,
    /// Strategy preset when unset.
    pub eps_start: Option<f64>,
    pub eps_end: Option<f64>,
    /// Budget-derived when unset.
    pub alpha_l: Option<f64>,
    pub alpha_e: Option<f64>,
    pub alpha_s: Option<f64>,
    pub beta_s: Option<f64>,
    /// Fraction of the budget over which η falls from 1 to 0.
    pub ss_decay: f64,
    /// Fixed dataset file; synthetic streaming data when unset.
    pub data: Option<PathBuf>,
    pub height: usize,
    pub width: usize,
    pub sprites: usize,
    pub sprite_size: usize,
    pub speed_min: f64,
    pub speed_max: f64,
    pub style: SpriteStyle,
    pub action_scale: f64,
    pub out: Option<PathBuf>,
    /// Iterations between held-out evaluations and checkpoints; 0 disables.
    pub eval_interval: u64,
    pub eval_size: usize,
    pub eval_seed: u64,
    /// Sequences written by `gen-data`.
    pub num_sequences: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            variant: Variant::StLstm,
            layers: 2,
            channels: 16,
            kernel: 3,
            patch: 4,
            t_in: 10,
            k_out: 10,
            batch: 8,
            iters: 3000,
            lr: 1e-3,
            clip: 1.0,
            lambda_dec: 1.0,
            seed: 0,
            rss_strategy: Strategy::Standard,
            rss_mode: RssMode::Exponential,
            eps_start: None,
            eps_end: None,
            alpha_l: None,
            alpha_e: None,
            alpha_s: None,
            beta_s: None,
            ss_decay: 0.625,
            data: None,
            height: 32,
            width: 32,
            sprites: 2,
            sprite_size: 10,
            speed_min: 1.5,
            speed_max: 3.0,
            style: SpriteStyle::DigitGlyph,
            action_scale: 0.0,
            out: None,
            eval_interval: 500,
            eval_size: 64,
            eval_seed: 9001,
            num_sequences: 1000,
        }
    }
}

fn parse<V: std::str::FromStr>(key: &str, value: &str) -> Result<V> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("bad value '{value}' for '{key}'")))
}

fn parse_opt(key: &str, value: &str) -> Result<Option<f64>> {
    if value == "auto" {
        Ok(None)
    } else {
        parse(key, value).map(Some)
    }
}

fn parse_path(value: &str) -> Option<PathBuf> {
    (!value.is_empty()).then(|| PathBuf::from(value))
}

impl TrainConfig {
    /// Applies one setting; keys are the flag names without the leading
    /// dashes, with `_` accepted for `-`.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = key.trim();
        let value = value.trim();
        let norm = key.replace('_', "-");
        match norm.as_str() {
            "variant" => self.variant = value.parse()?,
            "layers" => self.layers = parse(key, value)?,
            "channels" => self.channels = parse(key, value)?,
            "kernel" => self.kernel = parse(key, value)?,
            "patch" => self.patch = parse(key, value)?,
            "T" => self.t_in = parse(key, value)?,
            "K" => self.k_out = parse(key, value)?,
            "batch" => self.batch = parse(key, value)?,
            "iters" => self.iters = parse(key, value)?,
            "lr" => self.lr = parse(key, value)?,
            "clip" => self.clip = parse(key, value)?,
            "lambda-dec" => self.lambda_dec = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "rss-strategy" => self.rss_strategy = value.parse()?,
            "rss-mode" => self.rss_mode = value.parse()?,
            "eps-start" => self.eps_start = parse_opt(key, value)?,
            "eps-end" => self.eps_end = parse_opt(key, value)?,
            "alpha-l" => self.alpha_l = parse_opt(key, value)?,
            "alpha-e" => self.alpha_e = parse_opt(key, value)?,
            "alpha-s" => self.alpha_s = parse_opt(key, value)?,
            "beta-s" => self.beta_s = parse_opt(key, value)?,
            "ss-decay" => self.ss_decay = parse(key, value)?,
            "data" => self.data = parse_path(value),
            "height" => self.height = parse(key, value)?,
            "width" => self.width = parse(key, value)?,
            "sprites" => self.sprites = parse(key, value)?,
            "sprite-size" => self.sprite_size = parse(key, value)?,
            "speed-min" => self.speed_min = parse(key, value)?,
            "speed-max" => self.speed_max = parse(key, value)?,
            "style" => self.style = value.parse()?,
            "action-scale" => self.action_scale = parse(key, value)?,
            "out" => self.out = parse_path(value),
            "eval-interval" => self.eval_interval = parse(key, value)?,
            "eval-size" => self.eval_size = parse(key, value)?,
            "eval-seed" => self.eval_seed = parse(key, value)?,
            "num-sequences" => self.num_sequences = parse(key, value)?,
            _ => return Err(Error::Config(format!("unknown key '{key}'"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines on top of `self`. Blank lines and `#`
    /// comments are ignored.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            self.set(k, v)
                .map_err(|e| Error::Config(format!("line {}: {}", n + 1, strip_prefix(&e))))?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut c = TrainConfig::default();
        c.apply_text(text)?;
        Ok(c)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        Self::from_text(&text)
    }

    /// Every key, one per line; [`TrainConfig::from_text`] inverts it.
    pub fn to_text(&self) -> String {
        let opt = |v: Option<f64>| v.map_or("auto".to_string(), |x| x.to_string());
        let path = |p: &Option<PathBuf>| p.as_ref().map_or(String::new(), |p| p.display().to_string());
        let mut s = String::new();
        let pairs: Vec<(&str, String)> = vec![
            ("variant", self.variant.to_string()),
            ("layers", self.layers.to_string()),
            ("channels", self.channels.to_string()),
            ("kernel", self.kernel.to_string()),
            ("patch", self.patch.to_string()),
            ("T", self.t_in.to_string()),
            ("K", self.k_out.to_string()),
            ("batch", self.batch.to_string()),
            ("iters", self.iters.to_string()),
            ("lr", self.lr.to_string()),
            ("clip", self.clip.to_string()),
            ("lambda-dec", self.lambda_dec.to_string()),
            ("seed", self.seed.to_string()),
            ("rss-strategy", self.rss_strategy.to_string()),
            ("rss-mode", self.rss_mode.to_string()),
            ("eps-start", opt(self.eps_start)),
            ("eps-end", opt(self.eps_end)),
            ("alpha-l", opt(self.alpha_l)),
            ("alpha-e", opt(self.alpha_e)),
            ("alpha-s", opt(self.alpha_s)),
            ("beta-s", opt(self.beta_s)),
            ("ss-decay", self.ss_decay.to_string()),
            ("data", path(&self.data)),
            ("height", self.height.to_string()),
            ("width", self.width.to_string()),
            ("sprites", self.sprites.to_string()),
            ("sprite-size", self.sprite_size.to_string()),
            ("speed-min", self.speed_min.to_string()),
            ("speed-max", self.speed_max.to_string()),
            ("style", self.style.to_string()),
            ("action-scale", self.action_scale.to_string()),
            ("out", path(&self.out)),
            ("eval-interval", self.eval_interval.to_string()),
            ("eval-size", self.eval_size.to_string()),
            ("eval-seed", self.eval_seed.to_string()),
            ("num-sequences", self.num_sequences.to_string()),
        ];
        for (k, v) in pairs {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    /// Synthetic data geometry; sequences are `T+K` frames long.
    pub fn dataset(&self) -> DatasetConfig {
        DatasetConfig {
            num_sprites: self.sprites,
            height: self.height,
            width: self.width,
            sprite_size: self.sprite_size,
            speed_min: self.speed_min,
            speed_max: self.speed_max,
            seq_len: self.t_in + self.k_out,
            style: self.style,
            action_scale: self.action_scale,
        }
    }

    /// Network for frames with `channels` channels.
    pub fn network(&self, frame_channels: usize) -> NetworkConfig {
        NetworkConfig {
            variant: self.variant,
            num_layers: self.layers,
            hidden: self.channels,
            kernel: self.kernel,
            patch: self.patch,
            channels: frame_channels,
            height: self.height,
            width: self.width,
            action_dim: if self.variant == Variant::StLstmAction { ACTION_DIM } else { 0 },
        }
    }

    pub fn curriculum(&self) -> Result<Curriculum> {
        let (ps, pe) = self.rss_strategy.preset();
        let mut rss = RssSchedule::for_budget(
            self.rss_mode,
            self.eps_start.unwrap_or(ps),
            self.eps_end.unwrap_or(pe),
            self.iters,
        )?;
        if let Some(v) = self.alpha_l {
            rss.alpha_l = v;
        }
        if let Some(v) = self.alpha_e {
            rss.alpha_e = v;
        }
        if let Some(v) = self.alpha_s {
            rss.alpha_s = v;
        }
        if let Some(v) = self.beta_s {
            rss.beta_s = v;
        }
        rss.validate()?;
        Ok(Curriculum {
            strategy: self.rss_strategy,
            rss,
            ss: SsSchedule::for_budget(self.iters, self.ss_decay),
        })
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.iters < 1 || self.batch < 1 {
            return bad("iters and batch must be at least 1".into());
        }
        if self.t_in < 2 || self.k_out < 1 {
            return bad(format!("need T >= 2 and K >= 1, got {} and {}", self.t_in, self.k_out));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr {} must be positive", self.lr));
        }
        if !(self.clip >= 0.0 && self.lambda_dec >= 0.0) {
            return bad("clip and lambda-dec must be >= 0".into());
        }
        // an infinite decay span keeps η at 1
        if !(self.ss_decay > 0.0) {
            return bad(format!("ss-decay {} must be positive", self.ss_decay));
        }
        if self.variant == Variant::StLstmAction && self.data.is_some() {
            return bad("the action variant needs synthetic data; dataset files hold no actions".into());
        }
        if self.variant == Variant::StLstmAction && self.action_scale <= 0.0 {
            return bad("the action variant needs action-scale > 0".into());
        }
        self.network(1).validate()?;
        if self.data.is_none() {
            self.dataset().validate()?;
        }
        self.curriculum()?;
        Ok(())
    }
}

/// Message of an error without its category prefix.
pub(crate) fn strip_prefix(e: &Error) -> String {
    let s = e.to_string();
    match s.split_once(": ") {
        Some((_, rest)) => rest.to_string(),
        None => s,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut c = TrainConfig::default();
        c.variant = Variant::MFlow;
        c.t_in = 5;
        c.eps_start = Some(0.25);
        c.out = Some("runs/a".into());
        c.lr = 3e-4;
        let back = TrainConfig::from_text(&c.to_text()).unwrap();
        assert_eq!(back, c);
        assert_eq!(TrainConfig::from_text(&TrainConfig::default().to_text()).unwrap(), TrainConfig::default());
    }

    #[test]
    fn comments_blank_lines_and_underscores() {
        let c = TrainConfig::from_text("# header\n\nlambda_dec = 0.5  # trailing\n  K=3\n").unwrap();
        assert_eq!(c.lambda_dec, 0.5);
        assert_eq!(c.k_out, 3);
    }

    #[test]
    fn bad_lines_name_the_line() {
        let e = TrainConfig::from_text("layers = 2\nbogus = 1\n").unwrap_err();
        assert!(matches!(&e, Error::Config(m) if m.starts_with("line 2")), "{e}");
        assert!(TrainConfig::from_text("layers 2").is_err());
        assert!(TrainConfig::from_text("layers = two").is_err());
        assert!(TrainConfig::from_text("variant = lstm").is_err());
    }

    #[test]
    fn validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let cases = [
            TrainConfig { iters: 0, ..Default::default() },
            TrainConfig { t_in: 1, ..Default::default() },
            TrainConfig { lr: 0.0, ..Default::default() },
            TrainConfig { variant: Variant::StLstmAction, ..Default::default() },
            TrainConfig { kernel: 4, ..Default::default() },
            TrainConfig { eps_start: Some(1.5), ..Default::default() },
            TrainConfig { sprite_size: 40, ..Default::default() },
        ];
        for c in cases {
            assert!(matches!(c.validate(), Err(Error::Config(_))), "{c:?}");
        }
        let ok = TrainConfig {
            variant: Variant::StLstmAction,
            action_scale: 0.3,
            ..Default::default()
        };
        assert!(ok.validate().is_ok());
    }

    #[test]
    fn curriculum_uses_presets_and_overrides() {
        let c = TrainConfig {
            rss_strategy: Strategy::Rss2,
            ..Default::default()
        };
        let cur = c.curriculum().unwrap();
        assert_eq!((cur.rss.eps_start, cur.rss.eps_end), (0.5, 1.0));
        let c = TrainConfig {
            alpha_e: Some(123.0),
            eps_start: Some(0.1),
            ..c
        };
        let cur = c.curriculum().unwrap();
        assert_eq!((cur.rss.eps_start, cur.rss.alpha_e), (0.1, 123.0));
    }
}
