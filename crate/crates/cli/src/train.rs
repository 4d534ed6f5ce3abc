//! The training loop: batch, curriculum mask, rollout, loss, clipped Adam.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::Path;

use stp_core::autodiff::{adam_step, AdamState};
use stp_core::curriculum::Curriculum;
use stp_core::data::{gen_batch, load_dataset, stack_sequences, DatasetConfig};
use stp_core::metrics::MetricReport;
use stp_core::network::{
    decoupling_loss, init_model, reconstruction_loss, rollout, FrameSequence, Model,
};
use stp_core::{Error, Result, Rng, Tape};

use crate::checkpoint::{adam_config, save_checkpoint, Checkpoint};
use crate::config::TrainConfig;
use crate::eval::{evaluate, DEFAULT_THRESHOLDS};

/// Stream tags under the master seed. Iteration `k` draws its batch from
/// `split(DATA_STREAM).split(k)` and its mask from `split(MASK_STREAM).split(k)`,
/// so any iteration can be replayed without the ones before it.
pub const DATA_STREAM: u64 = 1;
pub const MASK_STREAM: u64 = 2;
pub const INIT_STREAM: u64 = 3;

#[derive(Clone, Debug)]
pub enum DataSource {
    Synthetic(DatasetConfig),
    Fixed(Vec<FrameSequence>),
}

impl DataSource {
    pub fn from_config(cfg: &TrainConfig) -> Result<Self> {
        match &cfg.data {
            None => Ok(DataSource::Synthetic(cfg.dataset())),
            Some(path) => {
                let seqs = load_dataset(path)?;
                let need = cfg.t_in + cfg.k_out;
                if seqs[0].len() < need {
                    return Err(Error::Config(format!(
                        "dataset sequences have {} frames, T+K = {need}",
                        seqs[0].len()
                    )));
                }
                Ok(DataSource::Fixed(seqs))
            }
        }
    }

    /// `[channels, height, width]` of the frames.
    pub fn frame_dims(&self) -> Result<[usize; 3]> {
        match self {
            DataSource::Synthetic(d) => Ok([1, d.height, d.width]),
            DataSource::Fixed(seqs) => {
                let [_, j, h, w] = seqs[0].frames[0].nchw()?;
                Ok([j, h, w])
            }
        }
    }

    /// Synthetic batches are fresh sequences; fixed batches sample sequences
    /// uniformly with replacement.
    pub fn draw(&self, batch: usize, rng: &mut Rng) -> Result<FrameSequence> {
        match self {
            DataSource::Synthetic(d) => gen_batch(d, batch, rng),
            DataSource::Fixed(seqs) => {
                let picks: Vec<FrameSequence> =
                    (0..batch).map(|_| seqs[rng.below(seqs.len())].clone()).collect();
                stack_sequences(&picks)
            }
        }
    }
}

/// Held-out sequences: drawn from `eval-seed` for synthetic data, the first
/// `eval-size` sequences of a dataset file otherwise.
pub fn held_out(cfg: &TrainConfig, data: &DataSource) -> Result<FrameSequence> {
    let n = cfg.eval_size.max(1);
    match data {
        DataSource::Synthetic(d) => gen_batch(d, n, &mut Rng::new(cfg.eval_seed)),
        DataSource::Fixed(seqs) => stack_sequences(&seqs[..n.min(seqs.len())]),
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IterLog {
    pub k: u64,
    pub epsilon: f64,
    pub eta: f64,
    /// Reconstruction term per sequence.
    pub recon: f64,
    /// Unweighted decoupling term per sequence; 0 for variants without it.
    pub decouple: f64,
    /// `recon + λ·decouple` as optimized.
    pub total: f64,
    /// Gradient norm before clipping.
    pub grad_norm: f64,
}

pub const LOG_HEADER: &str = "k,epsilon,eta,recon,decouple,total,grad_norm";

impl IterLog {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.k, self.epsilon, self.eta, self.recon, self.decouple, self.total, self.grad_norm
        )
    }
}

pub struct Trainer {
    pub cfg: TrainConfig,
    pub model: Model,
    pub adam: AdamState,
    /// Completed iterations.
    pub k: u64,
    pub curriculum: Curriculum,
    pub data: DataSource,
    master: Rng,
}

impl Trainer {
    pub fn new(mut cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let data = DataSource::from_config(&cfg)?;
        let [j, h, w] = data.frame_dims()?;
        cfg.height = h;
        cfg.width = w;
        let master = Rng::new(cfg.seed);
        let model: Model = init_model(&cfg.network(j), &mut master.split(INIT_STREAM))?;
        let adam = AdamState::new(adam_config(&cfg), &model.store);
        Ok(Trainer {
            curriculum: cfg.curriculum()?,
            cfg,
            model,
            adam,
            k: 0,
            data,
            master,
        })
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self> {
        ck.config.validate()?;
        let data = DataSource::from_config(&ck.config)?;
        if data.frame_dims()? != [ck.model.cfg.channels, ck.model.cfg.height, ck.model.cfg.width] {
            return Err(Error::Config("checkpoint does not match its dataset".into()));
        }
        if ck.model.decouple.is_none() && ck.model.cfg.variant.uses_decoupling() {
            return Err(Error::Config("cannot resume a model stripped for inference".into()));
        }
        Ok(Trainer {
            curriculum: ck.config.curriculum()?,
            master: Rng::new(ck.config.seed),
            cfg: ck.config,
            model: ck.model,
            adam: ck.adam,
            k: ck.iteration,
            data,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.cfg.clone(),
            model: self.model.clone(),
            adam: self.adam.clone(),
            iteration: self.k,
        }
    }

    pub fn data_rng(&self, k: u64) -> Rng {
        self.master.split(DATA_STREAM).split(k)
    }

    pub fn mask_rng(&self, k: u64) -> Rng {
        self.master.split(MASK_STREAM).split(k)
    }

    /// One optimization step at iteration `self.k`.
    pub fn step(&mut self) -> Result<IterLog> {
        let k = self.k;
        let (t_in, k_out) = (self.cfg.t_in, self.cfg.k_out);
        let batch = self.data.draw(self.cfg.batch, &mut self.data_rng(k))?;
        let n = batch.batch()?;
        let (epsilon, eta) = self.curriculum.probabilities(k);
        let mask = self.curriculum.mask_at(k, t_in, k_out, n, &mut self.mask_rng(k))?;

        let mut tape = Tape::new();
        let r = rollout(&mut tape, &self.model, &batch, t_in, k_out, &mask)?;
        let recon = reconstruction_loss(&mut tape, &r)?;
        let dec = decoupling_loss(&mut tape, &self.model, &r)?;
        let inv_n = 1.0 / n as f32;
        let lambda = self.cfg.lambda_dec as f32;
        let mut loss = tape.scale(recon, inv_n);
        if let (Some(d), true) = (dec, lambda > 0.0) {
            let weighted = tape.scale(d, lambda * inv_n);
            loss = tape.add(loss, weighted)?;
        }
        let scalar = |tape: &Tape, v| tape.value(v).data()[0] as f64;
        let recon_v = scalar(&tape, recon) / n as f64;
        let dec_v = dec.map_or(0.0, |d| scalar(&tape, d) / n as f64);
        let total = scalar(&tape, loss);
        if !(total.is_finite() && recon_v.is_finite() && dec_v.is_finite()) {
            return Err(Error::Numeric(format!(
                "iteration {k}: loss {total} (reconstruction {recon_v}, decoupling {dec_v})"
            )));
        }

        self.model.store.zero_grad();
        tape.backward(loss, &mut self.model.store)?;
        let grad_norm = if self.cfg.clip > 0.0 {
            self.model.store.clip_grad_norm(self.cfg.clip as f32)
        } else {
            self.model.store.grad_norm()
        } as f64;
        adam_step(&mut self.model.store, &mut self.adam)?;
        self.k += 1;
        Ok(IterLog {
            k,
            epsilon,
            eta,
            recon: recon_v,
            decouple: dec_v,
            total,
            grad_norm,
        })
    }

    /// Steps until `k == until` (capped at the budget).
    pub fn run_until(&mut self, until: u64, mut on_iter: impl FnMut(&IterLog)) -> Result<Vec<IterLog>> {
        let stop = until.min(self.cfg.iters);
        let mut logs = Vec::with_capacity(stop.saturating_sub(self.k) as usize);
        while self.k < stop {
            let log = self.step()?;
            on_iter(&log);
            logs.push(log);
        }
        Ok(logs)
    }

    pub fn run(&mut self) -> Result<Vec<IterLog>> {
        self.run_until(self.cfg.iters, |_| {})
    }
}

fn append_line(path: &Path, header: &str, line: &str) -> Result<()> {
    let fresh = !path.exists();
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    if fresh {
        writeln!(f, "{header}")?;
    }
    writeln!(f, "{line}")?;
    Ok(())
}

/// Trains until `until` while writing the iteration log, periodic held-out
/// metrics and checkpoints into `cfg.out` (if set). A checkpoint is always
/// written when the run stops.
pub fn train_to_dir(
    trainer: &mut Trainer,
    until: u64,
    mut progress: impl FnMut(&IterLog, Option<&MetricReport>),
) -> Result<()> {
    let out = trainer.cfg.out.clone();
    if let Some(dir) = &out {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("config.txt"), trainer.cfg.to_text())?;
    }
    let holdout = if trainer.cfg.eval_interval > 0 {
        Some(held_out(&trainer.cfg, &trainer.data)?)
    } else {
        None
    };
    let stop = until.min(trainer.cfg.iters);
    while trainer.k < stop {
        let log = trainer.step()?;
        if let Some(dir) = &out {
            append_line(&dir.join("train_log.csv"), LOG_HEADER, &log.csv_row())?;
        }
        let done = trainer.k;
        let mut report = None;
        if let (Some(h), true) = (&holdout, done.is_multiple_of(trainer.cfg.eval_interval.max(1))) {
            let r = evaluate(
                &trainer.model,
                h,
                trainer.cfg.t_in,
                trainer.cfg.k_out,
                &DEFAULT_THRESHOLDS,
                trainer.cfg.batch,
            )?;
            if let Some(dir) = &out {
                fs::write(dir.join(format!("eval_{done}.csv")), r.to_csv())?;
                save_checkpoint(&dir.join(format!("ckpt_{done}.stpc")), &trainer.checkpoint())?;
            }
            report = Some(r);
        }
        progress(&log, report.as_ref());
    }
    if let Some(dir) = &out {
        save_checkpoint(&dir.join("latest.stpc"), &trainer.checkpoint())?;
    }
    Ok(())
}
