use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use stp_cli::checkpoint::load_checkpoint;
use stp_cli::config::TrainConfig;
use stp_cli::diag::{cosine_csv, gradient_csv, saturation_csv, Probe};
use stp_cli::eval::{baseline_report, evaluate, generate, parse_actions, DEFAULT_THRESHOLDS};
use stp_cli::train::{held_out, train_to_dir, DataSource, Trainer};
use stp_core::data::{gen_sequence, load_dataset, save_dataset, stack_sequences, ACTION_DIM};
use stp_core::network::{FrameSequence, ProbeMode};
use stp_core::{Error, Result, Rng};

#[derive(Parser)]
#[command(name = "stp", version, about = "Spatiotemporal frame prediction")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a model; flags override the config file.
    Train(TrainArgs),
    /// Score forecasts on a dataset file or fresh synthetic sequences.
    Eval(EvalArgs),
    /// Write forecast frames as PGM/PPM images.
    Generate(GenerateArgs),
    /// Gradient, gate-saturation or memory-cosine probes.
    Diag(DiagArgs),
    /// Write a synthetic dataset file.
    GenData(GenDataArgs),
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Continue from a checkpoint (its config is used; flags are ignored).
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Stop after this many completed iterations.
    #[arg(long)]
    until: Option<u64>,
    #[command(flatten)]
    set: Overrides,
}

/// One optional flag per config key.
#[derive(Args, Default)]
struct Overrides {
    #[arg(long)]
    seed: Option<String>,
    #[arg(long)]
    variant: Option<String>,
    #[arg(long)]
    layers: Option<String>,
    #[arg(long)]
    channels: Option<String>,
    #[arg(long)]
    kernel: Option<String>,
    #[arg(long)]
    patch: Option<String>,
    #[arg(long = "T")]
    t_in: Option<String>,
    #[arg(long = "K")]
    k_out: Option<String>,
    #[arg(long)]
    rss_mode: Option<String>,
    #[arg(long)]
    rss_strategy: Option<String>,
    #[arg(long)]
    eps_start: Option<String>,
    #[arg(long)]
    eps_end: Option<String>,
    #[arg(long)]
    alpha_l: Option<String>,
    #[arg(long)]
    alpha_e: Option<String>,
    #[arg(long)]
    alpha_s: Option<String>,
    #[arg(long)]
    beta_s: Option<String>,
    #[arg(long)]
    ss_decay: Option<String>,
    #[arg(long)]
    lambda_dec: Option<String>,
    #[arg(long)]
    iters: Option<String>,
    #[arg(long)]
    batch: Option<String>,
    #[arg(long)]
    lr: Option<String>,
    #[arg(long)]
    clip: Option<String>,
    #[arg(long)]
    data: Option<String>,
    #[arg(long)]
    height: Option<String>,
    #[arg(long)]
    width: Option<String>,
    #[arg(long)]
    sprites: Option<String>,
    #[arg(long)]
    sprite_size: Option<String>,
    #[arg(long)]
    speed_min: Option<String>,
    #[arg(long)]
    speed_max: Option<String>,
    #[arg(long)]
    style: Option<String>,
    #[arg(long)]
    action_scale: Option<String>,
    #[arg(long)]
    out: Option<String>,
    #[arg(long)]
    eval_interval: Option<String>,
    #[arg(long)]
    eval_size: Option<String>,
    #[arg(long)]
    eval_seed: Option<String>,
    #[arg(long)]
    num_sequences: Option<String>,
}

impl Overrides {
    fn apply(&self, cfg: &mut TrainConfig) -> Result<()> {
        let pairs = [
            ("seed", &self.seed),
            ("variant", &self.variant),
            ("layers", &self.layers),
            ("channels", &self.channels),
            ("kernel", &self.kernel),
            ("patch", &self.patch),
            ("T", &self.t_in),
            ("K", &self.k_out),
            ("rss-mode", &self.rss_mode),
            ("rss-strategy", &self.rss_strategy),
            ("eps-start", &self.eps_start),
            ("eps-end", &self.eps_end),
            ("alpha-l", &self.alpha_l),
            ("alpha-e", &self.alpha_e),
            ("alpha-s", &self.alpha_s),
            ("beta-s", &self.beta_s),
            ("ss-decay", &self.ss_decay),
            ("lambda-dec", &self.lambda_dec),
            ("iters", &self.iters),
            ("batch", &self.batch),
            ("lr", &self.lr),
            ("clip", &self.clip),
            ("data", &self.data),
            ("height", &self.height),
            ("width", &self.width),
            ("sprites", &self.sprites),
            ("sprite-size", &self.sprite_size),
            ("speed-min", &self.speed_min),
            ("speed-max", &self.speed_max),
            ("style", &self.style),
            ("action-scale", &self.action_scale),
            ("out", &self.out),
            ("eval-interval", &self.eval_interval),
            ("eval-size", &self.eval_size),
            ("eval-seed", &self.eval_seed),
            ("num-sequences", &self.num_sequences),
        ];
        for (k, v) in pairs {
            if let Some(v) = v {
                cfg.set(k, v)?;
            }
        }
        Ok(())
    }
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long, conflicts_with = "synthetic", required_unless_present = "synthetic")]
    data: Option<PathBuf>,
    /// Draw held-out sequences from the checkpoint's data settings.
    #[arg(long)]
    synthetic: bool,
    /// Number of synthetic sequences.
    #[arg(long, default_value_t = 64)]
    count: usize,
    #[arg(long = "T")]
    t_in: Option<usize>,
    #[arg(long = "K")]
    k_out: Option<usize>,
    #[arg(long)]
    csv: PathBuf,
    /// CSI thresholds, comma-separated.
    #[arg(long, value_delimiter = ',')]
    thresholds: Option<Vec<f64>>,
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Dataset file holding the context sequence.
    #[arg(long)]
    context: PathBuf,
    /// Sequence of the context file to use.
    #[arg(long, default_value_t = 0)]
    index: usize,
    /// Context frames to read (default: the whole sequence).
    #[arg(long = "T")]
    t_in: Option<usize>,
    #[arg(long)]
    horizon: usize,
    /// One action per line, for action-conditioned models.
    #[arg(long)]
    actions: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct DiagArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    probe: String,
    #[arg(long)]
    csv: PathBuf,
    /// Dataset file; synthetic held-out sequences when absent.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value_t = 16)]
    count: usize,
    /// Gradient probe mode: last_loss or accumulated.
    #[arg(long, default_value = "last_loss")]
    mode: String,
    /// Saturation probe threshold.
    #[arg(long, default_value_t = 0.1)]
    threshold: f64,
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    count: Option<usize>,
}

fn load_config(path: &Option<PathBuf>) -> Result<TrainConfig> {
    match path {
        Some(p) => TrainConfig::from_file(p),
        None => Ok(TrainConfig::default()),
    }
}

fn write(path: &PathBuf, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::Io(format!("{}: {e}", path.display())))
}

fn train(a: TrainArgs) -> Result<()> {
    let mut trainer = match &a.resume {
        Some(p) => Trainer::from_checkpoint(load_checkpoint(p)?)?,
        None => {
            let mut cfg = load_config(&a.config)?;
            a.set.apply(&mut cfg)?;
            Trainer::new(cfg)?
        }
    };
    let until = a.until.unwrap_or(trainer.cfg.iters);
    let every = (trainer.cfg.iters / 100).max(1);
    eprintln!(
        "training {} ({} parameters) from iteration {} to {}",
        trainer.cfg.variant,
        trainer.model.param_count(),
        trainer.k,
        until.min(trainer.cfg.iters)
    );
    train_to_dir(&mut trainer, until, |log, report| {
        if log.k % every == 0 {
            eprintln!(
                "k={} loss={:.4} recon={:.4} decouple={:.4} eps={:.3} eta={:.3}",
                log.k, log.total, log.recon, log.decouple, log.epsilon, log.eta
            );
        }
        if let Some(r) = report {
            eprintln!("k={} held-out mse={:.5} ssim={:.4}", log.k + 1, r.mean_mse(), r.mean_ssim());
        }
    })
}

fn synthetic_sample(cfg: &TrainConfig, count: usize) -> Result<FrameSequence> {
    let c = TrainConfig { eval_size: count, ..cfg.clone() };
    held_out(&c, &DataSource::Synthetic(c.dataset()))
}

fn file_sample(path: &Path, count: usize) -> Result<FrameSequence> {
    let seqs = load_dataset(path)?;
    stack_sequences(&seqs[..count.clamp(1, seqs.len())])
}

fn eval(a: EvalArgs) -> Result<()> {
    let ck = load_checkpoint(&a.ckpt)?;
    let t_in = a.t_in.unwrap_or(ck.config.t_in);
    let k_out = a.k_out.unwrap_or(ck.config.k_out);
    let cfg = TrainConfig { t_in, k_out, ..ck.config.clone() };
    let seq = match &a.data {
        Some(p) => file_sample(p, usize::MAX)?,
        None => synthetic_sample(&cfg, a.count)?,
    };
    let th = a.thresholds.unwrap_or(DEFAULT_THRESHOLDS.to_vec());
    let report = evaluate(&ck.model, &seq, t_in, k_out, &th, cfg.batch)?;
    let base = baseline_report(&seq, t_in, k_out, &th)?;
    write(&a.csv, &report.to_csv())?;
    println!(
        "mse={:.6} psnr={:.3} ssim={:.4} baseline_mse={:.6}",
        report.mean_mse(),
        report.mean_psnr(),
        report.mean_ssim(),
        base.mean_mse()
    );
    Ok(())
}

fn generate_cmd(a: GenerateArgs) -> Result<()> {
    let ck = load_checkpoint(&a.ckpt)?;
    let seqs = load_dataset(&a.context)?;
    let seq = seqs
        .get(a.index)
        .ok_or_else(|| Error::Config(format!("context file has {} sequences", seqs.len())))?;
    let t_in = a.t_in.unwrap_or(seq.len());
    if t_in == 0 || t_in > seq.len() {
        return Err(Error::Config(format!("T = {t_in} outside 1..={}", seq.len())));
    }
    let actions = match &a.actions {
        Some(p) => Some(parse_actions(&std::fs::read_to_string(p)?, ACTION_DIM)?),
        None => None,
    };
    let paths = generate(&ck.model, &seq.frames[..t_in], actions.as_deref(), a.horizon, &a.out)?;
    println!("wrote {} frames to {}", paths.len(), a.out.display());
    Ok(())
}

fn diag(a: DiagArgs) -> Result<()> {
    let probe: Probe = a.probe.parse()?;
    let ck = load_checkpoint(&a.ckpt)?;
    let (t_in, k_out) = (ck.config.t_in, ck.config.k_out);
    let seq = match &a.data {
        Some(p) => file_sample(p, a.count)?,
        None => synthetic_sample(&ck.config, a.count)?,
    };
    let csv = match probe {
        Probe::Gradients => gradient_csv(&ck.model, &seq, t_in, k_out, a.mode.parse::<ProbeMode>()?)?,
        Probe::Saturation => saturation_csv(&ck.model, &seq, t_in, k_out, a.threshold)?,
        Probe::Cosine => cosine_csv(&ck.model, &seq, t_in, k_out)?,
    };
    write(&a.csv, &csv)
}

fn gen_data(a: GenDataArgs) -> Result<()> {
    let mut cfg = load_config(&a.config)?;
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(n) = a.count {
        cfg.num_sequences = n;
    }
    if cfg.num_sequences == 0 {
        return Err(Error::Config("num-sequences must be positive".into()));
    }
    let d = cfg.dataset();
    d.validate()?;
    let mut rng = Rng::new(cfg.seed);
    let seqs = (0..cfg.num_sequences)
        .map(|_| gen_sequence(&d, &mut rng))
        .collect::<Result<Vec<_>>>()?;
    save_dataset(&a.out, &seqs)?;
    println!("wrote {} sequences of {} frames to {}", seqs.len(), d.seq_len, a.out.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let res = match cli.cmd {
        Cmd::Train(a) => train(a),
        Cmd::Eval(a) => eval(a),
        Cmd::Generate(a) => generate_cmd(a),
        Cmd::Diag(a) => diag(a),
        Cmd::GenData(a) => gen_data(a),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace(['\n', '\r'], " ");
            eprintln!("error kind={} message={msg:?}", e.kind());
            ExitCode::FAILURE
        }
    }
}
