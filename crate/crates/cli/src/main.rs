//! Command-line front end: training, inference, evaluation, gradient
//! checking and flow visualisation.
//!
//! Exit codes: 0 success, 1 invalid input, 2 I/O or file format, 3 numerical failure.

use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;
use uscnn::gradcheck::{run_gradcheck, LOSS_TOLERANCE, NETWORK_TOLERANCE};
use uscnn::{
    compute_metrics, flow_to_color, ingest_pairs, init_network, iteration_trace, load_checkpoint,
    read_flo, read_image, save_checkpoint, train, write_flo, InferenceConfig, TrainConfig,
};

#[derive(Parser)]
#[command(name = "uscnn", version, about = "Unsupervised CNN optical flow")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train on frame pairs and write a checkpoint; streams `step,loss` CSV.
    Train(TrainArgs),
    /// Estimate flow between two frames.
    Infer(InferArgs),
    /// Compare an estimated .flo against ground truth.
    Eval(EvalArgs),
    /// Compare analytic gradients with finite differences.
    Gradcheck(GradcheckArgs),
    /// Render a .flo file as a color image (PNG, or PPM by extension).
    Colorize(ColorizeArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// Directory of consecutive frames, or of sequence subdirectories.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1e-4)]
    lr: f64,
    #[arg(long, default_value_t = 8)]
    batch: usize,
    #[arg(long, default_value_t = 1)]
    epochs: usize,
    /// Training crop as HEIGHTxWIDTH.
    #[arg(long, default_value = "128x96", value_parser = parse_crop)]
    crop: (usize, usize),
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Charbonnier epsilon.
    #[arg(long, default_value_t = 1e-3)]
    eps: f64,
    /// Stop after this many optimizer steps.
    #[arg(long)]
    max_steps: Option<usize>,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    frame1: PathBuf,
    #[arg(long)]
    frame2: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Pyramid levels; chosen from the frame size when omitted.
    #[arg(long)]
    scales: Option<usize>,
    #[arg(long, default_value_t = 4)]
    iters: usize,
    /// Also write a color rendering of the flow.
    #[arg(long)]
    png: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    est: PathBuf,
    #[arg(long)]
    gt: PathBuf,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Perturbs the analytic network gradient; the check must then fail.
    #[arg(long, hide = true)]
    inject_fault: bool,
}

#[derive(Args)]
struct ColorizeArgs {
    #[arg(long)]
    flow: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Magnitude mapped to full saturation; defaults to the 99th percentile.
    #[arg(long)]
    max: Option<f64>,
}

fn parse_crop(s: &str) -> Result<(usize, usize), String> {
    let (h, w) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("expected HEIGHTxWIDTH, got {s:?}"))?;
    let side = |v: &str| {
        v.trim()
            .parse::<usize>()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| format!("invalid crop side {v:?}"))
    };
    Ok((side(h)?, side(w)?))
}

enum Failure {
    Invalid(String),
    Numerical(String),
    Core(uscnn::Error),
}

impl From<uscnn::Error> for Failure {
    fn from(e: uscnn::Error) -> Self {
        Failure::Core(e)
    }
}

impl Failure {
    fn exit_code(&self) -> u8 {
        use uscnn::Error as E;
        match self {
            Failure::Invalid(_) => 1,
            Failure::Numerical(_) => 3,
            Failure::Core(E::Io { .. } | E::Format { .. } | E::Checkpoint { .. }) => 2,
            Failure::Core(E::NonFinite(_)) => 3,
            Failure::Core(_) => 1,
        }
    }

    fn message(&self) -> String {
        match self {
            Failure::Invalid(m) | Failure::Numerical(m) => m.clone(),
            Failure::Core(e) => e.to_string(),
        }
    }
}

type Outcome = Result<(), Failure>;

fn configure_threads() -> Outcome {
    let Ok(raw) = std::env::var("USCNN_THREADS") else {
        return Ok(());
    };
    let n = raw
        .trim()
        .parse::<usize>()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Failure::Invalid(format!("USCNN_THREADS must be a positive integer, got {raw:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Failure::Invalid(format!("cannot configure {n} threads: {e}")))
}

fn stdout_line(line: &str) -> Outcome {
    let mut out = std::io::stdout().lock();
    writeln!(out, "{line}")
        .and_then(|_| out.flush())
        .map_err(|e| Failure::Core(uscnn::Error::Io {
            path: "<stdout>".into(),
            source: e,
        }))
}

fn run_train(a: TrainArgs) -> Outcome {
    let cfg = TrainConfig {
        learning_rate: a.lr,
        batch_size: a.batch,
        epochs: a.epochs,
        charbonnier_epsilon: a.eps,
        crop_size: a.crop,
        seed: a.seed,
        max_steps: a.max_steps,
        ..TrainConfig::default()
    };
    cfg.validate()?;
    let dataset = ingest_pairs(&a.data)?;
    info!("{} training pairs from {}", dataset.pairs.len(), a.data.display());
    let mut net = init_network(a.seed);
    stdout_line("step,loss")?;
    let mut write_err = None;
    train(&mut net, &dataset, &cfg, |r| {
        if write_err.is_none() {
            write_err = stdout_line(&format!("{},{}", r.step, r.loss)).err();
        }
    })?;
    if let Some(e) = write_err {
        return Err(e);
    }
    save_checkpoint(&net, &a.out)?;
    info!("checkpoint written to {}", a.out.display());
    Ok(())
}

fn run_infer(a: InferArgs) -> Outcome {
    let net = load_checkpoint(&a.ckpt)?;
    let frame1 = read_image(&a.frame1)?;
    let frame2 = read_image(&a.frame2)?;
    frame1.check_same_extents(&frame2)?;
    let (h, w) = frame1.extents();
    let mut cfg = InferenceConfig::for_extents(h, w);
    if let Some(s) = a.scales {
        cfg.num_scales = s;
    }
    cfg.iterations_per_scale = a.iters;
    cfg.validate()?;
    let (flow, trace) = iteration_trace(&net, &frame1, &frame2, &cfg)?;
    for t in &trace {
        info!(
            "scale {} iteration {}: photometric loss {:.6}",
            t.scale, t.iteration, t.photometric_loss
        );
    }
    write_flo(&flow, &a.out)?;
    if let Some(png) = &a.png {
        flow_to_color(&flow, None).save(png)?;
    }
    Ok(())
}

fn run_eval(a: EvalArgs) -> Outcome {
    let est = read_flo(&a.est)?;
    let gt = read_flo(&a.gt)?;
    let m = compute_metrics(&est, &gt)?;
    stdout_line("metric,value")?;
    for (label, value) in m.rows() {
        stdout_line(&format!("{label},{value:.6}"))?;
    }
    Ok(())
}

fn run_gradcheck_cmd(a: GradcheckArgs) -> Outcome {
    let report = run_gradcheck(a.seed, a.inject_fault)?;
    stdout_line("check,max_relative_error,tolerance")?;
    stdout_line(&format!("loss,{:.3e},{LOSS_TOLERANCE:e}", report.loss_max_rel))?;
    stdout_line(&format!(
        "network,{:.3e},{NETWORK_TOLERANCE:e}",
        report.network_max_rel
    ))?;
    if report.passed() {
        Ok(())
    } else {
        Err(Failure::Numerical(
            "analytic gradients disagree with finite differences".into(),
        ))
    }
}

fn run_colorize(a: ColorizeArgs) -> Outcome {
    if let Some(m) = a.max {
        if !(m.is_finite() && m > 0.0) {
            return Err(Failure::Invalid(format!("--max must be positive, got {m}")));
        }
    }
    let flow = read_flo(&a.flow)?;
    flow_to_color(&flow, a.max).save(&a.out)?;
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .target(env_logger::Target::Stderr)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let result = configure_threads().and_then(|()| match cli.command {
        Command::Train(a) => run_train(a),
        Command::Infer(a) => run_infer(a),
        Command::Eval(a) => run_eval(a),
        Command::Gradcheck(a) => run_gradcheck_cmd(a),
        Command::Colorize(a) => run_colorize(a),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.exit_code())
        }
    }
}
