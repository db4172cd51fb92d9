use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use deepofdm::harness::{
    load_weights, output_cloud, run_ablation, run_sweep, save_weights, symmetry_metric, symmetry_noise_floor,
    AblationMode, ExperimentConfig, SweepResult, WeightsBundle,
};
use deepofdm::rng::substream;
use deepofdm::trainer::{Trainer, Transceiver};
use deepofdm::{Error, Result};

#[derive(Parser)]
#[command(name = "deepofdm", version, about = "Train and evaluate learned OFDM transceivers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a transceiver end to end.
    Train {
        config: PathBuf,
        /// Where the final weights go.
        #[arg(long, default_value = "weights.json")]
        out: PathBuf,
        /// Write a checkpoint next to `out` every N steps (0 disables).
        #[arg(long, default_value_t = 1000)]
        checkpoint_every: usize,
        /// Training history as JSON.
        #[arg(long)]
        history: Option<PathBuf>,
    },
    /// BLER/BER/goodput sweep over the configured speeds and SNRs.
    Sweep {
        config: PathBuf,
        #[arg(long)]
        weights: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Sweep with one of the ablations applied.
    Ablate {
        /// single-symbol, restricted-8, gs-collapse, linear, width-split, sip or csi-oracle
        mode: String,
        config: PathBuf,
        #[arg(long)]
        weights: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Quarter-turn symmetry of the modulator output cloud.
    Symmetry {
        #[arg(long)]
        weights: PathBuf,
        /// Frames drawn for the output cloud.
        #[arg(long, default_value_t = 4)]
        frames: usize,
        #[arg(long, default_value_t = 20)]
        trials: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
    /// Architecture and complexity of a weights file.
    Info {
        #[arg(long)]
        weights: PathBuf,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e.category() {
        "config" => 2,
        "io" => 3,
        "weights" => 4,
        "divergence" => 5,
        "numeric" => 6,
        "estimator" => 7,
        "framing" => 8,
        "constellation" => 9,
        _ => 1,
    }
}

fn load_bundle(path: Option<&Path>) -> Result<Option<Transceiver<f32>>> {
    path.map(|p| load_weights(p)?.transceiver()).transpose()
}

fn emit(result: &SweepResult, out: Option<&Path>) -> Result<()> {
    match out {
        Some(p) => result.write_csv(p),
        None => {
            print!("{}", result.to_csv());
            Ok(())
        }
    }
}

fn train(config: &Path, out: &Path, every: usize, history: Option<&Path>) -> Result<()> {
    let exp = ExperimentConfig::load(config)?;
    let cfg = exp.train_config();
    let mut trainer = Trainer::new(cfg.clone())?;
    let steps = cfg.train.steps;
    let checkpoint = out.with_extension("ckpt.json");
    while trainer.steps_done() < steps {
        let r = trainer.step()?;
        if r.step % 100 == 0 || r.step + 1 == steps {
            log::info!("step {} rate loss {:.4} papr {:.2} dB lambda {:.4}", r.step, r.rate_loss, r.papr_db, r.lambda);
        }
        let done = trainer.steps_done();
        if every > 0 && done % every == 0 && done < steps {
            save_weights(&WeightsBundle::from_transceiver(&trainer.tx, &cfg, done)?, &checkpoint)?;
        }
    }
    save_weights(&WeightsBundle::from_transceiver(&trainer.tx, &cfg, steps)?, out)?;
    if let Some(h) = history {
        std::fs::write(h, serde_json::to_string_pretty(&trainer.history)?)?;
    }
    Ok(())
}

fn symmetry(weights: &Path, frames: usize, trials: usize, seed: u64) -> Result<()> {
    let bundle = load_weights(weights)?;
    let tx = bundle.transceiver()?;
    let pattern = bundle.config.grid.pattern()?;
    let theta = std::f64::consts::FRAC_PI_2;
    let mut rng = substream(seed, 0);
    let cloud = output_cloud(&tx, &pattern, frames, &mut rng)?;
    let metric = symmetry_metric(&cloud, theta);
    let floor = symmetry_noise_floor(&cloud, theta, trials, &mut rng);
    let c = tx.constellation()?;
    println!("constellation {:.6}", symmetry_metric(&c.points, theta));
    println!("output cloud  {metric:.6} ({} points)", cloud.len());
    println!("noise floor   {floor:.6}");
    println!("ratio         {:.2}", metric / floor);
    Ok(())
}

fn info(weights: &Path) -> Result<()> {
    let bundle = load_weights(weights)?;
    let tx = bundle.transceiver()?;
    let grid = &bundle.config.grid;
    println!("mode {} m {} trained {} steps", tx.mode.name(), tx.m, bundle.steps);
    println!("grid {}x{} pilots {}", grid.n_s, grid.n_t, grid.pilots.name());
    if let Some(net) = &tx.modulator {
        println!("modulator (hidden {}, linear {})", net.config.hidden, net.config.linear);
        for l in &net.layers.layers {
            println!("  {}", l.name());
        }
    }
    let rc = &tx.receiver.config;
    println!("receiver (hidden {}, input {})", rc.hidden, rc.input.name());
    for l in &tx.receiver.layers.layers {
        println!("  {}", l.name());
    }
    if let Some(c) = tx.modulator_complexity(grid.n_s, grid.n_t) {
        println!("modulator params {} buffers {} MACs {} FLOPs {}", c.params, c.buffers, c.macs, c.flops());
    }
    let c = tx.receiver_complexity(grid.n_s, grid.n_t);
    println!("receiver params {} buffers {} MACs {} FLOPs {}", c.params, c.buffers, c.macs, c.flops());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { config, out, checkpoint_every, history } => {
            train(&config, &out, checkpoint_every, history.as_deref())
        }
        Command::Sweep { config, weights, out } => {
            let exp = ExperimentConfig::load(&config)?;
            let tx = load_bundle(weights.as_deref())?;
            emit(&run_sweep(&exp, tx.as_ref())?, out.as_deref())
        }
        Command::Ablate { mode, config, weights, out } => {
            let mode: AblationMode = mode.parse()?;
            let exp = ExperimentConfig::load(&config)?;
            let tx = load_bundle(weights.as_deref())?;
            emit(&run_ablation(mode, &exp, tx.as_ref())?, out.as_deref())
        }
        Command::Symmetry { weights, frames, trials, seed } => symmetry(&weights, frames, trials, seed),
        Command::Info { weights } => info(&weights),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error [{}]: {e}", e.category());
            ExitCode::from(exit_code(&e))
        }
    }
}
