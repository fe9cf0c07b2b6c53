use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use log::info;

use robust_nsr::config::RunConfig;
use robust_nsr::eval::evaluate_run;
use robust_nsr::field::{extract_mesh, write_ply, Head};
use robust_nsr::geometry::write_trajectory;
use robust_nsr::io::{read_checkpoint, read_labels, read_observations, write_checkpoint, write_dataset};
use robust_nsr::scene_graph::NodeClass;
use robust_nsr::synth::generate_dataset;
use robust_nsr::trainer::{train_until, Event, TrainReport, TrainState};

const CHECKPOINT: &str = "checkpoint";

#[derive(Parser)]
#[command(name = "rnsr", version, about = "Robust neural surface reconstruction from noisy camera poses")]
struct Cli {
    /// Run configuration (TOML). Defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (or file, for export).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Overrides every seed in the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Caps worker threads.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[arg(long, short, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset into --out.
    Synth,
    /// Train on a dataset, writing checkpoints and reports into --out.
    Train {
        dataset: PathBuf,
        /// Continue from the checkpoint in --out if there is one.
        #[arg(long)]
        resume: bool,
        /// Iterations between intermediate checkpoints; 0 writes only the last.
        #[arg(long, default_value_t = 1000)]
        checkpoint_every: usize,
        /// Stop after this iteration; schedules still follow the configured total.
        #[arg(long)]
        until: Option<usize>,
    },
    /// Evaluate a trained run against the dataset's hidden ground truth.
    Eval { run: PathBuf, dataset: PathBuf },
    /// Export an artifact of a trained run.
    Export { run: PathBuf, what: What },
}

#[derive(Clone, Copy, ValueEnum)]
enum What {
    Mesh,
    Trajectory,
    Graph,
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.set_seed(seed);
    }
    cfg.validate()?;
    Ok(cfg)
}

fn out_dir(cli: &Cli) -> Result<&Path> {
    cli.out.as_deref().context("--out is required for this command")
}

fn synth(cli: &Cli) -> Result<()> {
    let cfg = load_config(cli)?;
    let out = out_dir(cli)?;
    let d = generate_dataset(&cfg.scene, &cfg.dataset, cfg.dataset_seed())?;
    write_dataset(out, &d).with_context(|| format!("writing dataset to {}", out.display()))?;
    info!(
        "wrote {} images, {} edges to {}",
        d.images.len(),
        d.graph.raw_edges().len(),
        out.display()
    );
    Ok(())
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

fn train(cli: &Cli, dataset: &Path, resume: bool, checkpoint_every: usize, until: Option<usize>) -> Result<()> {
    let cfg = load_config(cli)?;
    let out = out_dir(cli)?;
    let (_, obs) = read_observations(dataset).with_context(|| format!("reading dataset {}", dataset.display()))?;
    fs::create_dir_all(out)?;
    fs::write(out.join("config.toml"), cfg.to_toml())?;

    let ckpt = out.join(CHECKPOINT);
    let mut state = if resume && ckpt.join("state.json").exists() {
        let s = read_checkpoint(&ckpt)?;
        if s.poses.len() != obs.poses.len() {
            bail!("checkpoint has {} poses but the dataset has {}", s.poses.len(), obs.poses.len());
        }
        info!("resuming at iteration {}", s.iteration);
        s
    } else {
        TrainState::new(&obs, &cfg.train)?
    };

    let mut io_err = None;
    let until = until.unwrap_or(cfg.train.iterations);
    train_until(&mut state, &obs, &cfg.train, &cfg.loss, &cfg.reloc, until, |s, step| {
        if s.iteration % 500 == 0 {
            info!(
                "iter {} loss {:.5} sharpness {:.1} psnr_n {:.2}",
                s.iteration,
                step.total,
                s.field.sharpness,
                s.psnr.psnr(step.node, Head::N).unwrap_or(0.0)
            );
        }
        if checkpoint_every > 0 && s.iteration % checkpoint_every == 0 && io_err.is_none() {
            io_err = write_checkpoint(&ckpt, s).err();
        }
    })?;
    if let Some(e) = io_err {
        return Err(e).context("writing checkpoint");
    }
    write_checkpoint(&ckpt, &state)?;

    let mut w = BufWriter::new(fs::File::create(out.join("trajectory.txt"))?);
    write_trajectory(&mut w, &state.poses)?;
    w.flush()?;
    let classes: String = state.graph.classes().iter().enumerate().map(|(i, c)| format!("{i} {c}\n")).collect();
    fs::write(out.join("classes.txt"), classes)?;
    let mut w = BufWriter::new(fs::File::create(out.join("events.jsonl"))?);
    for e in &state.events {
        serde_json::to_writer(&mut w, e)?;
        writeln!(w)?;
    }
    w.flush()?;
    write_json(&out.join("report.json"), &TrainReport::from_state(&state))?;
    info!("finished at iteration {}", state.iteration);
    Ok(())
}

/// Nodes flagged as outliers by any classification during training.
fn flagged_outliers(state: &TrainState) -> Vec<bool> {
    let mut flagged: Vec<bool> = state.graph.classes().iter().map(|c| *c == NodeClass::Outlier).collect();
    for e in &state.events {
        if let Event::Classify { outliers, .. } = e {
            for &i in outliers {
                flagged[i] = true;
            }
        }
    }
    flagged
}

fn eval(cli: &Cli, run: &Path, dataset: &Path) -> Result<()> {
    let cfg = load_config(cli)?;
    let ckpt = run.join(CHECKPOINT);
    let state = read_checkpoint(&ckpt).with_context(|| format!("reading checkpoint {}", ckpt.display()))?;
    let (manifest, _) = read_observations(dataset)?;
    let labels = read_labels(dataset, &manifest)?;
    if labels.poses.len() != state.poses.len() {
        bail!("run has {} poses but the dataset has {}", state.poses.len(), labels.poses.len());
    }
    let (report, _) = evaluate_run(
        &state.field,
        &state.poses,
        &flagged_outliers(&state),
        &manifest.scene,
        &labels,
        &cfg.eval,
    )?;
    let out = cli.out.clone().unwrap_or_else(|| run.to_path_buf());
    fs::create_dir_all(&out)?;
    write_json(&out.join("metrics.json"), &report)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn export(cli: &Cli, run: &Path, what: What) -> Result<()> {
    let ckpt = run.join(CHECKPOINT);
    let state = read_checkpoint(&ckpt).with_context(|| format!("reading checkpoint {}", ckpt.display()))?;
    let default = match what {
        What::Mesh => "mesh.ply",
        What::Trajectory => "trajectory.txt",
        What::Graph => "graph.txt",
    };
    let path = cli.out.clone().unwrap_or_else(|| run.join(default));
    let mut w = BufWriter::new(fs::File::create(&path).with_context(|| format!("creating {}", path.display()))?);
    match what {
        What::Mesh => {
            let cfg = load_config(cli)?;
            let res = if cfg.eval.mesh_resolution == 0 { state.field.res() } else { cfg.eval.mesh_resolution };
            write_ply(&extract_mesh(&state.field, res)?, &mut w)?
        }
        What::Trajectory => write_trajectory(&mut w, &state.poses)?,
        What::Graph => state.graph.write(&mut w)?,
    }
    w.flush()?;
    info!("wrote {}", path.display());
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global()?;
    }
    match &cli.command {
        Command::Synth => synth(cli),
        Command::Train {
            dataset,
            resume,
            checkpoint_every,
            until,
        } => train(cli, dataset, *resume, *checkpoint_every, *until),
        Command::Eval { run, dataset } => eval(cli, run, dataset),
        Command::Export { run, what } => export(cli, run, *what),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new()
        .filter_level(if cli.quiet { log::LevelFilter::Warn } else { log::LevelFilter::Info })
        .format_timestamp(None)
        .init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
