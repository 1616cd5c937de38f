//! `droopguard`: train a defender, evaluate presets, emit plot data.
//!
//! Exit codes: 0 success, 1 usage, 2 config or data error, 3 numerical failure.

mod manifest;
mod plotdata;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Parser, Subcommand, ValueEnum};
use droopguard::agent::checkpoint::Checkpoint;
use droopguard::agent::train::{IterRecord, Trainer};
use droopguard::config::Config;
use droopguard::env::ObservationMode;
use droopguard::eval::{held_out_suite, preset_scenario, run_episode, Controller};
use droopguard::feeder::{ieee37_balanced, load_feeder, solve_power_flow, PowerFlowOptions};
use droopguard::Error;

use manifest::Manifest;

#[derive(Parser)]
#[command(name = "droopguard", version, about = "Droop-curve attack simulation and PPO defense")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Deployment,
    Aggregate,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a policy; writes checkpoints, metrics.csv and a manifest.
    Train {
        /// Preset name or TOML path.
        #[arg(long, default_value = "train_default")]
        config: String,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, env = "DROOPGUARD_OUT", default_value = "runs/train")]
        out: PathBuf,
        /// Single-threaded, reproducible rollouts.
        #[arg(long)]
        deterministic: bool,
        #[arg(long, env = "DROOPGUARD_THREADS")]
        threads: Option<usize>,
        /// Override the iteration budget.
        #[arg(long)]
        iterations: Option<usize>,
        /// Continue from `<out>/checkpoint.ckpt`.
        #[arg(long)]
        resume: bool,
    },
    /// Run one evaluation episode; writes episode.csv, voltages.csv and summary.json.
    Eval {
        /// Preset name or TOML path.
        #[arg(long)]
        preset: String,
        #[arg(long, required_unless_present = "null_policy")]
        checkpoint: Option<PathBuf>,
        /// Keep every defended inverter at the null action.
        #[arg(long)]
        null_policy: bool,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, env = "DROOPGUARD_OUT", default_value = "runs/eval")]
        out: PathBuf,
        #[arg(long, value_enum)]
        mode: Option<Mode>,
        /// Instead of one episode, run this many held-out scenarios with and
        /// without the policy and write held_out.json.
        #[arg(long, conflicts_with = "null_policy")]
        held_out: Option<u64>,
    },
    /// Split an episode CSV into one tidy file per plot panel.
    Plotdata {
        episode: PathBuf,
        #[arg(long, env = "DROOPGUARD_OUT", default_value = "runs/plot")]
        out: PathBuf,
        /// Keep every n-th row.
        #[arg(long, default_value_t = 1)]
        every: usize,
    },
    /// Parse a feeder file, check its topology and solve the base case.
    ValidateFeeder {
        /// Path, or `builtin:ieee37_balanced`.
        feeder: String,
    },
    /// Print a preset or config file with every default filled in.
    ShowConfig {
        config: String,
    },
}

enum Failure {
    Usage(String),
    Data(String),
    Numerical(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::NonConvergence { .. } | Error::Degenerate(_) | Error::Numerical(_) => {
                Failure::Numerical(e.to_string())
            }
            _ => Failure::Data(e.to_string()),
        }
    }
}

fn io_err(path: &Path, e: std::io::Error) -> Failure {
    Failure::Data(format!("{}: {e}", path.display()))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.cmd {
        Cmd::Train {
            config,
            seed,
            out,
            deterministic,
            threads,
            iterations,
            resume,
        } => train(&config, seed, &out, deterministic, threads, iterations, resume),
        Cmd::Eval {
            preset,
            checkpoint,
            null_policy,
            seed,
            out,
            mode,
            held_out,
        } => match held_out {
            Some(n) => held_out_eval(&preset, checkpoint.as_deref(), n, seed, &out, mode),
            None => eval(&preset, checkpoint.as_deref(), null_policy, seed, &out, mode),
        },
        Cmd::Plotdata { episode, out, every } => plotdata::run(&episode, &out, every),
        Cmd::ValidateFeeder { feeder } => validate_feeder(&feeder),
        Cmd::ShowConfig { config } => Config::resolve(&config)
            .map(|c| print!("{}", c.to_toml()))
            .map_err(Failure::from),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let (code, msg) = match f {
                Failure::Usage(m) => (1, m),
                Failure::Data(m) => (2, m),
                Failure::Numerical(m) => (3, m),
            };
            eprintln!("error: {msg}");
            ExitCode::from(code)
        }
    }
}

fn train(
    config: &str,
    seed: Option<u64>,
    out: &Path,
    deterministic: bool,
    threads: Option<usize>,
    iterations: Option<usize>,
    resume: bool,
) -> Result<(), Failure> {
    let mut cfg = Config::resolve(config)?;
    if deterministic {
        cfg.train.deterministic = true;
    }
    if let Some(t) = threads {
        cfg.train.threads = t;
    }
    if let Some(n) = iterations {
        cfg.train.iterations = n;
    }
    cfg.validate()?;
    let seed = seed.unwrap_or(cfg.env.scenario.rng_seed);
    let feeder = Arc::new(cfg.load_feeder()?);
    fs::create_dir_all(out).map_err(|e| io_err(out, e))?;
    let mut manifest = Manifest::start("train", config, &cfg, seed, out);

    let latest = out.join("checkpoint.ckpt");
    let metrics_path = out.join("metrics.csv");
    let (mut trainer, mut rows) = if resume {
        let ck = Checkpoint::load(&latest)?;
        ck.check_action_space(&cfg.env.action)?;
        let rows: Vec<IterRecord> = read_metrics(&metrics_path)?
            .into_iter()
            .filter(|r| r.iteration < ck.header.iteration)
            .collect();
        let t = Trainer::with_agent(
            feeder,
            cfg.env.clone(),
            cfg.train.clone(),
            ck.header.seed,
            ck.agent,
            Some((ck.opt_p, ck.opt_v)),
            ck.header.iteration,
        )?;
        (t, rows)
    } else {
        (Trainer::new(feeder, cfg.env.clone(), cfg.train.clone(), seed)?, Vec::new())
    };
    fs::write(out.join("config.toml"), cfg.to_toml()).map_err(|e| io_err(out, e))?;

    let interval = cfg.train.checkpoint_interval;
    let total = cfg.train.iterations;
    let save = |t: &Trainer, path: &Path| -> Result<(), Error> {
        Checkpoint::new(&cfg, t.seed(), t.iteration, &t.agent, &t.opt_p, &t.opt_v).save(path)
    };
    let result = trainer.train(|t, rec| {
        rows.push(*rec);
        eprintln!(
            "iter {:4}  return {:9.3}  value_loss {:8.4}  entropy {:.3}  kl {:+.4}  clip {:.3}",
            rec.iteration, rec.mean_return, rec.value_loss, rec.entropy, rec.approx_kl, rec.clip_frac
        );
        if t.iteration % interval == 0 || t.iteration == total {
            write_metrics(&metrics_path, &rows)?;
            save(t, &out.join(format!("checkpoint_{:05}.ckpt", t.iteration)))?;
            save(t, &latest)?;
        }
        Ok(())
    });
    write_metrics(&metrics_path, &rows)?;
    save(&trainer, &latest)?;
    result?;
    manifest.finish(out)
}

fn write_metrics(path: &Path, rows: &[IterRecord]) -> Result<(), Error> {
    let err = |e: csv::Error| Error::Log(format!("{}: {e}", path.display()));
    let mut w = csv::Writer::from_path(path).map_err(err)?;
    for r in rows {
        w.serialize(r).map_err(err)?;
    }
    w.flush().map_err(|e| Error::Log(format!("{}: {e}", path.display())))
}

fn read_metrics(path: &Path) -> Result<Vec<IterRecord>, Error> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let err = |e: csv::Error| Error::Log(format!("{}: {e}", path.display()));
    csv::Reader::from_path(path)
        .map_err(err)?
        .deserialize()
        .collect::<Result<Vec<IterRecord>, _>>()
        .map_err(err)
}

fn eval(
    preset: &str,
    checkpoint: Option<&Path>,
    null_policy: bool,
    seed: Option<u64>,
    out: &Path,
    mode: Option<Mode>,
) -> Result<(), Failure> {
    let cfg = Config::resolve(preset)?;
    let seed = seed.unwrap_or(cfg.env.scenario.rng_seed);
    let feeder = Arc::new(cfg.load_feeder()?);
    let ck = match checkpoint {
        Some(p) if !(null_policy || cfg.eval.null_policy) => {
            let ck = Checkpoint::load(p)?;
            ck.check_action_space(&cfg.env.action)?;
            Some(ck)
        }
        _ => None,
    };
    let mode = match mode {
        Some(Mode::Deployment) => ObservationMode::Deployment,
        Some(Mode::Aggregate) => ObservationMode::Aggregate,
        None => cfg.eval.mode,
    };
    let ctrl = match &ck {
        Some(ck) => Controller::Policy(&ck.agent),
        None if null_policy || cfg.eval.null_policy => Controller::Null,
        None => return Err(Failure::Usage("eval needs --checkpoint or --null-policy".into())),
    };
    fs::create_dir_all(out).map_err(|e| io_err(out, e))?;
    let mut manifest = Manifest::start("eval", preset, &cfg, seed, out);
    let scenario = preset_scenario(&cfg.env, &feeder, seed)?;
    let res = run_episode(feeder, &cfg.env, scenario, mode, ctrl)?;
    res.log.write_csv(&out.join("episode.csv"))?;
    res.log.write_voltages_csv(&out.join("voltages.csv"))?;
    let summary = serde_json::to_string_pretty(&res.summary).expect("summary serializes");
    fs::write(out.join("summary.json"), summary + "\n").map_err(|e| io_err(out, e))?;
    let s = &res.summary;
    println!(
        "mean y  before {:.4e}  during {:.4e}  after {:.4e}",
        s.before.mean_y, s.during.mean_y, s.after.mean_y
    );
    println!("total reward {:.4}  curtailment energy {:.4e} pu*s", s.total_reward, s.curtailment_energy);
    manifest.finish(out)
}

fn held_out_eval(
    preset: &str,
    checkpoint: Option<&Path>,
    n: u64,
    seed: Option<u64>,
    out: &Path,
    mode: Option<Mode>,
) -> Result<(), Failure> {
    let cfg = Config::resolve(preset)?;
    let seed = seed.unwrap_or(cfg.env.scenario.rng_seed);
    let feeder = Arc::new(cfg.load_feeder()?);
    let path = checkpoint.ok_or_else(|| Failure::Usage("--held-out needs --checkpoint".into()))?;
    let ck = Checkpoint::load(path)?;
    ck.check_action_space(&cfg.env.action)?;
    let mode = match mode {
        Some(Mode::Deployment) => ObservationMode::Deployment,
        Some(Mode::Aggregate) => ObservationMode::Aggregate,
        None => cfg.eval.mode,
    };
    fs::create_dir_all(out).map_err(|e| io_err(out, e))?;
    let mut manifest = Manifest::start("eval", preset, &cfg, seed, out);
    let cases = held_out_suite(&feeder, &cfg.env, &ck.agent, seed, n, mode)?;
    println!("  idx   hour  frac   baseline_y   defended_y  reduction  to_null");
    for c in &cases {
        println!(
            "{:5}  {:5.2}  {:.2}  {:11.4e}  {:11.4e}  {:8.1}%  {}",
            c.index,
            c.hour,
            c.compromised_fraction,
            c.baseline_y,
            c.defended_y,
            100.0 * c.reduction(),
            c.steps_to_null.map_or("never".into(), |k| k.to_string())
        );
    }
    let text = serde_json::to_string_pretty(&cases).expect("cases serialize");
    let p = out.join("held_out.json");
    fs::write(&p, text + "\n").map_err(|e| io_err(&p, e))?;
    manifest.finish(out)
}

fn validate_feeder(source: &str) -> Result<(), Failure> {
    let model = if source == droopguard::config::BUILTIN_FEEDER {
        ieee37_balanced()
    } else {
        load_feeder(source)?
    };
    let total_p: f64 = model.buses().iter().map(|b| b.p_load).sum();
    let total_q: f64 = model.buses().iter().map(|b| b.q_load).sum();
    let total_s: f64 = model.inverters().iter().map(|i| i.s).sum();
    println!(
        "{} buses, {} lines, {} inverters, load {:.4}+j{:.4} pu, inverter capacity {:.4} pu, source {:.4} pu",
        model.n_buses(),
        model.lines().len(),
        model.inverters().len(),
        total_p,
        total_q,
        total_s,
        model.source_v()
    );
    let sol = solve_power_flow(&model, &model.base_injections(), model.source_v(), PowerFlowOptions::default())?;
    let mags = sol.magnitudes();
    let (lo, hi) = mags
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(*v), b.max(*v)));
    println!(
        "base case: {} sweeps, residual {:.2e}, |V| in [{lo:.4}, {hi:.4}] pu",
        sol.iterations, sol.residual
    );
    Ok(())
}
