use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use mocco::agent::{AgentKind, ExplorationMode};
use mocco::envs::EnvName;
use mocco::harness::compare::parse_seeds;
use mocco::harness::diagnostics::{surface_dump, write_surface_csv};
use mocco::harness::{ablate, oracles, run_comparison, RunConfig, RunStatus, Trainer};
use mocco::{Error, Result};

#[derive(Parser)]
#[command(
    name = "mocco",
    version,
    about = "TD3 / MOCCO training and diagnostics on small continuous-control tasks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one agent.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Sweep exploration modes over seeds and tabulate final returns.
    Compare {
        #[command(flatten)]
        common: Common,
        /// Comma-separated: none, normal, ou, ge.
        #[arg(long, default_value = "none,normal,ou,ge")]
        modes: String,
        /// Inclusive range `a..b` or list `a,b,c`.
        #[arg(long, default_value = "0..9")]
        seeds: String,
        /// Runs executed concurrently.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Sweep one hyperparameter (beta, N, mc_size or any config key).
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        param: String,
        /// Comma-separated values.
        #[arg(long)]
        values: String,
        #[arg(long, default_value = "0..9")]
        seeds: String,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Train with Q-value probes and correction traces, then dump the
    /// uncertainty / critic surface at one state.
    Diag {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 5000)]
        probe_interval: usize,
        #[arg(long, default_value_t = 256)]
        probe_batch: usize,
        /// Lattice points per action axis for the surface dump.
        #[arg(long, default_value_t = 41)]
        resolution: usize,
        /// Observation for the surface dump (comma-separated); defaults to
        /// an initial state.
        #[arg(long, allow_hyphen_values = true)]
        state: Option<String>,
    },
    /// Check implementation values against hand-derived references.
    TestOracles,
}

#[derive(Args)]
struct Common {
    /// TOML run config; unspecified keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    #[arg(long)]
    env: Option<EnvName>,
    #[arg(long)]
    agent: Option<AgentKind>,
    /// Exploration mode: none, normal, ou or ge.
    #[arg(long)]
    mode: Option<ExplorationMode>,
    #[arg(long)]
    total_steps: Option<usize>,
    /// Override any config key, e.g. `--set beta=0.5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl Common {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(d) = &self.output_dir {
            cfg.output_dir = d.clone();
        }
        if let Some(e) = self.env {
            cfg.env_name = e;
        }
        if let Some(a) = self.agent {
            cfg.agent_name = a;
        }
        if let Some(m) = self.mode {
            cfg.exploration_mode = m;
        }
        if let Some(n) = self.total_steps {
            cfg.total_steps = n;
        }
        cfg.apply_overrides(&self.overrides)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

fn parse_list<T: std::str::FromStr<Err = Error>>(s: &str) -> Result<Vec<T>> {
    s.split(',').map(|x| x.trim().parse()).collect()
}

fn parse_floats(s: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(|x| {
            x.trim()
                .parse()
                .map_err(|_| Error::Input(format!("bad number '{x}' in '{s}'")))
        })
        .collect()
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Train { common } => {
            let cfg = common.resolve()?;
            let dir = cfg.output_dir.clone();
            let summary = Trainer::new(cfg)?.run()?;
            println!("metrics: {}", dir.join("metrics.jsonl").display());
            if let Some(m) = summary.final10_mean {
                println!("final-10 evaluation mean: {m:.4}");
            }
            if summary.status == RunStatus::Failed {
                eprintln!("run failed: {}", summary.error.unwrap_or_default());
                return Ok(false);
            }
            Ok(true)
        }
        Command::Compare {
            common,
            modes,
            seeds,
            jobs,
        } => {
            let cfg = common.resolve()?;
            let modes: Vec<ExplorationMode> = parse_list(&modes)?;
            let seeds = parse_seeds(&seeds)?;
            let out = cfg.output_dir.clone();
            let table = run_comparison(&cfg, &modes, &seeds, &out, jobs)?;
            print!("{}", table.render());
            println!("table: {}", out.join("comparison.csv").display());
            Ok(true)
        }
        Command::Ablate {
            common,
            param,
            values,
            seeds,
            jobs,
        } => {
            let cfg = common.resolve()?;
            let values: Vec<String> = values.split(',').map(|v| v.trim().to_string()).collect();
            let seeds = parse_seeds(&seeds)?;
            let out = cfg.output_dir.clone();
            let table = ablate(&cfg, &param, &values, &seeds, &out, jobs)?;
            print!("{}", table.render());
            println!("table: {}", out.join("comparison.csv").display());
            Ok(true)
        }
        Command::Diag {
            common,
            probe_interval,
            probe_batch,
            resolution,
            state,
        } => {
            let mut cfg = common.resolve()?;
            if !cfg.needs_controller() {
                return Err(Error::Config(
                    "diag needs the ensemble: use agent_name = mocco or exploration_mode = guided".into(),
                ));
            }
            cfg.q_probe_interval = probe_interval;
            cfg.q_probe_batch = probe_batch;
            cfg.trace_correction = true;
            cfg.validate()?;
            let dir = cfg.output_dir.clone();
            let mut trainer = Trainer::new(cfg)?;
            let summary = trainer.run()?;
            println!("q diagnostics: {}", dir.join("qdiag.csv").display());
            println!("correction trace: {}", dir.join("correction_trace.csv").display());
            if trainer.agent.spec().action_dim == 2 {
                let s = match state {
                    Some(s) => parse_floats(&s)?,
                    None => trainer.config.env_name.make().reset(trainer.config.seed),
                };
                let ens = &trainer.controller.as_ref().expect("checked above").ensemble;
                let rows = surface_dump(&trainer.agent, ens, &s, resolution)?;
                let path = dir.join("surface.csv");
                write_surface_csv(&path, &rows)?;
                println!("surface: {}", path.display());
            } else {
                eprintln!("surface dump skipped: action space is not 2-D");
            }
            Ok(summary.status == RunStatus::Completed)
        }
        Command::TestOracles => {
            let mut ok = true;
            for c in oracles::run_all()? {
                let verdict = if c.passed() { "PASS" } else { "FAIL" };
                ok &= c.passed();
                println!(
                    "{verdict}  {:<44} computed {:?}  expected {:?}  max err {:.3e} (tol {:.0e})",
                    c.name,
                    c.computed,
                    c.expected,
                    c.max_error(),
                    c.tolerance
                );
            }
            Ok(ok)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
