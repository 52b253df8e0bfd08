use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use tsc_core::controllers::ControllerParams;
use tsc_core::harness::{
    self, synthesize_flow, write_flow, BasePattern, FlowSource, FlowSynthesisSpec, Method, NetworkSource, RunConfig,
};
use tsc_core::learner::TrainConfig;
use tsc_core::network::NetworkSpec;

#[derive(Parser)]
#[command(name = "tsc", version, about = "Grid traffic signal control: flows, baselines, PPO training, reports")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Network spec file (`grid <rows> <cols> <lane_length_m>`).
    #[arg(long)]
    network: Option<PathBuf>,
    /// Flow CSV (`enter_s,route`).
    #[arg(long)]
    flow: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Run configuration JSON; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize a fluctuating flow and its arrival statistics.
    GenFlow {
        #[arg(long)]
        network: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Synthesis spec JSON; flags below override it.
        #[arg(long)]
        config: Option<PathBuf>,
        /// uniform, peaked_od or rush_hour_ramp.
        #[arg(long)]
        pattern: Option<BasePattern>,
        #[arg(long)]
        vehicles: Option<usize>,
        #[arg(long)]
        resample_fraction: Option<f64>,
        #[arg(long)]
        fluctuation_factor: Option<f64>,
    },
    /// Run one classical controller episode.
    Baseline {
        #[command(flatten)]
        common: Common,
        /// fixed, maxpressure, efficientmp, advancedmp or policy.
        #[arg(long)]
        controller: Option<String>,
        /// Agent file, for `--controller policy`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Train the PPO agent.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        iterations: Option<usize>,
        /// Continue from `<out>/train_state.json` if present.
        #[arg(long)]
        resume: bool,
    },
    /// Evaluate several controllers head to head.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Comma-separated controller names.
        #[arg(long, value_delimiter = ',', default_value = "fixed,maxpressure,efficientmp,advancedmp")]
        controller: Vec<String>,
        /// Agent file; adds a `policy` row.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        episodes: Option<usize>,
    },
    /// Export correlation, value-error and mixing-weight CSVs from a run directory.
    Report {
        /// Run directory.
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn run_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => {
            let network = common.network.clone().context("--network is required without --config")?;
            let flow = common.flow.clone().context("--flow is required without --config")?;
            RunConfig {
                network: NetworkSource::Path(network),
                flow: FlowSource::Path(flow),
                controller: None,
                controller_params: ControllerParams::default(),
                learner: None,
                sim: Default::default(),
                pressure_form: Default::default(),
                out: PathBuf::from("out"),
                seed: 0,
                episodes: 1,
            }
        }
    };
    if let Some(n) = &common.network {
        cfg.network = NetworkSource::Path(n.clone());
    }
    if let Some(f) = &common.flow {
        cfg.flow = FlowSource::Path(f.clone());
    }
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(o) = &common.out {
        cfg.out = o.clone();
    }
    Ok(cfg)
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::GenFlow {
            network,
            out,
            seed,
            config,
            pattern,
            vehicles,
            resample_fraction,
            fluctuation_factor,
        } => {
            let mut spec: FlowSynthesisSpec = match config {
                Some(p) => serde_json::from_str(&std::fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?)?,
                None => FlowSynthesisSpec::default(),
            };
            spec.seed = seed;
            spec.pattern = pattern.unwrap_or(spec.pattern);
            spec.total_vehicles = vehicles.unwrap_or(spec.total_vehicles);
            spec.resample_fraction = resample_fraction.unwrap_or(spec.resample_fraction);
            spec.fluctuation_factor = fluctuation_factor.unwrap_or(spec.fluctuation_factor);
            let net = NetworkSpec::load(&network)?.build()?;
            let flow = synthesize_flow(&net, &spec)?;
            write_flow(&out, &flow)?;
            let s = &flow.stats;
            println!(
                "{} vehicles; arrivals per {} s: mean {:.1}, std {:.1}, max {}, min {}",
                s.vehicles, s.bin_s, s.mean, s.std, s.max, s.min
            );
        }
        Command::Baseline {
            common,
            controller,
            checkpoint,
        } => {
            let mut cfg = run_config(&common)?;
            if let Some(c) = controller {
                cfg.controller = Some(c);
                cfg.learner = None;
            }
            if checkpoint.is_some() {
                cfg.controller_params.checkpoint = checkpoint;
            }
            let r = harness::run_baseline(&cfg)?;
            match r.average_travel_time_s {
                Some(t) => println!("{}: average travel time {t:.2} s over {} vehicles", r.method, r.vehicles),
                None => println!("{}: no vehicles entered; travel time undefined", r.method),
            }
        }
        Command::Train {
            common,
            iterations,
            resume,
        } => {
            let mut cfg = run_config(&common)?;
            cfg.controller = None;
            let mut tc = cfg.learner.take().unwrap_or_else(TrainConfig::default);
            if let Some(k) = iterations {
                tc.ppo.iterations = k;
            }
            cfg.learner = Some(tc);
            let o = harness::run_training(&cfg, resume)?;
            println!(
                "initial travel time {:.2} s; final (mean of last 10 evaluations) {:.2} s",
                o.initial_eval.travel.average_travel_time_s, o.final_travel_time
            );
        }
        Command::Eval {
            common,
            controller,
            checkpoint,
            episodes,
        } => {
            let mut cfg = run_config(&common)?;
            if cfg.controller.is_none() && cfg.learner.is_none() {
                cfg.controller = controller.first().cloned();
            }
            if let Some(e) = episodes {
                cfg.episodes = e;
            }
            let mut methods: Vec<Method> = controller
                .iter()
                .filter(|c| c.as_str() != "policy")
                .map(|c| Method {
                    label: c.clone(),
                    controller: c.clone(),
                    params: cfg.controller_params.clone(),
                })
                .collect();
            if let Some(ck) = checkpoint {
                methods.push(Method {
                    label: "policy".into(),
                    controller: "policy".into(),
                    params: ControllerParams {
                        checkpoint: Some(ck),
                        ..cfg.controller_params.clone()
                    },
                });
            }
            if methods.is_empty() {
                bail!("no methods to evaluate");
            }
            print!("{}", harness::run_eval(&cfg, &methods)?.to_markdown());
        }
        Command::Report { run, out } => {
            let files = harness::export_reports(&run, &out)?;
            for p in files.correlation.iter().chain(&files.value_error).chain(&files.mixing) {
                println!("{}", p.display());
            }
        }
    }
    Ok(())
}
