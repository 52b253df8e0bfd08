//! Run configuration, baseline and training runs, evaluation tables and
//! report export. Every run directory gets a `manifest.json` holding the
//! resolved configuration, so a run can be repeated from it alone.

pub mod flow;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::controllers::{Controller, ControllerParams, ControllerRegistry};
use crate::episode::run_episode;
use crate::error::{Result, TscError};
use crate::learner::{self, register_policy, Agent, Env, PolicyController, TrainConfig, TrainOutcome, Trainer};
use crate::network::{NetworkSpec, RoadNetwork};
use crate::neural::mixing_csv;
use crate::rewards::{reward_correlation_report, PressureForm, RewardKind, RewardLedger, RewardRow};
use crate::sim::{FlowSchedule, SimConfig, SimState};

pub use flow::{synthesize_flow, write_flow, BasePattern, FlowStats, FlowSynthesisSpec, SynthesizedFlow};

pub(crate) fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| TscError::io(path, e))
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| TscError::io(path, e))
}

/// A network spec file or an inline spec.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum NetworkSource {
    Path(PathBuf),
    Inline(NetworkSpec),
}

/// A flow CSV or a synthesis spec.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum FlowSource {
    Path(PathBuf),
    Synthesize(FlowSynthesisSpec),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub network: NetworkSource,
    pub flow: FlowSource,
    #[serde(default)]
    pub controller: Option<String>,
    #[serde(default)]
    pub controller_params: ControllerParams,
    #[serde(default)]
    pub learner: Option<TrainConfig>,
    #[serde(default)]
    pub sim: SimConfig,
    #[serde(default)]
    pub pressure_form: PressureForm,
    pub out: PathBuf,
    #[serde(default)]
    pub seed: u64,
    /// Episodes per method in evaluations.
    #[serde(default = "one")]
    pub episodes: usize,
}

fn one() -> usize {
    1
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        Ok(serde_json::from_str(&read_text(path)?)?)
    }

    pub fn validate(&self) -> Result<()> {
        match (&self.controller, &self.learner) {
            (Some(_), Some(_)) => return Err(TscError::invalid("select either a controller or a learner, not both")),
            (None, None) => return Err(TscError::invalid("select a controller or a learner")),
            _ => {}
        }
        if let NetworkSource::Path(p) = &self.network {
            if !p.exists() {
                return Err(TscError::NotFound(format!("network spec {}", p.display())));
            }
        }
        if let FlowSource::Path(p) = &self.flow {
            if !p.exists() {
                return Err(TscError::NotFound(format!("flow file {}", p.display())));
            }
        }
        if self.episodes == 0 {
            return Err(TscError::invalid("episodes must be positive"));
        }
        self.sim.validate()
    }

    pub fn network_spec(&self) -> Result<NetworkSpec> {
        match &self.network {
            NetworkSource::Path(p) => NetworkSpec::load(p),
            NetworkSource::Inline(s) => Ok(s.clone()),
        }
    }

    /// Flow for evaluation episode `k`: a file flow is the same for every
    /// episode, a synthesized one shifts its seed by `k`.
    pub fn flow_for(&self, net: &RoadNetwork, k: usize) -> Result<FlowSchedule> {
        match &self.flow {
            FlowSource::Path(p) => FlowSchedule::load(p),
            FlowSource::Synthesize(spec) => {
                let spec = FlowSynthesisSpec {
                    seed: spec.seed.wrapping_add(k as u64),
                    ..spec.clone()
                };
                Ok(synthesize_flow(net, &spec)?.flow)
            }
        }
    }

    pub fn env(&self) -> Result<Env> {
        let net = Arc::new(self.network_spec()?.build()?);
        let flow = Arc::new(self.flow_for(&net, 0)?);
        flow.validate(&net)?;
        Ok(Env {
            net,
            flow,
            sim: self.sim.clone(),
        })
    }
}

/// Registry with the classical controllers and `policy`.
pub fn registry() -> ControllerRegistry {
    let mut r = ControllerRegistry::with_builtin();
    register_policy(&mut r);
    r
}

/// FNV-1a, used to fingerprint inputs in manifests.
pub fn fingerprint(bytes: &[u8]) -> String {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    format!("{h:016x}")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub config: RunConfig,
    pub network: NetworkSpec,
    pub flow_vehicles: usize,
    pub flow_fingerprint: String,
    pub controller: Option<serde_json::Value>,
}

fn write_manifest(cfg: &RunConfig, env: &Env, command: &str, controller: Option<serde_json::Value>) -> Result<()> {
    let spec = cfg.network_spec()?;
    write_text(&cfg.out.join("network.txt"), &spec.to_text())?;
    let m = Manifest {
        tool: "tsc".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        command: command.into(),
        config: cfg.clone(),
        network: spec,
        flow_vehicles: env.flow.len(),
        flow_fingerprint: fingerprint(env.flow.to_csv().as_bytes()),
        controller,
    };
    learner::write_json(&cfg.out.join("manifest.json"), &m)
}

fn create_out(cfg: &RunConfig) -> Result<()> {
    std::fs::create_dir_all(&cfg.out).map_err(|e| TscError::io(&cfg.out, e))
}

/// Runs `ctrl` on a fresh state to the horizon.
pub fn controller_episode(ctrl: &mut dyn Controller, state: &mut SimState, form: PressureForm) -> Result<RewardLedger> {
    ctrl.reset(state)?;
    run_episode(state, form, |s, d| ctrl.decide(s, d))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntersectionRewards {
    pub intersection: usize,
    pub ifdg: f64,
    pub stt: f64,
    pub queue: f64,
    pub pressure: f64,
    pub timeloss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeReport {
    pub method: String,
    pub vehicles: usize,
    /// `None` when no vehicle entered the network.
    pub average_travel_time_s: Option<f64>,
    pub travel_time_defined: bool,
    pub throughput: usize,
    pub active: usize,
    pub unserved: usize,
    pub rewards: Vec<IntersectionRewards>,
}

impl EpisodeReport {
    pub fn from_episode(method: &str, state: &SimState, ledger: &RewardLedger) -> EpisodeReport {
        let stats = state.travel_time_stats().ok();
        let totals: Vec<Vec<f64>> = RewardKind::ALL.iter().map(|&k| ledger.totals(k)).collect();
        let at = |k: RewardKind, x: usize| totals[RewardKind::ALL.iter().position(|&q| q == k).expect("listed")][x];
        EpisodeReport {
            method: method.into(),
            vehicles: state.inserted_count(),
            average_travel_time_s: stats.as_ref().map(|s| s.average_travel_time_s),
            travel_time_defined: stats.is_some(),
            throughput: state.departed_count(),
            active: state.active_count(),
            unserved: state.unserved_count(),
            rewards: (0..ledger.n_intersections())
                .map(|x| IntersectionRewards {
                    intersection: x,
                    ifdg: at(RewardKind::Ifdg, x),
                    stt: at(RewardKind::Stt, x),
                    queue: at(RewardKind::Queue, x),
                    pressure: at(RewardKind::Pressure, x),
                    timeloss: at(RewardKind::Timeloss, x),
                })
                .collect(),
        }
    }

    /// `intersection,r_ifdg,r_stt,r_queue,r_pressure,r_timeloss` episode sums.
    pub fn rewards_csv(&self) -> String {
        let mut out = String::from("intersection,r_ifdg,r_stt,r_queue,r_pressure,r_timeloss\n");
        for r in &self.rewards {
            let _ = writeln!(out, "{},{},{},{},{},{}", r.intersection, r.ifdg, r.stt, r.queue, r.pressure, r.timeloss);
        }
        out
    }
}

/// One controller episode. Writes `baseline.json`, `baseline.csv`
/// (per-intersection reward sums), `rewards.csv` (per-step ledger) and the manifest.
pub fn run_baseline(cfg: &RunConfig) -> Result<EpisodeReport> {
    cfg.validate()?;
    let name = cfg
        .controller
        .as_deref()
        .ok_or_else(|| TscError::invalid("baseline runs need a controller"))?;
    let mut ctrl = registry().create(name, &cfg.controller_params)?;
    let env = cfg.env()?;
    let mut state = env.reset()?;
    let ledger = controller_episode(ctrl.as_mut(), &mut state, cfg.pressure_form)?;
    let report = EpisodeReport::from_episode(name, &state, &ledger);
    create_out(cfg)?;
    learner::write_json(&cfg.out.join("baseline.json"), &report)?;
    write_text(&cfg.out.join("baseline.csv"), &report.rewards_csv())?;
    write_text(&cfg.out.join("rewards.csv"), &ledger.to_csv())?;
    write_manifest(cfg, &env, "baseline", Some(ctrl.describe()))?;
    Ok(report)
}

/// Trains the configured learner; artifacts go to `cfg.out`. With
/// `resume`, continues from `cfg.out/train_state.json`.
pub fn run_training(cfg: &RunConfig, resume: bool) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut tc = cfg
        .learner
        .clone()
        .ok_or_else(|| TscError::invalid("training runs need a learner configuration"))?;
    tc.seed = cfg.seed;
    let env = cfg.env()?;
    create_out(cfg)?;
    write_manifest(cfg, &env, "train", None)?;
    let state_path = cfg.out.join("train_state.json");
    let mut trainer = if resume && state_path.exists() {
        Trainer::resume(env.clone(), tc.clone(), &Trainer::load_checkpoint(&state_path)?)?
    } else {
        Trainer::new(env.clone(), tc.clone())?
    };
    let outcome = trainer.run(Some(&cfg.out))?;
    // Ledger of the trained policy for the correlation report.
    let mut ctrl = PolicyController::from_agent(&trainer.agent);
    let mut state = env.reset()?;
    let ledger = controller_episode(&mut ctrl, &mut state, tc.ppo.pressure_form)?;
    write_text(&cfg.out.join("rewards.csv"), &ledger.to_csv())?;
    Ok(outcome)
}

/// A method in an evaluation table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Method {
    /// Row label.
    pub label: String,
    pub controller: String,
    #[serde(default)]
    pub params: ControllerParams,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub label: String,
    pub travel_times: Vec<f64>,
    pub mean: f64,
    /// Population standard deviation over episodes.
    pub std: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalTable {
    pub rows: Vec<EvalRow>,
}

impl EvalTable {
    /// `method,mean_travel_time_s,std_travel_time_s,episodes`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("method,mean_travel_time_s,std_travel_time_s,episodes\n");
        for r in &self.rows {
            let _ = writeln!(out, "{},{},{},{}", r.label, r.mean, r.std, r.travel_times.len());
        }
        out
    }

    pub fn to_markdown(&self) -> String {
        let mut out = String::from("| Method | Travel time (s) |\n|---|---|\n");
        for r in &self.rows {
            let _ = writeln!(out, "| {} | {:.2} ± {:.2} |", r.label, r.mean, r.std);
        }
        out
    }
}

/// Evaluates every method over `cfg.episodes` episodes and writes
/// `eval.csv`, `eval.md` and `eval.json`.
pub fn run_eval(cfg: &RunConfig, methods: &[Method]) -> Result<EvalTable> {
    cfg.validate()?;
    if methods.is_empty() {
        return Err(TscError::invalid("evaluation needs at least one method"));
    }
    let reg = registry();
    let env = cfg.env()?;
    let mut table = EvalTable::default();
    for m in methods {
        let mut ctrl = reg.create(&m.controller, &m.params)?;
        let mut tts = Vec::with_capacity(cfg.episodes);
        for k in 0..cfg.episodes {
            let flow = cfg.flow_for(&env.net, k)?;
            let mut state = SimState::new(env.net.clone(), &flow, env.sim.clone())?;
            controller_episode(ctrl.as_mut(), &mut state, cfg.pressure_form)?;
            tts.push(state.travel_time_stats()?.average_travel_time_s);
        }
        let mean = tts.iter().sum::<f64>() / tts.len() as f64;
        let std = (tts.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / tts.len() as f64).sqrt();
        table.rows.push(EvalRow {
            label: m.label.clone(),
            travel_times: tts,
            mean,
            std,
        });
    }
    create_out(cfg)?;
    write_text(&cfg.out.join("eval.csv"), &table.to_csv())?;
    write_text(&cfg.out.join("eval.md"), &table.to_markdown())?;
    learner::write_json(&cfg.out.join("eval.json"), &table)?;
    write_manifest(cfg, &env, "eval", Some(serde_json::to_value(methods)?))?;
    Ok(table)
}

/// Files written by [`export_reports`].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ReportFiles {
    pub correlation: Option<PathBuf>,
    pub value_error: Option<PathBuf>,
    pub mixing: Vec<PathBuf>,
}

/// From a run directory: `correlation.csv` from `rewards.csv`,
/// `value_error.csv` from `outcome.json`, and `mixing_{policy,value}_round{r}.csv`
/// from `agent.json`. Missing inputs are skipped.
pub fn export_reports(run_dir: &Path, out: &Path) -> Result<ReportFiles> {
    std::fs::create_dir_all(out).map_err(|e| TscError::io(out, e))?;
    let mut files = ReportFiles::default();
    let rewards = run_dir.join("rewards.csv");
    if rewards.exists() {
        let rows: Vec<RewardRow> = RewardLedger::rows_from_csv(&read_text(&rewards)?)?;
        let path = out.join("correlation.csv");
        write_text(&path, &reward_correlation_report(&rows)?.to_csv())?;
        files.correlation = Some(path);
    }
    let outcome = run_dir.join("outcome.json");
    if outcome.exists() {
        let o: TrainOutcome = serde_json::from_str(&read_text(&outcome)?)?;
        let path = out.join("value_error.csv");
        write_text(&path, &learner::value_error_csv(&o.curve))?;
        files.value_error = Some(path);
    }
    let agent = run_dir.join("agent.json");
    if agent.exists() {
        let net = NetworkSpec::load(&run_dir.join("network.txt"))?.build()?;
        let agent = Agent::from_file(&Agent::read_file(&agent)?, &net)?;
        for (head, model) in [("policy", &agent.policy), ("value", &agent.value)] {
            for (r, w) in model.mixing_matrices().into_iter().enumerate() {
                if let Some(w) = w {
                    let path = out.join(format!("mixing_{head}_round{r}.csv"));
                    write_text(&path, &mixing_csv(w.view()))?;
                    files.mixing.push(path);
                }
            }
        }
    }
    Ok(files)
}
