//! PPO-Clip over the simulator with one shared policy network and one
//! shared value network for all intersections.
//!
//! Each iteration collects a few stochastic episodes on the same flow,
//! computes per-intersection GAE advantages, runs several epochs of
//! minibatch updates and evaluates the greedy policy once.

pub mod gae;
pub mod loss;

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::controllers::{Controller, ControllerParams, ControllerRegistry};
use crate::episode::run_episode;
use crate::error::{Result, TscError};
use crate::features::{AugmentedObservation, FirstPrevious, Observer, DEFAULT_ENCODING_DIM, RAW_DIM};
use crate::network::{RoadNetwork, MOVEMENTS_PER_INTERSECTION, PHASES_PER_INTERSECTION};
use crate::neural::optim::AdamState;
use crate::neural::{clip_grad_norm, linear_decay, softmax_rows, Adam, Head, MixingMode, NetCheckpoint, NetConfig, NlTsc, Tape};
use crate::rewards::{PressureForm, RewardKind, RewardLedger};
use crate::sim::{FlowSchedule, SimConfig, SimState, TravelTimeStats};

pub use gae::{compute_gae, discounted_returns, gae_stream, normalize};
pub use loss::{clip_advantage, log_softmax_rows, ppo_policy_loss, value_loss, PolicyLossStats};

/// Independent random stream `tag/a/b` of a run seed.
pub fn stream_rng(seed: u64, tag: u64, a: u64, b: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((tag << 56) ^ (a << 20) ^ b);
    rng
}

const TAG_INIT: u64 = 1;
const TAG_ROLLOUT: u64 = 2;
const TAG_SHUFFLE: u64 = 3;
const TAG_EVAL: u64 = 4;

/// Network architecture and observation settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AgentConfig {
    pub mixing: MixingMode,
    pub rank: Option<usize>,
    pub encoding_dim: usize,
    /// `None` uses `v_max * T_phase`.
    pub range_m: Option<f64>,
    pub first_previous: FirstPrevious,
    /// Multiplier applied to the vehicle-count features before the network.
    pub count_scale: f64,
}

impl Default for AgentConfig {
    fn default() -> Self {
        AgentConfig {
            mixing: MixingMode::Learned,
            rank: None,
            encoding_dim: DEFAULT_ENCODING_DIM,
            range_m: None,
            first_previous: FirstPrevious::Zeros,
            count_scale: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PpoConfig {
    pub clip_eps: f64,
    pub gamma: f64,
    pub lambda: f64,
    pub episodes_per_iteration: usize,
    /// Decision steps (whole-network samples) per minibatch.
    pub minibatch: usize,
    pub epochs: usize,
    pub iterations: usize,
    pub lr: f64,
    /// Linear decay of the learning rate to zero over `iterations`.
    pub lr_decay: bool,
    pub adam_eps: f64,
    pub entropy_coef: f64,
    pub max_grad_norm: Option<f64>,
    pub reward: RewardKind,
    pub pressure_form: PressureForm,
    /// Multiplier on rewards before advantage estimation.
    pub reward_scale: f64,
    pub normalize_advantages: bool,
    /// Evaluate by sampling instead of taking the most likely phase.
    pub eval_sample: bool,
    /// Evaluate the policy after every `eval_every` iterations.
    pub eval_every: usize,
}

impl Default for PpoConfig {
    fn default() -> Self {
        PpoConfig {
            clip_eps: 0.2,
            gamma: 0.99,
            lambda: 0.95,
            episodes_per_iteration: 2,
            minibatch: 64,
            epochs: 10,
            iterations: 200,
            lr: 3e-4,
            lr_decay: true,
            adam_eps: 1e-5,
            entropy_coef: 0.0,
            max_grad_norm: Some(0.5),
            reward: RewardKind::Ifdg,
            pressure_form: PressureForm::Absolute,
            reward_scale: 1e-4,
            normalize_advantages: true,
            eval_sample: false,
            eval_every: 1,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(TscError::invalid(format!("ppo: {what}")));
        if !(self.clip_eps > 0.0 && self.clip_eps < 1.0) {
            return bad("clip epsilon must lie in (0, 1)");
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return bad("gamma must lie in [0, 1)");
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return bad("lambda must lie in [0, 1]");
        }
        if self.episodes_per_iteration == 0 || self.minibatch == 0 || self.eval_every == 0 {
            return bad("episodes, minibatch and eval interval must be positive");
        }
        if !(self.lr >= 0.0 && self.reward_scale > 0.0 && self.adam_eps > 0.0) {
            return bad("learning rate, reward scale and adam epsilon must be positive");
        }
        Ok(())
    }
}

/// Everything needed to start fresh episodes.
#[derive(Clone, Debug)]
pub struct Env {
    pub net: Arc<RoadNetwork>,
    pub flow: Arc<FlowSchedule>,
    pub sim: SimConfig,
}

impl Env {
    pub fn reset(&self) -> Result<SimState> {
        SimState::new(self.net.clone(), &self.flow, self.sim.clone())
    }
}

/// Policy and value networks plus the observation settings they were trained with.
#[derive(Clone, Debug)]
pub struct Agent {
    pub config: AgentConfig,
    pub policy: NlTsc,
    pub value: NlTsc,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AgentFile {
    pub format: String,
    pub version: u32,
    pub config: AgentConfig,
    pub policy: NetCheckpoint,
    pub value: NetCheckpoint,
}

const AGENT_FORMAT: &str = "tsc-agent";
const AGENT_VERSION: u32 = 1;

impl Agent {
    pub fn net_config(net: &RoadNetwork, config: &AgentConfig) -> NetConfig {
        NetConfig {
            n_intersections: net.num_intersections(),
            rank: config.rank,
            input_dim: 2 * RAW_DIM + config.encoding_dim,
            hidden: crate::neural::model::HIDDEN,
            mixing: config.mixing,
        }
    }

    pub fn new(net: &RoadNetwork, config: AgentConfig, seed: u64) -> Result<Agent> {
        let nc = Self::net_config(net, &config);
        let mut rng = stream_rng(seed, TAG_INIT, 0, 0);
        let policy = NlTsc::new(nc.clone(), Head::Policy, Some(net), rng.random())?;
        let value = NlTsc::new(nc, Head::Value, Some(net), rng.random())?;
        Ok(Agent { config, policy, value })
    }

    pub fn n_intersections(&self) -> usize {
        self.policy.config().n_intersections
    }

    pub fn observer(&self, state: &SimState) -> Result<Observer> {
        let range = self.config.range_m.unwrap_or_else(|| Observer::default_range(state));
        Observer::new(state, range, self.config.encoding_dim, self.config.first_previous)
    }

    /// Network input for one decision: one row per intersection, count
    /// features scaled by `count_scale`.
    pub fn encode(&self, obs: &[AugmentedObservation]) -> Array2<f64> {
        let cols = obs.first().map_or(0, |o| o.0.len());
        let mut x = Array2::zeros((obs.len(), cols));
        let counts = PHASES_PER_INTERSECTION..PHASES_PER_INTERSECTION + 2 * MOVEMENTS_PER_INTERSECTION;
        for (i, o) in obs.iter().enumerate() {
            for (j, &v) in o.0.iter().enumerate() {
                let in_counts = counts.contains(&j) || counts.contains(&j.wrapping_sub(RAW_DIM));
                x[[i, j]] = if in_counts { v * self.config.count_scale } else { v };
            }
        }
        x
    }

    pub fn to_file(&self) -> AgentFile {
        AgentFile {
            format: AGENT_FORMAT.into(),
            version: AGENT_VERSION,
            config: self.config.clone(),
            policy: self.policy.to_checkpoint(),
            value: self.value.to_checkpoint(),
        }
    }

    pub fn from_file(file: &AgentFile, net: &RoadNetwork) -> Result<Agent> {
        if file.format != AGENT_FORMAT || file.version != AGENT_VERSION {
            return Err(TscError::Checkpoint(format!(
                "unsupported agent file {} v{} (expected {AGENT_FORMAT} v{AGENT_VERSION})",
                file.format, file.version
            )));
        }
        let expected = Self::net_config(net, &file.config);
        Ok(Agent {
            config: file.config.clone(),
            policy: NlTsc::from_checkpoint(&file.policy, Some(&expected), Some(net))?,
            value: NlTsc::from_checkpoint(&file.value, Some(&expected), Some(net))?,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, &self.to_file())
    }

    pub fn read_file(path: &Path) -> Result<AgentFile> {
        let text = std::fs::read_to_string(path).map_err(|e| TscError::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text).map_err(|e| TscError::io(path, e))
}

/// Index of the first maximal entry.
fn argmax(row: ndarray::ArrayView1<'_, f64>) -> usize {
    let mut best = 0;
    for (k, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = k;
        }
    }
    best
}

fn sample_categorical(probs: ndarray::ArrayView1<'_, f64>, rng: &mut ChaCha8Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (k, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return k;
        }
    }
    probs.len() - 1
}

/// One episode driven by the policy.
#[derive(Clone, Debug)]
pub struct EpisodeRollout {
    /// `[D * N, F]`, decision-major.
    pub obs: Array2<f64>,
    pub actions: Vec<usize>,
    pub logp: Vec<f64>,
    pub values: Vec<f64>,
    /// Scaled rewards of the configured kind.
    pub rewards: Vec<f64>,
    pub ledger: RewardLedger,
    pub travel: Option<TravelTimeStats>,
}

/// Runs one episode. With `rng` the phases are sampled, otherwise the most
/// likely phase is taken.
pub fn policy_episode(agent: &Agent, env: &Env, ppo: &PpoConfig, mut rng: Option<&mut ChaCha8Rng>) -> Result<EpisodeRollout> {
    let mut state = env.reset()?;
    let mut observer = agent.observer(&state)?;
    let n = agent.n_intersections();
    let mut rows: Vec<Array2<f64>> = Vec::new();
    let (mut actions, mut logp, mut values) = (Vec::new(), Vec::new(), Vec::new());
    let ledger = run_episode(&mut state, ppo.pressure_form, |s, _d| {
        let x = agent.encode(&observer.observe(s)?);
        let logits = agent.policy.forward(x.clone())?;
        let v = agent.value.forward(x.clone())?;
        let lp = log_softmax_rows(logits.view());
        let probs = softmax_rows(logits.view());
        let mut chosen = Vec::with_capacity(n);
        for i in 0..n {
            let a = match rng.as_deref_mut() {
                Some(r) => sample_categorical(probs.row(i), r),
                None => argmax(logits.row(i)),
            };
            chosen.push(a);
            actions.push(a);
            logp.push(lp[[i, a]]);
            values.push(v[[i, 0]]);
        }
        rows.push(x);
        Ok(chosen)
    })?;
    let views: Vec<_> = rows.iter().map(|r| r.view()).collect();
    let obs = if views.is_empty() {
        Array2::zeros((0, agent.policy.config().input_dim))
    } else {
        ndarray::concatenate(ndarray::Axis(0), &views).expect("equal widths")
    };
    let rewards = ledger
        .matrix(ppo.reward)
        .into_iter()
        .flatten()
        .map(|r| r * ppo.reward_scale)
        .collect();
    let travel = state.travel_time_stats().ok();
    Ok(EpisodeRollout {
        obs,
        actions,
        logp,
        values,
        rewards,
        ledger,
        travel,
    })
}

/// Samples of one iteration, indexed by decision step `s` (rows `s*N..(s+1)*N`).
#[derive(Clone, Debug, Default)]
pub struct RolloutBuffer {
    pub n_intersections: usize,
    pub episode_lengths: Vec<usize>,
    pub obs: Array2<f64>,
    pub actions: Vec<usize>,
    pub logp: Vec<f64>,
    pub rewards: Vec<f64>,
    pub values: Vec<f64>,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
    /// Average travel time of each collected episode.
    pub travel_times: Vec<f64>,
}

impl RolloutBuffer {
    pub fn steps(&self) -> usize {
        self.episode_lengths.iter().sum()
    }

    /// Appends an episode, computing its advantages and returns.
    pub fn push(&mut self, ep: EpisodeRollout, gamma: f64, lambda: f64) {
        let n = self.n_intersections;
        let (adv, ret) = compute_gae(&ep.rewards, &ep.values, n, gamma, lambda);
        self.episode_lengths.push(ep.actions.len() / n);
        self.obs = if self.obs.nrows() == 0 {
            ep.obs
        } else {
            ndarray::concatenate(ndarray::Axis(0), &[self.obs.view(), ep.obs.view()]).expect("equal widths")
        };
        self.actions.extend(ep.actions);
        self.logp.extend(ep.logp);
        self.rewards.extend(ep.rewards);
        self.values.extend(ep.values);
        self.advantages.extend(adv);
        self.returns.extend(ret);
        if let Some(t) = ep.travel {
            self.travel_times.push(t.average_travel_time_s);
        }
    }
}

/// Collects `episodes_per_iteration` sampled episodes for iteration `k`.
pub fn collect_rollout(agent: &Agent, env: &Env, ppo: &PpoConfig, seed: u64, k: usize) -> Result<RolloutBuffer> {
    let episodes: Vec<EpisodeRollout> = (0..ppo.episodes_per_iteration)
        .into_par_iter()
        .map(|e| {
            let mut rng = stream_rng(seed, TAG_ROLLOUT, k as u64, e as u64);
            policy_episode(agent, env, ppo, Some(&mut rng))
                .map_err(|err| TscError::Contract(format!("iteration {k}, episode {e}: {err}")))
        })
        .collect::<Result<_>>()?;
    let mut buffer = RolloutBuffer {
        n_intersections: agent.n_intersections(),
        ..Default::default()
    };
    for ep in episodes {
        buffer.push(ep, ppo.gamma, ppo.lambda);
    }
    Ok(buffer)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct UpdateStats {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub clip_frac: f64,
    pub entropy: f64,
    pub approx_kl: f64,
    pub minibatches: usize,
}

/// Adam states of both networks.
#[derive(Clone, Debug)]
pub struct Optimizers {
    pub policy: Adam,
    pub value: Adam,
}

impl Optimizers {
    pub fn new(agent: &Agent, eps: f64) -> Self {
        Optimizers {
            policy: Adam::new(agent.policy.params(), eps),
            value: Adam::new(agent.value.params(), eps),
        }
    }
}

/// Epochs of shuffled minibatch updates over `buffer`.
pub fn ppo_update(
    agent: &mut Agent,
    opt: &mut Optimizers,
    buffer: &RolloutBuffer,
    ppo: &PpoConfig,
    lr: f64,
    rng: &mut ChaCha8Rng,
) -> Result<UpdateStats> {
    let n = buffer.n_intersections;
    let steps = buffer.steps();
    let mut adv = buffer.advantages.clone();
    if ppo.normalize_advantages {
        normalize(&mut adv);
    }
    let mut stats = UpdateStats::default();
    let mut order: Vec<usize> = (0..steps).collect();
    for _ in 0..ppo.epochs {
        order.shuffle(rng);
        for chunk in order.chunks(ppo.minibatch) {
            let rows: Vec<usize> = chunk.iter().flat_map(|&s| s * n..(s + 1) * n).collect();
            let x = buffer.obs.select(ndarray::Axis(0), &rows);
            let pick = |v: &[f64]| rows.iter().map(|&r| v[r]).collect::<Vec<f64>>();
            let actions: Vec<usize> = rows.iter().map(|&r| buffer.actions[r]).collect();
            let (old_logp, mb_adv, mb_ret) = (pick(&buffer.logp), pick(&adv), pick(&buffer.returns));

            let (pl, mut pg) = {
                let mut tape = Tape::new(agent.policy.params());
                let out = agent.policy.forward_on(&mut tape, x.clone())?;
                let (pl, dlogits) =
                    ppo_policy_loss(tape.value(out), &actions, &old_logp, &mb_adv, ppo.clip_eps, ppo.entropy_coef);
                if !pl.loss.is_finite() {
                    return Err(TscError::NonFinite(format!("policy loss ({pl:?})")));
                }
                (pl, tape.backward(out, dlogits)?)
            };
            let (vl, mut vg) = {
                let mut tape = Tape::new(agent.value.params());
                let out = agent.value.forward_on(&mut tape, x)?;
                let (vl, dv) = value_loss(tape.value(out), &mb_ret);
                if !vl.is_finite() {
                    return Err(TscError::NonFinite(format!("value loss {vl}")));
                }
                (vl, tape.backward(out, dv)?)
            };
            if let Some(max) = ppo.max_grad_norm {
                clip_grad_norm(&mut pg, max);
                clip_grad_norm(&mut vg, max);
            }
            opt.policy.step(agent.policy.params_mut(), &pg, lr)?;
            opt.value.step(agent.value.params_mut(), &vg, lr)?;
            stats.policy_loss += pl.loss;
            stats.value_loss += vl;
            stats.clip_frac += pl.clip_frac;
            stats.entropy += pl.entropy;
            stats.approx_kl += pl.approx_kl;
            stats.minibatches += 1;
        }
    }
    if stats.minibatches > 0 {
        let m = stats.minibatches as f64;
        stats.policy_loss /= m;
        stats.value_loss /= m;
        stats.clip_frac /= m;
        stats.entropy /= m;
        stats.approx_kl /= m;
    }
    Ok(stats)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub travel: TravelTimeStats,
    /// Mean `(V(s_d) - G_d)^2` with `G_d` the discounted reward-to-go of the episode.
    pub value_error: f64,
    /// Unscaled per-intersection reward totals of the configured kind.
    pub reward_totals: Vec<f64>,
}

/// One evaluation episode (greedy unless `ppo.eval_sample`).
pub fn evaluate(agent: &Agent, env: &Env, ppo: &PpoConfig, seed: u64, k: usize) -> Result<Evaluation> {
    let mut rng = stream_rng(seed, TAG_EVAL, k as u64, 0);
    let ep = policy_episode(agent, env, ppo, ppo.eval_sample.then_some(&mut rng))?;
    let n = agent.n_intersections();
    let decisions = ep.actions.len() / n;
    let mut sq = 0.0;
    for i in 0..n {
        let r: Vec<f64> = (0..decisions).map(|d| ep.rewards[d * n + i]).collect();
        for (d, g) in discounted_returns(&r, ppo.gamma).into_iter().enumerate() {
            sq += (ep.values[d * n + i] - g).powi(2);
        }
    }
    let travel = ep
        .travel
        .ok_or_else(|| TscError::Contract("evaluation episode did not finish".into()))?;
    Ok(Evaluation {
        travel,
        value_error: if ep.actions.is_empty() { 0.0 } else { sq / ep.actions.len() as f64 },
        reward_totals: ep.ledger.totals(ppo.reward),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub seed: u64,
    pub agent: AgentConfig,
    pub ppo: PpoConfig,
    /// Write a resumable checkpoint every this many iterations (0 = only at the end).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            agent: AgentConfig::default(),
            ppo: PpoConfig::default(),
            checkpoint_every: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    /// 1-based count of completed updates.
    pub iteration: usize,
    pub lr: f64,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub clip_frac: f64,
    pub entropy: f64,
    pub approx_kl: f64,
    pub train_travel_time: f64,
    pub eval_travel_time: Option<f64>,
    pub value_error: Option<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainCheckpoint {
    pub format: String,
    pub version: u32,
    pub config: TrainConfig,
    pub iteration: usize,
    pub agent: AgentFile,
    pub policy_adam: AdamState,
    pub value_adam: AdamState,
    pub initial_eval: Evaluation,
    pub curve: Vec<IterationRecord>,
}

const TRAIN_FORMAT: &str = "tsc-train-state";
const TRAIN_VERSION: u32 = 1;

/// Resumable PPO training state.
pub struct Trainer {
    pub env: Env,
    pub config: TrainConfig,
    pub agent: Agent,
    opt: Optimizers,
    iteration: usize,
    pub initial_eval: Evaluation,
    pub curve: Vec<IterationRecord>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainOutcome {
    pub initial_eval: Evaluation,
    pub curve: Vec<IterationRecord>,
    /// Mean evaluation travel time over the last 10 evaluations (the
    /// initial evaluation when no iteration ran).
    pub final_travel_time: f64,
    pub final_value_error: f64,
}

impl Trainer {
    pub fn new(env: Env, config: TrainConfig) -> Result<Trainer> {
        config.ppo.validate()?;
        let agent = Agent::new(&env.net, config.agent.clone(), config.seed)?;
        let opt = Optimizers::new(&agent, config.ppo.adam_eps);
        let initial_eval = evaluate(&agent, &env, &config.ppo, config.seed, 0)?;
        Ok(Trainer {
            env,
            config,
            agent,
            opt,
            iteration: 0,
            initial_eval,
            curve: Vec::new(),
        })
    }

    /// Continues from a checkpoint; `config` must equal the stored one.
    pub fn resume(env: Env, config: TrainConfig, ck: &TrainCheckpoint) -> Result<Trainer> {
        if ck.format != TRAIN_FORMAT || ck.version != TRAIN_VERSION {
            return Err(TscError::Checkpoint(format!("unsupported training state {} v{}", ck.format, ck.version)));
        }
        if ck.config != config {
            return Err(TscError::Checkpoint(format!(
                "training configuration differs: stored {:?}, requested {:?}",
                ck.config, config
            )));
        }
        let agent = Agent::from_file(&ck.agent, &env.net)?;
        let opt = Optimizers {
            policy: Adam::from_state(&ck.policy_adam, agent.policy.params())?,
            value: Adam::from_state(&ck.value_adam, agent.value.params())?,
        };
        Ok(Trainer {
            env,
            config,
            agent,
            opt,
            iteration: ck.iteration,
            initial_eval: ck.initial_eval.clone(),
            curve: ck.curve.clone(),
        })
    }

    pub fn load_checkpoint(path: &Path) -> Result<TrainCheckpoint> {
        let text = std::fs::read_to_string(path).map_err(|e| TscError::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn is_done(&self) -> bool {
        self.iteration >= self.config.ppo.iterations
    }

    pub fn checkpoint(&self) -> TrainCheckpoint {
        TrainCheckpoint {
            format: TRAIN_FORMAT.into(),
            version: TRAIN_VERSION,
            config: self.config.clone(),
            iteration: self.iteration,
            agent: self.agent.to_file(),
            policy_adam: self.opt.policy.state(self.agent.policy.params()),
            value_adam: self.opt.value.state(self.agent.value.params()),
            initial_eval: self.initial_eval.clone(),
            curve: self.curve.clone(),
        }
    }

    /// Collect, update and (on schedule) evaluate once.
    pub fn step(&mut self) -> Result<&IterationRecord> {
        let started = Instant::now();
        let ppo = &self.config.ppo;
        let k = self.iteration;
        let seed = self.config.seed;
        let lr = if ppo.lr_decay { linear_decay(ppo.lr, k, ppo.iterations) } else { ppo.lr };
        let buffer = collect_rollout(&self.agent, &self.env, ppo, seed, k)?;
        let mut rng = stream_rng(seed, TAG_SHUFFLE, k as u64, 0);
        let stats = ppo_update(&mut self.agent, &mut self.opt, &buffer, ppo, lr, &mut rng)?;
        self.iteration += 1;
        let eval = if self.iteration % ppo.eval_every == 0 || self.iteration == ppo.iterations {
            Some(evaluate(&self.agent, &self.env, ppo, seed, self.iteration)?)
        } else {
            None
        };
        let train_tt = buffer.travel_times.iter().sum::<f64>() / buffer.travel_times.len().max(1) as f64;
        let record = IterationRecord {
            iteration: self.iteration,
            lr,
            policy_loss: stats.policy_loss,
            value_loss: stats.value_loss,
            clip_frac: stats.clip_frac,
            entropy: stats.entropy,
            approx_kl: stats.approx_kl,
            train_travel_time: train_tt,
            eval_travel_time: eval.as_ref().map(|e| e.travel.average_travel_time_s),
            value_error: eval.as_ref().map(|e| e.value_error),
        };
        log::info!(
            "iteration {}: train tt {:.1}, eval tt {:?}, value loss {:.4}, clip {:.3}, {:.1}s",
            record.iteration,
            record.train_travel_time,
            record.eval_travel_time,
            record.value_loss,
            record.clip_frac,
            started.elapsed().as_secs_f64()
        );
        self.curve.push(record);
        Ok(self.curve.last().expect("just pushed"))
    }

    pub fn outcome(&self) -> TrainOutcome {
        let evals: Vec<(f64, f64)> = self
            .curve
            .iter()
            .filter_map(|r| Some((r.eval_travel_time?, r.value_error?)))
            .collect();
        let tail = &evals[evals.len().saturating_sub(10)..];
        let (tt, ve) = if tail.is_empty() {
            (self.initial_eval.travel.average_travel_time_s, self.initial_eval.value_error)
        } else {
            (
                tail.iter().map(|e| e.0).sum::<f64>() / tail.len() as f64,
                evals.last().expect("non-empty").1,
            )
        };
        TrainOutcome {
            initial_eval: self.initial_eval.clone(),
            curve: self.curve.clone(),
            final_travel_time: tt,
            final_value_error: ve,
        }
    }

    /// Runs the remaining iterations, writing artifacts into `out_dir` if given.
    pub fn run(&mut self, out_dir: Option<&Path>) -> Result<TrainOutcome> {
        if let Some(dir) = out_dir {
            std::fs::create_dir_all(dir).map_err(|e| TscError::io(dir, e))?;
        }
        while !self.is_done() {
            self.step()?;
            if let (Some(dir), every) = (out_dir, self.config.checkpoint_every) {
                if every > 0 && self.iteration % every == 0 {
                    write_json(&dir.join("train_state.json"), &self.checkpoint())?;
                }
            }
        }
        let outcome = self.outcome();
        if let Some(dir) = out_dir {
            write_json(&dir.join("train_state.json"), &self.checkpoint())?;
            self.agent.save(&dir.join("agent.json"))?;
            write_file(&dir.join("curve.csv"), &curve_csv(&self.curve))?;
            write_file(&dir.join("value_error.csv"), &value_error_csv(&self.curve))?;
            write_json(&dir.join("outcome.json"), &outcome)?;
        }
        Ok(outcome)
    }
}

pub(crate) fn write_file(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| TscError::io(path, e))
}

fn opt_cell(v: Option<f64>) -> String {
    v.map_or_else(String::new, |v| v.to_string())
}

/// `iteration,policy_loss,value_loss,clip_frac,entropy,eval_travel_time`;
/// the travel time cell is empty on iterations without evaluation.
pub fn curve_csv(curve: &[IterationRecord]) -> String {
    let mut out = String::from("iteration,policy_loss,value_loss,clip_frac,entropy,eval_travel_time\n");
    for r in curve {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.iteration,
            r.policy_loss,
            r.value_loss,
            r.clip_frac,
            r.entropy,
            opt_cell(r.eval_travel_time)
        ));
    }
    out
}

/// `iteration,value_error`, one row per evaluation.
pub fn value_error_csv(curve: &[IterationRecord]) -> String {
    let mut out = String::from("iteration,value_error\n");
    for r in curve {
        if let Some(v) = r.value_error {
            out.push_str(&format!("{},{v}\n", r.iteration));
        }
    }
    out
}

/// Trains from scratch.
pub fn train(env: Env, config: TrainConfig, out_dir: Option<&Path>) -> Result<TrainOutcome> {
    Trainer::new(env, config)?.run(out_dir)
}

/// Controller that follows a trained policy, most likely phase per intersection.
pub struct PolicyController {
    file: Arc<AgentFile>,
    agent: Option<Agent>,
    observer: Option<Observer>,
}

impl PolicyController {
    pub fn new(file: AgentFile) -> Self {
        PolicyController {
            file: Arc::new(file),
            agent: None,
            observer: None,
        }
    }

    pub fn from_agent(agent: &Agent) -> Self {
        Self::new(agent.to_file())
    }
}

impl Controller for PolicyController {
    fn name(&self) -> &str {
        "policy"
    }

    fn reset(&mut self, state: &SimState) -> Result<()> {
        let agent = Agent::from_file(&self.file, state.network())?;
        self.observer = Some(agent.observer(state)?);
        self.agent = Some(agent);
        Ok(())
    }

    fn decide(&mut self, state: &SimState, _d: usize) -> Result<Vec<usize>> {
        let (Some(agent), Some(observer)) = (&self.agent, &mut self.observer) else {
            return Err(TscError::Contract("policy controller used before reset".into()));
        };
        let logits = agent.policy.forward(agent.encode(&observer.observe(state)?))?;
        Ok(logits.rows().into_iter().map(argmax).collect())
    }

    fn describe(&self) -> serde_json::Value {
        serde_json::json!({ "name": "policy", "agent": self.file.config })
    }
}

/// Registers `policy`, which loads the agent file given as `checkpoint`.
pub fn register_policy(registry: &mut ControllerRegistry) {
    registry.register("policy", |p: &ControllerParams| {
        let path: &PathBuf = p
            .checkpoint
            .as_ref()
            .ok_or_else(|| TscError::invalid("controller `policy` needs a checkpoint path"))?;
        Ok(Box::new(PolicyController::new(Agent::read_file(path)?)))
    });
}

#[cfg(test)]
mod tests {
    use ndarray::array;

    use super::*;

    #[test]
    fn bandit_probability_stops_at_clip_boundary() {
        // Two arms; arm 0 has positive advantage, arm 1 negative. Plain
        // gradient steps: the objective stops pushing once p0 / 0.5 > 1.2.
        let mut z = array![0.0, 0.0];
        let actions = [0, 1, 0, 1];
        let adv = [1.0, -1.0, 1.0, -1.0];
        let old = vec![0.5f64.ln(); 4];
        let mut last = 0.5;
        for _ in 0..2000 {
            let logits = Array2::from_shape_fn((4, 2), |(_, k)| z[k]);
            let (_, g) = ppo_policy_loss(logits.view(), &actions, &old, &adv, 0.2, 0.0);
            z = &z - &(g.sum_axis(ndarray::Axis(0)) * 0.05);
            let prob = softmax_rows(z.view().insert_axis(ndarray::Axis(0)))[[0, 0]];
            assert!(prob >= last - 1e-12, "probability fell: {prob} < {last}");
            last = prob;
        }
        assert!(last > 0.6 && last < 0.61, "{last}");
    }

    #[test]
    fn config_validation() {
        assert!(PpoConfig::default().validate().is_ok());
        for f in [
            |c: &mut PpoConfig| c.clip_eps = 1.0,
            |c: &mut PpoConfig| c.gamma = 1.0,
            |c: &mut PpoConfig| c.lambda = 1.5,
            |c: &mut PpoConfig| c.minibatch = 0,
        ] {
            let mut c = PpoConfig::default();
            f(&mut c);
            assert!(c.validate().is_err());
        }
    }

    #[test]
    fn count_features_are_scaled() {
        let net = crate::network::NetworkSpec { rows: 1, cols: 1, lane_length_m: 100.0 }.build().unwrap();
        let agent = Agent::new(&net, AgentConfig::default(), 0).unwrap();
        let obs = AugmentedObservation(vec![1.0; 72]);
        let x = agent.encode(&[obs]);
        assert_eq!(x[[0, 0]], 1.0);
        assert_eq!(x[[0, 4]], 0.1);
        assert_eq!(x[[0, 27]], 0.1);
        assert_eq!(x[[0, 28]], 1.0);
        assert_eq!(x[[0, 32]], 0.1);
        assert_eq!(x[[0, 56]], 1.0);
    }
}
