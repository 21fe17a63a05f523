//! Asynchronous actor-critic training with successor-feature advantages.
//!
//! Each worker owns an environment and an RNG stream, snapshots the shared
//! parameters, collects up to `ns` steps, and applies its gradients to the
//! shared store. Iterations are reserved from one atomic counter, which also
//! keys the λ schedule.

use std::collections::VecDeque;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{mpsc, Arc};

use log::info;
use rand::Rng as _;

use crate::agent::{
    loss_targets, sample_action, total_loss, AgentNet, LossConfig, RolloutBatch, SrInputs,
};
use crate::env::{EpisodeEnd, Env, FrameCache, Goal, GridSpec, Transition};
use crate::error::{Error, Result};
use crate::features::Featurizer;
use crate::nn::{checkpoint, Grads, Network, OptimizerKind, OptimizerState, ParamSet, SharedParams};
use crate::repnet::{LossWeights, Phi, RepNet};
use crate::rewardnet::{OmegaNet, RewardSample};
use crate::rng::{substream, Rng};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub workers: usize,
    pub rollout_len: usize,
    /// Updates to apply in this run.
    pub iterations: u64,
    /// Counter value at which this run starts (nonzero when resuming or fine-tuning).
    pub start_iteration: u64,
    pub lambda_initial: f64,
    pub lambda_final: f64,
    pub lambda_switch: u64,
    pub gamma: f64,
    pub loss: LossConfig,
    /// Training goals as state indices; one is drawn uniformly per episode.
    pub goals: Vec<usize>,
    pub seed: u64,
    pub step_cap: usize,
    pub optimizer: OptimizerKind,
    /// Rescale the gradient when its global L2 norm exceeds this.
    pub max_grad_norm: Option<f64>,
    /// Update ω on worker rollouts.
    pub joint_omega: bool,
    pub omega_optimizer: OptimizerKind,
    /// Rollouts between ω updates.
    pub omega_every: u64,
    /// Keep training the representation network on worker rollouts.
    pub joint_repnet: bool,
    pub repnet_optimizer: OptimizerKind,
    /// Snapshot and apply under one lock, so no gradient is stale.
    pub strict: bool,
    /// Verify per-tensor checksums on every snapshot and update.
    pub checked: bool,
    pub checkpoint_every: u64,
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            workers: 8,
            rollout_len: 20,
            iterations: 20_000,
            start_iteration: 0,
            lambda_initial: 1e-6,
            lambda_final: 1e-3,
            lambda_switch: 5000,
            gamma: 0.99,
            loss: LossConfig::default(),
            goals: Vec::new(),
            seed: 0,
            step_cap: crate::env::DEFAULT_STEP_CAP,
            optimizer: OptimizerKind::default(),
            max_grad_norm: None,
            joint_omega: true,
            omega_optimizer: OptimizerKind::RmsProp {
                lr: 7e-5,
                decay: 0.99,
                eps: 1e-5,
            },
            omega_every: 1,
            joint_repnet: false,
            repnet_optimizer: OptimizerKind::default(),
            strict: false,
            checked: false,
            checkpoint_every: 0,
            checkpoint_dir: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, num_states: usize) -> Result<()> {
        if self.workers == 0 {
            return Err(Error::Config("workers must be at least 1".into()));
        }
        if self.rollout_len == 0 {
            return Err(Error::Config("rollout_len must be at least 1".into()));
        }
        if self.lambda_switch > self.start_iteration + self.iterations {
            return Err(Error::Config(format!(
                "lambda_switch ({}) exceeds the iteration budget ({})",
                self.lambda_switch,
                self.start_iteration + self.iterations
            )));
        }
        if self.goals.is_empty() {
            return Err(Error::Config("at least one training goal is required".into()));
        }
        if let Some(g) = self.goals.iter().find(|g| **g >= num_states) {
            return Err(Error::Config(format!("goal id {g} out of range (map has {num_states} states)")));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::Config(format!("gamma {} outside [0, 1]", self.gamma)));
        }
        Ok(())
    }

    pub fn lambda_schedule(&self, iteration: u64) -> f64 {
        lambda_schedule(iteration, self.lambda_initial, self.lambda_final, self.lambda_switch)
    }
}

/// λ in effect at a global iteration.
pub fn lambda_schedule(iteration: u64, initial: f64, fin: f64, switch: u64) -> f64 {
    if iteration < switch {
        initial
    } else {
        fin
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRecord {
    pub iteration: u64,
    pub worker: usize,
    pub l_pi: f64,
    pub l_v: f64,
    pub l_psi: f64,
    pub entropy: f64,
    /// Undiscounted return of an episode that ended in this rollout.
    pub episode_return: Option<f64>,
    pub lambda: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<LogRecord>,
}

pub const LOG_HEADER: &str = "iteration,worker,l_pi,l_v,l_psi,entropy,episode_return,lambda";

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut s = String::from(LOG_HEADER);
        s.push('\n');
        for r in &self.records {
            let ret = r.episode_return.map(|v| v.to_string()).unwrap_or_default();
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{}",
                r.iteration, r.worker, r.l_pi, r.l_v, r.l_psi, r.entropy, ret, r.lambda
            );
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next() != Some(LOG_HEADER) {
            return Err(Error::Config("training log has an unexpected header".into()));
        }
        let bad = |l: &str| Error::Config(format!("malformed training log line `{l}`"));
        let mut records = Vec::new();
        for l in lines.filter(|l| !l.is_empty()) {
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != 8 {
                return Err(bad(l));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| bad(l));
            records.push(LogRecord {
                iteration: f[0].parse().map_err(|_| bad(l))?,
                worker: f[1].parse().map_err(|_| bad(l))?,
                l_pi: num(f[2])?,
                l_v: num(f[3])?,
                l_psi: num(f[4])?,
                entropy: num(f[5])?,
                episode_return: if f[6].is_empty() { None } else { Some(num(f[6])?) },
                lambda: num(f[7])?,
            });
        }
        Ok(Self { records })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }

    /// Completed-episode returns in iteration order.
    pub fn episode_returns(&self) -> Vec<f64> {
        self.records.iter().filter_map(|r| r.episode_return).collect()
    }
}

/// Everything a training run needs besides its config.
#[derive(Clone)]
pub struct TrainSetup {
    pub grid: Arc<GridSpec>,
    pub frames: Arc<FrameCache>,
    pub features: Featurizer,
    pub agent: AgentNet,
    /// Optimizer state to continue from; fresh when `None`.
    pub agent_opt: Option<OptimizerState>,
    /// Source of φ targets; only its encoder is used unless `joint_repnet` is set.
    pub repnet: RepNet,
    pub omega: OmegaNet,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub agent: ParamSet,
    pub agent_opt: OptimizerState,
    pub omega: ParamSet,
    pub repnet: ParamSet,
    pub log: TrainLog,
}

struct Shared {
    agent: SharedParams,
    omega: Option<SharedParams>,
    repnet: Option<SharedParams>,
    counter: AtomicU64,
    end: u64,
    stop: AtomicBool,
}

/// Run the asynchronous training loop until the iteration budget is spent.
/// On a worker failure all workers stop; with a checkpoint directory the
/// current agent parameters are saved with a dirty marker.
pub fn train(setup: &TrainSetup, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate(setup.grid.num_states())?;
    let mut agent_params = setup.agent.params();
    agent_params.set_version(cfg.start_iteration);
    let shared = Arc::new(Shared {
        agent: SharedParams::new(
            agent_params,
            setup.agent_opt.clone().unwrap_or_else(|| OptimizerState::new(cfg.optimizer)),
            cfg.checked,
        ),
        omega: cfg
            .joint_omega
            .then(|| SharedParams::new(setup.omega.params(), OptimizerState::new(cfg.omega_optimizer), cfg.checked)),
        repnet: cfg
            .joint_repnet
            .then(|| SharedParams::new(setup.repnet.params(), OptimizerState::new(cfg.repnet_optimizer), cfg.checked)),
        counter: AtomicU64::new(cfg.start_iteration),
        end: cfg.start_iteration + cfg.iterations,
        stop: AtomicBool::new(false),
    });
    let (tx, rx) = mpsc::channel::<LogRecord>();
    let (results, records): (Vec<Result<()>>, Vec<LogRecord>) = std::thread::scope(|scope| {
        let handles: Vec<_> = (0..cfg.workers)
            .map(|id| {
                let tx = tx.clone();
                let shared = Arc::clone(&shared);
                scope.spawn(move || {
                    let r = worker_loop(id, &shared, setup, cfg, &tx);
                    if r.is_err() {
                        shared.stop.store(true, Ordering::SeqCst);
                    }
                    r
                })
            })
            .collect();
        drop(tx);
        let records = drain_with_progress(&rx, cfg.iterations);
        let results = handles
            .into_iter()
            .map(|h| h.join().unwrap_or_else(|_| Err(Error::Config("worker panicked".into()))))
            .collect();
        (results, records)
    });
    let mut log = TrainLog { records };
    log.records.sort_by_key(|r| (r.iteration, r.worker));

    if let Some((id, err)) = results.into_iter().enumerate().find_map(|(i, r)| r.err().map(|e| (i, e))) {
        if let Some(dir) = &cfg.checkpoint_dir {
            if let Ok(p) = shared.agent.snapshot() {
                let _ = std::fs::create_dir_all(dir);
                let _ = checkpoint::save_dirty(&dir.join("agent.partial.ckpt"), &p, &err.to_string());
            }
        }
        return Err(Error::Worker { worker: id, source: Box::new(err) });
    }
    let shared = Arc::try_unwrap(shared).map_err(|_| Error::Config("workers still hold shared state".into()))?;
    let (agent, agent_opt) = shared.agent.into_parts();
    Ok(TrainOutcome {
        agent,
        agent_opt,
        omega: match shared.omega {
            Some(o) => o.into_params(),
            None => setup.omega.params(),
        },
        repnet: match shared.repnet {
            Some(r) => r.into_params(),
            None => setup.repnet.params(),
        },
        log,
    })
}

/// Goal-reaching transitions kept by each worker for balanced ω batches.
const GOAL_BUFFER: usize = 256;

struct Worker<'a> {
    id: usize,
    setup: &'a TrainSetup,
    cfg: &'a TrainConfig,
    env: Env,
    rng: Rng,
    episode_return: f64,
    episode_start: bool,
    goal_memory: VecDeque<Transition>,
    agent: AgentNet,
    omega: OmegaNet,
    repnet: RepNet,
}

/// Collect worker records until every sender is gone, logging progress every 5%.
fn drain_with_progress(rx: &mpsc::Receiver<LogRecord>, total: u64) -> Vec<LogRecord> {
    let every = (total / 20).max(1);
    let mut records = Vec::with_capacity(total as usize);
    let mut returns = Vec::new();
    for r in rx.iter() {
        returns.extend(r.episode_return);
        records.push(r);
        if records.len() as u64 % every == 0 {
            let mean = returns.iter().sum::<f64>() / returns.len().max(1) as f64;
            info!("{}/{total} updates, mean return {mean:.3} over {} episodes", records.len(), returns.len());
            returns.clear();
        }
    }
    records
}

fn worker_loop(id: usize, shared: &Shared, setup: &TrainSetup, cfg: &TrainConfig, tx: &mpsc::Sender<LogRecord>) -> Result<()> {
    let mut w = Worker {
        id,
        setup,
        cfg,
        env: Env::new(Arc::clone(&setup.grid), Arc::clone(&setup.frames), cfg.step_cap),
        rng: substream(cfg.seed, &format!("worker/{id}")),
        episode_return: 0.0,
        episode_start: true,
        goal_memory: VecDeque::new(),
        agent: setup.agent.clone(),
        omega: setup.omega.clone(),
        repnet: setup.repnet.clone(),
    };
    loop {
        if shared.stop.load(Ordering::SeqCst) {
            return Ok(());
        }
        let it = shared.counter.fetch_add(1, Ordering::SeqCst);
        if it >= shared.end {
            return Ok(());
        }
        let record = {
            let _guard = cfg.strict.then(|| shared.agent.step_lock());
            w.iteration(it, shared)?
        };
        if cfg.checkpoint_every > 0 && (it + 1) % cfg.checkpoint_every == 0 {
            if let Some(dir) = &cfg.checkpoint_dir {
                std::fs::create_dir_all(dir)?;
                checkpoint::save(&dir.join(format!("agent_{:08}.ckpt", it + 1)), &shared.agent.snapshot()?)?;
            }
        }
        let _ = tx.send(record);
    }
}

impl Worker<'_> {
    fn new_episode(&mut self) -> Result<()> {
        let gi = self.cfg.goals[self.rng.gen_range(0..self.cfg.goals.len())];
        let goal = Goal::from_index(&self.setup.grid, &self.setup.frames, gi)?;
        self.env.reset(None, goal, &mut self.rng)?;
        self.episode_return = 0.0;
        self.episode_start = true;
        Ok(())
    }

    fn phi(&self, stack: &crate::env::PoseStack) -> Result<Phi> {
        self.repnet.encode(&self.setup.features.input(stack))
    }

    fn iteration(&mut self, it: u64, shared: &Shared) -> Result<LogRecord> {
        let lambda = self.cfg.lambda_schedule(it);
        self.agent.load(&shared.agent.snapshot()?)?;
        if let Some(o) = &shared.omega {
            self.omega.load(&o.snapshot()?)?;
        }
        if let Some(r) = &shared.repnet {
            self.repnet.load(&r.snapshot()?)?;
        }
        if self.env.finished() {
            self.new_episode()?;
        }
        let features = &self.setup.features;
        let goal = self.env.goal().expect("episode in progress").index;
        let goal_input = features.goal_input(goal);

        let mut tape = self.agent.begin_rollout(&goal_input)?;
        let mut outputs = Vec::with_capacity(self.cfg.rollout_len);
        let mut transitions = Vec::with_capacity(self.cfg.rollout_len);
        let mut finished_return = None;
        for _ in 0..self.cfg.rollout_len {
            let obs = self.env.pose_stack();
            let out = self.agent.record_step(&mut tape, &features.input(&obs))?;
            let action = sample_action(&out.pi, self.rng.gen::<f64>());
            let step = self.env.step(action)?;
            self.episode_return += step.reward;
            transitions.push(Transition {
                goal,
                obs,
                action,
                reward: step.reward,
                next_obs: self.env.pose_stack(),
                end: step.end,
                episode_start: std::mem::take(&mut self.episode_start),
            });
            outputs.push(out);
            if step.end.terminal() {
                finished_return = Some(self.episode_return);
                break;
            }
        }
        let last = transitions.last().expect("rollout has at least one step");
        let (bootstrap_value, bootstrap_psi) = if last.end == EpisodeEnd::Goal {
            (0.0, vec![0.0; self.agent.psi_dim()])
        } else {
            let b = self.agent.peek_step(&tape, &features.input(&last.next_obs))?;
            (b.v, b.psi)
        };
        let sr = if lambda != 0.0 {
            Some(SrInputs {
                phi: transitions.iter().map(|t| self.phi(&t.obs)).collect::<Result<_>>()?,
                omega: self.omega.omega(&goal_input)?,
                bootstrap_psi,
            })
        } else {
            None
        };
        let rollout = RolloutBatch {
            transitions,
            bootstrap_value,
            sr,
            lambda,
            gamma: self.cfg.gamma,
        };
        let targets = loss_targets(&rollout, &outputs, &self.cfg.loss)?;
        let (loss, out_grads) = total_loss(&rollout, &outputs, &targets, &self.cfg.loss)?;
        self.agent.zero_grads();
        self.agent.backward(tape, &out_grads)?;
        let mut grads = self.agent.grads();
        if let Some(max) = self.cfg.max_grad_norm {
            clip_global_norm(&mut grads, max);
        }
        shared.agent.apply(&mut grads)?;

        if let Some(o) = &shared.omega {
            for t in rollout.transitions.iter().filter(|t| t.end == EpisodeEnd::Goal) {
                if self.goal_memory.len() == GOAL_BUFFER {
                    self.goal_memory.pop_front();
                }
                self.goal_memory.push_back(t.clone());
            }
            if (it + 1) % self.cfg.omega_every.max(1) == 0 {
                let batch = self.omega_batch(&rollout.transitions)?;
                let (_, mut g) = self.omega.reward_grads(&batch, features)?;
                o.apply(&mut g)?;
            }
        }
        if let Some(r) = &shared.repnet {
            let (_, mut g) = self.repnet.pretrain_grads(&rollout.transitions, features, &LossWeights::default())?;
            r.apply(&mut g)?;
        }
        Ok(LogRecord {
            iteration: it,
            worker: self.id,
            l_pi: loss.policy,
            l_v: loss.value,
            l_psi: loss.psi,
            entropy: loss.entropy,
            episode_return: finished_return,
            lambda,
        })
    }

    /// Rollout transitions plus an equal number of remembered goal-reaching ones.
    fn omega_batch(&mut self, rollout: &[Transition]) -> Result<Vec<RewardSample>> {
        let mut picked: Vec<Transition> = rollout.to_vec();
        if !self.goal_memory.is_empty() {
            let n_goal = rollout.iter().filter(|t| t.end == EpisodeEnd::Goal).count();
            for _ in n_goal..rollout.len() - n_goal {
                let i = self.rng.gen_range(0..self.goal_memory.len());
                picked.push(self.goal_memory[i].clone());
            }
        }
        picked
            .iter()
            .map(|t| {
                Ok(RewardSample {
                    phi_next: self.phi(&t.next_obs)?,
                    goal: t.goal,
                    reward: t.reward,
                })
            })
            .collect()
    }
}

/// Scale all gradients so their joint L2 norm is at most `max`.
pub fn clip_global_norm(grads: &mut Grads, max: f64) -> f64 {
    let norm = grads.values().map(|g| g.sum_sq()).sum::<f64>().sqrt();
    if norm > max && norm.is_finite() {
        let c = max / norm;
        grads.values_mut().for_each(|g| g.scale(c));
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agent::AgentConfig;
    use crate::env::{Renderer, SMALL_MAP};
    use crate::features::InputMode;
    use crate::nn::{ConvSpec, Init};
    use crate::repnet::RepNetConfig;

    fn setup(mode: InputMode, seed: u64) -> TrainSetup {
        let grid = Arc::new(GridSpec::parse(SMALL_MAP, 8, 8, 2).unwrap());
        let frames = Arc::new(Renderer::new(&grid).cache());
        let features = Featurizer::new(mode, &grid, Arc::clone(&frames));
        let conv = ConvSpec {
            channels: [2, 3],
            kernels: [3, 3],
            strides: [1, 2],
        };
        let mut rng = substream(seed, "init");
        let mut init = Init::Uniform(&mut rng);
        let repnet = RepNet::new(&RepNetConfig { d: 4, conv, hidden: 6 }, &features, &mut init).unwrap();
        let d = repnet.dim();
        let agent = AgentNet::new(&AgentConfig { conv, embed: 5, trunk: vec![8], d }, &features, &mut init).unwrap();
        let omega = OmegaNet::new(d, &conv, &features, &mut init).unwrap();
        TrainSetup {
            grid,
            frames,
            features,
            agent,
            agent_opt: None,
            repnet,
            omega,
        }
    }

    fn cfg(workers: usize, iterations: u64) -> TrainConfig {
        TrainConfig {
            workers,
            rollout_len: 5,
            iterations,
            lambda_switch: iterations / 2,
            goals: vec![3, 20],
            seed: 7,
            step_cap: 30,
            ..Default::default()
        }
    }

    #[test]
    fn schedule_switches_at_boundary() {
        assert_eq!(lambda_schedule(4999, 1e-6, 1e-3, 5000), 1e-6);
        assert_eq!(lambda_schedule(5000, 1e-6, 1e-3, 5000), 1e-3);
        assert_eq!(lambda_schedule(0, 1e-6, 1e-3, 0), 1e-3);
        let c = TrainConfig::default();
        assert_eq!(c.lambda_schedule(4999), 1e-6);
        assert_eq!(c.lambda_schedule(5000), 0.001);
    }

    #[test]
    fn config_validation() {
        let s = setup(InputMode::Tabular, 0);
        let mut c = cfg(1, 10);
        c.lambda_switch = 11;
        assert!(train(&s, &c).is_err());
        let mut c = cfg(0, 10);
        c.lambda_switch = 0;
        assert!(train(&s, &c).is_err());
        let mut c = cfg(1, 10);
        c.goals = vec![36];
        assert!(train(&s, &c).is_err());
    }

    #[test]
    fn single_worker_is_reproducible() {
        let s = setup(InputMode::Pixels, 1);
        let c = cfg(1, 40);
        let a = train(&s, &c).unwrap();
        let b = train(&s, &c).unwrap();
        assert_eq!(a.log, b.log);
        assert_eq!(a.agent, b.agent);
        assert_eq!(a.omega, b.omega);
        assert_eq!(a.agent.version(), 40);
        assert!(a.log.records.iter().any(|r| r.lambda == 1e-3 && r.l_psi > 0.0));
        let iters: Vec<u64> = a.log.records.iter().map(|r| r.iteration).collect();
        assert_eq!(iters, (0..40).collect::<Vec<_>>());
    }

    #[test]
    fn version_counts_updates_across_workers() {
        let s = setup(InputMode::Pixels, 2);
        for strict in [false, true] {
            let mut c = cfg(2, 30);
            c.strict = strict;
            c.checked = true;
            let out = train(&s, &c).unwrap();
            assert_eq!(out.agent.version(), 30);
            assert_eq!(out.log.records.len(), 30);
            for w in 0..2 {
                let its: Vec<u64> = out.log.records.iter().filter(|r| r.worker == w).map(|r| r.iteration).collect();
                assert!(its.windows(2).all(|p| p[0] < p[1]));
            }
        }
    }

    #[test]
    fn log_csv_round_trip() {
        let s = setup(InputMode::Tabular, 3);
        let out = train(&s, &cfg(1, 25)).unwrap();
        let text = out.log.to_csv();
        assert!(text.starts_with(LOG_HEADER));
        assert_eq!(TrainLog::from_csv(&text).unwrap(), out.log);
    }

    #[test]
    fn checkpoints_and_joint_repnet() {
        let dir = tempfile::tempdir().unwrap();
        let s = setup(InputMode::Pixels, 4);
        let mut c = cfg(1, 20);
        c.checkpoint_every = 10;
        c.checkpoint_dir = Some(dir.path().to_path_buf());
        c.joint_repnet = true;
        let out = train(&s, &c).unwrap();
        let p = checkpoint::load(&dir.path().join("agent_00000020.ckpt")).unwrap();
        assert_eq!(p, out.agent);
        assert_ne!(out.repnet, s.repnet.params());
    }

    #[test]
    fn frozen_encoder_gives_stable_phi() {
        let s = setup(InputMode::Pixels, 5);
        let out = train(&s, &cfg(1, 10)).unwrap();
        assert_eq!(out.repnet, s.repnet.params());
    }

    #[test]
    fn clipping_bounds_the_norm() {
        let mut g = Grads::new();
        g.insert("a".into(), crate::nn::Tensor::vector(vec![3.0, 4.0]));
        assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
        assert!((g["a"].sum_sq().sqrt() - 1.0).abs() < 1e-12);
    }
}
