//! The five pipeline stages. Every artifact lives in the configured output
//! directory, and each stage reads only what an earlier stage wrote there.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use log::info;
use nalgebra::{DMatrix, DVector};
use rand::Rng as _;

use crate::agent::AgentNet;
use crate::archive;
use crate::config::{format_pose, parse_pose, ExperimentConfig, World};
use crate::env::{Action, EpisodeEnd, Env, Goal, PoseStack, Transition};
use crate::error::{Error, Result};
use crate::eval::{generalization_sweep, transfer_finetune, AgentPolicy, EvalReport, TransferConfig, TransferCurve};
use crate::nn::{checkpoint, Learner, Network, ParamSet};
use crate::repnet::{HistoryBuffer, Phi, PretrainLoss, RepNet};
use crate::rewardnet::{OmegaNet, RewardSample};
use crate::rng::{substream, Rng};
use crate::trainer::{train, TrainLog, TrainOutcome};

pub const ROLLOUTS: &str = "rollouts.hroll";
pub const REPNET_CKPT: &str = "repnet.ckpt";
pub const OMEGA_CKPT: &str = "omega.ckpt";
pub const PRETRAIN_LOG: &str = "pretrain_loss.csv";
/// Agent, ω and representation parameters after A3C training, in one file.
pub const AGENT_CKPT: &str = "agent.ckpt";
pub const TRAIN_LOG: &str = "train_log.csv";
pub const EVAL_CSV: &str = "eval.csv";
pub const EVAL_SVG: &str = "eval.svg";

fn out_path(cfg: &ExperimentConfig, name: &str) -> PathBuf {
    cfg.output_dir.join(name)
}

fn require(path: &Path, stage: &str) -> Result<()> {
    if !path.exists() {
        return Err(Error::Config(format!(
            "missing artifact {} (run `{stage}` first)",
            path.display()
        )));
    }
    Ok(())
}

/// Random-policy transitions toward each training goal.
pub fn collect_transitions(cfg: &ExperimentConfig, world: &World) -> Result<Vec<Transition>> {
    let goals = cfg.training_goals(&world.grid)?;
    let mut rng = substream(cfg.seed, "collect");
    let mut env = Env::new(Arc::clone(&world.grid), Arc::clone(&world.frames), cfg.collect.episode_cap);
    let mut out = Vec::with_capacity(goals.len() * cfg.collect.transitions_per_goal);
    for &g in &goals {
        let goal = Goal::from_index(&world.grid, &world.frames, g)?;
        let mut start = true;
        env.reset(None, goal.clone(), &mut rng)?;
        for _ in 0..cfg.collect.transitions_per_goal {
            if env.finished() {
                env.reset(None, goal.clone(), &mut rng)?;
                start = true;
            }
            let obs = env.pose_stack();
            let action = Action::ALL[rng.gen_range(0..Action::COUNT)];
            let s = env.step(action)?;
            out.push(Transition {
                goal: g,
                obs,
                action,
                reward: s.reward,
                next_obs: env.pose_stack(),
                end: s.end,
                episode_start: std::mem::take(&mut start),
            });
        }
    }
    Ok(out)
}

pub fn cmd_collect(cfg: &ExperimentConfig) -> Result<PathBuf> {
    let world = cfg.world()?;
    std::fs::create_dir_all(&cfg.output_dir)?;
    let items = collect_transitions(cfg, &world)?;
    let path = out_path(cfg, ROLLOUTS);
    archive::save(&path, world.grid.num_states(), world.grid.frame_stack, &items)?;
    let goals = items.iter().filter(|t| t.end == EpisodeEnd::Goal).count();
    info!("collected {} transitions ({goals} goal-reaching) into {}", items.len(), path.display());
    Ok(path)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PretrainRecord {
    pub step: usize,
    pub loss: PretrainLoss,
    pub omega: f64,
}

pub const PRETRAIN_HEADER: &str = "step,l_ae,l_fwd,l_inv,l_total,l_omega";

pub fn pretrain_csv(records: &[PretrainRecord]) -> String {
    let mut s = format!("{PRETRAIN_HEADER}\n");
    for r in records {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{}",
            r.step, r.loss.autoencoder, r.loss.forward, r.loss.inverse, r.loss.total, r.omega
        );
    }
    s
}

#[derive(Clone, Copy)]
enum Pick {
    Goal(usize),
    History(usize),
}

/// Balanced ω batch: `goal_fraction` goal-reaching transitions, the rest from
/// history with the next pose drawn uniformly among those present, each
/// flagged for the replicated next stack with probability `replicated_fraction`.
fn pick_omega_batch(cfg: &ExperimentConfig, n: usize, goals: usize, by_pose: &[Vec<usize>], rng: &mut Rng) -> Vec<(Pick, bool)> {
    let n_goal = if goals == 0 {
        0
    } else {
        (cfg.pretrain.goal_fraction * n as f64).round() as usize
    };
    (0..n)
        .map(|i| {
            let p = if i < n_goal {
                Pick::Goal(rng.gen_range(0..goals))
            } else {
                let bucket = &by_pose[rng.gen_range(0..by_pose.len())];
                Pick::History(bucket[rng.gen_range(0..bucket.len())])
            };
            (p, rng.gen::<f64>() < cfg.pretrain.replicated_fraction)
        })
        .collect()
}

/// Symmetric whitening `A = M^{-1/2}` of the second-moment matrix of `phis`
/// (eigenvalues floored at 1e-8 of the largest), and its inverse.
fn whitening(phis: &[Phi]) -> (DMatrix<f64>, DMatrix<f64>) {
    let d = phis[0].0.len();
    let mut m = DMatrix::zeros(d, d);
    for p in phis {
        let v = DVector::from_column_slice(&p.0);
        m += &v * v.transpose();
    }
    m /= phis.len() as f64;
    let eig = m.symmetric_eigen();
    let floor = eig.eigenvalues.max() * 1e-8;
    let q = &eig.eigenvectors;
    let scale = |f: fn(f64) -> f64| {
        let diag = DMatrix::from_diagonal(&eig.eigenvalues.map(|l| f(l.max(floor))));
        q * diag * q.transpose()
    };
    (scale(|l| 1.0 / l.sqrt()), scale(f64::sqrt))
}

/// Joint representation and reward-weight pretraining on archived transitions,
/// followed by `omega_extra_steps` ω-only steps on cached features.
pub fn pretrain(cfg: &ExperimentConfig, world: &World, items: Vec<Transition>) -> Result<(RepNet, OmegaNet, Vec<PretrainRecord>)> {
    if items.is_empty() {
        return Err(Error::Config("rollout archive is empty".into()));
    }
    let (mut repnet, mut omega, _) = cfg.init_networks(world)?;
    let goal_items: Vec<Transition> = items.iter().filter(|t| t.end == EpisodeEnd::Goal).cloned().collect();
    let mut history = HistoryBuffer::new(cfg.pretrain.history_capacity);
    items.into_iter().for_each(|t| history.push(t));
    let mut rep_learner = Learner::new(repnet.params(), cfg.optimizer_for_pretrain());
    let mut omega_learner = Learner::new(omega.params(), cfg.omega_pretrain_optimizer());
    let mut rng = substream(cfg.seed, "pretrain");
    let weights = cfg.loss_weights();
    let k = world.grid.frame_stack;
    let mut by_pose = vec![Vec::new(); world.grid.num_states()];
    for (i, t) in history.items().iter().enumerate() {
        by_pose[t.next_obs.current()].push(i);
    }
    by_pose.retain(|b| !b.is_empty());
    let item = |p: Pick| match p {
        Pick::Goal(i) => &goal_items[i],
        Pick::History(i) => &history.items()[i],
    };
    let mut records = Vec::with_capacity(cfg.pretrain.steps + cfg.pretrain.omega_extra_steps);
    for step in 0..cfg.pretrain.steps {
        let batch = history.sample(cfg.pretrain.batch_size, &mut rng);
        let loss = repnet.pretrain_step(&batch, &world.features, &weights, &mut rep_learner)?;
        let picks = pick_omega_batch(cfg, cfg.pretrain.omega_batch, goal_items.len(), &by_pose, &mut rng);
        let ob = picks
            .into_iter()
            .map(|(p, rep)| {
                let t = item(p);
                let next = if rep {
                    world.features.input(&PoseStack::replicated(t.next_obs.current(), k))
                } else {
                    world.features.input(&t.next_obs)
                };
                Ok(RewardSample {
                    phi_next: repnet.encode(&next)?,
                    goal: t.goal,
                    reward: t.reward,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let l_omega = omega.reward_train_step(&ob, &world.features, &mut omega_learner)?;
        records.push(PretrainRecord { step, loss, omega: l_omega });
    }
    if cfg.pretrain.omega_extra_steps > 0 {
        let encode_next = |t: &Transition| repnet.encode(&world.features.input(&t.next_obs));
        let mut goal_phi = goal_items.iter().map(encode_next).collect::<Result<Vec<_>>>()?;
        let mut hist_phi = history.items().iter().map(encode_next).collect::<Result<Vec<_>>>()?;
        let mut replicated = (0..world.grid.num_states())
            .map(|s| repnet.encode(&world.features.goal_input(s)))
            .collect::<Result<Vec<_>>>()?;
        // Train ω in whitened feature coordinates, then fold the transform back.
        let white = cfg.pretrain.omega_whiten.then(|| whitening(&replicated));
        if let Some((a, a_inv)) = &white {
            for p in goal_phi.iter_mut().chain(hist_phi.iter_mut()).chain(replicated.iter_mut()) {
                p.0 = (a * DVector::from_column_slice(&p.0)).as_slice().to_vec();
            }
            omega.transform_output(a_inv)?;
        }
        let mut omega_learner = Learner::new(omega.params(), cfg.omega_pretrain_optimizer());
        for step in cfg.pretrain.steps..cfg.pretrain.steps + cfg.pretrain.omega_extra_steps {
            let picks = pick_omega_batch(cfg, cfg.pretrain.omega_extra_batch, goal_items.len(), &by_pose, &mut rng);
            let ob: Vec<RewardSample> = picks
                .into_iter()
                .map(|(p, rep)| {
                    let t = item(p);
                    let phi = match (rep, p) {
                        (true, _) => &replicated[t.next_obs.current()],
                        (false, Pick::Goal(i)) => &goal_phi[i],
                        (false, Pick::History(i)) => &hist_phi[i],
                    };
                    RewardSample {
                        phi_next: phi.clone(),
                        goal: t.goal,
                        reward: t.reward,
                    }
                })
                .collect();
            let l_omega = omega.reward_train_step(&ob, &world.features, &mut omega_learner)?;
            records.push(PretrainRecord {
                step,
                loss: PretrainLoss::default(),
                omega: l_omega,
            });
        }
        if let Some((a, _)) = &white {
            omega.transform_output(a)?;
        }
    }
    Ok((repnet, omega, records))
}

pub fn cmd_pretrain(cfg: &ExperimentConfig) -> Result<Vec<PretrainRecord>> {
    let world = cfg.world()?;
    let path = out_path(cfg, ROLLOUTS);
    require(&path, "collect")?;
    let items = archive::load(&path, world.grid.num_states(), world.grid.frame_stack)?;
    let (repnet, omega, records) = match pretrain(cfg, &world, items) {
        Ok(r) => r,
        Err(e) => {
            // keep whatever exists for inspection, flagged as partial
            let (r, o, _) = cfg.init_networks(&world)?;
            checkpoint::save_dirty(&out_path(cfg, REPNET_CKPT), &r.params(), &e.to_string())?;
            checkpoint::save_dirty(&out_path(cfg, OMEGA_CKPT), &o.params(), &e.to_string())?;
            return Err(e);
        }
    };
    checkpoint::save_verified(&out_path(cfg, REPNET_CKPT), &repnet.params())?;
    checkpoint::save_verified(&out_path(cfg, OMEGA_CKPT), &omega.params())?;
    std::fs::write(out_path(cfg, PRETRAIN_LOG), pretrain_csv(&records))?;
    let joint = records[..cfg.pretrain.steps.min(records.len())].last();
    if let (Some(j), Some(last)) = (joint, records.last()) {
        info!("pretraining done: L_phi {:.5}, L_omega {:.5}", j.loss.total, last.omega);
    }
    Ok(records)
}

/// Pretrained representation and ω networks from the output directory.
pub fn load_pretrained(cfg: &ExperimentConfig, world: &World) -> Result<(RepNet, OmegaNet, AgentNet)> {
    let (mut repnet, mut omega, agent) = cfg.init_networks(world)?;
    for (name, net) in [(REPNET_CKPT, &mut repnet as &mut dyn LoadParams), (OMEGA_CKPT, &mut omega)] {
        let p = out_path(cfg, name);
        require(&p, "pretrain")?;
        net.load_params(&checkpoint::load_clean(&p)?)?;
    }
    Ok((repnet, omega, agent))
}

trait LoadParams {
    fn load_params(&mut self, p: &ParamSet) -> Result<()>;
}

impl<N: Network> LoadParams for N {
    fn load_params(&mut self, p: &ParamSet) -> Result<()> {
        self.load(p)
    }
}

pub fn cmd_train(cfg: &ExperimentConfig) -> Result<TrainOutcome> {
    let world = cfg.world()?;
    let (repnet, omega, agent) = load_pretrained(cfg, &world)?;
    let tcfg = cfg.train_config(&world.grid)?;
    let setup = cfg.train_setup(&world, repnet, omega, agent);
    let out = train(&setup, &tcfg)?;
    let mut all = out.agent.clone();
    all.extend(out.omega.clone())?;
    all.extend(out.repnet.clone())?;
    checkpoint::save_verified(&out_path(cfg, AGENT_CKPT), &all)?;
    out.log.save(&out_path(cfg, TRAIN_LOG))?;
    info!("trained {} updates on goals {:?}", out.agent.version(), goal_names(&world, &tcfg.goals));
    Ok(out)
}

fn goal_names(world: &World, goals: &[usize]) -> Vec<String> {
    goals.iter().map(|g| format_pose(world.grid.state(*g))).collect()
}

/// Trained agent, ω and representation from [`AGENT_CKPT`].
pub fn load_trained(cfg: &ExperimentConfig, world: &World) -> Result<(RepNet, OmegaNet, AgentNet, u64)> {
    let (mut repnet, mut omega, mut agent) = cfg.init_networks(world)?;
    let p = out_path(cfg, AGENT_CKPT);
    require(&p, "train")?;
    let all = checkpoint::load_clean(&p)?;
    agent.load(&all)?;
    omega.load(&all)?;
    repnet.load(&all)?;
    Ok((repnet, omega, agent, all.version()))
}

pub fn cmd_eval(cfg: &ExperimentConfig) -> Result<EvalReport> {
    let world = cfg.world()?;
    let (_, _, agent, _) = load_trained(cfg, &world)?;
    let trained = cfg.training_goals(&world.grid)?;
    let mut goals = trained.clone();
    goals.extend(cfg.heldout_goals(&world.grid)?);
    let mut policy = AgentPolicy::new(&agent, &world.features, cfg.action_mode()?);
    let report = generalization_sweep(
        &mut policy,
        &world.grid,
        &world.frames,
        &goals,
        &trained,
        cfg.eval.episodes,
        cfg.eval.cap,
        substream(cfg.seed, "eval").gen(),
    )?;
    report.save(&out_path(cfg, EVAL_CSV))?;
    if cfg.eval.svg {
        std::fs::write(out_path(cfg, EVAL_SVG), report.to_svg())?;
    }
    info!(
        "eval: trained mean {:?}, held-out mean {:?}",
        report.mean_rate(true),
        report.mean_rate(false)
    );
    Ok(report)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransferResult {
    pub goal: usize,
    pub finetuned: TransferCurve,
    pub baseline: Option<TransferCurve>,
}

/// Novel goal: explicit, configured, or the weakest held-out goal of the last eval.
fn transfer_goal(cfg: &ExperimentConfig, world: &World, goal: Option<&str>) -> Result<usize> {
    let spec = goal.map(str::to_string).or_else(|| (!cfg.transfer.goal.is_empty()).then(|| cfg.transfer.goal.clone()));
    if let Some(s) = spec {
        let p = parse_pose(&s)?;
        return world
            .grid
            .state_index(p)
            .ok_or_else(|| Error::Config(format!("transfer goal `{s}` is not a free pose")));
    }
    let path = out_path(cfg, EVAL_CSV);
    require(&path, "eval")?;
    let text = std::fs::read_to_string(&path)?;
    let mut best: Option<(f64, usize)> = None;
    for line in text.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() < 5 || f[1] != "false" {
            continue;
        }
        let (g, r): (usize, f64) = match (f[0].parse(), f[4].parse()) {
            (Ok(g), Ok(r)) => (g, r),
            _ => return Err(Error::Config(format!("malformed line in {}: `{line}`", path.display()))),
        };
        if best.map(|(br, _)| r < br).unwrap_or(true) {
            best = Some((r, g));
        }
    }
    best.map(|(_, g)| g)
        .ok_or_else(|| Error::Config("no held-out goal in the eval report".into()))
}

pub fn cmd_transfer(cfg: &ExperimentConfig, goal: Option<&str>) -> Result<TransferResult> {
    let world = cfg.world()?;
    let goal = transfer_goal(cfg, &world, goal)?;
    let (repnet, omega, agent, version) = load_trained(cfg, &world)?;
    let mut tcfg = cfg.train_config(&world.grid)?;
    tcfg.start_iteration = version;
    let tc = TransferConfig {
        budget: cfg.transfer.budget,
        sample_every: cfg.transfer.sample_every,
        episodes: cfg.transfer.episodes,
        cap: cfg.eval.cap,
        mode: cfg.action_mode()?,
        seed: cfg.seed,
    };
    let setup = cfg.train_setup(&world, repnet.clone(), omega.clone(), agent);
    let finetuned = transfer_finetune(&setup, &tcfg, goal, &tc)?;
    let name = format!("transfer_{goal}");
    finetuned.save(&out_path(cfg, &format!("{name}.csv")))?;
    if cfg.eval.svg {
        std::fs::write(out_path(cfg, &format!("{name}.svg")), finetuned.to_svg())?;
    }
    let baseline = if cfg.transfer.baseline {
        let (_, _, fresh) = cfg.init_networks(&world)?;
        let (p_rep, p_om, _) = load_pretrained(cfg, &world)?;
        let scratch = cfg.train_setup(&world, p_rep, p_om, fresh);
        let curve = transfer_finetune(&scratch, &tcfg, goal, &tc)?;
        curve.save(&out_path(cfg, &format!("{name}_scratch.csv")))?;
        Some(curve)
    } else {
        None
    };
    info!(
        "transfer to {}: fine-tuned {:.2}, scratch {:?}",
        format_pose(world.grid.state(goal)),
        finetuned.final_rate(),
        baseline.as_ref().map(TransferCurve::final_rate)
    );
    Ok(TransferResult { goal, finetuned, baseline })
}

/// Parse a saved training log from the output directory.
pub fn load_train_log(cfg: &ExperimentConfig) -> Result<TrainLog> {
    let p = out_path(cfg, TRAIN_LOG);
    require(&p, "train")?;
    TrainLog::from_csv(&std::fs::read_to_string(p)?)
}
