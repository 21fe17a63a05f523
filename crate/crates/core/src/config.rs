//! Experiment configuration: one TOML file, unknown keys rejected.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::agent::{AgentConfig, AgentNet, LossConfig};
use crate::env::{CellMap, FrameCache, GridSpec, Heading, Pose, Renderer, DEFAULT_MAP, SMALL_MAP};
use crate::error::{Error, Result};
use crate::eval::ActionMode;
use crate::features::{Featurizer, InputMode};
use crate::nn::{ConvSpec, Init, OptimizerKind};
use crate::repnet::{LossWeights, RepNet, RepNetConfig};
use crate::rewardnet::OmegaNet;
use crate::rng::substream;
use crate::trainer::{TrainConfig, TrainSetup};

use rand::seq::SliceRandom;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    /// One-hot state inputs instead of rendered frames.
    pub tabular: bool,
    pub env: EnvSection,
    pub network: NetworkSection,
    pub collect: CollectSection,
    pub pretrain: PretrainSection,
    pub train: TrainSection,
    pub eval: EvalSection,
    pub transfer: TransferSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnvSection {
    /// `"default"`, `"small"`, or a path to a map file.
    pub map: String,
    pub render_height: usize,
    pub render_width: usize,
    pub frame_stack: usize,
    pub step_cap: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkSection {
    pub d: usize,
    pub conv_channels: [usize; 2],
    pub conv_kernels: [usize; 2],
    pub conv_strides: [usize; 2],
    /// Siamese encoder output width.
    pub embed: usize,
    pub trunk: Vec<usize>,
    /// Hidden width of the decoder and dynamics heads.
    pub head_hidden: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CollectSection {
    pub transitions_per_goal: usize,
    pub episode_cap: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainSection {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub w_ae: f64,
    pub w_fwd: f64,
    pub w_inv: f64,
    pub omega_batch: usize,
    pub omega_lr: f64,
    /// Share of goal-reaching transitions in each ω batch.
    pub goal_fraction: f64,
    /// Share of ω samples whose next frame stack is replaced by the replicated next pose.
    pub replicated_fraction: f64,
    /// Extra ω-only steps after the joint phase, on features cached from the final representation.
    pub omega_extra_steps: usize,
    pub omega_extra_batch: usize,
    /// Precondition the ω-only steps by whitening the cached features.
    pub omega_whiten: bool,
    pub history_capacity: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub workers: usize,
    pub rollout_len: usize,
    pub iterations: u64,
    pub lambda_initial: f64,
    pub lambda_final: f64,
    pub lambda_switch: u64,
    pub beta: f64,
    pub gamma: f64,
    pub value_coef: f64,
    pub psi_coef: f64,
    pub one_step_value: bool,
    /// `"rmsprop"` or `"sgd"`.
    pub optimizer: String,
    pub lr: f64,
    pub rms_decay: f64,
    pub rms_eps: f64,
    pub max_grad_norm: Option<f64>,
    /// Training goals as `"x,y,H"` with H one of N, E, S, W. Empty: draw `num_goals`.
    pub goals: Vec<String>,
    pub num_goals: usize,
    pub joint_omega: bool,
    pub omega_lr_scale: f64,
    pub omega_every: u64,
    pub joint_repnet: bool,
    pub strict: bool,
    pub checked: bool,
    pub checkpoint_every: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub episodes: usize,
    pub cap: usize,
    /// `"greedy"` or `"sample"`.
    pub policy: String,
    /// Held-out goals as `"x,y,H"`. Empty: draw `num_heldout` non-training poses.
    pub goals: Vec<String>,
    pub num_heldout: usize,
    pub svg: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TransferSection {
    /// Novel goal `"x,y,H"`; empty picks the weakest held-out goal of the last eval.
    pub goal: String,
    pub budget: u64,
    pub sample_every: u64,
    pub episodes: usize,
    /// Also train a freshly initialized agent with the same budget.
    pub baseline: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: PathBuf::from("runs/default"),
            tabular: false,
            env: EnvSection::default(),
            network: NetworkSection::default(),
            collect: CollectSection::default(),
            pretrain: PretrainSection::default(),
            train: TrainSection::default(),
            eval: EvalSection::default(),
            transfer: TransferSection::default(),
        }
    }
}

impl Default for EnvSection {
    fn default() -> Self {
        Self {
            map: "default".into(),
            render_height: 32,
            render_width: 32,
            frame_stack: 4,
            step_cap: 500,
        }
    }
}

impl Default for NetworkSection {
    fn default() -> Self {
        Self {
            d: 32,
            conv_channels: [8, 16],
            conv_kernels: [4, 3],
            conv_strides: [2, 2],
            embed: 64,
            trunk: vec![128, 64],
            head_hidden: 64,
        }
    }
}

impl Default for CollectSection {
    fn default() -> Self {
        Self {
            transitions_per_goal: 5000,
            episode_cap: 500,
        }
    }
}

impl Default for PretrainSection {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 16,
            lr: 7e-4,
            w_ae: 1.0,
            w_fwd: 1.0,
            w_inv: 1.0,
            omega_batch: 16,
            omega_lr: 7e-4,
            goal_fraction: 0.5,
            replicated_fraction: 1.0,
            omega_extra_steps: 10_000,
            omega_extra_batch: 256,
            omega_whiten: true,
            history_capacity: 50_000,
        }
    }
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            workers: t.workers,
            rollout_len: t.rollout_len,
            iterations: t.iterations,
            lambda_initial: t.lambda_initial,
            lambda_final: t.lambda_final,
            lambda_switch: t.lambda_switch,
            beta: t.loss.beta,
            gamma: t.gamma,
            value_coef: t.loss.value_coef,
            psi_coef: t.loss.psi_coef,
            one_step_value: false,
            optimizer: "rmsprop".into(),
            lr: 7e-4,
            rms_decay: 0.99,
            rms_eps: 1e-5,
            max_grad_norm: None,
            goals: Vec::new(),
            num_goals: 5,
            joint_omega: true,
            omega_lr_scale: 0.1,
            omega_every: 1,
            joint_repnet: false,
            strict: false,
            checked: false,
            checkpoint_every: 0,
        }
    }
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            episodes: crate::eval::DEFAULT_EPISODES,
            cap: crate::eval::DEFAULT_CAP,
            policy: "greedy".into(),
            goals: Vec::new(),
            num_heldout: 20,
            svg: true,
        }
    }
}

impl Default for TransferSection {
    fn default() -> Self {
        Self {
            goal: String::new(),
            budget: 3000,
            sample_every: 250,
            episodes: 20,
            baseline: true,
        }
    }
}

/// Parse `"x,y,H"`.
pub fn parse_pose(s: &str) -> Result<Pose> {
    let bad = || Error::Config(format!("pose `{s}` is not of the form \"x,y,H\" with H in N/E/S/W"));
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    if parts.len() != 3 {
        return Err(bad());
    }
    let x = parts[0].parse().map_err(|_| bad())?;
    let y = parts[1].parse().map_err(|_| bad())?;
    let heading = match parts[2] {
        "N" | "n" => Heading::N,
        "E" | "e" => Heading::E,
        "S" | "s" => Heading::S,
        "W" | "w" => Heading::W,
        _ => return Err(bad()),
    };
    Ok(Pose::new(x, y, heading))
}

pub fn format_pose(p: Pose) -> String {
    let h = ["N", "E", "S", "W"][p.heading.index()];
    format!("{},{},{h}", p.x, p.y)
}

/// Environment, renderer cache and input featurizer built from a config.
#[derive(Clone)]
pub struct World {
    pub grid: Arc<GridSpec>,
    pub frames: Arc<FrameCache>,
    pub features: Featurizer,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.message().trim().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text)?;
        // relative map paths resolve against the config file
        if !matches!(cfg.env.map.as_str(), "default" | "small") {
            let p = Path::new(&cfg.env.map);
            if p.is_relative() {
                if let Some(dir) = path.parent() {
                    cfg.env.map = dir.join(p).to_string_lossy().into_owned();
                }
            }
            if !Path::new(&cfg.env.map).exists() {
                return Err(Error::Config(format!("map file {} does not exist", cfg.env.map)));
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("env.render_height", self.env.render_height),
            ("env.render_width", self.env.render_width),
            ("env.frame_stack", self.env.frame_stack),
            ("env.step_cap", self.env.step_cap),
            ("network.d", self.network.d),
            ("network.embed", self.network.embed),
            ("network.head_hidden", self.network.head_hidden),
            ("collect.transitions_per_goal", self.collect.transitions_per_goal),
            ("collect.episode_cap", self.collect.episode_cap),
            ("pretrain.batch_size", self.pretrain.batch_size),
            ("pretrain.omega_batch", self.pretrain.omega_batch),
            ("pretrain.omega_extra_batch", self.pretrain.omega_extra_batch),
            ("pretrain.history_capacity", self.pretrain.history_capacity),
            ("train.workers", self.train.workers),
            ("train.rollout_len", self.train.rollout_len),
            ("eval.cap", self.eval.cap),
            ("transfer.episodes", self.transfer.episodes),
        ];
        if let Some((k, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{k} must be positive")));
        }
        if self.network.trunk.contains(&0) || self.network.conv_channels.contains(&0) {
            return Err(Error::Config("network widths must be positive".into()));
        }
        if self.train.goals.is_empty() && self.train.num_goals == 0 {
            return Err(Error::Config("train.num_goals must be positive when train.goals is empty".into()));
        }
        for (k, v) in [
            ("pretrain.goal_fraction", self.pretrain.goal_fraction),
            ("pretrain.replicated_fraction", self.pretrain.replicated_fraction),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{k} must lie in [0, 1]")));
            }
        }
        self.optimizer()?;
        self.action_mode()?;
        for g in self.train.goals.iter().chain(&self.eval.goals) {
            parse_pose(g)?;
        }
        if !self.transfer.goal.is_empty() {
            parse_pose(&self.transfer.goal)?;
        }
        Ok(())
    }

    pub fn optimizer(&self) -> Result<OptimizerKind> {
        self.optimizer_with_lr(self.train.lr)
    }

    fn optimizer_with_lr(&self, lr: f64) -> Result<OptimizerKind> {
        match self.train.optimizer.as_str() {
            "rmsprop" => Ok(OptimizerKind::RmsProp {
                lr,
                decay: self.train.rms_decay,
                eps: self.train.rms_eps,
            }),
            "sgd" => Ok(OptimizerKind::Sgd { lr }),
            other => Err(Error::Config(format!("unknown optimizer `{other}` (expected rmsprop or sgd)"))),
        }
    }

    /// Optimizer for the representation network during pretraining.
    pub fn optimizer_for_pretrain(&self) -> OptimizerKind {
        self.optimizer_with_lr(self.pretrain.lr).expect("validated")
    }

    pub fn omega_pretrain_optimizer(&self) -> OptimizerKind {
        self.optimizer_with_lr(self.pretrain.omega_lr).expect("validated")
    }

    pub fn action_mode(&self) -> Result<ActionMode> {
        match self.eval.policy.as_str() {
            "greedy" => Ok(ActionMode::Greedy),
            "sample" => Ok(ActionMode::Sample),
            other => Err(Error::Config(format!("unknown eval.policy `{other}` (expected greedy or sample)"))),
        }
    }

    pub fn input_mode(&self) -> InputMode {
        if self.tabular {
            InputMode::Tabular
        } else {
            InputMode::Pixels
        }
    }

    pub fn map_text(&self) -> Result<String> {
        match self.env.map.as_str() {
            "default" => Ok(DEFAULT_MAP.to_string()),
            "small" => Ok(SMALL_MAP.to_string()),
            path => Ok(CellMap::load(Path::new(path))?.to_text()),
        }
    }

    pub fn world(&self) -> Result<World> {
        let grid = Arc::new(GridSpec::parse(
            &self.map_text()?,
            self.env.render_height,
            self.env.render_width,
            self.env.frame_stack,
        )?);
        let frames = Arc::new(Renderer::new(&grid).cache());
        let features = Featurizer::new(self.input_mode(), &grid, Arc::clone(&frames));
        Ok(World { grid, frames, features })
    }

    fn conv(&self) -> ConvSpec {
        ConvSpec {
            channels: self.network.conv_channels,
            kernels: self.network.conv_kernels,
            strides: self.network.conv_strides,
        }
    }

    pub fn repnet_config(&self) -> RepNetConfig {
        RepNetConfig {
            d: self.network.d,
            conv: self.conv(),
            hidden: self.network.head_hidden,
        }
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            autoencoder: self.pretrain.w_ae,
            forward: self.pretrain.w_fwd,
            inverse: self.pretrain.w_inv,
        }
    }

    /// Freshly initialized networks, each from its own named seed stream.
    pub fn init_networks(&self, world: &World) -> Result<(RepNet, OmegaNet, AgentNet)> {
        let mut r = substream(self.seed, "init/repnet");
        let repnet = RepNet::new(&self.repnet_config(), &world.features, &mut Init::Uniform(&mut r))?;
        let d = repnet.dim();
        let mut r = substream(self.seed, "init/omega");
        let omega = OmegaNet::new(d, &self.conv(), &world.features, &mut Init::Uniform(&mut r))?;
        let mut r = substream(self.seed, "init/agent");
        let agent = AgentNet::new(
            &AgentConfig {
                conv: self.conv(),
                embed: self.network.embed,
                trunk: self.network.trunk.clone(),
                d,
            },
            &world.features,
            &mut Init::Uniform(&mut r),
        )?;
        Ok((repnet, omega, agent))
    }

    fn resolve(&self, grid: &GridSpec, poses: &[String]) -> Result<Vec<usize>> {
        poses
            .iter()
            .map(|s| {
                let p = parse_pose(s)?;
                grid.state_index(p)
                    .ok_or_else(|| Error::Config(format!("goal `{s}` is not a free pose on this map")))
            })
            .collect()
    }

    /// Training goal ids: the configured list, or `num_goals` drawn from the seed.
    pub fn training_goals(&self, grid: &GridSpec) -> Result<Vec<usize>> {
        if !self.train.goals.is_empty() {
            return self.resolve(grid, &self.train.goals);
        }
        let n = grid.num_states();
        if self.train.num_goals > n {
            return Err(Error::Config(format!("train.num_goals exceeds the {n} poses of the map")));
        }
        let mut ids: Vec<usize> = (0..n).collect();
        ids.shuffle(&mut substream(self.seed, "goals/train"));
        let mut g = ids[..self.train.num_goals].to_vec();
        g.sort_unstable();
        Ok(g)
    }

    /// Held-out goal ids, disjoint from the training goals.
    pub fn heldout_goals(&self, grid: &GridSpec) -> Result<Vec<usize>> {
        let train = self.training_goals(grid)?;
        if !self.eval.goals.is_empty() {
            let h = self.resolve(grid, &self.eval.goals)?;
            if let Some(g) = h.iter().find(|g| train.contains(g)) {
                return Err(Error::Config(format!(
                    "held-out goal {} is also a training goal",
                    format_pose(grid.state(*g))
                )));
            }
            return Ok(h);
        }
        let mut ids: Vec<usize> = (0..grid.num_states()).filter(|i| !train.contains(i)).collect();
        ids.shuffle(&mut substream(self.seed, "goals/heldout"));
        ids.truncate(self.eval.num_heldout);
        ids.sort_unstable();
        Ok(ids)
    }

    pub fn train_config(&self, grid: &GridSpec) -> Result<TrainConfig> {
        let omega_lr = self.train.lr * self.train.omega_lr_scale;
        Ok(TrainConfig {
            workers: self.train.workers,
            rollout_len: self.train.rollout_len,
            iterations: self.train.iterations,
            start_iteration: 0,
            lambda_initial: self.train.lambda_initial,
            lambda_final: self.train.lambda_final,
            lambda_switch: self.train.lambda_switch,
            gamma: self.train.gamma,
            loss: LossConfig {
                beta: self.train.beta,
                value_coef: self.train.value_coef,
                psi_coef: self.train.psi_coef,
                one_step_value: self.train.one_step_value,
            },
            goals: self.training_goals(grid)?,
            seed: self.seed,
            step_cap: self.env.step_cap,
            optimizer: self.optimizer()?,
            max_grad_norm: self.train.max_grad_norm,
            joint_omega: self.train.joint_omega,
            omega_optimizer: self.optimizer_with_lr(omega_lr)?,
            omega_every: self.train.omega_every,
            joint_repnet: self.train.joint_repnet,
            repnet_optimizer: self.optimizer_with_lr(self.pretrain.lr)?,
            strict: self.train.strict,
            checked: self.train.checked,
            checkpoint_every: self.train.checkpoint_every,
            checkpoint_dir: Some(self.output_dir.join("checkpoints")),
        })
    }

    /// Networks plus world, ready for [`crate::trainer::train`].
    pub fn train_setup(&self, world: &World, repnet: RepNet, omega: OmegaNet, agent: AgentNet) -> TrainSetup {
        TrainSetup {
            grid: Arc::clone(&world.grid),
            frames: Arc::clone(&world.frames),
            features: world.features.clone(),
            agent,
            agent_opt: None,
            repnet,
            omega,
        }
    }
}
