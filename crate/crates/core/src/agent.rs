//! Goal-conditioned actor-critic with a successor-feature head: a siamese
//! encoder shared by the state and goal inputs, a trunk, and π, V and ψ heads.
//! Also the returns, the two advantages and the combined loss.

use crate::env::{Action, EpisodeEnd, Transition};
use crate::error::{Error, Result};
use crate::features::{Featurizer, InputMode};
use crate::nn::{self, concat, entropy, log_softmax, softmax, ConvSpec, Init, Layer, Network, Sequential, Tape, Tensor};
use crate::rewardnet::Omega;
use crate::repnet::Phi;

const HEAD_INIT_SCALE: f64 = 0.01;

#[derive(Debug, Clone, PartialEq)]
pub struct AgentOutput {
    pub logits: Vec<f64>,
    pub pi: Vec<f64>,
    pub v: f64,
    pub psi: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AgentConfig {
    pub conv: ConvSpec,
    /// Width of each branch of the siamese encoder.
    pub embed: usize,
    pub trunk: Vec<usize>,
    /// Successor-feature dimension; must match the representation's d.
    pub d: usize,
}

#[derive(Debug, Clone)]
pub struct AgentNet {
    /// Shared by state and goal. Empty in tabular mode.
    pub encoder: Sequential,
    pub trunk: Sequential,
    pub pi_head: Sequential,
    pub v_head: Sequential,
    pub psi_head: Sequential,
    input_shape: Vec<usize>,
    d: usize,
}

impl Network for AgentNet {
    fn modules(&self) -> Vec<&Sequential> {
        vec![&self.encoder, &self.trunk, &self.pi_head, &self.v_head, &self.psi_head]
    }

    fn modules_mut(&mut self) -> Vec<&mut Sequential> {
        vec![
            &mut self.encoder,
            &mut self.trunk,
            &mut self.pi_head,
            &mut self.v_head,
            &mut self.psi_head,
        ]
    }
}

/// Recorded forward passes of one rollout.
#[derive(Debug)]
pub struct RolloutTape {
    goal_embedding: Tensor,
    goal_tape: Tape,
    steps: Vec<StepTape>,
}

#[derive(Debug)]
struct StepTape {
    encoder: Tape,
    trunk: Tape,
    pi: Tape,
    v: Tape,
    psi: Tape,
}

impl RolloutTape {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}

impl AgentNet {
    /// Pixel mode: conv encoder + ReLU, a ReLU trunk and linear heads.
    /// Tabular mode: the concatenated one-hots feed linear heads directly.
    pub fn new(cfg: &AgentConfig, features: &Featurizer, init: &mut Init) -> Result<Self> {
        let input_shape = features.input_shape();
        let (encoder, trunk, width, d) = match features.mode() {
            InputMode::Pixels => {
                let s = [input_shape[0], input_shape[1], input_shape[2]];
                let mut enc = nn::conv_encoder("agent/enc", s, &cfg.conv, cfg.embed, init)?;
                enc.layers.push(Layer::relu("agent/enc/relu2"));
                let mut layers = Vec::new();
                let mut w = 2 * cfg.embed;
                for (i, &h) in cfg.trunk.iter().enumerate() {
                    layers.push(Layer::dense(&format!("agent/trunk/fc{i}"), w, h, init));
                    layers.push(Layer::relu(&format!("agent/trunk/relu{i}")));
                    w = h;
                }
                (enc, Sequential::new(layers), w, cfg.d)
            }
            InputMode::Tabular => {
                let n = features.num_states();
                (Sequential::default(), Sequential::default(), 2 * n, n)
            }
        };
        // near-uniform π and near-zero V and ψ at the start
        let head = |name: &str, outputs: usize, init: &mut Init| {
            let mut l = Layer::dense(name, width, outputs, init);
            l.params[0].scale(HEAD_INIT_SCALE);
            Sequential::new(vec![l])
        };
        Ok(Self {
            encoder,
            trunk,
            pi_head: head("agent/pi", Action::COUNT, init),
            v_head: head("agent/v", 1, init),
            psi_head: head("agent/psi", d, init),
            input_shape,
            d,
        })
    }

    pub fn psi_dim(&self) -> usize {
        self.d
    }

    fn check(&self, x: &Tensor, what: &str) -> Result<()> {
        if x.shape() != self.input_shape.as_slice() {
            return Err(Error::Shape {
                layer: format!("agent/{what}"),
                expected: self.input_shape.clone(),
                got: x.shape().to_vec(),
            });
        }
        Ok(())
    }

    fn heads(&self, h: &Tensor) -> Result<AgentOutput> {
        let logits = self.pi_head.infer(h)?.into_vec();
        Ok(AgentOutput {
            pi: softmax(&logits),
            logits,
            v: self.v_head.infer(h)?.data()[0],
            psi: self.psi_head.infer(h)?.into_vec(),
        })
    }

    /// (π, V, ψ) for an observation and goal.
    pub fn act(&self, obs: &Tensor, goal: &Tensor) -> Result<AgentOutput> {
        self.check(obs, "obs")?;
        self.check(goal, "goal")?;
        let es = self.encoder.infer(obs)?;
        let eg = self.encoder.infer(goal)?;
        let h = self.trunk.infer(&concat(&[es.data(), eg.data()]))?;
        self.heads(&h)
    }

    /// Start recording a rollout toward `goal`; the goal is encoded once.
    pub fn begin_rollout(&self, goal: &Tensor) -> Result<RolloutTape> {
        self.check(goal, "goal")?;
        let (goal_embedding, goal_tape) = self.encoder.forward(goal)?;
        Ok(RolloutTape {
            goal_embedding,
            goal_tape,
            steps: Vec::new(),
        })
    }

    /// Forward one step and record it for the backward pass.
    pub fn record_step(&self, tape: &mut RolloutTape, obs: &Tensor) -> Result<AgentOutput> {
        self.check(obs, "obs")?;
        let (es, enc_tape) = self.encoder.forward(obs)?;
        let (h, trunk_tape) = self.trunk.forward(&concat(&[es.data(), tape.goal_embedding.data()]))?;
        let (logits, pi_tape) = self.pi_head.forward(&h)?;
        let (v, v_tape) = self.v_head.forward(&h)?;
        let (psi, psi_tape) = self.psi_head.forward(&h)?;
        tape.steps.push(StepTape {
            encoder: enc_tape,
            trunk: trunk_tape,
            pi: pi_tape,
            v: v_tape,
            psi: psi_tape,
        });
        let logits = logits.into_vec();
        Ok(AgentOutput {
            pi: softmax(&logits),
            logits,
            v: v.data()[0],
            psi: psi.into_vec(),
        })
    }

    /// Forward one step against the rollout's goal embedding without recording.
    pub fn peek_step(&self, tape: &RolloutTape, obs: &Tensor) -> Result<AgentOutput> {
        self.check(obs, "obs")?;
        let es = self.encoder.infer(obs)?;
        let h = self.trunk.infer(&concat(&[es.data(), tape.goal_embedding.data()]))?;
        self.heads(&h)
    }

    /// Accumulate parameter gradients from per-step output gradients.
    pub fn backward(&mut self, mut tape: RolloutTape, grads: &[OutputGrad]) -> Result<()> {
        if grads.len() != tape.steps.len() {
            return Err(Error::Shape {
                layer: "agent/rollout".into(),
                expected: vec![tape.steps.len()],
                got: vec![grads.len()],
            });
        }
        let e = tape.goal_embedding.len();
        let mut d_goal = vec![0.0; e];
        for (st, g) in tape.steps.iter_mut().zip(grads) {
            let mut dh = self.pi_head.backward(&mut st.pi, &Tensor::vector(g.logits.clone()))?;
            dh.add_assign(&self.v_head.backward(&mut st.v, &Tensor::vector(vec![g.v]))?);
            if let Some(gp) = &g.psi {
                dh.add_assign(&self.psi_head.backward(&mut st.psi, &Tensor::vector(gp.clone()))?);
            }
            let dx = self.trunk.backward(&mut st.trunk, &dh)?;
            let split = dx.len() - e;
            for (a, b) in d_goal.iter_mut().zip(&dx.data()[split..]) {
                *a += b;
            }
            if !self.encoder.layers.is_empty() {
                self.encoder
                    .backward_params(&mut st.encoder, &Tensor::vector(dx.data()[..split].to_vec()))?;
            }
        }
        if !self.encoder.layers.is_empty() {
            self.encoder.backward_params(&mut tape.goal_tape, &Tensor::vector(d_goal))?;
        }
        Ok(())
    }
}

/// Successor-feature inputs of a rollout: φ(s_t) from the representation
/// network, ω(g), and ψ(s_T) for truncated rollouts.
#[derive(Debug, Clone, PartialEq)]
pub struct SrInputs {
    pub phi: Vec<Phi>,
    pub omega: Omega,
    pub bootstrap_psi: Vec<f64>,
}

/// Up to `ns` consecutive transitions of one episode toward one goal.
#[derive(Debug, Clone, PartialEq)]
pub struct RolloutBatch {
    pub transitions: Vec<Transition>,
    /// V(s_T); ignored when the last transition reached the goal.
    pub bootstrap_value: f64,
    /// `None` runs plain actor-critic without the ψ pathway.
    pub sr: Option<SrInputs>,
    pub lambda: f64,
    pub gamma: f64,
}

impl RolloutBatch {
    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    fn ends_at_goal(&self) -> bool {
        self.transitions.last().map(|t| t.end == EpisodeEnd::Goal).unwrap_or(false)
    }

    /// Discount applied to step `t`'s successor: 0 on a goal-reaching step.
    pub fn gamma_at(&self, t: usize) -> f64 {
        if self.transitions[t].end == EpisodeEnd::Goal {
            0.0
        } else {
            self.gamma
        }
    }

    fn uses_psi(&self) -> bool {
        self.lambda != 0.0 && self.sr.is_some()
    }

    fn validate(&self, outputs: usize) -> Result<()> {
        if self.transitions.is_empty() {
            return Err(Error::Config("rollout is empty".into()));
        }
        if self.transitions[..self.len() - 1].iter().any(Transition::terminal) {
            return Err(Error::Config("only the last transition of a rollout may be terminal".into()));
        }
        if outputs != self.len() {
            return Err(Error::Shape {
                layer: "agent/outputs".into(),
                expected: vec![self.len()],
                got: vec![outputs],
            });
        }
        if let (true, Some(sr)) = (self.uses_psi(), &self.sr) {
            if sr.phi.len() != self.len() {
                return Err(Error::Shape {
                    layer: "agent/phi".into(),
                    expected: vec![self.len()],
                    got: vec![sr.phi.len()],
                });
            }
        }
        Ok(())
    }
}

/// R_t = r_t + γ R_{t+1}, seeded with V(s_T), or 0 when the rollout reached the goal.
pub fn n_step_returns(rollout: &RolloutBatch) -> Vec<f64> {
    let mut r = if rollout.ends_at_goal() { 0.0 } else { rollout.bootstrap_value };
    let mut out = vec![0.0; rollout.len()];
    for t in (0..rollout.len()).rev() {
        r = rollout.transitions[t].reward + rollout.gamma * r;
        out[t] = r;
    }
    out
}

pub fn advantage_v(returns: &[f64], values: &[f64]) -> Vec<f64> {
    returns.iter().zip(values).map(|(r, v)| r - v).collect()
}

/// [φ_t + γ_t ψ_{t+1} − ψ_t]ᵀ ω.
pub fn advantage_psi(phi_t: &[f64], psi_t: &[f64], psi_t1: &[f64], omega: &[f64], gamma_t: f64) -> f64 {
    let mut a = 0.0;
    for i in 0..omega.len() {
        a += (phi_t[i] + gamma_t * psi_t1[i] - psi_t[i]) * omega[i];
    }
    a
}

/// Per-step regression targets φ_t + γ_t ψ_{t+1}, with ψ(s_T) after the last step.
pub fn psi_targets(rollout: &RolloutBatch, psis: &[Vec<f64>]) -> Option<Vec<Vec<f64>>> {
    let sr = rollout.sr.as_ref()?;
    Some(
        (0..rollout.len())
            .map(|t| {
                let next = if t + 1 < rollout.len() { &psis[t + 1] } else { &sr.bootstrap_psi };
                let g = rollout.gamma_at(t);
                sr.phi[t].0.iter().zip(next).map(|(p, n)| p + g * n).collect()
            })
            .collect(),
    )
}

/// Mean squared Bellman residual of ψ.
pub fn loss_psi(rollout: &RolloutBatch, psis: &[Vec<f64>]) -> Option<f64> {
    let targets = psi_targets(rollout, psis)?;
    let t = rollout.len() as f64;
    Some(
        targets
            .iter()
            .zip(psis)
            .map(|(y, p)| y.iter().zip(p).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
            .sum::<f64>()
            / t,
    )
}

/// Value targets: n-step returns, or r_t + γ_t V_{t+1} in one-step mode.
pub fn value_targets(rollout: &RolloutBatch, values: &[f64], one_step: bool) -> Vec<f64> {
    if !one_step {
        return n_step_returns(rollout);
    }
    (0..rollout.len())
        .map(|t| {
            let next = if t + 1 < rollout.len() { values[t + 1] } else { rollout.bootstrap_value };
            rollout.transitions[t].reward + rollout.gamma_at(t) * next
        })
        .collect()
}

pub fn loss_v(rollout: &RolloutBatch, values: &[f64], one_step: bool) -> f64 {
    let y = value_targets(rollout, values, one_step);
    y.iter().zip(values).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / rollout.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub beta: f64,
    pub value_coef: f64,
    pub psi_coef: f64,
    pub one_step_value: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            beta: 0.01,
            value_coef: 0.5,
            psi_coef: 0.1,
            one_step_value: false,
        }
    }
}

/// Quantities treated as constants by the gradient: advantages and targets.
#[derive(Debug, Clone, PartialEq)]
pub struct LossTargets {
    pub advantages: Vec<f64>,
    pub value_targets: Vec<f64>,
    /// Present only when the ψ pathway is active (λ ≠ 0).
    pub psi_targets: Option<Vec<Vec<f64>>>,
}

pub fn loss_targets(rollout: &RolloutBatch, outputs: &[AgentOutput], cfg: &LossConfig) -> Result<LossTargets> {
    rollout.validate(outputs.len())?;
    let values: Vec<f64> = outputs.iter().map(|o| o.v).collect();
    let value_targets = value_targets(rollout, &values, cfg.one_step_value);
    let mut advantages = advantage_v(&n_step_returns(rollout), &values);
    let mut psi_t = None;
    if rollout.uses_psi() {
        let sr = rollout.sr.as_ref().unwrap();
        let psis: Vec<Vec<f64>> = outputs.iter().map(|o| o.psi.clone()).collect();
        for (t, a) in advantages.iter_mut().enumerate() {
            let next = if t + 1 < rollout.len() { &psis[t + 1] } else { &sr.bootstrap_psi };
            let ap = advantage_psi(&sr.phi[t].0, &psis[t], next, &sr.omega.0, rollout.gamma_at(t));
            *a += rollout.lambda * ap;
        }
        psi_t = psi_targets(rollout, &psis);
    }
    Ok(LossTargets {
        advantages,
        value_targets,
        psi_targets: psi_t,
    })
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossBreakdown {
    pub policy: f64,
    pub value: f64,
    /// Zero when the ψ pathway is inactive.
    pub psi: f64,
    /// Mean policy entropy.
    pub entropy: f64,
    pub total: f64,
}

/// Gradient of the total loss with respect to one step's head outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct OutputGrad {
    pub logits: Vec<f64>,
    pub v: f64,
    pub psi: Option<Vec<f64>>,
}

/// L_π + c_V·L_V + c_ψ·L_ψ − β·H with the given constant targets, and the
/// gradient with respect to each step's outputs.
pub fn total_loss(
    rollout: &RolloutBatch,
    outputs: &[AgentOutput],
    targets: &LossTargets,
    cfg: &LossConfig,
) -> Result<(LossBreakdown, Vec<OutputGrad>)> {
    rollout.validate(outputs.len())?;
    let n = rollout.len() as f64;
    let mut out = LossBreakdown::default();
    let mut grads = Vec::with_capacity(outputs.len());
    for (t, o) in outputs.iter().enumerate() {
        let a = rollout.transitions[t].action.index();
        let logp = log_softmax(&o.logits);
        let pi = softmax(&o.logits);
        let h = entropy(&pi);
        let adv = targets.advantages[t];
        out.policy -= adv * logp[a] / n;
        out.entropy += h / n;
        let g_logits: Vec<f64> = (0..pi.len())
            .map(|j| {
                let onehot = if j == a { 1.0 } else { 0.0 };
                (-adv * (onehot - pi[j]) + cfg.beta * pi[j] * (logp[j] + h)) / n
            })
            .collect();

        let ev = targets.value_targets[t] - o.v;
        out.value += ev * ev / n;
        let g_v = -2.0 * cfg.value_coef * ev / n;

        let g_psi = targets.psi_targets.as_ref().map(|ys| {
            ys[t]
                .iter()
                .zip(&o.psi)
                .map(|(y, p)| {
                    let e = y - p;
                    out.psi += e * e / n;
                    -2.0 * cfg.psi_coef * e / n
                })
                .collect()
        });
        grads.push(OutputGrad {
            logits: g_logits,
            v: g_v,
            psi: g_psi,
        });
    }
    out.total = out.policy + cfg.value_coef * out.value - cfg.beta * out.entropy;
    if targets.psi_targets.is_some() {
        out.total += cfg.psi_coef * out.psi;
    }
    Ok((out, grads))
}

/// Sample an action index from π with a uniform draw `u` in [0, 1).
pub fn sample_action(pi: &[f64], u: f64) -> Action {
    let mut acc = 0.0;
    for (i, p) in pi.iter().enumerate() {
        acc += p;
        if u < acc {
            return Action::from_index(i).unwrap();
        }
    }
    Action::from_index(pi.len() - 1).unwrap()
}

pub fn greedy_action(pi: &[f64]) -> Action {
    Action::from_index(nn::argmax(pi)).unwrap()
}
