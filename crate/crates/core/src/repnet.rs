//! State representation network: encoder φ(s) with reconstruction,
//! forward-dynamics and inverse-dynamics heads.

use crate::env::{Action, Transition};
use crate::features::{Featurizer, InputMode};
use crate::nn::{
    self, concat, log_softmax, softmax, ConvSpec, Grads, Init, Learner, Network, Sequential, Tape, Tensor,
};
use crate::error::{Error, Result};
use crate::rng::Rng;
use rand::Rng as _;

/// State features φ(s).
#[derive(Debug, Clone, PartialEq)]
pub struct Phi(pub Vec<f64>);

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub autoencoder: f64,
    pub forward: f64,
    pub inverse: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            autoencoder: 1.0,
            forward: 1.0,
            inverse: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RepNetConfig {
    /// Feature dimension; forced to the state count in tabular mode.
    pub d: usize,
    pub conv: ConvSpec,
    pub hidden: usize,
}

/// Per-batch losses of one pretraining step.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct PretrainLoss {
    pub autoencoder: f64,
    pub forward: f64,
    pub inverse: f64,
    pub total: f64,
}

#[derive(Debug, Clone)]
pub struct RepNet {
    /// Empty in tabular mode: φ is the one-hot input itself.
    pub encoder: Sequential,
    pub decoder: Sequential,
    pub forward_head: Sequential,
    pub inverse_head: Sequential,
    d: usize,
    input_shape: Vec<usize>,
}

impl Network for RepNet {
    fn modules(&self) -> Vec<&Sequential> {
        vec![&self.encoder, &self.decoder, &self.forward_head, &self.inverse_head]
    }

    fn modules_mut(&mut self) -> Vec<&mut Sequential> {
        vec![&mut self.encoder, &mut self.decoder, &mut self.forward_head, &mut self.inverse_head]
    }
}

impl RepNet {
    pub fn new(cfg: &RepNetConfig, features: &Featurizer, init: &mut Init) -> Result<Self> {
        let input_shape = features.input_shape();
        let out_len: usize = input_shape.iter().product();
        let (encoder, d) = match features.mode() {
            InputMode::Pixels => {
                let s = [input_shape[0], input_shape[1], input_shape[2]];
                (nn::conv_encoder("repnet/enc", s, &cfg.conv, cfg.d, init)?, cfg.d)
            }
            InputMode::Tabular => (Sequential::default(), features.num_states()),
        };
        Ok(Self {
            encoder,
            decoder: nn::mlp("repnet/dec", &[d, cfg.hidden, out_len], init),
            forward_head: nn::mlp("repnet/fwd", &[d + Action::COUNT, cfg.hidden, d], init),
            inverse_head: nn::mlp("repnet/inv", &[2 * d, cfg.hidden, Action::COUNT], init),
            d,
            input_shape,
        })
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    fn check_input(&self, obs: &Tensor) -> Result<()> {
        if obs.shape() != self.input_shape.as_slice() {
            return Err(Error::Shape {
                layer: "repnet/input".into(),
                expected: self.input_shape.clone(),
                got: obs.shape().to_vec(),
            });
        }
        Ok(())
    }

    pub fn encode(&self, obs: &Tensor) -> Result<Phi> {
        self.check_input(obs)?;
        Ok(Phi(self.encoder.infer(obs)?.into_vec()))
    }

    fn encode_taped(&self, obs: &Tensor) -> Result<(Tensor, Tape)> {
        self.check_input(obs)?;
        self.encoder.forward(obs)
    }

    pub fn decode(&self, phi: &Phi) -> Result<Tensor> {
        self.decoder.infer(&Tensor::vector(phi.0.clone()))?.reshape(&self.input_shape)
    }

    pub fn forward_dynamics(&self, phi: &Phi, action: Action) -> Result<Phi> {
        Ok(Phi(self.forward_head.infer(&fwd_input(&phi.0, action))?.into_vec()))
    }

    pub fn inverse_dynamics(&self, phi_t: &Phi, phi_t1: &Phi) -> Result<Vec<f64>> {
        Ok(self.inverse_head.infer(&concat(&[&phi_t.0, &phi_t1.0]))?.into_vec())
    }

    /// Loss of a batch and, when `backprop` is set, accumulated gradients.
    /// The forward-dynamics target φ(s′) is a constant.
    pub fn batch_loss(
        &mut self,
        batch: &[(Tensor, Action, Tensor)],
        w: &LossWeights,
        backprop: bool,
    ) -> Result<PretrainLoss> {
        if batch.is_empty() {
            return Err(Error::Config("pretraining batch is empty".into()));
        }
        let b = batch.len() as f64;
        let mut loss = PretrainLoss::default();
        for (obs, action, next) in batch {
            let (phi, mut tape_s) = self.encode_taped(obs)?;
            let (phi1, mut tape_s1) = self.encode_taped(next)?;
            let d = self.d;

            let (recon, mut tape_dec) = self.decoder.forward(&phi)?;
            let npix = recon.len() as f64;
            let mut g_recon = vec![0.0; recon.len()];
            for ((g, r), x) in g_recon.iter_mut().zip(recon.data()).zip(obs.data()) {
                let e = r - x;
                loss.autoencoder += e * e / (npix * b);
                *g = w.autoencoder * 2.0 * e / (npix * b);
            }

            let (pred, mut tape_fwd) = self.forward_head.forward(&fwd_input(phi.data(), *action))?;
            let mut g_pred = vec![0.0; d];
            for ((g, p), t) in g_pred.iter_mut().zip(pred.data()).zip(phi1.data()) {
                let e = p - t;
                loss.forward += e * e / (d as f64 * b);
                *g = w.forward * 2.0 * e / (d as f64 * b);
            }

            let (logits, mut tape_inv) = self.inverse_head.forward(&concat(&[phi.data(), phi1.data()]))?;
            let logp = log_softmax(logits.data());
            loss.inverse += -logp[action.index()] / b;
            let mut g_logits = softmax(logits.data());
            g_logits[action.index()] -= 1.0;
            g_logits.iter_mut().for_each(|g| *g *= w.inverse / b);

            if !backprop {
                continue;
            }
            let d_phi_dec = self.decoder.backward(&mut tape_dec, &Tensor::vector(g_recon))?;
            let d_fwd_in = self.forward_head.backward(&mut tape_fwd, &Tensor::vector(g_pred))?;
            let d_inv_in = self.inverse_head.backward(&mut tape_inv, &Tensor::vector(g_logits))?;
            let mut d_phi = d_phi_dec.into_vec();
            for i in 0..d {
                d_phi[i] += d_fwd_in.data()[i] + d_inv_in.data()[i];
            }
            let d_phi1 = d_inv_in.data()[d..].to_vec();
            if !self.encoder.layers.is_empty() {
                self.encoder.backward_params(&mut tape_s, &Tensor::vector(d_phi))?;
                self.encoder.backward_params(&mut tape_s1, &Tensor::vector(d_phi1))?;
            }
        }
        loss.total = w.autoencoder * loss.autoencoder + w.forward * loss.forward + w.inverse * loss.inverse;
        Ok(loss)
    }

    /// Compute the combined loss of a batch of transitions and its gradients.
    /// The caller applies the returned gradients with the optimizer.
    pub fn pretrain_grads(
        &mut self,
        batch: &[Transition],
        features: &Featurizer,
        w: &LossWeights,
    ) -> Result<(PretrainLoss, Grads)> {
        let inputs: Vec<_> = batch
            .iter()
            .map(|t| (features.input(&t.obs), t.action, features.input(&t.next_obs)))
            .collect();
        self.zero_grads();
        let loss = self.batch_loss(&inputs, w, true)?;
        let grads = self.grads();
        self.zero_grads();
        Ok((loss, grads))
    }

    /// One optimizer step on the combined loss.
    pub fn pretrain_step(
        &mut self,
        batch: &[Transition],
        features: &Featurizer,
        w: &LossWeights,
        learner: &mut Learner,
    ) -> Result<PretrainLoss> {
        let (loss, mut grads) = self.pretrain_grads(batch, features, w)?;
        learner.step(self, &mut grads)?;
        Ok(loss)
    }

    /// Encoder-only view of this network, for φ targets.
    pub fn encoder_only(&self) -> FrozenEncoder {
        FrozenEncoder {
            encoder: self.encoder.clone(),
            input_shape: self.input_shape.clone(),
        }
    }
}

fn fwd_input(phi: &[f64], action: Action) -> Tensor {
    let mut one_hot = [0.0; Action::COUNT];
    one_hot[action.index()] = 1.0;
    concat(&[phi, &one_hot])
}

/// Ring buffer of transitions with uniform sampling.
#[derive(Debug, Clone)]
pub struct HistoryBuffer {
    items: Vec<Transition>,
    capacity: usize,
    next: usize,
}

impl HistoryBuffer {
    pub fn new(capacity: usize) -> Self {
        Self {
            items: Vec::with_capacity(capacity.min(1 << 16)),
            capacity: capacity.max(1),
            next: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn push(&mut self, t: Transition) {
        if self.items.len() < self.capacity {
            self.items.push(t);
        } else {
            self.items[self.next] = t;
        }
        self.next = (self.next + 1) % self.capacity;
    }

    pub fn items(&self) -> &[Transition] {
        &self.items
    }

    pub fn sample(&self, n: usize, rng: &mut Rng) -> Vec<Transition> {
        if self.items.is_empty() {
            return Vec::new();
        }
        (0..n).map(|_| self.items[rng.gen_range(0..self.items.len())].clone()).collect()
    }
}

/// Encoder parameters held fixed while the agent trains.
#[derive(Debug, Clone)]
pub struct FrozenEncoder {
    encoder: Sequential,
    input_shape: Vec<usize>,
}

impl FrozenEncoder {
    pub fn encode(&self, obs: &Tensor) -> Result<Phi> {
        if obs.shape() != self.input_shape.as_slice() {
            return Err(Error::Shape {
                layer: "repnet/input".into(),
                expected: self.input_shape.clone(),
                got: obs.shape().to_vec(),
            });
        }
        Ok(Phi(self.encoder.infer(obs)?.into_vec()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{GridSpec, Renderer, SMALL_MAP};
    use crate::nn::gradcheck::check_network;
    use crate::rng::substream;
    use std::sync::Arc;

    fn tiny() -> (Featurizer, RepNetConfig) {
        let grid = GridSpec::parse(SMALL_MAP, 8, 8, 2).unwrap();
        let frames = Arc::new(Renderer::new(&grid).cache());
        let cfg = RepNetConfig {
            d: 4,
            conv: ConvSpec {
                channels: [3, 4],
                kernels: [3, 3],
                strides: [1, 2],
            },
            hidden: 6,
        };
        (Featurizer::new(InputMode::Pixels, &grid, frames), cfg)
    }

    #[test]
    fn encode_is_deterministic_and_zero_for_zero_input() {
        let (f, cfg) = tiny();
        let mut rng = substream(0, "repnet");
        let net = RepNet::new(&cfg, &f, &mut Init::Uniform(&mut rng)).unwrap();
        let obs = f.input(&crate::env::PoseStack(vec![3, 9]));
        assert_eq!(net.encode(&obs).unwrap(), net.encode(&obs).unwrap());
        assert!(net.encode(&Tensor::zeros(&[1, 8, 8])).is_err());

        let mut zero_bias = net.clone();
        for m in zero_bias.modules_mut() {
            for l in &mut m.layers {
                if l.params.len() == 2 {
                    l.params[1].fill(0.0);
                }
            }
        }
        let phi = zero_bias.encode(&Tensor::zeros(&[2, 8, 8])).unwrap();
        assert!(phi.0.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn zero_params_give_zero_prediction_and_uniform_logits() {
        let (f, cfg) = tiny();
        let net = RepNet::new(&cfg, &f, &mut Init::Zeros).unwrap();
        let z = Phi(vec![0.0; 4]);
        assert_eq!(net.forward_dynamics(&z, Action::Forward).unwrap().0, vec![0.0; 4]);
        let p = Phi(vec![0.3, -0.2, 0.1, 0.5]);
        let logits = net.inverse_dynamics(&p, &p).unwrap();
        assert!(logits.iter().all(|v| *v == logits[0]));
        let recon = net.decode(&p).unwrap();
        assert!(recon.is_finite());
    }

    #[test]
    fn blocked_move_targets_equal_features() {
        let (f, cfg) = tiny();
        let mut rng = substream(1, "repnet");
        let mut net = RepNet::new(&cfg, &f, &mut Init::Uniform(&mut rng)).unwrap();
        // (1,1,N) forward is blocked on the small map: s' has the same pose
        let s = crate::env::PoseStack(vec![0, 0]);
        let obs = f.input(&s);
        let phi = net.encode(&obs).unwrap();
        let pred = net.forward_dynamics(&phi, Action::Forward).unwrap();
        let expected: f64 = pred.0.iter().zip(&phi.0).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / 4.0;
        let loss = net.batch_loss(&[(obs.clone(), Action::Forward, obs.clone())], &LossWeights::default(), false).unwrap();
        assert!((loss.forward - expected).abs() < 1e-15);
        // blocked Forward and blocked Backward share φ_t = φ_t1 yet the loss stays finite
        let l2 = net
            .batch_loss(
                &[(obs.clone(), Action::Forward, obs.clone()), (obs.clone(), Action::Backward, obs.clone())],
                &LossWeights::default(),
                false,
            )
            .unwrap();
        assert!(l2.inverse.is_finite() && l2.inverse > 0.0);
    }

    #[test]
    fn losses_are_nonnegative() {
        let (f, cfg) = tiny();
        let mut rng = substream(2, "repnet");
        let mut net = RepNet::new(&cfg, &f, &mut Init::Uniform(&mut rng)).unwrap();
        for i in 0..10 {
            let a = rng.gen_range(0..36);
            let b = rng.gen_range(0..36);
            let batch = vec![(
                f.input(&crate::env::PoseStack(vec![a, b])),
                Action::from_index(i % 4).unwrap(),
                f.input(&crate::env::PoseStack(vec![b, a])),
            )];
            let l = net.batch_loss(&batch, &LossWeights::default(), false).unwrap();
            assert!(l.autoencoder >= 0.0 && l.forward >= 0.0 && l.inverse >= 0.0);
        }
    }

    #[test]
    fn perfect_reconstruction_has_zero_autoencoder_loss() {
        // tabular: φ is the one-hot input, and a decoder whose output equals φ
        let grid = GridSpec::parse("###\n#.#\n###\n", 8, 8, 1).unwrap();
        let frames = Arc::new(Renderer::new(&grid).cache());
        let f = Featurizer::new(InputMode::Tabular, &grid, frames);
        let cfg = RepNetConfig {
            d: 0,
            conv: ConvSpec { channels: [1, 1], kernels: [1, 1], strides: [1, 1] },
            hidden: 4,
        };
        let mut net = RepNet::new(&cfg, &f, &mut Init::Zeros).unwrap();
        for l in &mut net.decoder.layers {
            if l.params.len() == 2 {
                for i in 0..4 {
                    l.params[0].data_mut()[i * 4 + i] = 1.0;
                }
            }
        }
        let x = f.one_hot(2);
        let l = net
            .batch_loss(&[(x.clone(), Action::TurnLeft, f.one_hot(1))], &LossWeights::default(), false)
            .unwrap();
        assert_eq!(l.autoencoder, 0.0);
    }

    #[test]
    fn history_buffer_wraps() {
        let mut h = HistoryBuffer::new(3);
        for i in 0..5 {
            h.push(Transition {
                goal: i,
                obs: crate::env::PoseStack(vec![0]),
                action: Action::Forward,
                reward: 0.0,
                next_obs: crate::env::PoseStack(vec![0]),
                end: crate::env::EpisodeEnd::Running,
                episode_start: false,
            });
        }
        let mut goals: Vec<_> = h.items().iter().map(|t| t.goal).collect();
        goals.sort();
        assert_eq!(goals, vec![2, 3, 4]);
        let mut rng = substream(0, "h");
        assert_eq!(h.sample(7, &mut rng).len(), 7);
    }

    #[test]
    fn combined_gradient_matches_finite_differences() {
        let (f, cfg) = tiny();
        for seed in 0..2 {
            let mut rng = substream(seed, "repnet-gc");
            let mut net = RepNet::new(&cfg, &f, &mut Init::Uniform(&mut rng)).unwrap();
            let batch: Vec<_> = (0..3)
                .map(|i| {
                    let a = rng.gen_range(0..36);
                    let b = rng.gen_range(0..36);
                    let c = rng.gen_range(0..36);
                    (
                        f.input(&crate::env::PoseStack(vec![a, b])),
                        Action::from_index(i % 4).unwrap(),
                        f.input(&crate::env::PoseStack(vec![b, c])),
                    )
                })
                .collect();
            let w = LossWeights { autoencoder: 1.0, forward: 0.7, inverse: 1.3 };
            net.zero_grads();
            net.batch_loss(&batch, &w, true).unwrap();
            let analytic = net.grads();
            // φ(s′) as a forward-dynamics target is a constant: freeze it by
            // evaluating the FD loss with targets from the unperturbed network.
            let targets: Vec<Phi> = batch.iter().map(|(_, _, n)| net.encode(n).unwrap()).collect();
            let report = check_network(&net, &analytic, |n| {
                let mut total = 0.0;
                for ((obs, a, next), tgt) in batch.iter().zip(&targets) {
                    let phi = n.encode(obs).unwrap();
                    let phi1 = n.encode(next).unwrap();
                    let recon = n.decode(&phi).unwrap();
                    let ae: f64 = recon.data().iter().zip(obs.data()).map(|(r, x)| (r - x).powi(2)).sum::<f64>()
                        / recon.len() as f64;
                    let pred = n.forward_dynamics(&phi, *a).unwrap();
                    let fwd: f64 = pred.0.iter().zip(&tgt.0).map(|(p, t)| (p - t).powi(2)).sum::<f64>() / 4.0;
                    let logits = n.inverse_dynamics(&phi, &phi1).unwrap();
                    let inv = -log_softmax(&logits)[a.index()];
                    total += (w.autoencoder * ae + w.forward * fwd + w.inverse * inv) / batch.len() as f64;
                }
                Ok(total)
            })
            .unwrap();
            assert!(report.passes(1e-4), "seed {seed}: {:?}", report.worst());
        }
    }
}
