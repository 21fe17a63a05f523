//! Goal-conditioned reward weights ω(g) and the pseudo-reward r̂ = φᵀω.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};

use crate::features::{Featurizer, InputMode};
use crate::nn::{self, dot, ConvSpec, Grads, Init, Learner, Layer, Network, Sequential, Tensor};
use crate::repnet::Phi;
use crate::error::{Error, Result};

/// Midpoint of the step and goal rewards; r̂ above it is read as "goal".
pub const GOAL_THRESHOLD: f64 = 0.495;

#[derive(Debug, Clone, PartialEq)]
pub struct Omega(pub Vec<f64>);

pub fn predict_reward(phi: &Phi, omega: &Omega) -> f64 {
    dot(&phi.0, &omega.0)
}

/// One reward-regression sample: φ(s′) (constant), the goal state and the observed reward.
#[derive(Debug, Clone)]
pub struct RewardSample {
    pub phi_next: Phi,
    pub goal: usize,
    pub reward: f64,
}

#[derive(Debug, Clone)]
pub struct OmegaNet {
    pub net: Sequential,
    input_shape: Vec<usize>,
}

impl Network for OmegaNet {
    fn modules(&self) -> Vec<&Sequential> {
        vec![&self.net]
    }

    fn modules_mut(&mut self) -> Vec<&mut Sequential> {
        vec![&mut self.net]
    }
}

impl OmegaNet {
    /// Separate small conv net on the goal image; in tabular mode a linear map
    /// of the goal one-hot.
    pub fn new(d: usize, conv: &ConvSpec, features: &Featurizer, init: &mut Init) -> Result<Self> {
        let input_shape = features.input_shape();
        let net = match features.mode() {
            InputMode::Pixels => {
                let s = [input_shape[0], input_shape[1], input_shape[2]];
                nn::conv_encoder("omega/enc", s, conv, d, init)?
            }
            InputMode::Tabular => Sequential::new(vec![Layer::dense("omega/fc", input_shape[0], d, init)]),
        };
        Ok(Self { net, input_shape })
    }

    pub fn omega(&self, goal_input: &Tensor) -> Result<Omega> {
        if goal_input.shape() != self.input_shape.as_slice() {
            return Err(Error::Shape {
                layer: "omega/input".into(),
                expected: self.input_shape.clone(),
                got: goal_input.shape().to_vec(),
            });
        }
        Ok(Omega(self.net.infer(goal_input)?.into_vec()))
    }

    /// Mean squared reward error over the batch and its gradient w.r.t. θ_ω.
    /// Samples sharing a goal share one forward/backward pass.
    pub fn reward_grads(&mut self, batch: &[RewardSample], features: &Featurizer) -> Result<(f64, Grads)> {
        if batch.is_empty() {
            return Err(Error::Config("reward batch is empty".into()));
        }
        let b = batch.len() as f64;
        let mut by_goal: BTreeMap<usize, Vec<&RewardSample>> = BTreeMap::new();
        for s in batch {
            by_goal.entry(s.goal).or_default().push(s);
        }
        self.zero_grads();
        let mut loss = 0.0;
        for (goal, samples) in by_goal {
            let input = features.goal_input(goal);
            let (omega, mut tape) = self.net.forward(&input)?;
            let mut g = vec![0.0; omega.len()];
            for s in samples {
                if s.phi_next.0.len() != omega.len() {
                    return Err(Error::Shape {
                        layer: "omega/phi".into(),
                        expected: vec![omega.len()],
                        got: vec![s.phi_next.0.len()],
                    });
                }
                let err = s.reward - dot(&s.phi_next.0, omega.data());
                loss += err * err / b;
                for (gi, p) in g.iter_mut().zip(&s.phi_next.0) {
                    *gi -= 2.0 * err * p / b;
                }
            }
            self.net.backward_params(&mut tape, &Tensor::vector(g))?;
        }
        let grads = self.grads();
        self.zero_grads();
        Ok((loss, grads))
    }

    /// Left-multiply the output layer by `t` (d×d), so every ω(g) becomes `t`·ω(g).
    pub fn transform_output(&mut self, t: &DMatrix<f64>) -> Result<()> {
        let layer = self.net.layers.last_mut().expect("omega net has an output layer");
        let d = layer.params[1].len();
        if t.shape() != (d, d) {
            return Err(Error::Shape {
                layer: "omega/transform".into(),
                expected: vec![d, d],
                got: vec![t.nrows(), t.ncols()],
            });
        }
        let inputs = layer.params[0].len() / d;
        let w = DMatrix::from_row_slice(d, inputs, layer.params[0].data());
        let b = DVector::from_column_slice(layer.params[1].data());
        let (w, b) = (t * w, t * b);
        for (i, row) in w.row_iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                layer.params[0].data_mut()[i * inputs + j] = *v;
            }
        }
        layer.params[1].data_mut().copy_from_slice(b.as_slice());
        Ok(())
    }

    pub fn reward_train_step(&mut self, batch: &[RewardSample], features: &Featurizer, learner: &mut Learner) -> Result<f64> {
        let (loss, mut grads) = self.reward_grads(batch, features)?;
        learner.step(self, &mut grads)?;
        Ok(loss)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn output_transform_scales_omega() {
        let grid = crate::env::GridSpec::parse(crate::env::SMALL_MAP, 8, 8, 2).unwrap();
        let frames = std::sync::Arc::new(crate::env::Renderer::new(&grid).cache());
        let f = Featurizer::new(InputMode::Pixels, &grid, frames);
        let conv = ConvSpec { channels: [2, 2], kernels: [3, 3], strides: [1, 1] };
        let mut rng = crate::rng::substream(1, "t");
        let mut net = OmegaNet::new(3, &conv, &f, &mut Init::Uniform(&mut rng)).unwrap();
        let g = f.goal_input(5);
        let before = DVector::from_vec(net.omega(&g).unwrap().0);
        let t = DMatrix::from_row_slice(3, 3, &[2.0, 0.0, 1.0, 0.0, -1.0, 0.0, 0.5, 0.0, 4.0]);
        net.transform_output(&t).unwrap();
        let after = DVector::from_vec(net.omega(&g).unwrap().0);
        assert!((after - &t * before).amax() < 1e-12);
        assert!(net.transform_output(&DMatrix::identity(2, 2)).is_err());
    }
    use crate::env::{GridSpec, Renderer, SMALL_MAP};
    use crate::nn::gradcheck::check_network;
    use crate::rng::substream;
    use proptest::prelude::*;
    use rand::Rng as _;
    use std::sync::Arc;

    fn tiny(mode: InputMode) -> Featurizer {
        let grid = GridSpec::parse(SMALL_MAP, 8, 8, 2).unwrap();
        let frames = Arc::new(Renderer::new(&grid).cache());
        Featurizer::new(mode, &grid, frames)
    }

    const CONV: ConvSpec = ConvSpec {
        channels: [3, 4],
        kernels: [3, 3],
        strides: [1, 2],
    };

    #[test]
    fn one_hot_dot_product() {
        let phi = Phi(vec![0.0, 0.0, 1.0]);
        assert_eq!(predict_reward(&phi, &Omega(vec![0.3, -2.0, 1.0])), 1.0);
        assert_eq!(predict_reward(&Phi(vec![0.2, 7.0, -1.0]), &Omega(vec![0.0; 3])), 0.0);
    }

    #[test]
    fn zero_net_gives_zero_omega_and_is_deterministic() {
        let f = tiny(InputMode::Pixels);
        let zero = OmegaNet::new(4, &CONV, &f, &mut Init::Zeros).unwrap();
        assert_eq!(zero.omega(&f.goal_input(5)).unwrap().0, vec![0.0; 4]);
        let mut rng = substream(0, "omega");
        let net = OmegaNet::new(4, &CONV, &f, &mut Init::Uniform(&mut rng)).unwrap();
        assert_eq!(net.omega(&f.goal_input(5)).unwrap(), net.omega(&f.goal_input(5)).unwrap());
        assert!(net.omega(&Tensor::zeros(&[3, 8, 8])).is_err());
        assert!(net.params().iter().all(|(k, _)| k.starts_with("omega/")));
    }

    #[test]
    fn exact_prediction_has_zero_loss_and_gradient() {
        let f = tiny(InputMode::Tabular);
        let mut rng = substream(1, "omega");
        let mut net = OmegaNet::new(36, &CONV, &f, &mut Init::Uniform(&mut rng)).unwrap();
        let phi = Phi((0..36).map(|i| (i as f64 * 0.1).sin()).collect());
        let r = predict_reward(&phi, &net.omega(&f.goal_input(3)).unwrap());
        let (loss, grads) = net
            .reward_grads(&[RewardSample { phi_next: phi, goal: 3, reward: r }], &f)
            .unwrap();
        assert_eq!(loss, 0.0);
        assert!(grads.values().all(|g| g.max_abs() == 0.0));
    }

    #[test]
    fn reward_gradient_matches_finite_differences() {
        let f = tiny(InputMode::Pixels);
        let mut rng = substream(2, "omega-gc");
        let mut net = OmegaNet::new(4, &CONV, &f, &mut Init::Uniform(&mut rng)).unwrap();
        let batch: Vec<_> = (0..5)
            .map(|i| RewardSample {
                phi_next: Phi((0..4).map(|_| rng.gen_range(-1.0..1.0)).collect()),
                goal: [3, 3, 17, 30, 17][i],
                reward: if i == 2 { 1.0 } else { -0.01 },
            })
            .collect();
        let (_, grads) = net.reward_grads(&batch, &f).unwrap();
        let report = check_network(&net, &grads, |n| {
            let mut l = 0.0;
            for s in &batch {
                let e = s.reward - predict_reward(&s.phi_next, &n.omega(&f.goal_input(s.goal))?);
                l += e * e / batch.len() as f64;
            }
            Ok(l)
        })
        .unwrap();
        assert!(report.passes(1e-4), "{:?}", report.worst());
    }

    proptest! {
        #[test]
        fn prediction_is_bilinear(
            phi in proptest::collection::vec(-4.0f64..4.0, 6),
            om in proptest::collection::vec(-4.0f64..4.0, 6),
            k in -6i32..6,
            neg in any::<bool>(),
        ) {
            // power-of-two scales are exact in floating point
            let c = if neg { -(2f64.powi(k)) } else { 2f64.powi(k) };
            let scaled = Phi(phi.iter().map(|v| v * c).collect());
            let base = predict_reward(&Phi(phi.clone()), &Omega(om.clone()));
            prop_assert_eq!(predict_reward(&scaled, &Omega(om)), c * base);
        }
    }
}
