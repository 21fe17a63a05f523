//! Network inputs: rendered frame stacks, or one-hot state vectors in tabular mode.

use std::sync::Arc;

use crate::env::{FrameCache, GridSpec, PoseStack};
use crate::nn::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InputMode {
    Pixels,
    /// One-hot over enumerated states; used to connect the learners to exact oracles.
    Tabular,
}

#[derive(Debug, Clone)]
pub struct Featurizer {
    mode: InputMode,
    frames: Arc<FrameCache>,
    shape: [usize; 3],
    num_states: usize,
}

impl Featurizer {
    pub fn new(mode: InputMode, grid: &GridSpec, frames: Arc<FrameCache>) -> Self {
        Self {
            mode,
            frames,
            shape: grid.obs_shape(),
            num_states: grid.num_states(),
        }
    }

    pub fn mode(&self) -> InputMode {
        self.mode
    }

    pub fn frame_stack(&self) -> usize {
        self.shape[0]
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn input_shape(&self) -> Vec<usize> {
        match self.mode {
            InputMode::Pixels => self.shape.to_vec(),
            InputMode::Tabular => vec![self.num_states],
        }
    }

    pub fn one_hot(&self, state: usize) -> Tensor {
        let mut v = vec![0.0; self.num_states];
        v[state] = 1.0;
        Tensor::vector(v)
    }

    pub fn input(&self, stack: &PoseStack) -> Tensor {
        match self.mode {
            InputMode::Pixels => self.frames.observation(stack).frames,
            InputMode::Tabular => self.one_hot(stack.current()),
        }
    }

    /// Goal input: the goal render replicated over the stack, or its one-hot.
    pub fn goal_input(&self, goal_state: usize) -> Tensor {
        self.input(&PoseStack::replicated(goal_state, self.shape[0]))
    }
}
