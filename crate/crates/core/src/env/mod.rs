//! Deterministic goal-conditioned gridworld.
//!
//! The agent occupies a free cell and faces one of four headings. Forward and
//! backward moves translate by one cell (blocked moves leave the pose as is),
//! turns rotate by 90°. Observations are stacks of first-person raycast frames.

mod map;
mod render;

use std::collections::VecDeque;
use std::sync::Arc;

use rand::Rng as _;

pub use map::{CellMap, DEFAULT_MAP, SMALL_MAP};
pub use render::{FrameCache, Renderer};

use crate::error::{Error, Result};
use crate::nn::Tensor;
use crate::rng::Rng;

pub const GOAL_REWARD: f64 = 1.0;
pub const STEP_REWARD: f64 = -0.01;
pub const DEFAULT_STEP_CAP: usize = 500;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Heading {
    N,
    E,
    S,
    W,
}

impl Heading {
    pub const ALL: [Heading; 4] = [Heading::N, Heading::E, Heading::S, Heading::W];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    /// Unit step in cell coordinates; N decreases y, E increases x.
    pub fn delta(self) -> (i64, i64) {
        match self {
            Heading::N => (0, -1),
            Heading::E => (1, 0),
            Heading::S => (0, 1),
            Heading::W => (-1, 0),
        }
    }

    pub fn left(self) -> Self {
        Self::ALL[(self.index() + 3) % 4]
    }

    pub fn right(self) -> Self {
        Self::ALL[(self.index() + 1) % 4]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Action {
    Forward,
    Backward,
    TurnLeft,
    TurnRight,
}

impl Action {
    pub const ALL: [Action; 4] = [
        Action::Forward,
        Action::Backward,
        Action::TurnLeft,
        Action::TurnRight,
    ];
    pub const COUNT: usize = 4;

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Pose {
    pub x: usize,
    pub y: usize,
    pub heading: Heading,
}

impl Pose {
    pub fn new(x: usize, y: usize, heading: Heading) -> Self {
        Self { x, y, heading }
    }
}

/// Map layout plus rendering and stacking parameters.
#[derive(Debug, Clone)]
pub struct GridSpec {
    pub width: usize,
    pub height: usize,
    pub walls: Vec<bool>,
    pub render_height: usize,
    pub render_width: usize,
    pub frame_stack: usize,
    states: Vec<Pose>,
    index: Vec<Option<usize>>,
}

impl GridSpec {
    pub fn new(map: CellMap, render_height: usize, render_width: usize, frame_stack: usize) -> Result<Self> {
        map.validate()?;
        if frame_stack < 1 {
            return Err(Error::Config("frame_stack must be at least 1".into()));
        }
        if render_height < 8 || render_width < 8 {
            return Err(Error::Config(format!(
                "render size {render_height}x{render_width} is below the 8x8 minimum"
            )));
        }
        let CellMap { width, height, walls } = map;
        let mut states = Vec::new();
        let mut index = vec![None; width * height * 4];
        for y in 0..height {
            for x in 0..width {
                if walls[y * width + x] {
                    continue;
                }
                for h in Heading::ALL {
                    index[(y * width + x) * 4 + h.index()] = Some(states.len());
                    states.push(Pose::new(x, y, h));
                }
            }
        }
        Ok(Self {
            width,
            height,
            walls,
            render_height,
            render_width,
            frame_stack,
            states,
            index,
        })
    }

    pub fn parse(map_text: &str, render_height: usize, render_width: usize, frame_stack: usize) -> Result<Self> {
        Self::new(CellMap::parse(map_text)?, render_height, render_width, frame_stack)
    }

    pub fn is_wall(&self, x: i64, y: i64) -> bool {
        if x < 0 || y < 0 || x as usize >= self.width || y as usize >= self.height {
            return true;
        }
        self.walls[y as usize * self.width + x as usize]
    }

    pub fn is_free(&self, x: usize, y: usize) -> bool {
        !self.is_wall(x as i64, y as i64)
    }

    pub fn num_states(&self) -> usize {
        self.states.len()
    }

    pub fn free_cells(&self) -> usize {
        self.states.len() / 4
    }

    /// Stable index of a pose in [`enumerate_states`] order.
    pub fn state_index(&self, pose: Pose) -> Option<usize> {
        if pose.x >= self.width || pose.y >= self.height {
            return None;
        }
        self.index[(pose.y * self.width + pose.x) * 4 + pose.heading.index()]
    }

    pub fn state(&self, index: usize) -> Pose {
        self.states[index]
    }

    pub fn states(&self) -> &[Pose] {
        &self.states
    }

    pub fn obs_shape(&self) -> [usize; 3] {
        [self.frame_stack, self.render_height, self.render_width]
    }

    pub fn cell_map(&self) -> CellMap {
        CellMap {
            width: self.width,
            height: self.height,
            walls: self.walls.clone(),
        }
    }
}

/// All free-cell × heading poses in row-major cell order, headings N, E, S, W.
pub fn enumerate_states(grid: &GridSpec) -> Vec<Pose> {
    grid.states.clone()
}

/// Deterministic transition. Blocked moves are absorbed.
pub fn step(grid: &GridSpec, pose: Pose, action: Action) -> Pose {
    let (dx, dy) = pose.heading.delta();
    let sign = match action {
        Action::TurnLeft => return Pose { heading: pose.heading.left(), ..pose },
        Action::TurnRight => return Pose { heading: pose.heading.right(), ..pose },
        Action::Forward => 1,
        Action::Backward => -1,
    };
    let nx = pose.x as i64 + sign * dx;
    let ny = pose.y as i64 + sign * dy;
    if grid.is_wall(nx, ny) {
        pose
    } else {
        Pose { x: nx as usize, y: ny as usize, ..pose }
    }
}

/// How an episode step ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EpisodeEnd {
    Running,
    Goal,
    Cap,
}

impl EpisodeEnd {
    pub fn terminal(self) -> bool {
        self != EpisodeEnd::Running
    }
}

/// One environment step under the goal reward: +1 on entering the goal pose,
/// −0.01 otherwise; the step that reaches `cap` is terminal too.
pub fn env_step(
    grid: &GridSpec,
    state: Pose,
    action: Action,
    goal: Pose,
    steps_so_far: usize,
    cap: usize,
) -> Result<(Pose, f64, EpisodeEnd)> {
    if steps_so_far >= cap {
        return Err(Error::EpisodeFinished);
    }
    let next = step(grid, state, action);
    if next == goal {
        Ok((next, GOAL_REWARD, EpisodeEnd::Goal))
    } else if steps_so_far + 1 == cap {
        Ok((next, STEP_REWARD, EpisodeEnd::Cap))
    } else {
        Ok((next, STEP_REWARD, EpisodeEnd::Running))
    }
}

/// Stacked frames, shape `[K, H, W]`, most recent frame last.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub frames: Tensor,
}

/// Compact observation: the state indices of the K stacked frames, oldest first.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct PoseStack(pub Vec<usize>);

impl PoseStack {
    pub fn replicated(state: usize, k: usize) -> Self {
        Self(vec![state; k])
    }

    /// Index of the most recent pose.
    pub fn current(&self) -> usize {
        *self.0.last().expect("pose stack is never empty")
    }

    pub fn pushed(&self, state: usize) -> Self {
        let mut v = self.0[1..].to_vec();
        v.push(state);
        Self(v)
    }
}

/// A navigation target: a pose and its replicated render.
#[derive(Debug, Clone)]
pub struct Goal {
    pub state: Pose,
    pub index: usize,
    pub image: Observation,
}

impl Goal {
    pub fn new(grid: &GridSpec, frames: &FrameCache, state: Pose) -> Result<Self> {
        let index = grid
            .state_index(state)
            .ok_or_else(|| Error::Config(format!("goal {state:?} is not a free pose")))?;
        let image = frames.observation(&PoseStack::replicated(index, grid.frame_stack));
        Ok(Self { state, index, image })
    }

    pub fn from_index(grid: &GridSpec, frames: &FrameCache, index: usize) -> Result<Self> {
        if index >= grid.num_states() {
            return Err(Error::Config(format!(
                "goal id {index} out of range (map has {} states)",
                grid.num_states()
            )));
        }
        Self::new(grid, frames, grid.state(index))
    }

    pub fn stack(&self, k: usize) -> PoseStack {
        PoseStack::replicated(self.index, k)
    }
}

/// Experience tuple. Observations are kept as pose stacks and re-rendered on demand.
#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub goal: usize,
    pub obs: PoseStack,
    pub action: Action,
    pub reward: f64,
    pub next_obs: PoseStack,
    pub end: EpisodeEnd,
    /// First step after a reset.
    pub episode_start: bool,
}

impl Transition {
    pub fn terminal(&self) -> bool {
        self.end.terminal()
    }
}

/// Result of [`Env::step`].
#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub pose: Pose,
    pub reward: f64,
    pub end: EpisodeEnd,
}

/// Single-threaded episode runner owning its frame stack.
#[derive(Debug, Clone)]
pub struct Env {
    grid: Arc<GridSpec>,
    frames: Arc<FrameCache>,
    goal: Option<Goal>,
    pose: Pose,
    stack: VecDeque<usize>,
    steps: usize,
    cap: usize,
    finished: bool,
}

impl Env {
    pub fn new(grid: Arc<GridSpec>, frames: Arc<FrameCache>, cap: usize) -> Self {
        let pose = grid.state(0);
        Self {
            grid,
            frames,
            goal: None,
            pose,
            stack: VecDeque::new(),
            steps: 0,
            cap,
            finished: true,
        }
    }

    pub fn grid(&self) -> &Arc<GridSpec> {
        &self.grid
    }

    pub fn frames(&self) -> &Arc<FrameCache> {
        &self.frames
    }

    pub fn goal(&self) -> Option<&Goal> {
        self.goal.as_ref()
    }

    pub fn pose(&self) -> Pose {
        self.pose
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn cap(&self) -> usize {
        self.cap
    }

    pub fn finished(&self) -> bool {
        self.finished
    }

    /// Start an episode. With `start == None` the start pose is drawn uniformly
    /// from all poses other than the goal pose.
    pub fn reset(&mut self, start: Option<Pose>, goal: Goal, rng: &mut Rng) -> Result<Observation> {
        let n = self.grid.num_states();
        let start_index = match start {
            Some(p) => {
                let i = self
                    .grid
                    .state_index(p)
                    .ok_or_else(|| Error::Config(format!("start {p:?} is not a free pose")))?;
                if i == goal.index {
                    return Err(Error::Config("start pose equals the goal pose".into()));
                }
                i
            }
            None => {
                if n < 2 {
                    return Err(Error::Config("no free non-goal pose to start from".into()));
                }
                loop {
                    let i = rng.gen_range(0..n);
                    if i != goal.index {
                        break i;
                    }
                }
            }
        };
        self.pose = self.grid.state(start_index);
        self.stack = std::iter::repeat(start_index).take(self.grid.frame_stack).collect();
        self.steps = 0;
        self.finished = false;
        self.goal = Some(goal);
        Ok(self.observation())
    }

    pub fn step(&mut self, action: Action) -> Result<StepOutcome> {
        if self.finished {
            return Err(Error::EpisodeFinished);
        }
        let goal = self.goal.as_ref().ok_or(Error::EpisodeFinished)?.state;
        let (next, reward, end) = env_step(&self.grid, self.pose, action, goal, self.steps, self.cap)?;
        self.pose = next;
        self.steps += 1;
        self.stack.pop_front();
        self.stack.push_back(self.grid.state_index(next).expect("step keeps poses valid"));
        self.finished = end.terminal();
        Ok(StepOutcome { pose: next, reward, end })
    }

    pub fn pose_stack(&self) -> PoseStack {
        PoseStack(self.stack.iter().copied().collect())
    }

    pub fn observation(&self) -> Observation {
        self.frames.observation(&self.pose_stack())
    }
}

/// Shortest action counts to `goal` from every state (`None` if unreachable).
pub fn bfs_distances(grid: &GridSpec, goal: Pose) -> Vec<Option<usize>> {
    let n = grid.num_states();
    // reverse edges: predecessors of each state
    let mut preds: Vec<Vec<usize>> = vec![Vec::new(); n];
    for (i, &p) in grid.states().iter().enumerate() {
        for a in Action::ALL {
            let j = grid.state_index(step(grid, p, a)).unwrap();
            if j != i {
                preds[j].push(i);
            }
        }
    }
    let mut dist = vec![None; n];
    let g = grid.state_index(goal).expect("goal must be a valid pose");
    dist[g] = Some(0);
    let mut queue = VecDeque::from([g]);
    while let Some(j) = queue.pop_front() {
        let d = dist[j].unwrap();
        for &i in &preds[j] {
            if dist[i].is_none() {
                dist[i] = Some(d + 1);
                queue.push_back(i);
            }
        }
    }
    dist
}
