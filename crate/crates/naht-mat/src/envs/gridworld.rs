//! Task B — the typed-goal gridworld.
//!
//! Goal cells are placed per episode by seed. An uncontrolled teammate of
//! family τ walks greedily to goal τ mod G; controlled agents must infer
//! its destination from movement history and cover the remaining goals.
//! Observations are egocentric with a limited field of view, so other
//! agents are only visible within a Chebyshev radius.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::envs::{
    time_feature, validate_joint_action, Env, EnvError, EnvSpec, EpisodeContext, Observation,
    StepResult,
};
use crate::teammates::TaskLayout;

pub const NUM_MOVES: usize = 5;
pub const MOVE_UP: usize = 0;
pub const MOVE_DOWN: usize = 1;
pub const MOVE_LEFT: usize = 2;
pub const MOVE_RIGHT: usize = 3;
pub const MOVE_STAY: usize = 4;

pub const STEP_PENALTY: f64 = -0.01;

/// (row, col) cell. `x` in observations is the column, `y` the row.
pub type Cell = (i64, i64);

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GridConfig {
    pub num_agents: usize,
    pub width: usize,
    pub height: usize,
    pub num_goals: usize,
    pub horizon: usize,
    pub gamma: f64,
    pub fov_radius: i64,
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig {
            num_agents: 3,
            width: 5,
            height: 5,
            num_goals: 3,
            horizon: 12,
            gamma: 0.99,
            fov_radius: 2,
        }
    }
}

impl GridConfig {
    pub fn obs_dim(&self) -> usize {
        2 + (self.num_agents - 1) * (2 + NUM_MOVES) + self.num_goals * 2 + 1
    }

    pub fn spec(&self) -> EnvSpec {
        EnvSpec {
            num_agents: self.num_agents,
            obs_dim: self.obs_dim(),
            num_actions: NUM_MOVES,
            horizon: self.horizon,
            gamma: self.gamma,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Gridworld {
    cfg: GridConfig,
    spec: EnvSpec,
    t: usize,
    done: bool,
    positions: Vec<Cell>,
    goals: Vec<Cell>,
    last_actions: Vec<Option<usize>>,
}

/// Seeded placement: goals first (distinct cells), then agents (distinct
/// from each other, goals allowed). Each draw is `gen_range(rows)` then
/// `gen_range(cols)` with rejection on collision, so the routine can be
/// re-walked independently.
pub fn seeded_placement(
    rng: &mut ChaCha8Rng,
    height: usize,
    width: usize,
    num_goals: usize,
    num_agents: usize,
) -> (Vec<Cell>, Vec<Cell>) {
    let mut goals: Vec<Cell> = Vec::with_capacity(num_goals);
    while goals.len() < num_goals {
        let cell = (
            rng.gen_range(0..height) as i64,
            rng.gen_range(0..width) as i64,
        );
        if !goals.contains(&cell) {
            goals.push(cell);
        }
    }
    let mut agents: Vec<Cell> = Vec::with_capacity(num_agents);
    while agents.len() < num_agents {
        let cell = (
            rng.gen_range(0..height) as i64,
            rng.gen_range(0..width) as i64,
        );
        if !agents.contains(&cell) {
            agents.push(cell);
        }
    }
    (goals, agents)
}

pub fn apply_move(pos: Cell, action: usize, height: usize, width: usize) -> Cell {
    let (row, col) = pos;
    let (nr, nc) = match action {
        MOVE_UP => (row - 1, col),
        MOVE_DOWN => (row + 1, col),
        MOVE_LEFT => (row, col - 1),
        MOVE_RIGHT => (row, col + 1),
        _ => (row, col),
    };
    (nr.clamp(0, height as i64 - 1), nc.clamp(0, width as i64 - 1))
}

impl Gridworld {
    pub fn new(cfg: GridConfig) -> Result<Self, EnvError> {
        let spec = cfg.spec();
        spec.validate()?;
        if cfg.num_goals < 1 || cfg.num_goals > cfg.width * cfg.height {
            return Err(EnvError::BadConfig("bad goal count".into()));
        }
        if cfg.num_goals > cfg.num_agents {
            return Err(EnvError::BadConfig(
                "goals must not outnumber agents, the task would be unwinnable".into(),
            ));
        }
        if cfg.num_agents > cfg.width * cfg.height {
            return Err(EnvError::BadConfig("more agents than cells".into()));
        }
        let m = cfg.num_agents;
        Ok(Gridworld {
            cfg,
            spec,
            t: 0,
            done: true,
            positions: Vec::new(),
            goals: Vec::new(),
            last_actions: vec![None; m],
        })
    }

    pub fn config(&self) -> &GridConfig {
        &self.cfg
    }

    pub fn layout(&self) -> TaskLayout {
        TaskLayout::Grid {
            num_agents: self.cfg.num_agents,
            width: self.cfg.width,
            height: self.cfg.height,
            num_goals: self.cfg.num_goals,
        }
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    pub fn time(&self) -> usize {
        self.t
    }

    pub fn positions(&self) -> &[Cell] {
        &self.positions
    }

    pub fn goals(&self) -> &[Cell] {
        &self.goals
    }

    fn covered(&self) -> bool {
        self.goals
            .iter()
            .all(|goal| self.positions.contains(goal))
    }

    fn observe(&self, slot: usize) -> Observation {
        let w = self.cfg.width as f64;
        let h = self.cfg.height as f64;
        let fov = self.cfg.fov_radius;
        let (row, col) = self.positions[slot];
        let mut v = Vec::with_capacity(self.spec.obs_dim);
        v.push(col as f64 / w);
        v.push(row as f64 / h);
        for j in 0..self.cfg.num_agents {
            if j == slot {
                continue;
            }
            let (orow, ocol) = self.positions[j];
            let (dr, dc) = (orow - row, ocol - col);
            let visible = dr.abs() <= fov && dc.abs() <= fov;
            if visible {
                v.push(dc as f64 / w);
                v.push(dr as f64 / h);
            } else {
                v.push(0.0);
                v.push(0.0);
            }
            let mut onehot = [0.0; NUM_MOVES];
            if visible {
                if let Some(a) = self.last_actions[j] {
                    onehot[a] = 1.0;
                }
            }
            v.extend_from_slice(&onehot);
        }
        for &(grow, gcol) in &self.goals {
            v.push((gcol - col) as f64 / w);
            v.push((grow - row) as f64 / h);
        }
        v.push(time_feature(self.t, self.cfg.horizon));
        Observation(v)
    }

    pub fn observations(&self) -> Vec<Observation> {
        (0..self.cfg.num_agents).map(|i| self.observe(i)).collect()
    }

    pub fn state_key(&self) -> Vec<u64> {
        let mut key = vec![self.t as u64, self.done as u64];
        for &(r, c) in &self.positions {
            key.push(r as u64);
            key.push(c as u64);
        }
        for la in &self.last_actions {
            key.push(la.map_or(u64::MAX, |a| a as u64));
        }
        key
    }

    pub fn max_remaining_return(&self) -> f64 {
        if self.done {
            0.0
        } else {
            1.0
        }
    }
}

impl Env for Gridworld {
    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn reset(&mut self, ctx: &EpisodeContext) -> Vec<Observation> {
        let mut rng = ChaCha8Rng::seed_from_u64(ctx.seed);
        let (goals, agents) = seeded_placement(
            &mut rng,
            self.cfg.height,
            self.cfg.width,
            self.cfg.num_goals,
            self.cfg.num_agents,
        );
        self.goals = goals;
        self.positions = agents;
        self.t = 0;
        self.done = false;
        self.last_actions = vec![None; self.cfg.num_agents];
        self.observations()
    }

    fn step(&mut self, joint_action: &[usize]) -> Result<StepResult, EnvError> {
        validate_joint_action(joint_action, self.cfg.num_agents, NUM_MOVES, self.done)?;
        for (slot, &action) in joint_action.iter().enumerate() {
            self.positions[slot] =
                apply_move(self.positions[slot], action, self.cfg.height, self.cfg.width);
        }
        self.last_actions = joint_action.iter().map(|&a| Some(a)).collect();
        self.t += 1;

        let reward;
        if self.covered() {
            reward = 1.0;
            self.done = true;
        } else {
            reward = STEP_PENALTY;
            if self.t >= self.cfg.horizon {
                self.done = true;
            }
        }

        Ok(StepResult {
            observations: self.observations(),
            reward,
            done: self.done,
            state: self.state_snapshot(),
        })
    }

    fn state_snapshot(&self) -> serde_json::Value {
        serde_json::json!({
            "t": self.t,
            "positions": self.positions,
            "goals": self.goals,
            "last_actions": self.last_actions,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ctx(seed: u64) -> EpisodeContext {
        EpisodeContext {
            seed,
            controlled_slots: vec![0],
            teammate_family: 0,
        }
    }

    #[test]
    fn reset_matches_reference_placement_walk() {
        let cfg = GridConfig::default();
        let mut env = Gridworld::new(cfg.clone()).unwrap();
        env.reset(&ctx(12345));

        // Independent re-walk of the documented placement routine.
        let mut rng = ChaCha8Rng::seed_from_u64(12345);
        let mut goals: Vec<Cell> = Vec::new();
        while goals.len() < cfg.num_goals {
            let cell = (
                rng.gen_range(0..cfg.height) as i64,
                rng.gen_range(0..cfg.width) as i64,
            );
            if !goals.contains(&cell) {
                goals.push(cell);
            }
        }
        let mut agents: Vec<Cell> = Vec::new();
        while agents.len() < cfg.num_agents {
            let cell = (
                rng.gen_range(0..cfg.height) as i64,
                rng.gen_range(0..cfg.width) as i64,
            );
            if !agents.contains(&cell) {
                agents.push(cell);
            }
        }
        assert_eq!(env.goals(), goals.as_slice());
        assert_eq!(env.positions(), agents.as_slice());
    }

    #[test]
    fn covering_all_goals_terminates_with_reward() {
        let mut env = Gridworld::new(GridConfig::default()).unwrap();
        env.reset(&ctx(7));
        // Drive agents onto the goals with a scripted greedy walk; the
        // reward must be +1 on the step where the last goal is covered.
        let goals = env.goals().to_vec();
        let mut total = 0.0;
        for _ in 0..env.config().horizon {
            let joint: Vec<usize> = (0..3)
                .map(|i| {
                    let (row, col) = env.positions()[i];
                    let (gr, gc) = goals[i];
                    if row > gr {
                        MOVE_UP
                    } else if row < gr {
                        MOVE_DOWN
                    } else if col > gc {
                        MOVE_LEFT
                    } else if col < gc {
                        MOVE_RIGHT
                    } else {
                        MOVE_STAY
                    }
                })
                .collect();
            let r = env.step(&joint).unwrap();
            total += r.reward;
            if r.done {
                assert_eq!(r.reward, 1.0);
                break;
            }
        }
        assert!(env.is_done());
        assert!(total > 0.8, "return {total}");
    }

    #[test]
    fn return_bounds_hold_under_random_play() {
        use rand::Rng;
        let mut rng = crate::rng::derive_rng(3, "grid-bounds", 0);
        for ep in 0..100 {
            let mut env = Gridworld::new(GridConfig::default()).unwrap();
            env.reset(&ctx(ep));
            let mut total = 0.0;
            loop {
                let joint: Vec<usize> = (0..3).map(|_| rng.gen_range(0..NUM_MOVES)).collect();
                let r = env.step(&joint).unwrap();
                total += r.reward;
                if r.done {
                    break;
                }
            }
            assert!((-0.12..=1.0).contains(&total), "return {total}");
        }
    }

    #[test]
    fn fov_hides_far_agents_and_their_actions() {
        let mut env = Gridworld::new(GridConfig::default()).unwrap();
        // Keep resetting until agent 1 is outside agent 0's field of view.
        let mut seed = 0;
        loop {
            env.reset(&ctx(seed));
            let (r0, c0) = env.positions()[0];
            let (r1, c1) = env.positions()[1];
            if (r0 - r1).abs() > 2 || (c0 - c1).abs() > 2 {
                break;
            }
            seed += 1;
        }
        let r = env.step(&[MOVE_STAY, MOVE_STAY, MOVE_STAY]).unwrap();
        let obs = &r.observations[0];
        // Agent 1 occupies the first other-agent block: relative position
        // and previous-action one-hot must be zeroed when invisible.
        let (r0, c0) = env.positions()[0];
        let (r1, c1) = env.positions()[1];
        if (r0 - r1).abs() > 2 || (c0 - c1).abs() > 2 {
            for i in 2..2 + 2 + NUM_MOVES {
                assert_eq!(obs.as_slice()[i], 0.0);
            }
        }
    }

    #[test]
    fn previous_action_visible_within_fov() {
        let mut env = Gridworld::new(GridConfig::default()).unwrap();
        let mut seed = 0;
        loop {
            env.reset(&ctx(seed));
            let (r0, c0) = env.positions()[0];
            let (r1, c1) = env.positions()[1];
            if (r0 - r1).abs() <= 1 && (c0 - c1).abs() <= 1 {
                break;
            }
            seed += 1;
        }
        let r = env.step(&[MOVE_STAY, MOVE_STAY, MOVE_STAY]).unwrap();
        let (r0, c0) = env.positions()[0];
        let (r1, c1) = env.positions()[1];
        if (r0 - r1).abs() <= 2 && (c0 - c1).abs() <= 2 {
            let obs = &r.observations[0];
            assert_eq!(obs.as_slice()[2 + 2 + MOVE_STAY], 1.0);
        }
    }
}
