//! Closed-loop rollouts in the simulator.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::scene::dataset::episode_seed;
use crate::scene::{
    check_success, render_with, sample_task, scripted_expert, Action, Instruction, Relation, RenderOptions, SceneState, A_MAX,
};

use super::model::Model;

/// Anything that maps a scene to an action.
pub trait Controller {
    /// Called before each rollout with its task seed.
    fn reset(&mut self, _task_seed: u64) {}
    fn act(&mut self, state: &SceneState, ins: &Instruction) -> Result<Action>;
}

pub struct ExpertController;

impl Controller for ExpertController {
    fn act(&mut self, state: &SceneState, ins: &Instruction) -> Result<Action> {
        scripted_expert(state, ins)
    }
}

/// Uniform actions within the clip bounds, seeded per rollout.
pub struct RandomController {
    rng: ChaCha8Rng,
}

impl RandomController {
    pub fn new() -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(0),
        }
    }
}

impl Default for RandomController {
    fn default() -> Self {
        Self::new()
    }
}

impl Controller for RandomController {
    fn reset(&mut self, task_seed: u64) {
        self.rng = ChaCha8Rng::seed_from_u64(task_seed ^ 0x5EED);
    }

    fn act(&mut self, _: &SceneState, _: &Instruction) -> Result<Action> {
        let mut d = || self.rng.gen_range(-A_MAX..=A_MAX);
        let dpos = [d(), d(), d()];
        Ok(Action {
            dpos,
            drot: [0.0; 3],
            grip: if self.rng.gen_bool(0.5) { 1.0 } else { 0.0 },
        })
    }
}

/// Renders the scene and runs the model's full perception and policy stack.
pub struct ModelController<'a> {
    pub model: &'a Model,
    pub render: RenderOptions,
}

impl<'a> ModelController<'a> {
    pub fn new(model: &'a Model) -> Self {
        let g = model.geometry();
        Self {
            model,
            render: RenderOptions {
                size: g.height(),
                patch_size: g.patch_size,
                draw_gripper: true,
            },
        }
    }
}

impl Controller for ModelController<'_> {
    fn act(&mut self, state: &SceneState, ins: &Instruction) -> Result<Action> {
        let r = render_with(state, &self.render)?;
        let (masks, kp) = self.model.perceive(&r.image, &r.masks, r.keypoint)?;
        self.model.act(ins, &r.image, &masks, &kp)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SeedResult {
    pub seed: u64,
    pub successes: usize,
    pub rollouts: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalResult {
    pub per_seed: Vec<SeedResult>,
    /// `(successes, rollouts)` in `Relation::ALL` order.
    pub by_relation: [(usize, usize); 3],
    pub successes: usize,
    pub rollouts: usize,
}

impl EvalResult {
    pub fn success_rate(&self) -> f64 {
        if self.rollouts == 0 {
            0.0
        } else {
            self.successes as f64 / self.rollouts as f64
        }
    }

    /// Binomial standard error of the aggregate rate.
    pub fn stderr(&self) -> f64 {
        if self.rollouts == 0 {
            return 0.0;
        }
        let p = self.success_rate();
        (p * (1.0 - p) / self.rollouts as f64).sqrt()
    }

    pub fn relation_rate(&self, r: Relation) -> f64 {
        let i = Relation::ALL.iter().position(|&x| x == r).unwrap();
        let (s, n) = self.by_relation[i];
        if n == 0 {
            0.0
        } else {
            s as f64 / n as f64
        }
    }
}

/// Task seed of rollout `i` under evaluation seed `seed`.
pub fn rollout_task_seed(seed: u64, i: usize) -> u64 {
    episode_seed(seed, i as u64)
}

/// One rollout; `true` when the task succeeded within `max_steps`.
pub fn rollout(controller: &mut dyn Controller, task_seed: u64, max_steps: usize) -> Result<(bool, Relation)> {
    let (mut state, ins) = sample_task(task_seed);
    controller.reset(task_seed);
    for _ in 0..max_steps {
        let a = controller.act(&state, &ins)?;
        state.step(&a);
        if check_success(&state, &ins) {
            return Ok((true, ins.relation));
        }
    }
    Ok((false, ins.relation))
}

pub fn evaluate(controller: &mut dyn Controller, rollouts: usize, seeds: &[u64], max_steps: usize) -> Result<EvalResult> {
    let mut per_seed = Vec::with_capacity(seeds.len());
    let mut by_relation = [(0, 0); 3];
    for &seed in seeds {
        let mut successes = 0;
        for i in 0..rollouts {
            let (ok, rel) = rollout(controller, rollout_task_seed(seed, i), max_steps)?;
            let r = Relation::ALL.iter().position(|&x| x == rel).unwrap();
            by_relation[r].1 += 1;
            if ok {
                successes += 1;
                by_relation[r].0 += 1;
            }
        }
        per_seed.push(SeedResult {
            seed,
            successes,
            rollouts,
        });
    }
    let successes = per_seed.iter().map(|s| s.successes).sum();
    Ok(EvalResult {
        per_seed,
        by_relation,
        successes,
        rollouts: rollouts * seeds.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::dataset::EXPERT_MAX_STEPS;

    #[test]
    fn expert_calibration() {
        let r = evaluate(&mut ExpertController, 100, &[11, 12], EXPERT_MAX_STEPS).unwrap();
        assert!(r.success_rate() >= 0.98, "{r:?}");
        assert_eq!(r.by_relation.iter().map(|x| x.1).sum::<usize>(), 200);
    }

    #[test]
    fn random_floor_and_determinism() {
        let a = evaluate(&mut RandomController::new(), 100, &[5], EXPERT_MAX_STEPS).unwrap();
        let b = evaluate(&mut RandomController::new(), 100, &[5], EXPERT_MAX_STEPS).unwrap();
        assert!(a.success_rate() <= 0.05, "{a:?}");
        assert_eq!(a, b);
        assert!(a.stderr() >= 0.0);
    }
}
