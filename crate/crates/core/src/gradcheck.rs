//! Central finite-difference checks of the learner's analytic gradients on
//! randomly drawn bundles and batches.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::agent::{
    bellman_critic_loss, critic_loss, draw_noise, param_actor_loss, skill_actor_loss, AgentConfig, AgentError,
    PolicyBundle,
};
use crate::net::Mlp;
use crate::replay::Batch;
use crate::sim::{TaskKind, TaskSpec};
use crate::skills::MAX_PARAM_DIM;

pub const STEP: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheck {
    pub loss: &'static str,
    pub instances: usize,
    /// Worst `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖)` over instances.
    pub max_rel_err: f64,
}

impl GradCheck {
    pub fn passed(&self, tol: f64) -> bool {
        self.max_rel_err.is_finite() && self.max_rel_err < tol
    }
}

fn rel_err(a: &[f64], n: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(n).map(|(x, y)| x - y).collect();
    let scale = norm(a).max(norm(n));
    if scale < 1e-12 {
        norm(&diff)
    } else {
        norm(&diff) / scale
    }
}

fn numeric<F>(params: &mut [f64], mut f: F) -> Result<Vec<f64>, AgentError>
where
    F: FnMut(&[f64]) -> Result<f64, AgentError>,
{
    let mut g = vec![0.0; params.len()];
    for i in 0..params.len() {
        let p = params[i];
        params[i] = p + STEP;
        let up = f(params)?;
        params[i] = p - STEP;
        let down = f(params)?;
        params[i] = p;
        g[i] = (up - down) / (2.0 * STEP);
    }
    Ok(g)
}

/// A small random instance: bundle with jittered temperatures and a labelled batch.
pub struct Instance {
    pub bundle: PolicyBundle,
    pub batch: Batch,
}

pub fn random_instance<R: Rng + ?Sized>(kind: TaskKind, rows: usize, rng: &mut R) -> Instance {
    let task = TaskSpec::new(kind);
    let cfg = AgentConfig {
        hidden: vec![8, 8],
        alpha_skill: rng.random_range(0.01..0.5),
        alpha_param: rng.random_range(0.01..0.5),
        ..AgentConfig::default()
    };
    let bundle = PolicyBundle::new(&task, &cfg, rng).expect("catalog tasks build");
    let d = task.obs_dim;
    let k = bundle.num_skills();
    let mut obs_vec = |n: usize| (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>();
    let obs = obs_vec(rows);
    let next_obs = obs_vec(rows);
    let batch = Batch {
        rows,
        obs,
        skill: (0..rows).map(|_| rng.random_range(0..k)).collect(),
        params: (0..rows)
            .map(|_| {
                let mut x = [0.0; MAX_PARAM_DIM];
                x.iter_mut().for_each(|v| *v = rng.random_range(-0.95..0.95));
                x
            })
            .collect(),
        feedback: (0..rows).map(|_| rng.random_range(-1..=1) as f64).collect(),
        affordance: (0..rows).map(|_| if rng.random_bool(0.5) { -0.1 } else { 0.0 }).collect(),
        env_reward: (0..rows).map(|_| if rng.random_bool(0.3) { 1.0 } else { 0.0 }).collect(),
        next_obs,
        done: (0..rows).map(|_| rng.random_bool(0.3)).collect(),
        executed: vec![true; rows],
    };
    Instance { bundle, batch }
}

fn task_for(i: usize) -> TaskKind {
    TaskKind::ALL[i % TaskKind::ALL.len()]
}

fn run<F>(loss: &'static str, instances: usize, seed: u64, mut one: F) -> Result<GradCheck, AgentError>
where
    F: FnMut(TaskKind, &mut ChaCha8Rng) -> Result<f64, AgentError>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for i in 0..instances {
        let e = one(task_for(i), &mut rng)?;
        worst = if e.is_nan() { f64::NAN } else { worst.max(e) };
    }
    Ok(GradCheck {
        loss,
        instances,
        max_rel_err: worst,
    })
}

/// Feedback critic regression, with and without the affordance term.
pub fn check_critic(instances: usize, seed: u64) -> Result<GradCheck, AgentError> {
    run("critic", instances, seed, |kind, rng| {
        let Instance { mut bundle, batch } = random_instance(kind, 6, rng);
        let aff = rng.random_bool(0.5);
        let analytic = critic_loss(&bundle, &batch, aff)?.grad;
        let mut params = bundle.critic.params.clone();
        let n = numeric(&mut params, |p| {
            bundle.critic.params.copy_from_slice(p);
            Ok(critic_loss(&bundle, &batch, aff)?.loss)
        })?;
        Ok(rel_err(&analytic, &n))
    })
}

/// Skill-actor loss with the exact expectation over skills, under frozen parameter noise.
pub fn check_skill_actor(instances: usize, seed: u64) -> Result<GradCheck, AgentError> {
    run("skill_actor", instances, seed, |kind, rng| {
        let Instance { mut bundle, batch } = random_instance(kind, 6, rng);
        let noise: Vec<Vec<[f64; MAX_PARAM_DIM]>> = (0..bundle.num_skills()).map(|_| draw_noise(batch.rows, rng)).collect();
        let analytic = skill_actor_loss(&bundle, &batch.obs, batch.rows, &noise)?.0.grad;
        let mut params = bundle.skill_actor.params.clone();
        let n = numeric(&mut params, |p| {
            bundle.skill_actor.params.copy_from_slice(p);
            Ok(skill_actor_loss(&bundle, &batch.obs, batch.rows, &noise)?.0.loss)
        })?;
        Ok(rel_err(&analytic, &n))
    })
}

/// Reparameterized parameter-actor loss, checked jointly over every skill's actor.
pub fn check_param_actor(instances: usize, seed: u64) -> Result<GradCheck, AgentError> {
    run("param_actor", instances, seed, |kind, rng| {
        let Instance { mut bundle, batch } = random_instance(kind, 8, rng);
        let noise = draw_noise(batch.rows, rng);
        let grads = param_actor_loss(&bundle, &batch.obs, &batch.skill, &noise)?.grads;
        let mut analytic = Vec::new();
        let mut n = Vec::new();
        for a in 0..bundle.num_skills() {
            let Some(g) = &grads[a] else { continue };
            analytic.extend_from_slice(g);
            let mut params = bundle.param_actors[a].as_ref().expect("actor with gradient").params.clone();
            n.extend(numeric(&mut params, |p| {
                bundle.param_actors[a].as_mut().expect("actor").params.copy_from_slice(p);
                Ok(param_actor_loss(&bundle, &batch.obs, &batch.skill, &noise)?.loss)
            })?);
        }
        Ok(rel_err(&analytic, &n))
    })
}

/// Sparse-reward critic with a soft Bellman target from a separate target critic.
pub fn check_bellman(instances: usize, seed: u64) -> Result<GradCheck, AgentError> {
    run("bellman", instances, seed, |kind, rng| {
        let Instance { mut bundle, batch } = random_instance(kind, 6, rng);
        let target: Mlp = {
            let mut t = bundle.critic.clone();
            t.params.iter_mut().for_each(|p| *p += rng.random_range(-0.1..0.1));
            t
        };
        let gamma = rng.random_range(0.0..0.99);
        let aff = rng.random_bool(0.5);
        let noise: Vec<Vec<[f64; MAX_PARAM_DIM]>> = (0..bundle.num_skills()).map(|_| draw_noise(batch.rows, rng)).collect();
        let analytic = bellman_critic_loss(&bundle, &target, &batch, gamma, aff, &noise)?.grad;
        let mut params = bundle.critic.params.clone();
        let n = numeric(&mut params, |p| {
            bundle.critic.params.copy_from_slice(p);
            Ok(bellman_critic_loss(&bundle, &target, &batch, gamma, aff, &noise)?.loss)
        })?;
        Ok(rel_err(&analytic, &n))
    })
}

pub fn check_all(instances: usize, seed: u64) -> Result<Vec<GradCheck>, AgentError> {
    Ok(vec![
        check_critic(instances, seed)?,
        check_skill_actor(instances, seed.wrapping_add(1))?,
        check_param_actor(instances, seed.wrapping_add(2))?,
        check_bellman(instances, seed.wrapping_add(3))?,
    ])
}
