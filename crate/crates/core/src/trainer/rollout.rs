use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::normalizer::Normalizer;
use crate::diffnet::GaussianPolicy;
use crate::env::{Done, Environment};
use crate::Result;

/// One episode of raw experience.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    /// Raw observations `s_0 … s_T`, one more than the number of steps.
    pub observations: Vec<Vec<f64>>,
    /// Unclipped actions as sampled from the policy.
    pub actions: Vec<Vec<f64>>,
    pub rewards: Vec<f64>,
    pub costs: Vec<f64>,
    pub violations: Vec<bool>,
    pub dones: Vec<Done>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    pub fn total_reward(&self) -> f64 {
        self.rewards.iter().sum()
    }

    pub fn violation_count(&self) -> usize {
        self.violations.iter().filter(|&&v| v).count()
    }

    pub fn cv_rate(&self) -> f64 {
        if self.is_empty() {
            0.0
        } else {
            self.violation_count() as f64 / self.len() as f64
        }
    }

    pub fn final_done(&self) -> Done {
        self.dones.last().copied().unwrap_or(Done::Continue)
    }
}

/// The acting policy: network, parameters and frozen observation statistics.
#[derive(Debug, Clone, Copy)]
pub struct Actor<'a> {
    pub policy: &'a GaussianPolicy,
    pub params: &'a [f64],
    pub normalizer: &'a Normalizer,
    /// Act with the mean instead of sampling.
    pub deterministic: bool,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Deterministic child seed.
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    splitmix64(splitmix64(seed) ^ index.wrapping_mul(0xD605_BBB5_8C8A_BBFD))
}

/// Runs one episode of at most `horizon` steps. Hitting the horizon without
/// an environment-side end marks the last step truncated.
pub fn collect_episode(
    env: &mut dyn Environment,
    actor: &Actor<'_>,
    horizon: usize,
    seed: u64,
) -> Result<Trajectory> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 1));
    let mut obs = env.reset(seed)?;
    let mut traj = Trajectory {
        observations: Vec::with_capacity(horizon + 1),
        actions: Vec::with_capacity(horizon),
        rewards: Vec::with_capacity(horizon),
        costs: Vec::with_capacity(horizon),
        violations: Vec::with_capacity(horizon),
        dones: Vec::with_capacity(horizon),
    };
    let mut input = vec![0.0; obs.len()];
    for t in 0..horizon {
        actor.normalizer.normalize_into(&obs, &mut input);
        let action = if actor.deterministic {
            actor.policy.mean(actor.params, &input)?
        } else {
            actor.policy.sample(actor.params, &input, &mut rng)?.0
        };
        let step = env.step(&action)?;
        let mut done = step.done;
        if t + 1 == horizon && done == Done::Continue {
            done = Done::Truncated;
        }
        traj.observations.push(std::mem::replace(&mut obs, step.obs));
        traj.actions.push(action);
        traj.rewards.push(step.reward);
        traj.costs.push(step.cost);
        traj.violations.push(step.violation);
        traj.dones.push(done);
        if done.is_done() {
            break;
        }
    }
    traj.observations.push(obs);
    Ok(traj)
}

/// `episodes` episodes, the `i`-th seeded by `derive_seed(seed, i)`.
pub fn collect(
    env: &mut dyn Environment,
    actor: &Actor<'_>,
    episodes: usize,
    horizon: usize,
    seed: u64,
) -> Result<Vec<Trajectory>> {
    (0..episodes)
        .map(|i| collect_episode(env, actor, horizon, derive_seed(seed, i as u64)))
        .collect()
}

/// Same as [`collect`], spreading episodes over one environment per worker.
/// The result does not depend on the number of workers.
pub fn collect_parallel(
    envs: &mut [Box<dyn Environment + Send>],
    actor: &Actor<'_>,
    episodes: usize,
    horizon: usize,
    seed: u64,
) -> Result<Vec<Trajectory>> {
    let workers = envs.len().clamp(1, episodes.max(1));
    if workers == 1 {
        return collect(envs[0].as_mut(), actor, episodes, horizon, seed);
    }
    let chunk = episodes.div_ceil(workers);
    let results: Vec<Result<Vec<Trajectory>>> = std::thread::scope(|scope| {
        let handles: Vec<_> = envs
            .iter_mut()
            .take(workers)
            .enumerate()
            .map(|(w, env)| {
                scope.spawn(move || {
                    let start = w * chunk;
                    let end = ((w + 1) * chunk).min(episodes);
                    (start..end)
                        .map(|i| {
                            collect_episode(env.as_mut(), actor, horizon, derive_seed(seed, i as u64))
                        })
                        .collect()
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("rollout worker panicked"))
            .collect()
    });
    let mut out = Vec::with_capacity(episodes);
    for r in results {
        out.extend(r?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{EnvConfig, Nav2d};
    use rand::SeedableRng;

    fn setup() -> (GaussianPolicy, Vec<f64>, Normalizer, Nav2d) {
        let cfg = EnvConfig::default();
        let policy = GaussianPolicy::new(cfg.obs_dim(), &[8], 2).unwrap();
        let params = policy
            .init_params(&mut ChaCha8Rng::seed_from_u64(0), -0.5)
            .into_inner();
        let norm = Normalizer::new(cfg.obs_dim());
        (policy, params, norm, Nav2d::new(cfg).unwrap())
    }

    #[test]
    fn short_horizon_gives_exact_length() {
        let (policy, params, norm, mut env) = setup();
        let actor = Actor {
            policy: &policy,
            params: &params,
            normalizer: &norm,
            deterministic: false,
        };
        let trajs = collect(&mut env, &actor, 1, 3, 5).unwrap();
        assert_eq!(trajs.len(), 1);
        assert_eq!(trajs[0].len(), 3);
        assert_eq!(trajs[0].observations.len(), 4);
        assert_eq!(trajs[0].dones, vec![Done::Continue, Done::Continue, Done::Truncated]);
    }

    #[test]
    fn same_seed_same_trajectories() {
        let (policy, params, norm, mut env) = setup();
        let actor = Actor {
            policy: &policy,
            params: &params,
            normalizer: &norm,
            deterministic: false,
        };
        let a = collect(&mut env, &actor, 2, 20, 11).unwrap();
        let b = collect(&mut env, &actor, 2, 20, 11).unwrap();
        assert_eq!(a, b);
        let c = collect(&mut env, &actor, 2, 20, 12).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn worker_count_does_not_change_results() {
        let (policy, params, norm, _) = setup();
        let actor = Actor {
            policy: &policy,
            params: &params,
            normalizer: &norm,
            deterministic: false,
        };
        let make = || -> Box<dyn Environment + Send> {
            Box::new(Nav2d::new(EnvConfig::default()).unwrap())
        };
        let mut one = vec![make()];
        let mut three = vec![make(), make(), make()];
        let a = collect_parallel(&mut one, &actor, 5, 15, 3).unwrap();
        let b = collect_parallel(&mut three, &actor, 5, 15, 3).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn recorded_costs_match_a_replay_of_the_actions() {
        let (policy, params, norm, mut env) = setup();
        let actor = Actor {
            policy: &policy,
            params: &params,
            normalizer: &norm,
            deterministic: false,
        };
        let seed = derive_seed(21, 0);
        let traj = collect_episode(&mut env, &actor, 30, seed).unwrap();
        let mut replay = Nav2d::new(EnvConfig::default()).unwrap();
        replay.reset(seed).unwrap();
        for (t, a) in traj.actions.iter().enumerate() {
            let step = replay.step(a).unwrap();
            assert_eq!(step.cost, traj.costs[t]);
            assert_eq!(step.reward, traj.rewards[t]);
            assert_eq!(step.obs, traj.observations[t + 1]);
        }
    }

    #[test]
    fn derived_seeds_differ() {
        let seeds: std::collections::HashSet<u64> = (0..1000).map(|i| derive_seed(7, i)).collect();
        assert_eq!(seeds.len(), 1000);
    }
}
