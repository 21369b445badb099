mod common;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use trc_core::cvar::{
    cvar_surrogate, expectation_surrogate, surrogate_moments, CostStats, RiskSpec, SurrogateBatch,
};
use trc_core::diffnet::checkpoint::Architecture;
use trc_core::diffnet::{grad_scalar, GaussianPolicy};
use trc_core::trainer::objective_gradient;
use trc_core::trainer::values::{batch_loss, loss_and_grad, HeadLoss, HeadScale};

const H: f64 = 1e-6;
const TOL: f64 = 1e-4;

struct Fixture {
    policy: GaussianPolicy,
    old: Vec<f64>,
    params: Vec<f64>,
    states: Array2<f64>,
    actions: Array2<f64>,
    old_lp: Vec<f64>,
    adv: Vec<f64>,
    adv_c: Vec<f64>,
    adv_s: Vec<f64>,
    cost_weights: Vec<f64>,
    weights: Vec<f64>,
}

fn fixture(seed: u64) -> Fixture {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (obs, act, n) = (4, 2, 24);
    let policy = GaussianPolicy::new(obs, &[6, 5], act).unwrap();
    let old = policy.init_params(&mut rng, -0.3).into_inner();
    let params: Vec<f64> = old.iter().map(|p| p + rng.gen_range(-0.05..0.05)).collect();
    let states = Array2::from_shape_fn((n, obs), |_| rng.gen_range(-1.5..1.5));
    let actions = Array2::from_shape_fn((n, act), |_| rng.gen_range(-1.2..1.2));
    let old_lp = policy.log_prob_batch(&old, states.view(), actions.view()).unwrap();
    let mut normalized = |n: usize| {
        let w: Vec<f64> = (0..n).map(|_| rng.gen_range(0.1..1.0)).collect();
        let total: f64 = w.iter().sum();
        w.into_iter().map(|x| x / total).collect::<Vec<f64>>()
    };
    let (cw, w) = (normalized(n), normalized(n));
    Fixture {
        adv: (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect(),
        adv_c: (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        adv_s: (0..n).map(|_| rng.gen_range(-3.0..3.0)).collect(),
        cost_weights: cw,
        weights: w,
        policy,
        old,
        params,
        states,
        actions,
        old_lp,
    }
}

impl Fixture {
    fn batch(&self) -> SurrogateBatch<'_> {
        SurrogateBatch {
            states: self.states.view(),
            actions: self.actions.view(),
            old_log_probs: &self.old_lp,
            adv_cost: &self.adv_c,
            adv_square: &self.adv_s,
            cost_weights: &self.cost_weights,
            square_weights: &self.weights,
        }
    }
}

#[test]
fn policy_surrogate_gradient() {
    for seed in 0..20 {
        let f = fixture(seed);
        let (_, g) = objective_gradient(
            &f.policy,
            &f.params,
            f.states.view(),
            f.actions.view(),
            &f.old_lp,
            &f.adv,
        )
        .unwrap();
        let fd = common::central_difference(
            |p| {
                let lp = f.policy.log_prob_batch(p, f.states.view(), f.actions.view()).unwrap();
                lp.iter()
                    .zip(&f.old_lp)
                    .zip(&f.adv)
                    .map(|((l, o), a)| (l - o).exp() * a)
                    .sum::<f64>()
                    / lp.len() as f64
            },
            &f.params,
            H,
        );
        let err = common::relative_error(&g, &fd);
        assert!(err < TOL, "seed {seed}: {err}");
    }
}

#[test]
fn cvar_and_expectation_surrogate_gradients() {
    let stats = CostStats::from_moments(1.5, 3.0);
    let risk = RiskSpec {
        alpha: 0.125,
        limit: 0.025,
        gamma: 0.95,
    };
    for seed in 0..20 {
        let f = fixture(100 + seed);
        let batch = f.batch();
        let (_, g) = cvar_surrogate(&f.policy, &f.params, &batch, &stats, &risk).unwrap();
        let fd = common::central_difference(
            |p| {
                surrogate_moments(&f.policy, p, &batch, &stats, risk.gamma)
                    .unwrap()
                    .cvar(risk.alpha)
                    .unwrap()
            },
            &f.params,
            H,
        );
        let err = common::relative_error(&g, &fd);
        assert!(err < TOL, "cvar seed {seed}: {err}");

        let (_, g) = expectation_surrogate(&f.policy, &f.params, &batch, &stats, risk.gamma).unwrap();
        let fd = common::central_difference(
            |p| surrogate_moments(&f.policy, p, &batch, &stats, risk.gamma).unwrap().j_c,
            &f.params,
            H,
        );
        let err = common::relative_error(&g, &fd);
        assert!(err < TOL, "expectation seed {seed}: {err}");
    }
}

#[test]
fn value_head_loss_gradients() {
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(200 + seed);
        let arch = Architecture::new(5, 2, &[7, 4]).unwrap();
        let x = Array2::from_shape_fn((16, 5), |_| rng.gen_range(-1.0..1.0));
        let heads = [
            (&arch.value, HeadLoss::Squared),
            (&arch.cost_value, HeadLoss::Squared),
            (&arch.cost_square, HeadLoss::SquareRoot),
        ];
        for (spec, loss) in heads {
            // Zero initial biases put rows with all-dead first-layer units exactly on a kink.
            let params: Vec<f64> = spec
                .init_params(&mut rng, 1.0)
                .iter()
                .map(|p| p + rng.gen_range(-0.1..0.1))
                .collect();
            let targets: Vec<f64> = (0..16).map(|_| rng.gen_range(0.0..3.0)).collect();
            let scale = HeadScale {
                shift: rng.gen_range(-1.0..1.0),
                scale: rng.gen_range(0.5..3.0),
            };
            let (_, g) = loss_and_grad(spec, &params, scale, x.view(), &targets, loss).unwrap();
            let fd = common::central_difference(
                |p| batch_loss(spec, p, scale, x.view(), &targets, loss).unwrap(),
                &params,
                H,
            );
            let err = common::relative_error(&g, &fd);
            assert!(err < TOL, "seed {seed} {loss:?}: {err}");
        }
    }
}

#[test]
fn kl_gradient_vanishes_at_the_old_policy() {
    let f = fixture(7);
    let means = f.policy.mean_batch(&f.old, f.states.view()).unwrap();
    let ls = f.policy.log_std(&f.old).to_vec();
    let (kl, g) = grad_scalar(&f.old, |t, p| {
        f.policy.kl_var(t, &means, &ls, p, t.constant(f.states.clone()))
    })
    .unwrap();
    assert!(kl.abs() < 1e-14);
    assert!(g.norm() < 1e-12);
}
