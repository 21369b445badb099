//! Reference implementations used only by tests. Each one is written from the
//! defining formula, independently of the library code it checks.
#![allow(dead_code, clippy::needless_range_loop, clippy::too_many_arguments)]

use trc_core::env::Done;
use trc_core::tabular::{TabularMdp, TabularPolicy};

/// Splits flat per-step arrays into `(start, len)` episode ranges.
pub fn episodes(dones: &[Done]) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut start = 0;
    for (t, d) in dones.iter().enumerate() {
        if d.is_done() {
            out.push((start, t + 1 - start));
            start = t + 1;
        }
    }
    out
}

/// `Σ_l (γλ)^l δ_{t+l}` with the sum written out for every `t`.
pub fn brute_gae_standard(
    rewards: &[f64],
    values: &[f64],
    next_values: &[f64],
    dones: &[Done],
    gamma: f64,
    lambda: f64,
) -> Vec<f64> {
    let mut out = vec![0.0; rewards.len()];
    for (start, len) in episodes(dones) {
        let end = start + len;
        let delta = |j: usize| {
            let next = if dones[j] == Done::Terminal { 0.0 } else { next_values[j] };
            rewards[j] + gamma * next - values[j]
        };
        for t in start..end {
            let mut total = 0.0;
            for j in t..end {
                total += (gamma * lambda).powi((j - t) as i32) * delta(j);
            }
            out[t] = total;
        }
    }
    out
}

/// `Σ_l (γ²λ)^l δ^S_{t+l}` with
/// `δ^S_j = c_j² + 2γ c_j V_C(s_{j+1}) + γ² S(s_{j+1}) − S(s_j)`.
pub fn brute_gae_square(
    costs: &[f64],
    cost_values_next: &[f64],
    squares: &[f64],
    squares_next: &[f64],
    dones: &[Done],
    gamma: f64,
    lambda: f64,
) -> Vec<f64> {
    let mut out = vec![0.0; costs.len()];
    for (start, len) in episodes(dones) {
        let end = start + len;
        let delta = |j: usize| {
            let c = costs[j];
            let tail = if dones[j] == Done::Terminal {
                0.0
            } else {
                2.0 * gamma * c * cost_values_next[j] + gamma * gamma * squares_next[j]
            };
            c * c + tail - squares[j]
        };
        for t in start..end {
            let mut total = 0.0;
            for j in t..end {
                total += (gamma * gamma * lambda).powi((j - t) as i32) * delta(j);
            }
            out[t] = total;
        }
    }
    out
}

/// First and second moments of the discounted cost sum truncated at
/// `horizon` steps, by propagating per-state probability mass together with
/// the partial sums' first and second moments.
pub fn finite_horizon_moments(mdp: &TabularMdp, pi: &TabularPolicy, horizon: usize) -> (f64, f64) {
    let ns = mdp.n_states;
    let mut mass = mdp.rho.clone();
    let mut m1 = vec![0.0; ns];
    let mut m2 = vec![0.0; ns];
    let mut disc = 1.0;
    for _ in 0..horizon {
        let mut nmass = vec![0.0; ns];
        let mut n1 = vec![0.0; ns];
        let mut n2 = vec![0.0; ns];
        for s in 0..ns {
            if mass[s] == 0.0 && m1[s] == 0.0 && m2[s] == 0.0 {
                continue;
            }
            for a in 0..mdp.n_actions {
                for s2 in 0..ns {
                    let p = pi.prob(s, a) * mdp.p(s, a, s2);
                    if p == 0.0 {
                        continue;
                    }
                    let k = disc * mdp.cost(s, a, s2);
                    nmass[s2] += p * mass[s];
                    n1[s2] += p * (m1[s] + k * mass[s]);
                    n2[s2] += p * (m2[s] + 2.0 * k * m1[s] + k * k * mass[s]);
                }
            }
        }
        mass = nmass;
        m1 = n1;
        m2 = n2;
        disc *= mdp.gamma;
    }
    (m1.iter().sum(), m2.iter().sum())
}

/// The same moments by listing every state-action path of length `horizon`.
/// Exponential; only for tiny horizons.
pub fn enumerate_moments(mdp: &TabularMdp, pi: &TabularPolicy, horizon: usize) -> (f64, f64) {
    fn walk(
        mdp: &TabularMdp,
        pi: &TabularPolicy,
        s: usize,
        depth: usize,
        horizon: usize,
        prob: f64,
        ret: f64,
        acc: &mut (f64, f64),
    ) {
        if depth == horizon {
            acc.0 += prob * ret;
            acc.1 += prob * ret * ret;
            return;
        }
        let disc = mdp.gamma.powi(depth as i32);
        for a in 0..mdp.n_actions {
            for s2 in 0..mdp.n_states {
                let p = pi.prob(s, a) * mdp.p(s, a, s2);
                if p > 0.0 {
                    let c = disc * mdp.cost(s, a, s2);
                    walk(mdp, pi, s2, depth + 1, horizon, prob * p, ret + c, acc);
                }
            }
        }
    }
    let mut acc = (0.0, 0.0);
    for s in 0..mdp.n_states {
        if mdp.rho[s] > 0.0 {
            walk(mdp, pi, s, 0, horizon, mdp.rho[s], 0.0, &mut acc);
        }
    }
    acc
}

/// `(q − 2νr + ν²s)/(2λ) + λδ − νc`.
pub fn dual_value(q: f64, r: f64, s: f64, c: f64, delta: f64, lambda: f64, nu: f64) -> f64 {
    (q - 2.0 * nu * r + nu * nu * s) / (2.0 * lambda) + lambda * delta - nu * c
}

/// Minimum of the dual over `λ > 0, ν ≥ 0` by a coarse log-spaced grid
/// followed by repeated local refinement.
pub fn grid_dual(q: f64, r: f64, s: f64, c: f64, delta: f64) -> (f64, f64, f64) {
    let f = |l: f64, n: f64| dual_value(q, r, s, c, delta, l, n);
    let mut best = (f64::INFINITY, 1.0, 0.0);
    let lam_grid: Vec<f64> = (0..=240).map(|i| 10f64.powf(-6.0 + i as f64 * 0.05)).collect();
    let mut nu_grid: Vec<f64> = vec![0.0];
    nu_grid.extend((0..=240).map(|i| 10f64.powf(-6.0 + i as f64 * 0.05)));
    for &l in &lam_grid {
        for &n in &nu_grid {
            let v = f(l, n);
            if v < best.0 {
                best = (v, l, n);
            }
        }
    }
    let (mut dl, mut dn) = (best.1 * 0.2, best.2.max(1e-6) * 0.2);
    for _ in 0..200 {
        let (_, l0, n0) = best;
        for i in -10..=10 {
            for j in -10..=10 {
                let l = l0 + dl * i as f64 / 10.0;
                let n = (n0 + dn * j as f64 / 10.0).max(0.0);
                if l <= 0.0 {
                    continue;
                }
                let v = f(l, n);
                if v < best.0 {
                    best = (v, l, n);
                }
            }
        }
        dl *= 0.7;
        dn *= 0.7;
    }
    best
}

/// Central differences of `f` at `x` along every coordinate.
pub fn central_difference<F: FnMut(&[f64]) -> f64>(mut f: F, x: &[f64], h: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + h;
            let up = f(&probe);
            probe[i] = x[i] - h;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, zero when both vanish.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = na.max(nb);
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}
