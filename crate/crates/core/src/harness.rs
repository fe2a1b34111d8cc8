//! Bernoulli-mixture ground truth, exact small-instance likelihoods and the
//! end-to-end experiment runner.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::codes::CodeMatrix;
use crate::diffusion::Tokens;
use crate::error::{Error, Result};
use crate::nn::{predict, DenoiserParams};
use crate::rng::{substream, tag};
use crate::schedule::Schedule;

/// Mixture of product-Bernoulli distributions over `n_codes` bits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixtureSpec {
    pub weights: Vec<f64>,
    /// `components x n_codes` presence probabilities.
    pub probs: Vec<Vec<f64>>,
}

impl MixtureSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidSpec(m));
        if self.weights.is_empty() || self.weights.len() != self.probs.len() {
            return bad(format!("{} weights for {} components", self.weights.len(), self.probs.len()));
        }
        if self.weights.iter().any(|w| !(*w >= 0.0)) || (self.weights.iter().sum::<f64>() - 1.0).abs() > 1e-12 {
            return bad("weights must be non-negative and sum to 1".into());
        }
        let n = self.probs[0].len();
        if n == 0 || self.probs.iter().any(|q| q.len() != n) {
            return bad("components must share a positive code count".into());
        }
        if self.probs.iter().flatten().any(|p| !(0.0..=1.0).contains(p)) {
            return bad("probabilities must lie in [0, 1]".into());
        }
        Ok(())
    }

    pub fn n_codes(&self) -> usize {
        self.probs.first().map_or(0, Vec::len)
    }

    /// `p_i = Σ_m w_m q_{m,i}`.
    pub fn prevalence(&self) -> Vec<f64> {
        (0..self.n_codes())
            .map(|i| self.weights.iter().zip(&self.probs).map(|(w, q)| w * q[i]).sum())
            .collect()
    }

    /// Covariance from the mixture moments.
    pub fn covariance(&self) -> Vec<Vec<f64>> {
        let p = self.prevalence();
        let n = p.len();
        let mut cov = vec![vec![0.0; n]; n];
        for i in 0..n {
            for j in 0..n {
                cov[i][j] = if i == j {
                    p[i] * (1.0 - p[i])
                } else {
                    let second: f64 = self.weights.iter().zip(&self.probs).map(|(w, q)| w * q[i] * q[j]).sum();
                    second - p[i] * p[j]
                };
            }
        }
        cov
    }

    /// Two-component preset on `n_codes >= 8` codes.
    ///
    /// Codes `0..n-2` have prevalences spread over roughly `[0.1, 0.6]` with
    /// opposite trends in the two components. Code `n-2` has prevalence
    /// 0.07 and code `n-1` almost identifies the component.
    pub fn desk(n_codes: usize) -> Self {
        assert!(n_codes >= 8, "desk preset needs at least 8 codes");
        let body = n_codes - 2;
        let mut a = Vec::with_capacity(n_codes);
        let mut b = Vec::with_capacity(n_codes);
        for i in 0..body {
            let f = i as f64 / (body - 1) as f64;
            a.push(0.05 + 0.75 * f);
            b.push(0.45 - 0.35 * f);
        }
        a.extend([0.02, 0.9]);
        b.extend([0.145, 0.05]);
        MixtureSpec {
            weights: vec![0.6, 0.4],
            probs: vec![a, b],
        }
    }
}

/// Samples plus the analytic moments of their distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub data: CodeMatrix,
    pub prevalence: Vec<f64>,
    pub covariance: Vec<Vec<f64>>,
}

/// Draw `n` records: a component by weight, then independent bits.
pub fn gen_ground_truth(spec: &MixtureSpec, n: usize, seed: u64) -> Result<GroundTruth> {
    spec.validate()?;
    let n_codes = spec.n_codes();
    let mut rng = substream(seed, &[tag::GROUND_TRUTH]);
    let mut bits = Vec::with_capacity(n * n_codes);
    for _ in 0..n {
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        let mut comp = spec.weights.len() - 1;
        for (m, w) in spec.weights.iter().enumerate() {
            acc += w;
            if u < acc {
                comp = m;
                break;
            }
        }
        for &q in &spec.probs[comp] {
            bits.push(u8::from(rng.gen::<f64>() < q));
        }
    }
    Ok(GroundTruth {
        data: CodeMatrix::new(n, n_codes, bits)?,
        prevalence: spec.prevalence(),
        covariance: spec.covariance(),
    })
}

// ---------------------------------------------------------------------------
// exact likelihood by enumeration

/// Largest instance [`exact_reverse_loglik`] and [`exact_elbo`] accept.
pub const EXACT_MAX_TOKENS: usize = 2;
pub const EXACT_MAX_STEPS: usize = 3;

fn check_exact(params: &DenoiserParams, schedule: &Schedule, x0: &[usize]) -> Result<()> {
    let cfg = params.config();
    if cfg.categories != 2 || cfg.n_tokens > EXACT_MAX_TOKENS || schedule.steps() > EXACT_MAX_STEPS {
        return Err(Error::InstanceTooLarge(format!(
            "N = {}, K = {}, T = {}; enumeration supports N <= {EXACT_MAX_TOKENS}, K = 2, T <= {EXACT_MAX_STEPS}",
            cfg.n_tokens,
            cfg.categories,
            schedule.steps()
        )));
    }
    if x0.len() != cfg.n_tokens || x0.iter().any(|&c| c >= cfg.categories) {
        return Err(Error::ShapeMismatch(format!("record {x0:?} does not fit the model")));
    }
    Ok(())
}

/// All `K^N` token states, indexed so that state `s` has token `i` equal to
/// digit `i` of `s` in base `K`.
fn all_states(n: usize, k: usize) -> Vec<Vec<usize>> {
    (0..k.pow(n as u32))
        .map(|mut s| {
            (0..n)
                .map(|_| {
                    let d = s % k;
                    s /= k;
                    d
                })
                .collect()
        })
        .collect()
}

/// Transition and marginal probabilities written directly from the
/// definition of the uniform-noise chain.
struct Chain<'a> {
    schedule: &'a Schedule,
    k: f64,
}

impl Chain<'_> {
    /// `q(b | a)` for one step at `t`.
    fn step(&self, a: usize, b: usize, t: usize) -> f64 {
        let keep = self.schedule.retention(t);
        keep * f64::from(u8::from(a == b)) + (1.0 - keep) / self.k
    }

    /// `q(x_t = b | x_0 = a)`.
    fn marginal(&self, a: usize, b: usize, t: usize) -> f64 {
        let ab = self.schedule.alpha_bar(t);
        ab * f64::from(u8::from(a == b)) + (1.0 - ab) / self.k
    }

    /// Reverse step `p(x_{t-1} = prev | x_t = cur)` for one token: the true
    /// posterior averaged over the predicted `x̂_0`, by Bayes' rule.
    fn reverse(&self, cur: usize, prev: usize, t: usize, pred: &[f64]) -> f64 {
        pred.iter()
            .enumerate()
            .map(|(x0, &w)| w * self.step(prev, cur, t) * self.marginal(x0, prev, t - 1) / self.marginal(x0, cur, t))
            .sum()
    }
}

/// Predictor rows for every state and step, `[t - 1][state]`.
fn predictions(params: &DenoiserParams, states: &[Vec<usize>], steps: usize) -> Result<Vec<Vec<Vec<f64>>>> {
    let (n, k) = (params.config().n_tokens, params.config().categories);
    let x = Tokens::new(states.len(), n, k, states.concat())?;
    (1..=steps)
        .map(|t| {
            let probs = predict(params, &x, t)?.probs;
            Ok(probs.as_slice().chunks(n * k).map(<[f64]>::to_vec).collect())
        })
        .collect()
}

/// `log p_θ(x_0)` of one record under the reverse chain, by summing over
/// every trajectory `x_{1..T}`. The prior `p(x_T)` is uniform and the last
/// step draws `x_0` from the predictor.
pub fn exact_reverse_loglik(params: &DenoiserParams, schedule: &Schedule, x0: &[usize]) -> Result<f64> {
    check_exact(params, schedule, x0)?;
    let (n, k) = (params.config().n_tokens, params.config().categories);
    let steps = schedule.steps();
    let states = all_states(n, k);
    let pred = predictions(params, &states, steps)?;
    let chain = Chain { schedule, k: k as f64 };
    let prior = (k as f64).powi(-(n as i32));
    let mut total = 0.0;
    // trajectory index enumerates (x_1, ..., x_T) in base |states|
    for traj in 0..states.len().pow(steps as u32) {
        let xs: Vec<usize> = (0..steps).map(|i| traj / states.len().pow(i as u32) % states.len()).collect();
        let mut p = prior;
        for t in (2..=steps).rev() {
            let (cur, prev) = (xs[t - 1], xs[t - 2]);
            for i in 0..n {
                p *= chain.reverse(states[cur][i], states[prev][i], t, &pred[t - 1][cur][i * k..(i + 1) * k]);
            }
        }
        for (i, &c) in x0.iter().enumerate() {
            p *= pred[0][xs[0]][i * k + c];
        }
        total += p;
    }
    Ok(total.ln())
}

/// The variational bound
/// `E_q[log p(x_T) + Σ_t log p_θ(x_{t-1} | x_t) − log q(x_{1..T} | x_0)]`
/// by summing over every forward trajectory.
pub fn exact_elbo(params: &DenoiserParams, schedule: &Schedule, x0: &[usize]) -> Result<f64> {
    check_exact(params, schedule, x0)?;
    let (n, k) = (params.config().n_tokens, params.config().categories);
    let steps = schedule.steps();
    let states = all_states(n, k);
    let pred = predictions(params, &states, steps)?;
    let chain = Chain { schedule, k: k as f64 };
    let log_prior = -(n as f64) * (k as f64).ln();
    let mut total = 0.0;
    for traj in 0..states.len().pow(steps as u32) {
        let xs: Vec<usize> = (0..steps).map(|i| traj / states.len().pow(i as u32) % states.len()).collect();
        let (mut log_q, mut log_p) = (0.0, log_prior);
        for t in 1..=steps {
            let prev: &[usize] = if t == 1 { x0 } else { &states[xs[t - 2]] };
            for i in 0..n {
                log_q += chain.step(prev[i], states[xs[t - 1]][i], t).ln();
            }
        }
        for t in 2..=steps {
            let (cur, prev) = (xs[t - 1], xs[t - 2]);
            for i in 0..n {
                log_p += chain.reverse(states[cur][i], states[prev][i], t, &pred[t - 1][cur][i * k..(i + 1) * k]).ln();
            }
        }
        for (i, &c) in x0.iter().enumerate() {
            log_p += pred[0][xs[0]][i * k + c].ln();
        }
        total += log_q.exp() * (log_p - log_q);
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codes::prevalence as empirical_prevalence;
    use crate::diffusion::{prior_kl, token_term};
    use crate::nn::{init_params, DenoiserConfig};
    use crate::schedule::{build_schedule, ScheduleKind};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    #[test]
    fn moment_examples() {
        let zero = MixtureSpec {
            weights: vec![1.0],
            probs: vec![vec![0.0; 3]],
        };
        let gt = gen_ground_truth(&zero, 50, 0).unwrap();
        assert!(gt.data.bits().iter().all(|&b| b == 0));
        assert!(gt.covariance.iter().flatten().all(|&c| c == 0.0));
        let two = MixtureSpec {
            weights: vec![0.5, 0.5],
            probs: vec![vec![1.0, 0.0], vec![0.0, 1.0]],
        };
        assert_eq!(two.prevalence(), vec![0.5, 0.5]);
        assert_eq!(two.covariance()[0][1], -0.25);
        assert_eq!(two.covariance()[0][0], 0.25);
    }

    #[test]
    fn invalid_specs() {
        let spec = |w: Vec<f64>, p: Vec<Vec<f64>>| MixtureSpec { weights: w, probs: p };
        assert!(spec(vec![0.5, 0.4], vec![vec![0.1], vec![0.2]]).validate().is_err());
        assert!(spec(vec![1.0], vec![vec![1.1]]).validate().is_err());
        assert!(spec(vec![0.5, 0.5], vec![vec![0.1], vec![0.2, 0.3]]).validate().is_err());
        assert!(spec(vec![1.0], vec![]).validate().is_err());
        assert!(matches!(
            gen_ground_truth(&spec(vec![1.5, -0.5], vec![vec![0.1], vec![0.2]]), 3, 0),
            Err(Error::InvalidSpec(_))
        ));
    }

    #[test]
    fn desk_preset() {
        let spec = MixtureSpec::desk(32);
        spec.validate().unwrap();
        let p = spec.prevalence();
        assert!((p[30] - 0.07).abs() < 1e-12);
        assert!(p[..30].windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn empirical_prevalence_within_clt_bounds() {
        let spec = MixtureSpec::desk(12);
        let n = 100_000;
        let gt = gen_ground_truth(&spec, n, 4).unwrap();
        for (e, p) in empirical_prevalence(&gt.data).unwrap().iter().zip(&gt.prevalence) {
            let sigma = (p * (1.0 - p) / n as f64).sqrt();
            assert!((e - p).abs() <= 4.0 * sigma, "{e} vs {p}");
        }
        assert_eq!(gen_ground_truth(&spec, 10, 4).unwrap().data, gen_ground_truth(&spec, 10, 4).unwrap().data);
    }

    fn spec_strategy() -> impl Strategy<Value = MixtureSpec> {
        (1usize..=3, 1usize..=4).prop_flat_map(|(m, n)| {
            (
                proptest::collection::vec(0.01f64..1.0, m),
                proptest::collection::vec(proptest::collection::vec(0.0f64..=1.0, n), m),
            )
                .prop_map(|(w, probs)| {
                    let total: f64 = w.iter().sum();
                    let mut weights: Vec<f64> = w.iter().map(|v| v / total).collect();
                    let rest: f64 = weights[1..].iter().sum();
                    weights[0] = 1.0 - rest;
                    MixtureSpec { weights, probs }
                })
        })
    }

    proptest! {
        #[test]
        fn moments_match_enumeration(spec in spec_strategy()) {
            prop_assume!(spec.validate().is_ok());
            let n = spec.n_codes();
            let mut mean = vec![0.0; n];
            let mut second = vec![vec![0.0; n]; n];
            for x in 0..(1usize << n) {
                let bit = |i: usize| (x >> i) & 1 == 1;
                let p: f64 = spec.weights.iter().zip(&spec.probs).map(|(w, q)| {
                    w * (0..n).map(|i| if bit(i) { q[i] } else { 1.0 - q[i] }).product::<f64>()
                }).sum();
                for i in 0..n {
                    if bit(i) {
                        mean[i] += p;
                        for j in 0..n {
                            if bit(j) {
                                second[i][j] += p;
                            }
                        }
                    }
                }
            }
            let (prev, cov) = (spec.prevalence(), spec.covariance());
            for i in 0..n {
                prop_assert!((prev[i] - mean[i]).abs() < 1e-12);
                for j in 0..n {
                    prop_assert!((cov[i][j] - (second[i][j] - mean[i] * mean[j])).abs() < 1e-12);
                }
            }
        }
    }

    fn tiny(steps: usize, seed: u64, noise: f64) -> (DenoiserParams, Schedule) {
        let cfg = DenoiserConfig::new(2, 4, 1, 1, 2);
        let mut p = init_params(&cfg, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, noise).unwrap();
        p.values_mut().iter_mut().for_each(|v| *v += normal.sample(&mut rng));
        (p, build_schedule(ScheduleKind::Cosine { s: 0.008 }, steps).unwrap())
    }

    #[test]
    fn single_step_enumeration() {
        let (p, s) = tiny(1, 3, 0.5);
        let x0 = [0, 1];
        let states = all_states(2, 2);
        let x = Tokens::new(4, 2, 2, states.concat()).unwrap();
        let probs = predict(&p, &x, 1).unwrap().probs;
        let want: f64 = (0..4).map(|r| 0.25 * probs.row(r, 0)[x0[0]] * probs.row(r, 1)[x0[1]]).sum();
        assert!((exact_reverse_loglik(&p, &s, &x0).unwrap() - want.ln()).abs() < 1e-14);
    }

    #[test]
    fn uniform_predictor_gives_uniform_likelihood() {
        let cfg = DenoiserConfig::new(2, 4, 1, 1, 2);
        let p = DenoiserParams::zeros(&cfg).unwrap();
        let s = build_schedule(ScheduleKind::Cosine { s: 0.008 }, 3).unwrap();
        for x0 in [[0, 0], [0, 1], [1, 1]] {
            let ll = exact_reverse_loglik(&p, &s, &x0).unwrap();
            assert!((ll - 2.0 * 0.5f64.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn bound_holds_and_matches_decomposition() {
        for seed in 0..20 {
            let (p, s) = tiny(3, seed, 0.7);
            let x0 = [(seed % 2) as usize, (seed / 2 % 2) as usize];
            let ll = exact_reverse_loglik(&p, &s, &x0).unwrap();
            let elbo = exact_elbo(&p, &s, &x0).unwrap();
            assert!(ll >= elbo - 1e-9, "seed {seed}: {ll} < {elbo}");
            // the same bound from the per-step terms the training loss uses
            let chain = Chain { schedule: &s, k: 2.0 };
            let states = all_states(2, 2);
            let x = Tokens::new(4, 2, 2, states.concat()).unwrap();
            let mut neg = prior_kl(&Tokens::new(1, 2, 2, x0.to_vec()).unwrap(), &s);
            let mut scratch = [0.0; 4];
            for t in 1..=3 {
                let probs = predict(&p, &x, t).unwrap().probs;
                for (r, st) in states.iter().enumerate() {
                    let w: f64 = (0..2).map(|i| chain.marginal(x0[i], st[i], t)).product();
                    for i in 0..2 {
                        neg += w * token_term(x0[i], st[i], t, probs.row(r, i), &s, &mut scratch);
                    }
                }
            }
            assert!((elbo + neg).abs() < 1e-10, "seed {seed}: {elbo} vs {}", -neg);
        }
    }

    #[test]
    fn enumeration_limits() {
        let (p, _) = tiny(3, 0, 0.1);
        let long = build_schedule(ScheduleKind::Cosine { s: 0.008 }, 4).unwrap();
        assert!(matches!(exact_reverse_loglik(&p, &long, &[0, 0]), Err(Error::InstanceTooLarge(_))));
        let wide = init_params(&DenoiserConfig::new(3, 4, 1, 1, 2), 0).unwrap();
        let s = build_schedule(ScheduleKind::Cosine { s: 0.008 }, 2).unwrap();
        assert!(matches!(exact_elbo(&wide, &s, &[0, 0, 0]), Err(Error::InstanceTooLarge(_))));
        assert!(exact_elbo(&p, &s, &[0]).is_err());
    }
}
