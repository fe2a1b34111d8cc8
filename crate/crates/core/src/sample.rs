//! Ancestral sampling and training-free guided sampling.
//!
//! Guidance refines the denoiser's final latent `z_L` at every reverse step
//! by a few Langevin iterations on `KL(head(y) || head(z_L)) - V(y)`, with
//! gradients taken through the output head only, then samples from the
//! head's distribution at the refined latent.

use std::sync::Arc;

use ndarray::{s, Array2, ArrayView2};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::codes::{CodeMatrix, PRESENT};
use crate::diffusion::{draw_category, kl_divergence, mixture_row, CategoricalField, Tokens, LOG_FLOOR};
use crate::error::{Error, Result};
use crate::nn::{predict, DenoiserParams, Head};
use crate::rng::{substream, tag};
use crate::schedule::Schedule;
use crate::train::Checkpoint;

/// Records advanced together through the reverse chain.
const SAMPLE_CHUNK: usize = 500;

/// Differentiable scorer over per-token probabilities (`tokens x K`).
pub trait SoftScorer: Send + Sync {
    /// Probability of the context, in `(0, 1]`.
    fn score(&self, probs: ArrayView2<f64>) -> f64;
    /// `∂score/∂probs`.
    fn grad(&self, probs: ArrayView2<f64>) -> Array2<f64>;
}

/// Target of guided sampling.
#[derive(Clone)]
pub enum ContextSpec {
    /// Token `k` takes the "present" category.
    CodePresence(usize),
    /// Every listed code is present; energies add.
    Conjunction(Vec<usize>),
    SoftClassifier(Arc<dyn SoftScorer>),
}

impl std::fmt::Debug for ContextSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ContextSpec::CodePresence(k) => write!(f, "CodePresence({k})"),
            ContextSpec::Conjunction(ks) => write!(f, "Conjunction({ks:?})"),
            ContextSpec::SoftClassifier(_) => write!(f, "SoftClassifier"),
        }
    }
}

impl ContextSpec {
    pub fn validate(&self, n_tokens: usize) -> Result<()> {
        let codes: &[usize] = match self {
            ContextSpec::CodePresence(k) => std::slice::from_ref(k),
            ContextSpec::Conjunction(ks) if ks.is_empty() => {
                return Err(Error::InvalidContext("empty conjunction".into()))
            }
            ContextSpec::Conjunction(ks) => ks,
            ContextSpec::SoftClassifier(_) => &[],
        };
        match codes.iter().find(|&&k| k >= n_tokens) {
            Some(k) => Err(Error::InvalidContext(format!("code {k} out of range for {n_tokens} codes"))),
            None => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GuidanceConfig {
    pub steps: usize,
    pub eta: f64,
    pub lambda: f64,
    pub tau: f64,
    /// Draws for a Monte-Carlo estimate of a soft classifier's expected
    /// score; `None` evaluates it on the token marginals.
    pub classifier_samples: Option<usize>,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            steps: 10,
            eta: 0.1,
            lambda: 0.01,
            tau: 0.0,
            classifier_samples: None,
        }
    }
}

impl GuidanceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0) || !(self.lambda >= 0.0) || !(self.tau >= 0.0) || self.classifier_samples == Some(0) {
            return Err(Error::InvalidConfig(format!("invalid guidance config {self:?}")));
        }
        Ok(())
    }
}

fn check_latent(head: &Head, z: ArrayView2<f64>, n_tokens: usize) -> Result<()> {
    let _ = head;
    if z.nrows() != n_tokens {
        return Err(Error::ShapeMismatch(format!("latent has {} rows, expected {n_tokens}", z.nrows())));
    }
    Ok(())
}

/// `V(z)` and `∂V/∂z`. The Monte-Carlo estimator needs `rng`.
fn energy_and_grad<R: Rng + ?Sized>(
    params: &DenoiserParams,
    z: ArrayView2<f64>,
    context: &ContextSpec,
    samples: Option<usize>,
    rng: &mut R,
) -> Result<(f64, Array2<f64>)> {
    let head = Head::new(params);
    let n = params.config().n_tokens;
    check_latent(&head, z, n)?;
    context.validate(n)?;
    let probs = head.probs(z);
    let k = head.categories();
    let mut dlogits = Array2::<f64>::zeros((n, k));
    let value = match context {
        ContextSpec::CodePresence(_) | ContextSpec::Conjunction(_) => {
            let codes: Vec<usize> = match context {
                ContextSpec::CodePresence(c) => vec![*c],
                ContextSpec::Conjunction(cs) => cs.clone(),
                ContextSpec::SoftClassifier(_) => unreachable!(),
            };
            let mut v = 0.0;
            for &c in &codes {
                v += probs[[c, PRESENT]].max(LOG_FLOOR).ln();
                // ∂ log softmax_present / ∂ logits = e_present - p
                for j in 0..k {
                    let e = if j == PRESENT { 1.0 } else { 0.0 };
                    dlogits[[c, j]] += e - probs[[c, j]];
                }
            }
            v
        }
        ContextSpec::SoftClassifier(scorer) => {
            let (score, dscore) = match samples {
                None => (scorer.score(probs.view()), scorer.grad(probs.view())),
                Some(s) => monte_carlo_score(scorer.as_ref(), &probs, s, rng),
            };
            let score = score.max(LOG_FLOOR);
            let mut dz = vec![0.0; k];
            for i in 0..n {
                let dp: Vec<f64> = dscore.row(i).iter().map(|g| g / score).collect();
                crate::nn::softmax_backward(probs.row(i).as_slice().expect("contiguous"), &dp, &mut dz);
                dlogits.row_mut(i).iter_mut().zip(&dz).for_each(|(o, v)| *o = *v);
            }
            score.ln()
        }
    };
    Ok((value, head.latent_grad(dlogits.view())))
}

/// Score-function estimate of `E_{x ~ probs}[score(onehot(x))]` and its
/// gradient with respect to `probs`.
fn monte_carlo_score<R: Rng + ?Sized>(
    scorer: &dyn SoftScorer,
    probs: &Array2<f64>,
    samples: usize,
    rng: &mut R,
) -> (f64, Array2<f64>) {
    let (n, k) = probs.dim();
    let mut total = 0.0;
    let mut grad = Array2::zeros((n, k));
    let mut onehot = Array2::zeros((n, k));
    for _ in 0..samples {
        onehot.fill(0.0);
        let mut draws = Vec::with_capacity(n);
        for i in 0..n {
            let c = draw_category(probs.row(i).as_slice().expect("contiguous"), rng.gen::<f64>());
            onehot[[i, c]] = 1.0;
            draws.push(c);
        }
        let f = scorer.score(onehot.view());
        total += f;
        for (i, &c) in draws.iter().enumerate() {
            grad[[i, c]] += f / probs[[i, c]].max(LOG_FLOOR);
        }
    }
    let s = samples as f64;
    (total / s, grad / s)
}

/// Energy `V(z)`: log-probability of the context under the head at latent
/// `z` (`tokens x width`).
pub fn energy(z_latent: ArrayView2<f64>, params: &DenoiserParams, context: &ContextSpec) -> Result<f64> {
    let mut rng = substream(0, &[tag::LANGEVIN]);
    energy_and_grad(params, z_latent, context, None, &mut rng).map(|(v, _)| v)
}

/// `λ Σ_tokens KL(head(z) || head(anchor))` and its gradient in `z`, the
/// anchor held fixed.
fn kl_and_grad(params: &DenoiserParams, z: ArrayView2<f64>, anchor: &Array2<f64>, lambda: f64) -> (f64, Array2<f64>) {
    if lambda == 0.0 {
        return (0.0, Array2::zeros(z.raw_dim()));
    }
    let head = Head::new(params);
    let (v, dlogits) = kl_and_grad_probs(&head.probs(z), anchor, lambda);
    (v, head.latent_grad(dlogits.view()))
}

/// Regularizer value and its gradient in the logits of `p`.
fn kl_and_grad_probs(p: &Array2<f64>, anchor: &Array2<f64>, lambda: f64) -> (f64, Array2<f64>) {
    let (n, k) = p.dim();
    let mut total = 0.0;
    let mut dlogits = Array2::zeros((n, k));
    for i in 0..n {
        let (pi, qi) = (p.row(i), anchor.row(i));
        let kl = kl_divergence(pi.as_slice().expect("contiguous"), qi.as_slice().expect("contiguous"));
        total += kl;
        for j in 0..k {
            let lp = pi[j].max(LOG_FLOOR).ln();
            let lq = qi[j].max(LOG_FLOOR).ln();
            dlogits[[i, j]] = lambda * pi[j] * (lp - lq - kl);
        }
    }
    (lambda * total, dlogits)
}

/// KL regularizer between the head distributions at two latents.
pub fn kl_regularizer(z_current: ArrayView2<f64>, z_anchor: ArrayView2<f64>, params: &DenoiserParams, lambda: f64) -> f64 {
    let anchor = Head::new(params).probs(z_anchor);
    kl_and_grad(params, z_current, &anchor, lambda).0
}

/// Langevin refinement of one record's latent. Returns the iterates' energy
/// trace alongside the final latent.
pub fn langevin_refine_traced<R: Rng + ?Sized>(
    z_latent: ArrayView2<f64>,
    params: &DenoiserParams,
    context: &ContextSpec,
    config: &GuidanceConfig,
    rng: &mut R,
) -> Result<(Array2<f64>, Vec<f64>)> {
    config.validate()?;
    let anchor = Head::new(params).probs(z_latent);
    let mut y = z_latent.to_owned();
    let mut energies = Vec::with_capacity(config.steps + 1);
    let noise_scale = (2.0 * config.eta * config.tau).sqrt();
    for step in 0..config.steps {
        let (v, dv) = energy_and_grad(params, y.view(), context, config.classifier_samples, rng)?;
        energies.push(v);
        let (_, dkl) = kl_and_grad(params, y.view(), &anchor, config.lambda);
        y.zip_mut_with(&(dkl - dv), |a, g| *a -= config.eta * g);
        if config.tau > 0.0 {
            y.mapv_inplace(|a| a + noise_scale * rng.sample::<f64, _>(StandardNormal));
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteLatent(step + 1));
        }
    }
    if config.steps > 0 {
        energies.push(energy_and_grad(params, y.view(), context, config.classifier_samples, rng)?.0);
    }
    Ok((y, energies))
}

/// `K` Langevin steps on the latent toward the context.
pub fn langevin_refine<R: Rng + ?Sized>(
    z_latent: ArrayView2<f64>,
    params: &DenoiserParams,
    context: &ContextSpec,
    config: &GuidanceConfig,
    rng: &mut R,
) -> Result<Array2<f64>> {
    langevin_refine_traced(z_latent, params, context, config, rng).map(|(y, _)| y)
}

/// Reverse chain driven by an arbitrary predictor. `predict(x_t, t, ids)`
/// returns `p(x̂_0 | x_t)` for the records with global indices `ids`.
///
/// Record `r` draws from its own stream keyed on `(seed, r)`, so results do
/// not depend on how records are grouped.
pub fn sample_with_predictor<F>(
    mut predict_fn: F,
    n_tokens: usize,
    categories: usize,
    schedule: &Schedule,
    n: usize,
    seed: u64,
) -> Result<CodeMatrix>
where
    F: FnMut(&Tokens, usize, &[usize]) -> Result<CategoricalField>,
{
    if n == 0 {
        return Err(Error::InvalidConfig("sample count must be >= 1".into()));
    }
    let uniform = vec![1.0 / categories as f64; categories];
    let mut cats_out = Vec::with_capacity(n * n_tokens);
    let ids: Vec<usize> = (0..n).collect();
    let mut row = vec![0.0; categories];
    for chunk in ids.chunks(SAMPLE_CHUNK) {
        let mut rngs: Vec<_> = chunk.iter().map(|&r| substream(seed, &[tag::SAMPLE, r as u64])).collect();
        let mut cats = Vec::with_capacity(chunk.len() * n_tokens);
        for rng in rngs.iter_mut() {
            for _ in 0..n_tokens {
                cats.push(draw_category(&uniform, rng.gen::<f64>()));
            }
        }
        let mut x = Tokens::new(chunk.len(), n_tokens, categories, cats)?;
        for t in (1..=schedule.steps()).rev() {
            let probs = predict_fn(&x, t, chunk)?;
            let mut next = Vec::with_capacity(x.cats().len());
            for (b, rng) in rngs.iter_mut().enumerate() {
                for i in 0..n_tokens {
                    let pred = probs.row(b, i);
                    let c = if t == 1 {
                        draw_category(pred, rng.gen::<f64>())
                    } else {
                        mixture_row(
                            x.get(b, i),
                            pred,
                            schedule.retention(t),
                            schedule.alpha_bar(t - 1),
                            &mut row,
                            None,
                        );
                        draw_category(&row, rng.gen::<f64>())
                    };
                    next.push(c);
                }
            }
            x = Tokens::new(chunk.len(), n_tokens, categories, next)?;
        }
        cats_out.extend_from_slice(x.cats());
    }
    Tokens::new(n, n_tokens, categories, cats_out)?.to_codes()
}

/// Unconditional ancestral sampling of `n` records.
pub fn sample_unconditional(ckpt: &Checkpoint, n: usize, seed: u64) -> Result<CodeMatrix> {
    let cfg = &ckpt.net;
    sample_with_predictor(
        |x, t, _| Ok(predict(&ckpt.params, x, t)?.probs),
        cfg.n_tokens,
        cfg.categories,
        &ckpt.schedule,
        n,
        seed,
    )
}

/// Ancestral sampling with the latent refined toward `context` at every
/// reverse step before the head produces `p(x̂_0 | x_t, c)`.
pub fn sample_guided(
    ckpt: &Checkpoint,
    context: &ContextSpec,
    n: usize,
    config: &GuidanceConfig,
    seed: u64,
) -> Result<CodeMatrix> {
    config.validate()?;
    let cfg = &ckpt.net;
    context.validate(cfg.n_tokens)?;
    let head = Head::new(&ckpt.params);
    let n_tok = cfg.n_tokens;
    sample_with_predictor(
        |x, t, ids| {
            let trace = predict(&ckpt.params, x, t)?;
            let mut probs = Vec::with_capacity(x.cats().len() * cfg.categories);
            for (b, &r) in ids.iter().enumerate() {
                let z = trace.latent.slice(s![b * n_tok..(b + 1) * n_tok, ..]);
                let mut rng = substream(seed, &[tag::LANGEVIN, r as u64, t as u64]);
                let y = langevin_refine(z, &ckpt.params, context, config, &mut rng)?;
                probs.extend(head.probs(y.view()).iter());
            }
            CategoricalField::new(x.n_records(), n_tok, cfg.categories, probs)
        },
        n_tok,
        cfg.categories,
        &ckpt.schedule,
        n,
        seed,
    )
}
