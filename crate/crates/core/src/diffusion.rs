//! Multinomial forward process, its exact posterior, the learned reverse
//! mixture and the terms of the variational bound.
//!
//! All distributions factorize over tokens. With `K` categories, uniform
//! noise `u = 1/K`, retention `b` and cumulative retention `a`:
//!
//! * one step:   `q(x_t = j | x_{t-1}) = b [j = x_{t-1}] + (1 - b) u`
//! * marginal:   `q(x_t = j | x_0)     = a [j = x_0]     + (1 - a) u`
//! * posterior:  `q(x_{t-1} = j | x_t, x_0) ∝ q(x_t | x_{t-1} = j) q(x_{t-1} = j | x_0)`

use rand::Rng;

use crate::codes::{bit_to_category, CodeMatrix, ABSENT, PRESENT};
use crate::error::{Error, Result};
use crate::schedule::Schedule;

/// Floor applied inside logarithms.
pub const LOG_FLOOR: f64 = 1e-12;

/// One-hot tokens stored as category indices, `n_records x n_tokens`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Tokens {
    n_records: usize,
    n_tokens: usize,
    categories: usize,
    cats: Vec<usize>,
}

impl Tokens {
    pub fn new(n_records: usize, n_tokens: usize, categories: usize, cats: Vec<usize>) -> Result<Self> {
        if cats.len() != n_records * n_tokens {
            return Err(Error::ShapeMismatch(format!(
                "{} categories for {}x{} tokens",
                cats.len(),
                n_records,
                n_tokens
            )));
        }
        if categories < 2 {
            return Err(Error::NotOneHot(format!("need at least 2 categories, got {categories}")));
        }
        if let Some(c) = cats.iter().find(|&&c| c >= categories) {
            return Err(Error::NotOneHot(format!("category {c} >= {categories}")));
        }
        Ok(Self {
            n_records,
            n_tokens,
            categories,
            cats,
        })
    }

    /// Parse a dense one-hot tensor laid out `[record][token][category]`.
    pub fn from_one_hot(values: &[f64], n_records: usize, n_tokens: usize, categories: usize) -> Result<Self> {
        if values.len() != n_records * n_tokens * categories {
            return Err(Error::ShapeMismatch(format!(
                "{} values for a {}x{}x{} one-hot tensor",
                values.len(),
                n_records,
                n_tokens,
                categories
            )));
        }
        let mut cats = Vec::with_capacity(n_records * n_tokens);
        for (idx, row) in values.chunks_exact(categories).enumerate() {
            let mut hot = None;
            for (j, &v) in row.iter().enumerate() {
                if v == 1.0 {
                    if hot.is_some() {
                        return Err(Error::NotOneHot(format!("token {idx} has several ones")));
                    }
                    hot = Some(j);
                } else if v != 0.0 {
                    return Err(Error::NotOneHot(format!("token {idx} holds {v}")));
                }
            }
            cats.push(hot.ok_or_else(|| Error::NotOneHot(format!("token {idx} is all zero")))?);
        }
        Self::new(n_records, n_tokens, categories, cats)
    }

    pub fn to_one_hot(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.cats.len() * self.categories];
        for (idx, &c) in self.cats.iter().enumerate() {
            out[idx * self.categories + c] = 1.0;
        }
        out
    }

    /// Binary tokens of a code matrix (presence is category 0).
    pub fn from_codes(m: &CodeMatrix) -> Self {
        Self {
            n_records: m.n_records(),
            n_tokens: m.n_codes(),
            categories: 2,
            cats: m.bits().iter().map(|&b| bit_to_category(b)).collect(),
        }
    }

    /// Decode binary tokens back to presence bits.
    pub fn to_codes(&self) -> Result<CodeMatrix> {
        if self.categories != 2 {
            return Err(Error::ShapeMismatch(format!(
                "only binary tokens decode to codes, have {} categories",
                self.categories
            )));
        }
        let bits = self
            .cats
            .iter()
            .map(|&c| if c == PRESENT { 1 } else { debug_assert_eq!(c, ABSENT); 0 })
            .collect();
        CodeMatrix::new(self.n_records, self.n_tokens, bits)
    }

    pub fn n_records(&self) -> usize {
        self.n_records
    }

    pub fn n_tokens(&self) -> usize {
        self.n_tokens
    }

    pub fn categories(&self) -> usize {
        self.categories
    }

    pub fn cats(&self) -> &[usize] {
        &self.cats
    }

    #[inline]
    pub fn get(&self, r: usize, i: usize) -> usize {
        self.cats[r * self.n_tokens + i]
    }

    pub fn record(&self, r: usize) -> &[usize] {
        &self.cats[r * self.n_tokens..(r + 1) * self.n_tokens]
    }

    pub fn select_records(&self, indices: &[usize]) -> Tokens {
        let mut cats = Vec::with_capacity(indices.len() * self.n_tokens);
        for &r in indices {
            cats.extend_from_slice(self.record(r));
        }
        Tokens {
            n_records: indices.len(),
            n_tokens: self.n_tokens,
            categories: self.categories,
            cats,
        }
    }

    fn same_shape(&self, other: &Tokens) -> Result<()> {
        if (self.n_records, self.n_tokens, self.categories)
            != (other.n_records, other.n_tokens, other.categories)
        {
            return Err(Error::ShapeMismatch(format!(
                "tokens {}x{}x{} vs {}x{}x{}",
                self.n_records, self.n_tokens, self.categories, other.n_records, other.n_tokens, other.categories
            )));
        }
        Ok(())
    }
}

/// Per-record, per-token probability vectors over `K` categories.
#[derive(Debug, Clone, PartialEq)]
pub struct CategoricalField {
    n_records: usize,
    n_tokens: usize,
    categories: usize,
    probs: Vec<f64>,
}

impl CategoricalField {
    pub fn new(n_records: usize, n_tokens: usize, categories: usize, probs: Vec<f64>) -> Result<Self> {
        if probs.len() != n_records * n_tokens * categories {
            return Err(Error::ShapeMismatch(format!(
                "{} probabilities for a {}x{}x{} field",
                probs.len(),
                n_records,
                n_tokens,
                categories
            )));
        }
        Ok(Self {
            n_records,
            n_tokens,
            categories,
            probs,
        })
    }

    pub fn zeros(n_records: usize, n_tokens: usize, categories: usize) -> Self {
        Self {
            n_records,
            n_tokens,
            categories,
            probs: vec![0.0; n_records * n_tokens * categories],
        }
    }

    pub fn n_records(&self) -> usize {
        self.n_records
    }

    pub fn n_tokens(&self) -> usize {
        self.n_tokens
    }

    pub fn categories(&self) -> usize {
        self.categories
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.probs
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.probs
    }

    #[inline]
    pub fn row(&self, r: usize, i: usize) -> &[f64] {
        let o = (r * self.n_tokens + i) * self.categories;
        &self.probs[o..o + self.categories]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize, i: usize) -> &mut [f64] {
        let o = (r * self.n_tokens + i) * self.categories;
        &mut self.probs[o..o + self.categories]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.probs.chunks_exact(self.categories)
    }

    /// Largest deviation of any row sum from 1, or infinity for a negative
    /// or non-finite entry.
    pub fn max_normalization_error(&self) -> f64 {
        self.rows()
            .map(|row| {
                if row.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
                    f64::INFINITY
                } else {
                    (row.iter().sum::<f64>() - 1.0).abs()
                }
            })
            .fold(0.0, f64::max)
    }

    fn check_matches(&self, x: &Tokens) -> Result<()> {
        if (self.n_records, self.n_tokens, self.categories) != (x.n_records, x.n_tokens, x.categories) {
            return Err(Error::ShapeMismatch(format!(
                "field {}x{}x{} vs tokens {}x{}x{}",
                self.n_records, self.n_tokens, self.categories, x.n_records, x.n_tokens, x.categories
            )));
        }
        Ok(())
    }
}

/// Breakdown of the single-step estimate of the negative variational bound.
/// Values are summed over tokens and averaged over records.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ElboBreakdown {
    /// Reconstruction term `-log p(x_0 | x_1)`, non-zero only when `t = 1`.
    pub l0: f64,
    /// `KL(q(x_{t-1} | x_t, x_0) || p(x_{t-1} | x_t))`, non-zero only when `t >= 2`.
    pub lt: f64,
    /// `KL(q(x_T | x_0) || uniform)`; reported, never differentiated.
    pub lt_prior: f64,
    pub t_sampled: usize,
    /// `T` times the term at the sampled step.
    pub total_negative_elbo: f64,
}

// ---------------------------------------------------------------------------
// per-token kernels

#[inline]
pub(crate) fn kernel_row(prev: usize, keep: f64, out: &mut [f64]) {
    let u = (1.0 - keep) / out.len() as f64;
    out.iter_mut().for_each(|p| *p = u);
    out[prev] += keep;
}

/// Posterior row `q(x_{t-1} | x_t = xt, x_0 = x0)`.
#[inline]
pub(crate) fn posterior_row(xt: usize, x0: usize, keep: f64, abar_prev: f64, out: &mut [f64]) {
    let k = out.len() as f64;
    let ua = (1.0 - keep) / k;
    let ub = (1.0 - abar_prev) / k;
    let mut z = 0.0;
    for (j, p) in out.iter_mut().enumerate() {
        let a = if j == xt { keep + ua } else { ua };
        let b = if j == x0 { abar_prev + ub } else { ub };
        *p = a * b;
        z += *p;
    }
    out.iter_mut().for_each(|p| *p /= z);
}

/// Reverse-step distribution `Σ_c q(x_{t-1} | x_t, x_0 = c) π_c` for one
/// token, written in `O(K)` using the closed form of the posterior
/// normalizer `Z_c = abar_prev a_c + (1 - abar_prev)/K`.
///
/// When `dpred` is given it receives `∂out_j/∂π_c` as a row-major `K x K`
/// matrix indexed `[j][c]`.
#[inline]
pub(crate) fn mixture_row(
    xt: usize,
    pred: &[f64],
    keep: f64,
    abar_prev: f64,
    out: &mut [f64],
    dpred: Option<&mut [f64]>,
) {
    let kk = pred.len();
    let k = kk as f64;
    let ua = (1.0 - keep) / k;
    let ub = (1.0 - abar_prev) / k;
    let a = |j: usize| if j == xt { keep + ua } else { ua };
    let z = |c: usize| abar_prev * a(c) + ub;
    let mut shared = 0.0;
    for (c, &pc) in pred.iter().enumerate() {
        shared += pc / z(c);
    }
    shared *= ub;
    for (j, o) in out.iter_mut().enumerate() {
        *o = a(j) * (abar_prev * pred[j] / z(j) + shared);
    }
    if let Some(d) = dpred {
        for j in 0..kk {
            let aj = a(j);
            for c in 0..kk {
                let b = if j == c { abar_prev + ub } else { ub };
                d[j * kk + c] = aj * b / z(c);
            }
        }
    }
}

/// `KL(q || p)` in nats with `0 log 0 = 0` and a floor inside the logs.
#[inline]
pub fn kl_divergence(q: &[f64], p: &[f64]) -> f64 {
    q.iter()
        .zip(p)
        .filter(|(&qj, _)| qj > 0.0)
        .map(|(&qj, &pj)| qj * (qj.max(LOG_FLOOR).ln() - pj.max(LOG_FLOOR).ln()))
        .sum()
}

/// Draw a category by inverse CDF from a uniform `u` in `[0, 1)`.
#[inline]
pub(crate) fn draw_category(probs: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (j, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return j;
        }
    }
    // rounding left `u` above the total; fall back to the last category with mass
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(probs.len() - 1)
}

fn check_fraction(name: &str, v: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&v) {
        return Err(Error::InvalidScheduleParams(format!("{name} = {v} outside [0, 1]")));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// public operations

/// One forward step `q(x_t | x_{t-1})` with retention `keep`.
pub fn forward_kernel(x_prev: &Tokens, keep: f64) -> Result<CategoricalField> {
    check_fraction("retention", keep)?;
    let mut f = CategoricalField::zeros(x_prev.n_records, x_prev.n_tokens, x_prev.categories);
    for (row, &c) in f.probs.chunks_exact_mut(x_prev.categories).zip(&x_prev.cats) {
        kernel_row(c, keep, row);
    }
    Ok(f)
}

/// Closed-form marginal `q(x_t | x_0)` with cumulative retention `alpha_bar`.
pub fn forward_marginal(x0: &Tokens, alpha_bar: f64) -> Result<CategoricalField> {
    check_fraction("alpha_bar", alpha_bar)?;
    // same algebraic form as a single step
    forward_kernel(x0, alpha_bar)
}

/// Sample `x_t ~ q(x_t | x_0)` independently per token.
pub fn sample_forward<R: Rng + ?Sized>(x0: &Tokens, t: usize, schedule: &Schedule, rng: &mut R) -> Result<Tokens> {
    sample_forward_steps(x0, &vec![t; x0.n_records], schedule, rng)
}

/// [`sample_forward`] with a step per record. Draws one uniform per token in
/// record-major order.
pub fn sample_forward_steps<R: Rng + ?Sized>(
    x0: &Tokens,
    ts: &[usize],
    schedule: &Schedule,
    rng: &mut R,
) -> Result<Tokens> {
    if ts.len() != x0.n_records {
        return Err(Error::ShapeMismatch(format!("{} steps for {} records", ts.len(), x0.n_records)));
    }
    for &t in ts {
        schedule.check_step(t, 1)?;
    }
    let mut row = vec![0.0; x0.categories];
    let n = x0.n_tokens;
    let cats = x0
        .cats
        .iter()
        .enumerate()
        .map(|(idx, &c)| {
            kernel_row(c, schedule.alpha_bar(ts[idx / n]), &mut row);
            draw_category(&row, rng.gen::<f64>())
        })
        .collect();
    Ok(Tokens { cats, ..x0.clone() })
}

/// Exact posterior `q(x_{t-1} | x_t, x_0)` for `2 <= t <= T`.
pub fn posterior(x_t: &Tokens, x0: &Tokens, t: usize, schedule: &Schedule) -> Result<CategoricalField> {
    schedule.check_step(t, 2)?;
    x_t.same_shape(x0)?;
    let keep = schedule.retention(t);
    let abar_prev = schedule.alpha_bar(t - 1);
    let mut f = CategoricalField::zeros(x_t.n_records, x_t.n_tokens, x_t.categories);
    for ((row, &xt), &x0c) in f.probs.chunks_exact_mut(x_t.categories).zip(&x_t.cats).zip(&x0.cats) {
        posterior_row(xt, x0c, keep, abar_prev, row);
    }
    Ok(f)
}

/// Learned reverse step `p(x_{t-1} | x_t) = Σ_c q(x_{t-1} | x_t, c) p(x̂_0 = c | x_t)`.
pub fn reverse_mixture(
    x_t: &Tokens,
    predictor: &CategoricalField,
    t: usize,
    schedule: &Schedule,
) -> Result<CategoricalField> {
    schedule.check_step(t, 2)?;
    predictor.check_matches(x_t)?;
    for row in predictor.rows() {
        let sum: f64 = row.iter().sum();
        if (sum - 1.0).abs() > 1e-6 || row.iter().any(|&p| p < 0.0) {
            return Err(Error::UnnormalizedPredictor { sum });
        }
    }
    let keep = schedule.retention(t);
    let abar_prev = schedule.alpha_bar(t - 1);
    let k = x_t.categories;
    let mut f = CategoricalField::zeros(x_t.n_records, x_t.n_tokens, k);
    for ((out, pred), &xt) in f.probs.chunks_exact_mut(k).zip(predictor.rows()).zip(&x_t.cats) {
        mixture_row(xt, pred, keep, abar_prev, out, None);
    }
    Ok(f)
}

/// `Σ_tokens KL(q(x_T | x_0) || uniform)`, averaged over records.
pub fn prior_kl(x0: &Tokens, schedule: &Schedule) -> f64 {
    let k = x0.categories;
    let uniform = vec![1.0 / k as f64; k];
    let mut row = vec![0.0; k];
    let abar = schedule.alpha_bar(schedule.steps());
    let total: f64 = x0
        .cats
        .iter()
        .map(|&c| {
            kernel_row(c, abar, &mut row);
            kl_divergence(&row, &uniform)
        })
        .sum();
    total / x0.n_records.max(1) as f64
}

/// Loss term at step `t` for one token, given the predictor row.
#[inline]
pub(crate) fn token_term(x0: usize, xt: usize, t: usize, pred: &[f64], schedule: &Schedule, scratch: &mut [f64]) -> f64 {
    if t == 1 {
        -pred[x0].max(LOG_FLOOR).ln()
    } else {
        let k = pred.len();
        let (q, p) = scratch[..2 * k].split_at_mut(k);
        let keep = schedule.retention(t);
        let abar_prev = schedule.alpha_bar(t - 1);
        posterior_row(xt, x0, keep, abar_prev, q);
        mixture_row(xt, pred, keep, abar_prev, p, None);
        kl_divergence(q, p)
    }
}

/// Single-step estimate of the negative variational bound for a batch that
/// shares the sampled step `t`.
pub fn elbo_loss(
    x0: &Tokens,
    t: usize,
    x_t: &Tokens,
    predictor: &CategoricalField,
    schedule: &Schedule,
) -> Result<ElboBreakdown> {
    schedule.check_step(t, 1)?;
    x0.same_shape(x_t)?;
    predictor.check_matches(x0)?;
    let k = x0.categories;
    let mut scratch = vec![0.0; 2 * k];
    let mut sum = 0.0;
    for ((&c0, &ct), pred) in x0.cats.iter().zip(&x_t.cats).zip(predictor.rows()) {
        sum += token_term(c0, ct, t, pred, schedule, &mut scratch);
    }
    let term = sum / x0.n_records.max(1) as f64;
    let (l0, lt) = if t == 1 { (term, 0.0) } else { (0.0, term) };
    Ok(ElboBreakdown {
        l0,
        lt,
        lt_prior: prior_kl(x0, schedule),
        t_sampled: t,
        total_negative_elbo: schedule.steps() as f64 * term,
    })
}
