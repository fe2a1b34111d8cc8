//! Variational-bound loss through the denoiser, with parameter gradients.

use ndarray::Array2;
use rand::Rng;

use super::model::{backward, forward_steps, predict_steps, ForwardTrace};
use super::params::DenoiserParams;
use crate::diffusion::{
    kl_divergence, mixture_row, posterior_row, sample_forward_steps, token_term, Tokens, LOG_FLOOR,
};
use crate::error::{Error, Result};
use crate::schedule::Schedule;

/// Loss value and its gradient.
#[derive(Debug, Clone)]
pub struct LossGrad {
    /// `T` times the per-record term, averaged over records.
    pub loss: f64,
    pub grad: DenoiserParams,
}

/// Draw one step per record uniformly from `1..=T`, corrupt `x0` to those
/// steps and return the loss and gradient there.
pub fn loss_and_grad<R: Rng + ?Sized>(
    params: &DenoiserParams,
    x0: &Tokens,
    schedule: &Schedule,
    rng: &mut R,
) -> Result<LossGrad> {
    if x0.n_records() == 0 {
        return Err(Error::EmptyDataset);
    }
    let steps = schedule.steps();
    let ts: Vec<usize> = (0..x0.n_records()).map(|_| rng.gen_range(1..=steps)).collect();
    let x_t = sample_forward_steps(x0, &ts, schedule, rng)?;
    loss_and_grad_at(params, x0, &ts, &x_t, schedule)
}

/// Loss at per-record steps `ts` with fixed corruptions `x_t`.
pub fn loss_and_grad_at(
    params: &DenoiserParams,
    x0: &Tokens,
    ts: &[usize],
    x_t: &Tokens,
    schedule: &Schedule,
) -> Result<LossGrad> {
    let (loss, dlogits, trace) = loss_with_logit_grad(params, x0, ts, x_t, schedule)?;
    let grad = backward(params, &trace, dlogits.view())?;
    Ok(LossGrad { loss, grad })
}

/// Loss only, for validation and finite differences.
pub fn loss_at(params: &DenoiserParams, x0: &Tokens, ts: &[usize], x_t: &Tokens, schedule: &Schedule) -> Result<f64> {
    let trace = predict_steps(params, x_t, ts)?;
    let k = x0.categories();
    let mut scratch = vec![0.0; 2 * k];
    let n = x0.n_tokens();
    let mut sum = 0.0;
    for (idx, pred) in trace.probs.rows().enumerate() {
        let t = ts[idx / n];
        sum += token_term(x0.cats()[idx], x_t.cats()[idx], t, pred, schedule, &mut scratch);
    }
    Ok(schedule.steps() as f64 * sum / x0.n_records() as f64)
}

fn loss_with_logit_grad(
    params: &DenoiserParams,
    x0: &Tokens,
    ts: &[usize],
    x_t: &Tokens,
    schedule: &Schedule,
) -> Result<(f64, Array2<f64>, ForwardTrace)> {
    if x0.n_records() == 0 {
        return Err(Error::EmptyDataset);
    }
    if x0.n_records() != x_t.n_records() || x0.n_tokens() != x_t.n_tokens() || x0.categories() != x_t.categories() {
        return Err(Error::ShapeMismatch("x0 and x_t differ in shape".into()));
    }
    for &t in ts {
        if t < 1 || t > schedule.steps() {
            return Err(Error::StepOutOfRange {
                t,
                lo: 1,
                hi: schedule.steps(),
            });
        }
    }
    let trace = forward_steps(params, x_t, ts)?;
    let (n, k) = (x0.n_tokens(), x0.categories());
    let scale = schedule.steps() as f64 / x0.n_records() as f64;
    let mut dlogits = Array2::zeros((x0.n_records() * n, k));
    let (mut q, mut p, mut dmix, mut dpi) = (vec![0.0; k], vec![0.0; k], vec![0.0; k * k], vec![0.0; k]);
    let mut dz = vec![0.0; k];
    let mut sum = 0.0;
    for (idx, pred) in trace.probs.rows().enumerate() {
        let (c0, ct, t) = (x0.cats()[idx], x_t.cats()[idx], ts[idx / n]);
        dpi.iter_mut().for_each(|v| *v = 0.0);
        if t == 1 {
            let pi = pred[c0];
            sum -= pi.max(LOG_FLOOR).ln();
            if pi > LOG_FLOOR {
                dpi[c0] = -1.0 / pi;
            }
        } else {
            let keep = schedule.retention(t);
            let abar_prev = schedule.alpha_bar(t - 1);
            posterior_row(ct, c0, keep, abar_prev, &mut q);
            mixture_row(ct, pred, keep, abar_prev, &mut p, Some(&mut dmix));
            sum += kl_divergence(&q, &p);
            for j in 0..k {
                if q[j] > 0.0 && p[j] > LOG_FLOOR {
                    let g = -q[j] / p[j];
                    for c in 0..k {
                        dpi[c] += g * dmix[j * k + c];
                    }
                }
            }
        }
        super::ops::softmax_backward_row(pred, &dpi, &mut dz);
        for (o, v) in dlogits.row_mut(idx).iter_mut().zip(&dz) {
            *o = v * scale;
        }
    }
    Ok((scale * sum, dlogits, trace))
}
