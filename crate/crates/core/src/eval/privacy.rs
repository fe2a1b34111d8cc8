use rand::seq::index::sample;
use rand::Rng;

use super::packed::PackedRows;
use crate::codes::{prevalence, CodeMatrix};
use crate::error::{Error, Result};

/// `2tp / (2tp + fp + fn)`, defined as 0 when there is nothing to count.
fn f1(tp: usize, fp: usize, fn_: usize) -> f64 {
    let denom = 2 * tp + fp + fn_;
    if denom == 0 {
        0.0
    } else {
        2.0 * tp as f64 / denom as f64
    }
}

/// Uniformly random set of `count` code indices, ascending.
pub fn sample_exposed<R: Rng + ?Sized>(n_codes: usize, count: usize, rng: &mut R) -> Result<Vec<usize>> {
    if count >= n_codes {
        return Err(Error::ExposedTooLarge {
            exposed: count,
            n_codes,
        });
    }
    let mut v = sample(rng, n_codes, count).into_vec();
    v.sort_unstable();
    Ok(v)
}

/// Attribute inference by a 1-nearest-neighbour attacker.
///
/// For each real record the attacker finds the synthetic record closest in
/// Hamming distance on the `exposed` codes (lowest index on ties) and copies
/// its hidden codes. Returns the F1 of each hidden code averaged with
/// weights proportional to the code's real prevalence.
pub fn attribute_inference_risk(real: &CodeMatrix, synth: &CodeMatrix, exposed: &[usize]) -> Result<f64> {
    let n = real.n_codes();
    if synth.n_codes() != n {
        return Err(Error::ShapeMismatch(format!("{} vs {} codes", n, synth.n_codes())));
    }
    if synth.n_records() == 0 || real.n_records() == 0 {
        return Err(Error::EmptyMatrix);
    }
    if exposed.len() >= n {
        return Err(Error::ExposedTooLarge {
            exposed: exposed.len(),
            n_codes: n,
        });
    }
    let mut is_exposed = vec![false; n];
    for &e in exposed {
        if e >= n {
            return Err(Error::IndexOutOfRange { index: e, n_codes: n });
        }
        if std::mem::replace(&mut is_exposed[e], true) {
            return Err(Error::InvalidConfig(format!("code {e} exposed twice")));
        }
    }
    let hidden: Vec<usize> = (0..n).filter(|&i| !is_exposed[i]).collect();
    let (pr, ps) = (PackedRows::with_columns(real, exposed), PackedRows::with_columns(synth, exposed));
    let mut counts = vec![(0usize, 0usize, 0usize); hidden.len()];
    for r in 0..real.n_records() {
        let mut best = (u32::MAX, 0);
        for s in 0..synth.n_records() {
            let d = PackedRows::hamming(pr.row(r), ps.row(s));
            if d < best.0 {
                best = (d, s);
            }
        }
        let (truth, guess) = (real.row(r), synth.row(best.1));
        for (c, &h) in counts.iter_mut().zip(&hidden) {
            match (truth[h], guess[h]) {
                (1, 1) => c.0 += 1,
                (0, 1) => c.1 += 1,
                (1, 0) => c.2 += 1,
                _ => {}
            }
        }
    }
    let prev = prevalence(real)?;
    let total: f64 = hidden.iter().map(|&h| prev[h]).sum();
    if total == 0.0 {
        return Ok(0.0);
    }
    Ok(hidden
        .iter()
        .zip(&counts)
        .map(|(&h, &(tp, fp, fn_))| prev[h] / total * f1(tp, fp, fn_))
        .sum())
}

/// Membership inference by distance threshold: a real record is called a
/// training member when its L2 distance to the nearest synthetic record is
/// strictly below `threshold`. Returns the F1 of those calls against the
/// true train/holdout labels.
pub fn membership_inference_risk(
    train: &CodeMatrix,
    holdout: &CodeMatrix,
    synth: &CodeMatrix,
    threshold: f64,
) -> Result<f64> {
    let n = synth.n_codes();
    if train.n_codes() != n || holdout.n_codes() != n {
        return Err(Error::ShapeMismatch(format!(
            "train {}, holdout {}, synth {} codes",
            train.n_codes(),
            holdout.n_codes(),
            n
        )));
    }
    if train.n_records() == 0 || holdout.n_records() == 0 || synth.n_records() == 0 {
        return Err(Error::EmptyMatrix);
    }
    let ps = PackedRows::new(synth);
    let called = |m: &CodeMatrix| -> usize {
        let pm = PackedRows::new(m);
        (0..m.n_records())
            .filter(|&r| {
                let d2 = (0..ps.len()).map(|s| PackedRows::hamming(pm.row(r), ps.row(s))).min().unwrap_or(u32::MAX);
                (d2 as f64).sqrt() < threshold
            })
            .count()
    };
    let tp = called(train);
    let fp = called(holdout);
    Ok(f1(tp, fp, train.n_records() - tp))
}
