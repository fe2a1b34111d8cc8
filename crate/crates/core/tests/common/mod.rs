//! Brute-force metric implementations written straight from their
//! definitions, on dense `f64` rows, for comparison with the library.

#![allow(dead_code)]

pub type Rows = Vec<Vec<f64>>;

pub fn rows(m: &d3pm_core::CodeMatrix) -> Rows {
    m.rows().map(|r| r.iter().map(|&b| f64::from(b)).collect()).collect()
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

pub fn covariance(x: &Rows) -> Rows {
    let (n, d) = (x.len() as f64, x[0].len());
    let mean: Vec<f64> = (0..d).map(|j| x.iter().map(|r| r[j]).sum::<f64>() / n).collect();
    (0..d)
        .map(|i| {
            (0..d)
                .map(|j| x.iter().map(|r| (r[i] - mean[i]) * (r[j] - mean[j])).sum::<f64>() / n)
                .collect()
        })
        .collect()
}

pub fn cmd(a: &Rows, b: &Rows) -> f64 {
    let (ca, cb) = (covariance(a), covariance(b));
    ca.iter().flatten().zip(cb.iter().flatten()).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// `None` when every pooled sample is identical.
pub fn mmd(a: &Rows, b: &Rows, m: usize) -> Option<f64> {
    let pooled: Vec<&Vec<f64>> = a.iter().chain(b).collect();
    let mut total = 0.0;
    let mut pairs = 0.0;
    for i in 0..pooled.len() {
        for j in i + 1..pooled.len() {
            total += dist2(pooled[i], pooled[j]).sqrt();
            pairs += 1.0;
        }
    }
    let avg = total / pairs;
    if avg == 0.0 {
        return None;
    }
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let mut sum = 0.0;
    for gamma in 1..=m {
        let h = avg * 2f64.powf(gamma as f64 - m as f64 / 2.0);
        let k = |x: &[f64], y: &[f64]| (-dist2(x, y) / (2.0 * h * h)).exp();
        let mut saa = 0.0;
        for i in 0..a.len() {
            for j in 0..a.len() {
                if i != j {
                    saa += k(&a[i], &a[j]);
                }
            }
        }
        let mut sbb = 0.0;
        for i in 0..b.len() {
            for j in 0..b.len() {
                if i != j {
                    sbb += k(&b[i], &b[j]);
                }
            }
        }
        let mut sab = 0.0;
        for x in a {
            for y in b {
                sab += k(x, y);
            }
        }
        sum += saa / (na * (na - 1.0)) + sbb / (nb * (nb - 1.0)) - sab / (na * nb);
    }
    Some(sum / m as f64)
}

pub fn mcad(a: &Rows, b: &Rows, bins: usize, lo: f64, hi: f64) -> f64 {
    let hist = |x: &Rows| {
        let mut h = vec![0.0; bins];
        for r in x {
            let count: f64 = r.iter().sum();
            let mut bin = ((count - lo) / (hi - lo) * bins as f64).floor() as i64;
            bin = bin.clamp(0, bins as i64 - 1);
            h[bin as usize] += 1.0 / x.len() as f64;
        }
        h
    };
    let (ha, hb) = (hist(a), hist(b));
    ha.iter().zip(&hb).map(|(x, y)| (x - y).abs()).sum::<f64>() / 2.0
}

/// Mean rank by counting: `#smaller + (#equal + 1) / 2`.
fn ranks(v: &[f64]) -> Vec<f64> {
    v.iter()
        .map(|x| {
            let less = v.iter().filter(|y| *y < x).count() as f64;
            let equal = v.iter().filter(|y| *y == x).count() as f64;
            less + (equal + 1.0) / 2.0
        })
        .collect()
}

pub fn spearman(u: &[f64], v: &[f64]) -> f64 {
    let (ru, rv) = (ranks(u), ranks(v));
    let n = u.len() as f64;
    let (mu, mv) = (ru.iter().sum::<f64>() / n, rv.iter().sum::<f64>() / n);
    let cov: f64 = ru.iter().zip(&rv).map(|(a, b)| (a - mu) * (b - mv)).sum();
    let su: f64 = ru.iter().map(|a| (a - mu).powi(2)).sum();
    let sv: f64 = rv.iter().map(|b| (b - mv).powi(2)).sum();
    cov / (su * sv).sqrt()
}

pub fn auroc(scores: &[f64], labels: &[u8]) -> f64 {
    let mut wins = 0.0;
    let mut pairs = 0.0;
    for (i, &yi) in labels.iter().enumerate() {
        for (j, &yj) in labels.iter().enumerate() {
            if yi == 1 && yj == 0 {
                pairs += 1.0;
                if scores[i] > scores[j] {
                    wins += 1.0;
                } else if scores[i] == scores[j] {
                    wins += 0.5;
                }
            }
        }
    }
    wins / pairs
}

pub fn auprc(scores: &[f64], labels: &[u8]) -> f64 {
    // rank of i: items scoring higher, plus equal-scoring items with lower index
    let n = scores.len();
    let rank = |i: usize| (0..n).filter(|&j| scores[j] > scores[i] || (scores[j] == scores[i] && j < i)).count() + 1;
    let pos: Vec<usize> = (0..n).filter(|&i| labels[i] == 1).collect();
    pos.iter()
        .map(|&i| {
            let r = rank(i);
            let hits = pos.iter().filter(|&&j| rank(j) <= r).count();
            hits as f64 / r as f64
        })
        .sum::<f64>()
        / pos.len() as f64
}
