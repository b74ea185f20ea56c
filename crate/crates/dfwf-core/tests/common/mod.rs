//! Shared oracles for the integration and acceptance suites.
//!
//! Everything here is an independent re-derivation of the quantity it
//! checks: plain nested loops in f64, no calls into the engine's forward or
//! backward paths.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use dfwf_core::metrics::{Label, ScoreRecord};
use dfwf_core::tensor::Tensor;

// ----- value oracles --------------------------------------------------------

/// Triple-loop matrix product plus bias.
pub fn naive_linear(x: &[f64], w: &[f64], b: Option<&[f64]>, n: usize, d: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        for j in 0..m {
            let mut acc = 0.0;
            for k in 0..d {
                acc += x[i * d + k] * w[k * m + j];
            }
            if let Some(b) = b {
                acc += b[j];
            }
            out[i * m + j] = acc;
        }
    }
    out
}

/// Direct cross-correlation with zero padding.
#[allow(clippy::too_many_arguments)]
pub fn naive_conv2d(
    x: &[f64],
    k: &[f64],
    b: Option<&[f64]>,
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    stride: (usize, usize),
    padding: (usize, usize),
) -> (Vec<f64>, usize, usize) {
    let ho = (h + 2 * padding.0 - kh) / stride.0 + 1;
    let wo = (w + 2 * padding.1 - kw) / stride.1 + 1;
    let mut out = vec![0.0; n * cout * ho * wo];
    for bi in 0..n {
        for oc in 0..cout {
            for i in 0..ho {
                for j in 0..wo {
                    let mut acc = b.map(|b| b[oc]).unwrap_or(0.0);
                    for ic in 0..cin {
                        for u in 0..kh {
                            for v in 0..kw {
                                let xi = (i * stride.0 + u) as isize - padding.0 as isize;
                                let xj = (j * stride.1 + v) as isize - padding.1 as isize;
                                if xi < 0 || xj < 0 || xi as usize >= h || xj as usize >= w {
                                    continue;
                                }
                                acc += x[((bi * cin + ic) * h + xi as usize) * w + xj as usize]
                                    * k[((oc * cin + ic) * kh + u) * kw + v];
                            }
                        }
                    }
                    out[((bi * cout + oc) * ho + i) * wo + j] = acc;
                }
            }
        }
    }
    (out, ho, wo)
}

pub fn naive_softmax_rows(z: &[f64], n: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * k];
    for i in 0..n {
        let row = &z[i * k..(i + 1) * k];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|&v| (v - m).exp()).collect();
        let s: f64 = exps.iter().sum();
        for j in 0..k {
            out[i * k + j] = exps[j] / s;
        }
    }
    out
}

// ----- finite-difference gradient checking ----------------------------------

/// A scalar-valued function of a flat parameter vector, evaluated in f64.
pub type ScalarFn<'a> = dyn Fn(&[f64]) -> f64 + 'a;

/// Central finite differences of `f` at `theta`.
pub fn finite_difference_grad(f: &ScalarFn, theta: &[f64], eps: f64) -> Vec<f64> {
    let mut grad = vec![0.0; theta.len()];
    let mut work = theta.to_vec();
    for i in 0..theta.len() {
        let orig = work[i];
        work[i] = orig + eps;
        let fp = f(&work);
        work[i] = orig - eps;
        let fm = f(&work);
        work[i] = orig;
        grad[i] = (fp - fm) / (2.0 * eps);
    }
    grad
}

/// Largest mixed relative error between analytic and finite-difference
/// gradients: `|a - f| / max(|a|, |f|, 1)`.
pub fn max_grad_error(analytic: &[f64], fd: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(fd)
        .map(|(&a, &f)| (a - f).abs() / a.abs().max(f.abs()).max(1.0))
        .fold(0.0, f64::max)
}

pub fn random_vec(rng: &mut ChaCha8Rng, len: usize, scale: f64) -> Vec<f64> {
    (0..len).map(|_| (rng.gen::<f64>() * 2.0 - 1.0) * scale).collect()
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let len = shape.iter().product();
    Tensor::from_vec(shape, random_vec(rng, len, scale)).unwrap()
}

/// Random probability rows (strictly positive, summing to 1).
pub fn random_prob_rows(rng: &mut ChaCha8Rng, n: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * k];
    for i in 0..n {
        let mut s = 0.0;
        for j in 0..k {
            out[i * k + j] = rng.gen::<f64>() + 0.05;
            s += out[i * k + j];
        }
        for j in 0..k {
            out[i * k + j] /= s;
        }
    }
    out
}

// ----- EER oracle -----------------------------------------------------------

/// Brute-force EER: enumerate every threshold (all scores plus midpoints and
/// sentinels), walk the records at each one, and interpolate at the first
/// sign change of `FRR - FAR`. Independent of the production sweep.
pub fn brute_force_eer(records: &[ScoreRecord]) -> f64 {
    let n_genuine = records.iter().filter(|r| r.label == Label::Genuine).count();
    let n_spoof = records.len() - n_genuine;
    assert!(n_genuine > 0 && n_spoof > 0);

    let mut scores: Vec<f64> = records.iter().map(|r| r.score).collect();
    scores.sort_by(|a, b| a.partial_cmp(b).unwrap());
    scores.dedup();
    let mut thresholds = vec![scores[0] - 1.0];
    for i in 0..scores.len() {
        thresholds.push(scores[i]);
        if i + 1 < scores.len() {
            thresholds.push((scores[i] + scores[i + 1]) / 2.0);
        }
    }
    thresholds.push(scores[scores.len() - 1] + 1.0);

    let op = |t: f64| {
        let fa = records
            .iter()
            .filter(|r| r.label == Label::Spoof && r.score > t)
            .count() as f64
            / n_spoof as f64;
        let fr = records
            .iter()
            .filter(|r| r.label == Label::Genuine && r.score <= t)
            .count() as f64
            / n_genuine as f64;
        (fa, fr)
    };

    let (mut prev_far, mut prev_frr) = op(thresholds[0]);
    assert!(prev_frr < prev_far, "sweep must start below the crossing");
    for &t in &thresholds[1..] {
        let (far, frr) = op(t);
        if frr >= far {
            let d_prev = prev_frr - prev_far;
            let d_cur = frr - far;
            if d_cur == d_prev {
                return far;
            }
            let u = -d_prev / (d_cur - d_prev);
            return prev_far + u * (far - prev_far);
        }
        prev_far = far;
        prev_frr = frr;
    }
    unreachable!("brute-force sweep must cross");
}

pub fn random_records(rng: &mut ChaCha8Rng, n_genuine: usize, n_spoof: usize) -> Vec<ScoreRecord> {
    let mut records = Vec::new();
    for i in 0..n_genuine {
        records.push(ScoreRecord {
            utt_id: format!("g{i}"),
            label: Label::Genuine,
            score: rng.gen_range(-3.0..3.0),
        });
    }
    for i in 0..n_spoof {
        records.push(ScoreRecord {
            utt_id: format!("s{i}"),
            label: Label::Spoof,
            score: rng.gen_range(-3.0..3.0),
        });
    }
    records
}
