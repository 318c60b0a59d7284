//! Connectionist Temporal Classification: loss with exact gradients and
//! best-path decoding.
//!
//! The loss runs the forward recursion over the blank-interleaved target in
//! log space, and the backward recursion to obtain per-frame label
//! occupancies. Label 0 is the blank.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const BLANK: usize = 0;

/// Tolerance on `Σ exp(log_probs[t])` for a row to count as normalized.
pub const NORMALIZATION_TOL: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct CtcOutput {
    /// `-ln p(target | log_probs)`
    pub loss: f64,
    /// `∂loss/∂log_probs`, row-major `[T×V]`.
    pub grad: Vec<f64>,
}

#[inline]
fn lse2(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// Number of adjacent equal labels; each one forces an extra blank frame.
pub fn repeat_count(target: &[usize]) -> usize {
    target.windows(2).filter(|w| w[0] == w[1]).count()
}

/// Minimum number of frames a CTC path needs to emit `target`.
pub fn min_frames(target: &[usize]) -> usize {
    target.len() + repeat_count(target)
}

/// Checks a `[T×V]` log-probability matrix and a label sequence.
fn validate(log_probs: &Tensor, target: &[usize]) -> Result<(usize, usize)> {
    let (t, v) = match log_probs.shape() {
        [t, v] => (*t, *v),
        s => {
            return Err(Error::Dimension(format!(
                "ctc expects [T×V] log probabilities, got {s:?}"
            )))
        }
    };
    if v < 2 {
        return Err(Error::Dimension(format!(
            "ctc needs a blank plus at least one label, got V={v}"
        )));
    }
    if target.is_empty() {
        return Err(Error::Input("ctc target must contain at least one label".into()));
    }
    for &id in target {
        if id == BLANK {
            return Err(Error::Input("blank may not appear in a ctc target".into()));
        }
        if id >= v {
            return Err(Error::Vocabulary { id, size: v });
        }
    }
    for r in 0..t {
        let row = log_probs.row(r);
        if row.iter().any(|x| x.is_nan() || *x == f64::INFINITY) {
            return Err(Error::Input(format!("frame {r} has non-finite log probabilities")));
        }
        let total: f64 = row.iter().map(|x| x.exp()).sum();
        if (total - 1.0).abs() > NORMALIZATION_TOL {
            return Err(Error::Input(format!(
                "frame {r} probabilities sum to {total}, not 1"
            )));
        }
    }
    let need = min_frames(target);
    if t < need {
        return Err(Error::InfeasibleAlignment {
            frames: t,
            labels: target.len(),
            repeats: repeat_count(target),
        });
    }
    Ok((t, v))
}

/// Negative log-likelihood of `target` and its gradient with respect to
/// every entry of `log_probs`.
pub fn ctc_loss(log_probs: &Tensor, target: &[usize]) -> Result<CtcOutput> {
    let (t_len, v) = validate(log_probs, target)?;
    let lp = log_probs.data();
    let s_len = 2 * target.len() + 1;
    let ext: Vec<usize> = (0..s_len)
        .map(|s| if s % 2 == 0 { BLANK } else { target[s / 2] })
        .collect();
    // l'_s may be reached from l'_{s-2} when it is a label different from it
    let skip: Vec<bool> = (0..s_len)
        .map(|s| s >= 2 && ext[s] != BLANK && ext[s] != ext[s - 2])
        .collect();

    let ninf = f64::NEG_INFINITY;
    let mut alpha = vec![ninf; t_len * s_len];
    alpha[0] = lp[ext[0]];
    alpha[1] = lp[ext[1]];
    for t in 1..t_len {
        let (prev, cur) = alpha.split_at_mut(t * s_len);
        let prev = &prev[(t - 1) * s_len..];
        let row = &lp[t * v..(t + 1) * v];
        for s in 0..s_len {
            let mut acc = prev[s];
            if s >= 1 {
                acc = lse2(acc, prev[s - 1]);
            }
            if skip[s] {
                acc = lse2(acc, prev[s - 2]);
            }
            cur[s] = if acc == ninf { ninf } else { acc + row[ext[s]] };
        }
    }
    let last = (t_len - 1) * s_len;
    let log_p = lse2(alpha[last + s_len - 1], alpha[last + s_len - 2]);
    if log_p == ninf {
        return Err(Error::InfeasibleAlignment {
            frames: t_len,
            labels: target.len(),
            repeats: repeat_count(target),
        });
    }

    let mut beta = vec![ninf; t_len * s_len];
    let row = &lp[last / s_len * v..];
    beta[last + s_len - 1] = row[ext[s_len - 1]];
    beta[last + s_len - 2] = row[ext[s_len - 2]];
    for t in (0..t_len - 1).rev() {
        let (cur, next) = beta.split_at_mut((t + 1) * s_len);
        let cur = &mut cur[t * s_len..];
        let row = &lp[t * v..(t + 1) * v];
        for s in 0..s_len {
            let mut acc = next[s];
            if s + 1 < s_len {
                acc = lse2(acc, next[s + 1]);
            }
            if s + 2 < s_len && skip[s + 2] {
                acc = lse2(acc, next[s + 2]);
            }
            cur[s] = if acc == ninf { ninf } else { acc + row[ext[s]] };
        }
    }

    // alpha and beta both include the emission at t, so divide it out once.
    let mut grad = vec![0.0; t_len * v];
    for t in 0..t_len {
        for s in 0..s_len {
            let a = alpha[t * s_len + s];
            let b = beta[t * s_len + s];
            if a == ninf || b == ninf {
                continue;
            }
            let k = ext[s];
            grad[t * v + k] -= (a + b - lp[t * v + k] - log_p).exp();
        }
    }
    Ok(CtcOutput { loss: -log_p, grad })
}

/// Log-probability of `target` summed over all CTC paths.
pub fn ctc_log_likelihood(log_probs: &Tensor, target: &[usize]) -> Result<f64> {
    ctc_loss(log_probs, target).map(|o| -o.loss)
}

/// Best-path decoding: per-frame argmax, merge repeats, drop blanks.
pub fn greedy_decode(log_probs: &Tensor) -> Vec<usize> {
    let v = log_probs.cols();
    let frames = log_probs.data().chunks(v).map(|row| {
        row.iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (i, &x)| {
                if x > best.1 {
                    (i, x)
                } else {
                    best
                }
            })
            .0
    });
    collapse(frames)
}

/// Collapses a frame-level path into its label sequence.
pub fn collapse(path: impl IntoIterator<Item = usize>) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = None;
    for k in path {
        if Some(k) != prev && k != BLANK {
            out.push(k);
        }
        prev = Some(k);
    }
    out
}
