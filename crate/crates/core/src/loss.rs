//! Closed-set cross-entropy, the open-set entropy term, and their weighted
//! combination.
//!
//! The open-set term is the mean over open queries of `sum_k p_k log p_k`
//! (negative entropy of the seen-class posterior), computed from
//! log-probabilities so near one-hot rows stay stable: where a probability
//! underflows to zero its `p log p` contribution is zero, matching the
//! `0 log 0 = 0` convention. Minimizing the term pushes open-query
//! posteriors toward uniform.
//!
//! Each term is normalized by its own query count under the default `mean`
//! reduction, so the mixing weight keeps its meaning across episode shapes;
//! `sum` reproduces the unnormalized composition.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduction {
    Mean,
    Sum,
}

/// Scalar values of one episode's loss, with the exact composition
/// `total = closed_ce + lambda * open_entropy_term`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub closed_ce: f64,
    pub open_entropy_term: f64,
    pub lambda: f64,
    pub total: f64,
}

fn check_log_prob_rows(tape: &Tape, log_probs: Var, what: &str) -> Result<(usize, usize)> {
    match tape.shape(log_probs) {
        [r, c] => Ok((*r, *c)),
        other => Err(Error::Shape(format!("{what}: expected [queries, classes], got {other:?}"))),
    }
}

/// Mean (or sum) over queries of the negative true-class log-probability.
pub fn cross_entropy(
    tape: &mut Tape,
    log_probs: Var,
    labels: &[usize],
    reduction: Reduction,
) -> Result<Var> {
    let (q, c) = check_log_prob_rows(tape, log_probs, "cross_entropy")?;
    if labels.len() != q {
        return Err(Error::Shape(format!(
            "cross_entropy: {} labels for {q} queries",
            labels.len()
        )));
    }
    if let Some((i, &bad)) = labels.iter().enumerate().find(|(_, &l)| l >= c) {
        return Err(Error::Invalid(format!(
            "cross_entropy: label {bad} out of range for {c} classes at query {i}"
        )));
    }
    let picked = tape.take_per_row(log_probs, labels)?;
    let total = tape.sum(picked);
    Ok(match reduction {
        Reduction::Mean => tape.scale(total, -1.0 / q as f64),
        Reduction::Sum => tape.neg(total),
    })
}

/// Mean (or sum) over open queries of `sum_k p_k log p_k`. Bounded in
/// `[-ln(n_classes), 0]`; the uniform posterior attains the minimum.
pub fn open_set_entropy_loss(
    tape: &mut Tape,
    log_probs: Var,
    reduction: Reduction,
) -> Result<Var> {
    let (q, _) = check_log_prob_rows(tape, log_probs, "open_set_entropy_loss")?;
    let p = tape.exp(log_probs);
    let plogp = tape.mul(p, log_probs)?;
    let total = tape.sum(plogp);
    Ok(match reduction {
        Reduction::Mean => {
            // q >= 1 whenever this loss is applied; guard anyway.
            if q == 0 {
                return Err(Error::Shape("open_set_entropy_loss: no open queries".into()));
            }
            tape.scale(total, 1.0 / q as f64)
        }
        Reduction::Sum => total,
    })
}

/// Weighted episode objective. With no open queries the total is the
/// cross-entropy node itself, exactly.
pub fn combined_loss(
    tape: &mut Tape,
    closed_log_probs: Var,
    closed_labels: &[usize],
    open_log_probs: Option<Var>,
    lambda: f64,
    reduction: Reduction,
) -> Result<(Var, LossBreakdown)> {
    if lambda < 0.0 {
        return Err(Error::Invalid(format!("lambda must be nonnegative, got {lambda}")));
    }
    let ce = cross_entropy(tape, closed_log_probs, closed_labels, reduction)?;
    let (total_var, open_value) = match open_log_probs {
        None => (ce, 0.0),
        Some(olp) => {
            let open = open_set_entropy_loss(tape, olp, reduction)?;
            let weighted = tape.scale(open, lambda);
            (tape.add(ce, weighted)?, tape.scalar(open))
        }
    };
    let breakdown = LossBreakdown {
        closed_ce: tape.scalar(ce),
        open_entropy_term: open_value,
        lambda,
        total: tape.scalar(total_var),
    };
    debug_assert!(
        !breakdown.total.is_finite()
            || breakdown.total
                == breakdown.closed_ce + breakdown.lambda * breakdown.open_entropy_term
    );
    Ok((total_var, breakdown))
}
