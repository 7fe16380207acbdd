//! Line-delimited record formats for training and evaluation streams.
//!
//! One record per line, `key=value` pairs separated by single spaces, in a
//! fixed key order. Floats use Rust's shortest round-trip formatting, so
//! identical runs write identical bytes (wall time is the one exception and
//! is kept in a trailing field).

use crate::loss::LossBreakdown;

/// One training-stream record.
#[derive(Debug, Clone, PartialEq)]
pub struct ProgressRecord {
    pub episode: u64,
    pub lr: f64,
    pub breakdown: LossBreakdown,
    /// Mean total loss since the last record.
    pub window_mean: f64,
    pub wall_ms: u128,
}

impl ProgressRecord {
    pub fn to_line(&self) -> String {
        format!(
            "episode={} lr={} closed_ce={} open_entropy={} lambda={} total={} window_mean={} wall_ms={}",
            self.episode,
            self.lr,
            self.breakdown.closed_ce,
            self.breakdown.open_entropy_term,
            self.breakdown.lambda,
            self.breakdown.total,
            self.window_mean,
            self.wall_ms
        )
    }
}

/// One evaluation-stream record.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalRecord {
    pub episode: u64,
    pub accuracy: f64,
    pub auroc: Option<f64>,
}

impl EvalRecord {
    pub fn to_line(&self) -> String {
        match self.auroc {
            Some(a) => format!("episode={} accuracy={} auroc={}", self.episode, self.accuracy, a),
            None => format!("episode={} accuracy={} auroc=absent", self.episode, self.accuracy),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn progress_line_is_stable() {
        let r = ProgressRecord {
            episode: 100,
            lr: 0.001,
            breakdown: LossBreakdown {
                closed_ce: 1.5,
                open_entropy_term: -0.5,
                lambda: 0.5,
                total: 1.25,
            },
            window_mean: 1.3,
            wall_ms: 17,
        };
        assert_eq!(
            r.to_line(),
            "episode=100 lr=0.001 closed_ce=1.5 open_entropy=-0.5 lambda=0.5 total=1.25 window_mean=1.3 wall_ms=17"
        );
    }

    #[test]
    fn eval_line_marks_missing_auroc() {
        let r = EvalRecord { episode: 3, accuracy: 0.75, auroc: None };
        assert_eq!(r.to_line(), "episode=3 accuracy=0.75 auroc=absent");
    }
}
