#[cfg(feature = "serde")]
use serde::{Deserialize, Serialize};

/// Moving-average plateau detector.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct ConvergenceDetector {
    pub window: usize,
    pub threshold: f64,
    pub patience: usize,
}

impl ConvergenceDetector {
    pub const fn new(window: usize) -> Self {
        Self { window, threshold: 0.001, patience: 10 }
    }
}

impl Default for ConvergenceDetector {
    fn default() -> Self {
        Self::new(10)
    }
}

/// First 1-indexed round `t` at which the window-`w` moving average has
/// improved by less than the threshold for `patience` consecutive rounds.
/// The moving average exists from round `w` on, its first difference from
/// round `w + 1`.
pub fn detect_convergence(history: &[f64], det: &ConvergenceDetector) -> Option<usize> {
    let w = det.window.max(1);
    if history.len() < w + 1 {
        return None;
    }
    let mut window_sum: f64 = history[..w].iter().sum();
    let mut prev = window_sum / w as f64;
    let mut streak = 0;
    for t in (w + 1)..=history.len() {
        window_sum += history[t - 1] - history[t - 1 - w];
        let ma = window_sum / w as f64;
        if ma - prev < det.threshold {
            streak += 1;
            if streak >= det.patience {
                return Some(t);
            }
        } else {
            streak = 0;
        }
        prev = ma;
    }
    None
}
