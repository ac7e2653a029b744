use serde::{Deserialize, Serialize};

use super::{RunReport, TrainError};

/// Trailing moving average over `window` steps.
pub fn smooth(xs: &[f64], window: usize) -> Vec<f64> {
    let w = window.max(1);
    // Summed per window rather than as a running sum, which drifts over
    // thousands of steps.
    (0..xs.len())
        .map(|i| {
            let win = &xs[(i + 1).saturating_sub(w)..=i];
            win.iter().sum::<f64>() / win.len() as f64
        })
        .collect()
}

/// Paired loss curves of run A (candidate) against run B (baseline).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceLog {
    pub label_a: String,
    pub label_b: String,
    pub loss_a: Vec<f64>,
    pub loss_b: Vec<f64>,
    pub window: usize,
    /// Set when the runs had different lengths and were cut to the shorter.
    pub truncated_from: Option<(usize, usize)>,
    /// Baseline's final smoothed loss.
    pub threshold: f64,
    /// First 1-based step at which each smoothed curve is at or below the threshold.
    pub steps_a: Option<usize>,
    pub steps_b: Option<usize>,
    /// Candidate's steps to the threshold over the baseline's total steps.
    pub ratio_to_total: Option<f64>,
}

fn first_at_or_below(xs: &[f64], threshold: f64) -> Option<usize> {
    xs.iter().position(|&v| v <= threshold).map(|i| i + 1)
}

impl ConvergenceLog {
    pub fn from_curves(label_a: &str, a: &[f64], label_b: &str, b: &[f64], window: usize) -> Self {
        let n = a.len().min(b.len());
        let truncated_from = (a.len() != b.len()).then_some((a.len(), b.len()));
        if truncated_from.is_some() {
            log::warn!("loss curves differ in length ({} vs {}); aligning to {n} steps", a.len(), b.len());
        }
        let (a, b) = (&a[..n], &b[..n]);
        let (sa, sb) = (smooth(a, window), smooth(b, window));
        let threshold = sb.last().copied().unwrap_or(f64::NAN);
        let steps_a = first_at_or_below(&sa, threshold);
        ConvergenceLog {
            label_a: label_a.into(),
            label_b: label_b.into(),
            loss_a: a.to_vec(),
            loss_b: b.to_vec(),
            window,
            truncated_from,
            threshold,
            steps_a,
            steps_b: first_at_or_below(&sb, threshold),
            ratio_to_total: steps_a.filter(|_| n > 0).map(|s| s as f64 / n as f64),
        }
    }

    /// `step,loss_A,loss_B` with 1-based steps.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,loss_A,loss_B\n");
        for (i, (a, b)) in self.loss_a.iter().zip(&self.loss_b).enumerate() {
            out.push_str(&format!("{},{a},{b}\n", i + 1));
        }
        out
    }

    pub fn parse_csv(text: &str) -> Result<(Vec<f64>, Vec<f64>), TrainError> {
        let mut lines = text.lines();
        if lines.next().map(str::trim) != Some("step,loss_A,loss_B") {
            return Err(TrainError::Config("convergence CSV header must be `step,loss_A,loss_B`".into()));
        }
        let (mut a, mut b) = (Vec::new(), Vec::new());
        for (i, line) in lines.enumerate() {
            let cols: Vec<&str> = line.split(',').collect();
            let parse = |s: &str| s.trim().parse::<f64>().map_err(|e| TrainError::Config(format!("row {}: {e}", i + 1)));
            if cols.len() != 3 || parse(cols[0])? as usize != i + 1 {
                return Err(TrainError::Config(format!("malformed convergence row {}", i + 1)));
            }
            a.push(parse(cols[1])?);
            b.push(parse(cols[2])?);
        }
        Ok((a, b))
    }
}

/// Compares two tuning runs that share seed, learning rate and prompt length.
pub fn log_convergence(a: &RunReport, b: &RunReport, window: usize) -> Result<ConvergenceLog, TrainError> {
    let (ca, cb) = (&a.config, &b.config);
    if ca.seed != cb.seed || ca.lr_tree != cb.lr_tree || ca.prompt_len != cb.prompt_len {
        return Err(TrainError::Config("convergence runs must share seed, lr and prompt length".into()));
    }
    Ok(ConvergenceLog::from_curves(&a.variant, &a.step_losses, &b.variant, &b.step_losses, window))
}
