//! Change points from jumps in the coefficient paths.
//!
//! The score of channel `j` at time index `k` (1-based, `k >= 2`) is
//! `c_jk = sum_{r != j} |b_jr(t_k) - b_jr(t_{k-1})|`. Channel `j` flags `k`
//! when `c_jk` exceeds a threshold `c_j0`; the system count `C_k` is the
//! number of channels flagging `k`, and a system rule on `C_k` gives the
//! change points. Runs of adjacent system flags collapse to the index with
//! the largest count.

use serde::{Deserialize, Serialize};

use crate::solver::CoefficientPath;
use crate::{DfslError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum ChannelRule {
    /// `c_j0 = multiplier * std_j(c_jk)` with the sample standard deviation.
    KSigma { multiplier: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum SystemRule {
    /// `C_k >= count`.
    CountAtLeast { count: usize },
    /// `C_k > multiplier * std(C_k)`.
    SigmaAbove { multiplier: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectionPolicy {
    pub channel: ChannelRule,
    pub system: SystemRule,
}

impl Default for DetectionPolicy {
    /// Three-sigma channel thresholds and any flagged channel at system level.
    fn default() -> Self {
        Self { channel: ChannelRule::KSigma { multiplier: 3.0 }, system: SystemRule::CountAtLeast { count: 1 } }
    }
}

impl DetectionPolicy {
    /// Three-sigma channel thresholds with `C_k > multiplier * std(C_k)`.
    pub fn sigma(multiplier: f64) -> Self {
        Self { channel: ChannelRule::KSigma { multiplier: 3.0 }, system: SystemRule::SigmaAbove { multiplier } }
    }

    /// Three-sigma channel thresholds with `C_k >= count`.
    pub fn count(count: usize) -> Self {
        Self { channel: ChannelRule::KSigma { multiplier: 3.0 }, system: SystemRule::CountAtLeast { count } }
    }

    /// Parse `count:<c>` or `sigma:<m>`.
    pub fn parse(text: &str) -> Result<Self> {
        let (kind, value) = text
            .split_once(':')
            .ok_or_else(|| DfslError::invalid(format!("policy must look like count:1 or sigma:3, got {text:?}")))?;
        let bad = || DfslError::invalid(format!("bad policy value in {text:?}"));
        match kind {
            "count" => Ok(Self::count(value.parse().map_err(|_| bad())?)),
            "sigma" => {
                let m: f64 = value.parse().map_err(|_| bad())?;
                if !m.is_finite() || m < 0.0 {
                    return Err(bad());
                }
                Ok(Self::sigma(m))
            }
            _ => Err(DfslError::invalid(format!("unknown policy kind {kind:?}"))),
        }
    }
}

/// Scores and, after [`detect`], thresholds and detections. Time indices
/// are 1-based throughout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChangeScore {
    /// `c[j][k - 2]` for `k = 2..=n`.
    pub c: Vec<Vec<f64>>,
    pub thresholds: Vec<f64>,
    /// Flagged indices `T_j` per channel.
    pub channel_flags: Vec<Vec<usize>>,
    /// `system_counts[k - 1] = C_k` for `k = 1..=n` (`C_1 = 0`).
    pub system_counts: Vec<usize>,
    pub change_points: Vec<usize>,
}

impl ChangeScore {
    pub fn n_channels(&self) -> usize {
        self.c.len()
    }

    /// Number of time points `n`.
    pub fn n_times(&self) -> usize {
        self.c.first().map_or(1, |row| row.len() + 1)
    }

    /// `c_jk` for 1-based `k >= 2`.
    pub fn get(&self, j: usize, k: usize) -> f64 {
        self.c[j][k - 2]
    }
}

/// Coefficient jump scores of a path.
pub fn score(path: &CoefficientPath) -> ChangeScore {
    let (p, n) = (path.n_channels(), path.n_times());
    let c = (0..p)
        .map(|j| {
            let b = path.channel(j);
            (1..n)
                .map(|k| (0..p).filter(|&r| r != j).map(|r| (b[(r, k)] - b[(r, k - 1)]).abs()).sum())
                .collect()
        })
        .collect();
    ChangeScore { c, thresholds: Vec::new(), channel_flags: Vec::new(), system_counts: Vec::new(), change_points: Vec::new() }
}

fn sample_std(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let n = values.clone().count();
    if n < 2 {
        return 0.0;
    }
    let mean = values.clone().sum::<f64>() / n as f64;
    (values.map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
}

/// Apply the thresholding policy to a score.
pub fn detect(score: &ChangeScore, policy: &DetectionPolicy) -> ChangeScore {
    let (p, n) = (score.n_channels(), score.n_times());
    let thresholds: Vec<f64> = score
        .c
        .iter()
        .map(|row| match policy.channel {
            ChannelRule::KSigma { multiplier } => multiplier * sample_std(row.iter().copied()),
        })
        .collect();
    let channel_flags: Vec<Vec<usize>> = (0..p)
        .map(|j| (2..=n).filter(|&k| score.get(j, k) > thresholds[j]).collect())
        .collect();
    let mut system_counts = vec![0usize; n];
    for flags in &channel_flags {
        for &k in flags {
            system_counts[k - 1] += 1;
        }
    }
    let flagged: Vec<usize> = match policy.system {
        SystemRule::CountAtLeast { count } => (2..=n).filter(|&k| system_counts[k - 1] >= count.max(1)).collect(),
        SystemRule::SigmaAbove { multiplier } => {
            let cut = multiplier * sample_std(system_counts[1..].iter().map(|&v| v as f64));
            (2..=n).filter(|&k| system_counts[k - 1] as f64 > cut && system_counts[k - 1] > 0).collect()
        }
    };
    let change_points = merge_adjacent(&flagged, &system_counts);
    ChangeScore { c: score.c.clone(), thresholds, channel_flags, system_counts, change_points }
}

/// Collapse runs of consecutive indices to the one with the largest count
/// (earliest on ties).
fn merge_adjacent(flagged: &[usize], counts: &[usize]) -> Vec<usize> {
    let mut out = Vec::new();
    let mut i = 0;
    while i < flagged.len() {
        let mut best = flagged[i];
        let mut end = i;
        while end + 1 < flagged.len() && flagged[end + 1] == flagged[end] + 1 {
            end += 1;
            if counts[flagged[end] - 1] > counts[best - 1] {
                best = flagged[end];
            }
        }
        out.push(best);
        i = end + 1;
    }
    out
}
