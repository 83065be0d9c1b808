//! Evaluation metrics: timbre consistency, distributional fit, and
//! attribute deviation against the generating spec.

use crate::datagen::DatasetSpec;
use crate::error::{DfmError, Result};
use crate::linalg;
use crate::net::ConditionSet;

/// Dimension-normalized L1 distance between two feature vectors.
pub fn pairwise_distance(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(DfmError::InputDomain(format!(
            "feature lengths differ: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    if a.is_empty() {
        return Err(DfmError::InputDomain("features must be nonempty".into()));
    }
    Ok(linalg::l1_norm_diff(a, b) / a.len() as f64)
}

/// Mean pairwise distance over all K(K-1)/2 unordered pairs. The divisor is
/// the pair count, so mutually equidistant groups score the distance itself
/// regardless of K.
pub fn timbre_consistency_loss(group: &[Vec<f64>]) -> Result<f64> {
    let k = group.len();
    if k < 2 {
        return Err(DfmError::UndefinedScore(format!(
            "timbre consistency needs at least 2 clips, got {k}"
        )));
    }
    let mut sum = 0.0;
    for i in 0..k {
        for j in (i + 1)..k {
            sum += pairwise_distance(&group[i], &group[j])?;
        }
    }
    Ok(sum / (k * (k - 1) / 2) as f64)
}

/// Energy distance 2 E||A-B|| - E||A-A'|| - E||B-B'|| over all pairs
/// (V-statistic: the self-pair terms keep the zero diagonal, which makes
/// identical sample lists score exactly 0 and keeps the value nonnegative).
pub fn energy_distance(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(DfmError::InputDomain("energy distance needs nonempty sample sets".into()));
    }
    let d = a[0].len();
    for v in a.iter().chain(b.iter()) {
        if v.len() != d {
            return Err(DfmError::InputDomain("samples disagree on dimension".into()));
        }
    }
    let mean_cross = |xs: &[Vec<f64>], ys: &[Vec<f64>]| -> f64 {
        let mut sum = 0.0;
        for x in xs {
            for y in ys {
                sum += linalg::euclidean(x, y);
            }
        }
        sum / (xs.len() * ys.len()) as f64
    };
    Ok(2.0 * mean_cross(a, b) - mean_cross(a, a) - mean_cross(b, b))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttributeDeviation {
    pub pitch: f64,
    pub velocity: f64,
}

/// Mean absolute deviation of each sample from its nearest ground-truth mode,
/// projected onto the pitch and velocity axes. The nearest mode (of the one
/// or two the condition owns) is chosen by Euclidean distance, so bimodal
/// conditions are not penalized for committing to either mode.
pub fn attribute_deviation(
    samples: &[Vec<f64>],
    conds: &[ConditionSet],
    spec: &DatasetSpec,
) -> Result<AttributeDeviation> {
    if samples.len() != conds.len() {
        return Err(DfmError::InputDomain(format!(
            "{} samples vs {} conditions",
            samples.len(),
            conds.len()
        )));
    }
    if samples.is_empty() {
        return Err(DfmError::InputDomain("attribute deviation needs at least one sample".into()));
    }
    let mut pitch_sum = 0.0;
    let mut vel_sum = 0.0;
    for (x, &cond) in samples.iter().zip(conds.iter()) {
        if x.len() != spec.d {
            return Err(DfmError::InputDomain(format!(
                "sample has dimension {}, spec has {}",
                x.len(),
                spec.d
            )));
        }
        let modes = spec.mode_means(cond)?;
        let nearest = modes
            .iter()
            .min_by(|a, b| {
                linalg::euclidean(x, a).partial_cmp(&linalg::euclidean(x, b)).expect("finite")
            })
            .expect("mode_means is nonempty");
        let resid = linalg::sub(x, nearest);
        pitch_sum += linalg::dot(&resid, &spec.pitch_axis).abs();
        vel_sum += linalg::dot(&resid, &spec.vel_axis).abs();
    }
    let n = samples.len() as f64;
    Ok(AttributeDeviation { pitch: pitch_sum / n, velocity: vel_sum / n })
}
