use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// One evaluated item.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub id: usize,
    pub predicted: String,
    pub gold: String,
    /// Uncertainty score; higher means more likely hallucinated.
    pub score: f64,
    pub hallucinated: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BinaryMetrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Some ratio had a zero denominator and was reported as 0.
    pub degenerate: bool,
}

fn ratio(num: usize, den: usize, degenerate: &mut bool) -> f64 {
    if den == 0 {
        *degenerate = true;
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Accuracy, precision, recall and F1 with "yes" as the positive class.
pub fn binary_metrics(records: &[EvalRecord]) -> Result<BinaryMetrics> {
    if records.is_empty() {
        return Err(invalid("binary metrics need at least one record"));
    }
    let (mut tp, mut fp, mut fn_, mut tn) = (0, 0, 0, 0);
    for r in records {
        for a in [&r.predicted, &r.gold] {
            if a != "yes" && a != "no" {
                return Err(invalid(format!("record {}: non-binary answer '{a}'", r.id)));
            }
        }
        match (r.predicted == "yes", r.gold == "yes") {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => tn += 1,
        }
    }
    let mut degenerate = false;
    let accuracy = (tp + tn) as f64 / records.len() as f64;
    let precision = ratio(tp, tp + fp, &mut degenerate);
    let recall = ratio(tp, tp + fn_, &mut degenerate);
    let f1 = if precision + recall == 0.0 {
        degenerate = true;
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Ok(BinaryMetrics {
        accuracy,
        precision,
        recall,
        f1,
        degenerate,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChairMetrics {
    pub chair_s: f64,
    pub chair_i: f64,
    pub recall: f64,
    pub degenerate: bool,
}

/// CHAIR over `(mentioned objects, gold objects)` pairs.
pub fn chair_metrics(responses: &[(BTreeSet<String>, BTreeSet<String>)]) -> Result<ChairMetrics> {
    if responses.is_empty() {
        return Err(invalid("CHAIR needs at least one response"));
    }
    let (mut mentions, mut hallucinated, mut bad_responses) = (0, 0, 0);
    let (mut gold_total, mut gold_hit) = (0, 0);
    for (mentioned, gold) in responses {
        let h = mentioned.difference(gold).count();
        mentions += mentioned.len();
        hallucinated += h;
        bad_responses += usize::from(h > 0);
        gold_total += gold.len();
        gold_hit += mentioned.intersection(gold).count();
    }
    let mut degenerate = false;
    Ok(ChairMetrics {
        chair_s: bad_responses as f64 / responses.len() as f64,
        chair_i: ratio(hallucinated, mentions, &mut degenerate),
        recall: ratio(gold_hit, gold_total, &mut degenerate),
        degenerate,
    })
}

/// Probability that a hallucinated record outscores a clean one, ties
/// counted half.
pub fn auroc(records: &[EvalRecord]) -> Result<f64> {
    let (pos, neg): (Vec<&EvalRecord>, Vec<&EvalRecord>) = records.iter().partition(|r| r.hallucinated);
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::UndefinedMetric(
            "AUROC needs both hallucinated and clean records".into(),
        ));
    }
    if records.iter().any(|r| r.score.is_nan()) {
        return Err(invalid("NaN uncertainty score"));
    }
    // rank-sum with average ranks for ties
    let mut sorted: Vec<(f64, bool)> = records.iter().map(|r| (r.score, r.hallucinated)).collect();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        while j < sorted.len() && sorted[j].0 == sorted[i].0 {
            j += 1;
        }
        let avg_rank = (i + 1 + j) as f64 / 2.0;
        rank_sum += avg_rank * sorted[i..j].iter().filter(|x| x.1).count() as f64;
        i = j;
    }
    let (np, nn) = (pos.len() as f64, neg.len() as f64);
    Ok((rank_sum - np * (np + 1.0) / 2.0) / (np * nn))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationBin {
    pub lower: f64,
    pub upper: f64,
    pub count: usize,
    pub hallucination_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub bins: Vec<CalibrationBin>,
    pub ece: f64,
    /// Absent when all records share one label.
    pub auroc: Option<f64>,
    /// All scores were identical and a single bin was used.
    pub degenerate: bool,
}

/// Bin index of a normalized score.
pub fn bin_index(normalized: f64, num_bins: usize) -> usize {
    ((normalized * num_bins as f64).floor() as usize).min(num_bins - 1)
}

/// Expected calibration error over equal-width bins of min-max normalized
/// scores. Bin edges are reported in raw score units.
pub fn ece(records: &[EvalRecord], num_bins: usize) -> Result<CalibrationReport> {
    if records.is_empty() {
        return Err(invalid("calibration needs at least one record"));
    }
    if num_bins == 0 {
        return Err(invalid("num_bins must be at least 1"));
    }
    if records.iter().any(|r| !r.score.is_finite()) {
        return Err(invalid("uncertainty scores must be finite"));
    }
    let auroc = auroc(records).ok();
    let n = records.len() as f64;
    let lo = records.iter().map(|r| r.score).fold(f64::INFINITY, f64::min);
    let hi = records.iter().map(|r| r.score).fold(f64::NEG_INFINITY, f64::max);
    let rate = |rs: &[&EvalRecord]| rs.iter().filter(|r| r.hallucinated).count() as f64 / rs.len() as f64;

    if hi == lo {
        let all: Vec<&EvalRecord> = records.iter().collect();
        let r = rate(&all);
        return Ok(CalibrationReport {
            bins: vec![CalibrationBin {
                lower: lo,
                upper: hi,
                count: records.len(),
                hallucination_rate: r,
            }],
            ece: (lo.clamp(0.0, 1.0) - r).abs(),
            auroc,
            degenerate: true,
        });
    }

    let span = hi - lo;
    let mut members: Vec<Vec<(&EvalRecord, f64)>> = vec![Vec::new(); num_bins];
    for r in records {
        let s = (r.score - lo) / span;
        members[bin_index(s, num_bins)].push((r, s));
    }
    let mut bins = Vec::with_capacity(num_bins);
    let mut ece = 0.0;
    for (b, m) in members.iter().enumerate() {
        let lower = lo + span * b as f64 / num_bins as f64;
        let upper = if b + 1 == num_bins {
            hi
        } else {
            lo + span * (b + 1) as f64 / num_bins as f64
        };
        let (count, hallucination_rate) = if m.is_empty() {
            (0, 0.0)
        } else {
            let rs: Vec<&EvalRecord> = m.iter().map(|x| x.0).collect();
            let mean = m.iter().map(|x| x.1).sum::<f64>() / m.len() as f64;
            let r = rate(&rs);
            ece += m.len() as f64 / n * (mean - r).abs();
            (m.len(), r)
        };
        bins.push(CalibrationBin {
            lower,
            upper,
            count,
            hallucination_rate,
        });
    }
    Ok(CalibrationReport {
        bins,
        ece,
        auroc,
        degenerate: false,
    })
}
