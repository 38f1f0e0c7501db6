//! Sequence metrics. All of them are pure functions of id sequences.

use std::collections::BTreeSet;

use crate::corpus::ActionId;
use crate::numkit::argmax;
use crate::{Error, Result};

fn same_len(pred: &[ActionId], gt: &[ActionId]) -> Result<()> {
    if pred.len() != gt.len() {
        return Err(Error::Usage(format!(
            "prediction has {} steps but ground truth has {}",
            pred.len(),
            gt.len()
        )));
    }
    Ok(())
}

/// Matching positions and compared positions.
pub fn match_counts(pred: &[ActionId], gt: &[ActionId]) -> Result<(usize, usize)> {
    same_len(pred, gt)?;
    Ok((pred.iter().zip(gt).filter(|(p, g)| p == g).count(), gt.len()))
}

/// Like [`match_counts`], restricted to positions where `gt` is not NULL.
pub fn match_counts_excl_null(pred: &[ActionId], gt: &[ActionId]) -> Result<(usize, usize)> {
    same_len(pred, gt)?;
    let mut hit = 0;
    let mut n = 0;
    for (p, g) in pred.iter().zip(gt) {
        if !g.is_null() {
            n += 1;
            hit += usize::from(p == g);
        }
    }
    Ok((hit, n))
}

/// Fraction of positions where `pred == gt`. Empty input is a usage error.
pub fn accuracy(pred: &[ActionId], gt: &[ActionId]) -> Result<f64> {
    let (hit, n) = match_counts(pred, gt)?;
    if n == 0 {
        return Err(Error::Usage("accuracy of empty sequences".into()));
    }
    Ok(hit as f64 / n as f64)
}

/// Accuracy over positions with a non-NULL ground truth; `None` when there
/// are none.
pub fn accuracy_excl_null(pred: &[ActionId], gt: &[ActionId]) -> Result<Option<f64>> {
    let (hit, n) = match_counts_excl_null(pred, gt)?;
    Ok((n > 0).then(|| hit as f64 / n as f64))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogLikPair {
    /// Mean log-probability of the predicted candidate.
    pub prediction: f64,
    /// Mean log-probability of the ground-truth candidate.
    pub ground_truth: f64,
    pub scored: usize,
    /// Steps whose ground truth was not among the candidates.
    pub skipped: usize,
}

/// `gts[i]` indexes the ground truth within step `i`'s candidates, or is
/// `None` when it is not a candidate (the step is skipped).
pub fn loglik_pair(log_probs: &[Vec<f64>], preds: &[usize], gts: &[Option<usize>]) -> Result<LogLikPair> {
    if log_probs.len() != preds.len() || log_probs.len() != gts.len() {
        return Err(Error::Usage("log-likelihood inputs differ in length".into()));
    }
    let (mut sp, mut sg, mut scored) = (0.0, 0.0, 0usize);
    for ((lp, p), g) in log_probs.iter().zip(preds).zip(gts) {
        let Some(g) = g else { continue };
        let (Some(lpp), Some(lpg)) = (lp.get(*p), lp.get(*g)) else {
            return Err(Error::Usage("candidate index outside its log-probability vector".into()));
        };
        sp += lpp;
        sg += lpg;
        scored += 1;
    }
    if scored == 0 {
        return Err(Error::Usage("no scored steps for the log-likelihood".into()));
    }
    Ok(LogLikPair {
        prediction: sp / scored as f64,
        ground_truth: sg / scored as f64,
        scored,
        skipped: gts.len() - scored,
    })
}

/// [`loglik_pair`] with the prediction taken as each step's argmax.
pub fn loglik_pair_argmax(log_probs: &[Vec<f64>], gts: &[Option<usize>]) -> Result<LogLikPair> {
    let preds: Vec<usize> = log_probs.iter().map(|lp| argmax(lp)).collect();
    loglik_pair(log_probs, &preds, gts)
}

/// Set intersection over union; duplicates collapse and two empty sequences
/// score 1.
pub fn miou(pred: &[ActionId], gt: &[ActionId]) -> f64 {
    let p: BTreeSet<_> = pred.iter().collect();
    let g: BTreeSet<_> = gt.iter().collect();
    let union = p.union(&g).count();
    if union == 0 {
        return 1.0;
    }
    p.intersection(&g).count() as f64 / union as f64
}

/// Element-wise matches over the shorter of the two sequences.
pub fn prefix_match_counts(plan: &[ActionId], gt: &[ActionId]) -> (usize, usize) {
    let n = plan.len().min(gt.len());
    (plan.iter().zip(gt).filter(|(p, g)| p == g).count(), n)
}
