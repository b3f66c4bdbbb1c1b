//! Per-class and macro F1 over the locked label set `{0, 1, 2, 3, 4}`.
//!
//! Classes absent from both gold and predictions still count toward the
//! macro denominator with an F1 of zero.

use crate::heads::N_CLASSES;
use crate::{Error, Result};

fn check(gold: &[usize], pred: &[usize]) -> Result<()> {
    if gold.is_empty() {
        return Err(Error::invalid("no labels to score"));
    }
    if gold.len() != pred.len() {
        return Err(Error::invalid(format!(
            "gold has {} labels but predictions have {}",
            gold.len(),
            pred.len()
        )));
    }
    if let Some(&bad) = gold.iter().chain(pred).find(|&&y| y >= N_CLASSES) {
        return Err(Error::invalid(format!("label {bad} outside 0..{N_CLASSES}")));
    }
    Ok(())
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// F1 per class in percentage points.
pub fn per_class_f1(gold: &[usize], pred: &[usize]) -> Result<[f64; N_CLASSES]> {
    check(gold, pred)?;
    let mut tp = [0usize; N_CLASSES];
    let mut n_pred = [0usize; N_CLASSES];
    let mut n_gold = [0usize; N_CLASSES];
    for (&g, &p) in gold.iter().zip(pred) {
        n_gold[g] += 1;
        n_pred[p] += 1;
        if g == p {
            tp[g] += 1;
        }
    }
    Ok(std::array::from_fn(|c| {
        let p = ratio(tp[c], n_pred[c]);
        let r = ratio(tp[c], n_gold[c]);
        if p + r == 0.0 {
            0.0
        } else {
            100.0 * 2.0 * p * r / (p + r)
        }
    }))
}

/// Unweighted mean of the five per-class F1 values.
pub fn macro_f1(gold: &[usize], pred: &[usize]) -> Result<f64> {
    Ok(per_class_f1(gold, pred)?.iter().sum::<f64>() / N_CLASSES as f64)
}
