//! Fleiss' kappa over per-item category counts.

use serde::{Deserialize, Serialize};

use super::AnnotationError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Agreement {
    pub p_bar: f64,
    pub p_e: f64,
    pub kappa: f64,
}

const DEGENERATE_TOL: f64 = 1e-12;

/// `κ = (P̄ − P̄_e)/(1 − P̄_e)`. When chance agreement is total, κ is 1 for
/// perfect observed agreement and undefined otherwise.
pub fn kappa_from(p_bar: f64, p_e: f64) -> Result<Agreement, AnnotationError> {
    if (1.0 - p_e).abs() < DEGENERATE_TOL {
        if (1.0 - p_bar).abs() < DEGENERATE_TOL {
            return Ok(Agreement { p_bar, p_e, kappa: 1.0 });
        }
        return Err(AnnotationError::DegenerateAgreement);
    }
    Ok(Agreement {
        p_bar,
        p_e,
        kappa: (p_bar - p_e) / (1.0 - p_e),
    })
}

/// `counts[i][j]` is how many raters put item `i` in category `j`; every row
/// must sum to the same `n ≥ 2`.
pub fn fleiss_kappa(counts: &[Vec<usize>]) -> Result<Agreement, AnnotationError> {
    let first = counts.first().ok_or(AnnotationError::EmptyRatings)?;
    let n: usize = first.iter().sum();
    let categories = first.len();
    if n < 2 {
        return Err(AnnotationError::RaggedRatings(format!("{n} raters per item, need at least 2")));
    }
    for (i, row) in counts.iter().enumerate() {
        if row.len() != categories || row.iter().sum::<usize>() != n {
            return Err(AnnotationError::RaggedRatings(format!("item {i} does not have {n} ratings")));
        }
    }
    let big_n = counts.len() as f64;
    let nf = n as f64;
    let p_bar = counts
        .iter()
        .map(|row| {
            let sq: usize = row.iter().map(|c| c * c).sum();
            (sq as f64 - nf) / (nf * (nf - 1.0))
        })
        .sum::<f64>()
        / big_n;
    let p_e = (0..categories)
        .map(|j| {
            let p_j = counts.iter().map(|row| row[j]).sum::<usize>() as f64 / (big_n * nf);
            p_j * p_j
        })
        .sum();
    kappa_from(p_bar, p_e)
}
