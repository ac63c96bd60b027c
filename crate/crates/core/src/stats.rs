//! Rank statistics: Spearman correlation with tie-averaged ranks, plus the
//! least-squares slopes used by the per-layer regression plots.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Spearman correlation result. Inputs whose ranks have zero variance (all
/// values tied) have no defined coefficient; they are reported as a distinct
/// marker rather than as 0 or NaN so degenerate layers cannot silently skew
/// aggregate statistics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SpearmanOutcome {
    Value(f64),
    Degenerate(DegenerateMarker),
}

/// Serialized as the string "degenerate".
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DegenerateMarker {
    #[serde(rename = "degenerate")]
    Degenerate,
}

impl SpearmanOutcome {
    pub fn value(self) -> Option<f64> {
        match self {
            SpearmanOutcome::Value(v) => Some(v),
            SpearmanOutcome::Degenerate(_) => None,
        }
    }

    pub fn degenerate() -> Self {
        SpearmanOutcome::Degenerate(DegenerateMarker::Degenerate)
    }
}

/// Average ranks (1-based); tied values share the mean of the positions they
/// occupy.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).expect("finite values"));
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        // Positions i..=j (0-based) share the averaged 1-based rank.
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            ranks[idx] = rank;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(xs: &[f64], ys: &[f64]) -> Option<f64> {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (x, y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    if sxx <= 0.0 || syy <= 0.0 {
        return None;
    }
    Some(sxy / (sxx * syy).sqrt())
}

/// Spearman rank correlation: Pearson correlation of average ranks.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Result<SpearmanOutcome> {
    if xs.len() != ys.len() {
        return Err(Error::Config(format!(
            "spearman inputs have different lengths: {} vs {}",
            xs.len(),
            ys.len()
        )));
    }
    if xs.len() < 2 {
        return Err(Error::Config("spearman needs at least 2 points".into()));
    }
    if xs.iter().chain(ys.iter()).any(|v| !v.is_finite()) {
        return Err(Error::Numeric("spearman inputs must be finite".into()));
    }
    let rx = average_ranks(xs);
    let ry = average_ranks(ys);
    Ok(match pearson(&rx, &ry) {
        Some(v) => SpearmanOutcome::Value(v),
        None => SpearmanOutcome::degenerate(),
    })
}

/// Least-squares line `y = slope * x + intercept`; `None` when x has no
/// variance.
pub fn linear_fit(xs: &[f64], ys: &[f64]) -> Option<(f64, f64)> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return None;
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    for (x, y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
    }
    if sxx <= 0.0 {
        return None;
    }
    let slope = sxy / sxx;
    Some((slope, my - slope * mx))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn monotone_sequences() {
        let xs = [1.0, 2.0, 3.0, 4.0, 5.0];
        let up = [2.0, 4.0, 5.0, 7.0, 11.0];
        let down = [5.0, 4.0, 3.0, 2.0, 1.0];
        assert_eq!(spearman(&xs, &up).unwrap(), SpearmanOutcome::Value(1.0));
        assert_eq!(spearman(&xs, &down).unwrap(), SpearmanOutcome::Value(-1.0));
    }

    #[test]
    fn hand_computed_case() {
        // ranks x = 1,2,3,4; ranks y = 2,1,4,3; rho = 1 - 6*4/(4*15) = 0.6
        let xs = [1.0, 2.0, 3.0, 4.0];
        let ys = [2.0, 1.0, 4.0, 3.0];
        let got = spearman(&xs, &ys).unwrap().value().unwrap();
        assert!((got - 0.6).abs() < 1e-12);
    }

    #[test]
    fn constant_input_is_degenerate() {
        let xs = [1.0, 1.0, 1.0];
        let ys = [1.0, 2.0, 3.0];
        assert_eq!(spearman(&xs, &ys).unwrap(), SpearmanOutcome::degenerate());
    }

    #[test]
    fn tied_ranks_are_averaged() {
        let ranks = average_ranks(&[10.0, 20.0, 20.0, 30.0]);
        assert_eq!(ranks, vec![1.0, 2.5, 2.5, 4.0]);
    }

    #[test]
    fn outcome_serialization() {
        assert_eq!(
            serde_json::to_string(&SpearmanOutcome::Value(0.5)).unwrap(),
            "0.5"
        );
        assert_eq!(
            serde_json::to_string(&SpearmanOutcome::degenerate()).unwrap(),
            "\"degenerate\""
        );
        let v: SpearmanOutcome = serde_json::from_str("0.25").unwrap();
        assert_eq!(v, SpearmanOutcome::Value(0.25));
        let d: SpearmanOutcome = serde_json::from_str("\"degenerate\"").unwrap();
        assert_eq!(d, SpearmanOutcome::degenerate());
    }

    #[test]
    fn linear_fit_hand_case() {
        let (slope, intercept) = linear_fit(&[0.0, 1.0, 2.0], &[1.0, 3.0, 5.0]).unwrap();
        assert!((slope - 2.0).abs() < 1e-12);
        assert!((intercept - 1.0).abs() < 1e-12);
    }
}
