use crate::error::{Error, Result};

/// Cluster count used when elbow selection is skipped.
pub const DEFAULT_K: usize = 10;

/// Discrete second difference of the curve at each interior point:
/// `(w[k-1] - w[k]) - (w[k] - w[k+1])`.
pub fn second_differences(curve: &[(usize, f64)]) -> Vec<(usize, f64)> {
    curve
        .windows(3)
        .map(|w| (w[1].0, (w[0].1 - w[1].1) - (w[1].1 - w[2].1)))
        .collect()
}

/// The interior `k` with the largest second difference; the smallest such `k`
/// on ties. `curve` must be sorted by `k`.
pub fn elbow_select(curve: &[(usize, f64)]) -> Result<usize> {
    if curve.len() < 3 {
        return Err(Error::CurveTooShort(curve.len()));
    }
    if curve.windows(2).any(|w| w[1].0 <= w[0].0) {
        return Err(Error::InvalidArgument(
            "elbow curve must be sorted by k".into(),
        ));
    }
    let mut best = (0, f64::NEG_INFINITY);
    for (k, d2) in second_differences(curve) {
        if d2 > best.1 {
            best = (k, d2);
        }
    }
    Ok(best.0)
}
