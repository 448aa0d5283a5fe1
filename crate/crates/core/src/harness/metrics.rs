//! Accuracy and order statistics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Accuracies below this are reported as exactly this value.
pub const ACCURACY_FLOOR: f64 = 1e-6;

/// `max(|value − optimum|, 1e-6)`.
pub fn accuracy(value: f64, optimum: f64) -> Result<f64> {
    if value.is_nan() || optimum.is_nan() {
        return Err(Error::NaN("accuracy input"));
    }
    Ok((value - optimum).abs().max(ACCURACY_FLOOR))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub median: f64,
    pub iqr: f64,
}

/// Linear-interpolation quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Median and interquartile range with interpolated quartiles.
pub fn aggregate(values: &[f64]) -> Result<Aggregate> {
    if values.is_empty() {
        return Err(Error::Empty("values"));
    }
    if values.iter().any(|v| v.is_nan()) {
        return Err(Error::NaN("aggregate input"));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(Aggregate {
        median: quantile(&sorted, 0.5),
        iqr: quantile(&sorted, 0.75) - quantile(&sorted, 0.25),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn accuracy_floor() {
        assert_eq!(accuracy(1.0, 1.0).unwrap(), 1e-6);
        assert_eq!(accuracy(1.5, 1.0).unwrap(), 0.5);
        assert_eq!(accuracy(1.0 + 1e-9, 1.0).unwrap(), 1e-6);
        assert!(accuracy(f64::NAN, 1.0).is_err());
    }

    #[test]
    fn aggregate_examples() {
        assert_eq!(aggregate(&[3.0, 1.0, 2.0]).unwrap().median, 2.0);
        let a = aggregate(&[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(a.median, 2.5);
        assert_eq!(a.iqr, 1.5);
        assert!(aggregate(&[]).is_err());
        assert_eq!(aggregate(&[7.0]).unwrap(), Aggregate { median: 7.0, iqr: 0.0 });
    }
}
