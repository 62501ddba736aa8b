//! Rounding design weights to integer counts.

use serde::{Deserialize, Serialize};

use crate::error::{GlmmError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ApportionMethod {
    Hamilton,
    Webster,
    Jefferson,
    ModifiedAdams,
}

impl ApportionMethod {
    pub const ALL: [ApportionMethod; 4] = [
        ApportionMethod::Hamilton,
        ApportionMethod::Webster,
        ApportionMethod::Jefferson,
        ApportionMethod::ModifiedAdams,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            ApportionMethod::Hamilton => "hamilton",
            ApportionMethod::Webster => "webster",
            ApportionMethod::Jefferson => "jefferson",
            ApportionMethod::ModifiedAdams => "modified-adams",
        }
    }
}

fn check(weights: &[f64], m: usize) -> Result<()> {
    if weights.is_empty() || m == 0 {
        return Err(GlmmError::Apportion("need at least one weight and m >= 1".into()));
    }
    if weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
        return Err(GlmmError::Apportion(format!("weights must be non-negative, got {weights:?}")));
    }
    let s: f64 = weights.iter().sum();
    if (s - 1.0).abs() > 1e-9 {
        return Err(GlmmError::Apportion(format!("weights sum to {s}, not 1")));
    }
    Ok(())
}

/// Index of the largest value, lowest index on ties.
fn argmax(vals: impl Iterator<Item = f64>) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, v) in vals.enumerate() {
        if v.is_nan() {
            continue;
        }
        if best.is_none_or(|(_, b)| v > b) {
            best = Some((i, v));
        }
    }
    best.map(|b| b.0)
}

/// Largest remainders of the quotas `m w_i`.
fn hamilton(weights: &[f64], m: usize) -> Vec<usize> {
    let quotas: Vec<f64> = weights.iter().map(|w| w * m as f64).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let mut rem: Vec<f64> = quotas.iter().zip(&counts).map(|(q, &c)| q - c as f64).collect();
    // Round-off in the quotas can leave the floors summing above m.
    while counts.iter().sum::<usize>() > m {
        let i = argmax(counts.iter().zip(weights).map(|(&c, w)| if c > 0 { c as f64 - w * m as f64 } else { f64::NAN })).expect("some count positive");
        counts[i] -= 1;
    }
    while counts.iter().sum::<usize>() < m {
        let i = argmax(rem.iter().copied()).expect("non-empty");
        counts[i] += 1;
        rem[i] = f64::NEG_INFINITY;
    }
    counts
}

/// Divisor method: each seat goes to the largest `w_i / divisor(n_i)`.
fn divisor_method(weights: &[f64], m: usize, start: usize, divisor: impl Fn(usize) -> f64) -> Vec<usize> {
    let mut counts = vec![start; weights.len()];
    while counts.iter().sum::<usize>() < m {
        let i = argmax(
            weights
                .iter()
                .zip(&counts)
                .map(|(&w, &c)| if w > 0.0 { w / divisor(c) } else { f64::NAN }),
        )
        .expect("a positive weight");
        counts[i] += 1;
    }
    counts
}

/// Efficient rounding: `ceil((m - J/2) w_i)` with at least one per
/// condition, then seats added at the smallest `n_i / w_i` or removed at the
/// largest `(n_i - 1) / w_i` until the total is `m`.
fn modified_adams(weights: &[f64], m: usize) -> Result<Vec<usize>> {
    let j = weights.len();
    if m < j {
        return Err(GlmmError::Apportion(format!(
            "modified Adams needs m >= {j} conditions, got m = {m}"
        )));
    }
    let scale = m as f64 - j as f64 / 2.0;
    let mut counts: Vec<usize> = weights.iter().map(|w| ((scale * w).ceil() as usize).max(1)).collect();
    loop {
        let total: usize = counts.iter().sum();
        if total == m {
            return Ok(counts);
        }
        if total < m {
            let i = argmax(weights.iter().zip(&counts).map(|(&w, &c)| if w > 0.0 { -(c as f64) / w } else { f64::NAN }))
                .expect("a positive weight");
            counts[i] += 1;
        } else {
            let i = argmax(weights.iter().zip(&counts).map(|(&w, &c)| {
                if c > 1 {
                    (c as f64 - 1.0) / w
                } else {
                    f64::NAN
                }
            }))
            .expect("total above m implies a count above one");
            counts[i] -= 1;
        }
    }
}

/// Integer counts summing to `m` from a weight vector on the simplex.
pub fn apportion(weights: &[f64], m: usize, method: ApportionMethod) -> Result<Vec<usize>> {
    check(weights, m)?;
    Ok(match method {
        ApportionMethod::Hamilton => hamilton(weights, m),
        ApportionMethod::Webster => divisor_method(weights, m, 0, |c| c as f64 + 0.5),
        ApportionMethod::Jefferson => divisor_method(weights, m, 0, |c| c as f64 + 1.0),
        ApportionMethod::ModifiedAdams => modified_adams(weights, m)?,
    })
}

/// Apportionment under every method; methods that fail are reported as errors.
pub fn apportion_all(weights: &[f64], m: usize) -> Vec<(ApportionMethod, Result<Vec<usize>>)> {
    ApportionMethod::ALL.iter().map(|&k| (k, apportion(weights, m, k))).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn halves() {
        for k in ApportionMethod::ALL {
            assert_eq!(apportion(&[0.5, 0.5], 4, k).unwrap(), vec![2, 2], "{k:?}");
        }
    }

    #[test]
    fn six_condition_weights_hamilton() {
        let w = [0.2377032, 0.1311486, 0.1311482, 0.1311482, 0.1311486, 0.2377032];
        assert_eq!(apportion(&w, 2, ApportionMethod::Hamilton).unwrap(), vec![1, 0, 0, 0, 0, 1]);
    }

    #[test]
    fn jefferson_matches_divisor_enumeration() {
        // Oracle: the counts floor(w_i / lambda) for a lambda found by bisection.
        let w = [0.6, 0.3, 0.1];
        let seats = |lam: f64| w.iter().map(|x| (x / lam).floor() as usize).collect::<Vec<_>>();
        let (mut lo, mut hi) = (1e-6, 1.0);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if seats(mid).iter().sum::<usize>() >= 10 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        assert_eq!(seats(lo), vec![6, 3, 1]);
        assert_eq!(apportion(&w, 10, ApportionMethod::Jefferson).unwrap(), seats(lo));
    }

    #[test]
    fn modified_adams_needs_enough_units() {
        assert!(apportion(&[0.2, 0.3, 0.5], 2, ApportionMethod::ModifiedAdams).is_err());
        let c = apportion(&[0.98, 0.01, 0.01], 5, ApportionMethod::ModifiedAdams).unwrap();
        assert_eq!(c.iter().sum::<usize>(), 5);
        assert!(c.iter().all(|&v| v >= 1));
    }

    #[test]
    fn weights_are_validated() {
        assert!(apportion(&[0.5, 0.4], 3, ApportionMethod::Hamilton).is_err());
        assert!(apportion(&[1.2, -0.2], 3, ApportionMethod::Hamilton).is_err());
    }
}
