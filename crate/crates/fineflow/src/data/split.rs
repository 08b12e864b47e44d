use crate::error::{Error, Result};

use super::{Sample, SplitRatios};

/// Chronological train / validation / test partition.
#[derive(Debug, Clone, PartialEq)]
pub struct Splits {
    pub train: Vec<Sample>,
    pub valid: Vec<Sample>,
    pub test: Vec<Sample>,
    /// Samples dropped for having too many zero coarse entries.
    pub removed: usize,
}

fn zero_fraction(s: &Sample) -> f64 {
    let v = s.coarse.values();
    v.iter().filter(|x| **x == 0.0).count() as f64 / v.len() as f64
}

/// Drops samples whose coarse map has more than `zero_threshold` zero
/// entries, then cuts the remainder into contiguous chronological
/// blocks. Train and validation sizes are floored; test takes the rest.
pub fn split_filter(samples: &[Sample], ratios: SplitRatios, zero_threshold: f64) -> Result<Splits> {
    let kept: Vec<Sample> = samples
        .iter()
        .filter(|s| zero_fraction(s) <= zero_threshold)
        .cloned()
        .collect();
    let removed = samples.len() - kept.len();
    let n = kept.len();
    let [rt, rv, _] = ratios.get();
    // the small offset absorbs representation error, e.g. 0.1 * 100
    let n_train = (rt * n as f64 + 1e-9).floor() as usize;
    let n_valid = (rv * n as f64 + 1e-9).floor() as usize;
    let n_test = n - n_train - n_valid;
    for (name, len) in [("train", n_train), ("validation", n_valid), ("test", n_test)] {
        if len == 0 {
            return Err(Error::domain(
                "split",
                format!("{name} split is empty ({n} samples after removing {removed}, ratios {ratios})"),
            ));
        }
    }
    let mut it = kept.into_iter();
    let train = it.by_ref().take(n_train).collect();
    let valid = it.by_ref().take(n_valid).collect();
    let test = it.collect();
    Ok(Splits {
        train,
        valid,
        test,
        removed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::external::ExternalRecord;
    use crate::grid::FlowMap;

    fn sample(t: i64, zero: bool) -> Sample {
        let v = if zero { 0.0 } else { 1.0 };
        Sample {
            timestamp: t,
            coarse: FlowMap::new(1, 1, vec![v * 4.0]).unwrap(),
            fine: FlowMap::new(2, 2, vec![v; 4]).unwrap(),
            external: ExternalRecord {
                temperature: 0.0,
                wind_speed: 0.0,
                weather: 0,
                holiday: false,
                weekend: false,
                day_of_week: 0,
                hour_of_day: 0,
                ticket_price: None,
            },
        }
    }

    #[test]
    fn ratio_sizes() {
        let s: Vec<_> = (0..100).map(|t| sample(t, false)).collect();
        let sp = split_filter(&s, "2:1:1".parse().unwrap(), 0.9).unwrap();
        assert_eq!((sp.train.len(), sp.valid.len(), sp.test.len()), (50, 25, 25));
        let sp = split_filter(&s, "8:1:1".parse().unwrap(), 0.9).unwrap();
        assert_eq!((sp.train.len(), sp.valid.len(), sp.test.len()), (80, 10, 10));
        assert_eq!(sp.train.last().unwrap().timestamp + 1, sp.valid[0].timestamp);
        assert_eq!(sp.valid.last().unwrap().timestamp + 1, sp.test[0].timestamp);
    }

    #[test]
    fn zero_maps_are_removed() {
        let s: Vec<_> = (0..9).map(|t| sample(t, t == 4)).collect();
        let sp = split_filter(&s, "2:1:1".parse().unwrap(), 0.9).unwrap();
        assert_eq!(sp.removed, 1);
        let all: Vec<_> = sp.train.iter().chain(&sp.valid).chain(&sp.test).map(|s| s.timestamp).collect();
        assert_eq!(all, vec![0, 1, 2, 3, 5, 6, 7, 8]);
    }

    #[test]
    fn empty_split_is_an_error() {
        let s: Vec<_> = (0..2).map(|t| sample(t, false)).collect();
        assert!(split_filter(&s, "2:1:1".parse().unwrap(), 0.9).is_err());
    }
}
