//! Weighted product-limit survival estimation.

use elas_core::error::SimError;

/// A right-continuous step function with jumps at the event times.
#[derive(Debug, Clone, PartialEq)]
pub struct StepSurvival {
    /// Distinct event times, ascending.
    pub times: Vec<f64>,
    /// Survival just after each event time.
    pub survival: Vec<f64>,
}

impl StepSurvival {
    pub fn at(&self, t: f64) -> f64 {
        let n = self.times.partition_point(|&x| x <= t);
        if n == 0 {
            1.0
        } else {
            self.survival[n - 1]
        }
    }

    /// Smallest event time at which survival has dropped to `u` or below.
    pub fn first_at_or_below(&self, u: f64) -> Option<f64> {
        self.times
            .iter()
            .zip(&self.survival)
            .find(|(_, &s)| s <= u)
            .map(|(&t, _)| t)
    }

    /// Probability mass at each event time.
    pub fn jumps(&self) -> Vec<(f64, f64)> {
        let mut prev = 1.0;
        self.times
            .iter()
            .zip(&self.survival)
            .map(|(&t, &s)| {
                let j = prev - s;
                prev = s;
                (t, j)
            })
            .collect()
    }
}

/// Product-limit estimator where each subject contributes its weight to
/// the risk and event sums. Censorings tied with an event count as still
/// at risk at that time.
pub fn weighted_km(times: &[f64], events: &[bool], weights: &[f64]) -> Result<StepSurvival, SimError> {
    if times.len() != events.len() || times.len() != weights.len() {
        return Err(SimError::Data("times, events and weights differ in length".into()));
    }
    for (&t, &w) in times.iter().zip(weights) {
        if !(t >= 0.0) || !t.is_finite() {
            return Err(SimError::Data(format!("survival time must be finite and nonnegative, got {t}")));
        }
        if !(w > 0.0) || !w.is_finite() {
            return Err(SimError::Data(format!("weight must be positive, got {w}")));
        }
    }
    let mut order: Vec<usize> = (0..times.len()).collect();
    order.sort_by(|&a, &b| times[a].total_cmp(&times[b]));
    let mut at_risk: f64 = weights.iter().sum();
    let mut s = 1.0;
    let mut out = StepSurvival {
        times: Vec::new(),
        survival: Vec::new(),
    };
    let mut i = 0;
    while i < order.len() {
        let t = times[order[i]];
        let mut died = 0.0;
        let mut leaving = 0.0;
        while i < order.len() && times[order[i]] == t {
            let k = order[i];
            if events[k] {
                died += weights[k];
            }
            leaving += weights[k];
            i += 1;
        }
        if died > 0.0 {
            s *= 1.0 - died / at_risk;
            out.times.push(t);
            out.survival.push(s.max(0.0));
        }
        at_risk -= leaving;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn unweighted_two_events() {
        let s = weighted_km(&[1.0, 2.0], &[true, true], &[1.0, 1.0]).unwrap();
        assert_eq!(s.at(1.0), 0.5);
        assert_eq!(s.at(2.0), 0.0);
        assert_eq!(s.at(0.5), 1.0);
    }

    #[test]
    fn weighted_two_events() {
        let s = weighted_km(&[1.0, 2.0], &[true, true], &[2.0, 1.0]).unwrap();
        assert!((s.at(1.0) - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(s.at(2.0), 0.0);
    }

    #[test]
    fn all_censored_never_drops() {
        let s = weighted_km(&[1.0, 3.0], &[false, false], &[1.0, 1.0]).unwrap();
        assert!(s.times.is_empty());
        assert_eq!(s.at(10.0), 1.0);
        assert_eq!(s.first_at_or_below(0.9), None);
    }

    #[test]
    fn rejects_nonpositive_weight() {
        assert!(weighted_km(&[1.0], &[true], &[0.0]).is_err());
    }

    /// Textbook estimator: at each distinct event time, deaths over number at risk.
    fn textbook(times: &[f64], events: &[bool]) -> Vec<(f64, f64)> {
        let mut distinct: Vec<f64> = times.iter().zip(events).filter(|(_, &e)| e).map(|(&t, _)| t).collect();
        distinct.sort_by(f64::total_cmp);
        distinct.dedup();
        let mut s = 1.0;
        distinct
            .into_iter()
            .map(|t| {
                let n = times.iter().filter(|&&x| x >= t).count() as f64;
                let d = times.iter().zip(events).filter(|(&x, &e)| e && x == t).count() as f64;
                s *= 1.0 - d / n;
                (t, s)
            })
            .collect()
    }

    proptest! {
        #[test]
        fn unit_weights_match_textbook(
            data in prop::collection::vec((0u8..6, any::<bool>()), 1..12),
        ) {
            let times: Vec<f64> = data.iter().map(|(t, _)| f64::from(*t)).collect();
            let events: Vec<bool> = data.iter().map(|(_, e)| *e).collect();
            let s = weighted_km(&times, &events, &vec![1.0; times.len()]).unwrap();
            let oracle = textbook(&times, &events);
            prop_assert_eq!(s.times.len(), oracle.len());
            for ((t, v), (ot, ov)) in s.times.iter().zip(&s.survival).zip(&oracle) {
                prop_assert_eq!(t, ot);
                prop_assert!((v - ov).abs() < 1e-12);
            }
        }

        #[test]
        fn constant_weight_scale_invariant(
            data in prop::collection::vec((0u8..6, any::<bool>()), 1..12),
            c in 0.01f64..100.0,
        ) {
            let times: Vec<f64> = data.iter().map(|(t, _)| f64::from(*t)).collect();
            let events: Vec<bool> = data.iter().map(|(_, e)| *e).collect();
            let a = weighted_km(&times, &events, &vec![1.0; times.len()]).unwrap();
            let b = weighted_km(&times, &events, &vec![c; times.len()]).unwrap();
            prop_assert_eq!(&a.times, &b.times);
            for (x, y) in a.survival.iter().zip(&b.survival) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }
    }
}
