//! Confidence thresholds for noise flagging.
//!
//! Two tau modes exist: an exact nearest-rank percentile over a full dataset,
//! and a streaming variant that tracks the percentile of a sliding window of
//! recent confidences. Flags are strict: z = 1 iff confidence < tau.

use std::collections::VecDeque;

use crate::error::{Error, Result};
use crate::pref::Confidence;

/// Nearest-rank K-th percentile, ascending: sort the values and take the
/// element at 0-based index `ceil(k/100 * n) - 1`.
pub fn percentile_tau(confidences: &[Confidence], k_percent: f64) -> Result<f64> {
    if confidences.is_empty() {
        return Err(Error::invalid_input(
            "confidences",
            "percentile over an empty list",
        ));
    }
    if !(k_percent > 0.0 && k_percent < 100.0) {
        return Err(Error::Config(format!(
            "k_percent must lie in (0, 100), got {k_percent}"
        )));
    }
    let mut vals: Vec<f64> = confidences.iter().map(|c| c.value()).collect();
    vals.sort_by(|a, b| a.partial_cmp(b).expect("confidences are finite"));
    let n = vals.len();
    let rank = ((k_percent * n as f64) / 100.0).ceil() as usize;
    let idx = rank.clamp(1, n) - 1;
    Ok(vals[idx])
}

/// Strict-below flags for a batch of confidences against a fixed tau.
pub fn flags_below(confidences: &[Confidence], tau: f64) -> Vec<bool> {
    confidences.iter().map(|c| c.value() < tau).collect()
}

/// Streaming percentile threshold over the most recent `window` confidences.
///
/// Each pushed sample joins the window before tau is computed, so a constant
/// stream yields tau equal to that constant at every step.
#[derive(Debug, Clone)]
pub struct SmaWindow {
    window: usize,
    k_percent: f64,
    recent: VecDeque<f64>,
}

impl SmaWindow {
    pub fn new(window: usize, k_percent: f64) -> Result<Self> {
        if window == 0 {
            return Err(Error::Config("sma window must be >= 1".to_string()));
        }
        if !(k_percent > 0.0 && k_percent < 100.0) {
            return Err(Error::Config(format!(
                "k_percent must lie in (0, 100), got {k_percent}"
            )));
        }
        Ok(Self {
            window,
            k_percent,
            recent: VecDeque::with_capacity(window),
        })
    }

    /// Number of samples currently in the window.
    pub fn len(&self) -> usize {
        self.recent.len()
    }

    pub fn is_empty(&self) -> bool {
        self.recent.is_empty()
    }

    /// Pushes one confidence and returns the threshold over the updated
    /// window.
    pub fn push(&mut self, c: Confidence) -> f64 {
        if self.recent.len() == self.window {
            self.recent.pop_front();
        }
        self.recent.push_back(c.value());
        let snapshot: Vec<Confidence> = self
            .recent
            .iter()
            .map(|&v| Confidence::new(v).expect("window stores valid confidences"))
            .collect();
        percentile_tau(&snapshot, self.k_percent).expect("window is non-empty")
    }

    /// Pushes one confidence and flags it against the updated threshold.
    pub fn push_and_flag(&mut self, c: Confidence) -> (f64, bool) {
        let tau = self.push(c);
        (tau, c.value() < tau)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn conf(v: f64) -> Confidence {
        Confidence::new(v).unwrap()
    }

    /// Brute-force oracle: tau is the smallest value v in the list such that
    /// at least k% of the list is <= v (nearest-rank definition spelled out
    /// with counting instead of indexing).
    fn tau_by_counting(vals: &[f64], k_percent: f64) -> f64 {
        let n = vals.len();
        let need = ((k_percent * n as f64) / 100.0).ceil() as usize;
        let mut sorted = vals.to_vec();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        for &v in &sorted {
            let at_or_below = vals.iter().filter(|&&x| x <= v).count();
            if at_or_below >= need {
                return v;
            }
        }
        *sorted.last().unwrap()
    }

    #[test]
    fn thousand_distinct_flags_exactly_ninety_nine() {
        // 1000 distinct confidences in a scrambled order.
        let vals: Vec<f64> = (0..1000u64)
            .map(|i| ((i * 67) % 1000) as f64 / 1000.0 + 0.0001)
            .map(|v| v.min(1.0))
            .collect();
        let confs: Vec<Confidence> = vals.iter().map(|&v| conf(v)).collect();
        let tau = percentile_tau(&confs, 10.0).unwrap();
        assert_eq!(tau, tau_by_counting(&vals, 10.0));
        let flags = flags_below(&confs, tau);
        assert_eq!(flags.iter().filter(|&&z| z).count(), 99);
    }

    #[test]
    fn equal_confidences_flag_nothing() {
        let confs = vec![conf(0.7); 64];
        let tau = percentile_tau(&confs, 10.0).unwrap();
        assert_eq!(tau, 0.7);
        assert!(flags_below(&confs, tau).iter().all(|&z| !z));
    }

    #[test]
    fn empty_list_errors() {
        assert!(percentile_tau(&[], 10.0).is_err());
    }

    #[test]
    fn rank_matches_counting_oracle_for_varied_k() {
        let vals: Vec<f64> = (0..237u64).map(|i| ((i * 101) % 237) as f64 / 237.0).collect();
        let confs: Vec<Confidence> = vals.iter().map(|&v| conf(v)).collect();
        for k in [1.0, 7.5, 10.0, 25.0, 33.3, 50.0, 90.0, 99.9] {
            assert_eq!(
                percentile_tau(&confs, k).unwrap(),
                tau_by_counting(&vals, k),
                "k = {k}"
            );
        }
    }

    #[test]
    fn sma_constant_stream_returns_constant() {
        let mut w = SmaWindow::new(50, 10.0).unwrap();
        for _ in 0..200 {
            let (tau, flag) = w.push_and_flag(conf(0.66));
            assert_eq!(tau, 0.66);
            assert!(!flag);
        }
    }

    #[test]
    fn sma_window_matches_sliding_sort_oracle() {
        // Stream 0.01..=1.00; at step 100 the window holds samples 51..100
        // and tau is their 5th smallest value, 0.55.
        let mut w = SmaWindow::new(50, 10.0).unwrap();
        let mut last_tau = 0.0;
        for i in 1..=100 {
            last_tau = w.push(conf(i as f64 / 100.0));
        }
        assert!((last_tau - 0.55).abs() < 1e-15, "got {last_tau}");

        // Cross-check every step against a brute-force window sort.
        let stream: Vec<f64> = (1..=100).map(|i| ((i * 37) % 100) as f64 / 100.0).collect();
        let mut w = SmaWindow::new(50, 10.0).unwrap();
        for (i, &v) in stream.iter().enumerate() {
            let tau = w.push(conf(v));
            let lo = i.saturating_sub(49);
            let mut window: Vec<f64> = stream[lo..=i].to_vec();
            window.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let rank = ((10.0 * window.len() as f64) / 100.0).ceil() as usize;
            assert_eq!(tau, window[rank - 1], "step {i}");
        }
    }

    #[test]
    fn sma_uses_all_seen_before_window_fills() {
        let mut w = SmaWindow::new(50, 10.0).unwrap();
        let tau1 = w.push(conf(0.9));
        assert_eq!(tau1, 0.9); // only one sample seen
        let tau2 = w.push(conf(0.1));
        assert_eq!(tau2, 0.1); // rank ceil(0.1*2)=1 -> smallest
    }
}
