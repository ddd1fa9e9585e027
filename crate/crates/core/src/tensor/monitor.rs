//! Opt-in recorder for normalisation invariants.
//!
//! While a [`MonitorGuard`] is alive, every softmax slice and every fusion
//! weight vector reports `|sum - 1|` and its minimum entry here.

use std::cell::RefCell;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Normalizer {
    Softmax,
    Fusion,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct InvariantStats {
    pub softmax_checks: u64,
    pub softmax_max_deviation: f64,
    pub softmax_min_value: f64,
    pub fusion_checks: u64,
    pub fusion_max_deviation: f64,
    pub fusion_min_value: f64,
}

thread_local! {
    static STATS: RefCell<Option<InvariantStats>> = const { RefCell::new(None) };
}

/// Collects statistics until dropped.
pub struct MonitorGuard {
    prev: Option<InvariantStats>,
}

impl MonitorGuard {
    pub fn stats(&self) -> InvariantStats {
        STATS.with(|s| s.borrow().clone().unwrap_or_default())
    }
}

impl Drop for MonitorGuard {
    fn drop(&mut self) {
        let prev = self.prev.take();
        STATS.with(|s| *s.borrow_mut() = prev);
    }
}

pub fn start() -> MonitorGuard {
    let fresh = InvariantStats {
        softmax_min_value: f64::INFINITY,
        fusion_min_value: f64::INFINITY,
        ..Default::default()
    };
    let prev = STATS.with(|s| s.borrow_mut().replace(fresh));
    MonitorGuard { prev }
}

pub fn is_active() -> bool {
    STATS.with(|s| s.borrow().is_some())
}

/// Records one normalised slice.
pub fn record(kind: Normalizer, slice: &[f64]) {
    STATS.with(|s| {
        if let Some(st) = s.borrow_mut().as_mut() {
            let dev = (slice.iter().sum::<f64>() - 1.0).abs();
            let min = slice.iter().copied().fold(f64::INFINITY, f64::min);
            match kind {
                Normalizer::Softmax => {
                    st.softmax_checks += 1;
                    st.softmax_max_deviation = st.softmax_max_deviation.max(dev);
                    st.softmax_min_value = st.softmax_min_value.min(min);
                }
                Normalizer::Fusion => {
                    st.fusion_checks += 1;
                    st.fusion_max_deviation = st.fusion_max_deviation.max(dev);
                    st.fusion_min_value = st.fusion_min_value.min(min);
                }
            }
        }
    });
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn records_only_while_guard_alive() {
        record(Normalizer::Softmax, &[0.5, 0.5]);
        assert!(!is_active());
        let g = start();
        record(Normalizer::Softmax, &[0.25, 0.75]);
        record(Normalizer::Fusion, &[0.5, 0.6]);
        let s = g.stats();
        assert_eq!(s.softmax_checks, 1);
        assert_eq!(s.fusion_checks, 1);
        assert!((s.fusion_max_deviation - 0.1).abs() < 1e-12);
        drop(g);
        assert!(!is_active());
    }
}
