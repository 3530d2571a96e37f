//! Event-based (collar) and intersection-based F1.
//!
//! Both metrics count per clip with [`EventCounts`]; summing counts over
//! clips and classes before computing F1 gives micro-averaged scores.

use std::ops::AddAssign;

use crate::sed::EventAnnotation;

/// Slack for comparisons of times that are equal in exact arithmetic.
const TIME_EPS: f64 = 1e-9;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct EventCounts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

impl AddAssign for EventCounts {
    fn add_assign(&mut self, o: Self) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.fn_ += o.fn_;
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl EventCounts {
    /// Ratios are 0 when their denominator is.
    pub fn prf(&self) -> Prf {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let precision = ratio(self.tp, self.tp + self.fp);
        let recall = ratio(self.tp, self.tp + self.fn_);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Prf { precision, recall, f1 }
    }
}

fn by_onset(events: &[EventAnnotation]) -> Vec<EventAnnotation> {
    let mut v = events.to_vec();
    v.sort_by(|a, b| {
        a.onset
            .total_cmp(&b.onset)
            .then(a.offset.total_cmp(&b.offset))
            .then(a.class.cmp(&b.class))
    });
    v
}

/// Greedy one-to-one matching in onset order. A prediction matches an unused
/// ground truth of its class when the onsets differ by at most `collar` and
/// the offsets by at most `max(collar, 0.2 · gt duration)`.
pub fn eb_counts(pred: &[EventAnnotation], gt: &[EventAnnotation], collar: f64) -> EventCounts {
    let pred = by_onset(pred);
    let gt = by_onset(gt);
    let mut used = vec![false; gt.len()];
    let mut tp = 0;
    for p in &pred {
        let hit = gt.iter().enumerate().position(|(i, g)| {
            !used[i]
                && g.class == p.class
                && (p.onset - g.onset).abs() <= collar + TIME_EPS
                && (p.offset - g.offset).abs() <= collar.max(0.2 * g.duration()) + TIME_EPS
        });
        if let Some(i) = hit {
            used[i] = true;
            tp += 1;
        }
    }
    EventCounts {
        tp,
        fp: pred.len() - tp,
        fn_: gt.len() - tp,
    }
}

pub fn eb_f1(pred: &[EventAnnotation], gt: &[EventAnnotation], collar: f64) -> Prf {
    eb_counts(pred, gt, collar).prf()
}

fn overlap(a: &EventAnnotation, b: &EventAnnotation) -> f64 {
    (a.offset.min(b.offset) - a.onset.max(b.onset)).max(0.0)
}

/// Merges overlapping same-class intervals so intersections are not counted twice.
fn merged(events: &[EventAnnotation], class: usize) -> Vec<EventAnnotation> {
    let mut out: Vec<EventAnnotation> = Vec::new();
    for e in by_onset(events).into_iter().filter(|e| e.class == class) {
        match out.last_mut() {
            Some(last) if e.onset <= last.offset => last.offset = last.offset.max(e.offset),
            _ => out.push(e),
        }
    }
    out
}

/// A prediction is eligible when at least `dtc` of it lies inside ground
/// truth of its class; eligible predictions are false positives otherwise. A
/// ground truth is detected (true positive) when eligible predictions cover
/// at least `gtc` of it, and missed otherwise.
pub fn ib_counts(pred: &[EventAnnotation], gt: &[EventAnnotation], dtc: f64, gtc: f64) -> EventCounts {
    let classes = pred.iter().chain(gt).map(|e| e.class + 1).max().unwrap_or(0);
    let mut counts = EventCounts::default();
    for c in 0..classes {
        let gts = merged(gt, c);
        let preds: Vec<_> = by_onset(pred).into_iter().filter(|e| e.class == c).collect();
        let mut eligible = Vec::new();
        for p in &preds {
            let inside: f64 = gts.iter().map(|g| overlap(p, g)).sum();
            if inside >= dtc * p.duration() - TIME_EPS {
                eligible.push(*p);
            } else {
                counts.fp += 1;
            }
        }
        let eligible = merged(&eligible, c);
        for g in gts.iter() {
            let covered: f64 = eligible.iter().map(|p| overlap(p, g)).sum();
            if covered >= gtc * g.duration() - TIME_EPS {
                counts.tp += 1;
            } else {
                counts.fn_ += 1;
            }
        }
    }
    counts
}

pub fn ib_f1(pred: &[EventAnnotation], gt: &[EventAnnotation], dtc: f64, gtc: f64) -> Prf {
    ib_counts(pred, gt, dtc, gtc).prf()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ev(class: usize, on: f64, off: f64) -> EventAnnotation {
        EventAnnotation::new(class, on, off).unwrap()
    }

    #[test]
    fn collar_examples() {
        let gt = vec![ev(0, 1.0, 2.0), ev(1, 3.0, 5.0)];
        assert_eq!(eb_f1(&gt, &gt, 0.2).f1, 1.0);
        assert_eq!(eb_f1(&[ev(0, 1.0, 2.0)], &[ev(0, 1.1, 2.1)], 0.2).f1, 1.0);
        let none = eb_f1(&[], &[ev(0, 1.0, 2.0)], 0.2);
        assert_eq!((none.recall, none.f1), (0.0, 0.0));
        // Offset tolerance grows with duration: 20% of 5 s is 1 s.
        assert_eq!(eb_f1(&[ev(0, 0.0, 6.1)], &[ev(0, 0.0, 5.0)], 0.2).f1, 0.0);
        assert_eq!(eb_f1(&[ev(0, 0.0, 6.1)], &[ev(0, 0.0, 5.0)], 0.2).precision, 0.0);
        assert_eq!(eb_f1(&[ev(0, 0.0, 5.9)], &[ev(0, 0.0, 5.0)], 0.2).f1, 1.0);
        // Wrong class never matches.
        assert_eq!(eb_f1(&[ev(1, 1.0, 2.0)], &[ev(0, 1.0, 2.0)], 0.2).f1, 0.0);
    }

    #[test]
    fn one_prediction_matches_one_truth() {
        let gt = vec![ev(0, 1.0, 2.0), ev(0, 1.05, 2.05)];
        let c = eb_counts(&[ev(0, 1.0, 2.0)], &gt, 0.2);
        assert_eq!(c, EventCounts { tp: 1, fp: 0, fn_: 1 });
    }

    #[test]
    fn intersection_examples() {
        let gt = vec![ev(0, 1.0, 2.0), ev(2, 4.0, 6.0)];
        assert_eq!(ib_f1(&gt, &gt, 0.5, 0.5).f1, 1.0);
        assert_eq!(ib_f1(&[ev(0, 0.0, 1.0)], &[ev(0, 0.5, 1.5)], 0.5, 0.5).f1, 1.0);
        assert_eq!(ib_f1(&[ev(0, 0.0, 1.0)], &[ev(0, 2.0, 3.0)], 0.5, 0.5).f1, 0.0);
        // Two halves jointly cover the truth.
        let c = ib_counts(&[ev(0, 0.0, 0.6), ev(0, 0.6, 1.0)], &[ev(0, 0.0, 1.0)], 0.5, 0.9);
        assert_eq!(c, EventCounts { tp: 1, fp: 0, fn_: 0 });
        // A mostly-outside prediction is a false positive and covers nothing.
        let c = ib_counts(&[ev(0, 0.0, 4.0)], &[ev(0, 0.0, 1.0)], 0.5, 0.5);
        assert_eq!(c, EventCounts { tp: 0, fp: 1, fn_: 1 });
    }
}
