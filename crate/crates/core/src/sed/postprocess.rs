//! Frame posteriors to events.

use crate::error::{Error, Result};
use crate::sed::EventAnnotation;
use crate::tensor::{Scalar, Tensor};

/// Sliding median over frames, per class, with edge replication.
pub fn median_filter<T: Scalar>(probs: &Tensor<T>, length: usize) -> Result<Tensor<T>> {
    if length % 2 == 0 {
        return Err(Error::Invalid(format!("median length must be odd, got {length}")));
    }
    let [frames, classes] = probs.dims::<2>("median_filter")?;
    let half = length / 2;
    let mut out = Tensor::zeros(vec![frames, classes]);
    let mut window = Vec::with_capacity(length);
    for c in 0..classes {
        for t in 0..frames {
            window.clear();
            for k in 0..length {
                let idx = (t + k).saturating_sub(half).min(frames - 1);
                window.push(probs.data()[idx * classes + c]);
            }
            window.sort_unstable_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
            out.data_mut()[t * classes + c] = window[half];
        }
    }
    Ok(out)
}

/// Thresholds each class and merges runs of active frames into events
/// spanning `[first · hop, (last + 1) · hop)`.
pub fn decode_events<T: Scalar>(
    probs: &Tensor<T>,
    thresholds: &[f64],
    hop_seconds: f64,
) -> Result<Vec<EventAnnotation>> {
    let [frames, classes] = probs.dims::<2>("decode_events")?;
    if thresholds.len() != classes {
        return Err(Error::Invalid(format!(
            "{} thresholds for {classes} classes",
            thresholds.len()
        )));
    }
    let mut events = Vec::new();
    for (c, &th) in thresholds.iter().enumerate() {
        let mut start = None;
        for t in 0..=frames {
            let active = t < frames && probs.data()[t * classes + c].as_f64() > th;
            match (active, start) {
                (true, None) => start = Some(t),
                (false, Some(s)) => {
                    events.push(EventAnnotation {
                        class: c,
                        onset: s as f64 * hop_seconds,
                        offset: t as f64 * hop_seconds,
                    });
                    start = None;
                }
                _ => {}
            }
        }
    }
    events.sort_by(|a, b| a.onset.total_cmp(&b.onset).then(a.class.cmp(&b.class)));
    Ok(events)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn col(v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(vec![v.len(), 1], v).unwrap()
    }

    #[test]
    fn median_examples() {
        let y = median_filter(&col(&[0., 1., 0., 1., 1., 1., 0.]), 3).unwrap();
        assert_eq!(y.data(), &[0., 0., 1., 1., 1., 1., 0.]);
        let c = col(&[0.3; 5]);
        assert_eq!(median_filter(&c, 5).unwrap(), c);
        let x = col(&[0.1, 0.9, 0.4]);
        assert_eq!(median_filter(&x, 1).unwrap(), x);
        assert!(median_filter(&x, 4).is_err());
    }

    #[test]
    fn decode_examples() {
        let mut p = vec![0.0; 40];
        for v in &mut p[10..20] {
            *v = 0.9;
        }
        let ev = decode_events(&col(&p), &[0.5], 0.064).unwrap();
        assert_eq!(ev.len(), 1);
        assert!((ev[0].onset - 0.64).abs() < 1e-12 && (ev[0].offset - 1.28).abs() < 1e-12);
        assert!(decode_events(&col(&[0.2; 8]), &[0.5], 0.1).unwrap().is_empty());
        let ev = decode_events(&col(&[1., 1., 0., 1.]), &[0.5], 1.0).unwrap();
        assert_eq!(ev.len(), 2);
        let ones = Tensor::<f64>::ones(vec![6, 2]);
        let ev = decode_events(&ones, &[0.5, 0.5], 0.5).unwrap();
        assert_eq!(ev.len(), 2);
        assert!(ev.iter().all(|e| e.onset == 0.0 && e.offset == 3.0));
    }
}
