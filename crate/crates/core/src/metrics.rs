//! Example-based multi-label metrics: per-sample precision, recall, F1 and
//! F2, averaged over the evaluation set.

use std::fmt::Write as _;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SampleMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub f2: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub f2: f64,
    pub n_samples: usize,
    pub per_sample: Option<Vec<SampleMetrics>>,
}

/// `(1+β²)·P·R / (β²·P + R)`, defined as 0 when `P = R = 0`.
pub fn f_beta(precision: f64, recall: f64, beta: f64) -> f64 {
    let b2 = beta * beta;
    let denom = b2 * precision + recall;
    if denom == 0.0 {
        0.0
    } else {
        (1.0 + b2) * precision * recall / denom
    }
}

/// Metrics of one sample from binary indicator vectors. An empty prediction
/// against a non-empty truth scores 0 everywhere; two empty sets score 1.
pub fn example_metrics(y_true: &[u8], y_pred: &[u8]) -> Result<SampleMetrics> {
    if y_true.len() != y_pred.len() {
        return Err(Error::dim(format!(
            "label vectors differ in length: {} vs {}",
            y_true.len(),
            y_pred.len()
        )));
    }
    let truth = y_true.iter().filter(|&&v| v != 0).count();
    let predicted = y_pred.iter().filter(|&&v| v != 0).count();
    let tp = y_true.iter().zip(y_pred).filter(|(&t, &p)| t != 0 && p != 0).count();
    if truth == 0 && predicted == 0 {
        return Ok(SampleMetrics { precision: 1.0, recall: 1.0, f1: 1.0, f2: 1.0 });
    }
    let precision = if predicted == 0 { 0.0 } else { tp as f64 / predicted as f64 };
    let recall = if truth == 0 { 0.0 } else { tp as f64 / truth as f64 };
    Ok(SampleMetrics {
        precision,
        recall,
        f1: f_beta(precision, recall, 1.0),
        f2: f_beta(precision, recall, 2.0),
    })
}

/// Arithmetic means of per-sample metrics, summed in input order.
pub fn aggregate(samples: &[SampleMetrics], keep_per_sample: bool) -> Result<MetricsReport> {
    if samples.is_empty() {
        return Err(Error::usage("cannot aggregate metrics over zero samples"));
    }
    let n = samples.len() as f64;
    let mean = |f: fn(&SampleMetrics) -> f64| samples.iter().map(f).sum::<f64>() / n;
    Ok(MetricsReport {
        precision: mean(|s| s.precision),
        recall: mean(|s| s.recall),
        f1: mean(|s| s.f1),
        f2: mean(|s| s.f2),
        n_samples: samples.len(),
        per_sample: keep_per_sample.then(|| samples.to_vec()),
    })
}

/// Convenience over paired label vectors.
pub fn evaluate_pairs<'a>(
    pairs: impl IntoIterator<Item = (&'a [u8], &'a [u8])>,
) -> Result<MetricsReport> {
    let per: Vec<SampleMetrics> =
        pairs.into_iter().map(|(t, p)| example_metrics(t, p)).collect::<Result<_>>()?;
    aggregate(&per, false)
}

impl MetricsReport {
    /// Human-readable summary.
    pub fn to_text(&self) -> String {
        format!(
            "samples   {}\nprecision {:.4}\nrecall    {:.4}\nF1        {:.4}\nF2        {:.4}\n",
            self.n_samples, self.precision, self.recall, self.f1, self.f2
        )
    }

    /// Machine-readable `key=value` lines.
    pub fn to_key_values(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "n_samples={}", self.n_samples);
        let _ = writeln!(s, "precision={}", self.precision);
        let _ = writeln!(s, "recall={}", self.recall);
        let _ = writeln!(s, "f1={}", self.f1);
        let _ = writeln!(s, "f2={}", self.f2);
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(c: usize, idx: &[usize]) -> Vec<u8> {
        let mut v = vec![0; c];
        for &i in idx {
            v[i] = 1;
        }
        v
    }

    #[test]
    fn perfect_match() {
        let y = set(5, &[0, 3]);
        let m = example_metrics(&y, &y).unwrap();
        assert_eq!(m, SampleMetrics { precision: 1.0, recall: 1.0, f1: 1.0, f2: 1.0 });
    }

    #[test]
    fn half_overlap() {
        let m = example_metrics(&set(4, &[1, 2]), &set(4, &[2, 3])).unwrap();
        assert_eq!((m.precision, m.recall, m.f1, m.f2), (0.5, 0.5, 0.5, 0.5));
    }

    #[test]
    fn empty_conventions() {
        let m = example_metrics(&set(3, &[1]), &set(3, &[])).unwrap();
        assert_eq!((m.precision, m.recall, m.f1, m.f2), (0.0, 0.0, 0.0, 0.0));
        let m = example_metrics(&set(3, &[]), &set(3, &[])).unwrap();
        assert_eq!(m.f1, 1.0);
        assert!(example_metrics(&[1, 0], &[1]).is_err());
    }

    #[test]
    fn f2_leans_towards_recall() {
        // P = 1, R = 1/3
        let m = example_metrics(&set(4, &[0, 1, 2]), &set(4, &[0])).unwrap();
        assert!((m.f1 - 0.5).abs() < 1e-15);
        assert!((m.f2 - 5.0 / 13.0).abs() < 1e-15);
        assert!((m.f2 - m.recall).abs() < (m.f1 - m.recall).abs());
    }

    #[test]
    fn aggregation() {
        let one = example_metrics(&[1, 0], &[1, 0]).unwrap();
        let zero = example_metrics(&[1, 0], &[0, 1]).unwrap();
        let r = aggregate(&[one], true).unwrap();
        assert_eq!((r.f1, r.recall, r.n_samples), (1.0, 1.0, 1));
        assert_eq!(r.per_sample.unwrap().len(), 1);
        let r = aggregate(&[one, zero], false).unwrap();
        assert_eq!(r.f1, 0.5);
        assert!(r.per_sample.is_none());
        assert!(matches!(aggregate(&[], false), Err(Error::Usage(_))));
    }

    #[test]
    fn key_values_parse_back() {
        let r = aggregate(&[example_metrics(&[1, 1], &[1, 0]).unwrap()], false).unwrap();
        let kv = r.to_key_values();
        let f1: f64 = kv.lines().find_map(|l| l.strip_prefix("f1=")).unwrap().parse().unwrap();
        assert_eq!(f1, r.f1);
    }
}
