//! Evaluation metrics and intensity-trace diagnostics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// K x K counts, rows = true mark, columns = predicted mark.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn from_predictions(preds: &[usize], truths: &[usize], k: usize) -> Result<ConfusionMatrix> {
        if preds.len() != truths.len() {
            return Err(Error::Contract(format!(
                "{} predictions vs {} truths",
                preds.len(),
                truths.len()
            )));
        }
        if preds.is_empty() {
            return Err(Error::Contract("no predictions to score".into()));
        }
        let mut counts = vec![vec![0u64; k]; k];
        for (&p, &t) in preds.iter().zip(truths) {
            if p >= k || t >= k {
                return Err(Error::Contract(format!(
                    "mark out of range: pred {p}, truth {t}, k {k}"
                )));
            }
            counts[t][p] += 1;
        }
        Ok(ConfusionMatrix { counts })
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }
}

/// Unweighted mean of per-class F1 over the K declared classes. Classes
/// with no true and no predicted instances contribute 0, keeping scores
/// comparable across noise levels where rare classes vanish.
pub fn macro_f1(preds: &[usize], truths: &[usize], k: usize) -> Result<f64> {
    let cm = ConfusionMatrix::from_predictions(preds, truths, k)?;
    let mut sum = 0.0;
    for c in 0..k {
        let tp = cm.counts[c][c] as f64;
        let fp: f64 = (0..k).filter(|&t| t != c).map(|t| cm.counts[t][c] as f64).sum();
        let fn_: f64 = (0..k).filter(|&p| p != c).map(|p| cm.counts[c][p] as f64).sum();
        let denom = 2.0 * tp + fp + fn_;
        if denom > 0.0 {
            sum += 2.0 * tp / denom;
        }
    }
    Ok(sum / k as f64)
}

/// Root mean squared error in the caller's (denormalized) units.
pub fn rmse(preds: &[f64], truths: &[f64]) -> Result<f64> {
    if preds.len() != truths.len() {
        return Err(Error::Contract(format!(
            "{} predictions vs {} truths",
            preds.len(),
            truths.len()
        )));
    }
    if preds.is_empty() {
        return Err(Error::Contract("no values to score".into()));
    }
    let mse = preds
        .iter()
        .zip(truths)
        .map(|(p, t)| (p - t) * (p - t))
        .sum::<f64>()
        / preds.len() as f64;
    Ok(mse.sqrt())
}

/// Flattened intensity-head outputs over a fixed probe dataset, tagged with
/// the probe's content hash so only like-for-like traces are compared.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct IntensityTrace {
    pub probe_hash: String,
    /// Per position: mu, alpha, gamma vectors, flattened in probe order.
    pub values: Vec<f64>,
}

/// Divergence statistic for trace comparison.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DivergenceStat {
    MeanAbs,
    MeanSquared,
}

/// Mean absolute difference between two traces over one probe set.
pub fn intensity_divergence(a: &IntensityTrace, b: &IntensityTrace) -> Result<f64> {
    intensity_divergence_with(a, b, DivergenceStat::MeanAbs)
}

pub fn intensity_divergence_with(
    a: &IntensityTrace,
    b: &IntensityTrace,
    stat: DivergenceStat,
) -> Result<f64> {
    if a.probe_hash != b.probe_hash {
        return Err(Error::Contract(format!(
            "probe hash mismatch: {} vs {}",
            a.probe_hash, b.probe_hash
        )));
    }
    if a.values.len() != b.values.len() {
        return Err(Error::Contract(format!(
            "trace lengths differ: {} vs {}",
            a.values.len(),
            b.values.len()
        )));
    }
    if a.values.is_empty() {
        return Err(Error::Contract("empty traces".into()));
    }
    let n = a.values.len() as f64;
    let d = match stat {
        DivergenceStat::MeanAbs => a
            .values
            .iter()
            .zip(&b.values)
            .map(|(x, y)| (x - y).abs())
            .sum::<f64>(),
        DivergenceStat::MeanSquared => a
            .values
            .iter()
            .zip(&b.values)
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>(),
    };
    Ok(d / n)
}

/// Output of the compounded-noise diagnostic: how far each corrupted-data
/// model's intensity head drifted from the clean-data reference, and whether
/// joint noise exceeds the individual effects.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CompoundingReport {
    pub stat: DivergenceStat,
    pub d_clean: f64,
    pub d_time: f64,
    pub d_label: f64,
    pub d_both: f64,
    /// `d_both / (d_time + d_label)`; None when the denominator is zero
    /// (the NaN sentinel in JSON form).
    pub ratio: Option<f64>,
    /// Whether `d_both > max(d_time, d_label)`.
    pub compounding: bool,
}

pub fn compounding_report(
    clean: &IntensityTrace,
    time_noise: &IntensityTrace,
    label_noise: &IntensityTrace,
    both_noise: &IntensityTrace,
    stat: DivergenceStat,
) -> Result<CompoundingReport> {
    let d_clean = intensity_divergence_with(clean, clean, stat)?;
    let d_time = intensity_divergence_with(clean, time_noise, stat)?;
    let d_label = intensity_divergence_with(clean, label_noise, stat)?;
    let d_both = intensity_divergence_with(clean, both_noise, stat)?;
    let denom = d_time + d_label;
    let ratio = if denom > 0.0 { Some(d_both / denom) } else { None };
    Ok(CompoundingReport {
        stat,
        d_clean,
        d_time,
        d_label,
        d_both,
        ratio,
        compounding: d_both > d_time.max(d_label),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::seq::SliceRandom;

    #[test]
    fn perfect_predictions_score_one() {
        let truths = vec![0, 1, 2, 0, 1, 2];
        assert_eq!(macro_f1(&truths, &truths, 3).unwrap(), 1.0);
    }

    #[test]
    fn hand_computed_confusion_case() {
        // truths [0,0,1,1], preds [0,1,1,1]:
        // class 0: P=1, R=1/2, F1=2/3; class 1: P=2/3, R=1, F1=4/5.
        let f1 = macro_f1(&[0, 1, 1, 1], &[0, 0, 1, 1], 2).unwrap();
        assert!((f1 - (2.0 / 3.0 + 4.0 / 5.0) / 2.0).abs() < 1e-12);
        assert!((f1 - 0.7333).abs() < 1e-4);
    }

    #[test]
    fn one_class_predictor_on_balanced_truth() {
        // All predictions class 0 on a balanced 2-class truth:
        // class 0: P=1/2, R=1, F1=2/3; class 1: zero support in preds -> 0.
        let f1 = macro_f1(&[0, 0, 0, 0], &[0, 0, 1, 1], 2).unwrap();
        assert!((f1 - (2.0 / 3.0) / 2.0).abs() < 1e-12);
        assert!((f1 - 0.3333).abs() < 1e-4);
    }

    #[test]
    fn absent_class_contributes_zero_not_skip() {
        // K = 3 but class 2 never appears; its F1 term is 0.
        let f1 = macro_f1(&[0, 1], &[0, 1], 3).unwrap();
        assert!((f1 - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn macro_f1_is_permutation_invariant() {
        let mut r = crate::rng::stream(55, &[0]);
        let preds = vec![0, 1, 2, 2, 1, 0, 1, 2, 0, 0];
        let truths = vec![0, 2, 2, 1, 1, 0, 0, 2, 1, 0];
        let base = macro_f1(&preds, &truths, 3).unwrap();
        let mut idx: Vec<usize> = (0..preds.len()).collect();
        for _ in 0..10 {
            idx.shuffle(&mut r);
            let p: Vec<usize> = idx.iter().map(|&i| preds[i]).collect();
            let t: Vec<usize> = idx.iter().map(|&i| truths[i]).collect();
            assert_eq!(macro_f1(&p, &t, 3).unwrap(), base);
        }
        // Relabeling classes by a permutation applied to both sides too.
        let relabel = [2usize, 0, 1];
        let p: Vec<usize> = preds.iter().map(|&x| relabel[x]).collect();
        let t: Vec<usize> = truths.iter().map(|&x| relabel[x]).collect();
        assert!((macro_f1(&p, &t, 3).unwrap() - base).abs() < 1e-12);
    }

    #[test]
    fn macro_f1_rejects_length_mismatch() {
        assert!(matches!(macro_f1(&[0], &[0, 1], 2), Err(Error::Contract(_))));
    }

    #[test]
    fn rmse_examples() {
        assert_eq!(rmse(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        let v = rmse(&[0.0, 0.0], &[3.0, 4.0]).unwrap();
        assert!((v - 12.5f64.sqrt()).abs() < 1e-12);
        assert!((v - 3.5355).abs() < 1e-4);
    }

    #[test]
    fn rmse_scales_homogeneously() {
        let preds = [0.5, 1.5, -0.25];
        let truths = [0.0, 1.0, 0.25];
        let base = rmse(&preds, &truths).unwrap();
        let c = -3.0f64;
        let scaled_preds: Vec<f64> = preds.iter().map(|x| c * x).collect();
        let scaled_truths: Vec<f64> = truths.iter().map(|x| c * x).collect();
        let scaled = rmse(&scaled_preds, &scaled_truths).unwrap();
        assert!((scaled - c.abs() * base).abs() < 1e-12);
    }

    fn trace(vals: &[f64]) -> IntensityTrace {
        IntensityTrace {
            probe_hash: "h".into(),
            values: vals.to_vec(),
        }
    }

    #[test]
    fn divergence_of_trace_with_itself_is_zero() {
        let t = trace(&[0.1, 0.5, 2.0]);
        assert_eq!(intensity_divergence(&t, &t).unwrap(), 0.0);
    }

    #[test]
    fn single_point_delta_is_delta_over_m() {
        let a = trace(&[1.0, 1.0, 1.0, 1.0]);
        let mut bvals = a.values.clone();
        bvals[2] += 0.6;
        let b = trace(&bvals);
        assert!((intensity_divergence(&a, &b).unwrap() - 0.6 / 4.0).abs() < 1e-12);
    }

    #[test]
    fn divergence_is_a_metric() {
        let a = trace(&[0.0, 1.0, 2.0]);
        let b = trace(&[0.5, 0.5, 2.5]);
        let c = trace(&[1.0, 0.0, 3.0]);
        let dab = intensity_divergence(&a, &b).unwrap();
        let dba = intensity_divergence(&b, &a).unwrap();
        assert_eq!(dab, dba);
        let dac = intensity_divergence(&a, &c).unwrap();
        let dbc = intensity_divergence(&b, &c).unwrap();
        assert!(dac <= dab + dbc + 1e-12);
    }

    #[test]
    fn divergence_rejects_probe_mismatch() {
        let a = trace(&[0.0]);
        let mut b = trace(&[0.0]);
        b.probe_hash = "other".into();
        assert!(matches!(intensity_divergence(&a, &b), Err(Error::Contract(_))));
    }

    #[test]
    fn compounding_report_degenerate_cases() {
        let t = trace(&[1.0, 2.0]);
        let r = compounding_report(&t, &t, &t, &t, DivergenceStat::MeanAbs).unwrap();
        assert_eq!(r.d_both, 0.0);
        assert!(r.ratio.is_none());
        assert!(!r.compounding);

        let shifted = trace(&[1.5, 2.5]);
        let r2 = compounding_report(&t, &shifted, &shifted, &t, DivergenceStat::MeanAbs).unwrap();
        assert_eq!(r2.d_both, 0.0);
        assert_eq!(r2.ratio, Some(0.0));
    }
}
