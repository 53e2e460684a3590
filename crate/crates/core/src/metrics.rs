//! Dice overlap and training-stability statistics.

use std::fmt::Write as _;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Epochs reported by default in probe tables.
pub const DEFAULT_PROBE_EPOCHS: [usize; 7] = [1, 2, 3, 5, 10, 20, 50];

/// `2|P ∩ G| / (|P| + |G|)` for one class; 1.0 when the class is absent
/// from both masks.
pub fn dice(pred: &Array2<u8>, gt: &Array2<u8>, class_id: u8) -> Result<f64> {
    if pred.dim() != gt.dim() {
        return Err(Error::Argument(format!(
            "mask shapes differ: {:?} vs {:?}",
            pred.dim(),
            gt.dim()
        )));
    }
    let (mut both, mut p, mut g) = (0usize, 0usize, 0usize);
    for (&a, &b) in pred.iter().zip(gt.iter()) {
        let (ia, ib) = (a == class_id, b == class_id);
        p += ia as usize;
        g += ib as usize;
        both += (ia && ib) as usize;
    }
    if p + g == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * both as f64 / (p + g) as f64)
}

/// Unweighted mean of per-class Dice over `classes`.
pub fn mean_dice(pred: &Array2<u8>, gt: &Array2<u8>, classes: &[u8]) -> Result<f64> {
    if classes.is_empty() {
        return Err(Error::Argument("mean_dice needs at least one class".into()));
    }
    let mut sum = 0.0;
    for &c in classes {
        sum += dice(pred, gt, c)?;
    }
    Ok(sum / classes.len() as f64)
}

/// Foreground class ids `1..classes`.
pub fn foreground_classes(classes: usize) -> Vec<u8> {
    (1..classes as u8).collect()
}

/// Mean over image pairs of the per-image foreground mean Dice.
pub fn dataset_mean_dice<'a>(
    pairs: impl IntoIterator<Item = (&'a Array2<u8>, &'a Array2<u8>)>,
    classes: &[u8],
) -> Result<f64> {
    let (mut sum, mut n) = (0.0, 0usize);
    for (pred, gt) in pairs {
        sum += mean_dice(pred, gt, classes)?;
        n += 1;
    }
    if n == 0 {
        return Err(Error::Argument("no images to evaluate".into()));
    }
    Ok(sum / n as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeValue {
    pub epoch: usize,
    pub dice: f64,
}

/// Summary of a per-epoch Dice series. Epochs are 1-based.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StabilityReport {
    pub per_epoch_dice: Vec<f64>,
    pub best_epoch: usize,
    pub best_dice: f64,
    pub final_dice: f64,
    pub degradation_gap: f64,
    pub probe_epochs: Vec<usize>,
    pub probes: Vec<ProbeValue>,
    /// Requested probes past the end of the series.
    pub omitted_probes: Vec<usize>,
}

impl StabilityReport {
    pub fn probe(&self, epoch: usize) -> Option<f64> {
        self.probes.iter().find(|p| p.epoch == epoch).map(|p| p.dice)
    }

    pub fn epochs(&self) -> usize {
        self.per_epoch_dice.len()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// `epoch,dice` rows for the whole series.
    pub fn series_csv(&self) -> String {
        let mut out = String::from("epoch,dice\n");
        for (i, d) in self.per_epoch_dice.iter().enumerate() {
            let _ = writeln!(out, "{},{d:.6}", i + 1);
        }
        out
    }
}

/// Builds the report. The earliest epoch wins ties for best.
pub fn stability_report(per_epoch_dice: &[f64], probe_epochs: &[usize]) -> Result<StabilityReport> {
    if per_epoch_dice.is_empty() {
        return Err(Error::Argument("stability report needs at least one epoch".into()));
    }
    if let Some(bad) = per_epoch_dice.iter().find(|d| !d.is_finite()) {
        return Err(Error::Argument(format!("non-finite Dice value {bad}")));
    }
    let (best_idx, best_dice) = per_epoch_dice
        .iter()
        .copied()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, v)| {
            if v > bv {
                (i, v)
            } else {
                (bi, bv)
            }
        });
    let final_dice = *per_epoch_dice.last().unwrap();
    let (probes, omitted_probes): (Vec<_>, Vec<_>) = probe_epochs
        .iter()
        .partition(|&&e| e >= 1 && e <= per_epoch_dice.len());
    Ok(StabilityReport {
        per_epoch_dice: per_epoch_dice.to_vec(),
        best_epoch: best_idx + 1,
        best_dice,
        final_dice,
        degradation_gap: best_dice - final_dice,
        probe_epochs: probe_epochs.to_vec(),
        probes: probes
            .into_iter()
            .map(|e| ProbeValue {
                epoch: e,
                dice: per_epoch_dice[e - 1],
            })
            .collect(),
        omitted_probes,
    })
}

/// Probe table in the layout `name,Epoch 1,...,Best Performance`.
/// Omitted probes render as empty cells; `None` rows render as `FAILED`.
pub fn probe_table_csv(probe_epochs: &[usize], rows: &[(String, Option<&StabilityReport>)]) -> String {
    let mut out = String::from("run");
    for e in probe_epochs {
        let _ = write!(out, ",Epoch {e}");
    }
    out.push_str(",Best Performance,Best Epoch,Final,Gap\n");
    for (name, report) in rows {
        out.push_str(name);
        match report {
            Some(r) => {
                for &e in probe_epochs {
                    match r.probe(e) {
                        Some(d) => {
                            let _ = write!(out, ",{d:.4}");
                        }
                        None => out.push(','),
                    }
                }
                let _ = writeln!(
                    out,
                    ",{:.4},{},{:.4},{:.4}",
                    r.best_dice, r.best_epoch, r.final_dice, r.degradation_gap
                );
            }
            None => {
                for _ in 0..probe_epochs.len() + 4 {
                    out.push_str(",FAILED");
                }
                out.push('\n');
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn dice_hand_cases() {
        let a = array![[1u8, 1, 0], [0, 1, 0]];
        assert_eq!(dice(&a, &a, 1).unwrap(), 1.0);
        let b = array![[0u8, 0, 1], [1, 0, 1]];
        assert_eq!(dice(&a, &b, 1).unwrap(), 0.0);
        let empty = array![[0u8, 0], [0, 0]];
        assert_eq!(dice(&empty, &empty, 2).unwrap(), 1.0);
    }

    #[test]
    fn dice_size_six_four_overlap_three() {
        let pred = array![[1u8, 1, 1, 1, 1, 1, 0]];
        let gt = array![[0u8, 0, 0, 1, 1, 1, 1]];
        assert!((dice(&pred, &gt, 1).unwrap() - 0.6).abs() < 1e-12);
    }

    #[test]
    fn dice_shape_mismatch() {
        let a = array![[1u8, 0]];
        let b = array![[1u8], [0]];
        assert!(matches!(dice(&a, &b, 1), Err(Error::Argument(_))));
    }

    #[test]
    fn mean_dice_cases() {
        let gt = array![[1u8, 1, 2, 2]];
        let pred = array![[1u8, 1, 2, 0]];
        // class 1: 1.0, class 2: 2*1/(1+2)
        let m = mean_dice(&pred, &gt, &[1, 2]).unwrap();
        assert!((m - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-12);
        assert_eq!(mean_dice(&pred, &gt, &[1]).unwrap(), 1.0);
        assert!(mean_dice(&pred, &gt, &[]).is_err());
    }

    #[test]
    fn report_examples() {
        let r = stability_report(&[0.1, 0.2, 0.3], &DEFAULT_PROBE_EPOCHS).unwrap();
        assert_eq!((r.best_epoch, r.degradation_gap), (3, 0.0));
        assert_eq!(r.omitted_probes, vec![5, 10, 20, 50]);

        let mut series = vec![0.65; 50];
        series[0] = 0.5;
        series[1] = 0.7;
        series[49] = 0.6;
        let r = stability_report(&series, &DEFAULT_PROBE_EPOCHS).unwrap();
        assert_eq!(r.best_epoch, 2);
        assert_eq!(r.best_dice, 0.7);
        assert!((r.degradation_gap - 0.1).abs() < 1e-12);
        assert_eq!(r.probe(50), Some(0.6));

        let r = stability_report(&[0.4; 5], &[1, 2]).unwrap();
        assert_eq!((r.best_epoch, r.degradation_gap), (1, 0.0));
        assert!(stability_report(&[], &[1]).is_err());
    }

    #[test]
    fn probe_table_layout() {
        let r = stability_report(&[0.5, 0.7], &[1, 2, 3]).unwrap();
        let csv = probe_table_csv(&[1, 2, 3], &[("a".into(), Some(&r)), ("b".into(), None)]);
        let lines: Vec<_> = csv.lines().collect();
        assert_eq!(lines[0], "run,Epoch 1,Epoch 2,Epoch 3,Best Performance,Best Epoch,Final,Gap");
        assert_eq!(lines[1], "a,0.5000,0.7000,,0.7000,2,0.7000,0.0000");
        assert!(lines[2].starts_with("b,FAILED"));
    }
}
