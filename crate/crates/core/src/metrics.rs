//! Masked MAE / RMSE / MAPE over multi-step forecasts in raw units.

use serde::Serialize;

use crate::error::{Error, Result};

/// Horizons reported individually (1-based), when the forecast is that long.
pub const REPORTED_HORIZONS: [usize; 3] = [3, 6, 12];

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Metrics {
    pub mae: f64,
    pub rmse: f64,
    pub mape: f64,
    /// Unmasked entries that contributed.
    pub count: usize,
}

#[derive(Clone, Copy, Debug, Default)]
struct Acc {
    abs: f64,
    sq: f64,
    pct: f64,
    n: usize,
}

impl Acc {
    fn push(&mut self, pred: f64, label: f64) {
        let e = pred - label;
        self.abs += e.abs();
        self.sq += e * e;
        self.pct += e.abs() / label.abs();
        self.n += 1;
    }

    fn finish(&self) -> Option<Metrics> {
        (self.n > 0).then(|| {
            let n = self.n as f64;
            Metrics {
                mae: self.abs / n,
                rmse: (self.sq / n).sqrt(),
                mape: self.pct / n,
                count: self.n,
            }
        })
    }
}

/// Per-horizon and averaged metrics; `None` where every entry was masked.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub horizons: Vec<(usize, Option<Metrics>)>,
    pub average: Option<Metrics>,
}

impl EvalReport {
    pub fn mae(&self) -> f64 {
        self.average.map_or(f64::NAN, |m| m.mae)
    }
}

/// Rows of `horizon × channels` predictions against raw labels; entries whose
/// label equals `null_value` are excluded from every metric.
pub fn evaluate(
    predictions: &[f64],
    labels: &[f64],
    horizon: usize,
    channels: usize,
    null_value: f64,
) -> Result<EvalReport> {
    let width = horizon * channels;
    if predictions.len() != labels.len() || width == 0 || labels.len() % width != 0 {
        return Err(Error::Dimension(format!(
            "{} predictions vs {} labels with {} values per row",
            predictions.len(),
            labels.len(),
            width
        )));
    }
    let mut per_step = vec![Acc::default(); horizon];
    let mut all = Acc::default();
    for (row_p, row_l) in predictions.chunks(width).zip(labels.chunks(width)) {
        for (i, (&p, &y)) in row_p.iter().zip(row_l).enumerate() {
            if y == null_value {
                continue;
            }
            per_step[i / channels].push(p, y);
            all.push(p, y);
        }
    }
    let horizons = REPORTED_HORIZONS
        .iter()
        .filter(|&&h| h <= horizon)
        .map(|&h| (h, per_step[h - 1].finish()))
        .collect();
    Ok(EvalReport {
        horizons,
        average: all.finish(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn perfect_predictions_score_zero() {
        let y: Vec<f64> = (1..=24).map(|v| v as f64).collect();
        let r = evaluate(&y, &y, 12, 1, 0.0).unwrap();
        let m = r.average.unwrap();
        assert_eq!((m.mae, m.rmse, m.mape), (0.0, 0.0, 0.0));
        assert_eq!(r.horizons.iter().map(|h| h.0).collect::<Vec<_>>(), vec![3, 6, 12]);
    }

    #[test]
    fn single_entry() {
        let m = evaluate(&[3.0], &[2.0], 1, 1, 0.0).unwrap().average.unwrap();
        assert_eq!((m.mae, m.rmse, m.mape), (1.0, 1.0, 0.5));
    }

    #[test]
    fn null_labels_are_masked() {
        let m = evaluate(&[5.0, 3.0], &[0.0, 2.0], 2, 1, 0.0).unwrap().average.unwrap();
        assert_eq!((m.mae, m.rmse, m.mape, m.count), (1.0, 1.0, 0.5, 1));
        assert!(m.mape.is_finite());
    }

    #[test]
    fn fully_masked_horizon_is_absent() {
        // horizon 3 column is zero in every row
        let labels = [1.0, 1.0, 0.0, 1.0, 1.0, 0.0];
        let r = evaluate(&[2.0; 6], &labels, 3, 1, 0.0).unwrap();
        assert_eq!(r.horizons, vec![(3, None)]);
        assert_eq!(r.average.unwrap().count, 4);
        assert!(evaluate(&[1.0], &[0.0], 1, 1, 0.0).unwrap().average.is_none());
    }

    #[test]
    fn shape_mismatch() {
        assert!(matches!(evaluate(&[1.0], &[1.0, 2.0], 1, 1, 0.0), Err(Error::Dimension(_))));
    }

    proptest! {
        #[test]
        fn rmse_dominates_mae(
            pairs in prop::collection::vec((-100.0f64..100.0, 0.5f64..100.0), 1..200)
        ) {
            let (p, y): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
            let m = evaluate(&p, &y, 1, 1, 0.0).unwrap().average.unwrap();
            prop_assert!(m.rmse >= m.mae - 1e-12);
            prop_assert!(m.mae >= 0.0 && m.mape >= 0.0);
        }
    }
}
