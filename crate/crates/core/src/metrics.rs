//! Overlap metrics on binary masks.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    /// Counts over two binary masks of equal length. Values other than
    /// exactly 0 or 1 are rejected.
    pub fn from_masks(pred: &[f32], gt: &[f32]) -> Result<Self> {
        if pred.len() != gt.len() {
            return Err(Error::shape("segmentation_metrics", &[pred.len()], &[gt.len()]));
        }
        let mut c = Self::default();
        for (&p, &g) in pred.iter().zip(gt) {
            match (binary(p)?, binary(g)?) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => c.tn += 1,
            }
        }
        Ok(c)
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    pub fn report(&self) -> MetricsReport {
        let (tp, fp, fn_) = (self.tp as f64, self.fp as f64, self.fn_ as f64);
        let pred_empty = self.tp + self.fp == 0;
        let gt_empty = self.tp + self.fn_ == 0;
        match (pred_empty, gt_empty) {
            (true, true) => MetricsReport {
                dsc: 1.0,
                precision: 1.0,
                recall: 1.0,
            },
            (false, true) => MetricsReport {
                dsc: 0.0,
                precision: 0.0,
                recall: 1.0,
            },
            (true, false) => MetricsReport {
                dsc: 0.0,
                precision: 1.0,
                recall: 0.0,
            },
            (false, false) => MetricsReport {
                dsc: 2.0 * tp / (2.0 * tp + fp + fn_),
                precision: tp / (tp + fp),
                recall: tp / (tp + fn_),
            },
        }
    }
}

fn binary(v: f32) -> Result<bool> {
    if v == 0.0 {
        Ok(false)
    } else if v == 1.0 {
        Ok(true)
    } else {
        Err(Error::Data(format!("mask value {v} is not binary")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub dsc: f64,
    pub precision: f64,
    pub recall: f64,
}

pub fn segmentation_metrics(pred: &[f32], gt: &[f32]) -> Result<MetricsReport> {
    Ok(ConfusionCounts::from_masks(pred, gt)?.report())
}

/// Per-metric mean together with the population standard deviation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    pub mean: MetricsReport,
    pub std: MetricsReport,
    pub n: usize,
}

pub fn aggregate_metrics(reports: &[MetricsReport]) -> Result<AggregateReport> {
    if reports.is_empty() {
        return Err(Error::Data("cannot aggregate an empty list of reports".into()));
    }
    let stat = |f: fn(&MetricsReport) -> f64| {
        // Sorting first makes the result independent of input order.
        let mut v: Vec<f64> = reports.iter().map(f).collect();
        v.sort_by(f64::total_cmp);
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
        (mean, var.sqrt())
    };
    let (d, ds) = stat(|r| r.dsc);
    let (p, ps) = stat(|r| r.precision);
    let (r, rs) = stat(|r| r.recall);
    Ok(AggregateReport {
        mean: MetricsReport {
            dsc: d,
            precision: p,
            recall: r,
        },
        std: MetricsReport {
            dsc: ds,
            precision: ps,
            recall: rs,
        },
        n: reports.len(),
    })
}

/// One line of the per-case metrics file.
#[derive(Clone, Debug, PartialEq)]
pub struct CaseRecord {
    pub case_id: String,
    pub report: MetricsReport,
}

impl fmt::Display for CaseRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "case={} dsc={:.6} precision={:.6} recall={:.6}",
            self.case_id, self.report.dsc, self.report.precision, self.report.recall
        )
    }
}

impl std::str::FromStr for CaseRecord {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut case_id = None;
        let (mut dsc, mut precision, mut recall) = (None, None, None);
        for field in s.split_whitespace() {
            let (k, v) = field
                .split_once('=')
                .ok_or_else(|| Error::Data(format!("malformed field '{field}'")))?;
            let num = || v.parse::<f64>().map_err(|e| Error::Data(format!("{k}: {e}")));
            match k {
                "case" => case_id = Some(v.to_string()),
                "dsc" => dsc = Some(num()?),
                "precision" => precision = Some(num()?),
                "recall" => recall = Some(num()?),
                _ => return Err(Error::Data(format!("unknown field '{k}'"))),
            }
        }
        let missing = |k: &str| Error::Data(format!("record is missing '{k}'"));
        Ok(Self {
            case_id: case_id.ok_or_else(|| missing("case"))?,
            report: MetricsReport {
                dsc: dsc.ok_or_else(|| missing("dsc"))?,
                precision: precision.ok_or_else(|| missing("precision"))?,
                recall: recall.ok_or_else(|| missing("recall"))?,
            },
        })
    }
}
