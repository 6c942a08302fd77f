use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::Volume;
use crate::error::{Error, Result};
use crate::metrics::{aggregate_metrics, segmentation_metrics, AggregateReport, CaseRecord, MetricsReport};

/// A prediction paired with its reference.
pub struct EvalCase<'a> {
    pub case_id: &'a str,
    pub center_id: &'a str,
    pub pred: &'a Volume,
    pub gt: Option<&'a Volume>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CenterSummary {
    pub center_id: String,
    pub summary: AggregateReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub cases: Vec<(String, String, MetricsReport)>,
    pub centers: Vec<CenterSummary>,
    /// Mean over the per-center mean rows.
    pub center_average: MetricsReport,
    /// Mean and spread over all cases regardless of center.
    pub pooled: AggregateReport,
}

/// Mean of per-center rows, each row weighted equally.
pub fn average_rows(rows: &[MetricsReport]) -> Result<MetricsReport> {
    Ok(aggregate_metrics(rows)?.mean)
}

pub fn evaluate(items: &[EvalCase<'_>]) -> Result<EvaluationReport> {
    if items.is_empty() {
        return Err(Error::Data("nothing to evaluate".into()));
    }
    let mut cases = Vec::with_capacity(items.len());
    let mut by_center: BTreeMap<&str, Vec<MetricsReport>> = BTreeMap::new();
    for it in items {
        let gt = it
            .gt
            .ok_or_else(|| Error::Data(format!("case {} has no ground truth", it.case_id)))?;
        if gt.dims != it.pred.dims {
            return Err(Error::Data(format!(
                "case {}: prediction dims {:?} differ from ground truth {:?}",
                it.case_id, it.pred.dims, gt.dims
            )));
        }
        let m = segmentation_metrics(&it.pred.data, &gt.data)?;
        by_center.entry(it.center_id).or_default().push(m);
        cases.push((it.case_id.to_string(), it.center_id.to_string(), m));
    }
    let centers = by_center
        .iter()
        .map(|(c, rs)| {
            Ok(CenterSummary {
                center_id: c.to_string(),
                summary: aggregate_metrics(rs)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let rows: Vec<MetricsReport> = centers.iter().map(|c| c.summary.mean).collect();
    let all: Vec<MetricsReport> = cases.iter().map(|c| c.2).collect();
    Ok(EvaluationReport {
        center_average: average_rows(&rows)?,
        pooled: aggregate_metrics(&all)?,
        cases,
        centers,
    })
}

impl EvaluationReport {
    /// Per-case records followed by a per-center summary block.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (case, _, m) in &self.cases {
            let rec = CaseRecord {
                case_id: case.clone(),
                report: *m,
            };
            writeln!(s, "{rec}").unwrap();
        }
        s.push_str("\n# summary\n");
        for c in &self.centers {
            let (m, d) = (c.summary.mean, c.summary.std);
            writeln!(
                s,
                "center={} n={} dsc={:.4}±{:.4} precision={:.4}±{:.4} recall={:.4}±{:.4}",
                c.center_id, c.summary.n, m.dsc, d.dsc, m.precision, d.precision, m.recall, d.recall
            )
            .unwrap();
        }
        let a = self.center_average;
        writeln!(
            s,
            "average dsc={:.4} precision={:.4} recall={:.4}",
            a.dsc, a.precision, a.recall
        )
        .unwrap();
        let (m, d) = (self.pooled.mean, self.pooled.std);
        writeln!(
            s,
            "pooled n={} dsc={:.4}±{:.4} precision={:.4}±{:.4} recall={:.4}±{:.4}",
            self.pooled.n, m.dsc, d.dsc, m.precision, d.precision, m.recall, d.recall
        )
        .unwrap();
        s
    }
}
