//! Per-(method, metric) summary statistics of evaluation records.

use std::collections::BTreeMap;
use std::fmt::Write;

use serde::{Deserialize, Serialize};

use crate::cam::CamMethod;
use crate::error::{Error, Result};
use crate::eval::EvalRecord;
use crate::metrics::{describe, wilcoxon_rank_sum_one_tailed, Describe, Metric, RankSumMethod};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsRow {
    pub cam: CamMethod,
    pub metric: Metric,
    pub baseline: Describe,
    pub astro: Option<Describe>,
    /// One-tailed rank-sum p for "astro greater than baseline".
    pub p_value: Option<f64>,
    pub test: Option<RankSumMethod>,
}

/// Mean, median and sample SD per group for both arms, plus the one-tailed
/// rank-sum p. Groups are ordered by method, then metric. Astro columns are
/// present only when every record of the group carries an astro value.
pub fn stats_report(records: &[EvalRecord]) -> Result<Vec<StatsRow>> {
    if records.is_empty() {
        return Err(Error::InsufficientData("no records".into()));
    }
    let mut groups: BTreeMap<(CamMethod, Metric), Vec<&EvalRecord>> = BTreeMap::new();
    for r in records {
        groups.entry((r.cam, r.metric)).or_default().push(r);
    }
    groups
        .into_iter()
        .map(|((cam, metric), rs)| {
            if rs.len() < 2 {
                return Err(Error::InsufficientData(format!(
                    "{cam}/{metric} has {} record(s), need at least 2",
                    rs.len()
                )));
            }
            let baseline: Vec<f64> = rs.iter().map(|r| r.baseline).collect();
            let astro: Option<Vec<f64>> = rs.iter().map(|r| r.astro).collect();
            let (astro_desc, p_value, test) = match astro {
                Some(a) => {
                    let t = wilcoxon_rank_sum_one_tailed(&a, &baseline)?;
                    (Some(describe(&a)?), Some(t.p_value), Some(t.method))
                }
                None => (None, None, None),
            };
            Ok(StatsRow {
                cam,
                metric,
                baseline: describe(&baseline)?,
                astro: astro_desc,
                p_value,
                test,
            })
        })
        .collect()
}

/// Plain-text table: one row per group, mean/median/SD for each arm and p.
pub fn format_table(rows: &[StatsRow]) -> String {
    let mut out = format!(
        "{:<10} {:<9} {:>8} {:>8} {:>8} {:>8} {:>8} {:>8} {:>10}\n",
        "cam", "metric", "mean", "median", "sd", "mean*", "median*", "sd*", "p"
    );
    let opt = |v: Option<f64>, prec: usize| v.map_or("-".to_string(), |v| format!("{v:.prec$}"));
    for r in rows {
        let a = r.astro.as_ref();
        let _ = writeln!(
            out,
            "{:<10} {:<9} {:>8.3} {:>8.3} {:>8.3} {:>8} {:>8} {:>8} {:>10}",
            r.cam.name(),
            r.metric.name(),
            r.baseline.mean,
            r.baseline.median,
            r.baseline.sd,
            opt(a.map(|d| d.mean), 3),
            opt(a.map(|d| d.median), 3),
            opt(a.map(|d| d.sd), 3),
            r.p_value.map_or("-".to_string(), |p| format!("{p:.2e}")),
        );
    }
    out
}
