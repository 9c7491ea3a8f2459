//! Summaries of a metrics history: final values, emergence steps, the
//! conflict-preference crossover, and per-curve CSV exports.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::{Error, Result};
use crate::metrics::MetricRecord;

pub type CurveKey = (String, String, String);

/// `(step, value)` points per `(scenario, metric, subset)`, sorted by step.
pub fn curves(records: &[MetricRecord]) -> BTreeMap<CurveKey, Vec<(u64, f64)>> {
    let mut out: BTreeMap<CurveKey, Vec<(u64, f64)>> = BTreeMap::new();
    for r in records {
        out.entry(r.curve()).or_default().push((r.step, r.value));
    }
    for pts in out.values_mut() {
        pts.sort_by_key(|p| p.0);
    }
    out
}

pub fn curve<'a>(c: &'a BTreeMap<CurveKey, Vec<(u64, f64)>>, scenario: &str, metric: &str, subset: &str) -> Option<&'a [(u64, f64)]> {
    c.get(&(scenario.to_string(), metric.to_string(), subset.to_string()))
        .map(|v| v.as_slice())
}

/// First step whose value reaches `threshold`.
pub fn first_crossing(points: &[(u64, f64)], threshold: f64) -> Option<u64> {
    points.iter().find(|p| p.1 >= threshold).map(|p| p.0)
}

/// Pairs two curves on their common steps.
pub fn paired(a: &[(u64, f64)], b: &[(u64, f64)]) -> Vec<(u64, f64, f64)> {
    let bm: BTreeMap<u64, f64> = b.iter().copied().collect();
    a.iter()
        .filter_map(|&(s, x)| bm.get(&s).map(|&y| (s, x, y)))
        .collect()
}

/// First step where `a > b`.
pub fn first_above(pairs: &[(u64, f64, f64)]) -> Option<u64> {
    pairs.iter().find(|p| p.1 > p.2).map(|p| p.0)
}

/// First step from which `a > b` holds through the last paired step.
pub fn stable_above(pairs: &[(u64, f64, f64)]) -> Option<u64> {
    let mut start = None;
    for p in pairs {
        if p.1 > p.2 {
            start.get_or_insert(p.0);
        } else {
            start = None;
        }
    }
    start
}

#[derive(Debug, Clone, Serialize)]
pub struct RunReport {
    pub threshold: f64,
    /// Distinct evaluation steps.
    pub snapshots: usize,
    pub last_step: u64,
    /// Last value of every non-training curve.
    pub final_values: Vec<(CurveKey, f64)>,
    pub final_train_loss: Option<f64>,
    pub icku_emergence: Option<u64>,
    pub pku_emergence: Option<u64>,
    /// First step with Pref_PK > Pref_ICK; `None` without conflict evaluations
    /// or without a crossover.
    pub phase_shift: Option<u64>,
    /// First step after which Pref_PK > Pref_ICK holds to the end.
    pub stable_shift: Option<u64>,
    pub has_conflict: bool,
}

pub fn build_report(records: &[MetricRecord], threshold: f64) -> Result<RunReport> {
    if records.is_empty() {
        return Err(Error::Metrics("no metric records".into()));
    }
    let c = curves(records);
    let mut eval_steps: Vec<u64> = records.iter().filter(|r| r.scenario != "train").map(|r| r.step).collect();
    eval_steps.sort_unstable();
    eval_steps.dedup();
    let final_values = c
        .iter()
        .filter(|(k, _)| k.0 != "train")
        .map(|(k, v)| (k.clone(), v.last().unwrap().1))
        .collect();
    let pk = curve(&c, "conflict", "pref_pk", "all");
    let ick = curve(&c, "conflict", "pref_ick", "all");
    let pairs = match (pk, ick) {
        (Some(a), Some(b)) => paired(a, b),
        _ => Vec::new(),
    };
    Ok(RunReport {
        threshold,
        snapshots: eval_steps.len(),
        last_step: records.iter().map(|r| r.step).max().unwrap_or(0),
        final_values,
        final_train_loss: curve(&c, "train", "loss", "all").and_then(|v| v.last()).map(|p| p.1),
        icku_emergence: curve(&c, "icku", "acc", "all").and_then(|p| first_crossing(p, threshold)),
        pku_emergence: curve(&c, "pku", "acc", "all").and_then(|p| first_crossing(p, threshold)),
        phase_shift: first_above(&pairs),
        stable_shift: stable_above(&pairs),
        has_conflict: !pairs.is_empty(),
    })
}

fn opt_step(s: Option<u64>) -> String {
    s.map_or_else(|| "n/a".to_string(), |v| v.to_string())
}

impl RunReport {
    pub fn render_markdown(&self) -> String {
        let mut s = String::new();
        s.push_str("# Run report\n\n");
        s.push_str(&format!(
            "- evaluation snapshots: {}\n- last step: {}\n",
            self.snapshots, self.last_step
        ));
        if let Some(l) = self.final_train_loss {
            s.push_str(&format!("- final training loss: {l:.4}\n"));
        }
        s.push_str(&format!(
            "- ICKU emergence (acc >= {t}): {}\n- PKU emergence (acc >= {t}): {}\n",
            opt_step(self.icku_emergence),
            opt_step(self.pku_emergence),
            t = self.threshold
        ));
        s.push_str(&format!(
            "- phase shift (first step with Pref_PK > Pref_ICK): {}\n- sustained shift (Pref_PK > Pref_ICK to the end): {}\n",
            opt_step(self.phase_shift),
            opt_step(self.stable_shift)
        ));
        s.push_str("\n| scenario | metric | subset | final |\n|---|---|---|---|\n");
        for ((sc, m, sub), v) in &self.final_values {
            s.push_str(&format!("| {sc} | {m} | {sub} | {v:.4} |\n"));
        }
        s
    }
}

fn file_stem(k: &CurveKey) -> String {
    let clean = |x: &str| x.replace([':', '/', ' '], "-");
    format!("{}__{}__{}", clean(&k.0), clean(&k.1), clean(&k.2))
}

/// One `step,value` CSV per curve under `dir`.
pub fn write_curves(records: &[MetricRecord], dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut paths = Vec::new();
    for (k, pts) in curves(records) {
        let p = dir.join(format!("{}.csv", file_stem(&k)));
        let mut text = String::from("step,value\n");
        for (s, v) in pts {
            text.push_str(&format!("{s},{v}\n"));
        }
        std::fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
        paths.push(p);
    }
    Ok(paths)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stable_above_needs_a_suffix() {
        let p = vec![(0, 0.0, 1.0), (1, 2.0, 1.0), (2, 0.0, 1.0), (3, 2.0, 1.0), (4, 3.0, 1.0)];
        assert_eq!(first_above(&p), Some(1));
        assert_eq!(stable_above(&p), Some(3));
        assert_eq!(stable_above(&p[..3]), None);
    }
}
