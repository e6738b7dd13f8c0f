use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use super::EvalError;
use crate::corruption::CorruptionKind;

/// Scores of one probe setting across seeds.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbeReport {
    pub task: String,
    pub backbone: String,
    pub fraction: f64,
    pub corruption: Option<(CorruptionKind, u8)>,
    pub scores: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

impl ProbeReport {
    pub fn new(
        task: &str,
        backbone: &str,
        fraction: f64,
        corruption: Option<(CorruptionKind, u8)>,
        scores: Vec<f64>,
    ) -> Self {
        let (mean, std) = mean_std(&scores);
        Self {
            task: task.to_string(),
            backbone: backbone.to_string(),
            fraction,
            corruption,
            scores,
            mean,
            std,
        }
    }

    fn corruption_cells(&self) -> (String, String) {
        match self.corruption {
            Some((k, s)) => (k.to_string(), s.to_string()),
            None => ("none".into(), "0".into()),
        }
    }
}

/// Mean and sample standard deviation (n - 1 denominator; 0 for n < 2).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, 0.0);
    }
    let ss: f64 = values.iter().map(|v| (v - mean) * (v - mean)).sum();
    (mean, (ss / (n - 1) as f64).sqrt())
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrendResult {
    /// Mean over seeds of the least-squares slope of score against severity.
    pub mean_slope: f64,
    /// Per step `(mean paired difference, standard error)`.
    pub steps: Vec<(f64, f64)>,
    pub non_increasing: bool,
}

/// Paired trend test on `scores[severity][seed]`. Passes when the mean slope
/// is not positive and no consecutive step rises by more than two standard
/// errors of its paired differences.
pub fn trend_test(scores: &[Vec<f64>]) -> TrendResult {
    let levels = scores.len();
    let seeds = scores.first().map_or(0, Vec::len);
    assert!(scores.iter().all(|s| s.len() == seeds), "trend_test: ragged input");
    let xm = (levels as f64 - 1.0) / 2.0;
    let sxx: f64 = (0..levels).map(|e| (e as f64 - xm).powi(2)).sum();
    let slopes: Vec<f64> = (0..seeds)
        .map(|s| {
            let ym = (0..levels).map(|e| scores[e][s]).sum::<f64>() / levels as f64;
            (0..levels).map(|e| (e as f64 - xm) * (scores[e][s] - ym)).sum::<f64>() / sxx
        })
        .collect();
    let mean_slope = mean_std(&slopes).0;
    let steps: Vec<(f64, f64)> = (1..levels)
        .map(|e| {
            let d: Vec<f64> = (0..seeds).map(|s| scores[e][s] - scores[e - 1][s]).collect();
            let (m, sd) = mean_std(&d);
            (m, sd / (seeds as f64).sqrt())
        })
        .collect();
    let non_increasing = mean_slope <= 0.0 && steps.iter().all(|&(m, se)| m <= 2.0 * se);
    TrendResult {
        mean_slope,
        steps,
        non_increasing,
    }
}

const CSV_HEADER: &str = "task,backbone,fraction,corruption,severity,seed,macro_f1";

/// One CSV row per seed.
pub fn write_reports_csv(path: &Path, reports: &[ProbeReport]) -> Result<(), EvalError> {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in reports {
        let (kind, sev) = r.corruption_cells();
        for (i, s) in r.scores.iter().enumerate() {
            writeln!(out, "{},{},{},{},{},{},{}", r.task, r.backbone, r.fraction, kind, sev, i, s).unwrap();
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Reads rows written by [`write_reports_csv`] and regroups them.
pub fn read_reports_csv(path: &Path) -> Result<Vec<ProbeReport>, EvalError> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim() == CSV_HEADER => {}
        _ => return Err(EvalError::Report(format!("{}: bad header", path.display()))),
    }
    type Key = (String, String, u64, String, u8);
    let mut groups: Vec<(Key, Vec<(usize, f64)>)> = Vec::new();
    for (n, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let bad = |m: &str| EvalError::Report(format!("{}:{}: {m}", path.display(), n + 2));
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 7 {
            return Err(bad("expected 7 columns"));
        }
        let fraction: f64 = cols[2].parse().map_err(|_| bad("fraction"))?;
        let severity: u8 = cols[4].parse().map_err(|_| bad("severity"))?;
        let seed: usize = cols[5].parse().map_err(|_| bad("seed"))?;
        let score: f64 = cols[6].parse().map_err(|_| bad("macro_f1"))?;
        let key: Key = (
            cols[0].to_string(),
            cols[1].to_string(),
            fraction.to_bits(),
            cols[3].to_string(),
            severity,
        );
        match groups.iter_mut().find(|(k, _)| *k == key) {
            Some((_, v)) => v.push((seed, score)),
            None => groups.push((key, vec![(seed, score)])),
        }
    }
    groups
        .into_iter()
        .map(|((task, backbone, fbits, kind, sev), mut v)| {
            v.sort_by_key(|&(s, _)| s);
            let corruption = if kind == "none" {
                None
            } else {
                let k: CorruptionKind = kind.parse().map_err(|_| EvalError::Report(format!("corruption {kind}")))?;
                Some((k, sev))
            };
            Ok(ProbeReport::new(
                &task,
                &backbone,
                f64::from_bits(fbits),
                corruption,
                v.into_iter().map(|(_, s)| s).collect(),
            ))
        })
        .collect()
}

/// Long-form table, one row per report.
pub fn reports_markdown(reports: &[ProbeReport]) -> String {
    let mut out = String::from("| task | backbone | fraction | corruption | severity | macro-F1 |\n|---|---|---|---|---|---|\n");
    for r in reports {
        let (kind, sev) = r.corruption_cells();
        writeln!(
            out,
            "| {} | {} | {} | {} | {} | {:.3} ± {:.3} |",
            r.task, r.backbone, r.fraction, kind, sev, r.mean, r.std
        )
        .unwrap();
    }
    out
}

/// Backbone-by-task table of full-data, uncorrupted probe scores.
pub fn summary_markdown(reports: &[ProbeReport]) -> String {
    let mut tasks: Vec<&str> = Vec::new();
    let mut cells: BTreeMap<(String, String), (f64, f64)> = BTreeMap::new();
    let mut backbones: Vec<&str> = Vec::new();
    for r in reports.iter().filter(|r| r.corruption.is_none() && r.fraction == 1.0) {
        if !tasks.contains(&r.task.as_str()) {
            tasks.push(&r.task);
        }
        if !backbones.contains(&r.backbone.as_str()) {
            backbones.push(&r.backbone);
        }
        cells.insert((r.backbone.clone(), r.task.clone()), (r.mean, r.std));
    }
    let mut out = String::from("| backbone |");
    tasks.iter().for_each(|t| write!(out, " {t} |").unwrap());
    out.push_str("\n|---|");
    tasks.iter().for_each(|_| out.push_str("---|"));
    out.push('\n');
    for b in backbones {
        write!(out, "| {b} |").unwrap();
        for t in &tasks {
            match cells.get(&(b.to_string(), t.to_string())) {
                Some((m, s)) => write!(out, " {m:.3} ± {s:.3} |").unwrap(),
                None => out.push_str(" - |"),
            }
        }
        out.push('\n');
    }
    out
}
