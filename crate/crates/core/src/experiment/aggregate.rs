//! Mean and 95% confidence interval across seeds for every (method, probe,
//! regime) cell.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use log::warn;
use serde::Serialize;
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};
use crate::experiment::config::{ExperimentConfig, Method};
use crate::experiment::output::LoadedRun;
use crate::experiment::runner::CellResult;
use crate::layers::ProbePoint;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ResultRow {
    pub method: String,
    pub probe: String,
    pub regime: f64,
    pub mean: f64,
    /// Half-width `t(0.975, n−1)·s/√n`; absent with a single seed.
    pub ci95: Option<f64>,
    pub n_seeds: usize,
    pub top_k: usize,
}

/// Two-sided 95% Student-t critical value with `df` degrees of freedom.
pub fn t_critical(df: usize) -> f64 {
    StudentsT::new(0.0, 1.0, df as f64).expect("df > 0").inverse_cdf(0.975)
}

/// Sample mean and CI half-width of `xs`.
pub fn mean_ci(xs: &[f64]) -> (f64, Option<f64>) {
    let n = xs.len();
    let mean = xs.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, None);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, Some(t_critical(n - 1) * var.sqrt() / (n as f64).sqrt()))
}

fn method_rank(label: &str) -> usize {
    Method::ALL.iter().position(|m| m.label() == label).unwrap_or(usize::MAX)
}

fn probe_rank(label: &str) -> usize {
    let all = [ProbePoint::L1, ProbePoint::L2, ProbePoint::L3, ProbePoint::L4, ProbePoint::L5, ProbePoint::Final];
    all.iter().position(|p| p.as_str() == label).unwrap_or(usize::MAX)
}

/// Aggregates cells over seeds. Duplicate (seed, regime, method, probe)
/// cells are an error.
pub fn aggregate(cells: &[CellResult]) -> Result<Vec<ResultRow>> {
    let mut seen = BTreeSet::new();
    let mut groups: BTreeMap<(usize, usize, String, String, u64), (Vec<f64>, usize)> = BTreeMap::new();
    for c in cells {
        if !seen.insert((c.seed, c.regime.to_bits(), c.method.clone(), c.probe.clone())) {
            return Err(Error::arg(format!(
                "duplicate cell: seed {} regime {} {} {}",
                c.seed, c.regime, c.method, c.probe
            )));
        }
        let key = (method_rank(&c.method), probe_rank(&c.probe), c.method.clone(), c.probe.clone(), c.regime.to_bits());
        let entry = groups.entry(key).or_insert_with(|| (Vec::new(), c.top_k));
        entry.0.push(c.test_acc);
    }
    let mut rows: Vec<ResultRow> = groups
        .into_iter()
        .map(|((_, _, method, probe, regime), (accs, top_k))| {
            let (mean, ci95) = mean_ci(&accs);
            if ci95.is_none() {
                warn!("{method} {probe} at {}%: one seed, no confidence interval", f64::from_bits(regime));
            }
            ResultRow { method, probe, regime: f64::from_bits(regime), mean, ci95, n_seeds: accs.len(), top_k }
        })
        .collect();
    rows.sort_by(|a, b| {
        (method_rank(&a.method), probe_rank(&a.probe), &a.method, &a.probe)
            .cmp(&(method_rank(&b.method), probe_rank(&b.probe), &b.method, &b.probe))
            .then(a.regime.total_cmp(&b.regime))
    });
    Ok(rows)
}

/// Row label `METHOD probe`, regimes as columns, `mean ± ci` in percent.
pub fn render_table(rows: &[ResultRow]) -> String {
    let mut regimes: Vec<f64> = rows.iter().map(|r| r.regime).collect();
    regimes.sort_by(f64::total_cmp);
    regimes.dedup();
    let mut lines: Vec<(String, Vec<String>)> = Vec::new();
    for r in rows {
        let label = format!("{} {}", r.method, r.probe);
        if lines.last().map(|(l, _)| l != &label).unwrap_or(true) {
            lines.push((label.clone(), vec!["-".to_string(); regimes.len()]));
        }
        let col = regimes.iter().position(|&x| x == r.regime).expect("regime listed");
        let cell = match r.ci95 {
            Some(ci) => format!("{:.2} ± {:.2}", 100.0 * r.mean, 100.0 * ci),
            None => format!("{:.2}", 100.0 * r.mean),
        };
        lines.last_mut().expect("pushed").1[col] = cell;
    }
    let header: Vec<String> = regimes.iter().map(|r| format!("{r}%")).collect();
    let lw = lines.iter().map(|(l, _)| l.chars().count()).max().unwrap_or(0).max(6);
    let mut widths: Vec<usize> = header.iter().map(|h| h.chars().count()).collect();
    for (_, cells) in &lines {
        for (w, c) in widths.iter_mut().zip(cells) {
            *w = (*w).max(c.chars().count());
        }
    }
    let mut out = String::new();
    let top_k = rows.first().map(|r| r.top_k).unwrap_or(1);
    let _ = writeln!(out, "top-{top_k} test accuracy (%), mean ± 95% CI over seeds");
    let _ = write!(out, "{:lw$}", "");
    for (h, w) in header.iter().zip(&widths) {
        let _ = write!(out, "  {h:>w$}");
    }
    out.push('\n');
    for (label, cells) in &lines {
        let _ = write!(out, "{label:lw$}");
        for (c, w) in cells.iter().zip(&widths) {
            let _ = write!(out, "  {c:>w$}");
        }
        out.push('\n');
    }
    out
}

/// Runs can be merged when everything but the seed list agrees.
pub fn check_consistent(runs: &[LoadedRun]) -> Result<()> {
    let strip = |c: &ExperimentConfig| ExperimentConfig { seeds: Vec::new(), output_dir: Default::default(), ..c.clone() };
    let Some(first) = runs.first() else {
        return Err(Error::arg("no runs to report"));
    };
    let base = strip(&first.manifest.config);
    for r in &runs[1..] {
        if strip(&r.manifest.config) != base {
            return Err(Error::Config(format!(
                "{} and {} were produced by different configurations",
                first.dir.display(),
                r.dir.display()
            )));
        }
        if r.manifest.pool_fingerprint != first.manifest.pool_fingerprint
            || r.manifest.test_fingerprint != first.manifest.test_fingerprint
        {
            return Err(Error::Config(format!(
                "{} and {} used different data",
                first.dir.display(),
                r.dir.display()
            )));
        }
    }
    Ok(())
}
