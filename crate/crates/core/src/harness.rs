//! Multi-seed evaluation over a grid of configurations, and comparison
//! tables with rows per method and columns per shot count.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::TaskDataset;
use crate::error::{Error, ErrorClass, Result};
use crate::extraction::{parallel_map, Backend, CacheDir};
use crate::pipeline::{run, ExperimentConfig, Method};

pub const DEFAULT_SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

/// Standard deviation estimator used in every aggregate.
pub const STD_ESTIMATOR: &str = "population (divisor n)";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellError {
    pub seed: u64,
    pub class: ErrorClass,
    pub message: String,
}

/// Aggregate of one configuration across seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub fingerprint: String,
    pub config: ExperimentConfig,
    /// Seeds that completed, aligned with `accuracies`.
    pub seeds: Vec<u64>,
    pub accuracies: Vec<f64>,
    /// `None` when every seed failed.
    pub mean: Option<f64>,
    pub std: Option<f64>,
    pub errors: Vec<CellError>,
}

/// Arithmetic mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> Option<(f64, f64)> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    Some((mean, var.sqrt()))
}

impl RunResult {
    pub fn from_cells(config: &ExperimentConfig, cells: Vec<(u64, Result<f64>)>) -> Self {
        let mut seeds = Vec::new();
        let mut accuracies = Vec::new();
        let mut errors = Vec::new();
        for (seed, r) in cells {
            match r {
                Ok(a) => {
                    seeds.push(seed);
                    accuracies.push(a);
                }
                Err(e) => errors.push(CellError {
                    seed,
                    class: e.class(),
                    message: e.to_string(),
                }),
            }
        }
        let agg = mean_std(&accuracies);
        RunResult {
            fingerprint: config.fingerprint(),
            config: config.clone(),
            seeds,
            accuracies,
            mean: agg.map(|a| a.0),
            std: agg.map(|a| a.1),
            errors,
        }
    }
}

/// Runs every `(config, seed)` cell with at most `workers` cells in flight.
/// A failing cell is recorded on its result instead of aborting the grid.
/// Results are ordered by method, then shot count, then grid order.
pub fn evaluate(
    dataset: &TaskDataset,
    grid: &[ExperimentConfig],
    seeds: &[u64],
    backend: &dyn Backend,
    cache: Option<&CacheDir>,
    workers: usize,
) -> Result<Vec<RunResult>> {
    if grid.is_empty() {
        return Err(Error::Config("the configuration grid is empty".into()));
    }
    if seeds.is_empty() {
        return Err(Error::Config("no seeds given".into()));
    }
    for cfg in grid {
        cfg.validate()?;
    }
    let cells: Vec<(usize, u64)> = (0..grid.len())
        .flat_map(|c| seeds.iter().map(move |&s| (c, s)))
        .collect();
    let outcomes = parallel_map(cells.len(), workers, |i| {
        let (c, seed) = cells[i];
        Ok(run(dataset, &grid[c].with_seed(seed), backend, cache).map(|o| o.accuracy()))
    });
    let mut per_config: Vec<Vec<(u64, Result<f64>)>> = (0..grid.len()).map(|_| Vec::new()).collect();
    for ((c, seed), out) in cells.into_iter().zip(outcomes) {
        per_config[c].push((seed, out.expect("cell closure never fails")));
    }
    let mut results: Vec<(usize, RunResult)> = per_config
        .into_iter()
        .enumerate()
        .map(|(c, cells)| (c, RunResult::from_cells(&grid[c], cells)))
        .collect();
    results.sort_by_key(|(c, r)| (r.config.method, r.config.shots, *c));
    Ok(results.into_iter().map(|(_, r)| r).collect())
}

/// Row label: the configuration fingerprint with the shot count removed.
fn row_label(r: &RunResult) -> String {
    r.fingerprint
        .split('/')
        .filter(|part| !part.starts_with("m="))
        .collect::<Vec<_>>()
        .join("/")
}

fn cell_text(r: &RunResult) -> String {
    match (r.mean, r.std) {
        (Some(m), Some(s)) => format!("{:.1}±{:.1}", 100.0 * m, 100.0 * s),
        _ => "error".to_string(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonTable {
    pub shots: Vec<usize>,
    /// `(row label, method, cells per shot column)`.
    pub rows: Vec<(String, Method, Vec<Option<String>>)>,
    entries: Vec<(String, usize, Option<f64>, Option<f64>, usize, usize)>,
}

/// Builds the comparison table. Cells read `mean±std` in percent.
pub fn compare_table(results: &[RunResult]) -> ComparisonTable {
    let mut shots: Vec<usize> = results.iter().map(|r| r.config.shots).collect();
    shots.sort_unstable();
    shots.dedup();
    let mut rows: BTreeMap<(Method, usize), (String, Vec<Option<String>>)> = BTreeMap::new();
    let mut order: Vec<String> = Vec::new();
    let mut entries = Vec::new();
    for r in results {
        let label = row_label(r);
        let pos = order.iter().position(|l| *l == label).unwrap_or_else(|| {
            order.push(label.clone());
            order.len() - 1
        });
        let col = shots.binary_search(&r.config.shots).expect("collected above");
        let row = rows
            .entry((r.config.method, pos))
            .or_insert_with(|| (label.clone(), vec![None; shots.len()]));
        row.1[col] = Some(cell_text(r));
        entries.push((label, r.config.shots, r.mean, r.std, r.accuracies.len(), r.errors.len()));
    }
    ComparisonTable {
        shots,
        rows: rows.into_iter().map(|((m, _), (l, c))| (l, m, c)).collect(),
        entries,
    }
}

impl ComparisonTable {
    pub fn pretty(&self) -> String {
        let header: Vec<String> = std::iter::once("method".to_string())
            .chain(self.shots.iter().map(|m| format!("m={m}")))
            .collect();
        let body: Vec<Vec<String>> = self
            .rows
            .iter()
            .map(|(label, _, cells)| {
                std::iter::once(label.clone())
                    .chain(cells.iter().map(|c| c.clone().unwrap_or_else(|| "-".into())))
                    .collect()
            })
            .collect();
        let widths: Vec<usize> = (0..header.len())
            .map(|i| {
                body.iter()
                    .map(|r| r[i].chars().count())
                    .chain([header[i].chars().count()])
                    .max()
                    .unwrap_or(0)
            })
            .collect();
        let line = |cells: &[String]| -> String {
            cells
                .iter()
                .zip(&widths)
                .enumerate()
                .map(|(i, (c, w))| {
                    let pad = w - c.chars().count();
                    if i == 0 {
                        format!("{c}{}", " ".repeat(pad))
                    } else {
                        format!("{}{c}", " ".repeat(pad))
                    }
                })
                .collect::<Vec<_>>()
                .join("  ")
        };
        let mut out = line(&header);
        out.push('\n');
        out.push_str(&"-".repeat(widths.iter().sum::<usize>() + 2 * widths.len().saturating_sub(1)));
        out.push('\n');
        for r in &body {
            out.push_str(&line(r));
            out.push('\n');
        }
        let _ = writeln!(out, "accuracy %, mean±std over seeds; std is {STD_ESTIMATOR}");
        out
    }

    /// Long-format CSV with the same rounded numbers as the pretty table.
    pub fn csv(&self) -> String {
        let mut out = String::from("row,shots,mean,std,seeds,errors\n");
        for (label, shots, mean, std, n, errs) in &self.entries {
            let f = |v: &Option<f64>| v.map(|x| format!("{:.1}", 100.0 * x)).unwrap_or_default();
            let _ = writeln!(out, "{},{},{},{},{},{}", csv_field(label), shots, f(mean), f(std), n, errs);
        }
        out
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}
