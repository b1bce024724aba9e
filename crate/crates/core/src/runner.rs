//! Running scenarios to disk: single runs and parameter sweeps.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::metrics::{write_figures, RunSummary};
use crate::scenario::Scenario;
use crate::sim::{simulate, RunOutput};

pub const SUMMARY_FILE: &str = "summary.json";
pub const NODES_FILE: &str = "topology_nodes.csv";
pub const EDGES_FILE: &str = "topology_edges.csv";
pub const DECISIONS_FILE: &str = "decisions.ndjson";
pub const SWEEP_FILE: &str = "sweep.csv";

/// Runs one scenario and writes its figures, summary and topology to `out_dir`.
pub fn run_once(scenario: &Scenario, out_dir: &Path) -> Result<RunOutput> {
    let out = simulate(scenario)?;
    write_outputs(&out, out_dir)?;
    Ok(out)
}

pub fn write_outputs(out: &RunOutput, out_dir: &Path) -> Result<()> {
    fs::create_dir_all(out_dir)?;
    write_figures(out_dir, &out.metrics)?;
    out.summary.write_json(&out_dir.join(SUMMARY_FILE))?;
    out.topology.write_nodes_csv(&out_dir.join(NODES_FILE))?;
    out.topology.write_edges_csv(&out_dir.join(EDGES_FILE))?;
    if !out.decisions.is_empty() {
        let mut w = BufWriter::new(fs::File::create(out_dir.join(DECISIONS_FILE))?);
        for d in &out.decisions {
            serde_json::to_writer(&mut w, d)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
    }
    Ok(())
}

/// One swept field with its values, parsed from `field=v1,v2,…`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SweepAxis {
    pub field: String,
    pub values: Vec<String>,
}

impl std::str::FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (field, values) = s
            .split_once('=')
            .ok_or_else(|| Error::config("sweep", format!("expected field=v1,v2,... but got {s:?}")))?;
        let field = field.trim().to_string();
        let values: Vec<String> = values
            .split(',')
            .map(|v| v.trim().to_string())
            .filter(|v| !v.is_empty())
            .collect();
        if field.is_empty() || values.is_empty() {
            return Err(Error::config("sweep", format!("empty field or value list in {s:?}")));
        }
        Ok(SweepAxis { field, values })
    }
}

/// One point of a sweep: the values assigned to each axis and its scenario.
#[derive(Debug, Clone)]
pub struct SweepPoint {
    pub index: usize,
    pub assignments: Vec<(String, String)>,
    pub scenario: Scenario,
}

/// Cartesian product of the axes, last axis varying fastest. Point `i` uses
/// seed `base.seed + i`.
pub fn sweep_points(base: &Scenario, axes: &[SweepAxis]) -> Result<Vec<SweepPoint>> {
    let total: usize = axes.iter().map(|a| a.values.len()).product();
    let mut points = Vec::with_capacity(total);
    for index in 0..total {
        let mut rem = index;
        let mut assignments = vec![(String::new(), String::new()); axes.len()];
        for (k, axis) in axes.iter().enumerate().rev() {
            let v = rem % axis.values.len();
            rem /= axis.values.len();
            assignments[k] = (axis.field.clone(), axis.values[v].clone());
        }
        let mut scenario = base.clone();
        for (field, value) in &assignments {
            scenario = scenario.with_field(field, value)?;
        }
        scenario.seed = base.seed.wrapping_add(index as u64);
        scenario.validate()?;
        points.push(SweepPoint {
            index,
            assignments,
            scenario,
        });
    }
    Ok(points)
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepResult {
    pub index: usize,
    pub dir: PathBuf,
    pub assignments: Vec<(String, String)>,
    pub summary: RunSummary,
}

pub fn point_dir(out_dir: &Path, index: usize) -> PathBuf {
    out_dir.join(format!("point_{index:03}"))
}

/// Runs every sweep point on `jobs` threads, writing each to `point_NNN/` and
/// one row per point to `sweep.csv`. Results come back in point order.
pub fn run_sweep(base: &Scenario, axes: &[SweepAxis], out_dir: &Path, jobs: usize) -> Result<Vec<SweepResult>> {
    let points = sweep_points(base, axes)?;
    fs::create_dir_all(out_dir)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::config("jobs", e.to_string()))?;
    let results: Vec<Result<SweepResult>> = pool.install(|| {
        points
            .par_iter()
            .map(|p| {
                let dir = point_dir(out_dir, p.index);
                let out = run_once(&p.scenario, &dir)?;
                Ok(SweepResult {
                    index: p.index,
                    dir,
                    assignments: p.assignments.clone(),
                    summary: out.summary,
                })
            })
            .collect()
    });
    let results = results.into_iter().collect::<Result<Vec<_>>>()?;
    write_sweep_csv(&out_dir.join(SWEEP_FILE), axes, &results)?;
    Ok(results)
}

fn write_sweep_csv(path: &Path, axes: &[SweepAxis], results: &[SweepResult]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["point".to_string(), "seed".to_string()];
    header.extend(axes.iter().map(|a| a.field.clone()));
    header.extend(
        [
            "generated",
            "delivered",
            "loss_rate",
            "mean_power_uw",
            "mean_eff_throughput",
            "consumed_j",
            "violation_rate",
            "mean_delay_prioritized_s",
            "mean_delay_dont_care_s",
        ]
        .map(String::from),
    );
    w.write_record(&header)?;
    let opt = |v: Option<f64>| v.map_or_else(String::new, |x| x.to_string());
    for r in results {
        let s = &r.summary;
        let mut row = vec![r.index.to_string(), s.seed.to_string()];
        row.extend(r.assignments.iter().map(|(_, v)| v.clone()));
        row.extend([
            s.packets.generated.to_string(),
            s.packets.delivered.to_string(),
            s.loss_rate.to_string(),
            s.mean_power_uw.to_string(),
            s.mean_eff_throughput.to_string(),
            s.energy.consumed_total_j.to_string(),
            s.streams.violation_rate.to_string(),
            opt(s.mean_delay_prioritized_s),
            opt(s.mean_delay_dont_care_s),
        ]);
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}
