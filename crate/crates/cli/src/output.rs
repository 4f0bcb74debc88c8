//! Output directories, CSV/JSON writers and the run manifest.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use phenoctl_core::ide_sim::Trajectory;
use phenoctl_core::model::ModelParams;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::CliResult;

pub const MANIFEST: &str = "manifest.json";

/// Records of run metadata; written once per output directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: Vec<String>,
    pub version: String,
    pub preset: String,
    pub params: ModelParams,
    pub nx: usize,
    pub dt: f64,
    pub scheme: String,
    pub seed: u64,
    pub tolerances: serde_json::Value,
    pub artifacts: Vec<String>,
    /// Times of `snapshot_<k>.csv`, indexed by `k`.
    pub snapshot_times: Vec<f64>,
    pub wall_time_s: f64,
}

pub struct OutDir {
    path: PathBuf,
    artifacts: Vec<String>,
    snapshot_times: Vec<f64>,
    started: Instant,
}

impl OutDir {
    pub fn create(path: &Path) -> CliResult<Self> {
        fs::create_dir_all(path)?;
        Ok(Self {
            path: path.to_path_buf(),
            artifacts: Vec::new(),
            snapshot_times: Vec::new(),
            started: Instant::now(),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn artifacts(&self) -> &[String] {
        &self.artifacts
    }

    fn register(&mut self, name: &str) -> PathBuf {
        if !self.artifacts.iter().any(|a| a == name) {
            self.artifacts.push(name.to_string());
        }
        self.path.join(name)
    }

    /// Writes a CSV whose columns are `header` and whose rows are numbers.
    pub fn csv(&mut self, name: &str, header: &[&str], rows: impl IntoIterator<Item = Vec<f64>>) -> CliResult<()> {
        let path = self.register(name);
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(header)?;
        for row in rows {
            w.write_record(row.iter().map(|v| v.to_string()))?;
        }
        w.flush()?;
        Ok(())
    }

    /// CSV with string cells.
    pub fn csv_text(&mut self, name: &str, header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> CliResult<()> {
        let path = self.register(name);
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(header)?;
        for row in rows {
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn json<T: Serialize>(&mut self, name: &str, value: &T) -> CliResult<()> {
        let path = self.register(name);
        let mut s = serde_json::to_string_pretty(value)?;
        s.push('\n');
        fs::write(path, s)?;
        Ok(())
    }

    /// Totals, density snapshots and the long-format plot bundle of a run.
    pub fn trajectory(&mut self, traj: &Trajectory, stride: usize) -> CliResult<()> {
        write_totals(self, "totals.csv", traj, stride)?;
        self.snapshots(traj)?;
        self.plot_bundle(traj, stride)
    }

    pub fn snapshots(&mut self, traj: &Trajectory) -> CliResult<()> {
        self.snapshot_times.clear();
        for (k, s) in traj.snapshots.iter().enumerate() {
            let g = s.n_h.grid();
            let rows = g
                .nodes()
                .iter()
                .zip(s.n_h.values().iter().zip(s.n_c.values()))
                .map(|(&x, (&h, &c))| vec![x, h, c]);
            self.csv(&format!("snapshot_{k}.csv"), &SNAPSHOT_HEADER, rows)?;
            self.snapshot_times.push(s.t);
        }
        let index = self.snapshot_times.iter().enumerate().map(|(k, &t)| vec![k as f64, t]);
        let times: Vec<Vec<f64>> = index.collect();
        self.csv("snapshots.csv", &["k", "t [time]"], times)
    }

    /// `panel,series,x,y` rows: density profiles per snapshot, totals, doses
    /// and constraint ratios against time.
    pub fn plot_bundle(&mut self, traj: &Trajectory, stride: usize) -> CliResult<()> {
        let mut rows: Vec<Vec<String>> = Vec::new();
        for s in &traj.snapshots {
            let series = format!("t={}", s.t);
            for (panel, d) in [("n_H", &s.n_h), ("n_C", &s.n_c)] {
                for (x, v) in d.grid().nodes().iter().zip(d.values()) {
                    rows.push(vec![panel.into(), series.clone(), x.to_string(), v.to_string()]);
                }
            }
        }
        let n = traj.len();
        let stride = stride.max(1);
        for k in (0..n).filter(|k| k % stride == 0 || *k == n - 1) {
            let t = traj.times[k].to_string();
            let d = traj.doses[k];
            for (panel, series, v) in [
                ("rho", "rho_H", traj.rho_h[k]),
                ("rho", "rho_C", traj.rho_c[k]),
                ("rho", "rho_CS", traj.rho_cs[k]),
                ("rho", "rho_CR", traj.rho_cr[k]),
                ("dose", "u1", d.u1),
                ("dose", "u2", d.u2),
                ("constraint", "g1", traj.g1[k]),
                ("constraint", "g2", traj.g2[k]),
            ] {
                rows.push(vec![panel.into(), series.into(), t.clone(), v.to_string()]);
            }
        }
        self.csv_text("plot_data.csv", &["panel", "series", "x", "y"], rows)
    }

    pub fn finish(mut self, cfg: &RunConfig, params: &ModelParams, command: &[String], tolerances: serde_json::Value) -> CliResult<Vec<String>> {
        self.artifacts.sort();
        let mut artifacts = self.artifacts.clone();
        artifacts.push(MANIFEST.into());
        let manifest = RunManifest {
            command: command.to_vec(),
            version: env!("CARGO_PKG_VERSION").into(),
            preset: cfg.preset.name().into(),
            params: params.clone(),
            nx: cfg.numerics.nx,
            dt: cfg.numerics.dt,
            scheme: format!("{:?}", cfg.numerics.scheme).to_lowercase(),
            seed: cfg.numerics.seed,
            tolerances,
            artifacts: artifacts.clone(),
            snapshot_times: self.snapshot_times.clone(),
            wall_time_s: self.started.elapsed().as_secs_f64(),
        };
        self.json(MANIFEST, &manifest)?;
        Ok(artifacts)
    }
}

pub const TOTALS_HEADER: [&str; 10] = [
    "t [time]",
    "rho_H [mass]",
    "rho_C [mass]",
    "rho_CS [mass]",
    "rho_CR [mass]",
    "u1 [dose]",
    "u2 [dose]",
    "g1 [ratio]",
    "g2 [ratio]",
    "mode",
];

pub const SNAPSHOT_HEADER: [&str; 3] = ["x [phenotype]", "n_H [mass/phenotype]", "n_C [mass/phenotype]"];

pub fn write_totals(out: &mut OutDir, name: &str, traj: &Trajectory, stride: usize) -> CliResult<()> {
    let n = traj.len();
    let stride = stride.max(1);
    let rows = (0..n).filter(|k| k % stride == 0 || *k == n - 1).map(|k| {
        let d = traj.doses[k];
        vec![
            traj.times[k].to_string(),
            traj.rho_h[k].to_string(),
            traj.rho_c[k].to_string(),
            traj.rho_cs[k].to_string(),
            traj.rho_cr[k].to_string(),
            d.u1.to_string(),
            d.u2.to_string(),
            traj.g1[k].to_string(),
            traj.g2[k].to_string(),
            traj.modes[k].to_string(),
        ]
    });
    out.csv_text(name, &TOTALS_HEADER, rows)
}

/// Stride giving at most about `target` rows.
pub fn stride_for(len: usize, target: usize) -> usize {
    len.div_ceil(target.max(1)).max(1)
}
