//! Per-cell metrics, per-group averages, CSV and plain-text output.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::Task;
use crate::HarnessError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRow {
    pub dataset: String,
    pub horizon: usize,
    pub variant: String,
    /// Extra cell coordinates, e.g. stage count and placement.
    pub setting: String,
    pub mse: f64,
    pub mae: f64,
    /// Fusion-trunk invocations in one traced forward pass.
    pub fusion_calls: usize,
    pub config_hash: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AverageRow {
    pub dataset: String,
    pub variant: String,
    pub setting: String,
    pub horizons: usize,
    pub mse: f64,
    pub mae: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunReport {
    pub task: Task,
    pub seed: u64,
    /// Hash of the resolved experiment spec.
    pub spec_hash: String,
    pub rows: Vec<RunRow>,
    pub averages: Vec<AverageRow>,
    pub notes: Vec<String>,
    /// Not written to any file, so reports stay byte-identical across runs.
    pub wall_time_secs: f64,
}

pub const AVERAGE_LABEL: &str = "avg";

impl RunReport {
    pub fn new(task: Task, seed: u64, spec_hash: String, rows: Vec<RunRow>, notes: Vec<String>) -> Self {
        let averages = averages(&rows);
        Self {
            task,
            seed,
            spec_hash,
            rows,
            averages,
            notes,
            wall_time_secs: 0.0,
        }
    }

    /// Largest gap between a stored average and a fresh mean of its rows.
    pub fn average_error(&self) -> f64 {
        averages(&self.rows)
            .iter()
            .zip(&self.averages)
            .map(|(a, b)| (a.mse - b.mse).abs().max((a.mae - b.mae).abs()))
            .fold(0.0, f64::max)
    }

    pub fn find(&self, dataset: &str, horizon: usize, variant: &str) -> Option<&RunRow> {
        self.rows
            .iter()
            .find(|r| r.dataset == dataset && r.horizon == horizon && r.variant == variant)
    }

    /// Horizon rows then one `avg` row per (dataset, variant, setting)
    /// group. Floats use the shortest exact round-trip form.
    pub fn write_csv<W: std::io::Write>(&self, w: W) -> Result<(), HarnessError> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record([
            "dataset",
            "horizon",
            "variant",
            "setting",
            "mse",
            "mae",
            "fusion_calls",
            "config_hash",
        ])?;
        for r in &self.rows {
            out.write_record([
                r.dataset.clone(),
                r.horizon.to_string(),
                r.variant.clone(),
                r.setting.clone(),
                r.mse.to_string(),
                r.mae.to_string(),
                r.fusion_calls.to_string(),
                r.config_hash.clone(),
            ])?;
        }
        for a in &self.averages {
            let calls = self
                .rows
                .iter()
                .find(|r| same_group(r, a))
                .map(|r| r.fusion_calls.to_string())
                .unwrap_or_default();
            out.write_record([
                a.dataset.clone(),
                AVERAGE_LABEL.into(),
                a.variant.clone(),
                a.setting.clone(),
                a.mse.to_string(),
                a.mae.to_string(),
                calls,
                self.spec_hash.clone(),
            ])?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn to_table(&self) -> String {
        let mut lines: Vec<[String; 6]> = vec![[
            "dataset".into(),
            "horizon".into(),
            "variant".into(),
            "setting".into(),
            "mse".into(),
            "mae".into(),
        ]];
        for r in &self.rows {
            lines.push([
                r.dataset.clone(),
                r.horizon.to_string(),
                r.variant.clone(),
                r.setting.clone(),
                format!("{:.4}", r.mse),
                format!("{:.4}", r.mae),
            ]);
        }
        for a in &self.averages {
            lines.push([
                a.dataset.clone(),
                AVERAGE_LABEL.into(),
                a.variant.clone(),
                a.setting.clone(),
                format!("{:.4}", a.mse),
                format!("{:.4}", a.mae),
            ]);
        }
        let widths: Vec<usize> = (0..6)
            .map(|i| lines.iter().map(|l| l[i].len()).max().unwrap_or(0))
            .collect();
        let mut s = String::new();
        for (i, l) in lines.iter().enumerate() {
            let cells: Vec<String> = l.iter().zip(&widths).map(|(c, w)| format!("{c:<w$}")).collect();
            writeln!(s, "{}", cells.join("  ").trim_end()).unwrap();
            if i == 0 {
                writeln!(
                    s,
                    "{}",
                    "-".repeat(widths.iter().sum::<usize>() + 2 * (widths.len() - 1))
                )
                .unwrap();
            }
        }
        writeln!(s, "seed {}  spec {}", self.seed, self.spec_hash).unwrap();
        for n in &self.notes {
            writeln!(s, "note: {n}").unwrap();
        }
        s
    }

    /// Writes `report.csv` and `report.txt` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<(), HarnessError> {
        std::fs::create_dir_all(dir)?;
        self.write_csv(std::fs::File::create(dir.join("report.csv"))?)?;
        std::fs::write(dir.join("report.txt"), self.to_table())?;
        Ok(())
    }
}

fn same_group(r: &RunRow, a: &AverageRow) -> bool {
    r.dataset == a.dataset && r.variant == a.variant && r.setting == a.setting
}

/// One average per group, in order of first appearance.
fn averages(rows: &[RunRow]) -> Vec<AverageRow> {
    let mut out: Vec<AverageRow> = Vec::new();
    for r in rows {
        if out.iter().any(|a| same_group(r, a)) {
            continue;
        }
        let group: Vec<&RunRow> = rows
            .iter()
            .filter(|x| x.dataset == r.dataset && x.variant == r.variant && x.setting == r.setting)
            .collect();
        let n = group.len() as f64;
        out.push(AverageRow {
            dataset: r.dataset.clone(),
            variant: r.variant.clone(),
            setting: r.setting.clone(),
            horizons: group.len(),
            mse: group.iter().map(|x| x.mse).sum::<f64>() / n,
            mae: group.iter().map(|x| x.mae).sum::<f64>() / n,
        });
    }
    out
}

/// Rows of a report CSV, average rows included.
#[derive(Clone, Debug, PartialEq, Deserialize)]
pub struct CsvRow {
    pub dataset: String,
    pub horizon: String,
    pub variant: String,
    pub setting: String,
    pub mse: f64,
    pub mae: f64,
    pub fusion_calls: String,
    pub config_hash: String,
}

pub fn read_csv_rows(path: &Path) -> Result<Vec<CsvRow>, HarnessError> {
    let mut rdr = csv::Reader::from_path(path)?;
    Ok(rdr.deserialize().collect::<Result<_, _>>()?)
}
