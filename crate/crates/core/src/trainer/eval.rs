//! Per-song precision/recall/F1 reports with a mean row, as a text table
//! and as JSON.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::metrics::Prf;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SongRow {
    pub song: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl SongRow {
    pub fn new(song: impl Into<String>, prf: &Prf) -> Self {
        SongRow {
            song: song.into(),
            precision: prf.precision,
            recall: prf.recall,
            f1: prf.f1,
        }
    }
}

/// Mean F1 of one ablation configuration over seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigF1 {
    pub config: String,
    pub f1_per_seed: Vec<f64>,
    pub mean_f1: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<SongRow>,
    pub mean: Option<SongRow>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub ablation: Vec<ConfigF1>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub trace_paths: Vec<String>,
}

impl EvalReport {
    /// Report over `rows`, with the unweighted mean of each column.
    pub fn from_rows(rows: Vec<SongRow>) -> Self {
        let mean = (!rows.is_empty()).then(|| {
            let n = rows.len() as f64;
            let avg = |f: fn(&SongRow) -> f64| rows.iter().map(f).sum::<f64>() / n;
            SongRow {
                song: "Mean".into(),
                precision: avg(|r| r.precision),
                recall: avg(|r| r.recall),
                f1: avg(|r| r.f1),
            }
        });
        EvalReport {
            rows,
            mean,
            ..Default::default()
        }
    }

    pub fn to_table(&self) -> String {
        let width = self
            .rows
            .iter()
            .map(|r| r.song.len())
            .chain([4])
            .max()
            .unwrap_or(4);
        let mut out = String::new();
        if !self.rows.is_empty() {
            let _ = writeln!(out, "{:<width$}  {:>9}  {:>6}  {:>6}", "Song", "Precision", "Recall", "F1");
            for r in self.rows.iter().chain(&self.mean) {
                let _ = writeln!(
                    out,
                    "{:<width$}  {:>9.3}  {:>6.3}  {:>6.3}",
                    r.song, r.precision, r.recall, r.f1
                );
            }
        }
        if !self.ablation.is_empty() {
            if !out.is_empty() {
                out.push('\n');
            }
            let cw = self.ablation.iter().map(|c| c.config.len()).max().unwrap_or(6).max(6);
            let _ = writeln!(out, "{:<cw$}  {:>7}  per-seed F1", "Config", "Mean F1");
            for c in &self.ablation {
                let seeds: Vec<String> = c.f1_per_seed.iter().map(|f| format!("{f:.3}")).collect();
                let _ = writeln!(out, "{:<cw$}  {:>7.3}  {}", c.config, c.mean_f1, seeds.join(" "));
            }
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}
