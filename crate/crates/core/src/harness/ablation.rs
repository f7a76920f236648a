//! The variant matrix: each variant trained from the same backbones and
//! seeds, evaluated on the same splits, reported side by side.

use std::fmt::Write as _;

use serde::Serialize;

use super::config::{RunConfig, Variant};
use super::eval::{evaluate, EvalReport};
use super::model::BmflModel;
use super::train::train;
use crate::data::LabeledImages;
use crate::error::Result;
use crate::numerics::ParamStore;

#[derive(Debug, Clone, Serialize)]
pub struct AblationRow {
    pub variant: Variant,
    /// Parameter scalars per group.
    pub groups: Vec<(String, usize)>,
    pub report: std::result::Result<EvalReport, String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct AblationTable {
    pub splits: Vec<String>,
    pub rows: Vec<AblationRow>,
}

fn run_one(
    base: &RunConfig,
    variant: Variant,
    backbones: &ParamStore,
    train_set: &LabeledImages,
    splits: &[(String, LabeledImages)],
) -> AblationRow {
    let cfg = base.with_variant(variant);
    let mut groups = Vec::new();
    let outcome = (|| -> Result<EvalReport> {
        let model = BmflModel::build(&cfg, backbones)?;
        groups = model.group_sizes().into_iter().map(|(g, n)| (g.to_string(), n)).collect();
        let trained = train(&cfg, model, train_set)?;
        evaluate(&trained.model, splits)
    })();
    if let Err(e) = &outcome {
        log::warn!("variant {} failed: {e}", variant.label());
    }
    AblationRow {
        variant,
        groups,
        report: outcome.map_err(|e| e.to_string()),
    }
}

/// Runs every variant. A failing variant becomes a failed row and the others
/// still run. With `parallel` the variants train on separate threads, each on
/// its own model state.
pub fn run_ablation_matrix(
    base: &RunConfig,
    backbones: &ParamStore,
    train_set: &LabeledImages,
    splits: &[(String, LabeledImages)],
    parallel: bool,
) -> AblationTable {
    let rows = if parallel {
        std::thread::scope(|s| {
            let handles: Vec<_> = Variant::ALL
                .iter()
                .map(|&v| s.spawn(move || run_one(base, v, backbones, train_set, splits)))
                .collect();
            handles
                .into_iter()
                .zip(Variant::ALL)
                .map(|(h, v)| {
                    h.join().unwrap_or_else(|_| AblationRow {
                        variant: v,
                        groups: Vec::new(),
                        report: Err("worker panicked".into()),
                    })
                })
                .collect()
        })
    } else {
        Variant::ALL
            .iter()
            .map(|&v| run_one(base, v, backbones, train_set, splits))
            .collect()
    };
    AblationTable {
        splits: splits.iter().map(|(n, _)| n.clone()).collect(),
        rows,
    }
}

impl AblationTable {
    pub fn row(&self, variant: Variant) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == variant)
    }

    pub fn accuracy(&self, variant: Variant, split: &str) -> Option<f64> {
        self.row(variant)?.report.as_ref().ok()?.accuracy(split)
    }

    /// Full-model accuracy minus the variant's on `split`; positive when the
    /// full model is better.
    pub fn gap(&self, variant: Variant, split: &str) -> Option<f64> {
        Some(self.accuracy(Variant::Full, split)? - self.accuracy(variant, split)?)
    }

    pub fn mean_corrupted(&self, variant: Variant) -> Option<f64> {
        self.row(variant)?.report.as_ref().ok()?.mean_corrupted_accuracy()
    }

    fn cells(&self, row: &AblationRow) -> Vec<String> {
        let mut cells = vec![row.variant.label().to_string()];
        match &row.report {
            Ok(_) => {
                cells.push("ok".into());
                for s in &self.splits {
                    cells.push(fmt(self.accuracy(row.variant, s)));
                }
                cells.push(fmt(self.mean_corrupted(row.variant)));
                for s in &self.splits {
                    cells.push(fmt(self.gap(row.variant, s)));
                }
            }
            Err(e) => {
                cells.push(format!("failed: {e}"));
                cells.extend(std::iter::repeat_n(String::new(), 2 * self.splits.len() + 1));
            }
        }
        cells
    }

    fn header(&self) -> Vec<String> {
        let mut h = vec!["variant".to_string(), "status".to_string()];
        h.extend(self.splits.iter().cloned());
        h.push("mean_corrupted".into());
        h.extend(self.splits.iter().map(|s| format!("gap_{s}")));
        h
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let io = |e: csv::Error| crate::Error::Io(std::io::Error::other(e));
        w.write_record(self.header()).map_err(io)?;
        for row in &self.rows {
            w.write_record(self.cells(row)).map_err(io)?;
        }
        let bytes = w.into_inner().map_err(|e| crate::Error::Io(std::io::Error::other(e.to_string())))?;
        Ok(String::from_utf8(bytes).expect("csv is utf-8"))
    }

    /// Fixed-width table; gaps are full minus row.
    pub fn to_text(&self) -> String {
        let header = self.header();
        let body: Vec<Vec<String>> = self.rows.iter().map(|r| self.cells(r)).collect();
        let widths: Vec<usize> = (0..header.len())
            .map(|c| {
                body.iter()
                    .filter_map(|r| r.get(c))
                    .map(String::len)
                    .chain([header[c].len()])
                    .max()
                    .unwrap_or(0)
            })
            .collect();
        let mut out = String::new();
        for line in std::iter::once(&header).chain(&body) {
            let cells: Vec<String> = line
                .iter()
                .zip(&widths)
                .map(|(c, w)| format!("{c:<w$}"))
                .collect();
            let _ = writeln!(out, "{}", cells.join("  ").trim_end());
        }
        out
    }
}

fn fmt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |v| format!("{v:.4}"))
}
