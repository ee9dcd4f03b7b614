//! Report fragments and their on-disk form.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::assistant::{Histogram, StorageReport, REFERENCE_CONTINUOUS_STORAGE_BYTES, REFERENCE_DISCRETE_STORAGE_BYTES};
use crate::cost::ParameterTriple;
use crate::detector::ConfusionMatrix;
use crate::media_io::{save_pgm, Image8};
use crate::{Error, Result};

use super::config::AssistMode;

/// Published reference figures, shown next to desk-scale measurements.
pub mod reference {
    pub const BASELINE_ERROR: f64 = 28.2;
    pub const ASSISTED_ERROR: f64 = 36.3;
    pub const ASSISTED_DELTA: f64 = 8.1;
    pub const UNFAMILIAR_ERROR: f64 = 37.2;
    pub const SIGMA_ONLY_ERROR: f64 = 15.5;
    pub const TRANSFER_BASELINE_ERROR: f64 = 46.0;
    pub const TRANSFER_ASSISTED_ERROR: f64 = 49.1;
    pub const CONTINUOUS_EPOCH_SECONDS: (f64, f64) = (3796.0, 20.0);
    pub const DISCRETE_EPOCH_SECONDS: (f64, f64) = (723.0, 130.0);
    pub const CONTINUOUS_VAL_ERROR: f64 = 37.2;
    pub const DISCRETE_VAL_ERROR: f64 = 18.1;
    /// Covers, cells and side length behind the discrete storage figure.
    pub const FULL_SCALE: (u64, u64, usize) = (10_000, 2197, 256);
}

#[derive(Debug, Clone, PartialEq)]
pub struct BaselineFragment {
    pub matrix: ConfusionMatrix,
    pub train_pairs: usize,
    pub val_pairs: usize,
    /// Mean entropy lost to ε rounding per baseline embedding, in bits.
    pub rounding_loss_bits: f64,
}

/// Parameters chosen for one validation cover.
#[derive(Debug, Clone, PartialEq)]
pub struct ChosenParams {
    pub cover_id: String,
    pub params: ParameterTriple,
    /// Grid cell, when the choice came from the grid.
    pub cell: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AssistedFragment {
    pub mode: AssistMode,
    pub matrix: ConfusionMatrix,
    pub delta_pp: f64,
    /// Mean detector score of the chosen stegos and of the default-triple stegos.
    pub mean_score: f64,
    pub mean_default_score: f64,
    pub choices: Vec<ChosenParams>,
    /// Oracle mode only: the grid cache manifest.
    pub manifest_csv: Option<String>,
    pub histograms: [Histogram; 3],
    pub ablation: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CrossFragment {
    /// Detector B on the baseline stegos.
    pub baseline_matrix: ConfusionMatrix,
    /// Detector B on the assisted stegos.
    pub matrix: ConfusionMatrix,
    pub familiar_delta_pp: f64,
    pub unfamiliar_delta_pp: f64,
    pub checkpoints_differ: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransferFragment {
    pub dataset: String,
    pub out_of_distribution: bool,
    pub covers: usize,
    pub baseline_matrix: ConfusionMatrix,
    pub assisted_matrix: ConfusionMatrix,
    pub delta_pp: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadSummary {
    pub epochs: usize,
    pub epoch_seconds: Vec<f64>,
    pub mean_seconds: f64,
    pub std_seconds: f64,
    pub best_epoch: usize,
    pub val_matrix: ConfusionMatrix,
    pub storage_bytes: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteFragment {
    pub continuous: HeadSummary,
    pub discrete: HeadSummary,
    pub storage: StorageReport,
    pub materialized: bool,
    /// Materialized bytes for the full grid over the full-scale cover set.
    pub full_scale_bytes: u64,
}

/// Amplified-difference exemplar for one validation cover.
#[derive(Debug, Clone, PartialEq)]
pub struct Exemplar {
    pub cover_id: String,
    pub cover: Image8,
    pub baseline_diff: Image8,
    pub assisted_diff: Image8,
}

/// Everything a run produced. Each phase fills its own fragment.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Report {
    pub config_text: String,
    pub baseline: Option<BaselineFragment>,
    pub assisted: Option<AssistedFragment>,
    pub cross: Option<CrossFragment>,
    pub transfer: Option<TransferFragment>,
    pub discrete: Option<DiscreteFragment>,
    pub exemplars: Vec<Exemplar>,
    pub diff_factor: u32,
    /// Wall-clock seconds per phase; markdown only.
    pub timings: Vec<(String, f64)>,
}

pub const SUMMARY_CSV_HEADER: &str = "matrix,cover_as_cover,cover_as_stego,stego_as_cover,stego_as_stego,error_rate,reference_error_rate";
pub const PARAMS_CSV_HEADER: &str = "cover_id,sigma,epsilon,wetcost,cell";
pub const TIMING_NOTE: &str = "Timings vary between runs and appear only in report.md.";

fn fmt_ref(r: Option<f64>) -> String {
    r.map(|v| v.to_string()).unwrap_or_default()
}

impl Report {
    pub fn is_empty(&self) -> bool {
        self.baseline.is_none()
            && self.assisted.is_none()
            && self.cross.is_none()
            && self.transfer.is_none()
            && self.discrete.is_none()
    }

    /// `(name, matrix, reference error rate)` for every matrix in the report.
    pub fn matrices(&self) -> Vec<(&'static str, ConfusionMatrix, Option<f64>)> {
        let mut out = Vec::new();
        let sigma_only = self.assisted.as_ref().is_some_and(|a| a.ablation == "sigma");
        if let Some(b) = &self.baseline {
            out.push(("baseline", b.matrix, Some(reference::BASELINE_ERROR)));
        }
        if let Some(a) = &self.assisted {
            let r = if sigma_only { None } else { Some(reference::ASSISTED_ERROR) };
            out.push(("assisted", a.matrix, r));
        }
        if let Some(c) = &self.cross {
            out.push(("unfamiliar_baseline", c.baseline_matrix, None));
            let r = if sigma_only { reference::SIGMA_ONLY_ERROR } else { reference::UNFAMILIAR_ERROR };
            out.push(("unfamiliar_assisted", c.matrix, Some(r)));
        }
        if let Some(t) = &self.transfer {
            out.push(("transfer_baseline", t.baseline_matrix, Some(reference::TRANSFER_BASELINE_ERROR)));
            out.push(("transfer_assisted", t.assisted_matrix, Some(reference::TRANSFER_ASSISTED_ERROR)));
        }
        if let Some(d) = &self.discrete {
            out.push(("continuous_head", d.continuous.val_matrix, Some(reference::CONTINUOUS_VAL_ERROR)));
            out.push(("discrete_head", d.discrete.val_matrix, Some(reference::DISCRETE_VAL_ERROR)));
        }
        out
    }

    pub fn summary_csv(&self) -> Result<String> {
        let mut out = format!("{SUMMARY_CSV_HEADER}\n");
        for (name, m, r) in self.matrices() {
            out.push_str(&format!("{name},{},{}\n", m.csv_row()?, fmt_ref(r)));
        }
        Ok(out)
    }

    fn storage_csv(d: &DiscreteFragment) -> String {
        let s = &d.storage;
        let (fc, fcells, side) = reference::FULL_SCALE;
        format!(
            "item,bytes\n\
             continuous_covers,{}\n\
             discrete_stored,{}\n\
             discrete_materialized,{}\n\
             artifact,{}\n\
             full_scale_projection_{fc}x{fcells}x{side}px,{}\n\
             reference_continuous,{}\n\
             reference_discrete,{}\n",
            s.cover_bytes,
            s.stored_bytes,
            s.materialized_bytes,
            s.artifact_bytes,
            d.full_scale_bytes,
            REFERENCE_CONTINUOUS_STORAGE_BYTES,
            REFERENCE_DISCRETE_STORAGE_BYTES,
        )
    }

    fn params_csv(a: &AssistedFragment) -> String {
        let mut out = format!("{PARAMS_CSV_HEADER}\n");
        for c in &a.choices {
            let p = c.params;
            let cell = c.cell.map(|v| v.to_string()).unwrap_or_default();
            out.push_str(&format!("{},{},{},{},{cell}\n", c.cover_id, p.sigma_mult, p.epsilon_mult, p.wetcost_mult));
        }
        out
    }

    pub fn markdown(&self) -> Result<String> {
        let mut md = String::from("# Assisted embedding experiment\n\n");
        md.push_str("Reference figures are the published full-scale results and are not expected to match at desk scale.\n\n");
        md.push_str("## Confusion matrices\n\n");
        md.push_str("| matrix | cover→cover % | cover→stego % | stego→cover % | stego→stego % | error % | reference error % |\n");
        md.push_str("|---|---|---|---|---|---|---|\n");
        for (name, m, r) in self.matrices() {
            let p = m.percentages()?;
            let _ = writeln!(
                md,
                "| {name} | {:.1} | {:.1} | {:.1} | {:.1} | {:.1} | {} |",
                p[0],
                p[1],
                p[2],
                p[3],
                m.error_rate_percent()?,
                r.map(|v| format!("{v:.1}")).unwrap_or_default()
            );
        }
        if let Some(b) = &self.baseline {
            let _ = write!(
                md,
                "\n## Baseline\n\n{} training pairs, {} validation pairs. \
                 Mean payload lost to ε rounding: {:.3e} bits per image.\n",
                b.train_pairs, b.val_pairs, b.rounding_loss_bits
            );
        }
        if let Some(a) = &self.assisted {
            let _ = write!(
                md,
                "\n## Assisted ({} selection, ablation `{}`)\n\n\
                 Error change against the baseline: {:+.1} points (reference {:+.1}).\n\
                 Mean detector score: {:.4} chosen vs {:.4} default triple.\n",
                a.mode, a.ablation, a.delta_pp, reference::ASSISTED_DELTA, a.mean_score, a.mean_default_score
            );
        }
        if let Some(c) = &self.cross {
            let _ = write!(
                md,
                "\n## Second detector\n\nFamiliar detector delta {:+.1} points, unfamiliar detector delta {:+.1} points. \
                 Detector checkpoints differ: {}.\n",
                c.familiar_delta_pp, c.unfamiliar_delta_pp, c.checkpoints_differ
            );
        }
        if let Some(t) = &self.transfer {
            let _ = write!(
                md,
                "\n## Transfer\n\nDataset `{}` ({} covers, {}). No model was retrained. Delta {:+.1} points \
                 (reference {:.1} → {:.1}).\n",
                t.dataset,
                t.covers,
                if t.out_of_distribution { "out-of-distribution" } else { "in-distribution" },
                t.delta_pp,
                reference::TRANSFER_BASELINE_ERROR,
                reference::TRANSFER_ASSISTED_ERROR
            );
        }
        if let Some(d) = &self.discrete {
            let (c_ref, d_ref) = (reference::CONTINUOUS_EPOCH_SECONDS, reference::DISCRETE_EPOCH_SECONDS);
            md.push_str("\n## Continuous vs discrete heads\n\n");
            let _ = writeln!(md, "Grid cache: {}.\n", if d.materialized { "materialized" } else { "lazy" });
            md.push_str("| head | storage bytes | seconds per epoch | validation error % | reference storage | reference time | reference error % |\n");
            md.push_str("|---|---|---|---|---|---|---|\n");
            for (name, h, rs, rt, re) in [
                ("continuous", &d.continuous, "704 MB", c_ref, reference::CONTINUOUS_VAL_ERROR),
                ("discrete", &d.discrete, "2.8 TB", d_ref, reference::DISCRETE_VAL_ERROR),
            ] {
                let _ = writeln!(
                    md,
                    "| {name} | {} | {:.3} ± {:.3} ({} epochs) | {:.1} | {rs} | {}s ± {}s | {re} |",
                    h.storage_bytes,
                    h.mean_seconds,
                    h.std_seconds,
                    h.epochs,
                    h.val_matrix.error_rate_percent()?,
                    rt.0,
                    rt.1
                );
            }
            let _ = writeln!(
                md,
                "\nFull-grid materialization at full scale would take {} bytes.",
                d.full_scale_bytes
            );
        }
        if !self.exemplars.is_empty() {
            let _ = writeln!(md, "\n## Exemplars\n\nChange maps amplified by a factor of {} are in `exemplars/`.", self.diff_factor);
        }
        if !self.timings.is_empty() {
            md.push_str("\n## Timings\n\n| phase | seconds |\n|---|---|\n");
            for (phase, s) in &self.timings {
                let _ = writeln!(md, "| {phase} | {s:.2} |");
            }
            let _ = writeln!(md, "\n{TIMING_NOTE}");
        }
        md.push_str("\n## Configuration\n\n```\n");
        md.push_str(&self.config_text);
        md.push_str("```\n");
        Ok(md)
    }
}

fn write(dir: &Path, name: &str, bytes: &[u8], written: &mut Vec<PathBuf>) -> Result<()> {
    let p = dir.join(name);
    if let Some(parent) = p.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(&p, bytes).map_err(|e| Error::io(&p, e))?;
    written.push(p);
    Ok(())
}

/// Writes the report into `dir` and returns the written paths. File names
/// depend only on which fragments are present.
pub fn emit_report(report: &Report, dir: &Path) -> Result<Vec<PathBuf>> {
    if report.is_empty() {
        return Err(Error::Empty("report has no fragments"));
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut w = Vec::new();
    write(dir, "report.md", report.markdown()?.as_bytes(), &mut w)?;
    write(dir, "config.txt", report.config_text.as_bytes(), &mut w)?;
    write(dir, "summary.csv", report.summary_csv()?.as_bytes(), &mut w)?;
    for (name, m, _) in report.matrices() {
        write(dir, &format!("confusion_{name}.csv"), m.to_csv()?.as_bytes(), &mut w)?;
    }
    if let Some(a) = &report.assisted {
        write(dir, "assisted_params.csv", Report::params_csv(a).as_bytes(), &mut w)?;
        for (axis, h) in ["sigma", "epsilon", "wetcost"].iter().zip(&a.histograms) {
            write(dir, &format!("histogram_{axis}.csv"), h.to_csv().as_bytes(), &mut w)?;
        }
        if let Some(m) = &a.manifest_csv {
            write(dir, "grid_manifest.csv", m.as_bytes(), &mut w)?;
        }
    }
    if let Some(d) = &report.discrete {
        write(dir, "storage.csv", Report::storage_csv(d).as_bytes(), &mut w)?;
    }
    if let Some(t) = &report.transfer {
        let csv = format!(
            "dataset,out_of_distribution,covers,baseline_error_rate,assisted_error_rate,delta_pp\n{},{},{},{},{},{}\n",
            t.dataset,
            t.out_of_distribution,
            t.covers,
            t.baseline_matrix.error_rate_percent()?,
            t.assisted_matrix.error_rate_percent()?,
            t.delta_pp
        );
        write(dir, "transfer.csv", csv.as_bytes(), &mut w)?;
    }
    if !report.exemplars.is_empty() {
        let ex = dir.join("exemplars");
        std::fs::create_dir_all(&ex).map_err(|e| Error::io(&ex, e))?;
        for e in &report.exemplars {
            for (suffix, img) in [("cover", &e.cover), ("baseline_diff", &e.baseline_diff), ("assisted_diff", &e.assisted_diff)] {
                let p = ex.join(format!("{}_{suffix}.pgm", e.cover_id));
                save_pgm(&p, img)?;
                w.push(p);
            }
        }
    }
    Ok(w)
}
