//! Per-step training records and their CSV/SVG exports.

use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::Path;

use bittrace_core::nn::StepRecord;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

pub const CSV_HEADER: &str = "step,loss,loss_bits,min_grad_bits,mean_grad_bits,min_param_bits,skipped";

#[derive(Debug, Serialize, Deserialize)]
struct Row {
    step: u64,
    loss: f64,
    loss_bits: u8,
    min_grad_bits: u8,
    mean_grad_bits: f64,
    min_param_bits: u8,
    skipped: bool,
}

impl From<&StepRecord> for Row {
    fn from(r: &StepRecord) -> Self {
        Row {
            step: r.step,
            loss: r.loss,
            loss_bits: r.loss_bits,
            min_grad_bits: r.min_grad_bits,
            mean_grad_bits: r.mean_grad_bits,
            min_param_bits: r.min_param_bits,
            skipped: r.skipped,
        }
    }
}

impl From<Row> for StepRecord {
    fn from(r: Row) -> Self {
        StepRecord {
            step: r.step,
            loss: r.loss,
            loss_bits: r.loss_bits,
            min_grad_bits: r.min_grad_bits,
            mean_grad_bits: r.mean_grad_bits,
            min_param_bits: r.min_param_bits,
            skipped: r.skipped,
        }
    }
}

/// One record per optimizer call, skipped calls included.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainTrace {
    pub records: Vec<StepRecord>,
}

impl TrainTrace {
    pub fn push(&mut self, r: StepRecord) {
        self.records.push(r);
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn losses(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.loss).collect()
    }

    pub fn loss_bits(&self) -> Vec<u8> {
        self.records.iter().map(|r| r.loss_bits).collect()
    }

    pub fn skipped_steps(&self) -> usize {
        self.records.iter().filter(|r| r.skipped).count()
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
        for r in &self.records {
            w.serialize(Row::from(r)).expect("in-memory csv write");
        }
        let body = String::from_utf8(w.into_inner().expect("in-memory csv flush")).expect("csv is utf-8");
        format!("{CSV_HEADER}\n{body}")
    }

    pub fn from_csv(text: &str) -> std::result::Result<Self, String> {
        let mut rd = csv::Reader::from_reader(text.as_bytes());
        let header = rd.headers().map_err(|e| e.to_string())?;
        if header.iter().collect::<Vec<_>>().join(",") != CSV_HEADER {
            return Err(format!(
                "unexpected header `{}`",
                header.iter().collect::<Vec<_>>().join(",")
            ));
        }
        let records = rd
            .deserialize::<Row>()
            .map(|r| r.map(StepRecord::from).map_err(|e| e.to_string()))
            .collect::<std::result::Result<_, _>>()?;
        Ok(TrainTrace { records })
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv()).map_err(|e| CliError::io(path, e))
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::from_csv(&text).map_err(|m| CliError::format(path, m))
    }

    /// Two stacked panels sharing the step axis: log10 of the loss on top,
    /// loss exact bits below.
    pub fn to_svg(&self) -> String {
        const W: f64 = 900.0;
        const PANEL: f64 = 260.0;
        const PAD: f64 = 40.0;
        let n = self.records.len();
        let stride = n.div_ceil(2000).max(1);
        let picked: Vec<&StepRecord> = self.records.iter().step_by(stride).collect();
        let log_loss: Vec<f64> = picked
            .iter()
            .map(|r| if r.loss > 0.0 { r.loss.log10() } else { f64::NAN })
            .collect();
        let bits: Vec<f64> = picked.iter().map(|r| f64::from(r.loss_bits)).collect();
        let steps: Vec<f64> = picked.iter().map(|r| r.step as f64).collect();

        let mut svg = String::new();
        let height = 2.0 * PANEL + 3.0 * PAD;
        let _ = writeln!(
            svg,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{height}" viewBox="0 0 {W} {height}">"#
        );
        let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
        for (k, (label, ys)) in [("log10(loss)", &log_loss), ("loss exact bits", &bits)]
            .into_iter()
            .enumerate()
        {
            let top = PAD + k as f64 * (PANEL + PAD);
            panel(&mut svg, label, &steps, ys, PAD, top, W - 2.0 * PAD, PANEL);
        }
        svg.push_str("</svg>\n");
        svg
    }

    pub fn write_svg(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_svg()).map_err(|e| CliError::io(path, e))
    }
}

#[allow(clippy::too_many_arguments)]
fn panel(svg: &mut String, label: &str, xs: &[f64], ys: &[f64], left: f64, top: f64, w: f64, h: f64) {
    let _ = writeln!(
        svg,
        r#"<rect x="{left}" y="{top}" width="{w}" height="{h}" fill="none" stroke="black"/>"#
    );
    let finite = || ys.iter().copied().filter(|y| y.is_finite());
    let (lo, hi) = (
        finite().fold(f64::INFINITY, f64::min),
        finite().fold(f64::NEG_INFINITY, f64::max),
    );
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="{}" font-size="12" font-family="sans-serif">{label} [{:.3}, {:.3}]</text>"#,
        left + 4.0,
        top - 6.0,
        if lo.is_finite() { lo } else { 0.0 },
        if hi.is_finite() { hi } else { 0.0 }
    );
    if xs.is_empty() || !lo.is_finite() {
        return;
    }
    let (x0, x1) = (xs[0], xs[xs.len() - 1]);
    let sx = if x1 > x0 { w / (x1 - x0) } else { 0.0 };
    let sy = if hi > lo { h / (hi - lo) } else { 0.0 };
    let mut points = String::new();
    for (&x, &y) in xs.iter().zip(ys) {
        if y.is_finite() {
            let _ = write!(points, "{:.1},{:.1} ", left + (x - x0) * sx, top + h - (y - lo) * sy);
        }
    }
    let _ = writeln!(
        svg,
        r#"<polyline fill="none" stroke="steelblue" stroke-width="1" points="{}"/>"#,
        points.trim_end()
    );
}

/// Writes `text` to `path`, creating parent directories.
pub fn write_file(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e: io::Error| CliError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(step: u64, loss: f64, bits: u8) -> StepRecord {
        StepRecord {
            step,
            loss,
            loss_bits: bits,
            min_grad_bits: 3,
            mean_grad_bits: 17.25,
            min_param_bits: 22,
            skipped: bits == 0,
        }
    }

    #[test]
    fn empty_trace_is_header_only() {
        assert_eq!(TrainTrace::default().to_csv(), format!("{CSV_HEADER}\n"));
    }

    #[test]
    fn one_record_layout() {
        let t = TrainTrace {
            records: vec![rec(0, 0.5, 11)],
        };
        assert_eq!(t.to_csv(), format!("{CSV_HEADER}\n0,0.5,11,3,17.25,22,false\n"));
    }

    #[test]
    fn csv_round_trip() {
        let t = TrainTrace {
            records: vec![rec(0, 0.1234567890123, 11), rec(1, 1e-30, 0), rec(2, 3.0, 24)],
        };
        assert_eq!(TrainTrace::from_csv(&t.to_csv()).unwrap(), t);
        assert!(TrainTrace::from_csv("a,b\n").is_err());
    }

    #[test]
    fn svg_has_two_panels() {
        let t = TrainTrace {
            records: (0..50).map(|i| rec(i, 1.0 / (i + 1) as f64, (i % 24) as u8)).collect(),
        };
        let svg = t.to_svg();
        assert_eq!(svg.matches("<polyline").count(), 2);
        assert!(svg.starts_with("<svg"));
    }
}
