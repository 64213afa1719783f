use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::VisitCountHistogram;

/// Column order of [`CsvRecord::to_row`].
pub const CSV_HEADER: &str = "experiment_id,kind,tau,h,n,trials,p_hat,histogram,stderr,target,pass";

/// One result row. `histogram` is empty for survival experiments and holds
/// `counts[0]|counts[1]|...` for visit-count experiments, in which case
/// `p_hat` is the frequency of zero visits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsvRecord {
    pub experiment_id: String,
    pub kind: String,
    pub tau: f64,
    pub h: f64,
    pub n: usize,
    pub trials: usize,
    pub p_hat: f64,
    pub histogram: Option<Vec<u64>>,
    pub stderr: f64,
    pub target: f64,
    pub pass: bool,
}

impl CsvRecord {
    pub fn with_histogram(mut self, hist: &VisitCountHistogram) -> Self {
        self.histogram = Some(hist.counts.clone());
        self
    }

    pub fn to_row(&self) -> String {
        let hist = self
            .histogram
            .as_ref()
            .map(|c| c.iter().map(u64::to_string).collect::<Vec<_>>().join("|"))
            .unwrap_or_default();
        let mut row = String::new();
        let _ = write!(
            row,
            "{},{},{},{},{},{},{},{},{},{},{}",
            escape(&self.experiment_id),
            escape(&self.kind),
            self.tau,
            self.h,
            self.n,
            self.trials,
            self.p_hat,
            hist,
            self.stderr,
            self.target,
            self.pass
        );
        row
    }
}

fn escape(field: &str) -> String {
    if field.contains([',', '"', '\n']) {
        format!("\"{}\"", field.replace('"', "\"\""))
    } else {
        field.to_string()
    }
}

/// Header plus one line per record.
pub fn to_csv(records: &[CsvRecord]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in records {
        out.push_str(&r.to_row());
        out.push('\n');
    }
    out
}
