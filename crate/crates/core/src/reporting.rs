//! Plot-ready artifacts: the accuracy-by-length curve and the two-stage
//! performance breakdown. Plain text only.

use std::fs;
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("{path}: missing column {column:?}")]
    MissingColumn { path: String, column: &'static str },
    #[error("{path}:{line}: {msg}")]
    Malformed { path: String, line: usize, msg: String },
}

/// Extract (length, accuracy) pairs from an evaluation CSV into a
/// two-column whitespace-separated file for any plotting tool.
pub fn length_curve(csv_path: &Path, out_path: &Path) -> Result<usize, ReportError> {
    let pstr = csv_path.display().to_string();
    let text = fs::read_to_string(csv_path)?;
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or_else(|| ReportError::Malformed {
        path: pstr.clone(),
        line: 1,
        msg: "empty file".into(),
    })?;
    let cols: Vec<&str> = header.split(',').collect();
    let col = |name: &'static str| -> Result<usize, ReportError> {
        cols.iter()
            .position(|&c| c == name)
            .ok_or(ReportError::MissingColumn { path: pstr.clone(), column: name })
    };
    let len_col = col("length")?;
    let acc_col = col("exact_match")?;
    let mut out = String::new();
    let mut rows = 0;
    for (i, line) in lines {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != cols.len() {
            return Err(ReportError::Malformed {
                path: pstr.clone(),
                line: i + 1,
                msg: format!("expected {} fields, got {}", cols.len(), fields.len()),
            });
        }
        out.push_str(fields[len_col]);
        out.push(' ');
        out.push_str(fields[acc_col]);
        out.push('\n');
        rows += 1;
    }
    fs::write(out_path, out)?;
    Ok(rows)
}

/// Stage-wise accuracy: Freq is the multiset-correct rate, Seq the full
/// exact-match rate, Seq/Freq the conditional rate among multiset-correct
/// predictions.
#[derive(Debug, Clone, PartialEq)]
pub struct Breakdown {
    pub freq_pct: f64,
    pub seq_pct: f64,
    /// None when no example had a correct multiset.
    pub seq_given_freq_pct: Option<f64>,
    pub total: usize,
}

/// `flags`: per example (multiset correct?, sequence correct?).
pub fn breakdown(flags: &[(bool, bool)]) -> Breakdown {
    let total = flags.len();
    let freq = flags.iter().filter(|(f, _)| *f).count();
    let seq = flags.iter().filter(|(_, s)| *s).count();
    let seq_and_freq = flags.iter().filter(|(f, s)| *f && *s).count();
    let pct = |a: usize, b: usize| if b == 0 { 0.0 } else { 100.0 * a as f64 / b as f64 };
    Breakdown {
        freq_pct: pct(freq, total),
        seq_pct: pct(seq, total),
        seq_given_freq_pct: if freq == 0 { None } else { Some(pct(seq_and_freq, freq)) },
        total,
    }
}

impl Breakdown {
    pub fn render(&self) -> String {
        let sgf = match self.seq_given_freq_pct {
            Some(v) => format!("{:.2}", v),
            None => "n/a".to_string(),
        };
        format!(
            "examples={}\nfreq={:.2}\nseq={:.2}\nseq_given_freq={}\n",
            self.total, self.freq_pct, self.seq_pct, sgf
        )
    }
}
