//! Dataset generation and persistence.
//!
//! The doubling task maps w to ww over a fixed alphabet. Records are stored
//! one per line with tab-separated `name=values` fields (token ids separated
//! by spaces); a header line carries the record count so truncation is
//! detected on load. Token text lives only in the vocab sidecars.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::vocab::Vocab;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("{path}:{line}: {msg}")]
    Malformed { path: String, line: usize, msg: String },
    #[error("{path}: header says {expected} records, found {found} (truncated?)")]
    Truncated { path: String, expected: usize, found: usize },
    #[error("invalid config: {0}")]
    BadConfig(String),
}

const HEADER_PREFIX: &str = "#softperm-dataset count=";

/// Latent multiset annotation attached to a training record.
#[derive(Debug, Clone, PartialEq)]
pub struct Annotation {
    /// Sparse multiplicities: (input position, vocab id, count), count > 0.
    pub z: Vec<(u32, u32, u32)>,
    /// Multiset tokens in canonical order.
    pub z_prime: Vec<u32>,
    /// For each z_prime position, the input position it came from.
    pub align: Vec<u32>,
    /// 1-based occurrence index of the token within its multiset.
    pub occ: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub x: Vec<u32>,
    pub y: Vec<u32>,
    pub ann: Option<Annotation>,
}

pub type Dataset = Vec<Record>;

/// Generation protocol for the doubling task.
#[derive(Debug, Clone)]
pub struct DoublingConfig {
    pub alphabet_size: usize,
    pub train_len: (usize, usize),
    pub dev_len: (usize, usize),
    pub test_len: (usize, usize),
    pub n_train: usize,
    pub n_dev: usize,
    pub n_test: usize,
    pub seed: u64,
}

impl Default for DoublingConfig {
    fn default() -> Self {
        DoublingConfig {
            alphabet_size: 11,
            train_len: (5, 10),
            dev_len: (11, 11),
            test_len: (11, 20),
            n_train: 4000,
            n_dev: 500,
            n_test: 1000,
            seed: 1,
        }
    }
}

impl DoublingConfig {
    fn validate(&self) -> Result<(), DataError> {
        if self.alphabet_size == 0 {
            return Err(DataError::BadConfig("alphabet_size must be positive".into()));
        }
        for (name, (lo, hi)) in
            [("train", self.train_len), ("dev", self.dev_len), ("test", self.test_len)]
        {
            if lo == 0 || lo > hi {
                return Err(DataError::BadConfig(format!("{} length range {}..{} empty", name, lo, hi)));
            }
        }
        if self.n_train == 0 || self.n_dev == 0 || self.n_test == 0 {
            return Err(DataError::BadConfig("split counts must be positive".into()));
        }
        Ok(())
    }
}

pub struct DoublingData {
    pub vocab: Vocab,
    pub train: Dataset,
    pub dev: Dataset,
    pub test: Dataset,
}

/// Draw a length uniformly from the range, then symbols uniformly, and emit
/// (w, ww). Deterministic under a fixed seed.
pub fn gen_doubling(config: &DoublingConfig) -> Result<DoublingData, DataError> {
    config.validate()?;
    let vocab = Vocab::alphabet(config.alphabet_size);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut gen_split = |count: usize, (lo, hi): (usize, usize)| -> Dataset {
        (0..count)
            .map(|_| {
                let len = rng.gen_range(lo..=hi);
                let x: Vec<u32> =
                    (0..len).map(|_| rng.gen_range(1..=config.alphabet_size as u32)).collect();
                let mut y = x.clone();
                y.extend_from_slice(&x);
                Record { x, y, ann: None }
            })
            .collect()
    };
    let train = gen_split(config.n_train, config.train_len);
    let dev = gen_split(config.n_dev, config.dev_len);
    let test = gen_split(config.n_test, config.test_len);
    Ok(DoublingData { vocab, train, dev, test })
}

fn push_ids(out: &mut String, name: &str, ids: &[u32]) {
    out.push('\t');
    out.push_str(name);
    out.push('=');
    for (i, id) in ids.iter().enumerate() {
        if i > 0 {
            out.push(' ');
        }
        let _ = write!(out, "{}", id);
    }
}

pub fn save_dataset(path: &Path, data: &Dataset) -> Result<(), DataError> {
    let mut out = String::new();
    let _ = writeln!(out, "{}{}", HEADER_PREFIX, data.len());
    for rec in data {
        let mut line = String::new();
        line.push('x');
        line.push('=');
        for (i, id) in rec.x.iter().enumerate() {
            if i > 0 {
                line.push(' ');
            }
            let _ = write!(line, "{}", id);
        }
        push_ids(&mut line, "y", &rec.y);
        if let Some(ann) = &rec.ann {
            line.push_str("\tz=");
            for (i, (p, v, c)) in ann.z.iter().enumerate() {
                if i > 0 {
                    line.push(' ');
                }
                let _ = write!(line, "{},{},{}", p, v, c);
            }
            push_ids(&mut line, "z_prime", &ann.z_prime);
            push_ids(&mut line, "align", &ann.align);
            push_ids(&mut line, "occ", &ann.occ);
        }
        out.push_str(&line);
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

fn parse_ids(path: &str, line_no: usize, s: &str) -> Result<Vec<u32>, DataError> {
    if s.is_empty() {
        return Ok(Vec::new());
    }
    s.split(' ')
        .map(|tok| {
            tok.parse::<u32>().map_err(|_| DataError::Malformed {
                path: path.to_string(),
                line: line_no,
                msg: format!("bad token id {:?}", tok),
            })
        })
        .collect()
}

pub fn load_dataset(path: &Path) -> Result<Dataset, DataError> {
    let pstr = path.display().to_string();
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate();
    let expected = match lines.next() {
        Some((_, first)) if first.starts_with(HEADER_PREFIX) => first[HEADER_PREFIX.len()..]
            .trim()
            .parse::<usize>()
            .map_err(|_| DataError::Malformed {
                path: pstr.clone(),
                line: 1,
                msg: "unreadable record count in header".into(),
            })?,
        _ => {
            return Err(DataError::Malformed {
                path: pstr,
                line: 1,
                msg: "missing dataset header".into(),
            })
        }
    };

    let mut records = Vec::with_capacity(expected);
    for (idx, line) in lines {
        let line_no = idx + 1;
        if line.is_empty() {
            continue;
        }
        let mut x = None;
        let mut y = None;
        let mut z = None;
        let mut z_prime = None;
        let mut align = None;
        let mut occ = None;
        for field in line.split('\t') {
            let (name, value) = field.split_once('=').ok_or_else(|| DataError::Malformed {
                path: pstr.clone(),
                line: line_no,
                msg: format!("field {:?} missing '='", field),
            })?;
            match name {
                "x" => x = Some(parse_ids(&pstr, line_no, value)?),
                "y" => y = Some(parse_ids(&pstr, line_no, value)?),
                "z" => {
                    let mut triples = Vec::new();
                    for t in value.split(' ').filter(|t| !t.is_empty()) {
                        let parts: Vec<&str> = t.split(',').collect();
                        if parts.len() != 3 {
                            return Err(DataError::Malformed {
                                path: pstr.clone(),
                                line: line_no,
                                msg: format!("bad z triple {:?}", t),
                            });
                        }
                        let nums: Result<Vec<u32>, _> =
                            parts.iter().map(|p| p.parse::<u32>()).collect();
                        let nums = nums.map_err(|_| DataError::Malformed {
                            path: pstr.clone(),
                            line: line_no,
                            msg: format!("bad z triple {:?}", t),
                        })?;
                        triples.push((nums[0], nums[1], nums[2]));
                    }
                    z = Some(triples);
                }
                "z_prime" => z_prime = Some(parse_ids(&pstr, line_no, value)?),
                "align" => align = Some(parse_ids(&pstr, line_no, value)?),
                "occ" => occ = Some(parse_ids(&pstr, line_no, value)?),
                other => {
                    eprintln!("{}:{}: ignoring unknown field {:?}", pstr, line_no, other);
                }
            }
        }
        let x = x.ok_or_else(|| DataError::Malformed {
            path: pstr.clone(),
            line: line_no,
            msg: "missing x field".into(),
        })?;
        let y = y.ok_or_else(|| DataError::Malformed {
            path: pstr.clone(),
            line: line_no,
            msg: "missing y field".into(),
        })?;
        let ann = match (z, z_prime, align, occ) {
            (Some(z), Some(z_prime), Some(align), Some(occ)) => {
                Some(Annotation { z, z_prime, align, occ })
            }
            (None, None, None, None) => None,
            _ => {
                return Err(DataError::Malformed {
                    path: pstr.clone(),
                    line: line_no,
                    msg: "partial annotation (need all of z, z_prime, align, occ)".into(),
                })
            }
        };
        records.push(Record { x, y, ann });
    }
    if records.len() != expected {
        return Err(DataError::Truncated { path: pstr, expected, found: records.len() });
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn doubling_examples_are_doubled() {
        let cfg = DoublingConfig { n_train: 50, n_dev: 5, n_test: 5, ..Default::default() };
        let data = gen_doubling(&cfg).unwrap();
        for rec in &data.train {
            assert_eq!(rec.y.len(), 2 * rec.x.len());
            assert_eq!(&rec.y[..rec.x.len()], &rec.x[..]);
            assert_eq!(&rec.y[rec.x.len()..], &rec.x[..]);
            assert!(rec.x.len() >= 5 && rec.x.len() <= 10);
        }
        for rec in &data.test {
            assert!(rec.x.len() >= 11 && rec.x.len() <= 20);
        }
        for rec in &data.dev {
            assert_eq!(rec.x.len(), 11);
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = DoublingConfig { n_train: 30, n_dev: 3, n_test: 3, seed: 7, ..Default::default() };
        let a = gen_doubling(&cfg).unwrap();
        let b = gen_doubling(&cfg).unwrap();
        assert_eq!(a.train, b.train);
        assert_eq!(a.dev, b.dev);
        assert_eq!(a.test, b.test);
    }

    #[test]
    fn save_load_roundtrip() {
        let cfg = DoublingConfig { n_train: 100, n_dev: 5, n_test: 5, ..Default::default() };
        let data = gen_doubling(&cfg).unwrap();
        let mut train = data.train.clone();
        train[0].ann = Some(Annotation {
            z: vec![(0, 3, 2), (1, 5, 1)],
            z_prime: vec![3, 3, 5],
            align: vec![0, 0, 1],
            occ: vec![1, 2, 1],
        });
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("train.tsv");
        save_dataset(&path, &train).unwrap();
        let loaded = load_dataset(&path).unwrap();
        assert_eq!(train, loaded);
    }

    #[test]
    fn truncated_file_is_an_error() {
        let cfg = DoublingConfig { n_train: 10, n_dev: 2, n_test: 2, ..Default::default() };
        let data = gen_doubling(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("train.tsv");
        save_dataset(&path, &data.train).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        let cut: Vec<&str> = text.lines().take(6).collect();
        fs::write(&path, cut.join("\n")).unwrap();
        assert!(matches!(load_dataset(&path), Err(DataError::Truncated { .. })));
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.tsv");
        fs::write(&path, "#softperm-dataset count=1\nx=1 2\tty pos\n").unwrap();
        let err = load_dataset(&path).unwrap_err();
        assert!(err.to_string().contains(":2:"), "got {err}");
    }

    #[test]
    fn unknown_field_is_ignored() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("fwd.tsv");
        fs::write(&path, "#softperm-dataset count=1\nx=1 2\ty=1 2 1 2\tfuture=5\n").unwrap();
        let loaded = load_dataset(&path).unwrap();
        assert_eq!(loaded.len(), 1);
        assert_eq!(loaded[0].x, vec![1, 2]);
    }

    #[test]
    fn symbol_distribution_is_uniform() {
        use statrs::distribution::{ChiSquared, ContinuousCDF};
        let cfg = DoublingConfig::default();
        let data = gen_doubling(&cfg).unwrap();
        let mut counts = vec![0usize; cfg.alphabet_size];
        let mut total = 0usize;
        for rec in &data.train {
            for &id in &rec.x {
                counts[(id - 1) as usize] += 1;
                total += 1;
            }
        }
        let expected = total as f64 / cfg.alphabet_size as f64;
        let stat: f64 =
            counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
        let dist = ChiSquared::new((cfg.alphabet_size - 1) as f64).unwrap();
        let p = 1.0 - dist.cdf(stat);
        assert!(p > 0.001, "chi-square stat {stat:.2}, p {p:.5}");
    }
}
