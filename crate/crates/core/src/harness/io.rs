//! CSV sample ingestion and result emission.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{TestName, TrialReport};
use crate::error::{Error, Result};
use crate::optimizer::LandscapeGrid;
use crate::statistics::SampleSet;

/// Reads an all-numeric CSV with an optional header row.
///
/// The dimension comes from the first data row unless `expected_d` is given.
pub fn load_csv(path: impl AsRef<Path>, expected_d: Option<usize>) -> Result<SampleSet> {
    let path = path.as_ref();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)?;
    let mut values = Vec::new();
    let mut d = expected_d;
    let mut rows = 0;
    for (k, record) in reader.records().enumerate() {
        let record = record?;
        let line = record.position().map_or(k + 1, |p| p.line() as usize);
        if record.iter().all(str::is_empty) {
            continue;
        }
        let parsed: std::result::Result<Vec<f64>, _> = record.iter().map(f64::from_str).collect();
        let row = match parsed {
            Ok(row) => row,
            // a non-numeric first line is a header
            Err(_) if k == 0 => continue,
            Err(e) => {
                return Err(Error::Parse {
                    line,
                    message: e.to_string(),
                })
            }
        };
        if row.iter().any(|v| !v.is_finite()) {
            return Err(Error::Parse {
                line,
                message: "non-finite value".into(),
            });
        }
        match d {
            None => d = Some(row.len()),
            Some(d) if d != row.len() => {
                return Err(Error::Parse {
                    line,
                    message: format!("expected {d} columns, found {}", row.len()),
                })
            }
            _ => {}
        }
        values.extend(row);
        rows += 1;
    }
    let d = d.unwrap_or(0);
    if rows == 0 || d == 0 {
        return Err(Error::EmptyInput("CSV data section"));
    }
    let label = path.file_stem().map_or_else(|| "csv".to_string(), |s| s.to_string_lossy().into_owned());
    SampleSet::new(Array2::from_shape_vec((rows, d), values).expect("row-major shape"), label)
}

/// Writes a sample as headerless CSV; values round-trip exactly through
/// [`load_csv`].
pub fn write_csv(sample: &SampleSet, path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for row in sample.data().rows() {
        w.write_record(row.iter().map(|v| v.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum OutputFormat {
    JsonLines,
    Csv,
}

impl OutputFormat {
    pub fn extension(self) -> &'static str {
        match self {
            OutputFormat::JsonLines => "jsonl",
            OutputFormat::Csv => "csv",
        }
    }
}

impl FromStr for OutputFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "json-lines" | "jsonl" | "json" => Ok(OutputFormat::JsonLines),
            "csv" => Ok(OutputFormat::Csv),
            _ => Err(Error::InvalidConfig(format!("unknown output format `{s}`"))),
        }
    }
}

/// One emitted row: a test at one test-set size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRecord {
    pub test: TestName,
    pub problem: String,
    pub d: usize,
    #[serde(rename = "J")]
    pub j: usize,
    pub n_te: usize,
    pub alpha: f64,
    pub n_trials: usize,
    pub rejection_rate: f64,
    pub mean_runtime_ms: f64,
    pub seed: u64,
}

pub fn records(report: &TrialReport) -> Vec<ResultRecord> {
    let c = &report.config;
    report
        .aggregates
        .iter()
        .map(|a| ResultRecord {
            test: a.test,
            problem: c.problem.clone(),
            d: c.d,
            j: c.j,
            n_te: c.n_te,
            alpha: c.alpha,
            n_trials: a.n_trials,
            rejection_rate: a.rejection_rate,
            mean_runtime_ms: a.mean_runtime_ms,
            seed: c.seed,
        })
        .collect()
}

/// Writes one record per (test, n_te) across `reports` to `path`.
pub fn emit_results(reports: &[TrialReport], path: impl AsRef<Path>, format: OutputFormat) -> Result<()> {
    write_results(reports, File::create(path)?, format)
}

/// Streams the records of `reports` to any writer.
pub fn write_results<W: Write>(reports: &[TrialReport], out: W, format: OutputFormat) -> Result<()> {
    let all: Vec<ResultRecord> = reports.iter().flat_map(records).collect();
    match format {
        OutputFormat::Csv => {
            let mut w = csv::Writer::from_writer(out);
            for r in &all {
                w.serialize(r)?;
            }
            w.flush()?;
        }
        OutputFormat::JsonLines => {
            let mut w = BufWriter::new(out);
            for r in &all {
                serde_json::to_writer(&mut w, r)?;
                w.write_all(b"\n")?;
            }
            w.flush()?;
        }
    }
    Ok(())
}

pub fn read_results(path: impl AsRef<Path>, format: OutputFormat) -> Result<Vec<ResultRecord>> {
    let file = File::open(path)?;
    match format {
        OutputFormat::Csv => Ok(csv::Reader::from_reader(file)
            .deserialize()
            .collect::<std::result::Result<_, _>>()?),
        OutputFormat::JsonLines => {
            let mut out = Vec::new();
            for line in BufReader::new(file).lines() {
                let line = line?;
                if !line.trim().is_empty() {
                    out.push(serde_json::from_str(&line)?);
                }
            }
            Ok(out)
        }
    }
}

/// Writes a landscape grid as a single JSON document.
pub fn emit_landscape(grid: &LandscapeGrid, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer(&mut w, grid)?;
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::{aggregate, ConfigEcho};
    use crate::statistics::TestOutcome;
    use std::time::Duration;

    fn write(dir: &tempfile::TempDir, name: &str, body: &str) -> std::path::PathBuf {
        let p = dir.path().join(name);
        std::fs::write(&p, body).unwrap();
        p
    }

    #[test]
    fn loads_with_header() {
        let dir = tempfile::tempdir().unwrap();
        let s = load_csv(write(&dir, "a.csv", "x,y\n0,1\n2,3\n"), None).unwrap();
        assert_eq!(s.data(), ndarray::array![[0.0, 1.0], [2.0, 3.0]]);
        let s = load_csv(write(&dir, "b.csv", "0,1\n2,3"), Some(2)).unwrap();
        assert_eq!(s.n(), 2);
    }

    #[test]
    fn rejects_bad_files() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_csv(write(&dir, "e.csv", "x,y\n"), None), Err(Error::EmptyInput(_))));
        assert!(matches!(load_csv(write(&dir, "e2.csv", ""), None), Err(Error::EmptyInput(_))));
        assert!(matches!(
            load_csv(write(&dir, "r.csv", "0,1\n2,3,4\n"), None),
            Err(Error::Parse { line: 2, .. })
        ));
        assert!(matches!(
            load_csv(write(&dir, "p.csv", "h\n0,1\n2,abc\n"), None),
            Err(Error::Parse { line: 3, .. })
        ));
        assert!(matches!(
            load_csv(write(&dir, "n.csv", "0,1\nNaN,3\n"), None),
            Err(Error::Parse { line: 2, .. })
        ));
        assert!(matches!(
            load_csv(write(&dir, "d.csv", "0,1\n"), Some(3)),
            Err(Error::Parse { line: 1, .. })
        ));
        assert!(load_csv(dir.path().join("missing.csv"), None).is_err());
    }

    fn report() -> TrialReport {
        let echo = ConfigEcho {
            problem: "GMD".into(),
            d: 2,
            j: 5,
            n_te: 100,
            alpha: 0.01,
            n_trials: 3,
            seed: 42,
            tests: vec![TestName::L1OptMe, TestName::MmdLin],
        };
        let o = |r: bool| {
            TestOutcome::new("x", if r { 2.0 } else { 0.0 }, 1.0, 0.01, None)
                .unwrap()
                .with_elapsed(Duration::from_micros(1500))
        };
        aggregate(echo, Some(false), vec![vec![o(true), o(false)], vec![o(true), o(true)], vec![o(false), o(false)]]).unwrap()
    }

    #[test]
    fn results_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let rep = report();
        for (fmt, name) in [(OutputFormat::Csv, "r.csv"), (OutputFormat::JsonLines, "r.jsonl")] {
            let p = dir.path().join(name);
            emit_results(std::slice::from_ref(&rep), &p, fmt).unwrap();
            let back = read_results(&p, fmt).unwrap();
            assert_eq!(back, records(&rep));
            assert_eq!(back[0].rejection_rate, 2.0 / 3.0);
            assert_eq!(back[1].mean_runtime_ms, 1.5);
        }
    }

    #[test]
    fn csv_header_schema() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("h.csv");
        emit_results(&[report()], &p, OutputFormat::Csv).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert_eq!(
            text.lines().next().unwrap(),
            "test,problem,d,J,n_te,alpha,n_trials,rejection_rate,mean_runtime_ms,seed"
        );
        assert!(text.lines().nth(1).unwrap().starts_with("L1-opt-ME,GMD,2,5,100,0.01,3,"));
    }

    #[test]
    fn unwritable_path() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("no/such/dir/out.csv");
        assert!(matches!(emit_results(&[report()], p, OutputFormat::Csv), Err(Error::Io(_))));
    }

    #[test]
    fn format_names() {
        assert_eq!("json-lines".parse::<OutputFormat>().unwrap(), OutputFormat::JsonLines);
        assert_eq!("CSV".parse::<OutputFormat>().unwrap(), OutputFormat::Csv);
        assert!("xml".parse::<OutputFormat>().is_err());
    }
}
