//! Append-only trial log with best-so-far queries and exports.
//!
//! On-disk format: UTF-8 text, one JSON object per line. The first line is
//! the header `{"format":"rftune-log","version":1,"meta":{...}}`; every
//! following line is one [`TrialRecord`]. JSON string escaping covers
//! quotes, backslashes, commas and control characters in parameter values,
//! so a record never spans lines. A record counts only once its trailing
//! newline is on disk; a torn final line is ignored on load.

use std::fs::File;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::evaluate::{MetricKind, TrialRecord, CLOCK_TOLERANCE_S};
use crate::launch::LauncherKind;
use crate::space::Configuration;

const FORMAT: &str = "rftune-log";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("record has trial_index {got}, expected {expected}")]
    IndexGap { expected: usize, got: usize },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error("{path}: bad header: {reason}")]
    BadHeader { path: String, reason: String },
    #[error("log has no successful trials")]
    NoSuccessfulTrials,
    #[error("baseline must be positive, got {0}")]
    NonPositiveBaseline(f64),
    #[error("overhead is undefined for a trial without an application runtime")]
    OverheadUndefined,
    #[error("timing fields are inconsistent: overhead {0:.3} s is below the clock tolerance")]
    InconsistentTiming(f64),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> StoreError + '_ {
    move |source| StoreError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogMeta {
    pub problem: String,
    pub seed: u64,
    pub space_fingerprint: String,
    pub parameters: Vec<String>,
    pub max_evals: Option<usize>,
    pub wall_clock_limit_s: Option<f64>,
    pub metric: MetricKind,
    pub launcher: LauncherKind,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    meta: LogMeta,
}

#[derive(Debug)]
pub struct TrialLog {
    meta: LogMeta,
    records: Vec<TrialRecord>,
    sink: Option<(PathBuf, File)>,
}

/// What [`TrialLog::load`] found beyond the complete records.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LoadReport {
    pub records: usize,
    /// Bytes after the last complete record that were ignored.
    pub discarded_bytes: usize,
}

impl TrialLog {
    pub fn in_memory(meta: LogMeta) -> Self {
        Self {
            meta,
            records: Vec::new(),
            sink: None,
        }
    }

    /// Creates (or truncates) the log file at `path` and writes the header.
    pub fn create(path: &Path, meta: LogMeta) -> Result<Self, StoreError> {
        let mut file = File::create(path).map_err(io_err(path))?;
        let header = Header {
            format: FORMAT.into(),
            version: VERSION,
            meta: meta.clone(),
        };
        let mut line = serde_json::to_string(&header).expect("header serializes");
        line.push('\n');
        file.write_all(line.as_bytes()).map_err(io_err(path))?;
        file.sync_data().map_err(io_err(path))?;
        Ok(Self {
            meta,
            records: Vec::new(),
            sink: Some((path.to_path_buf(), file)),
        })
    }

    /// Reads a log. Stops at the first incomplete or unreadable record line.
    pub fn load(path: &Path) -> Result<(Self, LoadReport), StoreError> {
        let bytes = std::fs::read(path).map_err(io_err(path))?;
        let bad = |reason: &str| StoreError::BadHeader {
            path: path.display().to_string(),
            reason: reason.to_string(),
        };
        let header_end = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| bad("missing header line"))?;
        let header: Header = serde_json::from_slice(&bytes[..header_end])
            .map_err(|e| bad(&e.to_string()))?;
        if header.format != FORMAT || header.version != VERSION {
            return Err(bad("unsupported format or version"));
        }

        let mut records = Vec::new();
        let mut at = header_end + 1;
        while let Some(len) = bytes[at..].iter().position(|&b| b == b'\n') {
            match serde_json::from_slice::<TrialRecord>(&bytes[at..at + len]) {
                Ok(r) if r.trial_index == records.len() => records.push(r),
                _ => break,
            }
            at += len + 1;
        }
        let report = LoadReport {
            records: records.len(),
            discarded_bytes: bytes.len() - at,
        };
        Ok((
            Self {
                meta: header.meta,
                records,
                sink: None,
            },
            report,
        ))
    }

    pub fn meta(&self) -> &LogMeta {
        &self.meta
    }

    pub fn records(&self) -> &[TrialRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Appends one record, flushed to disk before returning when the log
    /// is file-backed.
    pub fn append(&mut self, record: TrialRecord) -> Result<(), StoreError> {
        if record.trial_index != self.records.len() {
            return Err(StoreError::IndexGap {
                expected: self.records.len(),
                got: record.trial_index,
            });
        }
        if let Some((path, file)) = &mut self.sink {
            let mut line = serde_json::to_string(&record).expect("record serializes");
            line.push('\n');
            file.write_all(line.as_bytes()).map_err(io_err(path))?;
            file.sync_data().map_err(io_err(path))?;
        }
        self.records.push(record);
        Ok(())
    }

    /// Minimum-value successful record; the earliest wins ties.
    pub fn best(&self) -> Result<(&Configuration, f64), StoreError> {
        let mut best: Option<(&Configuration, f64)> = None;
        for r in &self.records {
            if let Some(v) = r.ok_value() {
                if best.is_none_or(|(_, b)| v < b) {
                    best = Some((&r.configuration, v));
                }
            }
        }
        best.ok_or(StoreError::NoSuccessfulTrials)
    }

    /// `(completion time, running minimum)` at each successful record.
    pub fn best_trace(&self) -> Vec<(f64, f64)> {
        let mut best = f64::INFINITY;
        self.records
            .iter()
            .filter_map(|r| r.ok_value().map(|v| (r.finished_s, v)))
            .map(|(t, v)| {
                best = best.min(v);
                (t, best)
            })
            .collect()
    }

    /// Results table: one column per parameter, then `objective` (empty for
    /// failed trials) and `elapsed_sec` (search-relative completion time).
    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), StoreError> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = self.meta.parameters.clone();
        header.push("objective".into());
        header.push("elapsed_sec".into());
        w.write_record(&header)?;
        for r in &self.records {
            let mut row: Vec<String> = self
                .meta
                .parameters
                .iter()
                .map(|p| r.configuration.get(p).unwrap_or_default().to_string())
                .collect();
            row.push(r.ok_value().map(|v| v.to_string()).unwrap_or_default());
            row.push(format!("{:.6}", r.finished_s));
            w.write_record(&row)?;
        }
        w.flush().map_err(|e| StoreError::Csv(e.into()))?;
        Ok(())
    }

    /// Tab-separated `wall_clock_s` / `best_so_far` pairs for plotting.
    pub fn write_plot_data<W: Write>(&self, mut out: W) -> io::Result<()> {
        writeln!(out, "wall_clock_s\tbest_so_far")?;
        for (t, v) in self.best_trace() {
            writeln!(out, "{t:.6}\t{v}")?;
        }
        out.flush()
    }
}

/// Percentage improvement of `best` over `baseline` (lower is better).
pub fn improvement_pct(baseline: f64, best: f64) -> Result<f64, StoreError> {
    if baseline.is_nan() || baseline <= 0.0 {
        return Err(StoreError::NonPositiveBaseline(baseline));
    }
    Ok(100.0 * (baseline - best) / baseline)
}

/// Framework time for one trial: total elapsed minus application runtime
/// and compile time.
pub fn overhead(record: &TrialRecord) -> Result<f64, StoreError> {
    let app = record.app_runtime_s.ok_or(StoreError::OverheadUndefined)?;
    let raw = record.elapsed_total_s - app - record.compile_time_s;
    if raw >= 0.0 {
        Ok(raw)
    } else if raw >= -CLOCK_TOLERANCE_S {
        Ok(0.0)
    } else {
        Err(StoreError::InconsistentTiming(raw))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evaluate::TrialStatus;

    fn meta() -> LogMeta {
        LogMeta {
            problem: "t".into(),
            seed: 1,
            space_fingerprint: "abc".into(),
            parameters: vec!["p0".into(), "p1".into()],
            max_evals: Some(10),
            wall_clock_limit_s: None,
            metric: MetricKind::RuntimeS,
            launcher: LauncherKind::LocalShell,
        }
    }

    fn rec(i: usize, v: Option<f64>, t: f64) -> TrialRecord {
        let c = Configuration::from_pairs([("p0", format!("{i}")), ("p1", "x".to_string())]);
        let mut r = match v {
            Some(v) => TrialRecord::ok(c, MetricKind::RuntimeS, v),
            None => TrialRecord::failed(c, MetricKind::RuntimeS, TrialStatus::RunFailed, "boom"),
        };
        r.trial_index = i;
        r.finished_s = t;
        r
    }

    #[test]
    fn append_checks_indices() {
        let mut log = TrialLog::in_memory(meta());
        for i in 0..3 {
            log.append(rec(i, Some(1.0), i as f64)).unwrap();
        }
        assert_eq!(log.len(), 3);
        assert!(matches!(
            log.append(rec(5, Some(1.0), 0.0)),
            Err(StoreError::IndexGap { expected: 3, got: 5 })
        ));
    }

    #[test]
    fn best_and_trace() {
        let mut log = TrialLog::in_memory(meta());
        for (i, (v, t)) in [(5.0, 10.0), (3.0, 20.0), (4.0, 30.0)].into_iter().enumerate() {
            log.append(rec(i, Some(v), t)).unwrap();
        }
        assert_eq!(log.best_trace(), [(10.0, 5.0), (20.0, 3.0), (30.0, 3.0)]);
        assert_eq!(log.best().unwrap().1, 3.0);
    }

    #[test]
    fn best_prefers_earliest_and_skips_failures() {
        let mut log = TrialLog::in_memory(meta());
        assert!(matches!(log.best(), Err(StoreError::NoSuccessfulTrials)));
        log.append(rec(0, None, 1.0)).unwrap();
        assert!(matches!(log.best(), Err(StoreError::NoSuccessfulTrials)));
        log.append(rec(1, Some(2.0), 2.0)).unwrap();
        log.append(rec(2, Some(2.0), 3.0)).unwrap();
        assert_eq!(log.best().unwrap().0.get("p0"), Some("1"));
        assert_eq!(log.best_trace().len(), 2);
    }

    #[test]
    fn improvement_examples() {
        let r2 = |x: f64| (x * 100.0).round() / 100.0;
        assert_eq!(r2(improvement_pct(171.595, 14.427).unwrap()), 91.59);
        assert_eq!(r2(improvement_pct(8384.034, 6606.233).unwrap()), 21.20);
        assert_eq!(improvement_pct(3.0, 3.0).unwrap(), 0.0);
        assert!(improvement_pct(0.0, 1.0).is_err());
        assert!(improvement_pct(-1.0, 1.0).is_err());
    }

    #[test]
    fn overhead_examples() {
        let mut r = rec(0, Some(3.3), 0.0);
        r.elapsed_total_s = 70.0;
        r.app_runtime_s = Some(3.3);
        r.compile_time_s = 2.0;
        assert!((overhead(&r).unwrap() - 64.7).abs() < 1e-9);
        r.elapsed_total_s = 10.0;
        r.app_runtime_s = Some(10.0);
        r.compile_time_s = 0.0;
        assert_eq!(overhead(&r).unwrap(), 0.0);
        r.app_runtime_s = Some(10.03);
        assert_eq!(overhead(&r).unwrap(), 0.0);
        r.app_runtime_s = Some(11.0);
        assert!(matches!(overhead(&r), Err(StoreError::InconsistentTiming(_))));
        assert!(matches!(
            overhead(&rec(0, None, 0.0)),
            Err(StoreError::OverheadUndefined)
        ));
    }

    #[test]
    fn file_round_trip_with_awkward_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trials.log");
        let mut log = TrialLog::create(&path, meta()).unwrap();
        let mut r = rec(0, Some(1.25), 0.5);
        r.configuration = Configuration::from_pairs([
            ("p0", "#pragma omp parallel for, \"quoted\"\n"),
            ("p1", "schedule(static,1)"),
        ]);
        log.append(r.clone()).unwrap();
        log.append(rec(1, None, 0.75)).unwrap();
        let (back, report) = TrialLog::load(&path).unwrap();
        assert_eq!(report, LoadReport { records: 2, discarded_bytes: 0 });
        assert_eq!(back.meta(), log.meta());
        assert_eq!(back.records(), log.records());
        assert_eq!(back.records()[0].configuration, r.configuration);
    }

    #[test]
    fn truncated_tail_is_ignored() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trials.log");
        let mut log = TrialLog::create(&path, meta()).unwrap();
        for i in 0..3 {
            log.append(rec(i, Some(i as f64), i as f64)).unwrap();
        }
        let full = std::fs::read(&path).unwrap();
        let last_start = full[..full.len() - 1].iter().rposition(|&b| b == b'\n').unwrap() + 1;
        for cut in [last_start + 1, last_start + 20, full.len() - 1] {
            std::fs::write(&path, &full[..cut]).unwrap();
            let (back, report) = TrialLog::load(&path).unwrap();
            assert_eq!(back.len(), 2);
            assert_eq!(report.discarded_bytes, cut - last_start);
        }
        std::fs::write(&path, &full[..last_start]).unwrap();
        assert_eq!(TrialLog::load(&path).unwrap().1.records, 2);
    }

    #[test]
    fn missing_or_bad_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.log");
        std::fs::write(&path, "not json\n").unwrap();
        assert!(matches!(TrialLog::load(&path), Err(StoreError::BadHeader { .. })));
        std::fs::write(&path, "").unwrap();
        assert!(matches!(TrialLog::load(&path), Err(StoreError::BadHeader { .. })));
        assert!(matches!(
            TrialLog::load(&dir.path().join("nope")),
            Err(StoreError::Io { .. })
        ));
    }

    #[test]
    fn csv_and_plot_exports() {
        let mut log = TrialLog::in_memory(meta());
        log.append(rec(0, Some(2.5), 1.0)).unwrap();
        log.append(rec(1, None, 2.0)).unwrap();
        log.append(rec(2, Some(1.5), 3.0)).unwrap();
        let mut csv_out = Vec::new();
        log.write_csv(&mut csv_out).unwrap();
        assert_eq!(
            String::from_utf8(csv_out).unwrap(),
            "p0,p1,objective,elapsed_sec\n0,x,2.5,1.000000\n1,x,,2.000000\n2,x,1.5,3.000000\n"
        );
        let mut tsv = Vec::new();
        log.write_plot_data(&mut tsv).unwrap();
        assert_eq!(
            String::from_utf8(tsv).unwrap(),
            "wall_clock_s\tbest_so_far\n1.000000\t2.5\n3.000000\t1.5\n"
        );
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn improvement_identity(b in 1e-3f64..1e6, p in 0.0f64..100.0) {
                let got = improvement_pct(b, b * (1.0 - p / 100.0)).unwrap();
                prop_assert!((got - p).abs() <= 1e-9);
            }

            #[test]
            fn trace_matches_running_minimum(
                vals in proptest::collection::vec(proptest::option::weighted(0.8, 0.0f64..100.0), 1..200),
            ) {
                let mut log = TrialLog::in_memory(meta());
                for (i, v) in vals.iter().enumerate() {
                    log.append(rec(i, *v, i as f64)).unwrap();
                }
                let trace = log.best_trace();
                let mut expected = Vec::new();
                for (i, v) in vals.iter().enumerate() {
                    if let Some(v) = v {
                        let prefix_min = vals[..=i].iter().flatten().cloned().fold(f64::INFINITY, f64::min);
                        prop_assert!(prefix_min <= *v);
                        expected.push((i as f64, prefix_min));
                    }
                }
                prop_assert_eq!(&trace, &expected);
                prop_assert!(trace.windows(2).all(|w| w[1].1 <= w[0].1));
            }
        }
    }
}
