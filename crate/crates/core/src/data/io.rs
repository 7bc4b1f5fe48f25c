//! Corpus readers and writers.
//!
//! JSONL: an optional header line `{"format":"genhai.corpus","version":1}`
//! followed by one record object per line. CSV: one row per test with the
//! admission features repeated on every row of a record.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::records::{check_beta_bounds, validate_parts, HospitalizationRecord, RejectCode, RejectReason};
use crate::bit;
use crate::patient_model::{AdmissionFeatures, AdmissionType, TestTimeFeatures};
use crate::simulators::{TestEvent, TestType};

pub const CORPUS_FORMAT: &str = "genhai.corpus";
pub const CORPUS_VERSION: u32 = 1;

pub const CSV_COLUMNS: [&str; 16] = [
    "record_id",
    "gender",
    "age_years",
    "admission_type",
    "from_healthcare_facility",
    "cerebrovascular_history",
    "diabetes",
    "hospitalized_past_90d",
    "mrsa_positive_past_90d",
    "test_index",
    "test_type",
    "result",
    "delay_before",
    "ab_days_30",
    "icu_days_7",
    "dialysis_7d",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorpusFormat {
    Jsonl,
    Csv,
}

impl CorpusFormat {
    /// Guess from the file extension; anything but `.csv` is JSONL.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(e) if e.eq_ignore_ascii_case("csv") => CorpusFormat::Csv,
            _ => CorpusFormat::Jsonl,
        }
    }
}

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {source}")]
    Read {
        line: u64,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Parse { line: u64, message: String },
    #[error("line {line}: unsupported corpus header: {message}")]
    Header { line: u64, message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Reject {
    /// First line of the rejected record (1-based).
    pub line: u64,
    pub record_id: String,
    pub code: RejectCode,
    pub detail: String,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct IngestReport {
    pub records: Vec<HospitalizationRecord>,
    pub rejects: Vec<Reject>,
}

impl IngestReport {
    fn accept(&mut self, seen: &mut HashSet<String>, line: u64, record: HospitalizationRecord, check: Result<(), RejectReason>) {
        let check = check.and_then(|()| {
            if seen.insert(record.record_id.clone()) {
                Ok(())
            } else {
                Err(RejectReason::new(RejectCode::DuplicateId, "record id seen earlier in the file"))
            }
        });
        match check {
            Ok(()) => self.records.push(record),
            Err(r) => self.rejects.push(Reject {
                line,
                record_id: record.record_id,
                code: r.code,
                detail: r.detail,
            }),
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format: String,
    version: u32,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawBeta {
    ab_days_30: i64,
    icu_days_7: i64,
    #[serde(with = "bit")]
    dialysis_7d: bool,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawEvent {
    test_type: TestType,
    #[serde(with = "bit")]
    result: bool,
    delay_before: f64,
    beta: RawBeta,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRecord {
    record_id: String,
    alpha: AdmissionFeatures,
    events: Vec<RawEvent>,
}

fn to_event(i: usize, e: RawEvent) -> Result<TestEvent, RejectReason> {
    check_beta_bounds(i, e.beta.ab_days_30, e.beta.icu_days_7)?;
    Ok(TestEvent {
        test_type: e.test_type,
        result: e.result,
        delay_before: e.delay_before,
        beta: TestTimeFeatures::new(e.beta.ab_days_30 as u32, e.beta.icu_days_7 as u32, e.beta.dialysis_7d),
    })
}

fn finish_record(record_id: String, alpha: AdmissionFeatures, raw: Vec<RawEvent>) -> (HospitalizationRecord, Result<(), RejectReason>) {
    let mut events = Vec::with_capacity(raw.len());
    let mut check = Ok(());
    for (i, e) in raw.into_iter().enumerate() {
        match to_event(i, e) {
            Ok(ev) => events.push(ev),
            Err(r) => {
                check = Err(r);
                break;
            }
        }
    }
    let check = check.and_then(|()| validate_parts(&alpha, &events));
    (HospitalizationRecord { record_id, alpha, events }, check)
}

fn open(path: &Path) -> Result<File, IngestError> {
    File::open(path).map_err(|source| IngestError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn ingest(path: &Path, format: CorpusFormat) -> Result<IngestReport, IngestError> {
    let file = open(path)?;
    match format {
        CorpusFormat::Jsonl => read_jsonl(BufReader::new(file)),
        CorpusFormat::Csv => read_csv(file),
    }
}

/// Read a JSONL corpus from any buffered reader.
pub fn read_jsonl<R: BufRead>(reader: R) -> Result<IngestReport, IngestError> {
    let mut report = IngestReport::default();
    let mut seen = HashSet::new();
    let mut first = true;
    for (i, line) in reader.lines().enumerate() {
        let line_no = i as u64 + 1;
        let line = line.map_err(|source| IngestError::Read { line: line_no, source })?;
        let text = line.trim();
        if text.is_empty() {
            continue;
        }
        if std::mem::take(&mut first) && text.contains("\"format\"") {
            let header: Header = serde_json::from_str(text).map_err(|e| IngestError::Header {
                line: line_no,
                message: e.to_string(),
            })?;
            if header.format != CORPUS_FORMAT || header.version != CORPUS_VERSION {
                return Err(IngestError::Header {
                    line: line_no,
                    message: format!("{} version {}", header.format, header.version),
                });
            }
            continue;
        }
        let raw: RawRecord = serde_json::from_str(text).map_err(|e| IngestError::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        let (record, check) = finish_record(raw.record_id, raw.alpha, raw.events);
        report.accept(&mut seen, line_no, record, check);
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CsvRow {
    record_id: String,
    gender: u8,
    age_years: f64,
    admission_type: AdmissionType,
    from_healthcare_facility: u8,
    cerebrovascular_history: u8,
    diabetes: u8,
    hospitalized_past_90d: u8,
    mrsa_positive_past_90d: u8,
    test_index: u64,
    test_type: TestType,
    result: u8,
    delay_before: f64,
    ab_days_30: i64,
    icu_days_7: i64,
    dialysis_7d: u8,
}

fn bit_of(line: u64, field: &str, v: u8) -> Result<bool, IngestError> {
    match v {
        0 => Ok(false),
        1 => Ok(true),
        _ => Err(IngestError::Parse {
            line,
            message: format!("{field} must be 0 or 1, got {v}"),
        }),
    }
}

impl CsvRow {
    fn alpha(&self, line: u64) -> Result<AdmissionFeatures, IngestError> {
        Ok(AdmissionFeatures {
            gender: bit_of(line, "gender", self.gender)?,
            age_years: self.age_years,
            admission_type: self.admission_type,
            from_healthcare_facility: bit_of(line, "from_healthcare_facility", self.from_healthcare_facility)?,
            cerebrovascular_history: bit_of(line, "cerebrovascular_history", self.cerebrovascular_history)?,
            diabetes: bit_of(line, "diabetes", self.diabetes)?,
            hospitalized_past_90d: bit_of(line, "hospitalized_past_90d", self.hospitalized_past_90d)?,
            mrsa_positive_past_90d: bit_of(line, "mrsa_positive_past_90d", self.mrsa_positive_past_90d)?,
        })
    }

    fn event(&self, line: u64) -> Result<RawEvent, IngestError> {
        Ok(RawEvent {
            test_type: self.test_type,
            result: bit_of(line, "result", self.result)?,
            delay_before: self.delay_before,
            beta: RawBeta {
                ab_days_30: self.ab_days_30,
                icu_days_7: self.icu_days_7,
                dialysis_7d: bit_of(line, "dialysis_7d", self.dialysis_7d)?,
            },
        })
    }
}

struct PendingCsv {
    line: u64,
    record_id: String,
    alpha: AdmissionFeatures,
    events: Vec<RawEvent>,
    problem: Option<RejectReason>,
}

/// Read a CSV corpus. Rows of a record must be contiguous.
pub fn read_csv<R: Read>(reader: R) -> Result<IngestReport, IngestError> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let headers = rdr.headers().map_err(|e| IngestError::Parse {
        line: 1,
        message: e.to_string(),
    })?;
    if !headers.is_empty() && headers.iter().ne(CSV_COLUMNS) {
        return Err(IngestError::Header {
            line: 1,
            message: format!("expected columns {}", CSV_COLUMNS.join(",")),
        });
    }
    let mut report = IngestReport::default();
    let mut seen = HashSet::new();
    let mut pending: Option<PendingCsv> = None;
    let flush = |p: PendingCsv, report: &mut IngestReport, seen: &mut HashSet<String>| {
        let (record, check) = finish_record(p.record_id, p.alpha, p.events);
        let check = match p.problem {
            Some(r) => Err(r),
            None => check,
        };
        report.accept(seen, p.line, record, check);
    };
    let headers = headers.clone();
    let mut raw = csv::StringRecord::new();
    loop {
        let more = rdr.read_record(&mut raw).map_err(|e| IngestError::Parse {
            line: e.position().map_or(0, |p| p.line()),
            message: e.to_string(),
        })?;
        if !more {
            break;
        }
        let line = raw.position().map_or(0, |p| p.line());
        let row: CsvRow = raw.deserialize(Some(&headers)).map_err(|e| IngestError::Parse {
            line,
            message: e.to_string(),
        })?;
        let alpha = row.alpha(line)?;
        let event = row.event(line)?;
        match &mut pending {
            Some(p) if p.record_id == row.record_id => {
                if p.problem.is_none() {
                    if p.alpha != alpha {
                        p.problem = Some(RejectReason::new(
                            RejectCode::AlphaInconsistent,
                            format!("line {line} disagrees with the record's first row"),
                        ));
                    } else if row.test_index != p.events.len() as u64 {
                        p.problem = Some(RejectReason::new(
                            RejectCode::TestOrder,
                            format!("line {line} has test_index {} where {} was expected", row.test_index, p.events.len()),
                        ));
                    }
                }
                p.events.push(event);
            }
            _ => {
                if let Some(p) = pending.take() {
                    flush(p, &mut report, &mut seen);
                }
                let problem = (row.test_index != 0).then(|| {
                    RejectReason::new(RejectCode::TestOrder, format!("record starts at test_index {}", row.test_index))
                });
                pending = Some(PendingCsv {
                    line,
                    record_id: row.record_id,
                    alpha,
                    events: vec![event],
                    problem,
                });
            }
        }
    }
    if let Some(p) = pending.take() {
        flush(p, &mut report, &mut seen);
    }
    Ok(report)
}

#[derive(Debug, Error)]
pub enum WriteError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Stream(#[from] std::io::Error),
}

pub fn write_jsonl<W: Write>(mut w: W, records: &[HospitalizationRecord]) -> Result<(), WriteError> {
    serde_json::to_writer(
        &mut w,
        &Header {
            format: CORPUS_FORMAT.into(),
            version: CORPUS_VERSION,
        },
    )?;
    w.write_all(b"\n")?;
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_csv<W: Write>(w: W, records: &[HospitalizationRecord]) -> Result<(), WriteError> {
    let mut wtr = csv::WriterBuilder::new().has_headers(false).from_writer(w);
    wtr.write_record(CSV_COLUMNS)?;
    let u = |b: bool| u8::from(b);
    for r in records {
        let a = &r.alpha;
        for (i, e) in r.events.iter().enumerate() {
            wtr.serialize(CsvRow {
                record_id: r.record_id.clone(),
                gender: u(a.gender),
                age_years: a.age_years,
                admission_type: a.admission_type,
                from_healthcare_facility: u(a.from_healthcare_facility),
                cerebrovascular_history: u(a.cerebrovascular_history),
                diabetes: u(a.diabetes),
                hospitalized_past_90d: u(a.hospitalized_past_90d),
                mrsa_positive_past_90d: u(a.mrsa_positive_past_90d),
                test_index: i as u64,
                test_type: e.test_type,
                result: u(e.result),
                delay_before: e.delay_before,
                ab_days_30: i64::from(e.beta.ab_days_30),
                icu_days_7: i64::from(e.beta.icu_days_7),
                dialysis_7d: u(e.beta.dialysis_7d),
            })?;
        }
    }
    wtr.flush()?;
    Ok(())
}

pub fn write_corpus(path: &Path, records: &[HospitalizationRecord], format: CorpusFormat) -> Result<(), WriteError> {
    let file = File::create(path).map_err(|source| WriteError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let w = BufWriter::new(file);
    match format {
        CorpusFormat::Jsonl => write_jsonl(w, records),
        CorpusFormat::Csv => write_csv(w, records),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_event() -> HospitalizationRecord {
        HospitalizationRecord {
            record_id: "a-1".into(),
            alpha: AdmissionFeatures {
                age_years: 71.25,
                diabetes: true,
                admission_type: AdmissionType::Elective,
                ..Default::default()
            },
            events: vec![
                TestEvent {
                    test_type: TestType::Nare,
                    result: false,
                    delay_before: 0.0,
                    beta: TestTimeFeatures::new(30, 7, true),
                },
                TestEvent {
                    test_type: TestType::Culture,
                    result: true,
                    delay_before: 0.1 + 0.2,
                    beta: TestTimeFeatures::new(3, 0, false),
                },
            ],
        }
    }

    #[test]
    fn jsonl_round_trip_is_exact() {
        let recs = vec![two_event()];
        let mut buf = Vec::new();
        write_jsonl(&mut buf, &recs).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("{\"format\":\"genhai.corpus\",\"version\":1}\n"));
        let report = read_jsonl(&buf[..]).unwrap();
        assert!(report.rejects.is_empty());
        assert_eq!(report.records, recs);
        assert_eq!(report.records[0].events[1].delay_before.to_bits(), (0.1f64 + 0.2).to_bits());
        let mut again = Vec::new();
        write_jsonl(&mut again, &report.records).unwrap();
        assert_eq!(buf, again);
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let recs = vec![two_event(), HospitalizationRecord { record_id: "b".into(), ..two_event() }];
        let mut buf = Vec::new();
        write_csv(&mut buf, &recs).unwrap();
        let report = read_csv(&buf[..]).unwrap();
        assert!(report.rejects.is_empty(), "{:?}", report.rejects);
        assert_eq!(report.records, recs);
    }

    #[test]
    fn empty_input() {
        let r = read_jsonl(&b""[..]).unwrap();
        assert!(r.records.is_empty() && r.rejects.is_empty());
        let r = read_csv(&b""[..]).unwrap();
        assert!(r.records.is_empty() && r.rejects.is_empty());
    }

    #[test]
    fn culture_negative_is_rejected() {
        let mut rec = two_event();
        rec.events[1].result = false;
        let mut buf = Vec::new();
        write_jsonl(&mut buf, &[two_event(), HospitalizationRecord { record_id: "x".into(), ..rec }]).unwrap();
        let report = read_jsonl(&buf[..]).unwrap();
        assert_eq!(report.records.len(), 1);
        assert_eq!(report.rejects[0].code, RejectCode::CultureNeg);
        assert_eq!(report.rejects[0].line, 3);
    }

    #[test]
    fn out_of_range_counts_are_rejects_not_errors() {
        let line = r#"{"record_id":"n","alpha":{"gender":0,"age_years":40.0,"admission_type":"emergency","from_healthcare_facility":0,"cerebrovascular_history":0,"diabetes":0,"hospitalized_past_90d":0,"mrsa_positive_past_90d":0},"events":[{"test_type":"nare","result":0,"delay_before":0.0,"beta":{"ab_days_30":-1,"icu_days_7":0,"dialysis_7d":0}}]}"#;
        let report = read_jsonl(line.as_bytes()).unwrap();
        assert_eq!(report.rejects[0].code, RejectCode::BetaBounds);
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let mut buf = Vec::new();
        write_jsonl(&mut buf, &[two_event()]).unwrap();
        buf.extend_from_slice(b"{not json\n");
        match read_jsonl(&buf[..]) {
            Err(IngestError::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
        let bad = format!("{}\na-1,0,40,emergency,0,0,0,0,0,zero,nare,0,0,0,0,0\n", CSV_COLUMNS.join(","));
        match read_csv(bad.as_bytes()) {
            Err(IngestError::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn wrong_version_header() {
        let text = "{\"format\":\"genhai.corpus\",\"version\":2}\n";
        assert!(matches!(read_jsonl(text.as_bytes()), Err(IngestError::Header { line: 1, .. })));
    }
}
