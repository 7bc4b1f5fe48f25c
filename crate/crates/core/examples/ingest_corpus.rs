//! Ingest a corpus file, reporting rejected records with their line and
//! reason code. Without an argument a small corpus with two bad records is
//! written to a temporary file first.
//!
//!     cargo run -p genhai --example ingest_corpus -- corpus.jsonl

use std::path::PathBuf;

use genhai::data::{extract_training_tables, ingest, CorpusFormat};
use genhai::patient_model::SubProgramId;

const DEMO: &str = r#"{"format":"genhai.corpus","version":1}
{"record_id":"a","alpha":{"gender":1,"age_years":71,"admission_type":"emergency","from_healthcare_facility":1,"cerebrovascular_history":0,"diabetes":1,"hospitalized_past_90d":0,"mrsa_positive_past_90d":0},"events":[{"test_type":"nare","result":0,"delay_before":0,"beta":{"ab_days_30":2,"icu_days_7":0,"dialysis_7d":0}},{"test_type":"culture","result":1,"delay_before":3.5,"beta":{"ab_days_30":5,"icu_days_7":1,"dialysis_7d":0}}]}
{"record_id":"b","alpha":{"gender":0,"age_years":44,"admission_type":"elective","from_healthcare_facility":0,"cerebrovascular_history":0,"diabetes":0,"hospitalized_past_90d":1,"mrsa_positive_past_90d":0},"events":[{"test_type":"culture","result":0,"delay_before":0,"beta":{"ab_days_30":0,"icu_days_7":0,"dialysis_7d":0}}]}
{"record_id":"c","alpha":{"gender":0,"age_years":30,"admission_type":"other","from_healthcare_facility":0,"cerebrovascular_history":0,"diabetes":0,"hospitalized_past_90d":0,"mrsa_positive_past_90d":0},"events":[{"test_type":"nare","result":0,"delay_before":0,"beta":{"ab_days_30":45,"icu_days_7":0,"dialysis_7d":0}}]}
"#;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let _tmp;
    let path = match std::env::args().nth(1) {
        Some(p) => PathBuf::from(p),
        None => {
            _tmp = tempfile::tempdir()?;
            let p = _tmp.path().join("demo.jsonl");
            std::fs::write(&p, DEMO)?;
            p
        }
    };
    let report = ingest(&path, CorpusFormat::from_path(&path))?;
    println!("accepted {} records, rejected {}", report.records.len(), report.rejects.len());
    for r in &report.rejects {
        println!("  line {:>4}  {:<20} {:?}  {}", r.line, r.record_id, r.code, r.detail);
    }
    let tables = extract_training_tables(&report.records);
    for id in SubProgramId::ALL {
        println!("{:<14} {:>6} rows", id.name(), tables.get(id).len());
    }
    Ok(())
}
