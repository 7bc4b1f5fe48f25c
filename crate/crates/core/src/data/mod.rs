pub mod artifact;
pub mod extract;
pub mod io;
pub mod records;
pub mod synthetic;
pub mod tables;

pub use extract::extract_training_tables;
pub use io::{ingest, write_corpus, CorpusFormat, IngestError, IngestReport, Reject};
pub use records::{split, HospitalizationRecord, RejectCode};
pub use tables::{TrainingTable, TrainingTables};
