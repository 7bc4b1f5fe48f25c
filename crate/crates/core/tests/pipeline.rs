use genhai::data::artifact::{load_model, save_model, Provenance};
use genhai::data::synthetic::{generate_synthetic, SyntheticSpec};
use genhai::data::{extract_training_tables, ingest, split, write_corpus, CorpusFormat};
use genhai::patient_model::{AdmissionFeatures, SubProgramId, TestTimeFeatures};
use genhai::queries::{QueryEngine, QuerySpec};
use genhai::svi::{fit_all, fit_selected, TrainConfig};

fn small_config() -> TrainConfig {
    TrainConfig {
        steps: 200,
        batch_size: 128,
        seed: 9,
        ..TrainConfig::default()
    }
}

#[test]
fn corpus_formats_round_trip_through_ingest() {
    let corpus = generate_synthetic(&SyntheticSpec::default_spec(300, 1)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    for (name, fmt) in [("c.jsonl", CorpusFormat::Jsonl), ("c.csv", CorpusFormat::Csv)] {
        let path = dir.path().join(name);
        write_corpus(&path, &corpus.records, fmt).unwrap();
        let report = ingest(&path, CorpusFormat::from_path(&path)).unwrap();
        assert!(report.rejects.is_empty(), "{name}: {:?}", report.rejects.first());
        assert_eq!(report.records, corpus.records);
    }
}

#[test]
fn train_save_load_query() {
    let corpus = generate_synthetic(&SyntheticSpec::default_spec(1500, 2)).unwrap();
    let (train, test) = split(&corpus.records, 0.8, 3);
    assert_eq!(train.len() + test.len(), 1500);
    let tables = extract_training_tables(&train);
    let (registry, traces) = fit_all(&tables, &small_config(), 2).unwrap();
    assert_eq!(traces.len(), 13);
    assert!(traces.iter().all(|t| t.final_smoothed().is_finite()));

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.json");
    save_model(&registry, Provenance::default(), &path).unwrap();
    let loaded = load_model(&path).unwrap();

    let alpha = AdmissionFeatures {
        age_years: 70.0,
        ..Default::default()
    };
    let spec = QuerySpec::extended_stay(alpha, TestTimeFeatures::default(), false, 1.0, 5.0).with_runs(2000, 10, 4);
    let a = QueryEngine::new(&registry, 1).unwrap().estimate(&spec).unwrap();
    let b = QueryEngine::new(&loaded, 3).unwrap().estimate(&spec).unwrap();
    assert_eq!(a, b);
    assert!((0.0..=1.0).contains(&a.estimate));
}

#[test]
fn training_is_order_independent() {
    let corpus = generate_synthetic(&SyntheticSpec::default_spec(400, 4)).unwrap();
    let tables = extract_training_tables(&corpus.records);
    let ids = [SubProgramId::RI, SubProgramId::DelayNeg, SubProgramId::Beta1Ab];
    let mut rev = ids;
    rev.reverse();
    let fwd = fit_selected(&tables, &ids, &small_config(), 1).unwrap();
    let back = fit_selected(&tables, &rev, &small_config(), 3).unwrap();
    for (f, _) in &fwd {
        let (b, _) = back.iter().find(|(b, _)| b.id() == f.id()).unwrap();
        assert_eq!(f, b);
    }
}

#[test]
fn four_workers_train_faster_than_one() {
    let cores = std::thread::available_parallelism().map_or(1, |n| n.get());
    if cores < 4 {
        eprintln!("skipping: {cores} core(s) available, need 4");
        return;
    }
    let corpus = generate_synthetic(&SyntheticSpec::default_spec(10_000, 5)).unwrap();
    let tables = extract_training_tables(&corpus.records);
    let config = TrainConfig {
        steps: 400,
        ..small_config()
    };
    let time = |workers| {
        let started = std::time::Instant::now();
        fit_all(&tables, &config, workers).unwrap();
        started.elapsed()
    };
    let one = time(1);
    let four = time(4);
    assert!(four < one, "4 workers {four:?} vs 1 worker {one:?}");
}
