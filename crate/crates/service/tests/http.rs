use axum::body::Body;
use axum::http::{Request, StatusCode};
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

use genhai::data::artifact::{ModelArtifact, Provenance};
use genhai::distributions::logistic;
use genhai::patient_model::SubProgramId;
use genhai::rigged::RiggedRegistry;
use genhai::subprograms::Registry;
use genhai_service::{router, AppState, LoadedModel, COMPUTE_HEADER, SCHEMA};

fn state_for(reg: &Registry) -> AppState {
    let artifact = ModelArtifact::from_registry(reg, Provenance::default());
    AppState::new(Some(LoadedModel::from_artifact(artifact).unwrap()), 2).unwrap()
}

fn rigged() -> AppState {
    let reg = RiggedRegistry::new()
        .result_prob(0.2)
        .cont_prob(0.6)
        .intercept(SubProgramId::RI, -1.0)
        .weight(SubProgramId::RI, "ln1p_delay_prev", 0.5)
        .build();
    state_for(&reg)
}

async fn call(st: &AppState, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Option<String>, Value) {
    let req = Request::builder().method(method).uri(uri).header("content-type", "application/json");
    let req = match body {
        Some(b) => req.body(Body::from(b.to_string())).unwrap(),
        None => req.body(Body::empty()).unwrap(),
    };
    let resp = router(st.clone()).oneshot(req).await.unwrap();
    let status = resp.status();
    let compute = resp.headers().get(COMPUTE_HEADER).map(|v| v.to_str().unwrap().to_string());
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    let v = serde_json::from_slice(&bytes).unwrap_or(Value::Null);
    (status, compute, v)
}

fn alpha() -> Value {
    json!({
        "gender": 1, "age_years": 67.5, "admission_type": "emergency", "from_healthcare_facility": 1,
        "cerebrovascular_history": 0, "diabetes": 0, "hospitalized_past_90d": 1, "mrsa_positive_past_90d": 1
    })
}

fn beta() -> Value {
    json!({"ab_days_30": 3, "icu_days_7": 0, "dialysis_7d": 0})
}

fn validator(def: &str) -> jsonschema::Validator {
    let mut schema: Value = serde_json::from_str(SCHEMA).unwrap();
    schema["$ref"] = json!(format!("#/$defs/{def}"));
    jsonschema::validator_for(&schema).unwrap()
}

fn assert_valid(def: &str, doc: &Value) {
    let v = validator(def);
    let errors: Vec<String> = v.iter_errors(doc).map(|e| format!("{} at {}", e, e.instance_path)).collect();
    assert!(errors.is_empty(), "{def}: {errors:?}\n{doc}");
}

#[tokio::test]
async fn health_reflects_model_state() {
    let empty = AppState::new(None, 1).unwrap();
    let (s, _, v) = call(&empty, "GET", "/api/v1/health", None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["status"], "degraded");
    assert_valid("Health", &v);

    let (_, _, v) = call(&rigged(), "GET", "/api/v1/health", None).await;
    assert_eq!(v, json!({"status": "ok"}));

    // an infinite delay scale makes every simulated stay fail
    let broken = RiggedRegistry::new()
        .cont_prob(1.0)
        .param(SubProgramId::DelayNeg, "log_sigma1", 800.0)
        .param(SubProgramId::DelayNeg, "log_sigma2", 800.0)
        .param(SubProgramId::DelayNeg, "log_sigma3", 800.0)
        .build();
    let (_, _, v) = call(&state_for(&broken), "GET", "/api/v1/health", None).await;
    assert_eq!(v["status"], "degraded");
    assert!(v["reason"].as_str().unwrap().contains("smoke query failed"), "{v}");
}

#[tokio::test]
async fn endpoints_need_a_model() {
    let empty = AppState::new(None, 1).unwrap();
    let q = json!({"kind": "admission_risk", "alpha": alpha()});
    for (m, uri, body) in [
        ("POST", "/api/v1/query", Some(q.clone())),
        ("POST", "/api/v1/sweep", Some(json!({"query": q, "axis": "tau_p", "grid": [1.0]}))),
        ("GET", "/api/v1/model", None),
    ] {
        let (s, _, v) = call(&empty, m, uri, body).await;
        assert_eq!(s, StatusCode::SERVICE_UNAVAILABLE, "{uri}");
        assert_eq!(v["error"], "model_not_loaded");
        assert_valid("ErrorBody", &v);
    }
}

#[tokio::test]
async fn admission_trivial_cases() {
    let never = state_for(&RiggedRegistry::new().build());
    let always = state_for(&RiggedRegistry::new().nare_prob(0.0).build());
    let q = json!({"kind": "admission_risk", "alpha": alpha(), "n_sequences": 500, "n_posterior_draws": 5, "seed": 1});
    let (s, compute, v) = call(&never, "POST", "/api/v1/query", Some(q.clone())).await;
    assert_eq!(s, StatusCode::OK);
    assert!(compute.unwrap().parse::<f64>().unwrap() >= 0.0);
    assert_eq!(v["estimate"], 0.0);
    let (_, _, v) = call(&always, "POST", "/api/v1/query", Some(q)).await;
    assert_eq!(v["estimate"], 1.0);
    assert_valid("ApiQueryResponse", &v);
}

#[tokio::test]
async fn same_seed_same_body_and_assigned_seed_replays() {
    let st = rigged();
    let q = json!({"kind": "retest_now", "alpha": alpha(), "beta1": beta(), "r1": 0, "tau_p": 2.0, "n_sequences": 4000, "n_posterior_draws": 8, "seed": 77});
    let (_, _, a) = call(&st, "POST", "/api/v1/query", Some(q.clone())).await;
    let (_, _, b) = call(&st, "POST", "/api/v1/query", Some(q)).await;
    assert_eq!(a, b);
    assert_eq!(a["seed_assigned"], false);
    let p = logistic(-1.0 + 0.5 * 3f64.ln());
    let est = a["estimate"].as_f64().unwrap();
    assert!((est - p).abs() < 3.0 * (p * (1.0 - p) / 4000.0).sqrt(), "{est} vs {p}");

    let q = json!({"kind": "admission_risk", "alpha": alpha(), "n_sequences": 1000, "n_posterior_draws": 4});
    let (_, _, first) = call(&st, "POST", "/api/v1/query", Some(q)).await;
    assert_eq!(first["seed_assigned"], true);
    let mut replay = first["inputs"].clone();
    assert_eq!(replay["seed"], first["seed"]);
    replay["n_sequences"] = json!(1000);
    let (_, _, second) = call(&st, "POST", "/api/v1/query", Some(replay)).await;
    assert_eq!(second["estimate"], first["estimate"]);
    assert_eq!(second["seed_assigned"], false);
    assert_valid("ApiQueryResponse", &first);
}

#[tokio::test]
async fn concurrent_identical_requests_agree() {
    let st = rigged();
    let q = json!({"kind": "admission_risk", "alpha": alpha(), "n_sequences": 3000, "n_posterior_draws": 10, "seed": 5});
    let handles: Vec<_> = (0..6)
        .map(|_| {
            let (st, q) = (st.clone(), q.clone());
            tokio::spawn(async move { call(&st, "POST", "/api/v1/query", Some(q)).await.2 })
        })
        .collect();
    let mut bodies = Vec::new();
    for h in handles {
        bodies.push(h.await.unwrap());
    }
    assert!(bodies.windows(2).all(|w| w[0] == w[1]));
}

#[tokio::test]
async fn field_errors_are_400_and_named() {
    let st = rigged();
    let mut bad_age = alpha();
    bad_age["age_years"] = json!(200);
    let mut bad_type = alpha();
    bad_type["admission_type"] = json!("walk_in");
    let cases = [
        (json!({"kind": "admission_risk", "alpha": bad_age}), "alpha.age_years"),
        (json!({"kind": "admission_risk", "alpha": bad_type}), "alpha.admission_type"),
        (json!({"kind": "teleport", "alpha": alpha()}), "kind"),
        (json!({"kind": "admission_risk", "alpha": alpha(), "colour": 1}), "colour"),
        (json!({"alpha": alpha()}), "kind"),
        (json!({"kind": "retest_now", "alpha": alpha(), "beta1": {"ab_days_30": 31, "icu_days_7": 0, "dialysis_7d": 0}, "r1": 0, "tau_p": 1}), "beta1.ab_days_30"),
        (json!({"kind": "retest_now", "alpha": alpha(), "beta1": beta(), "r1": 2, "tau_p": 1}), "r1"),
        (json!({"kind": "retest_now", "alpha": alpha(), "beta1": beta(), "r1": 0, "tau_p": -1}), "tau_p"),
        (json!({"kind": "admission_risk", "alpha": alpha(), "n_sequences": 0}), "n_sequences"),
        (json!({"kind": "admission_risk", "alpha": alpha(), "n_sequences": 2_000_000}), "n_sequences"),
    ];
    for (body, field) in cases {
        let (s, _, v) = call(&st, "POST", "/api/v1/query", Some(body.clone())).await;
        assert_eq!(s, StatusCode::BAD_REQUEST, "{body}: {v}");
        assert_eq!(v["error"], "invalid_field", "{v}");
        assert_eq!(v["field"], field, "{v}");
        assert_valid("ErrorBody", &v);
    }
    let req = Request::builder().method("POST").uri("/api/v1/query").body(Body::from("{not json")).unwrap();
    let resp = router(st.clone()).oneshot(req).await.unwrap();
    assert_eq!(resp.status(), StatusCode::BAD_REQUEST);
    let big = format!("{{\"pad\":\"{}\"}}", "x".repeat(70_000));
    let req = Request::builder().method("POST").uri("/api/v1/query").body(Body::from(big)).unwrap();
    assert_eq!(router(st).oneshot(req).await.unwrap().status(), StatusCode::PAYLOAD_TOO_LARGE);
}

#[tokio::test]
async fn kind_mismatches_are_422() {
    let st = rigged();
    let mut never_positive = alpha();
    never_positive["mrsa_positive_past_90d"] = json!(0);
    let cases = [
        (json!({"kind": "admission_risk", "alpha": alpha(), "tau_p": 1.0}), "tau_p"),
        (json!({"kind": "extended_stay_risk", "alpha": alpha(), "beta1": beta(), "r1": 0, "tau_p": 1.0}), "tau_m"),
        (json!({"kind": "retest_now", "alpha": alpha(), "r1": 0, "tau_p": 1.0}), "beta1"),
        (json!({"kind": "deisolation", "alpha": alpha(), "beta1": beta(), "r1": 1, "tau_p": 1.0}), "r1"),
        (json!({"kind": "deisolation", "alpha": never_positive, "beta1": beta(), "r1": 0, "tau_p": 1.0}), "alpha.mrsa_positive_past_90d"),
        (json!({"kind": "retest_now", "alpha": alpha(), "beta1": beta(), "r1": 0, "tau_p": 1.0, "predicate": "all_negative"}), "predicate"),
    ];
    let schema = validator("ApiQueryRequest");
    for (body, field) in cases {
        assert!(!schema.is_valid(&body), "schema should reject {body}");
        let (s, _, v) = call(&st, "POST", "/api/v1/query", Some(body.clone())).await;
        assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY, "{body}: {v}");
        assert_eq!(v["error"], "kind_mismatch");
        assert_eq!(v["field"], field);
    }
}

#[tokio::test]
async fn sweeps() {
    let st = rigged();
    let q = json!({"kind": "extended_stay_risk", "alpha": alpha(), "beta1": beta(), "r1": 0, "tau_p": 1.0, "tau_m": 1.0,
                   "n_sequences": 2000, "n_posterior_draws": 10, "seed": 3});
    let grid: Vec<f64> = (1..=20).map(|i| i as f64 * 0.5).collect();
    let (s, compute, v) = call(&st, "POST", "/api/v1/sweep", Some(json!({"query": q, "axis": "tau_m", "grid": grid}))).await;
    assert_eq!(s, StatusCode::OK, "{v}");
    assert!(compute.is_some());
    assert_valid("ApiSweepResponse", &v);
    let est: Vec<f64> = v["points"].as_array().unwrap().iter().map(|p| p["result"]["estimate"].as_f64().unwrap()).collect();
    assert_eq!(est.len(), 20);
    assert!(est.windows(2).all(|w| w[1] >= w[0]), "{est:?}");

    // one point equals the matching query
    let mut single = q.clone();
    single["tau_m"] = json!(4.0);
    let (_, _, point) = call(&st, "POST", "/api/v1/sweep", Some(json!({"query": q, "axis": "tau_m", "grid": [4.0]}))).await;
    let (_, _, direct) = call(&st, "POST", "/api/v1/query", Some(single)).await;
    assert_eq!(point["points"][0]["result"]["estimate"], direct["estimate"]);
    assert_eq!(point["points"][0]["result"]["posterior_band"], direct["posterior_band"]);

    let (s, _, v) = call(&st, "POST", "/api/v1/sweep", Some(json!({"query": q, "axis": "tau_m", "grid": vec![1.0; 201]}))).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert_eq!(v["field"], "grid");
    let adm = json!({"kind": "admission_risk", "alpha": alpha()});
    let (s, _, v) = call(&st, "POST", "/api/v1/sweep", Some(json!({"query": adm, "axis": "tau_p", "grid": [1.0]}))).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(v["field"], "axis");
    let (s, _, v) = call(&st, "POST", "/api/v1/sweep", Some(json!({"query": {"kind": "admission_risk"}, "axis": "tau_p", "grid": [1.0]}))).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert_eq!(v["field"], "query.alpha");
}

#[tokio::test]
async fn retest_sweep_is_flat_without_delay_weight() {
    let st = state_for(&RiggedRegistry::new().result_prob(0.35).build());
    let q = json!({"kind": "retest_now", "alpha": alpha(), "beta1": beta(), "r1": 1, "tau_p": 0.0,
                   "n_sequences": 2000, "n_posterior_draws": 4, "seed": 11});
    let (_, _, v) = call(&st, "POST", "/api/v1/sweep", Some(json!({"query": q, "axis": "tau_p", "grid": [0.0, 2.0, 9.0]}))).await;
    let pts = v["points"].as_array().unwrap();
    assert!(pts.iter().all(|p| p["result"] == pts[0]["result"]));
}

#[tokio::test]
async fn model_metadata_and_schema() {
    let st = rigged();
    let (s, _, v) = call(&st, "GET", "/api/v1/model", None).await;
    assert_eq!(s, StatusCode::OK);
    assert_valid("ModelInfo", &v);
    let subs = v["subprograms"].as_array().unwrap();
    assert_eq!(subs.len(), 13);
    for sp in subs {
        let id = SubProgramId::from_name(sp["name"].as_str().unwrap()).unwrap();
        assert_eq!(sp["input_dim"].as_u64().unwrap() as usize, id.input_dim());
        assert_eq!(sp["conditioning"].as_array().unwrap().len(), id.input_dim());
    }
    let (_, _, again) = call(&rigged(), "GET", "/api/v1/model", None).await;
    assert_eq!(v["provenance_hash"], again["provenance_hash"]);

    let (s, _, schema) = call(&st, "GET", "/api/v1/schema", None).await;
    assert_eq!(s, StatusCode::OK);
    assert!(schema["$defs"]["ApiSweepResponse"].is_object());
}

#[tokio::test]
async fn serves_over_tcp_and_drains_on_shutdown() {
    let listener = genhai_service::bind("127.0.0.1:0".parse().unwrap()).await.unwrap();
    let addr = listener.local_addr().unwrap();
    let (tx, rx) = tokio::sync::oneshot::channel::<()>();
    let server = tokio::spawn(genhai_service::serve(listener, rigged(), async {
        let _ = rx.await;
    }));
    let mut stream = tokio::net::TcpStream::connect(addr).await.unwrap();
    use tokio::io::{AsyncReadExt, AsyncWriteExt};
    stream
        .write_all(b"GET /api/v1/health HTTP/1.1\r\nhost: localhost\r\nconnection: close\r\n\r\n")
        .await
        .unwrap();
    let mut out = String::new();
    stream.read_to_string(&mut out).await.unwrap();
    assert!(out.starts_with("HTTP/1.1 200"), "{out}");
    assert!(out.contains("\"status\":\"ok\""));
    tx.send(()).unwrap();
    server.await.unwrap().unwrap();
}
